use moldsense::explain::{
    colormap, grad_cam, heatmap_from_activations, normalize_unit, overlay, render_heatmap, Heatmap, DEFAULT_ALPHA,
};
use moldsense::image::RgbImage;
use moldsense::model::{FdraModel, ModelConfig};
use moldsense::rng::SplitMix64;
use moldsense::synth::gen_image;
use moldsense::tensor::Tensor;
use proptest::prelude::*;

fn constant_heatmap(side: usize, v: f64) -> Heatmap {
    Heatmap {
        width: side,
        height: side,
        values: vec![v; side * side],
        class_index: 0,
        target_layer: "test",
        degenerate: false,
    }
}

/// Bilinear weight of source cell `cell` at output pixel `o` for an integer
/// upscale factor, written as a tent function with edge clamping.
fn tent(o: usize, cell: usize, n_in: usize, factor: usize) -> f64 {
    let src = ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
    (1.0 - (src - cell as f64).abs()).max(0.0)
}

#[test]
fn single_activation_gives_a_tent_peak() {
    // logit = spatial mean of channel 0, so dlogit/dA_0 = 1/49 everywhere
    let mut a = Tensor::<f64>::zeros(&[2, 7, 7]);
    a.data_mut()[3 * 7 + 3] = 2.5;
    a.data_mut()[49 + 10] = 4.0;
    let mut g = Tensor::<f64>::zeros(&[2, 7, 7]);
    g.data_mut()[..49].iter_mut().for_each(|v| *v = 1.0 / 49.0);
    let h = heatmap_from_activations(&a, &g, 21, 21, 1).unwrap();
    assert!(!h.degenerate);
    for y in 0..21 {
        for x in 0..21 {
            let oracle = tent(x, 3, 7, 3) * tent(y, 3, 7, 3);
            assert!((h.at(x, y) - oracle).abs() < 1e-12, "({x},{y}) {} vs {oracle}", h.at(x, y));
        }
    }
    assert_eq!(h.at(10, 10), 1.0);
    assert_eq!(h.at(0, 0), 0.0);
    assert_eq!(h.at(20, 3), 0.0);
}

#[test]
fn negative_evidence_is_rectified_away() {
    let a = Tensor::<f64>::from_fn(&[3, 4, 4], |i| 0.1 + (i % 7) as f64);
    let g = Tensor::<f64>::full(&[3, 4, 4], -0.3);
    let h = heatmap_from_activations(&a, &g, 12, 12, 0).unwrap();
    assert!(h.degenerate);
    assert!(h.values.iter().all(|&v| v == 0.0));
}

#[test]
fn normalization_edge_cases() {
    let mut zeros = vec![0.0; 5];
    assert!(normalize_unit(&mut zeros));
    let mut flat = vec![0.3; 5];
    assert!(!normalize_unit(&mut flat));
    assert!(flat.iter().all(|&v| v == 1.0));
    let mut ramp = vec![1.0, 2.0, 3.0];
    normalize_unit(&mut ramp);
    assert_eq!(ramp, vec![0.0, 0.5, 1.0]);
}

proptest! {
    #[test]
    fn heatmaps_live_in_the_unit_interval(
        a in prop::collection::vec(-3.0f64..3.0, 4 * 5 * 5),
        g in prop::collection::vec(-1.0f64..1.0, 4 * 5 * 5),
    ) {
        let a = Tensor::from_f64_slice(&[4, 5, 5], &a).unwrap();
        let g = Tensor::from_f64_slice(&[4, 5, 5], &g).unwrap();
        let h = heatmap_from_activations(&a, &g, 15, 15, 2).unwrap();
        prop_assert!(h.values.iter().all(|v| (0.0..=1.0).contains(v)));
        let max = h.values.iter().copied().fold(0.0, f64::max);
        let expected = if h.degenerate { 0.0 } else { 1.0 };
        prop_assert_eq!(max, expected);
    }
}

fn micro_sample(seed: u64) -> (FdraModel<f64>, [f64; 10], RgbImage) {
    let mut model = FdraModel::<f64>::new(ModelConfig::micro()).unwrap();
    // push the weights away from init so every layer carries signal
    let mut rng = SplitMix64::new(seed);
    for t in model.params_mut().tensors_mut() {
        for v in t.data_mut() {
            *v += rng.uniform_range(-0.3, 0.3);
        }
    }
    let olf = std::array::from_fn(|_| rng.gaussian(0.0, 1.0));
    (model, olf, gen_image(1, 24, 0.5, seed, 3).unwrap())
}

#[test]
fn grad_cam_on_a_model() {
    let (model, olf, img) = micro_sample(5);
    for class in 0..3 {
        let h = grad_cam(&model, &olf, &img, class).unwrap();
        assert_eq!((h.width, h.height, h.values.len()), (24, 24, 576));
        assert_eq!(h.class_index, class);
        assert!(h.values.iter().all(|v| (0.0..=1.0).contains(v)));
    }
    assert!(grad_cam(&model, &olf, &img, 3).is_err());
    assert!(grad_cam(&model, &olf, &RgbImage::new(30, 30, [0; 3]), 0).is_err());
}

#[test]
fn heatmap_ignores_logit_scale() {
    for seed in 0..4 {
        let (model, olf, img) = micro_sample(seed);
        let mut scaled = model.clone();
        let cls = scaled.classifier();
        for id in [Some(cls.w), cls.b].into_iter().flatten() {
            for v in scaled.params_mut().get_mut(id).data_mut() {
                *v *= 3.5;
            }
        }
        for class in 0..3 {
            let a = grad_cam(&model, &olf, &img, class).unwrap();
            let b = grad_cam(&scaled, &olf, &img, class).unwrap();
            assert_eq!(a.degenerate, b.degenerate);
            for (x, y) in a.values.iter().zip(&b.values) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn colormap_stops() {
    assert_eq!(colormap(0.0), [0.0, 0.0, 255.0]);
    assert_eq!(colormap(0.125), [0.0, 127.5, 255.0]);
    assert_eq!(colormap(0.5), [0.0, 255.0, 0.0]);
    assert_eq!(colormap(1.0), [255.0, 0.0, 0.0]);
    assert_eq!(colormap(7.0), colormap(1.0));
}

#[test]
fn overlay_blending() {
    let img = gen_image(0, 24, 0.5, 1, 1).unwrap();
    assert_eq!(overlay(&constant_heatmap(24, 0.7), &img, 0.0).unwrap(), img);

    let red = overlay(&constant_heatmap(24, 1.0), &img, 1.0).unwrap();
    assert!((0..24).all(|y| (0..24).all(|x| red.pixel(x, y) == [255, 0, 0])));

    let mut known = RgbImage::new(2, 1, [100, 50, 200]);
    known.put_pixel(1, 0, [0, 0, 0]);
    let mut h = constant_heatmap(1, 0.5);
    h.width = 2;
    h.values = vec![0.5, 0.125];
    let out = overlay(&h, &known, DEFAULT_ALPHA).unwrap();
    // 0.6 * pixel + 0.4 * colour, rounded half away from zero
    assert_eq!(out.pixel(0, 0), [60, 132, 120]);
    assert_eq!(out.pixel(1, 0), [0, 51, 102]);

    assert!(overlay(&constant_heatmap(24, 0.5), &img, 1.5).is_err());
    assert!(overlay(&constant_heatmap(12, 0.5), &img, 0.5).is_err());
    assert_eq!(render_heatmap(&constant_heatmap(3, 0.0)).pixel(2, 2), [0, 0, 255]);
}

//! Grad-CAM on the visual branch, plus heatmap and overlay rendering.

use crate::error::{Error, Result};
use crate::fdec::SensorVector;
use crate::image::RgbImage;
use crate::model::{FdraModel, ForwardOptions, Inputs};
use crate::tensor::{Scalar, Tape, Tensor};
use crate::NUM_CLASSES;

/// Which activation the heatmap explains.
pub const TARGET_LAYER: &str = "last layer visual output (pre-pool)";

/// Blend weight of the colormap in [`overlay`] unless overridden.
pub const DEFAULT_ALPHA: f64 = 0.4;

/// Colormap stops at 0, 0.25, 0.5, 0.75 and 1.
pub const COLORMAP: [[f64; 3]; 5] = [
    [0.0, 0.0, 255.0],
    [0.0, 255.0, 255.0],
    [0.0, 255.0, 0.0],
    [255.0, 255.0, 0.0],
    [255.0, 0.0, 0.0],
];

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    /// Row-major, in `[0, 1]`.
    pub values: Vec<f64>,
    pub class_index: usize,
    pub target_layer: &'static str,
    /// Set when the rectified map was zero everywhere; `values` are then all zero.
    pub degenerate: bool,
}

impl Heatmap {
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// Rectified class activation map `ReLU(sum_k w_k A_k)` with `w_k` the
/// spatial mean of `dA_k`. Both inputs are `[C, h, w]`; returns `h * w` values.
pub fn class_activation(activations: &Tensor<f64>, grads: &Tensor<f64>) -> Result<Vec<f64>> {
    let s = activations.shape();
    if s.len() != 3 || grads.shape() != s {
        return Err(Error::Config(format!(
            "grad_cam: activations {s:?} and gradients {:?} must share a [C, h, w] shape",
            grads.shape()
        )));
    }
    let plane = s[1] * s[2];
    let mut map = vec![0.0; plane];
    for (a, g) in activations.data().chunks(plane).zip(grads.data().chunks(plane)) {
        let w = g.iter().sum::<f64>() / plane as f64;
        for (m, &v) in map.iter_mut().zip(a) {
            *m += w * v;
        }
    }
    for m in &mut map {
        *m = m.max(0.0);
    }
    Ok(map)
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn upsample_bilinear(map: &[f64], w: usize, h: usize, out_w: usize, out_h: usize) -> Vec<f64> {
    assert_eq!(map.len(), w * h);
    let coord = |o: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, src - i0 as f64)
    };
    let mut out = Vec::with_capacity(out_w * out_h);
    for oy in 0..out_h {
        let (y0, y1, fy) = coord(oy, h, out_h);
        for ox in 0..out_w {
            let (x0, x1, fx) = coord(ox, w, out_w);
            let top = map[y0 * w + x0] * (1.0 - fx) + map[y0 * w + x1] * fx;
            let bottom = map[y1 * w + x0] * (1.0 - fx) + map[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Min-max scaling to `[0, 1]`. Returns `true` for an all-zero input, which
/// stays all zero; a constant positive map becomes all ones.
pub fn normalize_unit(values: &mut [f64]) -> bool {
    let max = values.iter().copied().fold(0.0f64, f64::max);
    if max <= 0.0 {
        values.iter_mut().for_each(|v| *v = 0.0);
        return true;
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let range = max - min;
    for v in values.iter_mut() {
        *v = if range > 0.0 { ((*v - min) / range).clamp(0.0, 1.0) } else { 1.0 };
    }
    false
}

/// Heatmap from a `[C, h, w]` feature map and its gradient, upsampled to
/// `out_w x out_h`.
pub fn heatmap_from_activations(
    activations: &Tensor<f64>,
    grads: &Tensor<f64>,
    out_w: usize,
    out_h: usize,
    class_index: usize,
) -> Result<Heatmap> {
    let map = class_activation(activations, grads)?;
    let (h, w) = (activations.shape()[1], activations.shape()[2]);
    let mut values = upsample_bilinear(&map, w, h, out_w, out_h);
    let degenerate = normalize_unit(&mut values);
    Ok(Heatmap {
        width: out_w,
        height: out_h,
        values,
        class_index,
        target_layer: TARGET_LAYER,
        degenerate,
    })
}

/// Grad-CAM for one sample. `olfactory` is the normalized stable-phase vector
/// paired with `image`.
pub fn grad_cam<T: Scalar>(
    model: &FdraModel<T>,
    olfactory: &SensorVector,
    image: &RgbImage,
    class_index: usize,
) -> Result<Heatmap> {
    if class_index >= NUM_CLASSES {
        return Err(Error::Config(format!("class index {class_index} out of range (0..{NUM_CLASSES})")));
    }
    let side = model.config().image_side;
    if image.width() != side || image.height() != side {
        return Err(Error::Config(format!(
            "grad_cam: {}x{} image for a model expecting {side}x{side}",
            image.width(),
            image.height()
        )));
    }
    let inputs = Inputs {
        olfactory: Tensor::from_f64_slice(&[1, olfactory.len()], olfactory)?,
        images: image.to_chw::<T>().reshape(&[1, 3, side, side])?,
    };
    let mut tape = Tape::new();
    let p = model.params().bind(&mut tape);
    let trace = model.forward(&mut tape, &p, &inputs, ForwardOptions::default())?;
    let mut seed = Tensor::zeros(&[1, NUM_CLASSES]);
    seed.data_mut()[class_index] = T::one();
    let grads = tape.backward_from_retaining(trace.logits, seed, &[trace.feature_map])?;
    let fm = tape.value(trace.feature_map);
    let shape = &fm.shape()[1..];
    let activations = fm.cast::<f64>().reshape(shape)?;
    let grad = match grads.get(trace.feature_map) {
        Some(g) => g.cast::<f64>().reshape(shape)?,
        None => Tensor::zeros(shape),
    };
    heatmap_from_activations(&activations, &grad, side, side, class_index)
}

/// Piecewise-linear blue, cyan, green, yellow, red colormap.
pub fn colormap(v: f64) -> [f64; 3] {
    let x = v.clamp(0.0, 1.0) * 4.0;
    let i = (x.floor() as usize).min(3);
    let t = x - i as f64;
    let (a, b) = (COLORMAP[i], COLORMAP[i + 1]);
    [0, 1, 2].map(|c| a[c] + (b[c] - a[c]) * t)
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// The heatmap alone, through the colormap.
pub fn render_heatmap(heatmap: &Heatmap) -> RgbImage {
    let mut img = RgbImage::new(heatmap.width, heatmap.height, [0, 0, 0]);
    for y in 0..heatmap.height {
        for x in 0..heatmap.width {
            img.put_pixel(x, y, colormap(heatmap.at(x, y)).map(to_u8));
        }
    }
    img
}

/// `(1 - alpha) * image + alpha * colormap(heatmap)`, rounded and clamped.
pub fn overlay(heatmap: &Heatmap, image: &RgbImage, alpha: f64) -> Result<RgbImage> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("overlay alpha must lie in [0, 1], got {alpha}")));
    }
    if image.width() != heatmap.width || image.height() != heatmap.height {
        return Err(Error::Config(format!(
            "overlay: {}x{} heatmap over a {}x{} image",
            heatmap.width,
            heatmap.height,
            image.width(),
            image.height()
        )));
    }
    let mut out = image.clone();
    for y in 0..image.height() {
        for x in 0..image.width() {
            let px = image.pixel(x, y);
            let color = colormap(heatmap.at(x, y));
            out.put_pixel(x, y, [0, 1, 2].map(|c| to_u8((1.0 - alpha) * px[c] as f64 + alpha * color[c])));
        }
    }
    Ok(out)
}

use moldsense::rng::SplitMix64;
use moldsense::tensor::{grad_check, Tape, Tensor, Var};
use moldsense::Result;

mod common;
use common::conv_oracle;

const H: f64 = 1e-4;
const GRAD_TOL: f64 = 1e-4;

fn random(shape: &[usize], rng: &mut SplitMix64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.uniform_range(-1.0, 1.0))
}

/// Reduces any output to a scalar through fixed random weights so every
/// output coordinate contributes a distinct cotangent.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = SplitMix64::new(seed);
    let w = random(tape.shape(y), &mut rng);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

#[test]
fn identity_kernel_convolution() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
    let w = tape.constant(Tensor::ones(&[1, 1, 1, 1]));
    let y = tape.conv2d(x, w, None, 1, 0).unwrap();
    assert_eq!(tape.value(y), &Tensor::ones(&[1, 1, 3, 3]));
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[1, 3]));
    let y = tape.softmax(x).unwrap();
    for &p in tape.value(y).data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn convolution_matches_direct_summation() {
    let mut rng = SplitMix64::new(11);
    let x = random(&[1, 2, 5, 5], &mut rng);
    let w = random(&[3, 2, 3, 3], &mut rng);
    let mut tape = Tape::<f64>::new();
    let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
    let y = tape.conv2d(xv, wv, None, 1, 1).unwrap();
    let want = conv_oracle(&x, &w, &[0.0; 3], 1, 1);
    assert_eq!(tape.shape(y), want.shape());
    assert!(tape.value(y).max_abs_diff(&want) < 1e-6);
}

#[test]
fn convolution_oracle_sweep() {
    let mut rng = SplitMix64::new(12);
    let configs = [(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 0, 1), (1, 3, 7), (2, 2, 5), (3, 1, 3)];
    let mut cases = 0;
    for (i, &(stride, pad, k)) in configs.iter().cycle().take(14).enumerate() {
        let n = 1 + i % 4;
        let c = 1 + (i * 3) % 4;
        let o = 1 + (i * 5) % 4;
        let side = 4 + i % 5;
        let x = random(&[n, c, side, side], &mut rng);
        let w = random(&[o, c, k, k], &mut rng);
        let b: Vec<f64> = (0..o).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x.clone());
        let wv = tape.constant(w.clone());
        let bv = tape.constant(Tensor::new(vec![o], b.clone()).unwrap());
        let Ok(y) = tape.conv2d(xv, wv, Some(bv), stride, pad) else {
            continue;
        };
        let want = conv_oracle(&x, &w, &b, stride, pad);
        assert!(tape.value(y).max_abs_diff(&want) < 1e-6, "case {i}");
        cases += 1;
    }
    assert!(cases >= 10);
}

#[test]
fn backward_of_sum_is_ones() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::from_f64_slice(&[2, 2], &[1.0, -2.0, 3.0, 0.5]).unwrap());
    let s = tape.sum(x).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &Tensor::ones(&[2, 2]));
}

#[test]
fn backward_through_relu_gate() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::from_f64_slice(&[2], &[-1.0, 2.0]).unwrap());
    let r = tape.relu(x).unwrap();
    let s = tape.sum(r).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0]);
}

#[test]
fn unreachable_leaves_get_no_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::ones(&[3]));
    let unused = tape.param(Tensor::ones(&[3]));
    let s = tape.sum(x).unwrap();
    let g = tape.backward(s).unwrap();
    assert!(g.get(unused).is_none());
}

#[test]
fn backward_rejects_non_scalar_and_empty_tape() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::ones(&[2]));
    let empty = Tape::<f64>::new();
    assert!(empty.backward(x).unwrap_err().to_string().contains("empty"));
    let err = tape.backward(x).unwrap_err().to_string();
    assert!(err.contains("scalar"), "{err}");
}

#[test]
fn shape_errors_name_the_op() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::ones(&[2, 3]));
    let b = tape.constant(Tensor::ones(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err().to_string();
    assert!(err.starts_with("matmul") && err.contains("[2, 3]"), "{err}");
    let c = tape.constant(Tensor::ones(&[3, 2]));
    assert!(tape.add(a, c).unwrap_err().to_string().starts_with("add"));
}

#[test]
fn quadratic_gradient_is_exact() {
    let mut rng = SplitMix64::new(3);
    let x = random(&[7], &mut rng);
    let err = grad_check(
        |t, x| {
            let sq = t.mul(x, x)?;
            let s = t.sum(sq)?;
            t.scale(s, 0.5)
        },
        &x,
        H,
    )
    .unwrap();
    assert!(err <= 1e-8, "{err}");
}

#[test]
fn periodic_gradient_matches_closed_form() {
    let (x0, w) = (0.1, 0.25);
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::scalar(x0));
    let y = tape.scale(x, 2.0 * std::f64::consts::PI * w).unwrap();
    let s = tape.sin(y).unwrap();
    let l = tape.sum(s).unwrap();
    let g = tape.backward(l).unwrap().get(x).unwrap().item().unwrap();
    let closed = 2.0 * std::f64::consts::PI * w * (2.0 * std::f64::consts::PI * w * x0).cos();
    assert!((g - closed).abs() < 1e-12);
    let err = grad_check(
        |t, x| {
            let y = t.scale(x, 2.0 * std::f64::consts::PI * w)?;
            let s = t.sin(y)?;
            t.sum(s)
        },
        &Tensor::scalar(x0),
        H,
    )
    .unwrap();
    assert!(err <= GRAD_TOL);
}

type Unary = fn(&mut Tape<f64>, Var) -> Result<Var>;

fn check_unary(name: &str, shape: &[usize], f: Unary) {
    for trial in 0..3u64 {
        let mut rng = SplitMix64::stream(21, &[trial, name.len() as u64]);
        let x = random(shape, &mut rng);
        let err = grad_check(
            |t, x| {
                let y = f(t, x)?;
                weighted_sum(t, y, 100 + trial)
            },
            &x,
            H,
        )
        .unwrap();
        assert!(err <= GRAD_TOL, "{name} trial {trial}: {err}");
    }
}

/// Checks a binary primitive with respect to each operand in turn.
fn check_binary(name: &str, sa: &[usize], sb: &[usize], f: fn(&mut Tape<f64>, Var, Var) -> Result<Var>) {
    for trial in 0..3u64 {
        let mut rng = SplitMix64::stream(22, &[trial, name.len() as u64]);
        let a = random(sa, &mut rng);
        let b = random(sb, &mut rng);
        let wrt_a = grad_check(
            |t, x| {
                let bv = t.constant(b.clone());
                let y = f(t, x, bv)?;
                weighted_sum(t, y, 200 + trial)
            },
            &a,
            H,
        )
        .unwrap();
        let wrt_b = grad_check(
            |t, x| {
                let av = t.constant(a.clone());
                let y = f(t, av, x)?;
                weighted_sum(t, y, 200 + trial)
            },
            &b,
            H,
        )
        .unwrap();
        assert!(wrt_a <= GRAD_TOL && wrt_b <= GRAD_TOL, "{name} trial {trial}: {wrt_a} {wrt_b}");
    }
}

#[test]
fn gradient_suite_unary_primitives() {
    check_unary("relu", &[3, 4], |t, x| t.relu(x));
    check_unary("sigmoid", &[3, 4], |t, x| t.sigmoid(x));
    check_unary("sin", &[3, 4], |t, x| t.sin(x));
    check_unary("cos", &[3, 4], |t, x| t.cos(x));
    check_unary("softmax", &[3, 4], |t, x| t.softmax(x));
    check_unary("scale", &[5], |t, x| t.scale(x, -2.5));
    check_unary("reduce_mean_axis1", &[2, 3, 4], |t, x| t.reduce_mean(x, 1));
    check_unary("reduce_mean_axis2", &[2, 3, 4], |t, x| t.reduce_mean(x, 2));
    check_unary("reduce_max_axis1", &[2, 3, 4], |t, x| t.reduce_max(x, 1));
    check_unary("reduce_max_axis0", &[2, 3, 4], |t, x| t.reduce_max(x, 0));
    check_unary("sum", &[2, 3], |t, x| t.sum(x));
    check_unary("mean", &[2, 3], |t, x| t.mean(x));
    check_unary("reshape", &[2, 6], |t, x| t.reshape(x, &[3, 4]));
    check_unary("permute", &[2, 3, 4], |t, x| t.permute(x, &[2, 0, 1]));
    check_unary("expand", &[2, 1, 3], |t, x| t.expand(x, &[2, 4, 3]));
    check_unary("avg_pool2d", &[2, 2, 4, 6], |t, x| t.avg_pool2d(x, 2));
    check_unary("concat_self", &[2, 3], |t, x| {
        let s = t.sin(x)?;
        t.concat(&[x, s], 1)
    });
    check_unary("cross_entropy", &[4, 3], |t, x| t.cross_entropy(x, &[0, 2, 1, 2]));
}

#[test]
fn gradient_suite_binary_primitives() {
    check_binary("matmul", &[3, 4], &[4, 2], |t, a, b| t.matmul(a, b));
    check_binary("batch_matmul", &[2, 3, 4], &[2, 4, 2], |t, a, b| t.batch_matmul(a, b));
    check_binary("add", &[2, 3, 4], &[2, 3, 4], |t, a, b| t.add(a, b));
    check_binary("add_bias", &[2, 3, 4, 4], &[1, 3, 1, 1], |t, a, b| t.add(a, b));
    check_binary("mul", &[2, 3, 4], &[2, 3, 4], |t, a, b| t.mul(a, b));
    check_binary("mul_channel_gate", &[2, 3, 4, 4], &[2, 3, 1, 1], |t, a, b| t.mul(a, b));
    check_binary("mul_spatial_gate", &[2, 3, 4, 4], &[2, 1, 4, 4], |t, a, b| t.mul(a, b));
    check_binary("concat", &[2, 3, 2], &[2, 1, 2], |t, a, b| t.concat(&[a, b], 1));
    check_binary("conv2d_s1p1", &[2, 3, 5, 5], &[4, 3, 3, 3], |t, a, b| t.conv2d(a, b, None, 1, 1));
    check_binary("conv2d_s2p1", &[1, 2, 6, 6], &[3, 2, 3, 3], |t, a, b| t.conv2d(a, b, None, 2, 1));
    check_binary("conv2d_1x1_s2", &[2, 2, 5, 5], &[3, 2, 1, 1], |t, a, b| t.conv2d(a, b, None, 2, 0));
    check_binary("conv2d_pointwise", &[2, 2, 3, 3], &[3, 2, 1, 1], |t, a, b| t.conv2d(a, b, None, 1, 0));
    check_binary("conv2d_7x7", &[1, 2, 5, 5], &[1, 2, 7, 7], |t, a, b| t.conv2d(a, b, None, 1, 3));
    check_binary("linear", &[3, 4], &[4, 2], |t, a, b| {
        let bias = t.constant(Tensor::from_f64_slice(&[2], &[0.3, -0.2])?);
        t.linear(a, b, bias)
    });
}

#[test]
fn gradient_suite_conv_bias_and_group_norm() {
    for trial in 0..3u64 {
        let mut rng = SplitMix64::stream(23, &[trial]);
        let x = random(&[2, 2, 4, 4], &mut rng);
        let w = random(&[3, 2, 3, 3], &mut rng);
        let b = random(&[3], &mut rng);
        let err = grad_check(
            |t, bv| {
                let xv = t.constant(x.clone());
                let wv = t.constant(w.clone());
                let y = t.conv2d(xv, wv, Some(bv), 1, 1)?;
                weighted_sum(t, y, 300 + trial)
            },
            &b,
            H,
        )
        .unwrap();
        assert!(err <= GRAD_TOL, "conv bias: {err}");

        let x = random(&[2, 8, 3, 3], &mut rng);
        let gamma = Tensor::from_fn(&[8], |_| rng.uniform_range(0.5, 1.5));
        let beta = random(&[8], &mut rng);
        let (g2, b2) = (gamma.clone(), beta.clone());
        let wrt_x = grad_check(
            |t, xv| {
                let ga = t.constant(g2.clone());
                let be = t.constant(b2.clone());
                let y = t.group_norm(xv, ga, be, 2, 1e-5)?;
                weighted_sum(t, y, 400 + trial)
            },
            &x,
            H,
        )
        .unwrap();
        let x2 = x.clone();
        let wrt_gamma = grad_check(
            |t, gv| {
                let xv = t.constant(x2.clone());
                let be = t.constant(beta.clone());
                let y = t.group_norm(xv, gv, be, 2, 1e-5)?;
                weighted_sum(t, y, 400 + trial)
            },
            &gamma,
            H,
        )
        .unwrap();
        let wrt_beta = grad_check(
            |t, bv| {
                let xv = t.constant(x.clone());
                let ga = t.constant(gamma.clone());
                let y = t.group_norm(xv, ga, bv, 2, 1e-5)?;
                weighted_sum(t, y, 400 + trial)
            },
            &beta,
            H,
        )
        .unwrap();
        assert!(wrt_x <= GRAD_TOL && wrt_gamma <= GRAD_TOL && wrt_beta <= GRAD_TOL);
    }
}

#[test]
fn replay_is_bit_identical() {
    let run = || {
        let mut rng = SplitMix64::new(5);
        let mut tape = Tape::<f32>::new();
        let x = tape.param(random(&[2, 3, 6, 6], &mut rng).cast());
        let w = tape.param(random(&[4, 3, 3, 3], &mut rng).cast());
        let y = tape.conv2d(x, w, None, 2, 1).unwrap();
        let y = tape.sigmoid(y).unwrap();
        let l = tape.mean(y).unwrap();
        let g = tape.backward(l).unwrap();
        (tape.value(l).clone(), g.get(w).unwrap().clone())
    };
    let (l1, g1) = run();
    let (l2, g2) = run();
    assert!(l1.bit_eq(&l2) && g1.bit_eq(&g2));
}

mod properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one_and_shift_invariant(
            logits in proptest::collection::vec(-20.0f64..20.0, 12),
            shift in -50.0f64..50.0,
        ) {
            let mut tape = Tape::<f64>::new();
            let x = tape.constant(Tensor::new(vec![4, 3], logits.clone()).unwrap());
            let y = tape.softmax(x).unwrap();
            let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
            let xs = tape.constant(Tensor::new(vec![4, 3], shifted).unwrap());
            let ys = tape.softmax(xs).unwrap();
            for row in tape.value(y).data().chunks(3) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            }
            prop_assert!(tape.value(y).max_abs_diff(tape.value(ys)) <= 1e-6);
        }

        #[test]
        fn output_shape_depends_only_on_input_shapes(
            n in 1usize..3, c in 1usize..4, side in 3usize..9, o in 1usize..4,
            stride in 1usize..3, pad in 0usize..2, seed in any::<u64>(),
        ) {
            let mut rng = SplitMix64::new(seed);
            let mut tape = Tape::<f64>::new();
            let x1 = tape.constant(random(&[n, c, side, side], &mut rng));
            let x2 = tape.constant(random(&[n, c, side, side], &mut rng));
            let w = tape.constant(random(&[o, c, 3, 3], &mut rng));
            let y1 = tape.conv2d(x1, w, None, stride, pad).unwrap();
            let y2 = tape.conv2d(x2, w, None, stride, pad).unwrap();
            prop_assert_eq!(tape.shape(y1), tape.shape(y2));
            prop_assert_eq!(tape.shape(y1)[2], (side + 2 * pad - 3) / stride + 1);
        }
    }
}

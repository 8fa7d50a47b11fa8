//! Independent reference implementations shared by the integration tests.
//! Plain loops over flat `f64` buffers; nothing here touches the tape.
#![allow(dead_code)]

use moldsense::tensor::Tensor;

/// Direct summation convolution, independent of im2col/GEMM.
pub fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for s in 0..n {
        for f in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[f];
                    for ch in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xi = ((s * c + ch) * h + iy as usize) * wd + ix as usize;
                                let wi = ((f * c + ch) * kh + ky) * kw + kx;
                                acc += x.data()[xi] * w.data()[wi];
                            }
                        }
                    }
                    out[((s * o + f) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, o, oh, ow], out).unwrap()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `x @ w (+ b)` for one row, `w` stored `[inputs, outputs]`.
pub fn dense(x: &[f64], w: &[f64], b: Option<&[f64]>) -> Vec<f64> {
    let outputs = w.len() / x.len();
    (0..outputs)
        .map(|j| {
            let acc: f64 = x.iter().enumerate().map(|(i, v)| v * w[i * outputs + j]).sum();
            acc + b.map_or(0.0, |b| b[j])
        })
        .collect()
}

/// Group normalization of one sample `[c, spatial]`.
pub fn group_norm_oracle(x: &[f64], c: usize, groups: usize, gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let spatial = x.len() / c;
    let cpg = c / groups;
    let mut out = vec![0.0; x.len()];
    for g in 0..groups {
        let vals = &x[g * cpg * spatial..(g + 1) * cpg * spatial];
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        for ch in g * cpg..(g + 1) * cpg {
            for s in 0..spatial {
                let i = ch * spatial + s;
                out[i] = (x[i] - mean) / (var + eps).sqrt() * gamma[ch] + beta[ch];
            }
        }
    }
    out
}

pub struct CbamWeights<'a> {
    /// `[c, hidden]`.
    pub fc1: &'a [f64],
    /// `[hidden, c]`.
    pub fc2: &'a [f64],
    /// `[1, 2, k, k]`.
    pub spatial: &'a [f64],
    pub kernel: usize,
}

/// Channel attention then spatial attention on one sample `[c, h, w]`,
/// transcribed term by term.
pub fn cbam_oracle(x: &[f64], c: usize, h: usize, w: usize, p: &CbamWeights) -> Vec<f64> {
    let hw = h * w;
    let mlp = |v: &[f64]| {
        let hidden: Vec<f64> = dense(v, p.fc1, None).into_iter().map(|z| z.max(0.0)).collect();
        dense(&hidden, p.fc2, None)
    };
    let avg: Vec<f64> = (0..c).map(|ch| x[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64).collect();
    let max: Vec<f64> = (0..c)
        .map(|ch| x[ch * hw..(ch + 1) * hw].iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let (ma, mm) = (mlp(&avg), mlp(&max));
    let mc: Vec<f64> = (0..c).map(|ch| sigmoid(ma[ch] + mm[ch])).collect();
    let f1: Vec<f64> = (0..c * hw).map(|i| x[i] * mc[i / hw]).collect();

    let mut stack = vec![0.0; 2 * hw];
    for s in 0..hw {
        let col: Vec<f64> = (0..c).map(|ch| f1[ch * hw + s]).collect();
        stack[s] = col.iter().sum::<f64>() / c as f64;
        stack[hw + s] = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    }
    let k = p.kernel;
    let pad = k / 2;
    let x_stack = Tensor::new(vec![1, 2, h, w], stack).unwrap();
    let ws = Tensor::new(vec![1, 2, k, k], p.spatial.to_vec()).unwrap();
    let logits = conv_oracle(&x_stack, &ws, &[0.0], 1, pad);
    (0..c * hw).map(|i| f1[i] * sigmoid(logits.data()[i % hw])).collect()
}

pub struct SeWeights<'a> {
    pub fc1: &'a [f64],
    pub b1: &'a [f64],
    pub fc2: &'a [f64],
    pub b2: &'a [f64],
    pub proj: &'a [f64],
    pub bp: &'a [f64],
}

/// Gates and projected output for one sample `[c, f]`.
pub fn se_oracle(x: &[f64], c: usize, p: &SeWeights) -> (Vec<f64>, Vec<f64>) {
    let f = x.len() / c;
    let pooled: Vec<f64> = (0..c).map(|ch| x[ch * f..(ch + 1) * f].iter().sum::<f64>() / f as f64).collect();
    let hidden: Vec<f64> = dense(&pooled, p.fc1, Some(p.b1)).into_iter().map(|v| v.max(0.0)).collect();
    let gates: Vec<f64> = dense(&hidden, p.fc2, Some(p.b2)).into_iter().map(sigmoid).collect();
    let scaled: Vec<f64> = (0..c * f).map(|i| x[i] * gates[i / f]).collect();
    (gates, dense(&scaled, p.proj, Some(p.bp)))
}

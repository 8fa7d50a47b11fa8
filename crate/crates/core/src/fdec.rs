//! Fine-grained deterioration embedding constructor.
//!
//! Olfactory side: stable-phase extraction, training-statistics z-scoring
//! and the periodic embedding `O = ReLU([sin(2πws), cos(2πws)])` with one
//! trainable frequency row per sensor channel. Visual side: a 3x3 patch
//! partition whose patches share one convolutional stem; embedded patches
//! are put back in grid order so downstream layers keep the geometry.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::image::RgbImage;
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::{RECORDING_SECONDS, SENSOR_CHANNELS};

/// Patches per image side.
pub const GRID: usize = 3;
/// Patches per image.
pub const PATCHES: usize = GRID * GRID;

pub type SensorVector = [f64; SENSOR_CHANNELS];

/// One e-nose recording: 600 one-second rows of 10 channels.
#[derive(Debug, Clone, PartialEq)]
pub struct OlfactorySeries {
    rows: Vec<SensorVector>,
}

impl OlfactorySeries {
    pub fn new(rows: Vec<SensorVector>) -> Result<Self> {
        if rows.len() != RECORDING_SECONDS {
            return Err(Error::data(format!(
                "olfactory series has {} rows, expected {RECORDING_SECONDS}",
                rows.len()
            )));
        }
        if let Some(t) = rows.iter().position(|r| r.iter().any(|v| !v.is_finite())) {
            return Err(Error::data(format!("olfactory series has a non-finite value at t={t}")));
        }
        Ok(OlfactorySeries { rows })
    }

    pub fn rows(&self) -> &[SensorVector] {
        &self.rows
    }
}

/// Half-open window `[start, end)` in seconds; serialized as `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct StableWindow {
    pub start: usize,
    pub end: usize,
}

impl From<[usize; 2]> for StableWindow {
    fn from([start, end]: [usize; 2]) -> Self {
        StableWindow { start, end }
    }
}

impl From<StableWindow> for [usize; 2] {
    fn from(w: StableWindow) -> Self {
        [w.start, w.end]
    }
}

impl Default for StableWindow {
    fn default() -> Self {
        StableWindow { start: 400, end: 600 }
    }
}

/// Per-channel mean of the series over the stable response window.
pub fn extract_stable_phase(series: &OlfactorySeries, window: StableWindow) -> Result<SensorVector> {
    if window.start >= window.end {
        return Err(invalid("extract_stable_phase", format!("empty window [{}, {})", window.start, window.end)));
    }
    if window.end > RECORDING_SECONDS {
        return Err(invalid(
            "extract_stable_phase",
            format!("window [{}, {}) exceeds {RECORDING_SECONDS} s", window.start, window.end),
        ));
    }
    let mut acc = [0.0; SENSOR_CHANNELS];
    for row in &series.rows[window.start..window.end] {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
    let n = (window.end - window.start) as f64;
    Ok(acc.map(|a| a / n))
}

/// Training-set channel statistics; serialized as `stats.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: SensorVector,
    pub std: SensorVector,
    pub window: StableWindow,
}

impl Normalizer {
    /// Fits population mean/std per channel. Needs at least two samples and
    /// non-zero variance on every channel.
    pub fn fit(train: &[SensorVector], window: StableWindow) -> Result<Self> {
        if train.len() < 2 {
            return Err(Error::data(format!("normalizer needs >= 2 training samples, got {}", train.len())));
        }
        let n = train.len() as f64;
        let mut mean = [0.0; SENSOR_CHANNELS];
        for s in train {
            for (m, v) in mean.iter_mut().zip(s) {
                *m += v;
            }
        }
        mean = mean.map(|m| m / n);
        let mut std = [0.0; SENSOR_CHANNELS];
        for s in train {
            for c in 0..SENSOR_CHANNELS {
                std[c] += (s[c] - mean[c]).powi(2);
            }
        }
        std = std.map(|v| (v / n).sqrt());
        if let Some(c) = std.iter().position(|&s| !(s > 0.0)) {
            return Err(Error::data(format!("normalizer: channel {c} has zero variance")));
        }
        Ok(Normalizer { mean, std, window })
    }

    pub fn normalize(&self, s: &SensorVector) -> SensorVector {
        let mut out = [0.0; SENSOR_CHANNELS];
        for c in 0..SENSOR_CHANNELS {
            out[c] = (s[c] - self.mean[c]) / self.std[c];
        }
        out
    }
}

/// Pre-activation periodic block `[sin(2π w_ji s_j), cos(2π w_ji s_j)]`.
///
/// `s: [n, d]`, `w: [d, k]` -> `[n, d, 2k]` with the sine block at
/// indices `0..k` and the cosine block at `k..2k`.
pub fn plr_periodic<T: Scalar>(tape: &mut Tape<T>, s: Var, w: Var) -> Result<Var> {
    let (ss, ws) = (tape.shape(s).to_vec(), tape.shape(w).to_vec());
    if ss.len() != 2 || ws.len() != 2 || ss[1] != ws[0] {
        return Err(shape_err("plr_embed", format!("features {ss:?} with coefficients {ws:?}")));
    }
    let (n, d, k) = (ss[0], ss[1], ws[1]);
    let s3 = tape.reshape(s, &[n, d, 1])?;
    let s3 = tape.expand(s3, &[n, d, k])?;
    let w3 = tape.reshape(w, &[1, d, k])?;
    let proj = tape.mul(s3, w3)?;
    let angle = tape.scale(proj, 2.0 * PI)?;
    let sin = tape.sin(angle)?;
    let cos = tape.cos(angle)?;
    tape.concat(&[sin, cos], 2)
}

/// Optional per-feature affine map applied between the periodic block and
/// the ReLU: `w: [d, 2k, 2k]`, `b: [d, 1, 2k]`.
#[derive(Debug, Clone, Copy)]
pub struct PlrLinear {
    pub weight: Var,
    pub bias: Var,
}

/// Periodic embedding followed by ReLU: `[n, d] -> [n, d, 2k]`, entries >= 0.
pub fn plr_embed<T: Scalar>(tape: &mut Tape<T>, s: Var, w: Var, linear: Option<PlrLinear>) -> Result<Var> {
    let mut z = plr_periodic(tape, s, w)?;
    if let Some(lin) = linear {
        let shape = tape.shape(z).to_vec();
        let (n, d, e) = (shape[0], shape[1], shape[2]);
        let by_feature = tape.permute(z, &[1, 0, 2])?;
        let mapped = tape.batch_matmul(by_feature, lin.weight)?;
        let mapped = tape.add(mapped, lin.bias)?;
        z = tape.permute(mapped, &[1, 0, 2])?;
        debug_assert_eq!(tape.shape(z), [n, d, e]);
    }
    tape.relu(z)
}

/// The L = 9 patches of a 3x3 partition, row-major grid order.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    patches: Vec<RgbImage>,
}

impl PatchGrid {
    pub fn patches(&self) -> &[RgbImage] {
        &self.patches
    }

    pub fn patch_size(&self) -> (usize, usize) {
        (self.patches[0].width(), self.patches[0].height())
    }

    /// Inverse of [`partition_patches`].
    pub fn reassemble(&self) -> RgbImage {
        let (pw, ph) = self.patch_size();
        let mut img = RgbImage::new(pw * GRID, ph * GRID, [0, 0, 0]);
        for (l, p) in self.patches.iter().enumerate() {
            img.paste(p, (l % GRID) * pw, (l / GRID) * ph);
        }
        img
    }

    /// Stacked channel-first patches `[9, 3, h, w]` scaled to `[0, 1]`.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let (pw, ph) = self.patch_size();
        let mut data = Vec::with_capacity(PATCHES * 3 * pw * ph);
        for p in &self.patches {
            data.extend_from_slice(p.to_chw::<T>().data());
        }
        Tensor::new(vec![PATCHES, 3, ph, pw], data).expect("patches share one size")
    }

    /// Swaps two patches (used to check patch-index independence).
    pub fn swap(&mut self, a: usize, b: usize) {
        self.patches.swap(a, b);
    }
}

pub fn partition_patches(image: &RgbImage) -> Result<PatchGrid> {
    let (w, h) = (image.width(), image.height());
    if w % GRID != 0 || h % GRID != 0 || w == 0 || h == 0 {
        return Err(invalid("partition_patches", format!("{h}x{w} image is not divisible into a 3x3 grid")));
    }
    let (pw, ph) = (w / GRID, h / GRID);
    let patches = (0..PATCHES)
        .map(|l| image.crop((l % GRID) * pw, (l / GRID) * ph, pw, ph))
        .collect();
    Ok(PatchGrid { patches })
}

/// Parameters of the shared two-stage patch stem.
#[derive(Debug, Clone, Copy)]
pub struct StemVars {
    pub conv1: (Var, Var),
    pub conv2: (Var, Var),
}

/// Splits a channel-first image batch `[n, c, H, W]` into patches
/// `[n*9, c, H/3, W/3]` ordered by sample, then grid position.
pub fn split_patches<T: Scalar>(tape: &mut Tape<T>, images: Var) -> Result<Var> {
    let s = tape.shape(images).to_vec();
    if s.len() != 4 || s[2] % GRID != 0 || s[3] % GRID != 0 {
        return Err(invalid("partition_patches", format!("image batch {s:?} is not divisible into a 3x3 grid")));
    }
    let (n, c, ph, pw) = (s[0], s[1], s[2] / GRID, s[3] / GRID);
    let v = tape.reshape(images, &[n, c, GRID, ph, GRID, pw])?;
    let v = tape.permute(v, &[0, 2, 4, 1, 3, 5])?;
    tape.reshape(v, &[n * PATCHES, c, ph, pw])
}

/// Inverse of [`split_patches`] for embedded patches: `[n*9, c, h, w] -> [n, c, 3h, 3w]`.
pub fn assemble_patches<T: Scalar>(tape: &mut Tape<T>, patches: Var) -> Result<Var> {
    let s = tape.shape(patches).to_vec();
    if s.len() != 4 || s[0] % PATCHES != 0 {
        return Err(shape_err("assemble_patches", format!("{s:?} is not a multiple of 9 patches")));
    }
    let (n, c, h, w) = (s[0] / PATCHES, s[1], s[2], s[3]);
    let v = tape.reshape(patches, &[n, GRID, GRID, c, h, w])?;
    let v = tape.permute(v, &[0, 3, 1, 4, 2, 5])?;
    tape.reshape(v, &[n, c, GRID * h, GRID * w])
}

/// Shared stem on every patch (`conv3x3/s2 + ReLU`, twice) and reassembly
/// of the embedded patches into one feature map per sample.
pub fn plce_embed<T: Scalar>(tape: &mut Tape<T>, patches: Var, stem: &StemVars) -> Result<Var> {
    let wshape = tape.shape(stem.conv1.0).to_vec();
    if tape.shape(patches).len() != 4 || tape.shape(patches)[1] != wshape[1] {
        return Err(shape_err(
            "plce_embed",
            format!("patches {:?} for stem kernel {:?}", tape.shape(patches), wshape),
        ));
    }
    let h = tape.conv2d(patches, stem.conv1.0, Some(stem.conv1.1), 2, 1)?;
    let h = tape.relu(h)?;
    let h = tape.conv2d(h, stem.conv2.0, Some(stem.conv2.1), 2, 1)?;
    let h = tape.relu(h)?;
    assemble_patches(tape, h)
}

/// Bypass used when the embedding constructor is ablated: each normalized
/// feature is repeated across the `width` embedding slots (`[n, d] -> [n, d, width]`).
pub fn bypass_olfactory<T: Scalar>(s: &Tensor<T>, width: usize) -> Tensor<T> {
    let (n, d) = (s.shape()[0], s.shape()[1]);
    let mut out = Vec::with_capacity(n * d * width);
    for &v in s.data() {
        out.extend(std::iter::repeat_n(v, width));
    }
    Tensor::new(vec![n, d, width], out).expect("sized above")
}

/// Bypass for the visual stem: non-overlapping `side/grid` average pooling
/// of `[n, 3, side, side]` images to `grid x grid`, channels replicated
/// cyclically up to `channels`.
pub fn bypass_visual<T: Scalar>(images: &Tensor<T>, grid: usize, channels: usize) -> Result<Tensor<T>> {
    let s = images.shape();
    if s.len() != 4 || grid == 0 || s[2] % grid != 0 || s[3] % grid != 0 {
        return Err(invalid("bypass_visual", format!("images {s:?} cannot pool to {grid}x{grid}")));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (ky, kx) = (h / grid, w / grid);
    let inv = T::from_f64(1.0 / (ky * kx) as f64);
    let mut pooled = vec![T::zero(); n * c * grid * grid];
    for plane in 0..n * c {
        let src = &images.data()[plane * h * w..(plane + 1) * h * w];
        for gy in 0..grid {
            for gx in 0..grid {
                let mut acc = T::zero();
                for y in gy * ky..(gy + 1) * ky {
                    for &v in &src[y * w + gx * kx..y * w + (gx + 1) * kx] {
                        acc += v;
                    }
                }
                pooled[(plane * grid + gy) * grid + gx] = acc * inv;
            }
        }
    }
    let gg = grid * grid;
    let mut out = Vec::with_capacity(n * channels * gg);
    for i in 0..n {
        for ch in 0..channels {
            let src = (i * c + ch % c) * gg;
            out.extend_from_slice(&pooled[src..src + gg]);
        }
    }
    Tensor::new(vec![n, channels, grid, grid], out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Olfactory,
    Visual,
}

/// The multimodal set `X = {O, V}` with aligned labels and collection days.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet<T> {
    olfactory: Tensor<T>,
    visual: Tensor<T>,
    labels: Vec<usize>,
    days: Vec<u32>,
}

impl<T: Scalar> EmbeddingSet<T> {
    /// `olfactory: [n, d, e]`, `visual: [n, c, g, g]`; `n` may be zero.
    pub fn build(olfactory: Tensor<T>, visual: Tensor<T>, labels: Vec<usize>, days: Vec<u32>) -> Result<Self> {
        let n = labels.len();
        let count = |t: &Tensor<T>| t.shape().first().copied().unwrap_or(0);
        if count(&olfactory) != n || count(&visual) != n || days.len() != n {
            return Err(shape_err(
                "build_embedding_set",
                format!(
                    "olfactory {:?}, visual {:?}, {} labels, {} days",
                    olfactory.shape(),
                    visual.shape(),
                    n,
                    days.len()
                ),
            ));
        }
        Ok(EmbeddingSet {
            olfactory,
            visual,
            labels,
            days,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn days(&self) -> &[u32] {
        &self.days
    }

    pub fn olfactory(&self) -> &Tensor<T> {
        &self.olfactory
    }

    pub fn visual(&self) -> &Tensor<T> {
        &self.visual
    }

    /// Embedding of sample `n` for one modality.
    pub fn retrieve(&self, modality: Modality, n: usize) -> Tensor<T> {
        let src = match modality {
            Modality::Olfactory => &self.olfactory,
            Modality::Visual => &self.visual,
        };
        row(src, n)
    }

    /// Samples reordered (or subset) by `indices`.
    pub fn select(&self, indices: &[usize]) -> Self {
        EmbeddingSet {
            olfactory: gather_rows(&self.olfactory, indices),
            visual: gather_rows(&self.visual, indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            days: indices.iter().map(|&i| self.days[i]).collect(),
        }
    }
}

fn row<T: Scalar>(t: &Tensor<T>, n: usize) -> Tensor<T> {
    let per: usize = t.shape()[1..].iter().product();
    Tensor::new(t.shape()[1..].to_vec(), t.data()[n * per..(n + 1) * per].to_vec()).expect("row of valid tensor")
}

pub(crate) fn gather_rows<T: Scalar>(t: &Tensor<T>, indices: &[usize]) -> Tensor<T> {
    let per: usize = t.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(indices.len() * per);
    for &i in indices {
        data.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = indices.len();
    Tensor::new(shape, data).expect("gathered rows")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_series() -> OlfactorySeries {
        let rows = (0..RECORDING_SECONDS)
            .map(|t| {
                let mut r = [0.0; SENSOR_CHANNELS];
                r[1] = t as f64 / 600.0;
                r
            })
            .collect();
        OlfactorySeries::new(rows).unwrap()
    }

    #[test]
    fn stable_phase_of_constant_series() {
        let s = OlfactorySeries::new(vec![[5.0; SENSOR_CHANNELS]; RECORDING_SECONDS]).unwrap();
        assert_eq!(extract_stable_phase(&s, StableWindow::default()).unwrap(), [5.0; SENSOR_CHANNELS]);
    }

    #[test]
    fn stable_phase_of_ramp() {
        // mean of t/600 for t = 400..599
        let oracle = (400..600).map(|t| t as f64 / 600.0).sum::<f64>() / 200.0;
        assert!((oracle - 499.5 / 600.0).abs() < 1e-12);
        let got = extract_stable_phase(&ramp_series(), StableWindow::default()).unwrap();
        assert!((got[1] - oracle).abs() < 1e-12);
    }

    #[test]
    fn stable_phase_window_errors() {
        let s = ramp_series();
        assert!(extract_stable_phase(&s, StableWindow { start: 0, end: 0 }).is_err());
        assert!(extract_stable_phase(&s, StableWindow { start: 500, end: 601 }).is_err());
    }

    #[test]
    fn series_shape_is_validated() {
        assert!(OlfactorySeries::new(vec![[0.0; SENSOR_CHANNELS]; 599]).is_err());
        let mut rows = vec![[0.0; SENSOR_CHANNELS]; RECORDING_SECONDS];
        rows[3][2] = f64::NAN;
        assert!(OlfactorySeries::new(rows).is_err());
    }

    #[test]
    fn two_point_z_score() {
        let n = Normalizer::fit(&[[1.0; 10], [3.0; 10]], StableWindow::default()).unwrap();
        assert_eq!(n.mean, [2.0; 10]);
        assert_eq!(n.std, [1.0; 10]);
        assert_eq!(n.normalize(&[3.0; 10]), [1.0; 10]);
        assert_eq!(n.normalize(&n.mean.clone()), [0.0; 10]);
    }

    #[test]
    fn zero_variance_channel_is_named() {
        let mut a = [1.0; 10];
        let mut b = [2.0; 10];
        a[4] = 7.0;
        b[4] = 7.0;
        let err = Normalizer::fit(&[a, b], StableWindow::default()).unwrap_err().to_string();
        assert!(err.contains("channel 4"), "{err}");
        assert!(Normalizer::fit(&[a], StableWindow::default()).is_err());
    }

    #[test]
    fn partition_shapes_and_errors() {
        let img = RgbImage::new(216, 216, [1, 2, 3]);
        let grid = partition_patches(&img).unwrap();
        assert_eq!(grid.patches().len(), 9);
        assert_eq!(grid.patch_size(), (72, 72));
        assert!(partition_patches(&RgbImage::new(216, 217, [0, 0, 0])).is_err());
    }

    #[test]
    fn bypass_olfactory_tiles_features() {
        let s = Tensor::<f64>::from_f64_slice(&[1, 2], &[-0.5, 2.0]).unwrap();
        let t = bypass_olfactory(&s, 3);
        assert_eq!(t.shape(), &[1, 2, 3]);
        assert_eq!(t.data(), &[-0.5, -0.5, -0.5, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn bypass_visual_pools_and_replicates() {
        let img = Tensor::<f64>::from_fn(&[1, 3, 4, 4], |i| (i / 16) as f64 + (i % 16) as f64 / 100.0);
        let v = bypass_visual(&img, 2, 5).unwrap();
        assert_eq!(v.shape(), &[1, 5, 2, 2]);
        // top-left window of channel 0 covers offsets 0,1,4,5
        assert!((v.data()[0] - 0.025).abs() < 1e-12);
        // channel 3 replicates channel 0, channel 4 replicates channel 1
        assert_eq!(&v.data()[12..16], &v.data()[0..4]);
        assert_eq!(&v.data()[16..20], &v.data()[4..8]);
    }
}

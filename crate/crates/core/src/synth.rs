//! Deterministic synthetic corpus: class-conditional e-nose response curves
//! with per-day sensor drift, procedural rice-surface images, and a
//! day-based train/validation/test split.
//!
//! Every sample draws from RNG streams keyed by `(seed, purpose, id)`, so
//! any sample can be regenerated alone and generation order never matters.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{ManifestRow, Split};
use crate::error::{Error, Result};
use crate::fdec::{extract_stable_phase, Normalizer, OlfactorySeries, SensorVector, StableWindow};
use crate::image::RgbImage;
use crate::persist::{create_dir, write_atomic, write_json};
use crate::rng::SplitMix64;
use crate::{NUM_CLASSES, RECORDING_SECONDS, SENSOR_CHANNELS};

const STREAM_SENSOR: u64 = 1;
const STREAM_TEXTURE: u64 = 2;
const STREAM_BLOBS: u64 = 3;
const STREAM_DRIFT: u64 = 4;

/// Channel baselines `b_c`.
pub const BASELINE: SensorVector = [0.80, 1.20, 0.60, 1.00, 0.90, 0.70, 1.10, 0.50, 0.95, 0.85];
/// Response amplitudes of the Normal class.
pub const NORMAL_AMPLITUDE: SensorVector = [1.50, 2.00, 1.20, 1.80, 1.40, 1.00, 1.60, 0.90, 1.70, 1.30];
/// Expired amplitude offsets at full separation (scaled by difficulty).
pub const EXPIRED_OFFSETS: [(usize, f64); 3] = [(2, 0.35), (5, -0.30), (7, 0.40)];
pub const MOLDY_OFFSETS: [(usize, f64); 4] = [(1, 1.00), (3, 0.80), (4, -0.60), (8, 0.90)];

pub const BACKGROUND: [u8; 3] = [200, 185, 160];
const GRAIN: [f64; 3] = [236.0, 228.0, 208.0];
const MOLD: [f64; 3] = [58.0, 92.0, 44.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSpec {
    pub seed: u64,
    pub days: u32,
    pub per_class_per_day: usize,
    /// In `(0, 1]`; larger values move Expired closer to Normal.
    pub difficulty: f64,
    pub image_side: usize,
    /// Std of the per-(day, channel) sensor offset.
    pub drift_scale: f64,
    /// Drift multiplier for the held-out last day.
    pub day9_gap: f64,
    /// Std of the per-second sensor noise. The default makes the noise on a
    /// 200 s window mean about as large as the day-to-day drift.
    pub noise: f64,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            seed: 42,
            days: 9,
            per_class_per_day: 67,
            difficulty: 0.5,
            image_side: 216,
            drift_scale: 0.05,
            day9_gap: 2.0,
            noise: 0.7,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.days < 2 {
            return bad(format!("need at least 2 days, got {}", self.days));
        }
        if self.per_class_per_day == 0 {
            return bad("per_class_per_day must be >= 1".into());
        }
        if !(self.difficulty > 0.0 && self.difficulty <= 1.0) {
            return bad(format!("difficulty {} is outside (0, 1]", self.difficulty));
        }
        if self.image_side == 0 || self.image_side % 3 != 0 {
            return bad(format!("image side {} is not divisible by 3", self.image_side));
        }
        for (name, v) in [("drift_scale", self.drift_scale), ("day9_gap", self.day9_gap), ("noise", self.noise)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be a non-negative number, got {v}"));
            }
        }
        Ok(())
    }

    /// Fraction of the full Expired offset that survives at this difficulty.
    pub fn separation(&self) -> f64 {
        1.0 - 0.75 * self.difficulty
    }

    pub fn total_samples(&self) -> usize {
        self.days as usize * NUM_CLASSES * self.per_class_per_day
    }

    /// `(day, label)` of sample `id`; ids run day-major, then class.
    pub fn sample_slot(&self, id: usize) -> (u32, usize) {
        let per_day = NUM_CLASSES * self.per_class_per_day;
        ((id / per_day) as u32 + 1, (id % per_day) / self.per_class_per_day)
    }
}

/// Response template of one class: baselines, amplitudes, rise constants.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassTemplate {
    pub baseline: SensorVector,
    pub amplitude: SensorVector,
    pub tau: SensorVector,
    pub noise: f64,
}

impl ClassTemplate {
    pub fn new(label: usize, spec: &GenSpec) -> Result<Self> {
        let mut amplitude = NORMAL_AMPLITUDE;
        match label {
            0 => {
                for (c, off) in EXPIRED_OFFSETS {
                    amplitude[c] += off * spec.separation();
                }
            }
            1 => {
                for (c, off) in MOLDY_OFFSETS {
                    amplitude[c] += off;
                }
            }
            2 => {}
            _ => return Err(Error::data(format!("invalid class {label}"))),
        }
        Ok(ClassTemplate {
            baseline: BASELINE,
            amplitude,
            tau: std::array::from_fn(|c| 30.0 + 60.0 * c as f64 / (SENSOR_CHANNELS - 1) as f64),
            noise: spec.noise,
        })
    }

    /// Noise-free saturated response `b_c + A_c`.
    pub fn plateau(&self) -> SensorVector {
        std::array::from_fn(|c| self.baseline[c] + self.amplitude[c])
    }
}

/// Additive sensor offset `e_{day,c}` shared by every sample of a day.
pub fn day_drift(spec: &GenSpec, day: u32) -> SensorVector {
    let mut rng = SplitMix64::stream(spec.seed, &[STREAM_DRIFT, day as u64]);
    let gain = if day == spec.days { spec.day9_gap } else { 1.0 };
    std::array::from_fn(|_| rng.gaussian(0.0, spec.drift_scale) * gain)
}

/// 600 s recording for sample `id`.
pub fn gen_olfactory(spec: &GenSpec, label: usize, day: u32, id: u64) -> Result<OlfactorySeries> {
    if day == 0 || day > spec.days {
        return Err(Error::data(format!("day {day} outside 1..={}", spec.days)));
    }
    let template = ClassTemplate::new(label, spec)?;
    let drift = day_drift(spec, day);
    let mut rng = SplitMix64::stream(spec.seed, &[STREAM_SENSOR, id]);
    let rows = (0..RECORDING_SECONDS)
        .map(|t| {
            std::array::from_fn(|c| {
                let rise = 1.0 - (-(t as f64) / template.tau[c]).exp();
                template.baseline[c] + template.amplitude[c] * rise + drift[c] + rng.gaussian(0.0, template.noise)
            })
        })
        .collect();
    OlfactorySeries::new(rows)
}

fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Grain texture shared by all classes: background, pale ellipses, noise.
fn render_texture(side: usize, rng: &mut SplitMix64) -> Vec<f64> {
    let mut px: Vec<f64> = (0..side * side).flat_map(|_| BACKGROUND.map(f64::from)).collect();
    let grains = ((side * side) as f64 / 260.0).round() as usize;
    let s = side as f64;
    for _ in 0..grains {
        let (cx, cy) = (rng.uniform_range(0.0, s), rng.uniform_range(0.0, s));
        let a = s * rng.uniform_range(0.035, 0.05);
        let b = s * rng.uniform_range(0.015, 0.022);
        let theta = rng.uniform_range(0.0, std::f64::consts::PI);
        let tint = rng.uniform_range(-8.0, 8.0);
        let (sin, cos) = theta.sin_cos();
        let y0 = (cy - a).floor().max(0.0) as usize;
        let y1 = ((cy + a).ceil() as usize).min(side - 1);
        let x0 = (cx - a).floor().max(0.0) as usize;
        let x1 = ((cx + a).ceil() as usize).min(side - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let u = (dx * cos + dy * sin) / a;
                let v = (-dx * sin + dy * cos) / b;
                let r2 = u * u + v * v;
                if r2 <= 1.0 {
                    let shade = 1.0 - 0.12 * r2;
                    let i = (y * side + x) * 3;
                    for ch in 0..3 {
                        px[i + ch] = (GRAIN[ch] + tint) * shade;
                    }
                }
            }
        }
    }
    for v in px.iter_mut() {
        *v += rng.uniform_range(-6.0, 6.0);
    }
    px
}

/// Image for sample `id` and the mold-blob mask (all false unless Moldy).
pub fn gen_image_with_mask(
    label: usize,
    side: usize,
    difficulty: f64,
    seed: u64,
    id: u64,
) -> Result<(RgbImage, Vec<bool>)> {
    if side == 0 || side % 3 != 0 {
        return Err(Error::data(format!("image side {side} is not divisible by 3")));
    }
    if label >= NUM_CLASSES {
        return Err(Error::data(format!("invalid class {label}")));
    }
    let mut px = render_texture(side, &mut SplitMix64::stream(seed, &[STREAM_TEXTURE, id]));
    let mut mask = vec![false; side * side];
    match label {
        0 => {
            let sep = 1.0 - 0.75 * difficulty;
            let shift = [14.0 * sep, 8.0 * sep, -24.0 * sep];
            let keep = 1.0 - 0.12 * sep;
            for p in px.chunks_exact_mut(3) {
                for ch in 0..3 {
                    p[ch] = p[ch] * keep + shift[ch];
                }
            }
        }
        1 => {
            let rng = &mut SplitMix64::stream(seed, &[STREAM_BLOBS, id]);
            let blobs = rng.int_range(3, 10);
            let s = side as f64;
            for _ in 0..blobs {
                let (cx, cy) = (rng.uniform_range(0.0, s), rng.uniform_range(0.0, s));
                let r = rng.uniform_range(2.0, 6.0);
                let tint = rng.uniform_range(-10.0, 10.0);
                let y0 = (cy - r).floor().max(0.0) as usize;
                let y1 = ((cy + r).ceil() as usize).min(side - 1);
                let x0 = (cx - r).floor().max(0.0) as usize;
                let x1 = ((cx + r).ceil() as usize).min(side - 1);
                for y in y0..=y1 {
                    for x in x0..=x1 {
                        let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                        if dx * dx + dy * dy <= r * r {
                            let i = y * side + x;
                            mask[i] = true;
                            for ch in 0..3 {
                                px[i * 3 + ch] = MOLD[ch] + tint + rng.uniform_range(-4.0, 4.0);
                            }
                        }
                    }
                }
            }
        }
        _ => {}
    }
    let img = RgbImage::from_raw(side, side, px.into_iter().map(clamp_u8).collect())?;
    Ok((img, mask))
}

pub fn gen_image(label: usize, side: usize, difficulty: f64, seed: u64, id: u64) -> Result<RgbImage> {
    gen_image_with_mask(label, side, difficulty, seed, id).map(|(img, _)| img)
}

/// CSV with a `t,ch1..ch10` header and one row per second.
pub fn encode_series_csv(series: &OlfactorySeries) -> String {
    let mut s = String::with_capacity(RECORDING_SECONDS * SENSOR_CHANNELS * 9);
    s.push('t');
    for c in 1..=SENSOR_CHANNELS {
        s.push_str(&format!(",ch{c}"));
    }
    s.push('\n');
    for (t, row) in series.rows().iter().enumerate() {
        s.push_str(&t.to_string());
        for v in row {
            s.push_str(&format!(",{v:.5}"));
        }
        s.push('\n');
    }
    s
}

pub fn decode_series_csv(text: &str) -> Result<OlfactorySeries> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::data("empty olfactory CSV"))?;
    if header.split(',').count() != SENSOR_CHANNELS + 1 {
        return Err(Error::data(format!("olfactory CSV header has wrong width: {header:?}")));
    }
    let mut rows = Vec::with_capacity(RECORDING_SECONDS);
    for (i, line) in lines.enumerate() {
        let mut fields = line.split(',');
        fields.next();
        let mut row = [0.0; SENSOR_CHANNELS];
        let mut n = 0;
        for (slot, f) in row.iter_mut().zip(fields.by_ref()) {
            *slot = f
                .trim()
                .parse()
                .map_err(|_| Error::data(format!("olfactory CSV row {}: bad value {f:?}", i + 1)))?;
            n += 1;
        }
        if n != SENSOR_CHANNELS || fields.next().is_some() {
            return Err(Error::data(format!("olfactory CSV row {} has the wrong width", i + 1)));
        }
        rows.push(row);
    }
    OlfactorySeries::new(rows)
}

/// Train/validation/test assignment: last day is test; of the remaining
/// ids of each class, the last 10% are validation.
pub fn assign_splits(spec: &GenSpec) -> Vec<Split> {
    let mut splits = Vec::with_capacity(spec.total_samples());
    let pool = (spec.days as usize - 1) * spec.per_class_per_day;
    let val = pool / 10;
    let mut seen = [0usize; NUM_CLASSES];
    for id in 0..spec.total_samples() {
        let (day, label) = spec.sample_slot(id);
        splits.push(if day == spec.days {
            Split::Test
        } else {
            seen[label] += 1;
            if seen[label] > pool - val {
                Split::Val
            } else {
                Split::Train
            }
        });
    }
    splits
}

/// Writes the corpus under `out_dir` and returns its manifest rows.
pub fn gen_dataset(spec: &GenSpec, out_dir: &Path) -> Result<Vec<ManifestRow>> {
    spec.validate()?;
    create_dir(&out_dir.join("olfactory"))?;
    create_dir(&out_dir.join("images"))?;
    let splits = assign_splits(spec);
    let window = StableWindow::default();
    let generated: Vec<(ManifestRow, SensorVector)> = (0..spec.total_samples())
        .into_par_iter()
        .map(|id| {
            let (day, label) = spec.sample_slot(id);
            let series = gen_olfactory(spec, label, day, id as u64)?;
            let csv = encode_series_csv(&series);
            // stats are computed from the stored (rounded) values, exactly as a loader sees them
            let stable = extract_stable_phase(&decode_series_csv(&csv)?, window)?;
            let img = gen_image(label, spec.image_side, spec.difficulty, spec.seed, id as u64)?;
            let row = ManifestRow {
                id: id as u32,
                day,
                label,
                split: splits[id],
                olfactory: format!("olfactory/{id:06}.csv"),
                image: format!("images/{id:06}.ppm"),
            };
            write_atomic(&out_dir.join(&row.olfactory), csv.as_bytes())?;
            write_atomic(&out_dir.join(&row.image), &img.encode_ppm())?;
            Ok((row, stable))
        })
        .collect::<Result<_>>()?;

    let train: Vec<SensorVector> = generated
        .iter()
        .filter(|(r, _)| r.split == Split::Train)
        .map(|(_, s)| *s)
        .collect();
    let stats = Normalizer::fit(&train, window)?;
    write_json(&out_dir.join("stats.json"), &stats)?;

    let rows: Vec<ManifestRow> = generated.into_iter().map(|(r, _)| r).collect();
    let mut manifest = String::new();
    for r in &rows {
        manifest.push_str(&serde_json::to_string(r).expect("manifest rows serialize"));
        manifest.push('\n');
    }
    write_atomic(&out_dir.join("manifest.jsonl"), manifest.as_bytes())?;
    Ok(rows)
}

//! On-disk corpus layout and in-memory loading.
//!
//! ```text
//! root/
//!   manifest.jsonl   one {"id","day","label","split","olfactory","image"} object per line
//!   stats.json       {"mean": [10], "std": [10], "window": [t0, t1]} fitted on the train split
//!   olfactory/*.csv  600 x 10 recordings
//!   images/*.ppm     binary PPM frames
//! ```

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fdec::{extract_stable_phase, Normalizer, SensorVector};
use crate::image::RgbImage;
use crate::model::Inputs;
use crate::persist::{read_bytes, read_json};
use crate::synth::decode_series_csv;
use crate::tensor::{Scalar, Tensor};
use crate::{NUM_CLASSES, SENSOR_CHANNELS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?} (expected train, val or test)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRow {
    pub id: u32,
    pub day: u32,
    pub label: usize,
    pub split: Split,
    /// Path relative to the dataset root.
    pub olfactory: String,
    pub image: String,
}

pub fn read_manifest(root: &Path) -> Result<Vec<ManifestRow>> {
    let path = root.join("manifest.jsonl");
    let bytes = read_bytes(&path)?;
    let text = std::str::from_utf8(&bytes).map_err(|_| Error::data(format!("{}: not UTF-8", path.display())))?;
    let mut rows = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let row: ManifestRow = serde_json::from_str(line)
            .map_err(|e| Error::data(format!("{} line {}: {e}", path.display(), i + 1)))?;
        if row.label >= NUM_CLASSES {
            return Err(Error::data(format!("manifest line {}: label {} out of range", i + 1, row.label)));
        }
        if row.day == 0 {
            return Err(Error::data(format!("manifest line {}: days start at 1", i + 1)));
        }
        if !ids.insert(row.id) {
            return Err(Error::data(format!("manifest line {}: duplicate id {}", i + 1, row.id)));
        }
        rows.push(row);
    }
    Ok(rows)
}

/// A corpus held in memory: raw stable features and 8-bit pixels.
#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    rows: Vec<ManifestRow>,
    normalizer: Normalizer,
    side: usize,
    stable: Vec<SensorVector>,
    pixels: Vec<u8>,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let rows = read_manifest(root)?;
        let normalizer: Normalizer = read_json(&root.join("stats.json"))?;
        if normalizer.std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::data("stats.json: every std must be positive"));
        }
        let window = normalizer.window;
        let loaded: Vec<(SensorVector, RgbImage)> = rows
            .par_iter()
            .map(|row| {
                let csv_path = root.join(&row.olfactory);
                let csv = read_bytes(&csv_path)?;
                let text = std::str::from_utf8(&csv)
                    .map_err(|_| Error::data(format!("{}: not UTF-8", csv_path.display())))?;
                let series = decode_series_csv(text).map_err(|e| Error::data(format!("{}: {e}", csv_path.display())))?;
                let stable = extract_stable_phase(&series, window)?;
                let img_path = root.join(&row.image);
                let img = RgbImage::decode_ppm(&read_bytes(&img_path)?)
                    .map_err(|e| Error::data(format!("{}: {e}", img_path.display())))?;
                Ok((stable, img))
            })
            .collect::<Result<_>>()?;

        let side = loaded.first().map_or(0, |(_, img)| img.width());
        let mut stable = Vec::with_capacity(rows.len());
        let mut pixels = Vec::with_capacity(rows.len() * side * side * 3);
        for ((s, img), row) in loaded.into_iter().zip(&rows) {
            if img.width() != side || img.height() != side {
                return Err(Error::data(format!(
                    "{}: {}x{} image, expected {side}x{side}",
                    row.image,
                    img.width(),
                    img.height()
                )));
            }
            stable.push(s);
            pixels.extend_from_slice(img.as_raw());
        }
        if side % 3 != 0 {
            return Err(Error::data(format!("image side {side} is not divisible by 3")));
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            rows,
            normalizer,
            side,
            stable,
            pixels,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn rows(&self) -> &[ManifestRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.normalizer
    }

    pub fn image_side(&self) -> usize {
        self.side
    }

    /// Stable-phase means before normalization.
    pub fn stable_features(&self) -> &[SensorVector] {
        &self.stable
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.rows.len()).filter(|&i| self.rows[i].split == split).collect()
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.rows[i].label).collect()
    }

    pub fn image(&self, i: usize) -> RgbImage {
        let len = self.side * self.side * 3;
        RgbImage::from_raw(self.side, self.side, self.pixels[i * len..(i + 1) * len].to_vec())
            .expect("stored with matching size")
    }

    /// Refits the normalizer on the training rows.
    pub fn fit_normalizer(&self) -> Result<Normalizer> {
        let train: Vec<SensorVector> = self.indices(Split::Train).iter().map(|&i| self.stable[i]).collect();
        Normalizer::fit(&train, self.normalizer.window)
    }

    /// Model inputs for the given samples.
    pub fn inputs<T: Scalar>(&self, indices: &[usize]) -> Inputs<T> {
        let n = indices.len();
        let plane = self.side * self.side;
        let mut olfactory = Vec::with_capacity(n * SENSOR_CHANNELS);
        let mut images = vec![T::zero(); n * 3 * plane];
        let scale = 1.0 / 255.0;
        for (k, &i) in indices.iter().enumerate() {
            olfactory.extend(self.normalizer.normalize(&self.stable[i]).map(T::from_f64));
            let src = &self.pixels[i * plane * 3..(i + 1) * plane * 3];
            let dst = &mut images[k * 3 * plane..(k + 1) * 3 * plane];
            for (p, px) in src.chunks_exact(3).enumerate() {
                for c in 0..3 {
                    dst[c * plane + p] = T::from_f64(px[c] as f64 * scale);
                }
            }
        }
        Inputs {
            olfactory: Tensor::new(vec![n, SENSOR_CHANNELS], olfactory).expect("sized above"),
            images: Tensor::new(vec![n, 3, self.side, self.side], images).expect("sized above"),
        }
    }
}

//! Recalibration network: embedding stems, stacked layers, modality heads
//! and the three-way classifier.

pub mod layers;
pub mod params;

use std::ops::Range;

use serde::{Deserialize, Serialize};

pub use layers::{Ablation, CbamBlock, Conv, FdraLayer, ForwardOptions, LayerTrace, Linear, Norm, ResidualBlock, SeBlock};
pub use params::{Bound, ParamId, ParamStore};

use crate::error::{shape_err, Error, Result};
use crate::fdec::{self, PlrLinear, StemVars};
use crate::rng::SplitMix64;
use crate::tensor::{conv_out_len, Scalar, Tape, Tensor, Var};
use crate::{NUM_CLASSES, SENSOR_CHANNELS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub channels: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Frequencies per olfactory feature.
    pub plr_k: usize,
    /// Init std of the frequency coefficients.
    pub plr_sigma: f64,
    /// Insert a per-feature linear map between the periodic block and ReLU.
    pub plr_full: bool,
    pub image_side: usize,
    pub stem_channels: [usize; 2],
    pub layers: Vec<LayerSpec>,
    pub olfactory_width: usize,
    pub head_width: usize,
    pub se_reduction: usize,
    pub cbam_reduction: usize,
    pub cbam_kernel: usize,
    pub gn_group_size: usize,
    pub ablation: Ablation,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            plr_k: 16,
            plr_sigma: 1.0,
            plr_full: false,
            image_side: 216,
            stem_channels: [8, 16],
            layers: vec![
                LayerSpec { channels: 32, stride: 2 },
                LayerSpec { channels: 64, stride: 2 },
                LayerSpec { channels: 64, stride: 1 },
                LayerSpec { channels: 128, stride: 2 },
            ],
            olfactory_width: 128,
            head_width: 64,
            se_reduction: 4,
            cbam_reduction: 8,
            cbam_kernel: 7,
            gn_group_size: 4,
            ablation: Ablation::default(),
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// Two-layer model on 24x24 images for finite-difference checks.
    pub fn micro() -> Self {
        ModelConfig {
            plr_k: 2,
            image_side: 24,
            stem_channels: [2, 4],
            layers: vec![LayerSpec { channels: 8, stride: 2 }, LayerSpec { channels: 8, stride: 1 }],
            olfactory_width: 8,
            head_width: 4,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.plr_k == 0 {
            return bad("plr_k must be >= 1".into());
        }
        if !(self.plr_sigma.is_finite() && self.plr_sigma > 0.0) {
            return bad(format!("plr_sigma must be positive, got {}", self.plr_sigma));
        }
        if self.image_side == 0 || self.image_side % fdec::GRID != 0 {
            return bad(format!("image side {} is not divisible by 3", self.image_side));
        }
        if self.layers.is_empty() {
            return bad("at least one layer is required".into());
        }
        if self.stem_channels.contains(&0) || self.layers.iter().any(|l| l.channels == 0 || l.stride == 0) {
            return bad("channel counts and strides must be positive".into());
        }
        if [self.olfactory_width, self.head_width, self.se_reduction, self.cbam_reduction].contains(&0) {
            return bad("widths and reductions must be positive".into());
        }
        if self.cbam_kernel % 2 == 0 {
            return bad(format!("attention kernel {} must be odd", self.cbam_kernel));
        }
        if self.ablation.fdec_off && self.image_side % self.embedding_side() != 0 {
            return bad(format!(
                "image side {} cannot be average-pooled to {}",
                self.image_side,
                self.embedding_side()
            ));
        }
        Ok(())
    }

    fn stem_out(&self) -> usize {
        let patch = self.image_side / fdec::GRID;
        let once = conv_out_len(patch, 3, 2, 1).unwrap_or(0);
        conv_out_len(once, 3, 2, 1).unwrap_or(0)
    }

    /// Side of the reassembled visual embedding.
    pub fn embedding_side(&self) -> usize {
        self.stem_out() * fdec::GRID
    }

    /// Channel count and side of the visual state after each layer, starting
    /// with the embedding.
    pub fn visual_pyramid(&self) -> Vec<(usize, usize)> {
        let mut out = vec![(self.stem_channels[1], self.embedding_side())];
        for l in &self.layers {
            let side = out.last().unwrap().1;
            out.push((l.channels, conv_out_len(side, 3, l.stride, 1).unwrap_or(0)));
        }
        out
    }

    pub fn embedding_width(&self) -> usize {
        2 * self.plr_k
    }
}

/// Model inputs: normalized stable features and channel-first images.
#[derive(Debug, Clone)]
pub struct Inputs<T> {
    /// `[n, 10]`.
    pub olfactory: Tensor<T>,
    /// `[n, 3, side, side]` in `[0, 1]`.
    pub images: Tensor<T>,
}

impl<T: Scalar> Inputs<T> {
    pub fn len(&self) -> usize {
        self.olfactory.shape().first().copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
struct ModelIds {
    plr_w: ParamId,
    plr_lin: Option<(ParamId, ParamId)>,
    stem: [layers::Conv; 2],
    layers: Vec<FdraLayer>,
    head_o: Linear,
    head_v: Linear,
    cls: Linear,
}

/// Values recorded by one forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// `O`: `[n, 10, 2k]`.
    pub olfactory_embedding: Var,
    /// `V`: `[n, C, G, G]`.
    pub visual_embedding: Var,
    pub layers: Vec<LayerTrace>,
    /// Visual output of the last layer, before pooling.
    pub feature_map: Var,
    pub z_o: Var,
    pub z_v: Var,
    pub logits: Var,
}

#[derive(Debug, Clone)]
pub struct FdraModel<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    ids: ModelIds,
}

impl<T: Scalar> FdraModel<T> {
    /// Fresh model with parameters drawn from `config.init_seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let rng = &mut SplitMix64::stream(config.init_seed, &[0x1417]);
        let (d, k) = (SENSOR_CHANNELS, config.plr_k);

        let plr_w = store.add(
            "plr.w",
            Tensor::from_fn(&[d, k], |_| T::from_f64(rng.gaussian(0.0, config.plr_sigma))),
        );
        let plr_lin = config.plr_full.then(|| {
            let e = 2 * k;
            let std = (1.0 / e as f64).sqrt();
            let w = store.add(
                "plr.linear.weight",
                Tensor::from_fn(&[d, e, e], |_| T::from_f64(rng.gaussian(0.0, std))),
            );
            let b = store.add("plr.linear.bias", Tensor::zeros(&[d, 1, e]));
            (w, b)
        });
        let [c1, c2] = config.stem_channels;
        let stem = [
            layers::Conv::new(&mut store, rng, "stem.conv1", 3, c1, 3, 2, 1, true, true),
            layers::Conv::new(&mut store, rng, "stem.conv2", c1, c2, 3, 2, 1, true, true),
        ];

        let mut fdra = Vec::with_capacity(config.layers.len());
        let (mut c_o, mut f_o) = (d, config.embedding_width());
        let mut c_v = c2;
        for (m, spec) in config.layers.iter().enumerate() {
            let name = format!("layer{}", m + 1);
            let se = SeBlock::new(
                &mut store,
                rng,
                &format!("{name}.se"),
                c_o,
                f_o,
                config.olfactory_width,
                config.se_reduction,
            );
            let residual = ResidualBlock::new(
                &mut store,
                rng,
                &format!("{name}.residual"),
                c_v,
                spec.channels,
                spec.stride,
                config.gn_group_size,
            );
            let cbam = CbamBlock::new(
                &mut store,
                rng,
                &format!("{name}.cbam"),
                spec.channels,
                config.cbam_reduction,
                config.cbam_kernel,
            );
            fdra.push(FdraLayer { se, residual, cbam });
            (c_o, f_o, c_v) = (config.olfactory_width, 1, spec.channels);
        }
        let h = config.head_width;
        let head_o = Linear::new(&mut store, rng, "head_o", c_o * f_o, h, true, false);
        let head_v = Linear::new(&mut store, rng, "head_v", c_v, h, true, false);
        let cls = Linear::new(&mut store, rng, "classifier", 2 * h, NUM_CLASSES, true, false);

        Ok(FdraModel {
            config,
            params: store,
            ids: ModelIds {
                plr_w,
                plr_lin,
                stem,
                layers: fdra,
                head_o,
                head_v,
                cls,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn layers(&self) -> &[FdraLayer] {
        &self.ids.layers
    }

    pub fn classifier(&self) -> Linear {
        self.ids.cls
    }

    pub fn plr_weight(&self) -> ParamId {
        self.ids.plr_w
    }

    pub fn ablation(&self) -> Ablation {
        self.config.ablation
    }

    /// Switches ablation flags; parameters are kept so a checkpoint keeps
    /// one layout regardless of flags.
    pub fn set_ablation(&mut self, ablation: Ablation) -> Result<()> {
        let mut config = self.config.clone();
        config.ablation = ablation;
        config.validate()?;
        self.config = config;
        Ok(())
    }

    /// Same architecture and values in another precision.
    pub fn cast<U: Scalar>(&self) -> FdraModel<U> {
        FdraModel {
            config: self.config.clone(),
            params: self.params.cast(),
            ids: self.ids.clone(),
        }
    }

    /// Replaces every parameter tensor by name. All parameters must be
    /// present with their configured shapes; nothing changes on error.
    pub fn load_params(&mut self, tensors: Vec<(String, Tensor<T>)>) -> Result<()> {
        use crate::error::CheckpointError;
        let mut by_name: std::collections::HashMap<String, Tensor<T>> = std::collections::HashMap::new();
        for (name, value) in tensors {
            if by_name.insert(name.clone(), value).is_some() {
                return Err(CheckpointError::Malformed(format!("tensor {name} appears twice")).into());
            }
        }
        let mut ordered = Vec::with_capacity(self.params.len());
        for id in self.params.ids() {
            let name = self.params.name(id);
            let value = by_name
                .remove(name)
                .ok_or_else(|| CheckpointError::MissingTensor(name.to_string()))?;
            let expected = self.params.get(id).shape();
            if value.shape() != expected {
                return Err(CheckpointError::ShapeMismatch {
                    name: name.to_string(),
                    expected: expected.to_vec(),
                    found: value.shape().to_vec(),
                }
                .into());
            }
            ordered.push((id, value));
        }
        if let Some(name) = by_name.into_keys().min() {
            return Err(CheckpointError::UnknownTensor(name).into());
        }
        for (id, value) in ordered {
            self.params.set(id, value);
        }
        Ok(())
    }

    /// Builds the olfactory and visual embeddings `(O, V)`.
    pub fn embed(&self, tape: &mut Tape<T>, p: &Bound, inputs: &Inputs<T>) -> Result<(Var, Var)> {
        let n = inputs.len();
        let side = self.config.image_side;
        if n == 0 {
            return Err(shape_err("forward", "empty batch"));
        }
        if inputs.olfactory.shape() != [n, SENSOR_CHANNELS] || inputs.images.shape() != [n, 3, side, side] {
            return Err(shape_err(
                "forward",
                format!(
                    "olfactory {:?} and images {:?}, expected [{n}, {SENSOR_CHANNELS}] and [{n}, 3, {side}, {side}]",
                    inputs.olfactory.shape(),
                    inputs.images.shape()
                ),
            ));
        }
        if self.config.ablation.fdec_off {
            let o = fdec::bypass_olfactory(&inputs.olfactory, self.config.embedding_width());
            let v = fdec::bypass_visual(&inputs.images, self.config.embedding_side(), self.config.stem_channels[1])?;
            return Ok((tape.constant(o), tape.constant(v)));
        }
        let s = tape.constant(inputs.olfactory.clone());
        let lin = self.ids.plr_lin.map(|(w, b)| PlrLinear {
            weight: p.var(w),
            bias: p.var(b),
        });
        let o = fdec::plr_embed(tape, s, p.var(self.ids.plr_w), lin)?;
        let images = tape.constant(inputs.images.clone());
        let patches = fdec::split_patches(tape, images)?;
        let [c1, c2] = self.ids.stem;
        let stem = StemVars {
            conv1: (p.var(c1.w), p.var(c1.b.expect("stem bias"))),
            conv2: (p.var(c2.w), p.var(c2.b.expect("stem bias"))),
        };
        let v = fdec::plce_embed(tape, patches, &stem)?;
        Ok((o, v))
    }

    /// Threads the states through layers `range` (0-based).
    pub fn run_layers(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        mut x_o: Var,
        mut x_v: Var,
        range: Range<usize>,
        opts: ForwardOptions,
    ) -> Result<Vec<LayerTrace>> {
        let mut traces = Vec::with_capacity(range.len());
        for layer in &self.ids.layers[range] {
            let t = layer.apply(tape, p, x_o, x_v, self.config.ablation, opts)?;
            (x_o, x_v) = (t.h_o, t.h_v);
            traces.push(t);
        }
        Ok(traces)
    }

    /// Modality heads and classifier logits from the last layer's states.
    pub fn heads(&self, tape: &mut Tape<T>, p: &Bound, x_o: Var, x_v: Var) -> Result<(Var, Var, Var)> {
        let so = tape.shape(x_o).to_vec();
        let sv = tape.shape(x_v).to_vec();
        let n = so[0];
        let flat_o = tape.reshape(x_o, &[n, so[1..].iter().product()])?;
        let z_o = self.ids.head_o.apply(tape, p, flat_o)?;
        let spatial = tape.reshape(x_v, &[n, sv[1], sv[2] * sv[3]])?;
        let pooled = tape.reduce_mean(spatial, 2)?;
        let pooled = tape.reshape(pooled, &[n, sv[1]])?;
        let z_v = self.ids.head_v.apply(tape, p, pooled)?;
        let joint = tape.concat(&[z_v, z_o], 1)?;
        let logits = self.ids.cls.apply(tape, p, joint)?;
        Ok((z_o, z_v, logits))
    }

    pub fn forward(&self, tape: &mut Tape<T>, p: &Bound, inputs: &Inputs<T>, opts: ForwardOptions) -> Result<Trace> {
        let (o, v) = self.embed(tape, p, inputs)?;
        let layers = self.run_layers(tape, p, o, v, 0..self.ids.layers.len(), opts)?;
        let last = layers.last().expect("validated non-empty");
        let (x_o, x_v) = (last.h_o, last.h_v);
        let (z_o, z_v, logits) = self.heads(tape, p, x_o, x_v)?;
        if !tape.value(logits).all_finite() {
            return Err(Error::Numeric("non-finite logits".into()));
        }
        Ok(Trace {
            olfactory_embedding: o,
            visual_embedding: v,
            layers,
            feature_map: x_v,
            z_o,
            z_v,
            logits,
        })
    }

    /// Class logits `[n, 3]` on frozen weights.
    pub fn logits(&self, inputs: &Inputs<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let trace = self.forward(&mut tape, &p, inputs, ForwardOptions::default())?;
        Ok(tape.value(trace.logits).clone())
    }

    /// Class probabilities `[n, 3]`; every row sums to one.
    pub fn predict(&self, inputs: &Inputs<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let trace = self.forward(&mut tape, &p, inputs, ForwardOptions::default())?;
        let probs = tape.softmax(trace.logits)?;
        Ok(tape.value(probs).clone())
    }
}

/// Row-wise argmax; ties resolve to the lowest class index.
pub fn argmax_rows<T: Scalar>(scores: &Tensor<T>) -> Vec<usize> {
    let c = scores.shape().last().copied().unwrap_or(1).max(1);
    scores
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

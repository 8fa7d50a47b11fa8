//! Building blocks of one recalibration layer.

use serde::{Deserialize, Serialize};

use super::params::{Bound, ParamId, ParamStore};
use crate::error::{shape_err, Result};
use crate::rng::SplitMix64;
use crate::tensor::{Scalar, Tape, Tensor, Var};

pub const NORM_EPS: f64 = 1e-5;

/// Switches that remove parts of the model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    /// Replace both embedding stems with fixed, parameter-free reducers.
    pub fdec_off: bool,
    /// Skip olfactory channel gating.
    pub se_off: bool,
    /// Skip channel/spatial masking on the visual branch.
    pub cbam_off: bool,
}

/// Diagnostic overrides: the gates and masks are still computed but a
/// tensor of ones is multiplied in their place.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    pub unit_gates: bool,
    pub unit_masks: bool,
}

fn normal<T: Scalar>(rng: &mut SplitMix64, shape: &[usize], std: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64(rng.gaussian(0.0, std)))
}

/// He-normal when a ReLU follows, `1/sqrt(fan_in)` otherwise.
fn init_std(fan_in: usize, relu_follows: bool) -> f64 {
    let gain = if relu_follows { 2.0 } else { 1.0 };
    (gain / fan_in.max(1) as f64).sqrt()
}

/// Dense map `x @ w + b` with `w: [in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut SplitMix64,
        name: &str,
        inputs: usize,
        outputs: usize,
        bias: bool,
        relu_follows: bool,
    ) -> Self {
        let w = store.add(
            format!("{name}.weight"),
            normal(rng, &[inputs, outputs], init_std(inputs, relu_follows)),
        );
        let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[outputs])));
        Linear { w, b }
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        match self.b {
            Some(b) => tape.linear(x, p.var(self.w), p.var(b)),
            None => tape.matmul(x, p.var(self.w)),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut SplitMix64,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        relu_follows: bool,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let w = store.add(
            format!("{name}.weight"),
            normal(rng, &[cout, cin, kernel, kernel], init_std(fan_in, relu_follows)),
        );
        let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[cout])));
        Conv { w, b, stride, pad }
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, p.var(self.w), self.b.map(|b| p.var(b)), self.stride, self.pad)
    }
}

/// Group normalization with affine scale and shift.
#[derive(Debug, Clone, Copy)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

/// Groups of `group_size` channels; a single group when the channel count
/// does not split evenly.
pub fn norm_groups(channels: usize, group_size: usize) -> usize {
    if group_size > 0 && channels >= group_size && channels % group_size == 0 {
        channels / group_size
    } else {
        1
    }
}

impl Norm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, group_size: usize) -> Self {
        Norm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            groups: norm_groups(channels, group_size),
        }
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.group_norm(x, p.var(self.gamma), p.var(self.beta), self.groups, NORM_EPS)
    }
}

/// Olfactory recalibration: pooled channel descriptor -> bottleneck MLP ->
/// sigmoid gates, gated state flattened through a linear map.
#[derive(Debug, Clone, Copy)]
pub struct SeBlock {
    pub fc1: Linear,
    pub fc2: Linear,
    pub proj: Linear,
    pub channels: usize,
    pub features: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct SeOutput {
    /// `[n, C]` gates; `None` when gating is disabled.
    pub gates: Option<Var>,
    pub recalibrated: Var,
    /// `[n, width, 1]`.
    pub out: Var,
}

impl SeBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut SplitMix64,
        name: &str,
        channels: usize,
        features: usize,
        width: usize,
        reduction: usize,
    ) -> Self {
        let hidden = channels.div_ceil(reduction.max(1)).max(1);
        SeBlock {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), channels, hidden, true, true),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, channels, true, false),
            proj: Linear::new(store, rng, &format!("{name}.proj"), channels * features, width, true, false),
            channels,
            features,
            width,
        }
    }

    /// `x: [n, C, F]`.
    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var, enabled: bool, unit: bool) -> Result<SeOutput> {
        let s = tape.shape(x).to_vec();
        if s.len() != 3 || s[1] != self.channels || s[2] != self.features {
            return Err(shape_err(
                "se_recalibrate",
                format!("state {s:?}, expected [n, {}, {}]", self.channels, self.features),
            ));
        }
        let n = s[0];
        let (gates, recalibrated) = if enabled {
            let pooled = tape.reduce_mean(x, 2)?;
            let pooled = tape.reshape(pooled, &[n, self.channels])?;
            let hidden = self.fc1.apply(tape, p, pooled)?;
            let hidden = tape.relu(hidden)?;
            let logits = self.fc2.apply(tape, p, hidden)?;
            let gates = tape.sigmoid(logits)?;
            let applied = if unit {
                tape.constant(Tensor::ones(&[n, self.channels]))
            } else {
                gates
            };
            let applied = tape.reshape(applied, &[n, self.channels, 1])?;
            (Some(gates), tape.mul(x, applied)?)
        } else {
            (None, x)
        };
        let flat = tape.reshape(recalibrated, &[n, self.channels * self.features])?;
        let out = self.proj.apply(tape, p, flat)?;
        let out = tape.reshape(out, &[n, self.width, 1])?;
        Ok(SeOutput {
            gates,
            recalibrated,
            out,
        })
    }
}

/// Channel-then-spatial attention masking of a feature map.
#[derive(Debug, Clone, Copy)]
pub struct CbamBlock {
    pub fc1: Linear,
    pub fc2: Linear,
    pub spatial: Conv,
    pub channels: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct CbamOutput {
    /// `[n, C, 1, 1]`.
    pub channel_mask: Var,
    /// `[n, 1, H, W]`.
    pub spatial_mask: Var,
    pub out: Var,
}

impl CbamBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut SplitMix64,
        name: &str,
        channels: usize,
        reduction: usize,
        kernel: usize,
    ) -> Self {
        let hidden = (channels / reduction.max(1)).max(1);
        CbamBlock {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), channels, hidden, false, true),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, channels, false, false),
            spatial: Conv::new(store, rng, &format!("{name}.spatial"), 2, 1, kernel, 1, kernel / 2, false, false),
            channels,
        }
    }

    fn mlp<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.apply(tape, p, x)?;
        let h = tape.relu(h)?;
        self.fc2.apply(tape, p, h)
    }

    /// `x: [n, C, H, W]`; output has the same shape.
    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var, unit: bool) -> Result<CbamOutput> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.channels {
            return Err(shape_err("cbam", format!("map {s:?}, expected {} channels", self.channels)));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let flat = tape.reshape(x, &[n, c, h * w])?;
        let avg = tape.reduce_mean(flat, 2)?;
        let avg = tape.reshape(avg, &[n, c])?;
        let max = tape.reduce_max(flat, 2)?;
        let max = tape.reshape(max, &[n, c])?;
        let a = self.mlp(tape, p, avg)?;
        let m = self.mlp(tape, p, max)?;
        let logits = tape.add(a, m)?;
        let channel_mask = tape.sigmoid(logits)?;
        let channel_mask = tape.reshape(channel_mask, &[n, c, 1, 1])?;
        let applied = if unit {
            tape.constant(Tensor::ones(&[n, c, 1, 1]))
        } else {
            channel_mask
        };
        let refined = tape.mul(x, applied)?;

        let mean = tape.reduce_mean(refined, 1)?;
        let max = tape.reduce_max(refined, 1)?;
        let stacked = tape.concat(&[mean, max], 1)?;
        let logits = self.spatial.apply(tape, p, stacked)?;
        let spatial_mask = tape.sigmoid(logits)?;
        let applied = if unit {
            tape.constant(Tensor::ones(&[n, 1, h, w]))
        } else {
            spatial_mask
        };
        let out = tape.mul(refined, applied)?;
        Ok(CbamOutput {
            channel_mask,
            spatial_mask,
            out,
        })
    }
}

/// Two-stage residual branch and its shortcut.
#[derive(Debug, Clone, Copy)]
pub struct ResidualBlock {
    pub conv1: Conv,
    pub norm1: Norm,
    pub conv2: Conv,
    pub norm2: Norm,
    /// `None` means identity.
    pub shortcut: Option<Conv>,
}

impl ResidualBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut SplitMix64,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        group_size: usize,
    ) -> Self {
        let conv1 = Conv::new(store, rng, &format!("{name}.conv1"), cin, cout, 3, stride, 1, false, true);
        let norm1 = Norm::new(store, &format!("{name}.norm1"), cout, group_size);
        let conv2 = Conv::new(store, rng, &format!("{name}.conv2"), cout, cout, 3, 1, 1, false, false);
        let norm2 = Norm::new(store, &format!("{name}.norm2"), cout, group_size);
        let shortcut = (cin != cout || stride != 1)
            .then(|| Conv::new(store, rng, &format!("{name}.shortcut"), cin, cout, 1, stride, 0, true, false));
        ResidualBlock {
            conv1,
            norm1,
            conv2,
            norm2,
            shortcut,
        }
    }

    pub fn branch<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.conv1.apply(tape, p, x)?;
        let h = self.norm1.apply(tape, p, h)?;
        let h = tape.relu(h)?;
        let h = self.conv2.apply(tape, p, h)?;
        self.norm2.apply(tape, p, h)
    }

    pub fn shortcut<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        match &self.shortcut {
            Some(conv) => conv.apply(tape, p, x),
            None => Ok(x),
        }
    }
}

/// One layer: olfactory recalibration next to a residual visual block
/// with attention masking before the residual sum.
#[derive(Debug, Clone, Copy)]
pub struct FdraLayer {
    pub se: SeBlock,
    pub residual: ResidualBlock,
    pub cbam: CbamBlock,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerTrace {
    pub h_o: Var,
    pub h_v: Var,
    pub gates: Option<Var>,
    pub residual: Var,
    pub cbam: Option<CbamOutput>,
}

impl FdraLayer {
    pub fn apply<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x_o: Var,
        x_v: Var,
        ablation: Ablation,
        opts: ForwardOptions,
    ) -> Result<LayerTrace> {
        let se = self.se.apply(tape, p, x_o, !ablation.se_off, opts.unit_gates)?;
        let r = self.residual.branch(tape, p, x_v)?;
        let cbam = if ablation.cbam_off {
            None
        } else {
            Some(self.cbam.apply(tape, p, r, opts.unit_masks)?)
        };
        let refined = cbam.map_or(r, |c| c.out);
        let skip = self.residual.shortcut(tape, p, x_v)?;
        if tape.shape(refined) != tape.shape(skip) {
            return Err(shape_err(
                "fdra_layer",
                format!("residual {:?} vs shortcut {:?}", tape.shape(refined), tape.shape(skip)),
            ));
        }
        let h_v = tape.add(refined, skip)?;
        Ok(LayerTrace {
            h_o: se.out,
            h_v,
            gates: se.gates,
            residual: r,
            cbam,
        })
    }
}

//! Cross-entropy training with Adam, deterministic batching and evaluation.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::model::{argmax_rows, Ablation, FdraModel, ForwardOptions, ModelConfig};
use crate::optim::{Adam, AdamConfig};
use crate::persist::write_atomic;
use crate::rng::SplitMix64;
use crate::tensor::{flush_subnormals, Scalar, Tape, Tensor};

const STREAM_SHUFFLE: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    /// Seeds both the parameter init and the per-epoch shuffle.
    pub seed: u64,
    pub ablation: Ablation,
    /// Samples per forward pass; a batch is split into chunks whose
    /// gradients are accumulated before the single optimizer step.
    pub chunk: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch: 64,
            adam: AdamConfig::default(),
            seed: 42,
            ablation: Ablation::default(),
            chunk: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 || self.chunk == 0 {
            return Err(Error::Config("epochs, batch and chunk must be at least 1".into()));
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.adam;
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
            return Err(Error::Config("adam betas must lie in [0, 1) and eps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation accuracy (lower
    /// validation loss breaks ties).
    pub best: FdraModel<f32>,
    pub best_epoch: usize,
    pub last: FdraModel<f32>,
    pub history: Vec<EpochStats>,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loss: f64,
    pub predictions: Vec<usize>,
    pub report: EvalReport,
}

/// Epoch order for the training samples: a fixed function of seed and epoch.
pub fn epoch_order(train: &[usize], seed: u64, epoch: usize) -> Vec<usize> {
    let mut order = train.to_vec();
    SplitMix64::stream(seed, &[STREAM_SHUFFLE, epoch as u64]).shuffle(&mut order);
    order
}

fn non_finite(what: &str) -> Error {
    Error::Numeric(format!("{what} is not finite; training diverged"))
}

/// Mean loss and gradients (one slot per parameter) for one chunk.
fn chunk_gradients(model: &FdraModel<f32>, data: &Dataset, indices: &[usize]) -> Result<(f64, Vec<Option<Tensor<f32>>>)> {
    let inputs = data.inputs::<f32>(indices);
    let labels = data.labels(indices);
    let mut tape = Tape::new();
    let p = model.params().bind(&mut tape);
    let trace = model.forward(&mut tape, &p, &inputs, ForwardOptions::default())?;
    let loss = tape.cross_entropy(trace.logits, &labels)?;
    let value = tape.value(loss).item().expect("scalar loss").as_f64();
    if !value.is_finite() {
        return Err(non_finite("loss"));
    }
    let mut grads = tape.backward(loss)?;
    Ok((value, p.vars().iter().map(|&v| grads.take(v)).collect()))
}

/// Gradient of the batch-mean loss, accumulated over chunks in a fixed order
/// so the result does not depend on the worker count.
pub fn batch_gradients(
    model: &FdraModel<f32>,
    data: &Dataset,
    batch: &[usize],
    chunk: usize,
) -> Result<(f64, Vec<Option<Tensor<f32>>>)> {
    let parts: Vec<_> = batch
        .par_chunks(chunk)
        .map(|c| chunk_gradients(model, data, c).map(|r| (c.len(), r)))
        .collect::<Result<_>>()?;
    let total = batch.len() as f64;
    let mut loss = 0.0;
    let mut acc: Vec<Option<Tensor<f32>>> = vec![None; model.params().len()];
    for (n, (l, grads)) in parts {
        let w = n as f64 / total;
        loss += w * l;
        for (slot, g) in acc.iter_mut().zip(grads) {
            let Some(g) = g else { continue };
            let wf = w as f32;
            match slot {
                None => *slot = Some(g.map(|v| v * wf)),
                Some(s) => {
                    for (a, b) in s.data_mut().iter_mut().zip(g.data()) {
                        *a += b * wf;
                    }
                }
            }
        }
    }
    if acc.iter().flatten().any(|g| !g.all_finite()) {
        return Err(non_finite("gradient"));
    }
    Ok((loss, acc))
}

/// Loss, predictions and metrics on the given samples, on frozen weights.
pub fn evaluate_indices(model: &FdraModel<f32>, data: &Dataset, indices: &[usize], chunk: usize) -> Result<Evaluation> {
    if indices.is_empty() {
        return Err(Error::data("cannot evaluate an empty split"));
    }
    let parts: Vec<(f64, Vec<usize>)> = indices
        .par_chunks(chunk.max(1))
        .map(|c| {
            let inputs = data.inputs::<f32>(c);
            let labels = data.labels(c);
            let mut tape = Tape::new();
            let p = model.params().bind(&mut tape);
            let trace = model.forward(&mut tape, &p, &inputs, ForwardOptions::default())?;
            let loss = tape.cross_entropy(trace.logits, &labels)?;
            let loss = tape.value(loss).item().expect("scalar loss").as_f64();
            Ok((loss * c.len() as f64, argmax_rows(tape.value(trace.logits))))
        })
        .collect::<Result<_>>()?;
    let loss = parts.iter().map(|(l, _)| l).sum::<f64>() / indices.len() as f64;
    let predictions: Vec<usize> = parts.into_iter().flat_map(|(_, p)| p).collect();
    let report = EvalReport::from_predictions(&data.labels(indices), &predictions)?;
    Ok(Evaluation {
        loss,
        predictions,
        report,
    })
}

pub fn evaluate(model: &FdraModel<f32>, data: &Dataset, split: Split, chunk: usize) -> Result<Evaluation> {
    let indices = data.indices(split);
    if indices.is_empty() {
        return Err(Error::data(format!("split {split:?} is empty")));
    }
    evaluate_indices(model, data, &indices, chunk)
}

/// Builds the model for `cfg` (ablation and init seed taken from it) and
/// checks it against the corpus.
pub fn build_model(data: &Dataset, model: &ModelConfig, cfg: &TrainConfig) -> Result<FdraModel<f32>> {
    cfg.validate()?;
    if model.image_side != data.image_side() {
        return Err(Error::Config(format!(
            "model expects {0}x{0} images but the corpus has {1}x{1}",
            model.image_side,
            data.image_side()
        )));
    }
    let mut mc = model.clone();
    mc.ablation = cfg.ablation;
    mc.init_seed = cfg.seed;
    FdraModel::new(mc)
}

/// Worker pool for training: same size as the ambient rayon pool, with
/// subnormal flushing on every worker.
fn training_pool() -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(rayon::current_num_threads())
        .start_handler(|_| flush_subnormals())
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker threads: {e}")))
}

pub fn train(data: &Dataset, model: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(data, model, cfg, |_, _| Ok(()))
}

/// Full training run. `on_epoch` sees each epoch's statistics and the
/// current weights; an error from it aborts the run.
pub fn train_with(
    data: &Dataset,
    model: &ModelConfig,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochStats, &FdraModel<f32>) -> Result<()> + Send,
) -> Result<TrainOutcome> {
    training_pool()?.install(|| train_epochs(data, model, cfg, on_epoch))
}

fn train_epochs(
    data: &Dataset,
    model: &ModelConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats, &FdraModel<f32>) -> Result<()>,
) -> Result<TrainOutcome> {
    let mut net = build_model(data, model, cfg)?;
    let train_idx = data.indices(Split::Train);
    let val_idx = data.indices(Split::Val);
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::data("training needs non-empty train and val splits"));
    }
    let mut adam = Adam::new(cfg.adam, net.params().tensors());
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(FdraModel<f32>, usize, f64, f64)> = None;

    for epoch in 1..=cfg.epochs {
        let order = epoch_order(&train_idx, cfg.seed, epoch);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch) {
            let (loss, grads) = batch_gradients(&net, data, batch, cfg.chunk)?;
            adam.step(net.params_mut().tensors_mut(), &grads);
            epoch_loss += loss * batch.len() as f64;
        }
        let val = evaluate_indices(&net, data, &val_idx, cfg.chunk)?;
        let stats = EpochStats {
            epoch,
            train_loss: epoch_loss / train_idx.len() as f64,
            val_loss: val.loss,
            val_acc: val.report.accuracy,
        };
        if !stats.val_loss.is_finite() {
            return Err(non_finite("validation loss"));
        }
        history.push(stats);
        let better = match &best {
            None => true,
            Some((_, _, acc, loss)) => stats.val_acc > *acc || (stats.val_acc == *acc && stats.val_loss < *loss),
        };
        if better {
            best = Some((net.clone(), epoch, stats.val_acc, stats.val_loss));
        }
        on_epoch(&stats, &net)?;
    }
    let (best, best_epoch, _, _) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best,
        best_epoch,
        last: net,
        history,
    })
}

pub fn history_csv(history: &[EpochStats]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss,val_acc\n");
    for h in history {
        let _ = writeln!(s, "{},{:.6},{:.6},{:.6}", h.epoch, h.train_loss, h.val_loss, h.val_acc);
    }
    s
}

pub fn write_history(path: &Path, history: &[EpochStats]) -> Result<()> {
    write_atomic(path, history_csv(history).as_bytes())
}

/// The five compared variants, full model first.
pub const ABLATION_VARIANTS: [(&str, Ablation); 5] = [
    ("full", Ablation { fdec_off: false, se_off: false, cbam_off: false }),
    ("no-FDEC", Ablation { fdec_off: true, se_off: false, cbam_off: false }),
    ("no-SE", Ablation { fdec_off: false, se_off: true, cbam_off: false }),
    ("no-CBAM", Ablation { fdec_off: false, se_off: false, cbam_off: true }),
    ("no-SE+CBAM", Ablation { fdec_off: false, se_off: true, cbam_off: true }),
];

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub name: &'static str,
    pub ablation: Ablation,
    /// Test accuracy of the best-validation checkpoint, one per seed.
    pub accuracies: Vec<f64>,
    pub models: Vec<FdraModel<f32>>,
}

impl AblationRow {
    pub fn mean(&self) -> f64 {
        self.accuracies.iter().sum::<f64>() / self.accuracies.len() as f64
    }
}

#[derive(Debug, Clone)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Mean accuracy of `name` minus that of the full model.
    pub fn delta(&self, name: &str) -> Option<f64> {
        Some(self.row(name)?.mean() - self.row("full")?.mean())
    }

    /// Plain-text table: per-seed and mean test accuracy, and the change
    /// against the full model, all in percent.
    pub fn render(&self) -> String {
        let mut s = String::from("variant     ");
        for seed in &self.seeds {
            let _ = write!(s, " seed {seed:<4}");
        }
        s.push_str("  mean acc  dacc\n");
        for row in &self.rows {
            let _ = write!(s, "{:<12}", row.name);
            for a in &row.accuracies {
                let _ = write!(s, " {:>9.2}", a * 100.0);
            }
            let delta = self.delta(row.name).unwrap_or(0.0) * 100.0;
            let _ = writeln!(s, "  {:>8.2}  {:>+.2}", row.mean() * 100.0, delta);
        }
        s
    }
}

/// Trains every variant once per seed on `data` and scores the
/// best-validation checkpoint on the test split.
pub fn run_ablation(
    data: &Dataset,
    model: &ModelConfig,
    base: &TrainConfig,
    seeds: &[u64],
    mut progress: impl FnMut(&str, u64, f64),
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let mut rows = Vec::with_capacity(ABLATION_VARIANTS.len());
    for (name, ablation) in ABLATION_VARIANTS {
        let mut row = AblationRow {
            name,
            ablation,
            accuracies: Vec::with_capacity(seeds.len()),
            models: Vec::with_capacity(seeds.len()),
        };
        for &seed in seeds {
            let cfg = TrainConfig { seed, ablation, ..*base };
            let out = train(data, model, &cfg)?;
            let acc = evaluate(&out.best, data, Split::Test, cfg.chunk)?.report.accuracy;
            progress(name, seed, acc);
            row.accuracies.push(acc);
            row.models.push(out.best);
        }
        rows.push(row);
    }
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        rows,
    })
}

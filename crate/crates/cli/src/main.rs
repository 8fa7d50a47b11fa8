use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use moldsense::dataset::{Dataset, Split};
use moldsense::explain::{grad_cam, overlay, render_heatmap, DEFAULT_ALPHA};
use moldsense::metrics::EvalReport;
use moldsense::model::{argmax_rows, Ablation, ModelConfig};
use moldsense::optim::AdamConfig;
use moldsense::persist::checkpoint::{load_checkpoint, save_checkpoint};
use moldsense::persist::{create_dir, read_bytes, read_json, report, write_atomic};
use moldsense::synth::{gen_dataset, GenSpec};
use moldsense::train::{evaluate, run_ablation, train_with, write_history, TrainConfig};
use moldsense::{Error, Result, CLASS_NAMES};

#[derive(Parser)]
#[command(name = "moldsense", version, about = "Olfactory-visual rice deterioration classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    Gen(GenArgs),
    /// Train a model and save the best-validation checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a split, or score a predictions file.
    Eval(EvalArgs),
    /// Render a Grad-CAM heatmap and overlay for one sample.
    Gradcam(GradcamArgs),
    /// Train the five ablation variants over several seeds and compare them.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 9)]
    days: u32,
    #[arg(long, default_value_t = 67)]
    per_class_per_day: usize,
    #[arg(long, default_value_t = 0.5)]
    difficulty: f64,
    #[arg(long, default_value_t = 216)]
    image_side: usize,
    #[arg(long, default_value_t = 0.05)]
    drift_scale: f64,
    #[arg(long, default_value_t = 2.0)]
    day9_gap: f64,
    #[arg(long, default_value_t = 0.7)]
    noise: f64,
}

#[derive(Args)]
struct ModelArgs {
    /// JSON model config; defaults to the standard model at the corpus image size.
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long)]
    no_fdec: bool,
    #[arg(long)]
    no_se: bool,
    #[arg(long)]
    no_cbam: bool,
}

impl ModelArgs {
    fn ablation(&self) -> Ablation {
        Ablation {
            fdec_off: self.no_fdec,
            se_off: self.no_se,
            cbam_off: self.no_cbam,
        }
    }

    fn config(&self, data: &Dataset) -> Result<ModelConfig> {
        match &self.model_config {
            Some(path) => read_json(path),
            None => Ok(ModelConfig {
                image_side: data.image_side(),
                ..ModelConfig::default()
            }),
        }
    }
}

#[derive(Args)]
struct OptimArgs {
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Samples per forward pass inside a batch.
    #[arg(long, default_value_t = 16)]
    chunk: usize,
}

impl OptimArgs {
    fn config(&self, seed: u64, ablation: Ablation) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch: self.batch,
            adam: AdamConfig {
                lr: self.lr,
                ..AdamConfig::default()
            },
            seed,
            ablation,
            chunk: self.chunk,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Output directory for model.fdra, model.fdra.json and history.csv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[command(flatten)]
    optim: OptimArgs,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, required_unless_present = "predictions", requires = "data")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: Split,
    /// CSV with a `truth,pred` header; scores it instead of running a model.
    #[arg(long, conflicts_with_all = ["checkpoint", "data"])]
    predictions: Option<PathBuf>,
    /// Where to write report.json; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcamArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Manifest id of the sample.
    #[arg(long)]
    id: u32,
    /// Class to explain; defaults to the predicted class.
    #[arg(long)]
    class: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    #[command(flatten)]
    optim: OptimArgs,
    #[arg(long)]
    model_config: Option<PathBuf>,
    /// Also write the table to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let spec = GenSpec {
        seed: a.seed,
        days: a.days,
        per_class_per_day: a.per_class_per_day,
        difficulty: a.difficulty,
        image_side: a.image_side,
        drift_scale: a.drift_scale,
        day9_gap: a.day9_gap,
        noise: a.noise,
    };
    let rows = gen_dataset(&spec, &a.out)?;
    let count = |s: Split| rows.iter().filter(|r| r.split == s).count();
    eprintln!(
        "wrote {} samples to {} (train {}, val {}, test {})",
        rows.len(),
        a.out.display(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test)
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let data = Dataset::load(&a.data)?;
    let model = a.model.config(&data)?;
    let cfg = a.optim.config(a.seed, a.model.ablation());
    let out = train_with(&data, &model, &cfg, |s, _| {
        eprintln!(
            "epoch {:>3}  train_loss {:.5}  val_loss {:.5}  val_acc {:.2}%",
            s.epoch,
            s.train_loss,
            s.val_loss,
            s.val_acc * 100.0
        );
        Ok(())
    })?;
    create_dir(&a.out)?;
    save_checkpoint(&out.best, &a.out.join("model.fdra"))?;
    write_history(&a.out.join("history.csv"), &out.history)?;
    eprintln!("best epoch {}; checkpoint in {}", out.best_epoch, a.out.display());
    Ok(())
}

fn parse_class(field: &str, line: usize) -> Result<usize> {
    let field = field.trim();
    if let Some(i) = CLASS_NAMES.iter().position(|n| n.eq_ignore_ascii_case(field)) {
        return Ok(i);
    }
    match field.parse::<usize>() {
        Ok(i) if i < CLASS_NAMES.len() => Ok(i),
        _ => Err(Error::data(format!("predictions line {line}: {field:?} is not a class"))),
    }
}

fn read_predictions(path: &Path) -> Result<(Vec<usize>, Vec<usize>)> {
    let bytes = read_bytes(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|_| Error::data(format!("{}: not UTF-8", path.display())))?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == "truth,pred" => {}
        _ => return Err(Error::data(format!("{}: expected a truth,pred header", path.display()))),
    }
    let (mut truth, mut pred) = (Vec::new(), Vec::new());
    for (i, line) in lines {
        let (t, p) = line
            .split_once(',')
            .ok_or_else(|| Error::data(format!("predictions line {}: expected two fields", i + 1)))?;
        truth.push(parse_class(t, i + 1)?);
        pred.push(parse_class(p, i + 1)?);
    }
    Ok((truth, pred))
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let report = match (&a.predictions, &a.checkpoint, &a.data) {
        (Some(p), _, _) => {
            let (truth, pred) = read_predictions(p)?;
            EvalReport::from_predictions(&truth, &pred)?
        }
        (None, Some(ckpt), Some(data)) => {
            let model = load_checkpoint(ckpt)?;
            let data = Dataset::load(data)?;
            evaluate(&model, &data, a.split, 32)?.report
        }
        _ => return Err(Error::Config("eval needs --predictions or --checkpoint with --data".into())),
    };
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let text = report::to_json(&report);
    match &a.out {
        Some(path) => write_atomic(path, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_gradcam(a: GradcamArgs) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let data = Dataset::load(&a.data)?;
    let i = data
        .rows()
        .iter()
        .position(|r| r.id == a.id)
        .ok_or_else(|| Error::data(format!("no sample with id {}", a.id)))?;
    let olfactory = data.normalizer().normalize(&data.stable_features()[i]);
    let image = data.image(i);
    let class = match a.class {
        Some(c) => c,
        None => argmax_rows(&model.logits(&data.inputs::<f32>(&[i]))?)[0],
    };
    let heatmap = grad_cam(&model, &olfactory, &image, class)?;
    if heatmap.degenerate {
        eprintln!("warning: no positive evidence for {}; heatmap is all zero", CLASS_NAMES[class]);
    }
    create_dir(&a.out)?;
    let heat_path = a.out.join(format!("heatmap_{}.ppm", a.id));
    let overlay_path = a.out.join(format!("overlay_{}.ppm", a.id));
    write_atomic(&heat_path, &render_heatmap(&heatmap).encode_ppm())?;
    write_atomic(&overlay_path, &overlay(&heatmap, &image, a.alpha)?.encode_ppm())?;
    eprintln!(
        "sample {} (label {}), explaining {}: {} and {}",
        a.id,
        CLASS_NAMES[data.rows()[i].label],
        CLASS_NAMES[class],
        heat_path.display(),
        overlay_path.display()
    );
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let data = Dataset::load(&a.data)?;
    let model = match &a.model_config {
        Some(path) => read_json(path)?,
        None => ModelConfig {
            image_side: data.image_side(),
            ..ModelConfig::default()
        },
    };
    let seeds: Vec<u64> = (0..a.seeds).collect();
    let base = a.optim.config(0, Ablation::default());
    let table = run_ablation(&data, &model, &base, &seeds, |name, seed, acc| {
        eprintln!("{name:<12} seed {seed}: {:.2}%", acc * 100.0);
    })?;
    let text = table.render();
    print!("{text}");
    if let Some(path) = &a.out {
        write_atomic(path, text.as_bytes())?;
    }
    Ok(())
}

/// Caps the worker pool at `MOLDSENSE_THREADS` when set.
fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("MOLDSENSE_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("MOLDSENSE_THREADS must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot configure worker threads: {e}")))
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcam(a) => cmd_gradcam(a),
        Command::Ablate(a) => cmd_ablate(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

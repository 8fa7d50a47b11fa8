use std::path::Path;

use moldsense::dataset::{Dataset, Split};
use moldsense::metrics::{Confusion, EvalReport};
use moldsense::model::{argmax_rows, FdraModel, ModelConfig};
use moldsense::optim::{Adam, AdamConfig};
use moldsense::persist::report;
use moldsense::synth::{gen_dataset, GenSpec};
use moldsense::tensor::{Tape, Tensor};
use moldsense::train::{batch_gradients, build_model, epoch_order, evaluate, history_csv, train, TrainConfig};
use moldsense::Error;
use proptest::prelude::*;

fn tiny_corpus(dir: &Path) -> Dataset {
    let spec = GenSpec {
        days: 3,
        per_class_per_day: 5,
        image_side: 24,
        ..GenSpec::default()
    };
    gen_dataset(&spec, dir).unwrap();
    Dataset::load(dir).unwrap()
}

fn tiny_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch: 8,
        chunk: 3,
        seed: 7,
        adam: AdamConfig {
            lr: 3e-3,
            ..AdamConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn cross_entropy(logits: &[f64], labels: &[usize]) -> f64 {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_f64_slice(&[labels.len(), 3], logits).unwrap());
    let l = tape.cross_entropy(x, labels).unwrap();
    tape.value(l).item().unwrap()
}

#[test]
fn cross_entropy_reference_values() {
    assert!((cross_entropy(&[0.3, 0.3, 0.3], &[2]) - 3f64.ln()).abs() < 1e-15);
    // logits equal to log-probabilities reproduce the probabilities exactly
    let p = [0.7f64, 0.2, 0.1, 0.1, 0.8, 0.1];
    let logits: Vec<f64> = p.iter().map(|v| v.ln()).collect();
    let oracle = -(0.7f64.ln() + 0.8f64.ln()) / 2.0;
    assert!((cross_entropy(&logits, &[0, 1]) - oracle).abs() < 1e-12);
    assert!((oracle - 0.289909).abs() < 1e-6);
    assert!(cross_entropy(&[60.0, 0.0, 0.0], &[0]) < 1e-25);
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[1, 3]));
    assert!(tape.cross_entropy(x, &[3]).is_err());
}

#[test]
fn reference_confusion_metrics() {
    let truth: Vec<usize> = (0..900).map(|i| i / 300).collect();
    let mut predicted = truth.clone();
    predicted[0] = 2;
    let r = EvalReport::from_predictions(&truth, &predicted).unwrap();
    assert_eq!(r.confusion.counts, [[299, 0, 1], [0, 300, 0], [0, 0, 300]]);
    let pct = |v: f64| report::percent(v);
    assert_eq!(pct(r.accuracy), "99.89");
    let rows: Vec<[String; 3]> = r.per_class.iter().map(|m| [pct(m.precision), pct(m.recall), pct(m.f1)]).collect();
    assert_eq!(rows[0], ["100.00", "99.67", "99.83"]);
    assert_eq!(rows[1], ["100.00", "100.00", "100.00"]);
    assert_eq!(rows[2], ["99.67", "100.00", "99.83"]);
    assert!(r.warnings.is_empty());
}

fn definition_oracle(c: &[[u64; 3]; 3]) -> Vec<(f64, f64, f64)> {
    (0..3)
        .map(|k| {
            let tp = c[k][k] as f64;
            let fp: f64 = (0..3).filter(|&t| t != k).map(|t| c[t][k] as f64).sum();
            let fn_: f64 = (0..3).filter(|&p| p != k).map(|p| c[k][p] as f64).sum();
            let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let r = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
            let f = if p + r > 0.0 { 2.0 / (1.0 / p + 1.0 / r) } else { 0.0 };
            (p, r, f)
        })
        .collect()
}

proptest! {
    #[test]
    fn metrics_match_their_definitions(cells in prop::array::uniform9(0u64..50)) {
        let counts = [[cells[0], cells[1], cells[2]], [cells[3], cells[4], cells[5]], [cells[6], cells[7], cells[8]]];
        let total: u64 = cells.iter().sum();
        prop_assume!(total > 0);
        let r = EvalReport::from_confusion(Confusion { counts }).unwrap();
        prop_assert!((r.accuracy - (counts[0][0] + counts[1][1] + counts[2][2]) as f64 / total as f64).abs() < 1e-12);
        for (m, (p, rc, f)) in r.per_class.iter().zip(definition_oracle(&counts)) {
            prop_assert!((m.precision - p).abs() < 1e-12);
            prop_assert!((m.recall - rc).abs() < 1e-12);
            prop_assert!((m.f1 - f).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&m.precision) && (0.0..=1.0).contains(&m.recall) && (0.0..=1.0).contains(&m.f1));
        }
    }

    #[test]
    fn balanced_recall_average_is_accuracy(rows in prop::array::uniform3(prop::array::uniform2(0u64..40))) {
        // each class gets exactly 40 samples, split among the three predictions
        let mut counts = [[0u64; 3]; 3];
        for (t, r) in rows.iter().enumerate() {
            let (a, b) = (r[0].min(r[1]), r[0].max(r[1]));
            counts[t] = [a, b - a, 40 - b];
        }
        let r = EvalReport::from_confusion(Confusion { counts }).unwrap();
        let mean_recall = r.per_class.iter().map(|m| m.recall).sum::<f64>() / 3.0;
        prop_assert!((mean_recall - r.accuracy).abs() < 1e-12);
    }

    #[test]
    fn argmax_ignores_positive_rescaling(logits in prop::collection::vec(-10.0f64..10.0, 3 * 5), scale in 1e-3f64..1e3) {
        let a = Tensor::<f64>::from_f64_slice(&[5, 3], &logits).unwrap();
        prop_assert_eq!(argmax_rows(&a), argmax_rows(&a.map(|v| v * scale)));
    }
}

#[test]
fn argmax_ties_pick_the_lowest_class() {
    let t = Tensor::<f64>::from_f64_slice(&[2, 3], &[1.0, 1.0, 0.0, -1.0, 2.0, 2.0]).unwrap();
    assert_eq!(argmax_rows(&t), vec![0, 1]);
}

#[test]
fn shuffle_depends_only_on_seed_and_epoch() {
    let ids: Vec<usize> = (0..50).collect();
    assert_eq!(epoch_order(&ids, 3, 1), epoch_order(&ids, 3, 1));
    assert_ne!(epoch_order(&ids, 3, 1), epoch_order(&ids, 3, 2));
    assert_ne!(epoch_order(&ids, 3, 1), epoch_order(&ids, 4, 1));
    let mut sorted = epoch_order(&ids, 3, 1);
    sorted.sort();
    assert_eq!(sorted, ids);
}

#[test]
fn training_replays_bitwise_and_improves() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_corpus(dir.path());
    let cfg = tiny_config(4);
    let a = train(&data, &ModelConfig::micro(), &cfg).unwrap();
    let b = train(&data, &ModelConfig::micro(), &cfg).unwrap();
    assert_eq!(history_csv(&a.history), history_csv(&b.history));
    assert!(a.history.iter().zip(&b.history).all(|(x, y)| x.train_loss.to_bits() == y.train_loss.to_bits()));
    assert!(a.best.params().tensors().iter().zip(b.best.params().tensors()).all(|(x, y)| x.bit_eq(y)));
    assert_eq!(a.history.len(), 4);
    assert!(a.history.last().unwrap().train_loss < a.history[0].train_loss);
    assert!(a.history.iter().all(|h| h.train_loss >= 0.0 && h.val_loss >= 0.0));

    let best = &a.history[a.best_epoch - 1];
    assert!(a.history.iter().all(|h| h.val_acc < best.val_acc || (h.val_acc == best.val_acc && h.val_loss >= best.val_loss)));

    let csv = history_csv(&a.history);
    assert!(csv.starts_with("epoch,train_loss,val_loss,val_acc\n"));
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn gradients_do_not_depend_on_worker_count() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_corpus(dir.path());
    let model = build_model(&data, &ModelConfig::micro(), &tiny_config(1)).unwrap();
    let batch = data.indices(Split::Train)[..8].to_vec();
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| batch_gradients(&model, &data, &batch, 3).unwrap())
    };
    let (l1, g1) = run(1);
    let (l3, g3) = run(3);
    assert_eq!(l1.to_bits(), l3.to_bits());
    for (a, b) in g1.iter().zip(&g3) {
        assert!(a.as_ref().unwrap().bit_eq(b.as_ref().unwrap()));
    }
    assert!(g1.iter().flatten().all(|g| g.all_finite()));
    assert!(g1.iter().flatten().any(|g| g.data().iter().any(|&v| v != 0.0)));
}

#[test]
fn zero_learning_rate_freezes_the_loss() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_corpus(dir.path());
    let mut model = build_model(&data, &ModelConfig::micro(), &tiny_config(1)).unwrap();
    let batch = data.indices(Split::Train)[..6].to_vec();
    let frozen = AdamConfig {
        lr: 0.0,
        ..AdamConfig::default()
    };
    let mut adam = Adam::new(frozen, model.params().tensors());
    let (first, _) = batch_gradients(&model, &data, &batch, 3).unwrap();
    for _ in 0..3 {
        let (loss, grads) = batch_gradients(&model, &data, &batch, 3).unwrap();
        assert!((loss - first).abs() <= 1e-12 * first.abs());
        adam.step(model.params_mut().tensors_mut(), &grads);
    }
}

#[test]
fn divergence_is_a_numeric_failure() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_corpus(dir.path());
    let mut model = build_model(&data, &ModelConfig::micro(), &tiny_config(1)).unwrap();
    let id = model.params().ids().last().unwrap();
    model.params_mut().get_mut(id).data_mut()[0] = f32::NAN;
    let batch = data.indices(Split::Train)[..4].to_vec();
    let err = batch_gradients(&model, &data, &batch, 2).unwrap_err();
    assert!(matches!(err, Error::Numeric(_)), "{err}");
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn invalid_configurations_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_corpus(dir.path());
    let micro = ModelConfig::micro();
    for cfg in [
        TrainConfig { epochs: 0, ..tiny_config(1) },
        TrainConfig { batch: 0, ..tiny_config(1) },
        TrainConfig {
            adam: AdamConfig { lr: 0.0, ..AdamConfig::default() },
            ..tiny_config(1)
        },
    ] {
        assert!(matches!(train(&data, &micro, &cfg), Err(Error::Config(_))));
    }
    let wrong_side = ModelConfig {
        image_side: 48,
        ..ModelConfig::micro()
    };
    assert!(matches!(train(&data, &wrong_side, &tiny_config(1)), Err(Error::Config(_))));
}

#[test]
fn evaluation_covers_the_split() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_corpus(dir.path());
    let model = FdraModel::<f32>::new(ModelConfig::micro()).unwrap();
    let eval = evaluate(&model, &data, Split::Test, 4).unwrap();
    assert_eq!(eval.predictions.len(), 15);
    assert_eq!(eval.report.confusion.total(), 15);
    assert!(eval.loss.is_finite() && eval.loss > 0.0);
    let direct = argmax_rows(&model.logits(&data.inputs::<f32>(&data.indices(Split::Test))).unwrap());
    assert_eq!(eval.predictions, direct);
}

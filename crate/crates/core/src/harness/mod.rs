//! Training loop, evaluation, metrics and activation dumps.

mod config;
mod dump;

pub use config::{resolve_model, TrainConfig};
pub use dump::{dump_activations, write_pnm, DumpedImage};

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};

use crate::data::{make_batches, LabeledImageSet, Split};
use crate::error::{Error, Result};
use crate::models::{save_checkpoint, Model};
use crate::optim::{init_params, partition_params, Adam, InitConfig};
use crate::scalar::Scalar;
use crate::tensor::{no_grad, Mode, Tensor};

pub const METRICS_HEADER: &str = "epoch,iteration,split,loss,accuracy_pct,first_layer_grad_avg,collapsed";
pub const ITERATIONS_HEADER: &str = "epoch,iteration,loss,first_layer_grad_avg";

/// Accuracy band and gradient ceiling that mark a stalled run.
pub const PINNED_ACCURACY: (f64, f64) = (9.0, 11.0);
pub const VANISHED_GRADIENT: f64 = 1e-9;

/// One row of the metrics table.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    /// 1-based.
    pub epoch: usize,
    /// Optimizer iterations completed so far.
    pub iteration: usize,
    pub split: Split,
    /// Sum over batches of the per-batch mean cross-entropy.
    pub loss: f64,
    pub accuracy_pct: f64,
    /// Mean of the first-layer gradient at the last training iteration.
    pub first_layer_grad_avg: f64,
    pub collapsed: bool,
}

/// Per-iteration training trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub epoch: usize,
    pub iteration: usize,
    pub loss: f64,
    pub first_layer_grad_avg: f64,
}

/// Loss and accuracy of a model over a data set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy_pct: f64,
    pub batches: usize,
}

#[derive(Debug)]
pub struct TrainingOutcome {
    pub records: Vec<MetricsRecord>,
    pub iterations: Vec<IterationRecord>,
    pub collapsed: bool,
    pub model: Model<f32>,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

impl TrainingOutcome {
    pub fn final_test(&self) -> &MetricsRecord {
        self.records
            .iter()
            .rev()
            .find(|r| r.split == Split::Test)
            .expect("at least one epoch")
    }
}

/// Index of the largest value; ties and NaN resolve toward the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn count_correct(log_probs: &Tensor<f32>, labels: &[usize]) -> usize {
    let data = log_probs.data();
    let k = log_probs.shape()[1];
    data.chunks(k).zip(labels).filter(|(row, y)| argmax(row) == **y).count()
}

/// Percentage of rows whose argmax equals the label.
pub fn accuracy_pct<T: Scalar>(scores: &[T], classes: usize, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let correct = scores
        .chunks(classes)
        .zip(labels)
        .filter(|(row, y)| argmax(row) == **y)
        .count();
    100.0 * correct as f64 / labels.len() as f64
}

/// Runs the model over `set` in batches of `batch_size` without tracking
/// gradients. `mode` selects batch or running normalization statistics.
pub fn evaluate(model: &mut Model<f32>, set: &LabeledImageSet, batch_size: usize, mode: Mode) -> Result<Evaluation> {
    let _guard = no_grad();
    let mut loss = 0.0;
    let mut correct = 0;
    let batches = make_batches(set.len(), batch_size, false, 0, 0)?;
    for b in &batches {
        let (x, y) = set.gather(&b.indices);
        let log_probs = model.forward(&x, mode)?;
        loss += log_probs.nll_loss(&y)?.item()? as f64;
        correct += count_correct(&log_probs, &y);
    }
    let accuracy_pct = if set.is_empty() {
        0.0
    } else {
        100.0 * correct as f64 / set.len() as f64
    };
    Ok(Evaluation {
        loss,
        accuracy_pct,
        batches: batches.len(),
    })
}

/// Test accuracy with running normalization statistics.
pub fn evaluate_accuracy(model: &mut Model<f32>, set: &LabeledImageSet, batch_size: usize) -> Result<f64> {
    Ok(evaluate(model, set, batch_size, Mode::Eval)?.accuracy_pct)
}

/// Mean over every element of the first-layer parameter gradient.
pub fn first_layer_grad_average<T: Scalar>(model: &Model<T>) -> Result<f64> {
    let w = model.first_layer_weight();
    let grad = w
        .grad()
        .ok_or_else(|| Error::invalid("first_layer_grad_average", "no gradient has been computed"))?;
    Ok(grad.iter().map(|g| Scalar::to_f64(*g)).sum::<f64>() / grad.len() as f64)
}

fn is_pinned(records: &[MetricsRecord]) -> bool {
    let (lo, hi) = PINNED_ACCURACY;
    let tests: Vec<_> = records.iter().filter(|r| r.split == Split::Test).collect();
    !tests.is_empty()
        && tests.iter().all(|r| (lo..=hi).contains(&r.accuracy_pct))
        && tests
            .last()
            .is_some_and(|r| r.first_layer_grad_avg.abs() < VANISHED_GRADIENT)
}

/// Builds, initializes and trains the configured model on already loaded
/// data, writing `metrics.csv`, `iterations.csv`, `model.ckpt` and `run.cfg`
/// into `cfg.out_dir`. A non-finite loss or gradient marks the run collapsed;
/// training continues so every epoch is still reported.
pub fn train_on(cfg: &TrainConfig, train: &LabeledImageSet, test: &LabeledImageSet) -> Result<TrainingOutcome> {
    cfg.validate_settings()?;
    for set in [train, test] {
        if set.shape != cfg.model.input {
            return Err(Error::Config(format!(
                "samples are {:?} but the model expects {:?}",
                set.shape, cfg.model.input
            )));
        }
    }
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let train = match cfg.train_limit {
        Some(n) => train.truncated(n),
        None => train.clone(),
    };
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    write_file(&cfg.out_dir.join("run.cfg"), cfg.to_kv().as_bytes())?;

    let mut model = Model::<f32>::build(&cfg.model)?;
    init_params(
        &mut model,
        &InitConfig {
            std: cfg.init_std,
            dense_std: cfg.dense_init_std,
            seed: cfg.seed,
        },
    )?;
    let groups = partition_params(model.parameters(), cfg.optimizer);
    let mut adam = Adam::new();
    info!(
        "training {} ({} parameters) on {} samples for {} epochs",
        cfg.model,
        model.count_params().total,
        train.len(),
        cfg.epochs
    );

    let mut records = Vec::new();
    let mut iterations = Vec::new();
    let mut non_finite = false;
    let mut iteration = 0;
    let mut grad_avg = 0.0;
    for epoch in 1..=cfg.epochs {
        let batches = make_batches(train.len(), cfg.batch_size, cfg.shuffle, cfg.seed, epoch as u64)?;
        let mut epoch_loss = 0.0;
        let mut correct = 0;
        for b in &batches {
            model.zero_grad();
            let (x, y) = train.gather(&b.indices);
            let log_probs = model.forward(&x, Mode::Train)?;
            correct += count_correct(&log_probs, &y);
            let loss = log_probs.nll_loss(&y)?;
            drop(log_probs);
            let loss_value = loss.item()? as f64;
            epoch_loss += loss_value;
            iteration += 1;
            if loss_value.is_finite() {
                loss.backward()?;
                grad_avg = first_layer_grad_average(&model)?;
                match adam.step(&groups) {
                    Ok(()) => {}
                    Err(Error::NonFinite { what }) => {
                        if !non_finite {
                            warn!("epoch {epoch} iteration {iteration}: non-finite {what}; run collapsed");
                        }
                        non_finite = true;
                    }
                    Err(e) => return Err(e),
                }
            } else {
                if !non_finite {
                    warn!("epoch {epoch} iteration {iteration}: loss is {loss_value}; run collapsed");
                }
                non_finite = true;
                grad_avg = f64::NAN;
            }
            iterations.push(IterationRecord {
                epoch,
                iteration,
                loss: loss_value,
                first_layer_grad_avg: grad_avg,
            });
        }
        let test_eval = evaluate(&mut model, test, cfg.batch_size, Mode::Eval)?;
        let train_acc = 100.0 * correct as f64 / train.len() as f64;
        records.push(MetricsRecord {
            epoch,
            iteration,
            split: Split::Train,
            loss: epoch_loss,
            accuracy_pct: train_acc,
            first_layer_grad_avg: grad_avg,
            collapsed: non_finite,
        });
        records.push(MetricsRecord {
            epoch,
            iteration,
            split: Split::Test,
            loss: test_eval.loss,
            accuracy_pct: test_eval.accuracy_pct,
            first_layer_grad_avg: grad_avg,
            collapsed: non_finite,
        });
        if is_pinned(&records) {
            let n = records.len();
            records[n - 2].collapsed = true;
            records[n - 1].collapsed = true;
        }
        info!(
            "epoch {epoch}: train loss {epoch_loss:.6}, train acc {train_acc:.2}%, test acc {:.2}%, grad avg {grad_avg:.3e}",
            test_eval.accuracy_pct
        );
    }

    let collapsed = records.last().is_some_and(|r| r.collapsed);
    let metrics_path = cfg.out_dir.join("metrics.csv");
    write_metrics(&records, &metrics_path)?;
    write_iterations(&iterations, cfg.out_dir.join("iterations.csv"))?;
    let checkpoint_path = cfg.out_dir.join("model.ckpt");
    save_checkpoint(&mut model, &checkpoint_path)?;
    Ok(TrainingOutcome {
        records,
        iterations,
        collapsed,
        model,
        metrics_path,
        checkpoint_path,
    })
}

/// Loads the configured dataset and runs [`train_on`].
pub fn run_training(cfg: &TrainConfig) -> Result<TrainingOutcome> {
    cfg.validate()?;
    let train = cfg.dataset.load(&cfg.data_dir, Split::Train)?;
    let test = cfg.dataset.load(&cfg.data_dir, Split::Test)?;
    train_on(cfg, &train, &test)
}

/// Fixed-point text with lowercase non-finite spellings.
pub fn fmt_metric(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        format!("{v:.6}")
    }
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in records {
        let split = match r.split {
            Split::Train => "train",
            Split::Test => "test",
        };
        let _ = writeln!(
            out,
            "{},{},{split},{},{},{},{}",
            r.epoch,
            r.iteration,
            fmt_metric(r.loss),
            fmt_metric(r.accuracy_pct),
            fmt_metric(r.first_layer_grad_avg),
            r.collapsed
        );
    }
    out
}

pub fn write_metrics(records: &[MetricsRecord], path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), metrics_csv(records).as_bytes())
}

/// Per-iteration values use scientific notation so small gradients survive.
pub fn write_iterations(records: &[IterationRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut out = format!("{ITERATIONS_HEADER}\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{:e}",
            r.epoch,
            r.iteration,
            fmt_metric(r.loss),
            r.first_layer_grad_avg
        );
    }
    write_file(path.as_ref(), out.as_bytes())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Dataset;
    use crate::models::ModelSpec;

    fn tiny_set(n: usize, seed: u8) -> LabeledImageSet {
        let pixels = (0..n * 16)
            .map(|i| ((i * 7 + seed as usize) % 13) as f32 / 12.0)
            .collect();
        let labels = (0..n).map(|i| ((i + seed as usize) % 10) as u8).collect();
        LabeledImageSet::new([1, 4, 4], pixels, labels).unwrap()
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        assert_eq!(argmax(&[1.0f32, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0f32; 10]), 0);
        assert_eq!(argmax(&[f32::NAN, 1.0]), 0);
        assert_eq!(accuracy_pct(&[0.0f32; 20], 10, &[0, 1]), 50.0);
    }

    #[test]
    fn metrics_formatting() {
        assert_eq!(metrics_csv(&[]), format!("{METRICS_HEADER}\n"));
        let r = MetricsRecord {
            epoch: 1,
            iteration: 15,
            split: Split::Train,
            loss: 34.539,
            accuracy_pct: 10.0,
            first_layer_grad_avg: f64::NAN,
            collapsed: true,
        };
        assert_eq!(
            metrics_csv(&[r]).lines().nth(1).unwrap(),
            "1,15,train,34.539000,10.000000,nan,true"
        );
    }

    #[test]
    fn grad_average_needs_a_gradient() {
        let m = Model::<f32>::build(&ModelSpec::attention([1, 4, 4], 1, 1, false)).unwrap();
        assert!(first_layer_grad_average(&m).is_err());
        m.first_layer_weight().accumulate_grad(&[0.0; 16]);
        assert_eq!(first_layer_grad_average(&m).unwrap(), 0.0);
    }

    #[test]
    fn zero_model_loss_is_batches_times_ln10() {
        let mut m = Model::<f32>::build(&ModelSpec::attention([1, 4, 4], 1, 2, false)).unwrap();
        let set = tiny_set(25, 0);
        let e = evaluate(&mut m, &set, 10, Mode::Train).unwrap();
        assert_eq!(e.batches, 3);
        assert!((e.loss - 3.0 * 10f64.ln()).abs() < 1e-5);
        assert_eq!(e.accuracy_pct, 12.0);
    }

    #[test]
    fn tiny_training_run_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ModelSpec::attention([1, 4, 4], 1, 2, true);
        let mut cfg = TrainConfig::new(spec, Dataset::FashionMnist);
        cfg.epochs = 3;
        cfg.batch_size = 8;
        let (train, test) = (tiny_set(40, 1), tiny_set(20, 2));
        cfg.out_dir = dir.path().join("a");
        let a = train_on(&cfg, &train, &test).unwrap();
        cfg.out_dir = dir.path().join("b");
        let b = train_on(&cfg, &train, &test).unwrap();
        assert_eq!(a.records.len(), 6);
        assert_eq!(fs::read(&a.metrics_path).unwrap(), fs::read(&b.metrics_path).unwrap());
        assert_eq!(
            fs::read(&a.checkpoint_path).unwrap(),
            fs::read(&b.checkpoint_path).unwrap()
        );
        assert!(a.records[4].loss < a.records[0].loss);
        assert_eq!(a.iterations.len(), 15);
    }
}

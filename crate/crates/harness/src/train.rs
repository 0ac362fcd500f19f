//! Cross-entropy training on the planted-patch task.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use graft::{Model, ParamStore, Real, Tape};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::{Precision, RunConfig};
use crate::dataset::{generate_dataset, Dataset};
use crate::error::{HarnessError, Result};
use crate::optim::Optimizer;

const SHUFFLE_STREAM: u64 = 3;
const EVAL_CHUNK: usize = 64;

/// One evaluation: mean loss and accuracy on the fixed training prefix,
/// accuracy on the whole test split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub rows: Vec<MetricRow>,
    pub checkpoint: Checkpoint,
}

impl TrainOutcome {
    pub fn initial(&self) -> &MetricRow {
        self.rows.first().expect("a run records at least step 0")
    }

    pub fn last(&self) -> &MetricRow {
        self.rows.last().expect("a run records at least step 0")
    }
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("step,loss,train_acc,test_acc\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.step, r.loss, r.train_acc, r.test_acc);
    }
    out
}

fn evaluate<T: Real>(model: &Model, store: &ParamStore<T>, data: &Dataset, n: usize) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut hits = 0;
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let tape = Tape::new();
        let p = store.bind(&tape);
        let (images, labels) = data.batch::<T>(chunk);
        let logits = model.forward(&p, tape.constant(images))?;
        loss += logits.cross_entropy(&labels)?.value().item()?.as_f64() * chunk.len() as f64;
        let value = logits.value();
        let k = value.shape()[1];
        for (row, &label) in value.data().chunks(k).zip(&labels) {
            let pred = row.iter().enumerate().fold(0, |best, (j, v)| if *v > row[best] { j } else { best });
            hits += usize::from(pred == label);
        }
    }
    Ok((loss / n as f64, hits as f64 / n as f64))
}

fn run<T: Real>(cfg: &RunConfig) -> Result<TrainOutcome> {
    let (model, mut store) = Model::init::<T>(&cfg.spec, cfg.seed)?;
    let (train, test) = generate_dataset(&cfg.task, cfg.spec.image_size, cfg.spec.in_channels, cfg.seed)?;
    let mut opt = Optimizer::new(&cfg.optim, &store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let batch = cfg.optim.batch;

    let eval = |store: &ParamStore<T>, step: usize| -> Result<MetricRow> {
        let (loss, train_acc) = evaluate(&model, store, &train, cfg.task.eval_size)?;
        let (_, test_acc) = evaluate(&model, store, &test, test.len())?;
        if !loss.is_finite() {
            return Err(HarnessError::Diverged { step, loss });
        }
        Ok(MetricRow { step, loss, train_acc, test_acc })
    };
    let mut rows = vec![eval(&store, 0)?];
    for step in 1..=cfg.optim.steps {
        if cursor + batch > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let (images, labels) = train.batch::<T>(&order[cursor..cursor + batch]);
        cursor += batch;
        let grads = {
            let tape = Tape::new();
            let p = store.bind(&tape);
            let loss = model.forward(&p, tape.constant(images))?.cross_entropy(&labels)?;
            let value = loss.value().item()?.as_f64();
            if !value.is_finite() {
                return Err(HarnessError::Diverged { step, loss: value });
            }
            p.grads(&loss.backward()?)
        };
        opt.step(&mut store, &grads);
        if step % cfg.optim.eval_every == 0 || step == cfg.optim.steps {
            rows.push(eval(&store, step)?);
        }
    }
    Ok(TrainOutcome { rows, checkpoint: Checkpoint::from_store(&cfg.spec, &store) })
}

/// Trains at the configured precision without touching the filesystem.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    match cfg.precision {
        Precision::Verify64 => run::<f64>(cfg),
        Precision::Train32 => run::<f32>(cfg),
    }
}

/// Writes `metrics.csv` and `checkpoint.bin` under `dir`.
pub fn write_outcome(dir: &Path, outcome: &TrainOutcome) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let metrics = dir.join("metrics.csv");
    std::fs::write(&metrics, metrics_csv(&outcome.rows)).map_err(|e| HarnessError::io(&metrics, e))?;
    let ckpt = dir.join("checkpoint.bin");
    outcome.checkpoint.save(&ckpt)?;
    Ok(vec![metrics, ckpt])
}

/// The configured run next to the same run with every graft removed.
#[derive(Clone, Debug)]
pub struct Paired {
    pub grafted: TrainOutcome,
    pub plain: TrainOutcome,
}

pub fn train_paired(cfg: &RunConfig) -> Result<Paired> {
    Ok(Paired { grafted: train(cfg)?, plain: train(&cfg.plain())? })
}

impl Paired {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,plain_loss,grafted_loss,plain_train_acc,grafted_train_acc,plain_test_acc,grafted_test_acc\n");
        for (p, g) in self.plain.rows.iter().zip(&self.grafted.rows) {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                p.step, p.loss, g.loss, p.train_acc, g.train_acc, p.test_acc, g.test_acc
            );
        }
        out
    }

    /// Grafted minus plain final test accuracy.
    pub fn test_gap(&self) -> f64 {
        self.grafted.last().test_acc - self.plain.last().test_acc
    }

    /// Writes each run into its own subdirectory plus `paired.csv`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let mut files = write_outcome(&dir.join("grafted"), &self.grafted)?;
        files.extend(write_outcome(&dir.join("plain"), &self.plain)?);
        let paired = dir.join("paired.csv");
        std::fs::write(&paired, self.to_csv()).map_err(|e| HarnessError::io(&paired, e))?;
        files.push(paired);
        Ok(files)
    }
}

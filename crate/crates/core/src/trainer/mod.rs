//! Optimization loop, metrics, and checkpointing.

mod adam;
mod checkpoint;
mod metrics;

pub use adam::Adam;
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointMeta, MAGIC,
};
pub use metrics::{evaluate, Confusion, Metrics};

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{loss_and_grads, ModelConfig, Parameters};
use crate::seed;
use crate::task::{Dataset, TaskConfig};

/// Environment variable naming the default checkpoint directory.
pub const CHECKPOINT_DIR_ENV: &str = "REFBACK_CHECKPOINT_DIR";

/// Number of evenly spaced checkpoints when `checkpoint_every` is 0.
pub const DEFAULT_CHECKPOINTS: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Steps between checkpoints; 0 spreads [`DEFAULT_CHECKPOINTS`] evenly.
    pub checkpoint_every: usize,
    /// Data-order seed; derived from the run seed when absent.
    pub shuffle_seed: Option<u64>,
    /// Return the checkpoint with the best dev accuracy instead of the
    /// last step. Ties go to the later checkpoint.
    #[serde(default)]
    pub keep_best_dev: bool,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 64,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            checkpoint_every: 0,
            shuffle_seed: None,
            keep_best_dev: false,
        }
    }
}

impl Hyperparameters {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "epochs and batch_size must be >= 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

pub const PROFILE_D_MODEL: usize = 32;
pub const PROFILE_INIT_STD: f32 = 0.1;
pub const PROFILE_BATCH_SIZE: usize = 16;

/// Training budgets: the full regime and a desk-scale one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Full,
    Desk,
}

impl Profile {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Profile::Full),
            "desk" => Ok(Profile::Desk),
            _ => Err(Error::InvalidConfig(format!("unknown profile `{s}`"))),
        }
    }

    pub fn train_size(self) -> usize {
        match self {
            Profile::Full => 100_000,
            Profile::Desk => 20_000,
        }
    }

    /// Tuned settings. The shorter desk budget needs the larger step.
    pub fn hyperparameters(self) -> Hyperparameters {
        let (epochs, learning_rate) = match self {
            Profile::Full => (60, 1e-3),
            Profile::Desk => (30, 3e-3),
        };
        Hyperparameters {
            epochs,
            batch_size: PROFILE_BATCH_SIZE,
            learning_rate,
            keep_best_dev: true,
            ..Hyperparameters::default()
        }
    }

    pub fn model_config(self, task: &TaskConfig) -> ModelConfig {
        ModelConfig {
            init_std: PROFILE_INIT_STD,
            ..ModelConfig::new(PROFILE_D_MODEL, task.vocabulary().len(), task.sequence_len())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub step: usize,
    /// Mean training loss over the steps since the previous record.
    pub train_loss: f64,
    pub dev_accuracy: f64,
    pub checkpoint_path: Option<String>,
    #[serde(default)]
    pub subtasks: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
    /// Record whose parameters were returned, when not the last step.
    #[serde(default)]
    pub selected: Option<usize>,
}

impl TrainLog {
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.train_loss).collect()
    }
}

/// Snapshot handed to a [`TrainObserver`] at each checkpoint.
pub struct CheckpointEvent<'a> {
    pub params: &'a Parameters,
    pub epoch: usize,
    pub step: usize,
    pub index: usize,
}

/// Hook run at every checkpoint; may annotate the log record.
pub trait TrainObserver {
    fn on_checkpoint(&mut self, event: &CheckpointEvent<'_>, record: &mut LogRecord)
        -> Result<()>;
}

/// Observer that does nothing.
pub struct NoObserver;

impl TrainObserver for NoObserver {
    fn on_checkpoint(&mut self, _: &CheckpointEvent<'_>, _: &mut LogRecord) -> Result<()> {
        Ok(())
    }
}

/// Writes a checkpoint file per log record.
pub struct CheckpointWriter {
    pub dir: PathBuf,
    pub seed: u64,
    pub extra: serde_json::Value,
}

impl TrainObserver for CheckpointWriter {
    fn on_checkpoint(&mut self, ev: &CheckpointEvent<'_>, record: &mut LogRecord) -> Result<()> {
        let path = self.dir.join(format!("step_{:07}.rbgt", ev.step));
        let meta = CheckpointMeta {
            model_config: ev.params.config.clone(),
            seed: self.seed,
            epoch: ev.epoch,
            step: ev.step,
            extra: self.extra.clone(),
        };
        save_checkpoint(ev.params, &meta, &path)?;
        record.checkpoint_path = Some(path.display().to_string());
        Ok(())
    }
}

impl<A: TrainObserver, B: TrainObserver> TrainObserver for (A, B) {
    fn on_checkpoint(&mut self, ev: &CheckpointEvent<'_>, record: &mut LogRecord) -> Result<()> {
        self.0.on_checkpoint(ev, record)?;
        self.1.on_checkpoint(ev, record)
    }
}

/// Steps (1-based, after the update) at which checkpoints are taken.
pub fn checkpoint_steps(total_steps: usize, every: usize) -> Vec<usize> {
    if total_steps == 0 {
        return Vec::new();
    }
    let mut steps: Vec<usize> = if every == 0 {
        (1..=DEFAULT_CHECKPOINTS)
            .map(|k| ((k * total_steps) as f64 / DEFAULT_CHECKPOINTS as f64).round() as usize)
            .filter(|&s| s >= 1)
            .collect()
    } else {
        (1..=total_steps / every).map(|k| k * every).collect()
    };
    steps.push(total_steps);
    steps.dedup();
    steps
}

/// Trains with Adam on answer-position cross-entropy. Deterministic given
/// the initial parameters, data, hyperparameters, and seed.
pub fn train(
    mut params: Parameters,
    train_set: &Dataset,
    dev_set: &Dataset,
    hyper: &Hyperparameters,
    seed: u64,
    observer: &mut dyn TrainObserver,
) -> Result<(Parameters, TrainLog)> {
    hyper.validate()?;
    if train_set.is_empty() || dev_set.is_empty() {
        return Err(Error::Empty("training or dev set".into()));
    }
    let shuffle_seed = hyper
        .shuffle_seed
        .unwrap_or_else(|| seed::derive(seed, "train/shuffle", 0));
    let n = train_set.len();
    let steps_per_epoch = n.div_ceil(hyper.batch_size);
    let total_steps = steps_per_epoch * hyper.epochs;
    let schedule = checkpoint_steps(total_steps, hyper.checkpoint_every);
    let mut next_ckpt = schedule.iter().copied().peekable();

    let mut opt = Adam::new(
        &params,
        hyper.learning_rate,
        hyper.beta1,
        hyper.beta2,
        hyper.eps,
    );
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0usize;
    let mut window = (0.0f64, 0usize);
    let mut batch: Vec<&[u32]> = Vec::with_capacity(hyper.batch_size);
    let mut best: Option<(f64, usize, Parameters)> = None;
    for epoch in 0..hyper.epochs {
        order.sort_unstable();
        order.shuffle(&mut seed::derived_rng(shuffle_seed, "train/epoch", epoch as u64));
        let mut epoch_loss = 0.0f64;
        for chunk in order.chunks(hyper.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| train_set.sequences[i].tokens.as_slice()));
            let (loss, grads) = loss_and_grads(&params, &batch)?;
            step += 1;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::Diverged { step, loss });
            }
            opt.update(&mut params, &grads);
            epoch_loss += loss as f64;
            window.0 += loss as f64;
            window.1 += 1;
            if next_ckpt.peek() == Some(&step) {
                next_ckpt.next();
                let dev = evaluate(&params, &dev_set.sequences)?;
                let mut record = LogRecord {
                    epoch,
                    step,
                    train_loss: window.0 / window.1 as f64,
                    dev_accuracy: dev.accuracy,
                    checkpoint_path: None,
                    subtasks: BTreeMap::new(),
                };
                window = (0.0, 0);
                let event = CheckpointEvent {
                    params: &params,
                    epoch,
                    step,
                    index: log.records.len(),
                };
                observer.on_checkpoint(&event, &mut record)?;
                if hyper.keep_best_dev && best.as_ref().is_none_or(|b| dev.accuracy >= b.0) {
                    best = Some((dev.accuracy, log.records.len(), params.clone()));
                }
                log.records.push(record);
            }
        }
        log.epoch_losses.push(epoch_loss / steps_per_epoch as f64);
    }
    match best {
        Some((_, index, kept)) if index + 1 < log.records.len() => {
            log.selected = Some(index);
            Ok((kept, log))
        }
        _ => Ok((params, log)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_schedule() {
        assert_eq!(checkpoint_steps(10, 3), vec![3, 6, 9, 10]);
        assert_eq!(checkpoint_steps(10, 5), vec![5, 10]);
        let auto = checkpoint_steps(1000, 0);
        assert_eq!(auto.len(), 20);
        assert_eq!(*auto.last().unwrap(), 1000);
        assert!(auto.windows(2).all(|w| w[0] < w[1]));
        let short = checkpoint_steps(7, 0);
        assert!(short.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(*short.last().unwrap(), 7);
    }

    struct Snapshots(Vec<Parameters>);

    impl TrainObserver for Snapshots {
        fn on_checkpoint(&mut self, ev: &CheckpointEvent<'_>, _: &mut LogRecord) -> Result<()> {
            self.0.push(ev.params.clone());
            Ok(())
        }
    }

    #[test]
    fn keep_best_dev_returns_the_best_checkpoint() {
        use crate::model::init_params;
        use crate::task::{generate_split, Split};
        let task = TaskConfig::default();
        let train_set = generate_split(&task, Split::Train, 64, 1).unwrap();
        let dev_set = generate_split(&task, Split::Dev, 16, 1).unwrap();
        let cfg = Profile::Desk.model_config(&task);
        let hyper = Hyperparameters {
            epochs: 4,
            batch_size: 8,
            learning_rate: 1e-2,
            checkpoint_every: 4,
            keep_best_dev: true,
            ..Hyperparameters::default()
        };
        let mut snaps = Snapshots(Vec::new());
        let (params, log) =
            train(init_params(&cfg, 5).unwrap(), &train_set, &dev_set, &hyper, 5, &mut snaps).unwrap();
        let best = log.records.iter().map(|r| r.dev_accuracy).fold(0.0, f64::max);
        let kept = log.selected.unwrap_or(log.records.len() - 1);
        assert_eq!(log.records[kept].dev_accuracy, best);
        assert!(log.records[kept + 1..].iter().all(|r| r.dev_accuracy < best));
        assert_eq!(params, snaps.0[kept]);
    }

    #[test]
    fn hyperparameter_validation() {
        assert!(Hyperparameters::default().validate().is_ok());
        let bad = Hyperparameters {
            batch_size: 0,
            ..Hyperparameters::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!(Profile::Desk.hyperparameters().epochs, 30);
        assert_eq!(Profile::Full.train_size(), 100_000);
    }
}

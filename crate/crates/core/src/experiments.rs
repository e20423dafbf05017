//! Multi-seed sweeps relating task accuracy to the gating subtasks.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{init_params, ModelConfig, Parameters};
use crate::patching::{probe_pairs, run_subtask, ProbeSet, Subtask};
use crate::seed;
use crate::task::{Dataset, TaskConfig};
use crate::trainer::{
    evaluate, train, CheckpointEvent, Hyperparameters, LogRecord, Metrics, Profile, TrainLog,
    TrainObserver,
};

/// Probe pairs per subtask evaluated at every checkpoint.
pub const DEFAULT_PROBE_PAIRS: usize = 200;

/// The two subtasks tracked over training.
pub const TRACKED: [Subtask; 2] = [Subtask::InputGate, Subtask::OutputGate];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub task: TaskConfig,
    pub model: ModelConfig,
    pub hyper: Hyperparameters,
    pub master_seed: u64,
    pub n_seeds: usize,
    /// Pairs per subtask; `None` uses every eligible test pair.
    pub probe_pairs: Option<usize>,
}

impl SweepConfig {
    /// Default task with a profile's model and training settings.
    pub fn for_profile(profile: Profile, master_seed: u64, n_seeds: usize) -> Self {
        let task = TaskConfig::default();
        Self {
            model: profile.model_config(&task),
            hyper: profile.hyperparameters(),
            task,
            master_seed,
            n_seeds,
            probe_pairs: Some(DEFAULT_PROBE_PAIRS),
        }
    }

    pub fn seed_for(&self, index: usize) -> u64 {
        seed::derive(self.master_seed, "sweep/seed", index as u64)
    }
}

/// Train, dev, and test sets shared by every seed.
#[derive(Clone, Copy)]
pub struct SweepData<'a> {
    pub train: &'a Dataset,
    pub dev: &'a Dataset,
    pub test: &'a Dataset,
}

/// The fixed probe sets, one per tracked subtask.
pub fn sweep_probes(cfg: &SweepConfig, test: &Dataset) -> Result<Vec<ProbeSet>> {
    let vocab = cfg.task.vocabulary();
    TRACKED
        .iter()
        .map(|&st| {
            let s = seed::derive(cfg.master_seed, "sweep/probe", st as u64);
            probe_pairs(&test.sequences, &vocab, st, cfg.probe_pairs, s)
        })
        .collect()
}

/// Records subtask accuracies into each log record.
pub struct SubtaskObserver<'a> {
    pub probes: &'a [ProbeSet],
}

impl TrainObserver for SubtaskObserver<'_> {
    fn on_checkpoint(&mut self, ev: &CheckpointEvent<'_>, record: &mut LogRecord) -> Result<()> {
        for probe in self.probes {
            let r = run_subtask(ev.params, probe)?;
            record
                .subtasks
                .insert(probe.subtask.name().to_string(), r.accuracy);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub step: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_accuracy: f64,
    pub input_gate: f64,
    pub output_gate: f64,
}

impl CheckpointRecord {
    pub fn subtask_mean(&self) -> f64 {
        (self.input_gate + self.output_gate) / 2.0
    }
}

/// Largest one-checkpoint loss drop, when it stands out.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    /// Index of the checkpoint reached by the drop.
    pub index: usize,
    pub drop: f64,
    pub median_drop: f64,
}

/// Descriptive only: flags the largest loss drop between consecutive
/// checkpoints if it exceeds three times the median absolute drop.
/// Needs at least ten checkpoints.
pub fn detect_transition_in(losses: &[f64]) -> Option<Transition> {
    if losses.len() < 10 {
        return None;
    }
    let drops: Vec<f64> = losses.windows(2).map(|w| w[0] - w[1]).collect();
    let mut abs: Vec<f64> = drops.iter().map(|d| d.abs()).collect();
    abs.sort_by(f64::total_cmp);
    let median = if abs.len() % 2 == 1 {
        abs[abs.len() / 2]
    } else {
        (abs[abs.len() / 2 - 1] + abs[abs.len() / 2]) / 2.0
    };
    let (i, &best) = drops
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))?;
    (best > 0.0 && best > 3.0 * median).then_some(Transition {
        index: i + 1,
        drop: best,
        median_drop: median,
    })
}

pub fn detect_transition(log: &TrainLog) -> Option<Transition> {
    detect_transition_in(&log.losses())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SeedStatus {
    Completed,
    Failed { message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub index: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub status: SeedStatus,
    pub test: Option<Metrics>,
    pub checkpoints: Vec<CheckpointRecord>,
    /// Checkpoint kept by best-dev selection; the last one otherwise.
    #[serde(default)]
    pub selected: Option<usize>,
    pub transition: Option<Transition>,
}

impl SeedRecord {
    pub fn test_accuracy(&self) -> Option<f64> {
        self.test.as_ref().map(|m| m.accuracy)
    }

    pub fn reached_perfect(&self) -> bool {
        self.test_accuracy() == Some(1.0)
    }

    /// Mean of the tracked subtask accuracies at the kept checkpoint.
    pub fn final_subtask_mean(&self) -> Option<f64> {
        match self.selected {
            Some(i) => self.checkpoints.get(i),
            None => self.checkpoints.last(),
        }
        .map(CheckpointRecord::subtask_mean)
    }
}

/// A trained seed: its record and final parameters.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub record: SeedRecord,
    pub params: Option<Parameters>,
}

/// Trains seed `index` and tracks the subtasks on `probes`.
pub fn run_seed(
    cfg: &SweepConfig,
    data: SweepData<'_>,
    probes: &[ProbeSet],
    index: usize,
) -> Result<SeedRun> {
    let seed = cfg.seed_for(index);
    let init = init_params(&cfg.model, seed)?;
    let mut observer = SubtaskObserver { probes };
    let outcome = train(init, data.train, data.dev, &cfg.hyper, seed, &mut observer);
    let (params, log) = match outcome {
        Ok(x) => x,
        Err(e @ Error::Diverged { .. }) => {
            return Ok(SeedRun {
                record: SeedRecord {
                    index,
                    seed,
                    status: SeedStatus::Failed {
                        message: e.to_string(),
                    },
                    test: None,
                    checkpoints: Vec::new(),
                    selected: None,
                    transition: None,
                },
                params: None,
            })
        }
        Err(e) => return Err(e),
    };
    let test = evaluate(&params, &data.test.sequences)?;
    let get = |r: &LogRecord, st: Subtask| r.subtasks.get(st.name()).copied().unwrap_or(0.0);
    let checkpoints = log
        .records
        .iter()
        .map(|r| CheckpointRecord {
            step: r.step,
            epoch: r.epoch,
            train_loss: r.train_loss,
            dev_accuracy: r.dev_accuracy,
            input_gate: get(r, Subtask::InputGate),
            output_gate: get(r, Subtask::OutputGate),
        })
        .collect();
    Ok(SeedRun {
        record: SeedRecord {
            index,
            seed,
            status: SeedStatus::Completed,
            test: Some(test),
            checkpoints,
            selected: log.selected,
            transition: detect_transition(&log),
        },
        params: Some(params),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub completed: usize,
    pub perfect: usize,
    pub mean_accuracy: f64,
    /// Sample standard deviation of final test accuracy.
    pub sd_accuracy: f64,
    pub min_accuracy: f64,
    pub max_accuracy: f64,
    /// Spearman correlation of final test accuracy with the final mean
    /// subtask accuracy; absent when either has no spread.
    pub spearman: Option<f64>,
}

impl Aggregate {
    pub fn from_seeds(seeds: &[SeedRecord]) -> Self {
        let done: Vec<&SeedRecord> = seeds.iter().filter(|s| s.test.is_some()).collect();
        let acc: Vec<f64> = done.iter().filter_map(|s| s.test_accuracy()).collect();
        let sub: Vec<f64> = done.iter().map(|s| s.final_subtask_mean().unwrap_or(0.0)).collect();
        let (mean, sd) = mean_sd(&acc);
        Aggregate {
            completed: done.len(),
            perfect: done.iter().filter(|s| s.reached_perfect()).count(),
            mean_accuracy: mean,
            sd_accuracy: sd,
            min_accuracy: acc.iter().copied().fold(f64::INFINITY, f64::min),
            max_accuracy: acc.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            spearman: spearman(&acc, &sub),
        }
    }
}

pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Ranks with ties sharing their mean rank.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        idx[i..=j].iter().for_each(|&k| r[k] = rank);
        i = j + 1;
    }
    r
}

/// Spearman's rank correlation (Pearson on tie-averaged ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let (mx, _) = mean_sd(&rx);
    let (my, _) = mean_sd(&ry);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub config: SweepConfig,
    pub seeds: Vec<SeedRecord>,
    pub aggregate: Aggregate,
}

impl SweepResult {
    pub fn from_seeds(config: SweepConfig, mut seeds: Vec<SeedRecord>) -> Self {
        seeds.sort_by_key(|s| s.index);
        let aggregate = Aggregate::from_seeds(&seeds);
        Self {
            config,
            seeds,
            aggregate,
        }
    }
}

/// Trains `cfg.n_seeds` models from independent initializations. A seed
/// that diverges is recorded as failed without stopping the others.
pub fn run_sweep(cfg: &SweepConfig, data: SweepData<'_>) -> Result<SweepResult> {
    let seeds = run_sweep_seeds(cfg, data)?
        .into_iter()
        .map(|r| r.record)
        .collect();
    Ok(SweepResult::from_seeds(cfg.clone(), seeds))
}

/// Like [`run_sweep`] but keeps each seed's trained parameters.
pub fn run_sweep_seeds(cfg: &SweepConfig, data: SweepData<'_>) -> Result<Vec<SeedRun>> {
    if cfg.n_seeds == 0 {
        return Err(Error::InvalidConfig("n_seeds must be >= 1".into()));
    }
    let probes = sweep_probes(cfg, data.test)?;
    (0..cfg.n_seeds)
        .into_par_iter()
        .map(|k| run_seed(cfg, data, &probes, k))
        .collect()
}

pub const CSV_HEADER: &str = "step,epoch,train_loss,dev_accuracy,input_gate,output_gate,test_accuracy";

/// Per-checkpoint curve; the final row also carries the test accuracy.
pub fn seed_csv(seed: &SeedRecord) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    let last = seed.checkpoints.len().saturating_sub(1);
    for (i, c) in seed.checkpoints.iter().enumerate() {
        let test = match seed.test_accuracy() {
            Some(a) if i == last => a.to_string(),
            _ => String::new(),
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            c.step, c.epoch, c.train_loss, c.dev_accuracy, c.input_gate, c.output_gate, test
        );
    }
    out
}

const PERFECT_COLOR: &str = "#6a3d9a";
const OTHER_COLOR: &str = "#e08214";

/// Loss (solid, scaled by the sweep's largest loss) and subtask accuracy
/// (dashed) against step, one panel per tracked subtask.
pub fn fig4_svg(result: &SweepResult) -> String {
    let (w, h, pad) = (420.0f64, 260.0f64, 40.0f64);
    let max_step = result
        .seeds
        .iter()
        .flat_map(|s| s.checkpoints.iter().map(|c| c.step))
        .max()
        .unwrap_or(1)
        .max(1) as f64;
    let max_loss = result
        .seeds
        .iter()
        .flat_map(|s| s.checkpoints.iter().map(|c| c.train_loss))
        .fold(f64::MIN_POSITIVE, f64::max);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" font-family="sans-serif" font-size="11">"#,
        2.0 * w,
        h + 30.0
    );
    for (p, st) in TRACKED.iter().enumerate() {
        let ox = p as f64 * w;
        let x = |step: usize| ox + pad + (w - 2.0 * pad) * step as f64 / max_step;
        let y = |v: f64| h - pad + -(h - 2.0 * pad) * v.clamp(0.0, 1.0);
        let _ = writeln!(
            svg,
            r##"<text x="{}" y="20">{}</text><rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="#999"/>"##,
            ox + pad,
            st.name(),
            ox + pad,
            pad,
            w - 2.0 * pad,
            h - 2.0 * pad
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}">step</text><text x="{}" y="{}">1</text><text x="{}" y="{}">0</text>"#,
            ox + w / 2.0,
            h - 8.0,
            ox + pad - 12.0,
            pad + 4.0,
            ox + pad - 12.0,
            h - pad + 4.0
        );
        for s in &result.seeds {
            if s.checkpoints.is_empty() {
                continue;
            }
            let color = if s.reached_perfect() {
                PERFECT_COLOR
            } else {
                OTHER_COLOR
            };
            let pts = |f: &dyn Fn(&CheckpointRecord) -> f64| {
                s.checkpoints
                    .iter()
                    .map(|c| format!("{:.1},{:.1}", x(c.step), y(f(c))))
                    .collect::<Vec<_>>()
                    .join(" ")
            };
            let loss = pts(&|c| c.train_loss / max_loss);
            let acc = pts(&|c| match st {
                Subtask::InputGate => c.input_gate,
                _ => c.output_gate,
            });
            let _ = writeln!(
                svg,
                r#"<polyline points="{loss}" fill="none" stroke="{color}" stroke-width="1.2"><title>seed {} loss</title></polyline>"#,
                s.index
            );
            let _ = writeln!(
                svg,
                r#"<polyline points="{acc}" fill="none" stroke="{color}" stroke-width="1.2" stroke-dasharray="4 3"><title>seed {} {}</title></polyline>"#,
                s.index,
                st.name()
            );
        }
    }
    let _ = writeln!(
        svg,
        r#"<text x="{pad}" y="{}" fill="{PERFECT_COLOR}">100% test accuracy</text><text x="{}" y="{}" fill="{OTHER_COLOR}">below 100%</text><text x="{}" y="{}">solid: loss / max loss, dashed: subtask accuracy</text>"#,
        h + 20.0,
        pad + 140.0,
        h + 20.0,
        pad + 260.0,
        h + 20.0
    );
    svg.push_str("</svg>\n");
    svg
}

/// Writes `sweep.json`, `seed_<k>.csv` per seed, and `fig4.svg`.
pub fn emit_report(result: &SweepResult, dir: &Path) -> Result<Vec<PathBuf>> {
    if result.seeds.is_empty() {
        return Err(Error::Empty("sweep has no seeds".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut put = |name: String, body: String| -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        written.push(path);
        Ok(())
    };
    put("sweep.json".into(), serde_json::to_string_pretty(result)?)?;
    for s in &result.seeds {
        put(format!("seed_{}.csv", s.index), seed_csv(s))?;
    }
    put("fig4.svg".into(), fig4_svg(result))?;
    Ok(written)
}

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{detokenize, generate_sequence, Answer, Sequence, TaskConfig, Vocabulary};
use crate::error::{Error, Result};
use crate::seed;

pub const GENERATOR_VERSION: &str = concat!("refback-gen/", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidInput(format!("unknown split `{s}`"))),
        }
    }

    fn purpose(self) -> &'static str {
        match self {
            Split::Train => "data/train",
            Split::Dev => "data/dev",
            Split::Test => "data/test",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.jsonl", self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

impl SplitSizes {
    pub const PAPER: SplitSizes = SplitSizes {
        train: 100_000,
        dev: 1_000,
        test: 1_000,
    };

    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Dev => self.dev,
            Split::Test => self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub task_config: TaskConfig,
    pub master_seed: u64,
    pub generator_version: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub sequences: Vec<Sequence>,
    /// Per-sequence generation seeds.
    pub seeds: Vec<u64>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Keeps the first `n` sequences.
    pub fn truncated(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            split: self.split,
            sequences: self.sequences[..n].to_vec(),
            seeds: self.seeds[..n].to_vec(),
            provenance: self.provenance.clone(),
        }
    }
}

/// One JSON-lines record. `answer_positions`, `labels`, and `is_init_mask`
/// cover every tuple (initialization tuples included) and are aligned.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub split: String,
    pub index: usize,
    pub tokens: Vec<u32>,
    pub token_strs: Vec<String>,
    pub answer_positions: Vec<usize>,
    pub labels: Vec<u8>,
    pub is_init_mask: Vec<bool>,
    pub seed: u64,
}

impl DatasetRecord {
    fn new(split: Split, index: usize, seq: &Sequence, seed: u64, vocab: &Vocabulary) -> Self {
        Self {
            split: split.name().to_string(),
            index,
            tokens: seq.tokens.clone(),
            token_strs: seq
                .tokens
                .iter()
                .map(|&id| vocab.token(id).expect("generated ids").to_string())
                .collect(),
            answer_positions: (0..seq.tuples.len()).map(super::answer_position).collect(),
            labels: seq.tuples.iter().map(|t| t.answer.label()).collect(),
            is_init_mask: seq.tuples.iter().map(|t| t.is_init).collect(),
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub generator_version: String,
    pub task_config: TaskConfig,
    pub master_seed: u64,
    pub sizes: SplitSizes,
    pub vocabulary: Vec<String>,
}

/// Generates one split in memory.
pub fn generate_split(
    config: &TaskConfig,
    split: Split,
    count: usize,
    master_seed: u64,
) -> Result<Dataset> {
    config.validate()?;
    let seeds: Vec<u64> = (0..count as u64)
        .map(|i| seed::derive(master_seed, split.purpose(), i))
        .collect();
    let sequences = seeds
        .par_iter()
        .map(|&s| generate_sequence(config, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        split,
        sequences,
        seeds,
        provenance: Provenance {
            task_config: config.clone(),
            master_seed,
            generator_version: GENERATOR_VERSION.to_string(),
        },
    })
}

/// Generates train/dev/test and writes them plus `manifest.json` into `dir`.
pub fn generate_dataset(
    config: &TaskConfig,
    sizes: SplitSizes,
    master_seed: u64,
    dir: &Path,
) -> Result<[Dataset; 3]> {
    if Split::ALL.iter().any(|&s| sizes.get(s) == 0) {
        return Err(Error::InvalidConfig("split sizes must be positive".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let [train, dev, test] =
        Split::ALL.map(|split| generate_split(config, split, sizes.get(split), master_seed));
    let sets = [train?, dev?, test?];
    for set in &sets {
        write_dataset(set, &dir.join(set.split.file_name()))?;
    }
    let manifest = Manifest {
        generator_version: GENERATOR_VERSION.to_string(),
        task_config: config.clone(),
        master_seed,
        sizes,
        vocabulary: config.vocabulary().table(),
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(sets)
}

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let vocab = dataset.provenance.task_config.vocabulary();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for (i, (seq, &seed)) in dataset.sequences.iter().zip(&dataset.seeds).enumerate() {
        let record = DatasetRecord::new(dataset.split, i, seq, seed, &vocab);
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Reads a split back; labels and init flags are checked against the tokens.
pub fn read_dataset(path: &Path, manifest: &Manifest) -> Result<Dataset> {
    let vocab = manifest.task_config.vocabulary();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut sequences = Vec::new();
    let mut seeds = Vec::new();
    let mut split = None;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DatasetRecord = serde_json::from_str(&line)?;
        let this = Split::parse(&record.split)?;
        if *split.get_or_insert(this) != this {
            return Err(Error::InvalidInput(format!(
                "{}: mixed splits in one file",
                path.display()
            )));
        }
        let seq = detokenize(&record.tokens, &vocab)?;
        let labels: Vec<u8> = seq.tuples.iter().map(|t| t.answer.label()).collect();
        let init: Vec<bool> = seq.tuples.iter().map(|t| t.is_init).collect();
        if labels != record.labels || init != record.is_init_mask {
            return Err(Error::InvalidInput(format!(
                "{}: record {} labels disagree with tokens",
                path.display(),
                record.index
            )));
        }
        sequences.push(seq);
        seeds.push(record.seed);
    }
    Ok(Dataset {
        split: split.ok_or_else(|| Error::Empty(path.display().to_string()))?,
        sequences,
        seeds,
        provenance: Provenance {
            task_config: manifest.task_config.clone(),
            master_seed: manifest.master_seed,
            generator_version: manifest.generator_version.clone(),
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassBalance {
    pub same_fraction: f64,
    pub different_fraction: f64,
    /// `[same, different]` counts per scored tuple slot.
    pub per_position: Vec<[usize; 2]>,
}

/// Label balance over scored answers only.
pub fn class_balance(sequences: &[Sequence]) -> Result<ClassBalance> {
    let mut per_position: Vec<[usize; 2]> = Vec::new();
    let mut same = 0usize;
    let mut total = 0usize;
    for seq in sequences {
        for (slot, label) in seq.labels.iter().enumerate() {
            if per_position.len() <= slot {
                per_position.resize(slot + 1, [0, 0]);
            }
            match label {
                Answer::Same => {
                    per_position[slot][0] += 1;
                    same += 1;
                }
                Answer::Different => per_position[slot][1] += 1,
            }
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Empty("no scored answers".into()));
    }
    let same_fraction = same as f64 / total as f64;
    Ok(ClassBalance {
        same_fraction,
        different_fraction: (total - same) as f64 / total as f64,
        per_position,
    })
}

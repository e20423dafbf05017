use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use refback::experiments::{emit_report, run_sweep, SweepData};
use refback::heuristics::{calibrate_num_symbols, evaluate_heuristic, Heuristic};
use refback::model::{forward, init_params, ActivationKind, Parameters};
use refback::patching::{
    build_minimal_pair, probe_pairs, run_activation_patch_full, run_path_patch_full, run_subtask,
    subtask_patch_run, summarize_attention, ComponentRef, CorruptionKind, HeadSelector,
    PositionSet, Subtask,
};
use refback::task::{
    class_balance, detokenize, generate_dataset, predicting_position, read_dataset,
    read_manifest, symbol_position, Manifest, Split,
};
use refback::trainer::{
    evaluate, load_checkpoint, save_checkpoint, train, CheckpointMeta, CheckpointWriter,
    CHECKPOINT_DIR_ENV,
};
use refback::viz::{write_heatmaps, write_patch_heatmaps};
use refback::{Dataset, Error, Sequence};
use serde_json::{json, Value};

use crate::config::{read_config_file, render_config, RunConfig};
use crate::{Cli, Command};

#[derive(Args, Debug)]
pub struct PatchArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// One of input_gate, role_address, output_gate. Omit to run a custom
    /// patch described by the flags below.
    #[arg(long)]
    pub subtask: Option<String>,
    /// Corruption kind for a custom patch, e.g. store_to_ignore.
    #[arg(long)]
    pub corruption: Option<String>,
    /// query, key, value, or head_output.
    #[arg(long, default_value = "key")]
    pub component: String,
    #[arg(long, default_value_t = 1)]
    pub layer: usize,
    /// `all` or a head index.
    #[arg(long, default_value = "all")]
    pub heads: String,
    /// corrupted (the edited tuple's symbol), stored, predicting, all, or
    /// a comma-separated list of positions.
    #[arg(long, default_value = "corrupted")]
    pub positions: String,
    /// `path` (from both layer-0 heads) or `activation`.
    #[arg(long, default_value = "path")]
    pub mode: String,
    /// Cap on pairs per list; 0 keeps all.
    #[arg(long, default_value_t = 0)]
    pub limit: usize,
    /// Write clean/patched heatmaps of the first flipping pair here.
    #[arg(long)]
    pub heatmaps: Option<PathBuf>,
    /// Keep per-pair records in the report.
    #[arg(long)]
    pub records: bool,
}

#[derive(Args, Debug)]
pub struct VizArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Whitespace-separated tokens instead of a dataset sequence.
    #[arg(long)]
    pub tokens: Option<String>,
    /// Also render the clean and patched run of this subtask.
    #[arg(long)]
    pub subtask: Option<String>,
    /// Target tuple for `--subtask`.
    #[arg(long)]
    pub target: Option<usize>,
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_all(&read_config_file(path)?)?;
    }
    let mut pairs: Vec<(String, String)> = Vec::new();
    let c = &cli.common;
    let mut push = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            pairs.push((k.to_string(), v));
        }
    };
    push("seed", cli.seed.map(|s| s.to_string()));
    push("profile", c.profile.clone());
    push("data_dir", c.data.as_ref().map(|p| p.display().to_string()));
    push("out_dir", c.out.as_ref().map(|p| p.display().to_string()));
    push("epochs", c.epochs.map(|x| x.to_string()));
    push("d_model", c.d_model.map(|x| x.to_string()));
    push("learning_rate", c.learning_rate.map(|x| x.to_string()));
    push("batch_size", c.batch_size.map(|x| x.to_string()));
    push("num_symbols", c.num_symbols.map(|x| x.to_string()));
    push("n_seeds", c.n_seeds.map(|x| x.to_string()));
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    cfg.apply_all(&pairs)?;
    cfg.validate()?;
    Ok(cfg)
}

fn print_json(v: &Value) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v)?;
    writeln!(out)?;
    Ok(())
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, body).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn write_run_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    write_file(&dir.join("run_config.json"), &serde_json::to_string_pretty(cfg)?)?;
    write_file(&dir.join("run.conf"), &render_config(cfg))
}

/// Reads the manifest and one split; the run's task settings are taken
/// from the manifest.
fn load_split(cfg: &mut RunConfig, split: Split) -> Result<(Manifest, Dataset)> {
    let manifest = read_manifest(&cfg.data_dir.join("manifest.json"))?;
    cfg.task = manifest.task_config.clone();
    let data = read_dataset(&cfg.data_dir.join(split.file_name()), &manifest)?;
    Ok((manifest, data))
}

fn load_model(path: &Path) -> Result<(Parameters, CheckpointMeta)> {
    Ok(load_checkpoint(path)?)
}

pub fn dispatch(cli: Cli) -> Result<()> {
    let mut cfg = resolve_config(&cli)?;
    match cli.command {
        Command::Gen => gen(&cfg),
        Command::Train => train_cmd(&mut cfg),
        Command::Eval { checkpoint, split } => eval_cmd(&mut cfg, &checkpoint, &split),
        Command::Heuristics {
            split,
            calibrate,
            calibration_sequences,
        } => heuristics_cmd(&mut cfg, &split, calibrate, calibration_sequences),
        Command::Patch(args) => patch_cmd(&mut cfg, &args),
        Command::Sweep => sweep_cmd(&mut cfg),
        Command::Viz(args) => viz_cmd(&mut cfg, &args),
    }
}

fn gen(cfg: &RunConfig) -> Result<()> {
    let sets = generate_dataset(&cfg.task, cfg.sizes, cfg.seed, &cfg.data_dir)?;
    write_run_config(cfg, &cfg.data_dir)?;
    let balance = class_balance(&sets[0].sequences)?;
    print_json(&json!({
        "run_config": cfg.to_json(),
        "data_dir": cfg.data_dir,
        "sizes": cfg.sizes,
        "train_same_fraction": balance.same_fraction,
    }))
}

fn train_cmd(cfg: &mut RunConfig) -> Result<()> {
    let (_, train_set) = load_split(cfg, Split::Train)?;
    let (_, dev) = load_split(cfg, Split::Dev)?;
    let (_, test) = load_split(cfg, Split::Test)?;
    let train_set = train_set.truncated(cfg.sizes.train);
    let out = cfg.out_dir.clone();
    let ckpt_dir = std::env::var_os(CHECKPOINT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| out.join("checkpoints"));
    fs::create_dir_all(&ckpt_dir).with_context(|| format!("creating {}", ckpt_dir.display()))?;
    write_run_config(cfg, &out)?;
    let params = init_params(&cfg.model(), cfg.seed)?;
    let mut writer = CheckpointWriter {
        dir: ckpt_dir,
        seed: cfg.seed,
        extra: cfg.to_json(),
    };
    let (params, log) = train(params, &train_set, &dev, &cfg.hyper, cfg.seed, &mut writer)?;
    log.write_jsonl(&out.join("train_log.jsonl"))?;
    let kept = match log.selected {
        Some(i) => log.records.get(i),
        None => log.records.last(),
    };
    let meta = CheckpointMeta {
        model_config: params.config.clone(),
        seed: cfg.seed,
        epoch: kept.map_or(0, |r| r.epoch),
        step: kept.map_or(0, |r| r.step),
        extra: cfg.to_json(),
    };
    save_checkpoint(&params, &meta, &out.join("final.rbgt"))?;
    let metrics = evaluate(&params, &test.sequences)?;
    let report = json!({
        "run_config": cfg.to_json(),
        "checkpoint": out.join("final.rbgt"),
        "test": metrics,
        "selected_step": kept.map(|r| r.step),
        "epoch_losses": log.epoch_losses,
    });
    write_file(&out.join("metrics.json"), &serde_json::to_string_pretty(&report)?)?;
    print_json(&report)
}

fn eval_cmd(cfg: &mut RunConfig, checkpoint: &Path, split: &str) -> Result<()> {
    let split = Split::parse(split)?;
    let (params, meta) = load_model(checkpoint)?;
    let (_, data) = load_split(cfg, split)?;
    let metrics = evaluate(&params, &data.sequences)?;
    print_json(&json!({
        "run_config": cfg.to_json(),
        "checkpoint": checkpoint,
        "checkpoint_meta": { "seed": meta.seed, "epoch": meta.epoch, "step": meta.step },
        "split": split.name(),
        "metrics": metrics,
    }))
}

fn heuristics_cmd(cfg: &mut RunConfig, split: &str, calibrate: bool, n: usize) -> Result<()> {
    let split = Split::parse(split)?;
    let (_, data) = load_split(cfg, split)?;
    let mut results = serde_json::Map::new();
    for h in [
        Heuristic::MaxClass,
        Heuristic::StoreMatch { causal: true },
        Heuristic::StoreMatch { causal: false },
        Heuristic::Oracle,
    ] {
        let r = evaluate_heuristic(&data.sequences, h)?;
        results.insert(r.heuristic, serde_json::to_value(r.metrics)?);
    }
    let calibration = if calibrate {
        let reports = [true, false]
            .into_iter()
            .map(|causal| calibrate_num_symbols(&cfg.task, 3..=10, n, cfg.seed, causal))
            .collect::<refback::Result<Vec<_>>>()?;
        Some(reports)
    } else {
        None
    };
    print_json(&json!({
        "run_config": cfg.to_json(),
        "split": split.name(),
        "heuristics": results,
        "calibration": calibration,
    }))
}

fn parse_kind(s: &str) -> Result<ActivationKind> {
    Ok(match s {
        "query" => ActivationKind::Query,
        "key" => ActivationKind::Key,
        "value" => ActivationKind::Value,
        "head_output" => ActivationKind::HeadOutput,
        _ => return Err(Error::InvalidConfig(format!("unknown component `{s}`")).into()),
    })
}

fn parse_heads(s: &str) -> Result<HeadSelector> {
    if s == "all" {
        return Ok(HeadSelector::All);
    }
    let h = s
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("bad head selector `{s}`")))?;
    Ok(HeadSelector::One(h))
}

fn positions_for(policy: &str, pair: &refback::patching::MinimalPair) -> Result<PositionSet> {
    Ok(match policy {
        "all" => PositionSet::All,
        "corrupted" => PositionSet::Only(vec![symbol_position(pair.corruption.tuple)]),
        "stored" => PositionSet::Only(vec![symbol_position(pair.stored)]),
        "predicting" => PositionSet::Only(vec![predicting_position(pair.target)]),
        list => PositionSet::Only(
            list.split(',')
                .map(|p| {
                    p.trim()
                        .parse()
                        .map_err(|_| Error::InvalidConfig(format!("bad position policy `{list}`")))
                })
                .collect::<Result<_, _>>()?,
        ),
    })
}

fn patch_cmd(cfg: &mut RunConfig, args: &PatchArgs) -> Result<()> {
    let split = Split::parse(&args.split)?;
    let (params, _) = load_model(&args.checkpoint)?;
    let (_, data) = load_split(cfg, split)?;
    let vocab = cfg.task.vocabulary();
    let limit = (args.limit > 0).then_some(args.limit);
    let attention = summarize_attention(&params, &data.sequences)?;

    if let Some(name) = &args.subtask {
        let st = Subtask::parse(name)?;
        let probe = probe_pairs(&data.sequences, &vocab, st, limit, cfg.seed)?;
        let mut report = run_subtask(&params, &probe)?;
        if let (Some(dir), Some(pair)) = (&args.heatmaps, probe.flipping.first()) {
            let run = subtask_patch_run(&params, st, pair)?;
            write_patch_heatmaps(&run, &vocab, dir, st.name())?;
        }
        if !args.records {
            report.records.clear();
        }
        return print_json(&json!({
            "run_config": cfg.to_json(),
            "checkpoint": args.checkpoint,
            "split": split.name(),
            "attention": attention,
            "report": report,
        }));
    }

    let kind = CorruptionKind::parse(args.corruption.as_deref().ok_or_else(|| {
        Error::InvalidConfig("patch needs --subtask or --corruption".into())
    })?)?;
    let component = parse_kind(&args.component)?;
    let heads = parse_heads(&args.heads)?;
    let path_mode = match args.mode.as_str() {
        "path" => true,
        "activation" => false,
        m => return Err(Error::InvalidConfig(format!("unknown mode `{m}`")).into()),
    };
    let mut records = Vec::new();
    let mut heatmap_done = false;
    'outer: for (si, seq) in data.sequences.iter().enumerate() {
        for target in seq.scored_indices() {
            if limit.is_some_and(|n| records.len() >= n) {
                break 'outer;
            }
            let pair = match build_minimal_pair(seq, &vocab, kind, target, None) {
                Ok(p) => p,
                Err(Error::InapplicableCorruption(_) | Error::NoStoredTuple { .. }) => continue,
                Err(e) => return Err(e.into()),
            };
            let comp = ComponentRef::new(
                args.layer,
                heads.clone(),
                component,
                positions_for(&args.positions, &pair)?,
            );
            let run = if path_mode {
                run_path_patch_full(&params, &pair, &ComponentRef::layer_outputs(0), &comp)?
            } else {
                run_activation_patch_full(&params, &pair, &[comp])?
            };
            if let (Some(dir), false) = (&args.heatmaps, heatmap_done) {
                if pair.flips() {
                    write_patch_heatmaps(&run, &vocab, dir, "custom")?;
                    heatmap_done = true;
                }
            }
            let r = &run.result;
            records.push(json!({
                "sequence": si,
                "target": target,
                "corrupted_tuple": pair.corruption.tuple,
                "flip_eligible": pair.flips(),
                "clean_label": r.clean_label.label(),
                "corrupted_label": r.corrupted_label.label(),
                "patched_prediction": r.patched_prediction.label(),
                "patched_logit_diff": r.patched_logit_diff,
                "flipped": r.flipped,
                "attention_tv": r.attention_tv(),
            }));
        }
    }
    let eligible: Vec<&Value> = records.iter().filter(|r| r["flip_eligible"] == true).collect();
    let frac = |xs: &[&Value], f: &dyn Fn(&Value) -> bool| {
        if xs.is_empty() {
            0.0
        } else {
            xs.iter().filter(|r| f(r)).count() as f64 / xs.len() as f64
        }
    };
    let all: Vec<&Value> = records.iter().collect();
    let report = json!({
        "run_config": cfg.to_json(),
        "checkpoint": args.checkpoint,
        "split": split.name(),
        "corruption": kind,
        "mode": args.mode,
        "pairs": records.len(),
        "flip_eligible": eligible.len(),
        "flip_rate": frac(&eligible, &|r| r["flipped"] == true),
        "all_pairs_accuracy": frac(&all, &|r| r["patched_prediction"] == r["corrupted_label"]),
        "attention": attention,
        "records": if args.records { Value::from(records.clone()) } else { Value::Null },
    });
    print_json(&report)
}

fn sweep_cmd(cfg: &mut RunConfig) -> Result<()> {
    let (_, train_set) = load_split(cfg, Split::Train)?;
    let (_, dev) = load_split(cfg, Split::Dev)?;
    let (_, test) = load_split(cfg, Split::Test)?;
    let train_set = train_set.truncated(cfg.sizes.train);
    let data = SweepData {
        train: &train_set,
        dev: &dev,
        test: &test,
    };
    let result = run_sweep(&cfg.sweep(), data)?;
    let files = emit_report(&result, &cfg.out_dir)?;
    write_run_config(cfg, &cfg.out_dir)?;
    print_json(&json!({
        "run_config": cfg.to_json(),
        "aggregate": result.aggregate,
        "files": files,
    }))
}

fn viz_cmd(cfg: &mut RunConfig, args: &VizArgs) -> Result<()> {
    let (params, _) = load_model(&args.checkpoint)?;
    let vocab = refback::Vocabulary::new(params.config.vocab_size.saturating_sub(6));
    let out = cfg.out_dir.clone();
    let (tokens, seq): (Vec<u32>, Option<Sequence>) = match &args.tokens {
        Some(text) => {
            let ids = text
                .split_whitespace()
                .map(|t| vocab.parse(t).and_then(|tok| vocab.id(tok)))
                .collect::<refback::Result<Vec<_>>>()?;
            let seq = detokenize(&ids, &vocab).ok();
            (ids, seq)
        }
        None => {
            let split = Split::parse(&args.split)?;
            let (_, data) = load_split(cfg, split)?;
            let seq = data.sequences.get(args.index).cloned().ok_or_else(|| {
                Error::InvalidInput(format!("sequence {} not in {}", args.index, split.name()))
            })?;
            (seq.tokens.clone(), Some(seq))
        }
    };
    let cache = forward(&params, &tokens)?;
    let mut files = write_heatmaps(&cache, &vocab, &out, "attention")?;
    if let Some(name) = &args.subtask {
        let st = Subtask::parse(name)?;
        let seq = seq.ok_or_else(|| Error::InvalidInput("tokens do not form a task sequence".into()))?;
        let target = args
            .target
            .ok_or_else(|| Error::InvalidConfig("--subtask needs --target".into()))?;
        let pair = build_minimal_pair(&seq, &vocab, st.corruption(), target, None)?;
        let run = subtask_patch_run(&params, st, &pair)?;
        files.extend(write_patch_heatmaps(&run, &vocab, &out, st.name())?);
    }
    write_run_config(cfg, &out)?;
    print_json(&json!({ "run_config": cfg.to_json(), "files": files }))
}

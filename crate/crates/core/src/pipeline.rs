//! Command implementations behind the CLI: dataset generation, the two
//! training stages, evaluation, latent export and the ablation harness.
//! Every command writes its effective config next to its outputs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use think3d_autograd::{AdamW, ParamStore};

use crate::checkpoint::{load_checkpoint, read_manifest, require_component, Checkpoint};
use crate::config::{config_hash, RunConfig, Split};
use crate::error::{Error, Result};
use crate::eval::{run_benchmark, EvalReport};
use crate::export::{extract_and_project, serialize_dump, LatentDump};
use crate::model::Models;
use crate::rl::{train_rl, RewardWeights, RlState};
use crate::sft::{train_sft, RunOutput, TrainState};
use crate::task::dataset::read_dataset_with_manifest;
use crate::task::{dataset_manifest, generate_dataset, label_balance, write_dataset, TrainingExample};
use crate::trajectory::LatentPosition;

/// Reads a split from `paths.data`, or generates it when no data directory
/// is configured. A file produced by a different generator config is
/// rejected.
pub fn load_split(cfg: &RunConfig, split: Split) -> Result<Vec<TrainingExample>> {
    let dcfg = cfg.dataset(split);
    let Some(dir) = &cfg.paths.data else {
        return generate_dataset(&dcfg);
    };
    let path = dir.join(split.file_name());
    let (manifest, data) = read_dataset_with_manifest(&path)?;
    let expected = config_hash(&dcfg);
    match manifest {
        Some(m) if m.config_hash == expected => Ok(data),
        Some(m) => Err(Error::ConfigHashMismatch {
            expected,
            found: m.config_hash,
        }),
        None => Err(Error::Format {
            path,
            reason: "dataset has no manifest line".into(),
        }),
    }
}

/// Per-kind record counts and correct-label histograms.
pub fn balance_audit(examples: &[TrainingExample]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<20} {:>6} {:>6} {:>6} {:>6} {:>6}", "kind", "n", "A", "B", "C", "D");
    for (kind, counts) in label_balance(examples) {
        let n = examples.iter().filter(|e| e.question.kind == kind).count();
        if kind.is_multiple_choice() {
            let _ = writeln!(
                s,
                "{:<20} {:>6} {:>6} {:>6} {:>6} {:>6}",
                kind.name(),
                n,
                counts[0],
                counts[1],
                counts[2],
                counts[3]
            );
        } else {
            let _ = writeln!(s, "{:<20} {:>6} {:>6} {:>6} {:>6} {:>6}", kind.name(), n, "-", "-", "-", "-");
        }
    }
    s
}

/// Writes `train.jsonl` and `test.jsonl` under `out`; returns the printed
/// summary (record counts and balance audit).
pub fn cmd_datagen(cfg: &RunConfig, out: &Path) -> Result<String> {
    cfg.write_effective(out)?;
    let mut summary = String::new();
    for split in [Split::Train, Split::Test] {
        let dcfg = cfg.dataset(split);
        let data = generate_dataset(&dcfg)?;
        let path = out.join(split.file_name());
        write_dataset(&data, &dataset_manifest(&dcfg, data.len()), &path)?;
        let _ = writeln!(summary, "{}: {} records -> {}", split.file_name(), data.len(), path.display());
        summary.push_str(&balance_audit(&data));
    }
    Ok(summary)
}

/// Outcome of a training command.
#[derive(Debug, Clone)]
pub struct StageResult {
    pub run_dir: PathBuf,
    pub latest: PathBuf,
    pub best: PathBuf,
    pub step: u64,
    pub config_hash: String,
}

fn run_output(cfg: &RunConfig, out: &Path) -> RunOutput {
    RunOutput {
        dir: out.to_path_buf(),
        config_hash: cfg.hash(),
        model_hash: cfg.model_hash(),
    }
}

/// Loads `latest/` of a run for resuming; the config must be unchanged.
fn resume_from(cfg: &RunConfig, out: &Path) -> Result<Checkpoint> {
    let dir = run_output(cfg, out).retention().latest();
    let manifest = read_manifest(&dir)?;
    if manifest.config_hash != cfg.hash() {
        return Err(Error::ConfigHashMismatch {
            expected: cfg.hash(),
            found: manifest.config_hash,
        });
    }
    load_checkpoint(&dir)
}

/// Loads a checkpoint built for the configured architecture.
pub fn load_models(cfg: &RunConfig, dir: &Path) -> Result<(Models, Checkpoint)> {
    let ckpt = load_checkpoint(dir)?;
    if ckpt.manifest.model_hash != cfg.model_hash() {
        return Err(Error::ConfigHashMismatch {
            expected: cfg.model_hash(),
            found: ckpt.manifest.model_hash.clone(),
        });
    }
    let models = Models::bind(cfg.model.clone(), cfg.projector.clone(), &ckpt.params)?;
    Ok((models, ckpt))
}

fn input_checkpoint(cfg: &RunConfig) -> Result<&Path> {
    cfg.paths
        .checkpoint
        .as_deref()
        .ok_or_else(|| Error::Config("paths.checkpoint is required for this command".into()))
}

fn stage_result(cfg: &RunConfig, out: &Path, step: u64) -> StageResult {
    let r = run_output(cfg, out).retention();
    StageResult {
        run_dir: out.to_path_buf(),
        latest: r.latest(),
        best: r.best(),
        step,
        config_hash: cfg.hash(),
    }
}

/// Stage 1 on the training split, checkpointing under `out/checkpoints`.
pub fn cmd_train_sft(cfg: &RunConfig, out: &Path, resume: bool) -> Result<StageResult> {
    let train = load_split(cfg, Split::Train)?;
    let (models, mut state) = if resume {
        let ckpt = resume_from(cfg, out)?;
        let models = Models::bind(cfg.model.clone(), cfg.projector.clone(), &ckpt.params)?;
        let optimizer = ckpt
            .optimizer
            .ok_or_else(|| Error::Config("resume checkpoint has no optimizer state".into()))?;
        let step = ckpt.manifest.step;
        (models, TrainState { params: ckpt.params, optimizer, step })
    } else {
        let (models, params) = Models::init(cfg.model.clone(), cfg.projector.clone())?;
        let optimizer = AdamW::new(&params, cfg.sft.weight_decay);
        (models, TrainState { params, optimizer, step: 0 })
    };
    cfg.write_effective(out)?;
    train_sft(&models, &mut state, &train, &cfg.sft, Some(&run_output(cfg, out)))?;
    Ok(stage_result(cfg, out, state.step))
}

/// Stage 2 starting from the stage-1 checkpoint in `paths.checkpoint`,
/// which also serves as the frozen reference policy.
pub fn cmd_train_rl(cfg: &RunConfig, out: &Path, resume: bool) -> Result<StageResult> {
    let source = input_checkpoint(cfg)?;
    let manifest = read_manifest(source)?;
    require_component(source, &manifest, "proj")?;
    let (models, stage1) = load_models(cfg, source)?;
    let train = load_split(cfg, Split::Train)?;
    let mut state = if resume {
        let ckpt = resume_from(cfg, out)?;
        let optimizer = ckpt
            .optimizer
            .ok_or_else(|| Error::Config("resume checkpoint has no optimizer state".into()))?;
        RlState {
            params: ckpt.params,
            reference: stage1.params,
            optimizer,
            step: ckpt.manifest.step,
        }
    } else {
        RlState {
            optimizer: AdamW::new(&stage1.params, cfg.rl.weight_decay),
            params: stage1.params.clone(),
            reference: stage1.params,
            step: 0,
        }
    };
    cfg.write_effective(out)?;
    train_rl(&models, &mut state, &train, &cfg.grammar(), &cfg.rl, Some(&run_output(cfg, out)))?;
    Ok(stage_result(cfg, out, state.step))
}

/// Scores `paths.checkpoint` (or a freshly initialised model when unset) on
/// the test split; writes `eval_report.json` and `eval_report.txt`.
pub fn cmd_eval(cfg: &RunConfig, out: &Path) -> Result<EvalReport> {
    let (models, params) = match &cfg.paths.checkpoint {
        Some(dir) => {
            let (m, c) = load_models(cfg, dir)?;
            (m, c.params)
        }
        None => {
            log::info!("no checkpoint configured; scoring the untrained model");
            Models::init(cfg.model.clone(), cfg.projector.clone())?
        }
    };
    cfg.write_effective(out)?;
    let test = load_split(cfg, Split::Test)?;
    let mut report = run_benchmark(&models, &params, &test, &cfg.grammar(), &cfg.eval)?;
    report.config_hash = cfg.hash();
    write_report(out, "eval_report", &report, &report.to_table())?;
    Ok(report)
}

fn write_report<T: Serialize>(out: &Path, stem: &str, value: &T, table: &str) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let json = out.join(format!("{stem}.json"));
    fs::write(&json, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(&json, e))?;
    let txt = out.join(format!("{stem}.txt"));
    fs::write(&txt, table).map_err(|e| Error::io(&txt, e))
}

/// Dumps the first `export.count` examples of `export.split` to
/// `out/latents/<id>.dump`.
pub fn cmd_export(cfg: &RunConfig, out: &Path) -> Result<Vec<LatentDump>> {
    let source = input_checkpoint(cfg)?;
    let manifest = read_manifest(source)?;
    require_component(source, &manifest, "proj")?;
    let (models, ckpt) = load_models(cfg, source)?;
    cfg.write_effective(out)?;
    let split = if cfg.export.split == "train" { Split::Train } else { Split::Test };
    let data = load_split(cfg, split)?;
    let dir = out.join("latents");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut dumps = Vec::new();
    for ex in data.iter().take(cfg.export.count) {
        let mut dump = extract_and_project(&models, &ckpt.params, ex, &cfg.grammar(), &cfg.eval.sampling, cfg.eval.seed)?;
        dump.config_hash = cfg.hash();
        if dump.no_latent_block {
            log::warn!("example {}: no latent block emitted", ex.id);
        }
        serialize_dump(&dump, &dir.join(format!("{:06}.dump", ex.id)))?;
        dumps.push(dump);
    }
    Ok(dumps)
}

/// Stage 1 from a fresh initialisation, in memory.
pub fn run_sft(cfg: &RunConfig, train: &[TrainingExample]) -> Result<(Models, ParamStore)> {
    let (models, params) = Models::init(cfg.model.clone(), cfg.projector.clone())?;
    let mut state = TrainState {
        optimizer: AdamW::new(&params, cfg.sft.weight_decay),
        params,
        step: 0,
    };
    train_sft(&models, &mut state, train, &cfg.sft, None)?;
    Ok((models, state.params))
}

/// Stage 2 from stage-1 parameters, in memory.
pub fn run_rl(cfg: &RunConfig, models: &Models, stage1: &ParamStore, train: &[TrainingExample]) -> Result<ParamStore> {
    let mut state = RlState {
        params: stage1.clone(),
        reference: stage1.clone(),
        optimizer: AdamW::new(stage1, cfg.rl.weight_decay),
        step: 0,
    };
    train_rl(models, &mut state, train, &cfg.grammar(), &cfg.rl, None)?;
    Ok(state.params)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    LatentSize,
    TokenPosition,
    RewardRemoval,
}

impl AblationAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "latent-size" => Ok(Self::LatentSize),
            "token-position" => Ok(Self::TokenPosition),
            "reward-removal" => Ok(Self::RewardRemoval),
            other => Err(Error::UnknownAxis(other.to_string())),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::LatentSize => "latent-size",
            Self::TokenPosition => "token-position",
            Self::RewardRemoval => "reward-removal",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub seeds: Vec<u64>,
    /// Per-seed average of the per-kind metrics.
    pub average: Vec<f64>,
    pub degenerate_rate: Vec<f64>,
    pub format_compliance: Vec<f64>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

impl AblationRow {
    pub fn mean_average(&self) -> f64 {
        mean(&self.average)
    }

    pub fn mean_degenerate_rate(&self) -> f64 {
        mean(&self.degenerate_rate)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub axis: String,
    pub config_hash: String,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "axis: {}", self.axis);
        let _ = writeln!(s, "{:<16} {:>8} {:>10} {:>8}  per-seed Avg.", "row", "Avg.", "degenerate", "format");
        for r in &self.rows {
            let per: Vec<String> = r.average.iter().map(|v| format!("{v:.4}")).collect();
            let _ = writeln!(
                s,
                "{:<16} {:>8.4} {:>10.4} {:>8.4}  [{}]",
                r.label,
                r.mean_average(),
                r.mean_degenerate_rate(),
                mean(&r.format_compliance),
                per.join(", ")
            );
        }
        s
    }
}

/// One row's variant of the base config.
struct Variant {
    label: String,
    apply: Box<dyn Fn(&mut RunConfig)>,
}

fn variants(cfg: &RunConfig, axis: AblationAxis) -> Vec<Variant> {
    match axis {
        AblationAxis::LatentSize => cfg
            .ablation
            .latent_sizes
            .iter()
            .map(|&k| Variant {
                label: format!("k={k}"),
                apply: Box::new(move |c: &mut RunConfig| c.latent_size = k),
            })
            .collect(),
        AblationAxis::TokenPosition => LatentPosition::ALL
            .iter()
            .map(|&p| Variant {
                label: p.name().to_string(),
                apply: Box::new(move |c: &mut RunConfig| c.position = p),
            })
            .collect(),
        AblationAxis::RewardRemoval => {
            let drop = |label: &str, f: fn(&mut RewardWeights)| Variant {
                label: label.to_string(),
                apply: Box::new(move |c: &mut RunConfig| f(&mut c.rl.rewards)),
            };
            vec![
                drop("full", |_| {}),
                drop("w/o r_format", |w| w.r_format = 0.0),
                drop("w/o r_ans", |w| w.r_ans = 0.0),
                drop("w/o r_3d", |w| w.r_3d = 0.0),
            ]
        }
    }
}

/// Runs every row of `axis` once per configured seed and writes
/// `ablation_<axis>.{json,txt}`. Rows of the reward axis share their
/// stage-1 run per seed.
pub fn cmd_ablate(cfg: &RunConfig, axis: &str, out: &Path) -> Result<AblationReport> {
    let axis = AblationAxis::parse(axis)?;
    cfg.write_effective(out)?;
    let rows = variants(cfg, axis);
    let seeds = cfg.ablation.seeds.clone();
    let with_rl = cfg.ablation.with_rl || axis == AblationAxis::RewardRemoval;
    let mut report_rows: Vec<AblationRow> = rows
        .iter()
        .map(|v| AblationRow {
            label: v.label.clone(),
            seeds: seeds.clone(),
            average: Vec::new(),
            degenerate_rate: Vec::new(),
            format_compliance: Vec::new(),
        })
        .collect();
    for &seed in &seeds {
        let mut shared: Option<(Models, ParamStore)> = None;
        for (v, row) in rows.iter().zip(report_rows.iter_mut()) {
            let mut c = cfg.clone();
            (v.apply)(&mut c);
            c.paths.data = None;
            let c = c.with_seed(seed)?;
            log::info!("ablation {} row {} seed {seed}", axis.name(), v.label);
            let train = generate_dataset(&c.dataset(Split::Train))?;
            let test = generate_dataset(&c.dataset(Split::Test))?;
            let (models, stage1) = match (&shared, axis) {
                (Some(s), AblationAxis::RewardRemoval) => s.clone(),
                _ => run_sft(&c, &train)?,
            };
            if axis == AblationAxis::RewardRemoval && shared.is_none() {
                shared = Some((models.clone(), stage1.clone()));
            }
            let params = if with_rl { run_rl(&c, &models, &stage1, &train)? } else { stage1 };
            let r = run_benchmark(&models, &params, &test, &c.grammar(), &c.eval)?;
            row.average.push(r.average);
            row.degenerate_rate.push(r.degenerate_rate);
            row.format_compliance.push(r.format_compliance);
        }
    }
    let report = AblationReport {
        axis: axis.name().to_string(),
        config_hash: cfg.hash(),
        rows: report_rows,
    };
    write_report(out, &format!("ablation_{}", axis.name()), &report, &report.to_table())?;
    Ok(report)
}

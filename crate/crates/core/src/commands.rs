//! Experiment commands: dataset generation, pretraining, finetuning,
//! structural ablations, routing traces and evaluation. The CLI binary is
//! a thin argument parser over these; tests drive them directly.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::config::{ConfigError, ExperimentConfig};
use crate::fuzzy::{gen_dataset, FuzzyError, FuzzyExpr, RegressionDataset};
use crate::model::{EvalOptions, Model, ModelError, ParamId};
use crate::trace::{trace_lines, write_trace, TraceLine};
use crate::train::{
    build_param_groups, evaluate, finetune, pretrain, write_metrics_csv, Regime, TrainConfig,
    TrainError,
};

pub const DATASET_MANIFEST_FILE: &str = "dataset.toml";
pub const RUN_MANIFEST_FILE: &str = "run.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FINAL: &str = "checkpoint_final";
pub const CHECKPOINT_BEST: &str = "checkpoint_best";

#[derive(Debug, Error)]
pub enum CmdError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Fuzzy(#[from] FuzzyError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{0} already exists (pass --overwrite to replace it)")]
    OutputExists(PathBuf),
    #[error("dataset manifest parse error: {0}")]
    ManifestParse(String),
    #[error("{0}")]
    DataMismatch(String),
}

impl CmdError {
    /// One-word machine-parsable error category for the process exit line.
    pub fn category(&self) -> &'static str {
        match self {
            CmdError::Io(_) => "io",
            CmdError::Config(_) => "config",
            CmdError::Fuzzy(_) | CmdError::ManifestParse(_) | CmdError::DataMismatch(_) => "data",
            CmdError::Model(_) => "model",
            CmdError::Train(_) => "train",
            CmdError::Checkpoint(_) => "checkpoint",
            CmdError::OutputExists(_) => "io",
        }
    }
}

// ── dataset generation ──────────────────────────────────────────────────

/// Everything needed to rebuild both regression datasets bit-identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub n_vars: usize,
    pub num_samples: usize,
    /// Truth tables as hex, pretraining tasks then adaptation tasks.
    pub pretrain_tables: Vec<String>,
    pub adapt_tables: Vec<String>,
    pub pretrain_data_seed: u64,
    pub adapt_data_seed: u64,
    pub config_hash: String,
}

impl DatasetManifest {
    pub fn pretrain_exprs(&self) -> Result<Vec<FuzzyExpr>, FuzzyError> {
        self.pretrain_tables
            .iter()
            .map(|h| FuzzyExpr::from_hex(self.n_vars, h))
            .collect()
    }

    pub fn adapt_exprs(&self) -> Result<Vec<FuzzyExpr>, FuzzyError> {
        self.adapt_tables
            .iter()
            .map(|h| FuzzyExpr::from_hex(self.n_vars, h))
            .collect()
    }

    pub fn build_pretrain(&self) -> Result<RegressionDataset, FuzzyError> {
        gen_dataset(&self.pretrain_exprs()?, self.num_samples, self.pretrain_data_seed)
    }

    pub fn build_adapt(&self) -> Result<RegressionDataset, FuzzyError> {
        gen_dataset(&self.adapt_exprs()?, self.num_samples, self.adapt_data_seed)
    }
}

pub fn load_dataset_manifest(dir: &Path) -> Result<DatasetManifest, CmdError> {
    let text = fs::read_to_string(dir.join(DATASET_MANIFEST_FILE))?;
    toml::from_str(&text).map_err(|e| CmdError::ManifestParse(e.to_string()))
}

/// Samples the task family and writes the dataset manifest (plus optional
/// CSV exports). Deterministic per seed.
pub fn cmd_gen(
    cfg: &ExperimentConfig,
    seed: u64,
    out_dir: &Path,
    csv: bool,
    overwrite: bool,
) -> Result<DatasetManifest, CmdError> {
    cfg.validate()?;
    let manifest_path = out_dir.join(DATASET_MANIFEST_FILE);
    if manifest_path.exists() && !overwrite {
        return Err(CmdError::OutputExists(manifest_path));
    }
    fs::create_dir_all(out_dir)?;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let sample = |rng: &mut rand_chacha::ChaCha8Rng, count: usize| -> Vec<String> {
        (0..count)
            .map(|_| FuzzyExpr::sample(cfg.task.n_vars, rng).to_hex())
            .collect()
    };
    let pretrain_tables = sample(&mut rng, cfg.task.n_pretrain_tasks);
    let adapt_tables = sample(&mut rng, cfg.task.n_adapt_tasks);
    let manifest = DatasetManifest {
        seed,
        n_vars: cfg.task.n_vars,
        num_samples: cfg.task.num_samples,
        pretrain_tables,
        adapt_tables,
        pretrain_data_seed: seed,
        adapt_data_seed: seed.wrapping_add(1),
        config_hash: cfg.hash(),
    };
    let text = toml::to_string_pretty(&manifest).map_err(|e| CmdError::ManifestParse(e.to_string()))?;
    fs::write(&manifest_path, text)?;
    if csv {
        let pre = manifest.build_pretrain()?;
        let mut f = fs::File::create(out_dir.join("pretrain.csv"))?;
        crate::fuzzy::write_csv(&pre, &mut f)?;
        let adapt = manifest.build_adapt()?;
        let mut f = fs::File::create(out_dir.join("adapt.csv"))?;
        crate::fuzzy::write_csv(&adapt, &mut f)?;
    }
    Ok(manifest)
}

// ── run manifests ───────────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    pub data_dir: String,
    pub final_val_loss: f64,
    pub final_val_mean_r2: f64,
    pub best_epoch: usize,
    pub wall_seconds: f64,
    pub config: ExperimentConfig,
}

fn write_run_manifest(out_dir: &Path, manifest: &RunManifest) -> Result<(), CmdError> {
    let text = toml::to_string_pretty(manifest).map_err(|e| CmdError::ManifestParse(e.to_string()))?;
    fs::write(out_dir.join(RUN_MANIFEST_FILE), text)?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub final_val_loss: f64,
    pub final_val_r2: Vec<f64>,
    pub best_epoch: usize,
    pub out_dir: PathBuf,
}

impl RunReport {
    pub fn mean_r2(&self) -> f64 {
        self.final_val_r2.iter().sum::<f64>() / self.final_val_r2.len() as f64
    }
}

fn check_task_counts(cfg: &ExperimentConfig, manifest: &DatasetManifest) -> Result<(), CmdError> {
    if manifest.n_vars != cfg.task.n_vars {
        return Err(CmdError::DataMismatch(format!(
            "dataset has {} variables, config expects {}",
            manifest.n_vars, cfg.task.n_vars
        )));
    }
    if manifest.pretrain_tables.len() != cfg.task.n_pretrain_tasks
        || manifest.adapt_tables.len() != cfg.task.n_adapt_tasks
    {
        return Err(CmdError::DataMismatch(format!(
            "dataset provides {}+{} tasks, config expects {}+{}",
            manifest.pretrain_tables.len(),
            manifest.adapt_tables.len(),
            cfg.task.n_pretrain_tasks,
            cfg.task.n_adapt_tasks
        )));
    }
    Ok(())
}

// ── pretraining ─────────────────────────────────────────────────────────

pub fn cmd_pretrain(
    cfg: &ExperimentConfig,
    data_dir: &Path,
    out_dir: &Path,
    seed: u64,
) -> Result<RunReport, CmdError> {
    cfg.validate()?;
    let started = std::time::Instant::now();
    let manifest = load_dataset_manifest(data_dir)?;
    check_task_counts(cfg, &manifest)?;
    let ds = manifest.build_pretrain()?;

    let mut model_cfg = cfg.model.clone();
    model_cfg.n_inputs = cfg.task.n_vars;
    model_cfg.n_cls = cfg.task.n_pretrain_tasks;
    let mut model = Model::new(model_cfg, seed)?;

    let train_cfg = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let state = pretrain(&mut model, &ds, &train_cfg)?;

    fs::create_dir_all(out_dir)?;
    checkpoint::save_train_state(&model, &state, &out_dir.join(CHECKPOINT_FINAL))?;
    if let Some(best) = &state.best_params {
        let mut best_model = model.clone();
        *best_model.params_mut() = best.clone();
        checkpoint::save_model(&best_model, &out_dir.join(CHECKPOINT_BEST))?;
    }
    let mut f = fs::File::create(out_dir.join(METRICS_FILE))?;
    write_metrics_csv(&state.metrics, ds.n_tasks(), &mut f)?;

    let last_val = state
        .metrics
        .iter()
        .rev()
        .find(|m| m.split == crate::train::Split::Val)
        .expect("validation runs every epoch");
    let report = RunReport {
        final_val_loss: last_val.loss,
        final_val_r2: last_val.r2_per_task.clone(),
        best_epoch: state.best_epoch,
        out_dir: out_dir.to_path_buf(),
    };
    write_run_manifest(
        out_dir,
        &RunManifest {
            command: "pretrain".into(),
            seed,
            config_hash: cfg.hash(),
            data_dir: data_dir.display().to_string(),
            final_val_loss: report.final_val_loss,
            final_val_mean_r2: report.mean_r2(),
            best_epoch: report.best_epoch,
            wall_seconds: started.elapsed().as_secs_f64(),
            config: cfg.clone(),
        },
    )?;
    Ok(report)
}

// ── finetuning ──────────────────────────────────────────────────────────

/// Loads the checkpoint, instantiates fresh CLS tokens for the adaptation
/// tasks (optionally adds functions) and trains the regime's groups.
pub fn cmd_finetune(
    cfg: &ExperimentConfig,
    checkpoint_dir: &Path,
    data_dir: &Path,
    out_dir: &Path,
    regime: Regime,
    seed: u64,
    added_functions: usize,
) -> Result<RunReport, CmdError> {
    cfg.validate()?;
    let started = std::time::Instant::now();
    let manifest = load_dataset_manifest(data_dir)?;
    let ds = manifest.build_adapt()?;
    let mut model = checkpoint::load_model(checkpoint_dir)?;
    if model.config.n_inputs != manifest.n_vars {
        return Err(CmdError::DataMismatch(format!(
            "checkpoint expects {} inputs, dataset provides {}",
            model.config.n_inputs, manifest.n_vars
        )));
    }
    model.replace_cls_tokens(ds.n_tasks(), seed)?;
    let extra: Vec<ParamId> = if added_functions > 0 {
        model.add_functions(added_functions, seed.wrapping_add(1))?
    } else {
        Vec::new()
    };
    let train_cfg = TrainConfig {
        epochs: cfg.finetune.epochs,
        batch_size: cfg.train.batch_size,
        optim: crate::train::OptimConfig {
            lr: cfg.finetune.lr,
            ..cfg.train.optim.clone()
        },
        seed,
        eval_batch: cfg.train.eval_batch,
    };
    let state = finetune(&mut model, &ds, regime, &extra, &train_cfg)?;

    fs::create_dir_all(out_dir)?;
    checkpoint::save_model(&model, &out_dir.join(CHECKPOINT_FINAL))?;
    let mut f = fs::File::create(out_dir.join(METRICS_FILE))?;
    write_metrics_csv(&state.metrics, ds.n_tasks(), &mut f)?;
    let last_val = state
        .metrics
        .iter()
        .rev()
        .find(|m| m.split == crate::train::Split::Val)
        .expect("validation runs every epoch");
    let report = RunReport {
        final_val_loss: last_val.loss,
        final_val_r2: last_val.r2_per_task.clone(),
        best_epoch: state.best_epoch,
        out_dir: out_dir.to_path_buf(),
    };
    write_run_manifest(
        out_dir,
        &RunManifest {
            command: format!("finetune:{regime:?}:k{added_functions}"),
            seed,
            config_hash: cfg.hash(),
            data_dir: data_dir.display().to_string(),
            final_val_loss: report.final_val_loss,
            final_val_mean_r2: report.mean_r2(),
            best_epoch: report.best_epoch,
            wall_seconds: started.elapsed().as_secs_f64(),
            config: cfg.clone(),
        },
    )?;
    Ok(report)
}

// ── evaluation ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Pretrain,
    Adapt,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub loss: f64,
    pub r2_per_task: Vec<f64>,
}

impl EvalReport {
    pub fn mean_r2(&self) -> f64 {
        self.r2_per_task.iter().sum::<f64>() / self.r2_per_task.len() as f64
    }
}

pub fn cmd_eval(
    checkpoint_dir: &Path,
    data_dir: &Path,
    kind: DatasetKind,
    n_iterations: Option<usize>,
) -> Result<EvalReport, CmdError> {
    let manifest = load_dataset_manifest(data_dir)?;
    let ds = match kind {
        DatasetKind::Pretrain => manifest.build_pretrain()?,
        DatasetKind::Adapt => manifest.build_adapt()?,
    };
    let model = checkpoint::load_model(checkpoint_dir)?;
    if model.config.n_cls != ds.n_tasks() {
        return Err(CmdError::DataMismatch(format!(
            "checkpoint has {} task heads, dataset provides {} tasks",
            model.config.n_cls,
            ds.n_tasks()
        )));
    }
    let opts = EvalOptions {
        n_iterations,
        ..Default::default()
    };
    let (loss, r2) = evaluate(&model, &ds, &ds.val_idx, &opts, 512)?;
    Ok(EvalReport {
        loss,
        r2_per_task: r2,
    })
}

// ── ablations ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationKind {
    Drop,
    Extend,
    Anytime,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub label: String,
    pub value: f64,
    pub seed: Option<u64>,
    pub mean_r2: f64,
    pub r2_per_task: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub kind: AblationKind,
    pub rows: Vec<AblationRow>,
}

fn write_ablation_csv(report: &AblationReport, path: &Path) -> Result<(), CmdError> {
    let n_tasks = report.rows.first().map_or(0, |r| r.r2_per_task.len());
    let mut out = String::new();
    let r2_cols: Vec<String> = (0..n_tasks).map(|i| format!("r2_{i}")).collect();
    out.push_str(&format!("label,value,seed,mean_r2,{}\n", r2_cols.join(",")));
    for row in &report.rows {
        let seed = row.seed.map_or(String::new(), |s| s.to_string());
        let r2s: Vec<String> = row.r2_per_task.iter().map(|v| v.to_string()).collect();
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            row.label,
            row.value,
            seed,
            row.mean_r2,
            r2s.join(",")
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Structural ablations over a trained checkpoint.
///
/// * `drop`: validation R² with each single function removed at eval time.
/// * `extend`: finetunes (codes, signatures, new CLS) with k added
///   functions on the adaptation tasks, averaged over the config's seeds.
/// * `anytime`: validation R² across the iteration-count sweep.
pub fn cmd_ablate(
    cfg: &ExperimentConfig,
    checkpoint_dir: &Path,
    data_dir: &Path,
    kind: AblationKind,
    out_path: &Path,
) -> Result<AblationReport, CmdError> {
    let manifest = load_dataset_manifest(data_dir)?;
    let model = checkpoint::load_model(checkpoint_dir)?;
    let rows = match kind {
        AblationKind::Drop => {
            let ds = manifest.build_pretrain()?;
            let n_f = model.config.n_functions;
            let mut rows = Vec::new();
            let (_, r2) = evaluate(&model, &ds, &ds.val_idx, &EvalOptions::default(), 512)?;
            rows.push(AblationRow {
                label: "baseline".into(),
                value: -1.0,
                seed: None,
                mean_r2: mean(&r2),
                r2_per_task: r2,
            });
            for dropped in 0..n_f {
                let mut keep = vec![true; n_f];
                keep[dropped] = false;
                let opts = EvalOptions::with_keep_mask(keep);
                let (_, r2) = evaluate(&model, &ds, &ds.val_idx, &opts, 512)?;
                rows.push(AblationRow {
                    label: "drop".into(),
                    value: dropped as f64,
                    seed: None,
                    mean_r2: mean(&r2),
                    r2_per_task: r2,
                });
            }
            rows
        }
        AblationKind::Anytime => {
            let ds = manifest.build_pretrain()?;
            let mut rows = Vec::new();
            for &n_i in &cfg.ablation.n_i_sweep {
                let opts = EvalOptions::with_iterations(n_i);
                let (_, r2) = evaluate(&model, &ds, &ds.val_idx, &opts, 512)?;
                rows.push(AblationRow {
                    label: "n_i".into(),
                    value: n_i as f64,
                    seed: None,
                    mean_r2: mean(&r2),
                    r2_per_task: r2,
                });
            }
            rows
        }
        AblationKind::Extend => {
            let ds = manifest.build_adapt()?;
            let jobs: Vec<(usize, u64)> = cfg
                .ablation
                .added_functions
                .iter()
                .flat_map(|&k| cfg.ablation.seeds.iter().map(move |&s| (k, s)))
                .collect();
            let results: Result<Vec<AblationRow>, CmdError> = jobs
                .par_iter()
                .map(|&(k, seed)| {
                    let r2 = extend_run(&model, &ds, cfg, k, seed)?;
                    Ok(AblationRow {
                        label: "added".into(),
                        value: k as f64,
                        seed: Some(seed),
                        mean_r2: mean(&r2),
                        r2_per_task: r2,
                    })
                })
                .collect();
            results?
        }
    };
    let report = AblationReport { kind, rows };
    if let Some(parent) = out_path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    write_ablation_csv(&report, out_path)?;
    Ok(report)
}

/// One capacity-extension run: fresh CLS tokens, k added functions, and
/// every function's code and signature trainable.
fn extend_run(
    base: &Model,
    ds: &RegressionDataset,
    cfg: &ExperimentConfig,
    k: usize,
    seed: u64,
) -> Result<Vec<f64>, CmdError> {
    let mut model = base.clone();
    model.replace_cls_tokens(ds.n_tasks(), seed)?;
    if k > 0 {
        model.add_functions(k, seed.wrapping_add(1))?;
    }
    let groups = build_param_groups(&model);
    let mut active: HashSet<ParamId> = groups.cls_tokens.iter().copied().collect();
    for script in &model.scripts {
        for f in &script.functions {
            active.insert(f.signature);
            active.insert(f.code);
        }
    }
    let train_cfg = TrainConfig {
        epochs: cfg.finetune.epochs,
        batch_size: cfg.train.batch_size,
        optim: crate::train::OptimConfig {
            lr: cfg.finetune.lr,
            ..cfg.train.optim.clone()
        },
        seed,
        eval_batch: cfg.train.eval_batch,
    };
    let mut state = crate::train::TrainState::new(train_cfg.optim.clone(), seed);
    crate::train::train_epochs(
        &mut model,
        ds,
        &crate::train::Selection::Custom(active),
        &train_cfg,
        &mut state,
        train_cfg.epochs,
    )?;
    let (_, r2) = evaluate(&model, ds, &ds.val_idx, &EvalOptions::default(), 512)?;
    Ok(r2)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

// ── tracing ─────────────────────────────────────────────────────────────

/// Exports routing traces for the first `samples` pretraining inputs.
pub fn cmd_trace(
    checkpoint_dir: &Path,
    data_dir: &Path,
    samples: usize,
    out_path: &Path,
) -> Result<Vec<TraceLine>, CmdError> {
    let manifest = load_dataset_manifest(data_dir)?;
    let ds = manifest.build_pretrain()?;
    let model = checkpoint::load_model(checkpoint_dir)?;
    let samples = samples.min(ds.n_samples());
    let mut lines = Vec::new();
    let chunk_size = 256;
    let n = ds.n_vars();
    for start in (0..samples).step_by(chunk_size) {
        let end = (start + chunk_size).min(samples);
        let mut xs = Vec::with_capacity((end - start) * n);
        for i in start..end {
            xs.extend_from_slice(ds.input_row(i));
        }
        let batch = crate::tensor::Storage::new(vec![end - start, n], xs).expect("sized above");
        let sess = model.session();
        let set = model.embed_inputs(&sess, &batch)?;
        let mut records = Vec::new();
        model.forward_set(&sess, &set, &EvalOptions::default(), Some(&mut records))?;
        lines.extend(trace_lines(&records, start));
    }
    if let Some(parent) = out_path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut f = fs::File::create(out_path)?;
    write_trace(&lines, &mut f)?;
    Ok(lines)
}

//! Multi-task regression training: the shared-head MSE objective, Adam with
//! optional variance rectification, the cosine schedule, parameter-group
//! freezing regimes, and the pretrain/finetune loops.

use std::collections::{HashMap, HashSet};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fuzzy::RegressionDataset;
use crate::model::{EvalOptions, Model, ModelError, ParamId, ParamStore, Session};
use crate::tensor::{Storage, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("dataset provides {got} tasks but the model has {expected} CLS tokens")]
    TaskMismatch { expected: usize, got: usize },
    #[error("non-finite value at epoch {epoch}, step {step}: {source}")]
    NonFinite {
        epoch: usize,
        step: u64,
        source: TensorError,
    },
    #[error("non-finite gradient for parameter {param:?} at step {step}")]
    NonFiniteGrad { param: ParamId, step: u64 },
    #[error("training needs a non-empty train split")]
    EmptyTrainSplit,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

// ── loss ────────────────────────────────────────────────────────────────

/// Mean over batch and tasks of the squared error between the CLS-head
/// outputs and the targets.
pub fn multitask_mse(outputs: &Tensor, targets: &Tensor) -> Result<Tensor, TensorError> {
    if outputs.shape() != targets.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "multitask_mse",
            lhs: outputs.shape().to_vec(),
            rhs: targets.shape().to_vec(),
        });
    }
    let diff = outputs.sub(targets)?;
    diff.mul(&diff)?.mean(None)
}

// ── schedules ───────────────────────────────────────────────────────────

/// Cosine annealing without warm-up; constant at `eta_min` past the decay.
pub fn cosine_schedule(step: u64, eta_max: f64, eta_min: f64, decay_steps: u64) -> f64 {
    assert!(decay_steps > 0, "decay_steps must be positive");
    let t = step.min(decay_steps) as f64 / decay_steps as f64;
    eta_min + 0.5 * (eta_max - eta_min) * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Schedule {
    Constant,
    Cosine {
        eta_max: f64,
        eta_min: f64,
        decay_steps: u64,
    },
}

impl Schedule {
    pub fn lr(&self, step: u64, base_lr: f64) -> f64 {
        match self {
            Schedule::Constant => base_lr,
            Schedule::Cosine {
                eta_max,
                eta_min,
                decay_steps,
            } => cosine_schedule(step, *eta_max, *eta_min, *decay_steps),
        }
    }
}

// ── optimizer ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Variance-rectified update (RAdam) instead of plain Adam.
    pub rectified: bool,
    pub schedule: Schedule,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 0.006,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            rectified: false,
            schedule: Schedule::Constant,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Adam with bias correction; moments are allocated per trainable
/// parameter on first touch, so frozen parameters carry no state.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: OptimConfig,
    pub step: u64,
    pub moments: HashMap<ParamId, Moments>,
}

impl Adam {
    pub fn new(config: OptimConfig) -> Self {
        Adam {
            config,
            step: 0,
            moments: HashMap::new(),
        }
    }

    /// One update over `(param, gradient)` pairs at learning rate `lr`.
    pub fn apply(
        &mut self,
        params: &mut ParamStore,
        grads: &[(ParamId, Storage)],
        lr: f64,
    ) -> Result<(), TrainError> {
        self.step += 1;
        let t = self.step;
        let (b1, b2, eps) = (self.config.beta1, self.config.beta2, self.config.eps);
        let bc1 = 1.0 - b1.powi(t as i32);
        let bc2 = 1.0 - b2.powi(t as i32);
        let rect = self.config.rectified.then(|| {
            let rho_inf = 2.0 / (1.0 - b2) - 1.0;
            let rho_t = rho_inf - 2.0 * t as f64 * b2.powi(t as i32) / bc2;
            (rho_inf, rho_t)
        });
        for (id, grad) in grads {
            if !grad.all_finite() {
                return Err(TrainError::NonFiniteGrad {
                    param: *id,
                    step: t,
                });
            }
            let n = grad.numel();
            let slot = self.moments.entry(*id).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            params.update(*id, |value| {
                let data = value.data_mut();
                for i in 0..n {
                    let g = grad.data()[i];
                    slot.m[i] = b1 * slot.m[i] + (1.0 - b1) * g;
                    slot.v[i] = b2 * slot.v[i] + (1.0 - b2) * g * g;
                    let m_hat = slot.m[i] / bc1;
                    match rect {
                        None => {
                            let v_hat = (slot.v[i] / bc2).sqrt();
                            data[i] -= lr * m_hat / (v_hat + eps);
                        }
                        Some((rho_inf, rho_t)) => {
                            if rho_t > 4.0 {
                                let r = (((rho_t - 4.0) * (rho_t - 2.0) * rho_inf)
                                    / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
                                    .sqrt();
                                let v_hat = (slot.v[i] / bc2).sqrt();
                                data[i] -= lr * r * m_hat / (v_hat + eps);
                            } else {
                                data[i] -= lr * m_hat;
                            }
                        }
                    }
                }
            });
        }
        Ok(())
    }
}

// ── parameter groups and regimes ────────────────────────────────────────

/// Finetuning regimes: which parameter sets unfreeze alongside the newly
/// instantiated CLS tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    ClsOnly,
    ClsPlusType,
    All,
}

impl std::str::FromStr for Regime {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cls_only" => Ok(Regime::ClsOnly),
            "cls_plus_type" => Ok(Regime::ClsPlusType),
            "all" => Ok(Regime::All),
            other => Err(format!(
                "unknown regime '{other}' (expected cls_only | cls_plus_type | all)"
            )),
        }
    }
}

/// Named partition of the full parameter set.
#[derive(Debug, Clone)]
pub struct ParamGroups {
    pub cls_tokens: Vec<ParamId>,
    /// Type-inference MLP weights, function signatures and the kernel scale.
    pub type_matching: Vec<ParamId>,
    pub function_codes: Vec<ParamId>,
    /// LOC stacks, positional parameters and the input embedding.
    pub interpreter_and_embeddings: Vec<ParamId>,
    pub regression_head: Vec<ParamId>,
}

pub fn build_param_groups(model: &Model) -> ParamGroups {
    let mut cls_tokens = model.embed.cls.clone();
    cls_tokens.sort_unstable();
    let mut type_matching = Vec::new();
    let mut function_codes = Vec::new();
    let mut interpreter_and_embeddings = Vec::new();
    interpreter_and_embeddings.extend(model.embed.value.param_ids());
    if let Some(pos) = model.embed.pos {
        interpreter_and_embeddings.push(pos);
    }
    for script in &model.scripts {
        type_matching.extend(script.type_l1.param_ids());
        type_matching.extend(script.type_l2.param_ids());
        type_matching.push(script.sigma_log);
        for f in &script.functions {
            type_matching.push(f.signature);
            function_codes.push(f.code);
        }
        for loc in &script.locs {
            interpreter_and_embeddings.extend(loc.param_ids());
        }
        if let Some(pb) = &script.pos_bias {
            interpreter_and_embeddings.extend(pb.param_ids());
        }
    }
    let regression_head = model.head.param_ids();
    ParamGroups {
        cls_tokens,
        type_matching,
        function_codes,
        interpreter_and_embeddings,
        regression_head,
    }
}

impl ParamGroups {
    pub fn all(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        ids.extend(&self.cls_tokens);
        ids.extend(&self.type_matching);
        ids.extend(&self.function_codes);
        ids.extend(&self.interpreter_and_embeddings);
        ids.extend(&self.regression_head);
        ids
    }

    /// The trainable set for a finetuning regime. Regimes are nested:
    /// cls_only ⊂ cls_plus_type ⊂ all; the shared head unfreezes only
    /// under `all`.
    pub fn trainable_for(&self, regime: Regime) -> HashSet<ParamId> {
        let mut set: HashSet<ParamId> = self.cls_tokens.iter().copied().collect();
        if matches!(regime, Regime::ClsPlusType | Regime::All) {
            set.extend(&self.type_matching);
        }
        if matches!(regime, Regime::All) {
            set.extend(&self.function_codes);
            set.extend(&self.interpreter_and_embeddings);
            set.extend(&self.regression_head);
        }
        set
    }
}

/// What may be updated during a run.
#[derive(Debug, Clone)]
pub enum Selection {
    /// Everything whose store flag is trainable (the pretraining default,
    /// which is where frozen-signature/code configurations take effect).
    Pretrain,
    Regime(Regime),
    Custom(HashSet<ParamId>),
}

impl Selection {
    pub fn active_set(&self, model: &Model) -> HashSet<ParamId> {
        match self {
            Selection::Pretrain => model
                .named_params()
                .into_iter()
                .map(|(_, id)| id)
                .filter(|&id| model.params().trainable(id))
                .collect(),
            Selection::Regime(r) => build_param_groups(model).trainable_for(*r),
            Selection::Custom(set) => set.clone(),
        }
    }
}

// ── metrics ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub r2_per_task: Vec<f64>,
    pub lr: f64,
    pub seconds: f64,
}

impl EpochMetrics {
    pub fn mean_r2(&self) -> f64 {
        self.r2_per_task.iter().sum::<f64>() / self.r2_per_task.len() as f64
    }
}

/// CSV emitter: `epoch,split,loss,r2_0..r2_{T-1},lr,seconds`.
pub fn write_metrics_csv(
    metrics: &[EpochMetrics],
    n_tasks: usize,
    w: &mut impl std::io::Write,
) -> std::io::Result<()> {
    let r2_cols: Vec<String> = (0..n_tasks).map(|i| format!("r2_{i}")).collect();
    writeln!(w, "epoch,split,loss,{},lr,seconds", r2_cols.join(","))?;
    for m in metrics {
        let r2s: Vec<String> = m.r2_per_task.iter().map(|v| v.to_string()).collect();
        writeln!(
            w,
            "{},{},{},{},{},{}",
            m.epoch,
            m.split,
            m.loss,
            r2s.join(","),
            m.lr,
            m.seconds
        )?;
    }
    Ok(())
}

/// Streaming per-task regression statistics; enough to recover loss and R²
/// without a second pass.
#[derive(Debug, Clone)]
struct TaskStats {
    n: usize,
    ss_res: Vec<f64>,
    sum_t: Vec<f64>,
    sum_t2: Vec<f64>,
}

impl TaskStats {
    fn new(n_tasks: usize) -> Self {
        TaskStats {
            n: 0,
            ss_res: vec![0.0; n_tasks],
            sum_t: vec![0.0; n_tasks],
            sum_t2: vec![0.0; n_tasks],
        }
    }

    fn update(&mut self, pred: &[f64], target: &[f64], n_tasks: usize) {
        let rows = pred.len() / n_tasks;
        self.n += rows;
        for r in 0..rows {
            for k in 0..n_tasks {
                let p = pred[r * n_tasks + k];
                let t = target[r * n_tasks + k];
                self.ss_res[k] += (p - t) * (p - t);
                self.sum_t[k] += t;
                self.sum_t2[k] += t * t;
            }
        }
    }

    fn loss(&self) -> f64 {
        self.ss_res.iter().sum::<f64>() / (self.n * self.ss_res.len()) as f64
    }

    fn r2(&self) -> Vec<f64> {
        (0..self.ss_res.len())
            .map(|k| {
                let ss_tot = self.sum_t2[k] - self.sum_t[k] * self.sum_t[k] / self.n as f64;
                1.0 - self.ss_res[k] / ss_tot
            })
            .collect()
    }
}

// ── training state and loops ────────────────────────────────────────────

/// Everything mutable across epochs besides the parameters themselves.
/// Restoring this state (plus the parameters) resumes training bit-exactly.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub optimizer: Adam,
    pub epoch: usize,
    pub rng: ChaCha8Rng,
    pub metrics: Vec<EpochMetrics>,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub best_params: Option<ParamStore>,
}

impl TrainState {
    pub fn new(optim: OptimConfig, seed: u64) -> Self {
        TrainState {
            optimizer: Adam::new(optim),
            epoch: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            metrics: Vec::new(),
            best_val_loss: f64::INFINITY,
            best_epoch: 0,
            best_params: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub seed: u64,
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 128,
            optim: OptimConfig::default(),
            seed: 0,
            eval_batch: 512,
        }
    }
}

fn batch_storage(ds: &RegressionDataset, idx: &[usize]) -> (Storage, Storage) {
    let n = ds.n_vars();
    let t = ds.n_tasks();
    let mut xs = Vec::with_capacity(idx.len() * n);
    let mut ys = Vec::with_capacity(idx.len() * t);
    for &i in idx {
        xs.extend_from_slice(ds.input_row(i));
        ys.extend_from_slice(ds.target_row(i));
    }
    (
        Storage::new(vec![idx.len(), n], xs).expect("sized by construction"),
        Storage::new(vec![idx.len(), t], ys).expect("sized by construction"),
    )
}

/// Forward the validation split and collect loss and per-task R².
pub fn evaluate(
    model: &Model,
    ds: &RegressionDataset,
    indices: &[usize],
    opts: &EvalOptions,
    eval_batch: usize,
) -> Result<(f64, Vec<f64>), TrainError> {
    let t = ds.n_tasks();
    let mut stats = TaskStats::new(t);
    for chunk in indices.chunks(eval_batch.max(1)) {
        let (xs, ys) = batch_storage(ds, chunk);
        let sess = model.session();
        let pred = model.predict(&sess, &xs, opts)?;
        stats.update(pred.value().data(), ys.data(), t);
    }
    Ok((stats.loss(), stats.r2()))
}

/// Runs `epochs` additional epochs, mutating the model and state in place.
/// Validation runs after every epoch; the best-validation parameter copy is
/// retained in the state.
pub fn train_epochs(
    model: &mut Model,
    ds: &RegressionDataset,
    selection: &Selection,
    cfg: &TrainConfig,
    state: &mut TrainState,
    epochs: usize,
) -> Result<(), TrainError> {
    if ds.n_tasks() != model.config.n_cls {
        return Err(TrainError::TaskMismatch {
            expected: model.config.n_cls,
            got: ds.n_tasks(),
        });
    }
    if ds.train_idx.is_empty() {
        return Err(TrainError::EmptyTrainSplit);
    }
    let active = selection.active_set(model);
    let mut active_sorted: Vec<ParamId> = active.iter().copied().collect();
    active_sorted.sort_unstable();
    let n_tasks = ds.n_tasks();

    for _ in 0..epochs {
        let epoch = state.epoch;
        let start = Instant::now();
        let mut order = ds.train_idx.clone();
        // Fisher-Yates from the state RNG keeps resumed runs bit-exact
        for i in (1..order.len()).rev() {
            let j = (rand::RngExt::random_range(&mut state.rng, 0..=i as u64)) as usize;
            order.swap(i, j);
        }
        let mut stats = TaskStats::new(n_tasks);
        let mut lr = state.optimizer.config.lr;
        for chunk in order.chunks(cfg.batch_size) {
            let step = state.optimizer.step;
            lr = state.optimizer.config.schedule.lr(step, state.optimizer.config.lr);
            let (xs, ys) = batch_storage(ds, chunk);
            let sess = Session::with_active(model.params(), active.clone());
            let pred = model
                .predict(&sess, &xs, &EvalOptions::default())
                .map_err(|e| match e {
                    ModelError::Tensor(source) => TrainError::NonFinite {
                        epoch,
                        step,
                        source,
                    },
                    other => TrainError::Model(other),
                })?;
            let targets = sess.tape.constant(ys.clone());
            let loss = multitask_mse(&pred, &targets).map_err(|source| TrainError::NonFinite {
                epoch,
                step,
                source,
            })?;
            stats.update(pred.value().data(), ys.data(), n_tasks);
            let mut grads = loss.backward()?;
            let mut updates = Vec::with_capacity(active_sorted.len());
            for (id, leaf) in sess.bound_params() {
                if active.contains(&id) {
                    updates.push((id, grads.take(&leaf).unwrap_or_else(|| Storage::zeros(leaf.shape()))));
                }
            }
            drop(sess);
            state.optimizer.apply(model.params_mut(), &updates, lr)?;
            model.project_signatures();
        }
        let train_seconds = start.elapsed().as_secs_f64();
        state.metrics.push(EpochMetrics {
            epoch,
            split: Split::Train,
            loss: stats.loss(),
            r2_per_task: stats.r2(),
            lr,
            seconds: train_seconds,
        });
        let val_start = Instant::now();
        let (val_loss, val_r2) =
            evaluate(model, ds, &ds.val_idx, &EvalOptions::default(), cfg.eval_batch)?;
        state.metrics.push(EpochMetrics {
            epoch,
            split: Split::Val,
            loss: val_loss,
            r2_per_task: val_r2,
            lr,
            seconds: val_start.elapsed().as_secs_f64(),
        });
        if val_loss < state.best_val_loss {
            state.best_val_loss = val_loss;
            state.best_epoch = epoch;
            state.best_params = Some(model.params().clone());
        }
        state.epoch += 1;
    }
    Ok(())
}

/// Pre-training: every store-trainable parameter updates.
pub fn pretrain(
    model: &mut Model,
    ds: &RegressionDataset,
    cfg: &TrainConfig,
) -> Result<TrainState, TrainError> {
    let mut state = TrainState::new(cfg.optim.clone(), cfg.seed);
    train_epochs(model, ds, &Selection::Pretrain, cfg, &mut state, cfg.epochs)?;
    Ok(state)
}

/// Finetuning under a freezing regime. The caller is responsible for
/// instantiating new CLS tokens (and any added functions) first; extra
/// trainable parameters (new codes/signatures) ride along via `extra`.
pub fn finetune(
    model: &mut Model,
    ds: &RegressionDataset,
    regime: Regime,
    extra: &[ParamId],
    cfg: &TrainConfig,
) -> Result<TrainState, TrainError> {
    let groups = build_param_groups(model);
    let mut set = groups.trainable_for(regime);
    set.extend(extra.iter().copied());
    let selection = Selection::Custom(set);
    let mut state = TrainState::new(cfg.optim.clone(), cfg.seed);
    train_epochs(model, ds, &selection, cfg, &mut state, cfg.epochs)?;
    Ok(state)
}

//! The model proper: type inference and kernel type matching, the shared
//! interpreter running per-function LOC streams, function iterations,
//! scripts, and the scalar-input embedding / regression head around them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{normal_init, Linear, Loc, ModLin, PosBias, ROUTING_EPS};
use super::params::{ParamId, ParamStore, Session};
use super::ModelError;
use crate::tensor::{Storage, Tensor};

/// Positional information mixed into the input embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PosMode {
    /// Learned per-position vectors added to input-element embeddings.
    Learned1d,
    /// No positional information; the model is permutation equivariant.
    None,
    /// Per-function relative bias over a grid layout, added to attention
    /// logits between grid elements.
    RelativeGrid { rows: usize, cols: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Width of set-element features.
    pub d_model: usize,
    /// Code-vector dimension.
    pub d_cond: usize,
    /// Dimension of the type hypersphere.
    pub d_type: usize,
    /// Features per attention head.
    pub d_key: usize,
    pub n_heads: usize,
    pub n_scripts: usize,
    /// Function iterations per script.
    pub n_iterations: usize,
    /// LOCs per interpreter.
    pub n_locs: usize,
    pub n_functions: usize,
    /// Kernel truncation parameter, in [0, 2).
    pub tau: f64,
    /// Scalar inputs per sample.
    pub n_inputs: usize,
    /// CLS tokens (one per task).
    pub n_cls: usize,
    pub pos_mode: PosMode,
    pub signatures_trainable: bool,
    pub codes_trainable: bool,
    /// Row/column difference embedding width for the relative-grid mode.
    pub d_pos: usize,
}

impl Default for ModelConfig {
    /// Desk-scale defaults: the published fuzzy-task counts with reduced
    /// widths (d 64 instead of 128).
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            d_cond: 64,
            d_type: 24,
            d_key: 32,
            n_heads: 1,
            n_scripts: 2,
            n_iterations: 2,
            n_locs: 1,
            n_functions: 4,
            tau: 1.6,
            n_inputs: 5,
            n_cls: 8,
            pos_mode: PosMode::Learned1d,
            signatures_trainable: true,
            codes_trainable: true,
            d_pos: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("d_model", self.d_model),
            ("d_cond", self.d_cond),
            ("d_type", self.d_type),
            ("d_key", self.d_key),
            ("n_heads", self.n_heads),
            ("n_scripts", self.n_scripts),
            ("n_iterations", self.n_iterations),
            ("n_locs", self.n_locs),
            ("n_functions", self.n_functions),
            ("n_inputs", self.n_inputs),
            ("n_cls", self.n_cls),
            ("d_pos", self.d_pos),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if !(0.0..2.0).contains(&self.tau) {
            return Err(ModelError::InvalidConfig(format!(
                "tau must lie in [0, 2), got {}",
                self.tau
            )));
        }
        if let PosMode::RelativeGrid { rows, cols } = self.pos_mode {
            if rows * cols != self.n_inputs {
                return Err(ModelError::InvalidConfig(format!(
                    "grid {rows}x{cols} does not cover {} inputs",
                    self.n_inputs
                )));
            }
        }
        Ok(())
    }

    pub fn set_size(&self) -> usize {
        self.n_inputs + self.n_cls
    }
}

/// Role of a set element; grid coordinates apply in relative-grid mode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Role {
    Input { grid: Option<(usize, usize)> },
    Cls,
}

/// A batch of input sets: elements `[batch, set, d_model]` plus per-index
/// roles. Output cardinality always equals input cardinality.
pub struct SetBatch {
    pub elements: Tensor,
    pub roles: Vec<Role>,
}

/// One interpreter function: a routing signature on the type hypersphere
/// and a code vector that programs the shared interpreter.
#[derive(Debug, Clone)]
pub struct FunctionDef {
    pub signature: ParamId, // [d_type], unit norm
    pub code: ParamId,      // [d_cond]
}

/// Evaluation-time knobs: compute/accuracy trade-off via the iteration
/// override, graceful-degradation studies via the function keep-mask.
#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    pub n_iterations: Option<usize>,
    pub keep_functions: Option<Vec<bool>>,
}

impl EvalOptions {
    pub fn with_iterations(n: usize) -> Self {
        EvalOptions {
            n_iterations: Some(n),
            ..Default::default()
        }
    }

    pub fn with_keep_mask(mask: Vec<bool>) -> Self {
        EvalOptions {
            keep_functions: Some(mask),
            ..Default::default()
        }
    }
}

/// Routing quantities captured during one function iteration.
#[derive(Debug, Clone)]
pub struct TraceRecord {
    pub script: usize,
    pub iteration: usize,
    /// Compatibilities, `[batch, n_f, set]`.
    pub compat: Storage,
    /// Inferred types, `[batch, set, d_type]`.
    pub types: Storage,
}

#[derive(Debug, Clone)]
pub struct Script {
    pub type_l1: Linear,
    pub type_l2: Linear,
    pub sigma_log: ParamId,
    pub functions: Vec<FunctionDef>,
    pub locs: Vec<Loc>,
    pub pos_bias: Option<PosBias>,
}

impl Script {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let type_l1 = Linear::new(store, rng, cfg.d_model, cfg.d_model);
        let type_l2 = Linear::new(store, rng, cfg.d_model, cfg.d_type);
        let sigma_log = store.add(Storage::scalar(0.0), true);
        let functions = (0..cfg.n_functions)
            .map(|_| new_function(store, rng, cfg))
            .collect();
        let locs = (0..cfg.n_locs)
            .map(|_| Loc::new(store, rng, cfg.d_model, cfg.d_key, cfg.n_heads, cfg.d_cond))
            .collect();
        let pos_bias = match cfg.pos_mode {
            PosMode::RelativeGrid { rows, cols } => Some(PosBias::new(
                store, rng, rows, cols, cfg.d_pos, cfg.n_heads, cfg.d_cond,
            )),
            _ => None,
        };
        Script {
            type_l1,
            type_l2,
            sigma_log,
            functions,
            locs,
            pos_bias,
        }
    }

    /// Unit-norm type vectors for every set element: `[batch, set, d_type]`.
    pub fn infer_types(&self, sess: &Session, x: &Tensor) -> Result<Tensor, ModelError> {
        let h = self.type_l1.apply(sess, x)?.gelu()?;
        Ok(self.type_l2.apply(sess, &h)?.l2_normalize()?)
    }

    /// Stacked signatures `[n_f, d_type]` and codes `[n_f, d_cond]`.
    fn stacked(&self, sess: &Session) -> Result<(Tensor, Tensor), ModelError> {
        let sigs: Vec<Tensor> = self
            .functions
            .iter()
            .map(|f| {
                let s = sess.p(f.signature);
                let d = s.numel();
                s.reshape(&[1, d])
            })
            .collect::<Result<_, _>>()?;
        let codes: Vec<Tensor> = self
            .functions
            .iter()
            .map(|f| {
                let c = sess.p(f.code);
                let d = c.numel();
                c.reshape(&[1, d])
            })
            .collect::<Result<_, _>>()?;
        let sig_refs: Vec<&Tensor> = sigs.iter().collect();
        let code_refs: Vec<&Tensor> = codes.iter().collect();
        Ok((
            Tensor::concat(&sig_refs, 0)?,
            Tensor::concat(&code_refs, 0)?,
        ))
    }

    /// Truncated-kernel compatibilities `[batch, n_f, set]`.
    ///
    /// Distance is `1 − s·t`; streams with distance beyond tau are cut to
    /// zero (the cut is a constant in the backward pass), survivors are
    /// normalized over functions with an epsilon guard.
    pub fn compatibility(
        &self,
        sess: &Session,
        types: &Tensor,
        signatures: &Tensor,
        tau: f64,
        keep: Option<&[bool]>,
    ) -> Result<Tensor, ModelError> {
        let (batch, set) = (types.shape()[0], types.shape()[1]);
        let n_f = signatures.shape()[0];
        if let Some(mask) = keep {
            if mask.len() != n_f {
                return Err(ModelError::BadKeepMask {
                    expected: n_f,
                    got: mask.len(),
                });
            }
            if !mask.iter().any(|&k| k) {
                return Err(ModelError::EmptyKeepMask);
            }
        }
        let dot = types.matmul_nt(signatures)?; // [batch, set, n_f]
        let dist = dot.rsub_scalar(1.0)?;
        let sigma = sess.p(self.sigma_log).exp()?; // [1]
        let kernel = dist.div(&sigma)?.neg()?.exp()?;
        let mut mask_data = vec![0.0f64; batch * set * n_f];
        {
            let dv = dist.value().data();
            for (i, m) in mask_data.iter_mut().enumerate() {
                let u = i % n_f;
                let kept = keep.map_or(true, |k| k[u]);
                if kept && dv[i] <= tau {
                    *m = 1.0;
                }
            }
        }
        let mask = sess
            .tape
            .constant(Storage::new(vec![batch, set, n_f], mask_data).expect("sized above"));
        let truncated = kernel.mul(&mask)?;
        let denom = truncated.sum_keepdim(2)?.add_scalar(ROUTING_EPS)?;
        let normalized = truncated.div(&denom)?;
        Ok(normalized.permute(&[0, 2, 1])?) // [batch, n_f, set]
    }

    /// One function iteration: re-infer types from the current elements,
    /// match them against signatures, run the interpreter.
    #[allow(clippy::too_many_arguments)]
    pub fn fn_iter(
        &self,
        sess: &Session,
        x: &Tensor,
        tau: f64,
        keep: Option<&[bool]>,
        bias: Option<&Tensor>,
        trace: Option<(&mut Vec<TraceRecord>, usize, usize)>,
    ) -> Result<Tensor, ModelError> {
        let (batch, set, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let types = self.infer_types(sess, x)?;
        let (signatures, codes) = self.stacked(sess)?;
        let compat = self.compatibility(sess, &types, &signatures, tau, keep)?;
        if let Some((records, script, iteration)) = trace {
            records.push(TraceRecord {
                script,
                iteration,
                compat: compat.value().clone(),
                types: types.value().clone(),
            });
        }
        let n_f = self.functions.len();
        // broadcast the set into one computational stream per function
        let mut stream = x.reshape(&[batch, 1, set, d])?;
        for loc in &self.locs {
            stream = loc.apply(sess, &stream, &codes, &compat, bias)?;
        }
        let weighted = compat.reshape(&[batch, n_f, set, 1])?.mul(&stream)?;
        Ok(x.add(&weighted.sum(Some(1))?)?)
    }

    /// Recurrent application of `fn_iter` with shared parameters.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        sess: &Session,
        x: &Tensor,
        n_iterations: usize,
        tau: f64,
        keep: Option<&[bool]>,
        coords: Option<&[Option<(usize, usize)>]>,
        mut trace: Option<(&mut Vec<TraceRecord>, usize)>,
    ) -> Result<Tensor, ModelError> {
        let bias = match (&self.pos_bias, coords) {
            (Some(pb), Some(coords)) => {
                let (_, codes) = self.stacked(sess)?;
                Some(pb.bias(sess, &codes, coords)?)
            }
            (Some(_), None) => return Err(ModelError::MissingGridLayout),
            _ => None,
        };
        let mut cur = x.clone();
        for it in 0..n_iterations {
            let t = trace
                .as_mut()
                .map(|(records, script)| (&mut **records, *script, it));
            cur = self.fn_iter(sess, &cur, tau, keep, bias.as_ref(), t)?;
        }
        Ok(cur)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.type_l1.param_ids();
        ids.extend(self.type_l2.param_ids());
        ids.push(self.sigma_log);
        for f in &self.functions {
            ids.push(f.signature);
            ids.push(f.code);
        }
        for loc in &self.locs {
            ids.extend(loc.param_ids());
        }
        if let Some(pb) = &self.pos_bias {
            ids.extend(pb.param_ids());
        }
        ids
    }
}

fn new_function(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> FunctionDef {
    let raw = normal_init(rng, &[cfg.d_type], 1.0);
    let norm = raw.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let sig = raw.map(|v| v / norm);
    FunctionDef {
        signature: store.add(sig, cfg.signatures_trainable),
        code: store.add(normal_init(rng, &[cfg.d_cond], 1.0), cfg.codes_trainable),
    }
}

/// Input embedding parameters: a shared scalar-to-vector linear map,
/// optional learned positions, and the CLS tokens.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub value: Linear,          // 1 -> d
    pub pos: Option<ParamId>,   // [n_inputs, d]
    pub cls: Vec<ParamId>,      // each [d]
}

pub struct Model {
    pub config: ModelConfig,
    pub(crate) params: ParamStore,
    pub embed: Embedding,
    pub scripts: Vec<Script>,
    pub head: Linear,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Model {
            config: self.config.clone(),
            params: self.params.clone(),
            embed: self.embed.clone(),
            scripts: self.scripts.clone(),
            head: self.head.clone(),
        }
    }
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let value = Linear::new(&mut store, &mut rng, 1, config.d_model);
        let pos = matches!(config.pos_mode, PosMode::Learned1d).then(|| {
            store.add(
                normal_init(&mut rng, &[config.n_inputs, config.d_model], 0.02),
                true,
            )
        });
        let cls = (0..config.n_cls)
            .map(|_| store.add(normal_init(&mut rng, &[config.d_model], 0.02), true))
            .collect();
        let scripts = (0..config.n_scripts)
            .map(|_| Script::new(&mut store, &mut rng, &config))
            .collect();
        let head = Linear::new(&mut store, &mut rng, config.d_model, 1);
        Ok(Model {
            config,
            params: store,
            embed: Embedding { value, pos, cls },
            scripts,
            head,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn session(&self) -> Session<'_> {
        Session::new(&self.params)
    }

    /// Embeds a batch of scalar inputs `[batch, n_inputs]` into a set:
    /// one element per scalar (shared linear embedding plus positional
    /// term where configured) followed by the CLS tokens.
    pub fn embed_inputs(&self, sess: &Session, scalars: &Storage) -> Result<SetBatch, ModelError> {
        if scalars.ndim() != 2 || scalars.shape()[1] != self.config.n_inputs {
            return Err(ModelError::BadInputShape {
                expected: self.config.n_inputs,
                got: scalars.shape().to_vec(),
            });
        }
        let batch = scalars.shape()[0];
        if batch == 0 {
            return Err(ModelError::EmptyInput);
        }
        let n = self.config.n_inputs;
        let d = self.config.d_model;
        let x = sess.tape.constant(scalars.clone());
        let mut inputs = self
            .embed
            .value
            .apply(sess, &x.reshape(&[batch, n, 1])?)?;
        if let Some(pos) = self.embed.pos {
            inputs = inputs.add(&sess.p(pos))?;
        }
        let cls: Vec<Tensor> = self
            .embed
            .cls
            .iter()
            .map(|&id| sess.p(id).reshape(&[1, d]))
            .collect::<Result<_, _>>()?;
        let cls_refs: Vec<&Tensor> = cls.iter().collect();
        let cls_cat = Tensor::concat(&cls_refs, 0)?.broadcast_to(&[batch, self.config.n_cls, d])?;
        let elements = Tensor::concat(&[&inputs, &cls_cat], 1)?;
        let mut roles: Vec<Role> = (0..n)
            .map(|i| Role::Input {
                grid: match self.config.pos_mode {
                    PosMode::RelativeGrid { cols, .. } => Some((i / cols, i % cols)),
                    _ => None,
                },
            })
            .collect();
        roles.extend(std::iter::repeat_n(Role::Cls, self.config.n_cls));
        Ok(SetBatch { elements, roles })
    }

    /// Runs the script stack over a set; cardinality is preserved.
    pub fn forward_set(
        &self,
        sess: &Session,
        set: &SetBatch,
        opts: &EvalOptions,
        mut trace: Option<&mut Vec<TraceRecord>>,
    ) -> Result<SetBatch, ModelError> {
        if set.elements.numel() == 0 {
            return Err(ModelError::EmptyInput);
        }
        let n_i = opts.n_iterations.unwrap_or(self.config.n_iterations);
        if n_i == 0 {
            return Err(ModelError::BadIterationCount);
        }
        let coords: Option<Vec<Option<(usize, usize)>>> =
            if matches!(self.config.pos_mode, PosMode::RelativeGrid { .. }) {
                let coords: Vec<Option<(usize, usize)>> = set
                    .roles
                    .iter()
                    .map(|r| match r {
                        Role::Input { grid } => *grid,
                        Role::Cls => None,
                    })
                    .collect();
                // every input element must sit on the grid; CLS tokens get
                // no positional bias
                let input_without_grid = set
                    .roles
                    .iter()
                    .any(|r| matches!(r, Role::Input { grid: None }));
                if input_without_grid {
                    return Err(ModelError::MissingGridLayout);
                }
                Some(coords)
            } else {
                None
            };
        let mut cur = set.elements.clone();
        for (si, script) in self.scripts.iter().enumerate() {
            cur = script.forward(
                sess,
                &cur,
                n_i,
                self.config.tau,
                opts.keep_functions.as_deref(),
                coords.as_deref(),
                trace.as_mut().map(|records| (&mut **records, si)),
            )?;
        }
        Ok(SetBatch {
            elements: cur,
            roles: set.roles.clone(),
        })
    }

    /// Shared regression head over the CLS outputs: `[batch, n_cls]`.
    pub fn head_outputs(&self, sess: &Session, out: &SetBatch) -> Result<Tensor, ModelError> {
        let n = self.config.n_inputs;
        let t = self.config.n_cls;
        let batch = out.elements.shape()[0];
        let cls = out.elements.slice(1, n, t)?;
        Ok(self.head.apply(sess, &cls)?.reshape(&[batch, t])?)
    }

    /// Full pipeline: embed, run scripts, read the task heads.
    pub fn predict(
        &self,
        sess: &Session,
        scalars: &Storage,
        opts: &EvalOptions,
    ) -> Result<Tensor, ModelError> {
        let set = self.embed_inputs(sess, scalars)?;
        let out = self.forward_set(sess, &set, opts, None)?;
        self.head_outputs(sess, &out)
    }

    /// Appends `k` fresh functions to every script; all other parameters
    /// are untouched. Returns the new parameter ids (signatures and codes),
    /// which are created trainable.
    pub fn add_functions(&mut self, k: usize, seed: u64) -> Result<Vec<ParamId>, ModelError> {
        if k == 0 {
            return Err(ModelError::InvalidConfig("k must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cfg = self.config.clone();
        cfg.signatures_trainable = true;
        cfg.codes_trainable = true;
        let mut new_ids = Vec::new();
        for script in &mut self.scripts {
            for _ in 0..k {
                let f = new_function(&mut self.params, &mut rng, &cfg);
                new_ids.push(f.signature);
                new_ids.push(f.code);
                script.functions.push(f);
            }
        }
        self.config.n_functions += k;
        Ok(new_ids)
    }

    /// Replaces the CLS tokens (and so the task heads' inputs) for a new
    /// task set. Old token parameters are dropped from the walk.
    pub fn replace_cls_tokens(&mut self, n_tasks: usize, seed: u64) -> Result<(), ModelError> {
        if n_tasks == 0 {
            return Err(ModelError::InvalidConfig("need at least one task".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.embed.cls = (0..n_tasks)
            .map(|_| {
                self.params
                    .add(normal_init(&mut rng, &[self.config.d_model], 0.02), true)
            })
            .collect();
        self.config.n_cls = n_tasks;
        Ok(())
    }

    /// Rescales every signature to exact unit norm (hypersphere projection
    /// applied after optimizer steps).
    pub fn project_signatures(&mut self) {
        for script in &self.scripts {
            for f in &script.functions {
                self.params.update(f.signature, |s| {
                    let norm = s.data().iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm > 0.0 {
                        for v in s.data_mut() {
                            *v /= norm;
                        }
                    }
                });
            }
        }
    }

    /// Canonical (name, id) walk over every reachable parameter.
    pub fn named_params(&self) -> Vec<(String, ParamId)> {
        let mut out = Vec::new();
        let lin = |prefix: String, l: &Linear, out: &mut Vec<(String, ParamId)>| {
            out.push((format!("{prefix}.w"), l.w));
            out.push((format!("{prefix}.b"), l.b));
        };
        fn modlin(prefix: String, m: &ModLin, out: &mut Vec<(String, ParamId)>) {
            out.push((format!("{prefix}.w"), m.w));
            out.push((format!("{prefix}.b"), m.b));
            out.push((format!("{prefix}.wc"), m.w_c));
            out.push((format!("{prefix}.ln_g"), m.ln_g));
            out.push((format!("{prefix}.ln_b"), m.ln_b));
        }
        lin("embed.value".into(), &self.embed.value, &mut out);
        if let Some(pos) = self.embed.pos {
            out.push(("embed.pos".into(), pos));
        }
        for (i, &cls) in self.embed.cls.iter().enumerate() {
            out.push((format!("cls.{i}"), cls));
        }
        for (s, script) in self.scripts.iter().enumerate() {
            let p = format!("script{s}");
            lin(format!("{p}.type_mlp.l1"), &script.type_l1, &mut out);
            lin(format!("{p}.type_mlp.l2"), &script.type_l2, &mut out);
            out.push((format!("{p}.sigma_log"), script.sigma_log));
            for (u, f) in script.functions.iter().enumerate() {
                out.push((format!("{p}.fn{u}.signature"), f.signature));
                out.push((format!("{p}.fn{u}.code"), f.code));
            }
            for (l, loc) in script.locs.iter().enumerate() {
                let lp = format!("{p}.loc{l}");
                out.push((format!("{lp}.ln1.g"), loc.ln1_g));
                out.push((format!("{lp}.ln1.b"), loc.ln1_b));
                for (h, m) in loc.attn.query.iter().enumerate() {
                    modlin(format!("{lp}.attn.head{h}.query"), m, &mut out);
                }
                for (h, m) in loc.attn.key.iter().enumerate() {
                    modlin(format!("{lp}.attn.head{h}.key"), m, &mut out);
                }
                for (h, m) in loc.attn.value.iter().enumerate() {
                    modlin(format!("{lp}.attn.head{h}.value"), m, &mut out);
                }
                modlin(format!("{lp}.attn.out"), &loc.attn.out, &mut out);
                out.push((format!("{lp}.ln2.g"), loc.ln2_g));
                out.push((format!("{lp}.ln2.b"), loc.ln2_b));
                modlin(format!("{lp}.mlp.l1"), &loc.mlp.l1, &mut out);
                modlin(format!("{lp}.mlp.l2"), &loc.mlp.l2, &mut out);
            }
            if let Some(pb) = &script.pos_bias {
                out.push((format!("{p}.pos.e_row"), pb.e_row));
                out.push((format!("{p}.pos.e_col"), pb.e_col));
                out.push((format!("{p}.pos.w_row"), pb.w_row));
                out.push((format!("{p}.pos.w_col"), pb.w_col));
                for (h, m) in pb.row_mod.iter().enumerate() {
                    modlin(format!("{p}.pos.row_mod.head{h}"), m, &mut out);
                }
                for (h, m) in pb.col_mod.iter().enumerate() {
                    modlin(format!("{p}.pos.col_mod.head{h}"), m, &mut out);
                }
            }
        }
        lin("head".into(), &self.head, &mut out);
        out
    }

    /// Total element count over a set of parameters.
    pub fn param_count(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|&id| self.params.value(id).numel()).sum()
    }

    /// Parameters of everything except per-function signatures and codes;
    /// by construction this count does not depend on `n_functions`.
    pub fn shared_param_ids(&self) -> Vec<ParamId> {
        let per_function: std::collections::HashSet<ParamId> = self
            .scripts
            .iter()
            .flat_map(|s| s.functions.iter().flat_map(|f| [f.signature, f.code]))
            .collect();
        self.named_params()
            .into_iter()
            .map(|(_, id)| id)
            .filter(|id| !per_function.contains(id))
            .collect()
    }
}

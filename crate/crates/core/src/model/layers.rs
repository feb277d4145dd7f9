//! Code-conditioned building blocks: modulated linear layers, the modulated
//! MLP and attention, and the LOC (attention + MLP with compatibility-
//! weighted residuals) they compose into.

use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::params::{ParamId, ParamStore, Session};
use crate::tensor::{Storage, Tensor, TensorError};

/// Epsilon guarding the routing and attention renormalizations.
pub const ROUTING_EPS: f64 = 1e-8;

pub(crate) fn uniform_init(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Storage {
    let limit = (1.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
    Storage::new(shape.to_vec(), data).expect("sized by shape")
}

pub(crate) fn normal_init(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Storage {
    let dist = Normal::new(0.0, std).expect("valid std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Storage::new(shape.to_vec(), data).expect("sized by shape")
}

/// Plain affine layer, weights stored `[d_out, d_in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, d_in: usize, d_out: usize) -> Self {
        Linear {
            w: store.add(uniform_init(rng, &[d_out, d_in], d_in), true),
            b: store.add(Storage::zeros(&[d_out]), true),
        }
    }

    pub fn apply(&self, sess: &Session, x: &Tensor) -> Result<Tensor, TensorError> {
        x.matmul_nt(&sess.p(self.w))?.add(&sess.p(self.b))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.w, self.b]
    }
}

/// Modulated linear layer: `y = W (x ⊗ LayerNorm(W_c c)) + b`. The
/// modulation is a normalized projection of the code onto the input
/// features, so the code programs which input channels the layer sees.
#[derive(Debug, Clone)]
pub struct ModLin {
    pub w: ParamId,    // [d_out, d_in]
    pub b: ParamId,    // [d_out]
    pub w_c: ParamId,  // [d_in, d_cond]
    pub ln_g: ParamId, // [d_in]
    pub ln_b: ParamId, // [d_in]
    d_in: usize,
}

impl ModLin {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        d_in: usize,
        d_out: usize,
        d_cond: usize,
    ) -> Self {
        ModLin {
            w: store.add(uniform_init(rng, &[d_out, d_in], d_in), true),
            b: store.add(Storage::zeros(&[d_out]), true),
            w_c: store.add(uniform_init(rng, &[d_in, d_cond], d_cond), true),
            ln_g: store.add(Storage::full(&[d_in], 1.0), true),
            ln_b: store.add(Storage::zeros(&[d_in]), true),
            d_in,
        }
    }

    /// Modulation vectors for a stack of codes: `[n_f, d_in]`.
    pub fn modulation(&self, sess: &Session, codes: &Tensor) -> Result<Tensor, TensorError> {
        codes
            .matmul_nt(&sess.p(self.w_c))?
            .layer_norm(&sess.p(self.ln_g), &sess.p(self.ln_b))
    }

    /// Applies the layer per function stream. `x` is `[.., n_f | 1, set, d_in]`
    /// (or lower rank broadcastable against `[n_f, 1, d_in]`); `codes` is
    /// `[n_f, d_cond]`.
    pub fn apply(&self, sess: &Session, x: &Tensor, codes: &Tensor) -> Result<Tensor, TensorError> {
        let n_f = codes.shape()[0];
        let m = self.modulation(sess, codes)?.reshape(&[n_f, 1, self.d_in])?;
        let modulated = x.mul(&m)?;
        modulated.matmul_nt(&sess.p(self.w))?.add(&sess.p(self.b))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.w, self.b, self.w_c, self.ln_g, self.ln_b]
    }
}

/// Two ModLin layers sharing one code, GELU between.
#[derive(Debug, Clone)]
pub struct ModMlp {
    pub l1: ModLin,
    pub l2: ModLin,
}

impl ModMlp {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, d: usize, d_cond: usize) -> Self {
        ModMlp {
            l1: ModLin::new(store, rng, d, d, d_cond),
            l2: ModLin::new(store, rng, d, d, d_cond),
        }
    }

    pub fn apply(&self, sess: &Session, x: &Tensor, codes: &Tensor) -> Result<Tensor, TensorError> {
        let h = self.l1.apply(sess, x, codes)?.gelu()?;
        self.l2.apply(sess, &h, codes)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.l1.param_ids();
        ids.extend(self.l2.param_ids());
        ids
    }
}

/// Kernel-modulated multi-head attention. Keys, queries and values come
/// from per-head ModLin layers conditioned on the function code; the
/// compatibility matrix gates which elements each stream may mix.
#[derive(Debug, Clone)]
pub struct ModAttn {
    pub query: Vec<ModLin>,
    pub key: Vec<ModLin>,
    pub value: Vec<ModLin>,
    pub out: ModLin,
    d_key: usize,
}

impl ModAttn {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        d: usize,
        d_key: usize,
        n_heads: usize,
        d_cond: usize,
    ) -> Self {
        // parameter creation order is the checkpoint walk order
        let query = (0..n_heads).map(|_| ModLin::new(store, rng, d, d_key, d_cond)).collect();
        let key = (0..n_heads).map(|_| ModLin::new(store, rng, d, d_key, d_cond)).collect();
        let value = (0..n_heads).map(|_| ModLin::new(store, rng, d, d_key, d_cond)).collect();
        let out = ModLin::new(store, rng, n_heads * d_key, d, d_cond);
        ModAttn {
            query,
            key,
            value,
            out,
            d_key,
        }
    }

    fn heads(
        &self,
        sess: &Session,
        layers: &[ModLin],
        x: &Tensor,
        codes: &Tensor,
    ) -> Result<Tensor, TensorError> {
        let n_f = codes.shape()[0];
        let mut stacked = Vec::with_capacity(layers.len());
        for layer in layers {
            let h = layer.apply(sess, x, codes)?;
            let s = h.shape().to_vec(); // [batch, n_f, set, d_key]
            stacked.push(h.reshape(&[s[0], n_f, 1, s[2], s[3]])?);
        }
        let refs: Vec<&Tensor> = stacked.iter().collect();
        Tensor::concat(&refs, 2)
    }

    /// `x` is `[batch, n_f | 1, set, d]`, `compat` is `[batch, n_f, set]`,
    /// `bias` (optional) is `[n_f, heads, set, set]` added to the logits.
    pub fn apply(
        &self,
        sess: &Session,
        x: &Tensor,
        codes: &Tensor,
        compat: &Tensor,
        bias: Option<&Tensor>,
    ) -> Result<Tensor, TensorError> {
        let (batch, n_f, set) = (compat.shape()[0], compat.shape()[1], compat.shape()[2]);
        let n_heads = self.query.len();
        let q = self.heads(sess, &self.query, x, codes)?; // [B, U, H, S, dk]
        let k = self.heads(sess, &self.key, x, codes)?;
        let v = self.heads(sess, &self.value, x, codes)?;
        let mut logits = q.matmul_nt(&k)?.mul_scalar(1.0 / (self.d_key as f64).sqrt())?;
        if let Some(bias) = bias {
            logits = logits.add(bias)?;
        }
        let attn = logits.softmax(4)?;
        let ci = compat.reshape(&[batch, n_f, 1, set, 1])?;
        let cj = compat.reshape(&[batch, n_f, 1, 1, set])?;
        let gated = attn.mul(&ci)?.mul(&cj)?;
        let row_sum = gated.sum_keepdim(4)?.add_scalar(ROUTING_EPS)?;
        let weights = gated.div(&row_sum)?;
        let mixed = weights.matmul(&v)?; // [B, U, H, S, dk]
        let folded = mixed
            .permute(&[0, 1, 3, 2, 4])?
            .reshape(&[batch, n_f, set, n_heads * self.d_key])?;
        self.out.apply(sess, &folded, codes)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for l in self.query.iter().chain(&self.key).chain(&self.value) {
            ids.extend(l.param_ids());
        }
        ids.extend(self.out.param_ids());
        ids
    }
}

/// One Line of Code: pre-normalized ModAttn and ModMLP with compatibility-
/// weighted residuals. A stream with zero compatibility passes its element
/// through untouched.
#[derive(Debug, Clone)]
pub struct Loc {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub attn: ModAttn,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub mlp: ModMlp,
}

impl Loc {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        d: usize,
        d_key: usize,
        n_heads: usize,
        d_cond: usize,
    ) -> Self {
        let ln1_g = store.add(Storage::full(&[d], 1.0), true);
        let ln1_b = store.add(Storage::zeros(&[d]), true);
        let attn = ModAttn::new(store, rng, d, d_key, n_heads, d_cond);
        let ln2_g = store.add(Storage::full(&[d], 1.0), true);
        let ln2_b = store.add(Storage::zeros(&[d]), true);
        let mlp = ModMlp::new(store, rng, d, d_cond);
        Loc {
            ln1_g,
            ln1_b,
            attn,
            ln2_g,
            ln2_b,
            mlp,
        }
    }

    pub fn apply(
        &self,
        sess: &Session,
        x: &Tensor,
        codes: &Tensor,
        compat: &Tensor,
        bias: Option<&Tensor>,
    ) -> Result<Tensor, TensorError> {
        let (batch, n_f, set) = (compat.shape()[0], compat.shape()[1], compat.shape()[2]);
        let cw = compat.reshape(&[batch, n_f, set, 1])?;
        let ln_x = x.layer_norm(&sess.p(self.ln1_g), &sess.p(self.ln1_b))?;
        let attn = self.attn.apply(sess, &ln_x, codes, compat, bias)?;
        let a = x.add(&cw.mul(&attn)?)?;
        let ln_a = a.layer_norm(&sess.p(self.ln2_g), &sess.p(self.ln2_b))?;
        let mlp = self.mlp.apply(sess, &ln_a, codes)?;
        a.add(&cw.mul(&mlp)?)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.ln1_g, self.ln1_b];
        ids.extend(self.attn.param_ids());
        ids.push(self.ln2_g);
        ids.push(self.ln2_b);
        ids.extend(self.mlp.param_ids());
        ids
    }
}

/// Per-function, per-head relative positional bias over a grid layout.
///
/// Each head carries a learned projection of the row/column difference
/// embeddings, and each function adds its own code-conditioned projection;
/// the two sum into a scalar bias per (Δrow, Δcol) added to the attention
/// logits of grid-role pairs.
#[derive(Debug, Clone)]
pub struct PosBias {
    pub e_row: ParamId, // [2*rows-1, d_pos]
    pub e_col: ParamId, // [2*cols-1, d_pos]
    pub w_row: ParamId, // [heads, d_pos]
    pub w_col: ParamId, // [heads, d_pos]
    pub row_mod: Vec<ModLin>,
    pub col_mod: Vec<ModLin>,
    rows: usize,
    cols: usize,
}

impl PosBias {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        rows: usize,
        cols: usize,
        d_pos: usize,
        n_heads: usize,
        d_cond: usize,
    ) -> Self {
        let e_row = store.add(normal_init(rng, &[2 * rows - 1, d_pos], 0.02), true);
        let e_col = store.add(normal_init(rng, &[2 * cols - 1, d_pos], 0.02), true);
        let w_row = store.add(uniform_init(rng, &[n_heads, d_pos], d_pos), true);
        let w_col = store.add(uniform_init(rng, &[n_heads, d_pos], d_pos), true);
        let row_mod = (0..n_heads).map(|_| ModLin::new(store, rng, d_pos, 1, d_cond)).collect();
        let col_mod = (0..n_heads).map(|_| ModLin::new(store, rng, d_pos, 1, d_cond)).collect();
        PosBias {
            e_row,
            e_col,
            w_row,
            w_col,
            row_mod,
            col_mod,
            rows,
            cols,
        }
    }

    /// Bias table along one axis: `[n_f, heads, n_delta]`.
    fn axis_table(
        &self,
        sess: &Session,
        embed: ParamId,
        head_w: ParamId,
        mods: &[ModLin],
        codes: &Tensor,
    ) -> Result<Tensor, TensorError> {
        let e = sess.p(embed); // [n_delta, d_pos]
        let n_delta = e.shape()[0];
        let n_f = codes.shape()[0];
        // per-head shared term: [n_delta, heads] -> [1, heads, n_delta]
        let shared = e.matmul_nt(&sess.p(head_w))?.permute(&[1, 0])?.reshape(&[
            1,
            mods.len(),
            n_delta,
        ])?;
        // per-function term from the code-conditioned ModLins
        let mut per_head = Vec::with_capacity(mods.len());
        for m in mods {
            let p = m.apply(sess, &e, codes)?; // [n_f, n_delta, 1]
            per_head.push(p.reshape(&[n_f, 1, n_delta])?);
        }
        let refs: Vec<&Tensor> = per_head.iter().collect();
        let fn_term = Tensor::concat(&refs, 1)?; // [n_f, heads, n_delta]
        fn_term.add(&shared)
    }

    /// Bias tensor `[n_f, heads, set, set]` for the given element
    /// coordinates; entries touching a non-grid element are zero.
    pub fn bias(
        &self,
        sess: &Session,
        codes: &Tensor,
        coords: &[Option<(usize, usize)>],
    ) -> Result<Tensor, TensorError> {
        let set = coords.len();
        let n_f = codes.shape()[0];
        let n_heads = self.row_mod.len();
        let row_table = self.axis_table(sess, self.e_row, self.w_row, &self.row_mod, codes)?;
        let col_table = self.axis_table(sess, self.e_col, self.w_col, &self.col_mod, codes)?;
        let mut row_idx = Vec::with_capacity(set * set);
        let mut col_idx = Vec::with_capacity(set * set);
        let mut mask = Vec::with_capacity(set * set);
        for i in coords {
            for j in coords {
                match (i, j) {
                    (Some((ri, ci)), Some((rj, cj))) => {
                        row_idx.push((ri + self.rows - 1) - rj);
                        col_idx.push((ci + self.cols - 1) - cj);
                        mask.push(1.0);
                    }
                    _ => {
                        row_idx.push(0);
                        col_idx.push(0);
                        mask.push(0.0);
                    }
                }
            }
        }
        let rows = row_table.index_select(2, &row_idx)?; // [n_f, heads, set*set]
        let cols = col_table.index_select(2, &col_idx)?;
        let mask = sess
            .tape
            .constant(Storage::new(vec![set * set], mask).expect("sized above"));
        rows.add(&cols)?
            .mul(&mask)?
            .reshape(&[n_f, n_heads, set, set])
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.e_row, self.e_col, self.w_row, self.w_col];
        for m in self.row_mod.iter().chain(&self.col_mod) {
            ids.extend(m.param_ids());
        }
        ids
    }
}

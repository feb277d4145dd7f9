//! Primitive tensor operations with their backward rules.
//!
//! Every op validates shapes, computes the forward value, checks it for
//! non-finite entries and records a closure that routes the output gradient
//! to the inputs. Backward closures capture plain value buffers
//! (`Rc<Storage>`), never tensor handles, so a dropped tape frees the pass.

use std::rc::Rc;

use super::storage::{
    broadcast_binary, broadcast_shapes, for_each_lane, gemm_broadcast, matmul_out_shape,
    reduce_to_shape, row_major_strides, Storage,
};
use super::tape::Tensor;
use super::TensorError;

/// Epsilon inside layer normalization's variance denominator.
pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_COEF: f64 = 0.044715;

fn sqrt_2_over_pi() -> f64 {
    (2.0 / std::f64::consts::PI).sqrt()
}

impl Tensor {
    // ── elementwise binary ──────────────────────────────────────────────

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        self.binary(rhs, "add", |a, b| a + b, |g, _a, _b, sa, sb, emit| {
            emit(0, reduce_to_shape(g, sa));
            emit(1, reduce_to_shape(g, sb));
        })
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        self.binary(rhs, "sub", |a, b| a - b, |g, _a, _b, sa, sb, emit| {
            emit(0, reduce_to_shape(g, sa));
            emit(1, reduce_to_shape(&g.map(|v| -v), sb));
        })
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        self.binary(rhs, "mul", |a, b| a * b, |g, a, b, sa, sb, emit| {
            let da = broadcast_binary(g, b, "mul_back", |gv, bv| gv * bv).expect("forward-checked shapes");
            emit(0, reduce_to_shape(&da, sa));
            let db = broadcast_binary(g, a, "mul_back", |gv, av| gv * av).expect("forward-checked shapes");
            emit(1, reduce_to_shape(&db, sb));
        })
    }

    pub fn div(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        if rhs.value().data().iter().any(|&v| v == 0.0) {
            return Err(TensorError::DivisionByZero { op: "div" });
        }
        self.binary(rhs, "div", |a, b| a / b, |g, a, b, sa, sb, emit| {
            let da = broadcast_binary(g, b, "div_back", |gv, bv| gv / bv).expect("forward-checked shapes");
            emit(0, reduce_to_shape(&da, sa));
            let ga = broadcast_binary(g, a, "div_back", |gv, av| gv * av).expect("forward-checked shapes");
            let db = broadcast_binary(&ga, b, "div_back", |v, bv| -v / (bv * bv))
                .expect("forward-checked shapes");
            emit(1, reduce_to_shape(&db, sb));
        })
    }

    #[allow(clippy::type_complexity)]
    fn binary(
        &self,
        rhs: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        back: impl Fn(&Storage, &Storage, &Storage, &[usize], &[usize], &mut dyn FnMut(usize, Storage))
            + 'static,
    ) -> Result<Tensor, TensorError> {
        self.check_same_tape(rhs)?;
        let out = broadcast_binary(self.value(), rhs.value(), op, f)?;
        let requires = self.requires_grad() || rhs.requires_grad();
        let ids = [self.id, rhs.id];
        let (a, b) = (Rc::clone(&self.value), Rc::clone(&rhs.value));
        self.tape.record(
            op,
            out,
            requires,
            requires.then(|| {
                Box::new(move |g: &Storage, emit: &mut dyn FnMut(usize, Storage)| {
                    back(g, &a, &b, a.shape(), b.shape(), &mut |slot, grad| {
                        emit(ids[slot], grad)
                    });
                }) as super::tape::BackFn
            }),
        )
    }

    // ── elementwise with a scalar ───────────────────────────────────────

    pub fn add_scalar(&self, c: f64) -> Result<Tensor, TensorError> {
        self.unary("add_scalar", |x| x + c, move |g, _x| g.clone())
    }

    pub fn mul_scalar(&self, c: f64) -> Result<Tensor, TensorError> {
        self.unary("mul_scalar", move |x| x * c, move |g, _x| g.map(|v| v * c))
    }

    /// `c - x`.
    pub fn rsub_scalar(&self, c: f64) -> Result<Tensor, TensorError> {
        self.unary("rsub_scalar", move |x| c - x, |g, _x| g.map(|v| -v))
    }

    pub fn neg(&self) -> Result<Tensor, TensorError> {
        self.unary("neg", |x| -x, |g, _x| g.map(|v| -v))
    }

    pub fn exp(&self) -> Result<Tensor, TensorError> {
        self.check_same_tape(self)?;
        let out = self.value().map(f64::exp);
        let requires = self.requires_grad();
        let id = self.id;
        let out_rc = Rc::new(out);
        let captured = Rc::clone(&out_rc);
        let back = requires.then(|| {
            Box::new(move |g: &Storage, emit: &mut dyn FnMut(usize, Storage)| {
                let mut dx = g.clone();
                for (d, y) in dx.data_mut().iter_mut().zip(captured.data()) {
                    *d *= *y;
                }
                emit(id, dx);
            }) as super::tape::BackFn
        });
        let value = Rc::try_unwrap(out_rc).unwrap_or_else(|rc| (*rc).clone());
        self.tape.record("exp", value, requires, back)
    }

    fn unary(
        &self,
        op: &'static str,
        f: impl Fn(f64) -> f64,
        back: impl Fn(&Storage, &Storage) -> Storage + 'static,
    ) -> Result<Tensor, TensorError> {
        let out = self.value().map(f);
        let requires = self.requires_grad();
        let id = self.id;
        let x = Rc::clone(&self.value);
        self.tape.record(
            op,
            out,
            requires,
            requires.then(|| {
                Box::new(move |g: &Storage, emit: &mut dyn FnMut(usize, Storage)| {
                    emit(id, back(g, &x));
                }) as super::tape::BackFn
            }),
        )
    }

    // ── matmul ──────────────────────────────────────────────────────────

    /// Batched matrix product over the last two axes; leading axes broadcast.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        self.matmul_impl(rhs, false)
    }

    /// `self · rhsᵀ` where `rhs` is stored `[.., n, k]`. Saves the explicit
    /// transpose for weight matrices and attention logits.
    pub fn matmul_nt(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        self.matmul_impl(rhs, true)
    }

    fn matmul_impl(&self, rhs: &Tensor, nt: bool) -> Result<Tensor, TensorError> {
        self.check_same_tape(rhs)?;
        let op: &'static str = if nt { "matmul_nt" } else { "matmul" };
        let out_shape = matmul_out_shape(self.value(), false, rhs.value(), nt, op)?;
        let mut out = Storage::zeros(&out_shape);
        gemm_broadcast(self.value(), false, rhs.value(), nt, &mut out, op)?;
        let need_a = self.requires_grad();
        let need_b = rhs.requires_grad();
        let requires = need_a || need_b;
        let ids = [self.id, rhs.id];
        let (a, b) = (Rc::clone(&self.value), Rc::clone(&rhs.value));
        self.tape.record(
            op,
            out,
            requires,
            requires.then(|| {
                Box::new(move |g: &Storage, emit: &mut dyn FnMut(usize, Storage)| {
                    if need_a {
                        let mut da = Storage::zeros(a.shape());
                        if nt {
                            // y = a·bᵀ: da = g·b
                            gemm_broadcast(g, false, &b, false, &mut da, "matmul_nt_back").unwrap();
                        } else {
                            // y = a·b: da = g·bᵀ
                            gemm_broadcast(g, false, &b, true, &mut da, "matmul_back").unwrap();
                        }
                        emit(ids[0], da);
                    }
                    if need_b {
                        let mut db = Storage::zeros(b.shape());
                        if nt {
                            // db = gᵀ·a
                            gemm_broadcast(g, true, &a, false, &mut db, "matmul_nt_back").unwrap();
                        } else {
                            // db = aᵀ·g
                            gemm_broadcast(&a, true, g, false, &mut db, "matmul_back").unwrap();
                        }
                        emit(ids[1], db);
                    }
                }) as super::tape::BackFn
            }),
        )
    }

    // ── reductions ──────────────────────────────────────────────────────

    /// Sum over one axis (removing it) or over all elements (`None`).
    pub fn sum(&self, axis: Option<usize>) -> Result<Tensor, TensorError> {
        self.reduce(axis, "sum", false)
    }

    pub fn mean(&self, axis: Option<usize>) -> Result<Tensor, TensorError> {
        self.reduce(axis, "mean", true)
    }

    /// Sum over `axis` keeping it as a size-1 dimension.
    pub fn sum_keepdim(&self, axis: usize) -> Result<Tensor, TensorError> {
        let mut shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis {
                axis,
                rank: shape.len(),
            });
        }
        shape[axis] = 1;
        self.sum(Some(axis))?.reshape(&shape)
    }

    fn reduce(&self, axis: Option<usize>, op: &'static str, mean: bool) -> Result<Tensor, TensorError> {
        let in_shape = self.shape().to_vec();
        let (out, count) = match axis {
            None => {
                let total: f64 = self.value().data().iter().sum();
                let n = self.numel() as f64;
                (Storage::scalar(if mean { total / n } else { total }), self.numel())
            }
            Some(ax) => {
                if ax >= in_shape.len() {
                    return Err(TensorError::InvalidAxis {
                        axis: ax,
                        rank: in_shape.len(),
                    });
                }
                let mut out_shape: Vec<usize> = in_shape.clone();
                out_shape.remove(ax);
                if out_shape.is_empty() {
                    out_shape.push(1);
                }
                let mut out = Storage::zeros(&out_shape);
                let lane = in_shape[ax];
                let data = self.value().data();
                {
                    let out_data = out.data_mut();
                    let mut slot = 0usize;
                    for_each_lane(&in_shape, ax, |base, stride| {
                        let mut acc = 0.0;
                        for l in 0..lane {
                            acc += data[base + l * stride];
                        }
                        out_data[slot] = if mean { acc / lane as f64 } else { acc };
                        slot += 1;
                    });
                }
                (out, lane)
            }
        };
        let requires = self.requires_grad();
        let id = self.id;
        let scale = if mean { 1.0 / count as f64 } else { 1.0 };
        self.tape.record(
            op,
            out,
            requires,
            requires.then(|| {
                Box::new(move |g: &Storage, emit: &mut dyn FnMut(usize, Storage)| {
                    let mut dx = Storage::zeros(&in_shape);
                    match axis {
                        None => {
                            let gv = g.item() * scale;
                            dx.data_mut().iter_mut().for_each(|v| *v = gv);
                        }
                        Some(ax) => {
                            let lane = in_shape[ax];
                            let gd = g.data();
                            let dd = dx.data_mut();
                            let mut slot = 0usize;
                            for_each_lane(&in_shape, ax, |base, stride| {
                                let gv = gd[slot] * scale;
                                for l in 0..lane {
                                    dd[base + l * stride] = gv;
                                }
                                slot += 1;
                            });
                        }
                    }
                    emit(id, dx);
                }) as super::tape::BackFn
            }),
        )
    }

    // ── normalization and activations ───────────────────────────────────

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor, TensorError> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis {
                axis,
                rank: shape.len(),
            });
        }
        let lane = shape[axis];
        let mut out = Storage::zeros(&shape);
        {
            let x = self.value().data();
            let y = out.data_mut();
            for_each_lane(&shape, axis, |base, stride| {
                let mut max = f64::NEG_INFINITY;
                for l in 0..lane {
                    max = max.max(x[base + l * stride]);
                }
                let mut total = 0.0;
                for l in 0..lane {
                    let e = (x[base + l * stride] - max).exp();
                    y[base + l * stride] = e;
                    total += e;
                }
                for l in 0..lane {
                    y[base + l * stride] /= total;
                }
            });
        }
        let requires = self.requires_grad();
        let id = self.id;
        let out_rc = Rc::new(out);
        let captured = Rc::clone(&out_rc);
        let back = requires.then(|| {
            Box::new(move |g: &Storage, emit: &mut dyn FnMut(usize, Storage)| {
                let s = captured.data();
                let gd = g.data();
                let mut dx = Storage::zeros(captured.shape());
                let dd = dx.data_mut();
                for_each_lane(captured.shape(), axis, |base, stride| {
                    let mut dot = 0.0;
                    for l in 0..lane {
                        let i = base + l * stride;
                        dot += gd[i] * s[i];
                    }
                    for l in 0..lane {
                        let i = base + l * stride;
                        dd[i] = s[i] * (gd[i] - dot);
                    }
                });
                emit(id, dx);
            }) as super::tape::BackFn
        });
        let value = Rc::try_unwrap(out_rc).unwrap_or_else(|rc| (*rc).clone());
        self.tape.record("softmax", value, requires, back)
    }

    /// Layer normalization over the last axis with learnable affine:
    /// `y = gamma ⊗ (x − μ) / sqrt(σ² + ε) + beta`, biased variance.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor) -> Result<Tensor, TensorError> {
        self.check_same_tape(gamma)?;
        self.check_same_tape(beta)?;
        let shape = self.shape().to_vec();
        let n = *shape.last().ok_or(TensorError::InvalidAxis { axis: 0, rank: 0 })?;
        if gamma.shape() != [n] || beta.shape() != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: gamma.shape().to_vec(),
            });
        }
        let rows = self.numel() / n;
        let mut out = Storage::zeros(&shape);
        let mut xhat = Storage::zeros(&shape);
        let mut inv_std = vec![0.0f64; rows];
        {
            let x = self.value().data();
            let gm = gamma.value().data();
            let bt = beta.value().data();
            let y = out.data_mut();
            let xh = xhat.data_mut();
            for r in 0..rows {
                let base = r * n;
                let row = &x[base..base + n];
                let mu = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
                let istd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                inv_std[r] = istd;
                for i in 0..n {
                    let h = (row[i] - mu) * istd;
                    xh[base + i] = h;
                    y[base + i] = gm[i] * h + bt[i];
                }
            }
        }
        let requires = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        let ids = [self.id, gamma.id, beta.id];
        let gamma_v = Rc::clone(&gamma.value);
        let xhat = Rc::new(xhat);
        let xhat_c = Rc::clone(&xhat);
        let back = requires.then(|| {
            Box::new(move |g: &Storage, emit: &mut dyn FnMut(usize, Storage)| {
                let gd = g.data();
                let xh = xhat_c.data();
                let gm = gamma_v.data();
                let mut dgamma = Storage::zeros(&[n]);
                let mut dbeta = Storage::zeros(&[n]);
                let mut dx = Storage::zeros(xhat_c.shape());
                {
                    let dgm = dgamma.data_mut();
                    let dbt = dbeta.data_mut();
                    let dxd = dx.data_mut();
                    for r in 0..rows {
                        let base = r * n;
                        let mut mean_gy = 0.0;
                        let mut mean_gyxh = 0.0;
                        for i in 0..n {
                            let gy = gd[base + i] * gm[i];
                            mean_gy += gy;
                            mean_gyxh += gy * xh[base + i];
                            dgm[i] += gd[base + i] * xh[base + i];
                            dbt[i] += gd[base + i];
                        }
                        mean_gy /= n as f64;
                        mean_gyxh /= n as f64;
                        for i in 0..n {
                            let gy = gd[base + i] * gm[i];
                            dxd[base + i] = (gy - mean_gy - xh[base + i] * mean_gyxh) * inv_std[r];
                        }
                    }
                }
                emit(ids[0], dx);
                emit(ids[1], dgamma);
                emit(ids[2], dbeta);
            }) as super::tape::BackFn
        });
        self.tape.record("layer_norm", out, requires, back)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Result<Tensor, TensorError> {
        let c = sqrt_2_over_pi();
        self.unary(
            "gelu",
            move |x| 0.5 * x * (1.0 + (c * (x + GELU_COEF * x * x * x)).tanh()),
            move |g, x| {
                let mut dx = g.clone();
                for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
                    let u = c * (v + GELU_COEF * v * v * v);
                    let t = u.tanh();
                    let du = c * (1.0 + 3.0 * GELU_COEF * v * v);
                    *d *= 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
                }
                dx
            },
        )
    }

    /// Scales the last axis to unit Euclidean norm.
    pub fn l2_normalize(&self) -> Result<Tensor, TensorError> {
        let shape = self.shape().to_vec();
        let n = *shape.last().ok_or(TensorError::InvalidAxis { axis: 0, rank: 0 })?;
        let rows = self.numel() / n;
        let mut out = Storage::zeros(&shape);
        let mut norms = vec![0.0f64; rows];
        {
            let x = self.value().data();
            let y = out.data_mut();
            for r in 0..rows {
                let base = r * n;
                let norm = x[base..base + n].iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm == 0.0 {
                    return Err(TensorError::ZeroNorm);
                }
                norms[r] = norm;
                for i in 0..n {
                    y[base + i] = x[base + i] / norm;
                }
            }
        }
        let requires = self.requires_grad();
        let id = self.id;
        let out_rc = Rc::new(out);
        let captured = Rc::clone(&out_rc);
        let back = requires.then(|| {
            Box::new(move |g: &Storage, emit: &mut dyn FnMut(usize, Storage)| {
                let yd = captured.data();
                let gd = g.data();
                let mut dx = Storage::zeros(captured.shape());
                let dd = dx.data_mut();
                for r in 0..rows {
                    let base = r * n;
                    let mut dot = 0.0;
                    for i in 0..n {
                        dot += yd[base + i] * gd[base + i];
                    }
                    for i in 0..n {
                        dd[base + i] = (gd[base + i] - yd[base + i] * dot) / norms[r];
                    }
                }
                emit(id, dx);
            }) as super::tape::BackFn
        });
        let value = Rc::try_unwrap(out_rc).unwrap_or_else(|rc| (*rc).clone());
        self.tape.record("l2_normalize", value, requires, back)
    }

    // ── shape plumbing ──────────────────────────────────────────────────

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor, TensorError> {
        let out = self.value().clone().reshaped(shape)?;
        let requires = self.requires_grad();
        let id = self.id;
        let in_shape = self.shape().to_vec();
        self.tape.record(
            "reshape",
            out,
            requires,
            requires.then(|| {
                Box::new(move |g: &Storage, emit: &mut dyn FnMut(usize, Storage)| {
                    emit(id, g.clone().reshaped(&in_shape).expect("same numel"));
                }) as super::tape::BackFn
            }),
        )
    }

    /// Reorders axes; `perm` is a permutation of `0..ndim`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor, TensorError> {
        let nd = self.ndim();
        let mut seen = vec![false; nd];
        if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::BadPermutation {
                perm: perm.to_vec(),
                rank: nd,
            });
        }
        let out = permute_storage(self.value(), perm);
        let requires = self.requires_grad();
        let id = self.id;
        let mut inverse = vec![0usize; nd];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        self.tape.record(
            "permute",
            out,
            requires,
            requires.then(|| {
                Box::new(move |g: &Storage, emit: &mut dyn FnMut(usize, Storage)| {
                    emit(id, permute_storage(g, &inverse));
                }) as super::tape::BackFn
            }),
        )
    }

    /// Materializes this tensor broadcast to `shape` (trailing rule).
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor, TensorError> {
        let merged = broadcast_shapes(self.shape(), shape, "broadcast_to")?;
        if merged != shape {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast_to",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let zeros = self.tape.constant(Storage::zeros(shape));
        // add-with-zeros performs the stretch and its gradient reduction
        self.add(&zeros)
    }

    /// Contiguous sub-range along one axis.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor, TensorError> {
        let in_shape = self.shape().to_vec();
        if axis >= in_shape.len() {
            return Err(TensorError::InvalidAxis {
                axis,
                rank: in_shape.len(),
            });
        }
        if start + len > in_shape[axis] || len == 0 {
            return Err(TensorError::BadSlice {
                axis,
                start,
                len,
                dim: in_shape[axis],
            });
        }
        let mut out_shape = in_shape.clone();
        out_shape[axis] = len;
        let inner: usize = in_shape[axis + 1..].iter().product();
        let outer: usize = in_shape[..axis].iter().product();
        let mut out = Storage::zeros(&out_shape);
        {
            let x = self.value().data();
            let y = out.data_mut();
            for o in 0..outer {
                let src = o * in_shape[axis] * inner + start * inner;
                let dst = o * len * inner;
                y[dst..dst + len * inner].copy_from_slice(&x[src..src + len * inner]);
            }
        }
        let requires = self.requires_grad();
        let id = self.id;
        self.tape.record(
            "slice",
            out,
            requires,
            requires.then(|| {
                Box::new(move |g: &Storage, emit: &mut dyn FnMut(usize, Storage)| {
                    let mut dx = Storage::zeros(&in_shape);
                    let gd = g.data();
                    let dd = dx.data_mut();
                    for o in 0..outer {
                        let dst = o * in_shape[axis] * inner + start * inner;
                        let src = o * len * inner;
                        dd[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
                    }
                    emit(id, dx);
                }) as super::tape::BackFn
            }),
        )
    }

    /// Gathers `indices` along `axis`; indices may repeat.
    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Result<Tensor, TensorError> {
        let in_shape = self.shape().to_vec();
        if axis >= in_shape.len() {
            return Err(TensorError::InvalidAxis {
                axis,
                rank: in_shape.len(),
            });
        }
        let dim = in_shape[axis];
        if let Some(&bad) = indices.iter().find(|&&i| i >= dim) {
            return Err(TensorError::BadIndex { index: bad, dim });
        }
        let indices = indices.to_vec();
        let mut out_shape = in_shape.clone();
        out_shape[axis] = indices.len();
        let inner: usize = in_shape[axis + 1..].iter().product();
        let outer: usize = in_shape[..axis].iter().product();
        let mut out = Storage::zeros(&out_shape);
        {
            let x = self.value().data();
            let y = out.data_mut();
            for o in 0..outer {
                let src_block = o * dim * inner;
                let dst_block = o * indices.len() * inner;
                for (j, &idx) in indices.iter().enumerate() {
                    let src = src_block + idx * inner;
                    let dst = dst_block + j * inner;
                    y[dst..dst + inner].copy_from_slice(&x[src..src + inner]);
                }
            }
        }
        let requires = self.requires_grad();
        let id = self.id;
        self.tape.record(
            "index_select",
            out,
            requires,
            requires.then(|| {
                Box::new(move |g: &Storage, emit: &mut dyn FnMut(usize, Storage)| {
                    let mut dx = Storage::zeros(&in_shape);
                    let gd = g.data();
                    let dd = dx.data_mut();
                    for o in 0..outer {
                        let dst_block = o * dim * inner;
                        let src_block = o * indices.len() * inner;
                        for (j, &idx) in indices.iter().enumerate() {
                            let dst = dst_block + idx * inner;
                            let src = src_block + j * inner;
                            for i in 0..inner {
                                dd[dst + i] += gd[src + i];
                            }
                        }
                    }
                    emit(id, dx);
                }) as super::tape::BackFn
            }),
        )
    }

    /// Concatenates tensors along `axis`; all other dims must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor, TensorError> {
        let first = parts.first().ok_or(TensorError::EmptyConcat)?;
        let base_shape = first.shape().to_vec();
        if axis >= base_shape.len() {
            return Err(TensorError::InvalidAxis {
                axis,
                rank: base_shape.len(),
            });
        }
        let mut axis_total = 0usize;
        for p in parts.iter() {
            first.check_same_tape(p)?;
            let s = p.shape();
            if s.len() != base_shape.len()
                || s.iter()
                    .zip(base_shape.iter())
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base_shape.clone(),
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = base_shape.clone();
        out_shape[axis] = axis_total;
        let inner: usize = base_shape[axis + 1..].iter().product();
        let outer: usize = base_shape[..axis].iter().product();
        let part_lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let mut out = Storage::zeros(&out_shape);
        {
            let y = out.data_mut();
            for o in 0..outer {
                let mut cursor = o * axis_total * inner;
                for (p, &plen) in parts.iter().zip(part_lens.iter()) {
                    let x = p.value().data();
                    let src = o * plen * inner;
                    y[cursor..cursor + plen * inner].copy_from_slice(&x[src..src + plen * inner]);
                    cursor += plen * inner;
                }
            }
        }
        let requires = parts.iter().any(|p| p.requires_grad());
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape().to_vec()).collect();
        first.tape.record(
            "concat",
            out,
            requires,
            requires.then(|| {
                Box::new(move |g: &Storage, emit: &mut dyn FnMut(usize, Storage)| {
                    let gd = g.data();
                    for (pi, shape) in shapes.iter().enumerate() {
                        let plen = shape[axis];
                        let mut dx = Storage::zeros(shape);
                        {
                            let dd = dx.data_mut();
                            let offset: usize = part_lens[..pi].iter().sum();
                            for o in 0..outer {
                                let src = (o * axis_total + offset) * inner;
                                let dst = o * plen * inner;
                                dd[dst..dst + plen * inner]
                                    .copy_from_slice(&gd[src..src + plen * inner]);
                            }
                        }
                        emit(ids[pi], dx);
                    }
                }) as super::tape::BackFn
            }),
        )
    }
}

fn permute_storage(x: &Storage, perm: &[usize]) -> Storage {
    let in_shape = x.shape();
    let nd = in_shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let in_strides = row_major_strides(in_shape);
    let src_strides: Vec<isize> = perm.iter().map(|&p| in_strides[p] as isize).collect();
    let mut out = Storage::zeros(&out_shape);
    let xd = x.data();

    // axes fixed at the tail stay contiguous: move whole chunks
    let mut split = nd;
    let mut chunk = 1usize;
    while split > 0 && perm[split - 1] == split - 1 && in_shape[split - 1] == out_shape[split - 1] {
        chunk *= out_shape[split - 1];
        split -= 1;
    }
    if chunk > 1 {
        let yd = out.data_mut();
        let mut idx = vec![0usize; split];
        let mut src = 0isize;
        for dst in yd.chunks_mut(chunk) {
            dst.copy_from_slice(&xd[src as usize..src as usize + chunk]);
            for d in (0..split).rev() {
                idx[d] += 1;
                src += src_strides[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                idx[d] = 0;
                src -= src_strides[d] * out_shape[d] as isize;
            }
        }
        return out;
    }

    let numel = x.numel();
    {
        let yd = out.data_mut();
        let mut idx = vec![0usize; nd];
        let mut src = 0isize;
        for item in yd.iter_mut().take(numel) {
            *item = xd[src as usize];
            for d in (0..nd).rev() {
                idx[d] += 1;
                src += src_strides[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                idx[d] = 0;
                src -= src_strides[d] * out_shape[d] as isize;
            }
        }
    }
    out
}


//! Dense row-major storage for 64-bit float tensors, plus the shape
//! arithmetic (broadcasting, lane iteration, GEMM dispatch) shared by the
//! tape operations.

use super::TensorError;

/// A dense n-dimensional array of f64 in row-major order.
///
/// `Storage` carries no autodiff state; it is the value type held by tape
/// nodes, parameters and gradients alike.
#[derive(Debug, Clone, PartialEq)]
pub struct Storage {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Storage {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                len: data.len(),
            });
        }
        Ok(Storage { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Storage {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Storage {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Storage {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Storage {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Single element of a scalar (or one-element) storage.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(TensorError::BadReshape {
                from: self.shape,
                to: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Storage {
        Storage {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// In-place `self += other`; shapes must match exactly.
    pub fn add_assign(&mut self, other: &Storage) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
    }

    /// Row-major strides of this shape.
    pub fn strides(&self) -> Vec<usize> {
        row_major_strides(&self.shape)
    }
}

pub fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Broadcast shape of `a` and `b` under the trailing-dimension rule: shapes
/// are right-aligned and size-1 dimensions stretch.
pub fn broadcast_shapes(a: &[usize], b: &[usize], op: &'static str) -> Result<Vec<usize>, TensorError> {
    let nd = a.len().max(b.len());
    let mut out = vec![0usize; nd];
    for i in 0..nd {
        let da = if i < nd - a.len() { 1 } else { a[i - (nd - a.len())] };
        let db = if i < nd - b.len() { 1 } else { b[i - (nd - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

/// Strides of `shape` right-aligned into an `nd`-dim frame, with stride 0 on
/// broadcast (size-1 or missing) dimensions.
pub fn broadcast_strides(shape: &[usize], nd: usize) -> Vec<isize> {
    let own = row_major_strides(shape);
    let mut out = vec![0isize; nd];
    let offset = nd - shape.len();
    for i in 0..shape.len() {
        out[offset + i] = if shape[i] == 1 { 0 } else { own[i] as isize };
    }
    out
}

/// Elementwise combine with broadcasting. Shapes follow the trailing rule.
pub fn broadcast_binary(
    a: &Storage,
    b: &Storage,
    op: &'static str,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Storage, TensorError> {
    if a.shape == b.shape {
        let data = a
            .data
            .iter()
            .zip(b.data.iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Ok(Storage {
            shape: a.shape.clone(),
            data,
        });
    }
    if b.numel() == 1 {
        let y = b.data[0];
        return Ok(a.map(|x| f(x, y)));
    }
    if a.numel() == 1 {
        let x = a.data[0];
        return Ok(b.map(|y| f(x, y)));
    }
    let out_shape = broadcast_shapes(&a.shape, &b.shape, op)?;
    let nd = out_shape.len();
    let sa = broadcast_strides(&a.shape, nd);
    let sb = broadcast_strides(&b.shape, nd);
    let numel: usize = out_shape.iter().product();
    let mut data = vec![0.0; numel];

    // Trailing block where neither side broadcasts is contiguous in both.
    let mut split = nd;
    let mut inner = 1usize;
    while split > 0 && sa[split - 1] != 0 && sb[split - 1] != 0 {
        inner *= out_shape[split - 1];
        split -= 1;
    }

    if inner > 1 {
        let mut idx = vec![0usize; split];
        let (mut ao, mut bo) = (0usize, 0usize);
        for chunk in data.chunks_mut(inner) {
            let av = &a.data[ao..ao + inner];
            let bv = &b.data[bo..bo + inner];
            for ((o, &x), &y) in chunk.iter_mut().zip(av).zip(bv) {
                *o = f(x, y);
            }
            for d in (0..split).rev() {
                idx[d] += 1;
                ao = (ao as isize + sa[d]) as usize;
                bo = (bo as isize + sb[d]) as usize;
                if idx[d] < out_shape[d] {
                    break;
                }
                idx[d] = 0;
                ao = (ao as isize - sa[d] * out_shape[d] as isize) as usize;
                bo = (bo as isize - sb[d] * out_shape[d] as isize) as usize;
            }
        }
        return Ok(Storage {
            shape: out_shape,
            data,
        });
    }

    // One side constant over the last axis: lift the scalar out of the loop.
    if nd > 0 && (sa[nd - 1] == 0) != (sb[nd - 1] == 0) {
        let span = out_shape[nd - 1];
        let a_scalar = sa[nd - 1] == 0;
        let mut idx = vec![0usize; nd - 1];
        let (mut ao, mut bo) = (0usize, 0usize);
        for chunk in data.chunks_mut(span) {
            if a_scalar {
                let x = a.data[ao];
                for (o, &y) in chunk.iter_mut().zip(&b.data[bo..bo + span]) {
                    *o = f(x, y);
                }
            } else {
                let y = b.data[bo];
                for (o, &x) in chunk.iter_mut().zip(&a.data[ao..ao + span]) {
                    *o = f(x, y);
                }
            }
            for d in (0..nd - 1).rev() {
                idx[d] += 1;
                ao = (ao as isize + sa[d]) as usize;
                bo = (bo as isize + sb[d]) as usize;
                if idx[d] < out_shape[d] {
                    break;
                }
                idx[d] = 0;
                ao = (ao as isize - sa[d] * out_shape[d] as isize) as usize;
                bo = (bo as isize - sb[d] * out_shape[d] as isize) as usize;
            }
        }
        return Ok(Storage {
            shape: out_shape,
            data,
        });
    }

    let mut idx = vec![0usize; nd];
    let (mut ao, mut bo) = (0isize, 0isize);
    for out in data.iter_mut() {
        *out = f(a.data[ao as usize], b.data[bo as usize]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            ao += sa[d];
            bo += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            ao -= sa[d] * out_shape[d] as isize;
            bo -= sb[d] * out_shape[d] as isize;
        }
    }
    Ok(Storage {
        shape: out_shape,
        data,
    })
}

/// Sum `grad` down to `target_shape` (undoing broadcast stretching). The
/// target is right-aligned against the gradient's shape.
pub fn reduce_to_shape(grad: &Storage, target_shape: &[usize]) -> Storage {
    if grad.shape == target_shape {
        return grad.clone();
    }
    let nd = grad.shape.len();
    let st = broadcast_strides(target_shape, nd);
    let numel: usize = target_shape.iter().product();
    let mut data = vec![0.0; numel];

    let mut split = nd;
    let mut inner = 1usize;
    while split > 0 && st[split - 1] != 0 {
        inner *= grad.shape[split - 1];
        split -= 1;
    }

    if inner > 1 {
        // target is contiguous over the trailing block: chunked adds
        let mut idx = vec![0usize; split];
        let mut to = 0usize;
        for chunk in grad.data.chunks(inner) {
            for (t, &g) in data[to..to + inner].iter_mut().zip(chunk) {
                *t += g;
            }
            for d in (0..split).rev() {
                idx[d] += 1;
                to = (to as isize + st[d]) as usize;
                if idx[d] < grad.shape[d] {
                    break;
                }
                idx[d] = 0;
                to = (to as isize - st[d] * grad.shape[d] as isize) as usize;
            }
        }
        return Storage {
            shape: target_shape.to_vec(),
            data,
        };
    }

    if nd > 0 && st[nd - 1] == 0 {
        // whole trailing lanes collapse into one slot each
        let span = grad.shape[nd - 1];
        let mut idx = vec![0usize; nd - 1];
        let mut to = 0usize;
        for chunk in grad.data.chunks(span) {
            data[to] += chunk.iter().sum::<f64>();
            for d in (0..nd - 1).rev() {
                idx[d] += 1;
                to = (to as isize + st[d]) as usize;
                if idx[d] < grad.shape[d] {
                    break;
                }
                idx[d] = 0;
                to = (to as isize - st[d] * grad.shape[d] as isize) as usize;
            }
        }
        return Storage {
            shape: target_shape.to_vec(),
            data,
        };
    }

    let mut idx = vec![0usize; nd];
    let mut to = 0isize;
    for &g in grad.data.iter() {
        data[to as usize] += g;
        for d in (0..nd).rev() {
            idx[d] += 1;
            to += st[d];
            if idx[d] < grad.shape[d] {
                break;
            }
            idx[d] = 0;
            to -= st[d] * grad.shape[d] as isize;
        }
    }
    Storage {
        shape: target_shape.to_vec(),
        data,
    }
}

/// Iterates lanes along `axis`: calls `f(base_offset, stride)` once per lane
/// of length `shape[axis]`.
pub fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(usize, usize)) {
    let lane = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    for o in 0..outer {
        let block = o * lane * inner;
        for i in 0..inner {
            f(block + i, inner);
        }
    }
}

/// `C += A' * B'` where `A'` is `A` or its transpose per the flag.
///
/// `a` is stored row-major with `a_cols` columns; with `ta` the logical
/// operand is the transpose of that matrix. Offsets index into larger
/// buffers.
#[allow(clippy::too_many_arguments)]
fn gemm_slice(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_off: usize,
    a_cols: usize,
    ta: bool,
    b: &[f64],
    b_off: usize,
    b_cols: usize,
    tb: bool,
    c: &mut [f64],
    c_off: usize,
) {
    let (rsa, csa) = if ta { (1, a_cols as isize) } else { (a_cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b_cols as isize) } else { (b_cols as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr().add(a_off),
            rsa,
            csa,
            b.as_ptr().add(b_off),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr().add(c_off),
            n as isize,
            1,
        );
    }
}

/// Logical matrix dims of the last two axes after an optional transpose.
fn mat_dims(shape: &[usize], transpose: bool) -> (usize, usize) {
    let nd = shape.len();
    let (p, q) = (shape[nd - 2], shape[nd - 1]);
    if transpose {
        (q, p)
    } else {
        (p, q)
    }
}

/// Batched `out += A' * B'` over the last two axes, broadcasting batch
/// dimensions under the trailing rule.
///
/// `out` must be pre-allocated with shape `[out_batch.., m, n]` where
/// `out_batch` is either the full broadcast batch or a right-aligned subset
/// of it (size-1 or missing dims accumulate, which is how gradients reduce
/// over broadcast batches). The product is always accumulated, so callers
/// zero fresh buffers.
pub fn gemm_broadcast(
    a: &Storage,
    ta: bool,
    b: &Storage,
    tb: bool,
    out: &mut Storage,
    op: &'static str,
) -> Result<(), TensorError> {
    if a.ndim() < 2 || b.ndim() < 2 {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let (m, ka) = mat_dims(&a.shape, ta);
    let (kb, n) = mat_dims(&b.shape, tb);
    if ka != kb {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let k = ka;
    let ab = a.shape[..a.ndim() - 2].to_vec();
    let bb = b.shape[..b.ndim() - 2].to_vec();
    let batch = broadcast_shapes(&ab, &bb, op)?;
    let ob = out.shape[..out.ndim() - 2].to_vec();
    debug_assert_eq!(&out.shape[out.ndim() - 2..], [m, n]);

    let a_cols = a.shape[a.ndim() - 1];
    let b_cols = b.shape[b.ndim() - 1];

    // Fold fast paths for a shared 2-D operand with contiguous batches.
    if bb.is_empty() && ab == batch && ob == batch && !ta {
        // [batch.., m, k] x [k, n] as one ([batch]*m, k) x (k, n) call.
        let bc: usize = batch.iter().product();
        gemm_slice(bc * m, k, n, &a.data, 0, a_cols, false, &b.data, 0, b_cols, tb, &mut out.data, 0);
        return Ok(());
    }
    if ta && !tb && ab == batch && bb == batch && ob.is_empty() {
        // sum_batch A_i^T B_i as one (m, [batch]*k, n) call over folded rows.
        let bc: usize = batch.iter().product();
        gemm_slice(m, bc * k, n, &a.data, 0, a_cols, true, &b.data, 0, b_cols, false, &mut out.data, 0);
        return Ok(());
    }

    let nd = batch.len();
    let a_mat = a.shape[a.ndim() - 2] * a_cols;
    let b_mat = b.shape[b.ndim() - 2] * b_cols;
    let sa: Vec<isize> = broadcast_strides(&ab, nd).iter().map(|&s| s * a_mat as isize).collect();
    let sb: Vec<isize> = broadcast_strides(&bb, nd).iter().map(|&s| s * b_mat as isize).collect();
    let so: Vec<isize> = broadcast_strides(&ob, nd).iter().map(|&s| s * (m * n) as isize).collect();
    let batch_count: usize = batch.iter().product();
    let mut idx = vec![0usize; nd];
    let (mut ao, mut bo, mut oo) = (0isize, 0isize, 0isize);
    for _ in 0..batch_count {
        gemm_slice(
            m,
            k,
            n,
            &a.data,
            ao as usize,
            a_cols,
            ta,
            &b.data,
            bo as usize,
            b_cols,
            tb,
            &mut out.data,
            oo as usize,
        );
        for d in (0..nd).rev() {
            idx[d] += 1;
            ao += sa[d];
            bo += sb[d];
            oo += so[d];
            if idx[d] < batch[d] {
                break;
            }
            idx[d] = 0;
            ao -= sa[d] * batch[d] as isize;
            bo -= sb[d] * batch[d] as isize;
            oo -= so[d] * batch[d] as isize;
        }
    }
    Ok(())
}

/// Output shape of a broadcast batched matmul, or an error on mismatch.
pub fn matmul_out_shape(
    a: &Storage,
    ta: bool,
    b: &Storage,
    tb: bool,
    op: &'static str,
) -> Result<Vec<usize>, TensorError> {
    if a.ndim() < 2 || b.ndim() < 2 {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let (m, ka) = mat_dims(&a.shape, ta);
    let (kb, n) = mat_dims(&b.shape, tb);
    if ka != kb {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = broadcast_shapes(&a.shape[..a.ndim() - 2], &b.shape[..b.ndim() - 2], op)?;
    out.push(m);
    out.push(n);
    Ok(out)
}

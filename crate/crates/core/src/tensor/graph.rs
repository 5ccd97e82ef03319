//! Reverse-mode automatic differentiation over dense f32 tensors.
//!
//! A [`Graph`] is a Wengert list: every operation appends its forward value
//! and (when gradients are enabled and some input requires them) a backward
//! closure. [`Graph::backward`] walks the list in reverse, moving each node's
//! accumulated gradient out before dispatching it to the node's inputs, so a
//! node's gradient is final by the time it is consumed.
//!
//! Tensors are immutable after construction. Graphs are cheap to build and
//! are meant to live for a single forward/backward pass.

use std::ops::Deref;
use std::sync::Arc;

use rand::Rng;

use super::kernels;
use crate::error::{Error, Result};

/// Handle to a tensor inside a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorRef(pub(crate) usize);

/// Tensor storage: owned buffers for intermediates, shared buffers so model
/// parameters can be bound into many graphs without copies.
#[derive(Clone)]
pub enum Storage {
    Owned(Vec<f32>),
    Shared(Arc<Vec<f32>>),
}

impl Deref for Storage {
    type Target = [f32];
    fn deref(&self) -> &[f32] {
        match self {
            Storage::Owned(v) => v,
            Storage::Shared(v) => v,
        }
    }
}

struct Value {
    data: Storage,
    shape: Vec<usize>,
}

type BackFn = Box<dyn Fn(&Graph, &[f32], &mut GradStore)>;

pub struct Graph {
    values: Vec<Value>,
    backs: Vec<Option<BackFn>>,
    /// Gradient is accumulated into this node during backward.
    needs: Vec<bool>,
    /// Gradient is retained after backward (tracked leaves).
    keep: Vec<bool>,
    grad_enabled: bool,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct GradStore {
    grads: Vec<Option<Vec<f32>>>,
    needs: Vec<bool>,
}

impl GradStore {
    fn new(n: usize, needs: Vec<bool>) -> Self {
        GradStore {
            grads: (0..n).map(|_| None).collect(),
            needs,
        }
    }

    fn take(&mut self, id: usize) -> Option<Vec<f32>> {
        self.grads[id].take()
    }

    fn put(&mut self, id: usize, g: Vec<f32>) {
        self.grads[id] = Some(g);
    }

    /// Mutable gradient slot for node `id`, zero-initialized on first touch.
    /// Returns `None` for nodes that do not require gradient.
    pub fn entry(&mut self, id: usize, len: usize) -> Option<&mut [f32]> {
        if !self.needs[id] {
            return None;
        }
        let slot = &mut self.grads[id];
        if slot.is_none() {
            *slot = Some(vec![0.0; len]);
        }
        slot.as_deref_mut()
    }

    /// Gradient of a tensor after backward; `None` when no gradient reached
    /// it or it was not tracked.
    pub fn grad(&self, t: TensorRef) -> Option<&[f32]> {
        self.grads[t.0].as_deref()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::with_grad(true)
    }

    /// `grad_enabled = false` builds a forward-only graph: no backward
    /// closures are recorded and `backward` yields nothing.
    pub fn with_grad(grad_enabled: bool) -> Self {
        Graph {
            values: Vec::new(),
            backs: Vec::new(),
            needs: Vec::new(),
            keep: Vec::new(),
            grad_enabled,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn data(&self, t: TensorRef) -> &[f32] {
        &self.values[t.0].data
    }

    pub fn shape(&self, t: TensorRef) -> &[usize] {
        &self.values[t.0].shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push_node(
        &mut self,
        data: Storage,
        shape: Vec<usize>,
        needs: bool,
        keep: bool,
        back: Option<BackFn>,
    ) -> TensorRef {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        self.values.push(Value { data, shape });
        self.backs.push(back);
        self.needs.push(needs);
        self.keep.push(keep);
        TensorRef(self.values.len() - 1)
    }

    fn push_op(
        &mut self,
        data: Vec<f32>,
        shape: Vec<usize>,
        inputs: &[TensorRef],
        back: impl Fn(&Graph, &[f32], &mut GradStore) + 'static,
    ) -> TensorRef {
        let needs = self.grad_enabled && inputs.iter().any(|t| self.needs[t.0]);
        let back: Option<BackFn> = if needs { Some(Box::new(back)) } else { None };
        self.push_node(Storage::Owned(data), shape, needs, false, back)
    }

    /// Untracked leaf (a constant).
    pub fn constant(&mut self, data: Vec<f32>, shape: Vec<usize>) -> TensorRef {
        self.push_node(Storage::Owned(data), shape, false, false, None)
    }

    /// Tracked leaf owning its data; its gradient is retained.
    pub fn var(&mut self, data: Vec<f32>, shape: Vec<usize>) -> TensorRef {
        let tracked = self.grad_enabled;
        self.push_node(Storage::Owned(data), shape, tracked, tracked, None)
    }

    /// Tracked leaf sharing its data (model parameters).
    pub fn param(&mut self, data: Arc<Vec<f32>>, shape: Vec<usize>) -> TensorRef {
        let tracked = self.grad_enabled;
        self.push_node(Storage::Shared(data), shape, tracked, tracked, None)
    }

    fn rows_cols(&self, t: TensorRef, op: &'static str) -> Result<(usize, usize)> {
        match *self.shape(t) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::shape(op, format!("expected 2-d tensor, got {s:?}"))),
        }
    }

    // ── element-wise ─────────────────────────────────────────────────

    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.zip_op("add", a, b, |x, y| x + y, |_, _| (1.0, 1.0))
    }

    pub fn sub(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.zip_op("sub", a, b, |x, y| x - y, |_, _| (1.0, -1.0))
    }

    pub fn mul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.zip_op("mul", a, b, |x, y| x * y, |x, y| (y, x))
    }

    fn zip_op(
        &mut self,
        op: &'static str,
        a: TensorRef,
        b: TensorRef,
        f: impl Fn(f32, f32) -> f32,
        df: impl Fn(f32, f32) -> (f32, f32) + 'static,
    ) -> Result<TensorRef> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data: Vec<f32> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let n = data.len();
        Ok(self.push_op(data, shape, &[a, b], move |g, up, grads| {
            let (xa, xb) = (g.data(a), g.data(b));
            if let Some(da) = grads.entry(a.0, n) {
                for i in 0..n {
                    da[i] += up[i] * df(xa[i], xb[i]).0;
                }
            }
            if let Some(db) = grads.entry(b.0, n) {
                for i in 0..n {
                    db[i] += up[i] * df(xa[i], xb[i]).1;
                }
            }
        }))
    }

    pub fn scale(&mut self, a: TensorRef, c: f32) -> TensorRef {
        let data: Vec<f32> = self.data(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let n = data.len();
        self.push_op(data, shape, &[a], move |_, up, grads| {
            if let Some(da) = grads.entry(a.0, n) {
                for i in 0..n {
                    da[i] += up[i] * c;
                }
            }
        })
    }

    pub fn add_scalar(&mut self, a: TensorRef, c: f32) -> TensorRef {
        let data: Vec<f32> = self.data(a).iter().map(|&x| x + c).collect();
        let shape = self.shape(a).to_vec();
        let n = data.len();
        self.push_op(data, shape, &[a], move |_, up, grads| {
            if let Some(da) = grads.entry(a.0, n) {
                for i in 0..n {
                    da[i] += up[i];
                }
            }
        })
    }

    pub fn relu(&mut self, a: TensorRef) -> TensorRef {
        let data: Vec<f32> = self.data(a).iter().map(|&x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        let n = data.len();
        self.push_op(data, shape, &[a], move |g, up, grads| {
            let x = g.data(a);
            if let Some(da) = grads.entry(a.0, n) {
                for i in 0..n {
                    if x[i] > 0.0 {
                        da[i] += up[i];
                    }
                }
            }
        })
    }

    /// Inverted-dropout with the mask baked in at forward time. The caller
    /// decides whether training mode applies; rate 0 is the identity.
    pub fn dropout(&mut self, a: TensorRef, rate: f32, rng: &mut impl Rng) -> TensorRef {
        if rate <= 0.0 {
            return a;
        }
        let scale = 1.0 / (1.0 - rate);
        let mask: Vec<f32> = self
            .data(a)
            .iter()
            .map(|_| if rng.gen::<f32>() < rate { 0.0 } else { scale })
            .collect();
        let data: Vec<f32> = self
            .data(a)
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| x * m)
            .collect();
        let shape = self.shape(a).to_vec();
        let n = data.len();
        self.push_op(data, shape, &[a], move |_, up, grads| {
            if let Some(da) = grads.entry(a.0, n) {
                for i in 0..n {
                    da[i] += up[i] * mask[i];
                }
            }
        })
    }

    // ── matrix products ──────────────────────────────────────────────

    /// Standard matrix product: (m,k) x (k,n) -> (m,n).
    pub fn matmul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (m, ka) = self.rows_cols(a, "matmul")?;
        let (kb, n) = self.rows_cols(b, "matmul")?;
        if ka != kb {
            return Err(Error::shape(
                "matmul",
                format!("inner extents disagree: {ka} vs {kb}"),
            ));
        }
        let mut data = vec![0.0; m * n];
        kernels::matmul_acc(self.data(a), self.data(b), m, ka, n, &mut data);
        Ok(self.push_op(data, vec![m, n], &[a, b], move |g, up, grads| {
            // dA += G B^T ; dB += A^T G
            if let Some(da) = grads.entry(a.0, m * ka) {
                kernels::matmul_nt_acc(up, g.data(b), m, n, ka, da);
            }
            if let Some(db) = grads.entry(b.0, ka * n) {
                kernels::matmul_tn_acc(g.data(a), up, m, ka, n, db);
            }
        }))
    }

    /// Product with a transposed right operand: (m,k) x (n,k)^T -> (m,n).
    pub fn matmul_nt(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (m, ka) = self.rows_cols(a, "matmul_nt")?;
        let (n, kb) = self.rows_cols(b, "matmul_nt")?;
        if ka != kb {
            return Err(Error::shape(
                "matmul_nt",
                format!("inner extents disagree: {ka} vs {kb}"),
            ));
        }
        let mut data = vec![0.0; m * n];
        kernels::matmul_nt_acc(self.data(a), self.data(b), m, ka, n, &mut data);
        Ok(self.push_op(data, vec![m, n], &[a, b], move |g, up, grads| {
            // out = A B^T: dA += G B ; dB += G^T A
            if let Some(da) = grads.entry(a.0, m * ka) {
                kernels::matmul_acc(up, g.data(b), m, n, ka, da);
            }
            if let Some(db) = grads.entry(b.0, n * ka) {
                kernels::matmul_tn_acc(up, g.data(a), m, n, ka, db);
            }
        }))
    }

    // ── normalization ────────────────────────────────────────────────

    /// Softmax along `axis` of a 1-d or 2-d tensor. Numerically stable via
    /// per-slice max subtraction; slices sum to 1 for inputs up to ~1e4.
    pub fn softmax(&mut self, x: TensorRef, axis: usize) -> Result<TensorRef> {
        let shape = self.shape(x).to_vec();
        let (rows, cols, row_major) = match (shape.as_slice(), axis) {
            ([n], 0) => (1usize, *n, true),
            ([r, c], 1) => (*r, *c, true),
            ([r, c], 0) => (*c, *r, false),
            (s, ax) => {
                return Err(Error::shape(
                    "softmax",
                    format!("axis {ax} invalid for shape {s:?}"),
                ))
            }
        };
        if cols == 0 {
            return Err(Error::shape("softmax", "axis extent must be >= 1"));
        }
        let src = self.data(x);
        let n = src.len();
        let idx = move |slice: usize, j: usize| {
            if row_major {
                slice * cols + j
            } else {
                j * rows + slice
            }
        };
        let mut data = vec![0.0f32; n];
        for s in 0..rows {
            let mut m = f32::NEG_INFINITY;
            for j in 0..cols {
                m = m.max(src[idx(s, j)]);
            }
            let mut sum = 0.0f32;
            for j in 0..cols {
                let e = (src[idx(s, j)] - m).exp();
                data[idx(s, j)] = e;
                sum += e;
            }
            let inv = 1.0 / sum;
            for j in 0..cols {
                data[idx(s, j)] *= inv;
            }
        }
        // The backward rule reads the softmax output itself; the node id is
        // known before pushing (next index).
        let out = TensorRef(self.values.len());
        Ok(self.push_op(data, shape, &[x], move |g, up, grads| {
            let y = g.data(out);
            if let Some(dx) = grads.entry(x.0, n) {
                for s in 0..rows {
                    let mut dotv = 0.0f32;
                    for j in 0..cols {
                        let k = idx(s, j);
                        dotv += up[k] * y[k];
                    }
                    for j in 0..cols {
                        let k = idx(s, j);
                        dx[k] += y[k] * (up[k] - dotv);
                    }
                }
            }
        }))
    }

    /// LayerNorm over the last axis with learned gain and bias.
    /// Variance epsilon is 1e-6.
    pub fn layer_norm(
        &mut self,
        x: TensorRef,
        gain: TensorRef,
        bias: TensorRef,
    ) -> Result<TensorRef> {
        const EPS: f32 = 1e-6;
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().ok_or_else(|| {
            Error::shape("layer_norm", "input must have at least one axis")
        })?;
        let rows = shape.iter().product::<usize>() / cols;
        if self.shape(gain) != [cols] || self.shape(bias) != [cols] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gain/bias must be [{cols}], got {:?} and {:?}",
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let src = self.data(x);
        let gv = self.data(gain);
        let bv = self.data(bias);
        let mut data = vec![0.0f32; src.len()];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f32>() / cols as f32;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / cols as f32;
            let inv = 1.0 / (var + EPS).sqrt();
            for j in 0..cols {
                data[r * cols + j] = (row[j] - mean) * inv * gv[j] + bv[j];
            }
        }
        Ok(self.push_op(data, shape, &[x, gain, bias], move |g, up, grads| {
            let src = g.data(x);
            let gv = g.data(gain);
            let n = src.len();
            for r in 0..rows {
                let row = &src[r * cols..(r + 1) * cols];
                let u = &up[r * cols..(r + 1) * cols];
                let mean = row.iter().sum::<f32>() / cols as f32;
                let var =
                    row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / cols as f32;
                let inv = 1.0 / (var + EPS).sqrt();
                // dgain/dbias
                if let Some(dg) = grads.entry(gain.0, cols) {
                    for j in 0..cols {
                        dg[j] += u[j] * (row[j] - mean) * inv;
                    }
                }
                if let Some(db) = grads.entry(bias.0, cols) {
                    for j in 0..cols {
                        db[j] += u[j];
                    }
                }
                if let Some(dx) = grads.entry(x.0, n) {
                    // h = dL/dx_hat; dx = inv*(h - mean(h) - x_hat*mean(h*x_hat))
                    let mut h_mean = 0.0f32;
                    let mut hx_mean = 0.0f32;
                    for j in 0..cols {
                        let h = u[j] * gv[j];
                        let xh = (row[j] - mean) * inv;
                        h_mean += h;
                        hx_mean += h * xh;
                    }
                    h_mean /= cols as f32;
                    hx_mean /= cols as f32;
                    for j in 0..cols {
                        let h = u[j] * gv[j];
                        let xh = (row[j] - mean) * inv;
                        dx[r * cols + j] += inv * (h - h_mean - xh * hx_mean);
                    }
                }
            }
        }))
    }

    // ── gather / reshape family ──────────────────────────────────────

    /// Row gather: out[i, :] = table[ids[i], :].
    pub fn embedding(&mut self, table: TensorRef, ids: &[u32]) -> Result<TensorRef> {
        let (vocab, d) = self.rows_cols(table, "embedding")?;
        for &id in ids {
            if id as usize >= vocab {
                return Err(Error::InvalidToken { id, vocab });
            }
        }
        let t = self.data(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&t[id as usize * d..(id as usize + 1) * d]);
        }
        let ids: Vec<u32> = ids.to_vec();
        let rows = ids.len();
        Ok(self.push_op(data, vec![rows, d], &[table], move |_, up, grads| {
            if let Some(dt) = grads.entry(table.0, vocab * d) {
                for (i, &id) in ids.iter().enumerate() {
                    let dst = &mut dt[id as usize * d..(id as usize + 1) * d];
                    let src = &up[i * d..(i + 1) * d];
                    for (o, &v) in dst.iter_mut().zip(src) {
                        *o += v;
                    }
                }
            }
        }))
    }

    /// Vertical concatenation of 2-d tensors sharing a column count.
    pub fn concat_rows(&mut self, parts: &[TensorRef]) -> Result<TensorRef> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows", "no inputs"));
        }
        let (_, d) = self.rows_cols(parts[0], "concat_rows")?;
        let mut data = Vec::new();
        let mut row_offsets = Vec::with_capacity(parts.len());
        let mut rows = 0usize;
        for &p in parts {
            let (r, c) = self.rows_cols(p, "concat_rows")?;
            if c != d {
                return Err(Error::shape(
                    "concat_rows",
                    format!("column mismatch: {c} vs {d}"),
                ));
            }
            row_offsets.push((p, rows, r));
            rows += r;
            data.extend_from_slice(self.data(p));
        }
        let inputs: Vec<TensorRef> = parts.to_vec();
        Ok(
            self.push_op(data, vec![rows, d], &inputs, move |_, up, grads| {
                for &(p, start, r) in &row_offsets {
                    if let Some(dp) = grads.entry(p.0, r * d) {
                        let src = &up[start * d..(start + r) * d];
                        for (o, &v) in dp.iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                }
            }),
        )
    }

    /// Contiguous row slice of a 2-d tensor.
    pub fn slice_rows(&mut self, x: TensorRef, start: usize, len: usize) -> Result<TensorRef> {
        let (r, c) = self.rows_cols(x, "slice_rows")?;
        if start + len > r {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{} out of {r}", start + len),
            ));
        }
        let data = self.data(x)[start * c..(start + len) * c].to_vec();
        Ok(
            self.push_op(data, vec![len, c], &[x], move |_, up, grads| {
                if let Some(dx) = grads.entry(x.0, r * c) {
                    let dst = &mut dx[start * c..(start + len) * c];
                    for (o, &v) in dst.iter_mut().zip(up) {
                        *o += v;
                    }
                }
            }),
        )
    }

    /// Contiguous column slice of a 2-d tensor.
    pub fn slice_cols(&mut self, x: TensorRef, start: usize, len: usize) -> Result<TensorRef> {
        let (r, c) = self.rows_cols(x, "slice_cols")?;
        if start + len > c {
            return Err(Error::shape(
                "slice_cols",
                format!("cols {start}..{} out of {c}", start + len),
            ));
        }
        let src = self.data(x);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        Ok(
            self.push_op(data, vec![r, len], &[x], move |_, up, grads| {
                if let Some(dx) = grads.entry(x.0, r * c) {
                    for i in 0..r {
                        for j in 0..len {
                            dx[i * c + start + j] += up[i * len + j];
                        }
                    }
                }
            }),
        )
    }

    /// Horizontal concatenation of 2-d tensors sharing a row count.
    pub fn concat_cols(&mut self, parts: &[TensorRef]) -> Result<TensorRef> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "no inputs"));
        }
        let (r, _) = self.rows_cols(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0usize;
        for &p in parts {
            let (pr, pc) = self.rows_cols(p, "concat_cols")?;
            if pr != r {
                return Err(Error::shape(
                    "concat_cols",
                    format!("row mismatch: {pr} vs {r}"),
                ));
            }
            widths.push((p, total, pc));
            total += pc;
        }
        let mut data = vec![0.0f32; r * total];
        for &(p, off, pc) in &widths {
            let src = self.data(p);
            for i in 0..r {
                data[i * total + off..i * total + off + pc]
                    .copy_from_slice(&src[i * pc..(i + 1) * pc]);
            }
        }
        let inputs: Vec<TensorRef> = parts.to_vec();
        Ok(
            self.push_op(data, vec![r, total], &inputs, move |_, up, grads| {
                for &(p, off, pc) in &widths {
                    if let Some(dp) = grads.entry(p.0, r * pc) {
                        for i in 0..r {
                            for j in 0..pc {
                                dp[i * pc + j] += up[i * total + off + j];
                            }
                        }
                    }
                }
            }),
        )
    }

    // ── reductions & losses ──────────────────────────────────────────

    /// Sum of all elements; returns a scalar of shape `[1]`.
    /// Accumulates in f64 so the stored f32 result carries one rounding.
    pub fn sum_all(&mut self, x: TensorRef) -> TensorRef {
        let s = self.data(x).iter().map(|&v| v as f64).sum::<f64>() as f32;
        let n = self.data(x).len();
        self.push_op(vec![s], vec![1], &[x], move |_, up, grads| {
            if let Some(dx) = grads.entry(x.0, n) {
                for v in dx.iter_mut() {
                    *v += up[0];
                }
            }
        })
    }

    /// Identity in the forward pass; blocks all gradient flow in backward.
    /// The forward value is bitwise identical to the input.
    pub fn stop_gradient(&mut self, x: TensorRef) -> TensorRef {
        let data = self.data(x).to_vec();
        let shape = self.shape(x).to_vec();
        self.push_node(Storage::Owned(data), shape, false, false, None)
    }

    /// KL divergence `sum_i t_i * ln(t_i / s_i)` between two distributions,
    /// with the 0*ln(0) = 0 convention and `s` floored at 1e-12.
    pub fn kl_divergence(&mut self, t: TensorRef, s: TensorRef) -> Result<TensorRef> {
        const FLOOR: f32 = 1e-12;
        let tn = self.data(t).len();
        let sn = self.data(s).len();
        if tn != sn {
            return Err(Error::shape(
                "kl_divergence",
                format!("lengths disagree: {tn} vs {sn}"),
            ));
        }
        for (name, v) in [("t", self.data(t)), ("s", self.data(s))] {
            if v.iter().any(|&x| x < 0.0) {
                return Err(Error::InvalidDistribution(format!(
                    "{name} has negative entries"
                )));
            }
            let sum: f32 = v.iter().sum();
            if (sum - 1.0).abs() > 1e-5 {
                return Err(Error::InvalidDistribution(format!(
                    "{name} sums to {sum}, expected 1"
                )));
            }
        }
        let mut kl = 0.0f64;
        for (&ti, &si) in self.data(t).iter().zip(self.data(s)) {
            if ti > 0.0 {
                kl += (ti as f64) * ((ti / si.max(FLOOR)) as f64).ln();
            }
        }
        let kl = kl as f32;
        Ok(self.push_op(vec![kl], vec![1], &[t, s], move |g, up, grads| {
            let tv = g.data(t);
            let sv = g.data(s);
            if let Some(dt) = grads.entry(t.0, tn) {
                for i in 0..tn {
                    let ti = tv[i].max(FLOOR);
                    dt[i] += up[0] * ((ti / sv[i].max(FLOOR)).ln() + 1.0);
                }
            }
            if let Some(ds) = grads.entry(s.0, sn) {
                for i in 0..sn {
                    if sv[i] > FLOOR && tv[i] > 0.0 {
                        ds[i] += up[0] * (-tv[i] / sv[i]);
                    }
                }
            }
        }))
    }

    /// Summed token-level negative log-likelihood of `targets` under
    /// `logits` (shape `[T, vocab]`): `-sum_t ln softmax(logits_t)[target_t]`.
    pub fn cross_entropy_tokens(
        &mut self,
        logits: TensorRef,
        targets: &[u32],
    ) -> Result<TensorRef> {
        let (t_len, vocab) = self.rows_cols(logits, "cross_entropy_tokens")?;
        if targets.len() != t_len {
            return Err(Error::shape(
                "cross_entropy_tokens",
                format!("{} targets for {t_len} logit rows", targets.len()),
            ));
        }
        for &id in targets {
            if id as usize >= vocab {
                return Err(Error::InvalidToken { id, vocab });
            }
        }
        let lv = self.data(logits);
        let mut loss = 0.0f64;
        for (i, &tid) in targets.iter().enumerate() {
            let row = &lv[i * vocab..(i + 1) * vocab];
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let lse = m as f64
                + row
                    .iter()
                    .map(|&v| ((v - m) as f64).exp())
                    .sum::<f64>()
                    .ln();
            loss += lse - row[tid as usize] as f64;
        }
        let loss = loss as f32;
        let targets: Vec<u32> = targets.to_vec();
        Ok(
            self.push_op(vec![loss], vec![1], &[logits], move |g, up, grads| {
                let lv = g.data(logits);
                if let Some(dl) = grads.entry(logits.0, t_len * vocab) {
                    for (i, &tid) in targets.iter().enumerate() {
                        let row = &lv[i * vocab..(i + 1) * vocab];
                        let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                        let sum: f32 = row.iter().map(|&v| (v - m).exp()).sum();
                        let drow = &mut dl[i * vocab..(i + 1) * vocab];
                        for j in 0..vocab {
                            let p = (row[j] - m).exp() / sum;
                            drow[j] += up[0] * (p - if j == tid as usize { 1.0 } else { 0.0 });
                        }
                    }
                }
            }),
        )
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Gradients of tracked leaves are
    /// retained in the returned store; everything else is freed as soon as
    /// it has been consumed.
    pub fn backward(&self, loss: TensorRef) -> Result<GradStore> {
        if self.shape(loss) != [1] {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar [1], got {:?}", self.shape(loss)),
            ));
        }
        let mut grads = GradStore::new(self.values.len(), self.needs.clone());
        grads.put(loss.0, vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads.take(id) else { continue };
            if let Some(back) = &self.backs[id] {
                back(self, &g, &mut grads);
            }
            if self.keep[id] {
                grads.put(id, g);
            }
        }
        Ok(grads)
    }
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

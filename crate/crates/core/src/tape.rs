//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Every operation appends one node holding the op kind, input node ids and
//! the forward value; the tape is therefore acyclic and topologically ordered
//! by construction. [`Tape::backward`] runs a single reverse sweep from a
//! scalar root and returns gradients for every node that needs them.
//!
//! The op set is exactly what the interaction-network equations and the
//! training loss require: matmul, concatenation, Swish, LayerNorm, segment
//! sums over edge targets, row gather/overwrite and a few elementwise and
//! reduction ops. Aggregations run in ascending edge-index order so that two
//! runs with the same inputs produce bit-identical tapes and gradients.

use crate::error::{LamError, Result};
use crate::tensor::{Scalar, Tensor};
use std::sync::Arc;

/// LayerNorm variance floor.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }

    /// Handle for the i-th recorded node; nodes are numbered in creation
    /// order, so the first k leaves of a fresh tape are ids 0..k.
    pub fn from_index(i: usize) -> Self {
        TensorId(i)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(TensorId, TensorId),
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, f64),
    /// Broadcast-add a vector to every row of a matrix.
    AddBias(TensorId, TensorId),
    /// Scale every column of a matrix by the matching vector entry.
    MulCols(TensorId, TensorId),
    ConcatCols(Vec<TensorId>),
    Swish(TensorId),
    LayerNorm {
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
    },
    GatherRows(TensorId, Arc<Vec<u32>>),
    ScatterSum {
        messages: TensorId,
        targets: Arc<Vec<u32>>,
    },
    /// Copy of the input with some rows replaced by constants; the replaced
    /// rows block gradient flow.
    OverwriteRows(TensorId, Arc<Vec<u32>>),
    Sum(TensorId),
    Mean(TensorId),
}

#[derive(Debug)]
struct Node<S: Scalar> {
    op: Op,
    value: Tensor<S>,
    needs_grad: bool,
    /// Per-row (mean, inv_std) cache for LayerNorm; empty otherwise.
    aux: Vec<S>,
}

/// Recording tape. Forward and backward on one tape are single-threaded;
/// independent tapes may run in parallel.
pub struct Tape<S: Scalar = f64> {
    nodes: Vec<Node<S>>,
    /// When set, every op output is scanned for NaN/Inf and rejected.
    strict_finite: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by node id.
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, id: TensorId) -> Option<&[S]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `id`, or zeros of the given length if the node was never
    /// reached (e.g. the root was constant with respect to it).
    pub fn get_or_zeros(&self, id: TensorId, len: usize) -> Vec<S> {
        match self.get(id) {
            Some(g) => g.to_vec(),
            None => vec![S::zero(); len],
        }
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    /// Tape with per-op finite checks enabled.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            strict_finite: true,
        }
    }

    /// Tape without per-op finite checks; callers validate at surface points
    /// (predicted states, loss values) instead.
    pub fn fast() -> Self {
        Tape {
            nodes: Vec::new(),
            strict_finite: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    pub fn needs_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, op: Op, value: Tensor<S>, needs_grad: bool, aux: Vec<S>) -> Result<TensorId> {
        if self.strict_finite && !value.all_finite() {
            return Err(LamError::NonFinite(format!(
                "op produced NaN/Inf (node {}, shape {:?})",
                self.nodes.len(),
                value.shape()
            )));
        }
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
            aux,
        });
        Ok(TensorId(self.nodes.len() - 1))
    }

    /// Record an input tensor. `needs_grad` marks parameters; data constants
    /// should pass `false` so the backward sweep can skip their subgraphs.
    pub fn leaf(&mut self, value: Tensor<S>, needs_grad: bool) -> TensorId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            needs_grad,
            aux: Vec::new(),
        });
        TensorId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> TensorId {
        self.leaf(value, false)
    }

    fn any_needs_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    // ── forward ops ─────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.ndim() != 2 || vb.ndim() != 2 {
            return Err(LamError::dim("matmul expects 2-D tensors"));
        }
        let (m, k) = (va.shape()[0], va.shape()[1]);
        let (k2, n) = (vb.shape()[0], vb.shape()[1]);
        if k != k2 {
            return Err(LamError::dim(format!(
                "matmul inner dims {}x{} vs {}x{}",
                m, k, k2, n
            )));
        }
        let mut out = vec![S::zero(); m * n];
        mm_nn(va.values(), vb.values(), m, k, n, &mut out);
        let ng = self.any_needs_grad(&[a, b]);
        self.push(Op::MatMul(a, b), Tensor::from_vec(vec![m, n], out)?, ng, Vec::new())
    }

    fn binary_same_shape(&mut self, a: TensorId, b: TensorId, name: &str) -> Result<()> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(LamError::dim(format!(
                "{name}: shapes {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape(a, b, "add")?;
        let vals: Vec<S> = self.nodes[a.0]
            .value
            .values()
            .iter()
            .zip(self.nodes[b.0].value.values())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.nodes[a.0].value.shape().to_vec();
        let ng = self.any_needs_grad(&[a, b]);
        self.push(Op::Add(a, b), Tensor::from_vec(shape, vals)?, ng, Vec::new())
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape(a, b, "sub")?;
        let vals: Vec<S> = self.nodes[a.0]
            .value
            .values()
            .iter()
            .zip(self.nodes[b.0].value.values())
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.nodes[a.0].value.shape().to_vec();
        let ng = self.any_needs_grad(&[a, b]);
        self.push(Op::Sub(a, b), Tensor::from_vec(shape, vals)?, ng, Vec::new())
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape(a, b, "mul")?;
        let vals: Vec<S> = self.nodes[a.0]
            .value
            .values()
            .iter()
            .zip(self.nodes[b.0].value.values())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.nodes[a.0].value.shape().to_vec();
        let ng = self.any_needs_grad(&[a, b]);
        self.push(Op::Mul(a, b), Tensor::from_vec(shape, vals)?, ng, Vec::new())
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        let cs = S::from_f64(c);
        let vals: Vec<S> = self.nodes[a.0].value.values().iter().map(|&x| x * cs).collect();
        let shape = self.nodes[a.0].value.shape().to_vec();
        let ng = self.nodes[a.0].needs_grad;
        self.push(Op::Scale(a, c), Tensor::from_vec(shape, vals)?, ng, Vec::new())
    }

    pub fn add_bias(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let (vx, vb) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        let d = vx.last_dim();
        if vb.ndim() != 1 || vb.numel() != d {
            return Err(LamError::dim(format!(
                "add_bias: bias {:?} vs last dim {}",
                vb.shape(),
                d
            )));
        }
        let rows = vx.rows();
        let mut vals = vx.values().to_vec();
        let b = vb.values();
        for r in 0..rows {
            for c in 0..d {
                vals[r * d + c] += b[c];
            }
        }
        let shape = vx.shape().to_vec();
        let ng = self.any_needs_grad(&[x, bias]);
        self.push(Op::AddBias(x, bias), Tensor::from_vec(shape, vals)?, ng, Vec::new())
    }

    pub fn mul_cols(&mut self, x: TensorId, weights: TensorId) -> Result<TensorId> {
        let (vx, vw) = (&self.nodes[x.0].value, &self.nodes[weights.0].value);
        let d = vx.last_dim();
        if vw.ndim() != 1 || vw.numel() != d {
            return Err(LamError::dim(format!(
                "mul_cols: weights {:?} vs last dim {}",
                vw.shape(),
                d
            )));
        }
        let rows = vx.rows();
        let mut vals = vx.values().to_vec();
        let w = vw.values();
        for r in 0..rows {
            for c in 0..d {
                vals[r * d + c] *= w[c];
            }
        }
        let shape = vx.shape().to_vec();
        let ng = self.any_needs_grad(&[x, weights]);
        self.push(Op::MulCols(x, weights), Tensor::from_vec(shape, vals)?, ng, Vec::new())
    }

    /// Concatenate along the last axis. All parts must share their leading
    /// dimensions.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(LamError::dim("concat of zero parts"));
        }
        let first = &self.nodes[parts[0].0].value;
        let lead = &first.shape()[..first.ndim().saturating_sub(1)];
        let rows = first.rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = &self.nodes[p.0].value;
            if &v.shape()[..v.ndim().saturating_sub(1)] != lead {
                return Err(LamError::dim(format!(
                    "concat: leading dims {:?} vs {:?}",
                    lead,
                    v.shape()
                )));
            }
            widths.push(v.last_dim());
        }
        let total: usize = widths.iter().sum();
        let mut vals = vec![S::zero(); rows * total];
        let mut off = 0;
        for (i, &p) in parts.iter().enumerate() {
            let v = &self.nodes[p.0].value;
            let w = widths[i];
            for r in 0..rows {
                vals[r * total + off..r * total + off + w].copy_from_slice(v.row(r));
            }
            off += w;
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let ng = self.any_needs_grad(parts);
        self.push(
            Op::ConcatCols(parts.to_vec()),
            Tensor::from_vec(shape, vals)?,
            ng,
            Vec::new(),
        )
    }

    /// Elementwise `x * sigmoid(x)` (Swish with beta = 1).
    pub fn swish(&mut self, x: TensorId) -> Result<TensorId> {
        let vals: Vec<S> = self.nodes[x.0]
            .value
            .values()
            .iter()
            .map(|&v| v * sigmoid(v))
            .collect();
        let shape = self.nodes[x.0].value.shape().to_vec();
        let ng = self.nodes[x.0].needs_grad;
        self.push(Op::Swish(x), Tensor::from_vec(shape, vals)?, ng, Vec::new())
    }

    /// Normalize the last axis to zero mean / unit variance (with the
    /// `LAYER_NORM_EPS` floor), then apply the affine transform.
    pub fn layer_norm(&mut self, x: TensorId, gain: TensorId, bias: TensorId) -> Result<TensorId> {
        let (vx, vg, vb) = (
            &self.nodes[x.0].value,
            &self.nodes[gain.0].value,
            &self.nodes[bias.0].value,
        );
        let d = vx.last_dim();
        if d == 0 {
            return Err(LamError::dim("layer_norm on zero-width axis"));
        }
        if vg.numel() != d || vb.numel() != d {
            return Err(LamError::dim(format!(
                "layer_norm: gain/bias {:?}/{:?} vs dim {}",
                vg.shape(),
                vb.shape(),
                d
            )));
        }
        let rows = vx.rows();
        let eps = S::from_f64(LAYER_NORM_EPS);
        let dn = S::from_f64(d as f64);
        let mut vals = vec![S::zero(); rows * d];
        let mut aux = Vec::with_capacity(rows * 2);
        let (g, b) = (vg.values(), vb.values());
        for r in 0..rows {
            let row = vx.row(r);
            let mut mean = S::zero();
            for &v in row {
                mean += v;
            }
            mean /= dn;
            let mut var = S::zero();
            for &v in row {
                let c = v - mean;
                var += c * c;
            }
            var /= dn;
            let inv_std = S::one() / (var + eps).sqrt();
            aux.push(mean);
            aux.push(inv_std);
            for c in 0..d {
                let xhat = (row[c] - mean) * inv_std;
                vals[r * d + c] = g[c] * xhat + b[c];
            }
        }
        let shape = vx.shape().to_vec();
        let ng = self.any_needs_grad(&[x, gain, bias]);
        self.push(
            Op::LayerNorm { x, gain, bias },
            Tensor::from_vec(shape, vals)?,
            ng,
            aux,
        )
    }

    /// Select rows of a matrix: `out[i] = x[idx[i]]`.
    pub fn gather_rows(&mut self, x: TensorId, idx: Arc<Vec<u32>>) -> Result<TensorId> {
        let vx = &self.nodes[x.0].value;
        let d = vx.last_dim();
        let rows = vx.rows();
        for &i in idx.iter() {
            if i as usize >= rows {
                return Err(LamError::Index(format!(
                    "gather_rows: index {} out of {} rows",
                    i, rows
                )));
            }
        }
        let mut vals = vec![S::zero(); idx.len() * d];
        for (o, &i) in idx.iter().enumerate() {
            vals[o * d..(o + 1) * d].copy_from_slice(vx.row(i as usize));
        }
        let shape = vec![idx.len(), d];
        let ng = self.nodes[x.0].needs_grad;
        self.push(Op::GatherRows(x, idx), Tensor::from_vec(shape, vals)?, ng, Vec::new())
    }

    /// Sum message rows into their target rows: `out[r] = Σ_{e: targets[e]=r}
    /// messages[e]`, accumulated in ascending edge index order. Rows with no
    /// incoming message are zero.
    pub fn scatter_sum(
        &mut self,
        messages: TensorId,
        targets: Arc<Vec<u32>>,
        n_rows: usize,
    ) -> Result<TensorId> {
        let vm = &self.nodes[messages.0].value;
        let d = vm.last_dim();
        if vm.rows() != targets.len() {
            return Err(LamError::dim(format!(
                "scatter_sum: {} messages vs {} targets",
                vm.rows(),
                targets.len()
            )));
        }
        for &t in targets.iter() {
            if t as usize >= n_rows {
                return Err(LamError::Index(format!(
                    "scatter_sum: target {} out of {} rows",
                    t, n_rows
                )));
            }
        }
        let mut vals = vec![S::zero(); n_rows * d];
        for (e, &t) in targets.iter().enumerate() {
            let row = vm.row(e);
            let out = &mut vals[t as usize * d..(t as usize + 1) * d];
            for c in 0..d {
                out[c] += row[c];
            }
        }
        let shape = vec![n_rows, d];
        let ng = self.nodes[messages.0].needs_grad;
        self.push(
            Op::ScatterSum { messages, targets },
            Tensor::from_vec(shape, vals)?,
            ng,
            Vec::new(),
        )
    }

    /// Copy of `x` with `rows` replaced by the rows of `replacement` (a plain
    /// constant). The replaced rows receive zero gradient.
    pub fn overwrite_rows(
        &mut self,
        x: TensorId,
        rows: Arc<Vec<u32>>,
        replacement: &Tensor<S>,
    ) -> Result<TensorId> {
        let vx = &self.nodes[x.0].value;
        if vx.shape() != replacement.shape() {
            return Err(LamError::dim(format!(
                "overwrite_rows: shapes {:?} vs {:?}",
                vx.shape(),
                replacement.shape()
            )));
        }
        let d = vx.last_dim();
        let n = vx.rows();
        for &r in rows.iter() {
            if r as usize >= n {
                return Err(LamError::Index(format!(
                    "overwrite_rows: row {} out of {}",
                    r, n
                )));
            }
        }
        let mut vals = vx.values().to_vec();
        for &r in rows.iter() {
            let r = r as usize;
            vals[r * d..(r + 1) * d].copy_from_slice(replacement.row(r));
        }
        let shape = vx.shape().to_vec();
        let ng = self.nodes[x.0].needs_grad;
        self.push(Op::OverwriteRows(x, rows), Tensor::from_vec(shape, vals)?, ng, Vec::new())
    }

    pub fn sum(&mut self, x: TensorId) -> Result<TensorId> {
        let mut s = S::zero();
        for &v in self.nodes[x.0].value.values() {
            s += v;
        }
        let ng = self.nodes[x.0].needs_grad;
        self.push(Op::Sum(x), Tensor::scalar(s), ng, Vec::new())
    }

    pub fn mean(&mut self, x: TensorId) -> Result<TensorId> {
        let n = self.nodes[x.0].value.numel();
        if n == 0 {
            return Err(LamError::dim("mean of empty tensor"));
        }
        let mut s = S::zero();
        for &v in self.nodes[x.0].value.values() {
            s += v;
        }
        let ng = self.nodes[x.0].needs_grad;
        self.push(Op::Mean(x), Tensor::scalar(s / S::from_f64(n as f64)), ng, Vec::new())
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. The gradient of the root with
    /// respect to itself is 1.
    pub fn backward(&self, root: TensorId) -> Result<Gradients<S>> {
        let rv = &self.nodes[root.0].value;
        if !rv.is_scalar() {
            return Err(LamError::contract(format!(
                "backward root must be scalar, got shape {:?}",
                rv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![S::one()]);

        for i in (0..=root.0).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.accumulate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn grad_slot<'a>(
        &self,
        grads: &'a mut [Option<Vec<S>>],
        id: TensorId,
    ) -> Option<&'a mut Vec<S>> {
        if !self.nodes[id.0].needs_grad {
            return None;
        }
        let n = self.nodes[id.0].value.numel();
        Some(grads[id.0].get_or_insert_with(|| vec![S::zero(); n]))
    }

    fn accumulate(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                if let Some(ga) = self.grad_slot(grads, *a) {
                    mm_nt(g, vb.values(), m, n, k, ga);
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    mm_tn(va.values(), g, m, k, n, gb);
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    axpy(S::one(), g, ga);
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    axpy(S::one(), g, gb);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    axpy(S::one(), g, ga);
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    axpy(-S::one(), g, gb);
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.nodes[a.0].needs_grad {
                    let vb: Vec<S> = self.nodes[b.0].value.values().to_vec();
                    let ga = self.grad_slot(grads, a).unwrap();
                    for (i, &gv) in g.iter().enumerate() {
                        ga[i] += gv * vb[i];
                    }
                }
                if self.nodes[b.0].needs_grad {
                    let va: Vec<S> = self.nodes[a.0].value.values().to_vec();
                    let gb = self.grad_slot(grads, b).unwrap();
                    for (i, &gv) in g.iter().enumerate() {
                        gb[i] += gv * va[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                let cs = S::from_f64(*c);
                if let Some(ga) = self.grad_slot(grads, *a) {
                    axpy(cs, g, ga);
                }
            }
            Op::AddBias(x, bias) => {
                let d = self.nodes[bias.0].value.numel();
                let rows = g.len() / d;
                if let Some(gx) = self.grad_slot(grads, *x) {
                    axpy(S::one(), g, gx);
                }
                if let Some(gb) = self.grad_slot(grads, *bias) {
                    for r in 0..rows {
                        for c in 0..d {
                            gb[c] += g[r * d + c];
                        }
                    }
                }
            }
            Op::MulCols(x, weights) => {
                let (x, weights) = (*x, *weights);
                let d = self.nodes[weights.0].value.numel();
                let rows = g.len() / d;
                if self.nodes[x.0].needs_grad {
                    let w: Vec<S> = self.nodes[weights.0].value.values().to_vec();
                    let gx = self.grad_slot(grads, x).unwrap();
                    for r in 0..rows {
                        for c in 0..d {
                            gx[r * d + c] += g[r * d + c] * w[c];
                        }
                    }
                }
                if self.nodes[weights.0].needs_grad {
                    let vx: Vec<S> = self.nodes[x.0].value.values().to_vec();
                    let gw = self.grad_slot(grads, weights).unwrap();
                    for r in 0..rows {
                        for c in 0..d {
                            gw[c] += g[r * d + c] * vx[r * d + c];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let widths: Vec<usize> = parts
                    .iter()
                    .map(|p| self.nodes[p.0].value.last_dim())
                    .collect();
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut off = 0;
                for (pi, &p) in parts.iter().enumerate() {
                    let w = widths[pi];
                    if let Some(gp) = self.grad_slot(grads, p) {
                        for r in 0..rows {
                            for c in 0..w {
                                gp[r * w + c] += g[r * total + off + c];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::Swish(x) => {
                let x = *x;
                if self.nodes[x.0].needs_grad {
                    let vx: Vec<S> = self.nodes[x.0].value.values().to_vec();
                    let gx = self.grad_slot(grads, x).unwrap();
                    for (i, &gv) in g.iter().enumerate() {
                        let s = sigmoid(vx[i]);
                        gx[i] += gv * s * (S::one() + vx[i] * (S::one() - s));
                    }
                }
            }
            Op::LayerNorm { x, gain, bias } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let d = self.nodes[gain.0].value.numel();
                let rows = g.len() / d;
                let aux: Vec<S> = self.nodes[i].aux.clone();
                let vx: Vec<S> = self.nodes[x.0].value.values().to_vec();
                let vg: Vec<S> = self.nodes[gain.0].value.values().to_vec();
                let dn = S::from_f64(d as f64);
                if self.nodes[x.0].needs_grad {
                    let gx = self.grad_slot(grads, x).unwrap();
                    for r in 0..rows {
                        let (mean, inv_std) = (aux[2 * r], aux[2 * r + 1]);
                        // dy = g[r] ⊙ gain; dx = (dy − mean(dy) − x̂ · mean(dy ⊙ x̂)) · inv_std
                        let mut m1 = S::zero();
                        let mut m2 = S::zero();
                        for c in 0..d {
                            let dy = g[r * d + c] * vg[c];
                            let xhat = (vx[r * d + c] - mean) * inv_std;
                            m1 += dy;
                            m2 += dy * xhat;
                        }
                        m1 /= dn;
                        m2 /= dn;
                        for c in 0..d {
                            let dy = g[r * d + c] * vg[c];
                            let xhat = (vx[r * d + c] - mean) * inv_std;
                            gx[r * d + c] += (dy - m1 - xhat * m2) * inv_std;
                        }
                    }
                }
                if self.nodes[gain.0].needs_grad {
                    let gg = self.grad_slot(grads, gain).unwrap();
                    for r in 0..rows {
                        let (mean, inv_std) = (aux[2 * r], aux[2 * r + 1]);
                        for c in 0..d {
                            let xhat = (vx[r * d + c] - mean) * inv_std;
                            gg[c] += g[r * d + c] * xhat;
                        }
                    }
                }
                if let Some(gb) = self.grad_slot(grads, bias) {
                    for r in 0..rows {
                        for c in 0..d {
                            gb[c] += g[r * d + c];
                        }
                    }
                }
            }
            Op::GatherRows(x, idx) => {
                let d = g.len() / idx.len().max(1);
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for (o, &src) in idx.iter().enumerate() {
                        let src = src as usize;
                        for c in 0..d {
                            gx[src * d + c] += g[o * d + c];
                        }
                    }
                }
            }
            Op::ScatterSum { messages, targets } => {
                let d = self.nodes[messages.0].value.last_dim();
                if let Some(gm) = self.grad_slot(grads, *messages) {
                    for (e, &t) in targets.iter().enumerate() {
                        let t = t as usize;
                        for c in 0..d {
                            gm[e * d + c] += g[t * d + c];
                        }
                    }
                }
            }
            Op::OverwriteRows(x, rows) => {
                let d = self.nodes[x.0].value.last_dim();
                let n = self.nodes[x.0].value.rows();
                if let Some(gx) = self.grad_slot(grads, *x) {
                    let mut replaced = vec![false; n];
                    for &r in rows.iter() {
                        replaced[r as usize] = true;
                    }
                    for r in 0..n {
                        if !replaced[r] {
                            for c in 0..d {
                                gx[r * d + c] += g[r * d + c];
                            }
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    let gv = g[0];
                    for v in gx.iter_mut() {
                        *v += gv;
                    }
                }
            }
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.numel();
                if let Some(gx) = self.grad_slot(grads, *x) {
                    let gv = g[0] / S::from_f64(n as f64);
                    for v in gx.iter_mut() {
                        *v += gv;
                    }
                }
            }
        }
    }
}

#[inline]
fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// `out += a (m×k) · b (k×n)`.
fn mm_nn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
}

/// `out += a (m×n) · bᵀ  where b is (k×n)`; result is (m×k).
fn mm_nt<S: Scalar>(a: &[S], b: &[S], m: usize, n: usize, k: usize, out: &mut [S]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = S::zero();
            for j in 0..n {
                acc += arow[j] * brow[j];
            }
            out[i * k + p] += acc;
        }
    }
}

/// `out += aᵀ · b  where a is (m×k), b is (m×n)`; result is (k×n).
fn mm_tn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == S::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
}

fn axpy<S: Scalar>(alpha: S, x: &[S], y: &mut [S]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn leafv(tape: &mut Tape, vals: Vec<f64>) -> TensorId {
        tape.leaf(Tensor::vector(vals), true)
    }

    fn leafm(tape: &mut Tape, r: usize, c: usize, vals: Vec<f64>) -> TensorId {
        tape.leaf(Tensor::matrix(r, c, vals).unwrap(), true)
    }

    /// Central finite differences of a scalar-valued function of one leaf.
    fn fd_grad(build: impl Fn(&mut Tape, &Tensor<f64>) -> TensorId, x0: &Tensor<f64>) -> Vec<f64> {
        let h = 1e-5;
        let mut g = Vec::with_capacity(x0.numel());
        for i in 0..x0.numel() {
            let mut xp = x0.clone();
            xp.values_mut()[i] += h;
            let mut xm = x0.clone();
            xm.values_mut()[i] -= h;
            let mut tp = Tape::new();
            let fp = build(&mut tp, &xp);
            let mut tm = Tape::new();
            let fm = build(&mut tm, &xm);
            g.push(
                (tp.value(fp).item().unwrap() - tm.value(fm).item().unwrap()) / (2.0 * h),
            );
        }
        g
    }

    fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
            .fold(0.0, f64::max)
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let a = leafm(&mut t, 2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let b = leafm(&mut t, 2, 1, vec![3.0, 4.0]);
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).values(), &[3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_case_and_gradient() {
        let mut t = Tape::new();
        let a = leafm(&mut t, 1, 2, vec![1.0, 2.0]);
        let b = leafm(&mut t, 2, 1, vec![3.0, 4.0]);
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).values(), &[11.0]);
        let loss = t.sum(c).unwrap();
        let g = t.backward(loss).unwrap();
        // d sum(a·b) / da = bᵀ
        assert_eq!(g.get(a).unwrap(), &[3.0, 4.0]);
        assert_eq!(g.get(b).unwrap(), &[1.0, 2.0]);

        // against finite differences
        let b0 = Tensor::matrix(2, 3, vec![0.3, -0.7, 1.1, 0.2, 0.5, -0.4]).unwrap();
        let x0 = Tensor::matrix(2, 2, vec![0.9, -1.2, 0.4, 2.0]).unwrap();
        let fd = fd_grad(
            |tape, x| {
                let a = tape.leaf(x.clone(), true);
                let b = tape.leaf(b0.clone(), false);
                let c = tape.matmul(a, b).unwrap();
                let sq = tape.mul(c, c).unwrap();
                tape.sum(sq).unwrap()
            },
            &x0,
        );
        let mut tape = Tape::new();
        let a = tape.leaf(x0.clone(), true);
        let b = tape.leaf(b0, false);
        let c = tape.matmul(a, b).unwrap();
        let sq = tape.mul(c, c).unwrap();
        let loss = tape.sum(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(max_rel_err(g.get(a).unwrap(), &fd) < 1e-4);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut t = Tape::new();
        let a = leafm(&mut t, 1, 2, vec![1.0, 2.0]);
        let b = leafm(&mut t, 3, 1, vec![1.0, 2.0, 3.0]);
        assert!(matches!(t.matmul(a, b), Err(LamError::Dim(_))));
    }

    #[test]
    fn concat_cases() {
        let mut t = Tape::new();
        let a = leafv(&mut t, vec![1.0, 2.0]);
        let single = t.concat_cols(&[a]).unwrap();
        assert_eq!(t.value(single).values(), &[1.0, 2.0]);

        let b = leafv(&mut t, vec![1.0]);
        let c = leafv(&mut t, vec![2.0, 3.0]);
        let cat = t.concat_cols(&[b, c]).unwrap();
        assert_eq!(t.value(cat).values(), &[1.0, 2.0, 3.0]);
        assert_eq!(t.value(cat).shape(), &[3]);

        let loss = t.sum(cat).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(b).unwrap(), &[1.0]);
        assert_eq!(g.get(c).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn concat_incompatible_rows() {
        let mut t = Tape::new();
        let a = leafm(&mut t, 2, 1, vec![1.0, 2.0]);
        let b = leafm(&mut t, 3, 1, vec![1.0, 2.0, 3.0]);
        assert!(matches!(t.concat_cols(&[a, b]), Err(LamError::Dim(_))));
    }

    #[test]
    fn swish_values_and_derivative() {
        let mut t = Tape::new();
        let x = leafv(&mut t, vec![0.0, 20.0, 2.0]);
        let y = t.swish(x).unwrap();
        let v = t.value(y).values();
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 20.0).abs() < 1e-6);
        assert_relative_eq!(v[2], 1.7615941559557646, max_relative = 1e-12);

        // derivative at 0 is 0.5, checked against finite differences
        let x0 = Tensor::vector(vec![0.0, -1.3, 0.7]);
        let fd = fd_grad(
            |tape, x| {
                let xi = tape.leaf(x.clone(), true);
                let s = tape.swish(xi).unwrap();
                tape.sum(s).unwrap()
            },
            &x0,
        );
        assert_relative_eq!(fd[0], 0.5, epsilon = 1e-6);
        let mut tape = Tape::new();
        let xi = tape.leaf(x0, true);
        let s = tape.swish(xi).unwrap();
        let loss = tape.sum(s).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(max_rel_err(g.get(xi).unwrap(), &fd) < 1e-4);
        assert_relative_eq!(g.get(xi).unwrap()[0], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn layer_norm_cases() {
        let mut t = Tape::new();
        let x = leafm(&mut t, 1, 2, vec![1.0, 1.0]);
        let g1 = leafv(&mut t, vec![1.0, 1.0]);
        let b0 = leafv(&mut t, vec![0.0, 0.0]);
        let y = t.layer_norm(x, g1, b0).unwrap();
        // constant row normalizes to zero
        assert_eq!(t.value(y).values(), &[0.0, 0.0]);

        let x2 = leafm(&mut t, 1, 2, vec![0.0, 2.0]);
        let b5 = leafv(&mut t, vec![5.0, 5.0]);
        let y2 = t.layer_norm(x2, g1, b5).unwrap();
        let v = t.value(y2).values();
        // mean 1, std 1 -> [4, 6] up to the epsilon floor
        assert_relative_eq!(v[0], 4.0, epsilon = 1e-4);
        assert_relative_eq!(v[1], 6.0, epsilon = 1e-4);
    }

    #[test]
    fn layer_norm_statistics_before_affine() {
        // identity affine: output itself must have near-zero mean, unit variance
        let mut t = Tape::new();
        let x = leafm(&mut t, 2, 4, vec![0.3, -1.2, 2.5, 0.7, 10.0, 11.0, 9.0, 14.0]);
        let g = leafv(&mut t, vec![1.0; 4]);
        let b = leafv(&mut t, vec![0.0; 4]);
        let y = t.layer_norm(x, g, b).unwrap();
        for r in 0..2 {
            let row = t.value(y).row(r);
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn layer_norm_gradient_matches_fd() {
        let x0 = Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 3.0, 0.1, -0.7]).unwrap();
        let gain0 = Tensor::vector(vec![1.3, 0.8, -0.5]);
        let bias0 = Tensor::vector(vec![0.1, -0.2, 0.4]);

        let build = |tape: &mut Tape, x: &Tensor<f64>| {
            let xi = tape.leaf(x.clone(), true);
            let g = tape.leaf(gain0.clone(), true);
            let b = tape.leaf(bias0.clone(), true);
            let y = tape.layer_norm(xi, g, b).unwrap();
            let sq = tape.mul(y, y).unwrap();
            tape.sum(sq).unwrap()
        };
        let fd = fd_grad(build, &x0);
        let mut tape = Tape::new();
        let xi = tape.leaf(x0.clone(), true);
        let g = tape.leaf(gain0.clone(), true);
        let b = tape.leaf(bias0.clone(), true);
        let y = tape.layer_norm(xi, g, b).unwrap();
        let sq = tape.mul(y, y).unwrap();
        let loss = tape.sum(sq).unwrap();
        let gr = tape.backward(loss).unwrap();
        assert!(max_rel_err(gr.get(xi).unwrap(), &fd) < 1e-4);

        // gain gradient by FD as well
        let h = 1e-5;
        let mut fd_gain = Vec::new();
        for i in 0..3 {
            let mut gp = gain0.clone();
            gp.values_mut()[i] += h;
            let mut gm = gain0.clone();
            gm.values_mut()[i] -= h;
            let eval = |gv: &Tensor<f64>| {
                let mut tp = Tape::new();
                let xi = tp.leaf(x0.clone(), true);
                let g = tp.leaf(gv.clone(), true);
                let b = tp.leaf(bias0.clone(), true);
                let y = tp.layer_norm(xi, g, b).unwrap();
                let sq = tp.mul(y, y).unwrap();
                let l = tp.sum(sq).unwrap();
                tp.value(l).item().unwrap()
            };
            fd_gain.push((eval(&gp) - eval(&gm)) / (2.0 * h));
        }
        assert!(max_rel_err(gr.get(g).unwrap(), &fd_gain) < 1e-4);
    }

    #[test]
    fn layer_norm_zero_width_errors() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.leaf(Tensor::zeros(vec![2, 0]), true);
        let g = t.leaf(Tensor::zeros(vec![0]), true);
        let b = t.leaf(Tensor::zeros(vec![0]), true);
        assert!(matches!(t.layer_norm(x, g, b), Err(LamError::Dim(_))));
    }

    #[test]
    fn scatter_sum_cases() {
        let mut t = Tape::new();
        let m = leafm(&mut t, 1, 1, vec![7.0]);
        let out = t.scatter_sum(m, Arc::new(vec![0]), 2).unwrap();
        assert_eq!(t.value(out).values(), &[7.0, 0.0]);

        let m2 = leafm(&mut t, 2, 1, vec![1.0, 2.0]);
        let out2 = t.scatter_sum(m2, Arc::new(vec![1, 1]), 2).unwrap();
        assert_eq!(t.value(out2).values(), &[0.0, 3.0]);

        let loss = t.sum(out2).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(m2).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn scatter_sum_out_of_range() {
        let mut t = Tape::new();
        let m = leafm(&mut t, 1, 1, vec![1.0]);
        assert!(matches!(
            t.scatter_sum(m, Arc::new(vec![2]), 2),
            Err(LamError::Index(_))
        ));
    }

    #[test]
    fn gather_and_overwrite_rows() {
        let mut t = Tape::new();
        let x = leafm(&mut t, 3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let gathered = t.gather_rows(x, Arc::new(vec![2, 0])).unwrap();
        assert_eq!(t.value(gathered).values(), &[5.0, 6.0, 1.0, 2.0]);

        let replacement = Tensor::matrix(3, 2, vec![9.0; 6]).unwrap();
        let ow = t.overwrite_rows(x, Arc::new(vec![1]), &replacement).unwrap();
        assert_eq!(t.value(ow).values(), &[1.0, 2.0, 9.0, 9.0, 5.0, 6.0]);

        let loss = t.sum(ow).unwrap();
        let g = t.backward(loss).unwrap();
        // overwritten row blocks gradient
        assert_eq!(g.get(x).unwrap(), &[1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_analytic_and_constant() {
        // loss = sum(x^2), x = [1, 2] -> grad [2, 4]
        let mut t = Tape::new();
        let x = leafv(&mut t, vec![1.0, 2.0]);
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum(sq).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, 4.0]);

        // loss = constant -> zero/absent grads
        let mut t2 = Tape::new();
        let p = leafv(&mut t2, vec![1.0, 2.0]);
        let c = t2.constant(Tensor::scalar(5.0));
        let g2 = t2.backward(c).unwrap();
        assert_eq!(g2.get_or_zeros(p, 2), vec![0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = leafv(&mut t, vec![1.0, 2.0]);
        assert!(matches!(t.backward(x), Err(LamError::Contract(_))));
    }

    #[test]
    fn random_composite_graph_matches_fd() {
        // a composite of matmul, concat, swish, layer_norm, scatter, gather
        let x0 = Tensor::matrix(3, 2, vec![0.4, -0.9, 1.2, 0.3, -0.5, 0.8]).unwrap();
        let w0 = Tensor::matrix(4, 3, vec![0.2, -0.1, 0.7, 0.5, 0.9, -0.3, 0.1, 0.6, -0.8, 0.4, -0.2, 0.35]).unwrap();
        let gain0 = Tensor::vector(vec![1.1, 0.9, 1.05]);
        let bias0 = Tensor::vector(vec![0.0, 0.1, -0.1]);

        let build = |tape: &mut Tape, x: &Tensor<f64>| {
            let xi = tape.leaf(x.clone(), true);
            let g = tape.gather_rows(xi, Arc::new(vec![0, 2, 1, 0])).unwrap();
            let cat = tape.concat_cols(&[g, g]).unwrap();
            let w = tape.leaf(w0.clone(), false);
            let h = tape.matmul(cat, w).unwrap();
            let s = tape.swish(h).unwrap();
            let gn = tape.leaf(gain0.clone(), false);
            let bn = tape.leaf(bias0.clone(), false);
            let ln = tape.layer_norm(s, gn, bn).unwrap();
            let sc = tape.scatter_sum(ln, Arc::new(vec![1, 0, 1, 1]), 2).unwrap();
            let sq = tape.mul(sc, sc).unwrap();
            tape.sum(sq).unwrap()
        };
        let fd = fd_grad(build, &x0);
        let mut tape = Tape::new();
        let loss = build(&mut tape, &x0);
        let g = tape.backward(loss).unwrap();
        let xi = TensorId(0);
        assert!(max_rel_err(g.get(xi).unwrap(), &fd) < 1e-4);
    }

    #[test]
    fn scatter_sum_is_linear() {
        // scatter(αa + βb) = α scatter(a) + β scatter(b)
        let a = vec![0.5, -1.0, 2.0, 0.25];
        let b = vec![1.5, 0.5, -0.75, 3.0];
        let (alpha, beta) = (2.5, -0.75);
        let targets = Arc::new(vec![1u32, 0, 1, 2]);

        let mut t = Tape::new();
        let combined: Vec<f64> = a.iter().zip(&b).map(|(&x, &y)| alpha * x + beta * y).collect();
        let c = t.leaf(Tensor::matrix(4, 1, combined).unwrap(), false);
        let left = t.scatter_sum(c, targets.clone(), 3).unwrap();

        let ai = t.leaf(Tensor::matrix(4, 1, a).unwrap(), false);
        let bi = t.leaf(Tensor::matrix(4, 1, b).unwrap(), false);
        let sa = t.scatter_sum(ai, targets.clone(), 3).unwrap();
        let sb = t.scatter_sum(bi, targets, 3).unwrap();
        let sa_s = t.scale(sa, alpha).unwrap();
        let sb_s = t.scale(sb, beta).unwrap();
        let right = t.add(sa_s, sb_s).unwrap();

        for (l, r) in t.value(left).values().iter().zip(t.value(right).values()) {
            assert_relative_eq!(l, r, epsilon = 1e-12);
        }
    }

    #[test]
    fn deterministic_replay() {
        let run = || -> (Vec<f64>, Vec<f64>) {
            let mut t: Tape<f64> = Tape::new();
            let x = t.leaf(Tensor::vector(vec![0.3, -1.7, 2.2]), true);
            let s = t.swish(x).unwrap();
            let m = t.mean(s).unwrap();
            let g = t.backward(m).unwrap();
            (
                t.value(m).values().to_vec(),
                g.get(x).unwrap().to_vec(),
            )
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert_eq!(
            v1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            v2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(
            g1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            g2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn strict_tape_rejects_non_finite() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1e150]), true);
        let sq = t.mul(x, x).unwrap(); // 1e600 -> inf
        assert!(matches!(t.mul(sq, sq), Err(LamError::NonFinite(_))));

        let mut f = Tape::fast();
        let x = f.leaf(Tensor::vector(vec![1e150]), true);
        let sq = f.mul(x, x).unwrap();
        assert!(f.mul(sq, sq).is_ok());
    }

    #[test]
    fn f32_mode_runs_the_same_ops() {
        let mut t: Tape<f32> = Tape::new();
        let a = t.leaf(Tensor::matrix(1, 2, vec![1.0f32, 2.0]).unwrap(), true);
        let b = t.leaf(Tensor::matrix(2, 1, vec![3.0f32, 4.0]).unwrap(), true);
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).values(), &[11.0f32]);
        let loss = t.sum(c).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(a).unwrap(), &[3.0f32, 4.0]);
    }
}

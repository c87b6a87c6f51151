//! Define-by-run reverse-mode automatic differentiation over [`Array`] values.
//!
//! A `Tape` records every primitive operation as it is built; node values are
//! computed eagerly, so shape and domain errors surface at construction time.
//! `backward` walks the record in reverse and **accumulates** adjoints into
//! per-node gradient buffers: calling it twice without `reset_grads` doubles
//! the accumulators by design.

use crate::diffcore::array::Array;
use crate::error::{CoreError, Result};

pub type NodeId = usize;

/// A learnable value: name, current value, and the gradient of the most
/// recent backward pass (zero when untouched).
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Array,
    pub grad: Array,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Array) -> Self {
        let grad = Array::zeros(&value.shape);
        Parameter {
            name: name.into(),
            value,
            grad,
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Softplus(NodeId),
    Gelu(NodeId),
    Clamp { x: NodeId, lo: f64, hi: f64 },
    MatMul { a: NodeId, b: NodeId },
    Bmm { a: NodeId, b: NodeId },
    BmmNt { a: NodeId, b: NodeId },
    SoftmaxLastDim { x: NodeId },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, eps: f64 },
    Reshape(NodeId),
    Permute { x: NodeId, perm: Vec<usize> },
    Concat { xs: Vec<NodeId>, axis: usize },
    GatherRows { x: NodeId, idx: Vec<usize> },
    AddRow { x: NodeId, row: NodeId },
    MulCol { x: NodeId, col: NodeId },
    MulScalarNode { x: NodeId, s: NodeId },
    SumAll(NodeId),
    SumLastKeep(NodeId),
    HazardNorm(NodeId),
}

#[derive(Default)]
pub struct Tape {
    vals: Vec<Array>,
    ops: Vec<Op>,
    grads: Vec<Option<Array>>,
}

/// Dense (m,k) x (k,n) matrix product on raw slices.
fn matmul_slices(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                o_row[j] += av * b_row[j];
            }
        }
    }
}

/// (m,k)^T x (m,n) -> (k,n), i.e. out += a^T . g with a:(m,k), g:(m,n).
fn matmul_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let g_row = &g[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let o_row = &mut out[kk * n..(kk + 1) * n];
            for j in 0..n {
                o_row[j] += av * g_row[j];
            }
        }
    }
}

/// (m,n) x (k,n)^T -> (m,k), i.e. out += g . b^T with g:(m,n), b:(k,n).
fn matmul_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        let o_row = &mut out[i * k..(i + 1) * k];
        for kk in 0..k {
            let b_row = &b[kk * n..(kk + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += g_row[j] * b_row[j];
            }
            o_row[kk] += acc;
        }
    }
}

fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal CDF via the error function (exact-erf GELU form).
fn phi(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2))
}

fn permuted_strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Reorder `data` with axes permuted: output axis i takes input axis perm[i].
fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = permuted_strides(shape);
    let out_strides = permuted_strides(&out_shape);
    let mut out = vec![0.0; data.len()];
    // walk the input linearly, decomposing the flat index into coordinates
    let mut idx = vec![0usize; rank];
    for (flat, &v) in data.iter().enumerate() {
        let mut rem = flat;
        for (d, st) in in_strides.iter().enumerate() {
            idx[d] = rem / st;
            rem %= st;
        }
        let mut out_flat = 0;
        for (i, &p) in perm.iter().enumerate() {
            out_flat += idx[p] * out_strides[i];
        }
        out[out_flat] = v;
    }
    (out_shape, out)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    pub fn val(&self, id: NodeId) -> &Array {
        &self.vals[id]
    }

    /// Gradient accumulated for `id`; zeros if the node was never reached.
    pub fn grad(&self, id: NodeId) -> Array {
        match &self.grads[id] {
            Some(g) => g.clone(),
            None => Array::zeros(&self.vals[id].shape),
        }
    }

    pub fn reset_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn push(&mut self, val: Array, op: Op) -> NodeId {
        self.vals.push(val);
        self.ops.push(op);
        self.grads.push(None);
        self.vals.len() - 1
    }

    pub fn leaf(&mut self, val: Array) -> NodeId {
        self.push(val, Op::Leaf)
    }

    fn binary_elementwise(
        &mut self,
        opname: &'static str,
        a: NodeId,
        b: NodeId,
    ) -> Result<(Vec<usize>, Vec<f64>, Vec<f64>)> {
        let (va, vb) = (&self.vals[a], &self.vals[b]);
        if va.shape != vb.shape {
            return Err(CoreError::shape(
                opname,
                format!("{:?} vs {:?}", va.shape, vb.shape),
            ));
        }
        Ok((va.shape.clone(), va.data.clone(), vb.data.clone()))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (shape, da, db) = self.binary_elementwise("add", a, b)?;
        let data = da.iter().zip(&db).map(|(x, y)| x + y).collect();
        Ok(self.push(Array { shape, data }, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (shape, da, db) = self.binary_elementwise("sub", a, b)?;
        let data = da.iter().zip(&db).map(|(x, y)| x - y).collect();
        Ok(self.push(Array { shape, data }, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (shape, da, db) = self.binary_elementwise("mul", a, b)?;
        let data = da.iter().zip(&db).map(|(x, y)| x * y).collect();
        Ok(self.push(Array { shape, data }, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let val = self.vals[x].map(|v| v * c);
        self.push(val, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let val = self.vals[x].map(|v| v + c);
        self.push(val, Op::AddScalar(x))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let val = self.vals[x].map(f64::exp);
        self.push(val, Op::Exp(x))
    }

    /// Natural log; rejects non-positive inputs (clamp upstream instead).
    pub fn ln(&mut self, x: NodeId) -> Result<NodeId> {
        if self.vals[x].data.iter().any(|&v| v <= 0.0) {
            return Err(CoreError::Validation(
                "ln requires strictly positive inputs".into(),
            ));
        }
        let val = self.vals[x].map(f64::ln);
        Ok(self.push(val, Op::Ln(x)))
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let val = self.vals[x].map(stable_softplus);
        self.push(val, Op::Softplus(x))
    }

    /// GELU in the exact erf form: x * Phi(x).
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let val = self.vals[x].map(|v| v * phi(v));
        self.push(val, Op::Gelu(x))
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        let val = self.vals[x].map(|v| v.clamp(lo, hi));
        self.push(val, Op::Clamp { x, lo, hi })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.vals[a], &self.vals[b]);
        if va.rank() != 2 || vb.rank() != 2 || va.shape[1] != vb.shape[0] {
            return Err(CoreError::shape(
                "matmul",
                format!("{:?} x {:?}", va.shape, vb.shape),
            ));
        }
        let (m, k, n) = (va.shape[0], va.shape[1], vb.shape[1]);
        let mut out = vec![0.0; m * n];
        matmul_slices(&va.data, &vb.data, m, k, n, &mut out);
        Ok(self.push(
            Array {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMul { a, b },
        ))
    }

    /// Batched matmul: (N,m,k) x (N,k,n) -> (N,m,n).
    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.vals[a], &self.vals[b]);
        if va.rank() != 3 || vb.rank() != 3 || va.shape[0] != vb.shape[0] || va.shape[2] != vb.shape[1]
        {
            return Err(CoreError::shape(
                "bmm",
                format!("{:?} x {:?}", va.shape, vb.shape),
            ));
        }
        let (nb, m, k, n) = (va.shape[0], va.shape[1], va.shape[2], vb.shape[2]);
        let mut out = vec![0.0; nb * m * n];
        for i in 0..nb {
            matmul_slices(
                &va.data[i * m * k..(i + 1) * m * k],
                &vb.data[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        Ok(self.push(
            Array {
                shape: vec![nb, m, n],
                data: out,
            },
            Op::Bmm { a, b },
        ))
    }

    /// Batched matmul against a transposed right-hand side:
    /// (N,m,k) x (N,n,k) -> (N,m,n).
    pub fn bmm_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.vals[a], &self.vals[b]);
        if va.rank() != 3 || vb.rank() != 3 || va.shape[0] != vb.shape[0] || va.shape[2] != vb.shape[2]
        {
            return Err(CoreError::shape(
                "bmm_nt",
                format!("{:?} x {:?}^T", va.shape, vb.shape),
            ));
        }
        let (nb, m, k, n) = (va.shape[0], va.shape[1], va.shape[2], vb.shape[1]);
        let mut out = vec![0.0; nb * m * n];
        for i in 0..nb {
            matmul_nt(
                &va.data[i * m * k..(i + 1) * m * k],
                &vb.data[i * n * k..(i + 1) * n * k],
                m,
                k,
                n,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        Ok(self.push(
            Array {
                shape: vec![nb, m, n],
                data: out,
            },
            Op::BmmNt { a, b },
        ))
    }

    /// Max-shifted softmax over the last axis. `mask` (same element count,
    /// true = position participates) zeroes excluded positions exactly; every
    /// row must keep at least one admitted position.
    pub fn softmax_lastdim(&mut self, x: NodeId, mask: Option<Vec<bool>>) -> Result<NodeId> {
        let vx = &self.vals[x];
        let n = vx.last_dim();
        if n == 0 {
            return Err(CoreError::shape("softmax_lastdim", "empty last axis"));
        }
        if let Some(m) = &mask {
            if m.len() != vx.numel() {
                return Err(CoreError::shape(
                    "softmax_lastdim",
                    format!("mask length {} vs {} elements", m.len(), vx.numel()),
                ));
            }
        }
        let rows = vx.numel() / n;
        let mut out = vec![0.0; vx.numel()];
        for r in 0..rows {
            let base = r * n;
            let allowed = |j: usize| mask.as_ref().map_or(true, |m| m[base + j]);
            let mut mx = f64::NEG_INFINITY;
            for j in 0..n {
                if allowed(j) {
                    mx = mx.max(vx.data[base + j]);
                }
            }
            if mx == f64::NEG_INFINITY {
                return Err(CoreError::Validation(format!(
                    "softmax_lastdim: row {r} is fully masked"
                )));
            }
            let mut sum = 0.0;
            for j in 0..n {
                if allowed(j) {
                    let e = (vx.data[base + j] - mx).exp();
                    out[base + j] = e;
                    sum += e;
                }
            }
            for j in 0..n {
                out[base + j] /= sum;
            }
        }
        let shape = vx.shape.clone();
        Ok(self.push(Array { shape, data: out }, Op::SoftmaxLastDim { x }))
    }

    /// Layer normalization over the last axis with learnable gain/bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let d = self.vals[x].last_dim();
        if self.vals[gain].shape != vec![d] || self.vals[bias].shape != vec![d] {
            return Err(CoreError::shape(
                "layer_norm",
                format!(
                    "gain {:?} / bias {:?} vs last axis {d}",
                    self.vals[gain].shape, self.vals[bias].shape
                ),
            ));
        }
        let vx = &self.vals[x];
        let rows = vx.numel() / d;
        let vg = &self.vals[gain].data;
        let vb = &self.vals[bias].data;
        let mut out = vec![0.0; vx.numel()];
        for r in 0..rows {
            let row = &vx.data[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out[r * d + j] = (row[j] - mean) * inv * vg[j] + vb[j];
            }
        }
        let shape = vx.shape.clone();
        Ok(self.push(Array { shape, data: out }, Op::LayerNorm { x, gain, bias, eps }))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let val = self.vals[x].reshape(shape)?;
        Ok(self.push(val, Op::Reshape(x)))
    }

    pub fn permute(&mut self, x: NodeId, perm: &[usize]) -> Result<NodeId> {
        let vx = &self.vals[x];
        let rank = vx.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(CoreError::shape(
                "permute",
                format!("perm {:?} for rank {rank}", perm),
            ));
        }
        let (shape, data) = permute_data(&vx.data, &vx.shape, perm);
        Ok(self.push(Array { shape, data }, Op::Permute { x, perm: perm.to_vec() }))
    }

    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(CoreError::Validation("concat of zero arrays".into()));
        }
        let first = self.vals[xs[0]].shape.clone();
        if axis >= first.len() {
            return Err(CoreError::shape(
                "concat",
                format!("axis {axis} for rank {}", first.len()),
            ));
        }
        let mut total_axis = 0usize;
        for &x in xs {
            let s = &self.vals[x].shape;
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(CoreError::shape(
                    "concat",
                    format!("{:?} vs {:?} along axis {axis}", s, first),
                ));
            }
            total_axis += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total_axis;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![0.0; shape.iter().product()];
        let out_block = total_axis * inner;
        let mut offset = 0usize;
        for &x in xs {
            let ax = self.vals[x].shape[axis];
            let src = &self.vals[x].data;
            for o in 0..outer {
                let dst = o * out_block + offset * inner;
                data[dst..dst + ax * inner]
                    .copy_from_slice(&src[o * ax * inner..(o + 1) * ax * inner]);
            }
            offset += ax;
        }
        Ok(self.push(
            Array { shape, data },
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
        ))
    }

    /// Row lookup: x (R,C), indices into rows -> (len,C). Out-of-range rejected.
    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let vx = &self.vals[x];
        if vx.rank() != 2 {
            return Err(CoreError::shape("gather_rows", format!("{:?}", vx.shape)));
        }
        let (r, c) = (vx.shape[0], vx.shape[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(CoreError::Validation(format!(
                "gather_rows: index {bad} out of range for {r} rows"
            )));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(&vx.data[i * c..(i + 1) * c]);
        }
        Ok(self.push(
            Array {
                shape: vec![idx.len(), c],
                data,
            },
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Broadcast add of a length-C vector along the last axis of x (...,C).
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let c = self.vals[x].last_dim();
        if self.vals[row].shape != vec![c] {
            return Err(CoreError::shape(
                "add_row",
                format!("{:?} + {:?}", self.vals[x].shape, self.vals[row].shape),
            ));
        }
        let vrow = self.vals[row].data.clone();
        let vx = &self.vals[x];
        let data = vx
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| v + vrow[i % c])
            .collect();
        let shape = vx.shape.clone();
        Ok(self.push(Array { shape, data }, Op::AddRow { x, row }))
    }

    /// Broadcast multiply of a column (R,1) across x (R,C).
    pub fn mul_col(&mut self, x: NodeId, col: NodeId) -> Result<NodeId> {
        let vx = &self.vals[x];
        if vx.rank() != 2 || self.vals[col].shape != vec![vx.shape[0], 1] {
            return Err(CoreError::shape(
                "mul_col",
                format!("{:?} * {:?}", vx.shape, self.vals[col].shape),
            ));
        }
        let (r, c) = (vx.shape[0], vx.shape[1]);
        let vcol = self.vals[col].data.clone();
        let vx = &self.vals[x];
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] = vx.data[i * c + j] * vcol[i];
            }
        }
        Ok(self.push(
            Array {
                shape: vec![r, c],
                data,
            },
            Op::MulCol { x, col },
        ))
    }

    /// Multiply every element of x by a single-element node s.
    pub fn mul_scalar_node(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if self.vals[s].numel() != 1 {
            return Err(CoreError::shape(
                "mul_scalar_node",
                format!("scalar operand has shape {:?}", self.vals[s].shape),
            ));
        }
        let sv = self.vals[s].data[0];
        let val = self.vals[x].map(|v| v * sv);
        Ok(self.push(val, Op::MulScalarNode { x, s }))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.vals[x].data.iter().sum();
        self.push(Array::scalar(s), Op::SumAll(x))
    }

    /// Sum over the last axis, keeping it with extent 1: (...,K) -> (...,1).
    pub fn sum_last_keep(&mut self, x: NodeId) -> NodeId {
        let vx = &self.vals[x];
        let k = vx.last_dim();
        let rows = vx.numel() / k;
        let mut shape = vx.shape.clone();
        *shape.last_mut().unwrap() = 1;
        let mut data = vec![0.0; rows];
        for r in 0..rows {
            data[r] = vx.data[r * k..(r + 1) * k].iter().sum();
        }
        self.push(Array { shape, data }, Op::SumLastKeep(x))
    }

    /// Cause-specific hazard normalization over the last axis: given logits
    /// f (...,K), lambda_k = exp(f_k) / (1 + sum_m exp(f_m)), computed with a
    /// shift of max(0, max_m f_m) so the implicit zero logit of the survive
    /// class is covered by the stabilization.
    pub fn hazard_norm(&mut self, x: NodeId) -> NodeId {
        let vx = &self.vals[x];
        let k = vx.last_dim();
        let rows = vx.numel() / k;
        let mut out = vec![0.0; vx.numel()];
        for r in 0..rows {
            let row = &vx.data[r * k..(r + 1) * k];
            let m = row.iter().cloned().fold(0.0f64, f64::max);
            let mut denom = (-m).exp();
            for &f in row {
                denom += (f - m).exp();
            }
            for j in 0..k {
                out[r * k + j] = (row[j] - m).exp() / denom;
            }
        }
        let shape = vx.shape.clone();
        self.push(Array { shape, data: out }, Op::HazardNorm(x))
    }

    /// Reverse-mode sweep from a scalar loss node. Adjoints are accumulated
    /// into per-node gradient buffers (additive across calls).
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.vals[loss].numel() != 1 {
            return Err(CoreError::Validation(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.vals[loss].shape
            )));
        }
        if !self.vals[loss].data[0].is_finite() {
            return Err(CoreError::NonFinite("backward loss"));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.vals.len()];
        adj[loss] = Some(vec![1.0]);

        fn add_into(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
            let buf = slot.get_or_insert_with(|| vec![0.0; len]);
            f(buf);
        }

        for id in (0..=loss).rev() {
            let g = match adj[id].take() {
                Some(g) => g,
                None => continue,
            };
            // re-stash: the node may also be a later op's input read below
            let op = self.ops[id].clone();
            match op {
                Op::Leaf => {
                    adj[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    add_into(&mut adj[a], self.vals[a].numel(), |buf| {
                        for (o, &v) in buf.iter_mut().zip(&g) {
                            *o += v;
                        }
                    });
                    add_into(&mut adj[b], self.vals[b].numel(), |buf| {
                        for (o, &v) in buf.iter_mut().zip(&g) {
                            *o += v;
                        }
                    });
                }
                Op::Sub(a, b) => {
                    add_into(&mut adj[a], self.vals[a].numel(), |buf| {
                        for (o, &v) in buf.iter_mut().zip(&g) {
                            *o += v;
                        }
                    });
                    add_into(&mut adj[b], self.vals[b].numel(), |buf| {
                        for (o, &v) in buf.iter_mut().zip(&g) {
                            *o -= v;
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.vals[a].data.clone(), self.vals[b].data.clone());
                    add_into(&mut adj[a], va.len(), |buf| {
                        for i in 0..buf.len() {
                            buf[i] += g[i] * vb[i];
                        }
                    });
                    add_into(&mut adj[b], vb.len(), |buf| {
                        for i in 0..buf.len() {
                            buf[i] += g[i] * va[i];
                        }
                    });
                }
                Op::Scale(x, c) => {
                    add_into(&mut adj[x], self.vals[x].numel(), |buf| {
                        for i in 0..buf.len() {
                            buf[i] += g[i] * c;
                        }
                    });
                }
                Op::AddScalar(x) => {
                    add_into(&mut adj[x], self.vals[x].numel(), |buf| {
                        for i in 0..buf.len() {
                            buf[i] += g[i];
                        }
                    });
                }
                Op::Exp(x) => {
                    let y = self.vals[id].data.clone();
                    add_into(&mut adj[x], y.len(), |buf| {
                        for i in 0..buf.len() {
                            buf[i] += g[i] * y[i];
                        }
                    });
                }
                Op::Ln(x) => {
                    let vx = self.vals[x].data.clone();
                    add_into(&mut adj[x], vx.len(), |buf| {
                        for i in 0..buf.len() {
                            buf[i] += g[i] / vx[i];
                        }
                    });
                }
                Op::Softplus(x) => {
                    let vx = self.vals[x].data.clone();
                    add_into(&mut adj[x], vx.len(), |buf| {
                        for i in 0..buf.len() {
                            let sig = 1.0 / (1.0 + (-vx[i]).exp());
                            buf[i] += g[i] * sig;
                        }
                    });
                }
                Op::Gelu(x) => {
                    let vx = self.vals[x].data.clone();
                    add_into(&mut adj[x], vx.len(), |buf| {
                        for i in 0..buf.len() {
                            let v = vx[i];
                            let pdf = INV_SQRT_2PI * (-0.5 * v * v).exp();
                            buf[i] += g[i] * (phi(v) + v * pdf);
                        }
                    });
                }
                Op::Clamp { x, lo, hi } => {
                    let vx = self.vals[x].data.clone();
                    add_into(&mut adj[x], vx.len(), |buf| {
                        for i in 0..buf.len() {
                            if vx[i] > lo && vx[i] < hi {
                                buf[i] += g[i];
                            }
                        }
                    });
                }
                Op::MatMul { a, b } => {
                    let (m, k) = (self.vals[a].shape[0], self.vals[a].shape[1]);
                    let n = self.vals[b].shape[1];
                    let va = self.vals[a].data.clone();
                    let vb = self.vals[b].data.clone();
                    add_into(&mut adj[a], m * k, |buf| {
                        matmul_nt(&g, &vb, m, n, k, buf);
                    });
                    add_into(&mut adj[b], k * n, |buf| {
                        matmul_tn(&va, &g, m, k, n, buf);
                    });
                }
                Op::Bmm { a, b } => {
                    let (nb, m, k) = (
                        self.vals[a].shape[0],
                        self.vals[a].shape[1],
                        self.vals[a].shape[2],
                    );
                    let n = self.vals[b].shape[2];
                    let va = self.vals[a].data.clone();
                    let vb = self.vals[b].data.clone();
                    add_into(&mut adj[a], nb * m * k, |buf| {
                        for i in 0..nb {
                            matmul_nt(
                                &g[i * m * n..(i + 1) * m * n],
                                &vb[i * k * n..(i + 1) * k * n],
                                m,
                                n,
                                k,
                                &mut buf[i * m * k..(i + 1) * m * k],
                            );
                        }
                    });
                    add_into(&mut adj[b], nb * k * n, |buf| {
                        for i in 0..nb {
                            matmul_tn(
                                &va[i * m * k..(i + 1) * m * k],
                                &g[i * m * n..(i + 1) * m * n],
                                m,
                                k,
                                n,
                                &mut buf[i * k * n..(i + 1) * k * n],
                            );
                        }
                    });
                }
                Op::BmmNt { a, b } => {
                    // c_i = a_i . b_i^T ; da_i = g_i . b_i ; db_i = g_i^T . a_i
                    let (nb, m, k) = (
                        self.vals[a].shape[0],
                        self.vals[a].shape[1],
                        self.vals[a].shape[2],
                    );
                    let n = self.vals[b].shape[1];
                    let va = self.vals[a].data.clone();
                    let vb = self.vals[b].data.clone();
                    add_into(&mut adj[a], nb * m * k, |buf| {
                        for i in 0..nb {
                            matmul_slices(
                                &g[i * m * n..(i + 1) * m * n],
                                &vb[i * n * k..(i + 1) * n * k],
                                m,
                                n,
                                k,
                                &mut buf[i * m * k..(i + 1) * m * k],
                            );
                        }
                    });
                    add_into(&mut adj[b], nb * n * k, |buf| {
                        for i in 0..nb {
                            matmul_tn(
                                &g[i * m * n..(i + 1) * m * n],
                                &va[i * m * k..(i + 1) * m * k],
                                m,
                                n,
                                k,
                                &mut buf[i * n * k..(i + 1) * n * k],
                            );
                        }
                    });
                }
                Op::SoftmaxLastDim { x } => {
                    let y = self.vals[id].data.clone();
                    let n = self.vals[id].last_dim();
                    add_into(&mut adj[x], y.len(), |buf| {
                        for r in 0..y.len() / n {
                            let base = r * n;
                            let mut dot = 0.0;
                            for j in 0..n {
                                dot += g[base + j] * y[base + j];
                            }
                            for j in 0..n {
                                buf[base + j] += y[base + j] * (g[base + j] - dot);
                            }
                        }
                    });
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let d = self.vals[x].last_dim();
                    let vx = self.vals[x].data.clone();
                    let vg = self.vals[gain].data.clone();
                    let rows = vx.len() / d;
                    let mut dgain = vec![0.0; d];
                    let mut dbias = vec![0.0; d];
                    let mut dx = vec![0.0; vx.len()];
                    for r in 0..rows {
                        let row = &vx[r * d..(r + 1) * d];
                        let mean = row.iter().sum::<f64>() / d as f64;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for j in 0..d {
                            let xh = (row[j] - mean) * inv;
                            let dxh = g[r * d + j] * vg[j];
                            dgain[j] += g[r * d + j] * xh;
                            dbias[j] += g[r * d + j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh;
                        }
                        mean_dxh /= d as f64;
                        mean_dxh_xh /= d as f64;
                        for j in 0..d {
                            let xh = (row[j] - mean) * inv;
                            let dxh = g[r * d + j] * vg[j];
                            dx[r * d + j] = inv * (dxh - mean_dxh - xh * mean_dxh_xh);
                        }
                    }
                    add_into(&mut adj[x], vx.len(), |buf| {
                        for i in 0..buf.len() {
                            buf[i] += dx[i];
                        }
                    });
                    add_into(&mut adj[gain], d, |buf| {
                        for j in 0..d {
                            buf[j] += dgain[j];
                        }
                    });
                    add_into(&mut adj[bias], d, |buf| {
                        for j in 0..d {
                            buf[j] += dbias[j];
                        }
                    });
                }
                Op::Reshape(x) => {
                    add_into(&mut adj[x], self.vals[x].numel(), |buf| {
                        for i in 0..buf.len() {
                            buf[i] += g[i];
                        }
                    });
                }
                Op::Permute { x, perm } => {
                    // invert the permutation to map output adjoints back
                    let mut inv = vec![0usize; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let (_, back) = permute_data(&g, &self.vals[id].shape, &inv);
                    add_into(&mut adj[x], back.len(), |buf| {
                        for i in 0..buf.len() {
                            buf[i] += back[i];
                        }
                    });
                }
                Op::Concat { xs, axis } => {
                    let out_shape = self.vals[id].shape.clone();
                    let outer: usize = out_shape[..axis].iter().product();
                    let inner: usize = out_shape[axis + 1..].iter().product();
                    let out_block = out_shape[axis] * inner;
                    let mut offset = 0usize;
                    for &xn in &xs {
                        let ax = self.vals[xn].shape[axis];
                        add_into(&mut adj[xn], self.vals[xn].numel(), |buf| {
                            for o in 0..outer {
                                let src = o * out_block + offset * inner;
                                let dst = o * ax * inner;
                                for i in 0..ax * inner {
                                    buf[dst + i] += g[src + i];
                                }
                            }
                        });
                        offset += ax;
                    }
                }
                Op::GatherRows { x, idx } => {
                    let c = self.vals[x].shape[1];
                    add_into(&mut adj[x], self.vals[x].numel(), |buf| {
                        for (l, &i) in idx.iter().enumerate() {
                            for j in 0..c {
                                buf[i * c + j] += g[l * c + j];
                            }
                        }
                    });
                }
                Op::AddRow { x, row } => {
                    let c = self.vals[row].numel();
                    add_into(&mut adj[x], self.vals[x].numel(), |buf| {
                        for i in 0..buf.len() {
                            buf[i] += g[i];
                        }
                    });
                    add_into(&mut adj[row], c, |buf| {
                        for (i, &v) in g.iter().enumerate() {
                            buf[i % c] += v;
                        }
                    });
                }
                Op::MulCol { x, col } => {
                    let (r, c) = (self.vals[x].shape[0], self.vals[x].shape[1]);
                    let vx = self.vals[x].data.clone();
                    let vcol = self.vals[col].data.clone();
                    add_into(&mut adj[x], r * c, |buf| {
                        for i in 0..r {
                            for j in 0..c {
                                buf[i * c + j] += g[i * c + j] * vcol[i];
                            }
                        }
                    });
                    add_into(&mut adj[col], r, |buf| {
                        for i in 0..r {
                            let mut acc = 0.0;
                            for j in 0..c {
                                acc += g[i * c + j] * vx[i * c + j];
                            }
                            buf[i] += acc;
                        }
                    });
                }
                Op::MulScalarNode { x, s } => {
                    let sv = self.vals[s].data[0];
                    let vx = self.vals[x].data.clone();
                    add_into(&mut adj[x], vx.len(), |buf| {
                        for i in 0..buf.len() {
                            buf[i] += g[i] * sv;
                        }
                    });
                    add_into(&mut adj[s], 1, |buf| {
                        let mut acc = 0.0;
                        for i in 0..vx.len() {
                            acc += g[i] * vx[i];
                        }
                        buf[0] += acc;
                    });
                }
                Op::SumAll(x) => {
                    add_into(&mut adj[x], self.vals[x].numel(), |buf| {
                        for v in buf.iter_mut() {
                            *v += g[0];
                        }
                    });
                }
                Op::SumLastKeep(x) => {
                    let k = self.vals[x].last_dim();
                    add_into(&mut adj[x], self.vals[x].numel(), |buf| {
                        for (i, v) in buf.iter_mut().enumerate() {
                            *v += g[i / k];
                        }
                    });
                }
                Op::HazardNorm(x) => {
                    let y = self.vals[id].data.clone();
                    let k = self.vals[id].last_dim();
                    add_into(&mut adj[x], y.len(), |buf| {
                        for r in 0..y.len() / k {
                            let base = r * k;
                            let mut dot = 0.0;
                            for j in 0..k {
                                dot += g[base + j] * y[base + j];
                            }
                            for j in 0..k {
                                buf[base + j] += y[base + j] * (g[base + j] - dot);
                            }
                        }
                    });
                }
            }
            // keep the node's own adjoint available for the final fold
            adj[id] = Some(g);
        }

        // fold the sweep's adjoints into the persistent accumulators
        for (id, slot) in adj.into_iter().enumerate() {
            if let Some(a) = slot {
                match &mut self.grads[id] {
                    Some(acc) => {
                        for (o, v) in acc.data.iter_mut().zip(&a) {
                            *o += v;
                        }
                    }
                    none => {
                        *none = Some(Array {
                            shape: self.vals[id].shape.clone(),
                            data: a,
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Operations execute eagerly and record enough metadata to replay the chain
//! rule in reverse. All recorded tensors are rank-2 matrices; padded
//! attention keys are excluded from softmax exactly (probability zero, not a
//! large negative logit), so masked positions carry no gradient.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{lit, matmul, matmul_nt, matmul_tn, transpose, Scalar, Tensor};
use std::collections::HashMap;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Step<E> {
    Leaf,
    Matmul { a: Var, b: Var },
    MatmulNT { a: Var, b: Var },
    Transpose { a: Var },
    Add { a: Var, b: Var },
    AddRow { a: Var, row: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: E },
    MulScalarVar { s: Var, a: Var },
    Relu { a: Var },
    QuickGelu { a: Var },
    AttnSoftmax { a: Var },
    LogSoftmax { a: Var },
    LayerNorm { x: Var, gain: Var, shift: Var, xhat: Vec<E>, inv_std: Vec<E> },
    L2NormRows { x: Var, inv_norm: Vec<E> },
    ConcatRows { parts: Vec<Var> },
    ConcatCols { parts: Vec<Var> },
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    ReplaceRows { a: Var, rows: Var, positions: Vec<usize> },
    GatherRows { table: Var, indices: Vec<usize> },
    GatherEntries { a: Var, coords: Vec<(usize, usize)> },
    MeanRows { a: Var },
    SumAll { a: Var },
    Exp { a: Var },
    Clamp { a: Var, lo: E, hi: E },
}

struct Node<E> {
    value: Tensor<E>,
    step: Step<E>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Gradients produced by one backward pass.
pub struct Gradients<E> {
    by_node: Vec<Option<Vec<E>>>,
    by_param: HashMap<ParamId, Vec<E>>,
}

impl<E: Scalar> Gradients<E> {
    /// Gradient for a parameter, if it participated in the loss.
    pub fn param(&self, id: ParamId) -> Option<&[E]> {
        self.by_param.get(&id).map(|v| v.as_slice())
    }

    /// Gradient buffer for an arbitrary tape node.
    pub fn node(&self, v: Var) -> Option<&[E]> {
        self.by_node[v.0].as_deref()
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[E])> {
        self.by_param.iter().map(|(k, v)| (*k, v.as_slice()))
    }
}

pub struct Tape<E: Scalar> {
    nodes: Vec<Node<E>>,
    param_vars: HashMap<ParamId, Var>,
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<E>, step: Step<E>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            step,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg1(&self, a: Var) -> bool {
        self.nodes[a.0].requires_grad
    }

    fn rg2(&self, a: Var, b: Var) -> bool {
        self.rg1(a) || self.rg1(b)
    }

    /// Record a constant: no gradient flows into it.
    pub fn constant(&mut self, t: Tensor<E>) -> Var {
        self.push(t, Step::Leaf, false)
    }

    /// Record an input that should receive a gradient but is not a stored
    /// parameter (used by gradient checks on activations).
    pub fn input(&mut self, t: Tensor<E>) -> Var {
        self.push(t, Step::Leaf, true)
    }

    /// Bind a stored parameter onto the tape. Repeated binds of the same id
    /// return the same node, so shared weights accumulate gradient naturally.
    /// Frozen parameters are recorded as constants.
    pub fn param(&mut self, store: &ParamStore<E>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let trainable = !store.is_frozen_param(id);
        let v = self.push(store.get(id).clone(), Step::Leaf, trainable);
        self.nodes[v.0].param = Some(id);
        self.param_vars.insert(id, v);
        v
    }

    // ── shape helpers ────────────────────────────────────────────────

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    // ── recorded operations ──────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, _n) = self.dims(b);
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner axes differ: [{m}, {k}] @ [{k2}, ..]"),
            ));
        }
        let value = matmul(self.value(a), self.value(b));
        let rg = self.rg2(a, b);
        Ok(self.push(value, Step::Matmul { a, b }, rg))
    }

    /// `A @ B^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_m, k) = self.dims(a);
        let (_n, k2) = self.dims(b);
        if k != k2 {
            return Err(Error::shape(
                "matmul_nt",
                format!("trailing axes differ: {k} vs {k2}"),
            ));
        }
        let value = matmul_nt(self.value(a), self.value(b));
        let rg = self.rg2(a, b);
        Ok(self.push(value, Step::MatmulNT { a, b }, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = transpose(self.value(a));
        let rg = self.rg1(a);
        self.push(value, Step::Transpose { a }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let mut value = self.value(a).clone();
        for (o, &x) in value.data_mut().iter_mut().zip(self.value(b).data()) {
            *o += x;
        }
        let rg = self.rg2(a, b);
        Ok(self.push(value, Step::Add { a, b }, rg))
    }

    /// Broadcast-add a `[1, n]` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, n) = self.dims(a);
        let (r1, n2) = self.dims(row);
        if r1 != 1 || n != n2 {
            return Err(Error::shape(
                "add_row",
                format!("row is [{r1}, {n2}], expected [1, {n}]"),
            ));
        }
        let mut value = self.value(a).clone();
        let cols = n;
        let rowdata: Vec<E> = self.value(row).data().to_vec();
        for (i, o) in value.data_mut().iter_mut().enumerate() {
            *o += rowdata[i % cols];
        }
        let rg = self.rg2(a, row);
        Ok(self.push(value, Step::AddRow { a, row }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                "sub",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let mut value = self.value(a).clone();
        for (o, &x) in value.data_mut().iter_mut().zip(self.value(b).data()) {
            *o -= x;
        }
        let rg = self.rg2(a, b);
        Ok(self.push(value, Step::Sub { a, b }, rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                "mul",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let mut value = self.value(a).clone();
        for (o, &x) in value.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= x;
        }
        let rg = self.rg2(a, b);
        Ok(self.push(value, Step::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, c: E) -> Var {
        let mut value = self.value(a).clone();
        for o in value.data_mut() {
            *o *= c;
        }
        let rg = self.rg1(a);
        self.push(value, Step::Scale { a, c }, rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: E) -> Var {
        let mut value = self.value(a).clone();
        for o in value.data_mut() {
            *o += c;
        }
        let rg = self.rg1(a);
        // Backward of +const is identity; reuse Scale with c=1 semantics.
        self.push(value, Step::Scale { a, c: E::one() }, rg)
    }

    /// `s * A` where `s` is a `[1, 1]` node.
    pub fn mul_scalar_var(&mut self, s: Var, a: Var) -> Result<Var> {
        let (r, c) = self.dims(s);
        if (r, c) != (1, 1) {
            return Err(Error::shape("mul_scalar_var", format!("s is [{r}, {c}]")));
        }
        let sv = self.value(s).data()[0];
        let mut value = self.value(a).clone();
        for o in value.data_mut() {
            *o *= sv;
        }
        let rg = self.rg2(s, a);
        Ok(self.push(value, Step::MulScalarVar { s, a }, rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for o in value.data_mut() {
            if *o < E::zero() {
                *o = E::zero();
            }
        }
        let rg = self.rg1(a);
        self.push(value, Step::Relu { a }, rg)
    }

    /// `x * sigmoid(1.702 x)` — the CLIP-style smooth gate.
    pub fn quick_gelu(&mut self, a: Var) -> Var {
        let k = lit::<E>(1.702);
        let mut value = self.value(a).clone();
        for o in value.data_mut() {
            let s = E::one() / (E::one() + (-k * *o).exp());
            *o = *o * s;
        }
        let rg = self.rg1(a);
        self.push(value, Step::QuickGelu { a }, rg)
    }

    /// Row softmax for attention scores. `key_mask[j] == false` removes key
    /// `j` exactly (zero probability); `causal` removes keys `j > i`.
    /// Errors if any row ends up with no admissible key.
    pub fn attn_softmax(
        &mut self,
        a: Var,
        key_mask: Option<&[bool]>,
        causal: bool,
    ) -> Result<Var> {
        let (rows, cols) = self.dims(a);
        if let Some(mask) = key_mask {
            if mask.len() != cols {
                return Err(Error::shape(
                    "attn_softmax",
                    format!("mask length {} vs {cols} keys", mask.len()),
                ));
            }
        }
        let mut value = self.value(a).clone();
        for i in 0..rows {
            let row = value.row_mut(i);
            let admissible = |j: usize| {
                key_mask.map(|m| m[j]).unwrap_or(true) && (!causal || j <= i)
            };
            let mut max = E::neg_infinity();
            for (j, &x) in row.iter().enumerate() {
                if admissible(j) && x > max {
                    max = x;
                }
            }
            if max == E::neg_infinity() {
                return Err(Error::Numeric(format!(
                    "attention row {i} has no admissible key"
                )));
            }
            let mut sum = E::zero();
            for (j, x) in row.iter_mut().enumerate() {
                if admissible(j) {
                    *x = (*x - max).exp();
                    sum += *x;
                } else {
                    *x = E::zero();
                }
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        let rg = self.rg1(a);
        Ok(self.push(value, Step::AttnSoftmax { a }, rg))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let (rows, _cols) = self.dims(a);
        let mut value = self.value(a).clone();
        for i in 0..rows {
            let row = value.row_mut(i);
            let mut max = E::neg_infinity();
            for &x in row.iter() {
                if x > max {
                    max = x;
                }
            }
            let mut sum = E::zero();
            for &x in row.iter() {
                sum += (x - max).exp();
            }
            let lse = max + sum.ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let rg = self.rg1(a);
        self.push(value, Step::LogSoftmax { a }, rg)
    }

    /// Per-row layer normalization with `[1, d]` gain and shift.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: E) -> Result<Var> {
        let (rows, d) = self.dims(x);
        for (v, label) in [(gain, "gain"), (shift, "shift")] {
            let (r, c) = self.dims(v);
            if (r, c) != (1, d) {
                return Err(Error::shape(
                    "layer_norm",
                    format!("{label} is [{r}, {c}], expected [1, {d}]"),
                ));
            }
        }
        if eps <= E::zero() {
            return Err(Error::Validation("layer_norm eps must be positive".into()));
        }
        let inv_d = E::one() / lit::<E>(d as f64);
        let mut xhat = vec![E::zero(); rows * d];
        let mut inv_std = vec![E::zero(); rows];
        let mut value = Tensor::zeros(vec![rows, d]);
        let g = self.value(gain).data().to_vec();
        let s = self.value(shift).data().to_vec();
        for i in 0..rows {
            let xin = self.value(x).row(i);
            let mut mean = E::zero();
            for &v in xin {
                mean += v;
            }
            mean *= inv_d;
            let mut var = E::zero();
            for &v in xin {
                let dlt = v - mean;
                var += dlt * dlt;
            }
            var *= inv_d;
            let istd = E::one() / (var + eps).sqrt();
            inv_std[i] = istd;
            for j in 0..d {
                let xh = (xin[j] - mean) * istd;
                xhat[i * d + j] = xh;
                value.data_mut()[i * d + j] = g[j] * xh + s[j];
            }
        }
        let rg = self.rg1(x) || self.rg2(gain, shift);
        Ok(self.push(
            value,
            Step::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Normalize each row to unit Euclidean length.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, d) = self.dims(x);
        let mut inv_norm = vec![E::zero(); rows];
        let mut value = self.value(x).clone();
        for i in 0..rows {
            let row = value.row_mut(i);
            let mut sq = E::zero();
            for &v in row.iter() {
                sq += v * v;
            }
            let n = sq.sqrt();
            if !n.is_finite() || n == E::zero() {
                return Err(Error::Numeric(format!(
                    "cannot normalize row {i} of [{rows}, {d}] with norm {n}"
                )));
            }
            let inv = E::one() / n;
            inv_norm[i] = inv;
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
        let rg = self.rg1(x);
        Ok(self.push(value, Step::L2NormRows { x, inv_norm }, rg))
    }

    /// Stack matrices with equal column counts on the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Validation("concat_rows of zero parts".into()));
        }
        let cols = self.dims(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != cols {
                return Err(Error::shape(
                    "concat_rows",
                    format!("column counts differ: {cols} vs {c}"),
                ));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg1(p));
        Ok(self.push(
            Tensor::matrix(rows, cols, data)?,
            Step::ConcatRows {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Stack matrices with equal row counts on the feature axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Validation("concat_cols of zero parts".into()));
        }
        let rows = self.dims(parts[0]).0;
        let total_cols: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut data = vec![E::zero(); rows * total_cols];
        let mut offset = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if r != rows {
                return Err(Error::shape(
                    "concat_cols",
                    format!("row counts differ: {rows} vs {r}"),
                ));
            }
            for i in 0..rows {
                data[i * total_cols + offset..i * total_cols + offset + c]
                    .copy_from_slice(self.value(p).row(i));
            }
            offset += c;
        }
        let rg = parts.iter().any(|&p| self.rg1(p));
        Ok(self.push(
            Tensor::matrix(rows, total_cols, data)?,
            Step::ConcatCols {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims(a);
        if start + len > rows {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{} out of {rows}", start + len),
            ));
        }
        let data = self.value(a).data()[start * cols..(start + len) * cols].to_vec();
        let rg = self.rg1(a);
        Ok(self.push(
            Tensor::matrix(len, cols, data)?,
            Step::SliceRows { a, start },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims(a);
        if start + len > cols {
            return Err(Error::shape(
                "slice_cols",
                format!("cols {start}..{} out of {cols}", start + len),
            ));
        }
        let mut data = Vec::with_capacity(rows * len);
        for i in 0..rows {
            data.extend_from_slice(&self.value(a).row(i)[start..start + len]);
        }
        let rg = self.rg1(a);
        Ok(self.push(
            Tensor::matrix(rows, len, data)?,
            Step::SliceCols { a, start },
            rg,
        ))
    }

    /// Copy of `a` with `rows[i]` written at `positions[i]`.
    pub fn replace_rows(&mut self, a: Var, positions: &[usize], rows: Var) -> Result<Var> {
        let (n, cols) = self.dims(a);
        let (rn, rc) = self.dims(rows);
        if rc != cols || rn != positions.len() {
            return Err(Error::shape(
                "replace_rows",
                format!("replacement [{rn}, {rc}] vs {} positions in [{n}, {cols}]", positions.len()),
            ));
        }
        if positions.iter().any(|&p| p >= n) {
            return Err(Error::shape("replace_rows", format!("position out of {n} rows")));
        }
        let mut value = self.value(a).clone();
        for (k, &p) in positions.iter().enumerate() {
            let src = self.value(rows).row(k).to_vec();
            value.row_mut(p).copy_from_slice(&src);
        }
        let rg = self.rg2(a, rows);
        Ok(self.push(
            value,
            Step::ReplaceRows {
                a,
                rows,
                positions: positions.to_vec(),
            },
            rg,
        ))
    }

    /// Embedding lookup: stack `table[idx]` rows.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (n, d) = self.dims(table);
        if indices.is_empty() {
            return Err(Error::Validation("gather_rows with no indices".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::Validation(format!(
                "index {bad} out of range for {n} table rows"
            )));
        }
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.value(table).row(i));
        }
        let rg = self.rg1(table);
        Ok(self.push(
            Tensor::matrix(indices.len(), d, data)?,
            Step::GatherRows {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Pick scalar entries `(r, c)` into an `[n, 1]` column.
    pub fn gather_entries(&mut self, a: Var, coords: &[(usize, usize)]) -> Result<Var> {
        let (rows, cols) = self.dims(a);
        if coords.iter().any(|&(r, c)| r >= rows || c >= cols) {
            return Err(Error::shape(
                "gather_entries",
                format!("coordinate out of [{rows}, {cols}]"),
            ));
        }
        let data: Vec<E> = coords.iter().map(|&(r, c)| self.value(a).at(r, c)).collect();
        let rg = self.rg1(a);
        Ok(self.push(
            Tensor::matrix(coords.len(), 1, data)?,
            Step::GatherEntries {
                a,
                coords: coords.to_vec(),
            },
            rg,
        ))
    }

    /// Column-wise mean over rows, producing `[1, cols]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (rows, cols) = self.dims(a);
        let inv = E::one() / lit::<E>(rows as f64);
        let mut data = vec![E::zero(); cols];
        for i in 0..rows {
            for (j, &v) in self.value(a).row(i).iter().enumerate() {
                data[j] += v;
            }
        }
        for v in &mut data {
            *v *= inv;
        }
        let rg = self.rg1(a);
        self.push(Tensor::row_vec(data), Step::MeanRows { a }, rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let mut acc = E::zero();
        for &v in self.value(a).data() {
            acc += v;
        }
        let rg = self.rg1(a);
        self.push(Tensor::scalar(acc), Step::SumAll { a }, rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let s = self.sum_all(a);
        self.scale(s, E::one() / lit::<E>(n as f64))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for o in value.data_mut() {
            *o = o.exp();
        }
        let rg = self.rg1(a);
        self.push(value, Step::Exp { a }, rg)
    }

    /// Clamp values; gradient passes only strictly inside the interval.
    pub fn clamp(&mut self, a: Var, lo: E, hi: E) -> Var {
        let mut value = self.value(a).clone();
        for o in value.data_mut() {
            if *o < lo {
                *o = lo;
            } else if *o > hi {
                *o = hi;
            }
        }
        let rg = self.rg1(a);
        self.push(value, Step::Clamp { a, lo, hi }, rg)
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a `[1, 1]` loss node. Returns per-node and
    /// per-parameter gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<E>> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", lt.shape()),
            ));
        }
        if !lt.data()[0].is_finite() {
            return Err(Error::Numeric("loss is non-finite".into()));
        }
        let mut by_node: Vec<Option<Vec<E>>> = vec![None; self.nodes.len()];
        by_node[loss.0] = Some(vec![E::one()]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let g = match by_node[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.step_backward(id, &g, &mut by_node);
            by_node[id] = Some(g);
        }

        let mut by_param = HashMap::new();
        for (pid, var) in &self.param_vars {
            if let Some(g) = &by_node[var.0] {
                by_param.insert(*pid, g.clone());
            }
        }
        Ok(Gradients { by_node, by_param })
    }

    fn accum(&self, by_node: &mut [Option<Vec<E>>], v: Var, update: impl FnOnce(&mut [E])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let buf = by_node[v.0]
            .get_or_insert_with(|| vec![E::zero(); self.nodes[v.0].value.numel()]);
        update(buf);
    }

    #[allow(clippy::too_many_lines)]
    fn step_backward(&self, id: usize, g: &[E], by_node: &mut [Option<Vec<E>>]) {
        let out_shape = {
            let t = &self.nodes[id].value;
            (t.rows(), t.cols())
        };
        let g_t = |cols: usize| Tensor::matrix(g.len() / cols, cols, g.to_vec()).unwrap();
        match &self.nodes[id].step {
            Step::Leaf => {}
            Step::Matmul { a, b } => {
                let gt = g_t(out_shape.1);
                if self.rg1(*a) {
                    let da = matmul_nt(&gt, self.value(*b));
                    self.accum(by_node, *a, |buf| add_into(buf, da.data()));
                }
                if self.rg1(*b) {
                    let db = matmul_tn(self.value(*a), &gt);
                    self.accum(by_node, *b, |buf| add_into(buf, db.data()));
                }
            }
            Step::MatmulNT { a, b } => {
                let gt = g_t(out_shape.1);
                if self.rg1(*a) {
                    let da = matmul(&gt, self.value(*b));
                    self.accum(by_node, *a, |buf| add_into(buf, da.data()));
                }
                if self.rg1(*b) {
                    let db = matmul_tn(&gt, self.value(*a));
                    self.accum(by_node, *b, |buf| add_into(buf, db.data()));
                }
            }
            Step::Transpose { a } => {
                let gt = g_t(out_shape.1);
                let da = transpose(&gt);
                self.accum(by_node, *a, |buf| add_into(buf, da.data()));
            }
            Step::Add { a, b } => {
                self.accum(by_node, *a, |buf| add_into(buf, g));
                self.accum(by_node, *b, |buf| add_into(buf, g));
            }
            Step::AddRow { a, row } => {
                self.accum(by_node, *a, |buf| add_into(buf, g));
                let cols = out_shape.1;
                self.accum(by_node, *row, |buf| {
                    for (i, &gv) in g.iter().enumerate() {
                        buf[i % cols] += gv;
                    }
                });
            }
            Step::Sub { a, b } => {
                self.accum(by_node, *a, |buf| add_into(buf, g));
                self.accum(by_node, *b, |buf| {
                    for (o, &gv) in buf.iter_mut().zip(g) {
                        *o -= gv;
                    }
                });
            }
            Step::Mul { a, b } => {
                if self.rg1(*a) {
                    let bv = self.value(*b).data();
                    self.accum(by_node, *a, |buf| {
                        for i in 0..g.len() {
                            buf[i] += g[i] * bv[i];
                        }
                    });
                }
                if self.rg1(*b) {
                    let av = self.value(*a).data();
                    self.accum(by_node, *b, |buf| {
                        for i in 0..g.len() {
                            buf[i] += g[i] * av[i];
                        }
                    });
                }
            }
            Step::Scale { a, c } => {
                let c = *c;
                self.accum(by_node, *a, |buf| {
                    for (o, &gv) in buf.iter_mut().zip(g) {
                        *o += c * gv;
                    }
                });
            }
            Step::MulScalarVar { s, a } => {
                if self.rg1(*s) {
                    let av = self.value(*a).data();
                    let mut acc = E::zero();
                    for i in 0..g.len() {
                        acc += g[i] * av[i];
                    }
                    self.accum(by_node, *s, |buf| buf[0] += acc);
                }
                if self.rg1(*a) {
                    let sv = self.value(*s).data()[0];
                    self.accum(by_node, *a, |buf| {
                        for (o, &gv) in buf.iter_mut().zip(g) {
                            *o += sv * gv;
                        }
                    });
                }
            }
            Step::Relu { a } => {
                let xv = self.value(*a).data();
                self.accum(by_node, *a, |buf| {
                    for i in 0..g.len() {
                        if xv[i] > E::zero() {
                            buf[i] += g[i];
                        }
                    }
                });
            }
            Step::QuickGelu { a } => {
                let k = lit::<E>(1.702);
                let xv = self.value(*a).data();
                self.accum(by_node, *a, |buf| {
                    for i in 0..g.len() {
                        let s = E::one() / (E::one() + (-k * xv[i]).exp());
                        let d = s + xv[i] * s * (E::one() - s) * k;
                        buf[i] += g[i] * d;
                    }
                });
            }
            Step::AttnSoftmax { a } => {
                let (rows, cols) = out_shape;
                let y = self.value(Var(id)).data();
                self.accum(by_node, *a, |buf| {
                    for i in 0..rows {
                        let gr = &g[i * cols..(i + 1) * cols];
                        let yr = &y[i * cols..(i + 1) * cols];
                        let mut dot = E::zero();
                        for j in 0..cols {
                            dot += gr[j] * yr[j];
                        }
                        let br = &mut buf[i * cols..(i + 1) * cols];
                        for j in 0..cols {
                            br[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Step::LogSoftmax { a } => {
                let (rows, cols) = out_shape;
                let y = self.value(Var(id)).data();
                self.accum(by_node, *a, |buf| {
                    for i in 0..rows {
                        let gr = &g[i * cols..(i + 1) * cols];
                        let yr = &y[i * cols..(i + 1) * cols];
                        let mut gsum = E::zero();
                        for j in 0..cols {
                            gsum += gr[j];
                        }
                        let br = &mut buf[i * cols..(i + 1) * cols];
                        for j in 0..cols {
                            br[j] += gr[j] - yr[j].exp() * gsum;
                        }
                    }
                });
            }
            Step::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                inv_std,
            } => {
                let (rows, d) = out_shape;
                let inv_d = E::one() / lit::<E>(d as f64);
                let gv = self.value(*gain).data();
                if self.rg1(*gain) {
                    self.accum(by_node, *gain, |buf| {
                        for i in 0..rows {
                            for j in 0..d {
                                buf[j] += g[i * d + j] * xhat[i * d + j];
                            }
                        }
                    });
                }
                if self.rg1(*shift) {
                    self.accum(by_node, *shift, |buf| {
                        for i in 0..rows {
                            for j in 0..d {
                                buf[j] += g[i * d + j];
                            }
                        }
                    });
                }
                if self.rg1(*x) {
                    self.accum(by_node, *x, |buf| {
                        for i in 0..rows {
                            let mut mean_gg = E::zero();
                            let mut mean_ggx = E::zero();
                            for j in 0..d {
                                let gg = g[i * d + j] * gv[j];
                                mean_gg += gg;
                                mean_ggx += gg * xhat[i * d + j];
                            }
                            mean_gg *= inv_d;
                            mean_ggx *= inv_d;
                            for j in 0..d {
                                let gg = g[i * d + j] * gv[j];
                                buf[i * d + j] +=
                                    inv_std[i] * (gg - mean_gg - xhat[i * d + j] * mean_ggx);
                            }
                        }
                    });
                }
            }
            Step::L2NormRows { x, inv_norm } => {
                let (rows, d) = out_shape;
                let y = self.value(Var(id)).data();
                self.accum(by_node, *x, |buf| {
                    for i in 0..rows {
                        let gr = &g[i * d..(i + 1) * d];
                        let yr = &y[i * d..(i + 1) * d];
                        let mut dot = E::zero();
                        for j in 0..d {
                            dot += gr[j] * yr[j];
                        }
                        let br = &mut buf[i * d..(i + 1) * d];
                        for j in 0..d {
                            br[j] += inv_norm[i] * (gr[j] - yr[j] * dot);
                        }
                    }
                });
            }
            Step::ConcatRows { parts } => {
                let cols = out_shape.1;
                let mut offset = 0;
                for &p in parts {
                    let rows_p = self.value(p).rows();
                    let seg = &g[offset * cols..(offset + rows_p) * cols];
                    self.accum(by_node, p, |buf| add_into(buf, seg));
                    offset += rows_p;
                }
            }
            Step::ConcatCols { parts } => {
                let (rows, total_cols) = out_shape;
                let mut offset = 0;
                for &p in parts {
                    let cols_p = self.value(p).cols();
                    self.accum(by_node, p, |buf| {
                        for i in 0..rows {
                            for j in 0..cols_p {
                                buf[i * cols_p + j] += g[i * total_cols + offset + j];
                            }
                        }
                    });
                    offset += cols_p;
                }
            }
            Step::SliceRows { a, start } => {
                let cols = out_shape.1;
                let start = *start;
                self.accum(by_node, *a, |buf| {
                    add_into(&mut buf[start * cols..start * cols + g.len()], g);
                });
            }
            Step::SliceCols { a, start } => {
                let (rows, len) = out_shape;
                let acols = self.value(*a).cols();
                let start = *start;
                self.accum(by_node, *a, |buf| {
                    for i in 0..rows {
                        for j in 0..len {
                            buf[i * acols + start + j] += g[i * len + j];
                        }
                    }
                });
            }
            Step::ReplaceRows { a, rows, positions } => {
                let cols = out_shape.1;
                if self.rg1(*a) {
                    self.accum(by_node, *a, |buf| {
                        for (i, gv) in g.iter().enumerate() {
                            buf[i] += *gv;
                        }
                        for &p in positions {
                            for j in 0..cols {
                                buf[p * cols + j] -= g[p * cols + j];
                            }
                        }
                    });
                }
                if self.rg1(*rows) {
                    self.accum(by_node, *rows, |buf| {
                        for (k, &p) in positions.iter().enumerate() {
                            for j in 0..cols {
                                buf[k * cols + j] += g[p * cols + j];
                            }
                        }
                    });
                }
            }
            Step::GatherRows { table, indices } => {
                let d = out_shape.1;
                self.accum(by_node, *table, |buf| {
                    for (k, &idx) in indices.iter().enumerate() {
                        for j in 0..d {
                            buf[idx * d + j] += g[k * d + j];
                        }
                    }
                });
            }
            Step::GatherEntries { a, coords } => {
                let acols = self.value(*a).cols();
                self.accum(by_node, *a, |buf| {
                    for (k, &(r, c)) in coords.iter().enumerate() {
                        buf[r * acols + c] += g[k];
                    }
                });
            }
            Step::MeanRows { a } => {
                let rows = self.value(*a).rows();
                let cols = out_shape.1;
                let inv = E::one() / lit::<E>(rows as f64);
                self.accum(by_node, *a, |buf| {
                    for i in 0..rows {
                        for j in 0..cols {
                            buf[i * cols + j] += g[j] * inv;
                        }
                    }
                });
            }
            Step::SumAll { a } => {
                let gv = g[0];
                self.accum(by_node, *a, |buf| {
                    for o in buf.iter_mut() {
                        *o += gv;
                    }
                });
            }
            Step::Exp { a } => {
                let y = self.value(Var(id)).data();
                self.accum(by_node, *a, |buf| {
                    for i in 0..g.len() {
                        buf[i] += g[i] * y[i];
                    }
                });
            }
            Step::Clamp { a, lo, hi } => {
                let xv = self.value(*a).data();
                let (lo, hi) = (*lo, *hi);
                self.accum(by_node, *a, |buf| {
                    for i in 0..g.len() {
                        if xv[i] > lo && xv[i] < hi {
                            buf[i] += g[i];
                        }
                    }
                });
            }
        }
    }
}

fn add_into<E: Scalar>(dst: &mut [E], src: &[E]) {
    for (o, &s) in dst.iter_mut().zip(src) {
        *o += s;
    }
}

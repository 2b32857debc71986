//! Differentiable primitives: forward constructors on [`Tape`] and the
//! matching backward rules.

use super::{accumulate, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::halffloat::f32_to_f16;
use crate::tensor::{
    self, add_row, binary, concat_last, matmul_mixed, transpose2d, unary, BinaryOp, DType,
    ReduceOp, Tensor, UnaryOp,
};

impl Tape {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = matmul_mixed(va, vb, va.dtype().promote(vb.dtype()))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = binary(BinaryOp::Add, self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = binary(BinaryOp::Mul, self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// `x + bias` with `bias` broadcast over all rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let out = add_row(self.value(x), self.value(bias))?;
        Ok(self.push(out, Op::AddRow(x, bias)))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let out = unary(UnaryOp::Scale(c), self.value(x));
        self.push(out, Op::Scale(x, c))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = unary(UnaryOp::Tanh, self.value(x));
        self.push(out, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = unary(UnaryOp::Sigmoid, self.value(x));
        self.push(out, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = unary(UnaryOp::Relu, self.value(x));
        self.push(out, Op::Relu(x))
    }

    /// Rows of `table` (shape `[V, E]`) selected by `ids`, giving `[ids.len(), E]`.
    pub fn embedding_gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::shape(format!("embedding table {:?}", t.shape())));
        }
        let (v, e) = (t.shape()[0], t.shape()[1]);
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::shape(format!("id {bad} outside table of {v} rows")));
        }
        let values = t.to_f32_vec();
        let mut out = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            out.extend_from_slice(&values[id * e..(id + 1) * e]);
        }
        let out = Tensor::from_f32_as(vec![ids.len(), e], out, t.dtype())?;
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = concat_last(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Concat(a, b)))
    }

    /// Stacks `T` tensors of shape `[B, X]` into `[B, T, X]`.
    pub fn stack_time(&mut self, steps: &[Var]) -> Result<Var> {
        let first = steps
            .first()
            .ok_or_else(|| Error::shape("stack of zero tensors"))?;
        let shape = self.value(*first).shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::shape(format!("stack_time element {:?}", shape)));
        }
        let (b, x) = (shape[0], shape[1]);
        let t = steps.len();
        let mut dtype = self.value(*first).dtype();
        for s in steps {
            let v = self.value(*s);
            if v.shape() != shape.as_slice() {
                return Err(Error::shape(format!(
                    "stack_time {:?} with {:?}",
                    shape,
                    v.shape()
                )));
            }
            dtype = dtype.promote(v.dtype());
        }
        let mut out = vec![0f32; b * t * x];
        for (ti, s) in steps.iter().enumerate() {
            let v = self.value(*s).to_f32_vec();
            for bi in 0..b {
                out[(bi * t + ti) * x..(bi * t + ti + 1) * x]
                    .copy_from_slice(&v[bi * x..(bi + 1) * x]);
            }
        }
        let out = Tensor::from_f32_as(vec![b, t, x], out, dtype)?;
        Ok(self.push(out, Op::Stack(steps.to_vec())))
    }

    /// Dot-product attention of `query` `[B, H]` over `keys` `[B, S, H]`,
    /// restricted to the first `lengths[b]` positions. Returns the context
    /// `[B, H]`. Scores, softmax and weighted sums run in FP32; the context
    /// is rounded once to the input precision.
    pub fn attention(&mut self, query: Var, keys: Var, lengths: &[usize]) -> Result<Var> {
        let (q, k) = (self.value(query), self.value(keys));
        let dims = attention_dims(q, k, lengths)?;
        let (ctx, _) = attention_forward(&q.to_f32_vec(), &k.to_f32_vec(), dims, lengths);
        let out = Tensor::from_f32_as(vec![dims.0, dims.2], ctx, q.dtype().promote(k.dtype()))?;
        Ok(self.push(
            out,
            Op::Attention {
                query,
                keys,
                lengths: lengths.to_vec(),
            },
        ))
    }

    /// Picks `states[b, index[b], :]` from `[B, T, H]`, giving `[B, H]`.
    pub fn select_time(&mut self, states: Var, index: &[usize]) -> Result<Var> {
        let s = self.value(states);
        if s.rank() != 3 || index.len() != s.shape()[0] {
            return Err(Error::shape(format!(
                "select_time on {:?} with {} indices",
                s.shape(),
                index.len()
            )));
        }
        let (b, t, h) = (s.shape()[0], s.shape()[1], s.shape()[2]);
        if let Some(bad) = index.iter().find(|&&i| i >= t) {
            return Err(Error::shape(format!("time index {bad} >= {t}")));
        }
        let v = s.to_f32_vec();
        let mut out = Vec::with_capacity(b * h);
        for (bi, &ti) in index.iter().enumerate() {
            out.extend_from_slice(&v[(bi * t + ti) * h..(bi * t + ti + 1) * h]);
        }
        let out = Tensor::from_f32_as(vec![b, h], out, s.dtype())?;
        Ok(self.push(
            out,
            Op::SelectTime {
                states,
                index: index.to_vec(),
            },
        ))
    }

    /// Mean token cross-entropy over positions with nonzero `mask`.
    ///
    /// `logits` has shape `[..., V]`; `targets` and `mask` have one entry per
    /// row. Computed in FP32 from widened logits; the result is an F32 scalar.
    pub fn softmax_cross_entropy_with_mask(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[f32],
    ) -> Result<Var> {
        let l = self.value(logits);
        let v = *l
            .shape()
            .last()
            .ok_or_else(|| Error::shape("scalar logits"))?;
        let rows = l.numel().checked_div(v).unwrap_or(0);
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::shape(format!(
                "cross entropy: {rows} logit rows, {} targets, {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        if let Some(bad) = targets.iter().zip(mask).find(|(&t, &m)| m != 0.0 && t >= v) {
            return Err(Error::shape(format!("target {} outside vocab {v}", bad.0)));
        }
        let count: f32 = mask.iter().sum();
        if count <= 0.0 {
            return Err(Error::InvalidArgument(
                "cross entropy over an all-padding batch".into(),
            ));
        }
        let lv = l.to_f32_vec();
        let mut total = 0f32;
        for r in 0..rows {
            if mask[r] == 0.0 {
                continue;
            }
            let row = &lv[r * v..(r + 1) * v];
            let lse = log_sum_exp(row);
            total += mask[r] * (lse - row[targets[r]]);
        }
        let out = Tensor::scalar(total / count);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
        ))
    }

    pub fn reduce_mean(&mut self, x: Var) -> Var {
        let out = tensor::reduce(ReduceOp::Mean, self.value(x), None)
            .expect("full reduction cannot fail");
        self.push(out, Op::ReduceMean(x))
    }

    pub fn reduce_sum(&mut self, x: Var) -> Var {
        let out =
            tensor::reduce(ReduceOp::Sum, self.value(x), None).expect("full reduction cannot fail");
        self.push(out, Op::ReduceSum(x))
    }

    fn same_shape(&self, what: &str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "{what} {:?} with {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }
}

fn log_sum_exp(row: &[f32]) -> f32 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let sum: f32 = row.iter().map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

type AttnDims = (usize, usize, usize);

fn attention_dims(q: &Tensor, k: &Tensor, lengths: &[usize]) -> Result<AttnDims> {
    if q.rank() != 2
        || k.rank() != 3
        || q.shape()[0] != k.shape()[0]
        || q.shape()[1] != k.shape()[2]
    {
        return Err(Error::shape(format!(
            "attention query {:?} over keys {:?}",
            q.shape(),
            k.shape()
        )));
    }
    let (b, s, h) = (k.shape()[0], k.shape()[1], k.shape()[2]);
    if lengths.len() != b || lengths.iter().any(|&l| l == 0 || l > s) {
        return Err(Error::shape(format!(
            "attention lengths {lengths:?} for {b} rows of {s} positions"
        )));
    }
    Ok((b, s, h))
}

/// Returns (context `[B*H]`, weights `[B*S]`, zero beyond each length).
fn attention_forward(
    q: &[f32],
    k: &[f32],
    (b, s, h): AttnDims,
    lengths: &[usize],
) -> (Vec<f32>, Vec<f32>) {
    let mut ctx = vec![0f32; b * h];
    let mut weights = vec![0f32; b * s];
    for bi in 0..b {
        let qrow = &q[bi * h..(bi + 1) * h];
        let len = lengths[bi];
        let w = &mut weights[bi * s..bi * s + len];
        for (si, wi) in w.iter_mut().enumerate() {
            let krow = &k[(bi * s + si) * h..(bi * s + si + 1) * h];
            *wi = qrow.iter().zip(krow).fold(0f32, |acc, (a, b)| acc + a * b);
        }
        let max = w.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0f32;
        for wi in w.iter_mut() {
            *wi = (*wi - max).exp();
            sum += *wi;
        }
        for wi in w.iter_mut() {
            *wi /= sum;
        }
        let crow = &mut ctx[bi * h..(bi + 1) * h];
        for (si, &wi) in w.iter().enumerate() {
            let krow = &k[(bi * s + si) * h..(bi * s + si + 1) * h];
            for (c, kv) in crow.iter_mut().zip(krow) {
                *c += wi * kv;
            }
        }
    }
    (ctx, weights)
}

/// Attention weights `[B, S]` (F32) as used by [`Tape::attention`].
pub fn attention_weights(query: &Tensor, keys: &Tensor, lengths: &[usize]) -> Result<Tensor> {
    let dims = attention_dims(query, keys, lengths)?;
    let (_, w) = attention_forward(&query.to_f32_vec(), &keys.to_f32_vec(), dims, lengths);
    Tensor::from_f32(vec![dims.0, dims.1], w)
}

/// Accumulates FP32 `values` into `input`'s slot after rounding them to the
/// input's dtype.
fn push_grad(tape: &Tape, acc: &mut [Option<Vec<f32>>], input: Var, mut values: Vec<f32>) {
    if tape.value(input).dtype() == DType::F16 {
        for v in values.iter_mut() {
            *v = f32_to_f16(*v).to_f32();
        }
    }
    match &mut acc[input.index()] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(values) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(values),
    }
}

pub(super) fn backward_rule(
    tape: &Tape,
    node: Var,
    g: &Tensor,
    acc: &mut [Option<Vec<f32>>],
) -> Result<()> {
    let op = &tape.nodes[node.index()].op;
    let out = tape.value(node);
    match op {
        Op::Variable { .. } | Op::Constant => {}
        Op::MatMul(a, b) => {
            let (va, vb) = (tape.value(*a), tape.value(*b));
            let da = matmul_mixed(g, &transpose2d(vb)?, va.dtype())?;
            let db = matmul_mixed(&transpose2d(va)?, g, vb.dtype())?;
            accumulate(acc, *a, &da);
            accumulate(acc, *b, &db);
        }
        Op::Add(a, b) => {
            let gv = g.to_f32_vec();
            push_grad(tape, acc, *a, gv.clone());
            push_grad(tape, acc, *b, gv);
        }
        Op::Mul(a, b) => {
            let gv = g.to_f32_vec();
            let av = tape.value(*a).to_f32_vec();
            let bv = tape.value(*b).to_f32_vec();
            let da = gv.iter().zip(&bv).map(|(g, b)| g * b).collect();
            let db = gv.iter().zip(&av).map(|(g, a)| g * a).collect();
            push_grad(tape, acc, *a, da);
            push_grad(tape, acc, *b, db);
        }
        Op::AddRow(x, bias) => {
            let gv = g.to_f32_vec();
            let n = tape.value(*bias).numel();
            let mut db = vec![0f32; n];
            for row in gv.chunks(n.max(1)) {
                for (d, v) in db.iter_mut().zip(row) {
                    *d += v;
                }
            }
            push_grad(tape, acc, *x, gv);
            push_grad(tape, acc, *bias, db);
        }
        Op::Scale(x, c) => {
            let dx = g.to_f32_vec().into_iter().map(|v| v * c).collect();
            push_grad(tape, acc, *x, dx);
        }
        Op::Tanh(x) => {
            let y = out.to_f32_vec();
            let dx = g
                .to_f32_vec()
                .iter()
                .zip(&y)
                .map(|(g, y)| g * (1.0 - y * y))
                .collect();
            push_grad(tape, acc, *x, dx);
        }
        Op::Sigmoid(x) => {
            let y = out.to_f32_vec();
            let dx = g
                .to_f32_vec()
                .iter()
                .zip(&y)
                .map(|(g, y)| g * y * (1.0 - y))
                .collect();
            push_grad(tape, acc, *x, dx);
        }
        Op::Relu(x) => {
            let xv = tape.value(*x).to_f32_vec();
            let dx = g
                .to_f32_vec()
                .iter()
                .zip(&xv)
                .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                .collect();
            push_grad(tape, acc, *x, dx);
        }
        Op::Gather { table, ids } => {
            let t = tape.value(*table);
            let e = t.shape()[1];
            let gv = g.to_f32_vec();
            let mut dt = vec![0f32; t.numel()];
            for (row, &id) in ids.iter().enumerate() {
                for (d, v) in dt[id * e..(id + 1) * e]
                    .iter_mut()
                    .zip(&gv[row * e..(row + 1) * e])
                {
                    *d += v;
                }
            }
            push_grad(tape, acc, *table, dt);
        }
        Op::Concat(a, b) => {
            let p = *tape.value(*a).shape().last().unwrap();
            let q = *tape.value(*b).shape().last().unwrap();
            let gv = g.to_f32_vec();
            let rows = gv.len() / (p + q).max(1);
            let mut da = Vec::with_capacity(rows * p);
            let mut db = Vec::with_capacity(rows * q);
            for r in 0..rows {
                let row = &gv[r * (p + q)..(r + 1) * (p + q)];
                da.extend_from_slice(&row[..p]);
                db.extend_from_slice(&row[p..]);
            }
            push_grad(tape, acc, *a, da);
            push_grad(tape, acc, *b, db);
        }
        Op::Stack(steps) => {
            let (b, t, x) = (out.shape()[0], out.shape()[1], out.shape()[2]);
            let gv = g.to_f32_vec();
            for (ti, s) in steps.iter().enumerate() {
                let mut ds = Vec::with_capacity(b * x);
                for bi in 0..b {
                    ds.extend_from_slice(&gv[(bi * t + ti) * x..(bi * t + ti + 1) * x]);
                }
                push_grad(tape, acc, *s, ds);
            }
        }
        Op::Attention {
            query,
            keys,
            lengths,
        } => {
            let qv = tape.value(*query).to_f32_vec();
            let kv = tape.value(*keys).to_f32_vec();
            let dims = attention_dims(tape.value(*query), tape.value(*keys), lengths)?;
            let (b, s, h) = dims;
            let (_, w) = attention_forward(&qv, &kv, dims, lengths);
            let gv = g.to_f32_vec();
            let mut dq = vec![0f32; b * h];
            let mut dk = vec![0f32; b * s * h];
            for bi in 0..b {
                let len = lengths[bi];
                let grow = &gv[bi * h..(bi + 1) * h];
                let qrow = &qv[bi * h..(bi + 1) * h];
                let wrow = &w[bi * s..bi * s + len];
                let dw: Vec<f32> = (0..len)
                    .map(|si| {
                        let krow = &kv[(bi * s + si) * h..(bi * s + si + 1) * h];
                        grow.iter().zip(krow).fold(0f32, |a, (x, y)| a + x * y)
                    })
                    .collect();
                let mean = wrow.iter().zip(&dw).fold(0f32, |a, (w, d)| a + w * d);
                for si in 0..len {
                    let dscore = wrow[si] * (dw[si] - mean);
                    let krow = &kv[(bi * s + si) * h..(bi * s + si + 1) * h];
                    for (dqv, kk) in dq[bi * h..(bi + 1) * h].iter_mut().zip(krow) {
                        *dqv += dscore * kk;
                    }
                    let dkrow = &mut dk[(bi * s + si) * h..(bi * s + si + 1) * h];
                    for j in 0..h {
                        dkrow[j] += wrow[si] * grow[j] + dscore * qrow[j];
                    }
                }
            }
            push_grad(tape, acc, *query, dq);
            push_grad(tape, acc, *keys, dk);
        }
        Op::SelectTime { states, index } => {
            let st = tape.value(*states);
            let (t, h) = (st.shape()[1], st.shape()[2]);
            let gv = g.to_f32_vec();
            let mut ds = vec![0f32; st.numel()];
            for (bi, &ti) in index.iter().enumerate() {
                ds[(bi * t + ti) * h..(bi * t + ti + 1) * h]
                    .copy_from_slice(&gv[bi * h..(bi + 1) * h]);
            }
            push_grad(tape, acc, *states, ds);
        }
        Op::CrossEntropy {
            logits,
            targets,
            mask,
        } => {
            let l = tape.value(*logits);
            let v = *l.shape().last().unwrap();
            let lv = l.to_f32_vec();
            let count: f32 = mask.iter().sum();
            let upstream = g.get_f32(0);
            let mut dl = vec![0f32; lv.len()];
            for r in 0..targets.len() {
                if mask[r] == 0.0 {
                    continue;
                }
                let row = &lv[r * v..(r + 1) * v];
                let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let sum: f32 = row.iter().map(|x| (x - max).exp()).sum();
                let coef = upstream * mask[r] / count;
                let drow = &mut dl[r * v..(r + 1) * v];
                for (j, d) in drow.iter_mut().enumerate() {
                    let p = (row[j] - max).exp() / sum;
                    let onehot = if j == targets[r] { 1.0 } else { 0.0 };
                    *d = coef * (p - onehot);
                }
            }
            push_grad(tape, acc, *logits, dl);
        }
        Op::ReduceMean(x) => {
            let n = tape.value(*x).numel();
            let d = g.get_f32(0) / n as f32;
            push_grad(tape, acc, *x, vec![d; n]);
        }
        Op::ReduceSum(x) => {
            let n = tape.value(*x).numel();
            push_grad(tape, acc, *x, vec![g.get_f32(0); n]);
        }
    }
    Ok(())
}

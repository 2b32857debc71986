use super::{DType, Storage, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryOp {
    Tanh,
    Sigmoid,
    Relu,
    Neg,
    Scale(f32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    MaxAbs,
}

#[inline]
pub(crate) fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn finish(shape: Vec<usize>, values: Vec<f32>, dtype: DType) -> Tensor {
    Tensor {
        shape,
        data: Storage::from_f32_values(values, dtype),
    }
}

/// Matrix product with FP32 accumulation.
///
/// Each product term multiplies widened (exact) FP32 copies of the inputs;
/// the `k` terms of every output element are summed left to right in FP32;
/// the sum is rounded once when `out_dtype` is F16.
pub fn matmul_mixed(a: &Tensor, b: &Tensor, out_dtype: DType) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::shape(format!(
            "matmul {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let av = a.to_f32_vec();
    let bv = b.to_f32_vec();
    let mut out = vec![0f32; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let arow = &av[i * k..(i + 1) * k];
        for (p, &aik) in arow.iter().enumerate() {
            let brow = &bv[p * n..(p + 1) * n];
            for (o, &bkj) in row.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
    Ok(finish(vec![m, n], out, out_dtype))
}

pub fn transpose2d(t: &Tensor) -> Result<Tensor> {
    if t.rank() != 2 {
        return Err(Error::shape(format!("transpose of rank {}", t.rank())));
    }
    let (r, c) = (t.shape[0], t.shape[1]);
    let data = match &t.data {
        Storage::F32(v) => Storage::F32(transpose_buf(v, r, c)),
        Storage::F16(v) => Storage::F16(transpose_buf(v, r, c)),
    };
    Ok(Tensor {
        shape: vec![c, r],
        data,
    })
}

fn transpose_buf<T: Copy + Default>(v: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::default(); v.len()];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = v[i * c + j];
        }
    }
    out
}

pub fn unary(op: UnaryOp, t: &Tensor) -> Tensor {
    let f: fn(f32, f32) -> f32 = match op {
        UnaryOp::Tanh => |x, _| x.tanh(),
        UnaryOp::Sigmoid => |x, _| sigmoid(x),
        UnaryOp::Relu => |x, _| if x > 0.0 { x } else { 0.0 },
        UnaryOp::Neg => |x, _| -x,
        UnaryOp::Scale(_) => |x, c| x * c,
    };
    let c = match op {
        UnaryOp::Scale(c) => c,
        _ => 0.0,
    };
    let values = t.to_f32_vec().into_iter().map(|x| f(x, c)).collect();
    finish(t.shape.clone(), values, t.dtype())
}

/// Elementwise binary op. Operands must have equal shapes, or one of them
/// must be a single-element tensor (scalar broadcast).
pub fn binary(op: BinaryOp, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let f = |x: f32, y: f32| match op {
        BinaryOp::Add => x + y,
        BinaryOp::Sub => x - y,
        BinaryOp::Mul => x * y,
    };
    let dtype = a.dtype().promote(b.dtype());
    let av = a.to_f32_vec();
    let bv = b.to_f32_vec();
    let (shape, values) = if a.shape == b.shape {
        (
            a.shape.clone(),
            av.iter().zip(&bv).map(|(&x, &y)| f(x, y)).collect(),
        )
    } else if b.numel() == 1 {
        (a.shape.clone(), av.iter().map(|&x| f(x, bv[0])).collect())
    } else if a.numel() == 1 {
        (b.shape.clone(), bv.iter().map(|&y| f(av[0], y)).collect())
    } else {
        return Err(Error::shape(format!(
            "elementwise {:?} on {:?} and {:?}",
            op, a.shape, b.shape
        )));
    };
    Ok(finish(shape, values, dtype))
}

/// Adds `bias` (shape `[n]`) to every row of `x` (last axis `n`).
pub fn add_row(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let n = *x.shape.last().unwrap_or(&0);
    if bias.rank() != 1 || bias.shape[0] != n || x.rank() == 0 {
        return Err(Error::shape(format!(
            "add_row {:?} + {:?}",
            x.shape, bias.shape
        )));
    }
    let bv = bias.to_f32_vec();
    let mut values = x.to_f32_vec();
    for row in values.chunks_mut(n.max(1)) {
        for (v, b) in row.iter_mut().zip(&bv) {
            *v += b;
        }
    }
    Ok(finish(
        x.shape.clone(),
        values,
        x.dtype().promote(bias.dtype()),
    ))
}

/// Concatenates along the last axis; all leading extents must agree.
pub fn concat_last(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() == 0 || a.rank() != b.rank() || a.shape[..a.rank() - 1] != b.shape[..b.rank() - 1] {
        return Err(Error::shape(format!(
            "concat_last {:?} with {:?}",
            a.shape, b.shape
        )));
    }
    let p = a.shape[a.rank() - 1];
    let q = b.shape[b.rank() - 1];
    let rows = a.numel() / p.max(1);
    let rows = if p == 0 { b.numel() / q.max(1) } else { rows };
    let av = a.to_f32_vec();
    let bv = b.to_f32_vec();
    let mut values = Vec::with_capacity(av.len() + bv.len());
    for r in 0..rows {
        values.extend_from_slice(&av[r * p..(r + 1) * p]);
        values.extend_from_slice(&bv[r * q..(r + 1) * q]);
    }
    let mut shape = a.shape.clone();
    *shape.last_mut().unwrap() = p + q;
    Ok(finish(shape, values, a.dtype().promote(b.dtype())))
}

/// Elementwise conversion. F32→F16 rounds to nearest even; F16→F32 is exact.
pub fn cast(t: &Tensor, to: DType) -> Tensor {
    if t.dtype() == to {
        return t.clone();
    }
    finish(t.shape.clone(), t.to_f32_vec(), to)
}

/// Reduction with FP32 accumulation. Without an axis the result is a scalar;
/// with an axis that extent is removed. The result is always F32.
pub fn reduce(op: ReduceOp, t: &Tensor, axis: Option<usize>) -> Result<Tensor> {
    let values = t.to_f32_vec();
    let fold = |it: &mut dyn Iterator<Item = f32>, count: usize| -> f32 {
        match op {
            ReduceOp::Sum => it.fold(0.0, |acc, x| acc + x),
            ReduceOp::Mean => {
                let s = it.fold(0.0f32, |acc, x| acc + x);
                s / count as f32
            }
            ReduceOp::MaxAbs => it.fold(0.0f32, |acc, x| {
                let a = x.abs();
                if a > acc || a.is_nan() {
                    a
                } else {
                    acc
                }
            }),
        }
    };
    match axis {
        None => {
            let r = fold(&mut values.iter().copied(), values.len());
            Ok(Tensor::scalar(r))
        }
        Some(ax) => {
            if ax >= t.rank() {
                return Err(Error::InvalidArgument(format!(
                    "axis {ax} out of range for rank {}",
                    t.rank()
                )));
            }
            let outer: usize = t.shape[..ax].iter().product();
            let len = t.shape[ax];
            let inner: usize = t.shape[ax + 1..].iter().product();
            let mut out = Vec::with_capacity(outer * inner);
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut it = (0..len).map(|j| values[base + j * inner]);
                    out.push(fold(&mut it, len));
                }
            }
            let mut shape = t.shape.clone();
            shape.remove(ax);
            Tensor::from_f32(shape, out)
        }
    }
}

/// Max-subtracted softmax along `axis`, computed and returned in FP32.
pub fn softmax(t: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= t.rank() {
        return Err(Error::InvalidArgument(format!(
            "axis {axis} out of range for rank {}",
            t.rank()
        )));
    }
    let values = t.to_f32_vec();
    if values.iter().any(|x| x.is_nan()) {
        return Err(Error::InvalidArgument("softmax of NaN input".into()));
    }
    let outer: usize = t.shape[..axis].iter().product();
    let len = t.shape[axis];
    let inner: usize = t.shape[axis + 1..].iter().product();
    let mut out = vec![0f32; values.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| o * len * inner + i + j * inner;
            let max = (0..len)
                .map(|j| values[idx(j)])
                .fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0f32;
            for j in 0..len {
                let e = (values[idx(j)] - max).exp();
                out[idx(j)] = e;
                sum += e;
            }
            for j in 0..len {
                out[idx(j)] /= sum;
            }
        }
    }
    Tensor::from_f32(t.shape.clone(), out)
}

//! Ring collectives over a [`Transport`].

use std::ops::Range;

use super::{Message, Transport};
use crate::autodiff::GradientSet;
use crate::error::{Error, Result};
use crate::tensor::{DType, Storage, Tensor};

fn chunk_range(c: usize, n: usize, k: usize) -> Range<usize> {
    let size = n.div_ceil(k);
    let start = (c * size).min(n);
    start..((c + 1) * size).min(n)
}

fn encode(values: &[f32], wire: DType) -> Storage {
    Storage::from_f32_values(values.to_vec(), wire)
}

fn expect_chunk(
    msg: Message,
    step: u32,
    chunk: usize,
    len: usize,
    from: usize,
) -> Result<Vec<f32>> {
    match msg {
        Message::TensorChunk {
            step: s,
            chunk: c,
            data,
        } if s == step && c as usize == chunk && data.len() == len => Ok(match data {
            Storage::F32(v) => v,
            Storage::F16(v) => v.iter().map(|h| h.to_f32()).collect(),
        }),
        Message::TensorChunk { step: s, chunk: c, data } => Err(Error::Transport(format!(
            "rank {from} sent chunk {c} of step {s} with {} elements; expected chunk {chunk} of step {step} with {len} (vector lengths differ across workers?)",
            data.len()
        ))),
        other => Err(Error::Transport(format!(
            "expected a tensor chunk from rank {from}, got {other:?}"
        ))),
    }
}

/// In-place sum across all ranks with FP32 payloads.
pub fn ring_allreduce(t: &mut dyn Transport, step: u32, data: &mut [f32]) -> Result<()> {
    ring_allreduce_wire(t, step, data, DType::F32)
}

/// Classic two-phase ring sum: `K−1` reduce-scatter steps then `K−1`
/// allgather steps over chunks of `⌈n/K⌉` elements. Accumulation is FP32;
/// `wire` only sets the payload precision.
///
/// Combine order is fixed: chunk `c` is accumulated starting from rank `c`,
/// then `c+1`, ... wrapping around, each partial sum on the left:
/// `((x_c + x_{c+1}) + x_{c+2}) + ...`. For chunk 0 this is rank-ascending.
pub fn ring_allreduce_wire(
    t: &mut dyn Transport,
    step: u32,
    data: &mut [f32],
    wire: DType,
) -> Result<()> {
    let k = t.world_size();
    if k <= 1 {
        return Ok(());
    }
    let r = t.rank();
    let n = data.len();
    let next = (r + 1) % k;
    let prev = (r + k - 1) % k;

    for s in 0..k - 1 {
        let send_c = (r + k - s) % k;
        let recv_c = (r + 2 * k - s - 1) % k;
        let range = chunk_range(send_c, n, k);
        t.send(
            next,
            Message::TensorChunk {
                step,
                chunk: send_c as u32,
                data: encode(&data[range], wire),
            },
        )?;
        let range = chunk_range(recv_c, n, k);
        let incoming = expect_chunk(t.recv(prev)?, step, recv_c, range.len(), prev)?;
        for (own, inc) in data[range].iter_mut().zip(incoming) {
            *own = inc + *own;
        }
    }
    if wire == DType::F16 {
        // The owner keeps what the others will receive, so ranks agree.
        let range = chunk_range((r + 1) % k, n, k);
        for x in &mut data[range] {
            *x = crate::halffloat::f16_to_f32(crate::halffloat::f32_to_f16(*x));
        }
    }
    for s in 0..k - 1 {
        let send_c = (r + 1 + k - s) % k;
        let recv_c = (r + k - s) % k;
        let range = chunk_range(send_c, n, k);
        t.send(
            next,
            Message::TensorChunk {
                step,
                chunk: send_c as u32,
                data: encode(&data[range], wire),
            },
        )?;
        let range = chunk_range(recv_c, n, k);
        let incoming = expect_chunk(t.recv(prev)?, step, recv_c, range.len(), prev)?;
        data[range].copy_from_slice(&incoming);
    }
    Ok(())
}

/// Logical OR of every rank's flag, identical on all ranks.
pub fn allreduce_flag_or(t: &mut dyn Transport, flag: bool) -> Result<bool> {
    let k = t.world_size();
    let (next, prev) = ((t.rank() + 1) % k, (t.rank() + k - 1) % k);
    // Each round forwards what this rank has seen so far; after K−1 rounds
    // every rank has heard from every other.
    let mut acc = flag;
    for _ in 1..k {
        t.send(next, Message::Flag(acc))?;
        match t.recv(prev)? {
            Message::Flag(f) => acc |= f,
            other => {
                return Err(Error::Transport(format!(
                    "expected a flag from rank {prev}, got {other:?}"
                )))
            }
        }
    }
    Ok(acc)
}

/// Fixed concatenation order of gradients for reduction: variables sorted
/// by name, each flattened.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReduceBucket {
    entries: Vec<(String, Vec<usize>)>,
}

impl ReduceBucket {
    pub fn from_grads(grads: &GradientSet) -> Self {
        // GradientSet iterates in name order already.
        Self {
            entries: grads
                .iter()
                .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
                .collect(),
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, usize)> {
        self.entries
            .iter()
            .map(|(n, s)| (n.as_str(), s.iter().product()))
    }

    pub fn total(&self) -> usize {
        self.entries().map(|(_, n)| n).sum()
    }

    pub fn flatten(&self, grads: &GradientSet) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(self.total());
        for (name, shape) in &self.entries {
            let g = grads.get(name).ok_or_else(|| {
                Error::InvalidArgument(format!("bucket variable '{name}' has no gradient"))
            })?;
            if g.shape() != shape.as_slice() {
                return Err(Error::shape(format!("gradient '{name}' changed shape")));
            }
            out.extend(g.to_f32_vec());
        }
        Ok(out)
    }

    /// FP32 gradients from a flat vector laid out by this bucket.
    pub fn unflatten(&self, flat: &[f32]) -> Result<GradientSet> {
        if flat.len() != self.total() {
            return Err(Error::shape(format!(
                "bucket holds {} elements, vector has {}",
                self.total(),
                flat.len()
            )));
        }
        let mut at = 0;
        let mut out = GradientSet::new();
        for (name, shape) in &self.entries {
            let n: usize = shape.iter().product();
            out.insert(
                name.clone(),
                Tensor::from_f32(shape.clone(), flat[at..at + n].to_vec())?,
            );
            at += n;
        }
        Ok(out)
    }
}

//! Message framing shared by all transports.
//!
//! Every frame is `[length: u32 LE][tag: u8][payload]` where `length` counts
//! the payload bytes only. Tags: 0 tensor chunk, 1 flag, 2 control.
//! Tensor-chunk payload: `[step: u32][chunk: u32][dtype: u8][count: u32][elements LE]`.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::halffloat::F16;
use crate::tensor::{DType, Storage};

pub const TAG_CHUNK: u8 = 0;
pub const TAG_FLAG: u8 = 1;
pub const TAG_CONTROL: u8 = 2;

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    TensorChunk {
        step: u32,
        chunk: u32,
        data: Storage,
    },
    Flag(bool),
    Control(String),
}

impl Message {
    pub fn tag(&self) -> u8 {
        match self {
            Message::TensorChunk { .. } => TAG_CHUNK,
            Message::Flag(_) => TAG_FLAG,
            Message::Control(_) => TAG_CONTROL,
        }
    }

    fn payload(&self) -> Vec<u8> {
        match self {
            Message::TensorChunk { step, chunk, data } => {
                let width = data.dtype().size_in_bytes();
                let mut p = Vec::with_capacity(13 + data.len() * width);
                p.extend_from_slice(&step.to_le_bytes());
                p.extend_from_slice(&chunk.to_le_bytes());
                p.push(data.dtype().tag());
                p.extend_from_slice(&(data.len() as u32).to_le_bytes());
                match data {
                    Storage::F16(v) => v
                        .iter()
                        .for_each(|h| p.extend_from_slice(&h.to_bits().to_le_bytes())),
                    Storage::F32(v) => v.iter().for_each(|x| p.extend_from_slice(&x.to_le_bytes())),
                }
                p
            }
            Message::Flag(f) => vec![u8::from(*f)],
            Message::Control(s) => s.as_bytes().to_vec(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let payload = self.payload();
        let mut out = Vec::with_capacity(5 + payload.len());
        out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        out.push(self.tag());
        out.extend_from_slice(&payload);
        out
    }

    pub fn decode(tag: u8, payload: &[u8]) -> Result<Self> {
        match tag {
            TAG_CHUNK => decode_chunk(payload),
            TAG_FLAG => match payload {
                [0] => Ok(Message::Flag(false)),
                [1] => Ok(Message::Flag(true)),
                _ => Err(Error::Transport(format!("bad flag payload {payload:?}"))),
            },
            TAG_CONTROL => String::from_utf8(payload.to_vec())
                .map(Message::Control)
                .map_err(|e| Error::Transport(format!("control message is not UTF-8: {e}"))),
            other => Err(Error::Transport(format!("unknown message tag {other}"))),
        }
    }
}

fn u32_at(p: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(p[at..at + 4].try_into().expect("4 bytes"))
}

fn decode_chunk(p: &[u8]) -> Result<Message> {
    if p.len() < 13 {
        return Err(Error::Transport(format!(
            "chunk header needs 13 bytes, got {}",
            p.len()
        )));
    }
    let step = u32_at(p, 0);
    let chunk = u32_at(p, 4);
    let dtype = DType::from_tag(p[8]).map_err(|e| Error::Transport(e.to_string()))?;
    let count = u32_at(p, 9) as usize;
    let body = &p[13..];
    if body.len() != count * dtype.size_in_bytes() {
        return Err(Error::Transport(format!(
            "chunk declares {count} {dtype:?} elements but carries {} bytes",
            body.len()
        )));
    }
    let data = match dtype {
        DType::F16 => Storage::F16(
            body.chunks_exact(2)
                .map(|b| F16::from_bits(u16::from_le_bytes([b[0], b[1]])))
                .collect(),
        ),
        DType::F32 => Storage::F32(
            body.chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect(),
        ),
    };
    Ok(Message::TensorChunk { step, chunk, data })
}

pub fn write_message<W: Write>(w: &mut W, msg: &Message) -> Result<()> {
    w.write_all(&msg.encode())?;
    w.flush()?;
    Ok(())
}

pub fn read_message<R: Read>(r: &mut R) -> Result<Message> {
    let mut header = [0u8; 5];
    r.read_exact(&mut header)
        .map_err(|e| Error::Transport(format!("reading frame header: {e}")))?;
    let len = u32::from_le_bytes(header[..4].try_into().expect("4 bytes")) as usize;
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload)
        .map_err(|e| Error::Transport(format!("reading {len}-byte payload: {e}")))?;
    Message::decode(header[4], &payload)
}

use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use serde_json::Value;

use super::{parse_params, uniform_init, Batch, BlockContext, Encoder, Representation};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamStore, VarMap};
use crate::tensor::{DType, Tensor};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RnnEncoderParams {
    #[serde(default = "one")]
    encoder_layers: usize,
    hidden: usize,
    src_emb_size: usize,
}

fn one() -> usize {
    1
}

/// Embedding lookup followed by stacked tanh-RNN layers:
/// `h_t = tanh(x_t W + h_{t-1} U + b)`, with `h_0 = 0`.
#[derive(Debug, Clone)]
pub struct RnnEncoder {
    layers: usize,
    hidden: usize,
    emb_size: usize,
    vocab_size: usize,
}

impl RnnEncoder {
    pub fn new(layers: usize, hidden: usize, emb_size: usize, vocab_size: usize) -> Result<Self> {
        if layers == 0 || hidden == 0 || emb_size == 0 {
            return Err(Error::Config(
                "rnn encoder: encoder_layers, hidden and src_emb_size must be positive".into(),
            ));
        }
        Ok(Self {
            layers,
            hidden,
            emb_size,
            vocab_size,
        })
    }

    fn layer_names(l: usize) -> [String; 3] {
        [
            format!("encoder/rnn_{l}/input_kernel"),
            format!("encoder/rnn_{l}/recurrent_kernel"),
            format!("encoder/rnn_{l}/bias"),
        ]
    }
}

/// One tanh-RNN cell step. `h_prev == None` means a zero state.
pub(super) fn rnn_cell(
    tape: &mut Tape,
    x: Var,
    h_prev: Option<Var>,
    kernel: Var,
    recurrent: Var,
    bias: Var,
) -> Result<Var> {
    let mut pre = tape.matmul(x, kernel)?;
    if let Some(h) = h_prev {
        let r = tape.matmul(h, recurrent)?;
        pre = tape.add(pre, r)?;
    }
    let pre = tape.add_row(pre, bias)?;
    Ok(tape.tanh(pre))
}

impl Encoder for RnnEncoder {
    fn kind(&self) -> &'static str {
        "rnn"
    }

    fn hidden_size(&self) -> usize {
        self.hidden
    }

    fn init_params(&self, rng: &mut ChaCha8Rng, params: &mut ParamStore) -> Result<()> {
        params.insert(
            "encoder/embedding",
            uniform_init(rng, vec![self.vocab_size, self.emb_size], 0.1),
            true,
        )?;
        for l in 0..self.layers {
            let input = if l == 0 { self.emb_size } else { self.hidden };
            let [w, u, b] = Self::layer_names(l);
            params.insert(
                &w,
                uniform_init(rng, vec![input, self.hidden], (1.0 / input as f32).sqrt()),
                true,
            )?;
            params.insert(
                &u,
                uniform_init(
                    rng,
                    vec![self.hidden, self.hidden],
                    (1.0 / self.hidden as f32).sqrt(),
                ),
                true,
            )?;
            params.insert(&b, Tensor::zeros(vec![self.hidden], DType::F32), true)?;
        }
        Ok(())
    }

    fn encode(&self, tape: &mut Tape, vars: &VarMap, batch: &Batch) -> Result<Representation> {
        let emb = vars.get("encoder/embedding")?;
        let mut inputs = (0..batch.src_len)
            .map(|t| tape.embedding_gather(emb, &batch.source_column(t)))
            .collect::<Result<Vec<_>>>()?;
        for l in 0..self.layers {
            let [w, u, b] = Self::layer_names(l);
            let (w, u, b) = (vars.get(&w)?, vars.get(&u)?, vars.get(&b)?);
            let mut h = None;
            let mut outputs = Vec::with_capacity(inputs.len());
            for x in inputs {
                let next = rnn_cell(tape, x, h, w, u, b)?;
                outputs.push(next);
                h = Some(next);
            }
            inputs = outputs;
        }
        Ok(Representation {
            states: tape.stack_time(&inputs)?,
            lengths: batch.source_lengths.clone(),
        })
    }
}

pub(super) fn rnn_factory(params: &Value, ctx: &BlockContext) -> Result<Box<dyn Encoder>> {
    let p: RnnEncoderParams = parse_params("rnn encoder", params)?;
    Ok(Box::new(RnnEncoder::new(
        p.encoder_layers,
        p.hidden,
        p.src_emb_size,
        ctx.vocab_size,
    )?))
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct EmbeddingEncoderParams {
    hidden: usize,
    src_emb_size: usize,
}

/// Position-wise projection without recurrence: `h_t = tanh(x_t W + b)`.
#[derive(Debug, Clone)]
pub struct EmbeddingEncoder {
    hidden: usize,
    emb_size: usize,
    vocab_size: usize,
}

impl EmbeddingEncoder {
    pub fn new(hidden: usize, emb_size: usize, vocab_size: usize) -> Result<Self> {
        if hidden == 0 || emb_size == 0 {
            return Err(Error::Config(
                "embedding encoder: hidden and src_emb_size must be positive".into(),
            ));
        }
        Ok(Self {
            hidden,
            emb_size,
            vocab_size,
        })
    }
}

impl Encoder for EmbeddingEncoder {
    fn kind(&self) -> &'static str {
        "embedding"
    }

    fn hidden_size(&self) -> usize {
        self.hidden
    }

    fn init_params(&self, rng: &mut ChaCha8Rng, params: &mut ParamStore) -> Result<()> {
        params.insert(
            "encoder/embedding",
            uniform_init(rng, vec![self.vocab_size, self.emb_size], 0.1),
            true,
        )?;
        params.insert(
            "encoder/projection/kernel",
            uniform_init(
                rng,
                vec![self.emb_size, self.hidden],
                (1.0 / self.emb_size as f32).sqrt(),
            ),
            true,
        )?;
        params.insert(
            "encoder/projection/bias",
            Tensor::zeros(vec![self.hidden], DType::F32),
            true,
        )
    }

    fn encode(&self, tape: &mut Tape, vars: &VarMap, batch: &Batch) -> Result<Representation> {
        let emb = vars.get("encoder/embedding")?;
        let w = vars.get("encoder/projection/kernel")?;
        let b = vars.get("encoder/projection/bias")?;
        let mut states = Vec::with_capacity(batch.src_len);
        for t in 0..batch.src_len {
            let x = tape.embedding_gather(emb, &batch.source_column(t))?;
            let p = tape.matmul(x, w)?;
            let p = tape.add_row(p, b)?;
            states.push(tape.tanh(p));
        }
        Ok(Representation {
            states: tape.stack_time(&states)?,
            lengths: batch.source_lengths.clone(),
        })
    }
}

pub(super) fn embedding_factory(params: &Value, ctx: &BlockContext) -> Result<Box<dyn Encoder>> {
    let p: EmbeddingEncoderParams = parse_params("embedding encoder", params)?;
    Ok(Box::new(EmbeddingEncoder::new(
        p.hidden,
        p.src_emb_size,
        ctx.vocab_size,
    )?))
}

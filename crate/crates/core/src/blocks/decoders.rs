use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use serde_json::Value;

use super::encoders::rnn_cell;
use super::{parse_params, uniform_init, BlockContext, Decoder, Representation};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamStore, VarMap};
use crate::tensor::{DType, Tensor};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct DecoderParams {
    hidden: usize,
    tgt_emb_size: usize,
}

/// Shared shape of both decoders: embedding, one tanh-RNN layer seeded with
/// the encoder state at each row's last valid position, and an output
/// projection.
#[derive(Debug, Clone)]
struct RnnCore {
    hidden: usize,
    emb_size: usize,
    vocab_size: usize,
}

impl RnnCore {
    fn new(p: DecoderParams, vocab_size: usize, what: &str) -> Result<Self> {
        if p.hidden == 0 || p.tgt_emb_size == 0 {
            return Err(Error::Config(format!(
                "{what}: hidden and tgt_emb_size must be positive"
            )));
        }
        Ok(Self {
            hidden: p.hidden,
            emb_size: p.tgt_emb_size,
            vocab_size,
        })
    }

    fn init_params(
        &self,
        rng: &mut ChaCha8Rng,
        params: &mut ParamStore,
        out_in: usize,
    ) -> Result<()> {
        let h = self.hidden;
        params.insert(
            "decoder/embedding",
            uniform_init(rng, vec![self.vocab_size, self.emb_size], 0.1),
            true,
        )?;
        params.insert(
            "decoder/rnn/input_kernel",
            uniform_init(
                rng,
                vec![self.emb_size, h],
                (1.0 / self.emb_size as f32).sqrt(),
            ),
            true,
        )?;
        params.insert(
            "decoder/rnn/recurrent_kernel",
            uniform_init(rng, vec![h, h], (1.0 / h as f32).sqrt()),
            true,
        )?;
        params.insert("decoder/rnn/bias", Tensor::zeros(vec![h], DType::F32), true)?;
        params.insert(
            "decoder/output/kernel",
            uniform_init(
                rng,
                vec![out_in, self.vocab_size],
                (1.0 / out_in as f32).sqrt(),
            ),
            true,
        )?;
        params.insert(
            "decoder/output/bias",
            Tensor::zeros(vec![self.vocab_size], DType::F32),
            true,
        )
    }

    fn initial_state(&self, tape: &mut Tape, rep: &Representation) -> Result<Var> {
        let width = tape.value(rep.states).shape().last().copied().unwrap_or(0);
        if width != self.hidden {
            return Err(Error::shape(format!(
                "decoder hidden size {} does not match encoder output width {width}",
                self.hidden
            )));
        }
        let last: Vec<usize> = rep.lengths.iter().map(|&l| l.saturating_sub(1)).collect();
        tape.select_time(rep.states, &last)
    }

    fn advance(&self, tape: &mut Tape, vars: &VarMap, state: Var, prev: &[usize]) -> Result<Var> {
        let x = tape.embedding_gather(vars.get("decoder/embedding")?, prev)?;
        rnn_cell(
            tape,
            x,
            Some(state),
            vars.get("decoder/rnn/input_kernel")?,
            vars.get("decoder/rnn/recurrent_kernel")?,
            vars.get("decoder/rnn/bias")?,
        )
    }

    fn project(&self, tape: &mut Tape, vars: &VarMap, features: Var) -> Result<Var> {
        let logits = tape.matmul(features, vars.get("decoder/output/kernel")?)?;
        tape.add_row(logits, vars.get("decoder/output/bias")?)
    }
}

/// RNN decoder with dot-product attention over the encoder states. Logits
/// come from the concatenation of the new state and its attention context.
#[derive(Debug, Clone)]
pub struct RnnAttentionDecoder {
    core: RnnCore,
}

impl RnnAttentionDecoder {
    pub fn new(hidden: usize, emb_size: usize, vocab_size: usize) -> Result<Self> {
        let p = DecoderParams {
            hidden,
            tgt_emb_size: emb_size,
        };
        Ok(Self {
            core: RnnCore::new(p, vocab_size, "rnn_attention decoder")?,
        })
    }
}

impl Decoder for RnnAttentionDecoder {
    fn kind(&self) -> &'static str {
        "rnn_attention"
    }

    fn hidden_size(&self) -> usize {
        self.core.hidden
    }

    fn init_params(&self, rng: &mut ChaCha8Rng, params: &mut ParamStore) -> Result<()> {
        self.core.init_params(rng, params, 2 * self.core.hidden)
    }

    fn initial_state(&self, tape: &mut Tape, _vars: &VarMap, rep: &Representation) -> Result<Var> {
        self.core.initial_state(tape, rep)
    }

    fn step(
        &self,
        tape: &mut Tape,
        vars: &VarMap,
        rep: &Representation,
        state: Var,
        prev: &[usize],
    ) -> Result<(Var, Var)> {
        let h = self.core.advance(tape, vars, state, prev)?;
        let ctx = tape.attention(h, rep.states, &rep.lengths)?;
        let features = tape.concat_last(h, ctx)?;
        Ok((self.core.project(tape, vars, features)?, h))
    }
}

pub(super) fn rnn_attention_factory(
    params: &Value,
    ctx: &BlockContext,
) -> Result<Box<dyn Decoder>> {
    let p: DecoderParams = parse_params("rnn_attention decoder", params)?;
    Ok(Box::new(RnnAttentionDecoder {
        core: RnnCore::new(p, ctx.vocab_size, "rnn_attention decoder")?,
    }))
}

/// Plain RNN decoder without attention.
#[derive(Debug, Clone)]
pub struct RnnDecoder {
    core: RnnCore,
}

impl RnnDecoder {
    pub fn new(hidden: usize, emb_size: usize, vocab_size: usize) -> Result<Self> {
        let p = DecoderParams {
            hidden,
            tgt_emb_size: emb_size,
        };
        Ok(Self {
            core: RnnCore::new(p, vocab_size, "rnn decoder")?,
        })
    }
}

impl Decoder for RnnDecoder {
    fn kind(&self) -> &'static str {
        "rnn"
    }

    fn hidden_size(&self) -> usize {
        self.core.hidden
    }

    fn init_params(&self, rng: &mut ChaCha8Rng, params: &mut ParamStore) -> Result<()> {
        self.core.init_params(rng, params, self.core.hidden)
    }

    fn initial_state(&self, tape: &mut Tape, _vars: &VarMap, rep: &Representation) -> Result<Var> {
        self.core.initial_state(tape, rep)
    }

    fn step(
        &self,
        tape: &mut Tape,
        vars: &VarMap,
        _rep: &Representation,
        state: Var,
        prev: &[usize],
    ) -> Result<(Var, Var)> {
        let h = self.core.advance(tape, vars, state, prev)?;
        Ok((self.core.project(tape, vars, h)?, h))
    }
}

pub(super) fn rnn_factory(params: &Value, ctx: &BlockContext) -> Result<Box<dyn Decoder>> {
    let p: DecoderParams = parse_params("rnn decoder", params)?;
    Ok(Box::new(RnnDecoder {
        core: RnnCore::new(p, ctx.vocab_size, "rnn decoder")?,
    }))
}

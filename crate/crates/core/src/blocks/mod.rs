//! Model building blocks: data layers, encoders, decoders and losses.
//!
//! An encoder turns a [`Batch`] into a [`Representation`]; a decoder turns a
//! representation into per-step logits. The representation is the only
//! contract between the two, so any registered encoder composes with any
//! registered decoder of the same hidden size.

pub mod data;
mod decoders;
mod encoders;
mod loss;
mod model;
pub mod vocab;

pub use data::{Batch, BatchStream, DataLayer, Example, ParallelText, Split, SyntheticTask};
pub use decoders::{RnnAttentionDecoder, RnnDecoder};
pub use encoders::{EmbeddingEncoder, RnnEncoder};
pub use loss::BasicSequenceLoss;
pub use model::{argmax_lowest, ForwardPass, Model};
pub use vocab::Vocabulary;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::{ParamStore, VarMap};
use crate::registry::Registry;

/// Encoder output: states `[batch, time, hidden]` plus valid lengths.
#[derive(Debug, Clone)]
pub struct Representation {
    pub states: Var,
    pub lengths: Vec<usize>,
}

/// Facts every block factory may need.
#[derive(Debug, Clone, Copy)]
pub struct BlockContext {
    pub vocab_size: usize,
}

pub trait Encoder: Send + Sync {
    fn kind(&self) -> &'static str;
    fn hidden_size(&self) -> usize;
    /// Adds this block's variables (FP32 initial values) to `params`.
    fn init_params(&self, rng: &mut ChaCha8Rng, params: &mut ParamStore) -> Result<()>;
    fn encode(&self, tape: &mut Tape, vars: &VarMap, batch: &Batch) -> Result<Representation>;
}

pub trait Decoder: Send + Sync {
    fn kind(&self) -> &'static str;
    fn hidden_size(&self) -> usize;
    fn init_params(&self, rng: &mut ChaCha8Rng, params: &mut ParamStore) -> Result<()>;
    /// Recurrent state before the first output step.
    fn initial_state(&self, tape: &mut Tape, vars: &VarMap, rep: &Representation) -> Result<Var>;
    /// One output step fed with the previous tokens. Returns logits
    /// `[batch, vocab]` and the next state.
    fn step(
        &self,
        tape: &mut Tape,
        vars: &VarMap,
        rep: &Representation,
        state: Var,
        prev: &[usize],
    ) -> Result<(Var, Var)>;

    /// Logits `[batch, tgt_len, vocab]` with ground-truth previous tokens fed
    /// at every step.
    fn teacher_forced(
        &self,
        tape: &mut Tape,
        vars: &VarMap,
        rep: &Representation,
        batch: &Batch,
    ) -> Result<Var> {
        let mut state = self.initial_state(tape, vars, rep)?;
        let mut logits = Vec::with_capacity(batch.tgt_len);
        for t in 0..batch.tgt_len {
            let (l, s) = self.step(tape, vars, rep, state, &batch.decoder_inputs(t))?;
            logits.push(l);
            state = s;
        }
        tape.stack_time(&logits)
    }
}

pub trait Loss: Send + Sync {
    fn kind(&self) -> &'static str;
    /// Scalar FP32 loss from logits `[batch, tgt_len, vocab]`.
    fn compute(&self, tape: &mut Tape, logits: Var, batch: &Batch) -> Result<Var>;
}

pub type EncoderFactory = fn(&Value, &BlockContext) -> Result<Box<dyn Encoder>>;
pub type DecoderFactory = fn(&Value, &BlockContext) -> Result<Box<dyn Decoder>>;
pub type LossFactory = fn(&Value) -> Result<Box<dyn Loss>>;
pub type DataLayerFactory = fn(&Value, Split) -> Result<Box<dyn DataLayer>>;

/// A block kind plus its kind-specific parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub kind: String,
    #[serde(default = "empty_params")]
    pub params: Value,
}

fn empty_params() -> Value {
    Value::Object(Default::default())
}

impl BlockSpec {
    pub fn new(kind: &str, params: Value) -> Self {
        Self {
            kind: kind.to_string(),
            params,
        }
    }
}

/// All registered block kinds, looked up by config name.
#[derive(Debug)]
pub struct BlockRegistry {
    pub encoders: Registry<EncoderFactory>,
    pub decoders: Registry<DecoderFactory>,
    pub losses: Registry<LossFactory>,
    pub data_layers: Registry<DataLayerFactory>,
}

impl Default for BlockRegistry {
    fn default() -> Self {
        Self {
            encoders: Registry::new("encoder")
                .with("rnn", encoders::rnn_factory as EncoderFactory)
                .with("embedding", encoders::embedding_factory as EncoderFactory),
            decoders: Registry::new("decoder")
                .with(
                    "rnn_attention",
                    decoders::rnn_attention_factory as DecoderFactory,
                )
                .with("rnn", decoders::rnn_factory as DecoderFactory),
            losses: Registry::new("loss").with(
                "BasicSequenceLoss",
                loss::basic_sequence_factory as LossFactory,
            ),
            data_layers: Registry::new("data layer")
                .with("copy_task", data::copy_task_factory as DataLayerFactory)
                .with(
                    "reverse_task",
                    data::reverse_task_factory as DataLayerFactory,
                )
                .with(
                    "parallel_text",
                    data::parallel_text_factory as DataLayerFactory,
                ),
        }
    }
}

impl BlockRegistry {
    pub fn encoder(&self, spec: &BlockSpec, ctx: &BlockContext) -> Result<Box<dyn Encoder>> {
        (self.encoders.get(&spec.kind)?)(&spec.params, ctx)
    }

    pub fn decoder(&self, spec: &BlockSpec, ctx: &BlockContext) -> Result<Box<dyn Decoder>> {
        (self.decoders.get(&spec.kind)?)(&spec.params, ctx)
    }

    pub fn loss(&self, spec: &BlockSpec) -> Result<Box<dyn Loss>> {
        (self.losses.get(&spec.kind)?)(&spec.params)
    }

    pub fn data_layer(&self, spec: &BlockSpec, split: Split) -> Result<Box<dyn DataLayer>> {
        (self.data_layers.get(&spec.kind)?)(&spec.params, split)
    }
}

pub(crate) fn parse_params<T: serde::de::DeserializeOwned>(
    what: &str,
    params: &Value,
) -> Result<T> {
    serde_json::from_value(params.clone())
        .map_err(|e| crate::error::Error::Config(format!("{what} params: {e}")))
}

/// Uniform initial values in `[-limit, limit]`, FP32.
pub(crate) fn uniform_init(
    rng: &mut ChaCha8Rng,
    shape: Vec<usize>,
    limit: f32,
) -> crate::tensor::Tensor {
    use rand::Rng;
    let n: usize = shape.iter().product();
    let values = (0..n).map(|_| rng.gen_range(-limit..=limit)).collect();
    crate::tensor::Tensor::from_f32(shape, values).expect("element count matches shape")
}

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::vocab::EOS;
use super::{Batch, Decoder, Encoder, Loss};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamStore, VarMap};
use crate::tensor::DType;

/// Encoder, decoder and loss wired together. Holds no variable values, so
/// one model can be shared by any number of replicas, each passing its own
/// [`ParamStore`].
#[derive(Clone)]
pub struct Model {
    encoder: Arc<dyn Encoder>,
    decoder: Arc<dyn Decoder>,
    loss: Arc<dyn Loss>,
    vocab_size: usize,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("encoder", &self.encoder.kind())
            .field("decoder", &self.decoder.kind())
            .field("loss", &self.loss.kind())
            .field("vocab_size", &self.vocab_size)
            .finish()
    }
}

/// A recorded forward pass, ready for backward.
#[derive(Debug)]
pub struct ForwardPass {
    pub tape: Tape,
    pub loss: Var,
    pub logits: Var,
    pub vars: VarMap,
}

impl ForwardPass {
    pub fn loss_value(&self) -> f32 {
        self.tape.value(self.loss).get_f32(0)
    }
}

impl Model {
    pub fn new(
        encoder: Box<dyn Encoder>,
        decoder: Box<dyn Decoder>,
        loss: Box<dyn Loss>,
        vocab_size: usize,
    ) -> Result<Self> {
        if encoder.hidden_size() != decoder.hidden_size() {
            return Err(Error::Config(format!(
                "encoder hidden size {} differs from decoder hidden size {}",
                encoder.hidden_size(),
                decoder.hidden_size()
            )));
        }
        Ok(Self {
            encoder: encoder.into(),
            decoder: decoder.into(),
            loss: loss.into(),
            vocab_size,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn encoder(&self) -> &dyn Encoder {
        self.encoder.as_ref()
    }

    pub fn decoder(&self) -> &dyn Decoder {
        self.decoder.as_ref()
    }

    /// Fresh FP32 variables drawn from `seed`.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        self.encoder.init_params(&mut rng, &mut params)?;
        self.decoder.init_params(&mut rng, &mut params)?;
        Ok(params)
    }

    /// Teacher-forced forward pass. Operations run in the precision of the
    /// values in `params`.
    pub fn forward(&self, params: &ParamStore, batch: &Batch) -> Result<ForwardPass> {
        self.check_ids(batch)?;
        let compute = params
            .iter()
            .next()
            .map(|(_, t)| t.dtype())
            .unwrap_or(DType::F32);
        let mut tape = Tape::new(compute);
        let vars = params.register(&mut tape)?;
        let rep = self.encoder.encode(&mut tape, &vars, batch)?;
        let logits = self.decoder.teacher_forced(&mut tape, &vars, &rep, batch)?;
        let loss = self.loss.compute(&mut tape, logits, batch)?;
        Ok(ForwardPass {
            tape,
            loss,
            logits,
            vars,
        })
    }

    /// Correct and total argmax predictions over non-padding target positions.
    pub fn token_accuracy(&self, pass: &ForwardPass, batch: &Batch) -> (usize, usize) {
        let logits = pass.tape.value(pass.logits).to_f32_vec();
        let v = self.vocab_size;
        let mut correct = 0;
        let mut total = 0;
        for (r, (&m, &t)) in batch.mask.iter().zip(&batch.target).enumerate() {
            if m == 0.0 {
                continue;
            }
            total += 1;
            if argmax_lowest(&logits[r * v..(r + 1) * v]) == t {
                correct += 1;
            }
        }
        (correct, total)
    }

    /// Greedy decoding: at each step the highest-scoring token (lowest id on
    /// ties) is fed back. A row stops at eos or after `max_len` tokens; eos is
    /// not included in the output.
    pub fn greedy_decode(
        &self,
        params: &ParamStore,
        sources: &[Vec<usize>],
        max_len: usize,
    ) -> Result<Vec<Vec<usize>>> {
        let batch = Batch::from_sources(sources)?;
        self.check_ids(&batch)?;
        let mut tape = Tape::new(DType::F32);
        let vars = params.register(&mut tape)?;
        let rep = self.encoder.encode(&mut tape, &vars, &batch)?;
        let mut state = self.decoder.initial_state(&mut tape, &vars, &rep)?;
        let mut prev = vec![super::vocab::BOS; batch.size];
        let mut out = vec![Vec::new(); batch.size];
        let mut done = vec![false; batch.size];
        for _ in 0..max_len {
            if done.iter().all(|&d| d) {
                break;
            }
            let (logits, next) = self.decoder.step(&mut tape, &vars, &rep, state, &prev)?;
            let values = tape.value(logits).to_f32_vec();
            for b in 0..batch.size {
                let id = argmax_lowest(&values[b * self.vocab_size..(b + 1) * self.vocab_size]);
                prev[b] = id;
                if done[b] {
                    continue;
                }
                if id == EOS {
                    done[b] = true;
                } else {
                    out[b].push(id);
                }
            }
            state = next;
        }
        Ok(out)
    }

    fn check_ids(&self, batch: &Batch) -> Result<()> {
        let max = batch.max_id();
        if max >= self.vocab_size {
            return Err(Error::Data(format!(
                "token id {max} outside vocabulary of {}",
                self.vocab_size
            )));
        }
        Ok(())
    }
}

/// Index of the largest value, lowest index on ties. NaN entries never win.
pub fn argmax_lowest(values: &[f32]) -> usize {
    let mut best = 0;
    let mut best_value = f32::NEG_INFINITY;
    for (i, &v) in values.iter().enumerate() {
        if v > best_value {
            best = i;
            best_value = v;
        }
    }
    best
}

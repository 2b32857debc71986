use serde::Deserialize;
use serde_json::Value;

use super::{parse_params, Batch, Loss};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// Token cross-entropy averaged over non-padding target positions.
#[derive(Debug, Clone, Default)]
pub struct BasicSequenceLoss;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct NoParams {}

impl Loss for BasicSequenceLoss {
    fn kind(&self) -> &'static str {
        "BasicSequenceLoss"
    }

    fn compute(&self, tape: &mut Tape, logits: Var, batch: &Batch) -> Result<Var> {
        let shape = tape.value(logits).shape();
        if shape.len() != 3 || shape[0] != batch.size || shape[1] != batch.tgt_len {
            return Err(Error::shape(format!(
                "logits {shape:?} for a batch of {} x {}",
                batch.size, batch.tgt_len
            )));
        }
        tape.softmax_cross_entropy_with_mask(logits, &batch.target, &batch.mask)
    }
}

pub(super) fn basic_sequence_factory(params: &Value) -> Result<Box<dyn Loss>> {
    let _: NoParams = parse_params("BasicSequenceLoss", params)?;
    Ok(Box::new(BasicSequenceLoss))
}

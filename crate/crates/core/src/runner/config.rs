use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::blocks::{BlockRegistry, BlockSpec};
use crate::distrib::TransportKind;
use crate::error::{Error, Result};
use crate::mixed_precision::{
    loss_scale_registry, LossScalePolicy, Precision, RegularizerKind, StaticScale,
};
use crate::optim::{lr_policy_registry, optimizer_registry, LrPolicy, Optimizer};

fn empty() -> Value {
    Value::Object(Default::default())
}

fn is_empty(v: &Value) -> bool {
    v.as_object().is_some_and(|m| m.is_empty())
}

fn one() -> usize {
    1
}

fn default_lr_policy() -> String {
    "constant".into()
}

fn default_loss() -> String {
    "BasicSequenceLoss".into()
}

fn default_eval_examples() -> usize {
    200
}

fn default_decode_len() -> usize {
    64
}

/// A regularizer applied to every trainable variable whose name matches
/// the glob `pattern`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularizerSpec {
    pub pattern: String,
    pub kind: RegularizerKind,
    pub scale: f32,
}

/// A training run, as read from a JSON config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub batch_size_per_gpu: usize,
    #[serde(default = "one")]
    pub num_workers: usize,
    /// Ring allreduce between replicas; tower mode when false.
    #[serde(default)]
    pub use_allreduce: bool,
    #[serde(default)]
    pub transport: TransportKind,
    /// `host:port` per rank, for the tcp transport.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub workers: Vec<String>,
    #[serde(default)]
    pub dtype: Precision,
    /// Static loss scale. Mutually exclusive with `loss_scaling`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_scale: Option<f32>,
    /// Loss-scale policy kind.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_scaling: Option<String>,
    #[serde(default = "empty", skip_serializing_if = "is_empty")]
    pub loss_scaling_params: Value,
    pub optimizer: String,
    #[serde(default = "empty", skip_serializing_if = "is_empty")]
    pub optimizer_params: Value,
    #[serde(default = "default_lr_policy")]
    pub lr_policy: String,
    #[serde(default = "empty", skip_serializing_if = "is_empty")]
    pub lr_policy_params: Value,
    pub encoder: String,
    #[serde(default = "empty", skip_serializing_if = "is_empty")]
    pub encoder_params: Value,
    pub decoder: String,
    #[serde(default = "empty", skip_serializing_if = "is_empty")]
    pub decoder_params: Value,
    #[serde(default = "default_loss")]
    pub loss: String,
    #[serde(default = "empty", skip_serializing_if = "is_empty")]
    pub loss_params: Value,
    pub data_layer: String,
    #[serde(default = "empty", skip_serializing_if = "is_empty")]
    pub data_layer_params: Value,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub regularizers: Vec<RegularizerSpec>,
    pub max_steps: u64,
    /// Steps between evaluations in train_eval mode; 0 evaluates only at the end.
    #[serde(default)]
    pub eval_every: u64,
    #[serde(default = "default_eval_examples")]
    pub eval_examples: usize,
    #[serde(default = "default_decode_len")]
    pub max_decode_len: usize,
    /// Parameter initialization seed.
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_dir: Option<PathBuf>,
    /// Steps between checkpoints (0: only at the end of training).
    #[serde(default)]
    pub save_checkpoint_steps: u64,
    /// Where metrics and logs go; defaults to `checkpoint_dir`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_dir: Option<PathBuf>,
    /// Send allreduce payloads as binary16 instead of FP32.
    #[serde(default)]
    pub allreduce_f16_payload: bool,
}

/// Parses and validates a config document.
pub fn parse_config(bytes: &[u8]) -> Result<Config> {
    let config: Config = serde_json::from_slice(bytes)
        .map_err(|e| Error::Config(format!("line {} column {}: {e}", e.line(), e.column())))?;
    config.validate()?;
    Ok(config)
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size_per_gpu == 0 {
            return Err(Error::Config(
                "batch_size_per_gpu must be at least 1".into(),
            ));
        }
        if self.num_workers == 0 {
            return Err(Error::Config("num_workers must be at least 1".into()));
        }
        if self.loss_scale.is_some() && self.loss_scaling.is_some() {
            return Err(Error::Config(
                "set either loss_scale (static) or loss_scaling (policy), not both".into(),
            ));
        }
        if self.loss_scale.is_some() && !is_empty(&self.loss_scaling_params) {
            return Err(Error::Config(
                "loss_scaling_params given with a static loss_scale".into(),
            ));
        }
        if self.transport == TransportKind::Tcp {
            if !self.use_allreduce {
                return Err(Error::Config(
                    "the tcp transport needs use_allreduce; tower mode is single-process".into(),
                ));
            }
            if self.workers.len() != self.num_workers {
                return Err(Error::Config(format!(
                    "tcp transport: {} worker addresses for num_workers = {}",
                    self.workers.len(),
                    self.num_workers
                )));
            }
        }
        let blocks = BlockRegistry::default();
        blocks.encoders.get(&self.encoder)?;
        blocks.decoders.get(&self.decoder)?;
        blocks.losses.get(&self.loss)?;
        blocks.data_layers.get(&self.data_layer)?;
        // Cheap to build, so parameter mistakes surface here too.
        self.build_policy()?;
        self.build_optimizer()?;
        self.build_lr_policy()?;
        for r in &self.regularizers {
            globset::Glob::new(&r.pattern)
                .map_err(|e| Error::Config(format!("regularizer pattern '{}': {e}", r.pattern)))?;
        }
        Ok(())
    }

    pub fn encoder_spec(&self) -> BlockSpec {
        BlockSpec::new(&self.encoder, self.encoder_params.clone())
    }

    pub fn decoder_spec(&self) -> BlockSpec {
        BlockSpec::new(&self.decoder, self.decoder_params.clone())
    }

    pub fn loss_spec(&self) -> BlockSpec {
        BlockSpec::new(&self.loss, self.loss_params.clone())
    }

    pub fn data_layer_spec(&self) -> BlockSpec {
        BlockSpec::new(&self.data_layer, self.data_layer_params.clone())
    }

    /// The loss-scale policy: the named one, a static `loss_scale`, or a
    /// static scale of 1.
    pub fn build_policy(&self) -> Result<Box<dyn LossScalePolicy>> {
        match (&self.loss_scaling, self.loss_scale) {
            (Some(kind), _) => (loss_scale_registry().get(kind)?)(&self.loss_scaling_params),
            (None, Some(s)) => Ok(Box::new(StaticScale::new(s)?)),
            (None, None) => Ok(Box::new(StaticScale::new(1.0)?)),
        }
    }

    pub fn build_optimizer(&self) -> Result<Box<dyn Optimizer>> {
        (optimizer_registry().get(&self.optimizer)?)(&self.optimizer_params)
    }

    pub fn build_lr_policy(&self) -> Result<Box<dyn LrPolicy>> {
        (lr_policy_registry().get(&self.lr_policy)?)(&self.lr_policy_params)
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(json)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

//! Config-driven runs: train, eval, train_eval and infer.

pub mod checkpoint;
mod config;
pub mod metrics;

pub use config::{parse_config, Config, RegularizerSpec};
pub use metrics::{bleu4, wer, MetricsLog, MetricsRow, CSV_HEADER};

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use globset::GlobBuilder;
use log::{info, warn};
use serde::Serialize;

use crate::blocks::{
    Batch, BatchStream, BlockContext, BlockRegistry, DataLayer, Example, Model, Split,
};
use crate::distrib::{Replica, StepReport, TcpTransport, Transport, TransportKind, WorkerGroup};
use crate::error::{Error, Result};
use crate::mixed_precision::{RegularizerRegistry, StepOutcome};
use crate::params::ParamStore;
use crate::tensor::DType;

/// How long a tcp rank waits for its peers to show up.
const RENDEZVOUS_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Train,
    Eval,
    #[value(name = "train_eval")]
    TrainEval,
    Infer,
}

/// Command-line settings layered over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub num_workers: Option<usize>,
    pub use_allreduce: Option<bool>,
    /// Also write a per-step text log next to the metrics.
    pub enable_logs: bool,
    pub infer_input: Option<PathBuf>,
    pub infer_output: Option<PathBuf>,
    /// This process's rank with the tcp transport.
    pub rank: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalResult {
    /// Training steps completed by the evaluated parameters.
    pub step: u64,
    pub examples: usize,
    /// Token-weighted mean loss.
    pub loss: f64,
    pub token_accuracy: f64,
    /// Fraction of greedy decodes equal to the target.
    pub sequence_accuracy: f64,
    pub bleu: Option<f64>,
    pub wer: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunOutcome {
    pub mode: RunMode,
    /// Completed training steps at the end of the run.
    pub step: u64,
    /// Steps run by this invocation (after any resume).
    pub steps_run: u64,
    pub skipped_steps: u64,
    pub evals: Vec<EvalResult>,
    pub checkpoint: Option<PathBuf>,
    pub metrics_file: Option<PathBuf>,
    /// Lines written in infer mode.
    pub inferred: Option<usize>,
}

/// A validated config with its model and data layers built.
pub struct Runner {
    config: Config,
    overrides: Overrides,
    model: Model,
    train_layer: Arc<dyn DataLayer>,
    eval_layer: Arc<dyn DataLayer>,
}

impl std::fmt::Debug for Runner {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Runner")
            .field("config", &self.config)
            .field("model", &self.model)
            .finish()
    }
}

/// The f64 with the same shortest decimal form as `x`, so CSV cells read
/// `0.003` rather than `0.003000000026077032`.
fn widen(x: f32) -> f64 {
    x.to_string().parse().unwrap_or(x as f64)
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Runner {
    pub fn new(mut config: Config, overrides: Overrides) -> Result<Self> {
        if let Some(k) = overrides.num_workers {
            config.num_workers = k;
        }
        if let Some(a) = overrides.use_allreduce {
            config.use_allreduce = a;
        }
        config.validate()?;
        let blocks = BlockRegistry::default();
        let train_layer: Arc<dyn DataLayer> =
            Arc::from(blocks.data_layer(&config.data_layer_spec(), Split::Train)?);
        let eval_layer: Arc<dyn DataLayer> =
            Arc::from(blocks.data_layer(&config.data_layer_spec(), Split::Eval)?);
        if train_layer.unknown_tokens() > 0 {
            warn!(
                "{} training tokens mapped to <unk>",
                train_layer.unknown_tokens()
            );
        }
        if eval_layer.unknown_tokens() > 0 {
            warn!(
                "{} eval tokens are not in the training vocabulary",
                eval_layer.unknown_tokens()
            );
        }
        let ctx = BlockContext {
            vocab_size: train_layer.vocab().size(),
        };
        let model = Model::new(
            blocks.encoder(&config.encoder_spec(), &ctx)?,
            blocks.decoder(&config.decoder_spec(), &ctx)?,
            blocks.loss(&config.loss_spec())?,
            ctx.vocab_size,
        )?;
        Ok(Self {
            config,
            overrides,
            model,
            train_layer,
            eval_layer,
        })
    }

    /// The config after command-line overrides.
    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn train_layer(&self) -> &Arc<dyn DataLayer> {
        &self.train_layer
    }

    fn rank(&self) -> usize {
        self.overrides.rank.unwrap_or(0)
    }

    fn writes_artifacts(&self) -> bool {
        self.rank() == 0
    }

    fn log_dir(&self) -> Option<&Path> {
        self.config
            .log_dir
            .as_deref()
            .or(self.config.checkpoint_dir.as_deref())
    }

    /// Registry entries for every trainable variable matched by a
    /// configured pattern.
    pub fn regularizers(&self, vars: &ParamStore) -> Result<RegularizerRegistry> {
        let mut reg = RegularizerRegistry::new();
        for spec in &self.config.regularizers {
            let glob = GlobBuilder::new(&spec.pattern)
                .literal_separator(true)
                .build()
                .map_err(|e| Error::Config(format!("regularizer pattern '{}': {e}", spec.pattern)))?
                .compile_matcher();
            let mut matched = 0;
            for (name, _) in vars.trainable() {
                if glob.is_match(name) {
                    reg.register(name, spec.kind, spec.scale)?;
                    matched += 1;
                }
            }
            if matched == 0 {
                return Err(Error::Config(format!(
                    "regularizer pattern '{}' matches no variable",
                    spec.pattern
                )));
            }
        }
        Ok(reg)
    }

    /// A fresh replica initialized from the config seed.
    pub fn build_replica(&self) -> Result<Replica> {
        let c = &self.config;
        let init = self.model.init_params(c.seed)?;
        let regs = self.regularizers(&init)?;
        let mut r = Replica::new(
            self.model.clone(),
            &init,
            c.dtype,
            c.build_policy()?,
            regs,
            c.build_optimizer()?,
            Arc::from(c.build_lr_policy()?),
        )?;
        if c.allreduce_f16_payload {
            r.set_wire_dtype(DType::F16);
        }
        Ok(r)
    }

    /// The worker group described by the config. With the tcp transport this
    /// blocks until every rank in the roster has connected.
    pub fn build_group(&self) -> Result<WorkerGroup> {
        let c = &self.config;
        let k = c.num_workers;
        let stream = BatchStream::new(Arc::clone(&self.train_layer), c.batch_size_per_gpu);
        match c.transport {
            TransportKind::InProcess if c.use_allreduce => {
                let replicas = (0..k)
                    .map(|_| self.build_replica())
                    .collect::<Result<Vec<_>>>()?;
                WorkerGroup::in_process(replicas, &stream)
            }
            TransportKind::InProcess => WorkerGroup::tower(self.build_replica()?, k, &stream),
            TransportKind::Tcp => {
                let rank = self.rank();
                info!("rank {rank}: joining {} workers over tcp", k);
                let t = TcpTransport::establish(rank, &c.workers, RENDEZVOUS_TIMEOUT)?;
                WorkerGroup::allreduce(
                    vec![self.build_replica()?],
                    vec![Box::new(t) as Box<dyn Transport>],
                    vec![stream.shard(rank, k)?],
                )
            }
        }
    }

    fn checkpoint_dir(&self) -> Result<&Path> {
        self.config
            .checkpoint_dir
            .as_deref()
            .ok_or_else(|| Error::Config("checkpoint_dir is not set".into()))
    }

    /// Loads the checkpoint into a fresh replica.
    pub fn restored_replica(&self) -> Result<(Replica, u64)> {
        let dir = self.checkpoint_dir()?;
        if !checkpoint::exists(dir) {
            return Err(Error::Checkpoint(format!(
                "no checkpoint in {}",
                dir.display()
            )));
        }
        let ck = checkpoint::load(dir)?;
        let mut r = self.build_replica()?;
        checkpoint::restore(&ck, &mut r)?;
        Ok((r, ck.manifest.step))
    }

    fn eval_examples(&self) -> Vec<u64> {
        let n = self.config.eval_examples as u64;
        let n = self.eval_layer.epoch_size().map_or(n, |e| n.min(e));
        (0..n).collect()
    }

    /// Teacher-forced loss and token accuracy plus greedy-decode metrics
    /// over the eval split. `params` may be F16 (loss is then computed in
    /// F16); decoding always widens to FP32.
    pub fn evaluate(&self, params: &ParamStore, step: u64) -> Result<EvalResult> {
        let examples: Vec<Example> = self
            .eval_examples()
            .into_iter()
            .map(|i| self.eval_layer.example(i))
            .collect::<Result<_>>()?;
        let wide = params.cast(DType::F32);
        let vocab = self.train_layer.vocab();
        let mut loss_sum = 0.0f64;
        let (mut correct, mut tokens, mut exact) = (0usize, 0usize, 0usize);
        let mut hyps = Vec::with_capacity(examples.len());
        let mut refs = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(self.config.batch_size_per_gpu) {
            let batch = Batch::from_examples(chunk)?;
            let pass = self.model.forward(params, &batch)?;
            let (c, t) = self.model.token_accuracy(&pass, &batch);
            loss_sum += widen(pass.loss_value()) * t as f64;
            correct += c;
            tokens += t;
            let sources: Vec<Vec<usize>> = chunk.iter().map(|e| e.source.clone()).collect();
            let decoded = self
                .model
                .greedy_decode(&wide, &sources, self.config.max_decode_len)?;
            for (d, e) in decoded.iter().zip(chunk) {
                exact += usize::from(*d == e.target);
                hyps.push(vocab.decode(d));
                refs.push(vocab.decode(&e.target));
            }
        }
        let (bleu, wer) = if self.eval_layer.has_references() {
            let h: Vec<&str> = hyps.iter().map(String::as_str).collect();
            let r: Vec<&str> = refs.iter().map(String::as_str).collect();
            (Some(bleu4(&h, &r)?), Some(metrics::wer(&h, &r)?))
        } else {
            (None, None)
        };
        Ok(EvalResult {
            step,
            examples: examples.len(),
            loss: if tokens == 0 {
                0.0
            } else {
                loss_sum / tokens as f64
            },
            token_accuracy: ratio(correct, tokens),
            sequence_accuracy: ratio(exact, examples.len()),
            bleu,
            wer,
        })
    }

    /// Greedy-decodes each line of `input` into a line of `output`. Blank
    /// input lines give blank output lines.
    pub fn infer(&self, params: &ParamStore, input: &Path, output: &Path) -> Result<usize> {
        let text = fs::read_to_string(input)
            .map_err(|e| Error::Data(format!("{}: {e}", input.display())))?;
        let vocab = self.train_layer.vocab();
        let wide = params.cast(DType::F32);
        let lines: Vec<&str> = text.lines().collect();
        let mut unknown = 0;
        let encoded: Vec<Vec<usize>> = lines
            .iter()
            .map(|l| {
                let (ids, u) = vocab.encode(l);
                unknown += u;
                ids
            })
            .collect();
        if unknown > 0 {
            warn!("{unknown} input tokens are not in the vocabulary");
        }
        let mut out = vec![String::new(); lines.len()];
        let todo: Vec<usize> = (0..lines.len())
            .filter(|&i| !encoded[i].is_empty())
            .collect();
        for chunk in todo.chunks(self.config.batch_size_per_gpu) {
            let sources: Vec<Vec<usize>> = chunk.iter().map(|&i| encoded[i].clone()).collect();
            let decoded = self
                .model
                .greedy_decode(&wide, &sources, self.config.max_decode_len)?;
            for (&i, d) in chunk.iter().zip(decoded) {
                out[i] = vocab.decode(&d);
            }
        }
        let mut w = BufWriter::new(File::create(output)?);
        for line in &out {
            writeln!(w, "{line}")?;
        }
        w.flush()?;
        Ok(out.len())
    }

    fn eval_rows(e: &EvalResult) -> Vec<MetricsRow> {
        let mut metrics = vec![
            ("token_accuracy", e.token_accuracy),
            ("sequence_accuracy", e.sequence_accuracy),
        ];
        if let Some(b) = e.bleu {
            metrics.push(("bleu", b));
        }
        if let Some(w) = e.wer {
            metrics.push(("wer", w));
        }
        metrics
            .into_iter()
            .map(|(name, value)| MetricsRow {
                step: e.step,
                epoch: 0,
                split: "eval".into(),
                loss: Some(e.loss),
                lr: None,
                loss_scale: None,
                grad_norm: None,
                skipped: None,
                tokens_per_sec: None,
                metric_name: name.into(),
                metric_value: Some(value),
            })
            .collect()
    }

    fn train_row(
        &self,
        group: &WorkerGroup,
        done: u64,
        reports: &[StepReport],
        secs: f64,
    ) -> MetricsRow {
        let r0 = reports[0];
        let skipped = r0.outcome == StepOutcome::Skipped;
        let tokens: usize = reports.iter().map(|r| r.tokens).sum();
        let correct: usize = reports.iter().map(|r| r.correct).sum();
        let loss = reports.iter().map(|r| widen(r.loss)).sum::<f64>() / reports.len() as f64;
        MetricsRow {
            step: done,
            epoch: group.streams()[0].epoch_at(done),
            split: "train".into(),
            loss: Some(loss),
            lr: (!skipped).then(|| widen(r0.lr)),
            loss_scale: Some(widen(r0.scale)),
            grad_norm: r0.grad_norm.map(widen),
            skipped: Some(skipped),
            tokens_per_sec: Some(tokens as f64 / secs.max(1e-9)),
            metric_name: "token_accuracy".into(),
            metric_value: Some(ratio(correct, tokens)),
        }
    }

    fn train(&self, with_eval: bool) -> Result<RunOutcome> {
        let c = &self.config;
        let mut group = self.build_group()?;
        let hash = c.hash();
        let mut start = 0;
        if let Some(dir) = &c.checkpoint_dir {
            if checkpoint::exists(dir) {
                let ck = checkpoint::load(dir)?;
                if ck.manifest.config_hash != hash {
                    warn!("resuming from a checkpoint written with a different config");
                }
                for r in group.replicas_mut() {
                    checkpoint::restore(&ck, r)?;
                }
                start = ck.manifest.step;
                info!("resuming at step {start}");
            }
        }

        let log_dir = self.log_dir().filter(|_| self.writes_artifacts());
        let metrics_file = log_dir.map(|d| d.join("metrics.csv"));
        let mut log = match &metrics_file {
            Some(p) => {
                fs::create_dir_all(p.parent().expect("joined path"))?;
                if start > 0 {
                    MetricsLog::append_to(p)?
                } else {
                    MetricsLog::with_file(p)?
                }
            }
            None => MetricsLog::new(),
        };
        let mut text_log = match log_dir {
            Some(d) if self.overrides.enable_logs => {
                let f = fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(d.join("train.log"))?;
                Some(BufWriter::new(f))
            }
            _ => None,
        };

        let mut outcome = RunOutcome {
            mode: if with_eval {
                RunMode::TrainEval
            } else {
                RunMode::Train
            },
            step: start,
            steps_run: 0,
            skipped_steps: 0,
            evals: Vec::new(),
            checkpoint: None,
            metrics_file: metrics_file.clone(),
            inferred: None,
        };
        let save_dir = c
            .checkpoint_dir
            .as_deref()
            .filter(|_| self.writes_artifacts());
        for step in start..c.max_steps {
            let t0 = Instant::now();
            let reports = group.step(step)?;
            let row = self.train_row(&group, step + 1, &reports, t0.elapsed().as_secs_f64());
            let done = step + 1;
            outcome.step = done;
            outcome.steps_run += 1;
            if row.skipped == Some(true) {
                outcome.skipped_steps += 1;
            }
            if let Some(w) = &mut text_log {
                writeln!(
                    w,
                    "step {done} loss {:.6} scale {} lr {} grad_norm {} skipped {} acc {:.4}",
                    row.loss.unwrap_or(f64::NAN),
                    row.loss_scale.unwrap_or(f64::NAN),
                    row.lr.map_or("-".into(), |x| x.to_string()),
                    row.grad_norm.map_or("-".into(), |x| x.to_string()),
                    row.skipped == Some(true),
                    row.metric_value.unwrap_or(0.0),
                )?;
                w.flush()?;
            }
            log.push(row)?;
            if let Some(dir) = save_dir {
                if c.save_checkpoint_steps > 0
                    && done % c.save_checkpoint_steps == 0
                    && done < c.max_steps
                {
                    checkpoint::save(dir, done, &hash, group.primary())?;
                }
            }
            let eval_now = with_eval
                && ((c.eval_every > 0 && done % c.eval_every == 0) || done == c.max_steps);
            if eval_now && self.writes_artifacts() {
                let e = self.evaluate(group.primary().vars(), done)?;
                info!(
                    "eval at step {done}: loss {:.4} token acc {:.4} sequence acc {:.4}",
                    e.loss, e.token_accuracy, e.sequence_accuracy
                );
                for r in Self::eval_rows(&e) {
                    log.push(r)?;
                }
                outcome.evals.push(e);
            }
        }
        if !group.replicas_identical() {
            return Err(Error::Contract("replicas diverged during training".into()));
        }
        if let Some(dir) = save_dir {
            outcome.checkpoint = Some(checkpoint::save(dir, outcome.step, &hash, group.primary())?);
        }
        info!(
            "trained to step {} ({} steps, {} skipped)",
            outcome.step, outcome.steps_run, outcome.skipped_steps
        );
        Ok(outcome)
    }

    pub fn run(&self, mode: RunMode) -> Result<RunOutcome> {
        match mode {
            RunMode::Train => self.train(false),
            RunMode::TrainEval => self.train(true),
            RunMode::Eval => {
                let (replica, step) = self.restored_replica()?;
                let e = self.evaluate(replica.vars(), step)?;
                let metrics_file = self
                    .log_dir()
                    .filter(|_| self.writes_artifacts())
                    .map(|d| d.join("eval_metrics.csv"));
                if let Some(p) = &metrics_file {
                    let mut log = MetricsLog::new();
                    for r in Self::eval_rows(&e) {
                        log.push(r)?;
                    }
                    log.emit(p)?;
                }
                Ok(RunOutcome {
                    mode,
                    step,
                    steps_run: 0,
                    skipped_steps: 0,
                    evals: vec![e],
                    checkpoint: None,
                    metrics_file,
                    inferred: None,
                })
            }
            RunMode::Infer => {
                let (input, output) =
                    match (&self.overrides.infer_input, &self.overrides.infer_output) {
                        (Some(i), Some(o)) => (i, o),
                        _ => {
                            return Err(Error::Config(
                                "infer mode needs --infer_input and --infer_output".into(),
                            ))
                        }
                    };
                let (replica, step) = self.restored_replica()?;
                let n = self.infer(replica.vars(), input, output)?;
                Ok(RunOutcome {
                    mode,
                    step,
                    steps_run: 0,
                    skipped_steps: 0,
                    evals: Vec::new(),
                    checkpoint: None,
                    metrics_file: None,
                    inferred: Some(n),
                })
            }
        }
    }
}

/// Builds a [`Runner`] for `config` and runs `mode`.
pub fn run(config: Config, mode: RunMode, overrides: Overrides) -> Result<RunOutcome> {
    Runner::new(config, overrides)?.run(mode)
}

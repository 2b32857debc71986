use std::sync::Arc;
use std::thread;
use std::time::Instant;

use serde::Serialize;

use super::collective::{allreduce_flag_or, ring_allreduce_wire, ReduceBucket};
use super::{GroupMode, InProcessTransport, Transport};
use crate::autodiff::GradientSet;
use crate::blocks::{Batch, BatchStream, Model};
use crate::error::{Error, Result};
use crate::mixed_precision::{
    check_finite_all, unscale_to_f32, LossScalePolicy, MixedPrecisionState, Precision,
    RegularizerRegistry, StepOutcome,
};
use crate::optim::{LrPolicy, Optimizer};
use crate::params::ParamStore;
use crate::tensor::DType;

/// Test hook run on a replica's scaled gradients right after backward, with
/// the replica's rank and the step index.
pub type GradHook = Arc<dyn Fn(usize, u64, &mut GradientSet) + Send + Sync>;

/// What one replica saw in one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepReport {
    pub outcome: StepOutcome,
    /// Loss on this replica's own batch.
    pub loss: f32,
    /// Loss scale used for the backward pass.
    pub scale: f32,
    pub lr: f32,
    /// Global norm of the averaged unscaled gradients; `None` when skipped.
    pub grad_norm: Option<f32>,
    pub tokens: usize,
    pub correct: usize,
}

/// One model copy with its own optimizer and mixed-precision state.
pub struct Replica {
    model: Model,
    precision: Precision,
    vars: ParamStore,
    mp: MixedPrecisionState,
    optimizer: Box<dyn Optimizer>,
    lr_policy: Arc<dyn LrPolicy>,
    wire: DType,
    hook: Option<GradHook>,
}

impl std::fmt::Debug for Replica {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Replica")
            .field("model", &self.model)
            .field("precision", &self.precision)
            .field("optimizer", &self.optimizer.kind())
            .field("lr_policy", &self.lr_policy.kind())
            .field("mp", &self.mp)
            .finish()
    }
}

/// Result of the local half of a step.
struct LocalPass {
    loss: f32,
    tokens: usize,
    correct: usize,
    grads: GradientSet,
}

fn local_pass(
    model: &Model,
    vars: &ParamStore,
    mp: &MixedPrecisionState,
    hook: Option<&GradHook>,
    rank: usize,
    step: u64,
    batch: &Batch,
) -> Result<LocalPass> {
    let pass = model.forward(vars, batch)?;
    let (correct, tokens) = model.token_accuracy(&pass, batch);
    let mut grads = mp.scaled_backward(&pass.tape, pass.loss)?;
    if let Some(h) = hook {
        h(rank, step, &mut grads);
    }
    Ok(LocalPass {
        loss: pass.loss_value(),
        tokens,
        correct,
        grads,
    })
}

impl Replica {
    /// Working variables are `init` rounded to the precision's dtype; the
    /// master copy widens them back exactly.
    pub fn new(
        model: Model,
        init: &ParamStore,
        precision: Precision,
        policy: Box<dyn LossScalePolicy>,
        regularizers: RegularizerRegistry,
        optimizer: Box<dyn Optimizer>,
        lr_policy: Arc<dyn LrPolicy>,
    ) -> Result<Self> {
        let vars = init.cast(precision.compute_dtype());
        let mp = MixedPrecisionState::init_master(&vars, policy, regularizers)?;
        Ok(Self {
            model,
            precision,
            vars,
            mp,
            optimizer,
            lr_policy,
            wire: DType::F32,
            hook: None,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn vars(&self) -> &ParamStore {
        &self.vars
    }

    pub fn mp(&self) -> &MixedPrecisionState {
        &self.mp
    }

    pub fn optimizer(&self) -> &dyn Optimizer {
        self.optimizer.as_ref()
    }

    /// Mutable access to all restorable state at once (checkpoint loading).
    pub fn state_mut(
        &mut self,
    ) -> (
        &mut ParamStore,
        &mut MixedPrecisionState,
        &mut dyn Optimizer,
    ) {
        (&mut self.vars, &mut self.mp, self.optimizer.as_mut())
    }

    pub fn set_grad_hook(&mut self, hook: Option<GradHook>) {
        self.hook = hook;
    }

    /// Payload precision for gradient allreduce (FP32 unless set).
    pub fn set_wire_dtype(&mut self, wire: DType) {
        self.wire = wire;
    }

    pub fn lr(&self) -> f32 {
        self.lr_policy.lr_at(self.optimizer.steps())
    }

    /// Full training step. With `comm`, the overflow decision and the
    /// gradient average are agreed across all ranks; without it (or with a
    /// world of one) this is plain single-worker training.
    pub fn train_step(
        &mut self,
        batch: &Batch,
        step: u64,
        mut comm: Option<&mut dyn Transport>,
    ) -> Result<StepReport> {
        let rank = comm.as_ref().map_or(0, |t| t.rank());
        let scale = self.mp.scale();
        let lr = self.lr();
        let local = local_pass(
            &self.model,
            &self.vars,
            &self.mp,
            self.hook.as_ref(),
            rank,
            step,
            batch,
        )?;
        let mut report = StepReport {
            outcome: StepOutcome::Skipped,
            loss: local.loss,
            scale,
            lr,
            grad_norm: None,
            tokens: local.tokens,
            correct: local.correct,
        };
        let local_overflow = !check_finite_all(&local.grads);
        let overflow = match comm.as_deref_mut() {
            Some(t) => allreduce_flag_or(t, local_overflow)?,
            None => local_overflow,
        };
        if overflow {
            self.mp.skip();
            return Ok(report);
        }
        let mut grads = unscale_to_f32(&local.grads, scale)?;
        if let Some(t) = comm {
            let k = t.world_size();
            if k > 1 {
                let bucket = ReduceBucket::from_grads(&grads);
                let mut flat = bucket.flatten(&grads)?;
                ring_allreduce_wire(t, step as u32, &mut flat, self.wire)?;
                let kf = k as f32;
                flat.iter_mut().for_each(|x| *x /= kf);
                grads = bucket.unflatten(&flat)?;
            }
        }
        report.grad_norm = Some(grads.l2_norm());
        self.mp
            .apply(&mut self.vars, self.optimizer.as_mut(), lr, grads)?;
        report.outcome = StepOutcome::Applied;
        Ok(report)
    }
}

/// Single-process data parallelism: K forward/backward passes over one
/// shared variable store, gradients averaged in rank order, one update.
pub struct Tower {
    replica: Replica,
    k: usize,
}

impl Tower {
    pub fn new(replica: Replica, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("tower needs at least one replica".into()));
        }
        Ok(Self { replica, k })
    }

    pub fn replica(&self) -> &Replica {
        &self.replica
    }

    pub fn replica_mut(&mut self) -> &mut Replica {
        &mut self.replica
    }

    pub fn step(&mut self, batches: &[Batch], step: u64) -> Result<Vec<StepReport>> {
        if batches.len() != self.k {
            return Err(Error::InvalidArgument(format!(
                "tower of {} got {} batches",
                self.k,
                batches.len()
            )));
        }
        let r = &mut self.replica;
        let scale = r.mp.scale();
        let lr = r.lr();
        let locals: Vec<Result<LocalPass>> = thread::scope(|s| {
            let handles: Vec<_> = batches
                .iter()
                .enumerate()
                .map(|(rank, b)| {
                    let (model, vars, mp, hook) = (&r.model, &r.vars, &r.mp, r.hook.as_ref());
                    s.spawn(move || local_pass(model, vars, mp, hook, rank, step, b))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("replica thread panicked"))
                .collect()
        });
        let locals = locals.into_iter().collect::<Result<Vec<_>>>()?;
        let mut reports: Vec<StepReport> = locals
            .iter()
            .map(|l| StepReport {
                outcome: StepOutcome::Skipped,
                loss: l.loss,
                scale,
                lr,
                grad_norm: None,
                tokens: l.tokens,
                correct: l.correct,
            })
            .collect();
        if !locals.iter().all(|l| check_finite_all(&l.grads)) {
            r.mp.skip();
            return Ok(reports);
        }
        let bucket = ReduceBucket::from_grads(&locals[0].grads);
        let mut sum = bucket.flatten(&unscale_to_f32(&locals[0].grads, scale)?)?;
        for l in &locals[1..] {
            let g = bucket.flatten(&unscale_to_f32(&l.grads, scale)?)?;
            for (acc, x) in sum.iter_mut().zip(g) {
                *acc += x;
            }
        }
        if self.k > 1 {
            let kf = self.k as f32;
            sum.iter_mut().for_each(|x| *x /= kf);
        }
        let grads = bucket.unflatten(&sum)?;
        let norm = grads.l2_norm();
        r.mp.apply(&mut r.vars, r.optimizer.as_mut(), lr, grads)?;
        for rep in &mut reports {
            rep.outcome = StepOutcome::Applied;
            rep.grad_norm = Some(norm);
        }
        Ok(reports)
    }
}

enum Members {
    Allreduce {
        replicas: Vec<Replica>,
        transports: Vec<Box<dyn Transport>>,
    },
    Tower(Tower),
}

/// The replicas and data shards this process drives. In allreduce mode
/// each local replica steps on its own thread with its own transport
/// endpoint; remote ranks (TCP) are driven by their own processes.
pub struct WorkerGroup {
    members: Members,
    streams: Vec<BatchStream>,
}

impl std::fmt::Debug for WorkerGroup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WorkerGroup")
            .field("mode", &self.mode())
            .field("local_workers", &self.streams.len())
            .finish()
    }
}

impl WorkerGroup {
    /// `K` in-process replicas wired with channel transports, each reading
    /// shard `rank` of `stream`.
    pub fn in_process(replicas: Vec<Replica>, stream: &BatchStream) -> Result<Self> {
        let k = replicas.len();
        let transports = InProcessTransport::group(k)
            .into_iter()
            .map(|t| Box::new(t) as Box<dyn Transport>)
            .collect();
        let streams = (0..k).map(|r| stream.shard(r, k)).collect::<Result<_>>()?;
        Self::allreduce(replicas, transports, streams)
    }

    /// Replicas paired with transport endpoints and shards, in local order.
    pub fn allreduce(
        replicas: Vec<Replica>,
        transports: Vec<Box<dyn Transport>>,
        streams: Vec<BatchStream>,
    ) -> Result<Self> {
        if replicas.is_empty()
            || replicas.len() != transports.len()
            || replicas.len() != streams.len()
        {
            return Err(Error::Config(format!(
                "{} replicas, {} transports, {} shards",
                replicas.len(),
                transports.len(),
                streams.len()
            )));
        }
        Ok(Self {
            members: Members::Allreduce {
                replicas,
                transports,
            },
            streams,
        })
    }

    /// Tower mode over `k` shards of `stream`.
    pub fn tower(replica: Replica, k: usize, stream: &BatchStream) -> Result<Self> {
        let streams = (0..k).map(|r| stream.shard(r, k)).collect::<Result<_>>()?;
        Ok(Self {
            members: Members::Tower(Tower::new(replica, k)?),
            streams,
        })
    }

    pub fn mode(&self) -> GroupMode {
        match self.members {
            Members::Allreduce { .. } => GroupMode::Allreduce,
            Members::Tower(_) => GroupMode::Tower,
        }
    }

    /// Number of shards driven from this process.
    pub fn local_workers(&self) -> usize {
        self.streams.len()
    }

    pub fn streams(&self) -> &[BatchStream] {
        &self.streams
    }

    pub fn replicas(&self) -> Vec<&Replica> {
        match &self.members {
            Members::Allreduce { replicas, .. } => replicas.iter().collect(),
            Members::Tower(t) => vec![t.replica()],
        }
    }

    pub fn replicas_mut(&mut self) -> Vec<&mut Replica> {
        match &mut self.members {
            Members::Allreduce { replicas, .. } => replicas.iter_mut().collect(),
            Members::Tower(t) => vec![t.replica_mut()],
        }
    }

    /// The first local replica (rank 0 in-process, the shared store in tower mode).
    pub fn primary(&self) -> &Replica {
        self.replicas()[0]
    }

    /// One step for every local shard. Reports are in local rank order.
    pub fn step(&mut self, step: u64) -> Result<Vec<StepReport>> {
        let batches = self
            .streams
            .iter()
            .map(|s| s.batch(step))
            .collect::<Result<Vec<_>>>()?;
        match &mut self.members {
            Members::Tower(t) => t.step(&batches, step),
            Members::Allreduce {
                replicas,
                transports,
            } if replicas.len() == 1 => {
                let t = transports[0].as_mut();
                Ok(vec![replicas[0].train_step(&batches[0], step, Some(t))?])
            }
            Members::Allreduce {
                replicas,
                transports,
            } => {
                let results: Vec<Result<StepReport>> = thread::scope(|s| {
                    let handles: Vec<_> = replicas
                        .iter_mut()
                        .zip(transports.iter_mut())
                        .zip(&batches)
                        .map(|((r, t), b)| s.spawn(move || r.train_step(b, step, Some(t.as_mut()))))
                        .collect();
                    handles
                        .into_iter()
                        .map(|h| h.join().expect("worker thread panicked"))
                        .collect()
                });
                let reports = results.into_iter().collect::<Result<Vec<_>>>()?;
                if reports.windows(2).any(|w| w[0].outcome != w[1].outcome) {
                    return Err(Error::Contract(
                        "workers disagreed on whether to apply a step".into(),
                    ));
                }
                Ok(reports)
            }
        }
    }

    /// Whether every local replica holds bit-identical variables.
    pub fn replicas_identical(&self) -> bool {
        let replicas = self.replicas();
        let first = replicas[0].vars().digest();
        replicas.iter().all(|r| r.vars().digest() == first)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThroughputReport {
    pub workers: usize,
    /// Group steps per second (each consumes one batch per worker).
    pub group_steps_per_sec: f64,
    /// Worker-batches per second.
    pub worker_steps_per_sec: f64,
    /// Worker-steps/sec relative to the one-worker group.
    pub speedup: f64,
    /// `speedup / workers`.
    pub scaling_factor: f64,
}

/// Times `steps` group steps (after `warmup` untimed ones) for each worker
/// count. The first entry of `ks` is the baseline and should be 1.
pub fn throughput_probe<F>(
    ks: &[usize],
    warmup: u64,
    steps: u64,
    mut build: F,
) -> Result<Vec<ThroughputReport>>
where
    F: FnMut(usize) -> Result<WorkerGroup>,
{
    let mut out: Vec<ThroughputReport> = Vec::new();
    for &k in ks {
        let mut group = build(k)?;
        for s in 0..warmup {
            group.step(s)?;
        }
        let start = Instant::now();
        for s in warmup..warmup + steps {
            group.step(s)?;
        }
        let secs = start.elapsed().as_secs_f64().max(1e-9);
        let group_sps = steps as f64 / secs;
        let worker_sps = group_sps * k as f64;
        let base = out.first().map_or(worker_sps / k as f64, |b| {
            b.worker_steps_per_sec / b.workers as f64
        });
        let speedup = worker_sps / base;
        out.push(ThroughputReport {
            workers: k,
            group_steps_per_sec: group_sps,
            worker_steps_per_sec: worker_sps,
            speedup,
            scaling_factor: speedup / k as f64,
        });
    }
    Ok(out)
}

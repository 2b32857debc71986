//! Inner optimizers and learning-rate policies. Every optimizer works on
//! FP32 master values and FP32 gradients only.

use std::collections::BTreeMap;

use serde::Deserialize;
use serde_json::Value;

use crate::autodiff::GradientSet;
use crate::blocks::parse_params;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::registry::Registry;
use crate::tensor::{DType, Tensor};

pub trait Optimizer: Send {
    fn kind(&self) -> &'static str;

    /// Number of applied steps so far.
    fn steps(&self) -> u64;

    /// FP32 slot tensors kept per variable (0 for SGD, 1 for momentum, 2 for Adam).
    fn slots_per_variable(&self) -> usize;

    /// Updates every variable in `grads` in place. `master` and `grads` must
    /// both be FP32 and finite.
    fn step(&mut self, master: &mut ParamStore, grads: &GradientSet, lr: f32) -> Result<()>;

    /// Slot tensors keyed `<slot>/<variable>`, for checkpoints.
    fn slots(&self) -> BTreeMap<String, Tensor>;

    fn restore(&mut self, steps: u64, slots: BTreeMap<String, Tensor>) -> Result<()>;
}

pub type OptimizerFactory = fn(&Value) -> Result<Box<dyn Optimizer>>;

pub fn optimizer_registry() -> Registry<OptimizerFactory> {
    Registry::new("optimizer")
        .with("SGD", sgd_factory as OptimizerFactory)
        .with("Momentum", momentum_factory as OptimizerFactory)
        .with("Adam", adam_factory as OptimizerFactory)
}

/// Checks the step preconditions and returns each gradient's FP32 values
/// with the matching master values.
fn prepare<'a>(
    master: &ParamStore,
    grads: &'a GradientSet,
) -> Result<Vec<(&'a str, Vec<f32>, &'a [f32])>> {
    let mut out = Vec::with_capacity(grads.len());
    for (name, g) in grads.iter() {
        let gv = g.as_f32().ok_or_else(|| {
            Error::Contract(format!("optimizer got an F16 gradient for '{name}'"))
        })?;
        if !g.all_finite() {
            return Err(Error::Contract(format!(
                "optimizer got a non-finite gradient for '{name}'"
            )));
        }
        let w = master
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no master value for '{name}'")))?;
        if w.dtype() != DType::F32 {
            return Err(Error::Contract(format!(
                "master value '{name}' is not FP32"
            )));
        }
        if w.shape() != g.shape() {
            return Err(Error::shape(format!(
                "gradient {:?} for '{name}' of shape {:?}",
                g.shape(),
                w.shape()
            )));
        }
        out.push((name, w.to_f32_vec(), gv));
    }
    Ok(out)
}

fn store(master: &mut ParamStore, name: &str, values: Vec<f32>) -> Result<()> {
    let shape = master
        .get(name)
        .expect("checked in prepare")
        .shape()
        .to_vec();
    master.set(name, Tensor::from_f32(shape, values)?)
}

fn slot<'a>(slots: &'a mut BTreeMap<String, Vec<f32>>, name: &str, n: usize) -> &'a mut Vec<f32> {
    slots
        .entry(name.to_string())
        .or_insert_with(|| vec![0.0; n])
}

fn export(prefix: &str, slots: &BTreeMap<String, Vec<f32>>, out: &mut BTreeMap<String, Tensor>) {
    for (name, v) in slots {
        let t = Tensor::from_f32(vec![v.len()], v.clone()).expect("flat shape");
        out.insert(format!("{prefix}/{name}"), t);
    }
}

fn import(
    prefix: &str,
    slots: &mut BTreeMap<String, Tensor>,
    into: &mut BTreeMap<String, Vec<f32>>,
) -> Result<()> {
    into.clear();
    let keys: Vec<String> = slots
        .keys()
        .filter(|k| k.starts_with(&format!("{prefix}/")))
        .cloned()
        .collect();
    for k in keys {
        let t = slots.remove(&k).expect("key listed above");
        let v = t
            .as_f32()
            .ok_or_else(|| Error::Checkpoint(format!("optimizer slot '{k}' is not FP32")))?;
        into.insert(k[prefix.len() + 1..].to_string(), v.to_vec());
    }
    Ok(())
}

fn no_leftovers(kind: &str, slots: &BTreeMap<String, Tensor>) -> Result<()> {
    match slots.keys().next() {
        Some(k) => Err(Error::Checkpoint(format!("unexpected {kind} slot '{k}'"))),
        None => Ok(()),
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct NoParams {}

/// `w ← w − lr·g`.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    t: u64,
}

impl Optimizer for Sgd {
    fn kind(&self) -> &'static str {
        "SGD"
    }

    fn steps(&self) -> u64 {
        self.t
    }

    fn slots_per_variable(&self) -> usize {
        0
    }

    fn step(&mut self, master: &mut ParamStore, grads: &GradientSet, lr: f32) -> Result<()> {
        for (name, mut w, g) in prepare(master, grads)? {
            for (w, &g) in w.iter_mut().zip(g) {
                *w -= lr * g;
            }
            store(master, name, w)?;
        }
        self.t += 1;
        Ok(())
    }

    fn slots(&self) -> BTreeMap<String, Tensor> {
        BTreeMap::new()
    }

    fn restore(&mut self, steps: u64, slots: BTreeMap<String, Tensor>) -> Result<()> {
        no_leftovers("SGD", &slots)?;
        self.t = steps;
        Ok(())
    }
}

fn sgd_factory(params: &Value) -> Result<Box<dyn Optimizer>> {
    let _: NoParams = parse_params("SGD", params)?;
    Ok(Box::new(Sgd::default()))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MomentumParams {
    #[serde(default = "default_momentum")]
    momentum: f32,
}

fn default_momentum() -> f32 {
    0.9
}

/// `m ← μ·m + g; w ← w − lr·m`.
#[derive(Debug, Clone)]
pub struct Momentum {
    mu: f32,
    t: u64,
    m: BTreeMap<String, Vec<f32>>,
}

impl Momentum {
    pub fn new(mu: f32) -> Result<Self> {
        if !(0.0..1.0).contains(&mu) {
            return Err(Error::Config(format!("momentum {mu} outside [0, 1)")));
        }
        Ok(Self {
            mu,
            t: 0,
            m: BTreeMap::new(),
        })
    }
}

impl Optimizer for Momentum {
    fn kind(&self) -> &'static str {
        "Momentum"
    }

    fn steps(&self) -> u64 {
        self.t
    }

    fn slots_per_variable(&self) -> usize {
        1
    }

    fn step(&mut self, master: &mut ParamStore, grads: &GradientSet, lr: f32) -> Result<()> {
        for (name, mut w, g) in prepare(master, grads)? {
            let m = slot(&mut self.m, name, w.len());
            for ((w, m), &g) in w.iter_mut().zip(m.iter_mut()).zip(g) {
                *m = self.mu * *m + g;
                *w -= lr * *m;
            }
            store(master, name, w)?;
        }
        self.t += 1;
        Ok(())
    }

    fn slots(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        export("m", &self.m, &mut out);
        out
    }

    fn restore(&mut self, steps: u64, mut slots: BTreeMap<String, Tensor>) -> Result<()> {
        import("m", &mut slots, &mut self.m)?;
        no_leftovers("Momentum", &slots)?;
        self.t = steps;
        Ok(())
    }
}

fn momentum_factory(params: &Value) -> Result<Box<dyn Optimizer>> {
    let p: MomentumParams = parse_params("Momentum", params)?;
    Ok(Box::new(Momentum::new(p.momentum)?))
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamParams {
    #[serde(default = "default_beta1")]
    pub beta1: f32,
    #[serde(default = "default_beta2")]
    pub beta2: f32,
    #[serde(default = "default_epsilon")]
    pub epsilon: f32,
}

fn default_beta1() -> f32 {
    0.9
}

fn default_beta2() -> f32 {
    0.999
}

fn default_epsilon() -> f32 {
    1e-8
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
        }
    }
}

/// Adam with bias correction; `t` advances once per applied step.
#[derive(Debug, Clone)]
pub struct Adam {
    p: AdamParams,
    t: u64,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl Adam {
    pub fn new(p: AdamParams) -> Result<Self> {
        let ok = (0.0..1.0).contains(&p.beta1) && (0.0..1.0).contains(&p.beta2) && p.epsilon > 0.0;
        if !ok {
            return Err(Error::Config(format!(
                "Adam needs beta1, beta2 in [0, 1) and epsilon > 0, got {p:?}"
            )));
        }
        Ok(Self {
            p,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        })
    }
}

impl Optimizer for Adam {
    fn kind(&self) -> &'static str {
        "Adam"
    }

    fn steps(&self) -> u64 {
        self.t
    }

    fn slots_per_variable(&self) -> usize {
        2
    }

    fn step(&mut self, master: &mut ParamStore, grads: &GradientSet, lr: f32) -> Result<()> {
        let prepared = prepare(master, grads)?;
        let t = self.t + 1;
        let AdamParams {
            beta1,
            beta2,
            epsilon,
        } = self.p;
        let c1 = 1.0 - beta1.powi(t.min(i32::MAX as u64) as i32);
        let c2 = 1.0 - beta2.powi(t.min(i32::MAX as u64) as i32);
        for (name, mut w, g) in prepared {
            let m = slot(&mut self.m, name, w.len());
            for (m, &g) in m.iter_mut().zip(g) {
                *m = beta1 * *m + (1.0 - beta1) * g;
            }
            let v = slot(&mut self.v, name, w.len());
            for (v, &g) in v.iter_mut().zip(g) {
                *v = beta2 * *v + (1.0 - beta2) * g * g;
            }
            let (m, v) = (&self.m[name], &self.v[name]);
            for i in 0..w.len() {
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                w[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
            store(master, name, w)?;
        }
        self.t = t;
        Ok(())
    }

    fn slots(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        export("m", &self.m, &mut out);
        export("v", &self.v, &mut out);
        out
    }

    fn restore(&mut self, steps: u64, mut slots: BTreeMap<String, Tensor>) -> Result<()> {
        import("m", &mut slots, &mut self.m)?;
        import("v", &mut slots, &mut self.v)?;
        no_leftovers("Adam", &slots)?;
        self.t = steps;
        Ok(())
    }
}

fn adam_factory(params: &Value) -> Result<Box<dyn Optimizer>> {
    let p: AdamParams = parse_params("Adam", params)?;
    Ok(Box::new(Adam::new(p)?))
}

/// Learning rate as a function of the applied-step count.
pub trait LrPolicy: Send + Sync {
    fn kind(&self) -> &'static str;
    fn lr_at(&self, t: u64) -> f32;
}

pub type LrPolicyFactory = fn(&Value) -> Result<Box<dyn LrPolicy>>;

pub fn lr_policy_registry() -> Registry<LrPolicyFactory> {
    Registry::new("lr policy")
        .with("constant", constant_factory as LrPolicyFactory)
        .with("exp_decay", exp_decay_factory as LrPolicyFactory)
}

fn check_lr(lr: f32) -> Result<()> {
    if lr > 0.0 && lr.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "learning_rate must be positive, got {lr}"
        )))
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstantLr {
    pub learning_rate: f32,
}

impl LrPolicy for ConstantLr {
    fn kind(&self) -> &'static str {
        "constant"
    }

    fn lr_at(&self, _t: u64) -> f32 {
        self.learning_rate
    }
}

fn constant_factory(params: &Value) -> Result<Box<dyn LrPolicy>> {
    let p: ConstantLr = parse_params("constant lr policy", params)?;
    check_lr(p.learning_rate)?;
    Ok(Box::new(p))
}

/// `learning_rate · decay_rate^(t / decay_steps)`, exponent floored when
/// `staircase` is set.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpDecay {
    pub learning_rate: f32,
    pub decay_rate: f32,
    pub decay_steps: u64,
    #[serde(default)]
    pub staircase: bool,
}

impl ExpDecay {
    pub fn new(
        learning_rate: f32,
        decay_rate: f32,
        decay_steps: u64,
        staircase: bool,
    ) -> Result<Self> {
        check_lr(learning_rate)?;
        if !(decay_rate > 0.0 && decay_rate <= 1.0) {
            return Err(Error::Config(format!(
                "decay_rate {decay_rate} outside (0, 1]"
            )));
        }
        if decay_steps == 0 {
            return Err(Error::Config("decay_steps must be positive".into()));
        }
        Ok(Self {
            learning_rate,
            decay_rate,
            decay_steps,
            staircase,
        })
    }
}

impl LrPolicy for ExpDecay {
    fn kind(&self) -> &'static str {
        "exp_decay"
    }

    fn lr_at(&self, t: u64) -> f32 {
        let mut e = t as f64 / self.decay_steps as f64;
        if self.staircase {
            e = e.floor();
        }
        (self.learning_rate as f64 * (self.decay_rate as f64).powf(e)) as f32
    }
}

fn exp_decay_factory(params: &Value) -> Result<Box<dyn LrPolicy>> {
    let p: ExpDecay = parse_params("exp_decay lr policy", params)?;
    Ok(Box::new(ExpDecay::new(
        p.learning_rate,
        p.decay_rate,
        p.decay_steps,
        p.staircase,
    )?))
}

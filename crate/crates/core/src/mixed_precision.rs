//! FP32 master weights, loss scaling and FP32 regularization around an
//! inner optimizer.
//!
//! Per step: backward seeded with the loss scale, a finiteness check, then
//! either a skip (scale backs off, nothing else changes) or unscale to FP32,
//! add regularizer gradients from the FP32 master, let the inner optimizer
//! update the master, and round the master back into the working variables.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autodiff::{GradientSet, Tape, Var};
use crate::blocks::parse_params;
use crate::error::{Error, Result};
use crate::optim::Optimizer;
use crate::params::ParamStore;
use crate::registry::Registry;
use crate::tensor::{DType, Tensor};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    Float32,
    Mixed,
}

impl Precision {
    /// Storage type of the working variables, gradients and activations.
    pub fn compute_dtype(self) -> DType {
        match self {
            Precision::Float32 => DType::F32,
            Precision::Mixed => DType::F16,
        }
    }
}

/// Loss-scale policy. Notified once per step, after cross-worker agreement
/// on whether the step overflowed.
pub trait LossScalePolicy: Send + Sync {
    fn kind(&self) -> &'static str;
    fn scale(&self) -> f32;
    /// The step had a non-finite gradient and was skipped.
    fn on_overflow(&mut self);
    /// The step was applied. `max_abs` is the largest unscaled gradient
    /// magnitude.
    fn on_good_step(&mut self, max_abs: f32);
    fn state(&self) -> Value;
    fn restore(&mut self, state: &Value) -> Result<()>;
}

pub type LossScaleFactory = fn(&Value) -> Result<Box<dyn LossScalePolicy>>;

pub fn loss_scale_registry() -> Registry<LossScaleFactory> {
    Registry::new("loss scaling policy")
        .with("Static", static_factory as LossScaleFactory)
        .with("Backoff", backoff_factory as LossScaleFactory)
        .with("LogMax", logmax_factory as LossScaleFactory)
}

fn is_power_of_two(x: f32) -> bool {
    x > 0.0 && x.is_finite() && x.log2().fract() == 0.0
}

fn restore_from<T: serde::de::DeserializeOwned>(kind: &str, state: &Value) -> Result<T> {
    serde_json::from_value(state.clone())
        .map_err(|e| Error::Checkpoint(format!("{kind} loss-scale state: {e}")))
}

/// A fixed scale.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StaticScale {
    pub scale: f32,
}

impl StaticScale {
    pub fn new(scale: f32) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Config(format!(
                "loss scale must be positive, got {scale}"
            )));
        }
        Ok(Self { scale })
    }
}

impl LossScalePolicy for StaticScale {
    fn kind(&self) -> &'static str {
        "Static"
    }

    fn scale(&self) -> f32 {
        self.scale
    }

    fn on_overflow(&mut self) {}

    fn on_good_step(&mut self, _max_abs: f32) {}

    fn state(&self) -> Value {
        serde_json::to_value(self).expect("plain struct")
    }

    fn restore(&mut self, state: &Value) -> Result<()> {
        *self = restore_from("Static", state)?;
        Ok(())
    }
}

fn static_factory(params: &Value) -> Result<Box<dyn LossScalePolicy>> {
    let p: StaticScale = parse_params("Static loss scaling", params)?;
    Ok(Box::new(StaticScale::new(p.scale)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackoffParams {
    #[serde(default = "default_init_scale")]
    pub init_scale: f32,
    #[serde(default = "two")]
    pub backoff_factor: f32,
    #[serde(default = "two")]
    pub growth_factor: f32,
    #[serde(default = "default_growth_interval")]
    pub growth_interval: u64,
    #[serde(default = "one")]
    pub scale_min: f32,
    #[serde(default = "default_scale_max")]
    pub scale_max: f32,
}

fn default_init_scale() -> f32 {
    32768.0
}

fn two() -> f32 {
    2.0
}

fn one() -> f32 {
    1.0
}

fn default_growth_interval() -> u64 {
    200
}

fn default_scale_max() -> f32 {
    16_777_216.0
}

impl Default for BackoffParams {
    fn default() -> Self {
        Self {
            init_scale: default_init_scale(),
            backoff_factor: two(),
            growth_factor: two(),
            growth_interval: default_growth_interval(),
            scale_min: one(),
            scale_max: default_scale_max(),
        }
    }
}

fn check_bounds(min: f32, max: f32) -> Result<()> {
    if !(is_power_of_two(min) && is_power_of_two(max) && min <= max) {
        return Err(Error::Config(format!(
            "scale_min {min} and scale_max {max} must be powers of two with min <= max"
        )));
    }
    Ok(())
}

/// Halve on overflow, double after `growth_interval` consecutive good steps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Backoff {
    params: BackoffParams,
    scale: f32,
    good_steps: u64,
}

impl Backoff {
    pub fn new(params: BackoffParams) -> Result<Self> {
        check_bounds(params.scale_min, params.scale_max)?;
        let factors_ok = is_power_of_two(params.backoff_factor)
            && is_power_of_two(params.growth_factor)
            && params.backoff_factor > 1.0
            && params.growth_factor > 1.0;
        if !is_power_of_two(params.init_scale) || !factors_ok || params.growth_interval == 0 {
            return Err(Error::Config(format!(
                "Backoff needs power-of-two scale and factors > 1 and a positive growth_interval, got {params:?}"
            )));
        }
        Ok(Self {
            scale: params.init_scale.clamp(params.scale_min, params.scale_max),
            params,
            good_steps: 0,
        })
    }

    pub fn good_steps(&self) -> u64 {
        self.good_steps
    }
}

impl LossScalePolicy for Backoff {
    fn kind(&self) -> &'static str {
        "Backoff"
    }

    fn scale(&self) -> f32 {
        self.scale
    }

    fn on_overflow(&mut self) {
        self.scale = (self.scale / self.params.backoff_factor).max(self.params.scale_min);
        self.good_steps = 0;
    }

    fn on_good_step(&mut self, _max_abs: f32) {
        self.good_steps += 1;
        if self.good_steps == self.params.growth_interval {
            self.scale = (self.scale * self.params.growth_factor).min(self.params.scale_max);
            self.good_steps = 0;
        }
    }

    fn state(&self) -> Value {
        serde_json::to_value(self).expect("plain struct")
    }

    fn restore(&mut self, state: &Value) -> Result<()> {
        *self = restore_from("Backoff", state)?;
        Ok(())
    }
}

fn backoff_factory(params: &Value) -> Result<Box<dyn LossScalePolicy>> {
    let p: BackoffParams = parse_params("Backoff loss scaling", params)?;
    Ok(Box::new(Backoff::new(p)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogMaxParams {
    #[serde(default = "default_init_scale")]
    pub init_scale: f32,
    #[serde(default = "default_decay")]
    pub decay: f64,
    #[serde(default = "default_margin")]
    pub margin: i32,
    #[serde(default = "one")]
    pub scale_min: f32,
    #[serde(default = "default_scale_max")]
    pub scale_max: f32,
}

fn default_decay() -> f64 {
    0.99
}

fn default_margin() -> i32 {
    2
}

impl Default for LogMaxParams {
    fn default() -> Self {
        Self {
            init_scale: default_init_scale(),
            decay: default_decay(),
            margin: default_margin(),
            scale_min: one(),
            scale_max: default_scale_max(),
        }
    }
}

/// Tracks an exponential moving mean and variance of `log2(max |g|)` and
/// picks the scale that leaves `margin` binades of headroom below the F16
/// maximum exponent (15) for `mean + 3·stddev`:
///
/// `scale = 2^clamp(15 − ceil(μ + 3σ) − margin − backoffs)`
///
/// `backoffs` counts overflows seen so far; each one halves the scale on the
/// spot and keeps the target one binade lower afterwards.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogMax {
    params: LogMaxParams,
    scale: f32,
    mean: f64,
    var: f64,
    observed: bool,
    backoffs: i32,
}

impl LogMax {
    pub fn new(params: LogMaxParams) -> Result<Self> {
        check_bounds(params.scale_min, params.scale_max)?;
        if !is_power_of_two(params.init_scale) || !(params.decay > 0.0 && params.decay < 1.0) {
            return Err(Error::Config(format!(
                "LogMax needs a power-of-two init_scale and decay in (0, 1), got {params:?}"
            )));
        }
        Ok(Self {
            scale: params.init_scale.clamp(params.scale_min, params.scale_max),
            params,
            mean: 0.0,
            var: 0.0,
            observed: false,
            backoffs: 0,
        })
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn stddev(&self) -> f64 {
        self.var.sqrt()
    }

    fn target(&self) -> f32 {
        let lo = self.params.scale_min.log2() as i64;
        let hi = self.params.scale_max.log2() as i64;
        let headroom = (self.mean + 3.0 * self.stddev()).ceil() as i64;
        let e = 15 - headroom - self.params.margin as i64 - self.backoffs as i64;
        2f32.powi(e.clamp(lo, hi) as i32)
    }
}

impl LossScalePolicy for LogMax {
    fn kind(&self) -> &'static str {
        "LogMax"
    }

    fn scale(&self) -> f32 {
        self.scale
    }

    fn on_overflow(&mut self) {
        self.backoffs += 1;
        self.scale = (self.scale / 2.0).max(self.params.scale_min);
    }

    fn on_good_step(&mut self, max_abs: f32) {
        // All-zero gradients say nothing about magnitude.
        if !(max_abs > 0.0 && max_abs.is_finite()) {
            return;
        }
        let x = (max_abs as f64).log2();
        if self.observed {
            let d = self.params.decay;
            let delta = x - self.mean;
            self.mean += (1.0 - d) * delta;
            self.var = d * (self.var + (1.0 - d) * delta * delta);
        } else {
            self.mean = x;
            self.var = 0.0;
            self.observed = true;
        }
        self.scale = self.target();
    }

    fn state(&self) -> Value {
        serde_json::to_value(self).expect("plain struct")
    }

    fn restore(&mut self, state: &Value) -> Result<()> {
        *self = restore_from("LogMax", state)?;
        Ok(())
    }
}

fn logmax_factory(params: &Value) -> Result<Box<dyn LossScalePolicy>> {
    let p: LogMaxParams = parse_params("LogMax loss scaling", params)?;
    Ok(Box::new(LogMax::new(p)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerKind {
    /// Adds `λ·w` to the gradient (the gradient of `λ/2·‖w‖²`).
    #[serde(alias = "l2")]
    L2WeightDecay,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegularizerEntry {
    pub variable: String,
    pub kind: RegularizerKind,
    pub coefficient: f32,
}

/// Regularized variables. Their terms are never part of the forward loss;
/// the matching gradients are added in FP32 from the master copy.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RegularizerRegistry {
    entries: Vec<RegularizerEntry>,
}

impl RegularizerRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        variable: &str,
        kind: RegularizerKind,
        coefficient: f32,
    ) -> Result<()> {
        if !(coefficient > 0.0 && coefficient.is_finite()) {
            return Err(Error::Config(format!(
                "regularizer coefficient for '{variable}' must be positive, got {coefficient}"
            )));
        }
        if self.entries.iter().any(|e| e.variable == variable) {
            return Err(Error::Config(format!(
                "variable '{variable}' is regularized twice"
            )));
        }
        self.entries.push(RegularizerEntry {
            variable: variable.to_string(),
            kind,
            coefficient,
        });
        Ok(())
    }

    pub fn entries(&self) -> &[RegularizerEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum StepOutcome {
    Applied,
    Skipped,
}

/// Per-replica mixed-precision bookkeeping.
pub struct MixedPrecisionState {
    master: ParamStore,
    policy: Box<dyn LossScalePolicy>,
    regularizers: RegularizerRegistry,
}

impl std::fmt::Debug for MixedPrecisionState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MixedPrecisionState")
            .field("master", &self.master.names().collect::<Vec<_>>())
            .field("policy", &self.policy.kind())
            .field("scale", &self.policy.scale())
            .field("regularizers", &self.regularizers)
            .finish()
    }
}

impl MixedPrecisionState {
    /// FP32 master copies (exact widenings) of every trainable variable.
    pub fn init_master(
        variables: &ParamStore,
        policy: Box<dyn LossScalePolicy>,
        regularizers: RegularizerRegistry,
    ) -> Result<Self> {
        let mut master = ParamStore::new();
        for (name, value) in variables.trainable() {
            master.insert(name, value.cast(DType::F32), true)?;
        }
        if let Some(e) = regularizers
            .entries()
            .iter()
            .find(|e| master.get(&e.variable).is_none())
        {
            return Err(Error::Config(format!(
                "regularizer names unknown or frozen variable '{}'",
                e.variable
            )));
        }
        Ok(Self {
            master,
            policy,
            regularizers,
        })
    }

    pub fn master(&self) -> &ParamStore {
        &self.master
    }

    /// Replaces the master copy (checkpoint restore); names and shapes must match.
    pub fn set_master(&mut self, master: ParamStore) -> Result<()> {
        for (name, value) in master.iter() {
            if value.dtype() != DType::F32 {
                return Err(Error::Checkpoint(format!(
                    "master value '{name}' is not FP32"
                )));
            }
            self.master.set(name, value.clone())?;
        }
        Ok(())
    }

    pub fn policy(&self) -> &dyn LossScalePolicy {
        self.policy.as_ref()
    }

    pub fn policy_mut(&mut self) -> &mut dyn LossScalePolicy {
        self.policy.as_mut()
    }

    pub fn regularizers(&self) -> &RegularizerRegistry {
        &self.regularizers
    }

    pub fn scale(&self) -> f32 {
        self.policy.scale()
    }

    /// Backward with the loss gradient seeded by the current scale.
    pub fn scaled_backward(&self, tape: &Tape, loss: Var) -> Result<GradientSet> {
        scaled_backward(tape, loss, self.scale())
    }

    pub fn apply_regularizer_grads(&self, grads: GradientSet) -> Result<GradientSet> {
        apply_regularizer_grads(&self.regularizers, &self.master, grads)
    }

    /// Records a skipped step. Nothing but the policy changes.
    pub fn skip(&mut self) {
        self.policy.on_overflow();
    }

    /// Applies finite, unscaled FP32 gradients: regularizers, inner
    /// optimizer on the master copy, then round into `variables`.
    pub fn apply(
        &mut self,
        variables: &mut ParamStore,
        optimizer: &mut dyn Optimizer,
        lr: f32,
        grads: GradientSet,
    ) -> Result<()> {
        let max_abs = grads.max_abs();
        let grads = self.apply_regularizer_grads(grads)?;
        optimizer.step(&mut self.master, &grads, lr)?;
        self.sync(variables)?;
        self.policy.on_good_step(max_abs);
        Ok(())
    }

    /// Sets every trainable variable to its master value rounded to the
    /// variable's dtype.
    pub fn sync(&self, variables: &mut ParamStore) -> Result<()> {
        for (name, m) in self.master.iter() {
            let dtype = variables
                .get(name)
                .ok_or_else(|| Error::InvalidArgument(format!("no variable '{name}'")))?
                .dtype();
            variables.set(name, m.cast(dtype))?;
        }
        Ok(())
    }

    /// One single-replica step over a recorded forward pass.
    pub fn mp_step(
        &mut self,
        variables: &mut ParamStore,
        optimizer: &mut dyn Optimizer,
        lr: f32,
        tape: &Tape,
        loss: Var,
    ) -> Result<StepOutcome> {
        let grads = self.scaled_backward(tape, loss)?;
        if !check_finite_all(&grads) {
            self.skip();
            return Ok(StepOutcome::Skipped);
        }
        let grads = unscale_to_f32(&grads, self.scale())?;
        self.apply(variables, optimizer, lr, grads)?;
        Ok(StepOutcome::Applied)
    }
}

pub fn scaled_backward(tape: &Tape, loss: Var, scale: f32) -> Result<GradientSet> {
    tape.backward(loss, scale)
}

/// False iff any gradient element is Inf or NaN.
pub fn check_finite_all(grads: &GradientSet) -> bool {
    grads.all_finite()
}

/// Widens every element to FP32, then multiplies by `1/scale` in FP32.
pub fn unscale_to_f32(grads: &GradientSet, scale: f32) -> Result<GradientSet> {
    if !check_finite_all(grads) {
        return Err(Error::Contract("unscaling non-finite gradients".into()));
    }
    let inv = 1.0 / scale;
    grads
        .iter()
        .map(|(name, g)| {
            let v = g.to_f32_vec().into_iter().map(|x| x * inv).collect();
            Ok((name.to_string(), Tensor::from_f32(g.shape().to_vec(), v)?))
        })
        .collect()
}

/// `grads[v] += λ · master[v]` in FP32 for each registered variable.
pub fn apply_regularizer_grads(
    registry: &RegularizerRegistry,
    master: &ParamStore,
    mut grads: GradientSet,
) -> Result<GradientSet> {
    for e in registry.entries() {
        let w = master
            .get(&e.variable)
            .ok_or_else(|| Error::InvalidArgument(format!("no master value for '{}'", e.variable)))?
            .to_f32_vec();
        let g = grads.get_mut(&e.variable).ok_or_else(|| {
            Error::InvalidArgument(format!("no gradient for regularized '{}'", e.variable))
        })?;
        let RegularizerKind::L2WeightDecay = e.kind;
        let mut v = g.to_f32_vec();
        for (g, w) in v.iter_mut().zip(&w) {
            *g += e.coefficient * w;
        }
        *g = Tensor::from_f32(g.shape().to_vec(), v)?;
    }
    Ok(grads)
}

/// Byte counts by category for one training replica.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct MemoryReport {
    pub weights: usize,
    pub master: usize,
    pub optimizer_state: usize,
    pub gradients: usize,
    pub activations: usize,
}

impl MemoryReport {
    pub fn total(&self) -> usize {
        self.weights + self.master + self.optimizer_state + self.gradients + self.activations
    }
}

/// Exact byte counts from dtype widths and element counts. `tape` is a
/// recorded forward pass; FP32 mode keeps no separate master copy.
pub fn memory_report(
    variables: &ParamStore,
    precision: Precision,
    slots_per_variable: usize,
    tape: &Tape,
) -> MemoryReport {
    let trainable: usize = variables.trainable().map(|(_, t)| t.numel()).sum();
    let width = precision.compute_dtype().size_in_bytes();
    MemoryReport {
        weights: variables.size_in_bytes(),
        master: match precision {
            Precision::Float32 => 0,
            Precision::Mixed => trainable * 4,
        },
        optimizer_state: slots_per_variable * trainable * 4,
        gradients: trainable * width,
        activations: tape.activation_bytes(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::halffloat::{f16_binop, BinOp, F16};
    use crate::optim::{Adam, AdamParams, Sgd};
    use proptest::prelude::*;

    fn f16_store(vals: &[(&str, Vec<f32>)]) -> ParamStore {
        let mut ps = ParamStore::new();
        for (n, v) in vals {
            ps.insert(
                n,
                Tensor::from_f32_as(vec![v.len()], v.clone(), DType::F16).unwrap(),
                true,
            )
            .unwrap();
        }
        ps
    }

    fn state(vars: &ParamStore, policy: Box<dyn LossScalePolicy>) -> MixedPrecisionState {
        MixedPrecisionState::init_master(vars, policy, RegularizerRegistry::new()).unwrap()
    }

    fn static_one() -> Box<dyn LossScalePolicy> {
        Box::new(StaticScale::new(1.0).unwrap())
    }

    #[test]
    fn master_is_exact_widening() {
        let vars = f16_store(&[("w", vec![1.0, 0.1, -3.5e-5, 65504.0])]);
        let s = state(&vars, static_one());
        let m = s.master().get("w").unwrap();
        assert_eq!(m.dtype(), DType::F32);
        assert_eq!(m.to_f32_vec()[0], 1.0);
        assert!(m.cast(DType::F16).bit_eq(vars.get("w").unwrap()));
        assert!(state(&ParamStore::new(), static_one()).master().is_empty());
    }

    #[test]
    fn scaling_rescues_underflowing_gradient() {
        // loss = g·w with w an F16 variable; dloss/dw = g.
        let g = 2f32.powi(-26);
        let grad_at = |scale: f32| {
            let mut tape = Tape::new(DType::F16);
            let w = tape
                .variable(
                    "w",
                    Tensor::from_f32_as(vec![1], vec![1.0], DType::F16).unwrap(),
                    true,
                )
                .unwrap();
            let loss = tape.scale(w, g);
            let loss = tape.reduce_sum(loss);
            scaled_backward(&tape, loss, scale).unwrap()
        };
        assert_eq!(grad_at(1.0).get("w").unwrap().to_f32_vec(), vec![0.0]);
        let scaled = grad_at(1024.0);
        assert_eq!(scaled.get("w").unwrap().to_f32_vec(), vec![2f32.powi(-16)]);
        let unscaled = unscale_to_f32(&scaled, 1024.0).unwrap();
        assert_eq!(unscaled.get("w").unwrap().to_f32_vec(), vec![g]);
    }

    #[test]
    fn overflowing_scale_is_detected() {
        let mut tape = Tape::new(DType::F16);
        let w = tape
            .variable(
                "w",
                Tensor::from_f32_as(vec![1], vec![1.0], DType::F16).unwrap(),
                true,
            )
            .unwrap();
        let loss = tape.scale(w, 2.0);
        let loss = tape.reduce_sum(loss);
        let grads = scaled_backward(&tape, loss, 65536.0).unwrap();
        // Oracle: 2 · 2^16 in binary16.
        let expect = f16_binop(BinOp::Mul, F16::from_f32(2.0), F16::from_f32(65536.0));
        assert!(expect.is_infinite());
        assert_eq!(grads.get("w").unwrap().as_f16().unwrap()[0], expect);
        assert!(!check_finite_all(&grads));
        assert!(matches!(
            unscale_to_f32(&grads, 65536.0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn finiteness_examples() {
        let mut v = vec![0f32; 10_000];
        let zeros: GradientSet = [(
            "a".to_string(),
            Tensor::from_f32(vec![10_000], v.clone()).unwrap(),
        )]
        .into_iter()
        .collect();
        assert!(check_finite_all(&zeros));
        v[4321] = f32::INFINITY;
        let one_inf: GradientSet = [("a".to_string(), Tensor::from_f32(vec![10_000], v).unwrap())]
            .into_iter()
            .collect();
        assert!(!check_finite_all(&one_inf));
    }

    #[test]
    fn regularizer_examples() {
        let mut master = ParamStore::new();
        master
            .insert(
                "w",
                Tensor::from_f32(vec![2], vec![2.0, -4.0]).unwrap(),
                true,
            )
            .unwrap();
        let grads: GradientSet = [("w".to_string(), Tensor::zeros(vec![2], DType::F32))]
            .into_iter()
            .collect();
        let unchanged =
            apply_regularizer_grads(&RegularizerRegistry::new(), &master, grads.clone()).unwrap();
        assert_eq!(unchanged, grads);
        let mut reg = RegularizerRegistry::new();
        reg.register("w", RegularizerKind::L2WeightDecay, 1e-4)
            .unwrap();
        let out = apply_regularizer_grads(&reg, &master, grads).unwrap();
        assert_eq!(out.get("w").unwrap().to_f32_vec(), vec![2e-4, -4e-4]);
        assert!(reg
            .register("w", RegularizerKind::L2WeightDecay, 1e-4)
            .is_err());
        assert!(reg
            .register("u", RegularizerKind::L2WeightDecay, 0.0)
            .is_err());
    }

    #[test]
    fn fp32_regularizer_survives_where_f16_product_underflows() {
        let w16 = F16::from_f32(1e-3);
        let naive = f16_binop(BinOp::Mul, F16::from_f32(1e-5), w16);
        assert!(naive.is_zero());
        let mut master = ParamStore::new();
        master
            .insert(
                "w",
                Tensor::from_f16(vec![1], vec![w16])
                    .unwrap()
                    .cast(DType::F32),
                true,
            )
            .unwrap();
        let mut reg = RegularizerRegistry::new();
        reg.register("w", RegularizerKind::L2WeightDecay, 1e-5)
            .unwrap();
        let grads: GradientSet = [("w".to_string(), Tensor::zeros(vec![1], DType::F32))]
            .into_iter()
            .collect();
        let out = apply_regularizer_grads(&reg, &master, grads).unwrap();
        let term = out.get("w").unwrap().to_f32_vec()[0];
        assert_eq!(term, 1e-5f32 * w16.to_f32());
        assert!((term - 1e-8).abs() < 1e-11);
    }

    #[test]
    fn skipped_step_changes_only_the_scale() {
        let mut vars = f16_store(&[("w", vec![0.5, -0.25])]);
        let mut s = state(
            &vars,
            Box::new(Backoff::new(BackoffParams::default()).unwrap()),
        );
        let mut opt = Adam::new(AdamParams::default()).unwrap();
        let before = (vars.digest(), s.master().digest());

        let mut tape = Tape::new(DType::F16);
        let pv = vars.register(&mut tape).unwrap();
        let w = pv.get("w").unwrap();
        let big = tape.scale(w, 60000.0);
        let loss = tape.reduce_sum(big);
        let outcome = s.mp_step(&mut vars, &mut opt, 0.1, &tape, loss).unwrap();

        assert_eq!(outcome, StepOutcome::Skipped);
        assert_eq!((vars.digest(), s.master().digest()), before);
        assert_eq!(opt.steps(), 0);
        assert!(opt.slots().is_empty());
        assert_eq!(s.scale(), 16384.0);
    }

    #[test]
    fn applied_step_keeps_variables_synced_with_master() {
        let mut vars = f16_store(&[("a", vec![0.3, -0.7, 0.01]), ("b", vec![1.5])]);
        let mut s = state(&vars, Box::new(StaticScale::new(128.0).unwrap()));
        let mut opt = Adam::new(AdamParams::default()).unwrap();
        for _ in 0..5 {
            let mut tape = Tape::new(DType::F16);
            let pv = vars.register(&mut tape).unwrap();
            let a = pv.get("a").unwrap();
            let sq = tape.mul(a, a).unwrap();
            let loss = tape.reduce_sum(sq);
            let outcome = s.mp_step(&mut vars, &mut opt, 0.01, &tape, loss).unwrap();
            assert_eq!(outcome, StepOutcome::Applied);
            for (name, m) in s.master().iter() {
                assert!(m.cast(DType::F16).bit_eq(vars.get(name).unwrap()));
            }
        }
        // "b" is not reachable from the loss, so it never moves.
        assert_eq!(vars.get("b").unwrap().to_f32_vec(), vec![1.5]);
    }

    #[test]
    fn fp32_and_mixed_first_step_agree_on_exact_problem() {
        // Every value is a small power of two, so F16 and F32 agree exactly.
        let run = |dtype: DType| {
            let mut vars = ParamStore::new();
            vars.insert(
                "w",
                Tensor::from_f32_as(vec![2], vec![0.5, -2.0], dtype).unwrap(),
                true,
            )
            .unwrap();
            let mut s = state(&vars, static_one());
            let mut tape = Tape::new(dtype);
            let pv = vars.register(&mut tape).unwrap();
            let x = tape.constant(Tensor::from_f32_as(vec![2], vec![4.0, 0.25], dtype).unwrap());
            let prod = tape.mul(pv.get("w").unwrap(), x).unwrap();
            let loss = tape.reduce_sum(prod);
            s.mp_step(&mut vars, &mut Sgd::default(), 0.125, &tape, loss)
                .unwrap();
            s.master().get("w").unwrap().to_f32_vec()
        };
        let a = run(DType::F32);
        assert_eq!(a, vec![0.5 - 0.5, -2.0 - 0.03125]);
        assert_eq!(a, run(DType::F16));
    }

    #[test]
    fn scale_linearity_in_fp32() {
        let mut tape = Tape::new(DType::F32);
        let w = tape
            .variable(
                "w",
                Tensor::from_f32(vec![3], vec![0.3, -1.7, 2.9]).unwrap(),
                true,
            )
            .unwrap();
        let t = tape.tanh(w);
        let sq = tape.mul(t, w).unwrap();
        let loss = tape.reduce_mean(sq);
        let plain = scaled_backward(&tape, loss, 1.0).unwrap();
        for k in [1, 5, 10, 20] {
            let s = 2f32.powi(k);
            let scaled = scaled_backward(&tape, loss, s).unwrap();
            assert_eq!(unscale_to_f32(&scaled, s).unwrap(), plain);
        }
    }

    #[test]
    fn backoff_examples() {
        let p = BackoffParams {
            init_scale: 1024.0,
            growth_interval: 3,
            ..Default::default()
        };
        let mut b = Backoff::new(p).unwrap();
        b.on_overflow();
        assert_eq!(b.scale(), 512.0);
        let mut b = Backoff::new(p).unwrap();
        for _ in 0..3 {
            b.on_good_step(1.0);
        }
        assert_eq!(b.scale(), 2048.0);
        assert_eq!(b.good_steps(), 0);
        assert!(Backoff::new(BackoffParams {
            init_scale: 1000.0,
            ..Default::default()
        })
        .is_err());
    }

    #[test]
    fn logmax_steady_state_clamps_at_max() {
        let mut l = LogMax::new(LogMaxParams::default()).unwrap();
        for _ in 0..500 {
            l.on_good_step(2f32.powi(-20));
        }
        // 15 − (−20) − 2 = 33, clamped to 24.
        assert_eq!(l.scale(), 2f32.powi(24));
        let mut l = LogMax::new(LogMaxParams::default()).unwrap();
        for _ in 0..500 {
            l.on_good_step(2f32.powi(-3));
        }
        assert_eq!(l.scale(), 2f32.powi(16));
        l.on_overflow();
        assert_eq!(l.scale(), 2f32.powi(15));
        l.on_good_step(2f32.powi(-3));
        assert_eq!(l.scale(), 2f32.powi(15));
    }

    #[test]
    fn policy_state_round_trips() {
        let mut b = Backoff::new(BackoffParams::default()).unwrap();
        b.on_overflow();
        b.on_good_step(1.0);
        let mut fresh = Backoff::new(BackoffParams::default()).unwrap();
        fresh.restore(&b.state()).unwrap();
        assert_eq!(
            (fresh.scale(), fresh.good_steps()),
            (b.scale(), b.good_steps())
        );
    }

    #[test]
    fn memory_report_byte_widths() {
        let vars32 = {
            let mut p = ParamStore::new();
            p.insert("w", Tensor::zeros(vec![10, 10], DType::F32), true)
                .unwrap();
            p
        };
        let vars16 = vars32.cast(DType::F16);
        let tape = Tape::new(DType::F32);
        let full = memory_report(&vars32, Precision::Float32, 2, &tape);
        let mixed = memory_report(&vars16, Precision::Mixed, 2, &tape);
        assert_eq!(mixed.weights * 2, full.weights);
        assert_eq!(mixed.master, full.weights);
        assert_eq!(mixed.optimizer_state, 800);
        assert_eq!(full.master, 0);
    }

    #[derive(Debug, Clone)]
    enum Event {
        Overflow,
        Good,
    }

    proptest! {
        #[test]
        fn backoff_matches_reference_model(
            events in prop::collection::vec(prop_oneof![Just(Event::Overflow), Just(Event::Good)], 0..400),
            interval in 1u64..8,
            init_exp in 0i32..24,
        ) {
            let p = BackoffParams {
                init_scale: 2f32.powi(init_exp),
                growth_interval: interval,
                ..Default::default()
            };
            let mut b = Backoff::new(p).unwrap();
            // Reference: exponent bookkeeping on integers.
            let (mut e, mut run) = (init_exp, 0u64);
            for ev in &events {
                match ev {
                    Event::Overflow => {
                        b.on_overflow();
                        e = (e - 1).max(0);
                        run = 0;
                    }
                    Event::Good => {
                        b.on_good_step(1.0);
                        run += 1;
                        if run == interval {
                            e = (e + 1).min(24);
                            run = 0;
                        }
                    }
                }
                prop_assert_eq!(b.scale(), 2f32.powi(e));
                prop_assert!(is_power_of_two(b.scale()));
            }
        }
    }
}

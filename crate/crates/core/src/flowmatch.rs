//! Conditional flow matching: interpolation schedules, velocity-field
//! training and fixed-step ODE integration.

use std::f64::consts::FRAC_PI_2;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::analytic::{mat_vec, GaussianTransport};
use crate::autodiff::{LrDecay, Mlp, MlpArch, MlpCheckpoint, OptimizerHyper, OptimizerKind, OptimizerState, Tensor};
use crate::data::{PointSource, StandardNormalSource};
use crate::error::{check_unit_interval, Error, Result};
use crate::gmm::ZeroMeanGmm;
use crate::points::PointCloud;
use crate::rng;

/// Interpolation path `x_t = s(t) x1 + c(t) x0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// `s = t`, `c = 1 - t`.
    #[default]
    Linear,
    /// `s = sin(πt/2)`, `c = cos(πt/2)`.
    SineCosine,
}

impl Schedule {
    pub fn s(self, t: f64) -> f64 {
        match self {
            Schedule::Linear => t,
            Schedule::SineCosine => (FRAC_PI_2 * t).sin(),
        }
    }

    pub fn c(self, t: f64) -> f64 {
        match self {
            Schedule::Linear => 1.0 - t,
            Schedule::SineCosine => (FRAC_PI_2 * t).cos(),
        }
    }

    pub fn ds(self, t: f64) -> f64 {
        match self {
            Schedule::Linear => 1.0,
            Schedule::SineCosine => FRAC_PI_2 * (FRAC_PI_2 * t).cos(),
        }
    }

    pub fn dc(self, t: f64) -> f64 {
        match self {
            Schedule::Linear => -1.0,
            Schedule::SineCosine => -FRAC_PI_2 * (FRAC_PI_2 * t).sin(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Interpolant {
    pub x_t: Vec<f64>,
    pub v_star: Vec<f64>,
}

/// `x_t = s x1 + c x0` and the conditional target `v* = s' x1 + c' x0`.
pub fn interpolate(schedule: Schedule, x0: &[f64], x1: &[f64], t: f64) -> Result<Interpolant> {
    check_unit_interval("t", t)?;
    if x0.len() != x1.len() {
        return Err(Error::Dimension(format!(
            "x0 of length {} and x1 of length {}",
            x0.len(),
            x1.len()
        )));
    }
    let (s, c, ds, dc) = (schedule.s(t), schedule.c(t), schedule.ds(t), schedule.dc(t));
    Ok(Interpolant {
        x_t: x0.iter().zip(x1).map(|(a, b)| s * b + c * a).collect(),
        v_star: x0.iter().zip(x1).map(|(a, b)| ds * b + dc * a).collect(),
    })
}

/// A time-dependent vector field evaluated on a batch of states.
pub trait VelocityField {
    fn dim(&self) -> usize;

    /// Velocity at time `t` for each row of `x`.
    fn velocity(&self, t: f64, x: &PointCloud) -> Result<PointCloud>;
}

/// The field returned by training: an MLP on `[x, t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedField {
    pub model: Mlp,
    pub schedule: Schedule,
    /// `(step, minibatch loss)` for every optimizer step, 1-based.
    pub train_log: Vec<(usize, f64)>,
    pub seed: u64,
}

impl TrainedField {
    /// Untrained field with freshly initialized weights.
    pub fn init(arch: MlpArch, data_dim: usize, schedule: Schedule, seed: u64) -> Result<Self> {
        check_field_arch(&arch, data_dim)?;
        Ok(Self {
            model: Mlp::new(arch, seed),
            schedule,
            train_log: Vec::new(),
            seed,
        })
    }

    pub fn param_count(&self) -> usize {
        self.model.param_count()
    }

    pub fn checkpoint(&self) -> FieldCheckpoint {
        FieldCheckpoint {
            mlp: self.model.checkpoint(),
            schedule_kind: self.schedule,
            data_dim: self.dim(),
        }
    }

    pub fn from_checkpoint(ck: &FieldCheckpoint) -> Result<Self> {
        let model = Mlp::from_checkpoint(&ck.mlp)?;
        check_field_arch(&model.arch, ck.data_dim)?;
        let seed = model.seed;
        Ok(Self {
            model,
            schedule: ck.schedule_kind,
            train_log: Vec::new(),
            seed,
        })
    }
}

fn check_field_arch(arch: &MlpArch, data_dim: usize) -> Result<()> {
    if arch.input_dim() != data_dim + 1 || arch.output_dim() != data_dim {
        return Err(Error::Dimension(format!(
            "field network {:?} for data dimension {data_dim} needs input {} and output {data_dim}",
            arch.layer_sizes,
            data_dim + 1
        )));
    }
    Ok(())
}

/// JSON form of a [`TrainedField`]: the MLP checkpoint plus the schedule and
/// data dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldCheckpoint {
    #[serde(flatten)]
    pub mlp: MlpCheckpoint,
    pub schedule_kind: Schedule,
    pub data_dim: usize,
}

fn with_time(x: &PointCloud, t: f64) -> Tensor {
    let d = x.dim();
    let mut data = Vec::with_capacity(x.len() * (d + 1));
    for row in x.rows() {
        data.extend_from_slice(row);
        data.push(t);
    }
    Tensor::new(x.len(), d + 1, data)
}

impl VelocityField for TrainedField {
    fn dim(&self) -> usize {
        self.model.arch.output_dim()
    }

    fn velocity(&self, t: f64, x: &PointCloud) -> Result<PointCloud> {
        let out = self.model.forward_batch(&with_time(x, t))?;
        PointCloud::new(out.cols, out.data)
    }
}

/// Optimal linear field `A*(t) x` of the Gaussian model (linear schedule).
impl VelocityField for GaussianTransport {
    fn dim(&self) -> usize {
        GaussianTransport::dim(self)
    }

    fn velocity(&self, t: f64, x: &PointCloud) -> Result<PointCloud> {
        let a = self.optimal_velocity_matrix(t)?;
        let mut out = Vec::with_capacity(x.as_slice().len());
        for row in x.rows() {
            out.extend(mat_vec(&a, row));
        }
        PointCloud::new(x.dim(), out)
    }
}

/// Posterior-weighted mixture field (linear schedule).
impl VelocityField for ZeroMeanGmm {
    fn dim(&self) -> usize {
        ZeroMeanGmm::dim(self)
    }

    fn velocity(&self, t: f64, x: &PointCloud) -> Result<PointCloud> {
        let mut out = Vec::with_capacity(x.as_slice().len());
        for row in x.rows() {
            out.extend(self.mixture_velocity(t, row)?);
        }
        PointCloud::new(x.dim(), out)
    }
}

/// Field given by a closure on single states.
pub struct FnField<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(f64, &[f64]) -> Vec<f64>> FnField<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: Fn(f64, &[f64]) -> Vec<f64>> VelocityField for FnField<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn velocity(&self, t: f64, x: &PointCloud) -> Result<PointCloud> {
        let mut out = Vec::with_capacity(x.as_slice().len());
        for row in x.rows() {
            let v = (self.f)(t, row);
            if v.len() != self.dim {
                return Err(Error::Dimension(format!(
                    "field returned {} components for dimension {}",
                    v.len(),
                    self.dim
                )));
            }
            out.extend(v);
        }
        PointCloud::new(self.dim, out)
    }
}

/// Training hyperparameters for [`cfm_train`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    #[serde(default)]
    pub decay: LrDecay,
}

impl TrainHyper {
    pub(crate) fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Invalid("batch size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Domain {
                name: "lr",
                value: self.lr,
                range: "(0, inf)",
            });
        }
        Ok(())
    }

    /// Learning rate used on the 1-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        self.lr * self.decay.factor(step, self.steps)
    }

    pub(crate) fn optimizer_state(&self, param_count: usize) -> OptimizerState {
        OptimizerState::new(self.optimizer, OptimizerHyper::with_lr(self.lr), param_count)
    }
}

/// One Monte Carlo minibatch: MLP inputs `[x_t, t]` and targets `v*`.
pub struct CfmBatch {
    pub input: Tensor,
    pub target: Tensor,
}

/// Draws `n` pairs `(x0 ~ base, x1 ~ source)` with one uniform `t` per
/// pair.
pub fn cfm_batch(
    source: &dyn PointSource,
    base: &dyn PointSource,
    schedule: Schedule,
    n: usize,
    rng: &mut rng::Rng,
) -> CfmBatch {
    let d = source.dim();
    let x1 = source.draw(rng, n);
    let x0 = base.draw(rng, n);
    let mut input = Vec::with_capacity(n * (d + 1));
    let mut target = Vec::with_capacity(n * d);
    for (a_row, b_row) in x0.rows().zip(x1.rows()) {
        let t: f64 = rng.random();
        let (s, c, ds, dc) = (schedule.s(t), schedule.c(t), schedule.ds(t), schedule.dc(t));
        for (&a, &b) in a_row.iter().zip(b_row) {
            input.push(s * b + c * a);
            target.push(ds * b + dc * a);
        }
        input.push(t);
    }
    CfmBatch {
        input: Tensor::new(n, d + 1, input),
        target: Tensor::new(n, d, target),
    }
}

/// Mean over batch and dimensions of `‖v_θ(x_t, t) - v*‖²`, with gradient.
pub fn cfm_loss_and_grad(model: &Mlp, batch: &CfmBatch) -> Result<(f64, Vec<f64>)> {
    let target = batch.target.clone();
    model.grad(&batch.input, move |tape, out| {
        let y = tape.leaf(target);
        let diff = tape.sub(out, y);
        let sq = tape.square(diff);
        tape.mean(sq)
    })
}

/// Loss only, for a frozen model.
pub fn cfm_loss(model: &Mlp, batch: &CfmBatch) -> Result<f64> {
    let out = model.forward_batch(&batch.input)?;
    let n = out.data.len() as f64;
    Ok(out
        .data
        .iter()
        .zip(&batch.target.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Trains a velocity field by conditional flow matching.
pub fn cfm_train(
    source: &dyn PointSource,
    schedule: Schedule,
    arch: MlpArch,
    hyper: TrainHyper,
) -> Result<TrainedField> {
    cfm_train_with(source, schedule, arch, hyper, |_, _| Ok(()))
}

/// [`cfm_train`] with a callback after every step, receiving the 1-based
/// step index and the current field.
pub fn cfm_train_with(
    source: &dyn PointSource,
    schedule: Schedule,
    arch: MlpArch,
    hyper: TrainHyper,
    on_step: impl FnMut(usize, &TrainedField) -> Result<()>,
) -> Result<TrainedField> {
    let base = StandardNormalSource { dim: source.dim() };
    cfm_train_from(&base, source, schedule, arch, hyper, on_step)
}

/// Flow matching between an arbitrary base distribution and `source`.
pub fn cfm_train_from(
    base: &dyn PointSource,
    source: &dyn PointSource,
    schedule: Schedule,
    arch: MlpArch,
    hyper: TrainHyper,
    mut on_step: impl FnMut(usize, &TrainedField) -> Result<()>,
) -> Result<TrainedField> {
    hyper.validate()?;
    if base.dim() != source.dim() {
        return Err(Error::Dimension(format!(
            "base of dimension {} for data of dimension {}",
            base.dim(),
            source.dim()
        )));
    }
    let mut field = TrainedField::init(arch, source.dim(), schedule, hyper.seed)?;
    let mut opt = hyper.optimizer_state(field.param_count());
    let mut rng = rng::stream(hyper.seed, "cfm.train");
    field.train_log.reserve(hyper.steps);
    for step in 1..=hyper.steps {
        let batch = cfm_batch(source, base, schedule, hyper.batch, &mut rng);
        let (loss, grads) = cfm_loss_and_grad(&field.model, &batch).map_err(|e| at_step(e, step, "cfm loss"))?;
        opt.hyper.lr = hyper.lr_at(step);
        opt.step(&mut field.model.params, &grads)
            .map_err(|e| at_step(e, step, "cfm gradient"))?;
        field.train_log.push((step, loss));
        on_step(step, &field)?;
    }
    Ok(field)
}

/// Rewrites numeric failures so they carry the training step.
pub(crate) fn at_step(e: Error, step: usize, context: &str) -> Error {
    match e {
        Error::Numeric { .. } | Error::NonFiniteLayer { .. } => Error::Numeric {
            context: context.to_string(),
            step,
        },
        other => other,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    Euler,
    #[default]
    Rk4,
}

pub const DEFAULT_INTEGRATION_STEPS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntegrationOptions {
    pub n_steps: usize,
    pub method: Integrator,
    /// Keep every intermediate state.
    #[serde(default)]
    pub record_trajectory: bool,
}

impl Default for IntegrationOptions {
    fn default() -> Self {
        Self {
            n_steps: DEFAULT_INTEGRATION_STEPS,
            method: Integrator::Rk4,
            record_trajectory: false,
        }
    }
}

impl IntegrationOptions {
    pub fn new(n_steps: usize, method: Integrator) -> Self {
        Self {
            n_steps,
            method,
            record_trajectory: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Integration {
    pub x_end: PointCloud,
    /// States at every step including the start, when recorded.
    pub trajectory: Option<Vec<PointCloud>>,
}

/// Integrates `dx/dt = v(x, t)` from `t = 0` to `t = 1`.
pub fn integrate_forward(
    field: &dyn VelocityField,
    x_start: &PointCloud,
    opts: IntegrationOptions,
) -> Result<Integration> {
    integrate(field, x_start, opts, 0.0, 1.0)
}

/// Integrates the same ODE from `t = 1` back to `t = 0`, i.e. the negated
/// field in reversed time. Inverse of [`integrate_forward`] up to
/// discretization error.
pub fn integrate_backward(
    field: &dyn VelocityField,
    x_data: &PointCloud,
    opts: IntegrationOptions,
) -> Result<Integration> {
    integrate(field, x_data, opts, 1.0, 0.0)
}

fn axpy(x: &PointCloud, a: f64, k: &PointCloud) -> PointCloud {
    let data = x.as_slice().iter().zip(k.as_slice()).map(|(x, k)| x + a * k).collect();
    PointCloud::new(x.dim(), data).expect("matching shapes")
}

fn integrate(
    field: &dyn VelocityField,
    x: &PointCloud,
    opts: IntegrationOptions,
    t0: f64,
    t1: f64,
) -> Result<Integration> {
    if opts.n_steps == 0 {
        return Err(Error::Invalid("integration needs at least one step".into()));
    }
    if x.dim() != field.dim() {
        return Err(Error::Dimension(format!(
            "states of dimension {} for a {}-dimensional field",
            x.dim(),
            field.dim()
        )));
    }
    let n = opts.n_steps;
    let h = (t1 - t0) / n as f64;
    let mut state = x.clone();
    let mut trajectory = opts.record_trajectory.then(|| vec![state.clone()]);
    for step in 0..n {
        let t = t0 + step as f64 * h;
        let numeric = |e| at_step(e, step + 1, "integration");
        state = match opts.method {
            Integrator::Euler => {
                let k1 = field.velocity(t, &state).map_err(numeric)?;
                axpy(&state, h, &k1)
            }
            Integrator::Rk4 => {
                let k1 = field.velocity(t, &state).map_err(numeric)?;
                let k2 = field
                    .velocity(t + 0.5 * h, &axpy(&state, 0.5 * h, &k1))
                    .map_err(numeric)?;
                let k3 = field
                    .velocity(t + 0.5 * h, &axpy(&state, 0.5 * h, &k2))
                    .map_err(numeric)?;
                let k4 = field.velocity(t + h, &axpy(&state, h, &k3)).map_err(numeric)?;
                let data = state
                    .as_slice()
                    .iter()
                    .enumerate()
                    .map(|(i, x)| {
                        x + h / 6.0
                            * (k1.as_slice()[i] + 2.0 * k2.as_slice()[i] + 2.0 * k3.as_slice()[i] + k4.as_slice()[i])
                    })
                    .collect();
                PointCloud::new(state.dim(), data)?
            }
        };
        if !state.is_finite() {
            return Err(Error::Numeric {
                context: "integration state".into(),
                step: step + 1,
            });
        }
        if let Some(tr) = trajectory.as_mut() {
            tr.push(state.clone());
        }
    }
    Ok(Integration {
        x_end: state,
        trajectory,
    })
}

/// Draws `n` standard-normal starting points and integrates them forward.
pub fn sample(field: &dyn VelocityField, n: usize, seed: u64, opts: IntegrationOptions) -> Result<PointCloud> {
    let z = crate::data::standard_normal(field.dim(), n, seed, "flow.sample");
    Ok(integrate_forward(field, &z, opts)?.x_end)
}

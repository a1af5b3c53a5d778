//! JSON experiment configs and their fail-fast resolution into a [`Plan`].

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use pfm_core::analytic::{GaussianTransport, StepRule};
use pfm_core::autodiff::{Activation, LrDecay, MlpArch, OptimizerKind};
use pfm_core::data::SWISS_ROLL_DEFAULT_NOISE;
use pfm_core::flowmatch::{IntegrationOptions, Integrator, Schedule, TrainHyper};
use pfm_core::gmm::ZeroMeanGmm;
use pfm_core::linalg::{rotation2, Mat, SpectralMatrix, Vector};
use pfm_core::precond::{CouplingSpec, LOW_CAPACITY_MAX_PARAMS};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    GaussianAnalytic,
    Theorem1,
    GmmBottleneck,
    #[serde(rename = "fm_2d")]
    Fm2d,
    PrecondCompare,
    KappaDiagnostic,
    CheckerboardSwissroll,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::GaussianAnalytic => "gaussian_analytic",
            ExperimentKind::Theorem1 => "theorem1",
            ExperimentKind::GmmBottleneck => "gmm_bottleneck",
            ExperimentKind::Fm2d => "fm_2d",
            ExperimentKind::PrecondCompare => "precond_compare",
            ExperimentKind::KappaDiagnostic => "kappa_diagnostic",
            ExperimentKind::CheckerboardSwissroll => "checkerboard_swissroll",
        }
    }

    /// Experiments that train flow-matching fields.
    pub fn trains_fields(self) -> bool {
        matches!(
            self,
            ExperimentKind::Fm2d | ExperimentKind::PrecondCompare | ExperimentKind::CheckerboardSwissroll
        )
    }
}

/// A covariance, either by spectrum (optionally rotated, 2D only) or by
/// explicit entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CovSpec {
    Spectrum {
        eigenvalues: Vec<f64>,
        #[serde(default)]
        rotation_deg: f64,
    },
    Entries {
        entries: Vec<Vec<f64>>,
    },
}

impl CovSpec {
    pub fn build(&self) -> Result<SpectralMatrix> {
        match self {
            CovSpec::Spectrum {
                eigenvalues,
                rotation_deg,
            } => {
                if eigenvalues.is_empty() {
                    return Err(invalid("covariance needs at least one eigenvalue"));
                }
                if *rotation_deg != 0.0 && eigenvalues.len() != 2 {
                    return Err(invalid("rotation_deg is only defined for 2D covariances"));
                }
                let d = Mat::from_diagonal(&Vector::from_vec(eigenvalues.clone()));
                let m = if eigenvalues.len() == 2 {
                    let r = rotation2(rotation_deg.to_radians());
                    &r * d * r.transpose()
                } else {
                    d
                };
                let m = (&m + m.transpose()) * 0.5;
                spd(&m)
            }
            CovSpec::Entries { entries } => {
                let n = entries.len();
                if n == 0 || entries.iter().any(|r| r.len() != n) {
                    return Err(invalid("covariance entries must form a nonempty square matrix"));
                }
                let m = Mat::from_fn(n, n, |i, j| entries[i][j]);
                spd(&m)
            }
        }
    }
}

fn spd(m: &Mat) -> Result<SpectralMatrix> {
    let s = SpectralMatrix::from_symmetric(m).map_err(|e| invalid(format!("covariance: {e}")))?;
    s.ensure_positive_definite()
        .map_err(|e| invalid(format!("covariance: {e}")))?;
    Ok(s)
}

/// The data distribution `p1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetSpec {
    Gaussian {
        covariance: CovSpec,
    },
    Gmm {
        /// Uniform when absent.
        #[serde(default)]
        weights: Option<Vec<f64>>,
        components: Vec<CovSpec>,
    },
    SwissRoll {
        #[serde(default = "default_noise")]
        noise: f64,
    },
    Checkerboard,
}

fn default_noise() -> f64 {
    SWISS_ROLL_DEFAULT_NOISE
}

/// The base distribution `p0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceSpec {
    StandardNormal,
    Checkerboard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

fn default_hidden() -> Vec<usize> {
    vec![32, 32]
}
fn default_activation() -> Activation {
    Activation::Tanh
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            hidden: default_hidden(),
            activation: default_activation(),
        }
    }
}

impl ModelSpec {
    /// Field network `[d + 1, hidden.., d]`.
    pub fn arch(&self, dim: usize) -> Result<MlpArch> {
        let mut sizes = vec![dim + 1];
        sizes.extend(&self.hidden);
        sizes.push(dim);
        MlpArch::new(sizes, self.activation).map_err(|e| invalid(format!("model: {e}")))
    }
}

/// Optimizer settings; the seed comes from the run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperSpec {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_decay")]
    pub decay: LrDecay,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_batch() -> usize {
    128
}
fn default_steps() -> usize {
    10_000
}
fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Adam
}
fn default_decay() -> LrDecay {
    LrDecay::Cosine
}

impl Default for HyperSpec {
    fn default() -> Self {
        Self {
            lr: default_lr(),
            batch: default_batch(),
            steps: default_steps(),
            optimizer: default_optimizer(),
            decay: default_decay(),
        }
    }
}

impl HyperSpec {
    pub fn with_seed(&self, seed: u64) -> TrainHyper {
        TrainHyper {
            lr: self.lr,
            batch: self.batch,
            steps: self.steps,
            optimizer: self.optimizer,
            seed,
            decay: self.decay,
        }
    }

    fn validate(&self, what: &str) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid(format!("{what}: lr must be positive, got {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(invalid(format!("{what}: batch must be at least 1")));
        }
        Ok(())
    }
}

fn nf_hyper() -> HyperSpec {
    HyperSpec {
        lr: 2e-3,
        steps: 3000,
        ..HyperSpec::default()
    }
}

fn lc_hyper() -> HyperSpec {
    HyperSpec {
        lr: 3e-3,
        steps: 3000,
        ..HyperSpec::default()
    }
}

fn default_lc_hidden() -> Vec<usize> {
    vec![10, 10]
}

fn default_pushforward_steps() -> usize {
    100
}

/// Which knob keeps the pushforward field low-capacity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CapacityBudget {
    /// At most [`LOW_CAPACITY_MAX_PARAMS`] parameters.
    #[default]
    Params,
    /// At most a third of the main model's training steps.
    Steps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PrecondSpec {
    None {
        #[serde(default)]
        label: Option<String>,
    },
    Whitening {
        #[serde(default)]
        label: Option<String>,
        #[serde(default)]
        ridge: f64,
        #[serde(default)]
        centered: bool,
    },
    NormalizingFlow {
        #[serde(default)]
        label: Option<String>,
        #[serde(default)]
        coupling: CouplingSpec,
        #[serde(default = "nf_hyper")]
        hyper: HyperSpec,
    },
    FlowPushforward {
        #[serde(default)]
        label: Option<String>,
        #[serde(default = "default_lc_hidden")]
        hidden: Vec<usize>,
        #[serde(default = "default_activation")]
        activation: Activation,
        #[serde(default = "default_pushforward_steps")]
        n_steps: usize,
        #[serde(default = "lc_hyper")]
        hyper: HyperSpec,
        #[serde(default)]
        budget: CapacityBudget,
    },
}

impl PrecondSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            PrecondSpec::None { .. } => "none",
            PrecondSpec::Whitening { .. } => "whitening",
            PrecondSpec::NormalizingFlow { .. } => "normalizing_flow",
            PrecondSpec::FlowPushforward { .. } => "flow_pushforward",
        }
    }

    /// Method name used in file names and tables.
    pub fn label(&self) -> String {
        let explicit = match self {
            PrecondSpec::None { label }
            | PrecondSpec::Whitening { label, .. }
            | PrecondSpec::NormalizingFlow { label, .. }
            | PrecondSpec::FlowPushforward { label, .. } => label,
        };
        explicit.clone().unwrap_or_else(|| self.kind_name().to_string())
    }

    fn from_name(name: &str) -> Result<Self> {
        let json = serde_json::json!({ "kind": name });
        serde_json::from_value(json).map_err(|_| {
            invalid(format!(
                "unknown preconditioner {name:?}; expected none, whitening, normalizing_flow or flow_pushforward"
            ))
        })
    }
}

/// A list entry: a bare kind name (defaults) or a full spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PrecondEntry {
    Name(String),
    Spec(PrecondSpec),
}

impl PrecondEntry {
    pub fn resolve(&self) -> Result<PrecondSpec> {
        match self {
            PrecondEntry::Name(n) => PrecondSpec::from_name(n),
            PrecondEntry::Spec(s) => Ok(s.clone()),
        }
    }
}

/// One preconditioner or a list of them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PrecondList {
    // `Many` first: internally tagged enums also accept sequences.
    Many(Vec<PrecondEntry>),
    One(PrecondEntry),
}

impl Default for PrecondList {
    fn default() -> Self {
        PrecondList::One(PrecondEntry::Name("none".into()))
    }
}

impl PrecondList {
    pub fn entries(&self) -> Vec<PrecondEntry> {
        match self {
            PrecondList::One(e) => vec![e.clone()],
            PrecondList::Many(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegrationSpec {
    #[serde(default = "default_integration_steps")]
    pub n_steps: usize,
    #[serde(default)]
    pub method: Integrator,
}

fn default_integration_steps() -> usize {
    pfm_core::flowmatch::DEFAULT_INTEGRATION_STEPS
}

impl Default for IntegrationSpec {
    fn default() -> Self {
        Self {
            n_steps: default_integration_steps(),
            method: Integrator::Rk4,
        }
    }
}

impl IntegrationSpec {
    pub fn options(&self) -> IntegrationOptions {
        IntegrationOptions::new(self.n_steps, self.method)
    }
}

/// Data sizes and evaluation settings for training experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    /// Fixed training set, resampled with replacement for minibatches.
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_n_eval")]
    pub n_eval: usize,
    /// MMD curve cadence in optimizer steps; the final step is always
    /// included.
    #[serde(default = "default_curve_every")]
    pub curve_every: usize,
    #[serde(default = "default_curve_points")]
    pub curve_points: usize,
    #[serde(default = "default_curve_integration")]
    pub curve_integration: IntegrationSpec,
    #[serde(default)]
    pub integration: IntegrationSpec,
    #[serde(default = "default_projections")]
    pub projections: usize,
    #[serde(default = "default_t_grid")]
    pub kappa_grid: Vec<f64>,
    #[serde(default = "default_kappa_pairs")]
    pub kappa_pairs: usize,
    /// Loss rows are written every this many steps.
    #[serde(default = "default_loss_every")]
    pub loss_every: usize,
    #[serde(default = "default_true")]
    pub save_checkpoints: bool,
}

fn default_n_train() -> usize {
    10_000
}
fn default_n_eval() -> usize {
    2000
}
fn default_curve_every() -> usize {
    1000
}
fn default_curve_points() -> usize {
    1000
}
fn default_curve_integration() -> IntegrationSpec {
    IntegrationSpec {
        n_steps: 20,
        method: Integrator::Rk4,
    }
}
fn default_projections() -> usize {
    pfm_core::metrics::DEFAULT_PROJECTIONS
}
/// `0.1, 0.2, ..., 0.9`.
pub fn default_t_grid() -> Vec<f64> {
    (1..=9).map(|i| i as f64 / 10.0).collect()
}
fn default_kappa_pairs() -> usize {
    20_000
}
fn default_loss_every() -> usize {
    10
}
fn default_true() -> bool {
    true
}

impl Default for EvalSpec {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields default")
    }
}

/// SGD steady-state probe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdSpec {
    #[serde(default = "default_sgd_t")]
    pub t: f64,
    /// `η = eta_fraction / σ_max(t)`.
    #[serde(default = "default_sgd_fraction")]
    pub eta_fraction: f64,
    #[serde(default = "default_sgd_steps")]
    pub steps: usize,
}

fn default_sgd_t() -> f64 {
    0.8
}
fn default_sgd_fraction() -> f64 {
    0.1
}
fn default_sgd_steps() -> usize {
    200_000
}

impl Default for SgdSpec {
    fn default() -> Self {
        Self {
            t: default_sgd_t(),
            eta_fraction: default_sgd_fraction(),
            steps: default_sgd_steps(),
        }
    }
}

/// Settings for the closed-form experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyticSpec {
    #[serde(default = "default_analytic_grid")]
    pub t_grid: Vec<f64>,
    /// Time of the per-mode decay panel.
    #[serde(default = "default_gd_t")]
    pub gd_t: f64,
    #[serde(default = "default_gd_steps")]
    pub gd_steps: usize,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Step size as a function of the largest eigenvalue in play.
    #[serde(default = "default_step_rule")]
    pub step_rule: StepRule,
    #[serde(default)]
    pub sgd: SgdSpec,
    /// Condition numbers probed by `theorem1`.
    #[serde(default = "default_kappas")]
    pub kappas: Vec<f64>,
    /// Dimension of the `theorem1` covariances.
    #[serde(default = "default_theorem1_dim")]
    pub dim: usize,
}

/// `0, 0.05, ..., 1`.
fn default_analytic_grid() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 20.0).collect()
}
fn default_gd_t() -> f64 {
    0.9
}
fn default_gd_steps() -> usize {
    1000
}
fn default_eps() -> f64 {
    1e-6
}
fn default_step_rule() -> StepRule {
    StepRule::InverseLipschitz
}
fn default_kappas() -> Vec<f64> {
    vec![10.0, 100.0, 1000.0]
}
fn default_theorem1_dim() -> usize {
    2
}

impl Default for AnalyticSpec {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields default")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    #[serde(default)]
    pub target: Option<TargetSpec>,
    #[serde(default)]
    pub source: Option<SourceSpec>,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub precond: PrecondList,
    #[serde(default)]
    pub hyper: HyperSpec,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub eval: EvalSpec,
    #[serde(default)]
    pub analytic: AnalyticSpec,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| invalid(format!("config JSON: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json(&text)
    }

    /// Canonical JSON, the input of the config hash.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// Resolves every referenced spec into a constructible object.
    pub fn validate(&self) -> Result<Plan> {
        if self.seeds.is_empty() {
            return Err(invalid("seed list is empty"));
        }
        let unique: BTreeSet<u64> = self.seeds.iter().copied().collect();
        if unique.len() != self.seeds.len() {
            return Err(invalid("seed list contains duplicates"));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(invalid("output_dir is empty"));
        }
        let target = self.target.as_ref().map(build_target).transpose()?;
        let exp = self.experiment;
        let needs = |what: &str| invalid(format!("{} needs a {what} target", exp.name()));
        match exp {
            ExperimentKind::GaussianAnalytic => {
                if !matches!(target, Some(Target::Gaussian(_))) {
                    return Err(needs("gaussian"));
                }
            }
            ExperimentKind::GmmBottleneck => {
                if !matches!(target, Some(Target::Gmm(_))) {
                    return Err(needs("gmm"));
                }
            }
            ExperimentKind::CheckerboardSwissroll => {
                if !matches!(target, Some(Target::SwissRoll { .. })) {
                    return Err(needs("swiss_roll"));
                }
            }
            ExperimentKind::Theorem1 => {}
            ExperimentKind::Fm2d | ExperimentKind::PrecondCompare | ExperimentKind::KappaDiagnostic => {
                if target.is_none() {
                    return Err(needs("sampleable"));
                }
            }
        }
        let source = match (exp, self.source) {
            (ExperimentKind::CheckerboardSwissroll, None) => SourceSpec::Checkerboard,
            (_, Some(s)) => s,
            (_, None) => SourceSpec::StandardNormal,
        };
        let dim = target.as_ref().map(Target::dim).unwrap_or(self.analytic.dim);
        if source == SourceSpec::Checkerboard && dim != 2 {
            return Err(invalid("checkerboard source needs a 2D target"));
        }
        if source == SourceSpec::Checkerboard && !exp.trains_fields() {
            return Err(invalid(format!("{} does not use a source distribution", exp.name())));
        }
        self.validate_analytic(exp, target.as_ref())?;

        let methods = self.validate_methods(exp, dim)?;
        let arch = self.model.arch(dim)?;
        if exp.trains_fields() {
            self.hyper.validate("hyper")?;
            self.validate_eval(dim)?;
        } else if exp == ExperimentKind::KappaDiagnostic {
            self.validate_kappa_grid()?;
            if self.eval.kappa_pairs < dim + 1 {
                return Err(invalid("eval.kappa_pairs too small for the dimension"));
            }
        }
        Ok(Plan {
            config: self.clone(),
            target,
            source,
            dim,
            arch,
            methods,
        })
    }

    fn validate_methods(&self, exp: ExperimentKind, dim: usize) -> Result<Vec<PrecondSpec>> {
        let methods: Vec<PrecondSpec> = self
            .precond
            .entries()
            .iter()
            .map(PrecondEntry::resolve)
            .collect::<Result<_>>()?;
        let uses_methods = exp.trains_fields() || exp == ExperimentKind::KappaDiagnostic;
        if !uses_methods {
            return Ok(methods);
        }
        if methods.is_empty() {
            return Err(invalid("precond list is empty"));
        }
        if exp == ExperimentKind::Fm2d && methods.len() != 1 {
            return Err(invalid("fm_2d runs exactly one preconditioner"));
        }
        let mut labels = BTreeSet::new();
        for m in &methods {
            let label = m.label();
            if label.is_empty() || !label.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                return Err(invalid(format!(
                    "method label {label:?} must be nonempty [A-Za-z0-9_-]"
                )));
            }
            if !labels.insert(label.clone()) {
                return Err(invalid(format!("duplicate method label {label:?}")));
            }
            match m {
                PrecondSpec::None { .. } => {}
                PrecondSpec::Whitening { ridge, .. } => {
                    if !(*ridge >= 0.0 && ridge.is_finite()) {
                        return Err(invalid(format!("{label}: ridge must be finite and nonnegative")));
                    }
                    if *ridge == 0.0 && self.eval.n_train < dim + 1 {
                        return Err(invalid(format!(
                            "{label}: whitening needs at least {} training points",
                            dim + 1
                        )));
                    }
                }
                PrecondSpec::NormalizingFlow { coupling, hyper, .. } => {
                    coupling.validate().map_err(|e| invalid(format!("{label}: {e}")))?;
                    if dim < 2 {
                        return Err(invalid(format!("{label}: coupling flows need dimension ≥ 2")));
                    }
                    hyper.validate(&label)?;
                }
                PrecondSpec::FlowPushforward {
                    hidden,
                    activation,
                    n_steps,
                    hyper,
                    budget,
                    ..
                } => {
                    hyper.validate(&label)?;
                    if *n_steps == 0 {
                        return Err(invalid(format!("{label}: n_steps must be positive")));
                    }
                    let arch = ModelSpec {
                        hidden: hidden.clone(),
                        activation: *activation,
                    }
                    .arch(dim)?;
                    match budget {
                        CapacityBudget::Params => {
                            if arch.param_count() > LOW_CAPACITY_MAX_PARAMS {
                                return Err(invalid(format!(
                                    "{label}: {} parameters exceed the low-capacity budget of {LOW_CAPACITY_MAX_PARAMS}",
                                    arch.param_count()
                                )));
                            }
                        }
                        CapacityBudget::Steps => {
                            if exp.trains_fields() && 3 * hyper.steps > self.hyper.steps {
                                return Err(invalid(format!(
                                    "{label}: {} steps exceed a third of the main budget of {}",
                                    hyper.steps, self.hyper.steps
                                )));
                            }
                        }
                    }
                }
            }
        }
        Ok(methods)
    }

    fn validate_eval(&self, dim: usize) -> Result<()> {
        let e = &self.eval;
        if e.n_train < dim + 1 || e.n_eval < 2 || e.curve_points < 2 {
            return Err(invalid(
                "eval sizes too small (n_train ≥ d+1, n_eval ≥ 2, curve_points ≥ 2)",
            ));
        }
        if e.curve_points > e.n_eval {
            return Err(invalid("eval.curve_points cannot exceed eval.n_eval"));
        }
        if e.curve_every == 0 || e.loss_every == 0 {
            return Err(invalid("eval.curve_every and eval.loss_every must be positive"));
        }
        if e.projections == 0 {
            return Err(invalid("eval.projections must be positive"));
        }
        if e.integration.n_steps == 0 || e.curve_integration.n_steps == 0 {
            return Err(invalid("integration step counts must be positive"));
        }
        if e.kappa_pairs < dim + 1 {
            return Err(invalid("eval.kappa_pairs too small for the dimension"));
        }
        self.validate_kappa_grid()
    }

    fn validate_kappa_grid(&self) -> Result<()> {
        if self.eval.kappa_grid.is_empty() {
            return Err(invalid("eval.kappa_grid is empty"));
        }
        if let Some(t) = self.eval.kappa_grid.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
            return Err(invalid(format!("eval.kappa_grid entry {t} outside (0, 1)")));
        }
        Ok(())
    }

    fn validate_analytic(&self, exp: ExperimentKind, target: Option<&Target>) -> Result<()> {
        let a = &self.analytic;
        let in_unit = |t: f64| (0.0..=1.0).contains(&t);
        match exp {
            ExperimentKind::GaussianAnalytic | ExperimentKind::GmmBottleneck => {
                if a.t_grid.is_empty() || !a.t_grid.iter().all(|&t| in_unit(t)) {
                    return Err(invalid("analytic.t_grid must be nonempty within [0, 1]"));
                }
                if !in_unit(a.gd_t) || a.gd_steps == 0 {
                    return Err(invalid("analytic.gd_t must lie in [0, 1] and gd_steps be positive"));
                }
                if !(a.eps > 0.0 && a.eps < 1.0) {
                    return Err(invalid("analytic.eps must lie in (0, 1)"));
                }
                check_step_rule(a.step_rule)?;
                if exp == ExperimentKind::GaussianAnalytic {
                    let s = a.sgd;
                    if !(s.t > 0.0 && s.t <= 1.0) || !(s.eta_fraction > 0.0 && s.eta_fraction < 1.0) {
                        return Err(invalid("analytic.sgd needs t in (0, 1] and eta_fraction in (0, 1)"));
                    }
                    if s.steps < pfm_core::analytic::SGD_MIN_STEPS {
                        return Err(invalid(format!(
                            "analytic.sgd.steps must be at least {}",
                            pfm_core::analytic::SGD_MIN_STEPS
                        )));
                    }
                }
                if let (ExperimentKind::GmmBottleneck, Some(Target::Gmm(g))) = (exp, target) {
                    let _ = g
                        .whitening_transforms()
                        .map_err(|e| invalid(format!("gmm whitening: {e}")))?;
                }
            }
            ExperimentKind::Theorem1 => {
                if a.kappas.is_empty() || a.kappas.iter().any(|k| !(*k >= 1.0 && k.is_finite())) {
                    return Err(invalid("analytic.kappas must be nonempty and ≥ 1"));
                }
                if a.dim == 0 {
                    return Err(invalid("analytic.dim must be positive"));
                }
                if !(a.eps > 0.0 && a.eps < 1.0) {
                    return Err(invalid("analytic.eps must lie in (0, 1)"));
                }
                check_step_rule(a.step_rule)?;
            }
            _ => {}
        }
        Ok(())
    }
}

fn check_step_rule(rule: StepRule) -> Result<()> {
    let ok = match rule {
        StepRule::Fixed { eta } => eta > 0.0 && eta.is_finite(),
        StepRule::InverseLambdaMax { fraction } => fraction > 0.0 && fraction.is_finite(),
        StepRule::InverseLipschitz => true,
    };
    if ok {
        Ok(())
    } else {
        Err(invalid("analytic.step_rule needs a positive step"))
    }
}

/// A constructed target distribution.
#[derive(Debug, Clone)]
pub enum Target {
    Gaussian(GaussianTransport),
    Gmm(ZeroMeanGmm),
    SwissRoll { noise: f64 },
    Checkerboard,
}

impl Target {
    pub fn dim(&self) -> usize {
        match self {
            Target::Gaussian(g) => g.dim(),
            Target::Gmm(g) => g.dim(),
            Target::SwissRoll { .. } | Target::Checkerboard => 2,
        }
    }
}

fn build_target(spec: &TargetSpec) -> Result<Target> {
    Ok(match spec {
        TargetSpec::Gaussian { covariance } => {
            Target::Gaussian(GaussianTransport::new(covariance.build()?).map_err(|e| invalid(format!("target: {e}")))?)
        }
        TargetSpec::Gmm { weights, components } => {
            let comps = components.iter().map(CovSpec::build).collect::<Result<Vec<_>>>()?;
            let gmm = match weights {
                Some(w) => ZeroMeanGmm::new(w.clone(), comps),
                None => ZeroMeanGmm::uniform(comps),
            };
            Target::Gmm(gmm.map_err(|e| invalid(format!("target: {e}")))?)
        }
        TargetSpec::SwissRoll { noise } => {
            if !(*noise >= 0.0 && noise.is_finite()) {
                return Err(invalid("swiss_roll noise must be finite and nonnegative"));
            }
            Target::SwissRoll { noise: *noise }
        }
        TargetSpec::Checkerboard => Target::Checkerboard,
    })
}

/// A validated config with every object constructed.
#[derive(Debug, Clone)]
pub struct Plan {
    pub config: ExperimentConfig,
    pub target: Option<Target>,
    pub source: SourceSpec,
    pub dim: usize,
    /// Main field network.
    pub arch: MlpArch,
    pub methods: Vec<PrecondSpec>,
}

fn invalid(msg: impl Into<String>) -> LabError {
    LabError::Validation(msg.into())
}

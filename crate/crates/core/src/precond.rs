//! Data preconditioners: maps `x ↦ x̃` applied to target samples before
//! flow matching, inverted after sampling.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, MlpArch, Tape, Tensor, Var};
use crate::data::{LabeledPoints, PointSource};
use crate::error::{Error, Result};
use crate::flowmatch::{
    at_step, integrate_backward, integrate_forward, FieldCheckpoint, IntegrationOptions, Integrator, TrainHyper,
    TrainedField,
};
use crate::linalg::{inv_sqrt, sample_covariance, Mat, SpectralMatrix};
use crate::points::PointCloud;
use crate::rng;

pub const PRECOND_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_SCALE_CLAMP: f64 = 3.0;
/// Parameter budget of a low-capacity pushforward field.
pub const LOW_CAPACITY_MAX_PARAMS: usize = 200;

fn ln_2pi() -> f64 {
    (2.0 * std::f64::consts::PI).ln()
}

/// Shape of an affine coupling flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingSpec {
    #[serde(default = "default_layers")]
    pub n_layers: usize,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "default_clamp")]
    pub scale_clamp: f64,
}

fn default_layers() -> usize {
    6
}
fn default_hidden() -> Vec<usize> {
    vec![32, 32]
}
fn default_activation() -> Activation {
    Activation::Tanh
}
fn default_clamp() -> f64 {
    DEFAULT_SCALE_CLAMP
}

impl Default for CouplingSpec {
    fn default() -> Self {
        Self {
            n_layers: default_layers(),
            hidden: default_hidden(),
            activation: default_activation(),
            scale_clamp: default_clamp(),
        }
    }
}

impl CouplingSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || !self.n_layers.is_multiple_of(2) {
            return Err(Error::Invalid(format!(
                "coupling layer count must be even and positive, got {}",
                self.n_layers
            )));
        }
        if !(self.scale_clamp > 0.0) {
            return Err(Error::Domain {
                name: "scale_clamp",
                value: self.scale_clamp,
                range: "(0, inf)",
            });
        }
        Ok(())
    }
}

/// One coupling layer: `y_T = x_T ⊙ exp(s(x_C)) + b(x_C)`, `y_C = x_C`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingLayer {
    /// Conditioning coordinates, passed through unchanged.
    pub cond: Vec<usize>,
    /// Transformed coordinates.
    pub trans: Vec<usize>,
    pub scale_offset: usize,
    pub shift_offset: usize,
}

/// RealNVP-style stack of affine couplings. Scale and shift networks of
/// every layer read their weights from the shared flat `params`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingFlow {
    pub dim: usize,
    pub spec: CouplingSpec,
    pub layers: Vec<CouplingLayer>,
    pub scale_arch: Vec<MlpArch>,
    pub shift_arch: Vec<MlpArch>,
    pub params: Vec<f64>,
    pub seed: u64,
    #[serde(default)]
    pub train_log: Vec<(usize, f64)>,
}

impl CouplingFlow {
    /// Identity-initialized flow: hidden layers are randomly initialized,
    /// output layers are zero so every scale and shift starts at 0.
    pub fn new(dim: usize, spec: CouplingSpec, seed: u64) -> Result<Self> {
        let mut flow = Self::zeros(dim, spec, seed)?;
        let mut rng = rng::stream(seed, "coupling.init");
        let archs: Vec<(usize, MlpArch)> = flow
            .layers
            .iter()
            .zip(flow.scale_arch.iter().zip(&flow.shift_arch))
            .flat_map(|(l, (sa, ba))| [(l.scale_offset, sa.clone()), (l.shift_offset, ba.clone())])
            .collect();
        for (offset, arch) in archs {
            let mut p = arch.init_params(&mut rng);
            let n = arch.layer_sizes.len();
            let last = arch.layer_sizes[n - 2] * arch.layer_sizes[n - 1] + arch.layer_sizes[n - 1];
            let len = p.len();
            p[len - last..].iter_mut().for_each(|v| *v = 0.0);
            flow.params[offset..offset + len].copy_from_slice(&p);
        }
        Ok(flow)
    }

    /// All-zero parameters: the identity map.
    pub fn zeros(dim: usize, spec: CouplingSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        if dim < 2 {
            return Err(Error::Dimension(format!(
                "coupling flows need dimension at least 2, got {dim}"
            )));
        }
        let mut rng = rng::stream(seed, "coupling.masks");
        let mut layers = Vec::with_capacity(spec.n_layers);
        let mut scale_arch = Vec::with_capacity(spec.n_layers);
        let mut shift_arch = Vec::with_capacity(spec.n_layers);
        let mut offset = 0;
        let mut order: Vec<usize> = (0..dim).collect();
        for l in 0..spec.n_layers {
            // d > 2 reshuffles before every pair of layers; d = 2 just alternates
            if dim > 2 && l % 2 == 0 {
                order.shuffle(&mut rng);
            }
            let half = dim / 2;
            let (a, b) = order.split_at(half);
            let (cond, trans) = if l % 2 == 0 {
                (a.to_vec(), b.to_vec())
            } else {
                (b.to_vec(), a.to_vec())
            };
            let sizes = |out: usize| {
                let mut s = vec![cond.len()];
                s.extend(&spec.hidden);
                s.push(out);
                MlpArch::new(s, spec.activation)
            };
            let sa = sizes(trans.len())?;
            let ba = sizes(trans.len())?;
            let scale_offset = offset;
            offset += sa.param_count();
            let shift_offset = offset;
            offset += ba.param_count();
            layers.push(CouplingLayer {
                cond,
                trans,
                scale_offset,
                shift_offset,
            });
            scale_arch.push(sa);
            shift_arch.push(ba);
        }
        Ok(Self {
            dim,
            spec,
            layers,
            scale_arch,
            shift_arch,
            params: vec![0.0; offset],
            seed,
            train_log: Vec::new(),
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn clamp(&self, raw: f64) -> f64 {
        let c = self.spec.scale_clamp;
        c * (raw / c).tanh()
    }

    fn check(&self, x: &PointCloud) -> Result<()> {
        if x.dim() != self.dim {
            return Err(Error::Dimension(format!(
                "points of dimension {} for a {}-dimensional flow",
                x.dim(),
                self.dim
            )));
        }
        Ok(())
    }

    fn nets(&self, l: usize, h: &Tensor) -> Result<(Tensor, Tensor)> {
        let layer = &self.layers[l];
        let xc = select(h, &layer.cond);
        let raw = self.scale_arch[l]
            .forward_plain(&self.params, layer.scale_offset, &xc)
            .map_err(|_| Error::NonFiniteLayer {
                model: "coupling",
                layer: l,
            })?;
        let shift = self.shift_arch[l]
            .forward_plain(&self.params, layer.shift_offset, &xc)
            .map_err(|_| Error::NonFiniteLayer {
                model: "coupling",
                layer: l,
            })?;
        let s = Tensor::new(raw.rows, raw.cols, raw.data.iter().map(|&v| self.clamp(v)).collect());
        Ok((s, shift))
    }

    /// Batch forward map and per-point `log |det J|`.
    pub fn forward(&self, x: &PointCloud) -> Result<(PointCloud, Vec<f64>)> {
        self.check(x)?;
        let mut h = Tensor::new(x.len(), self.dim, x.as_slice().to_vec());
        let mut log_det = vec![0.0; x.len()];
        for (l, layer) in self.layers.iter().enumerate() {
            let (s, b) = self.nets(l, &h)?;
            for r in 0..h.rows {
                for (j, &c) in layer.trans.iter().enumerate() {
                    let sv = s.at(r, j);
                    h.data[r * self.dim + c] = h.data[r * self.dim + c] * sv.exp() + b.at(r, j);
                    log_det[r] += sv;
                }
            }
            if !h.is_finite() {
                return Err(Error::NonFiniteLayer {
                    model: "coupling",
                    layer: l,
                });
            }
        }
        Ok((PointCloud::new(self.dim, h.data)?, log_det))
    }

    /// Exact inverse, layer by layer in reverse.
    pub fn inverse(&self, y: &PointCloud) -> Result<PointCloud> {
        self.check(y)?;
        let mut h = Tensor::new(y.len(), self.dim, y.as_slice().to_vec());
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let (s, b) = self.nets(l, &h)?;
            for r in 0..h.rows {
                for (j, &c) in layer.trans.iter().enumerate() {
                    h.data[r * self.dim + c] = (h.data[r * self.dim + c] - b.at(r, j)) * (-s.at(r, j)).exp();
                }
            }
            if !h.is_finite() {
                return Err(Error::NonFiniteLayer {
                    model: "coupling",
                    layer: l,
                });
            }
        }
        PointCloud::new(self.dim, h.data)
    }

    /// Single-point forward map and log-determinant.
    pub fn forward_point(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        let (y, ld) = self.forward(&PointCloud::new(x.len(), x.to_vec())?)?;
        Ok((y.into_vec(), ld[0]))
    }

    /// Mean NLL `½‖P(x)‖² - log|det DP(x)| + (d/2) log 2π` over the rows of
    /// `x`, recorded on a tape over `params`.
    fn nll_tape(&self, tape: &mut Tape<'_>, x: &Tensor) -> Result<Var> {
        let mut h = tape.leaf(x.clone());
        let mut log_det: Option<Var> = None;
        let inv_c = 1.0 / self.spec.scale_clamp;
        for (l, layer) in self.layers.iter().enumerate() {
            let xc = tape.select_cols(h, &layer.cond);
            let xt = tape.select_cols(h, &layer.trans);
            let raw = self.scale_arch[l].forward_tape(tape, layer.scale_offset, xc)?;
            let shift = self.shift_arch[l].forward_tape(tape, layer.shift_offset, xc)?;
            let squashed = tape.scale(raw, inv_c);
            let squashed = tape.tanh(squashed);
            let s = tape.scale(squashed, self.spec.scale_clamp);
            let es = tape.exp(s);
            let scaled = tape.mul(xt, es);
            let yt = tape.add(scaled, shift);
            h = tape.merge_cols(&[(xc, &layer.cond), (yt, &layer.trans)], self.dim);
            if !tape.value(h).is_finite() {
                return Err(Error::NonFiniteLayer {
                    model: "coupling",
                    layer: l,
                });
            }
            let ls = tape.sum_cols(s);
            log_det = Some(match log_det {
                Some(acc) => tape.add(acc, ls),
                None => ls,
            });
        }
        let sq = tape.square(h);
        let half_sq = tape.sum_cols(sq);
        let half_sq = tape.scale(half_sq, 0.5);
        let per_point = tape.sub(half_sq, log_det.expect("at least one layer"));
        Ok(tape.mean(per_point))
    }

    fn nll_const(&self) -> f64 {
        0.5 * self.dim as f64 * ln_2pi()
    }

    /// Mean negative log-likelihood of `x` under the flow with a standard
    /// normal base, and its parameter gradient.
    pub fn nll_and_grad(&self, x: &PointCloud) -> Result<(f64, Vec<f64>)> {
        self.check(x)?;
        let mut tape = Tape::new(&self.params);
        let out = self.nll_tape(&mut tape, &Tensor::new(x.len(), self.dim, x.as_slice().to_vec()))?;
        let value = tape.value(out).data[0] + self.nll_const();
        if !value.is_finite() {
            return Err(Error::Numeric {
                context: "flow nll".into(),
                step: 0,
            });
        }
        Ok((value, tape.backward(out)))
    }

    /// Mean negative log-likelihood without gradients.
    pub fn nll(&self, x: &PointCloud) -> Result<f64> {
        let (y, ld) = self.forward(x)?;
        let total: f64 = y
            .rows()
            .zip(&ld)
            .map(|(r, l)| 0.5 * r.iter().map(|v| v * v).sum::<f64>() - l)
            .sum();
        Ok(total / x.len() as f64 + self.nll_const())
    }
}

fn select(h: &Tensor, cols: &[usize]) -> Tensor {
    let mut out = Vec::with_capacity(h.rows * cols.len());
    for r in 0..h.rows {
        for &c in cols {
            out.push(h.at(r, c));
        }
    }
    Tensor::new(h.rows, cols.len(), out)
}

/// Maximum-likelihood training of a coupling flow on minibatches drawn from
/// `source`.
pub fn nf_train(source: &dyn PointSource, spec: CouplingSpec, hyper: TrainHyper) -> Result<CouplingFlow> {
    nf_train_with(source, spec, hyper, |_, _| Ok(()))
}

pub fn nf_train_with(
    source: &dyn PointSource,
    spec: CouplingSpec,
    hyper: TrainHyper,
    mut on_step: impl FnMut(usize, &CouplingFlow) -> Result<()>,
) -> Result<CouplingFlow> {
    hyper.validate()?;
    let mut flow = CouplingFlow::new(source.dim(), spec, hyper.seed)?;
    let mut opt = hyper.optimizer_state(flow.param_count());
    let mut rng = rng::stream(hyper.seed, "nf.train");
    flow.train_log.reserve(hyper.steps);
    for step in 1..=hyper.steps {
        let batch = source.draw(&mut rng, hyper.batch);
        let (loss, grads) = flow.nll_and_grad(&batch).map_err(|e| at_step(e, step, "flow nll"))?;
        opt.hyper.lr = hyper.lr_at(step);
        opt.step(&mut flow.params, &grads)
            .map_err(|e| at_step(e, step, "flow gradient"))?;
        flow.train_log.push((step, loss));
        on_step(step, &flow)?;
    }
    Ok(flow)
}

/// Affine whitening `x̃ = P (x - μ)` with `P = (Σ̂ + ridge I)^{-1/2}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Whitening {
    pub matrix: Mat,
    pub inverse: Mat,
    /// Subtracted mean; zero unless fitted with centering.
    pub mean: Vec<f64>,
    /// `log |det P|`.
    pub log_det: f64,
    pub ridge: f64,
}

#[derive(Debug, Clone)]
pub enum Preconditioner {
    Identity {
        dim: usize,
    },
    Whitening(Whitening),
    NormalizingFlow(CouplingFlow),
    /// Backward integration of a low-capacity field; forward maps data
    /// toward the Gaussian end.
    FlowPushforward {
        field: TrainedField,
        opts: IntegrationOptions,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreconditionerKind {
    Identity,
    Whitening,
    NormalizingFlow,
    FlowPushforward,
}

impl Preconditioner {
    pub fn kind(&self) -> PreconditionerKind {
        match self {
            Preconditioner::Identity { .. } => PreconditionerKind::Identity,
            Preconditioner::Whitening(_) => PreconditionerKind::Whitening,
            Preconditioner::NormalizingFlow(_) => PreconditionerKind::NormalizingFlow,
            Preconditioner::FlowPushforward { .. } => PreconditionerKind::FlowPushforward,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Preconditioner::Identity { dim } => *dim,
            Preconditioner::Whitening(w) => w.mean.len(),
            Preconditioner::NormalizingFlow(f) => f.dim,
            Preconditioner::FlowPushforward { field, .. } => crate::flowmatch::VelocityField::dim(field),
        }
    }

    pub fn forward(&self, x: &PointCloud) -> Result<PointCloud> {
        match self {
            Preconditioner::Identity { .. } => Ok(x.clone()),
            Preconditioner::Whitening(w) => Ok(affine(x, &w.matrix, &w.mean, true)),
            Preconditioner::NormalizingFlow(f) => Ok(f.forward(x)?.0),
            Preconditioner::FlowPushforward { field, opts } => Ok(integrate_backward(field, x, *opts)?.x_end),
        }
    }

    pub fn inverse(&self, x: &PointCloud) -> Result<PointCloud> {
        match self {
            Preconditioner::Identity { .. } => Ok(x.clone()),
            Preconditioner::Whitening(w) => Ok(affine(x, &w.inverse, &w.mean, false)),
            Preconditioner::NormalizingFlow(f) => f.inverse(x),
            Preconditioner::FlowPushforward { field, opts } => Ok(integrate_forward(field, x, *opts)?.x_end),
        }
    }

    /// Per-point `log |det DP(x)|`; `None` for the pushforward.
    pub fn log_det(&self, x: &PointCloud) -> Result<Option<Vec<f64>>> {
        Ok(match self {
            Preconditioner::Identity { .. } => Some(vec![0.0; x.len()]),
            Preconditioner::Whitening(w) => Some(vec![w.log_det; x.len()]),
            Preconditioner::NormalizingFlow(f) => Some(f.forward(x)?.1),
            Preconditioner::FlowPushforward { .. } => None,
        })
    }

    pub fn to_record(&self) -> PreconditionerRecord {
        let body = match self {
            Preconditioner::Identity { dim } => RecordBody::Identity { dim: *dim },
            Preconditioner::Whitening(w) => RecordBody::Whitening {
                matrix: rows_of(&w.matrix),
                inverse: rows_of(&w.inverse),
                mean: w.mean.clone(),
                log_det: w.log_det,
                ridge: w.ridge,
            },
            Preconditioner::NormalizingFlow(f) => RecordBody::NormalizingFlow { flow: f.clone() },
            Preconditioner::FlowPushforward { field, opts } => RecordBody::FlowPushforward {
                field: field.checkpoint(),
                n_steps: opts.n_steps,
                method: opts.method,
                seed: field.seed,
            },
        };
        PreconditionerRecord {
            format_version: PRECOND_FORMAT_VERSION,
            body,
        }
    }

    pub fn from_record(rec: &PreconditionerRecord) -> Result<Self> {
        if rec.format_version != PRECOND_FORMAT_VERSION {
            return Err(Error::Invalid(format!(
                "unsupported preconditioner format version {}",
                rec.format_version
            )));
        }
        Ok(match &rec.body {
            RecordBody::Identity { dim } => Preconditioner::Identity { dim: *dim },
            RecordBody::Whitening {
                matrix,
                inverse,
                mean,
                log_det,
                ridge,
            } => Preconditioner::Whitening(Whitening {
                matrix: mat_of(matrix)?,
                inverse: mat_of(inverse)?,
                mean: mean.clone(),
                log_det: *log_det,
                ridge: *ridge,
            }),
            RecordBody::NormalizingFlow { flow } => Preconditioner::NormalizingFlow(flow.clone()),
            RecordBody::FlowPushforward {
                field, n_steps, method, ..
            } => Preconditioner::FlowPushforward {
                field: TrainedField::from_checkpoint(field)?,
                opts: IntegrationOptions::new(*n_steps, *method),
            },
        })
    }
}

/// JSON form of a [`Preconditioner`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreconditionerRecord {
    pub format_version: u32,
    #[serde(flatten)]
    pub body: RecordBody,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RecordBody {
    Identity {
        dim: usize,
    },
    Whitening {
        matrix: Vec<Vec<f64>>,
        inverse: Vec<Vec<f64>>,
        mean: Vec<f64>,
        log_det: f64,
        ridge: f64,
    },
    NormalizingFlow {
        flow: CouplingFlow,
    },
    FlowPushforward {
        field: FieldCheckpoint,
        n_steps: usize,
        method: Integrator,
        seed: u64,
    },
}

fn rows_of(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn mat_of(rows: &[Vec<f64>]) -> Result<Mat> {
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(Error::Dimension("stored matrix is not square".into()));
    }
    Ok(Mat::from_fn(n, n, |i, j| rows[i][j]))
}

/// `M (x - μ)` when `subtract`, otherwise `M x + μ`.
fn affine(x: &PointCloud, m: &Mat, mean: &[f64], subtract: bool) -> PointCloud {
    let d = x.dim();
    let mut out = Vec::with_capacity(x.as_slice().len());
    let mut buf = vec![0.0; d];
    for row in x.rows() {
        for k in 0..d {
            buf[k] = if subtract { row[k] - mean[k] } else { row[k] };
        }
        for i in 0..d {
            let mut acc = 0.0;
            for k in 0..d {
                acc += m[(i, k)] * buf[k];
            }
            out.push(if subtract { acc } else { acc + mean[i] });
        }
    }
    PointCloud::new(d, out).expect("same dimension")
}

/// Whitening fitted to the second moment of `points` (the covariance when
/// `centered`).
pub fn whitening_from_data(points: &PointCloud, ridge: f64, centered: bool) -> Result<Preconditioner> {
    let d = points.dim();
    if points.len() < d + 1 {
        return Err(Error::SampleSize {
            needed: d + 1,
            got: points.len(),
        });
    }
    let cov = sample_covariance(points, centered)?;
    let spec = SpectralMatrix::from_symmetric(&cov)?;
    let matrix = inv_sqrt(&spec, ridge)?;
    let inverse = spec.map_spectrum(|l| (l + ridge).sqrt());
    let log_det = -0.5 * spec.eigvals().iter().map(|l| (l + ridge).ln()).sum::<f64>();
    let mut mean = vec![0.0; d];
    if centered {
        for row in points.rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= points.len() as f64);
    }
    Ok(Preconditioner::Whitening(Whitening {
        matrix,
        inverse,
        mean,
        log_det,
        ridge,
    }))
}

/// Pushforward preconditioner from a (low-capacity) field trained in the
/// usual noise-to-data direction, integrated with rk4.
pub fn flow_pushforward_precond(field: TrainedField, n_steps: usize) -> Result<Preconditioner> {
    if n_steps == 0 {
        return Err(Error::Invalid("pushforward needs at least one integration step".into()));
    }
    Ok(Preconditioner::FlowPushforward {
        field,
        opts: IntegrationOptions::new(n_steps, Integrator::Rk4),
    })
}

/// [`precondition_dataset`] for an unlabeled cloud.
pub fn precondition_points(p: &Preconditioner, points: &PointCloud) -> Result<PointCloud> {
    let mapped = match p.forward(points) {
        Ok(m) => m,
        Err(Error::Numeric { .. } | Error::NonFiniteLayer { .. }) => {
            let indices = (0..points.len())
                .filter(|&i| {
                    let one = PointCloud::new(points.dim(), points.row(i).to_vec()).expect("row");
                    !matches!(p.forward(&one), Ok(y) if y.is_finite())
                })
                .collect();
            return Err(Error::NonFinitePoints { indices });
        }
        Err(e) => return Err(e),
    };
    let bad: Vec<usize> = (0..mapped.len())
        .filter(|&i| mapped.row(i).iter().any(|v| !v.is_finite()))
        .collect();
    if !bad.is_empty() {
        return Err(Error::NonFinitePoints { indices: bad });
    }
    Ok(mapped)
}

/// Applies `p.forward` to every point, keeping order and labels. Points
/// whose image is not finite are reported together by index.
pub fn precondition_dataset(p: &Preconditioner, points: &LabeledPoints) -> Result<LabeledPoints> {
    let mapped = precondition_points(p, &points.points)?;
    Ok(LabeledPoints {
        points: mapped,
        labels: points.labels.clone(),
        seed: points.seed,
        generator_id: points.generator_id.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_difference_grad, max_relative_error, LrDecay, OptimizerKind};
    use crate::data::{gaussian_sample, standard_normal, GaussianSource};
    use crate::linalg::cond_number;

    fn small_spec() -> CouplingSpec {
        CouplingSpec {
            n_layers: 4,
            hidden: vec![8],
            ..CouplingSpec::default()
        }
    }

    /// Flow with every parameter randomized, so no layer is an identity.
    fn random_flow(dim: usize, seed: u64) -> CouplingFlow {
        let mut f = CouplingFlow::zeros(dim, small_spec(), seed).unwrap();
        let mut rng = rng::stream(seed, "test.params");
        use rand::Rng as _;
        f.params.iter_mut().for_each(|p| *p = rng.random_range(-0.5..0.5));
        f
    }

    fn max_abs_diff(a: &PointCloud, b: &PointCloud) -> f64 {
        a.as_slice()
            .iter()
            .zip(b.as_slice())
            .fold(0.0, |m, (x, y)| m.max((x - y).abs()))
    }

    #[test]
    fn spec_validation() {
        assert!(CouplingFlow::zeros(
            2,
            CouplingSpec {
                n_layers: 3,
                ..CouplingSpec::default()
            },
            0
        )
        .is_err());
        assert!(CouplingFlow::zeros(1, CouplingSpec::default(), 0).is_err());
        let f = CouplingFlow::zeros(2, CouplingSpec::default(), 0).unwrap();
        assert_eq!(f.layers.len(), 6);
        for (l, layer) in f.layers.iter().enumerate() {
            assert_eq!(layer.trans, vec![if l % 2 == 0 { 1 } else { 0 }]);
        }
        let f3 = CouplingFlow::zeros(5, small_spec(), 3).unwrap();
        for layer in &f3.layers {
            let mut all: Vec<usize> = layer.cond.iter().chain(&layer.trans).copied().collect();
            all.sort();
            assert_eq!(all, (0..5).collect::<Vec<_>>());
        }
    }

    #[test]
    fn zero_flow_is_identity() {
        let f = CouplingFlow::zeros(2, CouplingSpec::default(), 0).unwrap();
        let x = standard_normal(2, 10, 0, "z");
        let (y, ld) = f.forward(&x).unwrap();
        assert_eq!(y, x);
        assert!(ld.iter().all(|&v| v == 0.0));
        assert_eq!(f.inverse(&x).unwrap(), x);
        let init = CouplingFlow::new(2, CouplingSpec::default(), 4).unwrap();
        assert_eq!(init.forward(&x).unwrap().0, x);
    }

    #[test]
    fn constant_scale_log_det() {
        let spec = CouplingSpec {
            n_layers: 2,
            hidden: vec![4],
            ..CouplingSpec::default()
        };
        let mut f = CouplingFlow::zeros(2, spec, 0).unwrap();
        // raw scale 0.8 from the output bias of layer 0's scale net
        let arch = &f.scale_arch[0];
        let bias = f.layers[0].scale_offset + arch.param_count() - 1;
        f.params[bias] = 0.8;
        let want = 3.0 * (0.8f64 / 3.0).tanh();
        let (_, ld) = f.forward_point(&[0.3, -1.2]).unwrap();
        assert!((ld - want).abs() < 1e-15);
        let (y, _) = f.forward_point(&[0.3, -1.2]).unwrap();
        assert!((y[1] - (-1.2 * want.exp())).abs() < 1e-14);
    }

    #[test]
    fn clamp_bounds_scale() {
        let spec = CouplingSpec {
            n_layers: 2,
            hidden: vec![4],
            ..CouplingSpec::default()
        };
        let mut f = CouplingFlow::zeros(2, spec, 0).unwrap();
        let bias = f.layers[0].scale_offset + f.scale_arch[0].param_count() - 1;
        f.params[bias] = 1e6;
        let (_, ld) = f.forward_point(&[0.0, 1.0]).unwrap();
        assert!(ld <= 3.0 + 1e-12);
    }

    #[test]
    fn log_det_matches_finite_difference_jacobian() {
        let f = random_flow(2, 7);
        let h = 1e-5;
        for x in [[0.3, -0.7], [1.5, 0.2], [-2.0, 1.1]] {
            let (_, ld) = f.forward_point(&x).unwrap();
            let mut jac = [[0.0; 2]; 2];
            for j in 0..2 {
                let mut xp = x;
                let mut xm = x;
                xp[j] += h;
                xm[j] -= h;
                let (yp, _) = f.forward_point(&xp).unwrap();
                let (ym, _) = f.forward_point(&xm).unwrap();
                for i in 0..2 {
                    jac[i][j] = (yp[i] - ym[i]) / (2.0 * h);
                }
            }
            let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
            assert!((det.abs().ln() - ld).abs() < 1e-6);
            assert!((det.abs() - ld.exp()).abs() / ld.exp() < 1e-5);
        }
    }

    #[test]
    fn coupling_round_trip() {
        for dim in [2, 5] {
            let f = random_flow(dim, 11);
            let x = standard_normal(dim, 100, 1, "rt");
            let (y, _) = f.forward(&x).unwrap();
            assert!(max_abs_diff(&f.inverse(&y).unwrap(), &x) < 1e-9);
            let back = f.inverse(&x).unwrap();
            assert!(max_abs_diff(&f.forward(&back).unwrap().0, &x) < 1e-9);
        }
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        let f = random_flow(2, 3);
        let x = standard_normal(2, 16, 2, "g");
        let (v, g) = f.nll_and_grad(&x).unwrap();
        assert!((v - f.nll(&x).unwrap()).abs() < 1e-12);
        let fd = finite_difference_grad(&f.params, 1e-6, |p| {
            let mut ff = f.clone();
            ff.params.copy_from_slice(p);
            ff.nll(&x).unwrap()
        });
        assert!(max_relative_error(&g, &fd, 1e-6) < 1e-6);
    }

    #[test]
    fn initial_nll_is_standard_normal_entropy() {
        let x = standard_normal(2, 200_000, 5, "nll");
        let f = CouplingFlow::new(2, CouplingSpec::default(), 0).unwrap();
        let nll = f.nll(&x).unwrap();
        assert!((nll - (ln_2pi() + 1.0)).abs() < 0.01, "{nll}");
    }

    #[test]
    fn training_beats_identity_on_anisotropic_gaussian() {
        let h = SpectralMatrix::diagonal(&[1.0, 100.0]).unwrap();
        let src = GaussianSource::new(&h).unwrap();
        let hyper = TrainHyper {
            lr: 3e-3,
            batch: 64,
            steps: 600,
            optimizer: OptimizerKind::Adam,
            seed: 1,
            decay: LrDecay::Constant,
        };
        let spec = CouplingSpec {
            n_layers: 4,
            hidden: vec![16, 16],
            ..CouplingSpec::default()
        };
        let flow = nf_train(&src, spec.clone(), hyper).unwrap();
        let again = nf_train(&src, spec, hyper).unwrap();
        assert_eq!(flow.train_log, again.train_log);
        let test = gaussian_sample(&h, 20_000, 9).unwrap().points;
        let identity_nll = 0.5 * (1.0 + 100.0) + ln_2pi();
        let trained = flow.nll(&test).unwrap();
        assert!(trained < identity_nll - 1.0, "{trained} vs {identity_nll}");
    }

    #[test]
    fn whitening_examples() {
        let white = standard_normal(2, 100_000, 1, "w");
        let Preconditioner::Whitening(w) = whitening_from_data(&white, 0.0, false).unwrap() else {
            unreachable!()
        };
        assert!((w.matrix.clone() - Mat::identity(2, 2)).norm() < 0.02);

        let h = SpectralMatrix::diagonal(&[1.0, 100.0]).unwrap();
        let pts = gaussian_sample(&h, 100_000, 2).unwrap();
        let p = whitening_from_data(&pts.points, 0.0, false).unwrap();
        let out = precondition_dataset(&p, &pts).unwrap();
        assert_eq!(out.len(), pts.len());
        let cov = sample_covariance(&out.points, false).unwrap();
        assert!(cond_number(&SpectralMatrix::from_symmetric(&cov).unwrap()).unwrap() < 1.2);
        let back = p.inverse(&out.points).unwrap();
        assert!(max_abs_diff(&back, &pts.points) < 1e-10 * 100.0);
        let probe = PointCloud::from_rows(&[[1e3, -7.0], [0.0, 0.0]]).unwrap();
        assert!(max_abs_diff(&p.inverse(&p.forward(&probe).unwrap()).unwrap(), &probe) < 1e-10 * 1e3);
        let Preconditioner::Whitening(w) = &p else {
            unreachable!()
        };
        assert!((w.log_det - (-0.5 * (w.inverse.determinant().ln() * 2.0))).abs() < 1e-10);
    }

    #[test]
    fn whitening_errors_and_centering() {
        let line = PointCloud::from_rows(&[[1.0, 1.0], [2.0, 2.0], [-1.0, -1.0]]).unwrap();
        assert!(matches!(
            whitening_from_data(&line, 0.0, false),
            Err(Error::NotPositiveDefinite(_))
        ));
        assert!(whitening_from_data(&line, 1e-3, false).is_ok());
        assert!(matches!(
            whitening_from_data(&line.head(2), 1e-3, false),
            Err(Error::SampleSize { .. })
        ));
        let mut shifted = standard_normal(2, 10_000, 3, "c");
        shifted.as_mut_slice().iter_mut().for_each(|v| *v += 5.0);
        let p = whitening_from_data(&shifted, 0.0, true).unwrap();
        let out = p.forward(&shifted).unwrap();
        let mean: f64 = out.as_slice().iter().sum::<f64>() / out.as_slice().len() as f64;
        assert!(mean.abs() < 1e-10);
        assert!(max_abs_diff(&p.inverse(&out).unwrap(), &shifted) < 1e-10);
    }

    #[test]
    fn identity_and_pushforward_basics() {
        let x = standard_normal(2, 20, 0, "i");
        let id = Preconditioner::Identity { dim: 2 };
        let lp = LabeledPoints::unlabeled(x.clone(), 0, "t");
        assert_eq!(precondition_dataset(&id, &lp).unwrap(), lp);

        let zero = TrainedField::init(
            MlpArch::new(vec![3, 10, 10, 2], Activation::Tanh).unwrap(),
            2,
            crate::flowmatch::Schedule::Linear,
            0,
        )
        .unwrap();
        let mut zero = zero;
        zero.model.params.iter_mut().for_each(|p| *p = 0.0);
        let p = flow_pushforward_precond(zero, 100).unwrap();
        assert_eq!(p.forward(&x).unwrap(), x);
        assert!(p.log_det(&x).unwrap().is_none());

        let field = TrainedField::init(
            MlpArch::new(vec![3, 10, 10, 2], Activation::Tanh).unwrap(),
            2,
            crate::flowmatch::Schedule::Linear,
            4,
        )
        .unwrap();
        assert!(field.param_count() <= LOW_CAPACITY_MAX_PARAMS);
        let p = flow_pushforward_precond(field, 100).unwrap();
        let y = p.forward(&x).unwrap();
        assert!(max_abs_diff(&p.inverse(&y).unwrap(), &x) < 1e-3);
    }

    #[test]
    fn dataset_reports_bad_indices() {
        let spec = CouplingSpec {
            n_layers: 2,
            hidden: vec![2],
            ..CouplingSpec::default()
        };
        let mut f = CouplingFlow::zeros(2, spec, 0).unwrap();
        let bias = f.layers[0].scale_offset + f.scale_arch[0].param_count() - 1;
        f.params[bias] = 1.0;
        let p = Preconditioner::NormalizingFlow(f);
        let pts = PointCloud::from_rows(&[[0.0, 1.0], [0.0, f64::MAX], [1.0, 1.0]]).unwrap();
        let lp = LabeledPoints::unlabeled(pts, 0, "t");
        match precondition_dataset(&p, &lp) {
            Err(Error::NonFinitePoints { indices }) => assert_eq!(indices, vec![1]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn records_round_trip() {
        let pts = gaussian_sample(&SpectralMatrix::diagonal(&[2.0, 5.0]).unwrap(), 500, 1)
            .unwrap()
            .points;
        let field = TrainedField::init(
            MlpArch::new(vec![3, 6, 2], Activation::Tanh).unwrap(),
            2,
            crate::flowmatch::Schedule::Linear,
            4,
        )
        .unwrap();
        let all = [
            Preconditioner::Identity { dim: 2 },
            whitening_from_data(&pts, 1e-6, true).unwrap(),
            Preconditioner::NormalizingFlow(random_flow(2, 1)),
            flow_pushforward_precond(field, 20).unwrap(),
        ];
        for p in &all {
            let json = serde_json::to_string(&p.to_record()).unwrap();
            assert!(json.contains("\"format_version\":1"));
            let back = Preconditioner::from_record(&serde_json::from_str(&json).unwrap()).unwrap();
            assert_eq!(back.kind(), p.kind());
            assert_eq!(back.forward(&pts).unwrap(), p.forward(&pts).unwrap());
        }
    }
}

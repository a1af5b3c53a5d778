//! One preconditioned flow-matching pipeline: fit `P` on the training set,
//! train the main field on `P(x1)`, sample through `P⁻¹`.

use pfm_core::data::{
    checkerboard, gaussian_sample, gmm_sample, standard_normal, swiss_roll, PointSource, StandardNormalSource,
};
use pfm_core::flowmatch::{
    cfm_train, cfm_train_from, integrate_backward, integrate_forward, FieldCheckpoint, Schedule, TrainedField,
};
use pfm_core::metrics::{empirical_condition_trajectory, mmd_rbf, sliced_distance, Bandwidths};
use pfm_core::precond::{
    flow_pushforward_precond, nf_train, precondition_points, whitening_from_data, Preconditioner, PreconditionerRecord,
};
use pfm_core::rng::derive_seed;
use pfm_core::PointCloud;

use crate::config::{ModelSpec, Plan, PrecondSpec, SourceSpec, Target};
use crate::error::{Result, Stage};

/// Sampled sets shared by every method of one seed.
#[derive(Debug, Clone)]
pub struct SeedData {
    pub seed: u64,
    /// Fixed training set, resampled for minibatches.
    pub train: PointCloud,
    /// Held-out target samples.
    pub truth: PointCloud,
    /// Held-out base samples, the `z` of both evaluation directions.
    pub base_eval: PointCloud,
    /// Fixed base training set when the base is not a standard normal.
    pub base_train: Option<PointCloud>,
}

pub fn sample_target(target: &Target, n: usize, seed: u64) -> pfm_core::Result<PointCloud> {
    Ok(match target {
        Target::Gaussian(g) => gaussian_sample(g.h(), n, seed)?.points,
        Target::Gmm(g) => gmm_sample(g, n, seed)?.points,
        Target::SwissRoll { noise } => swiss_roll(n, *noise, seed)?.points,
        Target::Checkerboard => checkerboard(n, seed)?.points,
    })
}

fn sample_source(source: SourceSpec, dim: usize, n: usize, seed: u64) -> pfm_core::Result<PointCloud> {
    Ok(match source {
        SourceSpec::StandardNormal => standard_normal(dim, n, seed, "base"),
        SourceSpec::Checkerboard => checkerboard(n, seed)?.points,
    })
}

pub fn seed_data(plan: &Plan, seed: u64) -> Result<SeedData> {
    let target = plan.target.as_ref().expect("validated plan has a target");
    let e = &plan.config.eval;
    let train = sample_target(target, e.n_train, derive_seed(seed, "data.train")).stage("sampling training set")?;
    let truth = sample_target(target, e.n_eval, derive_seed(seed, "data.eval")).stage("sampling evaluation set")?;
    let base_eval =
        sample_source(plan.source, plan.dim, e.n_eval, derive_seed(seed, "base.eval")).stage("sampling base")?;
    let base_train = match plan.source {
        SourceSpec::StandardNormal => None,
        s => Some(sample_source(s, plan.dim, e.n_train, derive_seed(seed, "base.train")).stage("sampling base")?),
    };
    Ok(SeedData {
        seed,
        train,
        truth,
        base_eval,
        base_train,
    })
}

/// Fits the preconditioner described by `spec` to `train`.
pub fn fit_preconditioner(
    spec: &PrecondSpec,
    train: &PointCloud,
    schedule: Schedule,
    seed: u64,
) -> Result<Preconditioner> {
    let stage = format!("{}: fitting preconditioner", spec.label());
    match spec {
        PrecondSpec::None { .. } => Ok(Preconditioner::Identity { dim: train.dim() }),
        PrecondSpec::Whitening { ridge, centered, .. } => whitening_from_data(train, *ridge, *centered).stage(stage),
        PrecondSpec::NormalizingFlow { coupling, hyper, .. } => {
            let flow = nf_train(
                train,
                coupling.clone(),
                hyper.with_seed(derive_seed(seed, "precond.nf")),
            )
            .stage(stage)?;
            Ok(Preconditioner::NormalizingFlow(flow))
        }
        PrecondSpec::FlowPushforward {
            hidden,
            activation,
            n_steps,
            hyper,
            ..
        } => {
            let arch = ModelSpec {
                hidden: hidden.clone(),
                activation: *activation,
            }
            .arch(train.dim())?;
            let field =
                cfm_train(train, schedule, arch, hyper.with_seed(derive_seed(seed, "precond.lc"))).stage(&stage)?;
            flow_pushforward_precond(field, *n_steps).stage(stage)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Direction {
    /// Generated samples against held-out data.
    ZToX1,
    /// Data pushed back through the model against held-out base samples.
    X1ToZ,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::ZToX1 => "z_to_x1",
            Direction::X1ToZ => "x1_to_z",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "z_to_x1" => Some(Direction::ZToX1),
            "x1_to_z" => Some(Direction::X1ToZ),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinalMetric {
    /// `mmd` or `sliced_w2`.
    pub metric: &'static str,
    pub direction: Direction,
    pub value: f64,
}

/// Everything one method produced for one seed.
#[derive(Debug, Clone)]
pub struct MethodRun {
    pub label: String,
    pub kind: &'static str,
    pub seed: u64,
    /// `(step, minibatch loss)` for every optimizer step.
    pub loss_log: Vec<(usize, f64)>,
    /// `(step, MMD)` including the untrained field at step 0.
    pub mmd_curve: Vec<(usize, f64)>,
    pub metrics: Vec<FinalMetric>,
    /// Empirical `κ(Σ_t)` of the preconditioned interpolants.
    pub kappa_hat: Vec<(f64, f64)>,
    pub precond: PreconditionerRecord,
    pub field: FieldCheckpoint,
}

impl MethodRun {
    pub fn metric(&self, metric: &str, direction: Direction) -> Option<f64> {
        self.metrics
            .iter()
            .find(|m| m.metric == metric && m.direction == direction)
            .map(|m| m.value)
    }

    pub fn final_mmd(&self) -> f64 {
        self.metric("mmd", Direction::ZToX1).expect("always recorded")
    }
}

/// `κ̂(t)` of `P(x1)` interpolants on the configured grid.
pub fn preconditioned_kappa(plan: &Plan, p_train: &PointCloud, seed: u64) -> pfm_core::Result<Vec<(f64, f64)>> {
    let e = &plan.config.eval;
    empirical_condition_trajectory(
        p_train,
        plan.config.schedule,
        &e.kappa_grid,
        e.kappa_pairs,
        derive_seed(seed, "eval.kappa"),
    )
}

/// Fits `spec`, trains the main field on the preconditioned data and
/// evaluates it in both directions.
pub fn run_method(plan: &Plan, spec: &PrecondSpec, data: &SeedData, log: &dyn Fn(&str)) -> Result<MethodRun> {
    let cfg = &plan.config;
    let e = &cfg.eval;
    let label = spec.label();
    let seed = data.seed;
    log(&format!("[seed {seed}] {label}: fitting preconditioner"));
    let p = fit_preconditioner(spec, &data.train, cfg.schedule, seed)?;
    let p_train = precondition_points(&p, &data.train).stage(format!("{label}: preconditioning"))?;
    let kappa_hat = preconditioned_kappa(plan, &p_train, seed).stage(format!("{label}: kappa diagnostic"))?;

    let standard = StandardNormalSource { dim: plan.dim };
    let base: &dyn PointSource = match &data.base_train {
        Some(b) => b,
        None => &standard,
    };
    let z_curve = data.base_eval.head(e.curve_points);
    let truth_curve = data.truth.head(e.curve_points);
    let curve_opts = e.curve_integration.options();
    let bandwidths = Bandwidths::default();
    let hyper = cfg.hyper.with_seed(seed);
    let curve_mmd = |field: &TrainedField| -> pfm_core::Result<f64> {
        let gen = p.inverse(&integrate_forward(field, &z_curve, curve_opts)?.x_end)?;
        Ok(mmd_rbf(&gen, &truth_curve, &bandwidths)?.value)
    };

    let initial =
        TrainedField::init(plan.arch.clone(), plan.dim, cfg.schedule, seed).stage(format!("{label}: init"))?;
    let mut mmd_curve = vec![(0, curve_mmd(&initial).stage(format!("{label}: mmd curve"))?)];
    log(&format!(
        "[seed {seed}] {label}: training main field for {} steps",
        hyper.steps
    ));
    let field = cfm_train_from(base, &p_train, cfg.schedule, plan.arch.clone(), hyper, |step, field| {
        if step % e.curve_every == 0 || step == hyper.steps {
            mmd_curve.push((step, curve_mmd(field)?));
        }
        Ok(())
    })
    .stage(format!("{label}: main field training"))?;

    let opts = e.integration.options();
    let eval_stage = format!("{label}: evaluation");
    let gen = p
        .inverse(
            &integrate_forward(&field, &data.base_eval, opts)
                .stage(&eval_stage)?
                .x_end,
        )
        .stage(&eval_stage)?;
    let pushed = integrate_backward(&field, &p.forward(&data.truth).stage(&eval_stage)?, opts)
        .stage(&eval_stage)?
        .x_end;
    let sliced_seed = derive_seed(seed, "eval.sliced");
    let mut metrics = Vec::new();
    for (direction, x, y) in [
        (Direction::ZToX1, &gen, &data.truth),
        (Direction::X1ToZ, &pushed, &data.base_eval),
    ] {
        metrics.push(FinalMetric {
            metric: "mmd",
            direction,
            value: mmd_rbf(x, y, &bandwidths).stage(&eval_stage)?.value,
        });
        metrics.push(FinalMetric {
            metric: "sliced_w2",
            direction,
            value: sliced_distance(x, y, e.projections, sliced_seed)
                .stage(&eval_stage)?
                .value,
        });
    }
    log(&format!(
        "[seed {seed}] {label}: final mmd {:.4e}, sliced z->x1 {:.4e}",
        metrics[0].value, metrics[1].value
    ));
    Ok(MethodRun {
        label,
        kind: spec.kind_name(),
        seed,
        loss_log: field.train_log.clone(),
        mmd_curve,
        metrics,
        kappa_hat,
        precond: p.to_record(),
        field: field.checkpoint(),
    })
}

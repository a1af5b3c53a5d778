//! The seven experiments and the tables each one emits.

use std::collections::BTreeMap;

use pfm_core::analytic::{theorem1_experiment, GaussianTransport, Theorem1Result};
use pfm_core::gmm::{slowest_mode, smallest_sigma_mode, whitened_optimal_matrix, ZeroMeanGmm};
use pfm_core::linalg::{Mat, SpectralMatrix};
use pfm_core::precond::precondition_points;
use pfm_core::rng::derive_seed;

use crate::config::{ExperimentKind, Plan, Target};
use crate::error::{Result, Stage};
use crate::output::{mean_std, Cell, OutputDir, Table};
use crate::pipeline::{fit_preconditioner, preconditioned_kappa, run_method, sample_target, seed_data, MethodRun};

/// `(method label, seed, [(t, κ̂)])`.
pub type KappaRun = (String, u64, Vec<(f64, f64)>);
/// `(step, mean, std across seeds, n_seeds)`; std is absent for one seed.
pub type CurvePoint = (usize, f64, Option<f64>, usize);

/// In-memory results, mirroring what was written to disk.
#[derive(Debug, Clone)]
pub enum ExperimentResults {
    GaussianAnalytic(GaussianAnalyticResults),
    Theorem1(Vec<Theorem1Result>),
    GmmBottleneck(GmmBottleneckResults),
    Pipelines(Vec<MethodRun>),
    KappaDiagnostic(KappaDiagnosticResults),
}

#[derive(Debug, Clone)]
pub struct GaussianAnalyticResults {
    /// `(t, κ(Σ_t))` on the analytic grid.
    pub kappa: Vec<(f64, f64)>,
    pub sgd: Vec<SgdSeedResult>,
}

#[derive(Debug, Clone)]
pub struct SgdSeedResult {
    pub seed: u64,
    pub sigma: Vec<f64>,
    pub steady_state_variance: Vec<f64>,
    /// `Var(e_i) σ_i / η` per mode.
    pub normalized_variance: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct GmmBottleneckResults {
    /// `(t, component, κ, κ after whitening)`.
    pub conditioning: Vec<(f64, usize, f64, f64)>,
    /// Largest deviation of any whitened component's optimal matrix from
    /// the closed form, over the grid.
    pub whitened_matrix_deviation: f64,
    pub slowest_plain: Option<(usize, usize)>,
    pub smallest_sigma: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct KappaDiagnosticResults {
    /// `(method, seed, [(t, κ̂)])`.
    pub runs: Vec<KappaRun>,
    /// Closed-form `κ(Σ_t)` on the grid for Gaussian targets.
    pub analytic: Option<Vec<(f64, f64)>>,
}

pub fn execute(plan: &Plan, out: &mut OutputDir, log: &dyn Fn(&str)) -> Result<ExperimentResults> {
    match plan.config.experiment {
        ExperimentKind::GaussianAnalytic => gaussian_analytic(plan, out, log).map(ExperimentResults::GaussianAnalytic),
        ExperimentKind::Theorem1 => theorem1(plan, out).map(ExperimentResults::Theorem1),
        ExperimentKind::GmmBottleneck => gmm_bottleneck(plan, out).map(ExperimentResults::GmmBottleneck),
        ExperimentKind::Fm2d | ExperimentKind::PrecondCompare | ExperimentKind::CheckerboardSwissroll => {
            pipelines(plan, out, log).map(ExperimentResults::Pipelines)
        }
        ExperimentKind::KappaDiagnostic => kappa_diagnostic(plan, out, log).map(ExperimentResults::KappaDiagnostic),
    }
}

fn gaussian_target(plan: &Plan) -> &GaussianTransport {
    match &plan.target {
        Some(Target::Gaussian(g)) => g,
        _ => unreachable!("validated plan has a gaussian target"),
    }
}

fn gaussian_analytic(plan: &Plan, out: &mut OutputDir, log: &dyn Fn(&str)) -> Result<GaussianAnalyticResults> {
    let g = gaussian_target(plan);
    let a = &plan.config.analytic;
    let d = g.dim();
    let white = GaussianTransport::new(SpectralMatrix::identity(d)).stage("whitened model")?;

    let mut header = vec!["t".to_string(), "kappa".into(), "kappa_whitened".into()];
    header.extend((0..d).map(|i| format!("sigma_{i}")));
    header.extend(["eta", "rho", "predicted_k", "predicted_k_approx"].map(String::from));
    let mut traj = Table::new(&header);
    let mut kappa = Vec::new();
    for &t in &a.t_grid {
        let sig = g.sigma_eigvals(t).stage("sigma spectrum")?;
        let (_, k) = g.condition_trajectory(&[t]).stage("condition number")?[0];
        let (_, kw) = white.condition_trajectory(&[t]).stage("condition number")?[0];
        let eta = a.step_rule.eta(sig[d - 1]);
        let est = g.predicted_gd_iterations(t, eta, a.eps).stage("iteration prediction")?;
        kappa.push((t, k));
        let mut row: Vec<Cell> = vec![t.into(), k.into(), kw.into()];
        row.extend(sig.iter().map(|&s| Cell::Num(s)));
        row.extend([eta.into(), est.rho.into(), est.exact.into(), est.approx.into()]);
        traj.push(row);
    }
    out.write_table("kappa_trajectory.csv", &traj)?;

    let mut ellipses = Table::new(&["t", "row", "col", "value"]);
    for &t in &a.t_grid {
        let s = g.sigma_t(t).stage("sigma_t")?.reconstruct();
        for i in 0..d {
            for j in 0..d {
                ellipses.push(vec![t.into(), i.into(), j.into(), s[(i, j)].into()]);
            }
        }
    }
    out.write_table("sigma_t_entries.csv", &ellipses)?;

    let sig = g.sigma_eigvals(a.gd_t).stage("sigma spectrum")?;
    let eta = a.step_rule.eta(sig[d - 1]);
    let trace = g
        .gd_simulate(a.gd_t, eta, a.gd_steps, &Mat::zeros(d, d))
        .stage("gradient descent")?;
    let rho = trace.contraction_factors();
    let mut header = vec!["step".to_string()];
    header.extend((0..d).map(|i| format!("error_mode_{i}")));
    header.extend((0..d).map(|i| format!("predicted_mode_{i}")));
    let mut decay = Table::new(&header);
    for k in 0..=a.gd_steps {
        let mut row: Vec<Cell> = vec![k.into()];
        row.extend(trace.per_mode_errors.iter().map(|e| Cell::Num(e[k])));
        row.extend((0..d).map(|i| Cell::Num(trace.per_mode_errors[i][0] * rho[i].powi(k as i32))));
        decay.push(row);
    }
    out.write_table("gd_decay.csv", &decay)?;

    if d == 2 {
        let mut fields = Table::new(&["t", "x0", "x1", "score_0", "score_1", "velocity_0", "velocity_1"]);
        for t in [0.5, a.gd_t] {
            let a_star = g.optimal_velocity_matrix(t).stage("optimal velocity")?;
            for i in 0..=10 {
                for j in 0..=10 {
                    let x = [-3.0 + 0.6 * i as f64, -3.0 + 0.6 * j as f64];
                    let s = g.analytic_score(t, &x).stage("score")?;
                    let v = &a_star * pfm_core::linalg::Vector::from_column_slice(&x);
                    fields.push(vec![
                        t.into(),
                        x[0].into(),
                        x[1].into(),
                        s[0].into(),
                        s[1].into(),
                        v[0].into(),
                        v[1].into(),
                    ]);
                }
            }
        }
        out.write_table("fields.csv", &fields)?;
    }

    let sgd_sigma = g.sigma_eigvals(a.sgd.t).stage("sigma spectrum")?;
    let sgd_eta = a.sgd.eta_fraction / sgd_sigma[d - 1];
    let mut sgd = Vec::new();
    for &seed in &plan.config.seeds {
        log(&format!("[seed {seed}] sgd: {} steps at t = {}", a.sgd.steps, a.sgd.t));
        let tr = g
            .sgd_simulate(a.sgd.t, sgd_eta, a.sgd.steps, seed)
            .stage(format!("sgd seed {seed}"))?;
        let res = SgdSeedResult {
            seed,
            sigma: tr.sigma_eigvals.clone(),
            steady_state_variance: tr.steady_state_variance(),
            normalized_variance: tr.normalized_variance(),
        };
        let mut t = Table::new(&["mode", "sigma", "eta", "steady_state_variance", "normalized_variance"]);
        for i in 0..d {
            t.push(vec![
                i.into(),
                res.sigma[i].into(),
                sgd_eta.into(),
                res.steady_state_variance[i].into(),
                res.normalized_variance[i].into(),
            ]);
        }
        out.write_table(&format!("sgd_seed{seed}.csv"), &t)?;
        sgd.push(res);
    }
    let mut summary = Table::new(&["mode", "sigma", "mean_normalized_variance", "std", "n_seeds"]);
    for i in 0..d {
        let vals: Vec<f64> = sgd.iter().map(|r| r.normalized_variance[i]).collect();
        let (m, s) = mean_std(&vals);
        summary.push(vec![
            i.into(),
            sgd_sigma[i].into(),
            m.into(),
            s.into(),
            vals.len().into(),
        ]);
    }
    out.write_table("sgd_summary.csv", &summary)?;
    Ok(GaussianAnalyticResults { kappa, sgd })
}

/// Log-spaced spectrum from 1 to `kappa`.
pub fn spread_spectrum(kappa: f64, dim: usize) -> Vec<f64> {
    if dim == 1 {
        return vec![1.0];
    }
    (0..dim).map(|i| kappa.powf(i as f64 / (dim - 1) as f64)).collect()
}

fn theorem1(plan: &Plan, out: &mut OutputDir) -> Result<Vec<Theorem1Result>> {
    let a = &plan.config.analytic;
    let mut table = Table::new(&[
        "kappa",
        "dim",
        "eta_plain",
        "eta_whitened",
        "k_plain",
        "k_whitened",
        "plain_converged",
        "whitened_converged",
        "k_plain_per_kappa",
    ]);
    let mut results = Vec::new();
    for &kappa in &a.kappas {
        let sigma = SpectralMatrix::diagonal(&spread_spectrum(kappa, a.dim)).stage("theorem1 covariance")?;
        let r = theorem1_experiment(&sigma, a.step_rule, a.eps).stage(format!("theorem1 at kappa {kappa}"))?;
        table.push(vec![
            r.kappa.into(),
            a.dim.into(),
            r.eta_plain.into(),
            r.eta_whitened.into(),
            r.k_plain.into(),
            r.k_whitened.into(),
            r.plain_converged.into(),
            r.whitened_converged.into(),
            (r.k_plain as f64 / r.kappa).into(),
        ]);
        results.push(r);
    }
    out.write_table("theorem1.csv", &table)?;
    Ok(results)
}

fn gmm_bottleneck(plan: &Plan, out: &mut OutputDir) -> Result<GmmBottleneckResults> {
    let gmm: &ZeroMeanGmm = match &plan.target {
        Some(Target::Gmm(g)) => g,
        _ => unreachable!("validated plan has a gmm target"),
    };
    let a = &plan.config.analytic;
    let d = gmm.dim();
    let white = gmm.whitening_transforms().stage("gmm whitening")?.whitened;

    let mut cond = Table::new(&["t", "component", "kappa", "kappa_whitened", "whitened_matrix_deviation"]);
    let mut conditioning = Vec::new();
    let mut worst_dev: f64 = 0.0;
    for &t in &a.t_grid {
        let k_plain = gmm.component_condition_numbers(t).stage("gmm conditioning")?;
        let k_white = white.component_condition_numbers(t).stage("gmm conditioning")?;
        let closed = whitened_optimal_matrix(d, t).stage("whitened optimum")?;
        for k in 0..gmm.n_components() {
            let m = white.component_optimal_matrix(k, t).stage("whitened optimum")?;
            let dev = (&m - &closed).abs().max();
            worst_dev = worst_dev.max(dev);
            cond.push(vec![
                t.into(),
                k.into(),
                k_plain[k].into(),
                k_white[k].into(),
                dev.into(),
            ]);
            conditioning.push((t, k, k_plain[k], k_white[k]));
        }
    }
    out.write_table("gmm_conditioning.csv", &cond)?;

    let t = a.gd_t;
    let sigma_max = (0..gmm.n_components())
        .map(|k| gmm.component_sigma_t(k, t).map(|s| s.max_eig()))
        .collect::<pfm_core::Result<Vec<_>>>()
        .stage("gmm spectrum")?
        .into_iter()
        .fold(0.0, f64::max);
    let eta_plain = a.step_rule.eta(sigma_max);
    let eta_white = a.step_rule.eta(pfm_core::analytic::sigma_eigenvalue(1.0, t));
    let plain = gmm
        .gated_gd_simulate(t, eta_plain, a.gd_steps, false)
        .stage("gated gradient descent")?;
    let whitened = gmm
        .gated_gd_simulate(t, eta_white, a.gd_steps, true)
        .stage("gated gradient descent")?;

    let mut modes = Table::new(&[
        "variant",
        "component",
        "mode",
        "sigma",
        "contraction",
        "final_error",
        "eta",
    ]);
    for (variant, traces, eta) in [("plain", &plain, eta_plain), ("whitened", &whitened, eta_white)] {
        for (k, tr) in traces.iter().enumerate() {
            for (i, rho) in tr.contraction_factors().into_iter().enumerate() {
                let last = *tr.per_mode_errors[i].last().expect("nonempty trace");
                modes.push(vec![
                    variant.into(),
                    k.into(),
                    i.into(),
                    tr.sigma_eigvals[i].into(),
                    rho.into(),
                    last.abs().into(),
                    eta.into(),
                ]);
            }
        }
    }
    out.write_table("gmm_gd_modes.csv", &modes)?;

    let mut header = vec!["step".to_string()];
    for variant in ["plain", "whitened"] {
        header.extend((0..gmm.n_components()).map(|k| format!("{variant}_component_{k}")));
    }
    let mut decay = Table::new(&header);
    for step in 0..=a.gd_steps {
        let mut row: Vec<Cell> = vec![step.into()];
        row.extend(
            plain
                .iter()
                .chain(&whitened)
                .map(|tr| Cell::Num(tr.frobenius_errors[step])),
        );
        decay.push(row);
    }
    out.write_table("gmm_gd_decay.csv", &decay)?;

    let slowest_plain = slowest_mode(&plain);
    let smallest_sigma = smallest_sigma_mode(gmm, t).stage("gmm spectrum")?;
    let mut summary = Table::new(&["variant", "slowest_component", "slowest_mode", "steps_to_eps"]);
    for (variant, traces) in [("plain", &plain), ("whitened", &whitened)] {
        let slow = slowest_mode(traces);
        let reach = traces
            .iter()
            .map(|tr| {
                let target = a.eps * tr.frobenius_errors[0];
                tr.frobenius_errors.iter().position(|&e| e <= target)
            })
            .collect::<Option<Vec<_>>>()
            .map(|v| v.into_iter().max().unwrap_or(0));
        summary.push(vec![
            variant.into(),
            slow.map_or(Cell::Empty, |s| s.0.into()),
            slow.map_or(Cell::Empty, |s| s.1.into()),
            reach.map_or(Cell::Empty, Cell::from),
        ]);
    }
    out.write_table("gmm_summary.csv", &summary)?;
    Ok(GmmBottleneckResults {
        conditioning,
        whitened_matrix_deviation: worst_dev,
        slowest_plain,
        smallest_sigma,
    })
}

fn analytic_kappa(plan: &Plan) -> Result<Option<Vec<(f64, f64)>>> {
    match &plan.target {
        Some(Target::Gaussian(g)) => Ok(Some(
            g.condition_trajectory(&plan.config.eval.kappa_grid)
                .stage("condition number")?,
        )),
        _ => Ok(None),
    }
}

fn kappa_table(runs: &[KappaRun], analytic: Option<&Vec<(f64, f64)>>) -> (Table, Table) {
    let mut per_seed = Table::new(&["method", "seed", "t", "kappa_hat"]);
    let mut grouped: BTreeMap<(usize, usize), (String, f64, Vec<f64>)> = BTreeMap::new();
    let order: Vec<String> = runs.iter().fold(Vec::new(), |mut acc, (m, _, _)| {
        if !acc.contains(m) {
            acc.push(m.clone());
        }
        acc
    });
    for (method, seed, traj) in runs {
        let mi = order.iter().position(|m| m == method).expect("listed");
        for (ti, &(t, k)) in traj.iter().enumerate() {
            per_seed.push(vec![method.as_str().into(), (*seed).into(), t.into(), k.into()]);
            grouped
                .entry((mi, ti))
                .or_insert_with(|| (method.clone(), t, Vec::new()))
                .2
                .push(k);
        }
    }
    let mut summary = Table::new(&["method", "t", "mean", "std", "n_seeds", "kappa_analytic"]);
    for ((_, ti), (method, t, vals)) in grouped {
        let (m, s) = mean_std(&vals);
        let exact = analytic.map(|a| a[ti].1);
        summary.push(vec![
            method.into(),
            t.into(),
            m.into(),
            s.into(),
            vals.len().into(),
            exact.into(),
        ]);
    }
    (per_seed, summary)
}

fn kappa_diagnostic(plan: &Plan, out: &mut OutputDir, log: &dyn Fn(&str)) -> Result<KappaDiagnosticResults> {
    let cfg = &plan.config;
    let target = plan.target.as_ref().expect("validated plan has a target");
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let train =
            sample_target(target, cfg.eval.n_train, derive_seed(seed, "data.train")).stage("sampling training set")?;
        for spec in &plan.methods {
            let label = spec.label();
            log(&format!("[seed {seed}] {label}: fitting preconditioner"));
            let p = fit_preconditioner(spec, &train, cfg.schedule, seed)?;
            let pt = precondition_points(&p, &train).stage(format!("{label}: preconditioning"))?;
            let traj = preconditioned_kappa(plan, &pt, seed).stage(format!("{label}: kappa diagnostic"))?;
            if cfg.eval.save_checkpoints {
                out.write_json(&format!("precond_{label}_seed{seed}.json"), &p.to_record())?;
            }
            runs.push((label, seed, traj));
        }
    }
    let analytic = analytic_kappa(plan)?;
    let (per_seed, summary) = kappa_table(&runs, analytic.as_ref());
    out.write_table("kappa_hat.csv", &per_seed)?;
    out.write_table("kappa_hat_summary.csv", &summary)?;
    Ok(KappaDiagnosticResults { runs, analytic })
}

/// Improvement of an MMD curve over its last quarter relative to its
/// total improvement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plateau {
    pub initial: f64,
    pub at_three_quarters: f64,
    pub last: f64,
    /// `(at_three_quarters - last) / (initial - last)`; `None` when the
    /// curve did not improve at all.
    pub late_fraction: Option<f64>,
}

/// Reads the curve at step 0, at the first recorded step at or after
/// three quarters of `total_steps`, and at the end.
pub fn plateau(curve: &[(usize, f64)], total_steps: usize) -> Option<Plateau> {
    let initial = curve.first()?.1;
    let last = curve.last()?.1;
    let cut = (3 * total_steps).div_ceil(4);
    let at_three_quarters = curve.iter().find(|(s, _)| *s >= cut)?.1;
    let total = initial - last;
    Some(Plateau {
        initial,
        at_three_quarters,
        last,
        late_fraction: (total > 0.0).then(|| (at_three_quarters - last) / total),
    })
}

/// Seed-mean curve per method, keyed by method in run order.
pub fn mean_curves(runs: &[MethodRun]) -> Vec<(String, Vec<CurvePoint>)> {
    let mut out: Vec<(String, Vec<CurvePoint>)> = Vec::new();
    for label in method_order(runs) {
        let curves: Vec<&Vec<(usize, f64)>> = runs.iter().filter(|r| r.label == label).map(|r| &r.mmd_curve).collect();
        let steps: Vec<usize> = curves[0].iter().map(|p| p.0).collect();
        let rows = steps
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let vals: Vec<f64> = curves.iter().map(|c| c[i].1).collect();
                let (m, sd) = mean_std(&vals);
                (s, m, sd, vals.len())
            })
            .collect();
        out.push((label, rows));
    }
    out
}

fn method_order(runs: &[MethodRun]) -> Vec<String> {
    let mut order: Vec<String> = Vec::new();
    for r in runs {
        if !order.contains(&r.label) {
            order.push(r.label.clone());
        }
    }
    order
}

fn pipelines(plan: &Plan, out: &mut OutputDir, log: &dyn Fn(&str)) -> Result<Vec<MethodRun>> {
    let cfg = &plan.config;
    let e = &cfg.eval;
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let data = seed_data(plan, seed)?;
        let mut metrics = Table::new(&["method", "metric", "direction", "value"]);
        for spec in &plan.methods {
            let r = run_method(plan, spec, &data, log)?;
            let label = &r.label;
            let mut loss = Table::new(&["step", "loss"]);
            for &(step, l) in &r.loss_log {
                if step % e.loss_every == 0 || step == r.loss_log.len() {
                    loss.push(vec![step.into(), l.into()]);
                }
            }
            out.write_table(&format!("loss_{label}_seed{seed}.csv"), &loss)?;
            let mut curve = Table::new(&["step", "mmd"]);
            for &(step, v) in &r.mmd_curve {
                curve.push(vec![step.into(), v.into()]);
            }
            out.write_table(&format!("mmd_curve_{label}_seed{seed}.csv"), &curve)?;
            for m in &r.metrics {
                metrics.push(vec![
                    label.as_str().into(),
                    m.metric.into(),
                    m.direction.as_str().into(),
                    m.value.into(),
                ]);
            }
            if e.save_checkpoints {
                out.write_json(&format!("field_{label}_seed{seed}.json"), &r.field)?;
                out.write_json(&format!("precond_{label}_seed{seed}.json"), &r.precond)?;
            }
            runs.push(r);
        }
        out.write_table(&format!("metrics_seed{seed}.csv"), &metrics)?;
    }
    write_pipeline_summaries(plan, &runs, out)?;
    Ok(runs)
}

fn write_pipeline_summaries(plan: &Plan, runs: &[MethodRun], out: &mut OutputDir) -> Result<()> {
    let order = method_order(runs);

    let mut summary = Table::new(&["method", "metric", "direction", "mean", "std", "n_seeds"]);
    for label in &order {
        let first = runs.iter().find(|r| &r.label == label).expect("listed");
        for m in &first.metrics {
            let vals: Vec<f64> = runs
                .iter()
                .filter(|r| &r.label == label)
                .filter_map(|r| r.metric(m.metric, m.direction))
                .collect();
            let (mean, sd) = mean_std(&vals);
            summary.push(vec![
                label.as_str().into(),
                m.metric.into(),
                m.direction.as_str().into(),
                mean.into(),
                sd.into(),
                vals.len().into(),
            ]);
        }
    }
    out.write_table("metrics_summary.csv", &summary)?;

    let curves = mean_curves(runs);
    let mut curve_table = Table::new(&["method", "step", "mean", "std", "n_seeds"]);
    let mut plateau_table = Table::new(&["method", "initial", "at_three_quarters", "final", "late_fraction"]);
    for (label, rows) in &curves {
        for &(s, m, sd, n) in rows {
            curve_table.push(vec![label.as_str().into(), s.into(), m.into(), sd.into(), n.into()]);
        }
        let mean_curve: Vec<(usize, f64)> = rows.iter().map(|r| (r.0, r.1)).collect();
        if let Some(p) = plateau(&mean_curve, plan.config.hyper.steps) {
            plateau_table.push(vec![
                label.as_str().into(),
                p.initial.into(),
                p.at_three_quarters.into(),
                p.last.into(),
                p.late_fraction.into(),
            ]);
        }
    }
    out.write_table("mmd_curve_summary.csv", &curve_table)?;
    out.write_table("plateau.csv", &plateau_table)?;

    let kappa_runs: Vec<KappaRun> = runs
        .iter()
        .map(|r| (r.label.clone(), r.seed, r.kappa_hat.clone()))
        .collect();
    let analytic = analytic_kappa(plan)?;
    let (per_seed, ksum) = kappa_table(&kappa_runs, analytic.as_ref());
    out.write_table("kappa_hat.csv", &per_seed)?;
    out.write_table("kappa_hat_summary.csv", &ksum)?;
    Ok(())
}

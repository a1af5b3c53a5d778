//! Acceptance suite. Prints one PASS/FAIL line per criterion with its
//! wall time and exits nonzero when any criterion fails.
//!
//! Criteria 8, 9 and 10 run the shipped configs under `configs/`.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use pfm_core::analytic::{theorem1_experiment, GaussianTransport, StepRule};
use pfm_core::autodiff::{finite_difference_grad, max_relative_error, Activation, Mlp, MlpArch, Tensor};
use pfm_core::data::standard_normal;
use pfm_core::flowmatch::{cfm_batch, cfm_loss_and_grad, Schedule};
use pfm_core::gmm::{whitened_optimal_matrix, ZeroMeanGmm};
use pfm_core::linalg::{frobenius_diff, Mat, SpectralMatrix};
use pfm_core::precond::{CouplingFlow, CouplingSpec};
use pfm_core::rng;
use pfm_lab::compare::REFERENCE_SLICED_W2;
use pfm_lab::experiments::{mean_curves, plateau, spread_spectrum, ExperimentResults};
use pfm_lab::pipeline::{Direction, MethodRun};
use pfm_lab::{ExperimentConfig, Manifest};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

type Check = fn() -> Outcome;

fn main() {
    let criteria: [(&str, Duration, Check); 12] = [
        ("analytic consistency", secs(1), analytic_consistency),
        ("gd oracle equivalence", secs(1), gd_oracle),
        ("whitening removes the kappa factor", secs(5), theorem1_scaling),
        ("sgd steady state", secs(30), sgd_steady_state),
        ("gmm whitening", secs(1), gmm_whitening),
        ("gradient correctness", secs(10), gradient_correctness),
        ("change of variables", secs(5), change_of_variables),
        ("whitening lowers final mmd", secs(300), whitening_mmd),
        ("swiss roll sliced ordering", secs(900), swiss_roll_ordering),
        ("kappa diagnostic", secs(60), kappa_diagnostic),
        ("baseline plateau", secs(300), baseline_plateau),
        ("end-to-end determinism", secs(600), determinism),
    ];
    let mut failed = 0;
    for (i, (name, budget, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let out = check();
        let took = start.elapsed();
        let in_budget = took <= *budget;
        let pass = out.pass && in_budget;
        if !pass {
            failed += 1;
        }
        println!(
            "{} criterion {:>2} {name}: {:.2}s of {}s{} | {}",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            took.as_secs_f64(),
            budget.as_secs(),
            if in_budget { "" } else { " (over budget)" },
            out.detail
        );
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

fn t_grid() -> Vec<f64> {
    (1..=9).map(|i| i as f64 / 10.0).collect()
}

/// Random SPD matrix `G Gᵀ + 0.1 I` with standard normal `G`.
fn random_spd(d: usize, seed: u64) -> SpectralMatrix {
    let g = standard_normal(d, d, seed, "acceptance.spd");
    let g = Mat::from_row_slice(d, d, g.as_slice());
    SpectralMatrix::from_symmetric(&(&g * g.transpose() + Mat::identity(d, d) * 0.1)).unwrap()
}

/// `Q diag(spectrum) Qᵀ` with a random orthogonal `Q`.
fn rotated(spectrum: &[f64], seed: u64) -> SpectralMatrix {
    let q = random_spd(spectrum.len(), seed).eigvecs().clone();
    SpectralMatrix::from_symmetric(&(&q * Mat::from_diagonal(&spectrum.to_vec().into()) * q.transpose())).unwrap()
}

fn analytic_consistency() -> Outcome {
    let mut worst: f64 = 0.0;
    for d in [2, 4, 8] {
        for s in 0..20 {
            let g = GaussianTransport::new(random_spd(d, 1000 * d as u64 + s)).unwrap();
            let h = g.h().reconstruct();
            for t in t_grid() {
                let lhs = g.optimal_velocity_matrix(t).unwrap() * g.sigma_t(t).unwrap().reconstruct();
                let rhs = &h * t - Mat::identity(d, d) * (1.0 - t);
                worst = worst.max(frobenius_diff(&lhs, &rhs));
            }
        }
    }
    outcome(
        worst < 1e-10,
        format!("max Frobenius residual {worst:.2e} over 60 matrices x 9 times (tol 1e-10)"),
    )
}

fn gd_oracle() -> Outcome {
    let g = GaussianTransport::new(rotated(&spread_spectrum(100.0, 4), 7)).unwrap();
    let mut worst: f64 = 0.0;
    for t in [0.3, 0.6, 0.9] {
        let sig = g.sigma_eigvals(t).unwrap();
        let eta = StepRule::InverseLipschitz.eta(sig[3]);
        let tr = g.gd_simulate(t, eta, 1000, &Mat::zeros(4, 4)).unwrap();
        for (i, rho) in tr.contraction_factors().into_iter().enumerate() {
            let e = &tr.per_mode_errors[i];
            let scale = e[0].abs().max(1.0);
            for (k, v) in e.iter().enumerate() {
                worst = worst.max((v - e[0] * rho.powi(k as i32)).abs() / scale);
            }
        }
    }
    outcome(
        worst < 1e-12,
        format!("max per-mode deviation {worst:.2e} over 1000 steps, d=4, kappa(H)=100 (tol 1e-12)"),
    )
}

fn theorem1_scaling() -> Outcome {
    let mut plain = Vec::new();
    let mut white = Vec::new();
    for kappa in [10.0, 100.0, 1000.0] {
        let sigma = SpectralMatrix::diagonal(&spread_spectrum(kappa, 2)).unwrap();
        let r = theorem1_experiment(&sigma, StepRule::InverseLipschitz, 1e-6).unwrap();
        plain.push(r.k_plain as f64 / kappa);
        white.push(r.k_whitened);
        if !(r.plain_converged && r.whitened_converged) {
            return outcome(false, format!("did not converge at kappa {kappa}"));
        }
    }
    let spread = plain.iter().copied().fold(0.0, f64::max) / plain.iter().copied().fold(f64::INFINITY, f64::min);
    let w_range = white.iter().max().unwrap() - white.iter().min().unwrap();
    outcome(
        spread <= 2.0 && w_range <= 2,
        format!(
            "eta = 1/L with L = 2 lambda_max; k_plain/kappa = {plain:.2?} (spread {spread:.3}, limit 2); k_whitened = {white:?}"
        ),
    )
}

fn sgd_steady_state() -> Outcome {
    let g = GaussianTransport::new(SpectralMatrix::diagonal(&[1.0, 100.0]).unwrap()).unwrap();
    let t = 0.8;
    let sig = g.sigma_eigvals(t).unwrap();
    let eta = 0.1 / sig[1];
    let mut mean = [0.0; 2];
    let mut noise = [0.0; 2];
    for seed in 0..5 {
        let tr = g.sgd_simulate(t, eta, 200_000, seed).unwrap();
        let nv = tr.normalized_variance();
        for i in 0..2 {
            mean[i] += nv[i] / 5.0;
            noise[i] += tr.noise_scale_estimates[i] / 5.0;
        }
    }
    let ratio = mean[0].max(mean[1]) / mean[0].min(mean[1]);
    outcome(
        ratio <= 1.35,
        format!(
            "Var*sigma/eta per mode = [{:.4e}, {:.4e}], ratio {ratio:.2} (limit 1.35); kappa(Sigma_t) = {:.2}; per-mode noise Var/eta^2 ratio {:.2}",
            mean[0],
            mean[1],
            sig[1] / sig[0],
            noise[1] / noise[0]
        ),
    )
}

fn gmm_whitening() -> Outcome {
    let mut worst_kappa: f64 = 0.0;
    let mut worst_matrix: f64 = 0.0;
    let grid: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
    for (d, n) in [(2usize, 3usize), (3, 4), (5, 2)] {
        let comps = (0..n).map(|k| random_spd(d, 50 + 10 * d as u64 + k as u64)).collect();
        let gmm = ZeroMeanGmm::uniform(comps).unwrap();
        let white = gmm.whitening_transforms().unwrap().whitened;
        for &t in &grid {
            for k in white.component_condition_numbers(t).unwrap() {
                worst_kappa = worst_kappa.max((k - 1.0).abs());
            }
            let closed = whitened_optimal_matrix(d, t).unwrap();
            for k in 0..n {
                let m = white.component_optimal_matrix(k, t).unwrap();
                worst_matrix = worst_matrix.max((m - &closed).abs().max());
            }
        }
    }
    outcome(
        worst_kappa < 1e-10 && worst_matrix < 1e-10,
        format!("max |kappa - 1| {worst_kappa:.2e}, max matrix deviation {worst_matrix:.2e} (tol 1e-10)"),
    )
}

fn gradient_correctness() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    let sizes = [vec![2, 8, 2], vec![3, 16, 16, 2], vec![5, 12, 12, 12, 3]];
    for (a, sizes) in sizes.iter().enumerate() {
        for act in [Activation::Tanh, Activation::Silu, Activation::Relu] {
            let arch = MlpArch::new(sizes.clone(), act).unwrap();
            let m = Mlp::new(arch.clone(), 10 + a as u64);
            let x = standard_normal(sizes[0], 6, a as u64, "acceptance.grad");
            let x = Tensor::new(6, sizes[0], x.into_vec());
            let (_, g) = m
                .grad(&x, |tape, y| {
                    let s = tape.square(y);
                    tape.mean(s)
                })
                .unwrap();
            let fd = finite_difference_grad(&m.params, 1e-6, |p| {
                let y = arch.forward_plain(p, 0, &x).unwrap();
                y.data.iter().map(|v| v * v).sum::<f64>() / y.data.len() as f64
            });
            worst = worst.max(max_relative_error(&g, &fd, 1e-12));
            cases += 1;

            // Flow-matching regression loss on the time-augmented input.
            if sizes[0] == 3 {
                let src = standard_normal(2, 64, 3, "acceptance.src");
                let base = standard_normal(2, 64, 4, "acceptance.base");
                let batch = cfm_batch(
                    &src,
                    &base,
                    Schedule::Linear,
                    16,
                    &mut rng::stream(5, "acceptance.batch"),
                );
                let (_, g) = cfm_loss_and_grad(&m, &batch).unwrap();
                let fd = finite_difference_grad(&m.params, 1e-6, |p| {
                    let mm = Mlp::with_params(arch.clone(), p.to_vec()).unwrap();
                    pfm_core::flowmatch::cfm_loss(&mm, &batch).unwrap()
                });
                worst = worst.max(max_relative_error(&g, &fd, 1e-12));
                cases += 1;
            }
        }
    }
    let flow = random_flow(3);
    let x = standard_normal(2, 32, 9, "acceptance.nll");
    let (_, g) = flow.nll_and_grad(&x).unwrap();
    let fd = finite_difference_grad(&flow.params, 1e-6, |p| {
        let mut f = flow.clone();
        f.params.copy_from_slice(p);
        f.nll(&x).unwrap()
    });
    worst = worst.max(max_relative_error(&g, &fd, 1e-12));
    cases += 1;
    outcome(
        worst < 1e-5,
        format!("max relative error {worst:.2e} over {cases} models and losses (tol 1e-5)"),
    )
}

fn random_flow(seed: u64) -> CouplingFlow {
    let mut f = CouplingFlow::zeros(
        2,
        CouplingSpec {
            n_layers: 4,
            hidden: vec![16, 16],
            ..CouplingSpec::default()
        },
        seed,
    )
    .unwrap();
    let noise = standard_normal(1, f.params.len(), seed, "acceptance.flow");
    for (p, z) in f.params.iter_mut().zip(noise.as_slice()) {
        *p = 0.3 * z;
    }
    f
}

fn change_of_variables() -> Outcome {
    let flow = random_flow(17);
    let points = standard_normal(2, 100, 18, "acceptance.cov");
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for x in points.rows() {
        let (_, ld) = flow.forward_point(x).unwrap();
        let mut jac = [[0.0; 2]; 2];
        for j in 0..2 {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[j] += h;
            xm[j] -= h;
            let (yp, _) = flow.forward_point(&xp).unwrap();
            let (ym, _) = flow.forward_point(&xm).unwrap();
            for i in 0..2 {
                jac[i][j] = (yp[i] - ym[i]) / (2.0 * h);
            }
        }
        let det = (jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0]).abs();
        worst = worst.max((det - ld.exp()).abs() / ld.exp());
    }
    outcome(
        worst < 1e-5,
        format!("max relative |det| error {worst:.2e} on 100 points (tol 1e-5)"),
    )
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

/// Runs a shipped config into a fresh temporary directory.
fn run_config(name: &str) -> (tempfile::TempDir, pfm_lab::RunReport) {
    let mut cfg = ExperimentConfig::load(&configs_dir().join(name)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    cfg.output_dir = dir.path().join("out");
    let report = pfm_lab::run(&cfg, true).unwrap();
    (dir, report)
}

fn pipeline_runs(report: pfm_lab::RunReport) -> Vec<MethodRun> {
    match report.results {
        ExperimentResults::Pipelines(runs) => runs,
        other => panic!("expected pipeline results, got {other:?}"),
    }
}

fn method_mean(runs: &[MethodRun], label: &str, f: impl Fn(&MethodRun) -> f64) -> f64 {
    let v: Vec<f64> = runs.iter().filter(|r| r.label == label).map(f).collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// The Gaussian comparison feeds criteria 8 and 11; it is run once.
fn gaussian_comparison() -> &'static [MethodRun] {
    use std::sync::OnceLock;
    static RUNS: OnceLock<Vec<MethodRun>> = OnceLock::new();
    RUNS.get_or_init(|| pipeline_runs(run_config("precond_compare_gaussian.json").1))
}

fn whitening_mmd() -> Outcome {
    let runs = gaussian_comparison();
    let base = method_mean(runs, "none", MethodRun::final_mmd);
    let white = method_mean(runs, "whitening", MethodRun::final_mmd);
    let ratio = white / base;
    outcome(
        ratio <= 0.7,
        format!("final MMD over 5 seeds: none {base:.3e}, whitening {white:.3e}, ratio {ratio:.3} (limit 0.70)"),
    )
}

fn baseline_plateau() -> Outcome {
    let start = Instant::now();
    let runs = gaussian_comparison();
    let reused = start.elapsed() < secs(1);
    let steps = runs[0].loss_log.len();
    let mut notes = Vec::new();
    let mut finals = Vec::new();
    for (label, rows) in mean_curves(runs) {
        let curve: Vec<(usize, f64)> = rows.iter().map(|r| (r.0, r.1)).collect();
        let p = plateau(&curve, steps).unwrap();
        finals.push((label.clone(), p.last));
        notes.push(format!(
            "{label}: last-quarter share {}",
            p.late_fraction.map_or("n/a".into(), |f| format!("{:.1}%", 100.0 * f))
        ));
    }
    let base = finals.iter().find(|f| f.0 == "none").unwrap().1;
    let white = finals.iter().find(|f| f.0 == "whitening").unwrap().1;
    outcome(
        white < base,
        format!(
            "gating: whitened final curve MMD {white:.3e} < baseline {base:.3e}; informational: {}{}",
            notes.join(", "),
            if reused { " (runs shared with criterion 8)" } else { "" }
        ),
    )
}

fn swiss_roll_ordering() -> Outcome {
    let runs = pipeline_runs(run_config("precond_compare_swissroll.json").1);
    let mut pass = true;
    let mut parts = Vec::new();
    for (direction, col) in [(Direction::ZToX1, 1), (Direction::X1ToZ, 2)] {
        let get = |label: &str| method_mean(&runs, label, |r| r.metric("sliced_w2", direction).unwrap());
        let base = get("none");
        let mut row = vec![format!("none {base:.3e}")];
        for (label, ..) in &REFERENCE_SLICED_W2[1..] {
            let v = get(label);
            pass &= v < base;
            row.push(format!("{label} {v:.3e}{}", if v < base { "" } else { " (not below)" }));
        }
        let reference: Vec<String> = REFERENCE_SLICED_W2
            .iter()
            .map(|r| format!("{:.2e}", if col == 1 { r.1 } else { r.2 }))
            .collect();
        parts.push(format!(
            "{}: {} [reference {}]",
            direction.as_str(),
            row.join(", "),
            reference.join(" / ")
        ));
    }
    outcome(pass, parts.join("; "))
}

fn kappa_diagnostic() -> Outcome {
    let (_dir, report) = run_config("kappa_diagnostic.json");
    let ExperimentResults::KappaDiagnostic(res) = report.results else {
        panic!("expected kappa diagnostic results")
    };
    let analytic = res.analytic.expect("gaussian target");
    let mut worst_rel: f64 = 0.0;
    let mut violations = 0;
    let mut worst_pre: f64 = 0.0;
    for (method, seed, traj) in &res.runs {
        let base = &res.runs.iter().find(|r| r.0 == "none" && r.1 == *seed).unwrap().2;
        if method == "none" {
            for ((_, k), (_, a)) in traj.iter().zip(&analytic) {
                worst_rel = worst_rel.max((k - a).abs() / a);
            }
        } else {
            for ((_, k), (_, b)) in traj.iter().zip(base) {
                worst_pre = worst_pre.max(*k);
                if k > b {
                    violations += 1;
                }
            }
        }
    }
    outcome(
        worst_rel < 0.1 && violations == 0,
        format!(
            "baseline vs closed form max rel. error {:.2}% (limit 10%); {violations} grid points where a preconditioner exceeds the baseline; max preconditioned kappa {worst_pre:.3}",
            100.0 * worst_rel
        ),
    )
}

/// Small but complete configs, one per experiment kind.
fn determinism_configs() -> Vec<(&'static str, String)> {
    let fast_eval = r#""eval": { "n_train": 800, "n_eval": 200, "curve_every": 50, "curve_points": 100, "kappa_pairs": 1000, "integration": { "n_steps": 20 } }"#;
    let methods = r#"["none", "whitening",
        { "kind": "normalizing_flow", "coupling": { "n_layers": 2, "hidden": [8] }, "hyper": { "steps": 40 } },
        { "kind": "flow_pushforward", "n_steps": 10, "hyper": { "steps": 40 } }]"#;
    vec![
        (
            "theorem1",
            std::fs::read_to_string(configs_dir().join("theorem1.json")).unwrap(),
        ),
        (
            "gmm_bottleneck",
            std::fs::read_to_string(configs_dir().join("gmm_bottleneck.json")).unwrap(),
        ),
        (
            "gaussian_analytic",
            r#"{ "experiment": "gaussian_analytic",
                 "target": { "kind": "gaussian", "covariance": { "eigenvalues": [1.0, 10.0, 100.0] } },
                 "seeds": [1, 2], "output_dir": "x",
                 "analytic": { "gd_steps": 200, "sgd": { "steps": 5000 } } }"#
                .into(),
        ),
        (
            "fm_2d",
            format!(
                r#"{{ "experiment": "fm_2d", "target": {{ "kind": "checkerboard" }},
                     "hyper": {{ "steps": 120 }}, "seeds": [3], "output_dir": "x", {fast_eval} }}"#
            ),
        ),
        (
            "precond_compare",
            format!(
                r#"{{ "experiment": "precond_compare", "target": {{ "kind": "swiss_roll" }},
                     "precond": {methods}, "hyper": {{ "steps": 120 }}, "seeds": [4, 5], "output_dir": "x", {fast_eval} }}"#
            ),
        ),
        (
            "checkerboard_swissroll",
            format!(
                r#"{{ "experiment": "checkerboard_swissroll", "target": {{ "kind": "swiss_roll" }},
                     "precond": ["none", "whitening"], "hyper": {{ "steps": 120 }}, "seeds": [6], "output_dir": "x", {fast_eval} }}"#
            ),
        ),
        (
            "kappa_diagnostic",
            format!(
                r#"{{ "experiment": "kappa_diagnostic",
                     "target": {{ "kind": "gmm", "components": [{{ "eigenvalues": [1.0, 50.0] }}, {{ "eigenvalues": [4.0, 2.0], "rotation_deg": 60.0 }}] }},
                     "precond": {methods}, "seeds": [7], "output_dir": "x", {fast_eval} }}"#
            ),
        ),
    ]
}

fn run_into(json: &str, dir: &Path) -> Manifest {
    let mut cfg = ExperimentConfig::from_json(json).unwrap();
    cfg.output_dir = dir.to_path_buf();
    pfm_lab::run(&cfg, true).unwrap().manifest
}

fn determinism() -> Outcome {
    let mut csvs = 0;
    let mut mismatches = Vec::new();
    for (name, json) in determinism_configs() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = run_into(&json, a.path());
        let mb = run_into(&json, b.path());
        if ma.emitted_files != mb.emitted_files {
            mismatches.push(format!("{name}: different file lists"));
            continue;
        }
        for rel in ma
            .emitted_files
            .iter()
            .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        {
            csvs += 1;
            if std::fs::read(a.path().join(rel)).unwrap() != std::fs::read(b.path().join(rel)).unwrap() {
                mismatches.push(format!("{name}/{}", rel.display()));
            }
        }
    }
    outcome(
        mismatches.is_empty() && csvs > 0,
        if mismatches.is_empty() {
            format!("{csvs} CSV files byte-identical across repeated runs of 7 experiment kinds")
        } else {
            format!("differing outputs: {}", mismatches.join(", "))
        },
    )
}

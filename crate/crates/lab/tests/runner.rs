use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use pfm_lab::compare::compare;
use pfm_lab::pipeline::Direction;
use pfm_lab::{config_hash, run, ExperimentConfig, LabError, Manifest, RunStatus, MANIFEST_NAME};

fn tiny_compare(dir: &Path) -> String {
    format!(
        r#"{{
            "experiment": "precond_compare",
            "target": {{ "kind": "gaussian", "covariance": {{ "eigenvalues": [1.0, 25.0], "rotation_deg": 20.0 }} }},
            "precond": ["none", "whitening",
                {{ "kind": "normalizing_flow", "coupling": {{ "n_layers": 2, "hidden": [8] }}, "hyper": {{ "steps": 30 }} }},
                {{ "kind": "flow_pushforward", "n_steps": 10, "hyper": {{ "steps": 30 }} }}],
            "hyper": {{ "steps": 60 }},
            "seeds": [11, 12],
            "output_dir": {dir:?},
            "eval": {{ "n_train": 500, "n_eval": 150, "curve_every": 20, "curve_points": 80,
                      "kappa_pairs": 500, "integration": {{ "n_steps": 10 }} }}
        }}"#
    )
}

fn config(json: &str) -> ExperimentConfig {
    ExperimentConfig::from_json(json).unwrap()
}

fn files_under(root: &Path) -> BTreeSet<PathBuf> {
    let mut out = BTreeSet::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out
}

#[test]
fn manifest_lists_exactly_the_emitted_files() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    let report = run(&config(&tiny_compare(&dir)), true).unwrap();
    let m = &report.manifest;
    assert_eq!(m.status, RunStatus::Complete);
    assert_eq!(m.error, None);
    assert_eq!(m.seeds, vec![11, 12]);
    assert_eq!(m.config_hash.len(), 64);

    let listed: BTreeSet<PathBuf> = m.emitted_files.iter().cloned().collect();
    assert_eq!(listed.len(), m.emitted_files.len(), "no duplicates");
    let mut on_disk = files_under(&dir);
    assert!(on_disk.remove(Path::new(MANIFEST_NAME)));
    assert_eq!(listed, on_disk);

    for name in [
        "config.json",
        "metrics_summary.csv",
        "mmd_curve_summary.csv",
        "kappa_hat_summary.csv",
        "plateau.csv",
        "metrics_seed11.csv",
        "loss_flow_pushforward_seed12.csv",
        "mmd_curve_normalizing_flow_seed11.csv",
        "field_whitening_seed12.json",
        "precond_normalizing_flow_seed11.json",
    ] {
        assert!(listed.contains(Path::new(name)), "{name} missing");
    }
    let on_file = Manifest::load(&dir.join(MANIFEST_NAME)).unwrap();
    assert_eq!(&on_file, m);
}

#[test]
fn summary_tables_have_expected_shape() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    run(&config(&tiny_compare(&dir)), true).unwrap();

    let summary = std::fs::read_to_string(dir.join("metrics_summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines[0], "method,metric,direction,mean,std,n_seeds");
    // 4 methods x 2 metrics x 2 directions.
    assert_eq!(lines.len(), 1 + 16);
    assert!(lines[1..].iter().all(|l| l.ends_with(",2")));
    assert!(!summary.contains('\r'));

    let curve = std::fs::read_to_string(dir.join("mmd_curve_none_seed11.csv")).unwrap();
    let steps: Vec<usize> = curve
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(steps, vec![0, 20, 40, 60]);

    let kappa = std::fs::read_to_string(dir.join("kappa_hat_summary.csv")).unwrap();
    assert!(kappa.starts_with("method,t,mean,std,n_seeds,kappa_analytic\n"));
    // Gaussian target: the analytic column is filled on every row.
    assert!(kappa.lines().skip(1).all(|l| !l.ends_with(',')));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let ma = run(&config(&tiny_compare(&a)), true).unwrap().manifest;
    run(&config(&tiny_compare(&b)), true).unwrap();
    for rel in &ma.emitted_files {
        if rel == Path::new("config.json") {
            continue; // records its own output_dir
        }
        assert_eq!(
            std::fs::read(a.join(rel)).unwrap(),
            std::fs::read(b.join(rel)).unwrap(),
            "{}",
            rel.display()
        );
    }
}

#[test]
fn invalid_configs_emit_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("never");
    let base = tiny_compare(&dir);
    let cases = [
        base.replace("\"seeds\": [11, 12]", "\"seeds\": []"),
        base.replace("\"seeds\": [11, 12]", "\"seeds\": [3, 3]"),
        base.replace("\"none\", \"whitening\",", "\"none\", \"sharpening\","),
        base.replace("\"none\", \"whitening\",", "\"none\", \"none\","),
        base.replace("\"n_steps\": 10,", "\"n_steps\": 10, \"hidden\": [64, 64],"),
        base.replace(
            "\"kappa_pairs\": 500,",
            "\"kappa_pairs\": 500, \"kappa_grid\": [0.5, 1.0],",
        ),
        base.replace("\"experiment\": \"precond_compare\"", "\"experiment\": \"fm_2d\""),
        base.replace(
            "\"hyper\": { \"steps\": 60 }",
            "\"hyper\": { \"steps\": 60, \"lr\": -1.0 }",
        ),
        base.replace("\"output_dir\"", "\"typo\": 1, \"output_dir\""),
        base.replace("\"eigenvalues\": [1.0, 25.0]", "\"eigenvalues\": [1.0, -25.0]"),
    ];
    for (i, json) in cases.iter().enumerate() {
        assert_ne!(json, &base, "case {i} did not change the config");
        let err = ExperimentConfig::from_json(json).and_then(|c| run(&c, true).map(|_| ()));
        assert!(matches!(err, Err(LabError::Validation(_))), "case {i}: {err:?}");
        assert!(!dir.exists(), "case {i} touched the output directory");
    }
}

#[test]
fn low_capacity_step_budget_is_an_alternative() {
    let tmp = tempfile::tempdir().unwrap();
    let base = tiny_compare(&tmp.path().join("x"));
    // A third of the 60 main steps.
    let big = base.replace(
        "\"n_steps\": 10, \"hyper\": { \"steps\": 30 }",
        "\"n_steps\": 10, \"hidden\": [64, 64], \"budget\": \"steps\", \"hyper\": { \"steps\": 20 }",
    );
    assert_ne!(big, base);
    config(&big).validate().unwrap();
    let too_long = big.replace(
        "\"budget\": \"steps\", \"hyper\": { \"steps\": 20 }",
        "\"budget\": \"steps\", \"hyper\": { \"steps\": 21 }",
    );
    assert_ne!(too_long, big);
    assert!(matches!(config(&too_long).validate(), Err(LabError::Validation(_))));
}

#[test]
fn output_dir_reuse_rules() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    let json =
        r#"{ "experiment": "theorem1", "seeds": [0], "output_dir": "DIR" }"#.replace("DIR", dir.to_str().unwrap());
    run(&config(&json), true).unwrap();
    // A previous run's files are replaced.
    let again = run(&config(&json), true).unwrap();
    assert_eq!(again.manifest.emitted_files.len(), 2);

    let foreign = tmp.path().join("foreign");
    std::fs::create_dir_all(&foreign).unwrap();
    std::fs::write(foreign.join("notes.txt"), "keep me").unwrap();
    let json = json.replace(dir.to_str().unwrap(), foreign.to_str().unwrap());
    assert!(matches!(run(&config(&json), true), Err(LabError::Validation(_))));
    assert_eq!(std::fs::read_to_string(foreign.join("notes.txt")).unwrap(), "keep me");
}

#[test]
fn config_hash_tracks_content() {
    let a = config(r#"{ "experiment": "theorem1", "seeds": [0], "output_dir": "x" }"#);
    let b = config(r#"{ "output_dir": "x", "seeds": [0], "experiment": "theorem1" }"#);
    let c = config(r#"{ "experiment": "theorem1", "seeds": [1], "output_dir": "x" }"#);
    assert_eq!(config_hash(&a), config_hash(&b));
    assert_ne!(config_hash(&a), config_hash(&c));
}

#[test]
fn compare_flags_preconditioned_methods() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    run(&config(&tiny_compare(&dir)), true).unwrap();
    let manifest = dir.join(MANIFEST_NAME);

    let table = compare(std::slice::from_ref(&manifest), "sliced_w2", None).unwrap();
    assert_eq!(table.header.last().unwrap(), "beats_baseline");
    // 4 methods x 2 directions, then 3 reference methods x 2 directions.
    assert_eq!(table.rows.len(), 8 + 6);
    let text = String::from_utf8(table.to_csv()).unwrap();
    assert!(text.contains("reference,none,z_to_x1,1.1100000000000000e-1,,,\n"));
    assert!(text.contains("reference,normalizing_flow,x1_to_z,3.1000000000000000e-1,,,true\n"));
    for line in text.lines().skip(1).filter(|l| !l.starts_with("reference")) {
        let method = line.split(',').nth(1).unwrap();
        let flag = line.rsplit(',').next().unwrap();
        if method == "none" {
            assert_eq!(flag, "");
        } else {
            assert!(flag == "true" || flag == "false", "{line}");
        }
    }

    let mmd = compare(std::slice::from_ref(&manifest), "mmd", Some(Direction::X1ToZ)).unwrap();
    assert_eq!(mmd.rows.len(), 4);
}

#[test]
fn compare_single_method_single_seed_is_one_row() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    let json = tiny_compare(&dir)
        .replace("\"seeds\": [11, 12]", "\"seeds\": [5]")
        .replace("\"experiment\": \"precond_compare\"", "\"experiment\": \"fm_2d\"");
    let start = json.find("\"precond\"").unwrap();
    let end = json.find("\"hyper\": { \"steps\": 60 }").unwrap();
    let json = format!(
        "{}\"precond\": \"whitening\",\n            {}",
        &json[..start],
        &json[end..]
    );
    run(&config(&json), true).unwrap();
    let t = compare(&[dir.join(MANIFEST_NAME)], "mmd", Some(Direction::ZToX1)).unwrap();
    assert_eq!(t.rows.len(), 1);
}

#[test]
fn compare_rejects_missing_or_failed_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nowhere").join(MANIFEST_NAME);
    assert!(matches!(
        compare(&[missing], "mmd", None),
        Err(LabError::MissingOutput(_))
    ));

    // An analytic run completes but has no metric summary.
    let dir = tmp.path().join("analytic");
    let json =
        r#"{ "experiment": "theorem1", "seeds": [0], "output_dir": "DIR" }"#.replace("DIR", dir.to_str().unwrap());
    run(&config(&json), true).unwrap();
    assert!(matches!(
        compare(&[dir.join(MANIFEST_NAME)], "mmd", None),
        Err(LabError::MissingOutput(_))
    ));
}

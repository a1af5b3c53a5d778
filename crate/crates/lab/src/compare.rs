//! Cross-run comparison of `metrics_summary.csv` files.

use std::path::{Path, PathBuf};

use crate::error::{LabError, Result};
use crate::output::{Cell, Table};
use crate::pipeline::Direction;
use crate::{Manifest, RunStatus};

pub const SUMMARY_NAME: &str = "metrics_summary.csv";

/// Reference sliced-W2 means for the Swiss roll benchmark:
/// `(method, z_to_x1, x1_to_z)`.
pub const REFERENCE_SLICED_W2: [(&str, f64, f64); 3] = [
    ("none", 1.11e-1, 8.1e-1),
    ("normalizing_flow", 5.8e-2, 3.1e-1),
    ("flow_pushforward", 7.2e-2, 3.4e-1),
];

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub source: String,
    pub method: String,
    pub metric: String,
    pub direction: String,
    pub mean: f64,
    pub std: Option<f64>,
    pub n_seeds: usize,
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> LabError + '_ {
    move |source| LabError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads the summary table of the completed run described by `manifest_path`.
pub fn read_summary(manifest_path: &Path) -> Result<Vec<SummaryRow>> {
    if !manifest_path.is_file() {
        return Err(LabError::MissingOutput(format!(
            "{} does not exist",
            manifest_path.display()
        )));
    }
    let manifest = Manifest::load(manifest_path)?;
    if manifest.status != RunStatus::Complete {
        return Err(LabError::MissingOutput(format!(
            "{} records a run that did not complete",
            manifest_path.display()
        )));
    }
    if !manifest.emitted_files.iter().any(|p| p == Path::new(SUMMARY_NAME)) {
        return Err(LabError::MissingOutput(format!(
            "{} emitted no {SUMMARY_NAME}",
            manifest_path.display()
        )));
    }
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let path: PathBuf = dir.join(SUMMARY_NAME);
    if !path.is_file() {
        return Err(LabError::MissingOutput(format!("{} is missing", path.display())));
    }
    let mut reader = csv::Reader::from_path(&path).map_err(csv_err(&path))?;
    let source = dir.display().to_string();
    let mut rows = Vec::new();
    for record in reader.records() {
        let r = record.map_err(csv_err(&path))?;
        let field = |i: usize| r.get(i).unwrap_or("").to_string();
        let num = |i: usize| -> Result<f64> {
            field(i)
                .parse()
                .map_err(|_| LabError::MissingOutput(format!("{}: malformed number {:?}", path.display(), field(i))))
        };
        rows.push(SummaryRow {
            source: source.clone(),
            method: field(0),
            metric: field(1),
            direction: field(2),
            mean: num(3)?,
            std: if field(4).is_empty() { None } else { Some(num(4)?) },
            n_seeds: num(5)? as usize,
        });
    }
    Ok(rows)
}

/// Rows of every run for `metric` (and `direction`, when given), each
/// flagged against the `none` method of the same run and direction,
/// followed by the reference rows when `metric` is `sliced_w2`.
pub fn compare(manifests: &[PathBuf], metric: &str, direction: Option<Direction>) -> Result<Table> {
    let keep = |d: &str| direction.is_none_or(|want| want.as_str() == d);
    let mut table = Table::new(&[
        "source",
        "method",
        "direction",
        "mean",
        "std",
        "n_seeds",
        "beats_baseline",
    ]);
    for m in manifests {
        let rows: Vec<SummaryRow> = read_summary(m)?
            .into_iter()
            .filter(|r| r.metric == metric && keep(&r.direction))
            .collect();
        for r in &rows {
            let baseline = rows
                .iter()
                .find(|b| b.method == "none" && b.direction == r.direction)
                .map(|b| b.mean);
            let beats = match baseline {
                Some(b) if r.method != "none" => Cell::Bool(r.mean < b),
                _ => Cell::Empty,
            };
            table.push(vec![
                r.source.as_str().into(),
                r.method.as_str().into(),
                r.direction.as_str().into(),
                r.mean.into(),
                r.std.into(),
                r.n_seeds.into(),
                beats,
            ]);
        }
    }
    if metric == "sliced_w2" {
        let (_, base_fwd, base_back) = REFERENCE_SLICED_W2[0];
        for (method, fwd, back) in REFERENCE_SLICED_W2 {
            for (dir, value, base) in [("z_to_x1", fwd, base_fwd), ("x1_to_z", back, base_back)] {
                if !keep(dir) {
                    continue;
                }
                let beats = if method == "none" {
                    Cell::Empty
                } else {
                    Cell::Bool(value < base)
                };
                table.push(vec![
                    "reference".into(),
                    method.into(),
                    dir.into(),
                    value.into(),
                    Cell::Empty,
                    Cell::Empty,
                    beats,
                ]);
            }
        }
    }
    Ok(table)
}

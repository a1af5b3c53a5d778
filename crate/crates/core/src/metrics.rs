//! Sample-based discrepancies and conditioning diagnostics.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::flowmatch::Schedule;
use crate::linalg::{cond_number, sample_covariance, SpectralMatrix};
use crate::points::PointCloud;
use crate::rng;

pub const DEFAULT_BANDWIDTH_MULTIPLIERS: [f64; 3] = [0.5, 1.0, 2.0];
pub const DEFAULT_PROJECTIONS: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub name: String,
    pub value: f64,
    pub params: serde_json::Value,
    pub n_x: usize,
    pub n_y: usize,
    pub seed: Option<u64>,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "metric,value,n_x,n_y,seed,params_json";

    /// `metric,value,n_x,n_y,seed,params_json`; the JSON field is quoted.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.name,
            crate::data::format_number(self.value),
            self.n_x,
            self.n_y,
            self.seed.map(|s| s.to_string()).unwrap_or_default(),
            csv_quote(&self.params.to_string())
        )
    }
}

fn csv_quote(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "\"\""))
}

/// RBF kernel widths for [`mmd_rbf`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidths {
    /// Multiples of the median pairwise distance of the pooled sample.
    Median(Vec<f64>),
    Explicit(Vec<f64>),
}

impl Default for Bandwidths {
    fn default() -> Self {
        Bandwidths::Median(DEFAULT_BANDWIDTH_MULTIPLIERS.to_vec())
    }
}

fn check_pair(x: &PointCloud, y: &PointCloud) -> Result<()> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::SampleSize { needed: 1, got: 0 });
    }
    if x.dim() != y.dim() {
        return Err(Error::Dimension(format!(
            "point sets of dimension {} and {}",
            x.dim(),
            y.dim()
        )));
    }
    Ok(())
}

/// Puts the pair in a canonical order so both metrics are exactly symmetric.
fn canonical<'a>(x: &'a PointCloud, y: &'a PointCloud) -> (&'a PointCloud, &'a PointCloud) {
    let key = |p: &PointCloud| (p.len(), p.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    if key(x) <= key(y) {
        (x, y)
    } else {
        (y, x)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum()
}

/// Median of the pairwise distances between distinct points of `x ∪ y`.
pub fn median_pairwise_distance(x: &PointCloud, y: &PointCloud) -> f64 {
    let pooled: Vec<&[f64]> = x.rows().chain(y.rows()).collect();
    let n = pooled.len();
    if n < 2 {
        return 0.0;
    }
    let mut d = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            d.push(sq_dist(pooled[i], pooled[j]));
        }
    }
    let m = d.len();
    let mid = m / 2;
    let (_, upper, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *upper;
    if m % 2 == 1 {
        upper.sqrt()
    } else {
        let lower = d[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower.sqrt() + upper.sqrt())
    }
}

/// Median pairwise distance, or the mean pairwise distance when more than
/// half the pairs coincide, or 1 when all points coincide.
fn positive_scale(x: &PointCloud, y: &PointCloud) -> f64 {
    let med = median_pairwise_distance(x, y);
    if med > 0.0 {
        return med;
    }
    let pooled: Vec<&[f64]> = x.rows().chain(y.rows()).collect();
    let (mut sum, mut count) = (0.0, 0usize);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            sum += sq_dist(pooled[i], pooled[j]).sqrt();
            count += 1;
        }
    }
    if sum > 0.0 {
        sum / count as f64
    } else {
        1.0
    }
}

fn mean_kernel(a: &PointCloud, b: &PointCloud, inv_two_h2: &[f64]) -> f64 {
    let mut total = 0.0;
    for p in a.rows() {
        for q in b.rows() {
            let d2 = sq_dist(p, q);
            for &g in inv_two_h2 {
                total += (-d2 * g).exp();
            }
        }
    }
    total / (a.len() * b.len()) as f64
}

/// Biased (V-statistic) estimate of squared MMD under a sum of RBF kernels
/// `exp(-‖x - y‖² / (2h²))`.
pub fn mmd_rbf(x: &PointCloud, y: &PointCloud, bandwidths: &Bandwidths) -> Result<MetricReport> {
    check_pair(x, y)?;
    let (a, b) = canonical(x, y);
    let (widths, median) = match bandwidths {
        Bandwidths::Median(mult) => {
            let med = positive_scale(a, b);
            (mult.iter().map(|m| m * med).collect::<Vec<_>>(), Some(med))
        }
        Bandwidths::Explicit(h) => (h.clone(), None),
    };
    if widths.is_empty() || widths.iter().any(|h| !(*h > 0.0)) {
        return Err(Error::Invalid(format!("bandwidths must be positive, got {widths:?}")));
    }
    let g: Vec<f64> = widths.iter().map(|h| 1.0 / (2.0 * h * h)).collect();
    let value = mean_kernel(a, a, &g) + mean_kernel(b, b, &g) - 2.0 * mean_kernel(a, b, &g);
    Ok(MetricReport {
        name: "mmd".into(),
        value,
        params: json!({ "bandwidths": widths, "median": median }),
        n_x: x.len(),
        n_y: y.len(),
        seed: None,
    })
}

/// Exact 2-Wasserstein distance between two 1D empirical distributions,
/// integrating the squared quantile difference piecewise.
pub fn wasserstein2_1d(a: &mut [f64], b: &mut [f64]) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len(), b.len());
    if n == m {
        let s: f64 = a.iter().zip(b.iter()).map(|(u, v)| (u - v) * (u - v)).sum();
        return (s / n as f64).sqrt();
    }
    // Walk the merged breakpoints k/n and l/m of both quantile functions.
    let (mut i, mut j) = (0usize, 0usize);
    let mut acc = 0.0;
    let mut pos = 0.0;
    while i < n && j < m {
        let next_a = (i + 1) as f64 / n as f64;
        let next_b = (j + 1) as f64 / m as f64;
        let next = next_a.min(next_b);
        acc += (next - pos) * (a[i] - b[j]) * (a[i] - b[j]);
        pos = next;
        // index arithmetic avoids float drift at shared breakpoints
        let adv_a = (i + 1) * m <= (j + 1) * n;
        let adv_b = (j + 1) * n <= (i + 1) * m;
        if adv_a {
            i += 1;
        }
        if adv_b {
            j += 1;
        }
    }
    acc.sqrt()
}

/// Mean over seeded random unit directions of the 1D 2-Wasserstein distance
/// between the projected samples.
pub fn sliced_distance(x: &PointCloud, y: &PointCloud, n_projections: usize, seed: u64) -> Result<MetricReport> {
    check_pair(x, y)?;
    if n_projections == 0 {
        return Err(Error::Invalid("n_projections must be at least 1".into()));
    }
    let (a, b) = canonical(x, y);
    let d = x.dim();
    let mut rng = rng::stream(seed, "metrics.sliced");
    let mut total = 0.0;
    let mut dir = vec![0.0; d];
    for _ in 0..n_projections {
        loop {
            for v in dir.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-12 {
                dir.iter_mut().for_each(|v| *v /= norm);
                break;
            }
        }
        let proj =
            |p: &PointCloud| -> Vec<f64> { p.rows().map(|r| r.iter().zip(&dir).map(|(u, v)| u * v).sum()).collect() };
        total += wasserstein2_1d(&mut proj(a), &mut proj(b));
    }
    Ok(MetricReport {
        name: "sliced_w2".into(),
        value: total / n_projections as f64,
        params: json!({ "n_projections": n_projections }),
        n_x: x.len(),
        n_y: y.len(),
        seed: Some(seed),
    })
}

/// `κ` of the uncentered sample covariance of `x_t = s(t) x1 + c(t) x0` on
/// each grid time, with `x0 ~ N(0, I)` and `x1` resampled from `points`.
/// The same pairs are reused across the grid.
pub fn empirical_condition_trajectory(
    points: &PointCloud,
    schedule: Schedule,
    ts: &[f64],
    n_pairs: usize,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    let d = points.dim();
    if n_pairs < d + 1 {
        return Err(Error::SampleSize {
            needed: d + 1,
            got: n_pairs,
        });
    }
    if points.is_empty() {
        return Err(Error::SampleSize { needed: 1, got: 0 });
    }
    if let Some(&t) = ts.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
        return Err(Error::Domain {
            name: "t",
            value: t,
            range: "(0, 1)",
        });
    }
    let mut rng = rng::stream(seed, "metrics.kappa");
    let mut x0: Vec<f64> = Vec::with_capacity(n_pairs * d);
    let mut x1 = Vec::with_capacity(n_pairs * d);
    for _ in 0..n_pairs {
        let k = rng.random_range(0..points.len());
        x1.extend_from_slice(points.row(k));
        for _ in 0..d {
            x0.push(StandardNormal.sample(&mut rng));
        }
    }
    ts.iter()
        .map(|&t| {
            let (s, c) = (schedule.s(t), schedule.c(t));
            let xt: Vec<f64> = x0.iter().zip(&x1).map(|(a, b)| s * b + c * a).collect();
            let cov = sample_covariance(&PointCloud::new(d, xt)?, false)?;
            let kappa = cond_number(&SpectralMatrix::from_symmetric(&cov)?)?;
            Ok((t, kappa))
        })
        .collect()
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let ra = ranks(a);
    let rb = ranks(b);
    pearson(&ra, &rb)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
    cov / (va * vb).sqrt()
}

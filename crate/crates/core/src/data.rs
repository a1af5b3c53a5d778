//! Seeded 2D dataset generators and Gaussian / mixture samplers.
//!
//! Each generator draws from its own named random stream and consumes the
//! stream point by point, so the first `n` points of a `2n` draw equal an
//! `n` draw with the same seed.

use std::f64::consts::PI;
use std::io::Write;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::ZeroMeanGmm;
use crate::linalg::{Mat, SpectralMatrix};
use crate::points::PointCloud;
use crate::rng;

pub const SWISS_ROLL_ID: &str = "swiss_roll/v1";
pub const CHECKERBOARD_ID: &str = "checkerboard/v1";
pub const GAUSSIAN_ID: &str = "gaussian/v1";
pub const GMM_ID: &str = "gmm/v1";

/// Swiss-roll angle range `[1.5π, 4.5π]`.
pub const SWISS_ROLL_U_MIN: f64 = 1.5 * PI;
pub const SWISS_ROLL_U_MAX: f64 = 4.5 * PI;
/// Half-width of the box the noiseless roll is scaled into.
pub const SWISS_ROLL_EXTENT: f64 = 2.5;
pub const SWISS_ROLL_DEFAULT_NOISE: f64 = 0.05;

/// Divisor mapping the raw spiral `(u cos u, u sin u)` into
/// `[-2.5, 2.5]²`.
pub fn swiss_roll_scale() -> f64 {
    SWISS_ROLL_U_MAX / SWISS_ROLL_EXTENT
}

pub const CHECKERBOARD_HALF_WIDTH: f64 = 4.0;
pub const CHECKERBOARD_CELLS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPoints {
    pub points: PointCloud,
    pub labels: Option<Vec<usize>>,
    pub seed: u64,
    pub generator_id: String,
}

impl LabeledPoints {
    pub fn unlabeled(points: PointCloud, seed: u64, generator_id: &str) -> Self {
        Self {
            points,
            labels: None,
            seed,
            generator_id: generator_id.to_string(),
        }
    }

    pub fn dim(&self) -> usize {
        self.points.dim()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Writes `x0,x1,...,label` rows; the label column is empty for
    /// unlabeled sets.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let header: Vec<String> = (0..self.dim()).map(|i| format!("x{i}")).collect();
        writeln!(w, "{},label", header.join(","))?;
        for (i, row) in self.points.rows().enumerate() {
            let mut line = row.iter().map(|&v| format_number(v)).collect::<Vec<_>>().join(",");
            line.push(',');
            if let Some(labels) = &self.labels {
                line.push_str(&labels[i].to_string());
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

/// 17 significant digits, `.` separator; parses back to the same double.
pub fn format_number(v: f64) -> String {
    format!("{v:.16e}")
}

fn check_n(n: usize) -> Result<()> {
    if n == 0 {
        Err(Error::SampleSize { needed: 1, got: 0 })
    } else {
        Ok(())
    }
}

/// `U Λ^{1/2}`, the factor mapping standard normals to `N(0, H)`.
fn sampling_factor(h: &SpectralMatrix) -> Result<Mat> {
    if h.min_eig() < 0.0 {
        return Err(Error::NotPositiveDefinite(h.min_eig()));
    }
    let mut f = h.eigvecs().clone();
    for (j, &l) in h.eigvals().iter().enumerate() {
        let s = l.sqrt();
        for i in 0..h.dim() {
            f[(i, j)] *= s;
        }
    }
    Ok(f)
}

fn push_transformed(out: &mut Vec<f64>, factor: &Mat, z: &[f64]) {
    let d = z.len();
    for i in 0..d {
        let mut acc = 0.0;
        for k in 0..d {
            acc += factor[(i, k)] * z[k];
        }
        out.push(acc);
    }
}

/// `n` draws from `N(0, H)`.
pub fn gaussian_sample(h: &SpectralMatrix, n: usize, seed: u64) -> Result<LabeledPoints> {
    check_n(n)?;
    let factor = sampling_factor(h)?;
    let d = h.dim();
    let mut rng = rng::stream(seed, GAUSSIAN_ID);
    let mut data = Vec::with_capacity(n * d);
    let mut z = vec![0.0; d];
    for _ in 0..n {
        for v in z.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        push_transformed(&mut data, &factor, &z);
    }
    Ok(LabeledPoints::unlabeled(PointCloud::new(d, data)?, seed, GAUSSIAN_ID))
}

/// `n` draws from a zero-mean mixture; labels hold the component index.
pub fn gmm_sample(gmm: &ZeroMeanGmm, n: usize, seed: u64) -> Result<LabeledPoints> {
    check_n(n)?;
    let factors = gmm
        .components()
        .iter()
        .map(sampling_factor)
        .collect::<Result<Vec<_>>>()?;
    let d = gmm.dim();
    let mut rng = rng::stream(seed, GMM_ID);
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    let mut z = vec![0.0; d];
    let weights = gmm.weights();
    for _ in 0..n {
        let u: f64 = rng.random();
        let mut k = weights.len() - 1;
        let mut acc = 0.0;
        for (j, &w) in weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = j;
                break;
            }
        }
        for v in z.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        push_transformed(&mut data, &factors[k], &z);
        labels.push(k);
    }
    Ok(LabeledPoints {
        points: PointCloud::new(d, data)?,
        labels: Some(labels),
        seed,
        generator_id: GMM_ID.to_string(),
    })
}

/// 2D Swiss roll: angle `u ~ U[1.5π, 4.5π]`, point
/// `(u cos u, u sin u) / scale + noise · N(0, I)`.
pub fn swiss_roll(n: usize, noise: f64, seed: u64) -> Result<LabeledPoints> {
    check_n(n)?;
    if !(noise >= 0.0) {
        return Err(Error::Domain {
            name: "noise",
            value: noise,
            range: "[0, inf)",
        });
    }
    let scale = swiss_roll_scale();
    let mut rng = rng::stream(seed, SWISS_ROLL_ID);
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let u = rng.random_range(SWISS_ROLL_U_MIN..SWISS_ROLL_U_MAX);
        let e0: f64 = StandardNormal.sample(&mut rng);
        let e1: f64 = StandardNormal.sample(&mut rng);
        data.push(u * u.cos() / scale + noise * e0);
        data.push(u * u.sin() / scale + noise * e1);
    }
    Ok(LabeledPoints::unlabeled(PointCloud::new(2, data)?, seed, SWISS_ROLL_ID))
}

/// Uniform samples over the black cells of a 4×4 checkerboard on
/// `[-4, 4]²`. Black cells have even `col + row`; labels are the flat cell
/// index `row * 4 + col`.
pub fn checkerboard(n: usize, seed: u64) -> Result<LabeledPoints> {
    check_n(n)?;
    let cells = CHECKERBOARD_CELLS;
    let width = 2.0 * CHECKERBOARD_HALF_WIDTH / cells as f64;
    let black: Vec<(usize, usize)> = (0..cells)
        .flat_map(|row| (0..cells).map(move |col| (row, col)))
        .filter(|(row, col)| (row + col) % 2 == 0)
        .collect();
    let mut rng = rng::stream(seed, CHECKERBOARD_ID);
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let (row, col) = black[rng.random_range(0..black.len())];
        let fx: f64 = rng.random();
        let fy: f64 = rng.random();
        data.push(-CHECKERBOARD_HALF_WIDTH + (col as f64 + fx) * width);
        data.push(-CHECKERBOARD_HALF_WIDTH + (row as f64 + fy) * width);
        labels.push(row * cells + col);
    }
    Ok(LabeledPoints {
        points: PointCloud::new(2, data)?,
        labels: Some(labels),
        seed,
        generator_id: CHECKERBOARD_ID.to_string(),
    })
}

/// `n` standard-normal points in `dim` dimensions from the named stream.
pub fn standard_normal(dim: usize, n: usize, seed: u64, stream: &str) -> PointCloud {
    let mut rng = rng::stream(seed, stream);
    let data = (0..dim * n).map(|_| StandardNormal.sample(&mut rng)).collect();
    PointCloud::new(dim, data).expect("dim > 0")
}

/// Source of training samples: fresh draws from a distribution, or
/// resampling of a fixed dataset.
pub trait PointSource {
    fn dim(&self) -> usize;
    fn draw(&self, rng: &mut rng::Rng, n: usize) -> PointCloud;
}

/// Resamples rows uniformly with replacement.
impl PointSource for PointCloud {
    fn dim(&self) -> usize {
        PointCloud::dim(self)
    }

    fn draw(&self, rng: &mut rng::Rng, n: usize) -> PointCloud {
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..self.len())).collect();
        self.select(&idx)
    }
}

/// Fresh standard-normal draws.
#[derive(Debug, Clone, Copy)]
pub struct StandardNormalSource {
    pub dim: usize,
}

impl PointSource for StandardNormalSource {
    fn dim(&self) -> usize {
        self.dim
    }

    fn draw(&self, rng: &mut rng::Rng, n: usize) -> PointCloud {
        let data = (0..n * self.dim).map(|_| StandardNormal.sample(rng)).collect();
        PointCloud::new(self.dim, data).expect("positive dimension")
    }
}

/// Fresh draws from `N(0, H)`.
#[derive(Debug, Clone)]
pub struct GaussianSource {
    factor: Mat,
}

impl GaussianSource {
    pub fn new(h: &SpectralMatrix) -> Result<Self> {
        Ok(Self {
            factor: sampling_factor(h)?,
        })
    }
}

impl PointSource for GaussianSource {
    fn dim(&self) -> usize {
        self.factor.nrows()
    }

    fn draw(&self, rng: &mut rng::Rng, n: usize) -> PointCloud {
        let d = self.dim();
        let mut data = Vec::with_capacity(n * d);
        let mut z = vec![0.0; d];
        for _ in 0..n {
            for v in z.iter_mut() {
                *v = StandardNormal.sample(rng);
            }
            push_transformed(&mut data, &self.factor, &z);
        }
        PointCloud::new(d, data).expect("positive dimension")
    }
}

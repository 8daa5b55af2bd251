//! Two-dimensional benchmark datasets and sample-quality metrics.
//!
//! Dataset generators follow the common toy-density conventions and are
//! scaled to roughly `[-4, 4]^2`.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use crate::energy::{builtin_energy, BuiltinEnergy};
use crate::energy::EnergySpec;
use crate::error::{Error, Result};
use crate::io::PointSet;

pub type Dataset2D = PointSet;

/// Radius of the eight-component mixture.
pub const EIGHT_GAUSSIANS_RADIUS: f64 = 4.0 / std::f64::consts::SQRT_2;
/// Per-coordinate standard deviation of each mixture component.
pub const EIGHT_GAUSSIANS_STD: f64 = 0.5 / std::f64::consts::SQRT_2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DatasetName {
    #[serde(rename = "8gaussians")]
    EightGaussians,
    #[serde(rename = "swissroll")]
    Swissroll,
    #[serde(rename = "2spirals")]
    TwoSpirals,
    #[serde(rename = "moons")]
    Moons,
    #[serde(rename = "rings")]
    Rings,
    #[serde(rename = "gaussian_linear")]
    GaussianLinear,
}

impl DatasetName {
    pub const ALL: [DatasetName; 6] = [
        DatasetName::EightGaussians,
        DatasetName::Swissroll,
        DatasetName::TwoSpirals,
        DatasetName::Moons,
        DatasetName::Rings,
        DatasetName::GaussianLinear,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetName::EightGaussians => "8gaussians",
            DatasetName::Swissroll => "swissroll",
            DatasetName::TwoSpirals => "2spirals",
            DatasetName::Moons => "moons",
            DatasetName::Rings => "rings",
            DatasetName::GaussianLinear => "gaussian_linear",
        }
    }

    /// Number of class labels the generator emits, if any.
    pub fn n_classes(self) -> Option<usize> {
        match self {
            DatasetName::EightGaussians => Some(8),
            DatasetName::TwoSpirals | DatasetName::Moons => Some(2),
            DatasetName::Rings => Some(4),
            DatasetName::Swissroll | DatasetName::GaussianLinear => None,
        }
    }
}

impl fmt::Display for DatasetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        DatasetName::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown dataset {s:?}")))
    }
}

/// Centres of the eight-component mixture, indexed by class label.
pub fn eight_gaussians_centers() -> [[f64; 2]; 8] {
    let mut c = [[0.0; 2]; 8];
    for (k, ck) in c.iter_mut().enumerate() {
        let a = std::f64::consts::FRAC_PI_4 * k as f64;
        *ck = [EIGHT_GAUSSIANS_RADIUS * a.cos(), EIGHT_GAUSSIANS_RADIUS * a.sin()];
    }
    c
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Generates `n` points of a benchmark dataset, deterministic in `seed`.
pub fn make_dataset(name: DatasetName, n: usize, seed: u64) -> Dataset2D {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = Array2::zeros((n, 2));
    let mut labels = Vec::with_capacity(n);
    match name {
        DatasetName::EightGaussians => {
            let centers = eight_gaussians_centers();
            for i in 0..n {
                let k = rng.random_range(0..8);
                pts[[i, 0]] = centers[k][0] + EIGHT_GAUSSIANS_STD * normal(&mut rng);
                pts[[i, 1]] = centers[k][1] + EIGHT_GAUSSIANS_STD * normal(&mut rng);
                labels.push(k);
            }
        }
        DatasetName::Swissroll => {
            for i in 0..n {
                let t = 1.5 * std::f64::consts::PI * (1.0 + 2.0 * rng.random::<f64>());
                pts[[i, 0]] = (t * t.cos() + normal(&mut rng)) / 5.0;
                pts[[i, 1]] = (t * t.sin() + normal(&mut rng)) / 5.0;
            }
        }
        DatasetName::TwoSpirals => {
            for i in 0..n {
                let arm = i % 2;
                let r = rng.random::<f64>().sqrt() * 3.0 * std::f64::consts::PI;
                let mut x = -r.cos() * r + 0.5 * rng.random::<f64>();
                let mut y = r.sin() * r + 0.5 * rng.random::<f64>();
                if arm == 1 {
                    x = -x;
                    y = -y;
                }
                pts[[i, 0]] = x / 3.0 + 0.1 * normal(&mut rng);
                pts[[i, 1]] = y / 3.0 + 0.1 * normal(&mut rng);
                labels.push(arm);
            }
        }
        DatasetName::Moons => {
            for i in 0..n {
                let moon = i % 2;
                let a = std::f64::consts::PI * rng.random::<f64>();
                let (x, y) = if moon == 0 {
                    (a.cos(), a.sin())
                } else {
                    (1.0 - a.cos(), 0.5 - a.sin())
                };
                pts[[i, 0]] = 2.0 * (x + 0.1 * normal(&mut rng)) - 1.0;
                pts[[i, 1]] = 2.0 * (y + 0.1 * normal(&mut rng)) - 0.2;
                labels.push(moon);
            }
        }
        DatasetName::Rings => {
            for i in 0..n {
                let ring = i % 4;
                let radius = 3.0 * (4 - ring) as f64 / 4.0;
                let a = 2.0 * std::f64::consts::PI * rng.random::<f64>();
                pts[[i, 0]] = radius * a.cos() + 0.08 * normal(&mut rng);
                pts[[i, 1]] = radius * a.sin() + 0.08 * normal(&mut rng);
                labels.push(ring);
            }
        }
        DatasetName::GaussianLinear => {
            for v in pts.iter_mut() {
                *v = normal(&mut rng);
            }
        }
    }
    Dataset2D {
        points: pts,
        energies: None,
        labels: name.n_classes().map(|_| labels),
    }
}

/// Stores `E(x)` for every point.
pub fn attach_energy(set: &mut Dataset2D, energy: &EnergySpec) {
    let e = &energy.energy;
    set.energies = Some(set.points.rows().into_iter().map(|r| e.value(&r.to_vec())).collect());
}

fn sq_dist(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Largest pooled set used to estimate the median pairwise distance.
pub const MEDIAN_SUBSAMPLE: usize = 2000;

/// Median pairwise distance of the pooled sample, estimated on an evenly
/// strided subsample of at most [`MEDIAN_SUBSAMPLE`] points.
pub fn median_bandwidth(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<f64> {
    let pooled = ndarray::concatenate(ndarray::Axis(0), &[a, b]).map_err(|e| Error::invalid(e.to_string()))?;
    let n = pooled.nrows();
    if n < 2 {
        return Err(Error::invalid("median bandwidth needs at least two points"));
    }
    let m = n.min(MEDIAN_SUBSAMPLE);
    let idx: Vec<usize> = (0..m).map(|k| k * n / m).collect();
    let mut d = Vec::with_capacity(m * (m - 1) / 2);
    for (p, &i) in idx.iter().enumerate() {
        for &j in &idx[p + 1..] {
            d.push(sq_dist(pooled.row(i), pooled.row(j)).sqrt());
        }
    }
    let mid = d.len() / 2;
    let (_, med, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    let med = *med;
    if med > 0.0 {
        Ok(med)
    } else {
        Err(Error::invalid("median pairwise distance is zero"))
    }
}

fn mean_kernel(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, inv: f64) -> f64 {
    let mut total = 0.0;
    for ra in a.rows() {
        let mut row = 0.0;
        for rb in b.rows() {
            row += (-sq_dist(ra, rb) * inv).exp();
        }
        total += row;
    }
    total / (a.nrows() * b.nrows()) as f64
}

/// Biased squared maximum mean discrepancy with the Gaussian kernel
/// `exp(-||x - y||^2 / (2 bw^2))`. The bandwidth defaults to
/// [`median_bandwidth`] of the pooled sample.
pub fn mmd2(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, bandwidth: Option<f64>) -> Result<f64> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::invalid("mmd needs two non-empty samples"));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::DimMismatch {
            expected: a.ncols(),
            got: b.ncols(),
            context: "mmd samples",
        });
    }
    let bw = match bandwidth {
        Some(bw) if bw > 0.0 && bw.is_finite() => bw,
        Some(bw) => return Err(Error::domain(format!("bandwidth must be positive, got {bw}"))),
        None => median_bandwidth(a, b)?,
    };
    let inv = 1.0 / (2.0 * bw * bw);
    Ok(mean_kernel(a, a, inv) + mean_kernel(b, b, inv) - 2.0 * mean_kernel(a, b, inv))
}

/// Total variation between 2-D histograms on the shared bounding grid.
pub fn hist_divergence(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, bins: usize) -> Result<f64> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::invalid("histogram distance needs two non-empty samples"));
    }
    if a.ncols() != 2 || b.ncols() != 2 {
        return Err(Error::invalid("histogram distance is defined for 2-D samples"));
    }
    if bins == 0 {
        return Err(Error::domain("bins must be positive"));
    }
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for r in a.rows().into_iter().chain(b.rows()) {
        for j in 0..2 {
            lo[j] = lo[j].min(r[j]);
            hi[j] = hi[j].max(r[j]);
        }
    }
    let cell = |v: f64, j: usize| -> usize {
        let w = hi[j] - lo[j];
        if w <= 0.0 {
            return 0;
        }
        (((v - lo[j]) / w * bins as f64) as usize).min(bins - 1)
    };
    let hist = |s: ArrayView2<'_, f64>| {
        let mut h = vec![0.0; bins * bins];
        for r in s.rows() {
            h[cell(r[0], 0) * bins + cell(r[1], 1)] += 1.0 / s.nrows() as f64;
        }
        h
    };
    let (ha, hb) = (hist(a), hist(b));
    Ok(0.5 * ha.iter().zip(&hb).map(|(p, q)| (p - q).abs()).sum::<f64>())
}

/// Mean of the unscaled energy `E` over a sample.
pub fn mean_energy(sample: ArrayView2<'_, f64>, energy: &EnergySpec) -> Result<f64> {
    if sample.nrows() == 0 {
        return Err(Error::invalid("mean energy of an empty sample"));
    }
    let e = &energy.energy;
    let total: f64 = sample.rows().into_iter().map(|r| e.value(&r.to_vec())).sum();
    Ok(total / sample.nrows() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mmd2: f64,
    pub hist_tv: f64,
    pub mean_energy: f64,
    pub n_samples: usize,
}

impl MetricReport {
    /// Scores `sample` against `reference`.
    pub fn compute(
        sample: ArrayView2<'_, f64>,
        reference: ArrayView2<'_, f64>,
        energy: &EnergySpec,
        bins: usize,
    ) -> Result<Self> {
        Ok(MetricReport {
            mmd2: mmd2(sample, reference, None)?,
            hist_tv: hist_divergence(sample, reference, bins)?,
            mean_energy: mean_energy(sample, energy)?,
            n_samples: sample.nrows(),
        })
    }
}

/// Index of the nearest eight-gaussians centre.
pub fn nearest_center(x: &[f64]) -> usize {
    let c = eight_gaussians_centers();
    (0..8)
        .min_by(|&i, &j| {
            let di = (x[0] - c[i][0]).powi(2) + (x[1] - c[i][1]).powi(2);
            let dj = (x[0] - c[j][0]).powi(2) + (x[1] - c[j][1]).powi(2);
            di.total_cmp(&dj)
        })
        .expect("eight centres")
}

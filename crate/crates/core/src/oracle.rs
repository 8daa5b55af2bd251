//! Exact references for the intermediate energy and its gradient.
//!
//! When the clean-data distribution is an empirical distribution over atoms
//! `a_1..a_N`, the posterior of `x_0` given `x_t` is a categorical distribution
//! with weights `w_i ∝ N(x_t | alpha_t a_i, sigma_t^2 I)`, and the intermediate
//! energy is `E_t(x_t) = -log sum_i w_i exp(-beta E(a_i))`. Its gradient is
//! `(alpha_t / sigma_t^2) (mean_w(a) - mean_r(a))` where `r` is the posterior
//! further tilted by `exp(-beta E)`.

use ndarray::{Array2, ArrayView2};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::energy::EnergySpec;
use crate::error::{Error, Result};
use crate::sampler::{GuidanceField, NoiseModel, SampleBatch};
use crate::schedule::Schedule;

/// Uniform empirical distribution over a finite set of atoms.
#[derive(Debug, Clone)]
pub struct EmpiricalPrior {
    atoms: Array2<f64>,
    sq_norms: Vec<f64>,
    schedule: Schedule,
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Normalized probabilities from unnormalized log weights.
fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

impl EmpiricalPrior {
    pub fn new(atoms: Array2<f64>, schedule: Schedule) -> Result<Self> {
        if atoms.nrows() == 0 || atoms.ncols() == 0 {
            return Err(Error::invalid("empirical prior needs at least one atom"));
        }
        if atoms.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("prior atoms"));
        }
        schedule.validate()?;
        let sq_norms = atoms.rows().into_iter().map(|r| r.dot(&r)).collect();
        Ok(EmpiricalPrior {
            atoms,
            sq_norms,
            schedule,
        })
    }

    pub fn atoms(&self) -> ArrayView2<'_, f64> {
        self.atoms.view()
    }

    pub fn len(&self) -> usize {
        self.atoms.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.atoms.ncols()
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    /// Attaches an energy, caching `beta E(a_i)` for every atom.
    pub fn with_energy(&self, energy: &EnergySpec) -> Result<PosteriorOracle<'_>> {
        let scaled = energy.scaled_rows(self.atoms.view());
        if scaled.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("atom energies"));
        }
        Ok(PosteriorOracle { prior: self, scaled })
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimMismatch {
                expected: self.dim(),
                got: x.len(),
                context: "oracle query",
            });
        }
        Ok(())
    }

    /// Posterior log-weights up to a constant shared by all atoms.
    ///
    /// The `||x||^2` term of the Gaussian exponent is common to every atom and
    /// is dropped, which keeps the logits well scaled when `sigma` is small.
    fn logits(&self, x: &[f64], alpha: f64, sigma: f64) -> Vec<f64> {
        let inv = 1.0 / (sigma * sigma);
        self.atoms
            .rows()
            .into_iter()
            .zip(&self.sq_norms)
            .map(|(a, &sq)| {
                let dot: f64 = a.iter().zip(x).map(|(ai, xi)| ai * xi).sum();
                (alpha * dot - 0.5 * alpha * alpha * sq) * inv
            })
            .collect()
    }

    /// Normalized posterior weights of the atoms given `x_t`.
    pub fn posterior_weights(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check_point(x)?;
        if t == 0.0 {
            let mut w = vec![0.0; self.len()];
            w[self.nearest(x)] = 1.0;
            return Ok(w);
        }
        let (alpha, sigma) = self.schedule.alpha_sigma(t)?;
        Ok(softmax(&self.logits(x, alpha, sigma)))
    }

    fn nearest(&self, x: &[f64]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (i, a) in self.atoms.rows().into_iter().enumerate() {
            let d: f64 = a.iter().zip(x).map(|(ai, xi)| (ai - xi).powi(2)).sum();
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1
    }

    /// Weighted mean of the atoms.
    fn weighted_mean(&self, w: &[f64]) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for (a, &wi) in self.atoms.rows().into_iter().zip(w) {
            for (mj, aj) in m.iter_mut().zip(a) {
                *mj += wi * aj;
            }
        }
        m
    }

    /// Weighted covariance of the atoms.
    fn weighted_cov(&self, w: &[f64], mean: &[f64]) -> Array2<f64> {
        let d = self.dim();
        let mut c = Array2::zeros((d, d));
        for (a, &wi) in self.atoms.rows().into_iter().zip(w) {
            if wi == 0.0 {
                continue;
            }
            for j in 0..d {
                let dj = a[j] - mean[j];
                for k in 0..d {
                    c[[j, k]] += wi * dj * (a[k] - mean[k]);
                }
            }
        }
        c
    }
}

/// Exact noise prediction of the diffused empirical distribution:
/// `eps(x, t) = (x - alpha_t mean_w(a)) / sigma_t`.
impl NoiseModel for EmpiricalPrior {
    fn schedule(&self) -> &Schedule {
        &self.schedule
    }
    fn data_dim(&self) -> usize {
        self.dim()
    }
    fn predict_noise(&self, x: ArrayView2<'_, f64>, t: f64, _cond: Option<ArrayView2<'_, f64>>)
        -> Result<Array2<f64>> {
        let (alpha, sigma) = self.schedule.alpha_sigma(t)?;
        let mut out = Array2::zeros(x.raw_dim());
        for (i, row) in x.rows().into_iter().enumerate() {
            let xr = row.to_vec();
            let w = softmax(&self.logits(&xr, alpha, sigma));
            let m = self.weighted_mean(&w);
            for j in 0..xr.len() {
                out[[i, j]] = (xr[j] - alpha * m[j]) / sigma;
            }
        }
        Ok(out)
    }
    /// The Jacobian `(I - (alpha / sigma)^2 Cov_w(a)) / sigma` is symmetric.
    fn noise_vjp(
        &self,
        x: ArrayView2<'_, f64>,
        t: f64,
        _cond: Option<ArrayView2<'_, f64>>,
        cotangent: ArrayView2<'_, f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        let (alpha, sigma) = self.schedule.alpha_sigma(t)?;
        let mut eps = Array2::zeros(x.raw_dim());
        let mut vjp = Array2::zeros(x.raw_dim());
        let k = (alpha / sigma).powi(2);
        for (i, row) in x.rows().into_iter().enumerate() {
            let xr = row.to_vec();
            let w = softmax(&self.logits(&xr, alpha, sigma));
            let m = self.weighted_mean(&w);
            let cov = self.weighted_cov(&w, &m);
            let cot = cotangent.row(i);
            let cov_cot = cov.dot(&cot);
            for j in 0..xr.len() {
                eps[[i, j]] = (xr[j] - alpha * m[j]) / sigma;
                vjp[[i, j]] = (cot[j] - k * cov_cot[j]) / sigma;
            }
        }
        Ok((eps, vjp))
    }
}

/// An empirical prior with cached atom energies.
#[derive(Debug, Clone)]
pub struct PosteriorOracle<'a> {
    prior: &'a EmpiricalPrior,
    scaled: Vec<f64>,
}

impl PosteriorOracle<'_> {
    /// `beta E(a_i)` per atom.
    pub fn atom_energies(&self) -> &[f64] {
        &self.scaled
    }

    /// Exact `E_t(x_t)`. At `t = 0` the posterior collapses onto the nearest atom.
    pub fn energy(&self, x: &[f64], t: f64) -> Result<f64> {
        self.prior.check_point(x)?;
        if t == 0.0 {
            return Ok(self.scaled[self.prior.nearest(x)]);
        }
        let (alpha, sigma) = self.prior.schedule.alpha_sigma(t)?;
        let logits = self.prior.logits(x, alpha, sigma);
        // Work relative to the normalized posterior and its mean energy so the
        // result does not inherit rounding from large logits.
        let norm = log_sum_exp(&logits);
        let w = softmax(&logits);
        let mean: f64 = w.iter().zip(&self.scaled).map(|(wi, e)| wi * e).sum();
        let tilted: Vec<f64> = logits
            .iter()
            .zip(&self.scaled)
            .map(|(l, e)| (l - norm) - (e - mean))
            .collect();
        Ok(mean - log_sum_exp(&tilted))
    }

    /// Exact `grad E_t(x_t)`; undefined at `t = 0`.
    pub fn guidance(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.prior.check_point(x)?;
        if t <= 0.0 {
            return Err(Error::domain("exact guidance needs t > 0"));
        }
        let (alpha, sigma) = self.prior.schedule.alpha_sigma(t)?;
        let logits = self.prior.logits(x, alpha, sigma);
        let w = softmax(&logits);
        let tilted: Vec<f64> = logits.iter().zip(&self.scaled).map(|(l, e)| l - e).collect();
        let r = softmax(&tilted);
        // Centre on the posterior mean before differencing the two means.
        let centre = self.prior.weighted_mean(&w);
        let k = alpha / (sigma * sigma);
        let mut g = vec![0.0; x.len()];
        for ((a, wi), ri) in self.prior.atoms.rows().into_iter().zip(&w).zip(&r) {
            let dw = wi - ri;
            if dw == 0.0 {
                continue;
            }
            for (gj, (aj, cj)) in g.iter_mut().zip(a.iter().zip(&centre)) {
                *gj += k * dw * (aj - cj);
            }
        }
        Ok(g)
    }

    /// Posterior mean of `beta E(x_0)`, the optimum of the squared-error objective.
    pub fn energy_mse(&self, x: &[f64], t: f64) -> Result<f64> {
        let w = self.prior.posterior_weights(x, t)?;
        Ok(w.iter().zip(&self.scaled).map(|(wi, e)| wi * e).sum())
    }

    /// Gradient of [`Self::energy_mse`]: `(alpha / sigma^2) Cov_w(a, beta E)`.
    pub fn energy_mse_gradient(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        if t <= 0.0 {
            return Err(Error::domain("posterior-mean gradient needs t > 0"));
        }
        let (alpha, sigma) = self.prior.schedule.alpha_sigma(t)?;
        let w = self.prior.posterior_weights(x, t)?;
        let mean_e: f64 = w.iter().zip(&self.scaled).map(|(wi, e)| wi * e).sum();
        let centre = self.prior.weighted_mean(&w);
        let k = alpha / (sigma * sigma);
        let mut g = vec![0.0; x.len()];
        for ((a, wi), e) in self.prior.atoms.rows().into_iter().zip(&w).zip(&self.scaled) {
            for (gj, (aj, cj)) in g.iter_mut().zip(a.iter().zip(&centre)) {
                *gj += k * wi * (e - mean_e) * (aj - cj);
            }
        }
        Ok(g)
    }

    /// Row-wise exact guidance for a batch of points.
    pub fn guidance_batch(&self, x: ArrayView2<'_, f64>, t: f64) -> Result<Array2<f64>> {
        let mut out = Array2::zeros(x.raw_dim());
        for (i, row) in x.rows().into_iter().enumerate() {
            let g = self.guidance(&row.to_vec(), t)?;
            out.row_mut(i).assign(&ndarray::ArrayView1::from(&g));
        }
        Ok(out)
    }
}

impl GuidanceField for PosteriorOracle<'_> {
    fn energy_gradient(&self, x: ArrayView2<'_, f64>, t: f64, _cond: Option<ArrayView2<'_, f64>>)
        -> Result<Array2<f64>> {
        self.guidance_batch(x, t)
    }
}

/// Exact intermediate energy `E_t(x_t)` under the empirical prior.
pub fn posterior_energy(prior: &EmpiricalPrior, energy: &EnergySpec, x: &[f64], t: f64) -> Result<f64> {
    prior.with_energy(energy)?.energy(x, t)
}

/// Exact `grad E_t(x_t)` under the empirical prior.
pub fn posterior_guidance(prior: &EmpiricalPrior, energy: &EnergySpec, x: &[f64], t: f64) -> Result<Vec<f64>> {
    prior.with_energy(energy)?.guidance(x, t)
}

/// Posterior mean of `beta E(x_0)` under the empirical prior.
pub fn posterior_energy_mse(prior: &EmpiricalPrior, energy: &EnergySpec, x: &[f64], t: f64) -> Result<f64> {
    prior.with_energy(energy)?.energy_mse(x, t)
}

/// Exact guidance for `q0 = N(0, I)`, `E(x) = c . x`, `beta = 1`: `alpha_t c`.
pub fn gaussian_linear_guidance(c: &[f64], t: f64, schedule: &Schedule) -> Result<Vec<f64>> {
    let (alpha, _) = schedule.alpha_sigma(t)?;
    Ok(c.iter().map(|ci| alpha * ci).collect())
}

/// Exact intermediate energy of the Gaussian-linear case:
/// `alpha_t c . x - |c|^2 sigma_t^2 / 2`.
pub fn gaussian_linear_energy(c: &[f64], x: &[f64], t: f64, schedule: &Schedule) -> Result<f64> {
    let (alpha, sigma) = schedule.alpha_sigma(t)?;
    let dot: f64 = c.iter().zip(x).map(|(a, b)| a * b).sum();
    let sq: f64 = c.iter().map(|v| v * v).sum();
    Ok(alpha * dot - 0.5 * sq * sigma * sigma)
}

/// [`gaussian_linear_guidance`] as a sampler guidance field.
#[derive(Debug, Clone)]
pub struct GaussianLinearGuidance {
    pub c: Vec<f64>,
    pub schedule: Schedule,
}

impl GaussianLinearGuidance {
    pub fn new(c: Vec<f64>, schedule: Schedule) -> Self {
        GaussianLinearGuidance { c, schedule }
    }
}

impl GuidanceField for GaussianLinearGuidance {
    fn energy_gradient(&self, x: ArrayView2<'_, f64>, t: f64, _cond: Option<ArrayView2<'_, f64>>)
        -> Result<Array2<f64>> {
        if x.ncols() != self.c.len() {
            return Err(Error::DimMismatch {
                expected: self.c.len(),
                got: x.ncols(),
                context: "gaussian-linear guidance",
            });
        }
        let g = gaussian_linear_guidance(&self.c, t, &self.schedule)?;
        let row = ndarray::ArrayView1::from(&g);
        Ok(Array2::from_shape_fn(x.raw_dim(), |(_, j)| row[j]))
    }
}

/// Self-normalized importance resampling of the data with weights
/// `softmax(-beta E)`: exact samples of the tilted empirical distribution.
pub fn resample_ground_truth(data: ArrayView2<'_, f64>, energy: &EnergySpec, n: usize, seed: u64) -> Result<SampleBatch> {
    if data.nrows() == 0 {
        return Err(Error::invalid("cannot resample an empty dataset"));
    }
    let scaled = energy.scaled_rows(data);
    let probs = softmax(&scaled.iter().map(|e| -e).collect::<Vec<_>>());
    if probs.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("resampling weights"));
    }
    let dist = WeightedIndex::new(&probs).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Array2::zeros((n, data.ncols()));
    for mut row in points.rows_mut() {
        row.assign(&data.row(dist.sample(&mut rng)));
    }
    Ok(SampleBatch { points })
}

//! Probability-flow ODE samplers with energy guidance.
//!
//! The guided noise prediction is `eps + s * sigma_t * grad f(x_t, t)`, which
//! corresponds to the score `grad log q_t - s * grad E_t`. Two integrators are
//! provided: Euler on a grid uniform in `t`, and a second-order midpoint
//! exponential integrator on a grid uniform in log-SNR.

use ndarray::{Array2, ArrayView2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::energy::EnergySpec;
use crate::error::{Error, Result};
use crate::schedule::Schedule;

/// A noise-prediction model `eps(x_t, t[, c])`.
pub trait NoiseModel {
    fn schedule(&self) -> &Schedule;
    fn data_dim(&self) -> usize;
    fn predict_noise(&self, x: ArrayView2<'_, f64>, t: f64, cond: Option<ArrayView2<'_, f64>>)
        -> Result<Array2<f64>>;
    /// Noise prediction and the row-wise product `cotangent^T d eps / d x`.
    fn noise_vjp(
        &self,
        x: ArrayView2<'_, f64>,
        t: f64,
        cond: Option<ArrayView2<'_, f64>>,
        cotangent: ArrayView2<'_, f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)>;
}

/// Something that supplies `grad_x E_t(x, t[, c])` row by row.
pub trait GuidanceField {
    fn energy_gradient(&self, x: ArrayView2<'_, f64>, t: f64, cond: Option<ArrayView2<'_, f64>>)
        -> Result<Array2<f64>>;
}

/// How the sampler obtains the energy gradient.
#[derive(Clone, Copy)]
pub enum Guidance<'a> {
    None,
    Field(&'a dyn GuidanceField),
    /// Evaluate the data-space energy at the prior's denoised estimate.
    Dps(&'a EnergySpec),
}

/// Exact noise prediction `sigma_t x` for data distributed as `N(0, I)`.
#[derive(Debug, Clone, Copy)]
pub struct StandardNormalScore {
    pub schedule: Schedule,
    pub dim: usize,
}

impl NoiseModel for StandardNormalScore {
    fn schedule(&self) -> &Schedule {
        &self.schedule
    }
    fn data_dim(&self) -> usize {
        self.dim
    }
    fn predict_noise(&self, x: ArrayView2<'_, f64>, t: f64, _cond: Option<ArrayView2<'_, f64>>)
        -> Result<Array2<f64>> {
        let (_, sigma) = self.schedule.alpha_sigma(t)?;
        Ok(&x * sigma)
    }
    fn noise_vjp(
        &self,
        x: ArrayView2<'_, f64>,
        t: f64,
        cond: Option<ArrayView2<'_, f64>>,
        cotangent: ArrayView2<'_, f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        let (_, sigma) = self.schedule.alpha_sigma(t)?;
        Ok((self.predict_noise(x, t, cond)?, &cotangent * sigma))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    Euler,
    Solver2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub method: SolverKind,
    pub guidance_scale: f64,
    /// Defaults to the schedule's `t_max`.
    pub t_start: Option<f64>,
    /// Defaults to the schedule's `t_min`.
    pub t_end: Option<f64>,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 25,
            method: SolverKind::Solver2,
            guidance_scale: 1.0,
            t_start: None,
            t_end: None,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn new(method: SolverKind, steps: usize, guidance_scale: f64, seed: u64) -> Self {
        SamplerConfig {
            steps,
            method,
            guidance_scale,
            seed,
            ..SamplerConfig::default()
        }
    }

    /// Resolved `(t_start, t_end)` after validation against a schedule.
    pub fn time_range(&self, schedule: &Schedule) -> Result<(f64, f64)> {
        let t_start = self.t_start.unwrap_or(schedule.t_max);
        let t_end = self.t_end.unwrap_or(schedule.t_min);
        if self.steps == 0 {
            return Err(Error::domain("sampler needs at least one step"));
        }
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return Err(Error::domain(format!(
                "guidance scale must be >= 0, got {}",
                self.guidance_scale
            )));
        }
        if !(t_end > 0.0 && t_end < t_start && t_start <= schedule.t_max) {
            return Err(Error::domain(format!(
                "sampler needs 0 < t_end < t_start <= {}, got t_start={t_start} t_end={t_end}",
                schedule.t_max
            )));
        }
        if self.method == SolverKind::Solver2 && t_end < schedule.t_min {
            return Err(Error::domain(format!(
                "solver2 needs t_end >= t_min = {}",
                schedule.t_min
            )));
        }
        Ok((t_start, t_end))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub points: Array2<f64>,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }
}

/// Standard normal draws, filled row-major from a seeded stream.
pub fn initial_noise(n: usize, dim: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((n, dim), || StandardNormal.sample(&mut rng))
}

/// Denoised estimate and energy gradient for DPS guidance, row by row.
///
/// With `x_hat = (x - sigma eps(x)) / alpha` the gradient of `beta E(x_hat)`
/// with respect to `x` is `(g - sigma J^T g) / alpha` where `g = beta grad E(x_hat)`
/// and `J` is the Jacobian of the noise prediction. The `1 / alpha` factor grows
/// without bound as `t` approaches `t_max`.
pub fn dps_batch(
    prior: &dyn NoiseModel,
    energy: &EnergySpec,
    x: ArrayView2<'_, f64>,
    t: f64,
    cond: Option<ArrayView2<'_, f64>>,
) -> Result<(Vec<f64>, Array2<f64>, Array2<f64>)> {
    let (alpha, sigma) = prior.schedule().alpha_sigma(t)?;
    let eps = prior.predict_noise(x, t, cond)?;
    let x_hat = (&x - &(&eps * sigma)) / alpha;
    let mut values = Vec::with_capacity(x.nrows());
    let mut g = Array2::zeros(x.raw_dim());
    for (i, row) in x_hat.rows().into_iter().enumerate() {
        let p = row.to_vec();
        values.push(energy.beta * energy.energy.value(&p));
        let ge = energy.energy.gradient(&p);
        for (gj, v) in g.row_mut(i).iter_mut().zip(ge) {
            *gj = energy.beta * v;
        }
    }
    let (_, jtg) = prior.noise_vjp(x, t, cond, g.view())?;
    let grad = (&g - &(&jtg * sigma)) / alpha;
    Ok((values, grad, x_hat))
}

/// DPS energy `beta E(x_hat)` and its gradient with respect to `x_t` at one point.
pub fn dps_energy_and_grad(
    prior: &dyn NoiseModel,
    energy: &EnergySpec,
    x_t: &[f64],
    t: f64,
    cond: Option<&[f64]>,
) -> Result<(f64, Vec<f64>)> {
    let xv = ArrayView2::from_shape((1, x_t.len()), x_t).map_err(|e| Error::invalid(e.to_string()))?;
    let cv = cond
        .map(|c| ArrayView2::from_shape((1, c.len()), c))
        .transpose()
        .map_err(|e| Error::invalid(e.to_string()))?;
    let (values, grad, _) = dps_batch(prior, energy, xv, t, cv)?;
    Ok((values[0], grad.into_raw_vec_and_offset().0))
}

/// Guided noise prediction `eps + s * sigma_t * grad E_t`.
pub fn guided_epsilon(
    prior: &dyn NoiseModel,
    guidance: &Guidance<'_>,
    x: ArrayView2<'_, f64>,
    t: f64,
    cond: Option<ArrayView2<'_, f64>>,
    scale: f64,
) -> Result<Array2<f64>> {
    if x.ncols() != prior.data_dim() {
        return Err(Error::DimMismatch {
            expected: prior.data_dim(),
            got: x.ncols(),
            context: "sampler state",
        });
    }
    let mut eps = prior.predict_noise(x, t, cond)?;
    if scale == 0.0 {
        return Ok(eps);
    }
    let grad = match guidance {
        Guidance::None => return Ok(eps),
        Guidance::Field(field) => field.energy_gradient(x, t, cond)?,
        Guidance::Dps(energy) => dps_batch(prior, energy, x, t, cond)?.1,
    };
    let (_, sigma) = prior.schedule().alpha_sigma(t)?;
    eps.scaled_add(scale * sigma, &grad);
    Ok(eps)
}

fn check_state(x: &Array2<f64>, step: usize) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Divergence {
            step,
            detail: "non-finite sampler state".into(),
        })
    }
}

fn check_init(prior: &dyn NoiseModel, x: &Array2<f64>, cond: Option<ArrayView2<'_, f64>>) -> Result<()> {
    if x.ncols() != prior.data_dim() {
        return Err(Error::DimMismatch {
            expected: prior.data_dim(),
            got: x.ncols(),
            context: "initial state",
        });
    }
    if let Some(c) = cond {
        if c.nrows() != x.nrows() {
            return Err(Error::DimMismatch {
                expected: x.nrows(),
                got: c.nrows(),
                context: "condition rows",
            });
        }
    }
    Ok(())
}

/// Euler integration of `dx/dt = f(t) x + 0.5 g^2(t) eps_tilde / sigma_t`
/// from `x_init` at `t_start` down to `t_end`.
pub fn euler_from(
    prior: &dyn NoiseModel,
    guidance: &Guidance<'_>,
    config: &SamplerConfig,
    x_init: Array2<f64>,
    cond: Option<ArrayView2<'_, f64>>,
) -> Result<SampleBatch> {
    let schedule = *prior.schedule();
    let (t_start, t_end) = config.time_range(&schedule)?;
    check_init(prior, &x_init, cond)?;
    let mut x = x_init;
    let n = config.steps;
    for k in 0..n {
        let t = t_start + (t_end - t_start) * k as f64 / n as f64;
        let t_next = t_start + (t_end - t_start) * (k + 1) as f64 / n as f64;
        let dt = t_next - t;
        let (_, sigma) = schedule.alpha_sigma(t)?;
        let (drift, g2) = schedule.drift_diffusion(t)?;
        let eps = guided_epsilon(prior, guidance, x.view(), t, cond, config.guidance_scale)?;
        let coef = 0.5 * g2 / sigma;
        Zip::from(&mut x).and(&eps).for_each(|xi, &e| {
            *xi += dt * (drift * *xi + coef * e);
        });
        check_state(&x, k)?;
    }
    Ok(SampleBatch { points: x })
}

/// Times of a grid uniform in log-SNR from `t_start` to `t_end`, with the
/// log-SNR midpoint of every interval.
pub fn log_snr_grid(schedule: &Schedule, t_start: f64, t_end: f64, steps: usize) -> Result<Vec<(f64, f64, f64)>> {
    let l_start = schedule.log_snr(t_start)?;
    let l_end = schedule.log_snr(t_end)?;
    let lam = |k: f64| l_start + (l_end - l_start) * k / steps as f64;
    let mut knots = Vec::with_capacity(steps + 1);
    knots.push(t_start);
    for k in 1..steps {
        knots.push(schedule.inverse_log_snr(lam(k as f64))?);
    }
    knots.push(t_end);
    (0..steps)
        .map(|k| {
            let t_mid = schedule.inverse_log_snr(lam(k as f64 + 0.5))?;
            Ok((knots[k], t_mid, knots[k + 1]))
        })
        .collect()
}

/// Second-order midpoint exponential integrator on a log-SNR-uniform grid.
pub fn solver2_from(
    prior: &dyn NoiseModel,
    guidance: &Guidance<'_>,
    config: &SamplerConfig,
    x_init: Array2<f64>,
    cond: Option<ArrayView2<'_, f64>>,
) -> Result<SampleBatch> {
    let schedule = *prior.schedule();
    let (t_start, t_end) = config.time_range(&schedule)?;
    check_init(prior, &x_init, cond)?;
    let grid = log_snr_grid(&schedule, t_start, t_end, config.steps)?;
    let mut x = x_init;
    for (k, &(ta, tm, tb)) in grid.iter().enumerate() {
        let (aa, _) = schedule.alpha_sigma(ta)?;
        let (am, sm) = schedule.alpha_sigma(tm)?;
        let (ab, sb) = schedule.alpha_sigma(tb)?;
        let h = schedule.log_snr(tb)? - schedule.log_snr(ta)?;
        let eps_a = guided_epsilon(prior, guidance, x.view(), ta, cond, config.guidance_scale)?;
        let mut u = &x * (am / aa);
        u.scaled_add(-sm * (0.5 * h).exp_m1(), &eps_a);
        let eps_m = guided_epsilon(prior, guidance, u.view(), tm, cond, config.guidance_scale)?;
        x *= ab / aa;
        x.scaled_add(-sb * h.exp_m1(), &eps_m);
        check_state(&x, k)?;
    }
    Ok(SampleBatch { points: x })
}

/// Integrates from `x_init` with the configured solver.
pub fn sample_from(
    prior: &dyn NoiseModel,
    guidance: &Guidance<'_>,
    config: &SamplerConfig,
    x_init: Array2<f64>,
    cond: Option<ArrayView2<'_, f64>>,
) -> Result<SampleBatch> {
    match config.method {
        SolverKind::Euler => euler_from(prior, guidance, config, x_init, cond),
        SolverKind::Solver2 => solver2_from(prior, guidance, config, x_init, cond),
    }
}

pub fn euler_sample(
    prior: &dyn NoiseModel,
    guidance: &Guidance<'_>,
    config: &SamplerConfig,
    n: usize,
    cond: Option<ArrayView2<'_, f64>>,
) -> Result<SampleBatch> {
    let x = initial_noise(n, prior.data_dim(), config.seed);
    euler_from(prior, guidance, config, x, cond)
}

pub fn solver2_sample(
    prior: &dyn NoiseModel,
    guidance: &Guidance<'_>,
    config: &SamplerConfig,
    n: usize,
    cond: Option<ArrayView2<'_, f64>>,
) -> Result<SampleBatch> {
    let x = initial_noise(n, prior.data_dim(), config.seed);
    solver2_from(prior, guidance, config, x, cond)
}

/// Draws `n` terminal points from `N(0, I)` with the config seed and integrates
/// them with the configured solver.
pub fn sample(
    prior: &dyn NoiseModel,
    guidance: &Guidance<'_>,
    config: &SamplerConfig,
    n: usize,
    cond: Option<ArrayView2<'_, f64>>,
) -> Result<SampleBatch> {
    let x = initial_noise(n, prior.data_dim(), config.seed);
    sample_from(prior, guidance, config, x, cond)
}

/// Mean and covariance of the rows of a point matrix.
pub fn moments(points: ArrayView2<'_, f64>) -> (Vec<f64>, Array2<f64>) {
    let n = points.nrows() as f64;
    let mean = points.mean_axis(Axis(0)).expect("non-empty sample");
    let centered = &points - &mean;
    let cov = centered.t().dot(&centered) / n;
    (mean.to_vec(), cov)
}

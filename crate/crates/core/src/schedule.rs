//! Variance-preserving forward process with a linear noise-rate schedule.
//!
//! The log mean coefficient is the quadratic
//! `log alpha(t) = -(beta1 - beta0) / 4 * t^2 - beta0 / 2 * t`, and
//! `sigma(t) = sqrt(1 - alpha(t)^2)`, so `alpha^2 + sigma^2 = 1` for every `t`.
//! The perturbation kernel is `x_t = alpha(t) x_0 + sigma(t) eps`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub beta0: f64,
    pub beta1: f64,
    pub t_max: f64,
    /// Smallest time visited by samplers and training; keeps log-SNR finite.
    pub t_min: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            beta0: 0.1,
            beta1: 20.0,
            t_max: 1.0,
            t_min: 1e-3,
        }
    }
}

impl Schedule {
    pub fn new(beta0: f64, beta1: f64, t_max: f64) -> Result<Self> {
        let s = Schedule {
            beta0,
            beta1,
            t_max,
            ..Schedule::default()
        };
        s.validate()?;
        Ok(s)
    }

    pub fn with_t_min(mut self, t_min: f64) -> Result<Self> {
        self.t_min = t_min;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.beta0, self.beta1, self.t_max, self.t_min]
            .iter()
            .all(|v| v.is_finite());
        if !finite || !(0.0 < self.beta0 && self.beta0 < self.beta1) || self.t_max <= 0.0 {
            return Err(Error::domain(format!(
                "schedule requires 0 < beta0 < beta1 and t_max > 0, got beta0={} beta1={} t_max={}",
                self.beta0, self.beta1, self.t_max
            )));
        }
        if !(self.t_min > 0.0 && self.t_min < self.t_max) {
            return Err(Error::domain(format!(
                "t_min must lie in (0, t_max), got {}",
                self.t_min
            )));
        }
        Ok(())
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !(0.0..=self.t_max).contains(&t) {
            return Err(Error::domain(format!(
                "time {t} outside [0, {}]",
                self.t_max
            )));
        }
        Ok(())
    }

    /// `log alpha(t)`, unchecked.
    #[inline]
    pub fn log_alpha(&self, t: f64) -> f64 {
        -(self.beta1 - self.beta0) / 4.0 * t * t - self.beta0 / 2.0 * t
    }

    /// `(alpha, sigma)` without domain checks; used on hot paths after the
    /// caller has validated its time grid.
    #[inline]
    pub fn alpha_sigma_unchecked(&self, t: f64) -> (f64, f64) {
        let la = self.log_alpha(t);
        // 1 - alpha^2 = -expm1(2 log alpha) keeps sigma accurate near t = 0.
        (la.exp(), (-(2.0 * la).exp_m1()).sqrt())
    }

    pub fn alpha_sigma(&self, t: f64) -> Result<(f64, f64)> {
        self.check_time(t)?;
        Ok(self.alpha_sigma_unchecked(t))
    }

    /// Drift `f(t) = d log alpha / dt` and squared diffusion `g^2(t)` of the
    /// forward SDE `dx = f x dt + g dW`.
    pub fn drift_diffusion(&self, t: f64) -> Result<(f64, f64)> {
        self.check_time(t)?;
        Ok(self.drift_diffusion_unchecked(t))
    }

    #[inline]
    pub fn drift_diffusion_unchecked(&self, t: f64) -> (f64, f64) {
        let rate = self.beta0 + (self.beta1 - self.beta0) * t;
        (-0.5 * rate, rate)
    }

    /// `log(alpha / sigma)`. Infinite at `t = 0`, which is reported as a
    /// domain error.
    pub fn log_snr(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        if t == 0.0 {
            return Err(Error::domain("log-SNR is +infinity at t = 0"));
        }
        Ok(self.log_snr_unchecked(t))
    }

    #[inline]
    pub fn log_snr_unchecked(&self, t: f64) -> f64 {
        let la = self.log_alpha(t);
        la - 0.5 * (-(2.0 * la).exp_m1()).ln()
    }

    /// Inverts `log_snr` on `[t_min, t_max]` by bisection.
    pub fn inverse_log_snr(&self, lambda: f64) -> Result<f64> {
        let lo_val = self.log_snr_unchecked(self.t_max);
        let hi_val = self.log_snr_unchecked(self.t_min);
        if !lambda.is_finite() || lambda < lo_val - 1e-12 || lambda > hi_val + 1e-12 {
            return Err(Error::domain(format!(
                "log-SNR {lambda} outside [{lo_val}, {hi_val}]"
            )));
        }
        // log_snr is decreasing: small t has large lambda.
        let (mut lo, mut hi) = (self.t_min, self.t_max);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let v = self.log_snr_unchecked(mid);
            if (v - lambda).abs() < 1e-12 {
                return Ok(mid);
            }
            if v > lambda {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= f64::EPSILON * hi {
                break;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    /// Samples from the perturbation kernel given a unit-Gaussian draw.
    pub fn perturb(&self, x0: &[f64], t: f64, noise: &[f64]) -> Result<Vec<f64>> {
        self.check_time(t)?;
        if x0.len() != noise.len() {
            return Err(Error::DimMismatch {
                expected: x0.len(),
                got: noise.len(),
                context: "perturb noise",
            });
        }
        if x0.iter().chain(noise).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("perturb input"));
        }
        let (a, s) = self.alpha_sigma_unchecked(t);
        Ok(x0.iter().zip(noise).map(|(x, e)| a * x + s * e).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn boundary_values() {
        let s = Schedule::default();
        assert_eq!(s.alpha_sigma(0.0).unwrap(), (1.0, 0.0));
        let (a, sg) = s.alpha_sigma(1.0).unwrap();
        assert_relative_eq!(a, (-5.025f64).exp(), max_relative = 1e-14);
        assert_relative_eq!(a, 6.571e-3, max_relative = 1e-3);
        assert_relative_eq!(sg, 0.999978, epsilon = 1e-6);
        let (a, _) = s.alpha_sigma(0.5).unwrap();
        assert_relative_eq!(a, (-1.26875f64).exp(), max_relative = 1e-14);
        assert_relative_eq!(a, 0.28118, epsilon = 1e-5);
    }

    #[test]
    fn rejects_out_of_range_times() {
        let s = Schedule::default();
        assert!(s.alpha_sigma(-1e-9).is_err());
        assert!(s.alpha_sigma(1.0 + 1e-9).is_err());
        assert!(s.drift_diffusion(-0.1).is_err());
        assert!(s.log_snr(0.0).is_err());
        assert!(Schedule::new(20.0, 0.1, 1.0).is_err());
        assert!(Schedule::new(0.1, 20.0, 0.0).is_err());
    }

    #[test]
    fn variance_preserving_on_grid() {
        let s = Schedule::default();
        for i in 0..1000 {
            let t = i as f64 / 999.0;
            let (a, sg) = s.alpha_sigma(t).unwrap();
            assert!((a * a + sg * sg - 1.0).abs() < 1e-12, "t={t}");
        }
    }

    #[test]
    fn monotone_coefficients() {
        let s = Schedule::default();
        let mut prev = s.alpha_sigma(0.0).unwrap();
        for i in 1..=500 {
            let cur = s.alpha_sigma(i as f64 / 500.0).unwrap();
            assert!(cur.0 < prev.0 && cur.1 > prev.1);
            prev = cur;
        }
    }

    #[test]
    fn drift_and_diffusion_values() {
        let s = Schedule::default();
        let (f, g2) = s.drift_diffusion(0.0).unwrap();
        assert_relative_eq!(f, -0.05, epsilon = 1e-15);
        assert_relative_eq!(g2, 0.1, epsilon = 1e-15);
        assert_relative_eq!(s.drift_diffusion(1.0).unwrap().1, 20.0, epsilon = 1e-12);
        for i in 0..=20 {
            let (f, g2) = s.drift_diffusion(i as f64 / 20.0).unwrap();
            assert_eq!(g2, -2.0 * f);
        }
    }

    #[test]
    fn drift_diffusion_match_finite_differences() {
        let s = Schedule::default();
        let h = 1e-6;
        for i in 1..20 {
            let t = i as f64 / 20.0;
            let (f, g2) = s.drift_diffusion(t).unwrap();
            let fd_f = (s.log_alpha(t + h) - s.log_alpha(t - h)) / (2.0 * h);
            assert!(((fd_f - f) / f).abs() < 1e-6);
            let var = |u: f64| {
                let (_, sg) = s.alpha_sigma_unchecked(u);
                sg * sg
            };
            let dvar = (var(t + h) - var(t - h)) / (2.0 * h);
            let g2_fd = dvar - 2.0 * fd_f * var(t);
            assert!(((g2_fd - g2) / g2).abs() < 1e-6, "t={t}");
        }
    }

    #[test]
    fn log_snr_values() {
        let s = Schedule::default();
        let l1 = s.log_snr(1.0).unwrap();
        let (a, sg) = s.alpha_sigma(1.0).unwrap();
        assert_relative_eq!(l1, (a / sg).ln(), max_relative = 1e-12);
        assert!((l1 + 5.0250).abs() < 1e-3);
        assert!(s.log_snr(0.2).unwrap() > s.log_snr(0.8).unwrap());
    }

    #[test]
    fn log_snr_zero_where_alpha_equals_sigma() {
        let s = Schedule::default();
        // alpha = sigma <=> log alpha = -ln 2 / 2; solve the quadratic directly.
        let (qa, qb, qc) = ((s.beta1 - s.beta0) / 4.0, s.beta0 / 2.0, -0.5 * 2f64.ln());
        let t = (-qb + (qb * qb - 4.0 * qa * qc).sqrt()) / (2.0 * qa);
        assert!(s.log_snr(t).unwrap().abs() < 1e-12);
    }

    #[test]
    fn inverse_log_snr_round_trips() {
        let s = Schedule::default();
        let t = s.inverse_log_snr(s.log_snr(0.3).unwrap()).unwrap();
        assert!((t - 0.3).abs() < 1e-8);
        let t = s.inverse_log_snr(s.log_snr(1.0).unwrap()).unwrap();
        assert!((t - 1.0).abs() < 1e-10);
        let lo = s.log_snr(s.t_max).unwrap();
        let hi = s.log_snr(s.t_min).unwrap();
        let mid = 0.5 * (lo + hi);
        let t = s.inverse_log_snr(mid).unwrap();
        assert!((s.log_snr(t).unwrap() - mid).abs() < 1e-10);
        // closed form: alpha^2 = 1 / (1 + e^{-2 lambda}) gives a quadratic in t
        let target = -0.5 * (-2.0 * mid).exp().ln_1p();
        let (qa, qb) = ((s.beta1 - s.beta0) / 4.0, s.beta0 / 2.0);
        let exact = (-qb + (qb * qb - 4.0 * qa * target).sqrt()) / (2.0 * qa);
        assert!((t - exact).abs() < 1e-9);
        assert!(s.inverse_log_snr(hi + 1.0).is_err());
        assert!(s.inverse_log_snr(lo - 1.0).is_err());
    }

    #[test]
    fn perturb_boundaries() {
        let s = Schedule::default();
        let x0 = [1.5, -2.0];
        assert_eq!(s.perturb(&x0, 0.0, &[3.0, -7.0]).unwrap(), x0.to_vec());
        let (a, _) = s.alpha_sigma(0.4).unwrap();
        assert_eq!(s.perturb(&x0, 0.4, &[0.0, 0.0]).unwrap(), vec![a * 1.5, a * -2.0]);
        assert!(s.perturb(&x0, 0.4, &[0.0]).is_err());
        assert!(s.perturb(&[f64::NAN, 0.0], 0.4, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn perturb_moments_match_kernel() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let s = Schedule::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
        let mut xs = Vec::with_capacity(n);
        for _ in 0..n {
            let e: [f64; 2] = [StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)];
            let x = s.perturb(&[1.0, 0.0], 0.5, &e).unwrap();
            m[0] += x[0];
            m[1] += x[1];
            xs.push(x);
        }
        m.iter_mut().for_each(|mi| *mi /= n as f64);
        for x in &xs {
            v[0] += (x[0] - m[0]).powi(2);
            v[1] += (x[1] - m[1]).powi(2);
        }
        v.iter_mut().for_each(|vi| *vi /= n as f64);
        let a = 0.28118;
        assert!((m[0] - a).abs() < 0.01 && m[1].abs() < 0.01);
        assert!((v[0] - (1.0 - a * a)).abs() < 0.02 && (v[1] - (1.0 - a * a)).abs() < 0.02);
    }

    proptest::proptest! {
        #[test]
        fn perturb_is_linear(x in -5.0f64..5.0, y in -5.0f64..5.0, e in -3.0f64..3.0, k in -2.0f64..2.0, t in 0.0f64..1.0) {
            let s = Schedule::default();
            let lhs = s.perturb(&[k * x + y], t, &[k * e + e]).unwrap()[0];
            let rhs = k * s.perturb(&[x], t, &[e]).unwrap()[0] + s.perturb(&[y], t, &[e]).unwrap()[0];
            proptest::prop_assert!((lhs - rhs).abs() < 1e-9);
        }
    }
}

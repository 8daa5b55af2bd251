//! Data-space energy functions `E(x0)` and the tilted target `q0(x) exp(-beta E(x))`.
//!
//! The built-in energies have closed forms chosen so that their variation over
//! the benchmark box `[-4, 4]^2` is of order one:
//!
//! | name | `E(x)` | defaults |
//! |------|--------|----------|
//! | `linear` | `c . x` | `c = (0.25, 0)` |
//! | `quadratic_bowl` | `‖x - m‖² / s` | `m = (2, 2)`, `s = 16` |
//! | `half_plane_soft` | `1 / (1 + exp(n . x / w))` | `n = (1, 1)/√2`, `w = 0.5` |
//! | `ring_distance` | `(‖x‖ - r)² / s` | `r = 2`, `s = 4` |

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A differentiable scalar function of a data point.
pub trait EnergyFunction: Send + Sync {
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64]) -> Vec<f64>;
    fn name(&self) -> String;
}

/// An energy together with its inverse temperature.
#[derive(Clone)]
pub struct EnergySpec {
    pub energy: Arc<dyn EnergyFunction>,
    pub beta: f64,
}

impl fmt::Debug for EnergySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EnergySpec")
            .field("energy", &self.energy.name())
            .field("beta", &self.beta)
            .finish()
    }
}

impl EnergySpec {
    pub fn new(energy: Arc<dyn EnergyFunction>, beta: f64) -> Result<Self> {
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::domain(format!("inverse temperature must be >= 0, got {beta}")));
        }
        Ok(EnergySpec { energy, beta })
    }

    /// `beta * E(x)`.
    pub fn scaled(&self, x: &[f64]) -> f64 {
        self.beta * self.energy.value(x)
    }

    /// `beta * E` for every row of a point matrix.
    pub fn scaled_rows(&self, points: ndarray::ArrayView2<'_, f64>) -> Vec<f64> {
        points
            .rows()
            .into_iter()
            .map(|r| match r.as_slice() {
                Some(s) => self.scaled(s),
                None => self.scaled(&r.to_vec()),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub coeffs: Vec<f64>,
}

impl EnergyFunction for Linear {
    fn value(&self, x: &[f64]) -> f64 {
        self.coeffs.iter().zip(x).map(|(c, v)| c * v).sum()
    }
    fn gradient(&self, _x: &[f64]) -> Vec<f64> {
        self.coeffs.clone()
    }
    fn name(&self) -> String {
        format!("linear{:?}", self.coeffs)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticBowl {
    pub center: Vec<f64>,
    pub scale: f64,
}

impl EnergyFunction for QuadraticBowl {
    fn value(&self, x: &[f64]) -> f64 {
        self.center.iter().zip(x).map(|(m, v)| (v - m).powi(2)).sum::<f64>() / self.scale
    }
    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        self.center.iter().zip(x).map(|(m, v)| 2.0 * (v - m) / self.scale).collect()
    }
    fn name(&self) -> String {
        "quadratic_bowl".into()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HalfPlaneSoft {
    pub normal: Vec<f64>,
    pub width: f64,
}

impl EnergyFunction for HalfPlaneSoft {
    fn value(&self, x: &[f64]) -> f64 {
        let proj: f64 = self.normal.iter().zip(x).map(|(n, v)| n * v).sum();
        1.0 / (1.0 + (proj / self.width).exp())
    }
    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let e = self.value(x);
        let k = -e * (1.0 - e) / self.width;
        self.normal.iter().map(|n| k * n).collect()
    }
    fn name(&self) -> String {
        "half_plane_soft".into()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RingDistance {
    pub radius: f64,
    pub scale: f64,
}

impl EnergyFunction for RingDistance {
    fn value(&self, x: &[f64]) -> f64 {
        let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        (r - self.radius).powi(2) / self.scale
    }
    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if r == 0.0 {
            // not differentiable at the origin; report the zero subgradient
            return vec![0.0; x.len()];
        }
        let k = 2.0 * (r - self.radius) / (self.scale * r);
        x.iter().map(|v| k * v).collect()
    }
    fn name(&self) -> String {
        "ring_distance".into()
    }
}

/// Energy from a pair of closures.
pub struct FnEnergy<V, G> {
    pub label: String,
    pub value: V,
    pub gradient: G,
}

impl<V, G> EnergyFunction for FnEnergy<V, G>
where
    V: Fn(&[f64]) -> f64 + Send + Sync,
    G: Fn(&[f64]) -> Vec<f64> + Send + Sync,
{
    fn value(&self, x: &[f64]) -> f64 {
        (self.value)(x)
    }
    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        (self.gradient)(x)
    }
    fn name(&self) -> String {
        self.label.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuiltinEnergy {
    Linear,
    QuadraticBowl,
    HalfPlaneSoft,
    RingDistance,
}

impl BuiltinEnergy {
    pub const ALL: [BuiltinEnergy; 4] = [
        BuiltinEnergy::Linear,
        BuiltinEnergy::QuadraticBowl,
        BuiltinEnergy::HalfPlaneSoft,
        BuiltinEnergy::RingDistance,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BuiltinEnergy::Linear => "linear",
            BuiltinEnergy::QuadraticBowl => "quadratic_bowl",
            BuiltinEnergy::HalfPlaneSoft => "half_plane_soft",
            BuiltinEnergy::RingDistance => "ring_distance",
        }
    }
}

impl FromStr for BuiltinEnergy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        BuiltinEnergy::ALL
            .into_iter()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown energy {s:?}")))
    }
}

/// The 2-D built-in energy with its default parameters.
pub fn builtin_energy(name: BuiltinEnergy) -> Arc<dyn EnergyFunction> {
    let diag = std::f64::consts::FRAC_1_SQRT_2;
    match name {
        BuiltinEnergy::Linear => Arc::new(Linear { coeffs: vec![0.25, 0.0] }),
        BuiltinEnergy::QuadraticBowl => Arc::new(QuadraticBowl {
            center: vec![2.0, 2.0],
            scale: 16.0,
        }),
        BuiltinEnergy::HalfPlaneSoft => Arc::new(HalfPlaneSoft {
            normal: vec![diag, diag],
            width: 0.5,
        }),
        BuiltinEnergy::RingDistance => Arc::new(RingDistance {
            radius: 2.0,
            scale: 4.0,
        }),
    }
}

//! Intermediate-energy guidance models and their training.
//!
//! A guidance network `f(x_t, t[, c])` approximates the intermediate energy
//! `E_t` whose gradient is added to the prior noise prediction during
//! sampling. All methods share one sign convention: `f` estimates `E_t` of the
//! scaled energy `beta E`, so lower `f` means more probable under the target.

mod losses;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use losses::{
    cep_conditional_loss, cep_conditional_loss_by_class, cep_loss, cep_multi_t_loss, cep_self_norm_loss,
    classifier_loss, emse_loss, mse_loss, self_normalized_labels, soft_cross_entropy, unnormalized_labels,
    LossValue, EXP_CLAMP,
};
pub(crate) use losses::{contrast_rows, evaluate, Head, Rows};

use crate::energy::EnergySpec;
use crate::error::{Error, Result};
use crate::netcore::{load_checkpoint, save_checkpoint, NetInput, Network, NetworkSpec, OptimizerState};
use crate::prior::{divergence, gather, perturb_rows, CurveRecorder, LossCurve};
use crate::sampler::GuidanceField;
use crate::schedule::Schedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMethod {
    Cep,
    CepSelfNorm,
    CepMultiT,
    CepCond,
    Classifier,
    Mse,
    Emse,
    Dps,
    None,
}

impl GuidanceMethod {
    pub const ALL: [GuidanceMethod; 9] = [
        GuidanceMethod::Cep,
        GuidanceMethod::CepSelfNorm,
        GuidanceMethod::CepMultiT,
        GuidanceMethod::CepCond,
        GuidanceMethod::Classifier,
        GuidanceMethod::Mse,
        GuidanceMethod::Emse,
        GuidanceMethod::Dps,
        GuidanceMethod::None,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            GuidanceMethod::Cep => "cep",
            GuidanceMethod::CepSelfNorm => "cep_self_norm",
            GuidanceMethod::CepMultiT => "cep_multi_t",
            GuidanceMethod::CepCond => "cep_cond",
            GuidanceMethod::Classifier => "classifier",
            GuidanceMethod::Mse => "mse",
            GuidanceMethod::Emse => "emse",
            GuidanceMethod::Dps => "dps",
            GuidanceMethod::None => "none",
        }
    }

    /// Whether the method has a network to train.
    pub fn is_trained(self) -> bool {
        !matches!(self, GuidanceMethod::Dps | GuidanceMethod::None)
    }

    /// Whether the method conditions on class labels instead of an energy.
    pub fn is_conditional(self) -> bool {
        matches!(self, GuidanceMethod::CepCond | GuidanceMethod::Classifier)
    }
}

impl fmt::Display for GuidanceMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GuidanceMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        GuidanceMethod::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown guidance method {s:?}")))
    }
}

/// A guidance estimate of `E_t`, or a training-free method tag.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceModel {
    pub net: Option<Network>,
    pub method: GuidanceMethod,
    pub beta: f64,
    pub schedule: Schedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceDescriptor {
    pub method: GuidanceMethod,
    pub beta: f64,
    pub schedule: Schedule,
    /// File name of the network checkpoint header, next to the descriptor.
    pub checkpoint: Option<String>,
    /// Caller-supplied provenance, stored verbatim.
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub metadata: serde_json::Value,
}

impl GuidanceModel {
    pub fn new(net: Network, method: GuidanceMethod, beta: f64, schedule: Schedule) -> Result<Self> {
        if !method.is_trained() {
            return Err(Error::invalid(format!("{method} guidance carries no network")));
        }
        if net.spec().output_dim != 1 {
            return Err(Error::invalid("guidance network must have a scalar output"));
        }
        Ok(GuidanceModel {
            net: Some(net),
            method,
            beta,
            schedule,
        })
    }

    /// A model for DPS or unguided sampling.
    pub fn training_free(method: GuidanceMethod, beta: f64, schedule: Schedule) -> Result<Self> {
        if method.is_trained() {
            return Err(Error::invalid(format!("{method} guidance needs a trained network")));
        }
        Ok(GuidanceModel {
            net: None,
            method,
            beta,
            schedule,
        })
    }

    fn network(&self) -> Result<&Network> {
        self.net
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("{} guidance has no network", self.method)))
    }

    /// `f(x_t, t[, c])` for a batch sharing the time `t`.
    ///
    /// A classifier's outputs are logits only up to a per-point shift, so for
    /// that method the value is the normalized `-log p(c | x_t)`.
    pub fn values(&self, x: ArrayView2<'_, f64>, t: f64, cond: Option<ArrayView2<'_, f64>>) -> Result<Vec<f64>> {
        let times = vec![t; x.nrows()];
        let net = self.network()?;
        let out = net.forward_batch(&NetInput::new(x).with_time(&times).with_cond(cond))?;
        let mut values: Vec<f64> = out.iter().copied().collect();
        if let (GuidanceMethod::Classifier, Some(_)) = (self.method, cond) {
            let per_class = self.per_class(x, &times, false)?;
            for (i, v) in values.iter_mut().enumerate() {
                let f: Vec<f64> = per_class.iter().map(|(out, _)| out[[i, 0]]).collect();
                *v += losses::log_sum_exp_neg(&f);
            }
        }
        Ok(values)
    }

    /// Outputs and, if asked, input gradients at every one-hot class condition.
    fn per_class(&self, x: ArrayView2<'_, f64>, times: &[f64], with_grad: bool) -> Result<Vec<(Array2<f64>, Array2<f64>)>> {
        let net = self.network()?;
        let width = net.spec().cond_dim;
        (0..width)
            .map(|m| {
                let c = Array2::from_shape_fn((x.nrows(), width), |(_, j)| if j == m { 1.0 } else { 0.0 });
                let input = NetInput::new(x).with_time(times).with_cond(Some(c.view()));
                if with_grad {
                    net.input_grad_batch(&input)
                } else {
                    Ok((net.forward_batch(&input)?, Array2::zeros((0, 0))))
                }
            })
            .collect()
    }

    pub fn descriptor(&self, checkpoint: Option<String>) -> GuidanceDescriptor {
        GuidanceDescriptor {
            method: self.method,
            beta: self.beta,
            schedule: self.schedule,
            checkpoint,
            metadata: serde_json::Value::Null,
        }
    }

    /// Writes the descriptor to `path` and, for trained methods, the network
    /// checkpoint to `<stem>.net.json` / `<stem>.net.bin`.
    pub fn save(&self, path: &Path, seed: u64, metadata: serde_json::Value) -> Result<()> {
        let checkpoint = match &self.net {
            Some(net) => {
                let header = net_path(path);
                save_checkpoint(net, &header, seed, metadata.clone())?;
                header.file_name().map(|n| n.to_string_lossy().into_owned())
            }
            None => None,
        };
        let mut descriptor = self.descriptor(checkpoint);
        descriptor.metadata = metadata;
        let json = serde_json::to_string_pretty(&descriptor)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let d: GuidanceDescriptor = serde_json::from_str(&text)?;
        match d.checkpoint {
            Some(name) => {
                let header = path.with_file_name(name);
                let (net, _) = load_checkpoint(&header)?;
                GuidanceModel::new(net, d.method, d.beta, d.schedule)
            }
            None => GuidanceModel::training_free(d.method, d.beta, d.schedule),
        }
    }
}

fn net_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.net.json"))
}

impl GuidanceField for GuidanceModel {
    fn energy_gradient(&self, x: ArrayView2<'_, f64>, t: f64, cond: Option<ArrayView2<'_, f64>>)
        -> Result<Array2<f64>> {
        let times = vec![t; x.nrows()];
        let input = NetInput::new(x).with_time(&times).with_cond(cond);
        let mut grad = self.network()?.input_grad_batch(&input)?.1;
        if let (GuidanceMethod::Classifier, Some(_)) = (self.method, cond) {
            // grad of f(x, c) + LSE_m(-f(x, m)) = grad f(x, c) - E_{p(m | x)} grad f(x, m)
            let per_class = self.per_class(x, &times, true)?;
            for i in 0..x.nrows() {
                let f: Vec<f64> = per_class.iter().map(|(out, _)| out[[i, 0]]).collect();
                let norm = losses::log_sum_exp_neg(&f);
                for ((_, g), fm) in per_class.iter().zip(&f) {
                    grad.row_mut(i).scaled_add(-(-fm - norm).exp(), &g.row(i));
                }
            }
        }
        Ok(grad)
    }
}

/// Supplies a fixed condition vector to a conditional guidance field,
/// ignoring whatever condition the sampler carries.
pub struct FixedCondition<'a> {
    pub field: &'a dyn GuidanceField,
    pub cond: Vec<f64>,
}

impl GuidanceField for FixedCondition<'_> {
    fn energy_gradient(&self, x: ArrayView2<'_, f64>, t: f64, _cond: Option<ArrayView2<'_, f64>>)
        -> Result<Array2<f64>> {
        let c = Array2::from_shape_fn((x.nrows(), self.cond.len()), |(_, j)| self.cond[j]);
        self.field.energy_gradient(x, t, Some(c.view()))
    }
}

/// One-hot encoding of class ids.
pub fn one_hot(classes: &[usize], n_classes: usize) -> Array2<f64> {
    let mut m = Array2::zeros((classes.len(), n_classes));
    for (i, &c) in classes.iter().enumerate() {
        m[[i, c]] = 1.0;
    }
    m
}

/// Training data for a guidance model.
#[derive(Debug, Clone, Copy)]
pub struct GuidanceData<'a> {
    pub points: ArrayView2<'a, f64>,
    /// Class ids, required by the conditional methods.
    pub labels: Option<&'a [usize]>,
    pub n_classes: usize,
}

impl<'a> GuidanceData<'a> {
    pub fn unlabeled(points: ArrayView2<'a, f64>) -> Self {
        GuidanceData {
            points,
            labels: None,
            n_classes: 0,
        }
    }

    pub fn labeled(points: ArrayView2<'a, f64>, labels: &'a [usize], n_classes: usize) -> Self {
        GuidanceData {
            points,
            labels: Some(labels),
            n_classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceTrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    /// Contrast group size `K`.
    pub group_size: usize,
    /// Groups per gradient step; regression and classifier objectives use
    /// `group_size * groups_per_step` samples per step.
    pub groups_per_step: usize,
    pub log_every: usize,
}

impl Default for GuidanceTrainConfig {
    fn default() -> Self {
        GuidanceTrainConfig {
            steps: 20_000,
            learning_rate: 1e-4,
            group_size: 64,
            groups_per_step: 8,
            log_every: 100,
        }
    }
}

impl GuidanceTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.groups_per_step == 0 {
            return Err(Error::domain("guidance training needs steps >= 1 and groups_per_step >= 1"));
        }
        if self.group_size < 2 {
            return Err(Error::domain("contrast groups need at least 2 samples"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::domain("learning rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainedGuidance {
    pub model: GuidanceModel,
    pub curve: LossCurve,
    /// Total exponent clamps over training.
    pub clamped: usize,
}

struct StepContext<'a> {
    method: GuidanceMethod,
    schedule: Schedule,
    points: ArrayView2<'a, f64>,
    scaled: Vec<f64>,
    labels: Option<&'a [usize]>,
    n_classes: usize,
    k: usize,
    groups: usize,
}

impl StepContext<'_> {
    fn uniform_time<R: Rng>(&self, rng: &mut R) -> f64 {
        rng.random_range(self.schedule.t_min..self.schedule.t_max)
    }

    fn build<R: Rng>(&self, rng: &mut R) -> (Rows, Head, usize) {
        let n = self.k * self.groups;
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..self.points.nrows())).collect();
        let x0 = gather(self.points, &idx);
        let times: Vec<f64> = match self.method {
            GuidanceMethod::Cep | GuidanceMethod::CepSelfNorm | GuidanceMethod::CepCond => {
                let per_group: Vec<f64> = (0..self.groups).map(|_| self.uniform_time(rng)).collect();
                per_group.iter().flat_map(|&t| std::iter::repeat_n(t, self.k)).collect()
            }
            _ => (0..n).map(|_| self.uniform_time(rng)).collect(),
        };
        let noise = Array2::from_shape_simple_fn(x0.raw_dim(), || rng.sample::<f64, _>(StandardNormal));
        let scaled: Vec<f64> = idx.iter().map(|&i| self.scaled.get(i).copied().unwrap_or(0.0)).collect();
        let classes: Vec<usize> = match self.labels {
            Some(l) => idx.iter().map(|&i| l[i]).collect(),
            None => Vec::new(),
        };
        match self.method {
            GuidanceMethod::Cep | GuidanceMethod::CepMultiT | GuidanceMethod::CepSelfNorm => {
                let mut clamped = 0;
                let mut labels = Vec::with_capacity(n);
                for g in scaled.chunks(self.k) {
                    if self.method == GuidanceMethod::CepSelfNorm {
                        labels.extend(self_normalized_labels(g));
                    } else {
                        let (l, c) = unnormalized_labels(g);
                        clamped += c;
                        labels.extend(l);
                    }
                }
                let rows = contrast_rows(&self.schedule, x0.view(), times, noise.view(), None);
                (rows, Head::Contrast { group: self.k, labels }, clamped)
            }
            GuidanceMethod::CepCond => {
                let cond = one_hot(&classes, self.n_classes);
                let group_times: Vec<f64> = times.iter().step_by(self.k).copied().collect();
                let (rows, head) =
                    losses::paired_rows(&self.schedule, x0.view(), cond.view(), &group_times, noise.view(), self.k);
                (rows, head, 0)
            }
            GuidanceMethod::Classifier => {
                let x_t = perturb_rows(&self.schedule, x0.view(), &times, noise.view());
                let rows = losses::classifier_rows(x_t.view(), &times, self.n_classes);
                (
                    rows,
                    Head::Classifier {
                        classes,
                        n_classes: self.n_classes,
                    },
                    0,
                )
            }
            GuidanceMethod::Mse => {
                let rows = contrast_rows(&self.schedule, x0.view(), times, noise.view(), None);
                (rows, Head::Regression { targets: scaled }, 0)
            }
            GuidanceMethod::Emse => {
                let rows = contrast_rows(&self.schedule, x0.view(), times, noise.view(), None);
                (rows, Head::ExpRegression { targets: scaled }, 0)
            }
            GuidanceMethod::Dps | GuidanceMethod::None => unreachable!("rejected before training"),
        }
    }
}

/// Trains a guidance network by the objective of `method`.
///
/// Energy-based methods require `energy`; the conditional methods require
/// class labels in `data` and a network whose condition width equals the
/// number of classes. Deterministic given `seed`.
pub fn train_guidance(
    method: GuidanceMethod,
    data: GuidanceData<'_>,
    energy: Option<&EnergySpec>,
    spec: NetworkSpec,
    schedule: Schedule,
    config: &GuidanceTrainConfig,
    seed: u64,
) -> Result<TrainedGuidance> {
    if !method.is_trained() {
        return Err(Error::invalid(format!("{method} guidance is training-free")));
    }
    config.validate()?;
    schedule.validate()?;
    let points = data.points;
    if points.nrows() == 0 {
        return Err(Error::invalid("cannot train guidance on an empty dataset"));
    }
    if spec.input_dim != points.ncols() || spec.output_dim != 1 {
        return Err(Error::invalid(format!(
            "guidance network must map {} inputs to 1 output",
            points.ncols()
        )));
    }
    let (scaled, beta) = if method.is_conditional() {
        let labels = data
            .labels
            .ok_or_else(|| Error::invalid(format!("{method} guidance needs class labels")))?;
        losses::check_classes(labels, points.nrows(), data.n_classes)?;
        if spec.cond_dim != data.n_classes {
            return Err(Error::DimMismatch {
                expected: data.n_classes,
                got: spec.cond_dim,
                context: "guidance condition width",
            });
        }
        // Conditioning corresponds to the energy -log q(c | x) at unit temperature.
        (Vec::new(), 1.0)
    } else {
        let energy = energy.ok_or_else(|| Error::invalid(format!("{method} guidance needs an energy")))?;
        if spec.cond_dim != 0 {
            return Err(Error::invalid("energy guidance networks take no condition"));
        }
        let scaled = energy.scaled_rows(points);
        if scaled.iter().any(|e| !e.is_finite()) {
            return Err(Error::NonFinite("data energies"));
        }
        (scaled, energy.beta)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Network::init(spec, rng.random())?;
    let mut opt = OptimizerState::new(net.param_count(), config.learning_rate);
    let ctx = StepContext {
        method,
        schedule,
        points,
        scaled,
        labels: data.labels,
        n_classes: data.n_classes,
        k: config.group_size,
        groups: config.groups_per_step,
    };
    let mut curve = CurveRecorder::new(config.log_every);
    let mut clamped = 0;
    for step in 0..config.steps {
        let (rows, head, label_clamps) = ctx.build(&mut rng);
        let (value, grad) = evaluate(&net, &rows, &head, true).map_err(|e| divergence(step, e))?;
        let grad = grad.expect("requested");
        opt.adam_step(&mut net, &grad).map_err(|e| divergence(step, e))?;
        clamped += label_clamps + value.clamped;
        curve.push(value.value);
    }
    if clamped > 0 {
        log::warn!("{method} training clamped {clamped} exponent arguments");
    }
    Ok(TrainedGuidance {
        model: GuidanceModel::new(net, method, beta, schedule)?,
        curve: curve.finish(),
        clamped,
    })
}

#[cfg(test)]
mod tests;

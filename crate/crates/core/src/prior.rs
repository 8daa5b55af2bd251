//! Noise-prediction diffusion prior `eps(x_t, t[, c])` and its training loop.

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netcore::{load_checkpoint, save_checkpoint, NetInput, Network, NetworkSpec, OptimizerState};
use crate::sampler::NoiseModel;
use crate::schedule::Schedule;

#[derive(Debug, Clone, PartialEq)]
pub struct PriorModel {
    pub net: Network,
    pub schedule: Schedule,
}

/// Mean training loss over consecutive windows of `every` steps.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub every: usize,
    pub values: Vec<f64>,
}

impl LossCurve {
    pub fn first(&self) -> Option<f64> {
        self.values.first().copied()
    }

    pub fn last(&self) -> Option<f64> {
        self.values.last().copied()
    }
}

/// Accumulates per-step losses into window means.
#[derive(Debug, Clone)]
pub(crate) struct CurveRecorder {
    curve: LossCurve,
    sum: f64,
    count: usize,
}

impl CurveRecorder {
    pub(crate) fn new(every: usize) -> Self {
        CurveRecorder {
            curve: LossCurve {
                every: every.max(1),
                values: Vec::new(),
            },
            sum: 0.0,
            count: 0,
        }
    }

    pub(crate) fn push(&mut self, loss: f64) {
        self.sum += loss;
        self.count += 1;
        if self.count == self.curve.every {
            self.curve.values.push(self.sum / self.count as f64);
            self.sum = 0.0;
            self.count = 0;
        }
    }

    pub(crate) fn finish(mut self) -> LossCurve {
        if self.count > 0 {
            self.curve.values.push(self.sum / self.count as f64);
        }
        self.curve
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub log_every: usize,
}

impl Default for PriorTrainConfig {
    fn default() -> Self {
        PriorTrainConfig {
            steps: 20_000,
            batch_size: 512,
            learning_rate: 1e-4,
            log_every: 100,
        }
    }
}

impl PriorTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::domain("prior training needs steps >= 1 and batch_size >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::domain("learning rate must be positive"));
        }
        Ok(())
    }
}

/// Draws `t ~ U(t_min, t_max)` and `eps ~ N(0, I)` per row and forms `x_t`.
pub(crate) fn perturb_batch<R: Rng>(
    schedule: &Schedule,
    x0: ArrayView2<'_, f64>,
    rng: &mut R,
) -> (Array2<f64>, Vec<f64>, Array2<f64>) {
    let n = x0.nrows();
    let times: Vec<f64> = (0..n)
        .map(|_| rng.random_range(schedule.t_min..schedule.t_max))
        .collect();
    let noise = Array2::from_shape_simple_fn(x0.raw_dim(), || rng.sample::<f64, _>(StandardNormal));
    let x_t = perturb_rows(schedule, x0, &times, noise.view());
    (x_t, times, noise)
}

/// `alpha(t_i) x0_i + sigma(t_i) noise_i` row by row.
pub(crate) fn perturb_rows(
    schedule: &Schedule,
    x0: ArrayView2<'_, f64>,
    times: &[f64],
    noise: ArrayView2<'_, f64>,
) -> Array2<f64> {
    let mut x_t = Array2::zeros(x0.raw_dim());
    for (i, &t) in times.iter().enumerate() {
        let (alpha, sigma) = schedule.alpha_sigma_unchecked(t);
        for j in 0..x0.ncols() {
            x_t[[i, j]] = alpha * x0[[i, j]] + sigma * noise[[i, j]];
        }
    }
    x_t
}

/// Sum of squared residuals per row, averaged over rows, and its output gradient.
fn noise_regression(out: ArrayView2<'_, f64>, noise: ArrayView2<'_, f64>) -> (f64, Array2<f64>) {
    let n = out.nrows() as f64;
    let resid = &out - &noise;
    let loss = resid.mapv(|v| v * v).sum() / n;
    (loss, resid * (2.0 / n))
}

impl PriorModel {
    pub fn new(net: Network, schedule: Schedule) -> Result<Self> {
        let spec = net.spec();
        if spec.output_dim != spec.input_dim {
            return Err(Error::DimMismatch {
                expected: spec.input_dim,
                got: spec.output_dim,
                context: "prior output dimension",
            });
        }
        schedule.validate()?;
        Ok(PriorModel { net, schedule })
    }

    pub fn cond_dim(&self) -> usize {
        self.net.spec().cond_dim
    }

    /// Saves the network with `metadata`; the schedule is always recorded so
    /// the checkpoint can be loaded. Non-object metadata is kept under `"extra"`.
    pub fn save(&self, header_path: &Path, seed: u64, metadata: serde_json::Value) -> Result<()> {
        let mut map = match metadata {
            serde_json::Value::Object(map) => map,
            serde_json::Value::Null => serde_json::Map::new(),
            other => serde_json::Map::from_iter([("extra".to_string(), other)]),
        };
        map.insert("kind".into(), "prior".into());
        map.insert("schedule".into(), serde_json::to_value(self.schedule)?);
        save_checkpoint(&self.net, header_path, seed, serde_json::Value::Object(map)).map(|_| ())
    }

    pub fn load(header_path: &Path) -> Result<Self> {
        let (net, header) = load_checkpoint(header_path)?;
        let schedule = match header.metadata.get("schedule") {
            Some(v) => serde_json::from_value(v.clone())?,
            None => return Err(Error::Format("prior checkpoint lacks a schedule".into())),
        };
        PriorModel::new(net, schedule)
    }
}

impl NoiseModel for PriorModel {
    fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    fn data_dim(&self) -> usize {
        self.net.spec().input_dim
    }

    fn predict_noise(&self, x: ArrayView2<'_, f64>, t: f64, cond: Option<ArrayView2<'_, f64>>)
        -> Result<Array2<f64>> {
        let times = vec![t; x.nrows()];
        let input = NetInput::new(x).with_time(&times).with_cond(cond);
        self.net.forward_batch(&input)
    }

    fn noise_vjp(
        &self,
        x: ArrayView2<'_, f64>,
        t: f64,
        cond: Option<ArrayView2<'_, f64>>,
        cotangent: ArrayView2<'_, f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        let times = vec![t; x.nrows()];
        let input = NetInput::new(x).with_time(&times).with_cond(cond);
        self.net.input_vjp_batch(&input, cotangent)
    }
}

/// Monte Carlo denoising loss `mean ||eps(alpha x0 + sigma eps, t) - eps||^2`
/// with fresh `t` and `eps` per row.
pub fn denoising_loss<R: Rng>(
    model: &PriorModel,
    x0: ArrayView2<'_, f64>,
    cond: Option<ArrayView2<'_, f64>>,
    rng: &mut R,
) -> Result<f64> {
    if x0.nrows() == 0 {
        return Err(Error::invalid("denoising loss needs a non-empty batch"));
    }
    let (x_t, times, noise) = perturb_batch(&model.schedule, x0, rng);
    let input = NetInput::new(x_t.view()).with_time(&times).with_cond(cond);
    let out = model.net.forward_batch(&input)?;
    Ok(noise_regression(out.view(), noise.view()).0)
}

pub(crate) fn gather(rows: ArrayView2<'_, f64>, idx: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((idx.len(), rows.ncols()));
    for (k, &i) in idx.iter().enumerate() {
        out.row_mut(k).assign(&rows.row(i));
    }
    out
}

/// Trains a noise-prediction network on `data` (optionally paired with
/// per-row conditions) with Adam and uniform time sampling.
pub fn train_prior(
    data: ArrayView2<'_, f64>,
    cond: Option<ArrayView2<'_, f64>>,
    spec: NetworkSpec,
    schedule: Schedule,
    config: &PriorTrainConfig,
    seed: u64,
) -> Result<(PriorModel, LossCurve)> {
    config.validate()?;
    if data.nrows() == 0 {
        return Err(Error::invalid("cannot train a prior on an empty dataset"));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("training data"));
    }
    if let Some(c) = cond {
        if c.nrows() != data.nrows() {
            return Err(Error::DimMismatch {
                expected: data.nrows(),
                got: c.nrows(),
                context: "condition rows",
            });
        }
    }
    if spec.input_dim != data.ncols() {
        return Err(Error::DimMismatch {
            expected: spec.input_dim,
            got: data.ncols(),
            context: "prior input dimension",
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = Network::init(spec, rng.random())?;
    let mut model = PriorModel::new(net, schedule)?;
    let mut opt = OptimizerState::new(model.net.param_count(), config.learning_rate);
    let mut curve = CurveRecorder::new(config.log_every);
    let mut idx = vec![0usize; config.batch_size];
    for step in 0..config.steps {
        for i in idx.iter_mut() {
            *i = rng.random_range(0..data.nrows());
        }
        let x0 = gather(data, &idx);
        let c = cond.map(|c| gather(c, &idx));
        let (x_t, times, noise) = perturb_batch(&model.schedule, x0.view(), &mut rng);
        let input = NetInput::new(x_t.view()).with_time(&times).with_cond(c.as_ref().map(|c| c.view()));
        let (loss, grad) = model
            .net
            .grad_params(&input, |out| noise_regression(out, noise.view()))
            .map_err(|e| divergence(step, e))?;
        opt.adam_step(&mut model.net, &grad).map_err(|e| divergence(step, e))?;
        curve.push(loss);
        if config.log_every > 0 && (step + 1) % (config.log_every * 20) == 0 {
            log::debug!("prior step {} loss {loss:.5}", step + 1);
        }
    }
    Ok((model, curve.finish()))
}

pub(crate) fn divergence(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(what) => Error::Divergence {
            step,
            detail: format!("non-finite {what}"),
        },
        other => other,
    }
}

//! Support actions, in-support contrastive guidance and guided policy evaluation.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::env::{clip_action, PointGoalEnv, TransitionDataset};
use super::q::QModel;
use crate::energy::{EnergyFunction, EnergySpec};
use crate::error::{Error, Result};
use crate::guidance::{
    cep_self_norm_loss, contrast_rows, evaluate, self_normalized_labels, GuidanceMethod, GuidanceModel, Head,
    LossValue, TrainedGuidance,
};
use crate::netcore::{Network, NetworkSpec, OptimizerState, TimeEmbedding};
use crate::prior::{divergence, CurveRecorder, PriorModel};
use crate::sampler::{initial_noise, sample_from, Guidance, SamplerConfig, SolverKind};
use crate::schedule::Schedule;

/// Diffusion steps used for every action draw.
pub const POLICY_SAMPLER_STEPS: usize = 15;

const CHUNK_ROWS: usize = 8192;

/// `K` behavior actions per state, stored as rows `i * k .. (i + 1) * k`.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportActionSet {
    pub k: usize,
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SupportFile {
    k: usize,
    states: Vec<[f64; 2]>,
    actions: BTreeMap<usize, Vec<[f64; 2]>>,
}

impl SupportActionSet {
    pub fn n_states(&self) -> usize {
        self.states.nrows()
    }

    pub fn for_state(&self, i: usize) -> ArrayView2<'_, f64> {
        self.actions.slice(s![i * self.k..(i + 1) * self.k, ..])
    }

    /// JSON with actions keyed by state index.
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let pair = |r: ndarray::ArrayView1<'_, f64>| [r[0], r[1]];
        let file = SupportFile {
            k: self.k,
            states: self.states.rows().into_iter().map(pair).collect(),
            actions: (0..self.n_states())
                .map(|i| (i, self.for_state(i).rows().into_iter().map(pair).collect()))
                .collect(),
        };
        crate::io::write_json(path, &file)
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: SupportFile = serde_json::from_str(&text)?;
        let n = file.states.len();
        let mut actions = Array2::zeros((n * file.k, 2));
        for i in 0..n {
            let rows = file
                .actions
                .get(&i)
                .filter(|r| r.len() == file.k)
                .ok_or_else(|| Error::Format(format!("state {i} does not have {} support actions", file.k)))?;
            for (j, a) in rows.iter().enumerate() {
                actions[[i * file.k + j, 0]] = a[0];
                actions[[i * file.k + j, 1]] = a[1];
            }
        }
        let states = Array2::from_shape_vec((n, 2), file.states.into_iter().flatten().collect())
            .map_err(|e| Error::Format(e.to_string()))?;
        Ok(SupportActionSet { k: file.k, states, actions })
    }
}

/// Sampler settings for action draws: the second-order solver at 15 steps.
pub fn policy_sampler_config(guidance_scale: f64, seed: u64) -> SamplerConfig {
    SamplerConfig::new(SolverKind::Solver2, POLICY_SAMPLER_STEPS, guidance_scale, seed)
}

fn repeat_rows(states: ArrayView2<'_, f64>, k: usize) -> Array2<f64> {
    states.select(Axis(0), &(0..states.nrows() * k).map(|r| r / k).collect::<Vec<_>>())
}

/// Draws `k` actions per state from the state-conditioned behavior model and
/// clips them to the action box. The terminal noise comes from the sampler seed.
pub fn generate_support_actions(
    behavior: &PriorModel,
    states: ArrayView2<'_, f64>,
    k: usize,
    sampler: &SamplerConfig,
) -> Result<SupportActionSet> {
    if k == 0 {
        return Err(Error::domain("support sets need k >= 1"));
    }
    if behavior.cond_dim() != states.ncols() {
        return Err(Error::DimMismatch {
            expected: behavior.cond_dim(),
            got: states.ncols(),
            context: "behavior condition",
        });
    }
    let cond = repeat_rows(states, k);
    let noise = initial_noise(cond.nrows(), 2, sampler.seed);
    let mut actions = Array2::zeros((cond.nrows(), 2));
    let mut start = 0;
    while start < cond.nrows() {
        let end = (start + CHUNK_ROWS).min(cond.nrows());
        let x = noise.slice(s![start..end, ..]).to_owned();
        let c = cond.slice(s![start..end, ..]);
        let out = sample_from(behavior, &Guidance::None, sampler, x, Some(c))?;
        actions.slice_mut(s![start..end, ..]).assign(&out.points);
        start = end;
    }
    actions.mapv_inplace(|v| v.clamp(-1.0, 1.0));
    Ok(SupportActionSet {
        k,
        states: states.to_owned(),
        actions,
    })
}

/// The energy `E(a) = -Q(s, a)` of actions at a fixed state.
pub struct QEnergy {
    pub q: QModel,
    pub state: [f64; 2],
}

impl QEnergy {
    fn one(&self, a: &[f64]) -> (ArrayView2<'_, f64>, Array2<f64>) {
        let s = ArrayView2::from_shape((1, 2), &self.state[..]).expect("2-vector");
        (s, Array2::from_shape_vec((1, 2), a.to_vec()).expect("2-vector"))
    }
}

impl EnergyFunction for QEnergy {
    fn value(&self, a: &[f64]) -> f64 {
        let (s, a) = self.one(a);
        self.q.value(s, a.view()).map(|v| -v[0]).unwrap_or(f64::NAN)
    }

    fn gradient(&self, a: &[f64]) -> Vec<f64> {
        let (s, a) = self.one(a);
        match self.q.action_gradient(s, a.view()) {
            Ok(g) => g.iter().map(|v| -v).collect(),
            Err(_) => vec![f64::NAN; 2],
        }
    }

    fn name(&self) -> String {
        "negative_q".into()
    }
}

/// `E = -Q(s, .)` at inverse temperature `beta`.
pub fn q_energy(q: &QModel, state: [f64; 2], beta: f64) -> Result<EnergySpec> {
    EnergySpec::new(Arc::new(QEnergy { q: q.clone(), state }), beta)
}

/// Self-normalized contrastive loss over the support actions of one state,
/// with labels `softmax(beta Q(s, a_i))` and predictions `softmax(-f)` over the
/// perturbed actions conditioned on the state.
#[allow(clippy::too_many_arguments)]
pub fn in_support_cep_loss(
    net: &Network,
    schedule: &Schedule,
    state: [f64; 2],
    support_actions: ArrayView2<'_, f64>,
    q: &QModel,
    beta: f64,
    t: f64,
    noise: ArrayView2<'_, f64>,
) -> Result<LossValue> {
    if support_actions.nrows() < 2 {
        return Err(Error::invalid("in-support contrast needs at least 2 actions"));
    }
    if noise.dim() != support_actions.dim() {
        return Err(Error::DimMismatch {
            expected: support_actions.len(),
            got: noise.len(),
            context: "noise batch",
        });
    }
    schedule.alpha_sigma(t)?;
    let adapter = QEnergy { q: q.clone(), state };
    let scaled: Vec<f64> = support_actions
        .rows()
        .into_iter()
        .map(|a| beta * adapter.value(&a.to_vec()))
        .collect();
    let labels = self_normalized_labels(&scaled);
    let cond = repeat_rows(ArrayView2::from_shape((1, 2), &state[..]).expect("2-vector"), support_actions.nrows());
    let times = vec![t; support_actions.nrows()];
    let rows = contrast_rows(schedule, support_actions, times, noise, Some(cond.view()));
    let head = Head::Contrast {
        group: support_actions.nrows(),
        labels,
    };
    Ok(evaluate(net, &rows, &head, false)?.0)
}

/// The same loss through the general self-normalized objective and the `E = -Q` adapter.
#[allow(clippy::too_many_arguments)]
pub fn in_support_cep_loss_via_adapter(
    net: &Network,
    schedule: &Schedule,
    state: [f64; 2],
    support_actions: ArrayView2<'_, f64>,
    q: &QModel,
    beta: f64,
    t: f64,
    noise: ArrayView2<'_, f64>,
) -> Result<LossValue> {
    let energy = q_energy(q, state, beta)?;
    let cond = repeat_rows(ArrayView2::from_shape((1, 2), &state[..]).expect("2-vector"), support_actions.nrows());
    cep_self_norm_loss(net, schedule, support_actions, &energy, t, noise, Some(cond.view()))
}

/// `f(a_t, t, s)` with a sinusoidal time embedding and the state as condition.
pub fn guidance_network_spec(hidden: &[usize]) -> NetworkSpec {
    NetworkSpec::mlp(2, hidden, 1)
        .with_time_embedding(TimeEmbedding::Sinusoidal(16))
        .with_cond_dim(2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InSupportConfig {
    pub steps: usize,
    pub learning_rate: f64,
    /// States, each with its full support set, per gradient step.
    pub states_per_step: usize,
    pub beta: f64,
    pub hidden: Vec<usize>,
    pub log_every: usize,
}

impl Default for InSupportConfig {
    fn default() -> Self {
        InSupportConfig {
            steps: 3000,
            learning_rate: 1e-3,
            states_per_step: 32,
            beta: 3.0,
            hidden: vec![64, 64],
            log_every: 100,
        }
    }
}

/// `Q` on every support action, in support-row order.
pub fn support_values(q: &QModel, support: &SupportActionSet) -> Result<Vec<f64>> {
    let cond = repeat_rows(support.states.view(), support.k);
    let mut values = Vec::with_capacity(cond.nrows());
    let mut start = 0;
    while start < cond.nrows() {
        let end = (start + CHUNK_ROWS).min(cond.nrows());
        values.extend(q.value(
            cond.slice(s![start..end, ..]),
            support.actions.slice(s![start..end, ..]),
        )?);
        start = end;
    }
    Ok(values)
}

/// Trains the state-conditioned guidance network by in-support contrastive
/// prediction against a fixed critic. Groups are the support sets of dataset
/// states, each perturbed at its own time.
pub fn train_in_support_guidance(
    dataset: &TransitionDataset,
    support: &SupportActionSet,
    q: &QModel,
    schedule: Schedule,
    config: &InSupportConfig,
    seed: u64,
) -> Result<TrainedGuidance> {
    if config.steps == 0 || config.states_per_step == 0 || !(config.learning_rate > 0.0) {
        return Err(Error::domain("guidance training needs steps, states_per_step and lr > 0"));
    }
    if !(config.beta >= 0.0 && config.beta.is_finite()) {
        return Err(Error::domain(format!("beta must be >= 0, got {}", config.beta)));
    }
    if support.k < 2 {
        return Err(Error::domain("in-support contrast needs k >= 2"));
    }
    if dataset.is_empty() {
        return Err(Error::invalid("cannot train guidance on an empty dataset"));
    }
    let k = support.k;
    let values = support_values(q, support)?;
    let labels_of = |i: usize| -> Vec<f64> {
        let scaled: Vec<f64> = values[i * k..(i + 1) * k].iter().map(|v| config.beta * -v).collect();
        self_normalized_labels(&scaled)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Network::init(guidance_network_spec(&config.hidden), rng.random())?;
    let mut opt = OptimizerState::new(net.param_count(), config.learning_rate);
    let mut curve = CurveRecorder::new(config.log_every);
    let g = config.states_per_step;
    for step in 0..config.steps {
        let picks: Vec<usize> = (0..g)
            .map(|_| dataset.state_index[rng.random_range(0..dataset.len())])
            .collect();
        let rows_idx: Vec<usize> = picks.iter().flat_map(|&i| i * k..(i + 1) * k).collect();
        let a0 = support.actions.select(Axis(0), &rows_idx);
        let cond = support.states.select(Axis(0), &rows_idx.iter().map(|r| r / k).collect::<Vec<_>>());
        let times: Vec<f64> = (0..g)
            .flat_map(|_| {
                let t = rng.random_range(schedule.t_min..schedule.t_max);
                std::iter::repeat_n(t, k)
            })
            .collect();
        let noise = Array2::from_shape_simple_fn(a0.raw_dim(), || rng.sample::<f64, _>(StandardNormal));
        let labels: Vec<f64> = picks.iter().flat_map(|&i| labels_of(i)).collect();
        let rows = contrast_rows(&schedule, a0.view(), times, noise.view(), Some(cond.view()));
        let head = Head::Contrast { group: k, labels };
        let (value, grad) = evaluate(&net, &rows, &head, true).map_err(|e| divergence(step, e))?;
        opt.adam_step(&mut net, &grad.expect("requested"))
            .map_err(|e| divergence(step, e))?;
        curve.push(value.value);
    }
    Ok(TrainedGuidance {
        model: GuidanceModel::new(net, GuidanceMethod::CepSelfNorm, config.beta, schedule)?,
        curve: curve.finish(),
        clamped: 0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyEvaluation {
    pub guidance_scale: f64,
    pub mean_return: f64,
    pub std_return: f64,
    pub std_error: f64,
    pub returns: Vec<f64>,
}

impl PolicyEvaluation {
    fn from_returns(guidance_scale: f64, returns: Vec<f64>) -> Self {
        let n = returns.len() as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let var = if returns.len() > 1 {
            returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        PolicyEvaluation {
            guidance_scale,
            mean_return: mean,
            std_return: var.sqrt(),
            std_error: (var / n).sqrt(),
            returns,
        }
    }
}

/// Runs `episodes` closed-loop episodes, drawing each action from the
/// behavior model guided by `guidance` at scale `scale`. Episode `e` uses its
/// own random stream derived from `seed`, so results do not depend on batching.
pub fn evaluate_policy(
    env: &PointGoalEnv,
    behavior: &PriorModel,
    guidance: Option<&GuidanceModel>,
    scale: f64,
    episodes: usize,
    seed: u64,
) -> Result<PolicyEvaluation> {
    env.validate()?;
    if episodes == 0 {
        return Err(Error::domain("evaluation needs at least one episode"));
    }
    if scale != 0.0 && guidance.is_none() {
        return Err(Error::invalid("a non-zero guidance scale needs a guidance model"));
    }
    let mut rngs: Vec<ChaCha8Rng> = (0..episodes)
        .map(|e| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(e as u64);
            r
        })
        .collect();
    let mut states = Array2::zeros((episodes, 2));
    for (e, rng) in rngs.iter_mut().enumerate() {
        let s0 = env.reset(rng);
        states[[e, 0]] = s0[0];
        states[[e, 1]] = s0[1];
    }
    let field = match (guidance, scale != 0.0) {
        (Some(g), true) => Guidance::Field(g),
        _ => Guidance::None,
    };
    let config = policy_sampler_config(scale, seed);
    let mut returns = vec![0.0; episodes];
    for _ in 0..env.horizon {
        let x = Array2::from_shape_fn((episodes, 2), |(e, _)| rngs[e].sample::<f64, _>(StandardNormal));
        let actions = sample_from(behavior, &field, &config, x, Some(states.view()))?.points;
        for e in 0..episodes {
            let a = clip_action([actions[[e, 0]], actions[[e, 1]]]);
            let (next, r) = env.step([states[[e, 0]], states[[e, 1]]], a);
            states[[e, 0]] = next[0];
            states[[e, 1]] = next[1];
            returns[e] += r;
        }
    }
    Ok(PolicyEvaluation::from_returns(scale, returns))
}

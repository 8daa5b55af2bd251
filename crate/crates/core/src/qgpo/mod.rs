//! Q-guided policy optimization on a point-goal task.
//!
//! The pipeline runs in three phases: fit a state-conditioned diffusion
//! behavior model, pre-generate `K` support actions per visited state, then fit
//! the critic by softmax Q-learning over those actions and the guidance
//! network by in-support contrastive prediction. Guided action sampling then
//! targets `mu(a | s) exp(beta Q(s, a))`.

mod env;
mod policy;
mod q;

pub use env::{
    clip_action, generate_behavior_dataset, generate_with_policy, toward_goal, BehaviorPolicy, PointGoalEnv,
    Transition, TransitionDataset,
};
pub use policy::{
    evaluate_policy, generate_support_actions, guidance_network_spec, in_support_cep_loss,
    in_support_cep_loss_via_adapter, policy_sampler_config, q_energy, support_values, train_in_support_guidance,
    InSupportConfig, PolicyEvaluation, QEnergy, SupportActionSet, POLICY_SAMPLER_STEPS,
};
pub use q::{
    critic_loss, q_network_spec, reward_scale, softmax_average, softmax_q_target, softmax_q_targets, train_q,
    QModel, QTrainConfig,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::GuidanceModel;
use crate::netcore::{NetworkSpec, TimeEmbedding};
use crate::prior::{train_prior, LossCurve, PriorModel, PriorTrainConfig};
use crate::schedule::Schedule;

/// Noise model for `a_t` given the state.
pub fn behavior_network_spec(hidden: &[usize]) -> NetworkSpec {
    NetworkSpec::mlp(2, hidden, 2)
        .with_time_embedding(TimeEmbedding::Sinusoidal(16))
        .with_cond_dim(2)
}

/// Fits the state-conditioned behavior model on the logged actions.
pub fn train_behavior_policy(
    dataset: &TransitionDataset,
    spec: NetworkSpec,
    schedule: Schedule,
    config: &PriorTrainConfig,
    seed: u64,
) -> Result<(PriorModel, LossCurve)> {
    if spec.input_dim != 2 || spec.cond_dim != 2 {
        return Err(Error::invalid("behavior network must take a 2-D action and a 2-D state"));
    }
    train_prior(dataset.actions.view(), Some(dataset.states.view()), spec, schedule, config, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QgpoSeeds {
    pub data: u64,
    pub behavior: u64,
    pub support: u64,
    pub q: u64,
    pub guidance: u64,
    pub eval: u64,
}

impl Default for QgpoSeeds {
    fn default() -> Self {
        QgpoSeeds {
            data: 0,
            behavior: 1,
            support: 2,
            q: 3,
            guidance: 4,
            eval: 5,
        }
    }
}

impl QgpoSeeds {
    /// Every seed derived from one base value.
    pub fn from_base(base: u64) -> Self {
        QgpoSeeds {
            data: base,
            behavior: base.wrapping_add(1),
            support: base.wrapping_add(2),
            q: base.wrapping_add(3),
            guidance: base.wrapping_add(4),
            eval: base.wrapping_add(5),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QgpoConfig {
    pub env: PointGoalEnv,
    pub episodes: usize,
    pub mix: f64,
    /// Support actions per state.
    pub k: usize,
    pub schedule: Schedule,
    pub behavior_hidden: Vec<usize>,
    pub behavior: PriorTrainConfig,
    pub q: QTrainConfig,
    pub guidance: InSupportConfig,
    pub scales: Vec<f64>,
    pub eval_episodes: usize,
    /// Set from the caller's base seed rather than read from files.
    #[serde(skip)]
    pub seeds: QgpoSeeds,
}

impl Default for QgpoConfig {
    fn default() -> Self {
        QgpoConfig {
            env: PointGoalEnv::default(),
            episodes: 500,
            mix: 0.5,
            k: 16,
            schedule: Schedule::default(),
            behavior_hidden: vec![128, 128],
            behavior: PriorTrainConfig {
                steps: 6000,
                batch_size: 512,
                learning_rate: 1e-3,
                log_every: 100,
            },
            q: QTrainConfig::default(),
            guidance: InSupportConfig::default(),
            scales: vec![0.0, 1.0, 2.0, 3.0, 5.0, 8.0, 10.0],
            eval_episodes: 100,
            seeds: QgpoSeeds::default(),
        }
    }
}

impl QgpoConfig {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.schedule.validate()?;
        self.behavior.validate()?;
        self.q.validate()?;
        if self.episodes == 0 || self.eval_episodes == 0 {
            return Err(Error::domain("qgpo needs at least one dataset and one evaluation episode"));
        }
        if !(0.0..=1.0).contains(&self.mix) {
            return Err(Error::domain(format!("behavior mix {} outside [0, 1]", self.mix)));
        }
        if self.k < 2 {
            return Err(Error::domain("support sets need k >= 2"));
        }
        if self.scales.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::domain("guidance scales must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QgpoReport {
    pub dataset_transitions: usize,
    pub distinct_states: usize,
    pub dataset_mean_return: f64,
    pub reward_scale: f64,
    pub behavior_loss: LossCurve,
    pub q_loss: LossCurve,
    pub guidance_loss: LossCurve,
    /// One entry per guidance scale; scale 0 is always included.
    pub evaluations: Vec<PolicyEvaluation>,
}

impl QgpoReport {
    pub fn at_scale(&self, scale: f64) -> Option<&PolicyEvaluation> {
        self.evaluations.iter().find(|e| e.guidance_scale == scale)
    }

    /// Highest mean return among the non-zero scales.
    pub fn best_guided(&self) -> Option<&PolicyEvaluation> {
        self.evaluations
            .iter()
            .filter(|e| e.guidance_scale != 0.0)
            .max_by(|a, b| a.mean_return.total_cmp(&b.mean_return))
    }
}

/// Trained components of one run.
pub struct QgpoRun {
    pub dataset: TransitionDataset,
    pub behavior: PriorModel,
    pub support: SupportActionSet,
    pub q: QModel,
    pub guidance: GuidanceModel,
    pub report: QgpoReport,
}

/// Data generation, behavior fitting, support generation, critic and
/// guidance fitting, then evaluation at every configured scale.
pub fn run_pipeline(config: &QgpoConfig) -> Result<QgpoRun> {
    config.validate()?;
    let seeds = &config.seeds;
    let dataset = generate_behavior_dataset(&config.env, config.episodes, config.mix, seeds.data)?;
    let returns = dataset.episode_returns(config.env.horizon);
    let dataset_mean_return = returns.iter().sum::<f64>() / returns.len() as f64;
    log::info!(
        "dataset: {} transitions, {} distinct states, mean return {dataset_mean_return:.3}",
        dataset.len(),
        dataset.distinct_states.nrows()
    );

    log::info!("phase 1: behavior model");
    let (behavior, behavior_loss) = train_behavior_policy(
        &dataset,
        behavior_network_spec(&config.behavior_hidden),
        config.schedule,
        &config.behavior,
        seeds.behavior,
    )?;

    log::info!("phase 2: support actions (k = {})", config.k);
    let support = generate_support_actions(
        &behavior,
        dataset.distinct_states.view(),
        config.k,
        &policy_sampler_config(0.0, seeds.support),
    )?;

    log::info!("phase 3: critic and guidance");
    let (q, q_loss) = train_q(&dataset, &support, &config.q, seeds.q)?;
    let trained = train_in_support_guidance(&dataset, &support, &q, config.schedule, &config.guidance, seeds.guidance)?;

    let mut scales = config.scales.clone();
    if !scales.contains(&0.0) {
        scales.insert(0, 0.0);
    }
    let mut evaluations = Vec::with_capacity(scales.len());
    for &s in &scales {
        let e = evaluate_policy(
            &config.env,
            &behavior,
            Some(&trained.model),
            s,
            config.eval_episodes,
            seeds.eval,
        )?;
        log::info!("scale {s}: return {:.3} +/- {:.3}", e.mean_return, e.std_error);
        evaluations.push(e);
    }
    let report = QgpoReport {
        dataset_transitions: dataset.len(),
        distinct_states: dataset.distinct_states.nrows(),
        dataset_mean_return,
        reward_scale: q.reward_scale,
        behavior_loss,
        q_loss,
        guidance_loss: trained.curve,
        evaluations,
    };
    Ok(QgpoRun {
        dataset,
        behavior,
        support,
        q,
        guidance: trained.model,
        report,
    })
}

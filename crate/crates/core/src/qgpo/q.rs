//! Action-value model trained by in-support softmax Q-learning.

use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::env::{rows_of, Transition, TransitionDataset};
use super::SupportActionSet;
use crate::error::{Error, Result};
use crate::netcore::{polyak_update, Activation, NetInput, Network, NetworkSpec, OptimizerState, TimeEmbedding};
use crate::prior::{divergence, CurveRecorder, LossCurve};

/// `Q(s, a)` as a network over the action with the state as condition.
pub fn q_network_spec(hidden: &[usize]) -> NetworkSpec {
    NetworkSpec::mlp(2, hidden, 1)
        .with_time_embedding(TimeEmbedding::None)
        .with_cond_dim(2)
        .with_activation(Activation::Silu)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QModel {
    /// One or two online critics; values are the minimum over them.
    pub online: Vec<Network>,
    pub target: Vec<Network>,
    /// Inverse temperature of the softmax over support actions.
    pub beta_q: f64,
    /// Multiplier applied to environment rewards before fitting.
    pub reward_scale: f64,
}

fn min_over(nets: &[Network], s: ArrayView2<'_, f64>, a: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
    let mut best: Option<Vec<f64>> = None;
    for net in nets {
        let out = net.forward_batch(&NetInput::new(a).with_cond(Some(s)))?;
        let v = out.column(0).to_vec();
        best = Some(match best {
            None => v,
            Some(b) => b.iter().zip(&v).map(|(x, y)| x.min(*y)).collect(),
        });
    }
    best.ok_or_else(|| Error::invalid("Q model has no critics"))
}

impl QModel {
    pub fn new(spec: NetworkSpec, double: bool, beta_q: f64, seed: u64) -> Result<Self> {
        if spec.input_dim != 2 || spec.cond_dim != 2 || spec.output_dim != 1 {
            return Err(Error::invalid("Q network must map a 2-D action and 2-D state to a scalar"));
        }
        if !(beta_q >= 0.0 && beta_q.is_finite()) {
            return Err(Error::domain(format!("beta_q must be >= 0, got {beta_q}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = if double { 2 } else { 1 };
        let online = (0..n)
            .map(|_| Network::init(spec.clone(), rng.random()))
            .collect::<Result<Vec<_>>>()?;
        Ok(QModel {
            target: online.clone(),
            online,
            beta_q,
            reward_scale: 1.0,
        })
    }

    /// `min_k Q_k(s, a)` over the online critics, one value per row.
    pub fn value(&self, s: ArrayView2<'_, f64>, a: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        min_over(&self.online, s, a)
    }

    pub fn target_value(&self, s: ArrayView2<'_, f64>, a: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        min_over(&self.target, s, a)
    }

    /// Gradient of the online value with respect to the action.
    pub fn action_gradient(&self, s: ArrayView2<'_, f64>, a: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let input = NetInput::new(a).with_cond(Some(s));
        let mut best: Option<(Array2<f64>, Array2<f64>)> = None;
        for net in &self.online {
            let (v, g) = net.input_grad_batch(&input)?;
            best = Some(match best {
                None => (v, g),
                Some((bv, mut bg)) => {
                    let mut bv = bv;
                    for i in 0..v.nrows() {
                        if v[[i, 0]] < bv[[i, 0]] {
                            bv[[i, 0]] = v[[i, 0]];
                            bg.row_mut(i).assign(&g.row(i));
                        }
                    }
                    (bv, bg)
                }
            });
        }
        Ok(best.ok_or_else(|| Error::invalid("Q model has no critics"))?.1)
    }
}

/// Softmax-weighted average of `values` at inverse temperature `beta`.
pub fn softmax_average(values: &[f64], beta: f64) -> f64 {
    let m = values.iter().map(|v| beta * v).fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = values.iter().map(|v| (beta * v - m).exp()).collect();
    let z: f64 = w.iter().sum();
    w.iter().zip(values).map(|(w, v)| w * v).sum::<f64>() / z
}

/// Bellman targets `r + gamma * softmax-average of Q_target(s', a'_j)` for a
/// batch. `support_next` holds `k` candidate actions per transition, stacked.
/// Rewards are used as given. Terminal transitions take `r`.
pub fn softmax_q_targets(
    q: &QModel,
    rewards: &[f64],
    next_states: ArrayView2<'_, f64>,
    done: &[bool],
    support_next: ArrayView2<'_, f64>,
    k: usize,
    gamma: f64,
) -> Result<Vec<f64>> {
    let n = rewards.len();
    if k == 0 || support_next.nrows() != n * k || next_states.nrows() != n || done.len() != n {
        return Err(Error::DimMismatch {
            expected: n * k,
            got: support_next.nrows(),
            context: "support actions for Bellman targets",
        });
    }
    let s_rep = next_states.select(Axis(0), &(0..n * k).map(|r| r / k).collect::<Vec<_>>());
    let values = q.target_value(s_rep.view(), support_next)?;
    Ok((0..n)
        .map(|i| {
            if done[i] {
                rewards[i]
            } else {
                rewards[i] + gamma * softmax_average(&values[i * k..(i + 1) * k], q.beta_q)
            }
        })
        .collect())
}

/// Bellman target of one transition from its next-state support actions.
pub fn softmax_q_target(q: &QModel, transition: &Transition, support_next: ArrayView2<'_, f64>, gamma: f64) -> Result<f64> {
    let next = Array2::from_shape_vec((1, 2), transition.next_state.to_vec()).expect("2-vector");
    let t = softmax_q_targets(
        q,
        &[transition.reward],
        next.view(),
        &[transition.done],
        support_next,
        support_next.nrows(),
        gamma,
    )?;
    Ok(t[0])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub tau: f64,
    pub gamma: f64,
    pub beta_q: f64,
    pub double: bool,
    /// Rescale rewards to unit standard deviation over the dataset.
    pub normalize_rewards: bool,
    pub hidden: Vec<usize>,
    pub log_every: usize,
}

impl Default for QTrainConfig {
    fn default() -> Self {
        QTrainConfig {
            steps: 4000,
            batch_size: 256,
            learning_rate: 3e-4,
            tau: 0.005,
            gamma: 0.95,
            beta_q: 1.0,
            double: true,
            normalize_rewards: true,
            hidden: vec![64, 64],
            log_every: 100,
        }
    }
}

impl QTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::domain("Q training needs steps >= 1 and batch_size >= 1"));
        }
        if !(self.learning_rate > 0.0) || !(0.0..=1.0).contains(&self.tau) || !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::domain("Q training needs lr > 0, tau in [0, 1] and gamma in [0, 1)"));
        }
        Ok(())
    }
}

/// `1 / std(r)` over the dataset, or 1 when rewards are constant.
pub fn reward_scale(rewards: &[f64]) -> f64 {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    if var > 0.0 {
        1.0 / var.sqrt()
    } else {
        1.0
    }
}

/// Mean squared error of one critic against fixed targets, and its parameter gradient.
pub fn critic_loss(
    net: &Network,
    states: ArrayView2<'_, f64>,
    actions: ArrayView2<'_, f64>,
    targets: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let n = targets.len() as f64;
    net.grad_params(&NetInput::new(actions).with_cond(Some(states)), |out| {
        let resid: Vec<f64> = out.column(0).iter().zip(targets).map(|(q, y)| q - y).collect();
        let loss = resid.iter().map(|r| r * r).sum::<f64>() / n;
        let g = Array2::from_shape_fn((resid.len(), 1), |(i, _)| 2.0 * resid[i] / n);
        (loss, g)
    })
}

/// Fits double critics by softmax Q-learning over the support actions of the
/// next states. Targets come from the polyak-averaged target critics and are
/// treated as constants.
pub fn train_q(
    dataset: &TransitionDataset,
    support: &SupportActionSet,
    config: &QTrainConfig,
    seed: u64,
) -> Result<(QModel, LossCurve)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("cannot train Q on an empty dataset"));
    }
    if support.states.nrows() != dataset.distinct_states.nrows() {
        return Err(Error::DimMismatch {
            expected: dataset.distinct_states.nrows(),
            got: support.states.nrows(),
            context: "support states",
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q = QModel::new(q_network_spec(&config.hidden), config.double, config.beta_q, rng.random())?;
    q.reward_scale = if config.normalize_rewards {
        reward_scale(&dataset.rewards)
    } else {
        1.0
    };
    let mut opts: Vec<OptimizerState> = q
        .online
        .iter()
        .map(|n| OptimizerState::new(n.param_count(), config.learning_rate))
        .collect();
    let k = support.k;
    let mut curve = CurveRecorder::new(config.log_every);
    for step in 0..config.steps {
        let idx: Vec<usize> = (0..config.batch_size).map(|_| rng.random_range(0..dataset.len())).collect();
        let states = rows_of(dataset.states.view(), &idx);
        let actions = rows_of(dataset.actions.view(), &idx);
        let next = rows_of(dataset.next_states.view(), &idx);
        let rewards: Vec<f64> = idx.iter().map(|&i| dataset.rewards[i] * q.reward_scale).collect();
        let done: Vec<bool> = idx.iter().map(|&i| dataset.done[i]).collect();
        let support_rows: Vec<usize> = idx
            .iter()
            .flat_map(|&i| {
                let s = dataset.next_index[i];
                s * k..(s + 1) * k
            })
            .collect();
        let support_next = rows_of(support.actions.view(), &support_rows);
        let targets = softmax_q_targets(&q, &rewards, next.view(), &done, support_next.view(), k, config.gamma)
            .map_err(|e| divergence(step, e))?;
        let mut total = 0.0;
        for (net, opt) in q.online.iter_mut().zip(opts.iter_mut()) {
            let (loss, grad) = critic_loss(net, states.view(), actions.view(), &targets).map_err(|e| divergence(step, e))?;
            opt.adam_step(net, &grad).map_err(|e| divergence(step, e))?;
            total += loss;
        }
        for (target, online) in q.target.iter_mut().zip(&q.online) {
            polyak_update(target, online, config.tau)?;
        }
        curve.push(total / q.online.len() as f64);
    }
    Ok((q, curve.finish()))
}

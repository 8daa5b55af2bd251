//! Point-goal environment, behavior policy and transition datasets.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A deterministic 2-D task: move a point toward a fixed goal inside a box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PointGoalEnv {
    pub goal: [f64; 2],
    pub step_size: f64,
    /// States live in `[-bound, bound]^2`.
    pub bound: f64,
    pub horizon: usize,
    pub gamma: f64,
}

impl Default for PointGoalEnv {
    fn default() -> Self {
        PointGoalEnv {
            goal: [2.0, 2.0],
            step_size: 0.5,
            bound: 4.0,
            horizon: 20,
            gamma: 0.95,
        }
    }
}

impl PointGoalEnv {
    pub fn validate(&self) -> Result<()> {
        if !(self.bound > 0.0 && self.step_size > 0.0) || self.horizon == 0 {
            return Err(Error::domain("environment needs a positive bound, step size and horizon"));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::domain(format!("discount {} outside [0, 1)", self.gamma)));
        }
        if self.goal.iter().any(|g| g.abs() > self.bound) {
            return Err(Error::domain("goal lies outside the state box"));
        }
        Ok(())
    }

    /// Next state and reward. The action is clipped to the unit box first.
    pub fn step(&self, s: [f64; 2], a: [f64; 2]) -> ([f64; 2], f64) {
        let a = clip_action(a);
        let next = [0, 1].map(|j| (s[j] + self.step_size * a[j]).clamp(-self.bound, self.bound));
        let reward = -((next[0] - self.goal[0]).powi(2) + (next[1] - self.goal[1]).powi(2)).sqrt();
        (next, reward)
    }

    /// A start state uniform over the box.
    pub fn reset<R: Rng>(&self, rng: &mut R) -> [f64; 2] {
        [0, 1].map(|_| rng.random_range(-self.bound..=self.bound))
    }

    /// Undiscounted return of a closed-loop rollout from `s0`.
    pub fn rollout<F: FnMut([f64; 2]) -> [f64; 2]>(&self, s0: [f64; 2], mut policy: F) -> f64 {
        let mut s = s0;
        let mut total = 0.0;
        for _ in 0..self.horizon {
            let (next, r) = self.step(s, policy(s));
            total += r;
            s = next;
        }
        total
    }
}

pub fn clip_action(a: [f64; 2]) -> [f64; 2] {
    a.map(|v| v.clamp(-1.0, 1.0))
}

/// Unit vector from `s` toward the goal, or zero at the goal.
pub fn toward_goal(env: &PointGoalEnv, s: [f64; 2]) -> [f64; 2] {
    let d = [env.goal[0] - s[0], env.goal[1] - s[1]];
    let n = (d[0] * d[0] + d[1] * d[1]).sqrt();
    if n > 0.0 {
        [d[0] / n, d[1] / n]
    } else {
        [0.0, 0.0]
    }
}

/// With probability `mix`, a noisy step toward the goal; otherwise a uniform action.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BehaviorPolicy {
    pub mix: f64,
    pub noise_std: f64,
}

impl BehaviorPolicy {
    pub fn new(mix: f64) -> Self {
        BehaviorPolicy { mix, noise_std: 0.3 }
    }

    pub fn act<R: Rng>(&self, env: &PointGoalEnv, s: [f64; 2], rng: &mut R) -> [f64; 2] {
        if rng.random::<f64>() < self.mix {
            let u = toward_goal(env, s);
            let noise: [f64; 2] = [0, 1].map(|_| rng.sample::<f64, _>(StandardNormal));
            clip_action([u[0] + self.noise_std * noise[0], u[1] + self.noise_std * noise[1]])
        } else {
            [0, 1].map(|_| rng.random_range(-1.0..=1.0))
        }
    }
}

/// One environment step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub state: [f64; 2],
    pub action: [f64; 2],
    pub reward: f64,
    pub next_state: [f64; 2],
    pub done: bool,
}

/// Logged transitions with an index of the distinct states they visit.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionDataset {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Vec<f64>,
    pub next_states: Array2<f64>,
    pub done: Vec<bool>,
    /// Every state or next state, each once, in order of first appearance.
    pub distinct_states: Array2<f64>,
    pub state_index: Vec<usize>,
    pub next_index: Vec<usize>,
}

fn key(s: [f64; 2]) -> [u64; 2] {
    // +0.0 and -0.0 denote the same state.
    s.map(|v| (v + 0.0).to_bits())
}

impl TransitionDataset {
    pub fn from_transitions(records: &[Transition]) -> Result<Self> {
        let n = records.len();
        let mut states = Array2::zeros((n, 2));
        let mut actions = Array2::zeros((n, 2));
        let mut next_states = Array2::zeros((n, 2));
        let mut rewards = Vec::with_capacity(n);
        let mut done = Vec::with_capacity(n);
        let mut lookup: HashMap<[u64; 2], usize> = HashMap::new();
        let mut distinct: Vec<[f64; 2]> = Vec::new();
        let mut index = |s: [f64; 2]| {
            *lookup.entry(key(s)).or_insert_with(|| {
                distinct.push(s);
                distinct.len() - 1
            })
        };
        let mut state_index = Vec::with_capacity(n);
        let mut next_index = Vec::with_capacity(n);
        for (i, r) in records.iter().enumerate() {
            let finite = r.state.iter().chain(&r.action).chain(&r.next_state).all(|v| v.is_finite());
            if !finite || !r.reward.is_finite() {
                return Err(Error::NonFinite("transition"));
            }
            if r.action.iter().any(|a| a.abs() > 1.0) {
                return Err(Error::invalid(format!("transition {i} has an action outside the unit box")));
            }
            for j in 0..2 {
                states[[i, j]] = r.state[j];
                actions[[i, j]] = r.action[j];
                next_states[[i, j]] = r.next_state[j];
            }
            rewards.push(r.reward);
            done.push(r.done);
            state_index.push(index(r.state));
            next_index.push(index(r.next_state));
        }
        let distinct_states =
            Array2::from_shape_vec((distinct.len(), 2), distinct.into_iter().flatten().collect()).expect("two columns");
        Ok(TransitionDataset {
            states,
            actions,
            rewards,
            next_states,
            done,
            distinct_states,
            state_index,
            next_index,
        })
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn get(&self, i: usize) -> Transition {
        let row = |m: &Array2<f64>| [m[[i, 0]], m[[i, 1]]];
        Transition {
            state: row(&self.states),
            action: row(&self.actions),
            reward: self.rewards[i],
            next_state: row(&self.next_states),
            done: self.done[i],
        }
    }

    /// Undiscounted returns of consecutive episodes of length `horizon`.
    pub fn episode_returns(&self, horizon: usize) -> Vec<f64> {
        self.rewards.chunks(horizon.max(1)).map(|c| c.iter().sum()).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
        w.write_record(["s1", "s2", "a1", "a2", "r", "s1'", "s2'", "done"])?;
        for i in 0..self.len() {
            let t = self.get(i);
            let mut rec: Vec<String> = t
                .state
                .iter()
                .chain(&t.action)
                .chain(std::iter::once(&t.reward))
                .chain(&t.next_state)
                .map(|v| format!("{v:?}"))
                .collect();
            rec.push(t.done.to_string());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)));
        }
        let mut r = csv::Reader::from_path(path)?;
        let expected = ["s1", "s2", "a1", "a2", "r", "s1'", "s2'", "done"];
        if r.headers()?.iter().ne(expected) {
            return Err(Error::Format(format!("{} does not have the transition header", path.display())));
        }
        let mut records = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let f = |j: usize| -> Result<f64> {
                rec[j].trim().parse().map_err(|_| Error::Format(format!("bad number {:?}", &rec[j])))
            };
            records.push(Transition {
                state: [f(0)?, f(1)?],
                action: [f(2)?, f(3)?],
                reward: f(4)?,
                next_state: [f(5)?, f(6)?],
                done: rec[7].trim().parse().map_err(|_| Error::Format(format!("bad flag {:?}", &rec[7])))?,
            });
        }
        Self::from_transitions(&records)
    }
}

/// Rolls out `policy` for `n_episodes` episodes from uniform start states.
/// Episodes end by truncation at the horizon, so `done` is always false.
pub fn generate_with_policy(
    env: &PointGoalEnv,
    n_episodes: usize,
    policy: &BehaviorPolicy,
    seed: u64,
) -> Result<TransitionDataset> {
    env.validate()?;
    if !(0.0..=1.0).contains(&policy.mix) || !(policy.noise_std >= 0.0) {
        return Err(Error::domain("behavior mix must be in [0, 1] and noise std >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n_episodes * env.horizon);
    for _ in 0..n_episodes {
        let mut s = env.reset(&mut rng);
        for _ in 0..env.horizon {
            let a = policy.act(env, s, &mut rng);
            let (next, reward) = env.step(s, a);
            records.push(Transition {
                state: s,
                action: a,
                reward,
                next_state: next,
                done: false,
            });
            s = next;
        }
    }
    TransitionDataset::from_transitions(&records)
}

/// Dataset from the mixed behavior policy with action noise std 0.3.
pub fn generate_behavior_dataset(env: &PointGoalEnv, n_episodes: usize, mix: f64, seed: u64) -> Result<TransitionDataset> {
    generate_with_policy(env, n_episodes, &BehaviorPolicy::new(mix), seed)
}

/// Rows of `view` selected by `idx`.
pub(crate) fn rows_of(view: ArrayView2<'_, f64>, idx: &[usize]) -> Array2<f64> {
    crate::prior::gather(view, idx)
}

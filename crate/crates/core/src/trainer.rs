//! Double-DQN training with experience replay and ε-greedy exploration.
//!
//! The online network picks the bootstrap action and the target network
//! values it. One learning step is taken per environment step once the replay
//! buffer holds a full batch; ε decays linearly per learning step. Training
//! stops once three conditions hold over the recent episode history: at most
//! one collision in the last 100 episodes, ε at its floor, and a stable mean
//! reward between the last two 100-episode windows.

use std::collections::VecDeque;
use std::io::Write;

use rand::seq::IndexedRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{normalize, Action, CrossingEnv, EnvConfig, EpisodeOutcome, ObserverMode};
use crate::error::{Error, Result};
use crate::model::{Model, ModelKind};
use crate::perception::NoiseParams;
use crate::qnet::{greedy, Activation, Adam, AdamConfig, NetShape, QNetwork};
use crate::rng::{derive_seed, seeded};
use crate::world::{RoadGeometry, Scenario};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    Ideal,
    PerSigma,
    Conditioned,
}

impl TrainMode {
    pub fn observer(self) -> ObserverMode {
        match self {
            TrainMode::Ideal => ObserverMode::Ideal,
            TrainMode::PerSigma => ObserverMode::Noisy,
            TrainMode::Conditioned => ObserverMode::Conditioned,
        }
    }
}

/// Evenly spaced σ_v values `start, start + step, ..., stop`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaGrid {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl SigmaGrid {
    pub fn new(start: f64, stop: f64, step: f64) -> Result<Self> {
        let g = SigmaGrid { start, stop, step };
        g.validate()?;
        Ok(g)
    }

    /// Parses `start:stop:step`.
    pub fn parse(text: &str) -> Result<Self> {
        let parts: Vec<&str> = text.split(':').collect();
        let bad = || Error::Config(format!("grid must be start:stop:step, got {text:?}"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let nums: Vec<f64> = parts
            .iter()
            .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        SigmaGrid::new(nums[0], nums[1], nums[2])
    }

    pub fn validate(&self) -> Result<()> {
        let SigmaGrid { start, stop, step } = *self;
        if !(0.0..=1.0).contains(&start) || !(0.0..=1.0).contains(&stop) || stop < start {
            return Err(Error::Config(format!(
                "grid bounds must satisfy 0 <= start <= stop <= 1, got {start}..{stop}"
            )));
        }
        if !(step > 0.0) {
            return Err(Error::Config("grid step must be positive".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        ((self.stop - self.start) / self.step + 1e-9).floor() as usize + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Grid values, rounded to 1e-9 so that decimal steps produce clean values.
    pub fn values(&self) -> Vec<f64> {
        (0..self.len())
            .map(|k| ((self.start + k as f64 * self.step) * 1e9).round() / 1e9)
            .collect()
    }
}

impl Default for SigmaGrid {
    fn default() -> Self {
        SigmaGrid { start: 0.0, stop: 1.0, step: 0.002 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// Noise level of a per-σ_v run.
    pub sigma_v: f64,
    /// σ_v values a conditioned run samples from (and a per-σ_v campaign
    /// iterates over).
    pub sigma_grid: SigmaGrid,
    pub gamma: f64,
    pub optimizer: AdamConfig,
    pub epsilon_start: f64,
    pub epsilon_decrement: f64,
    pub epsilon_min: f64,
    pub replay_capacity: usize,
    pub batch_size: usize,
    pub target_sync_interval: u64,
    pub max_episodes: usize,
    pub hidden: [usize; 2],
    pub activation: Activation,
    pub env: EnvConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Ideal,
            sigma_v: 0.0,
            sigma_grid: SigmaGrid::default(),
            gamma: 0.99,
            optimizer: AdamConfig::default(),
            epsilon_start: 1.0,
            epsilon_decrement: 1e-4,
            epsilon_min: 0.001,
            replay_capacity: 100_000,
            batch_size: 64,
            target_sync_interval: 1000,
            max_episodes: 30_000,
            hidden: [512, 256],
            activation: Activation::Relu,
            env: EnvConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma must be in (0, 1], got {}", self.gamma)));
        }
        if !(self.epsilon_min <= self.epsilon_start) || self.epsilon_min < 0.0 || self.epsilon_start > 1.0 {
            return Err(Error::Config("need 0 <= epsilon_min <= epsilon_start <= 1".into()));
        }
        if self.epsilon_decrement < 0.0 {
            return Err(Error::Config("epsilon_decrement must be >= 0".into()));
        }
        if self.batch_size == 0 || self.replay_capacity < self.batch_size {
            return Err(Error::Config("need 0 < batch_size <= replay_capacity".into()));
        }
        if self.target_sync_interval == 0 {
            return Err(Error::Config("target_sync_interval must be positive".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden layer sizes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.sigma_v) {
            return Err(Error::Config(format!("sigma_v must be in [0, 1], got {}", self.sigma_v)));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        self.sigma_grid.validate()?;
        self.env.validate()
    }

    pub fn net_shape(&self) -> NetShape {
        NetShape {
            input_dim: self.mode.observer().obs_dim(),
            hidden: self.hidden,
            activation: self.activation,
        }
    }

    pub fn model_kind(&self) -> ModelKind {
        match self.mode {
            TrainMode::Ideal => ModelKind::Ideal,
            TrainMode::PerSigma => ModelKind::PerSigma { sigma_v: self.sigma_v },
            TrainMode::Conditioned => ModelKind::Conditioned,
        }
    }
}

/// `max(epsilon_min, epsilon_start - epsilon_decrement * learn_step)`.
pub fn epsilon_at(learn_step: u64, cfg: &TrainConfig) -> f64 {
    (cfg.epsilon_start - cfg.epsilon_decrement * learn_step as f64).max(cfg.epsilon_min)
}

/// Double-DQN bootstrap target given both networks' Q-values at the next
/// observation: the online network chooses, the target network evaluates.
pub fn ddqn_target_from_q(reward: f64, done: bool, gamma: f64, next_online: [f64; 2], next_target: [f64; 2]) -> f64 {
    if done {
        return reward;
    }
    let a = greedy(next_online).index();
    reward + gamma * next_target[a]
}

pub fn ddqn_target(
    reward: f64,
    done: bool,
    next_obs: &[f64],
    gamma: f64,
    online: &QNetwork,
    target: &QNetwork,
) -> Result<f64> {
    if done {
        return Ok(reward);
    }
    Ok(ddqn_target_from_q(reward, false, gamma, online.forward(next_obs)?, target.forward(next_obs)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: Action,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    /// True only for episodes ended by Go; truncation still bootstraps.
    pub terminal: bool,
}

/// Fixed-capacity FIFO experience buffer.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer {
            capacity,
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.items.get(i)
    }

    /// Uniform sample of `n` indices, with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<usize> {
        (0..n).map(|_| rng.random_range(0..self.items.len())).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub episode: usize,
    pub scenario_id: u32,
    pub sigma_v: f64,
    pub reward: f64,
    pub outcome: EpisodeOutcome,
    pub cit: Option<f64>,
    pub epsilon: f64,
}

/// Window size of the convergence test.
pub const CONVERGENCE_WINDOW: usize = 100;

/// True once the last 100 episodes have at most one collision, ε has
/// reached its floor, and mean reward moved by less than 1 between the last
/// 100 episodes and the 100 before them.
pub fn converged(history: &[EpisodeStats], epsilon_now: f64, cfg: &TrainConfig) -> bool {
    let n = history.len();
    if n < 2 * CONVERGENCE_WINDOW {
        return false;
    }
    let recent = &history[n - CONVERGENCE_WINDOW..];
    let earlier = &history[n - 2 * CONVERGENCE_WINDOW..n - CONVERGENCE_WINDOW];
    let collisions = recent
        .iter()
        .filter(|e| e.outcome == EpisodeOutcome::Collision)
        .count();
    let mean = |w: &[EpisodeStats]| w.iter().map(|e| e.reward).sum::<f64>() / w.len() as f64;
    collisions <= 1 && epsilon_now <= cfg.epsilon_min && (mean(recent) - mean(earlier)).abs() < 1.0
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpisodeStats>,
    pub converged: bool,
    pub learn_steps: u64,
    pub seed: u64,
}

/// Trains one model. Scenarios are sampled uniformly per episode; in
/// conditioned mode σ_v is also sampled uniformly from the grid.
pub fn train(cfg: &TrainConfig, geometry: &RoadGeometry, scenarios: &[Scenario], seed: u64) -> Result<TrainOutcome> {
    train_with_progress(cfg, geometry, scenarios, seed, |_| {})
}

pub fn train_with_progress<F: FnMut(&EpisodeStats)>(
    cfg: &TrainConfig,
    geometry: &RoadGeometry,
    scenarios: &[Scenario],
    seed: u64,
    mut progress: F,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    geometry.validate()?;
    if scenarios.is_empty() {
        return Err(Error::Config("no training scenarios".into()));
    }
    if !scenarios.iter().any(|s| s.training_only) {
        return Err(Error::Config(
            "training scenarios must include the short-gap training-only approaches".into(),
        ));
    }
    let mut rng = seeded(seed);
    let shape = cfg.net_shape();
    let mut online = QNetwork::new(shape, &mut rng);
    let mut target = online.clone();
    let mut opt = Adam::new(&shape, cfg.optimizer);
    let mut buffer = ReplayBuffer::new(cfg.replay_capacity);
    let mut env = CrossingEnv::new(*geometry, cfg.env);
    let observer = cfg.mode.observer();
    let grid = cfg.sigma_grid.values();

    let mut history = Vec::new();
    let mut learn_steps: u64 = 0;
    let mut is_converged = false;
    let dim = shape.input_dim;
    let mut batch_x = vec![0.0; cfg.batch_size * dim];
    let mut batch_next = vec![0.0; cfg.batch_size * dim];
    let mut actions = vec![Action::NotGo; cfg.batch_size];
    let mut targets = vec![0.0; cfg.batch_size];

    for episode in 0..cfg.max_episodes {
        let scenario = *scenarios.choose(&mut rng).expect("nonempty");
        let sigma_v = match cfg.mode {
            TrainMode::Ideal => 0.0,
            TrainMode::PerSigma => cfg.sigma_v,
            TrainMode::Conditioned => *grid.choose(&mut rng).expect("nonempty grid"),
        };
        let episode_seed: u64 = rng.random();
        let mut obs = normalize(&env.reset(&scenario, NoiseParams::new(sigma_v)?, observer, episode_seed));
        let mut total = 0.0;
        let (outcome, cit) = loop {
            let eps = epsilon_at(learn_steps, cfg);
            let action = if rng.random::<f64>() < eps {
                *Action::ALL.choose(&mut rng).expect("two actions")
            } else {
                greedy(online.forward(&obs)?)
            };
            let step = env.step(action)?;
            total += step.reward;
            let next = normalize(&step.observation);
            buffer.push(Transition {
                obs: std::mem::replace(&mut obs, next.clone()),
                action,
                reward: step.reward,
                next_obs: next,
                terminal: step.done && step.outcome != Some(EpisodeOutcome::Truncated),
            });

            if buffer.len() >= cfg.batch_size {
                let idx = buffer.sample_indices(cfg.batch_size, &mut rng);
                for (row, &i) in idx.iter().enumerate() {
                    let t = buffer.get(i).expect("index in range");
                    batch_x[row * dim..(row + 1) * dim].copy_from_slice(&t.obs);
                    batch_next[row * dim..(row + 1) * dim].copy_from_slice(&t.next_obs);
                    actions[row] = t.action;
                }
                let next_view = ndarray::ArrayView2::from_shape((cfg.batch_size, dim), &batch_next)
                    .expect("batch layout");
                let q_online = online.forward_batch(next_view)?;
                let q_target = target.forward_batch(next_view)?;
                for (row, &i) in idx.iter().enumerate() {
                    let t = buffer.get(i).expect("index in range");
                    targets[row] = ddqn_target_from_q(
                        t.reward,
                        t.terminal,
                        cfg.gamma,
                        [q_online[[row, 0]], q_online[[row, 1]]],
                        [q_target[[row, 0]], q_target[[row, 1]]],
                    );
                }
                let x_view = ndarray::ArrayView2::from_shape((cfg.batch_size, dim), &batch_x)
                    .expect("batch layout");
                opt.train_on(&mut online, x_view, &actions, &targets)?;
                learn_steps += 1;
                if learn_steps % cfg.target_sync_interval == 0 {
                    target.copy_from(&online);
                }
            }
            if step.done {
                break (step.outcome.expect("done steps carry an outcome"), step.cit);
            }
        };
        let stats = EpisodeStats {
            episode,
            scenario_id: scenario.id,
            sigma_v,
            reward: total,
            outcome,
            cit,
            epsilon: epsilon_at(learn_steps, cfg),
        };
        progress(&stats);
        history.push(stats);
        if converged(&history, epsilon_at(learn_steps, cfg), cfg) {
            is_converged = true;
            break;
        }
    }

    Ok(TrainOutcome {
        model: Model::new(cfg.model_kind(), online, Some(cfg.clone())),
        log: history,
        converged: is_converged,
        learn_steps,
        seed,
    })
}

/// Trains one per-σ_v model for every grid value on a pool of `workers`
/// threads. Each run is sequential and seeded from `(seed, grid index)`, so
/// results do not depend on the worker count.
pub fn train_grid(
    cfg: &TrainConfig,
    geometry: &RoadGeometry,
    scenarios: &[Scenario],
    sigmas: &[f64],
    seed: u64,
    workers: usize,
) -> Result<Vec<TrainOutcome>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    pool.install(|| {
        sigmas
            .par_iter()
            .enumerate()
            .map(|(k, &sigma_v)| {
                let run = TrainConfig {
                    mode: TrainMode::PerSigma,
                    sigma_v,
                    ..cfg.clone()
                };
                train(&run, geometry, scenarios, derive_seed(seed, k as u64))
            })
            .collect()
    })
}

#[derive(Serialize)]
struct LogRow<'a> {
    episode: usize,
    scenario_id: u32,
    sigma_v: f64,
    reward: f64,
    outcome: &'a str,
    cit: Option<f64>,
    epsilon: f64,
}

/// Training log as CSV: `episode,scenario_id,sigma_v,reward,outcome,cit,epsilon`.
pub fn write_log_csv<W: Write>(log: &[EpisodeStats], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for e in log {
        w.serialize(LogRow {
            episode: e.episode,
            scenario_id: e.scenario_id,
            sigma_v: e.sigma_v,
            reward: e.reward,
            outcome: e.outcome.as_str(),
            cit: e.cit,
            epsilon: e.epsilon,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub const LOG_HEADER: [&str; 7] = ["episode", "scenario_id", "sigma_v", "reward", "outcome", "cit", "epsilon"];

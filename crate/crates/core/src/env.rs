//! The crossing task as a partially observable decision process.
//!
//! Each step is 0.1 s. The agent either waits (`NotGo`) or starts crossing
//! (`Go`); crossing ends the episode with an analytically computed outcome.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perception::{
    kf_init, kf_step, measurement_variance, observe, BeliefState, FilterConfig, NoiseParams,
};
use crate::world::{crossing_outcome, Outcome, RoadGeometry, Scenario, WorldState};

pub const POS_SCALE: f64 = 100.0;
pub const VEL_SCALE: f64 = 20.0;

/// Length of a plain observation vector; conditioned observations append σ_v.
pub const PLAIN_OBS_DIM: usize = 6;
pub const CONDITIONED_OBS_DIM: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObserverMode {
    /// Exact world state.
    Ideal,
    /// Kalman-filtered noisy observations.
    Noisy,
    /// As `Noisy`, with σ_v appended to the observation.
    Conditioned,
}

impl ObserverMode {
    pub fn obs_dim(self) -> usize {
        match self {
            ObserverMode::Conditioned => CONDITIONED_OBS_DIM,
            _ => PLAIN_OBS_DIM,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Go,
    NotGo,
}

impl Action {
    pub const ALL: [Action; 2] = [Action::Go, Action::NotGo];

    /// Position of this action in the network's output vector.
    pub fn index(self) -> usize {
        match self {
            Action::Go => 0,
            Action::NotGo => 1,
        }
    }

    pub fn from_index(i: usize) -> Action {
        if i == 0 {
            Action::Go
        } else {
            Action::NotGo
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Action::Go => "go",
            Action::NotGo => "not_go",
        }
    }
}

/// How an episode ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeOutcome {
    SafeBefore,
    SafeAfter,
    Collision,
    /// Step cap reached without a Go decision.
    Truncated,
}

impl From<Outcome> for EpisodeOutcome {
    fn from(o: Outcome) -> Self {
        match o {
            Outcome::SafeBefore => EpisodeOutcome::SafeBefore,
            Outcome::SafeAfter => EpisodeOutcome::SafeAfter,
            Outcome::Collision => EpisodeOutcome::Collision,
        }
    }
}

impl EpisodeOutcome {
    pub fn as_str(self) -> &'static str {
        match self {
            EpisodeOutcome::SafeBefore => "safe_before",
            EpisodeOutcome::SafeAfter => "safe_after",
            EpisodeOutcome::Collision => "collision",
            EpisodeOutcome::Truncated => "truncated",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "safe_before" => EpisodeOutcome::SafeBefore,
            "safe_after" => EpisodeOutcome::SafeAfter,
            "collision" => EpisodeOutcome::Collision,
            "truncated" => EpisodeOutcome::Truncated,
            _ => return None,
        })
    }
}

/// What the agent sees: the filtered vehicle estimate, its own exact state,
/// and (in conditioned mode) its own noise level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub est_pos: f64,
    pub est_vel: f64,
    pub var_pos: f64,
    pub var_vel: f64,
    pub ego_pos: f64,
    pub ego_vel: f64,
    pub sigma_v: Option<f64>,
}

impl Observation {
    pub fn dim(&self) -> usize {
        if self.sigma_v.is_some() {
            CONDITIONED_OBS_DIM
        } else {
            PLAIN_OBS_DIM
        }
    }

    /// Writes the normalized feature vector into `out` (length [`Self::dim`]).
    pub fn write_features(&self, out: &mut [f64]) {
        out[0] = self.est_pos / POS_SCALE;
        out[1] = self.est_vel / VEL_SCALE;
        out[2] = self.var_pos / (POS_SCALE * POS_SCALE);
        out[3] = self.var_vel / (VEL_SCALE * VEL_SCALE);
        out[4] = self.ego_pos / POS_SCALE;
        out[5] = self.ego_vel / VEL_SCALE;
        if let Some(s) = self.sigma_v {
            out[6] = s;
        }
    }
}

/// Scales positions by 100 m, velocities by 20 m/s and variances by the
/// squared scales; σ_v passes through.
pub fn normalize(o: &Observation) -> Vec<f64> {
    let mut v = vec![0.0; o.dim()];
    o.write_features(&mut v);
    v
}

/// Inverse of [`normalize`].
pub fn denormalize(v: &[f64]) -> Observation {
    Observation {
        est_pos: v[0] * POS_SCALE,
        est_vel: v[1] * VEL_SCALE,
        var_pos: v[2] * POS_SCALE * POS_SCALE,
        var_vel: v[3] * VEL_SCALE * VEL_SCALE,
        ego_pos: v[4] * POS_SCALE,
        ego_vel: v[5] * VEL_SCALE,
        sigma_v: v.get(6).copied(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    /// Step length, s.
    pub dt: f64,
    /// Cost charged on every step, including the final Go step.
    pub step_cost: f64,
    pub safe_reward: f64,
    pub collision_penalty: f64,
    /// Episode cap in steps; waiting this long truncates the episode.
    pub max_steps: u32,
    pub filter: FilterConfig,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            dt: 0.1,
            step_cost: 0.5,
            safe_reward: 200.0,
            collision_penalty: 200.0,
            max_steps: 300,
            filter: FilterConfig::default(),
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::Config("dt must be positive".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be at least 1".into()));
        }
        self.filter.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    /// Present iff `done`.
    pub outcome: Option<EpisodeOutcome>,
    /// Crossing-initiation time; present iff the episode ended with Go.
    pub cit: Option<f64>,
}

/// One row of an episode trace: the state and observation at decision time,
/// the action taken and the reward received for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: u32,
    pub t: f64,
    pub vehicle_distance: f64,
    pub vehicle_speed: f64,
    pub ped_progress: f64,
    pub est_pos: f64,
    pub est_vel: f64,
    pub var_pos: f64,
    pub var_vel: f64,
    pub sigma_v: f64,
    pub action: String,
    pub reward: f64,
}

pub fn write_trace_csv<W: Write>(rows: &[TraceRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct CrossingEnv {
    geometry: RoadGeometry,
    cfg: EnvConfig,
    scenario: Scenario,
    mode: ObserverMode,
    noise: NoiseParams,
    rng: ChaCha8Rng,
    step: u32,
    belief: BeliefState,
    done: bool,
    trace: Option<Vec<TraceRow>>,
}

impl CrossingEnv {
    /// An environment ready to be [`reset`](Self::reset).
    pub fn new(geometry: RoadGeometry, cfg: EnvConfig) -> Self {
        let scenario = crate::world::scenario_table()[0];
        CrossingEnv {
            geometry,
            cfg,
            scenario,
            mode: ObserverMode::Ideal,
            noise: NoiseParams { sigma_v: 0.0 },
            rng: ChaCha8Rng::seed_from_u64(0),
            step: 0,
            belief: BeliefState {
                mean_pos: scenario.distance,
                mean_vel: scenario.speed,
                var_pos: 0.0,
                var_vel: 0.0,
                cov_pos_vel: 0.0,
            },
            done: true,
            trace: None,
        }
    }

    /// Keep a per-step trace of the next episodes.
    pub fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn trace(&self) -> &[TraceRow] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn geometry(&self) -> &RoadGeometry {
        &self.geometry
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn belief(&self) -> &BeliefState {
        &self.belief
    }

    pub fn world(&self) -> WorldState {
        WorldState::at_step(&self.scenario, &self.geometry, self.step, self.cfg.dt, None)
    }

    pub fn time(&self) -> f64 {
        f64::from(self.step) * self.cfg.dt
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn reset(
        &mut self,
        scenario: &Scenario,
        noise: NoiseParams,
        mode: ObserverMode,
        seed: u64,
    ) -> Observation {
        self.scenario = *scenario;
        self.noise = noise;
        self.mode = mode;
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.step = 0;
        self.done = false;
        if let Some(t) = self.trace.as_mut() {
            t.clear();
        }
        let ws = self.world();
        self.belief = match mode {
            ObserverMode::Ideal => truth_belief(&ws),
            ObserverMode::Noisy | ObserverMode::Conditioned => {
                let f = &self.cfg.filter;
                let z = observe(&ws, &self.geometry, noise, f, &mut self.rng);
                let var = measurement_variance(z, ws.ped_progress, &self.geometry, noise, f);
                kf_init(z, scenario.speed, f.vel_prior_sd, var, &mut self.rng)
            }
        };
        self.observation()
    }

    pub fn observation(&self) -> Observation {
        let ws = self.world();
        Observation {
            est_pos: self.belief.mean_pos,
            est_vel: self.belief.mean_vel,
            var_pos: self.belief.var_pos,
            var_vel: self.belief.var_vel,
            ego_pos: ws.ped_progress,
            ego_vel: 0.0,
            sigma_v: (self.mode == ObserverMode::Conditioned).then_some(self.noise.sigma_v),
        }
    }

    pub fn step(&mut self, action: Action) -> Result<StepResult> {
        if self.done {
            return Err(Error::EpisodeFinished);
        }
        let before = self.observation();
        let ws = self.world();
        let result = match action {
            Action::Go => {
                let cit = self.time();
                let crossing = crossing_outcome(&self.scenario, &self.geometry, cit);
                let bonus = if crossing.outcome.is_collision() {
                    -self.cfg.collision_penalty
                } else {
                    self.cfg.safe_reward
                };
                self.done = true;
                StepResult {
                    observation: before,
                    reward: -self.cfg.step_cost + bonus,
                    done: true,
                    outcome: Some(crossing.outcome.into()),
                    cit: Some(cit),
                }
            }
            Action::NotGo => {
                self.step += 1;
                let next = self.world();
                self.belief = match self.mode {
                    ObserverMode::Ideal => truth_belief(&next),
                    ObserverMode::Noisy | ObserverMode::Conditioned => {
                        let f = &self.cfg.filter;
                        let z = observe(&next, &self.geometry, self.noise, f, &mut self.rng);
                        let var = measurement_variance(z, next.ped_progress, &self.geometry, self.noise, f);
                        kf_step(&self.belief, z, var, self.cfg.dt, f.process_accel_sd)
                    }
                };
                let truncated = self.step >= self.cfg.max_steps;
                self.done = truncated;
                StepResult {
                    observation: self.observation(),
                    reward: -self.cfg.step_cost,
                    done: truncated,
                    outcome: truncated.then_some(EpisodeOutcome::Truncated),
                    cit: None,
                }
            }
        };
        if let Some(trace) = self.trace.as_mut() {
            trace.push(TraceRow {
                step: (ws.t / self.cfg.dt).round() as u32,
                t: ws.t,
                vehicle_distance: ws.vehicle_distance,
                vehicle_speed: ws.vehicle_speed,
                ped_progress: ws.ped_progress,
                est_pos: before.est_pos,
                est_vel: before.est_vel,
                var_pos: before.var_pos,
                var_vel: before.var_vel,
                sigma_v: self.noise.sigma_v,
                action: action.as_str().to_string(),
                reward: result.reward,
            });
        }
        Ok(result)
    }
}

fn truth_belief(ws: &WorldState) -> BeliefState {
    BeliefState {
        mean_pos: ws.vehicle_distance,
        mean_vel: ws.vehicle_speed,
        var_pos: 0.0,
        var_vel: 0.0,
        cov_pos_vel: 0.0,
    }
}

//! Scenarios, road geometry, and the kinematics of a single vehicle approaching
//! a pedestrian at a zebra crossing.
//!
//! Longitudinal coordinates are measured along the vehicle's line of travel,
//! as the signed distance from the vehicle front to the crossing line
//! (positive while approaching). Lateral coordinates are measured across the
//! road from the pedestrian's curb.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Speeds used by the constant-speed scenarios, m/s.
pub const SLOW_SPEED: f64 = 6.94;
pub const FAST_SPEED: f64 = 13.89;

/// Initial time-to-arrival of the training-only scenarios, s.
pub const TRAINING_TTA: f64 = 1.0;

/// One constant-speed vehicle approach.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScenarioSpec", into = "ScenarioSpec")]
pub struct Scenario {
    pub id: u32,
    /// Vehicle speed, m/s.
    pub speed: f64,
    /// Initial distance from vehicle front to the crossing line, m.
    pub distance: f64,
    /// Initial time-to-arrival, `distance / speed`, s.
    pub tta: f64,
    pub training_only: bool,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct ScenarioSpec {
    id: u32,
    v0: f64,
    d0: f64,
    #[serde(default)]
    training_only: bool,
}

impl TryFrom<ScenarioSpec> for Scenario {
    type Error = Error;

    fn try_from(s: ScenarioSpec) -> Result<Self> {
        Scenario::new(s.id, s.v0, s.d0, s.training_only)
    }
}

impl From<Scenario> for ScenarioSpec {
    fn from(s: Scenario) -> Self {
        ScenarioSpec {
            id: s.id,
            v0: s.speed,
            d0: s.distance,
            training_only: s.training_only,
        }
    }
}

impl Scenario {
    pub fn new(id: u32, speed: f64, distance: f64, training_only: bool) -> Result<Self> {
        if !(speed > 0.0 && speed.is_finite()) {
            return Err(Error::Config(format!(
                "scenario {id}: speed must be positive, got {speed}"
            )));
        }
        if !(distance > 0.0 && distance.is_finite()) {
            return Err(Error::Config(format!(
                "scenario {id}: distance must be positive, got {distance}"
            )));
        }
        Ok(Scenario {
            id,
            speed,
            distance,
            tta: distance / speed,
            training_only,
        })
    }

    /// Signed distance from the vehicle front to the crossing line at time `t`.
    pub fn vehicle_distance(&self, t: f64) -> f64 {
        self.distance - self.speed * t
    }

    /// Time at which the vehicle rear clears the crossing line.
    pub fn pass_time(&self, geometry: &RoadGeometry) -> f64 {
        self.tta + geometry.vehicle_length / self.speed
    }
}

/// The six constant-speed approaches of the crossing experiment followed by
/// the two 1 s training-only approaches (one per speed).
pub fn scenario_table() -> Vec<Scenario> {
    const ROWS: [(f64, f64); 6] = [
        (SLOW_SPEED, 15.90),
        (FAST_SPEED, 31.81),
        (SLOW_SPEED, 31.81),
        (FAST_SPEED, 63.61),
        (SLOW_SPEED, 47.71),
        (FAST_SPEED, 95.42),
    ];
    let mut table: Vec<Scenario> = ROWS
        .iter()
        .zip(1..)
        .map(|(&(v, d), id)| Scenario::new(id, v, d, false).expect("table rows are valid"))
        .collect();
    for (id, v) in [(7, SLOW_SPEED), (8, FAST_SPEED)] {
        table.push(Scenario::new(id, v, v * TRAINING_TTA, true).expect("valid"));
    }
    table
}

/// Only the experimental (non-training) scenarios.
pub fn experiment_scenarios() -> Vec<Scenario> {
    scenario_table()
        .into_iter()
        .filter(|s| !s.training_only)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoadGeometry {
    pub road_width: f64,
    pub lane_count: u32,
    /// Lateral distance from the pedestrian's curb to the vehicle lane center.
    pub vehicle_lane_center_offset: f64,
    pub vehicle_length: f64,
    pub vehicle_width: f64,
    pub walk_speed: f64,
    pub eye_height: f64,
}

impl Default for RoadGeometry {
    fn default() -> Self {
        let road_width = 5.85;
        RoadGeometry {
            road_width,
            lane_count: 2,
            vehicle_lane_center_offset: road_width / 4.0,
            vehicle_length: 4.5,
            vehicle_width: 1.8,
            walk_speed: 1.31,
            eye_height: 1.6,
        }
    }
}

impl RoadGeometry {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.lane_band();
        let positive = [
            ("road_width", self.road_width),
            ("vehicle_length", self.vehicle_length),
            ("vehicle_width", self.vehicle_width),
            ("walk_speed", self.walk_speed),
            ("eye_height", self.eye_height),
        ];
        for (name, value) in positive {
            if !(value > 0.0 && value.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {value}")));
            }
        }
        if self.lane_count == 0 {
            return Err(Error::Config("lane_count must be at least 1".into()));
        }
        if !(lo >= 0.0 && hi <= self.road_width && self.vehicle_lane_center_offset > 0.0) {
            return Err(Error::Config(format!(
                "vehicle band [{lo}, {hi}] must lie within the road [0, {}]",
                self.road_width
            )));
        }
        Ok(())
    }

    /// Lateral extent `[lo, hi]` of the vehicle's footprint.
    pub fn lane_band(&self) -> (f64, f64) {
        let half = self.vehicle_width / 2.0;
        (
            self.vehicle_lane_center_offset - half,
            self.vehicle_lane_center_offset + half,
        )
    }
}

/// True world state at one time step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WorldState {
    pub t: f64,
    pub vehicle_distance: f64,
    pub vehicle_speed: f64,
    pub ped_progress: f64,
    pub ped_moving: bool,
}

impl WorldState {
    pub fn initial(scenario: &Scenario) -> Self {
        WorldState {
            t: 0.0,
            vehicle_distance: scenario.distance,
            vehicle_speed: scenario.speed,
            ped_progress: 0.0,
            ped_moving: false,
        }
    }

    /// State after `step` steps of length `dt`. Positions are evaluated from
    /// the closed form rather than accumulated, so every step is exact.
    pub fn at_step(scenario: &Scenario, geometry: &RoadGeometry, step: u32, dt: f64, go_step: Option<u32>) -> Self {
        let t = f64::from(step) * dt;
        let (ped_progress, ped_moving) = match go_step {
            Some(g) if step >= g => {
                let walked = f64::from(step - g) * dt * geometry.walk_speed;
                (walked.min(geometry.road_width), walked < geometry.road_width)
            }
            _ => (0.0, false),
        };
        WorldState {
            t,
            vehicle_distance: scenario.vehicle_distance(t),
            vehicle_speed: scenario.speed,
            ped_progress,
            ped_moving,
        }
    }

    /// Straight-line distance between the pedestrian and the vehicle front.
    pub fn euclidean_distance(&self, geometry: &RoadGeometry) -> f64 {
        self.vehicle_distance
            .hypot(geometry.vehicle_lane_center_offset - self.ped_progress)
    }
}

/// How a crossing that starts at a given time ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Outcome {
    SafeBefore,
    SafeAfter,
    Collision,
}

impl Outcome {
    pub fn is_collision(self) -> bool {
        self == Outcome::Collision
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::SafeBefore => "safe_before",
            Outcome::SafeAfter => "safe_after",
            Outcome::Collision => "collision",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossingResult {
    pub outcome: Outcome,
    /// Signed gap in seconds between the pedestrian's occupancy of the vehicle
    /// band and the vehicle's occupancy of the crossing line. Positive values
    /// are clearances; zero or negative values are overlap depths.
    pub margin: f64,
}

/// Pedestrian band-occupancy interval for a crossing started at `cit`.
pub fn pedestrian_band_interval(geometry: &RoadGeometry, cit: f64) -> (f64, f64) {
    let (lo, hi) = geometry.lane_band();
    (cit + lo / geometry.walk_speed, cit + hi / geometry.walk_speed)
}

/// Interval during which the vehicle footprint covers the crossing line.
pub fn vehicle_line_interval(scenario: &Scenario, geometry: &RoadGeometry) -> (f64, f64) {
    (scenario.tta, scenario.pass_time(geometry))
}

/// Analytic outcome of starting to cross at `cit`.
///
/// The pedestrian is a point walking at constant speed; the vehicle is a
/// rectangle moving at constant speed. A collision is any overlap (including
/// touching) of the two closed occupancy intervals.
pub fn crossing_outcome(scenario: &Scenario, geometry: &RoadGeometry, cit: f64) -> CrossingResult {
    let (ped_in, ped_out) = pedestrian_band_interval(geometry, cit);
    let (veh_in, veh_out) = vehicle_line_interval(scenario, geometry);
    let before_gap = veh_in - ped_out;
    let after_gap = ped_in - veh_out;
    let margin = before_gap.max(after_gap);
    let outcome = if ped_in <= veh_out && veh_in <= ped_out {
        Outcome::Collision
    } else if before_gap > 0.0 {
        Outcome::SafeBefore
    } else {
        Outcome::SafeAfter
    };
    CrossingResult { outcome, margin }
}

/// Range of crossing-initiation times `[lo, hi]` that end in a collision.
pub fn collision_window(scenario: &Scenario, geometry: &RoadGeometry) -> (f64, f64) {
    let (lo, hi) = geometry.lane_band();
    let (veh_in, veh_out) = vehicle_line_interval(scenario, geometry);
    (veh_in - hi / geometry.walk_speed, veh_out - lo / geometry.walk_speed)
}

/// Scenario set and geometry, as loaded from a TOML file.
///
/// ```toml
/// [geometry]
/// road_width = 5.85
/// walk_speed = 1.31
///
/// [[scenarios]]
/// id = 1
/// v0 = 6.94
/// d0 = 15.90
/// ```
///
/// Omitted geometry keys take their defaults; an omitted scenario list means
/// the built-in table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    #[serde(default)]
    pub geometry: RoadGeometry,
    #[serde(default = "scenario_table")]
    pub scenarios: Vec<Scenario>,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            geometry: RoadGeometry::default(),
            scenarios: scenario_table(),
        }
    }
}

impl WorldConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: WorldConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if self.scenarios.is_empty() {
            return Err(Error::Config("scenario list is empty".into()));
        }
        let mut ids: Vec<u32> = self.scenarios.iter().map(|s| s.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("duplicate scenario id".into()));
        }
        Ok(())
    }

    pub fn scenario(&self, id: u32) -> Option<&Scenario> {
        self.scenarios.iter().find(|s| s.id == id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force_collision(s: &Scenario, g: &RoadGeometry, cit: f64, dt: f64) -> bool {
        // Step the pedestrian across the whole road and test whether its point
        // lies inside the vehicle rectangle at any sample.
        let (lane_lo, lane_hi) = g.lane_band();
        let steps = (g.road_width / g.walk_speed / dt).ceil() as u64;
        (0..=steps).any(|j| {
            let tau = j as f64 * dt;
            let t = cit + tau;
            let y = g.walk_speed * tau;
            let front = s.distance - s.speed * t;
            let rear = front + g.vehicle_length;
            front <= 0.0 && 0.0 <= rear && lane_lo <= y && y <= lane_hi
        })
    }

    #[test]
    fn table_rows() {
        let t = scenario_table();
        assert_eq!(t.len(), 8);
        assert_eq!((t[0].speed, t[0].distance), (6.94, 15.90));
        assert!((t[0].tta - 2.29).abs() < 0.005);
        assert_eq!((t[3].speed, t[3].distance), (13.89, 63.61));
        assert!((t[3].tta - 4.58).abs() < 0.005);
        let train = t[6];
        assert!(train.training_only);
        assert_eq!((train.speed, train.distance, train.tta), (6.94, 6.94, 1.0));
        assert!(t[7].training_only && t[7].tta == 1.0);
        for s in &t {
            assert!((s.tta - s.distance / s.speed).abs() < 1e-9);
        }
    }

    #[test]
    fn vehicle_distance_examples() {
        let s = scenario_table()[0];
        assert_eq!(s.vehicle_distance(0.0), 15.90);
        assert!(s.vehicle_distance(s.tta).abs() < 1e-12);
        assert!((s.vehicle_distance(1.0) - 8.96).abs() < 1e-12);
    }

    #[test]
    fn vehicle_distance_is_linear_on_step_grid() {
        let g = RoadGeometry::default();
        for s in scenario_table() {
            for k in 0..300 {
                let ws = WorldState::at_step(&s, &g, k, 0.1, None);
                let closed = s.distance - s.speed * (k as f64 * 0.1);
                assert!((ws.vehicle_distance - closed).abs() < 1e-12);
                if k > 0 {
                    let prev = WorldState::at_step(&s, &g, k - 1, 0.1, None);
                    let drop = prev.vehicle_distance - ws.vehicle_distance;
                    assert!((drop - s.speed * 0.1).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn outcome_examples() {
        let s = scenario_table()[0];
        let g = RoadGeometry::default();
        let r = crossing_outcome(&s, &g, 0.0);
        assert_eq!(r.outcome, Outcome::SafeBefore);
        // pedestrian leaves the band at 1.803 s, vehicle arrives at 2.291 s
        assert!((r.margin - (s.tta - 2.3625 / 1.31)).abs() < 1e-12);
        assert_eq!(crossing_outcome(&s, &g, 1.0).outcome, Outcome::Collision);
        assert_eq!(crossing_outcome(&s, &g, 10.0).outcome, Outcome::SafeAfter);
        assert!(crossing_outcome(&s, &g, 1.0).margin < 0.0);
    }

    #[test]
    fn grazing_contact_is_a_collision() {
        let s = scenario_table()[0];
        let g = RoadGeometry::default();
        let (lo, hi) = collision_window(&s, &g);
        assert_eq!(crossing_outcome(&s, &g, lo).outcome, Outcome::Collision);
        assert_eq!(crossing_outcome(&s, &g, hi).outcome, Outcome::Collision);
        assert_eq!(crossing_outcome(&s, &g, lo - 1e-9).outcome, Outcome::SafeBefore);
        assert_eq!(crossing_outcome(&s, &g, hi + 1e-9).outcome, Outcome::SafeAfter);
    }

    #[test]
    fn euclidean_examples() {
        let g = RoadGeometry::default();
        let mut ws = WorldState::initial(&scenario_table()[0]);
        ws.vehicle_distance = 0.0;
        assert!((ws.euclidean_distance(&g) - 1.4625).abs() < 1e-12);
        ws.vehicle_distance = 15.90;
        assert!((ws.euclidean_distance(&g) - 15.967_119_535_157_24).abs() < 1e-9);
        ws.vehicle_distance = -5.0;
        ws.ped_progress = 1.4625;
        assert_eq!(ws.euclidean_distance(&g), 5.0);
    }

    #[test]
    fn outcome_matches_brute_force_on_fine_grid() {
        // 0.1 ms stepping; the 0.01 s grid comes within 0.09 ms of a
        // collision boundary, which 1 ms stepping cannot resolve.
        let g = RoadGeometry::default();
        for s in scenario_table() {
            for k in 0..=2000 {
                let cit = k as f64 * 0.01;
                let analytic = crossing_outcome(&s, &g, cit).outcome.is_collision();
                let brute = brute_force_collision(&s, &g, cit, 1e-4);
                assert_eq!(analytic, brute, "scenario {} cit {cit}", s.id);
            }
        }
    }

    #[test]
    fn collision_set_is_one_interval() {
        let g = RoadGeometry::default();
        for s in scenario_table() {
            let flags: Vec<bool> = (0..=20_000)
                .map(|k| crossing_outcome(&s, &g, k as f64 * 0.001).outcome.is_collision())
                .collect();
            let switches = flags.windows(2).filter(|w| w[0] != w[1]).count();
            let starts_in = flags[0];
            // either starts inside and leaves once, or enters once and leaves once
            assert!(if starts_in { switches == 1 } else { switches == 2 }, "scenario {}", s.id);
        }
    }

    #[test]
    fn training_scenarios_never_allow_crossing_first() {
        let g = RoadGeometry::default();
        for s in scenario_table().into_iter().filter(|s| s.training_only) {
            let (_, window_end) = collision_window(&s, &g);
            for k in 0..=3000 {
                let cit = k as f64 * 0.001;
                let out = crossing_outcome(&s, &g, cit).outcome;
                assert_ne!(out, Outcome::SafeBefore, "scenario {} cit {cit}", s.id);
                if cit <= window_end {
                    assert_eq!(out, Outcome::Collision, "scenario {} cit {cit}", s.id);
                }
            }
            // every start before arrival collides at the slow speed; the fast
            // vehicle clears the lane before a late starter reaches it
            let late_start = s.tta - 0.01;
            let expected = if s.speed == SLOW_SPEED { Outcome::Collision } else { Outcome::SafeAfter };
            assert_eq!(crossing_outcome(&s, &g, late_start).outcome, expected);
        }
    }

    #[test]
    fn geometry_validation() {
        assert!(RoadGeometry::default().validate().is_ok());
        let bad = RoadGeometry { vehicle_lane_center_offset: 0.5, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = RoadGeometry { walk_speed: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
        assert!(Scenario::new(1, -1.0, 10.0, false).is_err());
    }

    #[test]
    fn world_config_from_toml() {
        let cfg = WorldConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, WorldConfig::default());
        let cfg = WorldConfig::from_toml_str(
            "[geometry]\nwalk_speed = 1.5\n\n[[scenarios]]\nid = 3\nv0 = 10.0\nd0 = 20.0\n",
        )
        .unwrap();
        assert_eq!(cfg.geometry.walk_speed, 1.5);
        assert_eq!(cfg.geometry.road_width, 5.85);
        assert_eq!(cfg.scenarios.len(), 1);
        assert_eq!(cfg.scenarios[0].tta, 2.0);
        assert!(WorldConfig::from_toml_str("[geometry]\nbogus = 1\n").is_err());
        assert!(WorldConfig::from_toml_str("[[scenarios]]\nid = 1\nv0 = 0.0\nd0 = 1.0\n").is_err());
    }
}

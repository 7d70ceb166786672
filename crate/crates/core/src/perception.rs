//! Noisy visual observation of the approaching vehicle and the Kalman filter
//! that turns those observations into a belief.
//!
//! The pedestrian judges distance from the angle below the horizon at which
//! the vehicle appears, `atan(h / d)`. Gaussian noise of SD `sigma_v` on that
//! angle, propagated back through the geometry, gives a position noise whose
//! SD grows quickly with distance:
//!
//! ```text
//! sd = |d_l| * (1 - h / (d * tan(atan(h / d) + sigma_v)))
//! ```
//!
//! where `d_l` is the vehicle's longitudinal distance to the crossing point,
//! `d` the straight-line distance between pedestrian and vehicle, and `h` the
//! pedestrian's eye height.

use std::f64::consts::FRAC_PI_2;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::{RoadGeometry, WorldState, FAST_SPEED, SLOW_SPEED};

/// Population SD of the two scenario speeds, used as the initial velocity
/// uncertainty of the filter.
pub const DEFAULT_VEL_PRIOR_SD: f64 = (FAST_SPEED - SLOW_SPEED) / 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    /// SD of the angular noise, radians.
    pub sigma_v: f64,
}

impl NoiseParams {
    pub fn new(sigma_v: f64) -> Result<Self> {
        if !(sigma_v >= 0.0 && sigma_v.is_finite()) {
            return Err(Error::Config(format!("sigma_v must be >= 0, got {sigma_v}")));
        }
        Ok(NoiseParams { sigma_v })
    }
}

/// Observer settings that are not part of the angular-noise model itself.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    /// SD of the white-acceleration process noise, m/s^2.
    pub process_accel_sd: f64,
    /// SD of the initial velocity belief around the true speed, m/s.
    pub vel_prior_sd: f64,
    /// Lower bound on the measurement variance, m^2.
    pub meas_var_floor: f64,
    /// Smallest viewing distance used when evaluating the noise model, m.
    pub min_view_distance: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            process_accel_sd: 0.1,
            vel_prior_sd: DEFAULT_VEL_PRIOR_SD,
            meas_var_floor: 1e-4,
            min_view_distance: 0.5,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.vel_prior_sd > 0.0) {
            return Err(Error::Config("vel_prior_sd must be positive".into()));
        }
        if !(self.meas_var_floor > 0.0) {
            return Err(Error::Config("meas_var_floor must be positive".into()));
        }
        if !(self.process_accel_sd >= 0.0) {
            return Err(Error::Config("process_accel_sd must be >= 0".into()));
        }
        if !(self.min_view_distance > 0.0) {
            return Err(Error::Config("min_view_distance must be positive".into()));
        }
        Ok(())
    }
}

/// SD of the position noise produced by angular noise `sigma_v`.
///
/// Fails when the perturbed angle reaches the horizon limit, where the
/// inversion back to a distance is undefined.
pub fn angular_noise_sd(d_l: f64, d: f64, h: f64, sigma_v: f64) -> Result<f64> {
    if sigma_v == 0.0 {
        return Ok(0.0);
    }
    let angle = (h / d).atan() + sigma_v;
    if angle >= FRAC_PI_2 {
        return Err(Error::AngleDomain { angle });
    }
    Ok(d_l.abs() * (1.0 - h / (d * angle.tan())))
}

/// [`angular_noise_sd`] with the viewing distance clamped to `min_d`.
///
/// As the perturbed angle approaches the horizon limit the SD tends to
/// `|d_l|`; past it the SD saturates at that limit.
pub fn clamped_noise_sd(d_l: f64, d: f64, h: f64, sigma_v: f64, min_d: f64) -> f64 {
    angular_noise_sd(d_l, d.max(min_d), h, sigma_v).unwrap_or(d_l.abs())
}

/// One noisy reading of the vehicle's longitudinal distance.
pub fn observe<R: Rng + ?Sized>(
    ws: &WorldState,
    geometry: &RoadGeometry,
    params: NoiseParams,
    cfg: &FilterConfig,
    rng: &mut R,
) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    let sd = clamped_noise_sd(
        ws.vehicle_distance,
        ws.euclidean_distance(geometry),
        geometry.eye_height,
        params.sigma_v,
        cfg.min_view_distance,
    );
    ws.vehicle_distance + z * sd
}

/// Measurement variance the filter assigns to reading `z`.
///
/// The observer has no access to the true state, so the noise model is
/// evaluated at the measured position.
pub fn measurement_variance(
    z: f64,
    ped_progress: f64,
    geometry: &RoadGeometry,
    params: NoiseParams,
    cfg: &FilterConfig,
) -> f64 {
    let d = z.hypot(geometry.vehicle_lane_center_offset - ped_progress);
    let sd = clamped_noise_sd(z, d, geometry.eye_height, params.sigma_v, cfg.min_view_distance);
    (sd * sd).max(cfg.meas_var_floor)
}

/// Gaussian belief over the vehicle's distance to the crossing line and its
/// approach speed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeliefState {
    pub mean_pos: f64,
    pub mean_vel: f64,
    pub var_pos: f64,
    pub var_vel: f64,
    pub cov_pos_vel: f64,
}

impl BeliefState {
    /// Determinant of the covariance; non-negative for a valid belief.
    pub fn cov_det(&self) -> f64 {
        self.var_pos * self.var_vel - self.cov_pos_vel * self.cov_pos_vel
    }
}

/// Initial belief: the first position reading and a velocity drawn around the
/// true speed.
pub fn kf_init<R: Rng + ?Sized>(
    first_obs: f64,
    true_vel: f64,
    vel_prior_sd: f64,
    first_obs_var: f64,
    rng: &mut R,
) -> BeliefState {
    let z: f64 = StandardNormal.sample(rng);
    BeliefState {
        mean_pos: first_obs,
        mean_vel: true_vel + vel_prior_sd * z,
        var_pos: first_obs_var,
        var_vel: vel_prior_sd * vel_prior_sd,
        cov_pos_vel: 0.0,
    }
}

/// One constant-velocity predict step followed by a scalar position update.
///
/// The state is `[distance, speed]` with `distance' = distance - speed * dt`.
pub fn kf_step(b: &BeliefState, z: f64, meas_var: f64, dt: f64, process_accel_sd: f64) -> BeliefState {
    // predict
    let q = process_accel_sd * process_accel_sd;
    let dt2 = dt * dt;
    let pos = b.mean_pos - b.mean_vel * dt;
    let vel = b.mean_vel;
    let p00 = b.var_pos - 2.0 * dt * b.cov_pos_vel + dt2 * b.var_vel + q * dt2 * dt2 / 4.0;
    let p01 = b.cov_pos_vel - dt * b.var_vel - q * dt2 * dt / 2.0;
    let p11 = b.var_vel + q * dt2;

    // update, written in the form that keeps the covariance PSD
    let s = p00 + meas_var;
    let innovation = z - pos;
    let k0 = p00 / s;
    let k1 = p01 / s;
    let shrink = meas_var / s;
    BeliefState {
        mean_pos: pos + k0 * innovation,
        mean_vel: vel + k1 * innovation,
        var_pos: p00 * shrink,
        var_vel: p11 - p01 * p01 / s,
        cov_pos_vel: p01 * shrink,
    }
}

/// Believed time until the vehicle reaches the crossing line, or `None` when
/// the vehicle is believed stationary or receding.
pub fn estimated_tta(b: &BeliefState) -> Option<f64> {
    (b.mean_vel > 0.0).then(|| b.mean_pos / b.mean_vel)
}

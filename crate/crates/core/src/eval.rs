//! Greedy rollouts and the behavioural metrics computed from them:
//! gap-acceptance rates, crossing-initiation-time distributions and the
//! spread of the first estimated time to arrival.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{normalize, Action, CrossingEnv, EnvConfig, EpisodeOutcome, ObserverMode};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::perception::{estimated_tta, NoiseParams};
use crate::rng::{derive_seed, seeded};
use crate::world::{crossing_outcome, Outcome, RoadGeometry, Scenario};

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Model,
    Human,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Model => "model",
            Source::Human => "human",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub scenario_id: u32,
    pub sigma_v: f64,
    /// `None` when the episode was truncated without a crossing.
    pub cit: Option<f64>,
    pub accepted: bool,
    pub collided: bool,
    pub source: Source,
    pub participant_id: Option<String>,
}

/// Crossing ahead of the vehicle: started before it reaches the crossing line
/// and not classified as passing behind it.
pub fn is_accepted(scenario: &Scenario, geometry: &RoadGeometry, cit: f64) -> bool {
    cit < scenario.tta && crossing_outcome(scenario, geometry, cit).outcome != Outcome::SafeAfter
}

impl TrialRecord {
    pub fn new(
        scenario: &Scenario,
        geometry: &RoadGeometry,
        sigma_v: f64,
        cit: Option<f64>,
        source: Source,
        participant_id: Option<String>,
    ) -> Self {
        let (accepted, collided) = match cit {
            Some(c) => (
                is_accepted(scenario, geometry, c),
                crossing_outcome(scenario, geometry, c).outcome.is_collision(),
            ),
            None => (false, false),
        };
        TrialRecord { scenario_id: scenario.id, sigma_v, cit, accepted, collided, source, participant_id }
    }
}

/// Runs greedy policies in the crossing environment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluator {
    pub geometry: RoadGeometry,
    pub env: EnvConfig,
}

impl Default for Evaluator {
    fn default() -> Self {
        Evaluator { geometry: RoadGeometry::default(), env: EnvConfig::default() }
    }
}

impl Evaluator {
    pub fn new(geometry: RoadGeometry, env: EnvConfig) -> Result<Self> {
        geometry.validate()?;
        env.validate()?;
        Ok(Evaluator { geometry, env })
    }

    /// One greedy episode; returns the crossing time (if any) and outcome.
    pub fn episode(
        &self,
        env: &mut CrossingEnv,
        model: &Model,
        scenario: &Scenario,
        sigma_v: f64,
        seed: u64,
    ) -> Result<(Option<f64>, EpisodeOutcome)> {
        let mode = model.kind().observer();
        let mut obs = env.reset(scenario, NoiseParams::new(sigma_v)?, mode, seed);
        loop {
            let action: Action = model.net().greedy_action(&normalize(&obs))?;
            let step = env.step(action)?;
            if step.done {
                return Ok((step.cit, step.outcome.expect("done steps carry an outcome")));
            }
            obs = step.observation;
        }
    }

    /// `n` greedy episodes, each seeded from `(seed, episode index)`.
    pub fn rollout(&self, model: &Model, scenario: &Scenario, sigma_v: f64, n: usize, seed: u64) -> Result<Vec<TrialRecord>> {
        model.kind().check_sigma(sigma_v)?;
        NoiseParams::new(sigma_v)?;
        (0..n)
            .into_par_iter()
            .map_init(
                || CrossingEnv::new(self.geometry, self.env),
                |env, k| {
                    let (cit, _) = self.episode(env, model, scenario, sigma_v, derive_seed(seed, k as u64))?;
                    Ok(TrialRecord::new(scenario, &self.geometry, sigma_v, cit, Source::Model, None))
                },
            )
            .collect()
    }

    /// Samples the estimated time to arrival (measured from scenario start)
    /// held after the filter's first update, for a pedestrian that waits.
    pub fn tta_samples(&self, scenario: &Scenario, sigma_v: f64, n: usize, seed: u64) -> Result<TtaSamples> {
        let noise = NoiseParams::new(sigma_v)?;
        let results: Vec<Option<f64>> = (0..n)
            .into_par_iter()
            .map_init(
                || CrossingEnv::new(self.geometry, self.env),
                |env, k| {
                    env.reset(scenario, noise, ObserverMode::Noisy, derive_seed(seed, k as u64));
                    env.step(Action::NotGo)?;
                    Ok(estimated_tta(env.belief()).map(|tta| env.time() + tta))
                },
            )
            .collect::<Result<_>>()?;
        let values: Vec<f64> = results.iter().flatten().copied().collect();
        Ok(TtaSamples { non_approaching: n - values.len(), values })
    }

    pub fn tta_dispersion(&self, scenario: &Scenario, sigma_v: f64, n: usize, seed: u64) -> Result<TtaDispersion> {
        let samples = self.tta_samples(scenario, sigma_v, n, seed)?;
        TtaDispersion::from_samples(scenario.id, sigma_v, &samples)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TtaSamples {
    pub values: Vec<f64>,
    /// Draws whose believed vehicle speed was not positive.
    pub non_approaching: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtaDispersion {
    pub scenario_id: u32,
    pub sigma_v: f64,
    pub n: usize,
    pub non_approaching: usize,
    pub mean: f64,
    pub sd: f64,
    pub p5: f64,
    pub p95: f64,
}

impl TtaDispersion {
    pub fn from_samples(scenario_id: u32, sigma_v: f64, s: &TtaSamples) -> Result<Self> {
        if s.values.is_empty() {
            return Err(Error::NoSamples);
        }
        let mut sorted = s.values.clone();
        sorted.sort_by(f64::total_cmp);
        Ok(TtaDispersion {
            scenario_id,
            sigma_v,
            n: s.values.len(),
            non_approaching: s.non_approaching,
            mean: mean(&s.values),
            sd: sample_sd(&s.values),
            p5: quantile_sorted(&sorted, 0.05),
            p95: quantile_sorted(&sorted, 0.95),
        })
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n − 1 denominator); 0 for fewer than two values.
pub fn sample_sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile-bootstrap interval for `sd(a) / sd(b)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioInterval {
    pub ratio: f64,
    pub lo: f64,
    pub hi: f64,
}

pub fn bootstrap_sd_ratio(a: &[f64], b: &[f64], reps: usize, level: f64, seed: u64) -> Result<RatioInterval> {
    if a.len() < 2 || b.len() < 2 || reps == 0 {
        return Err(Error::NoSamples);
    }
    let mut rng = seeded(seed);
    let mut buf_a = vec![0.0; a.len()];
    let mut buf_b = vec![0.0; b.len()];
    let mut ratios: Vec<f64> = (0..reps)
        .map(|_| {
            buf_a.iter_mut().for_each(|x| *x = a[rng.random_range(0..a.len())]);
            buf_b.iter_mut().for_each(|x| *x = b[rng.random_range(0..b.len())]);
            sample_sd(&buf_a) / sample_sd(&buf_b)
        })
        .collect();
    ratios.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok(RatioInterval {
        ratio: sample_sd(a) / sample_sd(b),
        lo: quantile_sorted(&ratios, tail),
        hi: quantile_sorted(&ratios, 1.0 - tail),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinomialInterval {
    pub successes: usize,
    pub trials: usize,
    pub rate: f64,
    pub lo: f64,
    pub hi: f64,
}

impl BinomialInterval {
    pub fn overlaps(&self, other: &BinomialInterval) -> bool {
        self.lo <= other.hi && other.lo <= self.hi
    }
}

/// Wilson score interval at normal quantile `z`.
pub fn wilson_interval(successes: usize, trials: usize, z: f64) -> Result<BinomialInterval> {
    if trials == 0 {
        return Err(Error::NoSamples);
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let centre = (p + z2 / (2.0 * n)) / (1.0 + z2 / n);
    let half = z / (1.0 + z2 / n) * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    Ok(BinomialInterval {
        successes,
        trials,
        rate: p,
        lo: (centre - half).max(0.0),
        hi: (centre + half).min(1.0),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceCell {
    pub scenario_id: u32,
    pub sigma_v: f64,
    pub source: Source,
    #[serde(flatten)]
    pub interval: BinomialInterval,
}

type CellKey = (Source, u64, u32);

fn cell_key(r: &TrialRecord) -> CellKey {
    // non-negative floats order like their bit patterns
    (r.source, r.sigma_v.to_bits(), r.scenario_id)
}

fn group(records: &[TrialRecord]) -> BTreeMap<CellKey, Vec<&TrialRecord>> {
    let mut groups: BTreeMap<CellKey, Vec<&TrialRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(cell_key(r)).or_default().push(r);
    }
    groups
}

/// Acceptance rate with a 95% Wilson interval per (source, σ_v, scenario).
pub fn gap_acceptance_rate(records: &[TrialRecord]) -> Result<Vec<AcceptanceCell>> {
    group(records)
        .into_iter()
        .map(|((source, sigma_bits, scenario_id), rs)| {
            let k = rs.iter().filter(|r| r.accepted).count();
            Ok(AcceptanceCell {
                scenario_id,
                sigma_v: f64::from_bits(sigma_bits),
                source,
                interval: wilson_interval(k, rs.len(), Z95)?,
            })
        })
        .collect()
}

/// Empirical CDF of the finite crossing times; truncated trials are counted
/// separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CitCdf {
    /// Distinct crossing times with the cumulative fraction at each.
    pub points: Vec<(f64, f64)>,
    pub n_finite: usize,
    pub n_truncated: usize,
}

impl CitCdf {
    pub fn from_cits(cits: impl IntoIterator<Item = Option<f64>>) -> Result<Self> {
        let mut finite = Vec::new();
        let mut n_truncated = 0;
        for c in cits {
            match c {
                Some(t) => finite.push(t),
                None => n_truncated += 1,
            }
        }
        if finite.is_empty() && n_truncated == 0 {
            return Err(Error::NoSamples);
        }
        finite.sort_by(f64::total_cmp);
        let n = finite.len();
        let mut points: Vec<(f64, f64)> = Vec::new();
        for (i, &t) in finite.iter().enumerate() {
            let p = (i + 1) as f64 / n as f64;
            match points.last_mut() {
                Some(last) if last.0 == t => last.1 = p,
                _ => points.push((t, p)),
            }
        }
        Ok(CitCdf { points, n_finite: n, n_truncated })
    }

    /// Right-continuous evaluation: fraction of finite crossing times ≤ t.
    pub fn eval(&self, t: f64) -> f64 {
        let idx = self.points.partition_point(|&(x, _)| x <= t);
        if idx == 0 {
            0.0
        } else {
            self.points[idx - 1].1
        }
    }
}

pub fn cit_cdf(records: &[TrialRecord]) -> Result<CitCdf> {
    CitCdf::from_cits(records.iter().map(|r| r.cit))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdfSeries {
    pub scenario_id: u32,
    pub sigma_v: f64,
    pub source: Source,
    pub cdf: CitCdf,
}

/// One CDF per (source, σ_v, scenario).
pub fn cit_cdfs(records: &[TrialRecord]) -> Result<Vec<CdfSeries>> {
    group(records)
        .into_iter()
        .map(|((source, sigma_bits, scenario_id), rs)| {
            Ok(CdfSeries {
                scenario_id,
                sigma_v: f64::from_bits(sigma_bits),
                source,
                cdf: CitCdf::from_cits(rs.iter().map(|r| r.cit))?,
            })
        })
        .collect()
}

/// Bundle of the acceptance, CDF and dispersion series for plotting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotData {
    pub schema_version: u32,
    pub acceptance: Vec<AcceptanceCell>,
    pub cit_cdf: Vec<CdfSeries>,
    pub tta_dispersion: Vec<TtaDispersion>,
}

pub const PLOT_SCHEMA_VERSION: u32 = 1;

pub const TRIALS_HEADER: [&str; 7] = ["scenario_id", "sigma_v", "cit", "accepted", "collided", "source", "participant_id"];
pub const ACCEPTANCE_HEADER: [&str; 8] = ["scenario_id", "sigma_v", "source", "n", "accepted", "rate", "lo", "hi"];
pub const CDF_HEADER: [&str; 6] = ["scenario_id", "sigma_v", "source", "t", "p", "n_truncated"];
pub const DISPERSION_HEADER: [&str; 8] = ["scenario_id", "sigma_v", "n", "non_approaching", "mean", "sd", "p5", "p95"];

#[derive(Serialize)]
struct TrialRow<'a> {
    scenario_id: u32,
    sigma_v: f64,
    cit: Option<f64>,
    accepted: bool,
    collided: bool,
    source: &'a str,
    participant_id: Option<&'a str>,
}

pub fn write_trials_csv<W: Write>(records: &[TrialRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(TrialRow {
            scenario_id: r.scenario_id,
            sigma_v: r.sigma_v,
            cit: r.cit,
            accepted: r.accepted,
            collided: r.collided,
            source: r.source.as_str(),
            participant_id: r.participant_id.as_deref(),
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_acceptance_csv<W: Write>(cells: &[AcceptanceCell], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(ACCEPTANCE_HEADER)?;
    for c in cells {
        let i = &c.interval;
        w.write_record([
            c.scenario_id.to_string(),
            c.sigma_v.to_string(),
            c.source.as_str().to_string(),
            i.trials.to_string(),
            i.successes.to_string(),
            i.rate.to_string(),
            i.lo.to_string(),
            i.hi.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_cdf_csv<W: Write>(series: &[CdfSeries], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CDF_HEADER)?;
    for s in series {
        for &(t, p) in &s.cdf.points {
            w.write_record([
                s.scenario_id.to_string(),
                s.sigma_v.to_string(),
                s.source.as_str().to_string(),
                t.to_string(),
                p.to_string(),
                s.cdf.n_truncated.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_dispersion_csv<W: Write>(rows: &[TtaDispersion], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

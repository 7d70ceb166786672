//! Fitting σ_v to crossing-time data.
//!
//! Model crossing times for each (σ_v, scenario) are smoothed with a Gaussian
//! KDE; a participant's log-likelihood at σ_v is the sum of log densities at
//! their observed crossing times. Three variants are compared by AIC: one σ_v
//! for the pooled data (LMD), one σ_v per participant from separately trained
//! per-σ_v models (LMP), and one σ_v per participant from a single
//! σ_v-conditioned model (LSP).

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{quantile_sorted, sample_sd, Evaluator, Source, TrialRecord};
use crate::model::{Model, ModelKind, SIGMA_MATCH_TOL};
use crate::rng::derive_seed;
use crate::world::{RoadGeometry, Scenario};

pub const MIN_BANDWIDTH: f64 = 0.05;
pub const DENSITY_FLOOR: f64 = 1e-6;
/// Tolerance when matching dataset (v0, d0) pairs to known scenarios.
pub const SCENARIO_MATCH_TOL: f64 = 1e-3;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Silverman's rule `0.9 · min(sd, IQR/1.34) · n^(-1/5)`, floored at 0.05 s.
pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    if samples.len() < 2 {
        return MIN_BANDWIDTH;
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let spread = sample_sd(samples).min(iqr / 1.34);
    (0.9 * spread * (samples.len() as f64).powf(-0.2)).max(MIN_BANDWIDTH)
}

/// Gaussian kernel density over crossing times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CitPdf {
    pub bandwidth: f64,
    pub samples: Vec<f64>,
}

/// Kernel density estimate of finite `samples`; Silverman bandwidth unless
/// one is given.
pub fn kde_pdf(samples: &[f64], bandwidth: Option<f64>) -> Result<CitPdf> {
    let samples: Vec<f64> = samples.iter().copied().filter(|x| x.is_finite()).collect();
    if samples.is_empty() {
        return Err(Error::NoSamples);
    }
    let bandwidth = match bandwidth {
        Some(h) if h > 0.0 && h.is_finite() => h,
        Some(h) => return Err(Error::Config(format!("bandwidth must be positive, got {h}"))),
        None => silverman_bandwidth(&samples),
    };
    Ok(CitPdf { bandwidth, samples })
}

impl CitPdf {
    /// A density that is zero everywhere, for cells where the model never
    /// crossed.
    pub fn empty() -> Self {
        CitPdf { bandwidth: MIN_BANDWIDTH, samples: Vec::new() }
    }

    pub fn pdf(&self, t: f64) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let h = self.bandwidth;
        let sum: f64 = self
            .samples
            .iter()
            .map(|&s| {
                let u = (t - s) / h;
                (-0.5 * u * u).exp()
            })
            .sum();
        sum * INV_SQRT_2PI / (h * self.samples.len() as f64)
    }

    pub fn log_pdf_floored(&self, t: f64) -> f64 {
        self.pdf(t).max(DENSITY_FLOOR).ln()
    }
}

/// Per-scenario densities for one σ_v.
pub type PdfSet = BTreeMap<u32, CitPdf>;

/// `Σ log(max(pdf(cit), 1e-6))` over trials; a trial without a crossing
/// contributes the floor.
pub fn participant_loglik(pdfs: &PdfSet, trials: &[TrialRecord]) -> Result<f64> {
    trials.iter().try_fold(0.0, |acc, t| {
        let pdf = pdfs.get(&t.scenario_id).ok_or(Error::MissingScenario(t.scenario_id))?;
        Ok(acc + t.cit.map_or(DENSITY_FLOOR.ln(), |c| pdf.log_pdf_floored(c)))
    })
}

/// Densities of model crossing times for every σ_v on a grid, ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdfBank {
    pub entries: Vec<(f64, PdfSet)>,
}

impl PdfBank {
    /// Groups model trial records by (σ_v, scenario) and smooths each group.
    pub fn from_records(records: &[TrialRecord]) -> Result<Self> {
        let mut cits: BTreeMap<u64, BTreeMap<u32, Vec<Option<f64>>>> = BTreeMap::new();
        for r in records {
            cits.entry(r.sigma_v.to_bits()).or_default().entry(r.scenario_id).or_default().push(r.cit);
        }
        let entries = cits
            .into_iter()
            .map(|(bits, by_scenario)| {
                let set = by_scenario
                    .into_iter()
                    .map(|(id, cs)| {
                        let finite: Vec<f64> = cs.into_iter().flatten().collect();
                        let pdf = if finite.is_empty() { CitPdf::empty() } else { kde_pdf(&finite, None)? };
                        Ok((id, pdf))
                    })
                    .collect::<Result<PdfSet>>()?;
                Ok((f64::from_bits(bits), set))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PdfBank { entries })
    }

    pub fn sigmas(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.0).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Policies able to act at each grid σ_v: separately trained per-σ_v models
/// or one conditioned model.
#[derive(Debug, Clone)]
pub enum PolicyBank {
    PerSigma(Vec<Model>),
    Conditioned(Model),
}

impl PolicyBank {
    pub fn model_for(&self, sigma_v: f64) -> Result<&Model> {
        match self {
            PolicyBank::Conditioned(m) => {
                m.kind().check_sigma(sigma_v)?;
                Ok(m)
            }
            PolicyBank::PerSigma(models) => models
                .iter()
                .find(|m| matches!(m.kind(), ModelKind::PerSigma { sigma_v: s } if (s - sigma_v).abs() <= SIGMA_MATCH_TOL))
                .ok_or_else(|| Error::Config(format!("no per-sigma model for sigma_v = {sigma_v}"))),
        }
    }

    /// σ_v values covered by a per-σ_v bank, ascending.
    pub fn grid(&self) -> Option<Vec<f64>> {
        match self {
            PolicyBank::Conditioned(_) => None,
            PolicyBank::PerSigma(models) => {
                let mut g: Vec<f64> = models
                    .iter()
                    .filter_map(|m| match m.kind() {
                        ModelKind::PerSigma { sigma_v } => Some(sigma_v),
                        _ => None,
                    })
                    .collect();
                g.sort_by(f64::total_cmp);
                Some(g)
            }
        }
    }

    /// Greedy rollouts for every (σ_v, scenario) cell, `n` per cell.
    pub fn sample(
        &self,
        ev: &Evaluator,
        grid: &[f64],
        scenarios: &[Scenario],
        n: usize,
        seed: u64,
    ) -> Result<Vec<TrialRecord>> {
        let mut out = Vec::with_capacity(grid.len() * scenarios.len() * n);
        for (i, &sigma) in grid.iter().enumerate() {
            let model = self.model_for(sigma)?;
            for (j, sc) in scenarios.iter().enumerate() {
                let cell_seed = derive_seed(derive_seed(seed, i as u64), j as u64);
                out.extend(ev.rollout(model, sc, sigma, n, cell_seed)?);
            }
        }
        Ok(out)
    }

    pub fn pdf_bank(&self, ev: &Evaluator, grid: &[f64], scenarios: &[Scenario], n: usize, seed: u64) -> Result<PdfBank> {
        if grid.is_empty() {
            return Err(Error::EmptyGrid);
        }
        PdfBank::from_records(&self.sample(ev, grid, scenarios, n, seed)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Variant {
    Lmd,
    Lmp,
    Lsp,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Lmd => "LMD",
            Variant::Lmp => "LMP",
            Variant::Lsp => "LSP",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    /// `None` for a pooled fit.
    pub participant_id: Option<String>,
    pub variant: Variant,
    pub best_sigma_v: f64,
    pub loglik: f64,
    pub grid: Vec<(f64, f64)>,
    pub n_trials: usize,
}

/// Maximizes the log-likelihood over the bank's σ_v grid; ties go to the
/// smaller σ_v.
pub fn fit_sigma(participant_id: Option<String>, trials: &[TrialRecord], bank: &PdfBank, variant: Variant) -> Result<FitResult> {
    if bank.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let grid: Vec<(f64, f64)> = bank
        .entries
        .iter()
        .map(|(sigma, pdfs)| Ok((*sigma, participant_loglik(pdfs, trials)?)))
        .collect::<Result<_>>()?;
    let (best_sigma_v, loglik) = grid
        .iter()
        .copied()
        .fold(None, |best: Option<(f64, f64)>, (s, ll)| match best {
            Some((_, b)) if ll <= b => best,
            _ => Some((s, ll)),
        })
        .expect("nonempty grid");
    Ok(FitResult { participant_id, variant, best_sigma_v, loglik, grid, n_trials: trials.len() })
}

/// Akaike information criterion `2k − 2ℓ`.
pub fn aic(k: usize, loglik: f64) -> f64 {
    2.0 * k as f64 - 2.0 * loglik
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantRow {
    pub variant: Variant,
    pub k: usize,
    pub loglik: f64,
    pub aic: f64,
    pub preferred: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub variants: Vec<VariantRow>,
    pub fits: Vec<FitResult>,
}

pub fn by_participant(trials: &[TrialRecord]) -> BTreeMap<String, Vec<TrialRecord>> {
    let mut out: BTreeMap<String, Vec<TrialRecord>> = BTreeMap::new();
    for t in trials {
        out.entry(t.participant_id.clone().unwrap_or_default()).or_default().push(t.clone());
    }
    out
}

/// Fits LMD and LMP from the per-σ_v bank and, when given, LSP from the
/// conditioned bank; the variant with the lowest AIC is flagged.
pub fn compare_variants(trials: &[TrialRecord], per_sigma: &PdfBank, conditioned: Option<&PdfBank>) -> Result<Comparison> {
    if trials.is_empty() {
        return Err(Error::NoSamples);
    }
    let groups = by_participant(trials);
    let mut fits = vec![fit_sigma(None, trials, per_sigma, Variant::Lmd)?];
    let mut variants = vec![VariantRow { variant: Variant::Lmd, k: 1, loglik: fits[0].loglik, aic: aic(1, fits[0].loglik), preferred: false }];
    let mut per_participant = |bank: &PdfBank, variant: Variant| -> Result<()> {
        let mut total = 0.0;
        for (pid, ts) in &groups {
            let f = fit_sigma(Some(pid.clone()), ts, bank, variant)?;
            total += f.loglik;
            fits.push(f);
        }
        let k = groups.len();
        variants.push(VariantRow { variant, k, loglik: total, aic: aic(k, total), preferred: false });
        Ok(())
    };
    per_participant(per_sigma, Variant::Lmp)?;
    if let Some(bank) = conditioned {
        per_participant(bank, Variant::Lsp)?;
    }
    let best = variants
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.aic.total_cmp(&b.1.aic))
        .map(|(i, _)| i)
        .expect("at least one variant");
    variants[best].preferred = true;
    Ok(Comparison { variants, fits })
}

pub const HUMAN_HEADER: [&str; 4] = ["participant_id", "v0_mps", "d0_m", "cit_s"];
pub const FIT_HEADER: [&str; 5] = ["participant_id", "variant", "best_sigma_v", "loglik", "n_trials"];
pub const VARIANT_HEADER: [&str; 5] = ["variant", "k", "loglik", "aic", "preferred"];

#[derive(Debug, Deserialize)]
struct HumanRow {
    participant_id: String,
    v0_mps: f64,
    d0_m: f64,
    cit_s: f64,
}

pub fn match_scenario(scenarios: &[Scenario], v0: f64, d0: f64) -> Option<&Scenario> {
    scenarios
        .iter()
        .find(|s| (s.speed - v0).abs() <= SCENARIO_MATCH_TOL && (s.distance - d0).abs() <= SCENARIO_MATCH_TOL)
}

/// Reads `participant_id,v0_mps,d0_m,cit_s` rows; `label` names the source in
/// error messages.
pub fn read_human_csv<R: Read>(input: R, label: &Path, scenarios: &[Scenario], geometry: &RoadGeometry) -> Result<Vec<TrialRecord>> {
    let data_err = |line: u64, message: String| Error::Data { path: label.to_path_buf(), line, message };
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = rdr.headers().map_err(|e| data_err(1, e.to_string()))?.clone();
    for col in HUMAN_HEADER {
        if !headers.iter().any(|h| h == col) {
            return Err(data_err(1, format!("missing column {col:?}")));
        }
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            data_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let row: HumanRow = rec.deserialize(Some(&headers)).map_err(|e| data_err(line, e.to_string()))?;
        if !row.cit_s.is_finite() {
            return Err(data_err(line, "cit_s must be finite".into()));
        }
        let sc = match_scenario(scenarios, row.v0_mps, row.d0_m).ok_or_else(|| {
            data_err(line, format!("no scenario with v0 = {} and d0 = {}", row.v0_mps, row.d0_m))
        })?;
        out.push(TrialRecord::new(sc, geometry, f64::NAN, Some(row.cit_s), Source::Human, Some(row.participant_id)));
    }
    Ok(out)
}

pub fn load_human_csv(path: &Path, scenarios: &[Scenario], geometry: &RoadGeometry) -> Result<Vec<TrialRecord>> {
    read_human_csv(std::fs::File::open(path)?, path, scenarios, geometry)
}

/// Writes trials in the human-dataset schema. Trials without a crossing are
/// skipped; the count of skipped trials is returned.
pub fn write_human_csv<W: Write>(trials: &[TrialRecord], scenarios: &[Scenario], out: W) -> Result<usize> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(HUMAN_HEADER)?;
    let mut skipped = 0;
    for t in trials {
        let Some(cit) = t.cit else {
            skipped += 1;
            continue;
        };
        let sc = scenarios.iter().find(|s| s.id == t.scenario_id).ok_or(Error::MissingScenario(t.scenario_id))?;
        w.write_record([
            t.participant_id.clone().unwrap_or_default(),
            sc.speed.to_string(),
            sc.distance.to_string(),
            cit.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(skipped)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParticipant {
    pub participant_id: String,
    pub sigma_v: f64,
}

/// Synthetic participants: `repeats` greedy rollouts per scenario of the
/// bank's policy at each participant's σ_v. Rollouts that never cross are
/// redrawn with fresh seeds (up to 100 attempts) so every trial has a
/// crossing time.
pub fn synthesize(
    ev: &Evaluator,
    bank: &PolicyBank,
    participants: &[SynthParticipant],
    scenarios: &[Scenario],
    repeats: usize,
    seed: u64,
) -> Result<Vec<TrialRecord>> {
    let mut out = Vec::new();
    let mut env = crate::env::CrossingEnv::new(ev.geometry, ev.env);
    for (p, person) in participants.iter().enumerate() {
        let model = bank.model_for(person.sigma_v)?;
        let mut rng = crate::rng::seeded(derive_seed(seed, p as u64));
        for _ in 0..repeats {
            for sc in scenarios {
                let mut cit = None;
                for _ in 0..100 {
                    cit = ev.episode(&mut env, model, sc, person.sigma_v, rng.random())?.0;
                    if cit.is_some() {
                        break;
                    }
                }
                out.push(TrialRecord::new(sc, &ev.geometry, person.sigma_v, cit, Source::Human, Some(person.participant_id.clone())));
            }
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct FitRow<'a> {
    participant_id: &'a str,
    variant: &'a str,
    best_sigma_v: f64,
    loglik: f64,
    n_trials: usize,
}

pub fn write_fits_csv<W: Write>(fits: &[FitResult], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for f in fits {
        w.serialize(FitRow {
            participant_id: f.participant_id.as_deref().unwrap_or("*"),
            variant: f.variant.as_str(),
            best_sigma_v: f.best_sigma_v,
            loglik: f.loglik,
            n_trials: f.n_trials,
        })?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct VariantCsvRow<'a> {
    variant: &'a str,
    k: usize,
    loglik: f64,
    aic: f64,
    preferred: bool,
}

pub fn write_variants_csv<W: Write>(rows: &[VariantRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(VariantCsvRow { variant: r.variant.as_str(), k: r.k, loglik: r.loglik, aic: r.aic, preferred: r.preferred })?;
    }
    w.flush()?;
    Ok(())
}

/// Path-free placeholder used when data come from memory.
pub fn memory_label() -> PathBuf {
    PathBuf::from("<memory>")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::scenario_table;
    use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};
    use rand_distr::{Distribution, Normal};

    fn trapezoid(pdf: &CitPdf, lo: f64, hi: f64, steps: usize) -> f64 {
        let h = (hi - lo) / steps as f64;
        let inner: f64 = (1..steps).map(|i| pdf.pdf(lo + i as f64 * h)).sum();
        h * (inner + 0.5 * (pdf.pdf(lo) + pdf.pdf(hi)))
    }

    fn trial(scenario_id: u32, cit: f64, pid: &str) -> TrialRecord {
        TrialRecord {
            scenario_id,
            sigma_v: f64::NAN,
            cit: Some(cit),
            accepted: false,
            collided: false,
            source: Source::Human,
            participant_id: Some(pid.into()),
        }
    }

    /// Bank whose crossing times at σ are N(1 + 20σ, 0.3²) in every scenario.
    fn synthetic_bank(grid: &[f64], n: usize, seed: u64) -> PdfBank {
        let mut rng = crate::rng::seeded(seed);
        let entries = grid
            .iter()
            .map(|&sigma| {
                let dist = Normal::new(1.0 + 20.0 * sigma, 0.3).unwrap();
                let set = (1..=6)
                    .map(|id| {
                        let xs: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng)).collect();
                        (id, kde_pdf(&xs, None).unwrap())
                    })
                    .collect();
                (sigma, set)
            })
            .collect();
        PdfBank { entries }
    }

    fn synthetic_participant(pid: &str, sigma: f64, trials: usize, rng: &mut impl Rng) -> Vec<TrialRecord> {
        let dist = Normal::new(1.0 + 20.0 * sigma, 0.3).unwrap();
        (0..trials).map(|k| trial(1 + (k % 6) as u32, dist.sample(rng), pid)).collect()
    }

    const GRID: [f64; 5] = [0.0, 0.05, 0.1, 0.15, 0.2];

    #[test]
    fn kde_single_sample_peak() {
        let pdf = kde_pdf(&[2.0], Some(0.5)).unwrap();
        assert!((pdf.pdf(2.0) - 0.7978845608028654).abs() < 1e-12);
        assert_eq!(pdf.pdf(1e6), 0.0);
        assert_eq!(pdf.pdf(-1e6), 0.0);
        assert!((trapezoid(&pdf, -20.0, 50.0, 70_000) - 1.0).abs() < 1e-3);
    }

    #[test]
    fn bandwidth_rules() {
        assert_eq!(kde_pdf(&[3.0, 3.0, 3.0], None).unwrap().bandwidth, MIN_BANDWIDTH);
        assert!(kde_pdf(&[], None).is_err());
        assert!(kde_pdf(&[f64::NAN], None).is_err());
        assert!(kde_pdf(&[1.0], Some(0.0)).is_err());
        // sd of 0..=99 is 29.01, IQR/1.34 = 36.94
        let xs: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let expected = 0.9 * sample_sd(&xs) * 100f64.powf(-0.2);
        assert!((silverman_bandwidth(&xs) - expected).abs() < 1e-12);
    }

    #[test]
    fn loglik_examples() {
        let mut pdfs = PdfSet::new();
        pdfs.insert(1, kde_pdf(&[2.0], Some(0.5)).unwrap());
        let one = participant_loglik(&pdfs, &[trial(1, 2.0, "a")]).unwrap();
        assert!((one - (-0.22579135264472738)).abs() < 1e-12);
        let far = participant_loglik(&pdfs, &[trial(1, 100.0, "a")]).unwrap();
        assert_eq!(far, DENSITY_FLOOR.ln());
        let two = participant_loglik(&pdfs, &[trial(1, 2.0, "a"), trial(1, 2.0, "a")]).unwrap();
        assert_eq!(two, 2.0 * one);
        assert!(matches!(participant_loglik(&pdfs, &[trial(2, 2.0, "a")]), Err(Error::MissingScenario(2))));
    }

    #[test]
    fn aic_examples() {
        assert_eq!(aic(1, 0.0), 2.0);
        assert_eq!(aic(1, -55.5), 113.0);
        assert_eq!(aic(20, -8.5), 57.0);
    }

    #[test]
    fn fit_on_single_point_grid() {
        let bank = synthetic_bank(&[0.1], 50, 1);
        let f = fit_sigma(None, &[trial(1, 3.0, "a")], &bank, Variant::Lmd).unwrap();
        assert_eq!(f.best_sigma_v, 0.1);
        assert!(fit_sigma(None, &[], &PdfBank { entries: vec![] }, Variant::Lmd).is_err());
    }

    #[test]
    fn fit_ties_choose_smaller_sigma() {
        let pdf = kde_pdf(&[1.0], Some(0.5)).unwrap();
        let set: PdfSet = [(1, pdf)].into_iter().collect();
        let bank = PdfBank { entries: vec![(0.1, set.clone()), (0.2, set)] };
        assert_eq!(fit_sigma(None, &[trial(1, 1.0, "a")], &bank, Variant::Lmd).unwrap().best_sigma_v, 0.1);
    }

    #[test]
    fn duplicated_trials_keep_argmax() {
        let bank = synthetic_bank(&GRID, 200, 2);
        let mut rng = crate::rng::seeded(3);
        let ts = synthetic_participant("a", 0.1, 12, &mut rng);
        let doubled: Vec<TrialRecord> = ts.iter().chain(ts.iter()).cloned().collect();
        let a = fit_sigma(None, &ts, &bank, Variant::Lmd).unwrap();
        let b = fit_sigma(None, &doubled, &bank, Variant::Lmd).unwrap();
        assert_eq!(a.best_sigma_v, b.best_sigma_v);
        assert!((b.loglik - 2.0 * a.loglik).abs() < 1e-9);
    }

    #[test]
    fn synthetic_recovery() {
        let bank = synthetic_bank(&GRID, 500, 4);
        let mut hits = 0;
        for rep in 0..20 {
            let mut rng = crate::rng::seeded(100 + rep);
            let ts = synthetic_participant("a", 0.1, 60, &mut rng);
            let f = fit_sigma(None, &ts, &bank, Variant::Lmd).unwrap();
            if (f.best_sigma_v - 0.1).abs() <= 0.05 + 1e-12 {
                hits += 1;
            }
        }
        assert!(hits >= 18, "{hits}/20");
    }

    #[test]
    fn heterogeneous_cohort_prefers_per_participant_fits() {
        let bank = synthetic_bank(&GRID, 500, 5);
        let mut rng = crate::rng::seeded(6);
        let trials: Vec<TrialRecord> = (0..20)
            .flat_map(|p| synthetic_participant(&format!("p{p:02}"), GRID[p % 5], 6, &mut rng))
            .collect();
        let cmp = compare_variants(&trials, &bank, Some(&bank)).unwrap();
        let lmd = &cmp.variants[0];
        let lmp = &cmp.variants[1];
        assert_eq!((lmd.variant, lmd.k), (Variant::Lmd, 1));
        assert_eq!((lmp.variant, lmp.k), (Variant::Lmp, 20));
        assert!(lmp.aic < lmd.aic, "{:?}", cmp.variants);
        assert!(!lmd.preferred);
        assert_eq!(cmp.fits.len(), 41);
    }

    #[test]
    fn homogeneous_cohort_costs_only_the_penalty() {
        let bank = synthetic_bank(&GRID, 500, 7);
        let mut rng = crate::rng::seeded(8);
        let trials: Vec<TrialRecord> = (0..5)
            .flat_map(|p| synthetic_participant(&format!("p{p}"), 0.1, 12, &mut rng))
            .collect();
        let cmp = compare_variants(&trials, &bank, None).unwrap();
        let (lmd, lmp) = (&cmp.variants[0], &cmp.variants[1]);
        assert!(lmd.aic <= lmp.aic + 2.0 * (lmp.k as f64 - 1.0));
        assert!(lmd.preferred);
    }

    #[test]
    fn single_participant_variants_share_k() {
        let bank = synthetic_bank(&GRID, 200, 9);
        let mut rng = crate::rng::seeded(10);
        let trials = synthetic_participant("solo", 0.05, 6, &mut rng);
        let cmp = compare_variants(&trials, &bank, None).unwrap();
        assert_eq!(cmp.variants[0].k, 1);
        assert_eq!(cmp.variants[1].k, 1);
        assert_eq!(cmp.variants[0].loglik, cmp.variants[1].loglik);
    }

    #[test]
    fn human_csv_round_trip_and_errors() {
        let table = scenario_table();
        let g = RoadGeometry::default();
        let text = "participant_id,v0_mps,d0_m,cit_s\np1,6.94,15.90,1.2\np1,13.8905,95.42,0.0\n";
        let ts = read_human_csv(text.as_bytes(), &memory_label(), &table, &g).unwrap();
        assert_eq!(ts.len(), 2);
        assert_eq!((ts[0].scenario_id, ts[1].scenario_id), (1, 6));
        assert!(ts[1].accepted);
        let mut buf = Vec::new();
        assert_eq!(write_human_csv(&ts, &table, &mut buf).unwrap(), 0);
        let back = read_human_csv(buf.as_slice(), &memory_label(), &table, &g).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].cit, ts[0].cit);

        let missing = "participant_id,v0_mps,d0_m\np1,6.94,15.90\n";
        let err = read_human_csv(missing.as_bytes(), &memory_label(), &table, &g).unwrap_err();
        assert!(matches!(err, Error::Data { line: 1, .. }), "{err}");
        let bad = "participant_id,v0_mps,d0_m,cit_s\np1,6.94,15.90,1.2\np2,6.94,15.90,abc\n";
        let err = read_human_csv(bad.as_bytes(), &memory_label(), &table, &g).unwrap_err();
        assert!(matches!(err, Error::Data { line: 3, .. }), "{err}");
        let unknown = "participant_id,v0_mps,d0_m,cit_s\np1,7.5,15.90,1.2\n";
        let err = read_human_csv(unknown.as_bytes(), &memory_label(), &table, &g).unwrap_err();
        assert!(matches!(err, Error::Data { line: 2, .. }), "{err}");
    }

    #[test]
    fn fit_tables_have_headers() {
        let bank = synthetic_bank(&GRID, 100, 11);
        let mut rng = crate::rng::seeded(12);
        let trials = synthetic_participant("p", 0.0, 6, &mut rng);
        let cmp = compare_variants(&trials, &bank, None).unwrap();
        let mut buf = Vec::new();
        write_fits_csv(&cmp.fits, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().next().unwrap(), FIT_HEADER.join(","));
        let mut buf = Vec::new();
        write_variants_csv(&cmp.variants, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().next().unwrap(), VARIANT_HEADER.join(","));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn kde_integrates_to_one(n in 1usize..=1000, seed in any::<u64>(), spread in 0.0f64..5.0) {
            let mut rng = crate::rng::seeded(seed);
            let xs: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..15.0) * spread / 5.0).collect();
            let pdf = kde_pdf(&xs, None).unwrap();
            let integral = trapezoid(&pdf, -20.0, 50.0, 14_000);
            prop_assert!((integral - 1.0).abs() < 1e-3, "{}", integral);
            prop_assert!(pdf.pdf(rng.random_range(-30.0..60.0)) >= 0.0);
        }

        #[test]
        fn loglik_ignores_order(cits in proptest::collection::vec(0.0f64..10.0, 1..30), seed in any::<u64>()) {
            let mut pdfs = PdfSet::new();
            pdfs.insert(1, kde_pdf(&[1.0, 2.0, 4.5], None).unwrap());
            let ts: Vec<TrialRecord> = cits.iter().map(|&c| trial(1, c, "a")).collect();
            let mut shuffled = ts.clone();
            use rand::seq::SliceRandom;
            shuffled.shuffle(&mut crate::rng::seeded(seed));
            let a = participant_loglik(&pdfs, &ts).unwrap();
            let b = participant_loglik(&pdfs, &shuffled).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
        }

        #[test]
        fn aic_is_linear(k in 0usize..1000, ll in -1e4f64..1e4, dk in 0usize..50, dl in -100.0f64..100.0) {
            prop_assert!((aic(k + dk, ll) - aic(k, ll) - 2.0 * dk as f64).abs() < 1e-9);
            prop_assert!((aic(k, ll + dl) - aic(k, ll) + 2.0 * dl).abs() < 1e-9);
        }
    }
}

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use pedcross::eval::{
    cit_cdfs, gap_acceptance_rate, write_acceptance_csv, write_cdf_csv, write_dispersion_csv, write_trials_csv,
    Evaluator, PlotData, PLOT_SCHEMA_VERSION,
};
use pedcross::fitting::{
    compare_variants, load_human_csv, synthesize, write_fits_csv, write_human_csv, write_variants_csv, PolicyBank,
    SynthParticipant, Variant,
};
use pedcross::model::{Model, ModelKind};
use pedcross::rng::derive_seed;
use pedcross::trainer::{train_grid, train_with_progress, write_log_csv, SigmaGrid, TrainMode, TrainOutcome};
use serde::Serialize;
use serde_json::json;

use crate::config::{parse_sigma_list, RunConfig};
use crate::manifest::Manifest;
use crate::{Common, ModeArg, VariantArg};

pub const SUMMARY_HEADER: [&str; 7] = ["model", "mode", "sigma_v", "episodes", "learn_steps", "converged", "seed"];
pub const TRUTH_HEADER: [&str; 2] = ["participant_id", "sigma_v"];

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) if p.extension().is_some_and(|e| e == "json") => Manifest::read(p)?.config,
        other => RunConfig::load(other.as_deref())?,
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_file<F>(dir: &Path, name: &str, outputs: &mut Vec<String>, write: F) -> Result<()>
where
    F: FnOnce(BufWriter<File>) -> pedcross::Result<()>,
{
    let path = dir.join(name);
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    write(BufWriter::new(file)).with_context(|| format!("writing {}", path.display()))?;
    outputs.push(name.to_string());
    Ok(())
}

/// Sizes the global rayon pool used by rollouts. Only the first call in a
/// process takes effect.
fn pool(workers: usize) -> Result<()> {
    let _ = rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build_global();
    Ok(())
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    model: &'a str,
    mode: &'a str,
    sigma_v: Option<f64>,
    episodes: usize,
    learn_steps: u64,
    converged: bool,
    seed: u64,
}

pub fn train(common: &Common, mode: Option<ModeArg>, grid: Option<&str>, max_episodes: Option<usize>) -> Result<()> {
    let mut cfg = resolve(common)?;
    if let Some(m) = mode {
        cfg.train.mode = match m {
            ModeArg::Ideal => TrainMode::Ideal,
            ModeArg::PerSigma => TrainMode::PerSigma,
            ModeArg::Conditioned => TrainMode::Conditioned,
        };
    }
    if let Some(g) = grid {
        cfg.train.sigma_grid = SigmaGrid::parse(g)?;
    }
    if let Some(n) = max_episodes {
        cfg.train.max_episodes = n;
    }
    cfg.validate()?;
    pool(cfg.workers)?;
    let out = &common.out;
    create_dir(out)?;

    let geometry = cfg.geometry();
    let scenarios = cfg.world.scenarios.clone();
    let report = |o: &TrainOutcome| {
        eprintln!(
            "{}: {} episodes, {} learning steps, converged = {}",
            o.model.kind().label(),
            o.log.len(),
            o.learn_steps,
            o.converged
        );
    };
    let outcomes: Vec<TrainOutcome> = match cfg.train.mode {
        TrainMode::PerSigma => {
            let sigmas = cfg.train.sigma_grid.values();
            let runs = train_grid(&cfg.train, &geometry, &scenarios, &sigmas, cfg.seed, cfg.workers)?;
            runs.iter().for_each(report);
            runs
        }
        _ => {
            let label = cfg.train.model_kind().label();
            let every = (cfg.train.max_episodes / 20).max(1);
            let run = train_with_progress(&cfg.train, &geometry, &scenarios, cfg.seed, |e| {
                if (e.episode + 1) % every == 0 {
                    eprintln!("{label}: episode {} reward {:.1} epsilon {:.3}", e.episode + 1, e.reward, e.epsilon);
                }
            })?;
            report(&run);
            vec![run]
        }
    };

    let mut outputs = Vec::new();
    for o in &outcomes {
        let label = o.model.kind().label();
        write_file(out, &format!("models/{}", o.model.file_name()), &mut outputs, |w| o.model.write_to(w))?;
        write_file(out, &format!("logs/{label}.csv"), &mut outputs, |w| write_log_csv(&o.log, w))?;
    }
    write_file(out, "summary.csv", &mut outputs, |w| {
        let mut w = csv::Writer::from_writer(w);
        for o in &outcomes {
            let kind = o.model.kind();
            let (mode, sigma_v) = match kind {
                ModelKind::Ideal => ("ideal", None),
                ModelKind::PerSigma { sigma_v } => ("per-sigma", Some(sigma_v)),
                ModelKind::Conditioned => ("conditioned", None),
            };
            w.serialize(SummaryRow {
                model: &kind.label(),
                mode,
                sigma_v,
                episodes: o.log.len(),
                learn_steps: o.learn_steps,
                converged: o.converged,
                seed: o.seed,
            })?;
        }
        w.flush()?;
        Ok(())
    })?;
    Manifest::new("train", &cfg, json!({}), outputs).write(out)?;
    Ok(())
}

/// Checkpoints named directly or found (non-recursively) in directories,
/// sorted by path.
fn collect_models(paths: &[PathBuf]) -> Result<Vec<(PathBuf, Model)>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            for entry in std::fs::read_dir(p).with_context(|| format!("listing {}", p.display()))? {
                let path = entry?.path();
                if path.extension().is_some_and(|e| e == "pxqn") {
                    files.push(path);
                }
            }
        } else {
            files.push(p.clone());
        }
    }
    files.sort();
    files
        .into_iter()
        .map(|f| {
            let m = Model::load(&f).with_context(|| format!("loading {}", f.display()))?;
            Ok((f, m))
        })
        .collect()
}

pub fn eval(
    common: &Common,
    models: &[PathBuf],
    sigmas: Option<&str>,
    scenarios: Option<Vec<u32>>,
    rollouts: Option<usize>,
    dispersion_samples: Option<usize>,
) -> Result<()> {
    let mut cfg = resolve(common)?;
    if let Some(s) = scenarios {
        cfg.eval.scenarios = s;
    }
    if let Some(n) = rollouts {
        cfg.eval.rollouts = n;
    }
    if let Some(n) = dispersion_samples {
        cfg.eval.dispersion_samples = n;
    }
    let requested = sigmas.map(parse_sigma_list).transpose()?;
    if let Some(r) = &requested {
        cfg.eval.sigmas = r.clone();
    }
    cfg.validate()?;
    pool(cfg.workers)?;
    let scenario_list = cfg.eval_scenarios()?;
    let loaded = collect_models(models)?;
    if loaded.is_empty() {
        return Err(pedcross::Error::Config("no checkpoints found".into()).into());
    }
    let ev = Evaluator::new(cfg.geometry(), cfg.env())?;
    let out = &common.out;
    create_dir(out)?;
    let mut outputs = Vec::new();
    let mut all_sigmas: Vec<f64> = Vec::new();

    for (i, (path, model)) in loaded.iter().enumerate() {
        let kind = model.kind();
        let sigma_list = match (&requested, kind) {
            (Some(r), _) => r.clone(),
            (None, ModelKind::Ideal) => vec![0.0],
            (None, ModelKind::PerSigma { sigma_v }) => vec![sigma_v],
            (None, ModelKind::Conditioned) => cfg.eval.sigmas.clone(),
        };
        let mut records = Vec::new();
        for (j, &sigma) in sigma_list.iter().enumerate() {
            for sc in &scenario_list {
                let seed = derive_seed(derive_seed(derive_seed(cfg.seed, i as u64), j as u64), sc.id as u64);
                let recs = ev
                    .rollout(model, sc, sigma, cfg.eval.rollouts, seed)
                    .with_context(|| format!("evaluating {}", path.display()))?;
                records.extend(recs);
            }
            if !all_sigmas.iter().any(|s| *s == sigma) {
                all_sigmas.push(sigma);
            }
        }
        let label = kind.label();
        let cells = gap_acceptance_rate(&records)?;
        let cdfs = cit_cdfs(&records)?;
        for c in &cells {
            eprintln!(
                "{label} sigma {} scenario {}: acceptance {:.3} [{:.3}, {:.3}]",
                c.sigma_v, c.scenario_id, c.interval.rate, c.interval.lo, c.interval.hi
            );
        }
        write_file(out, &format!("{label}/trials.csv"), &mut outputs, |w| write_trials_csv(&records, w))?;
        write_file(out, &format!("{label}/acceptance.csv"), &mut outputs, |w| write_acceptance_csv(&cells, w))?;
        write_file(out, &format!("{label}/cit_cdf.csv"), &mut outputs, |w| write_cdf_csv(&cdfs, w))?;
        let plot = PlotData { schema_version: PLOT_SCHEMA_VERSION, acceptance: cells, cit_cdf: cdfs, tta_dispersion: Vec::new() };
        write_file(out, &format!("{label}/plot_data.json"), &mut outputs, |w| Ok(serde_json::to_writer_pretty(w, &plot)?))?;
    }

    if cfg.eval.dispersion_samples > 0 {
        all_sigmas.sort_by(f64::total_cmp);
        let mut rows = Vec::new();
        for (j, &sigma) in all_sigmas.iter().enumerate() {
            for sc in &scenario_list {
                let seed = derive_seed(derive_seed(cfg.seed ^ 0xD15B, j as u64), sc.id as u64);
                rows.push(ev.tta_dispersion(sc, sigma, cfg.eval.dispersion_samples, seed)?);
            }
        }
        write_file(out, "tta_dispersion.csv", &mut outputs, |w| write_dispersion_csv(&rows, w))?;
    }
    let inputs = json!({ "models": loaded.iter().map(|(p, _)| p.display().to_string()).collect::<Vec<_>>() });
    Manifest::new("eval", &cfg, inputs, outputs).write(out)?;
    Ok(())
}

fn per_sigma_bank(dir: &Path) -> Result<(PolicyBank, Vec<f64>)> {
    let models: Vec<Model> = collect_models(&[dir.to_path_buf()])?
        .into_iter()
        .map(|(_, m)| m)
        .filter(|m| matches!(m.kind(), ModelKind::PerSigma { .. }))
        .collect();
    if models.is_empty() {
        return Err(pedcross::Error::Config(format!("no per-sigma checkpoints in {}", dir.display())).into());
    }
    let bank = PolicyBank::PerSigma(models);
    let grid = bank.grid().expect("per-sigma bank has a grid");
    Ok((bank, grid))
}

fn conditioned_bank(path: &Path) -> Result<PolicyBank> {
    let m = Model::load(path).with_context(|| format!("loading {}", path.display()))?;
    if m.kind() != ModelKind::Conditioned {
        return Err(pedcross::Error::Config(format!("{} is not a conditioned model", path.display())).into());
    }
    Ok(PolicyBank::Conditioned(m))
}

pub fn fit(
    common: &Common,
    data: &Path,
    bank_dir: &Path,
    conditioned: Option<&Path>,
    grid: Option<&str>,
    variant: VariantArg,
    rollouts: Option<usize>,
) -> Result<()> {
    let mut cfg = resolve(common)?;
    if let Some(n) = rollouts {
        cfg.fit.rollouts = n;
    }
    cfg.validate()?;
    if variant == VariantArg::Lsp && conditioned.is_none() {
        return Err(pedcross::Error::Config("the LSP variant needs --conditioned".into()).into());
    }
    pool(cfg.workers)?;
    let scenarios: Vec<_> = cfg.world.scenarios.iter().filter(|s| !s.training_only).copied().collect();
    let trials = load_human_csv(data, &cfg.world.scenarios, &cfg.geometry())?;
    if trials.is_empty() {
        return Err(pedcross::Error::Data { path: data.to_path_buf(), line: 1, message: "no data rows".into() }.into());
    }
    let ev = Evaluator::new(cfg.geometry(), cfg.env())?;
    let (bank, bank_grid) = per_sigma_bank(bank_dir)?;
    let used: Vec<_> = {
        let mut ids: Vec<u32> = trials.iter().map(|t| t.scenario_id).collect();
        ids.sort_unstable();
        ids.dedup();
        scenarios.iter().filter(|s| ids.contains(&s.id)).copied().collect()
    };
    let used = if used.is_empty() { scenarios } else { used };
    let pdfs = bank.pdf_bank(&ev, &bank_grid, &used, cfg.fit.rollouts, cfg.seed)?;
    let cond_pdfs = match conditioned {
        Some(p) => {
            let grid = match grid {
                Some(g) => parse_sigma_list(g)?,
                None => bank_grid.clone(),
            };
            Some(conditioned_bank(p)?.pdf_bank(&ev, &grid, &used, cfg.fit.rollouts, derive_seed(cfg.seed, 1))?)
        }
        None => None,
    };
    let cmp = compare_variants(&trials, &pdfs, cond_pdfs.as_ref())?;
    let keep = |v: Variant| match variant {
        VariantArg::All => true,
        VariantArg::Lmd => v == Variant::Lmd,
        VariantArg::Lmp => v == Variant::Lmp,
        VariantArg::Lsp => v == Variant::Lsp,
    };
    let fits: Vec<_> = cmp.fits.iter().filter(|f| keep(f.variant)).cloned().collect();
    let rows: Vec<_> = cmp.variants.iter().filter(|r| keep(r.variant)).cloned().collect();
    for r in &rows {
        eprintln!(
            "{}: k = {}, log-likelihood {:.2}, AIC {:.2}{}",
            r.variant.as_str(),
            r.k,
            r.loglik,
            r.aic,
            if r.preferred { " (preferred)" } else { "" }
        );
    }
    let out = &common.out;
    create_dir(out)?;
    let mut outputs = Vec::new();
    write_file(out, "fits.csv", &mut outputs, |w| write_fits_csv(&fits, w))?;
    write_file(out, "variants.csv", &mut outputs, |w| write_variants_csv(&rows, w))?;
    write_file(out, "variants.json", &mut outputs, |w| Ok(serde_json::to_writer_pretty(w, &rows)?))?;
    let inputs = json!({
        "data": data.display().to_string(),
        "bank": bank_dir.display().to_string(),
        "conditioned": conditioned.map(|p| p.display().to_string()),
        "bank_grid": bank_grid,
    });
    Manifest::new("fit", &cfg, inputs, outputs).write(out)?;
    Ok(())
}

#[derive(Serialize)]
struct TruthRow<'a> {
    participant_id: &'a str,
    sigma_v: f64,
}

pub fn synth(
    common: &Common,
    bank_dir: Option<&Path>,
    conditioned: Option<&Path>,
    sigmas: &str,
    participants: Option<usize>,
    repeats: usize,
) -> Result<()> {
    let cfg = resolve(common)?;
    cfg.validate()?;
    pool(cfg.workers)?;
    let sigma_list = parse_sigma_list(sigmas)?;
    if sigma_list.is_empty() {
        return Err(pedcross::Error::EmptyGrid.into());
    }
    if repeats == 0 {
        return Err(pedcross::Error::Config("repeats must be at least 1".into()).into());
    }
    let bank = match (bank_dir, conditioned) {
        (Some(dir), _) => per_sigma_bank(dir)?.0,
        (None, Some(p)) => conditioned_bank(p)?,
        (None, None) => return Err(pedcross::Error::Config("need --bank or --conditioned".into()).into()),
    };
    let count = participants.unwrap_or(sigma_list.len());
    let width = count.to_string().len().max(2);
    let people: Vec<SynthParticipant> = (0..count)
        .map(|p| SynthParticipant { participant_id: format!("s{p:0width$}"), sigma_v: sigma_list[p % sigma_list.len()] })
        .collect();
    let scenarios: Vec<_> = cfg.world.scenarios.iter().filter(|s| !s.training_only).copied().collect();
    let ev = Evaluator::new(cfg.geometry(), cfg.env())?;
    let trials = synthesize(&ev, &bank, &people, &scenarios, repeats, cfg.seed)?;
    let out = &common.out;
    create_dir(out)?;
    let mut outputs = Vec::new();
    let mut skipped = 0;
    write_file(out, "dataset.csv", &mut outputs, |w| {
        skipped = write_human_csv(&trials, &scenarios, w)?;
        Ok(())
    })?;
    if skipped > 0 {
        eprintln!("warning: {skipped} trials never crossed and were left out");
    }
    write_file(out, "truth.csv", &mut outputs, |w| {
        let mut w = csv::Writer::from_writer(w);
        for p in &people {
            w.serialize(TruthRow { participant_id: &p.participant_id, sigma_v: p.sigma_v })?;
        }
        w.flush()?;
        Ok(())
    })?;
    eprintln!("{} participants, {} rows", people.len(), trials.len() - skipped);
    let inputs = json!({
        "bank": bank_dir.map(|p| p.display().to_string()),
        "conditioned": conditioned.map(|p| p.display().to_string()),
        "sigmas": sigma_list,
        "participants": count,
        "repeats": repeats,
    });
    Manifest::new("synth", &cfg, inputs, outputs).write(out)?;
    Ok(())
}

//! One function per subcommand. Each returns a short human summary; files
//! are the real output.

use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use serde::Serialize;
use trajforge_core::io::{load_constraints, load_dataset, save_constraints, save_dataset, ConstraintRecord};
use trajforge_core::metrics::{evaluate, MetricsReport};
use trajforge_core::{ingest, rng, TrajectoryDataset, Vocabulary};
use trajforge_generate::{
    forcible_insert, generate_many, generated_id, make_constraints, summarize, CachedModel, ConstraintParams,
    DurationDistribution, GenContext, GenError, GenMode, GenerationOutcome, RunSummary,
};
use trajforge_lm::{train_with, Checkpoint, LoraAdapter, ModelParams, PermuteMode, TrainMode};

use crate::config::RunConfig;

/// Generation finished but some requests failed.
#[derive(Debug)]
pub struct PartialFailure {
    pub failed: usize,
    pub requested: usize,
}

impl std::fmt::Display for PartialFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} of {} generations failed", self.failed, self.requested)
    }
}

impl std::error::Error for PartialFailure {}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load(path: &Path) -> anyhow::Result<TrajectoryDataset> {
    load_dataset(path).with_context(|| format!("loading trajectories {}", path.display()))
}

/// `<dir>/<stem>.<suffix>` next to `path`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

#[derive(Serialize)]
struct IngestReport<'a> {
    input: String,
    stats: &'a ingest::IngestStats,
    config: &'a RunConfig,
}

pub fn ingest(csv: &Path, out_dir: &Path, cfg: &RunConfig, verbose: bool) -> anyhow::Result<String> {
    let grid = cfg.grid.ok_or_else(|| anyhow!("ingest needs a [grid] section in the config"))?;
    let file = File::open(csv).with_context(|| format!("opening {}", csv.display()))?;
    let (ds, stats, errors) = ingest::build_dataset(BufReader::new(file), &grid, &cfg.time, &cfg.ingest)
        .with_context(|| format!("reading {}", csv.display()))?;
    if verbose {
        for e in &errors {
            eprintln!("skipped: {e}");
        }
    }
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    save_dataset(&out_dir.join("trajectories.jsonl"), &ds)?;
    write_json(&out_dir.join("stats.json"), &IngestReport { input: csv.display().to_string(), stats: &stats, config: cfg })?;
    Ok(format!(
        "{} trajectories from {} users ({} records, {} malformed)",
        stats.trajectories, stats.users, stats.records_read, stats.malformed_rows
    ))
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub mode: Option<TrainMode>,
    pub permute: Option<PermuteMode>,
    pub epochs: Option<usize>,
    /// Start from this checkpoint instead of a fresh model.
    pub init: Option<PathBuf>,
    pub loss_csv: Option<PathBuf>,
}

pub fn train(
    trajectories: &Path,
    out: &Path,
    cfg: &RunConfig,
    opts: &TrainOptions,
    verbose: bool,
) -> anyhow::Result<String> {
    let ds = load(trajectories)?;
    let vocab = Vocabulary::build(&ds.grid, &ds.timespec);
    let mut tc = cfg.train.clone();
    tc.mode = opts.mode.unwrap_or(tc.mode);
    tc.permute = opts.permute.unwrap_or(tc.permute);
    tc.epochs = opts.epochs.unwrap_or(tc.epochs);

    let (mut model, mut adapter) = match &opts.init {
        Some(p) => {
            let ck = Checkpoint::load(p).with_context(|| format!("loading checkpoint {}", p.display()))?;
            if ck.grid != ds.grid || ck.timespec != ds.timespec {
                bail!("checkpoint {} was trained on a different grid or time spec", p.display());
            }
            (ck.model, ck.adapter)
        }
        None => {
            let mc = trajforge_lm::ModelConfig { vocab_size: vocab.len(), ..cfg.model.clone() };
            (ModelParams::init(&mc, cfg.seed)?, None)
        }
    };
    if adapter.is_none() && (tc.mode == TrainMode::LoraOnly || cfg.lora.is_some()) {
        let lc = cfg.lora.clone().unwrap_or_default();
        adapter = Some(LoraAdapter::init(&model.config, lc, &mut rng::stream(cfg.seed, "lora", 0))?);
    }
    let history = train_with(&mut model, adapter.as_mut(), &ds, &vocab, &tc, |e, l| {
        if verbose {
            eprintln!("epoch {:>4}  loss {l:.6}", e + 1);
        }
    })?;
    let ck = Checkpoint {
        model,
        adapter,
        train: Some(tc),
        grid: ds.grid,
        timespec: ds.timespec,
        duration_counts: DurationDistribution::from_dataset(&ds).counts().to_vec(),
    };
    ck.save(out).with_context(|| format!("writing {}", out.display()))?;
    let csv_path = opts.loss_csv.clone().unwrap_or_else(|| sibling(out, "loss.csv"));
    let mut csv = String::from("epoch,loss\n");
    for (i, l) in history.epoch_loss.iter().enumerate() {
        csv.push_str(&format!("{},{l:.6}\n", i + 1));
    }
    fs::write(&csv_path, csv).with_context(|| format!("writing {}", csv_path.display()))?;
    Ok(match history.final_loss() {
        Some(l) => format!("{} epochs, final loss {l:.4} nats/token", history.epoch_loss.len()),
        None => "no epochs run".into(),
    })
}

#[derive(Debug, Clone, Default)]
pub struct GenerateOptions {
    pub n: Option<usize>,
    pub constraints: Option<PathBuf>,
    /// Forcibly insert constraints into these trajectories instead of sampling.
    pub fi_baseline: Option<PathBuf>,
    pub temperature: Option<f64>,
    pub max_retries: Option<usize>,
    pub manifest: Option<PathBuf>,
}

#[derive(Serialize)]
struct FailedRequest {
    index: usize,
    target: Option<String>,
    error: String,
}

#[derive(Serialize)]
struct GenerateManifest<'a> {
    checkpoint: String,
    mode: &'static str,
    seed: u64,
    temperature: f64,
    max_retries: usize,
    max_new_tokens: usize,
    summary: RunSummary,
    satisfaction_rate: Option<f64>,
    failures: Vec<FailedRequest>,
    config: &'a RunConfig,
}

pub fn generate(checkpoint: &Path, out: &Path, cfg: &RunConfig, opts: &GenerateOptions) -> anyhow::Result<String> {
    let ck = Checkpoint::load(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let vocab = ck.vocabulary();
    let durations = DurationDistribution::from_counts(ck.duration_counts.clone());
    let ctx = GenContext { vocab: &vocab, grid: &ck.grid, timespec: &ck.timespec, durations: &durations };
    let mut gc = cfg.generate.clone();
    gc.temperature = opts.temperature.unwrap_or(gc.temperature);
    gc.max_retries = opts.max_retries.unwrap_or(gc.max_retries);
    gc.validate()?;

    let records: Vec<ConstraintRecord> = match &opts.constraints {
        Some(p) => load_constraints(p).with_context(|| format!("loading constraints {}", p.display()))?,
        None => Vec::new(),
    };
    let (mode, outcomes): (&str, Vec<trajforge_generate::Result<GenerationOutcome>>) =
        match (&opts.fi_baseline, opts.n, &opts.constraints) {
            (Some(base), _, Some(_)) => {
                let baseline = load(base)?;
                if baseline.is_empty() {
                    bail!("baseline {} has no trajectories", base.display());
                }
                let outs = records
                    .iter()
                    .enumerate()
                    .map(|(i, rec)| {
                        let src = &baseline.trajectories[i % baseline.len()];
                        let mut r = rng::stream(gc.seed, "fi", i as u64);
                        forcible_insert(src, &rec.constraints, &vocab, &durations, &mut r).map(|mut t| {
                            t.id = generated_id(i);
                            GenerationOutcome {
                                constraint_report: Some(t.satisfies_all(&rec.constraints)),
                                trajectory: t,
                                attempts: 1,
                                failures: Default::default(),
                            }
                        })
                    })
                    .collect();
                ("forcible-insert", outs)
            }
            (Some(_), _, None) => bail!("--fi needs --constraints"),
            (None, Some(_), Some(_)) => bail!("give either -n or --constraints, not both"),
            (None, Some(n), None) => {
                let mut model = CachedModel::new(&ck.model, ck.adapter.as_ref())?;
                ("uncontrolled", generate_many(&mut model, &vec![GenMode::Uncontrolled; n], &gc, &ctx))
            }
            (None, None, Some(_)) => {
                let modes: Vec<GenMode> = records.iter().map(|r| GenMode::Controlled(&r.constraints)).collect();
                let mut model = CachedModel::new(&ck.model, ck.adapter.as_ref())?;
                ("controlled", generate_many(&mut model, &modes, &gc, &ctx))
            }
            (None, None, None) => bail!("give -n N or --constraints FILE"),
        };

    let summary = summarize(&outcomes);
    let failures: Vec<FailedRequest> = outcomes
        .iter()
        .enumerate()
        .filter_map(|(i, o)| {
            o.as_ref().err().map(|e: &GenError| FailedRequest {
                index: i,
                target: records.get(i).and_then(|r| r.target.clone()),
                error: e.to_string(),
            })
        })
        .collect();
    let trajectories = outcomes.into_iter().filter_map(Result::ok).map(|o| o.trajectory).collect();
    save_dataset(out, &TrajectoryDataset::new(ck.grid, ck.timespec, trajectories))?;
    let manifest = GenerateManifest {
        checkpoint: checkpoint.display().to_string(),
        mode,
        seed: gc.seed,
        temperature: gc.temperature,
        max_retries: gc.max_retries,
        max_new_tokens: gc.max_new_tokens,
        satisfaction_rate: summary.satisfaction_rate,
        summary: summary.clone(),
        failures,
        config: cfg,
    };
    write_json(&opts.manifest.clone().unwrap_or_else(|| sibling(out, "manifest.json")), &manifest)?;
    let failed = summary.requested - summary.succeeded;
    if failed > 0 {
        return Err(PartialFailure { failed, requested: summary.requested }.into());
    }
    Ok(format!("{} trajectories ({mode})", summary.succeeded))
}

pub fn evaluate_cmd(
    real: &Path,
    generated: &Path,
    out: &Path,
    constraints: Option<&Path>,
    csv: Option<&Path>,
    cfg: &RunConfig,
) -> anyhow::Result<MetricsReport> {
    let (r, g) = (load(real)?, load(generated)?);
    let locations: Option<BTreeSet<u32>> = match constraints {
        Some(p) => Some(
            load_constraints(p)
                .with_context(|| format!("loading constraints {}", p.display()))?
                .iter()
                .flat_map(|rec| rec.constraints.constraints.iter().map(|c| c.location))
                .collect(),
        ),
        None => None,
    };
    let mut report = evaluate(&r, &g, locations.as_ref(), &cfg.metrics)
        .with_context(|| format!("comparing {} with {}", real.display(), generated.display()))?;
    report.meta.seed = Some(cfg.seed);
    write_json(out, &report)?;
    if let Some(csv) = csv {
        let fresh = fs::metadata(csv).map(|m| m.len() == 0).unwrap_or(true);
        let mut f = OpenOptions::new().create(true).append(true).open(csv).with_context(|| format!("opening {}", csv.display()))?;
        if fresh {
            writeln!(f, "{}", MetricsReport::CSV_HEADER)?;
        }
        writeln!(f, "{}", report.csv_row())?;
    }
    Ok(report)
}

pub fn make_constraints_cmd(
    trajectories: &Path,
    out: &Path,
    params: &ConstraintParams,
    verify: bool,
    cfg: &RunConfig,
) -> anyhow::Result<String> {
    let ds = load(trajectories)?;
    if ds.is_empty() {
        bail!("{} has no trajectories", trajectories.display());
    }
    let records = make_constraints(&ds, &mut rng::stream(cfg.seed, "constraints", 0), params)?;
    if verify {
        for rec in &records {
            let src = ds.trajectories.iter().find(|t| Some(&t.id) == rec.target.as_ref());
            if !src.is_some_and(|t| t.satisfies_all(&rec.constraints).all()) {
                bail!("constraint set for {:?} is not satisfied by its source", rec.target);
            }
        }
    }
    save_constraints(out, &records)?;
    let n: usize = records.iter().map(|r| r.constraints.len()).sum();
    Ok(format!("{} constraint sets, {n} constraints", records.len()))
}

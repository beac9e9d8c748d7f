//! Experiment orchestration: the train -> capture -> attack -> evaluate
//! pipeline, repetition handling, aggregation, report files, and the CLI.
//!
//! A run directory contains `run_config.json` (resolved config echo),
//! `metrics.csv` and `model_log.csv` (one row per repetition and timestamp),
//! `observations/` archives, `attacks/` result bundles, `grids/` PNGs,
//! `run_meta.json`, and `summary.json`. The summary is a pure function of the
//! CSV files and metadata, so `report` regenerates it bit-identically.

use crate::attacks::{run_attack, AttackConfig, RecoveryResult};
use crate::config::{ExperimentConfig, RepeatMode};
use crate::datasets::{Dataset, ImageBatch};
use crate::defenses::{apply_model_defense, build_defense};
use crate::error::{Error, Result};
use crate::fedsim::{run_training, Observation, TrainingOutput};
use crate::io::{emit_grid, load_observation_dir, save_attack_bundle, save_observation};
use crate::metrics::{
    psnr_for_output, rci, score_aligned, MetricReport, Perceptual, RandomConvPerceptual,
    RecoveryCurve, DEFAULT_PERCEPTUAL_SEED,
};
use crate::models::Model;
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

pub const METRICS_CSV_HEADER: &str =
    "run_id,t,attack,defense,mse,psnr_db,ssim,perceptual_proxy,rci_partial,wall_s,peak_mem_bytes";
pub const MODEL_LOG_CSV_HEADER: &str = "run_id,t,train_loss,heldout_accuracy";
/// Environment variable overriding the output root for `run`.
pub const OUTPUT_ROOT_ENV: &str = "GRADLEAK_OUTPUT_ROOT";

fn splitmix(seed: u64) -> u64 {
    let mut z = seed.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Deterministic attack seed for (base seed, repetition, timestamp).
pub fn attack_seed(base_seed: u64, rep: usize, t: u64) -> u64 {
    splitmix(base_seed ^ ((rep as u64) << 40) ^ t.wrapping_mul(0x2545f4914f6cdd1d))
}

#[derive(Debug, Clone)]
pub struct MetricRow {
    pub run_id: String,
    pub t: u64,
    pub attack: String,
    pub defense: String,
    pub mse: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub perceptual_proxy: f64,
    pub rci_partial: Option<f64>,
    pub wall_s: f64,
    pub peak_mem_bytes: Option<u64>,
}

impl MetricRow {
    fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.run_id,
            self.t,
            self.attack,
            self.defense,
            self.mse,
            self.psnr_db,
            self.ssim,
            self.perceptual_proxy,
            self.rci_partial.map(|v| v.to_string()).unwrap_or_default(),
            self.wall_s,
            self.peak_mem_bytes
                .map(|v| v.to_string())
                .unwrap_or_default(),
        )
    }

    fn from_csv(line: &str) -> Result<Self> {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 11 {
            return Err(Error::Format(format!(
                "metrics.csv row has {} columns, expected 11",
                parts.len()
            )));
        }
        let parse_f = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| Error::Format(format!("bad float `{s}`: {e}")))
        };
        Ok(Self {
            run_id: parts[0].to_string(),
            t: parts[1]
                .parse()
                .map_err(|e| Error::Format(format!("bad t `{}`: {e}", parts[1])))?,
            attack: parts[2].to_string(),
            defense: parts[3].to_string(),
            mse: parse_f(parts[4])?,
            psnr_db: parse_f(parts[5])?,
            ssim: parse_f(parts[6])?,
            perceptual_proxy: parse_f(parts[7])?,
            rci_partial: if parts[8].is_empty() {
                None
            } else {
                Some(parse_f(parts[8])?)
            },
            wall_s: parse_f(parts[9])?,
            peak_mem_bytes: if parts[10].is_empty() {
                None
            } else {
                Some(
                    parts[10]
                        .parse()
                        .map_err(|e| Error::Format(format!("bad bytes `{}`: {e}", parts[10])))?,
                )
            },
        })
    }

    fn rep(&self) -> Result<usize> {
        self.run_id
            .rsplit("-rep")
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("run_id `{}` has no -rep suffix", self.run_id)))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunMeta {
    name: String,
    attack: String,
    defense: String,
    repetitions_configured: usize,
    failed_repetitions: Vec<usize>,
    /// Wall-time and memory columns are environment-dependent and excluded
    /// from reproducibility comparisons.
    masked_columns: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepSummary {
    pub rep: usize,
    pub rci_perceptual: Option<f64>,
    pub final_accuracy: Option<f64>,
    pub mean_mse: f64,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
    pub mean_perceptual: f64,
    pub total_attack_wall_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurvePoint {
    pub t: u64,
    pub mse: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub perceptual: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateSummary {
    pub curve: Vec<CurvePoint>,
    pub rci_perceptual: Option<f64>,
    pub final_accuracy: Option<f64>,
    pub mean_mse: f64,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
    pub mean_perceptual: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub attack: String,
    pub defense: String,
    /// The perceptual column is a fixed random-feature proxy, not a
    /// pretrained perceptual network; compare only within this tool.
    pub perceptual_metric: String,
    pub repetitions_configured: usize,
    pub repetitions_succeeded: usize,
    pub failed_repetitions: Vec<usize>,
    pub per_repetition: Vec<RepSummary>,
    pub aggregate: AggregateSummary,
}

pub struct RunReport {
    pub summary: Summary,
    pub rows: Vec<MetricRow>,
    pub out_dir: PathBuf,
}

struct ScoredObservation {
    rep: usize,
    t: u64,
    result: RecoveryResult,
    report: MetricReport,
    truth: ImageBatch,
}

struct RepRun {
    rep: usize,
    training: TrainingOutput,
    truths: Vec<ImageBatch>,
}

/// Execute the full pipeline for a validated configuration.
pub fn execute(config: &ExperimentConfig, out_dir: &Path) -> Result<RunReport> {
    config.validate()?;
    let dataset = config.dataset.load()?;
    let attack_base = config.attack.build()?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(
        out_dir.join("run_config.json"),
        serde_json::to_string_pretty(config)?,
    )?;

    let trainings = match config.repeat_mode {
        RepeatMode::Full => config.repetitions,
        RepeatMode::AttackSeeds => 1,
    };
    let mut rep_runs: Vec<RepRun> = Vec::new();
    let mut failed: Vec<(usize, String)> = Vec::new();
    for tr in 0..trainings {
        match train_one_rep(config, &dataset, tr, out_dir) {
            Ok(run) => rep_runs.push(run),
            Err(e) => failed.push((tr, e.to_string())),
        }
    }
    if rep_runs.is_empty() {
        return Err(Error::Structure(format!(
            "every repetition failed: {}",
            failed
                .iter()
                .map(|(r, e)| format!("rep {r}: {e}"))
                .collect::<Vec<_>>()
                .join(" | ")
        )));
    }

    // Expand to per-repetition attack jobs (repeat over attack seeds when the
    // training trajectory is shared).
    struct Job {
        rep: usize,
        train_idx: usize,
        obs_idx: usize,
    }
    let mut jobs = Vec::new();
    for rep in 0..config.repetitions {
        let train_idx = match config.repeat_mode {
            RepeatMode::Full => {
                if !rep_runs.iter().any(|r| r.rep == rep) {
                    continue; // training failed; recorded above
                }
                rep_runs.iter().position(|r| r.rep == rep).unwrap()
            }
            RepeatMode::AttackSeeds => 0,
        };
        for obs_idx in 0..rep_runs[train_idx].training.observations.len() {
            jobs.push(Job {
                rep,
                train_idx,
                obs_idx,
            });
        }
    }

    let perceptual = RandomConvPerceptual::new(config.dataset.image_tuple().0, DEFAULT_PERCEPTUAL_SEED);
    let workers = config
        .workers
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
        .max(1)
        .min(jobs.len().max(1));
    let results: Vec<Option<std::result::Result<ScoredObservation, (usize, String)>>> = {
        let slots: Mutex<Vec<Option<std::result::Result<ScoredObservation, (usize, String)>>>> =
            Mutex::new((0..jobs.len()).map(|_| None).collect());
        let next = AtomicUsize::new(0);
        let jobs = &jobs;
        let rep_runs = &rep_runs;
        let perceptual = &perceptual;
        let attack_base = &attack_base;
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= jobs.len() {
                        break;
                    }
                    let job = &jobs[i];
                    let out = run_one_job(
                        config,
                        attack_base,
                        &rep_runs[job.train_idx],
                        job.rep,
                        job.obs_idx,
                        perceptual,
                    )
                    .map_err(|e| (job.rep, e.to_string()));
                    slots.lock().expect("slots")[i] = Some(out);
                });
            }
        });
        slots.into_inner().expect("slots")
    };

    let mut scored: Vec<ScoredObservation> = Vec::new();
    for slot in results {
        match slot.expect("every job filled") {
            Ok(s) => scored.push(s),
            Err((rep, e)) => failed.push((rep, e)),
        }
    }
    // A failed attack fails its whole repetition.
    let failed_reps: Vec<usize> = {
        let mut v: Vec<usize> = failed.iter().map(|(r, _)| *r).collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    scored.retain(|s| !failed_reps.contains(&s.rep));
    scored.sort_by_key(|s| (s.rep, s.t));
    if scored.is_empty() {
        return Err(Error::Structure(format!(
            "every repetition failed: {}",
            failed
                .iter()
                .map(|(r, e)| format!("rep {r}: {e}"))
                .collect::<Vec<_>>()
                .join(" | ")
        )));
    }
    for (rep, e) in &failed {
        eprintln!("warning: repetition {rep} failed and is excluded from aggregates: {e}");
    }

    // Bundles, grids, and CSV rows in deterministic order.
    let defense_label = config.defense.label();
    let mut rows: Vec<MetricRow> = Vec::new();
    let mut curve_points: Vec<(usize, u64, f64)> = Vec::new(); // rep, t, perceptual
    for s in &scored {
        let run_id = format!("{}-rep{}", config.name, s.rep);
        let bundle_dir = out_dir
            .join("attacks")
            .join(format!("rep{}", s.rep))
            .join(format!("t{:08}", s.t));
        save_attack_bundle(
            &bundle_dir,
            &s.result,
            &attack_with_seed(attack_base.clone(), config.base_seed, s.rep, s.t),
            Some(&s.truth.pixels),
            serde_json::json!({ "t": s.t, "rep": s.rep, "defense": defense_label }),
        )?;
        emit_grid(
            &s.truth.pixels,
            &s.result.images,
            &s.report.permutation,
            &out_dir.join("grids").join(format!("rep{}_t{:08}.png", s.rep, s.t)),
        )?;
        curve_points.push((s.rep, s.t, s.report.perceptual));
        rows.push(MetricRow {
            run_id,
            t: s.t,
            attack: attack_base.name.clone(),
            defense: defense_label.clone(),
            mse: s.report.mse,
            psnr_db: psnr_for_output(s.report.psnr_db),
            ssim: s.report.ssim,
            perceptual_proxy: s.report.perceptual,
            rci_partial: None,
            wall_s: s.result.wall_seconds,
            peak_mem_bytes: s.result.peak_memory_bytes,
        });
    }
    // Fill running RCI over each repetition's curve prefix.
    for row in rows.iter_mut() {
        let rep = row.rep()?;
        let prefix: Vec<(u64, f64)> = curve_points
            .iter()
            .filter(|(r, t, _)| *r == rep && *t <= row.t)
            .map(|(_, t, p)| (*t, *p))
            .collect();
        if prefix.len() >= 2 {
            row.rci_partial = Some(rci(&RecoveryCurve {
                points: prefix,
                metric: "perceptual_proxy".into(),
            })?);
        }
    }

    write_lines(
        &out_dir.join("metrics.csv"),
        METRICS_CSV_HEADER,
        rows.iter().map(|r| r.to_csv()),
    )?;
    let mut log_rows = Vec::new();
    for rep in 0..config.repetitions {
        if failed_reps.contains(&rep) {
            continue;
        }
        let train_idx = match config.repeat_mode {
            RepeatMode::Full => match rep_runs.iter().position(|r| r.rep == rep) {
                Some(i) => i,
                None => continue,
            },
            RepeatMode::AttackSeeds => 0,
        };
        for row in &rep_runs[train_idx].training.model_log {
            log_rows.push(format!(
                "{}-rep{},{},{},{}",
                config.name, rep, row.t, row.train_loss, row.heldout_accuracy
            ));
        }
    }
    write_lines(
        &out_dir.join("model_log.csv"),
        MODEL_LOG_CSV_HEADER,
        log_rows.into_iter(),
    )?;
    let meta = RunMeta {
        name: config.name.clone(),
        attack: attack_base.name.clone(),
        defense: defense_label,
        repetitions_configured: config.repetitions,
        failed_repetitions: failed_reps,
        masked_columns: vec!["wall_s".into(), "peak_mem_bytes".into()],
    };
    std::fs::write(
        out_dir.join("run_meta.json"),
        serde_json::to_string_pretty(&meta)?,
    )?;

    let summary = build_summary(out_dir)?;
    std::fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(RunReport {
        summary,
        rows,
        out_dir: out_dir.to_path_buf(),
    })
}

fn attack_with_seed(mut cfg: AttackConfig, base: u64, rep: usize, t: u64) -> AttackConfig {
    cfg.rng_seed = attack_seed(base, rep, t);
    cfg
}

fn train_one_rep(
    config: &ExperimentConfig,
    dataset: &Dataset,
    rep: usize,
    out_dir: &Path,
) -> Result<RepRun> {
    let rep_seed = config.base_seed.wrapping_add(rep as u64);
    let model = Model::init(config.model_config(), splitmix(rep_seed ^ 0x0de1))?;
    let model = apply_model_defense(model, &config.defense, splitmix(rep_seed ^ 0x9))?;
    let mut train_cfg = config.train.clone();
    train_cfg.seed = splitmix(rep_seed ^ 0xceed);
    let mut defense = build_defense(&config.defense)?;
    let mut truths = Vec::new();
    let training = run_training(model, dataset, &train_cfg, defense.as_mut(), &mut |_obs,
                                                                                    truth| {
        truths.push(truth.clone());
        Ok(())
    })?;
    if let Some((at, cause)) = &training.halted {
        return Err(Error::TrainingHalted {
            at: *at,
            cause: cause.clone(),
        });
    }
    let obs_root = out_dir.join("observations").join(format!("rep{rep}"));
    for obs in &training.observations {
        save_observation(&obs_root, obs, &training.model.config, &config.defense.label())?;
    }
    Ok(RepRun {
        rep,
        training,
        truths,
    })
}

fn run_one_job(
    config: &ExperimentConfig,
    attack_base: &AttackConfig,
    run: &RepRun,
    rep: usize,
    obs_idx: usize,
    perceptual: &dyn Perceptual,
) -> Result<ScoredObservation> {
    let obs = &run.training.observations[obs_idx];
    let truth = run.truths[obs_idx].clone();
    let cfg = attack_with_seed(attack_base.clone(), config.base_seed, rep, obs.t);
    // Multi-observation attacks see the history up to this capture.
    let window: Vec<Arc<Observation>> = if cfg.multi_observation {
        run.training.observations[..=obs_idx].to_vec()
    } else {
        vec![obs.clone()]
    };
    let result = run_attack(&window, &cfg, &run.training.model.config)?;
    let report = score_aligned(
        &result.images,
        &truth.pixels,
        config.alignment_cost,
        perceptual,
    )?;
    Ok(ScoredObservation {
        rep,
        t: obs.t,
        result,
        report,
        truth,
    })
}

fn write_lines(
    path: &Path,
    header: &str,
    rows: impl Iterator<Item = String>,
) -> Result<()> {
    let mut text = String::from(header);
    text.push('\n');
    for row in rows {
        text.push_str(&row);
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Rebuild the summary from the persisted CSV files and run metadata. `run`
/// uses this same path, so `report` reproduces `summary.json` byte-for-byte.
pub fn build_summary(run_dir: &Path) -> Result<Summary> {
    let meta: RunMeta =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("run_meta.json"))?)?;
    let metrics_text = std::fs::read_to_string(run_dir.join("metrics.csv"))?;
    let mut rows = Vec::new();
    for (i, line) in metrics_text.lines().enumerate() {
        if i == 0 {
            if line != METRICS_CSV_HEADER {
                return Err(Error::Format("metrics.csv header mismatch".into()));
            }
            continue;
        }
        rows.push(MetricRow::from_csv(line)?);
    }
    let log_text = std::fs::read_to_string(run_dir.join("model_log.csv"))?;
    let mut final_accuracy: std::collections::BTreeMap<usize, f64> = Default::default();
    for (i, line) in log_text.lines().enumerate() {
        if i == 0 {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(Error::Format("model_log.csv row malformed".into()));
        }
        let rep: usize = parts[0]
            .rsplit("-rep")
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("model_log run_id missing rep".into()))?;
        let acc: f64 = parts[3]
            .parse()
            .map_err(|e| Error::Format(format!("bad accuracy: {e}")))?;
        final_accuracy.insert(rep, acc); // rows are in t order; last wins
    }

    let mut reps: Vec<usize> = rows.iter().map(|r| r.rep()).collect::<Result<Vec<_>>>()?;
    reps.sort_unstable();
    reps.dedup();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mut per_repetition = Vec::new();
    for &rep in &reps {
        let mine: Vec<&MetricRow> = rows
            .iter()
            .filter(|r| r.rep().map(|x| x == rep).unwrap_or(false))
            .collect();
        let curve: Vec<(u64, f64)> = mine.iter().map(|r| (r.t, r.perceptual_proxy)).collect();
        let rci_val = if curve.len() >= 2 {
            Some(rci(&RecoveryCurve {
                points: curve,
                metric: "perceptual_proxy".into(),
            })?)
        } else {
            None
        };
        per_repetition.push(RepSummary {
            rep,
            rci_perceptual: rci_val,
            final_accuracy: final_accuracy.get(&rep).copied(),
            mean_mse: mean(&mine.iter().map(|r| r.mse).collect::<Vec<_>>()),
            mean_psnr_db: mean(&mine.iter().map(|r| r.psnr_db).collect::<Vec<_>>()),
            mean_ssim: mean(&mine.iter().map(|r| r.ssim).collect::<Vec<_>>()),
            mean_perceptual: mean(&mine.iter().map(|r| r.perceptual_proxy).collect::<Vec<_>>()),
            total_attack_wall_s: mine.iter().map(|r| r.wall_s).sum(),
        });
    }

    let mut ts: Vec<u64> = rows.iter().map(|r| r.t).collect();
    ts.sort_unstable();
    ts.dedup();
    let mut curve = Vec::new();
    for &t in &ts {
        let at: Vec<&MetricRow> = rows.iter().filter(|r| r.t == t).collect();
        curve.push(CurvePoint {
            t,
            mse: mean(&at.iter().map(|r| r.mse).collect::<Vec<_>>()),
            psnr_db: mean(&at.iter().map(|r| r.psnr_db).collect::<Vec<_>>()),
            ssim: mean(&at.iter().map(|r| r.ssim).collect::<Vec<_>>()),
            perceptual: mean(&at.iter().map(|r| r.perceptual_proxy).collect::<Vec<_>>()),
        });
    }
    let agg_rci = if curve.len() >= 2 {
        Some(rci(&RecoveryCurve {
            points: curve.iter().map(|p| (p.t, p.perceptual)).collect(),
            metric: "perceptual_proxy".into(),
        })?)
    } else {
        None
    };
    let acc_values: Vec<f64> = per_repetition
        .iter()
        .filter_map(|r| r.final_accuracy)
        .collect();
    let aggregate = AggregateSummary {
        rci_perceptual: agg_rci,
        final_accuracy: if acc_values.is_empty() {
            None
        } else {
            Some(mean(&acc_values))
        },
        mean_mse: mean(&rows.iter().map(|r| r.mse).collect::<Vec<_>>()),
        mean_psnr_db: mean(&rows.iter().map(|r| r.psnr_db).collect::<Vec<_>>()),
        mean_ssim: mean(&rows.iter().map(|r| r.ssim).collect::<Vec<_>>()),
        mean_perceptual: mean(&rows.iter().map(|r| r.perceptual_proxy).collect::<Vec<_>>()),
        curve,
    };
    Ok(Summary {
        name: meta.name,
        attack: meta.attack,
        defense: meta.defense,
        perceptual_metric: "perceptual (proxy)".into(),
        repetitions_configured: meta.repetitions_configured,
        repetitions_succeeded: reps.len(),
        failed_repetitions: meta.failed_repetitions,
        per_repetition,
        aggregate,
    })
}

// ---- CLI --------------------------------------------------------------------

#[derive(Parser)]
#[command(
    name = "gradleak",
    version,
    about = "Simulate FedSGD training, run gradient-inversion attacks and defenses, score recoveries"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Execute the full train -> capture -> attack -> evaluate pipeline.
    Run {
        config: PathBuf,
        /// Output directory (overrides config and GRADLEAK_OUTPUT_ROOT).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Attack archived observations offline.
    Attack {
        /// Directory of t* capture subdirectories.
        observations: PathBuf,
        /// Preset: dlg, inverting_gradients, gradinversion, multiple_updates.
        preset: String,
        /// Attack rng seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Target timestamp (defaults to the latest capture).
        #[arg(long)]
        t: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Re-aggregate a run directory into summary.json.
    Report { run_dir: PathBuf },
    /// Check a config file without writing anything.
    Validate { config: PathBuf },
}

fn resolve_out_dir(cli_out: Option<PathBuf>, config: &ExperimentConfig) -> PathBuf {
    if let Some(o) = cli_out {
        return o;
    }
    if let Ok(root) = std::env::var(OUTPUT_ROOT_ENV) {
        return PathBuf::from(root).join(&config.name);
    }
    config
        .output_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(&config.name))
}

fn exit_code_for(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        _ => 1,
    }
}

fn run_cli(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Run { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            cfg.validate()?;
            let out_dir = resolve_out_dir(out, &cfg);
            let report = execute(&cfg, &out_dir)?;
            println!(
                "run `{}` complete: {} repetitions, mean ssim {:.4}, outputs in {}",
                report.summary.name,
                report.summary.repetitions_succeeded,
                report.summary.aggregate.mean_ssim,
                report.out_dir.display()
            );
            Ok(())
        }
        Cmd::Attack {
            observations,
            preset,
            seed,
            t,
            out,
            iterations,
        } => {
            let (all, model_config) = load_observation_dir(&observations)?;
            let target = match t {
                Some(t) => t,
                None => all.last().expect("non-empty").t,
            };
            let window: Vec<_> = all.iter().filter(|o| o.t <= target).cloned().collect();
            if window.is_empty() {
                return Err(Error::Config(format!(
                    "no captures at or before t = {target}"
                )));
            }
            let mut cfg = crate::attacks::preset(&preset)?;
            cfg.rng_seed = seed;
            if let Some(i) = iterations {
                cfg.attack_iterations = i;
            }
            let result = run_attack(&window, &cfg, &model_config)?;
            let out_dir = out.unwrap_or_else(|| {
                observations.join(format!("attack-{preset}-t{target:08}-seed{seed}"))
            });
            save_attack_bundle(
                &out_dir,
                &result,
                &cfg,
                None,
                serde_json::json!({ "t": target, "seed": seed, "offline": true }),
            )?;
            println!(
                "attack `{preset}` on t={target}: final loss {:.6e}, bundle in {}",
                result.final_loss,
                out_dir.display()
            );
            Ok(())
        }
        Cmd::Report { run_dir } => {
            let summary = build_summary(&run_dir)?;
            std::fs::write(
                run_dir.join("summary.json"),
                serde_json::to_string_pretty(&summary)?,
            )?;
            println!(
                "report for `{}` rebuilt: {} repetitions, mean ssim {:.4}",
                summary.name, summary.repetitions_succeeded, summary.aggregate.mean_ssim
            );
            Ok(())
        }
        Cmd::Validate { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            cfg.validate()?;
            println!("config `{}` is valid", cfg.name);
            Ok(())
        }
    }
}

/// CLI entry point; returns the process exit code (0 success, 1 runtime
/// failure, 2 config error).
pub fn cli_main<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            // Help/version requests exit 0; usage errors are config errors.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run_cli(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

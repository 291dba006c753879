//! Command-line entry points: `train`, `eval`, `sweep-alpha` and `export`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::ConfigError;
use crate::env::FairnessKind;
use crate::metrics::{self, MuRow, SlotRow};
use crate::trainer::{
    checkpoint_load, checkpoint_save, evaluate_policy, sweep_alpha_fixed, train, write_atomic, Algo, EvalPolicy,
    EvalReport, PolicyBundle, TrainOptions, CHECKPOINT_FORMAT, CHECKPOINT_VERSION,
};
use crate::{Error, Result, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "skymec", version, about = "MEC-UAV simulator and multi-agent PPO trainer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train RMAPPO or GMAPPO, then evaluate it against the fairness baselines.
    Train(TrainArgs),
    /// Evaluate a checkpoint and/or fairness baselines.
    Eval(EvalArgs),
    /// Compare pinned offloading ratios with the learned one.
    SweepAlpha(SweepArgs),
    /// Write the per-figure CSVs and the metrics bundle of a run.
    Export(ExportArgs),
}

/// Options shared by every command that runs the simulator.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML configuration file; takes precedence over --profile.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Built-in profile: micro or table2-full.
    #[arg(long, default_value = "micro")]
    pub profile: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory; created if absent.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// rmappo or gmappo.
    #[arg(long, default_value = "rmappo")]
    pub algo: String,
    /// Overrides train.episodes.
    #[arg(long)]
    pub episodes: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// fairness_all, fairness_w or fairness_p; repeatable or comma separated.
    #[arg(long, value_delimiter = ',')]
    pub baseline: Vec<String>,
    /// Defaults to train.eval_episodes.
    #[arg(long)]
    pub episodes: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [0.3, 0.5, 0.7])]
    pub alphas: Vec<f64>,
    #[arg(long)]
    pub episodes: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct ExportArgs {
    /// Directory written by `train`, `eval` or `sweep-alpha`.
    pub run_dir: PathBuf,
    /// Defaults to `<run_dir>/export`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Record of one command invocation, written before the work starts and
/// rewritten when it ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub seed: u64,
    pub profile: String,
    pub config_hash: String,
    pub config: RunConfig,
    pub version: String,
    pub artifacts: BTreeMap<String, String>,
    pub started_unix_s: u64,
    pub finished_unix_s: Option<u64>,
    /// `running`, `ok` or `failed: <message>`.
    pub status: String,
    /// Files written, relative to the output directory.
    pub outputs: Vec<String>,
}

fn now_s() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl RunManifest {
    fn new(command: &str, args: &[String], seed: u64, cfg: &RunConfig) -> Self {
        let artifacts = BTreeMap::from([
            ("checkpoint".to_string(), format!("{CHECKPOINT_FORMAT}/{CHECKPOINT_VERSION}")),
            ("metrics".to_string(), "skymec-metrics/1".to_string()),
        ]);
        Self {
            command: command.to_string(),
            args: args.to_vec(),
            seed,
            profile: cfg.profile.clone(),
            config_hash: cfg.hash(),
            config: cfg.clone(),
            version: format!(
                "skymec {} ({})",
                env!("CARGO_PKG_VERSION"),
                option_env!("SKYMEC_GIT_REV").unwrap_or("unversioned")
            ),
            artifacts,
            started_unix_s: now_s(),
            finished_unix_s: None,
            status: "running".into(),
            outputs: Vec::new(),
        }
    }

    fn write(&self, out: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        write_atomic(&out.join(metrics::MANIFEST_FILE), &bytes)
    }
}

pub fn load_config(common: &Common) -> Result<RunConfig> {
    let base = match &common.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::profile(&common.profile)?,
    };
    Ok(base.with_env_overrides()?)
}

/// Run a parsed command line; `raw` is recorded in the manifest.
pub fn run(cli: Cli, raw: &[String]) -> Result<()> {
    match cli.command {
        Command::Train(a) => with_manifest("train", raw, &a.common, |cfg, out| cmd_train(&a, cfg, out)),
        Command::Eval(a) => with_manifest("eval", raw, &a.common, |cfg, out| cmd_eval(&a, cfg, out)),
        Command::SweepAlpha(a) => with_manifest("sweep-alpha", raw, &a.common, |cfg, out| cmd_sweep(&a, cfg, out)),
        Command::Export(a) => cmd_export(&a),
    }
}

fn with_manifest(
    command: &str,
    raw: &[String],
    common: &Common,
    work: impl FnOnce(&RunConfig, &Path) -> Result<Vec<String>>,
) -> Result<()> {
    let cfg = load_config(common)?;
    let out = common.out.as_path();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_atomic(&out.join(metrics::CONFIG_FILE), cfg.to_toml_string().as_bytes())?;
    let mut manifest = RunManifest::new(command, raw, common.seed, &cfg);
    manifest.outputs.push(metrics::CONFIG_FILE.into());
    manifest.write(out)?;
    let result = work(&cfg, out);
    manifest.finished_unix_s = Some(now_s());
    match &result {
        Ok(files) => {
            manifest.status = "ok".into();
            manifest.outputs.extend(files.iter().cloned());
            manifest.outputs.push(metrics::MANIFEST_FILE.into());
        }
        Err(e) => manifest.status = format!("failed: {e}"),
    }
    manifest.write(out)?;
    result.map(|_| ())
}

fn eval_rows(report: &EvalReport, cfg: &RunConfig) -> (Vec<SlotRow>, Vec<MuRow>) {
    let mut slots = Vec::new();
    let mut mus = Vec::new();
    for (ep, m) in &report.slots {
        slots.extend(metrics::slot_rows(&report.policy, *ep, m, cfg.network.bandwidth_hz));
        mus.extend(metrics::mu_rows(&report.policy, *ep, m));
    }
    (slots, mus)
}

fn write_eval(reports: &[EvalReport], cfg: &RunConfig, out: &Path) -> Result<Vec<String>> {
    let mut slots = Vec::new();
    let mut mus = Vec::new();
    for r in reports {
        let (s, m) = eval_rows(r, cfg);
        slots.extend(s);
        mus.extend(m);
    }
    metrics::write_csv(&out.join(metrics::EVAL_EPISODES_CSV), reports.iter().flat_map(|r| r.episodes.iter()))?;
    metrics::write_csv(&out.join(metrics::EVAL_SLOTS_CSV), slots)?;
    metrics::write_csv(&out.join(metrics::EVAL_MUS_CSV), mus)?;
    Ok(vec![
        metrics::EVAL_EPISODES_CSV.into(),
        metrics::EVAL_SLOTS_CSV.into(),
        metrics::EVAL_MUS_CSV.into(),
    ])
}

fn parse_algo(name: &str) -> Result<Algo> {
    Algo::from_name(name).ok_or_else(|| {
        ConfigError::Invalid {
            key: "algo".into(),
            reason: format!("`{name}` is not rmappo or gmappo"),
        }
        .into()
    })
}

fn parse_baselines(names: &[String]) -> Result<Vec<FairnessKind>> {
    names
        .iter()
        .map(|n| {
            FairnessKind::from_name(n).ok_or_else(|| {
                ConfigError::Invalid {
                    key: "baseline".into(),
                    reason: format!("`{n}` is not fairness_all, fairness_w or fairness_p"),
                }
                .into()
            })
        })
        .collect()
}

fn cmd_train(a: &TrainArgs, cfg: &RunConfig, out: &Path) -> Result<Vec<String>> {
    let algo = parse_algo(&a.algo)?;
    let opts = TrainOptions {
        algo,
        seed: a.common.seed,
        episodes: a.episodes,
    };
    let (bundle, log, mut run) = train(cfg, opts)?;
    let mut files = Vec::new();
    metrics::write_csv(&out.join(metrics::EPISODES_CSV), &log.episodes)?;
    metrics::write_csv(&out.join(metrics::UPDATES_CSV), &log.updates)?;
    let mut slots = Vec::new();
    let mut mus = Vec::new();
    for (ep, m) in &log.slots {
        slots.extend(metrics::slot_rows(algo.name(), *ep, m, cfg.network.bandwidth_hz));
        mus.extend(metrics::mu_rows(algo.name(), *ep, m));
    }
    metrics::write_csv(&out.join(metrics::TRAIN_SLOTS_CSV), slots)?;
    metrics::write_csv(&out.join(metrics::TRAIN_MUS_CSV), mus)?;
    files.extend([
        metrics::EPISODES_CSV,
        metrics::UPDATES_CSV,
        metrics::TRAIN_SLOTS_CSV,
        metrics::TRAIN_MUS_CSV,
    ]
    .map(String::from));

    let n = cfg.train.eval_episodes;
    let seed = a.common.seed;
    let mut reports = vec![evaluate_policy(EvalPolicy::Learned(&bundle), cfg, n, seed)?];
    for kind in [FairnessKind::All, FairnessKind::Bandwidth, FairnessKind::Power] {
        reports.push(evaluate_policy(EvalPolicy::Fairness(kind, Some(&bundle)), cfg, n, seed)?);
    }
    files.extend(write_eval(&reports, cfg, out)?);
    run.best_eval_utility = Some(reports[0].mean_cost());
    checkpoint_save(&bundle, Some(&run), cfg, &out.join(metrics::CHECKPOINT_FILE))?;
    files.push(metrics::CHECKPOINT_FILE.into());
    println!(
        "{}: {} episodes, {} env steps, eval cost {:.6} (fairness_all {:.6})",
        algo.name(),
        run.episodes,
        run.env_steps,
        reports[0].mean_cost(),
        reports[1].mean_cost()
    );
    Ok(files)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub policy: String,
    pub episodes: usize,
    pub mean_utility: f64,
    pub mean_energy: f64,
    pub mean_delay: f64,
    pub violations: usize,
}

impl EvalSummary {
    pub fn of(r: &EvalReport) -> Self {
        let n = r.episodes.len() as f64;
        Self {
            policy: r.policy.clone(),
            episodes: r.episodes.len(),
            mean_utility: r.mean_cost(),
            mean_energy: r.episodes.iter().map(|e| e.mean_energy).sum::<f64>() / n,
            mean_delay: r.episodes.iter().map(|e| e.mean_delay).sum::<f64>() / n,
            violations: r.episodes.iter().map(|e| e.violations).sum(),
        }
    }
}

pub const EVAL_SUMMARY_JSON: &str = "eval_summary.json";

fn load_bundle(path: &Path, cfg: &RunConfig) -> Result<PolicyBundle> {
    checkpoint_load(path, cfg).map(|(b, _)| b)
}

fn cmd_eval(a: &EvalArgs, cfg: &RunConfig, out: &Path) -> Result<Vec<String>> {
    let kinds = parse_baselines(&a.baseline)?;
    if a.checkpoint.is_none() && kinds.is_empty() {
        return Err(ConfigError::Invalid {
            key: "checkpoint".into(),
            reason: "give --checkpoint, --baseline or both".into(),
        }
        .into());
    }
    let bundle = a.checkpoint.as_deref().map(|p| load_bundle(p, cfg)).transpose()?;
    let n = a.episodes.unwrap_or(cfg.train.eval_episodes);
    let seed = a.common.seed;
    let mut reports = Vec::new();
    if let Some(b) = &bundle {
        reports.push(evaluate_policy(EvalPolicy::Learned(b), cfg, n, seed)?);
    }
    for kind in kinds {
        reports.push(evaluate_policy(EvalPolicy::Fairness(kind, bundle.as_ref()), cfg, n, seed)?);
    }
    let mut files = write_eval(&reports, cfg, out)?;
    let summary: Vec<EvalSummary> = reports.iter().map(EvalSummary::of).collect();
    let mut bytes = serde_json::to_vec_pretty(&summary)?;
    bytes.push(b'\n');
    write_atomic(&out.join(EVAL_SUMMARY_JSON), &bytes)?;
    files.push(EVAL_SUMMARY_JSON.into());
    for s in &summary {
        println!("{}: {} episodes, mean cost {:.6}", s.policy, s.episodes, s.mean_utility);
    }
    Ok(files)
}

fn cmd_sweep(a: &SweepArgs, cfg: &RunConfig, out: &Path) -> Result<Vec<String>> {
    let bundle = load_bundle(&a.checkpoint, cfg)?;
    let n = a.episodes.unwrap_or(cfg.train.eval_episodes);
    let rows = sweep_alpha_fixed(&bundle, cfg, &a.alphas, n, a.common.seed)?;
    metrics::write_csv(&out.join(metrics::SWEEP_CSV), &rows)?;
    for r in &rows {
        println!("{}: mean cost {:.6}", r.policy, r.mean_utility);
    }
    Ok(vec![metrics::SWEEP_CSV.into()])
}

fn cmd_export(a: &ExportArgs) -> Result<()> {
    let out = a.out.clone().unwrap_or_else(|| a.run_dir.join("export"));
    let summary = metrics::export_run(&a.run_dir, &out)?;
    for p in &summary.written {
        println!("wrote {}", p.display());
    }
    for s in &summary.skipped {
        eprintln!("skipped {s}: source records absent");
    }
    Ok(())
}

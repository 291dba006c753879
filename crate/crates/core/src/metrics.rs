//! Flat CSV records of slots, MUs and training, and the per-figure export.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::env::SlotMetrics;
use crate::trainer::{write_atomic, EpisodeLog, Role, SweepRow};
use crate::{Error, Result, RunConfig};

pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const EPISODES_CSV: &str = "episodes.csv";
pub const UPDATES_CSV: &str = "updates.csv";
pub const TRAIN_SLOTS_CSV: &str = "train_slots.csv";
pub const TRAIN_MUS_CSV: &str = "train_mus.csv";
pub const EVAL_EPISODES_CSV: &str = "eval_episodes.csv";
pub const EVAL_SLOTS_CSV: &str = "eval_slots.csv";
pub const EVAL_MUS_CSV: &str = "eval_mus.csv";
pub const SWEEP_CSV: &str = "sweep_alpha.csv";
pub const BUNDLE_FILE: &str = "metrics_bundle.json";

/// One UAV in one slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotRow {
    pub policy: String,
    pub episode: usize,
    pub slot: usize,
    pub uav: usize,
    pub x_m: f64,
    pub y_m: f64,
    pub speed_mps: f64,
    pub members: usize,
    pub utility: f64,
    pub energy_total: f64,
    pub energy_flight: f64,
    pub energy_local: f64,
    pub energy_ul: f64,
    pub energy_dl: f64,
    pub energy_mec: f64,
    pub delay_total: f64,
    pub delay_local: f64,
    pub delay_ul: f64,
    pub delay_mec: f64,
    pub delay_dl: f64,
    pub min_rate_ul_bps: f64,
    pub min_rate_dl_bps: f64,
    pub infeasible_links: u32,
    pub violations: usize,
    pub sum_omega_ul: f64,
    pub sum_omega_dl: f64,
    /// `sum(omega_dl * B * p)`, the quantity capped by `P_max`.
    pub weighted_power: f64,
    pub slack_ul_sum: f64,
    pub slack_ul_bounds: f64,
    pub slack_dl_sum: f64,
    pub slack_dl_bounds: f64,
    pub slack_power_sum: f64,
    pub slack_power_bounds: f64,
    pub slack_alpha_bounds: f64,
    pub slack_mec_cpu: f64,
    pub slack_local_cpu: f64,
    pub slack_separation: f64,
    pub slack_speed: f64,
    pub reward_delta: f64,
    pub reward_omega_ul: f64,
    pub reward_omega_dl: f64,
    pub reward_power: f64,
    pub reward_alpha: f64,
    pub reward_trajectory: f64,
}

/// One MU in one slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MuRow {
    pub policy: String,
    pub episode: usize,
    pub slot: usize,
    pub mu: usize,
    pub uav: usize,
    pub d_pre_bits: f64,
    pub omega_ul: f64,
    pub omega_dl: f64,
    pub p_dl_watt: f64,
    pub alpha: f64,
    pub c_in: f64,
    pub c_mec: f64,
    pub distance_m: f64,
    pub rate_ul_bps: f64,
    pub rate_dl_bps: f64,
    pub delay_local: f64,
    pub delay_ul: f64,
    pub delay_mec: f64,
    pub delay_dl: f64,
    pub energy_local: f64,
    pub energy_ul: f64,
    pub energy_dl: f64,
    pub energy_mec: f64,
    pub infeasible_links: u32,
}

pub fn slot_rows(policy: &str, episode: usize, m: &SlotMetrics, bandwidth_hz: f64) -> Vec<SlotRow> {
    m.uavs
        .iter()
        .map(|u| {
            let recs = m.mus.iter().filter(|r| r.uav == u.uav);
            let (mut w_ul, mut w_dl, mut wp) = (0.0, 0.0, 0.0);
            for r in recs {
                w_ul += r.alloc.omega_ul;
                w_dl += r.alloc.omega_dl;
                wp += r.alloc.omega_dl * bandwidth_hz * r.alloc.p_dl_watt;
            }
            let s = &u.slacks;
            let r = &u.rewards;
            SlotRow {
                policy: policy.to_string(),
                episode,
                slot: m.slot,
                uav: u.uav,
                x_m: u.x_m,
                y_m: u.y_m,
                speed_mps: u.speed_mps,
                members: u.members,
                utility: u.utility,
                energy_total: u.energy_total,
                energy_flight: u.energy_flight,
                energy_local: u.energy_local,
                energy_ul: u.energy_ul,
                energy_dl: u.energy_dl,
                energy_mec: u.energy_mec,
                delay_total: u.delay_total,
                delay_local: u.delay_local,
                delay_ul: u.delay_ul,
                delay_mec: u.delay_mec,
                delay_dl: u.delay_dl,
                min_rate_ul_bps: u.min_rate_ul_bps,
                min_rate_dl_bps: u.min_rate_dl_bps,
                infeasible_links: u.infeasible_links,
                violations: u.violations,
                sum_omega_ul: w_ul,
                sum_omega_dl: w_dl,
                weighted_power: wp,
                slack_ul_sum: s.ul_sum,
                slack_ul_bounds: s.ul_bounds,
                slack_dl_sum: s.dl_sum,
                slack_dl_bounds: s.dl_bounds,
                slack_power_sum: s.power_sum,
                slack_power_bounds: s.power_bounds,
                slack_alpha_bounds: s.alpha_bounds,
                slack_mec_cpu: s.mec_cpu,
                slack_local_cpu: s.local_cpu,
                slack_separation: s.separation,
                slack_speed: s.speed,
                reward_delta: r.delta,
                reward_omega_ul: r.omega_ul,
                reward_omega_dl: r.omega_dl,
                reward_power: r.power,
                reward_alpha: r.alpha,
                reward_trajectory: r.trajectory,
            }
        })
        .collect()
}

pub fn mu_rows(policy: &str, episode: usize, m: &SlotMetrics) -> Vec<MuRow> {
    m.mus
        .iter()
        .map(|r| MuRow {
            policy: policy.to_string(),
            episode,
            slot: m.slot,
            mu: r.mu,
            uav: r.uav,
            d_pre_bits: r.d_pre_bits,
            omega_ul: r.alloc.omega_ul,
            omega_dl: r.alloc.omega_dl,
            p_dl_watt: r.alloc.p_dl_watt,
            alpha: r.alloc.alpha,
            c_in: r.c_in,
            c_mec: r.c_mec,
            distance_m: r.eval.distance_m,
            rate_ul_bps: r.eval.rate_ul_bps,
            rate_dl_bps: r.eval.rate_dl_bps,
            delay_local: r.eval.delays.local_comp,
            delay_ul: r.eval.delays.uplink,
            delay_mec: r.eval.delays.mec_comp,
            delay_dl: r.eval.delays.downlink,
            energy_local: r.eval.energies.local_comp,
            energy_ul: r.eval.energies.uplink,
            energy_dl: r.eval.energies.downlink,
            energy_mec: r.eval.energies.mec_comp,
            infeasible_links: r.eval.infeasible_links,
        })
        .collect()
}

/// Serialize rows with a header line. An empty iterator yields an empty string.
pub fn csv_string<R: Serialize>(rows: impl IntoIterator<Item = R>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io("<csv buffer>", e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_csv<R: Serialize>(path: &Path, rows: impl IntoIterator<Item = R>) -> Result<()> {
    write_atomic(path, csv_string(rows)?.as_bytes())
}

pub fn read_csv<R: DeserializeOwned>(path: &Path) -> Result<Vec<R>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.display().to_string()));
    }
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardCurveRow {
    pub episode: usize,
    pub role: String,
    pub episode_return: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationRow {
    pub policy: String,
    pub episode: usize,
    pub slot: usize,
    pub uav: usize,
    pub variable: String,
    pub value: f64,
    /// Constraint cap the value is compared against.
    pub cap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityRow {
    pub policy: String,
    pub slot: usize,
    /// Network utility (summed over UAVs) averaged over episodes.
    pub utility: f64,
    pub episodes: usize,
}

/// Slot averages of one MU in the first episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerMuRow {
    pub policy: String,
    pub mu: usize,
    pub uav: usize,
    pub distance_m: f64,
    pub omega_ul: f64,
    pub omega_dl: f64,
    pub p_dl_watt: f64,
    pub alpha: f64,
    pub rate_ul_bps: f64,
    pub rate_dl_bps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub policy: String,
    pub episode: usize,
    pub slot: usize,
    pub uav: usize,
    pub x_m: f64,
    pub y_m: f64,
}

pub const FIGURE_FAMILIES: [&str; 5] = [
    "fig_reward_curves.csv",
    "fig_allocation_distribution.csv",
    "fig_utility_vs_slot.csv",
    "fig_per_mu.csv",
    "fig_trajectories.csv",
];

/// Written only for runs that contain a fixed-ratio sweep.
pub const ALPHA_SWEEP_FAMILY: &str = "fig_alpha_sweep.csv";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExportSummary {
    pub written: Vec<PathBuf>,
    /// Families whose source files are absent.
    pub skipped: Vec<String>,
}

fn first_existing(run_dir: &Path, names: &[&str]) -> Option<PathBuf> {
    names.iter().map(|n| run_dir.join(n)).find(|p| p.exists())
}

pub fn reward_curve_rows(episodes: &[EpisodeLog]) -> Vec<RewardCurveRow> {
    episodes
        .iter()
        .flat_map(|e| {
            let values = [
                e.return_omega_ul,
                e.return_omega_dl,
                e.return_power,
                e.return_alpha,
                e.return_trajectory,
            ];
            Role::ALL.iter().zip(values).map(move |(r, v)| RewardCurveRow {
                episode: e.episode,
                role: r.name().to_string(),
                episode_return: v,
            })
        })
        .collect()
}

pub fn allocation_rows(slots: &[SlotRow], p_max: f64) -> Vec<AllocationRow> {
    slots
        .iter()
        .filter(|s| s.members > 0)
        .flat_map(|s| {
            [
                ("omega_ul_total", s.sum_omega_ul, 1.0),
                ("omega_dl_total", s.sum_omega_dl, 1.0),
                ("weighted_power_total", s.weighted_power, p_max),
            ]
            .map(|(variable, value, cap)| AllocationRow {
                policy: s.policy.clone(),
                episode: s.episode,
                slot: s.slot,
                uav: s.uav,
                variable: variable.to_string(),
                value,
                cap,
            })
        })
        .collect()
}

pub fn utility_rows(slots: &[SlotRow]) -> Vec<UtilityRow> {
    // (policy order of first appearance, slot) -> (sum over UAVs per episode, episodes)
    let mut order: Vec<String> = Vec::new();
    let mut acc: BTreeMap<(usize, usize), (BTreeMap<usize, f64>, usize)> = BTreeMap::new();
    for s in slots {
        let p = match order.iter().position(|x| *x == s.policy) {
            Some(p) => p,
            None => {
                order.push(s.policy.clone());
                order.len() - 1
            }
        };
        let e = acc.entry((p, s.slot)).or_default();
        *e.0.entry(s.episode).or_insert(0.0) += s.utility;
    }
    acc.into_iter()
        .map(|((p, slot), (per_ep, _))| UtilityRow {
            policy: order[p].clone(),
            slot,
            utility: per_ep.values().sum::<f64>() / per_ep.len() as f64,
            episodes: per_ep.len(),
        })
        .collect()
}

pub fn per_mu_rows(mus: &[MuRow]) -> Vec<PerMuRow> {
    let mut order: Vec<String> = Vec::new();
    let mut acc: BTreeMap<(usize, usize), (PerMuRow, usize)> = BTreeMap::new();
    let Some(first_ep) = mus.iter().map(|m| m.episode).min() else {
        return Vec::new();
    };
    for m in mus.iter().filter(|m| m.episode == first_ep) {
        let p = match order.iter().position(|x| *x == m.policy) {
            Some(p) => p,
            None => {
                order.push(m.policy.clone());
                order.len() - 1
            }
        };
        let (row, n) = acc.entry((p, m.mu)).or_insert_with(|| {
            (
                PerMuRow {
                    policy: m.policy.clone(),
                    mu: m.mu,
                    uav: m.uav,
                    distance_m: 0.0,
                    omega_ul: 0.0,
                    omega_dl: 0.0,
                    p_dl_watt: 0.0,
                    alpha: 0.0,
                    rate_ul_bps: 0.0,
                    rate_dl_bps: 0.0,
                },
                0,
            )
        });
        row.distance_m += m.distance_m;
        row.omega_ul += m.omega_ul;
        row.omega_dl += m.omega_dl;
        row.p_dl_watt += m.p_dl_watt;
        row.alpha += m.alpha;
        row.rate_ul_bps += m.rate_ul_bps;
        row.rate_dl_bps += m.rate_dl_bps;
        *n += 1;
    }
    acc.into_values()
        .map(|(mut r, n)| {
            let k = 1.0 / n as f64;
            r.distance_m *= k;
            r.omega_ul *= k;
            r.omega_dl *= k;
            r.p_dl_watt *= k;
            r.alpha *= k;
            r.rate_ul_bps *= k;
            r.rate_dl_bps *= k;
            r
        })
        .collect()
}

/// Positions of the first policy's first episode: one row per UAV and slot.
pub fn trajectory_rows(slots: &[SlotRow]) -> Vec<TrajectoryRow> {
    let Some(first) = slots.first() else {
        return Vec::new();
    };
    slots
        .iter()
        .filter(|s| s.policy == first.policy && s.episode == first.episode)
        .map(|s| TrajectoryRow {
            policy: s.policy.clone(),
            episode: s.episode,
            slot: s.slot,
            uav: s.uav,
            x_m: s.x_m,
            y_m: s.y_m,
        })
        .collect()
}

#[derive(Serialize)]
struct Bundle<'a> {
    format: &'a str,
    files: BTreeMap<String, String>,
}

/// Write the figure-family CSVs and the metrics bundle of `run_dir` into `out_dir`.
/// Evaluation records are preferred over training records when both exist.
pub fn export_run(run_dir: &Path, out_dir: &Path) -> Result<ExportSummary> {
    if !run_dir.is_dir() {
        return Err(Error::MissingArtifact(format!("run directory {}", run_dir.display())));
    }
    let cfg_path = run_dir.join(CONFIG_FILE);
    if !cfg_path.exists() {
        return Err(Error::MissingArtifact(cfg_path.display().to_string()));
    }
    let cfg = RunConfig::from_file(&cfg_path)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut summary = ExportSummary::default();
    let emit = |name: &str, body: Option<String>, summary: &mut ExportSummary| -> Result<()> {
        match body {
            Some(b) => {
                let path = out_dir.join(name);
                write_atomic(&path, b.as_bytes())?;
                summary.written.push(path);
            }
            None => summary.skipped.push(name.to_string()),
        }
        Ok(())
    };

    let episodes = match first_existing(run_dir, &[EPISODES_CSV]) {
        Some(p) => Some(csv_string(reward_curve_rows(&read_csv::<EpisodeLog>(&p)?))?),
        None => None,
    };
    emit(FIGURE_FAMILIES[0], episodes, &mut summary)?;

    let slots: Option<Vec<SlotRow>> = match first_existing(run_dir, &[EVAL_SLOTS_CSV, TRAIN_SLOTS_CSV]) {
        Some(p) => Some(read_csv(&p)?),
        None => None,
    };
    let alloc = match &slots {
        Some(s) => Some(csv_string(allocation_rows(s, cfg.network.p_max_watt))?),
        None => None,
    };
    emit(FIGURE_FAMILIES[1], alloc, &mut summary)?;
    let util = match &slots {
        Some(s) => Some(csv_string(utility_rows(s))?),
        None => None,
    };
    emit(FIGURE_FAMILIES[2], util, &mut summary)?;
    let per_mu = match first_existing(run_dir, &[EVAL_MUS_CSV, TRAIN_MUS_CSV]) {
        Some(p) => Some(csv_string(per_mu_rows(&read_csv::<MuRow>(&p)?))?),
        None => None,
    };
    emit(FIGURE_FAMILIES[3], per_mu, &mut summary)?;
    let traj = match &slots {
        Some(s) => Some(csv_string(trajectory_rows(s))?),
        None => None,
    };
    emit(FIGURE_FAMILIES[4], traj, &mut summary)?;
    let sweep = match first_existing(run_dir, &[SWEEP_CSV]) {
        Some(p) => Some(csv_string(read_csv::<SweepRow>(&p)?)?),
        None => None,
    };
    emit(ALPHA_SWEEP_FAMILY, sweep, &mut summary)?;

    let mut files = BTreeMap::new();
    let mut entries: Vec<PathBuf> = fs::read_dir(run_dir)
        .map_err(|e| Error::io(run_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    entries.sort();
    for p in entries {
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let keep = name.ends_with(".csv") || name == CONFIG_FILE || name == MANIFEST_FILE;
        if keep && name != BUNDLE_FILE {
            let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            files.insert(name, text);
        }
    }
    let bundle = Bundle {
        format: "skymec-metrics-bundle/1",
        files,
    };
    let path = out_dir.join(BUNDLE_FILE);
    let mut bytes = serde_json::to_vec(&bundle)?;
    bytes.push(b'\n');
    write_atomic(&path, &bytes)?;
    summary.written.push(path);
    Ok(summary)
}

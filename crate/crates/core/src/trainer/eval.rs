use serde::{Deserialize, Serialize};

use super::bundle::PolicyBundle;
use crate::config::ConfigError;
use crate::env::{self, apply_fairness, fairness_policy, ActionSet, FairnessKind, SlotMetrics};
use crate::{Error, Result, RunConfig};

/// What chooses the actions during evaluation.
#[derive(Debug, Clone, Copy)]
pub enum EvalPolicy<'a> {
    /// Squashed-mean actions of a bundle.
    Learned(&'a PolicyBundle),
    /// Equal-share baseline; the bandwidth- and power-only variants fill the
    /// remaining decisions from a bundle.
    Fairness(FairnessKind, Option<&'a PolicyBundle>),
    /// Learned actions with every offloading ratio pinned.
    FixedAlpha(&'a PolicyBundle, f64),
}

impl EvalPolicy<'_> {
    pub fn label(&self) -> String {
        match self {
            EvalPolicy::Learned(b) => b.algo.name().to_string(),
            EvalPolicy::Fairness(k, _) => k.name().to_string(),
            EvalPolicy::FixedAlpha(_, a) => format!("alpha_{a}"),
        }
    }

    fn actions(&self, state: &env::WorldState, cfg: &RunConfig) -> Result<ActionSet> {
        let (net, scen) = (&cfg.network, &cfg.scenario);
        let learned = |b: &PolicyBundle| {
            let obs = env::observe(state, net, scen);
            b.mean_actions(&obs, state.slot as f64 / scen.num_slots as f64, net)
        };
        Ok(match *self {
            EvalPolicy::Learned(b) => learned(b)?,
            EvalPolicy::Fairness(FairnessKind::All, _) => fairness_policy(state, net),
            EvalPolicy::Fairness(kind, Some(b)) => apply_fairness(kind, state, &learned(b)?, net),
            EvalPolicy::Fairness(kind, None) => {
                return Err(Error::MissingArtifact(format!("{} needs a trained checkpoint", kind.name())))
            }
            EvalPolicy::FixedAlpha(b, alpha) => {
                let mut a = learned(b)?;
                for u in &mut a.uavs {
                    u.alpha.iter_mut().for_each(|x| *x = alpha);
                }
                a
            }
        })
    }
}

/// Summary of one evaluation episode. Means run over slots of the summed UAV values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEpisode {
    pub policy: String,
    pub episode: usize,
    pub env_seed: u64,
    pub mean_utility: f64,
    pub mean_energy: f64,
    pub mean_delay: f64,
    pub violations: usize,
    pub allocation_violations: usize,
    pub infeasible_links: u32,
    /// Lowest uplink rate over the episode's served MUs.
    pub min_rate_ul_bps: f64,
    pub min_rate_dl_bps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub policy: String,
    pub episodes: Vec<EvalEpisode>,
    /// Every slot of every episode, tagged with the episode index.
    pub slots: Vec<(usize, SlotMetrics)>,
}

impl EvalReport {
    /// Mean per-slot network utility (cost, lower is better).
    pub fn mean_cost(&self) -> f64 {
        if self.episodes.is_empty() {
            return f64::NAN;
        }
        self.episodes.iter().map(|e| e.mean_utility).sum::<f64>() / self.episodes.len() as f64
    }
}

/// Environment seed of the `k`-th evaluation episode; identical for every
/// policy evaluated under the same `seed`.
pub fn eval_seed(seed: u64, k: usize) -> u64 {
    1_000_000_007u64.wrapping_mul(seed.wrapping_add(1)).wrapping_add(k as u64)
}

pub fn evaluate(bundle: &PolicyBundle, cfg: &RunConfig, episodes: usize, seed: u64) -> Result<EvalReport> {
    evaluate_policy(EvalPolicy::Learned(bundle), cfg, episodes, seed)
}

pub fn evaluate_policy(policy: EvalPolicy<'_>, cfg: &RunConfig, episodes: usize, seed: u64) -> Result<EvalReport> {
    let (net, scen) = (&cfg.network, &cfg.scenario);
    let label = policy.label();
    let mut report = EvalReport {
        policy: label.clone(),
        episodes: Vec::with_capacity(episodes),
        slots: Vec::new(),
    };
    for k in 0..episodes {
        let env_seed = eval_seed(seed, k);
        let mut state = env::reset(env_seed, net, scen);
        let mut ep = EvalEpisode {
            policy: label.clone(),
            episode: k,
            env_seed,
            mean_utility: 0.0,
            mean_energy: 0.0,
            mean_delay: 0.0,
            violations: 0,
            allocation_violations: 0,
            infeasible_links: 0,
            min_rate_ul_bps: f64::INFINITY,
            min_rate_dl_bps: f64::INFINITY,
        };
        loop {
            let actions = policy.actions(&state, cfg)?;
            let out = env::step(&mut state, &actions, net, scen)?;
            for m in &out.metrics.uavs {
                ep.mean_utility += m.utility;
                ep.mean_energy += m.energy_total;
                ep.mean_delay += m.delay_total;
                ep.violations += m.violations;
                ep.allocation_violations += m.slacks.violations().allocation_count();
                ep.infeasible_links += m.infeasible_links;
                if m.members > 0 {
                    ep.min_rate_ul_bps = ep.min_rate_ul_bps.min(m.min_rate_ul_bps);
                    ep.min_rate_dl_bps = ep.min_rate_dl_bps.min(m.min_rate_dl_bps);
                }
            }
            report.slots.push((k, out.metrics));
            if out.done {
                break;
            }
        }
        let n = scen.num_slots as f64;
        ep.mean_utility /= n;
        ep.mean_energy /= n;
        ep.mean_delay /= n;
        report.episodes.push(ep);
    }
    Ok(report)
}

/// One row of the offloading-ratio comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub policy: String,
    /// Pinned ratio; empty for the learned row.
    pub alpha: Option<f64>,
    pub mean_utility: f64,
    pub mean_energy: f64,
    pub mean_delay: f64,
}

/// Evaluate the bundle with `alpha` pinned to each value, then unpinned.
pub fn sweep_alpha_fixed(
    bundle: &PolicyBundle,
    cfg: &RunConfig,
    alphas: &[f64],
    episodes: usize,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if let Some(a) = alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(ConfigError::Invalid {
            key: "alphas".into(),
            reason: format!("{a} is outside [0, 1]"),
        }
        .into());
    }
    let mut policies: Vec<(EvalPolicy<'_>, Option<f64>)> =
        alphas.iter().map(|&a| (EvalPolicy::FixedAlpha(bundle, a), Some(a))).collect();
    policies.push((EvalPolicy::Learned(bundle), None));
    policies
        .into_iter()
        .map(|(p, alpha)| {
            let r = evaluate_policy(p, cfg, episodes, seed)?;
            let mean = |f: fn(&EvalEpisode) -> f64| r.episodes.iter().map(f).sum::<f64>() / r.episodes.len() as f64;
            Ok(SweepRow {
                policy: r.policy.clone(),
                alpha,
                mean_utility: r.mean_cost(),
                mean_energy: mean(|e| e.mean_energy),
                mean_delay: mean(|e| e.mean_delay),
            })
        })
        .collect()
}

//! Equal-share baselines.

use serde::{Deserialize, Serialize};

use super::{ActionSet, UavAction, WorldState};
use crate::{NetworkConfig, Position};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FairnessKind {
    /// Every resource shared equally, offloading at one half, fly to the member centroid.
    All,
    /// Bandwidth shared equally; everything else learned.
    Bandwidth,
    /// Power shared equally; everything else learned.
    Power,
}

impl FairnessKind {
    pub fn name(self) -> &'static str {
        match self {
            FairnessKind::All => "fairness_all",
            FairnessKind::Bandwidth => "fairness_w",
            FairnessKind::Power => "fairness_p",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "fairness_all" => Some(FairnessKind::All),
            "fairness_w" => Some(FairnessKind::Bandwidth),
            "fairness_p" => Some(FairnessKind::Power),
            _ => None,
        }
    }
}

/// Equal power that meets `sum(omega_dl * B * p) <= P_max` with equality,
/// capped at `P_max`.
fn equal_power(omega_dl: &[f64], cfg: &NetworkConfig) -> f64 {
    let total: f64 = omega_dl.iter().sum();
    if total <= 0.0 {
        return cfg.p_max_watt;
    }
    (cfg.p_max_watt / (cfg.bandwidth_hz * total)).min(cfg.p_max_watt)
}

fn centroid_step(from: Position, members: &[usize], mu_pos: &[Position], max_step: f64) -> [f64; 2] {
    if members.is_empty() {
        return [0.0, 0.0];
    }
    let n = members.len() as f64;
    let cx = members.iter().map(|&u| mu_pos[u].x_m).sum::<f64>() / n;
    let cy = members.iter().map(|&u| mu_pos[u].y_m).sum::<f64>() / n;
    let (dx, dy) = (cx - from.x_m, cy - from.y_m);
    let dist = dx.hypot(dy);
    if dist == 0.0 {
        return [0.0, 0.0];
    }
    let len = dist.min(max_step);
    [dx / dist * len, dy / dist * len]
}

/// The all-resources equal-share action.
pub fn fairness_policy(state: &WorldState, cfg: &NetworkConfig) -> ActionSet {
    let uavs = state
        .members
        .iter()
        .zip(&state.uav_pos)
        .map(|(m, &p)| {
            let n = m.len();
            let w = if n == 0 { 0.0 } else { 1.0 / n as f64 };
            let omega = vec![w; n];
            let power = equal_power(&omega, cfg);
            UavAction {
                omega_ul: omega.clone(),
                omega_dl: omega,
                p_dl: vec![power; n],
                alpha: vec![0.5; n],
                delta_xy: centroid_step(p, m, &state.mu_pos, cfg.max_step_m()),
            }
        })
        .collect();
    ActionSet { uavs }
}

/// Replace the parts of a learned action that `kind` fixes to the equal share.
pub fn apply_fairness(kind: FairnessKind, state: &WorldState, learned: &ActionSet, cfg: &NetworkConfig) -> ActionSet {
    let fair = fairness_policy(state, cfg);
    match kind {
        FairnessKind::All => fair,
        FairnessKind::Bandwidth => ActionSet {
            uavs: learned
                .uavs
                .iter()
                .zip(fair.uavs)
                .map(|(l, f)| UavAction {
                    omega_ul: f.omega_ul,
                    omega_dl: f.omega_dl,
                    ..l.clone()
                })
                .collect(),
        },
        FairnessKind::Power => ActionSet {
            uavs: learned
                .uavs
                .iter()
                .map(|l| {
                    let p = equal_power(&l.omega_dl, cfg);
                    UavAction {
                        p_dl: vec![p; l.omega_dl.len()],
                        ..l.clone()
                    }
                })
                .collect(),
        },
    }
}

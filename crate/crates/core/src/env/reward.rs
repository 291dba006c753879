use serde::{Deserialize, Serialize};

use super::{ActionSet, UavAction, WorldState};
use crate::config::ScenarioConfig;
use crate::NetworkConfig;

/// Slack below this is reported as a violation.
pub const VIOLATION_TOL: f64 = 1e-9;

/// Signed constraint slacks for one UAV in one slot; negative means violated.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UavSlacks {
    /// `1 - sum(omega_ul)`.
    pub ul_sum: f64,
    /// Distance of the worst `omega_ul` to `[0, 1]`; 1 with no members.
    pub ul_bounds: f64,
    /// `1 - sum(omega_dl)`.
    pub dl_sum: f64,
    pub dl_bounds: f64,
    /// `P_max - sum(omega_dl * B * p)`.
    pub power_sum: f64,
    /// Distance of the worst `p` to `[0, P_max]`; `P_max` with no members.
    pub power_bounds: f64,
    pub alpha_bounds: f64,
    /// Worst distance of `c_mec` to `[c_min, C_uav_max]` and of `sum(c_mec)` to the budget.
    pub mec_cpu: f64,
    /// Worst distance of `c_in` to `[c_min, c_mu_max]`.
    pub local_cpu: f64,
    /// Closest other UAV minus `L_min`; region diagonal minus `L_min` when alone.
    pub separation: f64,
    /// `V_max - speed`.
    pub speed: f64,
}

/// Constraint flags derived from [`UavSlacks`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct UavViolations {
    pub ul_sum: bool,
    pub ul_bounds: bool,
    pub dl_sum: bool,
    pub dl_bounds: bool,
    pub power_sum: bool,
    pub power_bounds: bool,
    pub alpha_bounds: bool,
    pub mec_cpu: bool,
    pub local_cpu: bool,
    pub separation: bool,
    pub speed: bool,
}

impl UavSlacks {
    pub fn violations(&self) -> UavViolations {
        let v = |s: f64| s < -VIOLATION_TOL;
        UavViolations {
            ul_sum: v(self.ul_sum),
            ul_bounds: v(self.ul_bounds),
            dl_sum: v(self.dl_sum),
            dl_bounds: v(self.dl_bounds),
            power_sum: v(self.power_sum),
            power_bounds: v(self.power_bounds),
            alpha_bounds: v(self.alpha_bounds),
            mec_cpu: v(self.mec_cpu),
            local_cpu: v(self.local_cpu),
            separation: v(self.separation),
            speed: v(self.speed),
        }
    }
}

impl UavViolations {
    /// Violations among the bandwidth and power allocation constraints.
    pub fn allocation_count(&self) -> usize {
        [self.ul_sum, self.ul_bounds, self.dl_sum, self.dl_bounds, self.power_sum, self.power_bounds]
            .iter()
            .filter(|&&b| b)
            .count()
    }

    pub fn count(&self) -> usize {
        self.allocation_count()
            + [self.alpha_bounds, self.mec_cpu, self.local_cpu, self.separation, self.speed]
                .iter()
                .filter(|&&b| b)
                .count()
    }
}

fn interval_slack(values: impl Iterator<Item = f64>, lo: f64, hi: f64) -> f64 {
    values.fold(hi - lo, |acc, x| acc.min(x - lo).min(hi - x))
}

/// Allocation-side slacks of one UAV's action (everything that does not
/// depend on positions or the CPU solution).
pub fn action_slacks(a: &UavAction, cfg: &NetworkConfig) -> UavSlacks {
    let b = cfg.bandwidth_hz;
    let weighted: f64 = a.omega_dl.iter().zip(&a.p_dl).map(|(w, p)| w * b * p).sum();
    UavSlacks {
        ul_sum: 1.0 - a.omega_ul.iter().sum::<f64>(),
        ul_bounds: interval_slack(a.omega_ul.iter().copied(), 0.0, 1.0),
        dl_sum: 1.0 - a.omega_dl.iter().sum::<f64>(),
        dl_bounds: interval_slack(a.omega_dl.iter().copied(), 0.0, 1.0),
        power_sum: cfg.p_max_watt - weighted,
        power_bounds: interval_slack(a.p_dl.iter().copied(), 0.0, cfg.p_max_watt),
        alpha_bounds: interval_slack(a.alpha.iter().copied(), 0.0, 1.0),
        mec_cpu: 0.0,
        local_cpu: 0.0,
        separation: 0.0,
        speed: 0.0,
    }
}

/// Full slack report for `actions` taken from `state`, before the world moves.
///
/// Positions are advanced with the same clamping `step` applies; CPU slacks
/// use the allocation `step` would use.
pub fn violation_report(
    state: &WorldState,
    actions: &ActionSet,
    cfg: &NetworkConfig,
    scen: &ScenarioConfig,
) -> crate::Result<Vec<UavSlacks>> {
    let moved = super::apply_moves(state, actions, cfg, scen);
    let cpu = super::cpu_allocation(state, actions, cfg, scen)?;
    let mut out = Vec::with_capacity(actions.uavs.len());
    for (v, a) in actions.uavs.iter().enumerate() {
        let mut s = action_slacks(a, cfg);
        let members = &state.members[v];
        let mec_sum: f64 = members.iter().map(|&u| cpu.c_mec[u]).sum();
        s.mec_cpu = members.iter().fold(cfg.c_uav_max - mec_sum, |acc, &u| {
            let c_min = state.tasks[u].c_min_cycles_per_s;
            acc.min(cpu.c_mec[u] - c_min).min(cfg.c_uav_max - cpu.c_mec[u])
        });
        s.local_cpu = members.iter().fold(cfg.c_mu_max - cfg.c_mu_min, |acc, &u| {
            let c_min = state.tasks[u].c_min_cycles_per_s;
            acc.min(cpu.c_in[u] - c_min).min(cfg.c_mu_max - cpu.c_in[u])
        });
        s.separation = separation_slack(&moved.positions, v, cfg.l_min_m, scen.region_m);
        s.speed = cfg.v_max_mps - moved.speeds[v];
        out.push(s);
    }
    Ok(out)
}

pub(crate) fn separation_slack(positions: &[crate::Position], v: usize, l_min: f64, region: f64) -> f64 {
    let diag = region * std::f64::consts::SQRT_2;
    positions
        .iter()
        .enumerate()
        .filter(|&(w, _)| w != v)
        .map(|(_, p)| p.planar_distance(&positions[v]))
        .fold(diag, f64::min)
        - l_min
}

/// Per-UAV rewards of the five resource agents.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardSet {
    /// Shared utility-change term.
    pub delta: f64,
    pub omega_ul: f64,
    pub omega_dl: f64,
    pub power: f64,
    pub alpha: f64,
    pub trajectory: f64,
}

impl RewardSet {
    pub fn as_array(&self) -> [f64; 5] {
        [self.omega_ul, self.omega_dl, self.power, self.alpha, self.trajectory]
    }

    /// Single-agent reward: the shared term plus every bonus and penalty.
    pub fn joint(&self) -> f64 {
        self.delta
            + (self.omega_ul - self.delta)
            + (self.omega_dl - self.delta)
            + (self.power - self.delta)
            + (self.trajectory - self.delta)
    }

    pub fn sum(&self) -> f64 {
        self.as_array().iter().sum()
    }
}

/// Indicator used by the bonus terms: 1 when the slack is non-negative.
pub fn indicator(slack: f64) -> f64 {
    if slack >= 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Coordinator rewards from the utility change and the allocation slacks.
pub fn rewards(u_prev: f64, u_now: f64, slacks: &UavSlacks, scen: &ScenarioConfig) -> RewardSet {
    let delta = if scen.reward_sign_paper {
        u_now - u_prev
    } else {
        -(u_now - u_prev)
    };
    let f_ul = slacks.ul_sum;
    let f_dl = slacks.dl_sum;
    let g = slacks.power_sum;
    let h = if slacks.separation < 0.0 { 1.0 } else { 0.0 };
    RewardSet {
        delta,
        omega_ul: delta + scen.zeta_ul * indicator(f_ul) * f_ul,
        omega_dl: delta + scen.zeta_dl * indicator(f_dl) * f_dl,
        power: delta + scen.nu * indicator(g) * g,
        alpha: delta,
        trajectory: delta - scen.xi * h,
    }
}

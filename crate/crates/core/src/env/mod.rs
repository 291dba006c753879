//! Time-slotted world: placement, association, observations, the slot
//! transition and the coordinator's rewards.

mod fairness;
mod reward;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alloc::{solve_p11, AllocProblem};
use crate::config::ScenarioConfig;
use crate::net::{self, MuSlotEval};
use crate::{LinkAlloc, NetworkConfig, Position, Task};

pub use fairness::{apply_fairness, fairness_policy, FairnessKind};
pub use reward::{
    action_slacks, indicator, rewards, violation_report, RewardSet, UavSlacks, UavViolations, VIOLATION_TOL,
};

/// Entries per member-MU state vector.
pub const USER_STATE_DIM: usize = 4;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("expected actions for {expected} UAVs, got {got}")]
    UavCount { expected: usize, got: usize },
    #[error("UAV {uav}: `{field}` has {got} entries for {expected} members")]
    ActionShape {
        uav: usize,
        field: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("UAV {uav}: non-finite `{field}` action")]
    NonFinite { uav: usize, field: &'static str },
    #[error("episode already finished after {0} slots")]
    EpisodeOver(usize),
}

/// CPU rates per MU index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpuAlloc {
    pub c_in: Vec<f64>,
    pub c_mec: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub slot: usize,
    pub uav_pos: Vec<Position>,
    pub mu_pos: Vec<Position>,
    /// Member MU indices per UAV, ascending.
    pub members: Vec<Vec<usize>>,
    pub tasks: Vec<Task>,
    /// Utility of the previous slot per UAV; `None` before the first step.
    pub u_prev: Option<Vec<f64>>,
    /// CPU allocation kept when it is solved once per episode.
    pub cpu_cache: Option<CpuAlloc>,
    pub rng: ChaCha8Rng,
}

/// One UAV's decisions for a slot; vectors follow the UAV's member order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UavAction {
    pub omega_ul: Vec<f64>,
    pub omega_dl: Vec<f64>,
    pub p_dl: Vec<f64>,
    pub alpha: Vec<f64>,
    /// Requested planar displacement, m.
    pub delta_xy: [f64; 2],
}

impl UavAction {
    /// All-zero allocation and no movement.
    pub fn zeros(members: usize) -> Self {
        Self {
            omega_ul: vec![0.0; members],
            omega_dl: vec![0.0; members],
            p_dl: vec![0.0; members],
            alpha: vec![0.0; members],
            delta_xy: [0.0, 0.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionSet {
    pub uavs: Vec<UavAction>,
}

impl ActionSet {
    pub fn zeros(state: &WorldState) -> Self {
        Self {
            uavs: state.members.iter().map(|m| UavAction::zeros(m.len())).collect(),
        }
    }
}

/// What a UAV's actors see: its own normalized position and its members' states.
#[derive(Debug, Clone, PartialEq)]
pub struct UavObservation {
    pub own: [f64; 2],
    pub users: Vec<Vec<f64>>,
}

/// Per-MU record of one slot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MuRecord {
    pub mu: usize,
    pub uav: usize,
    pub d_pre_bits: f64,
    pub alloc: LinkAlloc,
    pub c_in: f64,
    pub c_mec: f64,
    pub eval: MuSlotEval,
}

/// Per-UAV aggregates of one slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UavSlotMetrics {
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
    pub slacks: UavSlacks,
    pub violations: usize,
    pub rewards: RewardSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotMetrics {
    pub slot: usize,
    pub uavs: Vec<UavSlotMetrics>,
    pub mus: Vec<MuRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub rewards: Vec<RewardSet>,
    pub metrics: SlotMetrics,
    pub done: bool,
}

/// Nearest UAV in planar distance; ties go to the lower index.
pub fn associate(mu_pos: &[Position], uav_pos: &[Position]) -> Vec<Vec<usize>> {
    let mut members = vec![Vec::new(); uav_pos.len()];
    for (u, p) in mu_pos.iter().enumerate() {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (v, q) in uav_pos.iter().enumerate() {
            let d = p.planar_distance(q);
            if d < best_d {
                best = v;
                best_d = d;
            }
        }
        members[best].push(u);
    }
    members
}

fn sample_tasks(rng: &mut ChaCha8Rng, n: usize, cfg: &NetworkConfig, scen: &ScenarioConfig) -> Vec<Task> {
    (0..n)
        .map(|_| Task {
            d_pre_bits: rng.random_range(scen.task_bits_min..=scen.task_bits_max),
            c_min_cycles_per_s: cfg.c_mu_min,
        })
        .collect()
}

/// Fresh episode: MUs uniform over the region, UAVs at their spawn points.
pub fn reset(seed: u64, cfg: &NetworkConfig, scen: &ScenarioConfig) -> WorldState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mu_pos: Vec<Position> = (0..scen.num_mus)
        .map(|_| {
            let x = rng.random_range(0.0..=scen.region_m);
            let y = rng.random_range(0.0..=scen.region_m);
            Position::new(x, y)
        })
        .collect();
    let uav_pos: Vec<Position> = scen.uav_spawn.iter().map(|&[x, y]| Position::new(x, y)).collect();
    let tasks = sample_tasks(&mut rng, scen.num_mus, cfg, scen);
    WorldState::from_parts(uav_pos, mu_pos, tasks, rng)
}

impl WorldState {
    /// State at slot 0 from explicit positions and tasks.
    pub fn from_parts(uav_pos: Vec<Position>, mu_pos: Vec<Position>, tasks: Vec<Task>, rng: ChaCha8Rng) -> Self {
        let members = associate(&mu_pos, &uav_pos);
        Self {
            slot: 0,
            uav_pos,
            mu_pos,
            members,
            tasks,
            u_prev: None,
            cpu_cache: None,
            rng,
        }
    }

    pub fn num_uavs(&self) -> usize {
        self.uav_pos.len()
    }

    /// UAV serving each MU.
    pub fn owner(&self) -> Vec<usize> {
        let mut owner = vec![usize::MAX; self.mu_pos.len()];
        for (v, m) in self.members.iter().enumerate() {
            for &u in m {
                owner[u] = v;
            }
        }
        owner
    }

    /// True when every MU belongs to exactly one UAV.
    pub fn is_partition(&self) -> bool {
        let mut seen = vec![0u32; self.mu_pos.len()];
        for m in &self.members {
            for &u in m {
                match seen.get_mut(u) {
                    Some(c) => *c += 1,
                    None => return false,
                }
            }
        }
        seen.iter().all(|&c| c == 1)
    }
}

/// Per-UAV observations.
pub fn observe(state: &WorldState, cfg: &NetworkConfig, scen: &ScenarioConfig) -> Vec<UavObservation> {
    let r = scen.region_m;
    state
        .uav_pos
        .iter()
        .zip(&state.members)
        .map(|(p, m)| UavObservation {
            own: [p.x_m / r, p.y_m / r],
            users: m
                .iter()
                .map(|&u| {
                    let t = &state.tasks[u];
                    let q = &state.mu_pos[u];
                    vec![
                        t.d_pre_bits / scen.task_bits_max,
                        t.c_min_cycles_per_s / cfg.c_mu_max,
                        q.x_m / r,
                        q.y_m / r,
                    ]
                })
                .collect(),
        })
        .collect()
}

pub(crate) struct Moved {
    pub positions: Vec<Position>,
    pub speeds: Vec<f64>,
}

/// Clamp each axis to `V_max * D`, shrink the step to that length, then keep
/// the UAV inside the region.
pub(crate) fn apply_moves(state: &WorldState, actions: &ActionSet, cfg: &NetworkConfig, scen: &ScenarioConfig) -> Moved {
    let max_step = cfg.max_step_m();
    let mut positions = Vec::with_capacity(state.uav_pos.len());
    let mut speeds = Vec::with_capacity(state.uav_pos.len());
    for (p, a) in state.uav_pos.iter().zip(&actions.uavs) {
        let mut dx = a.delta_xy[0].clamp(-max_step, max_step);
        let mut dy = a.delta_xy[1].clamp(-max_step, max_step);
        let len = dx.hypot(dy);
        if len > max_step {
            dx *= max_step / len;
            dy *= max_step / len;
        }
        let next = Position::new(p.x_m + dx, p.y_m + dy).clamp_to_region(scen.region_m);
        speeds.push(next.planar_distance(p) / cfg.slot_duration_s);
        positions.push(next);
    }
    Moved { positions, speeds }
}

fn mu_allocs(state: &WorldState, actions: &ActionSet) -> Vec<LinkAlloc> {
    let mut out = vec![LinkAlloc::default(); state.mu_pos.len()];
    for (a, m) in actions.uavs.iter().zip(&state.members) {
        for (k, &u) in m.iter().enumerate() {
            out[u] = LinkAlloc {
                omega_ul: a.omega_ul[k],
                omega_dl: a.omega_dl[k],
                p_dl_watt: a.p_dl[k],
                alpha: a.alpha[k],
            };
        }
    }
    out
}

/// CPU rates for this slot: the cached allocation when solving once per
/// episode, otherwise a fresh solve for the current offloading split.
pub(crate) fn cpu_allocation(
    state: &WorldState,
    actions: &ActionSet,
    cfg: &NetworkConfig,
    scen: &ScenarioConfig,
) -> crate::Result<CpuAlloc> {
    if !scen.p11_resolve_per_slot {
        if let Some(c) = &state.cpu_cache {
            return Ok(c.clone());
        }
    }
    let allocs = mu_allocs(state, actions);
    let mut splits = Vec::with_capacity(allocs.len());
    for (t, a) in state.tasks.iter().zip(&allocs) {
        let (d_in, d_mec) = net::split_task(a.alpha, t.d_pre_bits)?;
        splits.push((d_in, d_mec, t.c_min_cycles_per_s));
    }
    let problem = AllocProblem::new(cfg, &splits, &state.members);
    let sol = solve_p11(&problem)?;
    Ok(CpuAlloc {
        c_in: sol.c_in,
        c_mec: sol.c_mec,
    })
}

fn check_actions(state: &WorldState, actions: &ActionSet) -> Result<(), EnvError> {
    if actions.uavs.len() != state.num_uavs() {
        return Err(EnvError::UavCount {
            expected: state.num_uavs(),
            got: actions.uavs.len(),
        });
    }
    for (v, (a, m)) in actions.uavs.iter().zip(&state.members).enumerate() {
        for (field, xs) in [
            ("omega_ul", &a.omega_ul),
            ("omega_dl", &a.omega_dl),
            ("p_dl", &a.p_dl),
            ("alpha", &a.alpha),
        ] {
            if xs.len() != m.len() {
                return Err(EnvError::ActionShape {
                    uav: v,
                    field,
                    expected: m.len(),
                    got: xs.len(),
                });
            }
            if xs.iter().any(|x| !x.is_finite()) {
                return Err(EnvError::NonFinite { uav: v, field });
            }
        }
        if a.delta_xy.iter().any(|x| !x.is_finite()) {
            return Err(EnvError::NonFinite { uav: v, field: "delta_xy" });
        }
    }
    Ok(())
}

/// Advance one slot.
pub fn step(
    state: &mut WorldState,
    actions: &ActionSet,
    cfg: &NetworkConfig,
    scen: &ScenarioConfig,
) -> crate::Result<StepOutcome> {
    if state.slot >= scen.num_slots {
        return Err(EnvError::EpisodeOver(state.slot).into());
    }
    check_actions(state, actions)?;
    let moved = apply_moves(state, actions, cfg, scen);
    let cpu = cpu_allocation(state, actions, cfg, scen)?;
    if !scen.p11_resolve_per_slot && state.cpu_cache.is_none() {
        state.cpu_cache = Some(cpu.clone());
    }
    let allocs = mu_allocs(state, actions);
    let owner = state.owner();
    let mut mus = Vec::with_capacity(state.mu_pos.len());
    for u in 0..state.mu_pos.len() {
        let v = owner[u];
        let eval = net::evaluate_mu(
            moved.positions[v],
            state.mu_pos[u],
            &state.tasks[u],
            &allocs[u],
            cpu.c_in[u],
            cpu.c_mec[u],
            scen.infeasible_delay_s,
            cfg,
        )?;
        mus.push(MuRecord {
            mu: u,
            uav: v,
            d_pre_bits: state.tasks[u].d_pre_bits,
            alloc: allocs[u],
            c_in: cpu.c_in[u],
            c_mec: cpu.c_mec[u],
            eval,
        });
    }

    let mut utilities = Vec::with_capacity(state.num_uavs());
    let mut uav_metrics = Vec::with_capacity(state.num_uavs());
    for (v, m) in state.members.iter().enumerate() {
        let flight = net::flight_energy(moved.speeds[v], scen.flight_time_s, cfg)?;
        let recs: Vec<&MuRecord> = m.iter().map(|&u| &mus[u]).collect();
        let energies: Vec<_> = recs.iter().map(|r| r.eval.energies).collect();
        let delays: Vec<f64> = recs.iter().map(|r| r.eval.total_delay()).collect();
        let energy = net::total_energy(flight, &energies);
        let u_now = net::utility(energy, &delays, cfg);
        utilities.push(u_now);
        let sum = |f: &dyn Fn(&MuRecord) -> f64| recs.iter().map(|r| f(r)).sum::<f64>();
        let min = |f: &dyn Fn(&MuRecord) -> f64| recs.iter().map(|r| f(r)).fold(f64::INFINITY, f64::min);
        let mut slacks = action_slacks(&actions.uavs[v], cfg);
        let mec_sum = sum(&|r| r.c_mec);
        slacks.mec_cpu = recs.iter().fold(cfg.c_uav_max - mec_sum, |acc, r| {
            let c_min = state.tasks[r.mu].c_min_cycles_per_s;
            acc.min(r.c_mec - c_min).min(cfg.c_uav_max - r.c_mec)
        });
        slacks.local_cpu = recs.iter().fold(cfg.c_mu_max - cfg.c_mu_min, |acc, r| {
            let c_min = state.tasks[r.mu].c_min_cycles_per_s;
            acc.min(r.c_in - c_min).min(cfg.c_mu_max - r.c_in)
        });
        slacks.separation = reward::separation_slack(&moved.positions, v, cfg.l_min_m, scen.region_m);
        slacks.speed = cfg.v_max_mps - moved.speeds[v];
        let u_prev = state.u_prev.as_ref().map_or(u_now, |p| p[v]);
        let r = rewards(u_prev, u_now, &slacks, scen);
        let (min_ul, min_dl) = if recs.is_empty() {
            (0.0, 0.0)
        } else {
            (min(&|r| r.eval.rate_ul_bps), min(&|r| r.eval.rate_dl_bps))
        };
        uav_metrics.push(UavSlotMetrics {
            uav: v,
            x_m: moved.positions[v].x_m,
            y_m: moved.positions[v].y_m,
            speed_mps: moved.speeds[v],
            members: m.len(),
            utility: u_now,
            energy_total: energy,
            energy_flight: flight,
            energy_local: sum(&|r| r.eval.energies.local_comp),
            energy_ul: sum(&|r| r.eval.energies.uplink),
            energy_dl: sum(&|r| r.eval.energies.downlink),
            energy_mec: sum(&|r| r.eval.energies.mec_comp),
            delay_total: delays.iter().sum(),
            delay_local: sum(&|r| r.eval.delays.local_comp),
            delay_ul: sum(&|r| r.eval.delays.uplink),
            delay_mec: sum(&|r| r.eval.delays.mec_comp),
            delay_dl: sum(&|r| r.eval.delays.downlink),
            min_rate_ul_bps: min_ul,
            min_rate_dl_bps: min_dl,
            infeasible_links: recs.iter().map(|r| r.eval.infeasible_links).sum(),
            violations: slacks.violations().count(),
            slacks,
            rewards: r,
        });
    }

    let slot = state.slot;
    state.uav_pos = moved.positions;
    state.u_prev = Some(utilities);
    state.slot += 1;
    state.tasks = sample_tasks(&mut state.rng, state.mu_pos.len(), cfg, scen);
    debug_assert!(state.is_partition());
    Ok(StepOutcome {
        rewards: uav_metrics.iter().map(|m| m.rewards).collect(),
        metrics: SlotMetrics {
            slot,
            uavs: uav_metrics,
            mus,
        },
        done: state.slot == scen.num_slots,
    })
}

/// Owned world plus its configuration.
#[derive(Debug, Clone)]
pub struct Env {
    pub net: NetworkConfig,
    pub scen: ScenarioConfig,
    pub state: WorldState,
}

impl Env {
    pub fn new(net: NetworkConfig, scen: ScenarioConfig, seed: u64) -> Self {
        let state = reset(seed, &net, &scen);
        Self { net, scen, state }
    }

    pub fn reset(&mut self, seed: u64) {
        self.state = reset(seed, &self.net, &self.scen);
    }

    pub fn observe(&self) -> Vec<UavObservation> {
        observe(&self.state, &self.net, &self.scen)
    }

    pub fn step(&mut self, actions: &ActionSet) -> crate::Result<StepOutcome> {
        step(&mut self.state, actions, &self.net, &self.scen)
    }

    pub fn violation_report(&self, actions: &ActionSet) -> crate::Result<Vec<UavSlacks>> {
        violation_report(&self.state, actions, &self.net, &self.scen)
    }
}

//! CPU-cycle allocation at MUs and UAVs for fixed offloading splits.
//!
//! The objective is separable per device with one coupling budget per UAV:
//! each user contributes `eta * q * c^2 * beta * d + (1 - eta) * beta * d / c`.
//! Local rates have a clamped closed form. UAV rates follow from the KKT
//! conditions: a shared budget multiplier `mu` is bisected, and for each `mu`
//! every user's stationarity cubic `2 eta q beta d c^3 + mu c^2 - (1 - eta) beta d = 0`
//! is solved by Newton iteration from the right (the cubic is convex and
//! increasing on `c > 0`, so the iterates decrease monotonically onto the root).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::NetworkConfig;
use crate::net;
use crate::scalar::Scalar;

/// Relative tolerance on the budget equation.
pub const BUDGET_TOL: f64 = 1e-9;
/// Iteration cap of the multiplier bisection.
pub const MAX_BISECTION_ITERS: usize = 200;
/// Largest per-UAV instance the exhaustive oracle accepts.
pub const ORACLE_MAX_USERS: usize = 4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AllocError {
    #[error("UAV {uav}: minimum demands {required} exceed the CPU budget {budget}")]
    InfeasibleBudget { uav: usize, required: f64, budget: f64 },
    #[error("invalid bounds for user {user}: [{lo}, {hi}]")]
    InvalidBounds { user: usize, lo: f64, hi: f64 },
    #[error("grid oracle supports at most {max} users per UAV, got {got}")]
    OracleTooLarge { max: usize, got: usize },
    #[error("UAV index {0} out of range")]
    UnknownUav(usize),
}

/// Offloading split and CPU bounds of one MU.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UserDemand<F = f64> {
    pub d_in_bits: F,
    pub d_mec_bits: F,
    /// Lower bound on both local and UAV-side rates.
    pub c_min: F,
    /// Upper bound on the local rate.
    pub c_max_local: F,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UavBudget<F = f64> {
    pub c_max: F,
    /// Indices into `AllocProblem::users`.
    pub members: Vec<usize>,
}

/// The CPU-allocation subproblem for one slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocProblem<F = f64> {
    pub eta: F,
    pub beta_mu: F,
    pub q_mu: F,
    pub beta_uav: F,
    pub q_uav: F,
    pub users: Vec<UserDemand<F>>,
    pub uavs: Vec<UavBudget<F>>,
}

impl<F: Scalar> AllocProblem<F> {
    /// Build from per-MU `(d_in, d_mec, c_min)` and a membership list per UAV.
    pub fn new(cfg: &NetworkConfig<F>, splits: &[(F, F, F)], members: &[Vec<usize>]) -> Self {
        Self {
            eta: cfg.eta,
            beta_mu: cfg.beta_mu,
            q_mu: cfg.q_mu,
            beta_uav: cfg.beta_uav,
            q_uav: cfg.q_uav,
            users: splits
                .iter()
                .map(|&(d_in, d_mec, c_min)| UserDemand {
                    d_in_bits: d_in,
                    d_mec_bits: d_mec,
                    c_min,
                    c_max_local: cfg.c_mu_max,
                })
                .collect(),
            uavs: members
                .iter()
                .map(|m| UavBudget {
                    c_max: cfg.c_uav_max,
                    members: m.clone(),
                })
                .collect(),
        }
    }

    /// Network config carrying this problem's constants, for the net-model formulas.
    fn as_network(&self) -> NetworkConfig<F> {
        let mut cfg: NetworkConfig<F> = NetworkConfig::default().cast();
        cfg.eta = self.eta;
        cfg.beta_mu = self.beta_mu;
        cfg.q_mu = self.q_mu;
        cfg.beta_uav = self.beta_uav;
        cfg.q_uav = self.q_uav;
        cfg
    }

    fn check(&self) -> Result<(), AllocError> {
        for (i, u) in self.users.iter().enumerate() {
            if !(u.c_min > F::zero() && u.c_min <= u.c_max_local) {
                return Err(AllocError::InvalidBounds {
                    user: i,
                    lo: u.c_min.as_f64(),
                    hi: u.c_max_local.as_f64(),
                });
            }
        }
        for (v, uav) in self.uavs.iter().enumerate() {
            let required: F = uav.members.iter().map(|&m| self.users[m].c_min).sum();
            if required > uav.c_max {
                return Err(AllocError::InfeasibleBudget {
                    uav: v,
                    required: required.as_f64(),
                    budget: uav.c_max.as_f64(),
                });
            }
        }
        Ok(())
    }

    /// P1.1 objective: computation energy and delay terms, weighted by eta.
    pub fn objective(&self, c_in: &[F], c_mec: &[F]) -> F {
        let cfg = self.as_network();
        let one = F::one();
        self.users
            .iter()
            .enumerate()
            .map(|(i, u)| {
                let local_e = net::local_energy(u.d_in_bits, c_in[i], &cfg).unwrap_or(F::infinity());
                let local_t = net::local_delay(u.d_in_bits, c_in[i], &cfg).unwrap_or(F::infinity());
                let mec_e = net::mec_energy(u.d_mec_bits, c_mec[i], &cfg).unwrap_or(F::infinity());
                let mec_t = net::mec_delay(u.d_mec_bits, c_mec[i], &cfg).unwrap_or(F::infinity());
                self.eta * (local_e + mec_e) + (one - self.eta) * (local_t + mec_t)
            })
            .sum()
    }
}

/// Per-user cost coefficients: `energy_coef * c^2 + delay_coef / c`.
#[derive(Debug, Clone, Copy)]
struct CubicCost<F> {
    energy_coef: F,
    delay_coef: F,
}

impl<F: Scalar> CubicCost<F> {
    fn new(eta: F, q: F, beta: F, bits: F) -> Self {
        Self {
            energy_coef: eta * q * beta * bits,
            delay_coef: (F::one() - eta) * beta * bits,
        }
    }

    fn is_flat(&self) -> bool {
        self.energy_coef == F::zero() && self.delay_coef == F::zero()
    }

    fn derivative(&self, c: F) -> F {
        F::lit(2.0) * self.energy_coef * c - self.delay_coef / (c * c)
    }

    /// Minimiser of `cost(c) + mu * c` over `[lo, hi]`.
    fn argmin(&self, mu: F, lo: F, hi: F) -> F {
        if self.is_flat() {
            return lo;
        }
        let two = F::lit(2.0);
        let a = two * self.energy_coef;
        let b = self.delay_coef;
        if b == F::zero() {
            return lo;
        }
        // Right end of a bracket containing the root of a c^3 + mu c^2 - b.
        let mut start = F::infinity();
        if a > F::zero() {
            start = start.min((b / a).cbrt());
        }
        if mu > F::zero() {
            start = start.min((b / mu).sqrt());
        }
        if !start.is_finite() {
            return hi;
        }
        if start <= lo {
            return lo;
        }
        // The root lies below `start`; if `hi` is already left of it, check the sign there.
        let phi = |c: F| a * c * c * c + mu * c * c - b;
        let mut c = start;
        if hi < c {
            if phi(hi) <= F::zero() {
                return hi;
            }
            c = hi;
        }
        if phi(lo) >= F::zero() {
            return lo;
        }
        for _ in 0..100 {
            let slope = F::lit(3.0) * a * c * c + two * mu * c;
            let next = c - phi(c) / slope;
            let next = next.max(lo);
            if (c - next).abs() <= F::epsilon() * c {
                c = next;
                break;
            }
            c = next;
        }
        c.max(lo).min(hi)
    }
}

/// Optimal local CPU rate for `d_in` bits within `[c_min, c_max]`.
///
/// Interior optimum `((1 - eta) / (2 eta q))^(1/3)` clamped to the bounds; a
/// zero-size task takes the lower bound.
pub fn optimal_local_cpu<F: Scalar>(d_in: F, cfg: &NetworkConfig<F>, bounds: (F, F)) -> F {
    let (lo, hi) = bounds;
    if d_in == F::zero() {
        return lo;
    }
    CubicCost::new(cfg.eta, cfg.q_mu, cfg.beta_mu, d_in).argmin(F::zero(), lo, hi)
}

/// UAV-side allocation for one UAV, in member order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MecAllocation<F = f64> {
    pub c_mec: Vec<F>,
    /// Budget multiplier; zero when the budget is slack.
    pub multiplier: F,
    pub iterations: usize,
}

/// KKT allocation of one UAV's CPU budget over its members.
pub fn optimal_mec_cpu<F: Scalar>(problem: &AllocProblem<F>, uav_id: usize) -> Result<MecAllocation<F>, AllocError> {
    let uav = problem.uavs.get(uav_id).ok_or(AllocError::UnknownUav(uav_id))?;
    let budget = uav.c_max;
    let lows: Vec<F> = uav.members.iter().map(|&m| problem.users[m].c_min).collect();
    let required: F = lows.iter().copied().sum();
    if required > budget {
        return Err(AllocError::InfeasibleBudget {
            uav: uav_id,
            required: required.as_f64(),
            budget: budget.as_f64(),
        });
    }
    let costs: Vec<CubicCost<F>> = uav
        .members
        .iter()
        .map(|&m| CubicCost::new(problem.eta, problem.q_uav, problem.beta_uav, problem.users[m].d_mec_bits))
        .collect();
    let alloc_at = |mu: F| -> Vec<F> {
        costs
            .iter()
            .zip(&lows)
            .map(|(cost, &lo)| cost.argmin(mu, lo, budget))
            .collect()
    };
    let total = |c: &[F]| -> F { c.iter().copied().sum() };

    let free = alloc_at(F::zero());
    if total(&free) <= budget {
        return Ok(MecAllocation {
            c_mec: free,
            multiplier: F::zero(),
            iterations: 0,
        });
    }
    // Every user sits at its lower bound once mu reaches mu_hi.
    let mut mu_hi = F::zero();
    for (cost, &lo) in costs.iter().zip(&lows) {
        if !cost.is_flat() {
            let m = (cost.delay_coef - F::lit(2.0) * cost.energy_coef * lo * lo * lo) / (lo * lo);
            mu_hi = mu_hi.max(m);
        }
    }
    let mut mu_lo = F::zero();
    let tol = F::lit(BUDGET_TOL) * budget;
    let mut best = alloc_at(mu_hi);
    let mut iterations = 0;
    while iterations < MAX_BISECTION_ITERS {
        if budget - total(&best) <= tol {
            break;
        }
        iterations += 1;
        let mid = F::lit(0.5) * (mu_lo + mu_hi);
        if mid <= mu_lo || mid >= mu_hi {
            break;
        }
        let c = alloc_at(mid);
        if total(&c) > budget {
            mu_lo = mid;
        } else {
            mu_hi = mid;
            best = c;
        }
    }
    Ok(MecAllocation {
        c_mec: best,
        multiplier: mu_hi,
        iterations,
    })
}

/// Optimal CPU rates for every MU (local) and every MU at its UAV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocSolution<F = f64> {
    /// Local rate per MU.
    pub c_in: Vec<F>,
    /// UAV-side rate per MU (served by the UAV whose member list contains it).
    pub c_mec: Vec<F>,
    /// Budget multiplier per UAV.
    pub multipliers: Vec<F>,
    pub objective: F,
}

/// Solve the whole slot: closed-form local rates, KKT UAV rates.
pub fn solve_p11<F: Scalar>(problem: &AllocProblem<F>) -> Result<AllocSolution<F>, AllocError> {
    problem.check()?;
    let cfg = problem.as_network();
    let c_in: Vec<F> = problem
        .users
        .iter()
        .map(|u| optimal_local_cpu(u.d_in_bits, &cfg, (u.c_min, u.c_max_local)))
        .collect();
    let mut c_mec: Vec<F> = problem.users.iter().map(|u| u.c_min).collect();
    let mut multipliers = Vec::with_capacity(problem.uavs.len());
    for (v, uav) in problem.uavs.iter().enumerate() {
        let a = optimal_mec_cpu(problem, v)?;
        for (&m, c) in uav.members.iter().zip(a.c_mec) {
            c_mec[m] = c;
        }
        multipliers.push(a.multiplier);
    }
    let objective = problem.objective(&c_in, &c_mec);
    Ok(AllocSolution {
        c_in,
        c_mec,
        multipliers,
        objective,
    })
}

/// Worst relative KKT residuals of a solution.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct KktReport {
    pub stationarity: f64,
    pub primal: f64,
    pub complementarity: f64,
}

impl KktReport {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.complementarity)
    }
}

fn bound_residual<F: Scalar>(grad: F, c: F, lo: F, hi: F, scale: F) -> f64 {
    let r = if c <= lo {
        (-grad).max(F::zero())
    } else if c >= hi {
        grad.max(F::zero())
    } else {
        grad.abs()
    };
    if scale > F::zero() {
        (r / scale).as_f64()
    } else {
        r.as_f64()
    }
}

/// Stationarity, primal feasibility and complementary slackness residuals.
pub fn kkt_residuals<F: Scalar>(problem: &AllocProblem<F>, sol: &AllocSolution<F>) -> KktReport {
    let mut rep = KktReport::default();
    for (i, u) in problem.users.iter().enumerate() {
        let cost = CubicCost::new(problem.eta, problem.q_mu, problem.beta_mu, u.d_in_bits);
        let c = sol.c_in[i];
        let g = cost.derivative(c);
        let scale = (F::lit(2.0) * cost.energy_coef * c).abs() + (cost.delay_coef / (c * c)).abs();
        rep.stationarity = rep.stationarity.max(bound_residual(g, c, u.c_min, u.c_max_local, scale));
        let below = ((u.c_min - c) / u.c_min).max(F::zero()).as_f64();
        let above = ((c - u.c_max_local) / u.c_max_local).max(F::zero()).as_f64();
        rep.primal = rep.primal.max(below).max(above);
    }
    for (v, uav) in problem.uavs.iter().enumerate() {
        let mu = sol.multipliers[v];
        let mut sum = F::zero();
        for &m in &uav.members {
            let u = &problem.users[m];
            let cost = CubicCost::new(problem.eta, problem.q_uav, problem.beta_uav, u.d_mec_bits);
            let c = sol.c_mec[m];
            sum = sum + c;
            let g = cost.derivative(c) + mu;
            let scale = (F::lit(2.0) * cost.energy_coef * c).abs() + (cost.delay_coef / (c * c)).abs() + mu.abs();
            rep.stationarity = rep.stationarity.max(bound_residual(g, c, u.c_min, uav.c_max, scale));
            let below = ((u.c_min - c) / u.c_min).max(F::zero()).as_f64();
            rep.primal = rep.primal.max(below);
        }
        let slack = (uav.c_max - sum) / uav.c_max;
        rep.primal = rep.primal.max((-slack).max(F::zero()).as_f64());
        if mu > F::zero() {
            rep.complementarity = rep.complementarity.max(slack.abs().as_f64());
        }
        if mu < F::zero() {
            rep.stationarity = f64::INFINITY;
        }
    }
    rep
}

fn grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n <= 1 || hi <= lo {
        return vec![lo];
    }
    (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
}

/// Exhaustive grid search (test oracle). Local rates are searched per user on
/// a 1-D grid; UAV rates on the product grid restricted to the budget.
pub fn brute_force_alloc(problem: &AllocProblem<f64>, grid_points_per_dim: usize) -> Result<AllocSolution<f64>, AllocError> {
    refined_grid_alloc(problem, grid_points_per_dim, 1)
}

/// Grid search repeated `levels` times, each level zooming onto a window of
/// two cells around the previous best point.
pub fn refined_grid_alloc(
    problem: &AllocProblem<f64>,
    grid_points_per_dim: usize,
    levels: usize,
) -> Result<AllocSolution<f64>, AllocError> {
    problem.check()?;
    for uav in &problem.uavs {
        if uav.members.len() > ORACLE_MAX_USERS {
            return Err(AllocError::OracleTooLarge {
                max: ORACLE_MAX_USERS,
                got: uav.members.len(),
            });
        }
    }
    let n = grid_points_per_dim.max(1);
    let levels = levels.max(1);
    let mut c_in = Vec::with_capacity(problem.users.len());
    for u in &problem.users {
        let cost = |c: f64| {
            let k = CubicCost::new(problem.eta, problem.q_mu, problem.beta_mu, u.d_in_bits);
            k.energy_coef * c * c + k.delay_coef / c
        };
        let (mut lo, mut hi) = (u.c_min, u.c_max_local);
        let mut best = u.c_min;
        for _ in 0..levels {
            let pts = grid(lo, hi, n);
            best = pts.iter().copied().fold(pts[0], |b, c| if cost(c) < cost(b) { c } else { b });
            let cell = if n > 1 { (hi - lo) / (n - 1) as f64 } else { 0.0 };
            lo = (best - 2.0 * cell).max(u.c_min);
            hi = (best + 2.0 * cell).min(u.c_max_local);
        }
        c_in.push(best);
    }
    let mut c_mec: Vec<f64> = problem.users.iter().map(|u| u.c_min).collect();
    for uav in &problem.uavs {
        let k = uav.members.len();
        if k == 0 {
            continue;
        }
        let costs: Vec<CubicCost<f64>> = uav
            .members
            .iter()
            .map(|&m| CubicCost::new(problem.eta, problem.q_uav, problem.beta_uav, problem.users[m].d_mec_bits))
            .collect();
        let eval = |c: &[f64]| -> f64 {
            costs
                .iter()
                .zip(c)
                .map(|(k, &c)| k.energy_coef * c * c + k.delay_coef / c)
                .sum()
        };
        let mut windows: Vec<(f64, f64)> = uav
            .members
            .iter()
            .map(|&m| (problem.users[m].c_min, uav.c_max))
            .collect();
        let mut best: Vec<f64> = uav.members.iter().map(|&m| problem.users[m].c_min).collect();
        let mut best_val = eval(&best);
        for _ in 0..levels {
            let axes: Vec<Vec<f64>> = windows.iter().map(|&(lo, hi)| grid(lo, hi, n)).collect();
            let mut idx = vec![0usize; k];
            let mut point = vec![0.0; k];
            'outer: loop {
                for d in 0..k {
                    point[d] = axes[d][idx[d]];
                }
                if point.iter().sum::<f64>() <= uav.c_max {
                    let v = eval(&point);
                    if v < best_val {
                        best_val = v;
                        best.copy_from_slice(&point);
                    }
                }
                for d in (0..k).rev() {
                    idx[d] += 1;
                    if idx[d] < axes[d].len() {
                        continue 'outer;
                    }
                    idx[d] = 0;
                }
                break;
            }
            for (d, &m) in uav.members.iter().enumerate() {
                let (lo, hi) = windows[d];
                let cell = if n > 1 { (hi - lo) / (n - 1) as f64 } else { 0.0 };
                windows[d] = (
                    (best[d] - 2.0 * cell).max(problem.users[m].c_min),
                    (best[d] + 2.0 * cell).min(uav.c_max),
                );
            }
        }
        for (d, &m) in uav.members.iter().enumerate() {
            c_mec[m] = best[d];
        }
    }
    let objective = problem.objective(&c_in, &c_mec);
    Ok(AllocSolution {
        c_in,
        c_mec,
        multipliers: vec![0.0; problem.uavs.len()],
        objective,
    })
}

//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.
//!
//! The learning criteria train five micro-profile runs; expect a few minutes
//! on one core.

use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use skymec::alloc::{kkt_residuals, solve_p11, AllocProblem, UavBudget, UserDemand};
use skymec::env::{self, ActionSet, FairnessKind, UavAction, WorldState};
use skymec::net::{self, LinkAlloc, Position, Task};
use skymec::nn::{GaussianPolicy, Graph, MhaEncoder, Mlp, NodeId, ParamStore, Tensor};
use skymec::ppo::{clipped_surrogate, compute_gae, ppo_loss, LossInputs};
use skymec::trainer::{evaluate, evaluate_policy, sweep_alpha_fixed, train, Algo, EvalPolicy, TrainOptions};
use skymec::{NetworkConfig, RunConfig};

type Check = Result<String, String>;

fn run(name: &str, f: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    let (tag, detail, ok) = match outcome {
        Ok(d) => ("PASS", d, true),
        Err(d) => ("FAIL", d, false),
    };
    println!("{tag} {name}: {detail} [{secs:.2}s]");
    ok
}

fn within(limit: Duration, start: Instant, detail: String) -> Check {
    let took = start.elapsed();
    if took <= limit {
        Ok(detail)
    } else {
        Err(format!("{detail}; took {took:?}, limit {limit:?}"))
    }
}

fn num(v: &Value) -> f64 {
    v.as_str().expect("numbers are stored as strings").parse().expect("valid float")
}

fn rel_err(got: f64, want: f64) -> f64 {
    if want == 0.0 {
        got.abs()
    } else {
        ((got - want) / want).abs()
    }
}

fn physics_oracle() -> Check {
    let data: Value = serde_json::from_str(include_str!("data/physics_oracle.json")).unwrap();
    let start = Instant::now();
    let cases = data["cases"].as_array().unwrap();
    let mut worst = (0.0f64, String::new());
    let mut checked = 0usize;
    let mut note = |got: f64, want: f64, what: &str, case: usize| {
        let e = rel_err(got, want);
        checked += 1;
        if e > worst.0 || !e.is_finite() {
            worst = (e, format!("case {case} {what}"));
        }
    };
    for (ci, c) in cases.iter().enumerate() {
        let n = &c["network"];
        let mut cfg = NetworkConfig::default();
        cfg.noise_psd_dbm_per_hz = num(&n["noise_psd_dbm_per_hz"]);
        cfg.p_ul_watt = num(&n["p_ul_watt"]);
        cfg.absorption_a = num(&n["absorption_a"]);
        cfg.bandwidth_hz = num(&n["bandwidth_hz"]);
        cfg.gain_ref_db = num(&n["gain_ref_db"]);
        cfg.altitude_m = num(&n["altitude_m"]);
        cfg.eta = num(&n["eta"]);
        cfg.beta_mu = num(&n["beta_mu"]);
        cfg.beta_uav = num(&n["beta_uav"]);
        cfg.q_mu = num(&n["q_mu"]);
        cfg.q_uav = num(&n["q_uav"]);
        cfg.delta_prog = num(&n["delta_prog"]);
        cfg.c1 = num(&n["c1"]);
        cfg.c2 = num(&n["c2"]);
        let uav = Position::new(num(&c["uav"][0]), num(&c["uav"][1]));
        let exp = &c["expected"];
        let mut energies = Vec::new();
        let mut delays = Vec::new();
        for (j, mu) in c["mus"].as_array().unwrap().iter().enumerate() {
            let pos = Position::new(num(&mu["pos"][0]), num(&mu["pos"][1]));
            let task = Task {
                d_pre_bits: num(&mu["d_pre"]),
                c_min_cycles_per_s: 1e8,
            };
            let alloc = LinkAlloc {
                omega_ul: num(&mu["omega_ul"]),
                omega_dl: num(&mu["omega_dl"]),
                p_dl_watt: num(&mu["p_dl"]),
                alpha: num(&mu["alpha"]),
            };
            let (c_in, c_mec) = (num(&mu["c_in"]), num(&mu["c_mec"]));
            let ev = net::evaluate_mu(uav, pos, &task, &alloc, c_in, c_mec, 10.0, &cfg).map_err(|e| e.to_string())?;
            let want = &exp["mus"][j];
            let w = |k: &str| num(&want[k]);
            for (what, got, key) in [
                ("distance", ev.distance_m, "distance"),
                ("d_in", ev.d_in_bits, "d_in"),
                ("d_mec", ev.d_mec_bits, "d_mec"),
                ("d_post", ev.d_post_bits, "d_post"),
                ("rate_ul", ev.rate_ul_bps, "rate_ul"),
                ("rate_dl", ev.rate_dl_bps, "rate_dl"),
                ("t_local", ev.delays.local_comp, "t_local"),
                ("t_ul", ev.delays.uplink, "t_ul"),
                ("t_mec", ev.delays.mec_comp, "t_mec"),
                ("t_dl", ev.delays.downlink, "t_dl"),
                ("t_total", ev.total_delay(), "t_total"),
                ("e_local", ev.energies.local_comp, "e_local"),
                ("e_ul", ev.energies.uplink, "e_ul"),
                ("e_mec", ev.energies.mec_comp, "e_mec"),
                ("e_dl", ev.energies.downlink, "e_dl"),
            ] {
                note(got, w(key), what, ci);
            }
            note(net::link_distance(uav, pos, &cfg), w("distance"), "link_distance", ci);
            let rate_ul = net::uplink_rate(alloc.omega_ul, ev.distance_m, &cfg).unwrap();
            note(rate_ul, w("rate_ul"), "uplink_rate", ci);
            let rate_dl = net::downlink_rate(alloc.omega_dl, alloc.p_dl_watt, ev.distance_m, &cfg).unwrap();
            note(rate_dl, w("rate_dl"), "downlink_rate", ci);
            energies.push(ev.energies);
            delays.push(ev.total_delay());
        }
        let flight = net::flight_energy(num(&c["speed"]), num(&c["t_fly"]), &cfg).unwrap();
        note(flight, num(&exp["e_flight"]), "e_flight", ci);
        let total = net::total_energy(flight, &energies);
        note(total, num(&exp["e_total"]), "e_total", ci);
        note(net::utility(total, &delays, &cfg), num(&exp["utility"]), "utility", ci);
    }
    let detail = format!("{} configs, {checked} values, worst rel err {:.2e} ({})", cases.len(), worst.0, worst.1);
    if cases.len() < 100 || !(worst.0 <= 1e-12) {
        return Err(detail);
    }
    within(Duration::from_secs(1), start, detail)
}

/// Independent grid search on the CPU-allocation objective.
fn grid_oracle(p: &AllocProblem, n: usize, levels: usize) -> f64 {
    let term = |q: f64, beta: f64, d: f64, c: f64| p.eta * q * c * c * beta * d + (1.0 - p.eta) * beta * d / c;
    let axis = |lo: f64, hi: f64| -> Vec<f64> { (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect() };
    let mut total = 0.0;
    for u in &p.users {
        let f = |c: f64| term(p.q_mu, p.beta_mu, u.d_in_bits, c);
        let (mut lo, mut hi) = (u.c_min, u.c_max_local);
        let mut best = lo;
        for _ in 0..levels {
            let cell = (hi - lo) / (n - 1) as f64;
            best = axis(lo, hi).into_iter().fold(best, |b, c| if f(c) < f(b) { c } else { b });
            lo = (best - 2.0 * cell).max(u.c_min);
            hi = (best + 2.0 * cell).min(u.c_max_local);
        }
        total += f(best);
    }
    for uav in &p.uavs {
        let users: Vec<&UserDemand> = uav.members.iter().map(|&m| &p.users[m]).collect();
        if users.is_empty() {
            continue;
        }
        let cost = |c: &[f64]| -> f64 {
            users
                .iter()
                .zip(c)
                .map(|(u, &c)| term(p.q_uav, p.beta_uav, u.d_mec_bits, c))
                .sum()
        };
        let mut windows: Vec<(f64, f64)> = users.iter().map(|u| (u.c_min, uav.c_max)).collect();
        let mut best: Vec<f64> = users.iter().map(|u| u.c_min).collect();
        let mut best_val = cost(&best);
        for _ in 0..levels {
            let axes: Vec<Vec<f64>> = windows.iter().map(|&(lo, hi)| axis(lo, hi)).collect();
            let k = users.len();
            let mut idx = vec![0usize; k];
            loop {
                let point: Vec<f64> = (0..k).map(|d| axes[d][idx[d]]).collect();
                if point.iter().sum::<f64>() <= uav.c_max {
                    let v = cost(&point);
                    if v < best_val {
                        best_val = v;
                        best = point;
                    }
                }
                let mut d = k;
                while d > 0 {
                    d -= 1;
                    idx[d] += 1;
                    if idx[d] < n {
                        break;
                    }
                    idx[d] = 0;
                    if d == 0 {
                        d = usize::MAX;
                        break;
                    }
                }
                if d == usize::MAX {
                    break;
                }
            }
            for (d, u) in users.iter().enumerate() {
                let (lo, hi) = windows[d];
                let cell = (hi - lo) / (n - 1) as f64;
                windows[d] = ((best[d] - 2.0 * cell).max(u.c_min), (best[d] + 2.0 * cell).min(uav.c_max));
            }
        }
        total += best_val;
    }
    total
}

fn convex_oracle() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let base = NetworkConfig::default();
    let mut worst_kkt = 0.0f64;
    let mut worst_gap = f64::NEG_INFINITY;
    let mut tight = 0;
    for _ in 0..50 {
        let k = rng.random_range(1..=3usize);
        let users: Vec<UserDemand> = (0..k)
            .map(|_| {
                let d = rng.random_range(1e5..1e6);
                let a: f64 = rng.random_range(0.05..1.0);
                UserDemand {
                    d_in_bits: d * (1.0 - a),
                    d_mec_bits: d * a,
                    c_min: rng.random_range(1e8..5e8),
                    c_max_local: base.c_mu_max,
                }
            })
            .collect();
        let need: f64 = users.iter().map(|u| u.c_min).sum();
        // Budgets from barely feasible to slack.
        let c_max = need * rng.random_range(1.05..8.0);
        let problem = AllocProblem {
            eta: rng.random_range(0.1..0.9),
            beta_mu: base.beta_mu,
            q_mu: base.q_mu * rng.random_range(0.5..20.0),
            beta_uav: base.beta_uav,
            q_uav: base.q_uav * rng.random_range(0.5..20.0),
            users,
            uavs: vec![UavBudget {
                c_max,
                members: (0..k).collect(),
            }],
        };
        let sol = solve_p11(&problem).map_err(|e| e.to_string())?;
        let kkt = kkt_residuals(&problem, &sol).max();
        worst_kkt = worst_kkt.max(kkt);
        if sol.multipliers[0] > 0.0 {
            tight += 1;
        }
        let oracle = grid_oracle(&problem, 40, 6);
        // The grid only visits feasible points, so it bounds the optimum from above.
        let gap = (sol.objective - oracle) / oracle.abs();
        worst_gap = worst_gap.max(gap);
    }
    let detail = format!("50 instances ({tight} with a binding budget), worst KKT residual {worst_kkt:.2e}, worst (solver - grid)/grid {worst_gap:.2e}");
    if !(worst_kkt <= 1e-8) || !(worst_gap <= 1e-9) {
        return Err(detail);
    }
    within(Duration::from_secs(30), start, detail)
}

/// Largest relative difference between backprop and central differences
/// over every parameter entry of `store`.
fn grad_check(store: &mut ParamStore<f64>, build: &dyn Fn(&mut Graph<f64>, &ParamStore<f64>) -> NodeId) -> f64 {
    let mut g = Graph::new();
    let loss = build(&mut g, store);
    g.backward(loss).unwrap();
    store.zero_grads();
    g.accumulate_param_grads(store);
    let ids: Vec<_> = store.ids().collect();
    let eval = |s: &ParamStore<f64>| {
        let mut g = Graph::new();
        let l = build(&mut g, s);
        g.value(l).data()[0]
    };
    let mut worst = 0.0f64;
    for id in ids {
        for i in 0..store.value(id).len() {
            let analytic = store.grad(id).data()[i];
            let x = store.value(id).data()[i];
            let h = 1e-6 * x.abs().max(1.0);
            store.value_mut(id).data_mut()[i] = x + h;
            let up = eval(store);
            store.value_mut(id).data_mut()[i] = x - h;
            let down = eval(store);
            store.value_mut(id).data_mut()[i] = x;
            let numeric = (up - down) / (2.0 * h);
            let scale = analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((analytic - numeric).abs() / scale);
        }
    }
    worst
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn random_sets(rng: &mut ChaCha8Rng, batch: usize, max_users: usize, dim: usize) -> Vec<Vec<Vec<f64>>> {
    (0..batch)
        .map(|b| {
            let n = (b % max_users) + 1;
            (0..n).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
        })
        .collect()
}

/// Weighted sum so every output entry carries its own gradient.
fn project_to_scalar(g: &mut Graph<f64>, x: NodeId, w: &Tensor<f64>) -> NodeId {
    let wi = g.input(w.clone());
    let prod = g.mul(x, wi).unwrap();
    g.sum(prod)
}

fn gradient_checks() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut results = Vec::new();

    // MLP
    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, "mlp", 6, 10, 2, 3, 1.0, &mut rng);
    let x = random_tensor(&mut rng, &[4, 6]);
    let w = random_tensor(&mut rng, &[4, 3]);
    results.push((
        "mlp",
        grad_check(&mut store, &|g, s| {
            let xi = g.input(x.clone());
            let y = mlp.forward(g, s, xi).unwrap();
            project_to_scalar(g, y, &w)
        }),
    ));

    // Set encoder
    let mut store = ParamStore::new();
    let enc = MhaEncoder::new(&mut store, "enc", 4, 3, 5, &mut rng);
    let sets = random_sets(&mut rng, 4, 4, 3);
    let w = random_tensor(&mut rng, &[4, 20]);
    results.push((
        "mha encoder",
        grad_check(&mut store, &|g, s| {
            let y = enc.encode(g, s, &sets).unwrap();
            project_to_scalar(g, y, &w)
        }),
    ));

    // Gaussian head: log-probability and entropy with a masked dimension.
    let mut store = ParamStore::new();
    let head = Mlp::new(&mut store, "mean", 5, 8, 1, 3, 1.0, &mut rng);
    let pi = GaussianPolicy::new(&mut store, "pi", 3, -0.4);
    let x = random_tensor(&mut rng, &[6, 5]);
    let z = random_tensor(&mut rng, &[6, 3]);
    let mask = Tensor::from_vec(&[6, 3], (0..18).map(|i| if i % 5 == 4 { 0.0 } else { 1.0 }).collect()).unwrap();
    results.push((
        "gaussian head",
        grad_check(&mut store, &|g, s| {
            let xi = g.input(x.clone());
            let mean = head.forward(g, s, xi).unwrap();
            let lp = pi.log_prob(g, s, mean, z.clone(), mask.clone()).unwrap();
            let ent = pi.entropy(g, s, mask.clone()).unwrap();
            let a = g.sum(lp);
            let b = g.sum(ent);
            let b = g.scale(b, 0.3);
            g.add(a, b).unwrap()
        }),
    ));

    // Full loss: encoder -> actor and critic -> clipped objective.
    let mut store = ParamStore::new();
    let enc = MhaEncoder::new(&mut store, "enc", 3, 4, 4, &mut rng);
    let actor = Mlp::new(&mut store, "actor", 12, 8, 2, 2, 1.0, &mut rng);
    let critic = Mlp::new(&mut store, "critic", 12, 8, 2, 1, 1.0, &mut rng);
    let pi = GaussianPolicy::new(&mut store, "pi", 2, -0.3);
    let b = 8;
    let sets = random_sets(&mut rng, b, 3, 4);
    let z = random_tensor(&mut rng, &[b, 2]);
    let mask = Tensor::full(&[b, 2], 1.0);
    let forward = |g: &mut Graph<f64>, s: &ParamStore<f64>| {
        let e = enc.encode(g, s, &sets).unwrap();
        let mean = actor.forward(g, s, e).unwrap();
        let lp = pi.log_prob(g, s, mean, z.clone(), mask.clone()).unwrap();
        let v = critic.forward(g, s, e).unwrap();
        let v = g.sum_cols(v);
        let ent = pi.entropy(g, s, mask.clone()).unwrap();
        (lp, v, ent)
    };
    // Old log-probabilities offset so ratios sit well inside and well outside the clip band.
    let current = {
        let mut g = Graph::new();
        let (lp, _, _) = forward(&mut g, &store);
        g.value(lp).data().to_vec()
    };
    let offsets = [0.5, 0.05, -0.05, -0.5];
    let old: Vec<f64> = current.iter().enumerate().map(|(i, &l)| l - offsets[i % 4]).collect();
    let adv: Vec<f64> = (0..b).map(|i| if i % 3 == 0 { -1.0 } else { 0.7 } * (1.0 + i as f64 * 0.1)).collect();
    let ret: Vec<f64> = (0..b).map(|_| rng.random_range(-2.0..2.0)).collect();
    let mut hyper = RunConfig::profile("micro").unwrap().ppo;
    hyper.entropy_coef = 0.01;
    results.push((
        "ppo loss",
        grad_check(&mut store, &|g, s| {
            let (lp, v, ent) = forward(g, s);
            let inputs = LossInputs {
                log_prob: lp,
                value: v,
                entropy: ent,
                old_log_prob: &old,
                advantages: &adv,
                returns: &ret,
            };
            ppo_loss(g, inputs, &hyper).unwrap().0
        }),
    ));

    let worst = results.iter().map(|r| r.1).fold(0.0, f64::max);
    let detail = results
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    if !(worst <= 1e-4) {
        return Err(detail);
    }
    within(Duration::from_secs(60), start, format!("max rel err: {detail}"))
}

fn gae_and_clip() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for trial in 0..200 {
        let n = rng.random_range(1..40usize);
        let gamma = rng.random_range(0.5..1.0);
        let lambda = rng.random_range(0.0..1.0);
        let rewards: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let values: Vec<f64> = (0..=n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let dones: Vec<bool> = (0..n).map(|i| i + 1 == n && trial % 2 == 0 || rng.random_bool(0.05)).collect();
        let (adv, ret) = compute_gae(&rewards, &values, &dones, gamma, lambda).unwrap();
        for t in 0..n {
            // Direct truncated sum up to the first episode end at or after t.
            let mut direct = 0.0;
            let mut w = 1.0;
            for l in t..n {
                let boot = if dones[l] { 0.0 } else { gamma * values[l + 1] };
                direct += w * (rewards[l] + boot - values[l]);
                if dones[l] {
                    break;
                }
                w *= gamma * lambda;
            }
            worst = worst.max((adv[t] - direct).abs());
            worst = worst.max((ret[t] - (direct + values[t])).abs());
        }
    }
    let clip_cases = [
        (1.3, 1.0, 0.2, 1.2),
        (0.5, -1.0, 0.2, -0.8),
        (1.0, 2.5, 0.2, 2.5),
        (1.0, -0.7, 0.2, -0.7),
        (0.7, 1.0, 0.2, 0.7),
        (1.5, -1.0, 0.2, -1.5),
    ];
    let mut clip_ok = clip_cases.iter().all(|&(r, a, e, want)| clipped_surrogate(r, a, e) == want);
    for _ in 0..1000 {
        let r = rng.random_range(0.0..3.0);
        let a = rng.random_range(-3.0..3.0);
        clip_ok &= clipped_surrogate(r, a, 0.2) <= r * a;
    }
    let detail = format!("200 random trajectories, worst abs diff {worst:.1e}; clip examples exact: {clip_ok}");
    if worst <= 1e-10 && clip_ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn mha_size_invariance() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (m, d, k) = (8, 4, 6);
    let mut store = ParamStore::new();
    let enc = MhaEncoder::new(&mut store, "enc", m, d, k, &mut rng);
    let users: Vec<Vec<f64>> = (0..m).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    for n in 0..=m {
        let out = enc.encode_values(&store, &[users[..n].to_vec()]).unwrap();
        if out.shape() != [1, m * k] {
            return Err(format!("{n} users gave shape {:?}", out.shape()));
        }
        if out.data()[n * k..].iter().any(|&x| x != 0.0) {
            return Err(format!("{n} users: padding slots are not zero"));
        }
        if n == 0 {
            continue;
        }
        // Same weights for the first n slots, no padding at all.
        let mut small = ParamStore::new();
        let tight = MhaEncoder::new(&mut small, "enc", n, d, k, &mut rng);
        for (dst, src) in small.ids().collect::<Vec<_>>().into_iter().zip(store.ids().collect::<Vec<_>>()) {
            let len = n * d * k;
            small.value_mut(dst).data_mut().copy_from_slice(&store.value(src).data()[..len]);
        }
        let unpadded = tight.encode_values(&small, &[users[..n].to_vec()]).unwrap();
        if unpadded.data() != &out.data()[..n * k] {
            return Err(format!("{n} users: padded and unpadded encodings differ"));
        }
        let mut g = Graph::new();
        let node = enc.encode(&mut g, &store, &[users[..n].to_vec()]).unwrap();
        if g.value(node).data() != out.data() {
            return Err(format!("{n} users: graph and value passes differ"));
        }
    }
    Ok(format!("width {} for 0..={m} users; padded equals unpadded exactly", m * k))
}

fn random_actions(state: &WorldState, cfg: &NetworkConfig, rng: &mut ChaCha8Rng, close: bool) -> ActionSet {
    ActionSet {
        uavs: state
            .members
            .iter()
            .map(|m| {
                let n = m.len();
                let spread = if rng.random_bool(0.5) { 1.0 } else { 1.0 / n.max(1) as f64 };
                let omega_ul: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..spread)).collect();
                let omega_dl: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..spread)).collect();
                // Either near the weighted power budget or far above it.
                let p_scale = if rng.random_bool(0.5) {
                    2.0 * cfg.p_max_watt / (cfg.bandwidth_hz * n.max(1) as f64)
                } else {
                    cfg.p_max_watt
                };
                let p_dl = (0..n).map(|_| rng.random_range(0.0..p_scale)).collect();
                let alpha = (0..n).map(|_| rng.random_range(0.0..=1.0)).collect();
                let step = if close { 5.0 } else { 30.0 };
                UavAction {
                    omega_ul,
                    omega_dl,
                    p_dl,
                    alpha,
                    delta_xy: [rng.random_range(-step..step), rng.random_range(-step..step)],
                }
            })
            .collect(),
    }
}

fn constraint_reconstruction() -> Check {
    let cfg = RunConfig::profile("micro").unwrap();
    let (net, scen) = (&cfg.network, &cfg.scenario);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut mismatches = 0usize;
    let (mut checked, mut bonus_ul, mut bonus_g, mut penalties) = (0usize, 0usize, 0usize, 0usize);
    for ep in 0..20u64 {
        let mut state = env::reset(ep, net, scen);
        let close = ep % 2 == 1;
        if close {
            // Start the UAVs inside the separation distance.
            let c = scen.region_m / 2.0;
            let fresh = env::reset(ep, net, scen);
            state = WorldState::from_parts(
                vec![Position::new(c, c), Position::new(c + 8.0, c)],
                fresh.mu_pos.clone(),
                fresh.tasks.clone(),
                ChaCha8Rng::seed_from_u64(ep),
            );
        }
        let mut u_prev: Option<Vec<f64>> = None;
        for _ in 0..scen.num_slots {
            let actions = random_actions(&state, net, &mut rng, close);
            let report = env::violation_report(&state, &actions, net, scen).map_err(|e| e.to_string())?;
            let out = env::step(&mut state, &actions, net, scen).map_err(|e| e.to_string())?;
            for (v, m) in out.metrics.uavs.iter().enumerate() {
                checked += 1;
                let s = &m.slacks;
                let a = &actions.uavs[v];
                // Slacks from the raw actions.
                let f_ul = 1.0 - a.omega_ul.iter().sum::<f64>();
                let f_dl = 1.0 - a.omega_dl.iter().sum::<f64>();
                let g = net.p_max_watt - a.omega_dl.iter().zip(&a.p_dl).map(|(w, p)| w * net.bandwidth_hz * p).sum::<f64>();
                if s.ul_sum != f_ul || s.dl_sum != f_dl || s.power_sum != g || report[v] != *s {
                    mismatches += 1;
                }
                let sep = state
                    .uav_pos
                    .iter()
                    .enumerate()
                    .filter(|&(w, _)| w != v)
                    .map(|(_, p)| p.planar_distance(&state.uav_pos[v]))
                    .fold(scen.region_m * std::f64::consts::SQRT_2, f64::min);
                let h = if sep < net.l_min_m { 1.0 } else { 0.0 };
                let prev = u_prev.as_ref().map_or(m.utility, |p| p[v]);
                let delta = if scen.reward_sign_paper { m.utility - prev } else { prev - m.utility };
                let ind = |x: f64| if x >= 0.0 { 1.0 } else { 0.0 };
                let r = &out.rewards[v];
                let expect = [
                    delta,
                    delta + scen.zeta_ul * ind(f_ul) * f_ul,
                    delta + scen.zeta_dl * ind(f_dl) * f_dl,
                    delta + scen.nu * ind(g) * g,
                    delta,
                    delta - scen.xi * h,
                ];
                let got = [r.delta, r.omega_ul, r.omega_dl, r.power, r.alpha, r.trajectory];
                if got != expect || m.rewards != *r {
                    mismatches += 1;
                }
                let flags = s.violations();
                if flags.count() != m.violations {
                    mismatches += 1;
                }
                bonus_ul += (f_ul >= 0.0) as usize;
                bonus_g += (g >= 0.0) as usize;
                penalties += h as usize;
            }
            u_prev = Some(out.metrics.uavs.iter().map(|m| m.utility).collect());
        }
    }
    let detail = format!(
        "{checked} UAV-slots, {mismatches} mismatches; F>=0 in {bonus_ul}, G>=0 in {bonus_g}, separation penalty in {penalties}"
    );
    if mismatches == 0 && bonus_ul > 0 && bonus_g > 0 && penalties > 0 && bonus_ul < checked && bonus_g < checked {
        Ok(detail)
    } else {
        Err(detail)
    }
}

struct SeedResult {
    seed: u64,
    first: f64,
    last: f64,
    eval: f64,
    fairness: f64,
    learned_alpha: f64,
    fixed_alpha: Vec<f64>,
}

fn train_seed(cfg: &RunConfig, seed: u64) -> Result<SeedResult, String> {
    let opts = TrainOptions {
        algo: Algo::Rmappo,
        seed,
        episodes: None,
    };
    let (bundle, log, run) = train(cfg, opts).map_err(|e| e.to_string())?;
    if run.env_steps > cfg.train.max_env_steps {
        return Err(format!("seed {seed} used {} env steps", run.env_steps));
    }
    let n = log.episodes.len();
    let k = (n / 10).max(1);
    let mean = |es: &[skymec::trainer::EpisodeLog]| es.iter().map(|e| e.agent_return).sum::<f64>() / es.len() as f64;
    let episodes = cfg.train.eval_episodes;
    let eval = evaluate(&bundle, cfg, episodes, seed).map_err(|e| e.to_string())?.mean_cost();
    let fairness = evaluate_policy(EvalPolicy::Fairness(FairnessKind::All, None), cfg, episodes, seed)
        .map_err(|e| e.to_string())?
        .mean_cost();
    let sweep = sweep_alpha_fixed(&bundle, cfg, &[0.3, 0.5, 0.7], episodes, seed).map_err(|e| e.to_string())?;
    let (fixed, learned): (Vec<_>, Vec<_>) = sweep.iter().partition(|r| r.alpha.is_some());
    Ok(SeedResult {
        seed,
        first: mean(&log.episodes[..k]),
        last: mean(&log.episodes[n - k..]),
        eval,
        fairness,
        learned_alpha: learned[0].mean_utility,
        fixed_alpha: fixed.iter().map(|r| r.mean_utility).collect(),
    })
}

fn micro_runs() -> Result<(Vec<SeedResult>, Duration), String> {
    let cfg = RunConfig::profile("micro").unwrap();
    let start = Instant::now();
    let results: Vec<Result<SeedResult, String>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..5u64).map(|seed| s.spawn({
            let cfg = &cfg;
            move || train_seed(cfg, seed)
        })).collect();
        handles.into_iter().map(|h| h.join().unwrap_or_else(|_| Err("training panicked".into()))).collect()
    });
    let results = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok((results, start.elapsed()))
}

fn learning_progress(runs: &Result<(Vec<SeedResult>, Duration), String>) -> Check {
    let (runs, took) = runs.as_ref().map_err(|e| e.clone())?;
    let improved = runs.iter().filter(|r| r.last > r.first).count();
    let beats = runs.iter().filter(|r| r.eval <= r.fairness).count();
    let per_seed = runs
        .iter()
        .map(|r| format!("s{} {:.1}->{:.1} eval {:.1} vs {:.1}", r.seed, r.first, r.last, r.eval, r.fairness))
        .collect::<Vec<_>>()
        .join("; ");
    let detail = format!("return improved {improved}/5, eval <= fairness_all {beats}/5 ({per_seed}); training {took:.0?}");
    if improved >= 4 && beats >= 3 && *took <= Duration::from_secs(30 * 60) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn alpha_sweep(runs: &Result<(Vec<SeedResult>, Duration), String>) -> Check {
    let (runs, _) = runs.as_ref().map_err(|e| e.clone())?;
    let ok = runs
        .iter()
        .filter(|r| r.learned_alpha <= r.fixed_alpha.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .count();
    let per_seed = runs
        .iter()
        .map(|r| {
            let f: Vec<String> = r.fixed_alpha.iter().map(|x| format!("{x:.2}")).collect();
            format!("s{} learned {:.2} fixed [{}]", r.seed, r.learned_alpha, f.join(", "))
        })
        .collect::<Vec<_>>()
        .join("; ");
    let detail = format!("learned <= worst fixed in {ok}/5 ({per_seed})");
    if ok >= 4 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn cli(args: &[&str], out: &Path) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_skymec"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("SKYMEC__TRAIN__EPISODES")
        .output()
        .map_err(|e| e.to_string())?;
    if status.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?} failed: {}", String::from_utf8_lossy(&status.stderr)))
    }
}

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn cli_reproducibility() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut compared = 0;
    for (i, run) in [
        vec!["train", "--profile", "micro", "--seed", "7", "--episodes", "4"],
        vec!["eval", "--profile", "micro", "--seed", "7", "--baseline", "fairness_all", "--episodes", "2"],
    ]
    .iter()
    .enumerate()
    {
        let a = tmp.path().join(format!("a{i}"));
        let b = tmp.path().join(format!("b{i}"));
        cli(run, &a)?;
        cli(run, &b)?;
        let (fa, fb) = (csv_files(&a), csv_files(&b));
        if fa.is_empty() || fa != fb {
            return Err(format!("`{}` outputs differ between identical invocations", run[0]));
        }
        compared += fa.len();
    }
    let ckpt = tmp.path().join("a0").join("checkpoint.json");
    let ckpt = ckpt.to_str().unwrap();
    let sweep = ["sweep-alpha", "--profile", "micro", "--seed", "7", "--checkpoint", ckpt, "--episodes", "1"];
    let (a, b) = (tmp.path().join("sa"), tmp.path().join("sb"));
    cli(&sweep, &a)?;
    cli(&sweep, &b)?;
    if csv_files(&a) != csv_files(&b) {
        return Err("sweep-alpha outputs differ".into());
    }
    compared += 1;
    Ok(format!("{compared} CSV files byte-identical across repeated train, eval and sweep-alpha runs"))
}

fn main() {
    let mut ok = Vec::new();
    ok.push(run("physics oracle", physics_oracle));
    ok.push(run("convex-solver oracle", convex_oracle));
    ok.push(run("gradient checks", gradient_checks));
    ok.push(run("GAE and clipping", gae_and_clip));
    ok.push(run("MHA size invariance", mha_size_invariance));
    ok.push(run("constraint-penalty reconstruction", constraint_reconstruction));
    let runs = micro_runs();
    ok.push(run("learning progress", || learning_progress(&runs)));
    ok.push(run("fixed-alpha sweep", || alpha_sweep(&runs)));
    ok.push(run("CLI reproducibility", cli_reproducibility));
    let passed = ok.iter().filter(|&&b| b).count();
    println!("{passed}/{} acceptance criteria passed", ok.len());
    if passed != ok.len() {
        std::process::exit(1);
    }
}

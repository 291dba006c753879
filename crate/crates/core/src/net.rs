//! Stateless physical model: task splits, sub-THz link rates, delays, energies
//! and the per-UAV utility (a cost, smaller is better).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::NetworkConfig;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("{quantity} = {value} is outside its domain {domain}")]
    Domain {
        quantity: &'static str,
        value: f64,
        domain: &'static str,
    },
    #[error("{link} link has zero rate but must carry {bits} bits")]
    InfeasibleLink { link: &'static str, bits: f64 },
}

fn domain<F: Scalar>(quantity: &'static str, value: F, domain: &'static str) -> ModelError {
    ModelError::Domain {
        quantity,
        value: value.as_f64(),
        domain,
    }
}

/// Planar position in metres.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Position<F = f64> {
    pub x_m: F,
    pub y_m: F,
}

impl<F: Scalar> Position<F> {
    pub fn new(x_m: F, y_m: F) -> Self {
        Self { x_m, y_m }
    }

    pub fn planar_distance(&self, other: &Self) -> F {
        (self.x_m - other.x_m).hypot(self.y_m - other.y_m)
    }

    pub fn clamp_to_region(self, side: F) -> Self {
        Self {
            x_m: self.x_m.max(F::zero()).min(side),
            y_m: self.y_m.max(F::zero()).min(side),
        }
    }
}

/// Per-slot computation task of one MU.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Task<F = f64> {
    /// Input size before offloading, bits.
    pub d_pre_bits: F,
    /// Minimum CPU rate required, cycles/s.
    pub c_min_cycles_per_s: F,
}

/// Communication and offloading decisions for one MU.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LinkAlloc<F = f64> {
    pub omega_ul: F,
    pub omega_dl: F,
    pub p_dl_watt: F,
    pub alpha: F,
}

/// UAV-to-MU slant distance at the configured altitude.
pub fn link_distance<F: Scalar>(uav: Position<F>, mu: Position<F>, cfg: &NetworkConfig<F>) -> F {
    cfg.altitude_m.hypot(uav.planar_distance(&mu))
}

/// Split a task into `(local bits, offloaded bits)`.
pub fn split_task<F: Scalar>(alpha: F, d_pre: F) -> Result<(F, F), ModelError> {
    if !(alpha >= F::zero() && alpha <= F::one()) {
        return Err(domain("alpha", alpha, "[0, 1]"));
    }
    if !(d_pre >= F::zero()) {
        return Err(domain("d_pre", d_pre, "[0, inf)"));
    }
    let d_mec = alpha * d_pre;
    Ok((d_pre - d_mec, d_mec))
}

fn require_positive_rate<F: Scalar>(quantity: &'static str, c: F) -> Result<(), ModelError> {
    if c > F::zero() && c.is_finite() {
        Ok(())
    } else {
        Err(domain(quantity, c, "(0, inf)"))
    }
}

pub fn local_delay<F: Scalar>(d_in: F, c_in: F, cfg: &NetworkConfig<F>) -> Result<F, ModelError> {
    require_positive_rate("c_in", c_in)?;
    Ok(cfg.beta_mu * d_in / c_in)
}

pub fn local_energy<F: Scalar>(d_in: F, c_in: F, cfg: &NetworkConfig<F>) -> Result<F, ModelError> {
    require_positive_rate("c_in", c_in)?;
    Ok(cfg.q_mu * c_in * c_in * cfg.beta_mu * d_in)
}

/// Shannon rate of a THz link with spreading loss and molecular absorption.
/// Zero bandwidth or zero power yields rate 0.
fn thz_rate<F: Scalar>(omega: F, power: F, dist: F, cfg: &NetworkConfig<F>) -> Result<F, ModelError> {
    if !(omega >= F::zero() && omega <= F::one()) {
        return Err(domain("omega", omega, "[0, 1]"));
    }
    if !(power >= F::zero() && power.is_finite()) {
        return Err(domain("power", power, "[0, inf)"));
    }
    if !(dist >= F::zero() && dist.is_finite()) {
        return Err(domain("distance", dist, "[0, inf)"));
    }
    if omega == F::zero() || power == F::zero() {
        return Ok(F::zero());
    }
    let band = omega * cfg.bandwidth_hz;
    let path = dist * dist * (cfg.absorption_a * dist).exp();
    let snr = power * cfg.gain_ref_linear() / (band * path * cfg.noise_psd_watt_per_hz());
    Ok(band * snr.ln_1p() / F::LN_2())
}

pub fn uplink_rate<F: Scalar>(omega_ul: F, dist: F, cfg: &NetworkConfig<F>) -> Result<F, ModelError> {
    thz_rate(omega_ul, cfg.p_ul_watt, dist, cfg)
}

pub fn downlink_rate<F: Scalar>(omega_dl: F, p_dl: F, dist: F, cfg: &NetworkConfig<F>) -> Result<F, ModelError> {
    thz_rate(omega_dl, p_dl, dist, cfg)
}

fn transfer_delay<F: Scalar>(link: &'static str, bits: F, rate: F) -> Result<F, ModelError> {
    if !(bits >= F::zero()) {
        return Err(domain("bits", bits, "[0, inf)"));
    }
    if bits == F::zero() {
        return Ok(F::zero());
    }
    if !(rate > F::zero()) {
        return Err(ModelError::InfeasibleLink {
            link,
            bits: bits.as_f64(),
        });
    }
    Ok(bits / rate)
}

pub fn uplink_delay<F: Scalar>(d_mec: F, rate: F) -> Result<F, ModelError> {
    transfer_delay("uplink", d_mec, rate)
}

pub fn uplink_energy<F: Scalar>(delay: F, cfg: &NetworkConfig<F>) -> F {
    delay * cfg.p_ul_watt
}

pub fn mec_delay<F: Scalar>(d_mec: F, c_mec: F, cfg: &NetworkConfig<F>) -> Result<F, ModelError> {
    if d_mec == F::zero() {
        return Ok(F::zero());
    }
    require_positive_rate("c_mec", c_mec)?;
    Ok(cfg.beta_uav * d_mec / c_mec)
}

pub fn mec_energy<F: Scalar>(d_mec: F, c_mec: F, cfg: &NetworkConfig<F>) -> Result<F, ModelError> {
    if d_mec == F::zero() {
        return Ok(F::zero());
    }
    require_positive_rate("c_mec", c_mec)?;
    Ok(cfg.q_uav * c_mec * c_mec * cfg.beta_uav * d_mec)
}

/// Size of the processed result returned over the downlink.
pub fn post_size<F: Scalar>(d_mec: F, cfg: &NetworkConfig<F>) -> F {
    cfg.delta_prog * d_mec
}

pub fn downlink_delay<F: Scalar>(d_post: F, rate: F) -> Result<F, ModelError> {
    transfer_delay("downlink", d_post, rate)
}

pub fn downlink_energy<F: Scalar>(delay: F, p_dl: F) -> F {
    delay * p_dl
}

/// Rotary-wing propulsion energy. Hovering (speed 0) is excluded and costs 0.
pub fn flight_energy<F: Scalar>(speed: F, t_fly: F, cfg: &NetworkConfig<F>) -> Result<F, ModelError> {
    if !(speed >= F::zero() && speed.is_finite()) {
        return Err(domain("speed", speed, "[0, inf)"));
    }
    if !(t_fly >= F::zero()) {
        return Err(domain("t_fly", t_fly, "[0, inf)"));
    }
    if speed == F::zero() {
        return Ok(F::zero());
    }
    Ok(t_fly * speed * (cfg.c1 * speed * speed + cfg.c2 / (speed * speed)))
}

/// The four delay terms of one MU in one slot.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MuDelays<F = f64> {
    pub local_comp: F,
    pub uplink: F,
    pub mec_comp: F,
    pub downlink: F,
}

/// The four energy terms charged to a UAV on behalf of one member MU.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MuEnergies<F = f64> {
    pub local_comp: F,
    pub uplink: F,
    pub downlink: F,
    pub mec_comp: F,
}

impl<F: Scalar> MuEnergies<F> {
    pub fn sum(&self) -> F {
        self.local_comp + self.uplink + self.downlink + self.mec_comp
    }
}

/// Total delay of one MU.
pub fn total_delay<F: Scalar>(d: &MuDelays<F>) -> F {
    d.local_comp + d.uplink + d.mec_comp + d.downlink
}

/// Total energy of a UAV and its members in one slot.
pub fn total_energy<F: Scalar>(flight: F, members: &[MuEnergies<F>]) -> F {
    flight + members.iter().map(MuEnergies::sum).sum::<F>()
}

/// Per-UAV cost `eta * E + (1 - eta) * sum(T)`.
pub fn utility<F: Scalar>(energy_j: F, delays_s: &[F], cfg: &NetworkConfig<F>) -> F {
    let delay: F = delays_s.iter().copied().sum();
    cfg.eta * energy_j + (F::one() - cfg.eta) * delay
}

/// Everything computed for one MU in one slot.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MuSlotEval<F = f64> {
    pub distance_m: F,
    pub d_in_bits: F,
    pub d_mec_bits: F,
    pub d_post_bits: F,
    pub rate_ul_bps: F,
    pub rate_dl_bps: F,
    pub delays: MuDelays<F>,
    pub energies: MuEnergies<F>,
    /// Number of links that had to be charged the infeasible-link delay.
    pub infeasible_links: u32,
}

impl<F: Scalar> MuSlotEval<F> {
    pub fn total_delay(&self) -> F {
        total_delay(&self.delays)
    }
}

/// Chain every formula for one MU. Links that would carry data at zero rate
/// are charged `infeasible_delay` instead of failing.
pub fn evaluate_mu<F: Scalar>(
    uav: Position<F>,
    mu: Position<F>,
    task: &Task<F>,
    alloc: &LinkAlloc<F>,
    c_in: F,
    c_mec: F,
    infeasible_delay: F,
    cfg: &NetworkConfig<F>,
) -> Result<MuSlotEval<F>, ModelError> {
    let distance_m = link_distance(uav, mu, cfg);
    let (d_in, d_mec) = split_task(alloc.alpha, task.d_pre_bits)?;
    let d_post = post_size(d_mec, cfg);
    let rate_ul = uplink_rate(alloc.omega_ul, distance_m, cfg)?;
    let rate_dl = downlink_rate(alloc.omega_dl, alloc.p_dl_watt, distance_m, cfg)?;
    let mut infeasible_links = 0;
    let mut soften = |r: Result<F, ModelError>| match r {
        Err(ModelError::InfeasibleLink { .. }) => {
            infeasible_links += 1;
            Ok(infeasible_delay)
        }
        other => other,
    };
    let t_ul = soften(uplink_delay(d_mec, rate_ul))?;
    let t_dl = soften(downlink_delay(d_post, rate_dl))?;
    let delays = MuDelays {
        local_comp: local_delay(d_in, c_in, cfg)?,
        uplink: t_ul,
        mec_comp: mec_delay(d_mec, c_mec, cfg)?,
        downlink: t_dl,
    };
    let energies = MuEnergies {
        local_comp: local_energy(d_in, c_in, cfg)?,
        uplink: uplink_energy(t_ul, cfg),
        downlink: downlink_energy(t_dl, alloc.p_dl_watt),
        mec_comp: mec_energy(d_mec, c_mec, cfg)?,
    };
    Ok(MuSlotEval {
        distance_m,
        d_in_bits: d_in,
        d_mec_bits: d_mec,
        d_post_bits: d_post,
        rate_ul_bps: rate_ul,
        rate_dl_bps: rate_dl,
        delays,
        energies,
        infeasible_links,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn cfg() -> NetworkConfig {
        NetworkConfig::default()
    }

    #[test]
    fn distance_examples() {
        let c = cfg();
        let o = Position::new(0.0, 0.0);
        assert_eq!(link_distance(o, o, &c), 50.0);
        assert_relative_eq!(link_distance(o, Position::new(30.0, 40.0), &c), 70.71067811865476, max_relative = 1e-15);
        // sqrt(50^2 + 60^2 + 80^2) = sqrt(12500)
        let d = link_distance(Position::new(100.0, 200.0), Position::new(160.0, 120.0), &c);
        assert_relative_eq!(d, 111.80339887498948, max_relative = 1e-15);
    }

    #[test]
    fn split_examples() {
        assert_eq!(split_task(0.0, 1e6).unwrap(), (1e6, 0.0));
        assert_eq!(split_task(1.0, 1e6).unwrap(), (0.0, 1e6));
        assert_eq!(split_task(0.25, 8e5).unwrap(), (6e5, 2e5));
        assert!(split_task(1.5, 1.0).is_err());
        assert!(split_task(-0.1, 1.0).is_err());
    }

    #[test]
    fn split_conserves_bits_on_dense_grid() {
        for d in [1.0, 3.0, 1e5, 123_456.0, 7.77e5, 1e6] {
            for k in 0..=10_000 {
                let a = k as f64 / 10_000.0;
                let (i, m) = split_task(a, d).unwrap();
                assert_eq!(i + m, d, "alpha={a} d={d}");
            }
        }
    }

    #[test]
    fn local_examples() {
        let c = cfg();
        assert_eq!(local_delay(0.0, 1e9, &c).unwrap(), 0.0);
        assert_eq!(local_delay(1e6, 1e9, &c).unwrap(), 1.0);
        assert_eq!(local_delay(3e5, 4e8, &c).unwrap(), 2.0 * local_delay(3e5, 8e8, &c).unwrap());
        assert!(local_delay(1.0, 0.0, &c).is_err());
        assert_eq!(local_energy(0.0, 1e9, &c).unwrap(), 0.0);
        assert_relative_eq!(local_energy(1e6, 1e9, &c).unwrap(), 0.1, max_relative = 1e-14);
        assert_relative_eq!(
            local_energy(1e6, 2e8, &c).unwrap(),
            4.0 * local_energy(1e6, 1e8, &c).unwrap(),
            max_relative = 1e-14
        );
        assert!(local_energy(1.0, -1.0, &c).is_err());
    }

    #[test]
    fn rate_conventions() {
        let c = cfg();
        assert_eq!(uplink_rate(0.0, 50.0, &c).unwrap(), 0.0);
        assert_eq!(downlink_rate(0.5, 0.0, 70.0, &c).unwrap(), 0.0);
        assert!(uplink_rate(1.0, 50.0, &c).unwrap() > uplink_rate(1.0, 200.0, &c).unwrap());
        assert!(downlink_rate(0.5, 2.0, 70.0, &c).unwrap() > downlink_rate(0.5, 1.0, 70.0, &c).unwrap());
        assert!(uplink_rate(-0.1, 50.0, &c).is_err());
        assert!(downlink_rate(0.5, -1.0, 50.0, &c).is_err());
    }

    #[test]
    fn transfer_examples() {
        let c = cfg();
        assert_eq!(uplink_delay(0.0, 0.0).unwrap(), 0.0);
        let t = uplink_delay(1e9, 5e10).unwrap();
        assert_relative_eq!(t, 0.02, max_relative = 1e-15);
        assert_relative_eq!(uplink_energy(t, &c), 0.01, max_relative = 1e-15);
        assert!(matches!(uplink_delay(1.0, 0.0), Err(ModelError::InfeasibleLink { .. })));
        assert_eq!(uplink_delay(2e9, 5e10).unwrap(), 2.0 * uplink_delay(1e9, 5e10).unwrap());
        assert!(matches!(downlink_delay(1.0, 0.0), Err(ModelError::InfeasibleLink { .. })));
        assert_eq!(downlink_delay(0.0, 0.0).unwrap(), 0.0);
        assert_eq!(post_size(1e6, &c), 1e5);
    }

    #[test]
    fn mec_examples() {
        let c = cfg();
        assert_eq!(mec_delay(0.0, 0.0, &c).unwrap(), 0.0);
        assert_eq!(mec_energy(0.0, 0.0, &c).unwrap(), 0.0);
        assert_relative_eq!(mec_delay(2e5, 2e9, &c).unwrap(), 0.1, max_relative = 1e-15);
        let (d, cm) = (3.3e5, 2.7e9);
        let product = mec_delay(d, cm, &c).unwrap() * mec_energy(d, cm, &c).unwrap();
        assert_relative_eq!(product, c.q_uav * cm * (c.beta_uav * d).powi(2), max_relative = 1e-13);
        assert!(mec_delay(1.0, 0.0, &c).is_err());
    }

    #[test]
    fn flight_examples() {
        let c = cfg();
        assert_eq!(flight_energy(0.0, 1.0, &c).unwrap(), 0.0);
        assert_relative_eq!(flight_energy(10.0, 1.0, &c).unwrap(), 225.926, max_relative = 1e-13);
        assert!(flight_energy(-1.0, 1.0, &c).is_err());
        // Blows up at both ends.
        assert!(flight_energy(1e-6, 1.0, &c).unwrap() > 1e9);
        assert!(flight_energy(1e4, 1.0, &c).unwrap() > 1e8);
    }

    #[test]
    fn flight_minimum_matches_stationary_point() {
        let c = cfg();
        let f = |v: f64| flight_energy(v, 1.0, &c).unwrap();
        // golden-section search on [0.1, 200]
        let (mut a, mut b) = (0.1f64, 200.0f64);
        let g = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let x1 = b - g * (b - a);
            let x2 = a + g * (b - a);
            if f(x1) < f(x2) {
                b = x2;
            } else {
                a = x1;
            }
        }
        let numeric = 0.5 * (a + b);
        let closed = (c.c2 / (3.0 * c.c1)).powf(0.25);
        assert!((numeric - closed).abs() / closed < 1e-6, "{numeric} vs {closed}");
    }

    #[test]
    fn totals_and_utility() {
        let c = cfg();
        assert_eq!(total_delay(&MuDelays::<f64>::default()), 0.0);
        assert_eq!(total_energy(0.0, &[MuEnergies::default()]), 0.0);
        let d = MuDelays {
            local_comp: 1.0,
            uplink: 2.0,
            mec_comp: 3.0,
            downlink: 4.0,
        };
        assert_eq!(total_delay(&d), 10.0);
        let e = MuEnergies {
            local_comp: 0.5,
            uplink: 0.25,
            downlink: 0.125,
            mec_comp: 1.0,
        };
        assert_eq!(total_energy(2.0, &[e, e]), 2.0 + 2.0 * 1.875);
        let mut one = c.clone();
        one.eta = 1.0;
        assert_eq!(utility(2.0, &[4.0], &one), 2.0);
        one.eta = 0.0;
        assert_eq!(utility(2.0, &[1.0, 3.0], &one), 4.0);
        assert_eq!(utility(2.0, &[4.0], &c), 3.0);
    }

    #[test]
    fn evaluate_mu_softens_zero_rate_links() {
        let c = cfg();
        let task = Task {
            d_pre_bits: 1e6,
            c_min_cycles_per_s: 1e8,
        };
        let alloc = LinkAlloc {
            omega_ul: 0.0,
            omega_dl: 0.3,
            p_dl_watt: 0.0,
            alpha: 0.5,
        };
        let o = Position::new(0.0, 0.0);
        let ev = evaluate_mu(o, o, &task, &alloc, 1e9, 2e9, 10.0, &c).unwrap();
        assert_eq!(ev.infeasible_links, 2);
        assert_eq!(ev.delays.uplink, 10.0);
        assert_eq!(ev.delays.downlink, 10.0);
        assert_eq!(ev.energies.downlink, 0.0);
        assert_eq!(ev.energies.uplink, 10.0 * c.p_ul_watt);
    }

    #[test]
    fn generic_over_f32() {
        let c: NetworkConfig<f32> = cfg().cast();
        let r32 = uplink_rate(1.0f32, 50.0, &c).unwrap();
        let r64 = uplink_rate(1.0f64, 50.0, &cfg()).unwrap();
        assert!(((r32 as f64) - r64).abs() / r64 < 1e-5);
    }

    proptest! {
        #[test]
        fn rates_monotone(omega in 0.01f64..1.0, p in 0.01f64..5.0, d1 in 50.0f64..400.0, dd in 0.5f64..100.0, dp in 0.01f64..1.0) {
            let c = cfg();
            let near = downlink_rate(omega, p, d1, &c).unwrap();
            let far = downlink_rate(omega, p, d1 + dd, &c).unwrap();
            prop_assert!(near > far);
            let louder = downlink_rate(omega, p + dp, d1, &c).unwrap();
            prop_assert!(louder > near);
            prop_assert!(uplink_rate(omega, d1, &c).unwrap() > uplink_rate(omega, d1 + dd, &c).unwrap());
        }

        #[test]
        fn homogeneity_in_cycle_rate(d in 1.0f64..1e6, c_rate in 1e8f64..1e10, k in 0.1f64..10.0) {
            let c = cfg();
            let t1 = mec_delay(d, c_rate, &c).unwrap();
            let tk = mec_delay(d, k * c_rate, &c).unwrap();
            prop_assert!((tk * k - t1).abs() <= 1e-12 * t1);
            let e1 = local_energy(d, c_rate, &c).unwrap();
            let ek = local_energy(d, k * c_rate, &c).unwrap();
            prop_assert!((ek - k * k * e1).abs() <= 1e-12 * ek);
        }

        #[test]
        fn outputs_finite_and_nonnegative(
            x in 0.0f64..500.0, y in 0.0f64..500.0, ux in 0.0f64..500.0, uy in 0.0f64..500.0,
            d_pre in 1e5f64..1e6, alpha in 0.0f64..=1.0, w_ul in 0.0f64..=1.0, w_dl in 0.0f64..=1.0,
            p in 0.0f64..5.0, c_in in 1e8f64..1e9, c_mec in 1e8f64..1e10, speed in 0.0f64..25.0,
        ) {
            let c = cfg();
            let task = Task { d_pre_bits: d_pre, c_min_cycles_per_s: 1e8 };
            let alloc = LinkAlloc { omega_ul: w_ul, omega_dl: w_dl, p_dl_watt: p, alpha };
            let ev = evaluate_mu(Position::new(ux, uy), Position::new(x, y), &task, &alloc, c_in, c_mec, 10.0, &c).unwrap();
            for v in [ev.rate_ul_bps, ev.rate_dl_bps, ev.total_delay(), ev.energies.sum(), ev.distance_m] {
                prop_assert!(v.is_finite() && v >= 0.0);
            }
            let fe = flight_energy(speed, 1.0, &c).unwrap();
            prop_assert!(fe.is_finite() && fe >= 0.0);
        }
    }
}

//! Run configuration: physical constants, scenario, model, PPO and training knobs.
//!
//! Configurations are TOML documents with one section per concern. Every key
//! is required when loading from a file; the shipped profiles live in
//! `profiles/` and are compiled into the binary.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::scalar::Scalar;

/// Prefix for environment-variable overrides, e.g. `SKYMEC__NETWORK__ETA=0.3`.
pub const ENV_PREFIX: &str = "SKYMEC__";

const MICRO_PROFILE: &str = include_str!("../profiles/micro.toml");
const TABLE2_FULL_PROFILE: &str = include_str!("../profiles/table2-full.toml");

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error{}: {message}", origin.as_ref().map(|o| format!(" in {o}")).unwrap_or_default())]
    Parse {
        origin: Option<String>,
        message: String,
    },
    #[error("invalid config value for `{key}`: {reason}")]
    Invalid { key: String, reason: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("unknown profile `{0}` (available: micro, table2, table2-full)")]
    UnknownProfile(String),
    #[error("cannot read config {path}: {message}")]
    Io { path: String, message: String },
}

fn invalid(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        reason: reason.into(),
    }
}

/// Physical constants of the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound(serialize = "F: Serialize", deserialize = "F: DeserializeOwned"))]
pub struct NetworkConfig<F = f64> {
    /// Noise power spectral density, dBm/Hz.
    pub noise_psd_dbm_per_hz: F,
    /// Uplink transmit power of every MU, W.
    pub p_ul_watt: F,
    /// Total downlink power budget per UAV, W.
    pub p_max_watt: F,
    /// Molecular absorption coefficient, 1/m.
    pub absorption_a: F,
    /// Total THz bandwidth, Hz.
    pub bandwidth_hz: F,
    /// Minimum achievable rate, bit/s.
    pub r_min_bps: F,
    /// Channel gain at the 1 m reference distance, dB.
    pub gain_ref_db: F,
    /// Fixed UAV altitude, m.
    pub altitude_m: F,
    /// Energy/delay trade-off weight.
    pub eta: F,
    /// CPU cycles per bit at the MU.
    pub beta_mu: F,
    /// CPU cycles per bit at the UAV.
    pub beta_uav: F,
    pub q_mu: F,
    pub q_uav: F,
    /// Post-processing shrink factor of offloaded data.
    pub delta_prog: F,
    /// Airframe flight-energy constants.
    pub c1: F,
    pub c2: F,
    pub slot_duration_s: F,
    pub v_max_mps: F,
    pub l_min_m: F,
    pub c_mu_min: F,
    pub c_mu_max: F,
    pub c_uav_max: F,
}

impl Default for NetworkConfig<f64> {
    /// The baseline "table2" constants. Values not given by the reference
    /// parameter table (β, q, δ, c1, c2, η, D, V_max, L_min, CPU bounds) are
    /// documented defaults.
    fn default() -> Self {
        Self {
            noise_psd_dbm_per_hz: -175.0,
            p_ul_watt: 0.5,
            p_max_watt: 5.0,
            absorption_a: 0.005,
            bandwidth_hz: 0.2e12,
            r_min_bps: 0.05e12,
            gain_ref_db: -40.0,
            altitude_m: 50.0,
            eta: 0.5,
            beta_mu: 1000.0,
            beta_uav: 1000.0,
            q_mu: 1e-28,
            q_uav: 1e-28,
            delta_prog: 0.1,
            c1: 9.26e-4,
            c2: 2250.0,
            slot_duration_s: 1.0,
            v_max_mps: 25.0,
            l_min_m: 20.0,
            c_mu_min: 1e8,
            c_mu_max: 1e9,
            c_uav_max: 1e10,
        }
    }
}

impl<F: Scalar> NetworkConfig<F> {
    /// Noise PSD in W/Hz.
    pub fn noise_psd_watt_per_hz(&self) -> F {
        F::lit(10.0).powf((self.noise_psd_dbm_per_hz - F::lit(30.0)) / F::lit(10.0))
    }

    /// Linear reference channel gain.
    pub fn gain_ref_linear(&self) -> F {
        F::lit(10.0).powf(self.gain_ref_db / F::lit(10.0))
    }

    /// Maximum per-axis (and per-norm) displacement within one slot.
    pub fn max_step_m(&self) -> F {
        self.v_max_mps * self.slot_duration_s
    }

    pub fn cast<G: Scalar>(&self) -> NetworkConfig<G> {
        let c = |x: F| G::lit(x.as_f64());
        NetworkConfig {
            noise_psd_dbm_per_hz: c(self.noise_psd_dbm_per_hz),
            p_ul_watt: c(self.p_ul_watt),
            p_max_watt: c(self.p_max_watt),
            absorption_a: c(self.absorption_a),
            bandwidth_hz: c(self.bandwidth_hz),
            r_min_bps: c(self.r_min_bps),
            gain_ref_db: c(self.gain_ref_db),
            altitude_m: c(self.altitude_m),
            eta: c(self.eta),
            beta_mu: c(self.beta_mu),
            beta_uav: c(self.beta_uav),
            q_mu: c(self.q_mu),
            q_uav: c(self.q_uav),
            delta_prog: c(self.delta_prog),
            c1: c(self.c1),
            c2: c(self.c2),
            slot_duration_s: c(self.slot_duration_s),
            v_max_mps: c(self.v_max_mps),
            l_min_m: c(self.l_min_m),
            c_mu_min: c(self.c_mu_min),
            c_mu_max: c(self.c_mu_max),
            c_uav_max: c(self.c_uav_max),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let zero = F::zero();
        let positive = [
            ("network.p_ul_watt", self.p_ul_watt),
            ("network.p_max_watt", self.p_max_watt),
            ("network.bandwidth_hz", self.bandwidth_hz),
            ("network.r_min_bps", self.r_min_bps),
            ("network.altitude_m", self.altitude_m),
            ("network.beta_mu", self.beta_mu),
            ("network.beta_uav", self.beta_uav),
            ("network.q_mu", self.q_mu),
            ("network.q_uav", self.q_uav),
            ("network.c1", self.c1),
            ("network.c2", self.c2),
            ("network.slot_duration_s", self.slot_duration_s),
            ("network.v_max_mps", self.v_max_mps),
            ("network.l_min_m", self.l_min_m),
            ("network.c_mu_min", self.c_mu_min),
            ("network.c_mu_max", self.c_mu_max),
            ("network.c_uav_max", self.c_uav_max),
        ];
        for (key, v) in positive {
            if !(v.is_finite() && v > zero) {
                return Err(invalid(key, format!("must be finite and > 0, got {v}")));
            }
        }
        if !self.noise_psd_dbm_per_hz.is_finite() || !self.gain_ref_db.is_finite() {
            return Err(invalid("network.noise_psd_dbm_per_hz", "dB quantities must be finite"));
        }
        if !(self.eta >= zero && self.eta <= F::one()) {
            return Err(invalid("network.eta", "must lie in [0, 1]"));
        }
        if !(self.delta_prog > zero && self.delta_prog < F::one()) {
            return Err(invalid("network.delta_prog", "must lie in (0, 1)"));
        }
        if !(self.absorption_a >= zero && self.absorption_a.is_finite()) {
            return Err(invalid("network.absorption_a", "must be finite and >= 0"));
        }
        if self.c_mu_min > self.c_mu_max {
            return Err(invalid("network.c_mu_min", "must not exceed c_mu_max"));
        }
        Ok(())
    }
}

/// Episode layout, task sampling and coordinator penalty factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub num_uavs: usize,
    pub num_mus: usize,
    pub num_slots: usize,
    /// Side length of the square service region, m.
    pub region_m: f64,
    /// Initial UAV positions, one `[x, y]` per UAV.
    pub uav_spawn: Vec<[f64; 2]>,
    pub task_bits_min: f64,
    pub task_bits_max: f64,
    /// Delay charged to a link that must carry data at zero rate, s.
    pub infeasible_delay_s: f64,
    /// Flight time per slot used in the flight-energy model, s.
    pub flight_time_s: f64,
    pub zeta_ul: f64,
    pub zeta_dl: f64,
    pub nu: f64,
    pub xi: f64,
    /// Use `+(u_now - u_prev)` as the base reward instead of `-(u_now - u_prev)`.
    pub reward_sign_paper: bool,
    /// Re-solve the CPU allocation every slot (otherwise once per episode).
    pub p11_resolve_per_slot: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Attention slots per UAV; bounds the number of MUs a UAV may serve.
    pub max_users: usize,
    /// Output width of each attention slot.
    pub head_dim: usize,
    pub hidden_units: usize,
    /// Hidden layers of the per-resource agents.
    pub hidden_layers: usize,
    /// Hidden layers of the single-agent baseline.
    pub gmappo_hidden_layers: usize,
    pub log_std_init: f64,
}

/// PPO hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PpoHyper {
    pub clip_eps: f64,
    pub gamma: f64,
    pub lambda: f64,
    /// Value-loss coefficient.
    pub value_coef: f64,
    /// Entropy-bonus coefficient.
    pub entropy_coef: f64,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub max_grad_norm: f64,
    pub normalize_advantages: bool,
    pub kl_early_stop: bool,
    pub target_kl: f64,
}

impl Default for PpoHyper {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            gamma: 0.99,
            lambda: 0.95,
            value_coef: 0.5,
            entropy_coef: 0.01,
            epochs: 10,
            minibatch_size: 256,
            learning_rate: 3e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            max_grad_norm: 0.5,
            normalize_advantages: true,
            kl_early_stop: false,
            target_kl: 0.05,
        }
    }
}

impl PpoHyper {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(invalid("ppo.clip_eps", "must lie in (0, 1)"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(invalid("ppo.gamma", "must lie in (0, 1]"));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(invalid("ppo.lambda", "must lie in (0, 1]"));
        }
        if self.minibatch_size == 0 {
            return Err(invalid("ppo.minibatch_size", "must be > 0"));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(invalid("ppo.learning_rate", "must be >= 0"));
        }
        if self.value_coef < 0.0 || self.entropy_coef < 0.0 {
            return Err(invalid("ppo.value_coef", "loss coefficients must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub episodes: usize,
    /// Hard cap on environment slots across the whole run.
    pub max_env_steps: usize,
    pub episodes_per_update: usize,
    /// Multiplier applied to rewards before they enter the PPO buffer.
    pub reward_scale: f64,
    pub eval_episodes: usize,
    /// Log per-slot metrics of every k-th training episode; 0 disables.
    pub slot_log_interval: usize,
}

/// Everything a run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: String,
    pub network: NetworkConfig<f64>,
    pub scenario: ScenarioConfig,
    pub model: ModelConfig,
    pub ppo: PpoHyper,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Built-in profile by name.
    pub fn profile(name: &str) -> Result<Self, ConfigError> {
        let text = match name {
            "micro" => MICRO_PROFILE,
            "table2" | "table2-full" => TABLE2_FULL_PROFILE,
            other => return Err(ConfigError::UnknownProfile(other.to_string())),
        };
        Self::from_toml_str(text, Some(format!("profile {name}")))
    }

    pub fn from_toml_str(text: &str, origin: Option<String>) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            origin,
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_toml_str(&text, Some(path.display().to_string()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Apply `SKYMEC__SECTION__KEY=value` overrides from the given variables.
    pub fn with_overrides<I, K, V>(&self, vars: I) -> Result<Self, ConfigError>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let mut table = toml::Table::try_from(self).expect("config serializes to a table");
        let mut touched = false;
        for (k, v) in vars {
            let Some(rest) = k.as_ref().strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let path: Vec<String> = rest.split("__").map(|s| s.to_ascii_lowercase()).collect();
            let dotted = path.join(".");
            let slot = lookup_mut(&mut table, &path).ok_or_else(|| ConfigError::UnknownKey(dotted.clone()))?;
            let parsed: toml::Table = toml::from_str(&format!("v = {}", v.as_ref()))
                .or_else(|_| toml::from_str(&format!("v = {:?}", v.as_ref())))
                .map_err(|e| ConfigError::Parse {
                    origin: Some(format!("override {dotted}")),
                    message: e.to_string(),
                })?;
            let mut value = parsed["v"].clone();
            // `5` for a float field is still a float.
            if let (toml::Value::Float(_), toml::Value::Integer(i)) = (&*slot, &value) {
                value = toml::Value::Float(*i as f64);
            }
            if std::mem::discriminant(&*slot) != std::mem::discriminant(&value) {
                return Err(invalid(&dotted, format!("override `{}` has the wrong type", v.as_ref())));
            }
            *slot = value;
            touched = true;
        }
        if !touched {
            return Ok(self.clone());
        }
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| ConfigError::Parse {
            origin: Some("overrides".into()),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply overrides from the process environment.
    pub fn with_env_overrides(&self) -> Result<Self, ConfigError> {
        let mut vars: Vec<(String, String)> = std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        vars.sort();
        self.with_overrides(vars)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&canonical);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Transitions collected per agent role between two updates.
    pub fn transitions_per_update(&self) -> usize {
        self.train.episodes_per_update * self.scenario.num_slots * self.scenario.num_uavs
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.network.validate()?;
        self.ppo.validate()?;
        let s = &self.scenario;
        if s.num_uavs == 0 {
            return Err(invalid("scenario.num_uavs", "need at least one UAV"));
        }
        if s.num_mus == 0 {
            return Err(invalid("scenario.num_mus", "need at least one MU"));
        }
        if s.num_slots == 0 {
            return Err(invalid("scenario.num_slots", "must be > 0"));
        }
        if !(s.region_m > 0.0 && s.region_m.is_finite()) {
            return Err(invalid("scenario.region_m", "must be finite and > 0"));
        }
        if s.uav_spawn.len() != s.num_uavs {
            return Err(invalid(
                "scenario.uav_spawn",
                format!("expected {} spawn points, got {}", s.num_uavs, s.uav_spawn.len()),
            ));
        }
        for p in &s.uav_spawn {
            if !p.iter().all(|c| c.is_finite() && *c >= 0.0 && *c <= s.region_m) {
                return Err(invalid("scenario.uav_spawn", format!("{p:?} lies outside the region")));
            }
        }
        if !(s.task_bits_min > 0.0 && s.task_bits_min <= s.task_bits_max) {
            return Err(invalid("scenario.task_bits_min", "need 0 < task_bits_min <= task_bits_max"));
        }
        if !(s.infeasible_delay_s > 0.0) {
            return Err(invalid("scenario.infeasible_delay_s", "must be > 0"));
        }
        if !(s.flight_time_s >= 0.0) {
            return Err(invalid("scenario.flight_time_s", "must be >= 0"));
        }
        if [s.zeta_ul, s.zeta_dl, s.nu, s.xi].iter().any(|c| !(*c >= 0.0)) {
            return Err(invalid("scenario.zeta_ul", "penalty factors must be >= 0"));
        }
        let m = &self.model;
        if m.max_users == 0 || m.head_dim == 0 || m.hidden_units == 0 {
            return Err(invalid("model.max_users", "model sizes must be > 0"));
        }
        if m.hidden_layers == 0 || m.gmappo_hidden_layers == 0 {
            return Err(invalid("model.hidden_layers", "need at least one hidden layer"));
        }
        let t = &self.train;
        if t.episodes_per_update == 0 {
            return Err(invalid("train.episodes_per_update", "must be > 0"));
        }
        if self.ppo.minibatch_size > self.transitions_per_update() {
            return Err(invalid(
                "ppo.minibatch_size",
                format!(
                    "minibatch {} exceeds the {} transitions collected per update",
                    self.ppo.minibatch_size,
                    self.transitions_per_update()
                ),
            ));
        }
        if !(t.reward_scale > 0.0 && t.reward_scale.is_finite()) {
            return Err(invalid("train.reward_scale", "must be finite and > 0"));
        }
        Ok(())
    }
}

fn lookup_mut<'a>(table: &'a mut toml::Table, path: &[String]) -> Option<&'a mut toml::Value> {
    let (first, rest) = path.split_first()?;
    let v = table.get_mut(first)?;
    if rest.is_empty() {
        return Some(v);
    }
    match v {
        toml::Value::Table(t) => lookup_mut(t, rest),
        _ => None,
    }
}

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{ActionSet, RewardSet, UavAction, UavObservation, USER_STATE_DIM};
use crate::nn::{GaussianPolicy, Graph, MhaEncoder, Mlp, NnError, NodeId, ParamStore, Tensor};
use crate::{NetworkConfig, Result, RunConfig};

/// Resource decided by one agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    OmegaUl,
    OmegaDl,
    Power,
    Alpha,
    Trajectory,
}

impl Role {
    pub const ALL: [Role; 5] = [Role::OmegaUl, Role::OmegaDl, Role::Power, Role::Alpha, Role::Trajectory];

    pub fn name(self) -> &'static str {
        match self {
            Role::OmegaUl => "omega_ul",
            Role::OmegaDl => "omega_dl",
            Role::Power => "power",
            Role::Alpha => "alpha",
            Role::Trajectory => "trajectory",
        }
    }

    pub fn action_dim(self, max_users: usize) -> usize {
        match self {
            Role::Trajectory => 2,
            _ => max_users,
        }
    }

    /// Squash interval of every dimension.
    pub fn bounds(self, cfg: &NetworkConfig) -> (f64, f64) {
        match self {
            Role::OmegaUl | Role::OmegaDl | Role::Alpha => (0.0, 1.0),
            Role::Power => (0.0, cfg.p_max_watt),
            Role::Trajectory => {
                let s = cfg.max_step_m();
                (-s, s)
            }
        }
    }

    pub fn reward(self, r: &RewardSet) -> f64 {
        match self {
            Role::OmegaUl => r.omega_ul,
            Role::OmegaDl => r.omega_dl,
            Role::Power => r.power,
            Role::Alpha => r.alpha,
            Role::Trajectory => r.trajectory,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algo {
    /// One agent per resource role.
    Rmappo,
    /// One agent with the concatenated action of every role.
    Gmappo,
}

impl Algo {
    pub fn name(self) -> &'static str {
        match self {
            Algo::Rmappo => "rmappo",
            Algo::Gmappo => "gmappo",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "rmappo" => Some(Algo::Rmappo),
            "gmappo" => Some(Algo::Gmappo),
            _ => None,
        }
    }
}

/// Actor, Gaussian head and critic of one agent.
#[derive(Debug, Clone)]
pub struct Agent {
    pub name: String,
    /// Role blocks of the action vector, in order.
    pub roles: Vec<Role>,
    pub actor: Mlp,
    pub policy: GaussianPolicy,
    pub critic: Mlp,
}

impl Agent {
    pub fn action_dim(&self, max_users: usize) -> usize {
        self.roles.iter().map(|r| r.action_dim(max_users)).sum()
    }

    pub fn bounds(&self, cfg: &NetworkConfig, max_users: usize) -> Vec<(f64, f64)> {
        self.roles
            .iter()
            .flat_map(|r| std::iter::repeat_n(r.bounds(cfg), r.action_dim(max_users)))
            .collect()
    }

    /// Dimensions that act on something for a UAV with `members` users.
    pub fn active(&self, members: usize, max_users: usize) -> Vec<bool> {
        self.roles
            .iter()
            .flat_map(|r| match r {
                Role::Trajectory => vec![true; 2],
                _ => (0..max_users).map(|i| i < members).collect(),
            })
            .collect()
    }

    pub fn reward(&self, r: &RewardSet) -> f64 {
        match self.roles.as_slice() {
            [role] => role.reward(r),
            _ => r.joint(),
        }
    }
}

/// Everything the agents share: the parameter store, the set encoder and
/// the agents themselves.
#[derive(Debug, Clone)]
pub struct PolicyBundle {
    pub algo: Algo,
    pub store: ParamStore<f64>,
    pub encoder: MhaEncoder,
    pub agents: Vec<Agent>,
    /// Completed update rounds.
    pub version: u64,
    pub num_uavs: usize,
}

/// Network inputs for the UAVs of one slot.
#[derive(Debug, Clone)]
pub struct SlotInputs {
    /// `[U, actor_dim]`.
    pub actor: Tensor<f64>,
    /// `[U, critic_dim]`.
    pub critic: Tensor<f64>,
}

/// Per-agent network outputs for the UAVs of one slot.
#[derive(Debug, Clone)]
pub struct SlotForward {
    /// `[agent][uav]` pre-squash means.
    pub means: Vec<Vec<Vec<f64>>>,
    /// `[agent][uav]` critic outputs without the known-reward offset.
    pub values: Vec<Vec<f64>>,
}

impl PolicyBundle {
    pub fn new(cfg: &RunConfig, algo: Algo, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let m = &cfg.model;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = MhaEncoder::new(&mut store, "encoder", m.max_users, USER_STATE_DIM, m.head_dim, &mut rng);
        let num_uavs = cfg.scenario.num_uavs;
        let actor_in = actor_dim(&encoder);
        let critic_in = critic_dim(&encoder, num_uavs);
        let groups: Vec<(String, Vec<Role>, usize)> = match algo {
            Algo::Rmappo => Role::ALL
                .iter()
                .map(|r| (r.name().to_string(), vec![*r], m.hidden_layers))
                .collect(),
            Algo::Gmappo => vec![("joint".to_string(), Role::ALL.to_vec(), m.gmappo_hidden_layers)],
        };
        let agents = groups
            .into_iter()
            .map(|(name, roles, layers)| {
                let dim: usize = roles.iter().map(|r| r.action_dim(m.max_users)).sum();
                let actor = Mlp::new(&mut store, &format!("{name}.actor"), actor_in, m.hidden_units, layers, dim, 0.01, &mut rng);
                let policy = GaussianPolicy::new(&mut store, &format!("{name}.pi"), dim, m.log_std_init);
                let critic = Mlp::new(&mut store, &format!("{name}.critic"), critic_in, m.hidden_units, layers, 1, 1.0, &mut rng);
                Agent {
                    name,
                    roles,
                    actor,
                    policy,
                    critic,
                }
            })
            .collect();
        Ok(Self {
            algo,
            store,
            encoder,
            agents,
            version: 0,
            num_uavs,
        })
    }

    pub fn max_users(&self) -> usize {
        self.encoder.max_users
    }

    pub fn actor_dim(&self) -> usize {
        actor_dim(&self.encoder)
    }

    pub fn critic_dim(&self) -> usize {
        critic_dim(&self.encoder, self.num_uavs)
    }

    /// Value-only inputs of every UAV for one slot.
    pub fn slot_inputs(&self, obs: &[UavObservation], slot_frac: f64) -> Result<SlotInputs> {
        self.check_uavs(obs.len())?;
        let sets: Vec<Vec<Vec<f64>>> = obs.iter().map(|o| o.users.clone()).collect();
        let enc = self.encoder.encode_values(&self.store, &sets)?;
        let extra = global_extra(obs, slot_frac);
        let mut actor = Vec::with_capacity(obs.len() * self.actor_dim());
        let mut critic = Vec::with_capacity(obs.len() * self.critic_dim());
        for (v, o) in obs.iter().enumerate() {
            let own: Vec<f64> = o.own.iter().chain(enc.row(v)).copied().collect();
            actor.extend_from_slice(&own);
            critic.extend_from_slice(&own);
            critic.extend_from_slice(enc.data());
            critic.extend_from_slice(&extra);
        }
        Ok(SlotInputs {
            actor: Tensor::from_vec(&[obs.len(), self.actor_dim()], actor)?,
            critic: Tensor::from_vec(&[obs.len(), self.critic_dim()], critic)?,
        })
    }

    pub fn forward_slot(&self, obs: &[UavObservation], slot_frac: f64) -> Result<SlotForward> {
        let inputs = self.slot_inputs(obs, slot_frac)?;
        let mut means = Vec::with_capacity(self.agents.len());
        let mut values = Vec::with_capacity(self.agents.len());
        for a in &self.agents {
            let mu = a.actor.forward_values(&self.store, &inputs.actor)?;
            means.push((0..obs.len()).map(|v| mu.row(v).to_vec()).collect());
            let val = a.critic.forward_values(&self.store, &inputs.critic)?;
            values.push(val.data().to_vec());
        }
        Ok(SlotForward { means, values })
    }

    /// Turn per-agent squashed actions (`[agent][uav]`) into environment actions.
    pub fn decode(&self, actions: &[Vec<Vec<f64>>], members: &[usize]) -> ActionSet {
        let m = self.max_users();
        let uavs = members
            .iter()
            .enumerate()
            .map(|(v, &n)| {
                let mut out = UavAction::zeros(n);
                for (a, agent) in self.agents.iter().enumerate() {
                    let mut off = 0;
                    for role in &agent.roles {
                        let block = &actions[a][v][off..off + role.action_dim(m)];
                        match role {
                            Role::OmegaUl => out.omega_ul = block[..n].to_vec(),
                            Role::OmegaDl => out.omega_dl = block[..n].to_vec(),
                            Role::Power => out.p_dl = block[..n].to_vec(),
                            Role::Alpha => out.alpha = block[..n].to_vec(),
                            Role::Trajectory => out.delta_xy = [block[0], block[1]],
                        }
                        off += role.action_dim(m);
                    }
                }
                out
            })
            .collect();
        ActionSet { uavs }
    }

    /// Deterministic squashed-mean actions.
    pub fn mean_actions(&self, obs: &[UavObservation], slot_frac: f64, cfg: &NetworkConfig) -> Result<ActionSet> {
        let fwd = self.forward_slot(obs, slot_frac)?;
        let m = self.max_users();
        let actions: Vec<Vec<Vec<f64>>> = self
            .agents
            .iter()
            .zip(&fwd.means)
            .map(|(a, means)| {
                let bounds = a.bounds(cfg, m);
                means.iter().map(|mu| GaussianPolicy::mode(mu, &bounds)).collect()
            })
            .collect();
        let members: Vec<usize> = obs.iter().map(|o| o.users.len()).collect();
        Ok(self.decode(&actions, &members))
    }

    /// Sampled actions with the draws needed for the PPO buffer.
    pub fn sample_actions(
        &self,
        obs: &[UavObservation],
        slot_frac: f64,
        cfg: &NetworkConfig,
        rng: &mut impl Rng,
    ) -> Result<(ActionSet, Vec<Vec<Draw>>)> {
        let fwd = self.forward_slot(obs, slot_frac)?;
        let m = self.max_users();
        let mut actions = Vec::with_capacity(self.agents.len());
        let mut draws = Vec::with_capacity(self.agents.len());
        for (a, agent) in self.agents.iter().enumerate() {
            let bounds = agent.bounds(cfg, m);
            let mut acts = Vec::with_capacity(obs.len());
            let mut ds = Vec::with_capacity(obs.len());
            for (v, o) in obs.iter().enumerate() {
                let active = agent.active(o.users.len(), m);
                let s = agent.policy.sample(&self.store, &fwd.means[a][v], &bounds, &active, rng);
                acts.push(s.action);
                ds.push(Draw {
                    z: s.z,
                    active,
                    log_prob: s.log_prob,
                    value: fwd.values[a][v],
                });
            }
            actions.push(acts);
            draws.push(ds);
        }
        let members: Vec<usize> = obs.iter().map(|o| o.users.len()).collect();
        Ok((self.decode(&actions, &members), draws))
    }

    /// Recorded network inputs for `(slot observations, uav, slot fraction)`
    /// samples, as `(actor_in, critic_in)` nodes. `store` stands in for
    /// `self.store` while an update holds it.
    pub(crate) fn batch_inputs(
        &self,
        store: &ParamStore<f64>,
        g: &mut Graph<f64>,
        samples: &[(&[UavObservation], usize, f64)],
    ) -> Result<(NodeId, NodeId), NnError> {
        let u = self.num_uavs;
        let mut sets = Vec::with_capacity(samples.len() * u);
        let mut own = Vec::with_capacity(samples.len() * 2);
        let mut extra = Vec::new();
        for (obs, v, frac) in samples {
            sets.extend(obs.iter().map(|o| o.users.clone()));
            own.extend_from_slice(&obs[*v].own);
            extra.extend(global_extra(obs, *frac));
        }
        let b = samples.len();
        let enc = self.encoder.encode(g, store, &sets)?;
        let own_rows: Vec<usize> = samples.iter().enumerate().map(|(i, s)| i * u + s.1).collect();
        let own_enc = g.gather_rows(enc, &own_rows)?;
        let mut all = Vec::with_capacity(u);
        for w in 0..u {
            let rows: Vec<usize> = (0..b).map(|i| i * u + w).collect();
            all.push(g.gather_rows(enc, &rows)?);
        }
        let pos = g.input(Tensor::from_vec(&[b, 2], own)?);
        let actor = g.concat_cols(&[pos, own_enc])?;
        let extra = g.input(Tensor::from_vec(&[b, 2 * u + 1], extra)?);
        let mut parts = vec![actor];
        parts.extend(all);
        parts.push(extra);
        let critic = g.concat_cols(&parts)?;
        Ok((actor, critic))
    }

    fn check_uavs(&self, n: usize) -> Result<()> {
        if n != self.num_uavs {
            return Err(crate::env::EnvError::UavCount {
                expected: self.num_uavs,
                got: n,
            }
            .into());
        }
        Ok(())
    }
}

/// One agent's sampled decision for one UAV.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub z: Vec<f64>,
    pub active: Vec<bool>,
    pub log_prob: f64,
    /// Critic output without the known-reward offset.
    pub value: f64,
}

fn actor_dim(enc: &MhaEncoder) -> usize {
    2 + enc.output_dim()
}

/// Actor input, every UAV's encoding, every UAV's position and the slot fraction.
fn critic_dim(enc: &MhaEncoder, num_uavs: usize) -> usize {
    actor_dim(enc) + num_uavs * enc.output_dim() + 2 * num_uavs + 1
}

fn global_extra(obs: &[UavObservation], slot_frac: f64) -> Vec<f64> {
    obs.iter().flat_map(|o| o.own).chain(std::iter::once(slot_frac)).collect()
}

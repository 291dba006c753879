use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::bundle::{Algo, PolicyBundle};
use crate::env::{self, SlotMetrics, UavObservation, WorldState};
use crate::nn::{Adam, Graph, NodeId, ParamStore, Tensor};
use crate::ppo::{self, normalize, LossInputs, LossStats, PpoError, RolloutBuffer, Transition, UpdateStats};
use crate::{Result, RunConfig};

/// Seeds the per-episode environment stream, kept apart from parameter init.
const ENV_STREAM: u64 = 0x5EED_E4B1;
/// Seeds action sampling and minibatch shuffling.
const POLICY_STREAM: u64 = 0x5EED_90C1;

/// Returns of one training episode. Sums run over slots and are averaged
/// over UAVs; rewards are unscaled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub env_seed: u64,
    /// Environment slots consumed so far, this episode included.
    pub env_steps: usize,
    /// Mean over agents of the reward each agent is trained on.
    pub agent_return: f64,
    pub return_omega_ul: f64,
    pub return_omega_dl: f64,
    pub return_power: f64,
    pub return_alpha: f64,
    pub return_trajectory: f64,
    pub return_joint: f64,
    /// Mean over slots of the summed UAV utilities.
    pub mean_utility: f64,
    pub violations: usize,
    pub allocation_violations: usize,
}

/// Diagnostics of one agent in one update round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateLog {
    pub update: u64,
    pub episode: usize,
    pub agent: String,
    pub loss: f64,
    pub surrogate: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    /// Pre-clip global gradient norm averaged over minibatches (shared by all agents).
    pub grad_norm: f64,
    pub minibatches: usize,
    pub early_stopped: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub episodes: Vec<EpisodeLog>,
    pub updates: Vec<UpdateLog>,
    /// Per-slot metrics of every `slot_log_interval`-th episode.
    pub slots: Vec<(usize, SlotMetrics)>,
}

/// Counters that identify where a run stands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRunState {
    pub env_steps: usize,
    pub episodes: usize,
    pub updates: u64,
    pub best_eval_utility: Option<f64>,
    pub seed: u64,
    pub config_hash: String,
}

/// Options that vary between runs of the same configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub algo: Algo,
    pub seed: u64,
    /// Overrides `train.episodes`.
    pub episodes: Option<usize>,
}

#[derive(Debug, Clone)]
struct Sample {
    step: usize,
    uav: usize,
    z: Vec<f64>,
    active: Vec<bool>,
    log_prob: f64,
    offset: f64,
    advantage: f64,
    ret: f64,
}

#[derive(Debug, Default)]
struct Batch {
    steps: Vec<(Vec<UavObservation>, f64)>,
    /// `[agent][sample]`; every agent lists the same `(step, uav)` pairs in the same order.
    samples: Vec<Vec<Sample>>,
}

impl Batch {
    fn new(agents: usize) -> Self {
        Self {
            steps: Vec::new(),
            samples: vec![Vec::new(); agents],
        }
    }

    fn len(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }

    fn clear(&mut self) {
        self.steps.clear();
        self.samples.iter_mut().for_each(Vec::clear);
    }
}

/// The part of the next reward already fixed by the state: every reward
/// carries `u_prev - u_now`, and `u_prev` is known before acting.
pub(crate) fn known_reward(state: &WorldState, cfg: &RunConfig) -> Vec<f64> {
    let sign = if cfg.scenario.reward_sign_paper { -1.0 } else { 1.0 };
    match &state.u_prev {
        Some(u) => u.iter().map(|x| sign * cfg.train.reward_scale * x).collect(),
        None => vec![0.0; state.num_uavs()],
    }
}

pub fn train_rmappo(cfg: &RunConfig, seed: u64) -> Result<(PolicyBundle, TrainLog, TrainRunState)> {
    train(
        cfg,
        TrainOptions {
            algo: Algo::Rmappo,
            seed,
            episodes: None,
        },
    )
}

pub fn train_gmappo(cfg: &RunConfig, seed: u64) -> Result<(PolicyBundle, TrainLog, TrainRunState)> {
    train(
        cfg,
        TrainOptions {
            algo: Algo::Gmappo,
            seed,
            episodes: None,
        },
    )
}

/// Collect episodes with the current policies and run a PPO round after
/// every `episodes_per_update` episodes.
pub fn train(cfg: &RunConfig, opts: TrainOptions) -> Result<(PolicyBundle, TrainLog, TrainRunState)> {
    let mut bundle = PolicyBundle::new(cfg, opts.algo, opts.seed)?;
    let hyper = &cfg.ppo;
    let mut opt = Adam::new(
        &bundle.store,
        hyper.learning_rate,
        hyper.adam_beta1,
        hyper.adam_beta2,
        hyper.adam_eps,
    );
    let mut env_rng = ChaCha8Rng::seed_from_u64(opts.seed ^ ENV_STREAM);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ POLICY_STREAM);
    let mut run = TrainRunState {
        env_steps: 0,
        episodes: 0,
        updates: 0,
        best_eval_utility: None,
        seed: opts.seed,
        config_hash: cfg.hash(),
    };
    let mut log = TrainLog::default();
    let mut batch = Batch::new(bundle.agents.len());
    let slots = cfg.scenario.num_slots;
    let episodes = opts.episodes.unwrap_or(cfg.train.episodes);

    for ep in 0..episodes {
        if run.env_steps + slots > cfg.train.max_env_steps {
            break;
        }
        let env_seed: u64 = env_rng.random();
        let keep_slots = cfg.train.slot_log_interval > 0 && ep % cfg.train.slot_log_interval == 0;
        let entry = collect_episode(&bundle, cfg, env_seed, &mut batch, &mut rng, |m| {
            if keep_slots {
                log.slots.push((ep, m.clone()));
            }
        })?;
        run.env_steps += slots;
        run.episodes += 1;
        log.episodes.push(EpisodeLog {
            episode: ep,
            env_seed,
            env_steps: run.env_steps,
            ..entry
        });
        if run.episodes % cfg.train.episodes_per_update == 0 {
            update_round(&mut bundle, &mut opt, &mut batch, cfg, &mut rng, ep, &mut log)?;
            run.updates += 1;
        }
    }
    if batch.len() > 0 {
        update_round(&mut bundle, &mut opt, &mut batch, cfg, &mut rng, run.episodes.saturating_sub(1), &mut log)?;
        run.updates += 1;
    }
    Ok((bundle, log, run))
}

fn collect_episode(
    bundle: &PolicyBundle,
    cfg: &RunConfig,
    env_seed: u64,
    batch: &mut Batch,
    rng: &mut ChaCha8Rng,
    mut on_slot: impl FnMut(&SlotMetrics),
) -> Result<EpisodeLog> {
    let (net, scen) = (&cfg.network, &cfg.scenario);
    let n_agents = bundle.agents.len();
    let u = scen.num_uavs;
    let mut world = env::reset(env_seed, net, scen);
    let mut buffers: Vec<Vec<RolloutBuffer<(usize, f64), f64>>> =
        (0..n_agents).map(|_| (0..u).map(|_| RolloutBuffer::new()).collect()).collect();
    let mut role_returns = [0.0; 5];
    let mut joint = 0.0;
    let mut agent_return = 0.0;
    let mut utility = 0.0;
    let mut violations = 0;
    let mut alloc_violations = 0;
    loop {
        let obs = env::observe(&world, net, scen);
        let frac = world.slot as f64 / scen.num_slots as f64;
        let known = known_reward(&world, cfg);
        let (actions, draws) = bundle.sample_actions(&obs, frac, net, rng)?;
        let slot = world.slot;
        let out = env::step(&mut world, &actions, net, scen)?;
        let step = batch.steps.len();
        batch.steps.push((obs, frac));
        for (a, agent) in bundle.agents.iter().enumerate() {
            for v in 0..u {
                let d = &draws[a][v];
                let reward = agent.reward(&out.rewards[v]);
                agent_return += reward / (n_agents * u) as f64;
                buffers[a][v].push(Transition {
                    obs: (step, known[v]),
                    z: d.z.clone(),
                    active: d.active.clone(),
                    log_prob: d.log_prob,
                    value: d.value + known[v],
                    reward: reward * cfg.train.reward_scale,
                    done: out.done,
                    slot,
                });
            }
        }
        for (r, m) in out.rewards.iter().zip(&out.metrics.uavs) {
            for (acc, x) in role_returns.iter_mut().zip(r.as_array()) {
                *acc += x / u as f64;
            }
            joint += r.joint() / u as f64;
            utility += m.utility;
            violations += m.slacks.violations().count();
            alloc_violations += m.slacks.violations().allocation_count();
        }
        on_slot(&out.metrics);
        if out.done {
            break;
        }
    }
    let hyper = &cfg.ppo;
    for (a, streams) in buffers.iter().enumerate() {
        for (v, buf) in streams.iter().enumerate() {
            let (adv, ret) = buf.advantages(hyper.gamma, hyper.lambda, 0.0)?;
            for ((t, adv), ret) in buf.transitions().iter().zip(adv).zip(ret) {
                batch.samples[a].push(Sample {
                    step: t.obs.0,
                    uav: v,
                    z: t.z.clone(),
                    active: t.active.clone(),
                    log_prob: t.log_prob,
                    offset: t.obs.1,
                    advantage: adv,
                    ret,
                });
            }
        }
    }
    Ok(EpisodeLog {
        episode: 0,
        env_seed,
        env_steps: 0,
        agent_return,
        return_omega_ul: role_returns[0],
        return_omega_dl: role_returns[1],
        return_power: role_returns[2],
        return_alpha: role_returns[3],
        return_trajectory: role_returns[4],
        return_joint: joint,
        mean_utility: utility / scen.num_slots as f64,
        violations,
        allocation_violations: alloc_violations,
    })
}

/// One PPO round over the collected batch. All agents share the encoder, so
/// their losses are summed and optimized together.
fn update_round(
    bundle: &mut PolicyBundle,
    opt: &mut Adam<f64>,
    batch: &mut Batch,
    cfg: &RunConfig,
    rng: &mut ChaCha8Rng,
    episode: usize,
    log: &mut TrainLog,
) -> Result<()> {
    let hyper = &cfg.ppo;
    let n_agents = bundle.agents.len();
    let mut advantages: Vec<Vec<f64>> = batch
        .samples
        .iter()
        .map(|s| s.iter().map(|x| x.advantage).collect())
        .collect();
    if hyper.normalize_advantages {
        advantages.iter_mut().for_each(|a| normalize(a));
    }
    let mut per_agent = vec![LossStats::default(); n_agents];
    let mut store = std::mem::take(&mut bundle.store);
    let view: &PolicyBundle = bundle;
    let stats = ppo::update(&mut store, opt, batch.len(), hyper, rng, |g, store, idx| {
        let (loss, stats) = joint_loss(view, store, g, batch, &advantages, idx, hyper)?;
        for (acc, s) in per_agent.iter_mut().zip(&stats) {
            acc.accumulate(s);
        }
        let mut mean = LossStats::default();
        for s in &stats {
            mean.accumulate(&s.scaled(1.0 / n_agents as f64));
        }
        mean.loss = g.value(loss).data()[0];
        Ok((loss, mean))
    });
    bundle.store = store;
    let stats: UpdateStats = stats?;
    bundle.version += 1;
    for (agent, s) in bundle.agents.iter().zip(&per_agent) {
        let s = s.scaled(1.0 / stats.minibatches as f64);
        log.updates.push(UpdateLog {
            update: bundle.version,
            episode,
            agent: agent.name.clone(),
            loss: s.loss,
            surrogate: s.surrogate,
            value_loss: s.value_loss,
            entropy: s.entropy,
            approx_kl: s.approx_kl,
            clip_fraction: s.clip_fraction,
            grad_norm: stats.grad_norm,
            minibatches: stats.minibatches,
            early_stopped: stats.early_stopped,
        });
    }
    batch.clear();
    Ok(())
}

fn joint_loss(
    bundle: &PolicyBundle,
    store: &ParamStore<f64>,
    g: &mut Graph<f64>,
    batch: &Batch,
    advantages: &[Vec<f64>],
    idx: &[usize],
    hyper: &crate::PpoHyper,
) -> std::result::Result<(NodeId, Vec<LossStats>), PpoError> {
    let b = idx.len();
    let first = &batch.samples[0];
    let inputs: Vec<(&[UavObservation], usize, f64)> = idx
        .iter()
        .map(|&i| {
            let (obs, frac) = &batch.steps[first[i].step];
            (obs.as_slice(), first[i].uav, *frac)
        })
        .collect();
    let (actor_in, critic_in) = bundle.batch_inputs(store, g, &inputs)?;
    let mut total: Option<NodeId> = None;
    let mut stats = Vec::with_capacity(bundle.agents.len());
    for (a, agent) in bundle.agents.iter().enumerate() {
        let samples = &batch.samples[a];
        let dim = agent.action_dim(bundle.max_users());
        let mut z = Vec::with_capacity(b * dim);
        let mut mask = Vec::with_capacity(b * dim);
        for &i in idx {
            z.extend_from_slice(&samples[i].z);
            mask.extend(samples[i].active.iter().map(|&x| if x { 1.0 } else { 0.0 }));
        }
        let z = Tensor::from_vec(&[b, dim], z)?;
        let mask = Tensor::from_vec(&[b, dim], mask)?;
        let mean = agent.actor.forward(g, store, actor_in)?;
        let log_prob = agent.policy.log_prob(g, store, mean, z, mask.clone())?;
        let entropy = agent.policy.entropy(g, store, mask)?;
        let raw = agent.critic.forward(g, store, critic_in)?;
        let offset = g.input(Tensor::from_vec(&[b, 1], idx.iter().map(|&i| samples[i].offset).collect())?);
        let value = g.add(raw, offset)?;
        let value = g.sum_cols(value);
        let old: Vec<f64> = idx.iter().map(|&i| samples[i].log_prob).collect();
        let adv: Vec<f64> = idx.iter().map(|&i| advantages[a][i]).collect();
        let ret: Vec<f64> = idx.iter().map(|&i| samples[i].ret).collect();
        let (loss, s) = ppo::ppo_loss(
            g,
            LossInputs {
                log_prob,
                value,
                entropy,
                old_log_prob: &old,
                advantages: &adv,
                returns: &ret,
            },
            hyper,
        )?;
        stats.push(s);
        total = Some(match total {
            Some(t) => g.add(t, loss)?,
            None => loss,
        });
    }
    Ok((total.expect("at least one agent"), stats))
}

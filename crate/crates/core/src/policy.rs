//! High-level SMDP relocation policy, replay memories, baselines and the
//! training loop that grows the option set.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use crate::drop::{generate_options, Alpha, EmbeddingSource, OptionConfig, OptionRegistry, OptionSet};
use crate::error::{Error, Result};
use crate::hexgrid::{PrimitiveAction, NUM_ACTIONS};
use crate::laplace::{embedding_step, EmbedTrainConfig, EmbeddingNet, ObservationPairs, train_embedding};
use crate::nn::{masked_argmax, Adam, DenseNet, NetCheckpoint, Sample};
use crate::sim::{
    discounted_option_reward, Assignment, DecisionKind, DecisionRequest, FeatureSpec, Transition, VehicleStatus,
    WorldState,
};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "random")]
    Random,
    #[serde(rename = "greedy")]
    Greedy,
    #[serde(rename = "dqn")]
    Dqn,
    #[serde(rename = "drdqn")]
    Drdqn,
    #[serde(rename = "drdqn-0")]
    Drdqn0,
    #[serde(rename = "drdqn-inf")]
    DrdqnInf,
    #[serde(rename = "odrdqn")]
    Odrdqn,
    #[serde(rename = "rdrdqn")]
    Rdrdqn,
}

impl ModelKind {
    pub const ALL: [ModelKind; 8] = [
        ModelKind::Random,
        ModelKind::Greedy,
        ModelKind::Dqn,
        ModelKind::Drdqn,
        ModelKind::Drdqn0,
        ModelKind::DrdqnInf,
        ModelKind::Odrdqn,
        ModelKind::Rdrdqn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Random => "random",
            ModelKind::Greedy => "greedy",
            ModelKind::Dqn => "dqn",
            ModelKind::Drdqn => "drdqn",
            ModelKind::Drdqn0 => "drdqn-0",
            ModelKind::DrdqnInf => "drdqn-inf",
            ModelKind::Odrdqn => "odrdqn",
            ModelKind::Rdrdqn => "rdrdqn",
        }
    }

    /// Has a high-level Q-net.
    pub fn is_learned(self) -> bool {
        !matches!(self, ModelKind::Random | ModelKind::Greedy)
    }

    pub fn uses_options(self) -> bool {
        self.is_learned() && self != ModelKind::Dqn
    }

    /// Trip-indicator weight for this variant given the configured one.
    pub fn alpha(self, configured: Alpha) -> Alpha {
        match self {
            ModelKind::Drdqn0 => Alpha::Finite(0.0),
            ModelKind::DrdqnInf => Alpha::Infinite,
            _ => configured,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase().replace('_', "-");
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == lower)
            .ok_or_else(|| Error::UnknownModel(s.to_string()))
    }
}

/// FIFO ring buffer with uniform sampling.
#[derive(Clone, Debug)]
pub struct Replay<T> {
    capacity: usize,
    items: VecDeque<T>,
}

impl<T> Replay<T> {
    pub fn new(capacity: usize) -> Self {
        Replay { capacity: capacity.max(1), items: VecDeque::new() }
    }

    pub fn push(&mut self, item: T) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(item);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, i: usize) -> Option<&T> {
        self.items.get(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.items.iter()
    }

    /// `n` draws with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<&T> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..n).map(|_| &self.items[rng.random_range(0..self.items.len())]).collect()
    }
}

/// `r + gamma^dt * max_next`, without the bootstrap when `max_next` is `None`.
pub fn smdp_target(reward: f64, dt: u32, gamma: f64, max_next: Option<f64>) -> f64 {
    match max_next {
        Some(q) => reward + gamma.powi(dt as i32) * q,
        None => reward,
    }
}

/// Option-value net over `7 + |options|` active outputs out of a fixed maximum.
#[derive(Clone, Debug)]
pub struct HighLevelQNet {
    pub net: DenseNet,
    pub target: DenseNet,
    pub gamma: f64,
    active: usize,
    opt: Adam,
}

impl HighLevelQNet {
    pub fn new<R: Rng + ?Sized>(
        inputs: usize,
        hidden: &[usize],
        max_slots: usize,
        gamma: f64,
        lr: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut sizes = vec![inputs];
        sizes.extend(hidden);
        sizes.push(max_slots);
        let net = DenseNet::new(&sizes, rng)?;
        HighLevelQNet::from_net(net, NUM_ACTIONS.min(max_slots), gamma, lr)
    }

    pub fn from_net(net: DenseNet, active: usize, gamma: f64, lr: f64) -> Result<Self> {
        if active == 0 || active > net.output_size() {
            return Err(Error::InvalidArgument(format!(
                "{active} active slots for a net with {} outputs",
                net.output_size()
            )));
        }
        let opt = Adam::new(&net, lr);
        Ok(HighLevelQNet { target: net.hard_copy(), net, gamma, active, opt })
    }

    pub fn active(&self) -> usize {
        self.active
    }

    pub fn max_slots(&self) -> usize {
        self.net.output_size()
    }

    pub fn mask(&self) -> Vec<bool> {
        (0..self.max_slots()).map(|i| i < self.active).collect()
    }

    /// Activate `k` more slots.
    pub fn augment(&mut self, k: usize) -> Result<()> {
        if self.active + k > self.max_slots() {
            return Err(Error::Config(format!(
                "option slots exhausted: {} active + {k} > {}",
                self.active,
                self.max_slots()
            )));
        }
        self.active += k;
        Ok(())
    }

    pub fn q_values(&self, features: &[f64]) -> Result<Vec<f64>> {
        let mut q = self.net.forward(features)?;
        q.truncate(self.active);
        Ok(q)
    }

    /// Uniform over active slots with probability `epsilon`, else the masked argmax.
    pub fn select<R: Rng + ?Sized>(&self, features: &[f64], epsilon: f64, rng: &mut R) -> Result<(usize, f64)> {
        let q = self.q_values(features)?;
        let best = masked_argmax(&q, self.active);
        let slot = if epsilon > 0.0 && rng.random::<f64>() < epsilon { rng.random_range(0..self.active) } else { best };
        Ok((slot, q[best]))
    }

    pub fn sync_target(&mut self) {
        self.target = self.net.hard_copy();
    }

    /// Bootstrapped SMDP target for one transition under the target net.
    pub fn target_value(&self, tr: &Transition, spec: &FeatureSpec) -> Result<f64> {
        let max_next = if tr.done {
            None
        } else {
            let q = self.target.forward(&spec.encode(&tr.end))?;
            Some(q[..self.active].iter().copied().fold(f64::NEG_INFINITY, f64::max))
        };
        let r = discounted_option_reward(tr.total_reward(), tr.elapsed(), self.gamma)?;
        Ok(smdp_target(r, tr.elapsed(), self.gamma, max_next))
    }

    /// One Adam step on the masked MSE between `Q(s, o)` and the SMDP target.
    pub fn train_step(&mut self, batch: &[&Transition], spec: &FeatureSpec) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let outs = self.max_slots();
        let ends: Vec<Vec<f64>> = batch.iter().filter(|t| !t.done).map(|t| spec.encode(&t.end)).collect();
        let tq = self.target.trace(&ends)?;
        let mut next = 0;
        let mut inputs = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len());
        let mut masks = Vec::with_capacity(batch.len());
        for tr in batch {
            if tr.option >= self.active {
                return Err(Error::InvalidArgument(format!("option slot {} is not active", tr.option)));
            }
            let max_next = if tr.done {
                None
            } else {
                let q = &tq.output(next)[..self.active];
                next += 1;
                Some(q.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            };
            let r = discounted_option_reward(tr.total_reward(), tr.elapsed(), self.gamma)?;
            let mut t = vec![0.0; outs];
            t[tr.option] = smdp_target(r, tr.elapsed(), self.gamma, max_next);
            let mut m = vec![false; outs];
            m[tr.option] = true;
            inputs.push(spec.encode(&tr.start));
            targets.push(t);
            masks.push(m);
        }
        let samples: Vec<Sample<'_>> = (0..batch.len())
            .map(|i| Sample { input: &inputs[i], target: &targets[i], mask: Some(&masks[i]) })
            .collect();
        let (loss, g) = self.net.mse_gradients(&samples)?;
        self.opt.step(&mut self.net, &g)?;
        Ok(loss)
    }

    pub fn to_checkpoint(&self) -> QNetCheckpoint {
        QNetCheckpoint { active: self.active, gamma: self.gamma, net: self.net.to_checkpoint() }
    }

    pub fn from_checkpoint(ck: &QNetCheckpoint, lr: f64) -> Result<Self> {
        HighLevelQNet::from_net(DenseNet::from_checkpoint(&ck.net)?, ck.active, ck.gamma, lr)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QNetCheckpoint {
    pub active: usize,
    pub gamma: f64,
    pub net: NetCheckpoint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub episodes: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Share of all training ticks over which epsilon decays linearly.
    pub epsilon_decay_fraction: f64,
    /// Generate a new option set every this many episodes.
    pub refresh_period: usize,
    pub gamma: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden: Vec<usize>,
    /// Target nets are refreshed every this many ticks.
    pub target_update: u32,
    pub replay_capacity: usize,
    pub relocation_capacity: usize,
    /// High-level update every this many ticks.
    pub train_every: u32,
    /// Low-level option updates every this many ticks.
    pub option_train_every: u32,
    /// Keep training only the newest option generation.
    pub latest_generation_only: bool,
    /// Maximum option slots; computed from the episode count when absent.
    pub max_option_slots: Option<usize>,
    pub options: OptionConfig,
    pub embedding: EmbedTrainConfig,
    /// Write a log row every this many ticks.
    pub log_every: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            episodes: 10,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_fraction: 0.5,
            refresh_period: 2,
            gamma: 0.99,
            batch_size: 256,
            learning_rate: 0.001,
            hidden: vec![128],
            target_update: 100,
            replay_capacity: 100_000,
            relocation_capacity: 30_000,
            train_every: 1,
            option_train_every: 1,
            latest_generation_only: false,
            max_option_slots: None,
            options: OptionConfig::default(),
            embedding: EmbedTrainConfig::default(),
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("epsilon_start", self.epsilon_start), ("epsilon_end", self.epsilon_end)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0, 1]")));
            }
        }
        if !(0.0..=1.0).contains(&self.epsilon_decay_fraction) {
            return Err(Error::Config("epsilon_decay_fraction must be in [0, 1]".into()));
        }
        if self.refresh_period == 0 {
            return Err(Error::Config("refresh_period must be >= 1".into()));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config("gamma must be in (0, 1)".into()));
        }
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Config("batch_size and learning_rate must be positive".into()));
        }
        if self.target_update == 0 || self.train_every == 0 || self.option_train_every == 0 || self.log_every == 0 {
            return Err(Error::Config("target_update, train_every, option_train_every and log_every must be >= 1".into()));
        }
        if let Some(m) = self.max_option_slots {
            if m < NUM_ACTIONS {
                return Err(Error::Config(format!("max_option_slots must be >= {NUM_ACTIONS}")));
            }
        }
        self.options.validate()?;
        self.embedding.validate()
    }

    pub fn slots(&self) -> usize {
        self.max_option_slots
            .unwrap_or(NUM_ACTIONS + self.options.kinds * (self.episodes / self.refresh_period))
            .max(NUM_ACTIONS)
    }

    /// Linear decay from start to end over the first part of training.
    pub fn epsilon_at(&self, tick: u64, total_ticks: u64) -> f64 {
        let horizon = (self.epsilon_decay_fraction * total_ticks as f64).max(1.0);
        let frac = (tick as f64 / horizon).min(1.0);
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac
    }
}

/// A decision rule for every pending relocation decision of a tick.
#[derive(Clone, Debug)]
pub struct Agent {
    pub kind: ModelKind,
    pub spec: FeatureSpec,
    pub qnet: Option<HighLevelQNet>,
    pub registry: OptionRegistry,
    pub epsilon: f64,
    /// `max_o Q(s, o)` of every learned decision since the last drain.
    pub max_q: Vec<f64>,
}

impl Agent {
    pub fn rule(kind: ModelKind, spec: FeatureSpec) -> Result<Self> {
        if kind.is_learned() {
            return Err(Error::InvalidArgument(format!("{kind} needs a trained Q-net")));
        }
        Ok(Agent { kind, spec, qnet: None, registry: OptionRegistry::default(), epsilon: 0.0, max_q: Vec::new() })
    }

    pub fn learned(kind: ModelKind, spec: FeatureSpec, qnet: HighLevelQNet, registry: OptionRegistry) -> Result<Self> {
        if !kind.is_learned() {
            return Err(Error::InvalidArgument(format!("{kind} is a rule policy")));
        }
        if qnet.active() != NUM_ACTIONS + registry.len() {
            return Err(Error::InvalidArgument(format!(
                "{} active slots but {} options",
                qnet.active(),
                registry.len()
            )));
        }
        Ok(Agent { kind, spec, qnet: Some(qnet), registry, epsilon: 0.0, max_q: Vec::new() })
    }

    /// Decide for every pending request of this tick.
    pub fn decide<R: Rng + ?Sized>(
        &mut self,
        world: &WorldState,
        pending: &[DecisionRequest],
        rng: &mut R,
    ) -> Result<Vec<Assignment>> {
        let greedy_hold = self.kind == ModelKind::Greedy && greedy_holds(world);
        let mut out = Vec::with_capacity(pending.len());
        for d in pending {
            let a = match d.kind {
                DecisionKind::Continue { slot, steps_done } => {
                    let opt = self
                        .registry
                        .get(slot - NUM_ACTIONS)
                        .ok_or_else(|| Error::InvalidArgument(format!("unknown option slot {slot}")))?;
                    let x = self.spec.encode(&world.observe(d.agent)?);
                    Assignment { agent: d.agent, slot, horizon: opt.horizon, action: opt.execute_step(&x, steps_done)? }
                }
                DecisionKind::NewOption => match self.kind {
                    ModelKind::Random => Assignment::primitive(d.agent, random_action(rng)),
                    ModelKind::Greedy if greedy_hold => Assignment::primitive(d.agent, PrimitiveAction::STAY),
                    ModelKind::Greedy => Assignment::primitive(d.agent, random_action(rng)),
                    _ => self.choose_learned(world, d.agent, rng)?,
                },
            };
            out.push(a);
        }
        Ok(out)
    }

    fn choose_learned<R: Rng + ?Sized>(&mut self, world: &WorldState, agent: usize, rng: &mut R) -> Result<Assignment> {
        let qnet = self.qnet.as_ref().expect("learned agent has a Q-net");
        let x = self.spec.encode(&world.observe(agent)?);
        let (slot, max_q) = qnet.select(&x, self.epsilon, rng)?;
        self.max_q.push(max_q);
        if slot < NUM_ACTIONS {
            return Ok(Assignment::primitive(agent, PrimitiveAction::new(slot as u8)?));
        }
        let opt = self
            .registry
            .get(slot - NUM_ACTIONS)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown option slot {slot}")))?;
        Ok(Assignment { agent, slot, horizon: opt.horizon, action: opt.execute_step(&x, 0)? })
    }
}

/// Greedy keeps every idle vehicle in place while open requests are at least
/// as many as idle vehicles.
pub fn greedy_holds(world: &WorldState) -> bool {
    let idle = world.vehicles().iter().filter(|v| v.status == VehicleStatus::Idle).count();
    world.open_requests() >= idle
}

pub fn random_action<R: Rng + ?Sized>(rng: &mut R) -> PrimitiveAction {
    PrimitiveAction::new(rng.random_range(0..NUM_ACTIONS as u8)).expect("in range")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub episode: usize,
    pub tick: u32,
    pub max_q_avg: f64,
    pub loss: f64,
    pub epsilon: f64,
    pub options: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub episode: usize,
    pub arrivals: usize,
    pub served: usize,
    pub rejected: usize,
    pub reward: f64,
    pub options: usize,
    pub event_hash: String,
}

/// State of one training run.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub agent: Agent,
    pub memory: Replay<Arc<Transition>>,
    pub relocations: Replay<Arc<Transition>>,
    pub log: Vec<TrainLogRow>,
    pub episodes_done: usize,
    /// Live embedding and its optimizer for online option training.
    online: Option<(usize, Adam)>,
    rng: ChaCha8Rng,
    ticks_done: u64,
    total_ticks: u64,
    max_q_avg: Option<f64>,
}

impl Trainer {
    pub fn new(kind: ModelKind, spec: FeatureSpec, cfg: TrainConfig, episode_ticks: u32, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let agent = if kind.is_learned() {
            let slots = if kind.uses_options() { cfg.slots() } else { NUM_ACTIONS };
            let q = HighLevelQNet::new(spec.width(), &cfg.hidden, slots, cfg.gamma, cfg.learning_rate, &mut rng)?;
            Agent::learned(kind, spec, q, OptionRegistry::default())?
        } else {
            Agent::rule(kind, spec)?
        };
        Ok(Trainer {
            memory: Replay::new(cfg.replay_capacity),
            relocations: Replay::new(cfg.relocation_capacity),
            total_ticks: cfg.episodes as u64 * episode_ticks as u64,
            cfg,
            agent,
            log: Vec::new(),
            episodes_done: 0,
            online: None,
            rng,
            ticks_done: 0,
            max_q_avg: None,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.agent.kind
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Play one training episode on `world` (already reset), learning as it goes.
    pub fn run_episode(&mut self, world: &mut WorldState) -> Result<EpisodeSummary> {
        let episode = self.episodes_done;
        let spec = self.agent.spec;
        let learned = self.agent.kind.is_learned();
        let mut last_loss = f64::NAN;
        while !world.is_done() {
            self.agent.epsilon = if learned { self.cfg.epsilon_at(self.ticks_done, self.total_ticks) } else { 0.0 };
            let pending = world.advance()?;
            let assignments = self.agent.decide(world, &pending, &mut self.rng)?;
            let report = world.commit(&assignments)?;
            for tr in report.transitions {
                let tr = Arc::new(tr);
                if tr.is_relocation && !tr.steps.is_empty() {
                    self.relocations.push(tr.clone());
                }
                self.memory.push(tr);
            }
            if learned {
                for q in self.agent.max_q.drain(..) {
                    self.max_q_avg = Some(match self.max_q_avg {
                        Some(m) => 0.99 * m + 0.01 * q,
                        None => q,
                    });
                }
                if report.tick % self.cfg.train_every == 0 && self.memory.len() >= self.cfg.batch_size {
                    let batch: Vec<&Transition> =
                        self.memory.sample(self.cfg.batch_size, &mut self.rng).into_iter().map(|t| t.as_ref()).collect();
                    let qnet = self.agent.qnet.as_mut().expect("learned");
                    last_loss = qnet.train_step(&batch, &spec)?;
                }
                if (self.ticks_done + 1) % self.cfg.target_update as u64 == 0 {
                    self.agent.qnet.as_mut().expect("learned").sync_target();
                }
                if report.tick % self.cfg.option_train_every == 0 {
                    self.train_options()?;
                }
                if report.tick % self.cfg.log_every == 0 {
                    self.log.push(TrainLogRow {
                        episode,
                        tick: report.tick,
                        max_q_avg: self.max_q_avg.unwrap_or(0.0),
                        loss: last_loss,
                        epsilon: self.agent.epsilon,
                        options: self.agent.registry.len(),
                    });
                }
            }
            self.ticks_done += 1;
        }
        self.episodes_done += 1;
        if self.agent.kind.uses_options() && self.episodes_done % self.cfg.refresh_period == 0 {
            self.refresh_options()?;
        }
        let stats = world.stats();
        Ok(EpisodeSummary {
            episode,
            arrivals: stats.total_arrivals(),
            served: stats.total_served(),
            rejected: stats.total_rejected(),
            reward: stats.reward.iter().sum(),
            options: self.agent.registry.len(),
            event_hash: world.event_hash(),
        })
    }

    fn train_options(&mut self) -> Result<()> {
        if self.agent.registry.is_empty() || self.relocations.is_empty() {
            return Ok(());
        }
        let spec = self.agent.spec;
        let buffer: Vec<&Transition> = self.relocations.iter().map(|t| t.as_ref()).collect();
        if let Some((set_idx, opt)) = self.online.as_mut() {
            let set = &mut self.agent.registry.sets[*set_idx];
            if let EmbeddingSource::Learned(phi) = &mut set.embedding {
                let src = ObservationPairs::from_transitions(
                    spec,
                    self.relocations.sample(self.cfg.embedding.batch_size, &mut self.rng).into_iter().map(|t| t.as_ref()),
                );
                if !src.pairs.is_empty() {
                    embedding_step(phi, opt, &src, &self.cfg.embedding, &mut self.rng)?;
                }
            }
        }
        let nsets = self.agent.registry.sets.len();
        let first = if self.cfg.latest_generation_only { nsets - 1 } else { 0 };
        let mut ocfg = self.cfg.options.clone();
        ocfg.alpha = self.agent.kind.alpha(self.cfg.options.alpha);
        for si in first..nsets {
            let set: &mut OptionSet = &mut self.agent.registry.sets[si];
            for k in 0..set.options.len() {
                set.train_option(k, &buffer, &spec, &ocfg, &mut self.rng)?;
            }
        }
        Ok(())
    }

    /// Generate a new option set from the relocation memory and activate its slots.
    pub fn refresh_options(&mut self) -> Result<()> {
        let kind = self.agent.kind;
        if kind == ModelKind::Odrdqn && !self.agent.registry.sets.is_empty() {
            return Ok(());
        }
        let spec = self.agent.spec;
        let mut ocfg = self.cfg.options.clone();
        ocfg.alpha = kind.alpha(self.cfg.options.alpha);
        let k = ocfg.kinds;
        if self.agent.qnet.as_ref().is_some_and(|q| q.active() + k > q.max_slots()) {
            return Ok(());
        }
        let buffer: Vec<&Transition> = self.relocations.iter().map(|t| t.as_ref()).collect();
        let embedding = if kind == ModelKind::Rdrdqn || matches!(ocfg.alpha, Alpha::Infinite) {
            EmbeddingSource::Random { dim: self.cfg.embedding.dim }
        } else {
            let src = ObservationPairs::from_transitions(spec, buffer.iter().copied());
            let mut phi = EmbeddingNet::new(spec.width(), &self.cfg.embedding, &mut self.rng)?;
            train_embedding(&mut phi, &src, &self.cfg.embedding, &mut self.rng)?;
            EmbeddingSource::Learned(phi)
        };
        let generation = self.agent.registry.sets.len();
        let first_id = self.agent.registry.len();
        let set = generate_options(
            &buffer,
            embedding,
            &spec,
            &ocfg,
            generation,
            self.episodes_done,
            first_id,
            &mut self.rng,
        )?;
        let added = set.options.len();
        self.agent.registry.sets.push(set);
        if let Some(q) = self.agent.qnet.as_mut() {
            q.augment(added)?;
        }
        if kind == ModelKind::Odrdqn {
            let idx = self.agent.registry.sets.len() - 1;
            if let EmbeddingSource::Learned(phi) = &self.agent.registry.sets[idx].embedding {
                self.online = Some((idx, Adam::new(&phi.net, self.cfg.embedding.learning_rate)));
            }
        }
        Ok(())
    }

    /// Frozen copy of the current policy for evaluation.
    pub fn policy(&self) -> Agent {
        let mut a = self.agent.clone();
        a.epsilon = 0.0;
        a.max_q.clear();
        a
    }

    pub fn write_log_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["episode", "tick", "max_q_avg", "loss", "epsilon", "options"])?;
        for r in &self.log {
            wr.write_record([
                r.episode.to_string(),
                r.tick.to_string(),
                r.max_q_avg.to_string(),
                r.loss.to_string(),
                r.epsilon.to_string(),
                r.options.to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// On-disk bundle of a trained policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyCheckpoint {
    pub format: String,
    pub version: u32,
    pub kind: ModelKind,
    pub spec: FeatureSpec,
    pub qnet: Option<QNetCheckpoint>,
    pub options: crate::drop::RegistryCheckpoint,
}

const POLICY_FORMAT: &str = "droplab.policy";

impl Agent {
    pub fn to_checkpoint(&self) -> PolicyCheckpoint {
        PolicyCheckpoint {
            format: POLICY_FORMAT.into(),
            version: 1,
            kind: self.kind,
            spec: self.spec,
            qnet: self.qnet.as_ref().map(|q| q.to_checkpoint()),
            options: self.registry.to_checkpoint(),
        }
    }

    pub fn from_checkpoint(ck: &PolicyCheckpoint) -> Result<Self> {
        if ck.format != POLICY_FORMAT || ck.version != 1 {
            return Err(Error::Checkpoint(format!("unsupported policy format {} v{}", ck.format, ck.version)));
        }
        let registry = OptionRegistry::from_checkpoint(&ck.options, 0.001)?;
        match &ck.qnet {
            Some(q) => Agent::learned(ck.kind, ck.spec, HighLevelQNet::from_checkpoint(q, 0.001)?, registry),
            None => Agent::rule(ck.kind, ck.spec),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(&self.to_checkpoint())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: PolicyCheckpoint = serde_json::from_slice(&std::fs::read(path)?)?;
        Agent::from_checkpoint(&ck)
    }
}

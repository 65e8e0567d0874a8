//! Relocation options: pseudo-rewards over a frozen embedding plus the trip
//! signal, and one-step Q-learning of each option's low-level policy.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::hexgrid::{PrimitiveAction, NUM_ACTIONS};
use crate::laplace::{norm, EmbeddingNet};
use crate::nn::{masked_argmax, Adam, DenseNet, NetCheckpoint, Sample};
use crate::sim::{FeatureSpec, RelocationStep, Transition};

/// Weight of the trip indicator. `Infinite` drops the embedding terms entirely.
#[derive(Copy, Clone, Debug, PartialEq)]
pub enum Alpha {
    Finite(f64),
    Infinite,
}

impl Default for Alpha {
    fn default() -> Self {
        Alpha::Finite(1.0)
    }
}

impl fmt::Display for Alpha {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Alpha::Finite(a) => write!(f, "{a}"),
            Alpha::Infinite => f.write_str("inf"),
        }
    }
}

impl Serialize for Alpha {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Alpha::Finite(a) => s.serialize_f64(*a),
            Alpha::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Alpha {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(a) if a.is_finite() && a >= 0.0 => Ok(Alpha::Finite(a)),
            Raw::Num(a) if a == f64::INFINITY => Ok(Alpha::Infinite),
            Raw::Text(t) if matches!(t.as_str(), "inf" | "infinite" | "infinity") => Ok(Alpha::Infinite),
            _ => Err(serde::de::Error::custom("alpha must be a number >= 0 or \"inf\"")),
        }
    }
}

/// The three pseudo-reward shapes.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum RewardKind {
    /// `||f(s)|| - ||f(s')||`: head towards the embedding origin.
    Inward = 1,
    /// `||f(s')|| - ||f(s)||`: head away from it.
    Outward = 2,
    /// `||f(s) - f(s')||`: take large steps in embedding space.
    Spread = 3,
}

impl TryFrom<u8> for RewardKind {
    type Error = Error;

    fn try_from(k: u8) -> Result<Self> {
        match k {
            1 => Ok(RewardKind::Inward),
            2 => Ok(RewardKind::Outward),
            3 => Ok(RewardKind::Spread),
            _ => Err(Error::InvalidArgument(format!("pseudo-reward kind must be 1, 2 or 3, got {k}"))),
        }
    }
}

impl From<RewardKind> for u8 {
    fn from(k: RewardKind) -> u8 {
        k as u8
    }
}

impl RewardKind {
    pub fn all() -> [RewardKind; 3] {
        [RewardKind::Inward, RewardKind::Outward, RewardKind::Spread]
    }
}

pub fn pseudo_reward(kind: RewardKind, fs: &[f64], fs2: &[f64], indicator: bool, alpha: Alpha) -> Result<f64> {
    if fs.len() != fs2.len() {
        return Err(Error::Dimension { expected: fs.len(), got: fs2.len() });
    }
    let ind = if indicator { 1.0 } else { 0.0 };
    let a = match alpha {
        Alpha::Infinite => return Ok(ind),
        Alpha::Finite(a) => a,
    };
    let geo = match kind {
        RewardKind::Inward => norm(fs) - norm(fs2),
        RewardKind::Outward => norm(fs2) - norm(fs),
        RewardKind::Spread => fs.iter().zip(fs2).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
    };
    Ok(geo + a * ind)
}

/// Where an option set gets `f(s)` for its pseudo-rewards.
#[derive(Clone, Debug, PartialEq)]
pub enum EmbeddingSource {
    Learned(EmbeddingNet),
    /// Fresh `U(0,1)^dim` values on every call.
    Random { dim: usize },
}

impl EmbeddingSource {
    pub fn embed<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        match self {
            EmbeddingSource::Learned(phi) => phi.embed(x),
            EmbeddingSource::Random { dim } => Ok((0..*dim).map(|_| rng.random::<f64>()).collect()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptionConfig {
    /// Options per generation round.
    pub kinds: usize,
    pub horizon: u32,
    pub alpha: Alpha,
    pub warmup_steps: usize,
    pub gamma: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden: Vec<usize>,
    /// Low-level target nets are refreshed every this many updates.
    pub target_update: usize,
}

impl Default for OptionConfig {
    fn default() -> Self {
        OptionConfig {
            kinds: 3,
            horizon: 5,
            alpha: Alpha::Finite(1.0),
            warmup_steps: 2000,
            gamma: 0.9,
            batch_size: 128,
            learning_rate: 0.001,
            hidden: vec![128],
            target_update: 100,
        }
    }
}

impl OptionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kinds > 3 {
            return Err(Error::Config("at most 3 option kinds per generation".into()));
        }
        if self.horizon == 0 {
            return Err(Error::Config("option horizon must be >= 1".into()));
        }
        if let Alpha::Finite(a) = self.alpha {
            if !(a >= 0.0) {
                return Err(Error::Config("alpha must be >= 0".into()));
            }
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config("option gamma must be in (0, 1)".into()));
        }
        if self.batch_size == 0 || !(self.learning_rate > 0.0) || self.target_update == 0 {
            return Err(Error::Config("option batch_size, learning_rate and target_update must be positive".into()));
        }
        Ok(())
    }
}

/// One temporally extended relocation option.
#[derive(Clone, Debug)]
pub struct DropOption {
    pub id: usize,
    pub kind: RewardKind,
    pub horizon: u32,
    pub created_episode: usize,
    pub q: DenseNet,
    pub target: DenseNet,
    opt: Adam,
    updates: usize,
}

impl DropOption {
    pub fn new<R: Rng + ?Sized>(
        id: usize,
        kind: RewardKind,
        inputs: usize,
        cfg: &OptionConfig,
        created_episode: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut sizes = vec![inputs];
        sizes.extend(&cfg.hidden);
        sizes.push(NUM_ACTIONS);
        let q = DenseNet::new(&sizes, rng)?;
        Ok(DropOption::from_net(id, kind, cfg.horizon, created_episode, q, cfg.learning_rate))
    }

    pub fn from_net(id: usize, kind: RewardKind, horizon: u32, created_episode: usize, q: DenseNet, lr: f64) -> Self {
        let opt = Adam::new(&q, lr);
        DropOption { id, kind, horizon, created_episode, target: q.hard_copy(), q, opt, updates: 0 }
    }

    pub fn updates(&self) -> usize {
        self.updates
    }

    /// Greedy primitive move; ties go to the lowest action code.
    pub fn execute_step(&self, features: &[f64], steps_done: u32) -> Result<PrimitiveAction> {
        if steps_done >= self.horizon {
            return Err(Error::InvalidArgument(format!(
                "option {} expired after {} steps",
                self.id, self.horizon
            )));
        }
        let q = self.q.forward(features)?;
        PrimitiveAction::new(masked_argmax(&q, NUM_ACTIONS) as u8)
    }

    pub fn terminated(&self, steps_done: u32) -> bool {
        steps_done >= self.horizon
    }
}

/// A relabelled one-step sample for low-level Q-learning.
#[derive(Clone, Debug)]
pub struct QSample {
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next: Vec<f64>,
}

/// One masked-MSE step towards `r + gamma * max_a' Q_target(s', a')`. Returns the loss.
pub fn q_learning_step(
    net: &mut DenseNet,
    target: &DenseNet,
    opt: &mut Adam,
    batch: &[QSample],
    gamma: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let outs = net.output_size();
    let nexts: Vec<&[f64]> = batch.iter().map(|s| s.next.as_slice()).collect();
    let tq = target.trace(&nexts)?;
    let mut targets = Vec::with_capacity(batch.len());
    let mut masks = Vec::with_capacity(batch.len());
    for (i, s) in batch.iter().enumerate() {
        if s.action >= outs {
            return Err(Error::InvalidArgument(format!("action {} out of range", s.action)));
        }
        let best = tq.output(i).iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut t = vec![0.0; outs];
        t[s.action] = s.reward + gamma * best;
        let mut m = vec![false; outs];
        m[s.action] = true;
        targets.push(t);
        masks.push(m);
    }
    let samples: Vec<Sample<'_>> = batch
        .iter()
        .zip(targets.iter().zip(&masks))
        .map(|(s, (t, m))| Sample { input: &s.state, target: t, mask: Some(m) })
        .collect();
    let (loss, g) = net.mse_gradients(&samples)?;
    opt.step(net, &g)?;
    Ok(loss)
}

/// Draw `n` primitive moves: a transition uniformly, then one of its moves.
pub fn sample_steps<'a, R: Rng + ?Sized>(buffer: &[&'a Transition], n: usize, rng: &mut R) -> Vec<&'a RelocationStep> {
    let with_steps: Vec<&&Transition> = buffer.iter().filter(|t| !t.steps.is_empty()).collect();
    if with_steps.is_empty() {
        return Vec::new();
    }
    (0..n)
        .map(|_| {
            let t = with_steps[rng.random_range(0..with_steps.len())];
            &t.steps[rng.random_range(0..t.steps.len())]
        })
        .collect()
}

/// Options generated together from one embedding.
#[derive(Clone, Debug)]
pub struct OptionSet {
    pub generation: usize,
    pub created_episode: usize,
    pub embedding: EmbeddingSource,
    pub options: Vec<DropOption>,
}

impl OptionSet {
    /// One low-level update of option `k` on moves from `buffer` relabelled with its pseudo-reward.
    pub fn train_option<R: Rng + ?Sized>(
        &mut self,
        k: usize,
        buffer: &[&Transition],
        spec: &FeatureSpec,
        cfg: &OptionConfig,
        rng: &mut R,
    ) -> Result<Option<f64>> {
        let steps = sample_steps(buffer, cfg.batch_size, rng);
        if steps.is_empty() {
            return Ok(None);
        }
        let kind = self.options[k].kind;
        let mut batch = Vec::with_capacity(steps.len());
        for s in steps {
            let x = spec.encode(&s.from);
            let y = spec.encode(&s.to);
            let reward = match cfg.alpha {
                Alpha::Infinite => pseudo_reward(kind, &[], &[], s.indicator, cfg.alpha)?,
                _ => {
                    let fx = self.embedding.embed(&x, rng)?;
                    let fy = self.embedding.embed(&y, rng)?;
                    pseudo_reward(kind, &fx, &fy, s.indicator, cfg.alpha)?
                }
            };
            batch.push(QSample { state: x, action: s.action.index(), reward, next: y });
        }
        let o = &mut self.options[k];
        let loss = q_learning_step(&mut o.q, &o.target, &mut o.opt, &batch, cfg.gamma)?;
        o.updates += 1;
        if o.updates % cfg.target_update == 0 {
            o.target = o.q.hard_copy();
        }
        Ok(Some(loss))
    }
}

/// Build `cfg.kinds` options over a trained (now frozen) embedding and warm
/// each one up with `cfg.warmup_steps` low-level updates.
pub fn generate_options<R: Rng + ?Sized>(
    buffer: &[&Transition],
    embedding: EmbeddingSource,
    spec: &FeatureSpec,
    cfg: &OptionConfig,
    generation: usize,
    episode: usize,
    first_id: usize,
    rng: &mut R,
) -> Result<OptionSet> {
    cfg.validate()?;
    let mut set = OptionSet { generation, created_episode: episode, embedding, options: Vec::new() };
    if cfg.kinds == 0 {
        return Ok(set);
    }
    if !buffer.iter().any(|t| !t.steps.is_empty()) {
        return Err(Error::InsufficientData("no relocation moves to train options on".into()));
    }
    for (k, kind) in RewardKind::all().into_iter().take(cfg.kinds).enumerate() {
        set.options.push(DropOption::new(first_id + k, kind, spec.width(), cfg, episode, rng)?);
        for _ in 0..cfg.warmup_steps {
            set.train_option(k, buffer, spec, cfg, rng)?;
        }
    }
    Ok(set)
}

/// All generated options in slot order (slot = 7 + position).
#[derive(Clone, Debug, Default)]
pub struct OptionRegistry {
    pub sets: Vec<OptionSet>,
}

impl OptionRegistry {
    pub fn len(&self) -> usize {
        self.sets.iter().map(|s| s.options.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(set, index within set)` of an option slot counted from 0.
    pub fn locate(&self, option: usize) -> Option<(usize, usize)> {
        let mut rest = option;
        for (si, s) in self.sets.iter().enumerate() {
            if rest < s.options.len() {
                return Some((si, rest));
            }
            rest -= s.options.len();
        }
        None
    }

    pub fn get(&self, option: usize) -> Option<&DropOption> {
        self.locate(option).map(|(s, k)| &self.sets[s].options[k])
    }

    pub fn options(&self) -> impl Iterator<Item = &DropOption> {
        self.sets.iter().flat_map(|s| s.options.iter())
    }

    pub fn to_checkpoint(&self) -> RegistryCheckpoint {
        RegistryCheckpoint {
            format: REGISTRY_FORMAT.into(),
            version: 1,
            sets: self
                .sets
                .iter()
                .map(|s| SetCheckpoint {
                    generation: s.generation,
                    created_episode: s.created_episode,
                    embedding: match &s.embedding {
                        EmbeddingSource::Learned(phi) => EmbeddingCheckpoint::Learned { net: phi.net.to_checkpoint() },
                        EmbeddingSource::Random { dim } => EmbeddingCheckpoint::Random { dim: *dim },
                    },
                    options: s
                        .options
                        .iter()
                        .map(|o| OptionCheckpoint {
                            id: o.id,
                            kind: o.kind,
                            horizon: o.horizon,
                            created_episode: o.created_episode,
                            q: o.q.to_checkpoint(),
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &RegistryCheckpoint, lr: f64) -> Result<Self> {
        if ck.format != REGISTRY_FORMAT || ck.version != 1 {
            return Err(Error::Checkpoint(format!("unsupported registry format {} v{}", ck.format, ck.version)));
        }
        let mut sets = Vec::new();
        for s in &ck.sets {
            let embedding = match &s.embedding {
                EmbeddingCheckpoint::Learned { net } => {
                    EmbeddingSource::Learned(EmbeddingNet::from_net(DenseNet::from_checkpoint(net)?)?)
                }
                EmbeddingCheckpoint::Random { dim } => EmbeddingSource::Random { dim: *dim },
            };
            let mut options = Vec::new();
            for o in &s.options {
                let q = DenseNet::from_checkpoint(&o.q)?;
                if q.output_size() != NUM_ACTIONS {
                    return Err(Error::Checkpoint(format!("option {} has {} outputs", o.id, q.output_size())));
                }
                options.push(DropOption::from_net(o.id, o.kind, o.horizon.max(1), o.created_episode, q, lr));
            }
            sets.push(OptionSet { generation: s.generation, created_episode: s.created_episode, embedding, options });
        }
        Ok(OptionRegistry { sets })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(&self.to_checkpoint())?)?;
        Ok(())
    }

    pub fn load(path: &Path, lr: f64) -> Result<Self> {
        let ck: RegistryCheckpoint = serde_json::from_slice(&std::fs::read(path)?)?;
        OptionRegistry::from_checkpoint(&ck, lr)
    }
}

const REGISTRY_FORMAT: &str = "droplab.options";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistryCheckpoint {
    pub format: String,
    pub version: u32,
    pub sets: Vec<SetCheckpoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetCheckpoint {
    pub generation: usize,
    pub created_episode: usize,
    pub embedding: EmbeddingCheckpoint,
    pub options: Vec<OptionCheckpoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EmbeddingCheckpoint {
    Learned { net: NetCheckpoint },
    Random { dim: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptionCheckpoint {
    pub id: usize,
    pub kind: RewardKind,
    pub horizon: u32,
    pub created_episode: usize,
    pub q: NetCheckpoint,
}

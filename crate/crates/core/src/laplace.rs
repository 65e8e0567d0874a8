//! Neural approximation of the relocation-graph Laplacian embedding.
//!
//! The net is trained on the unconstrained objective
//! `G(f) = 1/2 E ||f(s) - f(s')||^2 + lambda E H(f(u), f(v))` where `(s, s')`
//! are consecutive relocation states and `u, v` are drawn independently from the
//! empirical state distribution.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::error::{Error, Result};
use crate::hexgrid::GridSpec;
use crate::nn::{Adam, DenseNet, Gradients};
use crate::sim::{FeatureSpec, Observation, Transition};
use crate::terg::Embedding;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedTrainConfig {
    pub dim: usize,
    pub hidden: Vec<usize>,
    pub lambda: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub steps: usize,
}

impl Default for EmbedTrainConfig {
    fn default() -> Self {
        EmbedTrainConfig { dim: 8, hidden: vec![512, 128], lambda: 1.0, batch_size: 32, learning_rate: 0.001, steps: 2000 }
    }
}

impl EmbedTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("embedding dim must be >= 1".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config("lambda must be >= 0".into()));
        }
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Config("batch_size and learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// State embedding net with `dim + 1` outputs; the first output absorbs the
/// constant direction and [`EmbeddingNet::embed`] returns the remaining `dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingNet {
    pub net: DenseNet,
    pub dim: usize,
}

impl EmbeddingNet {
    pub fn new<R: Rng + ?Sized>(inputs: usize, cfg: &EmbedTrainConfig, rng: &mut R) -> Result<Self> {
        let mut sizes = vec![inputs];
        sizes.extend(&cfg.hidden);
        sizes.push(cfg.dim + 1);
        Ok(EmbeddingNet { net: DenseNet::new(&sizes, rng)?, dim: cfg.dim })
    }

    pub fn from_net(net: DenseNet) -> Result<Self> {
        let out = net.output_size();
        if out < 2 {
            return Err(Error::InvalidArgument("embedding net needs at least 2 outputs".into()));
        }
        Ok(EmbeddingNet { net, dim: out - 1 })
    }

    pub fn raw(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.net.forward(x)
    }

    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut y = self.net.forward(x)?;
        y.remove(0);
        Ok(y)
    }

    pub fn embed_norm(&self, x: &[f64]) -> Result<f64> {
        Ok(norm(&self.embed(x)?))
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `1/2 ||fs - fs2||^2`.
pub fn attract_loss(fs: &[f64], fs2: &[f64]) -> Result<f64> {
    if fs.len() != fs2.len() {
        return Err(Error::Dimension { expected: fs.len(), got: fs2.len() });
    }
    Ok(0.5 * fs.iter().zip(fs2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
}

/// `sum_ij (u_i u_j - d_ij)(v_i v_j - d_ij)` for one pair, which expands to
/// `(u.v)^2 - |u|^2 - |v|^2 + D`.
pub fn repulse_term(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Dimension { expected: u.len(), got: v.len() });
    }
    let uv = dot(u, v);
    Ok(uv * uv - dot(u, u) - dot(v, v) + u.len() as f64)
}

/// Batch mean of [`repulse_term`].
pub fn repulse_loss<V: AsRef<[f64]>>(pairs: &[(V, V)]) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let mut s = 0.0;
    for (u, v) in pairs {
        s += repulse_term(u.as_ref(), v.as_ref())?;
    }
    Ok(s / pairs.len() as f64)
}

/// Value and parameter gradients of
/// `G = mean attract(f(s), f(s')) + lambda * mean H(f(u), f(v))` over all outputs.
pub fn objective_gradients<V: AsRef<[f64]>>(
    net: &DenseNet,
    attract: &[(V, V)],
    repulse: &[(V, V)],
    lambda: f64,
) -> Result<(f64, Gradients)> {
    let na = attract.len();
    let nr = repulse.len();
    let mut inputs: Vec<&[f64]> = Vec::with_capacity(2 * (na + nr));
    inputs.extend(attract.iter().map(|p| p.0.as_ref()));
    inputs.extend(attract.iter().map(|p| p.1.as_ref()));
    inputs.extend(repulse.iter().map(|p| p.0.as_ref()));
    inputs.extend(repulse.iter().map(|p| p.1.as_ref()));
    if inputs.is_empty() {
        return Ok((0.0, Gradients::zeros_like(net)));
    }
    let trace = net.trace(&inputs)?;
    let k = net.output_size();
    let mut grad = vec![0.0; inputs.len() * k];
    let mut loss = 0.0;
    if na > 0 {
        let w = 1.0 / na as f64;
        for i in 0..na {
            let (a, b) = (trace.output(i), trace.output(na + i));
            loss += w * attract_loss(a, b)?;
            for j in 0..k {
                let d = w * (a[j] - b[j]);
                grad[i * k + j] += d;
                grad[(na + i) * k + j] -= d;
            }
        }
    }
    if nr > 0 && lambda != 0.0 {
        let w = lambda / nr as f64;
        let base = 2 * na;
        for i in 0..nr {
            let (ru, rv) = (base + i, base + nr + i);
            let (u, v) = (trace.output(ru), trace.output(rv));
            loss += w * repulse_term(u, v)?;
            let uv = dot(u, v);
            for j in 0..k {
                grad[ru * k + j] += w * 2.0 * (uv * v[j] - u[j]);
                grad[rv * k + j] += w * 2.0 * (uv * u[j] - v[j]);
            }
        }
    }
    let g = net.backprop(&trace, &grad)?;
    Ok((loss, g))
}

/// Consecutive state pairs for the attractive term. The repulsive term draws
/// pair endpoints uniformly, i.e. from the empirical state marginal.
pub trait PairSource {
    fn num_pairs(&self) -> usize;
    fn pair(&self, i: usize) -> (Vec<f64>, Vec<f64>);
    /// One endpoint (`second == false` gives the first element).
    fn endpoint(&self, i: usize, second: bool) -> Vec<f64> {
        let (a, b) = self.pair(i);
        if second {
            b
        } else {
            a
        }
    }
}

/// Pairs given directly as feature vectors.
#[derive(Clone, Debug, Default)]
pub struct FeaturePairs {
    pub pairs: Vec<(Vec<f64>, Vec<f64>)>,
}

impl PairSource for FeaturePairs {
    fn num_pairs(&self) -> usize {
        self.pairs.len()
    }

    fn pair(&self, i: usize) -> (Vec<f64>, Vec<f64>) {
        self.pairs[i].clone()
    }

    fn endpoint(&self, i: usize, second: bool) -> Vec<f64> {
        if second {
            self.pairs[i].1.clone()
        } else {
            self.pairs[i].0.clone()
        }
    }
}

/// Pairs of simulator observations, encoded lazily.
#[derive(Clone, Debug)]
pub struct ObservationPairs {
    pub spec: FeatureSpec,
    pub pairs: Vec<(Observation, Observation)>,
}

impl ObservationPairs {
    /// Every primitive move of the given relocation transitions.
    pub fn from_transitions<'a, I: IntoIterator<Item = &'a Transition>>(spec: FeatureSpec, trs: I) -> Self {
        let pairs = trs
            .into_iter()
            .filter(|t| t.is_relocation)
            .flat_map(|t| t.steps.iter().map(|s| (s.from.clone(), s.to.clone())))
            .collect();
        ObservationPairs { spec, pairs }
    }
}

impl PairSource for ObservationPairs {
    fn num_pairs(&self) -> usize {
        self.pairs.len()
    }

    fn pair(&self, i: usize) -> (Vec<f64>, Vec<f64>) {
        let (a, b) = &self.pairs[i];
        (self.spec.encode(a), self.spec.encode(b))
    }

    fn endpoint(&self, i: usize, second: bool) -> Vec<f64> {
        let (a, b) = &self.pairs[i];
        self.spec.encode(if second { b } else { a })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EmbedTrainLog {
    pub losses: Vec<f64>,
}

/// Run `cfg.steps` Adam steps on `G` with minibatches from `source`.
pub fn train_embedding<S: PairSource + ?Sized, R: Rng + ?Sized>(
    phi: &mut EmbeddingNet,
    source: &S,
    cfg: &EmbedTrainConfig,
    rng: &mut R,
) -> Result<EmbedTrainLog> {
    cfg.validate()?;
    let n = source.num_pairs();
    if n < cfg.batch_size {
        return Err(Error::InsufficientData(format!("{n} relocation pairs, need at least {}", cfg.batch_size)));
    }
    let mut opt = Adam::new(&phi.net, cfg.learning_rate);
    let mut log = EmbedTrainLog { losses: Vec::with_capacity(cfg.steps) };
    for _ in 0..cfg.steps {
        log.losses.push(embedding_step(phi, &mut opt, source, cfg, rng)?);
    }
    Ok(log)
}

/// One minibatch update; returns the batch objective before the step.
pub fn embedding_step<S: PairSource + ?Sized, R: Rng + ?Sized>(
    phi: &mut EmbeddingNet,
    opt: &mut Adam,
    source: &S,
    cfg: &EmbedTrainConfig,
    rng: &mut R,
) -> Result<f64> {
    let n = source.num_pairs();
    if n == 0 {
        return Err(Error::InsufficientData("no relocation pairs".into()));
    }
    let attract: Vec<(Vec<f64>, Vec<f64>)> =
        (0..cfg.batch_size).map(|_| source.pair(rng.random_range(0..n))).collect();
    let draw = |rng: &mut R| source.endpoint(rng.random_range(0..n), rng.random_bool(0.5));
    let repulse: Vec<(Vec<f64>, Vec<f64>)> = (0..cfg.batch_size).map(|_| (draw(rng), draw(rng))).collect();
    let (loss, g) = objective_gradients(&phi.net, &attract, &repulse, cfg.lambda)?;
    opt.step(&mut phi.net, &g)?;
    Ok(loss)
}

/// Agreement between a learned embedding and the exact one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    /// Spearman correlation of pairwise distances; `None` when either side is constant.
    pub correlation: Option<f64>,
    pub pairs: usize,
    pub degenerate: bool,
}

/// Rank correlation between pairwise node distances under `learned` (one row per
/// node, same order as `exact`) and under the exact embedding.
pub fn compare_exact(learned: &[Vec<f64>], exact: &Embedding) -> Result<CompareReport> {
    let n = exact.rows.len();
    if learned.len() != n {
        return Err(Error::Dimension { expected: n, got: learned.len() });
    }
    let mut a = Vec::with_capacity(n * (n - 1) / 2);
    let mut b = Vec::with_capacity(a.capacity());
    for i in 0..n {
        for j in i + 1..n {
            a.push(dist(&learned[i], &learned[j]));
            b.push(dist(&exact.rows[i], &exact.rows[j]));
        }
    }
    let corr = spearman(&a, &b);
    Ok(CompareReport { correlation: corr, pairs: a.len(), degenerate: corr.is_none() })
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Average ranks (ties share the mean rank), 1-based.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        // values within 1e-12 relative are treated as ties
        while j + 1 < idx.len() && (x[idx[j + 1]] - x[idx[i]]).abs() <= 1e-12 * x[idx[i]].abs().max(1.0) {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    if a.len() < 2 || a.len() != b.len() {
        return None;
    }
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    pearson(&ranks(a), &ranks(b))
}

/// `q,r,bucket,norm` for every cell and bucket, using local-only features at
/// the middle of each bucket.
pub fn write_norm_csv<W: Write>(
    phi: &EmbeddingNet,
    spec: &FeatureSpec,
    grid: &GridSpec,
    bucket_ticks: u32,
    w: W,
) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["q", "r", "bucket", "norm"])?;
    let buckets = spec.episode_ticks.div_ceil(bucket_ticks);
    for b in 0..buckets {
        let tick = (b * bucket_ticks + bucket_ticks / 2).min(spec.episode_ticks - 1);
        for (i, h) in grid.cells().into_iter().enumerate() {
            let x = spec.encode_local(i, tick);
            wr.write_record([h.q.to_string(), h.r.to_string(), b.to_string(), phi.embed_norm(&x)?.to_string()])?;
        }
    }
    wr.flush()?;
    Ok(())
}

//! Job descriptions and a synchronous runner. The service queues these and
//! the CLI builds them; everything here is plain data plus [`run_job`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::harness::{
    agent_walker, compare, dithering_curve, episode_seed, load_runs, play_episode, run_experiment, write_gaps_csv,
    EpisodeOutcome, Metrics, Report,
};
use crate::hexgrid::HexCoord;
use crate::laplace::{compare_exact, train_embedding, write_norm_csv, EmbeddingNet, ObservationPairs};
use crate::policy::{random_action, Agent, EpisodeSummary, ModelKind, Trainer};
use crate::sim::{Transition, WorldState};
use crate::terg::{write_embedding_csv, RelocationGraph};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum JobSpec {
    /// Rule policy on the configured scenario, with event logs.
    Simulate(RunJob),
    /// Train then evaluate.
    Train(RunJob),
    /// Evaluate a saved policy.
    Evaluate(EvaluateJob),
    /// Record a relocation graph, embed it exactly and with a trained network.
    Embed(EmbedJob),
    Dithering(DitheringJob),
    Compare(CompareJob),
}

impl JobSpec {
    pub fn command(&self) -> &'static str {
        match self {
            JobSpec::Simulate(_) => "simulate",
            JobSpec::Train(_) => "train",
            JobSpec::Evaluate(_) => "evaluate",
            JobSpec::Embed(_) => "embed",
            JobSpec::Dithering(_) => "dithering",
            JobSpec::Compare(_) => "compare",
        }
    }
}

/// Fields shared by every job that needs a scenario.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub config: RunConfig,
    /// Overrides `config.model`.
    pub model: Option<ModelKind>,
    /// Overrides `config.seed`.
    pub seed: Option<u64>,
    /// Artifacts are written here when set.
    pub out_dir: Option<PathBuf>,
    /// Relative paths in the config resolve against this.
    pub base_dir: Option<PathBuf>,
}

impl Scenario {
    pub fn model(&self) -> ModelKind {
        self.model.unwrap_or(self.config.model)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(self.config.seed)
    }

    fn base(&self) -> &Path {
        self.base_dir.as_deref().unwrap_or(Path::new("."))
    }

    fn out(&self) -> Result<Option<&Path>> {
        match &self.out_dir {
            Some(d) => {
                std::fs::create_dir_all(d)?;
                Ok(Some(d))
            }
            None => Ok(None),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunJob {
    #[serde(flatten)]
    pub scenario: Scenario,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateJob {
    #[serde(flatten)]
    pub scenario: Scenario,
    /// Checkpoint written by a train job.
    pub policy: PathBuf,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedJob {
    #[serde(flatten)]
    pub scenario: Scenario,
    /// TERG time bucket; defaults to one simulated hour.
    #[serde(default)]
    pub bucket_ticks: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DitheringJob {
    #[serde(flatten)]
    pub scenario: Scenario,
    /// Walk with a saved policy instead of the uniform random one.
    #[serde(default)]
    pub policy: Option<PathBuf>,
    #[serde(default)]
    pub origin: HexCoord,
    #[serde(default = "default_rings")]
    pub max_ring: u32,
    #[serde(default = "default_trials")]
    pub trials: usize,
}

fn default_rings() -> u32 {
    5
}

fn default_trials() -> usize {
    100_000
}

impl Default for DitheringJob {
    fn default() -> Self {
        DitheringJob {
            scenario: Scenario::default(),
            policy: None,
            origin: HexCoord::ORIGIN,
            max_ring: default_rings(),
            trials: default_trials(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareJob {
    /// Run directories holding `metrics.json`.
    pub runs: Vec<PathBuf>,
    /// Models that should appear; absent ones are listed as missing.
    pub expected: Vec<String>,
    pub baseline: Option<String>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum JobResult {
    Simulate(RunSummary),
    Train(RunSummary),
    Evaluate(RunSummary),
    Embed(EmbedSummary),
    Dithering(DitheringSummary),
    Compare(CompareSummary),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub model: ModelKind,
    pub seed: u64,
    pub metrics: Metrics,
    #[serde(default)]
    pub training: Vec<EpisodeSummary>,
    pub event_hashes: Vec<String>,
    #[serde(default)]
    pub files: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedSummary {
    pub nodes: usize,
    pub edges: usize,
    pub components: usize,
    pub pairs: usize,
    /// Nodes in the largest component, where the comparison is made.
    pub compared_nodes: usize,
    /// Rank correlation of pairwise distances, learned vs exact.
    pub correlation: Option<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
    #[serde(default)]
    pub files: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DitheringSummary {
    pub policy: String,
    pub trials: usize,
    pub curve: Vec<f64>,
    #[serde(default)]
    pub files: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareSummary {
    pub report: Report,
    pub markdown: String,
    #[serde(default)]
    pub files: Vec<String>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Succeeded,
    Failed,
}

impl JobState {
    pub fn is_finished(self) -> bool {
        matches!(self, JobState::Succeeded | JobState::Failed)
    }
}

/// Machine-readable failure, as sent over the wire and printed by the CLI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

impl From<&Error> for ErrorBody {
    fn from(e: &Error) -> Self {
        ErrorBody { code: e.code().into(), message: e.to_string() }
    }
}

/// A job as the service reports it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: String,
    pub command: String,
    pub state: JobState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<JobResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorBody>,
    /// Wall time spent running, once finished.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elapsed_ms: Option<u64>,
}

/// Run a job to completion on the calling thread.
pub fn run_job(spec: &JobSpec) -> Result<JobResult> {
    match spec {
        JobSpec::Simulate(j) => simulate(&j.scenario).map(JobResult::Simulate),
        JobSpec::Train(j) => train(&j.scenario).map(JobResult::Train),
        JobSpec::Evaluate(j) => evaluate_saved(j).map(JobResult::Evaluate),
        JobSpec::Embed(j) => embed(j).map(JobResult::Embed),
        JobSpec::Dithering(j) => dithering(j).map(JobResult::Dithering),
        JobSpec::Compare(j) => compare_runs(j).map(JobResult::Compare),
    }
}

struct Files<'a> {
    dir: Option<&'a Path>,
    written: Vec<String>,
}

impl<'a> Files<'a> {
    fn new(dir: Option<&'a Path>) -> Self {
        Files { dir, written: Vec::new() }
    }

    fn write(&mut self, name: &str, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
        let Some(dir) = self.dir else {
            return Ok(());
        };
        let path = dir.join(name);
        let mut w = BufWriter::new(File::create(&path)?);
        f(&mut w)?;
        w.flush()?;
        self.written.push(path.display().to_string());
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        self.write(name, |w| Ok(serde_json::to_writer_pretty(w, value)?))
    }
}

fn eval_seeds(cfg: &RunConfig, seed: u64) -> Vec<u64> {
    cfg.eval.seeds.iter().map(|s| s.wrapping_add(seed.wrapping_mul(1_000_003))).collect()
}

/// Sequential evaluation that keeps every episode's event log.
fn play_logged(agent: &Agent, sc: &Scenario, files: &mut Files) -> Result<(Metrics, Vec<EpisodeOutcome>)> {
    let cfg = &sc.config;
    let mut sim = cfg.sim_for(agent.kind);
    sim.record_events = files.dir.is_some();
    let demand = cfg.demand.source(&sim, sc.base())?;
    let mut a = agent.clone();
    a.epsilon = 0.0;
    let mut all = Vec::new();
    let mut logs = Vec::new();
    for seed in eval_seeds(cfg, sc.seed()) {
        for e in 0..cfg.eval.episodes {
            let (outcome, log) = play_episode(&mut a, &sim, &demand, seed, e, &cfg.eval.gap_ticks)?;
            logs.push((seed, e, log));
            all.push(outcome);
        }
    }
    files.write("events.jsonl", |w| {
        for (seed, e, log) in &logs {
            for line in log {
                writeln!(w, "{{\"seed\":{seed},\"episode\":{e},\"event\":{line}}}")?;
            }
        }
        Ok(())
    })?;
    Ok((Metrics::from_episodes(agent.kind.name(), sim.fleet_size, &all), all))
}

fn write_run(
    files: &mut Files,
    sc: &Scenario,
    metrics: &Metrics,
    episodes: &[EpisodeOutcome],
    training: Vec<EpisodeSummary>,
) -> Result<RunSummary> {
    files.json("metrics.json", metrics)?;
    files.write("episodes.jsonl", |w| {
        for e in episodes {
            serde_json::to_writer(&mut *w, e)?;
            writeln!(w)?;
        }
        Ok(())
    })?;
    if !sc.config.eval.gap_ticks.is_empty() {
        files.write("gaps.csv", |w| write_gaps_csv(&sc.config.sim.grid, episodes, w))?;
    }
    files.write("config.toml", |w| Ok(w.write_all(sc.config.to_toml()?.as_bytes())?))?;
    Ok(RunSummary {
        model: sc.model(),
        seed: sc.seed(),
        metrics: metrics.clone(),
        training,
        event_hashes: episodes.iter().map(|e| e.event_hash.clone()).collect(),
        files: std::mem::take(&mut files.written),
    })
}

fn simulate(sc: &Scenario) -> Result<RunSummary> {
    let kind = sc.model();
    if kind.is_learned() {
        return Err(Error::InvalidArgument(format!("simulate runs rule policies only, got `{kind}`")));
    }
    let agent = Agent::rule(kind, sc.config.sim_for(kind).features())?;
    let mut files = Files::new(sc.out()?);
    let (metrics, episodes) = play_logged(&agent, sc, &mut files)?;
    write_run(&mut files, sc, &metrics, &episodes, Vec::new())
}

fn train(sc: &Scenario) -> Result<RunSummary> {
    let kind = sc.model();
    let out = run_experiment(&sc.config, kind, sc.seed(), sc.base())?;
    let mut files = Files::new(sc.out()?);
    files.write("policy.json", |w| Ok(serde_json::to_writer(w, &out.agent.to_checkpoint())?))?;
    if let Some(t) = &out.trainer {
        files.write("train_log.csv", |w| t.write_log_csv(w))?;
    }
    files.json("training.json", &out.training)?;
    write_run(&mut files, sc, &out.metrics, &out.episodes, out.training.clone())
}

fn evaluate_saved(j: &EvaluateJob) -> Result<RunSummary> {
    let agent = Agent::load(&j.policy)?;
    let mut sc = j.scenario.clone();
    sc.model = Some(agent.kind);
    let expected = sc.config.sim_for(agent.kind).features();
    if agent.spec != expected {
        return Err(Error::Config(format!(
            "policy was trained for {} cells / {} ticks, config has {} / {}",
            agent.spec.num_cells, agent.spec.episode_ticks, expected.num_cells, expected.episode_ticks
        )));
    }
    let mut files = Files::new(sc.out()?);
    let (metrics, episodes) = play_logged(&agent, &sc, &mut files)?;
    write_run(&mut files, &sc, &metrics, &episodes, Vec::new())
}

fn embed(j: &EmbedJob) -> Result<EmbedSummary> {
    let sc = &j.scenario;
    let cfg = &sc.config;
    let kind = sc.model();
    let sim = cfg.sim_for(kind);
    let bucket = j.bucket_ticks.unwrap_or(sim.hour_ticks);
    if bucket == 0 {
        return Err(Error::InvalidArgument("bucket_ticks must be positive".into()));
    }
    let demand = cfg.demand.source(&sim, sc.base())?;
    let spec = sim.features();
    let mut trainer = Trainer::new(kind, spec, cfg.train.clone(), sim.episode_ticks, sc.seed())?;
    let mut world = WorldState::new(sim.clone(), demand, episode_seed(sc.seed(), 0))?;
    for e in 0..cfg.train.episodes {
        world.reset(episode_seed(sc.seed(), e));
        trainer.run_episode(&mut world)?;
    }
    let buffer: Vec<&Transition> = trainer.relocations.iter().map(|t| t.as_ref()).collect();
    let cells = sim.grid.cells();
    let mut graph = RelocationGraph::new(bucket);
    for tr in &buffer {
        graph.record_transition(tr, &cells)?;
    }
    if graph.is_empty() {
        return Err(Error::InsufficientData("no relocation moves were recorded".into()));
    }
    let ecfg = &cfg.train.embedding;
    let comps = graph.embed_components(ecfg.dim)?;
    let src = ObservationPairs::from_transitions(spec, buffer.iter().copied());
    let mut rng = ChaCha8Rng::seed_from_u64(sc.seed() ^ 0xE3B);
    let mut phi = EmbeddingNet::new(spec.width(), ecfg, &mut rng)?;
    let log = train_embedding(&mut phi, &src, ecfg, &mut rng)?;

    let largest = comps.iter().max_by_key(|c| c.nodes.len());
    let (compared, correlation) = match largest {
        Some(c) if c.nodes.len() > 2 => {
            let learned: Vec<Vec<f64>> = c
                .nodes
                .iter()
                .map(|&i| {
                    let n = graph.nodes()[i];
                    let cell = sim.grid.index_of(n.cell).expect("recorded cells are on the grid");
                    let tick = (n.bucket * bucket).min(sim.episode_ticks - 1);
                    phi.embed(&spec.encode_local(cell, tick))
                })
                .collect::<Result<_>>()?;
            (c.nodes.len(), compare_exact(&learned, &c.embedding)?.correlation)
        }
        Some(c) => (c.nodes.len(), None),
        None => (0, None),
    };

    let mut files = Files::new(sc.out()?);
    files.write("terg.csv", |w| graph.write_csv(w))?;
    files.write("embedding.csv", |w| write_embedding_csv(&graph, &comps, w))?;
    files.write("norms.csv", |w| write_norm_csv(&phi, &spec, &sim.grid, bucket, w))?;
    files.write("embed_loss.csv", |w| {
        writeln!(w, "step,loss")?;
        for (i, l) in log.losses.iter().enumerate() {
            writeln!(w, "{i},{l}")?;
        }
        Ok(())
    })?;
    files.write("phi.json", |w| Ok(serde_json::to_writer(w, &phi.net.to_checkpoint())?))?;
    let window = (log.losses.len() / 10).max(1);
    let avg = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len().max(1) as f64;
    let n = log.losses.len();
    let summary = EmbedSummary {
        nodes: graph.num_nodes(),
        edges: graph.edges().count(),
        components: comps.len(),
        pairs: src.pairs.len(),
        compared_nodes: compared,
        correlation,
        initial_loss: avg(&log.losses[..window.min(n)]),
        final_loss: avg(&log.losses[n.saturating_sub(window)..]),
        files: Vec::new(),
    };
    files.json("embed.json", &summary)?;
    Ok(EmbedSummary { files: files.written, ..summary })
}

fn dithering(j: &DitheringJob) -> Result<DitheringSummary> {
    if j.max_ring == 0 || j.trials == 0 {
        return Err(Error::InvalidArgument("max_ring and trials must be positive".into()));
    }
    let sc = &j.scenario;
    let mut rng = ChaCha8Rng::seed_from_u64(sc.seed());
    let (name, curve) = match &j.policy {
        None => ("random".to_string(), dithering_curve(|_, _, r| random_action(r), j.origin, j.max_ring, j.trials, &mut rng)),
        Some(path) => {
            let agent = Agent::load(path)?;
            let grid = sc.config.sim_for(agent.kind).grid;
            if !grid.contains(j.origin) {
                return Err(Error::InvalidArgument(format!("origin {:?} is off the grid", j.origin)));
            }
            let mut curve = vec![0.0; j.max_ring as usize];
            for _ in 0..j.trials {
                // a fresh walker per trial so option state does not leak
                let walk = agent_walker(&agent, &grid);
                let c = dithering_curve(walk, j.origin, j.max_ring, 1, &mut rng);
                for (acc, x) in curve.iter_mut().zip(c) {
                    *acc += x;
                }
            }
            curve.iter_mut().for_each(|x| *x /= j.trials as f64);
            (agent.kind.name().to_string(), curve)
        }
    };
    let mut files = Files::new(sc.out()?);
    files.write("curve.csv", |w| {
        writeln!(w, "ring,probability")?;
        for (i, p) in curve.iter().enumerate() {
            writeln!(w, "{},{p}", i + 1)?;
        }
        Ok(())
    })?;
    Ok(DitheringSummary { policy: name, trials: j.trials, curve, files: files.written })
}

fn compare_runs(j: &CompareJob) -> Result<CompareSummary> {
    if j.runs.is_empty() {
        return Err(Error::InsufficientData("no run directories given".into()));
    }
    let dirs: Vec<&Path> = j.runs.iter().map(|p| p.as_path()).collect();
    let runs = load_runs(&dirs)?;
    let report = compare(&runs, &j.expected, j.baseline.as_deref());
    let markdown = report.to_markdown();
    let out = match &j.out_dir {
        Some(d) => {
            std::fs::create_dir_all(d)?;
            Some(d.as_path())
        }
        None => None,
    };
    let mut files = Files::new(out);
    files.write("report.csv", |w| report.write_csv(w))?;
    files.write("report.md", |w| Ok(w.write_all(markdown.as_bytes())?))?;
    files.json("report.json", &report)?;
    Ok(CompareSummary { report, markdown, files: files.written })
}

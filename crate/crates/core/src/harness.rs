//! Metrics, evaluation, diagnostics and model comparison.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

use crate::config::RunConfig;
use crate::demand::DemandSource;
use crate::error::{Error, Result};
use crate::hexgrid::{apply_action, hex_distance, GridSpec, HexCoord, PrimitiveAction, NUM_ACTIONS};
use crate::nn::masked_argmax;
use crate::policy::{Agent, EpisodeSummary, ModelKind, Trainer};
use crate::sim::{EpisodeStats, SimConfig, WorldState};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Period {
    Peak,
    OffPeak,
    Night,
    Overall,
}

impl Period {
    pub const ALL: [Period; 4] = [Period::Peak, Period::OffPeak, Period::Night, Period::Overall];

    /// Hour of day belongs to this period (Overall takes every hour).
    pub fn contains(self, hour_of_day: usize) -> bool {
        match self {
            Period::Peak => matches!(hour_of_day, 8 | 9 | 18 | 19),
            Period::OffPeak => (10..14).contains(&hour_of_day),
            Period::Night => matches!(hour_of_day, 3 | 4),
            Period::Overall => true,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Period::Peak => "Peak",
            Period::OffPeak => "Off-peak",
            Period::Night => "Night",
            Period::Overall => "Overall",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PeriodMetrics {
    /// Reward per vehicle-hour, mean over episodes.
    pub revenue_mean: f64,
    pub revenue_std: f64,
    /// Percent of arrivals rejected, pooled over episodes.
    pub rejection_rate: f64,
    /// Percent of arrivals matched to a vehicle.
    pub served_rate: f64,
    pub arrivals: usize,
    pub served: usize,
    pub rejected: usize,
    /// No arrivals fell in the period, so the rates are reported as 0.
    pub no_arrivals: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub model: String,
    pub episodes: usize,
    pub fleet_size: usize,
    pub peak: PeriodMetrics,
    pub off_peak: PeriodMetrics,
    pub night: PeriodMetrics,
    pub overall: PeriodMetrics,
    /// Open at episode end, summed over episodes.
    pub pending: usize,
}

impl Metrics {
    pub fn period(&self, p: Period) -> &PeriodMetrics {
        match p {
            Period::Peak => &self.peak,
            Period::OffPeak => &self.off_peak,
            Period::Night => &self.night,
            Period::Overall => &self.overall,
        }
    }

    fn period_mut(&mut self, p: Period) -> &mut PeriodMetrics {
        match p {
            Period::Peak => &mut self.peak,
            Period::OffPeak => &mut self.off_peak,
            Period::Night => &mut self.night,
            Period::Overall => &mut self.overall,
        }
    }

    /// Aggregate per-hour episode statistics. Hours wrap modulo 24.
    pub fn from_episodes(model: &str, fleet_size: usize, episodes: &[EpisodeOutcome]) -> Self {
        let mut m = Metrics { model: model.to_string(), episodes: episodes.len(), fleet_size, ..Default::default() };
        m.pending = episodes.iter().map(|e| e.pending).sum();
        for p in Period::ALL {
            let mut revenues = Vec::with_capacity(episodes.len());
            let (mut arr, mut srv, mut rej) = (0, 0, 0);
            for e in episodes {
                let s = &e.stats;
                let hours: Vec<usize> = (0..s.reward.len()).filter(|h| p.contains(h % 24)).collect();
                if !hours.is_empty() && fleet_size > 0 {
                    let total: f64 = hours.iter().map(|&h| s.reward[h]).sum();
                    revenues.push(total / (fleet_size as f64 * hours.len() as f64));
                }
                arr += hours.iter().map(|&h| s.arrivals[h]).sum::<usize>();
                srv += hours.iter().map(|&h| s.served[h]).sum::<usize>();
                rej += hours.iter().map(|&h| s.rejected[h]).sum::<usize>();
            }
            let pm = m.period_mut(p);
            let (mean, std) = mean_std(&revenues);
            pm.revenue_mean = mean;
            pm.revenue_std = std;
            pm.arrivals = arr;
            pm.served = srv;
            pm.rejected = rej;
            pm.no_arrivals = arr == 0;
            if arr > 0 {
                pm.rejection_rate = 100.0 * rej as f64 / arr as f64;
                pm.served_rate = 100.0 * srv as f64 / arr as f64;
            }
        }
        m
    }
}

pub fn mean_std(x: &[f64]) -> (f64, f64) {
    if x.is_empty() {
        return (0.0, 0.0);
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// What one evaluation episode leaves behind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub seed: u64,
    pub episode: usize,
    pub stats: EpisodeStats,
    pub pending: usize,
    pub event_hash: String,
    /// `(tick, per-cell gap)` for every requested capture tick.
    #[serde(default)]
    pub gaps: Vec<(u32, Vec<i64>)>,
}

/// Per cell: open requests minus vehicles present (any status).
pub fn gap_grid(world: &WorldState) -> Vec<i64> {
    let open = world.snapshot().channel(1).to_vec();
    let vehicles = world.vehicle_counts();
    open.iter().zip(&vehicles).map(|(r, v)| *r as i64 - *v as i64).collect()
}

/// Mix a run seed and an episode index into a world seed.
pub fn episode_seed(seed: u64, episode: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (episode as u64).wrapping_mul(0xD1B5_4A32_D192_ED03) ^ 0x5DEE_CE66
}

/// Play one episode with a frozen policy.
pub fn play_episode(
    agent: &mut Agent,
    sim: &SimConfig,
    demand: &DemandSource,
    seed: u64,
    episode: usize,
    gap_ticks: &[u32],
) -> Result<(EpisodeOutcome, Vec<String>)> {
    let wseed = episode_seed(seed, episode);
    let mut world = WorldState::new(sim.clone(), demand.clone(), wseed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(wseed ^ 0xA5A5);
    let mut gaps = Vec::new();
    while !world.is_done() {
        let pending = world.advance()?;
        if gap_ticks.contains(&world.clock()) {
            gaps.push((world.clock(), gap_grid(&world)));
        }
        let a = agent.decide(&world, &pending, &mut rng)?;
        world.commit(&a)?;
    }
    agent.max_q.clear();
    let outcome = EpisodeOutcome {
        seed,
        episode,
        stats: world.stats().clone(),
        pending: world.open_requests(),
        event_hash: world.event_hash(),
        gaps,
    };
    Ok((outcome, world.event_log().to_vec()))
}

/// Evaluate a frozen policy over `seeds x episodes` days.
pub fn evaluate(
    agent: &Agent,
    sim: &SimConfig,
    demand: &DemandSource,
    seeds: &[u64],
    episodes: usize,
    gap_ticks: &[u32],
    parallel: bool,
) -> Result<(Metrics, Vec<EpisodeOutcome>)> {
    let run_seed = |seed: u64| -> Result<Vec<EpisodeOutcome>> {
        let mut a = agent.clone();
        a.epsilon = 0.0;
        (0..episodes).map(|e| play_episode(&mut a, sim, demand, seed, e, gap_ticks).map(|r| r.0)).collect()
    };
    let per_seed: Vec<Result<Vec<EpisodeOutcome>>> = if parallel && seeds.len() > 1 {
        std::thread::scope(|s| {
            let handles: Vec<_> = seeds.iter().map(|&seed| s.spawn(move || run_seed(seed))).collect();
            handles.into_iter().map(|h| h.join().expect("evaluation thread panicked")).collect()
        })
    } else {
        seeds.iter().map(|&s| run_seed(s)).collect()
    };
    let mut all = Vec::new();
    for r in per_seed {
        all.extend(r?);
    }
    Ok((Metrics::from_episodes(agent.kind.name(), sim.fleet_size, &all), all))
}

/// Output of [`run_experiment`].
pub struct ExperimentOutput {
    pub agent: Agent,
    pub trainer: Option<Trainer>,
    pub training: Vec<EpisodeSummary>,
    pub metrics: Metrics,
    pub episodes: Vec<EpisodeOutcome>,
}

/// Train `kind` (if it learns) with `seed`, then evaluate on the configured seeds.
pub fn run_experiment(cfg: &RunConfig, kind: ModelKind, seed: u64, base: &Path) -> Result<ExperimentOutput> {
    let sim = cfg.sim_for(kind);
    let demand = cfg.demand.source(&sim, base)?;
    let (agent, trainer, training) = train_model(cfg, kind, seed, &sim, &demand)?;
    let eval_seeds: Vec<u64> = cfg.eval.seeds.iter().map(|s| s.wrapping_add(seed.wrapping_mul(1_000_003))).collect();
    let (metrics, episodes) =
        evaluate(&agent, &sim, &demand, &eval_seeds, cfg.eval.episodes, &cfg.eval.gap_ticks, cfg.eval.parallel)?;
    Ok(ExperimentOutput { agent, trainer, training, metrics, episodes })
}

/// Train a learned model for `cfg.train.episodes` episodes; rule policies come back unchanged.
pub fn train_model(
    cfg: &RunConfig,
    kind: ModelKind,
    seed: u64,
    sim: &SimConfig,
    demand: &DemandSource,
) -> Result<(Agent, Option<Trainer>, Vec<EpisodeSummary>)> {
    let spec = sim.features();
    if !kind.is_learned() {
        return Ok((Agent::rule(kind, spec)?, None, Vec::new()));
    }
    let mut trainer = Trainer::new(kind, spec, cfg.train.clone(), sim.episode_ticks, seed)?;
    let mut world = WorldState::new(sim.clone(), demand.clone(), episode_seed(seed, 0))?;
    let mut summaries = Vec::new();
    for e in 0..cfg.train.episodes {
        world.reset(episode_seed(seed, e));
        summaries.push(trainer.run_episode(&mut world)?);
    }
    Ok((trainer.policy(), Some(trainer), summaries))
}

/// Monte Carlo estimate of `P(reach ring n within n steps)` for n = 1..=max_ring,
/// walking from `origin` on an otherwise empty grid.
pub fn dithering_curve<R, P>(mut policy: P, origin: HexCoord, max_ring: u32, trials: usize, rng: &mut R) -> Vec<f64>
where
    R: Rng + ?Sized,
    P: FnMut(HexCoord, u32, &mut R) -> PrimitiveAction,
{
    let radius = max_ring + origin.q.unsigned_abs() + origin.r.unsigned_abs() + 1;
    let grid = GridSpec { radius, pitch: 1.0, speed: 1.0 };
    let mut hits = vec![0usize; max_ring as usize];
    for _ in 0..trials {
        let mut pos = origin;
        // still on the outward frontier after every step so far
        for step in 1..=max_ring {
            let a = policy(pos, step - 1, rng);
            pos = apply_action(pos, a, &grid);
            if hex_distance(origin, pos) < step {
                break;
            }
            hits[step as usize - 1] += 1;
        }
    }
    hits.iter().map(|h| *h as f64 / trials.max(1) as f64).collect()
}

/// Step rule that follows a learned policy on local-only features.
pub fn agent_walker<'a>(
    agent: &'a Agent,
    grid: &GridSpec,
) -> impl FnMut(HexCoord, u32, &mut ChaCha8Rng) -> PrimitiveAction + 'a {
    let cells = grid.clone();
    let mut current: Option<(usize, u32)> = None;
    move |pos, tick, _rng| {
        let Some(cell) = cells.index_of(pos) else {
            return PrimitiveAction::STAY;
        };
        let x = agent.spec.encode_local(cell, tick);
        if let Some((k, done)) = current {
            if let Some(o) = agent.registry.get(k) {
                if !o.terminated(done) {
                    current = Some((k, done + 1));
                    return o.execute_step(&x, done).unwrap_or(PrimitiveAction::STAY);
                }
            }
            current = None;
        }
        let Some(q) = agent.qnet.as_ref() else {
            return PrimitiveAction::STAY;
        };
        let Ok(values) = q.q_values(&x) else {
            return PrimitiveAction::STAY;
        };
        let slot = masked_argmax(&values, q.active());
        if slot < NUM_ACTIONS {
            return PrimitiveAction::new(slot as u8).unwrap_or(PrimitiveAction::STAY);
        }
        let k = slot - NUM_ACTIONS;
        match agent.registry.get(k) {
            Some(o) => {
                current = Some((k, 1));
                o.execute_step(&x, 0).unwrap_or(PrimitiveAction::STAY)
            }
            None => PrimitiveAction::STAY,
        }
    }
}

pub fn write_gaps_csv<W: Write>(grid: &GridSpec, episodes: &[EpisodeOutcome], w: W) -> Result<()> {
    let cells = grid.cells();
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["seed", "episode", "tick", "q", "r", "gap"])?;
    for e in episodes {
        for (tick, g) in &e.gaps {
            for (h, v) in cells.iter().zip(g) {
                wr.write_record([
                    e.seed.to_string(),
                    e.episode.to_string(),
                    tick.to_string(),
                    h.q.to_string(),
                    h.r.to_string(),
                    v.to_string(),
                ])?;
            }
        }
    }
    wr.flush()?;
    Ok(())
}

/// One row of the comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub revenue: [String; 4],
    pub rejection: [String; 4],
    pub served_rate: f64,
    /// Overall revenue change against the baseline row, in percent.
    pub improvement: Option<f64>,
    #[serde(skip)]
    raw_revenue: [f64; 4],
    #[serde(skip)]
    raw_rejection: [f64; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub baseline: Option<String>,
    pub rows: Vec<ReportRow>,
    pub missing: Vec<String>,
}

fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

/// Build the comparison table. `expected` lists models that must be present;
/// absent ones are reported in `missing`. The improvement column is relative
/// to `baseline` (default "dqn") when that model is present.
pub fn compare(runs: &[Metrics], expected: &[String], baseline: Option<&str>) -> Report {
    let base_name = baseline.unwrap_or("dqn");
    let base = runs.iter().find(|m| m.model == base_name).map(|m| m.overall.revenue_mean);
    let rows = runs
        .iter()
        .map(|m| {
            let raw_revenue = Period::ALL.map(|p| m.period(p).revenue_mean);
            let raw_rejection = Period::ALL.map(|p| m.period(p).rejection_rate);
            ReportRow {
                model: m.model.clone(),
                revenue: Period::ALL.map(|p| format!("{:.1} ± {:.1}", m.period(p).revenue_mean, m.period(p).revenue_std)),
                rejection: Period::ALL.map(|p| format!("{:.1}", m.period(p).rejection_rate)),
                served_rate: round1(m.overall.served_rate),
                improvement: base
                    .filter(|b| *b != 0.0 && m.model != base_name)
                    .map(|b| round1(100.0 * (m.overall.revenue_mean - b) / b.abs())),
                raw_revenue,
                raw_rejection,
            }
        })
        .collect();
    let missing = expected.iter().filter(|e| !runs.iter().any(|m| &m.model == *e)).cloned().collect();
    Report { baseline: base.map(|_| base_name.to_string()), rows, missing }
}

impl Report {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["model".to_string()];
        header.extend(Period::ALL.map(|p| format!("revenue_{}", p.label().to_lowercase())));
        header.extend(Period::ALL.map(|p| format!("rejection_{}", p.label().to_lowercase())));
        header.push("served_rate".into());
        header.push("improvement_pct".into());
        wr.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.model.clone()];
            rec.extend(r.revenue.iter().cloned());
            rec.extend(r.rejection.iter().cloned());
            rec.push(format!("{:.1}", r.served_rate));
            rec.push(r.improvement.map(|x| format!("{x:.1}")).unwrap_or_default());
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Markdown table with the best value of each column in bold.
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        s.push_str("| Model | Rev. Peak | Rev. Off-peak | Rev. Night | Rev. Overall | Rej. Peak | Rej. Off-peak | Rej. Night | Rej. Overall | Served % | Impr. % |\n");
        s.push_str("|---|---|---|---|---|---|---|---|---|---|---|\n");
        let best = |vals: Vec<f64>, max: bool| -> Option<f64> {
            vals.into_iter().reduce(|a, b| if (b > a) == max { b } else { a })
        };
        let best_rev: Vec<Option<f64>> =
            (0..4).map(|k| best(self.rows.iter().map(|r| round1(r.raw_revenue[k])).collect(), true)).collect();
        let best_rej: Vec<Option<f64>> =
            (0..4).map(|k| best(self.rows.iter().map(|r| round1(r.raw_rejection[k])).collect(), false)).collect();
        let best_served = best(self.rows.iter().map(|r| r.served_rate).collect(), true);
        let bold = |text: &str, hit: bool| if hit { format!("**{text}**") } else { text.to_string() };
        for r in &self.rows {
            s.push_str(&format!("| {} ", r.model));
            for k in 0..4 {
                s.push_str(&format!("| {} ", bold(&r.revenue[k], Some(round1(r.raw_revenue[k])) == best_rev[k])));
            }
            for k in 0..4 {
                s.push_str(&format!("| {} ", bold(&r.rejection[k], Some(round1(r.raw_rejection[k])) == best_rej[k])));
            }
            s.push_str(&format!("| {} ", bold(&format!("{:.1}", r.served_rate), Some(r.served_rate) == best_served)));
            s.push_str(&format!("| {} |\n", r.improvement.map(|x| format!("{x:.1}")).unwrap_or_else(|| "-".into())));
        }
        s
    }
}

/// Read `metrics.json` from each run directory.
pub fn load_runs(dirs: &[&Path]) -> Result<Vec<Metrics>> {
    let mut out = Vec::new();
    let mut missing = Vec::new();
    for d in dirs {
        let p = d.join("metrics.json");
        match std::fs::read(&p) {
            Ok(bytes) => out.push(serde_json::from_slice(&bytes)?),
            Err(_) => missing.push(d.display().to_string()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::InsufficientData(format!("runs without metrics.json: {}", missing.join(", "))));
    }
    Ok(out)
}

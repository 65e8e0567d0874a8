//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any failure.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use droplab_core::config::RunConfig;
use droplab_core::demand::DemandSource;
use droplab_core::harness::{dithering_curve, episode_seed, run_experiment};
use droplab_core::hexgrid::{apply_action, GridSpec, HexCoord, PrimitiveAction};
use droplab_core::laplace::{compare_exact, objective_gradients, train_embedding, EmbedTrainConfig, EmbeddingNet, FeaturePairs};
use droplab_core::nn::{DenseNet, Sample};
use droplab_core::policy::{greedy_holds, random_action, Agent, HighLevelQNet, ModelKind, TrainConfig, Trainer};
use droplab_core::sim::{
    discounted_option_reward, EventKind, FeatureSpec, GlobalSnapshot, Observation, SimConfig, Transition, VehicleStatus,
    WorldState,
};
use droplab_core::terg::{check_degree_norm, exact_embedding, LaplacianView, DegreeNormOutcome, RelocationGraph, TergNode};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DESK: &str = include_str!("../../../configs/desk.toml");

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn desk() -> RunConfig {
    RunConfig::from_toml(DESK).expect("desk config")
}

fn geometric_oracle(total: f64, dt: u32, gamma: f64) -> f64 {
    let per_tick = total / dt as f64;
    let mut s = 0.0;
    let mut g = 1.0;
    for _ in 0..dt {
        s += per_tick * g;
        g *= gamma;
    }
    s
}

fn c1_discount() -> Outcome {
    let mut worst: f64 = 0.0;
    for gamma in [0.5, 0.9, 0.99] {
        for dt in 1..=50u32 {
            for total in [1.0, -2.5, 4.75] {
                let got = discounted_option_reward(total, dt, gamma).unwrap();
                worst = worst.max((got - geometric_oracle(total, dt, gamma)).abs());
            }
        }
    }
    outcome(worst <= 1e-12, format!("max abs error {worst:.2e}"))
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt() + b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if scale < 1e-12 {
        0.0
    } else {
        diff / scale
    }
}

fn central_diff(net: &DenseNet, f: &dyn Fn(&DenseNet) -> f64) -> Vec<f64> {
    let h = 1e-6;
    let n = net.num_params();
    (0..n)
        .map(|j| {
            let mut p = net.clone();
            *p.params_mut().nth(j).unwrap() += h;
            let up = f(&p);
            let mut m = net.clone();
            *m.params_mut().nth(j).unwrap() -= h;
            (up - f(&m)) / (2.0 * h)
        })
        .collect()
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn c2_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_mse, mut worst_g): (f64, f64) = (0.0, 0.0);
    for _ in 0..20 {
        let inputs = rng.random_range(2..6);
        let mut sizes = vec![inputs];
        for _ in 0..rng.random_range(1..3) {
            sizes.push(rng.random_range(3..8));
        }
        let outputs = rng.random_range(2..5);
        sizes.push(outputs);
        let mut net = DenseNet::new(&sizes, &mut rng).unwrap();
        // nonzero biases keep every pre-activation off the rectifier kink
        for p in net.params_mut() {
            *p = rng.random_range(-1.0..1.0);
        }

        let b = 4;
        let xs: Vec<Vec<f64>> = (0..b).map(|_| rand_vec(&mut rng, inputs)).collect();
        let ts: Vec<Vec<f64>> = (0..b).map(|_| rand_vec(&mut rng, outputs)).collect();
        let ms: Vec<Vec<bool>> = (0..b).map(|_| (0..outputs).map(|_| rng.random_bool(0.6)).collect()).collect();
        let samples: Vec<Sample<'_>> =
            (0..b).map(|i| Sample { input: &xs[i], target: &ts[i], mask: Some(&ms[i]) }).collect();
        let mse = |n: &DenseNet| -> f64 {
            let mut l = 0.0;
            for i in 0..b {
                let y = n.forward(&xs[i]).unwrap();
                for k in 0..outputs {
                    if ms[i][k] {
                        l += (y[k] - ts[i][k]).powi(2);
                    }
                }
            }
            l / b as f64
        };
        let (_, g) = net.mse_gradients(&samples).unwrap();
        worst_mse = worst_mse.max(rel_err(&g.flatten(), &central_diff(&net, &mse)));

        let attract: Vec<(Vec<f64>, Vec<f64>)> =
            (0..3).map(|_| (rand_vec(&mut rng, inputs), rand_vec(&mut rng, inputs))).collect();
        let repulse: Vec<(Vec<f64>, Vec<f64>)> =
            (0..3).map(|_| (rand_vec(&mut rng, inputs), rand_vec(&mut rng, inputs))).collect();
        let lambda = 0.7;
        let d = (outputs - 1) as f64;
        let objective = |n: &DenseNet| -> f64 {
            let f = |x: &Vec<f64>| n.forward(x).unwrap();
            let a: f64 = attract
                .iter()
                .map(|(s, t)| 0.5 * f(s).iter().zip(f(t)).map(|(p, q)| (p - q).powi(2)).sum::<f64>())
                .sum::<f64>()
                / attract.len() as f64;
            let r: f64 = repulse
                .iter()
                .map(|(s, t)| {
                    let (u, v) = (f(s), f(t));
                    let uv: f64 = u.iter().zip(&v).map(|(p, q)| p * q).sum();
                    let uu: f64 = u.iter().map(|p| p * p).sum();
                    let vv: f64 = v.iter().map(|p| p * p).sum();
                    uv * uv - uu - vv + d
                })
                .sum::<f64>()
                / repulse.len() as f64;
            a + lambda * r
        };
        let (_, g) = objective_gradients(&net, &attract, &repulse, lambda).unwrap();
        worst_g = worst_g.max(rel_err(&g.flatten(), &central_diff(&net, &objective)));
    }
    outcome(worst_mse < 1e-4 && worst_g < 1e-4, format!("worst relative error: mse {worst_mse:.2e}, G {worst_g:.2e}"))
}

fn random_connected(rng: &mut ChaCha8Rng, n: usize) -> Vec<(usize, usize, f64)> {
    let mut edges = Vec::new();
    for i in 1..n {
        edges.push((rng.random_range(0..i), i, rng.random_range(1..=5) as f64));
    }
    for _ in 0..n {
        let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
        if a != b {
            edges.push((a, b, rng.random_range(1..=5) as f64));
        }
    }
    edges
}

fn c3_laplacian() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut ortho, mut rows, mut eig): (f64, f64, f64) = (0.0, 0.0, 0.0);
    let (mut pass, mut decided) = (0, 0);
    for _ in 0..100 {
        let n = rng.random_range(3..=30);
        let edges = random_connected(&mut rng, n);
        let lap = LaplacianView::from_edges(n, &edges);
        let mut dense = DMatrix::<f64>::zeros(n, n);
        for &(a, b, w) in &edges {
            dense[(a, b)] -= w;
            dense[(b, a)] -= w;
            dense[(a, a)] += w;
            dense[(b, b)] += w;
        }
        rows = rows.max(lap.row_sums().iter().fold(0.0, |m, x| m.max(x.abs())));
        let dim = 8.min(n - 2).max(1);
        let emb = exact_embedding(&lap, dim).unwrap();
        for i in 0..dim {
            for j in 0..dim {
                let dot: f64 = emb.column(i).iter().zip(emb.column(j)).map(|(a, b)| a * b).sum();
                ortho = ortho.max((dot - if i == j { 1.0 } else { 0.0 }).abs());
            }
        }
        let mut oracle: Vec<f64> = dense.symmetric_eigen().eigenvalues.iter().copied().collect();
        oracle.sort_by(f64::total_cmp);
        eig = eig.max(oracle[0].abs()).max((emb.lambda0 - oracle[0]).abs());
        for k in 0..dim {
            eig = eig.max((emb.eigenvalues[k] - oracle[k + 1]).abs());
        }
        let r = check_degree_norm(&lap, &emb).unwrap();
        if r.outcome != DegreeNormOutcome::Inconclusive {
            decided += 1;
            if r.outcome == DegreeNormOutcome::Pass {
                pass += 1;
            }
        }
    }
    let rate = pass as f64 / decided.max(1) as f64;
    outcome(
        ortho <= 1e-9 && rows <= 1e-9 && eig <= 1e-9 && rate >= 0.95,
        format!(
            "orthonormality {ortho:.1e}, row sums {rows:.1e}, eigenvalues vs oracle {eig:.1e}, degree-norm gap {pass}/{decided} = {:.1}%",
            100.0 * rate
        ),
    )
}

fn c4_neural_embedding() -> Outcome {
    let grid = GridSpec::new(2, 1.0, 1.0).unwrap();
    let bucket = 4;
    let spec = FeatureSpec { num_cells: grid.num_cells(), episode_ticks: 12, count_scale: 1.0 };
    let feat = |n: &TergNode| spec.encode_local(grid.index_of(n.cell).unwrap(), n.bucket * bucket);
    let cells = grid.cells();
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let mut g = RelocationGraph::new(bucket);
    let mut pairs = Vec::new();
    for _ in 0..3000 {
        let mut pos = cells[rng.random_range(0..cells.len())];
        for t in 0..11u32 {
            let next = apply_action(pos, PrimitiveAction::new(rng.random_range(0..7)).unwrap(), &grid);
            let (x, y) = (g.node_at(pos, t), g.node_at(next, t + 1));
            if x != y {
                if g.num_nodes() >= 40 && (g.node_index(&x).is_none() || g.node_index(&y).is_none()) {
                    break;
                }
                g.record(x, y).unwrap();
                pairs.push((feat(&x), feat(&y)));
            }
            pos = next;
        }
    }
    let comps = g.components();
    if g.num_nodes() != 40 || comps.len() != 1 {
        return outcome(false, format!("fixture has {} nodes in {} components", g.num_nodes(), comps.len()));
    }
    let lap = g.laplacian(&comps[0]);
    let exact = exact_embedding(&lap, 8).unwrap();
    let cfg = EmbedTrainConfig { dim: 8, hidden: vec![128, 64], learning_rate: 3e-4, steps: 40_000, ..Default::default() };
    let mut phi = EmbeddingNet::new(spec.width(), &cfg, &mut rng).unwrap();
    train_embedding(&mut phi, &FeaturePairs { pairs }, &cfg, &mut rng).unwrap();
    let learned: Vec<Vec<f64>> = comps[0].iter().map(|&i| phi.embed(&feat(&g.nodes()[i])).unwrap()).collect();
    let report = compare_exact(&learned, &exact).unwrap();
    let corr = report.correlation.unwrap_or(f64::NAN);
    outcome(corr >= 0.7, format!("rank correlation {corr:.3} over {} node pairs", report.pairs))
}

fn c5_simulator() -> Outcome {
    let cfg = desk();
    let mut sim = cfg.sim.clone();
    sim.record_events = true;
    let demand = cfg.demand.source(&sim, Path::new(".")).unwrap();
    let mut problems = Vec::new();
    let mut matches = 0;
    let mut hashes = Vec::new();
    for ep in 0..20u64 {
        let seed = episode_seed(5, ep as usize);
        let run = |check: bool, problems: &mut Vec<String>, matches: &mut usize| -> String {
            let mut w = WorldState::new(sim.clone(), demand.clone(), seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut served: HashMap<usize, usize> = HashMap::new();
            while !w.is_done() {
                let pending = w.advance().unwrap();
                let a: Vec<_> = pending
                    .iter()
                    .map(|d| droplab_core::sim::Assignment::primitive(d.agent, random_action(&mut rng)))
                    .collect();
                let report = w.commit(&a).unwrap();
                if !check {
                    continue;
                }
                let statuses = w.status_counts();
                let offline = w.vehicles().iter().filter(|v| v.status == VehicleStatus::Offline).count();
                let placed: usize = w.vehicle_counts().iter().sum();
                let snap = w.snapshot();
                let online: usize = snap.channel(0).iter().chain(snap.channel(2)).map(|c| *c as usize).sum();
                if statuses.iter().sum::<usize>() != sim.fleet_size
                    || placed != sim.fleet_size
                    || online + offline != sim.fleet_size
                {
                    problems.push(format!("tick {}: {online} online + {offline} offline", report.tick));
                }
                for m in &report.matches {
                    *matches += 1;
                    if m.wait > sim.max_wait || m.eta > sim.max_pickup_ticks {
                        problems.push(format!("request {} wait {} eta {}", m.request, m.wait, m.eta));
                    }
                }
                for e in &report.events {
                    if e.kind == EventKind::Match {
                        *served.entry(e.request.unwrap()).or_default() += 1;
                    }
                }
            }
            if check && served.values().any(|c| *c > 1) {
                problems.push("a request was matched twice".into());
            }
            if check && w.event_log().is_empty() {
                problems.push("empty event log".into());
            }
            w.event_hash()
        };
        let first = run(true, &mut problems, &mut matches);
        let again = run(false, &mut problems, &mut matches);
        if first != again {
            problems.push(format!("episode {ep}: event hash differs between runs"));
        }
        hashes.push(first);
    }
    hashes.sort();
    hashes.dedup();
    let distinct = hashes.len() == 20;
    outcome(
        problems.is_empty() && matches > 0 && distinct,
        format!("{matches} assignments checked, {} distinct hashes, problems: {:?}", hashes.len(), problems.first()),
    )
}

/// Exact probability that every one of the first `n` uniform moves steps outward.
fn outward_probability(n: u32) -> f64 {
    fn dist(q: i32, r: i32) -> u32 {
        ((q.abs() + r.abs() + (q + r).abs()) / 2) as u32
    }
    const MOVES: [(i32, i32); 7] = [(0, 0), (1, 0), (1, -1), (0, -1), (-1, 0), (-1, 1), (0, 1)];
    fn walk(q: i32, r: i32, step: u32, n: u32) -> f64 {
        if step == n {
            return 1.0;
        }
        MOVES
            .iter()
            .filter(|(dq, dr)| dist(q + dq, r + dr) == step + 1)
            .map(|(dq, dr)| walk(q + dq, r + dr, step + 1, n) / 7.0)
            .sum()
    }
    walk(0, 0, 0, n)
}

fn c6_dithering() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let curve = dithering_curve(
        |_, _, r: &mut ChaCha8Rng| PrimitiveAction::new(r.random_range(0..7)).unwrap(),
        HexCoord::ORIGIN,
        5,
        100_000,
        &mut rng,
    );
    let monotone = curve.windows(2).all(|w| w[1] <= w[0]);
    let (p1, p2) = (outward_probability(1), outward_probability(2));
    let ok = monotone && (curve[0] - 6.0 / 7.0).abs() <= 0.01 && (curve[1] - p2).abs() <= 0.03 && (p1 - 6.0 / 7.0).abs() < 1e-15;
    let shown: Vec<String> = curve.iter().map(|p| format!("{p:.4}")).collect();
    outcome(ok, format!("curve [{}], oracle ring 2 = {p2:.4}", shown.join(", ")))
}

fn served_rate(cfg: &RunConfig, kind: ModelKind, seed: u64) -> (f64, f64) {
    let out = run_experiment(cfg, kind, seed, Path::new(".")).unwrap();
    (out.metrics.overall.served_rate, out.metrics.overall.rejection_rate)
}

fn c7_ordering() -> Outcome {
    let cfg = desk();
    let mut means = Vec::new();
    for kind in [ModelKind::Random, ModelKind::Dqn, ModelKind::Drdqn] {
        let rates: Vec<f64> = (0..5).map(|s| served_rate(&cfg, kind, s).0).collect();
        means.push(rates.iter().sum::<f64>() / rates.len() as f64);
    }
    let (random, dqn, drdqn) = (means[0], means[1], means[2]);
    outcome(
        drdqn >= dqn && dqn >= random && drdqn - random >= 10.0,
        format!("served %: drdqn {drdqn:.1}, dqn {dqn:.1}, random {random:.1}"),
    )
}

fn c8_greedy() -> Outcome {
    let cfg = desk();
    let sim = cfg.sim_for(ModelKind::Greedy);
    let demand = cfg.demand.source(&sim, Path::new(".")).unwrap();
    let mut agent = Agent::rule(ModelKind::Greedy, sim.features()).unwrap();
    let mut w = WorldState::new(sim, demand, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut held, mut violations) = (0, 0);
    while !w.is_done() {
        let pending = w.advance().unwrap();
        let holds = greedy_holds(&w);
        let a = agent.decide(&w, &pending, &mut rng).unwrap();
        let report = w.commit(&a).unwrap();
        if holds {
            held += 1;
            violations += report
                .events
                .iter()
                .filter(|e| e.kind == EventKind::Relocate && e.value != Some(0.0))
                .count();
        }
    }
    let seeds = 0..3;
    let greedy: f64 = seeds.clone().map(|s| served_rate(&cfg, ModelKind::Greedy, s).1).sum::<f64>() / 3.0;
    let random: f64 = seeds.map(|s| served_rate(&cfg, ModelKind::Random, s).1).sum::<f64>() / 3.0;
    outcome(
        violations == 0 && held > 0 && greedy < random,
        format!("{held} holding ticks, {violations} non-stay moves; rejection % greedy {greedy:.1} vs random {random:.1}"),
    )
}

fn small_setup() -> (SimConfig, DemandSource, TrainConfig) {
    let mut cfg = RunConfig::from_toml(
        r#"
[sim]
fleet_size = 6
episode_ticks = 60
hour_ticks = 10
entry_window = 0
count_scale = 0.1
[sim.grid]
radius = 2
[demand]
mode = "synthetic"
base_rate = 0.02
[train]
episodes = 6
refresh_period = 2
batch_size = 16
hidden = [16]
[train.options]
batch_size = 16
warmup_steps = 20
hidden = [16]
[train.embedding]
hidden = [16]
batch_size = 16
steps = 20
"#,
    )
    .unwrap();
    cfg.sim.record_events = false;
    let demand = cfg.demand.source(&cfg.sim, Path::new(".")).unwrap();
    (cfg.sim, demand, cfg.train)
}

fn c9_bookkeeping() -> Outcome {
    let (sim, demand, train) = small_setup();
    let mut t = Trainer::new(ModelKind::Drdqn, sim.features(), train.clone(), sim.episode_ticks, 9).unwrap();
    let mut w = WorldState::new(sim.clone(), demand.clone(), 0).unwrap();
    let mut active = vec![t.agent.qnet.as_ref().unwrap().active()];
    for e in 0..6 {
        w.reset(episode_seed(9, e));
        t.run_episode(&mut w).unwrap();
        active.push(t.agent.qnet.as_ref().unwrap().active());
    }
    let q = t.agent.qnet.as_ref().unwrap();
    let mask_ok = q.max_slots() == 16 && q.mask().iter().all(|m| *m);
    let count = t.agent.registry.len();

    let mut t2 = Trainer::new(ModelKind::Drdqn, sim.features(), train, sim.episode_ticks, 9).unwrap();
    w.reset(episode_seed(9, 0));
    t2.run_episode(&mut w).unwrap();
    let probe: Vec<f64> = {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        (0..sim.features().width()).map(|_| rng.random_range(0.0..1.0)).collect()
    };
    let before = t2.agent.qnet.as_ref().unwrap().net.forward(&probe).unwrap();
    t2.refresh_options().unwrap();
    let q2 = t2.agent.qnet.as_ref().unwrap();
    let after = q2.net.forward(&probe).unwrap();
    let identical = before.iter().zip(&after).all(|(a, b)| a.to_bits() == b.to_bits()) && q2.active() == 10;
    outcome(
        count == 9 && active == vec![7, 7, 10, 10, 13, 13, 16] && mask_ok && identical,
        format!("{count} options, active slots per episode {active:?}, outputs bit-identical across augmentation: {identical}"),
    )
}

fn c10_smdp() -> Outcome {
    let gamma = 0.9;
    let spec = FeatureSpec { num_cells: 2, episode_ticks: 100, count_scale: 1.0 };
    let snap = Arc::new(GlobalSnapshot { tick: 0, num_cells: 2, counts: vec![0; 6] });
    let obs = |cell| Observation { global: snap.clone(), tick: 0, cell };
    // (state, option, rewards per tick, next state)
    let model: [(usize, usize, Vec<f64>, usize); 4] = [
        (0, 0, vec![1.0, 0.5], 1),
        (0, 1, vec![0.2], 0),
        (1, 0, vec![2.0, 0.0, 1.0], 0),
        (1, 1, vec![0.3], 1),
    ];
    let transitions: Vec<Transition> = model
        .iter()
        .map(|(s, o, r, s2)| Transition {
            agent: 0,
            start: obs(*s),
            option: *o,
            rewards: r.clone(),
            end: obs(*s2),
            is_relocation: false,
            done: false,
            steps: Vec::new(),
        })
        .collect();
    let mut v = [[0.0f64; 2]; 2];
    for _ in 0..2000 {
        let mut next = v;
        for (s, o, r, s2) in &model {
            let dt = r.len() as u32;
            let rate = geometric_oracle(r.iter().sum(), dt, gamma);
            next[*s][*o] = rate + gamma.powi(dt as i32) * v[*s2][0].max(v[*s2][1]);
        }
        v = next;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let net = DenseNet::new(&[spec.width(), 2], &mut rng).unwrap();
    let mut q = HighLevelQNet::from_net(net, 2, gamma, 0.05).unwrap();
    let batch: Vec<&Transition> = transitions.iter().collect();
    for (lr, steps) in [(0.05, 20_000), (0.005, 10_000), (0.0005, 10_000), (0.00005, 5_000)] {
        let net = q.net.clone();
        q = HighLevelQNet::from_net(net, 2, gamma, lr).unwrap();
        for i in 0..steps {
            q.train_step(&batch, &spec).unwrap();
            if i % 20 == 19 {
                q.sync_target();
            }
        }
    }
    let mut worst: f64 = 0.0;
    for s in 0..2 {
        let got = q.q_values(&spec.encode(&obs(s))).unwrap();
        for o in 0..2 {
            worst = worst.max((got[o] - v[s][o]).abs());
        }
    }
    outcome(worst <= 1e-3, format!("max |Q - Q*| = {worst:.2e}, Q*(0,.) = [{:.4}, {:.4}]", v[0][0], v[0][1]))
}

type Criterion = (&'static str, fn() -> Outcome, Duration);

fn main() {
    let criteria: [Criterion; 10] = [
        ("time-discount identity", c1_discount, Duration::from_secs(1)),
        ("gradient fidelity", c2_gradients, Duration::from_secs(30)),
        ("laplacian oracle", c3_laplacian, Duration::from_secs(60)),
        ("neural vs exact embedding", c4_neural_embedding, Duration::from_secs(120)),
        ("simulator invariants", c5_simulator, Duration::from_secs(60)),
        ("dithering", c6_dithering, Duration::from_secs(30)),
        ("learning ordering", c7_ordering, Duration::from_secs(20 * 60)),
        ("greedy baseline contract", c8_greedy, Duration::from_secs(60)),
        ("option bookkeeping", c9_bookkeeping, Duration::from_secs(60)),
        ("smdp convergence", c10_smdp, Duration::from_secs(10)),
    ];
    let only: Option<usize> = std::env::args().skip(1).find_map(|a| a.parse().ok());
    let mut failed = 0;
    for (i, (name, run, budget)) in criteria.iter().enumerate() {
        if only.is_some_and(|k| k != i + 1) {
            continue;
        }
        let start = Instant::now();
        let o = run();
        let took = start.elapsed();
        let pass = o.pass && took <= *budget;
        if !pass {
            failed += 1;
        }
        println!(
            "{} [{:>2}] {name}: {} ({:.2}s, budget {}s)",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            o.detail,
            took.as_secs_f64(),
            budget.as_secs()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

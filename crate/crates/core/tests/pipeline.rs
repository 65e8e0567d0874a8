use std::path::Path;

use droplab_core::config::RunConfig;
use droplab_core::harness::{compare, evaluate, run_experiment, Period};
use droplab_core::laplace::{train_embedding, EmbedTrainConfig, EmbeddingNet, FeaturePairs};
use droplab_core::policy::{Agent, ModelKind};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SMALL: &str = r#"
[sim]
fleet_size = 6
episode_ticks = 96
hour_ticks = 4
entry_window = 2
count_scale = 0.1
[sim.grid]
radius = 2
speed = 300.0
[demand]
mode = "synthetic"
base_rate = 0.01
hotspots = [{ cell = { q = 1, r = 0 }, peak_rate = 0.3, peak_hour = 9.0, width = 4.0 }]
[train]
episodes = 2
refresh_period = 1
batch_size = 16
hidden = [16]
[train.options]
batch_size = 16
warmup_steps = 10
hidden = [16]
[train.embedding]
hidden = [16]
batch_size = 16
steps = 10
[eval]
seeds = [1, 2]
episodes = 2
"#;

#[test]
fn trained_policy_evaluates_and_accounts() {
    let cfg = RunConfig::from_toml(SMALL).unwrap();
    let out = run_experiment(&cfg, ModelKind::Drdqn, 4, Path::new(".")).unwrap();
    assert_eq!(out.training.len(), 2);
    assert_eq!(out.agent.registry.len(), 6);
    assert_eq!(out.episodes.len(), 4);
    let m = &out.metrics;
    assert_eq!(m.episodes, 4);
    assert_eq!(m.overall.served + m.overall.rejected + m.pending, m.overall.arrivals);
    for p in Period::ALL {
        let pm = m.period(p);
        assert!(pm.served + pm.rejected <= pm.arrivals);
        assert!((0.0..=100.0).contains(&pm.rejection_rate));
    }

    // a reloaded checkpoint replays the same episodes
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("policy.json");
    out.agent.save(&path).unwrap();
    let back = Agent::load(&path).unwrap();
    let sim = cfg.sim_for(ModelKind::Drdqn);
    let demand = cfg.demand.source(&sim, Path::new(".")).unwrap();
    let (again, eps) = evaluate(&back, &sim, &demand, &[1, 2], 2, &[], false).unwrap();
    let hashes: Vec<_> = eps.iter().map(|e| e.event_hash.clone()).collect();
    let orig: Vec<_> = out.episodes.iter().map(|e| e.event_hash.clone()).collect();
    let reseeded: Vec<u64> = cfg.eval.seeds.iter().map(|s| s.wrapping_add(4 * 1_000_003)).collect();
    let (_, eps2) = evaluate(&back, &sim, &demand, &reseeded, 2, &[], true).unwrap();
    assert_eq!(eps2.iter().map(|e| e.event_hash.clone()).collect::<Vec<_>>(), orig);
    assert_eq!(again.episodes, 4);
    assert_eq!(hashes.len(), 4);
}

#[test]
fn rule_models_need_no_training_and_report_compares() {
    let cfg = RunConfig::from_toml(SMALL).unwrap();
    let random = run_experiment(&cfg, ModelKind::Random, 0, Path::new(".")).unwrap();
    let greedy = run_experiment(&cfg, ModelKind::Greedy, 0, Path::new(".")).unwrap();
    assert!(random.trainer.is_none() && random.training.is_empty());
    let report = compare(&[random.metrics, greedy.metrics], &["dqn".to_string()], Some("random"));
    assert_eq!(report.rows.len(), 2);
    assert_eq!(report.missing, vec!["dqn".to_string()]);
    assert!(report.rows[0].improvement.is_none());
    let md = report.to_markdown();
    assert!(md.contains("| random") && md.contains("| greedy"));
    let mut csv = Vec::new();
    report.write_csv(&mut csv).unwrap();
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 3);
}

#[test]
fn embedding_loss_trends_down_on_a_fixed_buffer() {
    // ring of 16 states, one-hot features
    let n = 16;
    let hot = |i: usize| {
        let mut v = vec![0.0; n];
        v[i % n] = 1.0;
        v
    };
    let pairs = (0..n).flat_map(|i| [(hot(i), hot(i + 1)), (hot(i + 1), hot(i))]).collect();
    let cfg = EmbedTrainConfig { dim: 3, hidden: vec![32], learning_rate: 3e-4, steps: 3000, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut phi = EmbeddingNet::new(n, &cfg, &mut rng).unwrap();
    let log = train_embedding(&mut phi, &FeaturePairs { pairs }, &cfg, &mut rng).unwrap();
    let avg: Vec<f64> = log.losses.chunks(500).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    for w in avg.windows(2) {
        assert!(w[1] <= w[0] + 0.05 * w[0].abs().max(1.0), "{avg:?}");
    }
    assert!(avg.last().unwrap() < &avg[0]);
}

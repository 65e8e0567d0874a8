use droplab_core::nn::{masked_argmax, Adam, DenseNet, Sample};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn net_from(seed: u64, sizes: &[usize]) -> DenseNet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = DenseNet::new(sizes, &mut rng).unwrap();
    for p in net.params_mut() {
        *p = rng.random_range(-2.0..2.0);
    }
    net
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn checkpoint_round_trip_is_bit_exact(seed in any::<u64>(), a in 1usize..6, b in 1usize..9, c in 1usize..5) {
        let net = net_from(seed, &[a, b, c]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        net.save(&path).unwrap();
        let back = DenseNet::load(&path).unwrap();
        let same = net.flatten().iter().zip(back.flatten()).all(|(x, y)| x.to_bits() == y.to_bits());
        prop_assert!(same);
        prop_assert_eq!(back.layer_sizes(), vec![a, b, c]);
    }

    #[test]
    fn batch_trace_matches_single_forward(seed in any::<u64>(), rows in 1usize..6) {
        let net = net_from(seed, &[3, 5, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let xs: Vec<Vec<f64>> = (0..rows).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let trace = net.trace(&xs).unwrap();
        for (i, x) in xs.iter().enumerate() {
            let single = net.forward(x).unwrap();
            prop_assert_eq!(trace.output(i), single.as_slice());
        }
    }

    #[test]
    fn masked_outputs_get_no_gradient(seed in any::<u64>()) {
        let net = net_from(seed, &[2, 4, 3]);
        let x = [0.5, -0.25];
        let t = [1.0, 2.0, 3.0];
        let mask = [false, false, false];
        let (loss, g) = net.mse_gradients(&[Sample { input: &x, target: &t, mask: Some(&mask) }]).unwrap();
        prop_assert_eq!(loss, 0.0);
        prop_assert!(g.is_zero());
    }

    #[test]
    fn argmax_prefers_lowest_index(v in proptest::collection::vec(-3i32..3, 1..10), active in 1usize..10) {
        let values: Vec<f64> = v.iter().map(|x| *x as f64).collect();
        let k = masked_argmax(&values, active);
        let end = active.min(values.len());
        let best = values[..end].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(values[k], best);
        prop_assert!(values[..k].iter().all(|x| *x < best));
    }
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    let mut net = DenseNet::zeros(&[1, 1]).unwrap();
    net.layers_mut()[0].set_weight(0, 0, 0.5);
    let x = [1.0];
    let t = [0.0];
    let (_, g) = net.mse_gradients(&[Sample { input: &x, target: &t, mask: None }]).unwrap();
    let mut opt = Adam::new(&net, 0.1);
    opt.step(&mut net, &g).unwrap();
    // bias-corrected first step is lr * g / (|g| + eps)
    let expect_w = 0.5 - 0.1 * 1.0 / (1.0 + 1e-8);
    assert!((net.layers()[0].weight(0, 0) - expect_w).abs() < 1e-12);
    assert!((net.layers()[0].bias(0) + 0.1 / (1.0 + 1e-8)).abs() < 1e-12);
}

#[test]
fn regression_fits_a_line() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut net = DenseNet::new(&[1, 16, 1], &mut rng).unwrap();
    let mut opt = Adam::new(&net, 0.01);
    let xs: Vec<[f64; 1]> = (0..32).map(|i| [i as f64 / 31.0]).collect();
    let ts: Vec<[f64; 1]> = xs.iter().map(|x| [2.0 * x[0] - 0.5]).collect();
    let mut last = f64::INFINITY;
    for _ in 0..3000 {
        let batch: Vec<Sample<'_>> = xs.iter().zip(&ts).map(|(x, t)| Sample { input: x, target: t, mask: None }).collect();
        let (loss, g) = net.mse_gradients(&batch).unwrap();
        opt.step(&mut net, &g).unwrap();
        last = loss;
    }
    assert!(last < 1e-3, "loss {last}");
}

use graph_hawkes::basis::cumulative_trapezoid;
use graph_hawkes::events::{Event, EventSequence};
use graph_hawkes::exec::Parallelism;
use graph_hawkes::metrics::{kl_divergence, quadrature_loglik, test_loglik, time_mae, type_distribution, type_kld};
use graph_hawkes::model::{InfluenceModel, KernelModel, ModelConfig, MuMode};
use graph_hawkes::objective::{ls, nll};
use graph_hawkes::simulate::{ground_truth, thinning_simulate, GroundTruthKind, SimConfig};
use graph_hawkes::train::{split, split_indices, train, TrainConfig};
use graph_hawkes::Graph;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Homogeneous Poisson process: background only.
struct Poisson {
    rates: Vec<f64>,
}

impl InfluenceModel for Poisson {
    fn num_nodes(&self) -> usize {
        self.rates.len()
    }

    fn background(&self) -> Vec<f64> {
        self.rates.clone()
    }

    fn max_lag(&self) -> f64 {
        0.0
    }

    fn kernel(&self, _: f64, _: f64, _: usize, _: usize) -> f64 {
        0.0
    }

    fn positive_influence_bound(&self, _: f64, _: usize, _: f64) -> f64 {
        0.0
    }
}

fn poisson_loglik(rates: &[f64], seqs: &[EventSequence]) -> f64 {
    let total_rate: f64 = rates.iter().sum();
    let (mut ll, mut events) = (0.0, 0usize);
    for s in seqs {
        ll += s.events().iter().map(|e| rates[e.node].ln()).sum::<f64>() - total_rate * s.horizon();
        events += s.len();
    }
    ll / events as f64
}

fn sequences(horizon: f64, raw: Vec<Vec<(f64, usize)>>) -> Vec<EventSequence> {
    raw.into_iter()
        .map(|mut evs| {
            evs.sort_by(|a, b| a.0.total_cmp(&b.0));
            evs.dedup_by(|a, b| a.0 == b.0);
            EventSequence::new(horizon, evs.into_iter().map(|(t, node)| Event { t, node }).collect()).unwrap()
        })
        .collect()
}

fn event_sets(horizon: f64, nodes: usize) -> impl Strategy<Value = Vec<EventSequence>> {
    prop::collection::vec(prop::collection::vec((0.0..horizon, 0..nodes), 0..15), 1..6)
        .prop_map(move |raw| sequences(horizon, raw))
}

fn zero_kernel_model(rates: &[f64], horizon: f64) -> KernelModel {
    let cfg = ModelConfig {
        grid_density: 20.0,
        ..Default::default()
    };
    let mut m = KernelModel::new(&Graph::path(rates.len()).unwrap(), &cfg, horizon, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    m.set_alpha(&vec![0.0; m.state().alpha.len()]).unwrap();
    m.set_mu(rates).unwrap();
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn kld_of_identical_sets_is_zero(seqs in event_sets(10.0, 4)) {
        prop_assert!(type_kld(&seqs, &seqs, 4, 1e-6).unwrap().abs() < 1e-12);
    }

    #[test]
    fn kld_is_nonnegative(a in event_sets(10.0, 4), b in event_sets(10.0, 4)) {
        prop_assert!(type_kld(&a, &b, 4, 1e-6).unwrap() >= -1e-12);
        let p = type_distribution(&a, 4, 1e-6);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(kl_divergence(&p, &p).abs() < 1e-12);
    }

    #[test]
    fn time_mae_is_symmetric_and_duplication_invariant(a in event_sets(10.0, 3), b in event_sets(10.0, 3)) {
        let ab = time_mae(&a, &b).unwrap();
        prop_assert!((ab - time_mae(&b, &a).unwrap()).abs() < 1e-12);
        let doubled: Vec<EventSequence> = a.iter().chain(&a).cloned().collect();
        prop_assert!((time_mae(&doubled, &b).unwrap() - ab).abs() < 1e-12);
        prop_assert!(time_mae(&a, &a).unwrap().abs() < 1e-12);
    }

    #[test]
    fn split_partitions_deterministically(n in 2usize..300, frac in 0.05f64..0.95, seed in any::<u64>()) {
        let (kept, held) = split_indices(n, frac, seed).unwrap();
        prop_assert_eq!((kept.clone(), held.clone()), split_indices(n, frac, seed).unwrap());
        let mut all: Vec<usize> = kept.iter().chain(&held).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert!(kept.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(held.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn zero_kernel_likelihoods_match_poisson(seqs in event_sets(8.0, 3), r in prop::collection::vec(0.05f64..2.0, 3)) {
        prop_assume!(seqs.iter().any(|s| !s.is_empty()));
        let exact = poisson_loglik(&r, &seqs);
        let model = zero_kernel_model(&r, 8.0);
        prop_assert!((test_loglik(&model, &seqs).unwrap() - exact).abs() < 1e-9 * (1.0 + exact.abs()));
        let quad = quadrature_loglik(&Poisson { rates: r.clone() }, &seqs, 0.05, Parallelism::Sequential).unwrap();
        prop_assert!((quad - exact).abs() < 1e-9 * (1.0 + exact.abs()));

        let n = seqs.len() as f64;
        let counts: f64 = seqs.iter().flat_map(|s| s.events()).map(|e| r[e.node]).sum();
        let squares: f64 = r.iter().map(|x| x * x).sum::<f64>() * 8.0;
        let b = ls(&model, &seqs).unwrap();
        prop_assert!((b.data_term + 2.0 * counts / n).abs() < 1e-9);
        prop_assert!((b.integral_term - squares).abs() < 1e-9);
        let c = nll(&model, &seqs).unwrap();
        prop_assert!((c.integral_term - r.iter().sum::<f64>() * 8.0).abs() < 1e-9);
    }
}

#[test]
fn cumulative_grid_converges_at_second_order() {
    let f = |t: f64| (2.0 * t).sin() + 0.5 * t;
    let exact = |t: f64| (1.0 - (2.0 * t).cos()) / 2.0 + 0.25 * t * t;
    let error = |points: usize| {
        let delta = 4.0 / (points - 1) as f64;
        let values: Vec<f64> = (0..points).map(|k| f(k as f64 * delta)).collect();
        cumulative_trapezoid(&values, delta)
            .iter()
            .enumerate()
            .map(|(k, c)| (c - exact(k as f64 * delta)).abs())
            .fold(0.0, f64::max)
    };
    let errs: Vec<f64> = [41, 81, 161, 321].into_iter().map(error).collect();
    for w in errs.windows(2) {
        let ratio = w[0] / w[1];
        assert!((3.6..4.4).contains(&ratio), "halving the step reduced the error by {ratio}");
    }
}

#[test]
fn simulated_poisson_counts_match_the_rate() {
    let rates = vec![0.4, 1.0, 0.1];
    let sim = thinning_simulate(
        &Poisson { rates: rates.clone() },
        &SimConfig {
            num_sequences: 2000,
            horizon: 10.0,
            seed: 3,
            ..Default::default()
        },
    )
    .unwrap();
    for (v, r) in rates.iter().enumerate() {
        let mean = sim.sequences.iter().map(|s| s.node_counts(3)[v] as f64).sum::<f64>() / 2000.0;
        let sd = (r * 10.0 / 2000.0).sqrt();
        assert!((mean - r * 10.0).abs() < 4.0 * sd, "node {v}: mean count {mean}");
    }
}

#[test]
fn truth_beats_background_only_model() {
    for kind in [GroundTruthKind::Gt3Negative, GroundTruthKind::Gt16Twohop] {
        let truth = ground_truth(kind).unwrap();
        let seqs = thinning_simulate(
            &truth,
            &SimConfig {
                num_sequences: 40,
                seed: 9,
                ..Default::default()
            },
        )
        .unwrap()
        .sequences;
        let with_kernel = quadrature_loglik(&truth, &seqs, 0.01, Parallelism::Auto).unwrap();
        // Best constant rates for this data: the empirical per-node frequency.
        let total_time = seqs.len() as f64 * truth.horizon();
        let rates: Vec<f64> = (0..truth.num_nodes())
            .map(|v| seqs.iter().map(|s| s.node_counts(truth.num_nodes())[v]).sum::<usize>() as f64 / total_time)
            .collect();
        let baseline = poisson_loglik(&rates, &seqs);
        assert!(with_kernel > baseline, "{kind:?}: {with_kernel} <= {baseline}");
    }
}

#[test]
fn training_on_poisson_data_recovers_the_rate() {
    let rate = 0.8;
    let horizon = 20.0;
    let sim = thinning_simulate(
        &Poisson { rates: vec![rate; 3] },
        &SimConfig {
            num_sequences: 200,
            horizon,
            seed: 4,
            ..Default::default()
        },
    )
    .unwrap();
    let (train_set, validation) = split(&sim.sequences, 0.1, 4).unwrap();
    let cfg = ModelConfig {
        mu_mode: MuMode::Tied,
        grid_density: 10.0,
        tau_max: Some(5.0),
        mu_init: 0.3,
        ..Default::default()
    };
    let init = KernelModel::new(&Graph::path(3).unwrap(), &cfg, horizon, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let out = train(
        init,
        &train_set,
        &validation,
        &TrainConfig {
            epochs: 50,
            seed: 4,
            learning_rate: 2e-2,
            ..Default::default()
        },
    )
    .unwrap();
    let empirical = sim.sequences.iter().map(|s| s.len()).sum::<usize>() as f64 / (200.0 * 3.0 * horizon);
    let mut buf = vec![0.0; 3];
    let (mut total, mut probes) = (0.0, 0.0);
    for s in &train_set {
        for k in 0..40 {
            let t = (k as f64 + 0.5) * horizon / 40.0;
            let end = s.events().partition_point(|e| e.t < t);
            out.model.intensities(t, &s.events()[..end], &mut buf);
            total += buf.iter().sum::<f64>();
            probes += 3.0;
        }
    }
    let fitted = total / probes;
    let background = out.model.mu()[0];
    assert!(
        (fitted - empirical).abs() < 0.05 * empirical,
        "mean fitted intensity {fitted}, empirical rate {empirical}"
    );
    assert!(
        (background - rate).abs() < 0.05 * rate,
        "background {background}, true rate {rate}"
    );
}

use std::sync::Arc;

use hfl_vanet::clustering::Role;
use hfl_vanet::fltrain::model::batch_loss;
use hfl_vanet::fltrain::{gradient_on, Dataset, ModelParams};
use hfl_vanet::harness::{run_scenario_with, DataSource, Mode, ScenarioConfig, Simulation};
use hfl_vanet::mobility::{Direction, VehicleId, VehicleRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn car(id: u64, position_m: f64) -> VehicleRecord {
    VehicleRecord {
        id: VehicleId(id),
        direction: Direction::Forward,
        position_m,
        speed_mps: 20.0,
        max_speed_mps: 20.0,
        spawn_time: 0,
    }
}

/// One full-batch SGD step per round, so training draws no randomness.
fn full_batch(seed: u64) -> ScenarioConfig {
    let mut cfg = ScenarioConfig::synthetic();
    cfg.scenario.seed = seed;
    cfg.scenario.static_topology = true;
    cfg.scenario.max_rounds = 1000;
    cfg.fl.local_steps = 1;
    cfg.fl.batch_size = 100_000;
    cfg
}

fn static_sim(cfg: &ScenarioConfig, positions: &[f64]) -> Simulation {
    let src = DataSource::load(cfg).unwrap();
    let cars = positions.iter().enumerate().map(|(i, &x)| car(i as u64, x)).collect();
    Simulation::with_population(cfg.clone(), &src, cars).unwrap()
}

/// Steps until just before the first round closes.
fn advance_to_round_tick(sim: &mut Simulation) {
    let tpr = sim.config().scenario.ticks_per_round;
    while sim.now() + 1 < tpr {
        assert!(sim.step_tick().unwrap().is_none());
    }
}

/// Training set the simulation resolves for a synthetic config.
fn synthetic_train(cfg: &ScenarioConfig) -> Dataset {
    let src = DataSource::load(cfg).unwrap();
    let sim = Simulation::with_population(cfg.clone(), &src, vec![car(0, 0.0)]).unwrap();
    let v = &sim.vehicles()[&VehicleId(0)];
    (*v.data.data).clone()
}

/// Sample-weighted mean of `theta - eta * grad_k(theta)` computed directly.
fn flat_fedavg(theta: &ModelParams, parts: &[(Vec<usize>, &Dataset)], eta: f64) -> Vec<f64> {
    let total: usize = parts.iter().map(|(idx, _)| idx.len()).sum();
    let mut out = vec![0.0; theta.values.len()];
    for (idx, data) in parts {
        let g = gradient_on(theta, data, idx).unwrap();
        let w = idx.len() as f64 / total as f64;
        for (o, (t, gi)) in out.iter_mut().zip(theta.values.iter().zip(&g.values)) {
            *o += w * (t - eta * gi);
        }
    }
    out
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    let worst = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(worst <= tol, "max deviation {worst:e}");
}

#[test]
fn backprop_matches_finite_differences_on_every_coordinate() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let data = Dataset::synthetic_gaussian(40, 6, &mut rng);
    let mut theta = ModelParams::init(&[6, 5, 4, 2], &mut rng);
    // Nonzero biases keep dead-unit pre-activations off the ReLU kink.
    theta.values.iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
    let batch: Vec<usize> = (0..10).map(|_| rng.random_range(0..data.len())).collect();
    let g = gradient_on(&theta, &data, &batch).unwrap();
    for i in 0..theta.len() {
        let h = 1e-6;
        let mut plus = theta.clone();
        plus.values[i] += h;
        let mut minus = theta.clone();
        minus.values[i] -= h;
        let numeric = (batch_loss(&plus, &data, &batch) - batch_loss(&minus, &data, &batch)) / (2.0 * h);
        let scale = g.values[i].abs().max(numeric.abs()).max(1e-6);
        assert!((g.values[i] - numeric).abs() / scale < 1e-5, "coordinate {i}: {} vs {numeric}", g.values[i]);
    }
}

#[test]
fn no_clustering_round_is_plain_fedavg() {
    let mut cfg = full_batch(3);
    cfg.scenario.mode = Mode::NoClustering;
    let mut sim = static_sim(&cfg, &[0.0, 120.0, 400.0, 700.0, 900.0]);
    let theta0 = Arc::clone(&sim.epc().theta);
    let train = synthetic_train(&cfg);
    let parts: Vec<(Vec<usize>, &Dataset)> =
        sim.vehicles().values().map(|v| (v.data.indices.clone(), &train)).collect();
    advance_to_round_tick(&mut sim);
    let round = sim.step_tick().unwrap().expect("round closes");
    assert!(round.aggregated);
    assert_eq!(round.epc_packets, 10);
    assert_close(&sim.epc().theta.values, &flat_fedavg(&theta0, &parts, cfg.fl.eta), 1e-12);
}

#[test]
fn single_cluster_collapses_to_flat_fedavg() {
    let mut cfg = full_batch(4);
    cfg.network.tx_range_m = 500.0;
    let mut sim = static_sim(&cfg, &[100.0, 130.0, 160.0, 190.0]);
    advance_to_round_tick(&mut sim);

    let heads: Vec<&hfl_vanet::harness::Vehicle> =
        sim.vehicles().values().filter(|v| v.node.state.role == Role::ClusterHead).collect();
    assert_eq!(heads.len(), 1, "expected a single cluster before the round");
    let theta_h = Arc::clone(&heads[0].node.theta);
    for v in sim.vehicles().values() {
        assert!(v.data_ready);
        assert_eq!(*v.node.theta, *theta_h, "{} holds a different model", v.node.id);
    }
    let train = synthetic_train(&cfg);
    let parts: Vec<(Vec<usize>, &Dataset)> =
        sim.vehicles().values().map(|v| (v.data.indices.clone(), &train)).collect();

    let round = sim.step_tick().unwrap().expect("round closes");
    assert_eq!((round.num_chs, round.num_cms), (1, 3));
    assert_close(&sim.epc().theta.values, &flat_fedavg(&theta_h, &parts, cfg.fl.eta), 1e-12);
}

/// Runs the first round of a static line of cars spaced 80 m apart.
fn line_round(cars: usize, t_collect_max: u64) -> (ModelParams, u32) {
    let mut cfg = full_batch(6);
    cfg.clustering.max_hop = 3;
    cfg.aggregation.t_collect_max = t_collect_max;
    let positions: Vec<f64> = (0..cars).map(|i| 100.0 + 80.0 * i as f64).collect();
    let mut sim = static_sim(&cfg, &positions);
    advance_to_round_tick(&mut sim);
    let deepest = sim.vehicles().values().map(|v| v.node.state.hops_to_ch).max().unwrap();
    sim.step_tick().unwrap().expect("round closes");
    ((*sim.epc().theta).clone(), deepest)
}

#[test]
fn gradients_arriving_after_the_window_are_dropped() {
    let (slow, depth) = line_round(3, 3);
    assert_eq!(depth, 2, "line should form a two-hop chain");
    let (fast, _) = line_round(3, 1);
    assert_ne!(slow, fast, "the two-hop gradient should be excluded with a one-slot window");
    assert_eq!(line_round(3, 2).0, slow);

    let (a, depth) = line_round(2, 3);
    assert_eq!(depth, 1);
    assert_eq!(line_round(2, 1).0, a);
}

fn fingerprint(cfg: &ScenarioConfig, src: &DataSource) -> Vec<(u64, u64, usize, usize, u64)> {
    run_scenario_with(cfg, src)
        .unwrap()
        .rounds
        .iter()
        .map(|r| (r.round, r.epc_accuracy.to_bits(), r.num_chs, r.num_cms, r.v2v_packets))
        .collect()
}

#[test]
fn single_metric_modes_equal_alpha_extremes() {
    let mut cfg = ScenarioConfig::synthetic();
    cfg.scenario.max_rounds = 8;
    cfg.scenario.run_past_convergence = true;
    cfg.clustering.alpha = 0.4;
    let src = DataSource::load(&cfg).unwrap();
    for (mode, alpha) in [(Mode::MobilityOnly, 1.0), (Mode::SimilarityOnly, 0.0)] {
        let mut reduced = cfg.clone();
        reduced.scenario.mode = mode;
        let mut proposed = cfg.clone();
        proposed.clustering.alpha = alpha;
        assert_eq!(fingerprint(&reduced, &src), fingerprint(&proposed, &src), "{mode:?}");
    }
}

#[test]
fn identical_configs_give_identical_runs() {
    let mut cfg = ScenarioConfig::synthetic();
    cfg.scenario.seed = 12;
    cfg.network.tx_range_m = 500.0;
    let src = DataSource::load(&cfg).unwrap();
    let a = run_scenario_with(&cfg, &src).unwrap();
    let b = run_scenario_with(&cfg, &src).unwrap();
    assert_eq!(a.topology, b.topology);
    assert_eq!(fingerprint(&cfg, &src), fingerprint(&cfg, &src));
    cfg.scenario.seed = 13;
    assert_ne!(run_scenario_with(&cfg, &src).unwrap().topology, a.topology);
}

/// Checks a full-size MNIST copy when `HFL_MNIST_FULL_DIR` points at one.
#[test]
fn canonical_mnist_sizes() {
    let Ok(dir) = std::env::var("HFL_MNIST_FULL_DIR") else {
        return;
    };
    let mut cfg = ScenarioConfig::default();
    cfg.fl.data_dir = dir.into();
    let src = DataSource::load(&cfg).unwrap();
    assert_eq!((src.train.len(), src.test.len()), (60_000, 10_000));
    assert_eq!(src.train.dim, 784);
}

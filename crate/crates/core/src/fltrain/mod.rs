//! Local learning: datasets, the MLP and per-vehicle SGD.

pub mod data;
pub mod model;

use rand::Rng;

pub use data::{load_idx, partition_iid, partition_non_iid, Dataset, LocalDataset};
pub use model::{
    compute_gradient, evaluate, gradient_on, local_update, param_count, Gradient, ModelParams,
    MNIST_LAYERS,
};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalTraining {
    pub eta: f64,
    pub batch_size: usize,
    pub local_steps: usize,
}

/// Random mini-batch of positions into `data.indices`, without replacement.
pub fn sample_batch<R: Rng + ?Sized>(data: &LocalDataset, batch_size: usize, rng: &mut R) -> Vec<usize> {
    let n = data.n();
    if batch_size >= n {
        return (0..n).collect();
    }
    rand::seq::index::sample(rng, n, batch_size).into_vec()
}

/// Runs `local_steps` SGD steps from `theta` and returns the update expressed
/// as a gradient: applying `theta - eta * g` reproduces the trained model.
/// With a single step this is exactly the mini-batch gradient.
pub fn local_train<R: Rng + ?Sized>(
    theta: &ModelParams,
    data: &LocalDataset,
    cfg: &LocalTraining,
    rng: &mut R,
) -> Result<Gradient> {
    let steps = cfg.local_steps.max(1);
    let first = compute_gradient(theta, data, &sample_batch(data, cfg.batch_size, rng))?;
    if steps == 1 || cfg.eta == 0.0 {
        return Ok(first);
    }
    let mut batch_total = first.batch_size;
    let mut current = local_update(theta, &first, cfg.eta)?;
    for _ in 1..steps {
        let g = compute_gradient(&current, data, &sample_batch(data, cfg.batch_size, rng))?;
        batch_total += g.batch_size;
        current = local_update(&current, &g, cfg.eta)?;
    }
    Ok(Gradient {
        values: theta
            .values
            .iter()
            .zip(&current.values)
            .map(|(start, end)| (start - end) / cfg.eta)
            .collect(),
        batch_size: batch_total,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataGate {
    Collect,
    Train,
}

/// Whether a vehicle in the initial state keeps collecting raw data or runs a
/// local update this tick. Callers increment `t_data` after `Collect` and
/// reset it to zero after `Train`.
pub fn data_collection_gate(t_data: u64, t_data_max: u64) -> DataGate {
    if t_data < t_data_max {
        DataGate::Collect
    } else {
        DataGate::Train
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn gate_examples() {
        assert_eq!(data_collection_gate(0, 5), DataGate::Collect);
        assert_eq!(data_collection_gate(5, 5), DataGate::Train);
        assert_eq!(data_collection_gate(0, 0), DataGate::Train);
    }

    #[test]
    fn multi_step_update_reproduces_trained_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data = Arc::new(Dataset::synthetic_gaussian(64, 5, &mut rng));
        let local = LocalDataset::full(data);
        let theta = ModelParams::init(&[5, 8, 2], &mut rng);
        let cfg = LocalTraining {
            eta: 0.1,
            batch_size: 8,
            local_steps: 4,
        };
        let g = local_train(&theta, &local, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        // replay the same batches by hand
        let mut replay_rng = ChaCha8Rng::seed_from_u64(1);
        let mut cur = theta.clone();
        for _ in 0..4 {
            let b = sample_batch(&local, 8, &mut replay_rng);
            let step = compute_gradient(&cur, &local, &b).unwrap();
            cur = local_update(&cur, &step, 0.1).unwrap();
        }
        let via_g = local_update(&theta, &g, 0.1).unwrap();
        for (a, b) in via_g.values.iter().zip(&cur.values) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_step_is_plain_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data = Arc::new(Dataset::synthetic_gaussian(16, 3, &mut rng));
        let local = LocalDataset::full(data);
        let theta = ModelParams::init(&[3, 4, 2], &mut rng);
        let cfg = LocalTraining {
            eta: 0.1,
            batch_size: 100,
            local_steps: 1,
        };
        let g = local_train(&theta, &local, &cfg, &mut rng).unwrap();
        let all: Vec<usize> = (0..16).collect();
        assert_eq!(g, compute_gradient(&theta, &local, &all).unwrap());
    }
}

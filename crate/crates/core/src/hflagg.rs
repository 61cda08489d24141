//! Two-tier aggregation: members into cluster heads, cluster heads into the EPC.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fltrain::{local_update, Gradient, ModelParams};
use crate::mobility::VehicleId;

/// One model offered for aggregation, weighted by its sample count.
#[derive(Debug, Clone, PartialEq)]
pub struct Contribution {
    pub id: VehicleId,
    pub theta: Arc<ModelParams>,
    pub n: usize,
}

/// Member model reconstructed at the head: `theta_ch_prev - eta * g_cm`.
pub fn ch_apply_member_gradient(theta_ch_prev: &ModelParams, g_cm: &Gradient, eta: f64) -> Result<ModelParams> {
    local_update(theta_ch_prev, g_cm, eta)
}

/// Sample-count weights `n_k / n` in the given order.
pub fn aggregation_weights(ns: &[usize]) -> Vec<f64> {
    let total: usize = ns.iter().sum();
    ns.iter().map(|&n| n as f64 / total as f64).collect()
}

/// Weighted mean of the contributions, summed in ascending id order.
/// `None` when there is nothing to average.
pub fn weighted_mean(contribs: &[Contribution]) -> Result<Option<ModelParams>> {
    let mut sorted: Vec<&Contribution> = contribs.iter().filter(|c| c.n > 0).collect();
    if sorted.is_empty() {
        return Ok(None);
    }
    sorted.sort_by_key(|c| c.id);
    let first = &sorted[0].theta;
    let mut acc = vec![0.0; first.len()];
    let weights = aggregation_weights(&sorted.iter().map(|c| c.n).collect::<Vec<_>>());
    for (c, w) in sorted.iter().zip(weights) {
        if c.theta.len() != acc.len() {
            return Err(Error::ShapeMismatch {
                expected: acc.len(),
                actual: c.theta.len(),
            });
        }
        for (a, x) in acc.iter_mut().zip(&c.theta.values) {
            *a += w * x;
        }
    }
    Ok(Some(ModelParams {
        values: acc,
        layers: first.layers.clone(),
    }))
}

/// Cluster-head model: weighted mean of member models. `None` means the
/// head had no members this round and keeps its previous model.
pub fn ch_aggregate(member_thetas: &[Contribution]) -> Result<Option<ModelParams>> {
    weighted_mean(member_thetas)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpcMode {
    /// `theta_prev - eta * weighted_mean(theta_ch)`.
    ScaledStep,
    /// `weighted_mean(theta_ch)`.
    #[default]
    FedavgMean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpcState {
    pub theta: Arc<ModelParams>,
    pub round: u64,
    pub accuracy_history: Vec<f64>,
    pub epsilon: f64,
    pub mode: EpcMode,
}

impl EpcState {
    pub fn new(theta: Arc<ModelParams>, epsilon: f64, mode: EpcMode) -> Self {
        EpcState {
            theta,
            round: 0,
            accuracy_history: Vec::new(),
            epsilon,
            mode,
        }
    }

    pub fn convergence_speed(&self, window: usize) -> f64 {
        convergence_speed(&self.accuracy_history, window)
    }

    pub fn converged(&self, window: usize) -> bool {
        self.convergence_speed(window) < self.epsilon
    }
}

/// Global aggregation. Returns `false` and leaves the state untouched when no
/// head contributed.
pub fn epc_aggregate(state: &mut EpcState, ch_thetas: &[Contribution], eta: f64) -> Result<bool> {
    let Some(mean) = weighted_mean(ch_thetas)? else {
        return Ok(false);
    };
    let next = match state.mode {
        EpcMode::FedavgMean => mean,
        EpcMode::ScaledStep => {
            state.theta.check_len(mean.len())?;
            ModelParams {
                values: state.theta.values.iter().zip(&mean.values).map(|(p, m)| p - eta * m).collect(),
                layers: mean.layers,
            }
        }
    };
    state.theta = Arc::new(next);
    state.round += 1;
    Ok(true)
}

/// Mean absolute accuracy change over the last `window` deltas (fewer if the
/// history is short). Infinite until two accuracies exist.
pub fn convergence_speed(history: &[f64], window: usize) -> f64 {
    if history.len() < 2 {
        return f64::INFINITY;
    }
    let deltas: Vec<f64> = history.windows(2).map(|p| (p[1] - p[0]).abs()).collect();
    let tail = &deltas[deltas.len().saturating_sub(window.max(1))..];
    tail.iter().sum::<f64>() / tail.len() as f64
}

/// Collection window of one aggregation tier. Arrivals at slot
/// `>= t_collect_max` are refused; a later offer from the same contributor
/// replaces the earlier one.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationWindow<T> {
    pub t_collect_max: u64,
    received: BTreeMap<VehicleId, (T, usize)>,
}

impl<T> AggregationWindow<T> {
    pub fn new(t_collect_max: u64) -> Self {
        AggregationWindow {
            t_collect_max,
            received: BTreeMap::new(),
        }
    }

    pub fn offer(&mut self, from: VehicleId, arrival_slot: u64, item: T, n: usize) -> bool {
        if arrival_slot >= self.t_collect_max {
            return false;
        }
        self.received.insert(from, (item, n));
        true
    }

    pub fn len(&self) -> usize {
        self.received.len()
    }

    pub fn is_empty(&self) -> bool {
        self.received.is_empty()
    }

    pub fn contains(&self, id: VehicleId) -> bool {
        self.received.contains_key(&id)
    }

    /// Accepted contributions in ascending contributor id.
    pub fn into_sorted(self) -> Vec<(VehicleId, T, usize)> {
        self.received.into_iter().map(|(k, (t, n))| (k, t, n)).collect()
    }
}

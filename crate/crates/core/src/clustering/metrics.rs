//! Cluster-head selection metrics. Lower scores are better.

use crate::mobility::VehicleRecord;

/// Weighting between the mobility term and the model-similarity term.
///
/// `speed_scale` multiplies every speed term; it is `1` for the raw metric
/// and `1 / (speed_max - speed_min)` when normalisation is enabled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricWeights {
    pub alpha: f64,
    pub speed_scale: f64,
}

impl MetricWeights {
    pub fn raw(alpha: f64) -> Self {
        MetricWeights {
            alpha,
            speed_scale: 1.0,
        }
    }

    fn combine(&self, speed_term: f64, similarity: f64) -> f64 {
        self.alpha * (speed_term * self.speed_scale) + (1.0 - self.alpha) * (1.0 - similarity)
    }
}

/// `<a, b> / (|a| |b|)`, clamped to `[-1, 1]`. A zero-norm input yields 0.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb).sqrt()).clamp(-1.0, 1.0)
}

/// Score of a prospective parent as seen by a joining vehicle.
pub fn avg_cosim_pair(
    speed_self: f64,
    speed_peer: f64,
    theta_peer: &[f64],
    theta_self: &[f64],
    w: MetricWeights,
) -> f64 {
    w.combine((speed_peer - speed_self).abs(), cosine_similarity(theta_peer, theta_self))
}

/// Mean absolute speed difference to same-direction neighbours; 0 when there
/// are none.
pub fn average_relative_speed(v: &VehicleRecord, same_direction_neighbors: &[VehicleRecord]) -> f64 {
    relative_speed_of(v.speed_mps, same_direction_neighbors.iter().map(|n| n.speed_mps))
}

pub fn relative_speed_of(speed: f64, neighbor_speeds: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = neighbor_speeds
        .into_iter()
        .fold((0.0, 0usize), |(s, n), other| (s + (speed - other).abs(), n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Self-stability score of a vehicle from its own consecutive models.
pub fn avg_cosim_self(avg_speed: f64, theta_i: &[f64], theta_prev: &[f64], w: MetricWeights) -> f64 {
    self_score(avg_speed, cosine_similarity(theta_i, theta_prev), w)
}

/// [`avg_cosim_self`] from an already computed self-similarity, as carried in
/// HELLO packets.
pub fn self_score(avg_speed: f64, self_similarity: f64, w: MetricWeights) -> f64 {
    w.combine(avg_speed, self_similarity)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mobility::{Direction, VehicleId};

    fn car(speed: f64) -> VehicleRecord {
        VehicleRecord {
            id: VehicleId(0),
            direction: Direction::Forward,
            position_m: 0.0,
            speed_mps: speed,
            max_speed_mps: 35.0,
            spawn_time: 0,
        }
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_similarity(&[3.0, -2.0], &[3.0, -2.0]) - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert!((cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]) - 0.70711).abs() < 1e-5);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 1.0]), 0.0);
    }

    #[test]
    fn pair_metric_examples() {
        let a = [1.0, 2.0];
        let b = [-2.0, 5.0];
        assert_eq!(avg_cosim_pair(20.0, 20.0, &a, &b, MetricWeights::raw(1.0)), 0.0);
        assert_eq!(avg_cosim_pair(10.0, 30.0, &a, &a, MetricWeights::raw(0.0)), 0.0);
        // cos((1,0),(0.8,0.6)) = 0.8
        let v = avg_cosim_pair(20.0, 25.0, &[0.8, 0.6], &[1.0, 0.0], MetricWeights::raw(0.5));
        assert!((v - 2.6).abs() < 1e-12);
    }

    #[test]
    fn relative_speed_examples() {
        assert_eq!(average_relative_speed(&car(20.0), &[car(25.0), car(15.0)]), 5.0);
        assert_eq!(average_relative_speed(&car(20.0), &[car(20.0), car(20.0)]), 0.0);
        assert_eq!(average_relative_speed(&car(20.0), &[]), 0.0);
    }

    #[test]
    fn self_metric_examples() {
        assert_eq!(self_score(5.0, 0.3, MetricWeights::raw(1.0)), 5.0);
        assert_eq!(avg_cosim_self(7.0, &[1.0, 2.0], &[1.0, 2.0], MetricWeights::raw(0.0)), 0.0);
        assert!((self_score(3.0, 0.95, MetricWeights::raw(0.9)) - 2.705).abs() < 1e-12);
    }

    #[test]
    fn normalised_speed_term() {
        let w = MetricWeights {
            alpha: 1.0,
            speed_scale: 1.0 / 25.0,
        };
        assert!((self_score(5.0, 0.0, w) - 0.2).abs() < 1e-15);
    }
}

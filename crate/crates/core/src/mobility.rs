//! Ring-road kinematics: Poisson injection, safe-gap car following and
//! unit-disc neighbourhoods.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Simulation time step index. One tick lasts `RoadConfig::tick_duration_s`.
pub type Tick = u64;

/// Lowest speed a moving vehicle is allowed to drop to.
const MIN_SPEED_MPS: f64 = 0.01;

/// Insertion attempts before an arrival is discarded for lack of space.
const INSERT_ATTEMPTS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VehicleId(pub u64);

impl fmt::Display for VehicleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub fn sign(self) -> f64 {
        match self {
            Direction::Forward => 1.0,
            Direction::Backward => -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoadConfig {
    pub length_m: f64,
    pub lanes_per_direction: u32,
    pub arrival_rate_per_s: f64,
    pub speed_min_mps: f64,
    pub speed_max_mps: f64,
    /// Target vehicles per km of road; injection stops once reached.
    pub target_density_per_km2: u32,
    pub min_gap_m: f64,
    pub tick_duration_s: f64,
}

impl Default for RoadConfig {
    fn default() -> Self {
        RoadConfig {
            length_m: 1000.0,
            lanes_per_direction: 1,
            arrival_rate_per_s: 2.0,
            speed_min_mps: 10.0,
            speed_max_mps: 35.0,
            target_density_per_km2: 20,
            min_gap_m: 5.0,
            tick_duration_s: 1.0,
        }
    }
}

impl RoadConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.length_m > 0.0 && self.length_m.is_finite()) {
            return Err(Error::Config(format!("length_m must be > 0, got {}", self.length_m)));
        }
        if self.lanes_per_direction != 1 {
            return Err(Error::Config(
                "only one lane per direction is modelled (lanes_per_direction = 1)".into(),
            ));
        }
        if !(self.arrival_rate_per_s >= 0.0 && self.arrival_rate_per_s.is_finite()) {
            return Err(Error::Config(format!(
                "arrival_rate_per_s must be >= 0, got {}",
                self.arrival_rate_per_s
            )));
        }
        if !(self.speed_min_mps > 0.0 && self.speed_min_mps <= self.speed_max_mps) {
            return Err(Error::Config(format!(
                "need 0 < speed_min_mps <= speed_max_mps, got {} / {}",
                self.speed_min_mps, self.speed_max_mps
            )));
        }
        if !(self.min_gap_m >= 0.0) || !(self.tick_duration_s > 0.0) {
            return Err(Error::Config("min_gap_m must be >= 0 and tick_duration_s > 0".into()));
        }
        Ok(())
    }

    /// Population at which injection pauses.
    pub fn target_population(&self) -> usize {
        (f64::from(self.target_density_per_km2) * self.length_m / 1000.0).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleRecord {
    pub id: VehicleId,
    pub direction: Direction,
    pub position_m: f64,
    pub speed_mps: f64,
    pub max_speed_mps: f64,
    pub spawn_time: Tick,
}

/// Poisson arrivals for one tick. Arrivals beyond the target population are
/// discarded so the population never exceeds it.
pub fn inject_vehicles<R: Rng + ?Sized>(
    rng: &mut R,
    cfg: &RoadConfig,
    now: Tick,
    existing: &[VehicleRecord],
    next_id: &mut u64,
) -> Vec<VehicleRecord> {
    let capacity = cfg.target_population().saturating_sub(existing.len());
    let mean = cfg.arrival_rate_per_s * cfg.tick_duration_s;
    if capacity == 0 || mean <= 0.0 {
        return Vec::new();
    }
    let drawn = Poisson::new(mean)
        .map(|p| p.sample(rng) as usize)
        .unwrap_or(0);

    let mut fresh: Vec<VehicleRecord> = Vec::new();
    for _ in 0..drawn.min(capacity) {
        let direction = if rng.random_bool(0.5) {
            Direction::Forward
        } else {
            Direction::Backward
        };
        let max_speed = if cfg.speed_max_mps > cfg.speed_min_mps {
            rng.random_range(cfg.speed_min_mps..=cfg.speed_max_mps)
        } else {
            cfg.speed_max_mps
        };
        let mut placed = None;
        for _ in 0..INSERT_ATTEMPTS {
            let pos = rng.random_range(0.0..cfg.length_m);
            let clear = existing
                .iter()
                .chain(fresh.iter())
                .filter(|v| v.direction == direction)
                .all(|v| ring_distance(v.position_m, pos, cfg.length_m) >= cfg.min_gap_m);
            if clear {
                placed = Some(pos);
                break;
            }
        }
        if let Some(position_m) = placed {
            fresh.push(VehicleRecord {
                id: VehicleId(*next_id),
                direction,
                position_m,
                speed_mps: max_speed,
                max_speed_mps: max_speed,
                spawn_time: now,
            });
            *next_id += 1;
        }
    }
    fresh
}

/// Shortest distance between two points on a ring of circumference `length`.
pub fn ring_distance(a: f64, b: f64, length: f64) -> f64 {
    let d = (a - b).abs() % length;
    d.min(length - d)
}

fn forward_coord(v: &VehicleRecord, length: f64) -> f64 {
    match v.direction {
        Direction::Forward => v.position_m,
        Direction::Backward => (length - v.position_m).rem_euclid(length),
    }
}

fn from_forward_coord(f: f64, dir: Direction, length: f64) -> f64 {
    let p = match dir {
        Direction::Forward => f.rem_euclid(length),
        Direction::Backward => (length - f).rem_euclid(length),
    };
    // rem_euclid can round up to `length` for tiny negative inputs
    if p >= length {
        0.0
    } else {
        p
    }
}

/// Advances every vehicle by `dt` seconds. Output order matches input order.
///
/// Within a lane the vehicle with the largest headway moves first; every
/// follower is then bounded by its leader's new position so order is kept and
/// the gap stays at least `min_gap_m` when it already was.
pub fn step_mobility(vehicles: &[VehicleRecord], cfg: &RoadConfig, dt: f64) -> Vec<VehicleRecord> {
    let length = cfg.length_m;
    let mut out = vehicles.to_vec();

    for dir in [Direction::Forward, Direction::Backward] {
        let mut lane: Vec<usize> = (0..vehicles.len())
            .filter(|&i| vehicles[i].direction == dir)
            .collect();
        if lane.is_empty() {
            continue;
        }
        lane.sort_by(|&a, &b| {
            forward_coord(&vehicles[a], length)
                .total_cmp(&forward_coord(&vehicles[b], length))
                .then(vehicles[a].id.cmp(&vehicles[b].id))
        });
        let n = lane.len();
        let coords: Vec<f64> = lane.iter().map(|&i| forward_coord(&vehicles[i], length)).collect();

        if n == 1 {
            let v = &mut out[lane[0]];
            v.speed_mps = v.max_speed_mps;
            v.position_m = from_forward_coord(coords[0] + v.speed_mps * dt, dir, length);
            continue;
        }

        let gap_ahead = |k: usize| (coords[(k + 1) % n] - coords[k]).rem_euclid(length);
        let head = (0..n)
            .max_by(|&a, &b| gap_ahead(a).total_cmp(&gap_ahead(b)).then(b.cmp(&a)))
            .unwrap_or(0);

        let mut new_coord = vec![0.0; n];
        let mut new_speed = vec![0.0; n];
        for step in 0..n {
            let k = (head + n - step) % n;
            let leader = (k + 1) % n;
            let (leader_coord, leader_speed) = if step == 0 {
                (coords[leader], vehicles[lane[leader]].speed_mps)
            } else {
                (new_coord[leader], new_speed[leader])
            };
            let me = &vehicles[lane[k]];
            let gap_now = gap_ahead(k);
            let speed = if gap_now < cfg.min_gap_m {
                me.max_speed_mps.min(leader_speed)
            } else {
                let ahead = (leader_coord - coords[k]).rem_euclid(length);
                me.max_speed_mps.min((ahead - cfg.min_gap_m) / dt)
            };
            let speed = speed.max(MIN_SPEED_MPS);
            new_speed[k] = speed;
            new_coord[k] = coords[k] + speed * dt;
        }
        for k in 0..n {
            let v = &mut out[lane[k]];
            v.speed_mps = new_speed[k];
            v.position_m = from_forward_coord(new_coord[k], dir, length);
        }
    }
    out
}

/// Ids of vehicles other than `v` within `range_m` ring distance of it.
pub fn neighbors_within(
    state: &[VehicleRecord],
    v: &VehicleRecord,
    range_m: f64,
    length_m: f64,
) -> BTreeSet<VehicleId> {
    state
        .iter()
        .filter(|u| u.id != v.id)
        .filter(|u| ring_distance(u.position_m, v.position_m, length_m) <= range_m)
        .map(|u| u.id)
        .collect()
}

/// Unit-disc neighbour map for one tick.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Connectivity {
    links: BTreeMap<VehicleId, BTreeSet<VehicleId>>,
}

impl Connectivity {
    pub fn build(state: &[VehicleRecord], range_m: f64, length_m: f64) -> Self {
        let links = state
            .iter()
            .map(|v| (v.id, neighbors_within(state, v, range_m, length_m)))
            .collect();
        Connectivity { links }
    }

    pub fn neighbors(&self, v: VehicleId) -> impl Iterator<Item = VehicleId> + '_ {
        self.links.get(&v).into_iter().flat_map(|s| s.iter().copied())
    }

    pub fn linked(&self, a: VehicleId, b: VehicleId) -> bool {
        self.links.get(&a).is_some_and(|s| s.contains(&b))
    }

    pub fn degree(&self, v: VehicleId) -> usize {
        self.links.get(&v).map_or(0, BTreeSet::len)
    }
}

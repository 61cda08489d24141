use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fltrain::ModelParams;
use crate::mobility::{Direction, Tick, VehicleId};
use crate::netlayer::HelloPayload;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Role {
    Initial,
    StateElection,
    ClusterHead,
    ClusterMember,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Initial => "IN",
            Role::StateElection => "SE",
            Role::ClusterHead => "CH",
            Role::ClusterMember => "CM",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterState {
    pub role: Role,
    pub parent_id: Option<VehicleId>,
    pub ch_id: Option<VehicleId>,
    pub hops_to_ch: u32,
    pub children: BTreeSet<VehicleId>,
    pub timer_in: u64,
    pub timer_ch: u64,
    pub timer_cm: u64,
}

impl Default for ClusterState {
    fn default() -> Self {
        Self::initial()
    }
}

impl ClusterState {
    pub fn initial() -> Self {
        ClusterState {
            role: Role::Initial,
            parent_id: None,
            ch_id: None,
            hops_to_ch: 0,
            children: BTreeSet::new(),
            timer_in: 0,
            timer_ch: 0,
            timer_cm: 0,
        }
    }

    pub fn election() -> Self {
        ClusterState {
            role: Role::StateElection,
            ..Self::initial()
        }
    }

    pub fn head() -> Self {
        ClusterState {
            role: Role::ClusterHead,
            ..Self::initial()
        }
    }

    pub fn member(parent: VehicleId, ch: VehicleId, hops: u32) -> Self {
        ClusterState {
            role: Role::ClusterMember,
            parent_id: Some(parent),
            ch_id: Some(ch),
            hops_to_ch: hops,
            ..Self::initial()
        }
    }

    pub fn is_head(&self) -> bool {
        self.role == Role::ClusterHead
    }

    pub fn is_member(&self) -> bool {
        self.role == Role::ClusterMember
    }

    /// Hop count as advertised in HELLO packets.
    pub fn advertised_hops(&self) -> Option<u32> {
        match self.role {
            Role::ClusterHead => Some(0),
            Role::ClusterMember => Some(self.hops_to_ch),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusteringParams {
    pub alpha: f64,
    pub max_hop: u32,
    pub in_timer: u64,
    pub timer_ch_max: u64,
    pub timer_cm_max: u64,
    pub hello_period: u64,
    /// Divide the speed term of every metric by the configured speed spread.
    pub normalize_metric: bool,
}

impl Default for ClusteringParams {
    fn default() -> Self {
        ClusteringParams {
            alpha: 0.9,
            max_hop: 1,
            in_timer: 3,
            timer_ch_max: 30,
            timer_cm_max: 30,
            hello_period: 1,
            normalize_metric: false,
        }
    }
}

impl ClusteringParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if self.in_timer == 0 || self.timer_ch_max == 0 || self.timer_cm_max == 0 || self.hello_period == 0 {
            return Err(Error::Config("clustering timers and hello_period must be > 0".into()));
        }
        Ok(())
    }

    /// VIB entries not refreshed within this many ticks are evicted.
    pub fn staleness_horizon(&self) -> u64 {
        3 * self.hello_period
    }

    /// A member at `hops` may accept new children only below this bound.
    pub fn accepts_children_at(&self, hops: u32) -> bool {
        hops + 1 < self.max_hop
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VibEntry {
    pub hello: HelloPayload,
    pub last_heard: Tick,
    /// Model learnt from a JOIN_RESPONSE, if any.
    pub theta: Option<Arc<ModelParams>>,
    /// Last computed selection score for this neighbour.
    pub score: Option<f64>,
}

/// Vehicle information base: what a vehicle knows about its neighbours.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Vib {
    entries: BTreeMap<VehicleId, VibEntry>,
}

impl Vib {
    pub fn update(&mut self, from: VehicleId, hello: HelloPayload, now: Tick) {
        let entry = self.entries.entry(from).or_insert_with(|| VibEntry {
            hello: hello.clone(),
            last_heard: now,
            theta: None,
            score: None,
        });
        entry.hello = hello;
        entry.last_heard = now;
    }

    pub fn evict_stale(&mut self, now: Tick, horizon: u64) {
        self.entries.retain(|_, e| now.saturating_sub(e.last_heard) < horizon);
    }

    pub fn get(&self, id: VehicleId) -> Option<&VibEntry> {
        self.entries.get(&id)
    }

    pub fn get_mut(&mut self, id: VehicleId) -> Option<&mut VibEntry> {
        self.entries.get_mut(&id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (VehicleId, &VibEntry)> {
        self.entries.iter().map(|(k, v)| (*k, v))
    }

    /// Same-direction neighbours last seen in `role`, in id order.
    pub fn with_role(&self, role: Role, direction: Direction) -> Vec<VehicleId> {
        self.entries
            .iter()
            .filter(|(_, e)| e.hello.cluster_state == role && e.hello.direction == direction)
            .map(|(k, _)| *k)
            .collect()
    }
}

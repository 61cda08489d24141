//! Per-vehicle state transitions and the responder side of the handshakes.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use super::metrics::{avg_cosim_pair, cosine_similarity, self_score, MetricWeights};
use super::state::{ClusterState, ClusteringParams, Role, Vib};
use crate::fltrain::ModelParams;
use crate::mobility::{Direction, Tick, VehicleId};
use crate::netlayer::{Endpoint, JoinInfo, Message, MessageKind, ModelPayload, Payload};

/// Request/response transport used by the state machine. Implementations
/// route the request, let the peer answer, and route the answer back.
pub trait Exchange {
    fn request(&mut self, msg: Message) -> Option<Message>;
}

/// Events observed since the node's last clustering step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Activity {
    pub join: bool,
    pub gradient: bool,
    pub model: bool,
}

/// Everything the clustering logic needs to know about one vehicle.
#[derive(Debug, Clone)]
pub struct Node {
    pub id: VehicleId,
    pub direction: Direction,
    pub speed_mps: f64,
    pub state: ClusterState,
    pub vib: Vib,
    /// Working model: trained from, forwarded to members, handed over.
    pub theta: Arc<ModelParams>,
    /// Tick of the freshest global model this node holds.
    pub model_tick: Option<Tick>,
    /// The node's own latest model (local update, or cluster aggregate for a
    /// head) and the one before it. Advertised in JOIN replies.
    pub own: Arc<ModelParams>,
    pub own_prev: Arc<ModelParams>,
    /// `cos(own, own_prev)`.
    pub self_similarity: f64,
    pub avg_speed: f64,
    pub activity: Activity,
}

impl Node {
    pub fn new(id: VehicleId, direction: Direction, speed_mps: f64, theta: Arc<ModelParams>) -> Self {
        Node {
            id,
            direction,
            speed_mps,
            state: ClusterState::initial(),
            vib: Vib::default(),
            own: Arc::clone(&theta),
            own_prev: Arc::clone(&theta),
            theta,
            model_tick: None,
            self_similarity: 1.0,
            avg_speed: 0.0,
            activity: Activity::default(),
        }
    }

    /// Records a new own model and refreshes the self-similarity.
    pub fn record_own(&mut self, theta: Arc<ModelParams>) {
        self.own_prev = std::mem::replace(&mut self.own, theta);
        self.self_similarity = cosine_similarity(&self.own.values, &self.own_prev.values);
    }

    pub fn score(&self, w: MetricWeights) -> f64 {
        self_score(self.avg_speed, self.self_similarity, w)
    }

    pub fn join_info(&self) -> JoinInfo {
        JoinInfo {
            role: self.state.role,
            speed_mps: self.speed_mps,
            hops_to_ch: self.state.advertised_hops().unwrap_or(0),
            ch_id: if self.state.is_head() { self.id } else { self.state.ch_id.unwrap_or(self.id) },
            theta: Arc::clone(&self.own),
            model_tick: self.model_tick,
        }
    }

    fn demote(&mut self) {
        self.state = ClusterState::election();
    }
}

fn join_reply(msg: &Message) -> Option<&JoinInfo> {
    match &msg.payload {
        Payload::Join(info) => Some(info),
        _ => None,
    }
}

/// Advances one vehicle by one tick.
pub fn step(node: &mut Node, params: &ClusteringParams, w: MetricWeights, now: Tick, ex: &mut dyn Exchange) {
    match node.state.role {
        Role::Initial => step_in(node, params),
        Role::StateElection => step_se(node, params, w, now, ex),
        Role::ClusterHead => step_ch(node, params, w, now, ex),
        Role::ClusterMember => step_cm(node, params),
    }
}

pub fn step_in(node: &mut Node, params: &ClusteringParams) {
    node.state.timer_in += 1;
    if node.state.timer_in >= params.in_timer {
        node.demote();
    }
}

/// Runs JOIN then CONNECT against `candidates`; returns the accepted reply.
fn try_attach(
    node: &mut Node,
    candidates: &[VehicleId],
    accept: impl Fn(&JoinInfo) -> bool,
    w: MetricWeights,
    now: Tick,
    ex: &mut dyn Exchange,
) -> Option<(VehicleId, JoinInfo)> {
    let mut scored: Vec<(f64, VehicleId)> = Vec::new();
    for &k in candidates {
        let req = Message::unicast(MessageKind::JoinRequest, node.id, k, Payload::None, now);
        let Some(reply) = ex.request(req) else { continue };
        let Some(info) = join_reply(&reply) else { continue };
        if !accept(info) {
            continue;
        }
        let score = avg_cosim_pair(node.speed_mps, info.speed_mps, &info.theta.values, &node.theta.values, w);
        if let Some(e) = node.vib.get_mut(k) {
            e.theta = Some(Arc::clone(&info.theta));
            e.score = Some(score);
        }
        scored.push((score, k));
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    for (_, k) in scored {
        let req = Message::unicast(MessageKind::ConnectRequest, node.id, k, Payload::None, now);
        let Some(reply) = ex.request(req) else { continue };
        if reply.kind != MessageKind::ConnectResponse {
            continue;
        }
        if let Some(info) = join_reply(&reply) {
            if accept(info) {
                return Some((k, info.clone()));
            }
        }
    }
    None
}

fn become_member(node: &mut Node, parent: VehicleId, info: JoinInfo, hops: u32) {
    node.state = ClusterState::member(parent, info.ch_id, hops);
    node.theta = info.theta;
    node.model_tick = info.model_tick;
    node.activity = Activity::default();
}

pub fn step_se(node: &mut Node, params: &ClusteringParams, w: MetricWeights, now: Tick, ex: &mut dyn Exchange) {
    let heads = node.vib.with_role(Role::ClusterHead, node.direction);
    if let Some((k, info)) = try_attach(node, &heads, |i| i.role == Role::ClusterHead, w, now, ex) {
        become_member(node, k, info, 1);
        return;
    }

    let members: Vec<VehicleId> = node
        .vib
        .with_role(Role::ClusterMember, node.direction)
        .into_iter()
        .filter(|k| {
            node.vib
                .get(*k)
                .and_then(|e| e.hello.hops_to_ch)
                .is_some_and(|h| params.accepts_children_at(h))
        })
        .collect();
    let gate = |i: &JoinInfo| i.role == Role::ClusterMember && params.accepts_children_at(i.hops_to_ch);
    if let Some((k, info)) = try_attach(node, &members, gate, w, now, ex) {
        let hops = info.hops_to_ch + 1;
        become_member(node, k, info, hops);
        return;
    }

    let own = (node.score(w), node.id);
    let best_peer = node
        .vib
        .iter()
        .filter(|(_, e)| e.hello.cluster_state == Role::StateElection && e.hello.direction == node.direction)
        .map(|(k, e)| (self_score(e.hello.average_relative_speed, e.hello.cosine_similarity_self, w), k))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let wins = match best_peer {
        None => true,
        Some(peer) => own.0 < peer.0 || (own.0 == peer.0 && own.1 < peer.1),
    };
    if wins {
        node.state = ClusterState::head();
        node.activity = Activity::default();
    }
}

/// Neighbouring heads (same direction) with their advertised scores, best first.
fn neighbour_heads(node: &Node, w: MetricWeights) -> Vec<(f64, VehicleId)> {
    let mut v: Vec<(f64, VehicleId)> = node
        .vib
        .iter()
        .filter(|(_, e)| e.hello.cluster_state == Role::ClusterHead && e.hello.direction == node.direction)
        .map(|(k, e)| (self_score(e.hello.average_relative_speed, e.hello.cosine_similarity_self, w), k))
        .collect();
    v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    v
}

pub fn step_ch(node: &mut Node, params: &ClusteringParams, w: MetricWeights, now: Tick, ex: &mut dyn Exchange) {
    if node.activity.join || node.activity.gradient {
        node.state.timer_ch = 0;
    } else {
        node.state.timer_ch += 1;
    }
    node.activity = Activity::default();

    let heads = neighbour_heads(node, w);
    if node.state.timer_ch > params.timer_ch_max {
        if let Some(&(_, to)) = heads.first() {
            ex.request(handover_transfer(node, to, now));
        }
        node.demote();
        return;
    }

    let own = node.score(w);
    for (score, k) in heads {
        if score >= own {
            break;
        }
        let req = Message::unicast(MessageKind::ConnectRequest, node.id, k, Payload::None, now);
        let Some(reply) = ex.request(req) else { continue };
        let Some(info) = join_reply(&reply) else { continue };
        if reply.kind != MessageKind::ConnectResponse || info.role != Role::ClusterHead {
            continue;
        }
        let info = info.clone();
        ex.request(handover_transfer(node, k, now));
        become_member(node, k, info, 1);
        return;
    }
}

pub fn step_cm(node: &mut Node, params: &ClusteringParams) {
    if node.activity.model {
        node.state.timer_cm = 0;
    } else {
        node.state.timer_cm += 1;
    }
    node.activity = Activity::default();
    if node.state.timer_cm > params.timer_cm_max {
        node.demote();
    }
}

/// The HANDOVER_TRANSFER a demoting head sends to its successor.
pub fn handover_transfer(old_ch: &Node, new_ch: VehicleId, now: Tick) -> Message {
    Message::unicast(
        MessageKind::HandoverTransfer,
        old_ch.id,
        new_ch,
        Payload::Model(ModelPayload {
            theta: Arc::clone(&old_ch.theta),
            model_tick: old_ch.model_tick,
        }),
        now,
    )
}

/// Adopts a handed-over model when it is fresher than the one held.
pub fn adopt_handover(node: &mut Node, incoming: &ModelPayload) -> bool {
    let fresher = match (node.model_tick, incoming.model_tick) {
        (None, _) => true,
        (Some(own), Some(new)) => new > own,
        (Some(_), None) => false,
    };
    if fresher {
        node.theta = Arc::clone(&incoming.theta);
        node.model_tick = incoming.model_tick;
    }
    fresher
}

/// Answers a request addressed to `node`. Requests from the other direction
/// are ignored.
pub fn respond(node: &mut Node, msg: &Message, from_dir: Direction, params: &ClusteringParams) -> Option<Message> {
    let Endpoint::Vehicle(src) = msg.src else { return None };
    if from_dir != node.direction {
        return None;
    }
    let role = node.state.role;
    let reply = |node: &Node, kind| Some(Message::unicast(kind, node.id, src, Payload::Join(node.join_info()), msg.sent_tick));
    match msg.kind {
        MessageKind::JoinRequest => match role {
            Role::ClusterHead => {
                node.activity.join = true;
                reply(node, MessageKind::JoinResponse)
            }
            Role::ClusterMember => reply(node, MessageKind::JoinResponse),
            _ => None,
        },
        MessageKind::ConnectRequest => {
            let ok = match role {
                Role::ClusterHead => true,
                Role::ClusterMember => params.accepts_children_at(node.state.hops_to_ch),
                _ => false,
            };
            if !ok {
                return None;
            }
            if role == Role::ClusterHead {
                node.activity.join = true;
            }
            node.state.children.insert(src);
            reply(node, MessageKind::ConnectResponse)
        }
        MessageKind::HandoverTransfer => {
            if let (Role::ClusterHead, Payload::Model(m)) = (role, &msg.payload) {
                adopt_handover(node, m);
            }
            None
        }
        _ => None,
    }
}

/// Where a member's parent chain ends, if it reaches a head within `max_hop` links.
fn chain_head(states: &BTreeMap<VehicleId, &mut ClusterState>, start: VehicleId, max_hop: u32) -> Option<(VehicleId, u32)> {
    let mut seen = BTreeSet::new();
    let mut cur = start;
    let mut hops = 0u32;
    loop {
        if !seen.insert(cur) {
            return None;
        }
        let s = states.get(&cur)?;
        match s.role {
            Role::ClusterHead if hops > 0 => return Some((cur, hops)),
            Role::ClusterMember => {
                hops += 1;
                if hops > max_hop {
                    return None;
                }
                cur = s.parent_id?;
            }
            _ => return None,
        }
    }
}

/// Demotes members whose chain is broken, cyclic or too long, then rebuilds
/// `ch_id`, `hops_to_ch` and `children` from the surviving parent links.
/// Returns the ids demoted.
pub fn repair_topology(states: &mut BTreeMap<VehicleId, &mut ClusterState>, max_hop: u32) -> Vec<VehicleId> {
    let mut resolved = BTreeMap::new();
    let mut broken = Vec::new();
    for (&id, s) in states.iter() {
        if s.role == Role::ClusterMember {
            match chain_head(states, id, max_hop) {
                Some(r) => {
                    resolved.insert(id, r);
                }
                None => broken.push(id),
            }
        }
    }
    for id in &broken {
        if let Some(s) = states.get_mut(id) {
            **s = ClusterState::election();
        }
    }
    let mut children: BTreeMap<VehicleId, BTreeSet<VehicleId>> = BTreeMap::new();
    for (id, (ch, hops)) in &resolved {
        let s = states.get_mut(id).expect("resolved id present");
        s.ch_id = Some(*ch);
        s.hops_to_ch = *hops;
        children.entry(s.parent_id.expect("member has parent")).or_default().insert(*id);
    }
    for (id, s) in states.iter_mut() {
        if matches!(s.role, Role::ClusterHead | Role::ClusterMember) {
            s.children = children.remove(id).unwrap_or_default();
        } else {
            s.children.clear();
        }
        if s.role == Role::ClusterHead {
            s.parent_id = None;
            s.ch_id = None;
            s.hops_to_ch = 0;
        }
    }
    broken
}

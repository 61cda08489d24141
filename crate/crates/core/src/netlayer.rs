//! Range-gated V2V delivery, always-on V2I (EPC) delivery and packet accounting.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::clustering::Role;
use crate::fltrain::{Gradient, ModelParams};
use crate::mobility::{Connectivity, Direction, Tick, VehicleId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MessageKind {
    Hello,
    JoinRequest,
    JoinResponse,
    ConnectRequest,
    ConnectResponse,
    GradientUpload,
    ModelDownload,
    ChEpcUpload,
    EpcChDownload,
    HandoverTransfer,
}

impl MessageKind {
    pub const ALL: [MessageKind; 10] = [
        MessageKind::Hello,
        MessageKind::JoinRequest,
        MessageKind::JoinResponse,
        MessageKind::ConnectRequest,
        MessageKind::ConnectResponse,
        MessageKind::GradientUpload,
        MessageKind::ModelDownload,
        MessageKind::ChEpcUpload,
        MessageKind::EpcChDownload,
        MessageKind::HandoverTransfer,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MessageKind::Hello => "HELLO",
            MessageKind::JoinRequest => "JOIN_REQUEST",
            MessageKind::JoinResponse => "JOIN_RESPONSE",
            MessageKind::ConnectRequest => "CONNECT_REQUEST",
            MessageKind::ConnectResponse => "CONNECT_RESPONSE",
            MessageKind::GradientUpload => "GRADIENT_UPLOAD",
            MessageKind::ModelDownload => "MODEL_DOWNLOAD",
            MessageKind::ChEpcUpload => "CH_EPC_UPLOAD",
            MessageKind::EpcChDownload => "EPC_CH_DOWNLOAD",
            MessageKind::HandoverTransfer => "HANDOVER_TRANSFER",
        }
    }
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Endpoint {
    Vehicle(VehicleId),
    Epc,
    Broadcast,
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Vehicle(id) => write!(f, "{id}"),
            Endpoint::Epc => f.write_str("EPC"),
            Endpoint::Broadcast => f.write_str("*"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HelloPayload {
    pub direction: Direction,
    pub position_m: f64,
    pub speed_mps: f64,
    pub cluster_state: Role,
    /// `Some(0)` for a cluster head, `Some(h)` for a member, `None` otherwise.
    pub hops_to_ch: Option<u32>,
    pub parent_id: Option<VehicleId>,
    pub cosine_similarity_self: f64,
    pub average_relative_speed: f64,
    pub num_local_samples: usize,
}

/// Sender status attached to a JOIN_RESPONSE, including its current model.
#[derive(Debug, Clone, PartialEq)]
pub struct JoinInfo {
    pub role: Role,
    pub speed_mps: f64,
    pub hops_to_ch: u32,
    pub ch_id: VehicleId,
    pub theta: Arc<ModelParams>,
    pub model_tick: Option<Tick>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelPayload {
    pub theta: Arc<ModelParams>,
    /// Tick at which the sender last received a global model, if ever.
    pub model_tick: Option<Tick>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientPayload {
    pub origin: VehicleId,
    pub gradient: Arc<Gradient>,
    pub num_samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    None,
    Hello(HelloPayload),
    Join(JoinInfo),
    Model(ModelPayload),
    Gradient(GradientPayload),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub kind: MessageKind,
    pub src: Endpoint,
    pub dst: Endpoint,
    pub payload: Payload,
    pub sent_tick: Tick,
}

impl Message {
    pub fn unicast(kind: MessageKind, src: VehicleId, dst: VehicleId, payload: Payload, tick: Tick) -> Self {
        Message {
            kind,
            src: Endpoint::Vehicle(src),
            dst: Endpoint::Vehicle(dst),
            payload,
            sent_tick: tick,
        }
    }

    pub fn involves_epc(&self) -> bool {
        self.src == Endpoint::Epc || self.dst == Endpoint::Epc
    }
}

/// Receivers of `msg` under the given connectivity. Empty means dropped.
pub fn receivers(msg: &Message, conn: &Connectivity) -> Vec<Endpoint> {
    match (msg.src, msg.dst) {
        (_, Endpoint::Epc) | (Endpoint::Epc, _) => vec![msg.dst],
        (Endpoint::Vehicle(s), Endpoint::Broadcast) => conn.neighbors(s).map(Endpoint::Vehicle).collect(),
        (Endpoint::Vehicle(s), Endpoint::Vehicle(d)) if conn.linked(s, d) => vec![msg.dst],
        _ => Vec::new(),
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Delivery {
    pub inboxes: BTreeMap<Endpoint, Vec<Message>>,
    pub delivered: Vec<Message>,
    pub dropped: Vec<Message>,
}

/// Delivers a batch of messages in one tick. Pure in `(outbox, conn)`.
pub fn deliver(outbox: Vec<Message>, conn: &Connectivity) -> Delivery {
    let mut out = Delivery::default();
    for msg in outbox {
        let to = receivers(&msg, conn);
        if to.is_empty() {
            out.dropped.push(msg);
            continue;
        }
        for r in to {
            out.inboxes.entry(r).or_default().push(msg.clone());
        }
        out.delivered.push(msg);
    }
    out
}

/// Per-round packet counters.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PacketLedger {
    pub sent: BTreeMap<MessageKind, u64>,
    pub delivered: BTreeMap<MessageKind, u64>,
    pub dropped: BTreeMap<MessageKind, u64>,
    /// Packets with the EPC as source or destination.
    pub epc_count: u64,
    /// Packets between vehicles.
    pub v2v_count: u64,
}

impl PacketLedger {
    pub fn record(&mut self, msg: &Message, delivered: bool) {
        *self.sent.entry(msg.kind).or_default() += 1;
        let bucket = if delivered {
            &mut self.delivered
        } else {
            &mut self.dropped
        };
        *bucket.entry(msg.kind).or_default() += 1;
        if msg.involves_epc() {
            self.epc_count += 1;
        } else {
            self.v2v_count += 1;
        }
    }

    pub fn sent_of(&self, kind: MessageKind) -> u64 {
        self.sent.get(&kind).copied().unwrap_or(0)
    }

    pub fn dropped_of(&self, kind: MessageKind) -> u64 {
        self.dropped.get(&kind).copied().unwrap_or(0)
    }

    pub fn delivered_of(&self, kind: MessageKind) -> u64 {
        self.delivered.get(&kind).copied().unwrap_or(0)
    }

    /// Returns the counters accumulated so far and starts a new round.
    pub fn take(&mut self) -> PacketLedger {
        std::mem::take(self)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogRecord {
    pub tick: Tick,
    pub kind: MessageKind,
    pub src: Endpoint,
    pub dst: Endpoint,
    pub delivered: bool,
}

impl LogRecord {
    pub const CSV_HEADER: &'static str = "tick,kind,src,dst,delivered";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.tick,
            self.kind,
            self.src,
            self.dst,
            u8::from(self.delivered)
        )
    }
}

/// Sends messages one at a time, keeping the ledger and optional log.
#[derive(Debug, Clone, Default)]
pub struct Channel {
    pub ledger: PacketLedger,
    pub log: Option<Vec<LogRecord>>,
}

impl Channel {
    pub fn with_log(enabled: bool) -> Self {
        Channel {
            ledger: PacketLedger::default(),
            log: enabled.then(Vec::new),
        }
    }

    fn account(&mut self, msg: &Message, delivered: bool) {
        self.ledger.record(msg, delivered);
        if let Some(log) = &mut self.log {
            log.push(LogRecord {
                tick: msg.sent_tick,
                kind: msg.kind,
                src: msg.src,
                dst: msg.dst,
                delivered,
            });
        }
    }

    /// Unicast or EPC transfer. Returns the message if it arrived.
    pub fn send(&mut self, msg: Message, conn: &Connectivity) -> Option<Message> {
        let ok = !receivers(&msg, conn).is_empty();
        self.account(&msg, ok);
        ok.then_some(msg)
    }

    /// Broadcast; returns the receiving vehicle ids.
    pub fn broadcast(&mut self, msg: &Message, conn: &Connectivity) -> Vec<VehicleId> {
        let to: Vec<VehicleId> = receivers(msg, conn)
            .into_iter()
            .filter_map(|e| match e {
                Endpoint::Vehicle(v) => Some(v),
                _ => None,
            })
            .collect();
        self.account(msg, !to.is_empty());
        to
    }
}

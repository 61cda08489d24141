//! The tick loop: mobility, HELLO exchange, clustering and FL rounds.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{DatasetKind, Mode, PartitionKind, ScenarioConfig};
use crate::clustering::{
    self, relative_speed_of, repair_topology, respond, ClusterState, ClusteringParams, Exchange,
    MetricWeights, Node, Role,
};
use crate::error::{Error, Result};
use crate::fltrain::{
    data_collection_gate, evaluate, load_idx, local_train, local_update, partition_iid, partition_non_iid, DataGate,
    Dataset, Gradient, LocalDataset, LocalTraining, ModelParams,
};
use crate::hflagg::{ch_aggregate, ch_apply_member_gradient, epc_aggregate, AggregationWindow, Contribution, EpcState};
use crate::mobility::{inject_vehicles, step_mobility, Connectivity, Direction, Tick, VehicleId, VehicleRecord};
use crate::netlayer::{
    Channel, Endpoint, GradientPayload, HelloPayload, LogRecord, Message, MessageKind, ModelPayload, Payload,
};

const STREAM_MOBILITY: u64 = 1;
const STREAM_PARTITION: u64 = 2;
const STREAM_INIT: u64 = 3;
const STREAM_SUBSAMPLE: u64 = 4;
const STREAM_SYNTHETIC: u64 = 5;
const STREAM_VEHICLE_BASE: u64 = 1 << 32;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Full train/test sets, loaded once and shared between runs.
#[derive(Debug, Clone)]
pub struct DataSource {
    pub train: Arc<Dataset>,
    pub test: Arc<Dataset>,
}

fn idx_file(dir: &Path, stem: &str) -> PathBuf {
    let gz = dir.join(format!("{stem}.gz"));
    if gz.exists() {
        gz
    } else {
        dir.join(stem)
    }
}

impl DataSource {
    /// Loads the MNIST files named in the config. Synthetic configs get an
    /// empty source since their data is generated per seed.
    pub fn load(cfg: &ScenarioConfig) -> Result<Self> {
        match cfg.fl.dataset {
            DatasetKind::Mnist => {
                let dir = &cfg.fl.data_dir;
                let train = load_idx(&idx_file(dir, "train-images-idx3-ubyte"), &idx_file(dir, "train-labels-idx1-ubyte"))?;
                let test = load_idx(&idx_file(dir, "t10k-images-idx3-ubyte"), &idx_file(dir, "t10k-labels-idx1-ubyte"))?;
                Ok(DataSource {
                    train: Arc::new(train),
                    test: Arc::new(test),
                })
            }
            DatasetKind::Synthetic => Ok(DataSource::empty()),
        }
    }

    fn empty() -> Self {
        let e = Arc::new(Dataset {
            dim: 0,
            num_classes: 0,
            features: Vec::new(),
            labels: Vec::new(),
        });
        DataSource {
            train: Arc::clone(&e),
            test: e,
        }
    }

    /// The per-run train and test sets for `cfg`.
    fn resolve(&self, cfg: &ScenarioConfig) -> (Arc<Dataset>, Arc<Dataset>) {
        let seed = cfg.scenario.seed;
        match cfg.fl.dataset {
            DatasetKind::Synthetic => {
                let (n_train, n_test) = (cfg.fl.synthetic_train, cfg.fl.synthetic_test);
                let all = Dataset::synthetic_gaussian(n_train + n_test, cfg.fl.synthetic_dim, &mut stream(seed, STREAM_SYNTHETIC));
                let train = all.select(&(0..n_train).collect::<Vec<_>>());
                let test = all.select(&(n_train..n_train + n_test).collect::<Vec<_>>());
                (Arc::new(train), Arc::new(test))
            }
            DatasetKind::Mnist => {
                let mut rng = stream(seed, STREAM_SUBSAMPLE);
                let pick = |d: &Arc<Dataset>, n: usize, rng: &mut ChaCha8Rng| {
                    if n == 0 || n >= d.len() {
                        Arc::clone(d)
                    } else {
                        Arc::new(d.subsample(n, rng))
                    }
                };
                let train = pick(&self.train, cfg.fl.train_samples, &mut rng);
                let test = pick(&self.test, cfg.fl.test_samples, &mut rng);
                (train, test)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Vehicle {
    pub record: VehicleRecord,
    pub node: Node,
    pub data: LocalDataset,
    pub t_data: u64,
    pub data_ready: bool,
    rng: ChaCha8Rng,
}

impl Vehicle {
    fn hello(&self) -> HelloPayload {
        HelloPayload {
            direction: self.record.direction,
            position_m: self.record.position_m,
            speed_mps: self.record.speed_mps,
            cluster_state: self.node.state.role,
            hops_to_ch: self.node.state.advertised_hops(),
            parent_id: self.node.state.parent_id,
            cosine_similarity_self: self.node.self_similarity,
            average_relative_speed: self.node.avg_speed,
            num_local_samples: if self.data_ready { self.data.n() } else { 0 },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round: u64,
    pub tick: Tick,
    pub epc_accuracy: f64,
    /// Per-head accuracy, only when enabled in the config.
    pub ch_accuracies: Vec<(VehicleId, f64)>,
    pub num_chs: usize,
    pub num_cms: usize,
    pub num_se: usize,
    pub num_in: usize,
    pub live: usize,
    pub epc_packets: u64,
    pub v2v_packets: u64,
    /// Whether the EPC produced a new global model this round.
    pub aggregated: bool,
    pub convergence_speed: f64,
    pub converged: bool,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopologyRow {
    pub tick: Tick,
    pub id: VehicleId,
    pub role: Role,
    pub ch_id: Option<VehicleId>,
    pub hops: u32,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub config: ScenarioConfig,
    pub rounds: Vec<RoundMetrics>,
    pub topology: Vec<TopologyRow>,
    pub messages: Option<Vec<LogRecord>>,
}

impl RunOutput {
    /// First round at which convergence speed drops below `epsilon`.
    pub fn convergence_round(&self, epsilon: f64) -> Option<u64> {
        self.rounds.iter().find(|r| r.convergence_speed < epsilon).map(|r| r.round)
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.rounds.last().map(|r| r.epc_accuracy)
    }
}

/// Routes handshake requests of one vehicle through the channel to its peers.
struct SimExchange<'a> {
    vehicles: &'a mut BTreeMap<VehicleId, Vehicle>,
    channel: &'a mut Channel,
    conn: &'a Connectivity,
    params: &'a ClusteringParams,
    from_dir: Direction,
}

impl Exchange for SimExchange<'_> {
    fn request(&mut self, msg: Message) -> Option<Message> {
        let Endpoint::Vehicle(dst) = msg.dst else { return None };
        let msg = self.channel.send(msg, self.conn)?;
        let peer = self.vehicles.get_mut(&dst)?;
        let reply = respond(&mut peer.node, &msg, self.from_dir, self.params)?;
        self.channel.send(reply, self.conn)
    }
}

pub struct Simulation {
    cfg: ScenarioConfig,
    params: ClusteringParams,
    weights: MetricWeights,
    training: LocalTraining,
    now: Tick,
    next_id: u64,
    vehicles: BTreeMap<VehicleId, Vehicle>,
    mobility_rng: ChaCha8Rng,
    partitions: Vec<LocalDataset>,
    test: Arc<Dataset>,
    theta0: Arc<ModelParams>,
    epc: EpcState,
    last_accuracy: f64,
    channel: Channel,
    conn: Connectivity,
    rounds: Vec<RoundMetrics>,
    topology: Vec<TopologyRow>,
    round_started: Instant,
}

impl Simulation {
    pub fn new(cfg: ScenarioConfig) -> Result<Self> {
        let source = DataSource::load(&cfg)?;
        Self::with_source(cfg, &source)
    }

    pub fn with_source(cfg: ScenarioConfig, source: &DataSource) -> Result<Self> {
        cfg.validate()?;
        let seed = cfg.scenario.seed;
        let (train, test) = source.resolve(&cfg);
        if train.is_empty() || test.is_empty() {
            return Err(Error::Config("dataset is empty".into()));
        }
        let population = cfg.mobility.target_population();
        let mut prng = stream(seed, STREAM_PARTITION);
        let partitions = match cfg.fl.partition {
            PartitionKind::NonIid => partition_non_iid(&train, population, cfg.fl.shards_per_vehicle, None, &mut prng)?,
            PartitionKind::Iid => partition_iid(&train, population, &mut prng)?,
        };
        let mut layers = vec![train.dim];
        layers.extend(&cfg.fl.hidden_layers);
        layers.push(train.num_classes.max(test.num_classes));
        let theta0 = Arc::new(ModelParams::init(&layers, &mut stream(seed, STREAM_INIT)));
        let epc = EpcState::new(Arc::clone(&theta0), cfg.aggregation.epsilon, cfg.aggregation.epc_mode);
        let last_accuracy = evaluate(&theta0, &test);
        Ok(Simulation {
            params: cfg.resolved_clustering(),
            weights: cfg.metric_weights(),
            training: LocalTraining {
                eta: cfg.fl.eta,
                batch_size: cfg.fl.batch_size,
                local_steps: cfg.fl.local_steps,
            },
            now: 0,
            next_id: 0,
            vehicles: BTreeMap::new(),
            mobility_rng: stream(seed, STREAM_MOBILITY),
            partitions,
            test,
            theta0,
            epc,
            last_accuracy,
            channel: Channel::with_log(cfg.scenario.log_messages),
            conn: Connectivity::default(),
            rounds: Vec::new(),
            topology: Vec::new(),
            round_started: Instant::now(),
            cfg,
        })
    }

    /// Places the given vehicles up front (ids are taken from the records).
    pub fn with_population(cfg: ScenarioConfig, source: &DataSource, records: Vec<VehicleRecord>) -> Result<Self> {
        let mut sim = Self::with_source(cfg, source)?;
        for r in records {
            sim.next_id = sim.next_id.max(r.id.0 + 1);
            sim.spawn(r);
        }
        Ok(sim)
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    pub fn now(&self) -> Tick {
        self.now
    }

    pub fn vehicles(&self) -> &BTreeMap<VehicleId, Vehicle> {
        &self.vehicles
    }

    pub fn epc(&self) -> &EpcState {
        &self.epc
    }

    pub fn rounds(&self) -> &[RoundMetrics] {
        &self.rounds
    }

    pub fn channel(&self) -> &Channel {
        &self.channel
    }

    fn spawn(&mut self, record: VehicleRecord) {
        let id = record.id;
        let data = self.partitions[(id.0 as usize) % self.partitions.len()].clone();
        let node = Node::new(id, record.direction, record.speed_mps, Arc::clone(&self.theta0));
        let ready = !self.cfg.clusters();
        self.vehicles.insert(
            id,
            Vehicle {
                record,
                node,
                data,
                t_data: 0,
                data_ready: ready,
                rng: stream(self.cfg.scenario.seed, STREAM_VEHICLE_BASE + id.0),
            },
        );
    }

    fn records(&self) -> Vec<VehicleRecord> {
        self.vehicles.values().map(|v| v.record.clone()).collect()
    }

    /// Runs until the stopping rule fires or `max_rounds` rounds complete.
    pub fn run(mut self) -> Result<RunOutput> {
        let max_rounds = self.cfg.scenario.max_rounds;
        while (self.rounds.len() as u64) < max_rounds {
            if let Some(r) = self.step_tick()? {
                if r.converged && !self.cfg.scenario.run_past_convergence {
                    break;
                }
            }
        }
        Ok(RunOutput {
            config: self.cfg,
            rounds: self.rounds,
            topology: self.topology,
            messages: self.channel.log,
        })
    }

    /// Advances one tick; returns the round record when a round closes.
    pub fn step_tick(&mut self) -> Result<Option<RoundMetrics>> {
        let now = self.now;
        if !self.cfg.scenario.static_topology {
            let existing = self.records();
            let fresh = inject_vehicles(&mut self.mobility_rng, &self.cfg.mobility, now, &existing, &mut self.next_id);
            for r in fresh {
                self.spawn(r);
            }
            let moved = step_mobility(&self.records(), &self.cfg.mobility, self.cfg.mobility.tick_duration_s);
            for r in moved {
                if let Some(v) = self.vehicles.get_mut(&r.id) {
                    v.node.speed_mps = r.speed_mps;
                    v.record = r;
                }
            }
        }
        self.conn = Connectivity::build(&self.records(), self.cfg.network.tx_range_m, self.cfg.mobility.length_m);

        self.data_phase()?;
        if self.cfg.clusters() {
            self.refresh_metric_inputs();
            self.hello_phase();
            self.clustering_phase();
        }

        let mut closed = None;
        if (now + 1) % self.cfg.scenario.ticks_per_round == 0 {
            closed = Some(self.fl_round()?);
        }
        self.now += 1;
        Ok(closed)
    }

    fn data_phase(&mut self) -> Result<()> {
        let t_max = self.cfg.fl.t_data_max;
        for v in self.vehicles.values_mut() {
            if v.data_ready {
                continue;
            }
            match data_collection_gate(v.t_data, t_max) {
                DataGate::Collect => v.t_data += 1,
                DataGate::Train => {
                    v.t_data = 0;
                    v.data_ready = true;
                    if v.node.state.role == Role::Initial {
                        let g = local_train(&v.node.theta, &v.data, &self.training, &mut v.rng)?;
                        let next = Arc::new(local_update(&v.node.theta, &g, self.training.eta)?);
                        v.node.theta = Arc::clone(&next);
                        v.node.record_own(next);
                    }
                }
            }
        }
        Ok(())
    }

    /// Same-direction vehicles reachable within `hops` links of `from`.
    fn neighbourhood(&self, from: VehicleId, hops: u32) -> BTreeSet<VehicleId> {
        let dir = self.vehicles[&from].record.direction;
        let mut seen = BTreeSet::from([from]);
        let mut frontier = vec![from];
        for _ in 0..hops {
            let mut next = Vec::new();
            for u in frontier {
                for w in self.conn.neighbors(u) {
                    if self.vehicles[&w].record.direction == dir && seen.insert(w) {
                        next.push(w);
                    }
                }
            }
            frontier = next;
        }
        seen.remove(&from);
        seen
    }

    fn refresh_metric_inputs(&mut self) {
        let hops = self.params.max_hop.max(1);
        let speeds: Vec<(VehicleId, f64)> = self
            .vehicles
            .keys()
            .map(|&id| {
                let own = self.vehicles[&id].record.speed_mps;
                let near = self.neighbourhood(id, hops);
                (id, relative_speed_of(own, near.iter().map(|n| self.vehicles[n].record.speed_mps)))
            })
            .collect();
        for (id, avg) in speeds {
            self.vehicles.get_mut(&id).expect("vehicle exists").node.avg_speed = avg;
        }
    }

    fn hello_phase(&mut self) {
        let now = self.now;
        if now % self.params.hello_period == 0 {
            let hellos: Vec<(VehicleId, HelloPayload)> = self.vehicles.iter().map(|(k, v)| (*k, v.hello())).collect();
            for (src, hello) in hellos {
                let msg = Message {
                    kind: MessageKind::Hello,
                    src: Endpoint::Vehicle(src),
                    dst: Endpoint::Broadcast,
                    payload: Payload::Hello(hello.clone()),
                    sent_tick: now,
                };
                for r in self.channel.broadcast(&msg, &self.conn) {
                    if let Some(v) = self.vehicles.get_mut(&r) {
                        v.node.vib.update(src, hello.clone(), now);
                    }
                }
            }
        }
        let horizon = self.params.staleness_horizon();
        for v in self.vehicles.values_mut() {
            v.node.vib.evict_stale(now, horizon);
        }
    }

    fn clustering_phase(&mut self) {
        let ids: Vec<VehicleId> = self.vehicles.keys().copied().collect();
        for id in ids {
            let mut v = self.vehicles.remove(&id).expect("vehicle exists");
            let mut ex = SimExchange {
                vehicles: &mut self.vehicles,
                channel: &mut self.channel,
                conn: &self.conn,
                params: &self.params,
                from_dir: v.record.direction,
            };
            clustering::step(&mut v.node, &self.params, self.weights, self.now, &mut ex);
            self.vehicles.insert(id, v);
        }
        let mut states: BTreeMap<VehicleId, &mut ClusterState> =
            self.vehicles.iter_mut().map(|(k, v)| (*k, &mut v.node.state)).collect();
        repair_topology(&mut states, self.params.max_hop);
    }

    /// Local training on the vehicle's working model. With `record`, the
    /// resulting local model becomes the vehicle's own model.
    fn train(&mut self, id: VehicleId, record: bool) -> Result<Option<(Arc<Gradient>, usize)>> {
        let v = self.vehicles.get_mut(&id).expect("vehicle exists");
        if !v.data_ready || v.data.n() == 0 {
            return Ok(None);
        }
        let g = local_train(&v.node.theta, &v.data, &self.training, &mut v.rng)?;
        if record {
            let local = local_update(&v.node.theta, &g, self.training.eta)?;
            v.node.record_own(Arc::new(local));
        }
        Ok(Some((Arc::new(g), v.data.n())))
    }

    fn ids_with_role(&self, role: Role) -> Vec<VehicleId> {
        self.vehicles.iter().filter(|(_, v)| v.node.state.role == role).map(|(k, _)| *k).collect()
    }

    /// Relays a member gradient hop by hop to its head. Returns the number of
    /// hops taken when it arrives.
    fn relay(&mut self, origin: VehicleId, head: VehicleId, payload: &GradientPayload) -> Option<u32> {
        let mut cur = origin;
        let mut hops = 0u32;
        while cur != head {
            let parent = self.vehicles.get(&cur)?.node.state.parent_id?;
            let msg = Message::unicast(MessageKind::GradientUpload, cur, parent, Payload::Gradient(payload.clone()), self.now);
            self.channel.send(msg, &self.conn)?;
            hops += 1;
            if hops > self.params.max_hop {
                return None;
            }
            cur = parent;
        }
        Some(hops)
    }

    fn clustered_uploads(&mut self) -> Result<Vec<Contribution>> {
        let eta = self.training.eta;
        let mut uploads = Vec::new();
        for head in self.ids_with_role(Role::ClusterHead) {
            let theta_h = Arc::clone(&self.vehicles[&head].node.theta);
            let mut window = AggregationWindow::new(self.cfg.aggregation.t_collect_max);
            if self.cfg.aggregation.ch_trains {
                if let Some((g, n)) = self.train(head, false)? {
                    window.offer(head, 0, g, n);
                }
            }
            let members: Vec<VehicleId> = self
                .vehicles
                .iter()
                .filter(|(_, v)| v.node.state.role == Role::ClusterMember && v.node.state.ch_id == Some(head))
                .map(|(k, _)| *k)
                .collect();
            let mut heard = false;
            for m in members {
                let Some((g, n)) = self.train(m, true)? else { continue };
                let payload = GradientPayload {
                    origin: m,
                    gradient: Arc::clone(&g),
                    num_samples: n,
                };
                if let Some(hops) = self.relay(m, head, &payload) {
                    heard = true;
                    window.offer(m, u64::from(hops - 1), g, n);
                }
            }
            if heard {
                self.vehicles.get_mut(&head).expect("head exists").node.activity.gradient = true;
            }
            let mut contribs = Vec::with_capacity(window.len());
            for (id, g, n) in window.into_sorted() {
                contribs.push(Contribution {
                    id,
                    theta: Arc::new(ch_apply_member_gradient(&theta_h, &g, eta)?),
                    n,
                });
            }
            let Some(agg) = ch_aggregate(&contribs)? else { continue };
            let n_ch: usize = contribs.iter().map(|c| c.n).sum();
            let agg = Arc::new(agg);
            let hv = self.vehicles.get_mut(&head).expect("head exists");
            hv.node.theta = Arc::clone(&agg);
            hv.node.record_own(Arc::clone(&agg));
            let model_tick = hv.node.model_tick;
            self.send_epc_upload(head, Payload::Model(ModelPayload {
                theta: Arc::clone(&agg),
                model_tick,
            }));
            uploads.push(Contribution {
                id: head,
                theta: agg,
                n: n_ch,
            });
        }
        Ok(uploads)
    }

    fn send_epc_upload(&mut self, from: VehicleId, payload: Payload) {
        let msg = Message {
            kind: MessageKind::ChEpcUpload,
            src: Endpoint::Vehicle(from),
            dst: Endpoint::Epc,
            payload,
            sent_tick: self.now,
        };
        self.channel.send(msg, &self.conn);
    }

    fn send_epc_download(&mut self, to: VehicleId) -> bool {
        let msg = Message {
            kind: MessageKind::EpcChDownload,
            src: Endpoint::Epc,
            dst: Endpoint::Vehicle(to),
            payload: Payload::Model(ModelPayload {
                theta: Arc::clone(&self.epc.theta),
                model_tick: Some(self.now),
            }),
            sent_tick: self.now,
        };
        self.channel.send(msg, &self.conn).is_some()
    }

    fn direct_uploads(&mut self) -> Result<Vec<Contribution>> {
        let eta = self.training.eta;
        let global = Arc::clone(&self.epc.theta);
        let mut uploads = Vec::new();
        let ids: Vec<VehicleId> = self.vehicles.keys().copied().collect();
        for id in ids {
            let Some((g, n)) = self.train(id, true)? else { continue };
            self.send_epc_upload(id, Payload::Gradient(GradientPayload {
                origin: id,
                gradient: Arc::clone(&g),
                num_samples: n,
            }));
            uploads.push(Contribution {
                id,
                theta: Arc::new(local_update(&global, &g, eta)?),
                n,
            });
        }
        Ok(uploads)
    }

    /// Pushes the head's model down its member tree, one hop per message.
    fn broadcast_to_members(&mut self, head: VehicleId) {
        let theta = Arc::clone(&self.vehicles[&head].node.theta);
        let model_tick = self.vehicles[&head].node.model_tick;
        let mut queue = VecDeque::from([head]);
        while let Some(p) = queue.pop_front() {
            let kids: Vec<VehicleId> = self.vehicles[&p].node.state.children.iter().copied().collect();
            for c in kids {
                let msg = Message::unicast(
                    MessageKind::ModelDownload,
                    p,
                    c,
                    Payload::Model(ModelPayload {
                        theta: Arc::clone(&theta),
                        model_tick,
                    }),
                    self.now,
                );
                if self.channel.send(msg, &self.conn).is_none() {
                    continue;
                }
                let cv = self.vehicles.get_mut(&c).expect("child exists");
                cv.node.theta = Arc::clone(&theta);
                cv.node.model_tick = model_tick;
                cv.node.activity.model = true;
                queue.push_back(c);
            }
        }
    }

    fn fl_round(&mut self) -> Result<RoundMetrics> {
        let uploads = if self.cfg.clusters() {
            self.clustered_uploads()?
        } else {
            self.direct_uploads()?
        };
        let aggregated = epc_aggregate(&mut self.epc, &uploads, self.training.eta)?;
        if aggregated {
            self.last_accuracy = evaluate(&self.epc.theta, &self.test);
            self.epc.accuracy_history.push(self.last_accuracy);
        }

        if self.cfg.clusters() {
            let heads = self.ids_with_role(Role::ClusterHead);
            let uploaded: BTreeSet<VehicleId> = uploads.iter().map(|c| c.id).collect();
            for h in heads {
                let mut changed = uploaded.contains(&h);
                if aggregated && self.send_epc_download(h) {
                    let now = self.now;
                    let theta = Arc::clone(&self.epc.theta);
                    let hv = self.vehicles.get_mut(&h).expect("head exists");
                    hv.node.theta = theta;
                    hv.node.model_tick = Some(now);
                    changed = true;
                }
                if changed {
                    self.broadcast_to_members(h);
                }
            }
        } else if aggregated {
            for c in &uploads {
                if self.send_epc_download(c.id) {
                    let now = self.now;
                    let theta = Arc::clone(&self.epc.theta);
                    let v = self.vehicles.get_mut(&c.id).expect("uploader exists");
                    v.node.theta = theta;
                    v.node.model_tick = Some(now);
                }
            }
        }
        Ok(self.close_round(aggregated))
    }

    fn close_round(&mut self, aggregated: bool) -> RoundMetrics {
        let ledger = self.channel.ledger.take();
        let mut census = [0usize; 4];
        for v in self.vehicles.values() {
            census[v.node.state.role as usize] += 1;
            self.topology.push(TopologyRow {
                tick: self.now,
                id: v.record.id,
                role: v.node.state.role,
                ch_id: match v.node.state.role {
                    Role::ClusterHead => Some(v.record.id),
                    _ => v.node.state.ch_id,
                },
                hops: v.node.state.hops_to_ch,
            });
        }
        let ch_accuracies = if self.cfg.scenario.eval_ch_accuracy {
            self.ids_with_role(Role::ClusterHead)
                .into_iter()
                .map(|h| (h, evaluate(&self.vehicles[&h].node.theta, &self.test)))
                .collect()
        } else {
            Vec::new()
        };
        let speed = self.epc.convergence_speed(self.cfg.aggregation.convergence_window);
        let m = RoundMetrics {
            round: self.rounds.len() as u64 + 1,
            tick: self.now,
            epc_accuracy: self.last_accuracy,
            ch_accuracies,
            num_in: census[Role::Initial as usize],
            num_se: census[Role::StateElection as usize],
            num_chs: census[Role::ClusterHead as usize],
            num_cms: census[Role::ClusterMember as usize],
            live: self.vehicles.len(),
            epc_packets: ledger.epc_count,
            v2v_packets: ledger.v2v_count,
            aggregated,
            convergence_speed: speed,
            converged: speed < self.epc.epsilon,
            wall_time_s: self.round_started.elapsed().as_secs_f64(),
        };
        self.round_started = Instant::now();
        self.rounds.push(m.clone());
        m
    }

    /// Structural violations of the clustering topology, empty when sound.
    pub fn topology_violations(&self) -> Vec<String> {
        let max_hop = self.params.max_hop;
        let mut out = Vec::new();
        for (id, v) in &self.vehicles {
            let s = &v.node.state;
            match s.role {
                Role::ClusterHead => {
                    if s.parent_id.is_some() || s.hops_to_ch != 0 {
                        out.push(format!("head {id} has parent or nonzero hops"));
                    }
                }
                Role::ClusterMember => {
                    let (Some(_), Some(ch)) = (s.parent_id, s.ch_id) else {
                        out.push(format!("member {id} lacks parent or head"));
                        continue;
                    };
                    if s.hops_to_ch < 1 || s.hops_to_ch > max_hop {
                        out.push(format!("member {id} at {} hops (max {max_hop})", s.hops_to_ch));
                    }
                    let mut cur = *id;
                    let mut links = 0;
                    let mut seen = BTreeSet::new();
                    loop {
                        if !seen.insert(cur) {
                            out.push(format!("member {id} has a cyclic parent chain"));
                            break;
                        }
                        let cs = &self.vehicles.get(&cur).map(|x| &x.node.state);
                        let Some(cs) = cs else {
                            out.push(format!("member {id} chain hits missing vehicle {cur}"));
                            break;
                        };
                        if cs.role == Role::ClusterHead {
                            if cur != ch || links != s.hops_to_ch {
                                out.push(format!("member {id} chain ends at {cur} after {links} links"));
                            }
                            break;
                        }
                        if cs.role != Role::ClusterMember || links > max_hop {
                            out.push(format!("member {id} chain broken at {cur}"));
                            break;
                        }
                        links += 1;
                        cur = cs.parent_id.expect("member has parent");
                    }
                }
                _ => {}
            }
        }
        out
    }

    /// `(role, timer_ch, timer_cm)` per vehicle, for timer monotonicity checks.
    pub fn timer_snapshot(&self) -> BTreeMap<VehicleId, (Role, u64, u64)> {
        self.vehicles
            .iter()
            .map(|(k, v)| (*k, (v.node.state.role, v.node.state.timer_ch, v.node.state.timer_cm)))
            .collect()
    }
}

/// Timers that neither reset nor advanced by exactly one between snapshots of
/// a vehicle that kept its role.
pub fn timer_violations(
    before: &BTreeMap<VehicleId, (Role, u64, u64)>,
    after: &BTreeMap<VehicleId, (Role, u64, u64)>,
) -> Vec<String> {
    let mut out = Vec::new();
    for (id, &(role, ch, cm)) in after {
        let Some(&(prev_role, prev_ch, prev_cm)) = before.get(id) else { continue };
        if role != prev_role {
            continue;
        }
        let (old, new) = match role {
            Role::ClusterHead => (prev_ch, ch),
            Role::ClusterMember => (prev_cm, cm),
            _ => continue,
        };
        if new != 0 && new != old + 1 {
            out.push(format!("{id} ({role}) timer went {old} -> {new}"));
        }
    }
    out
}

/// Convenience wrapper: load data, run, return the output.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<RunOutput> {
    Simulation::new(cfg.clone())?.run()
}

/// As [`run_scenario`], reusing already loaded data.
pub fn run_scenario_with(cfg: &ScenarioConfig, source: &DataSource) -> Result<RunOutput> {
    Simulation::with_source(cfg.clone(), source)?.run()
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Proposed => "proposed",
            Mode::NoClustering => "no_clustering",
            Mode::MobilityOnly => "mobility_only",
            Mode::SimilarityOnly => "similarity_only",
        }
    }
}

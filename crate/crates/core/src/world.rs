//! The simulated network: node state, wire messages, timers, and the
//! single-threaded event loop. Protocol logic lives in `overlay`, `lookup`,
//! `adversary`, `anonpath`, and `sentinel`, all as `impl World` blocks over
//! this state.

use crate::config::Scenario;
use crate::ring::{IdSet, NodeId, Ring, RingPoint};
use crate::rng::stream;
use crate::sentinel::{CertAuthority, Metrics};
use crate::sig::{AgeProof, Direction, FingerSlot, SigTag, SignedNeighbors, SignedTable};
use crate::sim::latency::{jitter_window, LatencyModel};
use crate::sim::EventQueue;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

pub type ReqId = u64;
pub type FlowId = u64;
pub type TaskId = u64;

/// Scope of a table request: walks only need fingers, everything else wants
/// the full table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TableScope {
    Full,
    FingersOnly,
}

/// Request carried inside the innermost onion layer, executed by the exit
/// relay against the query target.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum InnerReq {
    Table { target: NodeId, scope: TableScope },
    /// Walk phase handoff: `target` continues the walk for `hops` more
    /// steps, choices driven by `seed`.
    WalkSeed { target: NodeId, seed: u64, hops: usize },
}

/// Onion packet: each layer reveals only the next hop. Unwrapping yields
/// either another opaque layer or the exit instruction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum OnionPkt {
    Relay {
        next: NodeId,
        /// Middle-relay mixing delay bound; zero for ordinary relays.
        delay_max_ms: u64,
        inner: Box<OnionPkt>,
    },
    Exit { req: InnerReq },
}

impl OnionPkt {
    pub fn bytes(&self) -> u64 {
        match self {
            OnionPkt::Relay { inner, .. } => crate::world::ONION_LAYER_BYTES + inner.bytes(),
            OnionPkt::Exit { req } => match req {
                InnerReq::Table { .. } => REQ_BYTES,
                InnerReq::WalkSeed { .. } => REQ_BYTES + 8,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum OnionReply {
    Table(SignedTable),
    WalkResult(Vec<SignedTable>),
}

impl OnionReply {
    pub fn bytes(&self) -> u64 {
        match self {
            OnionReply::Table(t) => table_bytes(t),
            OnionReply::WalkResult(ts) => ts.iter().map(table_bytes).sum::<u64>() + REQ_BYTES,
        }
    }
}

/// Wire messages.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Msg {
    StabReq { req: ReqId, dir: Direction },
    StabRep { req: ReqId, signed: SignedNeighbors },
    TableReq { req: ReqId, scope: TableScope, receipt: Option<(FlowId, u8)> },
    TableRep { req: ReqId, table: SignedTable },
    PredListReq { req: ReqId },
    PredListRep { req: ReqId, signed: SignedNeighbors },
    AgeReq { req: ReqId },
    AgeRep { req: ReqId, proof: AgeProof },
    OnionFwd { flow: FlowId, leg: u8, class: BandClass, pkt: OnionPkt },
    OnionBack { flow: FlowId, leg: u8, class: BandClass, reply: OnionReply },
    Receipt { flow: FlowId, leg: u8, sig: SigTag },
    /// Walk hand-off delivered by the exit relay: continue the walk for
    /// `hops` more steps with seed-determined choices.
    WalkSeedReq { req: ReqId, seed: u64, hops: usize, receipt: Option<(FlowId, u8)> },
    WalkSeedDone { req: ReqId, tables: Vec<SignedTable> },
    /// Ask a witness to deliver a hop payload we could not get receipted.
    WitnessAsk { req: ReqId, deliver_to: NodeId, payload: Box<Msg> },
    /// Witness outcome: a receipt it obtained, or its signed failure statement.
    WitnessTell { req: ReqId, receipt: Option<SigTag>, statement: Option<SigTag> },
}

pub const ITEM_BYTES: u64 = 10;
pub const SIG_BYTES: u64 = 44; // 40-byte signature + 4-byte timestamp
pub const CERT_BYTES: u64 = 50;
pub const REQ_BYTES: u64 = 20;
pub const ONION_LAYER_BYTES: u64 = 16;
pub const RECEIPT_BYTES: u64 = SIG_BYTES + 20;

pub fn table_bytes(t: &SignedTable) -> u64 {
    t.table.item_count() as u64 * ITEM_BYTES + SIG_BYTES + CERT_BYTES
}

pub fn neighbors_bytes(l: &SignedNeighbors) -> u64 {
    (l.list.entries.len() as u64 + l.list.hint.is_some() as u64) * ITEM_BYTES + SIG_BYTES
}

impl Msg {
    pub fn bytes(&self) -> u64 {
        match self {
            Msg::StabReq { .. } | Msg::AgeReq { .. } | Msg::PredListReq { .. } => REQ_BYTES,
            Msg::TableReq { .. } => REQ_BYTES,
            Msg::StabRep { signed, .. } | Msg::PredListRep { signed, .. } => neighbors_bytes(signed),
            Msg::TableRep { table, .. } => table_bytes(table),
            Msg::AgeRep { .. } => REQ_BYTES + SIG_BYTES,
            Msg::OnionFwd { pkt, .. } => pkt.bytes(),
            Msg::OnionBack { reply, .. } => reply.bytes() + ONION_LAYER_BYTES,
            Msg::Receipt { .. } => RECEIPT_BYTES,
            Msg::WalkSeedReq { .. } => REQ_BYTES + 8,
            Msg::WalkSeedDone { tables, .. } => {
                tables.iter().map(table_bytes).sum::<u64>() + REQ_BYTES
            }
            Msg::WitnessAsk { payload, .. } => REQ_BYTES + payload.bytes(),
            Msg::WitnessTell { .. } => RECEIPT_BYTES + REQ_BYTES,
        }
    }
}

/// Message class for bandwidth accounting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum BandClass {
    Stabilize,
    Lookup,
    FingerMaint,
    Walk,
    Surveillance,
    DosControl,
}

pub const BAND_CLASSES: [BandClass; 6] = [
    BandClass::Stabilize,
    BandClass::Lookup,
    BandClass::FingerMaint,
    BandClass::Walk,
    BandClass::Surveillance,
    BandClass::DosControl,
];

impl BandClass {
    pub fn name(self) -> &'static str {
        match self {
            BandClass::Stabilize => "stabilize",
            BandClass::Lookup => "lookup",
            BandClass::FingerMaint => "finger_maint",
            BandClass::Walk => "walk",
            BandClass::Surveillance => "surveillance",
            BandClass::DosControl => "dos_control",
        }
    }
}

/// Timers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Timer {
    StabTick { node: NodeId, dir: Direction },
    FingerTick { node: NodeId },
    NeighborCheckTick { node: NodeId },
    FingerCheckTick { node: NodeId },
    CheckProbeDelay { node: NodeId, task: TaskId },
    LookupTick { node: NodeId },
    DummyFire { node: NodeId, lookup: TaskId },
    PoolTick { node: NodeId },
    ReqTimeout { node: NodeId, req: ReqId },
    FlowDeadline { node: NodeId, flow: FlowId },
    ReceiptDeadline { node: NodeId, flow: FlowId, leg: u8 },
    /// Anonymous lookup hop waiting for relay-pool capacity.
    AnonRetry { node: NodeId, lookup: TaskId, target: NodeId },
    Death { node: NodeId },
    Join { malicious: bool, slot: usize },
    MetricsTick,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Ev {
    Deliver { src: NodeId, dst: NodeId, msg: Msg },
    Fire(Timer),
}

/// A pre-walked relay pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RelayPair {
    pub first: NodeId,
    pub second: NodeId,
    pub born: u64,
}

/// What an in-flight direct request is for.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Pending {
    Stab { dir: Direction, target: NodeId },
    LookupHop { lookup: TaskId, target: NodeId },
    JoinFetch { target: NodeId },
    /// First hop of a random walk (queried directly).
    WalkFirst { walk: TaskId, target: NodeId },
    /// Degenerate single-hop walk: the seed is handed over directly.
    SeedDirect { walk: TaskId, target: NodeId },
    PredListFetch { task: TaskId, target: NodeId },
    AgeFetch { task: TaskId, target: NodeId },
    /// Exit relay performing the innermost request of a flow.
    ExitQuery { flow: FlowId, back_leg: u8 },
    /// Walk conductor performing a phase-two hop (queried directly).
    ConductHop { conduct: TaskId, target: NodeId },
    WitnessJob { asker: NodeId, flow: FlowId, leg: u8, target: NodeId },
    /// Asker-side bookkeeping while a witness works a leg for us.
    WitnessWait { flow: FlowId, leg: u8 },
}

/// Why an onion flow exists, tracked at its initiator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FlowPurpose {
    WalkHop { walk: TaskId, hop_idx: usize },
    WalkSeed { walk: TaskId },
    /// A phase-two walk hop issued by the conducting node.
    ConductHop { conduct: TaskId, hop_idx: usize },
    LookupQuery { lookup: TaskId, hop_idx: usize },
    Dummy { lookup: TaskId },
    CheckProbe { task: TaskId },
}

#[derive(Clone, Debug)]
pub struct FlowOrigin {
    pub purpose: FlowPurpose,
    pub relays: Vec<NodeId>,
    pub target: NodeId,
    pub opened: u64,
}

/// Per-relay routing state for a flow.
#[derive(Clone, Debug)]
pub struct FlowRelay {
    pub prev: NodeId,
    pub delay_max_ms: u64,
    /// Forward leg this relay was reached on (reply legs derive from it).
    pub my_leg: u8,
    pub class: BandClass,
}

/// Evidence a forwarder holds for one leg it was responsible for.
#[derive(Clone, Debug, Default)]
pub struct LegEvidence {
    pub receipt: Option<SigTag>,
    pub statements: Vec<SigTag>,
    /// The payload we still owe the next hop, kept until receipted.
    pub payload: Option<(NodeId, Msg)>,
    pub witnesses_asked: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LookupPurpose {
    User,
    FingerUpdate { slot: usize },
    Bootstrap,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LookupStatus {
    Running,
    Succeeded,
    Biased,
    Failed,
}

#[derive(Clone, Debug)]
pub struct LookupState {
    pub id: TaskId,
    pub purpose: LookupPurpose,
    pub v: RingPoint,
    pub started: u64,
    pub queried: Vec<NodeId>,
    /// Candidates from the most recent reply (own table at the start).
    pub entries: Vec<NodeId>,
    pub last_node: NodeId,
    pub last_succs: Vec<NodeId>,
    pub retried: bool,
    pub avoided: BTreeSet<NodeId>,
    /// Anonymous transport state: entry/middle relays and exit pairs already
    /// used by this lookup (exit pairs are never reused within a lookup).
    pub entry_pair: Option<RelayPair>,
    pub used_exits: Vec<RelayPair>,
    pub dummies_left: usize,
    pub awaiting: Option<NodeId>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum WalkPhase {
    One,
    Two,
}

#[derive(Clone, Debug)]
pub struct WalkState {
    pub id: TaskId,
    pub hops: Vec<NodeId>,
    pub tables: Vec<SignedTable>,
    pub phase: WalkPhase,
    pub seed: u64,
    pub retries: usize,
    pub len: usize,
    pub excluded: BTreeSet<NodeId>,
}

/// Phase-two conduction state held by the hand-off node.
#[derive(Clone, Debug)]
pub struct ConductState {
    pub id: TaskId,
    /// Where the result bundle goes (the exit relay that delivered the
    /// seed), and under which request id.
    pub reply_to: NodeId,
    pub req: ReqId,
    pub seed: u64,
    pub total: usize,
    pub hops: Vec<NodeId>,
    pub collected: Vec<SignedTable>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckKind {
    Neighbor,
    FingerSurveil,
    FingerUpdate,
}

#[derive(Clone, Debug)]
pub struct CheckState {
    pub id: TaskId,
    pub kind: CheckKind,
    pub started: u64,
    /// Neighbor check: the predecessor under test. Finger checks: the
    /// candidate finger under test.
    pub target: NodeId,
    /// Finger checks: owner of the table the candidate came from.
    pub source: Option<NodeId>,
    pub slot: usize,
    pub ideal: RingPoint,
    pub pred_list: Option<SignedNeighbors>,
    pub probed: Option<NodeId>,
    pub probe_reply: Option<SignedTable>,
    pub witness_node: Option<NodeId>,
    /// Finger update only: which lookup produced the candidate.
    pub from_lookup: Option<TaskId>,
}

/// Everything one node keeps.
#[derive(Clone, Debug)]
pub struct Node {
    pub id: NodeId,
    pub slot: usize,
    pub malicious: bool,
    pub joined_at: u64,
    pub fingers: Vec<FingerSlot>,
    pub next_refresh_slot: usize,
    pub succs: Vec<NodeId>,
    pub preds: Vec<NodeId>,
    /// Provisional next stabilization targets (set by incoming requests
    /// acting as notifies); the official lists change only via proofs.
    pub stab_target_succ: Option<NodeId>,
    pub stab_target_pred: Option<NodeId>,
    pub succ_proofs: VecDeque<SignedNeighbors>,
    pub pred_proofs: VecDeque<SignedNeighbors>,
    pub kept: VecDeque<SignedTable>,
    pub pool: VecDeque<RelayPair>,
    pub pool_rot: usize,
    pub pending: HashMap<ReqId, Pending>,
    pub flows_out: HashMap<FlowId, FlowOrigin>,
    pub flows_relay: HashMap<FlowId, FlowRelay>,
    pub lookups: HashMap<TaskId, LookupState>,
    pub walks: HashMap<TaskId, WalkState>,
    pub conducting: HashMap<TaskId, ConductState>,
    pub checks: HashMap<TaskId, CheckState>,
    /// Finger checks: the kept table the candidate came from.
    pub check_sources: HashMap<TaskId, SignedTable>,
    /// Simulation-side note of checks that saw a manipulated artifact.
    pub check_manip: BTreeSet<TaskId>,
    pub leg_evidence: BTreeMap<(FlowId, u8), LegEvidence>,
    pub seen_legs: BTreeSet<(FlowId, u8)>,
    /// Active witness duties: (flow, leg) -> (job req, asker, delivery target).
    pub witness_jobs: BTreeMap<(FlowId, u8), (ReqId, NodeId, NodeId)>,
    pub walk_inflight: usize,
}

impl Node {
    pub fn new(id: NodeId, slot: usize, malicious: bool, joined_at: u64, fingers: usize) -> Self {
        Node {
            id,
            slot,
            malicious,
            joined_at,
            fingers: Vec::with_capacity(fingers),
            next_refresh_slot: 0,
            succs: Vec::new(),
            preds: Vec::new(),
            stab_target_succ: None,
            stab_target_pred: None,
            succ_proofs: VecDeque::new(),
            pred_proofs: VecDeque::new(),
            kept: VecDeque::new(),
            pool: VecDeque::new(),
            pool_rot: 0,
            pending: HashMap::new(),
            flows_out: HashMap::new(),
            flows_relay: HashMap::new(),
            lookups: HashMap::new(),
            walks: HashMap::new(),
            conducting: HashMap::new(),
            checks: HashMap::new(),
            check_sources: HashMap::new(),
            check_manip: BTreeSet::new(),
            leg_evidence: BTreeMap::new(),
            seen_legs: BTreeSet::new(),
            witness_jobs: BTreeMap::new(),
            walk_inflight: 0,
        }
    }

    pub fn neighbor_list(&self, dir: Direction) -> &Vec<NodeId> {
        match dir {
            Direction::Succ => &self.succs,
            Direction::Pred => &self.preds,
        }
    }

    pub fn proofs(&self, dir: Direction) -> &VecDeque<SignedNeighbors> {
        match dir {
            Direction::Succ => &self.succ_proofs,
            Direction::Pred => &self.pred_proofs,
        }
    }
}

/// Adversary shared knowledge: membership plus zero-delay coordination.
#[derive(Clone, Debug, Default)]
pub struct SharedIntel {
    /// Alive colluders, sorted by id, for nearest-colluder substitution.
    pub colluders: Vec<u64>,
    /// Flows whose first relay is a colluder (eligible for selective drop
    /// exemption: fully compromisable paths are left alone).
    pub flows_mal_entry: BTreeSet<FlowId>,
}

impl SharedIntel {
    pub fn insert(&mut self, n: NodeId) {
        if let Err(pos) = self.colluders.binary_search(&n.0) {
            self.colluders.insert(pos, n.0);
        }
    }

    pub fn remove(&mut self, n: NodeId) {
        if let Ok(pos) = self.colluders.binary_search(&n.0) {
            self.colluders.remove(pos);
        }
    }

    /// Clockwise-nearest colluder at or after `v`, skipping `exclude`.
    pub fn nearest_colluder(
        &self,
        ring: &Ring,
        v: RingPoint,
        exclude: &BTreeSet<NodeId>,
    ) -> Option<NodeId> {
        if self.colluders.is_empty() {
            return None;
        }
        let start = match self.colluders.binary_search(&v.0) {
            Ok(p) | Err(p) => p,
        };
        let _ = ring;
        for k in 0..self.colluders.len() {
            let idx = (start + k) % self.colluders.len();
            let cand = NodeId(self.colluders[idx]);
            if !exclude.contains(&cand) {
                return Some(cand);
            }
        }
        None
    }

    /// Counter-clockwise nearest colluder strictly before `v`.
    pub fn nearest_colluder_ccw(
        &self,
        v: RingPoint,
        exclude: &BTreeSet<NodeId>,
    ) -> Option<NodeId> {
        if self.colluders.is_empty() {
            return None;
        }
        let start = match self.colluders.binary_search(&v.0) {
            Ok(p) | Err(p) => p,
        };
        let n = self.colluders.len();
        for k in 1..=n {
            let idx = (start + n - (k % n)) % n;
            let cand = NodeId(self.colluders[idx]);
            if cand.0 == v.0 {
                continue;
            }
            if !exclude.contains(&cand) {
                return Some(cand);
            }
        }
        None
    }
}

/// Named random streams; each subsystem owns one.
pub struct RngSet {
    pub churn: ChaCha8Rng,
    pub malice: ChaCha8Rng,
    pub sched: ChaCha8Rng,
    pub jitter: ChaCha8Rng,
    pub adversary: ChaCha8Rng,
    pub walks: ChaCha8Rng,
    pub dummies: ChaCha8Rng,
    pub lookups: ChaCha8Rng,
    pub checks: ChaCha8Rng,
    pub pool: ChaCha8Rng,
    pub topology: ChaCha8Rng,
    /// Middle-relay mixing delays.
    pub mix: ChaCha8Rng,
}

impl RngSet {
    pub fn new(seed: u64) -> Self {
        RngSet {
            churn: stream(seed, "churn"),
            malice: stream(seed, "malice"),
            sched: stream(seed, "sched"),
            jitter: stream(seed, "jitter"),
            adversary: stream(seed, "adversary"),
            walks: stream(seed, "walks"),
            dummies: stream(seed, "dummies"),
            lookups: stream(seed, "lookups"),
            checks: stream(seed, "checks"),
            pool: stream(seed, "pool"),
            topology: stream(seed, "topology"),
            mix: stream(seed, "mix"),
        }
    }
}

pub struct World {
    pub cfg: Scenario,
    pub ring: Ring,
    pub queue: EventQueue<Ev>,
    pub nodes: BTreeMap<NodeId, Node>,
    pub alive: IdSet,
    pub latency: LatencyModel,
    pub rng: RngSet,
    pub intel: SharedIntel,
    pub ca: CertAuthority,
    pub metrics: Metrics,
    pub next_req: ReqId,
    pub next_flow: FlowId,
    pub next_task: TaskId,
    /// Simulation-side note of which replies were manipulated, keyed by
    /// req/flow token; consumed by accuracy accounting.
    pub manip_note: HashMap<u64, bool>,
    used_ids: std::collections::HashSet<u64>,
    free_slots: Vec<usize>,
    next_slot: usize,
}

impl World {
    pub fn new(cfg: Scenario) -> Self {
        let ring = Ring::new(cfg.ring_bits);
        let latency = cfg.build_latency().expect("latency model");
        let seed = cfg.seed;
        let mut w = World {
            ring,
            queue: EventQueue::new(),
            nodes: BTreeMap::new(),
            alive: IdSet::new(),
            latency,
            rng: RngSet::new(seed),
            intel: SharedIntel::default(),
            ca: CertAuthority::new(),
            metrics: Metrics::new(),
            next_req: 1,
            next_flow: 1,
            next_task: 1,
            manip_note: HashMap::new(),
            used_ids: std::collections::HashSet::new(),
            free_slots: Vec::new(),
            next_slot: 0,
            cfg,
        };
        w.setup();
        w
    }

    pub fn now(&self) -> u64 {
        self.queue.now()
    }

    pub fn walk_len(&self) -> usize {
        self.cfg.walk_len()
    }

    pub fn fresh_req(&mut self) -> ReqId {
        let r = self.next_req;
        self.next_req += 1;
        r
    }

    pub fn fresh_flow(&mut self) -> FlowId {
        let f = self.next_flow;
        self.next_flow += 1;
        f
    }

    pub fn fresh_task(&mut self) -> TaskId {
        let t = self.next_task;
        self.next_task += 1;
        t
    }

    pub fn is_alive(&self, n: NodeId) -> bool {
        self.nodes.contains_key(&n)
    }

    pub fn is_malicious(&self, n: NodeId) -> bool {
        self.nodes.get(&n).map(|x| x.malicious).unwrap_or(false)
    }

    fn fresh_id(&mut self) -> NodeId {
        loop {
            let id = self.rng.churn.gen_range(0..self.ring.size());
            if self.used_ids.insert(id) {
                return NodeId(id);
            }
        }
    }

    fn take_slot(&mut self) -> usize {
        if let Some(s) = self.free_slots.pop() {
            return s;
        }
        let s = self.next_slot;
        self.next_slot += 1;
        if let Some(cap) = self.latency.capacity() {
            assert!(s < cap, "latency matrix too small for network size");
        }
        s
    }

    /// One-way delivery delay for a message sent now.
    fn delivery_delay(&mut self, src: NodeId, dst: NodeId) -> u64 {
        let (su, sv) = (
            self.nodes.get(&src).map(|n| n.slot),
            self.nodes.get(&dst).map(|n| n.slot),
        );
        let (su, sv) = match (su, sv) {
            (Some(a), Some(b)) => (a, b),
            // Either endpoint already gone: charge a nominal delay; the
            // delivery will be dropped at fire time anyway.
            _ => return 50,
        };
        let base = self.latency.base(su, sv).max(1);
        let jit = if self.cfg.jitter {
            let w = jitter_window(base);
            if w > 0 {
                self.rng.jitter.gen_range(0..=w)
            } else {
                0
            }
        } else {
            0
        };
        base + jit
    }

    /// Queue a message for delivery. Dead destinations drop silently at
    /// fire time; senders pair requests with timeout timers.
    pub fn send(&mut self, src: NodeId, dst: NodeId, msg: Msg, class: BandClass) {
        let delay = self.delivery_delay(src, dst);
        self.send_delayed(src, dst, msg, class, delay)
    }

    pub fn send_delayed(&mut self, src: NodeId, dst: NodeId, msg: Msg, class: BandClass, delay: u64) {
        let bytes = msg.bytes();
        self.metrics.ledger.count(src, dst, class, bytes);
        let at = self.now() + delay;
        self.queue
            .schedule(at, Ev::Deliver { src, dst, msg })
            .expect("send in the past");
    }

    pub fn set_timer(&mut self, at: u64, t: Timer) {
        self.queue.schedule(at, Ev::Fire(t)).expect("timer in the past");
    }

    /// Run until virtual time `t_end` (ms); returns total events processed.
    pub fn run_until(&mut self, t_end: u64) -> u64 {
        while let Some((_, ev)) = self.queue.pop_due(t_end) {
            self.dispatch(ev);
        }
        self.queue.finish_until(t_end);
        self.queue.processed()
    }

    pub fn run_minutes(&mut self, minutes: f64) -> u64 {
        let t = self.now() + (minutes * 60_000.0).round() as u64;
        self.run_until(t)
    }

    fn dispatch(&mut self, ev: Ev) {
        match ev {
            Ev::Deliver { src, dst, msg } => {
                if !self.is_alive(dst) {
                    return; // silent drop; sender timeout path takes over
                }
                self.metrics.ledger.count_recv(dst, msg.bytes());
                self.handle_msg(src, dst, msg);
            }
            Ev::Fire(t) => self.handle_timer(t),
        }
    }

    fn handle_msg(&mut self, src: NodeId, dst: NodeId, msg: Msg) {
        match msg {
            Msg::StabReq { req, dir } => self.on_stab_req(src, dst, req, dir),
            Msg::StabRep { req, signed } => self.on_stab_rep(src, dst, req, signed),
            Msg::TableReq { req, scope, receipt } => {
                self.on_table_req(src, dst, req, scope, receipt)
            }
            Msg::TableRep { req, table } => self.on_table_rep(src, dst, req, table),
            Msg::PredListReq { req } => self.on_pred_list_req(src, dst, req),
            Msg::PredListRep { req, signed } => self.on_pred_list_rep(src, dst, req, signed),
            Msg::AgeReq { req } => self.on_age_req(src, dst, req),
            Msg::AgeRep { req, proof } => self.on_age_rep(src, dst, req, proof),
            Msg::OnionFwd { flow, leg, class, pkt } => {
                self.on_onion_fwd(src, dst, flow, leg, class, pkt)
            }
            Msg::OnionBack { flow, leg, class, reply } => {
                self.on_onion_back(src, dst, flow, leg, class, reply)
            }
            Msg::Receipt { flow, leg, sig } => self.on_receipt(src, dst, flow, leg, sig),
            Msg::WalkSeedReq { req, seed, hops, receipt } => {
                self.on_walk_seed_req(src, dst, req, seed, hops, receipt)
            }
            Msg::WalkSeedDone { req, tables } => self.on_walk_seed_done(src, dst, req, tables),
            Msg::WitnessAsk {
                req,
                deliver_to,
                payload,
            } => self.on_witness_ask(src, dst, req, deliver_to, *payload),
            Msg::WitnessTell {
                req,
                receipt,
                statement,
            } => self.on_witness_tell(src, dst, req, receipt, statement),
        }
    }

    fn handle_timer(&mut self, t: Timer) {
        match t {
            Timer::StabTick { node, dir } => self.on_stab_tick(node, dir),
            Timer::FingerTick { node } => self.on_finger_tick(node),
            Timer::NeighborCheckTick { node } => self.on_neighbor_check_tick(node),
            Timer::FingerCheckTick { node } => self.on_finger_check_tick(node),
            Timer::CheckProbeDelay { node, task } => self.on_check_probe_delay(node, task),
            Timer::LookupTick { node } => self.on_lookup_tick(node),
            Timer::DummyFire { node, lookup } => self.on_dummy_fire(node, lookup),
            Timer::PoolTick { node } => self.on_pool_tick(node),
            Timer::ReqTimeout { node, req } => self.on_req_timeout(node, req),
            Timer::FlowDeadline { node, flow } => self.on_flow_deadline(node, flow),
            Timer::ReceiptDeadline { node, flow, leg } => self.on_receipt_deadline(node, flow, leg),
            Timer::AnonRetry { node, lookup, target } => {
                self.anon_retry(node, lookup, target)
            }
            Timer::Death { node } => self.on_death(node),
            Timer::Join { malicious, slot } => self.on_join(malicious, slot),
            Timer::MetricsTick => self.on_metrics_tick(),
        }
    }

    // ------------------------------------------------------------------
    // Setup: a converged network at t = 0.
    // ------------------------------------------------------------------

    fn setup(&mut self) {
        let n = self.cfg.n;
        let mut ids = Vec::with_capacity(n);
        for _ in 0..n {
            loop {
                let id = self.rng.topology.gen_range(0..self.ring.size());
                if self.used_ids.insert(id) {
                    ids.push(NodeId(id));
                    break;
                }
            }
        }
        ids.sort_unstable();
        self.alive = IdSet::from_ids(ids.iter().map(|x| x.0).collect());

        // Malicious set: fixed at scenario start.
        let want_mal = (self.cfg.fraction_malicious * n as f64).floor() as usize;
        let mut ranks: Vec<usize> = (0..n).collect();
        use rand::seq::SliceRandom;
        ranks.shuffle(&mut self.rng.malice);
        let mal: BTreeSet<usize> = ranks[..want_mal].iter().copied().collect();
        self.metrics.initial_malicious = want_mal;

        for (rank, &id) in ids.iter().enumerate() {
            let slot = self.take_slot();
            let malicious = mal.contains(&rank);
            let mut node = Node::new(id, slot, malicious, 0, self.cfg.fingers);
            if malicious {
                self.intel.insert(id);
            }
            // Converged routing state straight from ground truth.
            node.succs = self.truth_succ_list(id);
            node.preds = self.truth_pred_list(id);
            node.stab_target_succ = node.succs.first().copied();
            node.stab_target_pred = node.preds.first().copied();
            node.fingers = (1..=self.cfg.fingers)
                .map(|k| {
                    let ideal = self.slot_ideal(id, k);
                    FingerSlot {
                        ideal,
                        node: Some(self.alive.owner(ideal).unwrap()),
                    }
                })
                .collect();
            self.nodes.insert(id, node);
        }

        // Pre-seed proof queues: the converged state includes the signed
        // stabilization replies that would have produced it.
        let snapshot: Vec<NodeId> = ids.clone();
        for &id in &snapshot {
            let succ_proof = self.build_stab_reply(self.truth_first(id, Direction::Succ), Direction::Succ);
            let pred_proof = self.build_stab_reply(self.truth_first(id, Direction::Pred), Direction::Pred);
            let node = self.nodes.get_mut(&id).unwrap();
            node.succ_proofs.push_back(succ_proof);
            node.pred_proofs.push_back(pred_proof);
        }

        // Timers with randomized phases.
        for &id in &snapshot {
            self.schedule_maintenance(id, true);
        }
        // Churn lifetimes.
        if self.cfg.churn.enabled() {
            for &id in &snapshot {
                let life = self.cfg.churn.lifetime_ms(&mut self.rng.churn).unwrap();
                self.set_timer(life, Timer::Death { node: id });
            }
        }
        self.set_timer(self.cfg.metrics_interval_ms, Timer::MetricsTick);
        self.metrics.snapshot_now(0, &self.snapshot_counts());
    }

    /// Ground-truth neighbor list, used at setup and by oracles.
    pub fn truth_succ_list(&self, n: NodeId) -> Vec<NodeId> {
        (1..=self.cfg.neighbors.min(self.alive.len().saturating_sub(1)))
            .map(|k| self.alive.succ_k(n, k))
            .collect()
    }

    pub fn truth_pred_list(&self, n: NodeId) -> Vec<NodeId> {
        (1..=self.cfg.neighbors.min(self.alive.len().saturating_sub(1)))
            .map(|k| self.alive.pred_k(n, k))
            .collect()
    }

    fn truth_first(&self, n: NodeId, dir: Direction) -> NodeId {
        match dir {
            Direction::Succ => self.alive.succ_k(n, 1),
            Direction::Pred => self.alive.pred_k(n, 1),
        }
    }

    /// Ideal point of finger slot `k` (1-based): the top finger first, so
    /// slot k targets `owner + 2^(bits-k)`. Only the top slots are distinct
    /// at realistic scales; the successor list covers the last few ranks.
    pub fn slot_ideal(&self, owner: NodeId, k: usize) -> RingPoint {
        debug_assert!(k >= 1 && k <= self.cfg.fingers);
        self.ring.add(owner, 1u64 << (self.ring.bits() - k as u32))
    }

    pub fn schedule_maintenance(&mut self, id: NodeId, initial: bool) {
        let now = self.now();
        let cfg = &self.cfg;
        let stab = cfg.stabilize_ms;
        let phase = |rng: &mut ChaCha8Rng, max: u64| -> u64 { rng.gen_range(1..=max.max(1)) };
        let t1 = now + phase(&mut self.rng.sched, stab);
        self.set_timer(t1, Timer::StabTick { node: id, dir: Direction::Succ });
        let t2 = now + phase(&mut self.rng.sched, stab);
        self.set_timer(t2, Timer::StabTick { node: id, dir: Direction::Pred });
        let t3 = now + phase(&mut self.rng.sched, self.cfg.finger_update_ms);
        self.set_timer(t3, Timer::FingerTick { node: id });
        let t4 = now + phase(&mut self.rng.sched, self.cfg.check_max_ms);
        self.set_timer(t4, Timer::NeighborCheckTick { node: id });
        let t5 = now + phase(&mut self.rng.sched, self.cfg.check_max_ms);
        self.set_timer(t5, Timer::FingerCheckTick { node: id });
        let t6 = now + phase(&mut self.rng.sched, self.cfg.lookup_period_ms);
        self.set_timer(t6, Timer::LookupTick { node: id });
        // Pool fill starts quickly so relays are available for checks.
        let pool_phase = if initial {
            phase(&mut self.rng.sched, 5_000)
        } else {
            phase(&mut self.rng.sched, self.cfg.stabilize_ms)
        };
        self.set_timer(now + pool_phase, Timer::PoolTick { node: id });
    }

    // ------------------------------------------------------------------
    // Churn.
    // ------------------------------------------------------------------

    fn on_death(&mut self, id: NodeId) {
        let Some(node) = self.nodes.remove(&id) else {
            return; // already gone (convicted)
        };
        self.alive.remove(id);
        self.intel.remove(id);
        self.metrics.departures += 1;
        if self.cfg.churn.rejoin {
            self.set_timer(
                self.now() + 1,
                Timer::Join {
                    malicious: node.malicious,
                    slot: node.slot,
                },
            );
        } else {
            self.free_slots.push(node.slot);
        }
    }

    fn on_join(&mut self, malicious: bool, slot: usize) {
        if self.alive.is_empty() {
            return;
        }
        let id = self.fresh_id();
        let now = self.now();
        let mut node = Node::new(id, slot, malicious, now, self.cfg.fingers);
        node.fingers = (1..=self.cfg.fingers)
            .map(|k| FingerSlot {
                ideal: self.slot_ideal(id, k),
                node: None,
            })
            .collect();
        self.nodes.insert(id, node);
        self.alive.insert(id);
        if malicious {
            self.intel.insert(id);
        }
        self.metrics.arrivals += 1;
        if self.cfg.churn.enabled() {
            let life = self.cfg.churn.lifetime_ms(&mut self.rng.churn).unwrap();
            self.set_timer(now + life, Timer::Death { node: id });
        }
        // Bootstrap: look up our own id through a random introducer.
        let introducer = {
            let k = self.rng.churn.gen_range(0..self.alive.len());
            self.alive.by_rank(k)
        };
        self.start_bootstrap(id, introducer);
        self.schedule_maintenance(id, false);
    }

    fn snapshot_counts(&self) -> crate::sentinel::Counts {
        let alive_mal = self.nodes.values().filter(|n| n.malicious).count();
        crate::sentinel::Counts {
            alive: self.nodes.len(),
            alive_malicious: alive_mal,
        }
    }

    fn on_metrics_tick(&mut self) {
        let now = self.now();
        let counts = self.snapshot_counts();
        self.metrics.snapshot_now(now, &counts);
        // Old flow tokens are useless to the collusion; keep the set small.
        let cutoff = self.next_flow.saturating_sub(200_000);
        self.intel.flows_mal_entry = self
            .intel
            .flows_mal_entry
            .iter()
            .copied()
            .filter(|&f| f >= cutoff)
            .collect();
        self.set_timer(now + self.cfg.metrics_interval_ms, Timer::MetricsTick);
    }

    /// Convict and remove a node: certificate revoked, entity gone for good.
    pub fn revoke_and_remove(&mut self, id: NodeId) {
        self.ca.revoked.insert(id);
        if let Some(node) = self.nodes.remove(&id) {
            self.alive.remove(id);
            self.intel.remove(id);
            self.free_slots.push(node.slot);
        }
    }
}

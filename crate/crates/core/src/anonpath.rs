//! Anonymous transport: two-phase random-walk relay selection, the relay
//! pool, onion flows with per-hop receipts, multi-path query dispatch, and
//! dummy queries.
//!
//! Onion contract: a relay that unwraps a layer learns exactly its previous
//! and next hop; the exit relay additionally learns the query target. The
//! layering is structural (each layer holds only the next hop and an opaque
//! inner packet), so the contract cannot be violated by reading the types.

use crate::ring::{NodeId, RingPoint};
use crate::sig::{sign, SignedTable};
use crate::world::{
    BandClass, ConductState, FlowId, FlowOrigin, FlowPurpose, FlowRelay, InnerReq, LegEvidence,
    Msg, OnionPkt, OnionReply, Pending, RelayPair, ReqId, TableScope, TaskId,
    Timer, WalkPhase, WalkState, World,
};
use rand::Rng;
use sha2::{Digest, Sha256};

/// Seed-determined finger index for phase-two hop `j` (1-based): hash the
/// seed `j` times and reduce modulo the slot count, probing forward past
/// empty slots. Verifiable by anyone holding the same signed table.
pub fn seed_pick(seed: u64, j: usize, fingers: &[crate::sig::FingerSlot]) -> Option<NodeId> {
    if fingers.is_empty() {
        return None;
    }
    let mut h: [u8; 32] = Sha256::digest(seed.to_le_bytes()).into();
    for _ in 1..j {
        h = Sha256::digest(h).into();
    }
    let raw = u64::from_le_bytes(h[..8].try_into().unwrap()) as usize;
    let f = fingers.len();
    for probe in 0..f {
        if let Some(n) = fingers[(raw + probe) % f].node {
            return Some(n);
        }
    }
    None
}

fn receipt_payload(flow: FlowId, leg: u8) -> [u8; 9] {
    let mut b = [0u8; 9];
    b[..8].copy_from_slice(&flow.to_le_bytes());
    b[8] = leg;
    b
}

/// Extract the receipt key a witness needs from a redeliverable payload.
fn payload_leg_key(msg: &Msg) -> Option<(FlowId, u8)> {
    match msg {
        Msg::OnionFwd { flow, leg, .. } | Msg::OnionBack { flow, leg, .. } => Some((*flow, *leg)),
        Msg::TableReq { receipt, .. } | Msg::WalkSeedReq { receipt, .. } => *receipt,
        _ => None,
    }
}

impl World {
    // ------------------------------------------------------------------
    // Relay pool.
    // ------------------------------------------------------------------

    pub(crate) fn on_pool_tick(&mut self, id: NodeId) {
        let now = self.now();
        let refresh = self.cfg.pool_refresh_ms;
        let target = self.cfg.pool_target;
        let want_walk = {
            let Some(node) = self.nodes.get_mut(&id) else { return };
            // Retire pairs past the refresh age.
            while node
                .pool
                .front()
                .map(|p| p.born + refresh < now)
                .unwrap_or(false)
            {
                node.pool.pop_front();
            }
            node.pool.len() + node.walk_inflight < target && node.walk_inflight < 2
        };
        if want_walk {
            self.start_walk(id);
        }
        self.set_timer(now + 5_000, Timer::PoolTick { node: id });
    }

    /// Rotate through the pool for a pair not in `exclude`. Pairs are reused
    /// across tasks over time but never within one lookup.
    pub(crate) fn take_unused_pair(&mut self, id: NodeId, exclude: &[RelayPair]) -> Option<RelayPair> {
        let node = self.nodes.get_mut(&id)?;
        let n = node.pool.len();
        if n == 0 {
            return None;
        }
        for k in 0..n {
            let idx = (node.pool_rot + k) % n;
            let cand = node.pool[idx];
            if cand.first == id || cand.second == id {
                continue;
            }
            let clash = exclude
                .iter()
                .any(|p| p.first == cand.first || p.second == cand.second || p.first == cand.second || p.second == cand.first);
            if !clash {
                node.pool_rot = (idx + 1) % n;
                return Some(cand);
            }
        }
        None
    }

    // ------------------------------------------------------------------
    // Random walks: phase one (initiator-driven).
    // ------------------------------------------------------------------

    pub(crate) fn start_walk(&mut self, id: NodeId) {
        let walk = self.fresh_task();
        let len = self.walk_len();
        let first = {
            let Some(node) = self.nodes.get(&id) else { return };
            let slots: Vec<NodeId> = node
                .fingers
                .iter()
                .filter_map(|f| f.node)
                .filter(|&n| n != id)
                .collect();
            if slots.is_empty() {
                return;
            }
            slots[self.rng.walks.gen_range(0..slots.len())]
        };
        let node = self.nodes.get_mut(&id).unwrap();
        node.walk_inflight += 1;
        node.walks.insert(
            walk,
            WalkState {
                id: walk,
                hops: vec![first],
                tables: Vec::new(),
                phase: WalkPhase::One,
                seed: 0,
                retries: 0,
                len,
                excluded: Default::default(),
            },
        );
        self.walk_issue_hop(id, walk);
    }

    /// Query the newest hop for its fingertable: directly for the first hop,
    /// through the established prefix for later ones.
    fn walk_issue_hop(&mut self, id: NodeId, walk: TaskId) {
        let (target, relays) = {
            let Some(node) = self.nodes.get(&id) else { return };
            let Some(st) = node.walks.get(&walk) else { return };
            let j = st.hops.len();
            (st.hops[j - 1], st.hops[..j - 1].to_vec())
        };
        if relays.is_empty() {
            let req = self.fresh_req();
            self.nodes
                .get_mut(&id)
                .unwrap()
                .pending
                .insert(req, Pending::WalkFirst { walk, target });
            self.send(
                id,
                target,
                Msg::TableReq {
                    req,
                    scope: TableScope::FingersOnly,
                    receipt: None,
                },
                BandClass::Walk,
            );
            let deadline = self.now() + self.cfg.request_timeout_ms;
            self.set_timer(deadline, Timer::ReqTimeout { node: id, req });
        } else {
            let hop_idx = relays.len();
            self.open_flow(
                id,
                relays,
                target,
                InnerReq::Table {
                    target,
                    scope: TableScope::FingersOnly,
                },
                FlowPurpose::WalkHop { walk, hop_idx },
                BandClass::Walk,
                self.cfg.query_deadline_ms,
                None,
            );
        }
    }

    pub(crate) fn walk_got_table(&mut self, id: NodeId, walk: TaskId, table: SignedTable) {
        let expected = {
            let Some(node) = self.nodes.get(&id) else { return };
            let Some(st) = node.walks.get(&walk) else { return };
            *st.hops.last().unwrap()
        };
        if !table.verifies() || table.table.owner != expected {
            self.walk_phase1_failed(id, walk);
            return;
        }
        self.keep_table(id, table.clone());
        enum Next {
            Hop,
            Seed,
            Dead,
        }
        let next = {
            let node = self.nodes.get_mut(&id).unwrap();
            let st = node.walks.get_mut(&walk).unwrap();
            st.tables.push(table);
            if st.hops.len() == st.len {
                Next::Seed
            } else {
                let last = st.tables.last().unwrap();
                let slots: Vec<NodeId> = last
                    .table
                    .fingers
                    .iter()
                    .filter_map(|f| f.node)
                    .filter(|&n| n != id)
                    .collect();
                if slots.is_empty() {
                    Next::Dead
                } else {
                    let pick = slots[self.rng.walks.gen_range(0..slots.len())];
                    st.hops.push(pick);
                    let _ = pick;
                    Next::Hop
                }
            }
        };
        match next {
            Next::Hop => self.walk_issue_hop(id, walk),
            Next::Seed => self.walk_send_seed(id, walk),
            Next::Dead => self.walk_phase1_failed(id, walk),
        }
    }

    pub(crate) fn walk_phase1_failed(&mut self, id: NodeId, walk: TaskId) {
        let restart = {
            let Some(node) = self.nodes.get_mut(&id) else { return };
            let Some(st) = node.walks.get_mut(&walk) else { return };
            st.retries += 1;
            if st.retries > 3 {
                node.walks.remove(&walk);
                node.walk_inflight = node.walk_inflight.saturating_sub(1);
                false
            } else {
                st.hops.clear();
                st.tables.clear();
                st.phase = WalkPhase::One;
                true
            }
        };
        if restart {
            // Fresh first pick, same walk id.
            let first = {
                let node = &self.nodes[&id];
                let slots: Vec<NodeId> = node
                    .fingers
                    .iter()
                    .filter_map(|f| f.node)
                    .filter(|&n| n != id)
                    .collect();
                if slots.is_empty() {
                    None
                } else {
                    Some(slots[self.rng.walks.gen_range(0..slots.len())])
                }
            };
            match first {
                Some(f) => {
                    let node = self.nodes.get_mut(&id).unwrap();
                    let st = node.walks.get_mut(&walk).unwrap();
                    st.hops.push(f);
                    self.walk_issue_hop(id, walk);
                }
                None => {
                    let node = self.nodes.get_mut(&id).unwrap();
                    node.walks.remove(&walk);
                    node.walk_inflight = node.walk_inflight.saturating_sub(1);
                }
            }
        }
    }

    // ------------------------------------------------------------------
    // Random walks: phase two (seed hand-off and verification).
    // ------------------------------------------------------------------

    fn walk_send_seed(&mut self, id: NodeId, walk: TaskId) {
        let seed = self.rng.walks.gen::<u64>();
        let (target, relays, len) = {
            let node = self.nodes.get_mut(&id).unwrap();
            let st = node.walks.get_mut(&walk).unwrap();
            st.phase = WalkPhase::Two;
            st.seed = seed;
            let l = st.hops.len();
            (st.hops[l - 1], st.hops[..l - 1].to_vec(), st.len)
        };
        if relays.is_empty() {
            // Degenerate single-hop phase: hand the seed over directly.
            let req = self.fresh_req();
            self.nodes
                .get_mut(&id)
                .unwrap()
                .pending
                .insert(req, Pending::SeedDirect { walk, target });
            self.send(
                id,
                target,
                Msg::WalkSeedReq {
                    req,
                    seed,
                    hops: len,
                    receipt: None,
                },
                BandClass::Walk,
            );
            let deadline = self.now() + 2 * self.cfg.query_deadline_ms;
            self.set_timer(deadline, Timer::ReqTimeout { node: id, req });
        } else {
            self.open_flow(
                id,
                relays,
                target,
                InnerReq::WalkSeed {
                    target,
                    seed,
                    hops: len,
                },
                FlowPurpose::WalkSeed { walk },
                BandClass::Walk,
                2 * self.cfg.query_deadline_ms + 2 * len as u64 * self.cfg.request_timeout_ms,
                None,
            );
        }
    }

    pub(crate) fn on_walk_seed_req(
        &mut self,
        src: NodeId,
        dst: NodeId,
        req: ReqId,
        seed: u64,
        hops: usize,
        receipt: Option<(FlowId, u8)>,
    ) {
        if let Some((flow, leg)) = receipt {
            self.issue_receipt(dst, src, flow, leg);
        }
        if hops == 0 || hops > 64 {
            return;
        }
        let conduct = self.fresh_task();
        let Some(node) = self.nodes.get_mut(&dst) else { return };
        node.conducting.insert(
            conduct,
            ConductState {
                id: conduct,
                reply_to: src,
                req,
                seed,
                total: hops,
                hops: Vec::new(),
                collected: Vec::new(),
            },
        );
        self.conduct_step(dst, conduct);
    }

    fn conduct_step(&mut self, id: NodeId, conduct: TaskId) {
        enum Act {
            Direct(NodeId),
            Onion { relays: Vec<NodeId>, target: NodeId, hop_idx: usize },
            Done { reply_to: NodeId, req: ReqId, tables: Vec<SignedTable> },
            Dead,
        }
        let act = {
            let Some(node) = self.nodes.get(&id) else { return };
            let Some(st) = node.conducting.get(&conduct) else { return };
            if st.collected.len() == st.total {
                Act::Done {
                    reply_to: st.reply_to,
                    req: st.req,
                    tables: st.collected.clone(),
                }
            } else {
                let j = st.collected.len() + 1;
                let pick = if j == 1 {
                    seed_pick(st.seed, j, &node.fingers)
                } else {
                    seed_pick(st.seed, j, &st.collected[j - 2].table.fingers)
                };
                match pick {
                    Some(p) if p != id => {
                        if j == 1 {
                            Act::Direct(p)
                        } else {
                            Act::Onion {
                                relays: st.hops[..j - 1].to_vec(),
                                target: p,
                                hop_idx: j - 1,
                            }
                        }
                    }
                    _ => Act::Dead,
                }
            }
        };
        match act {
            Act::Done { reply_to, req, tables } => {
                {
                    let node = self.nodes.get_mut(&id).unwrap();
                    node.conducting.remove(&conduct);
                }
                self.send(id, reply_to, Msg::WalkSeedDone { req, tables }, BandClass::Walk);
            }
            Act::Dead => {
                self.conduct_abandoned(id, conduct);
            }
            Act::Direct(p) => {
                {
                    let node = self.nodes.get_mut(&id).unwrap();
                    let st = node.conducting.get_mut(&conduct).unwrap();
                    st.hops.push(p);
                }
                let req = self.fresh_req();
                self.nodes
                    .get_mut(&id)
                    .unwrap()
                    .pending
                    .insert(req, Pending::ConductHop { conduct, target: p });
                self.send(
                    id,
                    p,
                    Msg::TableReq {
                        req,
                        scope: TableScope::FingersOnly,
                        receipt: None,
                    },
                    BandClass::Walk,
                );
                let deadline = self.now() + self.cfg.request_timeout_ms;
                self.set_timer(deadline, Timer::ReqTimeout { node: id, req });
            }
            Act::Onion { relays, target, hop_idx } => {
                {
                    let node = self.nodes.get_mut(&id).unwrap();
                    let st = node.conducting.get_mut(&conduct).unwrap();
                    st.hops.push(target);
                }
                self.open_flow(
                    id,
                    relays,
                    target,
                    InnerReq::Table {
                        target,
                        scope: TableScope::FingersOnly,
                    },
                    FlowPurpose::ConductHop { conduct, hop_idx },
                    BandClass::Walk,
                    self.cfg.query_deadline_ms,
                    None,
                );
            }
        }
    }

    pub(crate) fn conduct_got_table(&mut self, id: NodeId, conduct: TaskId, table: SignedTable) {
        let ok = {
            let Some(node) = self.nodes.get_mut(&id) else { return };
            let Some(st) = node.conducting.get_mut(&conduct) else { return };
            let expected = *st.hops.last().unwrap();
            if table.verifies() && table.table.owner == expected {
                st.collected.push(table.clone());
                true
            } else {
                false
            }
        };
        if ok {
            self.keep_table(id, table);
            self.conduct_step(id, conduct);
        } else {
            self.conduct_abandoned(id, conduct);
        }
    }

    /// A conduction that cannot proceed is dropped; the walk initiator's
    /// deadline drives the retry.
    pub(crate) fn conduct_abandoned(&mut self, id: NodeId, conduct: TaskId) {
        if let Some(node) = self.nodes.get_mut(&id) {
            node.conducting.remove(&conduct);
        }
    }

    pub(crate) fn on_walk_seed_done(
        &mut self,
        src: NodeId,
        dst: NodeId,
        req: ReqId,
        tables: Vec<SignedTable>,
    ) {
        let Some(node) = self.nodes.get_mut(&dst) else { return };
        let Some(pending) = node.pending.remove(&req) else { return };
        match pending {
            Pending::ExitQuery { flow, back_leg } => {
                self.backtrack_reply(dst, flow, back_leg, OnionReply::WalkResult(tables));
            }
            Pending::SeedDirect { walk, target } => {
                if src == target {
                    self.walk_phase2_result(dst, walk, tables);
                }
            }
            other => {
                self.nodes.get_mut(&dst).unwrap().pending.insert(req, other);
            }
        }
    }

    /// Verify a phase-two transcript against the seed derivation. Any
    /// deviation from the seed-determined indices is detected here.
    pub(crate) fn walk_phase2_result(&mut self, id: NodeId, walk: TaskId, tables: Vec<SignedTable>) {
        let verdict = {
            let Some(node) = self.nodes.get(&id) else { return };
            let Some(st) = node.walks.get(&walk) else { return };
            if st.phase != WalkPhase::Two || tables.len() != st.len {
                false
            } else {
                let mut ok = true;
                let mut prev = &st.tables[st.len - 1].table;
                for (j, t) in tables.iter().enumerate() {
                    if !t.verifies() {
                        ok = false;
                        break;
                    }
                    match seed_pick(st.seed, j + 1, &prev.fingers) {
                        Some(expect) if expect == t.table.owner => {}
                        _ => {
                            ok = false;
                            break;
                        }
                    }
                    prev = &t.table;
                }
                ok
            }
        };
        if verdict {
            let pair = {
                let node = self.nodes.get_mut(&id).unwrap();
                let st = node.walks.remove(&walk).unwrap();
                node.walk_inflight = node.walk_inflight.saturating_sub(1);
                let seq: Vec<NodeId> = st
                    .hops
                    .iter()
                    .copied()
                    .chain(tables.iter().map(|t| t.table.owner))
                    .collect();
                let n = seq.len();
                RelayPair {
                    first: seq[n - 2],
                    second: seq[n - 1],
                    born: self.queue.now(),
                }
            };
            if pair.first != pair.second && pair.first != id && pair.second != id {
                let node = self.nodes.get_mut(&id).unwrap();
                node.pool.push_back(pair);
                let cap = 2 * self.cfg.pool_target;
                while node.pool.len() > cap {
                    node.pool.pop_front();
                }
            }
        } else {
            self.walk_phase2_failed(id, walk);
        }
    }

    /// Restart phase two from a different node in the second-to-last hop's
    /// table (or restart outright for the degenerate single-hop phase).
    pub(crate) fn walk_phase2_failed(&mut self, id: NodeId, walk: TaskId) {
        let action = {
            let Some(node) = self.nodes.get_mut(&id) else { return };
            let Some(st) = node.walks.get_mut(&walk) else { return };
            st.retries += 1;
            if st.retries > 3 {
                node.walks.remove(&walk);
                node.walk_inflight = node.walk_inflight.saturating_sub(1);
                None
            } else if st.len == 1 {
                st.hops.clear();
                st.tables.clear();
                st.phase = WalkPhase::One;
                Some(true) // full restart
            } else {
                let old = st.hops[st.len - 1];
                st.excluded.insert(old);
                let prev_table = &st.tables[st.len - 2].table;
                let slots: Vec<NodeId> = prev_table
                    .fingers
                    .iter()
                    .filter_map(|f| f.node)
                    .filter(|&n| n != id && !st.excluded.contains(&n))
                    .collect();
                if slots.is_empty() {
                    st.hops.clear();
                    st.tables.clear();
                    st.phase = WalkPhase::One;
                    Some(true)
                } else {
                    let pick = slots[self.rng.walks.gen_range(0..slots.len())];
                    st.hops[st.len - 1] = pick;
                    st.tables.truncate(st.len - 1);
                    st.phase = WalkPhase::One;
                    Some(false) // re-issue the final hop query
                }
            }
        };
        match action {
            None => {}
            Some(true) => self.walk_phase1_failed(id, walk),
            Some(false) => self.walk_issue_hop(id, walk),
        }
    }

    // ------------------------------------------------------------------
    // Onion flows.
    // ------------------------------------------------------------------

    /// Open a flow through `relays` to query `target`. `mid_delay_idx`
    /// selects the relay that applies a random mixing delay in both
    /// directions.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn open_flow(
        &mut self,
        id: NodeId,
        relays: Vec<NodeId>,
        target: NodeId,
        inner: InnerReq,
        purpose: FlowPurpose,
        class: BandClass,
        deadline_ms: u64,
        mid_delay_idx: Option<usize>,
    ) -> Option<FlowId> {
        if relays.is_empty() {
            return None;
        }
        let flow = self.fresh_flow();
        let delay_for = |i: usize| -> u64 {
            if Some(i) == mid_delay_idx {
                self.cfg.relay_delay_max_ms
            } else {
                0
            }
        };
        let mut pkt = OnionPkt::Exit { req: inner };
        for i in (0..relays.len() - 1).rev() {
            pkt = OnionPkt::Relay {
                next: relays[i + 1],
                delay_max_ms: delay_for(i),
                inner: Box::new(pkt),
            };
        }
        // The exit's own layer is the packet itself when there is a single
        // relay; otherwise the loop above produced the first relay's view.
        let now = self.now();
        {
            let node = self.nodes.get_mut(&id)?;
            node.flows_out.insert(
                flow,
                FlowOrigin {
                    purpose,
                    relays: relays.clone(),
                    target,
                    opened: now,
                },
            );
        }
        let first = relays[0];
        let msg = Msg::OnionFwd {
            flow,
            leg: 0,
            class,
            pkt,
        };
        self.track_leg(id, flow, 0, first, &msg);
        self.send(id, first, msg, class);
        self.set_timer(now + deadline_ms, Timer::FlowDeadline { node: id, flow });
        Some(flow)
    }

    /// Record the forwarding obligation for a leg and arm its receipt
    /// deadline (when the receipt protocol is on).
    fn track_leg(&mut self, id: NodeId, flow: FlowId, leg: u8, to: NodeId, msg: &Msg) {
        if !self.cfg.dos_protection {
            return;
        }
        let Some(node) = self.nodes.get_mut(&id) else { return };
        node.leg_evidence.insert(
            (flow, leg),
            LegEvidence {
                receipt: None,
                statements: Vec::new(),
                payload: Some((to, msg.clone())),
                witnesses_asked: false,
            },
        );
        while node.leg_evidence.len() > 1024 {
            let k = *node.leg_evidence.keys().next().unwrap();
            node.leg_evidence.remove(&k);
        }
        let at = self.now() + self.cfg.request_timeout_ms;
        self.set_timer(at, Timer::ReceiptDeadline { node: id, flow, leg });
    }

    pub(crate) fn issue_receipt(&mut self, me: NodeId, to: NodeId, flow: FlowId, leg: u8) {
        if !self.cfg.dos_protection {
            return;
        }
        let sig = sign(me, self.now(), &receipt_payload(flow, leg));
        self.send(me, to, Msg::Receipt { flow, leg, sig }, BandClass::DosControl);
    }

    pub(crate) fn on_onion_fwd(
        &mut self,
        src: NodeId,
        dst: NodeId,
        flow: FlowId,
        leg: u8,
        class: BandClass,
        pkt: OnionPkt,
    ) {
        // Entry relays share flow observability with the collusion.
        if leg == 0 && self.is_malicious(dst) {
            self.intel.flows_mal_entry.insert(flow);
        }
        let dup = {
            let Some(node) = self.nodes.get(&dst) else { return };
            node.seen_legs.contains(&(flow, leg))
        };
        if dup {
            self.issue_receipt(dst, src, flow, leg);
            return;
        }
        // Selective droppers swallow the message and refuse the receipt.
        if self.selective_drop(dst, flow) {
            return;
        }
        {
            let node = self.nodes.get_mut(&dst).unwrap();
            node.seen_legs.insert((flow, leg));
            while node.seen_legs.len() > 8192 {
                let k = *node.seen_legs.iter().next().unwrap();
                node.seen_legs.remove(&k);
            }
        }
        self.issue_receipt(dst, src, flow, leg);
        match pkt {
            OnionPkt::Relay {
                next,
                delay_max_ms,
                inner,
            } => {
                {
                    let node = self.nodes.get_mut(&dst).unwrap();
                    node.flows_relay.insert(
                        flow,
                        FlowRelay {
                            prev: src,
                            delay_max_ms,
                            my_leg: leg,
                            class,
                        },
                    );
                    while node.flows_relay.len() > 4096 {
                        let k = *node.flows_relay.keys().next().unwrap();
                        node.flows_relay.remove(&k);
                    }
                }
                let mix = if delay_max_ms > 0 {
                    self.rng.mix.gen_range(0..=delay_max_ms)
                } else {
                    0
                };
                let msg = Msg::OnionFwd {
                    flow,
                    leg: leg + 1,
                    class,
                    pkt: *inner,
                };
                self.track_leg(dst, flow, leg + 1, next, &msg);
                let base = self.delivery_delay_pub(dst, next);
                self.send_delayed(dst, next, msg, class, base + mix);
            }
            OnionPkt::Exit { req } => {
                {
                    let node = self.nodes.get_mut(&dst).unwrap();
                    node.flows_relay.insert(
                        flow,
                        FlowRelay {
                            prev: src,
                            delay_max_ms: 0,
                            my_leg: leg,
                            class,
                        },
                    );
                }
                let exit_leg = leg + 1;
                let rid = self.fresh_req();
                self.nodes
                    .get_mut(&dst)
                    .unwrap()
                    .pending
                    .insert(rid, Pending::ExitQuery { flow, back_leg: 0x80 | leg });
                match req {
                    InnerReq::Table { target, scope } => {
                        let m = Msg::TableReq {
                            req: rid,
                            scope,
                            receipt: Some((flow, exit_leg)),
                        };
                        self.track_leg(dst, flow, exit_leg, target, &m);
                        self.send(dst, target, m, class);
                        let deadline = self.now() + self.cfg.request_timeout_ms;
                        self.set_timer(deadline, Timer::ReqTimeout { node: dst, req: rid });
                    }
                    InnerReq::WalkSeed { target, seed, hops } => {
                        let m = Msg::WalkSeedReq {
                            req: rid,
                            seed,
                            hops,
                            receipt: Some((flow, exit_leg)),
                        };
                        self.track_leg(dst, flow, exit_leg, target, &m);
                        self.send(dst, target, m, class);
                        let deadline = self.now()
                            + 2 * self.cfg.query_deadline_ms
                            + 2 * hops as u64 * self.cfg.request_timeout_ms;
                        self.set_timer(deadline, Timer::ReqTimeout { node: dst, req: rid });
                    }
                }
            }
        }
    }

    pub(crate) fn delivery_delay_pub(&mut self, src: NodeId, dst: NodeId) -> u64 {
        // Exposed for relays that add a mixing delay on top.
        let (su, sv) = (
            self.nodes.get(&src).map(|n| n.slot),
            self.nodes.get(&dst).map(|n| n.slot),
        );
        let (su, sv) = match (su, sv) {
            (Some(a), Some(b)) => (a, b),
            _ => return 50,
        };
        let base = self.latency.base(su, sv).max(1);
        let jit = if self.cfg.jitter {
            let w = crate::sim::latency::jitter_window(base);
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

    /// Exit relay finished its direct query: wrap the reply and send it
    /// back along the flow.
    pub(crate) fn exit_query_done(
        &mut self,
        exit: NodeId,
        flow: FlowId,
        back_leg: u8,
        from: NodeId,
        table: SignedTable,
        inner_req: ReqId,
    ) {
        let _ = from;
        // Propagate the manipulation note from the inner request token to
        // the flow token so the eventual consumer can account accuracy.
        if let Some(m) = self.manip_note.remove(&inner_req) {
            self.manip_note.insert(flow, m);
        }
        self.backtrack_reply(exit, flow, back_leg, OnionReply::Table(table));
    }

    /// Send a reply one hop back toward the initiator.
    pub(crate) fn backtrack_reply(&mut self, me: NodeId, flow: FlowId, leg: u8, reply: OnionReply) {
        let (prev, delay_max, class) = {
            let Some(node) = self.nodes.get(&me) else { return };
            match node.flows_relay.get(&flow) {
                Some(fr) => (fr.prev, fr.delay_max_ms, fr.class),
                None => return,
            }
        };
        let mix = if delay_max > 0 {
            self.rng.mix.gen_range(0..=delay_max)
        } else {
            0
        };
        let msg = Msg::OnionBack {
            flow,
            leg,
            class,
            reply,
        };
        self.track_leg(me, flow, leg, prev, &msg);
        let base = self.delivery_delay_pub(me, prev);
        self.send_delayed(me, prev, msg, class, base + mix);
    }

    pub(crate) fn on_onion_back(
        &mut self,
        src: NodeId,
        dst: NodeId,
        flow: FlowId,
        leg: u8,
        class: BandClass,
        reply: OnionReply,
    ) {
        let dup = {
            let Some(node) = self.nodes.get(&dst) else { return };
            node.seen_legs.contains(&(flow, leg))
        };
        if dup {
            self.issue_receipt(dst, src, flow, leg);
            return;
        }
        if self.selective_drop(dst, flow) {
            return;
        }
        {
            let node = self.nodes.get_mut(&dst).unwrap();
            node.seen_legs.insert((flow, leg));
        }
        self.issue_receipt(dst, src, flow, leg);
        let is_origin = self.nodes.get(&dst).map(|n| n.flows_out.contains_key(&flow)).unwrap_or(false);
        if is_origin {
            self.flow_reply(dst, flow, reply);
        } else {
            let my_leg = {
                let node = &self.nodes[&dst];
                node.flows_relay.get(&flow).map(|fr| fr.my_leg)
            };
            if let Some(l) = my_leg {
                let _ = class;
                self.backtrack_reply(dst, flow, 0x80 | l, reply);
            }
        }
    }

    fn flow_reply(&mut self, id: NodeId, flow: FlowId, reply: OnionReply) {
        let Some(node) = self.nodes.get_mut(&id) else { return };
        let Some(origin) = node.flows_out.remove(&flow) else { return };
        let manipulated = self.manip_note.remove(&flow).unwrap_or(false);
        match (origin.purpose, reply) {
            (FlowPurpose::WalkHop { walk, .. }, OnionReply::Table(t)) => {
                self.walk_got_table(id, walk, t);
            }
            (FlowPurpose::WalkSeed { walk }, OnionReply::WalkResult(ts)) => {
                self.walk_phase2_result(id, walk, ts);
            }
            (FlowPurpose::ConductHop { conduct, .. }, OnionReply::Table(t)) => {
                self.conduct_got_table(id, conduct, t);
            }
            (FlowPurpose::LookupQuery { lookup, .. }, OnionReply::Table(t)) => {
                self.lookup_got_table(id, lookup, origin.target, t);
            }
            (FlowPurpose::Dummy { .. }, OnionReply::Table(t)) => {
                self.keep_table(id, t);
            }
            (FlowPurpose::CheckProbe { task }, OnionReply::Table(t)) => {
                self.check_probe_reply(id, task, origin.target, t, manipulated);
            }
            _ => {}
        }
    }

    pub(crate) fn on_flow_deadline(&mut self, id: NodeId, flow: FlowId) {
        self.manip_note.remove(&flow);
        let origin = {
            let Some(node) = self.nodes.get_mut(&id) else { return };
            match node.flows_out.remove(&flow) {
                Some(o) => o,
                None => return, // completed in time
            }
        };
        match origin.purpose {
            FlowPurpose::WalkHop { walk, .. } => self.walk_phase1_failed(id, walk),
            FlowPurpose::WalkSeed { walk } => self.walk_phase2_failed(id, walk),
            FlowPurpose::ConductHop { conduct, .. } => self.conduct_abandoned(id, conduct),
            FlowPurpose::LookupQuery { lookup, .. } => {
                if self.cfg.dos_protection {
                    self.report_missing_reply(id, flow, &origin);
                }
                self.lookup_hop_timed_out(id, lookup, origin.target);
            }
            FlowPurpose::Dummy { .. } => {}
            FlowPurpose::CheckProbe { task } => {
                if self.cfg.dos_protection {
                    self.report_missing_reply(id, flow, &origin);
                }
                self.check_abandoned(id, task);
            }
        }
    }

    // ------------------------------------------------------------------
    // Receipts and witnesses.
    // ------------------------------------------------------------------

    pub(crate) fn on_receipt(&mut self, src: NodeId, dst: NodeId, flow: FlowId, leg: u8, sig: crate::sig::SigTag) {
        if sig.signer != src || !crate::sig::verify(&sig, &receipt_payload(flow, leg)) {
            return;
        }
        let witness_job = {
            let Some(node) = self.nodes.get(&dst) else { return };
            node.witness_jobs.get(&(flow, leg)).copied()
        };
        if let Some((req, asker, _target)) = witness_job {
            let node = self.nodes.get_mut(&dst).unwrap();
            node.witness_jobs.remove(&(flow, leg));
            node.pending.remove(&(WITNESS_TIMEOUT_BASE + req));
            self.send(
                dst,
                asker,
                Msg::WitnessTell {
                    req,
                    receipt: Some(sig),
                    statement: None,
                },
                BandClass::DosControl,
            );
            return;
        }
        if let Some(node) = self.nodes.get_mut(&dst) {
            if let Some(ev) = node.leg_evidence.get_mut(&(flow, leg)) {
                ev.receipt = Some(sig);
                ev.payload = None;
            }
        }
    }

    pub(crate) fn on_receipt_deadline(&mut self, id: NodeId, flow: FlowId, leg: u8) {
        let job = {
            let Some(node) = self.nodes.get_mut(&id) else { return };
            let Some(ev) = node.leg_evidence.get_mut(&(flow, leg)) else { return };
            if ev.receipt.is_some() || ev.witnesses_asked {
                return;
            }
            ev.witnesses_asked = true;
            match &ev.payload {
                Some((to, msg)) => Some((*to, msg.clone())),
                None => None,
            }
        };
        let Some((target, payload)) = job else { return };
        // Ask witnesses (nearest neighbors on both sides) to deliver
        // independently and report back.
        let witnesses: Vec<NodeId> = {
            let node = &self.nodes[&id];
            node.succs
                .iter()
                .chain(node.preds.iter())
                .copied()
                .filter(|&w| w != id && w != target)
                .take(self.cfg.witnesses)
                .collect()
        };
        for w in witnesses {
            let req = self.fresh_req();
            self.nodes
                .get_mut(&id)
                .unwrap()
                .pending
                .insert(req, Pending::WitnessWait { flow, leg });
            self.send(
                id,
                w,
                Msg::WitnessAsk {
                    req,
                    deliver_to: target,
                    payload: Box::new(payload.clone()),
                },
                BandClass::DosControl,
            );
            // Clean up the wait slot if the witness never reports back.
            let at = self.now() + 3 * self.cfg.request_timeout_ms;
            self.set_timer(at, Timer::ReqTimeout { node: id, req });
        }
    }

    pub(crate) fn on_witness_ask(&mut self, src: NodeId, dst: NodeId, req: ReqId, deliver_to: NodeId, payload: Msg) {
        let Some((flow, leg)) = payload_leg_key(&payload) else { return };
        {
            let Some(node) = self.nodes.get_mut(&dst) else { return };
            node.witness_jobs.insert((flow, leg), (req, src, deliver_to));
            while node.witness_jobs.len() > 256 {
                let k = *node.witness_jobs.keys().next().unwrap();
                node.witness_jobs.remove(&k);
            }
        }
        self.send(dst, deliver_to, payload, BandClass::DosControl);
        let at = self.now() + self.cfg.request_timeout_ms;
        self.set_timer(
            at,
            Timer::ReqTimeout {
                node: dst,
                req: WITNESS_TIMEOUT_BASE + req,
            },
        );
        // Track the job under a shifted request id so the generic timeout
        // handler can find it.
        self.nodes.get_mut(&dst).unwrap().pending.insert(
            WITNESS_TIMEOUT_BASE + req,
            Pending::WitnessJob {
                asker: src,
                flow,
                leg,
                target: deliver_to,
            },
        );
    }

    pub(crate) fn witness_failed(
        &mut self,
        witness: NodeId,
        asker: NodeId,
        flow: FlowId,
        leg: u8,
        target: NodeId,
        orig_req: ReqId,
    ) {
        let has_job = {
            let Some(node) = self.nodes.get_mut(&witness) else { return };
            node.witness_jobs.remove(&(flow, leg)).is_some()
        };
        if !has_job {
            return; // receipt already came through
        }
        let mut payload = receipt_payload(flow, leg).to_vec();
        payload.extend(target.0.to_le_bytes());
        let statement = sign(witness, self.now(), &payload);
        self.send(
            witness,
            asker,
            Msg::WitnessTell {
                req: orig_req,
                receipt: None,
                statement: Some(statement),
            },
            BandClass::DosControl,
        );
    }

    pub(crate) fn on_witness_tell(
        &mut self,
        _src: NodeId,
        dst: NodeId,
        req: ReqId,
        receipt: Option<crate::sig::SigTag>,
        statement: Option<crate::sig::SigTag>,
    ) {
        let key = {
            let Some(node) = self.nodes.get_mut(&dst) else { return };
            match node.pending.remove(&req) {
                Some(Pending::WitnessWait { flow, leg }) => Some((flow, leg)),
                Some(other) => {
                    node.pending.insert(req, other);
                    None
                }
                None => None,
            }
        };
        let Some((flow, leg)) = key else {
            return; // wait already cleaned up
        };
        let Some(node) = self.nodes.get_mut(&dst) else { return };
        if let Some(ev) = node.leg_evidence.get_mut(&(flow, leg)) {
            if let Some(r) = receipt {
                ev.receipt = Some(r);
                ev.payload = None;
            }
            if let Some(s) = statement {
                ev.statements.push(s);
            }
        }
    }

    // ------------------------------------------------------------------
    // Multi-path anonymous queries and dummies.
    // ------------------------------------------------------------------

    /// Issue one lookup query through the multi-path structure: shared entry
    /// and middle relays, a fresh exit pair per query. The middle relay adds
    /// a random delay within the configured bound to each message. Falls
    /// back to a short retry when the relay pool cannot cover a fresh pair.
    pub(crate) fn anon_table_query(&mut self, id: NodeId, lookup: TaskId, hop_idx: usize, target: NodeId) {
        let got = self.alloc_lookup_path(id, lookup);
        match got {
            Some((entry, exit)) => {
                let relays = vec![entry.first, entry.second, exit.first, exit.second];
                self.open_flow(
                    id,
                    relays,
                    target,
                    InnerReq::Table {
                        target,
                        scope: TableScope::Full,
                    },
                    FlowPurpose::LookupQuery { lookup, hop_idx },
                    BandClass::Lookup,
                    self.cfg.query_deadline_ms,
                    Some(1),
                );
            }
            None => {
                let at = self.now() + 1_500;
                self.set_timer(at, Timer::AnonRetry { node: id, lookup, target });
            }
        }
    }

    fn alloc_lookup_path(&mut self, id: NodeId, lookup: TaskId) -> Option<(RelayPair, RelayPair)> {
        let (entry, used) = {
            let node = self.nodes.get(&id)?;
            let st = node.lookups.get(&lookup)?;
            (st.entry_pair, st.used_exits.clone())
        };
        let entry = match entry {
            Some(e) => e,
            None => {
                let e = self.take_unused_pair(id, &used)?;
                let node = self.nodes.get_mut(&id)?;
                node.lookups.get_mut(&lookup)?.entry_pair = Some(e);
                e
            }
        };
        let mut exclude = used;
        exclude.push(entry);
        let exit = self.take_unused_pair(id, &exclude)?;
        let node = self.nodes.get_mut(&id)?;
        node.lookups.get_mut(&lookup)?.used_exits.push(exit);
        Some((entry, exit))
    }

    pub(crate) fn anon_retry(&mut self, id: NodeId, lookup: TaskId, target: NodeId) {
        let still = {
            let Some(node) = self.nodes.get(&id) else { return };
            node.lookups
                .get(&lookup)
                .map(|st| st.awaiting == Some(target))
                .unwrap_or(false)
        };
        if still {
            let hop_idx = self.nodes[&id].lookups[&lookup].queried.len();
            self.anon_table_query(id, lookup, hop_idx, target);
        }
    }

    /// Anonymous surveillance probe through two relays.
    pub(crate) fn anon_check_probe(&mut self, id: NodeId, task: TaskId, target: NodeId) -> bool {
        let Some(pair) = self.take_unused_pair(id, &[]) else {
            return false;
        };
        self.open_flow(
            id,
            vec![pair.first, pair.second],
            target,
            InnerReq::Table {
                target,
                scope: TableScope::Full,
            },
            FlowPurpose::CheckProbe { task },
            BandClass::Surveillance,
            self.cfg.query_deadline_ms,
            None,
        )
        .is_some()
    }

    /// Fire one dummy query: a table request to the owner of a uniform
    /// random point as resolvable from the initiator's own table, sent over
    /// a fresh exit pair, indistinguishable in transit from a true query.
    pub(crate) fn on_dummy_fire(&mut self, id: NodeId, lookup: TaskId) {
        let proceed = {
            let Some(node) = self.nodes.get_mut(&id) else { return };
            match node.lookups.get_mut(&lookup) {
                Some(st) if st.dummies_left > 0 => {
                    st.dummies_left -= 1;
                    true
                }
                _ => false,
            }
        };
        if !proceed {
            return;
        }
        let v = RingPoint(self.rng.dummies.gen_range(0..self.ring.size()));
        let target = {
            let node = &self.nodes[&id];
            let mut best: Option<(u64, NodeId)> = None;
            for e in node
                .fingers
                .iter()
                .filter_map(|f| f.node)
                .chain(node.succs.iter().copied())
            {
                if e == id {
                    continue;
                }
                let d = self.ring.dist_cw(v, e);
                match best {
                    Some((bd, _)) if bd <= d => {}
                    _ => best = Some((d, e)),
                }
            }
            match best {
                Some((_, t)) => t,
                None => return,
            }
        };
        let got = self.alloc_lookup_path(id, lookup);
        if let Some((entry, exit)) = got {
            let relays = vec![entry.first, entry.second, exit.first, exit.second];
            self.open_flow(
                id,
                relays,
                target,
                InnerReq::Table {
                    target,
                    scope: TableScope::Full,
                },
                FlowPurpose::Dummy { lookup },
                BandClass::Lookup,
                self.cfg.query_deadline_ms,
                Some(1),
            );
        }
    }
}

/// Witness timeout bookkeeping uses request ids shifted far above the
/// organic range so they can never collide with live requests.
const WITNESS_TIMEOUT_BASE: u64 = 1 << 62;

//! Iterative greedy lookup: every queried node returns its full signed
//! routing table and the initiator picks the next hop itself. The target key
//! is never revealed to intermediate nodes; queries are table requests only.

use crate::config::Transport;
use crate::ring::{NodeId, RingPoint};
use crate::sig::SignedTable;
use crate::world::{
    BandClass, LookupPurpose, LookupState, LookupStatus, Msg, Pending, TableScope, TaskId, Timer,
    World,
};
use rand::Rng;

impl World {
    // ------------------------------------------------------------------
    // Periodic user lookups.
    // ------------------------------------------------------------------

    pub(crate) fn on_lookup_tick(&mut self, id: NodeId) {
        if !self.is_alive(id) {
            return;
        }
        let v = RingPoint(self.rng.lookups.gen_range(0..self.ring.size()));
        self.start_lookup(id, v, LookupPurpose::User, self.cfg.lookup_transport);
        let next = self.now() + self.cfg.lookup_period_ms;
        self.set_timer(next, Timer::LookupTick { node: id });
    }

    pub(crate) fn start_lookup(
        &mut self,
        id: NodeId,
        v: RingPoint,
        purpose: LookupPurpose,
        transport: Transport,
    ) -> Option<TaskId> {
        let entries = {
            let node = self.nodes.get(&id)?;
            let mut e: Vec<NodeId> = node.fingers.iter().filter_map(|f| f.node).collect();
            e.extend(node.succs.iter().copied());
            e.sort_unstable();
            e.dedup();
            e.retain(|&x| x != id);
            e
        };
        self.start_lookup_inner(id, v, purpose, transport, entries)
    }

    /// Start a lookup whose first-hop candidates are fixed (bootstrap uses
    /// the introducer as the sole entry point).
    pub(crate) fn start_lookup_with_entries(
        &mut self,
        id: NodeId,
        v: RingPoint,
        purpose: LookupPurpose,
        transport: Transport,
        entries: Vec<NodeId>,
    ) -> Option<TaskId> {
        self.start_lookup_inner(id, v, purpose, transport, entries)
    }

    fn start_lookup_inner(
        &mut self,
        id: NodeId,
        v: RingPoint,
        purpose: LookupPurpose,
        transport: Transport,
        entries: Vec<NodeId>,
    ) -> Option<TaskId> {
        let task = self.fresh_task();
        let now = self.now();
        let anon = transport == Transport::AnonMultipath;
        let (entry_pair, dummies) = if anon {
            let pair = self.take_unused_pair(id, &[]);
            (pair, self.cfg.k_dummy)
        } else {
            (None, 0)
        };
        let node = self.nodes.get_mut(&id)?;
        let succs = node.succs.clone();
        let st = LookupState {
            id: task,
            purpose,
            v,
            started: now,
            queried: Vec::new(),
            entries,
            last_node: id,
            last_succs: succs,
            retried: false,
            avoided: Default::default(),
            entry_pair,
            used_exits: Vec::new(),
            dummies_left: dummies,
            awaiting: None,
        };
        node.lookups.insert(task, st);
        if anon {
            // Dummy queries fire at uniform times across the expected
            // lookup window, interleaving them with the true queries.
            let window = self.cfg.query_deadline_ms * 2;
            for _ in 0..dummies {
                let at = now + self.rng.dummies.gen_range(0..window.max(1));
                self.set_timer(at, Timer::DummyFire { node: id, lookup: task });
            }
        }
        self.lookup_step(id, task);
        Some(task)
    }

    // ------------------------------------------------------------------
    // The greedy loop.
    // ------------------------------------------------------------------

    /// Resolve-or-advance: called at start and after each reply.
    pub(crate) fn lookup_step(&mut self, id: NodeId, task: TaskId) {
        enum Step {
            Finish(Option<NodeId>),
            Query(NodeId),
        }
        let ring = self.ring;
        let budget = 3 * self.cfg.fingers;
        let step = {
            let Some(node) = self.nodes.get(&id) else { return };
            let Some(st) = node.lookups.get(&task) else { return };
            let v = st.v;

            // Termination: the last replied node's successor list covers v.
            let resolved = st.last_succs.last().copied().and_then(|last| {
                let anchor = st.last_node;
                if ring.dist_cw(anchor, v) == 0 {
                    Some(anchor)
                } else if ring.in_open_closed(anchor, v, last) {
                    let dv = ring.dist_cw(anchor, v);
                    st.last_succs
                        .iter()
                        .copied()
                        .find(|&s| ring.dist_cw(anchor, s) >= dv)
                } else {
                    None
                }
            });
            if let Some(result) = resolved {
                Step::Finish(Some(result))
            } else if st.queried.len() >= budget {
                Step::Finish(None)
            } else {
                // Greedy choice: the candidate precedingly-closest to v,
                // strictly closer than anything queried so far.
                let best_so_far = st
                    .queried
                    .iter()
                    .map(|&q| ring.dist_cw(q, v))
                    .min()
                    .unwrap_or_else(|| ring.dist_cw(id, v).max(1));
                let next = st
                    .entries
                    .iter()
                    .copied()
                    .filter(|&e| e != id && !st.avoided.contains(&e) && !st.queried.contains(&e))
                    .filter(|&e| {
                        let d = ring.dist_cw(e, v);
                        d > 0 && d < best_so_far
                    })
                    .min_by_key(|&e| ring.dist_cw(e, v));
                match next {
                    Some(n) => Step::Query(n),
                    // No candidate is closer than the last node's first
                    // successor: accept it as the result.
                    None => Step::Finish(st.last_succs.first().copied()),
                }
            }
        };
        match step {
            Step::Finish(result) => self.finish_lookup(id, task, result),
            Step::Query(n) => self.issue_query(id, task, n),
        }
    }

    fn issue_query(&mut self, id: NodeId, task: TaskId, target: NodeId) {
        let transport = {
            let node = self.nodes.get_mut(&id).unwrap();
            let st = node.lookups.get_mut(&task).unwrap();
            st.awaiting = Some(target);
            if st.entry_pair.is_some() {
                Transport::AnonMultipath
            } else {
                Transport::Direct
            }
        };
        match transport {
            Transport::Direct => {
                let req = self.fresh_req();
                let class = {
                    let st = &self.nodes[&id].lookups[&task];
                    match st.purpose {
                        LookupPurpose::User => BandClass::Lookup,
                        _ => BandClass::FingerMaint,
                    }
                };
                self.nodes
                    .get_mut(&id)
                    .unwrap()
                    .pending
                    .insert(req, Pending::LookupHop { lookup: task, target });
                self.send(
                    id,
                    target,
                    Msg::TableReq {
                        req,
                        scope: TableScope::Full,
                        receipt: None,
                    },
                    class,
                );
                let deadline = self.now() + self.cfg.request_timeout_ms;
                self.set_timer(deadline, Timer::ReqTimeout { node: id, req });
            }
            Transport::AnonMultipath => {
                let hop_idx = self.nodes[&id].lookups[&task].queried.len();
                self.anon_table_query(id, task, hop_idx, target);
            }
        }
    }

    /// Shared reply path for direct and anonymous transport.
    pub(crate) fn lookup_got_table(&mut self, id: NodeId, task: TaskId, from: NodeId, table: SignedTable) {
        if !table.verifies() || table.table.owner != from {
            // A table failing verification is never used for routing;
            // treat the hop as dead and detour.
            self.lookup_hop_timed_out(id, task, from);
            return;
        }
        self.keep_table(id, table.clone());
        let Some(node) = self.nodes.get_mut(&id) else { return };
        let Some(st) = node.lookups.get_mut(&task) else { return };
        if st.awaiting != Some(from) {
            return; // stale reply
        }
        st.awaiting = None;
        st.retried = false;
        st.queried.push(from);
        st.last_node = from;
        st.last_succs = table.table.succs.clone();
        let mut entries: Vec<NodeId> = table.table.fingers.iter().filter_map(|f| f.node).collect();
        entries.extend(table.table.succs.iter().copied());
        entries.sort_unstable();
        entries.dedup();
        st.entries = entries;
        self.lookup_step(id, task);
    }

    pub(crate) fn lookup_hop_timed_out(&mut self, id: NodeId, task: TaskId, target: NodeId) {
        let retry = {
            let Some(node) = self.nodes.get_mut(&id) else { return };
            let Some(st) = node.lookups.get_mut(&task) else { return };
            if st.awaiting != Some(target) {
                return;
            }
            if !st.retried {
                st.retried = true;
                true
            } else {
                st.retried = false;
                st.avoided.insert(target);
                st.awaiting = None;
                false
            }
        };
        if retry {
            self.issue_query(id, task, target);
        } else {
            self.lookup_step(id, task);
        }
    }

    fn finish_lookup(&mut self, id: NodeId, task: TaskId, result: Option<NodeId>) {
        let Some(node) = self.nodes.get_mut(&id) else { return };
        let Some(st) = node.lookups.remove(&task) else { return };
        let status = match result {
            None => LookupStatus::Failed,
            Some(r) => {
                let truth = self.alive.owner(st.v);
                if truth == Some(r) {
                    LookupStatus::Succeeded
                } else {
                    LookupStatus::Biased
                }
            }
        };
        match st.purpose {
            LookupPurpose::User => {
                self.metrics.record_lookup(status, st.queried.len());
            }
            LookupPurpose::Bootstrap => {
                if let Some(r) = result {
                    self.bootstrap_found_owner(id, r);
                }
            }
            LookupPurpose::FingerUpdate { slot } => {
                if let Some(r) = result {
                    self.finger_update_candidate(id, slot, r);
                }
            }
        }
    }

    /// Archive a received foreign table for later surveillance use.
    pub(crate) fn keep_table(&mut self, id: NodeId, table: SignedTable) {
        let cap = self.cfg.kept_tables;
        let Some(node) = self.nodes.get_mut(&id) else { return };
        if table.table.owner == id {
            return;
        }
        node.kept.push_back(table);
        while node.kept.len() > cap {
            node.kept.pop_front();
        }
    }

    // ------------------------------------------------------------------
    // Direct table request/reply plumbing.
    // ------------------------------------------------------------------

    pub(crate) fn on_table_req(
        &mut self,
        src: NodeId,
        dst: NodeId,
        req: crate::world::ReqId,
        scope: TableScope,
        receipt: Option<(crate::world::FlowId, u8)>,
    ) {
        if let Some((flow, leg)) = receipt {
            self.issue_receipt(dst, src, flow, leg);
        }
        let (table, manipulated) = self.build_table_reply(dst, scope);
        if manipulated {
            self.manip_note.insert(req, true);
        }
        self.send(dst, src, Msg::TableRep { req, table }, BandClass::Lookup);
    }

    pub(crate) fn on_table_rep(&mut self, src: NodeId, dst: NodeId, req: crate::world::ReqId, table: SignedTable) {
        let Some(node) = self.nodes.get_mut(&dst) else { return };
        let Some(pending) = node.pending.remove(&req) else {
            self.manip_note.remove(&req);
            return;
        };
        match pending {
            Pending::LookupHop { lookup, target } => {
                self.manip_note.remove(&req);
                if target == src {
                    self.lookup_got_table(dst, lookup, src, table);
                }
            }
            Pending::JoinFetch { target } => {
                self.manip_note.remove(&req);
                if target == src {
                    self.keep_table(dst, table.clone());
                    self.join_fetch_done(dst, table);
                }
            }
            Pending::WalkFirst { walk, target } => {
                self.manip_note.remove(&req);
                if target == src {
                    self.walk_got_table(dst, walk, table);
                }
            }
            Pending::ExitQuery { flow, back_leg } => {
                self.exit_query_done(dst, flow, back_leg, src, table, req);
            }
            Pending::ConductHop { conduct, target } => {
                self.manip_note.remove(&req);
                if target == src {
                    self.conduct_got_table(dst, conduct, table);
                }
            }
            other => {
                // Not a table-bearing request; restore and ignore.
                self.nodes.get_mut(&dst).unwrap().pending.insert(req, other);
            }
        }
    }
}

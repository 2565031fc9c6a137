//! Ring maintenance: successor/predecessor stabilization (run symmetrically
//! in both directions), the recompute rule shared with CA adjudication, and
//! join bootstrap.
//!
//! A node's official neighbor lists change only by recomputation from a
//! signed stabilization reply (archived as proof) or by dropping dead
//! entries from the head after a timeout. Fresh neighbors discovered through
//! incoming stabilization requests only adjust the next stabilization
//! target; the official list picks them up one round later, when a signed
//! reply can justify them. That keeps every honest list explainable to the
//! CA from archived proofs alone.

use crate::ring::{NodeId, Ring};
use crate::sig::{Direction, NeighborList, SignedNeighbors, SignedTable};
use crate::world::{BandClass, Msg, Pending, Timer, World};
use rand::Rng;

/// A stabilization proof or a captured table, interchangeable as evidence
/// and as recompute input.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ProofArtifact {
    List(SignedNeighbors),
    Table(SignedTable),
}

impl ProofArtifact {
    pub fn signer(&self) -> NodeId {
        match self {
            ProofArtifact::List(l) => l.list.owner,
            ProofArtifact::Table(t) => t.table.owner,
        }
    }

    pub fn ts(&self) -> u64 {
        match self {
            ProofArtifact::List(l) => l.sig.ts,
            ProofArtifact::Table(t) => t.sig.ts,
        }
    }

    pub fn verifies(&self) -> bool {
        match self {
            ProofArtifact::List(l) => l.verifies(),
            ProofArtifact::Table(t) => t.verifies(),
        }
    }

    pub fn entries(&self, dir: Direction) -> &[NodeId] {
        match self {
            ProofArtifact::List(l) => {
                debug_assert_eq!(l.list.dir, dir);
                &l.list.entries
            }
            ProofArtifact::Table(t) => match dir {
                Direction::Succ => &t.table.succs,
                Direction::Pred => &t.table.preds,
            },
        }
    }

    /// The signer's believed nearest node on the opposite side of `dir`,
    /// used to discover joins between requester and signer.
    pub fn hint(&self, dir: Direction) -> Option<NodeId> {
        match self {
            ProofArtifact::List(l) => l.list.hint,
            ProofArtifact::Table(t) => match dir {
                Direction::Succ => t.table.preds.first().copied(),
                Direction::Pred => t.table.succs.first().copied(),
            },
        }
    }
}

/// Is `x` strictly between `me` and `other`, walking in `dir`?
pub fn dir_between(ring: &Ring, me: NodeId, x: NodeId, other: NodeId, dir: Direction) -> bool {
    match dir {
        Direction::Succ => ring.between_open(me, x, other),
        Direction::Pred => ring.between_open(other, x, me),
    }
}

/// Distance from `me` to `x` walking in `dir`.
pub fn dir_dist(ring: &Ring, me: NodeId, x: NodeId, dir: Direction) -> u64 {
    match dir {
        Direction::Succ => ring.dist_cw(me, x),
        Direction::Pred => ring.dist_cw(x, me),
    }
}

/// The stabilization recompute rule: what `me`'s list must be after
/// processing `proof`. Deterministic, so the CA can replay it.
pub fn recompute_list(
    ring: &Ring,
    me: NodeId,
    proof: &ProofArtifact,
    dir: Direction,
    cap: usize,
) -> Vec<NodeId> {
    let signer = proof.signer();
    let mut out: Vec<NodeId> = Vec::with_capacity(cap + 1);
    if let Some(h) = proof.hint(dir) {
        if h != me && h != signer && dir_between(ring, me, h, signer, dir) {
            out.push(h);
        }
    }
    if signer != me {
        out.push(signer);
    }
    for &e in proof.entries(dir) {
        if e != me && !out.contains(&e) {
            out.push(e);
        }
    }
    out.truncate(cap);
    out
}

/// Does `claimed` equal the recomputation, allowing a dead prefix to have
/// been dropped? Returns the number of dropped heads on success.
pub fn consistent_with(
    ring: &Ring,
    me: NodeId,
    claimed: &[NodeId],
    proof: &ProofArtifact,
    dir: Direction,
    cap: usize,
) -> Option<usize> {
    let full = recompute_list(ring, me, proof, dir, cap);
    if claimed.is_empty() {
        return None;
    }
    for k in 0..full.len() {
        if full[k..] == *claimed {
            return Some(k);
        }
    }
    None
}

impl World {
    // ------------------------------------------------------------------
    // Stabilization.
    // ------------------------------------------------------------------

    pub(crate) fn on_stab_tick(&mut self, id: NodeId, dir: Direction) {
        let Some(node) = self.nodes.get(&id) else { return };
        let target = match dir {
            Direction::Succ => node.stab_target_succ.or_else(|| node.succs.first().copied()),
            Direction::Pred => node.stab_target_pred.or_else(|| node.preds.first().copied()),
        };
        match target {
            Some(t) if t != id => {
                let req = self.fresh_req();
                let node = self.nodes.get_mut(&id).unwrap();
                node.pending.insert(req, Pending::Stab { dir, target: t });
                self.send(id, t, Msg::StabReq { req, dir }, BandClass::Stabilize);
                let deadline = self.now() + self.cfg.request_timeout_ms;
                self.set_timer(deadline, Timer::ReqTimeout { node: id, req });
            }
            _ => {
                // Lost all neighbors in this direction: re-bootstrap from a
                // random introducer.
                if self.alive.len() > 1 {
                    let k = self.rng.sched.gen_range(0..self.alive.len());
                    let intro = self.alive.by_rank(k);
                    if intro != id {
                        self.start_bootstrap(id, intro);
                    }
                }
            }
        }
        let next = self.now() + self.cfg.stabilize_ms;
        self.set_timer(next, Timer::StabTick { node: id, dir });
    }

    pub(crate) fn on_stab_req(&mut self, src: NodeId, dst: NodeId, req: ReqIdAlias, dir: Direction) {
        // The request doubles as a notify: the requester sits on the
        // opposite side of `dir` from our perspective.
        let ring = self.ring;
        if let Some(node) = self.nodes.get_mut(&dst) {
            match dir {
                Direction::Succ => {
                    // Requester stabilizes clockwise toward us: it is a
                    // predecessor-side node.
                    let cur = node.stab_target_pred.or_else(|| node.preds.first().copied());
                    let closer = match cur {
                        None => true,
                        Some(c) => c == src || dir_between(&ring, dst, src, c, Direction::Pred),
                    };
                    if closer && src != dst {
                        node.stab_target_pred = Some(src);
                    }
                }
                Direction::Pred => {
                    let cur = node.stab_target_succ.or_else(|| node.succs.first().copied());
                    let closer = match cur {
                        None => true,
                        Some(c) => c == src || dir_between(&ring, dst, src, c, Direction::Succ),
                    };
                    if closer && src != dst {
                        node.stab_target_succ = Some(src);
                    }
                }
            }
        } else {
            return;
        }
        let signed = self.build_stab_reply(dst, dir);
        self.send(dst, src, Msg::StabRep { req, signed }, BandClass::Stabilize);
    }

    /// Construct the signed reply this node gives to a stabilization
    /// request in `dir`. Malicious nodes may pollute it.
    pub(crate) fn build_stab_reply(&mut self, responder: NodeId, dir: Direction) -> SignedNeighbors {
        let now = self.now();
        let node = &self.nodes[&responder];
        let honest_entries = node.neighbor_list(dir).clone();
        let hint = match dir {
            Direction::Succ => node.preds.first().copied(),
            Direction::Pred => node.succs.first().copied(),
        };
        let malicious = node.malicious;
        let entries = if malicious && self.cfg.behaviors.pollute_succ {
            self.pollute_during_stabilization(responder, &honest_entries, dir)
        } else {
            honest_entries
        };
        SignedNeighbors::new(
            NeighborList {
                owner: responder,
                dir,
                hint,
                entries,
            },
            now,
        )
    }

    pub(crate) fn on_stab_rep(&mut self, src: NodeId, dst: NodeId, req: ReqIdAlias, signed: SignedNeighbors) {
        let ring = self.ring;
        let cap = self.cfg.neighbors;
        let retain_ms = self.proof_retention_ms();
        let now = self.now();
        let Some(node) = self.nodes.get_mut(&dst) else { return };
        let Some(Pending::Stab { dir, target }) = node.pending.remove(&req) else {
            return;
        };
        if src != target || signed.list.owner != src || signed.list.dir != dir || !signed.verifies() {
            return;
        }
        // Archive the proof, then recompute the official list from it.
        let artifact = ProofArtifact::List(signed);
        let new_list = recompute_list(&ring, dst, &artifact, dir, cap);
        let queue = match dir {
            Direction::Succ => &mut node.succ_proofs,
            Direction::Pred => &mut node.pred_proofs,
        };
        queue.push_back(match &artifact {
            ProofArtifact::List(l) => l.clone(),
            _ => unreachable!(),
        });
        let min_keep = self.cfg.proof_queue;
        while queue.len() > min_keep
            && queue
                .front()
                .map(|p| p.sig.ts + retain_ms < now)
                .unwrap_or(false)
        {
            queue.pop_front();
        }
        match dir {
            Direction::Succ => {
                node.succs = new_list;
                node.stab_target_succ = node.succs.first().copied();
            }
            Direction::Pred => {
                node.preds = new_list;
                node.stab_target_pred = node.preds.first().copied();
            }
        }
    }

    /// Proofs are retained for at least this long (and never fewer than the
    /// configured queue depth), so adjudication can always find the proof
    /// that justified recent artifacts.
    pub fn proof_retention_ms(&self) -> u64 {
        30_000
    }

    /// Request timeout: the peer is gone (alive nodes always answer).
    pub(crate) fn on_req_timeout(&mut self, id: NodeId, req: ReqIdAlias) {
        let Some(node) = self.nodes.get_mut(&id) else { return };
        let Some(pending) = node.pending.remove(&req) else {
            return; // already answered
        };
        match pending {
            Pending::Stab { dir, target } => match dir {
                Direction::Succ => {
                    if node.stab_target_succ == Some(target) {
                        node.stab_target_succ = None;
                    }
                    if node.succs.first() == Some(&target) {
                        node.succs.remove(0);
                    }
                }
                Direction::Pred => {
                    if node.stab_target_pred == Some(target) {
                        node.stab_target_pred = None;
                    }
                    if node.preds.first() == Some(&target) {
                        node.preds.remove(0);
                    }
                }
            },
            Pending::LookupHop { lookup, target } => {
                self.lookup_hop_timed_out(id, lookup, target);
            }
            Pending::JoinFetch { .. } => {
                // Owner vanished; retry bootstrap from someone else.
                if self.alive.len() > 1 {
                    let k = self.rng.sched.gen_range(0..self.alive.len());
                    let intro = self.alive.by_rank(k);
                    if intro != id {
                        self.start_bootstrap(id, intro);
                    }
                }
            }
            Pending::WalkFirst { walk, .. } => {
                self.walk_phase1_failed(id, walk);
            }
            Pending::SeedDirect { walk, .. } => {
                self.walk_phase2_failed(id, walk);
            }
            Pending::PredListFetch { task, .. } => {
                self.check_abandoned(id, task);
            }
            Pending::AgeFetch { task, .. } => {
                self.check_abandoned(id, task);
            }
            Pending::ExitQuery { .. } => {
                // Query target vanished; the initiator's flow deadline
                // handles recovery.
            }
            Pending::ConductHop { conduct, .. } => {
                self.conduct_abandoned(id, conduct);
            }
            Pending::WitnessJob { asker, flow, leg, target } => {
                let orig = req - (1u64 << 62);
                self.witness_failed(id, asker, flow, leg, target, orig);
            }
            Pending::WitnessWait { .. } => {}
        }
    }

    // ------------------------------------------------------------------
    // Finger refresh scheduling (round-robin; the verification lives in
    // sentinel::secure_finger_update).
    // ------------------------------------------------------------------

    pub(crate) fn on_finger_tick(&mut self, id: NodeId) {
        let (slot, ideal) = {
            let Some(node) = self.nodes.get_mut(&id) else { return };
            let slot = node.next_refresh_slot;
            node.next_refresh_slot = (node.next_refresh_slot + 1) % self.cfg.fingers;
            (slot, self.slot_ideal(id, slot + 1))
        };
        self.start_lookup(
            id,
            ideal,
            crate::world::LookupPurpose::FingerUpdate { slot },
            crate::config::Transport::Direct,
        );
        let next = self.now() + self.cfg.finger_update_ms;
        self.set_timer(next, Timer::FingerTick { node: id });
    }

    // ------------------------------------------------------------------
    // Join bootstrap.
    // ------------------------------------------------------------------

    pub(crate) fn start_bootstrap(&mut self, id: NodeId, introducer: NodeId) {
        let v = self.ring.add(id, 1);
        let task = self.start_lookup_with_entries(
            id,
            v,
            crate::world::LookupPurpose::Bootstrap,
            crate::config::Transport::Direct,
            vec![introducer],
        );
        let _ = task;
    }

    /// Bootstrap lookup finished: fetch the owner's table and seed our
    /// neighbor lists from it.
    pub(crate) fn bootstrap_found_owner(&mut self, id: NodeId, owner: NodeId) {
        if owner == id || !self.is_alive(id) {
            return;
        }
        let req = self.fresh_req();
        let Some(node) = self.nodes.get_mut(&id) else { return };
        node.pending.insert(req, Pending::JoinFetch { target: owner });
        self.send(
            id,
            owner,
            Msg::TableReq {
                req,
                scope: crate::world::TableScope::Full,
                receipt: None,
            },
            BandClass::FingerMaint,
        );
        let deadline = self.now() + self.cfg.request_timeout_ms;
        self.set_timer(deadline, Timer::ReqTimeout { node: id, req });
    }

    pub(crate) fn join_fetch_done(&mut self, id: NodeId, table: SignedTable) {
        let ring = self.ring;
        let cap = self.cfg.neighbors;
        if !table.verifies() {
            return;
        }
        let artifact = ProofArtifact::Table(table.clone());
        let succs = recompute_list(&ring, id, &artifact, Direction::Succ, cap);
        // Our predecessors are (approximately) our successor's predecessors.
        let mut preds: Vec<NodeId> = table
            .table
            .preds
            .iter()
            .copied()
            .filter(|&p| p != id)
            .collect();
        preds.truncate(cap);
        let Some(node) = self.nodes.get_mut(&id) else { return };
        node.succs = succs;
        node.preds = preds;
        node.stab_target_succ = node.succs.first().copied();
        node.stab_target_pred = node.preds.first().copied();
        node.succ_proofs.push_back(SignedNeighbors::new(
            NeighborList {
                owner: table.table.owner,
                dir: Direction::Succ,
                hint: table.table.preds.first().copied(),
                entries: table.table.succs.clone(),
            },
            table.sig.ts,
        ));
        self.fill_fingers_from_kept(id);
    }

    /// Populate empty finger slots from tables gathered so far (bootstrap
    /// lookups keep every reply). Periodic refresh improves on this.
    pub(crate) fn fill_fingers_from_kept(&mut self, id: NodeId) {
        let ring = self.ring;
        let Some(node) = self.nodes.get_mut(&id) else { return };
        let mut candidates: Vec<NodeId> = Vec::new();
        for t in &node.kept {
            candidates.push(t.table.owner);
            candidates.extend(t.table.fingers.iter().filter_map(|f| f.node));
            candidates.extend(t.table.succs.iter().copied());
        }
        candidates.extend(node.succs.iter().copied());
        candidates.sort_unstable();
        candidates.dedup();
        for slot in node.fingers.iter_mut() {
            if slot.node.is_some() {
                continue;
            }
            let best = candidates
                .iter()
                .copied()
                .filter(|&c| c != id)
                .min_by_key(|&c| ring.dist_cw(slot.ideal, c));
            slot.node = best;
        }
    }
}

// The handlers above take ReqId by the alias below purely to keep signatures
// short in this file.
pub(crate) type ReqIdAlias = crate::world::ReqId;

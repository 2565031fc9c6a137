//! Attacker discovery: secret neighbor surveillance, secret finger
//! surveillance, secure finger update, the CA with evidence-chain
//! adjudication, the selective-DoS receipt trail, and the security metrics.
//!
//! Adjudication applies two rules to every signed neighbor artifact:
//!
//! * consistency (rule A): the claimed list must equal the stabilization
//!   recomputation from one of the signer's archived proofs, up to dead
//!   entries dropped from the head; if it does, suspicion shifts to the
//!   proof's signer and the walk continues;
//! * positional honesty (rule B): no gap between claimed entries may skip a
//!   node that is alive and had been a member since well before the
//!   artifact was signed. The membership-age grace period covers honest
//!   propagation lag after joins, so honest nodes cannot trip this rule;
//!   forged lists that splice in remote colluders trip it immediately.
//!
//! Convictions revoke the certificate and remove the node. A chain that
//! stays consistent until it explains the complaint (or hits the depth cap)
//! is a false alarm.

use crate::overlay::{consistent_with, dir_between, ProofArtifact};
use crate::ring::{NodeId, RingPoint};
use crate::sig::{AgeProof, Direction, SignedNeighbors, SignedTable};
use crate::world::{
    BandClass, CheckKind, CheckState, FlowId, FlowOrigin, LookupStatus, Msg, Pending, ReqId,
    TaskId, Timer, World,
};
use rand::Rng;
use std::collections::{BTreeMap, BTreeSet};

// ---------------------------------------------------------------------
// Reports, verdicts, CA.
// ---------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum ReportKind {
    Neighbor,
    FingerSurveil,
    FingerUpdate,
    Dos,
}

impl ReportKind {
    pub fn index(self) -> usize {
        match self {
            ReportKind::Neighbor => 0,
            ReportKind::FingerSurveil => 1,
            ReportKind::FingerUpdate => 2,
            ReportKind::Dos => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ReportKind::Neighbor => "neighbor",
            ReportKind::FingerSurveil => "finger_surveil",
            ReportKind::FingerUpdate => "finger_update",
            ReportKind::Dos => "dos",
        }
    }
}

#[derive(Clone, Debug)]
pub enum Evidence {
    /// A signed successor list (or captured table) that excluded the
    /// reporter.
    Exclusion {
        artifact: ProofArtifact,
        victim: NodeId,
    },
    /// Finger surveillance artifacts: the candidate's predecessor list, the
    /// anonymously probed predecessor's table, and the skipped witness.
    Finger {
        source: Option<SignedTable>,
        ideal: RingPoint,
        candidate: NodeId,
        pred_list: SignedNeighbors,
        probe: SignedTable,
        witness: NodeId,
        witness_age: AgeProof,
    },
    /// Missing anonymous reply with all relays alive.
    Dos {
        flow: FlowId,
        relays: Vec<NodeId>,
        target: NodeId,
    },
}

#[derive(Clone, Debug)]
pub struct MisbehaviorReport {
    pub kind: ReportKind,
    pub reporter: NodeId,
    pub accused: NodeId,
    pub evidence: Evidence,
    pub t: u64,
}

#[derive(Clone, Debug)]
pub struct Verdict {
    pub convicted: Option<NodeId>,
    pub chain: Vec<NodeId>,
    pub messages_processed: u64,
}

#[derive(Clone, Copy, Debug)]
pub struct VerdictRecord {
    pub kind: ReportKind,
    pub reporter: NodeId,
    pub accused: NodeId,
    pub convicted: Option<NodeId>,
    pub convicted_was_malicious: bool,
    pub chain_len: usize,
    pub messages: u64,
    pub t: u64,
}

#[derive(Clone, Debug, Default)]
pub struct CertAuthority {
    pub revoked: BTreeSet<NodeId>,
    /// Recently adjudicated accusations, for duplicate suppression.
    recent: BTreeMap<NodeId, u64>,
    pub msgs_total: u64,
    /// Every admitted report's outcome, in arrival order.
    pub log: Vec<VerdictRecord>,
}

impl CertAuthority {
    pub fn new() -> Self {
        Self::default()
    }
}

// ---------------------------------------------------------------------
// Metrics.
// ---------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Default)]
pub struct MechStats {
    pub reports: u64,
    pub false_alarms: u64,
    pub convictions: u64,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct TestStats {
    /// Completed checks whose subject was malicious and answered with a
    /// manipulated artifact.
    pub tested: u64,
    /// Of those, checks that did not end in a malicious conviction.
    pub missed: u64,
}

impl TestStats {
    pub fn fn_rate(&self) -> f64 {
        if self.tested == 0 {
            0.0
        } else {
            self.missed as f64 / self.tested as f64
        }
    }
}

pub struct Counts {
    pub alive: usize,
    pub alive_malicious: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct SecSnap {
    pub t_ms: u64,
    /// Not-yet-convicted fraction of the initial malicious population.
    pub remaining_fraction: f64,
    pub alive_malicious_fraction: f64,
    pub honest_convictions: u64,
    pub fn_neighbor: f64,
    pub fn_finger: f64,
    pub fa_neighbor: f64,
    pub fa_finger: f64,
    pub ca_msgs_per_sec: f64,
}

#[derive(Clone, Debug, Default)]
pub struct Ledger {
    /// (messages, bytes) sent per class, aggregated over all nodes.
    sent: BTreeMap<BandClass, (u64, u64)>,
    pub recv_bytes: u64,
}

impl Ledger {
    pub fn count(&mut self, _src: NodeId, _dst: NodeId, class: BandClass, bytes: u64) {
        let e = self.sent.entry(class).or_insert((0, 0));
        e.0 += 1;
        e.1 += bytes;
    }

    pub fn count_recv(&mut self, _dst: NodeId, bytes: u64) {
        self.recv_bytes += bytes;
    }

    pub fn class_totals(&self, class: BandClass) -> (u64, u64) {
        self.sent.get(&class).copied().unwrap_or((0, 0))
    }

    pub fn total_bytes(&self) -> u64 {
        self.sent.values().map(|v| v.1).sum()
    }

    /// Average sent kbps per node over the run.
    pub fn kbps_per_node(&self, n: usize, horizon_ms: u64) -> f64 {
        if n == 0 || horizon_ms == 0 {
            return 0.0;
        }
        (self.total_bytes() as f64 * 8.0 / 1000.0) / (horizon_ms as f64 / 1000.0) / n as f64
    }

    pub fn class_kbps_per_node(&self, class: BandClass, n: usize, horizon_ms: u64) -> f64 {
        if n == 0 || horizon_ms == 0 {
            return 0.0;
        }
        (self.class_totals(class).1 as f64 * 8.0 / 1000.0) / (horizon_ms as f64 / 1000.0) / n as f64
    }
}

#[derive(Default)]
pub struct Metrics {
    pub initial_malicious: usize,
    pub departures: u64,
    pub arrivals: u64,
    pub lookups_ok: u64,
    pub lookups_biased: u64,
    pub lookups_failed: u64,
    pub hop_hist: Vec<u64>,
    pub mech: [MechStats; 4],
    pub neighbor_tests: TestStats,
    pub finger_tests: TestStats,
    pub convicted_malicious: u64,
    pub convicted_honest: u64,
    pub series: Vec<SecSnap>,
    pub ledger: Ledger,
    last_ca_msgs: u64,
    last_snap_ms: u64,
    pending_ca_msgs: u64,
}

impl Metrics {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record_lookup(&mut self, status: LookupStatus, hops: usize) {
        match status {
            LookupStatus::Succeeded => self.lookups_ok += 1,
            LookupStatus::Biased => self.lookups_biased += 1,
            LookupStatus::Failed | LookupStatus::Running => self.lookups_failed += 1,
        }
        if status != LookupStatus::Failed {
            if self.hop_hist.len() <= hops {
                self.hop_hist.resize(hops + 1, 0);
            }
            self.hop_hist[hops] += 1;
        }
    }

    pub fn note_ca_msgs(&mut self, msgs: u64) {
        self.pending_ca_msgs += msgs;
    }

    pub fn remaining_fraction(&self) -> f64 {
        if self.initial_malicious == 0 {
            return 0.0;
        }
        (self.initial_malicious as u64 - self.convicted_malicious.min(self.initial_malicious as u64))
            as f64
            / self.initial_malicious as f64
    }

    pub fn snapshot_now(&mut self, t_ms: u64, counts: &Counts) {
        let dt = (t_ms - self.last_snap_ms).max(1) as f64 / 1000.0;
        let ca_rate = self.pending_ca_msgs as f64 / dt;
        self.last_ca_msgs += self.pending_ca_msgs;
        self.pending_ca_msgs = 0;
        self.last_snap_ms = t_ms;
        let fa = |m: &MechStats| {
            if m.reports == 0 {
                0.0
            } else {
                m.false_alarms as f64 / m.reports as f64
            }
        };
        let fa_finger = {
            let a = self.mech[ReportKind::FingerSurveil.index()];
            let b = self.mech[ReportKind::FingerUpdate.index()];
            let reports = a.reports + b.reports;
            if reports == 0 {
                0.0
            } else {
                (a.false_alarms + b.false_alarms) as f64 / reports as f64
            }
        };
        self.series.push(SecSnap {
            t_ms,
            remaining_fraction: self.remaining_fraction(),
            alive_malicious_fraction: if counts.alive == 0 {
                0.0
            } else {
                counts.alive_malicious as f64 / counts.alive as f64
            },
            honest_convictions: self.convicted_honest,
            fn_neighbor: self.neighbor_tests.fn_rate(),
            fn_finger: self.finger_tests.fn_rate(),
            fa_neighbor: fa(&self.mech[ReportKind::Neighbor.index()]),
            fa_finger,
            ca_msgs_per_sec: ca_rate,
        });
    }

    pub fn peak_ca_rate(&self) -> f64 {
        self.series
            .iter()
            .map(|s| s.ca_msgs_per_sec)
            .fold(0.0, f64::max)
    }
}

// ---------------------------------------------------------------------
// Surveillance checks.
// ---------------------------------------------------------------------

impl World {
    fn checks_active(&self, id: NodeId) -> bool {
        match self.nodes.get(&id) {
            // Attacking nodes do not run checks (they would only convict
            // their own colluders); with no behaviors enabled the malicious
            // flag changes nothing.
            Some(n) => !(n.malicious && self.cfg.behaviors.any_active()),
            None => false,
        }
    }

    pub(crate) fn on_neighbor_check_tick(&mut self, id: NodeId) {
        if !self.is_alive(id) {
            return;
        }
        let next = self.now() + self.rng.checks.gen_range(1..=self.cfg.check_max_ms);
        self.set_timer(next, Timer::NeighborCheckTick { node: id });
        if !self.checks_active(id) {
            return;
        }
        let target = {
            let node = &self.nodes[&id];
            if node.preds.is_empty() {
                return;
            }
            node.preds[self.rng.checks.gen_range(0..node.preds.len())]
        };
        let task = self.fresh_task();
        let st = CheckState {
            id: task,
            kind: CheckKind::Neighbor,
            started: self.now(),
            target,
            source: None,
            slot: 0,
            ideal: RingPoint(0),
            pred_list: None,
            probed: None,
            probe_reply: None,
            witness_node: None,
            from_lookup: None,
        };
        self.nodes.get_mut(&id).unwrap().checks.insert(task, st);
        if !self.anon_check_probe(id, task, target) {
            self.check_abandoned(id, task);
        }
    }

    pub(crate) fn on_finger_check_tick(&mut self, id: NodeId) {
        if !self.is_alive(id) {
            return;
        }
        let next = self.now() + self.cfg.check_max_ms;
        self.set_timer(next, Timer::FingerCheckTick { node: id });
        if !self.checks_active(id) {
            return;
        }
        let picked = {
            let node = &self.nodes[&id];
            if node.kept.is_empty() {
                None
            } else {
                let t = &node.kept[self.rng.checks.gen_range(0..node.kept.len())];
                let slots: Vec<(usize, NodeId, RingPoint)> = t
                    .table
                    .fingers
                    .iter()
                    .enumerate()
                    .filter_map(|(k, f)| f.node.map(|n| (k, n, f.ideal)))
                    .filter(|&(_, n, _)| n != id && n != t.table.owner)
                    .collect();
                if slots.is_empty() {
                    None
                } else {
                    let (k, cand, ideal) = slots[self.rng.checks.gen_range(0..slots.len())];
                    Some((t.clone(), k, cand, ideal))
                }
            }
        };
        let Some((source, slot, candidate, ideal)) = picked else {
            return;
        };
        let task = self.fresh_task();
        let st = CheckState {
            id: task,
            kind: CheckKind::FingerSurveil,
            started: self.now(),
            target: candidate,
            source: Some(source.table.owner),
            slot,
            ideal,
            pred_list: None,
            probed: None,
            probe_reply: None,
            witness_node: None,
            from_lookup: None,
        };
        {
            let node = self.nodes.get_mut(&id).unwrap();
            node.checks.insert(task, st);
            node.check_sources.insert(task, source);
        }
        self.check_fetch_pred_list(id, task, candidate);
    }

    /// Secure finger update: verify a finger-update lookup's result before
    /// adopting it.
    pub(crate) fn finger_update_candidate(&mut self, id: NodeId, slot: usize, candidate: NodeId) {
        if candidate == id || !self.is_alive(id) {
            return;
        }
        if !self.checks_active(id) {
            // Attacking nodes maintain fingers without self-verification.
            let ideal = self.slot_ideal(id, slot + 1);
            let node = self.nodes.get_mut(&id).unwrap();
            if let Some(fs) = node.fingers.get_mut(slot) {
                let _ = ideal;
                fs.node = Some(candidate);
            }
            return;
        }
        let ideal = self.slot_ideal(id, slot + 1);
        let task = self.fresh_task();
        let st = CheckState {
            id: task,
            kind: CheckKind::FingerUpdate,
            started: self.now(),
            target: candidate,
            source: None,
            slot,
            ideal,
            pred_list: None,
            probed: None,
            probe_reply: None,
            witness_node: None,
            from_lookup: None,
        };
        self.nodes.get_mut(&id).unwrap().checks.insert(task, st);
        self.check_fetch_pred_list(id, task, candidate);
    }

    fn check_fetch_pred_list(&mut self, id: NodeId, task: TaskId, target: NodeId) {
        let req = self.fresh_req();
        self.nodes
            .get_mut(&id)
            .unwrap()
            .pending
            .insert(req, Pending::PredListFetch { task, target });
        self.send(id, target, Msg::PredListReq { req }, BandClass::Surveillance);
        let deadline = self.now() + self.cfg.request_timeout_ms;
        self.set_timer(deadline, Timer::ReqTimeout { node: id, req });
    }

    pub(crate) fn on_pred_list_req(&mut self, src: NodeId, dst: NodeId, req: ReqId) {
        let (signed, manipulated) = self.build_pred_list_reply(dst);
        if manipulated {
            self.manip_note.insert(req, true);
        }
        self.send(
            dst,
            src,
            Msg::PredListRep { req, signed },
            BandClass::Surveillance,
        );
    }

    pub(crate) fn on_pred_list_rep(&mut self, src: NodeId, dst: NodeId, req: ReqId, signed: SignedNeighbors) {
        let manipulated = self.manip_note.remove(&req).unwrap_or(false);
        let task = {
            let Some(node) = self.nodes.get_mut(&dst) else { return };
            match node.pending.remove(&req) {
                Some(Pending::PredListFetch { task, target }) if target == src => task,
                Some(other) => {
                    node.pending.insert(req, other);
                    return;
                }
                None => return,
            }
        };
        if signed.list.owner != src
            || signed.list.dir != Direction::Pred
            || !signed.verifies()
            || signed.list.entries.is_empty()
        {
            self.check_abandoned(dst, task);
            return;
        }
        // Freshness: replayed stale lists are worthless as a defense.
        if signed.sig.ts + 2 * self.cfg.request_timeout_ms < self.now() {
            self.check_abandoned(dst, task);
            return;
        }
        {
            let node = self.nodes.get_mut(&dst).unwrap();
            let Some(st) = node.checks.get_mut(&task) else { return };
            st.pred_list = Some(signed);
            if manipulated {
                node.check_manip.insert(task);
            }
        }
        // Wait a short random period before the anonymous probe so the two
        // contacts cannot be trivially correlated by the candidate.
        let delay = self.rng.checks.gen_range(1_000..=10_000);
        self.set_timer(
            self.now() + delay,
            Timer::CheckProbeDelay { node: dst, task },
        );
    }

    pub(crate) fn on_check_probe_delay(&mut self, id: NodeId, task: TaskId) {
        let probed = {
            let Some(node) = self.nodes.get_mut(&id) else { return };
            let Some(st) = node.checks.get_mut(&task) else { return };
            let Some(pl) = &st.pred_list else {
                node.checks.remove(&task);
                return;
            };
            let pick = pl.list.entries[self.rng.checks.gen_range(0..pl.list.entries.len())];
            st.probed = Some(pick);
            pick
        };
        if !self.anon_check_probe(id, task, probed) {
            self.check_abandoned(id, task);
        }
    }

    /// Anonymous table probe came back: evaluate the check.
    pub(crate) fn check_probe_reply(
        &mut self,
        id: NodeId,
        task: TaskId,
        from: NodeId,
        table: SignedTable,
        manipulated: bool,
    ) {
        if !table.verifies() || table.table.owner != from {
            self.check_abandoned(id, task);
            return;
        }
        // Reject replays: replies must be freshly signed.
        if table.sig.ts + 2 * self.cfg.request_timeout_ms < self.now() {
            self.check_abandoned(id, task);
            return;
        }
        let kind = {
            let Some(node) = self.nodes.get(&id) else { return };
            match node.checks.get(&task) {
                Some(st) => st.kind,
                None => return,
            }
        };
        match kind {
            CheckKind::Neighbor => self.neighbor_check_evaluate(id, task, from, table, manipulated),
            CheckKind::FingerSurveil | CheckKind::FingerUpdate => {
                self.finger_check_evaluate(id, task, from, table, manipulated)
            }
        }
    }

    fn neighbor_check_evaluate(
        &mut self,
        id: NodeId,
        task: TaskId,
        from: NodeId,
        table: SignedTable,
        manipulated: bool,
    ) {
        let Some(node) = self.nodes.get_mut(&id) else { return };
        let Some(st) = node.checks.remove(&task) else { return };
        if st.target != from {
            return;
        }
        // Inclusion is only expected when, by current membership, we rank
        // comfortably inside the target's successor window; the margin of
        // one absorbs boundary churn.
        let inside = self.alive.count_between(&self.ring, from, id);
        let expected = inside + 1 < self.cfg.neighbors;
        // A check only tests the target when inclusion was expected; a
        // manipulated reply to a vacuous probe proves nothing either way.
        let tested = self.is_malicious(from) && manipulated && expected;
        if tested {
            self.metrics.neighbor_tests.tested += 1;
        }
        let excluded = !table.table.succs.contains(&id);
        let mut convicted_subject = false;
        if expected && excluded {
            let report = MisbehaviorReport {
                kind: ReportKind::Neighbor,
                reporter: id,
                accused: from,
                evidence: Evidence::Exclusion {
                    artifact: ProofArtifact::Table(table),
                    victim: id,
                },
                t: self.now(),
            };
            let verdict = self.ca_adjudicate(report);
            convicted_subject = verdict.as_ref().and_then(|v| v.convicted) == Some(from)
                || self.ca.revoked.contains(&from);
        }
        if tested && !convicted_subject {
            self.metrics.neighbor_tests.missed += 1;
        }
    }

    fn finger_check_evaluate(
        &mut self,
        id: NodeId,
        task: TaskId,
        from: NodeId,
        table: SignedTable,
        probe_manipulated: bool,
    ) {
        let (st, source, pred_manip) = {
            let Some(node) = self.nodes.get_mut(&id) else { return };
            let Some(st) = node.checks.get_mut(&task) else { return };
            if st.probed != Some(from) {
                return;
            }
            st.probe_reply = Some(table.clone());
            let st = st.clone();
            let source = node.check_sources.get(&task).cloned();
            let pred_manip = node.check_manip.contains(&task);
            (st, source, pred_manip)
        };
        let candidate = st.target;
        let ideal = st.ideal;
        let pl = st.pred_list.as_ref().expect("pred list fetched");
        let _ = pred_manip;
        let tested = self.is_malicious(candidate);
        if tested {
            self.metrics.finger_tests.tested += 1;
        }
        // Witness detection: a node in the probed predecessor's successor
        // list that sits closer to the ideal than the candidate, between the
        // probed node and the candidate, yet missing from the candidate's
        // claimed predecessors.
        let ring = self.ring;
        let d_cand = ring.dist_cw(ideal, candidate);
        let witness = table
            .table
            .succs
            .iter()
            .copied()
            .filter(|&w| w != candidate && w != from)
            .filter(|&w| ring.dist_cw(ideal, w) < d_cand)
            .filter(|&w| ring.between_open(from, w, candidate))
            .filter(|&w| !pl.list.entries.contains(&w))
            .min_by_key(|&w| ring.dist_cw(ideal, w));
        match witness {
            Some(w) => {
                // Confirm the witness has been a member long enough that an
                // honest candidate must have known it; then report.
                {
                    let node = self.nodes.get_mut(&id).unwrap();
                    if let Some(stm) = node.checks.get_mut(&task) {
                        stm.witness_node = Some(w);
                    }
                }
                let _ = source;
                self.check_fetch_age(id, task, w);
            }
            None => {
                // Check passed.
                self.finish_finger_check(id, task, None, probe_manipulated, tested);
            }
        }
    }

    fn check_fetch_age(&mut self, id: NodeId, task: TaskId, w: NodeId) {
        let req = self.fresh_req();
        self.nodes
            .get_mut(&id)
            .unwrap()
            .pending
            .insert(req, Pending::AgeFetch { task, target: w });
        self.send(id, w, Msg::AgeReq { req }, BandClass::Surveillance);
        let deadline = self.now() + self.cfg.request_timeout_ms;
        self.set_timer(deadline, Timer::ReqTimeout { node: id, req });
    }

    pub(crate) fn on_age_req(&mut self, src: NodeId, dst: NodeId, req: ReqId) {
        let proof = {
            let Some(node) = self.nodes.get(&dst) else { return };
            AgeProof::new(dst, node.joined_at, self.now())
        };
        self.send(dst, src, Msg::AgeRep { req, proof }, BandClass::Surveillance);
    }

    pub(crate) fn on_age_rep(&mut self, src: NodeId, dst: NodeId, req: ReqId, proof: AgeProof) {
        let task = {
            let Some(node) = self.nodes.get_mut(&dst) else { return };
            match node.pending.remove(&req) {
                Some(Pending::AgeFetch { task, target }) if target == src => task,
                Some(other) => {
                    node.pending.insert(req, other);
                    return;
                }
                None => return,
            }
        };
        if !proof.verifies() || proof.node != src {
            self.check_abandoned(dst, task);
            return;
        }
        let mature = proof.member_since + self.cfg.report_age_min_ms <= self.now();
        let tested = {
            let node = &self.nodes[&dst];
            node.checks
                .get(&task)
                .map(|st| self.is_malicious(st.target))
                .unwrap_or(false)
        };
        if mature {
            self.file_finger_report(dst, task, proof, tested);
        } else {
            // Too young: plausibly honest staleness, no report.
            self.finish_finger_check(dst, task, None, false, tested);
        }
    }

    fn file_finger_report(&mut self, id: NodeId, task: TaskId, age: AgeProof, tested: bool) {
        let (st, source) = {
            let Some(node) = self.nodes.get(&id) else { return };
            let Some(st) = node.checks.get(&task) else { return };
            (st.clone(), node.check_sources.get(&task).cloned())
        };
        let kind = match st.kind {
            CheckKind::FingerSurveil => ReportKind::FingerSurveil,
            CheckKind::FingerUpdate => ReportKind::FingerUpdate,
            CheckKind::Neighbor => unreachable!("finger report from neighbor check"),
        };
        let accused = source
            .as_ref()
            .map(|s| s.table.owner)
            .unwrap_or(st.target);
        let report = MisbehaviorReport {
            kind,
            reporter: id,
            accused,
            evidence: Evidence::Finger {
                source,
                ideal: st.ideal,
                candidate: st.target,
                pred_list: st.pred_list.clone().expect("pred list present"),
                probe: st.probe_reply.clone().expect("probe reply present"),
                witness: age.node,
                witness_age: age,
            },
            t: self.now(),
        };
        let verdict = self.ca_adjudicate(report);
        let convicted_malicious = verdict
            .as_ref()
            .and_then(|v| v.convicted)
            .map(|c| !self.is_alive(c))
            .unwrap_or(false);
        self.finish_finger_check(id, task, Some(convicted_malicious), false, tested);
    }

    /// Close out a finger check: account the test, and for secure finger
    /// update adopt the candidate only when the checks passed.
    fn finish_finger_check(
        &mut self,
        id: NodeId,
        task: TaskId,
        reported_conviction: Option<bool>,
        _probe_manipulated: bool,
        tested: bool,
    ) {
        let Some(node) = self.nodes.get_mut(&id) else { return };
        let Some(st) = node.checks.remove(&task) else { return };
        node.check_sources.remove(&task);
        node.check_manip.remove(&task);
        if tested && reported_conviction != Some(true) {
            self.metrics.finger_tests.missed += 1;
        }
        if st.kind == CheckKind::FingerUpdate {
            let passed = st.witness_node.is_none();
            if passed {
                if let Some(node) = self.nodes.get_mut(&id) {
                    if let Some(fs) = node.fingers.get_mut(st.slot) {
                        fs.node = Some(st.target);
                    }
                }
            }
            // On failure the old finger is retained.
        }
    }

    /// A check that lost a message is abandoned; the periodic tick will try
    /// again later.
    pub(crate) fn check_abandoned(&mut self, id: NodeId, task: TaskId) {
        if let Some(node) = self.nodes.get_mut(&id) {
            node.checks.remove(&task);
            node.check_sources.remove(&task);
            node.check_manip.remove(&task);
        }
    }

    // ---------------------------------------------------------------
    // Selective-DoS reporting (initiator side).
    // ---------------------------------------------------------------

    /// A query reply missed its deadline. If every relay (and the target)
    /// is still alive per their recent stabilization activity, somebody
    /// dropped on purpose: report with the relay identities.
    pub(crate) fn report_missing_reply(&mut self, id: NodeId, flow: FlowId, origin: &FlowOrigin) {
        let all_alive = origin
            .relays
            .iter()
            .chain(std::iter::once(&origin.target))
            .all(|&r| self.is_alive(r));
        if !all_alive {
            return;
        }
        let report = MisbehaviorReport {
            kind: ReportKind::Dos,
            reporter: id,
            accused: origin.relays[0],
            evidence: Evidence::Dos {
                flow,
                relays: origin.relays.clone(),
                target: origin.target,
            },
            t: self.now(),
        };
        let _ = self.ca_adjudicate(report);
    }

    // ---------------------------------------------------------------
    // CA adjudication.
    // ---------------------------------------------------------------

    pub(crate) fn ca_adjudicate(&mut self, report: MisbehaviorReport) -> Option<Verdict> {
        let mut msgs: u64 = 1; // the report itself
        let now = self.now();
        // Duplicate suppression: an accusation already settled (or settled
        // moments ago) is dropped at ingress.
        let dup = self.ca.revoked.contains(&report.accused)
            || self
                .ca
                .recent
                .get(&report.accused)
                .map(|&t| t + 5_000 > now)
                .unwrap_or(false);
        self.ca.msgs_total += msgs;
        self.metrics.note_ca_msgs(msgs);
        if dup {
            return None;
        }
        self.ca.recent.insert(report.accused, now);
        if self.ca.recent.len() > 4096 {
            let k = *self.ca.recent.keys().next().unwrap();
            self.ca.recent.remove(&k);
        }
        msgs = 0;
        let kind = report.kind;
        self.metrics.mech[kind.index()].reports += 1;
        let verdict = match &report.evidence {
            Evidence::Exclusion { artifact, victim } => {
                self.adjudicate_exclusion(artifact.clone(), *victim, Direction::Succ, &mut msgs)
            }
            Evidence::Finger {
                pred_list,
                probe,
                witness,
                witness_age,
                candidate,
                ideal,
                ..
            } => self.adjudicate_finger(
                pred_list.clone(),
                probe.clone(),
                *witness,
                *witness_age,
                *candidate,
                *ideal,
                &mut msgs,
            ),
            Evidence::Dos { flow, relays, target } => {
                self.adjudicate_dos(report.reporter, *flow, relays.clone(), *target, &mut msgs)
            }
        };
        self.ca.msgs_total += msgs;
        self.metrics.note_ca_msgs(msgs);
        let verdict = Verdict {
            messages_processed: msgs + 1,
            ..verdict
        };
        self.ca.log.push(VerdictRecord {
            kind,
            reporter: report.reporter,
            accused: report.accused,
            convicted: verdict.convicted,
            convicted_was_malicious: verdict
                .convicted
                .map(|z| self.is_malicious(z))
                .unwrap_or(false),
            chain_len: verdict.chain.len(),
            messages: verdict.messages_processed,
            t: now,
        });
        match verdict.convicted {
            Some(z) => {
                let malicious = self.is_malicious(z);
                if malicious {
                    self.metrics.convicted_malicious += 1;
                } else {
                    self.metrics.convicted_honest += 1;
                }
                self.metrics.mech[kind.index()].convictions += 1;
                self.revoke_and_remove(z);
            }
            None => {
                self.metrics.mech[kind.index()].false_alarms += 1;
            }
        }
        Some(verdict)
    }

    /// The evidence-chain walk over signed neighbor lists in one direction.
    ///
    /// Per link, the signer must produce an archived proof whose
    /// recomputation yields the claimed list, allowing a dead prefix to have
    /// been dropped (rule A). Claimed drops are then re-checked: a "dropped"
    /// node that is alive right now and had been a member since well before
    /// the artifact was signed exposes the drop as a lie (rule B). A
    /// consistent link shifts suspicion to the proof's signer. The walk ends
    /// without conviction once an artifact includes the victim — the
    /// exclusion is then explained by honest truncation upstream — or when
    /// the depth cap is reached.
    fn adjudicate_exclusion(
        &mut self,
        evidence: ProofArtifact,
        victim: NodeId,
        dir: Direction,
        msgs: &mut u64,
    ) -> Verdict {
        let cap = self.cfg.neighbors * self.cfg.proof_queue;
        let grace = self.cfg.maturity_grace_ms;
        let mut chain = Vec::new();
        let mut artifact = evidence;
        for _ in 0..cap {
            let z = artifact.signer();
            chain.push(z);
            if !artifact.verifies() {
                return Verdict {
                    convicted: Some(z),
                    chain,
                    messages_processed: 0,
                };
            }
            if !self.is_alive(z) {
                // Accused (or chain member) gone: nothing adjudicable.
                return Verdict {
                    convicted: None,
                    chain,
                    messages_processed: 0,
                };
            }
            // The complaint is explained once the artifact includes the
            // victim: exclusion arose from truncation, not manipulation.
            if artifact.entries(dir).contains(&victim) {
                return Verdict {
                    convicted: None,
                    chain,
                    messages_processed: 0,
                };
            }
            // Rule A: fetch the signer's archived proofs and find the one
            // that recomputes to the claim, preferring an exact match over
            // head-dropped ones.
            *msgs += 2;
            let ts = artifact.ts();
            let matched = {
                let node = &self.nodes[&z];
                let claimed = artifact.entries(dir).to_vec();
                let mut best: Option<(usize, SignedNeighbors, Vec<NodeId>)> = None;
                for p in node.proofs(dir).iter().rev() {
                    if !p.verifies() {
                        continue;
                    }
                    let pa = ProofArtifact::List(p.clone());
                    if let Some(k) =
                        consistent_with(&self.ring, z, &claimed, &pa, dir, self.cfg.neighbors)
                    {
                        let full = crate::overlay::recompute_list(
                            &self.ring,
                            z,
                            &pa,
                            dir,
                            self.cfg.neighbors,
                        );
                        let dropped = full[..k].to_vec();
                        if best.as_ref().map(|(bk, _, _)| k < *bk).unwrap_or(true) {
                            best = Some((k, p.clone(), dropped));
                        }
                        if k == 0 {
                            break;
                        }
                    }
                }
                best
            };
            match matched {
                Some((k, proof, dropped)) => {
                    if k > 0 {
                        // Rule B: dropped heads must really be gone.
                        *msgs += 2;
                        let lied = dropped.iter().any(|&w| {
                            self.nodes
                                .get(&w)
                                .map(|n| n.joined_at + grace <= ts)
                                .unwrap_or(false)
                        });
                        if lied {
                            return Verdict {
                                convicted: Some(z),
                                chain,
                                messages_processed: 0,
                            };
                        }
                    }
                    artifact = ProofArtifact::List(proof);
                }
                None => {
                    return Verdict {
                        convicted: Some(z),
                        chain,
                        messages_processed: 0,
                    };
                }
            }
        }
        Verdict {
            convicted: None,
            chain,
            messages_processed: 0,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn adjudicate_finger(
        &mut self,
        pred_list: SignedNeighbors,
        probe: SignedTable,
        witness: NodeId,
        witness_age: AgeProof,
        candidate: NodeId,
        ideal: RingPoint,
        msgs: &mut u64,
    ) -> Verdict {
        let ring = self.ring;
        // Re-verify the detection predicate from the artifacts alone.
        let sound = pred_list.verifies()
            && probe.verifies()
            && witness_age.verifies()
            && witness_age.node == witness
            && pred_list.list.owner == candidate
            && pred_list.list.entries.contains(&probe.table.owner)
            && probe.table.succs.contains(&witness)
            && ring.dist_cw(ideal, witness) < ring.dist_cw(ideal, candidate)
            && ring.between_open(probe.table.owner, witness, candidate)
            && !pred_list.list.entries.contains(&witness);
        if !sound {
            return Verdict {
                convicted: None,
                chain: vec![],
                messages_processed: 0,
            };
        }
        // The witness must have been a member well before the candidate
        // signed its predecessor list, and must still be reachable.
        *msgs += 2;
        let mature = witness_age.member_since + self.cfg.maturity_grace_ms <= pred_list.sig.ts;
        if !mature || !self.is_alive(witness) {
            return Verdict {
                convicted: None,
                chain: vec![],
                messages_processed: 0,
            };
        }
        // First scrutinize the probed predecessor's own successor claim; a
        // colluder that exposed the witness while lying elsewhere falls
        // here.
        let v1 = self.adjudicate_exclusion(
            ProofArtifact::Table(probe.clone()),
            witness,
            Direction::Succ,
            msgs,
        );
        if v1.convicted.is_some() {
            return v1;
        }
        // Then the candidate's predecessor list: an honest candidate's list
        // recomputes from its archived predecessor-side proofs and never
        // skips the mature witness; fabricated all-colluder lists die on
        // the positional rule at the first link.
        self.adjudicate_exclusion(
            ProofArtifact::List(pred_list),
            witness,
            Direction::Pred,
            msgs,
        )
    }

    fn adjudicate_dos(
        &mut self,
        reporter: NodeId,
        flow: FlowId,
        relays: Vec<NodeId>,
        target: NodeId,
        msgs: &mut u64,
    ) -> Verdict {
        // Liveness screen (stabilization recency stands in for it): all
        // parties must be up, otherwise the loss was churn.
        *msgs += 2;
        let mut chain = vec![reporter];
        chain.extend(relays.iter().copied());
        if !relays
            .iter()
            .chain(std::iter::once(&target))
            .all(|&r| self.is_alive(r))
        {
            return Verdict {
                convicted: None,
                chain,
                messages_processed: 0,
            };
        }
        // Walk the forward legs: leg k is the obligation of the node at
        // position k-1 (the reporter for k = 0).
        let senders: Vec<NodeId> = std::iter::once(reporter).chain(relays.iter().copied()).collect();
        let receivers: Vec<NodeId> = relays.iter().copied().chain(std::iter::once(target)).collect();
        for (k, (&sender, &receiver)) in senders.iter().zip(receivers.iter()).enumerate() {
            *msgs += 2;
            let ev = self
                .nodes
                .get(&sender)
                .and_then(|n| n.leg_evidence.get(&(flow, k as u8)))
                .cloned();
            match ev {
                Some(ev) if ev.receipt.is_some() => continue,
                Some(ev) if !ev.statements.is_empty() => {
                    // Delivery attempts failed against a live receiver:
                    // the receiver is withholding receipts.
                    return Verdict {
                        convicted: Some(receiver),
                        chain,
                        messages_processed: 0,
                    };
                }
                _ => {
                    if k == 0 {
                        // The reporter indicts itself only in theory; treat
                        // missing initiator evidence as inconclusive.
                        return Verdict {
                            convicted: None,
                            chain,
                            messages_processed: 0,
                        };
                    }
                    return Verdict {
                        convicted: Some(sender),
                        chain,
                        messages_processed: 0,
                    };
                }
            }
        }
        Verdict {
            convicted: None,
            chain,
            messages_processed: 0,
        }
    }
}

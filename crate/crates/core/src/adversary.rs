//! Byzantine behaviors for the colluding fraction.
//!
//! Malicious nodes participate honestly in everything not covered by an
//! enabled behavior, which maximizes stealth. Substituted entries are always
//! the nearest colluders to the honest entry they replace, keeping
//! manipulated lists positionally plausible. All lies are self-signed;
//! nothing here can mint a signature for an honest node.

use crate::ring::{NodeId, RingPoint};
use crate::sig::{Direction, FingerSlot, NeighborList, RoutingTable, SignedNeighbors, SignedTable};
use crate::world::{TableScope, World};
use rand::Rng;
use std::collections::BTreeSet;

// Note on context: a queried node cannot tell a user lookup from a
// surveillance probe or a walk hop — anonymous probes arrive via exit
// relays and direct lookups via their requester, but the request content is
// identical. Behavior rates therefore apply uniformly to all table queries:
// that indistinguishability is exactly what the surveillance machinery
// relies on.

impl World {
    /// The honest routing table a node would serve right now.
    pub fn honest_table(&self, id: NodeId, scope: TableScope) -> RoutingTable {
        let node = &self.nodes[&id];
        let (succs, preds) = match scope {
            TableScope::Full => (node.succs.clone(), node.preds.clone()),
            TableScope::FingersOnly => (Vec::new(), Vec::new()),
        };
        RoutingTable {
            owner: id,
            fingers: node.fingers.clone(),
            succs,
            preds,
        }
    }

    /// Swap honest entries for the clockwise-nearest colluders, preserving
    /// positions and keeping entries distinct.
    fn swap_for_colluders(&mut self, owner: NodeId, entries: &[NodeId]) -> Vec<NodeId> {
        let ring = self.ring;
        let mut used: BTreeSet<NodeId> = entries
            .iter()
            .copied()
            .filter(|&e| self.is_malicious(e))
            .collect();
        used.insert(owner);
        entries
            .iter()
            .map(|&e| {
                if self.is_malicious(e) {
                    return e;
                }
                match self.intel.nearest_colluder(&ring, RingPoint::from(e), &used) {
                    Some(c) => {
                        used.insert(c);
                        c
                    }
                    None => e,
                }
            })
            .collect()
    }

    /// Successor-list manipulation for lookup-style queries: every honest
    /// entry replaced by a colluder so a colluder is taken as the result.
    pub(crate) fn bias_successor_list(&mut self, m: NodeId, honest: &[NodeId]) -> Vec<NodeId> {
        debug_assert!(self.is_malicious(m));
        self.swap_for_colluders(m, honest)
    }

    /// Fingertable manipulation: each honest finger swapped for the
    /// clockwise-nearest colluder to its ideal position.
    pub(crate) fn misdirect_fingers(&mut self, m: NodeId, honest: &[FingerSlot]) -> Vec<FingerSlot> {
        debug_assert!(self.is_malicious(m));
        let ring = self.ring;
        let empty = BTreeSet::new();
        honest
            .iter()
            .map(|slot| {
                let keep = match slot.node {
                    Some(n) => self.is_malicious(n),
                    None => true,
                };
                if keep {
                    *slot
                } else {
                    let sub = self.intel.nearest_colluder(&ring, slot.ideal, &empty);
                    FingerSlot {
                        ideal: slot.ideal,
                        node: sub.or(slot.node),
                    }
                }
            })
            .collect()
    }

    /// Stabilization pollution: with probability `succ_manip_rate`, answer a
    /// neighbor's stabilization request with a list whose nearest honest
    /// entry is silently excluded, so the requester evicts the victim from
    /// its own view.
    pub(crate) fn pollute_during_stabilization(
        &mut self,
        m: NodeId,
        honest: &[NodeId],
        _dir: Direction,
    ) -> Vec<NodeId> {
        let _ = m;
        if self.rng.adversary.gen_range(0.0..1.0) >= self.cfg.succ_manip_rate {
            return honest.to_vec();
        }
        let victim = honest.iter().position(|&e| !self.is_malicious(e));
        match victim {
            Some(idx) => {
                let mut out = honest.to_vec();
                out.remove(idx);
                out
            }
            None => honest.to_vec(),
        }
    }

    /// All-colluder predecessor list served when a manipulated finger is
    /// probed: coordinated through shared knowledge so later colluder
    /// answers stay consistent.
    pub(crate) fn consistent_collusion_view(&mut self, m: NodeId) -> Vec<NodeId> {
        let cap = self.cfg.neighbors;
        let mut out = Vec::with_capacity(cap);
        let mut exclude: BTreeSet<NodeId> = BTreeSet::new();
        exclude.insert(m);
        let mut at = RingPoint::from(m);
        for _ in 0..cap {
            match self.intel.nearest_colluder_ccw(at, &exclude) {
                Some(c) => {
                    exclude.insert(c);
                    at = RingPoint::from(c);
                    out.push(c);
                }
                None => break,
            }
        }
        out
    }

    /// Build the signed table a node serves for a table query, applying
    /// whatever behaviors are enabled. Returns the table and whether it was
    /// manipulated (simulation-side accounting only).
    pub(crate) fn build_table_reply(
        &mut self,
        responder: NodeId,
        scope: TableScope,
    ) -> (SignedTable, bool) {
        let now = self.now();
        let honest = self.honest_table(responder, scope);
        let node = &self.nodes[&responder];
        if !node.malicious || !self.cfg.behaviors.any_active() {
            return (SignedTable::new(honest, now), false);
        }
        let behaviors = self.cfg.behaviors;
        let mut table = honest;
        let mut manipulated = false;

        // Successor-list attack surface. Under the bias attack every reply
        // is manipulated at the attack rate; colluders backing fake fingers
        // lie at the checked-predecessor rate instead.
        let succ_rate = if behaviors.bias {
            Some(self.cfg.attack_rate)
        } else if behaviors.collusion_support() {
            Some(self.cfg.succ_manip_rate)
        } else {
            None
        };
        if scope == TableScope::Full {
            if let Some(rate) = succ_rate {
                if self.rng.adversary.gen_range(0.0..1.0) < rate {
                    table.succs = self.bias_successor_list(responder, &table.succs);
                    table.preds = self.consistent_collusion_view(responder);
                    manipulated = true;
                }
            }
        }

        // Fingertable attack surface.
        let finger_hit = (behaviors.misdirect || behaviors.pollute_fingers)
            && self.rng.adversary.gen_range(0.0..1.0) < self.cfg.attack_rate;
        if finger_hit {
            table.fingers = self.misdirect_fingers(responder, &table.fingers);
            manipulated = true;
        }

        (SignedTable::new(table, now), manipulated)
    }

    /// Signed predecessor list served on a direct predecessor-list request.
    /// Colluders under finger-collusion always fabricate an all-colluder
    /// list; anyone else answers truthfully.
    pub(crate) fn build_pred_list_reply(&mut self, responder: NodeId) -> (SignedNeighbors, bool) {
        let now = self.now();
        let node = &self.nodes[&responder];
        let honest = node.preds.clone();
        let hint = node.succs.first().copied();
        let malicious = node.malicious;
        let (entries, manipulated) =
            if malicious && self.cfg.behaviors.collusion_support() {
                (self.consistent_collusion_view(responder), true)
            } else {
                (honest, false)
            };
        (
            SignedNeighbors::new(
                NeighborList {
                    owner: responder,
                    dir: Direction::Pred,
                    hint,
                    entries,
                },
                now,
            ),
            manipulated,
        )
    }

    /// Selective denial of service: a malicious relay drops a message it
    /// should forward exactly when the path is not fully compromisable,
    /// i.e. when the entry relay next to the initiator is honest.
    pub(crate) fn selective_drop(&mut self, relay: NodeId, flow: crate::world::FlowId) -> bool {
        if !self.cfg.behaviors.selective_dos || !self.is_malicious(relay) {
            return false;
        }
        if self.intel.flows_mal_entry.contains(&flow) {
            return false; // fully observable path: let it run
        }
        self.rng.adversary.gen_range(0.0..1.0) < self.cfg.attack_rate
    }
}

//! Signed protocol artifacts.
//!
//! Real deployments would use ECDSA over routing state; the simulation only
//! needs unforgeability, so a tag is valid exactly when its digest matches a
//! recomputation over the canonical payload bytes. Handlers only ever sign
//! payloads as themselves, which gives the unforgeable-oracle property:
//! nothing in the codebase can mint a tag for another signer without
//! producing a digest mismatch on verification.

use crate::ring::{NodeId, RingPoint};
use sha2::{Digest, Sha256};

/// Signature tag attached to every exchanged routing artifact.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SigTag {
    pub signer: NodeId,
    pub digest: u64,
    /// Virtual-time timestamp at signing.
    pub ts: u64,
}

fn digest_bytes(signer: NodeId, ts: u64, payload: &[u8]) -> u64 {
    let mut h = Sha256::new();
    h.update(signer.0.to_le_bytes());
    h.update(ts.to_le_bytes());
    h.update(payload);
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().unwrap())
}

pub fn sign(signer: NodeId, ts: u64, payload: &[u8]) -> SigTag {
    SigTag {
        signer,
        ts,
        digest: digest_bytes(signer, ts, payload),
    }
}

pub fn verify(tag: &SigTag, payload: &[u8]) -> bool {
    tag.digest == digest_bytes(tag.signer, tag.ts, payload)
}

/// Which neighbor direction a list covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    /// Clockwise: successor list.
    Succ,
    /// Counter-clockwise: predecessor list.
    Pred,
}

impl Direction {
    pub fn flip(self) -> Direction {
        match self {
            Direction::Succ => Direction::Pred,
            Direction::Pred => Direction::Succ,
        }
    }
}

/// A neighbor list as exchanged during stabilization: the owner's view of
/// its `S` nearest nodes in one direction, plus a hint naming the node the
/// owner believes sits directly on its other side (used to discover joins).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborList {
    pub owner: NodeId,
    pub dir: Direction,
    pub hint: Option<NodeId>,
    pub entries: Vec<NodeId>,
}

impl NeighborList {
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.entries.len() * 8);
        out.extend(self.owner.0.to_le_bytes());
        out.push(match self.dir {
            Direction::Succ => b's',
            Direction::Pred => b'p',
        });
        match self.hint {
            Some(h) => {
                out.push(1);
                out.extend(h.0.to_le_bytes());
            }
            None => out.push(0),
        }
        for e in &self.entries {
            out.extend(e.0.to_le_bytes());
        }
        out
    }
}

/// A signed neighbor list: the unit archived in proof queues and carried as
/// evidence in misbehavior reports.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SignedNeighbors {
    pub list: NeighborList,
    pub sig: SigTag,
}

impl SignedNeighbors {
    pub fn new(list: NeighborList, ts: u64) -> Self {
        let sig = sign(list.owner, ts, &list.canonical_bytes());
        SignedNeighbors { list, sig }
    }

    pub fn verifies(&self) -> bool {
        self.sig.signer == self.list.owner && verify(&self.sig, &self.list.canonical_bytes())
    }
}

/// One finger slot: the ideal position it targets and the node currently
/// installed for it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FingerSlot {
    pub ideal: RingPoint,
    pub node: Option<NodeId>,
}

/// The full routing table: fingers plus both neighbor lists. This is the
/// unit returned to table queries during lookups and surveillance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoutingTable {
    pub owner: NodeId,
    pub fingers: Vec<FingerSlot>,
    pub succs: Vec<NodeId>,
    pub preds: Vec<NodeId>,
}

impl RoutingTable {
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.fingers.len() * 17 + (self.succs.len() + self.preds.len()) * 8);
        out.extend(self.owner.0.to_le_bytes());
        for f in &self.fingers {
            out.extend(f.ideal.0.to_le_bytes());
            match f.node {
                Some(n) => {
                    out.push(1);
                    out.extend(n.0.to_le_bytes());
                }
                None => out.push(0),
            }
        }
        out.push(b'/');
        for e in &self.succs {
            out.extend(e.0.to_le_bytes());
        }
        out.push(b'/');
        for e in &self.preds {
            out.extend(e.0.to_le_bytes());
        }
        out
    }

    /// Data items held (fingers plus both neighbor lists), for bandwidth
    /// accounting.
    pub fn item_count(&self) -> usize {
        self.fingers.len() + self.succs.len() + self.preds.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SignedTable {
    pub table: RoutingTable,
    pub sig: SigTag,
}

impl SignedTable {
    pub fn new(table: RoutingTable, ts: u64) -> Self {
        let sig = sign(table.owner, ts, &table.canonical_bytes());
        SignedTable { table, sig }
    }

    pub fn verifies(&self) -> bool {
        self.sig.signer == self.table.owner && verify(&self.sig, &self.table.canonical_bytes())
    }

    /// The successor-list portion viewed as a signed neighbor list, reusing
    /// the table's signature. Evidence extracted from table replies keeps the
    /// whole table so the signature stays checkable.
    pub fn succ_view(&self) -> NeighborList {
        NeighborList {
            owner: self.table.owner,
            dir: Direction::Succ,
            hint: None,
            entries: self.table.succs.clone(),
        }
    }
}

/// Proof of membership age: the holder has been participating since
/// `member_since`. In the simulation this stands in for a node's oldest
/// archived stabilization proof.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AgeProof {
    pub node: NodeId,
    pub member_since: u64,
    pub sig: SigTag,
}

impl AgeProof {
    pub fn new(node: NodeId, member_since: u64, ts: u64) -> Self {
        let sig = sign(node, ts, &member_since.to_le_bytes());
        AgeProof {
            node,
            member_since,
            sig,
        }
    }

    pub fn verifies(&self) -> bool {
        self.sig.signer == self.node && verify(&self.sig, &self.member_since.to_le_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_list() -> NeighborList {
        NeighborList {
            owner: NodeId(42),
            dir: Direction::Succ,
            hint: Some(NodeId(50)),
            entries: vec![NodeId(50), NodeId(61), NodeId(70)],
        }
    }

    #[test]
    fn intact_artifacts_verify() {
        let signed = SignedNeighbors::new(sample_list(), 1234);
        assert!(signed.verifies());
    }

    #[test]
    fn any_mutation_breaks_verification() {
        let signed = SignedNeighbors::new(sample_list(), 1234);

        let mut dropped = signed.clone();
        dropped.list.entries.remove(1);
        assert!(!dropped.verifies());

        let mut swapped = signed.clone();
        swapped.list.entries[0] = NodeId(51);
        assert!(!swapped.verifies());

        let mut reowned = signed.clone();
        reowned.list.owner = NodeId(43);
        assert!(!reowned.verifies());

        let mut restamped = signed;
        restamped.sig.ts += 1;
        assert!(!restamped.verifies());
    }
}

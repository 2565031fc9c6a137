//! Identifier-circle arithmetic.
//!
//! Every node lives at a point on the circle `[0, 2^m)`. All distance math
//! is clockwise modular arithmetic; the rest of the crate never touches raw
//! id math directly.

use std::fmt;

/// A node identity. Ids double as ring positions and are unique per
/// incarnation: a node that churns out and rejoins comes back under a
/// fresh id.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub u64);

/// A bare position on the identifier circle (not necessarily a node).
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RingPoint(pub u64);

impl fmt::Debug for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

impl fmt::Debug for RingPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}", self.0)
    }
}

impl From<NodeId> for RingPoint {
    fn from(n: NodeId) -> Self {
        RingPoint(n.0)
    }
}

/// The identifier circle `[0, 2^m)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ring {
    bits: u32,
}

impl Ring {
    pub fn new(bits: u32) -> Self {
        assert!(bits >= 1 && bits <= 63, "ring width must be in 1..=63 bits");
        Ring { bits }
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    /// Number of points on the circle.
    pub fn size(&self) -> u64 {
        1u64 << self.bits
    }

    pub fn wrap(&self, x: u64) -> u64 {
        x & (self.size() - 1)
    }

    /// Clockwise distance from `a` to `b`: `(b - a) mod 2^m`.
    pub fn dist_cw(&self, a: impl Into<RingPoint>, b: impl Into<RingPoint>) -> u64 {
        let (a, b) = (a.into().0, b.into().0);
        self.wrap(b.wrapping_sub(a))
    }

    /// Point reached by moving `delta` clockwise from `a`.
    pub fn add(&self, a: impl Into<RingPoint>, delta: u64) -> RingPoint {
        RingPoint(self.wrap(a.into().0.wrapping_add(delta)))
    }

    /// True iff `x` lies strictly inside the clockwise open interval `(a, b)`.
    /// As in Chord, `a == b` denotes the full circle (every point except `a`).
    pub fn between_open(
        &self,
        a: impl Into<RingPoint>,
        x: impl Into<RingPoint>,
        b: impl Into<RingPoint>,
    ) -> bool {
        let (a, x, b) = (a.into(), x.into(), b.into());
        let d_ax = self.dist_cw(a, x);
        if a == b {
            return d_ax > 0;
        }
        d_ax > 0 && d_ax < self.dist_cw(a, b)
    }

    /// True iff `x` lies in the clockwise half-open interval `(a, b]`.
    /// `a == b` denotes the full circle: every point except `a`, plus `b`.
    pub fn in_open_closed(
        &self,
        a: impl Into<RingPoint>,
        x: impl Into<RingPoint>,
        b: impl Into<RingPoint>,
    ) -> bool {
        let (a, x, b) = (a.into(), x.into(), b.into());
        if a == b {
            return true;
        }
        let d_ax = self.dist_cw(a, x);
        d_ax > 0 && d_ax <= self.dist_cw(a, b)
    }

    /// Ideal position of the finger with exponent `i` (1-based):
    /// `owner + 2^(i-1)`.
    pub fn ideal_finger_id(&self, owner: NodeId, i: u32) -> Result<RingPoint, RingError> {
        if i < 1 || i > self.bits {
            return Err(RingError::FingerIndex { i, bits: self.bits });
        }
        Ok(self.add(owner, 1u64 << (i - 1)))
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum RingError {
    #[error("finger index {i} out of range 1..={bits}")]
    FingerIndex { i: u32, bits: u32 },
}

/// Sorted set of alive node ids; the ground-truth view of the ring that
/// oracles and the analyzer consult.
#[derive(Clone, Debug, Default)]
pub struct IdSet {
    ids: Vec<u64>,
}

impl IdSet {
    pub fn new() -> Self {
        IdSet { ids: Vec::new() }
    }

    pub fn from_ids(mut ids: Vec<u64>) -> Self {
        ids.sort_unstable();
        ids.dedup();
        IdSet { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, n: NodeId) -> bool {
        self.ids.binary_search(&n.0).is_ok()
    }

    pub fn insert(&mut self, n: NodeId) -> bool {
        match self.ids.binary_search(&n.0) {
            Ok(_) => false,
            Err(pos) => {
                self.ids.insert(pos, n.0);
                true
            }
        }
    }

    pub fn remove(&mut self, n: NodeId) -> bool {
        match self.ids.binary_search(&n.0) {
            Ok(pos) => {
                self.ids.remove(pos);
                true
            }
            Err(_) => false,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.ids.iter().map(|&x| NodeId(x))
    }

    pub fn as_slice(&self) -> &[u64] {
        &self.ids
    }

    /// First alive node at or clockwise-after `v`: the owner of `v`.
    pub fn owner(&self, v: RingPoint) -> Option<NodeId> {
        if self.ids.is_empty() {
            return None;
        }
        match self.ids.binary_search(&v.0) {
            Ok(pos) => Some(NodeId(self.ids[pos])),
            Err(pos) if pos < self.ids.len() => Some(NodeId(self.ids[pos])),
            Err(_) => Some(NodeId(self.ids[0])),
        }
    }

    /// Rank of a node (index in id order). Panics if absent.
    pub fn rank(&self, n: NodeId) -> usize {
        self.ids.binary_search(&n.0).expect("node not in id set")
    }

    pub fn by_rank(&self, rank: usize) -> NodeId {
        NodeId(self.ids[rank % self.ids.len()])
    }

    /// `k`-th successor in rank order (k=1 is the direct successor).
    pub fn succ_k(&self, n: NodeId, k: usize) -> NodeId {
        let r = self.rank(n);
        self.by_rank(r + k)
    }

    /// `k`-th predecessor in rank order.
    pub fn pred_k(&self, n: NodeId, k: usize) -> NodeId {
        let r = self.rank(n);
        let len = self.ids.len();
        self.by_rank(r + len - (k % len))
    }

    /// Number of alive nodes strictly inside the clockwise interval `(a, b)`.
    pub fn count_between(&self, ring: &Ring, a: NodeId, b: impl Into<RingPoint>) -> usize {
        let b = b.into();
        let len = self.len();
        if len == 0 {
            return 0;
        }
        let _ = ring;
        // Nodes inside (a, b) are exactly those after a and before the owner
        // of b; when b is itself a node, owner(b) == b. If the owner wraps all
        // the way back to a (including the degenerate full-circle case b == a),
        // every other node lies inside.
        let stop = match self.owner(b) {
            Some(s) => s,
            None => return 0,
        };
        if stop == a {
            return len - 1;
        }
        self.rank_dist(a, stop) - 1
    }

    /// Clockwise rank steps from `a` to `b` (0 when a == b).
    pub fn rank_dist(&self, a: NodeId, b: NodeId) -> usize {
        let (ra, rb) = (self.rank(a), self.rank(b));
        (rb + self.len() - ra) % self.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finger_ids_match_definition() {
        let ring = Ring::new(6);
        assert_eq!(ring.ideal_finger_id(NodeId(8), 1).unwrap(), RingPoint(9));
        assert_eq!(ring.ideal_finger_id(NodeId(8), 4).unwrap(), RingPoint(16));
        // Wraparound: owner at the top of the circle.
        assert_eq!(
            ring.ideal_finger_id(NodeId(63), 2).unwrap(),
            RingPoint(1)
        );
        assert!(ring.ideal_finger_id(NodeId(8), 0).is_err());
        assert!(ring.ideal_finger_id(NodeId(8), 7).is_err());
    }

    #[test]
    fn owner_picks_node_at_or_after() {
        let set = IdSet::from_ids(vec![10, 20, 30]);
        assert_eq!(set.owner(RingPoint(20)), Some(NodeId(20)));
        assert_eq!(set.owner(RingPoint(21)), Some(NodeId(30)));
        assert_eq!(set.owner(RingPoint(31)), Some(NodeId(10)));
        let single = IdSet::from_ids(vec![5]);
        for v in 0..8u64 {
            assert_eq!(single.owner(RingPoint(v)), Some(NodeId(5)));
        }
    }

    #[test]
    fn interval_membership() {
        let ring = Ring::new(6);
        assert!(ring.between_open(NodeId(60), NodeId(2), NodeId(5)));
        assert!(!ring.between_open(NodeId(60), NodeId(5), NodeId(5)));
        assert!(ring.in_open_closed(NodeId(60), NodeId(5), NodeId(5)));
        assert!(!ring.in_open_closed(NodeId(60), NodeId(60), NodeId(5)));
    }
}

//! Append-only Merkle tree over ledger-entry leaves.
//!
//! Leaves are paired left to right and an unpaired node is promoted to the
//! next level unchanged, which gives the same shape as splitting each range
//! at its largest power of two. Only complete subtrees are stored, so every
//! stored node is immutable once written and roots of earlier tree sizes stay
//! reproducible after more leaves arrive.

mod receipt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{hash_concat, Digest};
use crate::types::TransactionId;

pub use receipt::{endorsement_message, signed_root_message, verify_receipt, Receipt, SignedRoot};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MerkleError {
    #[error("tree is empty")]
    Empty,
    #[error("leaf {index} out of range for tree of size {size}")]
    OutOfRange { index: u64, size: u64 },
    #[error("tree size {0} is below the pruned prefix")]
    Pruned(u64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProofStep {
    pub side: Side,
    pub sibling: Digest,
}

/// Sibling path from a leaf up to the root, leaf end first.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MerkleProof {
    pub path: Vec<ProofStep>,
}

impl MerkleProof {
    pub fn sides(&self) -> Vec<Side> {
        self.path.iter().map(|s| s.side).collect()
    }
}

pub fn interior(left: &Digest, right: &Digest) -> Digest {
    hash_concat(&[&left.0, &right.0])
}

/// Leaf commitment: txid, write-set digest and optional claims digest, in a
/// fixed-width layout with a presence byte for the claims.
pub fn leaf_digest(txid: &TransactionId, write_set: &Digest, claims: Option<&Digest>) -> Digest {
    match claims {
        Some(c) => hash_concat(&[&txid.encode(), &write_set.0, &[1], &c.0]),
        None => hash_concat(&[&txid.encode(), &write_set.0, &[0]]),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
struct Level {
    /// Index of the first stored node at this level.
    base: u64,
    nodes: Vec<Digest>,
}

impl Level {
    fn get(&self, index: u64) -> Option<Digest> {
        index
            .checked_sub(self.base)
            .and_then(|off| self.nodes.get(off as usize).copied())
    }

    fn end(&self) -> u64 {
        self.base + self.nodes.len() as u64
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MerkleState {
    size: u64,
    /// Leaves below this count are represented only by frontier peaks.
    pruned_below: u64,
    levels: Vec<Level>,
}

fn largest_power_of_two_below(n: u64) -> u64 {
    debug_assert!(n > 1);
    1 << (63 - (n - 1).leading_zeros())
}

impl MerkleState {
    pub fn new() -> MerkleState {
        MerkleState::default()
    }

    /// Rebuilds a tree of `size` leaves from its frontier (one peak per set
    /// bit of `size`, highest level first, as returned by [`Self::frontier`]).
    pub fn from_frontier(size: u64, peaks: &[Digest]) -> Option<MerkleState> {
        if peaks.len() != size.count_ones() as usize {
            return None;
        }
        let height = 64 - size.leading_zeros() as usize;
        let mut levels = vec![Level::default(); height.max(1)];
        let mut remaining = peaks.iter();
        for h in (0..height).rev() {
            let level = &mut levels[h];
            if size & (1 << h) != 0 {
                level.base = (size >> h) - 1;
                level.nodes.push(*remaining.next()?);
            } else {
                level.base = size >> h;
            }
        }
        Some(MerkleState {
            size,
            pruned_below: size,
            levels,
        })
    }

    pub fn leaf_count(&self) -> u64 {
        self.size
    }

    pub fn pruned_below(&self) -> u64 {
        self.pruned_below
    }

    fn node(&self, level: usize, index: u64) -> Option<Digest> {
        self.levels.get(level).and_then(|l| l.get(index))
    }

    pub fn append(&mut self, leaf: Digest) {
        let mut index = self.size;
        let mut digest = leaf;
        let mut h = 0;
        loop {
            if self.levels.len() <= h {
                self.levels.push(Level {
                    base: index,
                    nodes: Vec::new(),
                });
            }
            let level = &mut self.levels[h];
            if level.nodes.is_empty() {
                level.base = index;
            }
            debug_assert_eq!(level.end(), index);
            level.nodes.push(digest);
            if index & 1 == 0 {
                break;
            }
            let left = level.get(index - 1).expect("left sibling of a complete pair is stored");
            digest = interior(&left, &digest);
            index >>= 1;
            h += 1;
        }
        self.size += 1;
    }

    /// Root of the range `[start, end)` as it appears in trees whose split
    /// points align with `start`.
    fn range_root(&self, start: u64, end: u64) -> Result<Digest, MerkleError> {
        let n = end - start;
        if n.is_power_of_two() && start.is_multiple_of(n) {
            let level = n.trailing_zeros() as usize;
            return self.node(level, start >> level).ok_or(MerkleError::Pruned(end));
        }
        let k = largest_power_of_two_below(n);
        let left = self.range_root(start, start + k)?;
        let right = self.range_root(start + k, end)?;
        Ok(interior(&left, &right))
    }

    pub fn root(&self) -> Result<Digest, MerkleError> {
        self.root_at(self.size)
    }

    /// Root of the tree formed by the first `size` leaves.
    pub fn root_at(&self, size: u64) -> Result<Digest, MerkleError> {
        if size == 0 {
            return Err(MerkleError::Empty);
        }
        if size > self.size {
            return Err(MerkleError::OutOfRange {
                index: size - 1,
                size: self.size,
            });
        }
        if size < self.pruned_below {
            return Err(MerkleError::Pruned(size));
        }
        self.range_root(0, size)
    }

    pub fn proof(&self, index: u64) -> Result<MerkleProof, MerkleError> {
        self.proof_at(index, self.size)
    }

    /// Inclusion proof for leaf `index` against `root_at(size)`.
    pub fn proof_at(&self, index: u64, size: u64) -> Result<MerkleProof, MerkleError> {
        if index >= size || size > self.size {
            return Err(MerkleError::OutOfRange {
                index,
                size: self.size.min(size),
            });
        }
        let mut path = Vec::new();
        self.path(index, 0, size, &mut path)?;
        Ok(MerkleProof { path })
    }

    fn path(&self, index: u64, start: u64, end: u64, out: &mut Vec<ProofStep>) -> Result<(), MerkleError> {
        let n = end - start;
        if n == 1 {
            return Ok(());
        }
        let k = largest_power_of_two_below(n);
        if index < start + k {
            self.path(index, start, start + k, out)?;
            out.push(ProofStep {
                side: Side::Right,
                sibling: self.range_root(start + k, end)?,
            });
        } else {
            self.path(index, start + k, end, out)?;
            out.push(ProofStep {
                side: Side::Left,
                sibling: self.range_root(start, start + k)?,
            });
        }
        Ok(())
    }

    /// Peaks of the perfect subtrees covering all leaves, tallest first.
    pub fn frontier(&self) -> Vec<Digest> {
        self.frontier_at(self.size).expect("frontier peaks are retained")
    }

    /// Peaks covering the first `size` leaves.
    pub fn frontier_at(&self, size: u64) -> Result<Vec<Digest>, MerkleError> {
        if size > self.size {
            return Err(MerkleError::OutOfRange {
                index: size,
                size: self.size,
            });
        }
        let mut peaks = Vec::new();
        let mut start = 0u64;
        for h in (0..64).rev() {
            if size & (1 << h) != 0 {
                peaks.push(self.range_root(start, start + (1 << h))?);
                start += 1 << h;
            }
        }
        Ok(peaks)
    }

    /// Drops every leaf at index `>= size`, with the nodes that cover them.
    pub fn truncate(&mut self, size: u64) -> Result<(), MerkleError> {
        if size >= self.size {
            return Ok(());
        }
        if size < self.pruned_below {
            return Err(MerkleError::Pruned(size));
        }
        for (h, level) in self.levels.iter_mut().enumerate() {
            let keep_end = size >> h;
            let keep = keep_end.saturating_sub(level.base).min(level.nodes.len() as u64);
            level.nodes.truncate(keep as usize);
            if level.nodes.is_empty() {
                level.base = keep_end;
            }
        }
        while self.levels.len() > 1 && self.levels.last().is_some_and(|l| l.nodes.is_empty()) {
            self.levels.pop();
        }
        self.size = size;
        Ok(())
    }
}

/// Expected side markers for leaf `index` in a tree of `size` leaves.
pub fn expected_sides(index: u64, size: u64) -> Option<Vec<Side>> {
    if index >= size {
        return None;
    }
    let mut sides = Vec::new();
    let (mut start, mut end) = (0u64, size);
    while end - start > 1 {
        let k = largest_power_of_two_below(end - start);
        if index < start + k {
            sides.push(Side::Right);
            end = start + k;
        } else {
            sides.push(Side::Left);
            start += k;
        }
    }
    sides.reverse();
    Some(sides)
}

pub fn verify_proof(leaf: &Digest, proof: &MerkleProof, root: &Digest) -> bool {
    let folded = proof.path.iter().fold(*leaf, |acc, step| match step.side {
        Side::Right => interior(&acc, &step.sibling),
        Side::Left => interior(&step.sibling, &acc),
    });
    folded == *root
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::hash;

    fn leaves(n: u64) -> Vec<Digest> {
        (1..=n).map(|i| hash(format!("tx 1.{i}").as_bytes())).collect()
    }

    /// Naive recursive rebuild from the full leaf list.
    fn oracle_root(leaves: &[Digest]) -> Digest {
        let mut level = leaves.to_vec();
        while level.len() > 1 {
            level = level
                .chunks(2)
                .map(|c| if c.len() == 2 { interior(&c[0], &c[1]) } else { c[0] })
                .collect();
        }
        level[0]
    }

    fn build(leaves: &[Digest]) -> MerkleState {
        let mut t = MerkleState::new();
        for l in leaves {
            t.append(*l);
        }
        t
    }

    #[test]
    fn single_leaf_root_is_leaf() {
        let l = leaves(1);
        let t = build(&l);
        assert_eq!(t.root().unwrap(), l[0]);
        assert!(t.proof(0).unwrap().path.is_empty());
        assert_eq!(MerkleState::new().root(), Err(MerkleError::Empty));
    }

    #[test]
    fn matches_rebuild_oracle_for_every_size() {
        let all = leaves(70);
        let mut t = MerkleState::new();
        for n in 1..=70usize {
            t.append(all[n - 1]);
            assert_eq!(t.root().unwrap(), oracle_root(&all[..n]), "size {n}");
        }
        for n in 1..=70u64 {
            assert_eq!(t.root_at(n).unwrap(), oracle_root(&all[..n as usize]));
        }
        // repeated reads leave the root stable
        assert_eq!(t.root().unwrap(), t.root().unwrap());
    }

    #[test]
    fn ledger_figure_proof_for_seventh_transaction() {
        let l = leaves(11);
        let t = build(&l);
        let d = |i: usize| l[i - 1];
        // the signature at 1.11 signs the root over 1.1 ..= 1.10
        let proof = t.proof_at(6, 10).unwrap();
        let expected = vec![
            ProofStep {
                side: Side::Right,
                sibling: d(8),
            },
            ProofStep {
                side: Side::Left,
                sibling: interior(&d(5), &d(6)),
            },
            ProofStep {
                side: Side::Left,
                sibling: interior(&interior(&d(1), &d(2)), &interior(&d(3), &d(4))),
            },
            ProofStep {
                side: Side::Right,
                sibling: interior(&d(9), &d(10)),
            },
        ];
        assert_eq!(proof.path, expected);
        assert!(verify_proof(&d(7), &proof, &t.root_at(10).unwrap()));
        let eleven = t.proof(6).unwrap();
        assert_eq!(eleven.sides(), vec![Side::Right, Side::Left, Side::Left, Side::Right]);
        assert!(verify_proof(&d(7), &eleven, &t.root().unwrap()));
    }

    #[test]
    fn exhaustive_proofs_up_to_64() {
        let all = leaves(64);
        let t = build(&all);
        for size in 1..=64u64 {
            let root = t.root_at(size).unwrap();
            let bound = 64 - (size - 1).leading_zeros() as usize + 1;
            for i in 0..size {
                let p = t.proof_at(i, size).unwrap();
                assert!(p.path.len() <= bound);
                assert!(verify_proof(&all[i as usize], &p, &root));
                assert_eq!(p.sides(), expected_sides(i, size).unwrap());
            }
        }
    }

    #[test]
    fn mutations_and_truncations_fail() {
        let all = leaves(13);
        let t = build(&all);
        let root = t.root().unwrap();
        for i in 0..13u64 {
            let p = t.proof(i).unwrap();
            for step in 0..p.path.len() {
                let mut flipped = p.clone();
                flipped.path[step].side = match flipped.path[step].side {
                    Side::Left => Side::Right,
                    Side::Right => Side::Left,
                };
                assert!(!verify_proof(&all[i as usize], &flipped, &root));
            }
            if !p.path.is_empty() {
                let mut short = p.clone();
                short.path.pop();
                assert!(!verify_proof(&all[i as usize], &short, &root));
            }
        }
    }

    #[test]
    fn single_bit_flips_never_verify() {
        let all = leaves(9);
        let t = build(&all);
        let root = t.root().unwrap();
        for i in 0..9u64 {
            let p = t.proof(i).unwrap();
            for step in 0..p.path.len() {
                for bit in 0..256 {
                    let mut m = p.clone();
                    m.path[step].sibling.0[bit / 8] ^= 1 << (bit % 8);
                    assert!(!verify_proof(&all[i as usize], &m, &root));
                }
            }
            for bit in 0..256 {
                let mut leaf = all[i as usize];
                leaf.0[bit / 8] ^= 1 << (bit % 8);
                assert!(!verify_proof(&leaf, &p, &root));
            }
        }
    }

    #[test]
    fn old_proofs_survive_appends() {
        let all = leaves(40);
        let mut t = build(&all[..17]);
        let old_root = t.root().unwrap();
        let old_proofs: Vec<_> = (0..17).map(|i| t.proof(i).unwrap()).collect();
        for l in &all[17..] {
            t.append(*l);
        }
        for (i, p) in old_proofs.iter().enumerate() {
            assert!(verify_proof(&all[i], p, &old_root));
            assert_eq!(t.proof_at(i as u64, 17).unwrap(), *p);
        }
        assert_eq!(t.root_at(17).unwrap(), old_root);
    }

    #[test]
    fn truncate_restores_earlier_state() {
        let all = leaves(30);
        let mut t = build(&all);
        t.truncate(11).unwrap();
        assert_eq!(t, build(&all[..11]));
        t.append(all[11]);
        assert_eq!(t.root().unwrap(), oracle_root(&all[..12]));
    }

    #[test]
    fn frontier_round_trip_supports_later_proofs() {
        let all = leaves(45);
        for cut in 1..30u64 {
            let prefix = build(&all[..cut as usize]);
            let mut resumed = MerkleState::from_frontier(cut, &prefix.frontier()).unwrap();
            assert_eq!(resumed.root().unwrap(), prefix.root().unwrap());
            for l in &all[cut as usize..] {
                resumed.append(*l);
            }
            let full = build(&all);
            assert_eq!(resumed.root().unwrap(), full.root().unwrap());
            for i in cut..45 {
                assert_eq!(resumed.proof(i).unwrap(), full.proof(i).unwrap(), "cut {cut} leaf {i}");
            }
            assert!(resumed.truncate(cut - 1).is_err() || cut == 0);
        }
    }
}

//! Append-only Merkle hash-tree accumulator.
//!
//! The tree shape follows RFC 6962: leaves are hashed as `SHA-256(0x00 || data)`,
//! interior nodes as `SHA-256(0x01 || left || right)`, and a tree of `n > 1`
//! leaves splits at the largest power of two strictly below `n`. The empty
//! tree hashes to `SHA-256("")`.
//!
//! The satellite keeps one of these to produce the root it broadcasts; log
//! servers and monitors keep their own and compare.

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::wire::{Reader, WireError, Writer};

const LEAF_PREFIX: u8 = 0x00;
const NODE_PREFIX: u8 = 0x01;

/// A 32-byte SHA-256 output.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub const LEN: usize = 32;

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let bytes = hex::decode(s).ok()?;
        Some(Self(bytes.try_into().ok()?))
    }

    pub fn from_slice(bytes: &[u8]) -> Option<Self> {
        Some(Self(bytes.try_into().ok()?))
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.to_hex())
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Digest {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Digest::from_hex(&s).ok_or_else(|| serde::de::Error::custom("expected 64 hex characters"))
    }
}

/// Hash of a leaf's data, domain-separated from interior nodes.
pub fn leaf_hash(data: &[u8]) -> Digest {
    let mut h = Sha256::new();
    h.update([LEAF_PREFIX]);
    h.update(data);
    Digest(h.finalize().into())
}

/// Hash of an interior node.
pub fn node_hash(left: &Digest, right: &Digest) -> Digest {
    let mut h = Sha256::new();
    h.update([NODE_PREFIX]);
    h.update(left.0);
    h.update(right.0);
    Digest(h.finalize().into())
}

/// Root of the tree with no leaves.
pub fn empty_root() -> Digest {
    Digest(Sha256::digest([]).into())
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IndexError {
    #[error("leaf index {index} out of range for tree of size {size}")]
    Leaf { index: u64, size: u64 },
    #[error("tree size {requested} out of range (log holds {size} leaves)")]
    TreeSize { requested: u64, size: u64 },
}

/// Sibling path proving one leaf belongs to a tree of `tree_size` leaves.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InclusionProof {
    pub leaf_index: u64,
    pub tree_size: u64,
    /// Leaf-to-root order.
    pub path: Vec<Digest>,
}

/// Proof that the tree of `new_size` leaves extends the tree of `old_size`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsistencyProof {
    pub old_size: u64,
    pub new_size: u64,
    pub path: Vec<Digest>,
}

/// Encodes as `tree_size u64 | index u64 | path_len u16 | path digests`.
fn encode_proof(tree_size: u64, index: u64, path: &[Digest]) -> Vec<u8> {
    let mut w = Writer::new();
    w.u64(tree_size).u64(index).u16(path.len() as u16);
    for d in path {
        w.raw(&d.0);
    }
    w.finish()
}

fn decode_proof(bytes: &[u8]) -> Result<(u64, u64, Vec<Digest>), WireError> {
    let mut r = Reader::new(bytes);
    let tree_size = r.u64()?;
    let index = r.u64()?;
    let len = r.u16()? as usize;
    let mut path = Vec::with_capacity(len);
    for _ in 0..len {
        path.push(Digest(r.array()?));
    }
    r.finish()?;
    Ok((tree_size, index, path))
}

impl InclusionProof {
    pub fn encode(&self) -> Vec<u8> {
        encode_proof(self.tree_size, self.leaf_index, &self.path)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let (tree_size, leaf_index, path) = decode_proof(bytes)?;
        Ok(Self {
            leaf_index,
            tree_size,
            path,
        })
    }
}

impl ConsistencyProof {
    /// The "index" slot of the shared proof layout carries `old_size`.
    pub fn encode(&self) -> Vec<u8> {
        encode_proof(self.new_size, self.old_size, &self.path)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let (new_size, old_size, path) = decode_proof(bytes)?;
        Ok(Self {
            old_size,
            new_size,
            path,
        })
    }
}

/// Largest power of two strictly less than `n`, for `n >= 2`.
fn split_point(n: usize) -> usize {
    debug_assert!(n >= 2);
    1 << (usize::BITS - 1 - (n - 1).leading_zeros())
}

fn subtree_root(hashes: &[Digest]) -> Digest {
    match hashes.len() {
        0 => empty_root(),
        1 => hashes[0],
        n => {
            let k = split_point(n);
            node_hash(&subtree_root(&hashes[..k]), &subtree_root(&hashes[k..]))
        }
    }
}

fn inclusion_path(index: usize, hashes: &[Digest], out: &mut Vec<Digest>) {
    let n = hashes.len();
    if n <= 1 {
        return;
    }
    let k = split_point(n);
    if index < k {
        inclusion_path(index, &hashes[..k], out);
        out.push(subtree_root(&hashes[k..]));
    } else {
        inclusion_path(index - k, &hashes[k..], out);
        out.push(subtree_root(&hashes[..k]));
    }
}

fn consistency_path(old: usize, hashes: &[Digest], complete: bool, out: &mut Vec<Digest>) {
    let n = hashes.len();
    if old == n {
        if !complete {
            out.push(subtree_root(hashes));
        }
        return;
    }
    let k = split_point(n);
    if old <= k {
        consistency_path(old, &hashes[..k], complete, out);
        out.push(subtree_root(&hashes[k..]));
    } else {
        consistency_path(old - k, &hashes[k..], false, out);
        out.push(subtree_root(&hashes[..k]));
    }
}

/// Append-only log of byte-string leaves.
///
/// Appends are O(log n): a frontier of perfect-subtree peaks is maintained so
/// [`MerkleLog::root`] never rehashes the whole history.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MerkleLog {
    leaves: Vec<Vec<u8>>,
    hashes: Vec<Digest>,
    // (height, digest) of each perfect subtree, leftmost first.
    frontier: Vec<(u32, Digest)>,
}

impl MerkleLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_leaves<I, L>(leaves: I) -> Self
    where
        I: IntoIterator<Item = L>,
        L: Into<Vec<u8>>,
    {
        let mut log = Self::new();
        for leaf in leaves {
            log.append(leaf);
        }
        log
    }

    pub fn len(&self) -> u64 {
        self.leaves.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }

    pub fn leaf(&self, index: u64) -> Option<&[u8]> {
        self.leaves.get(index as usize).map(Vec::as_slice)
    }

    pub fn leaves(&self) -> impl ExactSizeIterator<Item = &[u8]> {
        self.leaves.iter().map(Vec::as_slice)
    }

    /// Appends a leaf and returns its index.
    pub fn append(&mut self, leaf: impl Into<Vec<u8>>) -> u64 {
        let leaf = leaf.into();
        let h = leaf_hash(&leaf);
        let index = self.leaves.len() as u64;
        self.leaves.push(leaf);
        self.hashes.push(h);

        self.frontier.push((0, h));
        while let [.., (lh, _), (rh, _)] = self.frontier[..] {
            if lh != rh {
                break;
            }
            let (_, right) = self.frontier.pop().unwrap();
            let (height, left) = self.frontier.pop().unwrap();
            self.frontier.push((height + 1, node_hash(&left, &right)));
        }
        index
    }

    pub fn root(&self) -> Digest {
        let mut peaks = self.frontier.iter().rev();
        let Some(&(_, mut acc)) = peaks.next() else {
            return empty_root();
        };
        for (_, peak) in peaks {
            acc = node_hash(peak, &acc);
        }
        acc
    }

    /// Root of the first `size` leaves.
    pub fn root_at(&self, size: u64) -> Result<Digest, IndexError> {
        if size > self.len() {
            return Err(IndexError::TreeSize {
                requested: size,
                size: self.len(),
            });
        }
        if size == self.len() {
            return Ok(self.root());
        }
        Ok(subtree_root(&self.hashes[..size as usize]))
    }

    pub fn prove_inclusion(&self, index: u64) -> Result<InclusionProof, IndexError> {
        self.prove_inclusion_at(index, self.len())
    }

    /// Inclusion proof against the prefix tree of `tree_size` leaves.
    pub fn prove_inclusion_at(
        &self,
        index: u64,
        tree_size: u64,
    ) -> Result<InclusionProof, IndexError> {
        if tree_size > self.len() {
            return Err(IndexError::TreeSize {
                requested: tree_size,
                size: self.len(),
            });
        }
        if index >= tree_size {
            return Err(IndexError::Leaf {
                index,
                size: tree_size,
            });
        }
        let mut path = Vec::new();
        inclusion_path(
            index as usize,
            &self.hashes[..tree_size as usize],
            &mut path,
        );
        Ok(InclusionProof {
            leaf_index: index,
            tree_size,
            path,
        })
    }

    pub fn prove_consistency(&self, old_size: u64) -> Result<ConsistencyProof, IndexError> {
        self.prove_consistency_between(old_size, self.len())
    }

    pub fn prove_consistency_between(
        &self,
        old_size: u64,
        new_size: u64,
    ) -> Result<ConsistencyProof, IndexError> {
        if new_size > self.len() {
            return Err(IndexError::TreeSize {
                requested: new_size,
                size: self.len(),
            });
        }
        if old_size == 0 || old_size > new_size {
            return Err(IndexError::TreeSize {
                requested: old_size,
                size: new_size,
            });
        }
        let mut path = Vec::new();
        if old_size < new_size {
            consistency_path(
                old_size as usize,
                &self.hashes[..new_size as usize],
                true,
                &mut path,
            );
        }
        Ok(ConsistencyProof {
            old_size,
            new_size,
            path,
        })
    }
}

fn max_path_len(tree_size: u64) -> usize {
    // ceil(log2(n)) + 1
    (u64::BITS - tree_size.saturating_sub(1).leading_zeros()) as usize + 1
}

/// Checks `proof` places `leaf` in the tree of `tree_size` leaves under
/// `root`. Never panics on malformed input.
pub fn verify_inclusion(
    root: &Digest,
    tree_size: u64,
    leaf: &[u8],
    proof: &InclusionProof,
) -> bool {
    if proof.tree_size != tree_size
        || proof.leaf_index >= proof.tree_size
        || proof.path.len() > max_path_len(proof.tree_size)
    {
        return false;
    }
    let mut index = proof.leaf_index;
    let mut last = proof.tree_size - 1;
    let mut acc = leaf_hash(leaf);
    for sibling in &proof.path {
        if last == 0 {
            return false;
        }
        if index & 1 == 1 || index == last {
            acc = node_hash(sibling, &acc);
            if index & 1 == 0 {
                while index & 1 == 0 && index != 0 {
                    index >>= 1;
                    last >>= 1;
                }
            }
        } else {
            acc = node_hash(&acc, sibling);
        }
        index >>= 1;
        last >>= 1;
    }
    last == 0 && acc == *root
}

/// Checks the tree of `new_size` leaves under `new_root` is an append-only
/// extension of the tree of `old_size` leaves under `old_root`. Never panics
/// on malformed input.
pub fn verify_consistency(
    old_size: u64,
    old_root: &Digest,
    new_size: u64,
    new_root: &Digest,
    proof: &ConsistencyProof,
) -> bool {
    let (old, new) = (proof.old_size, proof.new_size);
    if old != old_size
        || new != new_size
        || old == 0
        || old > new
        || proof.path.len() > 2 * max_path_len(new)
    {
        return false;
    }
    if old == new {
        return proof.path.is_empty() && old_root == new_root;
    }
    if proof.path.is_empty() {
        return false;
    }

    let mut path = proof.path.iter();
    let seed = if old.is_power_of_two() {
        *old_root
    } else {
        *path.next().unwrap()
    };

    let mut fnode = old - 1;
    let mut snode = new - 1;
    while fnode & 1 == 1 {
        fnode >>= 1;
        snode >>= 1;
    }
    let mut fr = seed;
    let mut sr = seed;
    for c in path {
        if snode == 0 {
            return false;
        }
        if fnode & 1 == 1 || fnode == snode {
            fr = node_hash(c, &fr);
            sr = node_hash(c, &sr);
            if fnode & 1 == 0 {
                while fnode & 1 == 0 && fnode != 0 {
                    fnode >>= 1;
                    snode >>= 1;
                }
            }
        } else {
            sr = node_hash(&sr, c);
        }
        fnode >>= 1;
        snode >>= 1;
    }
    snode == 0 && fr == *old_root && sr == *new_root
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(hex: &str) -> Digest {
        Digest::from_hex(hex).unwrap()
    }

    // Frozen from an independent Python hashlib computation.
    const LEAF_EMPTY: &str = "6e340b9cffb37a989ca544e6bb780a2c78901d3fb33738768511a30617afa01d";
    const LEAF_A: &str = "022a6979e6dab7aa5ae4c3e5e45f7e977112a7e63593820dbec1ec738a24f93c";
    const ROOT_ABC: &str = "36642e73c2540ab121e3a6bf9545b0a24982cd830eb13d3cd19de3ce6c021ec1";
    const NODE_AB: &str = "b137985ff484fb600db93107c77b0365c80d78f5b429ded0fd97361d077999eb";
    const LEAF_B: &str = "57eb35615d47f34ec714cacdf5fd74608a5e8e102724e80b24b287c0c27b6a31";
    const ROOT_CD: &str = "dbbd68c325614a73dacb4e7a87a2b7b4ae9724b489e5629ee83151fe8f0eafd7";

    #[test]
    fn leaf_hash_vectors() {
        assert_eq!(leaf_hash(b""), d(LEAF_EMPTY));
        assert_eq!(leaf_hash(b"a"), d(LEAF_A));
    }

    #[test]
    fn leaf_and_node_are_domain_separated() {
        let (l, r) = (leaf_hash(b"x"), leaf_hash(b"y"));
        let mut crafted = l.0.to_vec();
        crafted.extend_from_slice(&r.0);
        assert_ne!(leaf_hash(&crafted), node_hash(&l, &r));
    }

    #[test]
    fn root_base_cases() {
        assert_eq!(
            MerkleLog::new().root(),
            d("e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855")
        );
        assert_eq!(MerkleLog::from_leaves([b"a"]).root(), d(LEAF_A));
    }

    #[test]
    fn three_leaf_root() {
        let log = MerkleLog::from_leaves([b"a", b"b", b"c"]);
        assert_eq!(node_hash(&leaf_hash(b"a"), &leaf_hash(b"b")), d(NODE_AB));
        assert_eq!(log.root(), d(ROOT_ABC));
        assert_eq!(log.root(), node_hash(&d(NODE_AB), &leaf_hash(b"c")));
    }

    #[test]
    fn append_counts_and_keeps_duplicates() {
        let mut log = MerkleLog::new();
        assert_eq!(log.append(b"x".to_vec()), 0);
        assert_eq!(log.append(b"x".to_vec()), 1);
        assert_eq!(log.len(), 2);
        assert_eq!(log.leaf(0), log.leaf(1));
    }

    #[test]
    fn inclusion_examples() {
        let one = MerkleLog::from_leaves([b"a"]);
        let p = one.prove_inclusion(0).unwrap();
        assert!(p.path.is_empty());
        assert!(verify_inclusion(&one.root(), 1, b"a", &p));

        let two = MerkleLog::from_leaves([b"a", b"b"]);
        let p = two.prove_inclusion(0).unwrap();
        assert_eq!(p.path, vec![d(LEAF_B)]);
        assert!(verify_inclusion(&two.root(), 2, b"a", &p));

        assert_eq!(
            two.prove_inclusion(2),
            Err(IndexError::Leaf { index: 2, size: 2 })
        );
    }

    #[test]
    fn consistency_examples() {
        let log = MerkleLog::from_leaves([b"a", b"b", b"c", b"d"]);
        let p = log.prove_consistency(2).unwrap();
        assert_eq!(p.path, vec![d(ROOT_CD)]);
        assert!(verify_consistency(
            2,
            &log.root_at(2).unwrap(),
            4,
            &log.root(),
            &p
        ));

        let same = log.prove_consistency(4).unwrap();
        assert!(same.path.is_empty());
        assert!(verify_consistency(4, &log.root(), 4, &log.root(), &same));
        assert!(!verify_consistency(
            2,
            &log.root_at(2).unwrap(),
            3,
            &log.root(),
            &p
        ));

        assert!(log.prove_consistency(0).is_err());
        assert!(log.prove_consistency(5).is_err());
    }

    #[test]
    fn verify_rejects_malformed_without_panicking() {
        let log = MerkleLog::from_leaves([b"a", b"b", b"c"]);
        let root = log.root();
        let mut p = log.prove_inclusion(1).unwrap();
        p.tree_size = 0;
        assert!(!verify_inclusion(&root, 0, b"b", &p));
        assert!(!verify_inclusion(&root, 3, b"b", &p));
        let mut p = log.prove_inclusion(1).unwrap();
        p.path.extend(std::iter::repeat_n(root, 100));
        assert!(!verify_inclusion(&root, 3, b"b", &p));

        let bogus = ConsistencyProof {
            old_size: 3,
            new_size: 2,
            path: vec![],
        };
        assert!(!verify_consistency(3, &root, 2, &root, &bogus));
    }

    #[test]
    fn proof_encoding_layout() {
        let log = MerkleLog::from_leaves([b"a", b"b", b"c"]);
        let p = log.prove_inclusion(2).unwrap();
        let bytes = p.encode();
        assert_eq!(&bytes[..8], &3u64.to_be_bytes());
        assert_eq!(&bytes[8..16], &2u64.to_be_bytes());
        assert_eq!(&bytes[16..18], &1u16.to_be_bytes());
        assert_eq!(bytes.len(), 18 + 32);
        assert_eq!(InclusionProof::decode(&bytes).unwrap(), p);
        assert!(InclusionProof::decode(&bytes[..bytes.len() - 1]).is_err());

        let c = log.prove_consistency(1).unwrap();
        assert_eq!(ConsistencyProof::decode(&c.encode()).unwrap(), c);
    }
}

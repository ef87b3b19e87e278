//! Nearest-neighbour indexes over stored hidden states.
//!
//! The approximate mode is a forest of random-hyperplane trees searched with
//! a shared priority queue; candidates are always re-ranked with the exact
//! distance, so the reported distance is never below the true minimum.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stage_rng;
use crate::seq2seq::{read_hsd, Side, StateMatrix};
use crate::tensor::{dot, l2_distance};

const INDEX_MAGIC: &[u8; 4] = b"VIDX";
const INDEX_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum IndexGranularity {
    Token,
    SentenceAverage,
}

impl fmt::Display for IndexGranularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IndexGranularity::Token => "token",
            IndexGranularity::SentenceAverage => "sentence",
        })
    }
}

impl FromStr for IndexGranularity {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "token" => Ok(IndexGranularity::Token),
            "sentence" | "sentence-average" => Ok(IndexGranularity::SentenceAverage),
            _ => Err(Error::Config(format!("unknown index granularity {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForestParams {
    pub trees: usize,
    pub leaf_size: usize,
    /// Number of candidates examined per query.
    pub search_k: usize,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            trees: 16,
            leaf_size: 32,
            search_k: 16 * 32,
            seed: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum IndexMode {
    Exact,
    Approximate(ForestParams),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Payload {
    pub sentence_id: u32,
    /// Row within the sentence; 0 for sentence averages.
    pub position: u32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub distance: f64,
    pub payload: Payload,
}

#[derive(Clone, Debug, PartialEq)]
enum Node {
    Leaf(Vec<u32>),
    Split {
        normal: Vec<f64>,
        offset: f64,
        left: u32,
        right: u32,
    },
}

#[derive(Clone, Debug, PartialEq)]
struct Tree {
    nodes: Vec<Node>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VectorIndex {
    mode: IndexMode,
    granularity: IndexGranularity,
    dim: usize,
    vectors: Vec<f64>,
    payloads: Vec<Payload>,
    forest: Vec<Tree>,
}

fn closer(a: &Neighbor, b: &Neighbor) -> bool {
    match a.distance.total_cmp(&b.distance) {
        Ordering::Less => true,
        Ordering::Greater => false,
        Ordering::Equal => a.payload < b.payload,
    }
}

struct QueueItem {
    priority: f64,
    tree: usize,
    node: u32,
}

impl PartialEq for QueueItem {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for QueueItem {}
impl PartialOrd for QueueItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for QueueItem {
    fn cmp(&self, other: &Self) -> Ordering {
        self.priority
            .total_cmp(&other.priority)
            .then(other.tree.cmp(&self.tree))
            .then(other.node.cmp(&self.node))
    }
}

impl VectorIndex {
    /// Builds an index over raw vectors and payloads.
    pub fn from_vectors(
        dim: usize,
        vectors: Vec<f64>,
        payloads: Vec<Payload>,
        granularity: IndexGranularity,
        mode: IndexMode,
    ) -> Result<Self> {
        if dim == 0 || vectors.len() != dim * payloads.len() {
            return Err(Error::DimensionMismatch {
                expected: dim * payloads.len(),
                actual: vectors.len(),
                context: "index vectors",
            });
        }
        let mut index = VectorIndex {
            mode,
            granularity,
            dim,
            vectors,
            payloads,
            forest: Vec::new(),
        };
        if let IndexMode::Approximate(p) = mode {
            if p.trees == 0 || p.leaf_size == 0 {
                return Err(Error::Config("tree count and leaf size must be positive".into()));
            }
            let mut rng = stage_rng(p.seed, "statestore/forest");
            let all: Vec<u32> = (0..index.len() as u32).collect();
            index.forest = (0..p.trees)
                .map(|_| {
                    let mut nodes = Vec::new();
                    index.build_node(&all, p.leaf_size, &mut rng, &mut nodes);
                    Tree { nodes }
                })
                .collect();
        }
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.payloads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.payloads.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mode(&self) -> IndexMode {
        self.mode
    }

    pub fn granularity(&self) -> IndexGranularity {
        self.granularity
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn payload(&self, i: usize) -> Payload {
        self.payloads[i]
    }

    fn build_node<R: Rng>(&self, items: &[u32], leaf: usize, rng: &mut R, nodes: &mut Vec<Node>) -> u32 {
        let id = nodes.len() as u32;
        if items.len() <= leaf {
            nodes.push(Node::Leaf(items.to_vec()));
            return id;
        }
        nodes.push(Node::Leaf(Vec::new()));
        let a = items[rng.gen_range(0..items.len())] as usize;
        let b = items[rng.gen_range(0..items.len())] as usize;
        let (va, vb) = (self.vector(a), self.vector(b));
        let normal: Vec<f64> = va.iter().zip(vb).map(|(x, y)| x - y).collect();
        let mid: Vec<f64> = va.iter().zip(vb).map(|(x, y)| 0.5 * (x + y)).collect();
        let offset = dot(&normal, &mid);
        let (mut left, mut right): (Vec<u32>, Vec<u32>) = items
            .iter()
            .partition(|&&i| dot(&normal, self.vector(i as usize)) <= offset);
        let normal = if left.is_empty() || right.is_empty() {
            // Degenerate plane (e.g. duplicate points): split at random.
            let mut shuffled = items.to_vec();
            shuffled.shuffle(rng);
            right = shuffled.split_off(shuffled.len() / 2);
            left = shuffled;
            left.sort_unstable();
            right.sort_unstable();
            Vec::new()
        } else {
            normal
        };
        let l = self.build_node(&left, leaf, rng, nodes);
        let r = self.build_node(&right, leaf, rng, nodes);
        nodes[id as usize] = Node::Split {
            normal,
            offset,
            left: l,
            right: r,
        };
        id
    }

    fn check_query(&self, q: &[f64]) -> Result<()> {
        if self.is_empty() {
            return Err(Error::EmptyInput("vector index"));
        }
        if q.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: q.len(),
                context: "index query",
            });
        }
        Ok(())
    }

    fn best_of(&self, q: &[f64], candidates: impl Iterator<Item = usize>) -> Neighbor {
        let mut best: Option<Neighbor> = None;
        for i in candidates {
            let n = Neighbor {
                distance: l2_distance(q, self.vector(i)),
                payload: self.payloads[i],
            };
            if best.as_ref().is_none_or(|b| closer(&n, b)) {
                best = Some(n);
            }
        }
        best.expect("non-empty candidate set")
    }

    /// Nearest stored vector under Euclidean distance; ties go to the lowest
    /// `(sentence_id, position)`.
    pub fn nearest(&self, q: &[f64]) -> Result<Neighbor> {
        self.check_query(q)?;
        match self.mode {
            IndexMode::Exact => Ok(self.best_of(q, 0..self.len())),
            IndexMode::Approximate(p) => Ok(self.best_of(q, self.candidates(q, p.search_k).into_iter())),
        }
    }

    fn candidates(&self, q: &[f64], search_k: usize) -> BTreeSet<usize> {
        let mut heap = BinaryHeap::new();
        for t in 0..self.forest.len() {
            heap.push(QueueItem {
                priority: f64::INFINITY,
                tree: t,
                node: 0,
            });
        }
        let mut out = BTreeSet::new();
        while let Some(item) = heap.pop() {
            if out.len() >= search_k.max(1) {
                break;
            }
            match &self.forest[item.tree].nodes[item.node as usize] {
                Node::Leaf(ids) => out.extend(ids.iter().map(|&i| i as usize)),
                Node::Split {
                    normal,
                    offset,
                    left,
                    right,
                } => {
                    let margin = if normal.is_empty() {
                        0.0
                    } else {
                        dot(normal, q) - offset
                    };
                    heap.push(QueueItem {
                        priority: item.priority.min(margin),
                        tree: item.tree,
                        node: *right,
                    });
                    heap.push(QueueItem {
                        priority: item.priority.min(-margin),
                        tree: item.tree,
                        node: *left,
                    });
                }
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut b = Vec::new();
        b.extend_from_slice(INDEX_MAGIC);
        b.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        b.push(match self.granularity {
            IndexGranularity::Token => 0,
            IndexGranularity::SentenceAverage => 1,
        });
        match self.mode {
            IndexMode::Exact => b.push(0),
            IndexMode::Approximate(p) => {
                b.push(1);
                for v in [p.trees, p.leaf_size, p.search_k] {
                    b.extend_from_slice(&(v as u32).to_le_bytes());
                }
                b.extend_from_slice(&p.seed.to_le_bytes());
            }
        }
        b.extend_from_slice(&(self.dim as u32).to_le_bytes());
        b.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for v in &self.vectors {
            b.extend_from_slice(&v.to_le_bytes());
        }
        for p in &self.payloads {
            b.extend_from_slice(&p.sentence_id.to_le_bytes());
            b.extend_from_slice(&p.position.to_le_bytes());
        }
        for tree in &self.forest {
            b.extend_from_slice(&(tree.nodes.len() as u32).to_le_bytes());
            for node in &tree.nodes {
                match node {
                    Node::Leaf(ids) => {
                        b.push(0);
                        b.extend_from_slice(&(ids.len() as u32).to_le_bytes());
                        for i in ids {
                            b.extend_from_slice(&i.to_le_bytes());
                        }
                    }
                    Node::Split {
                        normal,
                        offset,
                        left,
                        right,
                    } => {
                        b.push(if normal.is_empty() { 2 } else { 1 });
                        b.extend_from_slice(&offset.to_le_bytes());
                        for v in normal {
                            b.extend_from_slice(&v.to_le_bytes());
                        }
                        b.extend_from_slice(&left.to_le_bytes());
                        b.extend_from_slice(&right.to_le_bytes());
                    }
                }
            }
        }
        fs::write(path, b).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut r = ByteReader {
            bytes: &bytes,
            pos: 0,
            path,
        };
        if r.take(4)? != INDEX_MAGIC {
            return Err(Error::format(path, "bad magic, expected VIDX"));
        }
        let version = r.u32()?;
        if version != INDEX_VERSION {
            return Err(Error::format(path, format!("unsupported index version {version}")));
        }
        let granularity = match r.u8()? {
            0 => IndexGranularity::Token,
            1 => IndexGranularity::SentenceAverage,
            g => return Err(Error::format(path, format!("unknown granularity tag {g}"))),
        };
        let mode = match r.u8()? {
            0 => IndexMode::Exact,
            1 => IndexMode::Approximate(ForestParams {
                trees: r.u32()? as usize,
                leaf_size: r.u32()? as usize,
                search_k: r.u32()? as usize,
                seed: r.u64()?,
            }),
            m => return Err(Error::format(path, format!("unknown mode tag {m}"))),
        };
        let dim = r.u32()? as usize;
        let count = r.u32()? as usize;
        let vectors = (0..dim * count).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let payloads = (0..count)
            .map(|_| {
                Ok(Payload {
                    sentence_id: r.u32()?,
                    position: r.u32()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let trees = match mode {
            IndexMode::Exact => 0,
            IndexMode::Approximate(p) => p.trees,
        };
        let mut forest = Vec::with_capacity(trees);
        for _ in 0..trees {
            let n = r.u32()? as usize;
            let mut nodes = Vec::with_capacity(n);
            for _ in 0..n {
                let node = match r.u8()? {
                    0 => {
                        let k = r.u32()? as usize;
                        Node::Leaf((0..k).map(|_| r.u32()).collect::<Result<_>>()?)
                    }
                    tag @ (1 | 2) => {
                        let offset = r.f64()?;
                        let width = if tag == 1 { dim } else { 0 };
                        let normal = (0..width).map(|_| r.f64()).collect::<Result<_>>()?;
                        Node::Split {
                            normal,
                            offset,
                            left: r.u32()?,
                            right: r.u32()?,
                        }
                    }
                    t => return Err(Error::format(path, format!("unknown node tag {t}"))),
                };
                nodes.push(node);
            }
            forest.push(Tree { nodes });
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after index"));
        }
        Ok(VectorIndex {
            mode,
            granularity,
            dim,
            vectors,
            payloads,
            forest,
        })
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl ByteReader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::format(self.path, "truncated index file"))?;
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Index over state matrices: every row, or one average per sentence.
pub fn build_index(states: &[StateMatrix], granularity: IndexGranularity, mode: IndexMode) -> Result<VectorIndex> {
    let dim = states.first().map_or(0, StateMatrix::dim);
    if dim == 0 {
        return Err(Error::EmptyInput("state records"));
    }
    let mut vectors = Vec::new();
    let mut payloads = Vec::new();
    for s in states {
        if s.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: s.dim(),
                context: "state record width",
            });
        }
        match granularity {
            IndexGranularity::Token => {
                for i in 0..s.rows() {
                    vectors.extend(s.row_f64(i));
                    payloads.push(Payload {
                        sentence_id: s.sentence_id,
                        position: i as u32,
                    });
                }
            }
            IndexGranularity::SentenceAverage => {
                vectors.extend(s.average());
                payloads.push(Payload {
                    sentence_id: s.sentence_id,
                    position: 0,
                });
            }
        }
    }
    VectorIndex::from_vectors(dim, vectors, payloads, granularity, mode)
}

pub fn build_index_from_file(
    path: &Path,
    side: Side,
    granularity: IndexGranularity,
    mode: IndexMode,
) -> Result<VectorIndex> {
    let (_, states) = read_hsd(path, side)?;
    build_index(&states, granularity, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seq2seq::Side;
    use proptest::prelude::*;
    use rand::Rng;

    fn index(points: &[[f64; 2]], mode: IndexMode) -> VectorIndex {
        VectorIndex::from_vectors(
            2,
            points.iter().flatten().copied().collect(),
            (0..points.len() as u32)
                .map(|i| Payload {
                    sentence_id: i,
                    position: 0,
                })
                .collect(),
            IndexGranularity::Token,
            mode,
        )
        .unwrap()
    }

    fn brute(idx: &VectorIndex, q: &[f64]) -> (f64, Payload) {
        let mut best = (
            f64::INFINITY,
            Payload {
                sentence_id: u32::MAX,
                position: u32::MAX,
            },
        );
        for i in 0..idx.len() {
            let d: f64 = idx
                .vector(i)
                .iter()
                .zip(q)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let p = idx.payload(i);
            if d < best.0 || (d == best.0 && p < best.1) {
                best = (d, p);
            }
        }
        best
    }

    fn random_index(n: usize, dim: usize, mode: IndexMode, seed: u64) -> VectorIndex {
        let mut rng = stage_rng(seed, "test/vectors");
        let vectors = (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let payloads = (0..n as u32)
            .map(|i| Payload {
                sentence_id: i / 4,
                position: i % 4,
            })
            .collect();
        VectorIndex::from_vectors(dim, vectors, payloads, IndexGranularity::Token, mode).unwrap()
    }

    #[test]
    fn small_exact_examples() {
        let idx = index(&[[0.0, 0.0], [3.0, 4.0]], IndexMode::Exact);
        assert_eq!(idx.nearest(&[0.0, 0.0]).unwrap().distance, 0.0);
        let n = idx.nearest(&[3.0, 4.0]).unwrap();
        assert_eq!((n.distance, n.payload.sentence_id), (0.0, 1));
        let far = index(&[[3.0, 4.0]], IndexMode::Exact);
        assert_eq!(far.nearest(&[0.0, 0.0]).unwrap().distance, 5.0);
        let idx = index(&[[1.0, 0.0], [0.0, 2.0]], IndexMode::Exact);
        let n = idx.nearest(&[0.0, 0.0]).unwrap();
        assert_eq!((n.distance, n.payload.sentence_id), (1.0, 0));
    }

    #[test]
    fn ties_go_to_lowest_payload() {
        let idx = VectorIndex::from_vectors(
            1,
            vec![1.0, -1.0],
            vec![
                Payload {
                    sentence_id: 5,
                    position: 0,
                },
                Payload {
                    sentence_id: 2,
                    position: 3,
                },
            ],
            IndexGranularity::Token,
            IndexMode::Exact,
        )
        .unwrap();
        assert_eq!(idx.nearest(&[0.0]).unwrap().payload.sentence_id, 2);
    }

    #[test]
    fn errors() {
        let empty = VectorIndex::from_vectors(2, vec![], vec![], IndexGranularity::Token, IndexMode::Exact).unwrap();
        assert!(matches!(empty.nearest(&[0.0, 0.0]), Err(Error::EmptyInput(_))));
        let idx = index(&[[0.0, 0.0]], IndexMode::Exact);
        assert!(matches!(idx.nearest(&[0.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn token_and_average_granularity() {
        let mk = |id, rows: usize| {
            StateMatrix::new(Side::Encoder, id, 2, (0..rows * 2).map(|v| v as f32).collect()).unwrap()
        };
        let states = vec![mk(0, 2), mk(1, 5), mk(2, 1)];
        let tok = build_index(&states, IndexGranularity::Token, IndexMode::Exact).unwrap();
        assert_eq!(tok.len(), 8);
        let avg = build_index(&states, IndexGranularity::SentenceAverage, IndexMode::Exact).unwrap();
        assert_eq!(avg.len(), 3);
        assert_eq!(avg.vector(2), states[2].row_f64(0).as_slice());
        let other = StateMatrix::new(Side::Encoder, 3, 3, vec![0.0; 3]).unwrap();
        assert!(build_index(&[states[0].clone(), other], IndexGranularity::Token, IndexMode::Exact).is_err());
    }

    #[test]
    fn approximate_recall_and_upper_bound() {
        let exact = random_index(1000, 16, IndexMode::Exact, 7);
        let approx = random_index(1000, 16, IndexMode::Approximate(ForestParams::default()), 7);
        let mut rng = stage_rng(8, "test/queries");
        let mut hits = 0;
        for _ in 0..200 {
            let q: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let e = exact.nearest(&q).unwrap();
            let a = approx.nearest(&q).unwrap();
            assert!(a.distance >= e.distance);
            if a.payload == e.payload {
                hits += 1;
            }
        }
        assert!(hits as f64 / 200.0 >= 0.9, "recall {hits}/200");
    }

    #[test]
    fn serialization_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for mode in [
            IndexMode::Exact,
            IndexMode::Approximate(ForestParams {
                trees: 3,
                leaf_size: 4,
                search_k: 10,
                seed: 3,
            }),
        ] {
            let idx = random_index(60, 5, mode, 1);
            let path = dir.path().join("i.idx");
            idx.save(&path).unwrap();
            assert_eq!(VectorIndex::load(&path).unwrap(), idx);
        }
    }

    #[test]
    fn duplicate_points_do_not_break_the_forest() {
        let points = vec![[1.0, 1.0]; 50];
        let idx = index(
            &points,
            IndexMode::Approximate(ForestParams {
                trees: 2,
                leaf_size: 4,
                search_k: 8,
                seed: 1,
            }),
        );
        let n = idx.nearest(&[1.0, 1.0]).unwrap();
        assert_eq!(n.distance, 0.0);
    }

    proptest! {
        #[test]
        fn exact_mode_equals_linear_scan(seed in 0u64..1000, n in 1usize..300, dim in 1usize..8) {
            let idx = random_index(n, dim, IndexMode::Exact, seed);
            let mut rng = stage_rng(seed, "test/q");
            for _ in 0..5 {
                let q: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.5..1.5)).collect();
                let got = idx.nearest(&q).unwrap();
                let (d, p) = brute(&idx, &q);
                prop_assert_eq!(got.distance, d);
                prop_assert_eq!(got.payload, p);
            }
        }

        #[test]
        fn approximate_never_beats_exact(seed in 0u64..1000, n in 1usize..200) {
            let mode = IndexMode::Approximate(ForestParams { trees: 4, leaf_size: 8, search_k: 16, seed });
            let idx = random_index(n, 4, mode, seed);
            let ex = random_index(n, 4, IndexMode::Exact, seed);
            let mut rng = stage_rng(seed, "test/q");
            let q: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.5..1.5)).collect();
            prop_assert!(idx.nearest(&q).unwrap().distance >= ex.nearest(&q).unwrap().distance);
        }
    }
}

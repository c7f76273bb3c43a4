//! Undirected graphs with dense node features, node splits, and ego-graphs.
//!
//! Adjacency is stored as per-node sorted neighbor lists. Self-loops are
//! rejected on input; the encoder adds them implicitly inside degree
//! normalization (`deg+ = deg + 1`).

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CgrlError, Result};
use crate::scalar::Scalar;

pub type Mat<T> = Array2<T>;

/// Undirected graph: sorted neighbor lists, n×d features, class labels.
#[derive(Debug, Clone)]
pub struct Graph<T: Scalar> {
    n: usize,
    neighbor_lists: Vec<Vec<usize>>,
    features: Mat<T>,
    labels: Vec<usize>,
    num_classes: usize,
    domain_ids: Option<Vec<usize>>,
}

impl<T: Scalar> Graph<T> {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.neighbor_lists[v]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.neighbor_lists[v].len()
    }

    pub fn features(&self) -> &Mat<T> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn domain_ids(&self) -> Option<&[usize]> {
        self.domain_ids.as_deref()
    }

    pub fn set_domain_ids(&mut self, ids: Vec<usize>) {
        assert_eq!(ids.len(), self.n);
        self.domain_ids = Some(ids);
    }

    /// Same topology and labels, different feature matrix.
    pub fn with_features(&self, features: Mat<T>) -> Result<Graph<T>> {
        if features.nrows() != self.n {
            return Err(CgrlError::FeatureRowMismatch {
                rows: features.nrows(),
                n: self.n,
            });
        }
        Ok(Graph {
            features,
            ..self.clone()
        })
    }

    pub fn num_edges(&self) -> usize {
        self.neighbor_lists.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Directed edge list (u, v) for every u in N(v), ordered by v then u.
    pub fn directed_edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(2 * self.num_edges());
        for v in 0..self.n {
            for &u in &self.neighbor_lists[v] {
                out.push((u, v));
            }
        }
        out
    }

    /// Stable hash over topology and labels; used to assert that feature
    /// shifts leave both untouched.
    pub fn structure_hash(&self) -> u64 {
        let mut h = Fnv::new();
        h.write_usize(self.n);
        for v in 0..self.n {
            h.write_usize(self.neighbor_lists[v].len());
            for &u in &self.neighbor_lists[v] {
                h.write_usize(u);
            }
        }
        for &y in &self.labels {
            h.write_usize(y);
        }
        h.finish()
    }
}

/// Build an undirected graph from an edge list.
///
/// Edges are symmetrized and deduplicated; neighbor lists come out sorted,
/// so iteration order is deterministic across runs.
pub fn build_graph<T: Scalar>(
    edges: &[(usize, usize)],
    features: Mat<T>,
    labels: Vec<usize>,
) -> Result<Graph<T>> {
    let n = features.nrows();
    if labels.len() != n {
        return Err(CgrlError::FeatureRowMismatch {
            rows: labels.len(),
            n,
        });
    }
    let num_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut lists: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &(u, v) in edges {
        if u == v {
            return Err(CgrlError::SelfLoopInput(u));
        }
        for id in [u, v] {
            if id >= n {
                return Err(CgrlError::NodeOutOfRange { id, n });
            }
        }
        lists[u].push(v);
        lists[v].push(u);
    }
    for list in &mut lists {
        list.sort_unstable();
        list.dedup();
    }
    Ok(Graph {
        n,
        neighbor_lists: lists,
        features,
        labels,
        num_classes,
        domain_ids: None,
    })
}

/// 1 / (sqrt(deg+(u)) * sqrt(deg+(v))) with self-loop-augmented degrees.
///
/// Defined for adjacent pairs and for the self-term u = v.
pub fn normalized_coeff<T: Scalar>(g: &Graph<T>, u: usize, v: usize) -> Result<T> {
    for id in [u, v] {
        if id >= g.n() {
            return Err(CgrlError::NodeOutOfRange { id, n: g.n() });
        }
    }
    if u != v && g.neighbors(v).binary_search(&u).is_err() {
        return Err(CgrlError::NotAdjacent(u, v));
    }
    let du = (g.degree(u) + 1) as f64;
    let dv = (g.degree(v) + 1) as f64;
    Ok(T::cast(1.0 / (du.sqrt() * dv.sqrt())))
}

/// Disjoint train/val/test node index sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeSplit {
    pub train_ids: Vec<usize>,
    pub val_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
}

/// Deterministic shuffled partition of [0, n) into the requested ratios.
pub fn split_nodes(n: usize, ratios: (f64, f64, f64), seed: u64) -> Result<NodeSplit> {
    let (a, b, c) = ratios;
    if a < 0.0 || b < 0.0 || c < 0.0 || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(CgrlError::BadSplitRatios([a, b, c]));
    }
    let mut ids: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n_train = (n as f64 * a).round() as usize;
    let n_val = ((n as f64 * b).round() as usize).min(n - n_train);
    let mut train_ids: Vec<usize> = ids[..n_train].to_vec();
    let mut val_ids: Vec<usize> = ids[n_train..n_train + n_val].to_vec();
    let mut test_ids: Vec<usize> = ids[n_train + n_val..].to_vec();
    train_ids.sort_unstable();
    val_ids.sort_unstable();
    test_ids.sort_unstable();
    Ok(NodeSplit {
        train_ids,
        val_ids,
        test_ids,
    })
}

/// Subgraph induced by a center node and its k-hop neighborhood.
#[derive(Debug, Clone)]
pub struct EgoGraph {
    pub center: usize,
    /// Sorted member node ids (global numbering); always contains `center`.
    pub members: Vec<usize>,
    /// Neighbor lists in local (members-index) numbering.
    pub neighbor_lists: Vec<Vec<usize>>,
}

pub fn extract_ego_graph<T: Scalar>(g: &Graph<T>, center: usize, hops: usize) -> Result<EgoGraph> {
    if center >= g.n() {
        return Err(CgrlError::NodeOutOfRange {
            id: center,
            n: g.n(),
        });
    }
    let mut dist = vec![usize::MAX; g.n()];
    dist[center] = 0;
    let mut queue = VecDeque::from([center]);
    while let Some(v) = queue.pop_front() {
        if dist[v] == hops {
            continue;
        }
        for &u in g.neighbors(v) {
            if dist[u] == usize::MAX {
                dist[u] = dist[v] + 1;
                queue.push_back(u);
            }
        }
    }
    let members: Vec<usize> = (0..g.n()).filter(|&v| dist[v] != usize::MAX).collect();
    let local: std::collections::HashMap<usize, usize> = members
        .iter()
        .enumerate()
        .map(|(i, &v)| (v, i))
        .collect();
    let neighbor_lists = members
        .iter()
        .map(|&v| {
            g.neighbors(v)
                .iter()
                .filter_map(|u| local.get(u).copied())
                .collect()
        })
        .collect();
    Ok(EgoGraph {
        center,
        members,
        neighbor_lists,
    })
}

// ---------------------------------------------------------------------------
// Text formats: "u v" edge lines, numeric CSV features, one label per line.
// ---------------------------------------------------------------------------

pub fn write_edge_list<T: Scalar>(g: &Graph<T>, path: &Path) -> Result<()> {
    let mut out = String::new();
    for v in 0..g.n() {
        for &u in g.neighbors(v) {
            if v < u {
                out.push_str(&format!("{v} {u}\n"));
            }
        }
    }
    write_text(path, &out)
}

pub fn read_edge_list(path: &Path) -> Result<Vec<(usize, usize)>> {
    let text = read_text(path)?;
    let mut edges = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let parse = |tok: Option<&str>| -> Result<usize> {
            tok.and_then(|t| t.parse().ok()).ok_or_else(|| CgrlError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: format!("expected \"u v\", got {line:?}"),
            })
        };
        edges.push((parse(it.next())?, parse(it.next())?));
    }
    Ok(edges)
}

pub fn write_features_csv<T: Scalar>(x: &Mat<T>, path: &Path) -> Result<()> {
    let mut out = String::new();
    for row in x.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{:?}", v.as_f64())).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    write_text(path, &out)
}

pub fn read_features_csv<T: Scalar>(path: &Path) -> Result<Mat<T>> {
    let text = read_text(path)?;
    let mut rows: Vec<Vec<T>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<T>, _> = line
            .split(',')
            .map(|c| c.trim().parse::<f64>().map(T::cast))
            .collect();
        rows.push(row.map_err(|e| CgrlError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    let ncols = rows.first().map_or(0, Vec::len);
    let flat: Vec<T> = rows.iter().flatten().copied().collect();
    Mat::from_shape_vec((rows.len(), ncols), flat).map_err(|e| CgrlError::Parse {
        path: path.display().to_string(),
        line: 0,
        msg: format!("ragged csv: {e}"),
    })
}

pub fn write_labels(labels: &[usize], path: &Path) -> Result<()> {
    let mut out = String::new();
    for y in labels {
        out.push_str(&format!("{y}\n"));
    }
    write_text(path, &out)
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let text = read_text(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.trim().parse().map_err(|_| CgrlError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: format!("expected integer label, got {l:?}"),
            })
        })
        .collect()
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f =
        std::fs::File::create(path).map_err(|e| CgrlError::io(path.display().to_string(), e))?;
    f.write_all(text.as_bytes())
        .map_err(|e| CgrlError::io(path.display().to_string(), e))
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| CgrlError::io(path.display().to_string(), e))
}

/// FNV-1a, used for structure hashes and config hashes.
pub struct Fnv(u64);

impl Fnv {
    pub fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    pub fn write_bytes(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x1000_0000_01b3);
        }
    }

    pub fn write_usize(&mut self, v: usize) {
        self.write_bytes(&(v as u64).to_le_bytes());
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fnv {
    fn default() -> Self {
        Self::new()
    }
}

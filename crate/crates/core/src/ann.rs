//! Nearest-neighbour search over the centre bank.
//!
//! Two backends share one query interface: an exact scan, and a directed
//! graph whose out-edges are pruned by the occlusion rule and searched
//! best-first with backtracking. All distances are squared Euclidean.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::squared_distance;
use crate::rng::{stream_rng, Stream};

/// Banks up to this size are searched exactly.
pub const EXACT_THRESHOLD: usize = 2_000;
pub const DEFAULT_MAX_DEGREE: usize = 24;
/// Candidate pool size per node before pruning, as a multiple of `max_degree`.
pub const CANDIDATE_MULTIPLIER: usize = 4;

const GRAPH_MAGIC: &[u8; 4] = b"NNKG";
const GRAPH_VERSION: u16 = 1;
const DISTANCE_BLOCK_ROWS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbour {
    pub id: usize,
    pub sq_dist: f64,
}

impl Neighbour {
    fn order(&self, other: &Self) -> Ordering {
        self.sq_dist.total_cmp(&other.sq_dist).then(self.id.cmp(&other.id))
    }
}

impl Eq for Neighbour {}

impl PartialOrd for Neighbour {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Neighbour {
    fn cmp(&self, other: &Self) -> Ordering {
        self.order(other)
    }
}

pub fn ids_of(neighbours: &[Neighbour]) -> Vec<usize> {
    neighbours.iter().map(|n| n.id).collect()
}

fn check_query(query: &[f64], centres: ArrayView2<'_, f64>) -> Result<()> {
    if query.len() != centres.ncols() {
        return Err(Error::DimensionMismatch {
            expected: centres.ncols(),
            found: query.len(),
        });
    }
    if query.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("search query"));
    }
    Ok(())
}

/// Exact k nearest rows of `centres`, ascending by distance then id.
pub fn brute_force_knn(
    query: &[f64],
    centres: ArrayView2<'_, f64>,
    k: usize,
    exclude: Option<usize>,
) -> Result<Vec<Neighbour>> {
    check_query(query, centres)?;
    let m = centres.nrows();
    let available = m - usize::from(exclude.is_some_and(|e| e < m));
    if k == 0 || k > available {
        return Err(Error::KTooLarge { k, available });
    }
    let mut all: Vec<Neighbour> = centres
        .outer_iter()
        .enumerate()
        .filter(|&(id, _)| Some(id) != exclude)
        .map(|(id, row)| Neighbour {
            id,
            sq_dist: squared_distance(query, row.as_slice().expect("standard layout")),
        })
        .collect();
    if k < all.len() {
        all.select_nth_unstable(k - 1);
        all.truncate(k);
    }
    all.sort_unstable();
    Ok(all)
}

/// Occlusion-pruned directed k-NN graph.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GraphIndex {
    adjacency: Vec<Vec<u32>>,
    max_degree: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchParams {
    pub k: usize,
    /// Maximum number of vertices whose distance is evaluated.
    pub backtrack_budget: usize,
    /// Extra random entry points on top of node 0.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for SearchParams {
    fn default() -> Self {
        Self {
            k: 100,
            backtrack_budget: 6_000,
            restarts: 4,
            seed: 0,
        }
    }
}

impl SearchParams {
    pub fn with_k(k: usize) -> Self {
        let base = Self::default();
        Self {
            k,
            backtrack_budget: base.backtrack_budget.max(k),
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("search k must be at least 1"));
        }
        if self.backtrack_budget < self.k {
            return Err(Error::config(format!(
                "backtrack_budget ({}) must be at least k ({})",
                self.backtrack_budget, self.k
            )));
        }
        Ok(())
    }
}

/// Squared norms of each row.
fn row_norms(points: ArrayView2<'_, f64>) -> Array1<f64> {
    points.map_axis(Axis(1), |r| r.dot(&r))
}

/// Exact `k` nearest neighbours of every row among the other rows.
///
/// Candidates are shortlisted from blocked matrix products, then their
/// distances are recomputed directly so the final ordering is exact.
pub fn all_knn(points: ArrayView2<'_, f64>, k: usize) -> Result<Vec<Vec<Neighbour>>> {
    let m = points.nrows();
    if k == 0 || k >= m {
        return Err(Error::KTooLarge {
            k,
            available: m.saturating_sub(1),
        });
    }
    let shortlist = (k + 8).min(m - 1);
    let norms = row_norms(points);
    let mut out = Vec::with_capacity(m);
    let mut start = 0;
    while start < m {
        let end = (start + DISTANCE_BLOCK_ROWS).min(m);
        let block = points.slice(s![start..end, ..]);
        let gram = block.dot(&points.t());
        for (offset, g) in gram.outer_iter().enumerate() {
            let i = start + offset;
            let mut approx: Vec<Neighbour> = g
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(j, &dot)| Neighbour {
                    id: j,
                    sq_dist: norms[i] + norms[j] - 2.0 * dot,
                })
                .collect();
            if shortlist < approx.len() {
                approx.select_nth_unstable(shortlist - 1);
                approx.truncate(shortlist);
            }
            let row = points.row(i);
            let row = row.as_slice().expect("standard layout");
            let mut exact: Vec<Neighbour> = approx
                .into_iter()
                .map(|n| Neighbour {
                    id: n.id,
                    sq_dist: squared_distance(row, points.row(n.id).as_slice().expect("standard layout")),
                })
                .collect();
            exact.sort_unstable();
            exact.truncate(k);
            out.push(exact);
        }
        start = end;
    }
    Ok(out)
}

/// Keep candidate `r` only if no already-kept `q` is closer to `r` than the
/// source node is. Candidates must be sorted by distance from the source.
pub fn occlusion_prune(points: ArrayView2<'_, f64>, candidates: &[Neighbour], max_degree: usize) -> Vec<Neighbour> {
    let mut kept: Vec<Neighbour> = Vec::with_capacity(max_degree);
    for cand in candidates {
        if kept.len() == max_degree {
            break;
        }
        let r = points.row(cand.id);
        let r = r.as_slice().expect("standard layout");
        let occluded = kept
            .iter()
            .any(|q| squared_distance(points.row(q.id).as_slice().expect("standard layout"), r) < cand.sq_dist);
        if !occluded {
            kept.push(*cand);
        }
    }
    kept
}

impl GraphIndex {
    pub fn build(centres: ArrayView2<'_, f64>, max_degree: usize) -> Result<Self> {
        let m = centres.nrows();
        if m < 2 {
            return Err(Error::input(format!("graph index needs at least 2 points, got {m}")));
        }
        if max_degree == 0 {
            return Err(Error::config("max_degree must be at least 1"));
        }
        if centres.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("index points"));
        }
        let centres = centres.as_standard_layout();
        let pool = (CANDIDATE_MULTIPLIER * max_degree).min(m - 1);
        let candidates = all_knn(centres.view(), pool)?;
        let adjacency = candidates
            .iter()
            .map(|cands| {
                occlusion_prune(centres.view(), cands, max_degree)
                    .into_iter()
                    .map(|n| n.id as u32)
                    .collect()
            })
            .collect();
        Ok(Self { adjacency, max_degree })
    }

    pub fn node_count(&self) -> usize {
        self.adjacency.len()
    }

    pub fn max_degree(&self) -> usize {
        self.max_degree
    }

    pub fn edges(&self, node: usize) -> &[u32] {
        &self.adjacency[node]
    }

    /// Best-first traversal with backtracking.
    ///
    /// Each step takes the closest vertex that still has unexplored out-edges
    /// and evaluates its next edge in order of length. When the frontier runs
    /// dry before the budget does, the lowest-id unvisited vertex is used as a
    /// fresh entry point, so a budget of `node_count` is exhaustive.
    pub fn search(
        &self,
        centres: ArrayView2<'_, f64>,
        query: &[f64],
        params: &SearchParams,
        exclude: Option<usize>,
    ) -> Result<Vec<Neighbour>> {
        let m = self.node_count();
        if m == 0 {
            return Err(Error::input("search on an empty index"));
        }
        if centres.nrows() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                found: centres.nrows(),
            });
        }
        params.validate()?;
        check_query(query, centres)?;

        let mut visited = vec![false; m];
        let mut evaluated = 0usize;
        let budget = params.backtrack_budget.min(m);
        let mut best: BinaryHeap<Neighbour> = BinaryHeap::with_capacity(params.k + 1);
        let mut frontier: BinaryHeap<Reverse<(Neighbour, usize)>> = BinaryHeap::new();
        let mut scan_from = 0usize;

        let mut evaluate = |node: usize,
                            visited: &mut Vec<bool>,
                            best: &mut BinaryHeap<Neighbour>,
                            frontier: &mut BinaryHeap<Reverse<(Neighbour, usize)>>| {
            visited[node] = true;
            evaluated += 1;
            let n = Neighbour {
                id: node,
                sq_dist: squared_distance(query, centres.row(node).as_slice().expect("standard layout")),
            };
            if Some(node) != exclude {
                if best.len() < params.k {
                    best.push(n);
                } else if n < *best.peek().expect("non-empty") {
                    best.pop();
                    best.push(n);
                }
            }
            frontier.push(Reverse((n, 0)));
            evaluated
        };

        let mut entries = vec![0usize];
        let mut rng = stream_rng(params.seed, Stream::SearchEntry);
        entries.extend((0..params.restarts).map(|_| rng.random_range(0..m)));
        let mut used = 0usize;
        for e in entries {
            if used < budget && !visited[e] {
                used = evaluate(e, &mut visited, &mut best, &mut frontier);
            }
        }

        while used < budget {
            match frontier.pop() {
                Some(Reverse((vertex, next_edge))) => {
                    let edges = &self.adjacency[vertex.id];
                    if next_edge < edges.len() {
                        frontier.push(Reverse((vertex, next_edge + 1)));
                        let target = edges[next_edge] as usize;
                        if !visited[target] {
                            used = evaluate(target, &mut visited, &mut best, &mut frontier);
                        }
                    }
                }
                None => {
                    while scan_from < m && visited[scan_from] {
                        scan_from += 1;
                    }
                    if scan_from == m {
                        break;
                    }
                    used = evaluate(scan_from, &mut visited, &mut best, &mut frontier);
                }
            }
        }

        Ok(best.into_sorted_vec())
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(GRAPH_MAGIC)?;
        w.write_u16::<LittleEndian>(GRAPH_VERSION)?;
        w.write_u64::<LittleEndian>(self.adjacency.len() as u64)?;
        w.write_u32::<LittleEndian>(self.max_degree as u32)?;
        for edges in &self.adjacency {
            w.write_u32::<LittleEndian>(edges.len() as u32)?;
            for &e in edges {
                w.write_u32::<LittleEndian>(e)?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != GRAPH_MAGIC {
            return Err(Error::format("graph header", "bad magic, expected NNKG"));
        }
        let version = r.read_u16::<LittleEndian>()?;
        if version != GRAPH_VERSION {
            return Err(Error::format("graph header", format!("unsupported version {version}")));
        }
        let node_count = r.read_u64::<LittleEndian>()? as usize;
        let max_degree = r.read_u32::<LittleEndian>()? as usize;
        let mut adjacency = Vec::with_capacity(node_count.min(1 << 24));
        for node in 0..node_count {
            let count = r.read_u32::<LittleEndian>()? as usize;
            if count > max_degree {
                return Err(Error::format(
                    format!("graph node {node}"),
                    format!("out-degree {count} exceeds max_degree {max_degree}"),
                ));
            }
            let mut edges = Vec::with_capacity(count);
            for _ in 0..count {
                let e = r.read_u32::<LittleEndian>()?;
                if e as usize >= node_count || e as usize == node {
                    return Err(Error::format(
                        format!("graph node {node}"),
                        format!("invalid edge to {e}"),
                    ));
                }
                edges.push(e);
            }
            adjacency.push(edges);
        }
        Ok(Self { adjacency, max_degree })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

/// Exact search for small banks, graph search above [`EXACT_THRESHOLD`].
#[derive(Clone, Debug)]
pub enum AnnIndex {
    Exact,
    Graph(GraphIndex),
}

impl AnnIndex {
    pub fn build(centres: ArrayView2<'_, f64>, max_degree: usize) -> Result<Self> {
        if centres.nrows() <= EXACT_THRESHOLD {
            Ok(AnnIndex::Exact)
        } else {
            Ok(AnnIndex::Graph(GraphIndex::build(centres, max_degree)?))
        }
    }

    /// Up to `params.k` neighbours; fewer when the bank is too small.
    pub fn search(
        &self,
        centres: ArrayView2<'_, f64>,
        query: &[f64],
        params: &SearchParams,
        exclude: Option<usize>,
    ) -> Result<Vec<Neighbour>> {
        match self {
            AnnIndex::Exact => {
                let available = centres.nrows() - usize::from(exclude.is_some_and(|e| e < centres.nrows()));
                if available == 0 {
                    return Err(Error::input("search on an empty index"));
                }
                brute_force_knn(query, centres, params.k.min(available), exclude)
            }
            AnnIndex::Graph(g) => g.search(centres, query, params, exclude),
        }
    }
}

/// Fraction of `truth` ids recovered in `found`.
pub fn recall(found: &[Neighbour], truth: &[Neighbour]) -> f64 {
    if truth.is_empty() {
        return 1.0;
    }
    let hits = truth.iter().filter(|t| found.iter().any(|f| f.id == t.id)).count();
    hits as f64 / truth.len() as f64
}

/// Row-major copy that is guaranteed contiguous.
pub fn contiguous(points: ArrayView2<'_, f64>) -> Array2<f64> {
    points.as_standard_layout().into_owned()
}

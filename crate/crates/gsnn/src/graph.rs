//! Undirected simple graphs and the generators used by the experiments.
//!
//! Graphs are immutable after construction: a fixed node ordering, a sorted
//! edge list with canonical edge indices, and per-node sorted adjacency.

use rand::Rng;
use std::collections::{BTreeSet, HashMap, VecDeque};

use crate::{Error, Result};

/// Undirected simple graph with a canonical edge index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    n: usize,
    edges: Vec<(usize, usize)>,
    adj: Vec<Vec<usize>>,
    /// Per node: (edge id, neighbor), aligned with `adj`.
    incidence: Vec<Vec<(usize, usize)>>,
    edge_index: HashMap<(usize, usize), usize>,
}

impl Graph {
    /// Builds a graph from an edge list. Edges are normalized to `(min, max)`,
    /// deduplicated, and sorted; self-loops and out-of-range endpoints are
    /// rejected.
    pub fn new(n: usize, raw_edges: &[(usize, usize)]) -> Result<Self> {
        let mut set = BTreeSet::new();
        for &(a, b) in raw_edges {
            if a == b {
                return Err(Error::Parameter(format!("self-loop at node {a}")));
            }
            if a >= n || b >= n {
                return Err(Error::Parameter(format!(
                    "edge ({a}, {b}) out of range for n = {n}"
                )));
            }
            set.insert((a.min(b), a.max(b)));
        }
        let edges: Vec<(usize, usize)> = set.into_iter().collect();
        let mut adj = vec![Vec::new(); n];
        let mut incidence = vec![Vec::new(); n];
        let mut edge_index = HashMap::with_capacity(edges.len());
        for (id, &(u, v)) in edges.iter().enumerate() {
            adj[u].push(v);
            adj[v].push(u);
            incidence[u].push((id, v));
            incidence[v].push((id, u));
            edge_index.insert((u, v), id);
        }
        // BTreeSet iteration keeps each adjacency list sorted already; the
        // assert documents the invariant rather than repairing it.
        debug_assert!(adj.iter().all(|l| l.windows(2).all(|w| w[0] < w[1])));
        Ok(Self {
            n,
            edges,
            adj,
            incidence,
            edge_index,
        })
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Edge list in canonical order, each as `(u, v)` with `u < v`.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn edge(&self, id: usize) -> (usize, usize) {
        self.edges[id]
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.adj[v]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.adj[v].len()
    }

    /// `(edge id, neighbor)` pairs for all edges incident to `v`.
    pub fn incident(&self, v: usize) -> &[(usize, usize)] {
        &self.incidence[v]
    }

    /// Canonical index of the edge `{a, b}`, if present.
    pub fn edge_id(&self, a: usize, b: usize) -> Option<usize> {
        self.edge_index.get(&(a.min(b), a.max(b))).copied()
    }

    pub fn max_degree(&self) -> usize {
        self.adj.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn is_connected(&self) -> bool {
        if self.n == 0 {
            return true;
        }
        let mut seen = vec![false; self.n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        let mut count = 1;
        while let Some(v) = queue.pop_front() {
            for &u in &self.adj[v] {
                if !seen[u] {
                    seen[u] = true;
                    count += 1;
                    queue.push_back(u);
                }
            }
        }
        count == self.n
    }
}

/// A choice of source/target per edge. The default orients every edge from its
/// smaller to its larger endpoint.
#[derive(Debug, Clone)]
pub struct Orientation {
    pairs: Vec<(usize, usize)>,
}

impl Orientation {
    pub fn default_for(graph: &Graph) -> Self {
        Self {
            pairs: graph.edges().to_vec(),
        }
    }

    /// `(source, target)` of edge `id`.
    pub fn oriented(&self, id: usize) -> (usize, usize) {
        self.pairs[id]
    }

    /// Flips the orientation of a single edge (used in orientation-independence
    /// tests).
    pub fn flip(&mut self, id: usize) {
        let (s, t) = self.pairs[id];
        self.pairs[id] = (t, s);
    }
}

/// Mean Earth radius in kilometers for the great-circle rule.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Preferential-attachment random graph seeded with an `m`-node clique.
///
/// Each node beyond the clique attaches to `m` distinct existing nodes chosen
/// with probability proportional to their degree. Deterministic per seed.
pub fn barabasi_albert(n: usize, m: usize, seed: u64) -> Result<Graph> {
    if m < 1 || m >= n {
        return Err(Error::Parameter(format!(
            "barabasi_albert requires 1 <= m < n, got n = {n}, m = {m}"
        )));
    }
    let mut rng = crate::seeded_rng(seed);
    let mut edges = Vec::new();
    // Attachment pool: one entry per degree unit.
    let mut pool: Vec<usize> = Vec::new();
    for u in 0..m {
        for v in (u + 1)..m {
            edges.push((u, v));
            pool.push(u);
            pool.push(v);
        }
    }
    if m == 1 {
        // A single seed node has degree zero and can never be drawn by degree;
        // give it one pool entry so the chain can start.
        pool.push(0);
    }
    for v in m..n {
        let mut targets = BTreeSet::new();
        while targets.len() < m {
            let t = pool[rng.gen_range(0..pool.len())];
            targets.insert(t);
        }
        for &t in &targets {
            edges.push((t, v));
            pool.push(t);
            pool.push(v);
        }
    }
    let graph = Graph::new(n, &edges)?;
    debug_assert!(graph.is_connected());
    Ok(graph)
}

/// Small-world ring lattice with independent edge rewiring.
///
/// Starts from a ring where each node links to its `k/2` nearest neighbors on
/// each side; every edge is rewired with probability `p` to a uniformly random
/// non-duplicate, non-loop endpoint. Disconnected outcomes are regenerated
/// with `seed + 1`.
pub fn watts_strogatz(n: usize, k: usize, p: f64, seed: u64) -> Result<Graph> {
    if k == 0 || k % 2 != 0 || k >= n {
        return Err(Error::Parameter(format!(
            "watts_strogatz requires even k with 0 < k < n, got n = {n}, k = {k}"
        )));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Parameter(format!(
            "rewiring probability must lie in [0, 1], got {p}"
        )));
    }
    let mut attempt_seed = seed;
    loop {
        let mut rng = crate::seeded_rng(attempt_seed);
        let mut present: BTreeSet<(usize, usize)> = BTreeSet::new();
        let norm = |a: usize, b: usize| (a.min(b), a.max(b));
        for u in 0..n {
            for j in 1..=(k / 2) {
                present.insert(norm(u, (u + j) % n));
            }
        }
        let ring: Vec<(usize, usize)> = present.iter().copied().collect();
        for (u, v) in ring {
            if rng.gen::<f64>() >= p {
                continue;
            }
            present.remove(&(u, v));
            // Keep the `u` endpoint, resample the other until valid.
            loop {
                let w = rng.gen_range(0..n);
                if w != u && !present.contains(&norm(u, w)) {
                    present.insert(norm(u, w));
                    break;
                }
            }
        }
        let edges: Vec<(usize, usize)> = present.into_iter().collect();
        let graph = Graph::new(n, &edges)?;
        if graph.is_connected() {
            return Ok(graph);
        }
        attempt_seed += 1;
    }
}

/// Great-circle distance between two `(latitude°, longitude°)` points.
pub fn haversine_km(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (lat1, lon1) = (a.0.to_radians(), a.1.to_radians());
    let (lat2, lon2) = (b.0.to_radians(), b.1.to_radians());
    let dlat = lat2 - lat1;
    let dlon = lon2 - lon1;
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

/// Geographic graph: an edge wherever the great-circle distance is within
/// `radius_km`.
pub fn geo_graph(coords: &[(f64, f64)], radius_km: f64) -> Result<Graph> {
    if coords.len() < 2 {
        return Err(Error::Parameter(format!(
            "geo_graph needs at least 2 points, got {}",
            coords.len()
        )));
    }
    if radius_km <= 0.0 {
        return Err(Error::Parameter(format!(
            "radius must be positive, got {radius_km}"
        )));
    }
    let mut edges = Vec::new();
    for i in 0..coords.len() {
        for j in (i + 1)..coords.len() {
            if haversine_km(coords[i], coords[j]) <= radius_km {
                edges.push((i, j));
            }
        }
    }
    Graph::new(coords.len(), &edges)
}

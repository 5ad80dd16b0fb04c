//! Sparsified Vietoris–Rips persistent homology in degrees 0 and 1.
//!
//! A window of an embedded trajectory becomes a [`WindowPointCloud`]. From it
//! we build the symmetric k-nearest-neighbor graph (k = ceil(sqrt(n))), clip
//! the filtration radius at an upper quantile of the k-NN edge lengths, and
//! compute persistence:
//!
//! * H0 by a union-find sweep over the sorted edges (elder rule, ties broken
//!   by vertex index; surviving components truncated at the clip radius);
//! * H1 by Z/2 boundary-matrix reduction over the (edges, triangles) clique
//!   complex of the sparsified graph, processing triangles in filtration
//!   order. The union-find sweep doubles as the clearing step of the twist
//!   optimization: triangle pivots can only land on cycle-creating edges, so
//!   no dedicated degree-1 reduction is needed.
//!
//! Infinite bars are truncated at the clip radius and zero-persistence pairs
//! are dropped everywhere. [`oracle`] holds a brute-force reference
//! implementation for small clouds.

pub mod oracle;

use crate::error::{Error, Result};

/// A point cloud extracted from one sliding window of an embedded trajectory.
#[derive(Debug, Clone)]
pub struct WindowPointCloud {
    points: Vec<f64>,
    n: usize,
    dim: usize,
    /// Time (seconds) at the center of the window's signal footprint.
    pub center_time: f64,
    /// Neighbor count for the sparsified graph; `ceil(sqrt(n))` by default.
    pub knn_k: usize,
}

impl WindowPointCloud {
    /// Build a cloud from a flat row-major `n × dim` point matrix with the
    /// default sparsification level `k = ceil(sqrt(n))`.
    pub fn new(points: Vec<f64>, dim: usize, center_time: f64) -> Result<Self> {
        let k_default = |n: usize| ((n as f64).sqrt().ceil() as usize).min(n.saturating_sub(1));
        Self::with_k_impl(points, dim, center_time, k_default)
    }

    /// Same as [`WindowPointCloud::new`] but with an explicit neighbor count
    /// (used by tests to force the full graph with `k = n - 1`).
    pub fn with_k(points: Vec<f64>, dim: usize, center_time: f64, k: usize) -> Result<Self> {
        Self::with_k_impl(points, dim, center_time, |_| k)
    }

    fn with_k_impl(
        points: Vec<f64>,
        dim: usize,
        center_time: f64,
        k: impl Fn(usize) -> usize,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("point dimension must be positive".into()));
        }
        if points.len() % dim != 0 {
            return Err(Error::Config(format!(
                "point buffer length {} is not a multiple of dim {dim}",
                points.len()
            )));
        }
        let n = points.len() / dim;
        let knn_k = k(n).min(n.saturating_sub(1));
        Ok(WindowPointCloud {
            points,
            n,
            dim,
            center_time,
            knn_k,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }
}

/// One undirected edge of the sparsified graph, with `i < j`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub i: u32,
    pub j: u32,
    pub length: f64,
}

/// Clipped k-NN edge set of a window, sorted ascending by
/// `(length, i, j)`.
#[derive(Debug, Clone)]
pub struct SparseEdges {
    /// Number of vertices in the underlying cloud.
    pub n: usize,
    /// Edges with `length <= clip_radius`, sorted by `(length, i, j)`.
    pub edges: Vec<Edge>,
    /// Filtration truncation radius (quantile of the k-NN edge lengths).
    pub clip_radius: f64,
}

/// A single birth–death pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PersistencePair {
    pub birth: f64,
    pub death: f64,
    /// Homological degree of the feature: 0 or 1.
    pub dim: u8,
}

/// Persistence diagram of one window; infinite bars truncated at
/// `clip_radius`, zero-persistence pairs dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct PersistenceDiagram {
    pub pairs: Vec<PersistencePair>,
    pub clip_radius: f64,
}

impl PersistenceDiagram {
    /// Iterate over the pairs of one homological degree.
    pub fn pairs_in_dim(&self, dim: u8) -> impl Iterator<Item = &PersistencePair> {
        self.pairs.iter().filter(move |p| p.dim == dim)
    }

    /// Sort pairs by `(dim, birth, death)` for canonical comparisons.
    pub fn sort_pairs(&mut self) {
        self.pairs.sort_by(|a, b| {
            a.dim
                .cmp(&b.dim)
                .then(a.birth.total_cmp(&b.birth))
                .then(a.death.total_cmp(&b.death))
        });
    }
}

/// Euclidean distance between two points of equal dimension.
fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc.sqrt()
}

/// Linear-interpolation quantile of an ascending-sorted slice
/// (the convention that puts the p-quantile at fractional order statistic
/// `p * (len - 1)`).
pub(crate) fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    if sorted.len() == 1 {
        return sorted[0];
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = (pos.floor() as usize).min(sorted.len() - 1);
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Default sparsification level `k = ceil(sqrt(n))`, clamped to `n - 1`.
pub fn default_knn_k(n: usize) -> usize {
    ((n as f64).sqrt().ceil() as usize).min(n.saturating_sub(1))
}

/// Streaming k-nearest-neighbor selection: per-vertex sorted top-k lists
/// under the `(distance, neighbor index)` order, stored in one flat buffer.
struct KnnSelect {
    k: usize,
    slots: Vec<(f64, u32)>,
    len: Vec<u32>,
}

impl KnnSelect {
    fn new(m: usize, k: usize) -> Self {
        KnnSelect {
            k,
            slots: vec![(0.0, 0); m * k],
            len: vec![0; m],
        }
    }

    /// Offer neighbor `u` at distance `d` to vertex `v`.
    #[inline]
    fn offer(&mut self, v: usize, u: u32, d: f64) {
        let base = v * self.k;
        let l = self.len[v] as usize;
        if l == self.k {
            let worst = self.slots[base + l - 1];
            if d > worst.0 || (d == worst.0 && u > worst.1) {
                return;
            }
        }
        let pos = self.slots[base..base + l]
            .partition_point(|&(bd, bu)| bd < d || (bd == d && bu < u));
        let end = if l == self.k { l - 1 } else { l };
        self.slots.copy_within(base + pos..base + end, base + pos + 1);
        self.slots[base + pos] = (d, u);
        if l < self.k {
            self.len[v] = (l + 1) as u32;
        }
    }

    /// Deduplicated undirected edge keys `(i << 32) | j` with `i < j`.
    fn keys(&self) -> Vec<u64> {
        let mut keys = Vec::with_capacity(self.len.iter().map(|&l| l as usize).sum());
        for (v, &l) in self.len.iter().enumerate() {
            for &(_, u) in &self.slots[v * self.k..v * self.k + l as usize] {
                let (a, b) = if (v as u32) < u {
                    (v as u32, u)
                } else {
                    (u, v as u32)
                };
                keys.push(((a as u64) << 32) | b as u64);
            }
        }
        keys.sort_unstable();
        keys.dedup();
        keys
    }
}

/// Shared tail of edge-set construction: sort by `(length, i, j)`, clip at
/// the quantile of the undirected edge-length multiset.
fn edges_from_keys(
    n: usize,
    keys: Vec<u64>,
    length_of: impl Fn(u32, u32) -> f64,
    quantile: f64,
) -> Result<SparseEdges> {
    if !(0.0..=1.0).contains(&quantile) {
        return Err(Error::Config(format!(
            "quantile must lie in [0, 1], got {quantile}"
        )));
    }
    let mut edges: Vec<Edge> = keys
        .into_iter()
        .map(|key| {
            let i = (key >> 32) as u32;
            let j = (key & 0xffff_ffff) as u32;
            Edge {
                i,
                j,
                length: length_of(i, j),
            }
        })
        .collect();
    edges.sort_unstable_by(|a, b| {
        a.length
            .total_cmp(&b.length)
            .then(a.i.cmp(&b.i))
            .then(a.j.cmp(&b.j))
    });

    let lengths: Vec<f64> = edges.iter().map(|e| e.length).collect();
    let clip_radius = quantile_sorted(&lengths, quantile);
    let cut = edges.partition_point(|e| e.length <= clip_radius);
    edges.truncate(cut);

    Ok(SparseEdges {
        n,
        edges,
        clip_radius,
    })
}

/// Build the clipped symmetric k-NN edge set of a window.
///
/// The clip radius is the `quantile`-quantile (linear interpolation) of the
/// undirected k-NN edge-length multiset; edges longer than it are dropped.
pub fn build_sparse_edges(cloud: &WindowPointCloud, quantile: f64) -> Result<SparseEdges> {
    if cloud.n < 2 {
        return Err(Error::DegenerateCloud { n: cloud.n });
    }
    let n = cloud.n;
    let k = cloud.knn_k.clamp(1, n - 1);

    // Full distance matrix of the window (symmetric, zero diagonal).
    let mut dist = vec![0.0f64; n * n];
    let mut sel = KnnSelect::new(n, k);
    for a in 0..n {
        for b in (a + 1)..n {
            let d = euclidean(cloud.point(a), cloud.point(b));
            dist[a * n + b] = d;
            dist[b * n + a] = d;
            sel.offer(a, b as u32, d);
            sel.offer(b, a as u32, d);
        }
    }
    edges_from_keys(
        n,
        sel.keys(),
        |i, j| dist[i as usize * n + j as usize],
        quantile,
    )
}

/// Pairwise distances between trajectory points up to `band` indices apart,
/// shared by every window of a sweep (a window only ever pairs points at
/// most one window length apart).
pub struct TrajectoryDistances {
    n: usize,
    band: usize,
    /// `rows[a * band + (b - a - 1)] = d(a, b)` for `a < b <= a + band`.
    rows: Vec<f64>,
}

impl TrajectoryDistances {
    /// Precompute banded distances for a flat row-major `n × dim` point
    /// matrix (`band` is clamped to `n - 1`).
    pub fn build(points: &[f64], dim: usize, band: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("point dimension must be positive".into()));
        }
        if points.len() % dim != 0 {
            return Err(Error::Config(format!(
                "point buffer length {} is not a multiple of dim {dim}",
                points.len()
            )));
        }
        let n = points.len() / dim;
        let band = band.min(n.saturating_sub(1));
        let mut rows = vec![0.0f64; n * band];
        for a in 0..n {
            let pa = &points[a * dim..(a + 1) * dim];
            let width = band.min(n - 1 - a);
            for off in 0..width {
                let b = a + 1 + off;
                rows[a * band + off] = euclidean(pa, &points[b * dim..(b + 1) * dim]);
            }
        }
        Ok(TrajectoryDistances { n, band, rows })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Distance between trajectory points `a != b` with `|a - b| <= band`.
    #[inline]
    pub fn dist(&self, a: usize, b: usize) -> f64 {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        debug_assert!(lo < hi && hi - lo <= self.band);
        self.rows[lo * self.band + (hi - lo - 1)]
    }
}

/// [`build_sparse_edges`] for the window `[start, start + m)` of a
/// trajectory with precomputed banded distances; `k = ceil(sqrt(m))`.
/// Produces exactly the edge set of the equivalent standalone cloud.
pub fn build_sparse_edges_banded(
    dists: &TrajectoryDistances,
    start: usize,
    m: usize,
    quantile: f64,
) -> Result<SparseEdges> {
    if m < 2 {
        return Err(Error::DegenerateCloud { n: m });
    }
    if start + m > dists.n || m - 1 > dists.band {
        return Err(Error::Config(format!(
            "window [{start}, {}) outside trajectory of {} points (band {})",
            start + m,
            dists.n,
            dists.band
        )));
    }
    let k = default_knn_k(m);
    let mut sel = KnnSelect::new(m, k);
    for a in 0..m {
        let base = (start + a) * dists.band;
        let row = &dists.rows[base..base + (m - 1 - a)];
        for (off, &d) in row.iter().enumerate() {
            let b = a + 1 + off;
            sel.offer(a, b as u32, d);
            sel.offer(b, a as u32, d);
        }
    }
    edges_from_keys(
        m,
        sel.keys(),
        |i, j| dists.dist(start + i as usize, start + j as usize),
        quantile,
    )
}

/// Incremental sliding-window k-NN selection over a banded trajectory.
///
/// Holds the per-vertex neighbor lists of one window position and updates
/// them in place when the window advances by one sample: only vertices whose
/// list contained the departing point are rescanned; every other list just
/// considers the arriving point. The produced edge sets are exactly those of
/// [`build_sparse_edges_banded`] at each position.
pub struct SweepKnn<'a> {
    dists: &'a TrajectoryDistances,
    m: usize,
    k: usize,
    start: usize,
    /// Ring-buffered per-vertex lists in global trajectory indices, sorted
    /// by `(distance, index)`; vertex `g` lives in slot `g % m`.
    slots: Vec<(f64, u32)>,
    len: Vec<u32>,
}

impl<'a> SweepKnn<'a> {
    pub fn new(dists: &'a TrajectoryDistances, start: usize, m: usize) -> Result<Self> {
        if m < 2 {
            return Err(Error::DegenerateCloud { n: m });
        }
        if start + m > dists.n || m - 1 > dists.band {
            return Err(Error::Config(format!(
                "window [{start}, {}) outside trajectory of {} points (band {})",
                start + m,
                dists.n,
                dists.band
            )));
        }
        let k = default_knn_k(m);
        let mut sweep = SweepKnn {
            dists,
            m,
            k,
            start,
            slots: vec![(0.0, 0); m * k],
            len: vec![0; m],
        };
        for g in start..start + m {
            sweep.rebuild(g);
        }
        Ok(sweep)
    }

    pub fn start(&self) -> usize {
        self.start
    }

    /// Rescan every current window member as a neighbor candidate of `g`.
    fn rebuild(&mut self, g: usize) {
        self.len[g % self.m] = 0;
        for u in self.start..self.start + self.m {
            if u != g {
                self.offer(g, u as u32, self.dists.dist(g, u));
            }
        }
    }

    /// Offer neighbor `u` at distance `d` to vertex `g` (global indices).
    #[inline]
    fn offer(&mut self, g: usize, u: u32, d: f64) {
        let slot = g % self.m;
        let base = slot * self.k;
        let l = self.len[slot] as usize;
        if l == self.k {
            let worst = self.slots[base + l - 1];
            if d > worst.0 || (d == worst.0 && u > worst.1) {
                return;
            }
        }
        let pos = self.slots[base..base + l]
            .partition_point(|&(bd, bu)| bd < d || (bd == d && bu < u));
        let end = if l == self.k { l - 1 } else { l };
        self.slots.copy_within(base + pos..base + end, base + pos + 1);
        self.slots[base + pos] = (d, u);
        if l < self.k {
            self.len[slot] = (l + 1) as u32;
        }
    }

    /// Slide the window one sample forward. The window must stay inside the
    /// trajectory.
    pub fn advance(&mut self) {
        let removed = self.start as u32;
        let added = self.start + self.m;
        debug_assert!(added < self.dists.n, "window slid past the trajectory");
        self.start += 1;
        for g in self.start..self.start + self.m - 1 {
            let slot = g % self.m;
            let base = slot * self.k;
            let l = self.len[slot] as usize;
            if self.slots[base..base + l].iter().any(|&(_, u)| u == removed) {
                // The departing point was one of g's neighbors; the next
                // best candidate is unknown without a full rescan.
                self.rebuild(g);
            } else {
                self.offer(g, added as u32, self.dists.dist(g, added));
            }
        }
        // The arriving point reuses the departing point's ring slot.
        self.rebuild(added);
    }

    /// Clipped edge set of the current window, in window-local indices.
    pub fn edges(&self, quantile: f64) -> Result<SparseEdges> {
        let start = self.start as u32;
        let mut keys = Vec::with_capacity(self.m * self.k);
        for g in self.start..self.start + self.m {
            let slot = g % self.m;
            let base = slot * self.k;
            let local_g = g as u32 - start;
            for &(_, u) in &self.slots[base..base + self.len[slot] as usize] {
                let local_u = u - start;
                let (a, b) = if local_g < local_u {
                    (local_g, local_u)
                } else {
                    (local_u, local_g)
                };
                keys.push(((a as u64) << 32) | b as u64);
            }
        }
        keys.sort_unstable();
        keys.dedup();
        edges_from_keys(
            self.m,
            keys,
            |i, j| {
                self.dists
                    .dist(self.start + i as usize, self.start + j as usize)
            },
            quantile,
        )
    }
}

/// Union-find with path compression whose representative is always the
/// smallest vertex index of its component (elder rule by index).
struct UnionFind {
    parent: Vec<u32>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n as u32).collect(),
        }
    }

    fn find(&mut self, v: u32) -> u32 {
        let mut root = v;
        while self.parent[root as usize] != root {
            root = self.parent[root as usize];
        }
        let mut cur = v;
        while self.parent[cur as usize] != root {
            let next = self.parent[cur as usize];
            self.parent[cur as usize] = root;
            cur = next;
        }
        root
    }

    /// Merge the components of `a` and `b`. Returns `false` if they already
    /// coincide (the edge closes a cycle). The surviving root is the smaller
    /// index; the higher root index is the component that dies.
    fn union(&mut self, a: u32, b: u32) -> bool {
        let ra = self.find(a);
        let rb = self.find(b);
        if ra == rb {
            return false;
        }
        let (keep, die) = if ra < rb { (ra, rb) } else { (rb, ra) };
        self.parent[die as usize] = keep;
        true
    }
}

/// Degree-0 persistence of a clipped edge set.
///
/// Every component is born at 0; each merging edge kills the younger
/// component (all ages tie, so the higher root index dies); components alive
/// at the clip radius are truncated there. Zero-persistence pairs are
/// dropped.
pub fn persistence_h0(edges: &SparseEdges) -> PersistenceDiagram {
    let mut uf = UnionFind::new(edges.n);
    let mut pairs = Vec::new();
    for e in &edges.edges {
        if uf.union(e.i, e.j) && e.length > 0.0 {
            pairs.push(PersistencePair {
                birth: 0.0,
                death: e.length,
                dim: 0,
            });
        }
    }
    if edges.clip_radius > 0.0 {
        let survivors = (0..edges.n as u32).filter(|&v| uf.find(v) == v).count();
        for _ in 0..survivors {
            pairs.push(PersistencePair {
                birth: 0.0,
                death: edges.clip_radius,
                dim: 0,
            });
        }
    }
    pairs.sort_by(|a, b| a.death.total_cmp(&b.death));
    PersistenceDiagram {
        pairs,
        clip_radius: edges.clip_radius,
    }
}

/// A triangle of the clique complex, stored as the ascending ranks of its
/// three boundary edges in the sorted edge order.
#[derive(Debug, Clone, Copy)]
struct Triangle {
    rows: [u32; 3],
}

/// Z/2 column addition: symmetric difference of two sorted rank lists.
fn symmetric_difference_sorted(a: &[u32], b: &[u32], out: &mut Vec<u32>) {
    out.clear();
    let (mut i, mut j) = (0usize, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => {
                out.push(a[i]);
                i += 1;
            }
            std::cmp::Ordering::Greater => {
                out.push(b[j]);
                j += 1;
            }
            std::cmp::Ordering::Equal => {
                i += 1;
                j += 1;
            }
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
}

/// Reusable scratch space for per-window persistence. One engine serves any
/// number of windows in sequence; reusing it across a sweep avoids
/// re-allocating adjacency lists and reduction columns for every window.
#[derive(Default)]
pub struct DiagramEngine {
    positive: Vec<bool>,
    /// Forward adjacency: `adj[i]` holds `(j, rank)` for edges `i < j`,
    /// sorted by neighbor.
    adj: Vec<Vec<(u32, u32)>>,
    triangles: Vec<Triangle>,
    /// CSR cofacet lists: triangles containing each positive edge, by
    /// ascending triangle rank.
    cof_start: Vec<u32>,
    cof_cursor: Vec<u32>,
    cof_items: Vec<u32>,
    /// Reduction state keyed by triangle rank: whether the triangle is a
    /// claimed pivot, and the `(offset, len)` of its stored column in `cols`.
    tri_claimed: Vec<bool>,
    tri_spans: Vec<(u32, u32)>,
    cols: Vec<u32>,
    cur: Vec<u32>,
    scratch: Vec<u32>,
    scratch2: Vec<u32>,
}

impl DiagramEngine {
    pub fn new() -> Self {
        Self::default()
    }

    /// Full per-window computation: H0 and H1 of a clipped edge set merged
    /// into one diagram sorted by `(dim, birth, death)`.
    pub fn diagram(&mut self, edges: &SparseEdges) -> PersistenceDiagram {
        let mut diagram = persistence_h0(edges);
        self.h1_into(edges, &mut diagram.pairs);
        diagram.sort_pairs();
        diagram
    }

    /// Degree-1 persistence only, sorted by `(birth, death)`.
    pub fn h1(&mut self, edges: &SparseEdges) -> PersistenceDiagram {
        let mut pairs = Vec::new();
        self.h1_into(edges, &mut pairs);
        pairs.sort_by(|a, b| a.birth.total_cmp(&b.birth).then(a.death.total_cmp(&b.death)));
        PersistenceDiagram {
            pairs,
            clip_radius: edges.clip_radius,
        }
    }

    /// Degree-1 persistence of a clipped edge set over the (edges,
    /// triangles) clique complex, via the anti-transposed ("cohomology")
    /// Z/2 reduction: one column per cycle-creating edge, holding its
    /// triangle cofacets, with the earliest cofacet as pivot. Columns are
    /// processed by descending edge rank; the pairing is the same as that of
    /// the ordinary boundary reduction in the same simplexwise order, but
    /// almost every column here claims its pivot without any additions.
    ///
    /// Triangles carry the filtration value of their longest edge; cycles
    /// alive at the clip radius are truncated there and zero-persistence
    /// pairs dropped.
    fn h1_into(&mut self, edges: &SparseEdges, out: &mut Vec<PersistencePair>) {
        let n_edges = edges.edges.len();
        if edges.n < 3 || n_edges < 3 {
            // A degenerate multigraph cannot occur (edges are deduped), so
            // fewer than three edges admit no cycle.
            return;
        }

        // Cycle-creating ("positive") edges: the H1 birth candidates and the
        // only columns that need reducing (all other edges are cleared by
        // their H0 pairing).
        let mut uf = UnionFind::new(edges.n);
        self.positive.clear();
        self.positive.resize(n_edges, false);
        for (rank, e) in edges.edges.iter().enumerate() {
            if !uf.union(e.i, e.j) {
                self.positive[rank] = true;
            }
        }

        // Forward adjacency with edge ranks, neighbor-sorted, for triangle
        // enumeration.
        if self.adj.len() < edges.n {
            self.adj.resize_with(edges.n, Vec::new);
        }
        for list in &mut self.adj[..edges.n] {
            list.clear();
        }
        for (rank, e) in edges.edges.iter().enumerate() {
            self.adj[e.i as usize].push((e.j, rank as u32));
        }
        for list in &mut self.adj[..edges.n] {
            list.sort_unstable();
        }

        // Every 3-clique {i < j < m} is discovered once, from its (i, j)
        // edge: common forward neighbors of i and j all lie beyond j.
        self.triangles.clear();
        for (rank_ij, e) in edges.edges.iter().enumerate() {
            let (li, lj) = (&self.adj[e.i as usize], &self.adj[e.j as usize]);
            let (mut a, mut b) = (0usize, 0usize);
            while a < li.len() && b < lj.len() {
                let (va, ra) = li[a];
                let (vb, rb) = lj[b];
                if va < vb {
                    a += 1;
                } else if vb < va {
                    b += 1;
                } else {
                    let mut rows = [ra, rb, rank_ij as u32];
                    rows.sort_unstable();
                    self.triangles.push(Triangle { rows });
                    a += 1;
                    b += 1;
                }
            }
        }
        // Filtration value of a triangle is the length of its highest-ranked
        // edge, so sorting by ascending rank triple is a filtration order.
        self.triangles
            .sort_unstable_by_key(|t| (t.rows[2], t.rows[1], t.rows[0]));
        let tri_count = self.triangles.len();

        // CSR cofacet lists of the positive edges, ascending triangle rank.
        self.cof_start.clear();
        self.cof_start.resize(n_edges + 1, 0);
        for tri in &self.triangles {
            for &r in &tri.rows {
                if self.positive[r as usize] {
                    self.cof_start[r as usize + 1] += 1;
                }
            }
        }
        for i in 0..n_edges {
            self.cof_start[i + 1] += self.cof_start[i];
        }
        self.cof_cursor.clear();
        self.cof_cursor.extend_from_slice(&self.cof_start[..n_edges]);
        self.cof_items
            .resize(self.cof_start[n_edges] as usize, 0);
        for (t_rank, tri) in self.triangles.iter().enumerate() {
            for &r in &tri.rows {
                if self.positive[r as usize] {
                    let cursor = &mut self.cof_cursor[r as usize];
                    self.cof_items[*cursor as usize] = t_rank as u32;
                    *cursor += 1;
                }
            }
        }

        self.tri_claimed.clear();
        self.tri_claimed.resize(tri_count, false);
        self.tri_spans.clear();
        self.tri_spans.resize(tri_count, (0, 0));
        self.cols.clear();
        let DiagramEngine {
            positive,
            triangles,
            cof_start,
            cof_items,
            tri_claimed,
            tri_spans,
            cols,
            cur,
            scratch,
            scratch2,
            ..
        } = self;
        for e_rank in (0..n_edges).rev() {
            if !positive[e_rank] {
                continue;
            }
            cur.clear();
            cur.extend_from_slice(
                &cof_items[cof_start[e_rank] as usize..cof_start[e_rank + 1] as usize],
            );
            loop {
                let Some(&p) = cur.first() else {
                    // Empty column: essential cycle, truncated at the clip
                    // radius.
                    let birth = edges.edges[e_rank].length;
                    if birth < edges.clip_radius {
                        out.push(PersistencePair {
                            birth,
                            death: edges.clip_radius,
                            dim: 1,
                        });
                    }
                    break;
                };
                let pi = p as usize;
                if !tri_claimed[pi] {
                    let birth = edges.edges[e_rank].length;
                    let death = edges.edges[triangles[pi].rows[2] as usize].length;
                    if birth < death {
                        out.push(PersistencePair {
                            birth,
                            death,
                            dim: 1,
                        });
                    }
                    tri_claimed[pi] = true;
                    tri_spans[pi] = (cols.len() as u32, cur.len() as u32);
                    cols.extend_from_slice(cur);
                    break;
                }
                let (off, len) = tri_spans[pi];
                let (off, len) = (off as usize, len as usize);
                if cur.len() < len {
                    // Keep the shorter column as the stored representative
                    // for this pivot — any valid pivot column works, and
                    // short representatives keep later reductions short.
                    scratch.clear();
                    scratch.extend_from_slice(&cols[off..off + len]);
                    tri_spans[pi] = (cols.len() as u32, cur.len() as u32);
                    cols.extend_from_slice(cur);
                    symmetric_difference_sorted(cur, scratch, scratch2);
                    std::mem::swap(cur, scratch2);
                } else {
                    let other = &cols[off..off + len];
                    symmetric_difference_sorted(cur, other, scratch);
                    std::mem::swap(cur, scratch);
                }
            }
        }
    }
}

/// Degree-1 persistence with a one-shot [`DiagramEngine`].
pub fn persistence_h1(edges: &SparseEdges) -> PersistenceDiagram {
    DiagramEngine::new().h1(edges)
}

/// Full per-window computation: sparse edges, then H0 and H1 merged into one
/// diagram sorted by `(dim, birth, death)`.
pub fn window_diagram(cloud: &WindowPointCloud, quantile: f64) -> Result<PersistenceDiagram> {
    let edges = build_sparse_edges(cloud, quantile)?;
    Ok(DiagramEngine::new().diagram(&edges))
}

/// Serialize a diagram as text lines `dim birth death`.
pub fn dump_diagram(diagram: &PersistenceDiagram) -> String {
    let mut out = String::new();
    for p in &diagram.pairs {
        out.push_str(&format!("{} {} {}\n", p.dim, p.birth, p.death));
    }
    out
}

/// Parse the [`dump_diagram`] format back into a diagram.
pub fn parse_diagram(text: &str, clip_radius: f64) -> Result<PersistenceDiagram> {
    let mut pairs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let parse_err = || Error::Config(format!("bad diagram line {}: {line:?}", lineno + 1));
        let dim: u8 = it.next().ok_or_else(parse_err)?.parse().map_err(|_| parse_err())?;
        let birth: f64 = it.next().ok_or_else(parse_err)?.parse().map_err(|_| parse_err())?;
        let death: f64 = it.next().ok_or_else(parse_err)?.parse().map_err(|_| parse_err())?;
        if birth > death {
            return Err(Error::InvalidPair { birth, death });
        }
        pairs.push(PersistencePair { birth, death, dim });
    }
    Ok(PersistenceDiagram { pairs, clip_radius })
}

//! Two-group networks: raw graph ingestion, k-core decomposition, and the
//! core–periphery split into a source group A and a target group B.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::textfmt::Document;

pub const SPLIT_MAGIC: &str = "CAUMAX-SPLIT v1";

/// Undirected simple graph with optional node covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct RawGraph {
    node_count: usize,
    /// Sorted, deduplicated pairs with `u < v`.
    edges: Vec<(usize, usize)>,
    features: Option<Array2<f64>>,
}

impl RawGraph {
    /// Builds a graph from arbitrary pairs; self-loops are dropped and
    /// duplicates (in either orientation) collapse to one edge.
    pub fn from_edges(node_count: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut edges = Vec::new();
        for (u, v) in pairs {
            if u >= node_count || v >= node_count {
                return Err(Error::Index(format!("edge ({u},{v}) outside 0..{node_count}")));
            }
            if u != v {
                edges.push((u.min(v), u.max(v)));
            }
        }
        edges.sort_unstable();
        edges.dedup();
        Ok(RawGraph { node_count, edges, features: None })
    }

    pub fn with_features(mut self, features: Array2<f64>) -> Result<Self> {
        if features.nrows() != self.node_count {
            return Err(Error::Dimension(format!(
                "feature matrix has {} rows, graph has {} nodes",
                features.nrows(),
                self.node_count
            )));
        }
        self.features = Some(features);
        Ok(self)
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn features(&self) -> Option<&Array2<f64>> {
        self.features.as_ref()
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.node_count];
        for &(u, v) in &self.edges {
            deg[u] += 1;
            deg[v] += 1;
        }
        deg
    }

    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.node_count];
        for &(u, v) in &self.edges {
            adj[u].push(v);
            adj[v].push(u);
        }
        adj
    }
}

/// Parses the whitespace edge-list format. Blank lines and lines starting
/// with `#` are ignored. The node count is one past the largest id seen.
pub fn parse_edge_list(text: &str) -> Result<RawGraph> {
    let mut pairs = Vec::new();
    let mut max_id: Option<usize> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut toks = line.split_whitespace();
        let mut next_id = || -> Result<usize> {
            let tok = toks.next().ok_or_else(|| Error::Parse {
                line: idx + 1,
                message: "expected two node ids".into(),
            })?;
            tok.parse::<usize>()
                .map_err(|_| Error::Parse { line: idx + 1, message: format!("invalid node id `{tok}`") })
        };
        let u = next_id()?;
        let v = next_id()?;
        if toks.next().is_some() {
            return Err(Error::Parse { line: idx + 1, message: "trailing tokens after edge".into() });
        }
        max_id = Some(max_id.map_or(u.max(v), |m| m.max(u).max(v)));
        pairs.push((u, v));
    }
    RawGraph::from_edges(max_id.map_or(0, |m| m + 1), pairs)
}

/// Parses a headerless CSV of covariates, one row per node.
pub fn parse_feature_csv(text: &str) -> Result<Array2<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|tok| {
                tok.trim().parse::<f64>().map_err(|_| Error::Parse {
                    line: idx + 1,
                    message: format!("invalid covariate `{}`", tok.trim()),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Dimension(format!(
                    "feature row {} has {} columns, expected {}",
                    idx + 1,
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    let cols = rows.first().map_or(0, Vec::len);
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(Array2::from_shape_vec((rows.len(), cols), flat).expect("rectangular by construction"))
}

pub fn load_edge_list(path: &Path, feature_path: Option<&Path>) -> Result<RawGraph> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let graph = parse_edge_list(&text)?;
    match feature_path {
        None => Ok(graph),
        Some(fp) => {
            let text = fs::read_to_string(fp).map_err(|e| Error::io(fp, e))?;
            graph.with_features(parse_feature_csv(&text)?)
        }
    }
}

/// Core number of every node (bucket peeling, linear in |E|).
pub fn compute_coreness(g: &RawGraph) -> Vec<usize> {
    let n = g.node_count();
    let adj = g.adjacency();
    let mut deg: Vec<usize> = adj.iter().map(Vec::len).collect();
    let max_deg = deg.iter().copied().max().unwrap_or(0);

    // nodes sorted by degree, with bucket start offsets
    let mut bin = vec![0usize; max_deg + 2];
    for &d in &deg {
        bin[d] += 1;
    }
    let mut start = 0;
    for b in bin.iter_mut() {
        let count = *b;
        *b = start;
        start += count;
    }
    let mut pos = vec![0usize; n];
    let mut order = vec![0usize; n];
    for v in 0..n {
        pos[v] = bin[deg[v]];
        order[pos[v]] = v;
        bin[deg[v]] += 1;
    }
    for d in (1..=max_deg).rev() {
        bin[d] = bin[d - 1];
    }
    if !bin.is_empty() {
        bin[0] = 0;
    }

    for i in 0..n {
        let v = order[i];
        for &u in &adj[v] {
            if deg[u] > deg[v] {
                let du = deg[u];
                let pu = pos[u];
                let pw = bin[du];
                let w = order[pw];
                if u != w {
                    order.swap(pu, pw);
                    pos[u] = pw;
                    pos[w] = pu;
                }
                bin[du] += 1;
                deg[u] -= 1;
            }
        }
    }
    deg
}

/// A cross-group edge from local source index to local target index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossEdge {
    pub source: usize,
    pub target: usize,
    pub weight: f64,
}

/// Source group A and target group B with dense local indices.
///
/// `source_ids[i]` / `target_ids[j]` map local indices back to the ids of
/// the graph the network was split from.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoGroupNetwork {
    source_ids: Vec<usize>,
    target_ids: Vec<usize>,
    edges_a: Vec<(usize, usize)>,
    edges_b: Vec<(usize, usize)>,
    edges_ab: Vec<CrossEdge>,
    features_a: Array2<f64>,
    features_b: Array2<f64>,
    /// Per target: (source, weight), sorted by source.
    source_neighbors: Vec<Vec<(usize, f64)>>,
}

impl TwoGroupNetwork {
    /// Validates and assembles a network. Feature matrices may have zero
    /// columns when covariates have not been attached yet.
    pub fn new(
        source_ids: Vec<usize>,
        target_ids: Vec<usize>,
        edges_a: Vec<(usize, usize)>,
        edges_b: Vec<(usize, usize)>,
        edges_ab: Vec<CrossEdge>,
        features_a: Array2<f64>,
        features_b: Array2<f64>,
    ) -> Result<Self> {
        let (n_a, n_b) = (source_ids.len(), target_ids.len());
        let ids_a: BTreeSet<_> = source_ids.iter().collect();
        if ids_a.len() != n_a || target_ids.iter().any(|id| ids_a.contains(id)) {
            return Err(Error::Split("source and target groups must be disjoint and duplicate-free".into()));
        }
        for &(u, v) in &edges_a {
            if u >= n_a || v >= n_a {
                return Err(Error::Index(format!("source edge ({u},{v}) outside group of {n_a}")));
            }
        }
        for &(u, v) in &edges_b {
            if u >= n_b || v >= n_b {
                return Err(Error::Index(format!("target edge ({u},{v}) outside group of {n_b}")));
            }
        }
        if features_a.nrows() != n_a || features_b.nrows() != n_b || features_a.ncols() != features_b.ncols() {
            return Err(Error::Dimension(format!(
                "features {:?}/{:?} do not fit groups of {n_a}/{n_b}",
                features_a.dim(),
                features_b.dim()
            )));
        }
        let mut source_neighbors = vec![Vec::new(); n_b];
        for e in &edges_ab {
            if e.source >= n_a || e.target >= n_b {
                return Err(Error::Index(format!("cross edge ({},{}) outside groups", e.source, e.target)));
            }
            if !e.weight.is_finite() {
                return Err(Error::Parameter(format!("cross edge weight {} is not finite", e.weight)));
            }
            source_neighbors[e.target].push((e.source, e.weight));
        }
        for (j, nbrs) in source_neighbors.iter_mut().enumerate() {
            nbrs.sort_by_key(|&(i, _)| i);
            if nbrs.windows(2).any(|w| w[0].0 == w[1].0) {
                return Err(Error::Split(format!("duplicate cross edge into target {j}")));
            }
            if nbrs.is_empty() {
                return Err(Error::Split(format!("target {j} has no source neighbor")));
            }
        }
        Ok(TwoGroupNetwork { source_ids, target_ids, edges_a, edges_b, edges_ab, features_a, features_b, source_neighbors })
    }

    pub fn source_count(&self) -> usize {
        self.source_ids.len()
    }

    pub fn target_count(&self) -> usize {
        self.target_ids.len()
    }

    pub fn source_ids(&self) -> &[usize] {
        &self.source_ids
    }

    pub fn target_ids(&self) -> &[usize] {
        &self.target_ids
    }

    pub fn edges_a(&self) -> &[(usize, usize)] {
        &self.edges_a
    }

    pub fn edges_b(&self) -> &[(usize, usize)] {
        &self.edges_b
    }

    pub fn edges_ab(&self) -> &[CrossEdge] {
        &self.edges_ab
    }

    pub fn features_a(&self) -> &Array2<f64> {
        &self.features_a
    }

    pub fn features_b(&self) -> &Array2<f64> {
        &self.features_b
    }

    pub fn covariate_dim(&self) -> usize {
        self.features_a.ncols()
    }

    /// N_A(j): source neighbors of target `j` with their edge weights.
    pub fn source_neighbors(&self, j: usize) -> &[(usize, f64)] {
        &self.source_neighbors[j]
    }

    /// d_j for every target.
    pub fn cross_degree(&self) -> Vec<usize> {
        self.source_neighbors.iter().map(Vec::len).collect()
    }

    /// Per source: its target neighbors with weights.
    pub fn target_neighbors(&self) -> Vec<Vec<(usize, f64)>> {
        let mut out = vec![Vec::new(); self.source_count()];
        for e in &self.edges_ab {
            out[e.source].push((e.target, e.weight));
        }
        for v in &mut out {
            v.sort_by_key(|&(j, _)| j);
        }
        out
    }

    /// Total degree of each source node: within-A plus cross edges.
    pub fn source_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.source_count()];
        for &(u, v) in &self.edges_a {
            deg[u] += 1;
            deg[v] += 1;
        }
        for e in &self.edges_ab {
            deg[e.source] += 1;
        }
        deg
    }

    pub fn with_features(mut self, features_a: Array2<f64>, features_b: Array2<f64>) -> Result<Self> {
        if features_a.nrows() != self.source_count()
            || features_b.nrows() != self.target_count()
            || features_a.ncols() != features_b.ncols()
        {
            return Err(Error::Dimension(format!(
                "features {:?}/{:?} do not fit groups of {}/{}",
                features_a.dim(),
                features_b.dim(),
                self.source_count(),
                self.target_count()
            )));
        }
        self.features_a = features_a;
        self.features_b = features_b;
        Ok(self)
    }

    pub fn to_document(&self) -> Document {
        let mut doc = Document::new(SPLIT_MAGIC);
        doc.set("source_count", self.source_count());
        doc.set("target_count", self.target_count());
        doc.set("covariate_dim", self.covariate_dim());
        let ids = |v: &[usize]| v.iter().map(|&x| x as u64).collect::<Vec<_>>();
        let pairs = |v: &[(usize, usize)]| v.iter().flat_map(|&(a, b)| [a as u64, b as u64]).collect::<Vec<_>>();
        doc.push_ints("source_ids", 1, self.source_count(), ids(&self.source_ids));
        doc.push_ints("target_ids", 1, self.target_count(), ids(&self.target_ids));
        doc.push_ints("edges_a", self.edges_a.len(), 2, pairs(&self.edges_a));
        doc.push_ints("edges_b", self.edges_b.len(), 2, pairs(&self.edges_b));
        let ab: Vec<(usize, usize)> = self.edges_ab.iter().map(|e| (e.source, e.target)).collect();
        doc.push_ints("edges_ab", ab.len(), 2, pairs(&ab));
        doc.push_real("edges_ab_weight", self.edges_ab.len(), 1, self.edges_ab.iter().map(|e| e.weight).collect());
        doc.push_matrix("features_a", &self.features_a);
        doc.push_matrix("features_b", &self.features_b);
        doc
    }

    pub fn from_document(doc: &Document) -> Result<Self> {
        let ids = |name: &str| -> Result<Vec<usize>> { Ok(doc.ints(name)?.2.iter().map(|&x| x as usize).collect()) };
        let pairs = |name: &str| -> Result<Vec<(usize, usize)>> {
            let (_, cols, data) = doc.ints(name)?;
            if cols != 2 {
                return Err(Error::Dimension(format!("block `{name}` must have 2 columns")));
            }
            Ok(data.chunks(2).map(|c| (c[0] as usize, c[1] as usize)).collect())
        };
        let ab = pairs("edges_ab")?;
        let weights = doc.matrix("edges_ab_weight")?;
        if weights.len() != ab.len() {
            return Err(Error::Dimension("edges_ab_weight length differs from edges_ab".into()));
        }
        let edges_ab = ab
            .into_iter()
            .zip(weights.iter())
            .map(|((source, target), &weight)| CrossEdge { source, target, weight })
            .collect();
        TwoGroupNetwork::new(
            ids("source_ids")?,
            ids("target_ids")?,
            pairs("edges_a")?,
            pairs("edges_b")?,
            edges_ab,
            doc.matrix("features_a")?,
            doc.matrix("features_b")?,
        )
    }
}

/// Number of source nodes for a `p` percent split of `n` nodes: ⌈p·n/100⌉.
pub fn source_quota(n: usize, p: f64) -> usize {
    let exact = p * n as f64 / 100.0;
    // guard against 44.99999999 style rounding when p·n/100 is integral
    let nearest = exact.round();
    if (exact - nearest).abs() < 1e-9 {
        nearest as usize
    } else {
        exact.ceil() as usize
    }
}

/// Splits `g` into the top-`p`% nodes by coreness (group A) and the
/// remaining nodes adjacent to A (group B).
///
/// Ranking is by coreness, then degree (both descending), then node id.
/// Local indices in both groups follow ascending original id.
pub fn core_periphery_split(g: &RawGraph, p: f64) -> Result<TwoGroupNetwork> {
    if !(p > 0.0 && p <= 100.0) {
        return Err(Error::Split(format!("split percentage {p} outside (0, 100)")));
    }
    let n = g.node_count();
    let coreness = compute_coreness(g);
    let degree = g.degrees();
    let mut ranked: Vec<usize> = (0..n).collect();
    ranked.sort_by(|&a, &b| coreness[b].cmp(&coreness[a]).then(degree[b].cmp(&degree[a])).then(a.cmp(&b)));
    let quota = source_quota(n, p).min(n);
    if quota == 0 {
        return Err(Error::Split("source group is empty".into()));
    }
    let mut in_a = vec![false; n];
    for &v in &ranked[..quota] {
        in_a[v] = true;
    }
    let mut touches_a = vec![false; n];
    for &(u, v) in g.edges() {
        if in_a[u] && !in_a[v] {
            touches_a[v] = true;
        }
        if in_a[v] && !in_a[u] {
            touches_a[u] = true;
        }
    }
    let source_ids: Vec<usize> = (0..n).filter(|&v| in_a[v]).collect();
    let target_ids: Vec<usize> = (0..n).filter(|&v| !in_a[v] && touches_a[v]).collect();
    if target_ids.is_empty() {
        return Err(Error::Split("target group is empty after restricting to nodes adjacent to the source group".into()));
    }
    const NONE: usize = usize::MAX;
    let mut local_a = vec![NONE; n];
    let mut local_b = vec![NONE; n];
    for (i, &v) in source_ids.iter().enumerate() {
        local_a[v] = i;
    }
    for (j, &v) in target_ids.iter().enumerate() {
        local_b[v] = j;
    }
    let mut edges_a = Vec::new();
    let mut edges_b = Vec::new();
    let mut edges_ab = Vec::new();
    for &(u, v) in g.edges() {
        match (local_a[u], local_a[v], local_b[u], local_b[v]) {
            (a, b, _, _) if a != NONE && b != NONE => edges_a.push((a.min(b), a.max(b))),
            (_, _, a, b) if a != NONE && b != NONE => edges_b.push((a.min(b), a.max(b))),
            (a, _, _, b) if a != NONE && b != NONE => edges_ab.push(CrossEdge { source: a, target: b, weight: 1.0 }),
            (_, b, a, _) if a != NONE && b != NONE => edges_ab.push(CrossEdge { source: b, target: a, weight: 1.0 }),
            _ => {}
        }
    }
    edges_a.sort_unstable();
    edges_b.sort_unstable();
    edges_ab.sort_by_key(|e| (e.source, e.target));
    let (features_a, features_b) = match g.features() {
        Some(f) => (f.select(ndarray::Axis(0), &source_ids), f.select(ndarray::Axis(0), &target_ids)),
        None => (Array2::zeros((source_ids.len(), 0)), Array2::zeros((target_ids.len(), 0))),
    };
    TwoGroupNetwork::new(source_ids, target_ids, edges_a, edges_b, edges_ab, features_a, features_b)
}

/// Preferential-attachment graph.
///
/// Construction: nodes `0..=attachment` form a clique; every later node `v`
/// attaches to `attachment` distinct earlier nodes chosen with probability
/// proportional to degree. The edge count is therefore exactly
/// `C(attachment+1, 2) + attachment·(n − attachment − 1)`.
pub fn synthesize_graph(n: usize, attachment: usize, seed: u64) -> Result<RawGraph> {
    if attachment == 0 || n < attachment + 1 {
        return Err(Error::Parameter(format!("need attachment ≥ 1 and n ≥ attachment+1, got n={n}, attachment={attachment}")));
    }
    let mut rng = rng::stream(seed, "graph", &[]);
    let mut edges = Vec::new();
    // every edge endpoint appears once per incident edge
    let mut endpoints: Vec<usize> = Vec::new();
    for u in 0..=attachment {
        for v in (u + 1)..=attachment {
            edges.push((u, v));
            endpoints.push(u);
            endpoints.push(v);
        }
    }
    let mut chosen = Vec::with_capacity(attachment);
    for v in (attachment + 1)..n {
        chosen.clear();
        while chosen.len() < attachment {
            let t = endpoints[rng.gen_range(0..endpoints.len())];
            if !chosen.contains(&t) {
                chosen.push(t);
            }
        }
        for &t in &chosen {
            edges.push((t, v));
            endpoints.push(t);
            endpoints.push(v);
        }
    }
    RawGraph::from_edges(n, edges)
}

pub fn pa_edge_count(n: usize, attachment: usize) -> usize {
    attachment * (attachment + 1) / 2 + attachment * (n - attachment - 1)
}

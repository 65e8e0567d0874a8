//! Time-expanded relocation graph and its exact spectral embedding.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use crate::error::{Error, Result};
use crate::hexgrid::{hex_distance, HexCoord};
use crate::sim::Transition;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TergNode {
    pub cell: HexCoord,
    pub bucket: u32,
}

/// Undirected graph whose edge weights count empty relocation moves between
/// (cell, time bucket) states.
#[derive(Clone, Debug)]
pub struct RelocationGraph {
    bucket_ticks: u32,
    index: HashMap<TergNode, usize>,
    nodes: Vec<TergNode>,
    /// Keyed by `(i, j)` with `i < j`.
    edges: BTreeMap<(usize, usize), u32>,
}

impl RelocationGraph {
    pub fn new(bucket_ticks: u32) -> Self {
        RelocationGraph { bucket_ticks: bucket_ticks.max(1), index: HashMap::new(), nodes: Vec::new(), edges: BTreeMap::new() }
    }

    pub fn bucket_ticks(&self) -> u32 {
        self.bucket_ticks
    }

    pub fn node_at(&self, cell: HexCoord, tick: u32) -> TergNode {
        TergNode { cell, bucket: tick / self.bucket_ticks }
    }

    pub fn nodes(&self) -> &[TergNode] {
        &self.nodes
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn node_index(&self, n: &TergNode) -> Option<usize> {
        self.index.get(n).copied()
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, u32)> + '_ {
        self.edges.iter().map(|(&(i, j), &w)| (i, j, w))
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    fn intern(&mut self, n: TergNode) -> usize {
        if let Some(&i) = self.index.get(&n) {
            return i;
        }
        let i = self.nodes.len();
        self.nodes.push(n);
        self.index.insert(n, i);
        i
    }

    /// Count one relocation move. A move that stays on the same node is ignored.
    pub fn record(&mut self, from: TergNode, to: TergNode) -> Result<()> {
        if hex_distance(from.cell, to.cell) > 1 || from.bucket.abs_diff(to.bucket) > 1 {
            return Err(Error::InvalidArgument(format!(
                "nodes {}@{} and {}@{} are not adjacent",
                from.cell, from.bucket, to.cell, to.bucket
            )));
        }
        if from == to {
            return Ok(());
        }
        let a = self.intern(from);
        let b = self.intern(to);
        *self.edges.entry((a.min(b), a.max(b))).or_insert(0) += 1;
        Ok(())
    }

    /// Record every primitive move of a relocation transition.
    pub fn record_transition(&mut self, tr: &Transition, cells: &[HexCoord]) -> Result<()> {
        for s in &tr.steps {
            let from = self.node_at(cells[s.from.cell], s.from.tick);
            let to = self.node_at(cells[s.to.cell], s.to.tick);
            self.record(from, to)?;
        }
        Ok(())
    }

    pub fn weight(&self, a: &TergNode, b: &TergNode) -> u32 {
        match (self.node_index(a), self.node_index(b)) {
            (Some(i), Some(j)) if i != j => self.edges.get(&(i.min(j), i.max(j))).copied().unwrap_or(0),
            _ => 0,
        }
    }

    pub fn degree(&self, n: &TergNode) -> u32 {
        let Some(i) = self.node_index(n) else { return 0 };
        self.edges.iter().filter(|((a, b), _)| *a == i || *b == i).map(|(_, w)| *w).sum()
    }

    pub fn weighted_edges(&self) -> Vec<(usize, usize, f64)> {
        self.edges.iter().map(|(&(i, j), &w)| (i, j, w as f64)).collect()
    }

    /// Connected components, each sorted, ordered by size (largest first) then smallest member.
    pub fn components(&self) -> Vec<Vec<usize>> {
        components(self.nodes.len(), &self.weighted_edges())
    }

    /// Laplacian restricted to `members` (graph node indices).
    pub fn laplacian(&self, members: &[usize]) -> LaplacianView {
        let pos: HashMap<usize, usize> = members.iter().enumerate().map(|(k, &i)| (i, k)).collect();
        let edges: Vec<(usize, usize, f64)> = self
            .edges
            .iter()
            .filter_map(|(&(i, j), &w)| Some((*pos.get(&i)?, *pos.get(&j)?, w as f64)))
            .collect();
        let mut l = LaplacianView::from_edges(members.len(), &edges);
        l.nodes = members.to_vec();
        l
    }

    /// Exact embedding of each connected component. Components with fewer than
    /// two nodes are skipped; smaller components use `min(dim, size - 1)` coordinates.
    pub fn embed_components(&self, dim: usize) -> Result<Vec<ComponentEmbedding>> {
        let mut out = Vec::new();
        for comp in self.components() {
            if comp.len() < 2 {
                continue;
            }
            let d = dim.min(comp.len() - 1);
            let lap = self.laplacian(&comp);
            let embedding = exact_embedding(&lap, d)?;
            out.push(ComponentEmbedding { nodes: comp, embedding });
        }
        Ok(out)
    }

    /// CSV with one row per edge direction.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["node_cell_q", "node_cell_r", "bucket", "peer_cell_q", "peer_cell_r", "peer_bucket", "weight"])?;
        for (&(i, j), &wt) in &self.edges {
            for (a, b) in [(i, j), (j, i)] {
                let (na, nb) = (self.nodes[a], self.nodes[b]);
                wr.write_record([
                    na.cell.q.to_string(),
                    na.cell.r.to_string(),
                    na.bucket.to_string(),
                    nb.cell.q.to_string(),
                    nb.cell.r.to_string(),
                    nb.bucket.to_string(),
                    wt.to_string(),
                ])?;
            }
        }
        wr.flush()?;
        Ok(())
    }
}

/// Connected components of an undirected weighted graph on `n` nodes.
pub fn components(n: usize, edges: &[(usize, usize, f64)]) -> Vec<Vec<usize>> {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for &(i, j, w) in edges {
        if w != 0.0 {
            let (a, b) = (find(&mut parent, i), find(&mut parent, j));
            if a != b {
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(i);
    }
    let mut out: Vec<Vec<usize>> = groups.into_values().collect();
    out.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
    out
}

/// Dense Laplacian `L = Deg - A`.
#[derive(Clone, Debug, PartialEq)]
pub struct LaplacianView {
    /// Graph node index of each row (identity when built from raw edges).
    pub nodes: Vec<usize>,
    pub n: usize,
    /// Row-major `n x n`.
    pub matrix: Vec<f64>,
    pub degree: Vec<f64>,
}

impl LaplacianView {
    pub fn from_edges(n: usize, edges: &[(usize, usize, f64)]) -> Self {
        let mut m = vec![0.0; n * n];
        let mut degree = vec![0.0; n];
        for &(i, j, w) in edges {
            if i == j {
                continue;
            }
            m[i * n + j] -= w;
            m[j * n + i] -= w;
            degree[i] += w;
            degree[j] += w;
        }
        for i in 0..n {
            m[i * n + i] = degree[i];
        }
        LaplacianView { nodes: (0..n).collect(), n, matrix: m, degree }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix[i * self.n + j]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.matrix.chunks(self.n.max(1)).map(|r| r.iter().sum()).collect()
    }

    pub fn num_components(&self) -> usize {
        let mut edges = Vec::new();
        for i in 0..self.n {
            for j in i + 1..self.n {
                let w = -self.get(i, j);
                if w != 0.0 {
                    edges.push((i, j, w));
                }
            }
        }
        components(self.n, &edges).len()
    }
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues ascending and the matching eigenvectors as columns of a
/// row-major `n x n` matrix.
pub fn symmetric_eigen(matrix: &[f64], n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if matrix.len() != n * n {
        return Err(Error::Dimension { expected: n * n, got: matrix.len() });
    }
    let mut a = matrix.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += a[p * n + q] * a[p * n + q];
            }
        }
        if off <= 1e-32 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[i * n + i].total_cmp(&a[j * n + j]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vectors = vec![0.0; n * n];
    for (col, &src) in order.iter().enumerate() {
        for k in 0..n {
            vectors[k * n + col] = v[k * n + src];
        }
    }
    Ok((values, vectors))
}

/// Spectral coordinates of the nodes of one connected graph.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub dim: usize,
    /// Eigenvalues of the kept eigenvectors, ascending (the zero eigenvalue excluded).
    pub eigenvalues: Vec<f64>,
    /// Smallest eigenvalue, the discarded one.
    pub lambda0: f64,
    /// One row of length `dim` per node.
    pub rows: Vec<Vec<f64>>,
}

impl Embedding {
    pub fn norm(&self, i: usize) -> f64 {
        self.rows[i].iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Column `k` as a vector over nodes.
    pub fn column(&self, k: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r[k]).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComponentEmbedding {
    /// Graph node indices, in row order of `embedding`.
    pub nodes: Vec<usize>,
    pub embedding: Embedding,
}

/// Eigenvectors of the `dim + 1` smallest eigenvalues with the constant one
/// dropped; each vector's first non-negligible coordinate is made positive.
pub fn exact_embedding(lap: &LaplacianView, dim: usize) -> Result<Embedding> {
    let n = lap.n;
    if dim == 0 || dim >= n {
        return Err(Error::InvalidArgument(format!("embedding dimension {dim} needs 1 <= dim < {n}")));
    }
    let comps = lap.num_components();
    if comps > 1 {
        return Err(Error::Disconnected { components: comps });
    }
    let (values, vectors) = symmetric_eigen(&lap.matrix, n)?;
    let mut rows = vec![vec![0.0; dim]; n];
    for k in 0..dim {
        let col = k + 1;
        let first = (0..n).map(|i| vectors[i * n + col]).find(|x| x.abs() > 1e-12).unwrap_or(1.0);
        let sign = if first < 0.0 { -1.0 } else { 1.0 };
        for (i, row) in rows.iter_mut().enumerate() {
            row[k] = sign * vectors[i * n + col];
        }
    }
    Ok(Embedding { dim, eigenvalues: values[1..=dim].to_vec(), lambda0: values[0], rows })
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegreeNormOutcome {
    Pass,
    Fail,
    /// All weighted degrees are equal.
    Inconclusive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegreeNormReport {
    pub outcome: DegreeNormOutcome,
    pub max_degree_node: usize,
    pub min_degree_node: usize,
    pub norm_at_max: f64,
    pub norm_at_min: f64,
    /// Pairs where the exchange inequality was evaluated.
    pub pairs_checked: usize,
    /// The exchange inequality agreed with the norm ordering on every pair.
    pub exchange_consistent: bool,
}

/// The node with the largest weighted degree should sit closer to the origin
/// than the node with the smallest one.
pub fn check_degree_norm(lap: &LaplacianView, emb: &Embedding) -> Result<DegreeNormReport> {
    if emb.rows.len() != lap.n {
        return Err(Error::Dimension { expected: lap.n, got: emb.rows.len() });
    }
    let deg = &lap.degree;
    let mut x = 0;
    let mut y = 0;
    for i in 0..lap.n {
        if deg[i] > deg[x] {
            x = i;
        }
        if deg[i] < deg[y] {
            y = i;
        }
    }
    let norms: Vec<f64> = (0..lap.n).map(|i| emb.norm(i)).collect();
    let mut pairs = 0;
    let mut consistent = true;
    for a in 0..lap.n {
        for b in 0..lap.n {
            let (lxx, lyy) = (lap.get(a, a), lap.get(b, b));
            if lyy <= lxx {
                continue;
            }
            let (fx, fy) = (norms[a] * norms[a], norms[b] * norms[b]);
            if (fx - fy).abs() <= 1e-12 * (fx + fy).max(1.0) {
                continue;
            }
            pairs += 1;
            let lhs = lxx * fy + lyy * fx;
            let rhs = lxx * fx + lyy * fy;
            if (lhs <= rhs) != (norms[a] <= norms[b]) {
                consistent = false;
            }
        }
    }
    let outcome = if deg[x] == deg[y] {
        DegreeNormOutcome::Inconclusive
    } else if norms[x] < norms[y] {
        DegreeNormOutcome::Pass
    } else {
        DegreeNormOutcome::Fail
    };
    Ok(DegreeNormReport {
        outcome,
        max_degree_node: x,
        min_degree_node: y,
        norm_at_max: norms[x],
        norm_at_min: norms[y],
        pairs_checked: pairs,
        exchange_consistent: consistent,
    })
}

/// CSV of embedding coordinates: `q,r,bucket,norm,f0..`.
pub fn write_embedding_csv<W: Write>(graph: &RelocationGraph, comps: &[ComponentEmbedding], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let dim = comps.iter().map(|c| c.embedding.dim).max().unwrap_or(0);
    let mut header = vec!["q".to_string(), "r".into(), "bucket".into(), "component".into(), "norm".into()];
    header.extend((0..dim).map(|k| format!("f{k}")));
    wr.write_record(&header)?;
    for (ci, c) in comps.iter().enumerate() {
        for (row, &node) in c.nodes.iter().enumerate() {
            let n = graph.nodes()[node];
            let mut rec = vec![n.cell.q.to_string(), n.cell.r.to_string(), n.bucket.to_string(), ci.to_string()];
            rec.push(c.embedding.norm(row).to_string());
            for k in 0..dim {
                rec.push(c.embedding.rows[row].get(k).map(|x| x.to_string()).unwrap_or_default());
            }
            wr.write_record(&rec)?;
        }
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn node(q: i32, r: i32, b: u32) -> TergNode {
        TergNode { cell: HexCoord::new(q, r), bucket: b }
    }

    #[test]
    fn counts_trips_symmetrically() {
        let mut g = RelocationGraph::new(60);
        let (s, t) = (node(0, 0, 0), node(1, 0, 0));
        g.record(s, t).unwrap();
        g.record(t, s).unwrap();
        assert_eq!(g.weight(&s, &t), 2);
        assert_eq!(g.weight(&t, &s), 2);
    }

    #[test]
    fn stay_across_bucket_is_an_edge() {
        let mut g = RelocationGraph::new(60);
        let (a, b) = (g.node_at(HexCoord::ORIGIN, 59), g.node_at(HexCoord::ORIGIN, 60));
        g.record(a, b).unwrap();
        assert_eq!(g.weight(&a, &b), 1);
    }

    #[test]
    fn fresh_graph_is_empty() {
        let g = RelocationGraph::new(60);
        assert!(g.is_empty());
        assert_eq!(g.weight(&node(0, 0, 0), &node(1, 0, 0)), 0);
    }

    #[test]
    fn rejects_non_adjacent() {
        let mut g = RelocationGraph::new(60);
        assert!(g.record(node(0, 0, 0), node(2, 0, 0)).is_err());
        assert!(g.record(node(0, 0, 0), node(0, 0, 2)).is_err());
    }

    #[test]
    fn jacobi_diagonalises_small_matrix() {
        let m = [2.0, 1.0, 1.0, 2.0];
        let (vals, vecs) = symmetric_eigen(&m, 2).unwrap();
        assert!((vals[0] - 1.0).abs() < 1e-14 && (vals[1] - 3.0).abs() < 1e-14);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((vecs[0].abs() - s).abs() < 1e-14);
    }

    #[test]
    fn k3_norms_are_equal() {
        let lap = LaplacianView::from_edges(3, &[(0, 1, 1.0), (1, 2, 1.0), (0, 2, 1.0)]);
        // the two nontrivial eigenvalues coincide, so a single vector is not unique
        let e = exact_embedding(&lap, 2).unwrap();
        assert!((e.norm(0) - e.norm(1)).abs() < 1e-12);
        assert!((e.norm(1) - e.norm(2)).abs() < 1e-12);
    }

    #[test]
    fn weighted_path_centre_is_closest() {
        let lap = LaplacianView::from_edges(3, &[(0, 1, 3.0), (1, 2, 1.0)]);
        let e = exact_embedding(&lap, 1).unwrap();
        assert!(e.norm(1) < e.norm(0) && e.norm(1) < e.norm(2));
        let rep = check_degree_norm(&lap, &e).unwrap();
        assert_eq!(rep.outcome, DegreeNormOutcome::Pass);
        assert!(rep.exchange_consistent);
    }

    #[test]
    fn ring_is_inconclusive() {
        let edges: Vec<_> = (0..6).map(|i| (i, (i + 1) % 6, 1.0)).collect();
        let lap = LaplacianView::from_edges(6, &edges);
        let e = exact_embedding(&lap, 2).unwrap();
        assert_eq!(check_degree_norm(&lap, &e).unwrap().outcome, DegreeNormOutcome::Inconclusive);
    }

    #[test]
    fn isolated_edges_embed_separately() {
        let mut g = RelocationGraph::new(60);
        g.record(node(0, 0, 0), node(1, 0, 0)).unwrap();
        g.record(node(-2, 0, 0), node(-3, 0, 0)).unwrap();
        let lap = g.laplacian(&(0..4).collect::<Vec<_>>());
        assert!(matches!(exact_embedding(&lap, 1), Err(Error::Disconnected { components: 2 })));
        let comps = g.embed_components(3).unwrap();
        assert_eq!(comps.len(), 2);
        for c in comps {
            assert_eq!(c.nodes.len(), 2);
            assert_eq!(c.embedding.dim, 1);
        }
    }

    #[test]
    fn dimension_limits() {
        let lap = LaplacianView::from_edges(2, &[(0, 1, 1.0)]);
        assert!(exact_embedding(&lap, 0).is_err());
        assert!(exact_embedding(&lap, 2).is_err());
    }

    #[test]
    fn sign_convention() {
        let lap = LaplacianView::from_edges(4, &[(0, 1, 1.0), (1, 2, 2.0), (2, 3, 1.0)]);
        let e = exact_embedding(&lap, 3).unwrap();
        for k in 0..3 {
            let col = e.column(k);
            let first = col.iter().find(|x| x.abs() > 1e-12).unwrap();
            assert!(*first > 0.0);
        }
    }
}

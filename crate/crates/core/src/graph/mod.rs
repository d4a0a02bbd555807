//! Dense attributed graphs, node relabeling and batching.
//!
//! Attributes are stored as category indices; the one-hot views required by
//! the networks are materialized on demand. Edge category 0 always means
//! "no edge", so simple graphs are the special case `R = 1, S = 2`.

mod generate;
mod io;
mod iso;

pub use generate::{gen_community_small, generate_dataset, DatasetSpec};
pub use io::{load_dataset, read_dataset, save_dataset, write_dataset, DatasetHeader};
pub use iso::{is_isomorphic_small, MAX_ISO_NODES};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Graph {
    n: usize,
    node_cats: usize,
    edge_cats: usize,
    directed: bool,
    nodes: Vec<u16>,
    edges: Vec<u16>,
}

impl Graph {
    /// Builds a graph from an edge list of `(i, j, category)` triples.
    ///
    /// `node_categories` may be empty, in which case every node gets category 0.
    /// Undirected edges are mirrored. Repeating an edge with the same category is
    /// accepted; repeating it with a different category is an error.
    pub fn new(
        n: usize,
        node_cats: usize,
        edge_cats: usize,
        directed: bool,
        edges: &[(usize, usize, usize)],
        node_categories: &[usize],
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidGraph("graph must have at least one node".into()));
        }
        if node_cats == 0 || edge_cats < 2 {
            return Err(Error::InvalidGraph(format!(
                "need R >= 1 and S >= 2, got R={node_cats} S={edge_cats}"
            )));
        }
        if !node_categories.is_empty() && node_categories.len() != n {
            return Err(Error::InvalidGraph(format!(
                "{} node categories for {n} nodes",
                node_categories.len()
            )));
        }
        let mut nodes = vec![0u16; n];
        for (i, &c) in node_categories.iter().enumerate() {
            if c >= node_cats {
                return Err(Error::InvalidGraph(format!(
                    "node {i} category {c} out of range R={node_cats}"
                )));
            }
            nodes[i] = c as u16;
        }
        let mut g = Graph { n, node_cats, edge_cats, directed, nodes, edges: vec![0; n * n] };
        for &(i, j, c) in edges {
            if i >= n || j >= n {
                return Err(Error::InvalidGraph(format!("edge ({i},{j}) out of range n={n}")));
            }
            if i == j {
                return Err(Error::InvalidGraph(format!("self loop at node {i}")));
            }
            if c >= edge_cats {
                return Err(Error::InvalidGraph(format!(
                    "edge ({i},{j}) category {c} out of range S={edge_cats}"
                )));
            }
            let prev = g.edges[i * n + j] as usize;
            if prev != 0 && prev != c {
                return Err(Error::InvalidGraph(format!(
                    "edge ({i},{j}) given conflicting categories {prev} and {c}"
                )));
            }
            g.edges[i * n + j] = c as u16;
            if !directed {
                g.edges[j * n + i] = c as u16;
            }
        }
        Ok(g)
    }

    /// Simple undirected graph (`R = 1`, `S = 2`).
    pub fn simple(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let e: Vec<_> = edges.iter().map(|&(i, j)| (i, j, 1)).collect();
        Self::new(n, 1, 2, false, &e, &[])
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn node_cats(&self) -> usize {
        self.node_cats
    }

    pub fn edge_cats(&self) -> usize {
        self.edge_cats
    }

    pub fn is_directed(&self) -> bool {
        self.directed
    }

    pub fn is_simple(&self) -> bool {
        self.node_cats == 1 && self.edge_cats == 2
    }

    pub fn node_cat(&self, i: usize) -> usize {
        self.nodes[i] as usize
    }

    pub fn edge_cat(&self, i: usize, j: usize) -> usize {
        self.edges[i * self.n + j] as usize
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.edges[i * self.n + j] != 0
    }

    /// Edge list with `i < j` for undirected graphs, all ordered pairs otherwise.
    pub fn edge_list(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.n {
            let start = if self.directed { 0 } else { i + 1 };
            for j in start..self.n {
                let c = self.edge_cat(i, j);
                if c != 0 {
                    out.push((i, j, c));
                }
            }
        }
        out
    }

    pub fn num_edges(&self) -> usize {
        self.edge_list().len()
    }

    pub fn degrees(&self) -> Vec<usize> {
        (0..self.n).map(|i| (0..self.n).filter(|&j| self.has_edge(i, j)).count()).collect()
    }

    /// 0/1 adjacency matrix, row-major `n × n`.
    pub fn adjacency(&self) -> Vec<i64> {
        self.edges.iter().map(|&c| i64::from(c != 0)).collect()
    }

    /// One-hot node attributes, row-major `n × R`.
    pub fn node_attrs(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n * self.node_cats];
        for (i, &c) in self.nodes.iter().enumerate() {
            out[i * self.node_cats + c as usize] = 1.0;
        }
        out
    }

    /// One-hot edge attributes, row-major `n × n × S`. The diagonal is "no edge".
    pub fn edge_attrs(&self) -> Vec<f64> {
        let s = self.edge_cats;
        let mut out = vec![0.0; self.n * self.n * s];
        for (k, &c) in self.edges.iter().enumerate() {
            out[k * s + c as usize] = 1.0;
        }
        out
    }

    /// Relabels nodes: node `i` of `self` becomes node `perm[i]` of the result.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.n)?;
        let n = self.n;
        let mut nodes = vec![0u16; n];
        let mut edges = vec![0u16; n * n];
        for i in 0..n {
            nodes[perm[i]] = self.nodes[i];
            for j in 0..n {
                edges[perm[i] * n + perm[j]] = self.edges[i * n + j];
            }
        }
        Ok(Graph { nodes, edges, ..self.clone() })
    }

    /// Simple undirected view: attributes dropped, any edge category becomes 1.
    pub fn structure(&self) -> Self {
        let n = self.n;
        let mut edges = vec![0u16; n * n];
        for i in 0..n {
            for j in 0..n {
                if self.has_edge(i, j) || self.has_edge(j, i) {
                    edges[i * n + j] = 1;
                }
            }
        }
        Graph { n, node_cats: 1, edge_cats: 2, directed: false, nodes: vec![0; n], edges }
    }
}

/// Validates that `perm` is a bijection on `0..n`.
pub fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    if perm.len() != n {
        return Err(Error::InvalidPermutation(format!("length {} for {n} elements", perm.len())));
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || seen[p] {
            return Err(Error::InvalidPermutation(format!("{perm:?} is not a bijection")));
        }
        seen[p] = true;
    }
    Ok(())
}

pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Reorders the rows of a row-major `n × width` matrix: row `i` moves to `perm[i]`.
pub fn permute_rows<T: Clone + Default>(data: &[T], width: usize, perm: &[usize]) -> Vec<T> {
    let mut out = vec![T::default(); data.len()];
    for (i, &p) in perm.iter().enumerate() {
        out[p * width..(p + 1) * width].clone_from_slice(&data[i * width..(i + 1) * width]);
    }
    out
}

/// Reorders a row-major `n × n × width` pair tensor consistently with `perm`.
pub fn permute_pairs<T: Clone + Default>(data: &[T], n: usize, width: usize, perm: &[usize]) -> Vec<T> {
    let mut out = vec![T::default(); data.len()];
    for i in 0..n {
        for j in 0..n {
            let src = (i * n + j) * width;
            let dst = (perm[i] * n + perm[j]) * width;
            out[dst..dst + width].clone_from_slice(&data[src..src + width]);
        }
    }
    out
}

/// Graphs padded to a common node count with a per-graph node mask.
#[derive(Clone, Debug)]
pub struct GraphBatch {
    pub n_max: usize,
    pub node_cats: usize,
    pub edge_cats: usize,
    /// `len × n_max × R`, zero at masked slots.
    pub node_attrs: Vec<f64>,
    /// `len × n_max × n_max × S`, zero at masked slots.
    pub edge_attrs: Vec<f64>,
    /// `len × n_max`.
    pub mask: Vec<bool>,
    pub sizes: Vec<usize>,
}

impl GraphBatch {
    pub fn from_graphs(graphs: &[Graph], n_max: usize) -> Result<Self> {
        let first = graphs.first().ok_or_else(|| Error::InvalidGraph("empty batch".into()))?;
        let (r, s) = (first.node_cats, first.edge_cats);
        let b = graphs.len();
        let mut node_attrs = vec![0.0; b * n_max * r];
        let mut edge_attrs = vec![0.0; b * n_max * n_max * s];
        let mut mask = vec![false; b * n_max];
        for (k, g) in graphs.iter().enumerate() {
            if g.n > n_max {
                return Err(Error::InvalidGraph(format!("graph with {} nodes exceeds n_max={n_max}", g.n)));
            }
            if g.node_cats != r || g.edge_cats != s {
                return Err(Error::InvalidGraph("batch mixes attribute vocabularies".into()));
            }
            for i in 0..g.n {
                mask[k * n_max + i] = true;
                node_attrs[(k * n_max + i) * r + g.node_cat(i)] = 1.0;
                for j in 0..g.n {
                    let at = ((k * n_max + i) * n_max + j) * s;
                    edge_attrs[at + g.edge_cat(i, j)] = 1.0;
                }
            }
        }
        Ok(GraphBatch {
            n_max,
            node_cats: r,
            edge_cats: s,
            node_attrs,
            edge_attrs,
            mask,
            sizes: graphs.iter().map(Graph::n).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn triangle() -> Graph {
        Graph::simple(3, &[(0, 1), (1, 2), (0, 2)]).unwrap()
    }

    #[test]
    fn triangle_has_degree_two() {
        assert_eq!(triangle().degrees(), vec![2, 2, 2]);
    }

    #[test]
    fn empty_graph_has_no_edges() {
        let g = Graph::simple(2, &[]).unwrap();
        assert!(!g.has_edge(0, 1));
        assert_eq!(&g.edge_attrs()[..], &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn annotated_edge_is_one_hot_and_symmetric() {
        let g = Graph::new(2, 1, 3, false, &[(0, 1, 2)], &[]).unwrap();
        let e = g.edge_attrs();
        assert_eq!(&e[3..6], &[0.0, 0.0, 1.0]);
        assert_eq!(&e[6..9], &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn construction_errors() {
        assert!(Graph::simple(2, &[(0, 2)]).is_err());
        assert!(Graph::simple(2, &[(1, 1)]).is_err());
        assert!(Graph::new(2, 1, 3, false, &[(0, 1, 1), (1, 0, 2)], &[]).is_err());
        assert!(Graph::new(2, 1, 3, false, &[(0, 1, 3)], &[]).is_err());
        assert!(Graph::new(2, 2, 2, false, &[], &[0, 2]).is_err());
        // same edge twice with the same category is fine
        assert!(Graph::simple(2, &[(0, 1), (1, 0)]).is_ok());
    }

    #[test]
    fn permutation_round_trip_and_identity() {
        let g = Graph::new(4, 2, 3, false, &[(0, 1, 1), (1, 2, 2), (2, 3, 1)], &[0, 1, 1, 0]).unwrap();
        let id = [0, 1, 2, 3];
        assert_eq!(g.permute(&id).unwrap(), g);
        let p = [2, 0, 3, 1];
        let back = g.permute(&p).unwrap().permute(&invert_permutation(&p)).unwrap();
        assert_eq!(back, g);
        assert_eq!(triangle().permute(&[2, 0, 1]).unwrap(), triangle());
    }

    #[test]
    fn path_relabeling_keeps_degrees() {
        let path = Graph::simple(3, &[(0, 1), (1, 2)]).unwrap();
        let swapped = path.permute(&[2, 1, 0]).unwrap();
        assert!(swapped.has_edge(2, 1) && swapped.has_edge(1, 0));
        assert_eq!(swapped.degrees(), vec![1, 2, 1]);
    }

    #[test]
    fn rejects_non_bijection() {
        assert!(triangle().permute(&[0, 0, 1]).is_err());
        assert!(triangle().permute(&[0, 1]).is_err());
    }

    #[test]
    fn batch_masks_padding() {
        let b = GraphBatch::from_graphs(&[triangle(), Graph::simple(2, &[(0, 1)]).unwrap()], 4).unwrap();
        assert_eq!(b.mask.iter().filter(|&&m| m).count(), 5);
        assert_eq!(b.node_attrs[3], 0.0);
        assert!(GraphBatch::from_graphs(&[triangle()], 2).is_err());
    }

    proptest::proptest! {
        #[test]
        fn permutation_preserves_degree_multiset(
            n in 2usize..9,
            bits in proptest::collection::vec(proptest::bool::ANY, 36),
            seed in 0u64..1000,
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut edges = Vec::new();
            let mut k = 0;
            for i in 0..n { for j in i + 1..n { if bits[k] { edges.push((i, j)); } k += 1; } }
            let g = Graph::simple(n, &edges).unwrap();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let mut a = g.degrees();
            let mut b = g.permute(&perm).unwrap().degrees();
            a.sort_unstable();
            b.sort_unstable();
            proptest::prop_assert_eq!(a, b);
        }
    }
}

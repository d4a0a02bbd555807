//! Synthetic node/edge features that lift the expressiveness of the encoder.
//!
//! Four schemes, concatenated in a fixed order after the original attributes:
//! p-path counts (with virtual edges), Laplacian eigenvectors, per-node cycle
//! counts and Gaussian noise. All are computed once per graph.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;

pub const MAX_PATH_LEN: usize = 3;
const EIGEN_MAX_ITERS: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub paths: bool,
    pub spectral: bool,
    pub cycles: bool,
    pub random: bool,
    pub p: usize,
    pub k: usize,
    pub d_rand: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig { paths: true, spectral: true, cycles: true, random: true, p: 3, k: 4, d_rand: 4 }
    }
}

impl FeatureConfig {
    pub fn none() -> Self {
        FeatureConfig { paths: false, spectral: false, cycles: false, random: false, ..Self::default() }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.p == 0 || self.p > MAX_PATH_LEN {
            v.push(format!("features.p must be in 1..={MAX_PATH_LEN}, got {}", self.p));
        }
        if self.k == 0 {
            v.push("features.k must be >= 1".into());
        }
        v
    }

    pub fn node_width(&self, node_cats: usize) -> usize {
        node_cats
            + if self.paths { self.p } else { 0 }
            + if self.spectral { self.k } else { 0 }
            + if self.cycles { 3 } else { 0 }
            + if self.random { self.d_rand } else { 0 }
    }

    pub fn edge_width(&self, edge_cats: usize) -> usize {
        edge_cats + if self.paths { self.p } else { 0 }
    }
}

/// Output of [`path_features`]. Counts are exact integers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PathFeatures {
    pub p: usize,
    /// `n × p`: row sums of each path-count matrix.
    pub node: Vec<i64>,
    /// `n × n × p`: entry `q - 1` is the number of length-`q` paths from i to j.
    pub edge: Vec<i64>,
    /// `n × n`: pairs joined by a path of length 2..=p but not by an edge.
    pub virtual_mask: Vec<bool>,
}

fn matmul_i64(a: &[i64], b: &[i64], n: usize) -> Vec<i64> {
    let mut out = vec![0i64; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    out
}

/// Path counts `P1 = A`, `P2 = A² − D`, `P3 = A³ − AD − (D − I)A`.
///
/// A path has distinct vertices and edges except that its two ends may coincide,
/// so `P3` has twice the triangle count of each node on its diagonal.
pub fn path_features(g: &Graph, p: usize) -> Result<PathFeatures> {
    if p == 0 || p > MAX_PATH_LEN {
        return Err(Error::Unsupported(format!("path length {p}; closed forms exist for 1..={MAX_PATH_LEN}")));
    }
    let n = g.n();
    let a = g.structure().adjacency();
    let deg: Vec<i64> = (0..n).map(|i| a[i * n..(i + 1) * n].iter().sum()).collect();
    let mut mats = vec![a.clone()];
    if p >= 2 {
        let mut p2 = matmul_i64(&a, &a, n);
        for i in 0..n {
            p2[i * n + i] -= deg[i];
        }
        mats.push(p2);
    }
    if p >= 3 {
        let a2 = matmul_i64(&a, &a, n);
        let a3 = matmul_i64(&a2, &a, n);
        let mut p3 = a3;
        for i in 0..n {
            for j in 0..n {
                // (AD)_ij = A_ij d_j ; ((D - I)A)_ij = (d_i - 1) A_ij
                p3[i * n + j] -= a[i * n + j] * deg[j] + (deg[i] - 1) * a[i * n + j];
            }
        }
        mats.push(p3);
    }
    let mut node = vec![0i64; n * p];
    let mut edge = vec![0i64; n * n * p];
    let mut virtual_mask = vec![false; n * n];
    for (q, m) in mats.iter().enumerate() {
        for i in 0..n {
            for j in 0..n {
                let v = m[i * n + j];
                node[i * p + q] += v;
                edge[(i * n + j) * p + q] = v;
                if q >= 1 && v > 0 && i != j && a[i * n + j] == 0 {
                    virtual_mask[i * n + j] = true;
                }
            }
        }
    }
    Ok(PathFeatures { p, node, edge, virtual_mask })
}

/// Eigenvalues (ascending) and sign-normalized unit eigenvectors of `L = D − A`.
/// Eigenvectors are returned column-major: `vectors[c * n + i]` is entry `i` of column `c`.
pub fn laplacian_eigen(g: &Graph) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = g.n();
    let a = g.structure().adjacency();
    let lap = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            a[i * n..(i + 1) * n].iter().sum::<i64>() as f64
        } else {
            -(a[i * n + j] as f64)
        }
    });
    let eig = lap
        .try_symmetric_eigen(1e-14, EIGEN_MAX_ITERS)
        .ok_or_else(|| Error::Numerical(format!("Laplacian eigensolver did not converge in {EIGEN_MAX_ITERS} iterations")))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[x].total_cmp(&eig.eigenvalues[y]).then(x.cmp(&y)));
    let values = order.iter().map(|&c| eig.eigenvalues[c]).collect();
    let mut vectors = Vec::with_capacity(n * n);
    for &c in &order {
        let mut col: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
        let norm = col.iter().map(|x| x * x).sum::<f64>().sqrt();
        col.iter_mut().for_each(|x| *x /= norm);
        fix_sign(&mut col);
        vectors.extend(col);
    }
    Ok((values, vectors))
}

// Largest-magnitude entry made positive; near-ties go to the lowest index.
fn fix_sign(v: &mut [f64]) {
    let max = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if let Some(pivot) = v.iter().position(|x| x.abs() >= max - 1e-9) {
        if v[pivot] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

/// `n × k` matrix of the eigenvectors for the `k` smallest Laplacian eigenvalues,
/// zero-padded when the graph has fewer than `k` nodes.
pub fn spectral_features(g: &Graph, k: usize) -> Result<Vec<f64>> {
    let n = g.n();
    let (_, vectors) = laplacian_eigen(g)?;
    let mut out = vec![0.0; n * k];
    for c in 0..k.min(n) {
        for i in 0..n {
            out[i * k + c] = vectors[c * n + i];
        }
    }
    Ok(out)
}

/// `n × 3` counts of the simple 3-, 4- and 5-cycles through each node, from
/// closed-walk traces of adjacency powers.
pub fn cycle_counts(g: &Graph) -> Vec<i64> {
    let n = g.n();
    let a = g.structure().adjacency();
    let a2 = matmul_i64(&a, &a, n);
    let a3 = matmul_i64(&a2, &a, n);
    let a4 = matmul_i64(&a3, &a, n);
    let a5 = matmul_i64(&a4, &a, n);
    let deg: Vec<i64> = (0..n).map(|i| a[i * n..(i + 1) * n].iter().sum()).collect();
    let tri: Vec<i64> = (0..n).map(|i| a3[i * n + i] / 2).collect();
    let mut out = vec![0i64; n * 3];
    for i in 0..n {
        let row = |j: usize| a[i * n + j];
        let a_deg: i64 = (0..n).map(|j| row(j) * deg[j]).sum();
        let a_tri: i64 = (0..n).map(|j| row(j) * tri[j]).sum();
        let shared_deg: i64 = (0..n).map(|j| row(j) * a2[i * n + j] * deg[j]).sum();
        out[i * 3] = tri[i];
        // closed 4-walks minus the ones that backtrack
        out[i * 3 + 1] = (a4[i * n + i] - deg[i] * (deg[i] - 1) - a_deg) / 2;
        // closed 5-walks minus triangle traversals carrying one back-and-forth spur
        let spurred = 2 * tri[i] * deg[i] - 5 * tri[i] + shared_deg + a_tri;
        out[i * 3 + 2] = (a5[i * n + i] - 2 * spurred) / 2;
    }
    out
}

/// `n × d` i.i.d. standard normal entries.
pub fn random_features<R: Rng + ?Sized>(rng: &mut R, n: usize, d: usize) -> Vec<f64> {
    (0..n * d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// A graph together with the encoder inputs derived from it.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedGraph {
    pub base: Graph,
    pub node_width: usize,
    pub edge_width: usize,
    /// `n × node_width`.
    pub node_feats: Vec<f64>,
    /// `n × n × edge_width`.
    pub edge_feats: Vec<f64>,
    /// `n × n`: real edges plus virtual path edges, symmetric, false diagonal.
    pub neighborhood: Vec<bool>,
}

impl AugmentedGraph {
    pub fn n(&self) -> usize {
        self.base.n()
    }

    /// Ordered pairs `(i, j)` with `j` in the neighborhood of `i`.
    pub fn neighbor_pairs(&self) -> Vec<(usize, usize)> {
        let n = self.n();
        (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|&(i, j)| self.neighborhood[i * n + j])
            .collect()
    }

    /// Replaces the random-feature block (the last `d_rand` node columns).
    pub fn redraw_random<R: Rng + ?Sized>(&mut self, cfg: &FeatureConfig, rng: &mut R) {
        if !cfg.random || cfg.d_rand == 0 {
            return;
        }
        let w = self.node_width;
        let noise = random_features(rng, self.n(), cfg.d_rand);
        for (row, fresh) in self.node_feats.chunks_mut(w).zip(noise.chunks(cfg.d_rand)) {
            row[w - cfg.d_rand..].copy_from_slice(fresh);
        }
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let n = self.n();
        Ok(AugmentedGraph {
            base: self.base.permute(perm)?,
            node_width: self.node_width,
            edge_width: self.edge_width,
            node_feats: crate::graph::permute_rows(&self.node_feats, self.node_width, perm),
            edge_feats: crate::graph::permute_pairs(&self.edge_feats, n, self.edge_width, perm),
            neighborhood: crate::graph::permute_pairs(&self.neighborhood, n, 1, perm),
        })
    }
}

pub fn augment<R: Rng + ?Sized>(g: &Graph, cfg: &FeatureConfig, rng: &mut R) -> Result<AugmentedGraph> {
    let problems = cfg.validate();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let n = g.n();
    let s = g.edge_cats();
    let node_width = cfg.node_width(g.node_cats());
    let edge_width = cfg.edge_width(s);

    let mut neighborhood: Vec<bool> =
        (0..n * n).map(|k| g.has_edge(k / n, k % n) || g.has_edge(k % n, k / n)).collect();
    let paths = if cfg.paths { Some(path_features(g, cfg.p)?) } else { None };
    if let Some(pf) = &paths {
        for (nb, &v) in neighborhood.iter_mut().zip(&pf.virtual_mask) {
            *nb |= v;
        }
    }

    let mut blocks: Vec<(usize, Vec<f64>)> = vec![(g.node_cats(), g.node_attrs())];
    if let Some(pf) = &paths {
        blocks.push((cfg.p, pf.node.iter().map(|&x| x as f64).collect()));
    }
    if cfg.spectral {
        blocks.push((cfg.k, spectral_features(g, cfg.k)?));
    }
    if cfg.cycles {
        blocks.push((3, cycle_counts(g).iter().map(|&x| x as f64).collect()));
    }
    if cfg.random {
        blocks.push((cfg.d_rand, random_features(rng, n, cfg.d_rand)));
    }
    let mut node_feats = Vec::with_capacity(n * node_width);
    for i in 0..n {
        for (w, data) in &blocks {
            node_feats.extend_from_slice(&data[i * w..(i + 1) * w]);
        }
    }

    let mut edge_feats = vec![0.0; n * n * edge_width];
    for i in 0..n {
        for j in 0..n {
            let base = (i * n + j) * edge_width;
            let c = g.edge_cat(i, j);
            if c != 0 {
                edge_feats[base + c] = 1.0;
            }
            if let Some(pf) = &paths {
                for q in 0..cfg.p {
                    edge_feats[base + s + q] = pf.edge[(i * n + j) * cfg.p + q] as f64;
                }
            }
        }
    }
    Ok(AugmentedGraph { base: g.clone(), node_width, edge_width, node_feats, edge_feats, neighborhood })
}

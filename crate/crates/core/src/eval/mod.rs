//! Graph statistics, MMD under the Gaussian-EMD kernel, generation timing
//! and the feature and codebook ablations.

mod ablation;
mod bench;
pub mod orbits;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;

pub use ablation::{
    ablation_codebook_report, ablation_feature_report, feature_cells, CodebookAblation, CodebookCell, CodebookRow,
    FeatureAblation, FeatureCell, FeatureRow, CODEBOOK_HEADER, FEATURE_HEADER,
};
pub use bench::{
    benchmark_generation, fit_line, machine_info, position_cost_profile, step_cost_sweep, GenBenchReport, LineFit, MachineInfo,
    StepCostPoint,
};

/// Raw squared MMD below this is more than rounding noise; it is still
/// clamped to zero but flagged in the report.
pub const MMD_FLOOR: f64 = -1e-12;

/// Symmetric adjacency of the simple undirected view: attributes, direction
/// and self-loops dropped.
pub fn simple_adjacency(g: &Graph) -> Vec<bool> {
    let n = g.n();
    (0..n * n)
        .map(|k| {
            let (i, j) = (k / n, k % n);
            i != j && (g.has_edge(i, j) || g.has_edge(j, i))
        })
        .collect()
}

/// Per-graph histograms compared by the MMD.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphStats {
    /// Count of nodes by degree; sums to `n`.
    pub degree: Vec<f64>,
    /// Count of nodes by clustering coefficient, equal-width bins over `[0, 1]`.
    pub clustering: Vec<f64>,
    /// Orbit participation summed over nodes, one entry per orbit.
    pub orbit: Vec<f64>,
}

pub fn clustering_coefficients(g: &Graph) -> Vec<f64> {
    let n = g.n();
    let adj = simple_adjacency(g);
    (0..n)
        .map(|i| {
            let nb: Vec<usize> = (0..n).filter(|&j| adj[i * n + j]).collect();
            let d = nb.len();
            if d < 2 {
                return 0.0;
            }
            let mut tri = 0usize;
            for (a, &u) in nb.iter().enumerate() {
                tri += nb[a + 1..].iter().filter(|&&v| adj[u * n + v]).count();
            }
            tri as f64 / (d * (d - 1) / 2) as f64
        })
        .collect()
}

pub fn graph_stats(g: &Graph, clustering_bins: usize) -> GraphStats {
    let n = g.n();
    let adj = simple_adjacency(g);
    let deg: Vec<usize> = (0..n).map(|i| adj[i * n..(i + 1) * n].iter().filter(|&&e| e).count()).collect();
    let mut degree = vec![0.0; deg.iter().copied().max().map_or(0, |m| m + 1)];
    for d in deg {
        degree[d] += 1.0;
    }
    let bins = clustering_bins.max(1);
    let mut clustering = vec![0.0; bins];
    for c in clustering_coefficients(g) {
        clustering[((c * bins as f64) as usize).min(bins - 1)] += 1.0;
    }
    let orbit = orbits::orbit_totals(g).into_iter().map(|c| c as f64).collect();
    GraphStats { degree, clustering, orbit }
}

/// Maps `f` over `0..n` on up to `jobs` threads; output keeps index order.
pub(crate) fn par_map<T: Send, F: Fn(usize) -> T + Sync>(n: usize, jobs: usize, f: F) -> Vec<T> {
    let jobs = jobs.clamp(1, n.max(1));
    if jobs == 1 {
        return (0..n).map(f).collect();
    }
    let chunk = n.div_ceil(jobs);
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..jobs)
            .map(|t| {
                let f = &f;
                s.spawn(move || (t * chunk..((t + 1) * chunk).min(n)).map(f).collect::<Vec<T>>())
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

pub fn stats_all(graphs: &[Graph], clustering_bins: usize, jobs: usize) -> Vec<GraphStats> {
    par_map(graphs.len(), jobs, |i| graph_stats(&graphs[i], clustering_bins))
}

fn normalized(h: &[f64]) -> Vec<f64> {
    let s: f64 = h.iter().sum();
    // an empty histogram stays all-zero rather than dividing by zero
    if s > 0.0 {
        h.iter().map(|x| x / s).collect()
    } else {
        h.to_vec()
    }
}

/// First Wasserstein distance between two histograms on the same grid,
/// each normalized to unit mass.
pub fn emd_1d(h1: &[f64], h2: &[f64], bin_width: f64) -> Result<f64> {
    if h1.len() != h2.len() {
        return Err(Error::Shape(format!("histogram supports differ: {} vs {} bins", h1.len(), h2.len())));
    }
    if h1.iter().chain(h2).any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::Numerical("histograms must be finite and non-negative".into()));
    }
    let (a, b) = (normalized(h1), normalized(h2));
    let mut cum = 0.0;
    let mut total = 0.0;
    for (x, y) in a.iter().zip(&b) {
        cum += x - y;
        total += cum.abs();
    }
    Ok(total * bin_width)
}

pub fn gaussian_emd(h1: &[f64], h2: &[f64], bin_width: f64, sigma: f64) -> Result<f64> {
    let d = emd_1d(h1, h2, bin_width)?;
    Ok((-d * d / (2.0 * sigma * sigma)).exp())
}

fn padded(hs: &[&[f64]], len: usize) -> Vec<Vec<f64>> {
    hs.iter()
        .map(|h| {
            let mut v = h.to_vec();
            v.resize(len, 0.0);
            v
        })
        .collect()
}

/// `|a| × |b|` Gaussian-EMD kernel matrix, row-major. Histograms are
/// zero-padded to a common length first.
pub fn kernel_matrix(a: &[&[f64]], b: &[&[f64]], bin_width: f64, sigma: f64, jobs: usize) -> Result<Vec<f64>> {
    let len = a.iter().chain(b).map(|h| h.len()).max().unwrap_or(0);
    let (pa, pb) = (padded(a, len), padded(b, len));
    let rows = par_map(pa.len(), jobs, |i| pb.iter().map(|y| gaussian_emd(&pa[i], y, bin_width, sigma)).collect::<Result<Vec<f64>>>());
    Ok(rows.into_iter().collect::<Result<Vec<_>>>()?.concat())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Biased (V-statistic) squared MMD between two samples of histograms,
/// unclamped. The Gaussian-EMD kernel is not positive definite, so small
/// negative values are possible.
pub fn mmd2(a: &[&[f64]], b: &[&[f64]], bin_width: f64, sigma: f64, jobs: usize) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidGraph("MMD needs two non-empty samples".into()));
    }
    let kaa = kernel_matrix(a, a, bin_width, sigma, jobs)?;
    let kbb = kernel_matrix(b, b, bin_width, sigma, jobs)?;
    let kab = kernel_matrix(a, b, bin_width, sigma, jobs)?;
    let v = mean(&kaa) + mean(&kbb) - 2.0 * mean(&kab);
    if !v.is_finite() {
        return Err(Error::NonFinite("squared MMD".into()));
    }
    Ok(v)
}

fn clamp_mmd(v: f64) -> f64 {
    v.max(0.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MmdConfig {
    pub sigma: f64,
    pub clustering_bins: usize,
    pub jobs: usize,
}

impl Default for MmdConfig {
    fn default() -> Self {
        MmdConfig { sigma: 1.0, clustering_bins: 100, jobs: 1 }
    }
}

/// Squared MMD per statistic clamped at zero, plus their mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MmdReport {
    pub degree: f64,
    pub clustering: f64,
    pub orbit: f64,
    pub average: f64,
    /// Unclamped degree, clustering and orbit values.
    pub raw: [f64; 3],
    pub n_ref: usize,
    pub n_gen: usize,
    pub sigma: f64,
    pub clustering_bins: usize,
}

pub const MMD_HEADER: &str = "deg,clust,orbit,avg,raw_deg,raw_clust,raw_orbit,n_ref,n_gen,sigma,clustering_bins";

/// Stated at the top of every MMD report.
pub const MMD_NOTES: [&str; 2] = [
    "# estimator: biased V-statistic of squared MMD clamped at 0 (raw_* unclamped; the kernel is not positive definite); kernel exp(-emd^2/(2 sigma^2)); emd on normalized histograms; degree and orbit bins have width 1, clustering bins width 1/clustering_bins",
    "# orbit statistic: per-node participation counts in the 15 orbits of connected 2-4 node graphlets, summed over nodes",
];

impl MmdReport {
    /// Statistics whose raw value fell below the rounding floor.
    pub fn negative(&self) -> Vec<&'static str> {
        ["deg", "clust", "orbit"].into_iter().zip(self.raw).filter(|&(_, v)| v < MMD_FLOOR).map(|(n, _)| n).collect()
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{},{},{},{}",
            self.degree,
            self.clustering,
            self.orbit,
            self.average,
            self.raw[0],
            self.raw[1],
            self.raw[2],
            self.n_ref,
            self.n_gen,
            self.sigma,
            self.clustering_bins
        )
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n{MMD_HEADER}\n{}\n", MMD_NOTES[0], MMD_NOTES[1], self.csv_row())
    }
}

/// Degree, clustering and orbit histograms of a sample, in that order.
pub fn columns(s: &[GraphStats]) -> [Vec<&[f64]>; 3] {
    [
        s.iter().map(|x| x.degree.as_slice()).collect(),
        s.iter().map(|x| x.clustering.as_slice()).collect(),
        s.iter().map(|x| x.orbit.as_slice()).collect(),
    ]
}

pub fn mmd(reference: &[GraphStats], generated: &[GraphStats], cfg: &MmdConfig) -> Result<MmdReport> {
    if reference.is_empty() || generated.is_empty() {
        return Err(Error::InvalidGraph("MMD needs two non-empty samples".into()));
    }
    let [ra, rb] = [columns(reference), columns(generated)];
    let widths = [1.0, 1.0 / cfg.clustering_bins as f64, 1.0];
    let mut v = [0.0; 3];
    for k in 0..3 {
        v[k] = mmd2(&ra[k], &rb[k], widths[k], cfg.sigma, cfg.jobs)?;
    }
    let [degree, clustering, orbit] = v.map(clamp_mmd);
    Ok(MmdReport {
        degree,
        clustering,
        orbit,
        average: (degree + clustering + orbit) / 3.0,
        raw: v,
        n_ref: reference.len(),
        n_gen: generated.len(),
        sigma: cfg.sigma,
        clustering_bins: cfg.clustering_bins,
    })
}

pub fn mmd_graphs(reference: &[Graph], generated: &[Graph], cfg: &MmdConfig) -> Result<MmdReport> {
    let a = stats_all(reference, cfg.clustering_bins, cfg.jobs);
    let b = stats_all(generated, cfg.clustering_bins, cfg.jobs);
    mmd(&a, &b, cfg)
}

/// Mean MMD between `test` and `draws` random subsets of `train` of the
/// same size: the score of a model that reproduces training graphs.
pub fn training_floor(train: &[Graph], test: &[Graph], draws: usize, seed: u64, cfg: &MmdConfig) -> Result<MmdReport> {
    if test.len() > train.len() || test.is_empty() || draws == 0 {
        return Err(Error::InvalidGraph(format!(
            "floor needs 1 <= |test| ({}) <= |train| ({}) and draws > 0",
            test.len(),
            train.len()
        )));
    }
    let ts = stats_all(test, cfg.clustering_bins, cfg.jobs);
    let tr = stats_all(train, cfg.clustering_bins, cfg.jobs);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut acc, mut raw) = ([0.0; 3], [0.0; 3]);
    for _ in 0..draws {
        let pick: Vec<GraphStats> = sample(&mut rng, tr.len(), ts.len()).into_iter().map(|i| tr[i].clone()).collect();
        let r = mmd(&ts, &pick, cfg)?;
        for k in 0..3 {
            acc[k] += [r.degree, r.clustering, r.orbit][k] / draws as f64;
            raw[k] += r.raw[k] / draws as f64;
        }
    }
    Ok(MmdReport {
        degree: acc[0],
        clustering: acc[1],
        orbit: acc[2],
        average: acc.iter().sum::<f64>() / 3.0,
        raw,
        n_ref: ts.len(),
        n_gen: ts.len(),
        sigma: cfg.sigma,
        clustering_bins: cfg.clustering_bins,
    })
}

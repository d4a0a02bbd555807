use serde::{Deserialize, Serialize};

use super::{mmd_graphs, par_map, MmdConfig};
use crate::error::{Error, Result};
use crate::featurize::FeatureConfig;
use crate::graph::Graph;
use crate::trainer::{
    augment_all, dataset_perplexity, reconstruction_errors, sample_graphs, stream_rng, train_autoencoder, train_prior, ModelConfig,
    STREAM_FEATURES, STREAM_GENERATE, STREAM_HELDOUT_FEATURES,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureCell {
    pub name: String,
    pub features: FeatureConfig,
}

const FAMILIES: [&str; 4] = ["paths", "spectral", "cycles", "random"];

fn with_family(mut f: FeatureConfig, family: &str, on: bool) -> FeatureConfig {
    match family {
        "paths" => f.paths = on,
        "spectral" => f.spectral = on,
        "cycles" => f.cycles = on,
        _ => f.random = on,
    }
    f
}

/// `all`, `none`, each family alone (`only-*`) and all but one (`no-*`).
/// Orders and widths come from `base`.
pub fn feature_cells(base: &FeatureConfig) -> Vec<FeatureCell> {
    let all = FeatureConfig { paths: true, spectral: true, cycles: true, random: true, ..base.clone() };
    let none = FeatureConfig { paths: false, spectral: false, cycles: false, random: false, ..base.clone() };
    let mut cells = vec![
        FeatureCell { name: "all".into(), features: all.clone() },
        FeatureCell { name: "none".into(), features: none.clone() },
    ];
    for f in FAMILIES {
        cells.push(FeatureCell { name: format!("only-{f}"), features: with_family(none.clone(), f, true) });
    }
    for f in FAMILIES {
        cells.push(FeatureCell { name: format!("no-{f}"), features: with_family(all.clone(), f, false) });
    }
    cells
}

/// Reconstruction loss of one cell at one epoch across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub epoch: usize,
    pub cell: String,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub std: f64,
    pub seeds: usize,
}

pub const FEATURE_HEADER: &str = "epoch,cell,mean_loss_recon,std_loss_recon,seeds";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureAblation {
    /// Epoch-major, one row per cell within each epoch.
    pub rows: Vec<FeatureRow>,
}

impl FeatureAblation {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{FEATURE_HEADER}\n");
        for r in &self.rows {
            s += &format!("{},{},{:.9e},{:.9e},{}\n", r.epoch, r.cell, r.mean, r.std, r.seeds);
        }
        s
    }

    /// Mean loss of `cell` at the last epoch.
    pub fn final_loss(&self, cell: &str) -> Option<f64> {
        self.rows.iter().rev().find(|r| r.cell == cell).map(|r| r.mean)
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, var.sqrt())
}

/// Stage 1 for every cell and seed; each seed is shared by all cells so
/// the comparisons are paired.
pub fn ablation_feature_report(
    train: &[Graph],
    cfg: &ModelConfig,
    cells: &[FeatureCell],
    seeds: &[u64],
    jobs: usize,
) -> Result<FeatureAblation> {
    if cells.is_empty() || seeds.is_empty() {
        return Err(Error::Config(vec!["ablation needs at least one cell and one seed".into()]));
    }
    let runs = par_map(cells.len() * seeds.len(), jobs, |k| {
        let mut c = cfg.clone();
        c.features = cells[k / seeds.len()].features.clone();
        c.seed = seeds[k % seeds.len()];
        train_autoencoder(train, &[], &c, &mut |_| {}).map(|o| o.curve.iter().map(|r| r.loss_recon.unwrap_or(f64::NAN)).collect::<Vec<f64>>())
    });
    let curves = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for epoch in 0..cfg.epochs_ae {
        for (ci, cell) in cells.iter().enumerate() {
            let v: Vec<f64> = (0..seeds.len()).map(|s| curves[ci * seeds.len() + s][epoch]).collect();
            let (mean, std) = mean_std(&v);
            rows.push(FeatureRow { epoch, cell: cell.name.clone(), mean, std, seeds: seeds.len() });
        }
    }
    Ok(FeatureAblation { rows })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodebookCell {
    pub m: usize,
    pub parts: usize,
}

impl CodebookCell {
    pub fn dictionary(&self) -> f64 {
        (self.m as f64).powi(self.parts as i32)
    }

    pub fn label(&self) -> String {
        format!("{}^{}", self.m, self.parts)
    }
}

/// One seed of one cell; `seed` is `None` on the per-cell mean rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodebookRow {
    pub cell: CodebookCell,
    pub seed: Option<u64>,
    pub best_recon: f64,
    pub node_err: f64,
    pub edge_err: f64,
    pub perplexity: f64,
    pub mmd_deg: f64,
    pub mmd_clust: f64,
    pub mmd_orbit: f64,
    pub mmd_avg: f64,
}

impl CodebookRow {
    fn values(&self) -> [f64; 8] {
        [
            self.best_recon,
            self.node_err,
            self.edge_err,
            self.perplexity,
            self.mmd_deg,
            self.mmd_clust,
            self.mmd_orbit,
            self.mmd_avg,
        ]
    }
}

pub const CODEBOOK_HEADER: &str = "m,parts,dictionary,seed,best_loss_recon,node_err,edge_err,perplexity,mmd_deg,mmd_clust,mmd_orbit,mmd_avg";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodebookAblation {
    /// Per-seed rows, cell-major.
    pub runs: Vec<CodebookRow>,
    /// One mean row per cell.
    pub means: Vec<CodebookRow>,
}

impl CodebookAblation {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{CODEBOOK_HEADER}\n");
        for r in self.runs.iter().chain(&self.means) {
            let seed = r.seed.map_or("mean".to_string(), |x| x.to_string());
            s += &format!("{},{},{},{seed}", r.cell.m, r.cell.parts, r.cell.dictionary());
            for v in r.values() {
                s += &format!(",{v:.9e}");
            }
            s.push('\n');
        }
        s
    }

    pub fn mean(&self, cell: CodebookCell) -> Option<&CodebookRow> {
        self.means.iter().find(|r| r.cell == cell)
    }
}

/// Both stages for every cell and seed. Perplexity is measured on the
/// training set, error rates on `heldout`, and the MMD of `gen_count`
/// samples against `heldout`.
pub fn ablation_codebook_report(
    train: &[Graph],
    heldout: &[Graph],
    cfg: &ModelConfig,
    cells: &[CodebookCell],
    seeds: &[u64],
    gen_count: usize,
    jobs: usize,
) -> Result<CodebookAblation> {
    if cells.is_empty() || seeds.is_empty() {
        return Err(Error::Config(vec!["ablation needs at least one cell and one seed".into()]));
    }
    let mcfg = MmdConfig { sigma: cfg.mmd_sigma, clustering_bins: cfg.clustering_bins, jobs: 1 };
    let runs = par_map(cells.len() * seeds.len(), jobs, |k| -> Result<CodebookRow> {
        let cell = cells[k / seeds.len()];
        let mut c = cfg.clone();
        c.m = cell.m;
        c.parts = cell.parts;
        c.seed = seeds[k % seeds.len()];
        let ae = train_autoencoder(train, heldout, &c, &mut |_| {})?;
        let best_recon = ae.curve.iter().filter_map(|r| r.loss_recon).fold(f64::INFINITY, f64::min);
        let perplexity = dataset_perplexity(&ae.model, &augment_all(train, &c.features, c.seed, STREAM_FEATURES)?)?;
        let e = reconstruction_errors(&ae.model, &augment_all(heldout, &c.features, c.seed, STREAM_HELDOUT_FEATURES)?)?;
        let pr = train_prior(ae.model, train, heldout, &mut |_| {})?;
        let samples = sample_graphs(&pr.model, gen_count, c.n_max, &mut stream_rng(c.seed, STREAM_GENERATE))?;
        let m = mmd_graphs(heldout, &samples.graphs, &mcfg)?;
        Ok(CodebookRow {
            cell,
            seed: Some(c.seed),
            best_recon,
            node_err: e.node_rate(),
            edge_err: e.edge_rate(),
            perplexity,
            mmd_deg: m.degree,
            mmd_clust: m.clustering,
            mmd_orbit: m.orbit,
            mmd_avg: m.average,
        })
    });
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let means = cells
        .iter()
        .enumerate()
        .map(|(ci, &cell)| {
            let rs = &runs[ci * seeds.len()..(ci + 1) * seeds.len()];
            let avg = |f: fn(&CodebookRow) -> f64| rs.iter().map(f).sum::<f64>() / rs.len() as f64;
            CodebookRow {
                cell,
                seed: None,
                best_recon: avg(|r| r.best_recon),
                node_err: avg(|r| r.node_err),
                edge_err: avg(|r| r.edge_err),
                perplexity: avg(|r| r.perplexity),
                mmd_deg: avg(|r| r.mmd_deg),
                mmd_clust: avg(|r| r.mmd_clust),
                mmd_orbit: avg(|r| r.mmd_orbit),
                mmd_avg: avg(|r| r.mmd_avg),
            }
        })
        .collect();
    Ok(CodebookAblation { runs, means })
}

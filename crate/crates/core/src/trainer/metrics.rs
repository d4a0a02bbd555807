use std::io::Write;
use std::path::Path;

use crate::error::Result;

pub const METRICS_HEADER: &str = "step,loss_recon,loss_commit,nll,perplexity,node_err,edge_err";

/// One logged row; absent values are written as empty fields.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub step: u64,
    pub loss_recon: Option<f64>,
    pub loss_commit: Option<f64>,
    pub nll: Option<f64>,
    /// Held-out NLL (stage 2); reported on the console, not in the CSV.
    pub heldout_nll: Option<f64>,
    pub perplexity: Option<f64>,
    pub node_err: Option<f64>,
    pub edge_err: Option<f64>,
}

fn field(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.9e}")).unwrap_or_default()
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step,
            field(self.loss_recon),
            field(self.loss_commit),
            field(self.nll),
            field(self.perplexity),
            field(self.node_err),
            field(self.edge_err)
        )
    }
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    std::fs::File::create(path)?.write_all(out.as_bytes())?;
    Ok(())
}

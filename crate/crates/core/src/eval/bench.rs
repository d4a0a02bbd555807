use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prior::PriorModel;
use crate::trainer::{sample_graphs, stream_rng, TrainedModel, STREAM_GENERATE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MachineInfo {
    pub os: String,
    pub arch: String,
    pub cpus: usize,
    pub cpu_model: Option<String>,
    /// Worker threads used while timing; always 1.
    pub jobs: usize,
}

pub fn machine_info() -> MachineInfo {
    let cpu_model = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| s.lines().find(|l| l.starts_with("model name")).and_then(|l| l.split(':').nth(1)).map(|m| m.trim().to_string()));
    MachineInfo {
        os: std::env::consts::OS.into(),
        arch: std::env::consts::ARCH.into(),
        cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
        cpu_model,
        jobs: 1,
    }
}

/// Wall time to sample and decode `count` graphs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenBenchReport {
    pub count: usize,
    pub n_max: usize,
    pub total_secs: f64,
    pub sample_secs: f64,
    pub decode_secs: f64,
    /// Categorical draws made by the prior, end-of-sequence included.
    pub sampling_steps: usize,
    /// `sample_secs / sampling_steps`, 0 when nothing was sampled.
    pub secs_per_step: f64,
    pub mean_nodes: f64,
    pub truncated: usize,
    pub machine: MachineInfo,
}

pub fn benchmark_generation(model: &TrainedModel, count: usize, n_max: usize, seed: u64) -> Result<GenBenchReport> {
    let mut rng = stream_rng(seed, STREAM_GENERATE);
    let t0 = Instant::now();
    let s = sample_graphs(model, count, n_max, &mut rng)?;
    let total_secs = t0.elapsed().as_secs_f64();
    let steps = s.sampling_steps();
    Ok(GenBenchReport {
        count,
        n_max,
        total_secs,
        sample_secs: s.sample_secs,
        decode_secs: s.decode_secs,
        sampling_steps: steps,
        secs_per_step: if steps == 0 { 0.0 } else { s.sample_secs / steps as f64 },
        mean_nodes: if count == 0 { 0.0 } else { s.graphs.iter().map(|g| g.n()).sum::<usize>() as f64 / count as f64 },
        truncated: s.stats.iter().filter(|x| x.truncated).count(),
        machine: machine_info(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepCostPoint {
    pub n_max: usize,
    pub rep: usize,
    pub secs_per_step: f64,
    pub mean_nodes: f64,
}

/// Per-step sampling cost for each `n_max`, `reps` times each, with the
/// prior ending sequences on its own.
pub fn step_cost_sweep(model: &TrainedModel, n_maxes: &[usize], count: usize, reps: usize, seed: u64) -> Result<Vec<StepCostPoint>> {
    let mut out = Vec::new();
    for rep in 0..reps {
        for &n_max in n_maxes {
            let r = benchmark_generation(model, count, n_max, seed.wrapping_add(rep as u64))?;
            out.push(StepCostPoint { n_max, rep, secs_per_step: r.secs_per_step, mean_nodes: r.mean_nodes });
        }
    }
    Ok(out)
}

/// Mean seconds to evaluate every partition of position `t`, for `t` in
/// `0..len`, over `reps` forced full-length sequences.
pub fn position_cost_profile(model: &TrainedModel, len: usize, reps: usize) -> Result<Vec<f64>> {
    let prior = model.prior.as_ref().ok_or_else(|| Error::Unsupported("checkpoint has no prior".into()))?;
    let mut pcfg = model.cfg.prior_config();
    pcfg.n_max = pcfg.n_max.max(len);
    let pm = PriorModel::new(&pcfg, prior)?;
    let inputs: Vec<Vec<f64>> = (0..pcfg.parts).map(|c| vec![0.1; pcfg.in_width(c)]).collect();
    let mut secs = vec![0.0; len];
    for _ in 0..reps {
        let mut s = pm.session();
        for (t, acc) in secs.iter_mut().enumerate() {
            let t0 = Instant::now();
            for (c, x) in inputs.iter().enumerate() {
                std::hint::black_box(s.position(t, c, x)?);
            }
            *acc += t0.elapsed().as_secs_f64() / reps.max(1) as f64;
        }
    }
    Ok(secs)
}

/// Ordinary least squares `y ≈ intercept + slope·x`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    /// Standard error of the slope; needs at least three points.
    pub slope_se: f64,
}

impl LineFit {
    pub fn t_stat(&self) -> f64 {
        self.slope / self.slope_se
    }
}

pub fn fit_line(x: &[f64], y: &[f64]) -> Result<LineFit> {
    let n = x.len();
    if n != y.len() || n < 3 {
        return Err(Error::Shape(format!("line fit needs >= 3 paired points, got {} and {}", x.len(), y.len())));
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Numerical("line fit with constant x".into()));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let r2 = if syy == 0.0 { 1.0 } else { 1.0 - sse / syy };
    let slope_se = (sse / (n - 2) as f64 / sxx).sqrt();
    Ok(LineFit { slope, intercept, r2, slope_se })
}

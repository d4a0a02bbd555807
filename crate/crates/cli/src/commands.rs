use std::path::{Path, PathBuf};

use dgae_core::eval::{
    ablation_codebook_report, ablation_feature_report, benchmark_generation, feature_cells, fit_line, machine_info, mmd_graphs,
    position_cost_profile, step_cost_sweep, training_floor, CodebookCell, MmdConfig, MmdReport, MMD_HEADER, MMD_NOTES,
};
use dgae_core::featurize::{AugmentedGraph, FeatureConfig};
use dgae_core::graph::{generate_dataset, load_dataset, save_dataset, DatasetSpec};
use dgae_core::prior::{read_sequences, write_sequences, SequenceCache};
use dgae_core::trainer::{
    augment_all, augment_all_jobs, encode_sequences, sample_graphs, split_dataset, stream_rng, train_autoencoder, train_prior,
    write_metrics_csv, Checkpoint, MetricsRow, ModelConfig, TrainedModel, STREAM_FEATURES, STREAM_GENERATE,
};
use dgae_core::{Error, Graph, Result};

use crate::manifest::{beside, now, RunManifest};
use crate::{
    AblateCmd, AblateCodebookArgs, AblateFeaturesArgs, BenchCmd, BenchGenArgs, Cli, Cmd, DatasetCmd, DatasetGenArgs, EvalArgs,
    FeaturizeArgs, GenerateArgs, TrainAeArgs, TrainPriorArgs,
};

pub fn run(cli: &Cli) -> Result<()> {
    if cli.jobs == 0 {
        return Err(Error::Config(vec!["--jobs must be >= 1".into()]));
    }
    match &cli.cmd {
        Cmd::Dataset { cmd: DatasetCmd::Gen(a) } => dataset_gen(cli, a),
        Cmd::Featurize(a) => featurize(cli, a),
        Cmd::TrainAe(a) => train_ae(cli, a),
        Cmd::TrainPrior(a) => train_prior_cmd(cli, a),
        Cmd::Generate(a) => generate(cli, a),
        Cmd::Eval(a) => eval(cli, a),
        Cmd::Ablate { cmd: AblateCmd::Features(a) } => ablate_features(cli, a),
        Cmd::Ablate { cmd: AblateCmd::Codebook(a) } => ablate_codebook(cli, a),
        Cmd::Bench { cmd: BenchCmd::Gen(a) } => bench_gen(cli, a),
    }
}

/// `--config` resolved against the compiled defaults.
fn load_config(path: Option<&Path>) -> Result<ModelConfig> {
    let Some(path) = path else { return Ok(ModelConfig::default()) };
    let text = std::fs::read_to_string(path)?;
    let cfg = if path.extension().is_some_and(|e| e == "json") {
        match serde_json::from_str::<ModelConfig>(&text) {
            Ok(c) => c,
            Err(full) => match serde_json::from_str::<FeatureConfig>(&text) {
                Ok(features) => ModelConfig { features, ..ModelConfig::default() },
                Err(_) => return Err(Error::Config(vec![full.to_string()])),
            },
        }
    } else {
        ModelConfig::from_toml(&text)?
    };
    cfg.check()?;
    Ok(cfg)
}

fn load_model(path: &Path) -> Result<(Checkpoint, TrainedModel)> {
    let ck = Checkpoint::load(path)?;
    let model = TrainedModel::from_checkpoint(&ck)?;
    Ok((ck, model))
}

/// Config for commands that start from a checkpoint: `--config` if given,
/// otherwise the one stored in the checkpoint.
fn checkpoint_config(cli: &Cli, ckpt: &Path) -> Result<ModelConfig> {
    match &cli.config {
        Some(p) => load_config(Some(p)),
        None => Ok(Checkpoint::load(ckpt)?.header.config),
    }
}

fn dry_run(text: &str) -> Result<()> {
    print!("{text}");
    Ok(())
}

fn finish(command: &str, config_text: &str, seed: u64, started: f64, outputs: &[PathBuf], manifest: &Path) -> Result<()> {
    RunManifest::new(command, config_text, seed, started, outputs).write(manifest)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn progress(what: &str, every: usize) -> impl FnMut(&MetricsRow) + '_ {
    move |r: &MetricsRow| {
        if (r.epoch + 1) % every.max(1) == 0 {
            eprintln!("{what} epoch {} {}", r.epoch + 1, r.csv_line());
        }
    }
}

fn dataset_gen(cli: &Cli, a: &DatasetGenArgs) -> Result<()> {
    if cli.config.is_some() {
        return Err(Error::Config(vec!["dataset gen is configured by its flags, not --config".into()]));
    }
    if a.spec != "community-small" {
        return Err(Error::Config(vec![format!("unknown dataset spec {:?}; available: community-small", a.spec)]));
    }
    let mut spec = DatasetSpec::community_small(a.count, a.seed);
    if let Some(s) = &a.sizes {
        spec.sizes = s.clone();
    }
    if let Some(p) = a.p_intra {
        spec.p_intra = p;
    }
    if let Some(p) = a.p_inter {
        spec.p_inter = p;
    }
    let text = toml::to_string(&spec).expect("spec serializes");
    if cli.dry_run {
        return dry_run(&text);
    }
    let started = now();
    let graphs = generate_dataset(&spec)?;
    save_dataset(&graphs, &a.out)?;
    finish("dataset gen", &text, a.seed, started, &[a.out.clone()], &beside(&a.out))
}

fn featurize(cli: &Cli, a: &FeaturizeArgs) -> Result<()> {
    let mut cfg = load_config(cli.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if a.report != "widths" && a.report != "summary" {
        return Err(Error::Config(vec![format!("unknown report {:?}; available: widths, summary", a.report)]));
    }
    let text = cfg.to_toml();
    if cli.dry_run {
        return dry_run(&text);
    }
    let started = now();
    let graphs = load_dataset(&a.input)?;
    let aug = augment_all_jobs(&graphs, &cfg.features, cfg.seed, STREAM_FEATURES, cli.jobs)?;
    let report = match a.report.as_str() {
        "widths" => widths_report(&graphs, &cfg.features)?,
        _ => summary_report(&aug, &graphs, &cfg.features),
    };
    match &a.out {
        Some(out) => {
            write_text(out, &report)?;
            finish("featurize", &text, cfg.seed, started, &[out.clone()], &beside(out))
        }
        None => dry_run(&report),
    }
}

/// Column families in node-feature order, with their widths.
fn node_families(f: &FeatureConfig, node_cats: usize) -> Vec<(&'static str, usize)> {
    let mut v = vec![("categories", node_cats)];
    if f.paths {
        v.push(("paths", f.p));
    }
    if f.spectral {
        v.push(("spectral", f.k));
    }
    if f.cycles {
        v.push(("cycles", 3));
    }
    if f.random {
        v.push(("random", f.d_rand));
    }
    v
}

fn dims(graphs: &[Graph]) -> Result<(usize, usize)> {
    let g = graphs.first().ok_or_else(|| Error::InvalidGraph("empty dataset".into()))?;
    Ok((g.node_cats(), g.edge_cats()))
}

fn widths_report(graphs: &[Graph], f: &FeatureConfig) -> Result<String> {
    let (r, s) = dims(graphs)?;
    let mut edge = vec![("categories", s)];
    if f.paths {
        edge.push(("paths", f.p));
    }
    let obj = |v: Vec<(&str, usize)>| serde_json::Value::Object(v.into_iter().map(|(k, w)| (k.to_string(), w.into())).collect());
    let j = serde_json::json!({
        "graphs": graphs.len(),
        "node_width": f.node_width(r),
        "edge_width": f.edge_width(s),
        "node": obj(node_families(f, r)),
        "edge": obj(edge),
    });
    Ok(serde_json::to_string_pretty(&j)? + "\n")
}

/// Mean, standard deviation, minimum and maximum of every node column.
fn summary_report(aug: &[AugmentedGraph], graphs: &[Graph], f: &FeatureConfig) -> String {
    let mut s = String::from("column,family,mean,std,min,max\n");
    let Some(first) = aug.first() else { return s };
    let w = first.node_width;
    let labels: Vec<&str> = node_families(f, graphs[0].node_cats()).into_iter().flat_map(|(n, k)| std::iter::repeat_n(n, k)).collect();
    for (col, family) in labels.iter().enumerate().take(w) {
        let v: Vec<f64> = aug.iter().flat_map(|g| g.node_feats.chunks(w).map(move |row| row[col])).collect();
        let n = v.len().max(1) as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        let min = v.iter().copied().fold(f64::INFINITY, f64::min);
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        s += &format!("{col},{family},{mean:.9e},{std:.9e},{min:.9e},{max:.9e}\n");
    }
    s
}

fn train_ae(cli: &Cli, a: &TrainAeArgs) -> Result<()> {
    let mut cfg = load_config(cli.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let text = cfg.to_toml();
    if cli.dry_run {
        return dry_run(&text);
    }
    let started = now();
    let data = load_dataset(&a.data)?;
    let (train, held) = match &a.heldout {
        Some(p) => (data, load_dataset(p)?),
        None => split_dataset(&data, cfg.heldout_fraction, cfg.seed)?,
    };
    let out = train_autoencoder(&train, &held, &cfg, &mut progress("ae", cfg.eval_every))?;
    for w in &out.warnings {
        eprintln!("warning: {w}");
    }
    std::fs::create_dir_all(&a.out_dir)?;
    let d = &a.out_dir;
    let outputs = [d.join("ae.dgae"), d.join("metrics.csv"), d.join("train.jsonl"), d.join("heldout.jsonl"), d.join("sequences.cache")];
    out.model.to_checkpoint(&stream_rng(cfg.seed, STREAM_GENERATE)).save(&outputs[0])?;
    write_metrics_csv(&outputs[1], &out.curve)?;
    save_dataset(&train, &outputs[2])?;
    save_dataset(&held, &outputs[3])?;
    let seqs = encode_sequences(&out.model, &augment_all(&train, &cfg.features, cfg.seed, STREAM_FEATURES)?)?;
    write_sequences(&outputs[4], &SequenceCache { m: cfg.m, parts: cfg.parts, seqs })?;
    finish("train-ae", &text, cfg.seed, started, &outputs, &d.join("manifest.json"))
}

/// Names of codec-defining settings that differ between two configs.
fn codec_mismatches(a: &ModelConfig, b: &ModelConfig) -> Vec<String> {
    let checks = [
        ("seed", a.seed == b.seed),
        ("features", a.features == b.features),
        ("gnn_layers", a.gnn_layers == b.gnn_layers),
        ("hidden", a.hidden == b.hidden),
        ("mlp_hidden", a.mlp_hidden == b.mlp_hidden),
        ("mlp_depth", a.mlp_depth == b.mlp_depth),
        ("d_latent", a.d_latent == b.d_latent),
        ("parts", a.parts == b.parts),
        ("m", a.m == b.m),
    ];
    checks.iter().filter(|c| !c.1).map(|c| format!("{} differs from the stage-1 checkpoint", c.0)).collect()
}

fn train_prior_cmd(cli: &Cli, a: &TrainPriorArgs) -> Result<()> {
    let cfg = checkpoint_config(cli, &a.ckpt)?;
    let text = cfg.to_toml();
    if cli.dry_run {
        return dry_run(&text);
    }
    let started = now();
    let (ck, mut model) = load_model(&a.ckpt)?;
    let bad = codec_mismatches(&cfg, &ck.header.config);
    if !bad.is_empty() {
        return Err(Error::Config(bad));
    }
    model.cfg = cfg.clone();
    let train = load_dataset(&a.data)?;
    let held = match &a.heldout {
        Some(p) => load_dataset(p)?,
        None => Vec::new(),
    };
    if let Some(p) = &a.cache {
        let cached = read_sequences(p)?;
        let fresh = encode_sequences(&model, &augment_all(&train, &cfg.features, cfg.seed, STREAM_FEATURES)?)?;
        if cached != (SequenceCache { m: cfg.m, parts: cfg.parts, seqs: fresh }) {
            return Err(Error::Format(format!("{} does not match a fresh encoding of {}", p.display(), a.data.display())));
        }
    }
    let out = train_prior(model, &train, &held, &mut |r| {
        if (r.epoch + 1) % cfg.eval_every.max(1) == 0 {
            let h = r.heldout_nll.map(|v| format!(" heldout_nll {v:.6}")).unwrap_or_default();
            eprintln!("prior epoch {} {}{h}", r.epoch + 1, r.csv_line());
        }
    })?;
    std::fs::create_dir_all(&a.out_dir)?;
    let d = &a.out_dir;
    let outputs = [d.join("prior.dgae"), d.join("metrics.csv"), d.join("sequences.cache")];
    out.model.to_checkpoint(&stream_rng(cfg.seed, STREAM_GENERATE)).save(&outputs[0])?;
    write_metrics_csv(&outputs[1], &out.curve)?;
    write_sequences(&outputs[2], &out.cache)?;
    finish("train-prior", &text, cfg.seed, started, &outputs, &d.join("manifest.json"))
}

fn generate(cli: &Cli, a: &GenerateArgs) -> Result<()> {
    let cfg = checkpoint_config(cli, &a.ckpt)?;
    let seed = a.seed.unwrap_or(cfg.seed);
    let n_max = a.n_max.unwrap_or(cfg.n_max);
    if n_max == 0 {
        return Err(Error::Config(vec!["--n-max must be >= 1".into()]));
    }
    let text = cfg.to_toml();
    if cli.dry_run {
        return dry_run(&text);
    }
    let started = now();
    let (_, model) = load_model(&a.ckpt)?;
    let s = sample_graphs(&model, a.count, n_max, &mut stream_rng(seed, STREAM_GENERATE))?;
    save_dataset(&s.graphs, &a.out)?;
    eprintln!("generated {} graphs in {:.2}s ({} sampling steps)", a.count, s.sample_secs + s.decode_secs, s.sampling_steps());
    finish("generate", &text, seed, started, &[a.out.clone()], &beside(&a.out))
}

fn eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let cfg = load_config(cli.config.as_deref())?;
    let text = cfg.to_toml();
    if cli.dry_run {
        return dry_run(&text);
    }
    let started = now();
    let mc = MmdConfig { sigma: cfg.mmd_sigma, clustering_bins: cfg.clustering_bins, jobs: cli.jobs };
    let reference = load_dataset(&a.reference)?;
    let generated = load_dataset(&a.gen)?;
    let mut rows: Vec<(&str, MmdReport)> = vec![("generated", mmd_graphs(&reference, &generated, &mc)?)];
    if let Some(p) = &a.train {
        rows.push(("floor", training_floor(&load_dataset(p)?, &reference, a.floor_draws, a.seed, &mc)?));
    }
    for (name, r) in &rows {
        let neg = r.negative();
        if !neg.is_empty() {
            eprintln!("note: {name} has negative raw MMD for {} (clamped to 0)", neg.join(", "));
        }
    }
    let mut csv = format!("{}\n{}\nsample,{MMD_HEADER}\n", MMD_NOTES[0], MMD_NOTES[1]);
    for (name, r) in &rows {
        csv += &format!("{name},{}\n", r.csv_row());
    }
    match &a.out {
        Some(out) => {
            write_text(out, &csv)?;
            finish("eval", &text, a.seed, started, &[out.clone()], &beside(out))
        }
        None => dry_run(&csv),
    }
}

fn ablate_features(cli: &Cli, a: &AblateFeaturesArgs) -> Result<()> {
    let mut cfg = load_config(cli.config.as_deref())?;
    cfg.epochs_ae = a.epochs;
    cfg.check()?;
    let text = cfg.to_toml();
    if cli.dry_run {
        return dry_run(&text);
    }
    let started = now();
    let data = load_dataset(&a.data)?;
    let cells = feature_cells(&cfg.features);
    let rep = ablation_feature_report(&data, &cfg, &cells, &a.seeds, cli.jobs)?;
    for c in &cells {
        if let Some(l) = rep.final_loss(&c.name) {
            eprintln!("{:<14} final loss_recon {l:.6}", c.name);
        }
    }
    write_text(&a.out, &rep.to_csv())?;
    finish("ablate features", &text, cfg.seed, started, &[a.out.clone()], &beside(&a.out))
}

fn parse_cell(s: &str) -> Result<CodebookCell> {
    let bad = || Error::Config(vec![format!("grid cell {s:?} is not of the form <m>x<C>")]);
    let (m, c) = s.trim().split_once('x').ok_or_else(bad)?;
    Ok(CodebookCell { m: m.parse().map_err(|_| bad())?, parts: c.parse().map_err(|_| bad())? })
}

fn ablate_codebook(cli: &Cli, a: &AblateCodebookArgs) -> Result<()> {
    let cfg = load_config(cli.config.as_deref())?;
    let cells = a.grid.iter().map(|s| parse_cell(s)).collect::<Result<Vec<_>>>()?;
    let problems: Vec<String> = cells
        .iter()
        .flat_map(|c| ModelConfig { m: c.m, parts: c.parts, ..cfg.clone() }.validate().into_iter().map(move |v| format!("cell {}x{}: {v}", c.m, c.parts)))
        .collect();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let text = cfg.to_toml();
    if cli.dry_run {
        return dry_run(&text);
    }
    let started = now();
    let data = load_dataset(&a.data)?;
    let (train, held) = split_dataset(&data, cfg.heldout_fraction, cfg.seed)?;
    let rep = ablation_codebook_report(&train, &held, &cfg, &cells, &a.seeds, a.gen_count, cli.jobs)?;
    write_text(&a.out, &rep.to_csv())?;
    finish("ablate codebook", &text, cfg.seed, started, &[a.out.clone()], &beside(&a.out))
}

fn bench_gen(cli: &Cli, a: &BenchGenArgs) -> Result<()> {
    let cfg = checkpoint_config(cli, &a.ckpt)?;
    let text = cfg.to_toml();
    if cli.dry_run {
        return dry_run(&text);
    }
    let started = now();
    let (_, model) = load_model(&a.ckpt)?;
    let n_max = a.n_max.unwrap_or(cfg.n_max);
    let reports = a.counts.iter().map(|&c| benchmark_generation(&model, c, n_max, a.seed)).collect::<Result<Vec<_>>>()?;
    for r in &reports {
        eprintln!("count {} total {:.3}s per-step {:.3e}s", r.count, r.total_secs, r.secs_per_step);
    }
    let count_fit = fit_line(
        &reports.iter().map(|r| r.count as f64).collect::<Vec<_>>(),
        &reports.iter().map(|r| r.total_secs).collect::<Vec<_>>(),
    )
    .ok();
    let sweep = step_cost_sweep(&model, &a.sweep, a.sweep_count, a.reps, a.seed)?;
    let sweep_fit = fit_line(
        &sweep.iter().map(|p| p.n_max as f64).collect::<Vec<_>>(),
        &sweep.iter().map(|p| p.secs_per_step).collect::<Vec<_>>(),
    )
    .ok();
    let profile = position_cost_profile(&model, a.profile_len, a.reps)?;
    let profile_fit = fit_line(&(0..profile.len()).map(|t| t as f64).collect::<Vec<_>>(), &profile).ok();
    let fit_json = |f: Option<dgae_core::eval::LineFit>| {
        f.map(|f| serde_json::json!({"slope": f.slope, "intercept": f.intercept, "r2": f.r2, "slope_se": f.slope_se, "t_stat": f.t_stat()}))
    };
    let j = serde_json::json!({
        "machine": machine_info(),
        "n_max": n_max,
        "reports": reports,
        "count_fit": fit_json(count_fit),
        "step_cost_sweep": {"points": sweep, "fit_vs_n_max": fit_json(sweep_fit)},
        "forced_length_profile": {"secs_per_position": profile, "fit_vs_position": fit_json(profile_fit)},
    });
    write_text(&a.out, &(serde_json::to_string_pretty(&j)? + "\n"))?;
    finish("bench gen", &text, a.seed, started, &[a.out.clone()], &beside(&a.out))
}

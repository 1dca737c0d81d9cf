use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use rayon::prelude::*;
use serde_json::{json, Value};

use sortlab::circuits::{export_heatmap, CircuitSet, DEFAULT_RANK_TOLERANCE};
use sortlab::datagen::{
    delta_stats, gen_distilled, gen_fixed_delta, gen_perturbed, gen_uniform, load_dataset,
    make_validation, save_dataset, SortDataset,
};
use sortlab::llc::{self, llc_scan, write_llc_csv, LlcRow, ModelTarget, SgldConfig};
use sortlab::model::{load_checkpoint, ModelParams};
use sortlab::regions::{model_qk_gradient, ov_partition, QkNormalization};
use sortlab::specialization::{ablation_table, classify, write_ablation_csv, Thresholds};
use sortlab::trainer::{
    self, checkpoint_path, list_checkpoints, load_run_config, ResumeOptions, TrainConfig,
    METRICS_FILE,
};

mod manifest;

use manifest::RunManifest;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Default root for run directories when `--out` is not given.
const OUTPUT_ROOT_VAR: &str = "SORTLAB_OUTPUT_ROOT";

#[derive(Parser, Debug)]
#[command(name = "sortlab", version, about = "Train and dissect list-sorting transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a dataset.
    Gen(GenArgs),
    /// Train a model from scratch.
    Train(TrainArgs),
    /// Continue a run from a checkpoint.
    Resume(ResumeArgs),
    /// Circuits, regions, specialization and ablations of checkpoints.
    Analyze(AnalyzeArgs),
    /// Local learning coefficient of checkpoints.
    Llc(LlcArgs),
    /// Circuit heatmaps and metrics as CSV.
    Export(ExportArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Method {
    Uniform,
    Distilled,
    FixedDelta,
    Perturbed,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, value_enum)]
    method: Method,
    #[arg(long, default_value_t = 10)]
    list_len: usize,
    #[arg(long, default_value_t = 52)]
    vocab: usize,
    #[arg(long, default_value_t = 150_000)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Source dataset for `distilled` and `perturbed`.
    #[arg(long)]
    base: Option<PathBuf>,
    /// Target mean gap for `distilled`.
    #[arg(long)]
    target_delta: Option<f64>,
    #[arg(long)]
    delta_min: Option<u32>,
    #[arg(long)]
    delta_max: Option<u32>,
    /// Also write a held-out set of this many lists (`<name>_val`).
    #[arg(long)]
    validation: Option<usize>,
    #[arg(long)]
    validation_seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// File stem; defaults to the method name.
    #[arg(long)]
    name: Option<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// JSON training config; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Extra evaluation dataset (repeatable).
    #[arg(long = "eval")]
    evals: Vec<PathBuf>,
    /// Run directory; defaults to `$SORTLAB_OUTPUT_ROOT/<dataset name>`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    /// Batch-sampling seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Initialisation seed.
    #[arg(long)]
    model_seed: Option<u64>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    no_ln: bool,
    #[arg(long)]
    no_wd: bool,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    checkpoints: Option<usize>,
    #[arg(long)]
    eval_interval: Option<u64>,
    #[arg(long)]
    eval_limit: Option<usize>,
    /// Estimate the LLC at every checkpoint with default SGLD settings.
    #[arg(long)]
    llc: bool,
}

#[derive(Args, Debug)]
struct ResumeArgs {
    #[arg(long)]
    run: PathBuf,
    /// Steps to add.
    #[arg(long)]
    steps: u64,
    /// Continue on another training set.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Replace the eval datasets (repeatable).
    #[arg(long = "eval")]
    evals: Vec<PathBuf>,
    #[arg(long)]
    from_step: Option<u64>,
    /// Write a new run instead of extending the source.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct CheckpointSel {
    #[arg(long)]
    run: PathBuf,
    /// Step number, `last` or `all`.
    #[arg(long, default_value = "last")]
    checkpoint: String,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[command(flatten)]
    sel: CheckpointSel,
    /// Dataset for regions and ablations; defaults to the run's training set.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Use only the first N lists of the dataset.
    #[arg(long, default_value_t = 20_000)]
    limit: usize,
    #[arg(long, default_value_t = DEFAULT_RANK_TOLERANCE)]
    tolerance: f64,
    /// Normalize the QK gradient by the raw (signed) mean.
    #[arg(long)]
    raw_mean: bool,
    /// Classification thresholds as JSON.
    #[arg(long)]
    thresholds: Option<PathBuf>,
    /// Skip regions and ablations.
    #[arg(long)]
    circuits_only: bool,
    /// Output directory; defaults to `<run>/analysis`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct LlcArgs {
    #[command(flatten)]
    sel: CheckpointSel,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long)]
    draws: Option<usize>,
    #[arg(long)]
    burn_in: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Scan grid values (comma separated); any of these turns on a scan.
    #[arg(long, value_delimiter = ',')]
    scan_epsilon: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    scan_gamma: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    scan_draws: Vec<usize>,
    /// Output CSV; defaults to `<run>/llc.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[command(flatten)]
    sel: CheckpointSel,
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<sortlab::Error> for Failure {
    fn from(e: sortlab::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type CmdResult = Result<RunManifest, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(anyhow::anyhow!(msg.into()))
}

fn require_exists(p: &Path) -> Result<(), Failure> {
    if p.exists() {
        Ok(())
    } else {
        Err(usage(format!("no such file or directory: {}", p.display())))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let start = Instant::now();
    let result = match cli.command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train(a),
        Command::Resume(a) => resume(a),
        Command::Analyze(a) => analyze(a),
        Command::Llc(a) => llc_cmd(a),
        Command::Export(a) => export(a),
    };
    match result {
        Ok(mut m) => {
            m.command = argv;
            m.duration_secs = start.elapsed().as_secs_f64();
            m.cpu_secs = manifest::process_cpu_secs();
            if let Err(e) = m.write() {
                eprintln!("error: {e:#}");
                return ExitCode::from(2);
            }
            ExitCode::SUCCESS
        }
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn gen(a: GenArgs) -> CmdResult {
    let base = || -> Result<SortDataset, Failure> {
        let p = a
            .base
            .as_ref()
            .ok_or_else(|| usage(format!("--method {:?} needs --base", a.method)))?;
        require_exists(p)?;
        Ok(load_dataset(p).with_context(|| format!("loading {}", p.display()))?.0)
    };
    let d = match a.method {
        Method::Uniform => gen_uniform(a.list_len, a.vocab, a.count, a.seed).context("generation")?,
        Method::Distilled => {
            let t = a
                .target_delta
                .ok_or_else(|| usage("--method distilled needs --target-delta"))?;
            gen_distilled(&base()?, t, a.seed).context("distillation")?
        }
        Method::FixedDelta => {
            let (Some(lo), Some(hi)) = (a.delta_min, a.delta_max) else {
                return Err(usage("--method fixed-delta needs --delta-min and --delta-max"));
            };
            gen_fixed_delta(lo, hi, a.list_len, a.vocab, a.count, a.seed).context("generation")?
        }
        Method::Perturbed => gen_perturbed(&base()?, a.seed).context("perturbation")?,
    };
    let name = a.name.clone().unwrap_or_else(|| d.manifest.generator.name().to_string());
    let paths = save_dataset(&d, &a.out, &name)?;
    let mut outputs = vec![paths.lists.clone(), paths.manifest.clone()];
    let mut report = json!({
        "name": name,
        "count": d.len(),
        "deltaMean": d.manifest.delta_mean,
        "deltaVariance": d.manifest.delta_variance,
    });
    if let Some(n) = a.validation {
        let seed = a.validation_seed.unwrap_or(a.seed.wrapping_add(1));
        let v = make_validation(&d, seed, Some(n)).context("validation set")?;
        let vp = save_dataset(&v, &a.out, &format!("{name}_val"))?;
        report["validation"] = json!({ "count": v.len(), "deltaMean": delta_stats(&v)?.mean });
        outputs.extend([vp.lists, vp.manifest]);
    }
    println!("{}", serde_json::to_string_pretty(&report).expect("plain JSON"));
    let mut m = RunManifest::new(&a.out, report);
    m.inputs = a.base.into_iter().collect();
    m.outputs = outputs;
    Ok(m)
}

fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_VAR).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

/// defaults, then the config file, then flags.
fn resolve_train_config(a: &TrainArgs) -> Result<TrainConfig, Failure> {
    let mut cfg = match &a.config {
        Some(p) => {
            require_exists(p)?;
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text)
                .map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(d) = &a.dataset {
        cfg.dataset = d.clone();
    }
    if cfg.dataset.as_os_str().is_empty() {
        return Err(usage("no dataset given (--dataset or \"dataset\" in the config)"));
    }
    if !a.evals.is_empty() {
        cfg.eval_datasets = a.evals.clone();
    }
    for p in std::iter::once(&cfg.dataset).chain(&cfg.eval_datasets) {
        require_exists(p)?;
    }
    macro_rules! set {
        ($flag:expr, $field:expr) => {
            if let Some(v) = $flag {
                $field = v;
            }
        };
    }
    set!(a.steps, cfg.total_steps);
    set!(a.seed, cfg.seed);
    set!(a.model_seed, cfg.model.seed);
    set!(a.heads, cfg.model.num_heads);
    set!(a.lr, cfg.optimizer.lr);
    set!(a.batch_size, cfg.batch_size);
    set!(a.checkpoints, cfg.num_checkpoints);
    set!(a.eval_interval, cfg.eval_interval);
    if a.eval_limit.is_some() {
        cfg.eval_limit = a.eval_limit;
    }
    if a.no_ln {
        cfg.model.use_layer_norm = false;
    }
    if a.no_wd {
        cfg.optimizer.weight_decay = 0.0;
    }
    if a.llc && cfg.llc.is_none() {
        cfg.llc = Some(SgldConfig::default());
    }
    // List length and vocabulary always follow the training data.
    let (d, _) = load_dataset(&cfg.dataset).with_context(|| format!("loading {}", cfg.dataset.display()))?;
    cfg.model.list_length = d.list_length();
    cfg.model.vocab_size = d.vocab_size();
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn train(a: TrainArgs) -> CmdResult {
    let cfg = resolve_train_config(&a)?;
    let dir = match &a.out {
        Some(d) => d.clone(),
        None => {
            let (_, name) = load_dataset(&cfg.dataset)?;
            output_root().join(name)
        }
    };
    info!("training into {}", dir.display());
    let summary = trainer::train(&cfg, &dir).context("training")?;
    println!("{}", serde_json::to_string_pretty(&summary).expect("plain JSON"));
    let mut m = RunManifest::new(&dir, serde_json::to_value(&cfg).expect("config serializes"));
    m.inputs = std::iter::once(cfg.dataset.clone()).chain(cfg.eval_datasets.clone()).collect();
    m.outputs = vec![dir.join(METRICS_FILE), dir.join("run.json"), dir.join("checkpoints")];
    Ok(m)
}

fn resume(a: ResumeArgs) -> CmdResult {
    require_exists(&a.run)?;
    for p in a.dataset.iter().chain(&a.evals) {
        require_exists(p)?;
    }
    let opts = ResumeOptions {
        extra_steps: a.steps,
        dataset: a.dataset.clone(),
        eval_datasets: (!a.evals.is_empty()).then(|| a.evals.clone()),
        out_dir: a.out.clone(),
        from_step: a.from_step,
    };
    let summary = trainer::resume(&a.run, &opts).context("resuming")?;
    println!("{}", serde_json::to_string_pretty(&summary).expect("plain JSON"));
    let dir = a.out.unwrap_or(a.run.clone());
    let cfg = load_run_config(&dir)?;
    let mut m = RunManifest::new(
        &dir,
        json!({ "source": a.run, "fromStep": a.from_step, "extraSteps": a.steps, "config": cfg }),
    );
    m.inputs = vec![a.run];
    m.outputs = vec![dir.join(METRICS_FILE), dir.join("checkpoints")];
    Ok(m)
}

fn select_steps(sel: &CheckpointSel) -> Result<Vec<u64>, Failure> {
    require_exists(&sel.run)?;
    let all = list_checkpoints(&sel.run).context("listing checkpoints")?;
    match sel.checkpoint.as_str() {
        "all" => Ok(all),
        "last" => all
            .last()
            .map(|&s| vec![s])
            .ok_or_else(|| usage(format!("{} has no checkpoints", sel.run.display()))),
        s => {
            let step: u64 = s
                .parse()
                .map_err(|_| usage(format!("--checkpoint must be a step, `last` or `all`, not {s:?}")))?;
            if !all.contains(&step) {
                return Err(usage(format!("no checkpoint at step {step}")));
            }
            Ok(vec![step])
        }
    }
}

fn load_params(run: &Path, step: u64) -> anyhow::Result<ModelParams> {
    let p = checkpoint_path(run, step);
    Ok(load_checkpoint(&p).with_context(|| format!("loading {}", p.display()))?.params)
}

fn analysis_dataset(run: &Path, explicit: Option<&PathBuf>, limit: usize) -> Result<SortDataset, Failure> {
    let path = match explicit {
        Some(p) => p.clone(),
        None => load_run_config(run).context("reading run.json")?.dataset,
    };
    require_exists(&path)?;
    let (d, _) = load_dataset(&path).with_context(|| format!("loading {}", path.display()))?;
    if d.len() > limit {
        let idx: Vec<usize> = (0..limit).collect();
        return Ok(d.subset(&idx)?);
    }
    Ok(d)
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn analyze_one(
    a: &AnalyzeArgs,
    thresholds: &Thresholds,
    data: Option<&SortDataset>,
    step: u64,
    out_root: &Path,
) -> anyhow::Result<Value> {
    let params = load_params(&a.sel.run, step)?;
    let dir = out_root.join(format!("step_{step}"));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let circuits = CircuitSet::compute(&params, a.tolerance)?;
    write_json(&dir.join("circuits.json"), &circuits.summary())?;
    let values = params.config.vocab_size - 1;
    let partition = ov_partition(&circuits).truncated(values);
    let spec = classify(&params, &circuits, &partition, thresholds)?;
    spec.save(&dir.join("specialization.json"))?;
    let mut report = json!({
        "step": step,
        "circuitRank": circuits.total_rank(),
        "label": spec.label,
    });
    if let Some(d) = data {
        let mode = if a.raw_mean { QkNormalization::RawMean } else { QkNormalization::MeanAbs };
        match model_qk_gradient(&params, &circuits, d, mode) {
            Ok(r) => {
                r.save(&dir.join("regions.json"))?;
                report["regions"] = json!(r.regions.len());
                report["qkGradient"] = json!(r.qk_gradient);
                report["deltaTimesGradient"] = json!(r.delta_times_gradient);
            }
            Err(e) => warn!("step {step}: no region analysis: {e}"),
        }
        let rows = ablation_table(&params, &d.sequences()?)?;
        write_ablation_csv(&rows, &dir.join("ablation.csv"))?;
        report["loss"] = json!(rows[0].loss);
        report["accuracy"] = json!(rows[0].accuracy);
        report["entropy"] = json!(rows[0].entropy);
    }
    Ok(report)
}

fn analyze(a: AnalyzeArgs) -> CmdResult {
    let steps = select_steps(&a.sel)?;
    let thresholds: Thresholds = match &a.thresholds {
        Some(p) => {
            require_exists(p)?;
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => Thresholds::default(),
    };
    if !(a.tolerance > 0.0 && a.tolerance < 1.0) {
        return Err(usage("--tolerance must lie in (0, 1)"));
    }
    let data = if a.circuits_only {
        None
    } else {
        Some(analysis_dataset(&a.sel.run, a.dataset.as_ref(), a.limit)?)
    };
    let out = a.out.clone().unwrap_or_else(|| a.sel.run.join("analysis"));
    let reports: Vec<Value> = steps
        .par_iter()
        .map(|&s| analyze_one(&a, &thresholds, data.as_ref(), s, &out))
        .collect::<anyhow::Result<_>>()?;
    let summary = Value::Array(reports);
    println!("{}", serde_json::to_string_pretty(&summary).expect("plain JSON"));
    let mut m = RunManifest::new(
        &out,
        json!({ "steps": steps, "tolerance": a.tolerance, "rawMean": a.raw_mean,
                "thresholds": thresholds, "limit": a.limit }),
    );
    m.inputs = vec![a.sel.run.clone()];
    m.outputs = steps.iter().map(|s| out.join(format!("step_{s}"))).collect();
    Ok(m)
}

fn llc_cmd(a: LlcArgs) -> CmdResult {
    let steps = select_steps(&a.sel)?;
    let run_cfg = load_run_config(&a.sel.run).context("reading run.json")?;
    let mut cfg = run_cfg.llc.clone().unwrap_or_default();
    macro_rules! set {
        ($flag:expr, $field:expr) => {
            if let Some(v) = $flag {
                $field = v;
            }
        };
    }
    set!(a.epsilon, cfg.epsilon);
    set!(a.gamma, cfg.gamma);
    set!(a.n, cfg.n);
    set!(a.chains, cfg.chains);
    set!(a.draws, cfg.draws);
    set!(a.seed, cfg.seed);
    if a.burn_in.is_some() {
        cfg.burn_in = a.burn_in;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let data = analysis_dataset(&a.sel.run, a.dataset.as_ref(), usize::MAX)?;
    let seqs = data.sequences()?;
    let scan = !(a.scan_epsilon.is_empty() && a.scan_gamma.is_empty() && a.scan_draws.is_empty());
    let grid: Vec<(f64, f64, usize)> = if scan {
        let or = |v: &Vec<f64>, d: f64| if v.is_empty() { vec![d] } else { v.clone() };
        let draws = if a.scan_draws.is_empty() { vec![cfg.draws] } else { a.scan_draws.clone() };
        let mut g = Vec::new();
        for &e in &or(&a.scan_epsilon, cfg.epsilon) {
            for &y in &or(&a.scan_gamma, cfg.gamma) {
                for &d in &draws {
                    g.push((e, y, d));
                }
            }
        }
        g
    } else {
        vec![(cfg.epsilon, cfg.gamma, cfg.draws)]
    };
    let mut rows = Vec::new();
    let mut report = Vec::new();
    for &step in &steps {
        let params = load_params(&a.sel.run, step)?;
        let target = ModelTarget::new(&params, &seqs)?;
        let w = params.to_flat();
        if scan {
            for p in llc_scan(&target, &w, &cfg, &grid)? {
                let c = SgldConfig { epsilon: p.epsilon, gamma: p.gamma, draws: p.draws, ..cfg.clone() };
                rows.push(LlcRow::new(step, &c, p.estimate.as_ref()));
                report.push(json!({ "step": step, "point": p }));
            }
        } else {
            let e = llc::estimate(&target, &w, &cfg);
            match &e {
                Ok(e) => info!("step {step}: LLC {:.3} ± {:.3}", e.value, e.stderr),
                Err(err) => warn!("step {step}: {err}"),
            }
            rows.push(LlcRow::new(step, &cfg, e.as_ref().ok()));
            report.push(json!({ "step": step, "estimate": e.ok() }));
        }
    }
    let out = a.out.clone().unwrap_or_else(|| a.sel.run.join("llc.csv"));
    write_llc_csv(&out, &rows)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("plain JSON"));
    let dir = out.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf);
    let mut m = RunManifest::new(&dir, json!({ "sgld": cfg, "grid": grid, "steps": steps }));
    m.inputs = vec![a.sel.run.clone()];
    m.outputs = vec![out];
    Ok(m)
}

fn export(a: ExportArgs) -> CmdResult {
    let steps = select_steps(&a.sel)?;
    let mut outputs = Vec::new();
    for &step in &steps {
        let params = load_params(&a.sel.run, step)?;
        let c = CircuitSet::compute(&params, DEFAULT_RANK_TOLERANCE)?;
        let dir = a.out.join(format!("step_{step}"));
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        for (h, hc) in c.heads.iter().enumerate() {
            export_heatmap(&hc.ov, &dir.join(format!("ov_head{h}.csv")))?;
            export_heatmap(&hc.qk, &dir.join(format!("qk_head{h}.csv")))?;
        }
        outputs.push(dir);
    }
    let metrics = a.sel.run.join(METRICS_FILE);
    if metrics.exists() {
        let dst = a.out.join(METRICS_FILE);
        std::fs::copy(&metrics, &dst).with_context(|| format!("copying {}", metrics.display()))?;
        outputs.push(dst);
    }
    let mut m = RunManifest::new(&a.out, json!({ "steps": steps }));
    m.inputs = vec![a.sel.run.clone()];
    m.outputs = outputs;
    Ok(m)
}

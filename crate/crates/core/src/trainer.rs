//! Training loop, evaluation and the run directory.
//!
//! A run directory holds `run.json` (the resolved [`TrainConfig`]),
//! `metrics.csv` and `checkpoints/step_<n>/`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::circuits::{circuit_rank, DEFAULT_RANK_TOLERANCE};
use crate::datagen::{load_dataset, SortDataset, TokenSequence};
use crate::llc::{self, ModelTarget, SgldConfig};
use crate::model::{
    init_model, load_checkpoint, save_checkpoint, BatchForward, Checkpoint, HeadOverride,
    ModelConfig, ModelParams,
};
use crate::numkernel::{adamw_step, AdamWConfig, OptimizerState, RandomSource};
use crate::{Error, Result};

pub const RUN_FILE: &str = "run.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
/// Sequences per forward pass during evaluation.
const EVAL_CHUNK: usize = 512;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub dataset: PathBuf,
    /// Held-out datasets; the first one also provides the accuracy column.
    pub eval_datasets: Vec<PathBuf>,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub total_steps: u64,
    /// Explicit checkpoint steps; empty means `num_checkpoints` log-spaced
    /// steps.
    pub checkpoint_steps: Vec<u64>,
    pub num_checkpoints: usize,
    /// Extra metrics rows every this many steps (0: checkpoints only).
    pub eval_interval: u64,
    /// Evaluate only the first this many lists of each dataset.
    pub eval_limit: Option<usize>,
    pub rank_tolerance: f64,
    /// When set, the LLC is estimated at every checkpoint.
    pub llc: Option<SgldConfig>,
    /// Seed of the batch-sampling stream.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            dataset: PathBuf::new(),
            eval_datasets: Vec::new(),
            batch_size: 512,
            optimizer: AdamWConfig::default(),
            total_steps: 150_000,
            checkpoint_steps: Vec::new(),
            num_checkpoints: 60,
            eval_interval: 0,
            eval_limit: None,
            rank_tolerance: DEFAULT_RANK_TOLERANCE,
            llc: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !self.checkpoint_steps.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::invalid("checkpoint steps must be strictly increasing"));
        }
        if let Some(c) = &self.llc {
            c.validate()?;
        }
        Ok(())
    }

    /// Checkpoint steps in `[0, total_steps]`; always contains both ends.
    pub fn schedule(&self) -> Vec<u64> {
        let mut s: Vec<u64> = if self.checkpoint_steps.is_empty() {
            log_spaced_steps(self.total_steps, self.num_checkpoints)
        } else {
            self.checkpoint_steps
                .iter()
                .copied()
                .filter(|&x| x <= self.total_steps)
                .collect()
        };
        s.push(0);
        s.push(self.total_steps);
        s.sort_unstable();
        s.dedup();
        s
    }
}

/// About `count` steps spaced evenly in `log(1 + step)` from 0 to `total`,
/// deduplicated.
pub fn log_spaced_steps(total: u64, count: usize) -> Vec<u64> {
    if total == 0 || count < 2 {
        return vec![0, total];
    }
    let top = ((total + 1) as f64).ln();
    let mut v: Vec<u64> = (0..count)
        .map(|i| ((top * i as f64 / (count - 1) as f64).exp() - 1.0).round() as u64)
        .map(|s| s.min(total))
        .collect();
    v.push(total);
    v.sort_unstable();
    v.dedup();
    v
}

/// Loss, position accuracy and mean predictive entropy over a set of
/// sequences.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub entropy: f64,
    /// Number of prediction positions evaluated.
    pub positions: usize,
}

pub fn evaluate_sequences(
    params: &ModelParams,
    seqs: &[TokenSequence],
    overrides: &[HeadOverride],
) -> Result<Evaluation> {
    if seqs.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let mut loss = 0.0;
    let mut entropy = 0.0;
    let mut correct = 0;
    let mut positions = 0;
    for chunk in seqs.chunks(EVAL_CHUNK) {
        let refs: Vec<&TokenSequence> = chunk.iter().collect();
        let fwd = BatchForward::new(params, &refs, overrides)?;
        loss += fwd.position_losses().iter().sum::<f64>();
        entropy += fwd.entropies().iter().sum::<f64>();
        correct += fwd.correct_count();
        positions += fwd.targets().len();
    }
    let n = positions as f64;
    Ok(Evaluation {
        loss: loss / n,
        accuracy: correct as f64 / n,
        entropy: entropy / n,
        positions,
    })
}

/// Full-dataset mean masked loss and position accuracy.
pub fn evaluate(params: &ModelParams, dataset: &SortDataset) -> Result<Evaluation> {
    evaluate_sequences(params, &dataset.sequences()?, &[])
}

/// One row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub train_loss: f64,
    pub eval_losses: Vec<f64>,
    pub accuracy: f64,
    pub circuit_rank: usize,
    pub llc: Option<f64>,
}

pub fn metrics_header(eval_names: &[String]) -> Vec<String> {
    let mut h = vec!["step".to_string(), "train_loss".to_string()];
    h.extend(eval_names.iter().map(|n| format!("eval_loss_{n}")));
    h.extend(["accuracy", "circuit_rank", "llc"].map(String::from));
    h
}

fn metrics_record(row: &MetricsRow) -> Vec<String> {
    let mut r = vec![row.step.to_string(), row.train_loss.to_string()];
    r.extend(row.eval_losses.iter().map(|x| x.to_string()));
    r.push(row.accuracy.to_string());
    r.push(row.circuit_rank.to_string());
    r.push(row.llc.map(|x| x.to_string()).unwrap_or_default());
    r
}

/// Parses `metrics.csv`; returns the eval dataset names and the rows.
pub fn read_metrics(path: &Path) -> Result<(Vec<String>, Vec<MetricsRow>)> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
    let names: Vec<String> = header
        .iter()
        .filter_map(|h| h.strip_prefix("eval_loss_").map(String::from))
        .collect();
    let k = names.len();
    if header.len() != k + 5 {
        return Err(Error::invalid(format!("{}: unexpected header", path.display())));
    }
    let num = |s: &str| -> Result<f64> {
        s.parse()
            .map_err(|_| Error::invalid(format!("{}: bad number {s:?}", path.display())))
    };
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let llc = &rec[k + 4];
        rows.push(MetricsRow {
            step: rec[0]
                .parse()
                .map_err(|_| Error::invalid(format!("{}: bad step", path.display())))?,
            train_loss: num(&rec[1])?,
            eval_losses: (0..k).map(|i| num(&rec[2 + i])).collect::<Result<_>>()?,
            accuracy: num(&rec[k + 2])?,
            circuit_rank: rec[k + 3]
                .parse()
                .map_err(|_| Error::invalid(format!("{}: bad rank", path.display())))?,
            llc: if llc.is_empty() { None } else { Some(num(llc)?) },
        });
    }
    Ok((names, rows))
}

pub fn checkpoint_path(run_dir: &Path, step: u64) -> PathBuf {
    run_dir.join(CHECKPOINT_DIR).join(format!("step_{step}"))
}

/// Steps of all checkpoints in a run, ascending.
pub fn list_checkpoints(run_dir: &Path) -> Result<Vec<u64>> {
    let dir = run_dir.join(CHECKPOINT_DIR);
    let mut steps = Vec::new();
    for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let entry = entry.map_err(|e| Error::io(&dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(s) = name.strip_prefix("step_").and_then(|s| s.parse().ok()) {
            steps.push(s);
        }
    }
    steps.sort_unstable();
    Ok(steps)
}

pub fn load_run_config(run_dir: &Path) -> Result<TrainConfig> {
    let path = run_dir.join(RUN_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub final_step: u64,
    pub train_loss: f64,
    pub eval_losses: Vec<(String, f64)>,
    pub accuracy: f64,
    pub circuit_rank: usize,
}

struct Data {
    train: Vec<TokenSequence>,
    train_eval: Vec<TokenSequence>,
    evals: Vec<(String, Vec<TokenSequence>)>,
}

fn limited(d: &SortDataset, limit: Option<usize>) -> Result<Vec<TokenSequence>> {
    let n = limit.unwrap_or(usize::MAX).min(d.len());
    (0..n).map(|i| d.sequence(i)).collect()
}

fn load_data(cfg: &TrainConfig) -> Result<Data> {
    let (train, _) = load_dataset(&cfg.dataset)?;
    let m = &cfg.model;
    let check = |d: &SortDataset, path: &Path| -> Result<()> {
        if d.list_length() != m.list_length || d.vocab_size() != m.vocab_size {
            return Err(Error::invalid(format!(
                "{}: lists of length {} over vocabulary {} do not fit the model ({}, {})",
                path.display(),
                d.list_length(),
                d.vocab_size(),
                m.list_length,
                m.vocab_size
            )));
        }
        Ok(())
    };
    check(&train, &cfg.dataset)?;
    if train.len() < cfg.batch_size {
        return Err(Error::invalid(format!(
            "dataset has {} lists, fewer than the batch size {}",
            train.len(),
            cfg.batch_size
        )));
    }
    let mut evals = Vec::new();
    for p in &cfg.eval_datasets {
        let (d, name) = load_dataset(p)?;
        check(&d, p)?;
        if evals.iter().any(|(n, _)| n == &name) {
            return Err(Error::invalid(format!("two eval datasets are named {name}")));
        }
        evals.push((name, limited(&d, cfg.eval_limit)?));
    }
    Ok(Data {
        train_eval: limited(&train, cfg.eval_limit)?,
        train: train.sequences()?,
        evals,
    })
}

struct Run<'a> {
    cfg: &'a TrainConfig,
    dir: &'a Path,
    data: Data,
    metrics: csv::Writer<fs::File>,
}

impl Run<'_> {
    fn row(&mut self, step: u64, params: &ModelParams, with_llc: bool) -> Result<MetricsRow> {
        let train = evaluate_sequences(params, &self.data.train_eval, &[])?;
        let mut eval_losses = Vec::new();
        let mut accuracy = train.accuracy;
        for (i, (_, seqs)) in self.data.evals.iter().enumerate() {
            let e = evaluate_sequences(params, seqs, &[])?;
            if i == 0 {
                accuracy = e.accuracy;
            }
            eval_losses.push(e.loss);
        }
        let llc = match (&self.cfg.llc, with_llc) {
            (Some(c), true) => {
                let target = ModelTarget::new(params, &self.data.train)?;
                match llc::estimate(&target, &params.to_flat(), c) {
                    Ok(e) => Some(e.value),
                    Err(e) => {
                        warn!("LLC at step {step}: {e}");
                        None
                    }
                }
            }
            _ => None,
        };
        let row = MetricsRow {
            step,
            train_loss: train.loss,
            eval_losses,
            accuracy,
            circuit_rank: circuit_rank(params, self.cfg.rank_tolerance)?,
            llc,
        };
        self.metrics.write_record(metrics_record(&row))?;
        self.metrics
            .flush()
            .map_err(|e| Error::io(self.dir.join(METRICS_FILE), e))?;
        info!(
            "step {step}: train {:.5} acc {:.4} rank {}",
            row.train_loss, row.accuracy, row.circuit_rank
        );
        Ok(row)
    }

    /// Trains from `state` up to `cfg.total_steps`, writing checkpoints and
    /// metrics rows at scheduled steps after `state.step` (and at
    /// `state.step` itself when `first_row`).
    fn run(&mut self, mut state: Checkpoint, first_row: bool) -> Result<(Checkpoint, MetricsRow)> {
        let schedule = self.cfg.schedule();
        let total = self.cfg.total_steps;
        let mut last_row = None;
        if first_row {
            save_checkpoint(&state, &checkpoint_path(self.dir, state.step))?;
            last_row = Some(self.row(state.step, &state.params, true)?);
        }
        let mut opt = state
            .optimizer
            .take()
            .expect("training state carries an optimizer");
        let mut rng = state.rng.take().expect("training state carries an RNG");
        let mut params = state.params;
        let mut step = state.step;
        let n = self.data.train.len();
        while step < total {
            let batch: Vec<&TokenSequence> = (0..self.cfg.batch_size)
                .map(|_| &self.data.train[rng.below_usize(n)])
                .collect();
            let fwd = BatchForward::new(&params, &batch, &[])?;
            let loss = fwd.loss();
            let grads = if loss.is_finite() { Some(fwd.backward()?) } else { None };
            drop(fwd);
            let stepped = grads.and_then(|g| {
                let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
                let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
                let grad_refs: Vec<&_> = g.tensors().into_iter().map(|(_, m)| m).collect();
                let mut p = params.tensors_mut();
                adamw_step(&mut opt, &mut p, &grad_refs, &name_refs).ok()
            });
            if stepped.is_none() || !params.is_finite() {
                let ck = Checkpoint {
                    step,
                    params,
                    optimizer: Some(opt),
                    rng: Some(rng),
                };
                save_checkpoint(&ck, &checkpoint_path(self.dir, step))?;
                return Err(Error::Diverged {
                    step: step + 1,
                    loss,
                });
            }
            step += 1;
            let scheduled = schedule.binary_search(&step).is_ok();
            let interval = self.cfg.eval_interval > 0 && step % self.cfg.eval_interval == 0;
            if scheduled {
                let ck = Checkpoint {
                    step,
                    params,
                    optimizer: Some(opt),
                    rng: Some(rng),
                };
                save_checkpoint(&ck, &checkpoint_path(self.dir, step))?;
                params = ck.params;
                opt = ck.optimizer.expect("just stored");
                rng = ck.rng.expect("just stored");
            }
            if scheduled || interval {
                last_row = Some(self.row(step, &params, scheduled)?);
            }
        }
        let row = match last_row {
            Some(r) => r,
            None => self.row(step, &params, false)?,
        };
        Ok((
            Checkpoint {
                step,
                params,
                optimizer: Some(opt),
                rng: Some(rng),
            },
            row,
        ))
    }
}

fn summary(row: &MetricsRow, names: &[String]) -> TrainSummary {
    TrainSummary {
        final_step: row.step,
        train_loss: row.train_loss,
        eval_losses: names.iter().cloned().zip(row.eval_losses.iter().copied()).collect(),
        accuracy: row.accuracy,
        circuit_rank: row.circuit_rank,
    }
}

fn write_run_file(dir: &Path, cfg: &TrainConfig) -> Result<()> {
    let path = dir.join(RUN_FILE);
    let json = serde_json::to_string_pretty(cfg)?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

fn open_metrics(dir: &Path, names: &[String], append: bool) -> Result<csv::Writer<fs::File>> {
    let path = dir.join(METRICS_FILE);
    if append {
        let (existing, _) = read_metrics(&path)?;
        if existing != names {
            return Err(Error::invalid(format!(
                "{}: eval columns {:?} differ from {:?}",
                path.display(),
                existing,
                names
            )));
        }
        let f = fs::OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        return Ok(csv::WriterBuilder::new().has_headers(false).from_writer(f));
    }
    let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = csv::Writer::from_writer(f);
    w.write_record(metrics_header(names))?;
    Ok(w)
}

/// Trains from scratch into `run_dir` (created if needed; previous metrics
/// and checkpoints are replaced).
pub fn train(cfg: &TrainConfig, run_dir: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    let ckdir = run_dir.join(CHECKPOINT_DIR);
    if ckdir.exists() {
        fs::remove_dir_all(&ckdir).map_err(|e| Error::io(&ckdir, e))?;
    }
    fs::create_dir_all(&ckdir).map_err(|e| Error::io(&ckdir, e))?;
    write_run_file(run_dir, cfg)?;
    let names: Vec<String> = data.evals.iter().map(|(n, _)| n.clone()).collect();
    let params = init_model(&cfg.model)?;
    let opt = OptimizerState::new(cfg.optimizer, params.tensors().iter().map(|(_, m)| m.shape()));
    let state = Checkpoint {
        step: 0,
        params,
        optimizer: Some(opt),
        rng: Some(RandomSource::new(cfg.seed)),
    };
    let mut run = Run {
        cfg,
        dir: run_dir,
        metrics: open_metrics(run_dir, &names, false)?,
        data,
    };
    let (_, row) = run.run(state, true)?;
    Ok(summary(&row, &names))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ResumeOptions {
    pub extra_steps: u64,
    /// Continue on a different training set.
    pub dataset: Option<PathBuf>,
    /// Replace the eval datasets.
    pub eval_datasets: Option<Vec<PathBuf>>,
    /// Write into a new run directory instead of extending the source run.
    pub out_dir: Option<PathBuf>,
    /// Resume from this checkpoint instead of the latest one.
    pub from_step: Option<u64>,
}

/// Continues a run from its latest (or a chosen) checkpoint.
///
/// The new run's checkpoint schedule is the log-spaced schedule of the new
/// total, restricted to steps after the starting point.
pub fn resume(run_dir: &Path, opts: &ResumeOptions) -> Result<TrainSummary> {
    let mut cfg = load_run_config(run_dir)?;
    let start = match opts.from_step {
        Some(s) => s,
        None => *list_checkpoints(run_dir)?
            .last()
            .ok_or_else(|| Error::invalid(format!("{} has no checkpoints", run_dir.display())))?,
    };
    let src = checkpoint_path(run_dir, start);
    let mut state = load_checkpoint(&src)?;
    if state.optimizer.is_none() || state.rng.is_none() {
        return Err(Error::Checkpoint {
            path: src,
            reason: "no optimizer or RNG state to resume from".into(),
        });
    }
    if state.params.config != cfg.model {
        return Err(Error::Checkpoint {
            path: src,
            reason: "model config differs from run.json".into(),
        });
    }
    if let Some(d) = &opts.dataset {
        cfg.dataset = d.clone();
    }
    if let Some(e) = &opts.eval_datasets {
        cfg.eval_datasets = e.clone();
    }
    cfg.total_steps = start + opts.extra_steps;
    if !cfg.checkpoint_steps.is_empty() {
        cfg.checkpoint_steps.retain(|&s| s > start);
        // An emptied explicit list would otherwise fall back to log spacing.
        if cfg.checkpoint_steps.is_empty() {
            cfg.checkpoint_steps.push(cfg.total_steps);
        }
    }
    let data = load_data(&cfg)?;
    let names: Vec<String> = data.evals.iter().map(|(n, _)| n.clone()).collect();

    let (dir, fresh) = match &opts.out_dir {
        Some(d) => (d.as_path(), true),
        None => (run_dir, false),
    };
    if fresh {
        let ckdir = dir.join(CHECKPOINT_DIR);
        if ckdir.exists() {
            fs::remove_dir_all(&ckdir).map_err(|e| Error::io(&ckdir, e))?;
        }
        fs::create_dir_all(&ckdir).map_err(|e| Error::io(&ckdir, e))?;
    } else {
        // Drop checkpoints past the starting point; they are about to be
        // regenerated.
        for s in list_checkpoints(dir)?.into_iter().filter(|&s| s > start) {
            let p = checkpoint_path(dir, s);
            fs::remove_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        truncate_metrics(&dir.join(METRICS_FILE), start)?;
    }
    write_run_file(dir, &cfg)?;
    let mut run = Run {
        cfg: &cfg,
        dir,
        metrics: open_metrics(dir, &names, !fresh)?,
        data,
    };
    state.step = start;
    let (_, row) = run.run(state, fresh)?;
    Ok(summary(&row, &names))
}

fn truncate_metrics(path: &Path, last_step: u64) -> Result<()> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut keep = String::new();
    for (i, line) in text.lines().enumerate() {
        let step: Option<u64> = line.split(',').next().and_then(|s| s.parse().ok());
        if i == 0 || step.is_some_and(|s| s <= last_step) {
            keep.push_str(line);
            keep.push('\n');
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(keep.as_bytes()).map_err(|e| Error::io(path, e))
}

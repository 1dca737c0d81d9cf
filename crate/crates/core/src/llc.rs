//! Local learning coefficient via SGLD on a localized, tempered posterior.
//!
//! Each chain starts at `w*` and runs
//! `w ← w − (ε/2)(nβ ∇ℓ̂(w) + γ (w − w*)) + N(0, ε)` with `nβ = n / ln n`.
//! After `burn_in` draws, the losses on a per-chain fixed evaluation batch
//! are averaged; the chain's estimate is `nβ (mean − ℓ(w*))`.

use std::collections::BTreeSet;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::TokenSequence;
use crate::model::{BatchForward, ModelParams};
use crate::numkernel::RandomSource;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SgldConfig {
    pub epsilon: f64,
    pub gamma: f64,
    /// Minibatch and evaluation batch size; sets `nβ = n / ln n`.
    pub n: usize,
    pub chains: usize,
    /// Recorded draws per chain after burn-in.
    pub draws: usize,
    /// Discarded draws at the start of each chain; `None` means `draws`.
    pub burn_in: Option<usize>,
    pub seed: u64,
}

impl Default for SgldConfig {
    fn default() -> Self {
        Self {
            epsilon: 3e-5,
            gamma: 56.0,
            n: 512,
            chains: 4,
            draws: 200,
            burn_in: None,
            seed: 0,
        }
    }
}

impl SgldConfig {
    pub fn nbeta(&self) -> f64 {
        let n = self.n as f64;
        n / n.ln()
    }

    pub fn burn_in(&self) -> usize {
        self.burn_in.unwrap_or(self.draws)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid(format!("SGLD step size {} must be positive", self.epsilon)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid(format!("localization {} must be ≥ 0", self.gamma)));
        }
        if self.n < 2 || self.chains == 0 || self.draws == 0 {
            return Err(Error::invalid("SGLD needs n ≥ 2, chains > 0 and draws > 0"));
        }
        Ok(())
    }

    fn chain_seed(&self, chain: usize) -> u64 {
        RandomSource::new(self.seed).fork(chain as u64).seed()
    }
}

/// A loss surface SGLD can sample from.
pub trait SgldTarget: Sync {
    /// Fixed evaluation data of one chain.
    type Eval: Send;

    fn dim(&self) -> usize;

    fn eval_set(&self, n: usize, rng: &mut RandomSource) -> Self::Eval;

    fn eval_loss(&self, w: &[f64], set: &Self::Eval) -> Result<f64>;

    /// Gradient of the loss on a fresh minibatch of size `n`.
    fn minibatch_grad(&self, w: &[f64], n: usize, rng: &mut RandomSource) -> Result<Vec<f64>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgldTrace {
    pub chain: usize,
    pub seed: u64,
    /// `ℓ_n(w*)` on this chain's evaluation batch.
    pub init_loss: f64,
    /// Evaluation loss after every draw, burn-in included.
    pub losses: Vec<f64>,
    pub burn_in: usize,
    pub diverged: bool,
}

impl SgldTrace {
    pub fn post_burn_in(&self) -> &[f64] {
        &self.losses[self.burn_in.min(self.losses.len())..]
    }

    pub fn mean_loss(&self) -> f64 {
        let p = self.post_burn_in();
        p.iter().sum::<f64>() / p.len() as f64
    }

    /// Naive standard error of [`SgldTrace::mean_loss`] (ignores
    /// autocorrelation).
    pub fn mean_loss_stderr(&self) -> f64 {
        let p = self.post_burn_in();
        if p.len() < 2 {
            return 0.0;
        }
        let m = self.mean_loss();
        let var = p.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (p.len() - 1) as f64;
        (var / p.len() as f64).sqrt()
    }
}

/// One chain from `w_star`.
pub fn sgld_chain<T: SgldTarget>(
    target: &T,
    w_star: &[f64],
    cfg: &SgldConfig,
    chain: usize,
    chain_seed: u64,
) -> Result<SgldTrace> {
    cfg.validate()?;
    if w_star.len() != target.dim() {
        return Err(Error::invalid(format!(
            "w* has {} entries, target has {}",
            w_star.len(),
            target.dim()
        )));
    }
    let root = RandomSource::new(chain_seed);
    let mut data_rng = root.fork(1);
    let mut noise_rng = root.fork(2);
    let eval = target.eval_set(cfg.n, &mut data_rng);
    let init_loss = target.eval_loss(w_star, &eval)?;
    let nbeta = cfg.nbeta();
    let half = cfg.epsilon / 2.0;
    let noise = cfg.epsilon.sqrt();
    let total = cfg.burn_in() + cfg.draws;
    let mut w = w_star.to_vec();
    let mut losses = Vec::with_capacity(total);
    let mut diverged = false;
    for _ in 0..total {
        let g = target.minibatch_grad(&w, cfg.n, &mut data_rng)?;
        for ((wi, &gi), &si) in w.iter_mut().zip(&g).zip(w_star) {
            let drift = nbeta * gi + cfg.gamma * (*wi - si);
            *wi += -half * drift + noise * noise_rng.normal();
        }
        let loss = target.eval_loss(&w, &eval)?;
        if !loss.is_finite() {
            diverged = true;
            break;
        }
        losses.push(loss);
    }
    Ok(SgldTrace {
        chain,
        seed: chain_seed,
        init_loss,
        losses,
        burn_in: cfg.burn_in(),
        diverged,
    })
}

/// All chains of `cfg`, in parallel.
pub fn run_chains<T: SgldTarget>(
    target: &T,
    w_star: &[f64],
    cfg: &SgldConfig,
) -> Result<Vec<SgldTrace>> {
    cfg.validate()?;
    (0..cfg.chains)
        .into_par_iter()
        .map(|c| sgld_chain(target, w_star, cfg, c, cfg.chain_seed(c)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LlcEstimate {
    pub value: f64,
    /// Standard error of the mean over chains.
    pub stderr: f64,
    pub per_chain: Vec<f64>,
    pub diverged_chains: usize,
    pub nbeta: f64,
}

impl LlcEstimate {
    /// (max − min) / |mean| over chain estimates.
    pub fn relative_spread(&self) -> f64 {
        let lo = self.per_chain.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.per_chain.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (hi - lo) / self.value.abs()
    }
}

/// `nβ (mean post-burn-in loss − ℓ(w*))` per chain, averaged over the chains
/// that did not diverge.
pub fn estimate_llc(traces: &[SgldTrace], nbeta: f64) -> Result<LlcEstimate> {
    let per_chain: Vec<f64> = traces
        .iter()
        .filter(|t| !t.diverged && !t.post_burn_in().is_empty())
        .map(|t| nbeta * (t.mean_loss() - t.init_loss))
        .collect();
    if per_chain.is_empty() {
        return Err(Error::AllChainsDiverged);
    }
    let k = per_chain.len() as f64;
    let value = per_chain.iter().sum::<f64>() / k;
    let stderr = if per_chain.len() > 1 {
        let var = per_chain.iter().map(|x| (x - value) * (x - value)).sum::<f64>() / (k - 1.0);
        (var / k).sqrt()
    } else {
        0.0
    };
    Ok(LlcEstimate {
        value,
        stderr,
        diverged_chains: traces.len() - per_chain.len(),
        per_chain,
        nbeta,
    })
}

pub fn estimate<T: SgldTarget>(target: &T, w_star: &[f64], cfg: &SgldConfig) -> Result<LlcEstimate> {
    estimate_llc(&run_chains(target, w_star, cfg)?, cfg.nbeta())
}

/// Estimate at one `(ε, γ, draws)` grid point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ScanPoint {
    pub epsilon: f64,
    pub gamma: f64,
    pub draws: usize,
    pub estimate: Option<LlcEstimate>,
    pub error: Option<String>,
    /// A grid neighbour agrees within [`PLATEAU_TOLERANCE`].
    pub plateau: bool,
}

pub const PLATEAU_TOLERANCE: f64 = 0.15;

/// Runs `base` at every `(ε, γ, draws)` in `grid` and flags plateaus.
///
/// Two points are neighbours when they differ in exactly one coordinate and
/// are adjacent among that coordinate's distinct grid values.
pub fn llc_scan<T: SgldTarget>(
    target: &T,
    w_star: &[f64],
    base: &SgldConfig,
    grid: &[(f64, f64, usize)],
) -> Result<Vec<ScanPoint>> {
    if grid.is_empty() {
        return Err(Error::Empty("LLC scan grid"));
    }
    let mut points: Vec<ScanPoint> = grid
        .iter()
        .map(|&(epsilon, gamma, draws)| {
            let cfg = SgldConfig {
                epsilon,
                gamma,
                draws,
                ..base.clone()
            };
            let (estimate, error) = match estimate(target, w_star, &cfg) {
                Ok(e) => (Some(e), None),
                Err(e) => (None, Some(e.to_string())),
            };
            ScanPoint {
                epsilon,
                gamma,
                draws,
                estimate,
                error,
                plateau: false,
            }
        })
        .collect();

    let key = |x: f64| x.to_bits();
    let eps: Vec<u64> = distinct(grid.iter().map(|g| key(g.0)));
    let gam: Vec<u64> = distinct(grid.iter().map(|g| key(g.1)));
    let drw: Vec<u64> = distinct(grid.iter().map(|g| g.2 as u64));
    let coords = |p: &ScanPoint| {
        [
            rank_in(&eps, key(p.epsilon)),
            rank_in(&gam, key(p.gamma)),
            rank_in(&drw, p.draws as u64),
        ]
    };
    let flags: Vec<bool> = points
        .iter()
        .map(|p| {
            let (Some(a), c) = (&p.estimate, coords(p)) else { return false };
            points.iter().any(|q| {
                let Some(b) = &q.estimate else { return false };
                let d = coords(q);
                let diffs: Vec<usize> = (0..3).filter(|&i| c[i] != d[i]).collect();
                diffs.len() == 1
                    && c[diffs[0]].abs_diff(d[diffs[0]]) == 1
                    && (a.value - b.value).abs() <= PLATEAU_TOLERANCE * a.value.abs().max(b.value.abs())
            })
        })
        .collect();
    for (p, f) in points.iter_mut().zip(flags) {
        p.plateau = f;
    }
    Ok(points)
}

/// Sorted distinct values; for floats the bit patterns of non-negative
/// numbers sort like the numbers themselves.
fn distinct(it: impl Iterator<Item = u64>) -> Vec<u64> {
    it.collect::<BTreeSet<_>>().into_iter().collect()
}

fn rank_in(sorted: &[u64], x: u64) -> usize {
    sorted.binary_search(&x).expect("value taken from the grid")
}

/// `½ |w|²` in `dim` dimensions, without minibatch noise. Its learning
/// coefficient is `dim / 2`.
pub struct Quadratic {
    pub dim: usize,
}

impl SgldTarget for Quadratic {
    type Eval = ();

    fn dim(&self) -> usize {
        self.dim
    }

    fn eval_set(&self, _n: usize, _rng: &mut RandomSource) {}

    fn eval_loss(&self, w: &[f64], _set: &()) -> Result<f64> {
        Ok(0.5 * w.iter().map(|x| x * x).sum::<f64>())
    }

    fn minibatch_grad(&self, w: &[f64], _n: usize, _rng: &mut RandomSource) -> Result<Vec<f64>> {
        Ok(w.to_vec())
    }
}

/// Masked cross-entropy of the transformer over a training set; minibatches
/// and evaluation batches are drawn with replacement.
pub struct ModelTarget<'a> {
    template: ModelParams,
    seqs: &'a [TokenSequence],
}

impl<'a> ModelTarget<'a> {
    pub fn new(template: &ModelParams, seqs: &'a [TokenSequence]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Empty("SGLD training set"));
        }
        Ok(Self {
            template: template.clone(),
            seqs,
        })
    }

    fn params(&self, w: &[f64]) -> Result<ModelParams> {
        let mut p = self.template.clone();
        p.set_flat(w)?;
        Ok(p)
    }

    fn batch(&self, n: usize, rng: &mut RandomSource) -> Vec<&'a TokenSequence> {
        (0..n).map(|_| &self.seqs[rng.below_usize(self.seqs.len())]).collect()
    }
}

impl<'a> SgldTarget for ModelTarget<'a> {
    type Eval = Vec<&'a TokenSequence>;

    fn dim(&self) -> usize {
        self.template.parameter_count()
    }

    fn eval_set(&self, n: usize, rng: &mut RandomSource) -> Self::Eval {
        self.batch(n, rng)
    }

    fn eval_loss(&self, w: &[f64], set: &Self::Eval) -> Result<f64> {
        let p = self.params(w)?;
        if !p.is_finite() {
            return Ok(f64::NAN);
        }
        Ok(BatchForward::new(&p, set, &[])?.loss())
    }

    fn minibatch_grad(&self, w: &[f64], n: usize, rng: &mut RandomSource) -> Result<Vec<f64>> {
        let p = self.params(w)?;
        let batch = self.batch(n, rng);
        if !p.is_finite() {
            return Ok(vec![f64::NAN; w.len()]);
        }
        Ok(BatchForward::new(&p, &batch, &[])?.backward()?.to_flat())
    }
}

/// One line of `llc.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LlcRow {
    pub checkpoint_step: u64,
    pub epsilon: f64,
    pub gamma: f64,
    pub nbeta: f64,
    pub chains: usize,
    pub draws: usize,
    pub llc: Option<f64>,
    pub llc_stderr: Option<f64>,
}

impl LlcRow {
    pub fn new(step: u64, cfg: &SgldConfig, estimate: Option<&LlcEstimate>) -> Self {
        Self {
            checkpoint_step: step,
            epsilon: cfg.epsilon,
            gamma: cfg.gamma,
            nbeta: cfg.nbeta(),
            chains: cfg.chains,
            draws: cfg.draws,
            llc: estimate.map(|e| e.value),
            llc_stderr: estimate.map(|e| e.stderr),
        }
    }
}

pub fn write_llc_csv(path: &Path, rows: &[LlcRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_llc_csv(path: &Path) -> Result<Vec<LlcRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad_cfg(seed: u64) -> SgldConfig {
        SgldConfig {
            epsilon: 1e-3,
            gamma: 1.0,
            n: 512,
            chains: 4,
            draws: 2000,
            burn_in: Some(500),
            seed,
        }
    }

    #[test]
    fn nbeta_matches_formula() {
        let c = SgldConfig::default();
        assert!((c.nbeta() - 512.0 / 512f64.ln()).abs() < 1e-12);
        assert!((c.nbeta() - 82.07).abs() < 0.01);
        assert_eq!(c.burn_in(), c.draws);
    }

    #[test]
    fn strong_localization_pins_the_chain() {
        let q = Quadratic { dim: 3 };
        let w = vec![0.3, -0.2, 0.1];
        let cfg = SgldConfig {
            epsilon: 1e-12,
            gamma: 1e11,
            draws: 50,
            chains: 1,
            ..quad_cfg(1)
        };
        let t = &run_chains(&q, &w, &cfg).unwrap()[0];
        for &l in &t.losses {
            assert!((l - t.init_loss).abs() < 1e-5, "{l} vs {}", t.init_loss);
        }
    }

    #[test]
    fn constant_traces_give_zero() {
        let traces: Vec<SgldTrace> = (0..3)
            .map(|c| SgldTrace {
                chain: c,
                seed: c as u64,
                init_loss: 0.7,
                losses: vec![0.7; 20],
                burn_in: 10,
                diverged: false,
            })
            .collect();
        let e = estimate_llc(&traces, 82.0).unwrap();
        assert!(e.value.abs() < 1e-12);
        assert!(e.stderr.abs() < 1e-12);
    }

    #[test]
    fn estimator_is_linear_in_excess_loss() {
        let mk = |excess: f64| SgldTrace {
            chain: 0,
            seed: 0,
            init_loss: 1.0,
            losses: vec![9.0, 9.0, 1.0 + excess, 1.0 + excess],
            burn_in: 2,
            diverged: false,
        };
        let a = estimate_llc(&[mk(0.1)], 10.0).unwrap().value;
        let b = estimate_llc(&[mk(0.3)], 10.0).unwrap().value;
        assert!((a - 1.0).abs() < 1e-12);
        assert!((b - 3.0 * a).abs() < 1e-12);
    }

    #[test]
    fn diverged_chains_are_dropped_and_all_diverged_errors() {
        let good = SgldTrace {
            chain: 0,
            seed: 0,
            init_loss: 0.0,
            losses: vec![0.5; 4],
            burn_in: 2,
            diverged: false,
        };
        let bad = SgldTrace {
            diverged: true,
            chain: 1,
            ..good.clone()
        };
        let e = estimate_llc(&[good, bad.clone()], 2.0).unwrap();
        assert_eq!(e.diverged_chains, 1);
        assert_eq!(e.value, 1.0);
        assert!(matches!(estimate_llc(&[bad], 2.0), Err(Error::AllChainsDiverged)));
    }

    #[test]
    fn quadratic_excess_loss_is_positive() {
        let q = Quadratic { dim: 1 };
        let cfg = SgldConfig {
            chains: 1,
            ..quad_cfg(3)
        };
        let t = &run_chains(&q, &[0.0], &cfg).unwrap()[0];
        assert!(t.mean_loss() > t.init_loss);
    }

    #[test]
    fn quadratic_oracle_small_dim() {
        let q = Quadratic { dim: 8 };
        let e = estimate(&q, &vec![0.0; 8], &quad_cfg(5)).unwrap();
        assert!((e.value / 4.0 - 1.0).abs() < 0.2, "{e:?}");
    }

    #[test]
    fn chains_are_reproducible_and_distinct() {
        let q = Quadratic { dim: 4 };
        let cfg = SgldConfig {
            draws: 50,
            burn_in: Some(10),
            ..quad_cfg(9)
        };
        let a = run_chains(&q, &[0.0; 4], &cfg).unwrap();
        let b = run_chains(&q, &[0.0; 4], &cfg).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0].losses, a[1].losses);
    }

    #[test]
    fn scan_flags_plateaus() {
        let q = Quadratic { dim: 8 };
        let base = quad_cfg(2);
        let grid = [(5e-4, 1.0, 2000), (1e-3, 1.0, 2000), (2e-3, 1.0, 2000)];
        let pts = llc_scan(&q, &[0.0; 8], &base, &grid).unwrap();
        assert_eq!(pts.len(), 3);
        assert!(pts.iter().all(|p| p.plateau), "{pts:?}");
        let one = llc_scan(&q, &[0.0; 8], &base, &grid[..1]).unwrap();
        assert_eq!(one.len(), 1);
        assert!(!one[0].plateau);
        assert!(llc_scan(&q, &[0.0; 8], &base, &[]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("llc.csv");
        let cfg = SgldConfig::default();
        let est = LlcEstimate {
            value: 12.5,
            stderr: 0.25,
            per_chain: vec![12.0, 13.0],
            diverged_chains: 0,
            nbeta: cfg.nbeta(),
        };
        let rows = vec![LlcRow::new(100, &cfg, Some(&est)), LlcRow::new(200, &cfg, None)];
        write_llc_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("checkpoint_step,epsilon,gamma,nbeta,chains,draws,llc,llc_stderr\n"));
        assert_eq!(read_llc_csv(&path).unwrap(), rows);
    }
}

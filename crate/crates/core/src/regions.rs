//! OV vocabulary regions and active QK regions.
//!
//! Every token is owned by the head with the most positive OV diagonal entry
//! (if any head is positive there). Maximal runs of same-owner tokens form
//! the OV partition. An active QK region is the set of cells `(q, k)` with
//! `k > q`, `q` in one run and `k` in another (or the same) run; its head is
//! the owner of the key run.
//!
//! Transitions are consecutive elements `(t[i-1], t[i])` of a target
//! sequence, skipping the first one (`i = 1`), so a list of length `ℓ`
//! contributes `ℓ − 2` transitions.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::circuits::CircuitSet;
use crate::datagen::{delta_stats, SortDataset, TokenSequence};
use crate::model::{BatchForward, ModelParams};
use crate::numkernel::Matrix;
use crate::{Error, Result};

const LOSS_CHUNK: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OvRun {
    pub head: usize,
    /// Inclusive token range.
    pub start: usize,
    pub end: usize,
}

impl OvRun {
    pub fn contains(&self, t: usize) -> bool {
        (self.start..=self.end).contains(&t)
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OvPartition {
    /// Owning head per token, `None` where no head has a positive diagonal.
    pub owner: Vec<Option<usize>>,
    pub runs: Vec<OvRun>,
    /// Run index per token.
    #[serde(skip)]
    run_of: Vec<Option<usize>>,
}

impl OvPartition {
    /// Partition from per-head OV diagonals (all of equal length).
    pub fn from_diagonals(diagonals: &[Vec<f64>]) -> Result<Self> {
        let n = diagonals.first().map_or(0, Vec::len);
        if diagonals.iter().any(|d| d.len() != n) {
            return Err(Error::invalid("OV diagonals differ in length"));
        }
        let owner: Vec<Option<usize>> = (0..n)
            .map(|t| {
                let mut best: Option<(usize, f64)> = None;
                for (h, d) in diagonals.iter().enumerate() {
                    // Strict comparison keeps the lower head on ties.
                    if d[t] > 0.0 && best.is_none_or(|(_, b)| d[t] > b) {
                        best = Some((h, d[t]));
                    }
                }
                best.map(|(h, _)| h)
            })
            .collect();
        Ok(Self::from_owner(owner))
    }

    pub fn from_owner(owner: Vec<Option<usize>>) -> Self {
        let mut runs: Vec<OvRun> = Vec::new();
        let mut run_of = vec![None; owner.len()];
        for (t, o) in owner.iter().enumerate() {
            let Some(h) = *o else { continue };
            match runs.last_mut() {
                Some(r) if r.head == h && r.end + 1 == t => r.end = t,
                _ => runs.push(OvRun { head: h, start: t, end: t }),
            }
            run_of[t] = Some(runs.len() - 1);
        }
        Self { owner, runs, run_of }
    }

    /// Keeps only the first `n` tokens.
    pub fn truncated(&self, n: usize) -> Self {
        Self::from_owner(self.owner.iter().take(n).copied().collect())
    }

    pub fn num_tokens(&self) -> usize {
        self.owner.len()
    }

    pub fn run_of(&self, t: usize) -> Option<usize> {
        self.run_of.get(t).copied().flatten()
    }

    /// Tokens owned by each head.
    pub fn tokens_per_head(&self, num_heads: usize) -> Vec<usize> {
        let mut c = vec![0; num_heads];
        for h in self.owner.iter().flatten() {
            if *h < num_heads {
                c[*h] += 1;
            }
        }
        c
    }
}

/// Partition over every token of the circuits.
pub fn ov_partition(circuits: &CircuitSet) -> OvPartition {
    let diags: Vec<Vec<f64>> = circuits.heads.iter().map(|h| h.ov.diagonal()).collect();
    OvPartition::from_diagonals(&diags).expect("circuits are square and equally sized")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ActiveRegion {
    /// Owner of the key run; its QK circuit holds the region.
    pub head: usize,
    pub input_run: usize,
    pub output_run: usize,
    pub input: OvRun,
    pub output: OvRun,
}

impl ActiveRegion {
    pub fn contains(&self, q: usize, k: usize) -> bool {
        k > q && self.input.contains(q) && self.output.contains(k)
    }

    /// Cells of row `q`, as an inclusive column range (empty if none).
    pub fn row_columns(&self, q: usize) -> Option<(usize, usize)> {
        if !self.input.contains(q) {
            return None;
        }
        let j = self.output.start.max(q + 1);
        (j <= self.output.end).then_some((j, self.output.end))
    }

    pub fn cell_count(&self) -> usize {
        (self.input.start..=self.input.end)
            .filter_map(|q| self.row_columns(q))
            .map(|(j, k)| k - j + 1)
            .sum()
    }
}

/// All non-empty regions, ordered by input run then output run.
pub fn active_regions(partition: &OvPartition) -> Vec<ActiveRegion> {
    let runs = &partition.runs;
    let mut out = Vec::new();
    for (qi, qr) in runs.iter().enumerate() {
        for (ki, kr) in runs.iter().enumerate().skip(qi) {
            // Cells above the diagonal exist iff some key exceeds some query.
            if kr.end > qr.start {
                out.push(ActiveRegion {
                    head: kr.head,
                    input_run: qi,
                    output_run: ki,
                    input: *qr,
                    output: *kr,
                });
            }
        }
    }
    out
}

struct RegionIndex {
    /// `[run × run] → region`.
    table: Vec<Option<usize>>,
    runs: usize,
}

impl RegionIndex {
    fn new(partition: &OvPartition, regions: &[ActiveRegion]) -> Self {
        let runs = partition.runs.len();
        let mut table = vec![None; runs * runs];
        for (i, r) in regions.iter().enumerate() {
            table[r.input_run * runs + r.output_run] = Some(i);
        }
        Self { table, runs }
    }

    /// `Err(())` when a token is unassigned, `Ok(None)` when assigned but
    /// outside every region.
    fn lookup(&self, p: &OvPartition, q: usize, k: usize) -> std::result::Result<Option<usize>, ()> {
        let (Some(a), Some(b)) = (p.run_of(q), p.run_of(k)) else {
            return Err(());
        };
        if k <= q {
            return Ok(None);
        }
        Ok(self.table[a * self.runs + b])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Prevalence {
    pub fractions: Vec<f64>,
    pub counts: Vec<u64>,
    /// Transitions with both tokens assigned; the denominator.
    pub counted: u64,
    /// All transitions, including those touching unassigned tokens.
    pub total: u64,
}

fn transitions(target: &[usize]) -> impl Iterator<Item = (usize, usize)> + '_ {
    (2..target.len()).map(move |i| (target[i - 1], target[i]))
}

/// Fraction of counted transitions falling in each region.
pub fn region_prevalence(
    partition: &OvPartition,
    regions: &[ActiveRegion],
    dataset: &SortDataset,
) -> Result<Prevalence> {
    if dataset.is_empty() {
        return Err(Error::Empty("dataset has no lists"));
    }
    let targets: Vec<Vec<usize>> = (0..dataset.len())
        .map(|i| dataset.target(i).into_iter().map(|x| x as usize).collect())
        .collect();
    prevalence_of(partition, regions, targets.iter().map(Vec::as_slice))
}

/// [`region_prevalence`] over explicit target sequences.
pub fn prevalence_of<'a>(
    partition: &OvPartition,
    regions: &[ActiveRegion],
    targets: impl IntoIterator<Item = &'a [usize]>,
) -> Result<Prevalence> {
    let index = RegionIndex::new(partition, regions);
    let mut counts = vec![0u64; regions.len()];
    let (mut counted, mut total) = (0u64, 0u64);
    for t in targets {
        for (q, k) in transitions(t) {
            total += 1;
            match index.lookup(partition, q, k) {
                Err(()) => {}
                Ok(r) => {
                    counted += 1;
                    if let Some(r) = r {
                        counts[r] += 1;
                    }
                }
            }
        }
    }
    let fractions = counts
        .iter()
        .map(|&c| if counted == 0 { 0.0 } else { c as f64 / counted as f64 })
        .collect();
    Ok(Prevalence {
        fractions,
        counts,
        counted,
        total,
    })
}

/// Mean cross-entropy of the predictions whose ground-truth transition lies
/// in each region; `None` for regions no transition reaches.
pub fn region_mean_loss(
    params: &ModelParams,
    dataset: &SortDataset,
    partition: &OvPartition,
    regions: &[ActiveRegion],
) -> Result<Vec<Option<f64>>> {
    if dataset.is_empty() {
        return Err(Error::Empty("dataset has no lists"));
    }
    region_mean_loss_seqs(params, &dataset.sequences()?, partition, regions)
}

pub fn region_mean_loss_seqs(
    params: &ModelParams,
    seqs: &[TokenSequence],
    partition: &OvPartition,
    regions: &[ActiveRegion],
) -> Result<Vec<Option<f64>>> {
    let index = RegionIndex::new(partition, regions);
    let ell = params.config.list_length;
    let mut sum = vec![0.0; regions.len()];
    let mut n = vec![0u64; regions.len()];
    for chunk in seqs.chunks(LOSS_CHUNK) {
        let refs: Vec<&TokenSequence> = chunk.iter().collect();
        let fwd = BatchForward::new(params, &refs, &[])?;
        let losses = fwd.position_losses();
        let queries = fwd.query_tokens();
        let targets = fwd.targets();
        for b in 0..chunk.len() {
            // Row j predicts target j from target j−1; rows 0 and 1 carry no
            // counted transition.
            for j in 2..ell {
                let r = b * ell + j;
                if let Ok(Some(reg)) = index.lookup(partition, queries[r], targets[r]) {
                    sum[reg] += losses[r];
                    n[reg] += 1;
                }
            }
        }
    }
    Ok(sum
        .iter()
        .zip(&n)
        .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
        .collect())
}

/// Mean over usable rows of `(w[q][j] − w[q][k]) / (k − j)`, where `j` and
/// `k` are the row's first and last cell in the region. Rows with a single
/// cell are skipped.
pub fn region_gradient(qk: &Matrix, region: &ActiveRegion) -> Result<f64> {
    if region.output.end >= qk.cols() || region.input.end >= qk.rows() {
        return Err(Error::invalid("region lies outside the QK circuit"));
    }
    let mut sum = 0.0;
    let mut rows = 0usize;
    for q in region.input.start..=region.input.end {
        if let Some((j, k)) = region.row_columns(q) {
            if k > j {
                sum += (qk[(q, j)] - qk[(q, k)]) / (k - j) as f64;
                rows += 1;
            }
        }
    }
    if rows == 0 {
        return Err(Error::invalid("region has no row with two or more cells"));
    }
    Ok(sum / rows as f64)
}

/// How QK entries are averaged for the model-level normalization.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum QkNormalization {
    #[default]
    MeanAbs,
    RawMean,
}

pub fn qk_normalization(circuits: &CircuitSet, mode: QkNormalization) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for h in &circuits.heads {
        for &x in h.qk.as_slice() {
            s += match mode {
                QkNormalization::MeanAbs => x.abs(),
                QkNormalization::RawMean => x,
            };
        }
        n += h.qk.len();
    }
    s / n as f64
}

/// `Σ prevalence·gradient / normalization`; pairs with no gradient are
/// skipped.
pub fn weighted_qk_gradient(parts: &[(f64, Option<f64>)], normalization: f64) -> f64 {
    parts
        .iter()
        .filter_map(|&(p, g)| g.map(|g| p * g))
        .sum::<f64>()
        / normalization
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RegionRecord {
    /// 1-based, in [`active_regions`] order.
    pub id: usize,
    pub head: usize,
    pub input: OvRun,
    pub output: OvRun,
    pub cells: usize,
    pub transitions: u64,
    pub prevalence: f64,
    pub mean_loss: Option<f64>,
    pub gradient: Option<f64>,
}

/// Contents of `regions.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct QkGradientReport {
    pub regions: Vec<RegionRecord>,
    pub partition: Vec<OvRun>,
    pub unassigned_tokens: Vec<usize>,
    pub counted_transitions: u64,
    pub total_transitions: u64,
    pub normalization_mode: QkNormalization,
    pub normalization: f64,
    pub qk_gradient: f64,
    pub delta_mean: f64,
    pub delta_times_gradient: f64,
}

impl QkGradientReport {
    pub fn prevalence_sum(&self) -> f64 {
        self.regions.iter().map(|r| r.prevalence).sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Full region analysis of a model on a dataset.
///
/// The partition covers list values only: the separator can never appear in
/// a transition, so it is left out.
pub fn model_qk_gradient(
    params: &ModelParams,
    circuits: &CircuitSet,
    dataset: &SortDataset,
    mode: QkNormalization,
) -> Result<QkGradientReport> {
    let values = params.config.vocab_size - 1;
    let partition = ov_partition(circuits).truncated(values);
    let regions = active_regions(&partition);
    if regions.is_empty() {
        return Err(Error::Empty("model has no active QK regions"));
    }
    let prev = region_prevalence(&partition, &regions, dataset)?;
    let losses = region_mean_loss(params, dataset, &partition, &regions)?;
    let grads: Vec<Option<f64>> = regions
        .iter()
        .map(|r| region_gradient(&circuits.heads[r.head].qk, r).ok())
        .collect();
    let normalization = qk_normalization(circuits, mode);
    let parts: Vec<(f64, Option<f64>)> = prev.fractions.iter().copied().zip(grads.iter().copied()).collect();
    let qk_gradient = weighted_qk_gradient(&parts, normalization);
    let delta_mean = delta_stats(dataset)?.mean;
    let records = regions
        .iter()
        .enumerate()
        .map(|(i, r)| RegionRecord {
            id: i + 1,
            head: r.head,
            input: r.input,
            output: r.output,
            cells: r.cell_count(),
            transitions: prev.counts[i],
            prevalence: prev.fractions[i],
            mean_loss: losses[i],
            gradient: grads[i],
        })
        .collect();
    Ok(QkGradientReport {
        regions: records,
        unassigned_tokens: (0..values).filter(|&t| partition.owner[t].is_none()).collect(),
        partition: partition.runs,
        counted_transitions: prev.counted,
        total_transitions: prev.total,
        normalization_mode: mode,
        normalization,
        qk_gradient,
        delta_mean,
        delta_times_gradient: delta_mean * qk_gradient,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn owners(s: &[i32]) -> OvPartition {
        OvPartition::from_owner(
            s.iter()
                .map(|&h| (h >= 0).then_some(h as usize))
                .collect(),
        )
    }

    #[test]
    fn opposite_diagonals_give_one_run() {
        let p = OvPartition::from_diagonals(&[vec![1.0; 6], vec![-1.0; 6]]).unwrap();
        assert_eq!(p.runs, vec![OvRun { head: 0, start: 0, end: 5 }]);
    }

    #[test]
    fn larger_positive_diagonal_wins() {
        let p = OvPartition::from_diagonals(&[vec![0.5; 4], vec![0.7; 4]]).unwrap();
        assert_eq!(p.runs, vec![OvRun { head: 1, start: 0, end: 3 }]);
        let tie = OvPartition::from_diagonals(&[vec![0.5; 2], vec![0.5; 2]]).unwrap();
        assert_eq!(tie.owner, vec![Some(0), Some(0)]);
    }

    #[test]
    fn alternating_signs_give_three_runs() {
        let a = vec![1.0, 1.0, -1.0, -1.0, 1.0];
        let b = vec![-1.0, -1.0, 1.0, 1.0, -1.0];
        let p = OvPartition::from_diagonals(&[a, b]).unwrap();
        assert_eq!(
            p.runs,
            vec![
                OvRun { head: 0, start: 0, end: 1 },
                OvRun { head: 1, start: 2, end: 3 },
                OvRun { head: 0, start: 4, end: 4 },
            ]
        );
    }

    #[test]
    fn unassigned_tokens_split_runs() {
        let p = owners(&[0, 0, -1, 0, 1]);
        assert_eq!(p.runs.len(), 3);
        assert_eq!(p.run_of(2), None);
        assert_eq!(p.run_of(3), Some(1));
    }

    #[test]
    fn single_run_is_one_region() {
        let p = owners(&[0; 7]);
        let r = active_regions(&p);
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].cell_count(), 7 * 6 / 2);
    }

    #[test]
    fn two_halves_give_three_regions() {
        let mut o = vec![0; 26];
        o.extend(vec![1; 26]);
        let p = owners(&o);
        let r = active_regions(&p);
        let summary: Vec<(usize, usize, usize, usize)> = r
            .iter()
            .map(|x| (x.input_run, x.output_run, x.head, x.cell_count()))
            .collect();
        assert_eq!(
            summary,
            vec![(0, 0, 0, 325), (0, 1, 1, 26 * 26), (1, 1, 1, 325)]
        );
    }

    #[test]
    fn prevalence_by_hand() {
        let p = owners(&[0, 0, 0, 1, 1, 1]);
        let r = active_regions(&p);
        // Transitions after dropping the first: (1,2),(2,4) | (3,4),(4,5)
        let lists: Vec<Vec<usize>> = vec![vec![0, 1, 2, 4], vec![0, 3, 4, 5]];
        let prev = prevalence_of(&p, &r, lists.iter().map(Vec::as_slice)).unwrap();
        assert_eq!(prev.counts, vec![1, 1, 2]);
        assert_eq!(prev.counted, 4);
        assert_eq!(prev.fractions, vec![0.25, 0.25, 0.5]);
    }

    #[test]
    fn unassigned_transitions_are_uncounted() {
        let p = owners(&[0, 0, -1, 0]);
        let r = active_regions(&p);
        let lists: Vec<Vec<usize>> = vec![vec![0, 1, 2, 3], vec![0, 0, 1, 3]];
        let prev = prevalence_of(&p, &r, lists.iter().map(Vec::as_slice)).unwrap();
        assert_eq!(prev.total, 4);
        assert_eq!(prev.counted, 2);
        assert!((prev.fractions.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gradient_of_one_row() {
        let mut qk = Matrix::zeros(4, 4);
        qk[(0, 1)] = 0.9;
        qk[(0, 2)] = 0.6;
        qk[(0, 3)] = 0.3;
        let region = ActiveRegion {
            head: 0,
            input_run: 0,
            output_run: 1,
            input: OvRun { head: 0, start: 0, end: 0 },
            output: OvRun { head: 0, start: 1, end: 3 },
        };
        assert!((region_gradient(&qk, &region).unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn constant_region_has_zero_gradient_and_single_cells_error() {
        let p = owners(&[0; 5]);
        let r = active_regions(&p);
        let qk = Matrix::filled(5, 5, 2.5);
        assert_eq!(region_gradient(&qk, &r[0]).unwrap(), 0.0);
        let thin = ActiveRegion {
            head: 0,
            input_run: 0,
            output_run: 0,
            input: OvRun { head: 0, start: 3, end: 3 },
            output: OvRun { head: 0, start: 4, end: 4 },
        };
        assert!(region_gradient(&qk, &thin).is_err());
    }

    #[test]
    fn weighted_sum_by_hand() {
        let g = weighted_qk_gradient(&[(0.75, Some(0.1)), (0.25, Some(0.2)), (0.0, None)], 0.5);
        assert!((g - 0.25).abs() < 1e-15);
    }
}

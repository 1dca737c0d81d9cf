//! Head specialization: classification, relative weight norms, mean
//! ablation and predictive entropy.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::circuits::CircuitSet;
use crate::datagen::{SortDataset, TokenSequence};
use crate::model::{BatchForward, HeadOverride, ModelParams};
use crate::numkernel::Matrix;
use crate::regions::OvPartition;
use crate::trainer::{evaluate_sequences, Evaluation};
use crate::{Error, Result};

const CHUNK: usize = 512;

/// Root mean square over every entry of a head's `W_Q`, `W_K`, `W_V`, `W_O`.
pub fn head_rms(params: &ModelParams, h: usize) -> Result<f64> {
    let hp = params.head(h)?;
    let ms = [&hp.w_q, &hp.w_k, &hp.w_v, &hp.w_o];
    let n: usize = ms.iter().map(|m| m.len()).sum();
    Ok((ms.iter().map(|m| m.sum_sq()).sum::<f64>() / n as f64).sqrt())
}

/// RMS of head `h` divided by the sum of all heads' RMS.
pub fn relative_weight_norm_of(params: &ModelParams, h: usize) -> Result<f64> {
    let rms: Vec<f64> = (0..params.num_heads())
        .map(|i| head_rms(params, i))
        .collect::<Result<_>>()?;
    let own = rms.get(h).copied().ok_or(Error::HeadOutOfRange {
        head: h,
        num_heads: rms.len(),
    })?;
    let total: f64 = rms.iter().sum();
    Ok(if total > 0.0 { own / total } else { 0.0 })
}

/// Smallest head RMS divided by the sum over heads.
pub fn relative_weight_norm(params: &ModelParams) -> Result<f64> {
    if params.num_heads() < 2 {
        return Err(Error::invalid("relative weight norm needs at least two heads"));
    }
    let rms: Vec<f64> = (0..params.num_heads())
        .map(|h| head_rms(params, h))
        .collect::<Result<_>>()?;
    let total: f64 = rms.iter().sum();
    let min = rms.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(if total > 0.0 { min / total } else { 0.0 })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpecializationLabel {
    VocabularySplitting,
    CopySuppression,
    OneHeadSorting,
    Other,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct Thresholds {
    /// One-head sorting: the weakest head's largest OV and QK entries are
    /// below this fraction of the strongest head's.
    pub one_head_ratio: f64,
    /// Copy-suppression: share of tokens with a consistently signed diagonal.
    pub sign_fraction: f64,
    /// Vocabulary splitting: share of tokens each splitting head must own.
    pub min_owned_fraction: f64,
    /// Vocabulary splitting: largest tolerated share of tokens where two or
    /// more heads have a positive diagonal.
    pub max_overlap_fraction: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            one_head_ratio: 0.05,
            sign_fraction: 0.8,
            min_owned_fraction: 0.2,
            max_overlap_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct HeadEvidence {
    pub head: usize,
    pub rms: f64,
    pub ov_max_abs: f64,
    pub qk_max_abs: f64,
    pub diag_positive_fraction: f64,
    pub diag_negative_fraction: f64,
    pub owned_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Evidence {
    pub tokens: usize,
    pub heads: Vec<HeadEvidence>,
    /// Largest and smallest RMS heads.
    pub leading_head: usize,
    pub subleading_head: usize,
    pub ov_ratio: f64,
    pub qk_ratio: f64,
    pub relative_weight_norm: Option<f64>,
    pub positive_overlap_fraction: f64,
}

/// Contents of `specialization.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Specialization {
    pub label: SpecializationLabel,
    pub thresholds: Thresholds,
    pub evidence: Evidence,
}

impl Specialization {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn ratio(a: f64, b: f64) -> f64 {
    if b > 0.0 {
        a / b
    } else if a > 0.0 {
        f64::INFINITY
    } else {
        1.0
    }
}

/// Collects the per-head quantities the rules look at. Diagonal fractions
/// and ownership use the partition's tokens only.
pub fn gather_evidence(
    params: &ModelParams,
    circuits: &CircuitSet,
    partition: &OvPartition,
) -> Result<Evidence> {
    let n = partition.num_tokens();
    if n == 0 {
        return Err(Error::Empty("partition has no tokens"));
    }
    if circuits.heads.len() != params.num_heads() || n > circuits.vocab_size() {
        return Err(Error::invalid("circuits, partition and model disagree"));
    }
    let owned = partition.tokens_per_head(params.num_heads());
    let diags: Vec<Vec<f64>> = circuits.heads.iter().map(|c| c.ov.diagonal()).collect();
    let heads: Vec<HeadEvidence> = circuits
        .heads
        .iter()
        .enumerate()
        .map(|(h, c)| {
            let d = &diags[h][..n];
            Ok(HeadEvidence {
                head: h,
                rms: head_rms(params, h)?,
                ov_max_abs: c.ov.max_abs(),
                qk_max_abs: c.qk.max_abs(),
                diag_positive_fraction: d.iter().filter(|&&x| x > 0.0).count() as f64 / n as f64,
                diag_negative_fraction: d.iter().filter(|&&x| x < 0.0).count() as f64 / n as f64,
                owned_fraction: owned[h] as f64 / n as f64,
            })
        })
        .collect::<Result<_>>()?;
    let mut leading = 0;
    let mut subleading = 0;
    for e in &heads {
        if e.rms > heads[leading].rms {
            leading = e.head;
        }
        if e.rms < heads[subleading].rms {
            subleading = e.head;
        }
    }
    let overlap = (0..n)
        .filter(|&t| diags.iter().filter(|d| d[t] > 0.0).count() >= 2)
        .count();
    Ok(Evidence {
        tokens: n,
        ov_ratio: ratio(heads[subleading].ov_max_abs, heads[leading].ov_max_abs),
        qk_ratio: ratio(heads[subleading].qk_max_abs, heads[leading].qk_max_abs),
        relative_weight_norm: if heads.len() >= 2 {
            Some(relative_weight_norm(params)?)
        } else {
            None
        },
        positive_overlap_fraction: overlap as f64 / n as f64,
        leading_head: leading,
        subleading_head: subleading,
        heads,
    })
}

/// Applies the rules in order: one-head sorting, copy-suppression,
/// vocabulary splitting, other.
pub fn decide(e: &Evidence, t: &Thresholds) -> SpecializationLabel {
    if e.heads.len() >= 2 && e.ov_ratio < t.one_head_ratio && e.qk_ratio < t.one_head_ratio {
        return SpecializationLabel::OneHeadSorting;
    }
    let negative: Vec<usize> = e
        .heads
        .iter()
        .filter(|h| h.diag_negative_fraction >= t.sign_fraction)
        .map(|h| h.head)
        .collect();
    if negative.len() == 1
        && e
            .heads
            .iter()
            .any(|h| h.head != negative[0] && h.diag_positive_fraction >= t.sign_fraction)
    {
        return SpecializationLabel::CopySuppression;
    }
    let owners = e
        .heads
        .iter()
        .filter(|h| h.owned_fraction >= t.min_owned_fraction)
        .count();
    if owners >= 2 && e.positive_overlap_fraction <= t.max_overlap_fraction {
        return SpecializationLabel::VocabularySplitting;
    }
    SpecializationLabel::Other
}

pub fn classify(
    params: &ModelParams,
    circuits: &CircuitSet,
    partition: &OvPartition,
    thresholds: &Thresholds,
) -> Result<Specialization> {
    let evidence = gather_evidence(params, circuits, partition)?;
    Ok(Specialization {
        label: decide(&evidence, thresholds),
        thresholds: *thresholds,
        evidence,
    })
}

/// The head whose OV diagonal is negative on the most tokens, if it is
/// negative on at least `sign_fraction` of them.
pub fn suppressing_head(e: &Evidence, t: &Thresholds) -> Option<usize> {
    e.heads
        .iter()
        .filter(|h| h.diag_negative_fraction >= t.sign_fraction)
        .max_by(|a, b| a.diag_negative_fraction.total_cmp(&b.diag_negative_fraction))
        .map(|h| h.head)
}

/// Position-wise mean of head `h`'s output over `seqs`, laid out as a
/// `[seq_len × d_model]` override. Rows before the first prediction
/// position and the last row are zero; they never reach a logit.
pub fn mean_head_output(params: &ModelParams, h: usize, seqs: &[TokenSequence]) -> Result<HeadOverride> {
    params.head(h)?;
    if seqs.is_empty() {
        return Err(Error::Empty("dataset has no sequences"));
    }
    let cfg = &params.config;
    let ell = cfg.list_length;
    let mut sum = Matrix::zeros(ell, cfg.d_model);
    for chunk in seqs.chunks(CHUNK) {
        let refs: Vec<&TokenSequence> = chunk.iter().collect();
        let out = BatchForward::new(params, &refs, &[])?.head_output(h)?;
        for b in 0..chunk.len() {
            for j in 0..ell {
                for (s, x) in sum.row_mut(j).iter_mut().zip(out.row(b * ell + j)) {
                    *s += x;
                }
            }
        }
    }
    let mut output = Matrix::zeros(cfg.seq_len(), cfg.d_model);
    let n = seqs.len() as f64;
    for j in 0..ell {
        for (o, s) in output.row_mut(ell + j).iter_mut().zip(sum.row(j)) {
            *o = s / n;
        }
    }
    Ok(HeadOverride { head: h, output })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AblationResult {
    /// Empty for the unablated model.
    pub ablated: Vec<usize>,
    pub loss: f64,
    pub accuracy: f64,
    pub entropy: f64,
}

impl From<(Vec<usize>, Evaluation)> for AblationResult {
    fn from((ablated, e): (Vec<usize>, Evaluation)) -> Self {
        Self {
            ablated,
            loss: e.loss,
            accuracy: e.accuracy,
            entropy: e.entropy,
        }
    }
}

/// Mean-ablates every head in `heads` at once (means taken over `seqs`) and
/// evaluates on the same sequences.
pub fn ablate_heads(params: &ModelParams, heads: &[usize], seqs: &[TokenSequence]) -> Result<AblationResult> {
    let overrides = heads
        .iter()
        .map(|&h| mean_head_output(params, h, seqs))
        .collect::<Result<Vec<_>>>()?;
    let e = evaluate_sequences(params, seqs, &overrides)?;
    Ok((heads.to_vec(), e).into())
}

pub fn ablate_head(params: &ModelParams, h: Option<usize>, dataset: &SortDataset) -> Result<AblationResult> {
    let heads: Vec<usize> = h.into_iter().collect();
    ablate_heads(params, &heads, &dataset.sequences()?)
}

/// Mean natural-log entropy of the predictive distribution over prediction
/// positions.
pub fn shannon_entropy(params: &ModelParams, dataset: &SortDataset) -> Result<f64> {
    Ok(evaluate_sequences(params, &dataset.sequences()?, &[])?.entropy)
}

/// Unablated model followed by each head ablated alone.
pub fn ablation_table(params: &ModelParams, seqs: &[TokenSequence]) -> Result<Vec<AblationResult>> {
    let mut rows = vec![ablate_heads(params, &[], seqs)?];
    for h in 0..params.num_heads() {
        rows.push(ablate_heads(params, &[h], seqs)?);
    }
    Ok(rows)
}

/// `ablation.csv`: `ablated_head` is `none` or the head indices joined by
/// `+`.
pub fn write_ablation_csv(rows: &[AblationResult], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["ablated_head", "loss", "accuracy", "entropy"])?;
    for r in rows {
        let head = if r.ablated.is_empty() {
            "none".to_string()
        } else {
            r.ablated.iter().map(usize::to_string).collect::<Vec<_>>().join("+")
        };
        w.write_record([head, r.loss.to_string(), r.accuracy.to_string(), r.entropy.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_ablation_csv(path: &Path) -> Result<Vec<AblationResult>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let bad = |what: &str| Error::invalid(format!("{}: bad {what}", path.display()));
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != 4 {
            return Err(bad("row"));
        }
        let ablated = if &rec[0] == "none" {
            Vec::new()
        } else {
            rec[0]
                .split('+')
                .map(|s| s.parse().map_err(|_| bad("head")))
                .collect::<Result<_>>()?
        };
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad("number"));
        out.push(AblationResult {
            ablated,
            loss: num(&rec[1])?,
            accuracy: num(&rec[2])?,
            entropy: num(&rec[3])?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::gen_uniform;
    use crate::model::{init_model, ModelConfig};
    use crate::regions::ov_partition;

    fn small(heads: usize) -> ModelParams {
        init_model(&ModelConfig {
            vocab_size: 14,
            d_model: 16,
            num_heads: heads,
            d_head: 8,
            list_length: 4,
            use_layer_norm: true,
            init_std: None,
            seed: 5,
        })
        .unwrap()
    }

    #[test]
    fn identical_heads_split_the_norm_evenly() {
        let mut p = small(2);
        p.heads[1] = p.heads[0].clone();
        assert!((relative_weight_norm(&p).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_head_has_zero_norm() {
        let mut p = small(2);
        let hp = &mut p.heads[1];
        for m in [&mut hp.w_q, &mut hp.w_k, &mut hp.w_v, &mut hp.w_o] {
            m.fill(0.0);
        }
        assert_eq!(relative_weight_norm(&p).unwrap(), 0.0);
    }

    #[test]
    fn rms_one_and_three_give_a_quarter() {
        let mut p = small(2);
        let hp = &mut p.heads[0];
        for m in [&mut hp.w_q, &mut hp.w_k, &mut hp.w_v, &mut hp.w_o] {
            m.fill(1.0);
        }
        let hp = &mut p.heads[1];
        for m in [&mut hp.w_q, &mut hp.w_k, &mut hp.w_v, &mut hp.w_o] {
            m.fill(-3.0);
        }
        assert!((relative_weight_norm(&p).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn single_head_has_no_relative_norm() {
        assert!(relative_weight_norm(&small(1)).is_err());
    }

    fn evidence(diag: &[(f64, f64)], owned: &[f64], overlap: f64, ratios: (f64, f64)) -> Evidence {
        Evidence {
            tokens: 10,
            heads: diag
                .iter()
                .zip(owned)
                .enumerate()
                .map(|(h, (&(pos, neg), &own))| HeadEvidence {
                    head: h,
                    rms: 1.0,
                    ov_max_abs: 1.0,
                    qk_max_abs: 1.0,
                    diag_positive_fraction: pos,
                    diag_negative_fraction: neg,
                    owned_fraction: own,
                })
                .collect(),
            leading_head: 0,
            subleading_head: 1,
            ov_ratio: ratios.0,
            qk_ratio: ratios.1,
            relative_weight_norm: Some(0.5),
            positive_overlap_fraction: overlap,
        }
    }

    #[test]
    fn rules_in_order() {
        let t = Thresholds::default();
        let split = evidence(&[(0.5, 0.5), (0.5, 0.5)], &[0.5, 0.5], 0.0, (1.0, 1.0));
        assert_eq!(decide(&split, &t), SpecializationLabel::VocabularySplitting);
        let copy = evidence(&[(1.0, 0.0), (0.1, 0.9)], &[1.0, 0.0], 0.1, (1.0, 1.0));
        assert_eq!(decide(&copy, &t), SpecializationLabel::CopySuppression);
        let one = evidence(&[(1.0, 0.0), (0.1, 0.9)], &[1.0, 0.0], 0.1, (0.01, 0.02));
        assert_eq!(decide(&one, &t), SpecializationLabel::OneHeadSorting);
        // A large QK ratio alone blocks one-head sorting.
        let qk = evidence(&[(1.0, 0.0), (0.1, 0.9)], &[1.0, 0.0], 0.1, (0.01, 0.2));
        assert_eq!(decide(&qk, &t), SpecializationLabel::CopySuppression);
        let overlap = evidence(&[(0.9, 0.1), (0.9, 0.1)], &[0.5, 0.5], 0.8, (1.0, 1.0));
        assert_eq!(decide(&overlap, &t), SpecializationLabel::Other);
        let two_negative = evidence(&[(1.0, 0.0), (0.0, 1.0), (0.0, 1.0)], &[1.0, 0.0, 0.0], 0.0, (1.0, 1.0));
        assert_eq!(decide(&two_negative, &t), SpecializationLabel::Other);
    }

    #[test]
    fn classify_is_scale_invariant() {
        let p = small(2);
        let c = CircuitSet::compute(&p, 1e-3).unwrap();
        let part = ov_partition(&c).truncated(13);
        let a = classify(&p, &c, &part, &Thresholds::default()).unwrap();
        let mut q = p.clone();
        q.scale_all(3.0);
        let c2 = CircuitSet::compute(&q, 1e-3).unwrap();
        let b = classify(&q, &c2, &ov_partition(&c2).truncated(13), &Thresholds::default()).unwrap();
        assert_eq!(a.label, b.label);
        assert!((a.evidence.ov_ratio - b.evidence.ov_ratio).abs() < 1e-12);
    }

    #[test]
    fn repeated_sequence_ablation_is_exact() {
        let p = small(2);
        let d = gen_uniform(4, 14, 1, 2).unwrap();
        let seqs = vec![d.sequence(0).unwrap(); 3];
        let base = ablate_heads(&p, &[], &seqs).unwrap();
        for h in 0..2 {
            let a = ablate_heads(&p, &[h], &seqs).unwrap();
            assert!((a.loss - base.loss).abs() < 1e-12);
            assert_eq!(a.accuracy, base.accuracy);
        }
    }

    #[test]
    fn no_ablation_matches_plain_evaluation() {
        let p = small(2);
        let d = gen_uniform(4, 14, 20, 2).unwrap();
        let r = ablate_head(&p, None, &d).unwrap();
        let e = crate::trainer::evaluate(&p, &d).unwrap();
        assert_eq!((r.loss, r.accuracy, r.entropy), (e.loss, e.accuracy, e.entropy));
        assert!(ablate_head(&p, Some(2), &d).is_err());
    }

    #[test]
    fn uniform_logits_have_maximal_entropy() {
        let mut p = small(1);
        p.unembed.fill(0.0);
        let d = gen_uniform(4, 14, 5, 2).unwrap();
        let h = shannon_entropy(&p, &d).unwrap();
        assert!((h - 14f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ablation_csv_round_trip() {
        let rows = vec![
            AblationResult { ablated: vec![], loss: 0.1, accuracy: 1.0, entropy: 0.2 },
            AblationResult { ablated: vec![0, 1], loss: 3.9, accuracy: 0.02, entropy: 3.95 },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ablation.csv");
        write_ablation_csv(&rows, &path).unwrap();
        assert_eq!(read_ablation_csv(&path).unwrap(), rows);
    }
}

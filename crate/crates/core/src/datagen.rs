//! List datasets with controlled gap statistics.
//!
//! A gap δ is the difference between adjacent elements of a sorted list. All
//! generators are deterministic per seed and record their parameters in a
//! [`DatasetManifest`] so a dataset can be regenerated or re-seeded (for
//! validation sets) without the original file.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::numkernel::RandomSource;
use crate::{Error, Result};

/// Distinct integers in presentation (unsorted) order.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SortList(Vec<u32>);

impl SortList {
    pub fn new(values: Vec<u32>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::invalid(format!(
                "lists need at least 2 elements, got {}",
                values.len()
            )));
        }
        let mut seen = HashSet::with_capacity(values.len());
        if let Some(dup) = values.iter().find(|v| !seen.insert(**v)) {
            return Err(Error::invalid(format!("value {dup} repeats in list")));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn sorted(&self) -> Vec<u32> {
        let mut s = self.0.clone();
        s.sort_unstable();
        s
    }

    /// Gaps between adjacent sorted elements.
    pub fn deltas(&self) -> Vec<u32> {
        self.sorted().windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Mean gap of this list, `(max − min)/(ℓ − 1)`.
    pub fn mean_delta(&self) -> f64 {
        let max = *self.0.iter().max().unwrap();
        let min = *self.0.iter().min().unwrap();
        f64::from(max - min) / (self.0.len() - 1) as f64
    }
}

/// One encoded example: `ℓ` unsorted tokens, SEP, `ℓ` target tokens.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub tokens: Vec<usize>,
    pub loss_mask: Vec<bool>,
}

impl TokenSequence {
    pub fn list_len(&self) -> usize {
        self.tokens.len() / 2
    }

    /// Next-token targets for every position; the last position has none and
    /// maps to SEP (it is always masked out).
    pub fn next_tokens(&self) -> Vec<usize> {
        let sep = self.tokens[self.list_len()];
        (0..self.tokens.len())
            .map(|p| self.tokens.get(p + 1).copied().unwrap_or(sep))
            .collect()
    }
}

pub fn sep_token(vocab_size: usize) -> usize {
    vocab_size - 1
}

/// Encodes `list` followed by its ascending sort.
pub fn encode(list: &SortList, vocab_size: usize) -> Result<TokenSequence> {
    encode_with_target(list, &list.sorted(), vocab_size)
}

/// Encodes `list` followed by an explicit target order (used for perturbed
/// datasets, whose targets are not exactly sorted).
pub fn encode_with_target(
    list: &SortList,
    target: &[u32],
    vocab_size: usize,
) -> Result<TokenSequence> {
    let sep = sep_token(vocab_size);
    let ell = list.len();
    if target.len() != ell {
        return Err(Error::invalid("target length differs from list length"));
    }
    let mut tokens = Vec::with_capacity(2 * ell + 1);
    for &v in list.values().iter().chain(target) {
        let v = v as usize;
        if v >= sep {
            return Err(Error::TokenOutOfRange {
                token: v,
                vocab: vocab_size,
            });
        }
        tokens.push(v);
        if tokens.len() == ell {
            tokens.push(sep);
        }
    }
    let loss_mask = (0..2 * ell + 1).map(|p| p >= ell && p < 2 * ell).collect();
    Ok(TokenSequence { tokens, loss_mask })
}

/// Generator recipe, enough to regenerate a dataset under another seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case")]
pub enum Generator {
    Uniform,
    #[serde(rename_all = "camelCase")]
    Distilled {
        base: Box<DatasetManifest>,
        target_mean_delta: f64,
        passes: usize,
    },
    #[serde(rename_all = "camelCase")]
    FixedDelta { delta_min: u32, delta_max: u32 },
    #[serde(rename_all = "camelCase")]
    Perturbed {
        base: Box<DatasetManifest>,
        swap_scale: f64,
    },
}

impl Generator {
    pub fn name(&self) -> &'static str {
        match self {
            Generator::Uniform => "uniform",
            Generator::Distilled { .. } => "distilled",
            Generator::FixedDelta { .. } => "fixed_delta",
            Generator::Perturbed { .. } => "perturbed",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DatasetManifest {
    #[serde(flatten)]
    pub generator: Generator,
    pub seed: u64,
    pub list_length: usize,
    pub vocab_size: usize,
    pub count: usize,
    pub delta_mean: f64,
    pub delta_variance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SortDataset {
    pub lists: Vec<SortList>,
    /// Explicit target orders; `None` means "ascending sort of each list".
    pub targets: Option<Vec<Vec<u32>>>,
    pub manifest: DatasetManifest,
}

impl SortDataset {
    fn assemble(
        lists: Vec<SortList>,
        targets: Option<Vec<Vec<u32>>>,
        generator: Generator,
        seed: u64,
        list_length: usize,
        vocab_size: usize,
    ) -> Result<Self> {
        let stats = delta_stats_of(&lists)?;
        Ok(Self {
            manifest: DatasetManifest {
                generator,
                seed,
                list_length,
                vocab_size,
                count: lists.len(),
                delta_mean: stats.mean,
                delta_variance: stats.variance,
            },
            lists,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.lists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lists.is_empty()
    }

    pub fn list_length(&self) -> usize {
        self.manifest.list_length
    }

    pub fn vocab_size(&self) -> usize {
        self.manifest.vocab_size
    }

    pub fn target(&self, i: usize) -> Vec<u32> {
        match &self.targets {
            Some(t) => t[i].clone(),
            None => self.lists[i].sorted(),
        }
    }

    pub fn sequence(&self, i: usize) -> Result<TokenSequence> {
        encode_with_target(&self.lists[i], &self.target(i), self.vocab_size())
    }

    pub fn sequences(&self) -> Result<Vec<TokenSequence>> {
        (0..self.len()).map(|i| self.sequence(i)).collect()
    }

    /// Keeps only the lists at `indices` (in that order); statistics are
    /// recomputed and the generator recipe is kept.
    pub fn subset(&self, indices: &[usize]) -> Result<SortDataset> {
        let lists: Vec<SortList> = indices.iter().map(|&i| self.lists[i].clone()).collect();
        let targets = self
            .targets
            .as_ref()
            .map(|t| indices.iter().map(|&i| t[i].clone()).collect());
        SortDataset::assemble(
            lists,
            targets,
            self.manifest.generator.clone(),
            self.manifest.seed,
            self.list_length(),
            self.vocab_size(),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaStats {
    pub mean: f64,
    pub variance: f64,
    pub histogram: BTreeMap<u32, u64>,
}

pub fn delta_stats(d: &SortDataset) -> Result<DeltaStats> {
    delta_stats_of(&d.lists)
}

fn delta_stats_of(lists: &[SortList]) -> Result<DeltaStats> {
    if lists.is_empty() {
        return Err(Error::Empty("dataset has no lists"));
    }
    let mut histogram = BTreeMap::new();
    let mut n = 0u64;
    let mut sum = 0f64;
    for l in lists {
        for d in l.deltas() {
            *histogram.entry(d).or_insert(0u64) += 1;
            n += 1;
            sum += f64::from(d);
        }
    }
    let mean = sum / n as f64;
    let variance = histogram
        .iter()
        .map(|(&d, &c)| c as f64 * (f64::from(d) - mean).powi(2))
        .sum::<f64>()
        / n as f64;
    Ok(DeltaStats {
        mean,
        variance,
        histogram,
    })
}

fn check_shape(list_length: usize, vocab_size: usize) -> Result<()> {
    if list_length < 2 {
        return Err(Error::invalid("list length must be at least 2"));
    }
    if vocab_size < 3 || list_length > vocab_size - 1 {
        return Err(Error::invalid(format!(
            "list length {list_length} exceeds the {} available numbers",
            vocab_size.saturating_sub(1)
        )));
    }
    Ok(())
}

/// Uniform random `ℓ`-subsets of `0..=vocab−2`, presented in random order.
pub fn gen_uniform(
    list_length: usize,
    vocab_size: usize,
    count: usize,
    seed: u64,
) -> Result<SortDataset> {
    check_shape(list_length, vocab_size)?;
    if count == 0 {
        return Err(Error::Empty("count must be positive"));
    }
    let mut rng = RandomSource::new(seed);
    let numbers = vocab_size - 1;
    let lists = (0..count)
        .map(|_| {
            SortList(
                rng.sample_distinct(numbers, list_length)
                    .into_iter()
                    .map(|v| v as u32)
                    .collect(),
            )
        })
        .collect();
    SortDataset::assemble(lists, None, Generator::Uniform, seed, list_length, vocab_size)
}

/// Chance that a list with mean gap `list_delta` is dropped in a distillation
/// pass whose largest mean gap is `max_delta`.
pub fn removal_probability(list_delta: f64, max_delta: f64) -> f64 {
    ((list_delta / max_delta - 0.7) / 0.3).clamp(0.0, 1.0)
}

/// Removes high-gap lists in repeated passes until the mean gap reaches
/// `target_mean_delta`. Nothing is resampled, so the result is smaller than
/// `base`.
pub fn gen_distilled(base: &SortDataset, target_mean_delta: f64, seed: u64) -> Result<SortDataset> {
    let ell = base.list_length();
    let base_mean = base.manifest.delta_mean;
    if target_mean_delta < 1.0 {
        return Err(Error::invalid(format!(
            "target mean gap {target_mean_delta} is below the minimum possible value 1"
        )));
    }
    if target_mean_delta >= base_mean {
        return Err(Error::invalid(format!(
            "target mean gap {target_mean_delta} is not below the base mean {base_mean}"
        )));
    }
    let mut rng = RandomSource::new(seed);
    let list_deltas: Vec<f64> = base.lists.iter().map(SortList::mean_delta).collect();
    let mut alive = vec![true; base.len()];
    let mut alive_count = base.len();
    // Σ (max − min) over surviving lists, exact in integers.
    let mut span_sum: u64 = base
        .lists
        .iter()
        .map(|l| u64::from(l.values().iter().max().unwrap() - l.values().iter().min().unwrap()))
        .sum();
    let mean = |span_sum: u64, n: usize| span_sum as f64 / (n * (ell - 1)) as f64;

    let mut passes = 0;
    'outer: while mean(span_sum, alive_count) > target_mean_delta {
        passes += 1;
        let max_delta = list_deltas
            .iter()
            .zip(&alive)
            .filter(|(_, &a)| a)
            .map(|(&d, _)| d)
            .fold(f64::NEG_INFINITY, f64::max);
        for i in 0..base.len() {
            if !alive[i] {
                continue;
            }
            if rng.bernoulli(removal_probability(list_deltas[i], max_delta)) {
                alive[i] = false;
                alive_count -= 1;
                span_sum -= (list_deltas[i] * (ell - 1) as f64).round() as u64;
                if alive_count == 0 {
                    return Err(Error::invalid("distillation removed every list"));
                }
                if mean(span_sum, alive_count) <= target_mean_delta {
                    break 'outer;
                }
            }
        }
    }
    let lists: Vec<SortList> = base
        .lists
        .iter()
        .zip(&alive)
        .filter(|(_, &a)| a)
        .map(|(l, _)| l.clone())
        .collect();
    let targets = base.targets.as_ref().map(|t| {
        t.iter()
            .zip(&alive)
            .filter(|(_, &a)| a)
            .map(|(x, _)| x.clone())
            .collect()
    });
    SortDataset::assemble(
        lists,
        targets,
        Generator::Distilled {
            base: Box::new(base.manifest.clone()),
            target_mean_delta,
            passes,
        },
        seed,
        ell,
        base.vocab_size(),
    )
}

/// Lists built from gaps drawn uniformly from `delta_min..=delta_max`, shifted
/// uniformly inside the number range, without duplicates.
pub fn gen_fixed_delta(
    delta_min: u32,
    delta_max: u32,
    list_length: usize,
    vocab_size: usize,
    count: usize,
    seed: u64,
) -> Result<SortDataset> {
    check_shape(list_length, vocab_size)?;
    if delta_min == 0 || delta_min > delta_max {
        return Err(Error::invalid(format!(
            "allowed gap range [{delta_min}, {delta_max}] is empty or contains 0"
        )));
    }
    if count == 0 {
        return Err(Error::Empty("count must be positive"));
    }
    let number_max = (vocab_size - 2) as u32;
    let mut rng = RandomSource::new(seed);
    let budget = count.saturating_mul(1000).max(100_000);
    let mut seen: HashSet<Vec<u32>> = HashSet::with_capacity(count);
    let mut lists = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while lists.len() < count {
        attempts += 1;
        if attempts > budget {
            return Err(Error::RetryBudget(format!(
                "gap range [{delta_min}, {delta_max}] produced only {} of {count} distinct lists in {budget} attempts",
                lists.len()
            )));
        }
        let mut sorted = Vec::with_capacity(list_length);
        let mut acc = 0u32;
        sorted.push(0);
        for _ in 1..list_length {
            acc += delta_min + rng.below(u64::from(delta_max - delta_min) + 1) as u32;
            sorted.push(acc);
        }
        if acc > number_max {
            continue;
        }
        let shift = rng.below(u64::from(number_max - acc) + 1) as u32;
        sorted.iter_mut().for_each(|v| *v += shift);
        if !seen.insert(sorted.clone()) {
            continue;
        }
        rng.shuffle(&mut sorted);
        lists.push(SortList(sorted));
    }
    SortDataset::assemble(
        lists,
        None,
        Generator::FixedDelta {
            delta_min,
            delta_max,
        },
        seed,
        list_length,
        vocab_size,
    )
}

/// Swap chance for an adjacent sorted pair separated by `gap`.
pub fn swap_probability(gap: u32, swap_scale: f64) -> f64 {
    (swap_scale / f64::from(gap)).min(1.0)
}

/// One left-to-right pass over a sorted list: each adjacent pair is swapped
/// with [`swap_probability`]; swapped elements are skipped for the rest of
/// the pass.
pub fn perturb_sorted(sorted: &[u32], swap_scale: f64, rng: &mut RandomSource) -> Vec<u32> {
    let mut out = sorted.to_vec();
    let mut i = 0;
    while i + 1 < out.len() {
        let gap = out[i + 1].abs_diff(out[i]);
        if rng.bernoulli(swap_probability(gap, swap_scale)) {
            out.swap(i, i + 1);
            i += 2;
        } else {
            i += 1;
        }
    }
    out
}

pub const DEFAULT_SWAP_SCALE: f64 = 0.4;

/// Perturbs only the target side of every list of `base`.
pub fn gen_perturbed(base: &SortDataset, seed: u64) -> Result<SortDataset> {
    let mut rng = RandomSource::new(seed);
    let targets = (0..base.len())
        .map(|i| perturb_sorted(&base.lists[i].sorted(), DEFAULT_SWAP_SCALE, &mut rng))
        .collect();
    SortDataset::assemble(
        base.lists.clone(),
        Some(targets),
        Generator::Perturbed {
            base: Box::new(base.manifest.clone()),
            swap_scale: DEFAULT_SWAP_SCALE,
        },
        seed,
        base.list_length(),
        base.vocab_size(),
    )
}

/// Re-runs the recipe in `manifest` under a different seed. Nested bases are
/// re-seeded with streams derived from `seed`.
pub fn regenerate(manifest: &DatasetManifest, seed: u64) -> Result<SortDataset> {
    let ell = manifest.list_length;
    let vocab = manifest.vocab_size;
    match &manifest.generator {
        Generator::Uniform => gen_uniform(ell, vocab, manifest.count, seed),
        Generator::FixedDelta {
            delta_min,
            delta_max,
        } => gen_fixed_delta(*delta_min, *delta_max, ell, vocab, manifest.count, seed),
        Generator::Distilled {
            base,
            target_mean_delta,
            ..
        } => {
            let base = regenerate(base, RandomSource::new(seed).fork(1).next_u64())?;
            gen_distilled(&base, *target_mean_delta, seed)
        }
        Generator::Perturbed { base, swap_scale } => {
            let base = regenerate(base, RandomSource::new(seed).fork(1).next_u64())?;
            let mut d = gen_perturbed(&base, seed)?;
            if *swap_scale != DEFAULT_SWAP_SCALE {
                let mut rng = RandomSource::new(seed);
                d.targets = Some(
                    (0..d.len())
                        .map(|i| perturb_sorted(&d.lists[i].sorted(), *swap_scale, &mut rng))
                        .collect(),
                );
                d.manifest.generator = Generator::Perturbed {
                    base: Box::new(base.manifest),
                    swap_scale: *swap_scale,
                };
            }
            Ok(d)
        }
    }
}

fn sequence_key(d: &SortDataset, i: usize) -> (Vec<u32>, Vec<u32>) {
    (d.lists[i].values().to_vec(), d.target(i))
}

/// Held-out dataset drawn from the same recipe as `train` under `seed`,
/// with every token sequence that also occurs in `train` removed and
/// replaced by fresh draws. `count` defaults to the training size.
pub fn make_validation(train: &SortDataset, seed: u64, count: Option<usize>) -> Result<SortDataset> {
    if seed == train.manifest.seed {
        return Err(Error::invalid("validation seed must differ from the training seed"));
    }
    let forbidden: HashSet<(Vec<u32>, Vec<u32>)> =
        (0..train.len()).map(|i| sequence_key(train, i)).collect();
    let mut recipe = train.manifest.clone();
    if let Some(c) = count {
        recipe.count = c;
        if let Generator::Distilled { base, .. } = &mut recipe.generator {
            // Keep roughly the same retention ratio.
            let ratio = base.count as f64 / train.len().max(1) as f64;
            base.count = ((c as f64) * ratio).ceil() as usize;
        }
    }
    let wanted = count.unwrap_or(train.len());

    let mut accepted: Vec<usize> = Vec::new();
    let mut pool: Option<SortDataset> = None;
    let mut lists = Vec::new();
    let mut targets = Vec::new();
    let mut local_seen: HashSet<(Vec<u32>, Vec<u32>)> = HashSet::new();
    let forks = RandomSource::new(seed);
    for round in 0..16u64 {
        let draw_seed = if round == 0 { seed } else { forks.fork(round).next_u64() };
        let d = regenerate(&recipe, draw_seed)?;
        for i in 0..d.len() {
            if lists.len() == wanted {
                break;
            }
            let key = sequence_key(&d, i);
            if forbidden.contains(&key) {
                continue;
            }
            // Fixed-gap datasets never repeat a list; keep that property.
            if matches!(recipe.generator, Generator::FixedDelta { .. })
                && !local_seen.insert(key.clone())
            {
                continue;
            }
            lists.push(d.lists[i].clone());
            targets.push(key.1);
            accepted.push(i);
        }
        if pool.is_none() {
            pool = Some(d);
        }
        if lists.len() == wanted {
            let first = pool.expect("at least one round ran");
            let explicit = first.targets.is_some();
            let mut out = SortDataset::assemble(
                lists,
                explicit.then_some(targets),
                first.manifest.generator.clone(),
                seed,
                first.list_length(),
                first.vocab_size(),
            )?;
            out.manifest.seed = seed;
            return Ok(out);
        }
    }
    Err(Error::RetryBudget(format!(
        "could not draw {wanted} validation sequences disjoint from the training set"
    )))
}

/// Number of token sequences shared between two datasets.
pub fn overlap_count(a: &SortDataset, b: &SortDataset) -> usize {
    let keys: HashSet<(Vec<u32>, Vec<u32>)> = (0..a.len()).map(|i| sequence_key(a, i)).collect();
    (0..b.len())
        .filter(|&i| keys.contains(&sequence_key(b, i)))
        .count()
}

// ---------------------------------------------------------------------------
// Files: `<name>.jsonl` (one presentation-order list per line),
// `<name>.manifest.json`, and for perturbed data `<name>.targets.jsonl`.
// ---------------------------------------------------------------------------

pub struct DatasetPaths {
    pub lists: PathBuf,
    pub manifest: PathBuf,
    pub targets: PathBuf,
    pub name: String,
}

impl DatasetPaths {
    pub fn new(dir: &Path, name: &str) -> Self {
        Self {
            lists: dir.join(format!("{name}.jsonl")),
            manifest: dir.join(format!("{name}.manifest.json")),
            targets: dir.join(format!("{name}.targets.jsonl")),
            name: name.to_string(),
        }
    }

    /// Resolves a directory holding exactly one manifest, a `.manifest.json`
    /// file or a `.jsonl` file.
    pub fn resolve(path: &Path) -> Result<Self> {
        if path.is_dir() {
            let entries = fs::read_dir(path).map_err(|e| Error::io(path, e))?;
            let mut names = Vec::new();
            for entry in entries {
                let entry = entry.map_err(|e| Error::io(path, e))?;
                let file = entry.file_name().to_string_lossy().into_owned();
                if let Some(stem) = file.strip_suffix(".manifest.json") {
                    names.push(stem.to_string());
                }
            }
            names.sort();
            return match names.as_slice() {
                [one] => Ok(Self::new(path, one)),
                [] => Err(Error::invalid(format!(
                    "{} contains no dataset manifest",
                    path.display()
                ))),
                _ => Err(Error::invalid(format!(
                    "{} contains several datasets: {}",
                    path.display(),
                    names.join(", ")
                ))),
            };
        }
        let file = path
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default();
        let dir = path.parent().unwrap_or(Path::new("."));
        let stem = file
            .strip_suffix(".manifest.json")
            .or_else(|| file.strip_suffix(".targets.jsonl"))
            .or_else(|| file.strip_suffix(".jsonl"))
            .ok_or_else(|| Error::invalid(format!("not a dataset path: {}", path.display())))?;
        Ok(Self::new(dir, stem))
    }
}

fn write_lines<'a>(path: &Path, rows: impl Iterator<Item = &'a [u32]>) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for row in rows {
        serde_json::to_writer(&mut w, row)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_lines(path: &Path) -> Result<Vec<Vec<u32>>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub fn save_dataset(d: &SortDataset, dir: &Path, name: &str) -> Result<DatasetPaths> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = DatasetPaths::new(dir, name);
    write_lines(&paths.lists, d.lists.iter().map(|l| l.values()))?;
    if let Some(t) = &d.targets {
        write_lines(&paths.targets, t.iter().map(Vec::as_slice))?;
    }
    let json = serde_json::to_string_pretty(&d.manifest)?;
    fs::write(&paths.manifest, json + "\n").map_err(|e| Error::io(&paths.manifest, e))?;
    Ok(paths)
}

pub fn load_dataset(path: &Path) -> Result<(SortDataset, String)> {
    let paths = DatasetPaths::resolve(path)?;
    let text = fs::read_to_string(&paths.manifest).map_err(|e| Error::io(&paths.manifest, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    let lists = read_lines(&paths.lists)?
        .into_iter()
        .map(SortList::new)
        .collect::<Result<Vec<_>>>()?;
    let targets = if matches!(manifest.generator, Generator::Perturbed { .. }) {
        Some(read_lines(&paths.targets)?)
    } else {
        None
    };
    if lists.len() != manifest.count {
        return Err(Error::invalid(format!(
            "{}: manifest says {} lists, file has {}",
            paths.lists.display(),
            manifest.count,
            lists.len()
        )));
    }
    for l in &lists {
        if l.len() != manifest.list_length
            || l.values().iter().any(|&v| v as usize >= manifest.vocab_size - 1)
        {
            return Err(Error::invalid(format!(
                "{}: list {:?} does not fit length {} / vocabulary {}",
                paths.lists.display(),
                l.values(),
                manifest.list_length,
                manifest.vocab_size
            )));
        }
    }
    let stats = delta_stats_of(&lists)?;
    if (stats.mean - manifest.delta_mean).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "{}: manifest mean gap {} disagrees with contents {}",
            paths.manifest.display(),
            manifest.delta_mean,
            stats.mean
        )));
    }
    Ok((
        SortDataset {
            lists,
            targets,
            manifest,
        },
        paths.name,
    ))
}

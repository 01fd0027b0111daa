//! Importance scoring from training dynamics and the augment/retain/prune
//! split.
//!
//! Every score is averaged over all logged epochs. Orientation defaults:
//! EL2N, entropy and variance treat higher values as more important, AUM
//! treats lower margins as more important.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsLine {
    pub sample_id: String,
    pub epoch: i64,
    pub logits: Vec<f64>,
    pub gold_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochDynamics {
    pub epoch: i64,
    pub logits: Vec<f64>,
    pub gold_index: usize,
}

/// Per-epoch logits of one sample, epochs ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsRecord {
    pub sample_id: String,
    pub epochs: Vec<EpochDynamics>,
}

impl DynamicsRecord {
    pub fn new(sample_id: impl Into<String>, mut epochs: Vec<EpochDynamics>) -> Result<Self> {
        let sample_id = sample_id.into();
        let first = epochs
            .first()
            .ok_or_else(|| Error::invalid(format!("sample `{sample_id}` has no epochs")))?;
        let classes = first.logits.len();
        if classes == 0 {
            return Err(Error::invalid(format!("sample `{sample_id}` has empty logits")));
        }
        for e in &epochs {
            if e.logits.len() != classes {
                return Err(Error::invalid(format!(
                    "sample `{sample_id}`: epoch {} has {} logits, expected {classes}",
                    e.epoch,
                    e.logits.len()
                )));
            }
            if e.gold_index >= classes {
                return Err(Error::invalid(format!(
                    "sample `{sample_id}`: gold index {} out of range for {classes} classes",
                    e.gold_index
                )));
            }
            if e.logits.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite);
            }
        }
        epochs.sort_by_key(|e| e.epoch);
        if epochs.windows(2).any(|w| w[0].epoch == w[1].epoch) {
            return Err(Error::invalid(format!("sample `{sample_id}` repeats an epoch")));
        }
        Ok(Self { sample_id, epochs })
    }

    pub fn num_classes(&self) -> usize {
        self.epochs[0].logits.len()
    }

    /// Uniform-gold helper for tests and synthetic data.
    pub fn from_logits(sample_id: &str, gold_index: usize, logits: &[&[f64]]) -> Result<Self> {
        Self::new(
            sample_id,
            logits
                .iter()
                .enumerate()
                .map(|(i, l)| EpochDynamics {
                    epoch: i as i64,
                    logits: l.to_vec(),
                    gold_index,
                })
                .collect(),
        )
    }
}

/// Reads dynamics JSONL and groups lines by sample, sorting epochs.
pub fn load_dynamics(path: &Path) -> Result<BTreeMap<String, DynamicsRecord>> {
    let lines: Vec<(usize, DynamicsLine)> = jsonl::read(path)?;
    if lines.is_empty() {
        return Err(Error::EmptyDataset(path.display().to_string()));
    }
    let classes = lines[0].1.logits.len();
    let mut grouped: BTreeMap<String, Vec<EpochDynamics>> = BTreeMap::new();
    for (line, d) in lines {
        if d.logits.len() != classes {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("{} logits, expected {classes}", d.logits.len()),
            });
        }
        grouped.entry(d.sample_id).or_default().push(EpochDynamics {
            epoch: d.epoch,
            logits: d.logits,
            gold_index: d.gold_index,
        });
    }
    let records = grouped
        .into_iter()
        .map(|(id, epochs)| DynamicsRecord::new(id.clone(), epochs).map(|r| (id, r)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    for (id, missing) in missing_epochs(&records) {
        log::warn!("dynamics: sample `{id}` is missing epochs {missing:?}");
    }
    Ok(records)
}

/// Samples lacking some epoch that other samples have.
pub fn missing_epochs(records: &BTreeMap<String, DynamicsRecord>) -> Vec<(String, Vec<i64>)> {
    let all: BTreeSet<i64> = records
        .values()
        .flat_map(|r| r.epochs.iter().map(|e| e.epoch))
        .collect();
    records
        .values()
        .filter_map(|r| {
            let have: BTreeSet<i64> = r.epochs.iter().map(|e| e.epoch).collect();
            let missing: Vec<i64> = all.difference(&have).copied().collect();
            (!missing.is_empty()).then(|| (r.sample_id.clone(), missing))
        })
        .collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let peak = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - peak).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn mean_over_epochs(r: &DynamicsRecord, f: impl Fn(&EpochDynamics) -> f64) -> f64 {
    r.epochs.iter().map(f).sum::<f64>() / r.epochs.len() as f64
}

/// Mean L2 norm of the softmax error vector against the one-hot gold label.
pub fn el2n(r: &DynamicsRecord) -> f64 {
    mean_over_epochs(r, |e| {
        softmax(&e.logits)
            .iter()
            .enumerate()
            .map(|(c, p)| {
                let target = if c == e.gold_index { 1.0 } else { 0.0 };
                (p - target) * (p - target)
            })
            .sum::<f64>()
            .sqrt()
    })
}

/// Mean Shannon entropy (nats) of the predicted distribution.
pub fn entropy_score(r: &DynamicsRecord) -> f64 {
    mean_over_epochs(r, |e| {
        softmax(&e.logits)
            .iter()
            .filter(|p| **p > 0.0)
            .map(|p| -p * p.ln())
            .sum()
    })
}

/// Unbiased variance of the gold-class probability across epochs.
pub fn variance_score(r: &DynamicsRecord) -> Result<f64> {
    let n = r.epochs.len();
    if n < 2 {
        return Err(Error::InsufficientSamples {
            metric: "variance",
            needed: 2,
            got: n,
        });
    }
    let probs: Vec<f64> = r
        .epochs
        .iter()
        .map(|e| softmax(&e.logits)[e.gold_index])
        .collect();
    let mean = probs.iter().sum::<f64>() / n as f64;
    Ok(probs.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / (n - 1) as f64)
}

/// Area under the margin: mean of gold logit minus the largest other logit.
pub fn aum(r: &DynamicsRecord) -> Result<f64> {
    if r.num_classes() < 2 {
        return Err(Error::invalid(format!(
            "AUM needs at least two classes (sample `{}`)",
            r.sample_id
        )));
    }
    Ok(mean_over_epochs(r, |e| {
        let other = e
            .logits
            .iter()
            .enumerate()
            .filter(|(c, _)| *c != e.gold_index)
            .map(|(_, x)| *x)
            .fold(f64::NEG_INFINITY, f64::max);
        e.logits[e.gold_index] - other
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImportanceMethod {
    El2n,
    Entropy,
    Variance,
    Aum,
}

impl ImportanceMethod {
    pub fn default_orientation(self) -> Orientation {
        match self {
            ImportanceMethod::Aum => Orientation::LowerIsMoreImportant,
            _ => Orientation::HigherIsMoreImportant,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ImportanceMethod::El2n => "el2n",
            ImportanceMethod::Entropy => "entropy",
            ImportanceMethod::Variance => "variance",
            ImportanceMethod::Aum => "aum",
        }
    }

    pub fn score(self, r: &DynamicsRecord) -> Result<f64> {
        match self {
            ImportanceMethod::El2n => Ok(el2n(r)),
            ImportanceMethod::Entropy => Ok(entropy_score(r)),
            ImportanceMethod::Variance => variance_score(r),
            ImportanceMethod::Aum => aum(r),
        }
    }
}

impl std::str::FromStr for ImportanceMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "el2n" => Ok(Self::El2n),
            "entropy" => Ok(Self::Entropy),
            "variance" => Ok(Self::Variance),
            "aum" => Ok(Self::Aum),
            other => Err(Error::invalid(format!("unknown importance method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    HigherIsMoreImportant,
    LowerIsMoreImportant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceRecord {
    pub sample_id: String,
    pub method: ImportanceMethod,
    pub value: f64,
    pub orientation: Orientation,
}

/// Scores every record with `method`, using its default orientation unless
/// overridden.
pub fn score_records<'a>(
    records: impl IntoIterator<Item = &'a DynamicsRecord>,
    method: ImportanceMethod,
    orientation: Option<Orientation>,
) -> Result<Vec<ImportanceRecord>> {
    let orientation = orientation.unwrap_or(method.default_orientation());
    records
        .into_iter()
        .map(|r| {
            Ok(ImportanceRecord {
                sample_id: r.sample_id.clone(),
                method,
                value: method.score(r)?,
                orientation,
            })
        })
        .collect()
}

fn check_scores(scores: &[ImportanceRecord]) -> Result<()> {
    let Some(first) = scores.first() else {
        return Ok(());
    };
    let mut ids = HashSet::with_capacity(scores.len());
    for s in scores {
        if s.method != first.method || s.orientation != first.orientation {
            return Err(Error::invalid("importance records mix methods or orientations"));
        }
        if !s.value.is_finite() {
            return Err(Error::NonFinite);
        }
        if !ids.insert(s.sample_id.as_str()) {
            return Err(Error::DuplicateId(s.sample_id.clone()));
        }
    }
    Ok(())
}

fn ranked_records(scores: &[ImportanceRecord]) -> Result<Vec<&ImportanceRecord>> {
    check_scores(scores)?;
    let mut sorted: Vec<&ImportanceRecord> = scores.iter().collect();
    sorted.sort_by(|a, b| {
        let by_value = match a.orientation {
            Orientation::HigherIsMoreImportant => b.value.total_cmp(&a.value),
            Orientation::LowerIsMoreImportant => a.value.total_cmp(&b.value),
        };
        by_value.then_with(|| a.sample_id.cmp(&b.sample_id))
    });
    Ok(sorted)
}

/// Sample ids, most important first; ties broken by id ascending.
pub fn rank_samples(scores: &[ImportanceRecord]) -> Result<Vec<String>> {
    Ok(ranked_records(scores)?
        .into_iter()
        .map(|r| r.sample_id.clone())
        .collect())
}

/// The first `budget` ids of a ranking.
pub fn monotonic_select(ranked: &[String], budget: usize) -> Result<Vec<String>> {
    if budget > ranked.len() {
        return Err(Error::invalid(format!(
            "budget {budget} exceeds {} ranked samples",
            ranked.len()
        )));
    }
    Ok(ranked[..budget].to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CcsParams {
    pub bins: usize,
    pub hard_prune_fraction: f64,
}

impl Default for CcsParams {
    fn default() -> Self {
        Self {
            bins: 50,
            hard_prune_fraction: 0.1,
        }
    }
}

/// Per-stratum quotas: strata are visited from smallest to largest, each
/// taking an even share of what is left, so surplus from small strata flows
/// to the larger ones.
fn allocate(sizes: &[usize], budget: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by_key(|&i| (sizes[i], i));
    let mut quota = vec![0; sizes.len()];
    let mut remaining = budget;
    for (k, &i) in order.iter().enumerate() {
        let share = remaining / (order.len() - k);
        quota[i] = sizes[i].min(share);
        remaining -= quota[i];
    }
    quota
}

/// Coverage-centric selection.
///
/// Drops the hardest `hard_prune_fraction` of samples, buckets the rest into
/// `bins` equal-width score strata, and samples each stratum uniformly
/// without replacement. Returns exactly `budget` ids in ranking order.
pub fn ccs_select(
    scores: &[ImportanceRecord],
    budget: usize,
    params: CcsParams,
    seed: u64,
) -> Result<Vec<String>> {
    if params.bins == 0 {
        return Err(Error::invalid("CCS needs at least one bin"));
    }
    if !(0.0..1.0).contains(&params.hard_prune_fraction) {
        return Err(Error::invalid("hard_prune_fraction must lie in [0, 1)"));
    }
    let ranked = ranked_records(scores)?;
    let hard = (ranked.len() as f64 * params.hard_prune_fraction).floor() as usize;
    let pool = &ranked[hard..];
    if budget > pool.len() {
        return Err(Error::invalid(format!(
            "budget {budget} exceeds {} samples left after hard pruning",
            pool.len()
        )));
    }
    if budget == 0 {
        return Ok(Vec::new());
    }

    let lo = pool.iter().map(|r| r.value).fold(f64::INFINITY, f64::min);
    let hi = pool.iter().map(|r| r.value).fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / params.bins as f64;
    let mut strata: Vec<Vec<usize>> = vec![Vec::new(); params.bins];
    for (pos, r) in pool.iter().enumerate() {
        let bin = if width > 0.0 {
            (((r.value - lo) / width).floor() as usize).min(params.bins - 1)
        } else {
            0
        };
        strata[bin].push(pos);
    }

    let sizes: Vec<usize> = strata.iter().map(Vec::len).collect();
    let quota = allocate(&sizes, budget);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![false; pool.len()];
    for (members, &take) in strata.iter().zip(&quota) {
        if take == 0 {
            continue;
        }
        for k in rand::seq::index::sample(&mut rng, members.len(), take) {
            chosen[members[k]] = true;
        }
    }
    Ok(pool
        .iter()
        .zip(chosen)
        .filter(|(_, c)| *c)
        .map(|(r, _)| r.sample_id.clone())
        .collect())
}

/// Relative weights of the augment, retain and prune tiers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatio {
    pub augment: f64,
    pub retain: f64,
    pub prune: f64,
}

impl Default for SplitRatio {
    fn default() -> Self {
        Self {
            augment: 1.0,
            retain: 1.0,
            prune: 1.0,
        }
    }
}

impl SplitRatio {
    pub fn validate(&self) -> Result<()> {
        let ok = |w: f64| w.is_finite() && w > 0.0;
        if ok(self.augment) && ok(self.retain) && ok(self.prune) {
            Ok(())
        } else {
            Err(Error::invalid(format!("split weights must be positive, got {self}")))
        }
    }

    /// Tier sizes for `n` samples; the rounding residue goes to retain.
    pub fn sizes(&self, n: usize) -> Result<(usize, usize, usize)> {
        self.validate()?;
        if n < 3 {
            return Err(Error::invalid(format!("cannot split {n} samples into three tiers")));
        }
        let total = self.augment + self.retain + self.prune;
        let augment = (n as f64 * self.augment / total).round() as usize;
        let prune = ((n as f64 * self.prune / total).round() as usize).min(n - augment);
        Ok((augment, n - augment - prune, prune))
    }
}

impl std::fmt::Display for SplitRatio {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}:{}", self.augment, self.retain, self.prune)
    }
}

impl std::str::FromStr for SplitRatio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(':')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::invalid(format!("bad ratio `{s}`, expected a:r:p")))?;
        let [augment, retain, prune] = parts[..] else {
            return Err(Error::invalid(format!("bad ratio `{s}`, expected a:r:p")));
        };
        let ratio = Self {
            augment,
            retain,
            prune,
        };
        ratio.validate()?;
        Ok(ratio)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CoresetSplit {
    pub augment: Vec<String>,
    pub retain: Vec<String>,
    pub prune: Vec<String>,
}

impl CoresetSplit {
    pub fn len(&self) -> usize {
        self.augment.len() + self.retain.len() + self.prune.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Cuts a ranking into contiguous augment / retain / prune segments.
pub fn hierarchical_split(ranked: &[String], ratio: SplitRatio) -> Result<CoresetSplit> {
    let (a, r, _) = ratio.sizes(ranked.len())?;
    Ok(CoresetSplit {
        augment: ranked[..a].to_vec(),
        retain: ranked[a..a + r].to_vec(),
        prune: ranked[a + r..].to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SelectionStrategy {
    Monotonic,
    Ccs(CcsParams),
}

impl Default for SelectionStrategy {
    fn default() -> Self {
        SelectionStrategy::Monotonic
    }
}

/// Builds the three tiers under a selection strategy.
///
/// With CCS the augment tier is drawn by coverage-centric sampling; the
/// remaining samples keep their ranking order and fill retain, then prune.
/// Tier sizes are the same under both strategies.
pub fn select_split(
    scores: &[ImportanceRecord],
    strategy: SelectionStrategy,
    ratio: SplitRatio,
    seed: u64,
) -> Result<CoresetSplit> {
    let ranked = rank_samples(scores)?;
    match strategy {
        SelectionStrategy::Monotonic => hierarchical_split(&ranked, ratio),
        SelectionStrategy::Ccs(params) => {
            let (a, r, _) = ratio.sizes(ranked.len())?;
            let augment = ccs_select(scores, a, params, seed)?;
            let picked: HashSet<&str> = augment.iter().map(String::as_str).collect();
            let rest: Vec<String> = ranked
                .into_iter()
                .filter(|id| !picked.contains(id.as_str()))
                .collect();
            Ok(CoresetSplit {
                augment,
                retain: rest[..r].to_vec(),
                prune: rest[r..].to_vec(),
            })
        }
    }
}

/// On-disk split document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitFile {
    pub augment: Vec<String>,
    pub retain: Vec<String>,
    pub prune: Vec<String>,
    pub method: ImportanceMethod,
    pub strategy: SelectionStrategy,
    pub ratio: SplitRatio,
    pub seed: u64,
}

impl SplitFile {
    pub fn new(
        split: CoresetSplit,
        method: ImportanceMethod,
        strategy: SelectionStrategy,
        ratio: SplitRatio,
        seed: u64,
    ) -> Self {
        Self {
            augment: split.augment,
            retain: split.retain,
            prune: split.prune,
            method,
            strategy,
            ratio,
            seed,
        }
    }
}

/// Lookup from sample id to its position in a ranking.
pub fn rank_positions(ranked: &[String]) -> HashMap<&str, usize> {
    ranked.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect()
}

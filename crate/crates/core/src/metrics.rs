//! Embedding-space diversity metrics, affinity, and report tables.
//!
//! Distance, Dispersion, Radius and Homogeneity are computed per class and
//! averaged over classes; Vocabulary and 3-grams are dataset-wide lexical
//! counts. Pairwise means divide by the number of unordered pairs.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize, Serializer};

use crate::corpus::{unique_ngrams, vocabulary_size, Dataset, TokenPolicy};
use crate::embedding::{cosine_dissimilarity, euclidean_distance, EmbeddingVector};
use crate::error::{Error, Result};

/// Neumaier-compensated running sum.
#[derive(Debug, Default, Clone, Copy)]
pub struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn total(&self) -> f64 {
        self.sum + self.carry
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedSample {
    pub id: String,
    pub label: String,
    pub vector: EmbeddingVector,
}

/// Labeled embeddings sharing one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedDataset {
    entries: Vec<EmbeddedSample>,
    dim: usize,
}

impl EmbeddedDataset {
    pub fn new(entries: Vec<EmbeddedSample>) -> Result<Self> {
        let first = entries
            .first()
            .ok_or_else(|| Error::EmptyDataset("embedded dataset".into()))?;
        let dim = first.vector.dim();
        let mut ids = HashSet::with_capacity(entries.len());
        for e in &entries {
            if e.vector.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: e.vector.dim(),
                });
            }
            if !ids.insert(e.id.as_str()) {
                return Err(Error::DuplicateId(e.id.clone()));
            }
        }
        Ok(Self { entries, dim })
    }

    /// Pairs each sample of `dataset` with the vector at the same position.
    pub fn from_dataset(dataset: &Dataset, vectors: Vec<EmbeddingVector>) -> Result<Self> {
        if vectors.len() != dataset.len() {
            return Err(Error::invalid(format!(
                "{} vectors for {} samples",
                vectors.len(),
                dataset.len()
            )));
        }
        Self::new(
            dataset
                .samples()
                .iter()
                .zip(vectors)
                .map(|(s, vector)| EmbeddedSample {
                    id: s.id.clone(),
                    label: s.label.clone(),
                    vector,
                })
                .collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[EmbeddedSample] {
        &self.entries
    }

    /// Vectors grouped by label, classes in first-seen order.
    pub fn by_class(&self) -> IndexMap<&str, Vec<EmbeddingVector>> {
        let mut out: IndexMap<&str, Vec<EmbeddingVector>> = IndexMap::new();
        for e in &self.entries {
            out.entry(e.label.as_str()).or_default().push(e.vector.clone());
        }
        out
    }
}

fn pairwise_mean(
    vectors: &[EmbeddingVector],
    kernel: fn(&EmbeddingVector, &EmbeddingVector) -> Result<f64>,
) -> Result<f64> {
    let n = vectors.len();
    if n < 2 {
        return Ok(0.0);
    }
    let mut acc = CompensatedSum::default();
    for i in 0..n {
        for j in (i + 1)..n {
            acc.add(kernel(&vectors[i], &vectors[j])?);
        }
    }
    Ok(acc.total() / (n * (n - 1) / 2) as f64)
}

/// Mean Euclidean distance over unordered distinct pairs; 0 below two points.
pub fn distance_metric(class_vectors: &[EmbeddingVector]) -> Result<f64> {
    pairwise_mean(class_vectors, euclidean_distance)
}

/// Mean cosine dissimilarity over unordered distinct pairs; 0 below two points.
pub fn dispersion_metric(class_vectors: &[EmbeddingVector]) -> Result<f64> {
    pairwise_mean(class_vectors, cosine_dissimilarity)
}

/// Geometric mean of per-axis population standard deviations.
pub fn isocontour_radius(class_vectors: &[EmbeddingVector]) -> Result<f64> {
    let n = class_vectors.len();
    if n < 2 {
        return Err(Error::InsufficientSamples {
            metric: "Radius",
            needed: 2,
            got: n,
        });
    }
    let dim = class_vectors[0].dim();
    let mut log_sigma = CompensatedSum::default();
    for axis in 0..dim {
        let mut mean = CompensatedSum::default();
        for v in class_vectors {
            if v.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: v.dim(),
                });
            }
            mean.add(v.as_slice()[axis]);
        }
        let mean = mean.total() / n as f64;
        let mut var = CompensatedSum::default();
        for v in class_vectors {
            let d = v.as_slice()[axis] - mean;
            var.add(d * d);
        }
        let sigma = (var.total() / n as f64).sqrt();
        if sigma == 0.0 {
            return Ok(0.0);
        }
        log_sigma.add(sigma.ln());
    }
    Ok((log_sigma.total() / dim as f64).exp())
}

/// Homogeneity plus what was done to the input to compute it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HomogeneityDetail {
    pub value: f64,
    /// Exact duplicate points merged before building the chain.
    pub merged_duplicates: usize,
}

fn dedup(vectors: &[EmbeddingVector]) -> Vec<&EmbeddingVector> {
    let mut seen = HashSet::new();
    vectors
        .iter()
        .filter(|v| seen.insert(v.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>()))
        .collect()
}

/// Normalized entropy of the distance-weighted Markov chain over the points.
///
/// Edge weights are `d(i, j)^ln(H)` with `H` the embedding dimension, the
/// stationary distribution is taken as uniform, and the entropy is divided by
/// its upper bound `ln(n - 1)`. Exact duplicates are merged first.
pub fn homogeneity_detail(class_vectors: &[EmbeddingVector]) -> Result<HomogeneityDetail> {
    let points = dedup(class_vectors);
    let n = points.len();
    if n < 3 {
        return Err(Error::InsufficientSamples {
            metric: "Homogeneity",
            needed: 3,
            got: n,
        });
    }
    let exponent = (points[0].dim() as f64).ln();
    let mut entropy = CompensatedSum::default();
    let mut log_w = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let d = euclidean_distance(points[i], points[j])?;
            if d == 0.0 {
                return Err(Error::invalid("zero-weight row in homogeneity chain"));
            }
            log_w[j] = exponent * d.ln();
        }
        let peak = (0..n)
            .filter(|&j| j != i)
            .map(|j| log_w[j])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut z = CompensatedSum::default();
        for j in (0..n).filter(|&j| j != i) {
            z.add((log_w[j] - peak).exp());
        }
        let log_z = z.total().ln();
        let mut row = CompensatedSum::default();
        for j in (0..n).filter(|&j| j != i) {
            let log_p = log_w[j] - peak - log_z;
            row.add(-log_p.exp() * log_p);
        }
        entropy.add(row.total());
    }
    let entropy = entropy.total() / n as f64;
    Ok(HomogeneityDetail {
        value: (entropy / ((n - 1) as f64).ln()).clamp(0.0, 1.0),
        merged_duplicates: class_vectors.len() - n,
    })
}

pub fn homogeneity(class_vectors: &[EmbeddingVector]) -> Result<f64> {
    homogeneity_detail(class_vectors).map(|h| h.value)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClasswiseOutcome {
    pub mean: f64,
    pub per_class: IndexMap<String, f64>,
    /// Classes too small for the metric.
    pub skipped: Vec<String>,
}

/// Applies `metric` to every class and averages the classes it accepts.
///
/// Classes failing with [`Error::InsufficientSamples`] are skipped; any other
/// error propagates.
pub fn classwise<F>(metric_name: &str, metric: F, ds: &EmbeddedDataset) -> Result<ClasswiseOutcome>
where
    F: Fn(&[EmbeddingVector]) -> Result<f64>,
{
    let mut per_class = IndexMap::new();
    let mut skipped = Vec::new();
    for (label, vectors) in ds.by_class() {
        match metric(&vectors) {
            Ok(v) => {
                per_class.insert(label.to_string(), v);
            }
            Err(Error::InsufficientSamples { needed, got, .. }) => {
                log::warn!("{metric_name}: class `{label}` skipped ({got} usable points, needs {needed})");
                skipped.push(label.to_string());
            }
            Err(e) => return Err(e),
        }
    }
    if per_class.is_empty() {
        return Err(Error::NoComputableClass(metric_name.to_string()));
    }
    let mean = per_class.values().sum::<f64>() / per_class.len() as f64;
    Ok(ClasswiseOutcome {
        mean,
        per_class,
        skipped,
    })
}

pub fn classwise_average<F>(metric: F, ds: &EmbeddedDataset) -> Result<f64>
where
    F: Fn(&[EmbeddingVector]) -> Result<f64>,
{
    classwise("metric", metric, ds).map(|o| o.mean)
}

/// Reciprocal mean deviation of class centers, or an exact match.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Affinity {
    Value(f64),
    /// Class centers coincide exactly.
    Exact,
}

impl Serialize for Affinity {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Affinity::Value(v) => s.serialize_f64(*v),
            Affinity::Exact => s.serialize_str("exact"),
        }
    }
}

impl<'de> Deserialize<'de> for Affinity {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Wire {
            Value(f64),
            Tag(String),
        }
        match Wire::deserialize(d)? {
            Wire::Value(v) => Ok(Affinity::Value(v)),
            Wire::Tag(t) if t == "exact" => Ok(Affinity::Exact),
            Wire::Tag(t) => Err(serde::de::Error::custom(format!("unknown affinity `{t}`"))),
        }
    }
}

impl std::fmt::Display for Affinity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Affinity::Value(v) => write!(f, "{v:.6}"),
            Affinity::Exact => f.write_str("exact"),
        }
    }
}

fn centroid(vectors: &[EmbeddingVector]) -> Vec<f64> {
    let dim = vectors[0].dim();
    let n = vectors.len() as f64;
    (0..dim)
        .map(|axis| {
            let mut acc = CompensatedSum::default();
            for v in vectors {
                acc.add(v.as_slice()[axis]);
            }
            acc.total() / n
        })
        .collect()
}

pub fn affinity(augmented: &EmbeddedDataset, original: &EmbeddedDataset) -> Result<Affinity> {
    if augmented.dim() != original.dim() {
        return Err(Error::DimensionMismatch {
            expected: original.dim(),
            actual: augmented.dim(),
        });
    }
    let aug = augmented.by_class();
    let orig = original.by_class();
    for label in aug.keys() {
        if !orig.contains_key(label) {
            return Err(Error::invalid(format!("class `{label}` absent from original dataset")));
        }
    }
    let mut total = CompensatedSum::default();
    for (label, orig_vectors) in &orig {
        let aug_vectors = aug
            .get(label)
            .ok_or_else(|| Error::invalid(format!("class `{label}` absent from augmented dataset")))?;
        let (a, o) = (centroid(aug_vectors), centroid(orig_vectors));
        let dev = a.iter().zip(&o).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        total.add(dev);
    }
    let mean_dev = total.total() / orig.len() as f64;
    Ok(if mean_dev == 0.0 {
        Affinity::Exact
    } else {
        Affinity::Value(1.0 / mean_dev)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Metric {
    Distance,
    Dispersion,
    Radius,
    Homogeneity,
    Vocabulary,
    Trigrams,
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::Distance,
        Metric::Dispersion,
        Metric::Radius,
        Metric::Homogeneity,
        Metric::Vocabulary,
        Metric::Trigrams,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Distance => "Distance",
            Metric::Dispersion => "Dispersion",
            Metric::Radius => "Radius",
            Metric::Homogeneity => "Homogeneity",
            Metric::Vocabulary => "Vocabulary",
            Metric::Trigrams => "3-grams",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub dataset_name: String,
    pub per_metric: IndexMap<String, f64>,
    /// metric name -> label -> value
    #[serde(default)]
    pub per_class: IndexMap<String, IndexMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl DiversityReport {
    pub fn get(&self, metric: Metric) -> Option<f64> {
        self.per_metric.get(metric.as_str()).copied()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{}\n", self.dataset_name);
        for (k, v) in &self.per_metric {
            let _ = writeln!(out, "  {k:<12} {v:>14.6}");
        }
        for w in &self.warnings {
            let _ = writeln!(out, "  warning: {w}");
        }
        out
    }
}

/// The six diversity metrics for one dataset.
///
/// A class-wise metric with no computable class is reported as 0 with a
/// warning so that degenerate datasets still produce a full report.
pub fn diversity_report(
    ds: &EmbeddedDataset,
    corpus: &Dataset,
    policy: &TokenPolicy,
) -> Result<DiversityReport> {
    let emb_ids: HashSet<&str> = ds.entries().iter().map(|e| e.id.as_str()).collect();
    let corpus_ids: HashSet<&str> = corpus.samples().iter().map(|s| s.id.as_str()).collect();
    if emb_ids != corpus_ids {
        return Err(Error::invalid(format!(
            "embedded dataset and corpus `{}` cover different sample ids",
            corpus.name()
        )));
    }

    let mut report = DiversityReport {
        dataset_name: corpus.name().to_string(),
        per_metric: IndexMap::new(),
        per_class: IndexMap::new(),
        warnings: Vec::new(),
    };
    if ds.dim() == 1 {
        report
            .warnings
            .push("embedding dimension is 1: Homogeneity edge weights are all 1".into());
    }

    let merged = std::cell::Cell::new(0usize);
    let homogeneity_counting = |v: &[EmbeddingVector]| {
        homogeneity_detail(v).map(|h| {
            merged.set(merged.get() + h.merged_duplicates);
            h.value
        })
    };
    let classwise_metrics: [(Metric, &dyn Fn(&[EmbeddingVector]) -> Result<f64>); 4] = [
        (Metric::Distance, &distance_metric),
        (Metric::Dispersion, &dispersion_metric),
        (Metric::Radius, &isocontour_radius),
        (Metric::Homogeneity, &homogeneity_counting),
    ];
    for (metric, f) in classwise_metrics {
        let name = metric.as_str();
        match classwise(name, f, ds) {
            Ok(outcome) => {
                for label in &outcome.skipped {
                    report.warnings.push(format!("{name}: class `{label}` skipped (too few distinct points)"));
                }
                report.per_metric.insert(name.into(), outcome.mean);
                report.per_class.insert(name.into(), outcome.per_class);
            }
            Err(Error::NoComputableClass(_)) => {
                report.warnings.push(format!("{name}: no class has enough distinct points; reported as 0"));
                report.per_metric.insert(name.into(), 0.0);
                report.per_class.insert(name.into(), IndexMap::new());
            }
            Err(e) => return Err(e),
        }
    }
    if merged.get() > 0 {
        report.warnings.push(format!(
            "Homogeneity: merged {} exact duplicate embedding(s)",
            merged.get()
        ));
    }
    report
        .per_metric
        .insert(Metric::Vocabulary.as_str().into(), vocabulary_size(corpus, policy) as f64);
    report
        .per_metric
        .insert(Metric::Trigrams.as_str().into(), unique_ngrams(corpus, 3, policy)? as f64);
    Ok(report)
}

/// Element-wise `augmented - original` over the metric keys.
pub fn diversity_gain(
    original: &DiversityReport,
    augmented: &DiversityReport,
) -> Result<IndexMap<String, f64>> {
    let okeys: HashSet<&String> = original.per_metric.keys().collect();
    let akeys: HashSet<&String> = augmented.per_metric.keys().collect();
    if okeys != akeys {
        let mut diff: Vec<&String> = okeys.symmetric_difference(&akeys).copied().collect();
        diff.sort();
        return Err(Error::invalid(format!("report metric keys differ: {diff:?}")));
    }
    Ok(original
        .per_metric
        .iter()
        .map(|(k, v)| (k.clone(), augmented.per_metric[k] - v))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedRow {
    pub dataset: String,
    pub values: IndexMap<String, f64>,
    #[serde(rename = "Average")]
    pub average: f64,
}

/// Min-max normalized metric table across datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedTable {
    pub metrics: Vec<String>,
    pub rows: Vec<NormalizedRow>,
}

impl NormalizedTable {
    pub fn row(&self, dataset: &str) -> Option<&NormalizedRow> {
        self.rows.iter().find(|r| r.dataset == dataset)
    }

    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.dataset.len()).max().unwrap_or(0).max(7);
        let mut out = format!("{:<width$}", "");
        for m in &self.metrics {
            let _ = write!(out, " {m:>11}");
        }
        let _ = writeln!(out, " {:>11}", "Average");
        for r in &self.rows {
            let _ = write!(out, "{:<width$}", r.dataset);
            for m in &self.metrics {
                let _ = write!(out, " {:>11.2}", r.values[m]);
            }
            let _ = writeln!(out, " {:>11.2}", r.average);
        }
        out
    }
}

/// Min-max normalizes each metric column to `[0, 1]`; constant columns
/// become all zeros. `Average` is the row mean of the normalized values.
pub fn normalize_reports(reports: &[DiversityReport]) -> Result<NormalizedTable> {
    if reports.len() < 2 {
        return Err(Error::invalid("normalization needs at least two reports"));
    }
    let metrics: Vec<String> = reports[0].per_metric.keys().cloned().collect();
    let wanted: HashSet<&String> = metrics.iter().collect();
    for r in &reports[1..] {
        if r.per_metric.keys().collect::<HashSet<_>>() != wanted {
            return Err(Error::invalid(format!(
                "report `{}` has different metric keys from `{}`",
                r.dataset_name, reports[0].dataset_name
            )));
        }
    }
    let mut ranges: HashMap<&str, (f64, f64)> = HashMap::new();
    for m in &metrics {
        let col = reports.iter().map(|r| r.per_metric[m]);
        let lo = col.clone().fold(f64::INFINITY, f64::min);
        let hi = col.fold(f64::NEG_INFINITY, f64::max);
        ranges.insert(m, (lo, hi));
    }
    let rows = reports
        .iter()
        .map(|r| {
            let values: IndexMap<String, f64> = metrics
                .iter()
                .map(|m| {
                    let (lo, hi) = ranges[m.as_str()];
                    let v = if hi > lo { (r.per_metric[m] - lo) / (hi - lo) } else { 0.0 };
                    (m.clone(), v)
                })
                .collect();
            let average = values.values().sum::<f64>() / values.len().max(1) as f64;
            NormalizedRow {
                dataset: r.dataset_name.clone(),
                values,
                average,
            }
        })
        .collect();
    Ok(NormalizedTable { metrics, rows })
}

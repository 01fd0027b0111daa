//! Embedding vectors, the distance kernels built on them, and the providers
//! and cache that produce them.

mod cache;
mod provider;

pub use cache::{cache_key, EmbeddingCache};
pub use provider::{
    embed_batch, text_hash, write_vectors, Embedder, EmbeddingBackend, EmbeddingProviderConfig,
    HashEmbedder, HttpEmbedder, PrecomputedVectors, TextEmbedder, VectorRecord,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A finite, fixed-dimension embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        if values.is_empty() {
            return Err(Error::invalid("embedding vector has zero dimension"));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.0.iter().map(|v| v * factor).collect())
    }
}

impl TryFrom<Vec<f64>> for EmbeddingVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(v: EmbeddingVector) -> Self {
        v.0
    }
}

fn check_dims(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    Ok(())
}

pub fn euclidean_distance(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    check_dims(a, b)?;
    Ok(a.0
        .iter()
        .zip(&b.0)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

/// `1 - cos(a, b)`, in `[0, 2]`.
pub fn cosine_dissimilarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    check_dims(a, b)?;
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    let cos = (dot / (na * nb)).clamp(-1.0, 1.0);
    Ok(1.0 - cos)
}

/// Distance measure used to compare paraphrases with their source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMeasure {
    #[default]
    Euclidean,
    Cosine,
}

impl DistanceMeasure {
    pub fn distance(self, a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
        match self {
            DistanceMeasure::Euclidean => euclidean_distance(a, b),
            DistanceMeasure::Cosine => cosine_dissimilarity(a, b),
        }
    }
}

impl std::str::FromStr for DistanceMeasure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Self::Euclidean),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::invalid(format!("unknown distance measure `{other}`"))),
        }
    }
}

/// Pearson correlation coefficient of two equally long samples.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::DimensionMismatch {
            expected: xs.len(),
            actual: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(Error::InsufficientSamples {
            metric: "pearson",
            needed: 2,
            got: xs.len(),
        });
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::invalid("pearson correlation undefined for a constant sample"));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Correlation between the Euclidean and cosine measures over
/// (source, paraphrase) embedding pairs.
pub fn measure_correlation(pairs: &[(EmbeddingVector, EmbeddingVector)]) -> Result<f64> {
    let mut eu = Vec::with_capacity(pairs.len());
    let mut co = Vec::with_capacity(pairs.len());
    for (src, para) in pairs {
        eu.push(euclidean_distance(src, para)?);
        co.push(cosine_dissimilarity(src, para)?);
    }
    pearson(&eu, &co)
}

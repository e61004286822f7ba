//! Embedding-based similarity: greedy-match token F1 (BERTScore core without
//! IDF weighting or baseline rescaling) and sentence cosine, combined into the
//! raw semantic reward.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::text_metrics::tokenize;
use crate::util::fnv1a64;

const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SemanticError {
    #[error("embedding dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("embedding matrix has no rows")]
    EmptyMatrix,
    #[error("embedding has zero dimensions")]
    ZeroDimension,
    #[error("expected {expected} values for the declared shape, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },
    #[error("embedding contains a non-finite value")]
    NonFinite,
    #[error("row {row} is not unit-normalized (norm {norm})")]
    NotNormalized { row: usize, norm: f64 },
    #[error("zero-norm vector")]
    ZeroNorm,
    #[error("weight lambda2 must lie in [0, 1], got {0}")]
    InvalidWeight(f64),
}

/// Row-major matrix of token embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    values: Vec<f64>,
    normalized: bool,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, dim: usize, values: Vec<f64>) -> Result<Self, SemanticError> {
        if rows == 0 {
            return Err(SemanticError::EmptyMatrix);
        }
        if dim == 0 {
            return Err(SemanticError::ZeroDimension);
        }
        if values.len() != rows * dim {
            return Err(SemanticError::ShapeMismatch {
                expected: rows * dim,
                actual: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(SemanticError::NonFinite);
        }
        Ok(Self {
            rows,
            dim,
            values,
            normalized: false,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, SemanticError> {
        let first = rows.first().ok_or(SemanticError::EmptyMatrix)?;
        let dim = first.len();
        let mut values = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(SemanticError::DimensionMismatch {
                    left: dim,
                    right: r.len(),
                });
            }
            values.extend_from_slice(r);
        }
        Self::new(rows.len(), dim, values)
    }

    /// Scales every row to unit L2 norm.
    pub fn normalize(mut self) -> Result<Self, SemanticError> {
        let dim = self.dim;
        for row in self.values.chunks_mut(dim) {
            let norm = l2(row);
            if norm == 0.0 {
                return Err(SemanticError::ZeroNorm);
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        self.normalized = true;
        Ok(self)
    }

    /// Marks the matrix as normalized after checking every row norm is 1 ± 1e-6.
    pub fn assume_normalized(mut self) -> Result<Self, SemanticError> {
        for (row, values) in self.values.chunks(self.dim).enumerate() {
            let norm = l2(values);
            if (norm - 1.0).abs() > NORM_TOLERANCE {
                return Err(SemanticError::NotNormalized { row, norm });
            }
        }
        self.normalized = true;
        Ok(self)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.dim)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Whole-answer embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceVector(Vec<f64>);

impl SentenceVector {
    pub fn new(values: Vec<f64>) -> Result<Self, SemanticError> {
        if values.is_empty() {
            return Err(SemanticError::ZeroDimension);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(SemanticError::NonFinite);
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        l2(&self.0)
    }

    pub fn normalized(&self) -> Result<Self, SemanticError> {
        let n = self.norm();
        if n == 0.0 {
            return Err(SemanticError::ZeroNorm);
        }
        Ok(Self(self.0.iter().map(|v| v / n).collect()))
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SemanticScores {
    pub bert_f1: f64,
    pub cos_sim: f64,
    /// `lambda2 * bert_f1 + (1 - lambda2) * cos_sim`
    pub r_s: f64,
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Clamped dot product of unit vectors. Identical rows give exactly 1 rather
/// than a value an ulp or two away from it.
fn unit_cosine(a: &[f64], b: &[f64]) -> f64 {
    if a == b {
        1.0
    } else {
        dot(a, b).clamp(0.0, 1.0)
    }
}

/// Greedy-match token F1 over unit-normalized token embeddings.
///
/// Each candidate token is matched to its most similar reference token
/// (precision) and vice versa (recall). Cosines are clamped at zero first, so
/// the result lies in [0, 1].
pub fn bertscore_f1(cand: &EmbeddingMatrix, reference: &EmbeddingMatrix) -> Result<f64, SemanticError> {
    if cand.dim != reference.dim {
        return Err(SemanticError::DimensionMismatch {
            left: cand.dim,
            right: reference.dim,
        });
    }
    for m in [cand, reference] {
        if !m.normalized {
            let norm = l2(m.row(0));
            return Err(SemanticError::NotNormalized { row: 0, norm });
        }
    }

    // similarity[i][j] between candidate row i and reference row j
    let sim: Vec<Vec<f64>> = cand
        .iter_rows()
        .map(|c| reference.iter_rows().map(|r| unit_cosine(c, r)).collect())
        .collect();

    let precision = sim
        .iter()
        .map(|row| row.iter().copied().fold(0.0, f64::max))
        .sum::<f64>()
        / cand.rows as f64;
    let recall = (0..reference.rows)
        .map(|j| sim.iter().map(|row| row[j]).fold(0.0, f64::max))
        .sum::<f64>()
        / reference.rows as f64;

    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok((2.0 * precision * recall / (precision + recall)).clamp(0.0, 1.0))
}

/// Cosine similarity clamped to [0, 1].
pub fn cosine_similarity(a: &SentenceVector, b: &SentenceVector) -> Result<f64, SemanticError> {
    if a.dim() != b.dim() {
        return Err(SemanticError::DimensionMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(SemanticError::ZeroNorm);
    }
    if a.0 == b.0 {
        return Ok(1.0);
    }
    Ok((dot(&a.0, &b.0) / (na * nb)).clamp(0.0, 1.0))
}

/// Blends two precomputed sub-scores into the raw semantic reward.
pub fn combine_semantic(bert_f1: f64, cos_sim: f64, lambda2: f64) -> Result<SemanticScores, SemanticError> {
    if !(0.0..=1.0).contains(&lambda2) {
        return Err(SemanticError::InvalidWeight(lambda2));
    }
    Ok(SemanticScores {
        bert_f1,
        cos_sim,
        r_s: lambda2 * bert_f1 + (1.0 - lambda2) * cos_sim,
    })
}

pub fn raw_semantic(
    cand_tokens: &EmbeddingMatrix,
    ref_tokens: &EmbeddingMatrix,
    cand_sent: &SentenceVector,
    ref_sent: &SentenceVector,
    lambda2: f64,
) -> Result<SemanticScores, SemanticError> {
    if !(0.0..=1.0).contains(&lambda2) {
        return Err(SemanticError::InvalidWeight(lambda2));
    }
    let bert = bertscore_f1(cand_tokens, ref_tokens)?;
    let cos = cosine_similarity(cand_sent, ref_sent)?;
    combine_semantic(bert, cos, lambda2)
}

fn mock_token_vector(token: &str, dim: usize, seed: u64) -> Vec<f64> {
    let h = fnv1a64(&[&seed.to_le_bytes(), token.as_bytes()]);
    let mut rng = ChaCha8Rng::seed_from_u64(h);
    let mut v: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
    // entries are nonnegative, so the norm is zero only with probability 0;
    // guard anyway so the output is always a unit vector
    if l2(&v) == 0.0 {
        v[0] = 1.0;
    }
    let n = l2(&v);
    v.iter_mut().for_each(|x| *x /= n);
    v
}

/// Deterministic stand-in embedder.
///
/// Each token maps to a unit vector drawn from a generator seeded by
/// `(seed, token)`; entries are nonnegative, so unrelated tokens still have a
/// fairly high cosine, much like real encoders. The sentence vector is the
/// normalized mean of the token vectors. Text without tokens is embedded as a
/// single empty-string token.
pub fn mock_embed(text: &str, dim: usize, seed: u64) -> (EmbeddingMatrix, SentenceVector) {
    assert!(dim >= 2, "mock embedding dimension must be at least 2");
    let tokens = tokenize(text);
    let rows: Vec<Vec<f64>> = if tokens.is_empty() {
        vec![mock_token_vector("", dim, seed)]
    } else {
        tokens
            .tokens()
            .iter()
            .map(|t| mock_token_vector(t, dim, seed))
            .collect()
    };

    let mut mean = vec![0.0; dim];
    for r in &rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    let n = l2(&mean);
    mean.iter_mut().for_each(|x| *x /= n);

    let matrix = EmbeddingMatrix::from_rows(&rows)
        .and_then(EmbeddingMatrix::assume_normalized)
        .expect("mock rows are finite unit vectors");
    (matrix, SentenceVector(mean))
}

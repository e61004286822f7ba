//! Evaluation: the hybrid semantic score, multiple-choice accuracy and
//! reward-collapse diagnostics, plus dataset ingestion and refinement-record
//! validation.

mod dataset;
mod refine;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{EmbedError, Embedder};
use crate::semantic::{bertscore_f1, cosine_similarity, SemanticError};
use crate::text_metrics::{bleu1, rouge1_f, tokenize};
use crate::util::{mean, population_variance};

pub use dataset::{ingest_dataset, DatasetError, DatasetFormat, QaReader};
pub use refine::{validate_refinement, RefineError, RefinementRecord, RefinementStatus};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("HSS weights must be finite and nonnegative")]
    InvalidWeights,
    #[error("need at least 2 scores, got {0}")]
    TooFewScores(usize),
    #[error("bin count must be at least 1")]
    ZeroBins,
    #[error("score {value} at index {index} lies outside [0, 1]")]
    ScoreOutOfRange { index: usize, value: f64 },
    #[error("prediction id {0:?} has no gold answer")]
    UnknownId(String),
    #[error("duplicate {kind} id {id:?}")]
    DuplicateId { kind: &'static str, id: String },
    #[error("gold set is empty")]
    EmptyGold,
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Semantic(#[from] SemanticError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HssWeights {
    pub w_bleu: f64,
    pub w_rouge: f64,
    pub w_bert: f64,
    pub w_cos: f64,
}

impl Default for HssWeights {
    fn default() -> Self {
        Self {
            w_bleu: 0.25,
            w_rouge: 0.25,
            w_bert: 0.10,
            w_cos: 0.40,
        }
    }
}

impl HssWeights {
    pub fn validate(&self) -> Result<(), EvalError> {
        let ws = [self.w_bleu, self.w_rouge, self.w_bert, self.w_cos];
        if ws.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(EvalError::InvalidWeights)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HssBreakdown {
    pub bleu1: f64,
    pub rouge1_f: f64,
    pub bert_f1: f64,
    pub cos_sim: f64,
    pub hss: f64,
}

impl HssBreakdown {
    pub fn from_components(bleu1: f64, rouge1_f: f64, bert_f1: f64, cos_sim: f64, w: &HssWeights) -> Self {
        Self {
            bleu1,
            rouge1_f,
            bert_f1,
            cos_sim,
            hss: w.w_bleu * bleu1 + w.w_rouge * rouge1_f + w.w_bert * bert_f1 + w.w_cos * cos_sim,
        }
    }
}

/// Hybrid semantic score of one candidate against its reference.
pub fn hss(
    candidate: &str,
    reference: &str,
    embedder: &dyn Embedder,
    weights: &HssWeights,
) -> Result<HssBreakdown, EvalError> {
    weights.validate()?;
    let (ct, rt) = (tokenize(candidate), tokenize(reference));
    let texts = [candidate, reference];
    let toks = embedder.tokens(&texts)?;
    let sents = embedder.sentences(&texts)?;
    let bert = bertscore_f1(&toks[0], &toks[1])?;
    let cos = cosine_similarity(&sents[0], &sents[1])?;
    Ok(HssBreakdown::from_components(bleu1(&ct, &rt), rouge1_f(&ct, &rt), bert, cos, weights))
}

/// The choice letter in a prediction or gold field.
///
/// A field that is a single letter is taken as is (uppercased). Otherwise the
/// first standalone uppercase letter wins, so "(B)", "B." and "Answer: C" all
/// resolve while the article in "a fracture" does not.
pub fn extract_choice(field: &str) -> Option<char> {
    let t = field.trim();
    let mut chars = t.chars();
    if let (Some(c), None) = (chars.next(), chars.next()) {
        return c.is_ascii_alphabetic().then(|| c.to_ascii_uppercase());
    }
    t.split(|c: char| !c.is_ascii_alphanumeric())
        .find(|w| w.len() == 1 && w.as_bytes()[0].is_ascii_uppercase())
        .and_then(|w| w.chars().next())
}

/// Fraction of gold items whose prediction resolves to the same letter.
///
/// Gold items without a prediction, and predictions without a letter, count
/// as wrong.
pub fn mc_accuracy(predictions: &[(String, String)], gold: &[(String, String)]) -> Result<f64, EvalError> {
    if gold.is_empty() {
        return Err(EvalError::EmptyGold);
    }
    let mut answers: HashMap<&str, Option<char>> = HashMap::with_capacity(gold.len());
    for (id, choice) in gold {
        if answers.insert(id, extract_choice(choice)).is_some() {
            return Err(EvalError::DuplicateId { kind: "gold", id: id.clone() });
        }
    }
    let mut seen: HashMap<&str, ()> = HashMap::with_capacity(predictions.len());
    let mut correct = 0usize;
    for (id, pred) in predictions {
        let gold_choice = answers.get(id.as_str()).ok_or_else(|| EvalError::UnknownId(id.clone()))?;
        if seen.insert(id, ()).is_some() {
            return Err(EvalError::DuplicateId {
                kind: "prediction",
                id: id.clone(),
            });
        }
        if let (Some(g), Some(p)) = (gold_choice, extract_choice(pred)) {
            correct += usize::from(*g == p);
        }
    }
    Ok(correct as f64 / gold.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lower: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    pub metric: String,
    pub n: usize,
    pub mean: f64,
    /// Population variance (divisor N).
    pub variance: f64,
    pub std: f64,
    pub histogram: Vec<HistogramBin>,
}

/// Bin of `score` among `bins` equal-width bins over [0, 1].
///
/// Bin `j` covers `[j/bins, (j+1)/bins)`; the last bin also takes 1.0. The
/// edges are computed as `j as f64 / bins as f64`, and the score is compared
/// against them directly, so a score equal to a printed edge lands in the bin
/// that edge opens.
pub fn bin_index(score: f64, bins: usize) -> usize {
    let nb = bins as f64;
    let mut j = ((score * nb).floor().max(0.0) as usize).min(bins - 1);
    // floor(score * bins) can be off by one near an edge; settle it against the edges
    while j > 0 && score < j as f64 / nb {
        j -= 1;
    }
    while j + 1 < bins && score >= (j + 1) as f64 / nb {
        j += 1;
    }
    j
}

/// Summary statistics and histogram of a batch of rewards in [0, 1].
pub fn diagnose_collapse(metric: &str, scores: &[f64], bins: usize) -> Result<CollapseReport, EvalError> {
    if scores.len() < 2 {
        return Err(EvalError::TooFewScores(scores.len()));
    }
    if bins == 0 {
        return Err(EvalError::ZeroBins);
    }
    if let Some((index, &value)) = scores.iter().enumerate().find(|(_, s)| !(0.0..=1.0).contains(*s)) {
        return Err(EvalError::ScoreOutOfRange { index, value });
    }
    let mut histogram: Vec<HistogramBin> = (0..bins)
        .map(|j| HistogramBin {
            lower: j as f64 / bins as f64,
            count: 0,
        })
        .collect();
    for &s in scores {
        histogram[bin_index(s, bins)].count += 1;
    }
    let variance = population_variance(scores);
    Ok(CollapseReport {
        metric: metric.to_string(),
        n: scores.len(),
        mean: mean(scores),
        variance,
        std: variance.sqrt(),
        histogram,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::MockEmbedder;
    use crate::semantic::{EmbeddingMatrix, SentenceVector};
    use crate::text_metrics::textual_correctness;
    use proptest::prelude::*;

    #[test]
    fn hss_arithmetic_example() {
        let b = HssBreakdown::from_components(0.6065, 0.8, 0.9, 0.85, &HssWeights::default());
        assert!((b.hss - 0.7816).abs() < 1e-4);
    }

    #[test]
    fn hss_identical_is_one() {
        let m = MockEmbedder::default();
        for s in ["left lower lobe pneumonia", "yes", "", "A, b; a!"] {
            let h = hss(s, s, &m, &HssWeights::default()).unwrap();
            // empty text has no tokens, so the lexical terms are 0
            if !tokenize(s).is_empty() {
                assert_eq!(h.hss, 1.0, "{s:?}");
            }
        }
    }

    /// Embeds "x" and "y" as orthogonal unit vectors.
    struct Orthogonal;

    impl Embedder for Orthogonal {
        fn sentences(&self, texts: &[&str]) -> Result<Vec<SentenceVector>, EmbedError> {
            Ok(texts
                .iter()
                .map(|t| SentenceVector::new(if *t == "x" { vec![1.0, 0.0] } else { vec![0.0, 1.0] }).unwrap())
                .collect())
        }

        fn tokens(&self, texts: &[&str]) -> Result<Vec<EmbeddingMatrix>, EmbedError> {
            Ok(self
                .sentences(texts)?
                .into_iter()
                .map(|v| EmbeddingMatrix::from_rows(&[v.into_inner()]).unwrap().normalize().unwrap())
                .collect())
        }
    }

    #[test]
    fn hss_disjoint_orthogonal_is_zero() {
        let h = hss("x", "y", &Orthogonal, &HssWeights::default()).unwrap();
        assert_eq!(h.hss, 0.0);
    }

    #[test]
    fn hss_rejects_negative_weight() {
        let w = HssWeights { w_cos: -0.1, ..Default::default() };
        assert!(matches!(hss("a", "a", &MockEmbedder::default(), &w), Err(EvalError::InvalidWeights)));
    }

    fn pairs(v: &[(&str, &str)]) -> Vec<(String, String)> {
        v.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    #[test]
    fn accuracy_examples() {
        let gold = pairs(&[("1", "A"), ("2", "B"), ("3", "C"), ("4", "D")]);
        assert_eq!(mc_accuracy(&gold, &gold).unwrap(), 1.0);
        let none = pairs(&[("1", "B"), ("2", "C"), ("3", "D"), ("4", "A")]);
        assert_eq!(mc_accuracy(&none, &gold).unwrap(), 0.0);
        let three = pairs(&[("1", "(A)"), ("2", "b"), ("3", "Answer: C"), ("4", "a fracture")]);
        assert_eq!(mc_accuracy(&three, &gold).unwrap(), 0.75);
    }

    #[test]
    fn accuracy_errors() {
        let gold = pairs(&[("1", "A")]);
        assert!(matches!(mc_accuracy(&pairs(&[("9", "A")]), &gold), Err(EvalError::UnknownId(id)) if id == "9"));
        assert!(matches!(
            mc_accuracy(&pairs(&[("1", "A"), ("1", "B")]), &gold),
            Err(EvalError::DuplicateId { kind: "prediction", .. })
        ));
        assert!(matches!(
            mc_accuracy(&[], &pairs(&[("1", "A"), ("1", "A")])),
            Err(EvalError::DuplicateId { kind: "gold", .. })
        ));
        assert!(matches!(mc_accuracy(&[], &[]), Err(EvalError::EmptyGold)));
    }

    #[test]
    fn choice_extraction() {
        assert_eq!(extract_choice(" c "), Some('C'));
        assert_eq!(extract_choice("B. Pneumothorax"), Some('B'));
        assert_eq!(extract_choice("none"), None);
        assert_eq!(extract_choice(""), None);
        assert_eq!(extract_choice("7"), None);
    }

    #[test]
    fn collapse_pair() {
        let r = diagnose_collapse("semantic", &[0.9, 1.0], 10).unwrap();
        assert!((r.mean - 0.95).abs() < 1e-15);
        assert!((r.std - 0.05).abs() < 1e-12);
        assert!((r.variance - 0.0025).abs() < 1e-15);
        assert_eq!(r.histogram[9].count, 2);
    }

    #[test]
    fn collapse_constant() {
        let r = diagnose_collapse("m", &[0.4; 5], 4).unwrap();
        assert_eq!(r.variance, 0.0);
        assert_eq!(r.histogram[1].count, 5);
    }

    #[test]
    fn collapse_grid_binning() {
        let scores: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
        let r = diagnose_collapse("grid", &scores, 11).unwrap();
        let counts: Vec<usize> = r.histogram.iter().map(|b| b.count).collect();
        // i/10 lands in bin floor(11 i / 10) for i < 10; 1.0 goes to the last bin
        assert_eq!(counts, vec![1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1]);
        assert_eq!(counts.iter().sum::<usize>(), 11);
    }

    #[test]
    fn collapse_edges_are_left_closed() {
        assert_eq!(bin_index(0.0, 4), 0);
        assert_eq!(bin_index(0.25, 4), 1);
        assert_eq!(bin_index(0.2499999, 4), 0);
        assert_eq!(bin_index(1.0, 4), 3);
        assert_eq!(bin_index(1.0 / 3.0, 3), 1);
        assert_eq!(bin_index(2.0 / 3.0, 3), 2);
    }

    #[test]
    fn collapse_errors() {
        assert!(matches!(diagnose_collapse("m", &[0.5], 4), Err(EvalError::TooFewScores(1))));
        assert!(matches!(diagnose_collapse("m", &[0.5, 0.6], 0), Err(EvalError::ZeroBins)));
        assert!(matches!(
            diagnose_collapse("m", &[0.5, 1.2], 3),
            Err(EvalError::ScoreOutOfRange { index: 1, .. })
        ));
        assert!(diagnose_collapse("m", &[0.5, f64::NAN], 3).is_err());
    }

    proptest! {
        #[test]
        fn histogram_matches_edge_scan(scores in prop::collection::vec(0.0f64..=1.0, 2..60), bins in 1usize..30) {
            let r = diagnose_collapse("m", &scores, bins).unwrap();
            let mut expected = vec![0usize; bins];
            for &s in &scores {
                let j = (0..bins).rev().find(|&j| s >= j as f64 / bins as f64).unwrap();
                expected[j] += 1;
            }
            let counts: Vec<usize> = r.histogram.iter().map(|b| b.count).collect();
            prop_assert_eq!(counts, expected);
            prop_assert!((r.variance - r.std * r.std).abs() < 1e-9);
        }

        #[test]
        fn lexical_only_weights_reduce_to_textual_correctness(
            a in prop::collection::vec(0u8..5, 0..8), b in prop::collection::vec(0u8..5, 0..8),
        ) {
            let cand: Vec<String> = a.iter().map(|x| format!("w{x}")).collect();
            let refr: Vec<String> = b.iter().map(|x| format!("w{x}")).collect();
            let (c, r) = (cand.join(" "), refr.join(" "));
            let w = HssWeights { w_bleu: 0.5, w_rouge: 0.5, w_bert: 0.0, w_cos: 0.0 };
            let h = hss(&c, &r, &MockEmbedder::default(), &w).unwrap();
            let t = textual_correctness(&c, &r, 0.5).unwrap();
            prop_assert!((h.hss - t.r_c).abs() < 1e-12);
        }
    }
}

//! Tokenization and unigram overlap metrics (BLEU-1, ROUGE-1 F1) and the
//! textual correctness reward built from them.

use std::collections::HashMap;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TextMetricError {
    #[error("weight lambda1 must lie in [0, 1], got {0}")]
    InvalidWeight(f64),
}

/// Lowercased tokens of a piece of text. Never contains empty tokens.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct TokenSequence(Vec<String>);

impl TokenSequence {
    /// Builds a sequence from already-tokenized strings, dropping empties.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self(
            tokens
                .into_iter()
                .map(Into::into)
                .filter(|t: &String| !t.is_empty())
                .collect(),
        )
    }

    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn counts(&self) -> HashMap<&str, usize> {
        let mut counts = HashMap::new();
        for t in &self.0 {
            *counts.entry(t.as_str()).or_insert(0) += 1;
        }
        counts
    }
}

/// Lowercases, splits on whitespace and strips leading/trailing
/// non-alphanumeric characters from each token. Tokens left empty are dropped.
pub fn tokenize(text: &str) -> TokenSequence {
    TokenSequence(
        text.split_whitespace()
            .map(|raw| raw.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
            .filter(|t| !t.is_empty())
            .collect(),
    )
}

/// Sum over candidate unigrams of min(count in candidate, count in reference).
fn clipped_overlap(candidate: &TokenSequence, reference: &TokenSequence) -> usize {
    let reference_counts = reference.counts();
    candidate
        .counts()
        .into_iter()
        .map(|(tok, n)| n.min(reference_counts.get(tok).copied().unwrap_or(0)))
        .sum()
}

/// Unigram BLEU: clipped precision times the brevity penalty
/// `exp(1 - |ref| / |cand|)` when the candidate is shorter than the reference.
/// No smoothing; an empty candidate or zero overlap scores 0.
pub fn bleu1(candidate: &TokenSequence, reference: &TokenSequence) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let overlap = clipped_overlap(candidate, reference);
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / candidate.len() as f64;
    let brevity = if candidate.len() < reference.len() {
        (1.0 - reference.len() as f64 / candidate.len() as f64).exp()
    } else {
        1.0
    };
    precision * brevity
}

/// Unigram F1 over clipped overlap counts.
pub fn rouge1_f(candidate: &TokenSequence, reference: &TokenSequence) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let overlap = clipped_overlap(candidate, reference);
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / candidate.len() as f64;
    let recall = overlap as f64 / reference.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LexicalScores {
    pub bleu1: f64,
    pub rouge1_f: f64,
    /// `lambda1 * bleu1 + (1 - lambda1) * rouge1_f`
    pub r_c: f64,
}

/// Textual correctness reward: a lambda1-weighted blend of BLEU-1 and ROUGE-1.
pub fn textual_correctness(
    candidate: &str,
    reference: &str,
    lambda1: f64,
) -> Result<LexicalScores, TextMetricError> {
    if !(0.0..=1.0).contains(&lambda1) {
        return Err(TextMetricError::InvalidWeight(lambda1));
    }
    let cand = tokenize(candidate);
    let reference = tokenize(reference);
    let bleu1 = bleu1(&cand, &reference);
    let rouge1_f = rouge1_f(&cand, &reference);
    Ok(LexicalScores {
        bleu1,
        rouge1_f,
        r_c: lambda1 * bleu1 + (1.0 - lambda1) * rouge1_f,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(tokens: &[&str]) -> TokenSequence {
        TokenSequence::from_tokens(tokens.iter().copied())
    }

    /// Count-and-clip by linear scans, no maps.
    fn oracle_overlap(cand: &[String], reference: &[String]) -> usize {
        let mut seen: Vec<&String> = Vec::new();
        let mut total = 0;
        for t in cand {
            if seen.contains(&t) {
                continue;
            }
            seen.push(t);
            let in_cand = cand.iter().filter(|x| *x == t).count();
            let in_ref = reference.iter().filter(|x| *x == t).count();
            total += in_cand.min(in_ref);
        }
        total
    }

    fn oracle_bleu1(cand: &[String], reference: &[String]) -> f64 {
        if cand.is_empty() || reference.is_empty() {
            return 0.0;
        }
        let m = oracle_overlap(cand, reference) as f64;
        let c = cand.len() as f64;
        let r = reference.len() as f64;
        let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
        m / c * bp
    }

    fn oracle_rouge1(cand: &[String], reference: &[String]) -> f64 {
        let m = oracle_overlap(cand, reference) as f64;
        if m == 0.0 {
            return 0.0;
        }
        // F1 written as 2m / (|c| + |r|), algebraically equal to 2PR/(P+R)
        2.0 * m / (cand.len() + reference.len()) as f64
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("Left Lung."), seq(&["left", "lung"]));
        assert!(tokenize("").is_empty());
        assert_eq!(
            tokenize("sacroiliac joint, right"),
            seq(&["sacroiliac", "joint", "right"])
        );
        assert_eq!(tokenize("  ... ,, "), seq(&[]));
        assert_eq!(tokenize("(T2-weighted)"), seq(&["t2-weighted"]));
    }

    #[test]
    fn bleu1_examples() {
        assert_eq!(bleu1(&seq(&["left", "lung"]), &seq(&["left", "lung"])), 1.0);
        let v = bleu1(&seq(&["left", "lung"]), &seq(&["left", "lung", "opacity"]));
        assert!((v - 0.6065).abs() < 1e-4, "{v}");
        assert!((v - (-0.5f64).exp()).abs() < 1e-15);
        assert_eq!(bleu1(&seq(&["yes"]), &seq(&["no"])), 0.0);
        assert_eq!(bleu1(&seq(&[]), &seq(&["no"])), 0.0);
    }

    #[test]
    fn bleu1_clips_repeated_tokens() {
        // "the the the" vs "the cat": clipped count 1 of 3
        let v = bleu1(&seq(&["the", "the", "the"]), &seq(&["the", "cat"]));
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn rouge1_examples() {
        let v = rouge1_f(&seq(&["left", "lung"]), &seq(&["left", "lung", "opacity"]));
        assert!((v - 0.8).abs() < 1e-12);
        assert_eq!(rouge1_f(&seq(&["a", "b"]), &seq(&["a", "b"])), 1.0);
        assert_eq!(rouge1_f(&seq(&[]), &seq(&["yes"])), 0.0);
    }

    #[test]
    fn textual_correctness_examples() {
        let s = textual_correctness("left lung", "left lung opacity", 0.5).unwrap();
        assert!((s.r_c - 0.7033).abs() < 1e-4, "{s:?}");
        for l in [0.0, 0.3, 1.0] {
            let s = textual_correctness("Right kidney", "right kidney", l).unwrap();
            assert_eq!(s.r_c, 1.0);
        }
        let s = textual_correctness("yes", "no", 0.5).unwrap();
        assert_eq!(s.r_c, 0.0);
        assert_eq!(
            textual_correctness("a", "a", 1.5),
            Err(TextMetricError::InvalidWeight(1.5))
        );
        assert!(textual_correctness("a", "a", -0.1).is_err());
    }

    fn short_seq() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec((0u8..12).prop_map(|i| format!("w{i}")), 0..=8)
    }

    proptest! {
        #[test]
        fn metrics_match_counting_oracle(c in short_seq(), r in short_seq()) {
            let cand = TokenSequence::from_tokens(c.clone());
            let reference = TokenSequence::from_tokens(r.clone());
            prop_assert!((bleu1(&cand, &reference) - oracle_bleu1(&c, &r)).abs() < 1e-9);
            prop_assert!((rouge1_f(&cand, &reference) - oracle_rouge1(&c, &r)).abs() < 1e-9);
        }

        #[test]
        fn scores_bounded(c in short_seq(), r in short_seq(), lambda in 0.0f64..=1.0) {
            let s = textual_correctness(&c.join(" "), &r.join(" "), lambda).unwrap();
            for v in [s.bleu1, s.rouge1_f, s.r_c] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert!((s.r_c - (lambda * s.bleu1 + (1.0 - lambda) * s.rouge1_f)).abs() <= 1e-12);
        }

        #[test]
        fn unigram_scores_ignore_order(c in short_seq(), r in short_seq()) {
            let cand = TokenSequence::from_tokens(c.clone());
            let reference = TokenSequence::from_tokens(r.clone());
            let mut c_rev = c.clone();
            c_rev.reverse();
            let mut r_rot = r.clone();
            if !r_rot.is_empty() {
                r_rot.rotate_left(1);
            }
            let cand2 = TokenSequence::from_tokens(c_rev);
            let ref2 = TokenSequence::from_tokens(r_rot);
            prop_assert_eq!(rouge1_f(&cand, &reference), rouge1_f(&cand2, &ref2));
            prop_assert_eq!(bleu1(&cand, &reference), bleu1(&cand2, &ref2));
        }

        #[test]
        fn identity_scores_one(c in prop::collection::vec((0u8..12).prop_map(|i| format!("w{i}")), 1..=8)) {
            let s = TokenSequence::from_tokens(c);
            prop_assert_eq!(bleu1(&s, &s), 1.0);
            prop_assert_eq!(rouge1_f(&s, &s), 1.0);
        }
    }
}

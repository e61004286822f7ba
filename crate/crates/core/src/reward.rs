//! Format reward and the weighted total reward.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text_metrics::{textual_correctness, LexicalScores, TextMetricError};

const THINK_OPEN: &str = "<think>";
const THINK_CLOSE: &str = "</think>";
const ANSWER_OPEN: &str = "<answer>";
const ANSWER_CLOSE: &str = "</answer>";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RewardError {
    #[error("invalid reward weights: {0}")]
    InvalidWeights(String),
    #[error("adaptive semantic reward must lie in [0, 1], got {0}")]
    SemanticOutOfRange(f64),
    #[error(transparent)]
    Text(#[from] TextMetricError),
}

/// Mixing weights for the lexical, semantic and total rewards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    /// BLEU-1 share of the textual correctness reward.
    pub lambda1: f64,
    /// BERTScore share of the semantic reward.
    pub lambda2: f64,
    /// Textual correctness weight.
    pub gamma1: f64,
    /// Semantic weight.
    pub gamma2: f64,
    /// Format weight.
    pub gamma3: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.5,
            lambda2: 0.2,
            gamma1: 0.4,
            gamma2: 0.4,
            gamma3: 0.2,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<(), RewardError> {
        let unit = 0.0..=1.0;
        if !unit.contains(&self.lambda1) || !unit.contains(&self.lambda2) {
            return Err(RewardError::InvalidWeights("lambda1 and lambda2 must lie in [0, 1]".into()));
        }
        let gammas = [self.gamma1, self.gamma2, self.gamma3];
        if gammas.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
            return Err(RewardError::InvalidWeights("gammas must be finite and nonnegative".into()));
        }
        if gammas.iter().sum::<f64>() <= 0.0 {
            return Err(RewardError::InvalidWeights("gammas must not all be zero".into()));
        }
        Ok(())
    }

    /// Normalized weighted mean of the three reward components.
    pub fn combine(&self, r_c: f64, r_as: f64, r_f: f64) -> f64 {
        let sum = self.gamma1 + self.gamma2 + self.gamma3;
        (self.gamma1 * r_c + self.gamma2 * r_as + self.gamma3 * r_f) / sum
    }
}

/// One scored response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub candidate: String,
    pub reference: String,
    pub r_c: f64,
    pub r_as: f64,
    pub r_f: f64,
    pub r_total: f64,
}

struct TagLayout<'a> {
    think: &'a str,
    answer: &'a str,
}

fn parse_layout(response: &str) -> Option<TagLayout<'_>> {
    for tag in [THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE] {
        if response.matches(tag).count() != 1 {
            return None;
        }
    }
    let think_open = response.find(THINK_OPEN)?;
    let think_close = response.find(THINK_CLOSE)?;
    let answer_open = response.find(ANSWER_OPEN)?;
    let answer_close = response.find(ANSWER_CLOSE)?;

    let think_body_start = think_open + THINK_OPEN.len();
    let answer_body_start = answer_open + ANSWER_OPEN.len();
    if !(think_body_start <= think_close
        && think_close + THINK_CLOSE.len() <= answer_open
        && answer_body_start <= answer_close)
    {
        return None;
    }
    let layout = TagLayout {
        think: &response[think_body_start..think_close],
        answer: &response[answer_body_start..answer_close],
    };
    if layout.think.trim().is_empty() || layout.answer.trim().is_empty() {
        return None;
    }
    Some(layout)
}

/// 1.0 iff the response holds exactly one nonempty think block followed by
/// exactly one nonempty answer block and no other copies of the four tags.
/// Tags are case-sensitive; a body of only whitespace counts as empty.
pub fn format_reward(response: &str) -> f64 {
    if parse_layout(response).is_some() {
        1.0
    } else {
        0.0
    }
}

/// The text scored against the reference: the answer body when the response
/// is well formed, otherwise the whole response.
pub fn extract_answer(response: &str) -> &str {
    parse_layout(response).map_or(response, |l| l.answer)
}

/// Scores one response given its adaptive semantic reward.
pub fn total_reward(
    response: &str,
    reference: &str,
    r_as: f64,
    weights: &RewardWeights,
) -> Result<ScoredPair, RewardError> {
    weights.validate()?;
    if !(0.0..=1.0).contains(&r_as) {
        return Err(RewardError::SemanticOutOfRange(r_as));
    }
    let r_f = format_reward(response);
    let answer = extract_answer(response);
    let LexicalScores { r_c, .. } = textual_correctness(answer, reference, weights.lambda1)?;
    Ok(ScoredPair {
        candidate: answer.to_string(),
        reference: reference.to_string(),
        r_c,
        r_as,
        r_f,
        r_total: weights.combine(r_c, r_as, r_f),
    })
}

//! Group-relative advantages and the clipped GRPO objective over a tabular
//! toy policy.
//!
//! The objective for a batch of groups, each group sampled for one query:
//!
//! ```text
//! J = mean_groups 1/G sum_i 1/|o_i| sum_t [ min(ratio * A_i, clip(ratio, 1-eps, 1+eps) * A_i) - beta * kl_t ]
//! ratio = pi(o_it) / pi_old(o_it)
//! kl_t  = x - ln x - 1,  x = pi_ref(o_it) / pi(o_it)      (or ln(pi / pi_ref))
//! ```
//!
//! Advantages are computed once per response and broadcast to its tokens.

pub mod sim;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GrpoError {
    #[error("a group needs at least 2 rewards, got {0}")]
    GroupTooSmall(usize),
    #[error("no groups to evaluate")]
    EmptyGroups,
    #[error("response {response} of query {query} is empty")]
    EmptyResponse { query: usize, response: usize },
    #[error("group for query {query} has {responses} responses but {advantages} advantages")]
    AdvantageCount {
        query: usize,
        responses: usize,
        advantages: usize,
    },
    #[error("query {query} outside policy with {queries} queries")]
    QueryOutOfRange { query: usize, queries: usize },
    #[error("token {token} outside vocabulary of size {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("response of length {len} exceeds policy max length {max_len}")]
    ResponseTooLong { len: usize, max_len: usize },
    #[error("policies have different shapes")]
    ShapeMismatch,
    #[error("invalid GRPO config: {0}")]
    InvalidConfig(String),
}

/// Token-level KL estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum KlEstimator {
    /// `x - ln x - 1` with `x = pi_ref / pi`; nonnegative, zero at `pi == pi_ref`.
    #[default]
    K3,
    /// `ln(pi / pi_ref)`.
    LogRatio,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    /// Responses sampled per query.
    pub group_size: usize,
    /// Ratio clip range; an invented default, not a published value.
    pub clip_eps: f64,
    /// KL weight; an invented default, not a published value.
    pub kl_beta: f64,
    /// Sampling temperature applied to the policy logits.
    pub temperature: f64,
    /// Added to the group standard deviation before dividing.
    pub std_eps: f64,
    pub kl_estimator: KlEstimator,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            clip_eps: 0.2,
            kl_beta: 0.04,
            temperature: 0.7,
            std_eps: 1e-8,
            kl_estimator: KlEstimator::K3,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        let fail = |m: &str| Err(GrpoError::InvalidConfig(m.into()));
        if self.group_size < 2 {
            return fail("group_size must be at least 2");
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return fail("clip_eps must lie in (0, 1)");
        }
        if !(self.kl_beta >= 0.0) {
            return fail("kl_beta must be nonnegative");
        }
        if !(self.temperature > 0.0) {
            return fail("temperature must be positive");
        }
        if !(self.std_eps >= 0.0) {
            return fail("std_eps must be nonnegative");
        }
        Ok(())
    }
}

/// Standardizes rewards within a group: `(r - mean) / (std + std_eps)` with
/// the population standard deviation. A group of equal rewards yields zeros.
pub fn group_advantages(rewards: &[f64], std_eps: f64) -> Result<Vec<f64>, GrpoError> {
    if rewards.len() < 2 {
        return Err(GrpoError::GroupTooSmall(rewards.len()));
    }
    if rewards.iter().all(|&r| r == rewards[0]) {
        return Ok(vec![0.0; rewards.len()]);
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(rewards.iter().map(|r| (r - mean) / (std + std_eps)).collect())
}

/// Tabular softmax policy. The distribution over the next token depends on
/// the query and the position within the response:
/// `pi(token | query, pos) = softmax(logits[query, pos] / temperature)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyPolicy {
    queries: usize,
    max_len: usize,
    vocab: usize,
    temperature: f64,
    logits: Vec<f64>,
}

impl ToyPolicy {
    /// Uniform policy (all logits zero).
    pub fn uniform(queries: usize, max_len: usize, vocab: usize, temperature: f64) -> Self {
        assert!(queries > 0 && max_len > 0 && vocab > 0, "policy dimensions must be positive");
        assert!(temperature > 0.0, "temperature must be positive");
        Self {
            queries,
            max_len,
            vocab,
            temperature,
            logits: vec![0.0; queries * max_len * vocab],
        }
    }

    pub fn with_logits(mut self, logits: Vec<f64>) -> Result<Self, GrpoError> {
        if logits.len() != self.logits.len() {
            return Err(GrpoError::ShapeMismatch);
        }
        self.logits = logits;
        Ok(self)
    }

    pub fn queries(&self) -> usize {
        self.queries
    }
    pub fn max_len(&self) -> usize {
        self.max_len
    }
    pub fn vocab(&self) -> usize {
        self.vocab
    }
    pub fn temperature(&self) -> f64 {
        self.temperature
    }
    pub fn logits(&self) -> &[f64] {
        &self.logits
    }
    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    fn offset(&self, query: usize, pos: usize) -> usize {
        (query * self.max_len + pos) * self.vocab
    }

    fn same_shape(&self, other: &Self) -> bool {
        self.queries == other.queries
            && self.max_len == other.max_len
            && self.vocab == other.vocab
            && self.temperature == other.temperature
    }

    pub fn probs(&self, query: usize, pos: usize) -> Vec<f64> {
        self.log_probs(query, pos).into_iter().map(f64::exp).collect()
    }

    pub fn log_probs(&self, query: usize, pos: usize) -> Vec<f64> {
        let o = self.offset(query, pos);
        let row = &self.logits[o..o + self.vocab];
        let scaled: Vec<f64> = row.iter().map(|z| z / self.temperature).collect();
        let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + scaled.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
        scaled.into_iter().map(|s| s - lse).collect()
    }

    /// Log-probability of a whole response.
    pub fn sequence_log_prob(&self, query: usize, tokens: &[usize]) -> f64 {
        tokens
            .iter()
            .enumerate()
            .map(|(pos, &tok)| self.log_probs(query, pos)[tok])
            .sum()
    }

    pub fn sample<R: rand::Rng>(&self, query: usize, len: usize, rng: &mut R) -> Vec<usize> {
        (0..len)
            .map(|pos| {
                let probs = self.probs(query, pos);
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (tok, p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        return tok;
                    }
                }
                self.vocab - 1
            })
            .collect()
    }
}

/// G responses for one query with their rewards and advantages.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateGroup {
    pub query_id: usize,
    pub responses: Vec<Vec<usize>>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl CandidateGroup {
    pub fn new(query_id: usize, responses: Vec<Vec<usize>>, rewards: Vec<f64>, std_eps: f64) -> Result<Self, GrpoError> {
        let advantages = group_advantages(&rewards, std_eps)?;
        if responses.len() != rewards.len() {
            return Err(GrpoError::AdvantageCount {
                query: query_id,
                responses: responses.len(),
                advantages: advantages.len(),
            });
        }
        Ok(Self {
            query_id,
            responses,
            rewards,
            advantages,
        })
    }
}

fn validate_groups(policy: &ToyPolicy, groups: &[CandidateGroup]) -> Result<(), GrpoError> {
    if groups.is_empty() {
        return Err(GrpoError::EmptyGroups);
    }
    for g in groups {
        if g.query_id >= policy.queries {
            return Err(GrpoError::QueryOutOfRange {
                query: g.query_id,
                queries: policy.queries,
            });
        }
        if g.responses.len() != g.advantages.len() {
            return Err(GrpoError::AdvantageCount {
                query: g.query_id,
                responses: g.responses.len(),
                advantages: g.advantages.len(),
            });
        }
        if g.responses.is_empty() {
            return Err(GrpoError::EmptyGroups);
        }
        for (i, r) in g.responses.iter().enumerate() {
            if r.is_empty() {
                return Err(GrpoError::EmptyResponse {
                    query: g.query_id,
                    response: i,
                });
            }
            if r.len() > policy.max_len {
                return Err(GrpoError::ResponseTooLong {
                    len: r.len(),
                    max_len: policy.max_len,
                });
            }
            if let Some(&tok) = r.iter().find(|&&t| t >= policy.vocab) {
                return Err(GrpoError::TokenOutOfRange {
                    token: tok,
                    vocab: policy.vocab,
                });
            }
        }
    }
    Ok(())
}

/// Objective value and its gradient with respect to `policy`'s logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveEval {
    pub value: f64,
    pub surrogate: f64,
    pub kl: f64,
    pub gradient: Vec<f64>,
    /// Tokens whose clipped branch was selected.
    pub clipped_tokens: usize,
}

fn eval(
    policy: &ToyPolicy,
    old: &ToyPolicy,
    reference: &ToyPolicy,
    groups: &[CandidateGroup],
    cfg: &GrpoConfig,
    want_grad: bool,
) -> Result<ObjectiveEval, GrpoError> {
    if !policy.same_shape(old) || !policy.same_shape(reference) {
        return Err(GrpoError::ShapeMismatch);
    }
    validate_groups(policy, groups)?;

    let mut gradient = if want_grad { vec![0.0; policy.logits.len()] } else { Vec::new() };
    let (mut surrogate, mut kl, mut clipped_tokens) = (0.0, 0.0, 0usize);
    let group_weight = 1.0 / groups.len() as f64;
    let (lo, hi) = (1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);

    for g in groups {
        let g_weight = group_weight / g.responses.len() as f64;
        for (resp, &adv) in g.responses.iter().zip(&g.advantages) {
            let w = g_weight / resp.len() as f64;
            for (pos, &tok) in resp.iter().enumerate() {
                let lp_row = policy.log_probs(g.query_id, pos);
                let lp = lp_row[tok];
                let lp_old = old.log_probs(g.query_id, pos)[tok];
                let lp_ref = reference.log_probs(g.query_id, pos)[tok];

                let ratio = (lp - lp_old).exp();
                let unclipped = ratio * adv;
                let clipped = ratio.clamp(lo, hi) * adv;
                // derivative of the surrogate w.r.t. log pi(tok)
                let d_sur = if unclipped <= clipped {
                    unclipped
                } else {
                    clipped_tokens += 1;
                    0.0
                };
                let (k, d_k) = match cfg.kl_estimator {
                    KlEstimator::K3 => {
                        let log_x = lp_ref - lp;
                        let x = log_x.exp();
                        (x - log_x - 1.0, 1.0 - x)
                    }
                    KlEstimator::LogRatio => (lp - lp_ref, 1.0),
                };
                surrogate += w * unclipped.min(clipped);
                kl += w * k;

                if want_grad {
                    let d_lp = w * (d_sur - cfg.kl_beta * d_k);
                    let o = policy.offset(g.query_id, pos);
                    for (b, lp_b) in lp_row.iter().enumerate() {
                        let indicator = if b == tok { 1.0 } else { 0.0 };
                        gradient[o + b] += d_lp * (indicator - lp_b.exp()) / policy.temperature;
                    }
                }
            }
        }
    }

    Ok(ObjectiveEval {
        value: surrogate - cfg.kl_beta * kl,
        surrogate,
        kl,
        gradient,
        clipped_tokens,
    })
}

pub fn grpo_objective(
    policy: &ToyPolicy,
    old: &ToyPolicy,
    reference: &ToyPolicy,
    groups: &[CandidateGroup],
    cfg: &GrpoConfig,
) -> Result<f64, GrpoError> {
    eval(policy, old, reference, groups, cfg, false).map(|e| e.value)
}

/// Objective plus its analytic gradient with respect to `policy`'s logits.
/// Where a ratio sits exactly on a clip boundary the unclipped branch's
/// derivative is used.
pub fn grpo_objective_with_grad(
    policy: &ToyPolicy,
    old: &ToyPolicy,
    reference: &ToyPolicy,
    groups: &[CandidateGroup],
    cfg: &GrpoConfig,
) -> Result<ObjectiveEval, GrpoError> {
    eval(policy, old, reference, groups, cfg, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pop_mean_std(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        (m, (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
    }

    #[test]
    fn advantage_examples() {
        let a = group_advantages(&[1.0, 0.0, 0.0, 0.0], 1e-8).unwrap();
        let expect = [1.7321, -0.5774, -0.5774, -0.5774];
        for (x, e) in a.iter().zip(expect) {
            assert!((x - e).abs() < 1e-3);
        }
        for c in [0.0, 0.1, 0.7, 1.0] {
            assert_eq!(group_advantages(&[c; 4], 1e-8).unwrap(), vec![0.0; 4]);
        }
        let a = group_advantages(&[1.0, 0.0], 0.0).unwrap();
        assert_eq!(a, vec![1.0, -1.0]);
        assert_eq!(group_advantages(&[1.0], 1e-8), Err(GrpoError::GroupTooSmall(1)));
    }

    #[test]
    fn policy_rows_are_distributions() {
        let logits: Vec<f64> = (0..2 * 3 * 5).map(|i| (i as f64 * 0.37).sin() * 4.0).collect();
        let p = ToyPolicy::uniform(2, 3, 5, 0.7).with_logits(logits).unwrap();
        for q in 0..2 {
            for pos in 0..3 {
                let s: f64 = p.probs(q, pos).iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn ratio_one_with_no_kl_is_zero() {
        let logits: Vec<f64> = (0..12).map(|i| i as f64 * 0.1).collect();
        let p = ToyPolicy::uniform(1, 3, 4, 1.0).with_logits(logits).unwrap();
        let g = CandidateGroup::new(0, vec![vec![0, 1, 2], vec![3, 3, 3], vec![1, 2, 0]], vec![0.2, 0.9, 0.4], 1e-8).unwrap();
        let cfg = GrpoConfig { kl_beta: 0.0, ..Default::default() };
        // all responses have the same length, so the per-token mean of
        // zero-mean advantages vanishes exactly up to rounding
        let v = grpo_objective(&p, &p, &p, &[g], &cfg).unwrap();
        assert!(v.abs() < 1e-12, "{v}");
    }

    #[test]
    fn kl_vanishes_at_reference() {
        let p = ToyPolicy::uniform(1, 2, 3, 0.7).with_logits(vec![0.3, -1.0, 2.0, 0.1, 0.0, -0.4]).unwrap();
        let g = CandidateGroup::new(0, vec![vec![0, 2], vec![1]], vec![1.0, 0.0], 1e-8).unwrap();
        let e = grpo_objective_with_grad(&p, &p, &p, &[g], &GrpoConfig::default()).unwrap();
        assert_eq!(e.kl, 0.0);
        assert_eq!(e.value, e.surrogate);
    }

    /// G = 2, one-token responses over a 2-token vocabulary, every term written out.
    #[test]
    fn two_sample_objective_by_hand() {
        let cfg = GrpoConfig {
            clip_eps: 0.2,
            kl_beta: 0.1,
            temperature: 1.0,
            ..Default::default()
        };
        let policy = ToyPolicy::uniform(1, 1, 2, 1.0).with_logits(vec![0.5, 0.0]).unwrap();
        let old = ToyPolicy::uniform(1, 1, 2, 1.0).with_logits(vec![0.0, 0.0]).unwrap();
        let reference = ToyPolicy::uniform(1, 1, 2, 1.0).with_logits(vec![0.0, 1.0]).unwrap();
        let g = CandidateGroup::new(0, vec![vec![0], vec![1]], vec![1.0, 0.0], 0.0).unwrap();
        assert_eq!(g.advantages, vec![1.0, -1.0]);

        let softmax0 = |a: f64, b: f64| a.exp() / (a.exp() + b.exp());
        let pi = [softmax0(0.5, 0.0), 1.0 - softmax0(0.5, 0.0)];
        let pi_old = [0.5, 0.5];
        let pi_ref = [softmax0(0.0, 1.0), 1.0 - softmax0(0.0, 1.0)];
        let mut total = 0.0;
        for (tok, adv) in [(0usize, 1.0f64), (1, -1.0)] {
            let r = pi[tok] / pi_old[tok];
            let sur = (r * adv).min(r.clamp(0.8, 1.2) * adv);
            let x = pi_ref[tok] / pi[tok];
            let kl = x - x.ln() - 1.0;
            total += 0.5 * (sur - 0.1 * kl);
        }
        let got = grpo_objective(&policy, &old, &reference, &[g], &cfg).unwrap();
        assert!((got - total).abs() < 1e-12, "{got} vs {total}");
    }

    #[test]
    fn equal_rewards_give_zero_update() {
        let p = ToyPolicy::uniform(1, 1, 4, 0.7).with_logits(vec![0.1, 0.5, -0.3, 0.0]).unwrap();
        let g = CandidateGroup::new(0, vec![vec![0], vec![1], vec![1], vec![3]], vec![0.9; 4], 1e-8).unwrap();
        let e = grpo_objective_with_grad(&p, &p, &p, &[g], &GrpoConfig::default()).unwrap();
        assert!(e.gradient.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn objective_errors() {
        let p = ToyPolicy::uniform(1, 2, 3, 1.0);
        let cfg = GrpoConfig::default();
        assert_eq!(grpo_objective(&p, &p, &p, &[], &cfg), Err(GrpoError::EmptyGroups));
        let g = CandidateGroup::new(0, vec![vec![0], vec![5]], vec![1.0, 0.0], 1e-8).unwrap();
        assert_eq!(
            grpo_objective(&p, &p, &p, &[g], &cfg),
            Err(GrpoError::TokenOutOfRange { token: 5, vocab: 3 })
        );
        let g = CandidateGroup::new(3, vec![vec![0], vec![1]], vec![1.0, 0.0], 1e-8).unwrap();
        assert!(matches!(grpo_objective(&p, &p, &p, &[g], &cfg), Err(GrpoError::QueryOutOfRange { .. })));
        let g = CandidateGroup::new(0, vec![vec![0, 1, 2], vec![1]], vec![1.0, 0.0], 1e-8).unwrap();
        assert!(matches!(grpo_objective(&p, &p, &p, &[g], &cfg), Err(GrpoError::ResponseTooLong { .. })));
        let g = CandidateGroup::new(0, vec![vec![], vec![1]], vec![1.0, 0.0], 1e-8).unwrap();
        assert!(matches!(grpo_objective(&p, &p, &p, &[g], &cfg), Err(GrpoError::EmptyResponse { .. })));
        let other = ToyPolicy::uniform(1, 2, 4, 1.0);
        let g = CandidateGroup::new(0, vec![vec![0], vec![1]], vec![1.0, 0.0], 1e-8).unwrap();
        assert_eq!(grpo_objective(&p, &other, &p, &[g], &cfg), Err(GrpoError::ShapeMismatch));
    }

    #[test]
    fn config_validation() {
        GrpoConfig::default().validate().unwrap();
        assert!(GrpoConfig { group_size: 1, ..Default::default() }.validate().is_err());
        assert!(GrpoConfig { clip_eps: 1.0, ..Default::default() }.validate().is_err());
    }

    proptest! {
        #[test]
        fn advantages_are_standardized(rewards in prop::collection::vec(0.0f64..1.0, 2..=8)) {
            let (_, std) = pop_mean_std(&rewards);
            prop_assume!(std > 1e-6);
            let a = group_advantages(&rewards, 1e-8).unwrap();
            let (m, s) = pop_mean_std(&a);
            prop_assert!(m.abs() < 1e-9);
            // std + eps in the denominator shrinks the spread slightly
            prop_assert!((s - std / (std + 1e-8)).abs() < 1e-9);
        }

        #[test]
        fn k3_estimator_nonnegative(log_x in -20.0f64..20.0) {
            let x = log_x.exp();
            prop_assert!(x - log_x - 1.0 >= 0.0);
        }

        #[test]
        fn wider_clip_never_lowers_positive_surrogate(
            z in prop::collection::vec(-2.0f64..2.0, 3),
            eps_a in 0.01f64..0.5, extra in 0.0f64..0.4,
        ) {
            let policy = ToyPolicy::uniform(1, 1, 3, 1.0).with_logits(z).unwrap();
            let old = ToyPolicy::uniform(1, 1, 3, 1.0);
            let g = CandidateGroup {
                query_id: 0,
                responses: vec![vec![0], vec![1], vec![2]],
                rewards: vec![1.0, 1.0, 1.0],
                advantages: vec![0.7, 1.3, 0.2],
            };
            let narrow = GrpoConfig { clip_eps: eps_a, kl_beta: 0.0, ..Default::default() };
            let wide = GrpoConfig { clip_eps: (eps_a + extra).min(0.99), ..narrow };
            let a = grpo_objective(&policy, &old, &old, std::slice::from_ref(&g), &narrow).unwrap();
            let b = grpo_objective(&policy, &old, &old, &[g], &wide).unwrap();
            prop_assert!(b >= a - 1e-15);
        }
    }
}

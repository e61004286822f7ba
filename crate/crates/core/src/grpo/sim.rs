//! Desk-scale GRPO run over a toy policy that picks one of a few canned
//! answers per query. Used to show how the reward scheme changes the
//! advantage signal and what the policy learns.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use super::{grpo_objective_with_grad, CandidateGroup, GrpoConfig, GrpoError, ToyPolicy};
use crate::adaptive::{AdaptConfig, AdaptError, SemanticAdapter};
use crate::embed::{Embedder, MockEmbedder};
use crate::reward::{total_reward, RewardError, RewardWeights};
use crate::semantic::{bertscore_f1, combine_semantic, cosine_similarity, EmbeddingMatrix, SemanticError, SentenceVector};
use crate::util::{mean, population_variance};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("unknown reward scheme {0:?}: expected raw, adaptive or lexical-only")]
    UnknownScheme(String),
    #[error("unknown scenario {0:?}: expected clustered or lexical")]
    UnknownScenario(String),
    #[error("steps must be at least 1")]
    NoSteps,
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error(transparent)]
    Grpo(#[from] GrpoError),
    #[error(transparent)]
    Adapt(#[from] AdaptError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Semantic(#[from] SemanticError),
}

/// Which reward the simulated trainer optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum RewardScheme {
    /// Total reward with the raw semantic score.
    Raw,
    /// Total reward with the adaptive semantic score.
    Adaptive,
    /// Textual correctness and format only; the semantic weight is dropped.
    LexicalOnly,
}

impl FromStr for RewardScheme {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "raw" => Ok(Self::Raw),
            "adaptive" => Ok(Self::Adaptive),
            "lexical-only" => Ok(Self::LexicalOnly),
            other => Err(SimError::UnknownScheme(other.to_string())),
        }
    }
}

impl fmt::Display for RewardScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Raw => "raw",
            Self::Adaptive => "adaptive",
            Self::LexicalOnly => "lexical-only",
        })
    }
}

/// Named scenario families for the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioKind {
    Clustered,
    Lexical,
}

impl FromStr for ScenarioKind {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "clustered" => Ok(Self::Clustered),
            "lexical" => Ok(Self::Lexical),
            other => Err(SimError::UnknownScenario(other.to_string())),
        }
    }
}

impl ScenarioKind {
    pub fn build(self, queries: usize, answers: usize, seed: u64) -> Result<Scenario, SimError> {
        match self {
            Self::Clustered => Scenario::clustered_semantic(queries, answers, seed),
            Self::Lexical => Scenario::lexical_overlap(queries, answers, seed),
        }
    }
}

/// One synthetic query: a reference answer and the canned answers the policy
/// chooses between, with their precomputed semantic sub-scores.
#[derive(Debug, Clone, PartialEq)]
pub struct SimQuery {
    pub reference: String,
    pub candidates: Vec<String>,
    /// Index of the answer whose probability is tracked as `p_correct`.
    pub correct: usize,
    pub bert: Vec<f64>,
    pub cos: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub queries: Vec<SimQuery>,
}

/// Unit vector at cosine `c` from `axis`, rotated toward a random direction.
fn at_cosine<R: Rng>(axis: &[f64], c: f64, rng: &mut R) -> Vec<f64> {
    let dim = axis.len();
    loop {
        let mut u: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() - 0.5).collect();
        let proj: f64 = u.iter().zip(axis).map(|(a, b)| a * b).sum();
        u.iter_mut().zip(axis).for_each(|(a, b)| *a -= proj * b);
        let n = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-6 {
            continue;
        }
        let s = (1.0 - c * c).max(0.0).sqrt();
        return axis.iter().zip(&u).map(|(a, b)| c * a + s * b / n).collect();
    }
}

fn semantic_pair(reference: &[f64], target: f64, rng: &mut ChaCha8Rng) -> Result<(EmbeddingMatrix, Vec<f64>), SemanticError> {
    let v = at_cosine(reference, target, rng);
    let m = EmbeddingMatrix::from_rows(std::slice::from_ref(&v))?.normalize()?;
    Ok((m, v))
}

impl Scenario {
    /// Answers are lexically disjoint paraphrases of the reference, so only
    /// the semantic scores separate them, and those sit in a narrow high band
    /// (BERTScore near 0.986, cosine near 0.90). The tracked answer is the
    /// semantically closest one.
    pub fn clustered_semantic(queries: usize, answers: usize, seed: u64) -> Result<Self, SimError> {
        if queries == 0 || answers < 2 {
            return Err(SimError::InvalidScenario("need at least one query and two answers".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_edc1_u64);
        let dim = 32;
        let mut out = Vec::with_capacity(queries);
        for q in 0..queries {
            let axis = at_cosine(&unit(dim, 0), 0.0, &mut rng);
            let ref_tokens = EmbeddingMatrix::from_rows(std::slice::from_ref(&axis))?.normalize()?;
            let ref_sent = SentenceVector::new(axis.clone())?;
            let correct = rng.random_range(0..answers);
            let mut bert = Vec::with_capacity(answers);
            let mut cos = Vec::with_capacity(answers);
            let mut candidates = Vec::with_capacity(answers);
            for a in 0..answers {
                // the tracked answer sits at the top of both bands
                let (tb, tc) = if a == correct {
                    (0.992, 0.915)
                } else {
                    (rng.random_range(0.980..0.988), rng.random_range(0.895..0.908))
                };
                let (tok, _) = semantic_pair(&axis, tb, &mut rng)?;
                let (_, sent) = semantic_pair(&axis, tc, &mut rng)?;
                bert.push(bertscore_f1(&tok, &ref_tokens)?);
                cos.push(cosine_similarity(&SentenceVector::new(sent)?, &ref_sent)?);
                candidates.push(format!("paraphrase q{q} variant {}", word(a)));
            }
            out.push(SimQuery {
                reference: format!("finding {}", word(q + 100)),
                candidates,
                correct,
                bert,
                cos,
            });
        }
        Ok(Self { queries: out })
    }

    /// Answers built from a small vocabulary; some share tokens with the
    /// reference and one repeats it exactly. Semantic scores come from the
    /// mock embedder.
    pub fn lexical_overlap(queries: usize, answers: usize, seed: u64) -> Result<Self, SimError> {
        if queries == 0 || answers < 2 {
            return Err(SimError::InvalidScenario("need at least one query and two answers".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x01e7_1ca1_u64);
        let vocab: Vec<String> = (0..24).map(word).collect();
        let embedder = MockEmbedder { dim: 32, seed };
        let mut out = Vec::with_capacity(queries);
        for _ in 0..queries {
            let mut pool = vocab.clone();
            pool.shuffle(&mut rng);
            let reference_tokens = &pool[..3];
            let distractors = &pool[3..];
            let reference = reference_tokens.join(" ");
            let correct = rng.random_range(0..answers);
            let mut candidates = Vec::with_capacity(answers);
            for a in 0..answers {
                if a == correct {
                    candidates.push(reference.clone());
                    continue;
                }
                // at most two reference tokens, so no other answer ties the correct one
                let shared = rng.random_range(0..=2usize);
                let mut toks: Vec<&str> = reference_tokens[..shared].iter().map(String::as_str).collect();
                let extra = rng.random_range(1..=2usize);
                for _ in 0..extra {
                    toks.push(&distractors[rng.random_range(0..distractors.len())]);
                }
                candidates.push(toks.join(" "));
            }
            let mut texts: Vec<&str> = candidates.iter().map(String::as_str).collect();
            texts.push(&reference);
            let tokens = embedder.tokens(&texts).expect("mock embedder is infallible");
            let sents = embedder.sentences(&texts).expect("mock embedder is infallible");
            let (ref_tok, ref_sent) = (&tokens[answers], &sents[answers]);
            let mut bert = Vec::with_capacity(answers);
            let mut cos = Vec::with_capacity(answers);
            for a in 0..answers {
                bert.push(bertscore_f1(&tokens[a], ref_tok)?);
                cos.push(cosine_similarity(&sents[a], ref_sent)?);
            }
            out.push(SimQuery {
                reference,
                candidates,
                correct,
                bert,
                cos,
            });
        }
        Ok(Self { queries: out })
    }

    /// Every answer is the same text with the same scores.
    pub fn identical_answers(queries: usize, answers: usize) -> Self {
        let q = SimQuery {
            reference: "left lung".into(),
            candidates: vec!["right lung".into(); answers],
            correct: 0,
            bert: vec![0.97; answers],
            cos: vec![0.9; answers],
        };
        Self {
            queries: vec![q; queries],
        }
    }

    fn validate(&self) -> Result<usize, SimError> {
        let first = self
            .queries
            .first()
            .ok_or_else(|| SimError::InvalidScenario("no queries".into()))?;
        let n = first.candidates.len();
        for q in &self.queries {
            if q.candidates.len() != n || q.bert.len() != n || q.cos.len() != n {
                return Err(SimError::InvalidScenario("queries must share one answer count".into()));
            }
            if q.correct >= n {
                return Err(SimError::InvalidScenario("correct index out of range".into()));
            }
        }
        if n < 2 {
            return Err(SimError::InvalidScenario("need at least two answers".into()));
        }
        Ok(n)
    }
}

fn unit(dim: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[i] = 1.0;
    v
}

/// Pronounceable pseudo-word for index `i`, distinct for distinct `i`.
fn word(i: usize) -> String {
    const SYL: [&str; 12] = ["ka", "lo", "mi", "ne", "ru", "sa", "te", "vo", "zi", "pu", "ga", "do"];
    format!("{}{}{}", SYL[i % 12], SYL[(i / 12) % 12], SYL[(i / 144) % 12])
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub grpo: GrpoConfig,
    pub weights: RewardWeights,
    pub adapt: AdaptConfig,
    pub steps: usize,
    pub seed: u64,
    pub learning_rate: f64,
    /// Gradient steps per sampled batch; the first uses ratio 1.
    pub inner_steps: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            // trainer-style std guard, larger than the library default
            grpo: GrpoConfig {
                std_eps: 1e-4,
                ..GrpoConfig::default()
            },
            weights: RewardWeights::default(),
            adapt: AdaptConfig::default(),
            steps: 400,
            seed: 0,
            learning_rate: 0.05,
            inner_steps: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TelemetryRow {
    pub step: usize,
    pub scheme: RewardScheme,
    pub reward_mean: f64,
    pub reward_var: f64,
    /// Mean over groups of the population variance of the advantages.
    pub adv_var: f64,
    /// Mean over queries of the probability of the tracked answer, after the update.
    pub p_correct: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutcome {
    pub rows: Vec<TelemetryRow>,
    pub initial_policy: ToyPolicy,
    pub final_policy: ToyPolicy,
}

impl SimOutcome {
    /// Mean `adv_var` over rows with `from <= step < to`.
    pub fn mean_adv_var(&self, from: usize, to: usize) -> f64 {
        let xs: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.step >= from && r.step < to)
            .map(|r| r.adv_var)
            .collect();
        mean(&xs)
    }
}

fn p_correct(policy: &ToyPolicy, scenario: &Scenario) -> f64 {
    let ps: Vec<f64> = scenario
        .queries
        .iter()
        .enumerate()
        .map(|(q, sq)| policy.probs(q, 0)[sq.correct])
        .collect();
    mean(&ps)
}

/// Runs `cfg.steps` rounds of sample, score, standardize and ascend.
/// Deterministic for a given scenario, scheme and config.
pub fn simulate_training(scenario: &Scenario, scheme: RewardScheme, cfg: &SimConfig) -> Result<SimOutcome, SimError> {
    if cfg.steps == 0 {
        return Err(SimError::NoSteps);
    }
    cfg.grpo.validate()?;
    let answers = scenario.validate()?;
    let g = cfg.grpo.group_size;

    let weights = match scheme {
        RewardScheme::LexicalOnly => RewardWeights { gamma2: 0.0, ..cfg.weights },
        _ => cfg.weights,
    };
    weights.validate()?;
    let mut adapter = SemanticAdapter::new(cfg.adapt, weights.lambda2)?;

    // responses arrive in the tagged format, so the format reward is 1 throughout
    let responses: Vec<Vec<String>> = scenario
        .queries
        .iter()
        .map(|q| {
            q.candidates
                .iter()
                .map(|c| format!("<think>recall the finding</think><answer>{c}</answer>"))
                .collect()
        })
        .collect();

    let mut policy = ToyPolicy::uniform(scenario.queries.len(), 1, answers, cfg.grpo.temperature);
    let initial = policy.clone();
    let reference = policy.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let picks: Vec<Vec<usize>> = (0..scenario.queries.len())
            .map(|q| (0..g).map(|_| policy.sample(q, 1, &mut rng)[0]).collect())
            .collect();

        let mut bert_batch = Vec::with_capacity(picks.len() * g);
        let mut cos_batch = Vec::with_capacity(picks.len() * g);
        for (q, ps) in picks.iter().enumerate() {
            for &a in ps {
                bert_batch.push(scenario.queries[q].bert[a]);
                cos_batch.push(scenario.queries[q].cos[a]);
            }
        }
        let semantic: Vec<f64> = match scheme {
            RewardScheme::Adaptive => adapter.step(&bert_batch, &cos_batch)?.rewards,
            RewardScheme::Raw => bert_batch
                .iter()
                .zip(&cos_batch)
                .map(|(&b, &c)| combine_semantic(b, c, weights.lambda2).map(|s| s.r_s))
                .collect::<Result<_, _>>()?,
            RewardScheme::LexicalOnly => vec![0.0; bert_batch.len()],
        };

        let mut groups = Vec::with_capacity(picks.len());
        let mut all_rewards = Vec::with_capacity(picks.len() * g);
        for (q, ps) in picks.iter().enumerate() {
            let sq = &scenario.queries[q];
            let rewards = ps
                .iter()
                .enumerate()
                .map(|(i, &a)| {
                    total_reward(&responses[q][a], &sq.reference, semantic[q * g + i], &weights).map(|p| p.r_total)
                })
                .collect::<Result<Vec<f64>, _>>()?;
            all_rewards.extend_from_slice(&rewards);
            let resp = ps.iter().map(|&a| vec![a]).collect();
            groups.push(CandidateGroup::new(q, resp, rewards, cfg.grpo.std_eps)?);
        }
        let adv_var = mean(
            &groups
                .iter()
                .map(|gr| population_variance(&gr.advantages))
                .collect::<Vec<_>>(),
        );

        let old = policy.clone();
        for _ in 0..cfg.inner_steps.max(1) {
            let e = grpo_objective_with_grad(&policy, &old, &reference, &groups, &cfg.grpo)?;
            for (z, d) in policy.logits_mut().iter_mut().zip(&e.gradient) {
                *z += cfg.learning_rate * d;
            }
        }

        rows.push(TelemetryRow {
            step,
            scheme,
            reward_mean: mean(&all_rewards),
            reward_var: population_variance(&all_rewards),
            adv_var,
            p_correct: p_correct(&policy, scenario),
        });
    }

    Ok(SimOutcome {
        rows,
        initial_policy: initial,
        final_policy: policy,
    })
}

/// Kendall rank correlation between step index and value; 1 means strictly
/// increasing, -1 strictly decreasing. Ties contribute zero.
pub fn kendall_tau(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mut s = 0i64;
    for i in 0..n {
        for j in i + 1..n {
            s += match values[j].partial_cmp(&values[i]) {
                Some(std::cmp::Ordering::Greater) => 1,
                Some(std::cmp::Ordering::Less) => -1,
                _ => 0,
            };
        }
    }
    s as f64 / (n * (n - 1) / 2) as f64
}

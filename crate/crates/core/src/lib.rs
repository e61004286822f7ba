//! Reward engineering for open-ended QA reinforcement learning.

// negated float comparisons below reject NaN along with out-of-range values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adaptive;
pub mod config;
pub mod embed;
pub mod eval;
pub mod grpo;
pub mod knowledge;
pub mod pipeline;
pub mod reward;
pub mod semantic;
pub mod text_metrics;
mod util;

//! File-level drivers: scoring a response file and replaying raw score
//! batches through the threshold controller.

use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::adaptive::{AdaptConfig, AdaptError, SemanticAdapter, StateSnapshot, ThresholdState};
use crate::config::Settings;
use crate::embed::{EmbedError, Embedder};
use crate::grpo::sim::TelemetryRow;
use crate::reward::{extract_answer, total_reward, RewardError};
use crate::semantic::{bertscore_f1, cosine_similarity, SemanticError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: score {value} is not a finite number in [0, 1]")]
    ScoreOutOfRange { line: usize, value: f64 },
    #[error("embedder returned {got} results for {expected} texts")]
    EmbedCount { expected: usize, got: usize },
    #[error("snapshot: {0}")]
    Snapshot(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Semantic(#[from] SemanticError),
    #[error(transparent)]
    Adapt(#[from] AdaptError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct ScoreInput {
    pub id: String,
    pub response: String,
    pub reference: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreOutput {
    pub id: String,
    pub r_c: f64,
    pub r_s_raw: f64,
    pub r_as: f64,
    pub r_f: f64,
    pub r_total: f64,
}

impl ScoreOutput {
    /// One JSON line with every score printed to six decimals, so output is
    /// byte-stable regardless of float printing differences.
    pub fn to_json_line(&self) -> String {
        let id = serde_json::to_string(&self.id).expect("strings always serialize");
        format!(
            "{{\"id\":{id},\"r_c\":{:.6},\"r_s_raw\":{:.6},\"r_as\":{:.6},\"r_f\":{:.6},\"r_total\":{:.6}}}",
            self.r_c, self.r_s_raw, self.r_as, self.r_f, self.r_total
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ScoreSummary {
    pub records: usize,
    pub batches: usize,
    pub final_bert_threshold: f64,
    pub final_cos_threshold: f64,
}

fn read_records<T: for<'de> Deserialize<'de>>(reader: impl BufRead) -> impl Iterator<Item = Result<(usize, T), PipelineError>> {
    reader.lines().enumerate().filter_map(|(i, line)| {
        let line_no = i + 1;
        match line {
            Err(e) => Some(Err(PipelineError::Io(e))),
            Ok(text) if text.trim().is_empty() => None,
            Ok(text) => Some(serde_json::from_str(&text).map(|r| (line_no, r)).map_err(|e| PipelineError::Parse {
                line: line_no,
                message: e.to_string(),
            })),
        }
    })
}

fn score_batch(
    batch: &[ScoreInput],
    embedder: &dyn Embedder,
    adapter: &mut SemanticAdapter,
    settings: &Settings,
) -> Result<Vec<ScoreOutput>, PipelineError> {
    let answers: Vec<&str> = batch.iter().map(|r| extract_answer(&r.response)).collect();
    let refs: Vec<&str> = batch.iter().map(|r| r.reference.as_str()).collect();
    let texts: Vec<&str> = answers.iter().chain(&refs).copied().collect();
    let toks = embedder.tokens(&texts)?;
    let sents = embedder.sentences(&texts)?;
    for got in [toks.len(), sents.len()] {
        if got != texts.len() {
            return Err(PipelineError::EmbedCount {
                expected: texts.len(),
                got,
            });
        }
    }
    let n = batch.len();
    let mut bert = Vec::with_capacity(n);
    let mut cos = Vec::with_capacity(n);
    for i in 0..n {
        bert.push(bertscore_f1(&toks[i], &toks[n + i])?);
        cos.push(cosine_similarity(&sents[i], &sents[n + i])?);
    }
    let adapted = adapter.step(&bert, &cos)?;
    let l2 = settings.reward.lambda2;
    batch
        .iter()
        .enumerate()
        .map(|(i, rec)| {
            let pair = total_reward(&rec.response, &rec.reference, adapted.rewards[i], &settings.reward)?;
            Ok(ScoreOutput {
                id: rec.id.clone(),
                r_c: pair.r_c,
                r_s_raw: l2 * bert[i] + (1.0 - l2) * cos[i],
                r_as: pair.r_as,
                r_f: pair.r_f,
                r_total: pair.r_total,
            })
        })
        .collect()
}

/// Scores `{id, response, reference}` lines in consecutive batches of
/// `settings.score_batch_size`, advancing the adaptive thresholds once per
/// batch, and writes one output line per input line in input order.
pub fn score_records(
    reader: impl BufRead,
    mut writer: impl Write,
    embedder: &dyn Embedder,
    settings: &Settings,
) -> Result<ScoreSummary, PipelineError> {
    let mut adapter = SemanticAdapter::new(settings.adapt, settings.reward.lambda2)?;
    let mut summary = ScoreSummary::default();
    let mut batch: Vec<ScoreInput> = Vec::with_capacity(settings.score_batch_size);
    let flush = |batch: &mut Vec<ScoreInput>, adapter: &mut SemanticAdapter, writer: &mut dyn Write| {
        if batch.is_empty() {
            return Ok::<_, PipelineError>(0);
        }
        let out = score_batch(batch, embedder, adapter, settings)?;
        for o in &out {
            writeln!(writer, "{}", o.to_json_line())?;
        }
        batch.clear();
        Ok(out.len())
    };
    for item in read_records::<ScoreInput>(reader) {
        let (_, rec) = item?;
        batch.push(rec);
        if batch.len() == settings.score_batch_size {
            summary.records += flush(&mut batch, &mut adapter, &mut writer)?;
            summary.batches += 1;
        }
    }
    if !batch.is_empty() {
        summary.records += flush(&mut batch, &mut adapter, &mut writer)?;
        summary.batches += 1;
    }
    writer.flush()?;
    summary.final_bert_threshold = adapter.bert.threshold();
    summary.final_cos_threshold = adapter.cos.threshold();
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct ReplayBatch {
    pub batch: Value,
    pub metric: String,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplayRow {
    pub batch: String,
    pub metric: String,
    pub step: u64,
    #[serde(rename = "T_before")]
    pub t_before: f64,
    #[serde(rename = "T_after")]
    pub t_after: f64,
    pub raw_mean: f64,
    pub raw_var: f64,
    pub mapped_mean: f64,
    pub mapped_var: f64,
}

/// Snapshot file of a replay: one controller per metric name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplaySnapshot {
    pub states: BTreeMap<String, StateSnapshot>,
}

/// Independent threshold controllers keyed by metric name.
#[derive(Debug, Clone, PartialEq)]
pub struct Replay {
    cfg: AdaptConfig,
    states: BTreeMap<String, ThresholdState>,
}

impl Replay {
    pub fn new(cfg: AdaptConfig) -> Result<Self, PipelineError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            states: BTreeMap::new(),
        })
    }

    /// Resumes from a snapshot; every stored config must equal `cfg`.
    pub fn resume(cfg: AdaptConfig, snap: &ReplaySnapshot) -> Result<Self, PipelineError> {
        let mut r = Self::new(cfg)?;
        for (metric, s) in &snap.states {
            if s.config != cfg {
                return Err(PipelineError::Snapshot(format!(
                    "metric {metric:?} was recorded with a different configuration"
                )));
            }
            r.states.insert(metric.clone(), ThresholdState::restore(s)?);
        }
        Ok(r)
    }

    pub fn state(&self, metric: &str) -> Option<&ThresholdState> {
        self.states.get(metric)
    }

    pub fn apply(&mut self, batch: &ReplayBatch) -> ReplayRow {
        let state = self
            .states
            .entry(batch.metric.clone())
            .or_insert_with(|| ThresholdState::new(&self.cfg));
        let out = state.adapt_batch(&batch.scores, &self.cfg);
        ReplayRow {
            batch: match &batch.batch {
                Value::String(s) => s.clone(),
                other => other.to_string(),
            },
            metric: batch.metric.clone(),
            step: state.step(),
            t_before: out.threshold_before,
            t_after: out.threshold_used,
            raw_mean: out.raw_mean(),
            raw_var: out.raw_var(),
            mapped_mean: out.mapped_mean(),
            mapped_var: out.mapped_var(),
        }
    }

    pub fn snapshot(&self) -> ReplaySnapshot {
        ReplaySnapshot {
            states: self
                .states
                .iter()
                .map(|(k, s)| (k.clone(), s.snapshot(&self.cfg)))
                .collect(),
        }
    }
}

/// Replays `{batch, metric, scores}` lines and writes one CSV row per line.
pub fn adapt_replay(reader: impl BufRead, writer: impl Write, replay: &mut Replay) -> Result<usize, PipelineError> {
    let mut csv = csv::Writer::from_writer(writer);
    let mut rows = 0;
    for item in read_records::<ReplayBatch>(reader) {
        let (line, batch) = item?;
        if let Some(&value) = batch.scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(PipelineError::ScoreOutOfRange { line, value });
        }
        let row = replay.apply(&batch);
        csv.write_record([
            row.batch,
            row.metric,
            row.step.to_string(),
            format!("{:.6}", row.t_before),
            format!("{:.6}", row.t_after),
            format!("{:.6}", row.raw_mean),
            format!("{:.6}", row.raw_var),
            format!("{:.6}", row.mapped_mean),
            format!("{:.6}", row.mapped_var),
        ])
        .map_err(PipelineError::from)?;
        rows += 1;
    }
    csv.flush()?;
    Ok(rows)
}

pub const REPLAY_HEADER: [&str; 9] = [
    "batch",
    "metric",
    "step",
    "T_before",
    "T_after",
    "raw_mean",
    "raw_var",
    "mapped_mean",
    "mapped_var",
];

/// Like [`adapt_replay`] but starts with the header row.
pub fn adapt_replay_with_header(reader: impl BufRead, mut writer: impl Write, replay: &mut Replay) -> Result<usize, PipelineError> {
    writeln!(writer, "{}", REPLAY_HEADER.join(","))?;
    adapt_replay(reader, writer, replay)
}

pub fn write_telemetry_csv(rows: &[TelemetryRow], writer: impl Write) -> Result<(), PipelineError> {
    let mut csv = csv::Writer::from_writer(writer);
    csv.write_record(["step", "scheme", "reward_mean", "reward_var", "adv_var", "p_correct"])?;
    for r in rows {
        csv.write_record([
            r.step.to_string(),
            r.scheme.to_string(),
            format!("{:.6}", r.reward_mean),
            format!("{:.6}", r.reward_var),
            format!("{:.6}", r.adv_var),
            format!("{:.6}", r.p_correct),
        ])?;
    }
    csv.flush()?;
    Ok(())
}

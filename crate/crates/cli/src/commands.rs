use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use semreward_core::config::Settings;
use semreward_core::embed::{Embedder, MockEmbedder};
use semreward_core::eval::{
    diagnose_collapse, hss, ingest_dataset, mc_accuracy, validate_refinement, DatasetFormat,
};
use semreward_core::grpo::sim::{simulate_training, RewardScheme, ScenarioKind, SimConfig};
use semreward_core::grpo::GrpoConfig;
use semreward_core::knowledge::{answer_frequencies, frequency_split, select_exemplars, SelectionConfig};
use semreward_core::pipeline::{self, Replay, ReplaySnapshot};

use crate::Global;

fn settings(g: &Global) -> Result<Settings> {
    match &g.config {
        None => Ok(Settings::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            text.parse().with_context(|| format!("in {}", p.display()))
        }
    }
}

fn embedder(g: &Global, s: &Settings) -> Result<Box<dyn Embedder>> {
    let mock = MockEmbedder {
        dim: s.mock_dim,
        seed: g.seed,
    };
    Ok(g.embeddings.open(mock)?)
}

fn is_stdio(p: &Path) -> bool {
    p.as_os_str() == "-"
}

fn input(p: &Path) -> Result<Box<dyn BufRead>> {
    if is_stdio(p) {
        return Ok(Box::new(BufReader::new(io::stdin())));
    }
    let f = File::open(p).with_context(|| format!("opening {}", p.display()))?;
    Ok(Box::new(BufReader::new(f)))
}

fn output(p: &Path) -> Result<Box<dyn Write>> {
    if is_stdio(p) {
        return Ok(Box::new(BufWriter::new(io::stdout())));
    }
    let f = File::create(p).with_context(|| format!("creating {}", p.display()))?;
    Ok(Box::new(BufWriter::new(f)))
}

fn write_json(p: &Path, v: &impl Serialize) -> Result<()> {
    let mut w = output(p)?;
    serde_json::to_writer_pretty(&mut w, v)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Input records, or - for stdin.
    #[arg(long, short, default_value = "-")]
    input: PathBuf,
    /// Output records, or - for stdout.
    #[arg(long, short, default_value = "-")]
    output: PathBuf,
    /// Records per adaptive-threshold update; overrides score.batch_size.
    #[arg(long)]
    batch_size: Option<usize>,
}

pub fn score(g: &Global, a: &ScoreArgs) -> Result<()> {
    let mut s = settings(g)?;
    if let Some(b) = a.batch_size {
        if b == 0 {
            bail!("--batch-size must be at least 1");
        }
        s.score_batch_size = b;
    }
    let e = embedder(g, &s)?;
    pipeline::score_records(input(&a.input)?, output(&a.output)?, e.as_ref(), &s)?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// Lines of {batch, metric, scores}, or - for stdin.
    #[arg(long, short, default_value = "-")]
    input: PathBuf,
    /// CSV trajectory, or - for stdout.
    #[arg(long, short, default_value = "-")]
    output: PathBuf,
    /// Start from a snapshot written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Write the final controller states here.
    #[arg(long)]
    snapshot: Option<PathBuf>,
}

pub fn adapt_replay(g: &Global, a: &ReplayArgs) -> Result<()> {
    let s = settings(g)?;
    let mut replay = match &a.resume {
        None => Replay::new(s.adapt)?,
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let snap: ReplaySnapshot = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
            Replay::resume(s.adapt, &snap)?
        }
    };
    pipeline::adapt_replay_with_header(input(&a.input)?, output(&a.output)?, &mut replay)?;
    if let Some(p) = &a.snapshot {
        write_json(p, &replay.snapshot())?;
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct SimArgs {
    /// raw, adaptive or lexical-only.
    #[arg(long, default_value = "adaptive")]
    scheme: RewardScheme,
    /// clustered or lexical.
    #[arg(long, default_value = "clustered")]
    scenario: ScenarioKind,
    #[arg(long, default_value_t = 400)]
    steps: usize,
    /// Responses sampled per query; overrides grpo.group_size.
    #[arg(long = "group-size", short = 'G')]
    group_size: Option<usize>,
    /// Overrides grpo.temperature.
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long, default_value_t = 4)]
    queries: usize,
    /// Canned answers per query.
    #[arg(long, default_value_t = 8)]
    answers: usize,
    /// Telemetry CSV, or - for stdout.
    #[arg(long, short, default_value = "-")]
    out: PathBuf,
}

pub fn grpo_sim(g: &Global, a: &SimArgs) -> Result<()> {
    let s = settings(g)?;
    let grpo = GrpoConfig {
        group_size: a.group_size.unwrap_or(s.grpo.group_size),
        temperature: a.temperature.unwrap_or(s.grpo.temperature),
        std_eps: s.sim_std_eps,
        ..s.grpo
    };
    let cfg = SimConfig {
        grpo,
        weights: s.reward,
        adapt: s.adapt,
        steps: a.steps,
        seed: g.seed,
        learning_rate: s.sim_learning_rate,
        ..SimConfig::default()
    };
    let scenario = a.scenario.build(a.queries, a.answers, g.seed)?;
    let outcome = simulate_training(&scenario, a.scheme, &cfg)?;
    pipeline::write_telemetry_csv(&outcome.rows, output(&a.out)?)?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    /// QA records, one JSON object per line.
    #[arg(long, short)]
    input: PathBuf,
    /// Answers seen more than this many times are clustered.
    #[arg(long)]
    threshold: usize,
    #[arg(long, default_value_t = 5)]
    per_cluster_target: usize,
    /// Chosen exemplars, one record per line, or - for stdout.
    #[arg(long, short, default_value = "-")]
    out: PathBuf,
    /// Summary JSON (groups, counts, k per group).
    #[arg(long)]
    summary: Option<PathBuf>,
    /// Answer frequency table as CSV.
    #[arg(long)]
    frequencies: Option<PathBuf>,
}

pub fn select_knowledge(g: &Global, a: &SelectArgs) -> Result<()> {
    let s = settings(g)?;
    let records = ingest_dataset(&a.input, DatasetFormat::Jsonl)?;
    let part = frequency_split(&records, a.threshold)?;
    let high: Vec<_> = part.high_freq.values().flatten().collect();
    let questions: Vec<&str> = high.iter().map(|r| r.question.as_str()).collect();
    let vectors = embedder(g, &s)?.sentences(&questions)?;
    let by_id: HashMap<String, _> = high.iter().map(|r| r.id.clone()).zip(vectors).collect();
    let cfg = SelectionConfig {
        per_cluster_target: a.per_cluster_target,
        ..SelectionConfig::default()
    };
    let selections = select_exemplars(&part, &by_id, &cfg, g.seed)?;

    let mut w = output(&a.out)?;
    for sel in &selections {
        for r in &sel.chosen {
            writeln!(w, "{}", serde_json::to_string(r)?)?;
        }
    }
    w.flush()?;

    if let Some(p) = &a.summary {
        let groups: Vec<Value> = selections
            .iter()
            .map(|sel| {
                json!({
                    "answer": sel.answer,
                    "count": part.high_freq[&sel.answer].len(),
                    "k": sel.k,
                    "chosen": sel.chosen.iter().map(|r| r.id.as_str()).collect::<Vec<_>>(),
                })
            })
            .collect();
        let summary = json!({
            "records": records.len(),
            "threshold": a.threshold,
            "high_freq_records": part.high_freq_count(),
            "low_freq_records": part.low_freq.len(),
            "groups": groups,
            "exemplars": selections.iter().map(|s| s.chosen.len()).sum::<usize>(),
        });
        write_json(p, &summary)?;
    }
    if let Some(p) = &a.frequencies {
        let mut csv = csv::Writer::from_writer(output(p)?);
        csv.write_record(["answer", "count"])?;
        for (answer, count) in answer_frequencies(&records) {
            csv.write_record([answer, count.to_string()])?;
        }
        csv.flush()?;
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "lowercase")]
enum EvalMetric {
    Hss,
    Accuracy,
}

#[derive(Debug, Deserialize)]
struct EvalRecord {
    id: String,
    metric: EvalMetric,
    prediction: String,
    reference: String,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Lines of {id, metric: hss|accuracy, prediction, reference}.
    #[arg(long, short)]
    input: PathBuf,
    /// Per-record HSS breakdown, one JSON object per line.
    #[arg(long)]
    per_record: Option<PathBuf>,
    /// Summary JSON, or - for stdout.
    #[arg(long, short, default_value = "-")]
    out: PathBuf,
}

pub fn eval(g: &Global, a: &EvalArgs) -> Result<()> {
    let s = settings(g)?;
    let e = embedder(g, &s)?;
    let mut per_record = a.per_record.as_deref().map(output).transpose()?;
    let mut hss_scores = Vec::new();
    let (mut preds, mut gold) = (Vec::new(), Vec::new());
    for (i, line) in input(&a.input)?.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EvalRecord = serde_json::from_str(&line).with_context(|| format!("line {}", i + 1))?;
        match rec.metric {
            EvalMetric::Hss => {
                let b = hss(&rec.prediction, &rec.reference, e.as_ref(), &s.hss)?;
                if let Some(w) = per_record.as_mut() {
                    writeln!(w, "{}", json!({"id": rec.id, "breakdown": b}))?;
                }
                hss_scores.push(b.hss);
            }
            EvalMetric::Accuracy => {
                gold.push((rec.id.clone(), rec.reference));
                preds.push((rec.id, rec.prediction));
            }
        }
    }
    if let Some(mut w) = per_record {
        w.flush()?;
    }
    let mut summary = serde_json::Map::new();
    if !hss_scores.is_empty() {
        let mean = hss_scores.iter().sum::<f64>() / hss_scores.len() as f64;
        summary.insert("hss".into(), json!({"n": hss_scores.len(), "mean": mean}));
    }
    if !gold.is_empty() {
        summary.insert("accuracy".into(), json!({"n": gold.len(), "value": mc_accuracy(&preds, &gold)?}));
    }
    if summary.is_empty() {
        bail!("no records in {}", a.input.display());
    }
    write_json(&a.out, &summary)
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    /// One number per line, or JSON objects holding --field.
    #[arg(long, short, default_value = "-")]
    input: PathBuf,
    /// Read this field from JSON-object lines (e.g. r_s_raw from `score` output).
    #[arg(long)]
    field: Option<String>,
    #[arg(long, default_value_t = 10)]
    bins: usize,
    /// Name recorded in the report; defaults to the field name.
    #[arg(long)]
    metric: Option<String>,
    /// Histogram CSV (bin lower edge, count).
    #[arg(long)]
    histogram: Option<PathBuf>,
    /// Report JSON, or - for stdout.
    #[arg(long, short, default_value = "-")]
    out: PathBuf,
}

pub fn diagnose(_g: &Global, a: &DiagnoseArgs) -> Result<()> {
    let mut scores = Vec::new();
    for (i, line) in input(&a.input)?.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let ctx = || format!("line {}", i + 1);
        let v = match &a.field {
            None => t.parse::<f64>().with_context(ctx)?,
            Some(f) => {
                let obj: Value = serde_json::from_str(t).with_context(ctx)?;
                obj.get(f)
                    .and_then(Value::as_f64)
                    .with_context(|| format!("line {}: no numeric field {f:?}", i + 1))?
            }
        };
        scores.push(v);
    }
    let metric = a.metric.clone().or_else(|| a.field.clone()).unwrap_or_else(|| "score".into());
    let report = diagnose_collapse(&metric, &scores, a.bins)?;
    if let Some(p) = &a.histogram {
        let mut csv = csv::Writer::from_writer(output(p)?);
        csv.write_record(["lower", "count"])?;
        for b in &report.histogram {
            csv.write_record([format!("{:.6}", b.lower), b.count.to_string()])?;
        }
        csv.flush()?;
    }
    write_json(&a.out, &report)
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    /// One refinement object per line, or - for stdin.
    #[arg(long, short, default_value = "-")]
    input: PathBuf,
    /// Per-line verdicts, or - for stdout.
    #[arg(long, short, default_value = "-")]
    out: PathBuf,
}

pub fn validate_refinements(_g: &Global, a: &RefineArgs) -> Result<()> {
    let mut w = output(&a.out)?;
    let (mut total, mut bad) = (0usize, 0usize);
    for (i, line) in input(&a.input)?.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        total += 1;
        let verdict = match validate_refinement(&line) {
            Ok(rec) => json!({"line": i + 1, "valid": true, "record": rec}),
            Err(e) => {
                bad += 1;
                json!({"line": i + 1, "valid": false, "error": e.to_string()})
            }
        };
        writeln!(w, "{verdict}")?;
    }
    w.flush()?;
    if bad > 0 {
        bail!("{bad} of {total} refinement records invalid");
    }
    Ok(())
}

pub fn print_config(g: &Global) -> Result<()> {
    print!("{}", settings(g)?.render());
    Ok(())
}

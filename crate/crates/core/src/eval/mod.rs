//! Evaluation harness: accuracy tables, temperature sweeps, and
//! confusion-matrix diffs between two models.
//!
//! Any [`Completer`] can be scored — a local policy, a scripted stand-in, or
//! a hosted chat endpoint. Malformed completions grade as incorrect; examples
//! whose completer errored are counted separately and never silently dropped.
//! Subsets of the `hans` dataset are graded in the binary label space after
//! collapsing neutral/contradiction to non-entailment.

mod endpoint;

pub use endpoint::{EndpointClient, EndpointConfig, EndpointError, RetryPolicy};

use std::collections::BTreeMap;
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::data::{map_hans, Label, NliExample};
use crate::data::PromptTemplate;
use crate::reward::parse;
use crate::rng::substream;
use crate::rollout::{Completer, DecodeMode, DecodingConfig};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid evaluation request: {0}")]
    Config(String),
    #[error("prediction lists differ in length: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Outcome {
    Correct,
    Incorrect,
    Malformed,
    Errored,
}

/// Accuracy row for one (dataset, subset) pair.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct SubsetRow {
    pub dataset: String,
    pub subset: String,
    pub n: usize,
    pub correct: usize,
    pub malformed: usize,
    pub errored: usize,
    pub accuracy: f64,
}

impl SubsetRow {
    /// Well-formed but wrong predictions; the counts always satisfy
    /// correct + incorrect + malformed + errored == n.
    pub fn incorrect(&self) -> usize {
        self.n - self.correct - self.malformed - self.errored
    }
}

/// Mean/std of accuracy over k runs at one temperature. `temperature` 0 marks
/// the greedy entry.
#[derive(Debug, Clone, Serialize)]
pub struct TempStat {
    pub temperature: f64,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub rows: Vec<SubsetRow>,
    pub config: DecodingConfig,
    pub seed: u64,
    pub created_at: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<Vec<TempStat>>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned plain-text table, accuracies as percentages.
    pub fn render_text(&self) -> String {
        let mut lines = Vec::with_capacity(self.rows.len() + 1);
        let dataset_w = self
            .rows
            .iter()
            .map(|r| r.dataset.len())
            .chain(["dataset".len()])
            .max()
            .unwrap();
        let subset_w =
            self.rows.iter().map(|r| r.subset.len()).chain(["subset".len()]).max().unwrap();
        lines.push(format!(
            "{:<dataset_w$}  {:<subset_w$}  {:>6}  {:>8}",
            "dataset", "subset", "n", "acc"
        ));
        for r in &self.rows {
            lines.push(format!(
                "{:<dataset_w$}  {:<subset_w$}  {:>6}  {:>7.2}%",
                r.dataset,
                r.subset,
                r.n,
                100.0 * r.accuracy
            ));
        }
        lines.join("\n")
    }

    pub fn overall_accuracy(&self) -> f64 {
        let n: usize = self.rows.iter().map(|r| r.n).sum();
        let correct: usize = self.rows.iter().map(|r| r.correct).sum();
        if n == 0 {
            0.0
        } else {
            correct as f64 / n as f64
        }
    }
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn grade(ex: &NliExample, predicted: Option<Label>) -> Outcome {
    match predicted {
        None => Outcome::Malformed,
        Some(label) => {
            let correct = if ex.dataset == "hans" {
                map_hans(label) == map_hans(ex.gold)
            } else {
                label == ex.gold
            };
            if correct {
                Outcome::Correct
            } else {
                Outcome::Incorrect
            }
        }
    }
}

fn run_once<C: Completer + Sync>(
    completer: &C,
    examples: &[NliExample],
    template: &PromptTemplate,
    cfg: &DecodingConfig,
) -> Vec<Outcome> {
    examples
        .par_iter()
        .map(|ex| {
            let prompt = template.render_example(ex);
            match completer.complete(&prompt, cfg) {
                Err(_) => Outcome::Errored,
                Ok(text) => grade(ex, parse(&text).answer_label),
            }
        })
        .collect()
}

/// Evaluate a completion source over `k_runs` decoding runs. Counts aggregate
/// per (dataset, subset) across runs; n counts every attempted example.
pub fn evaluate<C: Completer + Sync>(
    completer: &C,
    examples: &[NliExample],
    template: &PromptTemplate,
    cfg: &DecodingConfig,
    k_runs: usize,
) -> Result<EvalReport, EvalError> {
    if examples.is_empty() {
        return Err(EvalError::Config("no examples to evaluate".into()));
    }
    if k_runs == 0 {
        return Err(EvalError::Config("k_runs must be >= 1".into()));
    }
    let mut tally: BTreeMap<(String, String), (usize, usize, usize, usize)> = BTreeMap::new();
    for r in 0..k_runs {
        let mut run_cfg = cfg.clone();
        if k_runs > 1 {
            run_cfg.seed = substream(cfg.seed, "run", r as u64);
        }
        let outcomes = run_once(completer, examples, template, &run_cfg);
        for (ex, outcome) in examples.iter().zip(outcomes) {
            let entry = tally
                .entry((ex.dataset.clone(), ex.subset.clone()))
                .or_insert((0, 0, 0, 0));
            entry.0 += 1;
            match outcome {
                Outcome::Correct => entry.1 += 1,
                Outcome::Malformed => entry.2 += 1,
                Outcome::Errored => entry.3 += 1,
                Outcome::Incorrect => {}
            }
        }
    }
    let rows = tally
        .into_iter()
        .map(|((dataset, subset), (n, correct, malformed, errored))| SubsetRow {
            dataset,
            subset,
            n,
            correct,
            malformed,
            errored,
            accuracy: correct as f64 / n as f64,
        })
        .collect();
    Ok(EvalReport {
        rows,
        config: cfg.clone(),
        seed: cfg.seed,
        created_at: now_unix(),
        sweep: None,
    })
}

/// Greedy label predictions for every example (None = malformed or errored).
pub fn predict_labels<C: Completer + Sync>(
    completer: &C,
    examples: &[NliExample],
    template: &PromptTemplate,
    cfg: &DecodingConfig,
) -> Vec<Option<Label>> {
    examples
        .par_iter()
        .map(|ex| {
            completer
                .complete(&template.render_example(ex), cfg)
                .ok()
                .and_then(|text| parse(&text).answer_label)
        })
        .collect()
}

fn sample_std(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (xs.len() - 1) as f64;
    Some(var.sqrt())
}

/// Greedy entry plus `k` sampled runs per temperature. The returned report's
/// rows come from the greedy run; per-temperature stats ride in `sweep`.
pub fn temperature_sweep<C: Completer + Sync>(
    completer: &C,
    examples: &[NliExample],
    template: &PromptTemplate,
    base_cfg: &DecodingConfig,
    temperatures: &[f64],
    k: usize,
) -> Result<EvalReport, EvalError> {
    if temperatures.is_empty() {
        return Err(EvalError::Config("temperature list is empty".into()));
    }
    if k == 0 {
        return Err(EvalError::Config("k must be >= 1".into()));
    }
    if temperatures.iter().any(|t| !(*t > 0.0)) {
        return Err(EvalError::Config("temperatures must be > 0".into()));
    }
    let greedy_cfg = DecodingConfig {
        mode: DecodeMode::Greedy,
        seed: base_cfg.seed,
        max_new_tokens: base_cfg.max_new_tokens,
        ..DecodingConfig::default()
    };
    let mut report = evaluate(completer, examples, template, &greedy_cfg, 1)?;
    let greedy_acc = report.overall_accuracy();
    let mut stats = vec![TempStat {
        temperature: 0.0,
        accuracies: vec![greedy_acc],
        mean: greedy_acc,
        std: None,
    }];
    for (ti, &temp) in temperatures.iter().enumerate() {
        let mut accs = Vec::with_capacity(k);
        for run in 0..k {
            let run_cfg = DecodingConfig {
                mode: DecodeMode::Sampled,
                temperature: temp,
                top_p: base_cfg.top_p,
                max_new_tokens: base_cfg.max_new_tokens,
                seed: substream(base_cfg.seed, "sweep", (ti * 10_000 + run) as u64),
            };
            let r = evaluate(completer, examples, template, &run_cfg, 1)?;
            accs.push(r.overall_accuracy());
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        let std = sample_std(&accs);
        stats.push(TempStat { temperature: temp, accuracies: accs, mean, std });
    }
    report.sweep = Some(stats);
    report.config = base_cfg.clone();
    Ok(report)
}

/// Sweep curves as CSV: `temperature,run,accuracy`, with temperature 0
/// denoting the greedy entry.
pub fn sweep_csv(report: &EvalReport) -> String {
    let mut out = String::from("temperature,run,accuracy\n");
    if let Some(stats) = &report.sweep {
        for stat in stats {
            for (run, acc) in stat.accuracies.iter().enumerate() {
                out.push_str(&format!("{},{},{}\n", stat.temperature, run, acc));
            }
        }
    }
    out
}

/// Confusion matrices over the examples where two models disagree.
/// Rows index the first argument's labels, columns the second's, in
/// (entailment, neutral, contradiction) order.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ConfusionDiff {
    pub base_vs_grpo: [[u64; 3]; 3],
    pub gold_vs_base: [[u64; 3]; 3],
    pub gold_vs_grpo: [[u64; 3]; 3],
    pub total: u64,
}

fn label_index(l: Label) -> usize {
    match l {
        Label::Entailment => 0,
        Label::Neutral => 1,
        Label::Contradiction => 2,
    }
}

pub fn confusion_diff(
    gold: &[Label],
    preds_base: &[Label],
    preds_grpo: &[Label],
) -> Result<ConfusionDiff, EvalError> {
    if gold.len() != preds_base.len() {
        return Err(EvalError::LengthMismatch { left: gold.len(), right: preds_base.len() });
    }
    if gold.len() != preds_grpo.len() {
        return Err(EvalError::LengthMismatch { left: gold.len(), right: preds_grpo.len() });
    }
    let mut out = ConfusionDiff {
        base_vs_grpo: [[0; 3]; 3],
        gold_vs_base: [[0; 3]; 3],
        gold_vs_grpo: [[0; 3]; 3],
        total: 0,
    };
    for i in 0..gold.len() {
        if preds_base[i] == preds_grpo[i] {
            continue;
        }
        out.total += 1;
        out.base_vs_grpo[label_index(preds_base[i])][label_index(preds_grpo[i])] += 1;
        out.gold_vs_base[label_index(gold[i])][label_index(preds_base[i])] += 1;
        out.gold_vs_grpo[label_index(gold[i])][label_index(preds_grpo[i])] += 1;
    }
    Ok(out)
}

impl ConfusionDiff {
    pub fn render_text(&self) -> String {
        let name = ["entailment", "neutral", "contradiction"];
        let mut out = String::new();
        for (title, m) in [
            ("base vs grpo", &self.base_vs_grpo),
            ("gold vs base", &self.gold_vs_base),
            ("gold vs grpo", &self.gold_vs_grpo),
        ] {
            out.push_str(&format!("{title} (n={})\n", self.total));
            out.push_str(&format!("{:<14}", ""));
            for j in 0..3 {
                out.push_str(&format!("{:>14}", name[j]));
            }
            out.push('\n');
            for i in 0..3 {
                out.push_str(&format!("{:<14}", name[i]));
                for j in 0..3 {
                    out.push_str(&format!("{:>14}", m[i][j]));
                }
                out.push('\n');
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("diff serializes")
    }
}

//! Dataset ingestion, prompt rendering, the synthetic NLI task generator,
//! and the one-missed training-set filter.
//!
//! The canonical interchange format is JSONL with one example per line:
//! `{"uid", "premise", "hypothesis", "gold", "dataset", "subset"}`. Loaders
//! for external benchmark formats are thin adapters into this shape.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{rng_from, substream};
use crate::rollout::{Completer, CompleterError, DecodingConfig};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{line}: {msg}")]
    MalformedLine { path: String, line: usize, msg: String },
    #[error("{path}:{line}: duplicate uid {uid:?}")]
    DuplicateUid { path: String, line: usize, uid: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("completion failed for {uid}: {source}")]
    Completion { uid: String, source: CompleterError },
}

/// The three-way NLI label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Entailment,
    Neutral,
    Contradiction,
}

pub const ALL_LABELS: [Label; 3] = [Label::Entailment, Label::Neutral, Label::Contradiction];

impl Label {
    /// Case-insensitive match after trimming; anything else is `None`.
    pub fn from_text(s: &str) -> Option<Label> {
        match s.trim().to_ascii_lowercase().as_str() {
            "entailment" => Some(Label::Entailment),
            "neutral" => Some(Label::Neutral),
            "contradiction" => Some(Label::Contradiction),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Label::Entailment => "entailment",
            Label::Neutral => "neutral",
            Label::Contradiction => "contradiction",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Binary label space used by HANS-style evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryLabel {
    Entailment,
    NonEntailment,
}

/// Collapse three-way predictions for binary-labeled sets: neutral and
/// contradiction both count as non-entailment.
pub fn map_hans(label: Label) -> BinaryLabel {
    match label {
        Label::Entailment => BinaryLabel::Entailment,
        Label::Neutral | Label::Contradiction => BinaryLabel::NonEntailment,
    }
}

/// One premise–hypothesis pair with provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NliExample {
    pub uid: String,
    pub premise: String,
    pub hypothesis: String,
    pub gold: Label,
    pub dataset: String,
    pub subset: String,
}

/// Load a JSONL dataset, validating every line. Order-preserving.
pub fn load_jsonl(path: &Path) -> Result<Vec<NliExample>, DataError> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|e| DataError::Io { path: display.clone(), source: e })?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| DataError::Io { path: display.clone(), source: e })?;
        let lineno = i + 1;
        let ex: NliExample = serde_json::from_str(&line).map_err(|e| DataError::MalformedLine {
            path: display.clone(),
            line: lineno,
            msg: e.to_string(),
        })?;
        if !seen.insert(ex.uid.clone()) {
            return Err(DataError::DuplicateUid { path: display, line: lineno, uid: ex.uid });
        }
        out.push(ex);
    }
    Ok(out)
}

/// Write a JSONL dataset with LF line endings.
pub fn save_jsonl(path: &Path, examples: &[NliExample]) -> Result<(), DataError> {
    let display = path.display().to_string();
    let io_err = |e| DataError::Io { path: display.clone(), source: e };
    let mut file = File::create(path).map_err(io_err)?;
    for ex in examples {
        let line = serde_json::to_string(ex).expect("NliExample serializes");
        file.write_all(line.as_bytes()).map_err(io_err)?;
        file.write_all(b"\n").map_err(io_err)?;
    }
    Ok(())
}

/// Prompt template with `{premise}` and `{hypothesis}` slots.
///
/// The default wording is this project's own (terse, to keep toy sequences
/// short); it instructs the model to reason inside think tags and answer
/// inside answer tags.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub text: String,
}

pub const DEFAULT_PROMPT_TEMPLATE: &str = "predict entailment , neutral , or contradiction . \
write <think> then <answer> . premise : {premise} hypothesis : {hypothesis}";

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate { text: DEFAULT_PROMPT_TEMPLATE.to_string() }
    }
}

impl PromptTemplate {
    pub fn new(text: impl Into<String>) -> Result<Self, DataError> {
        let text = text.into();
        for slot in ["{premise}", "{hypothesis}"] {
            if text.matches(slot).count() != 1 {
                return Err(DataError::Config(format!("template must contain {slot} exactly once")));
            }
        }
        Ok(PromptTemplate { text })
    }

    pub fn render(&self, premise: &str, hypothesis: &str) -> String {
        self.text.replacen("{premise}", premise, 1).replacen("{hypothesis}", hypothesis, 1)
    }

    pub fn render_example(&self, ex: &NliExample) -> String {
        self.render(&ex.premise, &ex.hypothesis)
    }

    /// Every word that can appear in a rendered prompt, excluding slot contents.
    pub fn fixed_words(&self) -> Vec<String> {
        self.text
            .replacen("{premise}", "", 1)
            .replacen("{hypothesis}", "", 1)
            .split_whitespace()
            .map(str::to_string)
            .collect()
    }
}

/// Closed word lists for the synthetic task.
pub const ENTITY_WORDS: [&str; 16] = [
    "alice", "bob", "carol", "dave", "erin", "frank", "grace", "henry", "iris", "jack", "kate",
    "liam", "mona", "nina", "oscar", "paula",
];
pub const ATTRIBUTE_WORDS: [&str; 16] = [
    "red", "blue", "green", "happy", "sad", "tall", "short", "fast", "slow", "old", "young",
    "calm", "loud", "quiet", "brave", "tired",
];

/// Configuration for the synthetic NLI generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticTaskConfig {
    /// Number of entity words drawn from the closed list.
    pub entity_vocab: usize,
    /// Number of attribute words drawn from the closed list.
    pub attribute_vocab: usize,
    /// Probability that a sentence is negated ("x is not red").
    pub negation_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticTaskConfig {
    fn default() -> Self {
        SyntheticTaskConfig { entity_vocab: 12, attribute_vocab: 12, negation_rate: 0.3, seed: 0 }
    }
}

impl SyntheticTaskConfig {
    fn validate(&self) -> Result<(), DataError> {
        if self.entity_vocab < 2 || self.entity_vocab > ENTITY_WORDS.len() {
            return Err(DataError::Config(format!(
                "entity_vocab must be in 2..={}",
                ENTITY_WORDS.len()
            )));
        }
        if self.attribute_vocab < 1 || self.attribute_vocab > ATTRIBUTE_WORDS.len() {
            return Err(DataError::Config(format!(
                "attribute_vocab must be in 1..={}",
                ATTRIBUTE_WORDS.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.negation_rate) {
            return Err(DataError::Config("negation_rate must be in [0, 1]".into()));
        }
        Ok(())
    }

    /// All content words the generator can emit.
    pub fn content_words(&self) -> Vec<String> {
        let mut words: Vec<String> = ENTITY_WORDS[..self.entity_vocab]
            .iter()
            .chain(&ATTRIBUTE_WORDS[..self.attribute_vocab])
            .map(|s| s.to_string())
            .collect();
        words.push("is".into());
        words.push("not".into());
        words
    }
}

fn sentence(subject: &str, attribute: &str, negated: bool) -> String {
    if negated {
        format!("{subject} is not {attribute}")
    } else {
        format!("{subject} is {attribute}")
    }
}

/// Generate `n` class-balanced examples. Labels are decidable from the pair
/// itself: an identical sentence is entailment, a polarity flip on the same
/// subject/attribute is contradiction, and a different subject is neutral.
pub fn synth_generate(cfg: &SyntheticTaskConfig, n: usize) -> Result<Vec<NliExample>, DataError> {
    cfg.validate()?;
    if n == 0 {
        return Err(DataError::Config("n must be >= 1".into()));
    }
    use rand::seq::SliceRandom;
    use rand::Rng;

    let entities = &ENTITY_WORDS[..cfg.entity_vocab];
    let attributes = &ATTRIBUTE_WORDS[..cfg.attribute_vocab];

    // Round-robin labels keep counts balanced within ±1; a seeded shuffle
    // removes the positional pattern.
    let mut labels: Vec<Label> = (0..n).map(|i| ALL_LABELS[i % 3]).collect();
    let mut rng = rng_from(substream(cfg.seed, "synth", 0));
    labels.shuffle(&mut rng);

    let mut out = Vec::with_capacity(n);
    for (i, gold) in labels.into_iter().enumerate() {
        let subj = entities[rng.gen_range(0..entities.len())];
        let attr = attributes[rng.gen_range(0..attributes.len())];
        let neg = rng.gen::<f64>() < cfg.negation_rate;
        let premise = sentence(subj, attr, neg);
        let hypothesis = match gold {
            Label::Entailment => premise.clone(),
            Label::Contradiction => sentence(subj, attr, !neg),
            Label::Neutral => {
                let mut other = entities[rng.gen_range(0..entities.len())];
                while other == subj {
                    other = entities[rng.gen_range(0..entities.len())];
                }
                let attr2 = attributes[rng.gen_range(0..attributes.len())];
                let neg2 = rng.gen::<f64>() < cfg.negation_rate;
                sentence(other, attr2, neg2)
            }
        };
        out.push(NliExample {
            uid: format!("synth-{i:06}"),
            premise,
            hypothesis,
            gold,
            dataset: "synthetic".into(),
            subset: "main".into(),
        });
    }
    Ok(out)
}

/// Summary emitted alongside a filtering run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterSummary {
    pub input_count: usize,
    pub kept_count: usize,
    pub decoding: DecodingConfig,
    pub seed: u64,
    pub sweeps: usize,
}

#[derive(Debug)]
pub struct FilterOutcome {
    pub kept: Vec<NliExample>,
    pub summary: FilterSummary,
}

/// Keep exactly the examples the policy gets wrong (or malformed) under the
/// given decoding. One sweep by default; with `sweeps > 1` an example is kept
/// if any sweep missed it.
pub fn filter_one_missed<C: Completer + Sync>(
    examples: &[NliExample],
    completer: &C,
    template: &PromptTemplate,
    cfg: &DecodingConfig,
    sweeps: usize,
) -> Result<FilterOutcome, DataError> {
    use rayon::prelude::*;
    if sweeps == 0 {
        return Err(DataError::Config("sweeps must be >= 1".into()));
    }
    let mut missed = vec![false; examples.len()];
    for sweep in 0..sweeps {
        let mut sweep_cfg = cfg.clone();
        if sweeps > 1 {
            sweep_cfg.seed = substream(cfg.seed, "filter-sweep", sweep as u64);
        }
        let results: Vec<Result<bool, DataError>> = examples
            .par_iter()
            .map(|ex| {
                let prompt = template.render_example(ex);
                let completion = completer
                    .complete(&prompt, &sweep_cfg)
                    .map_err(|e| DataError::Completion { uid: ex.uid.clone(), source: e })?;
                let parsed = crate::reward::parse(&completion);
                Ok(parsed.answer_label != Some(ex.gold))
            })
            .collect();
        for (slot, r) in missed.iter_mut().zip(results) {
            *slot |= r?;
        }
    }
    let kept: Vec<NliExample> = examples
        .iter()
        .zip(&missed)
        .filter(|(_, &m)| m)
        .map(|(ex, _)| ex.clone())
        .collect();
    let summary = FilterSummary {
        input_count: examples.len(),
        kept_count: kept.len(),
        decoding: cfg.clone(),
        seed: cfg.seed,
        sweeps,
    };
    Ok(FilterOutcome { kept, summary })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rollout::DecodeMode;
    use std::collections::HashMap;

    #[test]
    fn map_hans_is_total_and_surjective() {
        assert_eq!(map_hans(Label::Entailment), BinaryLabel::Entailment);
        assert_eq!(map_hans(Label::Neutral), BinaryLabel::NonEntailment);
        assert_eq!(map_hans(Label::Contradiction), BinaryLabel::NonEntailment);
    }

    #[test]
    fn load_empty_file_is_empty_list() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(load_jsonl(&path).unwrap().is_empty());
    }

    #[test]
    fn unknown_gold_value_errors_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let good = r#"{"uid":"a","premise":"p","hypothesis":"h","gold":"neutral","dataset":"d","subset":"s"}"#;
        let bad = r#"{"uid":"b","premise":"p","hypothesis":"h","gold":"maybe","dataset":"d","subset":"s"}"#;
        std::fs::write(&path, format!("{good}\n{bad}\n")).unwrap();
        let err = load_jsonl(&path).unwrap_err();
        match err {
            DataError::MalformedLine { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn duplicate_uid_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dup.jsonl");
        let line = r#"{"uid":"a","premise":"p","hypothesis":"h","gold":"neutral","dataset":"d","subset":"s"}"#;
        std::fs::write(&path, format!("{line}\n{line}\n")).unwrap();
        assert!(matches!(load_jsonl(&path).unwrap_err(), DataError::DuplicateUid { line: 2, .. }));
    }

    #[test]
    fn jsonl_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.jsonl");
        let examples = vec![
            NliExample {
                uid: "1".into(),
                premise: "alice is red".into(),
                hypothesis: "alice is red".into(),
                gold: Label::Entailment,
                dataset: "synthetic".into(),
                subset: "main".into(),
            },
            NliExample {
                uid: "2".into(),
                premise: "bob is tall".into(),
                hypothesis: "bob is not tall".into(),
                gold: Label::Contradiction,
                dataset: "synthetic".into(),
                subset: "main".into(),
            },
            NliExample {
                uid: "3".into(),
                premise: "carol is sad".into(),
                hypothesis: "dave is old".into(),
                gold: Label::Neutral,
                dataset: "synthetic".into(),
                subset: "main".into(),
            },
        ];
        save_jsonl(&path, &examples).unwrap();
        let loaded = load_jsonl(&path).unwrap();
        assert_eq!(examples, loaded);
        let bytes1 = std::fs::read(&path).unwrap();
        let path2 = dir.path().join("rt2.jsonl");
        save_jsonl(&path2, &loaded).unwrap();
        assert_eq!(bytes1, std::fs::read(&path2).unwrap());
    }

    #[test]
    fn synth_rules_match_spec_examples() {
        // Reflexive pair is entailment; negated pair is contradiction.
        let cfg = SyntheticTaskConfig::default();
        let examples = synth_generate(&cfg, 300).unwrap();
        for ex in &examples {
            match ex.gold {
                Label::Entailment => assert_eq!(ex.premise, ex.hypothesis),
                Label::Contradiction => {
                    let p: Vec<&str> = ex.premise.split_whitespace().collect();
                    let h: Vec<&str> = ex.hypothesis.split_whitespace().collect();
                    assert_eq!(p[0], h[0], "same subject");
                    assert_eq!(p.last(), h.last(), "same attribute");
                    assert_ne!(p.len(), h.len(), "opposite polarity");
                }
                Label::Neutral => {
                    let p_subj = ex.premise.split_whitespace().next().unwrap();
                    let h_subj = ex.hypothesis.split_whitespace().next().unwrap();
                    assert_ne!(p_subj, h_subj, "disjoint subjects");
                }
            }
        }
    }

    #[test]
    fn synth_is_balanced_and_deterministic() {
        let cfg = SyntheticTaskConfig { seed: 9, ..Default::default() };
        let a = synth_generate(&cfg, 3000).unwrap();
        let b = synth_generate(&cfg, 3000).unwrap();
        assert_eq!(a, b);
        let mut counts: HashMap<Label, usize> = HashMap::new();
        for ex in &a {
            *counts.entry(ex.gold).or_default() += 1;
        }
        let max = counts.values().max().unwrap();
        let min = counts.values().min().unwrap();
        assert!(max - min <= 1, "counts {counts:?}");
    }

    #[test]
    fn template_rendering_is_injective_on_distinct_pairs() {
        let t = PromptTemplate::default();
        let a = t.render("alice is red", "bob is blue");
        let b = t.render("alice is red", "bob is green");
        let c = t.render("alice is blue", "bob is blue");
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert!(a.contains("alice is red") && a.contains("bob is blue"));
    }

    #[test]
    fn template_requires_both_slots() {
        assert!(PromptTemplate::new("premise {premise} only").is_err());
        assert!(PromptTemplate::new("{premise} {hypothesis} {premise}").is_err());
    }

    /// Scripted completer: answers wrong on a fixed uid set, correct elsewhere.
    struct Scripted {
        wrong: Vec<String>,
        gold_by_prompt: HashMap<String, Label>,
        uid_by_prompt: HashMap<String, String>,
    }

    impl Completer for Scripted {
        fn complete(&self, prompt: &str, _cfg: &DecodingConfig) -> Result<String, CompleterError> {
            let uid = &self.uid_by_prompt[prompt];
            let gold = self.gold_by_prompt[prompt];
            let label = if self.wrong.contains(uid) {
                ALL_LABELS.iter().copied().find(|l| *l != gold).unwrap()
            } else {
                gold
            };
            Ok(format!("<think>x</think><answer>{label}</answer>"))
        }
    }

    fn fixture(n: usize) -> Vec<NliExample> {
        synth_generate(&SyntheticTaskConfig { seed: 4, ..Default::default() }, n).unwrap()
    }

    fn scripted(examples: &[NliExample], wrong: &[usize]) -> Scripted {
        let template = PromptTemplate::default();
        Scripted {
            wrong: wrong.iter().map(|&i| examples[i].uid.clone()).collect(),
            gold_by_prompt: examples
                .iter()
                .map(|e| (template.render_example(e), e.gold))
                .collect(),
            uid_by_prompt: examples
                .iter()
                .map(|e| (template.render_example(e), e.uid.clone()))
                .collect(),
        }
    }

    #[test]
    fn filter_keeps_exactly_the_missed_ids() {
        let examples = fixture(10);
        let completer = scripted(&examples, &[2, 5, 9]);
        let out = filter_one_missed(
            &examples,
            &completer,
            &PromptTemplate::default(),
            &DecodingConfig::greedy(16),
            1,
        )
        .unwrap();
        let kept_uids: Vec<&str> = out.kept.iter().map(|e| e.uid.as_str()).collect();
        assert_eq!(kept_uids, vec![&examples[2].uid, &examples[5].uid, &examples[9].uid]);
        assert_eq!(out.summary.input_count, 10);
        assert_eq!(out.summary.kept_count, 3);
    }

    #[test]
    fn filter_with_always_correct_policy_is_empty() {
        let examples = fixture(8);
        let completer = scripted(&examples, &[]);
        let out = filter_one_missed(
            &examples,
            &completer,
            &PromptTemplate::default(),
            &DecodingConfig::greedy(16),
            1,
        )
        .unwrap();
        assert!(out.kept.is_empty());
    }

    struct Garbage;
    impl Completer for Garbage {
        fn complete(&self, _: &str, _: &DecodingConfig) -> Result<String, CompleterError> {
            Ok("beep boop".into())
        }
    }

    #[test]
    fn filter_with_malformed_policy_keeps_everything_in_order() {
        let examples = fixture(6);
        let out = filter_one_missed(
            &examples,
            &Garbage,
            &PromptTemplate::default(),
            &DecodingConfig::greedy(16),
            1,
        )
        .unwrap();
        assert_eq!(out.kept, examples);
        // Idempotent: re-running keeps the same set.
        let again = filter_one_missed(
            &out.kept,
            &Garbage,
            &PromptTemplate::default(),
            &DecodingConfig::greedy(16),
            1,
        )
        .unwrap();
        assert_eq!(again.kept, out.kept);
    }

    #[test]
    fn mode_kind_serializes_lowercase() {
        assert_eq!(serde_json::to_string(&DecodeMode::Greedy).unwrap(), "\"greedy\"");
    }
}

//! Completion format contract and reward assignment.
//!
//! A well-formed completion is exactly one think block followed by exactly
//! one answer block, with nothing but whitespace outside them:
//!
//! ```text
//! <think> free text without '<' </think> <answer> entailment </answer>
//! ```
//!
//! Tag nesting and repetition are ruled out by forbidding `<` inside block
//! bodies. The answer body must normalize (trim + lowercase) to one of the
//! three NLI labels. Parsing is total: malformation is a value, not an error.
//!
//! Rewards are three-tier and live in [0, 1]: full credit for a well-formed
//! correct answer, a small credit for well-formed wrong answers, nothing for
//! malformed text.

use serde::{Deserialize, Serialize};

use crate::data::Label;

pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";
pub const ANSWER_OPEN: &str = "<answer>";
pub const ANSWER_CLOSE: &str = "</answer>";

/// Outcome of parsing one completion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedCompletion {
    pub format_ok: bool,
    pub think_text: Option<String>,
    pub answer_label: Option<Label>,
    pub raw: String,
}

impl ParsedCompletion {
    fn malformed(raw: &str) -> Self {
        ParsedCompletion {
            format_ok: false,
            think_text: None,
            answer_label: None,
            raw: raw.to_string(),
        }
    }
}

/// Scalar reward tiers.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RewardConfig {
    pub correct_reward: f64,
    pub format_only_reward: f64,
    pub malformed_reward: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig { correct_reward: 1.0, format_only_reward: 0.1, malformed_reward: 0.0 }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), String> {
        let vals = [self.correct_reward, self.format_only_reward, self.malformed_reward];
        if vals.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err("reward tiers must lie in [0, 1]".into());
        }
        if !(self.correct_reward >= self.format_only_reward
            && self.format_only_reward >= self.malformed_reward)
        {
            return Err("reward tiers must satisfy correct >= format_only >= malformed".into());
        }
        Ok(())
    }
}

/// Consume `tag` at the start of `s`, or fail.
fn eat<'a>(s: &'a str, tag: &str) -> Option<&'a str> {
    s.strip_prefix(tag)
}

/// Consume a block body: everything up to the next '<'. Fails if none.
fn eat_body(s: &str) -> Option<(&str, &str)> {
    let pos = s.find('<')?;
    Some((&s[..pos], &s[pos..]))
}

/// Parse a raw completion against the think/answer contract. Total and
/// deterministic on arbitrary text.
pub fn parse(raw: &str) -> ParsedCompletion {
    let s = raw.trim_start();
    let Some(s) = eat(s, THINK_OPEN) else { return ParsedCompletion::malformed(raw) };
    let Some((think_body, s)) = eat_body(s) else { return ParsedCompletion::malformed(raw) };
    let Some(s) = eat(s, THINK_CLOSE) else { return ParsedCompletion::malformed(raw) };
    let s = s.trim_start();
    let Some(s) = eat(s, ANSWER_OPEN) else { return ParsedCompletion::malformed(raw) };
    let Some((answer_body, s)) = eat_body(s) else { return ParsedCompletion::malformed(raw) };
    let Some(s) = eat(s, ANSWER_CLOSE) else { return ParsedCompletion::malformed(raw) };
    if !s.trim_start().is_empty() {
        return ParsedCompletion::malformed(raw);
    }
    let Some(label) = Label::from_text(answer_body) else {
        return ParsedCompletion::malformed(raw);
    };
    ParsedCompletion {
        format_ok: true,
        think_text: Some(think_body.to_string()),
        answer_label: Some(label),
        raw: raw.to_string(),
    }
}

/// Reward for one parsed completion against the gold label.
pub fn reward(parsed: &ParsedCompletion, gold: Label, cfg: &RewardConfig) -> f64 {
    match parsed.answer_label {
        Some(label) if parsed.format_ok && label == gold => cfg.correct_reward,
        Some(_) if parsed.format_ok => cfg.format_only_reward,
        _ => cfg.malformed_reward,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn well_formed_completion_parses() {
        let p = parse("<think>x</think>\n<answer>entailment</answer>");
        assert!(p.format_ok);
        assert_eq!(p.think_text.as_deref(), Some("x"));
        assert_eq!(p.answer_label, Some(Label::Entailment));
    }

    #[test]
    fn empty_string_is_malformed() {
        let p = parse("");
        assert!(!p.format_ok);
        assert!(p.answer_label.is_none());
    }

    #[test]
    fn wrong_block_order_is_malformed() {
        assert!(!parse("<answer>neutral</answer><think>y</think>").format_ok);
    }

    #[test]
    fn repeated_blocks_are_malformed() {
        assert!(!parse("<think>a</think><think>b</think><answer>neutral</answer>").format_ok);
        assert!(!parse("<think>a</think><answer>neutral</answer><answer>neutral</answer>").format_ok);
    }

    #[test]
    fn extra_top_level_text_is_malformed() {
        assert!(!parse("so <think>a</think><answer>neutral</answer>").format_ok);
        assert!(!parse("<think>a</think><answer>neutral</answer> bye").format_ok);
        assert!(!parse("<think>a</think> uh <answer>neutral</answer>").format_ok);
    }

    #[test]
    fn label_matching_trims_and_ignores_case() {
        assert_eq!(
            parse("<think>t</think><answer> Neutral </answer>").answer_label,
            Some(Label::Neutral)
        );
        assert_eq!(
            parse("<think>t</think><answer>CONTRADICTION</answer>").answer_label,
            Some(Label::Contradiction)
        );
    }

    #[test]
    fn punctuated_label_is_rejected() {
        assert!(!parse("<think>t</think><answer>Entailment.</answer>").format_ok);
        assert!(!parse("<think>t</think><answer>entailment neutral</answer>").format_ok);
    }

    #[test]
    fn whitespace_around_blocks_is_fine() {
        assert!(parse("  <think> a b </think>\n\n<answer>neutral</answer>\t").format_ok);
    }

    #[test]
    fn unterminated_blocks_are_malformed() {
        assert!(!parse("<think>a<answer>neutral</answer>").format_ok);
        assert!(!parse("<think>a</think><answer>neutral").format_ok);
    }

    #[test]
    fn reward_tiers() {
        let cfg = RewardConfig::default();
        let correct = parse("<think>x</think><answer>entailment</answer>");
        let wrong = parse("<think>x</think><answer>neutral</answer>");
        let junk = parse("garbage");
        assert_eq!(reward(&correct, Label::Entailment, &cfg), 1.0);
        assert_eq!(reward(&wrong, Label::Entailment, &cfg), 0.1);
        assert_eq!(reward(&junk, Label::Entailment, &cfg), 0.0);
    }

    #[test]
    fn reward_monotone_in_correctness_and_format() {
        let cfg = RewardConfig::default();
        for gold in crate::data::ALL_LABELS {
            let correct = parse(&format!("<think>x</think><answer>{gold}</answer>"));
            let junk = parse("<answer></think>");
            for other in crate::data::ALL_LABELS {
                if other == gold {
                    continue;
                }
                let wrong = parse(&format!("<think>x</think><answer>{other}</answer>"));
                let (rc, rw, rm) =
                    (reward(&correct, gold, &cfg), reward(&wrong, gold, &cfg), reward(&junk, gold, &cfg));
                assert!(rc >= rw && rw >= rm);
                assert!((0.0..=1.0).contains(&rc) && (0.0..=1.0).contains(&rm));
            }
        }
    }

    #[test]
    fn invalid_reward_configs_rejected() {
        assert!(RewardConfig { correct_reward: 1.5, ..Default::default() }.validate().is_err());
        assert!(RewardConfig { format_only_reward: 0.0, malformed_reward: 0.1, correct_reward: 1.0 }
            .validate()
            .is_err());
        assert!(RewardConfig::default().validate().is_ok());
    }
}

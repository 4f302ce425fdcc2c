//! Autoregressive sampling of completion groups.
//!
//! Each completion records the log-probability of every drawn token under the
//! *untruncated temperature-1* distribution of the sampling policy. Those are
//! the π_old values that importance ratios are computed against, so they stay
//! well-defined even when sampling used temperature or nucleus shaping.
//! Completion i of a group draws from a ChaCha stream seeded with
//! `cfg.seed ^ i`, which makes groups reproducible and parallelizable.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernels;
use crate::policy::{score_under, DecodeState, ModelWeights, PolicyError, Tokenizer, TokenizerError};
use crate::rng::rng_from;

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error("prompt of {len} tokens does not leave room for {new} new tokens (max_seq_len {max})")]
    PromptTooLong { len: usize, new: usize, max: usize },
    #[error("invalid decoding config: {0}")]
    Config(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Errors surfaced by any completion source (local policy, scripted, endpoint).
#[derive(Debug, Error)]
pub enum CompleterError {
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error("endpoint error: {0}")]
    Endpoint(String),
    #[error("{0}")]
    Other(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    Sampled,
}

/// Decoding settings for sampling and evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodingConfig {
    pub mode: DecodeMode,
    /// Softmax temperature; ignored in greedy mode.
    pub temperature: f64,
    /// Nucleus mass in (0, 1]; ignored in greedy mode.
    pub top_p: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for DecodingConfig {
    fn default() -> Self {
        DecodingConfig {
            mode: DecodeMode::Sampled,
            temperature: 1.0,
            top_p: 1.0,
            max_new_tokens: 24,
            seed: 0,
        }
    }
}

impl DecodingConfig {
    pub fn greedy(max_new_tokens: usize) -> Self {
        DecodingConfig { mode: DecodeMode::Greedy, max_new_tokens, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), RolloutError> {
        if self.max_new_tokens == 0 {
            return Err(RolloutError::Config("max_new_tokens must be >= 1".into()));
        }
        if self.mode == DecodeMode::Sampled {
            if !(self.temperature > 0.0) {
                return Err(RolloutError::Config("temperature must be > 0".into()));
            }
            if !(self.top_p > 0.0 && self.top_p <= 1.0) {
                return Err(RolloutError::Config("top_p must be in (0, 1]".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Termination {
    Eos,
    Length,
}

/// One sampled completion, including the eos token when one was drawn.
#[derive(Debug, Clone)]
pub struct Completion {
    pub ids: Vec<u32>,
    pub old_log_probs: Vec<f64>,
    pub terminated_by: Termination,
}

/// G completions sampled for one prompt under π_old.
#[derive(Debug, Clone)]
pub struct RolloutGroup {
    pub prompt_ids: Vec<u32>,
    pub completions: Vec<Completion>,
}

impl RolloutGroup {
    pub fn group_size(&self) -> usize {
        self.completions.len()
    }
}

/// Greedy argmax with lowest-id tie-breaking.
pub fn argmax_lowest(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Indices kept by nucleus truncation: tokens in decreasing-probability order
/// (ties by ascending id) up to and including the one that crosses `top_p`.
pub fn nucleus_keep_set(probs: &[f64], top_p: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for idx in order {
        kept.push(idx);
        mass += probs[idx];
        if mass >= top_p {
            break;
        }
    }
    kept
}

/// Draw one token from a logits row under the config, using `u ~ U[0,1)`.
/// Returns the drawn id; `u` is ignored in greedy mode.
fn choose_token(logits: &[f64], cfg: &DecodingConfig, u: f64) -> u32 {
    match cfg.mode {
        DecodeMode::Greedy => argmax_lowest(logits) as u32,
        DecodeMode::Sampled => {
            let scaled: Vec<f64> = logits.iter().map(|l| l / cfg.temperature).collect();
            let mut probs = vec![0.0; scaled.len()];
            kernels::softmax_row(&scaled, &mut probs);
            let kept = nucleus_keep_set(&probs, cfg.top_p);
            let total: f64 = kept.iter().map(|&i| probs[i]).sum();
            let mut acc = 0.0;
            for &i in &kept {
                acc += probs[i] / total;
                if u < acc {
                    return i as u32;
                }
            }
            *kept.last().expect("kept set is never empty") as u32
        }
    }
}

/// Sample one completion; the caller provides the per-completion RNG.
fn sample_completion(
    weights: &ModelWeights,
    prompt_ids: &[u32],
    eos_id: u32,
    cfg: &DecodingConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Completion, RolloutError> {
    let mut state = DecodeState::new(weights);
    let mut logits = state.prefill(prompt_ids)?;
    let mut ids = Vec::new();
    let mut old_log_probs = Vec::new();
    let mut terminated_by = Termination::Length;
    for _ in 0..cfg.max_new_tokens {
        let u: f64 = rng.gen();
        let tok = choose_token(&logits, cfg, u);
        ids.push(tok);
        old_log_probs.push(kernels::log_prob_at(&logits, tok as usize));
        if tok == eos_id {
            terminated_by = Termination::Eos;
            break;
        }
        logits = state.push_token(tok)?;
    }
    Ok(Completion { ids, old_log_probs, terminated_by })
}

/// Sample a group of `g` completions for one prompt.
pub fn sample_group(
    weights: &ModelWeights,
    prompt_ids: &[u32],
    eos_id: u32,
    g: usize,
    cfg: &DecodingConfig,
) -> Result<RolloutGroup, RolloutError> {
    cfg.validate()?;
    if g == 0 {
        return Err(RolloutError::Config("group size must be >= 1".into()));
    }
    let max = weights.spec.max_seq_len;
    if prompt_ids.is_empty() || prompt_ids.len() + cfg.max_new_tokens > max {
        return Err(RolloutError::PromptTooLong {
            len: prompt_ids.len(),
            new: cfg.max_new_tokens,
            max,
        });
    }
    let completions = (0..g)
        .map(|i| {
            let mut rng = rng_from(cfg.seed ^ i as u64);
            sample_completion(weights, prompt_ids, eos_id, cfg, &mut rng)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(RolloutGroup { prompt_ids: prompt_ids.to_vec(), completions })
}

/// Anything that can turn a prompt into completion text: a local policy, a
/// scripted stand-in, or a hosted chat endpoint.
pub trait Completer {
    fn complete(&self, prompt: &str, cfg: &DecodingConfig) -> Result<String, CompleterError>;
}

/// A local policy driven through its tokenizer.
pub struct LocalCompleter<'a> {
    pub weights: &'a ModelWeights,
    pub tokenizer: &'a Tokenizer,
}

impl<'a> LocalCompleter<'a> {
    pub fn new(weights: &'a ModelWeights, tokenizer: &'a Tokenizer) -> Self {
        LocalCompleter { weights, tokenizer }
    }
}

impl Completer for LocalCompleter<'_> {
    fn complete(&self, prompt: &str, cfg: &DecodingConfig) -> Result<String, CompleterError> {
        let prompt_ids = self.tokenizer.encode(prompt)?;
        let group = sample_group(self.weights, &prompt_ids, self.tokenizer.eos_id(), 1, cfg)?;
        Ok(self.tokenizer.decode_completion(&group.completions[0].ids)?)
    }
}

/// Log-probabilities a trained policy assigns to a recorded completion; the
/// non-differentiable counterpart of the graph scoring path.
pub fn score_completion(
    weights: &ModelWeights,
    prompt_ids: &[u32],
    completion_ids: &[u32],
) -> Result<Vec<f64>, RolloutError> {
    Ok(score_under(weights, prompt_ids, completion_ids)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicySpec;

    fn tiny_weights(seed: u64) -> ModelWeights {
        let spec = PolicySpec {
            vocab_size: 13,
            d_model: 16,
            n_layers: 2,
            n_heads: 4,
            max_seq_len: 32,
            tokenizer_id: "test".into(),
        };
        ModelWeights::init(spec, seed).unwrap()
    }

    #[test]
    fn greedy_is_deterministic_and_seed_free() {
        let w = tiny_weights(1);
        let prompt = vec![1u32, 2, 3];
        let mut cfgs = vec![DecodingConfig::greedy(8)];
        cfgs.push(DecodingConfig { seed: 999, ..DecodingConfig::greedy(8) });
        let outs: Vec<Vec<u32>> = cfgs
            .iter()
            .map(|cfg| sample_group(&w, &prompt, 1, 1, cfg).unwrap().completions[0].ids.clone())
            .collect();
        assert_eq!(outs[0], outs[1]);
    }

    #[test]
    fn greedy_invariant_to_logit_rescaling() {
        // Argmax chains only depend on orderings: temperature must not matter
        // in greedy mode.
        let w = tiny_weights(2);
        let prompt = vec![4u32, 5];
        let a = sample_group(&w, &prompt, 1, 1, &DecodingConfig::greedy(6)).unwrap();
        let cfg = DecodingConfig {
            mode: DecodeMode::Greedy,
            temperature: 17.0,
            top_p: 0.4,
            max_new_tokens: 6,
            seed: 3,
        };
        let b = sample_group(&w, &prompt, 1, 1, &cfg).unwrap();
        assert_eq!(a.completions[0].ids, b.completions[0].ids);
    }

    #[test]
    fn sampling_is_reproducible_per_seed() {
        let w = tiny_weights(3);
        let prompt = vec![1u32, 2];
        let cfg = DecodingConfig { max_new_tokens: 8, seed: 42, ..Default::default() };
        let a = sample_group(&w, &prompt, 1, 3, &cfg).unwrap();
        let b = sample_group(&w, &prompt, 1, 3, &cfg).unwrap();
        for (x, y) in a.completions.iter().zip(&b.completions) {
            assert_eq!(x.ids, y.ids);
            assert_eq!(x.old_log_probs, y.old_log_probs);
        }
        let c = sample_group(&w, &prompt, 1, 3, &DecodingConfig { seed: 43, ..cfg }).unwrap();
        assert!(a.completions.iter().zip(&c.completions).any(|(x, y)| x.ids != y.ids));
    }

    #[test]
    fn old_log_probs_are_finite_and_nonpositive() {
        let w = tiny_weights(4);
        let cfg = DecodingConfig { max_new_tokens: 10, seed: 7, ..Default::default() };
        let group = sample_group(&w, &[1, 2, 3], 1, 4, &cfg).unwrap();
        for c in &group.completions {
            assert_eq!(c.ids.len(), c.old_log_probs.len());
            assert!(c.old_log_probs.iter().all(|lp| lp.is_finite() && *lp <= 0.0));
        }
    }

    #[test]
    fn prompt_too_long_rejected() {
        let w = tiny_weights(0);
        let prompt = vec![0u32; 30];
        let err = sample_group(&w, &prompt, 1, 1, &DecodingConfig::greedy(8)).unwrap_err();
        assert!(matches!(err, RolloutError::PromptTooLong { .. }));
    }

    #[test]
    fn nucleus_keeps_only_the_crossing_token() {
        // Distribution [0.6, 0.2, 0.1, 0.1] at top_p=0.5: token 0 crosses the
        // threshold on its own and is the entire nucleus.
        let kept = nucleus_keep_set(&[0.6, 0.2, 0.1, 0.1], 0.5);
        assert_eq!(kept, vec![0]);
    }

    #[test]
    fn nucleus_keep_set_is_monotone_in_top_p() {
        use rand::Rng;
        let mut rng = rng_from(5);
        for _ in 0..200 {
            let raw: Vec<f64> = (0..6).map(|_| rng.gen_range(0.01..1.0)).collect();
            let z: f64 = raw.iter().sum();
            let probs: Vec<f64> = raw.iter().map(|v| v / z).collect();
            let (p1, p2) = {
                let a: f64 = rng.gen_range(0.05..1.0);
                let b: f64 = rng.gen_range(0.05..1.0);
                (a.min(b), a.max(b))
            };
            let small = nucleus_keep_set(&probs, p1);
            let large = nucleus_keep_set(&probs, p2);
            for idx in &small {
                assert!(large.contains(idx), "p1 {p1} p2 {p2} probs {probs:?}");
            }
        }
    }

    #[test]
    fn full_nucleus_unit_temperature_matches_softmax_frequencies() {
        // 50k categorical draws from fixed 4-token logits; empirical
        // frequencies must sit within 3σ of the multinomial expectation.
        let logits = [1.2, 0.3, -0.5, 0.0];
        let mut probs = [0.0; 4];
        kernels::softmax_row(&logits, &mut probs);
        let cfg = DecodingConfig { max_new_tokens: 1, seed: 0, ..Default::default() };
        let n = 50_000;
        let mut counts = [0usize; 4];
        let mut rng = rng_from(123);
        for _ in 0..n {
            let u: f64 = rng.gen();
            counts[choose_token(&logits, &cfg, u) as usize] += 1;
        }
        for i in 0..4 {
            let expect = n as f64 * probs[i];
            let sigma = (n as f64 * probs[i] * (1.0 - probs[i])).sqrt();
            let diff = (counts[i] as f64 - expect).abs();
            assert!(diff <= 3.0 * sigma, "token {i}: {diff} > 3σ {sigma}");
        }
    }

    #[test]
    fn score_under_matches_recorded_old_log_probs() {
        let w = tiny_weights(6);
        let prompt = vec![2u32, 9, 4];
        let cfg = DecodingConfig { max_new_tokens: 8, seed: 11, ..Default::default() };
        let group = sample_group(&w, &prompt, 1, 4, &cfg).unwrap();
        for c in &group.completions {
            let scored = score_completion(&w, &prompt, &c.ids).unwrap();
            assert_eq!(scored.len(), c.old_log_probs.len());
            for (a, b) in scored.iter().zip(&c.old_log_probs) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn one_token_vocab_scores_zero() {
        let spec = PolicySpec {
            vocab_size: 1,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            max_seq_len: 8,
            tokenizer_id: "one".into(),
        };
        let w = ModelWeights::init(spec, 0).unwrap();
        let lps = score_completion(&w, &[0], &[0, 0, 0]).unwrap();
        assert!(lps.iter().all(|&lp| lp == 0.0));
    }

    #[test]
    fn summed_log_probs_match_replayed_stepwise_products() {
        // exp(Σ log p) must equal the product of per-step softmax entries from
        // an independent full-forward replay.
        let w = tiny_weights(8);
        let prompt = vec![1u32, 3];
        let cfg = DecodingConfig { max_new_tokens: 6, seed: 2, ..Default::default() };
        let group = sample_group(&w, &prompt, 1, 2, &cfg).unwrap();
        for c in &group.completions {
            let lps = score_completion(&w, &prompt, &c.ids).unwrap();
            let total = lps.iter().sum::<f64>().exp();
            let mut product = 1.0;
            let mut seq = prompt.clone();
            for &tok in &c.ids {
                let logits = crate::policy::forward_logits(&w, &seq).unwrap();
                let v = w.spec.vocab_size;
                let last = &logits[(seq.len() - 1) * v..seq.len() * v];
                let mut probs = vec![0.0; v];
                kernels::softmax_row(last, &mut probs);
                product *= probs[tok as usize];
                seq.push(tok);
            }
            let rel = (total - product).abs() / product.max(1e-300);
            assert!(rel < 1e-10, "rel err {rel}");
        }
    }
}

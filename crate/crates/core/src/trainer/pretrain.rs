//! Base-model creation by supervised next-token training.
//!
//! GRPO needs a starting policy that already follows the think/answer format
//! (the stand-in for a pretrained instruct model). This trains a fresh
//! transformer on templated completions whose think block echoes the
//! hypothesis. With `gold_labels = false` the answer labels are random, so
//! the resulting base is format-fluent but task-naive (near-chance accuracy);
//! with `gold_labels = true` it is trained on the task itself, which is the
//! starting point for the quantization experiments.

use rand::Rng;
use rayon::prelude::*;
use std::collections::BTreeMap;

use crate::autodiff::Graph;
use crate::data::{Label, NliExample, PromptTemplate, ALL_LABELS};
use crate::policy::{ModelWeights, Policy, PolicySpec, Tokenizer, TrainableSet};
use crate::rng::{rng_from, substream};
use crate::trainer::optim::{clip_global_norm, Adam};
use crate::trainer::TrainError;

#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_grad_norm: f64,
    pub seed: u64,
    /// Train on gold labels (task-aware base) instead of random ones.
    pub gold_labels: bool,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 400,
            batch_size: 16,
            learning_rate: 1e-3,
            max_grad_norm: 1.0,
            seed: 0,
            gold_labels: false,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            max_seq_len: 256,
        }
    }
}

/// Word tokenizer covering the template, every word in the examples, and the
/// labels/specials.
pub fn build_tokenizer(examples: &[NliExample], template: &PromptTemplate) -> Tokenizer {
    let mut words: Vec<String> = template.fixed_words();
    for ex in examples {
        words.extend(ex.premise.split_whitespace().map(str::to_string));
        words.extend(ex.hypothesis.split_whitespace().map(str::to_string));
    }
    Tokenizer::word_level(words)
}

/// The supervised target completion for one example.
pub fn warmup_completion_text(ex: &NliExample, label: Label) -> String {
    format!("<think> {} </think> <answer> {label} </answer>", ex.hypothesis)
}

/// Train a fresh base model. Returns the weights and the tokenizer they are
/// bound to.
pub fn pretrain_base(
    examples: &[NliExample],
    template: &PromptTemplate,
    cfg: &PretrainConfig,
) -> Result<(ModelWeights, Tokenizer), TrainError> {
    if examples.is_empty() {
        return Err(TrainError::Config("pretraining needs a non-empty dataset".into()));
    }
    if cfg.steps == 0 || cfg.batch_size == 0 {
        return Err(TrainError::Config("steps and batch_size must be >= 1".into()));
    }
    let tokenizer = build_tokenizer(examples, template);
    let spec = PolicySpec {
        vocab_size: tokenizer.vocab_size(),
        d_model: cfg.d_model,
        n_layers: cfg.n_layers,
        n_heads: cfg.n_heads,
        max_seq_len: cfg.max_seq_len,
        tokenizer_id: tokenizer.tokenizer_id(),
    };
    let weights = ModelWeights::init(spec, substream(cfg.seed, "base-init", 0))?;
    let mut policy = Policy::dense(weights);

    // Tokenize once.
    let prompts: Vec<Vec<u32>> = examples
        .iter()
        .map(|ex| tokenizer.encode(&template.render_example(ex)))
        .collect::<Result<_, _>>()
        .map_err(crate::policy::PolicyError::from)?;

    let mut adam = Adam::new();
    let param_names = ModelWeights::param_names(policy.spec());
    for step in 0..cfg.steps {
        let mut rng = rng_from(substream(cfg.seed, "pretrain-data", step as u64));
        let batch: Vec<usize> =
            (0..cfg.batch_size).map(|_| rng.gen_range(0..examples.len())).collect();

        let jobs: Vec<(usize, Label)> = batch
            .iter()
            .enumerate()
            .map(|(slot, &idx)| {
                let label = if cfg.gold_labels {
                    examples[idx].gold
                } else {
                    let mut lrng = rng_from(substream(
                        cfg.seed,
                        "pretrain-label",
                        (step * cfg.batch_size + slot) as u64,
                    ));
                    ALL_LABELS[lrng.gen_range(0..3)]
                };
                (idx, label)
            })
            .collect();

        let results: Vec<Result<BTreeMap<String, Vec<f64>>, TrainError>> = jobs
            .par_iter()
            .map(|&(idx, label)| {
                let ex = &examples[idx];
                let mut completion_ids =
                    tokenizer.encode(&warmup_completion_text(ex, label)).map_err(
                        crate::policy::PolicyError::from,
                    )?;
                completion_ids.push(tokenizer.eos_id());
                let mut g = Graph::new();
                let (lp, bindings) = policy.completion_log_probs_graph(
                    &mut g,
                    &prompts[idx],
                    &completion_ids,
                    TrainableSet::Full,
                )?;
                let mean_lp = g.mean_all(lp)?;
                let loss = g.mul_scalar(mean_lp, -1.0)?;
                g.backward(loss)?;
                let mut grads = BTreeMap::new();
                for (name, id) in &bindings.entries {
                    if let Some(grad) = g.grad(*id) {
                        grads.insert(name.clone(), grad.to_vec());
                    }
                }
                Ok(grads)
            })
            .collect();

        let mut total: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for r in results {
            let grads = r?;
            for (name, g) in grads {
                match total.get_mut(&name) {
                    None => {
                        total.insert(name, g);
                    }
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            *a += b;
                        }
                    }
                }
            }
        }
        let inv = 1.0 / cfg.batch_size as f64;
        for g in total.values_mut() {
            for v in g.iter_mut() {
                *v *= inv;
            }
        }
        clip_global_norm(&mut total, cfg.max_grad_norm);
        adam.begin_step();
        let Policy { base: crate::policy::Base::Dense(w), .. } = &mut policy else {
            unreachable!("pretraining always runs on a dense base")
        };
        for name in &param_names {
            if let Some(grad) = total.get(name) {
                let param = w.tensor_mut(name).expect("named tensor");
                adam.update(cfg.learning_rate, name, param, grad);
            }
        }
    }

    let Policy { base: crate::policy::Base::Dense(w), .. } = policy else { unreachable!() };
    Ok((w, tokenizer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SyntheticTaskConfig};

    #[test]
    fn tokenizer_covers_rendered_prompts_and_completions() {
        let examples =
            synth_generate(&SyntheticTaskConfig { seed: 1, ..Default::default() }, 50).unwrap();
        let template = PromptTemplate::default();
        let tok = build_tokenizer(&examples, &template);
        for ex in &examples {
            tok.encode(&template.render_example(ex)).unwrap();
            tok.encode(&warmup_completion_text(ex, ex.gold)).unwrap();
        }
    }

    #[test]
    fn short_pretrain_runs_and_reduces_loss() {
        let examples =
            synth_generate(&SyntheticTaskConfig { seed: 2, ..Default::default() }, 24).unwrap();
        let template = PromptTemplate::default();
        let cfg = PretrainConfig {
            steps: 30,
            batch_size: 4,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            max_seq_len: 64,
            gold_labels: true,
            seed: 3,
            ..Default::default()
        };
        let (w, tok) = pretrain_base(&examples, &template, &cfg).unwrap();
        // The trained model should assign the warmup completion a much higher
        // likelihood than a fresh one does.
        let fresh = ModelWeights::init(w.spec.clone(), 123).unwrap();
        let ex = &examples[0];
        let prompt = tok.encode(&template.render_example(ex)).unwrap();
        let mut comp = tok.encode(&warmup_completion_text(ex, ex.gold)).unwrap();
        comp.push(tok.eos_id());
        let trained: f64 =
            crate::policy::score_under(&w, &prompt, &comp).unwrap().iter().sum();
        let untrained: f64 =
            crate::policy::score_under(&fresh, &prompt, &comp).unwrap().iter().sum();
        assert!(trained > untrained + 1.0, "trained {trained} vs untrained {untrained}");
    }
}

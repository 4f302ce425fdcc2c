//! End-to-end GRPO training: batch sampling, reward scoring, inner
//! optimization passes against frozen π_old, gradient clipping, LR warmup,
//! metrics logging, and checkpoint retention.

mod config;
mod metrics;
mod optim;
mod pretrain;

pub use config::TrainConfig;
pub use metrics::{ema, read_metrics, MetricsRow, MetricsWriter, METRICS_HEADER};
pub use optim::{clip_global_norm, Adam};
pub use pretrain::{build_tokenizer, pretrain_base, warmup_completion_text, PretrainConfig};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::data::{load_jsonl, DataError, NliExample, PromptTemplate};
use crate::grpo::{grpo_loss, GrpoError};
use crate::policy::{
    load_base, save_adapter, AdapterState, Base, CheckpointError, Policy, PolicyError,
    QuantizedModel, Tokenizer, TrainableSet, DEFAULT_GROUP_SIZE,
};
use crate::reward::{parse, reward};
use crate::rng::substream;
use crate::rollout::{sample_group, RolloutError, RolloutGroup};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("non-finite loss at step {step}; last good checkpoint retained")]
    NonFiniteLoss { step: u64 },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Grpo(#[from] GrpoError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// What a finished run hands back.
pub struct TrainOutcome {
    pub adapter: AdapterState,
    pub steps_run: u64,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: Option<PathBuf>,
    pub final_reward_ema: f64,
}

/// Retains the last three step checkpoints plus the best one by reward EMA.
struct CheckpointKeeper {
    dir: PathBuf,
    saved: Vec<(u64, PathBuf, f64)>,
    best: Option<(u64, PathBuf, f64)>,
}

impl CheckpointKeeper {
    fn new(dir: &Path) -> Result<CheckpointKeeper, TrainError> {
        std::fs::create_dir_all(dir)
            .map_err(|e| TrainError::Io { path: dir.display().to_string(), source: e })?;
        Ok(CheckpointKeeper { dir: dir.to_path_buf(), saved: Vec::new(), best: None })
    }

    fn save(
        &mut self,
        step: u64,
        spec: &crate::policy::PolicySpec,
        adapter: &AdapterState,
        reward_ema: f64,
    ) -> Result<(), TrainError> {
        let path = self.dir.join(format!("adapter-step{step:06}.ckpt"));
        save_adapter(&path, spec, adapter)?;
        self.saved.push((step, path.clone(), reward_ema));
        if self.best.as_ref().map(|(_, _, e)| reward_ema >= *e).unwrap_or(true) {
            self.best = Some((step, path, reward_ema));
        }
        self.prune();
        Ok(())
    }

    fn prune(&mut self) {
        if self.saved.len() <= 3 {
            return;
        }
        let cutoff = self.saved.len() - 3;
        let best_step = self.best.as_ref().map(|(s, _, _)| *s);
        let (drop, keep): (Vec<_>, Vec<_>) = std::mem::take(&mut self.saved)
            .into_iter()
            .enumerate()
            .partition(|(i, (step, _, _))| *i < cutoff && Some(*step) != best_step);
        self.saved = keep.into_iter().map(|(_, v)| v).collect();
        for (_, (_, path, _)) in drop {
            if let Err(e) = std::fs::remove_file(&path) {
                log::warn!("could not prune checkpoint {}: {e}", path.display());
            }
        }
    }

    fn best_path(&self) -> Option<PathBuf> {
        self.best.as_ref().map(|(_, p, _)| p.clone())
    }
}

fn warmup_lr(base: f64, warmup_steps: usize, step: u64) -> f64 {
    if warmup_steps == 0 {
        return base;
    }
    let w = warmup_steps as f64;
    base * ((step as f64 + 1.0) / w).min(1.0)
}

/// Deterministic batch of distinct example indices for one step.
fn choose_batch(n: usize, k: usize, seed: u64) -> Vec<usize> {
    use rand::Rng;
    let mut rng = crate::rng::rng_from(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k.min(n) {
        let j = rng.gen_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(k.min(n));
    idx
}

/// Train from files named in the config: loads the dataset and frozen base,
/// then runs [`train_on`].
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let examples = load_jsonl(&cfg.data_path)?;
    let (base_weights, tokenizer) = load_base(&cfg.base_path)?;
    let base = if cfg.quantize_base {
        Base::Quantized(QuantizedModel::from_dense(&base_weights, DEFAULT_GROUP_SIZE))
    } else {
        Base::Dense(base_weights)
    };
    train_on(cfg, base, &tokenizer, &examples, &PromptTemplate::default())
}

/// The GRPO training loop over an already-loaded base and dataset.
pub fn train_on(
    cfg: &TrainConfig,
    base: Base,
    tokenizer: &Tokenizer,
    examples: &[NliExample],
    template: &PromptTemplate,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(TrainError::Config("training dataset is empty".into()));
    }
    let spec = base.dense_view().spec.clone();
    if spec.tokenizer_id != tokenizer.tokenizer_id() {
        return Err(TrainError::Config(format!(
            "base model is bound to tokenizer {}, got {}",
            spec.tokenizer_id,
            tokenizer.tokenizer_id()
        )));
    }
    let grpo_cfg = cfg.grpo_config();
    let reward_cfg = cfg.reward_config();
    let eos = tokenizer.eos_id();

    let prompt_ids: Vec<Vec<u32>> = examples
        .iter()
        .map(|ex| tokenizer.encode(&template.render_example(ex)))
        .collect::<Result<_, _>>()
        .map_err(PolicyError::from)?;

    let adapter = AdapterState::init(
        &spec,
        cfg.lora_rank,
        cfg.lora_alpha,
        substream(cfg.seed, "init", 0),
    );
    let mut policy = Policy { base, adapter: Some(adapter) };
    // The reference is the effective policy at step 0, which equals the base
    // because B starts at zero.
    let reference = policy.snapshot_reference();

    let mut metrics = MetricsWriter::create(&cfg.metrics_path)?;
    let mut keeper = CheckpointKeeper::new(&cfg.checkpoint_dir)?;
    let mut adam = Adam::new();
    let mut reward_ema: Option<f64> = None;
    const EMA_DECAY: f64 = 0.99;

    for step in 0..cfg.max_steps as u64 {
        let batch = choose_batch(
            examples.len(),
            cfg.batch_size,
            substream(cfg.seed, "data", step),
        );

        // Sampling runs against the merged weights of this step's policy.
        let sampling_weights = policy.effective_weights();
        let sampled: Vec<(RolloutGroup, Vec<f64>)> = batch
            .par_iter()
            .enumerate()
            .map(|(slot, &idx)| -> Result<(RolloutGroup, Vec<f64>), TrainError> {
                let ex = &examples[idx];
                let mut dcfg = cfg.sampling_config();
                dcfg.seed =
                    substream(cfg.seed, "sampling", step * cfg.batch_size as u64 + slot as u64);
                let group =
                    sample_group(&sampling_weights, &prompt_ids[idx], eos, cfg.group_size, &dcfg)?;
                let rewards = group
                    .completions
                    .iter()
                    .map(|c| {
                        let text = tokenizer
                            .decode_completion(&c.ids)
                            .map_err(PolicyError::from)?;
                        Ok(reward(&parse(&text), ex.gold, &reward_cfg))
                    })
                    .collect::<Result<Vec<f64>, TrainError>>()?;
                Ok((group, rewards))
            })
            .collect::<Result<_, _>>()?;

        let completion_count: usize =
            sampled.iter().map(|(g, _)| g.completions.len()).sum();
        let mean_reward = sampled
            .iter()
            .flat_map(|(_, r)| r.iter())
            .sum::<f64>()
            / completion_count as f64;
        let mean_completion_len = sampled
            .iter()
            .flat_map(|(g, _)| g.completions.iter())
            .map(|c| c.ids.len() as f64)
            .sum::<f64>()
            / completion_count as f64;

        let lr_t = warmup_lr(cfg.learning_rate, cfg.warmup_steps, step);
        let mut first_pass_kl = 0.0;
        let mut first_pass_grad_norm = 0.0;

        for inner in 0..cfg.inner_steps {
            let built: Vec<(BTreeMap<String, Vec<f64>>, f64, f64)> = sampled
                .par_iter()
                .map(|(group, rewards)| -> Result<_, TrainError> {
                    let mut gl = grpo_loss(
                        &policy,
                        &reference,
                        group,
                        rewards,
                        &grpo_cfg,
                        TrainableSet::Adapter,
                    )
                    .map_err(|e| match e {
                        GrpoError::Autodiff(AutodiffError::NonFinite { .. }) => {
                            TrainError::NonFiniteLoss { step }
                        }
                        other => other.into(),
                    })?;
                    if !gl.loss_value.is_finite() {
                        return Err(TrainError::NonFiniteLoss { step });
                    }
                    gl.graph.backward(gl.loss)?;
                    let mut grads = BTreeMap::new();
                    for (name, id) in &gl.bindings.entries {
                        if let Some(grad) = gl.graph.grad(*id) {
                            grads.insert(name.clone(), grad.to_vec());
                        }
                    }
                    let kl_sum: f64 = gl.kl_values.iter().sum();
                    Ok((grads, kl_sum, gl.kl_values.len() as f64))
                })
                .collect::<Result<_, _>>()?;

            let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            let mut kl_sum = 0.0;
            let mut kl_n = 0.0;
            for (g, ks, kn) in built {
                kl_sum += ks;
                kl_n += kn;
                for (name, grad) in g {
                    match grads.get_mut(&name) {
                        None => {
                            grads.insert(name, grad);
                        }
                        Some(acc) => {
                            for (a, b) in acc.iter_mut().zip(&grad) {
                                *a += b;
                            }
                        }
                    }
                }
            }
            let inv = 1.0 / sampled.len() as f64;
            for g in grads.values_mut() {
                for v in g.iter_mut() {
                    *v *= inv;
                }
            }
            let grad_norm = clip_global_norm(&mut grads, cfg.max_grad_norm);
            adam.begin_step();
            for (name, grad) in &grads {
                let param = policy
                    .trainable_param_mut(name)
                    .ok_or_else(|| TrainError::Config(format!("unknown parameter {name}")))?;
                adam.update(lr_t, name, param, grad);
            }
            if inner == 0 {
                first_pass_kl = kl_sum / kl_n.max(1.0);
                first_pass_grad_norm = grad_norm;
            }
        }

        metrics.append(&MetricsRow {
            step,
            mean_reward,
            mean_completion_len,
            mean_kl_estimate: first_pass_kl,
            grad_norm: first_pass_grad_norm,
            lr: lr_t,
        })?;
        reward_ema = Some(match reward_ema {
            None => mean_reward,
            Some(prev) => EMA_DECAY * prev + (1.0 - EMA_DECAY) * mean_reward,
        });

        if (step + 1) % cfg.checkpoint_every as u64 == 0 {
            keeper.save(step + 1, &spec, policy.adapter.as_ref().unwrap(), reward_ema.unwrap())?;
        }
    }

    let adapter = policy.adapter.take().expect("adapter persists through training");
    let final_path = cfg.checkpoint_dir.join("adapter-final.ckpt");
    save_adapter(&final_path, &spec, &adapter)?;
    Ok(TrainOutcome {
        adapter,
        steps_run: cfg.max_steps as u64,
        final_checkpoint: final_path,
        best_checkpoint: keeper.best_path(),
        final_reward_ema: reward_ema.unwrap_or(0.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SyntheticTaskConfig};
    use crate::policy::ModelWeights;

    fn tiny_setup(n: usize) -> (Vec<NliExample>, PromptTemplate, ModelWeights, Tokenizer) {
        let examples =
            synth_generate(&SyntheticTaskConfig { seed: 5, ..Default::default() }, n).unwrap();
        let template = PromptTemplate::default();
        let pcfg = PretrainConfig {
            steps: 12,
            batch_size: 4,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            max_seq_len: 64,
            seed: 1,
            ..Default::default()
        };
        let (w, tok) = pretrain_base(&examples, &template, &pcfg).unwrap();
        (examples, template, w, tok)
    }

    fn short_cfg(dir: &Path, steps: usize) -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.max_steps = steps;
        cfg.batch_size = 2;
        cfg.group_size = 4;
        cfg.warmup_steps = 2;
        cfg.max_new_tokens = 12;
        cfg.checkpoint_every = 2;
        cfg.metrics_path = dir.join("metrics.csv");
        cfg.checkpoint_dir = dir.join("ckpt");
        cfg.seed = 3;
        cfg
    }

    #[test]
    fn smoke_run_writes_one_metrics_row_per_step() {
        let (examples, template, w, tok) = tiny_setup(12);
        let dir = tempfile::tempdir().unwrap();
        let cfg = short_cfg(dir.path(), 5);
        let out = train_on(&cfg, Base::Dense(w), &tok, &examples, &template).unwrap();
        assert_eq!(out.steps_run, 5);
        let rows = read_metrics(&cfg.metrics_path).unwrap();
        assert_eq!(rows.len(), 5);
        for (i, r) in rows.iter().enumerate() {
            assert_eq!(r.step, i as u64);
            assert!(r.grad_norm <= cfg.max_grad_norm + 1e-9);
        }
        assert!(out.final_checkpoint.exists());
    }

    #[test]
    fn flat_reward_tiers_and_zero_beta_leave_parameters_unchanged() {
        // With all three tiers equal every group has zero advantages, and with
        // β = 0 there is no KL pull: gradients are exactly zero throughout,
        // so the adapter never moves off its initialization.
        let (examples, template, w, tok) = tiny_setup(8);
        let spec = w.spec.clone();
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = short_cfg(dir.path(), 3);
        cfg.kl_beta = 0.0;
        cfg.reward_correct = 0.5;
        cfg.reward_format = 0.5;
        cfg.reward_malformed = 0.5;
        let out = train_on(&cfg, Base::Dense(w), &tok, &examples, &template).unwrap();
        let fresh = AdapterState::init(
            &spec,
            cfg.lora_rank,
            cfg.lora_alpha,
            substream(cfg.seed, "init", 0),
        );
        assert_eq!(out.adapter, fresh);
    }

    #[test]
    fn warmup_schedule_is_linear_then_constant() {
        assert!((warmup_lr(1.0, 4, 0) - 0.25).abs() < 1e-15);
        assert!((warmup_lr(1.0, 4, 1) - 0.5).abs() < 1e-15);
        assert!((warmup_lr(1.0, 4, 3) - 1.0).abs() < 1e-15);
        assert!((warmup_lr(1.0, 4, 100) - 1.0).abs() < 1e-15);
        assert_eq!(warmup_lr(0.3, 0, 0), 0.3);
    }

    #[test]
    fn choose_batch_is_deterministic_and_distinct() {
        let a = choose_batch(100, 8, 42);
        let b = choose_batch(100, 8, 42);
        assert_eq!(a, b);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 8);
        assert_ne!(a, choose_batch(100, 8, 43));
    }
}

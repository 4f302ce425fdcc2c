//! The GRPO objective: clipped importance-ratio surrogate with group-mean
//! advantages and a KL penalty against a frozen reference.
//!
//! For a group of G completions with rewards r_i, the per-completion
//! advantage is A_i = r_i − mean(r) (no σ division by default). Per token,
//!
//! ```text
//! surrogate_t = min(ρ_t · A_i, clip(ρ_t, 1−ε, 1+ε) · A_i),   ρ_t = π_θ/π_old
//! k3_t        = ρ̂_t − log ρ̂_t − 1,                           ρ̂_t = π_ref/π_θ
//! ```
//!
//! Tokens are averaged within a completion, completions with weight 1/G, and
//! the loss to minimize is −surrogate + β·k3. An empty completion contributes
//! zero surrogate and zero KL but still counts in the 1/G average.

use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, TensorId};
use crate::kernels::pairwise_sum;
use crate::policy::{score_under, ModelWeights, Policy, PolicyError, TrainableSet};
use crate::rollout::RolloutGroup;

#[derive(Debug, Error)]
pub enum GrpoError {
    #[error("group of {got} completions is too small; advantages need G >= 2")]
    GroupTooSmall { got: usize },
    #[error("{what}: length {left} vs {right}")]
    LengthMismatch { what: &'static str, left: usize, right: usize },
    #[error("invalid grpo config: {0}")]
    Config(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// GRPO hyperparameters.
#[derive(Debug, Clone)]
pub struct GrpoConfig {
    /// Ratio clipping range ε.
    pub epsilon: f64,
    /// KL penalty coefficient β.
    pub beta: f64,
    /// Completions sampled per prompt.
    pub group_size: usize,
    /// Optimization passes per sampled batch, reusing the same π_old.
    pub inner_steps: usize,
    /// Divide advantages by the group reward std (off by default).
    pub scale_rewards: bool,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig { epsilon: 0.2, beta: 0.01, group_size: 4, inner_steps: 4, scale_rewards: false }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(GrpoError::Config("epsilon must lie in (0, 1)".into()));
        }
        if self.beta < 0.0 {
            return Err(GrpoError::Config("beta must be >= 0".into()));
        }
        if self.group_size < 2 {
            return Err(GrpoError::Config("group_size must be >= 2".into()));
        }
        if self.inner_steps < 1 {
            return Err(GrpoError::Config("inner_steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// Mean-centered per-completion advantages.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageSet {
    pub values: Vec<f64>,
}

/// A_i = r_i − mean(r); with `scale_rewards`, divided by the group std
/// (floored at 1e-8). The group mean uses pairwise summation.
pub fn advantages(rewards: &[f64], cfg: &GrpoConfig) -> Result<AdvantageSet, GrpoError> {
    let g = rewards.len();
    if g < 2 {
        return Err(GrpoError::GroupTooSmall { got: g });
    }
    let mean = pairwise_sum(rewards) / g as f64;
    let mut values: Vec<f64> = rewards.iter().map(|r| r - mean).collect();
    if cfg.scale_rewards {
        let sq: Vec<f64> = values.iter().map(|a| a * a).collect();
        let std = (pairwise_sum(&sq) / g as f64).sqrt();
        let denom = std.max(1e-8);
        for a in values.iter_mut() {
            *a /= denom;
        }
    }
    Ok(AdvantageSet { values })
}

/// Token-mean clipped surrogate of one completion, as a scalar graph node.
/// An empty completion yields a constant 0.
pub fn surrogate_node(
    g: &mut Graph,
    new_lp: TensorId,
    old_lp: &[f64],
    advantage: f64,
    epsilon: f64,
) -> Result<TensorId, GrpoError> {
    let len = g.value(new_lp).len();
    if len != old_lp.len() {
        return Err(GrpoError::LengthMismatch {
            what: "surrogate log-probs",
            left: len,
            right: old_lp.len(),
        });
    }
    if len == 0 {
        return Ok(g.scalar_const(0.0)?);
    }
    let old = g.constant(&[len], old_lp.to_vec())?;
    let diff = g.sub(new_lp, old)?;
    let ratio = g.exp(diff)?;
    let unclipped = g.mul_scalar(ratio, advantage)?;
    let clipped_ratio = g.clip(ratio, 1.0 - epsilon, 1.0 + epsilon)?;
    let clipped = g.mul_scalar(clipped_ratio, advantage)?;
    let per_token = g.min_elem(unclipped, clipped)?;
    Ok(g.mean_all(per_token)?)
}

/// Token-mean k3 KL estimate of one completion, as a scalar graph node.
/// Computed as expm1(d) − d with d = ref_lp − new_lp, which is ≥ 0 and
/// exactly 0 when the distributions agree.
pub fn kl_node(g: &mut Graph, new_lp: TensorId, ref_lp: &[f64]) -> Result<TensorId, GrpoError> {
    let len = g.value(new_lp).len();
    if len != ref_lp.len() {
        return Err(GrpoError::LengthMismatch {
            what: "kl log-probs",
            left: len,
            right: ref_lp.len(),
        });
    }
    if len == 0 {
        return Ok(g.scalar_const(0.0)?);
    }
    let reference = g.constant(&[len], ref_lp.to_vec())?;
    let diff = g.sub(reference, new_lp)?;
    let em = g.expm1(diff)?;
    let k3 = g.sub(em, diff)?;
    Ok(g.mean_all(k3)?)
}

/// Scalar clipped-surrogate value for fixed log-probs. Same computation as
/// [`surrogate_node`], evaluated on a scratch graph.
pub fn clipped_surrogate(
    new_lp: &[f64],
    old_lp: &[f64],
    advantage: f64,
    epsilon: f64,
) -> Result<f64, GrpoError> {
    let mut g = Graph::new();
    let new = g.constant(&[new_lp.len()], new_lp.to_vec())?;
    let node = surrogate_node(&mut g, new, old_lp, advantage, epsilon)?;
    Ok(g.value(node)[0])
}

/// Scalar k3 estimate for fixed log-probs.
pub fn kl_penalty(new_lp: &[f64], ref_lp: &[f64]) -> Result<f64, GrpoError> {
    let mut g = Graph::new();
    let new = g.constant(&[new_lp.len()], new_lp.to_vec())?;
    let node = kl_node(&mut g, new, ref_lp)?;
    Ok(g.value(node)[0])
}

/// A fully built group loss, ready for `backward`.
pub struct GroupLoss {
    pub graph: Graph,
    pub loss: TensorId,
    pub bindings: crate::policy::ParamBindings,
    pub loss_value: f64,
    pub advantages: AdvantageSet,
    pub surrogate_values: Vec<f64>,
    pub kl_values: Vec<f64>,
}

/// Build the GRPO loss for one rollout group on a fresh graph. π_old comes
/// from the recorded `old_log_probs`; π_ref from scoring under `reference`.
pub fn grpo_loss(
    policy: &Policy,
    reference: &ModelWeights,
    group: &RolloutGroup,
    rewards: &[f64],
    cfg: &GrpoConfig,
    trainable: TrainableSet,
) -> Result<GroupLoss, GrpoError> {
    cfg.validate()?;
    let g_size = group.group_size();
    if rewards.len() != g_size {
        return Err(GrpoError::LengthMismatch {
            what: "rewards per completion",
            left: rewards.len(),
            right: g_size,
        });
    }
    let adv = advantages(rewards, cfg)?;

    let ref_lps: Vec<Vec<f64>> = group
        .completions
        .iter()
        .map(|c| {
            if c.ids.is_empty() {
                Ok(Vec::new())
            } else {
                score_under(reference, &group.prompt_ids, &c.ids)
            }
        })
        .collect::<Result<_, _>>()?;

    let mut graph = Graph::new();
    let completion_ids: Vec<&[u32]> = group.completions.iter().map(|c| c.ids.as_slice()).collect();
    let (lps, bindings) =
        policy.group_log_probs_graph(&mut graph, &group.prompt_ids, &completion_ids, trainable)?;

    let mut surrogate_values = Vec::with_capacity(g_size);
    let mut kl_values = Vec::with_capacity(g_size);
    let mut total: Option<TensorId> = None;
    for i in 0..g_size {
        let (surr, kl) = match lps[i] {
            Some(lp) => (
                surrogate_node(&mut graph, lp, &group.completions[i].old_log_probs, adv.values[i], cfg.epsilon)?,
                kl_node(&mut graph, lp, &ref_lps[i])?,
            ),
            None => (graph.scalar_const(0.0)?, graph.scalar_const(0.0)?),
        };
        surrogate_values.push(graph.value(surr)[0]);
        kl_values.push(graph.value(kl)[0]);
        let neg_surr = graph.mul_scalar(surr, -1.0)?;
        let kl_term = graph.mul_scalar(kl, cfg.beta)?;
        let term = graph.add(neg_surr, kl_term)?;
        total = Some(match total {
            None => term,
            Some(acc) => graph.add(acc, term)?,
        });
    }
    let loss = graph.mul_scalar(total.expect("G >= 2"), 1.0 / g_size as f64)?;
    let loss_value = graph.value(loss)[0];
    Ok(GroupLoss {
        graph,
        loss,
        bindings,
        loss_value,
        advantages: adv,
        surrogate_values,
        kl_values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn cfg() -> GrpoConfig {
        GrpoConfig::default()
    }

    #[test]
    fn advantages_mean_center() {
        let a = advantages(&[1.0, 0.0, 0.0, 1.0], &cfg()).unwrap();
        assert_eq!(a.values, vec![0.5, -0.5, -0.5, 0.5]);
    }

    #[test]
    fn constant_groups_have_zero_advantages() {
        for c in [0.0, 0.1, 1.0 / 3.0, 0.7, 1.0] {
            let a = advantages(&[c, c, c, c], &cfg()).unwrap();
            assert!(a.values.iter().all(|&v| v == 0.0), "c = {c}: {:?}", a.values);
        }
    }

    #[test]
    fn groups_of_one_rejected() {
        assert!(matches!(
            advantages(&[1.0], &cfg()),
            Err(GrpoError::GroupTooSmall { got: 1 })
        ));
    }

    #[test]
    fn advantages_sum_to_zero() {
        let mut rng = crate::rng::rng_from(1);
        for _ in 0..100 {
            let g = rng.gen_range(2..9);
            let rewards: Vec<f64> = (0..g).map(|_| rng.gen_range(0.0..1.0)).collect();
            let a = advantages(&rewards, &cfg()).unwrap();
            assert!(pairwise_sum(&a.values).abs() < 1e-12);
        }
    }

    #[test]
    fn dyadic_scaling_is_exact() {
        // Powers of two scale losslessly in binary floating point, so the
        // Dr.-GRPO scaling property can be asserted bit-exactly with c = 2^k.
        let mut rng = crate::rng::rng_from(2);
        for _ in 0..100 {
            let rewards: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..1.0)).collect();
            let c = 2f64.powi(rng.gen_range(-6..7));
            let scaled: Vec<f64> = rewards.iter().map(|r| c * r).collect();
            let a1 = advantages(&rewards, &cfg()).unwrap();
            let a2 = advantages(&scaled, &cfg()).unwrap();
            for (x, y) in a1.values.iter().zip(&a2.values) {
                assert_eq!((c * x).to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn tripled_dyadic_rewards_triple_advantages_exactly() {
        // Rewards on a 1/16 grid stay exact under small-integer scaling.
        let mut rng = crate::rng::rng_from(3);
        for _ in 0..100 {
            let rewards: Vec<f64> = (0..4).map(|_| rng.gen_range(0..17) as f64 / 16.0).collect();
            let tripled: Vec<f64> = rewards.iter().map(|r| 3.0 * r).collect();
            let a1 = advantages(&rewards, &cfg()).unwrap();
            let a2 = advantages(&tripled, &cfg()).unwrap();
            for (x, y) in a1.values.iter().zip(&a2.values) {
                assert_eq!((3.0 * x).to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn scaled_advantages_divide_by_std_with_floor() {
        let scaled_cfg = GrpoConfig { scale_rewards: true, ..cfg() };
        let a = advantages(&[1.0, 0.0, 0.0, 1.0], &scaled_cfg).unwrap();
        // std of [0.5,-0.5,-0.5,0.5] is 0.5, so scaled advantages are ±1.
        assert_eq!(a.values, vec![1.0, -1.0, -1.0, 1.0]);
        // Zero-variance group: the floor keeps the division finite.
        let z = advantages(&[0.3, 0.3, 0.3, 0.3], &scaled_cfg).unwrap();
        assert!(z.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn surrogate_at_unit_ratio_equals_advantage() {
        let lp = [-0.7, -1.3, -0.2];
        for adv in [0.75, -0.5] {
            let s = clipped_surrogate(&lp, &lp, adv, 0.2).unwrap();
            assert_eq!(s, adv);
        }
    }

    #[test]
    fn surrogate_clips_at_one_plus_epsilon() {
        // ρ = 1.5 with ε = 0.2 and positive advantage clips to 1.2·A.
        let old = [-1.0];
        let new = [-1.0 + 1.5f64.ln()];
        let s = clipped_surrogate(&new, &old, 2.0, 0.2).unwrap();
        assert!((s - 1.2 * 2.0).abs() < 1e-10, "{s}");
    }

    #[test]
    fn surrogate_matches_bruteforce_formula() {
        let mut rng = crate::rng::rng_from(4);
        for _ in 0..50 {
            let n = rng.gen_range(1..6);
            let old: Vec<f64> = (0..n).map(|_| -rng.gen_range(0.1..3.0)).collect();
            let new: Vec<f64> = (0..n).map(|_| -rng.gen_range(0.1..3.0)).collect();
            let adv = rng.gen_range(-2.0..2.0);
            let eps = rng.gen_range(0.05..0.5);
            let got = clipped_surrogate(&new, &old, adv, eps).unwrap();
            let mut acc = 0.0;
            for t in 0..n {
                let rho = (new[t] - old[t]).exp();
                let clipped = rho.clamp(1.0 - eps, 1.0 + eps);
                acc += (rho * adv).min(clipped * adv);
            }
            let expect = acc / n as f64;
            assert!((got - expect).abs() <= 1e-12, "{got} vs {expect}");
        }
    }

    #[test]
    fn surrogate_bounds_over_ratio_sweep() {
        let eps = 0.2;
        for &adv in &[1.5, -0.7] {
            for i in 0..200 {
                let rho: f64 = 0.1 + (10.0 - 0.1) * i as f64 / 199.0;
                let old = [0.0];
                let new = [rho.ln()];
                let s = clipped_surrogate(&new, &old, adv, eps).unwrap();
                if adv > 0.0 {
                    assert!(s <= (1.0 + eps) * adv + 1e-12);
                } else if rho <= 1.0 + eps {
                    // The lower bound on a negative advantage only holds up to
                    // 1+ε; beyond it the unclipped branch ρ·A wins the min.
                    assert!(s >= (1.0 + eps) * adv - 1e-12);
                } else {
                    assert!((s - rho * adv).abs() <= 1e-10 * rho.max(1.0));
                }
            }
        }
    }

    #[test]
    fn kl_zero_for_identical_policies() {
        let lp = [-0.5, -2.0, -0.01];
        assert_eq!(kl_penalty(&lp, &lp).unwrap(), 0.0);
    }

    #[test]
    fn kl_nonnegative_everywhere() {
        let mut rng = crate::rng::rng_from(5);
        for _ in 0..500 {
            let n = rng.gen_range(1..6);
            let new: Vec<f64> = (0..n).map(|_| -rng.gen_range(1e-6..5.0)).collect();
            let reference: Vec<f64> = (0..n).map(|_| -rng.gen_range(1e-6..5.0)).collect();
            let k = kl_penalty(&new, &reference).unwrap();
            assert!(k >= 0.0, "k3 {k}");
        }
    }

    #[test]
    fn kl_matches_direct_formula() {
        let new = [-1.2, -0.4];
        let reference = [-0.9, -1.1];
        let got = kl_penalty(&new, &reference).unwrap();
        let expect = (0..2)
            .map(|t| {
                let rho = (reference[t] - new[t]).exp();
                rho - (reference[t] - new[t]) - 1.0
            })
            .sum::<f64>()
            / 2.0;
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn length_mismatches_rejected() {
        assert!(matches!(
            clipped_surrogate(&[-1.0], &[-1.0, -2.0], 1.0, 0.2),
            Err(GrpoError::LengthMismatch { .. })
        ));
        assert!(matches!(
            kl_penalty(&[-1.0], &[-1.0, -2.0]),
            Err(GrpoError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn reinforce_with_baseline_closed_form() {
        // β = 0, G = 2, single-token completions over a 3-token vocabulary,
        // ρ = 1: the gradient w.r.t. the logits must equal the hand-derived
        // REINFORCE-with-baseline expression −(1/G)·Σ_i A_i·(e_{a_i} − p).
        let logits = vec![0.3, -0.4, 0.9];
        let tokens = [0usize, 2usize];
        let rewards = [1.0, 0.0];
        let adv = advantages(&rewards, &cfg()).unwrap();

        let mut g = Graph::new();
        let z = g.param(&[1, 3], logits.clone()).unwrap();
        let mut total = None;
        for (i, &tok) in tokens.iter().enumerate() {
            let lp = g.gather_log_prob(z, &[tok]).unwrap();
            let old = g.value(lp).to_vec();
            let surr = surrogate_node(&mut g, lp, &old, adv.values[i], 0.2).unwrap();
            let neg = g.mul_scalar(surr, -1.0).unwrap();
            total = Some(match total {
                None => neg,
                Some(acc) => g.add(acc, neg).unwrap(),
            });
        }
        let loss = g.mul_scalar(total.unwrap(), 0.5).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(z).unwrap();

        let z_exp: Vec<f64> = logits.iter().map(|v| v.exp()).collect();
        let zsum: f64 = z_exp.iter().sum();
        let p: Vec<f64> = z_exp.iter().map(|e| e / zsum).collect();
        for v in 0..3 {
            let mut expect = 0.0;
            for (i, &tok) in tokens.iter().enumerate() {
                let indicator = if v == tok { 1.0 } else { 0.0 };
                expect += -0.5 * adv.values[i] * (indicator - p[v]);
            }
            assert!((grad[v] - expect).abs() < 1e-10, "logit {v}: {} vs {expect}", grad[v]);
        }
    }

    #[test]
    fn frozen_old_log_probs_scale_gradients_by_the_ratio() {
        // With a generous ε (no clipping) and a single token, shifting the
        // frozen π_old rescales the gradient by exactly ρ.
        let grad_for = |old_shift: f64| -> Vec<f64> {
            let mut g = Graph::new();
            let z = g.param(&[1, 3], vec![0.2, 0.1, -0.3]).unwrap();
            let lp = g.gather_log_prob(z, &[1]).unwrap();
            let old = [g.value(lp)[0] - old_shift];
            let surr = surrogate_node(&mut g, lp, &old, 0.8, 0.9).unwrap();
            let loss = g.mul_scalar(surr, -1.0).unwrap();
            g.backward(loss).unwrap();
            g.grad(z).unwrap().to_vec()
        };
        let base = grad_for(0.0);
        let shifted = grad_for(0.25);
        let rho = 0.25f64.exp();
        for (b, s) in base.iter().zip(&shifted) {
            assert!((s - rho * b).abs() < 1e-12, "{s} vs {}", rho * b);
        }
    }
}

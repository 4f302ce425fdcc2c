//! Low-rank adapters: per-target factor pairs (A, B) applied as
//! `W + (α/r)·B·A` over a frozen base weight.
//!
//! A is initialized from N(0, 1/r) and B from zeros, so a fresh adapter is an
//! exact identity on the base model.

use std::collections::BTreeMap;

use crate::kernels;
use crate::policy::{ModelWeights, PolicySpec};
use crate::rng::{normal, rng_from, substream};

#[derive(Debug, Clone, PartialEq)]
pub struct LoraFactors {
    /// [rank, in_dim]
    pub a: Vec<f64>,
    /// [out_dim, rank]
    pub b: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterState {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<String>,
    pub factors: BTreeMap<String, LoraFactors>,
}

/// The adapted weight matrices: every attention projection and both MLP
/// matrices of every layer.
pub fn lora_target_names(spec: &PolicySpec) -> Vec<String> {
    let mut names = Vec::with_capacity(spec.n_layers * 6);
    for i in 0..spec.n_layers {
        for field in ["wq", "wk", "wv", "wo", "w_up", "w_down"] {
            names.push(format!("layers.{i}.{field}"));
        }
    }
    names
}

impl AdapterState {
    pub fn init(spec: &PolicySpec, rank: usize, alpha: f64, seed: u64) -> AdapterState {
        assert!(rank >= 1, "rank must be >= 1");
        let std = (1.0 / rank as f64).sqrt();
        let targets = lora_target_names(spec);
        let mut factors = BTreeMap::new();
        for (i, name) in targets.iter().enumerate() {
            let shape = ModelWeights::shape_of(spec, name).expect("target has a shape");
            let (out_dim, in_dim) = (shape[0], shape[1]);
            let mut rng = rng_from(substream(seed, "lora-init", i as u64));
            let a = (0..rank * in_dim).map(|_| std * normal(&mut rng)).collect();
            factors.insert(
                name.clone(),
                LoraFactors { a, b: vec![0.0; out_dim * rank], in_dim, out_dim },
            );
        }
        AdapterState { rank, alpha, targets, factors }
    }

    /// Effective update scale α/r.
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn num_params(&self) -> usize {
        self.factors.values().map(|f| f.a.len() + f.b.len()).sum()
    }

    /// The additive weight delta (α/r)·B·A for one target.
    pub fn delta(&self, name: &str) -> Option<Vec<f64>> {
        let f = self.factors.get(name)?;
        let mut d = kernels::matmul_nn(&f.b, &f.a, f.out_dim, self.rank, f.in_dim);
        let s = self.scale();
        for v in d.iter_mut() {
            *v *= s;
        }
        Some(d)
    }
}

/// base + scale·(B·A), elementwise, in `[out, in]` layout. The graph path
/// performs these identical steps in the same order.
pub fn merged_weight(base: &[f64], f: &LoraFactors, scale: f64) -> Vec<f64> {
    let rank = f.b.len() / f.out_dim;
    let delta = kernels::matmul_nn(&f.b, &f.a, f.out_dim, rank, f.in_dim);
    base.iter().zip(delta).map(|(w, d)| w + d * scale).collect()
}

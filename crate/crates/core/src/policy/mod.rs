//! Tiny decoder-only transformer policy with LoRA adapters, an optional
//! simulated int4-quantized frozen base, and frozen reference snapshots.
//!
//! Weight layout is `[out, in]` row-major for every projection, so a forward
//! matmul is `x · Wᵀ` and a LoRA update composes as `W + (α/r)·B·A` in the
//! same layout. Two forward paths exist: an autodiff-graph path used for
//! training and scoring, and a graph-free incremental path with a KV cache
//! used for sampling. Both call into the same kernels and agree to the bit.

mod checkpoint;
mod lora;
mod quant;
mod tokenizer;

pub use checkpoint::{load_adapter, load_base, save_adapter, save_base, spec_hash, CheckpointError};
pub use lora::{lora_target_names, merged_weight, AdapterState, LoraFactors};
pub use quant::{QuantizedLinear, QuantizedModel, DEFAULT_GROUP_SIZE};
pub use tokenizer::{Tokenizer, TokenizerError, TokenizerMode, SPECIAL_TOKENS};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, TensorId};
use crate::kernels;
use crate::rng::{normal, rng_from};

pub const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("invalid policy spec: {0}")]
    SpecInvalid(String),
    #[error("invalid forward request: {0}")]
    BadRequest(String),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

/// Architecture description of the toy policy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicySpec {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub tokenizer_id: String,
}

impl PolicySpec {
    pub fn validate(&self) -> Result<(), PolicyError> {
        let dims = [self.vocab_size, self.d_model, self.n_layers, self.n_heads, self.max_seq_len];
        if dims.iter().any(|&d| d == 0) {
            return Err(PolicyError::SpecInvalid("all dimensions must be >= 1".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(PolicyError::SpecInvalid(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        2 * self.d_model
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f64>,
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
    pub wo: Vec<f64>,
    pub mlp_norm: Vec<f64>,
    pub w_up: Vec<f64>,
    pub w_down: Vec<f64>,
}

/// Dense model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub spec: PolicySpec,
    pub token_embed: Vec<f64>,
    pub pos_embed: Vec<f64>,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f64>,
    pub lm_head: Vec<f64>,
}

const INIT_STD: f64 = 0.02;

impl ModelWeights {
    /// Fresh GPT-2-style init: N(0, 0.02²) matrices, unit norm gains.
    pub fn init(spec: PolicySpec, seed: u64) -> Result<ModelWeights, PolicyError> {
        spec.validate()?;
        let mut rng = rng_from(seed);
        let mut mat = |len: usize| -> Vec<f64> {
            (0..len).map(|_| INIT_STD * normal(&mut rng)).collect()
        };
        let (v, d, h) = (spec.vocab_size, spec.d_model, spec.mlp_hidden());
        let layers = (0..spec.n_layers)
            .map(|_| LayerWeights {
                attn_norm: vec![1.0; d],
                wq: mat(d * d),
                wk: mat(d * d),
                wv: mat(d * d),
                wo: mat(d * d),
                mlp_norm: vec![1.0; d],
                w_up: mat(h * d),
                w_down: mat(d * h),
            })
            .collect();
        Ok(ModelWeights {
            token_embed: mat(v * d),
            pos_embed: mat(spec.max_seq_len * d),
            layers,
            final_norm: vec![1.0; d],
            lm_head: mat(v * d),
            spec,
        })
    }

    /// Names of all parameter tensors, in checkpoint order.
    pub fn param_names(spec: &PolicySpec) -> Vec<String> {
        let mut names = vec!["token_embed".to_string(), "pos_embed".to_string()];
        for i in 0..spec.n_layers {
            for field in ["attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w_up", "w_down"] {
                names.push(format!("layers.{i}.{field}"));
            }
        }
        names.push("final_norm".into());
        names.push("lm_head".into());
        names
    }

    pub fn shape_of(spec: &PolicySpec, name: &str) -> Option<Vec<usize>> {
        let (v, d, h) = (spec.vocab_size, spec.d_model, spec.mlp_hidden());
        let shape = match name {
            "token_embed" | "lm_head" => vec![v, d],
            "pos_embed" => vec![spec.max_seq_len, d],
            "final_norm" => vec![d],
            _ => {
                let field = name.strip_prefix("layers.")?.split_once('.')?.1;
                match field {
                    "attn_norm" | "mlp_norm" => vec![d],
                    "wq" | "wk" | "wv" | "wo" => vec![d, d],
                    "w_up" => vec![h, d],
                    "w_down" => vec![d, h],
                    _ => return None,
                }
            }
        };
        Some(shape)
    }

    pub fn tensor(&self, name: &str) -> Option<&Vec<f64>> {
        match name {
            "token_embed" => Some(&self.token_embed),
            "pos_embed" => Some(&self.pos_embed),
            "final_norm" => Some(&self.final_norm),
            "lm_head" => Some(&self.lm_head),
            _ => {
                let rest = name.strip_prefix("layers.")?;
                let (idx, field) = rest.split_once('.')?;
                let layer = self.layers.get(idx.parse::<usize>().ok()?)?;
                Some(match field {
                    "attn_norm" => &layer.attn_norm,
                    "wq" => &layer.wq,
                    "wk" => &layer.wk,
                    "wv" => &layer.wv,
                    "wo" => &layer.wo,
                    "mlp_norm" => &layer.mlp_norm,
                    "w_up" => &layer.w_up,
                    "w_down" => &layer.w_down,
                    _ => return None,
                })
            }
        }
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Vec<f64>> {
        match name {
            "token_embed" => Some(&mut self.token_embed),
            "pos_embed" => Some(&mut self.pos_embed),
            "final_norm" => Some(&mut self.final_norm),
            "lm_head" => Some(&mut self.lm_head),
            _ => {
                let rest = name.strip_prefix("layers.")?;
                let (idx, field) = rest.split_once('.')?;
                let layer = self.layers.get_mut(idx.parse::<usize>().ok()?)?;
                Some(match field {
                    "attn_norm" => &mut layer.attn_norm,
                    "wq" => &mut layer.wq,
                    "wk" => &mut layer.wk,
                    "wv" => &mut layer.wv,
                    "wo" => &mut layer.wo,
                    "mlp_norm" => &mut layer.mlp_norm,
                    "w_up" => &mut layer.w_up,
                    "w_down" => &mut layer.w_down,
                    _ => return None,
                })
            }
        }
    }

    pub fn num_params(&self) -> usize {
        ModelWeights::param_names(&self.spec)
            .iter()
            .map(|n| self.tensor(n).map(|t| t.len()).unwrap_or(0))
            .sum()
    }
}

/// Which leaves of a forward graph are differentiation targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainableSet {
    /// Inference only; everything is constant.
    None,
    /// LoRA factors only; the base stays frozen.
    Adapter,
    /// Every base weight (used to create base models).
    Full,
}

/// Trainable graph leaves by name, for gradient extraction.
#[derive(Debug, Default)]
pub struct ParamBindings {
    pub entries: Vec<(String, TensorId)>,
}

/// The frozen base: dense weights, or a quantized model plus its dequantized
/// materialization.
#[derive(Debug, Clone)]
pub enum Base {
    Dense(ModelWeights),
    Quantized(QuantizedModel),
}

impl Base {
    pub fn dense_view(&self) -> &ModelWeights {
        match self {
            Base::Dense(w) => w,
            Base::Quantized(q) => q.dense_view(),
        }
    }
}

/// A policy = frozen base + optional trainable adapter.
#[derive(Debug, Clone)]
pub struct Policy {
    pub base: Base,
    pub adapter: Option<AdapterState>,
}

impl Policy {
    pub fn dense(weights: ModelWeights) -> Self {
        Policy { base: Base::Dense(weights), adapter: None }
    }

    pub fn quantized(q: QuantizedModel) -> Self {
        Policy { base: Base::Quantized(q), adapter: None }
    }

    pub fn with_adapter(mut self, adapter: AdapterState) -> Self {
        self.adapter = Some(adapter);
        self
    }

    pub fn spec(&self) -> &PolicySpec {
        &self.base.dense_view().spec
    }

    /// Base weights with the adapter update merged in. With a zero-initialized
    /// adapter this equals the base exactly.
    pub fn effective_weights(&self) -> ModelWeights {
        let base = self.base.dense_view();
        let Some(adapter) = &self.adapter else { return base.clone() };
        let mut out = base.clone();
        let scale = adapter.scale();
        for (name, factors) in &adapter.factors {
            if let Some(t) = out.tensor_mut(name) {
                *t = merged_weight(t, factors, scale);
            }
        }
        out
    }

    /// Deep frozen copy of the current effective policy, for use as π_ref.
    pub fn snapshot_reference(&self) -> ModelWeights {
        self.effective_weights()
    }

    /// Build the causal forward pass on a graph. Returns `[T, V]` logits and
    /// the trainable leaf bindings.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        ids: &[u32],
        trainable: TrainableSet,
    ) -> Result<(TensorId, ParamBindings), PolicyError> {
        let mut bindings = ParamBindings::default();
        let leaves = self.insert_leaves(g, ids.len(), trainable, &mut bindings)?;
        let logits = run_net(g, self.spec(), &leaves, ids)?;
        Ok((logits, bindings))
    }

    /// Differentiable per-token log-probabilities of `completion` given
    /// `prompt`: the graph analog of [`score_under`].
    pub fn completion_log_probs_graph(
        &self,
        g: &mut Graph,
        prompt: &[u32],
        completion: &[u32],
        trainable: TrainableSet,
    ) -> Result<(TensorId, ParamBindings), PolicyError> {
        if prompt.is_empty() || completion.is_empty() {
            return Err(PolicyError::BadRequest("prompt and completion must be non-empty".into()));
        }
        let full: Vec<u32> = prompt.iter().chain(completion).copied().collect();
        if full.len() > self.spec().max_seq_len {
            return Err(PolicyError::SequenceTooLong {
                len: full.len(),
                max: self.spec().max_seq_len,
            });
        }
        let inputs = &full[..full.len() - 1];
        let targets: Vec<usize> = full[1..].iter().map(|&t| t as usize).collect();
        let (logits, bindings) = self.forward_graph(g, inputs, trainable)?;
        let lp_all = g.gather_log_prob(logits, &targets)?;
        let lp = g.slice_1d(lp_all, prompt.len() - 1, completion.len())?;
        Ok((lp, bindings))
    }

    /// Mutable view of a trainable parameter by its binding name: either a
    /// `lora.<target>.{a,b}` factor or, for dense bases, a base tensor.
    pub fn trainable_param_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        if let Some(rest) = name.strip_prefix("lora.") {
            let (target, suffix) = rest.rsplit_once('.')?;
            let f = self.adapter.as_mut()?.factors.get_mut(target)?;
            return match suffix {
                "a" => Some(f.a.as_mut_slice()),
                "b" => Some(f.b.as_mut_slice()),
                _ => None,
            };
        }
        match &mut self.base {
            Base::Dense(w) => w.tensor_mut(name).map(|v| v.as_mut_slice()),
            Base::Quantized(_) => None,
        }
    }

    /// Like [`Policy::completion_log_probs_graph`] for several completions of
    /// one prompt, sharing a single set of weight leaves on the graph.
    pub fn group_log_probs_graph(
        &self,
        g: &mut Graph,
        prompt: &[u32],
        completions: &[&[u32]],
        trainable: TrainableSet,
    ) -> Result<(Vec<Option<TensorId>>, ParamBindings), PolicyError> {
        if prompt.is_empty() {
            return Err(PolicyError::BadRequest("prompt must be non-empty".into()));
        }
        let max_len = completions.iter().map(|c| prompt.len() + c.len()).max().unwrap_or(0);
        if max_len > self.spec().max_seq_len {
            return Err(PolicyError::SequenceTooLong {
                len: max_len,
                max: self.spec().max_seq_len,
            });
        }
        let mut bindings = ParamBindings::default();
        let leaves = self.insert_leaves(g, max_len, trainable, &mut bindings)?;
        let spec = self.spec().clone();
        let mut out = Vec::with_capacity(completions.len());
        for completion in completions {
            if completion.is_empty() {
                out.push(None);
                continue;
            }
            let full: Vec<u32> = prompt.iter().chain(*completion).copied().collect();
            let inputs = &full[..full.len() - 1];
            let targets: Vec<usize> = full[1..].iter().map(|&t| t as usize).collect();
            let logits = run_net(g, &spec, &leaves, inputs)?;
            let lp_all = g.gather_log_prob(logits, &targets)?;
            let lp = g.slice_1d(lp_all, prompt.len() - 1, completion.len())?;
            out.push(Some(lp));
        }
        Ok((out, bindings))
    }

    fn insert_leaves(
        &self,
        g: &mut Graph,
        seq_len: usize,
        trainable: TrainableSet,
        bindings: &mut ParamBindings,
    ) -> Result<LeafSet, PolicyError> {
        match trainable {
            TrainableSet::Full => {
                if self.adapter.is_some() {
                    return Err(PolicyError::BadRequest(
                        "full-weight training with an adapter attached".into(),
                    ));
                }
                if matches!(self.base, Base::Quantized(_)) {
                    return Err(PolicyError::BadRequest(
                        "full-weight training on a quantized base".into(),
                    ));
                }
                insert_leaves_dense(g, self.base.dense_view(), seq_len, true, bindings)
            }
            TrainableSet::None => {
                let merged = self.effective_weights();
                insert_leaves_dense(g, &merged, seq_len, false, bindings)
            }
            TrainableSet::Adapter => {
                let adapter = self.adapter.as_ref().ok_or_else(|| {
                    PolicyError::BadRequest("adapter training without an adapter".into())
                })?;
                insert_leaves_adapter(g, self.base.dense_view(), adapter, seq_len, bindings)
            }
        }
    }
}

struct LayerLeaves {
    attn_norm: TensorId,
    wq: TensorId,
    wk: TensorId,
    wv: TensorId,
    wo: TensorId,
    mlp_norm: TensorId,
    w_up: TensorId,
    w_down: TensorId,
}

struct LeafSet {
    token_embed: TensorId,
    pos_embed: TensorId,
    layers: Vec<LayerLeaves>,
    final_norm: TensorId,
    lm_head: TensorId,
}

fn insert_leaves_dense(
    g: &mut Graph,
    w: &ModelWeights,
    seq_len: usize,
    trainable: bool,
    bindings: &mut ParamBindings,
) -> Result<LeafSet, PolicyError> {
    let spec = &w.spec;
    let (v, d, h) = (spec.vocab_size, spec.d_model, spec.mlp_hidden());
    let mut leaf = |g: &mut Graph, name: String, shape: &[usize], data: Vec<f64>| {
        if trainable {
            let id = g.param(shape, data)?;
            bindings.entries.push((name, id));
            Ok::<TensorId, AutodiffError>(id)
        } else {
            g.constant(shape, data)
        }
    };
    // Constant graphs only need the position rows the sequence touches.
    let (pos_rows, pos_data) = if trainable {
        (spec.max_seq_len, w.pos_embed.clone())
    } else {
        (seq_len, w.pos_embed[..seq_len * d].to_vec())
    };
    let token_embed = leaf(g, "token_embed".into(), &[v, d], w.token_embed.clone())?;
    let pos_embed = leaf(g, "pos_embed".into(), &[pos_rows, d], pos_data)?;
    let mut layers = Vec::with_capacity(spec.n_layers);
    for (i, lw) in w.layers.iter().enumerate() {
        layers.push(LayerLeaves {
            attn_norm: leaf(g, format!("layers.{i}.attn_norm"), &[d], lw.attn_norm.clone())?,
            wq: leaf(g, format!("layers.{i}.wq"), &[d, d], lw.wq.clone())?,
            wk: leaf(g, format!("layers.{i}.wk"), &[d, d], lw.wk.clone())?,
            wv: leaf(g, format!("layers.{i}.wv"), &[d, d], lw.wv.clone())?,
            wo: leaf(g, format!("layers.{i}.wo"), &[d, d], lw.wo.clone())?,
            mlp_norm: leaf(g, format!("layers.{i}.mlp_norm"), &[d], lw.mlp_norm.clone())?,
            w_up: leaf(g, format!("layers.{i}.w_up"), &[h, d], lw.w_up.clone())?,
            w_down: leaf(g, format!("layers.{i}.w_down"), &[d, h], lw.w_down.clone())?,
        });
    }
    let final_norm = leaf(g, "final_norm".into(), &[d], w.final_norm.clone())?;
    let lm_head = leaf(g, "lm_head".into(), &[v, d], w.lm_head.clone())?;
    Ok(LeafSet { token_embed, pos_embed, layers, final_norm, lm_head })
}

fn insert_leaves_adapter(
    g: &mut Graph,
    base: &ModelWeights,
    adapter: &AdapterState,
    seq_len: usize,
    bindings: &mut ParamBindings,
) -> Result<LeafSet, PolicyError> {
    let spec = &base.spec;
    let d = spec.d_model;
    let scale = adapter.scale();
    let mut adapted = |g: &mut Graph, name: String, shape: &[usize], data: Vec<f64>| {
        let w = g.constant(shape, data)?;
        match adapter.factors.get(&name) {
            None => Ok::<TensorId, AutodiffError>(w),
            Some(f) => {
                let a = g.param(&[adapter.rank, f.in_dim], f.a.clone())?;
                bindings.entries.push((format!("lora.{name}.a"), a));
                let b = g.param(&[f.out_dim, adapter.rank], f.b.clone())?;
                bindings.entries.push((format!("lora.{name}.b"), b));
                let delta = g.matmul(b, a)?;
                let delta = g.mul_scalar(delta, scale)?;
                g.add(w, delta)
            }
        }
    };
    let h = spec.mlp_hidden();
    let token_embed = g.constant(&[spec.vocab_size, d], base.token_embed.clone())?;
    let pos_embed = g.constant(&[seq_len, d], base.pos_embed[..seq_len * d].to_vec())?;
    let mut layers = Vec::with_capacity(spec.n_layers);
    for (i, lw) in base.layers.iter().enumerate() {
        layers.push(LayerLeaves {
            attn_norm: g.constant(&[d], lw.attn_norm.clone())?,
            wq: adapted(g, format!("layers.{i}.wq"), &[d, d], lw.wq.clone())?,
            wk: adapted(g, format!("layers.{i}.wk"), &[d, d], lw.wk.clone())?,
            wv: adapted(g, format!("layers.{i}.wv"), &[d, d], lw.wv.clone())?,
            wo: adapted(g, format!("layers.{i}.wo"), &[d, d], lw.wo.clone())?,
            mlp_norm: g.constant(&[d], lw.mlp_norm.clone())?,
            w_up: adapted(g, format!("layers.{i}.w_up"), &[h, d], lw.w_up.clone())?,
            w_down: adapted(g, format!("layers.{i}.w_down"), &[d, h], lw.w_down.clone())?,
        });
    }
    let final_norm = g.constant(&[d], base.final_norm.clone())?;
    let lm_head = g.constant(&[spec.vocab_size, d], base.lm_head.clone())?;
    Ok(LeafSet { token_embed, pos_embed, layers, final_norm, lm_head })
}

fn run_net(
    g: &mut Graph,
    spec: &PolicySpec,
    leaves: &LeafSet,
    ids: &[u32],
) -> Result<TensorId, PolicyError> {
    if ids.is_empty() {
        return Err(PolicyError::BadRequest("empty token sequence".into()));
    }
    if ids.len() > spec.max_seq_len {
        return Err(PolicyError::SequenceTooLong { len: ids.len(), max: spec.max_seq_len });
    }
    let idx: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
    let positions: Vec<usize> = (0..ids.len()).collect();
    let tok = g.embedding(leaves.token_embed, &idx)?;
    let pos = g.embedding(leaves.pos_embed, &positions)?;
    let mut x = g.add(tok, pos)?;
    for layer in &leaves.layers {
        let normed = g.rmsnorm(x, layer.attn_norm, RMS_EPS)?;
        let attn = g.causal_self_attention(
            normed,
            layer.wq,
            layer.wk,
            layer.wv,
            layer.wo,
            spec.n_heads,
        )?;
        x = g.add(x, attn)?;
        let normed = g.rmsnorm(x, layer.mlp_norm, RMS_EPS)?;
        let up = g.matmul_nt(normed, layer.w_up)?;
        let act = g.silu(up)?;
        let down = g.matmul_nt(act, layer.w_down)?;
        x = g.add(x, down)?;
    }
    let x = g.rmsnorm(x, leaves.final_norm, RMS_EPS)?;
    Ok(g.matmul_nt(x, leaves.lm_head)?)
}

/// Full-sequence logits `[T, V]` for fixed weights (no gradients).
pub fn forward_logits(w: &ModelWeights, ids: &[u32]) -> Result<Vec<f64>, PolicyError> {
    let mut g = Graph::new();
    let mut bindings = ParamBindings::default();
    let leaves = insert_leaves_dense(&mut g, w, ids.len(), false, &mut bindings)?;
    let logits = run_net(&mut g, &w.spec, &leaves, ids)?;
    Ok(g.value(logits).to_vec())
}

/// Per-token log-probabilities of `completion` under fixed weights.
pub fn score_under(
    w: &ModelWeights,
    prompt: &[u32],
    completion: &[u32],
) -> Result<Vec<f64>, PolicyError> {
    if prompt.is_empty() || completion.is_empty() {
        return Err(PolicyError::BadRequest("prompt and completion must be non-empty".into()));
    }
    let full: Vec<u32> = prompt.iter().chain(completion).copied().collect();
    if full.len() > w.spec.max_seq_len {
        return Err(PolicyError::SequenceTooLong { len: full.len(), max: w.spec.max_seq_len });
    }
    let logits = forward_logits(w, &full[..full.len() - 1])?;
    let v = w.spec.vocab_size;
    let mut out = Vec::with_capacity(completion.len());
    for t in (prompt.len() - 1)..(full.len() - 1) {
        let row = &logits[t * v..(t + 1) * v];
        out.push(kernels::log_prob_at(row, full[t + 1] as usize));
    }
    Ok(out)
}

/// Incremental single-token decoder with per-layer KV caches.
///
/// Feeds one token at a time and returns the logits row for that position.
/// Matches the graph forward bit-for-bit on shared positions.
pub struct DecodeState<'a> {
    w: &'a ModelWeights,
    k_cache: Vec<Vec<f64>>,
    v_cache: Vec<Vec<f64>>,
    len: usize,
}

impl<'a> DecodeState<'a> {
    pub fn new(w: &'a ModelWeights) -> Self {
        DecodeState {
            w,
            k_cache: vec![Vec::new(); w.spec.n_layers],
            v_cache: vec![Vec::new(); w.spec.n_layers],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Advance one position; returns the `[V]` logits row at it.
    pub fn push_token(&mut self, id: u32) -> Result<Vec<f64>, PolicyError> {
        let spec = &self.w.spec;
        let d = spec.d_model;
        if self.len >= spec.max_seq_len {
            return Err(PolicyError::SequenceTooLong { len: self.len + 1, max: spec.max_seq_len });
        }
        if id as usize >= spec.vocab_size {
            return Err(PolicyError::BadRequest(format!(
                "token id {} out of range for vocab {}",
                id, spec.vocab_size
            )));
        }
        let t = self.len;
        let n_heads = spec.n_heads;
        let head_dim = spec.head_dim();
        let scale = 1.0 / (head_dim as f64).sqrt();

        let mut x = vec![0.0; d];
        for i in 0..d {
            x[i] = self.w.token_embed[id as usize * d + i] + self.w.pos_embed[t * d + i];
        }

        let mut normed = vec![0.0; d];
        for (l, layer) in self.w.layers.iter().enumerate() {
            kernels::rmsnorm_row(&x, &layer.attn_norm, RMS_EPS, &mut normed);
            let q = kernels::matmul_nt(&normed, &layer.wq, 1, d, d);
            let k = kernels::matmul_nt(&normed, &layer.wk, 1, d, d);
            let v = kernels::matmul_nt(&normed, &layer.wv, 1, d, d);
            self.k_cache[l].extend_from_slice(&k);
            self.v_cache[l].extend_from_slice(&v);

            let mut merged = vec![0.0; d];
            for hh in 0..n_heads {
                let off = hh * head_dim;
                let qh = &q[off..off + head_dim];
                let mut scores = Vec::with_capacity(t + 1);
                for j in 0..=t {
                    let kh = &self.k_cache[l][j * d + off..j * d + off + head_dim];
                    scores.push(kernels::dot(qh, kh) * scale);
                }
                let mut probs = vec![0.0; t + 1];
                kernels::softmax_row(&scores, &mut probs);
                let out = &mut merged[off..off + head_dim];
                for j in 0..=t {
                    let vh = &self.v_cache[l][j * d + off..j * d + off + head_dim];
                    let p = probs[j];
                    for e in 0..head_dim {
                        out[e] += p * vh[e];
                    }
                }
            }
            let o = kernels::matmul_nt(&merged, &layer.wo, 1, d, d);
            for i in 0..d {
                x[i] += o[i];
            }

            kernels::rmsnorm_row(&x, &layer.mlp_norm, RMS_EPS, &mut normed);
            let h = spec.mlp_hidden();
            let mut up = kernels::matmul_nt(&normed, &layer.w_up, 1, d, h);
            for u in up.iter_mut() {
                *u = kernels::silu(*u);
            }
            let down = kernels::matmul_nt(&up, &layer.w_down, 1, h, d);
            for i in 0..d {
                x[i] += down[i];
            }
        }

        kernels::rmsnorm_row(&x, &self.w.final_norm, RMS_EPS, &mut normed);
        let logits = kernels::matmul_nt(&normed, &self.w.lm_head, 1, d, spec.vocab_size);
        self.len += 1;
        Ok(logits)
    }

    /// Feed a whole prefix; returns the logits row at its last position.
    pub fn prefill(&mut self, ids: &[u32]) -> Result<Vec<f64>, PolicyError> {
        if ids.is_empty() {
            return Err(PolicyError::BadRequest("empty prefill".into()));
        }
        let mut last = Vec::new();
        for &id in ids {
            last = self.push_token(id)?;
        }
        Ok(last)
    }
}

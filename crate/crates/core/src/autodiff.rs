//! Minimal reverse-mode automatic differentiation over dense f64 arrays.
//!
//! A [`Graph`] is an append-only tape: every operation records its inputs,
//! its output tensor, and enough saved state to run the backward rule.
//! Tensors live in the graph arena and are addressed by [`TensorId`].
//! [`Graph::backward`] sweeps the tape once in reverse and fills the `grad`
//! slot of every `requires_grad` tensor reachable from the loss.
//!
//! All arithmetic is in 64-bit floats. Every forward op checks its output for
//! NaN/Inf and reports [`AutodiffError::NonFinite`] instead of propagating
//! poisoned values. A graph is confined to one thread; independent graphs may
//! run in parallel.

use thiserror::Error;

use crate::kernels;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("token id {id} out of range for vocab size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("invalid argument for {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Dense tensor: row-major data plus an optional gradient of the same length.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Handle into a graph's tensor arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

enum Op {
    Leaf,
    Add { a: TensorId, b: TensorId },
    AddRowBias { a: TensorId, bias: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    MulScalar { a: TensorId, c: f64 },
    AddScalar { a: TensorId },
    Exp { a: TensorId },
    Expm1 { a: TensorId },
    Log { a: TensorId },
    Silu { a: TensorId },
    Clip { a: TensorId, lo: f64, hi: f64 },
    MinElem { a: TensorId, b: TensorId },
    Matmul { a: TensorId, b: TensorId, m: usize, k: usize, n: usize },
    MatmulNt { a: TensorId, b: TensorId, m: usize, k: usize, n: usize },
    SoftmaxLastAxis { a: TensorId, cols: usize },
    GatherLogProb { logits: TensorId, ids: Vec<usize>, probs: Vec<f64> },
    RmsNorm { x: TensorId, gain: TensorId, inv_rms: Vec<f64> },
    Embedding { table: TensorId, ids: Vec<usize>, cols: usize },
    SumAll { a: TensorId },
    MeanAll { a: TensorId },
    SliceCols { a: TensorId, start: usize, cols: usize },
    ConcatCols { parts: Vec<(TensorId, usize)> },
    Slice1d { a: TensorId, start: usize },
}

/// Append-only tape of recorded operations.
pub struct Graph {
    tensors: Vec<Tensor>,
    ops: Vec<(TensorId, Op)>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { tensors: Vec::new(), ops: Vec::new() }
    }

    pub fn num_tensors(&self) -> usize {
        self.tensors.len()
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.tensors[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.tensors[id.0].shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.tensors[id.0].grad.as_deref()
    }

    /// Insert a leaf tensor. `requires_grad` marks it as a differentiation target.
    pub fn leaf(&mut self, shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "leaf",
                detail: format!("shape {:?} implies {} elements, got {}", shape, numel, data.len()),
            });
        }
        self.push(shape.to_vec(), data, requires_grad, Op::Leaf, "leaf")
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<TensorId> {
        self.leaf(shape, data, false)
    }

    pub fn param(&mut self, shape: &[usize], data: Vec<f64>) -> Result<TensorId> {
        self.leaf(shape, data, true)
    }

    /// Scalar constant with shape [].
    pub fn scalar_const(&mut self, v: f64) -> Result<TensorId> {
        self.leaf(&[], vec![v], false)
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        op: Op,
        name: &'static str,
    ) -> Result<TensorId> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(AutodiffError::NonFinite { op: name });
        }
        let id = TensorId(self.tensors.len());
        self.tensors.push(Tensor { shape, data, grad: None, requires_grad });
        self.ops.push((id, op));
        Ok(id)
    }

    fn requires(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.tensors[id.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        if self.tensors[a.0].shape != self.tensors[b.0].shape {
            return Err(AutodiffError::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.tensors[a.0].shape, self.tensors[b.0].shape),
            });
        }
        Ok(())
    }

    fn dims2(&self, op: &'static str, a: TensorId) -> Result<(usize, usize)> {
        let s = &self.tensors[a.0].shape;
        if s.len() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op,
                detail: format!("expected a 2-d tensor, got {:?}", s),
            });
        }
        Ok((s[0], s[1]))
    }

    // ── Elementwise ──────────────────────────────────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("add", a, b)?;
        let data: Vec<f64> =
            self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.requires(&[a, b]);
        self.push(self.shape(a).to_vec(), data, rg, Op::Add { a, b }, "add")
    }

    /// a[t, j] + bias[j] for a 2-d `a` and 1-d `bias`.
    pub fn add_row_bias(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId> {
        let (rows, cols) = self.dims2("add_row_bias", a)?;
        if self.shape(bias) != [cols] {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_row_bias",
                detail: format!("bias {:?} vs row width {}", self.shape(bias), cols),
            });
        }
        let mut data = self.value(a).to_vec();
        let bv = self.value(bias);
        for t in 0..rows {
            for j in 0..cols {
                data[t * cols + j] += bv[j];
            }
        }
        let rg = self.requires(&[a, bias]);
        self.push(self.shape(a).to_vec(), data, rg, Op::AddRowBias { a, bias }, "add_row_bias")
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("sub", a, b)?;
        let data: Vec<f64> =
            self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let rg = self.requires(&[a, b]);
        self.push(self.shape(a).to_vec(), data, rg, Op::Sub { a, b }, "sub")
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("mul", a, b)?;
        let data: Vec<f64> =
            self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.requires(&[a, b]);
        self.push(self.shape(a).to_vec(), data, rg, Op::Mul { a, b }, "mul")
    }

    pub fn mul_scalar(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        let data: Vec<f64> = self.value(a).iter().map(|x| x * c).collect();
        let rg = self.requires(&[a]);
        self.push(self.shape(a).to_vec(), data, rg, Op::MulScalar { a, c }, "mul_scalar")
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        let data: Vec<f64> = self.value(a).iter().map(|x| x + c).collect();
        let rg = self.requires(&[a]);
        self.push(self.shape(a).to_vec(), data, rg, Op::AddScalar { a }, "add_scalar")
    }

    pub fn exp(&mut self, a: TensorId) -> Result<TensorId> {
        let data: Vec<f64> = self.value(a).iter().map(|x| x.exp()).collect();
        let rg = self.requires(&[a]);
        self.push(self.shape(a).to_vec(), data, rg, Op::Exp { a }, "exp")
    }

    /// e^x − 1 with full precision near zero; backward is e^x like `exp`.
    pub fn expm1(&mut self, a: TensorId) -> Result<TensorId> {
        let data: Vec<f64> = self.value(a).iter().map(|x| x.exp_m1()).collect();
        let rg = self.requires(&[a]);
        self.push(self.shape(a).to_vec(), data, rg, Op::Expm1 { a }, "expm1")
    }

    pub fn log(&mut self, a: TensorId) -> Result<TensorId> {
        let data: Vec<f64> = self.value(a).iter().map(|x| x.ln()).collect();
        let rg = self.requires(&[a]);
        self.push(self.shape(a).to_vec(), data, rg, Op::Log { a }, "log")
    }

    pub fn silu(&mut self, a: TensorId) -> Result<TensorId> {
        let data: Vec<f64> = self.value(a).iter().map(|&x| kernels::silu(x)).collect();
        let rg = self.requires(&[a]);
        self.push(self.shape(a).to_vec(), data, rg, Op::Silu { a }, "silu")
    }

    /// Clamp to [lo, hi]. Subgradient is 1 inside the interval (boundary
    /// included) and 0 outside.
    pub fn clip(&mut self, a: TensorId, lo: f64, hi: f64) -> Result<TensorId> {
        if lo > hi {
            return Err(AutodiffError::InvalidArgument {
                op: "clip",
                detail: format!("lo {} > hi {}", lo, hi),
            });
        }
        let data: Vec<f64> = self.value(a).iter().map(|x| x.clamp(lo, hi)).collect();
        let rg = self.requires(&[a]);
        self.push(self.shape(a).to_vec(), data, rg, Op::Clip { a, lo, hi }, "clip")
    }

    /// Elementwise min; ties route the gradient to the first argument.
    pub fn min_elem(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("min_elem", a, b)?;
        let data: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| if x <= y { *x } else { *y })
            .collect();
        let rg = self.requires(&[a, b]);
        self.push(self.shape(a).to_vec(), data, rg, Op::MinElem { a, b }, "min_elem")
    }

    // ── Linear algebra ───────────────────────────────────────────────

    /// C[m,n] = A[m,k] · B[k,n]. Backward: dA = dC·Bᵀ, dB = Aᵀ·dC.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = self.dims2("matmul", a)?;
        let (kb, n) = self.dims2("matmul", b)?;
        if ka != kb {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                detail: format!("[{m}x{ka}] · [{kb}x{n}]: inner dimensions disagree"),
            });
        }
        let data = kernels::matmul_nn(self.value(a), self.value(b), m, ka, n);
        let rg = self.requires(&[a, b]);
        self.push(vec![m, n], data, rg, Op::Matmul { a, b, m, k: ka, n }, "matmul")
    }

    /// C[m,n] = A[m,k] · B[n,k]ᵀ — the natural form for `[out,in]` weights.
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = self.dims2("matmul_nt", a)?;
        let (n, kb) = self.dims2("matmul_nt", b)?;
        if ka != kb {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul_nt",
                detail: format!("[{m}x{ka}] · [{n}x{kb}]ᵀ: inner dimensions disagree"),
            });
        }
        let data = kernels::matmul_nt(self.value(a), self.value(b), m, ka, n);
        let rg = self.requires(&[a, b]);
        self.push(vec![m, n], data, rg, Op::MatmulNt { a, b, m, k: ka, n }, "matmul_nt")
    }

    // ── Neural-net ops ───────────────────────────────────────────────

    /// Softmax over the last axis, with max subtraction for stability.
    pub fn softmax_last_axis(&mut self, a: TensorId) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        let cols = *shape.last().ok_or(AutodiffError::ShapeMismatch {
            op: "softmax_last_axis",
            detail: "rank-0 tensor".into(),
        })?;
        if cols == 0 {
            return Err(AutodiffError::ShapeMismatch {
                op: "softmax_last_axis",
                detail: "last axis is empty".into(),
            });
        }
        let src = self.value(a);
        let mut data = vec![0.0; src.len()];
        for (row, out) in src.chunks(cols).zip(data.chunks_mut(cols)) {
            kernels::softmax_row(row, out);
        }
        let rg = self.requires(&[a]);
        self.push(shape, data, rg, Op::SoftmaxLastAxis { a, cols }, "softmax_last_axis")
    }

    /// log softmax(logits)[t, ids[t]] per row of a [T,V] tensor.
    pub fn gather_log_prob(&mut self, logits: TensorId, ids: &[usize]) -> Result<TensorId> {
        let (rows, vocab) = self.dims2("gather_log_prob", logits)?;
        if ids.len() != rows {
            return Err(AutodiffError::ShapeMismatch {
                op: "gather_log_prob",
                detail: format!("{} ids for {} rows", ids.len(), rows),
            });
        }
        for &id in ids {
            if id >= vocab {
                return Err(AutodiffError::TokenOutOfRange { id, vocab });
            }
        }
        let src = self.value(logits);
        let mut data = vec![0.0; rows];
        let mut probs = vec![0.0; rows * vocab];
        for t in 0..rows {
            let row = &src[t * vocab..(t + 1) * vocab];
            kernels::softmax_row(row, &mut probs[t * vocab..(t + 1) * vocab]);
            data[t] = kernels::log_prob_at(row, ids[t]);
        }
        let rg = self.requires(&[logits]);
        self.push(
            vec![rows],
            data,
            rg,
            Op::GatherLogProb { logits, ids: ids.to_vec(), probs },
            "gather_log_prob",
        )
    }

    /// y[t,i] = gain[i] · x[t,i] / sqrt(mean(x[t,·]²) + eps).
    pub fn rmsnorm(&mut self, x: TensorId, gain: TensorId, eps: f64) -> Result<TensorId> {
        let (rows, cols) = self.dims2("rmsnorm", x)?;
        if self.shape(gain) != [cols] {
            return Err(AutodiffError::ShapeMismatch {
                op: "rmsnorm",
                detail: format!("gain {:?} vs row width {}", self.shape(gain), cols),
            });
        }
        let src = self.value(x);
        let gv = self.value(gain);
        let mut data = vec![0.0; src.len()];
        let mut inv_rms = vec![0.0; rows];
        for t in 0..rows {
            let row = &src[t * cols..(t + 1) * cols];
            let inv = kernels::rms_inv(row, eps);
            inv_rms[t] = inv;
            for i in 0..cols {
                data[t * cols + i] = gv[i] * row[i] * inv;
            }
        }
        let rg = self.requires(&[x, gain]);
        self.push(vec![rows, cols], data, rg, Op::RmsNorm { x, gain, inv_rms }, "rmsnorm")
    }

    /// Row lookup: out[t,·] = table[ids[t],·]. Backward scatter-adds.
    pub fn embedding(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let (vocab, cols) = self.dims2("embedding", table)?;
        for &id in ids {
            if id >= vocab {
                return Err(AutodiffError::TokenOutOfRange { id, vocab });
            }
        }
        let src = self.value(table);
        let mut data = vec![0.0; ids.len() * cols];
        for (t, &id) in ids.iter().enumerate() {
            data[t * cols..(t + 1) * cols].copy_from_slice(&src[id * cols..(id + 1) * cols]);
        }
        let rg = self.requires(&[table]);
        self.push(
            vec![ids.len(), cols],
            data,
            rg,
            Op::Embedding { table, ids: ids.to_vec(), cols },
            "embedding",
        )
    }

    // ── Reductions ───────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: TensorId) -> Result<TensorId> {
        let s: f64 = self.value(a).iter().sum();
        let rg = self.requires(&[a]);
        self.push(vec![], vec![s], rg, Op::SumAll { a }, "sum_all")
    }

    pub fn mean_all(&mut self, a: TensorId) -> Result<TensorId> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(AutodiffError::InvalidArgument {
                op: "mean_all",
                detail: "mean of an empty tensor".into(),
            });
        }
        let s: f64 = self.value(a).iter().sum::<f64>() / n as f64;
        let rg = self.requires(&[a]);
        self.push(vec![], vec![s], rg, Op::MeanAll { a }, "mean_all")
    }

    // ── Shape ops ────────────────────────────────────────────────────

    /// Column slice of a 2-d tensor: out = a[:, start..start+len].
    pub fn slice_cols(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (rows, cols) = self.dims2("slice_cols", a)?;
        if start + len > cols || len == 0 {
            return Err(AutodiffError::ShapeMismatch {
                op: "slice_cols",
                detail: format!("slice {}..{} of {} columns", start, start + len, cols),
            });
        }
        let src = self.value(a);
        let mut data = vec![0.0; rows * len];
        for t in 0..rows {
            data[t * len..(t + 1) * len]
                .copy_from_slice(&src[t * cols + start..t * cols + start + len]);
        }
        let rg = self.requires(&[a]);
        self.push(vec![rows, len], data, rg, Op::SliceCols { a, start, cols }, "slice_cols")
    }

    /// Concatenate 2-d tensors with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(AutodiffError::InvalidArgument {
                op: "concat_cols",
                detail: "no tensors to concatenate".into(),
            });
        }
        let (rows, _) = self.dims2("concat_cols", parts[0])?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0usize;
        for &p in parts {
            let (r, c) = self.dims2("concat_cols", p)?;
            if r != rows {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_cols",
                    detail: format!("row counts {} vs {}", rows, r),
                });
            }
            widths.push(c);
            total += c;
        }
        let mut data = vec![0.0; rows * total];
        let mut off = 0usize;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p);
            for t in 0..rows {
                data[t * total + off..t * total + off + w]
                    .copy_from_slice(&src[t * w..(t + 1) * w]);
            }
            off += w;
        }
        let rg = self.requires(parts);
        let recorded = parts.iter().copied().zip(widths).collect();
        self.push(vec![rows, total], data, rg, Op::ConcatCols { parts: recorded }, "concat_cols")
    }

    /// Contiguous slice of a 1-d tensor.
    pub fn slice_1d(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let s = self.shape(a);
        if s.len() != 1 || start + len > s[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "slice_1d",
                detail: format!("slice {}..{} of shape {:?}", start, start + len, s),
            });
        }
        let data = self.value(a)[start..start + len].to_vec();
        let rg = self.requires(&[a]);
        self.push(vec![len], data, rg, Op::Slice1d { a, start }, "slice_1d")
    }

    // ── Composite ────────────────────────────────────────────────────

    /// Multi-head causal self-attention over a [T,d] input.
    ///
    /// Weights are `[out,in]`-layout projections; the causal mask is a large
    /// negative additive constant above the diagonal. Position t of the output
    /// depends only on input rows ≤ t.
    pub fn causal_self_attention(
        &mut self,
        x: TensorId,
        wq: TensorId,
        wk: TensorId,
        wv: TensorId,
        wo: TensorId,
        n_heads: usize,
    ) -> Result<TensorId> {
        let (rows, d) = self.dims2("causal_self_attention", x)?;
        if n_heads == 0 || d % n_heads != 0 {
            return Err(AutodiffError::InvalidArgument {
                op: "causal_self_attention",
                detail: format!("d_model {} not divisible by n_heads {}", d, n_heads),
            });
        }
        let head_dim = d / n_heads;
        let scale = 1.0 / (head_dim as f64).sqrt();

        let q = self.matmul_nt(x, wq)?;
        let k = self.matmul_nt(x, wk)?;
        let v = self.matmul_nt(x, wv)?;

        let mut mask = vec![0.0; rows * rows];
        for t in 0..rows {
            for j in (t + 1)..rows {
                mask[t * rows + j] = crate::kernels::CAUSAL_MASK_VALUE;
            }
        }
        let mask = self.constant(&[rows, rows], mask)?;

        let mut heads = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let qh = self.slice_cols(q, h * head_dim, head_dim)?;
            let kh = self.slice_cols(k, h * head_dim, head_dim)?;
            let vh = self.slice_cols(v, h * head_dim, head_dim)?;
            let scores = self.matmul_nt(qh, kh)?;
            let scores = self.mul_scalar(scores, scale)?;
            let scores = self.add(scores, mask)?;
            let attn = self.softmax_last_axis(scores)?;
            heads.push(self.matmul(attn, vh)?);
        }
        let merged = self.concat_cols(&heads)?;
        self.matmul_nt(merged, wo)
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Fills `grad` on every reachable
    /// `requires_grad` tensor; unreachable tensors are left untouched.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        let lt = &self.tensors[loss.0];
        if lt.numel() != 1 {
            return Err(AutodiffError::NonScalarLoss { shape: lt.shape.clone() });
        }
        let n = self.tensors.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..self.ops.len()).rev() {
            let (out, _) = self.ops[idx];
            if grads[out.0].is_none() || !self.tensors[out.0].requires_grad {
                continue;
            }
            let gout = grads[out.0].take().unwrap();
            self.backward_op(idx, &gout, &mut grads);
            grads[out.0] = Some(gout);
        }

        for (i, g) in grads.into_iter().enumerate() {
            if self.tensors[i].requires_grad {
                if let Some(g) = g {
                    self.tensors[i].grad = Some(g);
                }
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], id: TensorId, add: impl FnOnce(&mut [f64])) {
        if !self.tensors[id.0].requires_grad {
            return;
        }
        let slot = &mut grads[id.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.tensors[id.0].data.len()]);
        }
        add(slot.as_mut().unwrap());
    }

    fn backward_op(&self, idx: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (_, op) = &self.ops[idx];
        match op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                self.accumulate(grads, *a, |g| {
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi += go;
                    }
                });
                self.accumulate(grads, *b, |g| {
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi += go;
                    }
                });
            }
            Op::AddRowBias { a, bias } => {
                self.accumulate(grads, *a, |g| {
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi += go;
                    }
                });
                let cols = self.tensors[bias.0].data.len();
                self.accumulate(grads, *bias, |g| {
                    for (t, chunk) in gout.chunks(cols).enumerate() {
                        let _ = t;
                        for (gi, &go) in g.iter_mut().zip(chunk) {
                            *gi += go;
                        }
                    }
                });
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, |g| {
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi += go;
                    }
                });
                self.accumulate(grads, *b, |g| {
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi -= go;
                    }
                });
            }
            Op::Mul { a, b } => {
                let av = &self.tensors[a.0].data;
                let bv = &self.tensors[b.0].data;
                self.accumulate(grads, *a, |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * bv[i];
                    }
                });
                self.accumulate(grads, *b, |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * av[i];
                    }
                });
            }
            Op::MulScalar { a, c } => {
                let c = *c;
                self.accumulate(grads, *a, |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * c;
                    }
                });
            }
            Op::AddScalar { a } => {
                self.accumulate(grads, *a, |g| {
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi += go;
                    }
                });
            }
            Op::Exp { a } | Op::Expm1 { a } => {
                let av = &self.tensors[a.0].data;
                self.accumulate(grads, *a, |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * av[i].exp();
                    }
                });
            }
            Op::Log { a } => {
                let av = &self.tensors[a.0].data;
                self.accumulate(grads, *a, |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] / av[i];
                    }
                });
            }
            Op::Silu { a } => {
                let av = &self.tensors[a.0].data;
                self.accumulate(grads, *a, |g| {
                    for i in 0..g.len() {
                        let s = kernels::sigmoid(av[i]);
                        g[i] += gout[i] * s * (1.0 + av[i] * (1.0 - s));
                    }
                });
            }
            Op::Clip { a, lo, hi } => {
                let av = &self.tensors[a.0].data;
                let (lo, hi) = (*lo, *hi);
                self.accumulate(grads, *a, |g| {
                    for i in 0..g.len() {
                        if av[i] >= lo && av[i] <= hi {
                            g[i] += gout[i];
                        }
                    }
                });
            }
            Op::MinElem { a, b } => {
                let av = &self.tensors[a.0].data;
                let bv = &self.tensors[b.0].data;
                self.accumulate(grads, *a, |g| {
                    for i in 0..g.len() {
                        if av[i] <= bv[i] {
                            g[i] += gout[i];
                        }
                    }
                });
                self.accumulate(grads, *b, |g| {
                    for i in 0..g.len() {
                        if av[i] > bv[i] {
                            g[i] += gout[i];
                        }
                    }
                });
            }
            Op::Matmul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let av = &self.tensors[a.0].data;
                let bv = &self.tensors[b.0].data;
                if self.tensors[a.0].requires_grad {
                    let da = kernels::matmul_nt(gout, bv, m, n, k);
                    self.accumulate(grads, *a, |g| {
                        for i in 0..g.len() {
                            g[i] += da[i];
                        }
                    });
                }
                if self.tensors[b.0].requires_grad {
                    let db = kernels::matmul_tn(av, gout, m, k, n);
                    self.accumulate(grads, *b, |g| {
                        for i in 0..g.len() {
                            g[i] += db[i];
                        }
                    });
                }
            }
            Op::MatmulNt { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let av = &self.tensors[a.0].data;
                let bv = &self.tensors[b.0].data;
                if self.tensors[a.0].requires_grad {
                    let da = kernels::matmul_nn(gout, bv, m, n, k);
                    self.accumulate(grads, *a, |g| {
                        for i in 0..g.len() {
                            g[i] += da[i];
                        }
                    });
                }
                if self.tensors[b.0].requires_grad {
                    let db = kernels::matmul_tn(gout, av, m, n, k);
                    self.accumulate(grads, *b, |g| {
                        for i in 0..g.len() {
                            g[i] += db[i];
                        }
                    });
                }
            }
            Op::SoftmaxLastAxis { a, cols } => {
                let cols = *cols;
                let y = &self.tensors[self.ops[idx].0 .0].data;
                self.accumulate(grads, *a, |g| {
                    for (row, (yrow, grow)) in y.chunks(cols).zip(gout.chunks(cols)).enumerate() {
                        let mut dotp = 0.0;
                        for i in 0..cols {
                            dotp += grow[i] * yrow[i];
                        }
                        let base = row * cols;
                        for i in 0..cols {
                            g[base + i] += yrow[i] * (grow[i] - dotp);
                        }
                    }
                });
            }
            Op::GatherLogProb { logits, ids, probs } => {
                let vocab = self.tensors[logits.0].shape[1];
                self.accumulate(grads, *logits, |g| {
                    for (t, &id) in ids.iter().enumerate() {
                        let go = gout[t];
                        let prow = &probs[t * vocab..(t + 1) * vocab];
                        let base = t * vocab;
                        for v in 0..vocab {
                            g[base + v] -= go * prow[v];
                        }
                        g[base + id] += go;
                    }
                });
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let cols = self.tensors[gain.0].data.len();
                let xv = &self.tensors[x.0].data;
                let gv = &self.tensors[gain.0].data;
                if self.tensors[x.0].requires_grad {
                    self.accumulate(grads, *x, |g| {
                        for t in 0..inv_rms.len() {
                            let inv = inv_rms[t];
                            let base = t * cols;
                            let mut proj = 0.0;
                            for i in 0..cols {
                                proj += gout[base + i] * gv[i] * xv[base + i];
                            }
                            let coef = inv * inv * inv * proj / cols as f64;
                            for i in 0..cols {
                                g[base + i] += gout[base + i] * gv[i] * inv - xv[base + i] * coef;
                            }
                        }
                    });
                }
                if self.tensors[gain.0].requires_grad {
                    self.accumulate(grads, *gain, |g| {
                        for t in 0..inv_rms.len() {
                            let inv = inv_rms[t];
                            let base = t * cols;
                            for i in 0..cols {
                                g[i] += gout[base + i] * xv[base + i] * inv;
                            }
                        }
                    });
                }
            }
            Op::Embedding { table, ids, cols } => {
                let cols = *cols;
                self.accumulate(grads, *table, |g| {
                    for (t, &id) in ids.iter().enumerate() {
                        for i in 0..cols {
                            g[id * cols + i] += gout[t * cols + i];
                        }
                    }
                });
            }
            Op::SumAll { a } => {
                let go = gout[0];
                self.accumulate(grads, *a, |g| {
                    for gi in g.iter_mut() {
                        *gi += go;
                    }
                });
            }
            Op::MeanAll { a } => {
                let n = self.tensors[a.0].data.len() as f64;
                let go = gout[0] / n;
                self.accumulate(grads, *a, |g| {
                    for gi in g.iter_mut() {
                        *gi += go;
                    }
                });
            }
            Op::SliceCols { a, start, cols } => {
                let (start, cols) = (*start, *cols);
                let len = self.tensors[self.ops[idx].0 .0].shape[1];
                self.accumulate(grads, *a, |g| {
                    for t in 0..gout.len() / len {
                        for i in 0..len {
                            g[t * cols + start + i] += gout[t * len + i];
                        }
                    }
                });
            }
            Op::ConcatCols { parts } => {
                let total: usize = parts.iter().map(|(_, w)| w).sum();
                let mut off = 0usize;
                for &(p, w) in parts {
                    self.accumulate(grads, p, |g| {
                        for t in 0..g.len() / w {
                            for i in 0..w {
                                g[t * w + i] += gout[t * total + off + i];
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::Slice1d { a, start } => {
                let start = *start;
                self.accumulate(grads, *a, |g| {
                    for (i, &go) in gout.iter().enumerate() {
                        g[start + i] += go;
                    }
                });
            }
        }
    }
}

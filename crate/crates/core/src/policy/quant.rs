//! Simulated 4-bit weight quantization: symmetric round-to-nearest signed
//! int4 codes with per-group absmax scales.
//!
//! Groups run along the input dimension of each `[out, in]` matrix. The scale
//! is max|w|/7, codes lie in [−7, 7], and the per-element reconstruction
//! error is bounded by scale/2. Codes and scales are frozen; forward passes
//! use the dequantized materialization.

use std::collections::BTreeMap;

use crate::policy::ModelWeights;

pub const DEFAULT_GROUP_SIZE: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLinear {
    pub group_size: usize,
    pub rows: usize,
    pub cols: usize,
    /// One scale per group, groups taken row by row.
    pub scales: Vec<f64>,
    pub codes: Vec<i8>,
}

impl QuantizedLinear {
    pub fn quantize(w: &[f64], rows: usize, cols: usize, group_size: usize) -> QuantizedLinear {
        assert_eq!(w.len(), rows * cols);
        assert!(group_size >= 1);
        let groups_per_row = cols.div_ceil(group_size);
        let mut scales = Vec::with_capacity(rows * groups_per_row);
        let mut codes = Vec::with_capacity(w.len());
        for r in 0..rows {
            let row = &w[r * cols..(r + 1) * cols];
            for group in row.chunks(group_size) {
                let absmax = group.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
                let scale = absmax / 7.0;
                scales.push(scale);
                for &v in group {
                    let code = if scale == 0.0 {
                        0
                    } else {
                        (v / scale).round().clamp(-7.0, 7.0) as i8
                    };
                    codes.push(code);
                }
            }
        }
        QuantizedLinear { group_size, rows, cols, scales, codes }
    }

    pub fn dequantize(&self) -> Vec<f64> {
        let groups_per_row = self.cols.div_ceil(self.group_size);
        let mut out = Vec::with_capacity(self.rows * self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                let g = r * groups_per_row + c / self.group_size;
                out.push(self.codes[r * self.cols + c] as f64 * self.scales[g]);
            }
        }
        out
    }
}

/// A base model whose linear matrices are held as int4 codes. The dense
/// materialization is dequantized once and reused for every forward pass.
#[derive(Debug, Clone)]
pub struct QuantizedModel {
    pub group_size: usize,
    pub mats: BTreeMap<String, QuantizedLinear>,
    dense: ModelWeights,
}

/// Matrices that get quantized: all projections, MLP weights, and the output
/// head. Embeddings and norm gains stay dense.
fn quantized_tensor_names(w: &ModelWeights) -> Vec<String> {
    let mut names = crate::policy::lora_target_names(&w.spec);
    names.push("lm_head".to_string());
    names
}

impl QuantizedModel {
    pub fn from_dense(w: &ModelWeights, group_size: usize) -> QuantizedModel {
        let mut dense = w.clone();
        let mut mats = BTreeMap::new();
        for name in quantized_tensor_names(w) {
            let shape = ModelWeights::shape_of(&w.spec, &name).expect("known tensor");
            let src = w.tensor(&name).expect("known tensor");
            let q = QuantizedLinear::quantize(src, shape[0], shape[1], group_size);
            *dense.tensor_mut(&name).expect("known tensor") = q.dequantize();
            mats.insert(name, q);
        }
        QuantizedModel { group_size, mats, dense }
    }

    pub fn dense_view(&self) -> &ModelWeights {
        &self.dense
    }
}

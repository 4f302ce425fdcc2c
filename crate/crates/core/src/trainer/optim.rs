//! Adam optimizer and global gradient-norm clipping.

use std::collections::BTreeMap;

/// Adam with bias correction (β₁=0.9, β₂=0.999, eps=1e-8).
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}

impl Adam {
    pub fn new() -> Adam {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// Advance the shared timestep; call once per optimization pass, before
    /// updating tensors.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Apply one Adam update to a named tensor.
    pub fn update(&mut self, lr: f64, name: &str, param: &mut [f64], grad: &[f64]) {
        assert_eq!(param.len(), grad.len(), "{name}: param/grad length mismatch");
        assert!(self.t >= 1, "begin_step must run before update");
        let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; param.len()]);
        let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; param.len()]);
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..param.len() {
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            param[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the post-clip norm.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Vec<f64>>, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for g in grads.values() {
        for &x in g {
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        let mut sq2 = 0.0;
        for g in grads.values_mut() {
            for x in g.iter_mut() {
                *x *= scale;
                sq2 += *x * *x;
            }
        }
        sq2.sqrt()
    } else {
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut adam = Adam::new();
        let mut p = vec![0.5, -1.25, 3.0];
        let before = p.clone();
        for _ in 0..10 {
            adam.begin_step();
            adam.update(1e-2, "w", &mut p, &[0.0, 0.0, 0.0]);
        }
        assert_eq!(p, before);
    }

    #[test]
    fn adam_first_step_matches_reference() {
        // With bias correction, the first update is lr·g/(|g| + eps·...) ≈ ±lr.
        let mut adam = Adam::new();
        let mut p = vec![1.0, 1.0];
        adam.begin_step();
        adam.update(0.1, "w", &mut p, &[0.5, -2.0]);
        assert!((p[0] - (1.0 - 0.1)).abs() < 1e-6, "{}", p[0]);
        assert!((p[1] - (1.0 + 0.1)).abs() < 1e-6, "{}", p[1]);
    }

    #[test]
    fn descends_a_quadratic() {
        let mut adam = Adam::new();
        let mut p = vec![4.0];
        for _ in 0..500 {
            let g = vec![2.0 * p[0]];
            adam.begin_step();
            adam.update(0.05, "x", &mut p, &g);
        }
        assert!(p[0].abs() < 0.05, "{}", p[0]);
    }

    #[test]
    fn clip_preserves_small_gradients_and_caps_large_ones() {
        let mut small = BTreeMap::from([("a".to_string(), vec![0.3, 0.4])]);
        let n = clip_global_norm(&mut small, 1.0);
        assert!((n - 0.5).abs() < 1e-12);
        assert_eq!(small["a"], vec![0.3, 0.4]);

        let mut large = BTreeMap::from([
            ("a".to_string(), vec![3.0, 0.0]),
            ("b".to_string(), vec![0.0, 4.0]),
        ]);
        let n = clip_global_norm(&mut large, 1.0);
        assert!(n <= 1.0 + 1e-9);
        assert!((n - 1.0).abs() < 1e-9);
        assert!((large["a"][0] - 0.6).abs() < 1e-12);
        assert!((large["b"][1] - 0.8).abs() < 1e-12);
    }
}

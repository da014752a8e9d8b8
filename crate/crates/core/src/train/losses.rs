use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morphable::VertexAttributes;
use crate::nets::softmax_backward;
use crate::nets::DeformationOutput;

/// Weights of the mask and FLAME terms and of the FLAME attribute blocks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_m: f64,
    pub lambda_fl: f64,
    pub lambda_e: f64,
    pub lambda_p: f64,
    pub lambda_w: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_m: 2.0,
            lambda_fl: 1.0,
            lambda_e: 1000.0,
            lambda_p: 1000.0,
            lambda_w: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_m, self.lambda_fl, self.lambda_e, self.lambda_p, self.lambda_w];
        if all.iter().all(|v| v.is_finite() && *v >= 0.0) {
            Ok(())
        } else {
            Err(Error::invalid("loss weights must be finite and non-negative"))
        }
    }

    /// `rgb + lambda_m * mask + lambda_fl * flame`.
    pub fn total(&self, c: &LossComponents) -> f64 {
        c.rgb + self.lambda_m * c.mask + self.lambda_fl * c.flame
    }
}

/// Batch-normalized loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub rgb: f64,
    pub mask: f64,
    pub flame: f64,
}

impl LossComponents {
    pub fn add(&mut self, o: &LossComponents) {
        self.rgb += o.rgb;
        self.mask += o.mask;
        self.flame += o.flame;
    }

    pub fn is_finite(&self) -> bool {
        self.rgb.is_finite() && self.mask.is_finite() && self.flame.is_finite()
    }
}

/// Summed absolute error of one pixel and its gradient w.r.t. the
/// prediction.
pub fn l1_pixel(pred: &[f64; 3], gt: &[f64; 3]) -> (f64, [f64; 3]) {
    let mut loss = 0.0;
    let mut g = [0.0; 3];
    for k in 0..3 {
        let d = pred[k] - gt[k];
        loss += d.abs();
        g[k] = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
    }
    (loss, g)
}

pub const BCE_CLAMP: f64 = 1e-6;

/// Binary cross-entropy of occupancy `logistic(raw)` against a 0/1 label,
/// with the probability clamped to `[1e-6, 1 - 1e-6]`; returns the loss and
/// its derivative w.r.t. `raw` (zero where the clamp is active).
pub fn bce_from_raw(raw: f64, label: f64) -> (f64, f64) {
    let p = crate::nets::logistic(raw);
    let pc = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    let loss = -(label * pc.ln() + (1.0 - label) * (1.0 - pc).ln());
    let grad = if p == pc { p - label } else { 0.0 };
    (loss, grad)
}

/// Derivative guard of the unsquared norm at zero.
pub const NORM_EPS: f64 = 1e-12;

fn norm_term(pred: &[f64], gt: &[f64], out: &mut [f64], weight: f64) -> f64 {
    let n = pred.iter().zip(gt).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let s = weight / n.max(NORM_EPS);
    for ((o, a), b) in out.iter_mut().zip(pred).zip(gt) {
        *o = s * (a - b);
    }
    weight * n
}

/// FLAME pseudo-ground-truth term of one point: weighted unsquared
/// Euclidean distances of the expression, pose-corrective and skinning
/// blocks. Returns the loss and its gradient w.r.t. the raw deformation
/// outputs (skinning logits before softmax).
pub fn flame_point(
    out: &DeformationOutput,
    gt: &VertexAttributes,
    w: &LossWeights,
    raw_len: usize,
) -> Result<(f64, Vec<f64>)> {
    if out.expr.len() != gt.expr.len() || out.pose.len() != gt.pose.len() || out.weights.len() != gt.weights.len() {
        return Err(Error::invalid("deformation output does not match the template attributes"));
    }
    let (ne, np) = (out.expr.len(), out.pose.len());
    let mut g = vec![0.0; raw_len];
    let mut loss = norm_term(&out.expr, gt.expr, &mut g[..ne], w.lambda_e);
    loss += norm_term(&out.pose, gt.pose, &mut g[ne..ne + np], w.lambda_p);
    let mut wg = vec![0.0; out.weights.len()];
    loss += norm_term(&out.weights, gt.weights, &mut wg, w.lambda_w);
    g[ne + np..].copy_from_slice(&softmax_backward(&out.weights, &wg));
    Ok((loss, g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::softmax;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_weights() {
        let w = LossWeights::default();
        assert_eq!((w.lambda_m, w.lambda_fl), (2.0, 1.0));
        assert_eq!((w.lambda_e, w.lambda_p, w.lambda_w), (1000.0, 1000.0, 0.1));
    }

    #[test]
    fn total_is_the_weighted_sum() {
        let w = LossWeights::default();
        let c = LossComponents {
            rgb: 1.0,
            mask: 0.5,
            flame: 0.2,
        };
        assert!((w.total(&c) - 2.2).abs() < 1e-15);
        let unsup = LossWeights { lambda_fl: 0.0, ..w };
        assert_eq!(unsup.total(&c), 2.0);
        assert_eq!(w.total(&LossComponents::default()), 0.0);
    }

    #[test]
    fn l1_example() {
        let (l, _) = l1_pixel(&[0.5, 0.5, 0.5], &[0.4, 0.3, 0.2]);
        assert!((l / 4.0 - 0.15).abs() < 1e-15);
        assert_eq!(l1_pixel(&[0.3; 3], &[0.3; 3]).0, 0.0);
    }

    #[test]
    fn bce_examples() {
        let (l, g) = bce_from_raw(0.0, 1.0);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((g + 0.5).abs() < 1e-15);
        // occupancy 1e-6 against label 0
        let raw = (1e-6f64 / (1.0 - 1e-6)).ln();
        let (l, _) = bce_from_raw(raw, 0.0);
        assert!((l - 1e-6).abs() < 1e-9);
        // deep inside the clamp: bounded loss, no gradient
        let (l, g) = bce_from_raw(-40.0, 1.0);
        assert!((l + (1e-6f64).ln()).abs() < 1e-9 && g == 0.0);
    }

    #[test]
    fn bce_gradient_matches_finite_differences() {
        for (raw, y) in [(0.3, 1.0), (-1.2, 0.0), (2.5, 0.0), (-0.4, 1.0)] {
            let h = 1e-6;
            let fd = (bce_from_raw(raw + h, y).0 - bce_from_raw(raw - h, y).0) / (2.0 * h);
            assert!((fd - bce_from_raw(raw, y).1).abs() < 1e-8);
        }
    }

    #[test]
    fn flame_term_zero_at_pseudo_gt_and_fd_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (ne, np, nw) = (6, 9, 5);
        let raw: Vec<f64> = (0..ne + np + nw).map(|_| rng.random_range(-1.0..1.0)).collect();
        let decode = |r: &[f64]| DeformationOutput {
            expr: r[..ne].to_vec(),
            pose: r[ne..ne + np].to_vec(),
            weights: softmax(&r[ne + np..]),
        };
        let out = decode(&raw);
        let same = VertexAttributes {
            index: 0,
            expr: &out.expr,
            pose: &out.pose,
            weights: &out.weights,
        };
        let w = LossWeights::default();
        assert_eq!(flame_point(&out, &same, &w, raw.len()).unwrap().0, 0.0);

        let ge: Vec<f64> = (0..ne).map(|_| rng.random_range(-1.0..1.0)).collect();
        let gp: Vec<f64> = (0..np).map(|_| rng.random_range(-1.0..1.0)).collect();
        let gw = softmax(&(0..nw).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>());
        let gt = VertexAttributes {
            index: 0,
            expr: &ge,
            pose: &gp,
            weights: &gw,
        };
        let (_, g) = flame_point(&out, &gt, &w, raw.len()).unwrap();
        for i in 0..raw.len() {
            let h = 1e-6;
            let mut rp = raw.clone();
            rp[i] += h;
            let mut rm = raw.clone();
            rm[i] -= h;
            let fd = (flame_point(&decode(&rp), &gt, &w, raw.len()).unwrap().0
                - flame_point(&decode(&rm), &gt, &w, raw.len()).unwrap().0)
                / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-3 * fd.abs().max(1e-3), "{i}: {fd} vs {}", g[i]);
        }
    }
}

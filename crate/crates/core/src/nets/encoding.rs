//! Sinusoidal positional encoding with analytic first and second
//! derivatives.

use std::f64::consts::PI;

/// Encoded width for `num_freqs` frequencies, raw point included.
pub fn encoded_width(num_freqs: usize) -> usize {
    3 * 2 * num_freqs + 3
}

/// Per coordinate `sin(2^f pi x), cos(2^f pi x)` for `f = 0..num_freqs`,
/// then the raw point.
pub fn positional_encoding(x: &[f64; 3], num_freqs: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(encoded_width(num_freqs));
    for &xi in x {
        for f in 0..num_freqs {
            let a = PI * (1u64 << f) as f64;
            let (s, c) = (a * xi).sin_cos();
            out.push(s);
            out.push(c);
        }
    }
    out.extend_from_slice(x);
    out
}

/// Encoding, its Jacobian (`width x 3` row-major) and, per feature, the
/// second derivative along the single coordinate it depends on.
pub struct EncodingDerivatives {
    pub value: Vec<f64>,
    pub jacobian: Vec<f64>,
    pub second: Vec<f64>,
    /// coordinate each feature depends on
    pub coord: Vec<usize>,
}

pub fn positional_encoding_derivatives(x: &[f64; 3], num_freqs: usize) -> EncodingDerivatives {
    let w = encoded_width(num_freqs);
    let mut value = Vec::with_capacity(w);
    let mut jacobian = vec![0.0; w * 3];
    let mut second = Vec::with_capacity(w);
    let mut coord = Vec::with_capacity(w);
    for (i, &xi) in x.iter().enumerate() {
        for f in 0..num_freqs {
            let a = PI * (1u64 << f) as f64;
            let (s, c) = (a * xi).sin_cos();
            let row = value.len();
            value.push(s);
            jacobian[row * 3 + i] = a * c;
            second.push(-a * a * s);
            coord.push(i);
            value.push(c);
            jacobian[(row + 1) * 3 + i] = -a * s;
            second.push(-a * a * c);
            coord.push(i);
        }
    }
    for (i, &xi) in x.iter().enumerate() {
        let row = value.len();
        value.push(xi);
        jacobian[row * 3 + i] = 1.0;
        second.push(0.0);
        coord.push(i);
    }
    EncodingDerivatives {
        value,
        jacobian,
        second,
        coord,
    }
}

impl EncodingDerivatives {
    /// Pull back cotangents of the features (`feat_grad`) and of their
    /// Jacobian (`jac_grad`, `width x 3`, may be empty) onto the point.
    pub fn pullback(&self, feat_grad: &[f64], jac_grad: &[f64]) -> [f64; 3] {
        let mut g = [0.0; 3];
        for (f, &i) in self.coord.iter().enumerate() {
            g[i] += feat_grad[f] * self.jacobian[f * 3 + i];
            if !jac_grad.is_empty() {
                g[i] += jac_grad[f * 3 + i] * self.second[f];
            }
        }
        g
    }
}

//! Fixed-shape multilayer perceptron with hand-written forward and reverse
//! passes.
//!
//! Besides the usual value/parameter gradients, the forward pass can carry
//! `k` input tangents (directional derivatives with respect to some outer
//! variable, e.g. a 3D point), and the reverse pass accepts cotangents for
//! those output tangents. This is what lets losses depend on spatial
//! Jacobians of a network (normals, warp Jacobians) and still be
//! differentiated exactly.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Softplus { beta: f64 },
    Sigmoid,
}

impl Activation {
    /// `(a(z), a'(z), a''(z))`
    #[inline]
    pub fn eval(self, z: f64) -> (f64, f64, f64) {
        match self {
            Activation::Identity => (z, 1.0, 0.0),
            Activation::Relu => {
                if z > 0.0 {
                    (z, 1.0, 0.0)
                } else {
                    (0.0, 0.0, 0.0)
                }
            }
            Activation::Softplus { beta } => {
                let bz = beta * z;
                let s = logistic(bz);
                // log(1 + e^bz) computed without overflow
                let sp = if bz > 0.0 { bz + (-bz).exp().ln_1p() } else { bz.exp().ln_1p() };
                (sp / beta, s, beta * s * (1.0 - s))
            }
            Activation::Sigmoid => {
                let s = logistic(z);
                (s, s * (1.0 - s), s * (1.0 - s) * (1.0 - 2.0 * s))
            }
        }
    }

    #[inline]
    pub fn value(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
            Activation::Softplus { beta } => {
                let bz = beta * z;
                (if bz > 0.0 { bz + (-bz).exp().ln_1p() } else { bz.exp().ln_1p() }) / beta
            }
            Activation::Sigmoid => logistic(z),
        }
    }

    #[inline]
    fn value_and_slope(self, z: f64) -> (f64, f64) {
        match self {
            Activation::Identity => (z, 1.0),
            Activation::Relu => {
                if z > 0.0 {
                    (z, 1.0)
                } else {
                    (0.0, 0.0)
                }
            }
            _ => {
                let (a, d, _) = self.eval(z);
                (a, d)
            }
        }
    }
}

#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub inputs: usize,
    pub outputs: usize,
}

/// Weights are stored row-major (`outputs x inputs`) followed by the bias,
/// layer after layer, in one flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    shapes: Vec<LayerShape>,
    activations: Vec<Activation>,
    offsets: Vec<usize>,
    pub params: Vec<f64>,
}

/// Intermediates of one forward pass, needed by [`Mlp::backward`].
#[derive(Debug, Clone, Default)]
pub struct MlpTrace {
    /// layer inputs `h_{l-1}`; index 0 is the network input
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    /// input tangents per layer, `dim x k` row-major
    tangents: Vec<Vec<f64>>,
    /// pre-activation tangents `W T_{l-1}`
    pre_tangents: Vec<Vec<f64>>,
    k: usize,
    pub output: Vec<f64>,
    /// `outputs x k` row-major
    pub output_tangents: Vec<f64>,
}

impl MlpTrace {
    pub fn tangent_count(&self) -> usize {
        self.k
    }
}

pub struct BackwardResult {
    pub input_grad: Vec<f64>,
    /// `inputs x k` row-major, empty without tangents.
    pub input_tangent_grad: Vec<f64>,
}

impl Mlp {
    /// `dims = [input, hidden.., output]`; one activation per layer.
    pub fn new(dims: &[usize], activations: Vec<Activation>) -> Result<Self> {
        if dims.len() < 2 || activations.len() != dims.len() - 1 {
            return Err(Error::invalid(format!(
                "mlp: {} dims need {} activations, got {}",
                dims.len(),
                dims.len().saturating_sub(1),
                activations.len()
            )));
        }
        let shapes: Vec<LayerShape> = dims
            .windows(2)
            .map(|w| LayerShape { inputs: w[0], outputs: w[1] })
            .collect();
        let mut offsets = Vec::with_capacity(shapes.len() + 1);
        let mut off = 0;
        for s in &shapes {
            offsets.push(off);
            off += s.outputs * s.inputs + s.outputs;
        }
        offsets.push(off);
        Ok(Self {
            shapes,
            activations,
            offsets,
            params: vec![0.0; off],
        })
    }

    pub fn from_parts(dims: &[usize], activations: Vec<Activation>, params: Vec<f64>) -> Result<Self> {
        let mut m = Self::new(dims, activations)?;
        if params.len() != m.params.len() {
            return Err(Error::invalid(format!(
                "mlp: expected {} parameters, got {}",
                m.params.len(),
                params.len()
            )));
        }
        m.params = params;
        Ok(m)
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn num_layers(&self) -> usize {
        self.shapes.len()
    }

    pub fn input_dim(&self) -> usize {
        self.shapes[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.shapes.last().unwrap().outputs
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.shapes[0].inputs];
        d.extend(self.shapes.iter().map(|s| s.outputs));
        d
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn shape(&self, layer: usize) -> LayerShape {
        self.shapes[layer]
    }

    pub fn weight(&self, layer: usize) -> &[f64] {
        let s = self.shapes[layer];
        &self.params[self.offsets[layer]..self.offsets[layer] + s.outputs * s.inputs]
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        let s = self.shapes[layer];
        let start = self.offsets[layer] + s.outputs * s.inputs;
        &self.params[start..start + s.outputs]
    }

    pub fn weight_mut(&mut self, layer: usize) -> &mut [f64] {
        let s = self.shapes[layer];
        let off = self.offsets[layer];
        &mut self.params[off..off + s.outputs * s.inputs]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut [f64] {
        let s = self.shapes[layer];
        let start = self.offsets[layer] + s.outputs * s.inputs;
        &mut self.params[start..start + s.outputs]
    }

    /// Parameter-vector range of one layer's weights then bias.
    pub fn layer_range(&self, layer: usize) -> std::ops::Range<usize> {
        self.offsets[layer]..self.offsets[layer + 1]
    }

    /// Fill every layer with `N(0, std)` weights (`std = gain / sqrt(fan_in)`)
    /// and zero biases.
    pub fn init_normal(&mut self, rng: &mut impl Rng, gain: f64) {
        for l in 0..self.num_layers() {
            let std = gain / (self.shapes[l].inputs.max(1) as f64).sqrt();
            let dist = Normal::new(0.0, std).unwrap();
            for w in self.weight_mut(l) {
                *w = dist.sample(rng);
            }
            self.bias_mut(l).fill(0.0);
        }
    }

    fn layer_forward(&self, l: usize, input: &[f64], out: &mut Vec<f64>) {
        let s = self.shapes[l];
        let w = self.weight(l);
        let b = self.bias(l);
        out.clear();
        out.extend((0..s.outputs).map(|i| b[i] + dot(&w[i * s.inputs..(i + 1) * s.inputs], input)));
    }

    /// Outputs only.
    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        self.forward_to(input, self.num_layers())
    }

    /// Activations after the first `layers` layers.
    pub fn forward_to(&self, input: &[f64], layers: usize) -> Vec<f64> {
        debug_assert_eq!(input.len(), self.input_dim());
        let mut h = input.to_vec();
        let mut z = Vec::new();
        for l in 0..layers {
            self.layer_forward(l, &h, &mut z);
            let act = self.activations[l];
            std::mem::swap(&mut h, &mut z);
            for v in h.iter_mut() {
                *v = act.value(*v);
            }
        }
        h
    }

    /// Activations and their `k` tangents after the first `layers` layers.
    pub fn forward_tangents_to(&self, input: &[f64], tangents: &[f64], k: usize, layers: usize) -> (Vec<f64>, Vec<f64>) {
        let mut h = input.to_vec();
        let mut t = tangents.to_vec();
        let mut z = Vec::new();
        for l in 0..layers {
            self.layer_forward(l, &h, &mut z);
            let zt = self.tangent_product(l, &t, k);
            let act = self.activations[l];
            h.clear();
            t.clear();
            for (i, &zi) in z.iter().enumerate() {
                let (a, d) = act.value_and_slope(zi);
                h.push(a);
                t.extend(zt[i * k..(i + 1) * k].iter().map(|v| v * d));
            }
        }
        (h, t)
    }

    fn tangent_product(&self, l: usize, t: &[f64], k: usize) -> Vec<f64> {
        let s = self.shapes[l];
        let w = self.weight(l);
        let mut zt = vec![0.0; s.outputs * k];
        for i in 0..s.outputs {
            let row = &w[i * s.inputs..(i + 1) * s.inputs];
            let dst = &mut zt[i * k..(i + 1) * k];
            for (j, &wij) in row.iter().enumerate() {
                if wij != 0.0 {
                    let src = &t[j * k..(j + 1) * k];
                    for c in 0..k {
                        dst[c] += wij * src[c];
                    }
                }
            }
        }
        zt
    }

    /// Forward pass recording everything [`Mlp::backward`] needs. With `k > 0`,
    /// `tangents` (`inputs x k`) are propagated alongside.
    pub fn forward_trace(&self, input: &[f64], tangents: &[f64], k: usize) -> MlpTrace {
        assert_eq!(input.len(), self.input_dim(), "mlp input width");
        assert_eq!(tangents.len(), self.input_dim() * k, "mlp tangent shape");
        let n = self.num_layers();
        let mut trace = MlpTrace {
            inputs: Vec::with_capacity(n),
            pre: Vec::with_capacity(n),
            tangents: Vec::with_capacity(n),
            pre_tangents: Vec::with_capacity(n),
            k,
            output: Vec::new(),
            output_tangents: Vec::new(),
        };
        let mut h = input.to_vec();
        let mut t = tangents.to_vec();
        for l in 0..n {
            let mut z = Vec::new();
            self.layer_forward(l, &h, &mut z);
            let zt = if k > 0 { self.tangent_product(l, &t, k) } else { Vec::new() };
            let act = self.activations[l];
            let mut next_h = Vec::with_capacity(z.len());
            let mut next_t = Vec::with_capacity(zt.len());
            for (i, &zi) in z.iter().enumerate() {
                let (a, d) = act.value_and_slope(zi);
                next_h.push(a);
                if k > 0 {
                    next_t.extend(zt[i * k..(i + 1) * k].iter().map(|v| v * d));
                }
            }
            trace.inputs.push(std::mem::replace(&mut h, next_h));
            trace.tangents.push(std::mem::replace(&mut t, next_t));
            trace.pre.push(z);
            trace.pre_tangents.push(zt);
        }
        trace.output = h;
        trace.output_tangents = t;
        trace
    }

    /// Reverse pass. `out_grad` is the cotangent of the outputs and
    /// `out_tangent_grad` (`outputs x k`, may be empty) that of the output
    /// tangents. Parameter gradients are *added* into `param_grad` when given.
    pub fn backward(
        &self,
        trace: &MlpTrace,
        out_grad: &[f64],
        out_tangent_grad: &[f64],
        mut param_grad: Option<&mut [f64]>,
    ) -> Result<BackwardResult> {
        let n = self.num_layers();
        if trace.inputs.len() != n || trace.output.len() != self.output_dim() {
            return Err(Error::InvalidState("backward without a matching forward trace".into()));
        }
        if let Some(g) = param_grad.as_deref() {
            if g.len() != self.num_params() {
                return Err(Error::invalid("parameter gradient buffer has the wrong length"));
            }
        }
        let k = trace.k;
        let with_tangents = k > 0 && !out_tangent_grad.is_empty();
        if out_grad.len() != self.output_dim() || (with_tangents && out_tangent_grad.len() != self.output_dim() * k) {
            return Err(Error::invalid("output cotangent shape"));
        }
        let mut hbar = out_grad.to_vec();
        let mut tbar = if with_tangents { out_tangent_grad.to_vec() } else { Vec::new() };

        for l in (0..n).rev() {
            let s = self.shapes[l];
            let act = self.activations[l];
            let z = &trace.pre[l];
            let zt = &trace.pre_tangents[l];
            let mut zbar = vec![0.0; s.outputs];
            let mut ztbar = if with_tangents { vec![0.0; s.outputs * k] } else { Vec::new() };
            for i in 0..s.outputs {
                let (_, d1, d2) = act.eval(z[i]);
                let mut zb = hbar[i] * d1;
                if with_tangents {
                    for c in 0..k {
                        let tb = tbar[i * k + c];
                        zb += tb * zt[i * k + c] * d2;
                        ztbar[i * k + c] = tb * d1;
                    }
                }
                zbar[i] = zb;
            }

            let w = self.weight(l);
            let h_prev = &trace.inputs[l];
            let t_prev = &trace.tangents[l];
            if let Some(g) = param_grad.as_deref_mut() {
                let off = self.offsets[l];
                let (gw, gb) = g[off..off + s.outputs * s.inputs + s.outputs].split_at_mut(s.outputs * s.inputs);
                for i in 0..s.outputs {
                    let row = &mut gw[i * s.inputs..(i + 1) * s.inputs];
                    let zb = zbar[i];
                    if zb != 0.0 {
                        for (gij, hj) in row.iter_mut().zip(h_prev) {
                            *gij += zb * hj;
                        }
                    }
                    if with_tangents {
                        let ztb = &ztbar[i * k..(i + 1) * k];
                        if ztb.iter().any(|v| *v != 0.0) {
                            for (j, gij) in row.iter_mut().enumerate() {
                                let tp = &t_prev[j * k..(j + 1) * k];
                                let mut acc = 0.0;
                                for c in 0..k {
                                    acc += ztb[c] * tp[c];
                                }
                                *gij += acc;
                            }
                        }
                    }
                    gb[i] += zb;
                }
            }

            let mut hbar_prev = vec![0.0; s.inputs];
            let mut tbar_prev = if with_tangents { vec![0.0; s.inputs * k] } else { Vec::new() };
            for i in 0..s.outputs {
                let row = &w[i * s.inputs..(i + 1) * s.inputs];
                let zb = zbar[i];
                if zb != 0.0 {
                    for (hb, wij) in hbar_prev.iter_mut().zip(row) {
                        *hb += wij * zb;
                    }
                }
                if with_tangents {
                    let ztb = &ztbar[i * k..(i + 1) * k];
                    for (j, wij) in row.iter().enumerate() {
                        for c in 0..k {
                            tbar_prev[j * k + c] += wij * ztb[c];
                        }
                    }
                }
            }
            hbar = hbar_prev;
            tbar = tbar_prev;
        }
        Ok(BackwardResult {
            input_grad: hbar,
            input_tangent_grad: tbar,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sp() -> Activation {
        Activation::Softplus { beta: 100.0 }
    }

    fn random_mlp(seed: u64, dims: &[usize], acts: Vec<Activation>) -> Mlp {
        let mut m = Mlp::new(dims, acts).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        m.init_normal(&mut rng, 1.0);
        for b in 0..m.num_layers() {
            for v in m.bias_mut(b) {
                *v = rng.random_range(-0.3..0.3);
            }
        }
        m
    }

    #[test]
    fn activation_derivatives_match_finite_differences() {
        for act in [sp(), Activation::Sigmoid, Activation::Softplus { beta: 2.0 }] {
            for &z in &[-0.3, -0.01, 0.0, 0.004, 0.2, 1.5] {
                let h = 1e-6;
                let (_, d1, d2) = act.eval(z);
                let fd1 = (act.value(z + h) - act.value(z - h)) / (2.0 * h);
                let fd2 = (act.eval(z + h).1 - act.eval(z - h).1) / (2.0 * h);
                assert!((d1 - fd1).abs() < 1e-6 * (1.0 + d1.abs()), "{act:?} {z}");
                assert!((d2 - fd2).abs() < 1e-4 * (1.0 + d2.abs()), "{act:?} {z}");
            }
        }
        // no overflow far out
        assert!(sp().value(50.0).is_finite());
        assert_eq!(sp().value(-50.0), 0.0);
        assert_eq!(logistic(0.0), 0.5);
    }

    #[test]
    fn linear_layer_weight_gradient_is_outer_product() {
        // loss = |W x|^2 / 2  =>  dL/dW = (W x) x^T
        let mut m = Mlp::new(&[3, 2], vec![Activation::Identity]).unwrap();
        m.weight_mut(0).copy_from_slice(&[0.5, -1.0, 2.0, 0.3, 0.7, -0.2]);
        let x = [0.4, -0.9, 1.3];
        let trace = m.forward_trace(&x, &[], 0);
        let y = trace.output.clone();
        let mut g = vec![0.0; m.num_params()];
        m.backward(&trace, &y, &[], Some(&mut g)).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                assert!((g[i * 3 + j] - y[i] * x[j]).abs() < 1e-15);
            }
            assert!((g[6 + i] - y[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_accumulates_linearly() {
        let m = random_mlp(1, &[4, 8, 8, 2], vec![sp(), sp(), Activation::Identity]);
        let x = [0.1, -0.2, 0.3, 0.05];
        let trace = m.forward_trace(&x, &[], 0);
        let mut twice = vec![0.0; m.num_params()];
        m.backward(&trace, &[1.0, -0.5], &[], Some(&mut twice)).unwrap();
        m.backward(&trace, &[1.0, -0.5], &[], Some(&mut twice)).unwrap();
        let mut doubled = vec![0.0; m.num_params()];
        m.backward(&trace, &[2.0, -1.0], &[], Some(&mut doubled)).unwrap();
        for (a, b) in twice.iter().zip(&doubled) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn backward_rejects_mismatched_trace() {
        let a = random_mlp(1, &[3, 4, 1], vec![sp(), Activation::Identity]);
        let b = random_mlp(1, &[3, 4, 4, 1], vec![sp(), sp(), Activation::Identity]);
        let trace = a.forward_trace(&[0.0; 3], &[], 0);
        assert!(matches!(b.backward(&trace, &[1.0], &[], None), Err(Error::InvalidState(_))));
        assert!(matches!(
            b.backward(&MlpTrace::default(), &[1.0], &[], None),
            Err(Error::InvalidState(_))
        ));
    }

    #[test]
    fn tangents_match_finite_differences() {
        let m = random_mlp(2, &[3, 16, 16, 4], vec![sp(), sp(), Activation::Sigmoid]);
        let x = [0.2, -0.1, 0.4];
        let eye = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let trace = m.forward_trace(&x, &eye, 3);
        let (h2, t2) = m.forward_tangents_to(&x, &eye, 3, m.num_layers());
        assert_eq!(h2, trace.output);
        assert_eq!(t2, trace.output_tangents);
        let h = 1e-6;
        for c in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[c] += h;
            xm[c] -= h;
            let (fp, fm) = (m.forward(&xp), m.forward(&xm));
            for o in 0..4 {
                let fd = (fp[o] - fm[o]) / (2.0 * h);
                assert!((fd - trace.output_tangents[o * 3 + c]).abs() < 1e-6);
            }
        }
    }

    /// Loss depending on outputs and on their spatial Jacobian; the reverse
    /// pass must agree with finite differences for parameters and inputs.
    #[test]
    fn second_order_backward_matches_finite_differences() {
        let mut m = random_mlp(3, &[3, 12, 12, 2], vec![sp(), Activation::Softplus { beta: 3.0 }, Activation::Identity]);
        let x = [0.3, 0.1, -0.25];
        let eye = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let wo = [0.7, -1.3];
        let wt = [0.2, -0.4, 0.9, 1.1, 0.5, -0.6];
        let loss = |m: &Mlp, x: &[f64; 3]| {
            let tr = m.forward_trace(x, &eye, 3);
            let a: f64 = tr.output.iter().zip(&wo).map(|(o, w)| o * w).sum();
            let b: f64 = tr.output_tangents.iter().zip(&wt).map(|(t, w)| t * t * w).sum();
            a + b
        };
        let tr = m.forward_trace(&x, &eye, 3);
        let tgrad: Vec<f64> = tr.output_tangents.iter().zip(&wt).map(|(t, w)| 2.0 * t * w).collect();
        let mut g = vec![0.0; m.num_params()];
        let res = m.backward(&tr, &wo, &tgrad, Some(&mut g)).unwrap();
        let h = 1e-5;
        for p in (0..m.num_params()).step_by(7) {
            let orig = m.params[p];
            m.params[p] = orig + h;
            let lp = loss(&m, &x);
            m.params[p] = orig - h;
            let lm = loss(&m, &x);
            m.params[p] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - g[p]).abs() <= 1e-4 * fd.abs().max(g[p].abs()).max(1e-3), "param {p}: {fd} vs {}", g[p]);
        }
        // input gradient: tangents of the input are constant (identity), so
        // only the value path contributes
        for c in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[c] += h;
            xm[c] -= h;
            let fd = (loss(&m, &xp) - loss(&m, &xm)) / (2.0 * h);
            assert!((fd - res.input_grad[c]).abs() <= 1e-4 * fd.abs().max(1e-3));
        }
    }

    #[test]
    fn zero_hidden_layers_is_affine() {
        let mut m = Mlp::new(&[3, 1], vec![Activation::Identity]).unwrap();
        m.weight_mut(0).copy_from_slice(&[1.0, 2.0, 3.0]);
        m.bias_mut(0)[0] = -1.0;
        assert_eq!(m.forward(&[1.0, 1.0, 1.0]), vec![5.0]);
    }
}

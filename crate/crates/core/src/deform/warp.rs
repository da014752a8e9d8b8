use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morphable::{kinematics, AnimationParams, MorphableTemplate, Rigid};
use crate::nets::{softmax, softmax_backward, FieldNetworks, MlpTrace};

/// How occupancies of several converged correspondences are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Min,
    Max,
}

/// Root-finding settings of the correspondence search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub max_steps: usize,
    pub tolerance: f64,
    pub dedup_distance: f64,
    pub max_halvings: usize,
    /// Bones whose inverse rigid transforms seed the candidates.
    pub init_bones: Vec<usize>,
    pub aggregation: Aggregation,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            max_steps: 10,
            tolerance: 1e-5,
            dedup_distance: 1e-4,
            max_halvings: 4,
            init_bones: vec![0, 1, 2],
            aggregation: Aggregation::Min,
        }
    }
}

/// Per-frame deformation inputs: parameters, joints, bone transforms
/// relative to the canonical pose and the pose feature.
#[derive(Debug, Clone)]
pub struct WarpContext {
    pub theta: Vec<f64>,
    pub psi: Vec<f64>,
    pub joints: Vec<Vector3<f64>>,
    pub transforms: Vec<Rigid>,
    pub pose_feature: Vec<f64>,
    pub search: SearchConfig,
}

impl WarpContext {
    pub fn new(template: &MorphableTemplate, theta: &[f64], psi: &[f64]) -> Result<Self> {
        let (joints, transforms) = template.transforms(theta, psi)?;
        let pose_feature = kinematics::pose_feature(theta, &template.canonical_pose, template.n_joints)?;
        Ok(Self {
            theta: theta.to_vec(),
            psi: psi.to_vec(),
            joints,
            transforms,
            pose_feature,
            search: SearchConfig::default(),
        })
    }

    pub fn from_params(template: &MorphableTemplate, params: &AnimationParams) -> Result<Self> {
        Self::new(template, &params.theta, &params.psi)
    }

    /// Context from explicit transforms, for synthetic rigs.
    pub fn from_transforms(psi: Vec<f64>, pose_feature: Vec<f64>, transforms: Vec<Rigid>) -> Self {
        Self {
            theta: Vec::new(),
            psi,
            joints: Vec::new(),
            transforms,
            pose_feature,
            search: SearchConfig::default(),
        }
    }

    pub fn with_search(mut self, search: SearchConfig) -> Self {
        self.search = search;
        self
    }

    pub fn check(&self, nets: &FieldNetworks) -> Result<()> {
        let c = &nets.config;
        if self.psi.len() != c.n_expr {
            return Err(Error::invalid(format!("psi: expected {} values, got {}", c.n_expr, self.psi.len())));
        }
        if self.pose_feature.len() != c.n_pose() * 9 || self.transforms.len() != c.n_joints {
            return Err(Error::invalid("warp context does not match the network joint count"));
        }
        if let Some(b) = self.search.init_bones.iter().find(|&&b| b >= self.transforms.len()) {
            return Err(Error::invalid(format!("init bone {b} out of range")));
        }
        Ok(())
    }
}

/// Number of contracted head rows: 3 offset components + skinning logits.
fn head_rows(n_joints: usize) -> usize {
    3 + n_joints
}

/// Forward warp bound to one context and one set of networks. The last
/// deformation layer is contracted with `psi` and the pose feature up front,
/// so each evaluation only produces the summed offset and the logits.
pub struct Warp<'a> {
    pub ctx: &'a WarpContext,
    pub nets: &'a FieldNetworks,
    head_w: Vec<f64>,
    head_b: Vec<f64>,
    hidden: usize,
}

/// Warp value plus everything needed to differentiate the warp and its
/// Jacobian with respect to the point and the deformation parameters.
pub struct WarpTrace {
    pub x: Vector3<f64>,
    pub value: Vector3<f64>,
    pub jacobian: Matrix3<f64>,
    mlp: MlpTrace,
    head: Vec<f64>,
    head_tangents: Vec<f64>,
}

impl<'a> Warp<'a> {
    pub fn new(ctx: &'a WarpContext, nets: &'a FieldNetworks) -> Result<Self> {
        ctx.check(nets)?;
        let c = &nets.config;
        let mlp = &nets.deformation;
        let last = mlp.num_layers() - 1;
        let h = mlp.shape(last).inputs;
        let (_, pose_off, logit_off) = c.deformation_layout();
        let w = mlp.weight(last);
        let b = mlp.bias(last);
        let rows = head_rows(c.n_joints);
        let mut head_w = vec![0.0; rows * h];
        let mut head_b = vec![0.0; rows];
        for comp in 0..3 {
            let dst = &mut head_w[comp * h..(comp + 1) * h];
            let coeffs = ctx
                .psi
                .iter()
                .enumerate()
                .map(|(e, &s)| (e * 3 + comp, s))
                .chain(ctx.pose_feature.iter().enumerate().map(|(m, &s)| (pose_off + m * 3 + comp, s)));
            for (row, s) in coeffs {
                if s != 0.0 {
                    for (d, v) in dst.iter_mut().zip(&w[row * h..(row + 1) * h]) {
                        *d += s * v;
                    }
                    head_b[comp] += s * b[row];
                }
            }
        }
        for j in 0..c.n_joints {
            let row = logit_off + j;
            head_w[(3 + j) * h..(4 + j) * h].copy_from_slice(&w[row * h..(row + 1) * h]);
            head_b[3 + j] = b[row];
        }
        Ok(Self {
            ctx,
            nets,
            head_w,
            head_b,
            hidden: h,
        })
    }

    fn head(&self, hidden: &[f64]) -> Vec<f64> {
        let h = self.hidden;
        self.head_b
            .iter()
            .enumerate()
            .map(|(r, b)| b + crate::nets::mlp::dot(&self.head_w[r * h..(r + 1) * h], hidden))
            .collect()
    }

    fn head_tangents(&self, t: &[f64]) -> Vec<f64> {
        let h = self.hidden;
        let rows = self.head_b.len();
        let mut out = vec![0.0; rows * 3];
        for r in 0..rows {
            let w = &self.head_w[r * h..(r + 1) * h];
            let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
            for (k, wk) in w.iter().enumerate() {
                a += wk * t[k * 3];
                b += wk * t[k * 3 + 1];
                c += wk * t[k * 3 + 2];
            }
            out[r * 3] = a;
            out[r * 3 + 1] = b;
            out[r * 3 + 2] = c;
        }
        out
    }

    fn hidden_layers(&self) -> usize {
        self.nets.deformation.num_layers() - 1
    }

    /// `w(x)`.
    pub fn eval(&self, x: &Vector3<f64>) -> Vector3<f64> {
        let hidden = self.nets.deformation.forward_to(x.as_slice(), self.hidden_layers());
        let v = self.head(&hidden);
        blend_value(&self.ctx.transforms, x, &v)
    }

    /// `w(x)` and its exact spatial Jacobian.
    pub fn eval_with_jacobian(&self, x: &Vector3<f64>) -> (Vector3<f64>, Matrix3<f64>) {
        const EYE: [f64; 9] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let (hidden, t) = self
            .nets
            .deformation
            .forward_tangents_to(x.as_slice(), &EYE, 3, self.hidden_layers());
        let v = self.head(&hidden);
        let dv = self.head_tangents(&t);
        warp_from_head(&self.ctx.transforms, x, &v, &dv)
    }

    pub fn jacobian(&self, x: &Vector3<f64>) -> Matrix3<f64> {
        self.eval_with_jacobian(x).1
    }

    /// Full-head trace for reverse-mode differentiation.
    pub fn trace(&self, x: &Vector3<f64>) -> WarpTrace {
        let c = &self.nets.config;
        let mlp = self.nets.deformation_trace(&[x.x, x.y, x.z], true);
        let (_, pose_off, logit_off) = c.deformation_layout();
        let rows = head_rows(c.n_joints);
        let mut head = vec![0.0; rows];
        let mut head_t = vec![0.0; rows * 3];
        let out = &mlp.output;
        let ot = &mlp.output_tangents;
        for (row, coef, comp) in self.offset_rows(pose_off) {
            head[comp] += coef * out[row];
            for k in 0..3 {
                head_t[comp * 3 + k] += coef * ot[row * 3 + k];
            }
        }
        for j in 0..c.n_joints {
            head[3 + j] = out[logit_off + j];
            head_t[(3 + j) * 3..(4 + j) * 3].copy_from_slice(&ot[(logit_off + j) * 3..(logit_off + j + 1) * 3]);
        }
        let (value, jacobian) = warp_from_head(&self.ctx.transforms, x, &head, &head_t);
        WarpTrace {
            x: *x,
            value,
            jacobian,
            mlp,
            head,
            head_tangents: head_t,
        }
    }

    /// `(full output row, coefficient, offset component)` for every nonzero
    /// contraction coefficient.
    fn offset_rows(&self, pose_off: usize) -> impl Iterator<Item = (usize, f64, usize)> + '_ {
        let psi = self.ctx.psi.iter().enumerate().map(|(e, &s)| (e * 3, s));
        let pose = self.ctx.pose_feature.iter().enumerate().map(move |(m, &s)| (pose_off + m * 3, s));
        psi.chain(pose)
            .filter(|(_, s)| *s != 0.0)
            .flat_map(|(base, s)| (0..3).map(move |comp| (base + comp, s, comp)))
    }

    /// Pull back cotangents of the warp value and Jacobian. Deformation
    /// parameter gradients are added into `param_grad`; returns the point
    /// cotangent.
    pub fn backward(
        &self,
        trace: &WarpTrace,
        value_bar: &Vector3<f64>,
        jac_bar: &Matrix3<f64>,
        param_grad: Option<&mut [f64]>,
    ) -> Result<Vector3<f64>> {
        let c = &self.nets.config;
        let (x_bar, v_bar, dv_bar) = warp_head_backward(
            &self.ctx.transforms,
            &trace.x,
            &trace.head,
            &trace.head_tangents,
            value_bar,
            jac_bar,
        );
        let (_, pose_off, logit_off) = c.deformation_layout();
        let n_out = c.deformation_output_width();
        let mut out_bar = vec![0.0; n_out];
        let mut out_t_bar = vec![0.0; n_out * 3];
        for (row, coef, comp) in self.offset_rows(pose_off) {
            out_bar[row] += coef * v_bar[comp];
            for k in 0..3 {
                out_t_bar[row * 3 + k] += coef * dv_bar[comp * 3 + k];
            }
        }
        for j in 0..c.n_joints {
            out_bar[logit_off + j] = v_bar[3 + j];
            out_t_bar[(logit_off + j) * 3..(logit_off + j + 1) * 3].copy_from_slice(&dv_bar[(3 + j) * 3..(4 + j) * 3]);
        }
        let through_net = self.nets.deformation_backward(&trace.mlp, &out_bar, &out_t_bar, param_grad)?;
        Ok(x_bar + through_net)
    }
}

fn blend_value(transforms: &[Rigid], x: &Vector3<f64>, v: &[f64]) -> Vector3<f64> {
    let y = x + Vector3::new(v[0], v[1], v[2]);
    let w = softmax(&v[3..]);
    let mut out = Vector3::zeros();
    for (wj, t) in w.iter().zip(transforms) {
        out += *wj * t.apply(&y);
    }
    out
}

/// Warp and Jacobian from the contracted head `v = [offset(3), logits]` and
/// its spatial tangents `dv` (`rows x 3`).
pub fn warp_from_head(transforms: &[Rigid], x: &Vector3<f64>, v: &[f64], dv: &[f64]) -> (Vector3<f64>, Matrix3<f64>) {
    let nj = transforms.len();
    let y = x + Vector3::new(v[0], v[1], v[2]);
    let w = softmax(&v[3..3 + nj]);
    let do_ = Matrix3::from_row_slice(&dv[..9]);
    let dl = |j: usize| Vector3::new(dv[(3 + j) * 3], dv[(3 + j) * 3 + 1], dv[(3 + j) * 3 + 2]);
    let s = (0..nj).fold(Vector3::zeros(), |acc, j| acc + w[j] * dl(j));
    let mut value = Vector3::zeros();
    let mut a = Matrix3::zeros();
    let mut rank1 = Matrix3::zeros();
    for j in 0..nj {
        let p = transforms[j].apply(&y);
        value += w[j] * p;
        a += w[j] * transforms[j].rot;
        let dw = w[j] * (dl(j) - s);
        rank1 += p * dw.transpose();
    }
    (value, a * (Matrix3::identity() + do_) + rank1)
}

/// Reverse of [`warp_from_head`]: returns cotangents of `x` (direct path
/// only), `v` and `dv`.
pub fn warp_head_backward(
    transforms: &[Rigid],
    x: &Vector3<f64>,
    v: &[f64],
    dv: &[f64],
    value_bar: &Vector3<f64>,
    jac_bar: &Matrix3<f64>,
) -> (Vector3<f64>, Vec<f64>, Vec<f64>) {
    let nj = transforms.len();
    let y = x + Vector3::new(v[0], v[1], v[2]);
    let w = softmax(&v[3..3 + nj]);
    let do_ = Matrix3::from_row_slice(&dv[..9]);
    let dl: Vec<Vector3<f64>> = (0..nj)
        .map(|j| Vector3::new(dv[(3 + j) * 3], dv[(3 + j) * 3 + 1], dv[(3 + j) * 3 + 2]))
        .collect();
    let s = (0..nj).fold(Vector3::zeros(), |acc, j| acc + w[j] * dl[j]);
    let a = (0..nj).fold(Matrix3::zeros(), |acc, j| acc + w[j] * transforms[j].rot);

    let mut w_bar = vec![0.0; nj];
    let mut dl_bar = vec![Vector3::zeros(); nj];
    let mut y_bar = Vector3::zeros();
    // J = A (I + dO) + sum_j p_j dW_j^T
    let a_bar = jac_bar * (Matrix3::identity() + do_).transpose();
    let do_bar = a.transpose() * jac_bar;
    let mut s_bar = Vector3::zeros();
    for j in 0..nj {
        let r = &transforms[j].rot;
        let p = transforms[j].apply(&y);
        let dw = w[j] * (dl[j] - s);
        // value = sum_j w_j p_j
        w_bar[j] += value_bar.dot(&p);
        let mut p_bar = w[j] * value_bar;
        w_bar[j] += a_bar.component_mul(r).sum();
        p_bar += jac_bar * dw;
        let dw_bar = jac_bar.transpose() * p;
        w_bar[j] += dw_bar.dot(&(dl[j] - s));
        dl_bar[j] += w[j] * dw_bar;
        s_bar -= w[j] * dw_bar;
        y_bar += r.transpose() * p_bar;
    }
    for j in 0..nj {
        w_bar[j] += s_bar.dot(&dl[j]);
        dl_bar[j] += w[j] * s_bar;
    }
    let l_bar = softmax_backward(&w, &w_bar);
    let mut v_bar = vec![y_bar.x, y_bar.y, y_bar.z];
    v_bar.extend(l_bar);
    let mut dv_bar = do_bar.transpose().as_slice().to_vec(); // row-major
    for d in &dl_bar {
        dv_bar.extend_from_slice(d.as_slice());
    }
    (y_bar, v_bar, dv_bar)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::morphable::{axis_angle_to_matrix, contract_row, kinematics::blend_point};
    use crate::nets::FieldConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_nets(seed: u64, scale: f64) -> FieldNetworks {
        let cfg = FieldConfig {
            n_expr: 6,
            n_joints: 5,
            latent_dim: 4,
            pe_freqs: 2,
            geometry_depth: 2,
            geometry_width: 16,
            deformation_depth: 3,
            deformation_width: 24,
            texture_depth: 2,
            texture_width: 8,
            seed,
            ..FieldConfig::default()
        };
        let mut nets = FieldNetworks::new(cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        for v in nets.block_mut(crate::nets::Block::Deformation) {
            if scale > 0.0 {
                *v += rng.random_range(-scale..scale);
            }
        }
        nets
    }

    fn random_ctx(seed: u64, n_expr: usize) -> WarpContext {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let transforms: Vec<Rigid> = (0..5)
            .map(|_| {
                let aa = Vector3::new(rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4));
                let t = Vector3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
                Rigid::new(axis_angle_to_matrix(&aa), t)
            })
            .collect();
        let psi = (0..n_expr).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pf = (0..36).map(|_| rng.random_range(-0.2..0.2)).collect();
        WarpContext::from_transforms(psi, pf, transforms)
    }

    fn oracle(ctx: &WarpContext, nets: &FieldNetworks, x: &Vector3<f64>) -> Vector3<f64> {
        let d = nets.deformation_forward(&[x.x, x.y, x.z]);
        let y = x + contract_row(&ctx.psi, &d.expr) + contract_row(&ctx.pose_feature, &d.pose);
        blend_point(&y, &d.weights, &ctx.transforms)
    }

    #[test]
    fn canonical_frame_with_fresh_net_is_identity() {
        let nets = FieldNetworks::new(
            FieldConfig {
                geometry_width: 8,
                geometry_depth: 1,
                deformation_width: 16,
                texture_width: 8,
                ..Default::default()
            },
            0,
        )
        .unwrap();
        let t = crate::morphable::generate_toy_head(&Default::default()).unwrap();
        let p = AnimationParams::canonical();
        let ctx = WarpContext::from_params(&t, &p).unwrap();
        let warp = Warp::new(&ctx, &nets).unwrap();
        let x = Vector3::new(0.3, -0.1, 0.2);
        let (w, j) = warp.eval_with_jacobian(&x);
        assert!((w - x).norm() < 1e-12);
        assert!((j - Matrix3::identity()).norm() < 1e-12);
    }

    #[test]
    fn global_rotation_with_one_hot_weights() {
        let mut nets = small_nets(1, 0.0);
        // large constant logit on bone 0, zero offsets
        let c = nets.config.clone();
        let last = nets.deformation.num_layers() - 1;
        nets.deformation.bias_mut(last)[c.deformation_layout().2] = 60.0;
        let r = axis_angle_to_matrix(&Vector3::new(0.2, -0.5, 0.3));
        let mut tf = vec![Rigid::identity(); 5];
        tf[0] = Rigid::new(r, Vector3::zeros());
        for (j, t) in tf.iter_mut().enumerate().skip(1) {
            *t = Rigid::new(Matrix3::identity(), Vector3::new(j as f64, 0.0, 0.0));
        }
        let ctx = WarpContext::from_transforms(vec![0.0; 6], vec![0.0; 36], tf);
        let warp = Warp::new(&ctx, &nets).unwrap();
        let x = Vector3::new(0.1, 0.4, -0.3);
        let (w, j) = warp.eval_with_jacobian(&x);
        assert!((w - r * x).norm() < 1e-12);
        assert!((j - r).norm() < 1e-12);
    }

    #[test]
    fn warp_matches_primitive_composition_oracle() {
        for seed in 0..5 {
            let nets = small_nets(seed, 0.3);
            let ctx = random_ctx(seed + 10, 6);
            let warp = Warp::new(&ctx, &nets).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..50 {
                let x = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                let o = oracle(&ctx, &nets, &x);
                assert!((warp.eval(&x) - o).norm() < 1e-12);
                assert!((warp.eval_with_jacobian(&x).0 - o).norm() < 1e-12);
                assert!((warp.trace(&x).value - o).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let nets = small_nets(3, 0.3);
        let ctx = random_ctx(4, 6);
        let warp = Warp::new(&ctx, &nets).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h = 1e-5;
        for _ in 0..100 {
            let x = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let j = warp.jacobian(&x);
            assert!((warp.trace(&x).jacobian - j).norm() < 1e-12);
            for c in 0..3 {
                let e = Vector3::ith(c, h);
                let fd = (warp.eval(&(x + e)) - warp.eval(&(x - e))) / (2.0 * h);
                for r in 0..3 {
                    let (a, b) = (fd[r], j[(r, c)]);
                    assert!((a - b).abs() <= 1e-3 * a.abs().max(b.abs()).max(1e-3), "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn head_backward_matches_finite_differences() {
        let ctx = random_ctx(5, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Vector3::new(0.2, -0.3, 0.5);
        let v: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dv: Vec<f64> = (0..24).map(|_| rng.random_range(-1.0..1.0)).collect();
        let wb = Vector3::new(0.3, -0.7, 1.1);
        let jb = Matrix3::from_fn(|r, c| ((r * 3 + c) as f64 * 0.37).sin());
        let f = |x: &Vector3<f64>, v: &[f64], dv: &[f64]| {
            let (w, j) = warp_from_head(&ctx.transforms, x, v, dv);
            w.dot(&wb) + j.component_mul(&jb).sum()
        };
        let (xb, vb, dvb) = warp_head_backward(&ctx.transforms, &x, &v, &dv, &wb, &jb);
        let h = 1e-6;
        for c in 0..3 {
            let e = Vector3::ith(c, h);
            let fd = (f(&(x + e), &v, &dv) - f(&(x - e), &v, &dv)) / (2.0 * h);
            assert!((fd - xb[c]).abs() < 1e-6);
        }
        for i in 0..8 {
            let (mut a, mut b) = (v.clone(), v.clone());
            a[i] += h;
            b[i] -= h;
            let fd = (f(&x, &a, &dv) - f(&x, &b, &dv)) / (2.0 * h);
            assert!((fd - vb[i]).abs() < 1e-6, "v[{i}] {fd} vs {}", vb[i]);
        }
        for i in 0..24 {
            let (mut a, mut b) = (dv.clone(), dv.clone());
            a[i] += h;
            b[i] -= h;
            let fd = (f(&x, &v, &a) - f(&x, &v, &b)) / (2.0 * h);
            assert!((fd - dvb[i]).abs() < 1e-6, "dv[{i}] {fd} vs {}", dvb[i]);
        }
    }

    #[test]
    fn warp_backward_matches_finite_differences() {
        let mut nets = small_nets(6, 0.3);
        let ctx = random_ctx(7, 6);
        let x = Vector3::new(-0.2, 0.35, 0.1);
        let wb = Vector3::new(0.5, 0.2, -0.9);
        let jb = Matrix3::from_fn(|r, c| ((r * 3 + c) as f64 * 0.71).cos());
        let loss = |nets: &FieldNetworks, x: &Vector3<f64>| {
            let warp = Warp::new(&ctx, nets).unwrap();
            let (w, j) = warp.eval_with_jacobian(x);
            w.dot(&wb) + j.component_mul(&jb).sum()
        };
        let warp = Warp::new(&ctx, &nets).unwrap();
        let tr = warp.trace(&x);
        let mut g = vec![0.0; nets.deformation.num_params()];
        let xb = warp.backward(&tr, &wb, &jb, Some(&mut g)).unwrap();
        let h = 1e-4;
        for c in 0..3 {
            let e = Vector3::ith(c, h);
            let fd = (loss(&nets, &(x + e)) - loss(&nets, &(x - e))) / (2.0 * h);
            assert!((fd - xb[c]).abs() <= 1e-3 * fd.abs().max(1e-3), "x[{c}] {fd} vs {}", xb[c]);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = g.len();
        let mut picks: Vec<usize> = (0..60).map(|_| rng.random_range(0..n)).collect();
        picks.extend(n - 300..n);
        for p in picks {
            let orig = nets.deformation.params[p];
            nets.deformation.params[p] = orig + h;
            let lp = loss(&nets, &x);
            nets.deformation.params[p] = orig - h;
            let lm = loss(&nets, &x);
            nets.deformation.params[p] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!(
                (fd - g[p]).abs() <= 1e-3 * fd.abs().max(g[p].abs()) || (fd - g[p]).abs() <= 1e-6,
                "param {p}: {fd} vs {}",
                g[p]
            );
        }
    }

    #[test]
    fn context_shape_is_checked() {
        let nets = small_nets(0, 0.0);
        let mut ctx = random_ctx(0, 6);
        ctx.psi.pop();
        assert!(Warp::new(&ctx, &nets).is_err());
    }
}

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::encoding::{encoded_width, positional_encoding, positional_encoding_derivatives, EncodingDerivatives};
use super::mlp::{logistic, Activation, Mlp, MlpTrace};
use crate::container::Container;
use crate::error::{Error, Result};

/// Dimensions and initialization settings of the three fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldConfig {
    pub n_expr: usize,
    pub n_joints: usize,
    pub latent_dim: usize,
    pub pe_freqs: usize,
    pub geometry_depth: usize,
    pub geometry_width: usize,
    pub deformation_depth: usize,
    pub deformation_width: usize,
    pub texture_depth: usize,
    pub texture_width: usize,
    /// Softplus sharpness of the geometry hidden layers.
    pub geometry_beta: f64,
    /// Softplus sharpness of the deformation and texture hidden layers.
    pub hidden_beta: f64,
    /// Radius of the initial occupancy sphere.
    pub init_radius: f64,
    pub seed: u64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            n_expr: 50,
            n_joints: 5,
            latent_dim: 32,
            pe_freqs: 6,
            geometry_depth: 8,
            geometry_width: 256,
            deformation_depth: 4,
            deformation_width: 128,
            texture_depth: 4,
            texture_width: 256,
            geometry_beta: 100.0,
            hidden_beta: 100.0,
            init_radius: 0.5,
            seed: 0,
        }
    }
}

impl FieldConfig {
    pub fn n_pose(&self) -> usize {
        self.n_joints.saturating_sub(1)
    }

    pub fn geometry_input_width(&self) -> usize {
        encoded_width(self.pe_freqs) + self.latent_dim
    }

    pub fn deformation_output_width(&self) -> usize {
        self.n_expr * 3 + self.n_pose() * 27 + self.n_joints
    }

    pub fn texture_input_width(&self) -> usize {
        3 + 3 + 3 + self.n_expr
    }

    /// Offsets of the expression, pose and skinning-logit blocks in the
    /// deformation output.
    pub fn deformation_layout(&self) -> (usize, usize, usize) {
        let pose = self.n_expr * 3;
        (0, pose, pose + self.n_pose() * 27)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_joints == 0 || self.n_expr == 0 {
            return Err(Error::invalid("field config: n_joints and n_expr must be positive"));
        }
        for (name, depth, width) in [
            ("geometry", self.geometry_depth, self.geometry_width),
            ("deformation", self.deformation_depth, self.deformation_width),
            ("texture", self.texture_depth, self.texture_width),
        ] {
            if depth == 0 || width == 0 {
                return Err(Error::invalid(format!("field config: {name} needs at least one hidden layer")));
            }
        }
        if !(self.geometry_beta > 0.0 && self.hidden_beta > 0.0 && self.init_radius > 0.0) {
            return Err(Error::invalid("field config: betas and init_radius must be positive"));
        }
        Ok(())
    }

    fn dims(input: usize, depth: usize, width: usize, output: usize) -> Vec<usize> {
        let mut d = vec![input];
        d.extend(std::iter::repeat_n(width, depth));
        d.push(output);
        d
    }

    fn acts(depth: usize, beta: f64, out: Activation) -> Vec<Activation> {
        let mut a = vec![Activation::Softplus { beta }; depth];
        a.push(out);
        a
    }
}

/// Parameter groups, in the fixed order used for flat indexing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    Geometry,
    Deformation,
    Texture,
    Latents,
}

pub const BLOCKS: [Block; 4] = [Block::Geometry, Block::Deformation, Block::Texture, Block::Latents];

/// Geometry, deformation and texture networks plus the per-frame latent table.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldNetworks {
    pub config: FieldConfig,
    pub geometry: Mlp,
    pub deformation: Mlp,
    pub texture: Mlp,
    /// `n_frames x latent_dim`
    pub latents: Vec<f64>,
}

/// Gradient buffers shaped like [`FieldNetworks`] parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldGrads {
    pub geometry: Vec<f64>,
    pub deformation: Vec<f64>,
    pub texture: Vec<f64>,
    pub latents: Vec<f64>,
}

impl FieldGrads {
    pub fn zeros_like(nets: &FieldNetworks) -> Self {
        Self {
            geometry: vec![0.0; nets.geometry.num_params()],
            deformation: vec![0.0; nets.deformation.num_params()],
            texture: vec![0.0; nets.texture.num_params()],
            latents: vec![0.0; nets.latents.len()],
        }
    }

    pub fn block(&self, b: Block) -> &[f64] {
        match b {
            Block::Geometry => &self.geometry,
            Block::Deformation => &self.deformation,
            Block::Texture => &self.texture,
            Block::Latents => &self.latents,
        }
    }

    pub fn block_mut(&mut self, b: Block) -> &mut [f64] {
        match b {
            Block::Geometry => &mut self.geometry,
            Block::Deformation => &mut self.deformation,
            Block::Texture => &mut self.texture,
            Block::Latents => &mut self.latents,
        }
    }

    pub fn add_assign(&mut self, other: &FieldGrads) {
        for b in BLOCKS {
            for (a, o) in self.block_mut(b).iter_mut().zip(other.block(b)) {
                *a += o;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for b in BLOCKS {
            self.block_mut(b).iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn zero(&mut self) {
        for b in BLOCKS {
            self.block_mut(b).fill(0.0);
        }
    }

    pub fn is_finite(&self) -> bool {
        BLOCKS.iter().all(|&b| self.block(b).iter().all(|v| v.is_finite()))
    }

    pub fn len(&self) -> usize {
        BLOCKS.iter().map(|&b| self.block(b).len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, index: usize) -> f64 {
        let (b, i) = locate(index, BLOCKS.map(|b| self.block(b).len()));
        self.block(b)[i]
    }
}

fn locate(mut index: usize, lens: [usize; 4]) -> (Block, usize) {
    for (b, len) in BLOCKS.iter().zip(lens) {
        if index < len {
            return (*b, index);
        }
        index -= len;
    }
    panic!("parameter index out of range");
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Pull back a cotangent of `softmax(l)` onto `l`.
pub fn softmax_backward(weights: &[f64], grad: &[f64]) -> Vec<f64> {
    let d: f64 = weights.iter().zip(grad).map(|(w, g)| w * g).sum();
    weights.iter().zip(grad).map(|(w, g)| w * (g - d)).collect()
}

/// Recorded geometry evaluation; `grad` is `d raw / d x` when the trace
/// carries spatial tangents.
pub struct GeometryTrace {
    enc: EncodingDerivatives,
    mlp: MlpTrace,
    enc_width: usize,
    pub raw: f64,
    pub grad: Vector3<f64>,
}

/// Decoded deformation outputs at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationOutput {
    /// `n_expr x 3`
    pub expr: Vec<f64>,
    /// `n_pose * 9 x 3`
    pub pose: Vec<f64>,
    pub weights: Vec<f64>,
}

impl FieldNetworks {
    /// Networks with deterministic initialization from `config.seed` and a
    /// zeroed latent table of `n_frames` rows.
    pub fn new(config: FieldConfig, n_frames: usize) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut geometry = Mlp::new(
            &FieldConfig::dims(c.geometry_input_width(), c.geometry_depth, c.geometry_width, 1),
            FieldConfig::acts(c.geometry_depth, c.geometry_beta, Activation::Identity),
        )?;
        let mut deformation = Mlp::new(
            &FieldConfig::dims(3, c.deformation_depth, c.deformation_width, c.deformation_output_width()),
            FieldConfig::acts(c.deformation_depth, c.hidden_beta, Activation::Identity),
        )?;
        let mut texture = Mlp::new(
            &FieldConfig::dims(c.texture_input_width(), c.texture_depth, c.texture_width, 3),
            FieldConfig::acts(c.texture_depth, c.hidden_beta, Activation::Sigmoid),
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        geometric_init(&mut geometry, c, &mut rng);
        deformation.init_normal(&mut rng, std::f64::consts::SQRT_2);
        let last = deformation.num_layers() - 1;
        deformation.weight_mut(last).fill(0.0);
        deformation.bias_mut(last).fill(0.0);
        texture.init_normal(&mut rng, std::f64::consts::SQRT_2);
        Ok(Self {
            latents: vec![0.0; n_frames * c.latent_dim],
            config,
            geometry,
            deformation,
            texture,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.latents.len() / self.config.latent_dim.max(1)
    }

    pub fn latent(&self, frame: usize) -> Result<&[f64]> {
        let l = self.config.latent_dim;
        self.latents
            .get(frame * l..(frame + 1) * l)
            .ok_or_else(|| Error::invalid(format!("frame {frame} has no latent (table holds {})", self.n_frames())))
    }

    /// Mean of the trained latents, used for novel parameters; zero when the
    /// table is empty.
    pub fn mean_latent(&self) -> Vec<f64> {
        let l = self.config.latent_dim;
        let n = self.n_frames();
        let mut m = vec![0.0; l];
        if n == 0 {
            return m;
        }
        for row in self.latents.chunks_exact(l) {
            for (a, v) in m.iter_mut().zip(row) {
                *a += v;
            }
        }
        m.iter_mut().for_each(|v| *v /= n as f64);
        m
    }

    // ---- parameter access ----

    pub fn block(&self, b: Block) -> &[f64] {
        match b {
            Block::Geometry => &self.geometry.params,
            Block::Deformation => &self.deformation.params,
            Block::Texture => &self.texture.params,
            Block::Latents => &self.latents,
        }
    }

    pub fn block_mut(&mut self, b: Block) -> &mut [f64] {
        match b {
            Block::Geometry => &mut self.geometry.params,
            Block::Deformation => &mut self.deformation.params,
            Block::Texture => &mut self.texture.params,
            Block::Latents => &mut self.latents,
        }
    }

    pub fn num_params(&self) -> usize {
        BLOCKS.iter().map(|&b| self.block(b).len()).sum()
    }

    pub fn block_range(&self, b: Block) -> std::ops::Range<usize> {
        let mut start = 0;
        for x in BLOCKS {
            let len = self.block(x).len();
            if x == b {
                return start..start + len;
            }
            start += len;
        }
        unreachable!()
    }

    pub fn locate(&self, index: usize) -> (Block, usize) {
        locate(index, BLOCKS.map(|b| self.block(b).len()))
    }

    pub fn param(&self, index: usize) -> f64 {
        let (b, i) = self.locate(index);
        self.block(b)[i]
    }

    pub fn set_param(&mut self, index: usize, value: f64) {
        let (b, i) = self.locate(index);
        self.block_mut(b)[i] = value;
    }

    pub fn check_finite(&self) -> Result<()> {
        for b in BLOCKS {
            if let Some(i) = self.block(b).iter().position(|v| !v.is_finite()) {
                return Err(Error::Divergence(format!("non-finite {b:?} parameter at index {i}")));
            }
        }
        Ok(())
    }

    // ---- geometry ----

    fn check_latent(&self, latent: &[f64]) {
        assert_eq!(latent.len(), self.config.latent_dim, "latent width");
    }

    pub fn geometry_input(&self, x: &[f64; 3], latent: &[f64]) -> Vec<f64> {
        self.check_latent(latent);
        let mut v = positional_encoding(x, self.config.pe_freqs);
        v.extend_from_slice(latent);
        v
    }

    pub fn geometry_raw(&self, x: &[f64; 3], latent: &[f64]) -> f64 {
        self.geometry.forward(&self.geometry_input(x, latent))[0]
    }

    /// `(occupancy, raw)` with `occupancy = logistic(raw)`.
    pub fn geometry_forward(&self, x: &[f64; 3], latent: &[f64]) -> Result<(f64, f64)> {
        let raw = self.geometry_raw(x, latent);
        if !raw.is_finite() {
            return Err(Error::Divergence("geometry output is not finite".into()));
        }
        Ok((logistic(raw), raw))
    }

    /// Raw value and its spatial gradient (one reverse pass).
    pub fn geometry_gradient(&self, x: &[f64; 3], latent: &[f64]) -> (f64, Vector3<f64>) {
        let tr = self.geometry_trace(x, latent, false);
        let g = self
            .geometry_backward(&tr, 1.0, &Vector3::zeros(), None, None)
            .expect("trace matches network");
        (tr.raw, g)
    }

    /// Forward pass recording intermediates; with `spatial` the spatial
    /// gradient of the raw output is propagated as tangents.
    pub fn geometry_trace(&self, x: &[f64; 3], latent: &[f64], spatial: bool) -> GeometryTrace {
        self.check_latent(latent);
        let enc = positional_encoding_derivatives(x, self.config.pe_freqs);
        let enc_width = enc.value.len();
        let mut input = enc.value.clone();
        input.extend_from_slice(latent);
        let mlp = if spatial {
            let mut tangents = enc.jacobian.clone();
            tangents.resize(input.len() * 3, 0.0);
            self.geometry.forward_trace(&input, &tangents, 3)
        } else {
            self.geometry.forward_trace(&input, &[], 0)
        };
        let raw = mlp.output[0];
        let grad = if spatial {
            Vector3::new(mlp.output_tangents[0], mlp.output_tangents[1], mlp.output_tangents[2])
        } else {
            Vector3::zeros()
        };
        GeometryTrace {
            enc,
            mlp,
            enc_width,
            raw,
            grad,
        }
    }

    /// Reverse pass for cotangents of the raw value and of its spatial
    /// gradient. Returns the cotangent of the query point; parameter and
    /// latent gradients are added into the optional buffers.
    pub fn geometry_backward(
        &self,
        trace: &GeometryTrace,
        raw_bar: f64,
        grad_bar: &Vector3<f64>,
        param_grad: Option<&mut [f64]>,
        latent_grad: Option<&mut [f64]>,
    ) -> Result<Vector3<f64>> {
        let tan_bar: Vec<f64> = if trace.mlp.tangent_count() == 3 && grad_bar.iter().any(|v| *v != 0.0) {
            grad_bar.as_slice().to_vec()
        } else {
            Vec::new()
        };
        let res = self.geometry.backward(&trace.mlp, &[raw_bar], &tan_bar, param_grad)?;
        if let Some(lg) = latent_grad {
            for (a, g) in lg.iter_mut().zip(&res.input_grad[trace.enc_width..]) {
                *a += g;
            }
        }
        let jac_bar = if res.input_tangent_grad.is_empty() {
            &[][..]
        } else {
            &res.input_tangent_grad[..trace.enc_width * 3]
        };
        let g = trace.enc.pullback(&res.input_grad[..trace.enc_width], jac_bar);
        Ok(Vector3::new(g[0], g[1], g[2]))
    }

    // ---- deformation ----

    pub fn deformation_raw(&self, x: &[f64; 3]) -> Vec<f64> {
        self.deformation.forward(x)
    }

    pub fn decode_deformation(&self, raw: &[f64]) -> DeformationOutput {
        let (e, p, w) = self.config.deformation_layout();
        DeformationOutput {
            expr: raw[e..p].to_vec(),
            pose: raw[p..w].to_vec(),
            weights: softmax(&raw[w..]),
        }
    }

    pub fn deformation_forward(&self, x: &[f64; 3]) -> DeformationOutput {
        self.decode_deformation(&self.deformation_raw(x))
    }

    /// Trace of the raw deformation head; with `spatial`, output tangents
    /// hold the spatial Jacobian (`outputs x 3`).
    pub fn deformation_trace(&self, x: &[f64; 3], spatial: bool) -> MlpTrace {
        if spatial {
            let eye = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
            self.deformation.forward_trace(x, &eye, 3)
        } else {
            self.deformation.forward_trace(x, &[], 0)
        }
    }

    /// Reverse pass for cotangents of the raw outputs and (optionally) of
    /// their spatial Jacobian. Returns the point cotangent.
    pub fn deformation_backward(
        &self,
        trace: &MlpTrace,
        out_bar: &[f64],
        jac_bar: &[f64],
        param_grad: Option<&mut [f64]>,
    ) -> Result<Vector3<f64>> {
        let res = self.deformation.backward(trace, out_bar, jac_bar, param_grad)?;
        Ok(Vector3::new(res.input_grad[0], res.input_grad[1], res.input_grad[2]))
    }

    // ---- texture ----

    pub fn texture_input(&self, x: &[f64; 3], normal: &[f64; 3], jaw: &[f64; 3], psi: &[f64]) -> Result<Vec<f64>> {
        let n = (normal[0] * normal[0] + normal[1] * normal[1] + normal[2] * normal[2]).sqrt();
        if !((n - 1.0).abs() <= 1e-6) {
            return Err(Error::invalid(format!("normal: expected unit length, got {n}")));
        }
        if psi.len() != self.config.n_expr {
            return Err(Error::invalid(format!(
                "psi: expected {} values, got {}",
                self.config.n_expr,
                psi.len()
            )));
        }
        let mut v = Vec::with_capacity(self.config.texture_input_width());
        v.extend_from_slice(x);
        v.extend_from_slice(normal);
        v.extend_from_slice(jaw);
        v.extend_from_slice(psi);
        Ok(v)
    }

    pub fn texture_forward(&self, x: &[f64; 3], normal: &[f64; 3], jaw: &[f64; 3], psi: &[f64]) -> Result<[f64; 3]> {
        let out = self.texture.forward(&self.texture_input(x, normal, jaw, psi)?);
        Ok([out[0], out[1], out[2]])
    }

    pub fn texture_trace(&self, x: &[f64; 3], normal: &[f64; 3], jaw: &[f64; 3], psi: &[f64]) -> Result<MlpTrace> {
        Ok(self.texture.forward_trace(&self.texture_input(x, normal, jaw, psi)?, &[], 0))
    }

    /// Returns the cotangents of the canonical point and of the normal.
    pub fn texture_backward(
        &self,
        trace: &MlpTrace,
        rgb_bar: &[f64; 3],
        param_grad: Option<&mut [f64]>,
    ) -> Result<(Vector3<f64>, Vector3<f64>)> {
        let res = self.texture.backward(trace, rgb_bar, &[], param_grad)?;
        let g = &res.input_grad;
        Ok((Vector3::new(g[0], g[1], g[2]), Vector3::new(g[3], g[4], g[5])))
    }

    // ---- persistence ----

    pub fn write_arrays(&self, c: &mut Container, prefix: &str) -> Result<()> {
        for (name, b) in [
            ("geometry", Block::Geometry),
            ("deformation", Block::Deformation),
            ("texture", Block::Texture),
        ] {
            c.push_f64(&format!("{prefix}{name}"), vec![self.block(b).len()], self.block(b).to_vec())?;
        }
        c.push_f64(
            &format!("{prefix}latents"),
            vec![self.n_frames(), self.config.latent_dim],
            self.latents.clone(),
        )
    }

    pub fn read_arrays(config: FieldConfig, c: &Container, prefix: &str) -> Result<Self> {
        let (shape, latents) = c.f64s(&format!("{prefix}latents"))?;
        let n_frames = shape.first().copied().unwrap_or(0);
        let mut nets = Self::new(config, n_frames)?;
        for (name, b) in [
            ("geometry", Block::Geometry),
            ("deformation", Block::Deformation),
            ("texture", Block::Texture),
            ("latents", Block::Latents),
        ] {
            let data = if name == "latents" {
                latents
            } else {
                c.f64s(&format!("{prefix}{name}"))?.1
            };
            let dst = nets.block_mut(b);
            if dst.len() != data.len() {
                return Err(Error::Format(format!(
                    "{name}: expected {} parameters, found {}",
                    dst.len(),
                    data.len()
                )));
            }
            dst.copy_from_slice(data);
        }
        Ok(nets)
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new("field_networks", serde_json::json!({ "config": self.config }));
        self.write_arrays(&mut c, "")?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != "field_networks" {
            return Err(Error::Format(format!("expected field_networks, got '{}'", c.kind)));
        }
        let config: FieldConfig = serde_json::from_value(c.meta["config"].clone())?;
        Self::read_arrays(config, c, "")
    }
}

/// Sphere-like initialization: the raw output starts close to
/// `radius - |x|`, positive inside. Encoded features and the latent start
/// with zero weight so only the raw point drives the first layer.
fn geometric_init(mlp: &mut Mlp, c: &FieldConfig, rng: &mut ChaCha8Rng) {
    let n = mlp.num_layers();
    let raw_start = 6 * c.pe_freqs;
    for l in 0..n {
        let shape = mlp.shape(l);
        mlp.bias_mut(l).fill(0.0);
        if l + 1 == n {
            let mean = -(std::f64::consts::PI / shape.inputs as f64).sqrt();
            let dist = Normal::new(mean, 1e-4).unwrap();
            for w in mlp.weight_mut(l) {
                *w = dist.sample(rng);
            }
            mlp.bias_mut(l)[0] = c.init_radius;
        } else {
            let dist = Normal::new(0.0, std::f64::consts::SQRT_2 / (shape.outputs as f64).sqrt()).unwrap();
            let w = mlp.weight_mut(l);
            for i in 0..shape.outputs {
                for j in 0..shape.inputs {
                    let keep = l > 0 || (raw_start..raw_start + 3).contains(&j);
                    w[i * shape.inputs + j] = if keep { dist.sample(rng) } else { 0.0 };
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_config(seed: u64) -> FieldConfig {
        FieldConfig {
            n_expr: 4,
            n_joints: 3,
            latent_dim: 2,
            pe_freqs: 2,
            geometry_depth: 2,
            geometry_width: 12,
            deformation_depth: 2,
            deformation_width: 10,
            texture_depth: 2,
            texture_width: 10,
            geometry_beta: 100.0,
            hidden_beta: 100.0,
            init_radius: 0.5,
            seed,
        }
    }

    /// Small networks with every parameter perturbed so no head is trivially
    /// zero.
    fn perturbed(seed: u64) -> FieldNetworks {
        let mut nets = FieldNetworks::new(small_config(seed), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for b in BLOCKS {
            for v in nets.block_mut(b) {
                *v += rng.random_range(-0.2..0.2);
            }
        }
        nets
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn declared_widths() {
        let c = FieldConfig::default();
        assert_eq!(c.geometry_input_width(), 3 * 12 + 3 + 32);
        assert_eq!(c.deformation_output_width(), 50 * 3 + 4 * 27 + 5);
        assert_eq!(c.texture_input_width(), 59);
        let nets = FieldNetworks::new(c, 2).unwrap();
        assert_eq!(nets.geometry.input_dim(), 71);
        assert_eq!(nets.deformation.output_dim(), 263);
        assert_eq!(nets.texture.input_dim(), 59);
        assert_eq!(nets.latents.len(), 64);
    }

    #[test]
    fn geometric_init_gives_sphere_sign_structure() {
        let nets = FieldNetworks::new(FieldConfig::default(), 1).unwrap();
        let z = vec![0.0; 32];
        let (occ0, _) = nets.geometry_forward(&[0.0; 3], &z).unwrap();
        assert!(occ0 > 0.5, "occupancy at origin {occ0}");
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let d = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
                .normalize();
            let p = d * 1.0;
            let (occ, _) = nets.geometry_forward(&[p.x, p.y, p.z], &z).unwrap();
            assert!(occ < 0.5, "occupancy at |x| = 2r: {occ}");
            let q = d * 0.25;
            assert!(nets.geometry_forward(&[q.x, q.y, q.z], &z).unwrap().0 > 0.5);
        }
        assert_eq!(logistic(0.0), 0.5);
    }

    #[test]
    fn fresh_deformation_is_neutral() {
        let nets = FieldNetworks::new(FieldConfig::default(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let x = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let d = nets.deformation_forward(&x);
            assert!(d.expr.iter().chain(&d.pose).all(|v| *v == 0.0));
            assert!(d.weights.iter().all(|w| (w - 0.2).abs() < 1e-15));
        }
    }

    #[test]
    fn skinning_weights_are_a_simplex() {
        let nets = perturbed(3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let x = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let w = nets.deformation_forward(&x).weights;
            assert!(w.iter().all(|v| *v > 0.0));
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn texture_output_range_and_purity() {
        let nets = perturbed(4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let x = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let n = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 1.0).normalize();
            let psi: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let a = nets.texture_forward(&x, &[n.x, n.y, n.z], &[0.1, 0.0, 0.0], &psi).unwrap();
            let b = nets.texture_forward(&x, &[n.x, n.y, n.z], &[0.1, 0.0, 0.0], &psi).unwrap();
            assert_eq!(a, b);
            assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert!(nets.texture_forward(&[0.0; 3], &[0.0; 3], &[0.0; 3], &[0.0; 4]).is_err());
    }

    #[test]
    fn geometry_spatial_gradient_matches_finite_differences() {
        let nets = perturbed(5);
        let latent = [0.3, -0.2];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = 1e-4;
        for _ in 0..100 {
            let x = [rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8)];
            let (raw, g) = nets.geometry_gradient(&x, &latent);
            let occ = logistic(raw);
            let tr = nets.geometry_trace(&x, &latent, true);
            assert!((tr.grad - g).norm() < 1e-9 * (1.0 + g.norm()));
            for c in 0..3 {
                let mut xp = x;
                let mut xm = x;
                xp[c] += h;
                xm[c] -= h;
                let fd = (nets.geometry_forward(&xp, &latent).unwrap().0 - nets.geometry_forward(&xm, &latent).unwrap().0)
                    / (2.0 * h);
                let an = occ * (1.0 - occ) * g[c];
                assert!(rel_err(fd, an) <= 1e-3 || (fd - an).abs() < 1e-6, "{fd} vs {an}");
            }
        }
    }

    #[test]
    fn non_finite_parameters_are_reported_as_divergence() {
        let mut nets = perturbed(6);
        nets.geometry.params[0] = f64::NAN;
        assert!(matches!(nets.check_finite(), Err(Error::Divergence(_))));
        assert!(matches!(
            nets.geometry_forward(&[0.1, 0.2, 0.3], &[0.0, 0.0]),
            Err(Error::Divergence(_))
        ));
    }

    /// Composite loss touching every head, including the spatial gradient of
    /// the geometry and the Jacobian of the deformation outputs.
    fn composite(nets: &FieldNetworks, x: &[f64; 3], frame: usize) -> f64 {
        let latent = nets.latent(frame).unwrap().to_vec();
        let g = nets.geometry_trace(x, &latent, true);
        let mut l = 0.7 * logistic(g.raw) + g.grad.dot(&Vector3::new(0.3, -0.5, 0.2)).powi(2);
        let d = nets.deformation_trace(x, true);
        let dec = nets.decode_deformation(&d.output);
        let lw = nets.config.deformation_layout().2;
        l += d.output[..lw].iter().enumerate().map(|(i, v)| v * ((i % 5) as f64 - 2.0) * 0.1).sum::<f64>();
        l += dec.weights.iter().enumerate().map(|(i, w)| w * w * (i as f64 + 1.0)).sum::<f64>();
        l += d.output_tangents.iter().enumerate().map(|(i, t)| 0.05 * t * ((i % 3) as f64 - 1.0)).sum::<f64>();
        let n = Vector3::new(0.2, -0.4, 0.9).normalize();
        let rgb = nets.texture_forward(x, &[n.x, n.y, n.z], &[0.15, 0.0, 0.02], &[0.5, -1.0, 0.0, 2.0]).unwrap();
        l += rgb[0] - 2.0 * rgb[1] + 0.5 * rgb[2];
        l
    }

    fn composite_grad(nets: &FieldNetworks, x: &[f64; 3], frame: usize) -> (FieldGrads, Vector3<f64>) {
        let mut grads = FieldGrads::zeros_like(nets);
        let latent = nets.latent(frame).unwrap().to_vec();
        let ld = nets.config.latent_dim;
        let g = nets.geometry_trace(x, &latent, true);
        let occ = logistic(g.raw);
        let a = Vector3::new(0.3, -0.5, 0.2);
        let gbar = a * (2.0 * g.grad.dot(&a));
        let mut xg = nets
            .geometry_backward(
                &g,
                0.7 * occ * (1.0 - occ),
                &gbar,
                Some(&mut grads.geometry),
                Some(&mut grads.latents[frame * ld..(frame + 1) * ld]),
            )
            .unwrap();
        let d = nets.deformation_trace(x, true);
        let dec = nets.decode_deformation(&d.output);
        let lw = nets.config.deformation_layout().2;
        let mut obar: Vec<f64> = (0..lw).map(|i| ((i % 5) as f64 - 2.0) * 0.1).collect();
        let wbar: Vec<f64> = dec.weights.iter().enumerate().map(|(i, w)| 2.0 * w * (i as f64 + 1.0)).collect();
        obar.extend(softmax_backward(&dec.weights, &wbar));
        let tbar: Vec<f64> = (0..d.output_tangents.len()).map(|i| 0.05 * ((i % 3) as f64 - 1.0)).collect();
        xg += nets.deformation_backward(&d, &obar, &tbar, Some(&mut grads.deformation)).unwrap();
        let n = Vector3::new(0.2, -0.4, 0.9).normalize();
        let t = nets.texture_trace(x, &[n.x, n.y, n.z], &[0.15, 0.0, 0.02], &[0.5, -1.0, 0.0, 2.0]).unwrap();
        let (tx, _) = nets.texture_backward(&t, &[1.0, -2.0, 0.5], Some(&mut grads.texture)).unwrap();
        xg += tx;
        (grads, xg)
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        for seed in 0..3u64 {
            let mut nets = perturbed(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 50);
            for v in nets.latents.iter_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
            let x = [rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6)];
            let frame = 1;
            let (grads, xg) = composite_grad(&nets, &x, frame);
            let h = 1e-4;
            let total = nets.num_params();
            let mut checked = 0;
            // 50 random parameters plus every block's first entry
            let mut picks: Vec<usize> = (0..50).map(|_| rng.random_range(0..total)).collect();
            picks.extend(BLOCKS.map(|b| nets.block_range(b).start));
            picks.push(nets.block_range(Block::Latents).start + frame * 2);
            for p in picks {
                let orig = nets.param(p);
                nets.set_param(p, orig + h);
                let lp = composite(&nets, &x, frame);
                nets.set_param(p, orig - h);
                let lm = composite(&nets, &x, frame);
                nets.set_param(p, orig);
                let fd = (lp - lm) / (2.0 * h);
                let an = grads.get(p);
                assert!(
                    rel_err(fd, an) <= 1e-3 || (fd - an).abs() <= 1e-6,
                    "seed {seed} param {p} ({:?}): fd {fd} vs {an}",
                    nets.locate(p)
                );
                checked += 1;
            }
            assert!(checked >= 50);
            for c in 0..3 {
                let mut xp = x;
                let mut xm = x;
                xp[c] += h;
                xm[c] -= h;
                let fd = (composite(&nets, &xp, frame) - composite(&nets, &xm, frame)) / (2.0 * h);
                assert!(rel_err(fd, xg[c]) <= 1e-3, "x[{c}]: {fd} vs {}", xg[c]);
            }
        }
    }

    #[test]
    fn texture_input_gradients_match_finite_differences() {
        let nets = perturbed(8);
        let x = [0.1, -0.3, 0.25];
        let n = Vector3::new(0.3, 0.1, 0.9).normalize();
        let jaw = [0.2, 0.0, 0.0];
        let psi = [1.0, 0.5, -0.5, 0.0];
        let w = [0.4, 1.0, -0.7];
        let f = |x: &[f64; 3], n: &Vector3<f64>| {
            // evaluated through the raw MLP so off-unit normals are allowed
            let mut inp = x.to_vec();
            inp.extend_from_slice(n.as_slice());
            inp.extend_from_slice(&jaw);
            inp.extend_from_slice(&psi);
            let o = nets.texture.forward(&inp);
            o[0] * w[0] + o[1] * w[1] + o[2] * w[2]
        };
        let t = nets.texture_trace(&x, &[n.x, n.y, n.z], &jaw, &psi).unwrap();
        let (gx, gn) = nets.texture_backward(&t, &w, None).unwrap();
        let h = 1e-4;
        for c in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[c] += h;
            xm[c] -= h;
            assert!(rel_err((f(&xp, &n) - f(&xm, &n)) / (2.0 * h), gx[c]) < 1e-3);
            let mut np = n;
            let mut nm = n;
            np[c] += h;
            nm[c] -= h;
            assert!(rel_err((f(&x, &np) - f(&x, &nm)) / (2.0 * h), gn[c]) < 1e-3);
        }
    }

    #[test]
    fn initialization_is_seeded() {
        let a = FieldNetworks::new(small_config(3), 2).unwrap();
        let b = FieldNetworks::new(small_config(3), 2).unwrap();
        let c = FieldNetworks::new(small_config(4), 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.geometry.params, c.geometry.params);
    }

    #[test]
    fn container_round_trip_is_exact() {
        let mut nets = perturbed(11);
        nets.latents[3] = 0.123456789;
        let bytes = nets.to_container().unwrap().to_bytes().unwrap();
        let back = FieldNetworks::from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(nets, back);
    }

    #[test]
    fn mean_latent_averages_rows() {
        let mut nets = FieldNetworks::new(small_config(0), 2).unwrap();
        nets.latents.copy_from_slice(&[1.0, 2.0, 3.0, 6.0]);
        assert_eq!(nets.mean_latent(), vec![2.0, 4.0]);
        assert_eq!(FieldNetworks::new(small_config(0), 0).unwrap().mean_latent(), vec![0.0, 0.0]);
    }
}

use nalgebra::{Matrix3, Vector3};

use super::march::{complement_basis, normal_from, surface_constraints, MaskPoint, SurfaceHit};
use super::scene::NeuralScene;
use crate::deform::WarpTrace;
use crate::error::Result;
use crate::nets::{logistic, FieldGrads, GeometryTrace, MlpTrace};

/// Linear systems with a larger condition number are excluded from the
/// gradient batch.
pub const MAX_CONDITION: f64 = 1e8;

pub fn condition_number(m: &Matrix3<f64>) -> f64 {
    let s = m.singular_values();
    let (hi, lo) = (s.max(), s.min());
    if lo > 0.0 {
        hi / lo
    } else {
        f64::INFINITY
    }
}

fn latent_slice<'g>(scene: &NeuralScene, latents: &'g mut [f64]) -> Option<&'g mut [f64]> {
    let l = scene.nets.config.latent_dim;
    scene.frame.map(move |i| &mut latents[i * l..(i + 1) * l])
}

/// Shaded surface hit with the intermediates needed to pull a color
/// cotangent back to every field parameter.
pub struct SurfacePixel {
    pub rgb: [f64; 3],
    pub normal: Vector3<f64>,
    x_c: Vector3<f64>,
    m: Vector3<f64>,
    sign: f64,
    jac: Matrix3<f64>,
    fx: Matrix3<f64>,
    basis: (Vector3<f64>, Vector3<f64>),
    geo: GeometryTrace,
    warp: WarpTrace,
    tex: MlpTrace,
}

impl SurfacePixel {
    /// `None` when the hit cannot be differentiated: singular warp
    /// Jacobian, vanishing geometry gradient, or an ill-conditioned
    /// constraint system.
    pub fn new(scene: &NeuralScene, origin: &Vector3<f64>, dir: &Vector3<f64>, hit: &SurfaceHit) -> Result<Option<Self>> {
        let x_c = hit.x_c;
        let p = [x_c.x, x_c.y, x_c.z];
        let geo = scene.nets.geometry_trace(&p, &scene.latent, true);
        let warp = scene.warp.trace(&x_c);
        let Some((normal, sign)) = normal_from(&geo.grad, &warp.jacobian, dir) else {
            return Ok(None);
        };
        let basis = complement_basis(dir);
        let (_, fx, _) = surface_constraints(scene, &x_c, origin, &basis);
        if condition_number(&fx) > MAX_CONDITION || condition_number(&warp.jacobian) > MAX_CONDITION {
            return Ok(None);
        }
        let tex = scene
            .nets
            .texture_trace(&p, &[normal.x, normal.y, normal.z], &scene.jaw, &scene.warp.ctx.psi)?;
        let m = -warp.jacobian.transpose().lu().solve(&geo.grad).expect("conditioned");
        Ok(Some(Self {
            rgb: [tex.output[0], tex.output[1], tex.output[2]],
            normal,
            x_c,
            m,
            sign,
            jac: warp.jacobian,
            fx,
            basis,
            geo,
            warp,
            tex,
        }))
    }

    pub fn x_c(&self) -> Vector3<f64> {
        self.x_c
    }

    /// Accumulate the gradient of `<rgb_bar, rgb>` into `grads`, with the
    /// dependence of the hit point on the parameters obtained by implicit
    /// differentiation of the surface constraints.
    pub fn backward(&self, scene: &NeuralScene, rgb_bar: &[f64; 3], grads: &mut FieldGrads) -> Result<()> {
        let nets = scene.nets;
        let (xb_tex, n_bar) = nets.texture_backward(&self.tex, rgb_bar, Some(&mut grads.texture))?;

        let len = self.m.norm();
        let mh = self.m / len;
        let m_bar = self.sign * (n_bar - mh * mh.dot(&n_bar)) / len;
        let a = self.jac.lu().solve(&m_bar).expect("conditioned");
        let g_bar = -a;
        let j_bar = -self.m * a.transpose();

        let zero = Vector3::zeros();
        let xb_geo = nets.geometry_backward(
            &self.geo,
            0.0,
            &g_bar,
            Some(&mut grads.geometry),
            latent_slice(scene, &mut grads.latents),
        )?;
        let xb_warp = scene.warp.backward(&self.warp, &zero, &j_bar, Some(&mut grads.deformation))?;

        let x_bar = xb_tex + xb_geo + xb_warp;
        let lam = -self.fx.transpose().lu().solve(&x_bar).expect("conditioned");
        nets.geometry_backward(&self.geo, lam[0], &zero, Some(&mut grads.geometry), latent_slice(scene, &mut grads.latents))?;
        let (u, v) = self.basis;
        scene
            .warp
            .backward(&self.warp, &(lam[1] * u + lam[2] * v), &Matrix3::zeros(), Some(&mut grads.deformation))?;
        Ok(())
    }
}

/// Occupancy at a mask anchor, differentiable through the correspondence
/// `w(x_c*) = x_d*`.
pub struct MaskPixel {
    pub raw: f64,
    pub occupancy: f64,
    jac: Matrix3<f64>,
    geo: GeometryTrace,
    warp: WarpTrace,
}

impl MaskPixel {
    pub fn new(scene: &NeuralScene, point: &MaskPoint) -> Option<Self> {
        let x = point.x_c;
        let geo = scene.nets.geometry_trace(&[x.x, x.y, x.z], &scene.latent, false);
        let warp = scene.warp.trace(&x);
        if condition_number(&warp.jacobian) > MAX_CONDITION {
            return None;
        }
        Some(Self {
            raw: geo.raw,
            occupancy: logistic(geo.raw),
            jac: warp.jacobian,
            geo,
            warp,
        })
    }

    /// Accumulate the gradient of `raw_bar * raw(x_c*)`.
    pub fn backward(&self, scene: &NeuralScene, raw_bar: f64, grads: &mut FieldGrads) -> Result<()> {
        let x_bar = scene.nets.geometry_backward(
            &self.geo,
            raw_bar,
            &Vector3::zeros(),
            Some(&mut grads.geometry),
            latent_slice(scene, &mut grads.latents),
        )?;
        let lam = -self.jac.transpose().lu().solve(&x_bar).expect("conditioned");
        scene
            .warp
            .backward(&self.warp, &lam, &Matrix3::zeros(), Some(&mut grads.deformation))?;
        Ok(())
    }
}

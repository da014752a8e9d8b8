use nalgebra::{Matrix3, Vector3};

use crate::deform::{Warp, WarpContext};
use crate::error::Result;
use crate::morphable::JAW_JOINT;
use crate::nets::{logistic, FieldNetworks};

/// Deformed-space occupancy sample with its canonical correspondence, if
/// one was found.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Query {
    pub occupancy: f64,
    pub x_c: Option<Vector3<f64>>,
}

/// What the ray marcher needs from a scene: a deformed occupancy query and
/// the canonical geometry/warp it is built from. The raw geometry value is
/// positive inside, and the surface is its zero level set.
pub trait Scene: Sync {
    fn query(&self, x_d: &Vector3<f64>) -> Query;
    fn geometry(&self, x_c: &Vector3<f64>) -> (f64, Vector3<f64>);
    fn warp(&self, x_c: &Vector3<f64>) -> (Vector3<f64>, Matrix3<f64>);
    fn color(&self, x_c: &Vector3<f64>, n_d: &Vector3<f64>) -> Result<[f64; 3]>;

    /// Newton refinement of `w(x) = x_d` from `x0`.
    fn solve_warp(&self, x0: &Vector3<f64>, x_d: &Vector3<f64>) -> Option<Vector3<f64>> {
        let mut x = *x0;
        for _ in 0..8 {
            let (w, j) = self.warp(&x);
            let g = w - x_d;
            if g.norm() < 1e-14 {
                break;
            }
            x -= j.lu().solve(&g)?;
        }
        let ok = x.iter().all(|v| v.is_finite()) && (self.warp(&x).0 - x_d).norm() < 1e-9;
        ok.then_some(x)
    }
}

/// Which latent code conditions the geometry.
#[derive(Debug, Clone, PartialEq)]
pub enum LatentChoice {
    /// Trained row of the latent table; receives gradients.
    Frame(usize),
    /// Mean of the trained latents, for novel parameters.
    Mean,
    Explicit(Vec<f64>),
}

/// The trained fields under one set of animation parameters.
pub struct NeuralScene<'a> {
    pub warp: Warp<'a>,
    pub nets: &'a FieldNetworks,
    pub latent: Vec<f64>,
    pub frame: Option<usize>,
    pub jaw: [f64; 3],
}

impl<'a> NeuralScene<'a> {
    pub fn new(ctx: &'a WarpContext, nets: &'a FieldNetworks, latent: LatentChoice) -> Result<Self> {
        let warp = Warp::new(ctx, nets)?;
        let (latent, frame) = match latent {
            LatentChoice::Frame(i) => (nets.latent(i)?.to_vec(), Some(i)),
            LatentChoice::Mean => (nets.mean_latent(), None),
            LatentChoice::Explicit(v) => {
                if v.len() != nets.config.latent_dim {
                    return Err(crate::Error::invalid(format!(
                        "latent: expected {} values, got {}",
                        nets.config.latent_dim,
                        v.len()
                    )));
                }
                (v, None)
            }
        };
        let j = 3 * JAW_JOINT;
        let jaw = if ctx.theta.len() >= j + 3 {
            [ctx.theta[j], ctx.theta[j + 1], ctx.theta[j + 2]]
        } else {
            [0.0; 3]
        };
        Ok(Self {
            warp,
            nets,
            latent,
            frame,
            jaw,
        })
    }

    pub fn ctx(&self) -> &WarpContext {
        self.warp.ctx
    }
}

impl Scene for NeuralScene<'_> {
    fn query(&self, x_d: &Vector3<f64>) -> Query {
        let r = self.warp.correspondence_search(x_d, &self.latent);
        Query {
            occupancy: r.occupancy(),
            x_c: r.selected_candidate().map(|c| c.x_c),
        }
    }

    fn geometry(&self, x_c: &Vector3<f64>) -> (f64, Vector3<f64>) {
        self.nets.geometry_gradient(&[x_c.x, x_c.y, x_c.z], &self.latent)
    }

    fn warp(&self, x_c: &Vector3<f64>) -> (Vector3<f64>, Matrix3<f64>) {
        self.warp.eval_with_jacobian(x_c)
    }

    fn color(&self, x_c: &Vector3<f64>, n_d: &Vector3<f64>) -> Result<[f64; 3]> {
        self.nets
            .texture_forward(&[x_c.x, x_c.y, x_c.z], &[n_d.x, n_d.y, n_d.z], &self.jaw, &self.warp.ctx.psi)
    }
}

/// Sphere of occupancy `logistic(k (r - |x|))` under the identity warp.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalyticSphere {
    pub radius: f64,
    pub sharpness: f64,
    pub color: [f64; 3],
}

impl AnalyticSphere {
    pub fn new(radius: f64) -> Self {
        Self {
            radius,
            sharpness: 20.0,
            color: [0.8, 0.6, 0.5],
        }
    }
}

impl Scene for AnalyticSphere {
    fn query(&self, x_d: &Vector3<f64>) -> Query {
        Query {
            occupancy: logistic(self.geometry(x_d).0),
            x_c: Some(*x_d),
        }
    }

    fn geometry(&self, x_c: &Vector3<f64>) -> (f64, Vector3<f64>) {
        let n = x_c.norm();
        let g = if n > 0.0 { -self.sharpness * x_c / n } else { Vector3::zeros() };
        (self.sharpness * (self.radius - n), g)
    }

    fn warp(&self, x_c: &Vector3<f64>) -> (Vector3<f64>, Matrix3<f64>) {
        (*x_c, Matrix3::identity())
    }

    fn color(&self, _x_c: &Vector3<f64>, _n_d: &Vector3<f64>) -> Result<[f64; 3]> {
        Ok(self.color)
    }
}

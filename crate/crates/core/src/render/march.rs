use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scene::Scene;
use crate::nets::logistic;

/// Which sample of a ray without a surface crossing anchors the mask loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskPointRule {
    MinOcc,
    #[default]
    MaxOcc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MarchConfig {
    pub n_samples: usize,
    pub n_secant: usize,
    pub newton_iters: usize,
    pub mask_point_rule: MaskPointRule,
    /// Restrict sampling to a sphere of this radius around the origin.
    pub bound_radius: Option<f64>,
    pub seed: u64,
}

impl Default for MarchConfig {
    fn default() -> Self {
        Self {
            n_samples: 64,
            n_secant: 8,
            newton_iters: 8,
            mask_point_rule: MaskPointRule::MaxOcc,
            bound_radius: None,
            seed: 0,
        }
    }
}

/// Sample of a ray that anchors the mask loss: deformed point `x_d` on the
/// ray and its polished canonical correspondence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskPoint {
    pub t: f64,
    pub x_d: Vector3<f64>,
    pub x_c: Vector3<f64>,
    pub occupancy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceHit {
    pub hit: bool,
    pub t: f64,
    pub x_c: Vector3<f64>,
    pub x_d: Vector3<f64>,
    pub mask_point: Option<MaskPoint>,
    /// A crossing was bracketed but the surface constraints could not be
    /// solved to tolerance.
    pub polish_failed: bool,
}

impl SurfaceHit {
    fn miss() -> Self {
        Self {
            hit: false,
            t: f64::INFINITY,
            x_c: Vector3::zeros(),
            x_d: Vector3::zeros(),
            mask_point: None,
            polish_failed: false,
        }
    }
}

/// Orthonormal basis `(u, v)` of the plane orthogonal to `d` (unit),
/// built against the axis where `d` is smallest.
pub fn complement_basis(d: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let a = d.abs();
    let axis = if a.x <= a.y && a.x <= a.z {
        Vector3::x()
    } else if a.y <= a.z {
        Vector3::y()
    } else {
        Vector3::z()
    };
    let u = (axis - axis.dot(d) * d).normalize();
    (u, d.cross(&u))
}

/// Residual of the surface constraints `[raw, <u, w - o>, <v, w - o>]` and
/// their Jacobian with respect to the canonical point.
pub fn surface_constraints(
    scene: &dyn Scene,
    x_c: &Vector3<f64>,
    origin: &Vector3<f64>,
    basis: &(Vector3<f64>, Vector3<f64>),
) -> (Vector3<f64>, Matrix3<f64>, Vector3<f64>) {
    let (raw, g) = scene.geometry(x_c);
    let (w, j) = scene.warp(x_c);
    let (u, v) = basis;
    let f = Vector3::new(raw, u.dot(&(w - origin)), v.dot(&(w - origin)));
    let ju = j.transpose() * u;
    let jv = j.transpose() * v;
    let fx = Matrix3::from_rows(&[g.transpose(), ju.transpose(), jv.transpose()]);
    (f, fx, w)
}

/// Near/far interval of the ray inside the optional bounding sphere.
fn sample_interval(o: &Vector3<f64>, d: &Vector3<f64>, near: f64, far: f64, bound: Option<f64>) -> Option<(f64, f64)> {
    let Some(r) = bound else {
        return Some((near, far));
    };
    let b = o.dot(d);
    let c = o.norm_squared() - r * r;
    let disc = b * b - c;
    if disc <= 0.0 {
        return None;
    }
    let s = disc.sqrt();
    let (t0, t1) = ((-b - s).max(near), (-b + s).min(far));
    (t0 < t1).then_some((t0, t1))
}

fn ray_seed(seed: u64, ray_id: u64) -> u64 {
    seed ^ ray_id.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Non-rigid ray march: stratified samples of the deformed occupancy, the
/// first below-to-above crossing of 0.5 refined by the secant method and
/// then by Newton's method on the surface constraints. With
/// `want_mask_point`, every sample is visited and the mask anchor chosen by
/// `cfg.mask_point_rule` is recorded even for hits; otherwise it is only
/// recorded for misses.
#[allow(clippy::too_many_arguments)]
pub fn march_ray(
    scene: &dyn Scene,
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    near: f64,
    far: f64,
    cfg: &MarchConfig,
    ray_id: u64,
    want_mask_point: bool,
) -> SurfaceHit {
    let mut out = SurfaceHit::miss();
    let Some((t0, t1)) = sample_interval(origin, dir, near, far, cfg.bound_radius) else {
        return out;
    };
    let n = cfg.n_samples.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(ray_seed(cfg.seed, ray_id));
    let step = (t1 - t0) / n as f64;
    let basis = complement_basis(dir);

    let mut prev: Option<(f64, f64)> = None;
    let mut anchor: Option<(f64, f64, Vector3<f64>)> = None;
    let mut found = false;
    for i in 0..n {
        let t = t0 + (i as f64 + rng.random::<f64>()) * step;
        let x_d = origin + t * dir;
        let q = scene.query(&x_d);
        if let Some(xc) = q.x_c {
            let better = match (anchor, cfg.mask_point_rule) {
                (None, _) => true,
                (Some((_, a, _)), MaskPointRule::MaxOcc) => q.occupancy > a,
                (Some((_, a, _)), MaskPointRule::MinOcc) => q.occupancy < a,
            };
            if better {
                anchor = Some((t, q.occupancy, xc));
            }
        }
        if !found {
            if let Some((tp, op)) = prev {
                if op < 0.5 && q.occupancy >= 0.5 {
                    found = true;
                    let bracket = ((tp, op), (t, q.occupancy, q.x_c));
                    match refine(scene, origin, dir, &basis, bracket, cfg) {
                        Some((t_hit, x_c, x_d_hit)) => {
                            out.hit = true;
                            out.t = t_hit;
                            out.x_c = x_c;
                            out.x_d = x_d_hit;
                        }
                        None => out.polish_failed = true,
                    }
                    if out.hit && !want_mask_point {
                        return out;
                    }
                }
            }
        }
        prev = Some((t, q.occupancy));
    }
    if let Some((t, _, xc)) = anchor {
        let x_d = origin + t * dir;
        if let Some(x_c) = scene.solve_warp(&xc, &x_d) {
            out.mask_point = Some(MaskPoint {
                t,
                x_d,
                x_c,
                occupancy: logistic(scene.geometry(&x_c).0),
            });
        }
    }
    out
}

type Bracket = ((f64, f64), (f64, f64, Option<Vector3<f64>>));

fn refine(
    scene: &dyn Scene,
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    basis: &(Vector3<f64>, Vector3<f64>),
    bracket: Bracket,
    cfg: &MarchConfig,
) -> Option<(f64, Vector3<f64>, Vector3<f64>)> {
    let ((mut ta, mut oa), (mut tb, mut ob, xb)) = bracket;
    let width = tb - ta;
    let mut best = xb.map(|x| ((ob - 0.5).abs(), x));
    for _ in 0..cfg.n_secant {
        if (ob - oa).abs() < 1e-300 {
            break;
        }
        let tm = ta + (tb - ta) * (0.5 - oa) / (ob - oa);
        let q = scene.query(&(origin + tm * dir));
        if let Some(x) = q.x_c {
            let e = (q.occupancy - 0.5).abs();
            if best.is_none_or(|(b, _)| e < b) {
                best = Some((e, x));
            }
        }
        if q.occupancy < 0.5 {
            ta = tm;
            oa = q.occupancy;
        } else {
            tb = tm;
            ob = q.occupancy;
        }
    }
    let (_, start) = best?;
    let mut x = start;
    for _ in 0..cfg.newton_iters {
        let (f, fx, _) = surface_constraints(scene, &x, origin, basis);
        if f.norm() < 1e-13 {
            break;
        }
        x -= fx.lu().solve(&f)?;
        if !x.iter().all(|v| v.is_finite()) {
            return None;
        }
    }
    let (raw, _) = scene.geometry(&x);
    let (w, _) = scene.warp(&x);
    let t = (w - origin).dot(dir);
    let cross = (w - origin).cross(dir).norm();
    let ok = (logistic(raw) - 0.5).abs() < 1e-4
        && cross < 1e-5
        && (x - start).norm() < 0.1
        && t > ta - width
        && t < tb + width;
    ok.then_some((t, x, w))
}

/// Camera-facing unit normal of the deformed surface at a hit,
/// `-normalize(J^-T grad raw)`. `None` when the warp Jacobian is singular
/// or the gradient vanishes.
pub fn deformed_normal(scene: &dyn Scene, x_c: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Vector3<f64>> {
    let (_, g) = scene.geometry(x_c);
    let (_, j) = scene.warp(x_c);
    normal_from(&g, &j, dir).map(|(n, _)| n)
}

/// Normal plus the sign applied to face the camera.
pub(crate) fn normal_from(g: &Vector3<f64>, j: &Matrix3<f64>, dir: &Vector3<f64>) -> Option<(Vector3<f64>, f64)> {
    let m = -j.transpose().lu().solve(g)?;
    let len = m.norm();
    if !(len > 1e-12) || !len.is_finite() {
        return None;
    }
    let n = m / len;
    let s = if n.dot(dir) > 0.0 { -1.0 } else { 1.0 };
    Some((n * s, s))
}

/// Texture query at a hit with the deformed normal; `None` normal falls
/// back to the reversed ray direction.
pub fn shade_pixel(scene: &dyn Scene, hit: &SurfaceHit, dir: &Vector3<f64>) -> crate::Result<([f64; 3], bool)> {
    let (n, ok) = match deformed_normal(scene, &hit.x_c, dir) {
        Some(n) => (n, true),
        None => (-dir, false),
    };
    Ok((scene.color(&hit.x_c, &n)?, ok))
}

//! Finite-difference checks of the analytic gradients used in training.

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::deform::WarpContext;
use crate::error::{Error, Result};
use crate::morphable::{canonical_pose, MorphableTemplate, NUM_EXPR};
use crate::nets::{Block, FieldConfig, FieldGrads, FieldNetworks};
use crate::render::{march_ray, Camera, LatentChoice, MarchConfig, MaskPixel, NeuralScene, Orbit, SurfacePixel};
use crate::train::{bce_from_raw, flame_point, l1_pixel, LossWeights};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    pub seed: u64,
    /// Random network and animation states.
    pub states: usize,
    pub rays_per_state: usize,
    pub params_per_ray: usize,
    /// Central-difference step.
    pub step: f64,
    pub rel_tol: f64,
    /// Absolute differences below this always pass.
    pub abs_floor: f64,
    pub fields: FieldConfig,
    pub march: MarchConfig,
    /// Points per state in the FLAME-loss suite.
    pub flame_points: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            states: 5,
            rays_per_state: 20,
            params_per_ray: 30,
            step: 1e-4,
            rel_tol: 2e-3,
            abs_floor: 1e-6,
            fields: FieldConfig {
                pe_freqs: 4,
                geometry_depth: 3,
                geometry_width: 32,
                deformation_depth: 2,
                deformation_width: 24,
                texture_depth: 2,
                texture_width: 24,
                ..FieldConfig::default()
            },
            march: MarchConfig {
                n_samples: 48,
                bound_radius: Some(1.0),
                ..MarchConfig::default()
            },
            flame_points: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    /// Color loss through the implicit surface point.
    Surface,
    /// Occupancy loss through the implicit canonical anchor of a miss.
    Mask,
    /// FLAME pseudo-ground-truth loss on the deformation network.
    Flame,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub suite: Suite,
    pub state: usize,
    pub item: usize,
    pub param: usize,
    pub block: String,
    pub analytic: f64,
    pub numeric: f64,
    pub pass: bool,
}

impl Comparison {
    /// Relative error, or 0 when the difference is under the floor.
    pub fn rel_error(&self, floor: f64) -> f64 {
        let d = (self.analytic - self.numeric).abs();
        if d <= floor {
            0.0
        } else if d.is_nan() {
            f64::INFINITY
        } else {
            d / self.analytic.abs().max(self.numeric.abs())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub suite: Suite,
    pub items: usize,
    pub checked: usize,
    pub failed: usize,
    pub worst_rel_error: f64,
    /// Comparisons whose analytic value is at least ten times the floor.
    pub nontrivial: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub config: GradcheckConfig,
    pub suites: Vec<SuiteSummary>,
    pub failures: Vec<Comparison>,
    pub all_pass: bool,
}

fn passes(a: f64, n: f64, cfg: &GradcheckConfig) -> bool {
    let d = (a - n).abs();
    d <= cfg.abs_floor || d <= cfg.rel_tol * a.abs().max(n.abs())
}

/// A seeded network state: initialized fields with perturbed weights and
/// latents, under a perturbed pose and expression.
pub struct State {
    pub nets: FieldNetworks,
    pub ctx: WarpContext,
    pub camera: Camera,
}

pub fn random_state(template: &MorphableTemplate, cfg: &GradcheckConfig, index: usize) -> Result<State> {
    let seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nets = FieldNetworks::new(FieldConfig { seed, ..cfg.fields.clone() }, 2)?;
    for v in nets.block_mut(Block::Geometry) {
        *v += rng.random_range(-0.005..0.005);
    }
    for v in nets.block_mut(Block::Deformation) {
        *v += rng.random_range(-0.02..0.02);
    }
    for v in nets.block_mut(Block::Texture) {
        *v += rng.random_range(-0.05..0.05);
    }
    for v in nets.block_mut(Block::Latents) {
        *v = rng.random_range(-0.1..0.1);
    }
    let mut theta = canonical_pose();
    for v in theta.iter_mut() {
        *v += rng.random_range(-0.1..0.1);
    }
    let psi: Vec<f64> = (0..NUM_EXPR).map(|_| rng.random_range(-0.5..0.5)).collect();
    let ctx = WarpContext::new(template, &theta, &psi)?;
    let orbit = Orbit {
        azimuth: rng.random_range(-0.5..0.5),
        elevation: rng.random_range(-0.2..0.2),
        distance: 2.2,
    };
    let camera = Camera::orbit(orbit, 48, 48, crate::render::DEFAULT_FOV_Y)?;
    Ok(State { nets, ctx, camera })
}

const LATENT_ROW: usize = 1;
/// Mask rays are kept only where the cross-entropy clamp is inactive, so
/// their gradients are not identically zero.
const MASK_RAW_LIMIT: f64 = 12.0;

#[derive(Debug, Clone)]
struct RayCase {
    suite: Suite,
    origin: Vector3<f64>,
    dir: Vector3<f64>,
    ray_id: u64,
    /// Color target for surface rays.
    target: [f64; 3],
    /// Occupancy label for mask rays.
    label: f64,
}

/// Per-ray loss; `None` when the ray no longer yields the same kind of
/// point.
fn ray_loss(nets: &FieldNetworks, ctx: &WarpContext, cam: &Camera, case: &RayCase, march: &MarchConfig, grads: Option<&mut FieldGrads>) -> Result<Option<f64>> {
    let scene = NeuralScene::new(ctx, nets, LatentChoice::Frame(LATENT_ROW))?;
    let hit = march_ray(&scene, &case.origin, &case.dir, cam.near, cam.far, march, case.ray_id, true);
    match case.suite {
        Suite::Surface => {
            if !hit.hit {
                return Ok(None);
            }
            let Some(px) = SurfacePixel::new(&scene, &case.origin, &case.dir, &hit)? else {
                return Ok(None);
            };
            let (l, g) = l1_pixel(&px.rgb, &case.target);
            if let Some(gr) = grads {
                px.backward(&scene, &g, gr)?;
            }
            Ok(Some(l))
        }
        Suite::Mask => {
            if hit.hit {
                return Ok(None);
            }
            let Some(px) = hit.mask_point.as_ref().and_then(|m| MaskPixel::new(&scene, m)) else {
                return Ok(None);
            };
            let (l, g) = bce_from_raw(px.raw, case.label);
            if let Some(gr) = grads {
                px.backward(&scene, g, gr)?;
            }
            Ok(Some(l))
        }
        Suite::Flame => Err(Error::invalid("flame suite has no rays")),
    }
}

fn pick_rays(state: &State, cfg: &GradcheckConfig, rng: &mut ChaCha8Rng) -> Result<Vec<RayCase>> {
    let cam = &state.camera;
    let mut pixels: Vec<usize> = (0..cam.num_pixels()).collect();
    pixels.shuffle(rng);
    let want_surface = cfg.rays_per_state.div_ceil(2);
    let want_mask = cfg.rays_per_state - want_surface;
    let (mut surf, mut mask) = (Vec::new(), Vec::new());
    let scene = NeuralScene::new(&state.ctx, &state.nets, LatentChoice::Frame(LATENT_ROW))?;
    for p in pixels {
        if surf.len() >= want_surface && mask.len() >= want_mask {
            break;
        }
        let (o, d) = cam.ray_through((p / cam.width) as f64 + 0.5, (p % cam.width) as f64 + 0.5);
        let ray_id = p as u64;
        let hit = march_ray(&scene, &o, &d, cam.near, cam.far, &cfg.march, ray_id, true);
        let mut case = RayCase {
            suite: Suite::Surface,
            origin: o,
            dir: d,
            ray_id,
            target: [0.0; 3],
            label: 0.0,
        };
        if hit.hit {
            if surf.len() < want_surface {
                if let Some(px) = SurfacePixel::new(&scene, &o, &d, &hit)? {
                    // keep targets well away from the prediction so the L1 kink is never crossed
                    case.target = px.rgb.map(|c| c + if rng.random_bool(0.5) { 0.3 } else { -0.3 });
                    surf.push(case);
                }
            }
        } else if mask.len() < want_mask
            && hit
                .mask_point
                .as_ref()
                .and_then(|m| MaskPixel::new(&scene, m))
                .is_some_and(|px| px.raw.abs() < MASK_RAW_LIMIT)
        {
            case.suite = Suite::Mask;
            case.label = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
            mask.push(case);
        }
    }
    surf.extend(mask);
    Ok(surf)
}

fn sample_params(nets: &FieldNetworks, blocks: &[Block], n: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, Block)> {
    (0..n)
        .map(|k| {
            let b = blocks[k % blocks.len()];
            (rng.random_range(nets.block_range(b)), b)
        })
        .collect()
}

fn check_ray(state: &State, case: &RayCase, cfg: &GradcheckConfig, s: usize, item: usize, seed: u64) -> Result<Vec<Comparison>> {
    let mut nets = state.nets.clone();
    let mut g = FieldGrads::zeros_like(&nets);
    let march = &cfg.march;
    if ray_loss(&nets, &state.ctx, &state.camera, case, march, Some(&mut g))?.is_none() {
        return Err(Error::InvalidState("gradcheck ray lost its surface point".into()));
    }
    let blocks: &[Block] = match case.suite {
        Suite::Surface => &[Block::Geometry, Block::Deformation, Block::Texture],
        _ => &[Block::Geometry, Block::Deformation],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (i, b) in sample_params(&nets, blocks, cfg.params_per_ray, &mut rng) {
        let p0 = nets.param(i);
        nets.set_param(i, p0 + cfg.step);
        let fp = ray_loss(&nets, &state.ctx, &state.camera, case, march, None)?;
        nets.set_param(i, p0 - cfg.step);
        let fm = ray_loss(&nets, &state.ctx, &state.camera, case, march, None)?;
        nets.set_param(i, p0);
        let numeric = match (fp, fm) {
            (Some(a), Some(b)) => (a - b) / (2.0 * cfg.step),
            _ => f64::NAN,
        };
        let analytic = g.get(i);
        out.push(Comparison {
            suite: case.suite,
            state: s,
            item,
            param: i,
            block: format!("{b:?}").to_lowercase(),
            analytic,
            numeric,
            pass: passes(analytic, numeric, cfg),
        });
    }
    Ok(out)
}

fn check_flame(state: &State, template: &MorphableTemplate, cfg: &GradcheckConfig, s: usize, seed: u64) -> Result<Vec<Comparison>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nets = state.nets.clone();
    let w = LossWeights::default();
    let mut out = Vec::new();
    for item in 0..cfg.flame_points {
        let x = [rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4)];
        let attrs = template.nearest_vertex_attributes(&Vector3::from(x))?;
        let loss = |n: &FieldNetworks| -> Result<f64> {
            let raw = n.deformation_raw(&x);
            Ok(flame_point(&n.decode_deformation(&raw), &attrs, &w, raw.len())?.0)
        };
        let trace = nets.deformation_trace(&x, false);
        let raw = nets.decode_deformation(&trace.output);
        let (_, gr) = flame_point(&raw, &attrs, &w, trace.output.len())?;
        let mut pg = vec![0.0; nets.deformation.num_params()];
        nets.deformation_backward(&trace, &gr, &[], Some(&mut pg))?;
        let range = nets.block_range(Block::Deformation);
        for _ in 0..cfg.params_per_ray {
            let k = rng.random_range(0..pg.len());
            let i = range.start + k;
            let p0 = nets.param(i);
            nets.set_param(i, p0 + cfg.step);
            let fp = loss(&nets)?;
            nets.set_param(i, p0 - cfg.step);
            let fm = loss(&nets)?;
            nets.set_param(i, p0);
            let numeric = (fp - fm) / (2.0 * cfg.step);
            out.push(Comparison {
                suite: Suite::Flame,
                state: s,
                item,
                param: i,
                block: "deformation".into(),
                analytic: pg[k],
                numeric,
                pass: passes(pg[k], numeric, cfg),
            });
        }
    }
    Ok(out)
}

/// Run the surface, mask and FLAME suites over `cfg.states` random states.
pub fn run_gradcheck(template: &MorphableTemplate, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut all = Vec::new();
    let mut items = [0usize; 3];
    for s in 0..cfg.states {
        let state = random_state(template, cfg, s)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (0xA5A5 + s as u64));
        let cases = pick_rays(&state, cfg, &mut rng)?;
        if cases.len() < cfg.rays_per_state {
            log::warn!("state {s}: only {} usable rays", cases.len());
        }
        for c in &cases {
            items[(c.suite == Suite::Mask) as usize] += 1;
        }
        let seeds: Vec<u64> = (0..cases.len()).map(|_| rng.random()).collect();
        let per_ray: Vec<Vec<Comparison>> = cases
            .par_iter()
            .enumerate()
            .map(|(k, c)| check_ray(&state, c, cfg, s, k, seeds[k]))
            .collect::<Result<_>>()?;
        all.extend(per_ray.into_iter().flatten());
        all.extend(check_flame(&state, template, cfg, s, rng.random())?);
        items[2] += cfg.flame_points;
    }
    let suites = [Suite::Surface, Suite::Mask, Suite::Flame]
        .iter()
        .zip(items)
        .map(|(&suite, n)| {
            let rows: Vec<&Comparison> = all.iter().filter(|c| c.suite == suite).collect();
            SuiteSummary {
                suite,
                items: n,
                checked: rows.len(),
                failed: rows.iter().filter(|c| !c.pass).count(),
                worst_rel_error: rows.iter().map(|c| c.rel_error(cfg.abs_floor)).fold(0.0, f64::max),
                nontrivial: rows.iter().filter(|c| c.analytic.abs() >= 10.0 * cfg.abs_floor).count(),
            }
        })
        .collect::<Vec<_>>();
    let failures: Vec<Comparison> = all.into_iter().filter(|c| !c.pass).collect();
    Ok(GradcheckReport {
        config: cfg.clone(),
        all_pass: failures.is_empty() && suites.iter().all(|s| s.checked > 0 || s.items == 0),
        suites,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::morphable::{generate_toy_head, ToyHeadConfig};

    #[test]
    fn small_run_passes_and_covers_both_variants() {
        let tpl = generate_toy_head(&ToyHeadConfig::default()).unwrap();
        let cfg = GradcheckConfig {
            seed: 3,
            states: 1,
            rays_per_state: 4,
            params_per_ray: 6,
            flame_points: 1,
            ..GradcheckConfig::default()
        };
        let r = run_gradcheck(&tpl, &cfg).unwrap();
        assert!(r.all_pass, "{:#?}", r.failures);
        assert_eq!(r.suites[0].checked, 12);
        assert_eq!(r.suites[1].checked, 12);
        assert_eq!(r.suites[2].checked, 6);
    }

    #[test]
    fn relative_error_respects_floor() {
        let c = Comparison {
            suite: Suite::Mask,
            state: 0,
            item: 0,
            param: 0,
            block: "geometry".into(),
            analytic: 1.0,
            numeric: 1.001,
            pass: true,
        };
        assert!((c.rel_error(1e-6) - 0.001 / 1.001).abs() < 1e-12);
        assert_eq!(c.rel_error(0.01), 0.0);
        assert!(passes(1.0, 1.001, &GradcheckConfig::default()));
        assert!(!passes(1.0, 1.01, &GradcheckConfig::default()));
        assert!(!passes(1.0, f64::NAN, &GradcheckConfig::default()));
    }
}

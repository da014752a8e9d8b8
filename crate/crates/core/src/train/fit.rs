use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::losses::{bce_from_raw, flame_point, l1_pixel, LossComponents};
use crate::deform::WarpContext;
use crate::error::{Error, Result};
use crate::morphable::MorphableTemplate;
use crate::nets::{FieldGrads, FieldNetworks, BLOCKS};
use crate::render::{march_ray, shade_pixel, LatentChoice, MarchConfig, MaskPixel, NeuralScene, SurfacePixel};
use crate::synth::{Dataset, FrameRecord};

/// Loss terms and ray bookkeeping of one batch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BatchStats {
    pub loss: LossComponents,
    pub rays: usize,
    /// Rays in the foreground hit set (rendered hit and labeled foreground).
    pub surface: usize,
    /// Rays contributing a mask term.
    pub mask: usize,
    /// Rays whose constraint system was too ill-conditioned to
    /// differentiate; they contribute to the loss value only.
    pub excluded: usize,
    /// Rays outside the foreground hit set without a usable anchor point.
    pub no_anchor: usize,
}

impl BatchStats {
    fn add(&mut self, o: &BatchStats) {
        self.loss.add(&o.loss);
        self.rays += o.rays;
        self.surface += o.surface;
        self.mask += o.mask;
        self.excluded += o.excluded;
        self.no_anchor += o.no_anchor;
    }
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `n` pixel indices: a `ratio` share drawn from the foreground mask, the
/// rest uniformly over the frame (both with replacement).
pub fn sample_pixels(frame: &FrameRecord, n: usize, ratio: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let total = frame.num_pixels();
    if total == 0 {
        return Vec::new();
    }
    let fg: Vec<usize> = (0..total).filter(|&i| frame.mask[i]).collect();
    let n_fg = if fg.is_empty() { 0 } else { (ratio * n as f64).round() as usize };
    let mut out: Vec<usize> = (0..n_fg).map(|_| fg[rng.random_range(0..fg.len())]).collect();
    out.extend((n_fg..n).map(|_| rng.random_range(0..total)));
    out
}

/// Loss of one ray, normalized by the batch size, with gradients added
/// into `grads` when given.
#[allow(clippy::too_many_arguments)]
fn ray_term(
    scene: &NeuralScene,
    template: &MorphableTemplate,
    frame: &FrameRecord,
    pixel: usize,
    inv_n: f64,
    cfg: &TrainConfig,
    march: &MarchConfig,
    mut grads: Option<&mut FieldGrads>,
) -> Result<BatchStats> {
    let mut st = BatchStats {
        rays: 1,
        ..BatchStats::default()
    };
    let cam = &frame.camera;
    let (o, d) = cam.ray_through((pixel / frame.width) as f64 + 0.5, (pixel % frame.width) as f64 + 0.5);
    let foreground = frame.mask[pixel];
    let ray_id = ((frame.frame_id as u64) << 32) | pixel as u64;
    let hit = march_ray(scene, &o, &d, cam.near, cam.far, march, ray_id, !foreground);
    let w = &cfg.weights;

    if hit.hit && foreground {
        st.surface = 1;
        let gt = frame.rgb_f64(pixel);
        match SurfacePixel::new(scene, &o, &d, &hit)? {
            Some(px) => {
                let (l, g) = l1_pixel(&px.rgb, &gt);
                st.loss.rgb = l * inv_n;
                if let Some(gr) = grads.as_deref_mut() {
                    px.backward(scene, &g.map(|v| v * inv_n), gr)?;
                }
            }
            None => {
                let (c, _) = shade_pixel(scene, &hit, &d)?;
                st.loss.rgb = l1_pixel(&c, &gt).0 * inv_n;
                st.excluded = 1;
            }
        }
        if w.lambda_fl > 0.0 {
            let nets = scene.nets;
            let x = [hit.x_c.x, hit.x_c.y, hit.x_c.z];
            let attrs = template.nearest_vertex_attributes(&hit.x_c)?;
            let trace = nets.deformation_trace(&x, false);
            let out = nets.decode_deformation(&trace.output);
            let (l, g) = flame_point(&out, &attrs, w, trace.output.len())?;
            st.loss.flame = l * inv_n;
            if let Some(gr) = grads.as_deref_mut() {
                let s = w.lambda_fl * inv_n;
                let g: Vec<f64> = g.iter().map(|v| v * s).collect();
                nets.deformation_backward(&trace, &g, &[], Some(&mut gr.deformation))?;
            }
        }
    } else if let Some(mp) = hit.mask_point {
        match MaskPixel::new(scene, &mp) {
            Some(px) => {
                st.mask = 1;
                let label = if foreground { 1.0 } else { 0.0 };
                let (l, g) = bce_from_raw(px.raw, label);
                st.loss.mask = l * inv_n;
                if let Some(gr) = grads.as_deref_mut() {
                    px.backward(scene, w.lambda_m * g * inv_n, gr)?;
                }
            }
            None => st.excluded = 1,
        }
    } else {
        st.no_anchor = 1;
    }
    Ok(st)
}

/// Loss (and optionally gradient) of a ray batch on one frame. `latent_row`
/// selects the frame latent. Rays are processed in fixed-size chunks whose
/// gradients are summed in chunk order.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss(
    nets: &FieldNetworks,
    template: &MorphableTemplate,
    frame: &FrameRecord,
    latent_row: usize,
    pixels: &[usize],
    cfg: &TrainConfig,
    march: &MarchConfig,
    grads: Option<&mut FieldGrads>,
) -> Result<BatchStats> {
    if pixels.is_empty() {
        return Ok(BatchStats::default());
    }
    let ctx = WarpContext::from_params(template, &frame.params)?.with_search(cfg.search.clone());
    let scene = NeuralScene::new(&ctx, nets, LatentChoice::Frame(latent_row))?;
    let inv_n = 1.0 / pixels.len() as f64;
    let want = grads.is_some();
    let parts: Vec<(BatchStats, Option<FieldGrads>)> = pixels
        .par_chunks(cfg.chunk_size)
        .map(|chunk| {
            let mut g = want.then(|| FieldGrads::zeros_like(nets));
            let mut st = BatchStats::default();
            for &p in chunk {
                st.add(&ray_term(&scene, template, frame, p, inv_n, cfg, march, g.as_mut())?);
            }
            Ok((st, g))
        })
        .collect::<Result<_>>()?;
    let mut total = BatchStats::default();
    let mut grads = grads;
    for (st, g) in parts {
        total.add(&st);
        if let (Some(acc), Some(g)) = (grads.as_deref_mut(), g) {
            acc.add_assign(&g);
        }
    }
    Ok(total)
}

/// Per-epoch record appended to `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean over the epoch's steps.
    pub loss: LossComponents,
    pub total: f64,
    pub steps: usize,
    pub skipped_steps: usize,
    pub excluded_rays: usize,
    pub no_anchor_rays: usize,
    pub seconds: f64,
}

/// Counts consecutive skipped steps; the second in a row is fatal.
#[derive(Debug, Clone, Copy, Default)]
pub struct DivergenceGuard {
    consecutive: usize,
}

impl DivergenceGuard {
    pub const LIMIT: usize = 2;

    /// Returns `true` once the run should abort.
    pub fn record(&mut self, applied: bool) -> bool {
        self.consecutive = if applied { 0 } else { self.consecutive + 1 };
        self.consecutive >= Self::LIMIT
    }
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

fn init_state(dataset: &Dataset, template: &MorphableTemplate, cfg: &TrainConfig) -> Result<(Checkpoint, usize)> {
    let n_frames = cfg.max_frames.map_or(dataset.len(), |m| m.min(dataset.len()));
    let nets = FieldNetworks::new(cfg.fields.clone(), n_frames)?;
    let adam = Adam::new(cfg.optimizer, nets.num_params());
    let ck = Checkpoint {
        config: cfg.clone(),
        nets,
        adam,
        epoch: 0,
        template_hash: template.content_hash()?,
    };
    Ok((ck, n_frames))
}

/// Train from scratch. Each epoch visits every frame once in a seeded
/// order and takes `steps_per_frame` Adam steps per visit. With `out_dir`,
/// writes `metrics.jsonl` and checkpoints every `checkpoint_every` epochs
/// and at the end. Two consecutive non-finite steps abort the run with the
/// last good state saved.
pub fn fit(
    dataset: &Dataset,
    template: &MorphableTemplate,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Checkpoint> {
    cfg.validate()?;
    dataset.frames.iter().try_for_each(|f| f.validate())?;
    if dataset.is_empty() {
        return Err(Error::invalid("training dataset has no frames"));
    }
    if let Some(d) = out_dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        let p = d.join(METRICS_FILE);
        std::fs::write(&p, b"").map_err(|e| Error::io(&p, e))?;
    }
    let (mut ck, n_frames) = init_state(dataset, template, cfg)?;
    let mut grads = FieldGrads::zeros_like(&ck.nets);
    let mut guard = DivergenceGuard::default();
    let mut step: u64 = 0;

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let lr = cfg.optimizer.lr_at(epoch);
        let mut order: Vec<usize> = (0..n_frames).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64)));
        let mut sum = LossComponents::default();
        let (mut steps, mut skipped, mut excluded, mut no_anchor) = (0, 0, 0, 0);

        for &fi in &order {
            let frame = &dataset.frames[fi];
            for _ in 0..cfg.steps_per_frame {
                step += 1;
                let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed ^ 0x5eed, step));
                let pixels = sample_pixels(frame, cfg.rays_per_step, cfg.foreground_ratio, &mut rng);
                let march = MarchConfig {
                    seed: mix(cfg.march.seed, step),
                    ..cfg.march.clone()
                };
                grads.zero();
                let st = batch_loss(&ck.nets, template, frame, fi, &pixels, cfg, &march, Some(&mut grads))?;
                excluded += st.excluded;
                no_anchor += st.no_anchor;
                let applied = st.loss.is_finite() && {
                    let g = &grads;
                    let mut params: Vec<&mut [f64]> = Vec::new();
                    let nets = &mut ck.nets;
                    let (geo, rest) = (&mut nets.geometry.params, &mut nets.deformation.params);
                    params.push(geo);
                    params.push(rest);
                    params.push(&mut nets.texture.params);
                    params.push(&mut nets.latents);
                    let gs: Vec<&[f64]> = BLOCKS.iter().map(|b| g.block(*b)).collect();
                    ck.adam.update(&mut params, &gs, lr)?
                };
                let abort = guard.record(applied);
                if applied {
                    sum.add(&st.loss);
                    steps += 1;
                } else {
                    skipped += 1;
                    log::warn!("epoch {epoch} step {step}: non-finite loss or gradient, step skipped");
                    if abort {
                        if let Some(d) = out_dir {
                            ck.save(&d.join(CHECKPOINT_FILE))?;
                        }
                        return Err(Error::Divergence(format!(
                            "two consecutive non-finite steps at epoch {epoch}, step {step}"
                        )));
                    }
                }
            }
        }
        ck.nets.check_finite()?;
        ck.epoch = epoch;
        let denom = steps.max(1) as f64;
        let loss = LossComponents {
            rgb: sum.rgb / denom,
            mask: sum.mask / denom,
            flame: sum.flame / denom,
        };
        let entry = EpochLog {
            epoch,
            lr,
            loss,
            total: cfg.weights.total(&loss),
            steps,
            skipped_steps: skipped,
            excluded_rays: excluded,
            no_anchor_rays: no_anchor,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&entry);
        if let Some(d) = out_dir {
            let p = d.join(METRICS_FILE);
            let mut f = std::fs::OpenOptions::new()
                .append(true)
                .open(&p)
                .map_err(|e| Error::io(&p, e))?;
            writeln!(f, "{}", serde_json::to_string(&entry)?).map_err(|e| Error::io(&p, e))?;
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                ck.save(&d.join(format!("checkpoint_{epoch:03}.bin")))?;
            }
        }
    }
    if let Some(d) = out_dir {
        ck.save(&d.join(CHECKPOINT_FILE))?;
    }
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::morphable::{generate_toy_head, ToyHeadConfig};
    use crate::nets::Block;
    use crate::synth::{generate_dataset, sample_schedule, GenerateOptions, ScheduleRanges};
    use std::sync::OnceLock;

    fn toy() -> &'static MorphableTemplate {
        static T: OnceLock<MorphableTemplate> = OnceLock::new();
        T.get_or_init(|| generate_toy_head(&ToyHeadConfig::default()).unwrap())
    }

    fn tiny_dataset(n: usize) -> Dataset {
        let dir = tempfile::tempdir().unwrap();
        let opts = GenerateOptions {
            width: 16,
            height: 16,
            ..GenerateOptions::default()
        };
        generate_dataset(toy(), &sample_schedule(&ScheduleRanges::training(), n, 5), dir.path(), &opts).unwrap()
    }

    fn tiny_config() -> TrainConfig {
        let mut c = TrainConfig::compact();
        c.rays_per_step = 24;
        c.chunk_size = 5;
        c.epochs = 2;
        c.checkpoint_every = 1;
        c.march.n_samples = 16;
        c.fields.geometry_width = 24;
        c.fields.geometry_depth = 3;
        c.fields.deformation_width = 16;
        c.fields.texture_width = 16;
        c
    }

    #[test]
    fn foreground_oversampling() {
        let ds = tiny_dataset(1);
        let f = &ds.frames[0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let px = sample_pixels(f, 400, 0.75, &mut rng);
        assert_eq!(px.len(), 400);
        assert!(px[..300].iter().all(|&p| f.mask[p]));
    }

    #[test]
    fn flame_gradient_matches_finite_differences_at_fixed_point() {
        let cfg = tiny_config();
        let mut nets = FieldNetworks::new(cfg.fields.clone(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for v in nets.block_mut(Block::Deformation) {
            *v += rng.random_range(-0.05..0.05);
        }
        let x = nalgebra::Vector3::new(0.1, -0.2, 0.35);
        let attrs = toy().nearest_vertex_attributes(&x).unwrap();
        let loss = |n: &FieldNetworks| {
            let raw = n.deformation_raw(&[x.x, x.y, x.z]);
            flame_point(&n.decode_deformation(&raw), &attrs, &cfg.weights, raw.len()).unwrap()
        };
        let trace = nets.deformation_trace(&[x.x, x.y, x.z], false);
        let (_, g) = loss(&nets);
        let mut pg = vec![0.0; nets.deformation.num_params()];
        nets.deformation_backward(&trace, &g, &[], Some(&mut pg)).unwrap();
        let r = nets.block_range(Block::Deformation);
        for _ in 0..30 {
            let k = rng.random_range(0..pg.len());
            let i = r.start + k;
            let p0 = nets.param(i);
            let h = 1e-6;
            nets.set_param(i, p0 + h);
            let fp = loss(&nets).0;
            nets.set_param(i, p0 - h);
            let fm = loss(&nets).0;
            nets.set_param(i, p0);
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - pg[k]).abs() <= 1e-3 * fd.abs().max(pg[k].abs()).max(1e-3), "{k}: {fd} vs {}", pg[k]);
        }
    }

    #[test]
    fn texture_gradient_matches_finite_differences_of_the_batch_loss() {
        let ds = tiny_dataset(1);
        let mut cfg = tiny_config();
        cfg.weights.lambda_fl = 0.0;
        let mut nets = FieldNetworks::new(cfg.fields.clone(), 1).unwrap();
        let f = &ds.frames[0];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let px = sample_pixels(f, 24, 0.75, &mut rng);
        let mut g = FieldGrads::zeros_like(&nets);
        let st = batch_loss(&nets, toy(), f, 0, &px, &cfg, &cfg.march, Some(&mut g)).unwrap();
        assert!(st.surface > 0);
        let r = nets.block_range(Block::Texture);
        for _ in 0..15 {
            let i = rng.random_range(r.clone());
            let p0 = nets.param(i);
            let h = 1e-6;
            let eval = |n: &FieldNetworks| {
                let s = batch_loss(n, toy(), f, 0, &px, &cfg, &cfg.march, None).unwrap();
                cfg.weights.total(&s.loss)
            };
            nets.set_param(i, p0 + h);
            let fp = eval(&nets);
            nets.set_param(i, p0 - h);
            let fm = eval(&nets);
            nets.set_param(i, p0);
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - g.get(i)).abs() <= 1e-3 * fd.abs().max(g.get(i).abs()).max(1e-6), "{fd} vs {}", g.get(i));
        }
    }

    #[test]
    fn training_is_reproducible_and_writes_logs() {
        let ds = tiny_dataset(2);
        let cfg = tiny_config();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let mut logs = Vec::new();
        let ca = fit(&ds, toy(), &cfg, Some(a.path()), |l| logs.push(l.clone())).unwrap();
        let cb = fit(&ds, toy(), &cfg, Some(b.path()), |_| {}).unwrap();
        assert_eq!(ca.to_bytes().unwrap(), cb.to_bytes().unwrap());
        assert_eq!(logs.len(), 2);
        assert!(logs.iter().all(|l| l.total.is_finite() && l.steps == 2));
        let text = std::fs::read_to_string(a.path().join(METRICS_FILE)).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(a.path().join("checkpoint_001.bin").exists());
        assert_eq!(Checkpoint::load(&a.path().join(CHECKPOINT_FILE)).unwrap(), ca);
        assert_ne!(ca.nets, init_state(&ds, toy(), &cfg).unwrap().0.nets);
    }

    #[test]
    fn two_consecutive_skips_abort() {
        let mut g = DivergenceGuard::default();
        assert!(!g.record(false));
        assert!(!g.record(true));
        assert!(!g.record(false));
        assert!(g.record(false));
    }
}

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::frame::{render_gt_frame, FrameRecord, Light};
use crate::error::{Error, Result};
use crate::morphable::{canonical_pose, AnimationParams, MorphableTemplate, JAW_JOINT, LATENT_DIM, NUM_EXPR};
use crate::render::image::{decode_png, encode_gray, encode_rgb};
use crate::render::{Camera, Orbit, DEFAULT_FOV_Y};

/// Pose, expression and camera placement of one frame to generate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameSpec {
    pub theta: Vec<f64>,
    pub psi: Vec<f64>,
    pub orbit: Orbit,
}

/// Sampling ranges of a parameter schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleRanges {
    /// Expression norms are drawn uniformly from this interval.
    pub psi_norm: (f64, f64),
    /// Number of leading expression components that are animated.
    pub psi_components: usize,
    pub jaw_pitch: (f64, f64),
    /// Half-range of the neck and global rotations (per axis).
    pub neck: f64,
    pub global: f64,
    pub azimuth: f64,
    pub elevation: f64,
    pub distance: f64,
}

impl ScheduleRanges {
    /// Mild expressions around the canonical pose.
    pub fn training() -> Self {
        Self {
            psi_norm: (0.0, 1.0),
            psi_components: 10,
            jaw_pitch: (0.1, 0.3),
            neck: 0.1,
            global: 0.05,
            azimuth: 0.6,
            elevation: 0.2,
            distance: 2.2,
        }
    }

    /// Strong expressions and wider jaw opening, strictly beyond the
    /// training expression norms.
    pub fn extrapolation() -> Self {
        Self {
            psi_norm: (1.5, 3.0),
            jaw_pitch: (0.1, 0.4),
            ..Self::training()
        }
    }
}

pub fn sample_schedule(ranges: &ScheduleRanges, n: usize, seed: u64) -> Vec<FrameSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let k = ranges.psi_components.clamp(1, NUM_EXPR);
            let mut dir: Vec<f64> = (0..k).map(|_| StandardNormal.sample(&mut rng)).collect();
            let len = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            let target = rng.random_range(ranges.psi_norm.0..=ranges.psi_norm.1);
            dir.iter_mut().for_each(|v| *v *= target / len);
            let mut psi = vec![0.0; NUM_EXPR];
            psi[..k].copy_from_slice(&dir);

            let mut theta = canonical_pose();
            for v in &mut theta[0..3] {
                *v = rng.random_range(-ranges.global..=ranges.global);
            }
            for v in &mut theta[3..6] {
                *v = rng.random_range(-ranges.neck..=ranges.neck);
            }
            theta[3 * JAW_JOINT] = rng.random_range(ranges.jaw_pitch.0..=ranges.jaw_pitch.1);
            let orbit = Orbit {
                azimuth: rng.random_range(-ranges.azimuth..=ranges.azimuth),
                elevation: rng.random_range(-ranges.elevation..=ranges.elevation),
                distance: ranges.distance,
            };
            FrameSpec { theta, psi, orbit }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub light: Light,
    pub template_hash: String,
    pub width: usize,
    pub height: usize,
    pub fov_y: f64,
    pub n_frames: usize,
}

/// Per-frame entry of `params.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub frame_id: usize,
    pub theta: Vec<f64>,
    pub psi: Vec<f64>,
    pub camera: Camera,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub frames: Vec<FrameRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateOptions {
    pub width: usize,
    pub height: usize,
    pub fov_y: f64,
    pub light: Light,
    pub seed: u64,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            fov_y: DEFAULT_FOV_Y,
            light: Light::default(),
            seed: 0,
        }
    }
}

fn frame_name(kind: &str, id: usize) -> PathBuf {
    PathBuf::from(kind).join(format!("{id:06}.png"))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Render every frame of `schedule` and write the dataset layout into
/// `out_dir`: `rgb/`, `mask/` and `normal/` PNGs named by frame id,
/// `params.json` and `manifest.json`.
pub fn generate_dataset(
    template: &MorphableTemplate,
    schedule: &[FrameSpec],
    out_dir: &Path,
    opts: &GenerateOptions,
) -> Result<Dataset> {
    for kind in ["rgb", "mask", "normal"] {
        let d = out_dir.join(kind);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let frames: Vec<FrameRecord> = schedule
        .par_iter()
        .enumerate()
        .map(|(id, spec)| {
            let params = AnimationParams {
                theta: spec.theta.clone(),
                psi: spec.psi.clone(),
                latent: vec![0.0; LATENT_DIM],
                frame_id: id,
            };
            let cam = Camera::orbit(spec.orbit, opts.width, opts.height, opts.fov_y)?;
            render_gt_frame(template, &params, &cam, &opts.light)
        })
        .collect::<Result<_>>()?;
    frames.par_iter().try_for_each(|f| write_frame(out_dir, f))?;
    let entries: Vec<FrameEntry> = frames
        .iter()
        .map(|f| FrameEntry {
            frame_id: f.frame_id,
            theta: f.params.theta.clone(),
            psi: f.params.psi.clone(),
            camera: f.camera.clone(),
        })
        .collect();
    let manifest = Manifest {
        seed: opts.seed,
        light: opts.light,
        template_hash: template.content_hash()?,
        width: opts.width,
        height: opts.height,
        fov_y: opts.fov_y,
        n_frames: frames.len(),
    };
    write(&out_dir.join("params.json"), serde_json::to_string_pretty(&entries)?.as_bytes())?;
    write(&out_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(Dataset { manifest, frames })
}

fn write_frame(dir: &Path, f: &FrameRecord) -> Result<()> {
    let (w, h) = (f.width as u32, f.height as u32);
    if f.num_pixels() == 0 {
        return Err(Error::invalid("cannot store an empty frame"));
    }
    let mask: Vec<u8> = f.mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    write(&dir.join(frame_name("rgb", f.frame_id)), &encode_rgb(w, h, f.rgb.clone())?)?;
    write(&dir.join(frame_name("mask", f.frame_id)), &encode_gray(w, h, mask)?)?;
    write(&dir.join(frame_name("normal", f.frame_id)), &encode_rgb(w, h, f.normal.clone())?)?;
    Ok(())
}

fn read_image(path: &Path, w: usize, h: usize, channels: usize) -> Result<Vec<u8>> {
    let (iw, ih, ch, data) = decode_png(&read(path)?)?;
    if (iw, ih, ch) != (w, h, channels) {
        return Err(Error::invalid(format!(
            "{}: expected {w}x{h}x{channels}, found {iw}x{ih}x{ch}",
            path.display()
        )));
    }
    Ok(data)
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(&read(&dir.join("manifest.json"))?)?;
        let entries: Vec<FrameEntry> = serde_json::from_slice(&read(&dir.join("params.json"))?)?;
        if entries.len() != manifest.n_frames {
            return Err(Error::invalid(format!(
                "{}: manifest lists {} frames, params.json has {}",
                dir.display(),
                manifest.n_frames,
                entries.len()
            )));
        }
        let frames = entries
            .into_par_iter()
            .map(|e| {
                let (w, h) = (e.camera.width, e.camera.height);
                let rgb = read_image(&dir.join(frame_name("rgb", e.frame_id)), w, h, 3)?;
                let mask = read_image(&dir.join(frame_name("mask", e.frame_id)), w, h, 1)?;
                let normal = read_image(&dir.join(frame_name("normal", e.frame_id)), w, h, 3)?;
                let f = FrameRecord {
                    frame_id: e.frame_id,
                    width: w,
                    height: h,
                    rgb,
                    mask: mask.iter().map(|&m| m >= 128).collect(),
                    normal,
                    camera: e.camera,
                    params: AnimationParams {
                        theta: e.theta,
                        psi: e.psi,
                        latent: vec![0.0; LATENT_DIM],
                        frame_id: e.frame_id,
                    },
                };
                f.validate()?;
                Ok(f)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Default split sizes: training, held-out training-distribution and
/// extrapolation frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 200,
            val: 10,
            test: 50,
        }
    }
}

pub const TEMPLATE_FILE: &str = "template.bin";

/// Write `train/`, `val/` and `test/` datasets plus the template under
/// `root`. Schedules are seeded from `opts.seed`.
pub fn generate_splits(template: &MorphableTemplate, root: &Path, sizes: SplitSizes, opts: &GenerateOptions) -> Result<()> {
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    template.save(root.join(TEMPLATE_FILE))?;
    let splits = [
        ("train", ScheduleRanges::training(), sizes.train, 0u64),
        ("val", ScheduleRanges::training(), sizes.val, 1),
        ("test", ScheduleRanges::extrapolation(), sizes.test, 2),
    ];
    for (name, ranges, n, k) in splits {
        let seed = opts.seed.wrapping_mul(31).wrapping_add(k);
        let schedule = sample_schedule(&ranges, n, seed);
        generate_dataset(template, &schedule, &root.join(name), opts)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::morphable::{generate_toy_head, ToyHeadConfig};

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn extrapolation_norms_exceed_training_maximum() {
        let train = sample_schedule(&ScheduleRanges::training(), 500, 3);
        let test = sample_schedule(&ScheduleRanges::extrapolation(), 500, 4);
        let max_train = train.iter().map(|f| norm(&f.psi)).fold(0.0, f64::max);
        let min_test = test.iter().map(|f| norm(&f.psi)).fold(f64::INFINITY, f64::min);
        assert!(max_train <= 1.0 + 1e-12);
        assert!(min_test > max_train);
        assert!(test.iter().all(|f| norm(&f.psi) <= 3.0 + 1e-12 && f.theta[6] <= 0.4));
    }

    #[test]
    fn empty_schedule_writes_valid_manifest() {
        let tpl = generate_toy_head(&ToyHeadConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(&tpl, &[], dir.path(), &GenerateOptions::default()).unwrap();
        assert!(ds.is_empty());
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.manifest.n_frames, 0);
        assert!(dir.path().join("rgb").is_dir());
    }

    #[test]
    fn records_round_trip_and_generation_is_reproducible() {
        let tpl = generate_toy_head(&ToyHeadConfig::default()).unwrap();
        let opts = GenerateOptions {
            width: 24,
            height: 20,
            ..GenerateOptions::default()
        };
        let sched = sample_schedule(&ScheduleRanges::training(), 3, 9);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ds = generate_dataset(&tpl, &sched, a.path(), &opts).unwrap();
        generate_dataset(&tpl, &sched, b.path(), &opts).unwrap();
        let back = Dataset::load(a.path()).unwrap();
        assert_eq!(back, ds);
        for rel in ["params.json", "manifest.json", "rgb/000002.png", "mask/000000.png", "normal/000001.png"] {
            assert_eq!(std::fs::read(a.path().join(rel)).unwrap(), std::fs::read(b.path().join(rel)).unwrap());
        }
    }

    #[test]
    fn unwritable_directory_is_reported() {
        let tpl = generate_toy_head(&ToyHeadConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("occupied");
        std::fs::write(&file, b"x").unwrap();
        assert!(generate_dataset(&tpl, &[], &file, &GenerateOptions::default()).is_err());
    }
}

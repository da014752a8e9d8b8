use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::render::RenderOutput;
use crate::synth::FrameRecord;

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Image channels the metrics look at, in `[0, 1]` RGB and unit normals.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalImage {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<[f64; 3]>,
    pub mask: Vec<bool>,
    /// `None` off the mask.
    pub normal: Vec<Option<Vector3<f64>>>,
}

impl EvalImage {
    pub fn from_render(r: &RenderOutput) -> Self {
        let normal = r
            .normal
            .iter()
            .zip(&r.mask)
            .map(|(n, &m)| m.then(|| Vector3::from(*n)))
            .collect();
        Self {
            width: r.width,
            height: r.height,
            rgb: r.rgb.clone(),
            mask: r.mask.clone(),
            normal,
        }
    }

    pub fn from_frame(f: &FrameRecord) -> Self {
        let n = f.num_pixels();
        Self {
            width: f.width,
            height: f.height,
            rgb: (0..n).map(|p| f.rgb_f64(p)).collect(),
            mask: f.mask.clone(),
            normal: (0..n).map(|p| f.normal_at(p)).collect(),
        }
    }
}

/// Which pixels the color metrics cover.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    /// Predicted and ground-truth masks both set.
    #[default]
    Intersection,
    GroundTruth,
    Full,
}

impl Region {
    fn select(self, pred: &EvalImage, gt: &EvalImage) -> Vec<bool> {
        match self {
            Region::Intersection => pred.mask.iter().zip(&gt.mask).map(|(a, b)| *a && *b).collect(),
            Region::GroundTruth => gt.mask.clone(),
            Region::Full => vec![true; gt.mask.len()],
        }
    }
}

/// Metrics of one image pair. Values over an empty region are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub l1: Option<f64>,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    /// Mean angle in degrees over pixels inside both masks.
    pub normal_error: Option<f64>,
    pub iou: f64,
}

pub fn mask_iou(pred: &[bool], gt: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (a, b) in pred.iter().zip(gt) {
        inter += (*a && *b) as usize;
        union += (*a || *b) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (-10.0 * mse.log10()).min(PSNR_CAP)
    }
}

/// Normalized 1D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of a `w`×`h` plane.
fn filter(plane: &[f64], w: usize, h: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = taps.len();
    let (ow, oh) = (w + 1 - k, h + 1 - k);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| taps[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| taps[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

/// SSIM map of one channel with an 11×11 Gaussian window (σ = 1.5). The
/// map covers window centers whose window lies inside the image; it is
/// `(h − 10)` rows of `(w − 10)` values.
pub fn ssim_map(a: &[f64], b: &[f64], w: usize, h: usize) -> Vec<f64> {
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Vec::new();
    }
    let taps = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let prod = |f: &dyn Fn(f64, f64) -> f64| a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect::<Vec<_>>();
    let (mu_a, _, _) = filter(a, w, h, &taps);
    let (mu_b, _, _) = filter(b, w, h, &taps);
    let (aa, _, _) = filter(&prod(&|x, _| x * x), w, h, &taps);
    let (bb, _, _) = filter(&prod(&|_, y| y * y), w, h, &taps);
    let (ab, _, _) = filter(&prod(&|x, y| x * y), w, h, &taps);
    (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
        })
        .collect()
}

/// Mean SSIM over channels and over window centers inside `region`.
pub fn ssim_rgb(pred: &[[f64; 3]], gt: &[[f64; 3]], w: usize, h: usize, region: &[bool]) -> Option<f64> {
    let half = SSIM_WINDOW / 2;
    let mut sum = 0.0;
    let mut n = 0usize;
    for c in 0..3 {
        let a: Vec<f64> = pred.iter().map(|p| p[c]).collect();
        let b: Vec<f64> = gt.iter().map(|p| p[c]).collect();
        let map = ssim_map(&a, &b, w, h);
        if map.is_empty() {
            return None;
        }
        let mw = w + 1 - SSIM_WINDOW;
        for (i, v) in map.iter().enumerate() {
            let (y, x) = (i / mw + half, i % mw + half);
            if region[y * w + x] {
                sum += v;
                n += 1;
            }
        }
    }
    (n > 0).then(|| sum / n as f64)
}

pub fn compute_metrics(pred: &EvalImage, gt: &EvalImage, region: Region) -> Result<ImageMetrics> {
    if pred.width != gt.width || pred.height != gt.height || pred.rgb.len() != gt.rgb.len() {
        return Err(Error::invalid(format!(
            "metrics: prediction is {}x{}, ground truth is {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    let sel = region.select(pred, gt);
    let count = sel.iter().filter(|s| **s).count();
    let (mut abs, mut sq) = (0.0, 0.0);
    for i in (0..sel.len()).filter(|&i| sel[i]) {
        for c in 0..3 {
            let d = pred.rgb[i][c] - gt.rgb[i][c];
            abs += d.abs();
            sq += d * d;
        }
    }
    let denom = 3.0 * count as f64;
    let (mut ang, mut n_ang) = (0.0, 0usize);
    for (p, g) in pred.normal.iter().zip(&gt.normal) {
        if let (Some(p), Some(g)) = (p, g) {
            // atan2 stays exact for parallel vectors where acos of the dot product does not
            ang += p.cross(g).norm().atan2(p.dot(g)).to_degrees();
            n_ang += 1;
        }
    }
    Ok(ImageMetrics {
        l1: (count > 0).then(|| abs / denom),
        psnr: (count > 0).then(|| psnr_from_mse(sq / denom)),
        ssim: ssim_rgb(&pred.rgb, &gt.rgb, gt.width, gt.height, &sel),
        normal_error: (n_ang > 0).then(|| ang / n_ang as f64),
        iou: mask_iou(&pred.mask, &gt.mask),
    })
}

/// Mean of each metric over the frames where it is defined.
pub fn aggregate(items: &[ImageMetrics]) -> ImageMetrics {
    let mean = |f: &dyn Fn(&ImageMetrics) -> Option<f64>| {
        let v: Vec<f64> = items.iter().filter_map(f).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    ImageMetrics {
        l1: mean(&|m| m.l1),
        psnr: mean(&|m| m.psnr),
        ssim: mean(&|m| m.ssim),
        normal_error: mean(&|m| m.normal_error),
        iou: mean(&|m| Some(m.iou)).unwrap_or(1.0),
    }
}

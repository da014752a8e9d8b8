use std::io::Cursor;
use std::path::Path;

use image::{ImageBuffer, ImageFormat, Luma, Rgb};
use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::camera::Camera;
use super::march::{march_ray, shade_pixel, MarchConfig};
use super::scene::Scene;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    #[default]
    Rgb,
    Normal,
    Mask,
    Depth,
}

/// Per-pixel render buffers in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
    pub rgb: Vec<[f64; 3]>,
    pub mask: Vec<bool>,
    /// Zero where the mask is false.
    pub normal: Vec<[f64; 3]>,
    /// Infinite where the mask is false.
    pub depth: Vec<f64>,
    /// Hits shaded with a fallback normal or background color because the
    /// normal or texture could not be evaluated.
    pub flagged: usize,
}

struct PixelOut {
    rgb: [f64; 3],
    hit: bool,
    normal: [f64; 3],
    depth: f64,
    flagged: bool,
}

/// Render every pixel of `camera`. Pixels are independent; results are
/// assembled in pixel order so the output does not depend on scheduling.
pub fn render_image(scene: &dyn Scene, camera: &Camera, cfg: &MarchConfig, background: [f64; 3]) -> Result<RenderOutput> {
    camera.validate()?;
    let (w, h) = (camera.width, camera.height);
    let pixels: Vec<PixelOut> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let (o, d) = camera.ray_through((i / w) as f64 + 0.5, (i % w) as f64 + 0.5);
            let hit = march_ray(scene, &o, &d, camera.near, camera.far, cfg, i as u64, false);
            if !hit.hit {
                return PixelOut {
                    rgb: background,
                    hit: false,
                    normal: [0.0; 3],
                    depth: f64::INFINITY,
                    flagged: false,
                };
            }
            let n = super::march::deformed_normal(scene, &hit.x_c, &d);
            let (rgb, ok) = match shade_pixel(scene, &hit, &d) {
                Ok((c, ok)) => (c, ok),
                Err(e) => {
                    log::warn!("pixel {i}: shading failed: {e}");
                    (background, false)
                }
            };
            let n = n.unwrap_or(-d);
            PixelOut {
                rgb,
                hit: true,
                normal: [n.x, n.y, n.z],
                depth: hit.t,
                flagged: !ok,
            }
        })
        .collect();
    let mut out = RenderOutput {
        width: w,
        height: h,
        near: camera.near,
        far: camera.far,
        rgb: Vec::with_capacity(w * h),
        mask: Vec::with_capacity(w * h),
        normal: Vec::with_capacity(w * h),
        depth: Vec::with_capacity(w * h),
        flagged: 0,
    };
    for p in pixels {
        out.rgb.push(p.rgb);
        out.mask.push(p.hit);
        out.normal.push(p.normal);
        out.depth.push(p.depth);
        out.flagged += p.flagged as usize;
    }
    Ok(out)
}

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

impl RenderOutput {
    pub fn rgb8(&self) -> Vec<u8> {
        self.rgb.iter().flat_map(|c| c.map(to_u8)).collect()
    }

    pub fn mask8(&self) -> Vec<u8> {
        self.mask.iter().map(|&m| if m { 255 } else { 0 }).collect()
    }

    /// Normals mapped from `[-1, 1]` to `[0, 255]`; background is 0.
    pub fn normal8(&self) -> Vec<u8> {
        self.normal
            .iter()
            .zip(&self.mask)
            .flat_map(|(n, &m)| if m { n.map(|v| to_u8(0.5 * (v + 1.0))) } else { [0; 3] })
            .collect()
    }

    /// Depth normalized over `[near, far]`; background is the maximum.
    pub fn depth16(&self) -> Vec<u16> {
        let span = self.far - self.near;
        self.depth
            .iter()
            .map(|&t| {
                if t.is_finite() {
                    (((t - self.near) / span).clamp(0.0, 1.0) * 65535.0).round() as u16
                } else {
                    u16::MAX
                }
            })
            .collect()
    }

    pub fn png(&self, kind: OutputKind) -> Result<Vec<u8>> {
        let (w, h) = (self.width as u32, self.height as u32);
        match kind {
            OutputKind::Rgb => encode_rgb(w, h, self.rgb8()),
            OutputKind::Normal => encode_rgb(w, h, self.normal8()),
            OutputKind::Mask => encode_gray(w, h, self.mask8()),
            OutputKind::Depth => {
                let img = ImageBuffer::<Luma<u16>, _>::from_raw(w, h, self.depth16()).ok_or_else(bad_size)?;
                encode(img)
            }
        }
    }

    /// Write `rgb.png`, `mask.png`, `normal.png` and `depth.png` into `dir`.
    pub fn save_all(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (kind, name) in [
            (OutputKind::Rgb, "rgb.png"),
            (OutputKind::Mask, "mask.png"),
            (OutputKind::Normal, "normal.png"),
            (OutputKind::Depth, "depth.png"),
        ] {
            let path = dir.join(name);
            std::fs::write(&path, self.png(kind)?).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

fn bad_size() -> Error {
    Error::invalid("image buffer does not match its dimensions")
}

fn encode<P: image::PixelWithColorType>(img: ImageBuffer<P, Vec<P::Subpixel>>) -> Result<Vec<u8>>
where
    [P::Subpixel]: image::EncodableLayout,
{
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::invalid("cannot encode an empty image"));
    }
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn encode_rgb(w: u32, h: u32, data: Vec<u8>) -> Result<Vec<u8>> {
    encode(ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, data).ok_or_else(bad_size)?)
}

pub fn encode_gray(w: u32, h: u32, data: Vec<u8>) -> Result<Vec<u8>> {
    encode(ImageBuffer::<Luma<u8>, _>::from_raw(w, h, data).ok_or_else(bad_size)?)
}

/// Decoded 8-bit image: `(width, height, channels, data)`.
pub fn decode_png(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        image::DynamicImage::ImageLuma8(b) => Ok((w, h, 1, b.into_raw())),
        other => Ok((w, h, 3, other.to_rgb8().into_raw())),
    }
}

/// Unit normal from an 8-bit encoded pixel.
pub fn decode_normal(px: &[u8]) -> Vector3<f64> {
    let v = Vector3::new(px[0] as f64, px[1] as f64, px[2] as f64) / 255.0 * 2.0 - Vector3::repeat(1.0);
    v.normalize()
}

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::raytrace::Bvh;
use crate::error::{Error, Result};
use crate::morphable::{AnimationParams, MorphableTemplate};
use crate::render::image::to_u8;
use crate::render::Camera;

/// Constant directional light with an ambient floor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Light {
    /// Unit vector pointing towards the light.
    pub direction: [f64; 3],
    pub ambient: f64,
}

impl Default for Light {
    fn default() -> Self {
        let d = Vector3::new(0.3, 0.5, 1.0).normalize();
        Self {
            direction: [d.x, d.y, d.z],
            ambient: 0.35,
        }
    }
}

impl Light {
    pub fn shade(&self, albedo: &[f64; 3], n: &Vector3<f64>) -> [f64; 3] {
        let lambert = n.dot(&Vector3::from(self.direction)).max(0.0);
        let k = self.ambient + (1.0 - self.ambient) * lambert;
        albedo.map(|a| a * k)
    }
}

/// One ground-truth frame. Images are stored as their 8-bit encodings so
/// that a record survives the on-disk format unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub frame_id: usize,
    pub width: usize,
    pub height: usize,
    /// Row-major RGB triples.
    pub rgb: Vec<u8>,
    pub mask: Vec<bool>,
    /// Normals mapped from `[-1, 1]` to `[0, 255]`; zero off the mask.
    pub normal: Vec<u8>,
    pub camera: Camera,
    pub params: AnimationParams,
}

impl FrameRecord {
    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn rgb_f64(&self, pixel: usize) -> [f64; 3] {
        let p = &self.rgb[pixel * 3..pixel * 3 + 3];
        [p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0]
    }

    /// Decoded unit normal; `None` off the mask.
    pub fn normal_at(&self, pixel: usize) -> Option<Vector3<f64>> {
        self.mask[pixel].then(|| crate::render::image::decode_normal(&self.normal[pixel * 3..pixel * 3 + 3]))
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_pixels();
        if self.rgb.len() != 3 * n || self.mask.len() != n || self.normal.len() != 3 * n {
            return Err(Error::invalid(format!("frame {}: image sizes disagree", self.frame_id)));
        }
        if self.camera.width != self.width || self.camera.height != self.height {
            return Err(Error::invalid(format!("frame {}: camera size disagrees", self.frame_id)));
        }
        self.params.validate()
    }
}

/// Float-valued trace of a frame before quantization.
#[derive(Debug, Clone, PartialEq)]
pub struct GtTrace {
    pub rgb: Vec<[f64; 3]>,
    pub mask: Vec<bool>,
    pub normal: Vec<Vector3<f64>>,
    pub depth: Vec<f64>,
}

fn vertex_normals(vertices: &[Vector3<f64>], faces: &[[u32; 3]]) -> Vec<Vector3<f64>> {
    let mut acc = vec![Vector3::zeros(); vertices.len()];
    for f in faces {
        let [a, b, c] = f.map(|k| vertices[k as usize]);
        // cross product length weights by area
        let n = (b - a).cross(&(c - a));
        for &k in f {
            acc[k as usize] += n;
        }
    }
    acc.into_iter()
        .map(|n| {
            let l = n.norm();
            if l > 0.0 {
                n / l
            } else {
                Vector3::z()
            }
        })
        .collect()
}

/// Ray trace the posed template: barycentric vertex colors under the light,
/// interpolated vertex normals, white background.
pub fn trace_gt_frame(template: &MorphableTemplate, params: &AnimationParams, camera: &Camera, light: &Light) -> Result<GtTrace> {
    camera.validate()?;
    let verts = template.mesh_pose(&params.theta, &params.psi)?;
    let normals = vertex_normals(&verts, &template.faces);
    let bvh = Bvh::build(&verts, &template.faces);
    let w = camera.width;
    let px: Vec<([f64; 3], bool, Vector3<f64>, f64)> = (0..camera.num_pixels())
        .into_par_iter()
        .map(|i| {
            let (o, d) = camera.ray_through((i / w) as f64 + 0.5, (i % w) as f64 + 0.5);
            match bvh.intersect(&verts, &template.faces, &o, &d) {
                Some(h) if h.t >= camera.near && h.t <= camera.far => {
                    let f = template.faces[h.triangle].map(|k| k as usize);
                    let mut n = Vector3::zeros();
                    let mut albedo = [0.0; 3];
                    for (c, &v) in f.iter().enumerate() {
                        n += h.bary[c] * normals[v];
                        for (k, a) in albedo.iter_mut().enumerate() {
                            *a += h.bary[c] * template.vertex_colors[v][k];
                        }
                    }
                    let n = n.normalize();
                    (light.shade(&albedo, &n), true, n, h.t)
                }
                _ => ([1.0; 3], false, Vector3::zeros(), f64::INFINITY),
            }
        })
        .collect();
    let mut out = GtTrace {
        rgb: Vec::with_capacity(px.len()),
        mask: Vec::with_capacity(px.len()),
        normal: Vec::with_capacity(px.len()),
        depth: Vec::with_capacity(px.len()),
    };
    for (c, m, n, t) in px {
        out.rgb.push(c);
        out.mask.push(m);
        out.normal.push(n);
        out.depth.push(t);
    }
    Ok(out)
}

pub fn render_gt_frame(
    template: &MorphableTemplate,
    params: &AnimationParams,
    camera: &Camera,
    light: &Light,
) -> Result<FrameRecord> {
    params.validate()?;
    let tr = trace_gt_frame(template, params, camera, light)?;
    let rgb = tr.rgb.iter().flat_map(|c| c.map(to_u8)).collect();
    let normal = tr
        .normal
        .iter()
        .zip(&tr.mask)
        .flat_map(|(n, &m)| if m { [n.x, n.y, n.z].map(|v| to_u8(0.5 * (v + 1.0))) } else { [0; 3] })
        .collect();
    Ok(FrameRecord {
        frame_id: params.frame_id,
        width: camera.width,
        height: camera.height,
        rgb,
        mask: tr.mask,
        normal,
        camera: camera.clone(),
        params: params.clone(),
    })
}

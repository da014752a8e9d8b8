//! Procedural toy head: a deformed icosphere with a hinged jaw, smooth
//! distance-falloff skinning, random-bump expression bases and jaw/neck pose
//! correctives. Fully determined by the seed.

use std::collections::HashMap;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kinematics;
use super::template::{canonical_pose, MorphableTemplate, NUM_EXPR, NUM_JOINTS};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct ToyHeadConfig {
    pub seed: u64,
    pub subdivisions: usize,
    /// Ellipsoid semi-axes (x: width, y: height, z: depth).
    pub radii: [f64; 3],
    /// Peak displacement of one expression basis at unit coefficient.
    pub expr_amplitude: f64,
}

impl Default for ToyHeadConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            subdivisions: 4,
            radii: [0.42, 0.52, 0.46],
            expr_amplitude: 0.05,
        }
    }
}

fn icosphere(subdivisions: usize) -> (Vec<Vector3<f64>>, Vec<[u32; 3]>) {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Vector3<f64>> = [
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ]
    .iter()
    .map(|p| Vector3::new(p[0], p[1], p[2]).normalize())
    .collect();
    let mut faces: Vec<[u32; 3]> = vec![
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut cache: HashMap<(u32, u32), u32> = HashMap::new();
        let mut mid = |a: u32, b: u32, verts: &mut Vec<Vector3<f64>>| -> u32 {
            *cache.entry((a.min(b), a.max(b))).or_insert_with(|| {
                verts.push(((verts[a as usize] + verts[b as usize]) / 2.0).normalize());
                (verts.len() - 1) as u32
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for f in &faces {
            let ab = mid(f[0], f[1], &mut verts);
            let bc = mid(f[1], f[2], &mut verts);
            let ca = mid(f[2], f[0], &mut verts);
            next.extend_from_slice(&[[f[0], ab, ca], [f[1], bc, ab], [f[2], ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    (verts, faces)
}

/// Smooth step from 0 (t <= -1) to 1 (t >= 1).
fn smooth(t: f64) -> f64 {
    let u = ((t + 1.0) / 2.0).clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

fn gauss(p: &Vector3<f64>, c: &Vector3<f64>, sigma: f64) -> f64 {
    (-(p - c).norm_squared() / (2.0 * sigma * sigma)).exp()
}

/// Rest-pose (mouth closed) surface point for unit direction `d`.
fn rest_surface(d: &Vector3<f64>, radii: &[f64; 3]) -> Vector3<f64> {
    let mut p = Vector3::new(d.x * radii[0], d.y * radii[1], d.z * radii[2]);
    let front = smooth((d.z - 0.3) / 0.3);
    // nose
    let nose = 0.06 * (-(p.x / 0.07).powi(2) - ((p.y + 0.02) / 0.11).powi(2)).exp() * front;
    // brow ridge and chin
    let brow = 0.015 * (-((p.y - 0.14) / 0.05).powi(2) - (p.x / 0.25).powi(2)).exp() * front;
    let chin = 0.025 * (-((p.y + 0.40) / 0.07).powi(2) - (p.x / 0.12).powi(2)).exp() * front;
    p += d * (nose + brow + chin);
    p
}

fn vertex_normals(verts: &[Vector3<f64>], faces: &[[u32; 3]]) -> Vec<Vector3<f64>> {
    let mut n = vec![Vector3::zeros(); verts.len()];
    for f in faces {
        let (a, b, c) = (verts[f[0] as usize], verts[f[1] as usize], verts[f[2] as usize]);
        let fn_ = (b - a).cross(&(c - a));
        for &i in f {
            n[i as usize] += fn_;
        }
    }
    n.into_iter().map(|v| v.normalize()).collect()
}

fn skin_weights(p: &Vector3<f64>, eyes: &[Vector3<f64>; 2]) -> [f64; NUM_JOINTS] {
    let jaw = smooth((-0.17 - p.y) / 0.08) * smooth((p.z + 0.02) / 0.15);
    let neck = smooth((-0.36 - p.y) / 0.1) * (1.0 - jaw);
    let le = 0.8 * gauss(p, &eyes[0], 0.05);
    let re = 0.8 * gauss(p, &eyes[1], 0.05);
    let global = (1.0 - jaw - neck - le - re).max(0.0) + 0.02;
    let w = [global, neck, jaw, le, re];
    let s: f64 = w.iter().sum();
    w.map(|x| x / s)
}

fn vertex_color(p: &Vector3<f64>, eyes: &[Vector3<f64>; 2]) -> [f64; 3] {
    let skin = Vector3::new(0.86, 0.66, 0.55);
    let hair = Vector3::new(0.30, 0.20, 0.13);
    let lips = Vector3::new(0.72, 0.33, 0.33);
    let brow = Vector3::new(0.35, 0.24, 0.18);
    let eye = Vector3::new(0.95, 0.95, 0.93);
    let hair_w = smooth((p.y - 0.22 + 0.35 * p.z.min(0.0) - 0.15 * p.z.max(0.0)) / 0.08);
    let mut c = skin * (1.0 - hair_w) + hair * hair_w;
    let front = smooth((p.z - 0.25) / 0.1);
    let lip_w = front * (-((p.y + 0.2) / 0.035).powi(2) - (p.x / 0.09).powi(2)).exp();
    c = c * (1.0 - lip_w) + lips * lip_w;
    for e in eyes {
        let ew = 0.9 * gauss(p, e, 0.035);
        c = c * (1.0 - ew) + eye * ew;
        let bw = 0.8 * front * (-((p.y - e.y - 0.075) / 0.02).powi(2) - ((p.x - e.x) / 0.06).powi(2)).exp();
        c = c * (1.0 - bw) + brow * bw;
    }
    [c.x.clamp(0.0, 1.0), c.y.clamp(0.0, 1.0), c.z.clamp(0.0, 1.0)]
}

/// Joint regressor row averaging the vertices nearest to each target point.
fn cluster_row(verts: &[Vector3<f64>], targets: &[Vector3<f64>], per_target: usize) -> Vec<f64> {
    let mut row = vec![0.0; verts.len()];
    let mut chosen = Vec::new();
    for t in targets {
        let mut idx: Vec<usize> = (0..verts.len()).collect();
        idx.sort_by(|&a, &b| (verts[a] - t).norm_squared().total_cmp(&(verts[b] - t).norm_squared()).then(a.cmp(&b)));
        chosen.extend(idx.into_iter().take(per_target));
    }
    let w = 1.0 / chosen.len() as f64;
    for i in chosen {
        row[i] += w;
    }
    row
}

pub fn generate_toy_head(cfg: &ToyHeadConfig) -> Result<MorphableTemplate> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (dirs, faces) = icosphere(cfg.subdivisions);
    let rest: Vec<Vector3<f64>> = dirs.iter().map(|d| rest_surface(d, &cfg.radii)).collect();
    let nv = rest.len();

    let eye_targets = [Vector3::new(0.15, 0.08, 0.45), Vector3::new(-0.15, 0.08, 0.45)];
    let eyes = eye_targets.map(|t| {
        *rest
            .iter()
            .min_by(|a, b| (*a - t).norm_squared().total_cmp(&(*b - t).norm_squared()))
            .unwrap()
    });

    let weights: Vec<f64> = rest.iter().flat_map(|p| skin_weights(p, &eyes)).collect();
    let colors: Vec<[f64; 3]> = rest.iter().map(|p| vertex_color(p, &eyes)).collect();

    // Joint regressor: global = centroid, neck = ring at the base, jaw = pair of
    // side clusters straddling the hinge, eyes = small surface clusters.
    let mut regressor = Vec::with_capacity(NUM_JOINTS * nv);
    regressor.extend(vec![1.0 / nv as f64; nv]);
    let neck_ring: Vec<Vector3<f64>> = (0..8)
        .map(|k| {
            let a = k as f64 * std::f64::consts::TAU / 8.0;
            Vector3::new(0.3 * a.cos(), -0.42, 0.3 * a.sin())
        })
        .collect();
    regressor.extend(cluster_row(&rest, &neck_ring, 2));
    regressor.extend(cluster_row(
        &rest,
        &[Vector3::new(0.45, -0.08, -0.05), Vector3::new(-0.45, -0.08, -0.05)],
        4,
    ));
    regressor.extend(cluster_row(&rest, &[eye_targets[0]], 3));
    regressor.extend(cluster_row(&rest, &[eye_targets[1]], 3));

    // Expression bases: smooth bumps on the face, mostly along the normal.
    let normals = vertex_normals(&rest, &faces);
    let face_verts: Vec<usize> = (0..nv)
        .filter(|&i| rest[i].z > 0.15 && rest[i].y > -0.45 && rest[i].y < 0.3)
        .collect();
    let mut expr = vec![0.0; nv * NUM_EXPR * 3];
    for e in 0..NUM_EXPR {
        let center = rest[face_verts[rng.random_range(0..face_verts.len())]];
        let sigma = rng.random_range(0.07..0.14);
        let amp = cfg.expr_amplitude * rng.random_range(0.6..1.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let tangent = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
            .normalize();
        let slant = rng.random_range(0.0..0.35f64);
        for i in 0..nv {
            let dir = normals[i] * slant.cos() + tangent * slant.sin();
            let off = dir * (amp * gauss(&rest[i], &center, sigma));
            let base = (i * NUM_EXPR + e) * 3;
            expr[base..base + 3].copy_from_slice(&[off.x, off.y, off.z]);
        }
    }

    // Pose correctives (non-root joints: neck, jaw, eyes). Row-major vec(R)
    // entries 7 / 5 carry the pitch sine, entries 2 / 6 the yaw sine.
    let np = NUM_JOINTS - 1;
    let mut pose = vec![0.0; nv * np * 9 * 3];
    let cheeks = [Vector3::new(0.3, -0.15, 0.25), Vector3::new(-0.3, -0.15, 0.25)];
    let throat = Vector3::new(0.0, -0.42, 0.25);
    for i in 0..nv {
        let p = &rest[i];
        let n = normals[i];
        let cheek = gauss(p, &cheeks[0], 0.1) + gauss(p, &cheeks[1], 0.1);
        let neck = gauss(p, &throat, 0.12);
        let mut put = |joint: usize, entry: usize, v: Vector3<f64>| {
            let base = ((i * np + joint) * 9 + entry) * 3;
            pose[base] += v.x;
            pose[base + 1] += v.y;
            pose[base + 2] += v.z;
        };
        // neck (non-root index 0)
        put(0, 7, n * (0.05 * neck));
        put(0, 5, n * (-0.05 * neck));
        put(0, 2, Vector3::new(0.03 * neck * p.z.signum(), 0.0, 0.0));
        // jaw (non-root index 1)
        put(1, 7, n * (0.06 * cheek));
        put(1, 5, n * (-0.06 * cheek));
        put(1, 4, Vector3::new(0.0, 0.04 * cheek, 0.0));
    }

    // Canonical template: the rest mesh posed into the canonical pose.
    let nj = NUM_JOINTS;
    let rest_joints: Vec<Vector3<f64>> = regressor
        .chunks_exact(nv)
        .map(|row| row.iter().zip(&rest).fold(Vector3::zeros(), |a, (w, p)| a + *w * p))
        .collect();
    let parent = vec![None, Some(0), Some(1), Some(1), Some(1)];
    let canonical = canonical_pose();
    let tf = kinematics::bone_transforms(&canonical, &rest_joints, &parent)?;
    let zero = vec![0.0; 3 * nj];
    let corr = super::template::pose_offset(&canonical, &zero, &pose, nj)?;
    let corrected: Vec<Vector3<f64>> = rest.iter().zip(&corr).map(|(p, c)| p + c).collect();
    let vertices = kinematics::lbs_apply(&corrected, &weights, &tf);

    MorphableTemplate::new(vertices, faces, weights, expr, pose, regressor, colors, parent, canonical, NUM_EXPR)
}

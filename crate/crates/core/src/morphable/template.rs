use std::collections::HashMap;
use std::path::Path;
use std::sync::OnceLock;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::grid::VertexGrid;
use super::kinematics::{self, Rigid};
use crate::container::{ArrayData, Container};
use crate::error::{Error, Result};

pub const NUM_JOINTS: usize = 5;
pub const NUM_EXPR: usize = 50;
pub const LATENT_DIM: usize = 32;
pub const JOINT_NAMES: [&str; NUM_JOINTS] = ["global", "neck", "jaw", "left_eye", "right_eye"];
pub const JAW_JOINT: usize = 2;
pub const CANONICAL_JAW_PITCH: f64 = 0.2;

/// Canonical pose: jaw pitch 0.2 rad (mouth slightly open), everything else zero.
pub fn canonical_pose() -> Vec<f64> {
    let mut theta = vec![0.0; 3 * NUM_JOINTS];
    theta[3 * JAW_JOINT] = CANONICAL_JAW_PITCH;
    theta
}

/// Pose, expression and per-frame latent driving one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnimationParams {
    pub theta: Vec<f64>,
    pub psi: Vec<f64>,
    #[serde(default)]
    pub latent: Vec<f64>,
    #[serde(default)]
    pub frame_id: usize,
}

impl AnimationParams {
    pub fn canonical() -> Self {
        Self {
            theta: canonical_pose(),
            psi: vec![0.0; NUM_EXPR],
            latent: vec![0.0; LATENT_DIM],
            frame_id: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.theta.len() != 3 * NUM_JOINTS {
            return Err(Error::invalid(format!(
                "theta: expected {} values, got {}",
                3 * NUM_JOINTS,
                self.theta.len()
            )));
        }
        if self.psi.len() != NUM_EXPR {
            return Err(Error::invalid(format!(
                "psi: expected {NUM_EXPR} values, got {}",
                self.psi.len()
            )));
        }
        if self.latent.len() != LATENT_DIM {
            return Err(Error::invalid(format!(
                "latent: expected {LATENT_DIM} values, got {}",
                self.latent.len()
            )));
        }
        if !self.theta.iter().chain(&self.psi).chain(&self.latent).all(|v| v.is_finite()) {
            return Err(Error::invalid("non-finite animation parameter"));
        }
        Ok(())
    }

    /// Jaw joint axis-angle, the pose conditioning of the texture field.
    pub fn jaw(&self) -> [f64; 3] {
        let j = 3 * JAW_JOINT;
        [self.theta[j], self.theta[j + 1], self.theta[j + 2]]
    }
}

/// Discrete canonical head with skinning weights, blendshape bases and a
/// joint regressor. All per-vertex arrays are row-major.
#[derive(Debug)]
pub struct MorphableTemplate {
    pub vertices: Vec<Vector3<f64>>,
    pub faces: Vec<[u32; 3]>,
    /// `V x n_joints`
    pub skin_weights: Vec<f64>,
    /// `V x n_expr x 3`
    pub expr_basis: Vec<f64>,
    /// `V x (n_joints - 1) * 9 x 3`
    pub pose_basis: Vec<f64>,
    /// `n_joints x V`
    pub joint_regressor: Vec<f64>,
    pub vertex_colors: Vec<[f64; 3]>,
    pub parent: Vec<Option<usize>>,
    pub canonical_pose: Vec<f64>,
    pub n_joints: usize,
    pub n_expr: usize,
    grid: OnceLock<VertexGrid>,
}

impl Clone for MorphableTemplate {
    fn clone(&self) -> Self {
        Self {
            vertices: self.vertices.clone(),
            faces: self.faces.clone(),
            skin_weights: self.skin_weights.clone(),
            expr_basis: self.expr_basis.clone(),
            pose_basis: self.pose_basis.clone(),
            joint_regressor: self.joint_regressor.clone(),
            vertex_colors: self.vertex_colors.clone(),
            parent: self.parent.clone(),
            canonical_pose: self.canonical_pose.clone(),
            n_joints: self.n_joints,
            n_expr: self.n_expr,
            grid: OnceLock::new(),
        }
    }
}

/// Attributes of the nearest template vertex, the pseudo ground truth for
/// the deformation field.
#[derive(Debug, Clone, Copy)]
pub struct VertexAttributes<'a> {
    pub index: usize,
    pub expr: &'a [f64],
    pub pose: &'a [f64],
    pub weights: &'a [f64],
}

impl MorphableTemplate {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        vertices: Vec<Vector3<f64>>,
        faces: Vec<[u32; 3]>,
        skin_weights: Vec<f64>,
        expr_basis: Vec<f64>,
        pose_basis: Vec<f64>,
        joint_regressor: Vec<f64>,
        vertex_colors: Vec<[f64; 3]>,
        parent: Vec<Option<usize>>,
        canonical_pose: Vec<f64>,
        n_expr: usize,
    ) -> Result<Self> {
        let t = Self {
            n_joints: parent.len(),
            n_expr,
            vertices,
            faces,
            skin_weights,
            expr_basis,
            pose_basis,
            joint_regressor,
            vertex_colors,
            parent,
            canonical_pose,
            grid: OnceLock::new(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_pose_joints(&self) -> usize {
        self.n_joints.saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.vertices.len();
        let nj = self.n_joints;
        let check = |name: &str, got: usize, want: usize| {
            if got == want {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name}: expected {want} values, got {got}")))
            }
        };
        check("skin_weights", self.skin_weights.len(), v * nj)?;
        check("expr_basis", self.expr_basis.len(), v * self.n_expr * 3)?;
        check("pose_basis", self.pose_basis.len(), v * self.n_pose_joints() * 27)?;
        check("joint_regressor", self.joint_regressor.len(), nj * v)?;
        check("vertex_colors", self.vertex_colors.len(), v)?;
        check("canonical_pose", self.canonical_pose.len(), 3 * nj)?;
        kinematics::chain_order(&self.parent)?;
        for (i, row) in self.skin_weights.chunks_exact(nj.max(1)).enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 || row.iter().any(|w| *w < 0.0) {
                return Err(Error::invalid(format!(
                    "skin_weights row {i} sums to {s} or has negative entries"
                )));
            }
        }
        for (j, row) in self.joint_regressor.chunks_exact(v.max(1)).enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!("joint_regressor row {j} sums to {s}")));
            }
        }
        if let Some(f) = self.faces.iter().find(|f| f.iter().any(|&i| i as usize >= v)) {
            return Err(Error::invalid(format!("face {f:?} indexes past {v} vertices")));
        }
        Ok(())
    }

    /// Every undirected edge is shared by exactly two faces.
    pub fn is_watertight(&self) -> bool {
        let mut edges: HashMap<(u32, u32), usize> = HashMap::new();
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                *edges.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        !edges.is_empty() && edges.values().all(|&c| c == 2)
    }

    pub fn median_edge_length(&self) -> f64 {
        let mut lens: Vec<f64> = self
            .faces
            .iter()
            .flat_map(|f| {
                (0..3).map(move |k| (f[k], f[(k + 1) % 3]))
            })
            .filter(|(a, b)| a < b)
            .map(|(a, b)| (self.vertices[a as usize] - self.vertices[b as usize]).norm())
            .collect();
        if lens.is_empty() {
            return 0.0;
        }
        lens.sort_by(|a, b| a.total_cmp(b));
        lens[lens.len() / 2]
    }

    fn grid(&self) -> &VertexGrid {
        self.grid.get_or_init(|| {
            let cell = 2.0 * self.median_edge_length();
            VertexGrid::build(&self.vertices, if cell > 0.0 { cell } else { 1.0 })
        })
    }

    pub fn expr_row(&self, v: usize) -> &[f64] {
        let n = self.n_expr * 3;
        &self.expr_basis[v * n..(v + 1) * n]
    }

    pub fn pose_row(&self, v: usize) -> &[f64] {
        let n = self.n_pose_joints() * 27;
        &self.pose_basis[v * n..(v + 1) * n]
    }

    pub fn weight_row(&self, v: usize) -> &[f64] {
        &self.skin_weights[v * self.n_joints..(v + 1) * self.n_joints]
    }

    pub fn nearest_vertex_attributes(&self, query: &Vector3<f64>) -> Result<VertexAttributes<'_>> {
        if self.vertices.is_empty() {
            return Err(Error::InvalidState("template has no vertices".into()));
        }
        let index = self
            .grid()
            .nearest(&self.vertices, query)
            .ok_or_else(|| Error::InvalidState("spatial index empty".into()))?;
        Ok(VertexAttributes {
            index,
            expr: self.expr_row(index),
            pose: self.pose_row(index),
            weights: self.weight_row(index),
        })
    }

    pub fn to_container(&self) -> Result<Container> {
        let v = self.vertices.len();
        let parent: Vec<i64> = self.parent.iter().map(|p| p.map_or(-1, |p| p as i64)).collect();
        let mut c = Container::new(
            "morphable_template",
            serde_json::json!({
                "n_joints": self.n_joints,
                "n_expr": self.n_expr,
                "joint_names": JOINT_NAMES.get(..self.n_joints).map(|s| s.to_vec()),
            }),
        );
        c.push_f64("vertices", vec![v, 3], self.vertices.iter().flat_map(|p| [p.x, p.y, p.z]).collect())?;
        c.push(
            "faces",
            vec![self.faces.len(), 3],
            ArrayData::U32(self.faces.iter().flatten().copied().collect()),
        )?;
        c.push_f64("skin_weights", vec![v, self.n_joints], self.skin_weights.clone())?;
        c.push_f64("expr_basis", vec![v, self.n_expr, 3], self.expr_basis.clone())?;
        c.push_f64("pose_basis", vec![v, self.n_pose_joints() * 9, 3], self.pose_basis.clone())?;
        c.push_f64("joint_regressor", vec![self.n_joints, v], self.joint_regressor.clone())?;
        c.push_f64("vertex_colors", vec![v, 3], self.vertex_colors.iter().flatten().copied().collect())?;
        c.push("parent", vec![self.n_joints], ArrayData::I64(parent))?;
        c.push_f64("canonical_pose", vec![3 * self.n_joints], self.canonical_pose.clone())?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != "morphable_template" {
            return Err(Error::Format(format!("expected morphable_template, got '{}'", c.kind)));
        }
        let n_expr = c.meta["n_expr"]
            .as_u64()
            .ok_or_else(|| Error::Format("meta.n_expr missing".into()))? as usize;
        let (_, verts) = c.f64s("vertices")?;
        let (_, faces) = c.u32s("faces")?;
        let (_, colors) = c.f64s("vertex_colors")?;
        let (_, parent) = c.i64s("parent")?;
        Self::new(
            verts.chunks_exact(3).map(|p| Vector3::new(p[0], p[1], p[2])).collect(),
            faces.chunks_exact(3).map(|f| [f[0], f[1], f[2]]).collect(),
            c.f64s("skin_weights")?.1.to_vec(),
            c.f64s("expr_basis")?.1.to_vec(),
            c.f64s("pose_basis")?.1.to_vec(),
            c.f64s("joint_regressor")?.1.to_vec(),
            colors.chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect(),
            parent.iter().map(|&p| if p < 0 { None } else { Some(p as usize) }).collect(),
            c.f64s("canonical_pose")?.1.to_vec(),
            n_expr,
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }

    /// SHA-256 of the serialized container.
    pub fn content_hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_container()?.to_bytes()?)))
    }

    // ---- linear model ----

    /// Joint positions regressed from the expression-corrected template.
    pub fn compute_joints(&self, psi: &[f64]) -> Result<Vec<Vector3<f64>>> {
        let offsets = expression_offset(psi, &self.expr_basis, self.n_expr)?;
        let shaped: Vec<Vector3<f64>> = self.vertices.iter().zip(&offsets).map(|(v, o)| v + o).collect();
        Ok(self.regress(&shaped))
    }

    fn regress(&self, points: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
        let v = points.len();
        self.joint_regressor
            .chunks_exact(v.max(1))
            .map(|row| row.iter().zip(points).fold(Vector3::zeros(), |acc, (w, p)| acc + *w * p))
            .collect()
    }

    /// Bone transforms taking the canonical pose to `theta`, joints from `psi`.
    pub fn transforms(&self, theta: &[f64], psi: &[f64]) -> Result<(Vec<Vector3<f64>>, Vec<Rigid>)> {
        let joints = self.compute_joints(psi)?;
        let tf = kinematics::canonical_relative_transforms(theta, &self.canonical_pose, &joints, &self.parent)?;
        Ok((joints, tf))
    }

    /// Posed vertices `LBS(T + B_P + B_E, J(psi), theta, W)`; faces unchanged.
    pub fn mesh_pose(&self, theta: &[f64], psi: &[f64]) -> Result<Vec<Vector3<f64>>> {
        let (_, tf) = self.transforms(theta, psi)?;
        let expr = expression_offset(psi, &self.expr_basis, self.n_expr)?;
        let pose = pose_offset(theta, &self.canonical_pose, &self.pose_basis, self.n_joints)?;
        let shaped: Vec<Vector3<f64>> = self
            .vertices
            .iter()
            .zip(expr.iter().zip(&pose))
            .map(|(v, (e, p))| v + e + p)
            .collect();
        Ok(kinematics::lbs_apply(&shaped, &self.skin_weights, &tf))
    }
}

/// Contraction `sum_k coeffs[k] * basis_row[k]` of one point's `K x 3` row.
#[inline]
pub fn contract_row(coeffs: &[f64], row: &[f64]) -> Vector3<f64> {
    let mut out = Vector3::zeros();
    for (c, b) in coeffs.iter().zip(row.chunks_exact(3)) {
        out.x += c * b[0];
        out.y += c * b[1];
        out.z += c * b[2];
    }
    out
}

/// `B_E(psi)`: per-point `sum_e psi_e * E_e` for a `N x n_expr x 3` basis.
pub fn expression_offset(psi: &[f64], expr_basis: &[f64], n_expr: usize) -> Result<Vec<Vector3<f64>>> {
    if psi.len() != n_expr {
        return Err(Error::invalid(format!("psi: expected {n_expr} values, got {}", psi.len())));
    }
    if n_expr == 0 || expr_basis.len() % (n_expr * 3) != 0 {
        return Err(Error::invalid("expression basis shape"));
    }
    Ok(expr_basis.chunks_exact(n_expr * 3).map(|row| contract_row(psi, row)).collect())
}

/// `B_P(theta)`: per-point contraction of the pose feature with a
/// `N x (n_joints - 1) * 9 x 3` basis.
pub fn pose_offset(theta: &[f64], canonical: &[f64], pose_basis: &[f64], n_joints: usize) -> Result<Vec<Vector3<f64>>> {
    let feat = kinematics::pose_feature(theta, canonical, n_joints)?;
    let k = feat.len() * 3;
    if k == 0 {
        return Ok(Vec::new());
    }
    if pose_basis.len() % k != 0 {
        return Err(Error::invalid("pose basis shape"));
    }
    Ok(pose_basis.chunks_exact(k).map(|row| contract_row(&feat, row)).collect())
}

//! Skeletal kinematics: axis-angle rotations, rigid bone transforms and
//! linear blend skinning.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// Rigid (or, after blending, affine) transform `p -> rot * p + trans`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rigid {
    pub rot: Matrix3<f64>,
    pub trans: Vector3<f64>,
}

impl Rigid {
    pub fn identity() -> Self {
        Self {
            rot: Matrix3::identity(),
            trans: Vector3::zeros(),
        }
    }

    pub fn new(rot: Matrix3<f64>, trans: Vector3<f64>) -> Self {
        Self { rot, trans }
    }

    /// Rotation by `rot` about `pivot`.
    pub fn about(rot: Matrix3<f64>, pivot: &Vector3<f64>) -> Self {
        Self {
            rot,
            trans: pivot - rot * pivot,
        }
    }

    #[inline]
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rot * p + self.trans
    }

    /// `self ∘ other`
    pub fn compose(&self, other: &Rigid) -> Rigid {
        Rigid {
            rot: self.rot * other.rot,
            trans: self.rot * other.trans + self.trans,
        }
    }

    /// Inverse assuming `rot` is orthonormal.
    pub fn inverse(&self) -> Rigid {
        let rt = self.rot.transpose();
        Rigid {
            rot: rt,
            trans: -(rt * self.trans),
        }
    }

    pub fn to_homogeneous(&self) -> nalgebra::Matrix4<f64> {
        let mut m = nalgebra::Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rot);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.trans);
        m
    }
}

/// Rodrigues' formula.
pub fn axis_angle_to_matrix(aa: &Vector3<f64>) -> Matrix3<f64> {
    let angle = aa.norm();
    if angle < 1e-300 {
        return Matrix3::identity();
    }
    let k = aa / angle;
    let kx = Matrix3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
    Matrix3::identity() + kx * angle.sin() + kx * kx * (1.0 - angle.cos())
}

pub fn joint_rotation(theta: &[f64], joint: usize) -> Matrix3<f64> {
    axis_angle_to_matrix(&Vector3::new(
        theta[3 * joint],
        theta[3 * joint + 1],
        theta[3 * joint + 2],
    ))
}

/// Root-to-leaf processing order of a kinematic chain; rejects cycles,
/// out-of-range parents and chains without a root at index 0.
pub fn chain_order(parent: &[Option<usize>]) -> Result<Vec<usize>> {
    let n = parent.len();
    if n > 0 && parent[0].is_some() {
        return Err(Error::invalid("joint 0 must be the root (parent = none)"));
    }
    let mut depth = vec![0usize; n];
    for j in 0..n {
        let mut k = j;
        while let Some(p) = parent[k] {
            if p >= n {
                return Err(Error::invalid(format!("joint {k} has out-of-range parent {p}")));
            }
            depth[j] += 1;
            if depth[j] > n {
                return Err(Error::invalid(format!("cyclic parent array at joint {j}")));
            }
            k = p;
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&j| (depth[j], j));
    Ok(order)
}

/// World-space bone transforms for pose `theta`, relative to the zero-pose
/// rest configuration whose joints are `joints` (rest transform = identity).
pub fn bone_transforms(
    theta: &[f64],
    joints: &[Vector3<f64>],
    parent: &[Option<usize>],
) -> Result<Vec<Rigid>> {
    let n = joints.len();
    if parent.len() != n || theta.len() != 3 * n {
        return Err(Error::invalid(format!(
            "bone_transforms: {} joints, {} parents, theta length {} (expected {})",
            n,
            parent.len(),
            theta.len(),
            3 * n
        )));
    }
    let order = chain_order(parent)?;
    // global[j] maps joint-local coordinates (origin at the rest joint) to world.
    let mut global = vec![Rigid::identity(); n];
    for &j in &order {
        let local_trans = match parent[j] {
            None => joints[j],
            Some(p) => joints[j] - joints[p],
        };
        let local = Rigid::new(joint_rotation(theta, j), local_trans);
        global[j] = match parent[j] {
            None => local,
            Some(p) => global[p].compose(&local),
        };
    }
    Ok(global
        .iter()
        .zip(joints)
        .map(|(g, jnt)| Rigid::new(g.rot, g.trans - g.rot * jnt))
        .collect())
}

/// Bone transforms mapping the canonical pose `canonical` to `theta`:
/// `A_j = B_j(theta) * B_j(canonical)^-1`, identity at `theta == canonical`.
pub fn canonical_relative_transforms(
    theta: &[f64],
    canonical: &[f64],
    joints: &[Vector3<f64>],
    parent: &[Option<usize>],
) -> Result<Vec<Rigid>> {
    let posed = bone_transforms(theta, joints, parent)?;
    let rest = bone_transforms(canonical, joints, parent)?;
    // A bone whose whole chain sits at the canonical pose gets the exact
    // identity instead of B * B^-1 with rounding.
    let unchanged = |j: usize| theta[3 * j..3 * j + 3] == canonical[3 * j..3 * j + 3];
    Ok((0..joints.len())
        .map(|j| {
            let mut k = Some(j);
            while let Some(i) = k {
                if !unchanged(i) {
                    return posed[j].compose(&rest[j].inverse());
                }
                k = parent[i];
            }
            Rigid::identity()
        })
        .collect())
}

/// Linear blend skinning: `sum_j w_j * (T_j p)` per point. `weights` is a
/// row-major `points.len() x transforms.len()` matrix whose rows sum to one.
/// Evaluated as `p + sum_j w_j * (T_j p - p)`, so identity transforms return
/// the points bit for bit.
pub fn lbs_apply(points: &[Vector3<f64>], weights: &[f64], transforms: &[Rigid]) -> Vec<Vector3<f64>> {
    let nj = transforms.len();
    assert_eq!(weights.len(), points.len() * nj, "weights shape");
    points
        .iter()
        .zip(weights.chunks_exact(nj.max(1)))
        .map(|(p, w)| {
            let mut d = Vector3::zeros();
            for (wj, t) in w.iter().zip(transforms) {
                d += *wj * (t.apply(p) - p);
            }
            p + d
        })
        .collect()
}

#[inline]
pub fn blend_point(p: &Vector3<f64>, w: &[f64], transforms: &[Rigid]) -> Vector3<f64> {
    let mut out = Vector3::zeros();
    for (wj, t) in w.iter().zip(transforms) {
        out += *wj * t.apply(p);
    }
    out
}

/// `vec(R_j(theta)) - vec(R_j(canonical))` stacked over non-root joints
/// (row-major flattening, 9 values per joint).
pub fn pose_feature(theta: &[f64], canonical: &[f64], n_joints: usize) -> Result<Vec<f64>> {
    if theta.len() != 3 * n_joints || canonical.len() != 3 * n_joints {
        return Err(Error::invalid(format!(
            "pose vector length {} / {}, expected {}",
            theta.len(),
            canonical.len(),
            3 * n_joints
        )));
    }
    let mut out = Vec::with_capacity(9 * n_joints.saturating_sub(1));
    for j in 1..n_joints {
        let r = joint_rotation(theta, j);
        let r0 = joint_rotation(canonical, j);
        for row in 0..3 {
            for col in 0..3 {
                out.push(r[(row, col)] - r0[(row, col)]);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx_eq::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    mod approx_eq {
        pub fn close(a: f64, b: f64, tol: f64) -> bool {
            (a - b).abs() <= tol
        }
    }

    #[test]
    fn rodrigues_quarter_turn_about_z() {
        let r = axis_angle_to_matrix(&Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2));
        let p = r * Vector3::new(1.0, 0.0, 0.0);
        assert!((p - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-15);
        assert!((r.transpose() * r - Matrix3::identity()).norm() < 1e-15);
    }

    #[test]
    fn zero_pose_gives_identity_transforms() {
        let joints = vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(0.0, -0.3, 0.0),
            Vector3::new(0.0, -0.1, 0.1),
        ];
        let parent = [None, Some(0), Some(1)];
        let t = bone_transforms(&[0.0; 9], &joints, &parent).unwrap();
        for b in t {
            assert_eq!(b.rot, Matrix3::identity());
            assert_eq!(b.trans, Vector3::zeros());
        }
    }

    #[test]
    fn single_joint_rotation_about_pivot() {
        let o = Vector3::new(0.2, -0.4, 1.5);
        let theta = [0.0, 0.0, std::f64::consts::FRAC_PI_2];
        let t = bone_transforms(&theta, &[o], &[None]).unwrap();
        let p = t[0].apply(&(o + Vector3::new(1.0, 0.0, 0.0)));
        assert!((p - (o + Vector3::new(0.0, 1.0, 0.0))).norm() < 1e-15);
    }

    #[test]
    fn cyclic_and_rootless_chains_are_rejected() {
        let joints = vec![Vector3::zeros(); 3];
        assert!(bone_transforms(&[0.0; 9], &joints, &[None, Some(2), Some(1)]).is_err());
        assert!(bone_transforms(&[0.0; 9], &joints, &[Some(1), Some(0), None]).is_err());
        assert!(bone_transforms(&[0.0; 9], &joints, &[None, Some(7), Some(1)]).is_err());
        // parents listed after children are fine
        assert!(chain_order(&[None, Some(2), Some(0)]).is_ok());
    }

    /// Step-by-step homogeneous 4x4 composition.
    fn oracle_transforms(theta: &[f64], joints: &[Vector3<f64>], parent: &[Option<usize>]) -> Vec<nalgebra::Matrix4<f64>> {
        use nalgebra::Matrix4;
        let n = joints.len();
        let mut world: Vec<Matrix4<f64>> = vec![Matrix4::identity(); n];
        for j in 0..n {
            let r = axis_angle_to_matrix(&Vector3::new(theta[3 * j], theta[3 * j + 1], theta[3 * j + 2]));
            let mut local = Matrix4::identity();
            for a in 0..3 {
                for b in 0..3 {
                    local[(a, b)] = r[(a, b)];
                }
            }
            let off = match parent[j] {
                None => joints[j],
                Some(p) => joints[j] - joints[p],
            };
            local[(0, 3)] = off.x;
            local[(1, 3)] = off.y;
            local[(2, 3)] = off.z;
            world[j] = match parent[j] {
                None => local,
                Some(p) => world[p] * local,
            };
        }
        (0..n)
            .map(|j| {
                let mut unrest = Matrix4::identity();
                unrest[(0, 3)] = -joints[j].x;
                unrest[(1, 3)] = -joints[j].y;
                unrest[(2, 3)] = -joints[j].z;
                world[j] * unrest
            })
            .collect()
    }

    #[test]
    fn three_joint_chain_matches_matrix_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let joints: Vec<_> = (0..3)
                .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect();
            let theta: Vec<f64> = (0..9).map(|_| rng.random_range(-0.3..0.3)).collect();
            let parent = [None, Some(0), Some(1)];
            let ours = bone_transforms(&theta, &joints, &parent).unwrap();
            let oracle = oracle_transforms(&theta, &joints, &parent);
            for (a, b) in ours.iter().zip(&oracle) {
                assert!((a.to_homogeneous() - b).abs().max() < 1e-12);
            }
        }
    }

    #[test]
    fn lbs_simple_cases() {
        let p = vec![Vector3::new(0.3, -0.2, 0.9)];
        let t1 = Vector3::new(1.0, 2.0, 3.0);
        let t2 = Vector3::new(-1.0, 0.5, 0.0);
        let ident = lbs_apply(&p, &[1.0], &[Rigid::identity()]);
        assert_eq!(ident[0], p[0]);
        let single = lbs_apply(&p, &[1.0], &[Rigid::new(Matrix3::identity(), t1)]);
        assert!((single[0] - (p[0] + t1)).norm() < 1e-15);
        let blend = lbs_apply(
            &p,
            &[0.5, 0.5],
            &[Rigid::new(Matrix3::identity(), t1), Rigid::new(Matrix3::identity(), t2)],
        );
        assert!((blend[0] - (p[0] + (t1 + t2) / 2.0)).norm() < 1e-15);
    }

    #[test]
    fn lbs_is_rigidly_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rand_rigid = |rng: &mut ChaCha8Rng| {
            Rigid::new(
                axis_angle_to_matrix(&Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))),
                Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
            )
        };
        let transforms: Vec<_> = (0..4).map(|_| rand_rigid(&mut rng)).collect();
        let g = rand_rigid(&mut rng);
        let points: Vec<_> = (0..50)
            .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let mut weights = Vec::new();
        for _ in 0..50 {
            let w: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..1.0)).collect();
            let s: f64 = w.iter().sum();
            weights.extend(w.iter().map(|x| x / s));
        }
        let moved: Vec<_> = transforms.iter().map(|t| g.compose(t)).collect();
        let a = lbs_apply(&points, &weights, &moved);
        let b = lbs_apply(&points, &weights, &transforms);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - g.apply(y)).norm() < 1e-10);
        }
        assert!(close(weights.iter().take(4).sum::<f64>(), 1.0, 1e-12));
    }

    #[test]
    fn pose_feature_zero_at_canonical() {
        let canonical = [0.0, 0.0, 0.0, 0.1, 0.0, 0.0, 0.2, 0.0, 0.0];
        let f = pose_feature(&canonical, &canonical, 3).unwrap();
        assert_eq!(f.len(), 18);
        assert!(f.iter().all(|x| *x == 0.0));
        // root rotation never enters the feature
        let mut t = canonical;
        t[0] = 0.7;
        assert!(pose_feature(&t, &canonical, 3).unwrap().iter().all(|x| *x == 0.0));
    }
}

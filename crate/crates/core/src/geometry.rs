//! Skeletons, poses, weak-perspective projection and pose error metrics.
//!
//! Depth convention used across the crate: the camera looks down +z, so a
//! larger z is farther away and "joint i is closer than j" means `z_i < z_j`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Kinematic tree over `N` joints.
///
/// `bone_lengths` is indexed like `joint_names` with the root entry omitted,
/// i.e. the k-th entry belongs to the k-th non-root joint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    pub id: String,
    pub joint_names: Vec<String>,
    pub parent: Vec<usize>,
    pub bone_lengths: Vec<f64>,
}

impl Skeleton {
    pub fn new(
        id: impl Into<String>,
        joint_names: Vec<String>,
        parent: Vec<usize>,
        bone_lengths: Vec<f64>,
    ) -> Result<Self> {
        let skeleton = Skeleton {
            id: id.into(),
            joint_names,
            parent,
            bone_lengths,
        };
        skeleton.validate()?;
        Ok(skeleton)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.joint_names.len();
        if n == 0 {
            return Err(Error::InvalidInput("skeleton has no joints".into()));
        }
        check_dim(n, self.parent.len())?;
        check_dim(n - 1, self.bone_lengths.len())?;
        let roots: Vec<usize> = (0..n).filter(|&j| self.parent[j] == j).collect();
        if roots.len() != 1 {
            return Err(Error::InvalidInput(format!(
                "skeleton must have exactly one root, found {}",
                roots.len()
            )));
        }
        for (j, &p) in self.parent.iter().enumerate() {
            if p >= n {
                return Err(Error::Index { index: p, len: n });
            }
            // Every joint must reach the root without revisiting a joint.
            let mut cur = j;
            for _ in 0..n {
                cur = self.parent[cur];
            }
            if self.parent[cur] != cur {
                return Err(Error::InvalidInput(format!("joint {j} is part of a cycle")));
            }
        }
        if let Some(bad) = self.bone_lengths.iter().find(|l| !(l.is_finite() && **l > 0.0)) {
            return Err(Error::InvalidInput(format!("bone length {bad} is not positive")));
        }
        Ok(())
    }

    pub fn joint_count(&self) -> usize {
        self.joint_names.len()
    }

    pub fn root(&self) -> usize {
        (0..self.parent.len())
            .find(|&j| self.parent[j] == j)
            .expect("validated skeleton has a root")
    }

    /// Parent/child pairs, one per bone, in joint index order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        (0..self.parent.len())
            .filter(|&j| self.parent[j] != j)
            .map(|j| (self.parent[j], j))
            .collect()
    }

    /// Length of the bone ending at `joint`, `None` for the root.
    pub fn bone_length(&self, joint: usize) -> Option<f64> {
        if self.parent[joint] == joint {
            return None;
        }
        let slot = if joint > self.root() { joint - 1 } else { joint };
        Some(self.bone_lengths[slot])
    }

    /// Joints in breadth-first order from the root. Parents always precede
    /// their children.
    /// The first `n` joints, when each of them has its parent among them.
    pub fn prefix(&self, n: usize) -> Result<Skeleton> {
        if n == 0 || n > self.joint_count() {
            return Err(Error::InvalidInput(format!(
                "prefix of {n} joints from a {}-joint skeleton",
                self.joint_count()
            )));
        }
        if let Some(j) = (0..n).find(|&j| self.parent[j] >= n) {
            return Err(Error::InvalidInput(format!("joint {j} has its parent outside the first {n}")));
        }
        let bones = (0..n).filter_map(|j| self.bone_length(j)).collect();
        Skeleton::new(
            format!("{}[..{n}]", self.id),
            self.joint_names[..n].to_vec(),
            self.parent[..n].to_vec(),
            bones,
        )
    }

    pub fn root_outward_order(&self) -> Vec<usize> {
        let mut order = vec![self.root()];
        let mut head = 0;
        while head < order.len() {
            let cur = order[head];
            head += 1;
            order.extend((0..self.parent.len()).filter(|&c| c != cur && self.parent[c] == cur));
        }
        order
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pose3D {
    pub joints: Vec<[f64; 3]>,
    #[serde(default)]
    pub skeleton: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pose2D {
    pub joints: Vec<[f64; 2]>,
    #[serde(default)]
    pub skeleton: String,
}

impl Pose3D {
    pub fn new(joints: Vec<[f64; 3]>, skeleton: impl Into<String>) -> Self {
        Pose3D {
            joints,
            skeleton: skeleton.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.joints.iter().flatten().all(|v| v.is_finite())
    }

    pub fn depths(&self) -> Vec<f64> {
        self.joints.iter().map(|p| p[2]).collect()
    }

    /// Copy translated so that `root` sits at the origin.
    pub fn root_relative(&self, root: usize) -> Pose3D {
        let r = self.joints[root];
        Pose3D {
            joints: self
                .joints
                .iter()
                .map(|p| [p[0] - r[0], p[1] - r[1], p[2] - r[2]])
                .collect(),
            skeleton: self.skeleton.clone(),
        }
    }

    pub fn distance(&self, a: usize, b: usize) -> f64 {
        let (p, q) = (self.joints[a], self.joints[b]);
        ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
    }
}

impl Pose2D {
    pub fn new(joints: Vec<[f64; 2]>, skeleton: impl Into<String>) -> Self {
        Pose2D {
            joints,
            skeleton: skeleton.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.joints.iter().flatten().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeakPerspectiveCamera {
    /// Pixels per millimetre.
    pub scale: f64,
    pub principal_offset: [f64; 2],
}

impl WeakPerspectiveCamera {
    pub fn new(scale: f64, principal_offset: [f64; 2]) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::InvalidInput(format!("camera scale must be > 0, got {scale}")));
        }
        Ok(WeakPerspectiveCamera {
            scale,
            principal_offset,
        })
    }

    pub fn identity() -> Self {
        WeakPerspectiveCamera {
            scale: 1.0,
            principal_offset: [0.0, 0.0],
        }
    }

    /// Inverse of the image-plane part of [`project`]: pixels back to
    /// millimetres, with depths supplied separately.
    pub fn back_project(&self, pose: &Pose2D, depths: &[f64]) -> Result<Pose3D> {
        check_dim(pose.len(), depths.len())?;
        let joints = pose
            .joints
            .iter()
            .zip(depths)
            .map(|(p, &z)| {
                [
                    (p[0] - self.principal_offset[0]) / self.scale,
                    (p[1] - self.principal_offset[1]) / self.scale,
                    z,
                ]
            })
            .collect();
        Ok(Pose3D::new(joints, pose.skeleton.clone()))
    }
}

pub fn project(pose: &Pose3D, cam: &WeakPerspectiveCamera) -> Result<Pose2D> {
    if !pose.is_finite() {
        return Err(Error::InvalidInput("pose has non-finite coordinates".into()));
    }
    if !(cam.scale.is_finite() && cam.scale > 0.0) {
        return Err(Error::InvalidInput(format!("camera scale must be > 0, got {}", cam.scale)));
    }
    let joints = pose
        .joints
        .iter()
        .map(|p| {
            [
                cam.scale * p[0] + cam.principal_offset[0],
                cam.scale * p[1] + cam.principal_offset[1],
            ]
        })
        .collect();
    Ok(Pose2D::new(joints, pose.skeleton.clone()))
}

/// Mean per-joint position error.
pub fn mpjpe(pred: &Pose3D, gt: &Pose3D) -> Result<f64> {
    check_dim(gt.len(), pred.len())?;
    if gt.is_empty() {
        return Err(Error::InvalidInput("empty pose".into()));
    }
    let total: f64 = pred
        .joints
        .iter()
        .zip(&gt.joints)
        .map(|(p, g)| ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2) + (p[2] - g[2]).powi(2)).sqrt())
        .sum();
    Ok(total / gt.len() as f64)
}

/// Which transform family [`procrustes_align_with`] may use.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlignMode {
    /// Rotation, translation and uniform scale.
    #[default]
    Similarity,
    /// Rotation and translation only.
    Rigid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub aligned: Pose3D,
    pub error: f64,
    pub rotation: Matrix3<f64>,
    pub scale: f64,
    pub translation: Vector3<f64>,
}

/// Similarity-aligns `pred` onto `gt` and reports the aligned MPJPE.
pub fn procrustes_align(pred: &Pose3D, gt: &Pose3D) -> Result<(Pose3D, f64)> {
    let a = procrustes_align_with(pred, gt, AlignMode::Similarity)?;
    Ok((a.aligned, a.error))
}

pub fn procrustes_align_with(pred: &Pose3D, gt: &Pose3D, mode: AlignMode) -> Result<Alignment> {
    check_dim(gt.len(), pred.len())?;
    let n = gt.len();
    if n < 3 {
        return Err(Error::Degenerate(format!("alignment needs at least 3 joints, got {n}")));
    }
    if !pred.is_finite() || !gt.is_finite() {
        return Err(Error::InvalidInput("pose has non-finite coordinates".into()));
    }
    let to_vec = |p: &[f64; 3]| Vector3::new(p[0], p[1], p[2]);
    let mu_pred = pred.joints.iter().map(to_vec).sum::<Vector3<f64>>() / n as f64;
    let mu_gt = gt.joints.iter().map(to_vec).sum::<Vector3<f64>>() / n as f64;
    let xs: Vec<Vector3<f64>> = pred.joints.iter().map(|p| to_vec(p) - mu_pred).collect();
    let ys: Vec<Vector3<f64>> = gt.joints.iter().map(|p| to_vec(p) - mu_gt).collect();

    let gt_scatter: Matrix3<f64> = ys.iter().map(|y| y * y.transpose()).sum();
    let gt_sv = gt_scatter.symmetric_eigenvalues();
    let mut sv: Vec<f64> = gt_sv.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    if sv[0] <= 0.0 || sv[1] <= 1e-12 * sv[0] {
        return Err(Error::Degenerate(
            "ground truth is collinear or coincident after centering".into(),
        ));
    }

    // Cross-covariance mapping pred directions onto gt directions.
    let cov: Matrix3<f64> = xs.iter().zip(&ys).map(|(x, y)| y * x.transpose()).sum();
    let svd = cov.svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        // Flip the weakest singular direction to stay a proper rotation.
        let weakest = (0..3)
            .min_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]))
            .unwrap();
        d[(weakest, weakest)] = -1.0;
    }
    let rotation = u * d * v_t;
    let pred_var: f64 = xs.iter().map(|x| x.norm_squared()).sum();
    let scale = match mode {
        AlignMode::Rigid => 1.0,
        AlignMode::Similarity if pred_var > 0.0 => {
            (svd.singular_values.component_mul(&d.diagonal())).sum() / pred_var
        }
        AlignMode::Similarity => 0.0,
    };
    let translation = mu_gt - scale * rotation * mu_pred;
    let aligned = Pose3D::new(
        pred.joints
            .iter()
            .map(|p| {
                let q = scale * rotation * to_vec(p) + translation;
                [q.x, q.y, q.z]
            })
            .collect(),
        pred.skeleton.clone(),
    );
    let error = mpjpe(&aligned, gt)?;
    Ok(Alignment {
        aligned,
        error,
        rotation,
        scale,
        translation,
    })
}

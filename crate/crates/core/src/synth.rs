//! Synthetic articulated poses and a simulated ordinal-depth annotator.
//!
//! Camera frame: x to the right, y down, z away from the camera. Poses are
//! generated root-relative (the neck sits at the origin).

use nalgebra::{Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::annotation::{check_transitivity, AnnotationSession, Answer};
use crate::error::{check_dim, Error, Result};
use crate::geometry::{Pose3D, Skeleton, WeakPerspectiveCamera};
use crate::supervision::{relation_between, relations_from_depths, Relation, DEFAULT_TIE_THRESHOLD_MM};

pub const SKELETON_ID: &str = "lsp14";

pub const JOINT_NAMES: [&str; 14] = [
    "neck",
    "head",
    "r_shoulder",
    "r_elbow",
    "r_wrist",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
    "r_hip",
    "r_knee",
    "r_ankle",
    "l_hip",
    "l_knee",
    "l_ankle",
];

const PARENTS: [usize; 14] = [0, 0, 0, 2, 3, 0, 5, 6, 0, 8, 9, 0, 11, 12];

// Adult proportions in mm, indexed by child joint (neck omitted).
const BONE_LENGTHS: [f64; 13] = [
    240.0, // head
    180.0, 290.0, 260.0, // right arm
    180.0, 290.0, 260.0, // left arm
    520.0, 440.0, 420.0, // right leg (neck to hip is the torso side)
    520.0, 440.0, 420.0, // left leg
];

/// The 14-joint skeleton used throughout: head, neck, and left/right
/// shoulder, elbow, wrist, hip, knee, ankle.
pub fn default_skeleton() -> Skeleton {
    Skeleton::new(
        SKELETON_ID,
        JOINT_NAMES.iter().map(|s| s.to_string()).collect(),
        PARENTS.to_vec(),
        BONE_LENGTHS.to_vec(),
    )
    .expect("built-in skeleton is valid")
}

/// Weak-perspective camera mapping a 1700 mm figure onto roughly 200 px.
pub fn default_camera() -> WeakPerspectiveCamera {
    WeakPerspectiveCamera {
        scale: 200.0 / 1700.0,
        principal_offset: [128.0, 128.0],
    }
}

type Dir = [f64; 3];

fn unit(v: Dir) -> Vector3<f64> {
    Vector3::new(v[0], v[1], v[2]).normalize()
}

/// Bone directions (child relative to parent) for the built-in templates,
/// in the order of [`JOINT_NAMES`] minus the root. The figure faces the
/// camera, so its right side is on the image left.
const TEMPLATE_DIRECTIONS: [(&str, [Dir; 13]); 5] = [
    (
        "standing",
        [
            [0.0, -1.0, -0.35],
            [-1.0, 0.05, 0.0],
            [-0.15, 1.0, 0.0],
            [-0.05, 1.0, -0.1],
            [1.0, 0.05, 0.0],
            [0.15, 1.0, 0.0],
            [0.05, 1.0, -0.1],
            [-0.2, 1.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 1.0, 0.05],
            [0.2, 1.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 1.0, 0.05],
        ],
    ),
    (
        "sitting",
        [
            [0.0, -1.0, -0.45],
            [-1.0, 0.05, 0.0],
            [-0.1, 1.0, 0.2],
            [0.0, 0.3, -1.0],
            [1.0, 0.05, 0.0],
            [0.1, 1.0, 0.2],
            [0.0, 0.3, -1.0],
            [-0.2, 1.0, 0.1],
            [-0.1, 0.05, -1.0],
            [0.0, 1.0, 0.1],
            [0.2, 1.0, 0.1],
            [0.1, 0.05, -1.0],
            [0.0, 1.0, 0.1],
        ],
    ),
    (
        "walking",
        [
            [0.0, -1.0, -0.4],
            [-1.0, 0.05, 0.0],
            [-0.1, 1.0, 0.45],
            [0.0, 0.8, 0.2],
            [1.0, 0.05, 0.0],
            [0.1, 1.0, -0.45],
            [0.0, 0.6, -0.6],
            [-0.2, 1.0, 0.0],
            [0.0, 1.0, -0.5],
            [0.0, 1.0, 0.1],
            [0.2, 1.0, 0.0],
            [0.0, 1.0, 0.45],
            [0.0, 1.0, 0.6],
        ],
    ),
    (
        "arms-raised",
        [
            [0.0, -1.0, -0.35],
            [-1.0, -0.1, 0.0],
            [-0.35, -1.0, 0.0],
            [-0.1, -1.0, 0.1],
            [1.0, -0.1, 0.0],
            [0.35, -1.0, 0.0],
            [0.1, -1.0, 0.1],
            [-0.2, 1.0, 0.0],
            [-0.05, 1.0, 0.0],
            [0.0, 1.0, 0.05],
            [0.2, 1.0, 0.0],
            [0.05, 1.0, 0.0],
            [0.0, 1.0, 0.05],
        ],
    ),
    (
        "reaching",
        [
            [0.0, -1.0, -0.5],
            [-1.0, 0.0, 0.0],
            [-0.1, 0.2, -1.0],
            [0.0, 0.0, -1.0],
            [1.0, 0.0, 0.0],
            [0.3, 1.0, 0.1],
            [0.1, 0.4, -1.0],
            [-0.2, 1.0, 0.15],
            [0.0, 1.0, -0.2],
            [0.0, 1.0, 0.2],
            [0.2, 1.0, 0.15],
            [0.0, 1.0, 0.0],
            [0.0, 1.0, 0.05],
        ],
    ),
];

/// Forward kinematics from per-joint bone offsets, visiting joints parents first.
fn assemble(skeleton: &Skeleton, offsets: &[Vector3<f64>]) -> Pose3D {
    let n = skeleton.joint_count();
    let mut joints = vec![[0.0; 3]; n];
    for j in skeleton.root_outward_order() {
        let p = skeleton.parent[j];
        if p == j {
            continue;
        }
        let o = offsets[j];
        joints[j] = [joints[p][0] + o.x, joints[p][1] + o.y, joints[p][2] + o.z];
    }
    Pose3D::new(joints, skeleton.id.clone())
}

/// Built-in templates posed on the default skeleton.
pub fn default_templates(skeleton: &Skeleton) -> Vec<Pose3D> {
    TEMPLATE_DIRECTIONS
        .iter()
        .map(|(_, dirs)| {
            let mut offsets = vec![Vector3::zeros(); skeleton.joint_count()];
            for j in 1..skeleton.joint_count() {
                offsets[j] = unit(dirs[j - 1]) * skeleton.bone_length(j).unwrap();
            }
            assemble(skeleton, &offsets)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseDistribution {
    pub skeleton: Skeleton,
    pub template_poses: Vec<Pose3D>,
    /// Standard deviation (degrees) of the random rotation applied at each
    /// joint; entry `k` perturbs the subtree hanging from joint `k`.
    pub perturbation_sigma_deg: Vec<f64>,
    /// Yaw interval (degrees) about the vertical axis.
    pub global_rotation_range: [f64; 2],
    /// Camera elevation interval (degrees); positive looks down on the
    /// figure, bringing upper joints closer.
    #[serde(default)]
    pub camera_pitch_range: [f64; 2],
}

impl PoseDistribution {
    pub fn validate(&self) -> Result<()> {
        self.skeleton.validate()?;
        let n = self.skeleton.joint_count();
        check_dim(n, self.perturbation_sigma_deg.len())?;
        if self.template_poses.is_empty() {
            return Err(Error::InvalidInput("pose distribution has no templates".into()));
        }
        for t in &self.template_poses {
            check_dim(n, t.len())?;
            for j in 0..n {
                if let Some(len) = self.skeleton.bone_length(j) {
                    let got = t.distance(j, self.skeleton.parent[j]);
                    if (got - len).abs() > 1e-6 * len {
                        return Err(Error::InvalidInput(format!(
                            "template bone {j} has length {got}, skeleton says {len}"
                        )));
                    }
                }
            }
        }
        if self.perturbation_sigma_deg.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::InvalidInput("negative angular jitter".into()));
        }
        for [lo, hi] in [self.global_rotation_range, self.camera_pitch_range] {
            if !(lo <= hi) {
                return Err(Error::InvalidInput("empty rotation range".into()));
            }
        }
        Ok(())
    }
}

impl Default for PoseDistribution {
    fn default() -> Self {
        let skeleton = default_skeleton();
        let template_poses = default_templates(&skeleton);
        let mut sigma = vec![10.0; skeleton.joint_count()];
        sigma[skeleton.root()] = 8.0;
        PoseDistribution {
            skeleton,
            template_poses,
            perturbation_sigma_deg: sigma,
            global_rotation_range: [-180.0, 180.0],
            camera_pitch_range: [10.0, 30.0],
        }
    }
}

/// Draws a pose: template choice, per-joint rotations accumulated down the
/// tree, then a global yaw.
pub fn sample_pose(dist: &PoseDistribution, seed: u64) -> Result<Pose3D> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_pose_with(dist, &mut rng)
}

pub fn sample_pose_with<R: Rng>(dist: &PoseDistribution, rng: &mut R) -> Result<Pose3D> {
    let skel = &dist.skeleton;
    let n = skel.joint_count();
    let template = &dist.template_poses[rng.random_range(0..dist.template_poses.len())];
    check_dim(n, template.len())?;

    let mut jitter = Vec::with_capacity(n);
    for &sigma in &dist.perturbation_sigma_deg {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let angle = if sigma > 0.0 {
            Normal::new(0.0, sigma.to_radians())
                .map_err(|e| Error::InvalidInput(e.to_string()))?
                .sample(rng)
        } else {
            0.0
        };
        jitter.push(match Unit::try_new(axis, 1e-9) {
            Some(axis) if angle != 0.0 => Rotation3::from_axis_angle(&axis, angle),
            _ => Rotation3::identity(),
        });
    }
    let mut angle = |[lo, hi]: [f64; 2]| if hi > lo { rng.random_range(lo..hi) } else { lo };
    let yaw = angle(dist.global_rotation_range);
    let pitch = angle(dist.camera_pitch_range);
    let global = Rotation3::from_axis_angle(&Vector3::x_axis(), pitch.to_radians())
        * Rotation3::from_axis_angle(&Vector3::y_axis(), yaw.to_radians());

    // A joint's rotation applies to the bone ending at it and everything below.
    let mut frames = vec![Rotation3::identity(); n];
    let mut offsets = vec![Vector3::zeros(); n];
    for j in skel.root_outward_order() {
        let p = skel.parent[j];
        if p == j {
            frames[j] = global * jitter[j];
            continue;
        }
        frames[j] = frames[p] * jitter[j];
        let t = template.joints[j];
        let q = template.joints[p];
        offsets[j] = frames[j] * Vector3::new(t[0] - q[0], t[1] - q[1], t[2] - q[2]);
    }
    let mut pose = assemble(skel, &offsets);
    pose.skeleton = template.skeleton.clone();
    Ok(pose)
}

/// `count` poses from consecutive seeds starting at `seed`.
pub fn sample_poses(dist: &PoseDistribution, seed: u64, count: usize) -> Result<Vec<Pose3D>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| sample_pose_with(dist, &mut rng)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulatedAnnotator {
    pub tie_threshold_mm: f64,
    /// Probability of swapping a strict answer.
    pub error_rate: f64,
    /// Probability of answering "ambiguous" regardless of the truth.
    pub ambiguous_rate: f64,
}

impl Default for SimulatedAnnotator {
    fn default() -> Self {
        SimulatedAnnotator::perfect()
    }
}

impl SimulatedAnnotator {
    pub fn perfect() -> Self {
        SimulatedAnnotator {
            tie_threshold_mm: DEFAULT_TIE_THRESHOLD_MM,
            error_rate: 0.0,
            ambiguous_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tie_threshold_mm >= 0.0) {
            return Err(Error::InvalidInput("tie threshold must be >= 0".into()));
        }
        if !(0.0..0.5).contains(&self.error_rate) {
            return Err(Error::InvalidInput(format!("error rate {} outside [0, 0.5)", self.error_rate)));
        }
        if !(0.0..1.0).contains(&self.ambiguous_rate) {
            return Err(Error::InvalidInput(format!(
                "ambiguous rate {} outside [0, 1)",
                self.ambiguous_rate
            )));
        }
        Ok(())
    }
}

/// SplitMix64 finaliser.
fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn query_seed(seed: u64, pose: &Pose3D, i: usize, j: usize) -> u64 {
    let mut h = mix64(seed);
    for v in pose.joints.iter().flatten() {
        h = mix64(h ^ v.to_bits());
    }
    h = mix64(h ^ i as u64);
    mix64(h ^ ((j as u64) << 32))
}

/// Answer to "is joint `i` closer than joint `j`?" for a known pose.
pub fn annotate(annotator: &SimulatedAnnotator, pose: &Pose3D, i: usize, j: usize, seed: u64) -> Result<Answer> {
    if i == j {
        return Err(Error::InvalidInput(format!("cannot compare joint {i} with itself")));
    }
    for k in [i, j] {
        if k >= pose.len() {
            return Err(Error::Index { index: k, len: pose.len() });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(query_seed(seed, pose, i, j));
    let flip = rng.random::<f64>() < annotator.error_rate;
    let ambiguous = rng.random::<f64>() < annotator.ambiguous_rate;
    if ambiguous {
        return Ok(Answer::Ambiguous);
    }
    let truth = relation_between(pose.joints[i][2], pose.joints[j][2], annotator.tie_threshold_mm);
    Ok(match (truth, flip) {
        (Relation::Same, _) => Answer::Same,
        (Relation::Closer, false) | (Relation::Farther, true) => Answer::Closer,
        (Relation::Farther, false) | (Relation::Closer, true) => Answer::Farther,
    })
}

/// Outcome of one simulated session in a cost study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostRecord {
    pub pose: usize,
    pub questions: usize,
    /// Strict ground-truth pairs at the annotator's tie threshold.
    pub strict_pairs: usize,
    /// Strict pairs reproduced with the same sign.
    pub correct: usize,
    /// Strict pairs reproduced with the opposite sign.
    pub inverted: usize,
    /// Every pair, ties included, matches the ground truth.
    pub exact: bool,
    /// The ground-truth relation is itself a preorder.
    pub transitive_truth: bool,
    pub exported_transitive: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostStudy {
    pub seed: u64,
    pub joints: usize,
    pub annotator: SimulatedAnnotator,
    pub shuffled_order: bool,
    pub records: Vec<CostRecord>,
}

impl CostStudy {
    pub fn mean_questions(&self) -> f64 {
        self.records.iter().map(|r| r.questions as f64).sum::<f64>() / self.records.len().max(1) as f64
    }

    pub fn median_questions(&self) -> f64 {
        let mut q: Vec<usize> = self.records.iter().map(|r| r.questions).collect();
        q.sort_unstable();
        match q.len() {
            0 => f64::NAN,
            n if n % 2 == 1 => q[n / 2] as f64,
            n => (q[n / 2 - 1] + q[n / 2]) as f64 / 2.0,
        }
    }

    pub fn max_questions(&self) -> usize {
        self.records.iter().map(|r| r.questions).max().unwrap_or(0)
    }

    /// Fraction of strict ground-truth pairs reproduced, pooled over poses.
    pub fn accuracy(&self) -> f64 {
        let strict: usize = self.records.iter().map(|r| r.strict_pairs).sum();
        let correct: usize = self.records.iter().map(|r| r.correct).sum();
        if strict == 0 {
            1.0
        } else {
            correct as f64 / strict as f64
        }
    }
}

/// Runs one simulated annotation session per sampled pose, restricted to
/// the first `joints` joints of the skeleton.
pub fn annotation_cost_study(
    dist: &PoseDistribution,
    annotator: &SimulatedAnnotator,
    joints: usize,
    poses: usize,
    seed: u64,
    shuffled_order: bool,
) -> Result<CostStudy> {
    annotator.validate()?;
    let skeleton = dist.skeleton.prefix(joints)?;
    let samples = sample_poses(dist, seed, poses)?;
    let mut records = Vec::with_capacity(poses);
    for (k, full) in samples.into_iter().enumerate() {
        let pose = Pose3D::new(full.joints[..joints].to_vec(), skeleton.id.clone());
        let query_seed = mix64(seed ^ mix64(k as u64));
        let order = if shuffled_order {
            crate::annotation::shuffled_order(joints, query_seed)
        } else {
            skeleton.root_outward_order()
        };
        let mut session = AnnotationSession::with_order(format!("pose-{k}"), order)?;
        session.drive(|i, j| annotate(annotator, &pose, i, j, query_seed))?;
        let got = session.relations()?;
        let truth = relations_from_depths(&pose.depths(), annotator.tie_threshold_mm)?;
        let (mut strict, mut correct, mut inverted, mut exact) = (0, 0, 0, true);
        for t in truth.pairs() {
            let g = got.get(t.i, t.j);
            exact &= g == Some(t.r);
            if t.r != Relation::Same {
                strict += 1;
                match g {
                    Some(r) if r == t.r => correct += 1,
                    Some(r) if r == t.r.reversed() => inverted += 1,
                    _ => {}
                }
            }
        }
        records.push(CostRecord {
            pose: k,
            questions: session.question_count,
            strict_pairs: strict,
            correct,
            inverted,
            exact,
            transitive_truth: check_transitivity(&truth).is_ok(),
            exported_transitive: check_transitivity(&got).is_ok(),
        });
    }
    Ok(CostStudy {
        seed,
        joints,
        annotator: *annotator,
        shuffled_order,
        records,
    })
}

//! Lifting 2D keypoints plus ordinal-quality depths to a metric 3D pose.
//!
//! The network sees normalised keypoints (centred, divided by the bounding
//! box diagonal) and per-sample standardised depths, and predicts a
//! root-relative pose in mm, itself standardised by a mean pose and a scalar
//! spread stored alongside the weights.

use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::geometry::{mpjpe, procrustes_align, project, Pose2D, Pose3D, WeakPerspectiveCamera};
use crate::network::{
    lifting_network_spec, load_checkpoint, rmsprop_step, save_checkpoint, CheckpointHeader, NetworkParams,
    OptimizerState, RmsPropConfig,
};
use crate::supervision::{relation_between, Relation, DEFAULT_TIE_THRESHOLD_MM};

const MIN_SPREAD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Interval for the global depth scale `a`.
    pub global_scale_range: [f64; 2],
    /// Interval for the global offset `b`, as a fraction of the pose's depth range.
    pub global_offset_range: [f64; 2],
    /// Jitter sigma as a fraction of the pose's depth range.
    pub jitter_sigma_frac: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            global_scale_range: [0.8, 1.2],
            global_offset_range: [-0.2, 0.2],
            jitter_sigma_frac: 0.1,
        }
    }
}

impl NoiseConfig {
    pub fn identity() -> Self {
        NoiseConfig {
            global_scale_range: [1.0, 1.0],
            global_offset_range: [0.0, 0.0],
            jitter_sigma_frac: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [a0, a1] = self.global_scale_range;
        let [b0, b1] = self.global_offset_range;
        if !(a0 > 0.0 && a0 <= a1 && a1.is_finite()) {
            return Err(Error::InvalidInput(format!("scale range [{a0}, {a1}] must be positive and nonempty")));
        }
        if !(b0 <= b1 && b0.is_finite() && b1.is_finite()) {
            return Err(Error::InvalidInput(format!("offset range [{b0}, {b1}] is empty")));
        }
        if !(0.0..1.0).contains(&self.jitter_sigma_frac) {
            return Err(Error::InvalidInput(format!(
                "jitter fraction {} outside [0, 1)",
                self.jitter_sigma_frac
            )));
        }
        Ok(())
    }
}

fn draw(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

fn depth_range(z: &[f64]) -> f64 {
    let (lo, hi) = z
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if z.is_empty() {
        0.0
    } else {
        hi - lo
    }
}

/// `a z + b + eta`: a global affine distortion plus i.i.d. Gaussian jitter.
pub fn simulate_noisy_depths(gt_depths: &[f64], cfg: &NoiseConfig, seed: u64) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let range = depth_range(gt_depths);
    let a = draw(&mut rng, cfg.global_scale_range);
    let b = draw(&mut rng, cfg.global_offset_range) * range;
    let sigma = cfg.jitter_sigma_frac * range;
    let jitter = if sigma > 0.0 {
        Some(Normal::new(0.0, sigma).map_err(|e| Error::InvalidInput(e.to_string()))?)
    } else {
        None
    };
    Ok(gt_depths
        .iter()
        .map(|z| a * z + b + jitter.map_or(0.0, |d| d.sample(&mut rng)))
        .collect())
}

/// Strict ground-truth pairs (`|dz| >= threshold`) and how many of them keep
/// their order in `noisy`.
pub fn preserved_relations(gt: &[f64], noisy: &[f64], threshold_mm: f64) -> Result<(usize, usize)> {
    check_dim(gt.len(), noisy.len())?;
    let (mut kept, mut strict) = (0, 0);
    for i in 0..gt.len() {
        for j in i + 1..gt.len() {
            let r = relation_between(gt[i], gt[j], threshold_mm);
            if r == Relation::Same {
                continue;
            }
            strict += 1;
            if relation_between(noisy[i], noisy[j], 0.0) == r {
                kept += 1;
            }
        }
    }
    Ok((kept, strict))
}

/// Pooled fraction of strict relations preserved over a set of poses, one
/// noise draw per pose with seed `seed + k`.
pub fn preserved_fraction(poses: &[Pose3D], cfg: &NoiseConfig, threshold_mm: f64, seed: u64) -> Result<f64> {
    let (mut kept, mut strict) = (0, 0);
    for (k, pose) in poses.iter().enumerate() {
        let z = pose.depths();
        let noisy = simulate_noisy_depths(&z, cfg, seed.wrapping_add(k as u64))?;
        let (a, b) = preserved_relations(&z, &noisy, threshold_mm)?;
        kept += a;
        strict += b;
    }
    if strict == 0 {
        return Err(Error::Data("no strict relations in the sample".into()));
    }
    Ok(kept as f64 / strict as f64)
}

/// `sum_n |S_n - S^_n|^2` with gradient `2 (pred - gt)`.
pub fn l3d_loss(pred: &Pose3D, gt: &Pose3D) -> Result<(f64, Vec<[f64; 3]>)> {
    check_dim(gt.len(), pred.len())?;
    let mut loss = 0.0;
    let grad = pred
        .joints
        .iter()
        .zip(&gt.joints)
        .map(|(p, g)| {
            let d = [p[0] - g[0], p[1] - g[1], p[2] - g[2]];
            loss += d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
            [2.0 * d[0], 2.0 * d[1], 2.0 * d[2]]
        })
        .collect();
    Ok((loss, grad))
}

/// Centre and spread used to normalise 2D keypoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeypointNorm {
    pub center: [f64; 2],
    pub scale: f64,
}

impl KeypointNorm {
    /// Mean of the keypoints and their bounding-box diagonal.
    pub fn fit(pose: &Pose2D) -> Result<Self> {
        if pose.is_empty() || !pose.is_finite() {
            return Err(Error::InvalidInput("keypoints must be finite and non-empty".into()));
        }
        let n = pose.len() as f64;
        let mut center = [0.0; 2];
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in &pose.joints {
            for a in 0..2 {
                center[a] += p[a] / n;
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let diag = (hi[0] - lo[0]).hypot(hi[1] - lo[1]);
        Ok(KeypointNorm {
            center,
            scale: if diag > MIN_SPREAD { diag } else { 1.0 },
        })
    }

    pub fn apply(&self, pose: &Pose2D) -> Vec<[f64; 2]> {
        pose.joints
            .iter()
            .map(|p| [(p[0] - self.center[0]) / self.scale, (p[1] - self.center[1]) / self.scale])
            .collect()
    }

    pub fn invert(&self, normalized: &[[f64; 2]], skeleton: &str) -> Pose2D {
        Pose2D::new(
            normalized
                .iter()
                .map(|p| [p[0] * self.scale + self.center[0], p[1] * self.scale + self.center[1]])
                .collect(),
            skeleton,
        )
    }
}

/// Per-sample depth standardisation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthNorm {
    pub mean: f64,
    pub std: f64,
}

impl DepthNorm {
    pub fn fit(z: &[f64]) -> Result<Self> {
        if z.is_empty() || z.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("depths must be finite and non-empty".into()));
        }
        let n = z.len() as f64;
        let mean = z.iter().sum::<f64>() / n;
        let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        Ok(DepthNorm {
            mean,
            std: if std > MIN_SPREAD { std } else { 1.0 },
        })
    }

    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        z.iter().map(|v| (v - self.mean) / self.std).collect()
    }

    pub fn invert(&self, z: &[f64]) -> Vec<f64> {
        z.iter().map(|v| v * self.std + self.mean).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconInput {
    pub keypoints: Vec<[f64; 2]>,
    pub depths: Vec<f64>,
    pub keypoints_normalized: bool,
    pub depths_normalized: bool,
}

impl ReconInput {
    /// Normalises raw pixel keypoints and arbitrary-unit depths.
    pub fn from_raw(keypoints: &Pose2D, depths: &[f64]) -> Result<Self> {
        check_dim(keypoints.len(), depths.len())?;
        Ok(ReconInput {
            keypoints: KeypointNorm::fit(keypoints)?.apply(keypoints),
            depths: DepthNorm::fit(depths)?.apply(depths),
            keypoints_normalized: true,
            depths_normalized: true,
        })
    }

    pub fn joint_count(&self) -> usize {
        self.keypoints.len()
    }

    /// Network input layout: all `x, y` pairs, then all depths.
    pub fn features(&self) -> Vec<f64> {
        let mut f: Vec<f64> = self.keypoints.iter().flatten().copied().collect();
        f.extend_from_slice(&self.depths);
        f
    }
}

/// Standardisation of root-relative output poses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputNorm {
    pub mean_pose: Vec<[f64; 3]>,
    pub scale: f64,
}

impl OutputNorm {
    pub fn fit(poses: &[Pose3D], root: usize) -> Result<Self> {
        let first = poses.first().ok_or_else(|| Error::Data("no training poses".into()))?;
        let n = first.len();
        let mut mean = vec![[0.0; 3]; n];
        for p in poses {
            check_dim(n, p.len())?;
            for (m, j) in mean.iter_mut().zip(&p.root_relative(root).joints) {
                for a in 0..3 {
                    m[a] += j[a] / poses.len() as f64;
                }
            }
        }
        let mut var = 0.0;
        for p in poses {
            for (m, j) in mean.iter().zip(&p.root_relative(root).joints) {
                var += (0..3).map(|a| (j[a] - m[a]).powi(2)).sum::<f64>();
            }
        }
        let std = (var / (poses.len() * n * 3) as f64).sqrt();
        Ok(OutputNorm {
            mean_pose: mean,
            scale: if std > MIN_SPREAD { std } else { 1.0 },
        })
    }

    pub fn apply(&self, pose: &Pose3D) -> Vec<f64> {
        pose.joints
            .iter()
            .zip(&self.mean_pose)
            .flat_map(|(j, m)| (0..3).map(move |a| (j[a] - m[a]) / self.scale))
            .collect()
    }

    pub fn invert(&self, y: &[f64], skeleton: &str) -> Pose3D {
        Pose3D::new(
            self.mean_pose
                .iter()
                .enumerate()
                .map(|(k, m)| {
                    [
                        m[0] + self.scale * y[3 * k],
                        m[1] + self.scale * y[3 * k + 1],
                        m[2] + self.scale * y[3 * k + 2],
                    ]
                })
                .collect(),
            skeleton,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconMeta {
    pub kind: String,
    pub root: usize,
    pub skeleton: String,
    pub output: OutputNorm,
}

pub const RECON_KIND: &str = "reconstruction";

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionModel {
    pub params: NetworkParams,
    pub meta: ReconMeta,
}

impl ReconstructionModel {
    /// Untrained model around given output statistics.
    pub fn new(params: NetworkParams, root: usize, skeleton: impl Into<String>, output: OutputNorm) -> Result<Self> {
        let n = output.mean_pose.len();
        check_dim(3 * n, params.input_dim())?;
        check_dim(3 * n, params.output_dim())?;
        Ok(ReconstructionModel {
            params,
            meta: ReconMeta {
                kind: RECON_KIND.into(),
                root,
                skeleton: skeleton.into(),
                output,
            },
        })
    }

    pub fn joint_count(&self) -> usize {
        self.meta.output.mean_pose.len()
    }

    pub fn save(&self, path: &Path, step: u64) -> Result<()> {
        save_checkpoint(path, &self.params, step, serde_json::to_value(&self.meta)?)
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointHeader)> {
        let (params, header) = load_checkpoint(path)?;
        let meta: ReconMeta = serde_json::from_value(header.extra.clone())
            .map_err(|e| Error::Format(format!("not a reconstruction checkpoint: {e}")))?;
        if meta.kind != RECON_KIND {
            return Err(Error::Format(format!("checkpoint kind {:?} is not {RECON_KIND:?}", meta.kind)));
        }
        let model = Self::new(params, meta.root, meta.skeleton.clone(), meta.output.clone())
            .map_err(|e| Error::Format(format!("checkpoint does not match its metadata: {e}")))?;
        Ok((model, header))
    }
}

/// Forward pass on a normalised input; returns a root-relative pose in mm.
pub fn reconstruct(model: &ReconstructionModel, input: &ReconInput) -> Result<Pose3D> {
    if !input.keypoints_normalized || !input.depths_normalized {
        return Err(Error::Contract("reconstruction input must be normalised".into()));
    }
    check_dim(model.joint_count(), input.joint_count())?;
    check_dim(input.keypoints.len(), input.depths.len())?;
    let features = input.features();
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite reconstruction input".into()));
    }
    let y = model.params.predict(&features)?;
    Ok(model.meta.output.invert(&y, &model.meta.skeleton))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconHyper {
    pub hidden: usize,
    pub blocks: usize,
    pub dropout: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub optimizer: RmsPropConfig,
    pub seed: u64,
    pub log_every: usize,
    /// Pixel noise added to projected keypoints during training.
    pub keypoint_noise_px: f64,
    /// Learning rate at the last iteration relative to the first; the rate
    /// decays exponentially in between.
    pub final_lr_fraction: f64,
}

impl Default for ReconHyper {
    fn default() -> Self {
        ReconHyper {
            hidden: 128,
            blocks: 2,
            dropout: 0.0,
            batch_size: 64,
            iterations: 20_000,
            optimizer: RmsPropConfig {
                learning_rate: 1e-3,
                ..RmsPropConfig::default()
            },
            seed: 0,
            log_every: 100,
            keypoint_noise_px: 0.0,
            final_lr_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedReconstruction {
    pub model: ReconstructionModel,
    /// `(iteration, mean batch loss)` every `log_every` iterations, plus the
    /// loss before the first update.
    pub history: Vec<(usize, f64)>,
}

/// Builds one training example: noisy projected keypoints and noisy depths.
pub fn make_recon_input(
    pose: &Pose3D,
    cam: &WeakPerspectiveCamera,
    cfg: &NoiseConfig,
    keypoint_noise_px: f64,
    seed: u64,
) -> Result<ReconInput> {
    let mut kp = project(pose, cam)?;
    if keypoint_noise_px > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F2D);
        let d = Normal::new(0.0, keypoint_noise_px).map_err(|e| Error::InvalidInput(e.to_string()))?;
        kp.joints.iter_mut().flatten().for_each(|v| *v += d.sample(&mut rng));
    }
    let noisy = simulate_noisy_depths(&pose.depths(), cfg, seed)?;
    ReconInput::from_raw(&kp, &noisy)
}

/// Mean over the batch of the output-space L3D loss; gradient already
/// divided by the batch size.
fn batch_l3d(pred: &Array2<f64>, target: &Array2<f64>) -> (f64, Array2<f64>) {
    let b = pred.nrows() as f64;
    let diff = pred - target;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / b;
    (loss, diff * (2.0 / b))
}

/// `lr * fraction^(step / (iterations - 1))`.
pub fn decayed_rate(lr: f64, final_fraction: f64, step: usize, iterations: usize) -> f64 {
    if final_fraction == 1.0 || iterations < 2 {
        return lr;
    }
    lr * final_fraction.powf(step as f64 / (iterations - 1) as f64)
}

/// Trains the lifting network on projections of `mocap` paired with noisy
/// depths, drawing fresh noise for every example.
pub fn train_reconstruction(
    mocap: &[Pose3D],
    root: usize,
    cam: &WeakPerspectiveCamera,
    cfg: &NoiseConfig,
    hyper: &ReconHyper,
) -> Result<TrainedReconstruction> {
    cfg.validate()?;
    if hyper.batch_size == 0 || hyper.iterations == 0 {
        return Err(Error::InvalidInput("batch size and iteration budget must be positive".into()));
    }
    let first = mocap.first().ok_or_else(|| Error::Data("no training poses".into()))?;
    let n = first.len();
    let skeleton = first.skeleton.clone();
    let output = OutputNorm::fit(mocap, root)?;
    let targets: Vec<Vec<f64>> = mocap.iter().map(|p| output.apply(&p.root_relative(root))).collect();
    let specs = lifting_network_spec(3 * n, hyper.hidden, 3 * n, hyper.blocks, hyper.dropout);
    let params = NetworkParams::init(&specs, hyper.seed)?;
    let mut model = ReconstructionModel::new(params, root, skeleton, output)?;
    let mut opt = OptimizerState::new(&model.params, hyper.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(hyper.seed.wrapping_add(1));
    let mut history = Vec::new();
    let bs = hyper.batch_size;

    let base_lr = hyper.optimizer.learning_rate;
    for step in 0..hyper.iterations {
        opt.config.learning_rate = decayed_rate(base_lr, hyper.final_lr_fraction, step, hyper.iterations);
        let mut x = Array2::zeros((bs, 3 * n));
        let mut t = Array2::zeros((bs, 3 * n));
        for r in 0..bs {
            let k = rng.random_range(0..mocap.len());
            let input = make_recon_input(&mocap[k], cam, cfg, hyper.keypoint_noise_px, rng.random())?;
            x.row_mut(r).assign(&ndarray::ArrayView1::from(&input.features()));
            t.row_mut(r).assign(&ndarray::ArrayView1::from(&targets[k]));
        }
        let drop = (hyper.dropout > 0.0).then_some(&mut dropout_rng);
        let (pred, cache) = model.params.forward(&x, drop)?;
        let (loss, grad) = batch_l3d(&pred, &t);
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step,
                reason: format!("reconstruction loss {loss}"),
            });
        }
        if step == 0 || (step + 1) % hyper.log_every.max(1) == 0 {
            history.push((step, loss));
        }
        let (grads, _) = model.params.backward(&cache, &grad)?;
        rmsprop_step(&mut opt, &mut model.params, &grads).map_err(|e| match e {
            Error::Divergence { reason, .. } => Error::Divergence { step, reason },
            other => other,
        })?;
    }
    Ok(TrainedReconstruction { model, history })
}

/// Input-as-answer baseline: keypoints back-projected with the true camera
/// scale and the noisy depths used directly, made root-relative.
pub fn baseline_pose(keypoints: &Pose2D, noisy_depths: &[f64], cam: &WeakPerspectiveCamera, root: usize) -> Result<Pose3D> {
    Ok(cam.back_project(keypoints, noisy_depths)?.root_relative(root))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconEval {
    pub mpjpe: f64,
    pub procrustes_error: f64,
    pub baseline_mpjpe: f64,
    pub baseline_procrustes_error: f64,
    pub preserved_fraction: f64,
    pub samples: usize,
}

/// Held-out evaluation with one noise draw per pose (seed `seed + k`).
pub fn evaluate_reconstruction(
    model: &ReconstructionModel,
    poses: &[Pose3D],
    cam: &WeakPerspectiveCamera,
    cfg: &NoiseConfig,
    seed: u64,
) -> Result<ReconEval> {
    if poses.is_empty() {
        return Err(Error::Data("no evaluation poses".into()));
    }
    let root = model.meta.root;
    let mut acc = [0.0; 4];
    let (mut kept, mut strict) = (0, 0);
    for (k, pose) in poses.iter().enumerate() {
        let gt = pose.root_relative(root);
        let kp = project(pose, cam)?;
        let z = pose.depths();
        let noisy = simulate_noisy_depths(&z, cfg, seed.wrapping_add(k as u64))?;
        let (a, b) = preserved_relations(&z, &noisy, DEFAULT_TIE_THRESHOLD_MM)?;
        kept += a;
        strict += b;
        let pred = reconstruct(model, &ReconInput::from_raw(&kp, &noisy)?)?;
        let base = baseline_pose(&kp, &noisy, cam, root)?;
        acc[0] += mpjpe(&pred, &gt)?;
        acc[1] += procrustes_align(&pred, &gt)?.1;
        acc[2] += mpjpe(&base, &gt)?;
        acc[3] += procrustes_align(&base, &gt)?.1;
    }
    let m = poses.len() as f64;
    Ok(ReconEval {
        mpjpe: acc[0] / m,
        procrustes_error: acc[1] / m,
        baseline_mpjpe: acc[2] / m,
        baseline_procrustes_error: acc[3] / m,
        preserved_fraction: if strict > 0 { kept as f64 / strict as f64 } else { 1.0 },
        samples: poses.len(),
    })
}

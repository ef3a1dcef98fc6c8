//! Toy-scale experiments: ordinal versus metric supervision, mixed
//! supervision, and the lifting stage appended to a weakly supervised
//! network.
//!
//! All networks see noisy 2D keypoints normalised by [`KeypointNorm`]. Their
//! 3D outputs live in the same normalised frame: `x, y` as normalised image
//! coordinates and `z = s (Z - mean Z) / d`, with `s` the camera scale and
//! `d` the keypoint bounding-box diagonal, so that `mm = value * d / s`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::annotation::AnnotationSession;
use crate::error::{check_dim, Error, Result};
use crate::geometry::{mpjpe, procrustes_align, project, Pose2D, Pose3D, WeakPerspectiveCamera};
use crate::network::{
    lifting_network_spec, load_checkpoint, rmsprop_step, save_checkpoint, CheckpointHeader, NetworkParams,
    OptimizerState, RmsPropConfig,
};
use crate::reconstruction::{
    decayed_rate, l3d_loss, reconstruct, train_reconstruction, KeypointNorm, NoiseConfig, ReconHyper, ReconInput,
    ReconstructionModel,
};
use crate::supervision::{
    combined_weak_loss, rank_loss, relation_between, relations_from_depths, Relation, RelationSet,
    DEFAULT_KEYPOINT_WEIGHT, DEFAULT_TIE_THRESHOLD_MM,
};
use crate::synth::{annotate, default_camera, sample_poses, PoseDistribution, SimulatedAnnotator};
use crate::volumetric::{
    bin_centers, marginal_2d, soft_argmax_2d, soft_depths, volume_softmax, volumetric_full_loss,
    volumetric_weak_loss, GridShape, HeatmapTarget, VolumeScores,
};

/// Half-width of the normalised region covered by volumetric grids.
pub const GRID_EXTENT: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    DepthOrdinal,
    DepthRegression,
    CoordsWeak,
    CoordsFull,
    VolumeWeak,
    VolumeFull,
    Mixed,
    EndToEnd,
}

impl Task {
    pub const ALL: [Task; 8] = [
        Task::DepthOrdinal,
        Task::DepthRegression,
        Task::CoordsWeak,
        Task::CoordsFull,
        Task::VolumeWeak,
        Task::VolumeFull,
        Task::Mixed,
        Task::EndToEnd,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::DepthOrdinal => "depth-ordinal",
            Task::DepthRegression => "depth-regression",
            Task::CoordsWeak => "coords-weak",
            Task::CoordsFull => "coords-full",
            Task::VolumeWeak => "volume-weak",
            Task::VolumeFull => "volume-full",
            Task::Mixed => "mixed",
            Task::EndToEnd => "end-to-end",
        }
    }

    /// Whether any training signal carries metric depth.
    pub fn metric_supervised(self) -> bool {
        matches!(
            self,
            Task::DepthRegression | Task::CoordsFull | Task::VolumeFull | Task::Mixed | Task::EndToEnd
        )
    }

    /// Task actually optimised by the primary network.
    fn network_task(self) -> Task {
        match self {
            Task::EndToEnd => Task::Mixed,
            t => t,
        }
    }

    fn head(self, joints: usize, grid: usize) -> Result<Head> {
        Ok(match self.network_task() {
            Task::DepthOrdinal | Task::DepthRegression => Head::Depth { joints },
            Task::VolumeWeak | Task::VolumeFull | Task::Mixed => Head::Volume {
                shape: GridShape::new(grid, grid, grid, joints)?,
                axis: bin_centers(-GRID_EXTENT, GRID_EXTENT, grid),
            },
            _ => Head::Coords { joints },
        })
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown task {s:?}")))
    }
}

/// Where training relations come from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RelationSource {
    /// All pairs from ground-truth depths at the tie threshold.
    Truth,
    /// Relations exported from a simulated annotation session per pose.
    Annotator { annotator: SimulatedAnnotator },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub task: Task,
    pub seed: u64,
    pub dataset_size: usize,
    pub heldout_fraction: f64,
    pub hidden: usize,
    pub blocks: usize,
    pub dropout: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub optimizer: RmsPropConfig,
    pub final_lr_fraction: f64,
    pub tie_threshold_mm: f64,
    pub lambda: f64,
    pub keypoint_noise_px: f64,
    /// Cells per axis of volumetric grids.
    pub grid: usize,
    /// Share of training samples carrying full 3D supervision (mixed task).
    pub full_fraction: f64,
    pub relation_source: RelationSource,
    pub poses: PoseSampling,
    pub noise: NoiseConfig,
    pub recon: ReconHyper,
    pub log_every: usize,
}

/// Overrides applied to the built-in pose distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoseSampling {
    pub joint_sigma_deg: f64,
    pub root_sigma_deg: f64,
    pub yaw_range_deg: [f64; 2],
    pub camera_pitch_deg: [f64; 2],
}

impl Default for PoseSampling {
    fn default() -> Self {
        let d = PoseDistribution::default();
        PoseSampling {
            joint_sigma_deg: d.perturbation_sigma_deg[1],
            root_sigma_deg: d.perturbation_sigma_deg[d.skeleton.root()],
            yaw_range_deg: d.global_rotation_range,
            camera_pitch_deg: d.camera_pitch_range,
        }
    }
}

impl PoseSampling {
    pub fn distribution(&self) -> Result<PoseDistribution> {
        let mut d = PoseDistribution::default();
        let root = d.skeleton.root();
        for (k, s) in d.perturbation_sigma_deg.iter_mut().enumerate() {
            *s = if k == root { self.root_sigma_deg } else { self.joint_sigma_deg };
        }
        d.global_rotation_range = self.yaw_range_deg;
        d.camera_pitch_range = self.camera_pitch_deg;
        d.validate()?;
        Ok(d)
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: Task::DepthOrdinal,
            seed: 0,
            dataset_size: 2500,
            heldout_fraction: 0.2,
            hidden: 128,
            blocks: 2,
            dropout: 0.0,
            batch_size: 64,
            iterations: 3000,
            optimizer: RmsPropConfig {
                learning_rate: 1e-3,
                ..RmsPropConfig::default()
            },
            final_lr_fraction: 0.1,
            tie_threshold_mm: DEFAULT_TIE_THRESHOLD_MM,
            lambda: DEFAULT_KEYPOINT_WEIGHT,
            keypoint_noise_px: 1.0,
            grid: 8,
            full_fraction: 0.3,
            relation_source: RelationSource::Truth,
            poses: PoseSampling::default(),
            noise: NoiseConfig::default(),
            recon: ReconHyper::default(),
            log_every: 100,
        }
    }
}

impl ExperimentConfig {
    pub fn for_task(task: Task) -> Self {
        ExperimentConfig {
            task,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dataset_size", self.dataset_size),
            ("hidden", self.hidden),
            ("batch_size", self.batch_size),
            ("iterations", self.iterations),
            ("grid", self.grid),
            ("log_every", self.log_every),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidInput(format!("{name} must be positive")));
            }
        }
        if !(self.heldout_fraction > 0.0 && self.heldout_fraction < 1.0) {
            return Err(Error::InvalidInput("heldout_fraction must lie in (0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.full_fraction) {
            return Err(Error::InvalidInput("full_fraction must lie in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidInput("dropout must lie in [0, 1)".into()));
        }
        if !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            return Err(Error::InvalidInput("final_lr_fraction must lie in (0, 1]".into()));
        }
        if !(self.tie_threshold_mm >= 0.0 && self.lambda >= 0.0 && self.keypoint_noise_px >= 0.0) {
            return Err(Error::InvalidInput("threshold, lambda and keypoint noise must be >= 0".into()));
        }
        if !(self.optimizer.learning_rate > 0.0) {
            return Err(Error::InvalidInput("learning rate must be positive".into()));
        }
        if let RelationSource::Annotator { annotator } = &self.relation_source {
            annotator.validate()?;
        }
        self.noise.validate()
    }
}

/// One synthetic example with everything any task may need.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub pose: Pose3D,
    /// Noisy projected keypoints in pixels (the network input before normalisation).
    pub keypoints: Pose2D,
    pub norm: KeypointNorm,
    pub input: Vec<f64>,
    /// Clean projection in the normalised frame.
    pub target_2d: Vec<[f64; 2]>,
    /// Depths in the normalised frame.
    pub target_z: Vec<f64>,
    pub relations: RelationSet,
    /// Carries full 3D supervision in the mixed task.
    pub full: bool,
}

impl Example {
    /// Converts a normalised-frame pose to root-relative mm.
    pub fn to_mm(&self, xy: &[[f64; 2]], z: &[f64], camera_scale: f64, root: usize) -> Pose3D {
        let k = self.norm.scale / camera_scale;
        Pose3D::new(
            xy.iter().zip(z).map(|(p, z)| [p[0] * k, p[1] * k, z * k]).collect(),
            self.pose.skeleton.clone(),
        )
        .root_relative(root)
    }

    pub fn target_3d(&self) -> Vec<[f64; 3]> {
        self.target_2d
            .iter()
            .zip(&self.target_z)
            .map(|(p, z)| [p[0], p[1], *z])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub distribution: PoseDistribution,
    pub camera: WeakPerspectiveCamera,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

fn relations_for(source: &RelationSource, dist: &PoseDistribution, pose: &Pose3D, threshold: f64, seed: u64) -> Result<RelationSet> {
    match source {
        RelationSource::Truth => relations_from_depths(&pose.depths(), threshold),
        RelationSource::Annotator { annotator } => {
            let mut session = AnnotationSession::for_skeleton("train", &dist.skeleton)?;
            session.drive(|i, j| annotate(annotator, pose, i, j, seed))?;
            session.relations()
        }
    }
}

/// Deterministic synthetic dataset; the last `heldout_fraction` is the test split.
pub fn build_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    cfg.validate()?;
    let dist = cfg.poses.distribution()?;
    let camera = default_camera();
    let heldout = (cfg.dataset_size as f64 * cfg.heldout_fraction).round() as usize;
    if heldout == 0 || heldout >= cfg.dataset_size {
        return Err(Error::Data(format!(
            "dataset of {} cannot be split with held-out fraction {}",
            cfg.dataset_size, cfg.heldout_fraction
        )));
    }
    let poses = sample_poses(&dist, cfg.seed, cfg.dataset_size)?;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x00C0_FFEE);
    let noise = Normal::new(0.0, cfg.keypoint_noise_px.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut examples = Vec::with_capacity(poses.len());
    for (k, pose) in poses.into_iter().enumerate() {
        let clean = project(&pose, &camera)?;
        let mut keypoints = clean.clone();
        if cfg.keypoint_noise_px > 0.0 {
            keypoints
                .joints
                .iter_mut()
                .flatten()
                .for_each(|v| *v += noise.sample(&mut noise_rng));
        }
        let norm = KeypointNorm::fit(&keypoints)?;
        let input: Vec<f64> = norm.apply(&keypoints).into_iter().flatten().collect();
        let target_2d = norm.apply(&clean);
        let z = pose.depths();
        let mean_z = z.iter().sum::<f64>() / z.len() as f64;
        let target_z = z.iter().map(|v| camera.scale * (v - mean_z) / norm.scale).collect();
        let relations = relations_for(&cfg.relation_source, &dist, &pose, cfg.tie_threshold_mm, cfg.seed.wrapping_add(k as u64))?;
        examples.push(Example {
            pose,
            keypoints,
            norm,
            input,
            target_2d,
            target_z,
            relations,
            full: false,
        });
    }
    let test = examples.split_off(cfg.dataset_size - heldout);
    let mut train = examples;
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2)));
    let n_full = (train.len() as f64 * cfg.full_fraction).round() as usize;
    for &k in &order[..n_full] {
        train[k].full = true;
    }
    Ok(Dataset {
        distribution: dist,
        camera,
        train,
        test,
    })
}

/// Output layout of a task network.
#[derive(Debug, Clone, PartialEq)]
pub enum Head {
    /// `N` depths.
    Depth { joints: usize },
    /// `2N` interleaved `x, y` followed by `N` depths.
    Coords { joints: usize },
    /// Voxel scores in [`GridShape`] order.
    Volume { shape: GridShape, axis: Vec<f64> },
}

impl Head {
    pub fn output_dim(&self) -> usize {
        match self {
            Head::Depth { joints } => *joints,
            Head::Coords { joints } => 3 * joints,
            Head::Volume { shape, .. } => shape.len(),
        }
    }

    fn scores(&self, output: &[f64]) -> Result<VolumeScores> {
        match self {
            Head::Volume { shape, axis } => VolumeScores::new(*shape, output.to_vec(), axis.clone()),
            _ => Err(Error::Contract("not a volumetric head".into())),
        }
    }

    /// Normalised-frame depths and, where predicted, 2D positions.
    pub fn decode(&self, output: &[f64]) -> Result<(Option<Vec<[f64; 2]>>, Vec<f64>)> {
        check_dim(self.output_dim(), output.len())?;
        match self {
            Head::Depth { .. } => Ok((None, output.to_vec())),
            Head::Coords { joints } => Ok((
                Some(output[..2 * joints].chunks(2).map(|c| [c[0], c[1]]).collect()),
                output[2 * joints..].to_vec(),
            )),
            Head::Volume { shape, axis } => {
                let p = volume_softmax(&self.scores(output)?);
                let z = soft_depths(&p, axis)?;
                let xy = soft_argmax_2d(&marginal_2d(&p))
                    .into_iter()
                    .map(|c| [cell_to_frame(c[0], shape.width), cell_to_frame(c[1], shape.height)])
                    .collect();
                Ok((Some(xy), z))
            }
        }
    }
}

fn frame_to_cell(v: f64, cells: usize) -> f64 {
    (v + GRID_EXTENT) / (2.0 * GRID_EXTENT) * cells as f64 - 0.5
}

fn cell_to_frame(c: f64, cells: usize) -> f64 {
    (c + 0.5) / cells as f64 * 2.0 * GRID_EXTENT - GRID_EXTENT
}

/// Heatmap targets (sigma one cell) at the sample's clean 2D positions.
pub fn heatmap_targets(shape: &GridShape, target_2d: &[[f64; 2]]) -> Result<HeatmapTarget> {
    let centers: Vec<[f64; 2]> = target_2d
        .iter()
        .map(|p| [frame_to_cell(p[0], shape.width), frame_to_cell(p[1], shape.height)])
        .collect();
    HeatmapTarget::gaussian(shape.width, shape.height, &centers, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Supervision {
    Full,
    Weak,
}

/// Annotations available for one training sample.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingSample {
    /// Ground-truth 2D keypoints (normalised frame).
    pub keypoints: Option<Vec<[f64; 2]>>,
    pub relations: Option<RelationSet>,
    /// Ground-truth 3D pose (normalised frame).
    pub pose: Option<Vec<[f64; 3]>>,
}

impl TrainingSample {
    fn from_example(ex: &Example, mode: Supervision) -> Self {
        match mode {
            Supervision::Full => TrainingSample {
                keypoints: Some(ex.target_2d.clone()),
                relations: None,
                pose: Some(ex.target_3d()),
            },
            Supervision::Weak => TrainingSample {
                keypoints: Some(ex.target_2d.clone()),
                relations: Some(ex.relations.clone()),
                pose: None,
            },
        }
    }
}

fn missing(what: &str) -> Error {
    Error::Data(format!("sample lacks {what}"))
}

/// Loss and output gradient of one sample under full or weak supervision.
/// Both modes return a gradient with the head's full output shape.
pub fn mixed_batch_loss(
    sample: &TrainingSample,
    mode: Supervision,
    head: &Head,
    output: &[f64],
    lambda: f64,
) -> Result<(f64, Vec<f64>)> {
    check_dim(head.output_dim(), output.len())?;
    match (head, mode) {
        (Head::Coords { joints }, Supervision::Full) => {
            let gt = sample.pose.as_ref().ok_or_else(|| missing("a 3D pose"))?;
            let pred = coords_pose(output, *joints);
            let (loss, g) = l3d_loss(&pred, &Pose3D::new(gt.clone(), ""))?;
            Ok((loss, coords_grad(&g, *joints)))
        }
        (Head::Coords { joints }, Supervision::Weak) => {
            let kp = sample.keypoints.as_ref().ok_or_else(|| missing("2D keypoints"))?;
            let rels = sample.relations.as_ref().ok_or_else(|| missing("ordinal relations"))?;
            let n = *joints;
            let pred2d = Pose2D::new(output[..2 * n].chunks(2).map(|c| [c[0], c[1]]).collect(), "");
            let w = combined_weak_loss(&output[2 * n..], rels, &pred2d, &Pose2D::new(kp.clone(), ""), None, lambda)?;
            let mut grad: Vec<f64> = w.grad_2d.iter().flatten().copied().collect();
            grad.extend(w.grad_depth);
            Ok((w.loss, grad))
        }
        (Head::Volume { shape, .. }, mode) => {
            let kp = sample.keypoints.as_ref().ok_or_else(|| missing("2D keypoints"))?;
            let targets = heatmap_targets(shape, kp)?;
            let scores = head.scores(output)?;
            let v = match mode {
                Supervision::Full => {
                    let gt = sample.pose.as_ref().ok_or_else(|| missing("a 3D pose"))?;
                    let z: Vec<f64> = gt.iter().map(|p| p[2]).collect();
                    volumetric_full_loss(&scores, &z, &targets, lambda)?
                }
                Supervision::Weak => {
                    let rels = sample.relations.as_ref().ok_or_else(|| missing("ordinal relations"))?;
                    volumetric_weak_loss(&scores, rels, &targets, lambda)?
                }
            };
            Ok((v.loss, v.grad))
        }
        (Head::Depth { .. }, Supervision::Full) => {
            let gt = sample.pose.as_ref().ok_or_else(|| missing("a 3D pose"))?;
            check_dim(gt.len(), output.len())?;
            let mut loss = 0.0;
            let grad = output
                .iter()
                .zip(gt)
                .map(|(z, p)| {
                    loss += (z - p[2]).powi(2);
                    2.0 * (z - p[2])
                })
                .collect();
            Ok((loss, grad))
        }
        (Head::Depth { .. }, Supervision::Weak) => {
            let rels = sample.relations.as_ref().ok_or_else(|| missing("ordinal relations"))?;
            rank_loss(output, rels)
        }
    }
}

fn coords_pose(output: &[f64], n: usize) -> Pose3D {
    Pose3D::new(
        (0..n)
            .map(|k| [output[2 * k], output[2 * k + 1], output[2 * n + k]])
            .collect(),
        "",
    )
}

fn coords_grad(g: &[[f64; 3]], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; 3 * n];
    for (k, v) in g.iter().enumerate() {
        out[2 * k] = v[0];
        out[2 * k + 1] = v[1];
        out[2 * n + k] = v[2];
    }
    out
}

fn supervision_for(task: Task, ex: &Example) -> Supervision {
    match task.network_task() {
        Task::DepthRegression | Task::CoordsFull | Task::VolumeFull => Supervision::Full,
        Task::Mixed if ex.full => Supervision::Full,
        _ => Supervision::Weak,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub iteration: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMeta {
    pub kind: String,
    pub task: Task,
    pub joint_count: usize,
    pub config: ExperimentConfig,
    pub history: Vec<LossPoint>,
}

pub const TASK_KIND: &str = "task-network";

#[derive(Debug, Clone, PartialEq)]
pub struct TaskModel {
    pub params: NetworkParams,
    pub meta: TaskMeta,
}

impl TaskModel {
    pub fn head(&self) -> Result<Head> {
        self.meta.task.head(self.meta.joint_count, self.meta.config.grid)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(
            path,
            &self.params,
            self.meta.config.iterations as u64,
            serde_json::to_value(&self.meta)?,
        )
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointHeader)> {
        let (params, header) = load_checkpoint(path)?;
        let meta: TaskMeta = serde_json::from_value(header.extra.clone())
            .map_err(|e| Error::Format(format!("not a task checkpoint: {e}")))?;
        if meta.kind != TASK_KIND {
            return Err(Error::Format(format!("checkpoint kind {:?} is not {TASK_KIND:?}", meta.kind)));
        }
        let model = TaskModel { params, meta };
        let head = model.head()?;
        if model.params.output_dim() != head.output_dim() || model.params.input_dim() != 2 * model.meta.joint_count {
            return Err(Error::Format("checkpoint weights do not match its task".into()));
        }
        Ok((model, header))
    }

    fn outputs(&self, examples: &[Example]) -> Result<Array2<f64>> {
        let n_in = self.params.input_dim();
        let mut x = Array2::zeros((examples.len(), n_in));
        for (r, ex) in examples.iter().enumerate() {
            check_dim(n_in, ex.input.len())?;
            x.row_mut(r).assign(&ArrayView1::from(&ex.input));
        }
        Ok(self.params.forward(&x, None)?.0)
    }
}

/// Trains the network for `cfg.task` on `data.train`.
pub fn train_task(cfg: &ExperimentConfig, data: &Dataset) -> Result<TaskModel> {
    cfg.validate()?;
    let first = data.train.first().ok_or_else(|| Error::Data("empty training split".into()))?;
    let n = first.pose.len();
    let task = cfg.task.network_task();
    let head = task.head(n, cfg.grid)?;
    let specs = lifting_network_spec(2 * n, cfg.hidden, head.output_dim(), cfg.blocks, cfg.dropout);
    let mut params = NetworkParams::init(&specs, cfg.seed)?;
    let mut opt = OptimizerState::new(&params, cfg.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(3));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(4));
    let samples: Vec<(TrainingSample, Supervision)> = data
        .train
        .iter()
        .map(|ex| {
            let mode = supervision_for(task, ex);
            (TrainingSample::from_example(ex, mode), mode)
        })
        .collect();
    let bs = cfg.batch_size;
    let mut history = Vec::new();
    for step in 0..cfg.iterations {
        opt.config.learning_rate = decayed_rate(cfg.optimizer.learning_rate, cfg.final_lr_fraction, step, cfg.iterations);
        let picks: Vec<usize> = (0..bs).map(|_| rng.random_range(0..data.train.len())).collect();
        let mut x = Array2::zeros((bs, 2 * n));
        for (r, &k) in picks.iter().enumerate() {
            x.row_mut(r).assign(&ArrayView1::from(&data.train[k].input));
        }
        let drop = (cfg.dropout > 0.0).then_some(&mut dropout_rng);
        let (out, cache) = params.forward(&x, drop)?;
        let mut grad = Array2::zeros(out.raw_dim());
        let mut loss = 0.0;
        for (r, &k) in picks.iter().enumerate() {
            let row = out.row(r).to_vec();
            let (l, g) = mixed_batch_loss(&samples[k].0, samples[k].1, &head, &row, cfg.lambda)?;
            loss += l / bs as f64;
            grad.row_mut(r).assign(&(ArrayView1::from(&g).to_owned() / bs as f64));
        }
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step,
                reason: format!("training loss {loss}"),
            });
        }
        if step == 0 || (step + 1) % cfg.log_every == 0 || step + 1 == cfg.iterations {
            history.push(LossPoint { iteration: step, loss });
        }
        let (grads, _) = params.backward(&cache, &grad)?;
        rmsprop_step(&mut opt, &mut params, &grads).map_err(|e| match e {
            Error::Divergence { reason, .. } => Error::Divergence { step, reason },
            other => other,
        })?;
    }
    Ok(TaskModel {
        params,
        meta: TaskMeta {
            kind: TASK_KIND.into(),
            task,
            joint_count: n,
            config: cfg.clone(),
            history,
        },
    })
}

/// Rank correlation with average ranks for ties; 0 when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dim(a.len(), b.len())?;
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut ranks = vec![0.0; v.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && v[idx[end]] == v[idx[start]] {
            end += 1;
        }
        let r = (start + end - 1) as f64 / 2.0;
        for &k in &idx[start..end] {
            ranks[k] = r;
        }
        start = end;
    }
    ranks
}

/// Correctly ordered strict pairs (`|dz| >= threshold`) and their count.
pub fn ordinal_hits(pred: &[f64], gt: &[f64], threshold_mm: f64) -> Result<(usize, usize)> {
    check_dim(gt.len(), pred.len())?;
    let (mut hit, mut total) = (0, 0);
    for i in 0..gt.len() {
        for j in i + 1..gt.len() {
            let r = relation_between(gt[i], gt[j], threshold_mm);
            if r == Relation::Same {
                continue;
            }
            total += 1;
            if relation_between(pred[i], pred[j], 0.0) == r {
                hit += 1;
            }
        }
    }
    Ok((hit, total))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub seed: u64,
    pub ordinal_accuracy: f64,
    pub spearman_rho: f64,
    /// Root-relative MPJPE in mm, when the task yields a 3D pose.
    pub mpjpe: Option<f64>,
    pub procrustes_error: Option<f64>,
    pub mpjpe_without_reconstruction: Option<f64>,
    pub procrustes_error_without_reconstruction: Option<f64>,
    pub metric_supervised: bool,
    pub note: String,
    pub train_samples: usize,
    pub test_samples: usize,
    pub strict_pairs: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub loss_history: Vec<LossPoint>,
    pub config: ExperimentConfig,
}

const CSV_FIELDS: [&str; 13] = [
    "task",
    "seed",
    "ordinal_accuracy",
    "spearman_rho",
    "mpjpe",
    "procrustes_error",
    "mpjpe_without_reconstruction",
    "procrustes_error_without_reconstruction",
    "metric_supervised",
    "train_samples",
    "test_samples",
    "initial_loss",
    "final_loss",
];

impl EvalReport {
    pub fn csv_header() -> String {
        CSV_FIELDS.join(",")
    }

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        [
            self.task.to_string(),
            self.seed.to_string(),
            self.ordinal_accuracy.to_string(),
            self.spearman_rho.to_string(),
            opt(self.mpjpe),
            opt(self.procrustes_error),
            opt(self.mpjpe_without_reconstruction),
            opt(self.procrustes_error_without_reconstruction),
            self.metric_supervised.to_string(),
            self.train_samples.to_string(),
            self.test_samples.to_string(),
            self.initial_loss.to_string(),
            self.final_loss.to_string(),
        ]
        .join(",")
    }

    /// Range checks on the metrics.
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ordinal_accuracy) {
            return Err(Error::Contract(format!("ordinal accuracy {} outside [0, 1]", self.ordinal_accuracy)));
        }
        if !(-1.0..=1.0).contains(&self.spearman_rho) {
            return Err(Error::Contract(format!("spearman rho {} outside [-1, 1]", self.spearman_rho)));
        }
        let mm = [
            self.mpjpe,
            self.procrustes_error,
            self.mpjpe_without_reconstruction,
            self.procrustes_error_without_reconstruction,
        ];
        if mm.iter().flatten().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Contract("pose errors must be finite and non-negative".into()));
        }
        if !self.initial_loss.is_finite() || !self.final_loss.is_finite() {
            return Err(Error::Contract("training losses must be finite".into()));
        }
        Ok(())
    }
}

fn note_for(task: Task) -> String {
    match task {
        Task::DepthOrdinal => "ordinal supervision fixes depth only up to an increasing transform; pose errors in mm are not reported".into(),
        Task::CoordsWeak | Task::VolumeWeak => "depth is ordinally supervised, so mm errors include an unresolved depth scale".into(),
        Task::EndToEnd => "mixed-supervision volumetric network followed by a reconstruction network trained on 3D poses; errors are reported with and without the lifting stage".into(),
        _ => "metric supervision".into(),
    }
}

struct PoseErrors {
    mpjpe: f64,
    procrustes: f64,
}

fn pose_errors(pred: &Pose3D, gt: &Pose3D) -> Result<PoseErrors> {
    Ok(PoseErrors {
        mpjpe: mpjpe(pred, gt)?,
        procrustes: procrustes_align(pred, gt)?.1,
    })
}

/// Evaluates a trained model on the held-out split. `recon` is required for
/// the end-to-end task and ignored otherwise.
pub fn evaluate(model: &TaskModel, recon: Option<&ReconstructionModel>, data: &Dataset) -> Result<EvalReport> {
    let cfg = &model.meta.config;
    if cfg.task == Task::EndToEnd {
        let recon = recon.ok_or_else(|| Error::Contract("end-to-end evaluation needs a reconstruction model".into()))?;
        return end_to_end_eval(model, recon, data);
    }
    let head = model.head()?;
    let out = model.outputs(&data.test)?;
    let root = data.distribution.skeleton.root();
    let (mut hit, mut total) = (0, 0);
    let mut rho = 0.0;
    let mut err = [0.0; 2];
    let with_pose = cfg.task != Task::DepthOrdinal;
    for (r, ex) in data.test.iter().enumerate() {
        let row = out.row(r).to_vec();
        let (xy, z) = head.decode(&row)?;
        let gt_z = ex.pose.depths();
        let (h, t) = ordinal_hits(&z, &gt_z, cfg.tie_threshold_mm)?;
        hit += h;
        total += t;
        rho += spearman(&z, &gt_z)?;
        if with_pose {
            let xy = xy.unwrap_or_else(|| ex.input.chunks(2).map(|c| [c[0], c[1]]).collect());
            let pred = ex.to_mm(&xy, &z, data.camera.scale, root);
            let e = pose_errors(&pred, &ex.pose.root_relative(root))?;
            err[0] += e.mpjpe;
            err[1] += e.procrustes;
        }
    }
    finish_report(model, data, hit, total, rho, with_pose.then_some(err), None)
}

fn finish_report(
    model: &TaskModel,
    data: &Dataset,
    hit: usize,
    total: usize,
    rho_sum: f64,
    err: Option<[f64; 2]>,
    without: Option<[f64; 2]>,
) -> Result<EvalReport> {
    if total == 0 {
        return Err(Error::Data("held-out split has no strict pairs".into()));
    }
    let cfg = &model.meta.config;
    let m = data.test.len() as f64;
    let history = &model.meta.history;
    let report = EvalReport {
        task: cfg.task,
        seed: cfg.seed,
        ordinal_accuracy: hit as f64 / total as f64,
        spearman_rho: rho_sum / m,
        mpjpe: err.map(|e| e[0] / m),
        procrustes_error: err.map(|e| e[1] / m),
        mpjpe_without_reconstruction: without.map(|e| e[0] / m),
        procrustes_error_without_reconstruction: without.map(|e| e[1] / m),
        metric_supervised: cfg.task.metric_supervised(),
        note: note_for(cfg.task),
        train_samples: data.train.len(),
        test_samples: data.test.len(),
        strict_pairs: total,
        initial_loss: history.first().map_or(f64::NAN, |p| p.loss),
        final_loss: history.last().map_or(f64::NAN, |p| p.loss),
        loss_history: history.clone(),
        config: cfg.clone(),
    };
    report.validate()?;
    Ok(report)
}

/// Pipes the network's 2D and depth outputs through the
/// reconstruction network and reports errors with and without it.
pub fn end_to_end_eval(coords: &TaskModel, recon: &ReconstructionModel, data: &Dataset) -> Result<EvalReport> {
    let head = coords.head()?;
    let n = coords.meta.joint_count;
    if recon.joint_count() != n {
        return Err(Error::Contract(format!(
            "reconstruction model has {} joints, coordinate model {n}",
            recon.joint_count()
        )));
    }
    if matches!(head, Head::Depth { .. }) {
        return Err(Error::Contract("end-to-end evaluation needs a network that predicts 2D".into()));
    }
    let cfg = &coords.meta.config;
    let root = recon.meta.root;
    let out = coords.outputs(&data.test)?;
    let (mut hit, mut total) = (0, 0);
    let mut rho = 0.0;
    let (mut with, mut without) = ([0.0; 2], [0.0; 2]);
    for (r, ex) in data.test.iter().enumerate() {
        let row = out.row(r).to_vec();
        let (xy, z) = head.decode(&row)?;
        let xy = xy.expect("head predicts 2D");
        let gt_z = ex.pose.depths();
        let (h, t) = ordinal_hits(&z, &gt_z, cfg.tie_threshold_mm)?;
        hit += h;
        total += t;
        rho += spearman(&z, &gt_z)?;
        let gt = ex.pose.root_relative(root);

        let direct = ex.to_mm(&xy, &z, data.camera.scale, root);
        let e = pose_errors(&direct, &gt)?;
        without[0] += e.mpjpe;
        without[1] += e.procrustes;

        let keypoints = ex.norm.invert(&xy, &ex.pose.skeleton);
        let lifted = reconstruct(recon, &ReconInput::from_raw(&keypoints, &z)?)?;
        let e = pose_errors(&lifted, &gt)?;
        with[0] += e.mpjpe;
        with[1] += e.procrustes;
    }
    finish_report(coords, data, hit, total, rho, Some(with), Some(without))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub report: EvalReport,
    pub model: TaskModel,
    pub recon: Option<ReconstructionModel>,
}

impl Experiment {
    /// Writes `report.json`, `report.csv`, `model.ckpt` and, for the
    /// end-to-end task, `recon.ckpt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&self.report)?)?;
        std::fs::write(
            dir.join("report.csv"),
            format!("{}\n{}\n", EvalReport::csv_header(), self.report.csv_row()),
        )?;
        self.model.save(&dir.join("model.ckpt"))?;
        if let Some(recon) = &self.recon {
            recon.save(&dir.join("recon.ckpt"), self.model.meta.config.recon.iterations as u64)?;
        }
        Ok(())
    }
}

/// Reconstruction model trained on the 3D poses of the training split.
pub fn train_recon_for(cfg: &ExperimentConfig, data: &Dataset) -> Result<ReconstructionModel> {
    let mocap: Vec<Pose3D> = data.train.iter().map(|e| e.pose.clone()).collect();
    let hyper = ReconHyper {
        seed: cfg.recon.seed ^ cfg.seed,
        ..cfg.recon
    };
    Ok(train_reconstruction(&mocap, data.distribution.skeleton.root(), &data.camera, &cfg.noise, &hyper)?.model)
}

/// Builds the data, trains, and evaluates on the held-out split.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Experiment> {
    let data = build_dataset(cfg)?;
    let model = train_task(cfg, &data)?;
    let recon = match cfg.task {
        Task::EndToEnd => Some(train_recon_for(cfg, &data)?),
        _ => None,
    };
    let report = evaluate(&model, recon.as_ref(), &data)?;
    Ok(Experiment { report, model, recon })
}

/// Re-evaluates saved checkpoints, regenerating the dataset from the
/// configuration stored in the task checkpoint.
pub fn evaluate_checkpoints(model_path: &Path, recon_path: Option<&Path>) -> Result<EvalReport> {
    let (model, _) = TaskModel::load(model_path)?;
    let recon = recon_path.map(ReconstructionModel::load).transpose()?.map(|(m, _)| m);
    let data = build_dataset(&model.meta.config)?;
    evaluate(&model, recon.as_ref(), &data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smoke(task: Task) -> ExperimentConfig {
        ExperimentConfig {
            task,
            dataset_size: 10,
            iterations: 10,
            hidden: 16,
            batch_size: 4,
            grid: 4,
            log_every: 5,
            recon: ReconHyper {
                hidden: 16,
                iterations: 10,
                batch_size: 4,
                ..ReconHyper::default()
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn task_literals() {
        for t in Task::ALL {
            assert_eq!(t.as_str().parse::<Task>().unwrap(), t);
            assert_eq!(serde_json::to_string(&t).unwrap(), format!("\"{t}\""));
        }
        assert!("depth".parse::<Task>().is_err());
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert_eq!(spearman(&[1.0, 1.0, 1.0], &[3.0, 2.0, 1.0]).unwrap(), 0.0);
        assert_eq!(average_ranks(&[5.0, 1.0, 5.0, 0.0]), vec![2.5, 1.0, 2.5, 0.0]);
    }

    #[test]
    fn ordinal_hits_skip_ties() {
        let gt = [0.0, 50.0, 300.0];
        assert_eq!(ordinal_hits(&[0.0, 9.0, 1.0], &gt, 100.0).unwrap(), (1, 2));
        assert_eq!(ordinal_hits(&[0.0, 0.0, 0.0], &gt, 100.0).unwrap(), (0, 2));
    }

    #[test]
    fn grid_frame_round_trip() {
        for v in [-0.75, -0.3, 0.0, 0.4, 0.75] {
            assert!((cell_to_frame(frame_to_cell(v, 8), 8) - v).abs() < 1e-12);
        }
    }

    #[test]
    fn every_task_runs_a_smoke_config() {
        for task in Task::ALL {
            let exp = run_experiment(&smoke(task)).unwrap();
            exp.report.validate().unwrap();
            assert_eq!(exp.report.test_samples, 2);
            assert_eq!(exp.report.train_samples, 8);
            assert_eq!(exp.report.task, task);
            assert_eq!(exp.report.mpjpe.is_none(), task == Task::DepthOrdinal);
            assert_eq!(exp.report.procrustes_error_without_reconstruction.is_some(), task == Task::EndToEnd);
        }
    }

    #[test]
    fn runs_are_bitwise_repeatable_and_reload() {
        for task in [Task::Mixed, Task::EndToEnd] {
            let a = run_experiment(&smoke(task)).unwrap();
            let b = run_experiment(&smoke(task)).unwrap();
            assert_eq!(a, b);
            let dir = tempfile::tempdir().unwrap();
            a.write(dir.path()).unwrap();
            let recon = (task == Task::EndToEnd).then(|| dir.path().join("recon.ckpt"));
            let again = evaluate_checkpoints(&dir.path().join("model.ckpt"), recon.as_deref()).unwrap();
            assert_eq!(again, a.report);
            let json: EvalReport =
                serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
            assert_eq!(json, a.report);
        }
    }

    #[test]
    fn empty_relations_reduce_to_keypoints() {
        let head = Head::Coords { joints: 3 };
        let kp = vec![[0.1, 0.2], [0.0, -0.3], [0.4, 0.4]];
        let out = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 1.0, -2.0, 0.5];
        let sample = TrainingSample {
            keypoints: Some(kp.clone()),
            relations: Some(RelationSet::default()),
            pose: None,
        };
        let (loss, grad) = mixed_batch_loss(&sample, Supervision::Weak, &head, &out, 100.0).unwrap();
        let mut expect = 0.0;
        for k in 0..3 {
            expect += (out[2 * k] - kp[k][0]).powi(2) + (out[2 * k + 1] - kp[k][1]).powi(2);
        }
        assert!((loss - 100.0 * expect).abs() < 1e-12);
        assert_eq!(&grad[6..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn full_samples_dispatch_to_l3d() {
        let head = Head::Coords { joints: 2 };
        let gt = vec![[0.1, 0.2, 0.3], [-0.1, 0.0, 0.5]];
        let out = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5];
        let sample = TrainingSample {
            pose: Some(gt.clone()),
            ..TrainingSample::default()
        };
        let (loss, grad) = mixed_batch_loss(&sample, Supervision::Full, &head, &out, 100.0).unwrap();
        let pred = Pose3D::new(vec![[0.0, 0.1, 0.4], [0.2, 0.3, 0.5]], "");
        let (expect, g) = l3d_loss(&pred, &Pose3D::new(gt, "")).unwrap();
        assert_eq!(loss, expect);
        assert_eq!(grad, vec![g[0][0], g[0][1], g[1][0], g[1][1], g[0][2], g[1][2]]);
        assert_eq!(grad.len(), head.output_dim());
    }

    #[test]
    fn missing_annotations_are_data_errors() {
        let head = Head::Coords { joints: 2 };
        let out = [0.0; 6];
        let empty = TrainingSample::default();
        assert!(matches!(mixed_batch_loss(&empty, Supervision::Full, &head, &out, 1.0), Err(Error::Data(_))));
        assert!(matches!(mixed_batch_loss(&empty, Supervision::Weak, &head, &out, 1.0), Err(Error::Data(_))));
    }

    #[test]
    fn config_validation_and_defaults_from_partial_json() {
        let cfg: ExperimentConfig = serde_json::from_str(r#"{"task":"mixed","seed":7}"#).unwrap();
        assert_eq!(cfg.task, Task::Mixed);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.tie_threshold_mm, 100.0);
        assert_eq!(cfg.lambda, 100.0);
        assert_eq!(cfg.heldout_fraction, 0.2);
        let bad = ExperimentConfig {
            iterations: 0,
            ..ExperimentConfig::default()
        };
        assert!(bad.validate().is_err());
        let tiny = ExperimentConfig {
            dataset_size: 2,
            ..ExperimentConfig::default()
        };
        assert!(matches!(build_dataset(&tiny), Err(Error::Data(_))));
    }

    #[test]
    fn annotator_relations_feed_training() {
        let cfg = ExperimentConfig {
            relation_source: RelationSource::Annotator {
                annotator: SimulatedAnnotator::perfect(),
            },
            ..smoke(Task::DepthOrdinal)
        };
        let data = build_dataset(&cfg).unwrap();
        for ex in &data.train {
            assert_eq!(ex.relations.len(), 91);
        }
        run_experiment(&cfg).unwrap();
    }

    #[test]
    fn mixed_split_marks_full_fraction() {
        let data = build_dataset(&ExperimentConfig {
            dataset_size: 100,
            ..ExperimentConfig::default()
        })
        .unwrap();
        assert_eq!(data.train.iter().filter(|e| e.full).count(), 24);
    }
}

//! Per-joint volumetric score grids supervised through their marginals.
//!
//! Layout of every volume buffer is joint-major with x varying fastest:
//! `index = ((n * D + z) * H + y) * W + x`. 2D maps use `(n * H + y) * W + x`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::io::{read_framed, write_framed};
use crate::supervision::{rank_loss, RelationSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridShape {
    #[serde(rename = "W")]
    pub width: usize,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "D")]
    pub depth: usize,
    #[serde(rename = "N")]
    pub joints: usize,
}

impl GridShape {
    pub fn new(width: usize, height: usize, depth: usize, joints: usize) -> Result<Self> {
        if width == 0 || height == 0 || depth == 0 || joints == 0 {
            return Err(Error::InvalidInput(format!(
                "grid dimensions must be >= 1, got {width}x{height}x{depth} for {joints} joints"
            )));
        }
        Ok(GridShape {
            width,
            height,
            depth,
            joints,
        })
    }

    pub fn voxels_per_joint(&self) -> usize {
        self.width * self.height * self.depth
    }

    pub fn pixels_per_joint(&self) -> usize {
        self.width * self.height
    }

    pub fn len(&self) -> usize {
        self.voxels_per_joint() * self.joints
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, n: usize, x: usize, y: usize, z: usize) -> usize {
        ((n * self.depth + z) * self.height + y) * self.width + x
    }
}

/// Raw network scores for every joint plus the depth-bin centres.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeScores {
    pub shape: GridShape,
    pub data: Vec<f64>,
    pub axis_coords: Vec<f64>,
}

impl VolumeScores {
    pub fn new(shape: GridShape, data: Vec<f64>, axis_coords: Vec<f64>) -> Result<Self> {
        check_dim(shape.len(), data.len())?;
        check_dim(shape.depth, axis_coords.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite volume score".into()));
        }
        if axis_coords.windows(2).any(|w| !(w[1] > w[0])) || axis_coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidInput("depth axis must be strictly increasing".into()));
        }
        Ok(VolumeScores {
            shape,
            data,
            axis_coords,
        })
    }

    pub fn joint(&self, n: usize) -> &[f64] {
        let v = self.shape.voxels_per_joint();
        &self.data[n * v..(n + 1) * v]
    }
}

/// Per-joint probability volumes `p(u | n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVolume {
    pub shape: GridShape,
    pub data: Vec<f64>,
}

impl ProbVolume {
    pub fn joint(&self, n: usize) -> &[f64] {
        let v = self.shape.voxels_per_joint();
        &self.data[n * v..(n + 1) * v]
    }
}

/// Stack of per-joint `W x H` maps.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmaps {
    pub width: usize,
    pub height: usize,
    pub joints: usize,
    pub data: Vec<f64>,
}

impl Heatmaps {
    pub fn joint(&self, n: usize) -> &[f64] {
        let p = self.width * self.height;
        &self.data[n * p..(n + 1) * p]
    }

    pub fn get(&self, n: usize, x: usize, y: usize) -> f64 {
        self.data[(n * self.height + y) * self.width + x]
    }
}

/// Gaussian targets for the 2D marginals, normalised to a peak of 1.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapTarget {
    pub maps: Heatmaps,
    pub sigma_px: f64,
}

impl HeatmapTarget {
    /// One Gaussian per joint centred at `centers[n]`, given in grid cell
    /// units (cell `x` has its centre at coordinate `x`).
    pub fn gaussian(width: usize, height: usize, centers: &[[f64; 2]], sigma_px: f64) -> Result<Self> {
        if !(sigma_px > 0.0 && sigma_px.is_finite()) {
            return Err(Error::InvalidInput(format!("sigma must be > 0, got {sigma_px}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput("empty heatmap grid".into()));
        }
        let mut data = vec![0.0; centers.len() * width * height];
        for (n, c) in centers.iter().enumerate() {
            let slot = &mut data[n * width * height..(n + 1) * width * height];
            for y in 0..height {
                for x in 0..width {
                    let d2 = (x as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2);
                    slot[y * width + x] = (-d2 / (2.0 * sigma_px * sigma_px)).exp();
                }
            }
            let peak = slot.iter().copied().fold(0.0, f64::max);
            if peak > 0.0 {
                slot.iter_mut().for_each(|v| *v /= peak);
            } else {
                // Centre far outside the grid: put the peak on the nearest cell.
                let cx = c[0].round().clamp(0.0, (width - 1) as f64) as usize;
                let cy = c[1].round().clamp(0.0, (height - 1) as f64) as usize;
                slot[cy * width + cx] = 1.0;
            }
        }
        Ok(HeatmapTarget {
            maps: Heatmaps {
                width,
                height,
                joints: centers.len(),
                data,
            },
            sigma_px,
        })
    }
}

/// `count` evenly spaced bin centres covering `[lo, hi]`.
pub fn bin_centers(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    let step = (hi - lo) / count as f64;
    (0..count).map(|k| lo + (k as f64 + 0.5) * step).collect()
}

/// Depth axis spanning a data range widened by 10% on each side.
pub fn depth_axis_for_range(min: f64, max: f64, bins: usize) -> Vec<f64> {
    let pad = 0.1 * (max - min).abs().max(f64::EPSILON);
    bin_centers(min - pad, max + pad, bins)
}

pub fn volume_softmax(scores: &VolumeScores) -> ProbVolume {
    let v = scores.shape.voxels_per_joint();
    let mut data = vec![0.0; scores.data.len()];
    for (src, dst) in scores.data.chunks(v).zip(data.chunks_mut(v)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total += *d;
        }
        dst.iter_mut().for_each(|d| *d /= total);
    }
    ProbVolume {
        shape: scores.shape,
        data,
    }
}

/// `p(x, y | n)`: sum-pooling over depth slices.
pub fn marginal_2d(p: &ProbVolume) -> Heatmaps {
    let s = p.shape;
    let plane = s.pixels_per_joint();
    let mut data = vec![0.0; s.joints * plane];
    for n in 0..s.joints {
        let out = &mut data[n * plane..(n + 1) * plane];
        for slice in p.joint(n).chunks(plane) {
            out.iter_mut().zip(slice).for_each(|(o, v)| *o += v);
        }
    }
    Heatmaps {
        width: s.width,
        height: s.height,
        joints: s.joints,
        data,
    }
}

/// `p(z | n)`: sum-pooling over each slice.
pub fn marginal_depth(p: &ProbVolume) -> Vec<Vec<f64>> {
    let plane = p.shape.pixels_per_joint();
    (0..p.shape.joints)
        .map(|n| p.joint(n).chunks(plane).map(|slice| slice.iter().sum()).collect())
        .collect()
}

/// Expected depth-bin coordinate under a depth marginal.
pub fn soft_depth(p_z: &[f64], axis_coords: &[f64]) -> Result<f64> {
    check_dim(axis_coords.len(), p_z.len())?;
    if p_z.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::Contract("depth marginal has negative mass".into()));
    }
    let total: f64 = p_z.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::Contract(format!("depth marginal sums to {total}, not 1")));
    }
    Ok(p_z.iter().zip(axis_coords).map(|(p, c)| p * c).sum())
}

/// Pushes a gradient on probabilities back through the per-joint softmax.
fn softmax_backward(p: &ProbVolume, grad_p: &[f64]) -> Vec<f64> {
    let v = p.shape.voxels_per_joint();
    let mut out = vec![0.0; grad_p.len()];
    for ((pj, gj), oj) in p.data.chunks(v).zip(grad_p.chunks(v)).zip(out.chunks_mut(v)) {
        let dot: f64 = pj.iter().zip(gj).map(|(a, b)| a * b).sum();
        for ((o, pv), gv) in oj.iter_mut().zip(pj).zip(gj) {
            *o = pv * (gv - dot);
        }
    }
    out
}

fn check_targets(shape: &GridShape, targets: &HeatmapTarget) -> Result<()> {
    check_dim(shape.width, targets.maps.width)?;
    check_dim(shape.height, targets.maps.height)?;
    check_dim(shape.joints, targets.maps.joints)
}

/// Adds the heatmap term's gradient with respect to `p` into `grad_p`.
fn accumulate_heat(
    shape: &GridShape,
    marg: &Heatmaps,
    targets: &HeatmapTarget,
    weight: f64,
    grad_p: &mut [f64],
) -> f64 {
    let plane = shape.pixels_per_joint();
    let mut loss = 0.0;
    for n in 0..shape.joints {
        let diff: Vec<f64> = marg
            .joint(n)
            .iter()
            .zip(targets.maps.joint(n))
            .map(|(m, t)| m - t)
            .collect();
        loss += diff.iter().map(|d| d * d).sum::<f64>();
        let base = n * shape.voxels_per_joint();
        for z in 0..shape.depth {
            let slice = &mut grad_p[base + z * plane..base + (z + 1) * plane];
            slice.iter_mut().zip(&diff).for_each(|(g, d)| *g += weight * 2.0 * d);
        }
    }
    loss
}

/// L2 between the 2D marginals of the softmaxed scores and the targets, with
/// the gradient taken all the way back to the scores.
pub fn heatmap_loss(scores: &VolumeScores, targets: &HeatmapTarget) -> Result<(f64, Vec<f64>)> {
    check_targets(&scores.shape, targets)?;
    let p = volume_softmax(scores);
    let marg = marginal_2d(&p);
    let mut grad_p = vec![0.0; p.data.len()];
    let loss = accumulate_heat(&scores.shape, &marg, targets, 1.0, &mut grad_p);
    Ok((loss, softmax_backward(&p, &grad_p)))
}

/// L2 between two stacks of maps, no backward pass.
pub fn heatmap_distance(pred: &Heatmaps, targets: &HeatmapTarget) -> Result<f64> {
    check_dim(targets.maps.data.len(), pred.data.len())?;
    Ok(pred
        .data
        .iter()
        .zip(&targets.maps.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

#[derive(Debug, Clone, PartialEq)]
pub struct VolumeLoss {
    pub loss: f64,
    pub rank: f64,
    pub heat: f64,
    pub soft_depths: Vec<f64>,
    pub grad: Vec<f64>,
}

/// `rank_loss(soft depths) + lambda * heatmap_loss`, differentiated with
/// respect to every voxel score.
pub fn volumetric_weak_loss(
    scores: &VolumeScores,
    relations: &RelationSet,
    targets: &HeatmapTarget,
    lambda: f64,
) -> Result<VolumeLoss> {
    check_targets(&scores.shape, targets)?;
    let shape = scores.shape;
    let p = volume_softmax(scores);
    let depths = soft_depths(&p, &scores.axis_coords)?;
    let (rank, grad_z) = rank_loss(&depths, relations)?;

    let mut grad_p = vec![0.0; p.data.len()];
    let heat = accumulate_heat(&shape, &marginal_2d(&p), targets, lambda, &mut grad_p);
    add_depth_gradient(&shape, &scores.axis_coords, &grad_z, &mut grad_p);
    Ok(VolumeLoss {
        loss: rank + lambda * heat,
        rank,
        heat,
        soft_depths: depths,
        grad: softmax_backward(&p, &grad_p),
    })
}

/// Soft depth for every joint of a probability volume.
pub fn soft_depths(p: &ProbVolume, axis_coords: &[f64]) -> Result<Vec<f64>> {
    marginal_depth(p)
        .iter()
        .map(|pz| soft_depth(pz, axis_coords))
        .collect()
}

/// Expected 2D cell coordinate `(x, y)` for every joint of a stack of maps.
pub fn soft_argmax_2d(maps: &Heatmaps) -> Vec<[f64; 2]> {
    (0..maps.joints)
        .map(|n| {
            let m = maps.joint(n);
            let total: f64 = m.iter().sum();
            let mut acc = [0.0; 2];
            for y in 0..maps.height {
                for x in 0..maps.width {
                    let w = m[y * maps.width + x];
                    acc[0] += w * x as f64;
                    acc[1] += w * y as f64;
                }
            }
            [acc[0] / total, acc[1] / total]
        })
        .collect()
}

fn add_depth_gradient(shape: &GridShape, axis: &[f64], grad_z: &[f64], grad_p: &mut [f64]) {
    let plane = shape.pixels_per_joint();
    for n in 0..shape.joints {
        let base = n * shape.voxels_per_joint();
        for (z, c) in axis.iter().enumerate() {
            let g = grad_z[n] * c;
            grad_p[base + z * plane..base + (z + 1) * plane]
                .iter_mut()
                .for_each(|v| *v += g);
        }
    }
}

/// Fully supervised counterpart of [`volumetric_weak_loss`]: the depth
/// marginal's mean is regressed onto metric depths instead of ranked.
pub fn volumetric_full_loss(
    scores: &VolumeScores,
    gt_depths: &[f64],
    targets: &HeatmapTarget,
    lambda: f64,
) -> Result<VolumeLoss> {
    check_targets(&scores.shape, targets)?;
    check_dim(scores.shape.joints, gt_depths.len())?;
    let shape = scores.shape;
    let p = volume_softmax(scores);
    let depths = soft_depths(&p, &scores.axis_coords)?;
    let mut depth_loss = 0.0;
    let grad_z: Vec<f64> = depths
        .iter()
        .zip(gt_depths)
        .map(|(z, g)| {
            depth_loss += (z - g) * (z - g);
            2.0 * (z - g)
        })
        .collect();
    let mut grad_p = vec![0.0; p.data.len()];
    let heat = accumulate_heat(&shape, &marginal_2d(&p), targets, lambda, &mut grad_p);
    add_depth_gradient(&shape, &scores.axis_coords, &grad_z, &mut grad_p);
    Ok(VolumeLoss {
        loss: depth_loss + lambda * heat,
        rank: depth_loss,
        heat,
        soft_depths: depths,
        grad: softmax_backward(&p, &grad_p),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct DumpHeader {
    #[serde(flatten)]
    shape: GridShape,
    axis_coords: Vec<f64>,
}

/// Writes scores as a length-prefixed JSON header followed by little-endian
/// f64 values in x-fastest order.
pub fn write_volume_dump<W: Write>(out: W, scores: &VolumeScores) -> Result<()> {
    let header = DumpHeader {
        shape: scores.shape,
        axis_coords: scores.axis_coords.clone(),
    };
    write_framed(out, &serde_json::to_vec(&header)?, &scores.data)
}

pub fn read_volume_dump<R: Read>(input: R) -> Result<VolumeScores> {
    let (header, data) = read_framed(input)?;
    let header: DumpHeader = serde_json::from_slice(&header)?;
    let shape = GridShape::new(
        header.shape.width,
        header.shape.height,
        header.shape.depth,
        header.shape.joints,
    )?;
    VolumeScores::new(shape, data, header.axis_coords)
}

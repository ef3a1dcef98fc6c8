//! Ordinal depth relations and the losses built on them.
//!
//! All losses return exact analytic gradients next to the value. Reductions
//! are sums over pairs / joints; averaging over a batch is left to callers.

use std::collections::HashSet;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{check_dim, Error, Result};
use crate::geometry::Pose2D;

/// Default weight of the keypoint term in the weakly supervised objective.
pub const DEFAULT_KEYPOINT_WEIGHT: f64 = 100.0;

/// Depth gap (mm) below which two joints count as "roughly the same depth".
pub const DEFAULT_TIE_THRESHOLD_MM: f64 = 100.0;

/// Ordinal depth relation of joint `i` with respect to joint `j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Relation {
    /// `i` is closer than `j` (r = +1).
    Closer,
    /// `j` is closer than `i` (r = -1).
    Farther,
    /// Roughly the same depth (r = 0).
    Same,
}

impl Relation {
    pub fn value(self) -> i8 {
        match self {
            Relation::Closer => 1,
            Relation::Farther => -1,
            Relation::Same => 0,
        }
    }

    pub fn from_value(r: i64) -> Result<Self> {
        match r {
            1 => Ok(Relation::Closer),
            -1 => Ok(Relation::Farther),
            0 => Ok(Relation::Same),
            other => Err(Error::Contract(format!("relation must be -1, 0 or +1, got {other}"))),
        }
    }

    pub fn reversed(self) -> Self {
        match self {
            Relation::Closer => Relation::Farther,
            Relation::Farther => Relation::Closer,
            Relation::Same => Relation::Same,
        }
    }
}

impl Serialize for Relation {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_i8(self.value())
    }
}

impl<'de> Deserialize<'de> for Relation {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = i64::deserialize(d)?;
        Relation::from_value(v).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OrdinalRelation {
    pub i: usize,
    pub j: usize,
    pub r: Relation,
}

impl OrdinalRelation {
    pub fn new(i: usize, j: usize, r: Relation) -> Result<Self> {
        if i == j {
            return Err(Error::InvalidInput(format!("relation pairs joint {i} with itself")));
        }
        Ok(OrdinalRelation { i, j, r })
    }

    fn key(&self) -> (usize, usize) {
        (self.i.min(self.j), self.i.max(self.j))
    }
}

/// The annotated subset of joint pairs. Relations need not be globally
/// consistent, but each unordered pair appears at most once.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RelationSet {
    pairs: Vec<OrdinalRelation>,
}

impl RelationSet {
    pub fn new(pairs: Vec<OrdinalRelation>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(pairs.len());
        for rel in &pairs {
            if rel.i == rel.j {
                return Err(Error::InvalidInput(format!("relation pairs joint {} with itself", rel.i)));
            }
            if !seen.insert(rel.key()) {
                return Err(Error::InvalidInput(format!(
                    "duplicate relation for pair ({}, {})",
                    rel.i, rel.j
                )));
            }
        }
        Ok(RelationSet { pairs })
    }

    /// Builds a set without the duplicate check; used where uniqueness holds
    /// by construction.
    pub(crate) fn from_unique(pairs: Vec<OrdinalRelation>) -> Self {
        RelationSet { pairs }
    }

    pub fn pairs(&self) -> &[OrdinalRelation] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn check_indices(&self, joint_count: usize) -> Result<()> {
        for rel in &self.pairs {
            for idx in [rel.i, rel.j] {
                if idx >= joint_count {
                    return Err(Error::Index {
                        index: idx,
                        len: joint_count,
                    });
                }
            }
        }
        Ok(())
    }

    /// Relation for the unordered pair `{a, b}`, oriented as `a` versus `b`.
    pub fn get(&self, a: usize, b: usize) -> Option<Relation> {
        self.pairs.iter().find_map(|rel| {
            if rel.i == a && rel.j == b {
                Some(rel.r)
            } else if rel.i == b && rel.j == a {
                Some(rel.r.reversed())
            } else {
                None
            }
        })
    }
}

impl<'de> Deserialize<'de> for RelationSet {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            pairs: Vec<OrdinalRelation>,
        }
        let raw = Raw::deserialize(d)?;
        RelationSet::new(raw.pairs).map_err(serde::de::Error::custom)
    }
}

/// All `C(N, 2)` relations implied by metric depths with a tie band.
pub fn relations_from_depths(z: &[f64], threshold_mm: f64) -> Result<RelationSet> {
    if !(threshold_mm >= 0.0 && threshold_mm.is_finite()) {
        return Err(Error::InvalidInput(format!("threshold must be >= 0, got {threshold_mm}")));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite depth".into()));
    }
    let n = z.len();
    let mut pairs = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            pairs.push(OrdinalRelation {
                i,
                j,
                r: relation_between(z[i], z[j], threshold_mm),
            });
        }
    }
    Ok(RelationSet::from_unique(pairs))
}

/// Relation of a joint at depth `zi` versus one at `zj`.
pub fn relation_between(zi: f64, zj: f64, threshold_mm: f64) -> Relation {
    let gap = zi - zj;
    if gap.abs() < threshold_mm || gap == 0.0 {
        Relation::Same
    } else if gap < 0.0 {
        Relation::Closer
    } else {
        Relation::Farther
    }
}

/// `log(1 + exp(t))` without overflow.
pub fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairLoss {
    pub loss: f64,
    pub d_zi: f64,
    pub d_zj: f64,
}

pub fn pair_rank_loss(zi: f64, zj: f64, r: Relation) -> PairLoss {
    match r {
        Relation::Closer => {
            let t = zi - zj;
            let s = sigmoid(t);
            PairLoss {
                loss: softplus(t),
                d_zi: s,
                d_zj: -s,
            }
        }
        Relation::Farther => {
            let t = zj - zi;
            let s = sigmoid(t);
            PairLoss {
                loss: softplus(t),
                d_zi: -s,
                d_zj: s,
            }
        }
        Relation::Same => {
            let d = zi - zj;
            PairLoss {
                loss: d * d,
                d_zi: 2.0 * d,
                d_zj: -2.0 * d,
            }
        }
    }
}

/// How pair losses are combined over the annotated set.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RankReduction {
    #[default]
    Sum,
    /// Divide by the number of annotated pairs.
    Mean,
}

pub fn rank_loss(z: &[f64], relations: &RelationSet) -> Result<(f64, Vec<f64>)> {
    rank_loss_with(z, relations, RankReduction::Sum)
}

pub fn rank_loss_with(
    z: &[f64],
    relations: &RelationSet,
    reduction: RankReduction,
) -> Result<(f64, Vec<f64>)> {
    relations.check_indices(z.len())?;
    let mut loss = 0.0;
    let mut grad = vec![0.0; z.len()];
    for rel in relations.pairs() {
        let p = pair_rank_loss(z[rel.i], z[rel.j], rel.r);
        loss += p.loss;
        grad[rel.i] += p.d_zi;
        grad[rel.j] += p.d_zj;
    }
    if reduction == RankReduction::Mean && !relations.is_empty() {
        let k = relations.len() as f64;
        loss /= k;
        grad.iter_mut().for_each(|g| *g /= k);
    }
    Ok((loss, grad))
}

/// Squared 2D error summed over visible joints. `visibility = None` means
/// every joint is visible.
pub fn keypoint_loss(
    pred: &Pose2D,
    gt: &Pose2D,
    visibility: Option<&[bool]>,
) -> Result<(f64, Vec<[f64; 2]>)> {
    check_dim(gt.len(), pred.len())?;
    if let Some(v) = visibility {
        check_dim(gt.len(), v.len())?;
    }
    let mut loss = 0.0;
    let mut grad = vec![[0.0; 2]; pred.len()];
    for (k, (p, g)) in pred.joints.iter().zip(&gt.joints).enumerate() {
        if visibility.is_some_and(|v| !v[k]) {
            continue;
        }
        let (dx, dy) = (p[0] - g[0], p[1] - g[1]);
        loss += dx * dx + dy * dy;
        grad[k] = [2.0 * dx, 2.0 * dy];
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeakLoss {
    pub loss: f64,
    pub rank: f64,
    pub keypoint: f64,
    pub grad_depth: Vec<f64>,
    pub grad_2d: Vec<[f64; 2]>,
}

/// `rank_loss + lambda * keypoint_loss`.
pub fn combined_weak_loss(
    z: &[f64],
    relations: &RelationSet,
    pred2d: &Pose2D,
    gt2d: &Pose2D,
    visibility: Option<&[bool]>,
    lambda: f64,
) -> Result<WeakLoss> {
    check_dim(pred2d.len(), z.len())?;
    let (rank, grad_depth) = rank_loss(z, relations)?;
    let (keypoint, mut grad_2d) = keypoint_loss(pred2d, gt2d, visibility)?;
    grad_2d.iter_mut().flatten().for_each(|g| *g *= lambda);
    Ok(WeakLoss {
        loss: rank + lambda * keypoint,
        rank,
        keypoint,
        grad_depth,
        grad_2d,
    })
}

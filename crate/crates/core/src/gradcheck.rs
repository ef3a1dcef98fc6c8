//! Finite-difference checking of analytic gradients.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Pose2D, Pose3D};
use crate::network::{LayerSpec, NetworkParams};
use crate::reconstruction::l3d_loss;
use crate::supervision::{combined_weak_loss, keypoint_loss, pair_rank_loss, rank_loss, OrdinalRelation, Relation, RelationSet};
use crate::volumetric::{
    bin_centers, heatmap_loss, volumetric_full_loss, volumetric_weak_loss, GridShape, HeatmapTarget, VolumeScores,
};

/// Central differences of `f` around `x` with step `h`.
pub fn central_difference<F>(x: &[f64], h: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|k| {
            probe[k] = x[k] + h;
            let up = f(&probe);
            probe[k] = x[k] - h;
            let down = f(&probe);
            probe[k] = x[k];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|)` in the Euclidean norm over the whole gradient.
/// Falls back to the absolute difference when both gradients vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Probe step for every suite.
pub const STEP: f64 = 1e-5;
/// Tolerance for closed-form losses.
pub const LOSS_TOLERANCE: f64 = 1e-6;
/// Tolerance for losses differentiated through the softmax volume.
pub const VOLUME_TOLERANCE: f64 = 1e-5;
/// Random configurations per check unless overridden.
pub const DEFAULT_CONFIGS: usize = 100;

/// Which suites to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    All,
    Supervision,
    Volumetric,
    Reconstruction,
    Network,
}

impl Scope {
    pub const ALL: [Scope; 5] = [
        Scope::All,
        Scope::Supervision,
        Scope::Volumetric,
        Scope::Reconstruction,
        Scope::Network,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Scope::All => "all",
            Scope::Supervision => "supervision",
            Scope::Volumetric => "volumetric",
            Scope::Reconstruction => "reconstruction",
            Scope::Network => "network",
        }
    }

    fn includes(self, other: Scope) -> bool {
        self == Scope::All || self == other
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scope::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown gradcheck scope {s:?}")))
    }
}

/// Outcome of one finite-difference check over many random configurations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub scope: Scope,
    pub configs: usize,
    pub worst_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    fn new(name: &str, scope: Scope, errors: &[f64], tolerance: f64) -> Self {
        let worst_error = errors.iter().copied().fold(0.0, f64::max);
        CheckResult {
            name: name.into(),
            scope,
            configs: errors.len(),
            worst_error,
            tolerance,
            passed: errors.iter().all(|e| *e <= tolerance),
        }
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<22} configs={:<4} worst={:.3e} tol={:.0e} [{}]",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.configs,
            self.worst_error,
            self.tolerance,
            self.scope
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub scope: Scope,
    pub checks: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Runs every suite selected by `scope` with `configs` random
/// configurations per check.
pub fn run_suites(scope: Scope, seed: u64, configs: usize) -> Result<GradcheckReport> {
    if configs == 0 {
        return Err(Error::InvalidInput("configs must be positive".into()));
    }
    type Suite = fn(&mut ChaCha8Rng) -> Result<f64>;
    let suites: [(&str, Scope, f64, Suite); 9] = [
        ("pair_rank_loss", Scope::Supervision, LOSS_TOLERANCE, pair_rank_case),
        ("rank_loss", Scope::Supervision, LOSS_TOLERANCE, rank_case),
        ("keypoint_loss", Scope::Supervision, LOSS_TOLERANCE, keypoint_case),
        ("combined_weak_loss", Scope::Supervision, LOSS_TOLERANCE, combined_case),
        ("heatmap_loss", Scope::Volumetric, VOLUME_TOLERANCE, heatmap_case),
        ("volumetric_weak_loss", Scope::Volumetric, VOLUME_TOLERANCE, volumetric_weak_case),
        ("volumetric_full_loss", Scope::Volumetric, VOLUME_TOLERANCE, volumetric_full_case),
        ("l3d_loss", Scope::Reconstruction, LOSS_TOLERANCE, l3d_case),
        ("network_backward", Scope::Network, LOSS_TOLERANCE, network_case),
    ];
    let mut checks = Vec::new();
    for (k, (name, suite_scope, tol, case)) in suites.into_iter().enumerate() {
        if !scope.includes(suite_scope) {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
        let errors = (0..configs).map(|_| case(&mut rng)).collect::<Result<Vec<_>>>()?;
        checks.push(CheckResult::new(name, suite_scope, &errors, tol));
    }
    Ok(GradcheckReport { seed, scope, checks })
}

/// Checks backpropagation through given (e.g. checkpointed) parameters:
/// the full input gradient plus a random subset of parameter coordinates.
pub fn check_network_params(params: &NetworkParams, seed: u64, configs: usize) -> Result<CheckResult> {
    if !params.is_finite() {
        return Err(Error::InvalidInput("network parameters are not finite".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flat = params.to_flat();
    let mut errors = Vec::with_capacity(configs);
    let mut attempts = 0;
    while errors.len() < configs {
        attempts += 1;
        if attempts > 100 * configs {
            return Err(Error::Contract("no probe input avoided the ReLU kinks".into()));
        }
        let x = Array2::from_shape_fn((1, params.input_dim()), |_| rng.random_range(-1.0..1.0));
        let w = Array2::from_shape_fn((1, params.output_dim()), |_| rng.random_range(-1.0..1.0));
        let (_, cache) = params.forward(&x, None)?;
        if cache.min_abs_preactivation() < 1e-3 {
            continue;
        }
        let (g, gx) = params.backward(&cache, &w)?;
        let xin = x.as_slice().expect("standard layout").to_vec();
        let fdx = central_difference(&xin, STEP, |v| probe(params, v, &w));
        let mut err = relative_error(&gx.iter().copied().collect::<Vec<_>>(), &fdx);

        let picks: Vec<usize> = (0..flat.len().min(32)).map(|_| rng.random_range(0..flat.len())).collect();
        let g = g.to_flat();
        let analytic: Vec<f64> = picks.iter().map(|&k| g[k]).collect();
        let mut probe_params = params.clone();
        let mut buf = flat.clone();
        let numeric: Vec<f64> = picks
            .iter()
            .map(|&k| {
                let mut eval = |v: f64| {
                    buf[k] = v;
                    probe_params.set_flat(&buf).expect("same layout");
                    probe(&probe_params, &xin, &w)
                };
                let d = (eval(flat[k] + STEP) - eval(flat[k] - STEP)) / (2.0 * STEP);
                buf[k] = flat[k];
                d
            })
            .collect();
        err = err.max(relative_error(&analytic, &numeric));
        errors.push(err);
    }
    Ok(CheckResult::new("checkpoint_backward", Scope::Network, &errors, LOSS_TOLERANCE))
}

fn probe(params: &NetworkParams, x: &[f64], w: &Array2<f64>) -> f64 {
    let x = Array2::from_shape_vec((w.nrows(), x.len() / w.nrows()), x.to_vec()).expect("probe shape");
    let (y, _) = params.forward(&x, None).expect("probe forward");
    (&y * w).sum()
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn random_relation(rng: &mut ChaCha8Rng) -> Relation {
    [Relation::Closer, Relation::Farther, Relation::Same][rng.random_range(0..3)]
}

/// Random subset of pairs over `n` joints with random relations.
fn random_relations(rng: &mut ChaCha8Rng, n: usize) -> RelationSet {
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(0.6) {
                let (a, b) = if rng.random_bool(0.5) { (i, j) } else { (j, i) };
                pairs.push(OrdinalRelation { i: a, j: b, r: random_relation(rng) });
            }
        }
    }
    RelationSet::new(pairs).expect("pairs are unique")
}

fn points2(v: &[f64]) -> Vec<[f64; 2]> {
    v.chunks(2).map(|c| [c[0], c[1]]).collect()
}

fn points3(v: &[f64]) -> Vec<[f64; 3]> {
    v.chunks(3).map(|c| [c[0], c[1], c[2]]).collect()
}

fn pair_rank_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let z = uniform(rng, 2, -4.0, 4.0);
    let r = random_relation(rng);
    let p = pair_rank_loss(z[0], z[1], r);
    let fd = central_difference(&z, STEP, |v| pair_rank_loss(v[0], v[1], r).loss);
    Ok(relative_error(&[p.d_zi, p.d_zj], &fd))
}

fn rank_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let n = rng.random_range(2..=14);
    let z = uniform(rng, n, -3.0, 3.0);
    let rels = random_relations(rng, n);
    let (_, g) = rank_loss(&z, &rels)?;
    let fd = central_difference(&z, STEP, |v| rank_loss(v, &rels).expect("valid indices").0);
    Ok(relative_error(&g, &fd))
}

fn keypoint_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let n = rng.random_range(1..=14);
    let x = uniform(rng, 2 * n, -2.0, 2.0);
    let gt = Pose2D::new(points2(&uniform(rng, 2 * n, -2.0, 2.0)), "");
    let vis: Vec<bool> = (0..n).map(|_| rng.random_bool(0.8)).collect();
    let (_, g) = keypoint_loss(&Pose2D::new(points2(&x), ""), &gt, Some(&vis))?;
    let g: Vec<f64> = g.into_iter().flatten().collect();
    let fd = central_difference(&x, STEP, |v| {
        keypoint_loss(&Pose2D::new(points2(v), ""), &gt, Some(&vis)).expect("same size").0
    });
    Ok(relative_error(&g, &fd))
}

fn combined_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let n = rng.random_range(2..=14);
    let lambda = rng.random_range(0.1..100.0);
    // Depths first, then interleaved 2D coordinates.
    let x = uniform(rng, 3 * n, -2.0, 2.0);
    let gt = Pose2D::new(points2(&uniform(rng, 2 * n, -2.0, 2.0)), "");
    let rels = random_relations(rng, n);
    let eval = |v: &[f64]| combined_weak_loss(&v[..n], &rels, &Pose2D::new(points2(&v[n..]), ""), &gt, None, lambda);
    let w = eval(&x)?;
    let mut g = w.grad_depth;
    g.extend(w.grad_2d.into_iter().flatten());
    let fd = central_difference(&x, STEP, |v| eval(v).expect("same size").loss);
    Ok(relative_error(&g, &fd))
}

struct VolumeCase {
    scores: VolumeScores,
    targets: HeatmapTarget,
    relations: RelationSet,
    depths: Vec<f64>,
    lambda: f64,
}

fn volume_case(rng: &mut ChaCha8Rng) -> Result<VolumeCase> {
    let (w, h, d) = (rng.random_range(2..=5), rng.random_range(2..=5), rng.random_range(2..=5));
    let n = rng.random_range(1..=3);
    let shape = GridShape::new(w, h, d, n)?;
    let lo = rng.random_range(-2.0..0.0);
    let scores = VolumeScores::new(shape, uniform(rng, shape.len(), -2.0, 2.0), bin_centers(lo, lo + 2.0, d))?;
    let centers: Vec<[f64; 2]> = (0..n)
        .map(|_| [rng.random_range(0.0..w as f64 - 1.0), rng.random_range(0.0..h as f64 - 1.0)])
        .collect();
    let targets = HeatmapTarget::gaussian(w, h, &centers, rng.random_range(0.5..1.5))?;
    Ok(VolumeCase {
        relations: random_relations(rng, n),
        depths: uniform(rng, n, lo, lo + 2.0),
        lambda: rng.random_range(0.1..100.0),
        scores,
        targets,
    })
}

fn volume_fd<F>(c: &VolumeCase, f: F) -> Vec<f64>
where
    F: Fn(&VolumeScores) -> f64,
{
    central_difference(&c.scores.data, STEP, |x| {
        let v = VolumeScores {
            data: x.to_vec(),
            ..c.scores.clone()
        };
        f(&v)
    })
}

fn heatmap_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let c = volume_case(rng)?;
    let (_, g) = heatmap_loss(&c.scores, &c.targets)?;
    let fd = volume_fd(&c, |v| heatmap_loss(v, &c.targets).expect("same shape").0);
    Ok(relative_error(&g, &fd))
}

fn volumetric_weak_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let c = volume_case(rng)?;
    let out = volumetric_weak_loss(&c.scores, &c.relations, &c.targets, c.lambda)?;
    let fd = volume_fd(&c, |v| {
        volumetric_weak_loss(v, &c.relations, &c.targets, c.lambda).expect("same shape").loss
    });
    Ok(relative_error(&out.grad, &fd))
}

fn volumetric_full_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let c = volume_case(rng)?;
    let out = volumetric_full_loss(&c.scores, &c.depths, &c.targets, c.lambda)?;
    let fd = volume_fd(&c, |v| {
        volumetric_full_loss(v, &c.depths, &c.targets, c.lambda).expect("same shape").loss
    });
    Ok(relative_error(&out.grad, &fd))
}

fn l3d_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let n = rng.random_range(1..=14);
    let x = uniform(rng, 3 * n, -500.0, 500.0);
    let gt = Pose3D::new(points3(&uniform(rng, 3 * n, -500.0, 500.0)), "");
    let (_, g) = l3d_loss(&Pose3D::new(points3(&x), ""), &gt)?;
    let g: Vec<f64> = g.into_iter().flatten().collect();
    let fd = central_difference(&x, STEP, |v| l3d_loss(&Pose3D::new(points3(v), ""), &gt).expect("same size").0);
    Ok(relative_error(&g, &fd))
}

/// Random architecture of at most three layers with widths up to 8.
fn network_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    loop {
        let input = rng.random_range(1..=8);
        let layers = rng.random_range(1..=3);
        let mut specs = Vec::with_capacity(layers);
        let mut dim = input;
        for _ in 0..layers {
            specs.push(match rng.random_range(0..3) {
                0 => {
                    let out = rng.random_range(1..=8);
                    let s = LayerSpec::linear(dim, out);
                    dim = out;
                    s
                }
                1 => LayerSpec::relu(dim, 0.0),
                _ => LayerSpec::residual(dim, 0.0),
            });
        }
        let mut params = NetworkParams::init(&specs, rng.random())?;
        let mut flat = params.to_flat();
        flat.iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
        params.set_flat(&flat)?;
        let batch = rng.random_range(1..=3);
        let x = Array2::from_shape_fn((batch, input), |_| rng.random_range(-1.0..1.0));
        let w = Array2::from_shape_fn((batch, dim), |_| rng.random_range(-1.0..1.0));
        let (_, cache) = params.forward(&x, None)?;
        if cache.min_abs_preactivation() < 1e-3 {
            continue;
        }
        let (g, gx) = params.backward(&cache, &w)?;
        let xin = x.as_slice().expect("standard layout").to_vec();
        let mut probe_params = params.clone();
        let fd = central_difference(&flat, STEP, |p| {
            probe_params.set_flat(p).expect("same layout");
            probe(&probe_params, &xin, &w)
        });
        let fdx = central_difference(&xin, STEP, |v| probe(&params, v, &w));
        let ex = relative_error(&gx.iter().copied().collect::<Vec<_>>(), &fdx);
        return Ok(relative_error(&g.to_flat(), &fd).max(ex));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass() {
        let report = run_suites(Scope::All, 0, DEFAULT_CONFIGS).unwrap();
        assert_eq!(report.checks.len(), 9);
        for c in &report.checks {
            assert!(c.passed, "{c}");
            assert_eq!(c.configs, DEFAULT_CONFIGS);
        }
    }

    #[test]
    fn scope_selects_suites() {
        let report = run_suites(Scope::Volumetric, 1, 3).unwrap();
        let names: Vec<&str> = report.checks.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names, ["heatmap_loss", "volumetric_weak_loss", "volumetric_full_loss"]);
        assert!(report.checks.iter().all(|c| c.scope == Scope::Volumetric));
    }

    #[test]
    fn suites_are_deterministic() {
        assert_eq!(run_suites(Scope::Supervision, 5, 10).unwrap(), run_suites(Scope::Supervision, 5, 10).unwrap());
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        let x = [0.3, -1.2];
        let fd = central_difference(&x, STEP, |v| v[0] * v[0] + 3.0 * v[1]);
        assert!(relative_error(&[0.6, 3.0], &fd) < LOSS_TOLERANCE);
        assert!(relative_error(&[0.6, 3.0 * 1.001], &fd) > LOSS_TOLERANCE);
    }

    #[test]
    fn checkpoint_params_check() {
        let specs = crate::network::lifting_network_spec(6, 16, 3, 2, 0.0);
        let params = NetworkParams::init(&specs, 4).unwrap();
        let c = check_network_params(&params, 9, 10).unwrap();
        assert!(c.passed, "{c}");
    }

    #[test]
    fn scope_parsing() {
        for s in Scope::ALL {
            assert_eq!(s.as_str().parse::<Scope>().unwrap(), s);
        }
        assert!("everything".parse::<Scope>().is_err());
    }
}

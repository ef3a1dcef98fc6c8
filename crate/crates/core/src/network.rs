//! Small feed-forward networks with hand-written reverse mode, and RMSprop.
//!
//! Activations are batched row-wise: an input of shape `(batch, in_dim)`
//! produces an output of shape `(batch, out_dim)`.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::io::{read_framed, write_framed};

/// Learning rate used for every trainable component.
pub const DEFAULT_LEARNING_RATE: f64 = 2.5e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    Linear,
    Relu,
    /// `x + relu(W2 relu(W1 x + b1) + b2)` with dropout after each ReLU.
    ResidualBlock,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_dim: usize,
    pub out_dim: usize,
    #[serde(default)]
    pub dropout_rate: f64,
}

impl LayerSpec {
    pub fn linear(in_dim: usize, out_dim: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Linear,
            in_dim,
            out_dim,
            dropout_rate: 0.0,
        }
    }

    pub fn relu(dim: usize, dropout_rate: f64) -> Self {
        LayerSpec {
            kind: LayerKind::Relu,
            in_dim: dim,
            out_dim: dim,
            dropout_rate,
        }
    }

    pub fn residual(dim: usize, dropout_rate: f64) -> Self {
        LayerSpec {
            kind: LayerKind::ResidualBlock,
            in_dim: dim,
            out_dim: dim,
            dropout_rate,
        }
    }
}

/// Input layer, ReLU, `blocks` residual blocks of width `hidden`, output layer.
pub fn lifting_network_spec(
    input: usize,
    hidden: usize,
    output: usize,
    blocks: usize,
    dropout_rate: f64,
) -> Vec<LayerSpec> {
    let mut specs = vec![LayerSpec::linear(input, hidden), LayerSpec::relu(hidden, dropout_rate)];
    specs.extend((0..blocks).map(|_| LayerSpec::residual(hidden, dropout_rate)));
    specs.push(LayerSpec::linear(hidden, output));
    specs
}

pub fn validate_specs(specs: &[LayerSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::InvalidInput("network has no layers".into()));
    }
    for (k, s) in specs.iter().enumerate() {
        if s.in_dim == 0 || s.out_dim == 0 {
            return Err(Error::InvalidInput(format!("layer {k} has a zero dimension")));
        }
        if s.kind != LayerKind::Linear && s.in_dim != s.out_dim {
            return Err(Error::InvalidInput(format!("layer {k} must preserve its width")));
        }
        if !(0.0..1.0).contains(&s.dropout_rate) {
            return Err(Error::InvalidInput(format!(
                "layer {k} dropout {} outside [0, 1)",
                s.dropout_rate
            )));
        }
        if k > 0 && specs[k - 1].out_dim != s.in_dim {
            return Err(Error::InvalidInput(format!(
                "layer {k} expects width {} but receives {}",
                s.in_dim,
                specs[k - 1].out_dim
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `(in_dim, out_dim)`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    fn glorot(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        Linear {
            weight: Array2::from_shape_fn((in_dim, out_dim), |_| rng.random_range(-bound..=bound)),
            bias: Array1::zeros(out_dim),
        }
    }

    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            weight: Array2::zeros((in_dim, out_dim)),
            bias: Array1::zeros(out_dim),
        }
    }

    fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    Linear(Linear),
    Relu,
    Residual { first: Linear, second: Linear },
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub specs: Vec<LayerSpec>,
    pub layers: Vec<LayerParams>,
    pub seed: u64,
    version: u64,
}

impl NetworkParams {
    /// Glorot-uniform weights and zero biases drawn from `seed`.
    pub fn init(specs: &[LayerSpec], seed: u64) -> Result<Self> {
        validate_specs(specs)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = specs
            .iter()
            .map(|s| match s.kind {
                LayerKind::Linear => LayerParams::Linear(Linear::glorot(s.in_dim, s.out_dim, &mut rng)),
                LayerKind::Relu => LayerParams::Relu,
                LayerKind::ResidualBlock => LayerParams::Residual {
                    first: Linear::glorot(s.in_dim, s.out_dim, &mut rng),
                    second: Linear::glorot(s.out_dim, s.out_dim, &mut rng),
                },
            })
            .collect();
        Ok(NetworkParams {
            specs: specs.to_vec(),
            layers,
            seed,
            version: 0,
        })
    }

    /// Same architecture with every parameter set to zero.
    pub fn zeros(specs: &[LayerSpec]) -> Result<Self> {
        validate_specs(specs)?;
        let layers = specs
            .iter()
            .map(|s| match s.kind {
                LayerKind::Linear => LayerParams::Linear(Linear::zeros(s.in_dim, s.out_dim)),
                LayerKind::Relu => LayerParams::Relu,
                LayerKind::ResidualBlock => LayerParams::Residual {
                    first: Linear::zeros(s.in_dim, s.out_dim),
                    second: Linear::zeros(s.out_dim, s.out_dim),
                },
            })
            .collect();
        Ok(NetworkParams {
            specs: specs.to_vec(),
            layers,
            seed: 0,
            version: 0,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = NetworkParams::zeros(&self.specs).expect("specs already validated");
        z.seed = self.seed;
        z
    }

    pub fn input_dim(&self) -> usize {
        self.specs[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.specs[self.specs.len() - 1].out_dim
    }

    /// Bumped whenever parameters change; forward caches remember it.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub(crate) fn touch(&mut self) {
        self.version += 1;
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for layer in &self.layers {
            let linears: Vec<&Linear> = match layer {
                LayerParams::Linear(l) => vec![l],
                LayerParams::Relu => vec![],
                LayerParams::Residual { first, second } => vec![first, second],
            };
            for l in linears {
                out.push(l.weight.as_slice().expect("standard layout"));
                out.push(l.bias.as_slice().expect("standard layout"));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            let linears: Vec<&mut Linear> = match layer {
                LayerParams::Linear(l) => vec![l],
                LayerParams::Relu => vec![],
                LayerParams::Residual { first, second } => vec![first, second],
            };
            for l in linears {
                out.push(l.weight.as_slice_mut().expect("standard layout"));
                out.push(l.bias.as_slice_mut().expect("standard layout"));
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        check_dim(self.param_count(), flat.len())?;
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        self.touch();
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Runs the network. Passing an RNG enables dropout (training mode);
    /// `None` is deterministic inference.
    pub fn forward(
        &self,
        input: &Array2<f64>,
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<(Array2<f64>, ForwardCache)> {
        check_dim(self.input_dim(), input.ncols())?;
        let mut x = input.clone();
        let mut layers = Vec::with_capacity(self.layers.len());
        for (spec, layer) in self.specs.iter().zip(&self.layers) {
            let rate = spec.dropout_rate;
            match layer {
                LayerParams::Linear(l) => {
                    let y = l.apply(&x);
                    layers.push(LayerCache::Linear { input: x });
                    x = y;
                }
                LayerParams::Relu => {
                    let gate = relu_gate(&x, rate, dropout.as_deref_mut());
                    let y = &x * &gate;
                    layers.push(LayerCache::Relu { pre: x, gate });
                    x = y;
                }
                LayerParams::Residual { first, second } => {
                    let a1 = first.apply(&x);
                    let gate1 = relu_gate(&a1, rate, dropout.as_deref_mut());
                    let h1 = &a1 * &gate1;
                    let a2 = second.apply(&h1);
                    let gate2 = relu_gate(&a2, rate, dropout.as_deref_mut());
                    let y = &x + &(&a2 * &gate2);
                    layers.push(LayerCache::Residual {
                        input: x,
                        pre1: a1,
                        gate1,
                        hidden: h1,
                        pre2: a2,
                        gate2,
                    });
                    x = y;
                }
            }
        }
        Ok((
            x,
            ForwardCache {
                version: self.version,
                batch: input.nrows(),
                layers,
            },
        ))
    }

    /// Inference on a single input vector.
    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        let x = Array2::from_shape_vec((1, input.len()), input.to_vec())
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
        Ok(self.forward(&x, None)?.0.into_raw_vec_and_offset().0)
    }

    /// Reverse pass. Returns parameter gradients and the gradient with
    /// respect to the network input.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        output_grad: &Array2<f64>,
    ) -> Result<(NetworkParams, Array2<f64>)> {
        if cache.version != self.version || cache.layers.len() != self.layers.len() {
            return Err(Error::Contract(
                "forward cache does not belong to the current parameters".into(),
            ));
        }
        check_dim(cache.batch, output_grad.nrows())?;
        check_dim(self.output_dim(), output_grad.ncols())?;
        let mut grads = self.zeros_like();
        let mut g = output_grad.clone();
        for ((layer, lc), grad) in self
            .layers
            .iter()
            .zip(&cache.layers)
            .zip(grads.layers.iter_mut())
            .rev()
        {
            g = match (layer, lc, grad) {
                (LayerParams::Linear(l), LayerCache::Linear { input }, LayerParams::Linear(gl)) => {
                    linear_backward(l, input, &g, gl)
                }
                (LayerParams::Relu, LayerCache::Relu { gate, .. }, LayerParams::Relu) => &g * gate,
                (
                    LayerParams::Residual { first, second },
                    LayerCache::Residual {
                        input,
                        gate1,
                        hidden,
                        gate2,
                        ..
                    },
                    LayerParams::Residual {
                        first: g_first,
                        second: g_second,
                    },
                ) => {
                    let ga2 = &g * gate2;
                    let gh1 = linear_backward(second, hidden, &ga2, g_second);
                    let ga1 = &gh1 * gate1;
                    let gx = linear_backward(first, input, &ga1, g_first);
                    &g + &gx
                }
                _ => return Err(Error::Contract("forward cache layout mismatch".into())),
            };
        }
        Ok((grads, g))
    }
}

fn linear_backward(l: &Linear, input: &Array2<f64>, g: &Array2<f64>, out: &mut Linear) -> Array2<f64> {
    out.weight = input.t().dot(g).as_standard_layout().into_owned();
    out.bias = g.sum_axis(Axis(0));
    g.dot(&l.weight.t())
}

/// ReLU derivative times the (inverted) dropout mask.
fn relu_gate(pre: &Array2<f64>, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Array2<f64> {
    match rng {
        Some(rng) if rate > 0.0 => {
            let keep = 1.0 / (1.0 - rate);
            pre.mapv(|v| {
                let kept = rng.random::<f64>() >= rate;
                if v > 0.0 && kept {
                    keep
                } else {
                    0.0
                }
            })
        }
        _ => pre.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }),
    }
}

#[derive(Debug, Clone)]
enum LayerCache {
    Linear {
        input: Array2<f64>,
    },
    Relu {
        pre: Array2<f64>,
        gate: Array2<f64>,
    },
    Residual {
        input: Array2<f64>,
        pre1: Array2<f64>,
        gate1: Array2<f64>,
        hidden: Array2<f64>,
        pre2: Array2<f64>,
        gate2: Array2<f64>,
    },
}

/// Activations recorded by [`NetworkParams::forward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    batch: usize,
    layers: Vec<LayerCache>,
}

impl ForwardCache {
    /// Smallest |pre-activation| seen by any ReLU; used to keep
    /// finite-difference probes away from kinks.
    pub fn min_abs_preactivation(&self) -> f64 {
        let mut min = f64::INFINITY;
        for lc in &self.layers {
            let pres: Vec<&Array2<f64>> = match lc {
                LayerCache::Linear { .. } => vec![],
                LayerCache::Relu { pre, .. } => vec![pre],
                LayerCache::Residual { pre1, pre2, .. } => vec![pre1, pre2],
            };
            for v in pres.into_iter().flatten() {
                min = min.min(v.abs());
            }
        }
        min
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmsPropConfig {
    pub learning_rate: f64,
    /// Decay of the running mean of squared gradients.
    pub smoothing: f64,
    pub epsilon: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        RmsPropConfig {
            learning_rate: DEFAULT_LEARNING_RATE,
            smoothing: 0.99,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: RmsPropConfig,
    pub mean_square: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &NetworkParams, config: RmsPropConfig) -> Self {
        OptimizerState {
            config,
            mean_square: params.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
            step: 0,
        }
    }
}

/// One RMSprop update: `v <- rho v + (1 - rho) g^2`, `theta <- theta - lr g / (sqrt(v) + eps)`.
pub fn rmsprop_step(state: &mut OptimizerState, params: &mut NetworkParams, grads: &NetworkParams) -> Result<()> {
    let grad_tensors = grads.tensors();
    check_dim(state.mean_square.len(), grad_tensors.len())?;
    if grad_tensors.iter().any(|t| t.iter().any(|v| !v.is_finite())) {
        return Err(Error::Divergence {
            step: state.step as usize,
            reason: "non-finite gradient".into(),
        });
    }
    let RmsPropConfig {
        learning_rate,
        smoothing,
        epsilon,
    } = state.config;
    for ((theta, g), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grad_tensors)
        .zip(state.mean_square.iter_mut())
    {
        check_dim(theta.len(), g.len())?;
        for ((t, &gk), vk) in theta.iter_mut().zip(g).zip(v.iter_mut()) {
            *vk = smoothing * *vk + (1.0 - smoothing) * gk * gk;
            *t -= learning_rate * gk / (vk.sqrt() + epsilon);
        }
    }
    params.touch();
    state.step += 1;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub spec: Vec<LayerSpec>,
    pub seed: u64,
    pub step: u64,
    /// Component-specific metadata (normalisation statistics etc.).
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub fn save_checkpoint(path: &Path, params: &NetworkParams, step: u64, extra: serde_json::Value) -> Result<()> {
    let header = CheckpointHeader {
        spec: params.specs.clone(),
        seed: params.seed,
        step,
        extra,
    };
    write_checkpoint(BufWriter::new(File::create(path)?), params, &header)
}

pub fn write_checkpoint<W: std::io::Write>(out: W, params: &NetworkParams, header: &CheckpointHeader) -> Result<()> {
    write_framed(out, &serde_json::to_vec(header)?, &params.to_flat())
}

pub fn load_checkpoint(path: &Path) -> Result<(NetworkParams, CheckpointHeader)> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

pub fn read_checkpoint<R: std::io::Read>(input: R) -> Result<(NetworkParams, CheckpointHeader)> {
    let (header, weights) = read_framed(input)?;
    let header: CheckpointHeader =
        serde_json::from_slice(&header).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let mut params = NetworkParams::zeros(&header.spec)?;
    params.seed = header.seed;
    if weights.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format("checkpoint contains non-finite weights".into()));
    }
    params
        .set_flat(&weights)
        .map_err(|e| Error::Format(format!("checkpoint weights do not match spec: {e}")))?;
    params.version = 0;
    Ok((params, header))
}

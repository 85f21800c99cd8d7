//! Feed-forward surrogate `U_NN(x,t;θ)` with periodic input embedding,
//! sinusoidal or tanh activations, SIREN-style initialization and learnable
//! physical parameters attached for inverse problems.
//!
//! Layer convention: `depth` counts affine layers. The first and last affine
//! layers have no activation; the activation is applied after every affine
//! layer strictly between them. The spatial input is optionally embedded as
//! `(cos(2παx/L_dom), sin(2παx/L_dom))`, which makes the surrogate exactly
//! periodic over the domain for integer `α`; the time input is rescaled by
//! the scenario horizon so the network sees `t/T ∈ [0,1]`.

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{
    jet_add, jet_mul_scalar, jet_sin, jet_tanh, Algebra, Jet, Jet2, Tape, Values, Var,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Sin,
}

/// Periodic embedding of the spatial coordinate:
/// `x ↦ (cos(2παx/L_dom), sin(2παx/L_dom))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub alpha: f64,
    pub domain_len: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkArch {
    /// Number of affine layers (≥ 1; every catalog network uses 8).
    pub depth: usize,
    /// Hidden width.
    pub width: usize,
    /// Model state dimension (2 for (ρ,j); 6 for (S,I,R,J_S,J_I,J_R)).
    pub output_dim: usize,
    pub activation: Activation,
    pub embedding: Option<Embedding>,
    /// Horizon the time input is divided by before entering the network;
    /// 1.0 means no rescaling.
    pub time_rescale: f64,
    /// SIREN frequency factor in the hidden-layer initialization bound
    /// `±sqrt(6/fan_in)/ω0`.
    pub omega0: f64,
}

impl NetworkArch {
    /// Inputs the first affine layer sees: `(cos, sin, t)` with embedding,
    /// plain `(x, t)` without.
    pub fn input_features(&self) -> usize {
        if self.embedding.is_some() {
            3
        } else {
            2
        }
    }

    /// (fan_in, fan_out) of affine layer `l`.
    pub fn layer_dims(&self, l: usize) -> (usize, usize) {
        let fan_in = if l == 0 {
            self.input_features()
        } else {
            self.width
        };
        let fan_out = if l + 1 == self.depth {
            self.output_dim
        } else {
            self.width
        };
        (fan_in, fan_out)
    }

    /// Whether the activation follows affine layer `l` (all layers strictly
    /// between the first and the last).
    pub fn activated(&self, l: usize) -> bool {
        l >= 1 && l + 1 < self.depth
    }

    /// Weights + biases + learnable scalars: `Σ_l m_l·(m_{l−1}+1) + n_learn`.
    pub fn param_count(&self, n_learnable: usize) -> usize {
        (0..self.depth)
            .map(|l| {
                let (fi, fo) = self.layer_dims(l);
                fo * (fi + 1)
            })
            .sum::<usize>()
            + n_learnable
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.depth == 0 || self.width == 0 || self.output_dim == 0 {
            return Err(NetError::InvalidArch(
                "depth, width and output_dim must be positive".into(),
            ));
        }
        if let Some(e) = self.embedding {
            if !(e.alpha > 0.0) || !(e.domain_len > 0.0) {
                return Err(NetError::InvalidArch(
                    "embedding requires alpha > 0 and domain_len > 0".into(),
                ));
            }
        }
        if !(self.time_rescale > 0.0) || !(self.omega0 > 0.0) {
            return Err(NetError::InvalidArch(
                "time_rescale and omega0 must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Trainable state: per-layer weight matrices (`m_l × m_{l−1}`, row-major),
/// bias vectors, and the ordered list of named learnable physical scalars.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub learnable_names: Vec<String>,
    pub learnable: Vec<f64>,
}

impl NetworkParams {
    pub fn learnable_value(&self, name: &str) -> Option<f64> {
        self.learnable_names
            .iter()
            .position(|n| n == name)
            .map(|i| self.learnable[i])
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
            + self.learnable.len()
    }

    /// Canonical flat order: per layer weights (row-major) then bias, layers
    /// in order, learnable scalars last. Gradient cross-checks and the
    /// optimizer all rely on this single ordering.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.count());
        for l in 0..self.weights.len() {
            out.extend(self.weights[l].iter().copied());
            out.extend(self.biases[l].iter().copied());
        }
        out.extend(self.learnable.iter().copied());
        out
    }
}

/// Checks that parameter shapes agree with the architecture.
pub fn validate_params(arch: &NetworkArch, params: &NetworkParams) -> Result<(), NetError> {
    arch.validate()?;
    if params.weights.len() != arch.depth || params.biases.len() != arch.depth {
        return Err(NetError::ShapeMismatch);
    }
    for l in 0..arch.depth {
        let (fi, fo) = arch.layer_dims(l);
        if params.weights[l].dim() != (fo, fi) || params.biases[l].len() != fo {
            return Err(NetError::ShapeMismatch);
        }
    }
    if params.learnable.len() != params.learnable_names.len() {
        return Err(NetError::ShapeMismatch);
    }
    Ok(())
}

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("parameter shapes inconsistent with architecture")]
    ShapeMismatch,
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

/// `x ↦ (cos(2παx/L_dom), sin(2παx/L_dom))`; period `L_dom/α`.
pub fn periodic_embed(x: f64, alpha: f64, domain_len: f64) -> (f64, f64) {
    let w = 2.0 * std::f64::consts::PI * alpha / domain_len;
    ((w * x).cos(), (w * x).sin())
}

/// Uniform draw order is fixed (per layer: weights row-major; biases are zero
/// and consume no draws), so a seed pins every parameter bit-for-bit.
pub fn init_params(
    arch: &NetworkArch,
    seed: u64,
    learnable: &[(String, f64)],
) -> Result<NetworkParams, NetError> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Vec::with_capacity(arch.depth);
    let mut biases = Vec::with_capacity(arch.depth);
    for l in 0..arch.depth {
        let (fi, fo) = arch.layer_dims(l);
        let limit = match arch.activation {
            // SIREN: first layer ±1/fan_in, hidden layers ±sqrt(6/fan_in)/ω0.
            Activation::Sin => {
                if l == 0 {
                    1.0 / fi as f64
                } else {
                    (6.0 / fi as f64).sqrt() / arch.omega0
                }
            }
            // Glorot-uniform.
            Activation::Tanh => (6.0 / (fi + fo) as f64).sqrt(),
        };
        let mut w = Array2::zeros((fo, fi));
        for r in 0..fo {
            for c in 0..fi {
                w[[r, c]] = rng.random_range(-limit..limit);
            }
        }
        weights.push(w);
        biases.push(Array1::zeros(fo));
    }
    Ok(NetworkParams {
        weights,
        biases,
        learnable_names: learnable.iter().map(|(n, _)| n.clone()).collect(),
        learnable: learnable.iter().map(|(_, v)| *v).collect(),
    })
}

/// Network parameters expressed in an arbitrary scalar backend (plain values
/// or tape variables). Weight layout matches [`NetworkParams`]: row-major.
pub struct GenericParams<V> {
    pub weights: Vec<Vec<V>>,
    pub biases: Vec<Vec<V>>,
    pub learnable: Vec<V>,
}

impl GenericParams<f64> {
    pub fn from_params(p: &NetworkParams) -> Self {
        GenericParams {
            weights: p
                .weights
                .iter()
                .map(|w| w.iter().copied().collect())
                .collect(),
            biases: p.biases.iter().map(|b| b.to_vec()).collect(),
            learnable: p.learnable.clone(),
        }
    }
}

/// Records every parameter as a tape leaf, in the canonical flat order of
/// [`NetworkParams::flatten`]. Losses built on the recorded variables are then
/// differentiable with respect to all of them in one reverse sweep.
pub fn record_params(tape: &mut Tape, p: &NetworkParams) -> (GenericParams<Var>, Vec<Var>) {
    let mut leaves = Vec::with_capacity(p.count());
    let mut weights = Vec::with_capacity(p.weights.len());
    let mut biases = Vec::with_capacity(p.biases.len());
    for l in 0..p.weights.len() {
        let w: Vec<Var> = p.weights[l].iter().map(|&v| tape.leaf(v)).collect();
        leaves.extend(w.iter().copied());
        let b: Vec<Var> = p.biases[l].iter().map(|&v| tape.leaf(v)).collect();
        leaves.extend(b.iter().copied());
        weights.push(w);
        biases.push(b);
    }
    let learnable: Vec<Var> = p.learnable.iter().map(|&v| tape.leaf(v)).collect();
    leaves.extend(learnable.iter().copied());
    (
        GenericParams {
            weights,
            biases,
            learnable,
        },
        leaves,
    )
}

/// Input features as jets over the chosen backend. The coordinates themselves
/// enter as backend constants; their x/t partials are carried numerically in
/// the jet components (this is what keeps tape-recorded residuals
/// differentiable with respect to parameters but not coordinates).
fn feature_jets<A: Algebra>(alg: &mut A, arch: &NetworkArch, x: f64, t: f64) -> Vec<Jet<A::V>> {
    let zero = alg.constant(0.0);
    let ts = t / arch.time_rescale;
    let dt_seed = 1.0 / arch.time_rescale;
    match arch.embedding {
        Some(e) => {
            let w = 2.0 * std::f64::consts::PI * e.alpha / e.domain_len;
            let (c, s) = ((w * x).cos(), (w * x).sin());
            vec![
                Jet::new(alg.constant(c), alg.constant(-w * s), zero),
                Jet::new(alg.constant(s), alg.constant(w * c), zero),
                Jet::new(alg.constant(ts), zero, alg.constant(dt_seed)),
            ]
        }
        None => vec![
            Jet::new(alg.constant(x), alg.constant(1.0), zero),
            Jet::new(alg.constant(ts), zero, alg.constant(dt_seed)),
        ],
    }
}

/// Forward pass producing one jet (value, d/dx, d/dt) per output component,
/// generic over the scalar backend.
pub fn forward_jets_generic<A: Algebra>(
    alg: &mut A,
    params: &GenericParams<A::V>,
    arch: &NetworkArch,
    x: f64,
    t: f64,
) -> Vec<Jet<A::V>> {
    let mut z = feature_jets(alg, arch, x, t);
    for l in 0..arch.depth {
        let (fi, fo) = arch.layer_dims(l);
        debug_assert_eq!(params.weights[l].len(), fi * fo);
        let zero = alg.constant(0.0);
        let mut out = Vec::with_capacity(fo);
        for j in 0..fo {
            let mut acc = Jet::new(params.biases[l][j], zero, zero);
            for (i, &zi) in z.iter().enumerate().take(fi) {
                let term = jet_mul_scalar(alg, params.weights[l][j * fi + i], zi);
                acc = jet_add(alg, acc, term);
            }
            if arch.activated(l) {
                acc = match arch.activation {
                    Activation::Sin => jet_sin(alg, acc),
                    Activation::Tanh => jet_tanh(alg, acc),
                };
            }
            out.push(acc);
        }
        z = out;
    }
    z
}

/// Plain-`f64` forward pass: jets per output component.
pub fn forward_jets(params: &NetworkParams, arch: &NetworkArch, x: f64, t: f64) -> Vec<Jet2> {
    let gp = GenericParams::from_params(params);
    forward_jets_generic(&mut Values, &gp, arch, x, t)
}

/// Plain-`f64` forward pass, values only.
pub fn forward_values(params: &NetworkParams, arch: &NetworkArch, x: f64, t: f64) -> Vec<f64> {
    forward_jets(params, arch, x, t)
        .iter()
        .map(|j| j.v)
        .collect()
}

/// Everything needed to restart or inspect a run: architecture, parameters,
/// seed and the epoch the parameters were taken from. JSON round trip is
/// lossless for finite `f64` (shortest-round-trip printing).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub arch: NetworkArch,
    pub params: NetworkParams,
    pub seed: u64,
    pub epoch: usize,
}

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<(), NetError> {
    let text = serde_json::to_string_pretty(ck)?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, NetError> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

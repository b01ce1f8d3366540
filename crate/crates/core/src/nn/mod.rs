//! A small, fixed-architecture neural network stack for time-dependent
//! vector fields u(x, t): ℝᵈ × [0, 1] → ℝᵈ.
//!
//! Gradients are hand-derived: [`VectorFieldModel::backward`] is exact
//! reverse mode for the parameters, [`VectorFieldModel::jvp_cached`] exact
//! forward mode in x. There is no general autodiff graph.

mod adamw;
mod checkpoint;
mod gemm;
mod model;

pub use adamw::{AdamW, AdamWConfig};
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointHeader, CHECKPOINT_MAGIC};
pub use model::{ForwardCache, VectorFieldModel};

pub(crate) use gemm::gemm;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Length of [`time_embed`] output.
pub const TIME_EMBED_DIM: usize = 8;

/// t ↦ (cos t, sin t, cos 2t, sin 2t, cos 3t, sin 3t, cos 4t, sin 4t)
pub fn time_embed(t: f64) -> [f64; TIME_EMBED_DIM] {
    let mut out = [0.0; TIME_EMBED_DIM];
    for k in 0..4 {
        let (s, c) = ((k + 1) as f64 * t).sin_cos();
        out[2 * k] = c;
        out[2 * k + 1] = s;
    }
    out
}

/// d/dt of [`time_embed`].
pub fn time_embed_derivative(t: f64) -> [f64; TIME_EMBED_DIM] {
    let mut out = [0.0; TIME_EMBED_DIM];
    for k in 0..4 {
        let f = (k + 1) as f64;
        let (s, c) = (f * t).sin_cos();
        out[2 * k] = -f * s;
        out[2 * k + 1] = f * c;
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Silu,
}

impl Activation {
    #[inline]
    pub fn apply(self, y: f64) -> f64 {
        match self {
            Self::Tanh => y.tanh(),
            Self::Silu => y / (1.0 + (-y).exp()),
        }
    }

    /// Derivative, given both the input `y` and the output `a = apply(y)`.
    #[inline]
    pub fn derivative(self, y: f64, a: f64) -> f64 {
        match self {
            Self::Tanh => 1.0 - a * a,
            Self::Silu => {
                let s = 1.0 / (1.0 + (-y).exp());
                s * (1.0 + y * (1.0 - s))
            }
        }
    }
}

/// Network family and sizes. `depth` counts hidden layers; every network
/// ends in an ungated affine output layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Architecture {
    /// Hidden layers act on the concatenation (x, time_embed(t)).
    Mlp { depth: usize, width: usize },
    /// Hidden layers h ↦ act((W h + b) ⊙ sigmoid(g(e)) + B e) with
    /// e = time_embed(t), g a small MLP of `gate_depth` hidden layers of
    /// `gate_width` units, and B linear.
    ConcatSquash {
        depth: usize,
        width: usize,
        gate_depth: usize,
        gate_width: usize,
    },
}

impl Architecture {
    pub fn mlp_default() -> Self {
        Self::Mlp {
            depth: 3,
            width: 256,
        }
    }

    pub fn concat_squash_default() -> Self {
        Self::ConcatSquash {
            depth: 3,
            width: 512,
            gate_depth: 1,
            gate_width: 64,
        }
    }

    /// Closed-form parameter count for input/output dimension `d`.
    pub fn parameter_count(&self, d: usize) -> usize {
        let e = TIME_EMBED_DIM;
        match *self {
            Self::Mlp { depth, width } => {
                (d + e) * width + width + (depth - 1) * (width * width + width) + width * d + d
            }
            Self::ConcatSquash {
                depth,
                width,
                gate_depth,
                gate_width,
            } => {
                let gate = e * gate_width
                    + gate_width
                    + (gate_depth - 1) * (gate_width * gate_width + gate_width)
                    + gate_width * width
                    + width;
                let hyper = e * width;
                let first = d * width + width + gate + hyper;
                let rest = (depth - 1) * (width * width + width + gate + hyper);
                first + rest + width * d + d
            }
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let ok = match *self {
            Self::Mlp { depth, width } => depth >= 1 && width >= 1,
            Self::ConcatSquash {
                depth,
                width,
                gate_depth,
                gate_width,
            } => depth >= 1 && width >= 1 && gate_depth >= 1 && gate_width >= 1,
        };
        if ok {
            Ok(())
        } else {
            Err(NnError::InvalidArchitecture(format!(
                "all sizes must be at least 1: {self:?}"
            )))
        }
    }
}

/// Everything needed to rebuild a model's parameter layout.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub input_dim: usize,
    #[serde(default)]
    pub activation: Activation,
    /// Start the output layer at zero, so the untrained field is u ≡ 0.
    #[serde(default)]
    pub zero_output: bool,
}

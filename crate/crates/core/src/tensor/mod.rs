//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] records forward operations into a topologically ordered node
//! arena; [`Tape::backward`] replays it in reverse, accumulating gradients
//! additively into every `requires_grad` ancestor of the loss.

pub mod finite_diff;
pub mod io;
pub mod tape;

use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

pub use tape::{Tape, Var};

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: {context}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        context: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArg(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad tensor container: {0}")]
    BadContainer(String),
}

/// A raw dense tensor: row-major f64 payload plus shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Global multiply-add counter, fed by conv and matmul kernels.
/// Used by the ablation harness to compare latent vs physical-space compute.
static MAC_COUNTER: AtomicU64 = AtomicU64::new(0);

pub fn add_macs(n: u64) {
    MAC_COUNTER.fetch_add(n, Ordering::Relaxed);
}

pub fn mac_count() -> u64 {
    MAC_COUNTER.load(Ordering::Relaxed)
}

pub fn reset_mac_count() {
    MAC_COUNTER.store(0, Ordering::Relaxed);
}

//! Named, trainable tensors.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Element;

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(0);

/// Process-unique identity of a parameter, stable across graphs.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, PartialOrd, Ord)]
pub struct ParamId(u64);

/// A named, trainable tensor. Identity (not the name) ties gradient slots
/// across graphs; the name keys checkpoints and must be unique per model.
#[derive(Clone, Debug)]
pub struct Param<F: Element> {
    id: ParamId,
    name: String,
    pub data: ArrayD<F>,
}

impl<F: Element> Param<F> {
    pub fn new(name: impl Into<String>, data: ArrayD<F>) -> Self {
        Param {
            id: ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed)),
            name: name.into(),
            data,
        }
    }

    /// Zero-filled parameter (biases).
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Self::new(name, ArrayD::zeros(IxDyn(shape)))
    }

    /// Gaussian `N(0, std^2)` init. Draws are made in `f64` and then
    /// converted, so f32 and f64 models see the same stream.
    pub fn normal(name: impl Into<String>, shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let dist = Normal::new(0.0, std).expect("std must be finite and positive");
        let n: usize = shape.iter().product();
        let data: Vec<F> = (0..n).map(|_| F::f(dist.sample(rng))).collect();
        Self::new(
            name,
            ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape"),
        )
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

//! Core domain types shared by every module: image batches, encoded
//! feature maps, and per-pixel uncertainty maps.

use std::fmt;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Element;

/// Which image distribution a batch belongs to.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
pub enum Domain {
    /// Degraded distribution (rainy night).
    Adverse,
    /// Clean daytime distribution.
    Normal,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Domain::Adverse => write!(f, "Adverse"),
            Domain::Normal => write!(f, "Normal"),
        }
    }
}

/// Batch of RGB images in `[-1, 1]`, shape `(B, H, W, 3)`, tagged with the
/// domain it was drawn from. Spatial dims must be divisible by 4 so the
/// encoder's two stride-2 stages divide them evenly.
#[derive(Clone, Debug)]
pub struct ImageBatch<F: Element> {
    pub data: ArrayD<F>,
    pub domain: Domain,
}

impl<F: Element> ImageBatch<F> {
    pub fn new(data: ArrayD<F>, domain: Domain) -> Result<Self> {
        let s = data.shape();
        if s.len() != 4 || s[3] != 3 {
            return Err(Error::shape(format!(
                "image batch must be (B, H, W, 3), got {:?}",
                s
            )));
        }
        if s[0] == 0 {
            return Err(Error::shape("image batch must be non-empty"));
        }
        if s[1] % 4 != 0 || s[2] % 4 != 0 {
            return Err(Error::shape(format!(
                "image spatial dims must be divisible by 4, got {}x{}",
                s[1], s[2]
            )));
        }
        let one = F::one();
        for &v in data.iter() {
            if !(v >= -one && v <= one) {
                return Err(Error::shape(format!(
                    "image values must lie in [-1, 1], found {}",
                    v
                )));
            }
        }
        Ok(ImageBatch { data, domain })
    }

    /// Checks the domain tag against what a path expects.
    pub fn expect_domain(&self, expected: Domain) -> Result<()> {
        if self.domain != expected {
            return Err(Error::DomainMismatch {
                expected,
                got: self.domain,
            });
        }
        Ok(())
    }

    pub fn batch(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }
}

/// Encoded representation at quarter resolution, shape `(B, H/4, W/4, C)`;
/// `C` is 256 in the canonical configuration and scales with the
/// channel-width knob at test scale.
#[derive(Clone, Debug)]
pub struct FeatureMap<F: Element> {
    pub data: ArrayD<F>,
}

impl<F: Element> FeatureMap<F> {
    pub fn new(data: ArrayD<F>) -> Result<Self> {
        let s = data.shape();
        if s.len() != 4 || s.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!(
                "feature map must be 4-d and non-empty, got {:?}",
                s
            )));
        }
        Ok(FeatureMap { data })
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[3]
    }
}

/// Per-pixel confidence scale σ, shape `(B, H, W)`; every element is at
/// least the configured floor, hence strictly positive.
#[derive(Clone, Debug)]
pub struct UncertaintyMap<F: Element> {
    pub sigma: ArrayD<F>,
}

impl<F: Element> UncertaintyMap<F> {
    pub fn new(sigma: ArrayD<F>, sigma_floor: F) -> Result<Self> {
        if sigma.ndim() != 3 {
            return Err(Error::shape(format!(
                "uncertainty map must be (B, H, W), got {:?}",
                sigma.shape()
            )));
        }
        for &v in sigma.iter() {
            if !(v >= sigma_floor) {
                return Err(Error::NonPositiveSigma(format!(
                    "sigma value {} below floor {}",
                    v, sigma_floor
                )));
            }
        }
        Ok(UncertaintyMap { sigma })
    }

    pub fn min(&self) -> F {
        self.sigma.iter().fold(F::infinity(), |m, &v| m.min(v))
    }

    pub fn max(&self) -> F {
        self.sigma.iter().fold(F::neg_infinity(), |m, &v| m.max(v))
    }

    pub fn mean(&self) -> F {
        let n = F::f(self.sigma.len() as f64);
        self.sigma.iter().fold(F::zero(), |s, &v| s + v) / n
    }
}

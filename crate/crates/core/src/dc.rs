//! Data consistency: blend predicted k-space with the measurement on the
//! acquired lines and return to the image domain.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;
use crate::transforms::{fft2c, ifft2c, ComplexImage, KSpace, SamplingMask};

/// DC blend weight in `[0, 1]`: 0 trusts the measurement, 1 the network.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct LambdaValue(f64);

impl LambdaValue {
    pub fn new(value: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::invalid("lambda", format!("must lie in [0, 1], got {value}")));
        }
        Ok(Self(value))
    }

    /// Clamps into `[0, 1]`; NaN maps to 0.
    pub fn clamped(value: f64) -> Self {
        if value.is_nan() {
            return Self(0.0);
        }
        Self(value.clamp(0.0, 1.0))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for LambdaValue {
    type Error = Error;

    fn try_from(value: f64) -> Result<Self> {
        Self::new(value)
    }
}

impl From<LambdaValue> for f64 {
    fn from(l: LambdaValue) -> f64 {
        l.0
    }
}

impl fmt::Display for LambdaValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// `F⁻¹( M^c·F(x) + M·(λ·F(x) + (1−λ)·y) )`.
pub fn dc_step(
    x_half: &ComplexImage,
    measured: &KSpace,
    mask: &SamplingMask,
    lam: LambdaValue,
) -> Result<ComplexImage> {
    let (h, w) = x_half.shape();
    if measured.shape() != (h, w) || mask.width() != w {
        return Err(Error::ShapeMismatch {
            expected: vec![h, w],
            actual: vec![measured.shape().0, measured.shape().1, mask.width()],
        });
    }
    let l = lam.get();
    let y = measured.as_array();
    let mut k = fft2c(x_half)?.into_array();
    for ((r, c), v) in k.indexed_iter_mut() {
        if mask.is_sampled(c) {
            *v = *v * l + y[[r, c]] * (1.0 - l);
        }
    }
    ifft2c(&KSpace::new(k)?)
}

/// Graph form of [`dc_step`] on a two-channel image; differentiable in
/// `x_half` and in the one-element `lam` variable.
pub fn dc_step_graph(
    graph: &mut Graph,
    x_half: Var,
    measured: &Tensor,
    mask: &SamplingMask,
    lam: Var,
) -> Var {
    let k = graph.fft2c(x_half);
    let blended = graph.dc_blend(k, measured, mask, lam);
    graph.ifft2c(blended)
}

//! Small parameterized building blocks shared by the model modules.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::Bound;
use crate::tensor::Real;

/// Convolution with per-channel bias, bound from `{prefix}.weight` / `{prefix}.bias`.
#[derive(Clone, Copy, Debug)]
pub struct Conv<'g, T: Real> {
    pub weight: Var<'g, T>,
    pub bias: Var<'g, T>,
    pub stride: usize,
    pub pad: usize,
}

impl<'g, T: Real> Conv<'g, T> {
    pub fn bind(b: &Bound<'g, T>, prefix: &str, stride: usize, pad: usize) -> Result<Self> {
        Ok(Conv {
            weight: b.get(&format!("{prefix}.weight"))?,
            bias: b.get(&format!("{prefix}.bias"))?,
            stride,
            pad,
        })
    }

    /// Same-size convolution: stride 1 and padding `k/2` for the bound kernel.
    pub fn bind_same(b: &Bound<'g, T>, prefix: &str) -> Result<Self> {
        let mut c = Self::bind(b, prefix, 1, 0)?;
        let k = c.weight.shape()[2];
        c.pad = k / 2;
        Ok(c)
    }

    pub fn forward(&self, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.conv2d(self.weight, self.stride, self.pad)?
            .add_channel_bias(self.bias)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// `x·W + b` over the rows of an n×c matrix.
#[derive(Clone, Copy, Debug)]
pub struct Linear<'g, T: Real> {
    pub weight: Var<'g, T>,
    pub bias: Var<'g, T>,
}

impl<'g, T: Real> Linear<'g, T> {
    pub fn bind(b: &Bound<'g, T>, prefix: &str) -> Result<Self> {
        Ok(Linear {
            weight: b.get(&format!("{prefix}.weight"))?,
            bias: b.get(&format!("{prefix}.bias"))?,
        })
    }

    pub fn forward(&self, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.matmul(self.weight)?.add_row_bias(self.bias)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Norm<'g, T: Real> {
    pub gamma: Var<'g, T>,
    pub beta: Var<'g, T>,
    pub eps: T,
}

impl<'g, T: Real> Norm<'g, T> {
    pub fn bind(b: &Bound<'g, T>, prefix: &str, eps: f64) -> Result<Self> {
        Ok(Norm {
            gamma: b.get(&format!("{prefix}.gamma"))?,
            beta: b.get(&format!("{prefix}.beta"))?,
            eps: T::lit(eps),
        })
    }

    pub fn forward(&self, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.layer_norm(self.gamma, self.beta, self.eps)
    }
}

/// n×c tokens (row-major over the H×W grid) to a c×H×W map.
pub fn tokens_to_grid<'g, T: Real>(
    tokens: Var<'g, T>,
    height: usize,
    width: usize,
) -> Result<Var<'g, T>> {
    let shape = tokens.shape();
    match shape[..] {
        [n, c] if n == height * width => tokens.transpose()?.reshape(&[c, height, width]),
        _ => Err(Error::contract(format!(
            "token sequence {shape:?} does not cover a {height}×{width} grid"
        ))),
    }
}

/// c×H×W map to n×c tokens, n = H·W in row-major cell order.
pub fn grid_to_tokens<T: Real>(map: Var<'_, T>) -> Result<Var<'_, T>> {
    let shape = map.shape();
    match shape[..] {
        [c, h, w] => map.reshape(&[c, h * w])?.transpose(),
        _ => Err(Error::contract(format!(
            "expected a C×H×W map, got {shape:?}"
        ))),
    }
}

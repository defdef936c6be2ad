//! Parameterised building blocks recorded onto a [`Graph`].

use rand::Rng;

use super::{Graph, Group, NodeId, ParamId, ParamStore, Scalar};
use crate::error::{dim_err, Result};

/// Slope of every leaky ReLU in the model.
pub const LEAKY_SLOPE: f64 = 0.2;

/// `x W + b` for `x[B, I]`, `W[I, O]`, `b[O]`.
pub fn fully_connected<T: Scalar>(g: &mut Graph<T>, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let h = g.matmul(x, w)?;
    g.add_bias(h, b)
}

/// Fully connected layer with weights stored as `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        group: Group,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.add_uniform(format!("{name}.weight"), group, &[in_dim, out_dim], in_dim, rng)?;
        let bias = store.add_zeros(format!("{name}.bias"), group, &[out_dim])?;
        Ok(Self { weight, bias, in_dim, out_dim })
    }

    /// Accepts `[B, in]` or a flat `[in]` vector (returned as `[1, out]`).
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let x = match g.shape(x).len() {
            1 => {
                let n = g.shape(x)[0];
                g.reshape(x, &[1, n])?
            }
            2 => x,
            _ => return dim_err(format!("linear expects rank 1 or 2 input, got {:?}", g.shape(x))),
        };
        if g.shape(x)[1] != self.in_dim {
            return dim_err(format!("linear expects {} inputs, got {:?}", self.in_dim, g.shape(x)));
        }
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        fully_connected(g, x, w, b)
    }
}

/// Strided 4x4 convolution (stride 2, padding 1) plus bias and leaky ReLU;
/// halves both spatial extents.
#[derive(Debug, Clone)]
pub struct DownBlock {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl DownBlock {
    pub const KERNEL: usize = 4;

    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        group: Group,
        in_channels: usize,
        out_channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let k = Self::KERNEL;
        let fan_in = in_channels * k * k;
        let weight = store.add_uniform(format!("{name}.weight"), group, &[out_channels, in_channels, k, k], fan_in, rng)?;
        let bias = store.add_zeros(format!("{name}.bias"), group, &[out_channels])?;
        Ok(Self { weight, bias, in_channels, out_channels })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let s = g.shape(x);
        if s.len() != 3 || !s[1].is_multiple_of(2) || !s[2].is_multiple_of(2) {
            return dim_err(format!("downsample block needs [C, H, W] with even H and W, got {s:?}"));
        }
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.conv2d(x, w, 2, 1)?;
        let y = g.add_channel_bias(y, b)?;
        g.leaky_relu(y, LEAKY_SLOPE)
    }
}

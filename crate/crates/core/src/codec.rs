//! Exactly invertible image codec and per-channel style statistics.
//!
//! Encoding folds each `s x s` pixel block into channels and mixes channels
//! with a fixed orthogonal matrix, so decoding is the transpose followed by
//! the inverse fold. Nothing here is trainable.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::{depth_to_space, sc, space_to_depth, Graph, NodeId, Scalar, Tensor};

/// Variance floor used by style extraction and instance normalisation.
pub const STYLE_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub squeeze: usize,
    pub mixing_seed: u64,
}

impl CodecConfig {
    pub fn channels(&self) -> usize {
        3 * self.squeeze * self.squeeze
    }

    /// Feature side length for an input side, or a config error when the
    /// side is not a multiple of the squeeze factor.
    pub fn feature_side(&self, side: usize) -> Result<usize> {
        if self.squeeze == 0 || side == 0 || !side.is_multiple_of(self.squeeze) {
            return Err(Error::Config(format!("image side {side} is not divisible by squeeze factor {}", self.squeeze)));
        }
        Ok(side / self.squeeze)
    }
}

/// Per-channel mean and standard deviation of a feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct StylePair<T = f32> {
    pub mu: Tensor<T>,
    pub sigma: Tensor<T>,
}

impl<T: Scalar> StylePair<T> {
    pub fn new(mu: Tensor<T>, sigma: Tensor<T>) -> Result<Self> {
        if mu.rank() != 1 || mu.shape() != sigma.shape() {
            return dim_err(format!("style pair: mu {:?}, sigma {:?}", mu.shape(), sigma.shape()));
        }
        if sigma.data().iter().any(|&s| s < T::zero()) {
            return Err(Error::Numeric("style sigma must be non-negative".into()));
        }
        Ok(Self { mu, sigma })
    }

    pub fn channels(&self) -> usize {
        self.mu.len()
    }

    /// `[mu, sigma]` as one vector of length `2C`.
    pub fn concat(&self) -> Vec<f64> {
        let mut v = self.mu.to_f64_vec();
        v.extend(self.sigma.to_f64_vec());
        v
    }

    pub fn from_concat(h: &[f64]) -> Result<Self> {
        if !h.len().is_multiple_of(2) {
            return dim_err(format!("style vector of odd length {}", h.len()));
        }
        let c = h.len() / 2;
        Self::new(Tensor::from_f64(&[c], &h[..c])?, Tensor::from_f64(&[c], &h[c..])?)
    }
}

/// The frozen codec. Holds the orthogonal mixing matrix in `f64`.
#[derive(Debug, Clone)]
pub struct Codec {
    config: CodecConfig,
    mix: Tensor<f64>,
    unmix: Tensor<f64>,
}

impl Codec {
    pub fn new(config: CodecConfig) -> Result<Self> {
        if config.squeeze == 0 {
            return Err(Error::Config("squeeze factor must be at least 1".into()));
        }
        let mix = orthogonal(config.channels(), config.mixing_seed);
        let unmix = transpose(&mix);
        Ok(Self { config, mix, unmix })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn channels(&self) -> usize {
        self.config.channels()
    }

    pub fn squeeze(&self) -> usize {
        self.config.squeeze
    }

    /// The mixing matrix `Q`, rows are output channels.
    pub fn mixing(&self) -> &Tensor<f64> {
        &self.mix
    }

    /// `[3, H, W]` image to `[C, H/s, W/s]` feature.
    pub fn encode<T: Scalar>(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_image(image.shape())?;
        let folded = space_to_depth(image, self.config.squeeze)?;
        mix_channels(&self.mix.cast(), &folded)
    }

    /// Exact inverse of [`Codec::encode`]. No clamping.
    pub fn decode<T: Scalar>(&self, feature: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_feature(feature.shape())?;
        let folded = mix_channels(&self.unmix.cast(), feature)?;
        depth_to_space(&folded, self.config.squeeze)
    }

    /// [`Codec::encode`] recorded on a graph.
    pub fn encode_node<T: Scalar>(&self, g: &mut Graph<T>, image: NodeId) -> Result<NodeId> {
        self.check_image(g.shape(image))?;
        let folded = g.space_to_depth(image, self.config.squeeze)?;
        let q = g.constant(self.mix.cast())?;
        g.conv1x1(folded, q)
    }

    /// [`Codec::decode`] recorded on a graph; gradients flow to the feature.
    pub fn decode_node<T: Scalar>(&self, g: &mut Graph<T>, feature: NodeId) -> Result<NodeId> {
        self.check_feature(g.shape(feature))?;
        let qt = g.constant(self.unmix.cast())?;
        let folded = g.conv1x1(feature, qt)?;
        g.depth_to_space(folded, self.config.squeeze)
    }

    fn check_image(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 3 || shape[0] != 3 {
            return dim_err(format!("codec expects a [3, H, W] image, got {shape:?}"));
        }
        self.config.feature_side(shape[1])?;
        self.config.feature_side(shape[2])?;
        Ok(())
    }

    fn check_feature(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 3 || shape[0] != self.channels() {
            return dim_err(format!("codec expects a [{}, h, w] feature, got {shape:?}", self.channels()));
        }
        Ok(())
    }
}

/// Spatial mean and `sqrt(population variance + eps)` of every channel.
pub fn style_extract<T: Scalar>(feature: &Tensor<T>) -> Result<StylePair<T>> {
    if feature.rank() < 2 || feature.is_empty() {
        return dim_err(format!("style_extract expects [C, ..] with pixels, got {:?}", feature.shape()));
    }
    let c = feature.shape()[0];
    let inner = feature.len() / c;
    let mut mu = Vec::with_capacity(c);
    let mut sigma = Vec::with_capacity(c);
    for chunk in feature.data().chunks(inner) {
        let n = sc::<T>(inner as f64);
        let m = chunk.iter().copied().sum::<T>() / n;
        let var = chunk.iter().map(|&v| (v - m) * (v - m)).sum::<T>() / n;
        mu.push(m);
        sigma.push((var + sc(STYLE_EPS)).sqrt());
    }
    StylePair::new(Tensor::from_vec(mu), Tensor::from_vec(sigma))
}

/// Replaces the channel statistics of `content` with `style`.
pub fn adain_merge<T: Scalar>(content: &Tensor<T>, style: &StylePair<T>) -> Result<Tensor<T>> {
    let mut g = Graph::<T>::new();
    let x = g.constant(content.clone())?;
    let mu = g.constant(style.mu.clone())?;
    let sigma = g.constant(style.sigma.clone())?;
    let y = adain_node(&mut g, x, mu, sigma)?;
    Ok(g.value(y).clone())
}

/// [`adain_merge`] on a graph, with `mu` and `sigma` as `[C]` nodes.
pub fn adain_node<T: Scalar>(g: &mut Graph<T>, content: NodeId, mu: NodeId, sigma: NodeId) -> Result<NodeId> {
    if g.shape(content).first() != g.shape(mu).first() {
        return dim_err(format!("adain: content {:?} vs style {:?}", g.shape(content), g.shape(mu)));
    }
    let normalized = g.instance_norm(content, STYLE_EPS)?;
    g.channel_affine(normalized, sigma, mu)
}

fn mix_channels<T: Scalar>(q: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let c = q.shape()[0];
    if x.shape()[0] != c {
        return dim_err(format!("channel mix {:?} against {:?}", q.shape(), x.shape()));
    }
    let pixels = x.len() / c;
    let mut out = vec![T::zero(); x.len()];
    T::gemm(c, c, pixels, q.data(), false, x.data(), false, &mut out, false);
    Tensor::new(x.shape(), out)
}

fn transpose(q: &Tensor<f64>) -> Tensor<f64> {
    let n = q.shape()[0];
    let mut t = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            t.data_mut()[j * n + i] = q.data()[i * n + j];
        }
    }
    t
}

/// Orthonormal rows from Gaussian draws via modified Gram-Schmidt.
fn orthogonal(n: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        for r in &rows {
            let d: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|a| *a /= norm);
            rows.push(v);
        }
    }
    Tensor::new(&[n, n], rows.concat()).expect("square matrix")
}

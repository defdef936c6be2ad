//! Two-stage style generation: the sentence-conditioned first stage, the
//! multi-modality synthesis block (cross- and self-attention) and the
//! refinement stage.

use rand::Rng;

use crate::codec::adain_node;
use crate::error::{dim_err, Error, Result};
use crate::tensor::{DownBlock, Graph, Group, Linear, NodeId, ParamId, ParamStore, Scalar, LEAKY_SLOPE};
use crate::text::TextFeatures;

/// A generated style as graph nodes, both `[C]`.
#[derive(Debug, Clone, Copy)]
pub struct StyleNodes {
    pub mu: NodeId,
    pub sigma: NodeId,
}

impl StyleNodes {
    /// `[mu, sigma]`, length `2C`.
    pub fn concat<T: Scalar>(&self, g: &mut Graph<T>) -> Result<NodeId> {
        g.concat(&[self.mu, self.sigma], 0)
    }
}

/// Fully connected stack with leaky ReLU between layers.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        group: Group,
        widths: &[usize],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.fc{i}"), group, w[0], w[1], rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    /// `[n]` or `[B, n]` in, `[B, out]` out; no activation after the last layer.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h)?;
            if i + 1 < self.layers.len() {
                h = g.leaky_relu(h, LEAKY_SLOPE)?;
            }
        }
        Ok(h)
    }
}

/// Three fully connected layers ending in `2C` raw values; the first half is
/// `mu`, the softplus of the second half is `sigma`.
#[derive(Debug, Clone)]
pub struct StyleHead {
    pub mlp: Mlp,
    pub channels: usize,
    pub input: usize,
}

impl StyleHead {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        hidden: &[usize],
        channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(2 * channels);
        Ok(Self { mlp: Mlp::new(store, name, Group::Generator, &widths, rng)?, channels, input })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, input: NodeId) -> Result<StyleNodes> {
        if g.value(input).len() != self.input {
            return dim_err(format!("style head expects {} inputs, got {:?}", self.input, g.shape(input)));
        }
        let c = self.channels;
        let raw = self.mlp.forward(g, store, input)?;
        let raw = g.reshape(raw, &[2 * c])?;
        let mu = g.slice(raw, 0, 0, c)?;
        let s = g.slice(raw, 0, c, c)?;
        let sigma = g.softplus(s)?;
        Ok(StyleNodes { mu, sigma })
    }
}

/// First stage: `concat(z, ē_c)` to a style.
pub fn sg0_forward<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    head: &StyleHead,
    z: NodeId,
    e_c: NodeId,
) -> Result<StyleNodes> {
    let x = g.concat(&[z, e_c], 0)?;
    head.forward(g, store, x)
}

/// Refinement stage: `concat(mu0, sigma0, o)` to a style.
pub fn sg1_forward<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    head: &StyleHead,
    style0: StyleNodes,
    o: NodeId,
) -> Result<StyleNodes> {
    let x = g.concat(&[style0.mu, style0.sigma, o], 0)?;
    head.forward(g, store, x)
}

/// Word-context features. `v_ca[C1, H1, W1]`, `e[D, T]`, `chi0[C1, C1]`,
/// `chi1[C1, D]`. Returns `(phi_c[C1, H1*W1], attention[T, H1*W1])`; each
/// attention column is a distribution over the unmasked words.
pub fn cross_attention<T: Scalar>(
    g: &mut Graph<T>,
    v_ca: NodeId,
    e: NodeId,
    mask: &[bool],
    chi0: NodeId,
    chi1: NodeId,
) -> Result<(NodeId, NodeId)> {
    let s = g.shape(v_ca).to_vec();
    if s.len() != 3 {
        return dim_err(format!("cross attention expects [C, H, W] image features, got {s:?}"));
    }
    let vc = g.conv1x1(v_ca, chi0)?;
    let vc = g.reshape(vc, &[s[0], s[1] * s[2]])?;
    let ec = g.conv1x1(e, chi1)?;
    let ect = g.transpose(ec)?;
    let sim = g.matmul(ect, vc)?;
    let attn = g.softmax_masked(sim, 0, Some(mask))?;
    let phi = g.matmul(ec, attn)?;
    Ok((phi, attn))
}

/// Region-to-region features. `v_sa[C2, H2, W2]`, `chi2`, `chi3` are
/// `[C2, C2]`. Returns `(phi_s[C2, H2*W2], S[H2*W2, H2*W2])` with every column
/// of `S` summing to one.
pub fn self_attention<T: Scalar>(g: &mut Graph<T>, v_sa: NodeId, chi2: NodeId, chi3: NodeId) -> Result<(NodeId, NodeId)> {
    let s = g.shape(v_sa).to_vec();
    if s.len() != 3 {
        return dim_err(format!("self attention expects [C, H, W] features, got {s:?}"));
    }
    let flat = [s[0], s[1] * s[2]];
    let q = g.conv1x1(v_sa, chi2)?;
    let q = g.reshape(q, &flat)?;
    let k = g.conv1x1(v_sa, chi3)?;
    let k = g.reshape(k, &flat)?;
    let qt = g.transpose(q)?;
    let sim = g.matmul(qt, k)?;
    let attn = g.softmax(sim, 0)?;
    let phi = g.matmul(q, attn)?;
    Ok((phi, attn))
}

#[derive(Debug, Clone)]
pub struct MssConfig {
    pub channels: usize,
    pub feature_side: usize,
    pub word_dim: usize,
    pub ca_channels: Vec<usize>,
    pub sa_channels: usize,
}

/// Intermediate values of one synthesis pass.
#[derive(Debug, Clone)]
pub struct MssOutput {
    pub v0: NodeId,
    pub v_ca: NodeId,
    pub v_sa: NodeId,
    pub cross_attention: NodeId,
    pub self_attention: NodeId,
    pub phi_c: NodeId,
    pub phi_s: NodeId,
    /// `[2C]`.
    pub o: NodeId,
}

/// Multi-modality style synthesis block.
#[derive(Debug, Clone)]
pub struct Mss {
    pub config: MssConfig,
    pub chi: [ParamId; 4],
    pub ca: Vec<DownBlock>,
    pub sa: DownBlock,
    pub project: ParamId,
    pub fc: Linear,
}

impl Mss {
    pub fn new<T: Scalar>(config: MssConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self> {
        let grp = Group::Generator;
        let Some(&c1) = config.ca_channels.last() else {
            return Err(Error::Config("at least one cross-attention downsample block is required".into()));
        };
        let mut side = config.feature_side;
        for _ in 0..=config.ca_channels.len() {
            if !side.is_multiple_of(2) || side < 2 {
                return Err(Error::Config(format!(
                    "feature side {} cannot be halved {} times",
                    config.feature_side,
                    config.ca_channels.len() + 1
                )));
            }
            side /= 2;
        }
        let c2 = config.sa_channels;
        let mut ca = Vec::with_capacity(config.ca_channels.len());
        let mut cin = config.channels;
        for (i, &co) in config.ca_channels.iter().enumerate() {
            ca.push(DownBlock::new(store, &format!("mss.ca{i}"), grp, cin, co, rng)?);
            cin = co;
        }
        let sa = DownBlock::new(store, "mss.sa0", grp, c1, c2, rng)?;
        let chi = [
            store.add_uniform("mss.chi0", grp, &[c1, c1], c1, rng)?,
            store.add_uniform("mss.chi1", grp, &[c1, config.word_dim], config.word_dim, rng)?,
            store.add_uniform("mss.chi2", grp, &[c2, c2], c2, rng)?,
            store.add_uniform("mss.chi3", grp, &[c2, c2], c2, rng)?,
        ];
        let project = store.add_uniform("mss.project", grp, &[c1, c2], c2, rng)?;
        let fc = Linear::new(store, "mss.fc", grp, c1, 2 * config.channels, rng)?;
        Ok(Self { config, chi, ca, sa, project, fc })
    }

    /// `o = FC(mean over space of (phi_c + proj(upsample(phi_s))))` from the
    /// content `v[C, h, w]` restyled with `style0`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        text: &TextFeatures,
        v: NodeId,
        style0: StyleNodes,
    ) -> Result<MssOutput> {
        let v0 = adain_node(g, v, style0.mu, style0.sigma)?;
        let mut v_ca = v0;
        for block in &self.ca {
            v_ca = block.forward(g, store, v_ca)?;
        }
        let v_sa = self.sa.forward(g, store, v_ca)?;
        let [chi0, chi1, chi2, chi3] = self.chi.map(|id| g.param(store, id));
        let (phi_c, cross) = cross_attention(g, v_ca, text.e, &text.mask, chi0, chi1)?;
        let (phi_s, selfa) = self_attention(g, v_sa, chi2, chi3)?;

        let (sa_shape, ca_shape) = (g.shape(v_sa).to_vec(), g.shape(v_ca).to_vec());
        let grid = g.reshape(phi_s, &sa_shape)?;
        let up = g.upsample_nearest(grid, ca_shape[1] / sa_shape[1])?;
        let proj = g.param(store, self.project);
        let up = g.conv1x1(up, proj)?;
        let up = g.reshape(up, &[ca_shape[0], ca_shape[1] * ca_shape[2]])?;
        let fused = g.add(phi_c, up)?;
        let pooled = g.mean_axis(fused, 1)?;
        let o = self.fc.forward(g, store, pooled)?;
        let o = g.reshape(o, &[2 * self.config.channels])?;
        Ok(MssOutput { v0, v_ca, v_sa, cross_attention: cross, self_attention: selfa, phi_c, phi_s, o })
    }
}

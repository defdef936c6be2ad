//! Per-stage discriminator set: image realism, style realism and their
//! text-conditioned counterparts.
//!
//! Every branch returns a logit; scores are its sigmoid.

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::generator::{Mlp, StyleNodes};
use crate::tensor::{DownBlock, Graph, Group, NodeId, ParamStore, Scalar, LEAKY_SLOPE};

/// Discriminator branches in the fixed reporting order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Image,
    Style,
    ImageCond,
    StyleCond,
}

impl Branch {
    pub const ALL: [Branch; 4] = [Branch::Image, Branch::Style, Branch::ImageCond, Branch::StyleCond];

    pub fn name(self) -> &'static str {
        match self {
            Branch::Image => "image",
            Branch::Style => "style",
            Branch::ImageCond => "image_text",
            Branch::StyleCond => "style_text",
        }
    }
}

/// The four scores of one stage, each in `(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ScoreSet {
    pub s_i: f64,
    pub s_s: f64,
    pub s_ci: f64,
    pub s_cs: f64,
}

impl ScoreSet {
    pub fn uniform(v: f64) -> Self {
        Self { s_i: v, s_s: v, s_ci: v, s_cs: v }
    }

    pub fn get(&self, b: Branch) -> f64 {
        match b {
            Branch::Image => self.s_i,
            Branch::Style => self.s_s,
            Branch::ImageCond => self.s_ci,
            Branch::StyleCond => self.s_cs,
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        Branch::ALL.map(|b| self.get(b))
    }
}

/// Logit nodes (`[1, 1]`) of the four branches.
#[derive(Debug, Clone, Copy)]
pub struct Logits {
    pub image: NodeId,
    pub style: NodeId,
    pub image_cond: NodeId,
    pub style_cond: NodeId,
}

impl Logits {
    pub fn get(&self, b: Branch) -> NodeId {
        match b {
            Branch::Image => self.image,
            Branch::Style => self.style,
            Branch::ImageCond => self.image_cond,
            Branch::StyleCond => self.style_cond,
        }
    }

    pub fn scores<T: Scalar>(&self, g: &Graph<T>) -> ScoreSet {
        let s = |n: NodeId| crate::objectives::sigmoid(g.value(n).item().to_f64().unwrap_or(f64::NAN));
        ScoreSet { s_i: s(self.image), s_s: s(self.style), s_ci: s(self.image_cond), s_cs: s(self.style_cond) }
    }
}

#[derive(Debug, Clone)]
pub struct DiscriminatorConfig {
    pub image_size: usize,
    pub channels: usize,
    pub word_dim: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    pub style_hidden: usize,
    pub joint_hidden: usize,
}

/// One stage's discriminators. The image branches share a convolutional
/// trunk, the style branches share a fully connected trunk.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub stage: u8,
    pub config: DiscriminatorConfig,
    pub image_trunk: Vec<DownBlock>,
    pub image_head: Mlp,
    pub image_cond: Mlp,
    pub style_trunk: Mlp,
    pub style_head: Mlp,
    pub style_cond: Mlp,
    trunk_features: usize,
}

impl Discriminator {
    pub fn new<T: Scalar>(
        stage: u8,
        config: DiscriminatorConfig,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let grp = Group::Discriminator(stage);
        let p = format!("d{stage}");
        let mut side = config.image_size;
        if side < 4 || !side.is_multiple_of(4) || !(side / 4).is_power_of_two() {
            return Err(Error::Config(format!("discriminator needs image side 4 * 2^k, got {side}")));
        }
        let mut image_trunk = Vec::new();
        let (mut cin, mut co) = (3, config.base_channels);
        while side > 4 {
            let name = format!("{p}.image.down{}", image_trunk.len());
            image_trunk.push(DownBlock::new(store, &name, grp, cin, co, rng)?);
            cin = co;
            co = (co * 2).min(config.max_channels);
            side /= 2;
        }
        let trunk_features = cin * 16;
        let (d, hj, hs) = (config.word_dim, config.joint_hidden, config.style_hidden);
        let image_head = Mlp::new(store, &format!("{p}.image.head"), grp, &[trunk_features, 1], rng)?;
        let image_cond = Mlp::new(store, &format!("{p}.image.joint"), grp, &[trunk_features + d, hj, 1], rng)?;
        let style_trunk = Mlp::new(store, &format!("{p}.style.trunk"), grp, &[2 * config.channels, hs, hs], rng)?;
        let style_head = Mlp::new(store, &format!("{p}.style.head"), grp, &[hs, 1], rng)?;
        let style_cond = Mlp::new(store, &format!("{p}.style.joint"), grp, &[hs + d, hj, 1], rng)?;
        Ok(Self { stage, config, image_trunk, image_head, image_cond, style_trunk, style_head, style_cond, trunk_features })
    }

    /// `(logit of s_i, flattened trunk feature [F])`.
    pub fn score_image<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, image: NodeId) -> Result<(NodeId, NodeId)> {
        let s = self.config.image_size;
        if g.shape(image) != [3, s, s] {
            return dim_err(format!("discriminator expects a [3, {s}, {s}] image, got {:?}", g.shape(image)));
        }
        let mut h = image;
        for block in &self.image_trunk {
            h = block.forward(g, store, h)?;
        }
        let feat = g.reshape(h, &[self.trunk_features])?;
        Ok((self.image_head.forward(g, store, feat)?, feat))
    }

    /// `(logit of s_s, style trunk feature)` from `concat(mu, sigma)`.
    pub fn score_style<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, style: StyleNodes) -> Result<(NodeId, NodeId)> {
        let h = style.concat(g)?;
        if g.value(h).len() != 2 * self.config.channels {
            return dim_err(format!("style of length {} for {} channels", g.value(h).len(), self.config.channels));
        }
        let feat = self.style_trunk.forward(g, store, h)?;
        let feat = g.leaky_relu(feat, LEAKY_SLOPE)?;
        let n = g.value(feat).len();
        let feat = g.reshape(feat, &[n])?;
        Ok((self.style_head.forward(g, store, feat)?, feat))
    }

    /// Logit of `s_ci` from the shared image trunk feature and `ē`.
    pub fn score_image_cond<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, feature: NodeId, e_bar: NodeId) -> Result<NodeId> {
        self.joint(g, store, &self.image_cond, feature, e_bar)
    }

    /// Logit of `s_cs` from the shared style trunk feature and `ē`.
    pub fn score_style_cond<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, feature: NodeId, e_bar: NodeId) -> Result<NodeId> {
        self.joint(g, store, &self.style_cond, feature, e_bar)
    }

    fn joint<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, head: &Mlp, feature: NodeId, e_bar: NodeId) -> Result<NodeId> {
        if g.shape(e_bar) != [self.config.word_dim] {
            return dim_err(format!("sentence feature {:?}, expected [{}]", g.shape(e_bar), self.config.word_dim));
        }
        let x = g.concat(&[feature, e_bar], 0)?;
        head.forward(g, store, x)
    }

    /// All four branches with one evaluation of each trunk.
    pub fn score<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        image: NodeId,
        style: StyleNodes,
        e_bar: NodeId,
    ) -> Result<Logits> {
        let (image_logit, image_feat) = self.score_image(g, store, image)?;
        let (style_logit, style_feat) = self.score_style(g, store, style)?;
        let image_cond = self.score_image_cond(g, store, image_feat, e_bar)?;
        let style_cond = self.score_style_cond(g, store, style_feat, e_bar)?;
        Ok(Logits { image: image_logit, style: style_logit, image_cond, style_cond })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config() -> DiscriminatorConfig {
        DiscriminatorConfig {
            image_size: 16,
            channels: 6,
            word_dim: 4,
            base_channels: 4,
            max_channels: 8,
            style_hidden: 10,
            joint_hidden: 6,
        }
    }

    fn setup() -> (Discriminator, ParamStore<f64>, ChaCha8Rng) {
        let mut store = ParamStore::new();
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let d = Discriminator::new(0, config(), &mut store, &mut r).unwrap();
        (d, store, r)
    }

    fn rand_tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| r.random_range(0.0..1.0)).collect()).unwrap()
    }

    fn style(g: &mut Graph<f64>, r: &mut ChaCha8Rng) -> StyleNodes {
        let mu = g.constant(rand_tensor(r, &[6])).unwrap();
        let sigma = g.constant(rand_tensor(r, &[6])).unwrap();
        StyleNodes { mu, sigma }
    }

    #[test]
    fn scores_lie_in_open_unit_interval() {
        let (d, store, mut r) = setup();
        let mut g = Graph::new();
        let img = g.constant(rand_tensor(&mut r, &[3, 16, 16])).unwrap();
        let st = style(&mut g, &mut r);
        let e = g.constant(rand_tensor(&mut r, &[4])).unwrap();
        let s = d.score(&mut g, &store, img, st, e).unwrap().scores(&g);
        assert!(s.to_array().iter().all(|&v| v > 0.0 && v < 1.0), "{s:?}");
    }

    #[test]
    fn zero_final_layer_scores_one_half() {
        let (d, mut store, mut r) = setup();
        let last = d.image_head.layers.last().unwrap();
        store.value_mut(last.weight).data_mut().fill(0.0);
        let mut g = Graph::new();
        let img = g.constant(rand_tensor(&mut r, &[3, 16, 16])).unwrap();
        let (logit, _) = d.score_image(&mut g, &store, img).unwrap();
        assert_eq!(crate::objectives::sigmoid(g.value(logit).item()), 0.5);
    }

    #[test]
    fn shared_trunk_matches_recomputation() {
        let (d, store, mut r) = setup();
        let x = rand_tensor(&mut r, &[3, 16, 16]);
        let ev = rand_tensor(&mut r, &[4]);
        let mut g = Graph::new();
        let img = g.constant(x.clone()).unwrap();
        let e = g.constant(ev.clone()).unwrap();
        let st = style(&mut g, &mut r);
        let shared = d.score(&mut g, &store, img, st, e).unwrap();
        let mut g2 = Graph::new();
        let img2 = g2.constant(x).unwrap();
        let e2 = g2.constant(ev).unwrap();
        let (_, feat) = d.score_image(&mut g2, &store, img2).unwrap();
        let ci = d.score_image_cond(&mut g2, &store, feat, e2).unwrap();
        assert_eq!(g.value(shared.image_cond), g2.value(ci));
    }

    #[test]
    fn style_branch_is_not_symmetric_in_mu_and_sigma() {
        let (d, store, mut r) = setup();
        let mut g = Graph::new();
        let st = style(&mut g, &mut r);
        let (a, _) = d.score_style(&mut g, &store, st).unwrap();
        let (b, _) = d.score_style(&mut g, &store, StyleNodes { mu: st.sigma, sigma: st.mu }).unwrap();
        let (c, _) = d.score_style(&mut g, &store, st).unwrap();
        assert_ne!(g.value(a), g.value(b));
        assert_eq!(g.value(a), g.value(c));
    }

    #[test]
    fn zeroed_text_weights_make_the_joint_branch_unconditional() {
        let (d, mut store, mut r) = setup();
        let first = &d.image_cond.layers[0];
        let f = first.in_dim - 4;
        let w = store.value_mut(first.weight);
        let cols = w.shape()[1];
        w.data_mut()[f * cols..].fill(0.0);
        let mut g = Graph::new();
        let img = g.constant(rand_tensor(&mut r, &[3, 16, 16])).unwrap();
        let (_, feat) = d.score_image(&mut g, &store, img).unwrap();
        let e1 = g.constant(rand_tensor(&mut r, &[4])).unwrap();
        let e2 = g.constant(rand_tensor(&mut r, &[4])).unwrap();
        let a = d.score_image_cond(&mut g, &store, feat, e1).unwrap();
        let b = d.score_image_cond(&mut g, &store, feat, e2).unwrap();
        assert_eq!(g.value(a), g.value(b));
    }

    #[test]
    fn wrong_resolution_is_dimension_error() {
        let (d, store, _) = setup();
        let mut g = Graph::new();
        let img = g.constant(Tensor::zeros(&[3, 8, 8])).unwrap();
        assert!(matches!(d.score_image(&mut g, &store, img), Err(Error::Dimension(_))));
    }

    #[test]
    fn trunk_reaches_four_by_four() {
        let (d, _, _) = setup();
        assert_eq!(d.image_trunk.len(), 2);
        assert_eq!(d.image_trunk[1].out_channels, 8);
        let bad = DiscriminatorConfig { image_size: 24, ..config() };
        assert!(Discriminator::new(1, bad, &mut ParamStore::<f32>::new(), &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}

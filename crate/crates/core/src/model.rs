//! The assembled network: codec, text encoder, both style generators, the
//! synthesis block and one discriminator set per stage.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codec::{adain_node, style_extract, Codec, CodecConfig, StylePair};
use crate::discriminator::{Discriminator, DiscriminatorConfig};
use crate::error::{dim_err, Error, Result};
use crate::generator::{sg0_forward, sg1_forward, Mss, MssConfig, MssOutput, StyleHead, StyleNodes};
use crate::tensor::{Graph, NodeId, ParamStore, Scalar, Tensor};
use crate::text::{ConditionedVector, TextConfig, TextEncoder, TextFeatures, Tokens, Vocabulary};

/// Architecture hyper-parameters (`model.*` configuration keys).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub squeeze: usize,
    pub mixing_seed: u64,
    pub vocab_cap: usize,
    pub embed_dim: usize,
    pub word_dim: usize,
    pub text_len: usize,
    pub noise_dim: usize,
    pub cond_dim: usize,
    pub sg_hidden: Vec<usize>,
    pub ca_channels: Vec<usize>,
    pub sa_channels: usize,
    pub d_base_channels: usize,
    pub d_max_channels: usize,
    pub d_style_hidden: usize,
    pub d_joint_hidden: usize,
    /// False trains and evaluates the first stage only.
    pub stage2: bool,
}

impl ModelConfig {
    pub fn paper() -> Self {
        Self {
            image_size: 256,
            squeeze: 4,
            mixing_seed: 0,
            vocab_cap: 8192,
            embed_dim: 300,
            word_dim: 256,
            text_len: 18,
            noise_dim: 100,
            cond_dim: 100,
            sg_hidden: vec![256, 128],
            ca_channels: vec![64, 128],
            sa_channels: 256,
            d_base_channels: 16,
            d_max_channels: 256,
            d_style_hidden: 256,
            d_joint_hidden: 128,
            stage2: true,
        }
    }

    pub fn desk() -> Self {
        Self {
            image_size: 64,
            embed_dim: 32,
            word_dim: 64,
            text_len: 12,
            noise_dim: 32,
            cond_dim: 32,
            sg_hidden: vec![128, 64],
            ca_channels: vec![64],
            sa_channels: 128,
            d_base_channels: 8,
            d_max_channels: 64,
            d_style_hidden: 64,
            d_joint_hidden: 64,
            ..Self::paper()
        }
    }

    /// Smallest configuration that exercises every component.
    pub fn tiny() -> Self {
        Self {
            image_size: 8,
            squeeze: 2,
            embed_dim: 6,
            word_dim: 8,
            text_len: 6,
            noise_dim: 4,
            cond_dim: 4,
            sg_hidden: vec![16, 8],
            ca_channels: vec![8],
            sa_channels: 8,
            d_base_channels: 4,
            d_max_channels: 8,
            d_style_hidden: 8,
            d_joint_hidden: 8,
            ..Self::paper()
        }
    }

    pub fn codec(&self) -> CodecConfig {
        CodecConfig { squeeze: self.squeeze, mixing_seed: self.mixing_seed }
    }

    pub fn channels(&self) -> usize {
        self.codec().channels()
    }

    pub fn stages(&self) -> usize {
        if self.stage2 {
            2
        } else {
            1
        }
    }
}

/// `n` independent standard normal draws.
pub fn normal_vector<T: Scalar>(n: usize, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_vec((0..n).map(|_| crate::tensor::sc(StandardNormal.sample(rng))).collect())
}

/// Graph nodes of one generated stage.
#[derive(Debug, Clone, Copy)]
pub struct StageNodes {
    pub style: StyleNodes,
    /// Restyled content `[C, h, w]`.
    pub feature: NodeId,
    /// Decoded image `[3, H, W]`, not clamped.
    pub image: NodeId,
}

/// Everything recorded by one generator pass.
#[derive(Debug, Clone)]
pub struct Generation<T = f32> {
    pub text: TextFeatures,
    pub cond: ConditionedVector<T>,
    pub z: NodeId,
    pub v: NodeId,
    pub stages: Vec<StageNodes>,
    pub mss: Option<MssOutput>,
}

/// Values of one generated stage.
#[derive(Debug, Clone)]
pub struct StageOutput<T = f32> {
    pub style: StylePair<T>,
    pub feature: Tensor<T>,
    pub image: Tensor<T>,
}

/// An image mapped into feature space together with its own style.
#[derive(Debug, Clone)]
pub struct Encoded<T = f32> {
    pub v: Tensor<T>,
    pub style: StylePair<T>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub codec: Codec,
    pub text: TextEncoder,
    pub sg0: StyleHead,
    pub mss: Option<Mss>,
    pub sg1: Option<StyleHead>,
    pub discriminators: Vec<Discriminator>,
}

impl Model {
    /// Registers every parameter in `store`, drawing initial values from `rng`
    /// in a fixed order.
    pub fn new<T: Scalar>(config: ModelConfig, vocab: Vocabulary, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self> {
        let codec = Codec::new(config.codec())?;
        let side = config.codec().feature_side(config.image_size)?;
        if config.sg_hidden.is_empty() {
            return Err(Error::Config("model.sg_hidden needs at least one width".into()));
        }
        let c = codec.channels();
        let text_cfg = TextConfig {
            vocab_size: vocab.len(),
            embed_dim: config.embed_dim,
            word_dim: config.word_dim,
            text_len: config.text_len,
            cond_dim: config.cond_dim,
        };
        let text = TextEncoder::new(text_cfg, store, rng)?;
        let sg0 = StyleHead::new(store, "sg0", config.noise_dim + config.cond_dim, &config.sg_hidden, c, rng)?;
        let (mss, sg1) = if config.stage2 {
            let mss_cfg = MssConfig {
                channels: c,
                feature_side: side,
                word_dim: config.word_dim,
                ca_channels: config.ca_channels.clone(),
                sa_channels: config.sa_channels,
            };
            let mss = Mss::new(mss_cfg, store, rng)?;
            let sg1 = StyleHead::new(store, "sg1", 4 * c, &config.sg_hidden, c, rng)?;
            (Some(mss), Some(sg1))
        } else {
            (None, None)
        };
        let d_cfg = DiscriminatorConfig {
            image_size: config.image_size,
            channels: c,
            word_dim: config.word_dim,
            base_channels: config.d_base_channels,
            max_channels: config.d_max_channels,
            style_hidden: config.d_style_hidden,
            joint_hidden: config.d_joint_hidden,
        };
        let discriminators = (0..config.stages())
            .map(|t| Discriminator::new(t as u8, d_cfg.clone(), store, rng))
            .collect::<Result<_>>()?;
        Ok(Self { config, vocab, codec, text, sg0, mss, sg1, discriminators })
    }

    pub fn stages(&self) -> usize {
        self.config.stages()
    }

    pub fn tokenize(&self, caption: &str) -> Tokens {
        crate::text::tokenize(caption, &self.vocab, self.config.text_len)
    }

    /// Content feature `v` and its ground-truth style.
    pub fn encode_image<T: Scalar>(&self, image: &Tensor<T>) -> Result<Encoded<T>> {
        let s = self.config.image_size;
        if image.shape() != [3, s, s] {
            return dim_err(format!("model expects a [3, {s}, {s}] image, got {:?}", image.shape()));
        }
        let v = self.codec.encode(image)?;
        let style = style_extract(&v)?;
        Ok(Encoded { v, style })
    }

    /// Standard normal `z` and conditioning noise from one generator.
    pub fn sample_noise<T: Scalar>(&self, rng: &mut impl Rng) -> (Tensor<T>, Tensor<T>) {
        let z = normal_vector(self.config.noise_dim, rng);
        let noise = normal_vector(self.config.cond_dim, rng);
        (z, noise)
    }

    /// Text encoding, conditioning, both style stages and their images.
    pub fn generate<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        v: &Tensor<T>,
        tokens: &Tokens,
        z: Tensor<T>,
        noise: Tensor<T>,
    ) -> Result<Generation<T>> {
        if z.len() != self.config.noise_dim {
            return dim_err(format!("noise vector of length {}, expected {}", z.len(), self.config.noise_dim));
        }
        let text = self.text.encode(g, store, tokens)?;
        let cond = self.text.condition(g, store, text.e_bar, noise)?;
        let z = g.constant(z)?;
        let v = g.constant(v.clone())?;
        let style0 = sg0_forward(g, store, &self.sg0, z, cond.e_c)?;
        let mut stages = vec![self.stage(g, v, style0)?];
        let mut mss_out = None;
        if let (Some(mss), Some(sg1)) = (&self.mss, &self.sg1) {
            let out = mss.forward(g, store, &text, v, style0)?;
            let style1 = sg1_forward(g, store, sg1, style0, out.o)?;
            stages.push(self.stage(g, v, style1)?);
            mss_out = Some(out);
        }
        Ok(Generation { text, cond, z, v, stages, mss: mss_out })
    }

    fn stage<T: Scalar>(&self, g: &mut Graph<T>, v: NodeId, style: StyleNodes) -> Result<StageNodes> {
        let feature = adain_node(g, v, style.mu, style.sigma)?;
        let image = self.codec.decode_node(g, feature)?;
        Ok(StageNodes { style, feature, image })
    }

    /// Shapes of the named intermediate tensors of one generator pass on a
    /// blank image and caption.
    pub fn shape_report<T: Scalar>(&self, store: &ParamStore<T>) -> Result<Vec<(&'static str, Vec<usize>)>> {
        let s = self.config.image_size;
        let enc = self.encode_image(&Tensor::<T>::full(&[3, s, s], crate::tensor::sc(0.5)))?;
        let tokens = self.tokenize("caption");
        let z = Tensor::zeros(&[self.config.noise_dim]);
        let noise = Tensor::zeros(&[self.config.cond_dim]);
        let mut g = Graph::new();
        let gen = self.generate(&mut g, store, &enc.v, &tokens, z, noise)?;
        let mut out = vec![
            ("e", g.shape(gen.text.e).to_vec()),
            ("e_bar", g.shape(gen.text.e_bar).to_vec()),
            ("z", g.shape(gen.z).to_vec()),
            ("e_c", g.shape(gen.cond.e_c).to_vec()),
            ("v", g.shape(gen.v).to_vec()),
            ("mu0", g.shape(gen.stages[0].style.mu).to_vec()),
            ("sigma0", g.shape(gen.stages[0].style.sigma).to_vec()),
            ("image0", g.shape(gen.stages[0].image).to_vec()),
        ];
        if let Some(m) = &gen.mss {
            out.push(("v_ca", g.shape(m.v_ca).to_vec()));
            out.push(("v_sa", g.shape(m.v_sa).to_vec()));
            out.push(("o", g.shape(m.o).to_vec()));
            out.push(("mu1", g.shape(gen.stages[1].style.mu).to_vec()));
            out.push(("sigma1", g.shape(gen.stages[1].style.sigma).to_vec()));
            out.push(("image1", g.shape(gen.stages[1].image).to_vec()));
        }
        Ok(out)
    }

    /// Value-level generation from a raw image.
    pub fn full_generate<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        image: &Tensor<T>,
        tokens: &Tokens,
        z: Tensor<T>,
        noise: Tensor<T>,
    ) -> Result<Vec<StageOutput<T>>> {
        let enc = self.encode_image(image)?;
        let mut g = Graph::new();
        let gen = self.generate(&mut g, store, &enc.v, tokens, z, noise)?;
        gen.stages
            .iter()
            .map(|s| {
                Ok(StageOutput {
                    style: StylePair::new(g.value(s.style.mu).clone(), g.value(s.style.sigma).clone())?,
                    feature: g.value(s.feature).clone(),
                    image: g.value(s.image).clone(),
                })
            })
            .collect()
    }
}

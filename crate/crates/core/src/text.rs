//! Caption tokenisation, the bidirectional recurrent text encoder and
//! conditioning augmentation.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Group, Linear, NodeId, ParamId, ParamStore, Scalar, Tensor};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
const PAD_TOKEN: &str = "<pad>";
const UNK_TOKEN: &str = "<unk>";

/// Token list whose line index is the id. Ids 0 and 1 are reserved.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_tokens(Vec::<String>::new()).expect("empty vocabulary")
    }
}

impl Vocabulary {
    /// Vocabulary with the reserved entries followed by `tokens` in order.
    pub fn from_tokens<S: Into<String>>(tokens: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut list = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        list.extend(tokens.into_iter().map(Into::into));
        Self::try_from(list)
    }

    /// Every word of the captions, most frequent first (ties alphabetical),
    /// keeping at most `cap` entries including the reserved ones.
    pub fn build<'a>(captions: impl IntoIterator<Item = &'a str>, cap: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for c in captions {
            for w in words(c) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(cap.saturating_sub(2));
        Self::from_tokens(ranked.into_iter().map(|(w, _)| w)).expect("distinct words")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::try_from(text.lines().map(str::to_string).collect::<Vec<_>>())
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[PAD] != PAD_TOKEN || tokens[UNK] != UNK_TOKEN {
            return Err(Error::Data("vocabulary must start with <pad> and <unk>".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

/// Lowercased alphanumeric runs of a caption.
pub fn words(caption: &str) -> Vec<String> {
    caption
        .to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

/// Padded token ids plus the number of real (non-pad) positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokens {
    pub ids: Vec<usize>,
    pub actual: usize,
}

impl Tokens {
    /// True at real word positions.
    pub fn mask(&self) -> Vec<bool> {
        (0..self.ids.len()).map(|t| t < self.actual).collect()
    }
}

pub fn tokenize(caption: &str, vocab: &Vocabulary, len: usize) -> Tokens {
    let mut ids: Vec<usize> = words(caption).iter().take(len).map(|w| vocab.id(w)).collect();
    let actual = ids.len();
    ids.resize(len, PAD);
    Tokens { ids, actual }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Word feature width `D`; each direction carries `D / 2`.
    pub word_dim: usize,
    pub text_len: usize,
    pub cond_dim: usize,
}

/// Graph nodes for the encoded caption.
#[derive(Debug, Clone)]
pub struct TextFeatures {
    /// `[D, T]`, zero columns at pad positions.
    pub e: NodeId,
    /// `[D]`.
    pub e_bar: NodeId,
    pub actual: usize,
    pub mask: Vec<bool>,
}

/// Conditioning augmentation output; `noise` is kept for reproducibility.
#[derive(Debug, Clone)]
pub struct ConditionedVector<T = f32> {
    pub e_c: NodeId,
    pub ca_mu: NodeId,
    pub ca_logvar: NodeId,
    pub noise: Tensor<T>,
}

/// Gated recurrent cell, gates ordered `[update, reset, candidate]`.
#[derive(Debug, Clone)]
struct Gru {
    wx: ParamId,
    wh: ParamId,
    bx: ParamId,
    bh: ParamId,
    hidden: usize,
}

impl Gru {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        let g = Group::TextEncoder;
        Ok(Self {
            wx: store.add_uniform(format!("{name}.wx"), g, &[input, 3 * hidden], hidden, rng)?,
            wh: store.add_uniform(format!("{name}.wh"), g, &[hidden, 3 * hidden], hidden, rng)?,
            bx: store.add_uniform(format!("{name}.bx"), g, &[3 * hidden], hidden, rng)?,
            bh: store.add_uniform(format!("{name}.bh"), g, &[3 * hidden], hidden, rng)?,
            hidden,
        })
    }

    /// Input projections `x W_x + b_x` for every time step at once.
    fn project<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let (wx, bx) = (g.param(store, self.wx), g.param(store, self.bx));
        let p = g.matmul(x, wx)?;
        g.add_bias(p, bx)
    }

    fn step<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, xp: NodeId, h: NodeId) -> Result<NodeId> {
        let n = self.hidden;
        let (wh, bh) = (g.param(store, self.wh), g.param(store, self.bh));
        let hp = g.matmul(h, wh)?;
        let hp = g.add_bias(hp, bh)?;
        let gate = |g: &mut Graph<T>, k: usize| -> Result<NodeId> {
            let a = g.slice(xp, 1, k * n, n)?;
            let b = g.slice(hp, 1, k * n, n)?;
            let s = g.add(a, b)?;
            g.sigmoid(s)
        };
        let z = gate(g, 0)?;
        let r = gate(g, 1)?;
        let xn = g.slice(xp, 1, 2 * n, n)?;
        let hn = g.slice(hp, 1, 2 * n, n)?;
        let rh = g.mul(r, hn)?;
        let pre = g.add(xn, rh)?;
        let cand = g.tanh(pre)?;
        let diff = g.sub(h, cand)?;
        let keep = g.mul(z, diff)?;
        g.add(cand, keep)
    }
}

/// Embedding table, bidirectional recurrent encoder and the conditioning
/// layer. All parameters belong to [`Group::TextEncoder`].
#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub config: TextConfig,
    embed: ParamId,
    forward: Gru,
    backward: Gru,
    cond: Linear,
}

impl TextEncoder {
    pub fn new<T: Scalar>(config: TextConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self> {
        if !config.word_dim.is_multiple_of(2) || config.word_dim == 0 {
            return Err(Error::Config(format!("word_dim must be even and positive, got {}", config.word_dim)));
        }
        let h = config.word_dim / 2;
        let embed = store.add_uniform("text.embed", Group::TextEncoder, &[config.vocab_size, config.embed_dim], 1, rng)?;
        let forward = Gru::new(store, "text.gru_fwd", config.embed_dim, h, rng)?;
        let backward = Gru::new(store, "text.gru_bwd", config.embed_dim, h, rng)?;
        let cond = Linear::new(store, "text.cond", Group::TextEncoder, config.word_dim, 2 * config.cond_dim, rng)?;
        Ok(Self { config, embed, forward, backward, cond })
    }

    /// Word features `e[D, T]` and sentence feature `ē[D]`. The recurrences
    /// run over the real tokens only, so padding never changes the result.
    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, tokens: &Tokens) -> Result<TextFeatures> {
        let (d, len) = (self.config.word_dim, self.config.text_len);
        if tokens.ids.len() != len {
            return Err(Error::Dimension(format!("expected {len} token ids, got {}", tokens.ids.len())));
        }
        let actual = tokens.actual.min(len);
        let mask = tokens.mask();
        if actual == 0 {
            let e = g.constant(Tensor::zeros(&[d, len]))?;
            let e_bar = g.constant(Tensor::zeros(&[d]))?;
            return Ok(TextFeatures { e, e_bar, actual, mask });
        }
        let table = g.param(store, self.embed);
        let x = g.embedding(table, &tokens.ids[..actual])?;
        let h0 = g.constant(Tensor::zeros(&[1, d / 2]))?;

        let xf = self.forward.project(g, store, x)?;
        let mut fwd = Vec::with_capacity(actual);
        let mut h = h0;
        for t in 0..actual {
            let row = g.slice(xf, 0, t, 1)?;
            h = self.forward.step(g, store, row, h)?;
            fwd.push(h);
        }
        let xb = self.backward.project(g, store, x)?;
        let mut bwd = vec![h0; actual];
        let mut h = h0;
        for t in (0..actual).rev() {
            let row = g.slice(xb, 0, t, 1)?;
            h = self.backward.step(g, store, row, h)?;
            bwd[t] = h;
        }

        let mut rows = Vec::with_capacity(len);
        for t in 0..actual {
            rows.push(g.concat(&[fwd[t], bwd[t]], 1)?);
        }
        if actual < len {
            rows.push(g.constant(Tensor::zeros(&[len - actual, d]))?);
        }
        let words = g.concat(&rows, 0)?;
        let e = g.transpose(words)?;
        let last = g.concat(&[fwd[actual - 1], bwd[0]], 1)?;
        let e_bar = g.reshape(last, &[d])?;
        Ok(TextFeatures { e, e_bar, actual, mask })
    }

    /// `ē_c = mu + exp(logvar / 2) * noise` with `(mu, logvar)` from one
    /// fully connected layer on `ē`.
    pub fn condition<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        e_bar: NodeId,
        noise: Tensor<T>,
    ) -> Result<ConditionedVector<T>> {
        let c = self.config.cond_dim;
        if noise.len() != c {
            return Err(Error::Dimension(format!("conditioning noise of length {} for width {c}", noise.len())));
        }
        let out = self.cond.forward(g, store, e_bar)?;
        let mu = g.slice(out, 1, 0, c)?;
        let ca_mu = g.reshape(mu, &[c])?;
        let lv = g.slice(out, 1, c, c)?;
        let ca_logvar = g.reshape(lv, &[c])?;
        let half = g.scale(ca_logvar, 0.5)?;
        let std = g.exp(half)?;
        let n = g.constant(noise.clone().reshape(&[c])?)?;
        let spread = g.mul(std, n)?;
        let e_c = g.add(ca_mu, spread)?;
        Ok(ConditionedVector { e_c, ca_mu, ca_logvar, noise })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab() -> Vocabulary {
        Vocabulary::from_tokens(["the", "dog"]).unwrap()
    }

    fn encoder(store: &mut ParamStore<f64>) -> TextEncoder {
        let cfg = TextConfig { vocab_size: 6, embed_dim: 5, word_dim: 8, text_len: 6, cond_dim: 4 };
        TextEncoder::new(cfg, store, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    #[test]
    fn tokenize_examples() {
        let v = vocab();
        assert_eq!(tokenize("The Dog!", &v, 4), Tokens { ids: vec![2, 3, 0, 0], actual: 2 });
        assert_eq!(tokenize("", &v, 4), Tokens { ids: vec![0; 4], actual: 0 });
        let long = vec!["dog"; 20].join(" ");
        let t = tokenize(&long, &v, 18);
        assert_eq!((t.ids.len(), t.actual), (18, 18));
        assert_eq!(tokenize("a cat", &v, 3).ids, vec![UNK, UNK, PAD]);
    }

    #[test]
    fn vocabulary_text_round_trip() {
        let v = Vocabulary::build(["a warm scene", "a cold scene of a dog"], 8192);
        assert_eq!(v.token(2), Some("a"));
        assert_eq!(Vocabulary::from_text(&v.to_text()).unwrap(), v);
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(serde_json::from_str::<Vocabulary>(&json).unwrap(), v);
        assert_eq!(Vocabulary::build(["a b c d e f"], 4).len(), 4);
    }

    #[test]
    fn vocabulary_rejects_bad_headers() {
        assert!(Vocabulary::from_text("dog\ncat\n").is_err());
        assert!(Vocabulary::from_text("<pad>\n<unk>\ndog\ndog\n").is_err());
    }

    #[test]
    fn feature_shapes_and_pad_columns() {
        let mut store = ParamStore::<f64>::new();
        let enc = encoder(&mut store);
        let mut g = Graph::new();
        let f = enc.encode(&mut g, &store, &Tokens { ids: vec![2, 3, 4, 0, 0, 0], actual: 3 }).unwrap();
        assert_eq!(g.shape(f.e), &[8, 6]);
        assert_eq!(g.shape(f.e_bar), &[8]);
        let e = g.value(f.e);
        for row in 0..8 {
            assert!(e.data()[row * 6 + 3..row * 6 + 6].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn padding_does_not_change_sentence_feature() {
        let mut store = ParamStore::<f64>::new();
        let mut enc = encoder(&mut store);
        let mut g = Graph::new();
        let a = enc.encode(&mut g, &store, &Tokens { ids: vec![2, 3, 0, 0, 0, 0], actual: 2 }).unwrap();
        enc.config.text_len = 4;
        let b = enc.encode(&mut g, &store, &Tokens { ids: vec![2, 3, 0, 0], actual: 2 }).unwrap();
        assert_eq!(g.value(a.e_bar), g.value(b.e_bar));
    }

    #[test]
    fn all_pad_caption_masks_everything() {
        let mut store = ParamStore::<f64>::new();
        let enc = encoder(&mut store);
        let mut g = Graph::new();
        let f = enc.encode(&mut g, &store, &Tokens { ids: vec![0; 6], actual: 0 }).unwrap();
        assert_eq!(f.actual, 0);
        assert!(f.mask.iter().all(|&m| !m));
        assert!(g.value(f.e).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn out_of_vocabulary_id_is_data_error() {
        let mut store = ParamStore::<f64>::new();
        let enc = encoder(&mut store);
        let mut g = Graph::new();
        let err = enc.encode(&mut g, &store, &Tokens { ids: vec![9, 0, 0, 0, 0, 0], actual: 1 }).unwrap_err();
        assert!(matches!(err, Error::Data(_)), "{err}");
    }

    #[test]
    fn zero_noise_conditioning_is_the_mean() {
        let mut store = ParamStore::<f64>::new();
        let enc = encoder(&mut store);
        let mut g = Graph::new();
        let f = enc.encode(&mut g, &store, &Tokens { ids: vec![2, 5, 0, 0, 0, 0], actual: 2 }).unwrap();
        let cv = enc.condition(&mut g, &store, f.e_bar, Tensor::zeros(&[4])).unwrap();
        assert_eq!(g.shape(cv.e_c), &[4]);
        assert_eq!(g.value(cv.e_c), g.value(cv.ca_mu));
        let noise = Tensor::from_vec(vec![0.3, -1.0, 2.0, 0.1]);
        let a = enc.condition(&mut g, &store, f.e_bar, noise.clone()).unwrap();
        let b = enc.condition(&mut g, &store, f.e_bar, noise).unwrap();
        assert_eq!(g.value(a.e_c), g.value(b.e_c));
        assert_ne!(g.value(a.e_c), g.value(a.ca_mu));
    }

    #[test]
    fn gradients_reach_embedding_and_recurrent_weights() {
        let mut store = ParamStore::<f64>::new();
        let enc = encoder(&mut store);
        let mut g = Graph::new();
        let f = enc.encode(&mut g, &store, &Tokens { ids: vec![2, 3, 4, 0, 0, 0], actual: 3 }).unwrap();
        let s = g.sum(f.e).unwrap();
        let t = g.sum(f.e_bar).unwrap();
        let root = g.add(s, t).unwrap();
        let grads = g.backward(root).unwrap();
        store.accumulate(&grads, 1.0);
        for name in ["text.embed", "text.gru_fwd.wx", "text.gru_fwd.wh", "text.gru_bwd.wx", "text.gru_bwd.wh"] {
            let p = store.get(store.id(name).unwrap());
            assert!(p.grad.data().iter().any(|&v| v != 0.0), "{name}");
        }
    }
}

mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tsg::codec::{adain_merge, style_extract, Codec, CodecConfig, StylePair};
use tsg::discriminator::ScoreSet;
use tsg::generator::StyleNodes;
use tsg::model::{Model, ModelConfig};
use tsg::objectives::{discriminator_loss, discriminator_loss_node, generator_loss, metric_sl, style_loss};
use tsg::tensor::{Graph, Group, ParamStore, Tensor};
use tsg::text::Vocabulary;

fn tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    common::random_tensor(&mut common::rng(seed), shape, lo, hi)
}

fn tiny_model(seed: u64) -> (Model, ParamStore<f64>) {
    let vocab = Vocabulary::from_tokens(["warm", "cold", "calm", "stripes", "golden"]).unwrap();
    let mut store = ParamStore::new();
    let model = Model::new(ModelConfig::tiny(), vocab, &mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (model, store)
}

fn vec_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_is_positive_and_sums_to_one(rows in 1usize..6, cols in 1usize..6, axis in 0usize..2, seed: u64) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(tensor(&[rows, cols], seed, -20.0, 20.0)).unwrap();
        let y = g.softmax(x, axis).unwrap();
        let v = g.value(y).data().to_vec();
        prop_assert!(v.iter().all(|&p| p > 0.0));
        let (outer, inner) = if axis == 0 { (cols, rows) } else { (rows, cols) };
        for o in 0..outer {
            let s: f64 = (0..inner).map(|i| if axis == 0 { v[i * cols + o] } else { v[o * cols + i] }).sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn codec_is_bijective_and_norm_preserving(squeeze in 1usize..4, blocks in 1usize..4, seed: u64, mixing_seed: u64) {
        let codec = Codec::new(CodecConfig { squeeze, mixing_seed }).unwrap();
        let side = squeeze * blocks;
        let img = tensor(&[3, side, side], seed, 0.0, 1.0);
        let v = codec.encode(&img).unwrap();
        prop_assert!(codec.decode(&v).unwrap().max_abs_diff(&img) < 1e-5);
        let norm = |t: &Tensor<f64>| t.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((norm(&v) - norm(&img)).abs() < 1e-4);
        let f = tensor(v.shape(), seed ^ 1, -2.0, 2.0);
        prop_assert!(codec.encode(&codec.decode(&f).unwrap()).unwrap().max_abs_diff(&f) < 1e-5);
    }

    #[test]
    fn adain_imposes_the_requested_style(c in 1usize..6, seed: u64, mu in vec_strategy(6), sigma in prop::collection::vec(0.1f64..3.0, 6)) {
        let content = tensor(&[c, 5, 4], seed, -2.0, 2.0);
        let style = StylePair::new(Tensor::from_vec(mu[..c].to_vec()), Tensor::from_vec(sigma[..c].to_vec())).unwrap();
        let merged = adain_merge(&content, &style).unwrap();
        let got = style_extract(&merged).unwrap();
        prop_assert!(got.mu.max_abs_diff(&style.mu) < 1e-4);
        prop_assert!(got.sigma.max_abs_diff(&style.sigma) < 1e-4);
        let unit = StylePair::new(Tensor::zeros(&[c]), Tensor::full(&[c], 1.0)).unwrap();
        let norm = style_extract(&adain_merge(&content, &unit).unwrap()).unwrap();
        prop_assert!(norm.mu.data().iter().all(|m| m.abs() < 1e-5));
        prop_assert!(norm.sigma.data().iter().all(|s| (s - 1.0).abs() < 1e-3));
    }

    #[test]
    fn style_loss_is_bounded_and_affine_invariant(
        h in vec_strategy(8), h_i in vec_strategy(8), a in 0.1f64..5.0, b in -3.0f64..3.0
    ) {
        let l = style_loss(&h, &h_i).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&l));
        let spread = |v: &[f64]| v.iter().fold(f64::MIN, |m, &x| m.max(x)) - v.iter().fold(f64::MAX, |m, &x| m.min(x));
        prop_assume!(spread(&h) > 0.1 && spread(&h_i) > 0.1);
        let mapped: Vec<f64> = h_i.iter().map(|x| a * x + b).collect();
        prop_assert!((style_loss(&h, &mapped).unwrap() - l).abs() < 1e-6);
    }

    #[test]
    fn adversarial_losses_are_monotone(s in prop::collection::vec(0.01f64..0.98, 8), k in 0usize..4, bump in 0.001f64..0.01) {
        let set = |v: &[f64]| ScoreSet { s_i: v[0], s_s: v[1], s_ci: v[2], s_cs: v[3] };
        let (real, fake) = (set(&s[..4]), set(&s[4..]));
        let raise = |x: &ScoreSet| {
            let mut a = x.to_array();
            a[k] += bump;
            set(&a)
        };
        prop_assert!(generator_loss(&[raise(&fake)]) < generator_loss(&[fake]));
        prop_assert!(discriminator_loss(&raise(&real), &fake) < discriminator_loss(&real, &fake));
        prop_assert!(generator_loss(&[fake]).is_finite());
    }

    #[test]
    fn style_metric_is_symmetric_and_subadditive(a in vec_strategy(12), b in vec_strategy(12), c in vec_strategy(12)) {
        let (ab, ba) = (metric_sl(&a, &b).unwrap(), metric_sl(&b, &a).unwrap());
        prop_assert_eq!(ab, ba);
        let (bc, ac) = (metric_sl(&b, &c).unwrap(), metric_sl(&a, &c).unwrap());
        prop_assert!(ac <= ab + bc + 1e-12);
    }

    #[test]
    fn augmented_pixels_stay_in_unit_range(seed: u64, w in 8usize..20, h in 8usize..20) {
        let img = tensor(&[3, h, w], seed, 0.0, 1.0).cast::<f32>();
        let out = tsg::data::augment(&img, &mut ChaCha8Rng::seed_from_u64(seed), 8).unwrap();
        prop_assert_eq!(out.shape(), &[3, 8, 8]);
        prop_assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

#[test]
fn generated_feature_carries_the_generated_style() {
    let (model, store) = tiny_model(2);
    let img = tensor(&[3, 8, 8], 5, 0.0, 1.0);
    let (z, n) = model.sample_noise(&mut common::rng(3));
    for out in model.full_generate(&store, &img, &model.tokenize("warm calm stripes"), z, n).unwrap() {
        let got = style_extract(&out.feature).unwrap();
        assert!(got.mu.max_abs_diff(&out.style.mu) < 1e-3);
        assert!(got.sigma.max_abs_diff(&out.style.sigma) < 1e-3);
        assert!(out.style.sigma.data().iter().all(|&s| s > 0.0));
    }
}

#[test]
fn padding_embedding_never_reaches_the_output() {
    let (model, mut store) = tiny_model(4);
    let img = tensor(&[3, 8, 8], 6, 0.0, 1.0);
    let tokens = model.tokenize("cold stripes");
    assert!(tokens.ids.contains(&0));
    let run = |store: &ParamStore<f64>| {
        let (z, n) = model.sample_noise(&mut common::rng(9));
        model.full_generate(store, &img, &tokens, z, n).unwrap()
    };
    let before = run(&store);
    let embed = store.id("text.embed").unwrap();
    let dim = store.value(embed).shape()[1];
    for v in &mut store.value_mut(embed).data_mut()[..dim] {
        *v += 7.5;
    }
    let after = run(&store);
    for (a, b) in before.iter().zip(&after) {
        assert_eq!(a.image, b.image);
        assert_eq!(a.style.mu, b.style.mu);
    }
}

#[test]
fn text_encoding_is_deterministic() {
    let (model, store) = tiny_model(5);
    let tokens = model.tokenize("golden warm calm");
    let run = || {
        let mut g = Graph::new();
        let t = model.text.encode(&mut g, &store, &tokens).unwrap();
        let c = model.text.condition(&mut g, &store, t.e_bar, tsg::model::normal_vector(4, &mut common::rng(1))).unwrap();
        (g.value(t.e).clone(), g.value(c.e_c).clone())
    };
    assert_eq!(run(), run());
}

#[test]
fn discriminator_loss_does_not_reach_the_generator() {
    let (model, store) = tiny_model(6);
    let img = tensor(&[3, 8, 8], 7, 0.0, 1.0);
    let enc = model.encode_image(&img).unwrap();
    let (z, n) = model.sample_noise(&mut common::rng(2));
    let mut g = Graph::new();
    let gen = model.generate(&mut g, &store, &enc.v, &model.tokenize("cold calm"), z, n).unwrap();
    let out = gen.stages[1];
    let fake_img = g.detach(out.image).unwrap();
    let fake = StyleNodes { mu: g.detach(out.style.mu).unwrap(), sigma: g.detach(out.style.sigma).unwrap() };
    let e_bar = g.detach(gen.text.e_bar).unwrap();
    let real_img = g.constant(img.clone()).unwrap();
    let real = StyleNodes { mu: g.constant(enc.style.mu.clone()).unwrap(), sigma: g.constant(enc.style.sigma.clone()).unwrap() };
    let d = &model.discriminators[1];
    let lr = d.score(&mut g, &store, real_img, real, e_bar).unwrap();
    let lf = d.score(&mut g, &store, fake_img, fake, e_bar).unwrap();
    let loss = discriminator_loss_node(&mut g, &lr, &lf).unwrap();
    let grads = g.backward(loss).unwrap();
    let mut touched = 0;
    for (id, grad) in grads.iter() {
        let p = store.get(id);
        match p.group {
            Group::Discriminator(1) => touched += 1,
            _ => assert!(grad.data().iter().all(|&v| v == 0.0), "{} received gradient", p.name),
        }
    }
    assert!(touched > 0);
}

#[test]
fn conditional_style_branch_depends_on_sentence_feature() {
    let (model, store) = tiny_model(8);
    let d = &model.discriminators[0];
    let style_in = tensor(&[24], 1, 0.1, 1.0);
    let e_bar = tensor(&[8], 2, -1.0, 1.0);
    let err = common::check_gradients(&[e_bar.clone()], 11, |g, x| {
        let mu = g.constant(Tensor::new(&[12], style_in.data()[..12].to_vec())?)?;
        let sigma = g.constant(Tensor::new(&[12], style_in.data()[12..].to_vec())?)?;
        let (_, feat) = d.score_style(g, &store, StyleNodes { mu, sigma })?;
        d.score_style_cond(g, &store, feat, x[0])
    });
    assert!(err < 1e-5, "{err}");
    let mut g = Graph::new();
    let mu = g.constant(Tensor::new(&[12], style_in.data()[..12].to_vec()).unwrap()).unwrap();
    let sigma = g.constant(Tensor::new(&[12], style_in.data()[12..].to_vec()).unwrap()).unwrap();
    let (_, feat) = d.score_style(&mut g, &store, StyleNodes { mu, sigma }).unwrap();
    let e = g.input(e_bar).unwrap();
    let s = d.score_style_cond(&mut g, &store, feat, e).unwrap();
    let s = g.sum(s).unwrap();
    let grads = g.backward(s).unwrap();
    assert!(grads.wrt(e).unwrap().data().iter().any(|&v| v.abs() > 1e-9));
}

#[test]
fn restyling_keeps_the_normalised_content() {
    // Variance epsilon shrinks normalised values by about eps / (2 var), so
    // the content needs channel variances well above it: binary pixels.
    let (model, store) = tiny_model(3);
    let img = tensor(&[3, 8, 8], 8, 0.0, 1.0).map(|v| v.round());
    let (z, n) = model.sample_noise(&mut common::rng(4));
    let unit = StylePair::new(Tensor::zeros(&[12]), Tensor::full(&[12], 1.0)).unwrap();
    let content = adain_merge(&model.encode_image(&img).unwrap().v, &unit).unwrap();
    for out in model.full_generate(&store, &img, &model.tokenize("cold stripes"), z, n).unwrap() {
        let got = adain_merge(&out.feature, &unit).unwrap();
        assert!(got.max_abs_diff(&content) < 1e-4, "{}", got.max_abs_diff(&content));
    }
}

//! Builds an untrained model, runs both style stages for one toy image and
//! prints the tensor shapes along the way.
//!
//! `cargo run --example generate -- [desk|paper|tiny]`

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tsg::data::toy::{render, toy_samples};
use tsg::model::{Model, ModelConfig};
use tsg::tensor::ParamStore;
use tsg::text::Vocabulary;

fn main() -> tsg::Result<()> {
    let config = match std::env::args().nth(1).as_deref() {
        Some("paper") => ModelConfig::paper(),
        Some("tiny") => ModelConfig::tiny(),
        _ => ModelConfig::desk(),
    };
    let samples = toy_samples(8, 1);
    let vocab = Vocabulary::build(samples.iter().map(|s| s.caption.as_str()), config.vocab_cap);
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = Model::new(config, vocab, &mut store, &mut rng)?;
    println!("{} parameters", store.numel());
    for (name, shape) in model.shape_report(&store)? {
        println!("  {name:<7} {shape:?}");
    }

    let image = render(&samples[2], model.config.image_size, &mut rng);
    let (z, noise) = model.sample_noise(&mut rng);
    let outputs = model.full_generate(&store, &image, &model.tokenize(&samples[2].caption), z, noise)?;
    let truth = model.encode_image(&image)?.style;
    for (t, out) in outputs.iter().enumerate() {
        let rho = tsg::objectives::pearson(&truth.concat(), &out.style.concat(), 1e-8)?;
        println!("stage {t}: mu[..3] {:?}, correlation with the image's own style {rho:.3}", &out.style.mu.data()[..3]);
    }
    Ok(())
}

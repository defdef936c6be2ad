//! Scores a real toy image and a generated one with every discriminator
//! branch of both stages.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tsg::data::toy::{render, toy_samples};
use tsg::discriminator::Branch;
use tsg::model::{Model, ModelConfig};
use tsg::tensor::{Graph, ParamStore};
use tsg::text::Vocabulary;

fn main() -> tsg::Result<()> {
    let samples = toy_samples(4, 2);
    let vocab = Vocabulary::build(samples.iter().map(|s| s.caption.as_str()), 64);
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model = Model::new(ModelConfig::desk(), vocab, &mut store, &mut rng)?;
    let image = render(&samples[0], 64, &mut rng);
    let enc = model.encode_image(&image)?;
    let (z, noise) = model.sample_noise(&mut rng);

    let mut g = Graph::new();
    let gen = model.generate(&mut g, &store, &enc.v, &model.tokenize(&samples[0].caption), z, noise)?;
    let real_image = g.constant(image)?;
    let real_style = tsg::generator::StyleNodes { mu: g.constant(enc.style.mu)?, sigma: g.constant(enc.style.sigma)? };
    for (t, stage) in gen.stages.iter().enumerate() {
        let d = &model.discriminators[t];
        let real = d.score(&mut g, &store, real_image, real_style, gen.text.e_bar)?.scores(&g);
        let fake = d.score(&mut g, &store, stage.image, stage.style, gen.text.e_bar)?.scores(&g);
        for b in Branch::ALL {
            println!("stage {t} {:<10} real {:.4}  generated {:.4}", b.name(), real.get(b), fake.get(b));
        }
    }
    Ok(())
}

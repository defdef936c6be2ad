//! Tokenises captions and prints word features, the sentence feature and a
//! conditioned text vector.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tsg::model::normal_vector;
use tsg::tensor::{Graph, ParamStore};
use tsg::text::{tokenize, TextConfig, TextEncoder, Vocabulary};

fn main() -> tsg::Result<()> {
    let captions = ["a calm golden evening", "gloomy azure stripes at night", "dreamy olive blobs"];
    let vocab = Vocabulary::build(captions, 32);
    let config = TextConfig { vocab_size: vocab.len(), embed_dim: 16, word_dim: 8, text_len: 6, cond_dim: 4 };
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let encoder = TextEncoder::new(config, &mut store, &mut rng)?;

    for caption in captions.iter().chain(&["an unseen caption"]) {
        let tokens = tokenize(caption, &vocab, 6);
        let mut g = Graph::new();
        let text = encoder.encode(&mut g, &store, &tokens)?;
        let cond = encoder.condition(&mut g, &store, text.e_bar, normal_vector(4, &mut rng))?;
        println!("{caption:?}");
        println!("  ids {:?} ({} real)", tokens.ids, tokens.actual);
        println!("  e {:?}, e_bar[..4] {:?}", g.shape(text.e), &g.value(text.e_bar).data()[..4]);
        println!("  e_c {:?}", g.value(cond.e_c).data());
    }
    Ok(())
}

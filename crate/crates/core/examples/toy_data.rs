//! Writes a toy corpus, reads it back through the manifest loader and draws
//! augmented batches.
//!
//! `cargo run --example toy_data -- [dir]`

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tsg::data::{batch_iter, load_manifest, synth_toy_corpus, Dataset};
use tsg::text::Vocabulary;

fn main() -> tsg::Result<()> {
    let dir = std::env::args().nth(1).map(Into::into).unwrap_or_else(|| std::env::temp_dir().join("tsg_toy"));
    let samples = synth_toy_corpus(&dir, 12, 1, 64)?;
    let manifest = load_manifest(&dir.join("manifest.jsonl"))?;
    println!("{} samples in {}", manifest.len(), dir.display());
    for s in samples.iter().take(4) {
        println!("  {}", s.caption);
    }
    let vocab = Vocabulary::build(manifest.records.iter().map(|r| r.caption.as_str()), 64);
    println!("vocabulary of {} tokens", vocab.len());
    let data = Dataset::new(&manifest, &vocab, 12, 48, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (k, batch) in batch_iter(data.len(), 5, 9)?.take(3).enumerate() {
        let first = data.sample(batch[0], &mut rng)?;
        println!("batch {k}: {batch:?}, first image {:?}", first.image.shape());
    }
    Ok(())
}

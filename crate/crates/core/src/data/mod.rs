//! Dataset ingestion, augmentation, batching and the toy corpus.

pub mod image;
pub mod manifest;
pub mod toy;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use self::image::{augment, center_resize, load_png, save_png};
pub use manifest::{load_manifest, Manifest, Record};
pub use toy::synth_toy_corpus;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::text::{tokenize, Tokens, Vocabulary};

/// One training example after preprocessing.
#[derive(Debug, Clone)]
pub struct SamplePair {
    pub image: Tensor,
    pub tokens: Tokens,
    pub caption_raw: String,
    pub id: String,
}

/// Manifest records with tokenised captions and decoded source images.
#[derive(Debug, Clone)]
pub struct Dataset {
    records: Vec<Record>,
    tokens: Vec<Tokens>,
    images: Vec<Tensor>,
    size: usize,
    augment: bool,
}

impl Dataset {
    /// Decodes every image once. With `augment` each draw is randomly cropped
    /// and flipped; otherwise images are centre-cropped and resized once.
    pub fn new(manifest: &Manifest, vocab: &Vocabulary, text_len: usize, size: usize, augment: bool) -> Result<Self> {
        let mut images = Vec::with_capacity(manifest.len());
        for r in &manifest.records {
            let img = load_png(&r.image_path)?;
            images.push(if augment { img } else { center_resize(&img, size)? });
        }
        let tokens = manifest.records.iter().map(|r| tokenize(&r.caption, vocab, text_len)).collect();
        Ok(Self { records: manifest.records.clone(), tokens, images, size, augment })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    /// Sample `i`; `rng` is consumed only when augmenting.
    pub fn sample(&self, i: usize, rng: &mut impl Rng) -> Result<SamplePair> {
        let rec = self.records.get(i).ok_or_else(|| Error::Usage(format!("sample {i} out of range")))?;
        let image = if self.augment { augment(&self.images[i], rng, self.size)? } else { self.images[i].clone() };
        Ok(SamplePair {
            image,
            tokens: self.tokens[i].clone(),
            caption_raw: rec.caption.clone(),
            id: rec.image_path.display().to_string(),
        })
    }
}

/// Position of a [`Sampler`] in its stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerState {
    pub epoch: u64,
    pub pos: usize,
}

/// Endless stream of index batches. Each epoch is a permutation drawn from
/// `(seed, epoch)`; a trailing partial batch is dropped.
#[derive(Debug, Clone)]
pub struct Sampler {
    n: usize,
    batch: usize,
    seed: u64,
    state: SamplerState,
    order: Vec<usize>,
}

pub fn batches_per_epoch(n: usize, batch: usize) -> usize {
    n.checked_div(batch).unwrap_or(0)
}

/// Shuffled batches over `n` samples.
pub fn batch_iter(n: usize, batch: usize, seed: u64) -> Result<Sampler> {
    Sampler::new(n, batch, seed, SamplerState { epoch: 0, pos: 0 })
}

impl Sampler {
    pub fn new(n: usize, batch: usize, seed: u64, state: SamplerState) -> Result<Self> {
        if n == 0 {
            return Err(Error::Usage("cannot batch an empty dataset".into()));
        }
        if batch == 0 || batch > n {
            return Err(Error::Usage(format!("batch size {batch} must be in 1..={n}")));
        }
        let order = epoch_order(n, seed, state.epoch);
        Ok(Self { n, batch, seed, state, order })
    }

    pub fn state(&self) -> SamplerState {
        self.state
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.state.pos + self.batch > self.n {
            self.state = SamplerState { epoch: self.state.epoch + 1, pos: 0 };
            self.order = epoch_order(self.n, self.seed, self.state.epoch);
        }
        let b = self.order[self.state.pos..self.state.pos + self.batch].to_vec();
        self.state.pos += self.batch;
        b
    }
}

impl Iterator for Sampler {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        Some(self.next_batch())
    }
}

fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 << 32 | epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

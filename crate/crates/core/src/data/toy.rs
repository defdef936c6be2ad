//! Procedural two-colour texture corpus whose captions name the palette, so
//! caption words predict the image's channel statistics.

use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::image::save_png;
use super::manifest::{write_manifest, Record};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct Palette {
    pub name: &'static str,
    pub temperature: &'static str,
    pub colors: [[f32; 3]; 2],
}

pub const PALETTES: [Palette; 8] = [
    Palette { name: "golden", temperature: "warm", colors: [[0.95, 0.75, 0.20], [0.80, 0.55, 0.10]] },
    Palette { name: "crimson", temperature: "warm", colors: [[0.85, 0.10, 0.15], [0.55, 0.05, 0.20]] },
    Palette { name: "amber", temperature: "warm", colors: [[0.95, 0.60, 0.10], [0.70, 0.30, 0.05]] },
    Palette { name: "azure", temperature: "cold", colors: [[0.15, 0.45, 0.90], [0.05, 0.25, 0.70]] },
    Palette { name: "violet", temperature: "cold", colors: [[0.55, 0.20, 0.85], [0.35, 0.10, 0.60]] },
    Palette { name: "teal", temperature: "cold", colors: [[0.10, 0.55, 0.65], [0.05, 0.35, 0.50]] },
    Palette { name: "emerald", temperature: "fresh", colors: [[0.10, 0.75, 0.35], [0.05, 0.45, 0.20]] },
    Palette { name: "olive", temperature: "fresh", colors: [[0.50, 0.55, 0.15], [0.35, 0.40, 0.10]] },
];

pub const MOODS: [&str; 4] = ["calm", "lively", "gloomy", "dreamy"];
pub const TEXTURES: [&str; 3] = ["stripes", "checker", "blobs"];

/// Ground truth behind one generated sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToySample {
    pub palette: usize,
    pub mood: usize,
    pub texture: usize,
    pub caption: String,
}

impl Palette {
    /// Channel with the largest mean for any texture or mood.
    pub fn dominant_channel(&self) -> usize {
        let m: Vec<f32> = (0..3).map(|c| self.colors[0][c] + self.colors[1][c]).collect();
        (0..3).max_by(|&a, &b| m[a].total_cmp(&m[b])).unwrap_or(0)
    }
}

fn mood_color(mood: usize, c: f32) -> f32 {
    match MOODS[mood] {
        "lively" => c * 1.05,
        "gloomy" => c * 0.6,
        "dreamy" => c * 0.7 + 0.3,
        _ => c,
    }
}

/// Renders one sample at `size x size`.
pub fn render(sample: &ToySample, size: usize, rng: &mut impl Rng) -> Tensor {
    let pal = PALETTES[sample.palette];
    let swap = rng.random_bool(0.5);
    let (a, b) = if swap { (pal.colors[1], pal.colors[0]) } else { (pal.colors[0], pal.colors[1]) };
    let period = rng.random_range(4..=16usize.min(size.max(4)));
    let vertical = rng.random_bool(0.5);
    let blobs: Vec<(f32, f32, f32)> = (0..rng.random_range(2..=5))
        .map(|_| {
            let s = size as f32;
            (rng.random_range(0.0..s), rng.random_range(0.0..s), rng.random_range(0.1 * s..0.3 * s))
        })
        .collect();
    let mut data = vec![0.0f32; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let second = match TEXTURES[sample.texture] {
                "stripes" => (if vertical { x } else { y } / period) % 2 == 1,
                "checker" => (x / period + y / period) % 2 == 1,
                _ => blobs.iter().any(|&(cx, cy, r)| {
                    let (dx, dy) = (x as f32 - cx, y as f32 - cy);
                    dx * dx + dy * dy < r * r
                }),
            };
            let col = if second { b } else { a };
            let jitter = rng.random_range(-0.02..0.02f32);
            for c in 0..3 {
                data[(c * size + y) * size + x] = (mood_color(sample.mood, col[c]) + jitter).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(&[3, size, size], data).expect("square image")
}

/// Draws `n` sample descriptions; palettes cycle so every palette appears
/// once in each block of eight.
pub fn toy_samples(n: usize, seed: u64) -> Vec<ToySample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let palette = i % PALETTES.len();
            let mood = rng.random_range(0..MOODS.len());
            let texture = rng.random_range(0..TEXTURES.len());
            let pal = &PALETTES[palette];
            let caption = format!("a {} {} scene of {} {}", MOODS[mood], pal.temperature, pal.name, TEXTURES[texture]);
            ToySample { palette, mood, texture, caption }
        })
        .collect()
}

/// Writes `n` PNGs and `manifest.jsonl` under `dir`. Output is a pure
/// function of `(n, seed, size)`.
pub fn synth_toy_corpus(dir: &Path, n: usize, seed: u64, size: usize) -> Result<Vec<ToySample>> {
    if n == 0 {
        return Err(Error::Usage("toy corpus needs at least one sample".into()));
    }
    if size < 4 {
        return Err(Error::Usage(format!("toy image size {size} is too small")));
    }
    fs::create_dir_all(dir)?;
    let samples = toy_samples(n, seed);
    let mut records = Vec::with_capacity(n);
    for (i, s) in samples.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        let img = render(s, size, &mut rng);
        let name = format!("img_{i:05}.png");
        save_png(&dir.join(&name), &img)?;
        records.push(Record { image_path: name.into(), caption: s.caption.clone(), split: None });
    }
    write_manifest(&dir.join("manifest.jsonl"), &records)?;
    Ok(samples)
}

/// A random caption from the corpus vocabulary, for tests and demos.
pub fn random_caption(rng: &mut impl Rng) -> String {
    let p = PALETTES.choose(rng).expect("palettes");
    let m = MOODS.choose(rng).expect("moods");
    let t = TEXTURES.choose(rng).expect("textures");
    format!("a {m} {} scene of {} {t}", p.temperature, p.name)
}

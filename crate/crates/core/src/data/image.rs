//! PNG input/output and the geometric transforms of the input pipeline.
//! Pixels are `[3, H, W]` tensors in `[0, 1]`.

use std::path::Path;

use image::imageops::{self, FilterType};
use image::{Rgb, Rgb32FImage, RgbImage};
use rand::Rng;

use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

/// Smallest crop, as a fraction of the source area.
pub const MIN_CROP_AREA: f64 = 0.875;

pub fn load_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    Ok(from_rgb8(&img))
}

/// Writes the image clamped to `[0, 1]` and rounded to 8 bits.
pub fn save_png(path: &Path, image: &Tensor) -> Result<()> {
    to_rgb8(image)?.save(path)?;
    Ok(())
}

pub fn from_rgb8(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = p[c] as f32 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data).expect("rgb buffer")
}

pub fn to_rgb8(image: &Tensor) -> Result<RgbImage> {
    let (h, w) = check(image)?;
    let px = |c: usize, x: u32, y: u32| -> u8 {
        let v = image.data()[(c * h + y as usize) * w + x as usize];
        (v.clamp(0.0, 1.0) * 255.0).round() as u8
    };
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| Rgb([px(0, x, y), px(1, x, y), px(2, x, y)])))
}

fn to_buffer(image: &Tensor) -> Result<Rgb32FImage> {
    let (h, w) = check(image)?;
    let px = |c: usize, x: u32, y: u32| image.data()[(c * h + y as usize) * w + x as usize];
    Ok(Rgb32FImage::from_fn(w as u32, h as u32, |x, y| Rgb([px(0, x, y), px(1, x, y), px(2, x, y)])))
}

fn from_buffer(img: &Rgb32FImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = p[c].clamp(0.0, 1.0);
        }
    }
    Tensor::new(&[3, h, w], data).expect("rgb buffer")
}

fn check(image: &Tensor) -> Result<(usize, usize)> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 || s[1] == 0 || s[2] == 0 {
        return dim_err(format!("expected a [3, H, W] image, got {s:?}"));
    }
    Ok((s[1], s[2]))
}

/// Square crop placement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Crop {
    pub x: u32,
    pub y: u32,
    pub side: u32,
}

/// Crop, optional horizontal flip, then bilinear resize to `target x target`.
pub fn crop_flip_resize(image: &Tensor, crop: Crop, flip: bool, target: usize) -> Result<Tensor> {
    let buf = to_buffer(image)?;
    let mut out = imageops::crop_imm(&buf, crop.x, crop.y, crop.side, crop.side).to_image();
    if flip {
        out = imageops::flip_horizontal(&out);
    }
    Ok(from_buffer(&resize(&out, target)))
}

fn resize(img: &Rgb32FImage, target: usize) -> Rgb32FImage {
    if img.width() as usize == target && img.height() as usize == target {
        return img.clone();
    }
    imageops::resize(img, target as u32, target as u32, FilterType::Triangle)
}

/// Sources smaller than the target are upscaled so the short side matches.
fn ensure_min_side(image: &Tensor, target: usize) -> Result<Tensor> {
    let (h, w) = check(image)?;
    if h.min(w) >= target {
        return Ok(image.clone());
    }
    log::warn!("image {h}x{w} is smaller than {target}; upscaling before cropping");
    let scale = target as f64 / h.min(w) as f64;
    let (nh, nw) = (((h as f64 * scale).ceil() as u32).max(target as u32), ((w as f64 * scale).ceil() as u32).max(target as u32));
    let buf = imageops::resize(&to_buffer(image)?, nw, nh, FilterType::Triangle);
    Ok(from_buffer(&buf))
}

/// Random square crop of 87.5-100% of the largest square's area, horizontal
/// flip with probability one half, bilinear resize to `target`.
pub fn augment(image: &Tensor, rng: &mut impl Rng, target: usize) -> Result<Tensor> {
    let image = ensure_min_side(image, target)?;
    let (h, w) = check(&image)?;
    let short = h.min(w) as f64;
    let area = rng.random_range(MIN_CROP_AREA..=1.0);
    let side = ((area.sqrt() * short).round() as usize).clamp(1, h.min(w));
    let x = rng.random_range(0..=w - side) as u32;
    let y = rng.random_range(0..=h - side) as u32;
    let flip = rng.random_bool(0.5);
    crop_flip_resize(&image, Crop { x, y, side: side as u32 }, flip, target)
}

/// Deterministic centre square crop and resize.
pub fn center_resize(image: &Tensor, target: usize) -> Result<Tensor> {
    let image = ensure_min_side(image, target)?;
    let (h, w) = check(&image)?;
    let side = h.min(w);
    let crop = Crop { x: ((w - side) / 2) as u32, y: ((h - side) / 2) as u32, side: side as u32 };
    crop_flip_resize(&image, crop, false, target)
}

/// Rows of equally sized images laid side by side.
pub fn grid(rows: &[Vec<Tensor>]) -> Result<Tensor> {
    let Some(first) = rows.first().and_then(|r| r.first()) else {
        return dim_err("empty image grid");
    };
    let (h, w) = check(first)?;
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let (gh, gw) = (rows.len() * h, cols * w);
    let mut data = vec![0.0f32; 3 * gh * gw];
    for (r, row) in rows.iter().enumerate() {
        for (col, img) in row.iter().enumerate() {
            if img.shape() != first.shape() {
                return dim_err(format!("grid tile {:?} vs {:?}", img.shape(), first.shape()));
            }
            for c in 0..3 {
                for y in 0..h {
                    let src = &img.data()[(c * h + y) * w..(c * h + y + 1) * w];
                    let off = (c * gh + r * h + y) * gw + col * w;
                    data[off..off + w].copy_from_slice(src);
                }
            }
        }
    }
    Tensor::new(&[3, gh, gw], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pattern(h: usize, w: usize) -> Tensor {
        let data = (0..3 * h * w).map(|i| ((i * 13) % 17) as f32 / 16.0).collect();
        Tensor::new(&[3, h, w], data).unwrap()
    }

    #[test]
    fn augment_is_seeded_and_sized() {
        let img = pattern(40, 48);
        let a = augment(&img, &mut ChaCha8Rng::seed_from_u64(1), 32).unwrap();
        let b = augment(&img, &mut ChaCha8Rng::seed_from_u64(1), 32).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[3, 32, 32]);
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let small = augment(&pattern(8, 8), &mut ChaCha8Rng::seed_from_u64(2), 16).unwrap();
        assert_eq!(small.shape(), &[3, 16, 16]);
    }

    #[test]
    fn double_flip_restores_the_crop() {
        let img = pattern(16, 16);
        let crop = Crop { x: 2, y: 1, side: 12 };
        let once = crop_flip_resize(&img, crop, true, 12).unwrap();
        let twice = crop_flip_resize(&once, Crop { x: 0, y: 0, side: 12 }, true, 12).unwrap();
        assert_eq!(twice, crop_flip_resize(&img, crop, false, 12).unwrap());
    }

    #[test]
    fn png_round_trip_is_exact_on_8_bit_values() {
        let img = pattern(5, 7);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        save_png(&p, &img).unwrap();
        let back = load_png(&p).unwrap();
        assert!(back.max_abs_diff(&img) <= 0.5 / 255.0 + 1e-6);
    }

    #[test]
    fn grid_layout() {
        let a = Tensor::full(&[3, 2, 2], 0.25f32);
        let b = Tensor::full(&[3, 2, 2], 0.75f32);
        let g = grid(&[vec![a.clone(), b.clone()], vec![b, a]]).unwrap();
        assert_eq!(g.shape(), &[3, 4, 4]);
        assert_eq!(g.data()[0], 0.25);
        assert_eq!(g.data()[2], 0.75);
        assert_eq!(g.data()[2 * 4], 0.75);
    }
}

//! Moves the colour statistics of one toy image onto another through the
//! invertible codec and writes `content | style | result` as a PNG.
//!
//! `cargo run --example style_transfer -- [out.png]`

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tsg::codec::{adain_merge, style_extract, Codec, CodecConfig};
use tsg::data::image::grid;
use tsg::data::save_png;
use tsg::data::toy::{render, toy_samples};

fn main() -> tsg::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "style_transfer.png".into());
    let samples = toy_samples(8, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let content = render(&samples[0], 64, &mut rng);
    let style_src = render(&samples[3], 64, &mut rng);

    let codec = Codec::new(CodecConfig { squeeze: 4, mixing_seed: 7 })?;
    let v = codec.encode(&content)?;
    let target = style_extract(&codec.encode(&style_src)?)?;
    let restyled = codec.decode(&adain_merge(&v, &target)?)?.map(|p| p.clamp(0.0, 1.0));

    println!("content: {}", samples[0].caption);
    println!("style:   {}", samples[3].caption);
    println!("feature {:?}, {} style channels", v.shape(), target.channels());
    println!("round trip error {:.2e}", codec.decode(&v)?.max_abs_diff(&content));
    save_png(out.as_ref(), &grid(&[vec![content, style_src, restyled]])?)?;
    println!("wrote {out}");
    Ok(())
}

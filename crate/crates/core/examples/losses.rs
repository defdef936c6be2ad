//! Loss and metric values at a few hand-picked score and style settings.

use tsg::discriminator::ScoreSet;
use tsg::objectives::{discriminator_loss, generator_loss, metric_psnr, metric_sl, style_loss};
use tsg::tensor::Tensor;

fn main() -> tsg::Result<()> {
    for p in [0.1, 0.5, 0.9] {
        let s = ScoreSet::uniform(p);
        println!("scores {p}: L_G (one stage) {:.4}, L_D (real = fake) {:.4}", generator_loss(&[s]), discriminator_loss(&s, &s));
    }
    let h: Vec<f64> = (0..8).map(|i| i as f64 * 0.1).collect();
    let shifted: Vec<f64> = h.iter().map(|v| 3.0 * v + 1.0).collect();
    let reversed: Vec<f64> = h.iter().rev().copied().collect();
    println!("style loss, affine copy {:.4}, reversed {:.4}", style_loss(&h, &shifted)?, style_loss(&h, &reversed)?);
    println!("SL metric, unit offset {:.4}", metric_sl(&h, &h.iter().map(|v| v + 1.0).collect::<Vec<_>>())?);
    let a = Tensor::<f32>::full(&[3, 4, 4], 0.5);
    let b = a.map(|v| v + 0.01);
    println!("PSNR, offset 0.01 {:.2} dB, identical {:.0} dB", metric_psnr(&a, &b, 1.0)?, metric_psnr(&a, &a, 1.0)?);
    Ok(())
}

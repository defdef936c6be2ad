//! Adversarial and style losses, their totals, and the evaluation metrics.
//!
//! Scalar versions take scores and clamp logs at [`LOG_FLOOR`]. Graph
//! versions take discriminator logits and use `-log sigmoid(x) =
//! softplus(-x)`, which is the same quantity without saturation.

use serde::{Deserialize, Serialize};

use crate::discriminator::{Branch, Logits, ScoreSet};
use crate::error::{dim_err, Result};
use crate::tensor::{Graph, NodeId, Scalar, Tensor};

pub const LOG_FLOOR: f64 = 1e-12;
/// Denominator guard of the Pearson correlation.
pub const PEARSON_EPS: f64 = 1e-8;
/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;
pub const DEFAULT_LAMBDA: f64 = 0.1;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn safe_ln(x: f64) -> f64 {
    x.max(LOG_FLOOR).ln()
}

/// `-sum log s(fake)` over the four branches of every stage.
pub fn generator_loss(fake: &[ScoreSet]) -> f64 {
    fake.iter().flat_map(|s| s.to_array()).map(|s| -safe_ln(s)).sum()
}

/// `-sum [log s(real) + log(1 - s(fake))]` over one stage's branches.
pub fn discriminator_loss(real: &ScoreSet, fake: &ScoreSet) -> f64 {
    Branch::ALL.iter().map(|&b| -safe_ln(real.get(b)) - safe_ln(1.0 - fake.get(b))).sum()
}

/// Pearson correlation, zero when either side has no variance.
pub fn pearson(a: &[f64], b: &[f64], eps: f64) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return dim_err(format!("pearson: lengths {} and {}", a.len(), b.len()));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    Ok(sab / ((saa * sbb).sqrt() + eps))
}

/// `-rho(h, h_i)`.
pub fn style_loss(h: &[f64], h_i: &[f64]) -> Result<f64> {
    Ok(-pearson(h, h_i, PEARSON_EPS)?)
}

/// `(l_g + lambda * sum l_s, l_d + lambda * sum l_s)`.
pub fn total_losses(l_g: f64, l_d: f64, l_s: &[f64], lambda: f64) -> (f64, f64) {
    let s: f64 = l_s.iter().sum();
    (l_g + lambda * s, l_d + lambda * s)
}

/// `|s' - s|_2 / n` with `n` the length of the vectors passed.
pub fn metric_sl(s: &[f64], s_prime: &[f64]) -> Result<f64> {
    if s.len() != s_prime.len() || s.is_empty() {
        return dim_err(format!("style metric: lengths {} and {}", s.len(), s_prime.len()));
    }
    let norm = s.iter().zip(s_prime).map(|(a, b)| (b - a) * (b - a)).sum::<f64>().sqrt();
    Ok(norm / s.len() as f64)
}

/// `10 log10(peak^2 / mse)`, capped at [`PSNR_CAP`].
pub fn metric_psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() || a.is_empty() {
        return dim_err(format!("psnr: shapes {:?} and {:?}", a.shape(), b.shape()));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = (*x - *y).to_f64().unwrap_or(f64::NAN);
            d * d
        })
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

/// `-log sigmoid(x)` summed over the logits.
fn neg_log_sigmoid_sum<T: Scalar>(g: &mut Graph<T>, logits: &[NodeId], negate: bool) -> Result<NodeId> {
    let x = g.concat(logits, 0)?;
    let x = if negate { x } else { g.scale(x, -1.0)? };
    let sp = g.softplus(x)?;
    g.sum(sp)
}

/// Graph form of [`generator_loss`].
pub fn generator_loss_node<T: Scalar>(g: &mut Graph<T>, fake: &[Logits]) -> Result<NodeId> {
    let logits: Vec<NodeId> = fake.iter().flat_map(|l| Branch::ALL.map(|b| l.get(b))).collect();
    let flat = flatten(g, &logits)?;
    neg_log_sigmoid_sum(g, &flat, false)
}

/// Graph form of [`discriminator_loss`]; the fake logits should come from
/// detached generator outputs.
pub fn discriminator_loss_node<T: Scalar>(g: &mut Graph<T>, real: &Logits, fake: &Logits) -> Result<NodeId> {
    let r = flatten(g, &Branch::ALL.map(|b| real.get(b)))?;
    let f = flatten(g, &Branch::ALL.map(|b| fake.get(b)))?;
    let lr = neg_log_sigmoid_sum(g, &r, false)?;
    // -log(1 - sigmoid(x)) = softplus(x)
    let lf = neg_log_sigmoid_sum(g, &f, true)?;
    g.add(lr, lf)
}

/// Graph form of [`style_loss`].
pub fn style_loss_node<T: Scalar>(g: &mut Graph<T>, h: NodeId, h_i: NodeId) -> Result<NodeId> {
    let rho = g.pearson(h, h_i, PEARSON_EPS)?;
    g.scale(rho, -1.0)
}

fn flatten<T: Scalar>(g: &mut Graph<T>, ids: &[NodeId]) -> Result<Vec<NodeId>> {
    ids.iter().map(|&i| g.reshape(i, &[1])).collect()
}

/// Loss values of one training step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_g: f64,
    /// Sum of both stages' discriminator losses.
    pub l_d: f64,
    pub l_s_stage0: f64,
    pub l_s_stage1: f64,
    pub l_g_total: f64,
    pub l_d_total: f64,
    /// Mean real and fake scores per stage, branch order of [`Branch::ALL`].
    pub real_scores: Vec<[f64; 4]>,
    pub fake_scores: Vec<[f64; 4]>,
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn generator_loss_values() {
        assert!((generator_loss(&[ScoreSet::uniform(0.5)]) - 4.0 * LN2).abs() < 1e-12);
        assert!((generator_loss(&[ScoreSet::uniform(0.5); 2]) - 8.0 * LN2).abs() < 1e-12);
        assert!(generator_loss(&[ScoreSet::uniform(1.0)]).abs() < 1e-12);
    }

    #[test]
    fn discriminator_loss_values() {
        assert_eq!(discriminator_loss(&ScoreSet::uniform(1.0), &ScoreSet::uniform(0.0)), 0.0);
        assert!((discriminator_loss(&ScoreSet::uniform(0.5), &ScoreSet::uniform(0.5)) - 8.0 * LN2).abs() < 1e-12);
        for p in [0.1, 0.3, 0.7, 0.9] {
            assert!(discriminator_loss(&ScoreSet::uniform(p), &ScoreSet::uniform(p)) >= 8.0 * LN2 - 1e-12);
        }
        assert!(discriminator_loss(&ScoreSet::uniform(0.0), &ScoreSet::uniform(1.0)).is_finite());
    }

    #[test]
    fn style_loss_values() {
        let h = [1.0, 2.0, 3.0, 4.0];
        assert!((style_loss(&h, &h).unwrap() + 1.0).abs() < 1e-8);
        let affine: Vec<f64> = h.iter().map(|v| 2.5 * v - 7.0).collect();
        assert!((style_loss(&h, &affine).unwrap() + 1.0).abs() < 1e-8);
        assert!((style_loss(&h, &[1.0, 3.0, 2.0, 4.0]).unwrap() + 0.8).abs() < 1e-8);
        assert_eq!(style_loss(&h, &[2.0; 4]).unwrap(), 0.0);
    }

    #[test]
    fn totals() {
        assert_eq!(total_losses(2.0, 3.0, &[-1.0, -0.5], 0.0), (2.0, 3.0));
        let (g, d) = total_losses(2.0, 3.0, &[-1.0, -0.5], 0.1);
        assert!((g - 1.85).abs() < 1e-12);
        assert!((d - 2.85).abs() < 1e-12);
    }

    #[test]
    fn sl_values() {
        let s = vec![0.3; 48];
        assert_eq!(metric_sl(&s, &s).unwrap(), 0.0);
        let t: Vec<f64> = s.iter().map(|v| v + 1.0).collect();
        assert!((metric_sl(&s, &t).unwrap() - 48f64.sqrt() / 48.0).abs() < 1e-9);
        assert!(metric_sl(&s, &t[..3]).is_err());
    }

    #[test]
    fn psnr_values() {
        let a = Tensor::<f64>::zeros(&[1, 2, 2]);
        assert_eq!(metric_psnr(&a, &a, 1.0).unwrap(), PSNR_CAP);
        let b = Tensor::full(&[1, 2, 2], 0.1);
        assert!((metric_psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        let c = Tensor::full(&[1, 2, 2], 1.0);
        assert!(metric_psnr(&a, &c, 1.0).unwrap().abs() < 1e-12);
        assert!(metric_psnr(&a, &Tensor::zeros(&[4]), 1.0).is_err());
    }

    #[test]
    fn graph_losses_match_scalar_losses() {
        let mut g = Graph::<f64>::new();
        let vals = [0.3, -1.2, 2.0, 0.0, 1.1, -0.4, 0.9, -2.5];
        let ids: Vec<NodeId> = vals.iter().map(|&v| g.constant(Tensor::full(&[1, 1], v)).unwrap()).collect();
        let real = Logits { image: ids[0], style: ids[1], image_cond: ids[2], style_cond: ids[3] };
        let fake = Logits { image: ids[4], style: ids[5], image_cond: ids[6], style_cond: ids[7] };
        let ld = discriminator_loss_node(&mut g, &real, &fake).unwrap();
        let want = discriminator_loss(&real.scores(&g), &fake.scores(&g));
        assert!((g.value(ld).item() - want).abs() < 1e-12);
        let lg = generator_loss_node(&mut g, &[real, fake]).unwrap();
        let want = generator_loss(&[real.scores(&g), fake.scores(&g)]);
        assert!((g.value(lg).item() - want).abs() < 1e-12);
    }
}

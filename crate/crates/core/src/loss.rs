//! Segmentation losses with analytic gradients, plus the per-pixel softmax
//! they are usually composed with.
//!
//! Probability maps are channel-major: `k * pixels + p`.

use crate::error::{Error, Result};
use crate::grid::{ensure_same_layout, LabelMap};

pub const DICE_EPS: f64 = 1e-5;
pub const LOG_CLAMP: f64 = 1e-7;

/// `1 - mean soft Dice` over the foreground classes `1..K` (class 0 is
/// background). With a single class, that class is used.
pub fn dice_loss(pred: &LabelMap, gold: &LabelMap) -> Result<f64> {
    ensure_same_layout("dice_loss", pred, gold)?;
    Ok(dice_raw(pred.data(), gold.data(), pred.classes(), None))
}

/// [`dice_loss`] and its gradient w.r.t. `pred`, channel-major.
pub fn dice_loss_grad(pred: &LabelMap, gold: &LabelMap) -> Result<(f64, Vec<f64>)> {
    ensure_same_layout("dice_loss", pred, gold)?;
    let mut g = vec![0.0; pred.data().len()];
    let v = dice_raw(pred.data(), gold.data(), pred.classes(), Some((1.0, &mut g)));
    Ok((v, g))
}

fn foreground(k: usize) -> std::ops::Range<usize> {
    if k == 1 {
        0..1
    } else {
        1..k
    }
}

/// Accumulates `scale * d loss / d pred` when `grad` is given.
pub(crate) fn dice_raw(pred: &[f64], gold: &[f64], k: usize, grad: Option<(f64, &mut [f64])>) -> f64 {
    let n = pred.len() / k;
    let classes = foreground(k);
    let m = classes.len() as f64;
    let mut mean = 0.0;
    let mut parts = Vec::with_capacity(classes.len());
    for c in classes {
        let (p, g) = (&pred[c * n..(c + 1) * n], &gold[c * n..(c + 1) * n]);
        let inter: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        let den = p.iter().sum::<f64>() + g.iter().sum::<f64>() + DICE_EPS;
        let num = 2.0 * inter + DICE_EPS;
        mean += num / den / m;
        parts.push((c, num, den));
    }
    if let Some((scale, out)) = grad {
        for (c, num, den) in parts {
            let g = &gold[c * n..(c + 1) * n];
            for (o, gv) in out[c * n..(c + 1) * n].iter_mut().zip(g) {
                *o -= scale * (2.0 * gv * den - num) / (den * den) / m;
            }
        }
    }
    1.0 - mean
}

/// Mean per-pixel cross-entropy `-sum_k g_k ln p_k`, with `p` clamped to
/// `[1e-7, 1]` before the log.
pub fn ce_loss(pred: &LabelMap, gold: &LabelMap) -> Result<f64> {
    ensure_same_layout("ce_loss", pred, gold)?;
    Ok(ce_raw(pred.data(), gold.data(), pred.classes(), None))
}

pub fn ce_loss_grad(pred: &LabelMap, gold: &LabelMap) -> Result<(f64, Vec<f64>)> {
    ensure_same_layout("ce_loss", pred, gold)?;
    let mut g = vec![0.0; pred.data().len()];
    let v = ce_raw(pred.data(), gold.data(), pred.classes(), Some((1.0, &mut g)));
    Ok((v, g))
}

pub(crate) fn ce_raw(pred: &[f64], gold: &[f64], k: usize, grad: Option<(f64, &mut [f64])>) -> f64 {
    let n = (pred.len() / k) as f64;
    let mut total = 0.0;
    for (p, g) in pred.iter().zip(gold) {
        if *g != 0.0 {
            total -= g * p.clamp(LOG_CLAMP, 1.0).ln();
        }
    }
    if let Some((scale, out)) = grad {
        for ((o, p), g) in out.iter_mut().zip(pred).zip(gold) {
            // The clamp is flat outside (1e-7, 1].
            if *g != 0.0 && *p > LOG_CLAMP && *p <= 1.0 {
                *o -= scale * g / p / n;
            }
        }
    }
    total / n
}

/// `1 - cos(a, b)` over the flattened probability vectors.
pub fn cosine_consistency(warped: &LabelMap, reference: &LabelMap) -> Result<f64> {
    ensure_same_layout("cosine_consistency", warped, reference)?;
    cosine_raw(warped.data(), reference.data(), None)
}

/// [`cosine_consistency`] with gradients w.r.t. both arguments.
pub fn cosine_consistency_grad(warped: &LabelMap, reference: &LabelMap) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    ensure_same_layout("cosine_consistency", warped, reference)?;
    let mut ga = vec![0.0; warped.data().len()];
    let mut gb = vec![0.0; warped.data().len()];
    let v = cosine_raw(warped.data(), reference.data(), Some((1.0, &mut ga, &mut gb)))?;
    Ok((v, ga, gb))
}

pub(crate) fn cosine_raw(a: &[f64], b: &[f64], grad: Option<(f64, &mut [f64], &mut [f64])>) -> Result<f64> {
    let ab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("cosine consistency of a zero-norm map".into()));
    }
    let cos = ab / (na * nb);
    if let Some((scale, ga, gb)) = grad {
        let inv = 1.0 / (na * nb);
        for i in 0..a.len() {
            ga[i] -= scale * (b[i] * inv - cos * a[i] / (na * na));
            gb[i] -= scale * (a[i] * inv - cos * b[i] / (nb * nb));
        }
    }
    Ok(1.0 - cos)
}

/// Dice + cross-entropy, the supervised segmentation loss.
pub fn dice_ce_loss(pred: &LabelMap, gold: &LabelMap) -> Result<f64> {
    Ok(dice_loss(pred, gold)? + ce_loss(pred, gold)?)
}

pub fn dice_ce_loss_grad(pred: &LabelMap, gold: &LabelMap) -> Result<(f64, Vec<f64>)> {
    ensure_same_layout("dice_ce_loss", pred, gold)?;
    let mut g = vec![0.0; pred.data().len()];
    let k = pred.classes();
    let v = dice_raw(pred.data(), gold.data(), k, Some((1.0, &mut g))) + ce_raw(pred.data(), gold.data(), k, Some((1.0, &mut g)));
    Ok((v, g))
}

/// Per-pixel softmax over `k` channel-major logit planes.
pub(crate) fn softmax(logits: &[f64], k: usize) -> Vec<f64> {
    let n = logits.len() / k;
    let mut out = vec![0.0; logits.len()];
    for p in 0..n {
        let m = (0..k).map(|c| logits[c * n + p]).fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for c in 0..k {
            let e = (logits[c * n + p] - m).exp();
            out[c * n + p] = e;
            s += e;
        }
        for c in 0..k {
            out[c * n + p] /= s;
        }
    }
    out
}

/// Chain rule through [`softmax`]: `dz_c = p_c (u_c - sum_j p_j u_j)`.
pub(crate) fn softmax_vjp(probs: &[f64], upstream: &[f64], k: usize) -> Vec<f64> {
    let n = probs.len() / k;
    let mut out = vec![0.0; probs.len()];
    for p in 0..n {
        let dot: f64 = (0..k).map(|c| probs[c * n + p] * upstream[c * n + p]).sum();
        for c in 0..k {
            out[c * n + p] = probs[c * n + p] * (upstream[c * n + p] - dot);
        }
    }
    out
}

//! Per-pixel linear softmax anatomy classifier over handcrafted features,
//! trained with Dice + cross-entropy on the reference frame and a cosine
//! consistency term that ties warped predictions of the other frames to the
//! reference prediction.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{
    ensure_same_shape, local_mean_std, stencils, warp_data_vjp, warp_field_vjp, warp_slice, CineSequence,
    DisplacementField, Image2D, LabelMap, Stencil,
};
use crate::loss::{ce_raw, cosine_raw, dice_raw, softmax, softmax_vjp};
use crate::optim::descend;

/// intensity, 3x3 mean, 3x3 std, gradient magnitude, radial distance, bias
pub const FEATURES: usize = 6;

/// Feature-major per-pixel features: `f * pixels + p`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn feature(&self, f: usize) -> &[f64] {
        let n = self.pixels();
        &self.data[f * n..(f + 1) * n]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

pub fn extract_features(img: &Image2D) -> FeatureMap {
    let (w, h) = (img.width(), img.height());
    let n = w * h;
    let data = img.data();
    let (mean, std) = local_mean_std(data, w, h);
    let at = |x: i64, y: i64| data[y.clamp(0, h as i64 - 1) as usize * w + x.clamp(0, w as i64 - 1) as usize];
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let half = w.min(h) as f64 / 2.0;
    let mut out = Vec::with_capacity(FEATURES * n);
    out.extend_from_slice(data);
    out.extend_from_slice(&mean);
    out.extend_from_slice(&std);
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let gx = 0.5 * (at(x + 1, y) - at(x - 1, y));
            let gy = 0.5 * (at(x, y + 1) - at(x, y - 1));
            out.push(gx.hypot(gy));
        }
    }
    for y in 0..h {
        for x in 0..w {
            out.push((x as f64 - cx).hypot(y as f64 - cy) / half);
        }
    }
    out.extend(std::iter::repeat_n(1.0, n));
    FeatureMap {
        width: w,
        height: h,
        data: out,
    }
}

/// Row-major `classes x FEATURES` weight matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnatomyParams {
    pub classes: usize,
    pub weights: Vec<f64>,
}

impl AnatomyParams {
    pub fn zeros(classes: usize) -> Self {
        AnatomyParams {
            classes,
            weights: vec![0.0; classes * FEATURES],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidInput(format!("anatomy needs >= 2 classes, got {}", self.classes)));
        }
        if self.weights.len() != self.classes * FEATURES {
            return Err(Error::dims("AnatomyParams", self.classes * FEATURES, self.weights.len()));
        }
        if !self.weights.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("non-finite anatomy weight".into()));
        }
        Ok(())
    }
}

fn logits(weights: &[f64], classes: usize, feats: &FeatureMap) -> Vec<f64> {
    let n = feats.pixels();
    let mut z = vec![0.0; classes * n];
    for c in 0..classes {
        let row = &weights[c * FEATURES..(c + 1) * FEATURES];
        let out = &mut z[c * n..(c + 1) * n];
        for (f, wcf) in row.iter().enumerate() {
            if *wcf == 0.0 {
                continue;
            }
            for (o, v) in out.iter_mut().zip(feats.feature(f)) {
                *o += wcf * v;
            }
        }
    }
    z
}

/// `dW += dz * feats^T`.
fn weight_grad_into(dz: &[f64], classes: usize, feats: &FeatureMap, grad: &mut [f64]) {
    let n = feats.pixels();
    for c in 0..classes {
        let d = &dz[c * n..(c + 1) * n];
        for f in 0..FEATURES {
            grad[c * FEATURES + f] += d.iter().zip(feats.feature(f)).map(|(a, b)| a * b).sum::<f64>();
        }
    }
}

pub fn predict_from_features(params: &AnatomyParams, feats: &FeatureMap) -> LabelMap {
    let p = softmax(&logits(&params.weights, params.classes, feats), params.classes);
    LabelMap::from_parts(feats.width, feats.height, params.classes, p)
}

pub fn predict_anatomy(params: &AnatomyParams, img: &Image2D) -> Result<LabelMap> {
    params.validate()?;
    Ok(predict_from_features(params, &extract_features(img)))
}

/// What the warped frame predictions are compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConsistencyTarget {
    /// The model's own prediction on the reference frame.
    #[default]
    Predicted,
    /// The gold reference label.
    Gold,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnatomyWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub target: ConsistencyTarget,
}

impl Default for AnatomyWeights {
    fn default() -> Self {
        AnatomyWeights {
            lambda1: 5.0,
            lambda2: 2.0,
            target: ConsistencyTarget::Predicted,
        }
    }
}

/// Features and warp stencils, computed once per (sequence, fields) pair.
pub(crate) struct AnatomyData {
    feats: Vec<FeatureMap>,
    stencils: Vec<Vec<Stencil>>,
    reference: usize,
    gold: LabelMap,
}

impl AnatomyData {
    pub(crate) fn new(seq: &CineSequence, ddfs: &[DisplacementField], gold_ref: &LabelMap) -> Result<Self> {
        if ddfs.len() != seq.len() {
            return Err(Error::dims("anatomy_loss (fields per frame)", seq.len(), ddfs.len()));
        }
        ensure_same_shape("anatomy_loss (gold reference)", gold_ref, seq.reference())?;
        for phi in ddfs {
            ensure_same_shape("anatomy_loss (field)", phi, seq.reference())?;
        }
        Ok(AnatomyData {
            feats: seq.frames().par_iter().map(extract_features).collect(),
            stencils: ddfs.iter().map(stencils).collect(),
            reference: seq.reference_index(),
            gold: gold_ref.clone(),
        })
    }

    fn check(&self, params: &AnatomyParams) -> Result<()> {
        params.validate()?;
        if params.classes != self.gold.classes() {
            return Err(Error::dims("anatomy_loss (classes)", self.gold.classes(), params.classes));
        }
        Ok(())
    }

    /// Loss and, on request, its gradient w.r.t. the flat weights.
    pub(crate) fn eval(&self, weights: &[f64], classes: usize, w: &AnatomyWeights, want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
        let k = classes;
        let probs: Vec<Vec<f64>> = self.feats.iter().map(|f| softmax(&logits(weights, k, f), k)).collect();
        let r = self.reference;
        let mut grad = want_grad.then(|| vec![0.0; weights.len()]);
        let mut dprobs: Vec<Vec<f64>> = if want_grad {
            probs.iter().map(|p| vec![0.0; p.len()]).collect()
        } else {
            Vec::new()
        };

        let gold = self.gold.data();
        let mut total = 0.0;
        if w.lambda1 != 0.0 {
            let sup = match grad {
                Some(_) => {
                    let d = &mut dprobs[r];
                    dice_raw(&probs[r], gold, k, Some((w.lambda1, d))) + ce_raw(&probs[r], gold, k, Some((w.lambda1, d)))
                }
                None => dice_raw(&probs[r], gold, k, None) + ce_raw(&probs[r], gold, k, None),
            };
            total += w.lambda1 * sup;
        }
        if w.lambda2 != 0.0 {
            let target: &[f64] = match w.target {
                ConsistencyTarget::Predicted => &probs[r],
                ConsistencyTarget::Gold => gold,
            };
            let n = self.feats[0].pixels();
            let terms: Vec<(f64, Option<(Vec<f64>, Vec<f64>)>)> = (0..probs.len())
                .into_par_iter()
                .filter(|&i| i != r)
                .map(|i| {
                    let warped: Vec<f64> = (0..k)
                        .flat_map(|c| warp_slice(&probs[i][c * n..(c + 1) * n], &self.stencils[i]))
                        .collect();
                    if !want_grad {
                        return cosine_raw(&warped, target, None).map(|v| (v, None));
                    }
                    let mut ga = vec![0.0; warped.len()];
                    let mut gb = vec![0.0; warped.len()];
                    let v = cosine_raw(&warped, target, Some((w.lambda2, &mut ga, &mut gb)))?;
                    let mut dp = vec![0.0; warped.len()];
                    for c in 0..k {
                        warp_data_vjp(&self.stencils[i], &ga[c * n..(c + 1) * n], &mut dp[c * n..(c + 1) * n]);
                    }
                    Ok((v, Some((dp, gb))))
                })
                .collect::<Result<Vec<_>>>()?;
            let others = (0..probs.len()).filter(|&i| i != r);
            for (i, (v, g)) in others.zip(terms) {
                total += w.lambda2 * v;
                if let Some((dp, gb)) = g {
                    dprobs[i].iter_mut().zip(&dp).for_each(|(a, b)| *a += b);
                    if w.target == ConsistencyTarget::Predicted {
                        dprobs[r].iter_mut().zip(&gb).for_each(|(a, b)| *a += b);
                    }
                }
            }
        }
        if let Some(g) = grad.as_mut() {
            for (i, dp) in dprobs.iter().enumerate() {
                if dp.iter().all(|v| *v == 0.0) {
                    continue;
                }
                let dz = softmax_vjp(&probs[i], dp, k);
                weight_grad_into(&dz, k, &self.feats[i], g);
            }
        }
        Ok((total, grad))
    }
}

/// `lambda1 (dice + ce)` on the reference frame plus `lambda2` times the sum
/// over the other frames of `cosine_consistency(warp(predict(I_i), phi_i),
/// target)`. `ddfs` holds one field per frame; the reference entry is
/// ignored.
pub fn anatomy_loss(
    params: &AnatomyParams,
    seq: &CineSequence,
    ddfs: &[DisplacementField],
    gold_ref: &LabelMap,
    weights: &AnatomyWeights,
) -> Result<f64> {
    let data = AnatomyData::new(seq, ddfs, gold_ref)?;
    data.check(params)?;
    Ok(data.eval(&params.weights, params.classes, weights, false)?.0)
}

/// [`anatomy_loss`] and its gradient w.r.t. the weights (same layout).
pub fn anatomy_loss_grad(
    params: &AnatomyParams,
    seq: &CineSequence,
    ddfs: &[DisplacementField],
    gold_ref: &LabelMap,
    weights: &AnatomyWeights,
) -> Result<(f64, Vec<f64>)> {
    let data = AnatomyData::new(seq, ddfs, gold_ref)?;
    data.check(params)?;
    let (v, g) = data.eval(&params.weights, params.classes, weights, true)?;
    Ok((v, g.expect("gradient requested")))
}

/// `1 - cos(warp(pred, phi), target)` and its gradient w.r.t. `phi`.
pub(crate) fn consistency_field_grad(pred: &LabelMap, target: &[f64], phi: &DisplacementField, scale: f64, grad: &mut DisplacementField) -> Result<f64> {
    let st = stencils(phi);
    let (k, n) = (pred.classes(), pred.pixels());
    let warped: Vec<f64> = (0..k).flat_map(|c| warp_slice(pred.channel(c), &st)).collect();
    let mut ga = vec![0.0; warped.len()];
    let mut gb = vec![0.0; warped.len()];
    let v = cosine_raw(&warped, target, Some((scale, &mut ga, &mut gb)))?;
    for c in 0..k {
        warp_field_vjp(pred.channel(c), &st, &ga[c * n..(c + 1) * n], grad);
    }
    Ok(v)
}

pub(crate) fn consistency_value(pred: &LabelMap, target: &[f64], phi: &DisplacementField) -> Result<f64> {
    let st = stencils(phi);
    let warped: Vec<f64> = (0..pred.classes()).flat_map(|c| warp_slice(pred.channel(c), &st)).collect();
    cosine_raw(&warped, target, None)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnatomyTrainConfig {
    pub weights: AnatomyWeights,
    pub max_iters: usize,
    pub rel_tol: f64,
    pub step_size: f64,
}

impl Default for AnatomyTrainConfig {
    fn default() -> Self {
        AnatomyTrainConfig {
            weights: AnatomyWeights::default(),
            max_iters: 300,
            rel_tol: 1e-9,
            step_size: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnatomyTraining {
    pub params: AnatomyParams,
    pub loss_trace: Vec<f64>,
}

/// Trains from zero weights.
pub fn train_anatomy(
    seq: &CineSequence,
    ddfs: &[DisplacementField],
    gold_ref: &LabelMap,
    cfg: &AnatomyTrainConfig,
) -> Result<AnatomyTraining> {
    let params = AnatomyParams::zeros(gold_ref.classes());
    continue_anatomy(params, seq, ddfs, gold_ref, cfg)
}

/// Continues training from `params`.
pub fn continue_anatomy(
    mut params: AnatomyParams,
    seq: &CineSequence,
    ddfs: &[DisplacementField],
    gold_ref: &LabelMap,
    cfg: &AnatomyTrainConfig,
) -> Result<AnatomyTraining> {
    let data = AnatomyData::new(seq, ddfs, gold_ref)?;
    data.check(&params)?;
    let loss_trace = fit(std::slice::from_ref(&data), &mut params, cfg)?;
    Ok(AnatomyTraining { params, loss_trace })
}

pub(crate) fn eval_sum(
    data: &[AnatomyData],
    weights: &[f64],
    classes: usize,
    w: &AnatomyWeights,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    let mut total = 0.0;
    let mut grad = want_grad.then(|| vec![0.0; weights.len()]);
    for d in data {
        let (v, g) = d.eval(weights, classes, w, want_grad)?;
        total += v;
        if let (Some(acc), Some(g)) = (grad.as_mut(), g) {
            acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
    }
    Ok((total, grad))
}

/// Minimizes the anatomy loss summed over `data` (one entry per case).
pub(crate) fn fit(data: &[AnatomyData], params: &mut AnatomyParams, cfg: &AnatomyTrainConfig) -> Result<Vec<f64>> {
    for d in data {
        d.check(params)?;
    }
    let k = params.classes;
    let mut failure = None;
    let (trace, _) = descend(&mut params.weights, cfg.step_size, cfg.max_iters, cfg.rel_tol, |w, g| {
        match eval_sum(data, w, k, &cfg.weights, g) {
            Ok(r) => r,
            Err(e) => {
                failure.get_or_insert(e);
                (f64::NAN, g.then(|| vec![0.0; w.len()]))
            }
        }
    })
    .map_err(|e| failure.take().unwrap_or(e).with_context("anatomy training"))?;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Spacing;
    use crate::loss::{ce_loss, cosine_consistency, dice_loss};
    use crate::warp_labelmap;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn img(w: usize, h: usize, mut f: impl FnMut(usize, usize) -> f64) -> Image2D {
        let data = (0..w * h).map(|p| f(p % w, p / w)).collect();
        Image2D::new(w, h, Spacing::isotropic(1.0), data).unwrap()
    }

    fn random_case(rng: &mut ChaCha8Rng, w: usize, h: usize, frames: usize) -> (CineSequence, Vec<DisplacementField>, LabelMap) {
        let seq = CineSequence::new(
            (0..frames).map(|_| img(w, h, |_, _| rng.random_range(0.0..1.0))).collect(),
            0,
        )
        .unwrap();
        let ddfs = (0..frames)
            .map(|_| DisplacementField::from_fn(w, h, |_, _| (rng.random_range(-1.3..1.3), rng.random_range(-1.3..1.3))))
            .collect();
        let labels: Vec<usize> = (0..w * h).map(|_| rng.random_range(0..2)).collect();
        (seq, ddfs, LabelMap::one_hot(w, h, 2, &labels).unwrap())
    }

    #[test]
    fn feature_examples() {
        let f = extract_features(&img(5, 5, |_, _| 0.3));
        assert!(f.feature(2).iter().all(|v| *v == 0.0));
        assert!(f.feature(5).iter().all(|v| *v == 1.0));

        let f = extract_features(&img(5, 5, |x, y| if (x, y) == (2, 2) { 1.0 } else { 0.0 }));
        let g = f.feature(3);
        let peak = g.iter().cloned().fold(0.0, f64::max);
        assert_eq!(g[12], 0.0);
        for p in [7, 11, 13, 17] {
            assert_eq!(g[p], peak);
        }
        assert!(g.iter().enumerate().filter(|(_, v)| **v == peak).all(|(p, _)| [7, 11, 13, 17].contains(&p)));
        // Radial distance is 0 at the center and 1 half an image away.
        assert_eq!(f.feature(4)[12], 0.0);
        assert!((f.feature(4)[10] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn prediction_examples() {
        let im = img(4, 3, |x, y| (x + y) as f64 / 6.0);
        let p = predict_anatomy(&AnatomyParams::zeros(2), &im).unwrap();
        assert!(p.data().iter().all(|v| (*v - 0.5).abs() < 1e-15));
        let mut params = AnatomyParams::zeros(2);
        params.weights[FEATURES + 5] = 60.0;
        let p = predict_anatomy(&params, &im).unwrap();
        assert!(p.channel(1).iter().all(|v| *v > 1.0 - 1e-12));
        assert!(predict_anatomy(&AnatomyParams { classes: 2, weights: vec![0.0; 3] }, &im).is_err());
    }

    #[test]
    fn loss_is_sum_of_independent_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (seq, ddfs, gold) = random_case(&mut rng, 6, 5, 3);
        let params = AnatomyParams {
            classes: 2,
            weights: (0..2 * FEATURES).map(|_| rng.random_range(-2.0..2.0)).collect(),
        };
        let w = AnatomyWeights::default();
        let preds: Vec<LabelMap> = seq.frames().iter().map(|f| predict_anatomy(&params, f).unwrap()).collect();
        let mut expected = w.lambda1 * (dice_loss(&preds[0], &gold).unwrap() + ce_loss(&preds[0], &gold).unwrap());
        for i in 1..3 {
            expected += w.lambda2 * cosine_consistency(&warp_labelmap(&preds[i], &ddfs[i]).unwrap(), &preds[0]).unwrap();
        }
        let got = anatomy_loss(&params, &seq, &ddfs, &gold, &w).unwrap();
        assert!((got - expected).abs() <= 1e-10 * expected.abs());

        let sup = AnatomyWeights { lambda2: 0.0, ..w };
        let only = anatomy_loss(&params, &seq, &ddfs, &gold, &sup).unwrap();
        let direct = 5.0 * (dice_loss(&preds[0], &gold).unwrap() + ce_loss(&preds[0], &gold).unwrap());
        assert!((only - direct).abs() <= 1e-12 * direct);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for target in [ConsistencyTarget::Predicted, ConsistencyTarget::Gold] {
            let (seq, ddfs, gold) = random_case(&mut rng, 5, 4, 3);
            let params = AnatomyParams {
                classes: 2,
                weights: (0..2 * FEATURES).map(|_| rng.random_range(-1.0..1.0)).collect(),
            };
            let w = AnatomyWeights { target, ..Default::default() };
            let (_, g) = anatomy_loss_grad(&params, &seq, &ddfs, &gold, &w).unwrap();
            let h = 1e-5;
            for i in 0..params.weights.len() {
                let mut p = params.clone();
                p.weights[i] += h;
                let fp = anatomy_loss(&p, &seq, &ddfs, &gold, &w).unwrap();
                p.weights[i] -= 2.0 * h;
                let fm = anatomy_loss(&p, &seq, &ddfs, &gold, &w).unwrap();
                let num = (fp - fm) / (2.0 * h);
                let rel = (num - g[i]).abs() / num.abs().max(g[i].abs()).max(1e-8);
                assert!(rel < 1e-4, "weight {i}: {num} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn field_gradient_of_consistency() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (seq, ddfs, gold) = random_case(&mut rng, 5, 5, 2);
        let params = AnatomyParams {
            classes: 2,
            weights: (0..2 * FEATURES).map(|_| rng.random_range(-3.0..3.0)).collect(),
        };
        let pred = predict_anatomy(&params, seq.frame(1)).unwrap();
        let phi = &ddfs[1];
        let mut g = DisplacementField::zeros(5, 5);
        consistency_field_grad(&pred, gold.data(), phi, 1.0, &mut g).unwrap();
        let h = 1e-6;
        for p in 0..25 {
            let mut a = phi.clone();
            a.dx_mut()[p] += h;
            let mut b = phi.clone();
            b.dx_mut()[p] -= h;
            let num = (consistency_value(&pred, gold.data(), &a).unwrap() - consistency_value(&pred, gold.data(), &b).unwrap()) / (2.0 * h);
            assert!((num - g.dx()[p]).abs() <= 1e-4 * num.abs().max(g.dx()[p].abs()).max(1e-8), "pixel {p}");
        }
    }

    #[test]
    fn training_descends_and_separates_two_regions() {
        let im = img(12, 12, |x, _| if x < 6 { 0.2 } else { 0.8 });
        let seq = CineSequence::new(vec![im.clone(), im], 0).unwrap();
        let labels: Vec<usize> = (0..144).map(|p| usize::from(p % 12 >= 6)).collect();
        let gold = LabelMap::one_hot(12, 12, 2, &labels).unwrap();
        let ddfs = vec![DisplacementField::zeros(12, 12); 2];
        let out = train_anatomy(&seq, &ddfs, &gold, &AnatomyTrainConfig::default()).unwrap();
        assert!(out.loss_trace.windows(2).all(|w| w[1] < w[0]));
        let pred = predict_anatomy(&out.params, seq.reference()).unwrap();
        assert_eq!(pred.argmax(), labels);
    }

    #[test]
    fn rejects_misaligned_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (seq, ddfs, gold) = random_case(&mut rng, 4, 4, 3);
        let p = AnatomyParams::zeros(2);
        assert!(anatomy_loss(&p, &seq, &ddfs[..2], &gold, &AnatomyWeights::default()).is_err());
        assert!(anatomy_loss(&AnatomyParams::zeros(3), &seq, &ddfs, &gold, &AnatomyWeights::default()).is_err());
    }
}

//! Per-frame pathology classification in the reference space and its
//! aggregation over the cardiac cycle.
//!
//! Every frame contributes a feature stack built from its displacement
//! field, its warped anatomy prediction and its warped intensities. A linear
//! softmax classifier shared by all frames predicts per-frame class maps,
//! which are summed, mixed by a `K x K` class map and passed through a
//! softmax.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{field_gradient, 
    ensure_same_layout, ensure_same_shape, local_mean_std, GridShape, warp_image, warp_labelmap, DisplacementField, Image2D,
    LabelMap,
};
use crate::loss::{ce_raw, dice_raw, softmax, softmax_vjp};
use crate::optim::descend;

pub const PATHOLOGY_CLASSES: usize = 3;

/// A fraction `num / den` of the cardiac cycle, in `(0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct FrameProportion {
    num: usize,
    den: usize,
}

impl FrameProportion {
    pub fn new(num: usize, den: usize) -> Result<Self> {
        if den == 0 || num == 0 || num > den {
            return Err(Error::InvalidConfig(format!("frame proportion {num}/{den} must lie in (0, 1]")));
        }
        Ok(FrameProportion { num, den })
    }

    pub fn sixths(k: usize) -> Result<Self> {
        Self::new(k, 6)
    }

    pub fn num(&self) -> usize {
        self.num
    }

    pub fn den(&self) -> usize {
        self.den
    }

    /// `ceil(num * n / den)`, computed exactly.
    pub fn count(&self, n: usize) -> usize {
        (self.num * n).div_ceil(self.den)
    }
}

impl Default for FrameProportion {
    fn default() -> Self {
        FrameProportion { num: 4, den: 6 }
    }
}

impl fmt::Display for FrameProportion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for FrameProportion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidConfig(format!("frame proportion {s:?} is not of the form k/n"));
        let (a, b) = s.trim().split_once('/').ok_or_else(bad)?;
        let num = a.trim().parse().map_err(|_| bad())?;
        let den = b.trim().parse().map_err(|_| bad())?;
        Self::new(num, den)
    }
}

impl TryFrom<String> for FrameProportion {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<FrameProportion> for String {
    fn from(p: FrameProportion) -> String {
        p.to_string()
    }
}

/// The first `ceil(proportion * n)` frames of the cycle starting at the
/// reference frame, in temporal order (the cycle wraps around). At least one
/// frame besides the reference is kept so that there is motion to read.
pub fn select_frames(n: usize, reference: usize, proportion: FrameProportion) -> Vec<usize> {
    let count = proportion.count(n).max(2).min(n);
    (0..count).map(|i| (reference + i) % n).collect()
}

/// Which feature groups feed the pathology classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSelection {
    pub use_texture: bool,
    pub use_motion: bool,
    pub use_anatomy: bool,
}

impl Default for FeatureSelection {
    fn default() -> Self {
        FeatureSelection {
            use_texture: true,
            use_motion: true,
            use_anatomy: true,
        }
    }
}

impl FeatureSelection {
    pub fn validate(&self) -> Result<()> {
        if !(self.use_texture || self.use_motion || self.use_anatomy) {
            return Err(Error::InvalidConfig("at least one feature group must be enabled".into()));
        }
        Ok(())
    }

    pub fn channels(&self, anatomy_classes: usize) -> usize {
        2 * usize::from(self.use_motion) + anatomy_classes * usize::from(self.use_anatomy) + 3 * usize::from(self.use_texture)
    }
}

impl fmt::Display for FeatureSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if self.use_texture {
            parts.push("I");
        }
        if self.use_motion {
            parts.push("Phi");
        }
        if self.use_anatomy {
            parts.push("L");
        }
        write!(f, "{}", parts.join(","))
    }
}

impl FromStr for FeatureSelection {
    type Err = Error;

    /// Comma or plus separated subset of `I`, `Phi`, `L`.
    fn from_str(s: &str) -> Result<Self> {
        let mut sel = FeatureSelection {
            use_texture: false,
            use_motion: false,
            use_anatomy: false,
        };
        for part in s.split([',', '+']).map(str::trim).filter(|p| !p.is_empty()) {
            match part.to_ascii_lowercase().as_str() {
                "i" => sel.use_texture = true,
                "phi" | "φ" => sel.use_motion = true,
                "l" => sel.use_anatomy = true,
                _ => return Err(Error::InvalidConfig(format!("unknown feature group {part:?} (expected I, Phi, L)"))),
            }
        }
        sel.validate()?;
        Ok(sel)
    }
}

/// Channel-major feature planes for one frame, in the reference space.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatureStack {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FrameFeatureStack {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.pixels();
        &self.data[c * n..(c + 1) * n]
    }
}

impl GridShape for FrameFeatureStack {
    fn width(&self) -> usize {
        self.width
    }

    fn height(&self) -> usize {
        self.height
    }
}

/// Stacks `[|phi|, div phi, warp(anatomy, phi), warp(frame, phi) + 3x3
/// mean/std]`, omitting disabled groups.
///
/// Motion enters through its magnitude and divergence rather than its raw
/// components: both are unchanged when the heart is rotated, so a per-pixel
/// linear classifier cannot key on where in the image the motion points.
pub fn assemble_features(
    phi: &DisplacementField,
    anatomy: &LabelMap,
    frame: &Image2D,
    sel: FeatureSelection,
) -> Result<FrameFeatureStack> {
    sel.validate()?;
    ensure_same_shape("assemble_features (anatomy)", anatomy, phi)?;
    ensure_same_shape("assemble_features (frame)", frame, phi)?;
    let (w, h) = (phi.width(), phi.height());
    let mut data = Vec::with_capacity(sel.channels(anatomy.classes()) * w * h);
    if sel.use_motion {
        let j = field_gradient(phi);
        data.extend(phi.magnitude());
        data.extend(j.ddx_dx.iter().zip(&j.ddy_dy).map(|(a, b)| a + b));
    }
    if sel.use_anatomy {
        data.extend_from_slice(warp_labelmap(anatomy, phi)?.data());
    }
    if sel.use_texture {
        let moved = warp_image(frame, phi)?;
        let (mean, std) = local_mean_std(moved.data(), w, h);
        data.extend_from_slice(moved.data());
        data.extend(mean);
        data.extend(std);
    }
    Ok(FrameFeatureStack {
        width: w,
        height: h,
        channels: data.len() / (w * h),
        data,
    })
}

/// Whether per-frame maps are summed as probabilities or as logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    #[default]
    Probabilities,
    Logits,
}

/// Per-frame classifier (`classes x (channels + 1)`, last column is the
/// bias) and the aggregation mixing matrix (`classes x classes`, no bias),
/// both row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathologyParams {
    pub channels: usize,
    pub classes: usize,
    pub frame_weights: Vec<f64>,
    pub mixing: Vec<f64>,
}

impl PathologyParams {
    /// Zero frame weights and identity mixing.
    pub fn initial(channels: usize, classes: usize) -> Self {
        let mut mixing = vec![0.0; classes * classes];
        for c in 0..classes {
            mixing[c * classes + c] = 1.0;
        }
        PathologyParams {
            channels,
            classes,
            frame_weights: vec![0.0; classes * (channels + 1)],
            mixing,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidInput("pathology needs >= 2 classes".into()));
        }
        if self.frame_weights.len() != self.classes * (self.channels + 1) {
            return Err(Error::dims(
                "PathologyParams frame weights",
                self.classes * (self.channels + 1),
                self.frame_weights.len(),
            ));
        }
        if self.mixing.len() != self.classes * self.classes {
            return Err(Error::dims("PathologyParams mixing", self.classes * self.classes, self.mixing.len()));
        }
        if !self.frame_weights.iter().chain(&self.mixing).all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("non-finite pathology weight".into()));
        }
        Ok(())
    }

    fn flat(&self) -> Vec<f64> {
        self.frame_weights.iter().chain(&self.mixing).copied().collect()
    }

    fn set_flat(&mut self, v: &[f64]) {
        let split = self.frame_weights.len();
        self.frame_weights.copy_from_slice(&v[..split]);
        self.mixing.copy_from_slice(&v[split..]);
    }
}

fn check_stack(params: &PathologyParams, stack: &FrameFeatureStack) -> Result<()> {
    if stack.channels != params.channels {
        return Err(Error::dims("pathology feature channels", params.channels, stack.channels));
    }
    Ok(())
}

fn frame_logits(weights: &[f64], classes: usize, stack: &FrameFeatureStack) -> Vec<f64> {
    let n = stack.pixels();
    let cw = stack.channels + 1;
    let mut z = vec![0.0; classes * n];
    for k in 0..classes {
        let row = &weights[k * cw..(k + 1) * cw];
        let out = &mut z[k * n..(k + 1) * n];
        out.iter_mut().for_each(|o| *o = row[stack.channels]);
        for (c, wkc) in row[..stack.channels].iter().enumerate() {
            for (o, v) in out.iter_mut().zip(stack.channel(c)) {
                *o += wkc * v;
            }
        }
    }
    z
}

pub fn predict_frame_pathology(params: &PathologyParams, stack: &FrameFeatureStack) -> Result<LabelMap> {
    params.validate()?;
    check_stack(params, stack)?;
    let z = frame_logits(&params.frame_weights, params.classes, stack);
    Ok(LabelMap::from_parts(stack.width, stack.height, params.classes, softmax(&z, params.classes)))
}

fn mix(mixing: &[f64], k: usize, summed: &[f64]) -> Vec<f64> {
    let n = summed.len() / k;
    let mut z = vec![0.0; summed.len()];
    for a in 0..k {
        for b in 0..k {
            let m = mixing[a * k + b];
            if m == 0.0 {
                continue;
            }
            for p in 0..n {
                z[a * n + p] += m * summed[b * n + p];
            }
        }
    }
    z
}

/// `softmax(M * sum_i L_i)` per pixel.
pub fn aggregate_frames(per_frame: &[LabelMap], params: &PathologyParams) -> Result<LabelMap> {
    let first = per_frame
        .first()
        .ok_or_else(|| Error::InvalidInput("aggregate_frames needs at least one frame".into()))?;
    params.validate()?;
    if first.classes() != params.classes {
        return Err(Error::dims("aggregate_frames classes", params.classes, first.classes()));
    }
    let mut summed = vec![0.0; first.data().len()];
    for m in per_frame {
        ensure_same_layout("aggregate_frames", first, m)?;
        summed.iter_mut().zip(m.data()).for_each(|(s, v)| *s += v);
    }
    Ok(aggregate_summed(&summed, first.width(), first.height(), params))
}

fn aggregate_summed(summed: &[f64], w: usize, h: usize, params: &PathologyParams) -> LabelMap {
    let z = mix(&params.mixing, params.classes, summed);
    LabelMap::from_parts(w, h, params.classes, softmax(&z, params.classes))
}

/// Per-frame maps (probabilities or logits), then aggregate.
pub fn predict_pathology(
    params: &PathologyParams,
    stacks: &[FrameFeatureStack],
    mode: AggregationMode,
) -> Result<LabelMap> {
    params.validate()?;
    let first = stacks
        .first()
        .ok_or_else(|| Error::InvalidInput("predict_pathology needs at least one frame".into()))?;
    for s in stacks {
        check_stack(params, s)?;
        ensure_same_shape("predict_pathology", s, first)?;
    }
    let k = params.classes;
    let mut summed = vec![0.0; k * first.pixels()];
    for s in stacks {
        let z = frame_logits(&params.frame_weights, k, s);
        let v = match mode {
            AggregationMode::Probabilities => softmax(&z, k),
            AggregationMode::Logits => z,
        };
        summed.iter_mut().zip(&v).for_each(|(a, b)| *a += b);
    }
    Ok(aggregate_summed(&summed, first.width, first.height, params))
}

/// Dice + cross-entropy of the aggregated prediction.
pub fn myops_loss(pred: &LabelMap, gold: &LabelMap) -> Result<f64> {
    crate::loss::dice_ce_loss(pred, gold)
}

pub fn myops_loss_grad(pred: &LabelMap, gold: &LabelMap) -> Result<(f64, Vec<f64>)> {
    crate::loss::dice_ce_loss_grad(pred, gold)
}

/// Feature stacks of one case with its gold label, for training.
pub struct PathologyExample {
    pub stacks: Vec<FrameFeatureStack>,
    pub gold: LabelMap,
}

impl PathologyExample {
    pub fn new(stacks: Vec<FrameFeatureStack>, gold: LabelMap) -> Result<Self> {
        let first = stacks
            .first()
            .ok_or_else(|| Error::InvalidInput("a pathology example needs at least one frame".into()))?;
        for s in &stacks {
            ensure_same_shape("pathology example", s, first)?;
            if s.channels != first.channels {
                return Err(Error::dims("pathology example channels", first.channels, s.channels));
            }
        }
        ensure_same_shape("pathology example (gold)", &gold, first)?;
        Ok(PathologyExample { stacks, gold })
    }

    /// L_MyoPS for this example and, on request, the gradient w.r.t. the
    /// flat parameter vector (frame weights, then mixing).
    fn eval(&self, params: &PathologyParams, mode: AggregationMode, want_grad: bool) -> (f64, Option<Vec<f64>>) {
        let k = params.classes;
        let n = self.gold.pixels();
        let zs: Vec<Vec<f64>> = self.stacks.iter().map(|s| frame_logits(&params.frame_weights, k, s)).collect();
        let maps: Vec<Vec<f64>> = match mode {
            AggregationMode::Probabilities => zs.iter().map(|z| softmax(z, k)).collect(),
            AggregationMode::Logits => zs,
        };
        let mut summed = vec![0.0; k * n];
        for m in &maps {
            summed.iter_mut().zip(m).for_each(|(a, b)| *a += b);
        }
        let out = softmax(&mix(&params.mixing, k, &summed), k);
        let gold = self.gold.data();
        if !want_grad {
            return (dice_raw(&out, gold, k, None) + ce_raw(&out, gold, k, None), None);
        }
        let mut dout = vec![0.0; k * n];
        let v = dice_raw(&out, gold, k, Some((1.0, &mut dout))) + ce_raw(&out, gold, k, Some((1.0, &mut dout)));
        let dz = softmax_vjp(&out, &dout, k);

        let cw = params.channels + 1;
        let mut grad = vec![0.0; params.frame_weights.len() + params.mixing.len()];
        let (gw, gm) = grad.split_at_mut(params.frame_weights.len());
        for a in 0..k {
            for b in 0..k {
                gm[a * k + b] = (0..n).map(|p| dz[a * n + p] * summed[b * n + p]).sum();
            }
        }
        // d summed = M^T dz, shared by every frame.
        let mut ds = vec![0.0; k * n];
        for a in 0..k {
            for b in 0..k {
                let m = params.mixing[a * k + b];
                for p in 0..n {
                    ds[b * n + p] += m * dz[a * n + p];
                }
            }
        }
        for (stack, map) in self.stacks.iter().zip(&maps) {
            let dlogit = match mode {
                AggregationMode::Probabilities => softmax_vjp(map, &ds, k),
                AggregationMode::Logits => ds.clone(),
            };
            for c in 0..k {
                let d = &dlogit[c * n..(c + 1) * n];
                for ch in 0..params.channels {
                    gw[c * cw + ch] += d.iter().zip(stack.channel(ch)).map(|(a, b)| a * b).sum::<f64>();
                }
                gw[c * cw + params.channels] += d.iter().sum::<f64>();
            }
        }
        (v, Some(grad))
    }
}

/// Summed L_MyoPS over examples.
pub fn pathology_loss(params: &PathologyParams, examples: &[PathologyExample], mode: AggregationMode) -> Result<f64> {
    Ok(pathology_loss_grad_inner(params, examples, mode, false)?.0)
}

pub fn pathology_loss_grad(
    params: &PathologyParams,
    examples: &[PathologyExample],
    mode: AggregationMode,
) -> Result<(f64, Vec<f64>)> {
    let (v, g) = pathology_loss_grad_inner(params, examples, mode, true)?;
    Ok((v, g.expect("gradient requested")))
}

fn pathology_loss_grad_inner(
    params: &PathologyParams,
    examples: &[PathologyExample],
    mode: AggregationMode,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    params.validate()?;
    for e in examples {
        check_stack(params, &e.stacks[0])?;
        if e.gold.classes() != params.classes {
            return Err(Error::dims("pathology gold classes", params.classes, e.gold.classes()));
        }
    }
    Ok(sum_examples(params, examples, mode, want_grad))
}

fn sum_examples(
    params: &PathologyParams,
    examples: &[PathologyExample],
    mode: AggregationMode,
    want_grad: bool,
) -> (f64, Option<Vec<f64>>) {
    let parts: Vec<(f64, Option<Vec<f64>>)> = examples.par_iter().map(|e| e.eval(params, mode, want_grad)).collect();
    let mut total = 0.0;
    let mut grad = want_grad.then(|| vec![0.0; params.frame_weights.len() + params.mixing.len()]);
    for (v, g) in parts {
        total += v;
        if let (Some(acc), Some(g)) = (grad.as_mut(), g) {
            acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
    }
    (total, grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathologyTrainConfig {
    pub max_iters: usize,
    pub rel_tol: f64,
    /// Length of the first steepest-descent step in parameter space.
    pub step_size: f64,
    pub mode: AggregationMode,
}

impl Default for PathologyTrainConfig {
    fn default() -> Self {
        PathologyTrainConfig {
            max_iters: 300,
            rel_tol: 1e-9,
            step_size: 1.0,
            mode: AggregationMode::Probabilities,
        }
    }
}

/// Minimizes the summed L_MyoPS from `params`; returns the loss trace.
pub fn fit_pathology(
    params: &mut PathologyParams,
    examples: &[PathologyExample],
    cfg: &PathologyTrainConfig,
) -> Result<Vec<f64>> {
    if examples.is_empty() {
        return Err(Error::InvalidInput("no pathology training examples".into()));
    }
    pathology_loss(params, examples, cfg.mode)?;
    let mut x = params.flat();
    let template = params.clone();
    let (_, g0) = sum_examples(params, examples, cfg.mode, true);
    let norm = g0.expect("gradient requested").iter().map(|v| v * v).sum::<f64>().sqrt();
    let first_step = if norm > 0.0 { cfg.step_size / norm } else { cfg.step_size };
    let (trace, _) = descend(&mut x, first_step, cfg.max_iters, cfg.rel_tol, |v, g| {
        let mut p = template.clone();
        p.set_flat(v);
        sum_examples(&p, examples, cfg.mode, g)
    })
    .map_err(|e| e.with_context("pathology training"))?;
    params.set_flat(&x);
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Spacing;
    use crate::loss::{ce_loss, dice_loss};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_stack(rng: &mut ChaCha8Rng, w: usize, h: usize, channels: usize) -> FrameFeatureStack {
        FrameFeatureStack {
            width: w,
            height: h,
            channels,
            data: (0..channels * w * h).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    fn random_params(rng: &mut ChaCha8Rng, channels: usize) -> PathologyParams {
        PathologyParams {
            channels,
            classes: 3,
            frame_weights: (0..3 * (channels + 1)).map(|_| rng.random_range(-1.0..1.0)).collect(),
            mixing: (0..9).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    fn random_probs(rng: &mut ChaCha8Rng, n: usize) -> LabelMap {
        let z: Vec<f64> = (0..3 * n).map(|_| rng.random_range(-2.0..2.0)).collect();
        LabelMap::new(n, 1, 3, softmax(&z, 3)).unwrap()
    }

    #[test]
    fn frame_selection_examples() {
        let p = FrameProportion::sixths(6).unwrap();
        assert_eq!(select_frames(30, 0, p), (0..30).collect::<Vec<_>>());
        assert_eq!(select_frames(30, 0, FrameProportion::default()), (0..20).collect::<Vec<_>>());
        assert_eq!(select_frames(25, 0, FrameProportion::sixths(1).unwrap()).len(), 5);
        assert_eq!(select_frames(10, 8, FrameProportion::new(1, 2).unwrap()), vec![8, 9, 0, 1, 2]);
        assert_eq!(select_frames(6, 3, FrameProportion::sixths(1).unwrap()), vec![3, 4]);
        assert_eq!("4/6".parse::<FrameProportion>().unwrap(), FrameProportion::default());
        assert!("7/6".parse::<FrameProportion>().is_err());
        assert!("0/6".parse::<FrameProportion>().is_err());
        assert!("half".parse::<FrameProportion>().is_err());
    }

    #[test]
    fn feature_selection_parsing() {
        let s: FeatureSelection = "Phi,L".parse().unwrap();
        assert!(s.use_motion && s.use_anatomy && !s.use_texture);
        assert_eq!("I+Phi+L".parse::<FeatureSelection>().unwrap(), FeatureSelection::default());
        assert!("".parse::<FeatureSelection>().is_err());
        assert!("X".parse::<FeatureSelection>().is_err());
        assert_eq!(FeatureSelection::default().to_string(), "I,Phi,L");
    }

    #[test]
    fn feature_assembly_examples() {
        let (w, h) = (5, 4);
        let frame = Image2D::new(w, h, Spacing::isotropic(1.0), (0..20).map(|i| i as f64 / 20.0).collect()).unwrap();
        let labels: Vec<usize> = (0..20).map(|i| i % 3).collect();
        let anatomy = LabelMap::one_hot(w, h, 3, &labels).unwrap();
        let phi = DisplacementField::zeros(w, h);

        let all = assemble_features(&phi, &anatomy, &frame, FeatureSelection::default()).unwrap();
        assert_eq!(all.channels(), 2 + 3 + 3);
        for k in 0..3 {
            assert_eq!(all.channel(2 + k), anatomy.channel(k));
        }
        assert_eq!(all.channel(5), frame.data());

        let motion: FeatureSelection = "Phi".parse().unwrap();
        let phi = DisplacementField::constant(w, h, 0.5, -0.25);
        let m = assemble_features(&phi, &anatomy, &frame, motion).unwrap();
        assert_eq!(m.channels(), 2);
        assert!(m.channel(0).iter().all(|v| (v - 0.5f64.hypot(0.25)).abs() < 1e-15));
        assert!(m.channel(1).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn channel_contract_is_enforced() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let stack = random_stack(&mut rng, 3, 3, 4);
        assert!(predict_frame_pathology(&PathologyParams::initial(5, 3), &stack).is_err());
        let p = predict_frame_pathology(&PathologyParams::initial(4, 3), &stack).unwrap();
        assert!(p.data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn aggregation_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let id = PathologyParams::initial(1, 3);
        let single = random_probs(&mut rng, 6);
        let agg = aggregate_frames(std::slice::from_ref(&single), &id).unwrap();
        let expected = softmax(single.data(), 3);
        assert!(agg.data().iter().zip(&expected).all(|(a, b)| (a - b).abs() < 1e-15));

        let labels = vec![0, 1, 2, 2, 1, 0];
        let hot = LabelMap::one_hot(6, 1, 3, &labels).unwrap();
        let agg = aggregate_frames(&vec![hot; 5], &id).unwrap();
        assert_eq!(agg.argmax(), labels);

        // Scalar oracle on two random frames and a random mixing matrix.
        let params = random_params(&mut rng, 1);
        let (a, b) = (random_probs(&mut rng, 4), random_probs(&mut rng, 4));
        let agg = aggregate_frames(&[a.clone(), b.clone()], &params).unwrap();
        for p in 0..4 {
            let s: Vec<f64> = (0..3).map(|k| a.prob(k, p) + b.prob(k, p)).collect();
            let z: Vec<f64> = (0..3).map(|i| (0..3).map(|j| params.mixing[i * 3 + j] * s[j]).sum()).collect();
            let norm: f64 = z.iter().map(|v| v.exp()).sum();
            for k in 0..3 {
                assert!((agg.prob(k, p) - z[k].exp() / norm).abs() < 1e-14);
            }
        }
        assert!(aggregate_frames(&[], &params).is_err());
    }

    #[test]
    fn aggregation_order_and_uniform_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let id = PathologyParams::initial(1, 3);
        for _ in 0..50 {
            let frames: Vec<LabelMap> = (0..4).map(|_| random_probs(&mut rng, 10)).collect();
            let base = aggregate_frames(&frames, &id).unwrap().argmax();
            let mut rev = frames.clone();
            rev.reverse();
            assert_eq!(aggregate_frames(&rev, &id).unwrap().argmax(), base);
            let mut more = frames.clone();
            more.push(LabelMap::uniform(10, 1, 3));
            assert_eq!(aggregate_frames(&more, &id).unwrap().argmax(), base);
        }
    }

    #[test]
    fn myops_loss_examples() {
        let gold = LabelMap::one_hot(3, 2, 3, &[0, 1, 2, 2, 1, 0]).unwrap();
        assert!(myops_loss(&gold, &gold).unwrap() < 1e-5);
        let uniform = LabelMap::uniform(3, 2, 3);
        let expected = dice_loss(&uniform, &gold).unwrap() + 3f64.ln();
        assert!((myops_loss(&uniform, &gold).unwrap() - expected).abs() < 1e-12);
        assert!((ce_loss(&uniform, &gold).unwrap() - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn training_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for mode in [AggregationMode::Probabilities, AggregationMode::Logits] {
            let stacks: Vec<FrameFeatureStack> = (0..3).map(|_| random_stack(&mut rng, 4, 3, 2)).collect();
            let labels: Vec<usize> = (0..12).map(|_| rng.random_range(0..3)).collect();
            let ex = vec![PathologyExample::new(stacks, LabelMap::one_hot(4, 3, 3, &labels).unwrap()).unwrap()];
            let params = random_params(&mut rng, 2);
            let (_, g) = pathology_loss_grad(&params, &ex, mode).unwrap();
            let flat = params.flat();
            let h = 1e-5;
            for i in 0..flat.len() {
                let mut p = params.clone();
                let mut v = flat.clone();
                v[i] += h;
                p.set_flat(&v);
                let fp = pathology_loss(&p, &ex, mode).unwrap();
                v[i] -= 2.0 * h;
                p.set_flat(&v);
                let fm = pathology_loss(&p, &ex, mode).unwrap();
                let num = (fp - fm) / (2.0 * h);
                let rel = (num - g[i]).abs() / num.abs().max(g[i].abs()).max(1e-8);
                assert!(rel < 1e-4, "{mode:?} parameter {i}: {num} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn loss_matches_public_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let stacks: Vec<FrameFeatureStack> = (0..2).map(|_| random_stack(&mut rng, 3, 3, 2)).collect();
        let labels: Vec<usize> = (0..9).map(|_| rng.random_range(0..3)).collect();
        let gold = LabelMap::one_hot(3, 3, 3, &labels).unwrap();
        let params = random_params(&mut rng, 2);
        let frames: Vec<LabelMap> = stacks.iter().map(|s| predict_frame_pathology(&params, s).unwrap()).collect();
        let agg = aggregate_frames(&frames, &params).unwrap();
        let expected = dice_loss(&agg, &gold).unwrap() + ce_loss(&agg, &gold).unwrap();
        let ex = vec![PathologyExample::new(stacks, gold).unwrap()];
        let got = pathology_loss(&params, &ex, AggregationMode::Probabilities).unwrap();
        assert!((got - expected).abs() <= 1e-10 * expected);
    }

    #[test]
    fn fitting_separates_intensity_classes() {
        // One channel: class = 0 below 0.3, 1 above 0.7, 2 in between.
        let n = 30;
        let values: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        let labels: Vec<usize> = values.iter().map(|v| if *v < 0.3 { 0 } else if *v > 0.7 { 1 } else { 2 }).collect();
        let stack = FrameFeatureStack {
            width: n,
            height: 1,
            channels: 1,
            data: values,
        };
        let ex = vec![PathologyExample::new(vec![stack.clone(), stack], LabelMap::one_hot(n, 1, 3, &labels).unwrap()).unwrap()];
        let mut params = PathologyParams::initial(1, 3);
        let cfg = PathologyTrainConfig {
            max_iters: 2000,
            ..Default::default()
        };
        let trace = fit_pathology(&mut params, &ex, &cfg).unwrap();
        assert!(trace.windows(2).all(|w| w[1] < w[0]));
        let pred = predict_pathology(&params, &ex[0].stacks, cfg.mode).unwrap();
        assert_eq!(pred.argmax(), labels);
    }
}

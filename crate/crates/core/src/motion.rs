//! Dense motion estimation between a moving frame and the reference frame by
//! direct gradient descent on `mse(frame o phi, ref) + lambda * smooth(phi)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::descend;
use crate::grid::{
    diff_x, diff_x_adjoint, diff_y, diff_y_adjoint, downsample_image, ensure_same_shape,
    field_gradient, stencils, upsample_field, warp_field_vjp, warp_image, warp_slice,
    CineSequence, DisplacementField, Image2D,
};

/// Units in which the smoothness penalty of the solver objective is measured.
///
/// `Pixel` is the raw penalty from [`smoothness_penalty`]. `Normalized`
/// measures displacements in half-extents of the grid (the `[-1, 1]`
/// sampling-grid convention), which scales the x rows of the Jacobian by
/// `2 / width` and the y rows by `2 / height`. The regularization weight then
/// means the same thing on every pyramid level and image size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SmoothUnits {
    Pixel,
    #[default]
    Normalized,
}

impl SmoothUnits {
    /// Weights applied to the squared Jacobian rows of (dx, dy).
    pub fn weights(self, width: usize, height: usize) -> (f64, f64) {
        match self {
            SmoothUnits::Pixel => (1.0, 1.0),
            SmoothUnits::Normalized => ((2.0 / width as f64).powi(2), (2.0 / height as f64).powi(2)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MotionConfig {
    pub lambda_smooth: f64,
    pub smooth_units: SmoothUnits,
    /// Initial step, applied to the per-pixel gradient (the mean objective's
    /// gradient times the pixel count) so it does not depend on image size.
    pub step_size: f64,
    /// Iteration cap per pyramid level.
    pub max_iters: usize,
    pub rel_tol: f64,
    pub pyramid_levels: usize,
}

impl Default for MotionConfig {
    fn default() -> Self {
        MotionConfig {
            lambda_smooth: 1.0,
            smooth_units: SmoothUnits::Normalized,
            step_size: 1.0,
            max_iters: 400,
            rel_tol: 1e-6,
            pyramid_levels: 3,
        }
    }
}

impl MotionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_smooth >= 0.0 && self.lambda_smooth.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "lambda_smooth must be >= 0, got {}",
                self.lambda_smooth
            )));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::InvalidConfig(format!("step_size must be > 0, got {}", self.step_size)));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidConfig("max_iters must be >= 1".into()));
        }
        if self.pyramid_levels == 0 {
            return Err(Error::InvalidConfig("pyramid_levels must be >= 1".into()));
        }
        if !(self.rel_tol >= 0.0) {
            return Err(Error::InvalidConfig("rel_tol must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionResult {
    pub phi: DisplacementField,
    pub final_objective: f64,
    pub iterations_used: usize,
    /// Objective after each accepted step on the finest level, starting with
    /// the value at the level's initial field.
    pub objective_trace: Vec<f64>,
}

pub fn mse_loss(moved: &Image2D, reference: &Image2D) -> Result<f64> {
    ensure_same_shape("mse_loss", moved, reference)?;
    Ok(mse_slices(moved.data(), reference.data()))
}

fn mse_slices(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Mean over pixels of the squared Frobenius norm of the forward-difference
/// Jacobian, in pixel units.
pub fn smoothness_penalty(phi: &DisplacementField) -> f64 {
    weighted_smoothness(phi, 1.0, 1.0)
}

/// Smoothness penalty in the requested units.
pub fn smoothness_in(phi: &DisplacementField, units: SmoothUnits) -> f64 {
    let (wx, wy) = units.weights(phi.width(), phi.height());
    weighted_smoothness(phi, wx, wy)
}

fn weighted_smoothness(phi: &DisplacementField, wx: f64, wy: f64) -> f64 {
    let j = field_gradient(phi);
    let n = phi.len() as f64;
    let sx: f64 = j.ddx_dx.iter().chain(&j.ddx_dy).map(|v| v * v).sum();
    let sy: f64 = j.ddy_dx.iter().chain(&j.ddy_dy).map(|v| v * v).sum();
    (wx * sx + wy * sy) / n
}

/// Gradient of `scale * smoothness_in(phi, units)`, accumulated into `grad`.
pub(crate) fn smoothness_gradient_into(
    phi: &DisplacementField,
    units: SmoothUnits,
    scale: f64,
    grad: &mut DisplacementField,
) {
    let (w, h) = (phi.width(), phi.height());
    let (wx, wy) = units.weights(w, h);
    let n = phi.len() as f64;
    let (gdx, gdy) = grad.components_mut();
    for (u, weight, out) in [(phi.dx(), wx, gdx), (phi.dy(), wy, gdy)] {
        let c = 2.0 * scale * weight / n;
        let gx: Vec<f64> = diff_x(u, w, h).into_iter().map(|v| c * v).collect();
        let gy: Vec<f64> = diff_y(u, w, h).into_iter().map(|v| c * v).collect();
        diff_x_adjoint(&gx, w, h, out);
        diff_y_adjoint(&gy, w, h, out);
    }
}

fn check_pair(phi: &DisplacementField, frame: &Image2D, reference: &Image2D) -> Result<()> {
    ensure_same_shape("motion objective (frame vs reference)", frame, reference)?;
    ensure_same_shape("motion objective (field vs reference)", phi, reference)
}

pub fn motion_objective(
    phi: &DisplacementField,
    frame: &Image2D,
    reference: &Image2D,
    cfg: &MotionConfig,
) -> Result<f64> {
    check_pair(phi, frame, reference)?;
    Ok(objective_unchecked(phi, frame, reference, cfg))
}

fn objective_unchecked(
    phi: &DisplacementField,
    frame: &Image2D,
    reference: &Image2D,
    cfg: &MotionConfig,
) -> f64 {
    let moved = warp_slice(frame.data(), &stencils(phi));
    let data = mse_slices(&moved, reference.data());
    if cfg.lambda_smooth == 0.0 {
        data
    } else {
        data + cfg.lambda_smooth * smoothness_in(phi, cfg.smooth_units)
    }
}

/// Analytic gradient of [`motion_objective`] w.r.t. every displacement
/// component. Uses the same clamped bilinear stencil as the forward pass;
/// at integer sample positions the right-sided derivative is returned.
pub fn motion_gradient(
    phi: &DisplacementField,
    frame: &Image2D,
    reference: &Image2D,
    cfg: &MotionConfig,
) -> Result<DisplacementField> {
    check_pair(phi, frame, reference)?;
    Ok(objective_and_gradient(phi, frame, reference, cfg).1)
}

pub(crate) fn objective_and_gradient(
    phi: &DisplacementField,
    frame: &Image2D,
    reference: &Image2D,
    cfg: &MotionConfig,
) -> (f64, DisplacementField) {
    let mut grad = DisplacementField::zeros(phi.width(), phi.height());
    let f = data_term_gradient_into(phi, frame, reference, 1.0, &mut grad);
    let mut total = f;
    if cfg.lambda_smooth != 0.0 {
        total += cfg.lambda_smooth * smoothness_in(phi, cfg.smooth_units);
        smoothness_gradient_into(phi, cfg.smooth_units, cfg.lambda_smooth, &mut grad);
    }
    (total, grad)
}

/// Adds `scale * d mse(frame o phi, ref) / d phi` into `grad`; returns the
/// unscaled MSE.
pub(crate) fn data_term_gradient_into(
    phi: &DisplacementField,
    frame: &Image2D,
    reference: &Image2D,
    scale: f64,
    grad: &mut DisplacementField,
) -> f64 {
    let st = stencils(phi);
    let moved = warp_slice(frame.data(), &st);
    let n = moved.len() as f64;
    let residual: Vec<f64> = moved.iter().zip(reference.data()).map(|(a, b)| a - b).collect();
    let upstream: Vec<f64> = residual.iter().map(|r| scale * 2.0 * r / n).collect();
    warp_field_vjp(frame.data(), &st, &upstream, grad);
    residual.iter().map(|r| r * r).sum::<f64>() / n
}

/// Coarse-to-fine estimate of the field aligning `frame` to `reference`.
pub fn estimate_ddf(reference: &Image2D, frame: &Image2D, cfg: &MotionConfig) -> Result<MotionResult> {
    cfg.validate()?;
    ensure_same_shape("estimate_ddf", frame, reference)?;

    let mut refs = vec![reference.clone()];
    let mut frames = vec![frame.clone()];
    for _ in 1..cfg.pyramid_levels {
        let last = refs.last().unwrap();
        if last.width() < 8 || last.height() < 8 {
            break;
        }
        let r = downsample_image(last);
        let f = downsample_image(frames.last().unwrap());
        refs.push(r);
        frames.push(f);
    }

    let mut phi: Option<DisplacementField> = None;
    let mut total_iters = 0;
    let mut trace = Vec::new();
    for level in (0..refs.len()).rev() {
        let (r, f) = (&refs[level], &frames[level]);
        let zero = DisplacementField::zeros(r.width(), r.height());
        let mut current = match phi.take() {
            None => zero,
            Some(coarse) => {
                let up = upsample_field(&coarse, r.width(), r.height());
                // Never start a level worse than the zero field.
                if objective_unchecked(&up, f, r, cfg) <= objective_unchecked(&zero, f, r, cfg) {
                    up
                } else {
                    zero
                }
            }
        };
        let first_step = cfg.step_size * current.len() as f64;
        let (level_trace, iters) = descend(&mut current, first_step, cfg.max_iters, cfg.rel_tol, |p, want_grad| {
            if want_grad {
                let (v, g) = objective_and_gradient(p, f, r, cfg);
                (v, Some(g))
            } else {
                (objective_unchecked(p, f, r, cfg), None)
            }
        })
        .map_err(|e| e.with_context(format!("pyramid level {level}")))?;
        total_iters += iters;
        trace = level_trace;
        phi = Some(current);
    }

    let phi = phi.expect("at least one pyramid level");
    Ok(MotionResult {
        final_objective: *trace.last().expect("trace has the initial value"),
        phi,
        iterations_used: total_iters,
        objective_trace: trace,
    })
}

/// One result per frame; the reference frame maps to the zero field.
pub fn estimate_sequence(seq: &CineSequence, cfg: &MotionConfig) -> Result<Vec<MotionResult>> {
    estimate_frames(seq, &(0..seq.len()).collect::<Vec<_>>(), cfg)
}

/// Like [`estimate_sequence`] but only for the listed frame indices, in the
/// given order.
pub fn estimate_frames(seq: &CineSequence, indices: &[usize], cfg: &MotionConfig) -> Result<Vec<MotionResult>> {
    cfg.validate()?;
    let reference = seq.reference();
    indices
        .par_iter()
        .map(|&i| {
            if i >= seq.len() {
                return Err(Error::InvalidInput(format!("frame index {i} out of range")));
            }
            if i == seq.reference_index() {
                let phi = DisplacementField::zeros(seq.width(), seq.height());
                let f = objective_unchecked(&phi, reference, reference, cfg);
                return Ok(MotionResult {
                    phi,
                    final_objective: f,
                    iterations_used: 0,
                    objective_trace: vec![f],
                });
            }
            estimate_ddf(reference, seq.frame(i), cfg).map_err(|e| e.with_context(format!("frame {i}")))
        })
        .collect()
}

/// Warps `frame` by a solved field; convenience for reporting.
pub fn apply(frame: &Image2D, result: &MotionResult) -> Result<Image2D> {
    warp_image(frame, &result.phi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Spacing;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn image(w: usize, h: usize, mut f: impl FnMut(f64, f64) -> f64) -> Image2D {
        let data = (0..w * h).map(|i| f((i % w) as f64, (i / w) as f64)).collect();
        Image2D::new(w, h, Spacing::default(), data).unwrap()
    }

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image2D {
        image(w, h, |_, _| rng.random::<f64>())
    }

    fn pixel_cfg(lambda: f64) -> MotionConfig {
        MotionConfig {
            lambda_smooth: lambda,
            smooth_units: SmoothUnits::Pixel,
            ..MotionConfig::default()
        }
    }

    #[test]
    fn mse_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_image(&mut rng, 4, 4);
        assert_eq!(mse_loss(&a, &a).unwrap(), 0.0);
        let z = Image2D::constant(4, 4, Spacing::default(), 0.0).unwrap();
        let o = Image2D::constant(4, 4, Spacing::default(), 1.0).unwrap();
        assert_eq!(mse_loss(&z, &o).unwrap(), 1.0);
        let b = random_image(&mut rng, 4, 4);
        let mut oracle = 0.0;
        for y in 0..4 {
            for x in 0..4 {
                let d = a.get(x, y) - b.get(x, y);
                oracle += d * d;
            }
        }
        oracle /= 16.0;
        assert!((mse_loss(&a, &b).unwrap() - oracle).abs() < 1e-15);
        assert!(mse_loss(&a, &Image2D::constant(4, 5, Spacing::default(), 0.0).unwrap()).is_err());
    }

    #[test]
    fn smoothness_examples() {
        assert_eq!(smoothness_penalty(&DisplacementField::constant(6, 5, 0.3, 2.0)), 0.0);
        let lin = DisplacementField::from_fn(6, 5, |x, _| (x as f64, 0.0));
        assert_eq!(smoothness_penalty(&lin), 1.0);

        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let phi = DisplacementField::from_fn(5, 6, |_, _| (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        // Difference-quotient oracle with the one-sided rule at the far edge.
        let (w, h) = (5usize, 6usize);
        let mut acc = 0.0;
        for y in 0..h {
            for x in 0..w {
                let (xa, xb) = if x + 1 < w { (x, x + 1) } else { (x - 1, x) };
                let (ya, yb) = if y + 1 < h { (y, y + 1) } else { (y - 1, y) };
                for c in 0..2 {
                    let comp = |xx: usize, yy: usize| if c == 0 { phi.at(xx, yy).0 } else { phi.at(xx, yy).1 };
                    acc += (comp(xb, y) - comp(xa, y)).powi(2) + (comp(x, yb) - comp(x, ya)).powi(2);
                }
            }
        }
        acc /= (w * h) as f64;
        assert!((smoothness_penalty(&phi) - acc).abs() < 1e-13);
    }

    #[test]
    fn normalized_units_scale_rows() {
        let lin = DisplacementField::from_fn(8, 4, |x, y| (x as f64, y as f64));
        let s = smoothness_in(&lin, SmoothUnits::Normalized);
        let expect = (2.0f64 / 8.0).powi(2) + (2.0f64 / 4.0).powi(2);
        assert!((s - expect).abs() < 1e-15);
    }

    #[test]
    fn objective_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a = random_image(&mut rng, 5, 5);
        let b = random_image(&mut rng, 5, 5);
        let zero = DisplacementField::zeros(5, 5);
        assert_eq!(motion_objective(&zero, &a, &a, &MotionConfig::default()).unwrap(), 0.0);
        assert_eq!(
            motion_objective(&zero, &a, &b, &pixel_cfg(0.0)).unwrap(),
            mse_loss(&a, &b).unwrap()
        );
        let phi = DisplacementField::from_fn(5, 5, |_, _| (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        let cfg = pixel_cfg(0.7);
        let expect = mse_loss(&warp_image(&a, &phi).unwrap(), &b).unwrap() + 0.7 * smoothness_penalty(&phi);
        assert!((motion_objective(&phi, &a, &b, &cfg).unwrap() - expect).abs() < 1e-14);
    }

    #[test]
    fn gradient_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let a = random_image(&mut rng, 6, 6);
        let g = motion_gradient(&DisplacementField::zeros(6, 6), &a, &a, &pixel_cfg(0.0)).unwrap();
        assert!(g.dx().iter().chain(g.dy()).all(|v| *v == 0.0));
        let g = motion_gradient(&DisplacementField::constant(6, 6, 0.0, 0.0), &a, &a, &pixel_cfg(3.0)).unwrap();
        assert!(g.dx().iter().chain(g.dy()).all(|v| *v == 0.0));
    }

    /// Offsets from integer positions are kept away from the bilinear kinks.
    fn off_kink(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
        loop {
            let v: f64 = rng.random_range(lo..hi);
            let frac = v - v.round();
            if frac.abs() > 1e-2 {
                return v;
            }
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let (w, h) = (6, 6);
        let a = random_image(&mut rng, w, h);
        let b = random_image(&mut rng, w, h);
        // Sample points stay strictly inside the grid and off the kinks.
        let phi = DisplacementField::from_fn(w, h, |x, y| {
            let tx = off_kink(&mut rng, 0.1, (w - 1) as f64 - 0.1);
            let ty = off_kink(&mut rng, 0.1, (h - 1) as f64 - 0.1);
            (tx - x as f64, ty - y as f64)
        });
        for units in [SmoothUnits::Pixel, SmoothUnits::Normalized] {
            let cfg = MotionConfig {
                lambda_smooth: 0.8,
                smooth_units: units,
                ..MotionConfig::default()
            };
            let g = motion_gradient(&phi, &a, &b, &cfg).unwrap();
            let hstep = 1e-4;
            for i in 0..w * h {
                for comp in 0..2 {
                    let mut p = phi.clone();
                    let mut m = phi.clone();
                    if comp == 0 {
                        p.dx_mut()[i] += hstep;
                        m.dx_mut()[i] -= hstep;
                    } else {
                        p.dy_mut()[i] += hstep;
                        m.dy_mut()[i] -= hstep;
                    }
                    let fd = (motion_objective(&p, &a, &b, &cfg).unwrap() - motion_objective(&m, &a, &b, &cfg).unwrap())
                        / (2.0 * hstep);
                    let an = if comp == 0 { g.dx()[i] } else { g.dy()[i] };
                    if an.abs().max(fd.abs()) > 1e-8 {
                        let rel = (an - fd).abs() / an.abs().max(fd.abs());
                        assert!(rel < 1e-4, "pixel {i} comp {comp}: analytic {an} fd {fd}");
                    }
                }
            }
        }
    }

    #[test]
    fn identical_frames_stay_at_zero() {
        let img = image(32, 32, |x, y| (-((x - 15.5).powi(2) + (y - 15.5).powi(2)) / 50.0).exp());
        let res = estimate_ddf(&img, &img, &MotionConfig::default()).unwrap();
        assert!(smoothness_penalty(&res.phi) < 1e-6);
        assert!(res.final_objective < 1e-8);
        assert!(res.phi.dx().iter().chain(res.phi.dy()).all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn recovers_translation_of_smooth_blob() {
        let blob = |cx: f64| move |x: f64, y: f64| 0.1 + 0.8 * (-((x - cx).powi(2) + (y - 24.0).powi(2)) / 60.0).exp();
        let reference = image(48, 48, blob(23.5));
        // frame(c) = ref(c - 2): content moved two pixels right, so the field
        // sampling the frame at c + (2, 0) realigns it.
        let frame = image(48, 48, blob(25.5));
        let res = estimate_ddf(&reference, &frame, &MotionConfig::default()).unwrap();
        let mut err = 0.0;
        let mut n = 0.0;
        for y in 0..48 {
            for x in 0..48 {
                let r2 = (x as f64 - 23.5).powi(2) + (y as f64 - 24.0).powi(2);
                if r2 < 64.0 {
                    let (dx, dy) = res.phi.at(x, y);
                    err += (dx - 2.0).hypot(dy);
                    n += 1.0;
                }
            }
        }
        let mean = err / n;
        assert!(mean < 0.5, "mean endpoint error {mean}");
        for w in res.objective_trace.windows(2) {
            assert!(w[1] < w[0]);
        }
    }

    #[test]
    fn descent_diverges_loudly() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let a = random_image(&mut rng, 8, 8);
        let b = random_image(&mut rng, 8, 8);
        let cfg = MotionConfig {
            step_size: 1e307,
            pyramid_levels: 1,
            ..pixel_cfg(1.0)
        };
        let err = estimate_ddf(&a, &b, &cfg).unwrap_err();
        assert!(matches!(err, Error::Diverged { iteration: 1, .. }), "{err}");
        assert!(err.to_string().contains("iteration 1"));
    }

    #[test]
    fn rejects_bad_config() {
        let a = Image2D::constant(4, 4, Spacing::default(), 0.5).unwrap();
        for cfg in [
            MotionConfig { lambda_smooth: -1.0, ..Default::default() },
            MotionConfig { step_size: 0.0, ..Default::default() },
            MotionConfig { max_iters: 0, ..Default::default() },
            MotionConfig { pyramid_levels: 0, ..Default::default() },
        ] {
            assert!(matches!(estimate_ddf(&a, &a, &cfg), Err(Error::InvalidConfig(_))));
        }
    }

    #[test]
    fn sequence_of_identical_frames() {
        let img = image(16, 16, |x, y| ((x + y) / 40.0).min(1.0));
        let seq = CineSequence::new(vec![img.clone(), img], 0).unwrap();
        let res = estimate_sequence(&seq, &MotionConfig::default()).unwrap();
        assert_eq!(res.len(), 2);
        for r in &res {
            assert!(r.phi.dx().iter().chain(r.phi.dy()).all(|v| *v == 0.0));
        }
    }
}

//! Image, label-map and displacement-field containers, bilinear warping and
//! the finite-difference operators shared by every other module.
//!
//! Conventions: pixel centers sit at integer coordinates, `x` runs along a
//! row and `y` down the columns, buffers are row-major. Displacements are in
//! pixel units. Sampling outside the grid clamps to the nearest border pixel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Physical pixel size in millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spacing {
    pub x: f64,
    pub y: f64,
}

impl Spacing {
    pub fn new(x: f64, y: f64) -> Self {
        Spacing { x, y }
    }

    pub fn isotropic(s: f64) -> Self {
        Spacing { x: s, y: s }
    }

    fn validate(&self) -> Result<()> {
        if !(self.x > 0.0 && self.y > 0.0 && self.x.is_finite() && self.y.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "pixel spacing must be positive and finite, got ({}, {})",
                self.x, self.y
            )));
        }
        Ok(())
    }
}

impl Default for Spacing {
    fn default() -> Self {
        Spacing::isotropic(1.0)
    }
}

fn check_shape(width: usize, height: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidInput(format!(
            "grid dimensions must be positive, got {width}x{height}"
        )));
    }
    Ok(())
}

/// Scalar intensity image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image2D {
    width: usize,
    height: usize,
    spacing: Spacing,
    data: Vec<f64>,
}

impl Image2D {
    pub fn new(width: usize, height: usize, spacing: Spacing, data: Vec<f64>) -> Result<Self> {
        check_shape(width, height)?;
        spacing.validate()?;
        if data.len() != width * height {
            return Err(Error::dims("Image2D::new", width * height, data.len()));
        }
        if let Some(bad) = data.iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
            return Err(Error::InvalidInput(format!(
                "image intensities must be finite and within [0, 1], found {bad}"
            )));
        }
        Ok(Image2D {
            width,
            height,
            spacing,
            data,
        })
    }

    /// Min-max rescales arbitrary finite data into `[0, 1]`. A constant input
    /// maps to all zeros.
    pub fn normalized(width: usize, height: usize, spacing: Spacing, raw: &[f64]) -> Result<Self> {
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite intensity".into()));
        }
        let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        let data = raw
            .iter()
            .map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 })
            .collect();
        Image2D::new(width, height, spacing, data)
    }

    pub fn constant(width: usize, height: usize, spacing: Spacing, value: f64) -> Result<Self> {
        Image2D::new(width, height, spacing, vec![value; width * height])
    }

    /// Builds an image from unchecked data produced by operations that
    /// preserve the value range (interpolation, averaging, clamping).
    pub(crate) fn from_parts(width: usize, height: usize, spacing: Spacing, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), width * height);
        Image2D {
            width,
            height,
            spacing,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn same_shape<T: GridShape>(&self, other: &T) -> bool {
        self.width == other.width() && self.height == other.height()
    }
}

/// Anything laid out on a `width x height` grid.
pub trait GridShape {
    fn width(&self) -> usize;
    fn height(&self) -> usize;

    fn shape_string(&self) -> String {
        format!("{}x{}", self.width(), self.height())
    }
}

macro_rules! impl_shape {
    ($($t:ty),*) => {$(
        impl GridShape for $t {
            fn width(&self) -> usize { self.width }
            fn height(&self) -> usize { self.height }
        }
    )*};
}
impl_shape!(Image2D, DisplacementField, LabelMap);

pub(crate) fn ensure_same_shape<A: GridShape, B: GridShape>(
    context: &'static str,
    a: &A,
    b: &B,
) -> Result<()> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::dims(context, a.shape_string(), b.shape_string()));
    }
    Ok(())
}

/// Ordered cine frames with a designated end-diastolic reference frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CineSequence {
    frames: Vec<Image2D>,
    reference_index: usize,
}

impl CineSequence {
    pub fn new(frames: Vec<Image2D>, reference_index: usize) -> Result<Self> {
        if frames.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "a cine sequence needs at least 2 frames, got {}",
                frames.len()
            )));
        }
        if reference_index >= frames.len() {
            return Err(Error::InvalidInput(format!(
                "reference index {reference_index} out of range for {} frames",
                frames.len()
            )));
        }
        let first = &frames[0];
        for f in &frames[1..] {
            ensure_same_shape("CineSequence::new", first, f)?;
            if f.spacing() != first.spacing() {
                return Err(Error::InvalidInput("frames differ in pixel spacing".into()));
            }
        }
        Ok(CineSequence {
            frames,
            reference_index,
        })
    }

    pub fn frames(&self) -> &[Image2D] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn reference_index(&self) -> usize {
        self.reference_index
    }

    pub fn reference(&self) -> &Image2D {
        &self.frames[self.reference_index]
    }

    pub fn frame(&self, i: usize) -> &Image2D {
        &self.frames[i]
    }

    pub fn width(&self) -> usize {
        self.frames[0].width()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height()
    }

    pub fn spacing(&self) -> Spacing {
        self.frames[0].spacing()
    }
}

/// Dense per-pixel displacement on the reference grid, in pixels.
///
/// `warp_image(frame, phi)` samples `frame` at `c + phi(c)`, so `phi` maps a
/// reference-grid point to where it is found in the moving frame.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    width: usize,
    height: usize,
    dx: Vec<f64>,
    dy: Vec<f64>,
}

impl DisplacementField {
    pub fn new(width: usize, height: usize, dx: Vec<f64>, dy: Vec<f64>) -> Result<Self> {
        check_shape(width, height)?;
        let n = width * height;
        if dx.len() != n || dy.len() != n {
            return Err(Error::dims(
                "DisplacementField::new",
                n,
                format!("{}/{}", dx.len(), dy.len()),
            ));
        }
        if dx.iter().chain(dy.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite displacement".into()));
        }
        Ok(DisplacementField {
            width,
            height,
            dx,
            dy,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        let n = width * height;
        DisplacementField {
            width,
            height,
            dx: vec![0.0; n],
            dy: vec![0.0; n],
        }
    }

    pub fn constant(width: usize, height: usize, dx: f64, dy: f64) -> Self {
        let n = width * height;
        DisplacementField {
            width,
            height,
            dx: vec![dx; n],
            dy: vec![dy; n],
        }
    }

    /// Evaluates `f(x, y) -> (dx, dy)` at every pixel center.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> (f64, f64)) -> Self {
        let mut phi = DisplacementField::zeros(width, height);
        for y in 0..height {
            for x in 0..width {
                let (a, b) = f(x, y);
                phi.dx[y * width + x] = a;
                phi.dy[y * width + x] = b;
            }
        }
        phi
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.dx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dx.is_empty()
    }

    pub fn dx(&self) -> &[f64] {
        &self.dx
    }

    pub fn dy(&self) -> &[f64] {
        &self.dy
    }

    pub fn dx_mut(&mut self) -> &mut [f64] {
        &mut self.dx
    }

    pub fn dy_mut(&mut self) -> &mut [f64] {
        &mut self.dy
    }

    pub fn components_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.dx, &mut self.dy)
    }

    pub fn at(&self, x: usize, y: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.dx[i], self.dy[i])
    }

    pub fn is_finite(&self) -> bool {
        self.dx.iter().chain(self.dy.iter()).all(|v| v.is_finite())
    }

    /// `self += scale * other`, component-wise.
    pub fn axpy(&mut self, scale: f64, other: &DisplacementField) {
        for (a, b) in self.dx.iter_mut().zip(&other.dx) {
            *a += scale * b;
        }
        for (a, b) in self.dy.iter_mut().zip(&other.dy) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        for v in self.dx.iter_mut().chain(self.dy.iter_mut()) {
            *v *= k;
        }
    }

    pub fn dot(&self, other: &DisplacementField) -> f64 {
        let a: f64 = self.dx.iter().zip(&other.dx).map(|(a, b)| a * b).sum();
        let b: f64 = self.dy.iter().zip(&other.dy).map(|(a, b)| a * b).sum();
        a + b
    }

    pub fn magnitude(&self) -> Vec<f64> {
        self.dx
            .iter()
            .zip(&self.dy)
            .map(|(a, b)| a.hypot(*b))
            .collect()
    }

    /// Per-pixel Euclidean distance between two fields.
    pub fn endpoint_error(&self, other: &DisplacementField) -> Result<Vec<f64>> {
        ensure_same_shape("endpoint_error", self, other)?;
        Ok(self
            .dx
            .iter()
            .zip(&self.dy)
            .zip(other.dx.iter().zip(&other.dy))
            .map(|((a, b), (c, d))| (a - c).hypot(b - d))
            .collect())
    }
}

/// Per-pixel class-probability map. Channel-major storage: class `k` of
/// pixel `p` lives at `k * width * height + p`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    width: usize,
    height: usize,
    classes: usize,
    data: Vec<f64>,
}

/// Tolerance on the per-pixel probability sum.
pub const NORMALIZATION_TOL: f64 = 1e-6;

impl LabelMap {
    pub fn new(width: usize, height: usize, classes: usize, data: Vec<f64>) -> Result<Self> {
        check_shape(width, height)?;
        if classes == 0 {
            return Err(Error::InvalidInput("a label map needs at least one class".into()));
        }
        let n = width * height;
        if data.len() != n * classes {
            return Err(Error::dims("LabelMap::new", n * classes, data.len()));
        }
        if let Some(bad) = data
            .iter()
            .find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v)))
        {
            return Err(Error::InvalidInput(format!(
                "label probabilities must lie in [0, 1], found {bad}"
            )));
        }
        for p in 0..n {
            let s: f64 = (0..classes).map(|k| data[k * n + p]).sum();
            if (s - 1.0).abs() > NORMALIZATION_TOL {
                return Err(Error::InvalidInput(format!(
                    "pixel {p} probabilities sum to {s}, expected 1"
                )));
            }
        }
        Ok(LabelMap {
            width,
            height,
            classes,
            data,
        })
    }

    pub(crate) fn from_parts(width: usize, height: usize, classes: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), width * height * classes);
        LabelMap {
            width,
            height,
            classes,
            data,
        }
    }

    pub fn uniform(width: usize, height: usize, classes: usize) -> Self {
        let v = 1.0 / classes as f64;
        LabelMap::from_parts(width, height, classes, vec![v; width * height * classes])
    }

    /// One-hot map from hard class indices.
    pub fn one_hot(width: usize, height: usize, classes: usize, labels: &[usize]) -> Result<Self> {
        check_shape(width, height)?;
        let n = width * height;
        if labels.len() != n {
            return Err(Error::dims("LabelMap::one_hot", n, labels.len()));
        }
        let mut data = vec![0.0; n * classes];
        for (p, &k) in labels.iter().enumerate() {
            if k >= classes {
                return Err(Error::InvalidInput(format!(
                    "label {k} out of range for {classes} classes"
                )));
            }
            data[k * n + p] = 1.0;
        }
        Ok(LabelMap::from_parts(width, height, classes, data))
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn channel(&self, k: usize) -> &[f64] {
        let n = self.pixels();
        &self.data[k * n..(k + 1) * n]
    }

    pub fn prob(&self, k: usize, p: usize) -> f64 {
        self.data[k * self.pixels() + p]
    }

    /// Per-pixel argmax; ties go to the lowest class index.
    pub fn argmax(&self) -> Vec<usize> {
        let n = self.pixels();
        (0..n)
            .map(|p| {
                let mut best = 0;
                let mut best_v = self.data[p];
                for k in 1..self.classes {
                    let v = self.data[k * n + p];
                    if v > best_v {
                        best = k;
                        best_v = v;
                    }
                }
                best
            })
            .collect()
    }

    pub fn same_layout(&self, other: &LabelMap) -> bool {
        self.width == other.width && self.height == other.height && self.classes == other.classes
    }
}

pub(crate) fn ensure_same_layout(context: &'static str, a: &LabelMap, b: &LabelMap) -> Result<()> {
    if !a.same_layout(b) {
        return Err(Error::dims(
            context,
            format!("{}x{}x{}", a.width, a.height, a.classes),
            format!("{}x{}x{}", b.width, b.height, b.classes),
        ));
    }
    Ok(())
}

/// Bilinear sampling stencil at one continuous location, with clamping.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Stencil {
    pub i00: usize,
    pub i10: usize,
    pub i01: usize,
    pub i11: usize,
    pub fx: f64,
    pub fy: f64,
    /// Whether the sample moves with x (false when clamped).
    pub active_x: bool,
    pub active_y: bool,
}

/// Returns (lower index, upper index, fraction, active).
#[inline]
fn axis(v: f64, n: usize) -> (usize, usize, f64, bool) {
    if n == 1 {
        return (0, 0, 0.0, false);
    }
    let max = (n - 1) as f64;
    if v.is_nan() || v < 0.0 {
        (0, 0, 0.0, false)
    } else if v >= max {
        (n - 1, n - 1, 0.0, false)
    } else {
        let lo = v.floor();
        let i = lo as usize;
        (i, i + 1, v - lo, true)
    }
}

impl Stencil {
    #[inline]
    pub fn at(width: usize, height: usize, x: f64, y: f64) -> Self {
        let (x0, x1, fx, active_x) = axis(x, width);
        let (y0, y1, fy, active_y) = axis(y, height);
        Stencil {
            i00: y0 * width + x0,
            i10: y0 * width + x1,
            i01: y1 * width + x0,
            i11: y1 * width + x1,
            fx,
            fy,
            active_x,
            active_y,
        }
    }

    #[inline]
    pub fn value(&self, data: &[f64]) -> f64 {
        let (fx, fy) = (self.fx, self.fy);
        (1.0 - fx) * (1.0 - fy) * data[self.i00]
            + fx * (1.0 - fy) * data[self.i10]
            + (1.0 - fx) * fy * data[self.i01]
            + fx * fy * data[self.i11]
    }

    /// Partial derivatives of the sampled value w.r.t. the sample location.
    #[inline]
    pub fn gradient(&self, data: &[f64]) -> (f64, f64) {
        let (fx, fy) = (self.fx, self.fy);
        let (a, b, c, d) = (data[self.i00], data[self.i10], data[self.i01], data[self.i11]);
        let gx = if self.active_x {
            (1.0 - fy) * (b - a) + fy * (d - c)
        } else {
            0.0
        };
        let gy = if self.active_y {
            (1.0 - fx) * (c - a) + fx * (d - b)
        } else {
            0.0
        };
        (gx, gy)
    }

    /// Adds `g` times the interpolation weights into `out` (the adjoint of
    /// [`Stencil::value`] w.r.t. the sampled data).
    #[inline]
    pub fn scatter(&self, g: f64, out: &mut [f64]) {
        let (fx, fy) = (self.fx, self.fy);
        out[self.i00] += g * (1.0 - fx) * (1.0 - fy);
        out[self.i10] += g * fx * (1.0 - fy);
        out[self.i01] += g * (1.0 - fx) * fy;
        out[self.i11] += g * fx * fy;
    }
}

/// Bilinear interpolation at a continuous location; out-of-grid coordinates
/// clamp to the border.
pub fn bilinear_sample(img: &Image2D, x: f64, y: f64) -> f64 {
    Stencil::at(img.width, img.height, x, y).value(&img.data)
}

/// Stencils for every reference pixel displaced by `phi`.
pub(crate) fn stencils(phi: &DisplacementField) -> Vec<Stencil> {
    let (w, h) = (phi.width, phi.height);
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            out.push(Stencil::at(w, h, x as f64 + phi.dx[i], y as f64 + phi.dy[i]));
        }
    }
    out
}

pub(crate) fn warp_slice(data: &[f64], st: &[Stencil]) -> Vec<f64> {
    st.iter().map(|s| s.value(data)).collect()
}

/// `out(c) = img(c + phi(c))`. The output keeps the input spacing.
pub fn warp_image(img: &Image2D, phi: &DisplacementField) -> Result<Image2D> {
    ensure_same_shape("warp_image", img, phi)?;
    let st = stencils(phi);
    Ok(Image2D::from_parts(
        img.width,
        img.height,
        img.spacing,
        warp_slice(&img.data, &st),
    ))
}

/// Warps every class channel independently and renormalizes each pixel.
pub fn warp_labelmap(lbl: &LabelMap, phi: &DisplacementField) -> Result<LabelMap> {
    ensure_same_shape("warp_labelmap", lbl, phi)?;
    let st = stencils(phi);
    Ok(warp_labelmap_with(lbl, &st))
}

pub(crate) fn warp_labelmap_with(lbl: &LabelMap, st: &[Stencil]) -> LabelMap {
    let n = lbl.pixels();
    let mut data = Vec::with_capacity(n * lbl.classes);
    for k in 0..lbl.classes {
        data.extend(st.iter().map(|s| s.value(lbl.channel(k))));
    }
    for p in 0..n {
        let s: f64 = (0..lbl.classes).map(|k| data[k * n + p]).sum();
        if s > 0.0 {
            for k in 0..lbl.classes {
                data[k * n + p] /= s;
            }
        }
    }
    LabelMap::from_parts(lbl.width, lbl.height, lbl.classes, data)
}

/// Chain rule through `warp(data, phi)`: given `upstream = dL/d(warped)`,
/// accumulates `dL/dphi` into `grad`.
pub(crate) fn warp_field_vjp(data: &[f64], st: &[Stencil], upstream: &[f64], grad: &mut DisplacementField) {
    for (i, s) in st.iter().enumerate() {
        let g = upstream[i];
        if g == 0.0 {
            continue;
        }
        let (gx, gy) = s.gradient(data);
        grad.dx[i] += g * gx;
        grad.dy[i] += g * gy;
    }
}

/// Adjoint of `warp(data, phi)` w.r.t. `data`.
pub(crate) fn warp_data_vjp(st: &[Stencil], upstream: &[f64], out: &mut [f64]) {
    for (s, &g) in st.iter().zip(upstream) {
        if g != 0.0 {
            s.scatter(g, out);
        }
    }
}

/// Forward difference along x; the last column repeats the backward difference.
pub(crate) fn diff_x(u: &[f64], w: usize, h: usize) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    if w < 2 {
        return out;
    }
    for y in 0..h {
        let row = y * w;
        for x in 0..w - 1 {
            out[row + x] = u[row + x + 1] - u[row + x];
        }
        out[row + w - 1] = u[row + w - 1] - u[row + w - 2];
    }
    out
}

/// Forward difference along y; the last row repeats the backward difference.
pub(crate) fn diff_y(u: &[f64], w: usize, h: usize) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    if h < 2 {
        return out;
    }
    for y in 0..h - 1 {
        for x in 0..w {
            out[y * w + x] = u[(y + 1) * w + x] - u[y * w + x];
        }
    }
    for x in 0..w {
        out[(h - 1) * w + x] = u[(h - 1) * w + x] - u[(h - 2) * w + x];
    }
    out
}

/// Adds the transpose of [`diff_x`] applied to `g` into `out`.
pub(crate) fn diff_x_adjoint(g: &[f64], w: usize, h: usize, out: &mut [f64]) {
    if w < 2 {
        return;
    }
    for y in 0..h {
        let row = y * w;
        for x in 0..w - 1 {
            out[row + x + 1] += g[row + x];
            out[row + x] -= g[row + x];
        }
        out[row + w - 1] += g[row + w - 1];
        out[row + w - 2] -= g[row + w - 1];
    }
}

pub(crate) fn diff_y_adjoint(g: &[f64], w: usize, h: usize, out: &mut [f64]) {
    if h < 2 {
        return;
    }
    for y in 0..h - 1 {
        for x in 0..w {
            out[(y + 1) * w + x] += g[y * w + x];
            out[y * w + x] -= g[y * w + x];
        }
    }
    for x in 0..w {
        out[(h - 1) * w + x] += g[(h - 1) * w + x];
        out[(h - 2) * w + x] -= g[(h - 1) * w + x];
    }
}

/// Per-pixel 2x2 Jacobian of a displacement field, one buffer per entry.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldJacobian {
    pub ddx_dx: Vec<f64>,
    pub ddx_dy: Vec<f64>,
    pub ddy_dx: Vec<f64>,
    pub ddy_dy: Vec<f64>,
}

impl FieldJacobian {
    /// Squared Frobenius norm at pixel `i`.
    pub fn frobenius_sq(&self, i: usize) -> f64 {
        self.ddx_dx[i].powi(2) + self.ddx_dy[i].powi(2) + self.ddy_dx[i].powi(2) + self.ddy_dy[i].powi(2)
    }
}

pub fn field_gradient(phi: &DisplacementField) -> FieldJacobian {
    let (w, h) = (phi.width, phi.height);
    FieldJacobian {
        ddx_dx: diff_x(&phi.dx, w, h),
        ddx_dy: diff_y(&phi.dx, w, h),
        ddy_dx: diff_x(&phi.dy, w, h),
        ddy_dy: diff_y(&phi.dy, w, h),
    }
}

/// 2x2 box average; odd trailing rows/columns average what is available.
pub(crate) fn downsample_image(img: &Image2D) -> Image2D {
    let (w, h) = (img.width, img.height);
    let (cw, ch) = (w.div_ceil(2), h.div_ceil(2));
    let mut data = Vec::with_capacity(cw * ch);
    for cy in 0..ch {
        for cx in 0..cw {
            let mut s = 0.0;
            let mut n = 0.0;
            for y in 2 * cy..(2 * cy + 2).min(h) {
                for x in 2 * cx..(2 * cx + 2).min(w) {
                    s += img.data[y * w + x];
                    n += 1.0;
                }
            }
            data.push(s / n);
        }
    }
    let sp = Spacing::new(img.spacing.x * 2.0, img.spacing.y * 2.0);
    Image2D::from_parts(cw, ch, sp, data)
}

/// Bilinear upsampling of a coarse field onto a `width x height` grid whose
/// pixels are half the size; displacement values double.
pub(crate) fn upsample_field(coarse: &DisplacementField, width: usize, height: usize) -> DisplacementField {
    let (cw, ch) = (coarse.width, coarse.height);
    DisplacementField::from_fn(width, height, |x, y| {
        let cx = (x as f64 + 0.5) / 2.0 - 0.5;
        let cy = (y as f64 + 0.5) / 2.0 - 0.5;
        let s = Stencil::at(cw, ch, cx, cy);
        (2.0 * s.value(&coarse.dx), 2.0 * s.value(&coarse.dy))
    })
}

/// Local mean and standard deviation over a 3x3 neighbourhood with
/// clamp-to-edge borders.
pub fn local_mean_std(data: &[f64], w: usize, h: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; w * h];
    let mut std = vec![0.0; w * h];
    let mut window = [0.0; 9];
    for y in 0..h {
        for x in 0..w {
            let mut i = 0;
            for oy in -1i64..=1 {
                let yy = (y as i64 + oy).clamp(0, h as i64 - 1) as usize;
                for ox in -1i64..=1 {
                    let xx = (x as i64 + ox).clamp(0, w as i64 - 1) as usize;
                    window[i] = data[yy * w + xx];
                    i += 1;
                }
            }
            let m = window.iter().sum::<f64>() / 9.0;
            let var = if window.iter().all(|v| *v == window[0]) {
                0.0
            } else {
                window.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 9.0
            };
            mean[y * w + x] = m;
            std[y * w + x] = var.sqrt();
        }
    }
    (mean, std)
}

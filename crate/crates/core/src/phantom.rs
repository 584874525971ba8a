//! Deterministic synthetic cine phantom with known motion, anatomy and
//! pathology.
//!
//! The left ventricle is an annulus centred in the image. Over the cycle it
//! contracts radially with a cosine phase profile; inside the scar sector the
//! displacement is attenuated, blended back to full motion over 10 degrees
//! outside the sector edges. Scar is subendocardial (a fraction of the wall
//! thickness); edema is a margin around the scar within the myocardium.
//!
//! Two fields are kept per frame:
//! * `motion_fields[i]` realigns frame `i` with the reference:
//!   `frame_i(c + phi(c)) ~ ref(c)`. This is what motion estimation recovers.
//! * `render_fields[i]` generated the frame: `frame_i = warp(ref, psi_i)`
//!   before noise. It is the radial inverse of the motion map.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{warp_image, CineSequence, DisplacementField, Image2D, LabelMap, Spacing};

/// Width of the angular blend between attenuated and healthy motion.
pub const BLEND_DEG: f64 = 10.0;
const SUPERSAMPLE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intensities {
    pub background: f64,
    pub cavity: f64,
    pub myocardium: f64,
    pub scar: f64,
    pub edema: f64,
}

impl Default for Intensities {
    fn default() -> Self {
        Intensities {
            background: 0.08,
            cavity: 0.85,
            myocardium: 0.35,
            scar: 0.2,
            edema: 0.55,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub width: usize,
    pub height: usize,
    pub spacing: Spacing,
    pub endo_radius: f64,
    pub epi_radius: f64,
    /// Peak inward displacement of the endocardium as a fraction of its radius.
    pub contraction: f64,
    pub frames: usize,
    pub scar_start_deg: f64,
    pub scar_extent_deg: f64,
    /// Fraction of the wall thickness, from the endocardium, occupied by scar.
    pub scar_transmurality: f64,
    pub edema_margin: f64,
    /// Motion scale inside the scar sector, 1 = normal motion.
    pub scar_attenuation: f64,
    pub intensities: Intensities,
    /// Gaussian point-spread blur of the reference image, pixels.
    pub psf_sigma: f64,
    /// Standard deviation of a smooth multiplicative texture baked into the
    /// reference image. Without it motion along the flat ring is unobservable.
    pub texture_sigma: f64,
    /// Correlation length of the texture, pixels.
    pub texture_scale: f64,
    pub noise_sigma: f64,
    /// Anatomy classes in the gold label: 2 (background, myocardium) or 3
    /// (adds the blood pool).
    pub anatomy_classes: usize,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            width: 64,
            height: 64,
            spacing: Spacing::isotropic(1.25),
            endo_radius: 12.0,
            epi_radius: 19.0,
            contraction: 0.2,
            frames: 25,
            scar_start_deg: 30.0,
            scar_extent_deg: 80.0,
            scar_transmurality: 0.6,
            edema_margin: 2.5,
            scar_attenuation: 0.2,
            intensities: Intensities::default(),
            psf_sigma: 1.5,
            texture_sigma: 0.1,
            texture_scale: 1.5,
            noise_sigma: 0.03,
            anatomy_classes: 3,
            seed: 0,
        }
    }
}

/// Pathology class indices.
pub const NORMAL: usize = 0;
pub const EDEMA: usize = 1;
pub const SCAR: usize = 2;
pub const PATHOLOGY_CLASSES: usize = 3;

/// Anatomy class indices.
pub const BACKGROUND: usize = 0;
pub const MYOCARDIUM: usize = 1;
pub const BLOOD_POOL: usize = 2;

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let half = self.width.min(self.height) as f64 / 2.0;
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.width < 8 || self.height < 8 {
            return bad(format!("phantom grid {}x{} is too small", self.width, self.height));
        }
        if !(self.spacing.x > 0.0 && self.spacing.y > 0.0) {
            return bad("spacing must be positive".into());
        }
        if !(0.0 < self.endo_radius && self.endo_radius < self.epi_radius && self.epi_radius < half) {
            return bad(format!(
                "radii must satisfy 0 < endo ({}) < epi ({}) < half-size ({half})",
                self.endo_radius, self.epi_radius
            ));
        }
        if self.frames < 2 {
            return bad("a phantom needs at least 2 frames".into());
        }
        if !(0.0..=1.0).contains(&self.scar_attenuation) {
            return bad(format!("scar_attenuation {} outside [0, 1]", self.scar_attenuation));
        }
        if !(0.0..0.6).contains(&self.contraction) {
            return bad(format!(
                "contraction {} must lie in [0, 0.6) to keep the motion invertible",
                self.contraction
            ));
        }
        if !(0.0..=1.0).contains(&self.scar_transmurality) {
            return bad("scar_transmurality must lie in [0, 1]".into());
        }
        if !(0.0..=360.0).contains(&self.scar_extent_deg) {
            return bad("scar_extent_deg must lie in [0, 360]".into());
        }
        if [self.edema_margin, self.psf_sigma, self.noise_sigma, self.texture_sigma, self.texture_scale]
            .iter()
            .any(|v| !(*v >= 0.0))
        {
            return bad("edema_margin, psf_sigma, noise_sigma and the texture parameters must be >= 0".into());
        }
        if !(self.anatomy_classes == 2 || self.anatomy_classes == 3) {
            return bad("anatomy_classes must be 2 or 3".into());
        }
        let i = &self.intensities;
        for v in [i.background, i.cavity, i.myocardium, i.scar, i.edema] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("intensity {v} outside [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.width as f64 - 1.0) / 2.0, (self.height as f64 - 1.0) / 2.0)
    }

    fn has_scar(&self) -> bool {
        self.scar_extent_deg > 0.0 && self.scar_transmurality > 0.0
    }

    /// Contraction phase of frame `i`: 0 at end-diastole, 1 at mid-cycle.
    pub fn phase(&self, i: usize) -> f64 {
        0.5 * (1.0 - (2.0 * PI * i as f64 / self.frames as f64).cos())
    }

    /// Inward radial displacement at peak contraction for ED radius `r`;
    /// largest at the endocardium and decaying smoothly outside the heart.
    pub fn radial_profile(&self, r: f64) -> f64 {
        let e = self.endo_radius;
        self.contraction * r * (-(r * r - e * e) / (2.0 * e * e)).exp()
    }

    fn radial_profile_derivative(&self, r: f64) -> f64 {
        let e = self.endo_radius;
        self.contraction * (-(r * r - e * e) / (2.0 * e * e)).exp() * (1.0 - r * r / (e * e))
    }

    /// Angular distance in degrees from `theta_deg` to the scar sector,
    /// 0 inside it.
    pub fn sector_distance_deg(&self, theta_deg: f64) -> f64 {
        let rel = (theta_deg - self.scar_start_deg).rem_euclid(360.0);
        if rel <= self.scar_extent_deg {
            0.0
        } else {
            (rel - self.scar_extent_deg).min(360.0 - rel)
        }
    }

    /// Motion scale at angle `theta_deg`.
    pub fn angular_gain(&self, theta_deg: f64) -> f64 {
        if self.scar_extent_deg <= 0.0 {
            return 1.0;
        }
        let d = self.sector_distance_deg(theta_deg);
        if d >= BLEND_DEG {
            1.0
        } else {
            let a = self.scar_attenuation;
            a + (1.0 - a) * 0.5 * (1.0 - (PI * d / BLEND_DEG).cos())
        }
    }

    fn polar(&self, x: f64, y: f64) -> (f64, f64) {
        let (cx, cy) = self.center();
        let (u, v) = (x - cx, y - cy);
        (u.hypot(v), v.atan2(u).to_degrees().rem_euclid(360.0))
    }

    fn scar_outer_radius(&self) -> f64 {
        self.endo_radius + self.scar_transmurality * (self.epi_radius - self.endo_radius)
    }

    /// Tissue class at an ED-space point.
    pub fn tissue_at(&self, x: f64, y: f64) -> Tissue {
        let (r, theta) = self.polar(x, y);
        if r < self.endo_radius {
            return Tissue::Cavity;
        }
        if r > self.epi_radius {
            return Tissue::Background;
        }
        if !self.has_scar() {
            return Tissue::Myocardium;
        }
        let outer = self.scar_outer_radius();
        let arc = self.sector_distance_deg(theta).to_radians() * r;
        let radial = (r - outer).max(0.0);
        if arc == 0.0 && radial == 0.0 {
            Tissue::Scar
        } else if arc.hypot(radial) <= self.edema_margin {
            Tissue::Edema
        } else {
            Tissue::Myocardium
        }
    }

    /// Ground-truth realigning field for frame `i` (sampling semantics).
    pub fn motion_field(&self, i: usize) -> DisplacementField {
        let s = self.phase(i);
        let (cx, cy) = self.center();
        DisplacementField::from_fn(self.width, self.height, |x, y| {
            let (r, theta) = self.polar(x as f64, y as f64);
            if r == 0.0 {
                return (0.0, 0.0);
            }
            let mag = -s * self.angular_gain(theta) * self.radial_profile(r);
            let (ux, uy) = ((x as f64 - cx) / r, (y as f64 - cy) / r);
            (mag * ux, mag * uy)
        })
    }

    /// Field that renders frame `i` from the reference image.
    pub fn render_field(&self, i: usize) -> DisplacementField {
        let s = self.phase(i);
        let (cx, cy) = self.center();
        DisplacementField::from_fn(self.width, self.height, |x, y| {
            let (big_r, theta) = self.polar(x as f64, y as f64);
            if big_r == 0.0 || s == 0.0 {
                return (0.0, 0.0);
            }
            let k = s * self.angular_gain(theta);
            // Invert R = r - k D(r); the map is strictly increasing in r.
            let mut r = big_r;
            for _ in 0..50 {
                let g = r - k * self.radial_profile(r) - big_r;
                let dg = 1.0 - k * self.radial_profile_derivative(r);
                let next = r - g / dg;
                if (next - r).abs() < 1e-14 {
                    r = next;
                    break;
                }
                r = next;
            }
            let (ux, uy) = ((x as f64 - cx) / big_r, (y as f64 - cy) / big_r);
            ((r - big_r) * ux, (r - big_r) * uy)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tissue {
    Background,
    Cavity,
    Myocardium,
    Scar,
    Edema,
}

impl Tissue {
    pub fn is_myocardium(self) -> bool {
        matches!(self, Tissue::Myocardium | Tissue::Scar | Tissue::Edema)
    }

    pub fn pathology_class(self) -> usize {
        match self {
            Tissue::Scar => SCAR,
            Tissue::Edema => EDEMA,
            _ => NORMAL,
        }
    }

    fn intensity(self, i: &Intensities) -> f64 {
        match self {
            Tissue::Background => i.background,
            Tissue::Cavity => i.cavity,
            Tissue::Myocardium => i.myocardium,
            Tissue::Scar => i.scar,
            Tissue::Edema => i.edema,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCase {
    pub config: PhantomConfig,
    pub sequence: CineSequence,
    pub motion_fields: Vec<DisplacementField>,
    pub render_fields: Vec<DisplacementField>,
    /// Gold anatomy at the reference frame.
    pub anatomy: LabelMap,
    /// Gold pathology at the reference frame.
    pub pathology: LabelMap,
    /// Hard anatomy labels for every frame, for evaluating propagation.
    pub frame_anatomy: Vec<Vec<usize>>,
}

impl SyntheticCase {
    /// ED-space mask of the heart (cavity and myocardium) grown by `pad` px.
    pub fn heart_roi(&self, pad: f64) -> Vec<bool> {
        let c = &self.config;
        let (cx, cy) = c.center();
        (0..c.width * c.height)
            .map(|p| {
                let (x, y) = ((p % c.width) as f64, (p / c.width) as f64);
                (x - cx).hypot(y - cy) <= c.epi_radius + pad
            })
            .collect()
    }
}

fn anatomy_class(t: Tissue, classes: usize) -> usize {
    if t.is_myocardium() {
        MYOCARDIUM
    } else if classes == 3 && t == Tissue::Cavity {
        BLOOD_POOL
    } else {
        BACKGROUND
    }
}

fn render_reference(cfg: &PhantomConfig, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let (w, h) = (cfg.width, cfg.height);
    let ss = SUPERSAMPLE as f64;
    let mut img = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = x as f64 - 0.5 + (sx as f64 + 0.5) / ss;
                    let py = y as f64 - 0.5 + (sy as f64 + 0.5) / ss;
                    acc += cfg.tissue_at(px, py).intensity(&cfg.intensities);
                }
            }
            img.push(acc / (ss * ss));
        }
    }
    if cfg.texture_sigma > 0.0 {
        let white: Vec<f64> = (0..w * h).map(|_| StandardNormal.sample(rng)).collect();
        let mut tex = gaussian_blur(&white, w, h, cfg.texture_scale);
        let sd = (tex.iter().map(|v| v * v).sum::<f64>() / tex.len() as f64).sqrt();
        if sd > 0.0 {
            tex.iter_mut().for_each(|v| *v *= cfg.texture_sigma / sd);
        }
        for (v, t) in img.iter_mut().zip(&tex) {
            *v *= 1.0 + t;
        }
    }
    Ok(gaussian_blur(&img, w, h, cfg.psf_sigma))
}

/// Separable Gaussian blur with clamp-to-edge borders.
pub(crate) fn gaussian_blur(data: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (j, k) in kernel.iter().enumerate() {
                let xx = (x as i64 + j as i64 - radius).clamp(0, w as i64 - 1) as usize;
                s += k * data[y * w + xx];
            }
            tmp[y * w + x] = s;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (j, k) in kernel.iter().enumerate() {
                let yy = (y as i64 + j as i64 - radius).clamp(0, h as i64 - 1) as usize;
                s += k * tmp[yy * w + x];
            }
            out[y * w + x] = s;
        }
    }
    out
}

/// Generates a full case. Identical configs give bit-identical cases.
pub fn generate(cfg: &PhantomConfig) -> Result<SyntheticCase> {
    cfg.validate()?;
    let (w, h) = (cfg.width, cfg.height);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut tex_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    tex_rng.set_stream(1);
    let reference = Image2D::new(
        w,
        h,
        cfg.spacing,
        render_reference(cfg, &mut tex_rng)?.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
    )?;

    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::InvalidConfig(format!("noise distribution: {e}")))?;

    let mut frames = Vec::with_capacity(cfg.frames);
    let mut motion_fields = Vec::with_capacity(cfg.frames);
    let mut render_fields = Vec::with_capacity(cfg.frames);
    let mut frame_anatomy = Vec::with_capacity(cfg.frames);
    for i in 0..cfg.frames {
        let psi = cfg.render_field(i);
        let clean = warp_image(&reference, &psi)?;
        let data: Vec<f64> = if cfg.noise_sigma > 0.0 {
            clean
                .data()
                .iter()
                .map(|v| (v + noise.sample(&mut rng)).clamp(0.0, 1.0))
                .collect()
        } else {
            clean.into_data()
        };
        frames.push(Image2D::new(w, h, cfg.spacing, data)?);
        frame_anatomy.push(
            (0..w * h)
                .map(|p| {
                    let (x, y) = ((p % w) as f64, (p / w) as f64);
                    let (dx, dy) = (psi.dx()[p], psi.dy()[p]);
                    anatomy_class(cfg.tissue_at(x + dx, y + dy), cfg.anatomy_classes)
                })
                .collect(),
        );
        motion_fields.push(cfg.motion_field(i));
        render_fields.push(psi);
    }

    let tissues: Vec<Tissue> = (0..w * h)
        .map(|p| cfg.tissue_at((p % w) as f64, (p / w) as f64))
        .collect();
    let anatomy_labels: Vec<usize> = tissues.iter().map(|t| anatomy_class(*t, cfg.anatomy_classes)).collect();
    let pathology_labels: Vec<usize> = tissues.iter().map(|t| t.pathology_class()).collect();

    Ok(SyntheticCase {
        config: cfg.clone(),
        sequence: CineSequence::new(frames, 0)?,
        motion_fields,
        render_fields,
        anatomy: LabelMap::one_hot(w, h, cfg.anatomy_classes, &anatomy_labels)?,
        pathology: LabelMap::one_hot(w, h, PATHOLOGY_CLASSES, &pathology_labels)?,
        frame_anatomy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noiseless() -> PhantomConfig {
        PhantomConfig {
            noise_sigma: 0.0,
            frames: 8,
            ..PhantomConfig::default()
        }
    }

    #[test]
    fn healthy_phantom_moves_radially() {
        let cfg = PhantomConfig {
            scar_attenuation: 1.0,
            scar_extent_deg: 0.0,
            frames: 6,
            ..PhantomConfig::default()
        };
        let case = generate(&cfg).unwrap();
        assert!(case.pathology.argmax().iter().all(|&k| k == NORMAL));
        let (cx, cy) = cfg.center();
        for phi in &case.motion_fields {
            for y in 0..cfg.height {
                for x in 0..cfg.width {
                    let (dx, dy) = phi.at(x, y);
                    let (u, v) = (x as f64 - cx, y as f64 - cy);
                    // Purely radial: the cross product with the radius vanishes.
                    assert!((dx * v - dy * u).abs() < 1e-9);
                    assert!(dx * u + dy * v <= 1e-12, "points move inward");
                }
            }
        }
    }

    #[test]
    fn noiseless_frames_are_warped_reference() {
        let case = generate(&noiseless()).unwrap();
        let reference = case.sequence.reference();
        for (i, psi) in case.render_fields.iter().enumerate() {
            let rendered = warp_image(reference, psi).unwrap();
            let mae: f64 = rendered
                .data()
                .iter()
                .zip(case.sequence.frame(i).data())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / rendered.len() as f64;
            assert!(mae < 1e-6, "frame {i}: {mae}");
        }
    }

    #[test]
    fn render_field_inverts_motion_map() {
        let cfg = noiseless();
        let (cx, cy) = cfg.center();
        for i in [2, 4] {
            let psi = cfg.render_field(i);
            for y in 0..cfg.height {
                for x in 0..cfg.width {
                    // psi sends frame pixel c (radius R) to its ED preimage at
                    // radius r, which the motion map must carry back to R.
                    let (u, v) = (x as f64 - cx, y as f64 - cy);
                    let big_r = u.hypot(v);
                    let (dx, dy) = psi.at(x, y);
                    let r = (u + dx).hypot(v + dy);
                    let theta = v.atan2(u).to_degrees().rem_euclid(360.0);
                    let k = cfg.phase(i) * cfg.angular_gain(theta);
                    assert!((r - k * cfg.radial_profile(r) - big_r).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn scar_sector_moves_less() {
        let cfg = PhantomConfig::default();
        let case = generate(&cfg).unwrap();
        let (cx, cy) = cfg.center();
        let mut checked = 0;
        for (i, phi) in case.motion_fields.iter().enumerate().skip(1) {
            let mag = phi.magnitude();
            for p in 0..mag.len() {
                let (x, y) = ((p % cfg.width) as f64, (p / cfg.width) as f64);
                if !cfg.tissue_at(x, y).is_myocardium() {
                    continue;
                }
                let r = (x - cx).hypot(y - cy);
                let theta = (y - cy).atan2(x - cx).to_degrees().rem_euclid(360.0);
                let healthy = cfg.phase(i) * cfg.radial_profile(r);
                let d = cfg.sector_distance_deg(theta);
                if d == 0.0 {
                    assert!((mag[p] - cfg.scar_attenuation * healthy).abs() < 1e-9, "frame {i} pixel {p}");
                    checked += 1;
                } else if d >= BLEND_DEG {
                    assert!((mag[p] - healthy).abs() < 1e-9);
                } else {
                    assert!(mag[p] <= healthy + 1e-9 && mag[p] >= cfg.scar_attenuation * healthy - 1e-9);
                }
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn labels_match_geometry() {
        let cfg = PhantomConfig::default();
        let case = generate(&cfg).unwrap();
        let (cx, cy) = cfg.center();
        let anat = case.anatomy.argmax();
        for p in 0..anat.len() {
            let (x, y) = ((p % cfg.width) as f64, (p / cfg.width) as f64);
            let r = (x - cx).hypot(y - cy);
            if r < cfg.endo_radius - 1.0 {
                assert_eq!(anat[p], BLOOD_POOL);
            }
            if r > cfg.epi_radius + 1.0 {
                assert_eq!(anat[p], BACKGROUND);
            }
            if r > cfg.endo_radius + 1.0 && r < cfg.epi_radius - 1.0 {
                assert_eq!(anat[p], MYOCARDIUM);
            }
        }
        let path = case.pathology.argmax();
        for k in [EDEMA, SCAR] {
            assert!(path.iter().filter(|&&c| c == k).count() > 30);
        }
        // Pathology only inside the myocardium.
        for p in 0..path.len() {
            if path[p] != NORMAL {
                assert_eq!(anat[p], MYOCARDIUM);
            }
        }
        assert_eq!(case.frame_anatomy[0], anat);
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = PhantomConfig {
            frames: 4,
            ..PhantomConfig::default()
        };
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
        let other = PhantomConfig { seed: 1, ..cfg.clone() };
        assert_ne!(generate(&cfg).unwrap().sequence, generate(&other).unwrap().sequence);
    }

    #[test]
    fn rejects_bad_geometry() {
        for cfg in [
            PhantomConfig { endo_radius: 20.0, epi_radius: 19.0, ..Default::default() },
            PhantomConfig { epi_radius: 40.0, ..Default::default() },
            PhantomConfig { frames: 1, ..Default::default() },
            PhantomConfig { scar_attenuation: 1.5, ..Default::default() },
        ] {
            assert!(matches!(generate(&cfg), Err(Error::InvalidConfig(_))));
        }
    }
}

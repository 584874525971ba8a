//! Chord-based scar transmurality.
//!
//! The myocardium is cut by 100 rays from the centroid of the blood-pool
//! cavity, 3.6 degrees apart. Angle 0 points along +x and angles grow
//! towards +y (image rows). Each ray is sampled every half pixel; the
//! myocardium pixels it crosses, without repeats, form the chord.

use std::collections::VecDeque;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::BinaryMask;

pub const CHORDS: usize = 100;
const RAY_STEP: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chord {
    pub index: usize,
    pub angle: f64,
    /// Ordered from the endocardial to the epicardial side.
    pub pixels: Vec<(usize, usize)>,
    /// Distance between the first and last pixel centers plus one pixel.
    pub length_px: f64,
}

impl Chord {
    pub fn is_valid(&self) -> bool {
        !self.pixels.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Viability {
    Viable,
    LikelyViable,
    LikelyNonviable,
    Nonviable,
}

impl Viability {
    pub const ALL: [Viability; 4] = [
        Viability::Viable,
        Viability::LikelyViable,
        Viability::LikelyNonviable,
        Viability::Nonviable,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Viability::Viable => "viable",
            Viability::LikelyViable => "likely_viable",
            Viability::LikelyNonviable => "likely_nonviable",
            Viability::Nonviable => "nonviable",
        }
    }
}

/// Upper bounds are inclusive: `<= 25` viable, `<= 50` likely viable,
/// `<= 75` likely nonviable, otherwise nonviable.
pub fn categorize(percent: f64) -> Viability {
    if percent <= 25.0 {
        Viability::Viable
    } else if percent <= 50.0 {
        Viability::LikelyViable
    } else if percent <= 75.0 {
        Viability::LikelyNonviable
    } else {
        Viability::Nonviable
    }
}

/// Largest 4-connected background component that does not touch the image
/// border.
fn cavity(myo: &BinaryMask) -> Option<Vec<(usize, usize)>> {
    let (w, h) = (myo.width(), myo.height());
    let mut seen = vec![false; w * h];
    let mut best: Option<Vec<(usize, usize)>> = None;
    for start in 0..w * h {
        if seen[start] || myo.data()[start] {
            continue;
        }
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        let mut comp = Vec::new();
        let mut touches_border = false;
        while let Some(p) = queue.pop_front() {
            let (x, y) = (p % w, p / w);
            comp.push((x, y));
            if x == 0 || y == 0 || x + 1 == w || y + 1 == h {
                touches_border = true;
            }
            let mut push = |q: usize| {
                if !seen[q] && !myo.data()[q] {
                    seen[q] = true;
                    queue.push_back(q);
                }
            };
            if x > 0 {
                push(p - 1);
            }
            if x + 1 < w {
                push(p + 1);
            }
            if y > 0 {
                push(p - w);
            }
            if y + 1 < h {
                push(p + w);
            }
        }
        if !touches_border && best.as_ref().is_none_or(|b| comp.len() > b.len()) {
            best = Some(comp);
        }
    }
    best
}

/// Cavity centroid in pixel coordinates.
pub fn cavity_center(myo: &BinaryMask) -> Result<(f64, f64)> {
    let comp = cavity(myo).ok_or_else(|| Error::Topology("myocardium mask encloses no cavity".into()))?;
    let n = comp.len() as f64;
    let cx = comp.iter().map(|p| p.0 as f64).sum::<f64>() / n;
    let cy = comp.iter().map(|p| p.1 as f64).sum::<f64>() / n;
    Ok((cx, cy))
}

pub fn build_chords(myo: &BinaryMask) -> Result<Vec<Chord>> {
    let (cx, cy) = cavity_center(myo)?;
    let (w, h) = (myo.width() as f64, myo.height() as f64);
    Ok((0..CHORDS)
        .map(|index| {
            let angle = index as f64 * 2.0 * PI / CHORDS as f64;
            let (dx, dy) = (angle.cos(), angle.sin());
            let mut pixels: Vec<(usize, usize)> = Vec::new();
            let mut t = 0.0;
            loop {
                let (x, y) = ((cx + t * dx).round(), (cy + t * dy).round());
                if x < 0.0 || y < 0.0 || x >= w || y >= h {
                    break;
                }
                let (xi, yi) = (x as usize, y as usize);
                if myo.get(xi, yi) && !pixels.contains(&(xi, yi)) {
                    pixels.push((xi, yi));
                }
                t += RAY_STEP;
            }
            let length_px = match (pixels.first(), pixels.last()) {
                (Some(a), Some(b)) => (a.0 as f64 - b.0 as f64).hypot(a.1 as f64 - b.1 as f64) + 1.0,
                _ => 0.0,
            };
            Chord {
                index,
                angle,
                pixels,
                length_px,
            }
        })
        .collect())
}

/// Percentage of the chord's pixels that are scar.
pub fn chord_transmurality(chord: &Chord, scar: &BinaryMask) -> f64 {
    if chord.pixels.is_empty() {
        return 0.0;
    }
    let hits = chord.pixels.iter().filter(|&&(x, y)| scar.get(x, y)).count();
    100.0 * hits as f64 / chord.pixels.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChordRecord {
    pub index: usize,
    pub angle_deg: f64,
    pub pixels: usize,
    pub length_px: f64,
    /// `None` for chords that miss the myocardium.
    pub transmurality: Option<f64>,
    pub category: Option<Viability>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CategoryCounts {
    pub viable: usize,
    pub likely_viable: usize,
    pub likely_nonviable: usize,
    pub nonviable: usize,
}

impl CategoryCounts {
    pub fn get(&self, v: Viability) -> usize {
        match v {
            Viability::Viable => self.viable,
            Viability::LikelyViable => self.likely_viable,
            Viability::LikelyNonviable => self.likely_nonviable,
            Viability::Nonviable => self.nonviable,
        }
    }

    fn bump(&mut self, v: Viability) {
        match v {
            Viability::Viable => self.viable += 1,
            Viability::LikelyViable => self.likely_viable += 1,
            Viability::LikelyNonviable => self.likely_nonviable += 1,
            Viability::Nonviable => self.nonviable += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.viable + self.likely_viable + self.likely_nonviable + self.nonviable
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChordReport {
    pub center: (f64, f64),
    pub chords: Vec<ChordRecord>,
    pub valid_chords: usize,
    pub counts: CategoryCounts,
}

pub fn transmurality_report(myo: &BinaryMask, scar: &BinaryMask) -> Result<ChordReport> {
    if (myo.width(), myo.height()) != (scar.width(), scar.height()) {
        return Err(Error::dims(
            "transmurality_report",
            format!("{}x{}", myo.width(), myo.height()),
            format!("{}x{}", scar.width(), scar.height()),
        ));
    }
    let center = cavity_center(myo)?;
    let chords = build_chords(myo)?;
    let mut counts = CategoryCounts::default();
    let records: Vec<ChordRecord> = chords
        .iter()
        .map(|c| {
            let t = c.is_valid().then(|| chord_transmurality(c, scar));
            let category = t.map(categorize);
            if let Some(v) = category {
                counts.bump(v);
            }
            ChordRecord {
                index: c.index,
                angle_deg: c.angle.to_degrees(),
                pixels: c.pixels.len(),
                length_px: c.length_px,
                transmurality: t,
                category,
            }
        })
        .collect();
    Ok(ChordReport {
        center,
        valid_chords: counts.total(),
        chords: records,
        counts,
    })
}

impl ChordReport {
    pub fn to_csv(&self, case: &str) -> String {
        let mut s = String::from("case,chord,percent,category\n");
        for c in &self.chords {
            match (c.transmurality, c.category) {
                (Some(t), Some(v)) => s.push_str(&format!("{case},{},{t:.4},{}\n", c.index, v.name())),
                _ => s.push_str(&format!("{case},{},NA,invalid\n", c.index)),
            }
        }
        s
    }
}

/// Short-axis level of a slice, selecting its ring of the 16-segment model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SliceLevel {
    Basal,
    Mid,
    Apical,
}

impl SliceLevel {
    /// Number of segments and the id of the first one.
    pub fn segments(self) -> (usize, usize) {
        match self {
            SliceLevel::Basal => (6, 1),
            SliceLevel::Mid => (6, 7),
            SliceLevel::Apical => (4, 13),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRow {
    pub segment: usize,
    pub valid_chords: usize,
    pub mean_transmurality: Option<f64>,
    pub max_transmurality: Option<f64>,
    pub counts: CategoryCounts,
}

/// Groups chords into equal angular segments starting at `start_deg`.
pub fn segment_table(report: &ChordReport, level: SliceLevel, start_deg: f64) -> Vec<SegmentRow> {
    let (n, first) = level.segments();
    let width = 360.0 / n as f64;
    let mut rows: Vec<SegmentRow> = (0..n)
        .map(|i| SegmentRow {
            segment: first + i,
            valid_chords: 0,
            mean_transmurality: None,
            max_transmurality: None,
            counts: CategoryCounts::default(),
        })
        .collect();
    let mut sums = vec![0.0; n];
    for c in &report.chords {
        let (Some(t), Some(v)) = (c.transmurality, c.category) else {
            continue;
        };
        let i = (((c.angle_deg - start_deg).rem_euclid(360.0) / width) as usize).min(n - 1);
        let row = &mut rows[i];
        row.valid_chords += 1;
        row.counts.bump(v);
        row.max_transmurality = Some(row.max_transmurality.map_or(t, |m: f64| m.max(t)));
        sums[i] += t;
    }
    for (row, s) in rows.iter_mut().zip(sums) {
        if row.valid_chords > 0 {
            row.mean_transmurality = Some(s / row.valid_chords as f64);
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Spacing;
    use proptest::prelude::*;

    /// Annulus centered at `(c, c)`; `sector` optionally selects an angular
    /// range in degrees (same orientation as the chords).
    fn ring(size: usize, c: f64, r0: f64, r1: f64, sector: Option<(f64, f64)>) -> BinaryMask {
        let data = (0..size * size)
            .map(|p| {
                let (x, y) = ((p % size) as f64 - c, (p / size) as f64 - c);
                let r = x.hypot(y);
                let in_ring = r >= r0 && r < r1;
                let in_sector = sector.is_none_or(|(a, b)| {
                    let t = y.atan2(x).to_degrees().rem_euclid(360.0);
                    t >= a && t < b
                });
                in_ring && in_sector
            })
            .collect();
        BinaryMask::new(size, size, Spacing::isotropic(1.0), data).unwrap()
    }

    fn rotate90(m: &BinaryMask) -> BinaryMask {
        let n = m.width();
        // (x, y) -> (n-1-y, x): a quarter turn towards +y.
        let mut data = vec![false; n * n];
        for y in 0..n {
            for x in 0..n {
                if m.get(x, y) {
                    data[x * n + (n - 1 - y)] = true;
                }
            }
        }
        BinaryMask::new(n, n, m.spacing(), data).unwrap()
    }

    #[test]
    fn annulus_chords() {
        let myo = ring(48, 23.5, 10.0, 16.0, None);
        let chords = build_chords(&myo).unwrap();
        assert_eq!(chords.len(), 100);
        for c in &chords {
            assert!(c.is_valid());
            assert!((c.length_px - 6.0).abs() <= 1.0, "chord {} length {}", c.index, c.length_px);
        }
        let mut a: Vec<f64> = chords.iter().map(|c| c.length_px).collect();
        let mut b: Vec<f64> = build_chords(&rotate90(&myo)).unwrap().iter().map(|c| c.length_px).collect();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);
    }

    #[test]
    fn gap_chords_are_invalid() {
        let full = ring(48, 23.5, 10.0, 16.0, None);
        let gap = ring(48, 23.5, 10.0, 16.0, Some((100.0, 120.0)));
        let data: Vec<bool> = full.data().iter().zip(gap.data()).map(|(a, b)| *a && !*b).collect();
        let myo = BinaryMask::new(48, 48, Spacing::isotropic(1.0), data).unwrap();
        // The gap opens the cavity to the outside, so close it off at the
        // inner radius to keep a cavity.
        let inner = ring(48, 23.5, 9.0, 10.0, None);
        let data: Vec<bool> = myo.data().iter().zip(inner.data()).map(|(a, b)| *a || *b).collect();
        let myo = BinaryMask::new(48, 48, Spacing::isotropic(1.0), data).unwrap();
        let chords = build_chords(&myo).unwrap();
        for c in &chords {
            let deg = c.angle.to_degrees();
            if deg > 102.0 && deg < 118.0 {
                assert!(c.pixels.iter().all(|&(x, y)| inner.get(x, y)), "chord {}", c.index);
            }
        }
        let report = transmurality_report(&myo, &BinaryMask::new(48, 48, Spacing::isotropic(1.0), vec![false; 48 * 48]).unwrap()).unwrap();
        assert_eq!(report.valid_chords, report.counts.total());
    }

    #[test]
    fn open_mask_has_no_cavity() {
        let arc = ring(32, 15.5, 8.0, 12.0, Some((0.0, 180.0)));
        assert!(matches!(build_chords(&arc), Err(Error::Topology(_))));
    }

    #[test]
    fn transmurality_counts_pixels() {
        let chord = Chord {
            index: 0,
            angle: 0.0,
            pixels: (0..6).map(|x| (x, 0)).collect(),
            length_px: 6.0,
        };
        let scar = |k: usize| BinaryMask::new(6, 1, Spacing::isotropic(1.0), (0..6).map(|x| x < k).collect()).unwrap();
        assert_eq!(chord_transmurality(&chord, &scar(0)), 0.0);
        assert_eq!(chord_transmurality(&chord, &scar(3)), 50.0);
        assert_eq!(chord_transmurality(&chord, &scar(6)), 100.0);
    }

    #[test]
    fn category_boundaries() {
        assert_eq!(categorize(0.0), Viability::Viable);
        assert_eq!(categorize(25.0), Viability::Viable);
        assert_eq!(categorize(25.4), Viability::LikelyViable);
        assert_eq!(categorize(50.0), Viability::LikelyViable);
        assert_eq!(categorize(50.1), Viability::LikelyNonviable);
        assert_eq!(categorize(75.0), Viability::LikelyNonviable);
        assert_eq!(categorize(75.5), Viability::Nonviable);
        assert_eq!(categorize(100.0), Viability::Nonviable);
    }

    #[test]
    fn quarter_sector_scar() {
        let myo = ring(48, 23.5, 10.0, 16.0, None);
        let scar = ring(48, 23.5, 10.0, 16.0, Some((30.0, 120.0)));
        let r = transmurality_report(&myo, &scar).unwrap();
        assert!(r.counts.nonviable.abs_diff(25) <= 1, "{:?}", r.counts);
        assert!(r.counts.viable.abs_diff(75) <= 1, "{:?}", r.counts);
        assert_eq!(r.counts.total(), r.valid_chords);

        let empty = BinaryMask::new(48, 48, Spacing::isotropic(1.0), vec![false; 48 * 48]).unwrap();
        assert_eq!(transmurality_report(&myo, &empty).unwrap().counts.viable, 100);

        let turned = transmurality_report(&rotate90(&myo), &rotate90(&scar)).unwrap();
        assert_eq!(turned.counts, r.counts);
    }

    #[test]
    fn segment_table_partitions_chords() {
        let myo = ring(48, 23.5, 10.0, 16.0, None);
        let scar = ring(48, 23.5, 10.0, 16.0, Some((0.0, 60.0)));
        let r = transmurality_report(&myo, &scar).unwrap();
        let rows = segment_table(&r, SliceLevel::Basal, 0.0);
        assert_eq!(rows.iter().map(|s| s.segment).collect::<Vec<_>>(), vec![1, 2, 3, 4, 5, 6]);
        assert_eq!(rows.iter().map(|s| s.valid_chords).sum::<usize>(), 100);
        assert!(rows[0].mean_transmurality.unwrap() > 90.0);
        assert_eq!(rows[3].max_transmurality, Some(0.0));
        let apical = segment_table(&r, SliceLevel::Apical, 45.0);
        assert_eq!(apical.iter().map(|s| s.segment).collect::<Vec<_>>(), vec![13, 14, 15, 16]);
        assert!(r.to_csv("c").lines().count() == 101);
    }

    proptest! {
        #[test]
        fn growing_scar_never_lowers_transmurality(start in 0.0f64..360.0, extent in 0.0f64..180.0, grow in 0.0f64..60.0) {
            let myo = ring(40, 19.5, 8.0, 14.0, None);
            let small = ring(40, 19.5, 8.0, 12.0, Some((start, start + extent)));
            let big = ring(40, 19.5, 8.0, 14.0, Some((start, start + extent + grow)));
            let data: Vec<bool> = small.data().iter().zip(big.data()).map(|(a, b)| *a || *b).collect();
            let bigger = BinaryMask::new(40, 40, Spacing::isotropic(1.0), data).unwrap();
            let a = transmurality_report(&myo, &small).unwrap();
            let b = transmurality_report(&myo, &bigger).unwrap();
            for (x, y) in a.chords.iter().zip(&b.chords) {
                prop_assert!(y.transmurality >= x.transmurality);
            }
            prop_assert_eq!(a.counts.total(), a.valid_chords);
        }
    }
}

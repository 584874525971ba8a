//! Overlap, confusion-matrix and Hausdorff metrics over hard masks, and the
//! Pearson correlation used to compare quantification reports.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::grid::{LabelMap, Spacing};

#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    spacing: Spacing,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, spacing: Spacing, data: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput("mask dimensions must be positive".into()));
        }
        if data.len() != width * height {
            return Err(Error::dims("BinaryMask::new", width * height, data.len()));
        }
        Ok(BinaryMask {
            width,
            height,
            spacing,
            data,
        })
    }

    pub fn from_labels(width: usize, height: usize, spacing: Spacing, labels: &[usize], class: usize) -> Result<Self> {
        Self::new(width, height, spacing, labels.iter().map(|&k| k == class).collect())
    }

    pub fn full(width: usize, height: usize, spacing: Spacing) -> Self {
        BinaryMask {
            width,
            height,
            spacing,
            data: vec![true; width * height],
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

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|v| *v)
    }

    fn check(&self, other: &BinaryMask, context: &'static str) -> Result<()> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::dims(
                context,
                format!("{}x{}", self.width, self.height),
                format!("{}x{}", other.width, other.height),
            ));
        }
        Ok(())
    }

    /// Foreground pixels with a 4-neighbour outside the mask; the image
    /// border counts as outside.
    pub fn boundary(&self) -> Vec<(usize, usize)> {
        let (w, h) = (self.width, self.height);
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if !self.get(x, y) {
                    continue;
                }
                let edge = x == 0
                    || y == 0
                    || x + 1 == w
                    || y + 1 == h
                    || !self.get(x - 1, y)
                    || !self.get(x + 1, y)
                    || !self.get(x, y - 1)
                    || !self.get(x, y + 1);
                if edge {
                    out.push((x, y));
                }
            }
        }
        out
    }
}

/// One mask per class from the per-pixel argmax (ties go to the lowest
/// class index).
pub fn harden(lbl: &LabelMap, spacing: Spacing) -> Vec<BinaryMask> {
    let labels = lbl.argmax();
    (0..lbl.classes())
        .map(|k| BinaryMask {
            width: lbl.width(),
            height: lbl.height(),
            spacing,
            data: labels.iter().map(|&c| c == k).collect(),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

/// Confusion counts over the pixels inside `domain`.
pub fn confusion_counts(pred: &BinaryMask, gold: &BinaryMask, domain: &BinaryMask) -> Result<Counts> {
    pred.check(gold, "confusion_counts (pred vs gold)")?;
    pred.check(domain, "confusion_counts (domain)")?;
    let mut c = Counts::default();
    for ((p, g), d) in pred.data.iter().zip(&gold.data).zip(&domain.data) {
        if !d {
            continue;
        }
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// `2TP / (2TP + FP + FN)`; two empty masks score 1.
pub fn dice(c: &Counts) -> f64 {
    ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_).unwrap_or(1.0)
}

pub fn precision(c: &Counts) -> Option<f64> {
    ratio(c.tp, c.tp + c.fp)
}

pub fn sensitivity(c: &Counts) -> Option<f64> {
    ratio(c.tp, c.tp + c.fn_)
}

pub fn specificity(c: &Counts) -> Option<f64> {
    ratio(c.tn, c.tn + c.fp)
}

pub fn npv(c: &Counts) -> Option<f64> {
    ratio(c.tn, c.tn + c.fn_)
}

/// Symmetric Hausdorff distance between the boundary pixel sets, in mm.
/// `None` when either mask is empty.
pub fn hausdorff_mm(pred: &BinaryMask, gold: &BinaryMask) -> Result<Option<f64>> {
    pred.check(gold, "hausdorff_mm")?;
    let (a, b) = (pred.boundary(), gold.boundary());
    if a.is_empty() || b.is_empty() {
        return Ok(None);
    }
    let s = pred.spacing;
    let d2 = |p: (usize, usize), q: (usize, usize)| {
        let dx = (p.0 as f64 - q.0 as f64) * s.x;
        let dy = (p.1 as f64 - q.1 as f64) * s.y;
        dx * dx + dy * dy
    };
    let directed = |from: &[(usize, usize)], to: &[(usize, usize)]| {
        let mut worst: f64 = 0.0;
        for &p in from {
            let mut best = f64::INFINITY;
            for &q in to {
                let d = d2(p, q);
                if d < best {
                    best = d;
                    // Cannot raise the maximum any more.
                    if best <= worst {
                        break;
                    }
                }
            }
            worst = worst.max(best);
        }
        worst
    };
    Ok(Some(directed(&a, &b).max(directed(&b, &a)).sqrt()))
}

/// Sample Pearson correlation and its two-sided p-value from the
/// t-distribution with `n - 2` degrees of freedom. `None` for fewer than 3
/// points or a zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<Option<(f64, f64)>> {
    if x.len() != y.len() {
        return Err(Error::dims("pearson", x.len(), y.len()));
    }
    let n = x.len();
    if n < 3 {
        return Ok(None);
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return Ok(None);
    }
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    let dof = (n - 2) as f64;
    let p = if r.abs() == 1.0 {
        0.0
    } else {
        let t = r * (dof / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, dof).map_err(|e| Error::InvalidInput(e.to_string()))?;
        2.0 * (1.0 - dist.cdf(t.abs()))
    };
    Ok(Some((r, p)))
}

/// Metrics for one class of one case. `None` marks an undefined value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub case: String,
    pub class: String,
    pub dice: f64,
    pub precision: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub npv: Option<f64>,
    pub hausdorff_mm: Option<f64>,
    /// Always "2d": distances are measured within the slice.
    pub hausdorff_mode: String,
    pub counts: Counts,
}

/// Dice, precision, sensitivity and HD over the whole image; specificity
/// and NPV inside `myocardium`, where the remaining myocardium is the
/// negative class.
pub fn class_report(case: &str, class: &str, pred: &BinaryMask, gold: &BinaryMask, myocardium: &BinaryMask) -> Result<MetricsReport> {
    let all = BinaryMask::full(pred.width, pred.height, pred.spacing);
    let c = confusion_counts(pred, gold, &all)?;
    let m = confusion_counts(pred, gold, myocardium)?;
    Ok(MetricsReport {
        case: case.to_string(),
        class: class.to_string(),
        dice: dice(&c),
        precision: precision(&c),
        sensitivity: sensitivity(&c),
        specificity: specificity(&m),
        npv: npv(&m),
        hausdorff_mm: hausdorff_mm(pred, gold)?,
        hausdorff_mode: "2d".into(),
        counts: c,
    })
}

pub const CSV_HEADER: &str = "case,class,dice,precision,sensitivity,specificity,npv,hausdorff_mm";

fn csv_value(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"))
}

impl MetricsReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{},{},{},{},{}",
            self.case,
            self.class,
            self.dice,
            csv_value(self.precision),
            csv_value(self.sensitivity),
            csv_value(self.specificity),
            csv_value(self.npv),
            csv_value(self.hausdorff_mm)
        )
    }
}

pub fn reports_to_csv(reports: &[MetricsReport]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

//! Segmentation metrics: precision at IoU thresholds, overall IoU, mean IoU
//! and per-category mean IoU.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Mask;
use crate::synthdata::Shape;

pub const THRESHOLDS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

/// Pixel counts of one prediction against its ground truth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Overlap {
    pub intersection: u64,
    pub union: u64,
}

impl Overlap {
    pub fn of(pred: &Mask, gt: &Mask) -> Result<Self> {
        if (pred.width, pred.height) != (gt.width, gt.height) {
            return Err(Error::Shape {
                op: "iou",
                lhs: vec![pred.height, pred.width],
                rhs: vec![gt.height, gt.width],
            });
        }
        let (mut intersection, mut union) = (0, 0);
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            let (p, g) = (p != 0, g != 0);
            intersection += u64::from(p && g);
            union += u64::from(p || g);
        }
        Ok(Self {
            intersection,
            union,
        })
    }

    /// IoU, with two empty masks counting as a perfect match.
    pub fn iou(self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }
}

pub fn sample_iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    Ok(Overlap::of(pred, gt)?.iou())
}

/// Running totals over evaluated samples. Accumulators built from disjoint
/// parts of a dataset merge into the same result in any order.
#[derive(Clone, Debug, Default)]
pub struct EvalAccumulator {
    ious: Vec<f64>,
    intersection: u64,
    union: u64,
    per_category: BTreeMap<u8, CategoryTotals>,
}

#[derive(Clone, Debug, Default)]
struct CategoryTotals {
    ious: Vec<f64>,
    intersection: u64,
    union: u64,
}

impl EvalAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ious.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ious.is_empty()
    }

    pub fn add(&mut self, pred: &Mask, gt: &Mask, category: u8) -> Result<f64> {
        let o = Overlap::of(pred, gt)?;
        self.add_overlap(o, category);
        Ok(o.iou())
    }

    pub fn add_overlap(&mut self, o: Overlap, category: u8) {
        let iou = o.iou();
        self.ious.push(iou);
        self.intersection += o.intersection;
        self.union += o.union;
        let cat = self.per_category.entry(category).or_default();
        cat.ious.push(iou);
        cat.intersection += o.intersection;
        cat.union += o.union;
    }

    pub fn merge(&mut self, other: &EvalAccumulator) {
        self.ious.extend_from_slice(&other.ious);
        self.intersection += other.intersection;
        self.union += other.union;
        for (&k, v) in &other.per_category {
            let cat = self.per_category.entry(k).or_default();
            cat.ious.extend_from_slice(&v.ious);
            cat.intersection += v.intersection;
            cat.union += v.union;
        }
    }

    pub fn finalize(&self) -> Result<Report> {
        if self.ious.is_empty() {
            return Err(Error::Usage("no samples were evaluated".into()));
        }
        let n = self.ious.len() as f64;
        let pr = |t: f64| self.ious.iter().filter(|&&v| v > t).count() as f64 / n;
        let per_category = self
            .per_category
            .iter()
            .map(|(&id, c)| {
                let stats = CategoryReport {
                    count: c.ious.len(),
                    miou: mean(&c.ious),
                    oiou: ratio(c.intersection, c.union),
                };
                (category_name(id), stats)
            })
            .collect();
        Ok(Report {
            pr50: pr(THRESHOLDS[0]),
            pr60: pr(THRESHOLDS[1]),
            pr70: pr(THRESHOLDS[2]),
            pr80: pr(THRESHOLDS[3]),
            pr90: pr(THRESHOLDS[4]),
            oiou: ratio(self.intersection, self.union),
            miou: mean(&self.ious),
            per_category,
        })
    }
}

/// Mean summed in ascending order, so the result does not depend on the order
/// samples were added.
fn mean(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.iter().sum::<f64>() / sorted.len() as f64
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

pub fn category_name(id: u8) -> String {
    Shape::from_category(id).map_or_else(|| format!("category{id}"), |s| s.name().to_string())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoryReport {
    pub count: usize,
    pub miou: f64,
    pub oiou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub pr50: f64,
    pub pr60: f64,
    pub pr70: f64,
    pub pr80: f64,
    pub pr90: f64,
    pub oiou: f64,
    pub miou: f64,
    pub per_category: BTreeMap<String, CategoryReport>,
}

impl Report {
    pub fn precisions(&self) -> [f64; 5] {
        [self.pr50, self.pr60, self.pr70, self.pr80, self.pr90]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned plain-text rendering: the overall row, then one row per
    /// category.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let head = [
            "Pr@0.5", "Pr@0.6", "Pr@0.7", "Pr@0.8", "Pr@0.9", "oIoU", "mIoU",
        ];
        for h in head {
            let _ = write!(out, "{h:>8}");
        }
        out.push('\n');
        for v in self.precisions().into_iter().chain([self.oiou, self.miou]) {
            let _ = write!(out, "{:>8.2}", 100.0 * v);
        }
        out.push_str("\n\n");
        let _ = writeln!(
            out,
            "{:<12}{:>8}{:>8}{:>8}",
            "category", "count", "mIoU", "oIoU"
        );
        for (name, c) in &self.per_category {
            let _ = writeln!(
                out,
                "{:<12}{:>8}{:>8.2}{:>8.2}",
                name,
                c.count,
                100.0 * c.miou,
                100.0 * c.oiou
            );
        }
        out
    }
}

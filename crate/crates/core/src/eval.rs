//! Pixel-level recall, weighted precision and F1, with per-event,
//! per-category and macro aggregation.
//!
//! Precision down-weights false alarms by `beta` (default 0.1, i.e. true and
//! false anomalies weighted 1:10):
//!
//! ```text
//! R   = tp / (tp + fn)
//! P_w = tp / (tp + beta * fp)
//! F1  = 2 * P_w * R / (P_w + R)
//! ```
//!
//! All reported values are in points (x100).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::BinaryMap;
use crate::scalar::Scalar;
use crate::scene::Category;

pub const DEFAULT_BETA: f64 = 0.1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl std::ops::Add for Confusion {
    type Output = Confusion;

    fn add(self, o: Confusion) -> Confusion {
        Confusion {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

pub fn confusion(pred: &BinaryMap, gt: &BinaryMap) -> Result<Confusion> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::DimensionMismatch(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    let mut c = Confusion::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Recall, weighted precision and F1, in points.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores<T> {
    pub recall: T,
    pub precision: T,
    pub f1: T,
}

/// Harmonic mean of two rates (any common unit); 0 when both are 0.
pub fn f1_from<T: Scalar>(recall: T, precision: T) -> T {
    let denom = recall + precision;
    if denom == T::zero() {
        T::zero()
    } else {
        T::lit(2.0) * precision * recall / denom
    }
}

pub fn scores<T: Scalar>(c: &Confusion, beta: T) -> Result<Scores<T>> {
    if !(beta > T::zero() && beta.is_finite()) {
        return Err(Error::InvalidParameter {
            field: "beta",
            reason: format!("{beta} must be positive"),
        });
    }
    let tp = T::from_u64(c.tp).expect("count");
    let fp = T::from_u64(c.fp).expect("count");
    let fn_ = T::from_u64(c.fn_).expect("count");
    let ratio = |num: T, den: T| if den == T::zero() { T::zero() } else { num / den };
    let recall = ratio(tp, tp + fn_);
    let precision = ratio(tp, tp + beta * fp);
    let hundred = T::lit(100.0);
    Ok(Scores {
        recall: recall * hundred,
        precision: precision * hundred,
        f1: f1_from(recall, precision) * hundred,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventScore {
    pub event_id: String,
    pub category: Category,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

impl EventScore {
    pub fn new(event_id: impl Into<String>, category: Category, s: Scores<f64>) -> Self {
        Self {
            event_id: event_id.into(),
            category,
            recall: s.recall,
            precision: s.precision,
            f1: s.f1,
        }
    }

    pub fn from_maps(
        event_id: impl Into<String>,
        category: Category,
        pred: &BinaryMap,
        gt: &BinaryMap,
        beta: f64,
    ) -> Result<Self> {
        Ok(Self::new(event_id, category, scores(&confusion(pred, gt)?, beta)?))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryScore {
    pub category: Category,
    pub events: usize,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

/// Each metric averaged independently.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanScores {
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

fn mean_of<'a>(items: impl Iterator<Item = (f64, f64, f64)> + 'a) -> MeanScores {
    let (mut r, mut p, mut f, mut n) = (0.0, 0.0, 0.0, 0usize);
    for (a, b, c) in items {
        r += a;
        p += b;
        f += c;
        n += 1;
    }
    let n = n.max(1) as f64;
    MeanScores {
        recall: r / n,
        precision: p / n,
        f1: f / n,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub events: Vec<EventScore>,
    pub categories: Vec<CategoryScore>,
    /// Mean over category means (the "Average" column).
    pub macro_by_category: MeanScores,
    /// Mean over all events.
    pub macro_by_event: MeanScores,
    #[serde(default)]
    pub config: serde_json::Value,
}

/// Groups events by category. Category values are event means; the overall
/// value is the mean of category values. Metrics are averaged separately,
/// so an averaged F1 is generally not the F1 of averaged R and P.
pub fn aggregate(mut events: Vec<EventScore>, config: serde_json::Value) -> Result<EvalReport> {
    if events.is_empty() {
        return Err(Error::InvalidParameter {
            field: "events",
            reason: "at least one event is required".into(),
        });
    }
    // canonical order makes the floating-point sums independent of input order
    events.sort_by(|a, b| {
        (a.category, &a.event_id)
            .cmp(&(b.category, &b.event_id))
            .then(a.f1.total_cmp(&b.f1))
            .then(a.recall.total_cmp(&b.recall))
            .then(a.precision.total_cmp(&b.precision))
    });
    let mut groups: BTreeMap<Category, Vec<&EventScore>> = BTreeMap::new();
    for e in &events {
        groups.entry(e.category).or_default().push(e);
    }
    let categories: Vec<CategoryScore> = groups
        .iter()
        .map(|(&category, evs)| {
            let m = mean_of(evs.iter().map(|e| (e.recall, e.precision, e.f1)));
            CategoryScore {
                category,
                events: evs.len(),
                recall: m.recall,
                precision: m.precision,
                f1: m.f1,
            }
        })
        .collect();
    let macro_by_category = mean_of(categories.iter().map(|c| (c.recall, c.precision, c.f1)));
    let macro_by_event = mean_of(events.iter().map(|e| (e.recall, e.precision, e.f1)));
    Ok(EvalReport {
        events,
        categories,
        macro_by_category,
        macro_by_event,
        config,
    })
}

/// Aligned text table with one row per labelled report and `R P F1` column
/// groups per category plus the average.
pub fn render_table(rows: &[(String, &EvalReport)]) -> String {
    let mut cats: Vec<Category> = rows
        .iter()
        .flat_map(|(_, r)| r.categories.iter().map(|c| c.category))
        .collect();
    cats.sort();
    cats.dedup();
    let label_w = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(6);
    let group_w = 3 * 8;
    let mut out = String::new();
    let _ = write!(out, "{:label_w$}", "");
    for c in &cats {
        let _ = write!(out, " | {:^group_w$}", c.as_str());
    }
    let _ = writeln!(out, " | {:^group_w$}", "average");
    let _ = write!(out, "{:label_w$}", "");
    for _ in 0..=cats.len() {
        let _ = write!(out, " | {:>7} {:>7} {:>8}", "R", "P", "F1");
    }
    out.push('\n');
    for (label, report) in rows {
        let _ = write!(out, "{label:label_w$}");
        for c in &cats {
            match report.categories.iter().find(|s| s.category == *c) {
                Some(s) => {
                    let _ = write!(out, " | {:>7.2} {:>7.2} {:>8.2}", s.recall, s.precision, s.f1);
                }
                None => {
                    let _ = write!(out, " | {:>7} {:>7} {:>8}", "-", "-", "-");
                }
            }
        }
        let m = report.macro_by_category;
        let _ = writeln!(out, " | {:>7.2} {:>7.2} {:>8.2}", m.recall, m.precision, m.f1);
    }
    out
}

//! ROC analysis, operating points and lesion identification rates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{LesionAnnotation, Lobe};
use crate::tensor::Volume;

/// Heat a lesion must exceed to count as identified.
pub const IDENTIFICATION_THRESHOLD: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Cases with `score >= threshold` are called positive. The first point
    /// uses `+inf` (serialized as `null` in JSON).
    pub threshold: f64,
}

fn class_counts(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::invalid(format!("score {s} is not finite")));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::invalid(format!("label {l} is not 0 or 1")));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("ROC analysis needs both classes"));
    }
    Ok((pos, neg))
}

/// Sweeps the threshold over every distinct score (descending) and
/// integrates the curve with the trapezoidal rule.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<(Vec<RocPoint>, f64)> {
    let (pos, neg) = class_counts(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
            threshold: t,
        });
    }
    let auc = points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum();
    Ok((points, auc))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OperatingPolicy {
    /// Positive iff the typical-class likelihood is above 0.5, as the
    /// classifier's own decision rule.
    #[serde(rename = "fixed_0.5")]
    Fixed,
    /// Maximizes `sensitivity + specificity - 1` over ROC thresholds.
    #[serde(rename = "youden")]
    Youden,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub policy: OperatingPolicy,
    pub sensitivity: f64,
    pub specificity: f64,
    pub threshold: f64,
}

pub fn sens_spec(scores: &[f64], labels: &[u8], policy: OperatingPolicy) -> Result<OperatingPoint> {
    let (pos, neg) = class_counts(scores, labels)?;
    match policy {
        OperatingPolicy::Fixed => {
            let tp = scores.iter().zip(labels).filter(|(&s, &l)| l == 1 && s > 0.5).count();
            let tn = scores.iter().zip(labels).filter(|(&s, &l)| l == 0 && s <= 0.5).count();
            Ok(OperatingPoint {
                policy,
                sensitivity: tp as f64 / pos as f64,
                specificity: tn as f64 / neg as f64,
                threshold: 0.5,
            })
        }
        OperatingPolicy::Youden => {
            let (points, _) = roc_auc(scores, labels)?;
            // Points run from high to low thresholds, so `>=` keeps the lowest on ties.
            let mut best = points[0];
            for p in &points[1..] {
                if p.tpr - p.fpr >= best.tpr - best.fpr {
                    best = *p;
                }
            }
            Ok(OperatingPoint {
                policy,
                sensitivity: best.tpr,
                specificity: 1.0 - best.fpr,
                threshold: best.threshold,
            })
        }
    }
}

/// `identified / total`; the rate is `None` when nothing was counted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RateCount {
    pub identified: usize,
    pub total: usize,
    pub rate: Option<f64>,
}

impl RateCount {
    pub fn new(identified: usize, total: usize) -> Self {
        Self {
            identified,
            total,
            rate: (total > 0).then(|| identified as f64 / total as f64),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentificationReport {
    pub per_lobe: BTreeMap<Lobe, RateCount>,
    pub case_level: RateCount,
}

/// Annotated lesions of one case and its volume-scale heatmap.
pub struct CaseLocalization<'a> {
    pub case_id: &'a str,
    pub lesions: &'a [LesionAnnotation],
    pub heatmap: Option<&'a Volume>,
}

/// Maximum heat over a lesion's ellipsoid support (0 for an empty support).
pub fn lesion_peak(heatmap: &Volume, lesion: &LesionAnnotation) -> f64 {
    lesion
        .support(heatmap.dims())
        .into_iter()
        .map(|(x, y, z)| heatmap.get(x, y, z))
        .fold(0.0, f64::max)
}

/// A lesion is identified when the peak heat inside it exceeds `threshold`;
/// a case when any of its lesions is. Cases without lesions are skipped.
pub fn identification_rate(cases: &[CaseLocalization], threshold: f64) -> Result<IdentificationReport> {
    let mut lobe_counts: BTreeMap<Lobe, (usize, usize)> = Lobe::ALL.iter().map(|&l| (l, (0, 0))).collect();
    let (mut case_hits, mut case_total) = (0, 0);
    for case in cases {
        if case.lesions.is_empty() {
            continue;
        }
        let heat = case
            .heatmap
            .ok_or_else(|| Error::invalid(format!("no heatmap for annotated case {}", case.case_id)))?;
        case_total += 1;
        let mut any = false;
        for lesion in case.lesions {
            let hit = lesion_peak(heat, lesion) > threshold;
            let c = lobe_counts.get_mut(&lesion.lobe).expect("all lobes present");
            c.1 += 1;
            if hit {
                c.0 += 1;
                any = true;
            }
        }
        if any {
            case_hits += 1;
        }
    }
    Ok(IdentificationReport {
        per_lobe: lobe_counts
            .into_iter()
            .map(|(l, (hit, total))| (l, RateCount::new(hit, total)))
            .collect(),
        case_level: RateCount::new(case_hits, case_total),
    })
}

/// A rate as a percentage with three significant digits (`0.0952` → `9.52`).
pub fn format_percent(rate: f64) -> String {
    let v = rate * 100.0;
    if v == 0.0 || !v.is_finite() {
        return format!("{v:.2}");
    }
    let magnitude = v.abs().log10().floor() as i32;
    let decimals = (2 - magnitude).max(0) as usize;
    format!("{v:.decimals$}")
}

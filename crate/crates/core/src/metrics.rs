//! First-stage evaluation against synthetic ground truth.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::GroundTruth;
use crate::painter::Instance3DPrior;
use crate::scene::{AugmentedPoint, Box3D};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    /// `correct / painted`, 1.0 when nothing was painted.
    pub value: f64,
    pub correct: usize,
    pub painted: usize,
    /// Set when `painted == 0` and `value` is 1.0 by convention.
    pub vacuous: bool,
}

/// Ground-truth class per point (0 for background).
pub fn gt_labels(gt: &GroundTruth) -> Vec<u32> {
    gt.point_box
        .iter()
        .map(|&b| if b < 0 { 0 } else { gt.boxes[b as usize].label })
        .collect()
}

/// Painted points whose label matches the truth, over painted points.
pub fn label_accuracy(points: &[AugmentedPoint], gt_per_point: &[u32]) -> Result<Accuracy> {
    label_accuracy_where(points, gt_per_point, |_| true)
}

/// [`label_accuracy`] restricted to points where `keep(i)` holds.
pub fn label_accuracy_where(
    points: &[AugmentedPoint],
    gt_per_point: &[u32],
    keep: impl Fn(usize) -> bool,
) -> Result<Accuracy> {
    if points.len() != gt_per_point.len() {
        return Err(Error::invalid(format!(
            "{} points but {} ground-truth labels",
            points.len(),
            gt_per_point.len()
        )));
    }
    let (mut correct, mut painted) = (0, 0);
    for (i, (p, &g)) in points.iter().zip(gt_per_point).enumerate() {
        if p.is_painted() && keep(i) {
            painted += 1;
            correct += (p.s == g) as usize;
        }
    }
    Ok(Accuracy {
        value: if painted == 0 { 1.0 } else { correct as f64 / painted as f64 },
        correct,
        painted,
        vacuous: painted == 0,
    })
}

/// Box owning a strict majority of the prior's members, if any.
pub fn match_prior(prior: &Instance3DPrior, point_box: &[i32]) -> Option<usize> {
    let mut counts = std::collections::BTreeMap::new();
    for &m in &prior.members {
        if let Some(&b) = point_box.get(m).filter(|&&b| b >= 0) {
            *counts.entry(b as usize).or_insert(0usize) += 1;
        }
    }
    let (&b, &c) = counts.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))?;
    (2 * c > prior.members.len()).then_some(b)
}

/// Mean distance from each matched prior's center to its box center;
/// `None` when no prior matches.
pub fn center_error(priors: &[Instance3DPrior], gt_boxes: &[Box3D], point_box: &[i32]) -> Option<f64> {
    center_error_to(priors, point_box, |b| gt_boxes.get(b).map(|g| g.center))
}

/// [`center_error`] against arbitrary per-box reference points.
pub fn center_error_to(
    priors: &[Instance3DPrior],
    point_box: &[i32],
    reference: impl Fn(usize) -> Option<[f64; 3]>,
) -> Option<f64> {
    let errors: Vec<f64> = priors
        .iter()
        .filter_map(|p| {
            let r = reference(match_prior(p, point_box)?)?;
            let d: f64 = (0..3).map(|k| (p.center[k] - r[k]).powi(2)).sum();
            Some(d.sqrt())
        })
        .collect();
    (!errors.is_empty()).then(|| errors.iter().sum::<f64>() / errors.len() as f64)
}

/// Fraction of prior members that belong to their prior's dominant source
/// (a box, or background as one class). `None` without members.
pub fn cluster_purity(priors: &[Instance3DPrior], point_box: &[i32]) -> Option<f64> {
    let (mut dominant, mut total) = (0usize, 0usize);
    for p in priors {
        let mut counts = std::collections::BTreeMap::new();
        for &m in &p.members {
            *counts.entry(point_box.get(m).copied().unwrap_or(-1).max(-1)).or_insert(0usize) += 1;
        }
        dominant += counts.values().copied().max().unwrap_or(0);
        total += p.members.len();
    }
    (total > 0).then(|| dominant as f64 / total as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub label_accuracy: Accuracy,
    /// Accuracy over points some camera sees unobstructed.
    pub visible_label_accuracy: Accuracy,
    pub center_mae: Option<f64>,
    pub cluster_purity: Option<f64>,
    pub priors: usize,
    pub painted: usize,
    pub unpainted: usize,
    pub evicted: usize,
}

pub fn evaluate(
    points: &[AugmentedPoint],
    priors: &[Instance3DPrior],
    evicted: usize,
    gt: &GroundTruth,
) -> Result<Metrics> {
    if gt.point_box.len() != points.len() || gt.visible.len() != points.len() {
        return Err(Error::invalid(format!(
            "ground truth covers {} points, cloud has {}",
            gt.point_box.len(),
            points.len()
        )));
    }
    let labels = gt_labels(gt);
    let painted = points.iter().filter(|p| p.is_painted()).count();
    Ok(Metrics {
        label_accuracy: label_accuracy(points, &labels)?,
        visible_label_accuracy: label_accuracy_where(points, &labels, |i| gt.visible[i])?,
        center_mae: center_error(priors, &gt.boxes, &gt.point_box),
        cluster_purity: cluster_purity(priors, &gt.point_box),
        priors: priors.len(),
        painted,
        unpainted: points.len() - painted,
        evicted,
    })
}

//! Detection-to-truth matching and threshold-free OOD metrics.
//!
//! ID is the positive class for FPR-95, AUROC and AUPR-S; OOD is positive
//! for AUPR-E. Scores are OOD-ness throughout and flipped internally where
//! a metric wants ID-ness. All metrics are returned as percentages.

use serde::{Deserialize, Serialize};

use crate::detector::Detection;
use crate::error::{Error, Result};
use crate::geometry::bev_center_distance;
use crate::scene::Annotation;

/// Detections farther than this from every free truth stay unmatched.
pub const MATCH_DISTANCE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Match {
    pub detection: usize,
    pub annotation: usize,
    pub truth_is_ood: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Matching {
    pub matches: Vec<Match>,
    pub unmatched_detections: usize,
}

/// Greedy matching in order of decreasing detector score (ties by index):
/// each detection takes the nearest free annotation closer than 0.5 m.
pub fn match_detections(detections: &[Detection], annotations: &[Annotation]) -> Matching {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .score
            .total_cmp(&detections[a].score)
            .then(a.cmp(&b))
    });
    let mut taken = vec![false; annotations.len()];
    let mut out = Matching::default();
    for d in order {
        let mut best: Option<(f64, usize)> = None;
        for (j, ann) in annotations.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let dist = bev_center_distance(&detections[d].bbox, &ann.bbox);
            if dist < MATCH_DISTANCE && best.is_none_or(|(bd, _)| dist < bd) {
                best = Some((dist, j));
            }
        }
        match best {
            Some((_, j)) => {
                taken[j] = true;
                out.matches.push(Match {
                    detection: d,
                    annotation: j,
                    truth_is_ood: annotations[j].is_ood,
                });
            }
            None => out.unmatched_detections += 1,
        }
    }
    out
}

/// One scored, matched detection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub ood_ness: f64,
    pub is_ood: bool,
}

impl Sample {
    pub fn new(ood_ness: f64, is_ood: bool) -> Self {
        Self { ood_ness, is_ood }
    }
}

fn class_counts(samples: &[Sample]) -> (usize, usize) {
    let n_ood = samples.iter().filter(|s| s.is_ood).count();
    (samples.len() - n_ood, n_ood)
}

fn require_both(samples: &[Sample], metric: &str) -> Result<(usize, usize)> {
    let (n_id, n_ood) = class_counts(samples);
    if n_id == 0 || n_ood == 0 {
        return Err(Error::UndefinedMetric(format!(
            "{metric} needs ID and OOD samples (have {n_id} ID, {n_ood} OOD)"
        )));
    }
    Ok((n_id, n_ood))
}

/// Cumulative `(positives, negatives)` after each block of tied keys, with
/// keys visited in decreasing order.
fn tie_blocks(samples: &[Sample], key: impl Fn(&Sample) -> f64, positive: impl Fn(&Sample) -> bool) -> Vec<(usize, usize)> {
    let mut keyed: Vec<(f64, bool)> = samples.iter().map(|s| (key(s), positive(s))).collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut out = Vec::new();
    let (mut pos, mut neg) = (0, 0);
    for (i, (k, p)) in keyed.iter().enumerate() {
        if *p {
            pos += 1;
        } else {
            neg += 1;
        }
        if i + 1 == keyed.len() || keyed[i + 1].0 != *k {
            out.push((pos, neg));
        }
    }
    out
}

/// FPR on OOD at the largest ID-ness threshold that keeps TPR ≥ 95 %.
/// Only attainable operating points are used.
pub fn fpr_at_95_tpr(samples: &[Sample]) -> Result<f64> {
    let (n_id, n_ood) = require_both(samples, "FPR-95")?;
    for (tp, fp) in tie_blocks(samples, |s| -s.ood_ness, |s| !s.is_ood) {
        if 100 * tp >= 95 * n_id {
            return Ok(100.0 * fp as f64 / n_ood as f64);
        }
    }
    unreachable!("the final block admits every ID sample")
}

/// Tie-aware rank statistic `P(ID-ness_ID > ID-ness_OOD) + ½ P(=)`.
pub fn auroc(samples: &[Sample]) -> Result<f64> {
    let (n_id, n_ood) = require_both(samples, "AUROC")?;
    // Walk blocks from most ID-like down; each ID in a block beats every OOD
    // in later blocks and ties with the OODs in its own block.
    let blocks = tie_blocks(samples, |s| -s.ood_ness, |s| !s.is_ood);
    let mut twice_wins: u128 = 0;
    let (mut prev_id, mut prev_ood) = (0usize, 0usize);
    for (id, ood) in blocks {
        let (b_id, b_ood) = (id - prev_id, ood - prev_ood);
        let below = n_ood - ood;
        twice_wins += (b_id as u128) * (2 * below + b_ood) as u128;
        prev_id = id;
        prev_ood = ood;
    }
    Ok(100.0 * twice_wins as f64 / (2.0 * n_id as f64 * n_ood as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Positive {
    Id,
    Ood,
}

/// Step average precision `Σ (R_k − R_{k−1}) P_k` over tie blocks.
pub fn aupr(samples: &[Sample], positive: Positive) -> Result<f64> {
    let is_pos = |s: &Sample| s.is_ood == (positive == Positive::Ood);
    let n_pos = samples.iter().filter(|s| is_pos(s)).count();
    if n_pos == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUPR with {positive:?} positive needs at least one positive sample"
        )));
    }
    let sign = if positive == Positive::Ood { 1.0 } else { -1.0 };
    let mut ap = 0.0;
    let mut prev_tp = 0;
    for (tp, fp) in tie_blocks(samples, |s| sign * s.ood_ness, is_pos) {
        if tp > prev_tp {
            ap += (tp - prev_tp) as f64 / n_pos as f64 * (tp as f64 / (tp + fp) as f64);
        }
        prev_tp = tp;
    }
    Ok(100.0 * ap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub fpr95: f64,
    pub auroc: f64,
    pub aupr_s: f64,
    pub aupr_e: f64,
    pub n_id: usize,
    pub n_ood: usize,
    pub n_unmatched: usize,
}

pub fn evaluate_method(method: &str, samples: &[Sample], n_unmatched: usize) -> Result<EvalReport> {
    if let Some(s) = samples.iter().find(|s| !s.ood_ness.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "{method} produced a non-finite score {}",
            s.ood_ness
        )));
    }
    let (n_id, n_ood) = class_counts(samples);
    Ok(EvalReport {
        method: method.to_string(),
        fpr95: fpr_at_95_tpr(samples)?,
        auroc: auroc(samples)?,
        aupr_s: aupr(samples, Positive::Id)?,
        aupr_e: aupr(samples, Positive::Ood)?,
        n_id,
        n_ood,
        n_unmatched,
    })
}

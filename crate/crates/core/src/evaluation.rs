//! Frame-level AUROC.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::ScoreSeries;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auroc: f64,
    pub num_frames: usize,
    pub num_positive: usize,
    /// AUROC of every clip that contains both classes.
    pub per_clip_auroc: BTreeMap<String, f64>,
}

fn check(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite anomaly score".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUROC needs both classes, got {pos} positive and {neg} negative frames"
        )));
    }
    Ok((pos, neg))
}

/// Rank-based (Mann-Whitney) AUROC; tied scores share their average rank.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their mean.
        let avg = (i + j) as f64 / 2.0 + 1.0;
        let positives = order[i..=j].iter().filter(|&&k| labels[k] == 1).count();
        rank_sum += avg * positives as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// All-pairs reference: mean over (positive, negative) pairs of 1, ½ or 0.
pub fn auroc_oracle(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check(scores, labels)?;
    let mut wins = 0.0;
    for (&si, _) in scores.iter().zip(labels).filter(|(_, &l)| l == 1) {
        for (&sj, _) in scores.iter().zip(labels).filter(|(_, &l)| l == 0) {
            wins += if si > sj {
                1.0
            } else if si == sj {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(wins / (pos as f64 * neg as f64))
}

/// Concatenates anomaly scores across clips and computes the overall AUROC.
pub fn evaluate_dataset(series: &[ScoreSeries]) -> Result<EvalReport> {
    if series.is_empty() {
        return Err(Error::UndefinedMetric("no score series to evaluate".into()));
    }
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let mut per_clip_auroc = BTreeMap::new();
    for s in series {
        let l = s.labels.as_ref().ok_or_else(|| {
            Error::UndefinedMetric(format!("clip `{}` has no labels", s.clip_id))
        })?;
        if l.len() != s.anomaly.len() {
            return Err(Error::shape(format!(
                "clip `{}`: {} labels for {} scores",
                s.clip_id,
                l.len(),
                s.anomaly.len()
            )));
        }
        scores.extend_from_slice(&s.anomaly);
        labels.extend_from_slice(l);
        if l.contains(&0) && l.contains(&1) {
            per_clip_auroc.insert(s.clip_id.clone(), auroc(&s.anomaly, l)?);
        }
    }
    Ok(EvalReport {
        auroc: auroc(&scores, &labels)?,
        num_frames: scores.len(),
        num_positive: labels.iter().filter(|&&l| l == 1).count(),
        per_clip_auroc,
    })
}

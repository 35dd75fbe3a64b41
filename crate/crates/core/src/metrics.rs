//! Threshold-free detection metrics: AUC-ROC, AUC-PR (average precision),
//! range-buffered R-AUC and VUS.
//!
//! The range variants replace binary labels with soft targets: 1 inside an
//! anomalous segment, `1 − d/(ℓ+1)` at distance `d ≤ ℓ` outside it (taking
//! the largest value where buffers overlap), 0 elsewhere. Each point then
//! carries positive weight `t` and negative weight `1 − t`, and the curves
//! are computed on those weights.

use serde::{Deserialize, Serialize};

use crate::error::{Result, StarError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub auc_roc: f64,
    pub auc_pr: f64,
    pub r_auc_roc: f64,
    pub r_auc_pr: f64,
    pub vus_roc: f64,
    pub vus_pr: f64,
    pub buffer_l: usize,
    pub max_buffer_l: usize,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str =
        "auc_roc,auc_pr,r_auc_roc,r_auc_pr,vus_roc,vus_pr,buffer_l,max_buffer_l";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.auc_roc,
            self.auc_pr,
            self.r_auc_roc,
            self.r_auc_pr,
            self.vus_roc,
            self.vus_pr,
            self.buffer_l,
            self.max_buffer_l
        )
    }
}

fn check(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(StarError::Input(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(StarError::Input(format!("score at {i} is not finite")));
    }
    if let Some(i) = labels.iter().position(|&l| l > 1) {
        return Err(StarError::Input(format!("label at {i} is not 0/1")));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    if pos == 0 || pos == labels.len() {
        return Err(StarError::UndefinedMetric(
            "labels contain a single class".into(),
        ));
    }
    Ok(())
}

/// Indices sorted by descending score, split into blocks of equal score.
fn tie_blocks(scores: &[f64]) -> (Vec<usize>, Vec<(usize, usize)>) {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut blocks = Vec::new();
    let mut start = 0;
    for i in 1..=order.len() {
        if i == order.len() || scores[order[i]] != scores[order[start]] {
            blocks.push((start, i));
            start = i;
        }
    }
    (order, blocks)
}

/// Weighted Mann–Whitney statistic `Σ_ij p_i n_j [s_i > s_j] + ½[s_i = s_j]`
/// normalized by `Σp · Σn`.
pub fn weighted_auc_roc(scores: &[f64], pos: &[f64], neg: &[f64]) -> Result<f64> {
    let (p_tot, n_tot): (f64, f64) = (pos.iter().sum(), neg.iter().sum());
    if !(p_tot > 0.0) || !(n_tot > 0.0) {
        return Err(StarError::UndefinedMetric(
            "positive or negative weight is zero".into(),
        ));
    }
    let (order, blocks) = tie_blocks(scores);
    // sweeping from the top, `n_above` is negative weight with a higher score
    let mut n_above = 0.0;
    let mut acc = 0.0;
    for &(a, b) in &blocks {
        let (bp, bn): (f64, f64) = order[a..b]
            .iter()
            .fold((0.0, 0.0), |(x, y), &i| (x + pos[i], y + neg[i]));
        acc += bp * (n_tot - n_above - bn) + 0.5 * bp * bn;
        n_above += bn;
    }
    Ok(acc / (p_tot * n_tot))
}

/// Average precision on weights: tied scores enter the sweep as one block.
pub fn weighted_average_precision(scores: &[f64], pos: &[f64], neg: &[f64]) -> Result<f64> {
    let p_tot: f64 = pos.iter().sum();
    if !(p_tot > 0.0) {
        return Err(StarError::UndefinedMetric("no positive weight".into()));
    }
    let (order, blocks) = tie_blocks(scores);
    let (mut tp, mut fp, mut ap) = (0.0, 0.0, 0.0);
    for &(a, b) in &blocks {
        let (bp, bn): (f64, f64) = order[a..b]
            .iter()
            .fold((0.0, 0.0), |(x, y), &i| (x + pos[i], y + neg[i]));
        tp += bp;
        fp += bn;
        if bp > 0.0 {
            ap += (bp / p_tot) * (tp / (tp + fp));
        }
    }
    Ok(ap)
}

fn hard_weights(labels: &[u8]) -> (Vec<f64>, Vec<f64>) {
    (
        labels.iter().map(|&l| l as f64).collect(),
        labels.iter().map(|&l| 1.0 - l as f64).collect(),
    )
}

pub fn auc_roc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check(scores, labels)?;
    let (p, n) = hard_weights(labels);
    weighted_auc_roc(scores, &p, &n)
}

pub fn auc_pr(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check(scores, labels)?;
    let (p, n) = hard_weights(labels);
    weighted_average_precision(scores, &p, &n)
}

/// Soft targets with a linear buffer of width `buffer_l` around every segment.
pub fn soft_targets(labels: &[u8], buffer_l: usize) -> Vec<f64> {
    let t = labels.len();
    let mut out: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
    if buffer_l == 0 {
        return out;
    }
    // distance to the nearest anomalous point, from both sides
    let mut dist = vec![usize::MAX; t];
    let mut last = None;
    for i in 0..t {
        if labels[i] == 1 {
            last = Some(i);
        }
        if let Some(j) = last {
            dist[i] = i - j;
        }
    }
    last = None;
    for i in (0..t).rev() {
        if labels[i] == 1 {
            last = Some(i);
        }
        if let Some(j) = last {
            dist[i] = dist[i].min(j - i);
        }
    }
    for i in 0..t {
        if labels[i] == 0 && dist[i] <= buffer_l {
            out[i] = 1.0 - dist[i] as f64 / (buffer_l + 1) as f64;
        }
    }
    out
}

/// `(r_auc_roc, r_auc_pr)` against targets buffered by `buffer_l` points.
pub fn r_auc(scores: &[f64], labels: &[u8], buffer_l: usize) -> Result<(f64, f64)> {
    check(scores, labels)?;
    let pos = soft_targets(labels, buffer_l);
    let neg: Vec<f64> = pos.iter().map(|t| 1.0 - t).collect();
    Ok((
        weighted_auc_roc(scores, &pos, &neg)?,
        weighted_average_precision(scores, &pos, &neg)?,
    ))
}

/// Mean of the buffered R-AUC values over `ℓ = 0..=max_buffer_l`.
pub fn vus(scores: &[f64], labels: &[u8], max_buffer_l: usize) -> Result<(f64, f64)> {
    check(scores, labels)?;
    let (mut roc, mut pr) = (0.0, 0.0);
    for l in 0..=max_buffer_l {
        let (a, b) = r_auc(scores, labels, l)?;
        roc += a;
        pr += b;
    }
    let n = (max_buffer_l + 1) as f64;
    Ok((roc / n, pr / n))
}

pub fn evaluate(
    scores: &[f64],
    labels: &[u8],
    buffer_l: usize,
    max_buffer_l: usize,
) -> Result<MetricReport> {
    let (r_auc_roc, r_auc_pr) = r_auc(scores, labels, buffer_l)?;
    let (vus_roc, vus_pr) = vus(scores, labels, max_buffer_l)?;
    Ok(MetricReport {
        auc_roc: auc_roc(scores, labels)?,
        auc_pr: auc_pr(scores, labels)?,
        r_auc_roc,
        r_auc_pr,
        vus_roc,
        vus_pr,
        buffer_l,
        max_buffer_l,
    })
}

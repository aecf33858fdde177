//! Ranking and thresholded metrics for binary detectors.
//!
//! Labels are `0.0` (real) / `1.0` (synthetic); higher scores mean "more
//! synthetic". A sample is predicted synthetic when `score >= threshold`.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::{EmbeddingRecord, REAL};
use crate::error::{Error, Result};
use crate::interpret::csv_field;

fn is_pos(label: f64) -> bool {
    label > 0.5
}

fn check_inputs(scores: &[f64], labels: &[f64]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::dims("label count", scores.len(), labels.len()));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite {
            what: "scores".into(),
            row: i,
            col: 0,
        });
    }
    let pos = labels.iter().filter(|&&y| is_pos(y)).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass(labels.len()));
    }
    Ok((pos, neg))
}

fn order_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Non-interpolated average precision: `sum_k (R_k - R_{k-1}) P_k` over
/// descending score cut-offs, where tied scores enter a cut-off together.
pub fn average_precision(scores: &[f64], labels: &[f64]) -> Result<f64> {
    let (pos, _) = check_inputs(scores, labels)?;
    let order = order_desc(scores);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let mut group_tp = 0usize;
        while i < order.len() && scores[order[i]] == s {
            if is_pos(labels[order[i]]) {
                group_tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        tp += group_tp;
        ap += (group_tp as f64 / pos as f64) * (tp as f64 / (tp + fp) as f64);
    }
    Ok(ap)
}

/// Mann-Whitney AUC: `P(s+ > s-) + P(s+ == s-) / 2`, via mid-ranks.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    let (pos, neg) = check_inputs(scores, labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        // ranks i+1 ..= j share the mid-rank
        let mid = (i + 1 + j) as f64 / 2.0;
        let group_pos = idx[i..j].iter().filter(|&&t| is_pos(labels[t])).count();
        rank_sum += mid * group_pos as f64;
        i = j;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

pub fn accuracy(scores: &[f64], labels: &[f64], threshold: f64) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dims("label count", scores.len(), labels.len()));
    }
    if scores.is_empty() {
        return Err(Error::Empty("score list".into()));
    }
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &y)| (s >= threshold) == is_pos(y))
        .count();
    Ok(correct as f64 / scores.len() as f64)
}

pub fn balanced_accuracy_from_counts(tp: usize, tn: usize, pos: usize, neg: usize) -> f64 {
    0.5 * (tp as f64 / pos as f64 + tn as f64 / neg as f64)
}

/// Threshold maximizing balanced accuracy `(TPR + TNR) / 2`.
///
/// Candidates are the smallest score (everything positive), the midpoints
/// between consecutive distinct scores, and `+inf` (everything negative).
/// Ties resolve to the smallest threshold.
pub fn optimal_balanced_threshold(scores: &[f64], labels: &[f64]) -> Result<(f64, f64)> {
    let (pos, neg) = check_inputs(scores, labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Sweep upward; at each distinct value v, everything below v is negative.
    let mut best_t = scores[idx[0]];
    let mut best_ba = balanced_accuracy_from_counts(pos, 0, pos, neg);
    let (mut pos_below, mut neg_below) = (0usize, 0usize);
    let mut i = 0;
    while i < idx.len() {
        let v = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == v {
            if is_pos(labels[idx[i]]) {
                pos_below += 1;
            } else {
                neg_below += 1;
            }
            i += 1;
        }
        let t = if i < idx.len() {
            midpoint(v, scores[idx[i]])
        } else {
            f64::INFINITY
        };
        let ba = balanced_accuracy_from_counts(pos - pos_below, neg_below, pos, neg);
        if ba > best_ba {
            best_ba = ba;
            best_t = t;
        }
    }
    Ok((best_t, best_ba))
}

/// Midpoint of `lo < hi` that still separates them under `>=`.
pub fn midpoint(lo: f64, hi: f64) -> f64 {
    let m = lo + (hi - lo) / 2.0;
    if m > lo && m <= hi {
        m
    } else {
        hi
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorRow {
    pub generator: String,
    pub accuracy: f64,
    pub ap: f64,
    pub n_real: usize,
    pub n_synthetic: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<GeneratorRow>,
    pub map: f64,
    pub threshold: f64,
    pub n_real: usize,
    pub n_synthetic: usize,
}

impl EvalReport {
    /// `generator,ACC,AP` rows followed by a `mAP` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("generator,ACC,AP\n");
        for r in &self.rows {
            writeln!(out, "{},{:.6},{:.6}", csv_field(&r.generator), r.accuracy, r.ap).unwrap();
        }
        let mean_acc = self.rows.iter().map(|r| r.accuracy).sum::<f64>() / self.rows.len() as f64;
        writeln!(out, "mAP,{:.6},{:.6}", mean_acc, self.map).unwrap();
        out
    }
}

/// AP and accuracy per synthetic generator, each on that generator's
/// records plus every real record. `generators` defaults to every
/// synthetic tag present, in order of first appearance.
pub fn evaluate_per_generator(
    scores: &[f64],
    records: &[&EmbeddingRecord],
    threshold: f64,
    generators: Option<&[String]>,
) -> Result<EvalReport> {
    if scores.len() != records.len() {
        return Err(Error::dims("score count", records.len(), scores.len()));
    }
    let gens: Vec<String> = match generators {
        Some(g) => g.to_vec(),
        None => {
            let mut out: Vec<String> = Vec::new();
            for r in records {
                if r.generator != REAL && !out.contains(&r.generator) {
                    out.push(r.generator.clone());
                }
            }
            out
        }
    };
    if gens.is_empty() {
        return Err(Error::Empty("synthetic generator set".into()));
    }
    let real: Vec<usize> = (0..records.len()).filter(|&i| records[i].generator == REAL).collect();
    let mut rows = Vec::with_capacity(gens.len());
    for g in &gens {
        let fake: Vec<usize> = (0..records.len()).filter(|&i| &records[i].generator == g).collect();
        if fake.is_empty() {
            return Err(Error::Empty(format!("test records for generator {g:?}")));
        }
        let subset: Vec<usize> = real.iter().chain(&fake).copied().collect();
        let s: Vec<f64> = subset.iter().map(|&i| scores[i]).collect();
        let y: Vec<f64> = subset.iter().map(|&i| records[i].label.as_f64()).collect();
        rows.push(GeneratorRow {
            generator: g.clone(),
            accuracy: accuracy(&s, &y, threshold)?,
            ap: average_precision(&s, &y)?,
            n_real: real.len(),
            n_synthetic: fake.len(),
        });
    }
    let map = rows.iter().map(|r| r.ap).sum::<f64>() / rows.len() as f64;
    Ok(EvalReport {
        rows,
        map,
        threshold,
        n_real: real.len(),
        n_synthetic: records.len() - real.len(),
    })
}

/// Total order used to break score ties by position.
pub(crate) fn cmp_desc_then_index(scores: &[f64], a: usize, b: usize) -> Ordering {
    scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

//! Explaining trained detectors: per-dimension logit contributions, learned
//! directions matched against text vocabularies, concept statistics, and the
//! samples that most strongly activate a direction.

use std::fmt::Write as _;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::concept::{concept_forward, ConceptModel, MaskMode, ACTIVATION_THRESHOLD};
use crate::dataset::{EmbeddingDataset, Vocabulary, VocabularyKind};
use crate::error::{Error, Result};
use crate::linear_head::{HeadMode, LinearHeadModel};
use crate::metrics::{self, cmp_desc_then_index};
use crate::ops::{self, normalize_rows};

/// Directions with a norm below this after projection are rejected.
pub const DIRECTION_NORM_FLOOR: f64 = 1e-12;

/// `C[i][j] = activations[i][j] * W2[j]`; rows sum to the logits.
pub fn logit_contributions(model: &LinearHeadModel, activations: &Array2<f64>) -> Result<Array2<f64>> {
    if model.mode != HeadMode::OrthogonalHead {
        return Err(Error::ModeMismatch(
            "logit contributions need an orthogonal_head model".into(),
        ));
    }
    if activations.ncols() != model.w2.len() {
        return Err(Error::dims("activation width", model.w2.len(), activations.ncols()));
    }
    Ok(activations * &model.w2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContributionReport {
    pub contributions: Array2<f64>,
    pub mu_synthetic: Array1<f64>,
    pub mu_real: Array1<f64>,
    pub delta_mu: Array1<f64>,
}

/// Class-conditional mean contributions and their difference
/// (synthetic minus real).
pub fn class_contribution_diff(
    contributions: &Array2<f64>,
    labels: &[f64],
) -> Result<(Array1<f64>, Array1<f64>, Array1<f64>)> {
    if labels.len() != contributions.nrows() {
        return Err(Error::dims("label count", contributions.nrows(), labels.len()));
    }
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] > 0.5).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] <= 0.5).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::SingleClass(labels.len()));
    }
    let mean = |idx: &[usize]| {
        contributions
            .select(Axis(0), idx)
            .mean_axis(Axis(0))
            .expect("non-empty")
    };
    let mu1 = mean(&pos);
    let mu0 = mean(&neg);
    let delta = &mu1 - &mu0;
    Ok((mu1, mu0, delta))
}

pub fn contribution_report(
    model: &LinearHeadModel,
    inputs: &Array2<f64>,
    labels: &[f64],
) -> Result<ContributionReport> {
    let fwd = model.forward(inputs)?;
    let contributions = logit_contributions(model, &fwd.activations)?;
    let (mu_synthetic, mu_real, delta_mu) = class_contribution_diff(&contributions, labels)?;
    Ok(ContributionReport {
        contributions,
        mu_synthetic,
        mu_real,
        delta_mu,
    })
}

impl ContributionReport {
    /// `dimension,mu_synthetic,mu_real,delta_mu`
    pub fn delta_mu_csv(&self) -> String {
        let mut out = String::from("dimension,mu_synthetic,mu_real,delta_mu\n");
        for j in 0..self.delta_mu.len() {
            writeln!(
                out,
                "{j},{},{},{}",
                self.mu_synthetic[j], self.mu_real[j], self.delta_mu[j]
            )
            .unwrap();
        }
        out
    }
}

/// Column `j` is `normalize(projection^T W1[:, j])`, a `p x k` matrix.
pub fn project_directions(w1: &Array2<f64>, projection: &Array2<f64>) -> Result<Array2<f64>> {
    if w1.nrows() != projection.nrows() {
        return Err(Error::dims("projection rows", w1.nrows(), projection.nrows()));
    }
    let raw = projection.t().dot(w1);
    let mut out = Array2::zeros(raw.raw_dim());
    for j in 0..raw.ncols() {
        let col = ops::normalized(raw.column(j), || format!("learned direction {j}"), DIRECTION_NORM_FLOOR)?;
        out.column_mut(j).assign(&col);
    }
    Ok(out)
}

/// Directions of a trained head in the joint space, using the dataset's
/// projection matrix.
pub fn model_directions(model: &LinearHeadModel, dataset: &EmbeddingDataset) -> Result<Array2<f64>> {
    let w1 = model
        .w1
        .as_ref()
        .ok_or_else(|| Error::ModeMismatch("direction projection needs an orthogonal_head model".into()))?;
    let projection = dataset.projection.as_ref().ok_or_else(|| Error::MissingProjection {
        dataset: dataset.name.clone(),
    })?;
    project_directions(w1, projection)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedTerm {
    pub term: String,
    pub category: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabularyRanking {
    pub vocabulary: String,
    pub kind: VocabularyKind,
    /// One ranked list per direction.
    pub directions: Vec<Vec<RankedTerm>>,
}

/// Top `top` terms per direction. Antonym vocabularies rank by
/// `|similarity|`, plain ones by raw similarity; the signed value is kept.
pub fn rank_vocabulary(directions: &Array2<f64>, vocabulary: &Vocabulary, top: usize) -> Result<VocabularyRanking> {
    if directions.nrows() != vocabulary.p() {
        return Err(Error::dims("direction width", vocabulary.p(), directions.nrows()));
    }
    let terms = normalize_rows(&vocabulary.embeddings, "vocabulary embedding")?;
    let mut dirs = Vec::with_capacity(directions.ncols());
    for j in 0..directions.ncols() {
        let dir = ops::normalized(directions.column(j), || format!("direction {j}"), DIRECTION_NORM_FLOOR)?;
        let sims = terms.dot(&dir);
        let keys: Vec<f64> = match vocabulary.kind {
            VocabularyKind::AntonymDirection => sims.iter().map(|s| s.abs()).collect(),
            VocabularyKind::Plain => sims.to_vec(),
        };
        let mut order: Vec<usize> = (0..sims.len()).collect();
        order.sort_by(|&a, &b| cmp_desc_then_index(&keys, a, b));
        dirs.push(
            order
                .into_iter()
                .take(top)
                .map(|t| RankedTerm {
                    term: vocabulary.terms[t].name.clone(),
                    category: vocabulary.terms[t].category.clone(),
                    similarity: sims[t],
                })
                .collect(),
        );
    }
    Ok(VocabularyRanking {
        vocabulary: vocabulary.name.clone(),
        kind: vocabulary.kind,
        directions: dirs,
    })
}

impl VocabularyRanking {
    /// `vocabulary,direction,rank,term,category,similarity`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("vocabulary,direction,rank,term,category,similarity\n");
        for (j, list) in self.directions.iter().enumerate() {
            for (r, t) in list.iter().enumerate() {
                writeln!(
                    out,
                    "{},{j},{},{},{},{:.6}",
                    csv_field(&self.vocabulary),
                    r + 1,
                    csv_field(&t.term),
                    csv_field(&t.category),
                    t.similarity
                )
                .unwrap();
            }
        }
        out
    }
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptStats {
    pub index: usize,
    pub term: String,
    pub category: String,
    pub weight: f64,
    /// Mean of `S * q * Wc` for this concept, per class.
    pub mean_contribution_real: f64,
    pub mean_contribution_synthetic: f64,
    /// Fraction of samples with `q >= 0.5`, per class.
    pub activation_real: f64,
    pub activation_synthetic: f64,
    /// Single-feature AUC of the masked contribution.
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptReport {
    /// Sorted by AUC, descending; ties keep vocabulary order.
    pub concepts: Vec<ConceptStats>,
}

pub fn concept_report(
    model: &ConceptModel,
    images: &Array2<f64>,
    labels: &[f64],
    vocabulary: &Vocabulary,
) -> Result<ConceptReport> {
    if labels.len() != images.nrows() {
        return Err(Error::dims("label count", images.nrows(), labels.len()));
    }
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] > 0.5).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] <= 0.5).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::SingleClass(labels.len()));
    }
    let fwd = concept_forward(model, images, vocabulary, MaskMode::Expected)?;
    let contrib = &fwd.similarity * &fwd.q * &model.wc;
    let mean_over = |col: &Array1<f64>, idx: &[usize]| idx.iter().map(|&i| col[i]).sum::<f64>() / idx.len() as f64;
    let frac_active = |col: &Array1<f64>, idx: &[usize]| {
        idx.iter().filter(|&&i| col[i] >= ACTIVATION_THRESHOLD).count() as f64 / idx.len() as f64
    };
    let mut concepts = Vec::with_capacity(vocabulary.len());
    for j in 0..vocabulary.len() {
        let c = contrib.column(j).to_owned();
        let q = fwd.q.column(j).to_owned();
        concepts.push(ConceptStats {
            index: j,
            term: vocabulary.terms[j].name.clone(),
            category: vocabulary.terms[j].category.clone(),
            weight: model.wc[j],
            mean_contribution_real: mean_over(&c, &neg),
            mean_contribution_synthetic: mean_over(&c, &pos),
            activation_real: frac_active(&q, &neg),
            activation_synthetic: frac_active(&q, &pos),
            auc: metrics::auc(c.as_slice().expect("contiguous"), labels)?,
        });
    }
    concepts.sort_by(|a, b| b.auc.total_cmp(&a.auc).then(a.index.cmp(&b.index)));
    Ok(ConceptReport { concepts })
}

impl ConceptReport {
    pub fn top(&self, n: usize) -> &[ConceptStats] {
        &self.concepts[..n.min(self.concepts.len())]
    }

    pub fn to_csv(&self, top: usize) -> String {
        let mut out = String::from(
            "rank,concept,term,category,weight,mean_contribution_real,mean_contribution_synthetic,activation_real,activation_synthetic,auc\n",
        );
        for (r, c) in self.top(top).iter().enumerate() {
            writeln!(
                out,
                "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                r + 1,
                c.index,
                csv_field(&c.term),
                csv_field(&c.category),
                c.weight,
                c.mean_contribution_real,
                c.mean_contribution_synthetic,
                c.activation_real,
                c.activation_synthetic,
                c.auc
            )
            .unwrap();
        }
        out
    }

    /// Long-format bar values for external plotting:
    /// `term,series,value` with one row per (concept, series).
    pub fn plot_csv(&self, top: usize) -> String {
        let mut out = String::from("term,series,value\n");
        for c in self.top(top) {
            let t = csv_field(&c.term);
            for (series, v) in [
                ("contribution_real", c.mean_contribution_real),
                ("contribution_synthetic", c.mean_contribution_synthetic),
                ("activation_real", c.activation_real),
                ("activation_synthetic", c.activation_synthetic),
                ("auc", c.auc),
            ] {
                writeln!(out, "{t},{series},{v:.6}").unwrap();
            }
        }
        out
    }
}

/// Ids of the `count` highest and `count` lowest values in column `column`.
/// Ties go to the earlier record at both ends.
pub fn top_activating_samples(
    activations: &Array2<f64>,
    ids: &[String],
    column: usize,
    count: usize,
) -> Result<(Vec<String>, Vec<String>)> {
    if column >= activations.ncols() {
        return Err(Error::InvalidParameter {
            name: "column",
            msg: format!("{column} out of range for {} columns", activations.ncols()),
        });
    }
    if ids.len() != activations.nrows() {
        return Err(Error::dims("id count", activations.nrows(), ids.len()));
    }
    if count > ids.len() {
        return Err(Error::InvalidParameter {
            name: "count",
            msg: format!("{count} exceeds {} samples", ids.len()),
        });
    }
    let col: Vec<f64> = activations.column(column).to_vec();
    let mut order: Vec<usize> = (0..col.len()).collect();
    order.sort_by(|&a, &b| cmp_desc_then_index(&col, a, b));
    let highest = order[..count].iter().map(|&i| ids[i].clone()).collect();
    order.sort_by(|&a, &b| col[a].total_cmp(&col[b]).then(a.cmp(&b)));
    let lowest = order[..count].iter().map(|&i| ids[i].clone()).collect();
    Ok((highest, lowest))
}

//! Zero-shot detection with text prompt pairs, and antonym-direction
//! vocabularies.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::dataset::{
    load_text_embeddings, sidecar_kind, sidecar_path, write_sidecar, DatasetView, PromptText, Sidecar, Term, Vocabulary,
    VocabularyKind,
};
use crate::error::{Error, Result};
use crate::metrics::evaluate_per_generator;
use crate::ops::{self, normalize_rows, sigmoid};
use crate::tensor_io::{to_f32, write_matrix};

/// Fixed logit scale applied to the similarity gap.
pub const SCORE_SCALE: f64 = 100.0;

/// Antonym poles closer than this after normalization are parallel.
pub const ANTONYM_FLOOR: f64 = 1e-10;

const UNIT_TOL: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct PromptPair {
    pub name: String,
    pub real_embedding: Array1<f64>,
    pub synthetic_embedding: Array1<f64>,
}

impl PromptPair {
    pub fn new(name: impl Into<String>, real: Array1<f64>, synthetic: Array1<f64>) -> Result<Self> {
        let name = name.into();
        for (pole, v) in [("real", &real), ("synthetic", &synthetic)] {
            let n = ops::norm(v.view());
            if !((n - 1.0).abs() <= UNIT_TOL) {
                return Err(Error::NormViolation {
                    name: format!("{name} ({pole} prompt)"),
                    norm: n,
                    tol: UNIT_TOL,
                });
            }
        }
        if real.len() != synthetic.len() {
            return Err(Error::dims(format!("prompt pair {name:?}"), real.len(), synthetic.len()));
        }
        Ok(PromptPair {
            name,
            real_embedding: real,
            synthetic_embedding: synthetic,
        })
    }
}

/// `sigmoid(100 * (cos(x, synthetic) - cos(x, real)))` per image row.
pub fn zero_shot_scores(images: &Array2<f64>, pair: &PromptPair) -> Result<Vec<f64>> {
    Ok(similarity_gaps(images, pair)?
        .iter()
        .map(|&g| sigmoid(SCORE_SCALE * g))
        .collect())
}

/// `cos(x, synthetic) - cos(x, real)` per image row.
pub fn similarity_gaps(images: &Array2<f64>, pair: &PromptPair) -> Result<Array1<f64>> {
    if images.ncols() != pair.real_embedding.len() {
        return Err(Error::dims("image embedding width", pair.real_embedding.len(), images.ncols()));
    }
    let ibar = normalize_rows(images, "image embedding")?;
    let real = unit(pair.real_embedding.view(), || format!("{} real prompt", pair.name))?;
    let synthetic = unit(pair.synthetic_embedding.view(), || format!("{} synthetic prompt", pair.name))?;
    Ok(ibar.dot(&synthetic) - ibar.dot(&real))
}

fn unit(v: ArrayView1<'_, f64>, what: impl FnOnce() -> String) -> Result<Array1<f64>> {
    ops::normalized(v, what, f64::MIN_POSITIVE)
}

/// The pair with the highest per-generator mAP on `view`; the first pair
/// wins ties.
pub fn select_best_prompt<'p>(pairs: &'p [PromptPair], view: &DatasetView<'_>) -> Result<(&'p PromptPair, f64)> {
    if pairs.is_empty() {
        return Err(Error::Empty("prompt pair list".into()));
    }
    let images = view.joint();
    let records: Vec<_> = view.records().collect();
    let mut best: Option<(&PromptPair, f64)> = None;
    for pair in pairs {
        let scores = zero_shot_scores(&images, pair)?;
        let map = evaluate_per_generator(&scores, &records, 0.5, None)?.map;
        if best.is_none_or(|(_, m)| map > m) {
            best = Some((pair, map));
        }
    }
    Ok(best.expect("non-empty"))
}

/// Load embedded prompt pairs (tensor file + `prompt_pairs` sidecar).
pub fn load_prompt_pairs(path: impl AsRef<Path>, expected_p: Option<usize>) -> Result<Vec<PromptPair>> {
    let path = path.as_ref();
    let (sidecar, emb) = load_text_embeddings(path, expected_p)?;
    let Sidecar::PromptPairs { pairs } = sidecar else {
        return Err(Error::format(
            path,
            format!("expected a prompt_pairs sidecar, found {}", sidecar_kind(&sidecar)),
        ));
    };
    pairs
        .into_iter()
        .enumerate()
        .map(|(i, p)| PromptPair::new(p.name, emb.row(2 * i).to_owned(), emb.row(2 * i + 1).to_owned()))
        .collect()
}

/// Write prompt pairs with their texts (same order) as a tensor file plus
/// a `prompt_pairs` sidecar.
pub fn save_prompt_pairs(path: impl AsRef<Path>, pairs: &[PromptPair], texts: &[PromptText]) -> Result<()> {
    let path = path.as_ref();
    if pairs.len() != texts.len() {
        return Err(Error::dims("prompt text count", pairs.len(), texts.len()));
    }
    let rows: Vec<ArrayView1<'_, f64>> = pairs
        .iter()
        .flat_map(|p| [p.real_embedding.view(), p.synthetic_embedding.view()])
        .collect();
    let emb = stack_rows(&rows, path)?;
    write_matrix(path, &to_f32(&emb))?;
    write_sidecar(
        &sidecar_path(path),
        &Sidecar::PromptPairs {
            pairs: texts.to_vec(),
        },
    )
}

fn stack_rows(rows: &[ArrayView1<'_, f64>], path: &Path) -> Result<Array2<f64>> {
    if rows.is_empty() {
        return Err(Error::Empty(format!("rows for {}", path.display())));
    }
    ndarray::stack(ndarray::Axis(0), rows).map_err(|_| Error::format(path, "rows differ in width"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AntonymEntry {
    pub attribute: String,
    pub category: String,
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

/// `normalize(normalize(positive) - normalize(negative))`
pub fn antonym_direction(positive: ArrayView1<'_, f64>, negative: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    if positive.len() != negative.len() {
        return Err(Error::dims("antonym pole width", positive.len(), negative.len()));
    }
    let pos = unit(positive, || "positive pole".into())?;
    let neg = unit(negative, || "negative pole".into())?;
    ops::normalized((&pos - &neg).view(), || "antonym direction".into(), ANTONYM_FLOOR)
}

/// One unit direction per attribute; names and categories are kept.
pub fn build_antonym_vocabulary(name: &str, entries: &[AntonymEntry]) -> Result<Vocabulary> {
    let first = entries.first().ok_or_else(|| Error::Empty("antonym entry list".into()))?;
    let p = first.positive.len();
    let mut emb = Array2::zeros((entries.len(), p));
    let mut terms = Vec::with_capacity(entries.len());
    for (i, e) in entries.iter().enumerate() {
        if e.positive.len() != p || e.negative.len() != p {
            return Err(Error::dims(format!("antonym entry {:?}", e.attribute), p, e.positive.len().max(e.negative.len())));
        }
        let dir = antonym_direction(ArrayView1::from(&e.positive), ArrayView1::from(&e.negative)).map_err(|err| match err {
            Error::Degenerate { what, norm, floor } => Error::Degenerate {
                what: format!("{what} for attribute {:?}", e.attribute),
                norm,
                floor,
            },
            other => other,
        })?;
        emb.row_mut(i).assign(&dir);
        terms.push(Term {
            name: e.attribute.clone(),
            category: e.category.clone(),
        });
    }
    Vocabulary::new(name, VocabularyKind::AntonymDirection, terms, emb)
}

/// Load antonym poles (tensor file + `antonym_poles` sidecar).
pub fn load_antonym_entries(path: impl AsRef<Path>, expected_p: Option<usize>) -> Result<Vec<AntonymEntry>> {
    let path = path.as_ref();
    let (sidecar, emb) = load_text_embeddings(path, expected_p)?;
    let Sidecar::AntonymPoles { terms } = sidecar else {
        return Err(Error::format(
            path,
            format!("expected an antonym_poles sidecar, found {}", sidecar_kind(&sidecar)),
        ));
    };
    Ok(terms
        .into_iter()
        .enumerate()
        .map(|(i, t)| AntonymEntry {
            attribute: t.name,
            category: t.category,
            positive: emb.row(2 * i).to_vec(),
            negative: emb.row(2 * i + 1).to_vec(),
        })
        .collect())
}

/// Write antonym poles as a tensor file plus an `antonym_poles` sidecar.
pub fn save_antonym_entries(path: impl AsRef<Path>, entries: &[AntonymEntry]) -> Result<()> {
    let path = path.as_ref();
    let rows: Vec<ArrayView1<'_, f64>> = entries
        .iter()
        .flat_map(|e| [ArrayView1::from(&e.positive), ArrayView1::from(&e.negative)])
        .collect();
    let emb = stack_rows(&rows, path)?;
    write_matrix(path, &to_f32(&emb))?;
    let terms = entries
        .iter()
        .map(|e| Term {
            name: e.attribute.clone(),
            category: e.category.clone(),
        })
        .collect();
    write_sidecar(&sidecar_path(path), &Sidecar::AntonymPoles { terms })
}

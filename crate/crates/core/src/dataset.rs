//! On-disk embedding datasets and vocabularies.
//!
//! A dataset is a JSON manifest plus one tensor file per matrix (see
//! [`crate::tensor_io`]). Row `i` of each embedding matrix belongs to
//! `records[i]`. Relative file names resolve against the manifest's
//! directory.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_io::{read_matrix, to_f32, to_f64, write_matrix};

/// Generator tag reserved for camera-captured images.
pub const REAL: &str = "real";

/// Unit-norm tolerance for vocabulary embeddings.
pub const UNIT_NORM_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Real,
    Synthetic,
}

impl Label {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Label::Real),
            1 => Some(Label::Synthetic),
            _ => None,
        }
    }

    pub fn as_u8(self) -> u8 {
        match self {
            Label::Real => 0,
            Label::Synthetic => 1,
        }
    }

    pub fn as_f64(self) -> f64 {
        f64::from(self.as_u8())
    }

    pub fn is_synthetic(self) -> bool {
        self == Label::Synthetic
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// Per-image metadata. Embeddings live in the dataset matrices at the
/// record's position.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub id: String,
    pub label: Label,
    pub generator: String,
    pub split: Split,
}

#[derive(Debug, Clone)]
pub struct EmbeddingDataset {
    pub name: String,
    pub d: usize,
    pub p: usize,
    pub records: Vec<EmbeddingRecord>,
    /// `records.len() x d` final-layer CLS hidden states.
    pub hidden: Array2<f64>,
    /// `records.len() x p` joint-space embeddings.
    pub joint: Array2<f64>,
    /// `d x p` image projection head, when the producer exported it.
    pub projection: Option<Array2<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestRecord {
    id: String,
    label: u8,
    generator: String,
    split: Split,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    name: String,
    d: usize,
    p: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    projection_file: Option<String>,
    embeddings_hidden_file: String,
    embeddings_joint_file: String,
    records: Vec<ManifestRecord>,
}

fn resolve(base: &Path, file: &str) -> PathBuf {
    let p = Path::new(file);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn check_finite(what: &str, m: &Array2<f64>) -> Result<()> {
    for ((row, col), v) in m.indexed_iter() {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                what: what.to_string(),
                row,
                col,
            });
        }
    }
    Ok(())
}

fn check_shape(what: &str, m: &Array2<f64>, rows: usize, cols: usize) -> Result<()> {
    if m.dim() != (rows, cols) {
        return Err(Error::dims(
            what,
            format!("{rows}x{cols} (manifest)"),
            format!("{}x{} (tensor file)", m.nrows(), m.ncols()),
        ));
    }
    Ok(())
}

/// Load and validate a dataset manifest and its tensor files.
pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<EmbeddingDataset> {
    let manifest_path = manifest_path.as_ref();
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|source| Error::Manifest {
        path: manifest_path.to_path_buf(),
        source,
    })?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));

    let mut records = Vec::with_capacity(manifest.records.len());
    for (index, r) in manifest.records.into_iter().enumerate() {
        let label = Label::from_u8(r.label).ok_or_else(|| Error::InvalidRecord {
            index,
            id: r.id.clone(),
            msg: format!("label must be 0 or 1, got {}", r.label),
        })?;
        records.push(EmbeddingRecord {
            id: r.id,
            label,
            generator: r.generator,
            split: r.split,
        });
    }

    let hidden = to_f64(&read_matrix(resolve(base, &manifest.embeddings_hidden_file))?);
    let joint = to_f64(&read_matrix(resolve(base, &manifest.embeddings_joint_file))?);
    let projection = match &manifest.projection_file {
        Some(f) => Some(to_f64(&read_matrix(resolve(base, f))?)),
        None => None,
    };

    let ds = EmbeddingDataset {
        name: manifest.name,
        d: manifest.d,
        p: manifest.p,
        records,
        hidden,
        joint,
        projection,
    };
    ds.validate()?;
    Ok(ds)
}

/// Write `dataset` as `<dir>/<stem>.json` plus tensor files; returns the
/// manifest path.
pub fn write_dataset(dataset: &EmbeddingDataset, dir: impl AsRef<Path>, stem: &str) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let hidden_file = format!("{stem}.hidden.sidt");
    let joint_file = format!("{stem}.joint.sidt");
    write_matrix(dir.join(&hidden_file), &to_f32(&dataset.hidden))?;
    write_matrix(dir.join(&joint_file), &to_f32(&dataset.joint))?;
    let projection_file = match &dataset.projection {
        Some(m) => {
            let f = format!("{stem}.projection.sidt");
            write_matrix(dir.join(&f), &to_f32(m))?;
            Some(f)
        }
        None => None,
    };
    let manifest = Manifest {
        name: dataset.name.clone(),
        d: dataset.d,
        p: dataset.p,
        projection_file,
        embeddings_hidden_file: hidden_file,
        embeddings_joint_file: joint_file,
        records: dataset
            .records
            .iter()
            .map(|r| ManifestRecord {
                id: r.id.clone(),
                label: r.label.as_u8(),
                generator: r.generator.clone(),
                split: r.split,
            })
            .collect(),
    };
    let path = dir.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

impl EmbeddingDataset {
    /// Check every dataset invariant. Paired-split discipline is not checked.
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.p == 0 {
            return Err(Error::InvalidParameter {
                name: "d/p",
                msg: "embedding dimensions must be positive".into(),
            });
        }
        let n = self.records.len();
        check_shape("embeddings_hidden_file", &self.hidden, n, self.d)?;
        check_shape("embeddings_joint_file", &self.joint, n, self.p)?;
        if let Some(proj) = &self.projection {
            check_shape("projection_file", proj, self.d, self.p)?;
            check_finite("projection_file", proj)?;
        }
        check_finite("embeddings_hidden_file", &self.hidden)?;
        check_finite("embeddings_joint_file", &self.joint)?;

        let mut seen = HashSet::with_capacity(n);
        for (index, r) in self.records.iter().enumerate() {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Duplicate {
                    what: "record id",
                    name: r.id.clone(),
                    index,
                });
            }
            let is_real_tag = r.generator == REAL;
            if (r.label == Label::Real) != is_real_tag {
                return Err(Error::InvalidRecord {
                    index,
                    id: r.id.clone(),
                    msg: format!(
                        "label {} with generator {:?} violates label 0 <=> generator \"real\"",
                        r.label.as_u8(),
                        r.generator
                    ),
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Synthetic generator tags in order of first appearance.
    pub fn generators(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.records {
            if r.generator != REAL && !out.contains(&r.generator) {
                out.push(r.generator.clone());
            }
        }
        out
    }

    pub fn all(&self) -> DatasetView<'_> {
        DatasetView {
            dataset: self,
            indices: (0..self.len()).collect(),
        }
    }

    /// Records in `split` whose generator is in `generators` or is "real".
    /// `None` keeps every generator.
    pub fn select(&self, split: Split, generators: Option<&[String]>) -> Result<DatasetView<'_>> {
        self.all().select(split, generators)
    }

    /// Pool several datasets into one. Record ids are prefixed with the
    /// source dataset name so they stay unique.
    pub fn combine(name: &str, parts: &[EmbeddingDataset]) -> Result<EmbeddingDataset> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Empty("dataset list".into()))?;
        let (d, p) = (first.d, first.p);
        for ds in parts {
            if ds.d != d || ds.p != p {
                return Err(Error::dims(
                    format!("combined dataset {:?}", ds.name),
                    format!("d={d}, p={p}"),
                    format!("d={}, p={}", ds.d, ds.p),
                ));
            }
        }
        let records = parts
            .iter()
            .flat_map(|ds| {
                ds.records.iter().map(move |r| EmbeddingRecord {
                    id: format!("{}/{}", ds.name, r.id),
                    ..r.clone()
                })
            })
            .collect();
        let hidden_views: Vec<_> = parts.iter().map(|ds| ds.hidden.view()).collect();
        let joint_views: Vec<_> = parts.iter().map(|ds| ds.joint.view()).collect();
        let combined = EmbeddingDataset {
            name: name.to_string(),
            d,
            p,
            records,
            hidden: ndarray::concatenate(Axis(0), &hidden_views).expect("widths checked"),
            joint: ndarray::concatenate(Axis(0), &joint_views).expect("widths checked"),
            projection: first.projection.clone(),
        };
        combined.validate()?;
        Ok(combined)
    }
}

/// An ordered subset of a dataset's records.
#[derive(Debug, Clone)]
pub struct DatasetView<'a> {
    pub dataset: &'a EmbeddingDataset,
    pub indices: Vec<usize>,
}

impl<'a> DatasetView<'a> {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn records(&self) -> impl Iterator<Item = &'a EmbeddingRecord> + '_ {
        self.indices.iter().map(|&i| &self.dataset.records[i])
    }

    pub fn ids(&self) -> Vec<String> {
        self.records().map(|r| r.id.clone()).collect()
    }

    /// Labels as 0.0 / 1.0.
    pub fn labels(&self) -> Vec<f64> {
        self.records().map(|r| r.label.as_f64()).collect()
    }

    pub fn hidden(&self) -> Array2<f64> {
        self.dataset.hidden.select(Axis(0), &self.indices)
    }

    pub fn joint(&self) -> Array2<f64> {
        self.dataset.joint.select(Axis(0), &self.indices)
    }

    pub fn select(&self, split: Split, generators: Option<&[String]>) -> Result<DatasetView<'a>> {
        let wanted: Option<BTreeSet<&str>> = match generators {
            Some(gens) => {
                let known: HashSet<&str> = self
                    .dataset
                    .records
                    .iter()
                    .map(|r| r.generator.as_str())
                    .collect();
                for g in gens {
                    if !known.contains(g.as_str()) {
                        return Err(Error::UnknownGenerator(g.clone()));
                    }
                }
                Some(gens.iter().map(String::as_str).collect())
            }
            None => None,
        };
        let indices = self
            .indices
            .iter()
            .copied()
            .filter(|&i| {
                let r = &self.dataset.records[i];
                r.split == split
                    && match &wanted {
                        Some(set) => r.generator == REAL || set.contains(r.generator.as_str()),
                        None => true,
                    }
            })
            .collect();
        Ok(DatasetView {
            dataset: self.dataset,
            indices,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VocabularyKind {
    Plain,
    AntonymDirection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub name: String,
    #[serde(default)]
    pub category: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptText {
    pub name: String,
    pub real: String,
    pub synthetic: String,
}

/// JSON sidecar stored next to a text-embedding tensor file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Sidecar {
    Plain { terms: Vec<Term> },
    AntonymDirection { terms: Vec<Term> },
    /// Two rows per term: positive pole at `2i`, negative at `2i + 1`.
    AntonymPoles { terms: Vec<Term> },
    /// Two rows per pair: real prompt at `2i`, synthetic at `2i + 1`.
    PromptPairs { pairs: Vec<PromptText> },
}

impl Sidecar {
    pub fn rows(&self) -> usize {
        match self {
            Sidecar::Plain { terms } | Sidecar::AntonymDirection { terms } => terms.len(),
            Sidecar::AntonymPoles { terms } => 2 * terms.len(),
            Sidecar::PromptPairs { pairs } => 2 * pairs.len(),
        }
    }
}

/// Sidecar path for a tensor file: same stem, `.json` extension.
pub fn sidecar_path(tensor_path: &Path) -> PathBuf {
    tensor_path.with_extension("json")
}

pub fn read_sidecar(path: &Path) -> Result<Sidecar> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Manifest {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_sidecar(path: &Path, sidecar: &Sidecar) -> Result<()> {
    let text = serde_json::to_string_pretty(sidecar).expect("sidecar serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Load a text-embedding tensor together with its sidecar, checking the
/// row count and (optionally) the embedding width.
pub fn load_text_embeddings(
    tensor_path: impl AsRef<Path>,
    expected_p: Option<usize>,
) -> Result<(Sidecar, Array2<f64>)> {
    let tensor_path = tensor_path.as_ref();
    let sidecar = read_sidecar(&sidecar_path(tensor_path))?;
    let emb = to_f64(&read_matrix(tensor_path)?);
    if emb.nrows() != sidecar.rows() {
        return Err(Error::dims(
            format!("{} rows", tensor_path.display()),
            format!("{} (sidecar)", sidecar.rows()),
            format!("{} (tensor file)", emb.nrows()),
        ));
    }
    if let Some(p) = expected_p {
        if emb.ncols() != p {
            return Err(Error::dims(
                format!("{} embedding width", tensor_path.display()),
                p,
                emb.ncols(),
            ));
        }
    }
    check_finite(&tensor_path.display().to_string(), &emb)?;
    Ok((sidecar, emb))
}

/// Named unit-norm concept embeddings in the joint space.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    pub name: String,
    pub kind: VocabularyKind,
    pub terms: Vec<Term>,
    /// `terms.len() x p`
    pub embeddings: Array2<f64>,
}

impl Vocabulary {
    pub fn new(
        name: impl Into<String>,
        kind: VocabularyKind,
        terms: Vec<Term>,
        embeddings: Array2<f64>,
    ) -> Result<Self> {
        let v = Vocabulary {
            name: name.into(),
            kind,
            terms,
            embeddings,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.terms.len() != self.embeddings.nrows() {
            return Err(Error::dims(
                format!("vocabulary {:?}", self.name),
                format!("{} terms", self.terms.len()),
                format!("{} embedding rows", self.embeddings.nrows()),
            ));
        }
        let mut seen = HashSet::new();
        for (index, (term, row)) in self.terms.iter().zip(self.embeddings.rows()).enumerate() {
            if !seen.insert(term.name.as_str()) {
                return Err(Error::Duplicate {
                    what: "term name",
                    name: term.name.clone(),
                    index,
                });
            }
            let norm = row.dot(&row).sqrt();
            if !((norm - 1.0).abs() <= UNIT_NORM_TOL) {
                return Err(Error::NormViolation {
                    name: term.name.clone(),
                    norm,
                    tol: UNIT_NORM_TOL,
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn p(&self) -> usize {
        self.embeddings.ncols()
    }

    /// Writes `<path>` and its sidecar.
    pub fn save(&self, tensor_path: impl AsRef<Path>) -> Result<()> {
        let tensor_path = tensor_path.as_ref();
        write_matrix(tensor_path, &to_f32(&self.embeddings))?;
        let terms = self.terms.clone();
        let sidecar = match self.kind {
            VocabularyKind::Plain => Sidecar::Plain { terms },
            VocabularyKind::AntonymDirection => Sidecar::AntonymDirection { terms },
        };
        write_sidecar(&sidecar_path(tensor_path), &sidecar)
    }
}

/// Load a vocabulary tensor file and its sidecar. Terms keep file order.
pub fn load_vocabulary(path: impl AsRef<Path>, expected_p: Option<usize>) -> Result<Vocabulary> {
    let path = path.as_ref();
    let (sidecar, embeddings) = load_text_embeddings(path, expected_p)?;
    let (kind, terms) = match sidecar {
        Sidecar::Plain { terms } => (VocabularyKind::Plain, terms),
        Sidecar::AntonymDirection { terms } => (VocabularyKind::AntonymDirection, terms),
        other => {
            return Err(Error::format(
                path,
                format!("expected a vocabulary sidecar, found {}", sidecar_kind(&other)),
            ))
        }
    };
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Vocabulary::new(name, kind, terms, embeddings)
}

pub(crate) fn sidecar_kind(s: &Sidecar) -> &'static str {
    match s {
        Sidecar::Plain { .. } => "plain",
        Sidecar::AntonymDirection { .. } => "antonym_direction",
        Sidecar::AntonymPoles { .. } => "antonym_poles",
        Sidecar::PromptPairs { .. } => "prompt_pairs",
    }
}

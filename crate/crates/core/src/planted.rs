//! Seeded synthetic datasets with a known signal, for tests, the
//! acceptance suite, and CLI demos.

use ndarray::{s, Array1, Array2};
use rand::seq::SliceRandom;

use crate::dataset::{EmbeddingDataset, EmbeddingRecord, Label, PromptText, Split, Term, Vocabulary, VocabularyKind, REAL};
use crate::ops::{self, Rng};
use crate::zeroshot::{AntonymEntry, PromptPair};

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedSpec {
    pub name: String,
    /// Hidden-state width.
    pub d: usize,
    /// Joint-space width (must be <= d).
    pub p: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Distance between the two class means.
    pub separation: f64,
    /// Per-coordinate noise standard deviation.
    pub noise: f64,
    /// Extra standard deviation orthogonal to the class direction, standing
    /// in for content variation unrelated to the label.
    pub content: f64,
    pub generators: Vec<String>,
    /// Permute labels (with their generator tags) across all records after
    /// the features are drawn, removing any label signal.
    pub shuffle_labels: bool,
    pub seed: u64,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        PlantedSpec {
            name: "planted".into(),
            d: 64,
            p: 16,
            n_train: 400,
            n_val: 100,
            n_test: 200,
            separation: 1.0,
            noise: 0.1,
            content: 0.5,
            generators: vec!["PlantedGen".into()],
            shuffle_labels: false,
            seed: 7,
        }
    }
}

fn labelled_records(spec: &PlantedSpec) -> Vec<EmbeddingRecord> {
    let mut out = Vec::new();
    let mut fake_count = 0usize;
    for (split, n) in [(Split::Train, spec.n_train), (Split::Val, spec.n_val), (Split::Test, spec.n_test)] {
        for i in 0..n {
            let label = if i % 2 == 1 { Label::Synthetic } else { Label::Real };
            let generator = match label {
                Label::Real => REAL.to_string(),
                Label::Synthetic => {
                    let g = spec.generators[fake_count % spec.generators.len()].clone();
                    fake_count += 1;
                    g
                }
            };
            out.push(EmbeddingRecord {
                id: format!("{split}-{i:05}"),
                label,
                generator,
                split,
            });
        }
    }
    out
}

/// Permute label and generator tags across records, leaving the features
/// where they are.
fn shuffle_tags(records: &mut [EmbeddingRecord], rng: &mut Rng) {
    let mut tags: Vec<(Label, String)> = records.iter().map(|r| (r.label, r.generator.clone())).collect();
    tags.shuffle(rng);
    for (r, (label, generator)) in records.iter_mut().zip(tags) {
        r.label = label;
        r.generator = generator;
    }
}

/// Two Gaussian classes in hidden space whose means sit `separation` apart
/// along a random unit direction `u`. The projection head is an orthonormal
/// `d x p` map whose first column is `u`, so the signal survives in the
/// joint space along its first coordinate.
pub fn planted_linear(spec: &PlantedSpec) -> EmbeddingDataset {
    assert!(spec.p <= spec.d && spec.p >= 1, "planted spec needs 1 <= p <= d");
    assert!(!spec.generators.is_empty(), "planted spec needs a generator");
    let mut rng = ops::rng(spec.seed);
    let projection = ops::orthogonal(spec.d, spec.p, &mut rng);
    let u = projection.column(0).to_owned();
    let mut records = labelled_records(spec);
    let n = records.len();
    let mut hidden = ops::gaussian(n, spec.d, spec.noise, &mut rng);
    if spec.content > 0.0 {
        let mut content = ops::gaussian(n, spec.d, spec.content, &mut rng);
        let along = content.dot(&u);
        for (mut row, a) in content.rows_mut().into_iter().zip(along) {
            row.scaled_add(-a, &u);
        }
        hidden += &content;
    }
    for (i, r) in records.iter().enumerate() {
        let sign = if r.label.is_synthetic() { 0.5 } else { -0.5 };
        hidden.row_mut(i).scaled_add(sign * spec.separation, &u);
    }
    if spec.shuffle_labels {
        shuffle_tags(&mut records, &mut rng);
    }
    let joint = hidden.dot(&projection);
    EmbeddingDataset {
        name: spec.name.clone(),
        d: spec.d,
        p: spec.p,
        records,
        hidden,
        joint,
        projection: Some(projection),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedConceptSpec {
    pub p: usize,
    pub n_concepts: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Weight of the direction shared by every image.
    pub offset: f64,
    /// Class-signed weight of the informative concept.
    pub signal: f64,
    pub noise: f64,
    pub informative: usize,
    pub seed: u64,
}

impl Default for PlantedConceptSpec {
    fn default() -> Self {
        PlantedConceptSpec {
            p: 32,
            n_concepts: 12,
            n_train: 400,
            n_val: 100,
            n_test: 200,
            offset: 1.0,
            signal: 0.3,
            noise: 0.03,
            informative: 0,
            seed: 11,
        }
    }
}

/// Images `offset * c0 + (2y - 1) * signal * e_k + noise`, where the
/// concepts are orthonormal, `e_k` is the informative concept and `c0` is
/// orthogonal to every concept. Only concept `k` separates the classes, and
/// the sign of its similarity does so perfectly while `noise << signal`.
pub fn planted_concepts(spec: &PlantedConceptSpec) -> (EmbeddingDataset, Vocabulary) {
    assert!(spec.n_concepts < spec.p, "need a spare direction for the shared offset");
    assert!(spec.informative < spec.n_concepts);
    let mut rng = ops::rng(spec.seed);
    let basis = ops::orthogonal(spec.p, spec.n_concepts + 1, &mut rng);
    let concepts: Array2<f64> = basis.slice(s![.., ..spec.n_concepts]).t().to_owned();
    let shared: Array1<f64> = basis.column(spec.n_concepts).to_owned();
    let signal_dir = concepts.row(spec.informative).to_owned();

    let lin = PlantedSpec {
        name: "planted-concepts".into(),
        d: spec.p,
        p: spec.p,
        n_train: spec.n_train,
        n_val: spec.n_val,
        n_test: spec.n_test,
        generators: vec!["PlantedGen".into()],
        ..PlantedSpec::default()
    };
    let records = labelled_records(&lin);
    let n = records.len();
    let mut joint = ops::gaussian(n, spec.p, spec.noise, &mut rng);
    for (i, r) in records.iter().enumerate() {
        let sign = if r.label.is_synthetic() { 1.0 } else { -1.0 };
        let mut row = joint.row_mut(i);
        row.scaled_add(spec.offset, &shared);
        row.scaled_add(sign * spec.signal, &signal_dir);
    }
    let terms = (0..spec.n_concepts)
        .map(|j| Term {
            name: format!("concept-{j:02}"),
            category: if j == spec.informative { "planted" } else { "noise" }.into(),
        })
        .collect();
    let vocab = Vocabulary::new("planted-vocab", VocabularyKind::Plain, terms, concepts).expect("orthonormal rows");
    let ds = EmbeddingDataset {
        name: lin.name,
        d: spec.p,
        p: spec.p,
        records,
        hidden: joint.clone(),
        joint,
        projection: Some(Array2::eye(spec.p)),
    };
    (ds, vocab)
}

/// `n` attributes with random unit poles in `p` dimensions.
pub fn antonym_fixture(n: usize, p: usize, seed: u64) -> Vec<AntonymEntry> {
    let mut rng = ops::rng(seed);
    let poles = ops::gaussian(2 * n, p, 1.0, &mut rng);
    let poles = ops::normalize_rows(&poles, "pole").expect("gaussian rows are non-zero");
    (0..n)
        .map(|i| AntonymEntry {
            attribute: format!("attribute-{i:03}"),
            category: ["color", "lens", "texture", "lighting"][i % 4].into(),
            positive: poles.row(2 * i).to_vec(),
            negative: poles.row(2 * i + 1).to_vec(),
        })
        .collect()
}

/// Prompt pairs for [`planted_linear`] data: pair 0 straddles the joint
/// coordinate carrying the class signal, the other `n_random` are random.
pub fn planted_prompts(p: usize, n_random: usize, seed: u64) -> (Vec<PromptPair>, Vec<PromptText>) {
    let mut rng = ops::rng(seed);
    let shared = ops::gaussian(1, p, 0.3, &mut rng).row(0).to_owned();
    let mut e0 = Array1::zeros(p);
    e0[0] = 1.0;
    let unit = |v: Array1<f64>| {
        let n = ops::norm(v.view());
        v / n
    };
    let mut pairs = vec![PromptPair::new("aligned", unit(&shared - &e0), unit(&shared + &e0)).expect("unit poles")];
    let mut texts = vec![PromptText {
        name: "aligned".into(),
        real: "a planted real pole".into(),
        synthetic: "a planted synthetic pole".into(),
    }];
    let poles = ops::normalize_rows(&ops::gaussian(2 * n_random, p, 1.0, &mut rng), "pole").expect("non-zero rows");
    for i in 0..n_random {
        let name = format!("random-{i:02}");
        pairs.push(PromptPair::new(&name, poles.row(2 * i).to_owned(), poles.row(2 * i + 1).to_owned()).expect("unit poles"));
        texts.push(PromptText {
            name,
            real: format!("random real prompt {i}"),
            synthetic: format!("random synthetic prompt {i}"),
        });
    }
    (pairs, texts)
}

//! Sparse linear concept model.
//!
//! Logits are a masked linear combination of image-concept cosine
//! similarities, `a = (S * Z) Wc`, where `Z` is a per-sample Bernoulli mask
//! with posterior `q = sigmoid(Ibar Ws^T)` and prior `Bernoulli(alpha)`.
//! Training minimizes `BCE(sigmoid(a), y) + beta * KL(q || alpha)` and
//! passes gradients through a binary-concrete relaxation of `Z` at
//! temperature `tau`. Inference uses the expected mask `Z = q`.

use ndarray::{Array1, Array2, Axis, Zip};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::{EmbeddingDataset, Split, Vocabulary};
use crate::error::{Error, Result};
use crate::linear_head::bce_with_grad;
use crate::ops::{self, normalize_rows, sigmoid, Rng};
use crate::optim::{Adam, AdamConfig, WeightDecay};
use crate::training::{shuffled_batches, EarlyStopping, EpochLog, TrainLog, Verdict};

/// Probabilities are clamped to `[Q_CLAMP, 1 - Q_CLAMP]` inside the KL logs.
pub const Q_CLAMP: f64 = 1e-7;

/// A concept counts as activated for a sample when `q >= ACTIVATION_THRESHOLD`.
pub const ACTIVATION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptModel {
    /// Concept-to-logit weights, length `n`.
    pub wc: Array1<f64>,
    /// Mask-posterior projection, `n x p`.
    pub ws: Array2<f64>,
    pub alpha: f64,
    pub tau: f64,
    pub beta: f64,
    pub vocabulary: String,
}

impl ConceptModel {
    pub fn n_concepts(&self) -> usize {
        self.wc.len()
    }

    pub fn p(&self) -> usize {
        self.ws.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        if !(self.tau > 0.0) {
            return Err(Error::InvalidParameter {
                name: "tau",
                msg: format!("must be > 0, got {}", self.tau),
            });
        }
        if !(self.beta >= 0.0) {
            return Err(Error::InvalidParameter {
                name: "beta",
                msg: format!("must be >= 0, got {}", self.beta),
            });
        }
        if self.ws.nrows() != self.wc.len() {
            return Err(Error::dims("Ws rows", self.wc.len(), self.ws.nrows()));
        }
        if !ops::all_finite(self.wc.iter()) || !ops::all_finite(self.ws.iter()) {
            return Err(Error::NonFinite {
                what: "concept weights".into(),
                row: 0,
                col: 0,
            });
        }
        Ok(())
    }

    fn check_vocabulary(&self, vocabulary: &Vocabulary) -> Result<()> {
        if vocabulary.len() != self.n_concepts() {
            return Err(Error::dims("vocabulary size", self.n_concepts(), vocabulary.len()));
        }
        if vocabulary.p() != self.p() {
            return Err(Error::dims("vocabulary width", self.p(), vocabulary.p()));
        }
        Ok(())
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter {
            name: "alpha",
            msg: format!("must lie in (0, 1), got {alpha}"),
        });
    }
    Ok(())
}

/// `S[i][j] = cos(image_i, concept_j)`.
pub fn similarity_matrix(images: &Array2<f64>, vocabulary: &Vocabulary) -> Result<Array2<f64>> {
    if images.ncols() != vocabulary.p() {
        return Err(Error::dims("image embedding width", vocabulary.p(), images.ncols()));
    }
    let ibar = normalize_rows(images, "image embedding")?;
    let cbar = normalize_rows(&vocabulary.embeddings, "concept embedding")?;
    Ok(ibar.dot(&cbar.t()))
}

/// `q = sigmoid(Ibar Ws^T)` with `Ibar` the row-normalized images.
pub fn mask_posterior(images: &Array2<f64>, ws: &Array2<f64>) -> Result<Array2<f64>> {
    if images.ncols() != ws.ncols() {
        return Err(Error::dims("image embedding width", ws.ncols(), images.ncols()));
    }
    let ibar = normalize_rows(images, "image embedding")?;
    Ok(ibar.dot(&ws.t()).mapv(sigmoid))
}

/// `(S * Z) Wc`
pub fn masked_logits(s: &Array2<f64>, z: &Array2<f64>, wc: &Array1<f64>) -> Array1<f64> {
    (s * z).dot(wc)
}

/// KL divergence between `Bernoulli(q)` and `Bernoulli(alpha)`, with `q`
/// clamped away from 0 and 1.
pub fn kl_bernoulli(q: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(kl_unchecked(q, alpha))
}

fn kl_unchecked(q: f64, alpha: f64) -> f64 {
    let q = q.clamp(Q_CLAMP, 1.0 - Q_CLAMP);
    q * (q / alpha).ln() + (1.0 - q) * ((1.0 - q) / (1.0 - alpha)).ln()
}

/// d KL / d q; zero where the clamp is active.
fn kl_grad(q: f64, alpha: f64) -> f64 {
    if !(Q_CLAMP..=1.0 - Q_CLAMP).contains(&q) {
        0.0
    } else {
        (q / alpha).ln() - ((1.0 - q) / (1.0 - alpha)).ln()
    }
}

pub enum MaskMode<'r> {
    /// Relaxed Bernoulli sample drawn from the given noise source.
    Sample(&'r mut Rng),
    /// `Z = q`
    Expected,
}

#[derive(Debug, Clone)]
pub struct ConceptForward {
    pub logits: Array1<f64>,
    pub q: Array2<f64>,
    pub mask: Array2<f64>,
    pub similarity: Array2<f64>,
}

/// Row-normalized images and their similarities, which stay fixed during
/// training.
#[derive(Debug, Clone)]
pub struct Features {
    pub ibar: Array2<f64>,
    pub similarity: Array2<f64>,
}

impl Features {
    pub fn new(images: &Array2<f64>, vocabulary: &Vocabulary) -> Result<Self> {
        let similarity = similarity_matrix(images, vocabulary)?;
        let ibar = normalize_rows(images, "image embedding")?;
        Ok(Features { ibar, similarity })
    }

    fn rows(&self, idx: &[usize]) -> Features {
        Features {
            ibar: self.ibar.select(Axis(0), idx),
            similarity: self.similarity.select(Axis(0), idx),
        }
    }
}

struct Pass {
    q: Array2<f64>,
    mask: Array2<f64>,
    /// dZ / d(posterior logit)
    dmask: Array2<f64>,
    logits: Array1<f64>,
}

fn run(model: &ConceptModel, f: &Features, mode: MaskMode<'_>) -> Pass {
    let q_logits = f.ibar.dot(&model.ws.t());
    let q = q_logits.mapv(sigmoid);
    let (mask, dmask) = match mode {
        MaskMode::Expected => {
            let d = q.mapv(|p| p * (1.0 - p));
            (q.clone(), d)
        }
        MaskMode::Sample(rng) => {
            let tau = model.tau;
            let mut mask = Array2::zeros(q.raw_dim());
            let mut dmask = Array2::zeros(q.raw_dim());
            Zip::from(&mut mask)
                .and(&mut dmask)
                .and(&q_logits)
                .for_each(|z, dz, &l| {
                    let u: f64 = rng.random_range(1e-10..1.0 - 1e-10);
                    let noise = u.ln() - (-u).ln_1p();
                    let v = sigmoid((l + noise) / tau);
                    *z = v;
                    *dz = v * (1.0 - v) / tau;
                });
            (mask, dmask)
        }
    };
    let logits = masked_logits(&f.similarity, &mask, &model.wc);
    Pass {
        q,
        mask,
        dmask,
        logits,
    }
}

pub fn concept_forward(
    model: &ConceptModel,
    images: &Array2<f64>,
    vocabulary: &Vocabulary,
    mode: MaskMode<'_>,
) -> Result<ConceptForward> {
    model.check_vocabulary(vocabulary)?;
    let f = Features::new(images, vocabulary)?;
    let pass = run(model, &f, mode);
    Ok(ConceptForward {
        logits: pass.logits,
        q: pass.q,
        mask: pass.mask,
        similarity: f.similarity,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConceptLossParts {
    pub total: f64,
    pub bce: f64,
    /// Per-sample KL summed over concepts, averaged over the batch.
    pub kl: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptGradients {
    pub wc: Array1<f64>,
    pub ws: Array2<f64>,
}

/// Negative ELBO on precomputed features and its gradients.
pub fn loss_on_features(
    model: &ConceptModel,
    features: &Features,
    labels: &Array1<f64>,
    mode: MaskMode<'_>,
) -> Result<(ConceptLossParts, ConceptGradients)> {
    let m = features.ibar.nrows();
    if m == 0 {
        return Err(Error::Empty("concept batch".into()));
    }
    if labels.len() != m {
        return Err(Error::dims("label count", m, labels.len()));
    }
    let pass = run(model, features, mode);
    let (bce, g_logits) = bce_with_grad(&pass.logits, labels);
    let kl = pass.q.iter().map(|&q| kl_unchecked(q, model.alpha)).sum::<f64>() / m as f64;

    let masked = &features.similarity * &pass.mask;
    let g_wc = masked.t().dot(&g_logits);

    let mut g_ql = Array2::zeros(pass.q.raw_dim());
    let kl_scale = model.beta / m as f64;
    Zip::indexed(&mut g_ql)
        .and(&features.similarity)
        .and(&pass.dmask)
        .and(&pass.q)
        .for_each(|(i, j), g, &s, &dz, &q| {
            let g_mask = g_logits[i] * model.wc[j] * s;
            *g = g_mask * dz + kl_scale * kl_grad(q, model.alpha) * q * (1.0 - q);
        });
    let g_ws = g_ql.t().dot(&features.ibar);

    Ok((
        ConceptLossParts {
            total: bce + model.beta * kl,
            bce,
            kl,
        },
        ConceptGradients { wc: g_wc, ws: g_ws },
    ))
}

pub fn concept_loss(
    model: &ConceptModel,
    images: &Array2<f64>,
    labels: &Array1<f64>,
    vocabulary: &Vocabulary,
    mode: MaskMode<'_>,
) -> Result<(ConceptLossParts, ConceptGradients)> {
    model.check_vocabulary(vocabulary)?;
    let f = Features::new(images, vocabulary)?;
    loss_on_features(model, &f, labels, mode)
}

/// Synthetic-class probabilities under the expected mask.
pub fn predict_proba(model: &ConceptModel, images: &Array2<f64>, vocabulary: &Vocabulary) -> Result<Vec<f64>> {
    let fwd = concept_forward(model, images, vocabulary, MaskMode::Expected)?;
    Ok(fwd.logits.iter().map(|&a| sigmoid(a)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConceptTrainConfig {
    pub alpha: f64,
    pub tau: f64,
    pub beta: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Counted in validation checks, not epochs.
    pub patience: usize,
    pub val_every: usize,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for ConceptTrainConfig {
    fn default() -> Self {
        ConceptTrainConfig {
            alpha: 1e-4,
            tau: 0.1,
            beta: 1e-4,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            betas: (0.9, 0.999),
            adam_eps: 1e-8,
            batch_size: 256,
            max_epochs: 4000,
            patience: 10,
            val_every: 40,
            init_std: 0.01,
            seed: 123,
        }
    }
}

impl ConceptTrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        let bad = |name, msg: &str| {
            Err(Error::InvalidParameter {
                name,
                msg: msg.to_string(),
            })
        };
        if !(self.tau > 0.0) {
            return bad("tau", "must be > 0");
        }
        if !(self.beta >= 0.0) {
            return bad("beta", "must be >= 0");
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) || !(self.adam_eps > 0.0) {
            return bad("optimizer", "learning_rate and adam_eps must be > 0, weight_decay >= 0");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 || self.val_every == 0 {
            return bad("batch_size/max_epochs/patience/val_every", "must be >= 1");
        }
        Ok(())
    }
}

pub fn init_model(config: &ConceptTrainConfig, vocabulary: &Vocabulary) -> ConceptModel {
    let mut rng = ops::rng(config.seed);
    let n = vocabulary.len();
    let wc = ops::gaussian(n, 1, config.init_std, &mut rng).column(0).to_owned();
    let ws = ops::gaussian(n, vocabulary.p(), config.init_std, &mut rng);
    ConceptModel {
        wc,
        ws,
        alpha: config.alpha,
        tau: config.tau,
        beta: config.beta,
        vocabulary: vocabulary.name.clone(),
    }
}

/// Fit on the joint embeddings of the train split; validation runs every
/// `val_every` epochs in expected-mask mode and drives early stopping.
pub fn train_concept(
    dataset: &EmbeddingDataset,
    vocabulary: &Vocabulary,
    config: &ConceptTrainConfig,
) -> Result<(ConceptModel, TrainLog)> {
    config.validate()?;
    if vocabulary.p() != dataset.p {
        return Err(Error::dims("vocabulary width", dataset.p, vocabulary.p()));
    }
    if vocabulary.is_empty() {
        return Err(Error::Empty("vocabulary".into()));
    }
    let train_view = dataset.select(Split::Train, None)?;
    let val_view = dataset.select(Split::Val, None)?;
    if train_view.is_empty() {
        return Err(Error::Empty("train split".into()));
    }
    if val_view.is_empty() {
        return Err(Error::Empty("val split".into()));
    }
    let train_f = Features::new(&train_view.joint(), vocabulary)?;
    let y_train = Array1::from(train_view.labels());
    let val_f = Features::new(&val_view.joint(), vocabulary)?;
    let y_val = Array1::from(val_view.labels());

    let mut model = init_model(config, vocabulary);
    let mut shuffle_rng = ops::rng(config.seed.wrapping_add(1));
    let mut noise_rng = ops::rng(config.seed.wrapping_add(2));
    let mut opt = Adam::new(
        AdamConfig {
            learning_rate: config.learning_rate,
            beta1: config.betas.0,
            beta2: config.betas.1,
            eps: config.adam_eps,
            weight_decay: config.weight_decay,
            decay: WeightDecay::Decoupled,
        },
        &[model.wc.len(), model.ws.len()],
    );
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best = model.clone();
    let mut log = TrainLog::default();
    let n_train = train_f.ibar.nrows();

    for epoch in 1..=config.max_epochs {
        let mut total = 0.0;
        for batch in shuffled_batches(n_train, config.batch_size, 1, &mut shuffle_rng) {
            let fb = train_f.rows(&batch);
            let yb = y_train.select(Axis(0), &batch);
            let (parts, grads) = loss_on_features(&model, &fb, &yb, MaskMode::Sample(&mut noise_rng))?;
            if !parts.total.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            total += parts.total * batch.len() as f64;
            let g_ws = grads.ws.as_standard_layout();
            let wc = model.wc.as_slice_mut().expect("contiguous");
            let ws = model.ws.as_slice_mut().expect("contiguous");
            opt.step(
                &mut [wc, ws],
                &[
                    grads.wc.as_slice().expect("contiguous"),
                    g_ws.as_slice().expect("contiguous"),
                ],
            );
        }
        let train_loss = total / n_train as f64;
        let mut entry = EpochLog {
            epoch,
            train_loss,
            val_loss: None,
            penalty: None,
        };
        let check = epoch % config.val_every == 0 || epoch == config.max_epochs;
        let mut stop = false;
        if check {
            let (val, _) = loss_on_features(&model, &val_f, &y_val, MaskMode::Expected)?;
            if !val.total.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            entry.val_loss = Some(val.total);
            entry.penalty = Some(val.kl);
            match stopper.observe(epoch, val.total) {
                Verdict::Improved => best = model.clone(),
                Verdict::Waiting => {}
                Verdict::Stop => stop = true,
            }
        }
        log.epochs.push(entry);
        if stop {
            log.stopped_early = true;
            break;
        }
    }
    log.best_epoch = stopper.best_epoch().unwrap_or(0);
    log.best_val_loss = stopper.best();
    Ok((best, log))
}

/// Mean posterior activation probability over a set of images.
pub fn mean_q(model: &ConceptModel, images: &Array2<f64>) -> Result<f64> {
    let q = mask_posterior(images, &model.ws)?;
    Ok(q.mean().unwrap_or(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Term, VocabularyKind};
    use ndarray::array;

    fn vocab(emb: Array2<f64>) -> Vocabulary {
        let terms = (0..emb.nrows())
            .map(|i| Term {
                name: format!("t{i}"),
                category: String::new(),
            })
            .collect();
        Vocabulary::new("v", VocabularyKind::Plain, terms, emb).unwrap()
    }

    fn model(wc: Array1<f64>, ws: Array2<f64>) -> ConceptModel {
        ConceptModel {
            wc,
            ws,
            alpha: 1e-4,
            tau: 0.1,
            beta: 1e-4,
            vocabulary: "v".into(),
        }
    }

    #[test]
    fn similarity_identity_and_orthogonal() {
        let v = vocab(array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        let s = similarity_matrix(&array![[2.0, 0.0, 0.0], [0.0, 0.0, 5.0]], &v).unwrap();
        assert_eq!(s, array![[1.0, 0.0], [0.0, 0.0]]);
        assert!(similarity_matrix(&array![[0.0, 0.0, 0.0]], &v).is_err());
    }

    #[test]
    fn posterior_at_zero_weights_is_half() {
        let q = mask_posterior(&array![[1.0, 2.0], [3.0, -1.0]], &Array2::zeros((3, 2))).unwrap();
        assert!(q.iter().all(|&p| p == 0.5));
        let q = mask_posterior(&array![[1.0, 0.0]], &array![[100.0, 0.0]]).unwrap();
        assert!(q[[0, 0]] > 1.0 - 1e-12);
    }

    #[test]
    fn all_ones_mask_sums_similarities() {
        let s = array![[0.1, 0.2, 0.3], [-0.5, 0.0, 0.25]];
        let logits = masked_logits(&s, &Array2::ones((2, 3)), &Array1::ones(3));
        assert!((logits[0] - 0.6).abs() < 1e-15);
        assert!((logits[1] + 0.25).abs() < 1e-15);
    }

    #[test]
    fn zero_posterior_gives_zero_logits() {
        // large negative Ws drives q to 0 in expected mode
        let v = vocab(array![[1.0, 0.0], [0.0, 1.0]]);
        let m = model(array![3.0, -2.0], array![[-1e4, -1e4], [-1e4, -1e4]]);
        let fwd = concept_forward(&m, &array![[1.0, 1.0], [2.0, 0.5]], &v, MaskMode::Expected).unwrap();
        assert!(fwd.logits.iter().all(|a| a.abs() < 1e-300));
    }

    #[test]
    fn kl_cases() {
        assert!(kl_bernoulli(1e-4, 1e-4).unwrap().abs() < 1e-18);
        assert_eq!(kl_bernoulli(0.5, 0.5).unwrap(), 0.0);
        assert!(kl_bernoulli(0.3, 0.0).is_err());
        assert!(kl_bernoulli(0.3, 1.0).is_err());
        assert!(kl_bernoulli(0.0, 0.2).unwrap().is_finite());
    }

    #[test]
    fn beta_zero_is_plain_bce() {
        let v = vocab(array![[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]]);
        let mut m = model(array![1.0, -1.0, 0.5], array![[0.2, 0.1], [0.0, -0.3], [0.4, 0.4]]);
        m.beta = 0.0;
        let x = array![[1.0, 0.2], [0.3, 1.0]];
        let y = array![1.0, 0.0];
        let (parts, _) = concept_loss(&m, &x, &y, &v, MaskMode::Expected).unwrap();
        let fwd = concept_forward(&m, &x, &v, MaskMode::Expected).unwrap();
        assert_eq!(parts.total, bce_with_grad(&fwd.logits, &y).0);
    }

    #[test]
    fn sampled_mask_is_seeded() {
        let v = vocab(array![[1.0, 0.0], [0.0, 1.0]]);
        let m = model(array![1.0, 1.0], array![[0.5, 0.0], [0.0, -0.5]]);
        let x = array![[1.0, 0.5], [0.2, 1.0]];
        let a = concept_forward(&m, &x, &v, MaskMode::Sample(&mut ops::rng(4))).unwrap();
        let b = concept_forward(&m, &x, &v, MaskMode::Sample(&mut ops::rng(4))).unwrap();
        assert_eq!(a.mask, b.mask);
        assert!(a.mask.iter().all(|&z| (0.0..=1.0).contains(&z)));
    }

    #[test]
    fn vocabulary_shape_mismatch() {
        let v = vocab(array![[1.0, 0.0]]);
        let m = model(array![1.0, 1.0], Array2::zeros((2, 2)));
        assert!(concept_forward(&m, &array![[1.0, 0.0]], &v, MaskMode::Expected).is_err());
    }
}

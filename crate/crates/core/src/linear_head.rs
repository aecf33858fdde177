//! Two-layer linear detector head on frozen CLS hidden states, trained with
//! label-smoothed BCE plus an orthogonality penalty on the first layer's
//! activations. The same trainer fits the single-layer linear probe on
//! joint-space embeddings.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetView, EmbeddingDataset, Split};
use crate::error::{Error, Result};
use crate::ops::{self, sigmoid, softplus};
use crate::optim::{Adam, AdamConfig, WeightDecay};
use crate::training::{shuffled_batches, EarlyStopping, EpochLog, TrainLog, Verdict};

/// Columns with an l2 norm below this cannot be normalized.
pub const COLUMN_NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// `hidden (d) -> W1 (d x k) -> W2 (k x 1)`
    OrthogonalHead,
    /// `joint (p) -> W (p x 1)`
    LinearProbe,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearHeadModel {
    pub mode: HeadMode,
    /// `d x k`; absent for the linear probe.
    pub w1: Option<Array2<f64>>,
    /// Length `k` for the orthogonal head, `p` for the linear probe.
    pub w2: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    /// `n x k`, or `n x 0` for the linear probe.
    pub activations: Array2<f64>,
    pub logits: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w1: Option<Array2<f64>>,
    pub w2: Array1<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub bce: f64,
    pub penalty: f64,
}

impl LinearHeadModel {
    pub fn new(mode: HeadMode, w1: Option<Array2<f64>>, w2: Array1<f64>) -> Result<Self> {
        let m = LinearHeadModel { mode, w1, w2 };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        match (self.mode, &self.w1) {
            (HeadMode::OrthogonalHead, Some(w1)) => {
                if w1.ncols() != self.w2.len() {
                    return Err(Error::dims("W2 length", w1.ncols(), self.w2.len()));
                }
                if w1.is_empty() {
                    return Err(Error::Empty("W1".into()));
                }
            }
            (HeadMode::LinearProbe, None) => {
                if self.w2.is_empty() {
                    return Err(Error::Empty("probe weights".into()));
                }
            }
            (mode, _) => {
                return Err(Error::ModeMismatch(format!(
                    "{mode:?} with W1 {}",
                    if self.w1.is_some() { "present" } else { "absent" }
                )))
            }
        }
        let finite = ops::all_finite(self.w2.iter())
            && self.w1.as_ref().is_none_or(|w| ops::all_finite(w.iter()));
        if !finite {
            return Err(Error::NonFinite {
                what: "head weights".into(),
                row: 0,
                col: 0,
            });
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        match &self.w1 {
            Some(w1) => w1.nrows(),
            None => self.w2.len(),
        }
    }

    /// Hidden width; 0 for the linear probe.
    pub fn k(&self) -> usize {
        self.w1.as_ref().map_or(0, |w| w.ncols())
    }

    /// The embedding matrix this model consumes from a view.
    pub fn inputs(&self, view: &DatasetView<'_>) -> Array2<f64> {
        inputs_for(self.mode, view)
    }

    pub fn forward(&self, inputs: &Array2<f64>) -> Result<Forward> {
        if inputs.ncols() != self.input_dim() {
            return Err(Error::dims("head input width", self.input_dim(), inputs.ncols()));
        }
        Ok(match &self.w1 {
            Some(w1) => {
                let activations = inputs.dot(w1);
                let logits = activations.dot(&self.w2);
                Forward { activations, logits }
            }
            None => Forward {
                activations: Array2::zeros((inputs.nrows(), 0)),
                logits: inputs.dot(&self.w2),
            },
        })
    }

    /// Synthetic-class probabilities.
    pub fn predict_proba(&self, inputs: &Array2<f64>) -> Result<Vec<f64>> {
        Ok(self.forward(inputs)?.logits.iter().map(|&z| sigmoid(z)).collect())
    }

    fn param_sizes(&self) -> Vec<usize> {
        match &self.w1 {
            Some(w1) => vec![w1.len(), self.w2.len()],
            None => vec![self.w2.len()],
        }
    }
}

fn column_normalize(a: &Array2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    if a.nrows() < 2 {
        return Err(Error::InvalidParameter {
            name: "batch size",
            msg: format!("orthogonality penalty needs at least 2 rows, got {}", a.nrows()),
        });
    }
    let norms = a.map_axis(Axis(0), |c| c.dot(&c).sqrt());
    for (j, &n) in norms.iter().enumerate() {
        if !(n >= COLUMN_NORM_FLOOR) {
            return Err(Error::Degenerate {
                what: format!("activation column {j}"),
                norm: n,
                floor: COLUMN_NORM_FLOOR,
            });
        }
    }
    Ok((a / &norms, norms))
}

/// `|I - Abar^T Abar|_F^2` with `Abar` the column-normalized activations.
pub fn orthogonality_penalty(activations: &Array2<f64>) -> Result<f64> {
    Ok(penalty_with_grad(activations)?.0)
}

fn penalty_with_grad(a: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    let (abar, norms) = column_normalize(a)?;
    let k = a.ncols();
    let gram = abar.t().dot(&abar);
    // residual R = I - G; P = sum R^2; dP/dG = -2R; dP/dAbar = Abar (dP/dG + dP/dG^T) = -4 Abar R
    let residual = Array2::<f64>::eye(k) - &gram;
    let value = residual.iter().map(|r| r * r).sum();
    let g_abar = abar.dot(&residual) * -4.0;
    // back through a -> a / |a| per column: (g - abar (abar . g)) / |a|
    let mut g_a = g_abar.clone();
    for j in 0..k {
        let col = abar.column(j);
        let dot = col.dot(&g_abar.column(j));
        let mut out = g_a.column_mut(j);
        out.scaled_add(-dot, &col);
        out.mapv_inplace(|v| v / norms[j]);
    }
    Ok((value, g_a))
}

fn smoothed_targets(labels: ArrayView1<'_, f64>, eps: f64) -> Array1<f64> {
    labels.mapv(|y| y * (1.0 - eps) + (1.0 - y) * eps)
}

/// Mean BCE-with-logits against targets `y (1 - eps) + (1 - y) eps`.
pub fn smoothed_bce(logits: &Array1<f64>, labels: &Array1<f64>, eps: f64) -> f64 {
    bce_with_grad(logits, &smoothed_targets(labels.view(), eps)).0
}

/// Mean BCE with logits and its gradient with respect to the logits.
pub(crate) fn bce_with_grad(logits: &Array1<f64>, targets: &Array1<f64>) -> (f64, Array1<f64>) {
    let n = logits.len() as f64;
    let value = logits
        .iter()
        .zip(targets)
        .map(|(&z, &t)| softplus(z) - t * z)
        .sum::<f64>()
        / n;
    let grad = ndarray::Zip::from(logits)
        .and(targets)
        .map_collect(|&z, &t| (sigmoid(z) - t) / n);
    (value, grad)
}

/// Training objective on one batch and its analytic gradients. Weight decay
/// is applied by the optimizer, not here.
pub fn loss(
    model: &LinearHeadModel,
    inputs: &Array2<f64>,
    labels: &Array1<f64>,
    config: &TrainConfig,
) -> Result<(LossParts, Gradients)> {
    if labels.len() != inputs.nrows() {
        return Err(Error::dims("label count", inputs.nrows(), labels.len()));
    }
    let fwd = model.forward(inputs)?;
    let targets = smoothed_targets(labels.view(), config.label_smoothing);
    let (bce, g_logits) = bce_with_grad(&fwd.logits, &targets);

    match &model.w1 {
        None => {
            let g_w = inputs.t().dot(&g_logits);
            Ok((
                LossParts {
                    total: bce,
                    bce,
                    penalty: 0.0,
                },
                Gradients { w1: None, w2: g_w },
            ))
        }
        Some(_) => {
            let g_w2 = fwd.activations.t().dot(&g_logits);
            // dL/dA from the BCE path: outer(g_logits, w2)
            let g_logits_col = g_logits.view().insert_axis(Axis(1));
            let w2_row = model.w2.view().insert_axis(Axis(0));
            let mut g_act = g_logits_col.dot(&w2_row);
            let penalty = if config.lambda != 0.0 {
                let (p, g_pen) = penalty_with_grad(&fwd.activations)?;
                g_act.scaled_add(config.lambda, &g_pen);
                p
            } else {
                orthogonality_penalty(&fwd.activations)?
            };
            let g_w1 = inputs.t().dot(&g_act);
            Ok((
                LossParts {
                    total: bce + config.lambda * penalty,
                    bce,
                    penalty,
                },
                Gradients {
                    w1: Some(g_w1),
                    w2: g_w2,
                },
            ))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: HeadMode,
    pub k: usize,
    pub lambda: f64,
    pub label_smoothing: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: HeadMode::OrthogonalHead,
            k: 8,
            lambda: 0.33,
            label_smoothing: 0.1,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            adam_eps: 1e-8,
            batch_size: 64,
            max_epochs: 200,
            patience: 5,
            seed: 123,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |name, msg: &str| {
            Err(Error::InvalidParameter {
                name,
                msg: msg.to_string(),
            })
        };
        if self.mode == HeadMode::OrthogonalHead && self.k == 0 {
            return bad("k", "must be >= 1");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda", "must be >= 0");
        }
        if !(0.0..0.5).contains(&self.label_smoothing) {
            return bad("label_smoothing", "must lie in [0, 0.5)");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate", "must be > 0");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", "must be >= 0");
        }
        if !(0.0..1.0).contains(&self.betas.0) || !(0.0..1.0).contains(&self.betas.1) {
            return bad("betas", "must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps", "must be > 0");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return bad("batch_size/max_epochs/patience", "must be >= 1");
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.betas.0,
            beta2: self.betas.1,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
            decay: WeightDecay::Coupled,
        }
    }
}

/// Orthogonal initialization for the given mode and input width.
pub fn init_model(mode: HeadMode, input_dim: usize, k: usize, seed: u64) -> LinearHeadModel {
    let mut rng = ops::rng(seed);
    match mode {
        HeadMode::OrthogonalHead => {
            let w1 = ops::orthogonal(input_dim, k, &mut rng);
            let w2 = ops::orthogonal(k, 1, &mut rng).column(0).to_owned();
            LinearHeadModel {
                mode,
                w1: Some(w1),
                w2,
            }
        }
        HeadMode::LinearProbe => LinearHeadModel {
            mode,
            w1: None,
            w2: ops::orthogonal(input_dim, 1, &mut rng).column(0).to_owned(),
        },
    }
}

pub fn inputs_for(mode: HeadMode, view: &DatasetView<'_>) -> Array2<f64> {
    match mode {
        HeadMode::OrthogonalHead => view.hidden(),
        HeadMode::LinearProbe => view.joint(),
    }
}

/// Fit a head on the dataset's train split, early-stopping on the
/// validation split. Deterministic given `config.seed`.
pub fn train(dataset: &EmbeddingDataset, config: &TrainConfig) -> Result<(LinearHeadModel, TrainLog)> {
    config.validate()?;
    let train_view = dataset.select(Split::Train, None)?;
    let val_view = dataset.select(Split::Val, None)?;
    if train_view.is_empty() {
        return Err(Error::Empty("train split".into()));
    }
    if val_view.is_empty() {
        return Err(Error::Empty("val split".into()));
    }
    let x_train = inputs_for(config.mode, &train_view);
    let y_train = Array1::from(train_view.labels());
    let x_val = inputs_for(config.mode, &val_view);
    let y_val = Array1::from(val_view.labels());
    let min_batch = match config.mode {
        HeadMode::OrthogonalHead => 2,
        HeadMode::LinearProbe => 1,
    };
    if x_train.nrows() < min_batch || x_val.nrows() < min_batch {
        return Err(Error::InvalidParameter {
            name: "split size",
            msg: format!("train and val splits need at least {min_batch} records"),
        });
    }

    let mut model = init_model(config.mode, x_train.ncols(), config.k, config.seed);
    // Shuffling draws from its own stream so the init stays fixed.
    let mut shuffle_rng = ops::rng(config.seed.wrapping_add(1));
    let mut opt = Adam::new(config.adam(), &model.param_sizes());
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best = model.clone();
    let mut log = TrainLog::default();

    for epoch in 1..=config.max_epochs {
        let mut total = 0.0;
        for batch in shuffled_batches(x_train.nrows(), config.batch_size, min_batch, &mut shuffle_rng) {
            let xb = x_train.select(Axis(0), &batch);
            let yb = y_train.select(Axis(0), &batch);
            let (parts, grads) = loss(&model, &xb, &yb, config)?;
            if !parts.total.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            total += parts.total * batch.len() as f64;
            step(&mut opt, &mut model, &grads);
        }
        let train_loss = total / x_train.nrows() as f64;
        let (val, _) = loss(&model, &x_val, &y_val, config)?;
        if !val.total.is_finite() || !train_loss.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        log.epochs.push(EpochLog {
            epoch,
            train_loss,
            val_loss: Some(val.bce),
            penalty: Some(val.penalty),
        });
        // Stopping tracks the classification term; the penalty is logged
        // separately and its sampling noise would otherwise dominate.
        match stopper.observe(epoch, val.bce) {
            Verdict::Improved => best = model.clone(),
            Verdict::Waiting => {}
            Verdict::Stop => {
                log.stopped_early = true;
                break;
            }
        }
    }
    log.best_epoch = stopper.best_epoch().unwrap_or(0);
    log.best_val_loss = stopper.best();
    Ok((best, log))
}

fn step(opt: &mut Adam, model: &mut LinearHeadModel, grads: &Gradients) {
    let w2 = model.w2.as_slice_mut().expect("contiguous");
    let g2 = grads.w2.as_slice().expect("contiguous");
    match (&mut model.w1, &grads.w1) {
        (Some(w1), Some(g1)) => {
            let w1 = w1.as_slice_mut().expect("contiguous");
            let g1 = g1.as_standard_layout();
            let g1 = g1.as_slice().expect("contiguous");
            opt.step(&mut [w1, w2], &[g1, g2]);
        }
        _ => opt.step(&mut [w2], &[g2]),
    }
}

/// Mean absolute off-diagonal entry of the column-normalized activation
/// Gram matrix; 0 for perfectly de-correlated features.
pub fn mean_abs_offdiag_gram(activations: &Array2<f64>) -> Result<f64> {
    let (abar, _) = column_normalize(activations)?;
    let k = abar.ncols();
    if k < 2 {
        return Ok(0.0);
    }
    let gram = abar.t().dot(&abar);
    let mut sum = 0.0;
    for i in 0..k {
        for j in 0..k {
            if i != j {
                sum += gram[[i, j]].abs();
            }
        }
    }
    Ok(sum / (k * (k - 1)) as f64)
}

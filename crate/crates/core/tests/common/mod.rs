//! Reference computations for the integration tests: brute-force metric
//! oracles, explicit loops for matrix arithmetic, and finite-difference
//! gradient checks.

#![allow(dead_code)]

use clipsid::concept::{self, ConceptModel, Features, MaskMode};
use clipsid::dataset::{Term, Vocabulary, VocabularyKind};
use clipsid::linear_head::{self, HeadMode, LinearHeadModel, TrainConfig};
use clipsid::ops::{self, Rng};
use ndarray::{Array1, Array2};
use rand::Rng as _;

pub fn rand_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Array2<f64> {
    ops::gaussian(rows, cols, 1.0, rng)
}

/// Triple-loop matrix product.
pub fn matmul(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.nrows(), b.ncols()));
    for i in 0..a.nrows() {
        for j in 0..b.ncols() {
            let mut s = 0.0;
            for t in 0..a.ncols() {
                s += a[[i, t]] * b[[t, j]];
            }
            out[[i, j]] = s;
        }
    }
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `|I - G|_F^2` with G the explicit Gram matrix of unit-normalized columns.
pub fn penalty_oracle(a: &Array2<f64>) -> f64 {
    let (n, k) = a.dim();
    let norms: Vec<f64> = (0..k)
        .map(|j| (0..n).map(|i| a[[i, j]] * a[[i, j]]).sum::<f64>().sqrt())
        .collect();
    let mut total = 0.0;
    for p in 0..k {
        for q in 0..k {
            let g: f64 = (0..n).map(|i| a[[i, p]] / norms[p] * a[[i, q]] / norms[q]).sum();
            let r = if p == q { 1.0 - g } else { -g };
            total += r * r;
        }
    }
    total
}

/// Sum over every distinct score cut-off `t` (descending) of
/// `(tp(t) - tp(prev)) / P * precision(t)`, counting by full scans.
pub fn ap_oracle(scores: &[f64], labels: &[f64]) -> f64 {
    let pos = labels.iter().filter(|&&y| y > 0.5).count();
    let mut cuts: Vec<f64> = scores.to_vec();
    cuts.sort_by(|a, b| b.partial_cmp(a).unwrap());
    cuts.dedup();
    let mut prev_tp = 0usize;
    let mut ap = 0.0;
    for t in cuts {
        let tp = (0..scores.len()).filter(|&i| scores[i] >= t && labels[i] > 0.5).count();
        let fp = (0..scores.len()).filter(|&i| scores[i] >= t && labels[i] <= 0.5).count();
        ap += ((tp - prev_tp) as f64 / pos as f64) * (tp as f64 / (tp + fp) as f64);
        prev_tp = tp;
    }
    ap
}

/// Pairwise Mann-Whitney count.
pub fn auc_oracle(scores: &[f64], labels: &[f64]) -> f64 {
    let mut wins = 0.0;
    let (mut p, mut n) = (0usize, 0usize);
    for &l in &labels[..scores.len()] {
        if l > 0.5 {
            p += 1;
        } else {
            n += 1;
        }
    }
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] > 0.5 && labels[j] <= 0.5 {
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / (p * n) as f64
}

/// Every candidate threshold evaluated by a full scan; first maximum wins.
pub fn threshold_oracle(scores: &[f64], labels: &[f64]) -> (f64, f64) {
    let mut vals = scores.to_vec();
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    vals.dedup();
    let mut cands = vec![vals[0]];
    for w in vals.windows(2) {
        let m = w[0] + (w[1] - w[0]) / 2.0;
        cands.push(if m > w[0] && m <= w[1] { m } else { w[1] });
    }
    cands.push(f64::INFINITY);
    let pos = labels.iter().filter(|&&y| y > 0.5).count();
    let neg = labels.len() - pos;
    let mut best = (f64::NAN, -1.0);
    for t in cands {
        let tp = (0..scores.len()).filter(|&i| scores[i] >= t && labels[i] > 0.5).count();
        let tn = (0..scores.len()).filter(|&i| scores[i] < t && labels[i] <= 0.5).count();
        let ba = 0.5 * (tp as f64 / pos as f64 + tn as f64 / neg as f64);
        if ba > best.1 {
            best = (t, ba);
        }
    }
    best
}

/// Random binary problem of size `2..=max_n` with both classes and frequent
/// ties (scores drawn from a small grid).
pub fn random_instance(rng: &mut Rng, max_n: usize) -> (Vec<f64>, Vec<f64>) {
    loop {
        let n = rng.random_range(2..=max_n);
        let grid = rng.random_range(2..=8u32);
        let scores: Vec<f64> = (0..n)
            .map(|_| f64::from(rng.random_range(0..grid)) / f64::from(grid))
            .collect();
        let labels: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..2u8))).collect();
        let pos = labels.iter().filter(|&&y| y > 0.5).count();
        if pos > 0 && pos < n {
            return (scores, labels);
        }
    }
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn central_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut work = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = work[i];
            work[i] = orig + h;
            let up = f(&work);
            work[i] = orig - h;
            let down = f(&work);
            work[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a - b|_2 / max(|a|_2, |b|_2)`
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub fn labels_alternating(n: usize) -> Array1<f64> {
    Array1::from_shape_fn(n, |i| (i % 2) as f64)
}

/// Worst relative gradient error of the orthogonal-head objective
/// (8 x 6 batch, k = 3, lambda = 0.33, eps = 0.1) for one random draw.
pub fn head_gradient_error(seed: u64) -> f64 {
    let mut rng = ops::rng(seed);
    let (n, d, k) = (8, 6, 3);
    let x = rand_matrix(n, d, &mut rng);
    let y = Array1::from_shape_fn(n, |_| f64::from(rng.random_range(0..2u8)));
    let w1 = rand_matrix(d, k, &mut rng);
    let w2 = rand_matrix(k, 1, &mut rng).column(0).to_owned();
    let cfg = TrainConfig::default();
    let model = LinearHeadModel::new(HeadMode::OrthogonalHead, Some(w1.clone()), w2.clone()).unwrap();
    let (_, grads) = linear_head::loss(&model, &x, &y, &cfg).unwrap();

    let objective = |w1f: &[f64], w2f: &[f64]| {
        let m = LinearHeadModel::new(
            HeadMode::OrthogonalHead,
            Some(Array2::from_shape_vec((d, k), w1f.to_vec()).unwrap()),
            Array1::from(w2f.to_vec()),
        )
        .unwrap();
        linear_head::loss(&m, &x, &y, &cfg).unwrap().0.total
    };
    let w1f = w1.iter().copied().collect::<Vec<_>>();
    let w2f = w2.to_vec();
    let fd1 = central_diff(&w1f, 1e-5, |p| objective(p, &w2f));
    let fd2 = central_diff(&w2f, 1e-5, |p| objective(&w1f, p));
    let g1: Vec<f64> = grads.w1.unwrap().iter().copied().collect();
    relative_error(&g1, &fd1).max(relative_error(grads.w2.as_slice().unwrap(), &fd2))
}

pub fn unit_rows(m: Array2<f64>) -> Array2<f64> {
    ops::normalize_rows(&m, "row").unwrap()
}

pub fn plain_vocab(emb: Array2<f64>) -> Vocabulary {
    let terms = (0..emb.nrows())
        .map(|i| Term {
            name: format!("t{i}"),
            category: String::new(),
        })
        .collect();
    Vocabulary::new("v", VocabularyKind::Plain, terms, emb).unwrap()
}

/// Worst relative gradient error of the concept objective in expected-mask
/// mode (4 samples, 6 concepts, p = 5) for one random draw.
pub fn concept_gradient_error(seed: u64) -> f64 {
    let mut rng = ops::rng(seed);
    let (m, n, p) = (4, 6, 5);
    let images = rand_matrix(m, p, &mut rng);
    let vocab = plain_vocab(unit_rows(rand_matrix(n, p, &mut rng)));
    let y = Array1::from(vec![0.0, 1.0, 1.0, 0.0]);
    let wc = rand_matrix(n, 1, &mut rng).column(0).to_owned();
    let ws = rand_matrix(n, p, &mut rng);
    let model = ConceptModel {
        wc: wc.clone(),
        ws: ws.clone(),
        alpha: 1e-2,
        tau: 0.1,
        beta: 0.1,
        vocabulary: "v".into(),
    };
    let features = Features::new(&images, &vocab).unwrap();
    let (_, grads) = concept::loss_on_features(&model, &features, &y, MaskMode::Expected).unwrap();
    let objective = |wcf: &[f64], wsf: &[f64]| {
        let mm = ConceptModel {
            wc: Array1::from(wcf.to_vec()),
            ws: Array2::from_shape_vec((n, p), wsf.to_vec()).unwrap(),
            ..model.clone()
        };
        concept::concept_loss(&mm, &images, &y, &vocab, MaskMode::Expected).unwrap().0.total
    };
    let wcf = wc.to_vec();
    let wsf: Vec<f64> = ws.iter().copied().collect();
    let fd_c = central_diff(&wcf, 1e-5, |q| objective(q, &wsf));
    let fd_s = central_diff(&wsf, 1e-5, |q| objective(&wcf, q));
    let gs: Vec<f64> = grads.ws.iter().copied().collect();
    relative_error(grads.wc.as_slice().unwrap(), &fd_c).max(relative_error(&gs, &fd_s))
}

//! Small numeric helpers shared by the models.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub type Rng = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x) without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn norm(v: ArrayView1<'_, f64>) -> f64 {
    v.dot(&v).sqrt()
}

/// `v / |v|`, or a degenerate-direction error when `|v| < floor`.
pub fn normalized(v: ArrayView1<'_, f64>, what: impl FnOnce() -> String, floor: f64) -> Result<Array1<f64>> {
    let n = norm(v);
    if !(n >= floor) {
        return Err(Error::Degenerate {
            what: what(),
            norm: n,
            floor,
        });
    }
    Ok(v.mapv(|x| x / n))
}

/// Row-wise l2 normalization. Errors on a zero row.
pub fn normalize_rows(m: &Array2<f64>, what: &str) -> Result<Array2<f64>> {
    let mut out = m.clone();
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let n = row.dot(&row).sqrt();
        if !(n > 0.0) {
            return Err(Error::Degenerate {
                what: format!("{what} row {i}"),
                norm: n,
                floor: 0.0,
            });
        }
        row.mapv_inplace(|x| x / n);
    }
    Ok(out)
}

pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

/// Matrix with orthonormal columns (or rows, when `rows < cols`), from a
/// QR factorization of a seeded Gaussian matrix. The factorization uses
/// modified Gram-Schmidt, which yields Q with a positive R diagonal.
pub fn orthogonal(rows: usize, cols: usize, rng: &mut Rng) -> Array2<f64> {
    let transpose = rows < cols;
    let (r, c) = if transpose { (cols, rows) } else { (rows, cols) };
    let mut q = gaussian(r, c, 1.0, rng);
    for j in 0..c {
        for i in 0..j {
            let proj = q.column(i).dot(&q.column(j));
            let qi = q.column(i).to_owned();
            q.column_mut(j).scaled_add(-proj, &qi);
        }
        let n = norm(q.column(j));
        q.column_mut(j).mapv_inplace(|x| x / n);
    }
    if transpose {
        q.reversed_axes().as_standard_layout().into_owned()
    } else {
        q
    }
}

pub fn all_finite<'a>(values: impl IntoIterator<Item = &'a f64>) -> bool {
    values.into_iter().all(|v| v.is_finite())
}

use crate::error::{Error, Result};
use crate::flops;
use crate::linalg::Matrix;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const CUBIC: f64 = 0.044715;

/// Tanh-approximated GELU.
pub fn gelu_fwd(x: &Matrix) -> Matrix {
    flops::add(flops::GELU_PER_ELEM * x.data().len() as u64);
    let data = x
        .data()
        .iter()
        .map(|&v| 0.5 * v * (1.0 + (SQRT_2_OVER_PI * (v + CUBIC * v * v * v)).tanh()))
        .collect();
    Matrix::from_vec_unchecked(x.rows(), x.cols(), data)
}

pub fn gelu_bwd(x: &Matrix, dy: &Matrix) -> Result<Matrix> {
    if x.shape() != dy.shape() {
        return Err(Error::shape("gelu_bwd", format!("{:?} vs {:?}", x.shape(), dy.shape())));
    }
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| {
            let inner = SQRT_2_OVER_PI * (v + CUBIC * v * v * v);
            let t = inner.tanh();
            let dinner = SQRT_2_OVER_PI * (1.0 + 3.0 * CUBIC * v * v);
            g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner)
        })
        .collect();
    Ok(Matrix::from_vec_unchecked(x.rows(), x.cols(), data))
}

/// Numerically stable softmax of one row, in place.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Row-wise softmax.
pub fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i));
    }
    out
}

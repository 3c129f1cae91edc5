use crate::error::{Error, Result};
use crate::flops;
use crate::linalg::Matrix;

/// Variance floor. Small enough that normalized rows have unit variance to
/// well within 1e-6 for any non-degenerate input.
pub const LAYERNORM_EPS: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub xhat: Matrix,
    pub inv_std: Vec<f64>,
}

/// Normalizes each row to zero mean and unit variance, then applies the
/// per-feature `gain` and `shift`.
pub fn layernorm_fwd(x: &Matrix, gain: &[f64], shift: &[f64]) -> Result<(Matrix, LayerNormCache)> {
    let d = x.cols();
    if gain.len() != d || shift.len() != d {
        return Err(Error::shape(
            "layernorm_fwd",
            format!("x {:?}, gain {}, shift {}", x.shape(), gain.len(), shift.len()),
        ));
    }
    flops::add(flops::LAYERNORM_PER_ELEM * x.data().len() as u64);
    let mut xhat = Matrix::zeros(x.rows(), d);
    let mut y = Matrix::zeros(x.rows(), d);
    let mut inv_std = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LAYERNORM_EPS).sqrt();
        inv_std.push(is);
        let xh = xhat.row_mut(i);
        for (o, v) in xh.iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
        let yr = y.row_mut(i);
        for j in 0..d {
            yr[j] = xhat.get(i, j) * gain[j] + shift[j];
        }
    }
    Ok((y, LayerNormCache { xhat, inv_std }))
}

/// Returns `(dx, dgain, dshift)`.
pub fn layernorm_bwd(cache: &LayerNormCache, gain: &[f64], dy: &Matrix) -> Result<(Matrix, Vec<f64>, Vec<f64>)> {
    let (rows, d) = cache.xhat.shape();
    if dy.shape() != (rows, d) || gain.len() != d {
        return Err(Error::shape(
            "layernorm_bwd",
            format!("dy {:?}, xhat {:?}", dy.shape(), (rows, d)),
        ));
    }
    let mut dx = Matrix::zeros(rows, d);
    let mut dgain = vec![0.0; d];
    let mut dshift = vec![0.0; d];
    let mut dxhat = vec![0.0; d];
    for i in 0..rows {
        let g = dy.row(i);
        let xh = cache.xhat.row(i);
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            dgain[j] += g[j] * xh[j];
            dshift[j] += g[j];
            dxhat[j] = g[j] * gain[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xh[j];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let is = cache.inv_std[i];
        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
            *o = is * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    Ok((dx, dgain, dshift))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalized_rows_have_zero_mean_unit_variance() {
        let x = Matrix::seeded_random(5, 16, 3, 2.5);
        let (y, _) = layernorm_fwd(&x, &[1.0; 16], &[0.0; 16]).unwrap();
        for i in 0..5 {
            let r = y.row(i);
            let mean = r.iter().sum::<f64>() / 16.0;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }
}

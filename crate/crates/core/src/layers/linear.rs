use crate::error::{Error, Result};
use crate::flops;
use crate::linalg::{kernels, ColumnPrefix, Matrix};

#[derive(Debug, Clone)]
pub struct LinearGrads {
    pub dw: Matrix,
    pub db: Vec<f64>,
    pub dx: Matrix,
}

#[derive(Debug, Clone)]
pub struct LowRankGrads {
    /// `m × r`
    pub du: Matrix,
    /// `n × r`
    pub dv: Matrix,
    pub db: Vec<f64>,
    pub dx: Matrix,
}

fn add_bias(y: &mut Matrix, b: &[f64]) {
    flops::add(flops::ELEMENTWISE * y.data().len() as u64);
    for i in 0..y.rows() {
        for (v, bj) in y.row_mut(i).iter_mut().zip(b) {
            *v += bj;
        }
    }
}

fn column_sums(dy: &Matrix) -> Vec<f64> {
    let mut db = vec![0.0; dy.cols()];
    for i in 0..dy.rows() {
        for (acc, v) in db.iter_mut().zip(dy.row(i)) {
            *acc += v;
        }
    }
    db
}

/// `y = x·W + b` with `x: rows × m`, `W: m × n`.
pub fn linear_fwd(x: &Matrix, w: &Matrix, b: &[f64]) -> Result<Matrix> {
    if x.cols() != w.rows() || b.len() != w.cols() {
        return Err(Error::shape(
            "linear_fwd",
            format!("x {:?}, W {:?}, b {}", x.shape(), w.shape(), b.len()),
        ));
    }
    let mut y = x.matmul(w)?;
    add_bias(&mut y, b);
    Ok(y)
}

pub fn linear_bwd(x: &Matrix, w: &Matrix, dy: &Matrix) -> Result<LinearGrads> {
    if x.rows() != dy.rows() || x.cols() != w.rows() || dy.cols() != w.cols() {
        return Err(Error::shape(
            "linear_bwd",
            format!("x {:?}, W {:?}, dy {:?}", x.shape(), w.shape(), dy.shape()),
        ));
    }
    Ok(LinearGrads {
        dw: x.t_matmul(dy)?,
        db: column_sums(dy),
        dx: dy.matmul_t(w)?,
    })
}

fn check_lowrank(op: &'static str, x: &Matrix, u: &ColumnPrefix, v: &ColumnPrefix) -> Result<()> {
    if x.cols() != u.rows() || u.cols() != v.cols() {
        return Err(Error::shape(
            op,
            format!(
                "x {:?}, U {}×{}, V {}×{}",
                x.shape(),
                u.rows(),
                u.cols(),
                v.rows(),
                v.cols()
            ),
        ));
    }
    Ok(())
}

/// `y = (x·U_r)·V_rᵀ + b`, evaluated as two skinny products. Returns `y` and
/// the intermediate `z = x·U_r` needed by the backward pass.
pub fn lowrank_linear_fwd(x: &Matrix, u: ColumnPrefix<'_>, v: ColumnPrefix<'_>, b: &[f64]) -> Result<(Matrix, Matrix)> {
    check_lowrank("lowrank_linear_fwd", x, &u, &v)?;
    if b.len() != v.rows() {
        return Err(Error::shape(
            "lowrank_linear_fwd",
            format!("bias {} vs n {}", b.len(), v.rows()),
        ));
    }
    let (rows, m, r, n) = (x.rows(), u.rows(), u.cols(), v.rows());
    let mut z = Matrix::zeros(rows, r);
    kernels::mm_nn(x.data(), m, u.raw(), u.stride(), z.data_mut(), r, rows, m, r);
    let mut y = Matrix::zeros(rows, n);
    kernels::mm_nt(z.data(), r, v.raw(), v.stride(), y.data_mut(), n, rows, r, n);
    add_bias(&mut y, b);
    Ok((y, z))
}

pub fn lowrank_linear_bwd(
    x: &Matrix,
    u: ColumnPrefix<'_>,
    v: ColumnPrefix<'_>,
    z: &Matrix,
    dy: &Matrix,
) -> Result<LowRankGrads> {
    check_lowrank("lowrank_linear_bwd", x, &u, &v)?;
    let (rows, m, r, n) = (x.rows(), u.rows(), u.cols(), v.rows());
    if dy.shape() != (rows, n) || z.shape() != (rows, r) {
        return Err(Error::shape(
            "lowrank_linear_bwd",
            format!("dy {:?}, z {:?}", dy.shape(), z.shape()),
        ));
    }
    // dV = dyᵀ z
    let dv = dy.t_matmul(z)?;
    // dz = dy V_r
    let mut dz = Matrix::zeros(rows, r);
    kernels::mm_nn(dy.data(), n, v.raw(), v.stride(), dz.data_mut(), r, rows, n, r);
    // dU = xᵀ dz
    let du = x.t_matmul(&dz)?;
    // dx = dz U_rᵀ
    let mut dx = Matrix::zeros(rows, m);
    kernels::mm_nt(dz.data(), r, u.raw(), u.stride(), dx.data_mut(), m, rows, r, m);
    Ok(LowRankGrads {
        du,
        dv,
        db: column_sums(dy),
        dx,
    })
}

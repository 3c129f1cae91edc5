use super::activation::softmax_in_place;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// A scalar loss and its gradient with respect to the logits it was computed from.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: Matrix,
}

/// Mean negative log-likelihood of `labels` under row-wise softmax of `logits`.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<LossOutput> {
    let (n, c) = logits.shape();
    if labels.is_empty() || labels.len() != n {
        return Err(Error::shape(
            "cross_entropy",
            format!("{n} logit rows, {} labels", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Argument(format!("label {bad} with {c} classes")));
    }
    let mut grad = logits.clone();
    let mut loss = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let row = grad.row_mut(i);
        softmax_in_place(row);
        loss -= row[label].max(f64::MIN_POSITIVE).ln();
        row[label] -= 1.0;
        for g in row.iter_mut() {
            *g /= n as f64;
        }
    }
    Ok(LossOutput {
        loss: loss / n as f64,
        grad,
    })
}

/// Temperature-scaled distillation loss `τ² · mean KL(softmax(t/τ) ‖ softmax(s/τ))`,
/// with the gradient taken with respect to the student logits only.
pub fn kd_loss(student: &Matrix, teacher: &Matrix, temperature: f64) -> Result<LossOutput> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::Argument(format!("temperature {temperature} must be positive")));
    }
    if student.shape() != teacher.shape() || student.rows() == 0 {
        return Err(Error::shape(
            "kd_loss",
            format!("{:?} vs {:?}", student.shape(), teacher.shape()),
        ));
    }
    let n = student.rows();
    let mut grad = Matrix::zeros(n, student.cols());
    let mut loss = 0.0;
    let mut ps: Vec<f64> = Vec::with_capacity(student.cols());
    let mut pt: Vec<f64> = Vec::with_capacity(student.cols());
    for i in 0..n {
        ps.clear();
        ps.extend(student.row(i).iter().map(|v| v / temperature));
        pt.clear();
        pt.extend(teacher.row(i).iter().map(|v| v / temperature));
        softmax_in_place(&mut ps);
        softmax_in_place(&mut pt);
        for (&a, &b) in pt.iter().zip(&ps) {
            if a > 0.0 {
                loss += a * (a.ln() - b.max(f64::MIN_POSITIVE).ln());
            }
        }
        for (g, (&a, &b)) in grad.row_mut(i).iter_mut().zip(pt.iter().zip(&ps)) {
            *g = temperature * (b - a) / n as f64;
        }
    }
    Ok(LossOutput {
        loss: temperature * temperature * loss / n as f64,
        grad,
    })
}

/// `½·cross_entropy + ½·kd_loss` at temperature 1.
pub fn distillation_loss(student: &Matrix, teacher: &Matrix, labels: &[usize]) -> Result<LossOutput> {
    let ce = cross_entropy(student, labels)?;
    let kd = kd_loss(student, teacher, 1.0)?;
    let grad = ce.grad.scaled(0.5).add(&kd.grad.scaled(0.5))?;
    Ok(LossOutput {
        loss: 0.5 * ce.loss + 0.5 * kd.loss,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confident_correct_logits_give_near_zero_loss() {
        let logits = Matrix::from_rows(&[&[50.0, 0.0, 0.0], &[0.0, 0.0, 50.0]]);
        let out = cross_entropy(&logits, &[0, 2]).unwrap();
        assert!(out.loss < 1e-20);
    }

    #[test]
    fn identical_distributions_have_zero_kd() {
        let p = Matrix::seeded_random(4, 5, 2, 3.0);
        for tau in [0.5, 1.0, 4.0] {
            let out = kd_loss(&p, &p, tau).unwrap();
            assert!(out.loss.abs() < 1e-15);
            assert!(out.grad.frobenius_norm() < 1e-15);
        }
    }

    #[test]
    fn errors() {
        let p = Matrix::zeros(2, 3);
        assert!(cross_entropy(&p, &[0]).is_err());
        assert!(cross_entropy(&p, &[0, 3]).is_err());
        assert!(kd_loss(&p, &p, 0.0).is_err());
        assert!(kd_loss(&p, &Matrix::zeros(2, 4), 1.0).is_err());
    }
}

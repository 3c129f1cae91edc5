//! Softmax multi-head self-attention over already-projected q, k, v.
//!
//! Inputs are `(batch·tokens) × dim` with tokens of one sample contiguous;
//! head `h` owns feature columns `h·dh .. (h+1)·dh`.

use super::activation::softmax_in_place;
use crate::error::{Error, Result};
use crate::flops;
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionShape {
    pub batch: usize,
    pub tokens: usize,
    pub heads: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    /// Softmax probabilities, `batch × heads × tokens × tokens`.
    pub probs: Vec<f64>,
}

fn check(op: &'static str, s: AttentionShape, mats: &[&Matrix]) -> Result<usize> {
    let d = mats[0].cols();
    if s.batch == 0 || s.tokens == 0 || s.heads == 0 || !d.is_multiple_of(s.heads) {
        return Err(Error::shape(op, format!("{s:?} with dim {d}")));
    }
    for m in mats {
        if m.shape() != (s.batch * s.tokens, d) {
            return Err(Error::shape(
                op,
                format!("{:?} expected {:?}", m.shape(), (s.batch * s.tokens, d)),
            ));
        }
    }
    Ok(d / s.heads)
}

pub fn attention_fwd(q: &Matrix, k: &Matrix, v: &Matrix, s: AttentionShape) -> Result<(Matrix, AttentionCache)> {
    let dh = check("attention_fwd", s, &[q, k, v])?;
    let (t, d) = (s.tokens, q.cols());
    let scale = 1.0 / (dh as f64).sqrt();
    let score_elems = (s.batch * s.heads * t * t) as u64;
    flops::add_macs(s.batch * s.heads * t * t * dh);
    flops::add(flops::ELEMENTWISE * score_elems);
    flops::add(flops::SOFTMAX_PER_ELEM * score_elems);
    flops::add_macs(s.batch * s.heads * t * t * dh);

    let mut probs = vec![0.0; s.batch * s.heads * t * t];
    let mut out = Matrix::zeros(s.batch * t, d);
    for b in 0..s.batch {
        for h in 0..s.heads {
            let off = h * dh;
            let pbase = (b * s.heads + h) * t * t;
            for i in 0..t {
                let qi = &q.row(b * t + i)[off..off + dh];
                let prow = &mut probs[pbase + i * t..pbase + (i + 1) * t];
                for (j, p) in prow.iter_mut().enumerate() {
                    let kj = &k.row(b * t + j)[off..off + dh];
                    let mut acc = 0.0;
                    for (x, y) in qi.iter().zip(kj) {
                        acc += x * y;
                    }
                    *p = acc * scale;
                }
                softmax_in_place(prow);
                let orow = &mut out.row_mut(b * t + i)[off..off + dh];
                for j in 0..t {
                    let pij = probs[pbase + i * t + j];
                    let vj = &v.row(b * t + j)[off..off + dh];
                    for (o, x) in orow.iter_mut().zip(vj) {
                        *o += pij * x;
                    }
                }
            }
        }
    }
    Ok((out, AttentionCache { probs }))
}

/// Returns `(dq, dk, dv)`.
pub fn attention_bwd(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    cache: &AttentionCache,
    dout: &Matrix,
    s: AttentionShape,
) -> Result<(Matrix, Matrix, Matrix)> {
    let dh = check("attention_bwd", s, &[q, k, v, dout])?;
    let (t, d) = (s.tokens, q.cols());
    if cache.probs.len() != s.batch * s.heads * t * t {
        return Err(Error::shape("attention_bwd", "probability cache size"));
    }
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Matrix::zeros(s.batch * t, d);
    let mut dk = Matrix::zeros(s.batch * t, d);
    let mut dv = Matrix::zeros(s.batch * t, d);
    let mut dp = vec![0.0; t];
    for b in 0..s.batch {
        for h in 0..s.heads {
            let off = h * dh;
            let pbase = (b * s.heads + h) * t * t;
            for i in 0..t {
                let p = &cache.probs[pbase + i * t..pbase + (i + 1) * t];
                let go = &dout.row(b * t + i)[off..off + dh];
                // dP_ij = dO_i · V_j ;  dV_j += P_ij dO_i
                let mut dot_pdp = 0.0;
                for j in 0..t {
                    let vj = &v.row(b * t + j)[off..off + dh];
                    let mut acc = 0.0;
                    for (x, y) in go.iter().zip(vj) {
                        acc += x * y;
                    }
                    dp[j] = acc;
                    dot_pdp += p[j] * acc;
                    let dvj = &mut dv.row_mut(b * t + j)[off..off + dh];
                    for (o, x) in dvj.iter_mut().zip(go) {
                        *o += p[j] * x;
                    }
                }
                // dS_ij = P_ij (dP_ij − Σ_k P_ik dP_ik), scores were scaled.
                for j in 0..t {
                    let ds = p[j] * (dp[j] - dot_pdp) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let (qi, kj) = ((b * t + i) * d + off, (b * t + j) * d + off);
                    let (qd, kd) = (q.data(), k.data());
                    let dqd = dq.data_mut();
                    for c in 0..dh {
                        dqd[qi + c] += ds * kd[kj + c];
                    }
                    let dkd = dk.data_mut();
                    for c in 0..dh {
                        dkd[kj + c] += ds * qd[qi + c];
                    }
                }
            }
        }
    }
    Ok((dq, dk, dv))
}

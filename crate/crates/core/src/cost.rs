//! Analytic FLOPs and parameter counts.
//!
//! The counts follow the same convention as the instrumented kernels in
//! [`crate::flops`], term by term, so that the analytic figure for a
//! configuration equals what a real forward pass reports.

use std::fmt;

use crate::error::{Error, Result};
use crate::flops::{ELEMENTWISE, GELU_PER_ELEM, LAYERNORM_PER_ELEM, SOFTMAX_PER_ELEM};
use crate::model::{LinearSlot, ModelConfig, Role};

/// FLOPs for one image forward, and parameter count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct CostReport {
    pub flops: u64,
    pub params: u64,
}

impl CostReport {
    /// `flops` as a fraction of `reference.flops`.
    pub fn flops_ratio(&self, reference: &CostReport) -> f64 {
        self.flops as f64 / reference.flops as f64
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "flops={} params={}", self.flops, self.params)
    }
}

/// Inclusive bounds on per-image FLOPs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopsWindow {
    pub lower: u64,
    pub upper: u64,
}

impl FlopsWindow {
    pub fn new(lower: u64, upper: u64) -> Result<Self> {
        if lower == 0 || lower > upper {
            return Err(Error::Config(format!(
                "FLOPs window [{lower}, {upper}] needs 0 < lower <= upper"
            )));
        }
        Ok(Self { lower, upper })
    }

    /// `[ceil(lo·reference), floor(hi·reference)]`.
    pub fn from_fractions(reference: u64, lo: f64, hi: f64) -> Result<Self> {
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!(
                "FLOPs window fractions [{lo}, {hi}] needs 0 < lo <= hi"
            )));
        }
        Self::new(
            (lo * reference as f64).ceil() as u64,
            (hi * reference as f64).floor() as u64,
        )
    }

    pub fn contains(&self, flops: u64) -> bool {
        self.lower <= flops && flops <= self.upper
    }
}

pub fn satisfies(report: &CostReport, w: &FlopsWindow) -> bool {
    w.contains(report.flops)
}

/// `m·n/(m+n)`: a rank-`r` factorization is cheaper than the dense weight
/// exactly when `r` lies strictly below this value.
pub fn breakeven_rank(m: usize, n: usize) -> f64 {
    (m * n) as f64 / (m + n) as f64
}

pub fn lowrank_is_cheaper(m: usize, n: usize, r: usize) -> bool {
    r * (m + n) < m * n
}

/// Cost of one compressible slot on `tokens` tokens; `None` means dense.
pub fn slot_cost(slot: &LinearSlot, rank: Option<usize>, tokens: usize) -> CostReport {
    let (m, n, t) = (slot.m as u64, slot.n as u64, tokens as u64);
    let bias_flops = ELEMENTWISE * t * n;
    match rank {
        None => CostReport {
            flops: 2 * t * m * n + bias_flops,
            params: m * n + n,
        },
        Some(r) => {
            let r = r as u64;
            CostReport {
                flops: 2 * t * r * (m + n) + bias_flops,
                params: r * (m + n) + n,
            }
        }
    }
}

fn block_fixed(cfg: &ModelConfig) -> CostReport {
    let (t, d, h) = (cfg.tokens() as u64, cfg.embed_dim as u64, cfg.heads as u64);
    let hidden = cfg.hidden_dim() as u64;
    let scores = h * t * t;
    let flops = 2 * LAYERNORM_PER_ELEM * t * d
        // scores and context products: two T×T×d_head MAC loops per head
        + 2 * 2 * t * t * d
        + (ELEMENTWISE + SOFTMAX_PER_ELEM) * scores
        + GELU_PER_ELEM * t * hidden
        + 2 * ELEMENTWISE * t * d;
    CostReport { flops, params: 4 * d }
}

/// Cost of one transformer block given its six slot ranks in [`Role`] order.
pub fn block_cost(cfg: &ModelConfig, block: usize, ranks: &[Option<usize>]) -> Result<CostReport> {
    if block >= cfg.depth || ranks.len() != Role::ALL.len() {
        return Err(Error::Argument(format!(
            "block {block} with {} ranks (depth {}, 6 slots per block)",
            ranks.len(),
            cfg.depth
        )));
    }
    let slots = cfg.slots();
    let mut total = block_fixed(cfg);
    for (slot, &r) in slots[block * 6..(block + 1) * 6].iter().zip(ranks) {
        let c = slot_cost(slot, r, cfg.tokens());
        total.flops += c.flops;
        total.params += c.params;
    }
    Ok(total)
}

/// Whole-model cost with one entry per slot (`None` = dense).
pub fn cost_of_slots(cfg: &ModelConfig, ranks: &[Option<usize>]) -> Result<CostReport> {
    cfg.validate()?;
    let slots = cfg.slots();
    if ranks.len() != slots.len() {
        return Err(Error::Argument(format!(
            "{} ranks for {} slots",
            ranks.len(),
            slots.len()
        )));
    }
    for (s, r) in slots.iter().zip(ranks) {
        if let Some(r) = *r {
            if r == 0 {
                return Err(Error::RankNotInChoices {
                    slot: s.id.to_string(),
                    rank: r,
                });
            }
        }
    }
    let (t, d, pd, c) = (
        cfg.tokens() as u64,
        cfg.embed_dim as u64,
        cfg.patch_dim() as u64,
        cfg.classes as u64,
    );
    // patch projection + bias + positions; final norm, pooling, head
    let mut total = CostReport {
        flops: 2 * t * pd * d
            + 2 * ELEMENTWISE * t * d
            + LAYERNORM_PER_ELEM * t * d
            + ELEMENTWISE * t * d
            + 2 * d * c
            + ELEMENTWISE * c,
        params: pd * d + d + t * d + 2 * d + d * c + c,
    };
    for b in 0..cfg.depth {
        let bc = block_cost(cfg, b, &ranks[b * 6..(b + 1) * 6])?;
        total.flops += bc.flops;
        total.params += bc.params;
    }
    Ok(total)
}

/// Whole-model cost; `None` is the dense model, otherwise every slot is
/// factored at the given rank.
pub fn cost_of(cfg: &ModelConfig, ranks: Option<&[usize]>) -> Result<CostReport> {
    match ranks {
        None => cost_of_slots(cfg, &vec![None; cfg.slots().len()]),
        Some(r) => cost_of_slots(cfg, &r.iter().map(|&r| Some(r)).collect::<Vec<_>>()),
    }
}

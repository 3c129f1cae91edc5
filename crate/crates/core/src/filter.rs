//! Block-by-block pruning of the rank space.
//!
//! For each transformer block a local supernet is built in which only that
//! block's six slots carry rank choices; everything else stays dense and
//! frozen. After a short distillation run on a proxy subset, every local
//! candidate is scored by `M = λ·P − F` (accuracy against normalized block
//! cost) and the best `k` survive. The global space is the Cartesian product
//! of the survivors.

use std::cmp::Ordering;

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::cost::block_cost;
use crate::data::{Dataset, DatasetSplit};
use crate::error::{Error, Result};
use crate::model::{Model, Role};
use crate::supernet::{
    train_supernet, RankChoiceSet, RankConfig, SamplingMode, Supernet, SupernetTrainConfig, TraceRecord,
};

#[derive(Debug, Clone, PartialEq)]
pub struct FilterConfig {
    pub lambda: f64,
    pub top_k: usize,
    pub proxy_fraction: f64,
    pub local_epochs: usize,
    /// Largest local space scored exhaustively.
    pub exhaustive_cap: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            lambda: 2.0,
            top_k: 100,
            proxy_fraction: 0.1,
            local_epochs: 5,
            exhaustive_cap: 4096,
            batch_size: 32,
            lr: 0.01,
            seed: 0,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "filter.lambda {} must be finite and >= 0",
                self.lambda
            )));
        }
        if self.top_k == 0 {
            return Err(Error::Config("filter.top_k must be at least 1".into()));
        }
        if !(self.proxy_fraction > 0.0 && self.proxy_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "filter.proxy_fraction {} must lie in (0, 1]",
                self.proxy_fraction
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("filter.batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Score of one local candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionCostScore {
    pub candidate: Vec<usize>,
    pub p: f64,
    pub f: f64,
    pub m: f64,
}

impl PrecisionCostScore {
    pub fn new(candidate: Vec<usize>, p: f64, f: f64, lambda: f64) -> Self {
        Self {
            candidate,
            p,
            f,
            m: lambda * p - f,
        }
    }
}

/// Descending `M`, then ascending `F`, then lexicographic rank vector.
pub fn score_order(a: &PrecisionCostScore, b: &PrecisionCostScore) -> Ordering {
    b.m.total_cmp(&a.m)
        .then(a.f.total_cmp(&b.f))
        .then_with(|| a.candidate.cmp(&b.candidate))
}

pub fn sort_scores(scores: &mut [PrecisionCostScore]) {
    scores.sort_by(score_order);
}

/// The first `k` scores under [`score_order`].
pub fn top_k(scores: &[PrecisionCostScore], k: usize) -> Vec<PrecisionCostScore> {
    let mut sorted = scores.to_vec();
    sort_scores(&mut sorted);
    sorted.truncate(k);
    sorted
}

/// Surviving assignments for one group of consecutive slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BlockSpace {
    /// Listed rank vectors.
    Explicit(Vec<Vec<usize>>),
    /// Any combination of per-slot rank sets.
    Product(Vec<Vec<usize>>),
}

impl BlockSpace {
    pub fn width(&self) -> usize {
        match self {
            BlockSpace::Explicit(c) => c[0].len(),
            BlockSpace::Product(s) => s.len(),
        }
    }

    pub fn size(&self) -> u128 {
        match self {
            BlockSpace::Explicit(c) => c.len() as u128,
            BlockSpace::Product(s) => s.iter().fold(1u128, |a, x| a.saturating_mul(x.len() as u128)),
        }
    }

    pub fn contains(&self, ranks: &[usize]) -> bool {
        match self {
            BlockSpace::Explicit(c) => c.iter().any(|x| x == ranks),
            BlockSpace::Product(s) => s.len() == ranks.len() && s.iter().zip(ranks).all(|(set, r)| set.contains(r)),
        }
    }

    /// Sorted union of the ranks each slot takes in any member.
    pub fn slot_choices(&self) -> Vec<Vec<usize>> {
        let mut out = match self {
            BlockSpace::Explicit(c) => (0..self.width()).map(|j| c.iter().map(|x| x[j]).collect()).collect(),
            BlockSpace::Product(s) => s.clone(),
        };
        for v in out.iter_mut() {
            v.sort_unstable();
            v.dedup();
        }
        out
    }

    fn sample(&self, rng: &mut impl Rng, out: &mut Vec<usize>) {
        match self {
            BlockSpace::Explicit(c) => out.extend_from_slice(c.choose(rng).unwrap()),
            BlockSpace::Product(s) => out.extend(s.iter().map(|set| *set.choose(rng).unwrap())),
        }
    }

    fn members(&self) -> Vec<Vec<usize>> {
        match self {
            BlockSpace::Explicit(c) => c.clone(),
            BlockSpace::Product(s) => s.iter().fold(vec![Vec::new()], |acc, set| {
                acc.iter()
                    .flat_map(|prefix| {
                        set.iter().map(move |&r| {
                            let mut p = prefix.clone();
                            p.push(r);
                            p
                        })
                    })
                    .collect()
            }),
        }
    }
}

/// The search space left after filtering: the Cartesian product of
/// per-block survivors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetainedSpace {
    blocks: Vec<BlockSpace>,
}

impl RetainedSpace {
    pub fn new(blocks: Vec<BlockSpace>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::Argument("retained space needs at least one block".into()));
        }
        for (i, b) in blocks.iter().enumerate() {
            let ok = match b {
                BlockSpace::Explicit(c) => !c.is_empty() && !c[0].is_empty() && c.iter().all(|x| x.len() == c[0].len()),
                BlockSpace::Product(s) => !s.is_empty() && s.iter().all(|x| !x.is_empty()),
            };
            if !ok {
                return Err(Error::Argument(format!("block {i} has no surviving candidates")));
            }
        }
        Ok(Self { blocks })
    }

    /// Every slot independent: the plain product of per-slot rank sets.
    pub fn product(sets: Vec<Vec<usize>>) -> Result<Self> {
        Self::new(sets.into_iter().map(|s| BlockSpace::Product(vec![s])).collect())
    }

    pub fn blocks(&self) -> &[BlockSpace] {
        &self.blocks
    }

    pub fn slots(&self) -> usize {
        self.blocks.iter().map(BlockSpace::width).sum()
    }

    pub fn size(&self) -> u128 {
        self.blocks.iter().fold(1u128, |a, b| a.saturating_mul(b.size()))
    }

    pub fn contains(&self, config: &RankConfig) -> bool {
        if config.len() != self.slots() {
            return false;
        }
        let mut at = 0;
        self.blocks.iter().all(|b| {
            let w = b.width();
            let ok = b.contains(&config.ranks()[at..at + w]);
            at += w;
            ok
        })
    }

    /// Per-slot union of surviving ranks; these become the supernet's
    /// choice sets.
    pub fn slot_choices(&self) -> Vec<Vec<usize>> {
        self.blocks.iter().flat_map(BlockSpace::slot_choices).collect()
    }

    /// Uniform draw over the space.
    pub fn sample(&self, rng: &mut impl Rng) -> RankConfig {
        let mut out = Vec::with_capacity(self.slots());
        for b in &self.blocks {
            b.sample(rng, &mut out);
        }
        RankConfig(out)
    }

    /// All members, if there are at most `limit`.
    pub fn enumerate(&self, limit: usize) -> Option<Vec<RankConfig>> {
        if self.size() > limit as u128 {
            return None;
        }
        let mut acc = vec![Vec::new()];
        for b in &self.blocks {
            let members = b.members();
            acc = acc
                .iter()
                .flat_map(|prefix: &Vec<usize>| {
                    members.iter().map(move |m| {
                        let mut p = prefix.clone();
                        p.extend_from_slice(m);
                        p
                    })
                })
                .collect();
        }
        Some(acc.into_iter().map(RankConfig).collect())
    }
}

/// Builds the Cartesian space from each block's surviving candidates.
pub fn integrate(per_block_survivors: Vec<Vec<Vec<usize>>>) -> Result<RetainedSpace> {
    RetainedSpace::new(per_block_survivors.into_iter().map(BlockSpace::Explicit).collect())
}

/// A supernet whose only choice blocks are the six slots of `block`.
pub fn build_local_supernet(model: &Model, block: usize, choice_sets: &[RankChoiceSet]) -> Result<Supernet> {
    let depth = model.config().depth;
    if block >= depth {
        return Err(Error::Argument(format!("block {block} out of range for depth {depth}")));
    }
    if choice_sets.len() != Role::ALL.len() {
        return Err(Error::Argument(format!(
            "{} choice sets for a 6-slot block",
            choice_sets.len()
        )));
    }
    let mut sets = vec![None; model.slots().len()];
    for (j, set) in choice_sets.iter().enumerate() {
        sets[block * 6 + j] = Some(set.clone());
    }
    Supernet::build(model, &sets)
}

/// Distills the local supernet on `proxy`, updating only its choice blocks.
pub fn train_local_supernet(
    net: &mut Supernet,
    ds: &Dataset,
    proxy: &DatasetSplit,
    teacher: &Model,
    fc: &FilterConfig,
) -> Result<Vec<TraceRecord>> {
    train_supernet(
        net,
        ds,
        proxy,
        teacher,
        &SupernetTrainConfig {
            epochs: fc.local_epochs,
            batch_size: fc.batch_size,
            lr: fc.lr,
            momentum: 0.9,
            seed: fc.seed,
            sampling: SamplingMode::LowRankAware,
            choice_blocks_only: true,
        },
    )
}

/// Outcome of filtering one block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockFilterResult {
    pub block: usize,
    /// Every scored candidate, in [`score_order`].
    pub scores: Vec<PrecisionCostScore>,
    pub retained: BlockSpace,
    /// Whether the whole local space was scored (as opposed to per-slot
    /// marginals).
    pub exhaustive: bool,
}

impl BlockFilterResult {
    pub fn is_retained(&self, candidate: &[usize]) -> bool {
        self.retained.contains(candidate)
    }
}

/// Scores the candidates of a trained local supernet on `score_indices`.
///
/// If the local space is at most `fc.exhaustive_cap` every candidate is
/// scored and the top `k` kept. Otherwise each slot is scored on its own
/// with the other slots at their largest rank, the top `k` ranks of each
/// slot are kept, and the block's space is their product.
pub fn score_local(
    net: &Supernet,
    block: usize,
    ds: &Dataset,
    score_indices: &[usize],
    fc: &FilterConfig,
) -> Result<BlockFilterResult> {
    fc.validate()?;
    if net.steps_trained() == 0 {
        return Err(Error::Untrained("local supernet".into()));
    }
    let cfg = net.model().config();
    let dense = block_cost(cfg, block, &[None; 6])?.flops as f64;
    let score = |ranks: &[usize]| -> Result<PrecisionCostScore> {
        let config = RankConfig(ranks.to_vec());
        let p = net.activate(&config)?.evaluate(ds, score_indices)?;
        let opts: Vec<Option<usize>> = ranks.iter().map(|&r| Some(r)).collect();
        let f = block_cost(cfg, block, &opts)?.flops as f64 / dense;
        Ok(PrecisionCostScore::new(ranks.to_vec(), p, f, fc.lambda))
    };
    let sets = net.choice_sets();
    if net.space_size() <= fc.exhaustive_cap as u128 {
        let all = RetainedSpace::product(sets.iter().map(|s| s.ranks().to_vec()).collect())?
            .enumerate(fc.exhaustive_cap)
            .expect("within cap");
        let mut scores = all.iter().map(|c| score(c.ranks())).collect::<Result<Vec<_>>>()?;
        sort_scores(&mut scores);
        let kept = scores.iter().take(fc.top_k).map(|s| s.candidate.clone()).collect();
        return Ok(BlockFilterResult {
            block,
            scores,
            retained: BlockSpace::Explicit(kept),
            exhaustive: true,
        });
    }
    let max: Vec<usize> = sets.iter().map(RankChoiceSet::max).collect();
    let mut scores = Vec::new();
    let mut per_slot = Vec::with_capacity(sets.len());
    for (j, set) in sets.iter().enumerate() {
        let mut slot_scores = Vec::with_capacity(set.len());
        for &r in set.ranks() {
            let mut c = max.clone();
            c[j] = r;
            slot_scores.push(score(&c)?);
        }
        sort_scores(&mut slot_scores);
        let mut keep: Vec<usize> = slot_scores.iter().take(fc.top_k).map(|s| s.candidate[j]).collect();
        keep.sort_unstable();
        per_slot.push(keep);
        scores.extend(slot_scores);
    }
    sort_scores(&mut scores);
    scores.dedup_by(|a, b| a.candidate == b.candidate);
    Ok(BlockFilterResult {
        block,
        scores,
        retained: BlockSpace::Product(per_slot),
        exhaustive: false,
    })
}

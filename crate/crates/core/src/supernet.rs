//! Weight-sharing supernet over rank choices.
//!
//! Each choice block stores one pair of super-factors `U: m × r_N`,
//! `V: n × r_N`. A subnet at rank `r` reads the first `r` columns of both, so
//! smaller ranks are always column prefixes of larger ones and nothing is
//! ever copied when switching paths.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cost::{breakeven_rank, cost_of_slots, CostReport};
use crate::data::{Dataset, DatasetSplit};
use crate::error::{Error, Result};
use crate::layers::distillation_loss;
use crate::linalg::{svd, truncate, ColumnPrefix, ColumnPrefixMut, Matrix};
use crate::model::{LinearSlot, Model, ParamRole, SlotId, SlotWeights};
use crate::train::{epoch_order, predict, steps_per_epoch, Sgd, UpdatePlan};

/// Seed offset separating the path-sampling stream from the shuffle stream.
const PATH_STREAM: u64 = 0x5041_5448_5354_524d;

/// Admissible ranks `r₁ < … < r_N` for one slot.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RankChoiceSet {
    ranks: Vec<usize>,
    overcomplete: bool,
}

impl RankChoiceSet {
    /// Ranks must be strictly increasing multiples of `granularity`, at most
    /// `min(m, n)`, and below the breakeven rank `m·n/(m+n)` unless
    /// `allow_overcomplete` is set.
    pub fn new(ranks: Vec<usize>, slot: &LinearSlot, granularity: usize, allow_overcomplete: bool) -> Result<Self> {
        let bad = |msg: String| Err(Error::Config(format!("choice set {ranks:?} for {}: {msg}", slot.id)));
        if ranks.is_empty() {
            return bad("empty".into());
        }
        if granularity == 0 {
            return bad("granularity must be positive".into());
        }
        if ranks.windows(2).any(|w| w[0] >= w[1]) {
            return bad("ranks must be strictly increasing".into());
        }
        if ranks[0] == 0 {
            return bad("ranks must be positive".into());
        }
        if let Some(r) = ranks.iter().find(|&&r| r % granularity != 0) {
            return bad(format!("{r} is not a multiple of {granularity}"));
        }
        let max = *ranks.last().unwrap();
        if max > slot.m.min(slot.n) {
            return bad(format!("largest rank exceeds min({}, {})", slot.m, slot.n));
        }
        let overcomplete = ranks.iter().any(|&r| r as f64 >= breakeven_rank(slot.m, slot.n));
        if overcomplete && !allow_overcomplete {
            return bad(format!(
                "ranks must lie below the breakeven rank {}",
                breakeven_rank(slot.m, slot.n)
            ));
        }
        Ok(Self { ranks, overcomplete })
    }

    /// All multiples of `granularity` strictly below the breakeven rank.
    pub fn default_for(slot: &LinearSlot, granularity: usize) -> Result<Self> {
        let g = granularity.max(1);
        let ranks: Vec<usize> = (1..)
            .map(|k| k * g)
            .take_while(|&r| (r as f64) < breakeven_rank(slot.m, slot.n))
            .collect();
        Self::new(ranks, slot, g, false)
    }

    pub fn ranks(&self) -> &[usize] {
        &self.ranks
    }

    pub fn max(&self) -> usize {
        *self.ranks.last().unwrap()
    }

    pub fn len(&self) -> usize {
        self.ranks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranks.is_empty()
    }

    pub fn contains(&self, r: usize) -> bool {
        self.ranks.binary_search(&r).is_ok()
    }

    pub fn is_overcomplete(&self) -> bool {
        self.overcomplete
    }
}

/// One chosen rank per choice block, in slot order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RankConfig(pub Vec<usize>);

impl RankConfig {
    pub fn ranks(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for RankConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(usize::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for RankConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Argument(format!("bad rank '{p}' in config '{s}'")))
            })
            .collect::<Result<Vec<_>>>()
            .map(RankConfig)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingMode {
    /// `p(r) ∝ 1/r`
    LowRankAware,
    Uniform,
}

impl FromStr for SamplingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lowrank" | "lowrank-aware" => Ok(SamplingMode::LowRankAware),
            "uniform" => Ok(SamplingMode::Uniform),
            _ => Err(Error::Config(format!(
                "unknown sampling mode '{s}' (expected lowrank or uniform)"
            ))),
        }
    }
}

impl fmt::Display for SamplingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplingMode::LowRankAware => "lowrank",
            SamplingMode::Uniform => "uniform",
        })
    }
}

/// Independent per-slot distributions over rank choices.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerDistribution {
    ranks: Vec<Vec<usize>>,
    pmfs: Vec<Vec<f64>>,
}

impl SamplerDistribution {
    pub fn new(choices: &[RankChoiceSet], mode: SamplingMode) -> Self {
        let pmfs = choices
            .iter()
            .map(|c| {
                let w: Vec<f64> = match mode {
                    SamplingMode::LowRankAware => c.ranks().iter().map(|&r| 1.0 / r as f64).collect(),
                    SamplingMode::Uniform => vec![1.0; c.len()],
                };
                let total: f64 = w.iter().sum();
                w.iter().map(|x| x / total).collect()
            })
            .collect();
        Self {
            ranks: choices.iter().map(|c| c.ranks().to_vec()).collect(),
            pmfs,
        }
    }

    pub fn slots(&self) -> usize {
        self.pmfs.len()
    }

    pub fn pmf(&self, slot: usize) -> &[f64] {
        &self.pmfs[slot]
    }

    /// Joint probability of `config` (product of per-slot probabilities).
    pub fn probability(&self, config: &RankConfig) -> Result<f64> {
        if config.len() != self.slots() {
            return Err(Error::Argument(format!(
                "{} ranks for {} slots",
                config.len(),
                self.slots()
            )));
        }
        let mut p = 1.0;
        for (i, &r) in config.ranks().iter().enumerate() {
            let k = self.ranks[i]
                .iter()
                .position(|&x| x == r)
                .ok_or_else(|| Error::RankNotInChoices {
                    slot: format!("choice block {i}"),
                    rank: r,
                })?;
            p *= self.pmfs[i][k];
        }
        Ok(p)
    }

    pub fn sample(&self, rng: &mut impl Rng) -> RankConfig {
        RankConfig(
            self.pmfs
                .iter()
                .zip(&self.ranks)
                .map(|(pmf, ranks)| {
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    for (p, &r) in pmf.iter().zip(ranks) {
                        acc += p;
                        if u < acc {
                            return r;
                        }
                    }
                    *ranks.last().unwrap()
                })
                .collect(),
        )
    }
}

/// A slot whose rank is searched, with its admissible ranks.
#[derive(Debug, Clone, PartialEq)]
pub struct ChoiceBlock {
    pub slot: LinearSlot,
    pub choices: RankChoiceSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Supernet {
    model: Model,
    blocks: Vec<ChoiceBlock>,
    steps_trained: usize,
}

impl Supernet {
    /// Turns every slot with `Some` choice set into a choice block whose
    /// super-factors come from a truncated SVD at the set's largest rank (or,
    /// for an already factored slot, from its leading columns). Slots with
    /// `None` keep their current weights.
    pub fn build(model: &Model, choices: &[Option<RankChoiceSet>]) -> Result<Self> {
        let slots = model.slots();
        if choices.len() != slots.len() {
            return Err(Error::Argument(format!(
                "{} choice sets for {} slots",
                choices.len(),
                slots.len()
            )));
        }
        let mut model = model.clone();
        let mut blocks = Vec::new();
        for (slot, set) in slots.iter().zip(choices) {
            let Some(set) = set else { continue };
            let r = set.max();
            if r > slot.m.min(slot.n) {
                return Err(Error::Config(format!(
                    "largest rank {r} exceeds min({}, {}) for {}",
                    slot.m, slot.n, slot.id
                )));
            }
            let sp = model.slot_mut(slot.id);
            let (u, v) = match &sp.weights {
                SlotWeights::Dense(w) => truncate(&svd(w)?, r)?,
                SlotWeights::Factored { u, v } if u.cols() >= r => (u.leading_columns(r), v.leading_columns(r)),
                SlotWeights::Factored { u, .. } => {
                    return Err(Error::Config(format!(
                        "{} is factored at width {} < largest choice {r}",
                        slot.id,
                        u.cols()
                    )))
                }
            };
            sp.weights = SlotWeights::Factored { u, v };
            blocks.push(ChoiceBlock {
                slot: *slot,
                choices: set.clone(),
            });
        }
        if blocks.is_empty() {
            return Err(Error::Argument("a supernet needs at least one choice block".into()));
        }
        Ok(Self {
            model,
            blocks,
            steps_trained: 0,
        })
    }

    /// Reassembles a supernet from a model whose choice slots are already
    /// factored at exactly their largest rank (e.g. a loaded checkpoint).
    pub fn from_parts(model: Model, blocks: Vec<ChoiceBlock>, steps_trained: usize) -> Result<Self> {
        for b in &blocks {
            match model.slot(b.slot.id).max_rank() {
                Some(w) if w == b.choices.max() => {}
                other => {
                    return Err(Error::Config(format!(
                        "{} stores width {:?} but its largest choice is {}",
                        b.slot.id,
                        other,
                        b.choices.max()
                    )))
                }
            }
        }
        Ok(Self {
            model,
            blocks,
            steps_trained,
        })
    }

    /// Every slot a choice block with the same choice set.
    pub fn build_uniform(model: &Model, set: &RankChoiceSet) -> Result<Self> {
        Self::build(model, &vec![Some(set.clone()); model.slots().len()])
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn choice_blocks(&self) -> &[ChoiceBlock] {
        &self.blocks
    }

    pub fn choice_sets(&self) -> Vec<RankChoiceSet> {
        self.blocks.iter().map(|b| b.choices.clone()).collect()
    }

    pub fn steps_trained(&self) -> usize {
        self.steps_trained
    }

    /// Number of rank configurations (saturating).
    pub fn space_size(&self) -> u128 {
        self.blocks
            .iter()
            .fold(1u128, |acc, b| acc.saturating_mul(b.choices.len() as u128))
    }

    /// The configuration taking every block's largest rank.
    pub fn max_config(&self) -> RankConfig {
        RankConfig(self.blocks.iter().map(|b| b.choices.max()).collect())
    }

    pub fn min_config(&self) -> RankConfig {
        RankConfig(self.blocks.iter().map(|b| b.choices.ranks()[0]).collect())
    }

    pub fn validate(&self, config: &RankConfig) -> Result<()> {
        if config.len() != self.blocks.len() {
            return Err(Error::Argument(format!(
                "config has {} ranks, supernet has {} choice blocks",
                config.len(),
                self.blocks.len()
            )));
        }
        for (b, &r) in self.blocks.iter().zip(config.ranks()) {
            if !b.choices.contains(r) {
                return Err(Error::RankNotInChoices {
                    slot: b.slot.id.to_string(),
                    rank: r,
                });
            }
        }
        Ok(())
    }

    /// Per-slot ranks for [`Model::forward`]; slots outside the choice blocks
    /// run at their stored width (dense slots ignore the value).
    fn slot_ranks(&self, config: &RankConfig) -> Vec<usize> {
        let mut ranks: Vec<usize> = self.model.max_ranks().iter().map(|r| r.unwrap_or(0)).collect();
        for (b, &r) in self.blocks.iter().zip(config.ranks()) {
            ranks[b.slot.id.index()] = r;
        }
        ranks
    }

    fn slot_options(&self, config: &RankConfig) -> Vec<Option<usize>> {
        let mut out = self.model.max_ranks();
        for (b, &r) in self.blocks.iter().zip(config.ranks()) {
            out[b.slot.id.index()] = Some(r);
        }
        out
    }

    pub fn cost(&self, config: &RankConfig) -> Result<CostReport> {
        self.validate(config)?;
        cost_of_slots(self.model.config(), &self.slot_options(config))
    }

    pub fn activate(&self, config: &RankConfig) -> Result<SubnetView<'_>> {
        self.validate(config)?;
        Ok(SubnetView {
            ranks: self.slot_ranks(config),
            net: self,
            config: config.clone(),
        })
    }

    pub fn activate_mut(&mut self, config: &RankConfig) -> Result<SubnetViewMut<'_>> {
        self.validate(config)?;
        Ok(SubnetViewMut {
            net: self,
            config: config.clone(),
        })
    }
}

/// Read-only subnet: the first `r` columns of each choice block's factors.
#[derive(Debug, Clone)]
pub struct SubnetView<'a> {
    net: &'a Supernet,
    config: RankConfig,
    ranks: Vec<usize>,
}

impl<'a> SubnetView<'a> {
    pub fn config(&self) -> &RankConfig {
        &self.config
    }

    /// `(U_r, V_r)` of choice block `i`.
    pub fn factors(&self, i: usize) -> (ColumnPrefix<'a>, ColumnPrefix<'a>) {
        let b = &self.net.blocks[i];
        let r = self.config.ranks()[i];
        match &self.net.model.slot(b.slot.id).weights {
            SlotWeights::Factored { u, v } => (u.prefix(r), v.prefix(r)),
            SlotWeights::Dense(_) => unreachable!("choice blocks are factored"),
        }
    }

    pub fn forward(&self, images: &[f64], batch: usize) -> Result<Matrix> {
        self.net.model.forward(images, batch, Some(&self.ranks))
    }

    pub fn predict(&self, ds: &Dataset, indices: &[usize]) -> Result<Vec<usize>> {
        predict(&self.net.model, ds, indices, Some(&self.ranks))
    }

    pub fn evaluate(&self, ds: &Dataset, indices: &[usize]) -> Result<f64> {
        crate::train::evaluate(&self.net.model, ds, indices, Some(&self.ranks))
    }

    pub fn cost(&self) -> CostReport {
        self.net.cost(&self.config).expect("validated on activation")
    }

    /// A standalone model holding copies of the active factor prefixes.
    pub fn export(&self) -> Model {
        let mut m = self.net.model.clone();
        for (b, &r) in self.net.blocks.iter().zip(self.config.ranks()) {
            let sp = m.slot_mut(b.slot.id);
            if let SlotWeights::Factored { u, v } = &sp.weights {
                sp.weights = SlotWeights::Factored {
                    u: u.leading_columns(r),
                    v: v.leading_columns(r),
                };
            }
        }
        m
    }
}

/// Mutable subnet view; writes go straight into the shared super-factors.
#[derive(Debug)]
pub struct SubnetViewMut<'a> {
    net: &'a mut Supernet,
    config: RankConfig,
}

impl SubnetViewMut<'_> {
    pub fn config(&self) -> &RankConfig {
        &self.config
    }

    pub fn factors_mut(&mut self, i: usize) -> (ColumnPrefixMut<'_>, ColumnPrefixMut<'_>) {
        let id = self.net.blocks[i].slot.id;
        let r = self.config.ranks()[i];
        match &mut self.net.model.slot_mut(id).weights {
            SlotWeights::Factored { u, v } => (u.prefix_mut(r), v.prefix_mut(r)),
            SlotWeights::Dense(_) => unreachable!("choice blocks are factored"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupernetTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    pub sampling: SamplingMode,
    /// Train only the choice blocks' factors and biases.
    pub choice_blocks_only: bool,
}

impl Default for SupernetTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            lr: 0.01,
            momentum: 0.9,
            seed: 0,
            sampling: SamplingMode::LowRankAware,
            choice_blocks_only: false,
        }
    }
}

/// One optimizer step of supernet training.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub step: usize,
    pub config: RankConfig,
    pub loss: f64,
}

/// Teacher logits for every sample of `indices`, keyed by dataset index.
fn teacher_logits(teacher: &Model, ds: &Dataset, indices: &[usize]) -> Result<Vec<Option<Vec<f64>>>> {
    let mut table = vec![None; ds.len()];
    for chunk in indices.chunks(256) {
        let (imgs, _) = ds.gather(chunk);
        let logits = teacher.forward(&imgs, chunk.len(), None)?;
        for (k, &i) in chunk.iter().enumerate() {
            table[i] = Some(logits.row(k).to_vec());
        }
    }
    Ok(table)
}

/// Single-path trainer with in-place distillation: every step samples one
/// path, runs it, and takes an SGD step on `½·CE + ½·KD(teacher)` touching
/// only the active factor columns. Momentum persists across steps.
#[derive(Debug)]
pub struct SupernetTrainer {
    dist: SamplerDistribution,
    path_rng: ChaCha8Rng,
    opt: Sgd,
    table: Vec<Option<Vec<f64>>>,
    classes: usize,
    trainable_slots: Option<Vec<SlotId>>,
}

impl SupernetTrainer {
    /// `total_steps` sets the cosine schedule length; teacher logits are
    /// computed once for every sample of `split`.
    pub fn new(
        net: &Supernet,
        ds: &Dataset,
        split: &DatasetSplit,
        teacher: &Model,
        cfg: &SupernetTrainConfig,
        total_steps: usize,
    ) -> Result<Self> {
        if split.is_empty() || cfg.batch_size == 0 {
            return Err(Error::Argument(
                "supernet training needs a non-empty split and batch".into(),
            ));
        }
        if teacher.config().classes != net.model.config().classes {
            return Err(Error::Argument("teacher and supernet disagree on class count".into()));
        }
        Ok(Self {
            dist: SamplerDistribution::new(&net.choice_sets(), cfg.sampling),
            path_rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ PATH_STREAM),
            opt: Sgd::new(cfg.lr, cfg.momentum, total_steps),
            table: teacher_logits(teacher, ds, &split.indices)?,
            classes: teacher.config().classes,
            trainable_slots: cfg
                .choice_blocks_only
                .then(|| net.blocks.iter().map(|b| b.slot.id).collect()),
        })
    }

    /// Samples the next path without training it.
    pub fn sample_path(&mut self) -> RankConfig {
        self.dist.sample(&mut self.path_rng)
    }

    /// One step on the samples `batch` (all drawn from the trainer's split)
    /// along a freshly sampled path.
    pub fn step(&mut self, net: &mut Supernet, ds: &Dataset, batch: &[usize]) -> Result<TraceRecord> {
        let config = self.sample_path();
        self.step_on(net, ds, batch, config)
    }

    /// One step along a given path.
    pub fn step_on(
        &mut self,
        net: &mut Supernet,
        ds: &Dataset,
        batch: &[usize],
        config: RankConfig,
    ) -> Result<TraceRecord> {
        net.validate(&config)?;
        let ranks = net.slot_ranks(&config);
        let (imgs, labels) = ds.gather(batch);
        let mut t = Vec::with_capacity(batch.len() * self.classes);
        for &i in batch {
            let row = self.table.get(i).and_then(|r| r.as_ref());
            let row = row.ok_or_else(|| Error::Argument(format!("sample {i} is outside the training split")))?;
            t.extend_from_slice(row);
        }
        let t = Matrix::new(batch.len(), self.classes, t)?;
        let step = self.opt.steps_taken();
        let (logits, cache) = match net.model.forward_train(&imgs, batch.len(), Some(&ranks)) {
            Ok(x) => x,
            Err(Error::NonFinite(_)) => return Err(Error::Diverged { step, loss: f64::NAN }),
            Err(e) => return Err(e),
        };
        let out = distillation_loss(&logits, &t, &labels)?;
        if !out.loss.is_finite() {
            return Err(Error::Diverged { step, loss: out.loss });
        }
        let mut grads = net.model.zeros_like();
        net.model.backward(&cache, &out.grad, &mut grads)?;
        let slots = &self.trainable_slots;
        let trainable = |role: &ParamRole| {
            slots
                .as_ref()
                .is_none_or(|s| role.slot().is_some_and(|id| s.contains(&id)))
        };
        let plan = UpdatePlan::new(&net.model, Some(&ranks), trainable);
        self.opt.step(&mut net.model, &grads, &plan)?;
        net.steps_trained += 1;
        Ok(TraceRecord {
            step,
            config,
            loss: out.loss,
        })
    }
}

/// Trains for `cfg.epochs` epochs over `split`, returning one trace record
/// per step.
pub fn train_supernet(
    net: &mut Supernet,
    ds: &Dataset,
    split: &DatasetSplit,
    teacher: &Model,
    cfg: &SupernetTrainConfig,
) -> Result<Vec<TraceRecord>> {
    let total = cfg.epochs * steps_per_epoch(split.len(), cfg.batch_size.max(1));
    let mut trainer = SupernetTrainer::new(net, ds, split, teacher, cfg, total)?;
    let mut trace = Vec::new();
    for epoch in 0..cfg.epochs {
        let order = epoch_order(&split.indices, cfg.seed, epoch);
        for chunk in order.chunks(cfg.batch_size) {
            trace.push(trainer.step(net, ds, chunk)?);
        }
    }
    Ok(trace)
}

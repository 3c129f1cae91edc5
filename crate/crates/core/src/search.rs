//! Evolutionary search for the most accurate rank configuration inside a
//! FLOPs window, with fitness read off the trained supernet.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cost::{CostReport, FlopsWindow};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::filter::RetainedSpace;
use crate::supernet::{RankConfig, Supernet};

/// Rejection draws allowed before a window is declared infeasible.
pub const PROBE_DRAWS: usize = 100_000;
/// Attempts at a feasible, unseen child before falling back to a parent clone.
pub const RETRY_CAP: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct EaConfig {
    pub population: usize,
    pub generations: usize,
    pub parent_fraction: f64,
    pub mutation_prob: f64,
    pub crossover_prob: f64,
    pub seed: u64,
    /// Number of validation batches per fitness evaluation; `None` uses the
    /// whole validation subset.
    pub eval_batches: Option<usize>,
    pub batch_size: usize,
}

impl Default for EaConfig {
    fn default() -> Self {
        Self {
            population: 50,
            generations: 20,
            parent_fraction: 0.25,
            mutation_prob: 0.1,
            crossover_prob: 0.5,
            seed: 0,
            eval_batches: None,
            batch_size: 256,
        }
    }
}

impl EaConfig {
    fn parents(&self) -> usize {
        (self.parent_fraction * self.population as f64).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.population < 4 {
            return bad(format!("ea.population {} must be at least 4", self.population));
        }
        if !(self.parent_fraction > 0.0 && self.parent_fraction < 1.0) || self.parents() < 2 {
            return bad(format!(
                "ea.parent_fraction {} must lie in (0, 1) and keep at least 2 parents",
                self.parent_fraction
            ));
        }
        for (k, v) in [
            ("ea.mutation_prob", self.mutation_prob),
            ("ea.crossover_prob", self.crossover_prob),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{k} {v} must lie in [0, 1]"));
            }
        }
        if self.generations == 0 {
            return bad("ea.generations must be at least 1".into());
        }
        if self.batch_size == 0 || self.eval_batches == Some(0) {
            return bad("evaluation batches must be non-empty".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub config: RankConfig,
    pub fitness: f64,
    pub cost: CostReport,
}

/// Higher fitness first, then cheaper, then lexicographic.
pub fn candidate_order(a: &Candidate, b: &Candidate) -> Ordering {
    b.fitness
        .total_cmp(&a.fitness)
        .then(a.cost.flops.cmp(&b.cost.flops))
        .then_with(|| a.config.cmp(&b.config))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationStats {
    pub generation: usize,
    pub best: f64,
    pub mean: f64,
    /// Distinct configurations evaluated so far.
    pub evaluated: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    /// Distinct members of the final population, best first.
    pub ranked: Vec<Candidate>,
    pub history: Vec<GenerationStats>,
}

impl SearchOutcome {
    pub fn best(&self) -> &Candidate {
        &self.ranked[0]
    }
}

/// The evolutionary loop over an arbitrary cost function and fitness
/// evaluator. Fitness values are cached per configuration.
pub fn search_with(
    space: &RetainedSpace,
    window: &FlopsWindow,
    ea: &EaConfig,
    cost: impl Fn(&RankConfig) -> Result<CostReport>,
    mut fitness: impl FnMut(&RankConfig) -> Result<f64>,
) -> Result<SearchOutcome> {
    ea.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(ea.seed);
    let feasible = |c: &RankConfig| -> Result<Option<CostReport>> {
        if !space.contains(c) {
            return Ok(None);
        }
        let r = cost(c)?;
        Ok(window.contains(r.flops).then_some(r))
    };

    // Initial members are distinct while the space allows it; once
    // `RETRY_CAP · population` draws in a row bring nothing new, the
    // population is topped up with clones.
    let mut population: Vec<(RankConfig, CostReport)> = Vec::with_capacity(ea.population);
    let mut members = HashSet::new();
    let mut draws = 0;
    let mut stale = 0;
    while population.len() < ea.population && (population.is_empty() || stale < RETRY_CAP * ea.population) {
        if population.is_empty() && draws >= PROBE_DRAWS {
            return Err(Error::InfeasibleWindow {
                lower: window.lower,
                upper: window.upper,
                draws,
            });
        }
        draws += 1;
        stale += 1;
        let c = space.sample(&mut rng);
        if members.contains(&c) {
            continue;
        }
        if let Some(r) = feasible(&c)? {
            members.insert(c.clone());
            population.push((c, r));
            stale = 0;
        }
    }
    while population.len() < ea.population {
        let clone = population[population.len() % population.len()].clone();
        population.push(clone);
    }

    let slot_choices = space.slot_choices();
    let mut cache: HashMap<RankConfig, f64> = HashMap::new();
    let mut history = Vec::with_capacity(ea.generations);
    let mut ranked = Vec::new();
    for generation in 0..ea.generations {
        let mut scored = Vec::with_capacity(population.len());
        for (c, r) in &population {
            let f = match cache.get(c) {
                Some(&f) => f,
                None => {
                    let f = fitness(c)?;
                    cache.insert(c.clone(), f);
                    f
                }
            };
            scored.push(Candidate {
                config: c.clone(),
                fitness: f,
                cost: *r,
            });
        }
        scored.sort_by(candidate_order);
        history.push(GenerationStats {
            generation,
            best: scored[0].fitness,
            mean: scored.iter().map(|c| c.fitness).sum::<f64>() / scored.len() as f64,
            evaluated: cache.len(),
        });
        if generation + 1 == ea.generations {
            ranked = scored;
            break;
        }
        let parents: Vec<(RankConfig, CostReport)> = scored[..ea.parents()]
            .iter()
            .map(|c| (c.config.clone(), c.cost))
            .collect();
        let mut next = parents.clone();
        while next.len() < ea.population {
            let a = parents.choose(&mut rng).unwrap();
            let b = parents.choose(&mut rng).unwrap();
            // A child must be feasible and new: neither evaluated before nor
            // already in the next population.
            let mut child = None;
            for _ in 0..RETRY_CAP {
                let mut ranks = a.0.ranks().to_vec();
                if rng.random::<f64>() < ea.crossover_prob {
                    for (x, &y) in ranks.iter_mut().zip(b.0.ranks()) {
                        if rng.random::<bool>() {
                            *x = y;
                        }
                    }
                }
                for (x, choices) in ranks.iter_mut().zip(&slot_choices) {
                    if rng.random::<f64>() < ea.mutation_prob {
                        *x = *choices.choose(&mut rng).unwrap();
                    }
                }
                let c = RankConfig(ranks);
                if cache.contains_key(&c) || next.iter().any(|(n, _)| n == &c) {
                    continue;
                }
                if let Some(r) = feasible(&c)? {
                    child = Some((c, r));
                    break;
                }
            }
            next.push(child.unwrap_or_else(|| a.clone()));
        }
        population = next;
    }
    let mut seen = HashSet::new();
    ranked.retain(|c| seen.insert(c.config.clone()));
    Ok(SearchOutcome { ranked, history })
}

/// Accuracy of `config` on the first `eval_batches · batch_size` samples of
/// `val` (all of them when `eval_batches` is `None`). Never mutates weights.
pub fn evaluate_config(
    net: &Supernet,
    config: &RankConfig,
    ds: &Dataset,
    val: &[usize],
    eval_batches: Option<usize>,
    batch_size: usize,
) -> Result<f64> {
    let n = eval_batches.map_or(val.len(), |b| (b * batch_size).min(val.len()));
    net.activate(config)?.evaluate(ds, &val[..n])
}

/// Evolutionary search over `space` using the supernet as fitness oracle.
pub fn search(
    net: &Supernet,
    space: &RetainedSpace,
    window: &FlopsWindow,
    ea: &EaConfig,
    ds: &Dataset,
    val: &[usize],
) -> Result<SearchOutcome> {
    if space.slots() != net.choice_blocks().len() {
        return Err(Error::Argument(format!(
            "space has {} slots, supernet has {} choice blocks",
            space.slots(),
            net.choice_blocks().len()
        )));
    }
    search_with(
        space,
        window,
        ea,
        |c| net.cost(c),
        |c| evaluate_config(net, c, ds, val, ea.eval_batches, ea.batch_size),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_cost(c: &RankConfig) -> Result<CostReport> {
        Ok(CostReport {
            flops: c.ranks().iter().map(|&r| r as u64).sum(),
            params: 1,
        })
    }

    #[test]
    fn singleton_space_returns_its_member() {
        let space = RetainedSpace::product(vec![vec![4], vec![8]]).unwrap();
        let w = FlopsWindow::new(1, 100).unwrap();
        let out = search_with(&space, &w, &EaConfig::default(), toy_cost, |_| Ok(0.5)).unwrap();
        assert_eq!(out.ranked.len(), 1);
        assert_eq!(out.best().config, RankConfig(vec![4, 8]));
    }

    #[test]
    fn infeasible_window_is_reported() {
        let space = RetainedSpace::product(vec![vec![4, 8], vec![4, 8]]).unwrap();
        let w = FlopsWindow::new(100, 200).unwrap();
        let err = search_with(&space, &w, &EaConfig::default(), toy_cost, |_| Ok(0.0)).unwrap_err();
        assert!(matches!(err, Error::InfeasibleWindow { draws: PROBE_DRAWS, .. }));
    }

    #[test]
    fn config_validation() {
        let ok = EaConfig::default();
        assert!(EaConfig {
            population: 3,
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(EaConfig {
            parent_fraction: 0.01,
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(EaConfig {
            mutation_prob: 1.5,
            ..ok
        }
        .validate()
        .is_err());
    }
}

//! Analytic cost model against an instrumented forward pass.

use lrnas::cost::{breakeven_rank, cost_of, cost_of_slots, lowrank_is_cheaper, satisfies, CostReport, FlopsWindow};
use lrnas::flops::measure;
use lrnas::linalg::{seeded_random, svd, truncate};
use lrnas::model::{Model, ModelConfig, SlotWeights};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A model with the given slots factored at full width; returns it with the
/// per-slot ranks to run (0 for dense slots).
fn mixed_model(cfg: &ModelConfig, ranks: &[Option<usize>]) -> (Model, Vec<usize>) {
    let mut model = Model::new(cfg).unwrap();
    for (slot, r) in model.slots().into_iter().zip(ranks) {
        if r.is_some() {
            let sp = model.slot_mut(slot.id);
            let SlotWeights::Dense(w) = &sp.weights else {
                unreachable!()
            };
            let (u, v) = truncate(&svd(w).unwrap(), slot.m.min(slot.n)).unwrap();
            sp.weights = SlotWeights::Factored { u, v };
        }
    }
    (model, ranks.iter().map(|r| r.unwrap_or(0)).collect())
}

fn instrumented(model: &Model, ranks: &[usize], batch: usize) -> u64 {
    let side = model.config().image_side;
    let images = seeded_random(batch, side * side, 1, 1.0).into_data();
    let (out, flops) = measure(|| model.forward(&images, batch, Some(ranks)));
    out.unwrap();
    flops
}

fn random_config(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Vec<Option<usize>> {
    cfg.slots()
        .iter()
        .map(|s| rng.random_bool(0.8).then(|| rng.random_range(1..=s.m.min(s.n))))
        .collect()
}

pub fn analytic_equals_instrumented_on_random_configs() {
    let cfg = ModelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..25 {
        let ranks = random_config(&cfg, &mut rng);
        let (model, run) = mixed_model(&cfg, &ranks);
        let analytic = cost_of_slots(&cfg, &ranks).unwrap().flops;
        assert_eq!(instrumented(&model, &run, 1), analytic, "{ranks:?}");
        assert_eq!(instrumented(&model, &run, 3), 3 * analytic);
    }
}

#[test]
fn dense_and_full_rank_match_instrumented() {
    for cfg in [
        ModelConfig::default(),
        ModelConfig {
            embed_dim: 24,
            heads: 3,
            depth: 3,
            mlp_ratio: 3.0,
            classes: 5,
            ..Default::default()
        },
    ] {
        let dense = Model::new(&cfg).unwrap();
        let n = cfg.slots().len();
        assert_eq!(instrumented(&dense, &vec![0; n], 1), cost_of(&cfg, None).unwrap().flops);
        let full: Vec<Option<usize>> = cfg.slots().iter().map(|s| Some(s.m.min(s.n))).collect();
        let (model, run) = mixed_model(&cfg, &full);
        assert_eq!(
            instrumented(&model, &run, 2),
            2 * cost_of_slots(&cfg, &full).unwrap().flops
        );
        // Full-rank factors cost more than the dense weights they replace.
        assert!(cost_of_slots(&cfg, &full).unwrap().flops > cost_of(&cfg, None).unwrap().flops);
    }
}

#[test]
fn factored_parameter_count_matches_model() {
    let cfg = ModelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..5 {
        let ranks: Vec<Option<usize>> = cfg
            .slots()
            .iter()
            .map(|s| Some(rng.random_range(1..=s.m.min(s.n))))
            .collect();
        let mut model = Model::new(&cfg).unwrap();
        for (slot, r) in model.slots().into_iter().zip(&ranks) {
            let sp = model.slot_mut(slot.id);
            let SlotWeights::Dense(w) = &sp.weights else {
                unreachable!()
            };
            let (u, v) = truncate(&svd(w).unwrap(), r.unwrap()).unwrap();
            sp.weights = SlotWeights::Factored { u, v };
        }
        assert_eq!(model.param_count() as u64, cost_of_slots(&cfg, &ranks).unwrap().params);
    }
}

pub fn breakeven_examples() {
    assert_eq!(breakeven_rank(768, 768), 384.0);
    assert!(lowrank_is_cheaper(768, 768, 383));
    assert!(!lowrank_is_cheaper(768, 768, 384));
    assert_eq!(breakeven_rank(8, 8), 4.0);
    for r in 1..=8 {
        assert_eq!(lowrank_is_cheaper(8, 8, r), r <= 3, "r={r}");
    }
}

#[test]
fn window_boundaries() {
    let w = FlopsWindow::new(100, 200).unwrap();
    let at = |flops| CostReport { flops, params: 0 };
    assert!(satisfies(&at(100), &w));
    assert!(satisfies(&at(200), &w));
    assert!(!satisfies(&at(201), &w));
    assert!(!satisfies(&at(99), &w));
    assert!(FlopsWindow::new(0, 10).is_err());
    assert!(FlopsWindow::new(20, 10).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn raising_one_rank_never_lowers_cost(seed in any::<u64>(), slot in 0usize..12) {
        let cfg = ModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ranks: Vec<Option<usize>> = cfg.slots().iter().map(|s| Some(rng.random_range(1..=s.m.min(s.n)))).collect();
        let s = cfg.slots()[slot];
        let r = ranks[slot].unwrap();
        let before = cost_of_slots(&cfg, &ranks).unwrap();
        if r < s.m.min(s.n) {
            ranks[slot] = Some(r + 1);
            let after = cost_of_slots(&cfg, &ranks).unwrap();
            prop_assert!(after.flops > before.flops);
            prop_assert!(after.params > before.params);
        }
        // Switching to dense is cheaper exactly below the breakeven rank.
        ranks[slot] = Some(r);
        let mut dense = ranks.clone();
        dense[slot] = None;
        let d = cost_of_slots(&cfg, &dense).unwrap();
        prop_assert_eq!(before.flops < d.flops, lowrank_is_cheaper(s.m, s.n, r));
    }
}

/// Test entry points for the checks the acceptance run also calls.
mod shared {
    #[test]
    fn analytic_equals_instrumented_on_random_configs() {
        super::analytic_equals_instrumented_on_random_configs();
    }

    #[test]
    fn breakeven_examples() {
        super::breakeven_examples();
    }
}

//! Evolutionary search against exhaustive enumeration and naive evaluation.

use lrnas::cost::FlopsWindow;
use lrnas::data::{generate, train_val_split, Dataset, DatasetSpec, DatasetSplit};
use lrnas::filter::RetainedSpace;
use lrnas::model::{Model, ModelConfig, Role};
use lrnas::search::{candidate_order, evaluate_config, search, search_with, Candidate, EaConfig};
use lrnas::supernet::{train_supernet, RankChoiceSet, RankConfig, Supernet, SupernetTrainConfig};
use lrnas::train::{steps_per_epoch, train_epoch, Sgd, TrainSettings};
use lrnas::Error;

struct Fixture {
    ds: Dataset,
    val: DatasetSplit,
    net: Supernet,
}

/// A briefly trained supernet over the default choice sets, plus a
/// validation split.
fn fixture(choices: impl Fn(&Model) -> Vec<Option<RankChoiceSet>>) -> Fixture {
    let ds = generate(&DatasetSpec {
        samples_per_class: 60,
        ..Default::default()
    })
    .unwrap();
    let (train, val) = train_val_split(&ds, 0.25, 1).unwrap();
    let mut base = Model::new(&ModelConfig::default()).unwrap();
    let mut opt = Sgd::new(0.05, 0.9, 2 * steps_per_epoch(train.len(), 32));
    let s = TrainSettings {
        batch_size: 32,
        seed: 2,
    };
    for epoch in 0..2 {
        train_epoch(&mut base, &ds, &train, &mut opt, &s, epoch).unwrap();
    }
    let mut net = Supernet::build(&base, &choices(&base)).unwrap();
    let cfg = SupernetTrainConfig {
        epochs: 1,
        ..Default::default()
    };
    train_supernet(&mut net, &ds, &train, &base, &cfg).unwrap();
    Fixture { ds, val, net }
}

fn default_choices(model: &Model) -> Vec<Option<RankChoiceSet>> {
    model
        .slots()
        .iter()
        .map(|s| Some(RankChoiceSet::default_for(s, 4).unwrap()))
        .collect()
}

/// Only the two `fc1` slots are searched, each over ranks 1..=16.
fn two_slot_choices(model: &Model) -> Vec<Option<RankChoiceSet>> {
    model
        .slots()
        .iter()
        .map(|s| (s.id.role == Role::Fc1).then(|| RankChoiceSet::new((1..=16).collect(), s, 1, false).unwrap()))
        .collect()
}

fn full_space(net: &Supernet) -> RetainedSpace {
    RetainedSpace::product(net.choice_sets().iter().map(|c| c.ranks().to_vec()).collect()).unwrap()
}

fn small_ea() -> EaConfig {
    EaConfig {
        population: 16,
        generations: 6,
        seed: 3,
        ..Default::default()
    }
}

pub fn candidates_respect_the_window_and_elitism() {
    let f = fixture(default_choices);
    let dense = f.net.model().config();
    let dense_flops = lrnas::cost::cost_of(dense, None).unwrap().flops;
    let window = FlopsWindow::from_fractions(dense_flops, 0.4, 0.5).unwrap();
    let space = full_space(&f.net);
    let checksum = f.net.model().checksum();
    let out = search(&f.net, &space, &window, &small_ea(), &f.ds, &f.val.indices).unwrap();
    assert_eq!(f.net.model().checksum(), checksum);
    assert!(!out.ranked.is_empty());
    for c in &out.ranked {
        assert!(window.contains(c.cost.flops), "{} at {}", c.config, c.cost.flops);
        assert_eq!(c.cost, f.net.cost(&c.config).unwrap());
        assert!(space.contains(&c.config));
    }
    assert!(out.history.windows(2).all(|w| w[1].best >= w[0].best));
    assert!(out.ranked.windows(2).all(|w| candidate_order(&w[0], &w[1]).is_lt()));
    assert_eq!(out.history.len(), 6);
    // Reproducible from the same weights and seed.
    let again = search(&f.net, &space, &window, &small_ea(), &f.ds, &f.val.indices).unwrap();
    assert_eq!(out, again);
}

pub fn ea_finds_the_exhaustive_argmax_on_a_small_space() {
    let f = fixture(two_slot_choices);
    let space = full_space(&f.net);
    assert_eq!(space.size(), 256);
    let window = FlopsWindow::new(1, u64::MAX).unwrap();
    let out = search(&f.net, &space, &window, &EaConfig::default(), &f.ds, &f.val.indices).unwrap();
    let mut all: Vec<Candidate> = space
        .enumerate(256)
        .unwrap()
        .into_iter()
        .map(|c| Candidate {
            fitness: f.net.activate(&c).unwrap().evaluate(&f.ds, &f.val.indices).unwrap(),
            cost: f.net.cost(&c).unwrap(),
            config: c,
        })
        .collect();
    all.sort_by(candidate_order);
    assert_eq!(out.best(), &all[0]);
}

#[test]
fn ea_finds_an_isolated_peak() {
    // Synthetic fitness with one sharp maximum away from the cheap corner.
    let space = RetainedSpace::product(vec![(1..=16).collect(), (1..=16).collect()]).unwrap();
    let window = FlopsWindow::new(1, u64::MAX).unwrap();
    let cost = |c: &RankConfig| {
        Ok(lrnas::cost::CostReport {
            flops: c.ranks().iter().sum::<usize>() as u64,
            params: 0,
        })
    };
    let fitness = |c: &RankConfig| {
        let (a, b) = (c.ranks()[0] as f64, c.ranks()[1] as f64);
        Ok(1.0 / (1.0 + (a - 11.0).powi(2) + (b - 6.0).powi(2)))
    };
    let out = search_with(&space, &window, &EaConfig::default(), cost, fitness).unwrap();
    assert_eq!(out.best().config, RankConfig(vec![11, 6]));
    assert_eq!(out.best().fitness, 1.0);
}

#[test]
fn without_variation_the_population_is_static() {
    let f = fixture(default_choices);
    let space = full_space(&f.net);
    let window = FlopsWindow::new(1, u64::MAX).unwrap();
    let ea = EaConfig {
        mutation_prob: 0.0,
        crossover_prob: 0.0,
        ..small_ea()
    };
    let out = search(&f.net, &space, &window, &ea, &f.ds, &f.val.indices).unwrap();
    let first = &out.history[0];
    for g in &out.history {
        assert_eq!(g.best, first.best);
        assert_eq!(g.evaluated, first.evaluated);
    }
}

#[test]
fn degenerate_and_infeasible_spaces() {
    let f = fixture(default_choices);
    let single = RetainedSpace::product(f.net.choice_sets().iter().map(|c| vec![c.ranks()[1]]).collect()).unwrap();
    let window = FlopsWindow::new(1, u64::MAX).unwrap();
    let out = search(&f.net, &single, &window, &small_ea(), &f.ds, &f.val.indices).unwrap();
    assert_eq!(out.ranked.len(), 1);
    assert_eq!(out.best().config, RankConfig(vec![8; 12]));

    let tiny = FlopsWindow::new(1, 10).unwrap();
    match search(&f.net, &full_space(&f.net), &tiny, &small_ea(), &f.ds, &f.val.indices) {
        Err(Error::InfeasibleWindow { draws, .. }) => assert_eq!(draws, lrnas::search::PROBE_DRAWS),
        other => panic!("expected an infeasible window, got {other:?}"),
    }
}

#[test]
fn evaluation_matches_a_naive_count() {
    let f = fixture(default_choices);
    let config = RankConfig(vec![4, 8, 12, 4, 8, 12, 4, 8, 12, 12, 20, 4]);
    let view = f.net.activate(&config).unwrap();
    let mut correct = 0;
    for &i in &f.val.indices {
        let logits = view.forward(f.ds.image(i), 1).unwrap();
        let row = logits.row(0);
        let mut best = 0;
        for (k, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = k;
            }
        }
        correct += usize::from(best == f.ds.label(i));
    }
    let naive = correct as f64 / f.val.len() as f64;
    let acc = evaluate_config(&f.net, &config, &f.ds, &f.val.indices, None, 256).unwrap();
    assert_eq!(acc, naive);
    assert_eq!(
        acc,
        evaluate_config(&f.net, &config, &f.ds, &f.val.indices, None, 256).unwrap()
    );
    let first = evaluate_config(&f.net, &config, &f.ds, &f.val.indices, Some(1), 10).unwrap();
    assert_eq!(first, view.evaluate(&f.ds, &f.val.indices[..10]).unwrap());
}

#[test]
fn config_validation() {
    for bad in [
        EaConfig {
            population: 2,
            ..Default::default()
        },
        EaConfig {
            mutation_prob: 1.5,
            ..Default::default()
        },
        EaConfig {
            generations: 0,
            ..Default::default()
        },
    ] {
        assert!(bad.validate().is_err());
    }
    assert!(EaConfig::default().validate().is_ok());
}

/// Test entry points for the checks the acceptance run also calls.
mod shared {
    #[test]
    fn candidates_respect_the_window_and_elitism() {
        super::candidates_respect_the_window_and_elitism();
    }

    #[test]
    fn ea_finds_the_exhaustive_argmax_on_a_small_space() {
        super::ea_finds_the_exhaustive_argmax_on_a_small_space();
    }
}

//! Weight inheritance, path sampling and supernet training.

use lrnas::data::{generate, train_val_split, Dataset, DatasetSpec, DatasetSplit};
use lrnas::layers::{cross_entropy, distillation_loss};
use lrnas::linalg::{svd, truncate, Matrix};
use lrnas::model::{LinearSlot, Model, ModelConfig, SlotWeights};
use lrnas::supernet::{
    train_supernet, RankChoiceSet, RankConfig, SamplerDistribution, SamplingMode, Supernet, SupernetTrainConfig,
    SupernetTrainer,
};
use lrnas::train::{epoch_order, steps_per_epoch, train_epoch, Sgd, TrainSettings, UpdatePlan};
use lrnas::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Fixture {
    ds: Dataset,
    train: DatasetSplit,
    val: DatasetSplit,
    teacher: Model,
}

/// A small dataset and a teacher trained for two epochs on it.
fn fixture() -> Fixture {
    let ds = generate(&DatasetSpec {
        samples_per_class: 60,
        ..Default::default()
    })
    .unwrap();
    let (train, val) = train_val_split(&ds, 0.25, 1).unwrap();
    let mut teacher = Model::new(&ModelConfig::default()).unwrap();
    let mut opt = Sgd::new(0.05, 0.9, 2 * steps_per_epoch(train.len(), 32));
    let s = TrainSettings {
        batch_size: 32,
        seed: 2,
    };
    for epoch in 0..2 {
        train_epoch(&mut teacher, &ds, &train, &mut opt, &s, epoch).unwrap();
    }
    Fixture {
        ds,
        train,
        val,
        teacher,
    }
}

fn default_sets(model: &Model) -> Vec<Option<RankChoiceSet>> {
    model
        .slots()
        .iter()
        .map(|s| Some(RankChoiceSet::default_for(s, 4).unwrap()))
        .collect()
}

fn factors(model: &Model, slot: &LinearSlot) -> (Matrix, Matrix) {
    match &model.slot(slot.id).weights {
        SlotWeights::Factored { u, v } => (u.clone(), v.clone()),
        SlotWeights::Dense(_) => panic!("{} is dense", slot.id),
    }
}

fn rel(a: &Matrix, b: &Matrix) -> f64 {
    a.sub(b).unwrap().frobenius_norm() / a.frobenius_norm().max(b.frobenius_norm())
}

#[test]
fn single_full_rank_choice_is_lossless() {
    let f = fixture();
    let sets: Vec<Option<RankChoiceSet>> = f
        .teacher
        .slots()
        .iter()
        .map(|s| Some(RankChoiceSet::new(vec![s.m.min(s.n)], s, 1, true).unwrap()))
        .collect();
    let net = Supernet::build(&f.teacher, &sets).unwrap();
    let (imgs, _) = f.ds.gather(&f.val.indices);
    let dense = f.teacher.forward(&imgs, f.val.len(), None).unwrap();
    let view = net.activate(&net.max_config()).unwrap();
    assert!(rel(&dense, &view.forward(&imgs, f.val.len()).unwrap()) <= 1e-6);
}

#[test]
fn overcomplete_space_counting() {
    let model = Model::new(&ModelConfig::default()).unwrap();
    let sets: Vec<Option<RankChoiceSet>> = model
        .slots()
        .iter()
        .map(|s| Some(RankChoiceSet::new(vec![4, 8, 16, 32], s, 4, true).unwrap()))
        .collect();
    let net = Supernet::build(&model, &sets).unwrap();
    assert_eq!(net.space_size(), 16_777_216);
    assert!(RankChoiceSet::new(vec![4, 8, 16, 32], &model.slots()[0], 4, false).is_err());
}

#[test]
fn initialization_error_is_the_singular_value_tail() {
    let f = fixture();
    let net = Supernet::build(&f.teacher, &default_sets(&f.teacher)).unwrap();
    for b in net.choice_blocks() {
        let SlotWeights::Dense(w) = &f.teacher.slot(b.slot.id).weights else {
            unreachable!()
        };
        let s = svd(w).unwrap();
        let (u, v) = factors(net.model(), &b.slot);
        for &r in b.choices.ranks() {
            let approx = u.leading_columns(r).matmul_t(&v.leading_columns(r)).unwrap();
            let err = w.sub(&approx).unwrap().frobenius_norm();
            let tail = s.tail_norm(r);
            assert!(
                (err - tail).abs() <= 1e-8 * tail,
                "{} r={r}: {err} vs {tail}",
                b.slot.id
            );
        }
    }
}

pub fn prefixes_alias_between_configs() {
    let model = Model::new(&ModelConfig::default()).unwrap();
    let mut net = Supernet::build(&model, &default_sets(&model)).unwrap();
    let small = net.min_config();
    let large = net.max_config();
    {
        let a = net.activate(&small).unwrap();
        let b = net.activate(&large).unwrap();
        for i in 0..net.choice_blocks().len() {
            let (ua, va) = a.factors(i);
            let (ub, vb) = b.factors(i);
            assert!(ua.shares_storage_with(&ub) && va.shares_storage_with(&vb));
        }
    }
    net.activate_mut(&small).unwrap().factors_mut(3).0.set(5, 2, 123.5);
    assert_eq!(net.activate(&large).unwrap().factors(3).0.get(5, 2), 123.5);
    let bad = RankConfig(vec![5; 12]);
    assert!(matches!(net.activate(&bad), Err(Error::RankNotInChoices { .. })));
    assert!(matches!(net.activate(&RankConfig(vec![4; 3])), Err(Error::Argument(_))));
}

/// Every smaller configuration's factors equal the leading columns of
/// every larger one's, entry for entry.
fn assert_prefix_invariant(net: &Supernet) {
    for (i, b) in net.choice_blocks().iter().enumerate() {
        let ranks = b.choices.ranks();
        for (x, &ri) in ranks.iter().enumerate() {
            for &rk in &ranks[x..] {
                let mut ci = net.max_config();
                ci.0[i] = ri;
                let mut ck = net.max_config();
                ck.0[i] = rk;
                let vi = net.activate(&ci).unwrap();
                let vk = net.activate(&ck).unwrap();
                let (ui, wi) = vi.factors(i);
                let (uk, wk) = vk.factors(i);
                assert!(ui.shares_storage_with(&uk) && wi.shares_storage_with(&wk));
                for row in 0..ui.rows() {
                    for c in 0..ri {
                        assert_eq!(ui.get(row, c).to_bits(), uk.get(row, c).to_bits());
                    }
                }
                for row in 0..wi.rows() {
                    for c in 0..ri {
                        assert_eq!(wi.get(row, c).to_bits(), wk.get(row, c).to_bits());
                    }
                }
            }
        }
    }
}

pub fn training_touches_only_the_active_prefix() {
    let f = fixture();
    let mut net = Supernet::build(&f.teacher, &default_sets(&f.teacher)).unwrap();
    assert_prefix_invariant(&net);
    let cfg = SupernetTrainConfig {
        batch_size: 16,
        seed: 9,
        ..Default::default()
    };
    let mut trainer = SupernetTrainer::new(&net, &f.ds, &f.train, &f.teacher, &cfg, 100).unwrap();
    let mut epoch = 0;
    let mut batches = Vec::new();
    for step in 0..100 {
        if batches.is_empty() {
            batches = epoch_order(&f.train.indices, cfg.seed, epoch)
                .chunks(cfg.batch_size)
                .map(<[usize]>::to_vec)
                .rev()
                .collect();
            epoch += 1;
        }
        let batch = batches.pop().unwrap();
        let before: Vec<(Matrix, Matrix)> = net
            .choice_blocks()
            .iter()
            .map(|b| factors(net.model(), &b.slot))
            .collect();
        let rec = trainer.step(&mut net, &f.ds, &batch).unwrap();
        assert_eq!(rec.step, step);
        let mut moved = false;
        for ((b, (u0, v0)), &r) in net.choice_blocks().iter().zip(&before).zip(rec.config.ranks()) {
            let (u1, v1) = factors(net.model(), &b.slot);
            for (old, new) in [(u0, &u1), (v0, &v1)] {
                for row in 0..old.rows() {
                    for c in r..old.cols() {
                        assert_eq!(
                            old.get(row, c).to_bits(),
                            new.get(row, c).to_bits(),
                            "step {step} {}",
                            b.slot.id
                        );
                    }
                    moved |= (0..r).any(|c| old.get(row, c) != new.get(row, c));
                }
            }
        }
        assert!(moved, "step {step} changed nothing");
    }
    assert_eq!(net.steps_trained(), 100);
    assert_prefix_invariant(&net);
}

#[test]
fn prefix_gradient_equals_zero_padded_full_rank_gradient() {
    let f = fixture();
    let net = Supernet::build(&f.teacher, &default_sets(&f.teacher)).unwrap();
    let config = RankConfig(vec![4, 8, 12, 4, 12, 20, 8, 4, 12, 8, 16, 4]);
    let ranks = config.ranks().to_vec();
    let full: Vec<usize> = net.max_config().0;

    let mut padded = net.model().clone();
    for (b, &r) in net.choice_blocks().iter().zip(&ranks) {
        if let SlotWeights::Factored { u, v } = &mut padded.slot_mut(b.slot.id).weights {
            for m in [u, v] {
                for row in 0..m.rows() {
                    for c in r..m.cols() {
                        m.set(row, c, 0.0);
                    }
                }
            }
        }
    }

    let (imgs, labels) = f.ds.gather(&f.train.indices[..8]);
    let grads_of = |model: &Model, ranks: &[usize]| {
        let (logits, cache) = model.forward_train(&imgs, 8, Some(ranks)).unwrap();
        let out = cross_entropy(&logits, &labels).unwrap();
        let mut g = model.zeros_like();
        model.backward(&cache, &out.grad, &mut g).unwrap();
        (out.loss, g)
    };
    let (l_prefix, g_prefix) = grads_of(net.model(), &ranks);
    let (l_padded, g_padded) = grads_of(&padded, &full);
    assert!((l_prefix - l_padded).abs() <= 1e-12 * l_prefix.abs());
    for (b, &r) in net.choice_blocks().iter().zip(&ranks) {
        let (gu, gv) = factors(&g_prefix, &b.slot);
        let (pu, pv) = factors(&g_padded, &b.slot);
        for (g, p) in [(&gu, &pu), (&gv, &pv)] {
            let active = rel(&g.leading_columns(r), &p.leading_columns(r));
            assert!(active <= 1e-10, "{}: {active}", b.slot.id);
            for row in 0..g.rows() {
                for c in r..g.cols() {
                    assert_eq!(g.get(row, c), 0.0);
                    assert_eq!(p.get(row, c), 0.0);
                }
            }
        }
    }
}

pub fn singleton_supernet_is_a_lowrank_finetuner() {
    let f = fixture();
    let r = 8;
    let sets: Vec<Option<RankChoiceSet>> = f
        .teacher
        .slots()
        .iter()
        .map(|s| Some(RankChoiceSet::new(vec![r], s, 4, false).unwrap()))
        .collect();
    let cfg = SupernetTrainConfig {
        epochs: 2,
        batch_size: 32,
        lr: 0.01,
        momentum: 0.9,
        seed: 5,
        sampling: SamplingMode::LowRankAware,
        choice_blocks_only: false,
    };
    let mut net = Supernet::build(&f.teacher, &sets).unwrap();
    let trace = train_supernet(&mut net, &f.ds, &f.train, &f.teacher, &cfg).unwrap();

    // Hand-built: factor every slot at rank r, then distill with plain SGD.
    let mut model = f.teacher.clone();
    for slot in model.slots() {
        let sp = model.slot_mut(slot.id);
        let SlotWeights::Dense(w) = &sp.weights else {
            unreachable!()
        };
        let (u, v) = truncate(&svd(w).unwrap(), r).unwrap();
        sp.weights = SlotWeights::Factored { u, v };
    }
    let ranks = vec![r; 12];
    let steps = steps_per_epoch(f.train.len(), cfg.batch_size);
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, cfg.epochs * steps);
    let plan = UpdatePlan::new(&model, Some(&ranks), |_| true);
    let mut losses = Vec::new();
    for epoch in 0..cfg.epochs {
        for chunk in epoch_order(&f.train.indices, cfg.seed, epoch).chunks(cfg.batch_size) {
            let (imgs, labels) = f.ds.gather(chunk);
            let teacher = f.teacher.forward(&imgs, chunk.len(), None).unwrap();
            let (logits, cache) = model.forward_train(&imgs, chunk.len(), Some(&ranks)).unwrap();
            let out = distillation_loss(&logits, &teacher, &labels).unwrap();
            let mut g = model.zeros_like();
            model.backward(&cache, &out.grad, &mut g).unwrap();
            opt.step(&mut model, &g, &plan).unwrap();
            losses.push(out.loss);
        }
    }
    let trace_bits: Vec<u64> = trace.iter().map(|t| t.loss.to_bits()).collect();
    let hand_bits: Vec<u64> = losses.iter().map(|l| l.to_bits()).collect();
    assert_eq!(trace_bits, hand_bits);
    assert_eq!(net.model().checksum(), model.checksum());
    assert!(trace.iter().all(|t| t.config.ranks() == ranks.as_slice()));
}

#[test]
fn supernet_training_is_reproducible() {
    let f = fixture();
    let cfg = SupernetTrainConfig {
        epochs: 1,
        batch_size: 32,
        seed: 3,
        ..Default::default()
    };
    let run = || {
        let mut net = Supernet::build(&f.teacher, &default_sets(&f.teacher)).unwrap();
        let trace = train_supernet(&mut net, &f.ds, &f.train, &f.teacher, &cfg).unwrap();
        (net.model().checksum(), trace)
    };
    assert_eq!(run(), run());
}

#[test]
fn exploding_learning_rate_is_reported() {
    let f = fixture();
    let mut net = Supernet::build(&f.teacher, &default_sets(&f.teacher)).unwrap();
    let cfg = SupernetTrainConfig {
        epochs: 3,
        lr: 1e12,
        ..Default::default()
    };
    let err = train_supernet(&mut net, &f.ds, &f.train, &f.teacher, &cfg).unwrap_err();
    assert!(matches!(err, Error::Diverged { .. } | Error::NonFinite(_)), "{err:?}");
}

#[test]
fn exported_subnet_matches_view() {
    let f = fixture();
    let net = Supernet::build(&f.teacher, &default_sets(&f.teacher)).unwrap();
    let config = RankConfig(vec![8, 4, 12, 8, 20, 4, 4, 12, 8, 4, 8, 16]);
    let view = net.activate(&config).unwrap();
    let exported = view.export();
    let (imgs, _) = f.ds.gather(&f.val.indices);
    let a = view.forward(&imgs, f.val.len()).unwrap();
    let b = exported.forward(&imgs, f.val.len(), None).unwrap();
    assert!(rel(&a, &b) <= 1e-12);
    assert_eq!(exported.param_count() as u64, view.cost().params);
}

fn slot(m: usize, n: usize) -> LinearSlot {
    ModelConfig::default()
        .slots()
        .into_iter()
        .find(|s| s.m == m && s.n == n)
        .unwrap()
}

pub fn pmf_examples() {
    let s = slot(32, 32);
    let set = RankChoiceSet::new(vec![1, 2, 4], &s, 1, false).unwrap();
    let d = SamplerDistribution::new(std::slice::from_ref(&set), SamplingMode::LowRankAware);
    for (p, want) in d.pmf(0).iter().zip([4.0 / 7.0, 2.0 / 7.0, 1.0 / 7.0]) {
        assert!((p - want).abs() <= 1e-15);
    }
    let single = RankChoiceSet::new(vec![8], &s, 4, false).unwrap();
    let d = SamplerDistribution::new(&[single], SamplingMode::LowRankAware);
    assert_eq!(d.pmf(0), &[1.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(d.sample(&mut rng), RankConfig(vec![8]));
    let u = SamplerDistribution::new(&[set], SamplingMode::Uniform);
    assert!(u.pmf(0).iter().all(|&p| (p - 1.0 / 3.0).abs() <= 1e-15));
}

pub fn empirical_frequencies_within_three_sigma() {
    let model = Model::new(&ModelConfig::default()).unwrap();
    let sets: Vec<RankChoiceSet> = model
        .slots()
        .iter()
        .map(|s| RankChoiceSet::default_for(s, 4).unwrap())
        .collect();
    let d = SamplerDistribution::new(&sets, SamplingMode::LowRankAware);
    let draws = 100_000;
    let mut counts: Vec<Vec<usize>> = sets.iter().map(|s| vec![0; s.len()]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..draws {
        let c = d.sample(&mut rng);
        for (i, &r) in c.ranks().iter().enumerate() {
            counts[i][sets[i].ranks().iter().position(|&x| x == r).unwrap()] += 1;
        }
    }
    for (i, set) in sets.iter().enumerate() {
        let pmf = d.pmf(i);
        assert!((pmf.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        assert!(pmf.windows(2).all(|w| w[1] < w[0]));
        for (k, &p) in pmf.iter().enumerate() {
            let expected = draws as f64 * p;
            let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
            let got = counts[i][k] as f64;
            assert!(
                (got - expected).abs() <= 3.0 * sigma,
                "slot {i} rank {}: {got} vs {expected}",
                set.ranks()[k]
            );
        }
    }
}

#[test]
fn joint_probability_is_a_product() {
    let s = slot(32, 64);
    let sets = vec![
        RankChoiceSet::new(vec![4, 8, 12], &s, 4, false).unwrap(),
        RankChoiceSet::new(vec![4, 16], &s, 4, false).unwrap(),
        RankChoiceSet::new(vec![8, 12, 16, 20], &s, 4, false).unwrap(),
    ];
    let d = SamplerDistribution::new(&sets, SamplingMode::LowRankAware);
    let mut total = 0.0;
    for (i, &a) in sets[0].ranks().iter().enumerate() {
        for (j, &b) in sets[1].ranks().iter().enumerate() {
            for (k, &c) in sets[2].ranks().iter().enumerate() {
                let p = d.probability(&RankConfig(vec![a, b, c])).unwrap();
                assert_eq!(p, d.pmf(0)[i] * d.pmf(1)[j] * d.pmf(2)[k]);
                total += p;
            }
        }
    }
    assert!((total - 1.0).abs() <= 1e-12);
    assert!(d.probability(&RankConfig(vec![4, 8, 8])).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn inverse_rank_pmf_is_normalized_and_decreasing(mut ranks in proptest::collection::btree_set(1usize..32, 1..8)) {
        let s = slot(32, 32);
        let ranks: Vec<usize> = std::mem::take(&mut ranks).into_iter().collect();
        let set = RankChoiceSet::new(ranks.clone(), &s, 1, true).unwrap();
        let d = SamplerDistribution::new(&[set], SamplingMode::LowRankAware);
        let pmf = d.pmf(0);
        prop_assert!((pmf.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(pmf.windows(2).all(|w| w[1] < w[0]));
        // p(r)·r is constant.
        for (p, r) in pmf.iter().zip(&ranks) {
            prop_assert!((p * *r as f64 - pmf[0] * ranks[0] as f64).abs() <= 1e-12);
        }
    }

    #[test]
    fn choice_sets_respect_breakeven(g in 1usize..9) {
        for s in ModelConfig::default().slots() {
            let set = RankChoiceSet::default_for(&s, g).unwrap();
            let be = (s.m * s.n) as f64 / (s.m + s.n) as f64;
            prop_assert!(set.ranks().iter().all(|&r| r % g == 0 && (r as f64) < be));
            prop_assert!(!set.is_overcomplete());
        }
    }
}

/// Test entry points for the checks the acceptance run also calls.
mod shared {
    #[test]
    fn prefixes_alias_between_configs() {
        super::prefixes_alias_between_configs();
    }

    #[test]
    fn training_touches_only_the_active_prefix() {
        super::training_touches_only_the_active_prefix();
    }

    #[test]
    fn singleton_supernet_is_a_lowrank_finetuner() {
        super::singleton_supernet_is_a_lowrank_finetuner();
    }

    #[test]
    fn pmf_examples() {
        super::pmf_examples();
    }

    #[test]
    fn empirical_frequencies_within_three_sigma() {
        super::empirical_frequencies_within_three_sigma();
    }
}

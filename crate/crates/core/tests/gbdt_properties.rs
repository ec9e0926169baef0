//! Structural and numerical invariants of the boosting engine on random
//! data and random configurations.

use creditkit::gbdt::{Node, Tree};
use creditkit::gbdt::{fit, GbdtConfig, GbdtModel, GrowthMode, Loss};
use creditkit::matrix::FeatureMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Problem {
    x: FeatureMatrix,
    y: Vec<f64>,
}

fn problem(seed: u64, n: usize, m: usize, loss: Loss) -> Problem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            (0..m)
                .map(|_| {
                    // a coarse grid produces plenty of ties
                    if rng.gen_bool(0.3) {
                        f64::from(rng.gen_range(0..4))
                    } else {
                        rng.gen_range(-2.0..2.0)
                    }
                })
                .collect()
        })
        .collect();
    let y = rows
        .iter()
        .map(|r| {
            let s: f64 = r.iter().enumerate().map(|(j, v)| v * ((j + 1) as f64).cos()).sum();
            match loss {
                Loss::LogLoss => f64::from(u8::from(s + rng.gen_range(-0.7..0.7) > 0.0)),
                Loss::SquaredError => s + rng.gen_range(-0.3..0.3),
            }
        })
        .collect();
    let names = (0..m).map(|j| format!("f{j}")).collect();
    Problem {
        x: FeatureMatrix::from_rows(names, &rows).unwrap(),
        y,
    }
}

fn arb_mode() -> impl Strategy<Value = GrowthMode> {
    prop_oneof![Just(GrowthMode::Symmetric), Just(GrowthMode::LeafWise), Just(GrowthMode::DepthWise)]
}

fn arb_loss() -> impl Strategy<Value = Loss> {
    prop_oneof![Just(Loss::LogLoss), Just(Loss::SquaredError)]
}

fn arb_config() -> impl Strategy<Value = GbdtConfig> {
    (
        arb_mode(),
        arb_loss(),
        1usize..8,
        0.05f64..1.0,
        1usize..6,
        2usize..24,
        (0.0f64..2.0, 0.0f64..2.0, 0.0f64..2.0),
        2usize..=64,
        any::<u64>(),
    )
        .prop_map(|(mode, loss, iterations, lr, depth, leaves, (l1, l2, mcw), bins, seed)| GbdtConfig {
            iterations,
            learning_rate: lr,
            max_depth: depth,
            num_leaves: leaves,
            l1,
            l2,
            min_child_weight: mcw,
            histogram_bins: bins,
            seed,
            ..GbdtConfig::preset(mode, loss)
        })
}

/// Every split's cover is the sum of its children's; leaves are reachable.
fn covers_consistent(t: &Tree) -> bool {
    t.nodes.iter().all(|n| match n {
        Node::Split { left, right, cover, .. } => {
            (t.nodes[*left].cover() + t.nodes[*right].cover() - cover).abs() < 1e-9
        }
        Node::Leaf { .. } => true,
    })
}

fn symmetric_levels_agree(t: &Tree) -> bool {
    t.splits_by_depth().iter().all(|level| level.windows(2).all(|w| w[0] == w[1]))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn trees_respect_their_growth_contract(cfg in arb_config(), seed in any::<u64>(), n in 10usize..150, m in 1usize..6) {
        let p = problem(seed, n, m, cfg.loss);
        let (model, _) = fit(&p.x, &p.y, &cfg, None).unwrap();
        for t in &model.trees {
            match cfg.growth_mode {
                GrowthMode::Symmetric => {
                    prop_assert!(t.depth() <= cfg.max_depth);
                    prop_assert!(symmetric_levels_agree(t));
                }
                GrowthMode::LeafWise => prop_assert!(t.n_leaves() <= cfg.num_leaves),
                GrowthMode::DepthWise => prop_assert!(t.depth() <= cfg.max_depth),
            }
            prop_assert!(covers_consistent(t));
            // without row sampling the root sees every training row
            prop_assert_eq!(t.nodes[0].cover(), n as f64);
        }
        for v in model.predict_raw(&p.x).unwrap() {
            prop_assert!(v.is_finite());
        }
    }

    #[test]
    fn squared_error_training_loss_never_increases(
        mode in arb_mode(), seed in any::<u64>(), n in 10usize..150, lr in 0.05f64..=1.0, l2 in 0.0f64..3.0,
    ) {
        let p = problem(seed, n, 3, Loss::SquaredError);
        let cfg = GbdtConfig { iterations: 15, learning_rate: lr, l2, max_depth: 3, num_leaves: 8, ..GbdtConfig::preset(mode, Loss::SquaredError) };
        let (_, log) = fit(&p.x, &p.y, &cfg, None).unwrap();
        for w in log.train_loss.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12, "loss went up: {:?}", w);
        }
    }

    #[test]
    fn serialized_models_predict_identically(cfg in arb_config(), seed in any::<u64>()) {
        let p = problem(seed, 60, 4, cfg.loss);
        let (model, _) = fit(&p.x, &p.y, &cfg, None).unwrap();
        let back = GbdtModel::from_json(&model.to_json().unwrap()).unwrap();
        prop_assert_eq!(&back, &model);
        let a = model.predict_raw(&p.x).unwrap();
        let b = back.predict_raw(&p.x).unwrap();
        prop_assert!(a.iter().zip(&b).all(|(u, v)| u.to_bits() == v.to_bits()));
        prop_assert_eq!(back.model_hash(), model.model_hash());
    }
}

#[test]
fn models_are_identical_across_thread_counts() {
    let p = problem(3, 400, 6, Loss::LogLoss);
    for mode in GrowthMode::ALL {
        let cfg = GbdtConfig {
            iterations: 25,
            subsample: 0.7,
            feature_fraction: 0.7,
            seed: 99,
            ..GbdtConfig::preset(mode, Loss::LogLoss)
        };
        let hashes: Vec<String> = [1, 2, 3, 8]
            .iter()
            .map(|&threads| {
                let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
                pool.install(|| fit(&p.x, &p.y, &cfg, None)).unwrap().0.model_hash()
            })
            .collect();
        assert!(hashes.iter().all(|h| h == &hashes[0]), "{mode:?}: {hashes:?}");
    }
}

#[test]
fn different_seeds_change_sampled_models() {
    let p = problem(4, 300, 6, Loss::LogLoss);
    let cfg = |seed| GbdtConfig {
        iterations: 10,
        subsample: 0.6,
        seed,
        ..GbdtConfig::preset(GrowthMode::DepthWise, Loss::LogLoss)
    };
    let a = fit(&p.x, &p.y, &cfg(1), None).unwrap().0;
    let b = fit(&p.x, &p.y, &cfg(2), None).unwrap().0;
    assert_ne!(a.model_hash(), b.model_hash());
}

#[test]
fn early_stopping_keeps_the_best_validation_iteration() {
    let train = problem(5, 300, 4, Loss::LogLoss);
    let val = problem(6, 150, 4, Loss::LogLoss);
    let cfg = GbdtConfig {
        iterations: 300,
        learning_rate: 0.3,
        early_stopping_rounds: 10,
        ..GbdtConfig::preset(GrowthMode::LeafWise, Loss::LogLoss)
    };
    let (model, log) = fit(&train.x, &train.y, &cfg, Some((&val.x, &val.y))).unwrap();
    assert!(log.val_loss.len() < 300, "expected an early stop");
    let best = log
        .val_loss
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
    assert_eq!(model.best_iteration, best.0 + 1);
    assert_eq!(model.active_trees().len(), model.best_iteration);
}

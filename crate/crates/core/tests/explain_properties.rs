//! Attribution invariants: local accuracy, dummy features, ensemble
//! linearity and agreement with permutation importance.

use creditkit::explain::{permutation_importance, tree_shap, weighted_shap, Metric};
use creditkit::gbdt::{fit, GbdtConfig, GbdtModel, GrowthMode, Loss};
use creditkit::matrix::FeatureMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Data where the last column never influences the label and is constant,
/// so no tree can split on it.
fn data(seed: u64, n: usize, m: usize) -> (FeatureMatrix, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let mut r: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
            r.push(0.25);
            r
        })
        .collect();
    let y = rows
        .iter()
        .map(|r| f64::from(u8::from(r[0] - r[m - 1] * 0.5 + rng.gen_range(-0.3..0.3) > 0.0)))
        .collect();
    let names = (0..=m).map(|j| format!("f{j}")).collect();
    (FeatureMatrix::from_rows(names, &rows).unwrap(), y)
}

fn model(x: &FeatureMatrix, y: &[f64], mode: GrowthMode, seed: u64, iterations: usize) -> GbdtModel {
    let cfg = GbdtConfig {
        iterations,
        learning_rate: 0.2,
        max_depth: 4,
        num_leaves: 12,
        subsample: 0.8,
        seed,
        ..GbdtConfig::preset(mode, Loss::LogLoss)
    };
    fit(x, y, &cfg, None).unwrap().0
}

fn arb_mode() -> impl Strategy<Value = GrowthMode> {
    prop_oneof![Just(GrowthMode::Symmetric), Just(GrowthMode::LeafWise), Just(GrowthMode::DepthWise)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn attributions_add_up_to_the_raw_prediction(mode in arb_mode(), seed in any::<u64>(), m in 1usize..5, iters in 1usize..20) {
        let (x, y) = data(seed, 120, m);
        let model = model(&x, &y, mode, seed, iters);
        let shap = tree_shap(&model, &x).unwrap();
        let raw = model.predict_raw(&x).unwrap();
        for (r, f) in shap.reconstruct().iter().zip(&raw) {
            prop_assert!((r - f).abs() < 1e-9, "{r} vs {f}");
        }
        // the constant column is never split on and gets nothing
        for row in &shap.phi {
            prop_assert_eq!(row[m], 0.0);
        }
    }

    #[test]
    fn ensemble_attribution_is_the_weighted_sum(seed in any::<u64>(), w0 in 0.0f64..=1.0) {
        let (x, y) = data(seed, 100, 3);
        let a = model(&x, &y, GrowthMode::DepthWise, seed, 8);
        let b = model(&x, &y, GrowthMode::LeafWise, seed ^ 1, 8);
        let weights = [w0, 1.0 - w0];
        let combined = weighted_shap(&[a.clone(), b.clone()], &weights, &x).unwrap();
        let sa = tree_shap(&a, &x).unwrap();
        let sb = tree_shap(&b, &x).unwrap();
        prop_assert!((combined.base_value - (w0 * sa.base_value + (1.0 - w0) * sb.base_value)).abs() < 1e-12);
        for i in 0..x.n_rows() {
            for j in 0..x.n_cols() {
                let expect = w0 * sa.phi[i][j] + (1.0 - w0) * sb.phi[i][j];
                prop_assert!((combined.phi[i][j] - expect).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn permutation_importance_ignores_unused_columns() {
    let (x, y) = data(17, 400, 3);
    let m = model(&x, &y, GrowthMode::DepthWise, 0, 30);
    let perm = permutation_importance(&m, &x, &y, Metric::Auc, 3, 5).unwrap();
    assert_eq!(perm.mean[3], 0.0);
    // the label is driven mostly by f0
    let top = perm.ranking.top(1);
    assert_eq!(top, vec!["f0"]);
    let shap = tree_shap(&m, &x).unwrap();
    let mean_abs: Vec<f64> = (0..x.n_cols())
        .map(|j| shap.phi.iter().map(|r| r[j].abs()).sum::<f64>() / x.n_rows() as f64)
        .collect();
    let argmax = (0..mean_abs.len()).max_by(|&a, &b| mean_abs[a].total_cmp(&mean_abs[b])).unwrap();
    assert_eq!(argmax, 0);
}

#[test]
fn permutation_importance_is_reproducible_under_any_thread_count() {
    let (x, y) = data(23, 300, 3);
    let m = model(&x, &y, GrowthMode::Symmetric, 0, 15);
    let runs: Vec<Vec<f64>> = [1, 4]
        .iter()
        .map(|&t| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(t).build().unwrap();
            pool.install(|| permutation_importance(&m, &x, &y, Metric::Auc, 4, 9)).unwrap().mean
        })
        .collect();
    assert_eq!(runs[0], runs[1]);
}

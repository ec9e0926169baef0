//! Exact path-dependent Shapley values for a boosted model, their local
//! accuracy, the global importance ranking, permutation importance and a
//! partial dependence curve.
//!
//! cargo run --release --example treeshap

use creditkit::explain::{
    aggregate_importance, partial_dependence, permutation_importance, quantile_grid, tree_shap, Metric,
};
use creditkit::gbdt::{fit, GbdtConfig, GrowthMode, Loss};
use creditkit::matrix::FeatureMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> creditkit::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let names: Vec<String> = ["leverage", "margin", "liquidity", "noise"].iter().map(|s| s.to_string()).collect();
    let rows: Vec<Vec<f64>> = (0..1000).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let y: Vec<f64> = rows
        .iter()
        .map(|r| f64::from(u8::from(-1.5 * r[0] + r[1] + 0.4 * r[2] + rng.gen_range(-0.3..0.3) > 0.0)))
        .collect();
    let x = FeatureMatrix::from_rows(names, &rows)?;
    let cfg = GbdtConfig {
        iterations: 150,
        learning_rate: 0.1,
        max_depth: 4,
        ..GbdtConfig::preset(GrowthMode::DepthWise, Loss::LogLoss)
    };
    let (model, _) = fit(&x, &y, &cfg, None)?;

    let sample = x.select_rows(&(0..200).collect::<Vec<_>>());
    let shap = tree_shap(&model, &sample)?;
    let raw = model.predict_raw(&sample)?;
    let worst = shap.reconstruct().iter().zip(&raw).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("base value {:.4}; max |base + sum(phi) - f(x)| = {worst:.2e}", shap.base_value);
    println!("row 0 attributions: {:.4?}", shap.phi[0]);

    let ranking = aggregate_importance(std::slice::from_ref(&shap))?;
    println!("mean |SHAP| ranking:");
    for e in &ranking.entries {
        println!("  {:<10} {:.4}", e.feature, e.score);
    }
    let labels: Vec<f64> = y[..200].to_vec();
    let perm = permutation_importance(&model, &sample, &labels, Metric::Auc, 5, 1)?;
    println!("permutation importance (AUC drop):");
    for (f, d) in sample.column_names.iter().zip(&perm.mean) {
        println!("  {f:<10} {d:.4}");
    }
    let grid = quantile_grid(&sample, "leverage", 8)?;
    let pdp = partial_dependence(&model, "leverage", &grid, &sample)?;
    println!("partial dependence on leverage: {:.3?}", pdp.response);
    Ok(())
}

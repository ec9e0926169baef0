//! Tree-structured Parzen estimator search: a toy quadratic, then the
//! boosting hyperparameters of one growth mode against a validation split.
//!
//! cargo run --release --example tune_tpe

use creditkit::gbdt::{fit, mean_loss, GbdtConfig, GrowthMode, Loss};
use creditkit::matrix::FeatureMatrix;
use creditkit::tune::{apply_params, run_study, Dimension, Scale, SearchSpace};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> creditkit::Result<()> {
    let space = SearchSpace::new("toy", vec![Dimension::new("x", 0.0, 1.0, Scale::Linear, false)])?;
    let (best, study) = run_study(|p| Ok((p["x"] - 0.7).powi(2)), &space, 40, 3)?;
    println!("quadratic: best x = {:.4} after {} trials", best["x"], study.trials.len());

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut data = |n: usize| -> creditkit::Result<(FeatureMatrix, Vec<f64>)> {
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        let y = rows.iter().map(|r| f64::from(u8::from(r[0] + r[1].sin() > 0.0))).collect();
        Ok((FeatureMatrix::from_rows((0..4).map(|j| format!("x{j}")).collect(), &rows)?, y))
    };
    let (x_train, y_train) = data(800)?;
    let (x_val, y_val) = data(300)?;
    let space = SearchSpace::for_preset(GrowthMode::LeafWise);
    let mut base = GbdtConfig::preset(GrowthMode::LeafWise, Loss::LogLoss);
    base.early_stopping_rounds = 20;
    let objective = |p: &creditkit::tune::Params| -> creditkit::Result<f64> {
        let mut cfg = apply_params(&base, p)?;
        cfg.iterations = cfg.iterations.min(200);
        let (model, _) = fit(&x_train, &y_train, &cfg, Some((&x_val, &y_val)))?;
        Ok(mean_loss(Loss::LogLoss, &y_val, &model.predict_raw(&x_val)?))
    };
    let (best, study) = run_study(objective, &space, 15, 11)?;
    let value = study.best_trial().and_then(|t| t.value()).unwrap_or(f64::NAN);
    println!("leaf-wise: best validation log loss {value:.4}");
    for (k, v) in &best {
        println!("  {k:<20} {v:.4}");
    }
    println!("study hash {}", study.state_hash());
    Ok(())
}

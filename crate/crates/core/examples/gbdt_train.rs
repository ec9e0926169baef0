//! Trains the gradient-boosting engine in its three growth modes, first on
//! XOR and then on a synthetic credit task with early stopping.
//!
//! cargo run --release --example gbdt_train

use creditkit::gbdt::{fit, GbdtConfig, GrowthMode, Loss};
use creditkit::matrix::FeatureMatrix;
use creditkit::metrics::{auc, classification_metrics};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> creditkit::Result<()> {
    let names = vec!["a".to_string(), "b".to_string()];
    let xor = FeatureMatrix::from_rows(names, &[vec![0.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 1.0]])?;
    let y = [0.0, 1.0, 1.0, 0.0];
    let cfg = GbdtConfig {
        iterations: 10,
        learning_rate: 0.3,
        max_depth: 2,
        min_child_weight: 0.0,
        ..GbdtConfig::preset(GrowthMode::DepthWise, Loss::LogLoss)
    };
    let (model, _) = fit(&xor, &y, &cfg, None)?;
    println!("XOR probabilities: {:.3?}", model.predict_proba(&xor)?);

    // y = 1 when a noisy interaction of two of five features is positive
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let make = |rng: &mut ChaCha8Rng, n: usize| -> creditkit::Result<(FeatureMatrix, Vec<f64>)> {
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let y = rows
            .iter()
            .map(|r| f64::from(u8::from(r[0] * r[1] + 0.3 * r[2] + rng.gen_range(-0.2..0.2) > 0.0)))
            .collect();
        let names = (0..5).map(|j| format!("x{j}")).collect();
        Ok((FeatureMatrix::from_rows(names, &rows)?, y))
    };
    let (x_train, y_train) = make(&mut rng, 2000)?;
    let (x_val, y_val) = make(&mut rng, 500)?;
    let (x_test, y_test) = make(&mut rng, 500)?;
    let labels: Vec<u8> = y_test.iter().map(|&v| v as u8).collect();
    for mode in GrowthMode::ALL {
        let cfg = GbdtConfig {
            iterations: 400,
            learning_rate: 0.1,
            max_depth: 4,
            num_leaves: 15,
            early_stopping_rounds: 30,
            ..GbdtConfig::preset(mode, Loss::LogLoss)
        };
        let (model, log) = fit(&x_train, &y_train, &cfg, Some((&x_val, &y_val)))?;
        let p = model.predict_proba(&x_test)?;
        let report = classification_metrics(&labels, &p, 0.5)?;
        println!(
            "{:<11} trees {:>3} ({:?})  test AUC {:.4}  accuracy {:.4}  hash {}",
            mode.name(),
            model.active_trees().len(),
            log.stopping_reason,
            auc(&labels, &p)?,
            report.accuracy,
            &model.model_hash()[..12]
        );
    }
    Ok(())
}

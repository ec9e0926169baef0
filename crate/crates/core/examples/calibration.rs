//! Ensemble weighting and calibration: simplex weights that maximize
//! validation AUC, then isotonic (PAV) and logistic calibration maps.
//!
//! cargo run --example calibration

use creditkit::metrics::{auc, calibration_curve};
use creditkit::stats::sigmoid;
use creditkit::tune::{fit_isotonic, fit_logistic_calibration, optimize_weights, pav};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> creditkit::Result<()> {
    let (x, w) = pav(&[1.0, 2.0, 3.0, 4.0, 5.0], &[1.0, 3.0, 2.0, 2.0, 5.0]);
    println!("PAV of [1, 3, 2, 2, 5]: blocks at {x:?} with values {w:.3?}");

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 600;
    let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
    // three members of different quality; the scores are overconfident
    let members: Vec<Vec<f64>> = [1.5, 2.5, 4.0]
        .iter()
        .map(|&noise| {
            labels
                .iter()
                .map(|&y| sigmoid(3.0 * (f64::from(y) - 0.5 + noise * rng.gen_range(-0.5..0.5))))
                .collect()
        })
        .collect();
    for (i, m) in members.iter().enumerate() {
        println!("member {i}: AUC {:.4}", auc(&labels, m)?);
    }
    let weights = optimize_weights(&members, &labels)?;
    let blended = weights.combine(&members);
    println!("weights {:.3?} -> ensemble AUC {:.4}", weights.weights, auc(&labels, &blended)?);

    let iso = fit_isotonic(&blended, &labels)?;
    let logistic = fit_logistic_calibration(&blended, &labels)?;
    println!("isotonic map has {} knots; logistic map {:?}", iso.breakpoints.len(), logistic);
    let calibrated = iso.apply_all(&blended);
    let brier = |p: &[f64]| p.iter().zip(&labels).map(|(p, &y)| (p - f64::from(y)).powi(2)).sum::<f64>() / n as f64;
    println!("Brier score: raw {:.4}, isotonic {:.4}", brier(&blended), brier(&calibrated));
    for (name, probs) in [("raw", &blended), ("isotonic", &calibrated)] {
        println!("{name} reliability (mean predicted -> observed rate):");
        for b in calibration_curve(&labels, probs, 5)? {
            println!("  {:.3} -> {:.3}  ({} rows)", b.mean_predicted, b.observed_rate, b.count);
        }
    }
    Ok(())
}

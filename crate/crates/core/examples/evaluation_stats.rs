//! Evaluation statistics: tie-aware AUC two ways, Cohen's kappa, a DeLong
//! comparison of two correlated scorers and bootstrap intervals.
//!
//! cargo run --example evaluation_stats

use creditkit::metrics::{
    auc, auc_trapezoid, bootstrap_auc, classification_metrics, delong_test, kappa, regression_metrics, ConfusionCounts,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn main() -> creditkit::Result<()> {
    let labels = [0, 0, 1, 1, 0, 1, 1, 0];
    let scores = [0.1, 0.4, 0.4, 0.8, 0.3, 0.4, 0.9, 0.2];
    println!("AUC rank form {} / trapezoid {}", auc(&labels, &scores)?, auc_trapezoid(&labels, &scores)?);
    println!("kappa(tp 40, fp 20, tn 30, fn 10) = {}", kappa(&ConfusionCounts::new(40, 20, 30, 10))?);

    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let n = 400;
    let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
    let signal: Vec<f64> = labels.iter().map(|&y| f64::from(y) + rng.sample::<f64, _>(StandardNormal)).collect();
    let strong: Vec<f64> = signal.iter().map(|s| s + 0.3 * rng.sample::<f64, _>(StandardNormal)).collect();
    let weak: Vec<f64> = signal.iter().map(|s| s + 1.5 * rng.sample::<f64, _>(StandardNormal)).collect();
    let d = delong_test(&labels, &strong, &weak)?;
    println!("DeLong: AUC {:.4} vs {:.4}, z = {:.3}, p = {:.4}", d.auc_a, d.auc_b, d.z, d.p_value);
    let ci = bootstrap_auc(&labels, &strong, 1000, 7)?;
    println!("bootstrap 95% CI for the stronger AUC: [{:.4}, {:.4}]", ci.lower, ci.upper);

    let probs: Vec<f64> = strong.iter().map(|s| creditkit::stats::sigmoid(2.0 * (s - 0.5))).collect();
    let c = classification_metrics(&labels, &probs, 0.5)?;
    println!("at threshold 0.5: accuracy {:.4}, precision {:.4}, recall {:.4}, kappa {:.4}", c.accuracy, c.precision, c.recall, c.kappa);
    let y: Vec<f64> = labels.iter().map(|&v| f64::from(v)).collect();
    let r = regression_metrics(&y, &probs)?;
    println!("as a regression on the label: rmse {:.4}, r2 {:?}", r.rmse, r.r2);
    Ok(())
}

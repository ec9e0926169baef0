//! Population stability index between a reference sample and shifted
//! samples, and a column-wise drift report.
//!
//! cargo run --example drift_psi

use creditkit::matrix::FeatureMatrix;
use creditkit::metrics::{psi, psi_flagged, psi_report};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn main() -> creditkit::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut draw = |n: usize, shift: f64| -> Vec<f64> { (0..n).map(|_| shift + rng.sample::<f64, _>(StandardNormal)).collect() };
    let reference = draw(5000, 0.0);
    for shift in [0.0, 0.1, 0.25, 0.5, 1.0] {
        let p = psi(&reference, &draw(5000, shift), 10)?.psi;
        println!("shift {shift:.2}: PSI {p:.4}{}", if psi_flagged(p) { "  (flagged)" } else { "" });
    }

    let names = vec!["stable".to_string(), "drifting".to_string()];
    let train: Vec<Vec<f64>> = (0..2000).map(|_| vec![rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)]).collect();
    let test: Vec<Vec<f64>> = (0..2000).map(|_| vec![rng.gen_range(0.0..1.0), rng.gen_range(0.3..1.3)]).collect();
    let report = psi_report(
        &names,
        &FeatureMatrix::from_rows(names.clone(), &train)?,
        &FeatureMatrix::from_rows(names.clone(), &test)?,
        10,
    )?;
    for f in &report.features {
        println!("{:<9} PSI {:.4}", f.feature, f.psi);
    }
    println!("flagged: {:?}", report.flagged);
    Ok(())
}

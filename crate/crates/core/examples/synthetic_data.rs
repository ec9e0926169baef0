//! Writes a synthetic ratings table with the public export's column layout.
//!
//! ```bash
//! cargo run --example synthetic_data -- data/synthetic.csv
//! ```

use creditkit::synthetic::{write_csv, SyntheticSpec};

fn main() -> creditkit::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| "data/synthetic.csv".to_string());
    let spec = SyntheticSpec {
        foreign_agency_rows: 5,
        ..SyntheticSpec::default()
    };
    write_csv(&spec, path.as_ref())?;
    let rows = std::fs::read_to_string(&path)?.lines().count() - 1;
    println!("wrote {rows} rows ({} firms, {} years) to {path}", spec.n_firms, spec.n_years);
    Ok(())
}

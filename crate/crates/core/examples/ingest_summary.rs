//! Loads a ratings table (synthetic unless a path is given), binds the
//! column roles and prints the descriptive summary.
//!
//! cargo run --example ingest_summary [-- path/to/ratings.csv]

use creditkit::ingest::{agency_counts, bind_schema, load_table, summarize};
use creditkit::synthetic::{default_schema, generate_table, SyntheticSpec};

fn main() -> creditkit::Result<()> {
    env_logger::init();
    let table = match std::env::args().nth(1) {
        Some(path) => load_table(&path, b',')?,
        None => generate_table(&SyntheticSpec {
            foreign_agency_rows: 3,
            ..SyntheticSpec::default()
        })?,
    };
    let obs = bind_schema(&table, &default_schema())?;
    println!("{} rows read, {} bound, {} rejected", table.rows.len(), obs.len(), obs.rejected.len());
    for r in obs.rejected.iter().take(3) {
        println!("  rejected: {r:?}");
    }
    for (agency, n) in agency_counts(&obs) {
        println!("{:>12}: {n} ratings", agency.display_name());
    }
    println!();
    print!("{}", summarize(&obs)?.to_text_table());
    Ok(())
}

//! Mean observable for point-set fits with N = 3, 4, 5 centers to synthetic
//! jets with 3, 4, 5 Gaussian subjets. The smallest entry of each row should
//! sit at the true count.
//!
//! Usage: `cargo run --release --example subjet_counting [trials]`

use neemo::cli::{cmd_subjets, SubjetsConfig};

fn main() -> neemo::Result<()> {
    let trials = std::env::args().nth(1).map_or(3, |s| s.parse().expect("trials must be an integer"));
    let config = SubjetsConfig {
        trials,
        ..SubjetsConfig::default()
    };
    let table = cmd_subjets(&config, 0)?;
    print!("{}", table.to_text());
    Ok(())
}

//! Fit three randomly placed circles to a three-circle event and write the
//! trace, heatmaps and SVG frames (potential, particles, forces).
//!
//! Usage: `cargo run --release --example three_circles [seed] [out_dir]`

use std::path::PathBuf;

use neemo::cli::{cmd_fit, generate, random_three_circles, Generator, THREE_CIRCLES};
use neemo::fitter::FitConfig;

fn main() -> neemo::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed must be an integer"));
    let out = PathBuf::from(args.next().unwrap_or_else(|| "three-circles-out".into()));

    let event = generate(&Generator::three_circles(), 0)?;
    let shape = random_three_circles(seed, 64)?;
    let config = FitConfig {
        seed,
        snapshot_steps: vec![0, 50, 150, 300],
        ..FitConfig::default()
    };
    let report = cmd_fit(&event, &shape, &config, &out, true)?;

    println!("observable O = {:.5}", report.observable);
    for (k, c) in report.final_theta.chunks(3).enumerate() {
        println!("circle {k}: center ({:.3}, {:.3}) radius {:.3}", c[0], c[1], c[2].exp());
    }
    println!("truth: {THREE_CIRCLES:?}");
    println!("{} artifacts in {}", report.artifacts.len(), out.display());
    Ok(())
}

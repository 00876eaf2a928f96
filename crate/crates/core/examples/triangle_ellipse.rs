//! Fit a triangle plus an ellipse to particles scattered along both shapes,
//! starting from a perturbed guess.
//!
//! Usage: `cargo run --release --example triangle_ellipse [seed] [out_dir]`

use std::path::PathBuf;

use neemo::cli::{cmd_fit, perturbed_triangle_ellipse};
use neemo::events::{gen_triangle_ellipse_event, TriangleEllipse};
use neemo::fitter::FitConfig;

fn main() -> neemo::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed must be an integer"));
    let out = PathBuf::from(args.next().unwrap_or_else(|| "triangle-ellipse-out".into()));

    let truth = TriangleEllipse::default();
    let event = gen_triangle_ellipse_event(&truth, 64, 0)?;
    let init = perturbed_triangle_ellipse(&truth, seed);

    let config = FitConfig {
        seed,
        snapshot_steps: vec![0, 100, 300],
        ..FitConfig::default()
    };
    let report = cmd_fit(&event, &init.spec(64)?, &config, &out, true)?;
    println!("observable O = {:.5}", report.observable);
    println!("theta = {:.3?}", report.final_theta);
    println!("{} artifacts in {}", report.artifacts.len(), out.display());
    Ok(())
}

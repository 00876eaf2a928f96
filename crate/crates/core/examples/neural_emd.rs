//! Dual (Kantorovich-Rubinstein) EMD estimates with a 1-Lipschitz network,
//! compared with the exact value. Every iterate is a lower bound.

use neemo::fitter::{estimate_emd, EmdConfig};
use neemo::ot::{exact_emd, DiscreteMeasure};

fn main() -> neemo::Result<()> {
    let steps = std::env::args().nth(1).map_or(Ok(4000), |s| s.parse()).expect("steps must be an integer");
    let config = EmdConfig {
        steps,
        ..EmdConfig::default()
    };

    let a = DiscreteMeasure::dirac(&[0.0, 0.0]);
    let b = DiscreteMeasure::dirac(&[1.0, 0.0]);
    let est = estimate_emd(&a, &b, None, &config)?;
    println!("Dirac pair at distance 1: estimate {:.5}", est.value);

    let p = DiscreteMeasure::from_rows(
        vec![0.4, 0.35, 0.25],
        &[vec![0.1, 0.2], vec![0.6, 0.3], vec![0.4, 0.8]],
    )?;
    let q = DiscreteMeasure::from_rows(
        vec![0.2, 0.3, 0.3, 0.2],
        &[vec![0.3, 0.1], vec![0.9, 0.5], vec![0.2, 0.6], vec![0.7, 0.9]],
    )?;
    let exact = exact_emd(&p, &q)?.cost;
    let est = estimate_emd(&p, &q, None, &config)?;
    let above = est.history.iter().filter(|&&v| v > exact + 1e-6).count();
    println!(
        "random pair: exact {exact:.5}, estimate {:.5} ({:.2}% below), iterates above exact: {above}",
        est.value,
        100.0 * (exact - est.value) / exact
    );
    Ok(())
}

//! Exact transport against the entropic baseline at several epsilons.

use ndarray::Array2;
use neemo::ot::{emd_1d, exact_emd, sinkhorn_emd, DiscreteMeasure, SinkhornOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_measure(rng: &mut ChaCha8Rng, n: usize) -> neemo::Result<DiscreteMeasure> {
    let weights = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
    let points = Array2::from_shape_simple_fn((n, 2), || rng.gen_range(0.0..1.0));
    DiscreteMeasure::new(weights, points)
}

fn main() -> neemo::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = random_measure(&mut rng, 20)?;
    let q = random_measure(&mut rng, 25)?;
    let exact = exact_emd(&p, &q)?;
    println!("exact EMD          {:.6}", exact.cost);
    for epsilon in [1e-1, 1e-2, 1e-3] {
        let s = sinkhorn_emd(&p, &q, SinkhornOptions { epsilon, ..Default::default() })?;
        println!(
            "sinkhorn eps={epsilon:<6} {:.6}  ({:+.3}% , {} iterations)",
            s.value,
            100.0 * (s.value - exact.cost) / exact.cost,
            s.iterations
        );
    }

    let a = DiscreteMeasure::from_rows(vec![0.5, 0.5], &[vec![0.0], vec![1.0]])?;
    let b = DiscreteMeasure::from_rows(vec![0.25, 0.75], &[vec![0.5], vec![2.0]])?;
    println!("1D: simplex {:.10}, CDF formula {:.10}", exact_emd(&a, &b)?.cost, emd_1d(&a, &b)?);
    Ok(())
}

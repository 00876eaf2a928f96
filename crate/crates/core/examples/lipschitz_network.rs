//! Build constrained GroupSort networks and measure their empirical
//! Lipschitz ratio; round-trip one through a checkpoint.

use neemo::lipnet::{group_sort, LipschitzMlp, NetConfig, Projection};

fn main() -> neemo::Result<()> {
    println!("group_sort([3, 1, 4, 1], 2) = {:?}", group_sort(&[3.0, 1.0, 4.0, 1.0], 2)?);

    for (name, projection) in [("whole-matrix", Projection::WholeMatrix), ("per-row", Projection::PerRow)] {
        let config = NetConfig {
            projection,
            ..NetConfig::default()
        };
        let mut worst = 0.0f64;
        for seed in 0..10 {
            let net = LipschitzMlp::new(2, &config, seed)?;
            worst = worst.max(net.lipschitz_ratio_check(20_000, seed, -1.0, 1.0));
        }
        println!("{name:>12}: max |f(x)-f(y)|/|x-y| over 10 nets = {worst:.6}");
    }

    let net = LipschitzMlp::new(2, &NetConfig::default(), 7)?;
    let restored = LipschitzMlp::from_checkpoint(&net.to_checkpoint())?;
    let x = [0.25, -0.5];
    println!("checkpoint round trip: {} == {}", net.forward(&x)?, restored.forward(&x)?);
    Ok(())
}

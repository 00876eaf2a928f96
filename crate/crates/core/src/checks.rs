//! Invariant suites shared by the `check` command and the test targets.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::finite_diff_check;
use crate::error::{Error, Result};
use crate::fitter::{estimate_emd, EmdConfig};
use crate::lipnet::{InputNorm, LipschitzMlp, NetConfig, Projection};
use crate::ot::{cost_matrix, exact_emd, DiscreteMeasure};
use crate::shapes::{sample_jacobian_check, ShapeSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Lipschitz,
    Gradients,
    Oracle,
    Duality,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Lipschitz, Suite::Gradients, Suite::Oracle, Suite::Duality];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Lipschitz => "lipschitz",
            Suite::Gradients => "gradients",
            Suite::Oracle => "oracle",
            Suite::Duality => "duality",
        }
    }
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown check suite {s:?}")))
    }
}

/// Outcome of one named check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// The measured quantity compared against `threshold`.
    pub value: f64,
    pub threshold: f64,
    pub detail: String,
}

impl CheckResult {
    fn at_most(name: &str, value: f64, threshold: f64, detail: String) -> Self {
        Self {
            name: name.into(),
            passed: value <= threshold,
            value,
            threshold,
            detail,
        }
    }
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "[{}] {}: {:.3e} (limit {:.3e}) {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.value,
            self.threshold,
            self.detail
        )
    }
}

/// Random measure with `n` points uniform in the unit box and weights in
/// `[0.1, 1)`, normalized.
pub fn random_measure(rng: &mut impl Rng, n: usize, dim: usize) -> DiscreteMeasure {
    let weights: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
    let points = Array2::from_shape_fn((n, dim), |_| rng.gen::<f64>());
    DiscreteMeasure::new(weights, points)
        .expect("positive weights")
        .normalized()
}

/// `count` random 2D instance pairs with sizes in `lo..=hi`.
pub fn random_instances(count: usize, lo: usize, hi: usize, seed: u64) -> Vec<(DiscreteMeasure, DiscreteMeasure)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let n = rng.gen_range(lo..=hi);
            let m = rng.gen_range(lo..=hi);
            (random_measure(&mut rng, n, 2), random_measure(&mut rng, m, 2))
        })
        .collect()
}

/// Exact EMD by enumerating every basis of the transportation polytope.
/// Exponential in `n·m`; meant for `n, m ≤ 4`.
pub fn brute_force_emd(p: &DiscreteMeasure, q: &DiscreteMeasure) -> Result<f64> {
    let (p, q) = (p.normalized(), q.normalized());
    let cost = cost_matrix(&p, &q)?;
    let (n, m) = cost.dim();
    if n * m > 20 {
        return Err(Error::Config(format!("{n}x{m} is too large to enumerate")));
    }
    let a = p.weights().to_vec();
    let b = q.weights().to_vec();
    let basis = n + m - 1;
    let mut best = f64::INFINITY;
    for mask in 0u32..(1 << (n * m)) {
        if mask.count_ones() as usize != basis {
            continue;
        }
        if let Some(flow) = basic_solution(mask, n, m, &a, &b) {
            let c: f64 = flow.iter().map(|&(k, f)| f * cost[[k / m, k % m]]).sum();
            best = best.min(c);
        }
    }
    if best.is_finite() {
        Ok(best)
    } else {
        Err(Error::Numerical("no feasible basis found".into()))
    }
}

/// Flows on the cells of `mask` if they form a spanning tree whose unique
/// solution is nonnegative.
fn basic_solution(mask: u32, n: usize, m: usize, a: &[f64], b: &[f64]) -> Option<Vec<(usize, f64)>> {
    let mut open: Vec<usize> = (0..n * m).filter(|k| mask >> k & 1 == 1).collect();
    let (mut supply, mut demand) = (a.to_vec(), b.to_vec());
    let mut flow = Vec::with_capacity(open.len());
    while !open.is_empty() {
        let leaf = (0..n)
            .find_map(|i| {
                let cells: Vec<usize> = open.iter().copied().filter(|k| k / m == i).collect();
                (cells.len() == 1).then(|| (cells[0], true))
            })
            .or_else(|| {
                (0..m).find_map(|j| {
                    let cells: Vec<usize> = open.iter().copied().filter(|k| k % m == j).collect();
                    (cells.len() == 1).then(|| (cells[0], false))
                })
            })?;
        let (k, by_row) = leaf;
        let (i, j) = (k / m, k % m);
        let f = if by_row { supply[i] } else { demand[j] };
        if f < -1e-12 {
            return None;
        }
        supply[i] -= f;
        demand[j] -= f;
        flow.push((k, f));
        open.retain(|&c| c != k);
    }
    let residual = supply.iter().chain(&demand).fold(0.0f64, |r, v| r.max(v.abs()));
    (residual < 1e-9).then_some(flow)
}

pub fn run(suite: Suite, seed: u64) -> Result<Vec<CheckResult>> {
    match suite {
        Suite::Lipschitz => Ok(vec![lipschitz(10, 10_000, seed)]),
        Suite::Gradients => gradients(20, seed),
        Suite::Oracle => oracle(50, seed),
        Suite::Duality => duality(20, 300, seed),
    }
}

/// Empirical Lipschitz ratio over random constrained networks.
pub fn lipschitz(nets: usize, pairs: usize, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for k in 0..nets {
        let config = NetConfig {
            hidden: vec![rng.gen_range(4..=32) * 2; rng.gen_range(1..=4)],
            group_size: 2,
            input_norm: InputNorm::L2,
            projection: if k % 2 == 0 { Projection::WholeMatrix } else { Projection::PerRow },
        };
        let mut net = LipschitzMlp::new(2, &config, rng.gen()).expect("valid config");
        let params: Vec<f64> = (0..net.num_params()).map(|_| rng.gen_range(-3.0..3.0)).collect();
        net.set_params(&params);
        worst = worst.max(net.lipschitz_ratio_check(pairs, rng.gen(), -2.0, 2.0));
    }
    CheckResult::at_most(
        "lipschitz ratio",
        worst,
        1.0 + 1e-6,
        format!("{nets} networks x {pairs} pairs"),
    )
}

/// Autodiff against central differences for network parameters, network
/// inputs and shape parameters.
pub fn gradients(configs: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut net_err, mut shape_err): (f64, f64) = (0.0, 0.0);
    let mut skipped = 0;
    let mut done = 0;
    while done < configs {
        let config = NetConfig {
            hidden: vec![8; rng.gen_range(1..=3)],
            group_size: 2,
            ..NetConfig::default()
        };
        let mut net = LipschitzMlp::new(2, &config, rng.gen())?;
        let params: Vec<f64> = (0..net.num_params()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        net.set_params(&params);
        let x = [rng.gen::<f64>(), rng.gen::<f64>()];
        // Stay clear of sort ties so the finite difference sees one branch.
        if net.sort_margin(Array2::from_shape_vec((1, 2), x.to_vec()).expect("shape").view()) < 1e-3 {
            skipped += 1;
            continue;
        }
        let n = net.num_params();
        let mut point = params;
        point.extend(x);
        net_err = net_err.max(finite_diff_check(|t, v| net.forward_tape(t, &v[..n], &v[n..]), &point, 1e-5));

        let spec = match done % 3 {
            0 => ShapeSpec::circles(
                &[(rng.gen(), rng.gen(), rng.gen_range(0.05..0.4)), (rng.gen(), rng.gen(), rng.gen_range(0.05..0.4))],
                16,
            )?,
            1 => ShapeSpec::ellipse(
                [rng.gen(), rng.gen()],
                [rng.gen_range(0.1..0.4), rng.gen_range(0.05..0.3)],
                rng.gen_range(0.0..3.0),
                16,
            )?,
            _ => ShapeSpec::triangle(
                [[rng.gen(), rng.gen()], [rng.gen(), rng.gen()], [rng.gen(), rng.gen()]],
                16,
            )?,
        };
        shape_err = shape_err.max(sample_jacobian_check(&spec, Some(rng.gen()), 1e-5)?);
        done += 1;
    }
    Ok(vec![
        CheckResult::at_most(
            "network gradient",
            net_err,
            1e-4,
            format!("{configs} configurations, {skipped} near ties skipped"),
        ),
        CheckResult::at_most("shape gradient", shape_err, 1e-4, format!("{configs} configurations")),
    ])
}

/// Exact solver against enumeration, plus metric axioms.
pub fn oracle(cases: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut enum_err: f64 = 0.0;
    for _ in 0..cases {
        let (n, m) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
        let p = random_measure(&mut rng, n, 2);
        let q = random_measure(&mut rng, m, 2);
        enum_err = enum_err.max((exact_emd(&p, &q)?.cost - brute_force_emd(&p, &q)?).abs());
    }
    let (mut asym, mut triangle): (f64, f64) = (0.0, 0.0);
    for _ in 0..100 {
        let sizes: [usize; 3] = [rng.gen_range(1..=12), rng.gen_range(1..=12), rng.gen_range(1..=12)];
        let [a, b, c] = sizes.map(|n| random_measure(&mut rng, n, 2));
        let ab = exact_emd(&a, &b)?.cost;
        asym = asym.max((ab - exact_emd(&b, &a)?.cost).abs());
        triangle = triangle.max(ab - exact_emd(&a, &c)?.cost - exact_emd(&c, &b)?.cost);
    }
    Ok(vec![
        CheckResult::at_most("exact vs enumeration", enum_err, 1e-8, format!("{cases} instances, n, m <= 4")),
        CheckResult::at_most("symmetry", asym, 1e-8, "100 random pairs".into()),
        CheckResult::at_most("triangle inequality", triangle.max(0.0), 1e-8, "100 random triples".into()),
    ])
}

/// Every iterate of a short dual ascent stays below the exact value.
pub fn duality(instances: usize, steps: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut excess = f64::NEG_INFINITY;
    for (k, (p, q)) in random_instances(instances, 2, 30, seed).iter().enumerate() {
        let exact = exact_emd(p, q)?.cost;
        let est = estimate_emd(
            p,
            q,
            None,
            &EmdConfig {
                steps,
                lr: 1e-2,
                seed: seed.wrapping_add(k as u64),
                ..EmdConfig::default()
            },
        )?;
        for v in &est.history {
            excess = excess.max(v - exact);
        }
    }
    Ok(vec![CheckResult::at_most(
        "dual minus exact",
        excess,
        1e-6,
        format!("{instances} instances, {steps} steps each"),
    )])
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enumeration_matches_hand_solved_instances() {
        let p = DiscreteMeasure::from_rows(vec![1.0, 1.0], &[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let q = DiscreteMeasure::from_rows(vec![1.0, 1.0], &[vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert!((brute_force_emd(&p, &q).unwrap() - 1.0).abs() < 1e-12);
        let d = DiscreteMeasure::dirac(&[0.5, 0.5]);
        assert!((brute_force_emd(&p, &d).unwrap() - 0.5f64.hypot(0.5)).abs() < 1e-12);
        assert!(brute_force_emd(&d, &d).unwrap().abs() < 1e-15);
    }

    #[test]
    fn enumeration_rejects_large_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = random_measure(&mut rng, 5, 2);
        assert!(brute_force_emd(&p, &p).is_err());
    }

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert!("nope".parse::<Suite>().is_err());
    }

    #[test]
    fn oracle_suite_passes() {
        for r in oracle(20, 3).unwrap() {
            assert!(r.passed, "{r}");
        }
    }

    #[test]
    fn gradient_suite_passes() {
        for r in gradients(6, 5).unwrap() {
            assert!(r.passed, "{r}");
        }
    }

    #[test]
    fn mean_std_examples() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
    }
}

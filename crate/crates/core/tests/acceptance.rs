//! End-to-end acceptance criteria. Each criterion is one test that prints a
//! single `[PASS]`/`[FAIL]` line straight to stdout (bypassing the harness
//! capture) and then asserts. Criteria run one at a time so their wall-clock
//! budgets are measured without contention.
//!
//! Run with `cargo test --release --test acceptance`.

use std::io::Write;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use neemo::checks::{self, random_instances, random_measure};
use neemo::cli::{
    cmd_subjets, generate, perturbed_triangle_ellipse, random_three_circles, Generator, SubjetTable, SubjetsConfig,
    THREE_CIRCLES,
};
use neemo::events::{gen_triangle_ellipse_event, TriangleEllipse};
use neemo::fitter::{estimate_emd, fit, EmdConfig, FitConfig};
use neemo::ot::{emd_1d, exact_emd, sinkhorn_emd, DiscreteMeasure, SinkhornOptions};
use neemo::shapes::ShapeSpec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(id: u32, passed: bool, summary: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(
        out,
        "criterion {id} [{}] {summary}",
        if passed { "PASS" } else { "FAIL" }
    );
    let _ = out.flush();
}

fn within(elapsed: Duration, minutes: u64) -> bool {
    elapsed <= Duration::from_secs(60 * minutes)
}

#[test]
fn criterion_1_lipschitz_exactness() {
    let _guard = serial();
    let start = Instant::now();
    let check = checks::lipschitz(50, 100_000, 1);
    let elapsed = start.elapsed();
    let passed = check.passed && within(elapsed, 1);
    report(
        1,
        passed,
        &format!(
            "Lipschitz ratio max {:.9} (limit 1 + 1e-6) over {}; {:.1}s (limit 60s)",
            check.value,
            check.detail,
            elapsed.as_secs_f64()
        ),
    );
    assert!(passed);
}

struct DualRow {
    exact: f64,
    estimate: f64,
    max_excess: f64,
    sinkhorn: f64,
}

struct DualRun {
    rows: Vec<DualRow>,
    dual_time: Duration,
}

/// The 20 random instances shared by criteria 2 and 9, with dual and
/// Sinkhorn results computed once.
fn dual_run() -> &'static DualRun {
    static RUN: OnceLock<DualRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let instances = random_instances(20, 2, 30, 7);
        let mut dual_time = Duration::ZERO;
        let rows = instances
            .iter()
            .enumerate()
            .map(|(k, (p, q))| {
                let exact = exact_emd(p, q).expect("exact").cost;
                let start = Instant::now();
                let est = estimate_emd(
                    p,
                    q,
                    None,
                    &EmdConfig {
                        seed: k as u64,
                        ..EmdConfig::default()
                    },
                )
                .expect("dual ascent");
                dual_time += start.elapsed();
                let max_excess = est.history.iter().fold(f64::NEG_INFINITY, |a, v| a.max(v - exact));
                let sinkhorn = sinkhorn_emd(
                    p,
                    q,
                    SinkhornOptions {
                        epsilon: 1e-3,
                        ..SinkhornOptions::default()
                    },
                )
                .expect("sinkhorn")
                .value;
                DualRow {
                    exact,
                    estimate: est.value,
                    max_excess,
                    sinkhorn,
                }
            })
            .collect();
        DualRun { rows, dual_time }
    })
}

#[test]
fn criterion_2_weak_duality_lower_bound() {
    let _guard = serial();
    let run = dual_run();
    let excess = run.rows.iter().fold(f64::NEG_INFINITY, |a, r| a.max(r.max_excess));
    let rel: Vec<f64> = run.rows.iter().map(|r| (r.exact - r.estimate).abs() / r.exact).collect();
    let worst = rel.iter().cloned().fold(0.0, f64::max);
    let mean = rel.iter().sum::<f64>() / rel.len() as f64;
    let over = rel.iter().filter(|&&e| e > 0.05).count();
    let bound_ok = excess <= 1e-6;
    let passed = bound_ok && over == 0 && within(run.dual_time, 10);
    report(
        2,
        passed,
        &format!(
            "max(dual - exact) over all steps {excess:.3e} (limit 1e-6); final relative error worst {worst:.4}, \
             mean {mean:.4}, {over}/20 above 0.05; {:.1}s (limit 600s)",
            run.dual_time.as_secs_f64()
        ),
    );
    assert!(bound_ok, "a dual iterate exceeded the exact EMD by {excess}");
    assert!(passed);
}

#[test]
fn criterion_3_analytic_cases() {
    let _guard = serial();
    let config = EmdConfig::default();
    let a = DiscreteMeasure::dirac(&[0.0, 0.0]);
    let b = DiscreteMeasure::dirac(&[1.0, 0.0]);
    let dirac = estimate_emd(&a, &b, None, &config).expect("dual ascent").value;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = random_measure(&mut rng, 12, 2);
    let identical = estimate_emd(&p, &p.clone(), None, &config).expect("dual ascent").value;

    let mut cdf_err: f64 = 0.0;
    for _ in 0..100 {
        let (n, m) = (rng.gen_range(1..=20), rng.gen_range(1..=20));
        let p = random_measure(&mut rng, n, 1);
        let q = random_measure(&mut rng, m, 1);
        cdf_err = cdf_err.max((exact_emd(&p, &q).expect("exact").cost - emd_1d(&p, &q).expect("1d")).abs());
    }
    let passed = (0.99..=1.0).contains(&dirac) && (-1e-6..=1e-3).contains(&identical) && cdf_err <= 1e-8;
    report(
        3,
        passed,
        &format!(
            "Dirac pair {dirac:.5} (want [0.99, 1]); identical measures {identical:.2e} (want [-1e-6, 1e-3]); \
             1D exact vs CDF max error {cdf_err:.2e} over 100 instances (limit 1e-8)"
        ),
    );
    assert!(passed);
}

#[test]
fn criterion_4_oracle_self_consistency() {
    let _guard = serial();
    let results = checks::oracle(60, 4).expect("oracle suite");
    let passed = results.iter().all(|r| r.passed);
    let summary: Vec<String> = results.iter().map(|r| format!("{} {:.2e}", r.name, r.value)).collect();
    report(
        4,
        passed,
        &format!("{} (each limit 1e-8; 60 enumeration cases, 100 triples)", summary.join(", ")),
    );
    assert!(passed);
}

#[test]
fn criterion_5_gradient_correctness() {
    let _guard = serial();
    let results = checks::gradients(20, 5).expect("gradient suite");
    let passed = results.iter().all(|r| r.passed);
    let summary: Vec<String> = results.iter().map(|r| format!("{} {:.2e} ({})", r.name, r.value, r.detail)).collect();
    report(5, passed, &format!("{} (limit 1e-4)", summary.join(", ")));
    assert!(passed);
}

/// Largest center or radius error under the best matching of fitted to true
/// circles.
fn circle_error(theta: &[f64]) -> f64 {
    let got: Vec<(f64, f64, f64)> = theta.chunks(3).map(|c| (c[0], c[1], c[2].exp())).collect();
    let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    perms
        .iter()
        .map(|perm| {
            perm.iter()
                .zip(THREE_CIRCLES)
                .map(|(&k, (x, y, r))| {
                    let (gx, gy, gr) = got[k];
                    ((gx - x).hypot(gy - y)).max((gr - r).abs())
                })
                .fold(0.0, f64::max)
        })
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn criterion_6_three_circles() {
    let _guard = serial();
    let start = Instant::now();
    let event = generate(&Generator::three_circles(), 0).expect("event").normalize().expect("measure");
    let truth = ShapeSpec::circles(&THREE_CIRCLES, 64).expect("truth").sample(None).expect("sample");
    let floor = exact_emd(&event, &truth.to_measure().expect("measure")).expect("exact").cost;
    let mut lines = Vec::new();
    let mut converged = 0;
    for seed in 0..5 {
        let shape = random_three_circles(seed, 64).expect("shape");
        let fitted = fit(&event, &shape, &FitConfig { seed, ..FitConfig::default() }).expect("fit");
        let err = circle_error(&fitted.shape.theta);
        let ok = err <= 0.05 && fitted.observable <= 0.02;
        converged += ok as usize;
        lines.push(format!("seed {seed}: err {err:.4} O {:.4}", fitted.observable));
    }
    let elapsed = start.elapsed();
    let passed = converged >= 4 && within(elapsed, 15);
    report(
        6,
        passed,
        &format!(
            "three circles: {converged}/5 seeds with center/radius error <= 0.05 and O <= 0.02 (need 4) [{}]; \
             exact EMD at the true circles {floor:.4}; {:.1}s (limit 900s)",
            lines.join("; "),
            elapsed.as_secs_f64()
        ),
    );
    assert!(passed);
}

#[test]
fn criterion_7_triangle_and_ellipse() {
    let _guard = serial();
    let start = Instant::now();
    let truth = TriangleEllipse::default();
    let event = gen_triangle_ellipse_event(&truth, 64, 0).expect("event").normalize().expect("measure");
    let mut values = Vec::new();
    for seed in 0..5 {
        let shape = perturbed_triangle_ellipse(&truth, seed).spec(64).expect("shape");
        let fitted = fit(&event, &shape, &FitConfig { seed, ..FitConfig::default() }).expect("fit");
        values.push(fitted.observable);
    }
    let elapsed = start.elapsed();
    let converged = values.iter().filter(|&&o| o <= 0.02).count();
    let passed = converged >= 4 && within(elapsed, 15);
    report(
        7,
        passed,
        &format!(
            "triangle+ellipse: {converged}/5 seeds with O <= 0.02 (need 4), O = {:.4?}; {:.1}s (limit 900s)",
            values,
            elapsed.as_secs_f64()
        ),
    );
    assert!(passed);
}

fn standard_error(table: &SubjetTable, t: usize, f: usize) -> (f64, f64) {
    let c = table.cell(t, f).expect("cell present");
    (c.mean, c.std / (c.values.len() as f64).sqrt())
}

#[test]
fn criterion_8_subjet_counting() {
    let _guard = serial();
    let start = Instant::now();
    let config = SubjetsConfig::default();
    assert_eq!(config.trials, 10);
    let table = cmd_subjets(&config, 0).expect("subjet study");
    let elapsed = start.elapsed();

    let (m33, _) = standard_error(&table, 3, 3);
    let diagonal = [4, 5].iter().all(|&f| m33 < standard_error(&table, 3, f).0);
    // Beyond the true count the mean may not rise by more than one standard
    // error of the difference between neighbouring cells.
    let mut plateau = true;
    for t in [4usize, 5] {
        for f in t..5 {
            let (a, sa) = standard_error(&table, t, f);
            let (b, sb) = standard_error(&table, t, f + 1);
            plateau &= b <= a + sa.hypot(sb);
        }
    }
    let diverged: usize = table.cells.iter().map(|c| c.diverged).sum();
    let passed = diagonal && plateau && diverged == 0 && within(elapsed, 60);
    report(
        8,
        passed,
        &format!(
            "subjets: row 3 minimum on the diagonal {diagonal}, plateau for N = 4, 5 {plateau}, {diverged} diverged; \
             {:.1}s (limit 3600s)\n{}",
            elapsed.as_secs_f64(),
            table.to_text()
        ),
    );
    assert!(passed);
}

#[test]
fn criterion_9_sinkhorn_baseline() {
    let _guard = serial();
    let run = dual_run();
    let sink_rel: Vec<f64> = run.rows.iter().map(|r| (r.sinkhorn - r.exact).abs() / r.exact).collect();
    let worst_sink = sink_rel.iter().cloned().fold(0.0, f64::max);
    let ratio_fail = run
        .rows
        .iter()
        .filter(|r| (r.estimate - r.exact).abs() > 5.0 * (r.sinkhorn - r.exact).abs())
        .count();
    let worst_ratio = run
        .rows
        .iter()
        .map(|r| (r.estimate - r.exact).abs() / (r.sinkhorn - r.exact).abs().max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max);
    let passed = worst_sink <= 0.01 && ratio_fail == 0;
    report(
        9,
        passed,
        &format!(
            "Sinkhorn(eps=1e-3) worst relative error {worst_sink:.2e} (limit 0.01); dual error > 5x Sinkhorn error \
             on {ratio_fail}/20 instances (worst ratio {worst_ratio:.1})"
        ),
    );
    assert!(passed);
}

#[test]
fn instances_are_two_dimensional_and_small() {
    for (p, q) in random_instances(20, 2, 30, 7) {
        assert_eq!((p.dim(), q.dim()), (2, 2));
        assert!(p.len() <= 30 && q.len() <= 30);
    }
}

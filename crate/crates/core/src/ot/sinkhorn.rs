use ndarray::Array2;

use super::{cost_matrix, DiscreteMeasure};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SinkhornVariant {
    /// Stabilized updates on the dual potentials; safe for small epsilon.
    #[default]
    LogDomain,
    /// Matrix scaling with the Gibbs kernel `exp(-C/ε)`; underflows for
    /// small epsilon.
    Kernel,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornOptions {
    pub epsilon: f64,
    pub max_iters: usize,
    /// Stop once the L1 violation of the row marginal drops below this.
    pub tol: f64,
    pub variant: SinkhornVariant,
}

impl Default for SinkhornOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-2,
            max_iters: 100_000,
            tol: 1e-9,
            variant: SinkhornVariant::LogDomain,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SinkhornResult {
    /// `Σ γ_ij C_ij` without the entropy term.
    pub value: f64,
    pub iterations: usize,
    pub marginal_error: f64,
    pub plan: Array2<f64>,
}

fn log_sum_exp(it: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = it.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + it.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Entropic-regularized transport cost between the normalized measures.
pub fn sinkhorn_emd(p: &DiscreteMeasure, q: &DiscreteMeasure, opts: SinkhornOptions) -> Result<SinkhornResult> {
    if !(opts.epsilon > 0.0) {
        return Err(Error::Config(format!("epsilon must be positive, got {}", opts.epsilon)));
    }
    let cost = cost_matrix(p, q)?;
    let (p, q) = (p.normalized(), q.normalized());
    let a = p.weights().to_vec();
    let b = q.weights().to_vec();
    match opts.variant {
        SinkhornVariant::LogDomain => log_domain(&a, &b, &cost, opts),
        SinkhornVariant::Kernel => kernel(&a, &b, &cost, opts),
    }
}

fn finish(plan: Array2<f64>, cost: &Array2<f64>, iterations: usize, marginal_error: f64) -> Result<SinkhornResult> {
    let value = (&plan * cost).sum();
    if !value.is_finite() {
        return Err(Error::Numerical(
            "Sinkhorn produced a non-finite cost; try a larger epsilon".into(),
        ));
    }
    Ok(SinkhornResult {
        value,
        iterations,
        marginal_error,
        plan,
    })
}

fn log_domain(a: &[f64], b: &[f64], cost: &Array2<f64>, opts: SinkhornOptions) -> Result<SinkhornResult> {
    let eps = opts.epsilon;
    let (n, m) = cost.dim();
    let log_a: Vec<f64> = a.iter().map(|x| x.ln()).collect();
    let log_b: Vec<f64> = b.iter().map(|x| x.ln()).collect();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let plan_of = |f: &[f64], g: &[f64]| Array2::from_shape_fn((n, m), |(i, j)| ((f[i] + g[j] - cost[[i, j]]) / eps).exp());

    let mut iterations = 0;
    let mut err = f64::INFINITY;
    while iterations < opts.max_iters {
        for i in 0..n {
            let lse = log_sum_exp((0..m).map(|j| (g[j] - cost[[i, j]]) / eps));
            f[i] = eps * (log_a[i] - lse);
        }
        for j in 0..m {
            let lse = log_sum_exp((0..n).map(|i| (f[i] - cost[[i, j]]) / eps));
            g[j] = eps * (log_b[j] - lse);
        }
        iterations += 1;
        // Columns are exact after the g update; check the rows.
        if iterations % 10 == 0 || iterations == opts.max_iters {
            err = 0.0;
            for i in 0..n {
                let row: f64 = (0..m).map(|j| ((f[i] + g[j] - cost[[i, j]]) / eps).exp()).sum();
                err += (row - a[i]).abs();
            }
            if !err.is_finite() {
                return Err(Error::Numerical("Sinkhorn iterates became non-finite".into()));
            }
            if err < opts.tol {
                break;
            }
        }
    }
    finish(plan_of(&f, &g), cost, iterations, err)
}

fn kernel(a: &[f64], b: &[f64], cost: &Array2<f64>, opts: SinkhornOptions) -> Result<SinkhornResult> {
    let k = cost.mapv(|c| (-c / opts.epsilon).exp());
    let (n, m) = k.dim();
    let mut u = vec![1.0; n];
    let mut v = vec![1.0; m];
    let underflow = || {
        Error::Numerical(format!(
            "Gibbs kernel underflowed at epsilon = {}; use a larger epsilon or the log-domain variant",
            opts.epsilon
        ))
    };
    let mut iterations = 0;
    let mut err = f64::INFINITY;
    while iterations < opts.max_iters {
        for i in 0..n {
            let s: f64 = (0..m).map(|j| k[[i, j]] * v[j]).sum();
            if s == 0.0 || !s.is_finite() {
                return Err(underflow());
            }
            u[i] = a[i] / s;
        }
        for j in 0..m {
            let s: f64 = (0..n).map(|i| k[[i, j]] * u[i]).sum();
            if s == 0.0 || !s.is_finite() {
                return Err(underflow());
            }
            v[j] = b[j] / s;
        }
        iterations += 1;
        err = (0..n)
            .map(|i| ((0..m).map(|j| u[i] * k[[i, j]] * v[j]).sum::<f64>() - a[i]).abs())
            .sum();
        if !err.is_finite() {
            return Err(underflow());
        }
        if err < opts.tol {
            break;
        }
    }
    let plan = Array2::from_shape_fn((n, m), |(i, j)| u[i] * k[[i, j]] * v[j]);
    finish(plan, cost, iterations, err)
}

//! Discrete optimal transport with the Euclidean ground cost.
//!
//! Three independent routes to the Earth Mover's Distance live here:
//!
//! | Function | Method |
//! |----------|--------|
//! | [`exact_emd`] | transportation simplex, optimal plan and dual certificate |
//! | [`emd_1d`] | closed-form CDF integral on the real line |
//! | [`sinkhorn_emd`] | entropic regularization, log-domain Sinkhorn iterations |
//!
//! Transport is balanced: both measures are rescaled to unit mass before
//! solving, and zero-weight points are dropped.

mod simplex;
mod sinkhorn;

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};

pub use simplex::{transportation_simplex, SimplexSolution};
pub use sinkhorn::{sinkhorn_emd, SinkhornOptions, SinkhornResult, SinkhornVariant};

/// Weighted point cloud: `weights[i]` mass sits at row `i` of `points`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    weights: Array1<f64>,
    points: Array2<f64>,
}

impl DiscreteMeasure {
    pub fn new(weights: Vec<f64>, points: Array2<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Input("a measure needs at least one point".into()));
        }
        if weights.len() != points.nrows() {
            return Err(Error::Input(format!(
                "{} weights for {} points",
                weights.len(),
                points.nrows()
            )));
        }
        if points.ncols() == 0 {
            return Err(Error::Input("points must have at least one coordinate".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Input("weights must be finite and non-negative".into()));
        }
        if points.iter().any(|x| !x.is_finite()) {
            return Err(Error::Input("point coordinates must be finite".into()));
        }
        if weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Input("degenerate measure: total weight is zero".into()));
        }
        Ok(Self {
            weights: Array1::from(weights),
            points,
        })
    }

    /// Builds a measure from per-point coordinate rows.
    pub fn from_rows(weights: Vec<f64>, rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Input("points have inconsistent dimensions".into()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let points = Array2::from_shape_vec((rows.len(), d), flat).expect("shape checked");
        Self::new(weights, points)
    }

    /// Unit mass at a single point.
    pub fn dirac(point: &[f64]) -> Self {
        Self::from_rows(vec![1.0], &[point.to_vec()]).expect("valid dirac")
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn weights(&self) -> ArrayView1<'_, f64> {
        self.weights.view()
    }

    pub fn points(&self) -> &Array2<f64> {
        &self.points
    }

    pub fn total(&self) -> f64 {
        self.weights.sum()
    }

    /// Same points, weights rescaled to sum to one.
    pub fn normalized(&self) -> Self {
        let total = self.total();
        Self {
            weights: self.weights.mapv(|w| w / total),
            points: self.points.clone(),
        }
    }

    /// Drops zero-weight points; returns the kept original indices.
    fn support(&self) -> (Self, Vec<usize>) {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| self.weights[i] > 0.0).collect();
        let weights = keep.iter().map(|&i| self.weights[i]).collect();
        let points = self.points.select(ndarray::Axis(0), &keep);
        (Self { weights, points }, keep)
    }
}

/// A coupling between two measures and its transport cost.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    /// `n × m`, rows follow the source measure.
    pub gamma: Array2<f64>,
    pub cost: f64,
}

fn check_dims(p: &DiscreteMeasure, q: &DiscreteMeasure) -> Result<()> {
    if p.dim() != q.dim() {
        return Err(Error::Input(format!(
            "dimension mismatch: {} vs {}",
            p.dim(),
            q.dim()
        )));
    }
    Ok(())
}

fn euclidean(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Pairwise Euclidean distances `C[i][j] = ‖x_i - y_j‖₂`.
pub fn cost_matrix(p: &DiscreteMeasure, q: &DiscreteMeasure) -> Result<Array2<f64>> {
    check_dims(p, q)?;
    Ok(Array2::from_shape_fn((p.len(), q.len()), |(i, j)| {
        euclidean(p.points.row(i), q.points.row(j))
    }))
}

/// Exact EMD between the normalized measures.
pub fn exact_emd(p: &DiscreteMeasure, q: &DiscreteMeasure) -> Result<TransportPlan> {
    check_dims(p, q)?;
    let (ps, prow) = p.normalized().support();
    let (qs, qcol) = q.normalized().support();
    let cost = cost_matrix(&ps, &qs)?;
    let sol = transportation_simplex(
        ps.weights.as_slice().expect("contiguous"),
        qs.weights.as_slice().expect("contiguous"),
        &cost,
    )?;
    let mut gamma = Array2::zeros((p.len(), q.len()));
    for ((i, j), &f) in sol.flow.indexed_iter() {
        gamma[[prow[i], qcol[j]]] = f;
    }
    let total = (&sol.flow * &cost).sum();
    Ok(TransportPlan { gamma, cost: total })
}

/// `∫ |F_P(t) - F_Q(t)| dt` for one-dimensional measures.
pub fn emd_1d(p: &DiscreteMeasure, q: &DiscreteMeasure) -> Result<f64> {
    if p.dim() != 1 || q.dim() != 1 {
        return Err(Error::Input(format!(
            "emd_1d needs one-dimensional measures, got {} and {}",
            p.dim(),
            q.dim()
        )));
    }
    let (p, q) = (p.normalized(), q.normalized());
    let mut events: Vec<(f64, f64)> = p
        .points
        .column(0)
        .iter()
        .zip(p.weights.iter())
        .map(|(&x, &w)| (x, w))
        .chain(
            q.points
                .column(0)
                .iter()
                .zip(q.weights.iter())
                .map(|(&x, &w)| (x, -w)),
        )
        .collect();
    events.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut gap = 0.0;
    let mut total = 0.0;
    for pair in events.windows(2) {
        gap += pair[0].1;
        total += gap.abs() * (pair[1].0 - pair[0].0);
    }
    Ok(total)
}

/// `Σ_i a_i f(x_i) - Σ_j b_j f(y_j)`: the dual objective of a potential given
/// by its values at the two supports.
pub fn dual_value(p: &DiscreteMeasure, fp: ArrayView1<f64>, q: &DiscreteMeasure, fq: ArrayView1<f64>) -> f64 {
    let (p, q) = (p.normalized(), q.normalized());
    p.weights.dot(&fp) - q.weights.dot(&fq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_measure(rng: &mut impl Rng, n: usize, d: usize) -> DiscreteMeasure {
        let w = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
        let pts = Array2::from_shape_fn((n, d), |_| rng.gen_range(0.0..1.0));
        DiscreteMeasure::new(w, pts).unwrap()
    }

    #[test]
    fn cost_matrix_examples() {
        let a = DiscreteMeasure::dirac(&[1.0, 2.0]);
        assert_eq!(cost_matrix(&a, &a).unwrap(), array![[0.0]]);
        let x = DiscreteMeasure::dirac(&[0.0, 0.0]);
        let y = DiscreteMeasure::dirac(&[3.0, 4.0]);
        assert_eq!(cost_matrix(&x, &y).unwrap(), array![[5.0]]);
        let line = DiscreteMeasure::from_rows(vec![1.0, 1.0], &[vec![0.0], vec![1.0]]).unwrap();
        assert_eq!(cost_matrix(&line, &line).unwrap(), array![[0.0, 1.0], [1.0, 0.0]]);
        assert!(matches!(cost_matrix(&x, &line), Err(Error::Input(_))));
    }

    #[test]
    fn degenerate_measures_are_rejected() {
        let r = DiscreteMeasure::from_rows(vec![0.0, 0.0], &[vec![0.0], vec![1.0]]);
        assert!(matches!(r, Err(Error::Input(_))));
        assert!(DiscreteMeasure::from_rows(vec![-1.0], &[vec![0.0]]).is_err());
    }

    #[test]
    fn exact_emd_analytic_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_measure(&mut rng, 7, 2);
        assert!(exact_emd(&p, &p).unwrap().cost.abs() < 1e-12);

        let a = DiscreteMeasure::dirac(&[0.0, 0.0]);
        let b = DiscreteMeasure::dirac(&[0.3, 0.4]);
        assert!((exact_emd(&a, &b).unwrap().cost - 0.5).abs() < 1e-15);

        let p = DiscreteMeasure::from_rows(vec![0.5, 0.5], &[vec![0.0], vec![2.0]]).unwrap();
        let q = DiscreteMeasure::dirac(&[1.0]);
        assert!((exact_emd(&p, &q).unwrap().cost - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_weights_are_dropped_from_the_plan() {
        let p = DiscreteMeasure::from_rows(vec![1.0, 0.0, 1.0], &[vec![0.0], vec![5.0], vec![1.0]]).unwrap();
        let q = DiscreteMeasure::from_rows(vec![2.0, 0.0], &[vec![0.5], vec![9.0]]).unwrap();
        let plan = exact_emd(&p, &q).unwrap();
        assert_eq!(plan.gamma.dim(), (3, 2));
        assert_eq!(plan.gamma.row(1).sum(), 0.0);
        assert_eq!(plan.gamma.column(1).sum(), 0.0);
        assert!((plan.cost - 0.5).abs() < 1e-15);
    }

    #[test]
    fn plans_have_the_right_marginals_and_cost() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let n = rng.gen_range(1..15);
            let m = rng.gen_range(1..15);
            let p = random_measure(&mut rng, n, 2);
            let q = random_measure(&mut rng, m, 2);
            let plan = exact_emd(&p, &q).unwrap();
            let (pn, qn) = (p.normalized(), q.normalized());
            for (r, w) in plan.gamma.rows().into_iter().zip(pn.weights().iter()) {
                assert!((r.sum() - w).abs() <= 1e-8 * w.max(1e-300) + 1e-15);
            }
            for (c, w) in plan.gamma.columns().into_iter().zip(qn.weights().iter()) {
                assert!((c.sum() - w).abs() <= 1e-8 * w + 1e-15);
            }
            assert!(plan.gamma.iter().all(|&g| g >= 0.0));
            let c = cost_matrix(&p, &q).unwrap();
            let recomputed = (&plan.gamma * &c).sum();
            assert!((recomputed - plan.cost).abs() <= 1e-10 * plan.cost.max(1e-300));
        }
    }

    #[test]
    fn emd_1d_examples() {
        let p = DiscreteMeasure::from_rows(vec![0.2, 0.8], &[vec![0.0], vec![1.5]]).unwrap();
        assert_eq!(emd_1d(&p, &p).unwrap(), 0.0);
        let a = DiscreteMeasure::dirac(&[0.0]);
        let b = DiscreteMeasure::dirac(&[3.0]);
        assert_eq!(emd_1d(&a, &b).unwrap(), 3.0);
        let two_d = DiscreteMeasure::dirac(&[0.0, 1.0]);
        assert!(matches!(emd_1d(&two_d, &two_d), Err(Error::Input(_))));
    }

    #[test]
    fn exact_and_cdf_routes_agree_in_one_dimension() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let (n, m) = (rng.gen_range(1..20), rng.gen_range(1..20));
            let p = random_measure(&mut rng, n, 1);
            let q = random_measure(&mut rng, m, 1);
            let exact = exact_emd(&p, &q).unwrap().cost;
            let cdf = emd_1d(&p, &q).unwrap();
            assert!((exact - cdf).abs() <= 1e-8, "{exact} vs {cdf}");
        }
    }

    #[test]
    fn symmetry_and_triangle_inequality() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..30 {
            let a = random_measure(&mut rng, 6, 2);
            let b = random_measure(&mut rng, 5, 2);
            let c = random_measure(&mut rng, 7, 2);
            let ab = exact_emd(&a, &b).unwrap().cost;
            let ba = exact_emd(&b, &a).unwrap().cost;
            let bc = exact_emd(&b, &c).unwrap().cost;
            let ac = exact_emd(&a, &c).unwrap().cost;
            assert!((ab - ba).abs() <= 1e-8);
            assert!(ac <= ab + bc + 1e-8);
        }
    }
}

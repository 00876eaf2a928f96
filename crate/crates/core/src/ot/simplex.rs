//! Transportation simplex on the complete bipartite graph.
//!
//! The basis is a spanning tree over `n` row nodes and `m` column nodes
//! (`n + m - 1` basic cells). Each pivot computes the dual potentials on the
//! tree, picks the entering cell by Bland's rule (lowest flat index with a
//! negative reduced cost), pushes flow around the unique cycle it closes and
//! drops the lowest-index blocking cell. Bland's rule rules out cycling on
//! degenerate pivots.

use std::collections::VecDeque;

use ndarray::Array2;

use crate::error::{Error, Result};

/// Optimal flow together with the dual certificate.
#[derive(Debug, Clone)]
pub struct SimplexSolution {
    pub flow: Array2<f64>,
    /// `u_i + v_j = C_ij` on basic cells and `≤ C_ij` elsewhere (up to
    /// rounding) at optimality.
    pub row_potential: Vec<f64>,
    pub col_potential: Vec<f64>,
    pub pivots: usize,
}

struct Basis {
    n: usize,
    m: usize,
    /// Tree adjacency; rows are nodes `0..n`, columns `n..n+m`.
    adj: Vec<Vec<usize>>,
    basic: Vec<bool>,
}

impl Basis {
    fn insert(&mut self, i: usize, j: usize) {
        self.basic[i * self.m + j] = true;
        self.adj[i].push(self.n + j);
        self.adj[self.n + j].push(i);
    }

    fn remove(&mut self, i: usize, j: usize) {
        self.basic[i * self.m + j] = false;
        let col = self.n + j;
        self.adj[i].retain(|&c| c != col);
        self.adj[col].retain(|&r| r != i);
    }

    fn potentials(&self, cost: &Array2<f64>) -> (Vec<f64>, Vec<f64>) {
        let (n, m) = (self.n, self.m);
        let mut pot = vec![f64::NAN; n + m];
        pot[0] = 0.0;
        let mut queue = VecDeque::from([0usize]);
        while let Some(node) = queue.pop_front() {
            for &next in &self.adj[node] {
                if pot[next].is_nan() {
                    let c = if node < n {
                        cost[[node, next - n]]
                    } else {
                        cost[[next, node - n]]
                    };
                    pot[next] = c - pot[node];
                    queue.push_back(next);
                }
            }
        }
        let v = pot.split_off(n);
        (pot, v)
    }

    /// Tree path from row node `i` to column node `n + j`, as node ids.
    fn path(&self, i: usize, j: usize) -> Vec<usize> {
        let target = self.n + j;
        let mut prev = vec![usize::MAX; self.n + self.m];
        prev[i] = i;
        let mut queue = VecDeque::from([i]);
        while let Some(node) = queue.pop_front() {
            if node == target {
                break;
            }
            for &next in &self.adj[node] {
                if prev[next] == usize::MAX {
                    prev[next] = node;
                    queue.push_back(next);
                }
            }
        }
        let mut path = vec![target];
        let mut node = target;
        while node != i {
            node = prev[node];
            path.push(node);
        }
        path.reverse();
        path
    }
}

/// Solves `min Σ C_ij x_ij` subject to row sums `supply`, column sums
/// `demand`, `x ≥ 0`. Totals must agree to rounding.
pub fn transportation_simplex(supply: &[f64], demand: &[f64], cost: &Array2<f64>) -> Result<SimplexSolution> {
    let (n, m) = (supply.len(), demand.len());
    if n == 0 || m == 0 || cost.dim() != (n, m) {
        return Err(Error::Input(format!(
            "cost matrix {:?} does not match {n} supplies and {m} demands",
            cost.dim()
        )));
    }
    let (ts, td) = (supply.iter().sum::<f64>(), demand.iter().sum::<f64>());
    if (ts - td).abs() > 1e-9 * ts.max(td) {
        return Err(Error::Input(format!("unbalanced transport: {ts} vs {td}")));
    }

    let mut flow = Array2::zeros((n, m));
    let mut basis = Basis {
        n,
        m,
        adj: vec![Vec::new(); n + m],
        basic: vec![false; n * m],
    };

    // North-west corner start: a staircase of exactly n + m - 1 cells.
    let (mut s, mut d) = (supply.to_vec(), demand.to_vec());
    let (mut i, mut j) = (0, 0);
    loop {
        let x = if i == n - 1 && j == m - 1 {
            s[i].max(0.0)
        } else {
            s[i].min(d[j])
        };
        flow[[i, j]] = x;
        basis.insert(i, j);
        s[i] -= x;
        d[j] -= x;
        if i == n - 1 && j == m - 1 {
            break;
        }
        if j == m - 1 || (i < n - 1 && s[i] <= d[j]) {
            i += 1;
        } else {
            j += 1;
        }
    }

    let scale = cost.iter().fold(0.0f64, |a, &c| a.max(c.abs())).max(1e-300);
    let tol = 1e-12 * scale;
    let mut pivots = 0;
    loop {
        let (u, v) = basis.potentials(cost);
        let entering = (0..n * m).find(|&k| {
            let (r, c) = (k / m, k % m);
            !basis.basic[k] && cost[[r, c]] - u[r] - v[c] < -tol
        });
        let Some(k) = entering else {
            return Ok(SimplexSolution {
                flow,
                row_potential: u,
                col_potential: v,
                pivots,
            });
        };
        let (ei, ej) = (k / m, k % m);
        let path = basis.path(ei, ej);
        // Consecutive path nodes give the cycle's tree cells; the first cell
        // shares row `ei` with the entering cell and gives up flow.
        let cells: Vec<(usize, usize)> = path
            .windows(2)
            .map(|w| if w[0] < n { (w[0], w[1] - n) } else { (w[1], w[0] - n) })
            .collect();
        let mut theta = f64::INFINITY;
        let mut leaving = (usize::MAX, usize::MAX);
        for &(r, c) in cells.iter().step_by(2) {
            let f = flow[[r, c]];
            if f < theta || (f == theta && r * m + c < leaving.0 * m + leaving.1) {
                theta = f;
                leaving = (r, c);
            }
        }
        for (t, &(r, c)) in cells.iter().enumerate() {
            if t % 2 == 0 {
                flow[[r, c]] -= theta;
            } else {
                flow[[r, c]] += theta;
            }
        }
        flow[[ei, ej]] += theta;
        flow[[leaving.0, leaving.1]] = 0.0;
        basis.remove(leaving.0, leaving.1);
        basis.insert(ei, ej);
        pivots += 1;
        if pivots > 50 * n * m + 1000 {
            return Err(Error::Numerical("transportation simplex failed to terminate".into()));
        }
    }
}

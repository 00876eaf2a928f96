//! Dense networks with an exact Lipschitz bound of one.
//!
//! Each layer computes `z = W a + b`. The bound holds when the first layer's
//! weights satisfy `‖W‖_{p,∞} ≤ 1` (the largest row norm in the dual norm
//! `q`, `1/p + 1/q = 1`), every later layer satisfies `‖W‖_{∞,∞} ≤ 1` (the
//! largest absolute row sum), and the activation is 1-Lipschitz. GroupSort,
//! which sorts consecutive groups of pre-activations, is used between layers.
//!
//! The constraint is enforced inside every forward pass: the stored (raw)
//! weights are divided by `max(1, norm)` on the fly, so the bound holds for
//! any raw parameter values, including mid-optimization. Gradients flow
//! through that rescaling.
//!
//! Two evaluation routes exist. [`LipschitzMlp::forward_batch`] together
//! with [`LipschitzMlp::backward`] is the fast batched path used for
//! training. [`LipschitzMlp::forward_tape`] expresses the same function with
//! scalar primitives on an autodiff [`Tape`] and serves as the reference.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// Norm used to measure network inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputNorm {
    L1,
    L2,
    Inf,
}

impl InputNorm {
    pub fn distance(self, x: &[f64], y: &[f64]) -> f64 {
        let diffs = x.iter().zip(y).map(|(a, b)| (a - b).abs());
        match self {
            InputNorm::L1 => diffs.sum(),
            InputNorm::L2 => diffs.map(|d| d * d).sum::<f64>().sqrt(),
            InputNorm::Inf => diffs.fold(0.0, f64::max),
        }
    }

    /// Dual exponent: the row norm that bounds `‖W‖_{p,∞}`.
    fn dual(self) -> InputNorm {
        match self {
            InputNorm::L1 => InputNorm::Inf,
            InputNorm::L2 => InputNorm::L2,
            InputNorm::Inf => InputNorm::L1,
        }
    }
}

/// How an infeasible weight matrix is pulled back onto the constraint set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Projection {
    /// Divide the whole matrix by `max(1, ‖W‖)`.
    #[default]
    WholeMatrix,
    /// Divide each row by `max(1, row norm)`.
    PerRow,
}

/// Norms up to `1 + FEASIBLE_SLACK` count as feasible, so a projected matrix
/// whose recomputed norm rounds to just above one is left alone.
pub const FEASIBLE_SLACK: f64 = 1e-12;

fn is_feasible(n: f64) -> bool {
    n <= 1.0 + FEASIBLE_SLACK
}

fn row_norm(row: ArrayView1<f64>, norm: InputNorm) -> f64 {
    match norm {
        InputNorm::L1 => row.iter().map(|w| w.abs()).sum(),
        InputNorm::L2 => row.iter().map(|w| w * w).sum::<f64>().sqrt(),
        InputNorm::Inf => row.iter().fold(0.0, |m, w| m.max(w.abs())),
    }
}

/// Gradient of a row norm with the tape's tie rules (`abs'(0) = 1`, first
/// argmax wins).
fn row_norm_grad(row: ArrayView1<f64>, norm: InputNorm) -> Array1<f64> {
    let sign = |w: f64| if w >= 0.0 { 1.0 } else { -1.0 };
    match norm {
        InputNorm::L1 => row.mapv(sign),
        InputNorm::L2 => {
            let n = row_norm(row, InputNorm::L2);
            if n == 0.0 {
                Array1::zeros(row.len())
            } else {
                row.mapv(|w| w / n)
            }
        }
        InputNorm::Inf => {
            let mut best = 0;
            for (j, w) in row.iter().enumerate() {
                if w.abs() > row[best].abs() {
                    best = j;
                }
            }
            let mut g = Array1::zeros(row.len());
            g[best] = sign(row[best]);
            g
        }
    }
}

fn max_row(w: &Array2<f64>, norm: InputNorm) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, row) in w.rows().into_iter().enumerate() {
        let n = row_norm(row, norm);
        if n > best.1 {
            best = (i, n);
        }
    }
    best
}

/// `‖W‖_{∞,∞}`: the largest absolute row sum.
pub fn op_norm_inf_inf(w: &Array2<f64>) -> f64 {
    max_row(w, InputNorm::L1).1
}

/// `‖W‖_{p,∞}`: the largest row norm in the exponent dual to `p`.
pub fn op_norm_p_inf(w: &Array2<f64>, p: InputNorm) -> f64 {
    max_row(w, p.dual()).1
}

/// Sorts each consecutive group of `group_size` entries ascending.
pub fn group_sort(v: &[f64], group_size: usize) -> Result<Vec<f64>> {
    if group_size == 0 || v.len() % group_size != 0 {
        return Err(Error::Config(format!(
            "length {} is not divisible by group size {group_size}",
            v.len()
        )));
    }
    let mut out = v.to_vec();
    for chunk in out.chunks_mut(group_size) {
        chunk.sort_by(f64::total_cmp);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `out × in`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub is_first: bool,
    pub input_norm: InputNorm,
}

impl DenseLayer {
    pub fn new(weights: Array2<f64>, bias: Array1<f64>, is_first: bool, input_norm: InputNorm) -> Result<Self> {
        if weights.nrows() != bias.len() {
            return Err(Error::Config(format!(
                "weights have {} rows but bias has {} entries",
                weights.nrows(),
                bias.len()
            )));
        }
        if weights.is_empty() {
            return Err(Error::Config("empty weight matrix".into()));
        }
        Ok(Self {
            weights,
            bias,
            is_first,
            input_norm,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }

    /// Row norm the constraint applies to.
    fn constrained_row_norm(&self) -> InputNorm {
        if self.is_first {
            self.input_norm.dual()
        } else {
            InputNorm::L1
        }
    }

    /// The operator norm this layer is constrained in.
    pub fn constraint_norm(&self) -> f64 {
        if self.is_first {
            op_norm_p_inf(&self.weights, self.input_norm)
        } else {
            op_norm_inf_inf(&self.weights)
        }
    }

    /// Weights after projection onto the constraint set.
    pub fn effective_weights(&self, projection: Projection) -> Array2<f64> {
        let norm = self.constrained_row_norm();
        match projection {
            Projection::WholeMatrix => {
                let (_, n) = max_row(&self.weights, norm);
                if !is_feasible(n) {
                    &self.weights / n
                } else {
                    self.weights.clone()
                }
            }
            Projection::PerRow => {
                let mut w = self.weights.clone();
                for mut row in w.rows_mut() {
                    let n = row_norm(row.view(), norm);
                    if !is_feasible(n) {
                        row /= n;
                    }
                }
                w
            }
        }
    }

    /// Maps a gradient with respect to the effective weights back to the raw
    /// weights, through the `W / max(1, n(W))` rescaling.
    fn raw_weight_grad(&self, g_eff: &Array2<f64>, projection: Projection) -> Array2<f64> {
        let norm = self.constrained_row_norm();
        match projection {
            Projection::WholeMatrix => {
                let (row, n) = max_row(&self.weights, norm);
                if is_feasible(n) {
                    return g_eff.clone();
                }
                let inner = (g_eff * &self.weights).sum();
                let mut g = g_eff / n;
                let dn = row_norm_grad(self.weights.row(row), norm);
                g.row_mut(row).scaled_add(-inner / (n * n), &dn);
                g
            }
            Projection::PerRow => {
                let mut g = g_eff.clone();
                for (i, mut grow) in g.rows_mut().into_iter().enumerate() {
                    let wrow = self.weights.row(i);
                    let n = row_norm(wrow, norm);
                    if is_feasible(n) {
                        continue;
                    }
                    let inner = grow.dot(&wrow);
                    grow /= n;
                    grow.scaled_add(-inner / (n * n), &row_norm_grad(wrow, norm));
                }
                g
            }
        }
    }
}

/// Projects a layer's weights onto its constraint set; the bias is untouched.
///
/// A feasible matrix is returned unchanged, which makes the projection
/// idempotent.
pub fn constrain_weights(layer: &DenseLayer, projection: Projection) -> DenseLayer {
    DenseLayer {
        weights: layer.effective_weights(projection),
        ..layer.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub hidden: Vec<usize>,
    pub group_size: usize,
    pub input_norm: InputNorm,
    pub projection: Projection,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128],
            group_size: 16,
            input_norm: InputNorm::L2,
            projection: Projection::PerRow,
        }
    }
}

/// A scalar-valued network `f: R^d -> R` with `|f(x) - f(y)| ≤ ‖x - y‖_p`.
#[derive(Debug, Clone, PartialEq)]
pub struct LipschitzMlp {
    input_dim: usize,
    group_size: usize,
    input_norm: InputNorm,
    projection: Projection,
    layers: Vec<DenseLayer>,
    /// Subtracted from every input before the first layer.
    origin: Array1<f64>,
}

/// Intermediate values kept by [`LipschitzMlp::forward_cached`].
pub struct ForwardCache {
    /// Input of every layer (the network input first).
    inputs: Vec<Array2<f64>>,
    /// Per hidden layer, the source column of every sorted output entry.
    perms: Vec<Array2<u32>>,
    weights: Vec<Array2<f64>>,
}

/// Gradients produced by [`LipschitzMlp::backward`].
pub struct Backward {
    /// With respect to the raw parameters, in [`LipschitzMlp::params`] order.
    pub params: Vec<f64>,
    /// With respect to each input row.
    pub inputs: Array2<f64>,
}

const CHECKPOINT_FORMAT: &str = "neemo-lipnet/1";

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    widths: Vec<usize>,
    group_size: usize,
    input_norm: InputNorm,
    projection: Projection,
    layers: Vec<LayerRecord>,
    #[serde(default)]
    origin: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct LayerRecord {
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

impl LipschitzMlp {
    /// Random network: weights uniform in `±1/in`, zero biases, projected.
    pub fn new(input_dim: usize, config: &NetConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::with_init(input_dim, config, |fan_in| {
            let bound = 1.0 / fan_in as f64;
            rng.gen_range(-bound..=bound)
        })
    }

    /// All weights and biases zero; computes the zero function.
    pub fn zeros(input_dim: usize, config: &NetConfig) -> Result<Self> {
        Self::with_init(input_dim, config, |_| 0.0)
    }

    fn with_init(input_dim: usize, config: &NetConfig, mut init: impl FnMut(usize) -> f64) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::Config("input dimension must be positive".into()));
        }
        let mut widths = vec![input_dim];
        widths.extend(&config.hidden);
        widths.push(1);
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for (l, pair) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let weights = Array2::from_shape_simple_fn((fan_out, fan_in), || init(fan_in));
            let layer = DenseLayer::new(weights, Array1::zeros(fan_out), l == 0, config.input_norm)?;
            layers.push(constrain_weights(&layer, config.projection));
        }
        Self::from_layers(layers, config.group_size, config.input_norm, config.projection)
    }

    /// Re-draws the first layer as unit-norm ramps whose kinks pass through
    /// rows of `anchors` chosen at random, up to a bias offset of 1e-3 times
    /// the anchors' largest offset from the input origin (at least 1e-3). Directions are Gaussian draws
    /// scaled to unit dual norm. Deeper layers are untouched.
    pub fn anchor_first_layer(&mut self, anchors: ArrayView2<f64>, seed: u64) -> Result<()> {
        if anchors.nrows() == 0 || anchors.ncols() != self.input_dim {
            return Err(Error::Config(format!(
                "anchors must be a non-empty {}-column array",
                self.input_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dual = self.input_norm.dual();
        let origin = self.origin.clone();
        // Units sharing an anchor would tie exactly at it, leaving GroupSort's
        // branch choice to rounding; a small bias offset separates them.
        let spread = anchors
            .rows()
            .into_iter()
            .flat_map(|r| (&r - &origin).into_iter())
            .fold(0.0, |m: f64, v| m.max(v.abs()))
            .max(1.0);
        let offset = 1e-3 * spread;
        let first = &mut self.layers[0];
        for k in 0..first.weights.nrows() {
            let dir: Array1<f64> = loop {
                let g = Array1::from_shape_simple_fn(self.input_dim, || rng.sample::<f64, _>(StandardNormal));
                let n = row_norm(g.view(), dual);
                if n > 1e-12 {
                    break g / n;
                }
            };
            let anchor = &anchors.row(rng.gen_range(0..anchors.nrows())) - &origin;
            first.bias[k] = -dir.dot(&anchor) + offset * rng.gen_range(-1.0..1.0);
            first.weights.row_mut(k).assign(&dir);
        }
        Ok(())
    }

    /// Zeroes the output layer so the network starts as `f ≡ 0`.
    pub fn zero_output_layer(&mut self) {
        let last = self.layers.last_mut().expect("at least one layer");
        last.weights.fill(0.0);
        last.bias.fill(0.0);
    }

    pub fn from_layers(
        layers: Vec<DenseLayer>,
        group_size: usize,
        input_norm: InputNorm,
        projection: Projection,
    ) -> Result<Self> {
        let Some(first) = layers.first() else {
            return Err(Error::Config("network needs at least one layer".into()));
        };
        if group_size == 0 {
            return Err(Error::Config("group size must be positive".into()));
        }
        let input_dim = first.in_dim();
        for (l, layer) in layers.iter().enumerate() {
            if layer.is_first != (l == 0) {
                return Err(Error::Config(format!("layer {l} has the wrong first-layer flag")));
            }
            if layer.input_norm != input_norm {
                return Err(Error::Config(format!("layer {l} disagrees on the input norm")));
            }
            if let Some(next) = layers.get(l + 1) {
                if next.in_dim() != layer.out_dim() {
                    return Err(Error::Config(format!(
                        "layer {l} outputs {} values but layer {} expects {}",
                        layer.out_dim(),
                        l + 1,
                        next.in_dim()
                    )));
                }
                if layer.out_dim() % group_size != 0 {
                    return Err(Error::Config(format!(
                        "hidden width {} is not divisible by group size {group_size}",
                        layer.out_dim()
                    )));
                }
            } else if layer.out_dim() != 1 {
                return Err(Error::Config("the output layer must have one unit".into()));
            }
            if layer.weights.iter().chain(layer.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("layer {l} has non-finite parameters")));
            }
        }
        Ok(Self {
            input_dim,
            group_size,
            input_norm,
            projection,
            layers,
            origin: Array1::zeros(input_dim),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// The point mapped to the network's internal zero; `f(x)` is computed
    /// from `x - origin`.
    pub fn origin(&self) -> &[f64] {
        self.origin.as_slice().expect("contiguous")
    }

    pub fn set_origin(&mut self, origin: &[f64]) -> Result<()> {
        if origin.len() != self.input_dim || origin.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(format!(
                "origin must be {} finite coordinates",
                self.input_dim
            )));
        }
        self.origin = Array1::from(origin.to_vec());
        Ok(())
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn input_norm(&self) -> InputNorm {
        self.input_norm
    }

    pub fn projection(&self) -> Projection {
        self.projection
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    /// Layer widths from input to output.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(self.layers.iter().map(DenseLayer::out_dim));
        w
    }

    /// Copy with every layer projected; computes the same function.
    pub fn constrained(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| constrain_weights(l, self.projection))
                .collect(),
            ..self.clone()
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Raw parameters: per layer, weights row-major then bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.weights.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.num_params(), "parameter count");
        let mut rest = params;
        for l in &mut self.layers {
            let (w, tail) = rest.split_at(l.weights.len());
            for (dst, src) in l.weights.iter_mut().zip(w) {
                *dst = *src;
            }
            let (b, tail) = tail.split_at(l.bias.len());
            for (dst, src) in l.bias.iter_mut().zip(b) {
                *dst = *src;
            }
            rest = tail;
        }
    }

    /// `f(x)` for a single point.
    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.input_dim {
            return Err(Error::Config(format!(
                "expected a {}-dimensional input, got {}",
                self.input_dim,
                x.len()
            )));
        }
        let row = ArrayView2::from_shape((1, x.len()), x).expect("contiguous slice");
        Ok(self.forward_batch(row)[0])
    }

    /// `f` at every row of `x`.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Array1<f64> {
        assert_eq!(x.ncols(), self.input_dim, "input dimension");
        let mut a = &x - &self.origin;
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let w = layer.effective_weights(self.projection);
            let mut z = a.dot(&w.t());
            z += &layer.bias;
            if l < last {
                sort_groups(&mut z, self.group_size, None);
            }
            a = z;
        }
        a.column(0).to_owned()
    }

    /// Batched forward pass that keeps what [`LipschitzMlp::backward`] needs.
    pub fn forward_cached(&self, x: ArrayView2<f64>) -> (Array1<f64>, ForwardCache) {
        assert_eq!(x.ncols(), self.input_dim, "input dimension");
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut perms = Vec::with_capacity(last);
        let mut weights = Vec::with_capacity(self.layers.len());
        let mut a = &x - &self.origin;
        for (l, layer) in self.layers.iter().enumerate() {
            let w = layer.effective_weights(self.projection);
            let mut z = a.dot(&w.t());
            z += &layer.bias;
            if l < last {
                let mut perm = Array2::zeros(z.raw_dim());
                sort_groups(&mut z, self.group_size, Some(&mut perm));
                perms.push(perm);
            }
            inputs.push(a);
            weights.push(w);
            a = z;
        }
        let out = a.column(0).to_owned();
        (out, ForwardCache { inputs, perms, weights })
    }

    /// Smallest gap between neighbouring entries of any sorted group over
    /// all rows of `x`. Gradients are exact only where this is positive.
    pub fn sort_margin(&self, x: ArrayView2<f64>) -> f64 {
        let (_, cache) = self.forward_cached(x);
        let mut margin = f64::INFINITY;
        for a in &cache.inputs[1..] {
            for row in a.rows() {
                for group in row.as_slice().expect("contiguous").chunks(self.group_size) {
                    for w in group.windows(2) {
                        margin = margin.min(w[1] - w[0]);
                    }
                }
            }
        }
        margin
    }

    /// Gradients of `Σ_r adjoint[r] · f(x_r)` with respect to the raw
    /// parameters and to every input row.
    pub fn backward(&self, cache: &ForwardCache, adjoint: ArrayView1<f64>) -> Backward {
        let n = adjoint.len();
        let mut grads: Vec<(Array2<f64>, Array1<f64>)> = Vec::with_capacity(self.layers.len());
        let mut dz = adjoint.to_owned().into_shape_with_order((n, 1)).expect("column");
        for l in (0..self.layers.len()).rev() {
            let input = &cache.inputs[l];
            let g_eff = dz.t().dot(input);
            let g_bias = dz.sum_axis(Axis(0));
            let g_w = self.layers[l].raw_weight_grad(&g_eff, self.projection);
            grads.push((g_w, g_bias));
            let da = dz.dot(&cache.weights[l]);
            dz = if l > 0 {
                unsort_groups(&da, &cache.perms[l - 1], self.group_size)
            } else {
                da
            };
        }
        grads.reverse();
        let mut params = Vec::with_capacity(self.num_params());
        for (w, b) in &grads {
            params.extend(w.iter());
            params.extend(b.iter());
        }
        Backward { params, inputs: dz }
    }

    /// `∇_x f` at every row of `x`, with the function values.
    pub fn input_gradients(&self, x: ArrayView2<f64>) -> (Array1<f64>, Array2<f64>) {
        let (values, cache) = self.forward_cached(x);
        let ones = Array1::ones(x.nrows());
        let back = self.backward(&cache, ones.view());
        (values, back.inputs)
    }

    /// Records `f(x)` on a tape from scalar primitives. `params` must be in
    /// [`LipschitzMlp::params`] order; the stored parameters are ignored.
    pub fn forward_tape<'t>(&self, tape: &'t Tape, params: &[Var<'t>], x: &[Var<'t>]) -> Var<'t> {
        assert_eq!(params.len(), self.num_params(), "parameter count");
        assert_eq!(x.len(), self.input_dim, "input dimension");
        let one = tape.constant(1.0);
        let mut a: Vec<Var<'t>> = x.iter().zip(&self.origin).map(|(&v, &o)| v - o).collect();
        let mut offset = 0;
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let (rows, cols) = layer.weights.dim();
            let w = &params[offset..offset + rows * cols];
            let b = &params[offset + rows * cols..offset + rows * cols + rows];
            offset += rows * cols + rows;

            let norm = layer.constrained_row_norm();
            let row_norms: Vec<Var<'t>> = w.chunks(cols).map(|row| tape_row_norm(tape, row, norm)).collect();
            let scales: Vec<Var<'t>> = match self.projection {
                Projection::WholeMatrix => {
                    let n = row_norms[1..].iter().fold(row_norms[0], |m, &r| m.max(r));
                    vec![tape_scale(one, n); rows]
                }
                Projection::PerRow => row_norms.iter().map(|&n| tape_scale(one, n)).collect(),
            };

            let mut z: Vec<Var<'t>> = (0..rows)
                .map(|i| {
                    let mut terms: Vec<Var<'t>> = (0..cols).map(|j| w[i * cols + j] * a[j]).collect();
                    let dot = tape.sum(&terms) / scales[i];
                    terms.clear();
                    dot + b[i]
                })
                .collect();
            if l < last {
                for group in z.chunks_mut(self.group_size) {
                    tape_sort(group);
                }
            }
            a = z;
        }
        a[0]
    }

    /// Largest `|f(x) - f(y)| / ‖x - y‖_p` over `n_pairs` random pairs drawn
    /// from the box `[lo, hi]^d`. Half of the pairs are close neighbours.
    pub fn lipschitz_ratio_check(&self, n_pairs: usize, seed: u64, lo: f64, hi: f64) -> f64 {
        const BATCH: usize = 2048;
        let d = self.input_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        let mut done = 0;
        while done < n_pairs {
            let count = BATCH.min(n_pairs - done);
            let mut xs = Array2::zeros((count, d));
            let mut ys = Array2::zeros((count, d));
            for r in 0..count {
                let near = r % 2 == 1;
                let scale = if near { 10f64.powf(rng.gen_range(-4.0..-1.0)) } else { 0.0 };
                for c in 0..d {
                    let x = rng.gen_range(lo..=hi);
                    xs[[r, c]] = x;
                    ys[[r, c]] = if near {
                        (x + scale * rng.gen_range(-1.0..=1.0)).clamp(lo, hi)
                    } else {
                        rng.gen_range(lo..=hi)
                    };
                }
            }
            let fx = self.forward_batch(xs.view());
            let fy = self.forward_batch(ys.view());
            for r in 0..count {
                let dist = self.input_norm.distance(
                    xs.row(r).as_slice().expect("row-major"),
                    ys.row(r).as_slice().expect("row-major"),
                );
                if dist > 0.0 {
                    worst = worst.max((fx[r] - fy[r]).abs() / dist);
                }
            }
            done += count;
        }
        worst
    }

    /// Serializes the raw parameters and architecture as JSON.
    pub fn to_checkpoint(&self) -> String {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            widths: self.widths(),
            group_size: self.group_size,
            input_norm: self.input_norm,
            projection: self.projection,
            layers: self
                .layers
                .iter()
                .map(|l| LayerRecord {
                    weights: l.weights.rows().into_iter().map(|r| r.to_vec()).collect(),
                    bias: l.bias.to_vec(),
                })
                .collect(),
            origin: self.origin.to_vec(),
        };
        serde_json::to_string_pretty(&ck).expect("network serializes")
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let ck: Checkpoint =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("network checkpoint: {e}")))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!("unsupported checkpoint format `{}`", ck.format)));
        }
        let mut layers = Vec::with_capacity(ck.layers.len());
        for (l, rec) in ck.layers.into_iter().enumerate() {
            let cols = rec.weights.first().map_or(0, Vec::len);
            if rec.weights.iter().any(|r| r.len() != cols) {
                return Err(Error::Format(format!("layer {l}: ragged weight rows")));
            }
            let rows = rec.weights.len();
            let flat: Vec<f64> = rec.weights.into_iter().flatten().collect();
            let w = Array2::from_shape_vec((rows, cols), flat).expect("shape checked");
            layers.push(DenseLayer::new(w, Array1::from(rec.bias), l == 0, ck.input_norm)?);
        }
        let mut net = Self::from_layers(layers, ck.group_size, ck.input_norm, ck.projection)?;
        if net.widths() != ck.widths {
            return Err(Error::Format("checkpoint widths disagree with its layers".into()));
        }
        if !ck.origin.is_empty() {
            net.set_origin(&ck.origin)?;
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_checkpoint()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(&text)
    }
}

fn tape_scale<'t>(one: Var<'t>, n: Var<'t>) -> Var<'t> {
    if is_feasible(n.value()) {
        one
    } else {
        n
    }
}

fn tape_row_norm<'t>(tape: &'t Tape, row: &[Var<'t>], norm: InputNorm) -> Var<'t> {
    match norm {
        InputNorm::L1 => {
            let abs: Vec<_> = row.iter().map(|w| w.abs()).collect();
            tape.sum(&abs)
        }
        InputNorm::L2 => {
            let sq: Vec<_> = row.iter().map(|w| w.square()).collect();
            let s = tape.sum(&sq);
            // The derivative of sqrt is unbounded at zero; a zero row is
            // feasible, so its norm contributes no gradient.
            if s.value() > 0.0 {
                s.sqrt()
            } else {
                tape.constant(0.0)
            }
        }
        InputNorm::Inf => row[1..].iter().fold(row[0].abs(), |m, w| m.max(w.abs())),
    }
}

/// Bubble-sort network of min/max nodes.
fn tape_sort(group: &mut [Var<'_>]) {
    let n = group.len();
    for pass in 0..n {
        for i in 0..n - 1 - pass.min(n - 1) {
            let (a, b) = (group[i], group[i + 1]);
            group[i] = a.min(b);
            group[i + 1] = a.max(b);
        }
    }
}

fn sort_groups(z: &mut Array2<f64>, group_size: usize, mut perm: Option<&mut Array2<u32>>) {
    let width = z.ncols();
    let mut idx: Vec<u32> = Vec::with_capacity(group_size);
    let mut buf: Vec<f64> = Vec::with_capacity(group_size);
    for (r, mut row) in z.rows_mut().into_iter().enumerate() {
        for start in (0..width).step_by(group_size) {
            if group_size == 2 {
                let (a, b) = (row[start], row[start + 1]);
                let swap = b < a;
                if swap {
                    row[start] = b;
                    row[start + 1] = a;
                }
                if let Some(p) = perm.as_deref_mut() {
                    p[[r, start]] = (start + swap as usize) as u32;
                    p[[r, start + 1]] = (start + 1 - swap as usize) as u32;
                }
                continue;
            }
            idx.clear();
            idx.extend((start..start + group_size).map(|c| c as u32));
            idx.sort_by(|&i, &j| row[i as usize].total_cmp(&row[j as usize]));
            buf.clear();
            buf.extend(idx.iter().map(|&i| row[i as usize]));
            for (k, &v) in buf.iter().enumerate() {
                row[start + k] = v;
                if let Some(p) = perm.as_deref_mut() {
                    p[[r, start + k]] = idx[k];
                }
            }
        }
    }
}

fn unsort_groups(da: &Array2<f64>, perm: &Array2<u32>, _group_size: usize) -> Array2<f64> {
    let mut dz = Array2::zeros(da.raw_dim());
    for ((r, k), &g) in da.indexed_iter() {
        dz[[r, perm[[r, k]] as usize]] += g;
    }
    dz
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn hidden(w: Array2<f64>) -> DenseLayer {
        let b = Array1::zeros(w.nrows());
        DenseLayer::new(w, b, false, InputNorm::L2).unwrap()
    }

    fn first(w: Array2<f64>, p: InputNorm) -> DenseLayer {
        let b = Array1::zeros(w.nrows());
        DenseLayer::new(w, b, true, p).unwrap()
    }

    #[test]
    fn group_sort_examples() {
        assert_eq!(group_sort(&[3.0, 1.0, 4.0, 1.0], 2).unwrap(), [1.0, 3.0, 1.0, 4.0]);
        assert_eq!(group_sort(&[1.0, 2.0, 3.0, 4.0], 4).unwrap(), [1.0, 2.0, 3.0, 4.0]);
        assert_eq!(group_sort(&[5.0, -2.0, 0.0], 3).unwrap(), [-2.0, 0.0, 5.0]);
        assert!(matches!(group_sort(&[1.0, 2.0, 3.0], 2), Err(Error::Config(_))));
    }

    #[test]
    fn operator_norm_examples() {
        assert_eq!(op_norm_inf_inf(&array![[1.0, 2.0], [3.0, -4.0]]), 7.0);
        assert_eq!(op_norm_inf_inf(&Array2::eye(3)), 1.0);
        assert_eq!(op_norm_inf_inf(&Array2::zeros((2, 3))), 0.0);
        assert_eq!(op_norm_p_inf(&array![[3.0, 4.0]], InputNorm::L2), 5.0);
        assert_eq!(op_norm_p_inf(&Array2::eye(4), InputNorm::L2), 1.0);
        assert_eq!(op_norm_p_inf(&array![[1.0, 1.0], [2.0, 0.0]], InputNorm::L1), 2.0);
        assert_eq!(op_norm_p_inf(&array![[1.0, -3.0], [2.0, 0.5]], InputNorm::Inf), 4.0);
    }

    #[test]
    fn constrain_weights_examples() {
        let l = hidden(array![[1.0, -1.0], [0.5, 0.5]]);
        let c = constrain_weights(&l, Projection::WholeMatrix);
        assert_eq!(c.weights, array![[0.5, -0.5], [0.25, 0.25]]);

        let l = hidden(array![[0.25, -0.25], [0.1, 0.2]]);
        assert_eq!(constrain_weights(&l, Projection::WholeMatrix), l);

        let l = first(array![[3.0, 4.0]], InputNorm::L2);
        let c = constrain_weights(&l, Projection::WholeMatrix);
        assert!((c.weights[[0, 0]] - 0.6).abs() < 1e-15);
        assert!((c.weights[[0, 1]] - 0.8).abs() < 1e-15);
        assert_eq!(c.bias, l.bias);
    }

    #[test]
    fn per_row_projection_only_touches_infeasible_rows() {
        let l = hidden(array![[2.0, 2.0], [0.1, 0.2]]);
        let c = constrain_weights(&l, Projection::PerRow);
        assert_eq!(c.weights, array![[0.5, 0.5], [0.1, 0.2]]);
    }

    #[test]
    fn zero_network_is_zero() {
        let net = LipschitzMlp::zeros(2, &NetConfig::default()).unwrap();
        assert_eq!(net.forward(&[0.3, -7.0]).unwrap(), 0.0);
        assert_eq!(net.lipschitz_ratio_check(1000, 1, -1.0, 1.0), 0.0);
    }

    #[test]
    fn single_affine_layer() {
        let l = DenseLayer::new(array![[1.0, 0.0]], array![0.5], true, InputNorm::L2).unwrap();
        let net = LipschitzMlp::from_layers(vec![l], 2, InputNorm::L2, Projection::WholeMatrix).unwrap();
        assert_eq!(net.forward(&[2.0, 9.0]).unwrap(), 2.5);
        assert!(matches!(net.forward(&[1.0]), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_widths_not_divisible_by_group_size() {
        let cfg = NetConfig {
            hidden: vec![5],
            ..NetConfig::default()
        };
        assert!(matches!(LipschitzMlp::new(2, &cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn random_networks_respect_the_bound() {
        for seed in 0..5 {
            let mut net = LipschitzMlp::new(2, &NetConfig::default(), seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p: Vec<f64> = (0..net.num_params()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            net.set_params(&p);
            let ratio = net.lipschitz_ratio_check(20_000, seed, -1.0, 1.0);
            assert!(ratio <= 1.0 + 1e-6, "seed {seed}: {ratio}");
        }
    }

    #[test]
    fn ratio_approaches_one_along_the_first_row() {
        let l1 = first(array![[0.6, 0.8], [-0.6, -0.8]], InputNorm::L2);
        let l2 = hidden(array![[0.0, 1.0]]);
        let net = LipschitzMlp::from_layers(vec![l1, l2], 2, InputNorm::L2, Projection::WholeMatrix).unwrap();
        // f(x) = |0.6 x1 + 0.8 x2|
        assert!((net.forward(&[1.0, 1.0]).unwrap() - 1.4).abs() < 1e-12);
        let ratio = net.lipschitz_ratio_check(50_000, 3, -1.0, 1.0);
        assert!(ratio <= 1.0 + 1e-9 && ratio > 0.99, "{ratio}");
    }

    #[test]
    fn ratio_respects_l1_and_inf_inputs() {
        for p in [InputNorm::L1, InputNorm::Inf] {
            let cfg = NetConfig {
                hidden: vec![8, 8],
                group_size: 2,
                input_norm: p,
                ..NetConfig::default()
            };
            let mut net = LipschitzMlp::new(3, &cfg, 9).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let params: Vec<f64> = (0..net.num_params()).map(|_| rng.gen_range(-2.0..2.0)).collect();
            net.set_params(&params);
            assert!(net.lipschitz_ratio_check(20_000, 1, -1.0, 1.0) <= 1.0 + 1e-6);
        }
    }

    #[test]
    fn batched_and_tape_routes_agree() {
        for projection in [Projection::WholeMatrix, Projection::PerRow] {
            for (g, p) in [(2, InputNorm::L2), (4, InputNorm::L1), (2, InputNorm::Inf)] {
                let cfg = NetConfig {
                    hidden: vec![8, 8],
                    group_size: g,
                    input_norm: p,
                    projection,
                };
                let mut net = LipschitzMlp::new(2, &cfg, 1).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(2);
                let params: Vec<f64> = (0..net.num_params()).map(|_| rng.gen_range(-1.0..1.0)).collect();
                net.set_params(&params);

                let x = [0.37, -0.21];
                let tape = Tape::new();
                let pv = tape.leaves(&params);
                let xv = tape.leaves(&x);
                let y = net.forward_tape(&tape, &pv, &xv);
                let v = tape.eval(y).unwrap();
                let grads = tape.backward(y).unwrap();

                let xs = Array2::from_shape_vec((1, 2), x.to_vec()).unwrap();
                let (fv, cache) = net.forward_cached(xs.view());
                let back = net.backward(&cache, Array1::ones(1).view());
                assert!((fv[0] - v).abs() < 1e-12);
                for (a, b) in grads.wrt(&pv).iter().zip(&back.params) {
                    assert!((a - b).abs() < 1e-10, "{a} vs {b}");
                }
                for (a, b) in grads.wrt(&xv).iter().zip(back.inputs.iter()) {
                    assert!((a - b).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn output_gradient_matches_finite_differences() {
        let cfg = NetConfig {
            hidden: vec![8, 8, 8],
            group_size: 2,
            ..NetConfig::default()
        };
        let mut net = LipschitzMlp::new(2, &cfg, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params: Vec<f64> = (0..net.num_params()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        net.set_params(&params);
        let x = [0.11, 0.72];
        let mut point = params.clone();
        point.extend(x);
        let n = net.num_params();
        let err = finite_diff_check(|t, v| net.forward_tape(t, &v[..n], &v[n..]), &point, 1e-5);
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut net = LipschitzMlp::new(2, &NetConfig::default(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params: Vec<f64> = (0..net.num_params()).map(|_| rng.gen::<f64>() * 1e-3 - 0.3).collect();
        net.set_params(&params);
        let back = LipschitzMlp::from_checkpoint(&net.to_checkpoint()).unwrap();
        assert_eq!(back, net);
        let bits = |n: &LipschitzMlp| n.params().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&net));
    }

    proptest! {
        #[test]
        fn group_sort_is_one_lipschitz(
            pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 12),
            g in prop::sample::select(vec![1usize, 2, 3, 4, 6, 12]),
        ) {
            let u: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let v: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let su = group_sort(&u, g).unwrap();
            let sv = group_sort(&v, g).unwrap();
            for p in [InputNorm::L1, InputNorm::L2, InputNorm::Inf] {
                prop_assert!(p.distance(&su, &sv) <= p.distance(&u, &v) + 1e-12);
            }
            let mut a = su.clone();
            let mut b = u.clone();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            prop_assert_eq!(a, b);
        }

        #[test]
        fn projection_is_feasible_and_idempotent(
            vals in prop::collection::vec(-5.0f64..5.0, 12),
            is_first in any::<bool>(),
            p in prop::sample::select(vec![InputNorm::L1, InputNorm::L2, InputNorm::Inf]),
            per_row in any::<bool>(),
        ) {
            let projection = if per_row { Projection::PerRow } else { Projection::WholeMatrix };
            let w = Array2::from_shape_vec((3, 4), vals).unwrap();
            let layer = DenseLayer::new(w, Array1::zeros(3), is_first, p).unwrap();
            let once = constrain_weights(&layer, projection);
            prop_assert!(once.constraint_norm() <= 1.0 + 1e-9);
            let twice = constrain_weights(&once, projection);
            let bits = |l: &DenseLayer| l.weights.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&once), bits(&twice));
        }
    }
}

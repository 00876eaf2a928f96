//! Neural EMD estimation and minimax shape fitting.
//!
//! The dual objective for an event `Q = {(E_i, x_i)}` and a shape sample
//! `P = {(w_j, y_j)}`, both normalized to unit mass, is
//!
//! ```text
//! J(θ, φ) = Σ_i E_i f_φ(x_i) - Σ_j w_j f_φ(y_j)
//! ```
//!
//! Maximizing over a 1-Lipschitz `f_φ` estimates the EMD from below;
//! minimizing that maximum over `θ` gives the shape observable.

use std::collections::hash_map::{Entry, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{concatenate, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::distributions::WeightedIndex;
use rand::prelude::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::lipnet::{LipschitzMlp, NetConfig};
use crate::optim::Adam;
use crate::ot::DiscreteMeasure;
use crate::shapes::{ShapeSpec, WeightedSample};

/// Objective magnitude treated as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// Learning-rate schedule over a run of `n` steps.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    #[default]
    Constant,
    /// Half-cosine from the base rate down to `floor` times the base rate.
    Cosine { floor: f64 },
}

impl Schedule {
    pub fn factor(self, step: usize, total: usize) -> f64 {
        match self {
            Schedule::Constant => 1.0,
            Schedule::Cosine { floor } => {
                let t = if total <= 1 { 1.0 } else { step as f64 / (total - 1) as f64 };
                floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos())
            }
        }
    }
}

/// Settings for a standalone dual estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmdConfig {
    pub steps: usize,
    pub lr: f64,
    pub schedule: Schedule,
    /// Minibatch size per measure for stochastic ascent; `None` uses the
    /// exact expectations.
    pub batch_size: Option<usize>,
    /// Start fresh networks with first-layer kinks through support points.
    pub anchor_init: bool,
    pub seed: u64,
    pub net: NetConfig,
}

impl Default for EmdConfig {
    fn default() -> Self {
        Self {
            steps: 8000,
            lr: 1e-2,
            schedule: Schedule::Cosine { floor: 1e-3 },
            batch_size: None,
            anchor_init: true,
            seed: 0,
            net: NetConfig::default(),
        }
    }
}

/// Regular grid over a box, evaluated at cell centers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeatmapGrid {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
    /// Cells along x and y.
    pub resolution: [usize; 2],
}

impl Default for HeatmapGrid {
    fn default() -> Self {
        Self {
            lo: [0.0, 0.0],
            hi: [1.0, 1.0],
            resolution: [64, 64],
        }
    }
}

impl HeatmapGrid {
    /// Cell centers, row-major with x varying fastest.
    pub fn points(&self) -> Array2<f64> {
        let [nx, ny] = self.resolution;
        let (dx, dy) = ((self.hi[0] - self.lo[0]) / nx as f64, (self.hi[1] - self.lo[1]) / ny as f64);
        Array2::from_shape_fn((nx * ny, 2), |(k, c)| {
            let (row, col) = (k / nx, k % nx);
            if c == 0 {
                self.lo[0] + (col as f64 + 0.5) * dx
            } else {
                self.lo[1] + (row as f64 + 0.5) * dy
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub inner_steps_per_outer: usize,
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub outer_schedule: Schedule,
    pub outer_steps: usize,
    pub warmup_inner_steps: usize,
    pub terminal_inner_steps: usize,
    /// Resample shape positions every step and use minibatch means.
    pub stochastic: bool,
    pub batch_size: usize,
    pub seed: u64,
    /// Stop early once the largest θ update stays below this for ten
    /// consecutive outer steps. Zero disables the check.
    pub convergence_tol: f64,
    /// Start the network with first-layer kinks through event and initial
    /// sample points.
    pub anchor_init: bool,
    pub heatmap: HeatmapGrid,
    /// Outer steps at which to record the potential on the heatmap grid.
    pub snapshot_steps: Vec<usize>,
    pub net: NetConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            inner_steps_per_outer: 20,
            inner_lr: 1e-2,
            outer_lr: 1e-2,
            outer_schedule: Schedule::Cosine { floor: 0.01 },
            outer_steps: 600,
            warmup_inner_steps: 500,
            terminal_inner_steps: 500,
            stochastic: false,
            batch_size: 256,
            seed: 0,
            convergence_tol: 0.0,
            anchor_init: true,
            heatmap: HeatmapGrid::default(),
            snapshot_steps: Vec::new(),
            net: NetConfig::default(),
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("inner_steps_per_outer", self.inner_steps_per_outer),
            ("outer_steps", self.outer_steps),
            ("warmup_inner_steps", self.warmup_inner_steps),
            ("terminal_inner_steps", self.terminal_inner_steps),
            ("batch_size", self.batch_size),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        for (name, v) in [("inner_lr", self.inner_lr), ("outer_lr", self.outer_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.convergence_tol >= 0.0) {
            return Err(Error::Config("convergence_tol must be non-negative".into()));
        }
        if self.heatmap.resolution.contains(&0) {
            return Err(Error::Config("heatmap resolution must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Format(format!("fit config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("fit config serializes")
    }
}

/// One outer step: parameters, the dual estimate at those parameters, and
/// the norm of the outer gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterRecord {
    pub step: usize,
    pub theta: Vec<f64>,
    pub emd: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub step: usize,
    pub theta: Vec<f64>,
    pub grid: HeatmapGrid,
    /// Row-major values over `grid`.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitTrace {
    pub records: Vec<OuterRecord>,
    pub snapshots: Vec<Snapshot>,
    /// Best dual value over the terminal refit; `None` until the fit ends.
    pub observable: Option<f64>,
    pub final_theta: Vec<f64>,
}

impl FitTrace {
    /// One JSON object per outer step.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }
}

/// Result of [`fit`].
#[derive(Debug, Clone)]
pub struct Fit {
    pub trace: FitTrace,
    pub shape: ShapeSpec,
    pub net: LipschitzMlp,
    pub observable: f64,
}

/// Result of [`estimate_emd`].
#[derive(Debug, Clone)]
pub struct EmdEstimate {
    /// Largest objective seen; every iterate is a valid lower bound.
    pub value: f64,
    /// Objective before each ascent step.
    pub history: Vec<f64>,
    /// Potential attaining `value`.
    pub net: LipschitzMlp,
}

/// The dual objective over normalized measures.
pub fn kr_objective(net: &LipschitzMlp, event: &DiscreteMeasure, sample: &DiscreteMeasure) -> Result<f64> {
    let pair = Pair::new(event, sample)?;
    Ok(pair.adjoint.dot(&net.forward_batch(pair.points.view())))
}

/// The dual objective recorded from scalar primitives: network parameters,
/// event points, and sample points and weights are all tape inputs.
pub fn kr_objective_tape<'t>(
    net: &LipschitzMlp,
    tape: &'t Tape,
    params: &[Var<'t>],
    event: &DiscreteMeasure,
    event_points: &[Vec<Var<'t>>],
    sample_weights: &[Var<'t>],
    sample_points: &[Vec<Var<'t>>],
) -> Var<'t> {
    let event = event.normalized();
    let mut terms = Vec::with_capacity(event_points.len() + sample_points.len());
    for (e, x) in event.weights().iter().zip(event_points) {
        terms.push(net.forward_tape(tape, params, x) * *e);
    }
    for (w, y) in sample_weights.iter().zip(sample_points) {
        terms.push(-(*w * net.forward_tape(tape, params, y)));
    }
    tape.sum(&terms)
}

/// Stacked support points of both measures with the signed weights that
/// turn `f` values into the objective.
struct Pair {
    points: Array2<f64>,
    adjoint: Array1<f64>,
}

impl Pair {
    fn new(event: &DiscreteMeasure, sample: &DiscreteMeasure) -> Result<Self> {
        if event.dim() != sample.dim() {
            return Err(Error::Input(format!(
                "event is {}-dimensional but the sample is {}-dimensional",
                event.dim(),
                sample.dim()
            )));
        }
        let (p, q) = (event.normalized(), sample.normalized());
        // Bitwise-equal support points share one row so their terms cancel
        // exactly instead of up to matmul rounding.
        let key = |row: ArrayView1<f64>| row.iter().map(|v| v.to_bits()).collect::<Vec<u64>>();
        let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut rows: Vec<ArrayView1<f64>> = Vec::new();
        let mut adjoint: Vec<f64> = Vec::new();
        let (pw, qw) = (p.weights(), q.weights());
        let signed = pw.iter().copied().zip(p.points().rows());
        let signed = signed.chain(qw.iter().map(|&w| -w).zip(q.points().rows()));
        for (w, row) in signed {
            match index.entry(key(row)) {
                Entry::Occupied(e) => adjoint[*e.get()] += w,
                Entry::Vacant(e) => {
                    e.insert(rows.len());
                    rows.push(row);
                    adjoint.push(w);
                }
            }
        }
        let points = ndarray::stack(Axis(0), &rows).expect("same width");
        Ok(Self {
            points,
            adjoint: Array1::from(adjoint),
        })
    }
}

/// Inner ascent state: the network, its optimizer, and a flat parameter copy.
struct Critic {
    net: LipschitzMlp,
    params: Vec<f64>,
    opt: Adam,
}

impl Critic {
    fn new(net: LipschitzMlp, lr: f64) -> Self {
        let params = net.params();
        let opt = Adam::new(params.len(), lr);
        Self { net, params, opt }
    }

    /// Objective at the current parameters, then one ascent step.
    fn step(&mut self, points: ArrayView2<f64>, adjoint: &Array1<f64>, lr: f64) -> f64 {
        let (values, cache) = self.net.forward_cached(points);
        let objective = adjoint.dot(&values);
        let back = self.net.backward(&cache, adjoint.view());
        let ascent: Vec<f64> = back.params.iter().map(|g| -g).collect();
        self.opt.lr = lr;
        self.opt.step(&mut self.params, &ascent);
        self.net.set_params(&self.params);
        objective
    }
}

/// New network centred on the event's weighted mean, which makes training
/// invariant under translating all inputs together. The output layer starts
/// at zero so the initial potential is `f ≡ 0`.
fn fresh_net(
    event: &DiscreteMeasure,
    anchors: ArrayView2<f64>,
    config: &NetConfig,
    anchor: bool,
    seed: u64,
) -> Result<LipschitzMlp> {
    let mut net = LipschitzMlp::new(event.dim(), config, seed)?;
    let e = event.normalized();
    net.set_origin(&e.weights().dot(e.points()).to_vec())?;
    if anchor {
        net.anchor_first_layer(anchors, seed)?;
    }
    net.zero_output_layer();
    Ok(net)
}

fn check_finite(value: f64, step: usize) -> Result<()> {
    if !value.is_finite() {
        return Err(Error::Numerical(format!("objective became {value} at step {step}")));
    }
    Ok(())
}

/// Gradient ascent on the network to estimate the EMD between two measures.
///
/// `net` is the starting potential; pass `None` for a fresh network seeded
/// from the config.
pub fn estimate_emd(
    event: &DiscreteMeasure,
    sample: &DiscreteMeasure,
    net: Option<LipschitzMlp>,
    config: &EmdConfig,
) -> Result<EmdEstimate> {
    let pair = Pair::new(event, sample)?;
    let net = match net {
        Some(n) => n,
        None => fresh_net(event, pair.points.view(), &config.net, config.anchor_init, config.seed)?,
    };
    let mut critic = Critic::new(net, config.lr);
    let mut best = (f64::NEG_INFINITY, critic.net.clone());
    let mut history = Vec::with_capacity(config.steps + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let (p, q) = (event.normalized(), sample.normalized());
    for step in 0..=config.steps {
        let value = if step < config.steps {
            let before = critic.net.clone();
            let lr = config.lr * config.schedule.factor(step, config.steps);
            let v = match config.batch_size {
                None => critic.step(pair.points.view(), &pair.adjoint, lr),
                Some(b) => {
                    let (xe, ae) = draw(p.points().view(), &p.weights().to_vec(), b, 1.0, &mut rng);
                    let (xs, as_) = draw(q.points().view(), &q.weights().to_vec(), b, -1.0, &mut rng);
                    let pts = concatenate(Axis(0), &[xe.view(), xs.view()]).expect("same width");
                    let adj = concatenate(Axis(0), &[ae.view(), as_.view()]).expect("vectors");
                    critic.step(pts.view(), &adj, lr);
                    pair.adjoint.dot(&before.forward_batch(pair.points.view()))
                }
            };
            if v > best.0 {
                best = (v, before);
            }
            v
        } else {
            let v = pair.adjoint.dot(&critic.net.forward_batch(pair.points.view()));
            if v > best.0 {
                best = (v, critic.net.clone());
            }
            v
        };
        check_finite(value, step)?;
        history.push(value);
    }
    Ok(EmdEstimate {
        value: best.0,
        history,
        net: best.1,
    })
}

/// `f` on the cell centers of `grid`, row-major.
pub fn potential_heatmap(net: &LipschitzMlp, grid: &HeatmapGrid) -> Vec<f64> {
    net.forward_batch(grid.points().view()).to_vec()
}

/// `w_j ∇f(y_j)` for every sample point.
pub fn theta_forces(net: &LipschitzMlp, sample: &WeightedSample) -> Array2<f64> {
    let (_, mut grads) = net.input_gradients(sample.points.view());
    for (mut row, w) in grads.rows_mut().into_iter().zip(&sample.weights) {
        row *= *w;
    }
    grads
}

/// Plain-text heatmap: `bounds`, `resolution`, then one line per grid row.
pub fn heatmap_text(grid: &HeatmapGrid, values: &[f64]) -> String {
    let mut out = format!(
        "bounds {} {} {} {}\nresolution {} {}\n",
        grid.lo[0], grid.lo[1], grid.hi[0], grid.hi[1], grid.resolution[0], grid.resolution[1]
    );
    for row in values.chunks(grid.resolution[0]) {
        let line: Vec<String> = row.iter().map(f64::to_string).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
    out
}

/// Objective and its gradient with respect to θ at a fixed potential.
fn outer_gradient(
    net: &LipschitzMlp,
    spec: &ShapeSpec,
    event_term: f64,
    seed: Option<u64>,
) -> Result<(f64, Vec<f64>, WeightedSample)> {
    let tape = Tape::new();
    let theta = tape.leaves(&spec.theta);
    let sample = spec.sample_on_tape(&tape, &theta, seed)?;
    let values = sample.values();
    let (f, grad_f) = net.input_gradients(values.points.view());
    let mut terms = Vec::with_capacity(values.len());
    for (j, (w, y)) in sample.weights.iter().zip(&sample.points).enumerate() {
        let partials: Vec<f64> = grad_f.row(j).to_vec();
        let fj = tape.external(f[j], y, &partials);
        terms.push(*w * fj);
    }
    let objective = event_term - tape.sum(&terms);
    let value = tape.eval(objective)?;
    let grads = tape.backward(objective)?;
    Ok((value, grads.wrt(&theta), values))
}

/// Batch drawn from a measure in proportion to its weights, as points and
/// equal signed weights.
fn draw(measure_points: ArrayView2<f64>, weights: &[f64], batch: usize, sign: f64, rng: &mut ChaCha8Rng) -> (Array2<f64>, Array1<f64>) {
    let index = WeightedIndex::new(weights).expect("weights validated");
    let rows: Vec<usize> = (0..batch).map(|_| index.sample(rng)).collect();
    (measure_points.select(Axis(0), &rows), Array1::from_elem(batch, sign / batch as f64))
}

/// Points and signed weights for one inner step at the current θ.
fn inner_batch(event: &DiscreteMeasure, spec: &ShapeSpec, config: &FitConfig, rng: &mut ChaCha8Rng) -> Result<(Array2<f64>, Array1<f64>)> {
    if config.stochastic {
        let seed = rng.gen();
        let sample = spec.sample(Some(seed))?;
        let (xe, ae) = draw(event.points().view(), &event.weights().to_vec(), config.batch_size, 1.0, rng);
        let (xs, as_) = draw(sample.points.view(), &sample.weights, config.batch_size, -1.0, rng);
        Ok((
            concatenate(Axis(0), &[xe.view(), xs.view()]).expect("same width"),
            concatenate(Axis(0), &[ae.view(), as_.view()]).expect("vectors"),
        ))
    } else {
        let pair = Pair::new(event, &spec.sample(None)?.to_measure()?)?;
        Ok((pair.points, pair.adjoint))
    }
}

/// `steps` ascent steps at fixed θ; returns the last objective.
fn inner_loop(
    critic: &mut Critic,
    event: &DiscreteMeasure,
    spec: &ShapeSpec,
    config: &FitConfig,
    steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut last = 0.0;
    let mut fixed = None;
    for _ in 0..steps {
        if config.stochastic || fixed.is_none() {
            fixed = Some(inner_batch(event, spec, config, rng)?);
        }
        let (points, adjoint) = fixed.as_ref().expect("set above");
        last = critic.step(points.view(), adjoint, config.inner_lr);
    }
    Ok(last)
}

/// Alternates ascent on the potential with descent on the shape parameters.
pub fn fit(event: &DiscreteMeasure, shape: &ShapeSpec, config: &FitConfig) -> Result<Fit> {
    config.validate()?;
    shape.validate()?;
    if event.dim() != shape.dim() {
        return Err(Error::Input(format!(
            "event is {}-dimensional but the shape is {}-dimensional",
            event.dim(),
            shape.dim()
        )));
    }
    let event = event.normalized();
    let start = Pair::new(&event, &shape.sample(None)?.to_measure()?)?;
    let net = fresh_net(&event, start.points.view(), &config.net, config.anchor_init, config.seed)?;
    let mut critic = Critic::new(net, config.inner_lr);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut spec = shape.clone();
    let mut outer = Adam::new(spec.theta.len(), config.outer_lr);
    let mut trace = FitTrace::default();

    inner_loop(&mut critic, &event, &spec, config, config.warmup_inner_steps, &mut rng)?;
    let snapshot = |net: &LipschitzMlp, step: usize, theta: &[f64]| Snapshot {
        step,
        theta: theta.to_vec(),
        grid: config.heatmap.clone(),
        values: potential_heatmap(net, &config.heatmap),
    };
    if config.snapshot_steps.contains(&0) {
        trace.snapshots.push(snapshot(&critic.net, 0, &spec.theta));
    }

    let mut quiet = 0;
    for step in 0..config.outer_steps {
        inner_loop(&mut critic, &event, &spec, config, config.inner_steps_per_outer, &mut rng)?;
        let event_term = event.weights().dot(&critic.net.forward_batch(event.points().view()));
        let seed = config.stochastic.then(|| rng.gen());
        let (value, grad, _) = outer_gradient(&critic.net, &spec, event_term, seed)?;
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        trace.records.push(OuterRecord {
            step,
            theta: spec.theta.clone(),
            emd: value,
            grad_norm,
        });
        if !value.is_finite() || value.abs() > DIVERGENCE_LIMIT || !grad_norm.is_finite() {
            trace.final_theta = spec.theta.clone();
            return Err(Error::Diverged {
                step,
                value,
                trace: Box::new(trace),
            });
        }
        let before = spec.theta.clone();
        outer.lr = config.outer_lr * config.outer_schedule.factor(step, config.outer_steps);
        outer.step(&mut spec.theta, &grad);
        if config.snapshot_steps.contains(&(step + 1)) {
            trace.snapshots.push(snapshot(&critic.net, step + 1, &spec.theta));
        }
        let moved = before.iter().zip(&spec.theta).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
        quiet = if moved < config.convergence_tol { quiet + 1 } else { 0 };
        if quiet >= 10 {
            break;
        }
    }

    // Terminal refit on the exact sample at the final parameters.
    let final_measure = spec.sample(None)?.to_measure()?;
    let refit = estimate_emd(
        &event,
        &final_measure,
        Some(critic.net),
        &EmdConfig {
            steps: config.terminal_inner_steps,
            lr: config.inner_lr,
            schedule: Schedule::Constant,
            batch_size: None,
            anchor_init: false,
            seed: config.seed,
            net: config.net.clone(),
        },
    )?;
    trace.observable = Some(refit.value);
    trace.final_theta = spec.theta.clone();
    Ok(Fit {
        observable: refit.value,
        trace,
        shape: spec,
        net: refit.net,
    })
}

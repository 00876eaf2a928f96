//! Parameterized geometric objects and their differentiable samplers.
//!
//! A [`ShapeSpec`] pairs a [`ShapeKind`] with a flat parameter vector
//! `theta`. Sampling turns it into a [`WeightedSample`]: weighted points whose
//! coordinates (and, with learned weights, masses) are differentiable
//! functions of `theta`.
//!
//! Parameter layouts:
//!
//! | kind | theta |
//! |------|-------|
//! | point set, `k` centers in `d` dims | `k·d` center coordinates (+ `k` weight logits) |
//! | circle set, `k` circles | `(cx, cy, ln r)` per circle (+ `k` weight logits) |
//! | ellipse | `(cx, cy, ln a, ln b, rotation)` |
//! | triangle | `(x0, y0, x1, y1, x2, y2)` |
//! | composite | component parameters concatenated (+ one logit per component) |
//!
//! Radii and semi-axes are stored as logarithms so that unconstrained
//! gradient steps always describe a valid shape. Logits go through a softmax,
//! so weights are always on the simplex.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::ot::DiscreteMeasure;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ShapeKind {
    PointSet { centers: usize, dim: usize },
    CircleSet { circles: usize },
    Ellipse,
    Triangle,
    Composite { components: Vec<ShapeKind> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightMode {
    /// Every component carries the same mass.
    #[default]
    Uniform,
    /// Component masses are a softmax of trailing logits in `theta`.
    Learned,
}

impl ShapeKind {
    /// Number of independently weighted components.
    pub fn components(&self) -> usize {
        match self {
            ShapeKind::PointSet { centers, .. } => *centers,
            ShapeKind::CircleSet { circles } => *circles,
            ShapeKind::Ellipse | ShapeKind::Triangle => 1,
            ShapeKind::Composite { components } => components.len(),
        }
    }

    /// Geometric parameters, excluding weight logits.
    pub fn geometry_len(&self) -> usize {
        match self {
            ShapeKind::PointSet { centers, dim } => centers * dim,
            ShapeKind::CircleSet { circles } => 3 * circles,
            ShapeKind::Ellipse => 5,
            ShapeKind::Triangle => 6,
            ShapeKind::Composite { components } => components.iter().map(ShapeKind::geometry_len).sum(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ShapeKind::PointSet { dim, .. } => *dim,
            ShapeKind::Composite { components } => components.first().map_or(2, ShapeKind::dim),
            _ => 2,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            ShapeKind::PointSet { centers, dim } if *centers == 0 || *dim == 0 => {
                Err(Error::Config("point set needs at least one center and dimension".into()))
            }
            ShapeKind::CircleSet { circles: 0 } => Err(Error::Config("circle set needs at least one circle".into())),
            ShapeKind::Composite { components } => {
                if components.is_empty() {
                    return Err(Error::Config("composite shape needs components".into()));
                }
                let d = self.dim();
                for c in components {
                    c.validate()?;
                    if c.dim() != d {
                        return Err(Error::Config("composite components disagree on dimension".into()));
                    }
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Offsets into the geometric part of theta that hold coordinates of
    /// positions (centers or vertices), as `(offset, axis)` pairs.
    fn position_slots(&self, base: usize, out: &mut Vec<(usize, usize)>) {
        match self {
            ShapeKind::PointSet { centers, dim } => {
                for c in 0..*centers {
                    for a in 0..*dim {
                        out.push((base + c * dim + a, a));
                    }
                }
            }
            ShapeKind::CircleSet { circles } => {
                for c in 0..*circles {
                    out.push((base + 3 * c, 0));
                    out.push((base + 3 * c + 1, 1));
                }
            }
            ShapeKind::Ellipse => {
                out.push((base, 0));
                out.push((base + 1, 1));
            }
            ShapeKind::Triangle => {
                for v in 0..3 {
                    out.push((base + 2 * v, 0));
                    out.push((base + 2 * v + 1, 1));
                }
            }
            ShapeKind::Composite { components } => {
                let mut off = base;
                for c in components {
                    c.position_slots(off, out);
                    off += c.geometry_len();
                }
            }
        }
    }
}

/// A shape family member: kind, parameters, and sampling density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    #[serde(flatten)]
    pub kind: ShapeKind,
    /// Points per perimeter component; point sets always use one point per
    /// center.
    pub samples_per_component: usize,
    #[serde(default)]
    pub weight_mode: WeightMode,
    pub theta: Vec<f64>,
}

/// Weighted points produced by a sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSample {
    pub weights: Vec<f64>,
    /// One row per point.
    pub points: Array2<f64>,
}

impl WeightedSample {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn to_measure(&self) -> Result<DiscreteMeasure> {
        DiscreteMeasure::new(self.weights.clone(), self.points.clone())
    }
}

/// A sample recorded on a tape.
pub struct TapeSample<'t> {
    pub weights: Vec<Var<'t>>,
    pub points: Vec<Vec<Var<'t>>>,
}

impl TapeSample<'_> {
    pub fn values(&self) -> WeightedSample {
        let d = self.points.first().map_or(0, Vec::len);
        let flat: Vec<f64> = self.points.iter().flatten().map(|v| v.value()).collect();
        WeightedSample {
            weights: self.weights.iter().map(|w| w.value()).collect(),
            points: Array2::from_shape_vec((self.points.len(), d), flat).expect("rectangular"),
        }
    }
}

/// Geometric parameters of one component in natural units.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Component {
    Point { center: Vec<f64>, weight: f64 },
    Circle { center: [f64; 2], radius: f64, weight: f64 },
    Ellipse { center: [f64; 2], semi_axes: [f64; 2], rotation: f64, weight: f64 },
    Triangle { vertices: [[f64; 2]; 3], weight: f64 },
}

impl ShapeSpec {
    pub fn new(kind: ShapeKind, theta: Vec<f64>, samples_per_component: usize, weight_mode: WeightMode) -> Result<Self> {
        let spec = Self {
            kind,
            samples_per_component,
            weight_mode,
            theta,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Free points with equal (or learned) masses.
    pub fn point_set(centers: &[Vec<f64>], weight_mode: WeightMode) -> Result<Self> {
        let dim = centers.first().map_or(0, Vec::len);
        if centers.iter().any(|c| c.len() != dim) {
            return Err(Error::Config("centers have inconsistent dimensions".into()));
        }
        let mut theta: Vec<f64> = centers.iter().flatten().copied().collect();
        if weight_mode == WeightMode::Learned {
            theta.extend(std::iter::repeat(0.0).take(centers.len()));
        }
        Self::new(
            ShapeKind::PointSet {
                centers: centers.len(),
                dim,
            },
            theta,
            1,
            weight_mode,
        )
    }

    /// Circles given as `(cx, cy, r)`.
    pub fn circles(circles: &[(f64, f64, f64)], samples_per_component: usize) -> Result<Self> {
        if circles.iter().any(|c| !(c.2 > 0.0)) {
            return Err(Error::Config("radii must be positive".into()));
        }
        let theta = circles.iter().flat_map(|&(x, y, r)| [x, y, r.ln()]).collect();
        Self::new(
            ShapeKind::CircleSet {
                circles: circles.len(),
            },
            theta,
            samples_per_component,
            WeightMode::Uniform,
        )
    }

    pub fn ellipse(center: [f64; 2], semi_axes: [f64; 2], rotation: f64, samples_per_component: usize) -> Result<Self> {
        if !(semi_axes[0] > 0.0 && semi_axes[1] > 0.0) {
            return Err(Error::Config("semi-axes must be positive".into()));
        }
        let theta = vec![center[0], center[1], semi_axes[0].ln(), semi_axes[1].ln(), rotation];
        Self::new(ShapeKind::Ellipse, theta, samples_per_component, WeightMode::Uniform)
    }

    pub fn triangle(vertices: [[f64; 2]; 3], samples_per_component: usize) -> Result<Self> {
        let theta = vertices.iter().flatten().copied().collect();
        Self::new(ShapeKind::Triangle, theta, samples_per_component, WeightMode::Uniform)
    }

    /// Concatenates shapes. All parts must share the sampling density; their
    /// own weight modes are ignored (components are internally uniform).
    pub fn composite(parts: &[ShapeSpec], weight_mode: WeightMode) -> Result<Self> {
        let m = parts.first().map_or(1, |p| p.samples_per_component);
        let mut theta = Vec::new();
        for p in parts {
            theta.extend_from_slice(&p.theta[..p.kind.geometry_len()]);
        }
        if weight_mode == WeightMode::Learned {
            theta.extend(std::iter::repeat(0.0).take(parts.len()));
        }
        Self::new(
            ShapeKind::Composite {
                components: parts.iter().map(|p| p.kind.clone()).collect(),
            },
            theta,
            m,
            weight_mode,
        )
    }

    /// Expected length of `theta`.
    pub fn theta_len(&self) -> usize {
        self.kind.geometry_len() + self.logit_count()
    }

    fn logit_count(&self) -> usize {
        match (self.weight_mode, &self.kind) {
            (WeightMode::Learned, ShapeKind::Ellipse | ShapeKind::Triangle) => 0,
            (WeightMode::Learned, k) => k.components(),
            (WeightMode::Uniform, _) => 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.kind.dim()
    }

    pub fn validate(&self) -> Result<()> {
        self.kind.validate()?;
        if self.samples_per_component == 0 {
            return Err(Error::Config("samples per component must be positive".into()));
        }
        if self.theta.len() != self.theta_len() {
            return Err(Error::Config(format!(
                "theta has {} entries but this shape needs {}",
                self.theta.len(),
                self.theta_len()
            )));
        }
        if self.theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::Config("theta must be finite".into()));
        }
        Ok(())
    }

    /// Copy with new parameters.
    pub fn with_theta(&self, theta: Vec<f64>) -> Self {
        Self {
            theta,
            ..self.clone()
        }
    }

    /// Copy with every center and vertex shifted by `t`.
    pub fn translated(&self, t: &[f64]) -> Self {
        let mut slots = Vec::new();
        self.kind.position_slots(0, &mut slots);
        let mut theta = self.theta.clone();
        for (i, axis) in slots {
            theta[i] += t[axis];
        }
        self.with_theta(theta)
    }

    /// Points along the shape: a fixed grid when `seed` is `None`, uniformly
    /// random positions otherwise.
    pub fn sample(&self, seed: Option<u64>) -> Result<WeightedSample> {
        let tape = Tape::new();
        let theta = tape.leaves(&self.theta);
        Ok(self.sample_on_tape(&tape, &theta, seed)?.values())
    }

    /// Records the sampler on `tape` with `theta` as inputs.
    pub fn sample_on_tape<'t>(&self, tape: &'t Tape, theta: &[Var<'t>], seed: Option<u64>) -> Result<TapeSample<'t>> {
        self.validate()?;
        assert_eq!(theta.len(), self.theta_len(), "theta length");
        let mut rng = seed.map(ChaCha8Rng::seed_from_u64);
        let m = self.samples_per_component;
        let geometry = &theta[..self.kind.geometry_len()];
        let logits = &theta[self.kind.geometry_len()..];

        let mut parts: Vec<TapeSample<'t>> = Vec::new();
        sample_kind(&self.kind, tape, geometry, m, rng.as_mut(), &mut parts);

        let comp_weights: Vec<Var<'t>> = if logits.is_empty() {
            let w = 1.0 / parts.len() as f64;
            vec![tape.constant(w); parts.len()]
        } else {
            softmax(tape, logits)
        };
        let mut out = TapeSample {
            weights: Vec::new(),
            points: Vec::new(),
        };
        for (part, cw) in parts.into_iter().zip(comp_weights) {
            for (w, p) in part.weights.into_iter().zip(part.points) {
                out.weights.push(if logits.is_empty() { tape.constant(w.value() * cw.value()) } else { w * cw });
                out.points.push(p);
            }
        }
        Ok(out)
    }

    /// Per-component natural parameters.
    pub fn components(&self) -> Vec<Component> {
        let weights = self.component_weights();
        let mut out = Vec::new();
        describe(&self.kind, &self.theta, &mut out);
        if weights.len() == out.len() {
            for (c, w) in out.iter_mut().zip(weights) {
                match c {
                    Component::Point { weight, .. }
                    | Component::Circle { weight, .. }
                    | Component::Ellipse { weight, .. }
                    | Component::Triangle { weight, .. } => *weight = w,
                }
            }
        }
        out
    }

    fn component_weights(&self) -> Vec<f64> {
        let mut leaf_count = Vec::new();
        describe(&self.kind, &self.theta, &mut leaf_count);
        let top = match &self.kind {
            ShapeKind::Composite { components } => components.len(),
            k => k.components(),
        };
        let logits = &self.theta[self.kind.geometry_len()..];
        let top_weights: Vec<f64> = if logits.is_empty() {
            vec![1.0 / top as f64; top]
        } else {
            let mx = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|x| x / s).collect()
        };
        match &self.kind {
            ShapeKind::Composite { components } => components
                .iter()
                .zip(top_weights)
                .flat_map(|(c, w)| {
                    let n = c.components();
                    vec![w / n as f64; n]
                })
                .collect(),
            _ => top_weights,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("shape spec serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Format(format!("shape spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}

fn describe(kind: &ShapeKind, theta: &[f64], out: &mut Vec<Component>) {
    match kind {
        ShapeKind::PointSet { centers, dim } => {
            for c in 0..*centers {
                out.push(Component::Point {
                    center: theta[c * dim..(c + 1) * dim].to_vec(),
                    weight: 0.0,
                });
            }
        }
        ShapeKind::CircleSet { circles } => {
            for c in 0..*circles {
                let t = &theta[3 * c..3 * c + 3];
                out.push(Component::Circle {
                    center: [t[0], t[1]],
                    radius: t[2].exp(),
                    weight: 0.0,
                });
            }
        }
        ShapeKind::Ellipse => out.push(Component::Ellipse {
            center: [theta[0], theta[1]],
            semi_axes: [theta[2].exp(), theta[3].exp()],
            rotation: theta[4],
            weight: 0.0,
        }),
        ShapeKind::Triangle => out.push(Component::Triangle {
            vertices: [[theta[0], theta[1]], [theta[2], theta[3]], [theta[4], theta[5]]],
            weight: 0.0,
        }),
        ShapeKind::Composite { components } => {
            let mut off = 0;
            for c in components {
                describe(c, &theta[off..off + c.geometry_len()], out);
                off += c.geometry_len();
            }
        }
    }
}

fn softmax<'t>(tape: &'t Tape, logits: &[Var<'t>]) -> Vec<Var<'t>> {
    // Shift by the max as a constant; softmax is shift invariant.
    let mx = logits.iter().fold(f64::NEG_INFINITY, |a, l| a.max(l.value()));
    let e: Vec<Var<'t>> = logits.iter().map(|&l| (l - mx).exp()).collect();
    let s = tape.sum(&e);
    e.into_iter().map(|x| x / s).collect()
}

/// Positions along a closed curve as fractions of its length in `[0, 1)`.
fn fractions(m: usize, rng: Option<&mut ChaCha8Rng>) -> Vec<f64> {
    match rng {
        None => (0..m).map(|i| i as f64 / m as f64).collect(),
        Some(rng) => (0..m).map(|_| rng.gen::<f64>()).collect(),
    }
}

/// Appends one uniformly weighted part per top-level component of `kind`.
fn sample_kind<'t>(
    kind: &ShapeKind,
    tape: &'t Tape,
    theta: &[Var<'t>],
    m: usize,
    mut rng: Option<&mut ChaCha8Rng>,
    parts: &mut Vec<TapeSample<'t>>,
) {
    match kind {
        ShapeKind::PointSet { centers, dim } => {
            for c in 0..*centers {
                parts.push(TapeSample {
                    weights: vec![tape.constant(1.0)],
                    points: vec![theta[c * dim..(c + 1) * dim].to_vec()],
                });
            }
        }
        ShapeKind::CircleSet { circles } => {
            for c in 0..*circles {
                let fr = fractions(m, rng.as_deref_mut());
                parts.push(circle(tape, &theta[3 * c..3 * c + 3], &fr));
            }
        }
        ShapeKind::Ellipse => {
            let fr = fractions(m, rng);
            parts.push(ellipse(tape, theta, &fr));
        }
        ShapeKind::Triangle => {
            let fr = fractions(m, rng);
            parts.push(triangle(tape, theta, &fr));
        }
        ShapeKind::Composite { components } => {
            let mut off = 0;
            for c in components {
                let mut sub = Vec::new();
                sample_kind(c, tape, &theta[off..off + c.geometry_len()], m, rng.as_deref_mut(), &mut sub);
                off += c.geometry_len();
                parts.push(merge(tape, sub));
            }
        }
    }
}

/// Joins parts into one with equal mass per part.
fn merge<'t>(tape: &'t Tape, parts: Vec<TapeSample<'t>>) -> TapeSample<'t> {
    let share = 1.0 / parts.len() as f64;
    let mut out = TapeSample {
        weights: Vec::new(),
        points: Vec::new(),
    };
    for p in parts {
        for (w, x) in p.weights.into_iter().zip(p.points) {
            out.weights.push(tape.constant(w.value() * share));
            out.points.push(x);
        }
    }
    out
}

fn uniform_weights<'t>(tape: &'t Tape, n: usize) -> Vec<Var<'t>> {
    vec![tape.constant(1.0 / n as f64); n]
}

fn circle<'t>(tape: &'t Tape, theta: &[Var<'t>], fractions: &[f64]) -> TapeSample<'t> {
    let (cx, cy) = (theta[0], theta[1]);
    let r = theta[2].exp();
    let points = fractions
        .iter()
        .map(|&f| {
            let alpha = TAU * f;
            vec![cx + r * alpha.cos(), cy + r * alpha.sin()]
        })
        .collect();
    TapeSample {
        weights: uniform_weights(tape, fractions.len()),
        points,
    }
}

fn triangle<'t>(tape: &'t Tape, theta: &[Var<'t>], fractions: &[f64]) -> TapeSample<'t> {
    let v = [(theta[0], theta[1]), (theta[2], theta[3]), (theta[4], theta[5])];
    let edges: Vec<(Var<'t>, Var<'t>)> = (0..3).map(|k| (v[(k + 1) % 3].0 - v[k].0, v[(k + 1) % 3].1 - v[k].1)).collect();
    let lengths: Vec<Var<'t>> = edges.iter().map(|&(dx, dy)| (dx * dx + dy * dy).sqrt()).collect();
    let starts = [tape.constant(0.0), lengths[0], lengths[0] + lengths[1]];
    let perimeter = starts[2] + lengths[2];
    let points = fractions
        .iter()
        .map(|&f| {
            let s = perimeter * f;
            // A sample exactly on a vertex belongs to the edge that starts there.
            let k = (0..3).rev().find(|&k| starts[k].value() <= s.value()).unwrap_or(0);
            let t = (s - starts[k]) / lengths[k];
            vec![v[k].0 + t * edges[k].0, v[k].1 + t * edges[k].1]
        })
        .collect();
    TapeSample {
        weights: uniform_weights(tape, fractions.len()),
        points,
    }
}

/// Arc length of the axis-aligned ellipse `(a cos τ, b sin τ)` by composite
/// Gauss-Legendre quadrature.
pub mod arc {
    use std::f64::consts::TAU;

    pub const PANELS: usize = 64;

    /// 8-point Gauss-Legendre nodes and weights on `[-1, 1]`.
    pub const GAUSS_LEGENDRE: [(f64, f64); 8] = [
        (-0.960_289_856_497_536_3, 0.101_228_536_290_376_26),
        (-0.796_666_477_413_626_7, 0.222_381_034_453_374_47),
        (-0.525_532_409_916_329_0, 0.313_706_645_877_887_3),
        (-0.183_434_642_495_649_8, 0.362_683_783_378_362_0),
        (0.183_434_642_495_649_8, 0.362_683_783_378_362_0),
        (0.525_532_409_916_329_0, 0.313_706_645_877_887_3),
        (0.796_666_477_413_626_7, 0.222_381_034_453_374_47),
        (0.960_289_856_497_536_3, 0.101_228_536_290_376_26),
    ];

    pub fn speed(a: f64, b: f64, tau: f64) -> f64 {
        (a * a * tau.sin().powi(2) + b * b * tau.cos().powi(2)).sqrt()
    }

    pub fn panel_width() -> f64 {
        TAU / PANELS as f64
    }

    /// Quadrature nodes and weights for `∫_lo^hi`.
    pub fn nodes(lo: f64, hi: f64) -> impl Iterator<Item = (f64, f64)> {
        let (mid, half) = (0.5 * (lo + hi), 0.5 * (hi - lo));
        GAUSS_LEGENDRE.iter().map(move |&(x, w)| (mid + half * x, half * w))
    }

    pub fn integral(a: f64, b: f64, lo: f64, hi: f64) -> f64 {
        nodes(lo, hi).map(|(t, w)| w * speed(a, b, t)).sum()
    }

    /// Cumulative length at each panel boundary (`PANELS + 1` entries).
    pub fn table(a: f64, b: f64) -> Vec<f64> {
        let h = panel_width();
        let mut acc = vec![0.0];
        for k in 0..PANELS {
            let last = acc[k];
            acc.push(last + integral(a, b, k as f64 * h, (k + 1) as f64 * h));
        }
        acc
    }

    /// Length from parameter 0 to `t ∈ [0, 2π]`.
    pub fn length_to(a: f64, b: f64, table: &[f64], t: f64) -> f64 {
        let h = panel_width();
        let k = ((t / h).floor() as usize).min(PANELS - 1);
        table[k] + integral(a, b, k as f64 * h, t)
    }

    /// Parameter at which the length from 0 equals `s`.
    pub fn invert(a: f64, b: f64, table: &[f64], s: f64) -> f64 {
        let h = panel_width();
        let k = table.partition_point(|&c| c <= s).saturating_sub(1).min(PANELS - 1);
        let (mut lo, mut hi) = (k as f64 * h, (k + 1) as f64 * h);
        let mut t = lo + (s - table[k]) / (table[k + 1] - table[k]) * h;
        for _ in 0..60 {
            let r = length_to(a, b, table, t) - s;
            if r.abs() <= 1e-15 * table[PANELS] {
                break;
            }
            if r > 0.0 {
                hi = t;
            } else {
                lo = t;
            }
            let next = t - r / speed(a, b, t);
            t = if next > lo && next < hi { next } else { 0.5 * (lo + hi) };
        }
        t
    }
}

fn ellipse<'t>(tape: &'t Tape, theta: &[Var<'t>], fractions: &[f64]) -> TapeSample<'t> {
    let (cx, cy) = (theta[0], theta[1]);
    let a = theta[2].exp();
    let b = theta[3].exp();
    let rot = theta[4];
    let (a2, b2) = (a * a, b * b);
    let speed = |tau: f64| (a2 * tau.sin().powi(2) + b2 * tau.cos().powi(2)).sqrt();
    let integral = |lo: f64, hi: f64| {
        let terms: Vec<Var<'t>> = arc::nodes(lo, hi).map(|(t, w)| speed(t) * w).collect();
        tape.sum(&terms)
    };

    let h = arc::panel_width();
    let panels: Vec<Var<'t>> = (0..arc::PANELS).map(|k| integral(k as f64 * h, (k + 1) as f64 * h)).collect();
    let mut prefix = vec![tape.constant(0.0)];
    for p in &panels {
        let last = *prefix.last().expect("non-empty");
        prefix.push(last + *p);
    }
    let perimeter = prefix[arc::PANELS];
    let table: Vec<f64> = prefix.iter().map(|v| v.value()).collect();
    let (av, bv) = (a.value(), b.value());

    let (cr, sr) = (rot.cos(), rot.sin());
    let points = fractions
        .iter()
        .map(|&f| {
            let target = perimeter * f;
            let t_star = arc::invert(av, bv, &table, target.value());
            // One Newton step on the tape: its value is t* and its gradient is
            // the implicit-function derivative of the arc-length equation.
            let k = ((t_star / h).floor() as usize).min(arc::PANELS - 1);
            let reached = prefix[k] + integral(k as f64 * h, t_star);
            let t = (target - reached) / speed(t_star) + t_star;
            let (lx, ly) = (a * t.cos(), b * t.sin());
            vec![cx + cr * lx - sr * ly, cy + sr * lx + cr * ly]
        })
        .collect();
    TapeSample {
        weights: uniform_weights(tape, fractions.len()),
        points,
    }
}

/// Largest relative disagreement between autodiff and central finite
/// differences over every sampled coordinate and weight, with respect to
/// every entry of theta. The relative error uses a `1e-6` floor on the
/// finite-difference magnitude.
pub fn sample_jacobian_check(spec: &ShapeSpec, seed: Option<u64>, step: f64) -> Result<f64> {
    let flatten = |s: &WeightedSample| {
        let mut v: Vec<f64> = s.points.iter().copied().collect();
        v.extend(&s.weights);
        v
    };
    let tape = Tape::new();
    let theta = tape.leaves(&spec.theta);
    let sample = spec.sample_on_tape(&tape, &theta, seed)?;
    let outputs: Vec<Var<'_>> = sample
        .points
        .iter()
        .flatten()
        .copied()
        .chain(sample.weights.iter().copied())
        .collect();
    let Some(&last) = outputs.last() else {
        return Ok(0.0);
    };
    tape.eval(last)?;

    let mut worst: f64 = 0.0;
    let mut probe = spec.theta.clone();
    for k in 0..spec.theta.len() {
        let x0 = probe[k];
        probe[k] = x0 + step;
        let up = flatten(&spec.with_theta(probe.clone()).sample(seed)?);
        probe[k] = x0 - step;
        let down = flatten(&spec.with_theta(probe.clone()).sample(seed)?);
        probe[k] = x0;
        for (o, out) in outputs.iter().enumerate() {
            let grads = tape.backward(*out)?;
            let ad = grads.get(theta[k]);
            let fd = (up[o] - down[o]) / (2.0 * step);
            worst = worst.max((ad - fd).abs() / (fd.abs().max(1e-6)));
        }
    }
    Ok(worst)
}

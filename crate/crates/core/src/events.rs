//! Events as weighted particle clouds: file formats and synthetic generators.
//!
//! Two on-disk formats are supported:
//!
//! * CSV with a header row `E,x1,...,xd`, one particle per line.
//! * JSON lines, one object `{"E": energy, "x": [coordinates]}` per line.
//!
//! Values are written with the shortest decimal that parses back to the same
//! `f64`, so `load(save(e)) == e` bitwise.

use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ot::DiscreteMeasure;
use crate::shapes::{ShapeSpec, WeightMode};

#[derive(Debug, Clone, PartialEq)]
pub struct Particle {
    pub energy: f64,
    pub position: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    particles: Vec<Particle>,
    dim: usize,
    pub label: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventFormat {
    #[default]
    Csv,
    Jsonl,
}

impl EventFormat {
    /// Picks the format from a file extension (`.jsonl`/`.json` or CSV otherwise).
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl" | "json" | "ndjson") => EventFormat::Jsonl,
            _ => EventFormat::Csv,
        }
    }
}

impl FromStr for EventFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(EventFormat::Csv),
            "jsonl" => Ok(EventFormat::Jsonl),
            other => Err(Error::Config(format!("unknown event format '{other}' (expected csv or jsonl)"))),
        }
    }
}

impl Event {
    pub fn new(particles: Vec<Particle>) -> Result<Self> {
        let Some(first) = particles.first() else {
            return Err(Error::Input("event has no particles".into()));
        };
        let dim = first.position.len();
        if dim == 0 {
            return Err(Error::Input("particles need at least one coordinate".into()));
        }
        for (i, p) in particles.iter().enumerate() {
            if p.position.len() != dim {
                return Err(Error::Input(format!(
                    "particle {i} has {} coordinates, expected {dim}",
                    p.position.len()
                )));
            }
            if !(p.energy.is_finite() && p.energy > 0.0) {
                return Err(Error::Input(format!("particle {i} has non-positive energy {}", p.energy)));
            }
            if p.position.iter().any(|x| !x.is_finite()) {
                return Err(Error::Input(format!("particle {i} has a non-finite coordinate")));
            }
        }
        Ok(Self {
            particles,
            dim,
            label: None,
        })
    }

    /// Particles with unit energy at the given positions.
    pub fn uniform(positions: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(positions.into_iter().map(|position| Particle { energy: 1.0, position }).collect())
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    pub fn particles(&self) -> &[Particle] {
        &self.particles
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn total_energy(&self) -> f64 {
        self.particles.iter().map(|p| p.energy).sum()
    }

    pub fn positions(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.len(), self.dim), |(i, j)| self.particles[i].position[j])
    }

    /// Energy fractions as a probability measure.
    pub fn normalize(&self) -> Result<DiscreteMeasure> {
        let total = self.total_energy();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::Input("event has zero total energy".into()));
        }
        let weights = self.particles.iter().map(|p| p.energy / total).collect();
        DiscreteMeasure::new(weights, self.positions())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("E");
        for j in 1..=self.dim {
            let _ = write!(out, ",x{j}");
        }
        out.push('\n');
        for p in &self.particles {
            let _ = write!(out, "{}", p.energy);
            for x in &p.position {
                let _ = write!(out, ",{x}");
            }
            out.push('\n');
        }
        out
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for p in &self.particles {
            let line = serde_json::to_string(&JsonParticle {
                energy: p.energy,
                x: p.position.clone(),
            })
            .expect("finite values serialize");
            out.push_str(&line);
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str, origin: &Path) -> Result<Self> {
        let parse_err = |line: u64, message: String| Error::Parse {
            path: origin.display().to_string(),
            line: line as usize,
            message,
        };
        let mut reader = csv::ReaderBuilder::new()
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let headers = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
        if headers.get(0) != Some("E") {
            return Err(parse_err(1, "first column must be 'E'".into()));
        }
        let dim = headers.len() - 1;
        for (j, h) in headers.iter().skip(1).enumerate() {
            if h != format!("x{}", j + 1) {
                return Err(parse_err(1, format!("expected column 'x{}', found '{h}'", j + 1)));
            }
        }
        if dim == 0 {
            return Err(parse_err(1, "missing coordinate columns x1..xd".into()));
        }
        let mut particles = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line());
                parse_err(line, e.to_string())
            })?;
            let line = record.position().map_or(0, |p| p.line());
            if record.len() != dim + 1 {
                return Err(parse_err(line, format!("expected {} fields, found {}", dim + 1, record.len())));
            }
            let mut values = Vec::with_capacity(dim + 1);
            for (field, name) in record.iter().zip(headers.iter()) {
                let v: f64 = field
                    .parse()
                    .map_err(|_| parse_err(line, format!("column {name}: '{field}' is not a number")))?;
                values.push(v);
            }
            particles.push(checked_particle(values[0], values[1..].to_vec()).map_err(|m| parse_err(line, m))?);
        }
        if particles.is_empty() {
            return Err(parse_err(1, "no particles".into()));
        }
        Self::new(particles)
    }

    pub fn from_jsonl(text: &str, origin: &Path) -> Result<Self> {
        let mut particles = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: origin.display().to_string(),
                line,
                message,
            };
            let p: JsonParticle = serde_json::from_str(raw).map_err(|e| err(e.to_string()))?;
            if let Some(first) = particles.first().map(|q: &Particle| q.position.len()) {
                if p.x.len() != first {
                    return Err(err(format!("expected {first} coordinates, found {}", p.x.len())));
                }
            }
            particles.push(checked_particle(p.energy, p.x).map_err(err)?);
        }
        if particles.is_empty() {
            return Err(Error::Parse {
                path: origin.display().to_string(),
                line: 1,
                message: "no particles".into(),
            });
        }
        Self::new(particles)
    }

    pub fn save(&self, path: &Path, format: EventFormat) -> Result<()> {
        let text = match format {
            EventFormat::Csv => self.to_csv(),
            EventFormat::Jsonl => self.to_jsonl(),
        };
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, format: EventFormat) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let event = match format {
            EventFormat::Csv => Self::from_csv(&text, path)?,
            EventFormat::Jsonl => Self::from_jsonl(&text, path)?,
        };
        let label = path.file_stem().map(|s| s.to_string_lossy().into_owned());
        Ok(Self { label, ..event })
    }
}

fn checked_particle(energy: f64, position: Vec<f64>) -> std::result::Result<Particle, String> {
    if !(energy.is_finite() && energy > 0.0) {
        return Err(format!("energy must be positive, found {energy}"));
    }
    if position.is_empty() {
        return Err("missing coordinates".into());
    }
    if position.iter().any(|x| !x.is_finite()) {
        return Err("coordinates must be finite".into());
    }
    Ok(Particle { energy, position })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonParticle {
    #[serde(rename = "E")]
    energy: f64,
    x: Vec<f64>,
}

/// Particles at uniformly random angles on each circle `(cx, cy, r)`, with
/// optional Gaussian jitter of the radius.
pub fn gen_circle_event(circles: &[(f64, f64, f64)], points_per_circle: usize, jitter: f64, seed: u64) -> Result<Event> {
    if circles.iter().any(|c| !(c.2 > 0.0)) {
        return Err(Error::Config("radii must be positive".into()));
    }
    if points_per_circle == 0 || circles.is_empty() {
        return Err(Error::Config("need at least one circle and one point per circle".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, jitter.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut positions = Vec::with_capacity(circles.len() * points_per_circle);
    for &(cx, cy, r) in circles {
        for _ in 0..points_per_circle {
            let alpha = TAU * rng.gen::<f64>();
            let radius = if jitter > 0.0 { r + noise.sample(&mut rng) } else { r };
            positions.push(vec![cx + radius * alpha.cos(), cy + radius * alpha.sin()]);
        }
    }
    Ok(Event::uniform(positions)?.with_label(format!("circles-{}", circles.len())))
}

/// Particles at random arc-length positions along a shape; energies follow
/// the sampler's weights.
pub fn gen_shape_event(spec: &ShapeSpec, seed: u64) -> Result<Event> {
    let sample = spec.sample(Some(seed))?;
    let n = sample.len() as f64;
    let particles = sample
        .weights
        .iter()
        .zip(sample.points.rows())
        .map(|(&w, row)| Particle {
            energy: w * n,
            position: row.to_vec(),
        })
        .collect();
    Event::new(particles)
}

/// Triangle and ellipse geometry for [`gen_triangle_ellipse_event`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriangleEllipse {
    pub vertices: [[f64; 2]; 3],
    pub center: [f64; 2],
    pub semi_axes: [f64; 2],
    pub rotation: f64,
}

impl Default for TriangleEllipse {
    fn default() -> Self {
        Self {
            vertices: [[0.15, 0.2], [0.55, 0.15], [0.3, 0.55]],
            center: [0.65, 0.65],
            semi_axes: [0.22, 0.1],
            rotation: 0.6,
        }
    }
}

impl TriangleEllipse {
    pub fn spec(&self, points_per_shape: usize) -> Result<ShapeSpec> {
        ShapeSpec::composite(
            &[
                ShapeSpec::triangle(self.vertices, points_per_shape)?,
                ShapeSpec::ellipse(self.center, self.semi_axes, self.rotation, points_per_shape)?,
            ],
            WeightMode::Uniform,
        )
    }
}

pub fn gen_triangle_ellipse_event(params: &TriangleEllipse, points_per_shape: usize, seed: u64) -> Result<Event> {
    Ok(gen_shape_event(&params.spec(points_per_shape)?, seed)?.with_label("triangle-ellipse"))
}

/// Settings for [`gen_subjet_event`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SubjetParams {
    pub centers: usize,
    /// Square box `[lo, hi]²` holding the event.
    pub lo: f64,
    pub hi: f64,
    pub sigma: f64,
    pub particles_per_center: usize,
}

impl Default for SubjetParams {
    fn default() -> Self {
        Self {
            centers: 3,
            lo: 0.0,
            hi: 1.0,
            sigma: 0.05,
            particles_per_center: 10,
        }
    }
}

/// Gaussian particle clusters around centers drawn uniformly from the box
/// shrunk by `3σ` on every side. Returns the event and the true centers.
pub fn gen_subjet_event(params: &SubjetParams, seed: u64) -> Result<(Event, Vec<[f64; 2]>)> {
    let SubjetParams {
        centers,
        lo,
        hi,
        sigma,
        particles_per_center,
    } = *params;
    if centers == 0 || particles_per_center == 0 {
        return Err(Error::Config("need at least one center and one particle per center".into()));
    }
    if !(sigma > 0.0) {
        return Err(Error::Config("sigma must be positive".into()));
    }
    let (a, b) = (lo + 3.0 * sigma, hi - 3.0 * sigma);
    if !(a < b) {
        return Err(Error::Config(format!("box [{lo}, {hi}] is too small for sigma {sigma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
    let truth: Vec<[f64; 2]> = (0..centers).map(|_| [rng.gen_range(a..b), rng.gen_range(a..b)]).collect();
    let mut positions = Vec::with_capacity(centers * particles_per_center);
    for c in &truth {
        for _ in 0..particles_per_center {
            positions.push(vec![c[0] + normal.sample(&mut rng), c[1] + normal.sample(&mut rng)]);
        }
    }
    Ok((Event::uniform(positions)?.with_label(format!("subjets-{centers}")), truth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn here() -> &'static Path {
        Path::new("inline")
    }

    #[test]
    fn normalization_uses_energy_fractions() {
        let one = Event::new(vec![Particle {
            energy: 5.0,
            position: vec![0.0, 0.0],
        }])
        .unwrap();
        assert_eq!(one.normalize().unwrap().weights().to_vec(), vec![1.0]);
        let two = Event::new(vec![
            Particle {
                energy: 1.0,
                position: vec![0.0, 0.0],
            },
            Particle {
                energy: 3.0,
                position: vec![1.0, 0.0],
            },
        ])
        .unwrap();
        assert_eq!(two.normalize().unwrap().weights().to_vec(), vec![0.25, 0.75]);
    }

    #[test]
    fn parses_minimal_csv() {
        let e = Event::from_csv("E,x1,x2\n1.0,0.0,0.0", here()).unwrap();
        assert_eq!(e.len(), 1);
        assert_eq!(e.dim(), 2);
        assert_eq!(e.particles()[0].position, vec![0.0, 0.0]);
    }

    #[test]
    fn malformed_rows_report_their_line() {
        for text in ["E,x1\na,b", "E,x1,x2\na,b", "E,x1\n1,2\n-1,0", "E,x1\n1,2\n0,3"] {
            let err = Event::from_csv(text, here()).unwrap_err();
            let want = if text.starts_with("E,x1\n1") { 3 } else { 2 };
            assert!(matches!(err, Error::Parse { line, .. } if line == want), "{text:?}: {err}");
        }
        let err = Event::from_jsonl("{\"E\":1,\"x\":[0]}\n{\"E\":1}\n", here()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = Event::from_jsonl("{\"E\":1,\"x\":[0]}\n{\"E\":0,\"x\":[1]}\n", here()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        assert!(Event::from_csv("x,E\n1,1", here()).is_err());
    }

    #[test]
    fn unit_circle_without_jitter_is_exact() {
        let e = gen_circle_event(&[(0.3, -0.2, 1.0)], 100, 0.0, 4).unwrap();
        for p in e.particles() {
            let r = ((p.position[0] - 0.3).powi(2) + (p.position[1] + 0.2).powi(2)).sqrt();
            assert!((r - 1.0).abs() <= 1e-12);
        }
        assert_eq!(e, gen_circle_event(&[(0.3, -0.2, 1.0)], 100, 0.0, 4).unwrap());
        assert_ne!(e, gen_circle_event(&[(0.3, -0.2, 1.0)], 100, 0.0, 5).unwrap());
    }

    #[test]
    fn round_ellipse_gives_a_circle_event() {
        let params = TriangleEllipse {
            semi_axes: [0.2, 0.2],
            ..Default::default()
        };
        let e = gen_triangle_ellipse_event(&params, 50, 1).unwrap();
        assert_eq!(e.len(), 100);
        for p in &e.particles()[50..] {
            let r = ((p.position[0] - 0.65).powi(2) + (p.position[1] - 0.65).powi(2)).sqrt();
            assert!((r - 0.2).abs() < 1e-12);
        }
        assert!(e.particles().iter().all(|p| (p.energy - 1.0).abs() < 1e-12));
        assert_eq!(e, gen_triangle_ellipse_event(&params, 50, 1).unwrap());
    }

    #[test]
    fn subjet_generator_shapes() {
        let tight = SubjetParams {
            centers: 1,
            sigma: 1e-9,
            ..Default::default()
        };
        let (e, truth) = gen_subjet_event(&tight, 2).unwrap();
        assert_eq!(e.len(), 10);
        for p in e.particles() {
            assert!((p.position[0] - truth[0][0]).abs() < 1e-7 && (p.position[1] - truth[0][1]).abs() < 1e-7);
        }
        let three = SubjetParams::default();
        let (e, truth) = gen_subjet_event(&three, 3).unwrap();
        assert_eq!(e.len(), 30);
        assert!(truth.iter().flatten().all(|&c| (0.15..=0.85).contains(&c)));
        assert_eq!(e, gen_subjet_event(&three, 3).unwrap().0);
        let four = SubjetParams { centers: 4, ..three };
        assert_eq!(gen_subjet_event(&four, 0).unwrap().0.len(), 40);
    }

    #[test]
    fn normalize_is_idempotent() {
        let e = gen_subjet_event(&SubjetParams::default(), 11).unwrap().0;
        let once = e.normalize().unwrap();
        let weights = once.weights().to_vec();
        let positions: Vec<Vec<f64>> = once.points().rows().into_iter().map(|r| r.to_vec()).collect();
        let again = Event::new(
            weights
                .iter()
                .zip(positions)
                .map(|(&energy, position)| Particle { energy, position })
                .collect(),
        )
        .unwrap()
        .normalize()
        .unwrap();
        assert!((weights.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        for (a, b) in weights.iter().zip(again.weights()) {
            assert!((a - b).abs() <= 1e-15);
        }
    }

    fn arb_event() -> impl Strategy<Value = Event> {
        (1usize..4).prop_flat_map(|d| {
            prop::collection::vec(
                (1e-300f64..1e300, prop::collection::vec(-1e12f64..1e12, d)),
                1..20,
            )
            .prop_map(|ps| {
                Event::new(ps.into_iter().map(|(energy, position)| Particle { energy, position }).collect()).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn formats_round_trip_bitwise(e in arb_event()) {
            prop_assert_eq!(Event::from_csv(&e.to_csv(), here()).unwrap(), e.clone());
            prop_assert_eq!(Event::from_jsonl(&e.to_jsonl(), here()).unwrap(), e);
        }
    }
}

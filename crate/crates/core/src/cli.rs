//! Command implementations behind the `neemo` binary.
//!
//! Each command takes parsed inputs, writes its artifacts, and returns a
//! serializable report. Exit-code policy lives in [`exit_code`].

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checks::{self, mean_std, CheckResult, Suite};
use crate::error::{Error, Result};
use crate::events::{
    gen_circle_event, gen_subjet_event, gen_triangle_ellipse_event, Event, EventFormat, SubjetParams,
    TriangleEllipse,
};
use crate::fitter::{
    estimate_emd, fit, heatmap_text, potential_heatmap, theta_forces, EmdConfig, FitConfig, HeatmapGrid,
};
use crate::ot::{exact_emd, sinkhorn_emd, DiscreteMeasure, SinkhornOptions};
use crate::shapes::{ShapeSpec, WeightMode};
use crate::svg::Frame;

/// Input or configuration problems.
pub const EXIT_INPUT: i32 = 2;
/// Numerical failure such as divergence.
pub const EXIT_NUMERICAL: i32 = 3;
/// A check suite reported a failure.
pub const EXIT_CHECK: i32 = 4;

pub fn exit_code(err: &Error) -> i32 {
    if err.is_numerical() {
        EXIT_NUMERICAL
    } else {
        EXIT_INPUT
    }
}

/// Record of one run, written last so its presence marks a complete run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub artifacts: Vec<PathBuf>,
    pub wall_time_s: f64,
    pub version: String,
}

impl RunManifest {
    pub fn new(command: &str, config: &impl Serialize, seed: u64) -> Self {
        Self {
            command: command.into(),
            config: serde_json::to_value(config).expect("configs serialize"),
            seed,
            artifacts: Vec::new(),
            wall_time_s: 0.0,
            version: env!("CARGO_PKG_VERSION").into(),
        }
    }

    /// Writes `manifest.json` into `dir` through a temporary file and rename.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("manifest.json");
        let tmp = dir.join(".manifest.json.tmp");
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: PathBuf, text: &str, artifacts: &mut Vec<PathBuf>) -> Result<()> {
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    artifacts.push(path);
    Ok(())
}

pub fn load_event(path: &Path) -> Result<Event> {
    Event::load(path, EventFormat::from_path(path))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmdMethod {
    Exact,
    Dual,
    Sinkhorn,
}

impl std::str::FromStr for EmdMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Self::Exact),
            "dual" => Ok(Self::Dual),
            "sinkhorn" => Ok(Self::Sinkhorn),
            _ => Err(Error::Config(format!("unknown method {s:?} (exact, dual, sinkhorn)"))),
        }
    }
}

/// Settings for `emd`, loadable from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmdCommandConfig {
    pub epsilon: f64,
    pub dual: EmdConfig,
    /// Write the exact transport plan as CSV.
    pub write_plan: bool,
}

impl Default for EmdCommandConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            dual: EmdConfig::default(),
            write_plan: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmdReport {
    pub method: EmdMethod,
    pub value: f64,
    /// Sinkhorn iterations or dual ascent steps.
    pub iterations: Option<usize>,
    pub artifacts: Vec<PathBuf>,
}

pub fn cmd_emd(
    a: &Path,
    b: &Path,
    method: EmdMethod,
    config: &EmdCommandConfig,
    out_dir: Option<&Path>,
) -> Result<EmdReport> {
    let start = Instant::now();
    let p = load_event(a)?.normalize()?;
    let q = load_event(b)?.normalize()?;
    let mut artifacts = Vec::new();
    if let Some(dir) = out_dir {
        create_dir(dir)?;
    }
    let (value, iterations) = match method {
        EmdMethod::Exact => {
            let plan = exact_emd(&p, &q)?;
            if let (Some(dir), true) = (out_dir, config.write_plan) {
                write(dir.join("plan.csv"), &plan_csv(&plan.gamma), &mut artifacts)?;
            }
            (plan.cost, None)
        }
        EmdMethod::Sinkhorn => {
            let r = sinkhorn_emd(
                &p,
                &q,
                SinkhornOptions {
                    epsilon: config.epsilon,
                    ..SinkhornOptions::default()
                },
            )?;
            (r.value, Some(r.iterations))
        }
        EmdMethod::Dual => {
            let est = estimate_emd(&p, &q, None, &config.dual)?;
            if let Some(dir) = out_dir {
                let path = dir.join("potential.json");
                est.net.save(&path)?;
                artifacts.push(path);
            }
            (est.value, Some(config.dual.steps))
        }
    };
    if let Some(dir) = out_dir {
        let mut manifest = RunManifest::new("emd", config, config.dual.seed);
        manifest.artifacts = artifacts.clone();
        manifest.wall_time_s = start.elapsed().as_secs_f64();
        manifest.write(dir)?;
    }
    Ok(EmdReport {
        method,
        value,
        iterations,
        artifacts,
    })
}

fn plan_csv(gamma: &Array2<f64>) -> String {
    let mut out = String::from("i,j,mass\n");
    for ((i, j), &g) in gamma.indexed_iter() {
        if g > 0.0 {
            out.push_str(&format!("{i},{j},{g}\n"));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitReport {
    pub observable: f64,
    pub outer_steps: usize,
    pub final_theta: Vec<f64>,
    pub artifacts: Vec<PathBuf>,
}

/// Runs a fit and writes the trace, final shape, heatmaps and (optionally)
/// SVG frames into `out_dir`. On divergence the partial trace is still
/// written before the error is returned.
pub fn cmd_fit(event: &Event, shape: &ShapeSpec, config: &FitConfig, out_dir: &Path, svg: bool) -> Result<FitReport> {
    let start = Instant::now();
    create_dir(out_dir)?;
    let measure = event.normalize()?;
    let mut artifacts = Vec::new();
    let result = fit(&measure, shape, config);
    let fitted = match result {
        Ok(f) => f,
        Err(Error::Diverged { step, value, trace }) => {
            let path = out_dir.join("trace.jsonl");
            trace.save_jsonl(&path)?;
            return Err(Error::Diverged { step, value, trace });
        }
        Err(e) => return Err(e),
    };
    write(out_dir.join("trace.jsonl"), &fitted.trace.to_jsonl(), &mut artifacts)?;
    write(out_dir.join("shape.toml"), &fitted.shape.to_toml(), &mut artifacts)?;
    let final_path = out_dir.join("potential.json");
    fitted.net.save(&final_path)?;
    artifacts.push(final_path);

    for snap in &fitted.trace.snapshots {
        write(
            out_dir.join(format!("heatmap_{:05}.txt", snap.step)),
            &heatmap_text(&snap.grid, &snap.values),
            &mut artifacts,
        )?;
        if svg {
            let sample = shape.with_theta(snap.theta.clone()).sample(None)?;
            let forces = grid_forces(&snap.grid, &snap.values, &sample.points, &sample.weights);
            let text = render(event, &measure, &snap.grid, &snap.values, &sample.points, &forces, snap.step);
            write(out_dir.join(format!("frame_{:05}.svg", snap.step)), &text, &mut artifacts)?;
        }
    }
    let grid = &config.heatmap;
    let values = potential_heatmap(&fitted.net, grid);
    write(out_dir.join("heatmap_final.txt"), &heatmap_text(grid, &values), &mut artifacts)?;
    if svg {
        let sample = fitted.shape.sample(None)?;
        let forces = theta_forces(&fitted.net, &sample);
        let step = fitted.trace.records.len();
        let text = render(event, &measure, grid, &values, &sample.points, &forces, step);
        write(out_dir.join("frame_final.svg"), &text, &mut artifacts)?;
    }

    let mut manifest = RunManifest::new("fit", config, config.seed);
    manifest.artifacts = artifacts.clone();
    manifest.wall_time_s = start.elapsed().as_secs_f64();
    manifest.write(out_dir)?;
    Ok(FitReport {
        observable: fitted.observable,
        outer_steps: fitted.trace.records.len(),
        final_theta: fitted.shape.theta.clone(),
        artifacts,
    })
}

fn render(
    event: &Event,
    measure: &DiscreteMeasure,
    grid: &HeatmapGrid,
    values: &[f64],
    sample: &Array2<f64>,
    forces: &Array2<f64>,
    step: usize,
) -> String {
    let weights = measure.weights().to_vec();
    let positions = event.positions();
    Frame {
        title: Some(format!("step {step}")),
        heatmap: Some((grid, values)),
        event: Some((positions.view(), &weights)),
        sample: Some(sample.view()),
        forces: Some(forces),
    }
    .render()
}

/// `w · ∇f` from central differences of a stored heatmap at the nearest
/// interior cell.
fn grid_forces(grid: &HeatmapGrid, values: &[f64], points: &Array2<f64>, weights: &[f64]) -> Array2<f64> {
    let [nx, ny] = grid.resolution;
    let dx = (grid.hi[0] - grid.lo[0]) / nx as f64;
    let dy = (grid.hi[1] - grid.lo[1]) / ny as f64;
    let at = |i: usize, j: usize| values[j * nx + i];
    Array2::from_shape_fn((points.nrows(), 2), |(k, c)| {
        if nx < 3 || ny < 3 {
            return 0.0;
        }
        let cell = |v: f64, lo: f64, d: f64, n: usize| (((v - lo) / d).floor().max(1.0) as usize).min(n - 2);
        let i = cell(points[[k, 0]], grid.lo[0], dx, nx);
        let j = cell(points[[k, 1]], grid.lo[1], dy, ny);
        let g = if c == 0 {
            (at(i + 1, j) - at(i - 1, j)) / (2.0 * dx)
        } else {
            (at(i, j + 1) - at(i, j - 1)) / (2.0 * dy)
        };
        weights[k] * g
    })
}

/// Settings for the subjet-count study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SubjetsConfig {
    pub true_n: Vec<usize>,
    pub fit_n: Vec<usize>,
    pub trials: usize,
    pub sigma: f64,
    pub particles_per_center: usize,
    pub weight_mode: WeightMode,
    pub fit: FitConfig,
}

impl Default for SubjetsConfig {
    fn default() -> Self {
        Self {
            true_n: vec![3, 4, 5],
            fit_n: vec![3, 4, 5],
            trials: 10,
            sigma: SubjetParams::default().sigma,
            particles_per_center: 10,
            weight_mode: WeightMode::Uniform,
            fit: FitConfig::default(),
        }
    }
}

impl SubjetsConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubjetCell {
    pub true_n: usize,
    pub fit_n: usize,
    pub mean: f64,
    pub std: f64,
    pub values: Vec<f64>,
    pub diverged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubjetTable {
    pub cells: Vec<SubjetCell>,
}

impl SubjetTable {
    pub fn cell(&self, true_n: usize, fit_n: usize) -> Option<&SubjetCell> {
        self.cells.iter().find(|c| c.true_n == true_n && c.fit_n == fit_n)
    }

    /// Mean observable as a text matrix, rows true N, columns fit N.
    pub fn to_text(&self) -> String {
        let mut fit_ns: Vec<usize> = self.cells.iter().map(|c| c.fit_n).collect();
        fit_ns.dedup();
        fit_ns.sort_unstable();
        fit_ns.dedup();
        let mut true_ns: Vec<usize> = self.cells.iter().map(|c| c.true_n).collect();
        true_ns.sort_unstable();
        true_ns.dedup();
        let mut out = String::from("true\\fit");
        for f in &fit_ns {
            out.push_str(&format!("  {f:>17}"));
        }
        out.push('\n');
        for t in &true_ns {
            out.push_str(&format!("{t:>8}"));
            for f in &fit_ns {
                match self.cell(*t, *f) {
                    Some(c) => out.push_str(&format!("  {:.5} ± {:.5}", c.mean, c.std)),
                    None => out.push_str(&format!("  {:>17}", "-")),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Seed for one (true N, fit N, trial) cell. The event depends only on the
/// true N and trial so every fit N in a row sees the same events.
fn cell_seeds(seed: u64, true_n: usize, fit_n: usize, trial: usize) -> (u64, u64) {
    let event = seed ^ (true_n as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (trial as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    let init = event ^ (fit_n as u64).wrapping_mul(0x94d0_49bb_1331_11eb);
    (event, init)
}

/// One cell of the study: returns the observable, or `None` on divergence.
pub fn subjet_trial(config: &SubjetsConfig, true_n: usize, fit_n: usize, trial: usize, seed: u64) -> Result<Option<f64>> {
    let (event_seed, init_seed) = cell_seeds(seed, true_n, fit_n, trial);
    let params = SubjetParams {
        centers: true_n,
        sigma: config.sigma,
        particles_per_center: config.particles_per_center,
        ..SubjetParams::default()
    };
    let (event, _) = gen_subjet_event(&params, event_seed)?;
    let inset = 3.0 * config.sigma;
    let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
    let centers: Vec<Vec<f64>> = (0..fit_n)
        .map(|_| {
            (0..2)
                .map(|_| rng.gen_range(params.lo + inset..params.hi - inset))
                .collect()
        })
        .collect();
    let shape = ShapeSpec::point_set(&centers, config.weight_mode)?;
    let fit_config = FitConfig {
        seed: init_seed,
        ..config.fit.clone()
    };
    match fit(&event.normalize()?, &shape, &fit_config) {
        Ok(f) => Ok(Some(f.observable)),
        Err(Error::Diverged { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

/// The full study, parallel over cells and trials.
pub fn cmd_subjets(config: &SubjetsConfig, seed: u64) -> Result<SubjetTable> {
    if config.true_n.is_empty() || config.fit_n.is_empty() || config.trials == 0 {
        return Err(Error::Config("true-n, fit-n and trials must be non-empty".into()));
    }
    let jobs: Vec<(usize, usize, usize)> = config
        .true_n
        .iter()
        .flat_map(|&t| config.fit_n.iter().flat_map(move |&f| (0..config.trials).map(move |k| (t, f, k))))
        .collect();
    let results: Vec<Option<f64>> = jobs
        .par_iter()
        .map(|&(t, f, k)| subjet_trial(config, t, f, k, seed))
        .collect::<Result<_>>()?;
    let mut cells = Vec::new();
    for &t in &config.true_n {
        for &f in &config.fit_n {
            let outcomes: Vec<Option<f64>> = jobs
                .iter()
                .zip(&results)
                .filter(|((jt, jf, _), _)| *jt == t && *jf == f)
                .map(|(_, r)| *r)
                .collect();
            let values: Vec<f64> = outcomes.iter().flatten().copied().collect();
            let (mean, std) = mean_std(&values);
            cells.push(SubjetCell {
                true_n: t,
                fit_n: f,
                mean,
                std,
                diverged: outcomes.len() - values.len(),
                values,
            });
        }
    }
    Ok(SubjetTable { cells })
}

pub fn cmd_check(suites: &[Suite], seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for &s in suites {
        for mut r in checks::run(s, seed)? {
            r.name = format!("{}: {}", s.name(), r.name);
            out.push(r);
        }
    }
    Ok(out)
}

/// Event generators exposed on the command line.
#[derive(Debug, Clone, PartialEq)]
pub enum Generator {
    Circles {
        circles: Vec<(f64, f64, f64)>,
        points_per_circle: usize,
        jitter: f64,
    },
    TriangleEllipse {
        params: TriangleEllipse,
        points_per_shape: usize,
    },
    Subjets(SubjetParams),
}

impl Generator {
    /// The three-circle layout used in the figure reproduction.
    pub fn three_circles() -> Self {
        Generator::Circles {
            circles: THREE_CIRCLES.to_vec(),
            points_per_circle: 64,
            jitter: 0.0,
        }
    }
}

/// Ground truth for the three-circle experiment, `(cx, cy, r)`.
pub const THREE_CIRCLES: [(f64, f64, f64); 3] = [(0.3, 0.3, 0.08), (0.7, 0.35, 0.06), (0.5, 0.72, 0.1)];

/// Three circles with centers uniform in `[0.2, 0.8]²` and radii in
/// `[0.025, 0.1)`, the starting point of the three-circle fits.
pub fn random_three_circles(seed: u64, samples_per_component: usize) -> Result<ShapeSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| (rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.025..0.1)))
        .collect();
    ShapeSpec::circles(&init, samples_per_component)
}

/// `truth` with vertices and center moved by up to `±0.08` per coordinate,
/// semi-axes scaled by `[0.7, 1.3)` and rotation shifted by up to `±0.5`.
pub fn perturbed_triangle_ellipse(truth: &TriangleEllipse, seed: u64) -> TriangleEllipse {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = *truth;
    for v in init.vertices.iter_mut() {
        v[0] += rng.gen_range(-0.08..0.08);
        v[1] += rng.gen_range(-0.08..0.08);
    }
    init.center[0] += rng.gen_range(-0.08..0.08);
    init.center[1] += rng.gen_range(-0.08..0.08);
    init.semi_axes[0] *= rng.gen_range(0.7..1.3);
    init.semi_axes[1] *= rng.gen_range(0.7..1.3);
    init.rotation += rng.gen_range(-0.5..0.5);
    init
}

pub fn generate(generator: &Generator, seed: u64) -> Result<Event> {
    match generator {
        Generator::Circles {
            circles,
            points_per_circle,
            jitter,
        } => gen_circle_event(circles, *points_per_circle, *jitter, seed),
        Generator::TriangleEllipse {
            params,
            points_per_shape,
        } => gen_triangle_ellipse_event(params, *points_per_shape, seed),
        Generator::Subjets(p) => Ok(gen_subjet_event(p, seed)?.0),
    }
}

pub fn cmd_gen(generator: &Generator, seed: u64, out: &Path, format: EventFormat) -> Result<Event> {
    let event = generate(generator, seed)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    event.save(out, format)?;
    Ok(event)
}

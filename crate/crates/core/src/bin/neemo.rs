use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use neemo::checks::Suite;
use neemo::cli::{
    cmd_check, cmd_emd, cmd_fit, cmd_gen, cmd_subjets, exit_code, load_event, EmdCommandConfig, EmdMethod,
    Generator, RunManifest, SubjetsConfig, EXIT_CHECK, EXIT_INPUT, THREE_CIRCLES,
};
use neemo::events::{EventFormat, SubjetParams, TriangleEllipse};
use neemo::fitter::FitConfig;
use neemo::shapes::ShapeSpec;
use neemo::{Error, Result};

#[derive(Parser)]
#[command(name = "neemo", version, about = "Neural EMD estimation and shape fitting")]
struct Cli {
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// TOML config for the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    format: Format,
    /// Run single-threaded so outputs are bitwise reproducible.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Exact,
    Dual,
    Sinkhorn,
}

#[derive(Clone, Copy, ValueEnum)]
enum GenKind {
    Circles,
    TriangleEllipse,
    Subjets,
}

#[derive(Subcommand)]
enum Command {
    /// EMD between two event files.
    Emd {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, value_enum, default_value_t = MethodArg::Exact)]
        method: MethodArg,
        /// Sinkhorn regularization.
        #[arg(long)]
        epsilon: Option<f64>,
        /// Dual ascent steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Write the exact transport plan (needs --out-dir).
        #[arg(long)]
        plan: bool,
    },
    /// Fit a parameterized shape to an event.
    Fit {
        event: PathBuf,
        shape: PathBuf,
        /// Also write SVG frames.
        #[arg(long)]
        svg: bool,
    },
    /// Observable matrix for true and fitted subjet counts.
    Subjets {
        #[arg(long, value_delimiter = ',')]
        true_n: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        fit_n: Option<Vec<usize>>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Run invariant suites; all of them by default.
    Check {
        #[arg(value_parser = ["lipschitz", "gradients", "oracle", "duality"])]
        suites: Vec<String>,
    },
    /// Write a synthetic event file.
    Gen {
        #[arg(value_enum)]
        kind: GenKind,
        out: PathBuf,
        /// Circle count (circles) or subjet centers (subjets).
        #[arg(long)]
        n: Option<usize>,
        /// Points per circle or per shape.
        #[arg(long, default_value_t = 64)]
        points: usize,
        /// Radial jitter for circles.
        #[arg(long, default_value_t = 0.0)]
        jitter: f64,
        #[arg(long)]
        sigma: Option<f64>,
    },
}

fn read_config<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn emit<T: Serialize>(format: Format, report: &T, text: impl FnOnce() -> String) {
    match format {
        Format::Json => println!("{}", serde_json::to_string_pretty(report).expect("reports serialize")),
        Format::Text => print!("{}", text()),
    }
}

fn run(cli: Cli) -> Result<i32> {
    let config = cli.config.as_deref();
    match cli.command {
        Command::Emd {
            a,
            b,
            method,
            epsilon,
            steps,
            plan,
        } => {
            let mut cfg: EmdCommandConfig = read_config(config)?;
            if let Some(e) = epsilon {
                cfg.epsilon = e;
            }
            if let Some(s) = steps {
                cfg.dual.steps = s;
            }
            cfg.dual.seed = cli.seed;
            cfg.write_plan |= plan;
            let method = match method {
                MethodArg::Exact => EmdMethod::Exact,
                MethodArg::Dual => EmdMethod::Dual,
                MethodArg::Sinkhorn => EmdMethod::Sinkhorn,
            };
            let report = cmd_emd(&a, &b, method, &cfg, cli.out_dir.as_deref())?;
            emit(cli.format, &report, || format!("{}\n", report.value));
        }
        Command::Fit { event, shape, svg } => {
            let mut cfg: FitConfig = read_config(config)?;
            cfg.seed = cli.seed;
            cfg.validate()?;
            let event = load_event(&event)?;
            let shape = ShapeSpec::load(&shape)?;
            let out = cli.out_dir.unwrap_or_else(|| PathBuf::from("fit-out"));
            let report = cmd_fit(&event, &shape, &cfg, &out, svg)?;
            emit(cli.format, &report, || {
                format!(
                    "observable {}\nouter steps {}\ntheta {:?}\nartifacts in {}\n",
                    report.observable,
                    report.outer_steps,
                    report.final_theta,
                    out.display()
                )
            });
        }
        Command::Subjets { true_n, fit_n, trials } => {
            let start = std::time::Instant::now();
            let mut cfg: SubjetsConfig = read_config(config)?;
            if let Some(v) = true_n {
                cfg.true_n = v;
            }
            if let Some(v) = fit_n {
                cfg.fit_n = v;
            }
            if let Some(t) = trials {
                cfg.trials = t;
            }
            cfg.fit.validate()?;
            let table = cmd_subjets(&cfg, cli.seed)?;
            if let Some(dir) = &cli.out_dir {
                fs::create_dir_all(dir).map_err(|e| Error::Io {
                    path: dir.clone(),
                    source: e,
                })?;
                let path = dir.join("subjets.json");
                let text = serde_json::to_string_pretty(&table).expect("table serializes");
                fs::write(&path, text).map_err(|e| Error::Io {
                    path: path.clone(),
                    source: e,
                })?;
                let mut manifest = RunManifest::new("subjets", &cfg, cli.seed);
                manifest.artifacts.push(path);
                manifest.wall_time_s = start.elapsed().as_secs_f64();
                manifest.write(dir)?;
            }
            emit(cli.format, &table, || {
                let mut s = table.to_text();
                for c in table.cells.iter().filter(|c| c.diverged > 0) {
                    s.push_str(&format!("true {} fit {}: {} diverged\n", c.true_n, c.fit_n, c.diverged));
                }
                s
            });
        }
        Command::Check { suites } => {
            let suites: Vec<Suite> = if suites.is_empty() {
                Suite::ALL.to_vec()
            } else {
                suites.iter().map(|s| s.parse()).collect::<Result<_>>()?
            };
            let results = cmd_check(&suites, cli.seed)?;
            emit(cli.format, &results, || results.iter().map(|r| format!("{r}\n")).collect());
            if results.iter().any(|r| !r.passed) {
                return Ok(EXIT_CHECK);
            }
        }
        Command::Gen {
            kind,
            out,
            n,
            points,
            jitter,
            sigma,
        } => {
            let generator = match kind {
                GenKind::Circles => {
                    let k = n.unwrap_or(THREE_CIRCLES.len());
                    if k == 0 || k > THREE_CIRCLES.len() {
                        return Err(Error::Config(format!("circles supports 1..={} circles", THREE_CIRCLES.len())));
                    }
                    Generator::Circles {
                        circles: THREE_CIRCLES[..k].to_vec(),
                        points_per_circle: points,
                        jitter,
                    }
                }
                GenKind::TriangleEllipse => Generator::TriangleEllipse {
                    params: TriangleEllipse::default(),
                    points_per_shape: points,
                },
                GenKind::Subjets => {
                    let d = SubjetParams::default();
                    Generator::Subjets(SubjetParams {
                        centers: n.unwrap_or(d.centers),
                        sigma: sigma.unwrap_or(d.sigma),
                        ..d
                    })
                }
            };
            let format = EventFormat::from_path(&out);
            let event = cmd_gen(&generator, cli.seed, &out, format)?;
            emit(
                cli.format,
                &serde_json::json!({ "path": out, "particles": event.len() }),
                || format!("wrote {} particles to {}\n", event.len(), out.display()),
            );
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_INPUT as u8 } else { 0 });
        }
    };
    if cli.deterministic {
        // A failure here means a pool already exists, which cannot happen
        // this early in main.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    }
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}

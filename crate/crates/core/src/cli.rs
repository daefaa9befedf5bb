//! Command-line front end (`gifs`).
//!
//! Every command reads a system file or a measure CSV, writes its files and
//! prints a `name=value` report on stdout. Errors map to exit codes through
//! [`Error::exit_code`].

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::analysis::{
    chaos_game_average, integrate, lyapunov, moments, project_measure, report_line,
    wasserstein_means,
};
use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::grid::{CellId, Grid, GridIndex, Interval};
use crate::measure::DiscreteMeasure;
use crate::operator::{plan_resolution, DiscretizedSystem, PlanMode, ResolutionPlan, StepRecord};
use crate::render::{histogram_csv, measure_pgm, points_csv, set_pgm, RenderConfig, Scale, DEFAULT_GAMMA};
use crate::system::{parse_system, Mode, SystemSpec};

/// Largest lattice side drawn one pixel per point when no `--pixels` is given.
const MAX_AUTO_PIXELS: u64 = 4096;
const FALLBACK_PIXELS: usize = 512;
/// Largest grid accepted by `--uniform-start`.
const MAX_UNIFORM_START: u64 = 1 << 24;

#[derive(Debug, Parser)]
#[command(name = "gifs", version, about = "Discrete Hutchinson measures and attractors of IFS and GIFS")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Iterate the discretized Markov operator and write the measure.
    Measure {
        system: PathBuf,
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        render: RenderArgs,
        /// Measure CSV.
        #[arg(long, default_value = "measure.csv")]
        out: PathBuf,
        /// PGM histogram (2-D) or position,weight CSV (1-D). Defaults next to --out.
        #[arg(long)]
        image: Option<PathBuf>,
        /// Plan and per-step log. Defaults next to --out.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Iterate the discretized set map and write the discrete attractor.
    Attractor {
        system: PathBuf,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',')]
        image_pixels: Option<Vec<usize>>,
        /// Point list CSV.
        #[arg(long, default_value = "attractor.csv")]
        out: PathBuf,
        /// Binary PGM (2-D only). Defaults next to --out.
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Integral of --expr against a measure.
    Integrate {
        /// Measure CSV, or a system file to run first.
        input: PathBuf,
        #[arg(long)]
        expr: String,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Moments Σ ν_k y_k^n for n = 0..=max-n (1-D).
    Moments {
        input: PathBuf,
        #[arg(long, default_value_t = 10)]
        max_n: usize,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Difference of means and W1 distance between two 1-D measure CSVs.
    Wasserstein { first: PathBuf, second: PathBuf },
    /// Lyapunov exponent of a 1-D IFS with respect to its discrete measure.
    Lyapunov {
        system: PathBuf,
        /// Measure CSV; computed from the system when absent.
        #[arg(long)]
        measure: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Pushforward of a measure onto one coordinate axis.
    Project {
        input: PathBuf,
        #[arg(long, default_value_t = 0)]
        axis: usize,
        /// Projected measure CSV.
        #[arg(long, default_value = "projected.csv")]
        out: PathBuf,
        /// position,weight histogram CSV.
        #[arg(long)]
        image: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Birkhoff average of --expr along a random orbit.
    Chaos {
        system: PathBuf,
        #[arg(long)]
        expr: String,
        #[arg(long, default_value_t = 10_000)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        x0: Option<Vec<f64>>,
    },
}

/// Grid and iteration flags shared by the commands that run a system.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// Target resolution; chooses ε and N (needs α < 1).
    #[arg(long, conflicts_with_all = ["epsilon", "heuristic"])]
    pub delta: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub iters: Option<usize>,
    /// Lattice points per dimension (ε = extent/(n−1)).
    #[arg(long, value_delimiter = ',')]
    pub pixels: Option<Vec<usize>>,
    /// Diameter D in the bound; defaults to the domain diameter.
    #[arg(long)]
    pub diameter: Option<f64>,
    /// Run without a resolution claim: allows α ≥ 1 and renormalizes
    /// probability vectors that do not sum to one.
    #[arg(long)]
    pub heuristic: bool,
    /// Starting point; one value is repeated across coordinates.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub x0: Option<Vec<f64>>,
    /// Start from the uniform measure (or the full set) on every lattice point.
    #[arg(long, conflicts_with = "x0")]
    pub uniform_start: bool,
    /// Worker threads for the Markov step.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScaleArg {
    Linear,
    Log,
    Power,
}

#[derive(Debug, Clone, Args)]
pub struct RenderArgs {
    #[arg(long, value_enum, default_value = "power")]
    pub scale: ScaleArg,
    #[arg(long, default_value_t = DEFAULT_GAMMA)]
    pub gamma: f64,
    /// Bright mass on black instead of dark mass on white.
    #[arg(long)]
    pub no_invert: bool,
    /// Image size, when it should differ from the lattice.
    #[arg(long, value_delimiter = ',')]
    pub image_pixels: Option<Vec<usize>>,
}

/// A system ready to run: grid, plan and discretized maps.
struct Prepared {
    ds: DiscretizedSystem,
    plan: ResolutionPlan,
    /// Bound evaluated at the per-pixel spacing `extent/n`, when `--pixels` is given.
    pixel_bound: Option<f64>,
    heuristic: bool,
}

impl Prepared {
    fn grid(&self) -> &Arc<Grid> {
        self.ds.grid()
    }

    fn report(&self) -> String {
        let mut s = self.plan.to_string();
        if let Some(b) = self.pixel_bound {
            s.push('\n');
            s.push_str(&report_line("pixel_bound", b));
        }
        if self.heuristic {
            s.push_str("\nmode=heuristic");
        }
        s
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}{suffix}"))
}

pub fn load_system(path: &Path) -> Result<SystemSpec> {
    parse_system(&read_text(path)?)
}

fn is_measure_csv(text: &str) -> bool {
    text.trim_start().starts_with("# dim=")
}

fn widest(domain: &[Interval]) -> f64 {
    domain.iter().map(Interval::extent).fold(0.0, f64::max)
}

fn prepare(s: SystemSpec, run: &RunArgs) -> Result<Prepared> {
    let diameter = run.diameter.unwrap_or_else(|| s.domain_diameter());
    let domain = s.domain().to_vec();
    let pixel_grid = match &run.pixels {
        Some(p) => Some(Grid::for_pixels(domain.clone(), p)?),
        None => None,
    };
    if let (Some(g), Some(eps)) = (&pixel_grid, run.epsilon) {
        if ((g.epsilon() - eps) / eps).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "--epsilon {eps} disagrees with --pixels, which give {}",
                g.epsilon()
            )));
        }
    }
    let alpha = s.alpha();
    let (grid, plan) = if let Some(delta) = run.delta {
        if s.mode() == Mode::Heuristic {
            return Err(Error::Config(match alpha {
                Some(a) => format!(
                    "contraction sum α = {a} is not below 1, so --delta cannot be met; \
                     rerun with --heuristic and --epsilon/--pixels with --iters"
                ),
                None => "no contraction vector is known, so --delta cannot be met; declare \
                         `contraction = ...` or rerun with --heuristic"
                    .into(),
            }));
        }
        if run.epsilon.is_some() || run.iters.is_some() || run.pixels.is_some() {
            return Err(Error::Config(
                "--delta chooses ε and N itself; drop --epsilon, --iters and --pixels \
                 (use --image-pixels to size the picture)"
                    .into(),
            ));
        }
        let plan = plan_resolution(
            Some(delta),
            alpha.unwrap_or(1.0),
            diameter,
            PlanMode::Guaranteed { extent: Some(widest(&domain)) },
        )?;
        (Grid::new(domain, plan.epsilon)?, plan)
    } else {
        let iters = run
            .iters
            .ok_or_else(|| Error::Config("give --delta, or --iters with --epsilon or --pixels".into()))?;
        let grid = match (pixel_grid, run.epsilon) {
            (Some(g), _) => g,
            (None, Some(eps)) => Grid::new(domain, eps)?,
            (None, None) => {
                return Err(Error::Config("--iters needs --epsilon or --pixels".into()));
            }
        };
        if s.mode() == Mode::Heuristic && !run.heuristic {
            return Err(Error::Config(format!(
                "{}; rerun with --heuristic to iterate without a resolution claim",
                match alpha {
                    Some(a) => format!("contraction sum α = {a} is not below 1"),
                    None => "no contraction vector is known".into(),
                }
            )));
        }
        let mut plan = plan_resolution(
            None,
            alpha.unwrap_or(1.0),
            diameter,
            PlanMode::Fixed { epsilon: grid.epsilon(), iters },
        )?;
        plan.guaranteed &= !run.heuristic;
        (grid, plan)
    };
    let pixel_bound = run.pixels.as_ref().map(|p| {
        let eps = widest(s.domain()) / p[0] as f64;
        plan_resolution(None, plan.alpha, diameter, PlanMode::Fixed { epsilon: eps, iters: plan.iters })
            .map(|q| q.bound)
            .unwrap_or(f64::INFINITY)
    });
    let workers = run
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let ds = DiscretizedSystem::new(s, Arc::new(grid))?
        .with_normalized_probs(run.heuristic)
        .with_workers(workers);
    Ok(Prepared {
        ds,
        plan,
        pixel_bound,
        heuristic: run.heuristic,
    })
}

/// Grid point nearest to `x0`, or to the centre of the box.
fn start_point(grid: &Grid, x0: Option<&[f64]>) -> Result<GridIndex> {
    let d = grid.dim();
    let p: Vec<f64> = match x0 {
        None => grid.bounds().iter().map(|b| (b.lo + b.hi) / 2.0).collect(),
        Some([t]) => vec![*t; d],
        Some(v) if v.len() == d => v.to_vec(),
        Some(v) => {
            return Err(Error::Dimension(format!("--x0 has {} values in dimension {d}", v.len())));
        }
    };
    if let Some(k) = (0..d).find(|&k| !grid.bounds()[k].contains(p[k], 1e-12)) {
        return Err(Error::Config(format!("--x0 coordinate {k} = {} lies outside the domain", p[k])));
    }
    grid.project(&p)
}

fn log_text(prep: &Prepared, log: &[StepRecord]) -> String {
    let mut s = prep.report();
    s.push('\n');
    for r in log {
        s.push_str(&r.to_string());
        s.push('\n');
    }
    s
}

fn start_cells(grid: &Grid, run: &RunArgs) -> Result<Vec<CellId>> {
    if !run.uniform_start {
        return Ok(vec![grid.cell_of(&start_point(grid, run.x0.as_deref())?)?]);
    }
    if grid.len() > MAX_UNIFORM_START {
        return Err(Error::Config(format!(
            "--uniform-start on {} lattice points; use a coarser grid",
            grid.len()
        )));
    }
    Ok((0..grid.len()).map(CellId).collect())
}

fn run_measure(prep: &Prepared, run: &RunArgs) -> Result<(DiscreteMeasure, Vec<StepRecord>)> {
    let g = prep.grid().clone();
    let nu0 = DiscreteMeasure::uniform(g.clone(), &start_cells(&g, run)?)?;
    prep.ds.run_measure(&nu0, prep.plan.iters)
}

/// A measure from a CSV file, or from running the system in `path`.
fn load_or_run(path: &Path, run: &RunArgs) -> Result<DiscreteMeasure> {
    let text = read_text(path)?;
    if is_measure_csv(&text) {
        return DiscreteMeasure::from_csv(&text);
    }
    let prep = prepare(parse_system(&text)?, run)?;
    Ok(run_measure(&prep, run)?.0)
}

fn image_size(grid: &Grid, explicit: Option<&[usize]>) -> Vec<usize> {
    if let Some(p) = explicit {
        return if p.len() == 1 { vec![p[0]; 2] } else { p.to_vec() };
    }
    let c = grid.counts();
    if c.iter().all(|&n| (2..=MAX_AUTO_PIXELS).contains(&n)) {
        c.iter().map(|&n| n as usize).collect()
    } else {
        vec![FALLBACK_PIXELS; 2]
    }
}

fn render_config(r: &RenderArgs, pixels: Vec<usize>) -> Result<RenderConfig> {
    let scale = match r.scale {
        ScaleArg::Linear => Scale::Linear,
        ScaleArg::Log => Scale::Log,
        ScaleArg::Power => Scale::Power(r.gamma),
    };
    let cfg = RenderConfig {
        pixels,
        scale,
        invert: !r.no_invert,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Runs one command, writing the report to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let mut lines: Vec<String> = Vec::new();
    match cli.command {
        Command::Measure {
            system,
            run,
            render,
            out: csv,
            image,
            log,
        } => {
            let prep = prepare(load_system(&system)?, &run)?;
            let (nu, steps) = run_measure(&prep, &run)?;
            write_file(&csv, nu.to_csv().as_bytes())?;
            match prep.grid().dim() {
                1 => {
                    let path = image.unwrap_or_else(|| sibling(&csv, ".hist.csv"));
                    write_file(&path, histogram_csv(&nu)?.as_bytes())?;
                }
                2 => {
                    let px = image_size(prep.grid(), render.image_pixels.as_deref().or(run.pixels.as_deref()));
                    let cfg = render_config(&render, px)?;
                    let path = image.unwrap_or_else(|| sibling(&csv, ".pgm"));
                    write_file(&path, &measure_pgm(&nu, &cfg)?)?;
                }
                _ => {}
            }
            let log_path = log.unwrap_or_else(|| sibling(&csv, ".log"));
            write_file(&log_path, log_text(&prep, &steps).as_bytes())?;
            lines.push(prep.report());
            lines.push(format!("support={}", nu.len()));
            lines.push(report_line("mass", nu.mass()));
        }
        Command::Attractor {
            system,
            run,
            image_pixels,
            out: csv,
            image,
            log,
        } => {
            let prep = prepare(load_system(&system)?, &run)?;
            let g = prep.grid().clone();
            let start = start_cells(&g, &run)?;
            let (cells, steps) = prep.ds.run_attractor(&start, prep.plan.iters)?;
            write_file(&csv, points_csv(&g, &cells).as_bytes())?;
            if g.dim() == 2 {
                let px = image_size(&g, image_pixels.as_deref().or(run.pixels.as_deref()));
                let path = image.unwrap_or_else(|| sibling(&csv, ".pgm"));
                write_file(&path, &set_pgm(&g, &cells, &px)?)?;
            }
            let log_path = log.unwrap_or_else(|| sibling(&csv, ".log"));
            write_file(&log_path, log_text(&prep, &steps).as_bytes())?;
            lines.push(prep.report());
            lines.push(format!("support={}", cells.len()));
        }
        Command::Integrate { input, expr, run } => {
            let g = Expr::parse(&expr)?;
            let nu = load_or_run(&input, &run)?;
            lines.push(report_line("integral", integrate(&nu, &g)?));
        }
        Command::Moments { input, max_n, run } => {
            let nu = load_or_run(&input, &run)?;
            for (n, m) in moments(&nu, max_n)?.into_iter().enumerate() {
                lines.push(report_line(&format!("moment_{n}"), m));
            }
        }
        Command::Wasserstein { first, second } => {
            let a = DiscreteMeasure::from_csv(&read_text(&first)?)?;
            let b = DiscreteMeasure::from_csv(&read_text(&second)?)?;
            lines.push(wasserstein_means(&a, &b)?.to_string());
        }
        Command::Lyapunov { system, measure, run } => {
            let s = load_system(&system)?;
            let nu = match measure {
                Some(p) => DiscreteMeasure::from_csv(&read_text(&p)?)?,
                None => {
                    let prep = prepare(s.clone(), &run)?;
                    run_measure(&prep, &run)?.0
                }
            };
            lines.push(report_line("lyapunov", lyapunov(&s, &nu)?));
        }
        Command::Project {
            input,
            axis,
            out: csv,
            image,
            run,
        } => {
            let nu = load_or_run(&input, &run)?;
            let p = project_measure(&nu, axis)?;
            write_file(&csv, p.to_csv().as_bytes())?;
            let path = image.unwrap_or_else(|| sibling(&csv, ".hist.csv"));
            write_file(&path, histogram_csv(&p)?.as_bytes())?;
            lines.push(format!("support={}", p.len()));
            lines.push(report_line("mass", p.mass()));
        }
        Command::Chaos {
            system,
            expr,
            steps,
            seed,
            x0,
        } => {
            let s = load_system(&system)?;
            let f = Expr::parse(&expr)?;
            let x0 = x0.unwrap_or_else(|| s.domain().iter().map(|b| (b.lo + b.hi) / 2.0).collect());
            lines.push(report_line("average", chaos_game_average(&s, &f, steps, &x0, seed)?));
        }
    }
    let mut text = lines.join("\n");
    text.push('\n');
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io("stdout", e))
}

//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`). Criteria listed in
//! `KNOWN_RED` are printed as FAIL but do not fail the process; if one of
//! them starts passing it is reported as an unexpected pass and does.
//! Set `GIFS_BLESS=1` to regenerate the stored filip support mask.

mod common;

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use common::{exact_moments, random_affine_text, random_start, rng, system, to_f64};
use discrete_hutchinson::analysis::{
    chaos_game_average, integrate, lyapunov, moments, project_measure, wasserstein_means,
};
use discrete_hutchinson::operator::plan_resolution;
use discrete_hutchinson::render::{measure_pgm, parse_pgm, set_pgm, RenderConfig};
use discrete_hutchinson::{
    parse_system, DiscreteMeasure, DiscretizedSystem, Expr, Grid, GridIndex, Interval, PlanMode,
};

const KNOWN_RED: &[&str] = &["heuristic-conze-support"];

type Check = Result<(bool, String), String>;

fn center_dirac(g: &Arc<Grid>) -> DiscreteMeasure {
    let c: Vec<f64> = g.bounds().iter().map(|b| (b.lo + b.hi) / 2.0).collect();
    DiscreteMeasure::dirac(g.clone(), &g.project(&c).unwrap()).unwrap()
}

fn e<T: std::fmt::Display>(x: T) -> String {
    x.to_string()
}

fn bound_table() -> Check {
    let d = 2f64.sqrt();
    let mut ok = true;
    let mut detail = Vec::new();
    for (px, want) in [
        (256.0, 0.010430566982011563),
        (512.0, 0.005547754482011564),
        (1024.0, 0.003106348232011563),
    ] {
        let p = plan_resolution(None, 0.6, d, PlanMode::Fixed { epsilon: 1.0 / px, iters: 15 })
            .map_err(e)?;
        let err = (p.bound - want).abs();
        ok &= err <= 1e-12;
        detail.push(format!("1/{px}: {:.18} (err {err:.1e})", p.bound));
    }
    Ok((ok, detail.join(", ")))
}

fn moment_run(epsilon: f64, iters: usize, tol: f64) -> Check {
    let s = system("moment");
    let plan = plan_resolution(Some(1e-4), 1.0 / 3.0, 1.0, PlanMode::Fixed { epsilon, iters })
        .map_err(e)?;
    let g = Arc::new(Grid::new(vec![Interval::new(0.0, 1.0)], epsilon).map_err(e)?);
    let ds = DiscretizedSystem::new(s, g.clone()).map_err(e)?;
    let nu0 = DiscreteMeasure::dirac(g, &GridIndex::new(vec![0])).map_err(e)?;
    let (nu, _) = ds.run_measure(&nu0, iters).map_err(e)?;
    let got = moments(&nu, 10).map_err(e)?;
    let exact = exact_moments(10);
    let worst = got
        .iter()
        .zip(&exact)
        .map(|(a, b)| (a - to_f64(b)).abs())
        .fold(0.0, f64::max);
    Ok((
        worst <= tol,
        format!(
            "eps={epsilon:e} N={iters} bound={:.3e} max|γn−exact|={worst:.3e} γ1={:.7} γ10={:.7}",
            plan.bound, got[1], got[10]
        ),
    ))
}

fn moments_fine() -> Check {
    moment_run(2e-5, 10, 1e-4)
}

fn moments_desk() -> Check {
    moment_run(1e-3, 10, 5e-3)
}

fn guaranteed_run(name: &str, delta: f64) -> Result<(DiscreteMeasure, String), String> {
    let s = system(name);
    let alpha = s.alpha().ok_or("no contraction")?;
    let plan = plan_resolution(
        Some(delta),
        alpha,
        s.domain_diameter(),
        PlanMode::Guaranteed { extent: Some(1.0) },
    )
    .map_err(e)?;
    let g = Arc::new(Grid::new(s.domain().to_vec(), plan.epsilon).map_err(e)?);
    let ds = DiscretizedSystem::new(s, g.clone()).map_err(e)?;
    let (nu, _) = ds.run_measure(&center_dirac(&g), plan.iters).map_err(e)?;
    Ok((nu, format!("eps={:.3e} N={} bound={:.3e}", plan.epsilon, plan.iters, plan.bound)))
}

fn wasserstein() -> Check {
    let (a, pa) = guaranteed_run("sine_a", 3e-5)?;
    let (b, _) = guaranteed_run("sine_b", 3e-5)?;
    let r = wasserstein_means(&a, &b).map_err(e)?;
    let err = (r.mean_difference - 0.22104594557).abs();
    Ok((
        err <= 1e-3,
        format!("{pa} mean_difference={:.11} w1={:.11} err={err:.1e}", r.mean_difference, r.w1),
    ))
}

fn lyapunov_sine() -> Check {
    let (nu, plan) = guaranteed_run("sine_lyapunov", 1e-4)?;
    let chi = lyapunov(&system("sine_lyapunov"), &nu).map_err(e)?;
    let err = (chi - 1.7367208099).abs();
    Ok((err <= 1e-3, format!("{plan} chi={chi:.10} err={err:.1e}")))
}

fn period_two() -> Check {
    let s = parse_system("dim = 1\ndomain = 0 2\nmap: x1/2\nprob: 1\n").map_err(e)?;
    let g = Arc::new(Grid::new(vec![Interval::new(0.0, 2.0)], 0.5).map_err(e)?);
    let half = g.project(&[0.5]).map_err(e)?;
    let one = g.project(&[1.0]).map_err(e)?;
    let mut ds = DiscretizedSystem::new(s, g.clone()).map_err(e)?;
    ds.override_map(0, std::slice::from_ref(&half), &one).map_err(e)?;
    ds.override_map(0, std::slice::from_ref(&one), &half).map_err(e)?;
    let nu = DiscreteMeasure::from_atoms(g, vec![(half.clone(), 0.3), (one.clone(), 0.7)]).map_err(e)?;
    let once = ds.markov_step(&nu).map_err(e)?;
    let twice = ds.markov_step(&once).map_err(e)?;
    let swapped = once.weight(&half) == 0.7 && once.weight(&one) == 0.3;
    Ok((
        swapped && twice.atoms() == nu.atoms(),
        format!(
            "M(ν)=({}, {}) M²(ν)=({}, {})",
            once.weight(&half),
            once.weight(&one),
            twice.weight(&half),
            twice.weight(&one)
        ),
    ))
}

fn miculescu() -> Check {
    let s = system("miculescu");
    let g = Arc::new(Grid::for_pixels(s.domain().to_vec(), &[300]).map_err(e)?);
    let ds = DiscretizedSystem::new(s, g.clone()).map_err(e)?;
    let start = DiscreteMeasure::dirac(g.clone(), &g.project(&[0.5]).map_err(e)?).map_err(e)?;
    let (nu, _) = ds.run_measure(&start, 30).map_err(e)?;
    let w = nu.weight(&g.project(&[1.0]).map_err(e)?);
    Ok((w >= 1.0 - 1e-6, format!("weight at 1 = {w:.15} (1−w = {:.2e}), support {}", 1.0 - w, nu.len())))
}

fn conze() -> Check {
    let s = system("conze");
    let g = Arc::new(Grid::for_pixels(s.domain().to_vec(), &[500]).map_err(e)?);
    let ds = DiscretizedSystem::new(s, g.clone())
        .map_err(e)?
        .with_normalized_probs(true);
    let (nu, log) = ds.run_measure(&center_dirac(&g), 100).map_err(e)?;
    let targets: Vec<GridIndex> = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]
        .iter()
        .map(|&t| g.project(&[t]).unwrap())
        .collect();
    let on: f64 = targets.iter().map(|t| nu.weight(t)).sum();
    let strays = nu.iter().filter(|(i, _)| !targets.contains(i)).count();
    let (big_i, big_w) = nu
        .iter()
        .filter(|(i, _)| !targets.contains(i))
        .fold((0, 0.0), |acc, (i, w)| if w > acc.1 { (i.0[0], w) } else { acc });
    let near: f64 = nu
        .iter()
        .filter(|(i, _)| targets.iter().any(|t| (t.0[0] - i.0[0]).abs() <= 1))
        .map(|(_, w)| w)
        .sum();
    let normalized: u64 = log.iter().map(|r| r.normalized).sum();
    Ok((
        strays == 0,
        format!(
            "support {} atoms, {strays} outside {{0,1/3,2/3,1}}; mass on targets {on:.6}, within one cell {near:.6}; \
             largest stray cell {big_i} weight {big_w:.3e}; renormalized tuples {normalized} (NON-GUARANTEED)",
            nu.len()
        ),
    ))
}

fn eo_projection() -> Check {
    let s = system("eo_extension");
    let mut detail = Vec::new();
    let mut ok = true;
    for px in [350, 500] {
        let g = Arc::new(Grid::for_pixels(s.domain().to_vec(), &[px, px]).map_err(e)?);
        let ds = DiscretizedSystem::new(s.clone(), g.clone()).map_err(e)?;
        let (nu, _) = ds.run_measure(&center_dirac(&g), 25).map_err(e)?;
        let p = project_measure(&nu, 0).map_err(e)?;
        let v = integrate(&p, &Expr::parse("x1^2").map_err(e)?).map_err(e)?;
        let err = (v - 0.12177521930).abs();
        ok &= err <= 1e-3;
        detail.push(format!("{px}px ∫x²={v:.11} err={err:.1e}"));
    }
    let f = Expr::parse("x1^2").map_err(e)?;
    let c = chaos_game_average(&s, &f, 10000, &[0.5], 2024).map_err(e)?;
    let err = (c - 0.12177521930).abs();
    ok &= err <= 5e-2;
    detail.push(format!("chaos(seed 2024)={c:.10} err={err:.1e}"));
    Ok((ok, detail.join(", ")))
}

fn support_identity_random() -> Check {
    let mut r = rng(0x5eed);
    let mut worst_mass = 0.0f64;
    for k in 0..50 {
        let text = random_affine_text(&mut r);
        let s = parse_system(&text).map_err(|err| format!("system {k}: {err}\n{text}"))?;
        let (g, nu0) = random_start(&mut r, &s);
        let ds = DiscretizedSystem::new(s, g).map_err(e)?;
        let mut bad = None;
        ds.run_measure_with(&nu0, 5, |prev, next| {
            let k_set = ds.hutchinson_step_cells(&prev.support_cells())?;
            if k_set != next.support_cells() {
                bad = Some("support mismatch");
            }
            Ok(())
        })
        .map_err(e)?
        .1
        .iter()
        .for_each(|rec| worst_mass = worst_mass.max(rec.mass_err.abs()));
        if let Some(why) = bad {
            return Ok((false, format!("system {k}: {why}\n{text}")));
        }
    }
    Ok((worst_mass <= 1e-9, format!("50 systems × 5 steps; worst |mass−1| {worst_mass:.1e}")))
}

fn mass_conservation() -> Check {
    let mut worst = 0.0f64;
    for name in ["barnsley", "filip", "miculescu", "sine_a", "eo_gifs"] {
        let s = system(name);
        let px = if s.dim() == 2 { vec![64; 2] } else { vec![400] };
        let g = Arc::new(Grid::for_pixels(s.domain().to_vec(), &px).map_err(e)?);
        let ds = DiscretizedSystem::new(s, g.clone()).map_err(e)?;
        let (_, log) = ds.run_measure(&center_dirac(&g), 8).map_err(e)?;
        for r in log {
            worst = worst.max(r.mass_err.abs());
        }
    }
    Ok((worst <= 1e-9, format!("worst per-step |mass−1| {worst:.2e}")))
}

fn error_bound_1d() -> Check {
    let s = system("moment");
    let alpha = 1.0 / 3.0;
    let run = |eps: f64, n: usize| -> Result<DiscreteMeasure, String> {
        let g = Arc::new(Grid::new(vec![Interval::new(0.0, 1.0)], eps).map_err(e)?);
        let ds = DiscretizedSystem::new(s.clone(), g.clone()).map_err(e)?;
        Ok(ds.run_measure(&center_dirac(&g), n).map_err(e)?.0)
    };
    let mut slack = f64::INFINITY;
    let mut line = String::new();
    for n in 1..=8 {
        let fixed = |eps: f64, n: usize| {
            plan_resolution(None, alpha, 1.0, PlanMode::Fixed { epsilon: eps, iters: n }).unwrap()
        };
        let (b, br) = (fixed(1.0 / 300.0, n).bound, fixed(1.0 / 30000.0, 3 * n).bound);
        let w = run(1.0 / 300.0, n)?.w1_distance_1d(&run(1.0 / 30000.0, 3 * n)?).map_err(e)?;
        if b + br - w < slack {
            slack = b + br - w;
            line = format!("tightest N={n}: W1={w:.3e} ≤ {b:.3e} + {br:.3e}");
        }
    }
    Ok((slack >= 0.0, line))
}

fn determinism() -> Check {
    let s = system("filip");
    let g = Arc::new(Grid::for_pixels(s.domain().to_vec(), &[96, 96]).map_err(e)?);
    let cfg = RenderConfig::new(vec![96, 96]).map_err(e)?;
    let mut outs = Vec::new();
    for workers in [1, 3] {
        let ds = DiscretizedSystem::new(s.clone(), g.clone()).map_err(e)?.with_workers(workers);
        let (nu, _) = ds.run_measure(&center_dirac(&g), 6).map_err(e)?;
        outs.push((nu.to_csv(), measure_pgm(&nu, &cfg).map_err(e)?));
    }
    Ok((
        outs[0] == outs[1],
        format!("CSV {} bytes, PGM {} bytes, workers 1 vs 3", outs[0].0.len(), outs[0].1.len()),
    ))
}

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/filip_256_support.pgm")
}

fn filip() -> Check {
    let start = Instant::now();
    let s = system("filip");
    let g = Arc::new(Grid::for_pixels(s.domain().to_vec(), &[256, 256]).map_err(e)?);
    let ds = DiscretizedSystem::new(s, g.clone()).map_err(e)?;
    let mut identity = true;
    let (nu, _) = ds
        .run_measure_with(&center_dirac(&g), 12, |prev, next| {
            identity &= ds.hutchinson_step_cells(&prev.support_cells())? == next.support_cells();
            Ok(())
        })
        .map_err(e)?;
    let secs = start.elapsed().as_secs_f64();
    let mask = set_pgm(&g, &nu.support_cells(), &[256, 256]).map_err(e)?;
    let path = golden_path();
    if std::env::var_os("GIFS_BLESS").is_some() {
        std::fs::write(&path, &mask).map_err(e)?;
    }
    let golden = std::fs::read(&path).map_err(|err| format!("{}: {err}", path.display()))?;
    let (_, _, a) = parse_pgm(&mask).map_err(e)?;
    let (_, _, b) = parse_pgm(&golden).map_err(e)?;
    let inter = a.iter().zip(&b).filter(|(x, y)| **x == 0 && **y == 0).count();
    let union = a.iter().zip(&b).filter(|(x, y)| **x == 0 || **y == 0).count();
    let overlap = inter as f64 / union.max(1) as f64;
    Ok((
        identity && secs < 60.0 && overlap >= 0.99,
        format!(
            "support {} atoms, identity every step: {identity}, {secs:.1} s, mask overlap {:.4}",
            nu.len(),
            overlap
        ),
    ))
}

struct Criterion {
    name: &'static str,
    budget: Option<f64>,
    run: fn() -> Check,
}

fn main() {
    let criteria = [
        Criterion { name: "resolution-bound-table", budget: None, run: bound_table },
        Criterion { name: "moments-fine", budget: Some(10.0), run: moments_fine },
        Criterion { name: "moments-desk", budget: Some(10.0), run: moments_desk },
        Criterion { name: "wasserstein-sine", budget: Some(30.0), run: wasserstein },
        Criterion { name: "lyapunov-sine", budget: Some(30.0), run: lyapunov_sine },
        Criterion { name: "period-two-counterexample", budget: None, run: period_two },
        Criterion { name: "place-dependent-miculescu", budget: Some(5.0), run: miculescu },
        Criterion { name: "heuristic-conze-support", budget: None, run: conze },
        Criterion { name: "projected-measure-eo", budget: None, run: eo_projection },
        Criterion { name: "property-support-identity", budget: None, run: support_identity_random },
        Criterion { name: "property-mass-conservation", budget: None, run: mass_conservation },
        Criterion { name: "property-error-bound-1d", budget: None, run: error_bound_1d },
        Criterion { name: "property-determinism", budget: None, run: determinism },
        Criterion { name: "gifs-filip", budget: Some(60.0), run: filip },
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut unexpected = 0;
    for c in &criteria {
        if !only.is_empty() && !only.iter().any(|o| c.name.contains(o.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = (c.run)();
        let secs = start.elapsed().as_secs_f64();
        let (mut pass, mut detail) = match outcome {
            Ok(r) => r,
            Err(msg) => (false, format!("error: {msg}")),
        };
        if let Some(b) = c.budget {
            if secs >= b {
                pass = false;
                detail.push_str(&format!(" [over the {b} s budget]"));
            }
        }
        let known = KNOWN_RED.contains(&c.name);
        let tag = match (pass, known) {
            (true, false) => "PASS",
            (false, false) => {
                unexpected += 1;
                "FAIL"
            }
            (false, true) => "FAIL (known, see notes)",
            (true, true) => {
                unexpected += 1;
                "PASS (unexpected: remove from KNOWN_RED)"
            }
        };
        println!("{tag} {} ({secs:.2} s): {detail}", c.name);
    }
    if unexpected > 0 {
        println!("{unexpected} unexpected result(s)");
        std::process::exit(1);
    }
}

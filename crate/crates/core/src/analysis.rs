//! Quantities computed from discrete measures: integrals, moments,
//! Wasserstein comparisons, Lyapunov exponents, projections and chaos-game
//! averages.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::grid::GridIndex;
use crate::measure::DiscreteMeasure;
use crate::sum::CompensatedSum;
use crate::system::SystemSpec;

/// Smallest derivative magnitude accepted by [`lyapunov`].
pub const MIN_DERIVATIVE: f64 = 1e-14;

/// A report value with 17 significant digits.
pub fn format_value(v: f64) -> String {
    format!("{v:.16e}")
}

/// `name=value` report line.
pub fn report_line(name: &str, v: f64) -> String {
    format!("{name}={}", format_value(v))
}

fn check_integrand(nu: &DiscreteMeasure, g: &Expr) -> Result<()> {
    let d = nu.grid().dim();
    if g.max_var() > d {
        return Err(Error::Dimension(format!(
            "integrand uses x{} on a {d}-dimensional measure",
            g.max_var()
        )));
    }
    Ok(())
}

/// `Σ_k ν_k · g(y_k)`, summed in lexicographic order of the atoms.
pub fn integrate(nu: &DiscreteMeasure, g: &Expr) -> Result<f64> {
    check_integrand(nu, g)?;
    let grid = nu.grid();
    let mut y = vec![0.0; grid.dim()];
    let mut acc = CompensatedSum::new();
    for &(cell, w) in nu.atoms() {
        grid.cell_coords(cell, &mut y);
        acc.add(w * g.eval(&y)?);
    }
    Ok(acc.value())
}

fn require_1d(nu: &DiscreteMeasure, what: &str) -> Result<()> {
    if nu.grid().dim() != 1 {
        return Err(Error::Dimension(format!(
            "{what} needs a 1-dimensional measure, got dimension {}",
            nu.grid().dim()
        )));
    }
    Ok(())
}

/// Hausdorff moments `γ₀, …, γ_{n_max}` of a 1-D measure.
pub fn moments(nu: &DiscreteMeasure, n_max: usize) -> Result<Vec<f64>> {
    require_1d(nu, "moments")?;
    let grid = nu.grid();
    let mut acc = vec![CompensatedSum::new(); n_max + 1];
    let mut y = [0.0];
    for &(cell, w) in nu.atoms() {
        grid.cell_coords(cell, &mut y);
        let mut pow = 1.0;
        for a in acc.iter_mut() {
            a.add(w * pow);
            pow *= y[0];
        }
    }
    Ok(acc.iter().map(CompensatedSum::value).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WassersteinReport {
    /// `|γ₁(ν₂) − γ₁(ν₁)|`, which equals W1 under stochastic ordering.
    pub mean_difference: f64,
    /// Exact 1-D W1 distance.
    pub w1: f64,
}

impl fmt::Display for WassersteinReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", report_line("mean_difference", self.mean_difference))?;
        write!(f, "{}", report_line("w1", self.w1))
    }
}

/// Mean difference of two 1-D measures, reported together with the exact W1
/// distance so a failed ordering hypothesis is visible.
pub fn wasserstein_means(nu1: &DiscreteMeasure, nu2: &DiscreteMeasure) -> Result<WassersteinReport> {
    require_1d(nu1, "wasserstein_means")?;
    require_1d(nu2, "wasserstein_means")?;
    let m1 = moments(nu1, 1)?[1];
    let m2 = moments(nu2, 1)?[1];
    Ok(WassersteinReport {
        mean_difference: (m2 - m1).abs(),
        w1: nu1.w1_distance_1d(nu2)?,
    })
}

/// Finite-difference derivative of a 1-D map, one-sided at the domain
/// ends.
fn derivative(s: &SystemSpec, j: usize, x: f64) -> Result<f64> {
    let h = 1e-6 * x.abs().max(1.0);
    let dom = s.domain()[0];
    let f = |t: f64| s.eval_map(j, &[t]).map(|v| v[0]);
    if x - h < dom.lo {
        Ok((f(x + h)? - f(x)?) / h)
    } else if x + h > dom.hi {
        Ok((f(x)? - f(x - h)?) / h)
    } else {
        Ok((f(x + h)? - f(x - h)?) / (2.0 * h))
    }
}

/// `χ = −Σ_k ν_k Σᵢ pᵢ log|φᵢ′(y_k)|` for a 1-D IFS with constant
/// probabilities.
pub fn lyapunov(s: &SystemSpec, nu: &DiscreteMeasure) -> Result<f64> {
    if s.dim() != 1 || s.arity() != 1 {
        return Err(Error::Unsupported(
            "Lyapunov exponents need a 1-dimensional system of arity 1".into(),
        ));
    }
    require_1d(nu, "lyapunov")?;
    let probs = s
        .probs()
        .iter()
        .map(|p| p.constant())
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::Unsupported("Lyapunov exponents need constant probabilities".into()))?;
    let grid = nu.grid();
    let mut y = [0.0];
    let mut acc = CompensatedSum::new();
    for &(cell, w) in nu.atoms() {
        grid.cell_coords(cell, &mut y);
        let x = y[0];
        let mut inner = CompensatedSum::new();
        for (j, &p) in probs.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let d = derivative(s, j, x)?;
            if !(d.abs() >= MIN_DERIVATIVE) {
                return Err(Error::SingularDerivative {
                    map: j + 1,
                    x,
                    value: d.abs(),
                });
            }
            inner.add(p * d.abs().ln());
        }
        acc.add(w * inner.value());
    }
    Ok(-acc.value())
}

/// Image of `nu` under the coordinate projection onto `axis`.
pub fn project_measure(nu: &DiscreteMeasure, axis: usize) -> Result<DiscreteMeasure> {
    let target = Arc::new(nu.grid().axis(axis)?);
    nu.pushforward(target, |idx| GridIndex::new(vec![idx.0[axis]]))
}

/// Birkhoff average `(1/N) Σ_{n<N} f(x_n)` along a random orbit
/// `x_{n+1} = φ_{j_n}(x_n)`.
///
/// The map indices are drawn i.i.d. from the constant probabilities with
/// `ChaCha8Rng::seed_from_u64(seed)` (rand_chacha): one `f64` uniform
/// in `[0,1)` per step, mapped to the first index whose cumulative
/// probability exceeds it. A one-coordinate `x0` is repeated across all
/// coordinates. `f` is a function of `x1..xd`, so on an extension system
/// `x1^2` reads the first coordinate.
pub fn chaos_game_average(
    s: &SystemSpec,
    f: &Expr,
    steps: usize,
    x0: &[f64],
    seed: u64,
) -> Result<f64> {
    if s.arity() != 1 {
        return Err(Error::Unsupported("the chaos game needs a system of arity 1".into()));
    }
    let d = s.dim();
    if f.max_var() > d {
        return Err(Error::Dimension(format!("f uses x{} in dimension {d}", f.max_var())));
    }
    let probs = s
        .probs()
        .iter()
        .map(|p| p.constant())
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::Unsupported("the chaos game needs constant probabilities".into()))?;
    if steps == 0 {
        return Err(Error::Config("the chaos game needs at least one step".into()));
    }
    let mut x = match x0.len() {
        1 => vec![x0[0]; d],
        n if n == d => x0.to_vec(),
        n => return Err(Error::Dimension(format!("x0 has {n} coordinates, system has {d}"))),
    };
    let mut cumulative = Vec::with_capacity(probs.len());
    let mut c = 0.0;
    for p in &probs {
        c += p;
        cumulative.push(c);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut next = vec![0.0; d];
    let mut acc = CompensatedSum::new();
    for _ in 0..steps {
        acc.add(f.eval(&x)?);
        let u: f64 = rng.gen();
        let j = cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(probs.len() - 1);
        s.eval_map_into(j, &x, &mut next)?;
        std::mem::swap(&mut x, &mut next);
    }
    Ok(acc.value() / steps as f64)
}

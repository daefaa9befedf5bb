//! Shared oracles and generators for the integration tests.
#![allow(dead_code)]

use std::sync::Arc;

use discrete_hutchinson::{parse_system, CellId, DiscreteMeasure, Grid, Interval, SystemSpec};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn system(name: &str) -> SystemSpec {
    let path = format!("{}/systems/{name}.ifs", env!("CARGO_MANIFEST_DIR"));
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{path}: {e}"));
    parse_system(&text).unwrap_or_else(|e| panic!("{path}: {e}"))
}

pub fn system_path(name: &str) -> String {
    format!("{}/systems/{name}.ifs", env!("CARGO_MANIFEST_DIR"))
}

/// Exact moments of the invariant measure of `x/3` (weight 1/3) and
/// `x/3 + 2/3` (weight 2/3). Taking `∫xⁿ` of the invariance equation gives
/// `γₙ (1 − 3⁻ⁿ) = (2/3) Σ_{k<n} C(n,k) 3⁻ᵏ (2/3)ⁿ⁻ᵏ γₖ`.
pub fn exact_moments(n_max: usize) -> Vec<BigRational> {
    let r = |a: i64, b: i64| BigRational::new(BigInt::from(a), BigInt::from(b));
    let third = r(1, 3);
    let two_thirds = r(2, 3);
    let pow = |x: &BigRational, k: usize| (0..k).fold(BigRational::one(), |acc, _| acc * x);
    let mut binom = vec![vec![BigInt::one()]];
    for n in 1..=n_max {
        let prev = &binom[n - 1];
        let mut row = vec![BigInt::one(); n + 1];
        for k in 1..n {
            row[k] = &prev[k - 1] + &prev[k];
        }
        binom.push(row);
    }
    let mut g: Vec<BigRational> = vec![BigRational::one()];
    for n in 1..=n_max {
        let mut rhs = BigRational::zero();
        for k in 0..n {
            let c = BigRational::from_integer(binom[n][k].clone());
            rhs += c * pow(&third, k) * pow(&two_thirds, n - k) * &g[k];
        }
        rhs *= &two_thirds;
        let lhs = BigRational::one() - pow(&third, n);
        g.push(rhs / lhs);
    }
    g
}

pub fn to_f64(q: &BigRational) -> f64 {
    q.to_f64().expect("finite rational")
}

/// A random affine system with constant probabilities that maps the unit
/// box into itself, as parseable text.
pub fn random_affine_text(rng: &mut ChaCha8Rng) -> String {
    let d = rng.gen_range(1..=2);
    let m = rng.gen_range(1..=2);
    let l = rng.gen_range(1..=4);
    let nvars = m * d;
    let mut text = format!("dim = {d}\narity = {m}\ndomain = {}\n", vec!["0 1"; d].join("; "));
    let weights: Vec<f64> = (0..l).map(|_| rng.gen_range(0.1..1.0)).collect();
    let total: f64 = weights.iter().sum();
    for w in &weights {
        let mut rows = Vec::new();
        for _ in 0..d {
            let coeffs: Vec<f64> = (0..nvars)
                .map(|_| rng.gen_range(-0.9..0.9) / nvars as f64)
                .collect();
            let lo: f64 = coeffs.iter().map(|c| c.min(0.0)).sum();
            let hi: f64 = coeffs.iter().map(|c| c.max(0.0)).sum();
            let offset = -lo + rng.gen_range(0.0..1.0) * (1.0 - (hi - lo));
            let mut terms: Vec<String> = coeffs
                .iter()
                .enumerate()
                .map(|(v, c)| format!("({c:?})*x{}", v + 1))
                .collect();
            terms.push(format!("({offset:?})"));
            rows.push(terms.join(" + "));
        }
        text.push_str(&format!("map: {}\nprob: {:?}\n", rows.join(", "), w / total));
    }
    text
}

/// Grid and initial measure for a random system.
pub fn random_start(rng: &mut ChaCha8Rng, s: &SystemSpec) -> (Arc<Grid>, DiscreteMeasure) {
    let px = rng.gen_range(12..=48);
    let grid = Arc::new(Grid::for_pixels(vec![Interval::new(0.0, 1.0); s.dim()], &vec![px; s.dim()]).unwrap());
    let atoms = rng.gen_range(1..=5);
    let cells: Vec<(CellId, f64)> = (0..atoms)
        .map(|_| (CellId(rng.gen_range(0..grid.len())), rng.gen_range(0.1..1.0)))
        .collect();
    let total: f64 = cells.iter().map(|c| c.1).sum();
    let cells = cells.into_iter().map(|(c, w)| (c, w / total)).collect();
    let nu = DiscreteMeasure::from_cells(grid.clone(), cells).unwrap();
    (grid, nu)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

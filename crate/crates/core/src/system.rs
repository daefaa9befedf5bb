//! IFS and GIFS descriptions: maps `φⱼ: X^m → X`, probabilities, the
//! domain box and the contraction vector `(a₀,…,a_{m−1})`.
//!
//! Arguments of a map are concatenated argument-major: for `m = 2`, `d = 2`
//! the variables are `x1, x2` (first point) and `x3, x4` (second point).
//!
//! Text format (`#` starts a comment):
//!
//! ```text
//! dim = 2
//! arity = 1
//! domain = 0 1; 0 1
//! contraction = 0.5          # optional
//! map: 0.5*x1, 0.5*x2
//! prob: 0.1
//! map: 0.5*x1 + 0.5, 0.5*x2
//! prob: 0.9
//! ```

use std::fmt::Write as _;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::grid::Interval;

/// Tolerance on `Σ pⱼ = 1` for constant probabilities.
pub const CONST_PROB_TOL: f64 = 1e-12;
/// Tolerance on `Σ pⱼ(args) = 1` for place-dependent probabilities.
pub const PLACE_PROB_TOL: f64 = 1e-9;
/// Number of low-discrepancy points used to check that maps keep the box.
const BOX_SAMPLES: usize = 1000;
/// Above this many variables only the sample (not all corners) is checked.
const MAX_CORNER_VARS: usize = 14;

/// Affine fast path `y = offset + Σᵢ Aᵢ·xᵢ` with `Aᵢ` the d×d block for
/// argument `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap {
    dim: usize,
    arity: usize,
    /// Row-major `d × (m·d)`.
    matrix: Vec<f64>,
    offset: Vec<f64>,
}

impl AffineMap {
    pub fn new(dim: usize, arity: usize, matrix: Vec<f64>, offset: Vec<f64>) -> Self {
        assert_eq!(matrix.len(), dim * dim * arity);
        assert_eq!(offset.len(), dim);
        AffineMap {
            dim,
            arity,
            matrix,
            offset,
        }
    }

    pub fn offset(&self) -> &[f64] {
        &self.offset
    }

    pub fn coeff(&self, row: usize, var: usize) -> f64 {
        self.matrix[row * self.dim * self.arity + var]
    }

    /// Row `row` of block `arg` applied to the point `y` (length d).
    #[inline]
    pub fn block_dot(&self, row: usize, arg: usize, y: &[f64]) -> f64 {
        let base = row * self.dim * self.arity + arg * self.dim;
        let mut acc = 0.0;
        for (l, &t) in y.iter().enumerate() {
            acc += self.matrix[base + l] * t;
        }
        acc
    }

    /// Evaluates the map; `args` holds the m points concatenated.
    #[inline]
    pub fn apply(&self, args: &[f64], out: &mut [f64]) {
        let d = self.dim;
        for (r, o) in out.iter_mut().enumerate() {
            let mut acc = self.offset[r];
            for i in 0..self.arity {
                acc += self.block_dot(r, i, &args[i * d..(i + 1) * d]);
            }
            *o = acc;
        }
    }

    /// Euclidean operator norm of the block for argument `arg`.
    pub fn block_norm(&self, arg: usize) -> f64 {
        let d = self.dim;
        let block = DMatrix::from_fn(d, d, |r, c| self.coeff(r, arg * d + c));
        block
            .singular_values()
            .iter()
            .fold(0.0f64, |m, &s| m.max(s))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapDef {
    outputs: Vec<Expr>,
    affine: Option<AffineMap>,
}

impl MapDef {
    /// Builds the map and detects the affine fast path.
    pub fn new(outputs: Vec<Expr>, dim: usize, arity: usize) -> Self {
        let nvars = dim * arity;
        let forms: Option<Vec<_>> = outputs.iter().map(|e| e.affine(nvars)).collect();
        let affine = forms.filter(|f| f.len() == dim).map(|forms| {
            let mut matrix = Vec::with_capacity(dim * nvars);
            let mut offset = Vec::with_capacity(dim);
            for f in forms {
                matrix.extend_from_slice(&f.coeffs);
                offset.push(f.offset);
            }
            AffineMap::new(dim, arity, matrix, offset)
        });
        MapDef { outputs, affine }
    }

    pub fn outputs(&self) -> &[Expr] {
        &self.outputs
    }

    pub fn affine(&self) -> Option<&AffineMap> {
        self.affine.as_ref()
    }

    fn eval_tree(&self, args: &[f64], out: &mut [f64]) -> Result<()> {
        for (o, e) in out.iter_mut().zip(&self.outputs) {
            *o = e.eval(args)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProbabilityDef {
    Constant(f64),
    /// Place-dependent probability, a function of the source arguments.
    Expr(Expr),
}

impl ProbabilityDef {
    pub fn constant(&self) -> Option<f64> {
        match self {
            ProbabilityDef::Constant(p) => Some(*p),
            ProbabilityDef::Expr(_) => None,
        }
    }
}

/// Whether resolution guarantees can be claimed for a system.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Contraction vector known and `α < 1`.
    Guaranteed,
    /// No δ claim: `α ≥ 1` or no contraction vector available.
    Heuristic,
}

#[derive(Debug, Clone)]
pub struct SystemSpec {
    dim: usize,
    arity: usize,
    domain: Vec<Interval>,
    maps: Vec<MapDef>,
    probs: Vec<ProbabilityDef>,
    declared: Option<Vec<f64>>,
    contraction: Option<Vec<f64>>,
}

impl SystemSpec {
    /// Validates and assembles a system. `contraction` is the user-declared
    /// vector; when absent it is derived for affine systems.
    pub fn new(
        dim: usize,
        arity: usize,
        domain: Vec<Interval>,
        maps: Vec<MapDef>,
        probs: Vec<ProbabilityDef>,
        contraction: Option<Vec<f64>>,
    ) -> Result<Self> {
        if dim == 0 || arity == 0 {
            return Err(Error::Config("dim and arity must be positive".into()));
        }
        if domain.len() != dim {
            return Err(Error::Dimension(format!(
                "domain has {} intervals, dim = {dim}",
                domain.len()
            )));
        }
        if let Some(iv) = domain.iter().find(|iv| !(iv.lo < iv.hi)) {
            return Err(Error::Config(format!("empty domain interval [{}, {}]", iv.lo, iv.hi)));
        }
        if maps.is_empty() {
            return Err(Error::Config("a system needs at least one map".into()));
        }
        if maps.len() != probs.len() {
            return Err(Error::Config(format!(
                "{} maps but {} probabilities",
                maps.len(),
                probs.len()
            )));
        }
        let nvars = dim * arity;
        for (j, m) in maps.iter().enumerate() {
            if m.outputs.len() != dim {
                return Err(Error::Dimension(format!(
                    "map {} has {} outputs, dim = {dim}",
                    j + 1,
                    m.outputs.len()
                )));
            }
            if let Some(v) = m.outputs.iter().map(Expr::max_var).max().filter(|&v| v > nvars) {
                return Err(Error::Dimension(format!(
                    "map {} uses x{v}, only x1..x{nvars} exist",
                    j + 1
                )));
            }
        }
        let mut all_constant = true;
        let mut sum = 0.0;
        for (j, p) in probs.iter().enumerate() {
            match p {
                ProbabilityDef::Constant(c) => {
                    if !(*c > 0.0 && *c <= 1.0) {
                        return Err(Error::Probability(format!(
                            "p{} = {c} is not in (0, 1]",
                            j + 1
                        )));
                    }
                    sum += c;
                }
                ProbabilityDef::Expr(e) => {
                    all_constant = false;
                    if e.max_var() > nvars {
                        return Err(Error::Dimension(format!(
                            "p{} uses x{}, only x1..x{nvars} exist",
                            j + 1,
                            e.max_var()
                        )));
                    }
                }
            }
        }
        if all_constant && (sum - 1.0).abs() > CONST_PROB_TOL {
            return Err(Error::Probability(format!(
                "probabilities sum to {sum}, expected 1"
            )));
        }
        if let Some(c) = &contraction {
            if c.len() != arity {
                return Err(Error::Dimension(format!(
                    "contraction has {} entries, arity = {arity}",
                    c.len()
                )));
            }
            if c.iter().any(|&a| !(a >= 0.0) || !a.is_finite()) {
                return Err(Error::Config("contraction entries must be nonnegative".into()));
            }
        }
        let mut spec = SystemSpec {
            dim,
            arity,
            domain,
            maps,
            probs,
            declared: contraction.clone(),
            contraction,
        };
        if spec.contraction.is_none() && spec.is_affine() {
            spec.contraction = Some(spec.affine_bound());
        }
        spec.check_maps()?;
        Ok(spec)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn domain(&self) -> &[Interval] {
        &self.domain
    }

    pub fn maps(&self) -> &[MapDef] {
        &self.maps
    }

    pub fn probs(&self) -> &[ProbabilityDef] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn is_affine(&self) -> bool {
        self.maps.iter().all(|m| m.affine.is_some())
    }

    pub fn has_constant_probs(&self) -> bool {
        self.probs.iter().all(|p| p.constant().is_some())
    }

    /// Contraction vector in use (declared or derived).
    pub fn contraction(&self) -> Option<&[f64]> {
        self.contraction.as_deref()
    }

    /// `α = Σ aᵢ`, if a contraction vector is known.
    pub fn alpha(&self) -> Option<f64> {
        self.contraction.as_ref().map(|c| c.iter().sum())
    }

    pub fn mode(&self) -> Mode {
        match self.alpha() {
            Some(a) if a < 1.0 => Mode::Guaranteed,
            _ => Mode::Heuristic,
        }
    }

    /// Euclidean diameter bound of the domain: max extent times √d.
    pub fn domain_diameter(&self) -> f64 {
        let widest = self.domain.iter().map(Interval::extent).fold(0.0, f64::max);
        widest * (self.dim as f64).sqrt()
    }

    /// Evaluates `φⱼ` at the concatenated arguments.
    pub fn eval_map_into(&self, j: usize, args: &[f64], out: &mut [f64]) -> Result<()> {
        let map = self.map(j)?;
        self.check_args(args)?;
        match &map.affine {
            Some(a) => a.apply(args, out),
            None => map.eval_tree(args, out)?,
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Eval(format!("map {} is not finite at {args:?}", j + 1)));
        }
        Ok(())
    }

    pub fn eval_map(&self, j: usize, args: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        self.eval_map_into(j, args, &mut out)?;
        Ok(out)
    }

    /// Raw value of `pⱼ` at the arguments, without the vector checks.
    pub fn eval_prob(&self, j: usize, args: &[f64]) -> Result<f64> {
        self.map(j)?;
        match &self.probs[j] {
            ProbabilityDef::Constant(p) => Ok(*p),
            ProbabilityDef::Expr(e) => {
                self.check_args(args)?;
                e.eval(args)
            }
        }
    }

    /// All probabilities at `args`, checked for nonnegativity and unit sum.
    ///
    /// With `normalize` set, a vector whose sum is off is rescaled instead
    /// of rejected; the returned flag reports that this happened.
    pub fn prob_vector(&self, args: &[f64], normalize: bool, out: &mut [f64]) -> Result<bool> {
        let mut sum = 0.0;
        for (j, o) in out.iter_mut().enumerate() {
            let p = self.eval_prob(j, args)?;
            if p < 0.0 {
                return Err(Error::Probability(format!(
                    "p{} = {p} is negative at {args:?}",
                    j + 1
                )));
            }
            *o = p;
            sum += p;
        }
        if (sum - 1.0).abs() <= PLACE_PROB_TOL {
            return Ok(false);
        }
        if normalize && sum > 0.0 {
            out.iter_mut().for_each(|p| *p /= sum);
            return Ok(true);
        }
        Err(Error::Probability(format!(
            "probabilities sum to {sum} at {args:?}"
        )))
    }

    /// Contraction vector: derived from the affine blocks, or the declared
    /// one for non-affine maps.
    pub fn lipschitz_bound(&self) -> Result<Vec<f64>> {
        if self.is_affine() {
            return Ok(self.affine_bound());
        }
        self.declared.clone().ok_or_else(|| {
            Error::Config(
                "maps are not affine; declare `contraction = ...` in the system file".into(),
            )
        })
    }

    fn affine_bound(&self) -> Vec<f64> {
        (0..self.arity)
            .map(|i| {
                self.maps
                    .iter()
                    .filter_map(|m| m.affine.as_ref())
                    .map(|a| a.block_norm(i))
                    .fold(0.0, f64::max)
            })
            .collect()
    }

    fn map(&self, j: usize) -> Result<&MapDef> {
        self.maps
            .get(j)
            .ok_or_else(|| Error::Range(format!("map {j} of {}", self.maps.len())))
    }

    fn check_args(&self, args: &[f64]) -> Result<()> {
        if args.len() != self.dim * self.arity {
            return Err(Error::Dimension(format!(
                "{} argument coordinates given, expected {}",
                args.len(),
                self.dim * self.arity
            )));
        }
        Ok(())
    }

    /// Deterministic sample of `(box)^m`: all corners (when few enough)
    /// followed by a Halton sequence.
    pub fn sample_tuples(&self, count: usize) -> Vec<Vec<f64>> {
        let nvars = self.dim * self.arity;
        let iv = |v: usize| self.domain[v % self.dim];
        let mut out = Vec::new();
        if nvars <= MAX_CORNER_VARS {
            for mask in 0u64..(1u64 << nvars) {
                out.push(
                    (0..nvars)
                        .map(|v| if mask >> v & 1 == 1 { iv(v).hi } else { iv(v).lo })
                        .collect(),
                );
            }
        }
        for n in 1..=count {
            out.push(
                (0..nvars)
                    .map(|v| {
                        let u = halton(n as u64, nth_prime(v));
                        iv(v).lo + u * iv(v).extent()
                    })
                    .collect(),
            );
        }
        out
    }

    fn check_maps(&self) -> Result<()> {
        let mut out = vec![0.0; self.dim];
        let mut tree = vec![0.0; self.dim];
        for args in self.sample_tuples(BOX_SAMPLES) {
            for (j, m) in self.maps.iter().enumerate() {
                self.eval_map_into(j, &args, &mut out)?;
                if m.affine.is_some() {
                    m.eval_tree(&args, &mut tree)?;
                    for (a, t) in out.iter().zip(&tree) {
                        if (a - t).abs() > 1e-12 * (1.0 + t.abs()) {
                            return Err(Error::Config(format!(
                                "affine form of map {} disagrees with its expression at {args:?}",
                                j + 1
                            )));
                        }
                    }
                }
                for (k, &y) in out.iter().enumerate() {
                    let iv = self.domain[k];
                    if !iv.contains(y, 1e-12 * (1.0 + iv.extent())) {
                        return Err(Error::OutOfBox {
                            map: j + 1,
                            point: args.clone(),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Renders the system in the text format accepted by [`parse_system`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "dim = {}", self.dim);
        let _ = writeln!(s, "arity = {}", self.arity);
        let domain: Vec<String> = self
            .domain
            .iter()
            .map(|iv| format!("{:?} {:?}", iv.lo, iv.hi))
            .collect();
        let _ = writeln!(s, "domain = {}", domain.join("; "));
        if let Some(c) = &self.declared {
            let c: Vec<String> = c.iter().map(|a| format!("{a:?}")).collect();
            let _ = writeln!(s, "contraction = {}", c.join(" "));
        }
        for (m, p) in self.maps.iter().zip(&self.probs) {
            let outs: Vec<String> = m.outputs.iter().map(|e| e.to_string()).collect();
            let _ = writeln!(s, "map: {}", outs.join(", "));
            match p {
                ProbabilityDef::Constant(c) => {
                    let _ = writeln!(s, "prob: {c:?}");
                }
                ProbabilityDef::Expr(e) => {
                    let _ = writeln!(s, "prob: {e}");
                }
            }
        }
        s
    }
}

fn nth_prime(n: usize) -> u64 {
    let mut count = 0;
    let mut k = 1u64;
    loop {
        k += 1;
        if (2..k).take_while(|d| d * d <= k).all(|d| !k.is_multiple_of(d)) {
            if count == n {
                return k;
            }
            count += 1;
        }
    }
}

fn halton(mut n: u64, base: u64) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while n > 0 {
        f /= base as f64;
        r += f * (n % base) as f64;
        n /= base;
    }
    r
}

/// Splits on commas that are not inside parentheses; yields (offset, piece).
fn split_top_level(s: &str) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut start = 0;
    for (i, c) in s.char_indices() {
        match c {
            '(' => depth += 1,
            ')' => depth -= 1,
            ',' if depth == 0 => {
                out.push((start, &s[start..i]));
                start = i + 1;
            }
            _ => {}
        }
    }
    out.push((start, &s[start..]));
    out
}

fn char_col(line: &str, byte_offset: usize) -> usize {
    line[..byte_offset].chars().count() + 1
}

fn parse_const(text: &str, line: usize, col: usize) -> Result<f64> {
    let e = Expr::parse_at(text, line, col)?;
    if !e.is_constant() {
        return Err(Error::Syntax {
            line,
            column: col,
            message: format!("'{text}' must be a constant"),
        });
    }
    e.eval(&[])
}

/// Whitespace-separated constants with their columns.
fn parse_consts(line_text: &str, start: usize, text: &str, line: usize) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    let mut offset = 0;
    for tok in text.split_whitespace() {
        let at = text[offset..].find(tok).unwrap() + offset;
        offset = at + tok.len();
        out.push(parse_const(tok, line, char_col(line_text, start + at))?);
    }
    Ok(out)
}

/// Parses and validates a system description.
pub fn parse_system(text: &str) -> Result<SystemSpec> {
    let mut dim: Option<usize> = None;
    let mut arity = 1usize;
    let mut domain: Option<Vec<Interval>> = None;
    let mut contraction: Option<Vec<f64>> = None;
    let mut pending: Vec<(Vec<Expr>, usize)> = Vec::new();
    let mut probs: Vec<ProbabilityDef> = Vec::new();

    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let content = raw.split('#').next().unwrap_or("");
        if content.trim().is_empty() {
            continue;
        }
        let syntax = |column: usize, message: String| Error::Syntax {
            line,
            column,
            message,
        };
        let lead = content.len() - content.trim_start().len();

        if let Some(colon) = content.find(':').filter(|&c| !content[..c].contains('=')) {
            let key = content[..colon].trim();
            let body_start = colon + 1;
            let body = &content[body_start..];
            match key {
                "map" => {
                    if pending.len() > probs.len() {
                        return Err(syntax(char_col(raw, lead), "map without a prob line".into()));
                    }
                    let mut outs = Vec::new();
                    for (off, piece) in split_top_level(body) {
                        let at = body_start + off;
                        if piece.trim().is_empty() {
                            return Err(syntax(char_col(raw, at), "empty map component".into()));
                        }
                        outs.push(Expr::parse_at(piece, line, char_col(raw, at))?);
                    }
                    pending.push((outs, line));
                }
                "prob" => {
                    if pending.len() != probs.len() + 1 {
                        return Err(syntax(char_col(raw, lead), "prob without a preceding map".into()));
                    }
                    let e = Expr::parse_at(body, line, char_col(raw, body_start))?;
                    probs.push(if e.is_constant() {
                        ProbabilityDef::Constant(e.eval(&[])?)
                    } else {
                        ProbabilityDef::Expr(e)
                    });
                }
                other => {
                    return Err(syntax(char_col(raw, lead), format!("unknown entry '{other}:'")));
                }
            }
            continue;
        }

        let Some(eq) = content.find('=') else {
            return Err(syntax(char_col(raw, lead), "expected 'key = value' or 'map:'/'prob:'".into()));
        };
        let key = content[..eq].trim();
        let value_start = eq + 1;
        let value = &content[value_start..];
        let vcol = char_col(raw, value_start + (value.len() - value.trim_start().len()));
        match key {
            "dim" | "arity" => {
                let v: usize = value
                    .trim()
                    .parse()
                    .map_err(|_| syntax(vcol, format!("{key} must be a positive integer")))?;
                if v == 0 {
                    return Err(syntax(vcol, format!("{key} must be positive")));
                }
                if key == "dim" {
                    dim = Some(v);
                } else {
                    arity = v;
                }
            }
            "domain" => {
                let mut ivs = Vec::new();
                let mut off = 0;
                for part in value.split(';') {
                    let vals = parse_consts(raw, value_start + off, part, line)?;
                    if vals.len() != 2 {
                        return Err(syntax(
                            char_col(raw, value_start + off),
                            "each domain interval needs two numbers".into(),
                        ));
                    }
                    ivs.push(Interval::new(vals[0], vals[1]));
                    off += part.len() + 1;
                }
                domain = Some(ivs);
            }
            "contraction" => {
                let vals = parse_consts(raw, value_start, value, line)?;
                if vals.is_empty() {
                    return Err(syntax(vcol, "contraction needs at least one value".into()));
                }
                contraction = Some(vals);
            }
            other => return Err(syntax(char_col(raw, lead), format!("unknown key '{other}'"))),
        }
    }

    if pending.len() != probs.len() {
        let line = pending.last().map(|p| p.1).unwrap_or(0);
        return Err(Error::Syntax {
            line,
            column: 1,
            message: "map without a prob line".into(),
        });
    }
    let dim = dim.ok_or_else(|| Error::Config("missing 'dim = ...'".into()))?;
    let domain = domain.ok_or_else(|| Error::Config("missing 'domain = ...'".into()))?;
    let maps = pending
        .into_iter()
        .map(|(outs, _)| MapDef::new(outs, dim, arity))
        .collect();
    SystemSpec::new(dim, arity, domain, maps, probs, contraction)
}

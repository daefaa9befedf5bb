//! Discretized Hutchinson and Markov operators and the resolution bound.
//!
//! The discretization of `φⱼ` is `φ̂ⱼ = r ∘ φⱼ` restricted to the grid,
//! with `r` the rounding projection of [`Grid`]. One Markov step sends
//! `ν = Σ v_k δ_{y_k}` to
//!
//! ```text
//! ν' = Σⱼ Σ_{k₀…k_{m−1}} pⱼ(y_{k₀},…,y_{k_{m−1}}) · v_{k₀}⋯v_{k_{m−1}} · δ_{φ̂ⱼ(y_{k₀},…,y_{k_{m−1}})}
//! ```
//!
//! over all m-tuples of atoms. The set-valued step does the same without
//! weights.
//!
//! Accumulation is split into chunks of consecutive first-argument atoms.
//! Chunk boundaries depend only on the support size, and chunk partial sums
//! are merged in chunk order, so results do not depend on the number of
//! worker threads.

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{CellId, Grid, GridIndex};
use crate::measure::DiscreteMeasure;
use crate::sum::CompensatedSum;
use crate::system::{ProbabilityDef, SystemSpec};

/// Approximate number of tuples handled by one accumulation chunk.
const TUPLES_PER_CHUNK: u64 = 1 << 20;
/// Grids up to this many cells use dense scratch accumulators.
const DENSE_CELLS: u64 = 1 << 22;
/// φ̂ memo tables are kept when `m·d ≤ 2` and the tuple space is this small.
const MEMO_TUPLES: u64 = 1 << 24;
const MEMO_EMPTY: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PlanMode {
    /// Choose ε and N so that the bound is below δ. With `extent` given,
    /// ε is rounded down so that `extent / ε` is an integer.
    Guaranteed { extent: Option<f64> },
    /// Report the bound for a given grid spacing and iteration count.
    Fixed { epsilon: f64, iters: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResolutionPlan {
    pub delta: Option<f64>,
    pub epsilon: f64,
    pub iters: usize,
    pub alpha: f64,
    pub diameter: f64,
    /// `ε/(1−α) + αᴺ·D`; infinite when `α ≥ 1`.
    pub bound: f64,
    /// True when `α < 1` and, if δ was given, `bound < δ`.
    pub guaranteed: bool,
}

impl ResolutionPlan {
    /// The coarser limit resolution `2ε/(1−α)`.
    pub fn limit_bound(&self) -> f64 {
        if self.alpha < 1.0 {
            2.0 * self.epsilon / (1.0 - self.alpha)
        } else {
            f64::INFINITY
        }
    }
}

impl fmt::Display for ResolutionPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(d) = self.delta {
            writeln!(f, "delta={d:.16e}")?;
        }
        writeln!(f, "epsilon={:.16e}", self.epsilon)?;
        writeln!(f, "iters={}", self.iters)?;
        writeln!(f, "alpha={:.16e}", self.alpha)?;
        writeln!(f, "diameter={:.16e}", self.diameter)?;
        writeln!(f, "bound={:.16e}", self.bound)?;
        writeln!(f, "limit_bound={:.16e}", self.limit_bound())?;
        write!(
            f,
            "guaranteed={}",
            if self.guaranteed { "yes" } else { "NON-GUARANTEED" }
        )
    }
}

fn error_bound(epsilon: f64, alpha: f64, iters: usize, diameter: f64) -> f64 {
    if alpha >= 1.0 {
        return f64::INFINITY;
    }
    let tail = if iters == 0 {
        diameter
    } else {
        alpha.powi(iters.min(i32::MAX as usize) as i32) * diameter
    };
    epsilon / (1.0 - alpha) + tail
}

/// Resolution planning for the bound `ε/(1−α) + αᴺ·D < δ`.
///
/// In guaranteed mode the budget is split evenly: `ε ≤ δ(1−α)/2` and the
/// smallest N with `αᴺ·D ≤ δ/2`, increased until the bound is strictly
/// below δ.
pub fn plan_resolution(
    delta: Option<f64>,
    alpha: f64,
    diameter: f64,
    mode: PlanMode,
) -> Result<ResolutionPlan> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::Config(format!("contraction sum must be nonnegative, got {alpha}")));
    }
    if !(diameter > 0.0) || !diameter.is_finite() {
        return Err(Error::Config(format!("diameter must be positive, got {diameter}")));
    }
    match mode {
        PlanMode::Fixed { epsilon, iters } => {
            if !(epsilon > 0.0) {
                return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
            }
            let bound = error_bound(epsilon, alpha, iters, diameter);
            let guaranteed = alpha < 1.0 && delta.is_none_or(|d| bound < d);
            Ok(ResolutionPlan {
                delta,
                epsilon,
                iters,
                alpha,
                diameter,
                bound,
                guaranteed,
            })
        }
        PlanMode::Guaranteed { extent } => {
            let delta = delta
                .filter(|d| *d > 0.0 && d.is_finite())
                .ok_or_else(|| Error::Config("guaranteed mode needs a positive delta".into()))?;
            if alpha >= 1.0 {
                return Err(Error::Config(format!(
                    "contraction sum {alpha} is not below 1, so no resolution can be \
                     guaranteed; use heuristic mode with a fixed epsilon and iteration count"
                )));
            }
            let mut epsilon = delta * (1.0 - alpha) / 2.0;
            if let Some(extent) = extent.filter(|e| *e > 0.0) {
                let mut n = (extent / epsilon).ceil().max(1.0);
                while extent / n > epsilon {
                    n += 1.0;
                }
                epsilon = extent / n;
            }
            let mut iters = if alpha == 0.0 {
                1
            } else {
                let n = ((delta / (2.0 * diameter)).ln() / alpha.ln()).ceil();
                if n.is_finite() && n > 0.0 {
                    n as usize
                } else {
                    0
                }
            };
            while error_bound(epsilon, alpha, iters, diameter) >= delta {
                iters += 1;
            }
            Ok(ResolutionPlan {
                delta: Some(delta),
                epsilon,
                iters,
                alpha,
                diameter,
                bound: error_bound(epsilon, alpha, iters, diameter),
                guaranteed: true,
            })
        }
    }
}

/// One line of the iteration log.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub support: usize,
    /// Total mass before renormalization, minus one.
    pub mass_err: f64,
    pub millis: f64,
    /// Tuples whose probability vector had to be renormalized.
    pub normalized: u64,
}

impl fmt::Display for StepRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step={} support={} mass_err={:e} ms={:.3}",
            self.step, self.support, self.mass_err, self.millis
        )?;
        if self.normalized > 0 {
            write!(f, " normalized={}", self.normalized)?;
        }
        Ok(())
    }
}

/// Output of one Markov step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub measure: DiscreteMeasure,
    pub raw_mass: f64,
    pub normalized: u64,
}

/// A system together with a grid: the discretized maps `φ̂ⱼ`.
pub struct DiscretizedSystem {
    system: SystemSpec,
    grid: Arc<Grid>,
    overrides: HashMap<(usize, Vec<CellId>), CellId>,
    memo: OnceLock<Option<Vec<AtomicU64>>>,
    normalize_probs: bool,
    workers: usize,
    factor_tables: bool,
}

impl fmt::Debug for DiscretizedSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DiscretizedSystem")
            .field("grid", &self.grid)
            .field("maps", &self.system.len())
            .field("overrides", &self.overrides.len())
            .field("workers", &self.workers)
            .finish()
    }
}

impl DiscretizedSystem {
    pub fn new(system: SystemSpec, grid: Arc<Grid>) -> Result<Self> {
        if grid.dim() != system.dim() {
            return Err(Error::Dimension(format!(
                "grid is {}-dimensional, system is {}-dimensional",
                grid.dim(),
                system.dim()
            )));
        }
        if !grid.covers(system.domain()) {
            return Err(Error::Config("grid box does not cover the system domain".into()));
        }
        Ok(DiscretizedSystem {
            system,
            grid,
            overrides: HashMap::new(),
            memo: OnceLock::new(),
            normalize_probs: false,
            workers: 1,
            factor_tables: true,
        })
    }

    /// Renormalize place-dependent probability vectors that do not sum to
    /// one instead of failing.
    pub fn with_normalized_probs(mut self, on: bool) -> Self {
        self.normalize_probs = on;
        self
    }

    /// Number of worker threads used by [`DiscretizedSystem::markov_step`].
    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = workers.max(1);
        self
    }

    /// Replaces `φ̂ⱼ(args)` by `target`, for projections other than the
    /// grid's rounding rule.
    pub fn override_map(&mut self, j: usize, args: &[GridIndex], target: &GridIndex) -> Result<()> {
        if j >= self.system.len() {
            return Err(Error::Range(format!("map {j} of {}", self.system.len())));
        }
        if args.len() != self.system.arity() {
            return Err(Error::Dimension(format!(
                "{} arguments for arity {}",
                args.len(),
                self.system.arity()
            )));
        }
        let key = args
            .iter()
            .map(|a| self.grid.cell_of(a))
            .collect::<Result<Vec<_>>>()?;
        let t = self.grid.cell_of(target)?;
        self.overrides.insert((j, key), t);
        Ok(())
    }

    pub fn system(&self) -> &SystemSpec {
        &self.system
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    fn memo_table(&self) -> Option<&[AtomicU64]> {
        self.memo
            .get_or_init(|| {
                let s = &self.system;
                if s.dim() * s.arity() > 2 {
                    return None;
                }
                let tuples = self.grid.len().checked_pow(s.arity() as u32)?;
                if tuples > MEMO_TUPLES {
                    return None;
                }
                let size = tuples.checked_mul(s.len() as u64)? as usize;
                Some((0..size).map(|_| AtomicU64::new(MEMO_EMPTY)).collect())
            })
            .as_deref()
    }

    fn memo_slot(&self, j: usize, tuple: &[CellId]) -> usize {
        let n = self.grid.len();
        let mut key = j as u64;
        for c in tuple {
            key = key * n + c.0;
        }
        key as usize
    }

    fn compute_map_cell(&self, j: usize, args: &[f64], out: &mut [f64]) -> Result<CellId> {
        self.system.eval_map_into(j, args, out)?;
        Ok(self.grid.project_cell(out))
    }

    /// `φ̂ⱼ` on cells, given the cell coordinates already concatenated in
    /// `args`. Consults overrides, then the memo table.
    fn map_cell_with(
        &self,
        j: usize,
        tuple: &[CellId],
        args: &[f64],
        out: &mut [f64],
    ) -> Result<CellId> {
        if !self.overrides.is_empty() {
            if let Some(&t) = self.overrides.get(&(j, tuple.to_vec())) {
                return Ok(t);
            }
        }
        if let Some(table) = self.memo_table() {
            let slot = &table[self.memo_slot(j, tuple)];
            let v = slot.load(Ordering::Relaxed);
            if v != MEMO_EMPTY {
                return Ok(CellId(v));
            }
            let c = self.compute_map_cell(j, args, out)?;
            slot.store(c.0, Ordering::Relaxed);
            return Ok(c);
        }
        self.compute_map_cell(j, args, out)
    }

    /// The discretized map `φ̂ⱼ(args)`.
    pub fn map_index(&self, j: usize, args: &[GridIndex]) -> Result<GridIndex> {
        if j >= self.system.len() {
            return Err(Error::Range(format!("map {j} of {}", self.system.len())));
        }
        if args.len() != self.system.arity() {
            return Err(Error::Dimension(format!(
                "{} arguments for arity {}",
                args.len(),
                self.system.arity()
            )));
        }
        let tuple = args
            .iter()
            .map(|a| self.grid.cell_of(a))
            .collect::<Result<Vec<_>>>()?;
        let mut coords = Vec::with_capacity(self.system.dim() * args.len());
        for a in args {
            coords.extend(self.grid.coords(a)?);
        }
        let mut out = vec![0.0; self.system.dim()];
        let c = self.map_cell_with(j, &tuple, &coords, &mut out)?;
        Ok(self.grid.index_of(c))
    }

    fn check_measure(&self, nu: &DiscreteMeasure) -> Result<()> {
        if nu.grid() != &self.grid && **nu.grid() != *self.grid {
            return Err(Error::Dimension("measure lives on a different grid".into()));
        }
        if nu.is_empty() {
            return Err(Error::Measure("empty support".into()));
        }
        Ok(())
    }

    fn pool(&self) -> Option<rayon::ThreadPool> {
        if self.workers <= 1 {
            return None;
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .ok()
    }

    /// One step of the discretized Markov operator.
    pub fn markov_step(&self, nu: &DiscreteMeasure) -> Result<DiscreteMeasure> {
        Ok(self.markov_step_detailed(nu)?.measure)
    }

    /// Runs every chunk into its own sink; results come back in chunk order.
    fn run_chunks<S, F>(&self, ctx: &StepContext<'_>, make: F) -> Result<Vec<(S, u64)>>
    where
        S: Sink + Send,
        F: Fn() -> S + Sync,
    {
        let chunks = ctx.chunks();
        let run = |range: &(usize, usize)| -> Result<(S, u64)> {
            let mut sink = make();
            let normalized = ctx.run_chunk(range.0, range.1, &mut sink)?;
            Ok((sink, normalized))
        };
        match self.pool() {
            Some(pool) => pool.install(|| chunks.par_iter().map(run).collect()),
            None => chunks.iter().map(run).collect(),
        }
    }

    /// [`DiscretizedSystem::markov_step`] with the raw mass and the number
    /// of renormalized probability vectors.
    pub fn markov_step_detailed(&self, nu: &DiscreteMeasure) -> Result<StepOutput> {
        self.check_measure(nu)?;
        let ctx = StepContext::new(self, nu.atoms(), true);
        let hint = ctx.chunk_tuples().saturating_mul(16);
        let partials = self.run_chunks(&ctx, || Accumulator::new(&self.grid, hint))?;
        let mut merged = Accumulator::new(&self.grid, u64::MAX);
        let mut normalized = 0;
        for (acc, n) in partials {
            normalized += n;
            for (c, s) in acc.into_sorted() {
                merged.merge(c, &s);
            }
        }
        let atoms = merged
            .into_sorted()
            .into_iter()
            .map(|(c, s)| (c, s.value()))
            .filter(|a| a.1 > 0.0)
            .collect();
        let (measure, raw_mass) =
            DiscreteMeasure::from_sorted_unnormalized(self.grid.clone(), atoms)?;
        Ok(StepOutput {
            measure,
            raw_mass,
            normalized,
        })
    }

    /// `{ φ̂ⱼ(t) : j < L, t ∈ K^m }` as sorted cells.
    pub fn hutchinson_step_cells(&self, set: &[CellId]) -> Result<Vec<CellId>> {
        if set.is_empty() {
            return Err(Error::Config("the set must be nonempty".into()));
        }
        let mut cells = set.to_vec();
        cells.sort();
        cells.dedup();
        let atoms: Vec<(CellId, f64)> = cells.iter().map(|&c| (c, 1.0)).collect();
        let ctx = StepContext::new(self, &atoms, false);
        let partials = self.run_chunks(&ctx, || CellSet::new(&self.grid))?;
        let mut hit = CellSet::new(&self.grid);
        for (set, _) in partials {
            hit.union(set);
        }
        Ok(hit.into_sorted())
    }

    pub fn hutchinson_step(&self, set: &[GridIndex]) -> Result<Vec<GridIndex>> {
        let cells = set
            .iter()
            .map(|i| self.grid.cell_of(i))
            .collect::<Result<Vec<_>>>()?;
        Ok(self
            .hutchinson_step_cells(&cells)?
            .into_iter()
            .map(|c| self.grid.index_of(c))
            .collect())
    }

    /// `N` Markov steps from `nu0`, with one log record per step.
    pub fn run_measure(
        &self,
        nu0: &DiscreteMeasure,
        iters: usize,
    ) -> Result<(DiscreteMeasure, Vec<StepRecord>)> {
        self.run_measure_with(nu0, iters, |_, _| Ok(()))
    }

    /// Like [`DiscretizedSystem::run_measure`], calling `inspect` with the
    /// previous and the new measure after every step.
    pub fn run_measure_with<F>(
        &self,
        nu0: &DiscreteMeasure,
        iters: usize,
        mut inspect: F,
    ) -> Result<(DiscreteMeasure, Vec<StepRecord>)>
    where
        F: FnMut(&DiscreteMeasure, &DiscreteMeasure) -> Result<()>,
    {
        self.check_measure(nu0)?;
        let mut nu = nu0.clone();
        let mut log = Vec::with_capacity(iters);
        for step in 1..=iters {
            let start = Instant::now();
            let out = self.markov_step_detailed(&nu)?;
            inspect(&nu, &out.measure)?;
            log.push(StepRecord {
                step,
                support: out.measure.len(),
                mass_err: out.raw_mass - 1.0,
                millis: start.elapsed().as_secs_f64() * 1e3,
                normalized: out.normalized,
            });
            nu = out.measure;
        }
        Ok((nu, log))
    }

    /// `N` steps of the set map from `set`.
    pub fn run_attractor(
        &self,
        set: &[CellId],
        iters: usize,
    ) -> Result<(Vec<CellId>, Vec<StepRecord>)> {
        let mut k = set.to_vec();
        k.sort();
        k.dedup();
        let mut log = Vec::with_capacity(iters);
        for step in 1..=iters {
            let start = Instant::now();
            k = self.hutchinson_step_cells(&k)?;
            log.push(StepRecord {
                step,
                support: k.len(),
                mass_err: 0.0,
                millis: start.elapsed().as_secs_f64() * 1e3,
                normalized: 0,
            });
        }
        Ok((k, log))
    }
}

/// Destination of target cells produced by a step.
trait Sink {
    fn add(&mut self, cell: CellId, w: f64);
}

/// Precomputed pieces of one affine map.
struct AffineParts {
    offset: Vec<f64>,
    /// `partial[i][k·d + r]`: row `r` of block `i` applied to atom `k`.
    partial: Vec<Vec<f64>>,
    /// For arity 2: the coordinate of the second argument read by each
    /// output row (`None` for an all-zero row), when every row reads at
    /// most one. Then `φ̂ⱼ(y, ·)` factors through per-axis tables.
    second: Option<Vec<Option<usize>>>,
}

/// Per-step precomputation shared by all chunks.
struct StepContext<'a> {
    ds: &'a DiscretizedSystem,
    atoms: &'a [(CellId, f64)],
    dim: usize,
    arity: usize,
    /// False for the set-valued step: probabilities are ignored.
    weighted: bool,
    /// Atom coordinates, `n × d`.
    coords: Vec<f64>,
    /// `offsets[c][k]`: lattice offset of coordinate `c` of atom `k`.
    offsets: Vec<Vec<u32>>,
    weights: Vec<f64>,
    const_probs: Option<Vec<f64>>,
    /// Present when every map is affine and no override is installed.
    affine: Option<Vec<AffineParts>>,
}

impl<'a> StepContext<'a> {
    fn new(ds: &'a DiscretizedSystem, atoms: &'a [(CellId, f64)], weighted: bool) -> Self {
        let s = &ds.system;
        let grid = &*ds.grid;
        let (dim, arity) = (s.dim(), s.arity());
        let mut coords = vec![0.0; atoms.len() * dim];
        let mut offsets = vec![vec![0u32; atoms.len()]; dim];
        for (k, a) in atoms.iter().enumerate() {
            grid.cell_coords(a.0, &mut coords[k * dim..(k + 1) * dim]);
            for (r, o) in offsets.iter_mut().enumerate() {
                let (lo, _) = grid.index_range(r);
                o[k] = (grid.cell_axis(a.0, r) - lo) as u32;
            }
        }
        let weights = atoms.iter().map(|a| a.1).collect();
        let const_probs = s
            .probs()
            .iter()
            .map(ProbabilityDef::constant)
            .collect::<Option<Vec<_>>>();
        let affine = (s.is_affine() && ds.overrides.is_empty()).then(|| {
            s.maps()
                .iter()
                .map(|m| {
                    let a = m.affine().expect("affine");
                    let partial = (0..arity)
                        .map(|i| {
                            let mut v = vec![0.0; atoms.len() * dim];
                            for k in 0..atoms.len() {
                                let y = &coords[k * dim..(k + 1) * dim];
                                for r in 0..dim {
                                    v[k * dim + r] = a.block_dot(r, i, y);
                                }
                            }
                            v
                        })
                        .collect();
                    let second = (arity == 2)
                        .then(|| {
                            (0..dim)
                                .map(|r| {
                                    let reads: Vec<usize> = (0..dim)
                                        .filter(|&c| a.coeff(r, dim + c) != 0.0)
                                        .collect();
                                    match reads.len() {
                                        0 => Some(None),
                                        1 => Some(Some(reads[0])),
                                        _ => None,
                                    }
                                })
                                .collect::<Option<Vec<_>>>()
                        })
                        .flatten();
                    AffineParts {
                        offset: a.offset().to_vec(),
                        partial,
                        second,
                    }
                })
                .collect()
        });
        StepContext {
            ds,
            atoms,
            dim,
            arity,
            weighted,
            coords,
            offsets,
            weights,
            const_probs,
            affine,
        }
    }

    fn first_per_chunk(&self) -> usize {
        let n = self.atoms.len() as u64;
        let inner = n.saturating_pow(self.arity as u32 - 1).max(1);
        (TUPLES_PER_CHUNK / inner).max(1) as usize
    }

    /// Upper bound on the tuples in one chunk.
    fn chunk_tuples(&self) -> u64 {
        let n = self.atoms.len() as u64;
        let inner = n.saturating_pow(self.arity as u32 - 1).max(1);
        inner.saturating_mul(self.first_per_chunk().min(self.atoms.len()) as u64)
    }

    /// Chunk ranges over the first tuple index.
    fn chunks(&self) -> Vec<(usize, usize)> {
        let n = self.atoms.len();
        let per = self.first_per_chunk();
        (0..n).step_by(per).map(|s| (s, (s + per).min(n))).collect()
    }

    /// Visits tuples with first index in `lo..hi`, lexicographically.
    fn for_each_tuple<F>(&self, lo: usize, hi: usize, tuple: &mut [usize], f: &mut F) -> Result<()>
    where
        F: FnMut(&[usize]) -> Result<()>,
    {
        let n = self.atoms.len();
        for k0 in lo..hi {
            tuple[0] = k0;
            tuple[1..].iter_mut().for_each(|t| *t = 0);
            loop {
                f(tuple)?;
                let mut pos = tuple.len() - 1;
                while pos > 0 {
                    tuple[pos] += 1;
                    if tuple[pos] < n {
                        break;
                    }
                    tuple[pos] = 0;
                    pos -= 1;
                }
                if pos == 0 {
                    break;
                }
            }
        }
        Ok(())
    }

    fn fill(&self, tuple: &[usize], cells: &mut [CellId], args: &mut [f64]) {
        let d = self.dim;
        for (i, &k) in tuple.iter().enumerate() {
            cells[i] = self.atoms[k].0;
            args[i * d..(i + 1) * d].copy_from_slice(&self.coords[k * d..(k + 1) * d]);
        }
    }

    fn run_chunk<S: Sink>(&self, lo: usize, hi: usize, sink: &mut S) -> Result<u64> {
        if let Some(parts) = &self.affine {
            if self.arity <= 2 && (!self.weighted || self.const_probs.is_some()) {
                self.affine_chunk(parts, lo, hi, sink);
                return Ok(0);
            }
        }
        self.general_chunk(lo, hi, sink)
    }

    /// Affine maps of arity 1 or 2 with constant probabilities.
    fn affine_chunk<S: Sink>(&self, parts: &[AffineParts], lo: usize, hi: usize, sink: &mut S) {
        let d = self.dim;
        let n = self.atoms.len();
        let grid = &*self.ds.grid;
        let maps = self.ds.system.maps();
        let mut base = vec![0.0; d];
        let mut pt = vec![0.0; d];
        let mut y = vec![0.0; d];
        let mut tables: Vec<(Vec<u64>, usize)> = Vec::with_capacity(d);
        for k0 in lo..hi {
            let v0 = self.atoms[k0].1;
            for (j, part) in parts.iter().enumerate() {
                let b0 = &part.partial[0][k0 * d..(k0 + 1) * d];
                for r in 0..d {
                    base[r] = part.offset[r] + b0[r];
                }
                let p = match &self.const_probs {
                    Some(probs) if self.weighted => probs[j],
                    _ => 1.0,
                };
                if p == 0.0 {
                    continue;
                }
                if self.arity == 1 {
                    sink.add(grid.project_cell(&base), p * v0);
                    continue;
                }
                let table_len = part.second.as_ref().map(|sel| {
                    sel.iter()
                        .flatten()
                        .map(|&c| grid.counts()[c] as usize)
                        .sum::<usize>()
                });
                match (&part.second, table_len) {
                    (Some(sel), Some(len)) if len < n && self.ds.factor_tables => {
                        // Same float operations as the direct loop: the
                        // coordinates a row does not read contribute ±0.
                        let a = maps[j].affine().expect("affine");
                        let mut fixed = 0u64;
                        tables.clear();
                        y.iter_mut().for_each(|t| *t = 0.0);
                        for (r, src) in sel.iter().enumerate() {
                            let (first, _) = grid.index_range(r);
                            let stride = grid.strides()[r];
                            let cell = |t: f64| (grid.project_coord(r, t) - first) as u64 * stride;
                            match *src {
                                None => fixed += cell(base[r] + a.block_dot(r, 1, &y)),
                                Some(c) => {
                                    let (cf, _) = grid.index_range(c);
                                    let tab = (0..grid.counts()[c])
                                        .map(|i| {
                                            y[c] = grid.lattice(c, cf + i as i64);
                                            let t = cell(base[r] + a.block_dot(r, 1, &y));
                                            y[c] = 0.0;
                                            t
                                        })
                                        .collect();
                                    tables.push((tab, c));
                                }
                            }
                        }
                        // Second arguments run in cell order, so equal
                        // targets come in runs; each run is summed locally.
                        let w1 = &self.weights;
                        let scale = p * v0;
                        let mut run = Run::new(sink, scale);
                        match tables.as_slice() {
                            [(t, c)] => {
                                let o = &self.offsets[*c];
                                for k1 in 0..n {
                                    run.push(fixed + t[o[k1] as usize], w1[k1]);
                                }
                            }
                            [(t, c), (u, e)] => {
                                let (o, q) = (&self.offsets[*c], &self.offsets[*e]);
                                for k1 in 0..n {
                                    run.push(fixed + t[o[k1] as usize] + u[q[k1] as usize], w1[k1]);
                                }
                            }
                            _ => {
                                for k1 in 0..n {
                                    let mut cell = fixed;
                                    for (t, c) in &tables {
                                        cell += t[self.offsets[*c][k1] as usize];
                                    }
                                    run.push(cell, w1[k1]);
                                }
                            }
                        }
                        run.flush();
                    }
                    _ => {
                        let b1 = &part.partial[1];
                        for k1 in 0..n {
                            let w = p * (v0 * self.atoms[k1].1);
                            let y1 = &b1[k1 * d..(k1 + 1) * d];
                            for r in 0..d {
                                pt[r] = base[r] + y1[r];
                            }
                            sink.add(grid.project_cell(&pt), w);
                        }
                    }
                }
            }
        }
    }

    fn general_chunk<S: Sink>(&self, lo: usize, hi: usize, sink: &mut S) -> Result<u64> {
        let s = &self.ds.system;
        let mut tuple = vec![0usize; self.arity];
        let mut cells = vec![CellId(0); self.arity];
        let mut args = vec![0.0; self.dim * self.arity];
        let mut out = vec![0.0; self.dim];
        let mut probs = match &self.const_probs {
            Some(p) if self.weighted => p.clone(),
            _ => vec![1.0; s.len()],
        };
        let place_dependent = self.weighted && self.const_probs.is_none();
        let mut normalized = 0u64;
        self.for_each_tuple(lo, hi, &mut tuple, &mut |t| {
            self.fill(t, &mut cells, &mut args);
            let mut prod = self.atoms[t[0]].1;
            for &k in &t[1..] {
                prod *= self.atoms[k].1;
            }
            if place_dependent && s.prob_vector(&args, self.ds.normalize_probs, &mut probs)? {
                normalized += 1;
            }
            for (j, &p) in probs.iter().enumerate() {
                let w = p * prod;
                if w > 0.0 || !self.weighted {
                    sink.add(self.ds.map_cell_with(j, &cells, &args, &mut out)?, w);
                }
            }
            Ok(())
        })?;
        Ok(normalized)
    }
}

/// Consecutive additions to one cell, summed before reaching the sink.
/// Runs are a handful of terms, so they are summed plainly; compensation
/// happens in the sink.
struct Run<'s, S: Sink> {
    sink: &'s mut S,
    scale: f64,
    cell: u64,
    sum: f64,
}

impl<'s, S: Sink> Run<'s, S> {
    fn new(sink: &'s mut S, scale: f64) -> Self {
        Run {
            sink,
            scale,
            cell: u64::MAX,
            sum: 0.0,
        }
    }

    #[inline]
    fn push(&mut self, cell: u64, w: f64) {
        if cell != self.cell {
            self.flush();
            self.cell = cell;
        }
        self.sum += w;
    }

    fn flush(&mut self) {
        if self.cell != u64::MAX {
            self.sink.add(CellId(self.cell), self.scale * self.sum);
            self.sum = 0.0;
            self.cell = u64::MAX;
        }
    }
}

/// Weighted accumulator keyed by cell.
enum Accumulator {
    Dense(Vec<CompensatedSum>),
    Sparse(HashMap<u64, CompensatedSum>),
}

impl Accumulator {
    /// Dense storage unless the grid is large compared to `hint`, the
    /// number of additions expected.
    fn new(grid: &Grid, hint: u64) -> Self {
        if grid.len() <= DENSE_CELLS && grid.len() <= hint {
            Accumulator::Dense(vec![CompensatedSum::new(); grid.len() as usize])
        } else {
            Accumulator::Sparse(HashMap::new())
        }
    }

    fn merge(&mut self, cell: CellId, s: &CompensatedSum) {
        match self {
            Accumulator::Dense(sums) => sums[cell.0 as usize].merge(s),
            Accumulator::Sparse(map) => map.entry(cell.0).or_default().merge(s),
        }
    }

    fn into_sorted(self) -> Vec<(CellId, CompensatedSum)> {
        match self {
            Accumulator::Dense(sums) => sums
                .into_iter()
                .enumerate()
                .filter(|(_, s)| *s != CompensatedSum::default())
                .map(|(c, s)| (CellId(c as u64), s))
                .collect(),
            Accumulator::Sparse(map) => {
                let mut v: Vec<_> = map.into_iter().map(|(c, s)| (CellId(c), s)).collect();
                v.sort_unstable_by_key(|a| a.0);
                v
            }
        }
    }
}

impl Sink for Accumulator {
    #[inline]
    fn add(&mut self, cell: CellId, w: f64) {
        match self {
            Accumulator::Dense(sums) => sums[cell.0 as usize].add(w),
            Accumulator::Sparse(map) => map.entry(cell.0).or_default().add(w),
        }
    }
}

/// Set of cells; a bitmap for grids up to `2^26` cells.
enum CellSet {
    Dense(Vec<u64>),
    Sparse(std::collections::HashSet<u64>),
}

impl CellSet {
    fn new(grid: &Grid) -> Self {
        if grid.len() <= 1 << 26 {
            CellSet::Dense(vec![0; grid.len().div_ceil(64) as usize])
        } else {
            CellSet::Sparse(Default::default())
        }
    }

    fn union(&mut self, other: CellSet) {
        match (self, other) {
            (CellSet::Dense(a), CellSet::Dense(b)) => {
                a.iter_mut().zip(b).for_each(|(x, y)| *x |= y);
            }
            (CellSet::Sparse(a), CellSet::Sparse(b)) => a.extend(b),
            _ => unreachable!("cell sets of one grid share a representation"),
        }
    }

    fn into_sorted(self) -> Vec<CellId> {
        match self {
            CellSet::Dense(bits) => {
                let mut out = Vec::new();
                for (w, &word) in bits.iter().enumerate() {
                    let mut x = word;
                    while x != 0 {
                        out.push(CellId(w as u64 * 64 + x.trailing_zeros() as u64));
                        x &= x - 1;
                    }
                }
                out
            }
            CellSet::Sparse(s) => {
                let mut v: Vec<_> = s.into_iter().map(CellId).collect();
                v.sort_unstable();
                v
            }
        }
    }
}

impl Sink for CellSet {
    #[inline]
    fn add(&mut self, c: CellId, _: f64) {
        match self {
            CellSet::Dense(bits) => bits[(c.0 / 64) as usize] |= 1 << (c.0 % 64),
            CellSet::Sparse(s) => {
                s.insert(c.0);
            }
        }
    }
}

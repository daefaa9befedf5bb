//! Uniform ε-nets on rectangular boxes and the rounding projection onto them.
//!
//! A [`Grid`] is the lattice `x[i] = origin + i·ε` in every dimension,
//! restricted to the box `[a₁,b₁]×…×[a_d,b_d]`. Points are projected
//! coordinate-wise onto the nearest lattice value, with exact midpoints
//! rounding up and out-of-box values clamped to the first/last lattice
//! point of the box.
//!
//! Cells are addressed either by a [`GridIndex`] (signed lattice
//! coordinates) or by a [`CellId`], the row-major linearization with the
//! first dimension most significant. The linear order of `CellId`s is the
//! lexicographic order of the corresponding indices.

use std::fmt;

use crate::error::{Error, Result};

/// Relative (to ε) distance from a midpoint within which a value rounds
/// up as a tie. Map outputs that are exact midpoints in real arithmetic
/// land a few ulps to either side in floating point.
pub const TIE_TOLERANCE: f64 = 1e-9;

/// Slack (in units of ε) used when deciding whether a lattice point lies
/// on the boundary of the box.
const BOUNDARY_SLACK: f64 = 1e-9;

/// Relative tolerance when matching ε across dimensions.
const PIXEL_RATIO_TOL: f64 = 1e-12;

/// Closed interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        Interval { lo, hi }
    }

    pub fn extent(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, t: f64, tol: f64) -> bool {
        t >= self.lo - tol && t <= self.hi + tol
    }
}

/// Lattice coordinates of a grid point.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GridIndex(pub Vec<i64>);

impl GridIndex {
    pub fn new(indices: Vec<i64>) -> Self {
        GridIndex(indices)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

impl From<Vec<i64>> for GridIndex {
    fn from(v: Vec<i64>) -> Self {
        GridIndex(v)
    }
}

impl fmt::Display for GridIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (k, i) in self.0.iter().enumerate() {
            if k > 0 {
                write!(f, ",")?;
            }
            write!(f, "{i}")?;
        }
        write!(f, ")")
    }
}

/// Row-major linear address of a grid cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellId(pub u64);

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    bounds: Vec<Interval>,
    epsilon: f64,
    origin: Vec<f64>,
    first: Vec<i64>,
    counts: Vec<u64>,
    strides: Vec<u64>,
    total: u64,
}

impl Grid {
    /// Lattice `x[i] = i·ε` restricted to `bounds`.
    pub fn new(bounds: Vec<Interval>, epsilon: f64) -> Result<Self> {
        let origin = vec![0.0; bounds.len()];
        Self::with_origin(bounds, epsilon, origin)
    }

    /// Lattice `x[i] = origin + i·ε`, with one origin per dimension.
    pub fn with_origin(bounds: Vec<Interval>, epsilon: f64, origin: Vec<f64>) -> Result<Self> {
        if bounds.is_empty() {
            return Err(Error::Config("grid needs at least one dimension".into()));
        }
        if origin.len() != bounds.len() {
            return Err(Error::Dimension(format!(
                "origin has {} components, bounds have {}",
                origin.len(),
                bounds.len()
            )));
        }
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
        }
        let mut first = Vec::with_capacity(bounds.len());
        let mut counts = Vec::with_capacity(bounds.len());
        for (k, (iv, &o)) in bounds.iter().zip(&origin).enumerate() {
            if !(iv.lo < iv.hi) || !iv.lo.is_finite() || !iv.hi.is_finite() {
                return Err(Error::Config(format!(
                    "bounds of dimension {k} must satisfy a < b, got [{}, {}]",
                    iv.lo, iv.hi
                )));
            }
            let lo = ((iv.lo - o) / epsilon - BOUNDARY_SLACK).ceil();
            let hi = ((iv.hi - o) / epsilon + BOUNDARY_SLACK).floor();
            if hi < lo {
                return Err(Error::Config(format!(
                    "no lattice point of spacing {epsilon} inside [{}, {}]",
                    iv.lo, iv.hi
                )));
            }
            if lo.abs() > 9.0e15 || hi.abs() > 9.0e15 {
                return Err(Error::Config("lattice indices exceed integer range".into()));
            }
            first.push(lo as i64);
            counts.push((hi - lo) as u64 + 1);
        }
        let mut strides = vec![1u64; bounds.len()];
        let mut total: u64 = 1;
        for k in (0..bounds.len()).rev() {
            strides[k] = total;
            total = total
                .checked_mul(counts[k])
                .ok_or_else(|| Error::Config("grid has more than 2^64 cells".into()))?;
        }
        Ok(Grid {
            bounds,
            epsilon,
            origin,
            first,
            counts,
            strides,
            total,
        })
    }

    /// Grid whose lattice has exactly `pixels[k]` points across dimension `k`
    /// of the box, anchored at the lower corner. A single entry applies to
    /// every dimension. All dimensions must share the same spacing.
    pub fn for_pixels(bounds: Vec<Interval>, pixels: &[usize]) -> Result<Self> {
        let d = bounds.len();
        let pixels: Vec<usize> = match pixels.len() {
            1 => vec![pixels[0]; d],
            n if n == d => pixels.to_vec(),
            n => {
                return Err(Error::Dimension(format!(
                    "{n} pixel counts given for a {d}-dimensional box"
                )))
            }
        };
        if let Some(&p) = pixels.iter().find(|&&p| p < 2) {
            return Err(Error::Config(format!("pixel count must be at least 2, got {p}")));
        }
        let epsilon = bounds[0].extent() / (pixels[0] - 1) as f64;
        for (k, (iv, &p)) in bounds.iter().zip(&pixels).enumerate().skip(1) {
            let ek = iv.extent() / (p - 1) as f64;
            if ((ek - epsilon) / epsilon).abs() > PIXEL_RATIO_TOL {
                return Err(Error::Config(format!(
                    "dimension {k} needs spacing {ek}, dimension 0 uses {epsilon}"
                )));
            }
        }
        let origin = bounds.iter().map(|iv| iv.lo).collect();
        Self::with_origin(bounds, epsilon, origin)
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn bounds(&self) -> &[Interval] {
        &self.bounds
    }

    pub fn origin(&self) -> &[f64] {
        &self.origin
    }

    /// Number of lattice points along each dimension.
    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Total number of cells.
    pub fn len(&self) -> u64 {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    /// Smallest and largest lattice index inside the box for dimension `k`.
    pub fn index_range(&self, k: usize) -> (i64, i64) {
        (self.first[k], self.first[k] + self.counts[k] as i64 - 1)
    }

    /// Row-major strides of [`CellId`] per dimension.
    pub fn strides(&self) -> &[u64] {
        &self.strides
    }

    /// Coordinate of lattice index `i` in dimension `k`.
    #[inline]
    pub fn lattice(&self, k: usize, i: i64) -> f64 {
        self.origin[k] + i as f64 * self.epsilon
    }

    /// Projection of a single coordinate onto the lattice of dimension `k`.
    #[inline]
    pub fn project_coord(&self, k: usize, t: f64) -> i64 {
        let first = self.first[k];
        let last = first + self.counts[k] as i64 - 1;
        if !(t > self.lattice(k, first)) {
            return first;
        }
        if t >= self.lattice(k, last) {
            return last;
        }
        // first < t < last here, so last > first.
        let mut i = ((t - self.origin[k]) / self.epsilon).floor() as i64;
        i = i.clamp(first, last - 1);
        if self.lattice(k, i) > t {
            i -= 1;
        } else if self.lattice(k, i + 1) <= t {
            i += 1;
        }
        let lo = self.lattice(k, i);
        let hi = self.lattice(k, i + 1);
        let mid = (lo + hi) / 2.0;
        // Values within rounding noise of the midpoint count as ties.
        let tol = TIE_TOLERANCE * self.epsilon + 4.0 * f64::EPSILON * mid.abs();
        if t < mid - tol {
            i
        } else {
            i + 1
        }
    }

    /// Nearest lattice point; ties round up, outside values clamp.
    pub fn project(&self, p: &[f64]) -> Result<GridIndex> {
        self.check_dim(p.len())?;
        Ok(GridIndex(
            p.iter()
                .enumerate()
                .map(|(k, &t)| self.project_coord(k, t))
                .collect(),
        ))
    }

    /// [`Grid::project`] straight to a linear address.
    #[inline]
    pub fn project_cell(&self, p: &[f64]) -> CellId {
        debug_assert_eq!(p.len(), self.dim());
        let mut id = 0u64;
        for (k, &t) in p.iter().enumerate() {
            let i = self.project_coord(k, t);
            id += (i - self.first[k]) as u64 * self.strides[k];
        }
        CellId(id)
    }

    /// Coordinates of a lattice point.
    pub fn coords(&self, idx: &GridIndex) -> Result<Vec<f64>> {
        self.check_index(idx)?;
        Ok(idx
            .0
            .iter()
            .enumerate()
            .map(|(k, &i)| self.lattice(k, i))
            .collect())
    }

    /// Coordinates of a cell, written into `out`.
    #[inline]
    pub fn cell_coords(&self, cell: CellId, out: &mut [f64]) {
        let mut rest = cell.0;
        for k in 0..self.dim() {
            let q = rest / self.strides[k];
            rest %= self.strides[k];
            out[k] = self.lattice(k, self.first[k] + q as i64);
        }
    }

    pub fn cell_point(&self, cell: CellId) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.cell_coords(cell, &mut out);
        out
    }

    pub fn cell_of(&self, idx: &GridIndex) -> Result<CellId> {
        self.check_index(idx)?;
        Ok(CellId(
            idx.0
                .iter()
                .enumerate()
                .map(|(k, &i)| (i - self.first[k]) as u64 * self.strides[k])
                .sum(),
        ))
    }

    pub fn index_of(&self, cell: CellId) -> GridIndex {
        let mut rest = cell.0;
        let mut out = Vec::with_capacity(self.dim());
        for k in 0..self.dim() {
            out.push(self.first[k] + (rest / self.strides[k]) as i64);
            rest %= self.strides[k];
        }
        GridIndex(out)
    }

    /// Lattice index of `cell` along dimension `k`.
    #[inline]
    pub fn cell_axis(&self, cell: CellId, k: usize) -> i64 {
        self.first[k] + ((cell.0 / self.strides[k]) % self.counts[k]) as i64
    }

    /// The one-dimensional grid formed by dimension `k`.
    pub fn axis(&self, k: usize) -> Result<Grid> {
        if k >= self.dim() {
            return Err(Error::Range(format!(
                "axis {k} of a {}-dimensional grid",
                self.dim()
            )));
        }
        Grid::with_origin(vec![self.bounds[k]], self.epsilon, vec![self.origin[k]])
    }

    /// True when every point of `boxed` is within the grid's box.
    pub fn covers(&self, boxed: &[Interval]) -> bool {
        boxed.len() == self.dim()
            && boxed
                .iter()
                .zip(&self.bounds)
                .all(|(b, g)| b.lo >= g.lo && b.hi <= g.hi)
    }

    fn check_dim(&self, n: usize) -> Result<()> {
        if n != self.dim() {
            return Err(Error::Dimension(format!(
                "point has {n} coordinates, grid has {}",
                self.dim()
            )));
        }
        Ok(())
    }

    fn check_index(&self, idx: &GridIndex) -> Result<()> {
        self.check_dim(idx.dim())?;
        for (k, &i) in idx.0.iter().enumerate() {
            let (lo, hi) = self.index_range(k);
            if i < lo || i > hi {
                return Err(Error::Range(format!(
                    "index {idx} outside [{lo}, {hi}] in dimension {k}"
                )));
            }
        }
        Ok(())
    }
}

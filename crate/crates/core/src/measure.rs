//! Finitely supported probability measures on a grid.
//!
//! Atoms are kept sorted by [`CellId`], i.e. in lexicographic index order,
//! so iteration, summation and serialization are canonical.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::{CellId, Grid, GridIndex, Interval};
use crate::sum::{compensated_sum, CompensatedSum};

/// Allowed deviation of the total mass from 1.
pub const MASS_TOL: f64 = 1e-12;
/// Atoms lighter than this are dropped after a step.
pub const PRUNE_BELOW: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    grid: Arc<Grid>,
    atoms: Vec<(CellId, f64)>,
}

impl DiscreteMeasure {
    pub fn dirac(grid: Arc<Grid>, idx: &GridIndex) -> Result<Self> {
        let cell = grid.cell_of(idx)?;
        Ok(Self::dirac_cell(grid, cell))
    }

    pub fn dirac_cell(grid: Arc<Grid>, cell: CellId) -> Self {
        DiscreteMeasure {
            grid,
            atoms: vec![(cell, 1.0)],
        }
    }

    /// Builds a measure from weighted indices. Repeated indices are merged,
    /// zero weights dropped; the total must be 1 within [`MASS_TOL`].
    pub fn from_atoms<I>(grid: Arc<Grid>, atoms: I) -> Result<Self>
    where
        I: IntoIterator<Item = (GridIndex, f64)>,
    {
        let mut cells = Vec::new();
        for (idx, w) in atoms {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Measure(format!("weight {w} at {idx}")));
            }
            cells.push((grid.cell_of(&idx)?, w));
        }
        Self::from_cells(grid, cells)
    }

    /// Like [`DiscreteMeasure::from_atoms`] with linear addresses.
    pub fn from_cells(grid: Arc<Grid>, mut cells: Vec<(CellId, f64)>) -> Result<Self> {
        if let Some((c, w)) = cells.iter().find(|(_, w)| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Measure(format!("weight {w} at cell {}", c.0)));
        }
        cells.sort_by_key(|a| a.0);
        let atoms = merge_sorted(cells);
        let mass = compensated_sum(atoms.iter().map(|a| a.1));
        if (mass - 1.0).abs() > MASS_TOL {
            return Err(Error::Measure(format!("total mass {mass}")));
        }
        if atoms.is_empty() {
            return Err(Error::Measure("empty support".into()));
        }
        Ok(DiscreteMeasure { grid, atoms })
    }

    /// Takes already merged, sorted, positive atoms; prunes atoms below
    /// [`PRUNE_BELOW`] and rescales to unit mass. Returns the measure and
    /// the mass before rescaling.
    pub(crate) fn from_sorted_unnormalized(
        grid: Arc<Grid>,
        mut atoms: Vec<(CellId, f64)>,
    ) -> Result<(Self, f64)> {
        debug_assert!(atoms.windows(2).all(|w| w[0].0 < w[1].0));
        let raw_mass = compensated_sum(atoms.iter().map(|a| a.1));
        let before = atoms.len();
        atoms.retain(|a| a.1 >= PRUNE_BELOW);
        if atoms.is_empty() {
            return Err(Error::Measure("empty support".into()));
        }
        let kept = if atoms.len() == before {
            raw_mass
        } else {
            compensated_sum(atoms.iter().map(|a| a.1))
        };
        if !(kept > 0.0) || !kept.is_finite() {
            return Err(Error::Measure(format!("total mass {kept}")));
        }
        if kept != 1.0 {
            atoms.iter_mut().for_each(|a| a.1 /= kept);
        }
        Ok((DiscreteMeasure { grid, atoms }, raw_mass))
    }

    /// Uniform measure on the given cells.
    pub fn uniform(grid: Arc<Grid>, cells: &[CellId]) -> Result<Self> {
        if cells.is_empty() {
            return Err(Error::Measure("empty support".into()));
        }
        let w = 1.0 / cells.len() as f64;
        let mut atoms: Vec<_> = cells.iter().map(|&c| (c, w)).collect();
        atoms.sort_by_key(|a| a.0);
        let atoms = merge_sorted(atoms);
        let (m, _) = Self::from_sorted_unnormalized(grid, atoms)?;
        Ok(m)
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn atoms(&self) -> &[(CellId, f64)] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn mass(&self) -> f64 {
        compensated_sum(self.atoms.iter().map(|a| a.1))
    }

    /// Atoms as `(index, weight)` in lexicographic order.
    pub fn iter(&self) -> impl Iterator<Item = (GridIndex, f64)> + '_ {
        self.atoms
            .iter()
            .map(move |&(c, w)| (self.grid.index_of(c), w))
    }

    /// Indices carrying positive weight, in lexicographic order.
    pub fn support(&self) -> Vec<GridIndex> {
        self.atoms.iter().map(|a| self.grid.index_of(a.0)).collect()
    }

    pub fn support_cells(&self) -> Vec<CellId> {
        self.atoms.iter().map(|a| a.0).collect()
    }

    pub fn weight(&self, idx: &GridIndex) -> f64 {
        match self.grid.cell_of(idx) {
            Ok(c) => self.weight_cell(c),
            Err(_) => 0.0,
        }
    }

    pub fn weight_cell(&self, cell: CellId) -> f64 {
        self.atoms
            .binary_search_by_key(&cell, |a| a.0)
            .map(|k| self.atoms[k].1)
            .unwrap_or(0.0)
    }

    /// Image measure under `f`, which sends indices of this grid to
    /// indices of `target`.
    pub fn pushforward<F>(&self, target: Arc<Grid>, f: F) -> Result<Self>
    where
        F: Fn(&GridIndex) -> GridIndex,
    {
        let mut acc: BTreeMap<CellId, CompensatedSum> = BTreeMap::new();
        for (idx, w) in self.iter() {
            let cell = target.cell_of(&f(&idx))?;
            acc.entry(cell).or_default().add(w);
        }
        let atoms = acc.into_iter().map(|(c, s)| (c, s.value())).collect();
        Ok(DiscreteMeasure {
            grid: target,
            atoms,
        })
    }

    /// Exact Wasserstein-1 distance between two 1-D measures: the integral
    /// of `|F₁ − F₂|` over the merged atom positions. The grids may differ.
    pub fn w1_distance_1d(&self, other: &DiscreteMeasure) -> Result<f64> {
        if self.grid.dim() != 1 || other.grid.dim() != 1 {
            return Err(Error::Unsupported(
                "Wasserstein distance is only implemented in dimension 1".into(),
            ));
        }
        let pos = |m: &DiscreteMeasure| -> Vec<(f64, f64)> {
            m.atoms.iter().map(|&(c, w)| (m.grid.cell_point(c)[0], w)).collect()
        };
        let (a, b) = (pos(self), pos(other));
        let (mut i, mut j) = (0, 0);
        let mut fa = CompensatedSum::new();
        let mut fb = CompensatedSum::new();
        let mut total = CompensatedSum::new();
        let mut prev: Option<f64> = None;
        while i < a.len() || j < b.len() {
            let x = match (a.get(i), b.get(j)) {
                (Some(p), Some(q)) => p.0.min(q.0),
                (Some(p), None) => p.0,
                (None, Some(q)) => q.0,
                (None, None) => unreachable!(),
            };
            if let Some(p) = prev {
                total.add((fa.value() - fb.value()).abs() * (x - p));
            }
            while i < a.len() && a[i].0 == x {
                fa.add(a[i].1);
                i += 1;
            }
            while j < b.len() && b[j].0 == x {
                fb.add(b[j].1);
                j += 1;
            }
            prev = Some(x);
        }
        Ok(total.value())
    }

    /// Canonical CSV: a `# dim=… epsilon=… bounds=…` header, then one
    /// `i1,…,id,weight` line per atom.
    pub fn to_csv(&self) -> String {
        let g = &self.grid;
        let mut s = String::new();
        let bounds: Vec<String> = g
            .bounds()
            .iter()
            .map(|iv| format!("{:?}:{:?}", iv.lo, iv.hi))
            .collect();
        let _ = write!(
            s,
            "# dim={} epsilon={:?} bounds={}",
            g.dim(),
            g.epsilon(),
            bounds.join(",")
        );
        if g.origin().iter().any(|&o| o != 0.0) {
            let o: Vec<String> = g.origin().iter().map(|o| format!("{o:?}")).collect();
            let _ = write!(s, " origin={}", o.join(","));
        }
        s.push('\n');
        for (idx, w) in self.iter() {
            for i in &idx.0 {
                let _ = write!(s, "{i},");
            }
            let _ = writeln!(s, "{w:.16e}");
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let header = lines
            .next()
            .map(|l| l.1)
            .ok_or_else(|| Error::Config("empty measure file".into()))?;
        let grid = Arc::new(parse_header(header)?);
        let mut atoms = Vec::new();
        for (n, line) in lines {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != grid.dim() + 1 {
                return Err(Error::Syntax {
                    line: n + 1,
                    column: 1,
                    message: format!("expected {} fields", grid.dim() + 1),
                });
            }
            let bad = |message: String| Error::Syntax {
                line: n + 1,
                column: 1,
                message,
            };
            let idx = fields[..grid.dim()]
                .iter()
                .map(|f| f.parse::<i64>().map_err(|_| bad(format!("bad index '{f}'"))))
                .collect::<Result<Vec<_>>>()?;
            let w: f64 = fields[grid.dim()]
                .parse()
                .map_err(|_| bad(format!("bad weight '{}'", fields[grid.dim()])))?;
            atoms.push((GridIndex(idx), w));
        }
        Self::from_atoms(grid, atoms)
    }
}

fn merge_sorted(cells: Vec<(CellId, f64)>) -> Vec<(CellId, f64)> {
    let mut out: Vec<(CellId, f64)> = Vec::with_capacity(cells.len());
    let mut acc = CompensatedSum::new();
    let mut cur: Option<CellId> = None;
    for (c, w) in cells {
        if cur != Some(c) {
            if let Some(p) = cur {
                let v = acc.value();
                if v > 0.0 {
                    out.push((p, v));
                }
            }
            cur = Some(c);
            acc = CompensatedSum::new();
        }
        acc.add(w);
    }
    if let Some(p) = cur {
        let v = acc.value();
        if v > 0.0 {
            out.push((p, v));
        }
    }
    out
}

fn parse_header(line: &str) -> Result<Grid> {
    let bad = |m: String| Error::Syntax {
        line: 1,
        column: 1,
        message: m,
    };
    let body = line
        .trim()
        .strip_prefix('#')
        .ok_or_else(|| bad("header must start with '#'".into()))?;
    let mut dim = None;
    let mut eps = None;
    let mut bounds = None;
    let mut origin = None;
    let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad number '{s}'")));
    for kv in body.split_whitespace() {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| bad(format!("expected key=value, got '{kv}'")))?;
        match k {
            "dim" => dim = Some(v.parse::<usize>().map_err(|_| bad(format!("bad dim '{v}'")))?),
            "epsilon" => eps = Some(num(v)?),
            "bounds" => {
                let mut ivs = Vec::new();
                for part in v.split(',') {
                    let (a, b) = part
                        .split_once(':')
                        .ok_or_else(|| bad(format!("bad interval '{part}'")))?;
                    ivs.push(Interval::new(num(a)?, num(b)?));
                }
                bounds = Some(ivs);
            }
            "origin" => origin = Some(v.split(',').map(num).collect::<Result<Vec<_>>>()?),
            _ => return Err(bad(format!("unknown header key '{k}'"))),
        }
    }
    let dim = dim.ok_or_else(|| bad("missing dim".into()))?;
    let eps = eps.ok_or_else(|| bad("missing epsilon".into()))?;
    let bounds = bounds.ok_or_else(|| bad("missing bounds".into()))?;
    if bounds.len() != dim {
        return Err(Error::Dimension(format!("dim={dim} but {} bounds", bounds.len())));
    }
    let origin = origin.unwrap_or_else(|| vec![0.0; dim]);
    Grid::with_origin(bounds, eps, origin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn line(eps: f64) -> Arc<Grid> {
        Arc::new(Grid::new(vec![Interval::new(0.0, 1.0)], eps).unwrap())
    }

    fn m1(g: &Arc<Grid>, atoms: &[(i64, f64)]) -> DiscreteMeasure {
        DiscreteMeasure::from_atoms(g.clone(), atoms.iter().map(|&(i, w)| (GridIndex(vec![i]), w)))
            .unwrap()
    }

    #[test]
    fn dirac_basics() {
        let g = line(0.25);
        let d = DiscreteMeasure::dirac(g.clone(), &GridIndex(vec![0])).unwrap();
        assert_eq!(d.atoms(), &[(CellId(0), 1.0)]);
        assert_eq!(d.mass(), 1.0);
        assert_eq!(d.support(), vec![GridIndex(vec![0])]);
        assert!(DiscreteMeasure::dirac(g, &GridIndex(vec![9])).is_err());
    }

    #[test]
    fn support_lists_positive_atoms() {
        let g = line(0.25);
        let m = m1(&g, &[(3, 0.5), (0, 0.5), (2, 0.0)]);
        assert_eq!(m.support(), vec![GridIndex(vec![0]), GridIndex(vec![3])]);
        assert_eq!(m.weight(&GridIndex(vec![2])), 0.0);
    }

    #[test]
    fn construction_errors() {
        let g = line(0.25);
        let r = DiscreteMeasure::from_atoms(g.clone(), [(GridIndex(vec![0]), 0.5)]);
        assert!(matches!(r, Err(Error::Measure(_))));
        let r = DiscreteMeasure::from_atoms(g.clone(), [(GridIndex(vec![0]), -0.5), (GridIndex(vec![1]), 1.5)]);
        assert!(matches!(r, Err(Error::Measure(_))));
        let r = DiscreteMeasure::from_atoms(g, [(GridIndex(vec![7]), 1.0)]);
        assert!(matches!(r, Err(Error::Range(_))));
    }

    #[test]
    fn pushforward_examples() {
        let g = line(0.25);
        let m = m1(&g, &[(0, 0.25), (1, 0.25), (4, 0.5)]);
        assert_eq!(m.pushforward(g.clone(), |i| i.clone()).unwrap(), m);
        let c = m.pushforward(g.clone(), |_| GridIndex(vec![2])).unwrap();
        assert_eq!(c, DiscreteMeasure::dirac(g, &GridIndex(vec![2])).unwrap());

        let sq = Arc::new(Grid::new(vec![Interval::new(0.0, 1.0); 2], 1.0).unwrap());
        let m2 = DiscreteMeasure::from_atoms(
            sq.clone(),
            [
                (GridIndex(vec![0, 0]), 0.25),
                (GridIndex(vec![0, 1]), 0.25),
                (GridIndex(vec![1, 0]), 0.5),
            ],
        )
        .unwrap();
        let axis1 = Arc::new(sq.axis(1).unwrap());
        let p = m2.pushforward(axis1.clone(), |i| GridIndex(vec![i.0[1]])).unwrap();
        assert_eq!(p.atoms(), &[(CellId(0), 0.75), (CellId(1), 0.25)]);
        let p0 = m2.pushforward(axis1, |i| GridIndex(vec![i.0[0]])).unwrap();
        assert_eq!(p0.atoms(), &[(CellId(0), 0.5), (CellId(1), 0.5)]);
    }

    #[test]
    fn w1_examples() {
        let g = line(0.5);
        let d0 = m1(&g, &[(0, 1.0)]);
        let d1 = m1(&g, &[(2, 1.0)]);
        let half = m1(&g, &[(1, 1.0)]);
        let split = m1(&g, &[(0, 0.5), (2, 0.5)]);
        assert_eq!(d0.w1_distance_1d(&d1).unwrap(), 1.0);
        assert_eq!(split.w1_distance_1d(&half).unwrap(), 0.5);
        assert_eq!(split.w1_distance_1d(&split).unwrap(), 0.0);
        let sq = Arc::new(Grid::new(vec![Interval::new(0.0, 1.0); 2], 1.0).unwrap());
        let p = DiscreteMeasure::dirac(sq, &GridIndex(vec![0, 0])).unwrap();
        assert!(matches!(p.w1_distance_1d(&p), Err(Error::Unsupported(_))));
        let fine = m1(&line(0.25), &[(1, 1.0)]);
        assert_eq!(d0.w1_distance_1d(&fine).unwrap(), 0.25);
    }

    #[test]
    fn csv_roundtrip_is_canonical() {
        let g = line(1.0 / 3.0);
        let m = m1(&g, &[(3, 0.4), (0, 0.1), (1, 0.2), (2, 0.3)]);
        let text = m.to_csv();
        assert!(text.starts_with("# dim=1 epsilon=0.3333333333333333 bounds=0.0:1.0\n0,1.0000000000000001e-1\n"));
        let back = DiscreteMeasure::from_csv(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_csv(), text);
        let shifted = Arc::new(Grid::for_pixels(vec![Interval::new(-2.0, 2.0)], &[9]).unwrap());
        let m = DiscreteMeasure::dirac(shifted, &GridIndex(vec![3])).unwrap();
        assert_eq!(DiscreteMeasure::from_csv(&m.to_csv()).unwrap(), m);
        assert!(DiscreteMeasure::from_csv("dim=1\n").is_err());
        assert!(DiscreteMeasure::from_csv("# dim=1 epsilon=0.5 bounds=0:1\n0,0.5\n").is_err());
    }

    #[test]
    fn pruning_redistributes_proportionally() {
        let g = line(0.25);
        let (m, raw) = DiscreteMeasure::from_sorted_unnormalized(
            g,
            vec![(CellId(0), 0.25), (CellId(1), 1e-310), (CellId(2), 0.25)],
        )
        .unwrap();
        assert_eq!(raw, 0.5);
        assert_eq!(m.atoms(), &[(CellId(0), 0.5), (CellId(2), 0.5)]);
    }

    fn arb_measure() -> impl Strategy<Value = DiscreteMeasure> {
        prop::collection::vec((0i64..=40, 0.01f64..1.0), 1..12).prop_map(|atoms| {
            let g = line(0.025);
            let total: f64 = atoms.iter().map(|a| a.1).sum();
            let cells = atoms.iter().map(|&(i, w)| (CellId(i as u64), w / total)).collect::<Vec<_>>();
            let mut cells = cells;
            cells.sort_by_key(|a| a.0);
            let merged = merge_sorted(cells);
            DiscreteMeasure::from_sorted_unnormalized(g, merged).unwrap().0
        })
    }

    proptest! {
        #[test]
        fn w1_is_a_metric(a in arb_measure(), b in arb_measure(), c in arb_measure()) {
            let ab = a.w1_distance_1d(&b).unwrap();
            let ba = b.w1_distance_1d(&a).unwrap();
            let bc = b.w1_distance_1d(&c).unwrap();
            let ac = a.w1_distance_1d(&c).unwrap();
            prop_assert_eq!(ab.to_bits(), ba.to_bits());
            prop_assert!(ac <= ab + bc + 1e-12);
            prop_assert_eq!(a.w1_distance_1d(&a).unwrap(), 0.0);
            if a != b {
                prop_assert!(ab > 0.0);
            }
        }

        #[test]
        fn pushforward_composes_and_keeps_mass(a in arb_measure(), s in 1i64..5, t in 0i64..7) {
            let g = a.grid().clone();
            let f = move |i: &GridIndex| GridIndex(vec![(i.0[0] / s).min(40)]);
            let h = move |i: &GridIndex| GridIndex(vec![(i.0[0] + t).min(40)]);
            let once = a.pushforward(g.clone(), |i| f(&h(i))).unwrap();
            let twice = a.pushforward(g.clone(), h).unwrap().pushforward(g, f).unwrap();
            prop_assert_eq!(once.support(), twice.support());
            for ((_, x), (_, y)) in once.atoms().iter().zip(twice.atoms()) {
                prop_assert!((x - y).abs() <= 1e-15);
            }
            prop_assert!((once.mass() - 1.0).abs() <= MASS_TOL);
        }
    }
}

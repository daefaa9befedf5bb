//! Grayscale PGM histograms and CSV point lists.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::grid::{CellId, Grid};
use crate::measure::DiscreteMeasure;
use crate::sum::CompensatedSum;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scale {
    Linear,
    /// `log(1 + 999 t) / log(1000)`: three decades of dynamic range.
    Log,
    /// `t^γ` with `γ ∈ (0, 1]`.
    Power(f64),
}

pub const DEFAULT_GAMMA: f64 = 0.35;

impl Scale {
    fn apply(self, t: f64) -> f64 {
        match self {
            Scale::Linear => t,
            Scale::Log => (999.0 * t).ln_1p() / 1000f64.ln(),
            Scale::Power(g) => t.powf(g),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderConfig {
    /// Image width and height.
    pub pixels: Vec<usize>,
    pub scale: Scale,
    /// White background with dark mass when set; otherwise mass is bright
    /// on black.
    pub invert: bool,
}

impl RenderConfig {
    pub fn new(pixels: Vec<usize>) -> Result<Self> {
        let cfg = RenderConfig {
            pixels,
            scale: Scale::Power(DEFAULT_GAMMA),
            invert: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pixels.len() != 2 || self.pixels.iter().any(|&p| p < 2) {
            return Err(Error::Config(format!(
                "images need two pixel counts of at least 2, got {:?}",
                self.pixels
            )));
        }
        if let Scale::Power(g) = self.scale {
            if !(g > 0.0 && g <= 1.0) {
                return Err(Error::Config(format!("gamma must lie in (0, 1], got {g}")));
            }
        }
        Ok(())
    }
}

/// Pixel of a grid cell: columns follow dimension 0, rows run from the top
/// of dimension 1 downwards.
fn pixel_of(grid: &Grid, cell: CellId, w: usize, h: usize) -> usize {
    let b = grid.bounds();
    let p = grid.cell_point(cell);
    let bin = |t: f64, lo: f64, hi: f64, n: usize| -> usize {
        let u = ((t - lo) / (hi - lo) * (n - 1) as f64).round();
        (u.max(0.0) as usize).min(n - 1)
    };
    let col = bin(p[0], b[0].lo, b[0].hi, w);
    let row = h - 1 - bin(p[1], b[1].lo, b[1].hi, h);
    row * w + col
}

fn require_2d(grid: &Grid) -> Result<()> {
    if grid.dim() != 2 {
        return Err(Error::Unsupported(format!(
            "images are drawn for 2-dimensional grids; this one has dimension {}",
            grid.dim()
        )));
    }
    Ok(())
}

/// Total weight per pixel, row-major from the top-left corner. With one
/// pixel per lattice point (grids built from pixel counts) every atom has
/// its own pixel.
pub fn pixel_weights(nu: &DiscreteMeasure, pixels: &[usize]) -> Result<Vec<f64>> {
    let grid = nu.grid();
    require_2d(grid)?;
    let (w, h) = (pixels[0], pixels[1]);
    let mut acc = vec![CompensatedSum::new(); w * h];
    for &(c, v) in nu.atoms() {
        acc[pixel_of(grid, c, w, h)].add(v);
    }
    Ok(acc.iter().map(CompensatedSum::value).collect())
}

fn pgm(w: usize, h: usize, gray: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}

/// Grayscale histogram: `gray = 255 − round(255·s(ν/ν_max))` when
/// inverted, `round(255·s(ν/ν_max))` otherwise.
pub fn measure_pgm(nu: &DiscreteMeasure, cfg: &RenderConfig) -> Result<Vec<u8>> {
    cfg.validate()?;
    let weights = pixel_weights(nu, &cfg.pixels)?;
    let max = weights.iter().cloned().fold(0.0, f64::max);
    let gray: Vec<u8> = weights
        .iter()
        .map(|&v| {
            let t = if max > 0.0 { v / max } else { 0.0 };
            let level = (255.0 * cfg.scale.apply(t)).round().clamp(0.0, 255.0) as u8;
            if cfg.invert {
                255 - level
            } else {
                level
            }
        })
        .collect();
    Ok(pgm(cfg.pixels[0], cfg.pixels[1], &gray))
}

/// Binary image of a set of cells: black points on white.
pub fn set_pgm(grid: &Grid, cells: &[CellId], pixels: &[usize]) -> Result<Vec<u8>> {
    require_2d(grid)?;
    if pixels.len() != 2 || pixels.iter().any(|&p| p < 2) {
        return Err(Error::Config(format!("bad pixel counts {pixels:?}")));
    }
    let (w, h) = (pixels[0], pixels[1]);
    let mut gray = vec![255u8; w * h];
    for &c in cells {
        gray[pixel_of(grid, c, w, h)] = 0;
    }
    Ok(pgm(w, h, &gray))
}

/// Reads a P5 image back as `(width, height, gray)`.
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = || Error::Config("not a binary PGM with maxval 255".into());
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?);
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad());
    }
    let w: usize = fields[1].parse().map_err(|_| bad())?;
    let h: usize = fields[2].parse().map_err(|_| bad())?;
    let data = bytes.get(pos + 1..).ok_or_else(bad)?;
    if data.len() != w * h {
        return Err(bad());
    }
    Ok((w, h, data.to_vec()))
}

/// 1-D histogram as `position,weight` lines.
pub fn histogram_csv(nu: &DiscreteMeasure) -> Result<String> {
    let grid = nu.grid();
    if grid.dim() != 1 {
        return Err(Error::Dimension(format!(
            "histograms are written for 1-dimensional measures, got dimension {}",
            grid.dim()
        )));
    }
    let mut out = String::from("position,weight\n");
    for &(c, w) in nu.atoms() {
        let x = grid.cell_point(c)[0];
        writeln!(out, "{x:.16e},{w:.16e}").expect("write to string");
    }
    Ok(out)
}

/// Coordinates of a set of cells, one point per line.
pub fn points_csv(grid: &Grid, cells: &[CellId]) -> String {
    let mut out = format!("# dim={} points={}\n", grid.dim(), cells.len());
    for &c in cells {
        let p = grid.cell_point(c);
        let line: Vec<String> = p.iter().map(|t| format!("{t:.16e}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

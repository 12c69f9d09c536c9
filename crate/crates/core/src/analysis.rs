//! Score-map rasterization and map-similarity metrics.
//!
//! A map becomes an `L × W_max` raster: one row per layer, each layer's
//! score vector linearly resampled to the widest layer's filter count.
//! Rasters are compared by flat Euclidean distance, cosine similarity,
//! Pearson correlation and SSIM.
//!
//! SSIM uses a uniform 8×8 window (clipped to the raster when smaller),
//! stride 1, dynamic range 1, `C1 = 0.01²`, `C2 = 0.03²`, population
//! statistics, averaged over all window positions.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::scoring::ScoreMap;
use crate::{Error, Result};

pub const SSIM_WINDOW: usize = 8;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapRaster {
    pub rows: usize,
    pub cols: usize,
    /// `rows × cols`, row-major.
    pub grid: Vec<f64>,
    /// Cells that sit exactly on an original score.
    pub mask: Vec<bool>,
    /// Layer id of each row.
    pub layers: Vec<usize>,
}

impl MapRaster {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if cols == 0 || rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("raster rows must be non-empty and equal length".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            grid: rows.concat(),
            mask: vec![true; rows.len() * cols],
            layers: (0..rows.len()).collect(),
        })
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.grid[r * self.cols..(r + 1) * self.cols]
    }

    /// The first `n` rows.
    pub fn head(&self, n: usize) -> Self {
        let n = n.min(self.rows);
        Self {
            rows: n,
            cols: self.cols,
            grid: self.grid[..n * self.cols].to_vec(),
            mask: self.mask[..n * self.cols].to_vec(),
            layers: self.layers[..n].to_vec(),
        }
    }
}

/// Linear resampling of `v` onto `len` evenly spaced points spanning the
/// same range; both endpoints are kept.
pub fn resample(v: &[f64], len: usize) -> Vec<f64> {
    let n = v.len();
    if n == 1 || len == 1 {
        return vec![v[0]; len];
    }
    (0..len)
        .map(|j| {
            let num = j * (n - 1);
            let den = len - 1;
            let (i, rem) = (num / den, num % den);
            if rem == 0 {
                v[i]
            } else {
                let t = rem as f64 / den as f64;
                v[i] * (1.0 - t) + v[i + 1] * t
            }
        })
        .collect()
}

pub fn rasterize_map(map: &ScoreMap) -> Result<MapRaster> {
    let layers = map.by_layer();
    let cols = layers.values().map(Vec::len).max().unwrap_or(0);
    if cols == 0 {
        return Err(Error::Shape("cannot rasterize an empty map".into()));
    }
    let mut grid = Vec::with_capacity(layers.len() * cols);
    let mut mask = Vec::with_capacity(layers.len() * cols);
    for v in layers.values() {
        grid.extend(resample(v, cols));
        let n = v.len();
        mask.extend((0..cols).map(|j| match (n, cols) {
            (1, _) => j == 0,
            (_, 1) => true,
            _ => j * (n - 1) % (cols - 1) == 0,
        }));
    }
    Ok(MapRaster {
        rows: layers.len(),
        cols,
        grid,
        mask,
        layers: layers.keys().copied().collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapComparison {
    pub euclidean: f64,
    /// Absent when either raster is all zeros.
    pub cosine: Option<f64>,
    /// Absent when either raster is constant.
    pub pearson: Option<f64>,
    pub ssim: f64,
}

pub fn compare_maps(a: &MapRaster, b: &MapRaster) -> Result<MapComparison> {
    if (a.rows, a.cols) != (b.rows, b.cols) {
        return Err(Error::Shape(alloc::format!(
            "raster shapes differ: {}×{} vs {}×{}",
            a.rows,
            a.cols,
            b.rows,
            b.cols
        )));
    }
    Ok(MapComparison {
        euclidean: euclidean(&a.grid, &b.grid),
        cosine: cosine(&a.grid, &b.grid),
        pearson: pearson(&a.grid, &b.grid),
        ssim: ssim(a, b),
    })
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    libm::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    (na > 0.0 && nb > 0.0).then(|| (dot / libm::sqrt(na * nb)).clamp(-1.0, 1.0))
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    let constant = |v: &[f64]| v.iter().all(|x| *x == v[0]);
    if constant(a) || constant(b) || saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / libm::sqrt(saa * sbb)).clamp(-1.0, 1.0))
}

/// Summed-area table with a zero border: `(rows + 1) × (cols + 1)`.
fn integral(rows: usize, cols: usize, f: impl Fn(usize) -> f64) -> Vec<f64> {
    let w = cols + 1;
    let mut s = vec![0.0; (rows + 1) * w];
    for r in 0..rows {
        let mut acc = 0.0;
        for c in 0..cols {
            acc += f(r * cols + c);
            s[(r + 1) * w + c + 1] = s[r * w + c + 1] + acc;
        }
    }
    s
}

fn ssim(a: &MapRaster, b: &MapRaster) -> f64 {
    let (rows, cols) = (a.rows, a.cols);
    let wh = SSIM_WINDOW.min(rows);
    let ww = SSIM_WINDOW.min(cols);
    let (x, y) = (&a.grid, &b.grid);
    let sx = integral(rows, cols, |i| x[i]);
    let sy = integral(rows, cols, |i| y[i]);
    let sxx = integral(rows, cols, |i| x[i] * x[i]);
    let syy = integral(rows, cols, |i| y[i] * y[i]);
    let sxy = integral(rows, cols, |i| x[i] * y[i]);
    let w = cols + 1;
    let area = (wh * ww) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for r in 0..=rows - wh {
        for c in 0..=cols - ww {
            let sum = |s: &[f64]| {
                s[(r + wh) * w + c + ww] - s[r * w + c + ww] - s[(r + wh) * w + c] + s[r * w + c]
            };
            let mx = sum(&sx) / area;
            let my = sum(&sy) / area;
            let vx = (sum(&sxx) / area - mx * mx).max(0.0);
            let vy = (sum(&syy) / area - my * my).max(0.0);
            let cxy = sum(&sxy) / area - mx * my;
            total += ((2.0 * mx * my + C1) * (2.0 * cxy + C2))
                / ((mx * mx + my * my + C1) * (vx + vy + C2));
            count += 1;
        }
    }
    total / count as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateReport {
    pub all: MapComparison,
    pub first_n: MapComparison,
    pub first_n_layers: usize,
    /// Whether the first layers agree more (by cosine) than the whole net.
    pub first_layers_more_consistent: Option<bool>,
}

/// Compares a map at initialization with one after training, over all
/// layers and over the first `first_n`.
pub fn state_similarity_report(
    map_init: &ScoreMap,
    map_trained: &ScoreMap,
    first_n: usize,
) -> Result<StateReport> {
    if !map_init.scores.keys().eq(map_trained.scores.keys()) {
        return Err(Error::KeyMismatch);
    }
    let a = rasterize_map(map_init)?;
    let b = rasterize_map(map_trained)?;
    let all = compare_maps(&a, &b)?;
    let n = first_n.clamp(1, a.rows);
    let first = compare_maps(&a.head(n), &b.head(n))?;
    let trend = match (first.cosine, all.cosine) {
        (Some(f), Some(g)) => Some(f >= g),
        _ => None,
    };
    Ok(StateReport {
        all,
        first_n: first,
        first_n_layers: n,
        first_layers_more_consistent: trend,
    })
}

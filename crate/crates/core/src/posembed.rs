//! Position-embedding grids and their resizing to arbitrary patch grids.
//!
//! A ViT stores `Q = q * q` learned position embeddings as a flat `Q x l`
//! table. To encode a slice whose patch grid is not `q x q`, the table is
//! viewed as a `q x q x l` grid and bilinearly resampled to the slice's grid.

use ndarray::{Array2, Array3, ArrayView2};

use crate::error::{Error, Result};

/// Row-major grid of `side_h * side_w` embedding vectors of length `dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosEmbedGrid {
    values: Array3<f64>,
}

impl PosEmbedGrid {
    /// Wraps a `(side_h, side_w, dim)` array. All entries must be finite and
    /// every axis non-empty.
    pub fn new(values: Array3<f64>) -> Result<Self> {
        let (h, w, d) = values.dim();
        if h == 0 || w == 0 || d == 0 {
            return Err(Error::ShapeError(format!("empty grid {h}x{w}x{d}")));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite embedding entry at flat index {i}")));
        }
        Ok(Self { values })
    }

    pub fn side_h(&self) -> usize {
        self.values.dim().0
    }

    pub fn side_w(&self) -> usize {
        self.values.dim().1
    }

    pub fn dim(&self) -> usize {
        self.values.dim().2
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.values[[row, col, channel]]
    }

    /// Flattens back to a `(side_h * side_w) x dim` table in row-major order.
    pub fn to_flat(&self) -> Array2<f64> {
        let (h, w, d) = self.values.dim();
        self.values
            .to_owned()
            .into_shape_with_order((h * w, d))
            .expect("contiguous reshape")
    }
}

/// Views a `Q x l` embedding table as a `sqrt(Q) x sqrt(Q)` grid.
pub fn reshape_1d_to_2d(embeddings: ArrayView2<'_, f64>) -> Result<PosEmbedGrid> {
    let (count, dim) = embeddings.dim();
    let side = count.isqrt();
    if count == 0 || side * side != count {
        return Err(Error::NotSquare(count));
    }
    let grid = embeddings
        .to_owned()
        .into_shape_with_order((side, side, dim))
        .map_err(|e| Error::ShapeError(e.to_string()))?;
    PosEmbedGrid::new(grid)
}

/// Bilinear, corner-aligned resampling to `target_h x target_w`.
///
/// Output cell `(i, j)` samples source coordinate
/// `(i * (side_h - 1) / (target_h - 1), j * (side_w - 1) / (target_w - 1))`;
/// a target side of 1 samples the middle of the source axis. Corners map to
/// corners exactly, and every output value stays within the range of the four
/// source values it blends.
pub fn interpolate_2d(grid: &PosEmbedGrid, target_h: usize, target_w: usize) -> Result<PosEmbedGrid> {
    if target_h == 0 || target_w == 0 {
        return Err(Error::InvalidInput(format!(
            "target grid must be non-empty, got {target_h}x{target_w}"
        )));
    }
    let (h, w, d) = grid.values.dim();
    if (h, w) == (target_h, target_w) {
        return Ok(grid.clone());
    }
    let rows: Vec<Tap> = (0..target_h).map(|i| Tap::new(i, h, target_h)).collect();
    let cols: Vec<Tap> = (0..target_w).map(|j| Tap::new(j, w, target_w)).collect();
    let src = &grid.values;
    let out = Array3::from_shape_fn((target_h, target_w, d), |(i, j, c)| {
        let r = rows[i];
        let k = cols[j];
        let top = lerp(src[[r.lo, k.lo, c]], src[[r.lo, k.hi, c]], k.frac);
        let bottom = lerp(src[[r.hi, k.lo, c]], src[[r.hi, k.hi, c]], k.frac);
        lerp(top, bottom, r.frac)
    });
    PosEmbedGrid::new(out)
}

/// Source neighbours and blend weight along one axis.
#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

impl Tap {
    fn new(index: usize, src_len: usize, dst_len: usize) -> Self {
        let pos = if dst_len == 1 {
            (src_len - 1) as f64 / 2.0
        } else {
            (index * (src_len - 1)) as f64 / (dst_len - 1) as f64
        };
        let lo = (pos.floor() as usize).min(src_len - 1);
        let hi = (lo + 1).min(src_len - 1);
        Tap { lo, hi, frac: pos - lo as f64 }
    }
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    let v = a + t * (b - a);
    v.clamp(a.min(b), a.max(b))
}

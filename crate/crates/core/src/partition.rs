//! Adaptive slice planning for high-resolution images of any aspect ratio.
//!
//! An image is cut into an `m x n` grid of slices (`m` columns, `n` rows) whose
//! aspect ratio best matches the vision encoder's pre-training resolution. The
//! grid is chosen among all factorizations of `N - 1`, `N` and `N + 1` slices,
//! where `N` is the ideal slice count derived from the pixel area ratio. Each
//! slice is then resized, keeping its aspect ratio, to roughly the encoder's
//! pre-training area, snapped to whole patches.
//!
//! Grids with more than one slice also carry an overview slice covering the
//! whole image, so the visual token budget is `(slices + overview) * queries`.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest accepted side length, in pixels, for images and encoder inputs.
///
/// Keeps every aspect-ratio product below 2^53 so the exact comparisons in
/// [`plan_partition`] stay in `u128` and scores convert to `f64` losslessly.
pub const MAX_SIDE_PX: u32 = 1 << 20;

/// Largest accepted cap on the ideal slice count.
pub const MAX_SLICE_CAP: u32 = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageGeometry {
    width_px: u32,
    height_px: u32,
}

impl ImageGeometry {
    pub fn new(width_px: u32, height_px: u32) -> Result<Self> {
        check_side("image width", width_px)?;
        check_side("image height", height_px)?;
        Ok(Self { width_px, height_px })
    }

    pub fn width_px(&self) -> u32 {
        self.width_px
    }

    pub fn height_px(&self) -> u32 {
        self.height_px
    }

    pub fn area(&self) -> u64 {
        u64::from(self.width_px) * u64::from(self.height_px)
    }
}

/// Vision-encoder settings relevant to slicing and token accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderProfile {
    vit_width_px: u32,
    vit_height_px: u32,
    patch_px: u32,
    queries_per_slice: u32,
    max_ideal_slices: u32,
}

impl EncoderProfile {
    pub const DEFAULT_PATCH_PX: u32 = 14;
    pub const DEFAULT_MAX_IDEAL_SLICES: u32 = 9;

    pub fn new(
        vit_width_px: u32,
        vit_height_px: u32,
        patch_px: u32,
        queries_per_slice: u32,
        max_ideal_slices: u32,
    ) -> Result<Self> {
        if patch_px == 0 {
            return Err(Error::InvalidInput("patch size must be positive".into()));
        }
        check_side("vit width", vit_width_px)?;
        check_side("vit height", vit_height_px)?;
        if !vit_width_px.is_multiple_of(patch_px) || !vit_height_px.is_multiple_of(patch_px) {
            return Err(Error::InvalidInput(format!(
                "vit resolution {vit_width_px}x{vit_height_px} is not a multiple of patch size {patch_px}"
            )));
        }
        if queries_per_slice == 0 {
            return Err(Error::InvalidInput("queries per slice must be positive".into()));
        }
        if max_ideal_slices == 0 || max_ideal_slices > MAX_SLICE_CAP {
            return Err(Error::InvalidInput(format!(
                "max ideal slices must be in 1..={MAX_SLICE_CAP}, got {max_ideal_slices}"
            )));
        }
        Ok(Self {
            vit_width_px,
            vit_height_px,
            patch_px,
            queries_per_slice,
            max_ideal_slices,
        })
    }

    /// 448x448 encoder, 14px patches, 96 queries, at most 9 slices.
    pub fn minicpm_llama3_v2_5() -> Self {
        Self::new(448, 448, 14, 96, 9).expect("valid preset")
    }

    /// Same geometry with 64 queries per slice.
    pub fn minicpm_v2() -> Self {
        Self::new(448, 448, 14, 64, 9).expect("valid preset")
    }

    pub fn vit_width_px(&self) -> u32 {
        self.vit_width_px
    }

    pub fn vit_height_px(&self) -> u32 {
        self.vit_height_px
    }

    pub fn patch_px(&self) -> u32 {
        self.patch_px
    }

    pub fn queries_per_slice(&self) -> u32 {
        self.queries_per_slice
    }

    pub fn max_ideal_slices(&self) -> u32 {
        self.max_ideal_slices
    }

    pub fn vit_area(&self) -> u64 {
        u64::from(self.vit_width_px) * u64::from(self.vit_height_px)
    }

    /// Patch grid (rows, columns) of the encoder's pre-training resolution.
    pub fn patch_grid(&self) -> (usize, usize) {
        (
            (self.vit_height_px / self.patch_px) as usize,
            (self.vit_width_px / self.patch_px) as usize,
        )
    }
}

fn check_side(what: &str, px: u32) -> Result<()> {
    if px == 0 || px > MAX_SIDE_PX {
        return Err(Error::InvalidInput(format!(
            "{what} must be in 1..={MAX_SIDE_PX}, got {px}"
        )));
    }
    Ok(())
}

/// A grid of `columns x rows` slices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Grid {
    pub columns: u32,
    pub rows: u32,
}

impl Grid {
    pub const fn new(columns: u32, rows: u32) -> Self {
        Self { columns, rows }
    }

    pub fn slice_count(&self) -> u32 {
        self.columns * self.rows
    }
}

impl fmt::Display for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.columns, self.rows)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceRect {
    pub col: u32,
    pub row: u32,
    pub src_x: u32,
    pub src_y: u32,
    pub src_w: u32,
    pub src_h: u32,
    pub enc_w: u32,
    pub enc_h: u32,
}

impl SliceRect {
    pub fn src_area(&self) -> u64 {
        u64::from(self.src_w) * u64::from(self.src_h)
    }

    /// Patch grid (rows, columns) the encoder sees for this slice.
    pub fn patch_grid(&self, enc: &EncoderProfile) -> (usize, usize) {
        (
            (self.enc_h / enc.patch_px) as usize,
            (self.enc_w / enc.patch_px) as usize,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub columns: u32,
    pub rows: u32,
    pub score: f64,
    pub slices: Vec<SliceRect>,
    pub overview: Option<SliceRect>,
    pub visual_token_count: u32,
}

impl PartitionPlan {
    pub fn grid(&self) -> Grid {
        Grid::new(self.columns, self.rows)
    }

    pub fn has_overview(&self) -> bool {
        self.overview.is_some()
    }

    /// Slices followed by the overview, in encoding order.
    pub fn encoded_slices(&self) -> impl Iterator<Item = &SliceRect> {
        self.slices.iter().chain(self.overview.iter())
    }
}

/// `ceil(W_I * H_I / (W_v * H_v))`, clamped to `1..=max_ideal_slices`.
pub fn ideal_slice_count(img: &ImageGeometry, enc: &EncoderProfile) -> u32 {
    let ideal = img.area().div_ceil(enc.vit_area());
    ideal.clamp(1, u64::from(enc.max_ideal_slices)) as u32
}

/// All grids whose slice count is `n_ideal - 1`, `n_ideal` or `n_ideal + 1`,
/// restricted to at most `max_ideal_slices` slices.
///
/// Ordered by slice count, then by column count.
pub fn candidate_partitions(n_ideal: u32, enc: &EncoderProfile) -> Vec<Grid> {
    let lo = n_ideal.saturating_sub(1).max(1);
    let hi = (n_ideal + 1).min(enc.max_ideal_slices);
    let mut out = Vec::new();
    for count in lo..=hi {
        for columns in 1..=count {
            if count % columns == 0 {
                out.push(Grid::new(columns, count / columns));
            }
        }
    }
    out
}

/// `-|log((W_I/m) / (H_I/n)) - log(W_v/H_v)|`.
///
/// Always `<= 0`, and exactly `0.0` when the slice aspect ratio equals the
/// encoder's.
pub fn partition_score(img: &ImageGeometry, enc: &EncoderProfile, m: u32, n: u32) -> f64 {
    let (far, near) = aspect_mismatch(img, enc, Grid::new(m, n));
    if far == near {
        return 0.0;
    }
    -libm::log(far as f64 / near as f64)
}

/// The aspect mismatch of a grid as an exact ratio `far / near >= 1`.
///
/// `(W_I/m)/(H_I/n) / (W_v/H_v) = (W_I * n * H_v) / (H_I * m * W_v)`; the
/// score is minus the log of this ratio or its reciprocal, whichever is >= 1.
fn aspect_mismatch(img: &ImageGeometry, enc: &EncoderProfile, grid: Grid) -> (u128, u128) {
    let a = u128::from(img.width_px) * u128::from(grid.rows) * u128::from(enc.vit_height_px);
    let b = u128::from(img.height_px) * u128::from(grid.columns) * u128::from(enc.vit_width_px);
    if a >= b { (a, b) } else { (b, a) }
}

/// Orders grids from best to worst: smaller aspect mismatch, then fewer
/// slices, then more square, then fewer columns.
fn rank(img: &ImageGeometry, enc: &EncoderProfile, x: Grid, y: Grid) -> Ordering {
    let (xa, xb) = aspect_mismatch(img, enc, x);
    let (ya, yb) = aspect_mismatch(img, enc, y);
    (xa * yb)
        .cmp(&(ya * xb))
        .then(x.slice_count().cmp(&y.slice_count()))
        .then(x.columns.abs_diff(x.rows).cmp(&y.columns.abs_diff(y.rows)))
        .then(x.columns.cmp(&y.columns))
}

/// Picks the best-scoring grid and lays out its slices and overview.
///
/// Grids with more columns than pixel columns (or more rows than pixel rows)
/// are skipped, since they would produce empty slices.
pub fn plan_partition(img: &ImageGeometry, enc: &EncoderProfile) -> PartitionPlan {
    let n_ideal = ideal_slice_count(img, enc);
    let grid = candidate_partitions(n_ideal, enc)
        .into_iter()
        .filter(|g| g.columns <= img.width_px && g.rows <= img.height_px)
        .min_by(|x, y| rank(img, enc, *x, *y))
        .unwrap_or(Grid::new(1, 1));
    build_plan(img, enc, grid)
}

/// Lays out an explicit grid. Panics if the grid has a zero dimension or more
/// columns/rows than the image has pixels.
pub fn build_plan(img: &ImageGeometry, enc: &EncoderProfile, grid: Grid) -> PartitionPlan {
    assert!(grid.columns >= 1 && grid.rows >= 1, "grid must be non-empty");
    assert!(
        grid.columns <= img.width_px && grid.rows <= img.height_px,
        "grid {grid} finer than image {}x{}",
        img.width_px,
        img.height_px
    );
    let xs = boundaries(img.width_px, grid.columns);
    let ys = boundaries(img.height_px, grid.rows);
    let mut slices = Vec::with_capacity(grid.slice_count() as usize);
    for row in 0..grid.rows as usize {
        for col in 0..grid.columns as usize {
            let src_w = xs[col + 1] - xs[col];
            let src_h = ys[row + 1] - ys[row];
            let (enc_w, enc_h) = slice_resize(src_w, src_h, enc);
            slices.push(SliceRect {
                col: col as u32,
                row: row as u32,
                src_x: xs[col],
                src_y: ys[row],
                src_w,
                src_h,
                enc_w,
                enc_h,
            });
        }
    }
    let overview = (grid.slice_count() > 1).then(|| {
        let (enc_w, enc_h) = slice_resize(img.width_px, img.height_px, enc);
        SliceRect {
            col: 0,
            row: 0,
            src_x: 0,
            src_y: 0,
            src_w: img.width_px,
            src_h: img.height_px,
            enc_w,
            enc_h,
        }
    });
    let encoded = slices.len() as u32 + u32::from(overview.is_some());
    PartitionPlan {
        columns: grid.columns,
        rows: grid.rows,
        score: partition_score(img, enc, grid.columns, grid.rows),
        slices,
        overview,
        visual_token_count: encoded * enc.queries_per_slice,
    }
}

// floor(i * len / parts) for i in 0..=parts
fn boundaries(len: u32, parts: u32) -> Vec<u32> {
    (0..=parts)
        .map(|i| (u64::from(i) * u64::from(len) / u64::from(parts)) as u32)
        .collect()
}

/// Resizes a slice proportionally so its area matches the encoder's
/// pre-training area, snapping each side to the nearest positive multiple of
/// the patch size.
pub fn slice_resize(slice_src_w: u32, slice_src_h: u32, enc: &EncoderProfile) -> (u32, u32) {
    let src_area = f64::from(slice_src_w) * f64::from(slice_src_h);
    let k = (enc.vit_area() as f64 / src_area).sqrt();
    let snap = |x: f64| {
        let p = f64::from(enc.patch_px);
        ((x / p).round().max(1.0) as u32) * enc.patch_px
    };
    (snap(k * f64::from(slice_src_w)), snap(k * f64::from(slice_src_h)))
}

/// Visual tokens handed to the LLM for `plan`.
pub fn token_budget(plan: &PartitionPlan, enc: &EncoderProfile) -> u32 {
    (plan.slices.len() as u32 + u32::from(plan.overview.is_some())) * enc.queries_per_slice
}

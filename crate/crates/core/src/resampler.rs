//! Cross-attention compression of per-slice visual tokens.
//!
//! A fixed set of `K` learned queries attends over the `grid_h * grid_w`
//! encoder tokens of one slice, so every slice contributes exactly `K` tokens
//! to the LLM whatever its patch grid. Keys carry a 2D sinusoidal encoding of
//! each token's (row, column) position in the slice.
//!
//! ```text
//! keys    = tokens . w_k + pos_2d(grid_h, grid_w)
//! values  = tokens . w_v
//! queries = query_embeds . w_q
//! out     = softmax(queries . keys^T / sqrt(d_head)) . values . w_o
//! ```

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const DEFAULT_POS_BASE: f64 = 10_000.0;

/// How token positions are injected into the keys.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KeyPositions {
    Sinusoidal { base: f64 },
    Disabled,
}

impl Default for KeyPositions {
    fn default() -> Self {
        KeyPositions::Sinusoidal { base: DEFAULT_POS_BASE }
    }
}

/// Encoder output for one slice, row-major over its patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceTokens {
    grid_h: usize,
    grid_w: usize,
    tokens: Array2<f64>,
}

impl SliceTokens {
    pub fn new(grid_h: usize, grid_w: usize, tokens: Array2<f64>) -> Result<Self> {
        if grid_h == 0 || grid_w == 0 {
            return Err(Error::ShapeError(format!("empty token grid {grid_h}x{grid_w}")));
        }
        if tokens.nrows() != grid_h * grid_w {
            return Err(Error::ShapeError(format!(
                "{} tokens for a {grid_h}x{grid_w} grid",
                tokens.nrows()
            )));
        }
        ensure_finite("slice tokens", tokens.view())?;
        Ok(Self { grid_h, grid_w, tokens })
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.grid_h, self.grid_w)
    }

    pub fn tokens(&self) -> ArrayView2<'_, f64> {
        self.tokens.view()
    }

    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResamplerWeights {
    query_embeds: Array2<f64>,
    w_q: Array2<f64>,
    w_k: Array2<f64>,
    w_v: Array2<f64>,
    w_o: Array2<f64>,
    num_heads: usize,
    positions: KeyPositions,
}

impl ResamplerWeights {
    /// Shapes: `query_embeds` K x d, `w_q` d x d, `w_k` and `w_v` d_v x d,
    /// `w_o` d x d. Single head, sinusoidal key positions with base 10000.
    pub fn new(
        query_embeds: Array2<f64>,
        w_q: Array2<f64>,
        w_k: Array2<f64>,
        w_v: Array2<f64>,
        w_o: Array2<f64>,
    ) -> Result<Self> {
        let (k, d) = query_embeds.dim();
        let d_v = w_k.nrows();
        if k == 0 || d == 0 || d_v == 0 {
            return Err(Error::ShapeError(format!("degenerate resampler K={k} d={d} d_v={d_v}")));
        }
        expect_shape("w_q", &w_q, (d, d))?;
        expect_shape("w_k", &w_k, (d_v, d))?;
        expect_shape("w_v", &w_v, (d_v, d))?;
        expect_shape("w_o", &w_o, (d, d))?;
        for (name, m) in [
            ("query_embeds", &query_embeds),
            ("w_q", &w_q),
            ("w_k", &w_k),
            ("w_v", &w_v),
            ("w_o", &w_o),
        ] {
            ensure_finite(name, m.view())?;
        }
        Ok(Self {
            query_embeds,
            w_q,
            w_k,
            w_v,
            w_o,
            num_heads: 1,
            positions: KeyPositions::default(),
        })
    }

    /// Uniform `±1/sqrt(fan_in)` weights from a ChaCha8 stream; query
    /// embeddings are uniform in `[-1, 1]`.
    pub fn seeded(num_queries: usize, model_dim: usize, input_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |rows: usize, cols: usize, bound: f64| {
            Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..=bound))
        };
        let q = fill(num_queries, model_dim, 1.0);
        let wq = fill(model_dim, model_dim, 1.0 / (model_dim as f64).sqrt());
        let wk = fill(input_dim, model_dim, 1.0 / (input_dim as f64).sqrt());
        let wv = fill(input_dim, model_dim, 1.0 / (input_dim as f64).sqrt());
        let wo = fill(model_dim, model_dim, 1.0 / (model_dim as f64).sqrt());
        Self::new(q, wq, wk, wv, wo).expect("consistent seeded shapes")
    }

    /// Builds weights from a flat float32 payload holding `query_embeds`,
    /// `w_q`, `w_k`, `w_v`, `w_o` back to back, each row-major.
    pub fn from_flat(num_queries: usize, model_dim: usize, input_dim: usize, flat: &[f32]) -> Result<Self> {
        let shapes = [
            (num_queries, model_dim),
            (model_dim, model_dim),
            (input_dim, model_dim),
            (input_dim, model_dim),
            (model_dim, model_dim),
        ];
        let needed: usize = shapes.iter().map(|(r, c)| r * c).sum();
        if flat.len() != needed {
            return Err(Error::ShapeError(format!(
                "weight payload has {} floats, expected {needed}",
                flat.len()
            )));
        }
        let mut offset = 0;
        let mut mats = shapes.iter().map(|&(r, c)| {
            let m = Array2::from_shape_fn((r, c), |(i, j)| f64::from(flat[offset + i * c + j]));
            offset += r * c;
            m
        });
        let mut next = || mats.next().expect("five matrices");
        let (q, wq, wk, wv, wo) = (next(), next(), next(), next(), next());
        Self::new(q, wq, wk, wv, wo)
    }

    pub fn with_heads(mut self, num_heads: usize) -> Result<Self> {
        if num_heads == 0 || !self.model_dim().is_multiple_of(num_heads) {
            return Err(Error::ShapeError(format!(
                "model dim {} not divisible into {num_heads} heads",
                self.model_dim()
            )));
        }
        self.num_heads = num_heads;
        Ok(self)
    }

    pub fn with_positions(mut self, positions: KeyPositions) -> Self {
        self.positions = positions;
        self
    }

    pub fn num_queries(&self) -> usize {
        self.query_embeds.nrows()
    }

    pub fn model_dim(&self) -> usize {
        self.query_embeds.ncols()
    }

    pub fn input_dim(&self) -> usize {
        self.w_k.nrows()
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn positions(&self) -> KeyPositions {
        self.positions
    }

    pub fn query_embeds(&self) -> ArrayView2<'_, f64> {
        self.query_embeds.view()
    }

    pub fn w_v(&self) -> ArrayView2<'_, f64> {
        self.w_v.view()
    }

    pub fn w_o(&self) -> ArrayView2<'_, f64> {
        self.w_o.view()
    }
}

fn expect_shape(name: &str, m: &Array2<f64>, shape: (usize, usize)) -> Result<()> {
    if m.dim() != shape {
        return Err(Error::ShapeError(format!("{name} is {:?}, expected {shape:?}", m.dim())));
    }
    Ok(())
}

fn ensure_finite(name: &str, m: ArrayView2<'_, f64>) -> Result<()> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("{name} contains non-finite values")));
    }
    Ok(())
}

/// Row-major `(grid_h * grid_w) x dim` table. The first `dim / 2` channels
/// encode the row index and the rest the column index, each as interleaved
/// `sin`/`cos` pairs at frequencies `base^(-k / (dim / 4))`.
pub fn pos_encode_2d(grid_h: usize, grid_w: usize, dim: usize, base: f64) -> Result<Array2<f64>> {
    if dim == 0 || !dim.is_multiple_of(4) {
        return Err(Error::BadDim(dim));
    }
    let half = dim / 2;
    let pairs = half / 2;
    let freqs: Vec<f64> = (0..pairs)
        .map(|k| libm::pow(base, -(k as f64) / pairs as f64))
        .collect();
    let mut out = Array2::zeros((grid_h * grid_w, dim));
    for (t, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let coords = [(t / grid_w) as f64, (t % grid_w) as f64];
        for (axis, pos) in coords.into_iter().enumerate() {
            for (k, f) in freqs.iter().enumerate() {
                let angle = pos * f;
                row[axis * half + 2 * k] = libm::sin(angle);
                row[axis * half + 2 * k + 1] = libm::cos(angle);
            }
        }
    }
    Ok(out)
}

/// Compresses one slice to `num_queries x model_dim` tokens.
pub fn compress(slice: &SliceTokens, w: &ResamplerWeights) -> Result<Array2<f64>> {
    Ok(forward(slice, w)?.0)
}

/// The attention matrix (`num_queries x tokens`) used by [`compress`],
/// averaged over heads.
pub fn attention_map(slice: &SliceTokens, w: &ResamplerWeights) -> Result<Array2<f64>> {
    Ok(forward(slice, w)?.1)
}

fn forward(slice: &SliceTokens, w: &ResamplerWeights) -> Result<(Array2<f64>, Array2<f64>)> {
    if slice.tokens.ncols() != w.input_dim() {
        return Err(Error::ShapeError(format!(
            "tokens have width {}, resampler expects {}",
            slice.tokens.ncols(),
            w.input_dim()
        )));
    }
    let d = w.model_dim();
    let mut keys = slice.tokens.dot(&w.w_k);
    if let KeyPositions::Sinusoidal { base } = w.positions {
        let pos = pos_encode_2d(slice.grid_h, slice.grid_w, d, base)?;
        keys += &pos;
    }
    let values = slice.tokens.dot(&w.w_v);
    let queries = w.query_embeds.dot(&w.w_q);

    let heads = w.num_heads;
    let head_dim = d / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut mixed = Array2::zeros((w.num_queries(), d));
    let mut mean_attn = Array2::zeros((w.num_queries(), slice.len()));
    for h in 0..heads {
        let cols = s![.., h * head_dim..(h + 1) * head_dim];
        let mut attn = queries.slice(cols).dot(&keys.slice(cols).t()) * scale;
        attn.rows_mut().into_iter().for_each(|mut row| softmax_in_place(row.as_slice_mut().expect("row-major")));
        mixed.slice_mut(cols).assign(&attn.dot(&values.slice(cols)));
        mean_attn += &attn;
    }
    if heads > 1 {
        mean_attn /= heads as f64;
    }
    Ok((mixed.dot(&w.w_o), mean_attn))
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = libm::exp(*v - max);
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn random_tokens(grid_h: usize, grid_w: usize, dim: usize, seed: u64) -> SliceTokens {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = Array2::from_shape_simple_fn((grid_h * grid_w, dim), || rng.random_range(-1.0..1.0));
        SliceTokens::new(grid_h, grid_w, t).unwrap()
    }

    #[test]
    fn pos_encoding_values() {
        let p = pos_encode_2d(1, 1, 4, 10_000.0).unwrap();
        assert_eq!(p.row(0).to_vec(), vec![0.0, 1.0, 0.0, 1.0]);
        let p = pos_encode_2d(2, 1, 4, 10_000.0).unwrap();
        let r = p.row(1);
        assert!((r[0] - 0.841471).abs() < 1e-6);
        assert!((r[1] - 0.540302).abs() < 1e-6);
        assert_eq!((r[2], r[3]), (0.0, 1.0));
        let p = pos_encode_2d(13, 7, 16, 10_000.0).unwrap();
        assert!(p.iter().all(|v| (-1.0..=1.0).contains(v)));
        // column channels follow the column index
        let c = pos_encode_2d(1, 3, 8, 10_000.0).unwrap();
        assert!((c[[2, 4]] - 2f64.sin()).abs() < 1e-15);
        assert!((c[[2, 6]] - (2.0 * 0.01f64).sin()).abs() < 1e-12);
    }

    #[test]
    fn pos_encoding_rejects_bad_dim() {
        assert!(matches!(pos_encode_2d(2, 2, 6, 10_000.0), Err(Error::BadDim(6))));
        assert!(matches!(pos_encode_2d(2, 2, 0, 10_000.0), Err(Error::BadDim(0))));
    }

    #[test]
    fn compress_shape_is_fixed() {
        let w = ResamplerWeights::seeded(96, 64, 32, 7);
        for (gh, gw) in [(1, 1), (8, 8), (32, 32), (3, 17)] {
            let out = compress(&random_tokens(gh, gw, 32, 1), &w).unwrap();
            assert_eq!(out.dim(), (96, 64));
        }
    }

    #[test]
    fn single_token_attends_fully() {
        let w = ResamplerWeights::seeded(5, 8, 4, 3);
        let slice = SliceTokens::new(1, 1, array![[0.3, -0.2, 0.9, 0.1]]).unwrap();
        let attn = attention_map(&slice, &w).unwrap();
        assert_eq!(attn, Array2::<f64>::ones((5, 1)));
        let out = compress(&slice, &w).unwrap();
        let expected = slice.tokens().dot(&w.w_v()).dot(&w.w_o());
        for row in out.rows() {
            for (a, b) in row.iter().zip(expected.row(0).iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_tokens_without_positions_attend_uniformly() {
        let w = ResamplerWeights::seeded(4, 8, 6, 11).with_positions(KeyPositions::Disabled);
        let slice = SliceTokens::new(3, 5, Array2::zeros((15, 6))).unwrap();
        let attn = attention_map(&slice, &w).unwrap();
        assert!(attn.iter().all(|&a| (a - 1.0 / 15.0).abs() < 1e-15));
    }

    #[test]
    fn multi_head_rows_still_normalized() {
        let w = ResamplerWeights::seeded(6, 16, 8, 5).with_heads(4).unwrap();
        let attn = attention_map(&random_tokens(4, 4, 8, 2), &w).unwrap();
        for row in attn.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert!(ResamplerWeights::seeded(6, 16, 8, 5).with_heads(3).is_err());
    }

    #[test]
    fn shape_errors() {
        let w = ResamplerWeights::seeded(4, 8, 6, 1);
        assert!(matches!(compress(&random_tokens(2, 2, 5, 0), &w), Err(Error::ShapeError(_))));
        assert!(SliceTokens::new(2, 2, Array2::zeros((3, 6))).is_err());
        let w = ResamplerWeights::seeded(4, 6, 6, 1);
        assert!(matches!(compress(&random_tokens(2, 2, 6, 0), &w), Err(Error::BadDim(6))));
    }

    #[test]
    fn from_flat_round_trip() {
        let (k, d, dv) = (2, 4, 3);
        let n = k * d + d * d + 2 * dv * d + d * d;
        let flat: Vec<f32> = (0..n).map(|i| i as f32 * 0.25).collect();
        let w = ResamplerWeights::from_flat(k, d, dv, &flat).unwrap();
        assert_eq!(w.query_embeds()[[1, 3]], 7.0 * 0.25);
        assert_eq!(w.w_o()[[0, 0]], (n - d * d) as f64 * 0.25);
        assert!(ResamplerWeights::from_flat(k, d, dv, &flat[1..]).is_err());
    }
}

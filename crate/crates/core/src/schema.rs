//! Spatial token layout for sliced images.
//!
//! The overview's tokens come first, unwrapped, followed by one row
//! separator. Each slice's tokens are wrapped in `<slice>` ... `<\slice>`, and
//! consecutive grid rows are separated by the row separator. A single-slice
//! plan is emitted as bare placeholders.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::partition::{EncoderProfile, PartitionPlan};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaConfig {
    pub slice_open: String,
    pub slice_close: String,
    pub row_sep: String,
    pub img_placeholder: String,
}

impl Default for SchemaConfig {
    fn default() -> Self {
        Self {
            slice_open: "<slice>".into(),
            slice_close: "<\\slice>".into(),
            row_sep: "\n".into(),
            img_placeholder: "<IMG>".into(),
        }
    }
}

impl SchemaConfig {
    pub fn validate(&self) -> Result<()> {
        let toks = [&self.slice_open, &self.slice_close, &self.row_sep, &self.img_placeholder];
        if toks.iter().any(|t| t.is_empty()) {
            return Err(Error::InvalidInput("schema tokens must be non-empty".into()));
        }
        for (i, a) in toks.iter().enumerate() {
            if toks[i + 1..].contains(a) {
                return Err(Error::InvalidInput(format!("schema token {a:?} used twice")));
            }
        }
        Ok(())
    }

    fn classify(&self, tok: &str) -> Option<Sym> {
        if tok == self.img_placeholder {
            Some(Sym::Img)
        } else if tok == self.slice_open {
            Some(Sym::Open)
        } else if tok == self.slice_close {
            Some(Sym::Close)
        } else if tok == self.row_sep {
            Some(Sym::RowSep)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Sym {
    Img,
    Open,
    Close,
    RowSep,
}

/// Location of one slice's placeholders inside a [`TokenLayout`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SliceSpan {
    pub row: u32,
    pub col: u32,
    pub placeholders: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenLayout {
    pub tokens: Vec<String>,
    pub overview: Option<Range<usize>>,
    pub slices: Vec<SliceSpan>,
}

impl TokenLayout {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// The shape recovered by [`parse_layout`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayoutShape {
    pub columns: u32,
    pub rows: u32,
    pub queries_per_slice: u32,
    pub overview_present: bool,
}

pub fn serialize_layout(plan: &PartitionPlan, enc: &EncoderProfile, cfg: &SchemaConfig) -> TokenLayout {
    let q = enc.queries_per_slice() as usize;
    let mut tokens = Vec::with_capacity(plan.visual_token_count as usize + count_schema_tokens(plan));
    let mut slices = Vec::with_capacity(plan.slices.len());
    let push_placeholders = |tokens: &mut Vec<String>| {
        let start = tokens.len();
        tokens.extend(std::iter::repeat_n(cfg.img_placeholder.clone(), q));
        start..tokens.len()
    };

    if plan.overview.is_none() && plan.slices.len() == 1 {
        let span = push_placeholders(&mut tokens);
        slices.push(SliceSpan { row: 0, col: 0, placeholders: span });
        return TokenLayout { tokens, overview: None, slices };
    }

    let overview = plan.overview.map(|_| {
        let span = push_placeholders(&mut tokens);
        tokens.push(cfg.row_sep.clone());
        span
    });
    for row in 0..plan.rows {
        if row > 0 {
            tokens.push(cfg.row_sep.clone());
        }
        for col in 0..plan.columns {
            tokens.push(cfg.slice_open.clone());
            let span = push_placeholders(&mut tokens);
            tokens.push(cfg.slice_close.clone());
            slices.push(SliceSpan { row, col, placeholders: span });
        }
    }
    TokenLayout { tokens, overview, slices }
}

/// Recovers grid shape, per-slice query count and overview presence.
pub fn parse_layout<S: AsRef<str>>(tokens: &[S], cfg: &SchemaConfig) -> Result<LayoutShape> {
    let malformed = |msg: String| Error::MalformedSchema(msg);
    let syms = tokens
        .iter()
        .enumerate()
        .map(|(i, t)| {
            cfg.classify(t.as_ref())
                .ok_or_else(|| malformed(format!("unknown token {:?} at {i}", t.as_ref())))
        })
        .collect::<Result<Vec<_>>>()?;
    if syms.is_empty() {
        return Err(malformed("empty layout".into()));
    }

    if syms.iter().all(|s| *s == Sym::Img) {
        return Ok(LayoutShape {
            columns: 1,
            rows: 1,
            queries_per_slice: syms.len() as u32,
            overview_present: false,
        });
    }

    let mut pos = 0;
    let leading = syms.iter().take_while(|s| **s == Sym::Img).count();
    let overview_q = if leading > 0 {
        pos = leading;
        if syms.get(pos) != Some(&Sym::RowSep) {
            return Err(malformed(format!("expected row separator after overview at {pos}")));
        }
        pos += 1;
        Some(leading)
    } else {
        None
    };

    let mut per_slice_q: Option<usize> = overview_q;
    let mut columns: Option<usize> = None;
    let mut rows = 0usize;
    loop {
        let mut row_cols = 0usize;
        while pos < syms.len() && syms[pos] != Sym::RowSep {
            if syms[pos] != Sym::Open {
                return Err(malformed(format!("expected slice opener at {pos}")));
            }
            pos += 1;
            let count = syms[pos..].iter().take_while(|s| **s == Sym::Img).count();
            pos += count;
            match syms.get(pos) {
                Some(Sym::Close) => pos += 1,
                Some(_) => return Err(malformed(format!("nested or stray token inside slice at {pos}"))),
                None => return Err(malformed("unterminated slice".into())),
            }
            if count == 0 {
                return Err(malformed(format!("empty slice ending at {}", pos - 1)));
            }
            match per_slice_q {
                None => per_slice_q = Some(count),
                Some(q) if q != count => {
                    return Err(malformed(format!("slice has {count} placeholders, expected {q}")));
                }
                Some(_) => {}
            }
            row_cols += 1;
        }
        if row_cols == 0 {
            return Err(malformed(format!("empty row {rows}")));
        }
        match columns {
            None => columns = Some(row_cols),
            Some(c) if c != row_cols => {
                return Err(malformed(format!("row {rows} has {row_cols} slices, expected {c}")));
            }
            Some(_) => {}
        }
        rows += 1;
        if pos == syms.len() {
            break;
        }
        pos += 1; // row separator
    }

    Ok(LayoutShape {
        columns: columns.expect("at least one row") as u32,
        rows: rows as u32,
        queries_per_slice: per_slice_q.expect("at least one slice") as u32,
        overview_present: overview_q.is_some(),
    })
}

/// Wrap tokens plus separators: `2 * m * n + (n - 1) + 1`, or 0 for a single
/// unwrapped slice.
pub fn count_schema_tokens(plan: &PartitionPlan) -> usize {
    if plan.overview.is_none() && plan.slices.len() == 1 {
        return 0;
    }
    let (m, n) = (plan.columns as usize, plan.rows as usize);
    2 * m * n + (n - 1) + usize::from(plan.overview.is_some())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::{build_plan, Grid, ImageGeometry};

    fn plan(m: u32, n: u32, q: u32) -> (PartitionPlan, EncoderProfile) {
        let enc = EncoderProfile::new(448, 448, 14, q, 9).unwrap();
        let img = ImageGeometry::new(1000, 1000).unwrap();
        (build_plan(&img, &enc, Grid::new(m, n)), enc)
    }

    #[test]
    fn single_slice_is_bare() {
        let (p, enc) = plan(1, 1, 2);
        let l = serialize_layout(&p, &enc, &SchemaConfig::default());
        assert_eq!(l.tokens, vec!["<IMG>", "<IMG>"]);
        assert_eq!(count_schema_tokens(&p), 0);
    }

    #[test]
    fn two_columns_one_row() {
        let (p, enc) = plan(2, 1, 1);
        let l = serialize_layout(&p, &enc, &SchemaConfig::default());
        assert_eq!(
            l.tokens,
            vec!["<IMG>", "\n", "<slice>", "<IMG>", "<\\slice>", "<slice>", "<IMG>", "<\\slice>"]
        );
        assert_eq!(l.overview, Some(0..1));
        assert_eq!(l.slices[1].placeholders, 6..7);
    }

    #[test]
    fn three_by_three_length() {
        let (p, enc) = plan(3, 3, 96);
        let l = serialize_layout(&p, &enc, &SchemaConfig::default());
        assert_eq!(l.len(), 981);
        assert_eq!(count_schema_tokens(&p), 21);
        let (p, enc) = plan(4, 1, 96);
        let l = serialize_layout(&p, &enc, &SchemaConfig::default());
        assert_eq!(count_schema_tokens(&p), 9);
        assert_eq!(count_schema_tokens(&p), l.len() - p.visual_token_count as usize);
    }

    #[test]
    fn round_trip() {
        let cfg = SchemaConfig::default();
        let (p, enc) = plan(2, 2, 3);
        let l = serialize_layout(&p, &enc, &cfg);
        assert_eq!(
            parse_layout(&l.tokens, &cfg).unwrap(),
            LayoutShape { columns: 2, rows: 2, queries_per_slice: 3, overview_present: true }
        );
    }

    #[test]
    fn malformed_inputs() {
        let cfg = SchemaConfig::default();
        let bad: &[&[&str]] = &[
            &["<slice>", "<IMG>"],
            &[],
            &["<IMG>", "\n", "<slice>", "<slice>", "<IMG>", "<\\slice>", "<\\slice>"],
            &["<IMG>", "\n", "<slice>", "<IMG>", "<\\slice>", "<slice>", "<IMG>", "<IMG>", "<\\slice>"],
            &["<IMG>", "\n", "<slice>", "<IMG>", "<\\slice>", "\n", "<slice>", "<IMG>", "<\\slice>", "<slice>", "<IMG>", "<\\slice>"],
            &["<IMG>", "<slice>", "<IMG>", "<\\slice>"],
            &["<IMG>", "\n", "<slice>", "<\\slice>"],
            &["<IMG>", "\n"],
            &["<IMG>", "oops"],
            &["<\\slice>"],
        ];
        for toks in bad {
            assert!(
                matches!(parse_layout(toks, &cfg), Err(Error::MalformedSchema(_))),
                "{toks:?}"
            );
        }
    }

    #[test]
    fn config_validation() {
        assert!(SchemaConfig::default().validate().is_ok());
        let cfg = SchemaConfig { row_sep: "<IMG>".into(), ..SchemaConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = SchemaConfig { slice_open: String::new(), ..SchemaConfig::default() };
        assert!(cfg.validate().is_err());
    }
}

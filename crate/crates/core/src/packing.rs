//! Greedy fixed-length sequence packing.
//!
//! Samples are appended in arrival order. The sample that crosses the end of
//! a sequence is cut to fill it exactly and the rest of that sample is
//! discarded; the next sequence starts with the following sample. Position
//! ids restart at every segment and the attention mask is block-diagonal, so
//! packed samples never see each other.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub length: usize,
}

impl SampleRecord {
    pub fn new(id: impl Into<String>, length: usize) -> Self {
        Self { id: id.into(), length }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub id: String,
    #[serde(rename = "len")]
    pub taken_length: usize,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedSequence {
    #[serde(skip)]
    pub capacity: usize,
    pub segments: Vec<Segment>,
    #[serde(rename = "pad")]
    pub pad_length: usize,
}

impl PackedSequence {
    fn empty(capacity: usize) -> Self {
        Self { capacity, segments: Vec::new(), pad_length: 0 }
    }

    pub fn used(&self) -> usize {
        self.segments.iter().map(|s| s.taken_length).sum()
    }

    /// Segment index of every position; `None` for padding.
    pub fn segment_ids(&self) -> Vec<Option<usize>> {
        let mut ids = Vec::with_capacity(self.capacity);
        for (i, seg) in self.segments.iter().enumerate() {
            ids.extend(std::iter::repeat_n(Some(i), seg.taken_length));
        }
        ids.resize(self.capacity, None);
        ids
    }

    /// Checks the sequence invariants: lengths add up to capacity, every
    /// segment is non-empty and only the last one may be truncated.
    pub fn validate(&self) -> Result<()> {
        if self.used() + self.pad_length != self.capacity {
            return Err(Error::InvalidInput(format!(
                "segments ({}) plus pad ({}) do not fill capacity {}",
                self.used(),
                self.pad_length,
                self.capacity
            )));
        }
        if self.segments.iter().any(|s| s.taken_length == 0) {
            return Err(Error::InvalidInput("empty segment".into()));
        }
        let n = self.segments.len();
        if self.segments.iter().take(n.saturating_sub(1)).any(|s| s.truncated) {
            return Err(Error::InvalidInput("truncated segment before the tail".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TailPolicy {
    Pad,
    Drop,
}

/// Output of [`pack`] with token accounting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackOutcome {
    pub sequences: Vec<PackedSequence>,
    /// Tokens cut from samples that crossed a sequence boundary.
    pub truncated_tokens: usize,
    /// Tokens in an unfilled final sequence discarded under [`TailPolicy::Drop`].
    pub dropped_tail_tokens: usize,
}

pub fn pack(samples: &[SampleRecord], capacity: usize, tail_policy: TailPolicy) -> Result<PackOutcome> {
    if capacity == 0 {
        return Err(Error::InvalidInput("capacity must be positive".into()));
    }
    if let Some(s) = samples.iter().find(|s| s.length == 0) {
        return Err(Error::InvalidInput(format!("sample {:?} has zero length", s.id)));
    }

    let mut sequences = Vec::new();
    let mut truncated_tokens = 0;
    let mut current = PackedSequence::empty(capacity);
    let mut used = 0;
    for sample in samples {
        let room = capacity - used;
        let take = sample.length.min(room);
        let truncated = take < sample.length;
        current.segments.push(Segment { id: sample.id.clone(), taken_length: take, truncated });
        truncated_tokens += sample.length - take;
        used += take;
        if used == capacity {
            sequences.push(std::mem::replace(&mut current, PackedSequence::empty(capacity)));
            used = 0;
        }
    }

    let mut dropped_tail_tokens = 0;
    if used > 0 {
        match tail_policy {
            TailPolicy::Pad => {
                current.pad_length = capacity - used;
                sequences.push(current);
            }
            TailPolicy::Drop => dropped_tail_tokens = used,
        }
    }
    Ok(PackOutcome { sequences, truncated_tokens, dropped_tail_tokens })
}

/// Per-segment positions `0..len`; padding gets position 0.
pub fn position_ids(seq: &PackedSequence) -> Vec<usize> {
    let mut ids = Vec::with_capacity(seq.capacity);
    for seg in &seq.segments {
        ids.extend(0..seg.taken_length);
    }
    ids.resize(seq.capacity, 0);
    ids
}

/// `mask[[i, j]]` is true iff `i` and `j` are in the same segment (and
/// `j <= i` when causal). Padding rows and columns are all false.
pub fn attention_mask(seq: &PackedSequence, causal: bool) -> Array2<bool> {
    let ids = seq.segment_ids();
    Array2::from_shape_fn((seq.capacity, seq.capacity), |(i, j)| match (ids[i], ids[j]) {
        (Some(a), Some(b)) => a == b && (!causal || j <= i),
        _ => false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn samples(lengths: &[usize]) -> Vec<SampleRecord> {
        lengths
            .iter()
            .enumerate()
            .map(|(i, &l)| SampleRecord::new(format!("s{}", i + 1), l))
            .collect()
    }

    fn seg(id: &str, len: usize, truncated: bool) -> Segment {
        Segment { id: id.into(), taken_length: len, truncated }
    }

    #[test]
    fn greedy_fill_then_pad() {
        let out = pack(&samples(&[5, 3, 4]), 8, TailPolicy::Pad).unwrap();
        assert_eq!(out.sequences.len(), 2);
        assert_eq!(out.sequences[0].segments, vec![seg("s1", 5, false), seg("s2", 3, false)]);
        assert_eq!(out.sequences[0].pad_length, 0);
        assert_eq!(out.sequences[1].segments, vec![seg("s3", 4, false)]);
        assert_eq!(out.sequences[1].pad_length, 4);
        assert_eq!(position_ids(&out.sequences[0]), vec![0, 1, 2, 3, 4, 0, 1, 2]);
    }

    #[test]
    fn boundary_sample_is_truncated() {
        let out = pack(&samples(&[6, 5]), 8, TailPolicy::Pad).unwrap();
        assert_eq!(out.sequences.len(), 1);
        assert_eq!(out.sequences[0].segments, vec![seg("s1", 6, false), seg("s2", 2, true)]);
        assert_eq!(out.truncated_tokens, 3);
    }

    #[test]
    fn exact_fit_and_oversized_first_sample() {
        let out = pack(&samples(&[8]), 8, TailPolicy::Pad).unwrap();
        assert_eq!(out.sequences.len(), 1);
        assert_eq!(out.sequences[0].pad_length, 0);
        let out = pack(&samples(&[20, 3]), 8, TailPolicy::Pad).unwrap();
        assert_eq!(out.sequences[0].segments, vec![seg("s1", 8, true)]);
        assert_eq!(out.sequences[1].segments, vec![seg("s2", 3, false)]);
        assert_eq!(out.truncated_tokens, 12);
    }

    #[test]
    fn drop_policy_discards_partial_tail() {
        let out = pack(&samples(&[5, 3, 4]), 8, TailPolicy::Drop).unwrap();
        assert_eq!(out.sequences.len(), 1);
        assert_eq!(out.dropped_tail_tokens, 4);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(pack(&samples(&[1]), 0, TailPolicy::Pad).is_err());
        assert!(pack(&samples(&[1, 0]), 4, TailPolicy::Pad).is_err());
        assert!(pack(&[], 4, TailPolicy::Pad).unwrap().sequences.is_empty());
    }

    #[test]
    fn masks() {
        let seq = PackedSequence {
            capacity: 4,
            segments: vec![seg("a", 2, false), seg("b", 2, false)],
            pad_length: 0,
        };
        let m = attention_mask(&seq, false);
        let expected = [
            [true, true, false, false],
            [true, true, false, false],
            [false, false, true, true],
            [false, false, true, true],
        ];
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(m[[i, j]], expected[i][j]);
                assert_eq!(attention_mask(&seq, true)[[i, j]], expected[i][j] && j <= i);
            }
        }
    }

    #[test]
    fn all_pad_sequence() {
        let seq = PackedSequence { capacity: 3, segments: vec![], pad_length: 3 };
        assert_eq!(position_ids(&seq), vec![0, 0, 0]);
        assert!(attention_mask(&seq, false).iter().all(|v| !v));
        assert!(seq.validate().is_ok());
        let single = PackedSequence { capacity: 4, segments: vec![seg("x", 4, false)], pad_length: 0 };
        assert_eq!(position_ids(&single), vec![0, 1, 2, 3]);
    }
}

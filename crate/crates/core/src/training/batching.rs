use crate::model::Example;
use crate::unirep::{MultimodalSequence, Segment};
use crate::vocab::{TokenId, BOS, PAD};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BatchError {
    #[error("no sequences to batch")]
    Empty,
    #[error("batch size must be at least 1")]
    ZeroBatchSize,
}

/// With probability `p`, removes every token strictly between BOS and the
/// first SOI, leaving `BOS SOI …`. Sequences without an image span (or not
/// starting with BOS) pass through untouched and consume no randomness.
///
/// Returns the sequence and whether a drop happened.
pub fn apply_context_drop<R: Rng>(seq: &MultimodalSequence, p: f64, rng: &mut R) -> (MultimodalSequence, bool) {
    let soi = match seq.first_soi() {
        Some(i) if seq.tokens.first() == Some(&BOS) => i,
        _ => return (seq.clone(), false),
    };
    if !(rng.random::<f64>() < p) || soi <= 1 {
        return (seq.clone(), false);
    }
    let out = MultimodalSequence {
        tokens: keep_ends(&seq.tokens, soi),
        loss_mask: keep_ends(&seq.loss_mask, soi),
        segments: keep_ends(&seq.segments, soi),
    };
    (out, true)
}

fn keep_ends<T: Copy>(v: &[T], from: usize) -> Vec<T> {
    std::iter::once(v[0]).chain(v[from..].iter().copied()).collect()
}

/// Sequences grouped by similar token count, padded to the batch maximum.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedBatch {
    /// Positions of the member sequences in the input list.
    pub indices: Vec<usize>,
    pub tokens: Vec<Vec<TokenId>>,
    pub loss_mask: Vec<Vec<bool>>,
    pub lengths: Vec<usize>,
    pub max_len: usize,
    pub min_len: usize,
}

impl PackedBatch {
    /// Unpadded next-token examples for the batch members.
    pub fn examples(&self) -> Vec<Example> {
        self.tokens
            .iter()
            .zip(&self.loss_mask)
            .zip(&self.lengths)
            .map(|((t, m), &n)| {
                let n1 = n.saturating_sub(1);
                Example { tokens: t[..n1].to_vec(), targets: t[1..n].to_vec(), mask: m[1..n].to_vec() }
            })
            .collect()
    }
}

/// Stable sort by length (ties by input index), then consecutive chunks.
pub fn cluster_by_length(lengths: &[usize], batch_size: usize) -> Result<Vec<Vec<usize>>, BatchError> {
    if batch_size == 0 {
        return Err(BatchError::ZeroBatchSize);
    }
    if lengths.is_empty() {
        return Err(BatchError::Empty);
    }
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by_key(|&i| (lengths[i], i));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

pub fn cluster_batches(seqs: &[MultimodalSequence], batch_size: usize) -> Result<Vec<PackedBatch>, BatchError> {
    let lengths: Vec<usize> = seqs.iter().map(MultimodalSequence::len).collect();
    let groups = cluster_by_length(&lengths, batch_size)?;
    Ok(groups
        .into_iter()
        .map(|indices| {
            let lens: Vec<usize> = indices.iter().map(|&i| lengths[i]).collect();
            let max_len = *lens.iter().max().expect("non-empty chunk");
            let min_len = *lens.iter().min().expect("non-empty chunk");
            let pad = |i: usize| {
                let s = &seqs[i];
                let mut t = s.tokens.clone();
                let mut m = s.loss_mask.clone();
                t.resize(max_len, PAD);
                m.resize(max_len, false);
                (t, m)
            };
            let (tokens, loss_mask) = indices.iter().map(|&i| pad(i)).unzip();
            PackedBatch { indices, tokens, loss_mask, lengths: lens, max_len, min_len }
        })
        .collect())
}

/// Sequence of `len` tokens with arbitrary content; for tests and benches.
#[doc(hidden)]
pub fn dummy_sequence(len: usize) -> MultimodalSequence {
    MultimodalSequence {
        tokens: (0..len as u32).map(|i| 9 + i % 7).collect(),
        loss_mask: vec![true; len],
        segments: vec![Segment::Text; len],
    }
}

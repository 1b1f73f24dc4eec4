use rand::Rng;

use super::vocab::{Vocabulary, CLS, FIRST_REGULAR_ID, IGNORE_LABEL, MASK, PAD, SEP};
use crate::error::{Error, Result};

/// Masking rate used in pre-training.
pub const DEFAULT_MASK_RATE: f64 = 0.15;
/// Probabilities of the three treatments of a selected token.
pub const MASK_TOKEN_PROB: f64 = 0.8;
pub const RANDOM_TOKEN_PROB: f64 = 0.1;

/// What happened to one position during masking.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskAction {
    /// Not selected; no label.
    Untouched,
    /// Replaced with `[MASK]`.
    Masked,
    /// Replaced with a uniformly drawn regular token.
    Randomized,
    /// Selected but left as is.
    Kept,
}

/// One masked sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedRow {
    pub input_ids: Vec<u32>,
    pub labels: Vec<u32>,
    pub actions: Vec<MaskAction>,
}

/// `[PAD]`, `[CLS]` and `[SEP]` are never selected.
pub fn is_maskable(id: u32) -> bool {
    !matches!(id, PAD | CLS | SEP)
}

/// Selects each maskable position with probability `mask_rate` and applies
/// the 80/10/10 mask/random/keep treatment to the selection.
pub fn apply_mlm_mask<R: Rng + ?Sized>(ids: &[u32], vocab_size: usize, rng: &mut R, mask_rate: f64) -> MaskedRow {
    let mut input_ids = ids.to_vec();
    let mut labels = vec![IGNORE_LABEL; ids.len()];
    let mut actions = vec![MaskAction::Untouched; ids.len()];
    let regular = (vocab_size as u32).saturating_sub(FIRST_REGULAR_ID);
    for (i, &id) in ids.iter().enumerate() {
        if !is_maskable(id) || rng.random::<f64>() >= mask_rate {
            continue;
        }
        labels[i] = id;
        let u: f64 = rng.random();
        actions[i] = if u < MASK_TOKEN_PROB {
            input_ids[i] = MASK;
            MaskAction::Masked
        } else if u < MASK_TOKEN_PROB + RANDOM_TOKEN_PROB && regular > 0 {
            input_ids[i] = FIRST_REGULAR_ID + rng.random_range(0..regular);
            MaskAction::Randomized
        } else {
            MaskAction::Kept
        };
    }
    MaskedRow { input_ids, labels, actions }
}

/// A padded batch of sequences with MLM labels.
///
/// All arrays are row-major `[batch_size, seq_len]`. `pad_mask[i]` is true
/// for padding positions.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedBatch {
    pub input_ids: Vec<u32>,
    pub labels: Vec<u32>,
    pub pad_mask: Vec<bool>,
    pub batch_size: usize,
    pub seq_len: usize,
}

impl MaskedBatch {
    /// Pads rows to a common length.
    pub fn from_rows(rows: &[MaskedRow]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let seq_len = rows.iter().map(|r| r.input_ids.len()).max().unwrap_or(0);
        let mut batch = MaskedBatch {
            input_ids: Vec::with_capacity(rows.len() * seq_len),
            labels: Vec::with_capacity(rows.len() * seq_len),
            pad_mask: Vec::with_capacity(rows.len() * seq_len),
            batch_size: rows.len(),
            seq_len,
        };
        for r in rows {
            if r.input_ids.first() != Some(&CLS) {
                return Err(Error::InvalidArgument("every sequence must start with [CLS]".into()));
            }
            let pad = seq_len - r.input_ids.len();
            batch.input_ids.extend(r.input_ids.iter().copied().chain(std::iter::repeat_n(PAD, pad)));
            batch.labels.extend(r.labels.iter().copied().chain(std::iter::repeat_n(IGNORE_LABEL, pad)));
            batch.pad_mask.extend(r.input_ids.iter().map(|&id| id == PAD).chain(std::iter::repeat_n(true, pad)));
        }
        Ok(batch)
    }

    /// Batch without any MLM targets.
    pub fn unmasked(seqs: &[Vec<u32>]) -> Result<Self> {
        let rows: Vec<MaskedRow> = seqs
            .iter()
            .map(|s| MaskedRow {
                input_ids: s.clone(),
                labels: vec![IGNORE_LABEL; s.len()],
                actions: vec![MaskAction::Untouched; s.len()],
            })
            .collect();
        Self::from_rows(&rows)
    }

    /// Masks each sequence independently and pads the result.
    pub fn masked<R: Rng + ?Sized>(seqs: &[Vec<u32>], vocab: &Vocabulary, rng: &mut R, mask_rate: f64) -> Result<Self> {
        let rows: Vec<MaskedRow> = seqs.iter().map(|s| apply_mlm_mask(s, vocab.len(), rng, mask_rate)).collect();
        Self::from_rows(&rows)
    }

    pub fn row_ids(&self, b: usize) -> &[u32] {
        &self.input_ids[b * self.seq_len..(b + 1) * self.seq_len]
    }

    /// Number of non-padding positions in row `b`.
    pub fn row_len(&self, b: usize) -> usize {
        self.pad_mask[b * self.seq_len..(b + 1) * self.seq_len].iter().filter(|&&p| !p).count()
    }

    pub fn masked_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != IGNORE_LABEL).count()
    }
}

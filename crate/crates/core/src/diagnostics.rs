//! End-to-end gradient verification of a whole model.

use rand::Rng;

use crate::data::{apply_mlm_mask, MaskedBatch, CLS, FIRST_REGULAR_ID};
use crate::encoder::{EncoderConfig, EncoderModel};
use crate::error::{Error, Result};
use crate::numerics::{grad_check, GradCheckOptions, GradCheckReport};
use crate::objectives::mlm_loss;
use crate::rng::substream;

/// Settings used by `grad-check`.
pub const MODEL_GRAD_CHECK: GradCheckOptions =
    GradCheckOptions { epsilon: 1e-4, fraction: 0.01, min_per_tensor: 1, floor: 1e-6, seed: 0 };

/// Checks the MLM loss of a freshly initialized 64-bit model, prompts and
/// dropout active, on a small padded batch with random tokens.
///
/// Dropout masks are re-drawn from the same stream for every evaluation, so
/// the loss is a deterministic function of the weights.
pub fn model_grad_check(config: &EncoderConfig, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let model = EncoderModel::<f64>::new(config.clone(), opts.seed)?;
    let vocab = config.vocab_size as u32;
    if vocab <= FIRST_REGULAR_ID {
        return Err(Error::InvalidArgument("grad check needs regular vocabulary entries".into()));
    }
    let mut rng = substream(opts.seed, "grad-check/batch", 0);
    let lens = [7usize, 5];
    let mut rows = Vec::new();
    for &n in &lens {
        let ids: Vec<u32> = std::iter::once(CLS)
            .chain((1..n).map(|_| rng.random_range(FIRST_REGULAR_ID..vocab)))
            .collect();
        rows.push(ids);
    }
    let mut batch = None;
    for _ in 0..100 {
        let masked: Vec<_> = rows.iter().map(|r| apply_mlm_mask(r, config.vocab_size, &mut rng, 0.3)).collect();
        let b = MaskedBatch::from_rows(&masked)?;
        if b.masked_count() > 0 {
            batch = Some(b);
            break;
        }
    }
    let batch = batch.ok_or(Error::UndefinedLoss)?;
    let with_pool = config.has_pool();
    let mut params = model.params.clone();
    let seed = opts.seed;
    grad_check(
        &mut params,
        |p, tape| {
            let m = EncoderModel { config: model.config.clone(), params: p.clone() };
            let mut drop = substream(seed, "grad-check/dropout", 0);
            let out = m.forward_mode(tape, &batch, with_pool, Some(&mut drop))?;
            let logits = m.mlm_logits(tape, &out)?;
            mlm_loss(tape, logits, &batch.labels)
        },
        opts,
    )
}

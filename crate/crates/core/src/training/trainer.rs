use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use serde::Serialize;

use super::{adam_step, save_checkpoint, AdamState, Checkpoint, LanguageSampling, Stage, TrainConfig};
use crate::data::{EncodedLanguage, MaskedBatch, Vocabulary, IGNORE_LABEL};
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::numerics::{argmax, Tape, Tensor};
use crate::objectives::{infonce_loss, infonce_sentence_rep, mlm_loss, InfoNceConfig};
use crate::rng::substream;

/// One metrics record.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub mlm_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub infonce_loss: Option<f64>,
    pub masked_acc: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

/// Model weights, optimizer moments and the number of completed steps.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: EncoderModel,
    pub adam: AdamState<f32>,
    pub step: u64,
}

impl TrainState {
    pub fn fresh(model: EncoderModel) -> Self {
        let adam = AdamState::zeros_like(&model.params);
        TrainState { model, adam, step: 0 }
    }
}

/// Draws `batch_size` sentences.
pub fn sample_batch<R: Rng + ?Sized>(
    corpus: &[EncodedLanguage],
    batch_size: usize,
    sampling: LanguageSampling,
    rng: &mut R,
) -> Vec<Vec<u32>> {
    let total: usize = corpus.iter().map(|l| l.sentences.len()).sum();
    (0..batch_size)
        .map(|_| match sampling {
            LanguageSampling::Uniform => {
                let lang = &corpus[rng.random_range(0..corpus.len())];
                lang.sentences[rng.random_range(0..lang.sentences.len())].clone()
            }
            LanguageSampling::Proportional => {
                let mut k = rng.random_range(0..total);
                let mut pick = None;
                for l in corpus {
                    if k < l.sentences.len() {
                        pick = Some(l.sentences[k].clone());
                        break;
                    }
                    k -= l.sentences.len();
                }
                pick.expect("index within total")
            }
        })
        .collect()
}

/// Fraction of labelled rows whose arg-max logit is the label.
pub fn masked_accuracy(logits: &Tensor<f32>, labels: &[u32]) -> f64 {
    let mut hit = 0usize;
    let mut n = 0usize;
    for (r, &l) in labels.iter().enumerate() {
        if l == IGNORE_LABEL {
            continue;
        }
        n += 1;
        if argmax(logits.row(r)) == l as usize {
            hit += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        hit as f64 / n as f64
    }
}

/// Steps a model through pre-training (MLM) or post-training (MLM plus
/// contrastive loss when `infonce` is set).
///
/// Every random draw of step `s` comes from streams keyed by the seed and
/// `s`, so a trainer rebuilt from a checkpoint continues exactly where the
/// original left off.
pub struct Trainer<'a> {
    pub state: TrainState,
    pub cfg: TrainConfig,
    pub infonce: Option<InfoNceConfig>,
    corpus: &'a [EncodedLanguage],
}

impl<'a> Trainer<'a> {
    pub fn new(
        state: TrainState,
        cfg: TrainConfig,
        infonce: Option<InfoNceConfig>,
        corpus: &'a [EncodedLanguage],
    ) -> Result<Self> {
        cfg.validate()?;
        if corpus.is_empty() || corpus.iter().any(|l| l.sentences.is_empty()) {
            return Err(Error::EmptyCorpus);
        }
        if let Some(ic) = &infonce {
            ic.validate()?;
            if cfg.batch_size < 2 {
                return Err(Error::InvalidArgument(format!(
                    "contrastive loss needs at least 2 sentences per batch, got {}",
                    cfg.batch_size
                )));
            }
            if !state.model.config.has_pool() {
                return Err(Error::InvalidArgument("post-training needs a model with a prompt pool".into()));
            }
        }
        Ok(Trainer { state, cfg, infonce, corpus })
    }

    pub fn stage(&self) -> Stage {
        if self.infonce.is_some() {
            Stage::Posttrain
        } else {
            Stage::Pretrain
        }
    }

    pub fn checkpoint(&self, vocab: Option<&Vocabulary>) -> Checkpoint {
        Checkpoint {
            stage: self.stage(),
            step: self.state.step,
            config: self.state.model.config.clone(),
            train: Some(self.cfg.clone()),
            vocab: vocab.cloned(),
            finetune: None,
            params: self.state.model.params.clone(),
            adam: Some(self.state.adam.clone()),
            head: None,
        }
    }

    /// Runs one optimizer step. On error the state is left as it was.
    pub fn step(&mut self) -> Result<StepMetrics> {
        let step = self.state.step + 1;
        let seed = self.cfg.seed;
        let model = &self.state.model;
        let cfg = &model.config;
        let seqs = sample_batch(
            self.corpus,
            self.cfg.batch_size,
            self.cfg.language_sampling,
            &mut substream(seed, "batch", step),
        );
        let vocab_size = cfg.vocab_size;
        let mut mask_rng = substream(seed, "mask", step);
        let mut batch = None;
        for _ in 0..100 {
            let rows: Vec<_> = seqs
                .iter()
                .map(|s| crate::data::apply_mlm_mask(s, vocab_size, &mut mask_rng, cfg.mask_rate))
                .collect();
            let b = MaskedBatch::from_rows(&rows)?;
            if b.masked_count() > 0 {
                batch = Some(b);
                break;
            }
        }
        let batch = batch.ok_or(Error::UndefinedLoss)?;

        let mut tape = Tape::<f32>::new();
        let mut drop_rng = substream(seed, "dropout", step);
        let out = model.forward_mode(&mut tape, &batch, cfg.has_pool(), Some(&mut drop_rng))?;
        let logits = model.mlm_logits(&mut tape, &out)?;
        let mlm = mlm_loss(&mut tape, logits, &batch.labels)?;
        let mlm_value = tape.value(mlm).item() as f64;
        let masked_acc = masked_accuracy(tape.value(logits), &batch.labels);

        let (loss, infonce_value) = match &self.infonce {
            Some(ic) => {
                let plain = MaskedBatch::unmasked(&seqs)?;
                let mut r1 = substream(seed, "dropout/view1", step);
                let mut r2 = substream(seed, "dropout/view2", step);
                let o1 = model.forward_with_prompts(&mut tape, &plain, Some(&mut r1))?;
                let o2 = model.forward_with_prompts(&mut tape, &plain, Some(&mut r2))?;
                let v1 = infonce_sentence_rep(&mut tape, &o1)?;
                let v2 = infonce_sentence_rep(&mut tape, &o2)?;
                let c = infonce_loss(&mut tape, v1, v2, ic)?;
                let value = tape.value(c).item() as f64;
                (tape.add(mlm, c)?, Some(value))
            }
            None => (mlm, None),
        };
        let loss_value = tape.value(loss).item() as f64;
        if !loss_value.is_finite() {
            return Err(Error::Divergence { step, loss: loss_value });
        }
        let grads = tape.backward(loss)?;
        let mut params = self.state.model.params.clone();
        let mut adam = self.state.adam.clone();
        grads.write_to(&mut params)?;
        let lr = adam_step(&mut params, &mut adam, &self.cfg, step)?;
        self.state.model.params = params;
        self.state.adam = adam;
        self.state.step = step;
        Ok(StepMetrics {
            step,
            loss: loss_value,
            mlm_loss: mlm_value,
            infonce_loss: infonce_value,
            masked_acc,
            lr,
            wall_ms: 0,
        })
    }

    /// Steps until `total_steps` is reached, collecting metrics.
    pub fn run(&mut self) -> Result<Vec<StepMetrics>> {
        let mut out = Vec::new();
        while self.state.step < self.cfg.total_steps {
            out.push(self.step()?);
        }
        Ok(out)
    }
}

/// Pre-trains with the masked-token loss for `cfg.total_steps` steps.
pub fn pretrain(model: EncoderModel, corpus: &[EncodedLanguage], cfg: &TrainConfig) -> Result<(EncoderModel, Vec<StepMetrics>)> {
    let mut t = Trainer::new(TrainState::fresh(model), cfg.clone(), None, corpus)?;
    let metrics = t.run()?;
    Ok((t.state.model, metrics))
}

/// Continues training with the masked-token loss plus the dropout
/// contrastive loss, weighted equally.
pub fn posttrain_infonce(
    model: EncoderModel,
    corpus: &[EncodedLanguage],
    cfg: &TrainConfig,
    infonce: &InfoNceConfig,
) -> Result<(EncoderModel, Vec<StepMetrics>)> {
    let mut t = Trainer::new(TrainState::fresh(model), cfg.clone(), Some(*infonce), corpus)?;
    let metrics = t.run()?;
    Ok((t.state.model, metrics))
}

/// Runs a trainer to completion, writing `metrics.jsonl`, periodic
/// `step-<n>.xlmp` checkpoints and `final.xlmp` into `out_dir`. If training
/// fails, the last good state is saved as `last_good.xlmp` before the error
/// is returned.
pub fn run_training(trainer: &mut Trainer<'_>, out_dir: &Path, vocab: Option<&Vocabulary>) -> Result<Vec<StepMetrics>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let metrics_path = out_dir.join("metrics.jsonl");
    let mut log = std::fs::File::create(&metrics_path)
        .map_err(|e| Error::io(format!("creating {}", metrics_path.display()), e))?;
    let start = Instant::now();
    let mut all = Vec::new();
    while trainer.state.step < trainer.cfg.total_steps {
        let mut m = match trainer.step() {
            Ok(m) => m,
            Err(e) => {
                save_checkpoint(&trainer.checkpoint(vocab), &out_dir.join("last_good.xlmp"))?;
                return Err(e);
            }
        };
        m.wall_ms = start.elapsed().as_millis() as u64;
        if m.step % trainer.cfg.log_every == 0 || m.step == trainer.cfg.total_steps {
            let line = serde_json::to_string(&m)?;
            writeln!(log, "{line}").map_err(|e| Error::io(format!("writing {}", metrics_path.display()), e))?;
        }
        if trainer.cfg.checkpoint_every > 0 && m.step % trainer.cfg.checkpoint_every == 0 {
            save_checkpoint(&trainer.checkpoint(vocab), &out_dir.join(format!("step-{}.xlmp", m.step)))?;
        }
        log::debug!("step {} loss {:.4} lr {:.2e}", m.step, m.loss, m.lr);
        all.push(m);
    }
    save_checkpoint(&trainer.checkpoint(vocab), &out_dir.join("final.xlmp"))?;
    Ok(all)
}

/// Masked-token accuracy over every sentence of `corpus`, masked `rounds`
/// times with fresh draws from `seed`, dropout disabled.
pub fn evaluate_masked_accuracy(model: &EncoderModel, corpus: &[EncodedLanguage], seed: u64, rounds: u64) -> Result<f64> {
    let (mut hit, mut total) = (0.0, 0usize);
    let seqs: Vec<&Vec<u32>> = corpus.iter().flat_map(|l| l.sentences.iter()).collect();
    for round in 0..rounds {
        let mut rng = substream(seed, "eval/mask", round);
        for chunk in seqs.chunks(64) {
            let rows: Vec<_> = chunk
                .iter()
                .map(|s| crate::data::apply_mlm_mask(s, model.config.vocab_size, &mut rng, model.config.mask_rate))
                .collect();
            let batch = MaskedBatch::from_rows(&rows)?;
            let n = batch.masked_count();
            if n == 0 {
                continue;
            }
            let mut tape = Tape::new();
            let out = model.forward_mode(&mut tape, &batch, model.config.has_pool(), None)?;
            let logits = model.mlm_logits(&mut tape, &out)?;
            hit += masked_accuracy(tape.value(logits), &batch.labels) * n as f64;
            total += n;
        }
    }
    if total == 0 {
        return Err(Error::UndefinedLoss);
    }
    Ok(hit / total as f64)
}

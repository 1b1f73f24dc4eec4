//! Post-LayerNorm transformer encoder with optional prompt prepending.
//!
//! Token positions always use positional embeddings `0..T`, whether or not
//! prompts are prepended; prompts carry no positional embedding. With the
//! pool unplugged the computation is exactly that of an encoder built
//! without a pool.

use std::ops::Range;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::MaskedBatch;
use crate::error::{Error, Result};
use crate::numerics::{AttentionSpec, ParamSet, Real, Tape, Tensor, Var};
use crate::prompt_pool::{PoolVars, PromptPool, KEYS, QUERY_PROJ, VALUES};
use crate::rng::{substream, StreamRng};

pub const INIT_STD: f64 = 0.02;
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Architecture hyperparameters.
///
/// A `pool_size` or `prompt_len` of zero builds an encoder without a pool.
/// A `vocab_size` of zero is a placeholder filled in from the corpus
/// vocabulary before the model is built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub ffn_inner: usize,
    pub heads: usize,
    pub head_size: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    pub attention_dropout: f64,
    pub pool_size: usize,
    pub prompt_len: usize,
    pub mask_rate: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig::tiny(0)
    }
}

impl EncoderConfig {
    /// Two-layer testing model.
    pub fn tiny(vocab_size: usize) -> Self {
        EncoderConfig {
            num_layers: 2,
            hidden: 64,
            ffn_inner: 256,
            heads: 2,
            head_size: 32,
            max_seq_len: 64,
            vocab_size,
            dropout: 0.1,
            attention_dropout: 0.1,
            pool_size: 8,
            prompt_len: 2,
            mask_rate: 0.15,
        }
    }

    fn full_scale(num_layers: usize, hidden: usize, vocab_size: usize) -> Self {
        EncoderConfig {
            num_layers,
            hidden,
            ffn_inner: 4 * hidden,
            heads: hidden / 64,
            head_size: 64,
            max_seq_len: 512,
            vocab_size,
            dropout: 0.1,
            attention_dropout: 0.1,
            pool_size: 256,
            prompt_len: 4,
            mask_rate: 0.15,
        }
    }

    pub fn small(vocab_size: usize) -> Self {
        Self::full_scale(4, 768, vocab_size)
    }

    pub fn base(vocab_size: usize) -> Self {
        Self::full_scale(12, 768, vocab_size)
    }

    pub fn large(vocab_size: usize) -> Self {
        Self::full_scale(24, 1024, vocab_size)
    }

    /// Looks up `tiny`, `small`, `base` or `large`.
    pub fn preset(name: &str, vocab_size: usize) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny(vocab_size)),
            "small" => Ok(Self::small(vocab_size)),
            "base" => Ok(Self::base(vocab_size)),
            "large" => Ok(Self::large(vocab_size)),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected tiny, small, base or large)"))),
        }
    }

    pub fn has_pool(&self) -> bool {
        self.pool_size > 0 && self.prompt_len > 0
    }

    pub fn pool(&self) -> Option<PromptPool> {
        self.has_pool().then_some(PromptPool { pool_size: self.pool_size, prompt_len: self.prompt_len, width: self.hidden })
    }

    /// Same architecture without a pool.
    pub fn without_pool(&self) -> Self {
        EncoderConfig { pool_size: 0, prompt_len: 0, ..self.clone() }
    }

    /// Every violated constraint, in field order.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        for (name, v) in [
            ("num_layers", self.num_layers),
            ("hidden", self.hidden),
            ("ffn_inner", self.ffn_inner),
            ("heads", self.heads),
            ("head_size", self.head_size),
        ] {
            if v == 0 {
                p.push(format!("model.{name} must be positive"));
            }
        }
        if self.heads * self.head_size != self.hidden {
            p.push(format!(
                "model.hidden ({}) must equal heads ({}) x head_size ({})",
                self.hidden, self.heads, self.head_size
            ));
        }
        if self.max_seq_len < 2 {
            p.push("model.max_seq_len must be at least 2".into());
        }
        if self.vocab_size != 0 && self.vocab_size < crate::data::SPECIAL_TOKENS.len() {
            p.push("model.vocab_size must cover the special tokens".into());
        }
        for (name, v) in [("dropout", self.dropout), ("attention_dropout", self.attention_dropout)] {
            if !(0.0..1.0).contains(&v) {
                p.push(format!("model.{name} must lie in [0, 1), got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.mask_rate) {
            p.push(format!("model.mask_rate must lie in [0, 1], got {}", self.mask_rate));
        }
        if self.has_pool() && self.prompt_len + 2 > self.max_seq_len {
            p.push("model.prompt_len leaves no room for tokens within max_seq_len".into());
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let mut p = self.problems();
        if self.vocab_size == 0 {
            p.push("model.vocab_size is unset".into());
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }
}

/// Row layout of a forward pass: each sequence occupies `prompt_len`
/// prompt rows followed by `seq_len` rows for CLS and tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub batch: usize,
    pub prompt_len: usize,
    pub seq_len: usize,
}

impl Layout {
    pub fn stride(&self) -> usize {
        self.prompt_len + self.seq_len
    }

    pub fn rows(&self) -> usize {
        self.batch * self.stride()
    }

    pub fn prompt_rows(&self, b: usize) -> Range<usize> {
        let s = b * self.stride();
        s..s + self.prompt_len
    }

    pub fn cls_row(&self, b: usize) -> usize {
        b * self.stride() + self.prompt_len
    }

    /// CLS and token rows of sequence `b`.
    pub fn text_rows(&self, b: usize) -> Range<usize> {
        self.cls_row(b)..(b + 1) * self.stride()
    }

    /// Text rows of every sequence, in order.
    pub fn all_text_rows(&self) -> Vec<usize> {
        (0..self.batch).flat_map(|b| self.text_rows(b)).collect()
    }
}

/// Tape handles produced by a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub layout: Layout,
    /// `layers[0]` is the embedding layer (before dropout); `layers[i]` is the
    /// output of block `i`.
    pub layers: Vec<Var>,
    pub hidden: Var,
    pub retrieval: Option<PoolVars>,
    /// Attention node of each block, for inspecting weights.
    pub attention: Vec<Var>,
    /// Per row: false for padding.
    pub valid: Vec<bool>,
}

/// States of one layer with their layout.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStates<T = f32> {
    pub layout: Layout,
    pub states: Tensor<T>,
    pub valid: Vec<bool>,
}

/// An encoder's configuration and weights.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderModel<T: Real = f32> {
    pub config: EncoderConfig,
    pub params: ParamSet<T>,
}

fn block_name(i: usize, rest: &str) -> String {
    format!("block{i}.{rest}")
}

impl<T: Real> EncoderModel<T> {
    /// Fresh weights: N(0, 0.02²) matrices and embeddings, zero biases, unit
    /// LayerNorm gains. Encoder and pool weights come from separate streams,
    /// so the same seed yields the same encoder with or without a pool.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut rng = substream(seed, "init", 0);
        let normal = Normal::new(0.0, INIT_STD).expect("finite std");
        let mut gauss = |shape: Vec<usize>| Tensor::from_fn(shape, |_| T::from_f64_lossy(normal.sample(&mut rng)));
        let (d, f, v) = (config.hidden, config.ffn_inner, config.vocab_size);
        params.insert("embed.token", gauss(vec![v, d]));
        params.insert("embed.pos", gauss(vec![config.max_seq_len, d]));
        for i in 0..config.num_layers {
            for m in ["q", "k", "v", "o"] {
                params.insert(block_name(i, &format!("attn.{m}")), gauss(vec![d, d]));
                params.insert(block_name(i, &format!("attn.{m}.bias")), Tensor::zeros(vec![d]));
            }
            params.insert(block_name(i, "ln1.gain"), Tensor::full(vec![d], T::one()));
            params.insert(block_name(i, "ln1.bias"), Tensor::zeros(vec![d]));
            params.insert(block_name(i, "ffn.in"), gauss(vec![d, f]));
            params.insert(block_name(i, "ffn.in.bias"), Tensor::zeros(vec![f]));
            params.insert(block_name(i, "ffn.out"), gauss(vec![f, d]));
            params.insert(block_name(i, "ffn.out.bias"), Tensor::zeros(vec![d]));
            params.insert(block_name(i, "ln2.gain"), Tensor::full(vec![d], T::one()));
            params.insert(block_name(i, "ln2.bias"), Tensor::zeros(vec![d]));
        }
        params.insert("mlm.transform", gauss(vec![d, d]));
        params.insert("mlm.transform.bias", Tensor::zeros(vec![d]));
        params.insert("mlm.ln.gain", Tensor::full(vec![d], T::one()));
        params.insert("mlm.ln.bias", Tensor::zeros(vec![d]));
        params.insert("mlm.bias", Tensor::zeros(vec![v]));
        if let Some(pool) = config.pool() {
            pool.init_params(&mut params, INIT_STD, &mut substream(seed, "init/prompt", 0));
        }
        Ok(EncoderModel { config, params })
    }

    /// Wraps existing weights after checking them against `config`.
    pub fn from_params(config: EncoderConfig, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let reference = EncoderModel::<T>::shapes(&config)?;
        for (name, t) in reference.iter() {
            let got = params.require(name)?;
            if got.shape() != t.shape() {
                return Err(Error::dim("encoder", format!("{name} has shape {:?}, expected {:?}", got.shape(), t.shape())));
            }
        }
        if let Some(extra) = params.names().find(|n| !reference.contains(n)) {
            return Err(Error::InvalidArgument(format!("unexpected parameter `{extra}`")));
        }
        Ok(EncoderModel { config, params })
    }

    fn shapes(config: &EncoderConfig) -> Result<ParamSet<T>> {
        Ok(EncoderModel::<T>::new(config.clone(), 0)?.params)
    }

    pub fn pool(&self) -> Option<PromptPool> {
        self.config.pool()
    }

    /// The same encoder with the pool removed.
    pub fn without_pool(&self) -> Self {
        let mut params = self.params.clone();
        for name in [KEYS, VALUES, QUERY_PROJ] {
            params.remove(name);
        }
        EncoderModel { config: self.config.without_pool(), params }
    }

    pub fn cast<U: Real>(&self) -> EncoderModel<U> {
        EncoderModel { config: self.config.clone(), params: self.params.cast() }
    }

    /// Forward pass with the retrieved prompt prepended to every sequence.
    pub fn forward_with_prompts(
        &self,
        tape: &mut Tape<T>,
        batch: &MaskedBatch,
        dropout: Option<&mut StreamRng>,
    ) -> Result<ForwardOutput> {
        let pool = self
            .pool()
            .ok_or_else(|| Error::InvalidArgument("model has no prompt pool".into()))?;
        self.forward(tape, batch, Some(pool), dropout)
    }

    /// Forward pass with the pool unplugged.
    pub fn forward_plain(
        &self,
        tape: &mut Tape<T>,
        batch: &MaskedBatch,
        dropout: Option<&mut StreamRng>,
    ) -> Result<ForwardOutput> {
        self.forward(tape, batch, None, dropout)
    }

    /// Prompt retrieval alone, without running the blocks.
    pub fn retrieve(&self, tape: &mut Tape<T>, batch: &MaskedBatch) -> Result<PoolVars> {
        let pool = self
            .pool()
            .ok_or_else(|| Error::InvalidArgument("model has no prompt pool".into()))?;
        let ids: Vec<usize> = batch.input_ids.iter().map(|&i| i as usize).collect();
        let valid: Vec<bool> = batch.pad_mask.iter().map(|&p| !p).collect();
        let table = tape.param(&self.params, "embed.token")?;
        let tok = tape.embedding(table, &ids)?;
        pool.retrieve(tape, &self.params, tok, batch.seq_len, &valid)
    }

    /// Runs the encoder, prepending prompts when `prompts` is set.
    pub fn forward_mode(
        &self,
        tape: &mut Tape<T>,
        batch: &MaskedBatch,
        prompts: bool,
        dropout: Option<&mut StreamRng>,
    ) -> Result<ForwardOutput> {
        if prompts {
            self.forward_with_prompts(tape, batch, dropout)
        } else {
            self.forward_plain(tape, batch, dropout)
        }
    }

    fn forward(
        &self,
        tape: &mut Tape<T>,
        batch: &MaskedBatch,
        pool: Option<PromptPool>,
        mut dropout: Option<&mut StreamRng>,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let (bsz, seq) = (batch.batch_size, batch.seq_len);
        let lp = pool.map_or(0, |p| p.prompt_len);
        if seq + lp > cfg.max_seq_len {
            return Err(Error::Capacity { needed: seq + lp, capacity: cfg.max_seq_len });
        }
        let layout = Layout { batch: bsz, prompt_len: lp, seq_len: seq };
        let ids: Vec<usize> = batch.input_ids.iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..bsz).flat_map(|_| 0..seq).collect();
        let token_valid: Vec<bool> = batch.pad_mask.iter().map(|&p| !p).collect();

        let table = tape.param(&self.params, "embed.token")?;
        let pos_table = tape.param(&self.params, "embed.pos")?;
        let tok = tape.embedding(table, &ids)?;
        let pos = tape.embedding(pos_table, &positions)?;
        let text = tape.add(tok, pos)?;

        let (mut x, retrieval, valid) = match pool {
            Some(pool) => {
                let r = pool.retrieve(tape, &self.params, tok, seq, &token_valid)?;
                let both = tape.concat_rows(&[r.prompts, text])?;
                let text_base = bsz * lp;
                let order: Vec<usize> = (0..bsz)
                    .flat_map(|b| (b * lp..(b + 1) * lp).chain(text_base + b * seq..text_base + (b + 1) * seq))
                    .collect();
                let x = tape.select_rows(both, &order)?;
                let valid = (0..bsz)
                    .flat_map(|b| std::iter::repeat_n(true, lp).chain(token_valid[b * seq..(b + 1) * seq].iter().copied()))
                    .collect();
                (x, Some(r), valid)
            }
            None => (text, None, token_valid),
        };

        let mut layers = vec![x];
        let mut attention = Vec::with_capacity(cfg.num_layers);
        x = self.maybe_dropout(tape, x, cfg.dropout, dropout.as_deref_mut())?;
        for i in 0..cfg.num_layers {
            let (out, attn) = self.block(tape, i, x, &valid, layout.stride(), dropout.as_deref_mut())?;
            x = out;
            layers.push(x);
            attention.push(attn);
        }
        Ok(ForwardOutput { layout, layers, hidden: x, retrieval, attention, valid })
    }

    fn maybe_dropout(&self, tape: &mut Tape<T>, x: Var, rate: f64, rng: Option<&mut StreamRng>) -> Result<Var> {
        match rng {
            Some(rng) => tape.dropout(x, rate, rng),
            None => Ok(x),
        }
    }

    fn linear(&self, tape: &mut Tape<T>, x: Var, name: &str) -> Result<Var> {
        let w = tape.param(&self.params, name)?;
        let b = tape.param(&self.params, &format!("{name}.bias"))?;
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }

    fn layer_norm(&self, tape: &mut Tape<T>, x: Var, prefix: &str) -> Result<Var> {
        let g = tape.param(&self.params, &format!("{prefix}.gain"))?;
        let b = tape.param(&self.params, &format!("{prefix}.bias"))?;
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }

    fn block(
        &self,
        tape: &mut Tape<T>,
        i: usize,
        x: Var,
        valid: &[bool],
        seq: usize,
        mut rng: Option<&mut StreamRng>,
    ) -> Result<(Var, Var)> {
        let cfg = &self.config;
        let q = self.linear(tape, x, &block_name(i, "attn.q"))?;
        let k = self.linear(tape, x, &block_name(i, "attn.k"))?;
        let v = self.linear(tape, x, &block_name(i, "attn.v"))?;
        let spec = AttentionSpec { heads: cfg.heads, seq, key_valid: valid };
        let attn_drop = rng.as_deref_mut().map(|r| (cfg.attention_dropout, r));
        let attn = tape.attention(q, k, v, &spec, attn_drop)?;
        let o = self.linear(tape, attn, &block_name(i, "attn.o"))?;
        let o = self.maybe_dropout(tape, o, cfg.dropout, rng.as_deref_mut())?;
        let res = tape.add(x, o)?;
        let h = self.layer_norm(tape, res, &block_name(i, "ln1"))?;
        let f = self.linear(tape, h, &block_name(i, "ffn.in"))?;
        let f = tape.gelu(f);
        let f = self.linear(tape, f, &block_name(i, "ffn.out"))?;
        let f = self.maybe_dropout(tape, f, cfg.dropout, rng)?;
        let res = tape.add(h, f)?;
        Ok((self.layer_norm(tape, res, &block_name(i, "ln2"))?, attn))
    }

    /// Vocabulary logits for every CLS/token row, `[batch * seq_len, V]`.
    /// Prompt rows are dropped before the head.
    pub fn mlm_logits(&self, tape: &mut Tape<T>, out: &ForwardOutput) -> Result<Var> {
        let h = if out.layout.prompt_len == 0 {
            out.hidden
        } else {
            tape.select_rows(out.hidden, &out.layout.all_text_rows())?
        };
        let t = self.linear(tape, h, "mlm.transform")?;
        let t = tape.gelu(t);
        let t = self.layer_norm(tape, t, "mlm.ln")?;
        let table = tape.param(&self.params, "embed.token")?;
        let logits = tape.matmul_nt(t, table)?;
        let bias = tape.param(&self.params, "mlm.bias")?;
        tape.add_row(logits, bias)
    }

    /// States after block `layer` (0 = embeddings), dropout disabled.
    pub fn hidden_states_at_layer(&self, batch: &MaskedBatch, layer: usize, with_prompts: bool) -> Result<LayerStates<T>> {
        if layer > self.config.num_layers {
            return Err(Error::InvalidArgument(format!(
                "layer {layer} out of range 0..={}",
                self.config.num_layers
            )));
        }
        let mut tape = Tape::new();
        let out = self.forward_mode(&mut tape, batch, with_prompts, None)?;
        Ok(LayerStates { layout: out.layout, states: tape.value(out.layers[layer]).clone(), valid: out.valid })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::CLS;

    fn batch(rows: &[Vec<u32>]) -> MaskedBatch {
        MaskedBatch::unmasked(rows).unwrap()
    }

    #[test]
    fn presets_have_the_expected_shapes() {
        let s = EncoderConfig::small(100);
        let b = EncoderConfig::base(100);
        let l = EncoderConfig::large(100);
        assert_eq!((s.num_layers, s.hidden), (4, 768));
        assert_eq!((b.num_layers, b.hidden), (12, 768));
        assert_eq!((l.num_layers, l.hidden, l.ffn_inner), (24, 1024, 4096));
        for c in [s, b, l, EncoderConfig::tiny(100)] {
            c.validate().unwrap();
        }
    }

    #[test]
    fn validation_lists_every_problem() {
        let mut c = EncoderConfig::tiny(10);
        c.heads = 3;
        c.dropout = 1.0;
        let p = c.problems();
        assert_eq!(p.len(), 2, "{p:?}");
    }

    #[test]
    fn prompted_output_has_prompt_rows() {
        let m = EncoderModel::<f32>::new(EncoderConfig::tiny(20), 1).unwrap();
        let b = batch(&[vec![CLS, 6, 7, 8]]);
        let mut tape = Tape::new();
        let out = m.forward_with_prompts(&mut tape, &b, None).unwrap();
        assert_eq!(tape.value(out.hidden).shape(), &[2 + 4, 64]);
        assert_eq!(out.layout.cls_row(0), 2);
    }

    #[test]
    fn capacity_is_enforced() {
        let mut cfg = EncoderConfig::tiny(20);
        cfg.max_seq_len = 6;
        let m = EncoderModel::<f32>::new(cfg, 1).unwrap();
        let b = batch(&[vec![CLS, 6, 7, 8, 9]]);
        let mut tape = Tape::new();
        assert!(m.forward_plain(&mut tape, &b, None).is_ok());
        let mut tape = Tape::new();
        assert!(matches!(m.forward_with_prompts(&mut tape, &b, None), Err(Error::Capacity { needed: 7, capacity: 6 })));
    }

    #[test]
    fn from_params_rejects_wrong_shapes() {
        let m = EncoderModel::<f32>::new(EncoderConfig::tiny(20), 1).unwrap();
        assert!(EncoderModel::from_params(EncoderConfig::tiny(21), m.params.clone()).is_err());
        assert!(EncoderModel::from_params(EncoderConfig::tiny(20), m.params).is_ok());
    }
}

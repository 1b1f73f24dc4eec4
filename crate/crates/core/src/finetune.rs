//! Task heads and the two fine-tuning strategies.
//!
//! `Standard` runs the encoder with the pool unplugged. `PromptBased` keeps
//! retrieval: token tasks drop the prompt rows before the head, sentence
//! tasks mean-pool the prompt rows together with CLS.

use std::collections::BTreeSet;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{MaskedBatch, Vocabulary, IGNORE_LABEL};
use crate::encoder::{EncoderModel, ForwardOutput, INIT_STD};
use crate::error::{Error, Result};
use crate::numerics::{argmax, ParamSet, Tape, Tensor, Var};
use crate::prompt_pool::{KEYS, QUERY_PROJ, VALUES};
use crate::rng::substream;
use crate::training::{adam_step, AdamState, Checkpoint, Stage, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    Standard,
    PromptBased,
}

impl FinetuneMode {
    pub fn uses_prompts(self) -> bool {
        self == FinetuneMode::PromptBased
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Token,
    Sentence,
}

/// Fine-tuning facts stored alongside a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneMeta {
    pub mode: FinetuneMode,
    pub task: TaskKind,
    /// Label strings in class-id order.
    pub labels: Vec<String>,
    pub freeze_pool: bool,
}

pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";

/// Affine classifier over encoder states.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskHead {
    pub kind: TaskKind,
    pub classes: usize,
    /// `head.weight` `[D, classes]` and `head.bias` `[classes]`.
    pub params: ParamSet<f32>,
}

impl TaskHead {
    pub fn new(kind: TaskKind, classes: usize, width: usize, seed: u64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::InvalidArgument(format!("a classifier needs at least 2 classes, got {classes}")));
        }
        let normal = Normal::new(0.0, INIT_STD).expect("finite std");
        let mut rng = substream(seed, "init/head", 0);
        let mut params = ParamSet::new();
        params.insert(HEAD_WEIGHT, Tensor::from_fn(vec![width, classes], |_| normal.sample(&mut rng) as f32));
        params.insert(HEAD_BIAS, Tensor::zeros(vec![classes]));
        Ok(TaskHead { kind, classes, params })
    }

    pub fn from_params(kind: TaskKind, params: ParamSet<f32>, width: usize) -> Result<Self> {
        let w = params.require(HEAD_WEIGHT)?;
        if w.shape().len() != 2 || w.shape()[0] != width {
            return Err(Error::dim("task_head", format!("weight shape {:?} for width {width}", w.shape())));
        }
        let classes = w.shape()[1];
        if params.require(HEAD_BIAS)?.len() != classes {
            return Err(Error::dim("task_head", "bias length differs from class count"));
        }
        Ok(TaskHead { kind, classes, params })
    }

    fn apply(&self, tape: &mut Tape<f32>, x: Var) -> Result<Var> {
        let w = tape.param(&self.params, HEAD_WEIGHT)?;
        let b = tape.param(&self.params, HEAD_BIAS)?;
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }
}

/// A sentence (ids starting with CLS) and one tag per token after CLS.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenExample {
    pub ids: Vec<u32>,
    pub labels: Vec<u32>,
}

impl TokenExample {
    pub fn new(ids: Vec<u32>, labels: Vec<u32>) -> Result<Self> {
        if ids.len() != labels.len() + 1 {
            return Err(Error::InvalidArgument(format!(
                "{} tags for {} tokens",
                labels.len(),
                ids.len().saturating_sub(1)
            )));
        }
        Ok(TokenExample { ids, labels })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SentenceExample {
    pub ids: Vec<u32>,
    pub label: u32,
}

/// Sorted set of label strings, mapped to dense ids.
pub fn label_set<'a>(labels: impl IntoIterator<Item = &'a str>) -> Vec<String> {
    labels.into_iter().collect::<BTreeSet<_>>().into_iter().map(str::to_string).collect()
}

fn label_id(labels: &[String], l: &str) -> Result<u32> {
    labels
        .iter()
        .position(|x| x == l)
        .map(|i| i as u32)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown label `{l}`")))
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

/// Reads `sentence\tlabel` lines.
pub fn read_sentence_tsv(path: &Path) -> Result<Vec<(String, String)>> {
    read(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| match line.split_once('\t') {
            Some((s, l)) if !l.contains('\t') && !l.trim().is_empty() => Ok((s.to_string(), l.trim().to_string())),
            _ => Err(Error::Parse { path: path.to_path_buf(), line: i + 1, message: "expected `sentence<TAB>label`".into() }),
        })
        .collect()
}

/// Reads `token<TAB>tag` lines; blank lines separate sentences.
pub fn read_conll(path: &Path) -> Result<Vec<Vec<(String, String)>>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    for (i, line) in read(path)?.lines().enumerate() {
        if line.trim().is_empty() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            continue;
        }
        let mut cols = line.split('\t');
        match (cols.next(), cols.next(), cols.next()) {
            (Some(t), Some(g), None) if !t.is_empty() && !g.is_empty() => cur.push((t.to_string(), g.to_string())),
            _ => {
                return Err(Error::Parse { path: path.to_path_buf(), line: i + 1, message: "expected `token<TAB>tag`".into() })
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    Ok(out)
}

/// Encodes labelled sentences; returns the examples and the label list.
pub fn encode_sentence_task(rows: &[(String, String)], vocab: &Vocabulary, max_len: usize) -> Result<(Vec<SentenceExample>, Vec<String>)> {
    let labels = label_set(rows.iter().map(|(_, l)| l.as_str()));
    let ex = encode_sentence_rows(rows, vocab, max_len, &labels)?;
    Ok((ex, labels))
}

/// Encodes labelled sentences against a fixed label list, such as the one
/// produced for the training split.
pub fn encode_sentence_rows(rows: &[(String, String)], vocab: &Vocabulary, max_len: usize, labels: &[String]) -> Result<Vec<SentenceExample>> {
    rows.iter()
        .map(|(s, l)| Ok(SentenceExample { ids: vocab.encode(s, max_len), label: label_id(labels, l)? }))
        .collect()
}

/// Encodes tagged sentences, truncating tags along with tokens.
pub fn encode_token_task(rows: &[Vec<(String, String)>], vocab: &Vocabulary, max_len: usize) -> Result<(Vec<TokenExample>, Vec<String>)> {
    let labels = label_set(rows.iter().flatten().map(|(_, g)| g.as_str()));
    let ex = encode_token_rows(rows, vocab, max_len, &labels)?;
    Ok((ex, labels))
}

pub fn encode_token_rows(rows: &[Vec<(String, String)>], vocab: &Vocabulary, max_len: usize, labels: &[String]) -> Result<Vec<TokenExample>> {
    let keep = max_len.max(1) - 1;
    rows.iter()
        .map(|sent| {
            let sent = &sent[..sent.len().min(keep)];
            let mut ids = vec![crate::data::CLS];
            ids.extend(sent.iter().map(|(t, _)| vocab.id(t)));
            let tags = sent.iter().map(|(_, g)| label_id(labels, g)).collect::<Result<_>>()?;
            TokenExample::new(ids, tags)
        })
        .collect()
}

/// Sentence vector fed to a sentence head: mean of prompt rows and CLS in
/// prompt-based mode, CLS alone in standard mode. With no prompt rows the
/// prompt-based pooling reduces to CLS.
pub fn pooled_sentence_rep(tape: &mut Tape<f32>, out: &ForwardOutput, mode: FinetuneMode) -> Result<Var> {
    let l = out.layout;
    match mode {
        FinetuneMode::Standard => {
            let rows: Vec<usize> = (0..l.batch).map(|b| l.cls_row(b)).collect();
            tape.select_rows(out.hidden, &rows)
        }
        FinetuneMode::PromptBased => {
            let segs: Vec<Vec<usize>> =
                (0..l.batch).map(|b| l.prompt_rows(b).chain(std::iter::once(l.cls_row(b))).collect()).collect();
            tape.segment_mean(out.hidden, &segs)
        }
    }
}

/// Rows holding real tokens (not prompts, CLS or padding), in order.
pub fn token_rows(out: &ForwardOutput) -> Vec<usize> {
    let l = out.layout;
    (0..l.batch).flat_map(|b| l.text_rows(b).skip(1)).filter(|&r| out.valid[r]).collect()
}

/// Head logits for a token task, one row per real token.
pub fn token_logits(
    tape: &mut Tape<f32>,
    model: &EncoderModel,
    head: &TaskHead,
    batch: &MaskedBatch,
    mode: FinetuneMode,
    dropout: Option<&mut crate::rng::StreamRng>,
) -> Result<Var> {
    let out = model.forward_mode(tape, batch, mode.uses_prompts(), dropout)?;
    let rows = token_rows(&out);
    let h = tape.select_rows(out.hidden, &rows)?;
    head.apply(tape, h)
}

/// Head logits for a sentence task, one row per sentence.
pub fn sentence_logits(
    tape: &mut Tape<f32>,
    model: &EncoderModel,
    head: &TaskHead,
    batch: &MaskedBatch,
    mode: FinetuneMode,
    dropout: Option<&mut crate::rng::StreamRng>,
) -> Result<Var> {
    let out = model.forward_mode(tape, batch, mode.uses_prompts(), dropout)?;
    let rep = pooled_sentence_rep(tape, &out, mode)?;
    head.apply(tape, rep)
}

/// Labelled data for either task type.
#[derive(Clone, Copy, Debug)]
pub enum TaskData<'a> {
    Token(&'a [TokenExample]),
    Sentence(&'a [SentenceExample]),
}

impl TaskData<'_> {
    fn len(&self) -> usize {
        match self {
            TaskData::Token(x) => x.len(),
            TaskData::Sentence(x) => x.len(),
        }
    }

    fn kind(&self) -> TaskKind {
        match self {
            TaskData::Token(_) => TaskKind::Token,
            TaskData::Sentence(_) => TaskKind::Sentence,
        }
    }

    /// Batch of examples `idx` with flat labels matching the logits rows.
    fn batch(&self, idx: &[usize]) -> Result<(MaskedBatch, Vec<u32>)> {
        match self {
            TaskData::Token(x) => {
                let seqs: Vec<Vec<u32>> = idx.iter().map(|&i| x[i].ids.clone()).collect();
                let labels = idx.iter().flat_map(|&i| x[i].labels.iter().copied()).collect();
                Ok((MaskedBatch::unmasked(&seqs)?, labels))
            }
            TaskData::Sentence(x) => {
                let seqs: Vec<Vec<u32>> = idx.iter().map(|&i| x[i].ids.clone()).collect();
                Ok((MaskedBatch::unmasked(&seqs)?, idx.iter().map(|&i| x[i].label).collect()))
            }
        }
    }
}

fn is_pool_param(name: &str) -> bool {
    matches!(name, KEYS | VALUES | QUERY_PROJ)
}

/// Fine-tuning settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub mode: FinetuneMode,
    /// Keep prompt keys, values and query projection fixed in prompt-based mode.
    pub freeze_pool: bool,
    pub train: TrainConfig,
}

/// Jointly trains an encoder and a task head.
pub struct FinetuneTrainer<'a> {
    pub model: EncoderModel,
    pub head: TaskHead,
    pub cfg: FinetuneConfig,
    pub step: u64,
    data: TaskData<'a>,
    adam_model: AdamState<f32>,
    adam_head: AdamState<f32>,
}

impl<'a> FinetuneTrainer<'a> {
    pub fn new(model: EncoderModel, head: TaskHead, cfg: FinetuneConfig, data: TaskData<'a>) -> Result<Self> {
        cfg.train.validate()?;
        if data.len() == 0 {
            return Err(Error::EmptyCorpus);
        }
        if head.kind != data.kind() {
            return Err(Error::InvalidArgument("task head kind does not match the data".into()));
        }
        if cfg.mode.uses_prompts() && !model.config.has_pool() {
            return Err(Error::InvalidArgument("prompt-based fine-tuning needs a model with a prompt pool".into()));
        }
        let adam_model = AdamState::zeros_like(&model.params);
        let adam_head = AdamState::zeros_like(&head.params);
        Ok(FinetuneTrainer { model, head, cfg, step: 0, data, adam_model, adam_head })
    }

    fn logits(&self, tape: &mut Tape<f32>, batch: &MaskedBatch, dropout: Option<&mut crate::rng::StreamRng>) -> Result<Var> {
        match self.data {
            TaskData::Token(_) => token_logits(tape, &self.model, &self.head, batch, self.cfg.mode, dropout),
            TaskData::Sentence(_) => sentence_logits(tape, &self.model, &self.head, batch, self.cfg.mode, dropout),
        }
    }

    /// Loss of step `step`'s batch, with gradients written into copies of
    /// the encoder and head parameters.
    pub fn loss_and_gradients(&self, step: u64) -> Result<(f64, ParamSet<f32>, ParamSet<f32>)> {
        let seed = self.cfg.train.seed;
        let mut rng = substream(seed, "finetune/batch", step);
        let idx: Vec<usize> = (0..self.cfg.train.batch_size).map(|_| rng.random_range(0..self.data.len())).collect();
        let (batch, labels) = self.data.batch(&idx)?;
        let mut tape = Tape::new();
        let mut drop = substream(seed, "finetune/dropout", step);
        let logits = self.logits(&mut tape, &batch, Some(&mut drop))?;
        let loss = tape.cross_entropy(logits, &labels, IGNORE_LABEL)?;
        let value = tape.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(Error::Divergence { step, loss: value });
        }
        let grads = tape.backward(loss)?;
        let mut mp = self.model.params.clone();
        let mut hp = self.head.params.clone();
        grads.write_to(&mut mp)?;
        grads.write_to(&mut hp)?;
        Ok((value, mp, hp))
    }

    pub fn step(&mut self) -> Result<f64> {
        let step = self.step + 1;
        let (loss, mut mp, mut hp) = self.loss_and_gradients(step)?;
        let fixed_pool = !self.cfg.mode.uses_prompts() || self.cfg.freeze_pool;
        if fixed_pool {
            for (name, t) in mp.iter_mut() {
                if is_pool_param(name) {
                    t.zero_grad();
                }
            }
        }
        adam_step(&mut mp, &mut self.adam_model, &self.cfg.train, step)?;
        adam_step(&mut hp, &mut self.adam_head, &self.cfg.train, step)?;
        self.model.params = mp;
        self.head.params = hp;
        self.step = step;
        Ok(loss)
    }

    pub fn run(&mut self) -> Result<Vec<f64>> {
        let mut losses = Vec::new();
        while self.step < self.cfg.train.total_steps {
            losses.push(self.step()?);
        }
        Ok(losses)
    }

    pub fn checkpoint(&self, vocab: Option<&Vocabulary>, labels: Vec<String>) -> Checkpoint {
        Checkpoint {
            stage: Stage::Finetune,
            step: self.step,
            config: self.model.config.clone(),
            train: Some(self.cfg.train.clone()),
            vocab: vocab.cloned(),
            finetune: Some(FinetuneMeta {
                mode: self.cfg.mode,
                task: self.head.kind,
                labels,
                freeze_pool: self.cfg.freeze_pool,
            }),
            params: self.model.params.clone(),
            adam: None,
            head: Some(self.head.params.clone()),
        }
    }
}

/// Result of a fine-tuning run.
#[derive(Clone, Debug)]
pub struct Finetuned {
    pub model: EncoderModel,
    pub head: TaskHead,
    pub losses: Vec<f64>,
}

pub fn finetune_token_task(model: EncoderModel, data: &[TokenExample], classes: usize, cfg: &FinetuneConfig) -> Result<Finetuned> {
    let head = TaskHead::new(TaskKind::Token, classes, model.config.hidden, cfg.train.seed)?;
    let mut t = FinetuneTrainer::new(model, head, cfg.clone(), TaskData::Token(data))?;
    let losses = t.run()?;
    Ok(Finetuned { model: t.model, head: t.head, losses })
}

pub fn finetune_sentence_task(
    model: EncoderModel,
    data: &[SentenceExample],
    classes: usize,
    cfg: &FinetuneConfig,
) -> Result<Finetuned> {
    let head = TaskHead::new(TaskKind::Sentence, classes, model.config.hidden, cfg.train.seed)?;
    let mut t = FinetuneTrainer::new(model, head, cfg.clone(), TaskData::Sentence(data))?;
    let losses = t.run()?;
    Ok(Finetuned { model: t.model, head: t.head, losses })
}

/// Predicted class per labelled row, evaluated in chunks without dropout.
pub fn predict(model: &EncoderModel, head: &TaskHead, data: TaskData<'_>, mode: FinetuneMode) -> Result<Vec<(u32, u32)>> {
    let mut out = Vec::new();
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(64) {
        let (batch, labels) = data.batch(chunk)?;
        let mut tape = Tape::new();
        let logits = match data {
            TaskData::Token(_) => token_logits(&mut tape, model, head, &batch, mode, None)?,
            TaskData::Sentence(_) => sentence_logits(&mut tape, model, head, &batch, mode, None)?,
        };
        let lv = tape.value(logits);
        out.extend(labels.iter().enumerate().map(|(r, &l)| (argmax(lv.row(r)) as u32, l)));
    }
    Ok(out)
}

/// Fraction of rows predicted correctly.
pub fn accuracy(model: &EncoderModel, head: &TaskHead, data: TaskData<'_>, mode: FinetuneMode) -> Result<f64> {
    let p = predict(model, head, data, mode)?;
    Ok(p.iter().filter(|(a, b)| a == b).count() as f64 / p.len().max(1) as f64)
}

//! Sentence retrieval, layer sweeps, prompt-selection statistics and
//! prompt exports.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::MaskedBatch;
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::numerics::{argmax, Real, Tape};
use crate::prompt_pool::top_prompt;
use crate::rng::substream;

/// Sentences per forward pass during evaluation.
const EVAL_BATCH: usize = 32;

/// Worker threads for evaluation: `XLMP_THREADS` if set, else the number of
/// available cores.
pub fn worker_threads() -> usize {
    std::env::var("XLMP_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Maps `f` over chunks of `items` on up to [`worker_threads`] threads and
/// concatenates the results in chunk order.
fn par_chunks<I: Sync, O: Send>(items: &[I], chunk: usize, f: impl Fn(&[I]) -> Result<Vec<O>> + Sync) -> Result<Vec<O>> {
    let chunks: Vec<&[I]> = items.chunks(chunk).collect();
    let threads = worker_threads().min(chunks.len()).max(1);
    if threads == 1 {
        let mut out = Vec::with_capacity(items.len());
        for c in chunks {
            out.extend(f(c)?);
        }
        return Ok(out);
    }
    let per = chunks.len().div_ceil(threads);
    let parts: Vec<Result<Vec<O>>> = std::thread::scope(|s| {
        let handles: Vec<_> = chunks
            .chunks(per)
            .map(|group| {
                let f = &f;
                s.spawn(move || {
                    let mut out = Vec::new();
                    for c in group {
                        out.extend(f(c)?);
                    }
                    Ok(out)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// How sentence vectors are read off the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RepresentationOptions {
    pub layer: usize,
    /// Run the encoder with retrieved prompts prepended.
    pub prompts: bool,
    /// Average over prompt rows as well as CLS and tokens.
    pub include_prompt_positions: bool,
}

impl Default for RepresentationOptions {
    fn default() -> Self {
        RepresentationOptions { layer: 0, prompts: true, include_prompt_positions: false }
    }
}

/// Mean hidden state per sentence for every layer: `[layer][sentence][D]`.
pub fn all_layer_representations<T: Real>(
    model: &EncoderModel<T>,
    sentences: &[Vec<u32>],
    prompts: bool,
    include_prompt_positions: bool,
) -> Result<Vec<Vec<Vec<f64>>>> {
    if include_prompt_positions && !prompts {
        return Err(Error::InvalidArgument("prompt positions requested without prompts".into()));
    }
    let per_sentence = par_chunks(sentences, EVAL_BATCH, |chunk| {
        let batch = MaskedBatch::unmasked(chunk)?;
        let mut tape = Tape::new();
        let out = model.forward_mode(&mut tape, &batch, prompts, None)?;
        let l = out.layout;
        let mut res: Vec<Vec<Vec<f64>>> = Vec::with_capacity(l.batch);
        for b in 0..l.batch {
            let mut rows: Vec<usize> = l.text_rows(b).filter(|&r| out.valid[r]).collect();
            if include_prompt_positions {
                rows.extend(l.prompt_rows(b));
            }
            if rows.is_empty() {
                return Err(Error::EmptyPool { sequence: b });
            }
            let layers = out
                .layers
                .iter()
                .map(|&v| {
                    let t = tape.value(v);
                    let mut acc = vec![0.0; t.cols()];
                    for &r in &rows {
                        for (a, x) in acc.iter_mut().zip(t.row(r)) {
                            *a += x.as_f64();
                        }
                    }
                    acc.iter_mut().for_each(|a| *a /= rows.len() as f64);
                    acc
                })
                .collect();
            res.push(layers);
        }
        Ok(res)
    })?;
    let n_layers = model.config.num_layers + 1;
    Ok((0..n_layers).map(|k| per_sentence.iter().map(|s| s[k].clone()).collect()).collect())
}

/// Mean hidden state at one layer for each sentence.
pub fn sentence_representations<T: Real>(
    model: &EncoderModel<T>,
    sentences: &[Vec<u32>],
    opts: &RepresentationOptions,
) -> Result<Vec<Vec<f64>>> {
    if opts.layer > model.config.num_layers {
        return Err(Error::InvalidArgument(format!(
            "layer {} out of range 0..={}",
            opts.layer, model.config.num_layers
        )));
    }
    let mut all = all_layer_representations(model, sentences, opts.prompts, opts.include_prompt_positions)?;
    Ok(all.swap_remove(opts.layer))
}

pub fn sentence_representation<T: Real>(model: &EncoderModel<T>, sentence: &[u32], opts: &RepresentationOptions) -> Result<Vec<f64>> {
    Ok(sentence_representations(model, &[sentence.to_vec()], opts)?.remove(0))
}

fn unit(v: &[f64], index: usize) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::ZeroNorm { index });
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Index of the most cosine-similar key for every query; ties go to the
/// lowest index.
pub fn nearest_neighbors(queries: &[Vec<f64>], keys: &[Vec<f64>]) -> Result<Vec<usize>> {
    let k: Vec<Vec<f64>> = keys.iter().enumerate().map(|(i, v)| unit(v, i)).collect::<Result<_>>()?;
    queries
        .iter()
        .enumerate()
        .map(|(i, q)| {
            let q = unit(q, i)?;
            let sims: Vec<f64> = k.iter().map(|kv| kv.iter().zip(&q).map(|(a, b)| a * b).sum()).collect();
            Ok(argmax(&sims))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "src->tgt")]
    SrcToTgt,
    #[serde(rename = "tgt->src")]
    TgtToSrc,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::SrcToTgt => "src->tgt",
            Direction::TgtToSrc => "tgt->src",
        }
    }
}

/// Nearest-neighbour retrieval outcome in one direction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub direction: Direction,
    pub layer: usize,
    pub include_prompt_positions: bool,
    pub accuracy: f64,
    /// Retrieved index for each query.
    pub nearest: Vec<usize>,
}

/// Accuracy@1 in both directions for index-aligned representation lists.
pub fn retrieval_from_representations(
    src: &[Vec<f64>],
    tgt: &[Vec<f64>],
    layer: usize,
    include_prompt_positions: bool,
) -> Result<[RetrievalReport; 2]> {
    if src.len() != tgt.len() || src.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "retrieval needs equally many non-zero sources and targets, got {} and {}",
            src.len(),
            tgt.len()
        )));
    }
    let report = |direction, q: &[Vec<f64>], k: &[Vec<f64>]| -> Result<RetrievalReport> {
        let nearest = nearest_neighbors(q, k)?;
        let hits = nearest.iter().enumerate().filter(|(i, &j)| *i == j).count();
        Ok(RetrievalReport {
            direction,
            layer,
            include_prompt_positions,
            accuracy: hits as f64 / nearest.len() as f64,
            nearest,
        })
    };
    Ok([report(Direction::SrcToTgt, src, tgt)?, report(Direction::TgtToSrc, tgt, src)?])
}

pub fn retrieval_accuracy<T: Real>(
    src: &[Vec<u32>],
    tgt: &[Vec<u32>],
    model: &EncoderModel<T>,
    opts: &RepresentationOptions,
) -> Result<[RetrievalReport; 2]> {
    if src.len() != tgt.len() {
        return Err(Error::InvalidArgument(format!("{} sources but {} targets", src.len(), tgt.len())));
    }
    let s = sentence_representations(model, src, opts)?;
    let t = sentence_representations(model, tgt, opts)?;
    retrieval_from_representations(&s, &t, opts.layer, opts.include_prompt_positions)
}

/// Retrieval in both directions at every layer, layer-major.
pub fn layer_sweep<T: Real>(
    src: &[Vec<u32>],
    tgt: &[Vec<u32>],
    model: &EncoderModel<T>,
    prompts: bool,
    include_prompt_positions: bool,
) -> Result<Vec<RetrievalReport>> {
    if src.len() != tgt.len() {
        return Err(Error::InvalidArgument(format!("{} sources but {} targets", src.len(), tgt.len())));
    }
    let s = all_layer_representations(model, src, prompts, include_prompt_positions)?;
    let t = all_layer_representations(model, tgt, prompts, include_prompt_positions)?;
    let mut out = Vec::new();
    for (layer, (sl, tl)) in s.iter().zip(&t).enumerate() {
        out.extend(retrieval_from_representations(sl, tl, layer, include_prompt_positions)?);
    }
    Ok(out)
}

/// Best accuracy over layers and directions.
pub fn best_accuracy(sweep: &[RetrievalReport]) -> f64 {
    sweep.iter().map(|r| r.accuracy).fold(0.0, f64::max)
}

/// CSV with header `layer,direction,accuracy`.
pub fn sweep_csv(sweep: &[RetrievalReport]) -> String {
    let mut s = String::from("layer,direction,accuracy\n");
    for r in sweep {
        let _ = writeln!(s, "{},{},{}", r.layer, r.direction.as_str(), r.accuracy);
    }
    s
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Retrieval weights `α` for every sentence.
pub fn retrieval_weights<T: Real>(model: &EncoderModel<T>, sentences: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
    par_chunks(sentences, EVAL_BATCH, |chunk| {
        let batch = MaskedBatch::unmasked(chunk)?;
        let mut tape = Tape::new();
        let vars = model.retrieve(&mut tape, &batch)?;
        let a = tape.value(vars.alpha);
        Ok((0..a.rows()).map(|b| a.row(b).iter().map(|x| x.as_f64()).collect()).collect())
    })
}

/// Retrieved prompts flattened to `L_p * D` values per sentence.
pub fn retrieved_prompts<T: Real>(model: &EncoderModel<T>, sentences: &[Vec<u32>]) -> Result<Vec<Vec<T>>> {
    par_chunks(sentences, EVAL_BATCH, |chunk| {
        let batch = MaskedBatch::unmasked(chunk)?;
        let mut tape = Tape::new();
        let vars = model.retrieve(&mut tape, &batch)?;
        let p = tape.value(vars.prompts);
        let per = p.len() / batch.batch_size;
        Ok(p.data().chunks(per).map(<[T]>::to_vec).collect())
    })
}

/// Arg-max selection counts and mean retrieval weights over a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptSelectionHistogram {
    pub counts: Vec<u64>,
    pub mean_alpha: Vec<f64>,
}

impl PromptSelectionHistogram {
    pub fn from_weights(alphas: &[Vec<f64>], pool_size: usize) -> Self {
        let mut counts = vec![0u64; pool_size];
        let mut mean_alpha = vec![0.0; pool_size];
        for a in alphas {
            counts[top_prompt(a)] += 1;
            for (m, x) in mean_alpha.iter_mut().zip(a) {
                *m += x;
            }
        }
        if !alphas.is_empty() {
            mean_alpha.iter_mut().for_each(|m| *m /= alphas.len() as f64);
        }
        PromptSelectionHistogram { counts, mean_alpha }
    }

    pub fn instances(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Histogram of the concatenated datasets.
    pub fn merge(&self, other: &Self) -> Self {
        let (n1, n2) = (self.instances() as f64, other.instances() as f64);
        let total = (n1 + n2).max(1.0);
        PromptSelectionHistogram {
            counts: self.counts.iter().zip(&other.counts).map(|(a, b)| a + b).collect(),
            mean_alpha: self.mean_alpha.iter().zip(&other.mean_alpha).map(|(a, b)| (a * n1 + b * n2) / total).collect(),
        }
    }
}

pub fn prompt_selection_histogram<T: Real>(model: &EncoderModel<T>, sentences: &[Vec<u32>]) -> Result<PromptSelectionHistogram> {
    let alphas = retrieval_weights(model, sentences)?;
    Ok(PromptSelectionHistogram::from_weights(&alphas, model.config.pool_size))
}

/// CSV with header `lang,prompt_index,count`.
pub fn histogram_csv(per_language: &[(String, PromptSelectionHistogram)]) -> String {
    let mut s = String::from("lang,prompt_index,count\n");
    for (lang, h) in per_language {
        for (j, c) in h.counts.iter().enumerate() {
            let _ = writeln!(s, "{lang},{j},{c}");
        }
    }
    s
}

/// Sentences of one language with their ids.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelledSentences {
    pub lang: String,
    pub ids: Vec<usize>,
    pub sentences: Vec<Vec<u32>>,
}

/// Writes `lang,sid,p0,...` rows with each sentence's flattened retrieved
/// prompt. Returns the number of rows written.
pub fn export_prompt_representations<T: Real>(
    model: &EncoderModel<T>,
    dataset: &[LabelledSentences],
    path: &Path,
) -> Result<usize> {
    let pool = model.pool().ok_or_else(|| Error::InvalidArgument("model has no prompt pool".into()))?;
    let width = pool.prompt_len * pool.width;
    let mut s = String::from("lang,sid");
    for i in 0..width {
        let _ = write!(s, ",p{i}");
    }
    s.push('\n');
    let mut rows = 0;
    for group in dataset {
        let prompts = retrieved_prompts(model, &group.sentences)?;
        for (sid, p) in group.ids.iter().zip(&prompts) {
            let _ = write!(s, "{},{sid}", group.lang);
            for x in p {
                let _ = write!(s, ",{x}");
            }
            s.push('\n');
            rows += 1;
        }
    }
    write_text(path, &s)?;
    Ok(rows)
}

/// Jensen-Shannon divergence in bits, after adding 1e-12 to every entry and
/// renormalizing.
pub fn jsd(p: &[f64], q: &[f64]) -> f64 {
    let smooth = |v: &[f64]| {
        let s: f64 = v.iter().map(|x| x + 1e-12).sum();
        v.iter().map(|x| (x + 1e-12) / s).collect::<Vec<_>>()
    };
    let (p, q) = (smooth(p), smooth(q));
    let kl = |a: &[f64], m: &[f64]| a.iter().zip(m).map(|(x, y)| x * (x / y).log2()).sum::<f64>();
    let m: Vec<f64> = p.iter().zip(&q).map(|(a, b)| 0.5 * (a + b)).collect();
    (0.5 * kl(&p, &m) + 0.5 * kl(&q, &m)).max(0.0)
}

/// Between-language over within-language divergence of mean retrieval weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparationScore {
    pub ratio: f64,
    pub between: f64,
    pub within: f64,
    /// Both divergences vanished; `ratio` is reported as 1.
    pub degenerate: bool,
}

fn half_means(instances: &[&Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let dim = instances[0].len();
    let mut h = [vec![0.0; dim], vec![0.0; dim]];
    let mut n = [0usize; 2];
    for (i, v) in instances.iter().enumerate() {
        for (a, x) in h[i % 2].iter_mut().zip(v.iter()) {
            *a += x;
        }
        n[i % 2] += 1;
    }
    for k in 0..2 {
        h[k].iter_mut().for_each(|a| *a /= n[k] as f64);
    }
    let [a, b] = h;
    (a, b)
}

fn divergences(groups: &[Vec<&Vec<f64>>]) -> (f64, f64) {
    let halves: Vec<(Vec<f64>, Vec<f64>)> = groups.iter().map(|g| half_means(g)).collect();
    let l = halves.len();
    let within = halves.iter().map(|(a, b)| jsd(a, b)).sum::<f64>() / l as f64;
    let mut between = 0.0;
    for i in 0..l {
        for j in 0..l {
            if i != j {
                between += jsd(&halves[i].0, &halves[j].1);
            }
        }
    }
    (between / (l * (l - 1)) as f64, within)
}

fn check_groups(groups: &[Vec<Vec<f64>>]) -> Result<()> {
    if groups.len() < 2 {
        return Err(Error::InvalidArgument("separation needs at least two languages".into()));
    }
    if let Some(i) = groups.iter().position(|g| g.len() < 2) {
        return Err(Error::InvalidArgument(format!("language {i} has fewer than two instances")));
    }
    let dim = groups[0][0].len();
    if groups.iter().flatten().any(|v| v.len() != dim) {
        return Err(Error::InvalidArgument("weight vectors differ in length".into()));
    }
    Ok(())
}

fn score(between: f64, within: f64) -> SeparationScore {
    if within == 0.0 && between == 0.0 {
        return SeparationScore { ratio: 1.0, between, within, degenerate: true };
    }
    SeparationScore { ratio: between / within, between, within, degenerate: false }
}

/// Splits each language's instances into alternating halves and compares
/// the mean weight vectors of halves of different languages against those of
/// the same language.
pub fn language_separation_score(groups: &[Vec<Vec<f64>>]) -> Result<SeparationScore> {
    check_groups(groups)?;
    let refs: Vec<Vec<&Vec<f64>>> = groups.iter().map(|g| g.iter().collect()).collect();
    let (b, w) = divergences(&refs);
    Ok(score(b, w))
}

/// The same statistic with language labels shuffled, summed over
/// `permutations` shuffles before taking the ratio.
pub fn permutation_null(groups: &[Vec<Vec<f64>>], permutations: usize, seed: u64) -> Result<SeparationScore> {
    check_groups(groups)?;
    let pooled: Vec<&Vec<f64>> = groups.iter().flatten().collect();
    let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
    let (mut b, mut w) = (0.0, 0.0);
    for k in 0..permutations.max(1) {
        let mut order = pooled.clone();
        order.shuffle(&mut substream(seed, "separation/null", k as u64));
        let mut start = 0;
        let shuffled: Vec<Vec<&Vec<f64>>> = sizes
            .iter()
            .map(|&n| {
                let g = order[start..start + n].to_vec();
                start += n;
                g
            })
            .collect();
        let (bb, ww) = divergences(&shuffled);
        b += bb;
        w += ww;
    }
    Ok(score(b, w))
}

//! Independent straight-line oracles shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use xlmp::data::{CLS, FIRST_REGULAR_ID};
use xlmp::encoder::{EncoderConfig, EncoderModel};
use xlmp::numerics::ParamSet;

pub fn tiny(vocab: usize) -> EncoderConfig {
    EncoderConfig::tiny(vocab)
}

/// A smaller tiny model for slow oracles.
pub fn micro(vocab: usize) -> EncoderConfig {
    EncoderConfig {
        num_layers: 2,
        hidden: 8,
        ffn_inner: 16,
        heads: 2,
        head_size: 4,
        max_seq_len: 16,
        pool_size: 3,
        prompt_len: 2,
        ..EncoderConfig::tiny(vocab)
    }
}

/// `n` sequences starting with CLS, lengths drawn from `min..=max`.
pub fn random_seqs<R: Rng>(rng: &mut R, n: usize, vocab: usize, min: usize, max: usize) -> Vec<Vec<u32>> {
    (0..n)
        .map(|_| {
            let len = rng.random_range(min..=max);
            std::iter::once(CLS).chain((1..len).map(|_| rng.random_range(FIRST_REGULAR_ID..vocab as u32))).collect()
        })
        .collect()
}

fn mat(params: &ParamSet<f64>, name: &str) -> (Vec<f64>, usize, usize) {
    let t = params.get(name).unwrap_or_else(|| panic!("missing {name}"));
    (t.data().to_vec(), t.rows(), t.cols())
}

fn vecp(params: &ParamSet<f64>, name: &str) -> Vec<f64> {
    params.get(name).unwrap().data().to_vec()
}

/// `x[n×k] · w[k×m]`, naive loops.
pub fn matmul(x: &[Vec<f64>], w: &[f64], k: usize, m: usize) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            assert_eq!(row.len(), k);
            (0..m).map(|j| (0..k).map(|p| row[p] * w[p * m + j]).sum()).collect()
        })
        .collect()
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Straight-line retrieval: max-pool, project, score against keys, softmax,
/// mix values. Returns `(alpha, prompt rows)`.
pub fn oracle_retrieve(params: &ParamSet<f64>, emb: &[Vec<f64>], valid: &[bool], lp: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let d = emb[0].len();
    let mut r = vec![f64::NEG_INFINITY; d];
    for (row, _) in emb.iter().zip(valid).filter(|(_, &v)| v) {
        for c in 0..d {
            r[c] = r[c].max(row[c]);
        }
    }
    let (w, _, _) = mat(params, "prompt.query_proj");
    let q = &matmul(&[r], &w, d, d)[0];
    let (keys, m, _) = mat(params, "prompt.keys");
    let scores: Vec<f64> = (0..m).map(|j| (0..d).map(|c| q[c] * keys[j * d + c]).sum()).collect();
    let alpha = softmax(&scores);
    let values = vecp(params, "prompt.values");
    let prompt = (0..lp)
        .map(|l| (0..d).map(|c| (0..m).map(|j| alpha[j] * values[(j * lp + l) * d + c]).sum()).collect())
        .collect();
    (alpha, prompt)
}

fn linear(params: &ParamSet<f64>, x: &[Vec<f64>], name: &str) -> Vec<Vec<f64>> {
    let (w, k, m) = mat(params, name);
    let b = vecp(params, &format!("{name}.bias"));
    matmul(x, &w, k, m).into_iter().map(|r| r.iter().zip(&b).map(|(a, c)| a + c).collect()).collect()
}

fn layer_norm(params: &ParamSet<f64>, x: &[Vec<f64>], prefix: &str) -> Vec<Vec<f64>> {
    let g = vecp(params, &format!("{prefix}.gain"));
    let b = vecp(params, &format!("{prefix}.bias"));
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|u| (u - mean).powi(2)).sum::<f64>() / n;
            let s = (var + 1e-5).sqrt();
            row.iter().enumerate().map(|(c, u)| (u - mean) / s * g[c] + b[c]).collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Final hidden states of one sequence, computed without the tape. With
/// `prompts`, the retrieved prompt rows come first.
pub fn reference_forward(model: &EncoderModel<f64>, ids: &[u32], prompts: bool) -> Vec<Vec<f64>> {
    let p = &model.params;
    let cfg = &model.config;
    let d = cfg.hidden;
    let (tok, _, _) = mat(p, "embed.token");
    let (pos, _, _) = mat(p, "embed.pos");
    let tok_rows: Vec<Vec<f64>> = ids.iter().map(|&i| tok[i as usize * d..][..d].to_vec()).collect();
    let mut x: Vec<Vec<f64>> =
        tok_rows.iter().enumerate().map(|(t, r)| r.iter().zip(&pos[t * d..][..d]).map(|(a, b)| a + b).collect()).collect();
    if prompts {
        let (_, pr) = oracle_retrieve(p, &tok_rows, &vec![true; ids.len()], cfg.prompt_len);
        x = pr.into_iter().chain(x).collect();
    }
    let hd = cfg.head_size;
    for i in 0..cfg.num_layers {
        let q = linear(p, &x, &format!("block{i}.attn.q"));
        let k = linear(p, &x, &format!("block{i}.attn.k"));
        let v = linear(p, &x, &format!("block{i}.attn.v"));
        let n = x.len();
        let mut att = vec![vec![0.0; d]; n];
        for h in 0..cfg.heads {
            for a in 0..n {
                let s: Vec<f64> = (0..n)
                    .map(|b| (0..hd).map(|c| q[a][h * hd + c] * k[b][h * hd + c]).sum::<f64>() / (hd as f64).sqrt())
                    .collect();
                let w = softmax(&s);
                for c in 0..hd {
                    att[a][h * hd + c] = (0..n).map(|b| w[b] * v[b][h * hd + c]).sum();
                }
            }
        }
        let o = linear(p, &att, &format!("block{i}.attn.o"));
        let res: Vec<Vec<f64>> = x.iter().zip(&o).map(|(a, b)| a.iter().zip(b).map(|(u, w)| u + w).collect()).collect();
        let h1 = layer_norm(p, &res, &format!("block{i}.ln1"));
        let f = linear(p, &h1, &format!("block{i}.ffn.in"));
        let f: Vec<Vec<f64>> = f.into_iter().map(|r| r.into_iter().map(gelu).collect()).collect();
        let f = linear(p, &f, &format!("block{i}.ffn.out"));
        let res: Vec<Vec<f64>> = h1.iter().zip(&f).map(|(a, b)| a.iter().zip(b).map(|(u, w)| u + w).collect()).collect();
        x = layer_norm(p, &res, &format!("block{i}.ln2"));
    }
    x
}

/// Double-loop contrastive loss over row vectors.
pub fn oracle_infonce(v1: &[Vec<f64>], v2: &[Vec<f64>], tau: f64) -> f64 {
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let n = v1.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut denom = 0.0;
        for j in 0..n {
            denom += (cos(&v1[i], &v2[j]) / tau).exp();
        }
        total += -((cos(&v1[i], &v2[i]) / tau).exp() / denom).ln();
    }
    total / n as f64
}

/// Textbook Adam with decoupled weight decay, one scalar at a time.
pub struct ScalarAdam {
    pub m: f64,
    pub v: f64,
}

impl ScalarAdam {
    #[allow(clippy::too_many_arguments)]
    pub fn step(&mut self, p: f64, g: f64, t: u64, lr: f64, b1: f64, b2: f64, eps: f64, wd: f64) -> f64 {
        self.m = b1 * self.m + (1.0 - b1) * g;
        self.v = b2 * self.v + (1.0 - b2) * g * g;
        let mhat = self.m / (1.0 - b1.powi(t as i32));
        let vhat = self.v / (1.0 - b2.powi(t as i32));
        p - lr * (mhat / (vhat.sqrt() + eps) + wd * p)
    }
}

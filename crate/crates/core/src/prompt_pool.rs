//! Key-value prompt pool with instance-wise soft retrieval.
//!
//! The query is the feature-wise max of a sequence's input embeddings,
//! projected by `W`. Scores against the `M` keys are turned into weights by a
//! softmax, and the retrieved prompt is the weighted sum of the `M` prompt
//! values, each `L_p` vectors long.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{argmax, ParamSet, Real, Tape, Tensor, Var};

pub const KEYS: &str = "prompt.keys";
pub const VALUES: &str = "prompt.values";
pub const QUERY_PROJ: &str = "prompt.query_proj";

/// Pool dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPool {
    /// Number of prompts `M`.
    pub pool_size: usize,
    /// Vectors per prompt `L_p`.
    pub prompt_len: usize,
    /// Embedding width `D`; keys share it.
    pub width: usize,
}

/// Number of prompt parameters counted as the pool's size: values plus keys.
/// The query projection is trained too but not counted.
pub fn prompt_param_count(pool_size: usize, prompt_len: usize, width: usize) -> usize {
    pool_size * prompt_len * width + pool_size * width
}

/// Smallest index attaining the maximum weight.
pub fn top_prompt<T: PartialOrd + Copy>(alpha: &[T]) -> usize {
    argmax(alpha)
}

/// Retrieval outputs as tape variables for a batch of `B` sequences.
#[derive(Clone, Copy, Debug)]
pub struct PoolVars {
    /// Pooled query `r`, `[B, D]`.
    pub query: Var,
    /// Retrieval weights, `[B, M]`.
    pub alpha: Var,
    /// Retrieved prompts, `[B * L_p, D]`.
    pub prompts: Var,
}

/// Retrieval outputs for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult<T = f32> {
    /// `[L_p, D]`.
    pub prompt: Tensor<T>,
    pub alpha: Vec<T>,
    pub query: Vec<T>,
}

impl<T: Real> RetrievalResult<T> {
    /// Extracts sequence `b` from batched retrieval outputs.
    pub fn from_tape(tape: &Tape<T>, vars: &PoolVars, b: usize) -> Self {
        let alpha = tape.value(vars.alpha).row(b).to_vec();
        let query = tape.value(vars.query).row(b).to_vec();
        let prompts = tape.value(vars.prompts);
        let width = prompts.cols();
        let lp = prompts.rows() / tape.value(vars.alpha).rows();
        let prompt = Tensor::new(vec![lp, width], prompts.data()[b * lp * width..(b + 1) * lp * width].to_vec())
            .expect("prompt slab shape");
        RetrievalResult { prompt, alpha, query }
    }

    pub fn top_prompt(&self) -> usize {
        top_prompt(&self.alpha)
    }
}

impl PromptPool {
    pub fn new(pool_size: usize, prompt_len: usize, width: usize) -> Result<Self> {
        if pool_size == 0 || prompt_len == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "prompt pool needs positive sizes, got M={pool_size}, L_p={prompt_len}, D={width}"
            )));
        }
        Ok(PromptPool { pool_size, prompt_len, width })
    }

    pub fn param_count(&self) -> usize {
        prompt_param_count(self.pool_size, self.prompt_len, self.width)
    }

    /// Adds keys `[M, D]`, values `[M, L_p, D]` and the query projection
    /// `[D, D]`, all drawn from N(0, std²).
    pub fn init_params<T: Real, R: Rng + ?Sized>(&self, params: &mut ParamSet<T>, std: f64, rng: &mut R) {
        let normal = Normal::new(0.0, std).expect("finite std");
        let mut draw = |shape: Vec<usize>| Tensor::from_fn(shape, |_| T::from_f64_lossy(normal.sample(rng)));
        let (m, lp, d) = (self.pool_size, self.prompt_len, self.width);
        params.insert(KEYS, draw(vec![m, d]));
        params.insert(VALUES, draw(vec![m, lp, d]));
        params.insert(QUERY_PROJ, draw(vec![d, d]));
    }

    /// Checks that `params` holds pool tensors of the right shapes.
    pub fn check_params<T: Real>(&self, params: &ParamSet<T>) -> Result<()> {
        let (m, lp, d) = (self.pool_size, self.prompt_len, self.width);
        for (name, shape) in [(KEYS, vec![m, d]), (VALUES, vec![m, lp, d]), (QUERY_PROJ, vec![d, d])] {
            let t = params.require(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::dim("prompt_pool", format!("{name} has shape {:?}, expected {shape:?}", t.shape())));
            }
        }
        Ok(())
    }

    /// Retrieves one prompt per sequence.
    ///
    /// `embeddings` is `[B * seq, D]`; `valid` marks the positions that take
    /// part in the max pooling (CLS and tokens, not padding).
    pub fn retrieve<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamSet<T>,
        embeddings: Var,
        seq: usize,
        valid: &[bool],
    ) -> Result<PoolVars> {
        let query = tape.max_over_sequence(embeddings, seq, valid)?;
        if tape.value(query).cols() != self.width {
            return Err(Error::dim(
                "retrieve",
                format!("embeddings have width {}, pool {}", tape.value(query).cols(), self.width),
            ));
        }
        let batch = tape.value(query).rows();
        let w = tape.param(params, QUERY_PROJ)?;
        let keys = tape.param(params, KEYS)?;
        let values = tape.param(params, VALUES)?;
        let projected = tape.matmul(query, w)?;
        let scores = tape.matmul_nt(projected, keys)?;
        let alpha = tape.softmax(scores, 1)?;
        let flat = tape.reshape(values, &[self.pool_size, self.prompt_len * self.width])?;
        let mixed = tape.matmul(alpha, flat)?;
        let prompts = tape.reshape(mixed, &[batch * self.prompt_len, self.width])?;
        Ok(PoolVars { query, alpha, prompts })
    }

    /// Convenience wrapper: retrieval for a single embedded sequence without
    /// keeping the tape.
    pub fn retrieve_one<T: Real>(&self, params: &ParamSet<T>, embeddings: &Tensor<T>, valid: &[bool]) -> Result<RetrievalResult<T>> {
        let mut tape = Tape::new();
        let seq = embeddings.rows();
        let e = tape.constant(embeddings.clone());
        let vars = self.retrieve(&mut tape, params, e, seq, valid)?;
        Ok(RetrievalResult::from_tape(&tape, &vars, 0))
    }
}

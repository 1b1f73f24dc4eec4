//! Masked-token loss and the dropout contrastive loss.

use serde::{Deserialize, Serialize};

use crate::data::IGNORE_LABEL;
use crate::encoder::ForwardOutput;
use crate::error::{Error, Result};
use crate::numerics::{Real, Tape, Var};

/// Mean negative log-likelihood over the labelled (masked) rows.
pub fn mlm_loss<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[u32]) -> Result<Var> {
    tape.cross_entropy(logits, labels, IGNORE_LABEL)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InfoNceConfig {
    pub temperature: f64,
}

impl Default for InfoNceConfig {
    fn default() -> Self {
        InfoNceConfig { temperature: 0.05 }
    }
}

impl InfoNceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature > 0.0 && self.temperature.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!("infonce.temperature must be positive, got {}", self.temperature)))
        }
    }
}

/// Per sequence, the mean of the prompt states and the CLS state of the last
/// layer, `[batch, D]`.
pub fn infonce_sentence_rep<T: Real>(tape: &mut Tape<T>, out: &ForwardOutput) -> Result<Var> {
    if out.retrieval.is_none() {
        return Err(Error::InvalidArgument("sentence representation needs a forward pass with prompts".into()));
    }
    let l = out.layout;
    let segments: Vec<Vec<usize>> = (0..l.batch)
        .map(|b| l.prompt_rows(b).chain(std::iter::once(l.cls_row(b))).collect())
        .collect();
    tape.segment_mean(out.hidden, &segments)
}

/// Contrastive loss between two views of the same `N` sentences.
///
/// Anchor `i` of the first view must pick its own second view among all `N`
/// second-view vectors, scored by cosine similarity over the temperature.
pub fn infonce_loss<T: Real>(tape: &mut Tape<T>, view1: Var, view2: Var, cfg: &InfoNceConfig) -> Result<Var> {
    cfg.validate()?;
    let n = tape.value(view1).rows();
    if tape.value(view1).shape() != tape.value(view2).shape() {
        return Err(Error::dim(
            "infonce_loss",
            format!("{:?} vs {:?}", tape.value(view1).shape(), tape.value(view2).shape()),
        ));
    }
    if n < 2 {
        return Err(Error::InvalidArgument(format!("contrastive loss needs at least 2 sentences, got {n}")));
    }
    let a = tape.normalize_rows(view1)?;
    let b = tape.normalize_rows(view2)?;
    let sim = tape.matmul_nt(a, b)?;
    let logits = tape.scale(sim, T::from_f64_lossy(1.0 / cfg.temperature));
    let labels: Vec<u32> = (0..n as u32).collect();
    tape.cross_entropy(logits, &labels, IGNORE_LABEL)
}

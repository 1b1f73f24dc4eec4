pub mod error;
pub mod numerics;
pub mod rng;

pub use error::{Error, Result};
pub mod data;
pub mod diagnostics;
pub mod encoder;
pub mod evaluation;
pub mod objectives;
pub mod prompt_pool;
pub mod training;
pub mod finetune;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/data.md")]
    struct Data;
    #[doc = include_str!("../../../book/src/prompt_pool.md")]
    struct PromptPool;
    #[doc = include_str!("../../../book/src/training.md")]
    struct Training;
    #[doc = include_str!("../../../book/src/finetuning.md")]
    struct Finetuning;
    #[doc = include_str!("../../../book/src/evaluation.md")]
    struct Evaluation;
    #[doc = include_str!("../../../book/src/testing.md")]
    struct Testing;
}

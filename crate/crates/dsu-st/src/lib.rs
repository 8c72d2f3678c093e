//! Compact speech translation via discrete speech units (DSU).
//!
//! The recipe: pretrain a filterbank-to-DSU encoder-decoder and a
//! DSU-to-translation encoder-decoder, transplant the first encoder and the
//! second decoder into one compact model, then finetune on paired
//! speech-translation data with an interpolated MLE + CTC objective.
//!
//! Every numeric component — reverse-mode autodiff, CTC forward-backward,
//! mini-batch k-means, BPE, beam search, BLEU/chrF — is implemented in this
//! crate and verified against independent oracles in the test suite. See the
//! `book/` guide for a narrative walk-through.

pub mod decode;
pub mod dsu;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod synth;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    macro_rules! chapter {
        ($name:ident, $path:literal) => {
            #[doc = include_str!($path)]
            mod $name {}
        };
    }
    chapter!(introduction, "../../../book/src/introduction.md");
    chapter!(autodiff, "../../../book/src/autodiff.md");
    chapter!(ctc, "../../../book/src/ctc.md");
    chapter!(discrete_units, "../../../book/src/discrete-units.md");
    chapter!(tokenization, "../../../book/src/tokenization.md");
    chapter!(training_recipe, "../../../book/src/training-recipe.md");
    chapter!(evaluation, "../../../book/src/evaluation.md");
}

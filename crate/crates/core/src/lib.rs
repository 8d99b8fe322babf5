//! Per-class transformation generators trained jointly with a classifier.
//!
//! Each of the N classes owns a residual image-to-image generator. During
//! training the classifier and the generators take turns: the classifier
//! learns from all N transformed copies of a batch, and generator `k` learns
//! to stay close to its input while making images of class `k` easy to
//! classify. At inference the N logit vectors of an image are concatenated
//! and the flat argmax, taken modulo N, is the predicted class.
//!
//! Start with [`trainer::run_experiment`] for a cross-validated run, or with
//! the `classfuse` binary (see [`cli`]). The guide in `book/` walks through
//! every module.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod evalreport;
pub mod fusion;
pub mod losses;
pub mod nets;
pub mod optim;
pub mod trainer;

pub use error::{Error, Result};

#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/networks.md")]
    mod networks {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/fusion.md")]
    mod fusion {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/checkpoints.md")]
    mod checkpoints {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}

//! Attribution-guided decomposition and counterfactual composition for
//! models that latch onto spurious correlations.
//!
//! The pipeline, end to end:
//!
//! 1. [`synthdata`] generates a two-class image dataset where an easy
//!    spurious pattern co-occurs with the causal pattern on most examples.
//! 2. [`trainer::train_erm`] fits a small convolutional classifier; under
//!    correlation it prefers the spurious shortcut, so worst-group accuracy
//!    collapses.
//! 3. [`attribution`] computes xGradCAM maps for the trained model and
//!    [`masking`] turns them into per-image binary masks, sizing each mask
//!    with a loss-probe curve and a knee detector ([`kneedle`]).
//! 4. [`composer`] splices masked image parts across labels to build
//!    counterfactual examples that break the spurious co-occurrence.
//! 5. [`trainer::dac_retrain`] retrains only the classifier head with the
//!    composed examples mixed into the loss; [`evaluation`] reports
//!    per-group accuracy, worst-group accuracy, and attention diagnostics.
//!
//! [`baselines`] holds the comparison retrainers (plain last-layer and
//! group-balanced last-layer), and [`plot`] renders the diagnostic charts.

pub use ndarray;

pub mod attribution;
pub mod backbone;
pub mod baselines;
pub mod composer;
pub mod error;
pub mod evaluation;
pub mod kneedle;
pub mod masking;
pub mod plot;
pub mod streams;
pub mod synthdata;
pub mod trainer;

pub use error::{DacError, Result};

/// True when the `DAC_DETERMINISTIC=1` environment variable is set.
///
/// Every code path in this crate is already sequential with a fixed
/// accumulation order, so runs are bit-reproducible per seed regardless of
/// this flag; the flag is accepted so launchers can assert the intent, and
/// it is recorded into resolved run configs.
pub fn deterministic_mode() -> bool {
    std::env::var("DAC_DETERMINISTIC").map(|v| v == "1").unwrap_or(false)
}

#[cfg(doctest)]
mod book {
    //! Keeps the guide's code snippets compiling and correct: every fenced
    //! Rust block in `book/src/*.md` runs as a doctest of this crate.

    macro_rules! chapter {
        ($name:ident, $path:literal) => {
            #[doc = include_str!($path)]
            pub struct $name;
        };
    }

    chapter!(Introduction, "../../../book/src/introduction.md");
    chapter!(KneeDetection, "../../../book/src/knee-detection.md");
    chapter!(Attribution, "../../../book/src/attribution.md");
    chapter!(AdaptiveMasking, "../../../book/src/adaptive-masking.md");
    chapter!(Composition, "../../../book/src/composition.md");
    chapter!(SyntheticData, "../../../book/src/synthetic-data.md");
    chapter!(Training, "../../../book/src/training.md");
    chapter!(Evaluation, "../../../book/src/evaluation.md");
    chapter!(CommandLine, "../../../book/src/command-line.md");
}

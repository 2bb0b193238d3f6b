//! Prior-guided adaptation of zero-shot vision-language predictions.
//!
//! The engine works on precomputed embeddings only. Given an unlabelled set of
//! image embeddings, a set of caption embeddings and a prior over the label
//! distribution, it trains a small adapter whose predictions stay close to
//! the frozen model's nearest-caption labels while their distribution is
//! pulled toward the prior.
//!
//! Module map:
//!
//! - [`priors`]: label-distribution priors (sampling, discretization)
//! - [`dataio`]: `.pfeb` embedding files and caption manifests
//! - [`zeroshot`]: nearest-caption labelling and predicted histograms
//! - [`losses`]: 1-D Wasserstein, batch KL, conditioning losses and gradients
//! - [`adapter`]: MLP head, Adam, learning-rate schedule, `.pfad` model files
//! - [`trainer`]: the training loop, warmup and batch accumulation
//! - [`promptselect`]: prompt ranking by distance to the prior
//! - [`synth`]: synthetic fixtures with known ground truth
//! - [`eval`]: metrics, sweeps and distribution reports

pub mod adapter;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod losses;
pub mod priors;
pub mod promptselect;
pub mod synth;
pub mod trainer;
pub mod zeroshot;

use serde::{Deserialize, Serialize};

pub use adapter::{Adapter, AdamState, Head, LrSchedule};
pub use dataio::{CaptionSet, EmbeddingDataset};
pub use error::{Error, ErrorCategory, Result};
pub use eval::{EvalReport, Metric};
pub use losses::LossValue;
pub use priors::LabelPrior;
pub use promptselect::{PromptCandidate, RankedPrompt};
pub use synth::SynthSpec;
pub use trainer::{TrainConfig, TrainReport};
pub use zeroshot::ZeroShotResult;

/// The kind of label space being adapted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Regression,
    Classification,
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Task::Regression => f.write_str("regression"),
            Task::Classification => f.write_str("classification"),
        }
    }
}

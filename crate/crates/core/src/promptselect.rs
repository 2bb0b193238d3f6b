//! Ranking caption templates by how well their zero-shot labels match the prior.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{CaptionSet, EmbeddingDataset};
use crate::error::{Error, Result};
use crate::losses;
use crate::priors::LabelPrior;
use crate::zeroshot;
use crate::Task;

/// Seed of the prior samples used for regression ranking.
pub const RANKING_SEED: u64 = 0x9e37_79b9;

pub const LABEL_TOKEN: &str = "[label]";

#[derive(Debug, Clone)]
pub struct PromptCandidate {
    template: String,
    pub captions: CaptionSet,
    /// Filled in by [`rank_prompts`].
    pub w_distance: Option<f64>,
}

impl PromptCandidate {
    pub fn new(template: impl Into<String>, captions: CaptionSet) -> Result<Self> {
        let template = template.into();
        let count = template.matches(LABEL_TOKEN).count();
        if count != 1 {
            return Err(Error::Config(format!(
                "template {template:?} must contain exactly one {LABEL_TOKEN}, found {count}"
            )));
        }
        Ok(Self {
            template,
            captions,
            w_distance: None,
        })
    }

    pub fn template(&self) -> &str {
        &self.template
    }

    /// The caption text for one label value.
    pub fn instantiate(&self, label: &str) -> String {
        self.template.replacen(LABEL_TOKEN, label, 1)
    }
}

/// One line of the ranking. Failed candidates have no distance or rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedPrompt {
    pub template: String,
    /// Position in the input list.
    pub index: usize,
    pub distance: Option<f64>,
    /// 1-based rank; `None` for failed candidates.
    pub rank: Option<usize>,
    pub error: Option<String>,
}

fn distance(dataset: &EmbeddingDataset, captions: &CaptionSet, prior: &LabelPrior, seed: u64) -> Result<f64> {
    let zs = zeroshot::assign(dataset, captions)?;
    match captions.task() {
        Task::Regression => {
            let samples = prior.sample(zs.len(), &mut ChaCha8Rng::seed_from_u64(seed));
            Ok(losses::wasserstein_1d(&zs.hard_labels, &samples)?.value)
        }
        Task::Classification => {
            let histogram = zeroshot::predicted_histogram(&zs, captions)?;
            let pmf = prior.pmf_on_support(captions.values())?;
            Ok(losses::kl_pooled(&histogram, &pmf).0)
        }
    }
}

/// Scores every candidate over the full dataset and sorts ascending by
/// distance (regression: Wasserstein to seeded prior samples; classification:
/// KL of the predicted histogram from the prior pmf). Ties keep input order.
/// Failed candidates are listed after the ranked ones, in input order.
///
/// `w_distance` is written back into each candidate.
pub fn rank_prompts(
    dataset: &EmbeddingDataset,
    candidates: &mut [PromptCandidate],
    prior: &LabelPrior,
    seed: u64,
) -> Result<Vec<RankedPrompt>> {
    if candidates.is_empty() {
        return Err(Error::Config("no prompt candidates".into()));
    }
    let scores: Vec<Result<f64>> = candidates
        .par_iter()
        .map(|c| distance(dataset, &c.captions, prior, seed))
        .collect();

    let mut rows: Vec<RankedPrompt> = Vec::with_capacity(candidates.len());
    for (index, (candidate, score)) in candidates.iter_mut().zip(scores).enumerate() {
        candidate.w_distance = score.as_ref().ok().copied();
        rows.push(RankedPrompt {
            template: candidate.template.clone(),
            index,
            distance: score.as_ref().ok().copied(),
            rank: None,
            error: score.err().map(|e| e.to_string()),
        });
    }
    rows.sort_by(|a, b| match (a.distance, b.distance) {
        (Some(x), Some(y)) => x.total_cmp(&y).then(a.index.cmp(&b.index)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.index.cmp(&b.index),
    });
    for (i, row) in rows.iter_mut().enumerate() {
        if row.distance.is_some() {
            row.rank = Some(i + 1);
        }
    }
    Ok(rows)
}

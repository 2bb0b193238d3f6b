//! Metrics, evaluation reports and experiment sweeps.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::Adapter;
use crate::dataio::{CaptionSet, EmbeddingDataset};
use crate::error::{Error, Result};
use crate::losses;
use crate::priors::{histogram_on_support, LabelPrior};
use crate::trainer::{self, TrainConfig};
use crate::zeroshot::{self, ZeroShotResult};
use crate::Task;

/// Seed for the prior samples behind `w_to_prior`.
pub const EVAL_PRIOR_SEED: u64 = 0x5eed_e7a1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Mae,
    Accuracy,
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "mae needs equal non-empty lists, got {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

pub fn accuracy(pred_index: &[usize], truth_index: &[usize]) -> Result<f64> {
    if pred_index.is_empty() || pred_index.len() != truth_index.len() {
        return Err(Error::Shape(format!(
            "accuracy needs equal non-empty lists, got {} and {}",
            pred_index.len(),
            truth_index.len()
        )));
    }
    let hits = pred_index.iter().zip(truth_index).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / pred_index.len() as f64)
}

/// Metric value plus how far the predicted label distribution is from the prior.
///
/// `w_to_prior` is the 1-D Wasserstein distance to seeded prior samples for
/// regression and `KL(histogram || prior_pmf)` for classification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: Metric,
    pub value: f64,
    pub n: usize,
    pub support: Vec<f64>,
    pub histogram: Vec<f64>,
    pub prior_pmf: Vec<f64>,
    pub w_to_prior: f64,
}

/// Scores label predictions against the dataset's ground truth.
///
/// For classification `pred` holds caption values (class ids).
pub fn report_for_predictions(
    pred: &[f64],
    dataset: &EmbeddingDataset,
    captions: &CaptionSet,
    prior: &LabelPrior,
) -> Result<EvalReport> {
    let truth = dataset
        .labels()
        .ok_or_else(|| Error::InvalidData("evaluation needs ground-truth labels".into()))?;
    let support = captions.values().to_vec();
    let histogram = histogram_on_support(pred, &support);
    let prior_pmf = prior.pmf_on_support(&support)?;
    let (metric, value, w_to_prior) = match captions.task() {
        Task::Regression => {
            let samples = prior.sample(pred.len(), &mut ChaCha8Rng::seed_from_u64(EVAL_PRIOR_SEED));
            let w = losses::wasserstein_1d(pred, &samples)?.value;
            (Metric::Mae, mae(pred, truth)?, w)
        }
        Task::Classification => {
            let to_index = |v: &f64| v.round() as usize;
            let acc = accuracy(
                &pred.iter().map(to_index).collect::<Vec<_>>(),
                &truth.iter().map(to_index).collect::<Vec<_>>(),
            )?;
            (Metric::Accuracy, acc, losses::kl_pooled(&histogram, &prior_pmf).0)
        }
    };
    Ok(EvalReport {
        metric,
        value,
        n: pred.len(),
        support,
        histogram,
        prior_pmf,
        w_to_prior,
    })
}

/// Evaluates a trained adapter on a labelled dataset.
pub fn evaluate(
    adapter: &Adapter,
    dataset: &EmbeddingDataset,
    captions: &CaptionSet,
    prior: &LabelPrior,
) -> Result<EvalReport> {
    let predictions = trainer::predict(adapter, dataset, captions)?;
    report_for_predictions(&predictions.values, dataset, captions, prior)
}

/// Evaluates the zero-shot hard labels themselves.
pub fn evaluate_zero_shot(
    zs: &ZeroShotResult,
    dataset: &EmbeddingDataset,
    captions: &CaptionSet,
    prior: &LabelPrior,
) -> Result<EvalReport> {
    report_for_predictions(&zs.hard_labels, dataset, captions, prior)
}

/// Training data for a sweep: a labelled dataset and its zero-shot labels.
#[derive(Debug, Clone)]
pub struct SweepFixture {
    pub dataset: EmbeddingDataset,
    pub captions: CaptionSet,
    pub zero_shot: ZeroShotResult,
}

impl SweepFixture {
    pub fn new(dataset: EmbeddingDataset, captions: CaptionSet) -> Result<Self> {
        let zero_shot = zeroshot::assign(&dataset, &captions)?;
        Ok(Self {
            dataset,
            captions,
            zero_shot,
        })
    }
}

/// One sweep cell. Failed cells carry `error` and no metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow<T> {
    pub setting: T,
    pub metric: Option<f64>,
    pub error: Option<String>,
}

fn run_cell(fixture: &SweepFixture, prior: &LabelPrior, config: &TrainConfig) -> Result<f64> {
    let (adapter, _) = trainer::train(&fixture.dataset, &fixture.captions, prior, &fixture.zero_shot, config)?;
    Ok(evaluate(&adapter, &fixture.dataset, &fixture.captions, prior)?.value)
}

fn row<T>(setting: T, outcome: Result<f64>) -> SweepRow<T> {
    match outcome {
        Ok(v) => SweepRow {
            setting,
            metric: Some(v),
            error: None,
        },
        Err(e) => SweepRow {
            setting,
            metric: None,
            error: Some(e.to_string()),
        },
    }
}

/// Trains once per prior with an identical config and seed; reports MAE
/// (or accuracy) against ground truth in the order given.
pub fn robustness_sweep(
    fixture: &SweepFixture,
    priors: &[LabelPrior],
    config: &TrainConfig,
) -> Vec<SweepRow<LabelPrior>> {
    priors
        .par_iter()
        .map(|prior| row(prior.clone(), run_cell(fixture, prior, config)))
        .collect()
}

/// Trains once per `alpha` with the prior and seed held fixed.
pub fn alpha_sweep(
    fixture: &SweepFixture,
    prior: &LabelPrior,
    alphas: &[f64],
    config: &TrainConfig,
) -> Vec<SweepRow<f64>> {
    alphas
        .par_iter()
        .map(|&alpha| {
            let config = TrainConfig {
                alpha,
                ..config.clone()
            };
            row(alpha, run_cell(fixture, prior, &config))
        })
        .collect()
}

/// Aligned label histograms over a caption support, ready for plotting.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionReport {
    pub support: Vec<f64>,
    pub predicted: Vec<f64>,
    pub prior: Vec<f64>,
    pub truth: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct DistributionRecord {
    value: f64,
    predicted: f64,
    prior: f64,
    truth: Option<f64>,
}

pub fn distribution_report(
    pred: &[f64],
    prior: &LabelPrior,
    truth: Option<&[f64]>,
    support: &[f64],
) -> Result<DistributionReport> {
    Ok(DistributionReport {
        support: support.to_vec(),
        predicted: histogram_on_support(pred, support),
        prior: prior.pmf_on_support(support)?,
        truth: truth.map(|t| histogram_on_support(t, support)),
    })
}

impl DistributionReport {
    /// Columns `value,predicted,prior,truth`; `truth` is empty when absent.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for (i, &value) in self.support.iter().enumerate() {
            out.serialize(DistributionRecord {
                value,
                predicted: self.predicted[i],
                prior: self.prior[i],
                truth: self.truth.as_ref().map(|t| t[i]),
            })?;
        }
        out.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut report = DistributionReport {
            support: Vec::new(),
            predicted: Vec::new(),
            prior: Vec::new(),
            truth: Some(Vec::new()),
        };
        let mut any_missing = false;
        for record in csv::Reader::from_reader(r).deserialize() {
            let rec: DistributionRecord = record?;
            report.support.push(rec.value);
            report.predicted.push(rec.predicted);
            report.prior.push(rec.prior);
            match rec.truth {
                Some(t) => report.truth.as_mut().expect("set above").push(t),
                None => any_missing = true,
            }
        }
        if any_missing {
            report.truth = None;
        }
        Ok(report)
    }
}

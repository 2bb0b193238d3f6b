//! The training loop.
//!
//! Each update draws batches from a seeded per-epoch shuffle (the final
//! partial batch is dropped) and minimizes `L_prior + alpha * L_labels`:
//!
//! - regression: batch Wasserstein between predictions and fresh prior
//!   samples, plus l1 to the zero-shot labels;
//! - classification: KL between the predicted class distribution pooled over
//!   `accumulate_batches` batches and the prior, plus the mean per-batch
//!   cross-entropy to the zero-shot classes.
//!
//! One Adam step is taken per group of `accumulate_batches` batches.

use std::time::Instant;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{adam_step, Adapter, AdamState, Gradients, Head, LrSchedule, DEFAULT_HIDDEN};
use crate::dataio::{CaptionSet, EmbeddingDataset};
use crate::error::{Error, Result};
use crate::losses::{self, LossValue};
use crate::priors::{histogram_on_support, LabelPrior};
use crate::zeroshot::{index_histogram, ZeroShotResult};
use crate::Task;

const SHUFFLE_STREAM: u64 = 1;
const PRIOR_STREAM: u64 = 2;
const PREDICT_CHUNK: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub task: Task,
    pub alpha: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub accumulate_batches: usize,
    pub warmup_epochs: usize,
    pub base_lr: f64,
    pub lr_decay: f64,
    pub lr_period: usize,
    pub weight_decay: f64,
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let schedule = LrSchedule::default();
        Self {
            task: Task::Regression,
            alpha: 1.0,
            epochs: 70,
            batch_size: 128,
            accumulate_batches: 1,
            warmup_epochs: 0,
            base_lr: schedule.base_lr,
            lr_decay: schedule.decay,
            lr_period: schedule.period,
            weight_decay: 1e-4,
            hidden: vec![DEFAULT_HIDDEN],
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn for_task(task: Task) -> Self {
        Self {
            task,
            ..Self::default()
        }
    }

    /// Recipe for datasets of a few thousand samples: the epoch count and lr
    /// period are stretched five-fold so each lr stage sees a comparable
    /// number of updates to the default recipe on a ~20k-sample dataset.
    /// Classification accumulates 4 batches per step.
    pub fn desk_scale(task: Task) -> Self {
        Self {
            epochs: 350,
            lr_period: 50,
            accumulate_batches: if task == Task::Classification { 4 } else { 1 },
            ..Self::for_task(task)
        }
    }

    /// Recipe for very large classification sets: 7 epochs with per-epoch
    /// decay, 40 batches per step and a 3-epoch labels-only warmup.
    pub fn large_scale(task: Task) -> Self {
        Self {
            epochs: 7,
            lr_period: 1,
            accumulate_batches: 40,
            warmup_epochs: 3,
            ..Self::for_task(task)
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base_lr: self.base_lr,
            decay: self.lr_decay,
            period: self.lr_period,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return fail(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if self.epochs == 0 {
            return fail("epochs must be positive".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if self.accumulate_batches == 0 {
            return fail("accumulate_batches must be >= 1".into());
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return fail(format!("base_lr must be > 0, got {}", self.base_lr));
        }
        if !(self.lr_decay.is_finite() && self.lr_decay > 0.0) {
            return fail(format!("lr_decay must be > 0, got {}", self.lr_decay));
        }
        if self.lr_period == 0 {
            return fail("lr_period must be positive".into());
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return fail(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.hidden.contains(&0) {
            return fail("hidden layer widths must be positive".into());
        }
        Ok(())
    }

    pub fn layer_dims(&self, input: usize, output: usize) -> Vec<usize> {
        let mut dims = vec![input];
        dims.extend(&self.hidden);
        dims.push(output);
        dims
    }
}

/// Mean losses over the updates of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub prior_loss: f64,
    pub labels_loss: f64,
    pub total_loss: f64,
    pub updates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub warmup: Vec<EpochStats>,
    pub epochs: Vec<EpochStats>,
    /// Train-set predictions: real labels, or caption values for classification.
    pub final_predictions: Vec<f64>,
    pub support: Vec<f64>,
    pub final_histogram: Vec<f64>,
    pub prior_pmf: Vec<f64>,
    /// Not serialized, so report files of identical runs are byte-identical.
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

/// Adapter predictions over a whole dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    /// Predicted label values (caption values for classification).
    pub values: Vec<f64>,
    /// Argmax caption index, classification only.
    pub indices: Option<Vec<usize>>,
}

pub fn predict(adapter: &Adapter, dataset: &EmbeddingDataset, captions: &CaptionSet) -> Result<Predictions> {
    let x = dataset.embeddings();
    let mut values = Vec::with_capacity(dataset.len());
    let mut indices = Vec::new();
    for start in (0..dataset.len()).step_by(PREDICT_CHUNK) {
        let end = (start + PREDICT_CHUNK).min(dataset.len());
        let out = adapter.predict(x.slice(s![start..end, ..]))?;
        match adapter.head() {
            Head::ScalarRegression => values.extend(out.column(0).iter().copied()),
            Head::SoftmaxClassification => {
                if out.ncols() != captions.len() {
                    return Err(Error::Shape(format!(
                        "adapter has {} classes, caption set has {}",
                        out.ncols(),
                        captions.len()
                    )));
                }
                for row in out.rows() {
                    let mut best = 0;
                    for (j, &p) in row.iter().enumerate() {
                        if p > row[best] {
                            best = j;
                        }
                    }
                    indices.push(best);
                    values.push(captions.values()[best]);
                }
            }
        }
    }
    Ok(Predictions {
        values,
        indices: (adapter.head() == Head::SoftmaxClassification).then_some(indices),
    })
}

struct Run<'a> {
    x: ArrayView2<'a, f64>,
    zs: &'a ZeroShotResult,
    prior: &'a LabelPrior,
    prior_pmf: Vec<f64>,
    config: &'a TrainConfig,
    shuffle_rng: ChaCha8Rng,
    prior_rng: ChaCha8Rng,
}

#[derive(Default)]
struct UpdateLoss {
    prior: f64,
    labels: f64,
}

impl<'a> Run<'a> {
    fn new(
        dataset: &'a EmbeddingDataset,
        captions: &'a CaptionSet,
        prior: &'a LabelPrior,
        zs: &'a ZeroShotResult,
        config: &'a TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        if dataset.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if captions.task() != config.task {
            return Err(Error::Config(format!(
                "config task is {} but captions are for {}",
                config.task,
                captions.task()
            )));
        }
        if dataset.dim() != captions.dim() {
            return Err(Error::Shape(format!(
                "dataset dimension {} vs caption dimension {}",
                dataset.dim(),
                captions.dim()
            )));
        }
        if zs.len() != dataset.len() {
            return Err(Error::Shape(format!(
                "{} zero-shot labels for {} samples",
                zs.len(),
                dataset.len()
            )));
        }
        if dataset.len() < config.batch_size {
            return Err(Error::Config(format!(
                "dataset has {} samples, fewer than one batch of {}",
                dataset.len(),
                config.batch_size
            )));
        }
        let prior_pmf = prior.pmf_on_support(captions.values())?;
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
        shuffle_rng.set_stream(SHUFFLE_STREAM);
        let mut prior_rng = ChaCha8Rng::seed_from_u64(config.seed);
        prior_rng.set_stream(PRIOR_STREAM);
        Ok(Self {
            x: dataset.embeddings(),
            zs,
            prior,
            prior_pmf,
            config,
            shuffle_rng,
            prior_rng,
        })
    }

    fn initial_adapter(&self, outputs: usize) -> Result<Adapter> {
        let head = match self.config.task {
            Task::Regression => Head::ScalarRegression,
            Task::Classification => Head::SoftmaxClassification,
        };
        let dims = self.config.layer_dims(self.x.ncols(), outputs);
        Adapter::init_for_prior(&dims, head, self.config.seed, self.prior)
    }

    /// Runs `epochs` epochs; `prior_weight` is 0 during warmup.
    fn run_epochs(&mut self, adapter: &mut Adapter, epochs: usize, prior_weight: f64, phase: &str) -> Result<Vec<EpochStats>> {
        let schedule = self.config.schedule();
        let mut state = AdamState::new(adapter, schedule.base_lr, self.config.weight_decay);
        let n = self.x.nrows();
        let b = self.config.batch_size;
        let k = self.config.accumulate_batches;
        let mut order: Vec<usize> = (0..n).collect();
        let mut stats = Vec::with_capacity(epochs);
        for epoch in 0..epochs {
            state.lr = schedule.lr_at(epoch);
            order.shuffle(&mut self.shuffle_rng);
            let batches: Vec<&[usize]> = order.chunks_exact(b).collect();
            let (mut prior_sum, mut labels_sum, mut updates) = (0.0, 0.0, 0usize);
            for (group_index, group) in batches.chunks(k).enumerate() {
                let (loss, grads) = match self.config.task {
                    Task::Regression => self.regression_update(adapter, group, prior_weight)?,
                    Task::Classification => self.classification_update(adapter, group, prior_weight)?,
                };
                let total = prior_weight * loss.prior + self.config.alpha * loss.labels;
                if !total.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite loss in {phase} epoch {epoch}, update {group_index}"
                    )));
                }
                adam_step(adapter, &mut state, &grads).map_err(|e| match e {
                    Error::Numerical(msg) => {
                        Error::Numerical(format!("{phase} epoch {epoch}, update {group_index}: {msg}"))
                    }
                    other => other,
                })?;
                prior_sum += loss.prior;
                labels_sum += loss.labels;
                updates += 1;
            }
            let u = updates.max(1) as f64;
            stats.push(EpochStats {
                epoch,
                lr: state.lr,
                prior_loss: prior_sum / u,
                labels_loss: labels_sum / u,
                total_loss: (prior_weight * prior_sum + self.config.alpha * labels_sum) / u,
                updates,
            });
        }
        Ok(stats)
    }

    fn regression_update(&mut self, adapter: &Adapter, group: &[&[usize]], prior_weight: f64) -> Result<(UpdateLoss, Gradients)> {
        let scale = 1.0 / group.len() as f64;
        let mut grads = Gradients::zeros_like(adapter);
        let mut loss = UpdateLoss::default();
        for batch in group {
            let inputs = self.x.select(Axis(0), batch);
            let cache = adapter.forward(inputs.view())?;
            let pred: Vec<f64> = cache.output().column(0).to_vec();
            let hard: Vec<f64> = batch.iter().map(|&i| self.zs.hard_labels[i]).collect();
            let labels = losses::l1_labels(&pred, &hard)?;
            let prior_term = if prior_weight > 0.0 {
                let samples = self.prior.sample(batch.len(), &mut self.prior_rng);
                let w = losses::wasserstein_1d(&pred, &samples)?;
                LossValue {
                    value: w.value,
                    grad: w.grad.iter().map(|g| g * prior_weight).collect(),
                }
            } else {
                LossValue::zeros(pred.len())
            };
            let total = losses::combined(&prior_term, &labels, self.config.alpha)?;
            let grad_out = Array2::from_shape_vec((pred.len(), 1), total.grad.iter().map(|g| g * scale).collect())
                .expect("one gradient per prediction");
            grads.accumulate(&adapter.backward(&cache, grad_out.view())?)?;
            loss.prior += prior_term.value * scale;
            loss.labels += labels.value * scale;
        }
        Ok((loss, grads))
    }

    fn classification_update(&mut self, adapter: &Adapter, group: &[&[usize]], prior_weight: f64) -> Result<(UpdateLoss, Gradients)> {
        let k = group.len() as f64;
        let m = adapter.output_dim();
        let mut caches = Vec::with_capacity(group.len());
        let mut pool = PooledDistribution::new(m);
        for batch in group {
            let inputs = self.x.select(Axis(0), batch);
            let cache = adapter.forward(inputs.view())?;
            pool.add(cache.output());
            caches.push(cache);
        }
        let pooled = pool.finish();
        let (kl_value, kl_grad) = if prior_weight > 0.0 {
            losses::kl_pooled(&pooled, &self.prior_pmf)
        } else {
            (0.0, vec![0.0; m])
        };
        let row_scale = prior_weight / pool.rows() as f64;

        let mut grads = Gradients::zeros_like(adapter);
        let mut labels_value = 0.0;
        for (batch, cache) in group.iter().zip(&caches) {
            let targets: Vec<usize> = batch.iter().map(|&i| self.zs.assigned_index[i]).collect();
            let ce = losses::cross_entropy_labels(cache.output(), &targets)?;
            labels_value += ce.value / k;
            let mut grad_out = Array2::from_shape_vec((batch.len(), m), ce.grad)
                .expect("one gradient per probability");
            grad_out.mapv_inplace(|g| g * self.config.alpha / k);
            for mut row in grad_out.rows_mut() {
                row.iter_mut().zip(&kl_grad).for_each(|(g, d)| *g += d * row_scale);
            }
            grads.accumulate(&adapter.backward(cache, grad_out.view())?)?;
        }
        Ok((
            UpdateLoss {
                prior: kl_value,
                labels: labels_value,
            },
            grads,
        ))
    }
}

/// Running column sums of probability rows across batches.
#[derive(Debug, Clone)]
pub struct PooledDistribution {
    sums: Vec<f64>,
    rows: usize,
}

impl PooledDistribution {
    pub fn new(classes: usize) -> Self {
        Self {
            sums: vec![0.0; classes],
            rows: 0,
        }
    }

    pub fn add(&mut self, probs: ArrayView2<'_, f64>) {
        for row in probs.rows() {
            self.sums.iter_mut().zip(row.iter()).for_each(|(s, p)| *s += p);
        }
        self.rows += probs.nrows();
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn finish(&self) -> Vec<f64> {
        let n = self.rows.max(1) as f64;
        self.sums.iter().map(|s| s / n).collect()
    }
}

/// Trains an adapter with the labels term only, from zero-shot targets.
///
/// Returns a freshly initialized adapter when `warmup_epochs` is 0.
pub fn warmup_init(
    dataset: &EmbeddingDataset,
    captions: &CaptionSet,
    prior: &LabelPrior,
    zs: &ZeroShotResult,
    config: &TrainConfig,
) -> Result<Adapter> {
    let mut run = Run::new(dataset, captions, prior, zs, config)?;
    let mut adapter = run.initial_adapter(output_dim(captions, config.task))?;
    run.run_epochs(&mut adapter, config.warmup_epochs, 0.0, "warmup")?;
    Ok(adapter)
}

fn output_dim(captions: &CaptionSet, task: Task) -> usize {
    match task {
        Task::Regression => 1,
        Task::Classification => captions.len(),
    }
}

/// Trains an adapter, running the labels-only warmup first when configured.
pub fn train(
    dataset: &EmbeddingDataset,
    captions: &CaptionSet,
    prior: &LabelPrior,
    zs: &ZeroShotResult,
    config: &TrainConfig,
) -> Result<(Adapter, TrainReport)> {
    let started = Instant::now();
    let mut run = Run::new(dataset, captions, prior, zs, config)?;
    let mut adapter = run.initial_adapter(output_dim(captions, config.task))?;
    let warmup = run.run_epochs(&mut adapter, config.warmup_epochs, 0.0, "warmup")?;
    let epochs = run.run_epochs(&mut adapter, config.epochs, 1.0, "train")?;

    let predictions = predict(&adapter, dataset, captions)?;
    let final_histogram = match &predictions.indices {
        Some(indices) => index_histogram(indices, captions.len())?,
        None => histogram_on_support(&predictions.values, captions.values()),
    };
    let report = TrainReport {
        config: config.clone(),
        warmup,
        epochs,
        final_predictions: predictions.values,
        support: captions.values().to_vec(),
        final_histogram,
        prior_pmf: run.prior_pmf,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    Ok((adapter, report))
}

/// Checks that accumulating `L_labels` over equal-size batches reproduces
/// the concatenated-batch gradient (within 1e-9) and that the pooled class
/// distribution matches the concatenated batch-mean (within 1e-12).
///
/// Each batch is `(embeddings, zero-shot class indices)`.
pub fn pooled_gradient_equivalence_check(adapter: &Adapter, batches: &[(Array2<f64>, Vec<usize>)]) -> Result<bool> {
    let first = batches
        .first()
        .ok_or_else(|| Error::Config("need at least one batch".into()))?;
    if batches.iter().any(|(x, t)| x.nrows() != first.0.nrows() || t.len() != x.nrows()) {
        return Err(Error::Config("batches must all have the same size".into()));
    }
    if adapter.head() != Head::SoftmaxClassification {
        return Err(Error::Config("pooled check needs a classification adapter".into()));
    }
    let k = batches.len() as f64;
    let m = adapter.output_dim();

    let mut accumulated = Gradients::zeros_like(adapter);
    let mut pool = PooledDistribution::new(m);
    for (x, targets) in batches {
        let cache = adapter.forward(x.view())?;
        pool.add(cache.output());
        let ce = losses::cross_entropy_labels(cache.output(), targets)?;
        let grad_out = Array2::from_shape_vec((x.nrows(), m), ce.grad.iter().map(|g| g / k).collect())
            .expect("one gradient per probability");
        accumulated.accumulate(&adapter.backward(&cache, grad_out.view())?)?;
    }

    let views: Vec<_> = batches.iter().map(|(x, _)| x.view()).collect();
    let all = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
    let targets: Vec<usize> = batches.iter().flat_map(|(_, t)| t.iter().copied()).collect();
    let cache = adapter.forward(all.view())?;
    let ce = losses::cross_entropy_labels(cache.output(), &targets)?;
    let grad_out = Array2::from_shape_vec((all.nrows(), m), ce.grad).expect("one gradient per probability");
    let direct = adapter.backward(&cache, grad_out.view())?;

    let grads_match = accumulated
        .flatten()
        .iter()
        .zip(direct.flatten())
        .all(|(a, b)| (a - b).abs() <= 1e-9);
    let pooled_match = pool
        .finish()
        .iter()
        .zip(losses::pooled_distribution(cache.output()))
        .all(|(a, b)| (a - b).abs() <= 1e-12);
    Ok(grads_match && pooled_match)
}

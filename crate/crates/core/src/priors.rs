//! Label-distribution priors.
//!
//! A prior is either a (optionally clamped) Gaussian over real label values
//! or a categorical distribution over an explicit, strictly increasing
//! support. Priors are validated once at construction; sampling and queries
//! never fail on parameter grounds afterwards.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

const SUM_TOLERANCE: f64 = 1e-9;
const SUPPORT_MATCH_TOLERANCE: f64 = 1e-9;

/// A prior over label values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PriorFile", into = "PriorFile")]
pub enum LabelPrior {
    Gaussian(GaussianPrior),
    Categorical(CategoricalPrior),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianPrior {
    mu: f64,
    sigma: f64,
    clamp: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalPrior {
    support: Vec<f64>,
    probs: Vec<f64>,
}

impl GaussianPrior {
    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn clamp(&self) -> Option<(f64, f64)> {
        self.clamp
    }

    fn cdf(&self, t: f64) -> f64 {
        0.5 * erfc(-(t - self.mu) / (self.sigma * std::f64::consts::SQRT_2))
    }

    /// `P(Y < t)` for the clamped variable.
    fn prob_below(&self, t: f64) -> f64 {
        match self.clamp {
            Some((lo, _)) if t <= lo => 0.0,
            Some((_, hi)) if t > hi => 1.0,
            _ => self.cdf(t),
        }
    }
}

impl CategoricalPrior {
    pub fn support(&self) -> &[f64] {
        &self.support
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

impl LabelPrior {
    pub fn gaussian(mu: f64, sigma: f64, clamp: Option<(f64, f64)>) -> Result<Self> {
        if !mu.is_finite() {
            return Err(Error::Config(format!("gaussian mu must be finite, got {mu}")));
        }
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::Config(format!("gaussian sigma must be > 0, got {sigma}")));
        }
        if let Some((lo, hi)) = clamp {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::Config(format!(
                    "clamp bounds must satisfy lo < hi, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(LabelPrior::Gaussian(GaussianPrior { mu, sigma, clamp }))
    }

    pub fn categorical(support: Vec<f64>, probs: Vec<f64>) -> Result<Self> {
        if support.is_empty() {
            return Err(Error::Config("categorical support is empty".into()));
        }
        if support.len() != probs.len() {
            return Err(Error::Config(format!(
                "categorical support has {} values but probs has {}",
                support.len(),
                probs.len()
            )));
        }
        if support.iter().any(|s| !s.is_finite()) {
            return Err(Error::Config("categorical support must be finite".into()));
        }
        check_strictly_increasing(&support)
            .map_err(|i| Error::Config(format!("categorical support not strictly increasing at index {i}")))?;
        if probs.iter().any(|p| !(p.is_finite() && (0.0..=1.0).contains(p))) {
            return Err(Error::Config("categorical probs must lie in [0, 1]".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::Config(format!("categorical probs sum to {total}, expected 1")));
        }
        Ok(LabelPrior::Categorical(CategoricalPrior { support, probs }))
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Mean of the unclamped distribution (`mu` for a Gaussian).
    pub fn mean(&self) -> f64 {
        match self {
            LabelPrior::Gaussian(g) => g.mu,
            LabelPrior::Categorical(c) => c.support.iter().zip(&c.probs).map(|(s, p)| s * p).sum(),
        }
    }

    /// Draws `count` i.i.d. labels. Gaussian draws are clamped when bounds are set.
    pub fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Vec<f64> {
        match self {
            LabelPrior::Gaussian(g) => {
                let normal = Normal::new(g.mu, g.sigma).expect("validated at construction");
                (0..count)
                    .map(|_| {
                        let y = normal.sample(rng);
                        match g.clamp {
                            Some((lo, hi)) => y.clamp(lo, hi),
                            None => y,
                        }
                    })
                    .collect()
            }
            LabelPrior::Categorical(c) => {
                // Inverse-CDF on the cumulative table; the last entry absorbs rounding.
                let mut cumulative = Vec::with_capacity(c.probs.len());
                let mut acc = 0.0;
                for p in &c.probs {
                    acc += p;
                    cumulative.push(acc);
                }
                let last = c.support.len() - 1;
                (0..count)
                    .map(|_| {
                        let u: f64 = rng.random::<f64>() * acc;
                        let idx = cumulative.partition_point(|&c| c <= u).min(last);
                        c.support[idx]
                    })
                    .collect()
            }
        }
    }

    /// Discretizes the prior onto `support`.
    ///
    /// Bins are half-open, split at midpoints between consecutive support
    /// values; the outermost bins extend to infinity. A categorical prior
    /// only accepts its own support.
    pub fn pmf_on_support(&self, support: &[f64]) -> Result<Vec<f64>> {
        if support.is_empty() {
            return Err(Error::Config("support is empty".into()));
        }
        check_strictly_increasing(support)
            .map_err(|i| Error::Config(format!("support not strictly increasing at index {i}")))?;
        match self {
            LabelPrior::Categorical(c) => {
                let matches = c.support.len() == support.len()
                    && c.support
                        .iter()
                        .zip(support)
                        .all(|(a, b)| (a - b).abs() <= SUPPORT_MATCH_TOLERANCE);
                if !matches {
                    return Err(Error::Config(
                        "support does not match the categorical prior's support".into(),
                    ));
                }
                Ok(c.probs.clone())
            }
            LabelPrior::Gaussian(g) => {
                let edges = bin_edges(support);
                let mut pmf = Vec::with_capacity(support.len());
                let mut below = 0.0;
                for edge in edges.iter().copied() {
                    let next = g.prob_below(edge);
                    pmf.push((next - below).max(0.0));
                    below = next;
                }
                pmf.push((1.0 - below).max(0.0));
                let total: f64 = pmf.iter().sum();
                if total <= 0.0 {
                    return Err(Error::Numerical("prior has no mass on support".into()));
                }
                pmf.iter_mut().for_each(|p| *p /= total);
                Ok(pmf)
            }
        }
    }
}

/// Midpoints between consecutive support values.
pub fn bin_edges(support: &[f64]) -> Vec<f64> {
    support.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
}

/// Index of the half-open midpoint bin of `support` that contains `value`.
pub fn bin_index(edges: &[f64], value: f64) -> usize {
    edges.partition_point(|&e| e <= value)
}

/// Normalized histogram of `values` over the midpoint bins of `support`.
pub fn histogram_on_support(values: &[f64], support: &[f64]) -> Vec<f64> {
    let edges = bin_edges(support);
    let mut counts = vec![0.0; support.len()];
    for &v in values {
        counts[bin_index(&edges, v)] += 1.0;
    }
    if !values.is_empty() {
        let n = values.len() as f64;
        counts.iter_mut().for_each(|c| *c /= n);
    }
    counts
}

fn check_strictly_increasing(values: &[f64]) -> std::result::Result<(), usize> {
    match values.windows(2).position(|w| w[0].partial_cmp(&w[1]) != Some(std::cmp::Ordering::Less)) {
        Some(i) => Err(i + 1),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
enum PriorFile {
    Gaussian {
        mu: f64,
        sigma: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        clamp: Option<[f64; 2]>,
    },
    Categorical {
        support: Vec<f64>,
        probs: Vec<f64>,
    },
}

impl TryFrom<PriorFile> for LabelPrior {
    type Error = Error;

    fn try_from(raw: PriorFile) -> Result<Self> {
        match raw {
            PriorFile::Gaussian { mu, sigma, clamp } => {
                LabelPrior::gaussian(mu, sigma, clamp.map(|[lo, hi]| (lo, hi)))
            }
            PriorFile::Categorical { support, probs } => LabelPrior::categorical(support, probs),
        }
    }
}

impl From<LabelPrior> for PriorFile {
    fn from(prior: LabelPrior) -> Self {
        match prior {
            LabelPrior::Gaussian(g) => PriorFile::Gaussian {
                mu: g.mu,
                sigma: g.sigma,
                clamp: g.clamp.map(|(lo, hi)| [lo, hi]),
            },
            LabelPrior::Categorical(c) => PriorFile::Categorical {
                support: c.support,
                probs: c.probs,
            },
        }
    }
}

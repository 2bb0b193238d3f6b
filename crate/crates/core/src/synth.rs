//! Synthetic fixtures with known ground truth and biased zero-shot labels.
//!
//! Bias is injected through caption geometry only, so fixtures exercise the
//! real [`zeroshot::assign`](crate::zeroshot::assign) path.
//!
//! Regression: the ground truth is `y = t + e` with `e ~ N(0, label_noise^2)`
//! and `y` drawn from the prior, and the embedding encodes `t` as an angle in
//! a hidden 2-D plane (the two rows of `w`), `theta(t)` linear in `t`. Image
//! embeddings are `cos theta(t) w1 + sin theta(t) w2 + nuisance`. The caption
//! for grid value `v` points at `theta(v - b)`, so nearest-caption assignment
//! returns labels shifted by `b`. Captions also carry a random nuisance
//! component whose scale is calibrated so the zero-shot error around `t + b`
//! has standard deviation `zs_noise` (on top of grid quantization). This
//! error depends on the image nuisance through a different random direction
//! per caption, which makes it hard for a small adapter to reproduce.
//!
//! Classification: class centers are orthonormal. With uniform corruption
//! captions sit on the centers and the cluster spread is calibrated to the
//! requested error rate, spreading errors evenly over the other classes.
//! Every image also carries a random amount `a in [0, 2)` of a shared bias
//! direction `u` orthogonal to all centers. With sink corruption the spread
//! is fixed and the sink captions are tilted toward `u`, so images with a
//! large bias component are pulled into the sinks.

use std::path::Path;

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataio::{CaptionSet, EmbeddingDataset};
use crate::error::{Error, Result};
use crate::priors::LabelPrior;
use crate::zeroshot;
use crate::Task;

const BISECTION_STEPS: usize = 60;
const ANGLE_SPAN: f64 = std::f64::consts::FRAC_PI_2;

const GEOMETRY_STREAM: u64 = 10;
const LABEL_STREAM: u64 = 11;
const NUISANCE_STREAM: u64 = 12;
const CAPTION_STREAM: u64 = 13;
const LABEL_NOISE_STREAM: u64 = 14;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n: usize,
    pub d: usize,
    pub seed: u64,
    pub rule: SynthRule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "lowercase")]
pub enum SynthRule {
    Regression(RegressionRule),
    Classification(ClassificationRule),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegressionRule {
    /// Caption grid `lo, lo + step, ..., hi`; ground truth is clamped to it.
    pub label_range: [f64; 2],
    pub grid_step: f64,
    /// True label distribution (clamped Gaussian).
    pub prior_mu: f64,
    pub prior_sigma: f64,
    /// Zero-shot shift `b` in label units.
    pub bias: f64,
    /// Ground-truth noise not explained by the embedding, label units.
    pub label_noise: f64,
    /// Standard deviation of the zero-shot error around the shift, label units.
    pub zs_noise: f64,
}

impl Default for RegressionRule {
    fn default() -> Self {
        Self {
            label_range: [1.0, 100.0],
            grid_step: 1.0,
            prior_mu: 33.0,
            prior_sigma: 20.0,
            bias: 10.0,
            label_noise: 2.0,
            zs_noise: 8.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassificationRule {
    pub classes: usize,
    /// Class frequencies; uniform when absent.
    pub class_probs: Option<Vec<f64>>,
    pub corruption: Corruption,
}

impl Default for ClassificationRule {
    fn default() -> Self {
        Self {
            classes: 10,
            class_probs: None,
            corruption: Corruption::Uniform { rate: 0.2 },
        }
    }
}

/// How zero-shot errors are distributed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Corruption {
    /// `rate` of samples land in a uniformly random other class.
    Uniform { rate: f64 },
    /// `rate` of samples are absorbed by the `sinks`; `spread` is the
    /// cluster noise scale.
    Sink {
        rate: f64,
        sinks: Vec<usize>,
        #[serde(default = "default_sink_spread")]
        spread: f64,
    },
}

fn default_sink_spread() -> f64 {
    0.3
}

impl SynthSpec {
    /// The default desk-scale regression fixture.
    pub fn regression_default() -> Self {
        Self {
            n: 2000,
            d: 16,
            seed: 0,
            rule: SynthRule::Regression(RegressionRule::default()),
        }
    }

    /// A 10-class fixture with the given corruption.
    pub fn classification(corruption: Corruption) -> Self {
        Self {
            n: 2000,
            d: 16,
            seed: 0,
            rule: SynthRule::Classification(ClassificationRule {
                corruption,
                ..ClassificationRule::default()
            }),
        }
    }

    pub fn task(&self) -> Task {
        match self.rule {
            SynthRule::Regression(_) => Task::Regression,
            SynthRule::Classification(_) => Task::Classification,
        }
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d == 0 {
            return Err(Error::Config("n and d must be positive".into()));
        }
        match &self.rule {
            SynthRule::Regression(r) => {
                let [lo, hi] = r.label_range;
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return Err(Error::Config(format!("invalid label range [{lo}, {hi}]")));
                }
                if !(r.grid_step.is_finite() && r.grid_step > 0.0) || (hi - lo) / r.grid_step > 1e6 {
                    return Err(Error::Config(format!("invalid grid step {}", r.grid_step)));
                }
                if !(r.prior_sigma.is_finite() && r.prior_sigma > 0.0) || !r.prior_mu.is_finite() {
                    return Err(Error::Config("invalid prior parameters".into()));
                }
                for (name, v) in [("label_noise", r.label_noise), ("zs_noise", r.zs_noise)] {
                    if !(v.is_finite() && v >= 0.0) {
                        return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
                    }
                }
                if !r.bias.is_finite() || r.bias.abs() >= hi - lo {
                    return Err(Error::Config(format!(
                        "bias {} pushes every label outside the caption range [{lo}, {hi}]",
                        r.bias
                    )));
                }
                if self.d < 2 || (self.d == 2 && r.zs_noise > 0.0) {
                    return Err(Error::Config("regression fixtures need d >= 2 (d >= 3 with noise)".into()));
                }
            }
            SynthRule::Classification(c) => {
                if c.classes < 2 || c.classes >= self.d {
                    return Err(Error::Config(format!(
                        "need 2 <= classes < d, got {} classes in dimension {}",
                        c.classes, self.d
                    )));
                }
                if let Some(p) = &c.class_probs {
                    LabelPrior::categorical((0..c.classes).map(|i| i as f64).collect(), p.clone())?;
                }
                let rate = match &c.corruption {
                    Corruption::Uniform { rate } => *rate,
                    Corruption::Sink { rate, sinks, spread } => {
                        if sinks.is_empty() || sinks.len() >= c.classes || sinks.iter().any(|&s| s >= c.classes) {
                            return Err(Error::Config(format!("invalid sink classes {sinks:?}")));
                        }
                        if !(spread.is_finite() && *spread >= 0.0) {
                            return Err(Error::Config(format!("invalid spread {spread}")));
                        }
                        *rate
                    }
                };
                if !(0.0..0.9).contains(&rate) {
                    return Err(Error::Config(format!("corruption rate must be in [0, 0.9), got {rate}")));
                }
            }
        }
        Ok(())
    }
}

/// A generated fixture. `dataset` carries ground-truth labels.
#[derive(Debug, Clone)]
pub struct SynthFixture {
    pub dataset: EmbeddingDataset,
    pub captions: CaptionSet,
    pub prior: LabelPrior,
    /// The calibrated geometry parameter (caption nuisance weight, cluster
    /// spread or sink pull, depending on the rule).
    pub calibrated: f64,
}

pub fn generate(spec: &SynthSpec) -> Result<SynthFixture> {
    spec.validate()?;
    match &spec.rule {
        SynthRule::Regression(rule) => {
            let geometry = RegressionGeometry::new(spec, rule);
            let (captions, kappa) = geometry.calibrated_captions(rule.bias, rule.zs_noise)?;
            Ok(SynthFixture {
                dataset: geometry.dataset()?,
                captions,
                prior: geometry.prior()?,
                calibrated: kappa,
            })
        }
        SynthRule::Classification(rule) => generate_classification(spec, rule),
    }
}

/// Caption set for the fixture's images with a different zero-shot shift.
///
/// Used to build families of prompts of known quality over one dataset.
pub fn regression_captions_with_bias(spec: &SynthSpec, bias: f64) -> Result<CaptionSet> {
    let rule = match &spec.rule {
        SynthRule::Regression(r) => r,
        SynthRule::Classification(_) => return Err(Error::Config("not a regression spec".into())),
    };
    let mut shifted = spec.clone();
    shifted.rule = SynthRule::Regression(RegressionRule { bias, ..rule.clone() });
    shifted.validate()?;
    let geometry = RegressionGeometry::new(spec, rule);
    Ok(geometry.calibrated_captions(bias, rule.zs_noise)?.0)
}

/// Reads a small dataset from CSV with a header row. Columns named `label`
/// and `id` are taken as ground truth and identifiers; every other column is
/// an embedding dimension, in file order.
pub fn import_csv(path: impl AsRef<Path>) -> Result<EmbeddingDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file)
}

pub fn read_csv<R: std::io::Read>(reader: R) -> Result<EmbeddingDataset> {
    let mut csv = csv::Reader::from_reader(reader);
    let headers = csv.headers()?.clone();
    let label_col = headers.iter().position(|h| h == "label");
    let id_col = headers.iter().position(|h| h == "id");
    let dims: Vec<usize> = (0..headers.len())
        .filter(|&i| Some(i) != label_col && Some(i) != id_col)
        .collect();
    if dims.is_empty() {
        return Err(Error::InvalidData("CSV has no embedding columns".into()));
    }
    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut ids = Vec::new();
    for (row, record) in csv.records().enumerate() {
        let record = record?;
        let number = |col: usize| -> Result<f64> {
            record[col].trim().parse::<f64>().map_err(|_| {
                Error::InvalidData(format!("row {row}, column {:?}: not a number: {:?}", &headers[col], &record[col]))
            })
        };
        for &c in &dims {
            values.push(number(c)? as f32);
        }
        if let Some(c) = label_col {
            labels.push(number(c)?);
        }
        if let Some(c) = id_col {
            ids.push(record[c].to_string());
        }
    }
    let n = values.len() / dims.len();
    let raw = Array2::from_shape_vec((n, dims.len()), values).map_err(|e| Error::Shape(e.to_string()))?;
    EmbeddingDataset::new(raw, label_col.map(|_| labels), id_col.map(|_| ids))
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

/// Random orthonormal basis of R^d (rows), by Gram-Schmidt.
fn random_rotation(d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    loop {
        let mut q = gaussian_matrix(d, d, rng);
        let mut ok = true;
        for i in 0..d {
            for j in 0..i {
                let proj = q.row(i).dot(&q.row(j));
                let prev = q.row(j).to_owned();
                q.row_mut(i).scaled_add(-proj, &prev);
            }
            let norm = q.row(i).dot(&q.row(i)).sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            q.row_mut(i).mapv_inplace(|v| v / norm);
        }
        if ok {
            return q;
        }
    }
}

fn to_f32(m: &Array2<f64>) -> Array2<f32> {
    m.mapv(|v| v as f32)
}

struct RegressionGeometry {
    rule: RegressionRule,
    rotation: Array2<f64>,
    labels: Vec<f64>,
    latent: Vec<f64>,
    nuisance: Array2<f64>,
    caption_nuisance: Array2<f64>,
    grid: Vec<f64>,
}

impl RegressionGeometry {
    fn new(spec: &SynthSpec, rule: &RegressionRule) -> Self {
        let d = spec.d;
        let rotation = random_rotation(d, &mut rng(spec.seed, GEOMETRY_STREAM));
        let prior = LabelPrior::gaussian(rule.prior_mu, rule.prior_sigma, Some((rule.label_range[0], rule.label_range[1])))
            .expect("validated");
        let labels = prior.sample(spec.n, &mut rng(spec.seed, LABEL_STREAM));
        let mut noise_rng = rng(spec.seed, LABEL_NOISE_STREAM);
        let latent = labels
            .iter()
            .map(|y| {
                let e: f64 = StandardNormal.sample(&mut noise_rng);
                y - rule.label_noise * e
            })
            .collect();

        // Nuisance directions: per-image Gaussian, per-caption unit vectors.
        let extra = d - 2;
        let nuisance = if extra > 0 {
            gaussian_matrix(spec.n, extra, &mut rng(spec.seed, NUISANCE_STREAM)).mapv(|v| v / (extra as f64).sqrt())
        } else {
            Array2::zeros((spec.n, 0))
        };
        let [lo, hi] = rule.label_range;
        let steps = ((hi - lo) / rule.grid_step + 1e-9).floor() as usize;
        let grid: Vec<f64> = (0..=steps).map(|i| lo + i as f64 * rule.grid_step).collect();
        let mut caption_nuisance = gaussian_matrix(grid.len(), extra, &mut rng(spec.seed, CAPTION_STREAM));
        for mut row in caption_nuisance.rows_mut() {
            let norm = row.dot(&row).sqrt();
            if norm > 0.0 {
                row.mapv_inplace(|v| v / norm);
            }
        }
        Self {
            rule: rule.clone(),
            rotation,
            labels,
            latent,
            nuisance,
            caption_nuisance,
            grid,
        }
    }

    fn angle(&self, y: f64) -> f64 {
        let [lo, hi] = self.rule.label_range;
        ANGLE_SPAN * ((y - lo) / (hi - lo) - 0.5)
    }

    fn prior(&self) -> Result<LabelPrior> {
        LabelPrior::gaussian(self.rule.prior_mu, self.rule.prior_sigma, Some((self.rule.label_range[0], self.rule.label_range[1])))
    }

    /// Rows in the latent frame: `[cos, sin, nuisance...]`.
    fn latent_images(&self) -> Array2<f64> {
        let n = self.latent.len();
        let d = self.rotation.nrows();
        let mut x = Array2::zeros((n, d));
        for (i, &y) in self.latent.iter().enumerate() {
            let t = self.angle(y);
            x[[i, 0]] = t.cos();
            x[[i, 1]] = t.sin();
        }
        x.slice_mut(s![.., 2..]).assign(&self.nuisance);
        x
    }

    fn latent_captions(&self, bias: f64, kappa: f64) -> Array2<f64> {
        let d = self.rotation.nrows();
        let mut c = Array2::zeros((self.grid.len(), d));
        for (j, &v) in self.grid.iter().enumerate() {
            let t = self.angle(v - bias);
            c[[j, 0]] = t.cos();
            c[[j, 1]] = t.sin();
        }
        c.slice_mut(s![.., 2..]).assign(&self.caption_nuisance.mapv(|v| v * kappa));
        c
    }

    fn dataset(&self) -> Result<EmbeddingDataset> {
        let x = self.latent_images().dot(&self.rotation);
        EmbeddingDataset::new(to_f32(&x), Some(self.labels.clone()), None)
    }

    fn captions(&self, bias: f64, kappa: f64) -> Result<CaptionSet> {
        let c = self.latent_captions(bias, kappa).dot(&self.rotation);
        let names = self.grid.iter().map(|v| format!("{v}")).collect();
        CaptionSet::new(to_f32(&c).view(), self.grid.clone(), names, Task::Regression)
    }

    /// Standard deviation of `hard - (t + bias)` over samples whose shifted
    /// latent value stays inside the grid.
    fn zero_shot_spread(&self, dataset: &EmbeddingDataset, captions: &CaptionSet, bias: f64) -> Result<f64> {
        let zs = zeroshot::assign(dataset, captions)?;
        let [lo, hi] = self.rule.label_range;
        let errs: Vec<f64> = self
            .latent
            .iter()
            .zip(&zs.hard_labels)
            .filter(|(y, _)| (lo..=hi).contains(&(**y + bias)))
            .map(|(y, h)| h - (y + bias))
            .collect();
        if errs.is_empty() {
            return Ok(0.0);
        }
        let mean = errs.iter().sum::<f64>() / errs.len() as f64;
        Ok((errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / errs.len() as f64).sqrt())
    }

    fn calibrated_captions(&self, bias: f64, noise: f64) -> Result<(CaptionSet, f64)> {
        if noise == 0.0 {
            return Ok((self.captions(bias, 0.0)?, 0.0));
        }
        let dataset = self.dataset()?;
        let quantization = self.rule.grid_step / 12f64.sqrt();
        let target = (noise * noise + quantization * quantization).sqrt();
        let spread = |kappa: f64| -> Result<f64> { self.zero_shot_spread(&dataset, &self.captions(bias, kappa)?, bias) };
        let mut hi = 1e-3;
        while spread(hi)? < target {
            hi *= 2.0;
            if hi > 1e3 {
                return Err(Error::Config(format!("cannot reach zero-shot noise {noise}")));
            }
        }
        let mut lo = 0.0;
        for _ in 0..BISECTION_STEPS {
            let mid = 0.5 * (lo + hi);
            if spread(mid)? < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok((self.captions(bias, hi)?, hi))
    }
}

fn generate_classification(spec: &SynthSpec, rule: &ClassificationRule) -> Result<SynthFixture> {
    let (n, d, k) = (spec.n, spec.d, rule.classes);
    let rotation = random_rotation(d, &mut rng(spec.seed, GEOMETRY_STREAM));
    let probs = rule.class_probs.clone().unwrap_or_else(|| vec![1.0 / k as f64; k]);
    let support: Vec<f64> = (0..k).map(|i| i as f64).collect();
    let prior = LabelPrior::categorical(support.clone(), probs)?;
    let labels: Vec<usize> = prior
        .sample(n, &mut rng(spec.seed, LABEL_STREAM))
        .into_iter()
        .map(|v| v as usize)
        .collect();
    let mut nuisance_rng = rng(spec.seed, NUISANCE_STREAM);
    let noise = gaussian_matrix(n, d, &mut nuisance_rng).mapv(|v| v / (d as f64).sqrt());
    let bias_amount: Vec<f64> = (0..n).map(|_| 2.0 * nuisance_rng.random::<f64>()).collect();
    let bias_dim = k;

    let images = |spread: f64| -> Array2<f64> {
        let mut x = noise.mapv(|v| v * spread);
        for (i, &y) in labels.iter().enumerate() {
            x[[i, y]] += 1.0;
            x[[i, bias_dim]] += bias_amount[i];
        }
        x
    };
    let captions = |pull: f64, sinks: &[usize]| -> Array2<f64> {
        let mut c = Array2::<f64>::eye(d).slice(s![..k, ..]).to_owned();
        for &s in sinks {
            c[[s, bias_dim]] = pull;
        }
        c
    };
    let names: Vec<String> = (0..k).map(|i| format!("class {i}")).collect();
    let build = |x: &Array2<f64>, c: &Array2<f64>| -> Result<(EmbeddingDataset, CaptionSet)> {
        let ds = EmbeddingDataset::new(
            to_f32(&x.dot(&rotation)),
            Some(labels.iter().map(|&y| y as f64).collect()),
            None,
        )?;
        let caps = CaptionSet::new(to_f32(&c.dot(&rotation)).view(), support.clone(), names.clone(), Task::Classification)?;
        Ok((ds, caps))
    };
    let error_rate = |x: &Array2<f64>, c: &Array2<f64>| -> Result<f64> {
        let (ds, caps) = build(x, c)?;
        let zs = zeroshot::assign(&ds, &caps)?;
        let wrong = zs.assigned_index.iter().zip(&labels).filter(|(a, b)| a != b).count();
        Ok(wrong as f64 / n as f64)
    };

    // Bisection on a parameter whose error rate grows monotonically.
    let calibrate = |rate: f64, f: &dyn Fn(f64) -> Result<f64>| -> Result<f64> {
        let mut hi = 0.05;
        while f(hi)? < rate {
            hi *= 2.0;
            if hi > 1e4 {
                return Err(Error::Config(format!("cannot reach corruption rate {rate}")));
            }
        }
        let mut lo = 0.0;
        for _ in 0..BISECTION_STEPS {
            let mid = 0.5 * (lo + hi);
            if f(mid)? < rate {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(hi)
    };

    let (x, c, calibrated) = match &rule.corruption {
        Corruption::Uniform { rate } => {
            let c = captions(0.0, &[]);
            let spread = if *rate == 0.0 {
                0.0
            } else {
                calibrate(*rate, &|s| error_rate(&images(s), &c))?
            };
            (images(spread), c, spread)
        }
        Corruption::Sink { rate, sinks, spread } => {
            let x = images(*spread);
            let base = error_rate(&x, &captions(0.0, sinks))?;
            if base > *rate {
                return Err(Error::Config(format!(
                    "cluster spread {spread} already gives error rate {base:.3} > {rate}"
                )));
            }
            let pull = calibrate(*rate, &|p| error_rate(&x, &captions(p, sinks)))?;
            (x, captions(pull, sinks), pull)
        }
    };
    let (dataset, captions) = build(&x, &c)?;
    Ok(SynthFixture {
        dataset,
        captions,
        prior,
        calibrated,
    })
}

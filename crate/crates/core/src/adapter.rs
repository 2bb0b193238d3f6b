//! The trainable head over frozen embeddings.
//!
//! A plain MLP with ReLU hidden layers, a scalar or softmax output, Adam with
//! bias correction and decoupled weight decay, a step learning-rate schedule
//! and a bit-exact `.pfad` model file.

use std::fs::{self, File};
use std::io::{BufWriter, Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::priors::LabelPrior;

pub const MODEL_MAGIC: [u8; 4] = *b"PFAD";
pub const MODEL_VERSION: u32 = 1;
pub const DEFAULT_HIDDEN: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    ScalarRegression,
    SoftmaxClassification,
}

impl Head {
    fn tag(self) -> u8 {
        match self {
            Head::ScalarRegression => 0,
            Head::SoftmaxClassification => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Head::ScalarRegression),
            1 => Ok(Head::SoftmaxClassification),
            other => Err(Error::InvalidData(format!("unknown head tag {other}"))),
        }
    }
}

/// Weights (`in x out`) and bias of one dense layer. Also used for gradients
/// and optimizer moments, which share the parameter shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros_like(other: &Dense) -> Self {
        Dense {
            weights: Array2::zeros(other.weights.raw_dim()),
            bias: Array1::zeros(other.bias.raw_dim()),
        }
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().chain(self.bias.iter())
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights.iter_mut().chain(self.bias.iter_mut())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    layers: Vec<Dense>,
    head: Head,
    // Bumped on every parameter mutation so stale forward caches are caught.
    version: u64,
}

/// Activations kept by [`Adapter::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    inputs: Vec<Array2<f64>>,
    pre_activations: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl ForwardCache {
    /// `B x out` outputs: raw scalars or softmax probabilities.
    pub fn output(&self) -> ArrayView2<'_, f64> {
        self.output.view()
    }

    pub fn into_output(self) -> Array2<f64> {
        self.output
    }
}

/// Parameter gradients, one entry per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn zeros_like(adapter: &Adapter) -> Self {
        Gradients {
            layers: adapter.layers.iter().map(Dense::zeros_like).collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.layers.iter().flat_map(Dense::values).copied().collect()
    }

    /// `self += other`.
    pub fn accumulate(&mut self, other: &Gradients) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::Shape("gradient layer counts differ".into()));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if a.weights.dim() != b.weights.dim() || a.bias.len() != b.bias.len() {
                return Err(Error::Shape("gradient layer shapes differ".into()));
            }
            a.weights += &b.weights;
            a.bias += &b.bias;
        }
        Ok(())
    }
}

impl Adapter {
    /// Glorot-uniform weights, zero biases, deterministic in `seed`.
    pub fn init(layer_dims: &[usize], head: Head, seed: u64) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(Error::Config(format!("invalid layer dims {layer_dims:?}")));
        }
        let out = *layer_dims.last().unwrap();
        match head {
            Head::ScalarRegression if out != 1 => {
                return Err(Error::Config(format!("regression head needs 1 output, got {out}")))
            }
            Head::SoftmaxClassification if out < 2 => {
                return Err(Error::Config(format!("classification head needs >= 2 outputs, got {out}")))
            }
            _ => {}
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = layer_dims
            .windows(2)
            .map(|w| {
                let limit = glorot_limit(w[0], w[1]);
                Dense {
                    weights: Array2::from_shape_simple_fn((w[0], w[1]), || rng.random_range(-limit..=limit)),
                    bias: Array1::zeros(w[1]),
                }
            })
            .collect();
        Ok(Self {
            layers,
            head,
            version: 0,
        })
    }

    /// [`Adapter::init`], with a regression output bias starting at the prior mean.
    pub fn init_for_prior(layer_dims: &[usize], head: Head, seed: u64, prior: &LabelPrior) -> Result<Self> {
        let mut adapter = Self::init(layer_dims, head, seed)?;
        if head == Head::ScalarRegression {
            adapter.layers.last_mut().unwrap().bias[0] = prior.mean();
        }
        Ok(adapter)
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].weights.nrows()];
        dims.extend(self.layers.iter().map(|l| l.weights.ncols()));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weights.ncols()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// All parameters in layer order, weights before biases.
    pub fn parameters(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(Dense::values)
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.version += 1;
        self.layers.iter_mut().flat_map(Dense::values_mut)
    }

    pub fn forward(&self, batch: ArrayView2<'_, f64>) -> Result<ForwardCache> {
        if batch.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "batch width {} does not match adapter input {}",
                batch.ncols(),
                self.input_dim()
            )));
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(last);
        let mut x = batch.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = x.dot(&layer.weights) + &layer.bias;
            inputs.push(x);
            if i < last {
                x = z.mapv(|v| v.max(0.0));
                pre_activations.push(z);
            } else {
                x = z;
            }
        }
        if self.head == Head::SoftmaxClassification {
            softmax_rows(&mut x);
        }
        Ok(ForwardCache {
            version: self.version,
            inputs,
            pre_activations,
            output: x,
        })
    }

    /// Convenience wrapper returning only the outputs.
    pub fn predict(&self, batch: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(self.forward(batch)?.into_output())
    }

    /// Gradients of a scalar loss whose gradient with respect to the outputs
    /// (after softmax, for classification) is `grad_output`.
    pub fn backward(&self, cache: &ForwardCache, grad_output: ArrayView2<'_, f64>) -> Result<Gradients> {
        if cache.version != self.version || cache.inputs.len() != self.layers.len() {
            return Err(Error::Shape("forward cache is stale for this adapter".into()));
        }
        if grad_output.dim() != cache.output.dim() {
            return Err(Error::Shape(format!(
                "output gradient has shape {:?}, outputs have {:?}",
                grad_output.dim(),
                cache.output.dim()
            )));
        }
        let mut delta = grad_output.to_owned();
        if self.head == Head::SoftmaxClassification {
            let p = &cache.output;
            let dots = (p * &delta).sum_axis(Axis(1)).insert_axis(Axis(1));
            delta = p * &(&delta - &dots);
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        for i in (0..self.layers.len()).rev() {
            let weights = cache.inputs[i].t().dot(&delta);
            let bias = delta.sum_axis(Axis(0));
            if i > 0 {
                let mut next = delta.dot(&self.layers[i].weights.t());
                Zip::from(&mut next)
                    .and(&cache.pre_activations[i - 1])
                    .for_each(|g, &z| {
                        if z <= 0.0 {
                            *g = 0.0;
                        }
                    });
                delta = next;
            }
            layers.push(Dense { weights, bias });
        }
        layers.reverse();
        Ok(Gradients { layers })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.encode(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn encode<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(&MODEL_MAGIC)?;
        w.write_u32::<LittleEndian>(MODEL_VERSION)?;
        w.write_u8(self.head.tag())?;
        w.write_u32::<LittleEndian>(self.layers.len() as u32)?;
        for d in self.layer_dims() {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        for v in self.parameters() {
            w.write_f64::<LittleEndian>(*v)?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let truncated = |_| Error::Truncated("model file ends early".into());
        let mut cur = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        cur.read_exact(&mut magic).map_err(truncated)?;
        if magic != MODEL_MAGIC {
            return Err(Error::BadMagic {
                expected: MODEL_MAGIC,
                found: magic,
            });
        }
        let version = cur.read_u32::<LittleEndian>().map_err(truncated)?;
        if version != MODEL_VERSION {
            return Err(Error::VersionMismatch {
                expected: MODEL_VERSION,
                found: version,
            });
        }
        let head = Head::from_tag(cur.read_u8().map_err(truncated)?)?;
        let count = cur.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        if count == 0 || count > 64 {
            return Err(Error::InvalidData(format!("implausible layer count {count}")));
        }
        let mut dims = Vec::with_capacity(count + 1);
        for _ in 0..=count {
            dims.push(cur.read_u32::<LittleEndian>().map_err(truncated)? as usize);
        }
        let mut adapter = Self::init(&dims, head, 0)?;
        let expected = adapter.parameter_count();
        if bytes.len() as u64 - cur.position() != 8 * expected as u64 {
            return Err(Error::Truncated(format!(
                "model declares {expected} parameters, payload has {} bytes",
                bytes.len() as u64 - cur.position()
            )));
        }
        for v in adapter.parameters_mut() {
            *v = cur.read_f64::<LittleEndian>().map_err(truncated)?;
        }
        adapter.version = 0;
        Ok(adapter)
    }
}

pub fn glorot_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn softmax_rows(x: &mut Array2<f64>) {
    for mut row in x.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
}

/// Adam moments and hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Gradients,
    pub v: Gradients,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: f64,
    pub weight_decay: f64,
}

impl AdamState {
    pub fn new(adapter: &Adapter, lr: f64, weight_decay: f64) -> Self {
        Self {
            m: Gradients::zeros_like(adapter),
            v: Gradients::zeros_like(adapter),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr,
            weight_decay,
        }
    }
}

/// One Adam update with bias correction, then `w -= weight_decay * lr * w`.
pub fn adam_step(adapter: &mut Adapter, state: &mut AdamState, grads: &Gradients) -> Result<()> {
    if !(state.lr.is_finite() && state.lr > 0.0) {
        return Err(Error::Config(format!("learning rate must be > 0, got {}", state.lr)));
    }
    if grads.layers.len() != adapter.layers.len()
        || grads.layers.iter().zip(&adapter.layers).any(|(g, p)| {
            g.weights.dim() != p.weights.dim() || g.bias.len() != p.bias.len()
        })
    {
        return Err(Error::Shape("gradients do not match adapter parameters".into()));
    }
    for (l, g) in grads.layers.iter().enumerate() {
        if let Some(i) = g.values().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite gradient in layer {l} at parameter {i} (step {})",
                state.t + 1
            )));
        }
    }

    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    let decay = state.weight_decay * state.lr;
    adapter.version += 1;
    for (((param, grad), m), v) in adapter
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(state.m.layers.iter_mut())
        .zip(state.v.layers.iter_mut())
    {
        for (((w, g), m), v) in param
            .values_mut()
            .zip(grad.values())
            .zip(m.values_mut())
            .zip(v.values_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
            *w -= decay * *w;
        }
    }
    Ok(())
}

/// Step decay: `base_lr * decay^floor(epoch / period)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub decay: f64,
    pub period: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            decay: 0.3,
            period: 10,
        }
    }
}

impl LrSchedule {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.base_lr * self.decay.powi((epoch / self.period.max(1)) as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn random_batch(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_parameters() {
        let mut reg = Adapter::init(&[4, 8, 1], Head::ScalarRegression, 0).unwrap();
        reg.parameters_mut().for_each(|p| *p = 0.0);
        let out = reg.predict(random_batch(3, 4, 1).view()).unwrap();
        assert!(out.iter().all(|v| *v == 0.0));

        let mut clf = Adapter::init(&[4, 8, 5], Head::SoftmaxClassification, 0).unwrap();
        clf.parameters_mut().for_each(|p| *p = 0.0);
        let out = clf.predict(random_batch(3, 4, 1).view()).unwrap();
        assert!(out.iter().all(|v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn rows_are_independent() {
        let adapter = Adapter::init(&[4, 16, 3], Head::SoftmaxClassification, 3).unwrap();
        let batch = random_batch(6, 4, 2);
        let out = adapter.predict(batch.view()).unwrap();
        let perm = [5, 2, 0, 4, 1, 3];
        let permuted = batch.select(Axis(0), &perm);
        let out_perm = adapter.predict(permuted.view()).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(out_perm.row(k), out.row(i));
            assert!((out.row(i).sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_output_gradient() {
        let adapter = Adapter::init(&[4, 8, 1], Head::ScalarRegression, 0).unwrap();
        let cache = adapter.forward(random_batch(5, 4, 0).view()).unwrap();
        let grads = adapter.backward(&cache, Array2::zeros((5, 1)).view()).unwrap();
        assert!(grads.flatten().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn single_linear_layer_closed_form() {
        let adapter = Adapter::init(&[3, 1], Head::ScalarRegression, 9).unwrap();
        let batch = random_batch(4, 3, 5);
        let cache = adapter.forward(batch.view()).unwrap();
        // Loss = mean of outputs.
        let grads = adapter.backward(&cache, Array2::from_elem((4, 1), 0.25).view()).unwrap();
        let mean = batch.mean_axis(Axis(0)).unwrap();
        for j in 0..3 {
            assert!((grads.layers[0].weights[[j, 0]] - mean[j]).abs() < 1e-15);
        }
        assert!((grads.layers[0].bias[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn stale_cache_rejected() {
        let mut adapter = Adapter::init(&[2, 4, 1], Head::ScalarRegression, 0).unwrap();
        let cache = adapter.forward(array![[1.0, 0.0]].view()).unwrap();
        let mut state = AdamState::new(&adapter, 1e-3, 0.0);
        let grads = adapter.backward(&cache, array![[1.0]].view()).unwrap();
        adam_step(&mut adapter, &mut state, &grads).unwrap();
        assert!(adapter.backward(&cache, array![[1.0]].view()).is_err());
        assert!(adapter.backward(&adapter.forward(array![[1.0, 0.0]].view()).unwrap(), array![[1.0, 2.0]].view()).is_err());
    }

    #[test]
    fn first_adam_step() {
        let mut adapter = Adapter::init(&[1, 1], Head::ScalarRegression, 0).unwrap();
        adapter.parameters_mut().for_each(|p| *p = 0.0);
        let mut state = AdamState::new(&adapter, 1e-3, 0.0);
        let mut grads = Gradients::zeros_like(&adapter);
        grads.layers[0].weights[[0, 0]] = 1.0;
        adam_step(&mut adapter, &mut state, &grads).unwrap();
        let w = adapter.layers()[0].weights[[0, 0]];
        assert!((w + 1e-3).abs() < 1e-10, "{w}");
        assert_eq!(adapter.layers()[0].bias[0], 0.0);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut adapter = Adapter::init(&[3, 5, 1], Head::ScalarRegression, 4).unwrap();
        let before = adapter.clone();
        let mut state = AdamState::new(&adapter, 1e-3, 0.0);
        for _ in 0..3 {
            adam_step(&mut adapter, &mut state, &Gradients::zeros_like(&before)).unwrap();
        }
        assert!(adapter.parameters().eq(before.parameters()));
    }

    #[test]
    fn tiny_lr_leaves_only_decay() {
        let mut adapter = Adapter::init(&[3, 5, 1], Head::ScalarRegression, 4).unwrap();
        let before: Vec<f64> = adapter.parameters().copied().collect();
        let mut state = AdamState::new(&adapter, 1e-12, 0.5);
        let mut grads = Gradients::zeros_like(&adapter);
        grads.layers[0].weights.fill(3.0);
        adam_step(&mut adapter, &mut state, &grads).unwrap();
        for (a, b) in adapter.parameters().zip(&before) {
            assert!((a - b).abs() < 1e-11);
        }
    }

    #[test]
    fn nan_gradient_aborts() {
        let mut adapter = Adapter::init(&[2, 1], Head::ScalarRegression, 0).unwrap();
        let mut state = AdamState::new(&adapter, 1e-3, 0.0);
        let mut grads = Gradients::zeros_like(&adapter);
        grads.layers[0].bias[0] = f64::NAN;
        assert!(matches!(
            adam_step(&mut adapter, &mut state, &grads),
            Err(Error::Numerical(_))
        ));
        assert_eq!(state.t, 0);
    }

    #[test]
    fn schedule_steps() {
        let s = LrSchedule::default();
        assert_eq!(s.lr_at(0), 1e-3);
        assert_eq!(s.lr_at(9), 1e-3);
        assert!((s.lr_at(10) - 3e-4).abs() < 1e-18);
        assert!((s.lr_at(25) - 9e-5).abs() < 1e-18);
        let imagenet = LrSchedule { period: 1, ..s };
        assert!((imagenet.lr_at(2) - 9e-5).abs() < 1e-18);
    }

    #[test]
    fn init_contract() {
        let a = Adapter::init(&[16, 256, 1], Head::ScalarRegression, 7).unwrap();
        let b = Adapter::init(&[16, 256, 1], Head::ScalarRegression, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.parameter_count(), 16 * 256 + 256 + 256 + 1);
        for layer in a.layers() {
            let limit = glorot_limit(layer.weights.nrows(), layer.weights.ncols());
            assert!(layer.weights.iter().all(|w| w.abs() <= limit));
            assert!(layer.bias.iter().all(|b| *b == 0.0));
        }
        let prior = LabelPrior::gaussian(33.0, 20.0, None).unwrap();
        let c = Adapter::init_for_prior(&[16, 256, 1], Head::ScalarRegression, 7, &prior).unwrap();
        assert_eq!(c.layers()[1].bias[0], 33.0);
        assert!(Adapter::init(&[16, 256, 2], Head::ScalarRegression, 0).is_err());
        assert!(Adapter::init(&[16], Head::ScalarRegression, 0).is_err());
    }

    #[test]
    fn model_file_round_trip() {
        let a = Adapter::init(&[5, 7, 3], Head::SoftmaxClassification, 11).unwrap();
        let mut bytes = Vec::new();
        a.encode(&mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"PFAD");
        let b = Adapter::decode(&bytes).unwrap();
        assert!(a.parameters().zip(b.parameters()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(b.layer_dims(), vec![5, 7, 3]);
        let mut again = Vec::new();
        b.encode(&mut again).unwrap();
        assert_eq!(bytes, again);
        assert!(matches!(Adapter::decode(&bytes[..bytes.len() - 3]), Err(Error::Truncated(_))));
        bytes[0] = b'Q';
        assert!(matches!(Adapter::decode(&bytes), Err(Error::BadMagic { .. })));
    }
}

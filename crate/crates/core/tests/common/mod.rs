#![allow(dead_code)]

use ndarray::Array2;
use priorfit_core::eval::{self, EvalReport};
use priorfit_core::synth::{self, SynthFixture, SynthSpec};
use priorfit_core::trainer::{self, TrainConfig};
use priorfit_core::{zeroshot, Adapter, LabelPrior, ZeroShotResult};
use rand::Rng;

/// Minimum over all `B!` matchings of the mean absolute difference.
pub fn brute_force_w(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    // Heap's algorithm, iterative.
    let mut c = vec![0usize; n];
    let cost = |p: &[usize]| p.iter().enumerate().map(|(i, &j)| (a[i] - b[j]).abs()).sum::<f64>();
    best = best.min(cost(&perm));
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.min(cost(&perm));
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best / n as f64
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-7 {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Central difference of `f` along every coordinate of `x`.
pub fn numeric_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn random_probs<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let mut p = Array2::from_shape_fn((rows, cols), |_| rng.random_range(0.05..1.0));
    for mut row in p.rows_mut() {
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    p
}

pub struct Trained {
    pub adapter: Adapter,
    pub zero_shot: EvalReport,
    pub adapted: EvalReport,
    pub zs: ZeroShotResult,
}

pub fn train_on(fixture: &SynthFixture, prior: &LabelPrior, config: &TrainConfig) -> Trained {
    let zs = zeroshot::assign(&fixture.dataset, &fixture.captions).unwrap();
    let (adapter, _) = trainer::train(&fixture.dataset, &fixture.captions, prior, &zs, config).unwrap();
    let zero_shot = eval::evaluate_zero_shot(&zs, &fixture.dataset, &fixture.captions, &fixture.prior).unwrap();
    let adapted = eval::evaluate(&adapter, &fixture.dataset, &fixture.captions, &fixture.prior).unwrap();
    Trained {
        adapter,
        zero_shot,
        adapted,
        zs,
    }
}

pub fn regression_fixture(seed: u64) -> SynthFixture {
    let spec = SynthSpec {
        seed,
        ..SynthSpec::regression_default()
    };
    synth::generate(&spec).unwrap()
}

/// Writes straight to the process stdout so the line survives test capture.
pub fn report(name: &str, pass: bool, detail: impl AsRef<str>) {
    use std::io::Write;
    let line = format!("\n[{}] {name}: {}\n", if pass { "PASS" } else { "FAIL" }, detail.as_ref());
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

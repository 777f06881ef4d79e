//! Central finite-difference verification of every layer kind and of a
//! tiny end-to-end model, in double precision.
//!
//! For a layer `f` and a fixed random projection `u`, the scalar objective
//! is `sum(u * f(x))`; its analytic gradients come from `backward(u)`. The
//! error reported for a gradient tensor `a` against its numeric estimate
//! `n` is `||a - n|| / max(||a|| + ||n||, 1e-12)`.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::conv::ConvGeometry;
use crate::error::{Error, Result};
use crate::layers::{
    softmax_cross_entropy, softmax_cross_entropy_backward, Conv2d, Dense, DropoutSpec, Layer, LayerKind, Mode,
};
use crate::model::{ConvBlock, Model, ModelConfig};
use crate::seeding::stream_rng;
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Deliberate bugs that the harness must catch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Scales the analytic dense-layer gradients by 1.01.
    DenseBackward,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub epsilon: f64,
    pub tolerance: f64,
    pub fault: Option<Fault>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            seed: 0,
            epsilon: DEFAULT_EPSILON,
            tolerance: DEFAULT_TOLERANCE,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    /// Layer kind, or `end_to_end`.
    pub kind: String,
    /// Which gradient, e.g. `input` or `conv1.kernels`.
    pub target: String,
    pub relative_error: f64,
    pub elements: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub results: Vec<CheckResult>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn max_by_kind(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for r in &self.results {
            let e = out.entry(r.kind.clone()).or_insert(0.0f64);
            *e = e.max(r.relative_error);
        }
        out
    }

    pub fn max_error(&self) -> f64 {
        self.results.iter().map(|r| r.relative_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.results
            .iter()
            .all(|r| r.relative_error.is_finite() && r.relative_error < self.tolerance)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (kind, err) in self.max_by_kind() {
            let status = if err < self.tolerance { "ok" } else { "FAIL" };
            writeln!(f, "{kind:<15} max relative error {err:.3e}  {status}")?;
        }
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        write!(f, "{verdict}: {} gradients checked, tolerance {:.0e}", self.results.len(), self.tolerance)
    }
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()) + norm(&mut numeric.iter().copied());
    diff / scale.max(1e-12)
}

fn normal_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
}

/// Values at least 0.05 away from zero, so ReLU kinks are never crossed.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    normal_tensor(shape, rng).map(|v| if v.abs() < 0.05 { 0.05f64.copysign(v) } else { v })
}

/// Distinct values spaced 0.1 apart in random order, so pooling windows
/// have a unique maximum.
fn tie_free(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut ranks: Vec<usize> = (0..n).collect();
    ranks.shuffle(rng);
    Tensor::new(shape.to_vec(), ranks.iter().map(|&r| r as f64 * 0.1 - n as f64 * 0.05).collect())
        .expect("shape and data agree")
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn central_difference(eps: f64, value: &mut f64, mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let orig = *value;
    let plus = f(orig + eps)?;
    let minus = f(orig - eps)?;
    *value = orig;
    Ok((plus - minus) / (2.0 * eps))
}

struct LayerCase {
    layer: Layer<f64>,
    input: Tensor<f64>,
    mode: Mode,
}

fn check_layer(case: LayerCase, opts: &GradcheckOptions, stream: u64) -> Result<Vec<CheckResult>> {
    let LayerCase { mut layer, input, mode } = case;
    let kind = layer.kind();
    let rng = || stream_rng(opts.seed, 1000 + stream);
    let out = layer.forward(&input, mode, &mut rng())?;
    let u = normal_tensor(out.shape(), &mut stream_rng(opts.seed, 2000 + stream));
    let (mut dx, mut dparams) = layer.backward(&u)?;
    if opts.fault == Some(Fault::DenseBackward) && kind == LayerKind::Dense {
        dx = dx.map(|v| v * 1.01);
        dparams = dparams.into_iter().map(|g| g.map(|v| v * 1.01)).collect();
    }

    let objective = |layer: &mut Layer<f64>, x: &Tensor<f64>| -> Result<f64> {
        let y = layer.forward(x, mode, &mut rng())?;
        layer.clear_cache();
        Ok(dot(&y, &u))
    };

    let mut results = Vec::new();
    let mut x = input.clone();
    let mut numeric = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut probe = x.clone();
        let n = central_difference(opts.epsilon, &mut x.data_mut()[i], |v| {
            probe.data_mut()[i] = v;
            objective(&mut layer, &probe)
        })?;
        numeric.push(n);
    }
    results.push(CheckResult {
        kind: kind.as_str().to_string(),
        target: "input".into(),
        relative_error: relative_error(dx.data(), &numeric),
        elements: numeric.len(),
    });

    for (p, analytic) in dparams.iter().enumerate() {
        let name = layer.params()[p].name.clone();
        let count = analytic.len();
        let mut numeric = Vec::with_capacity(count);
        for i in 0..count {
            let orig = layer.params()[p].value.data()[i];
            let mut f = |v: f64| {
                layer.params_mut()[p].value.data_mut()[i] = v;
                objective(&mut layer, &input)
            };
            let plus = f(orig + opts.epsilon)?;
            let minus = f(orig - opts.epsilon)?;
            layer.params_mut()[p].value.data_mut()[i] = orig;
            numeric.push((plus - minus) / (2.0 * opts.epsilon));
        }
        results.push(CheckResult {
            kind: kind.as_str().to_string(),
            target: name,
            relative_error: relative_error(analytic.data(), &numeric),
            elements: count,
        });
    }
    Ok(results)
}

fn layer_cases(opts: &GradcheckOptions) -> Result<Vec<LayerCase>> {
    let mut rng = stream_rng(opts.seed, 0);
    let geom = ConvGeometry::new(3, 2, 2, 3)?;
    Ok(vec![
        LayerCase {
            layer: Layer::Conv2d(Conv2d::new("conv", geom, &mut rng)),
            input: normal_tensor(&[2, 4, 5, 2], &mut rng),
            mode: Mode::Train,
        },
        LayerCase {
            layer: Layer::maxpool(),
            input: tie_free(&[2, 5, 4, 2], &mut rng),
            mode: Mode::Train,
        },
        LayerCase {
            layer: Layer::relu(),
            input: away_from_zero(&[3, 7], &mut rng),
            mode: Mode::Train,
        },
        LayerCase {
            layer: Layer::flatten(),
            input: normal_tensor(&[2, 3, 3, 2], &mut rng),
            mode: Mode::Train,
        },
        LayerCase {
            layer: Layer::Dense(Dense::new("dense", 6, 4, &mut rng)),
            input: normal_tensor(&[3, 6], &mut rng),
            mode: Mode::Train,
        },
        LayerCase {
            layer: Layer::dropout(DropoutSpec::new(0.5)?),
            input: normal_tensor(&[4, 6], &mut rng),
            mode: Mode::Train,
        },
    ])
}

fn check_softmax_output(opts: &GradcheckOptions) -> Result<CheckResult> {
    let mut rng = stream_rng(opts.seed, 3000);
    let logits = normal_tensor(&[4, 3], &mut rng).map(|v| 3.0 * v);
    let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
    let out = softmax_cross_entropy(&logits, &labels)?;
    let analytic = softmax_cross_entropy_backward(&out.probs, &labels)?;
    let mut z = logits.clone();
    let mut numeric = Vec::with_capacity(z.len());
    for i in 0..z.len() {
        let mut probe = z.clone();
        numeric.push(central_difference(opts.epsilon, &mut z.data_mut()[i], |v| {
            probe.data_mut()[i] = v;
            Ok(softmax_cross_entropy(&probe, &labels)?.loss)
        })?);
    }
    Ok(CheckResult {
        kind: LayerKind::SoftmaxOutput.as_str().to_string(),
        target: "logits".into(),
        relative_error: relative_error(analytic.data(), &numeric),
        elements: numeric.len(),
    })
}

/// The tiny configuration used for the end-to-end check.
pub fn tiny_config(seed: u64) -> ModelConfig {
    ModelConfig {
        input_size: 8,
        conv_blocks: vec![ConvBlock::new(2)],
        fc_widths: vec![4],
        dropout_rate: 0.0,
        seed,
        ..ModelConfig::default()
    }
}

/// Smallest distance of any ReLU input from zero and of any pooling
/// window maximum from its runner-up.
fn kink_margin(model: &Model<f64>, batch: &Tensor<f64>) -> Result<f64> {
    let mut margin = f64::INFINITY;
    let mut x = batch.clone();
    for layer in model.layers() {
        match layer.kind() {
            LayerKind::Relu => {
                margin = x.data().iter().fold(margin, |m, v| m.min(v.abs()));
            }
            LayerKind::MaxPool => {
                let [b, h, w, c] = *x.shape() else { unreachable!("pool input is 4-d") };
                for n in 0..b {
                    for oy in 0..h / 2 {
                        for ox in 0..w / 2 {
                            for ch in 0..c {
                                let mut v: Vec<f64> = [(0, 0), (0, 1), (1, 0), (1, 1)]
                                    .iter()
                                    .map(|&(dy, dx)| x.get(&[n, 2 * oy + dy, 2 * ox + dx, ch]))
                                    .collect();
                                v.sort_by(|a, b| b.total_cmp(a));
                                // an all-zero window only holds clamped ReLU outputs
                                if v[0] > 0.0 {
                                    margin = margin.min(v[0] - v[1]);
                                }
                            }
                        }
                    }
                }
            }
            _ => {}
        }
        x = layer.infer(&x)?;
    }
    Ok(margin)
}

fn check_end_to_end(opts: &GradcheckOptions) -> Result<Vec<CheckResult>> {
    // pick the first seed whose activations sit clear of every kink
    let mut chosen = None;
    for attempt in 0..64u64 {
        let mut model = Model::<f64>::build(&tiny_config(opts.seed.wrapping_add(attempt)))?;
        let mut rng = stream_rng(opts.seed, 4000 + attempt);
        // zero biases would put fully padded border outputs exactly on the ReLU kink
        for p in model.params_mut().into_iter().filter(|p| p.name.ends_with(".bias")) {
            p.value = Tensor::from_fn(p.value.shape(), |_| 0.1 * rng.sample::<f64, _>(StandardNormal));
        }
        let batch = Tensor::from_fn(&[3, 8, 8, 1], |_| rng.random_range(0.0..1.0));
        let labels: Vec<usize> = (0..3).map(|i| i % 2).collect();
        if kink_margin(&model, &batch)? > 1e-3 {
            chosen = Some((model, batch, labels));
            break;
        }
    }
    let (mut model, batch, labels) =
        chosen.ok_or_else(|| Error::numeric("no kink-free end-to-end case found"))?;
    let mut rng = stream_rng(opts.seed, 5000);
    let (_, grads) = model.loss_and_gradients_in(&batch, &labels, Mode::Train, &mut rng)?;
    let mut results = Vec::new();
    for (p, analytic) in grads.iter().enumerate() {
        let name = model.params()[p].name.clone();
        let mut numeric = Vec::with_capacity(analytic.len());
        for i in 0..analytic.len() {
            let orig = model.params()[p].value.data()[i];
            let mut f = |v: f64| -> Result<f64> {
                model.params_mut()[p].value.data_mut()[i] = v;
                let z = model.logits(&batch, Mode::Eval, &mut rng)?;
                model.clear_caches();
                Ok(softmax_cross_entropy(&z, &labels)?.loss)
            };
            let plus = f(orig + opts.epsilon)?;
            let minus = f(orig - opts.epsilon)?;
            model.params_mut()[p].value.data_mut()[i] = orig;
            numeric.push((plus - minus) / (2.0 * opts.epsilon));
        }
        results.push(CheckResult {
            kind: "end_to_end".into(),
            target: name,
            relative_error: relative_error(analytic.data(), &numeric),
            elements: numeric.len(),
        });
    }
    Ok(results)
}

/// Runs every layer check, the softmax head check and the end-to-end check.
pub fn run(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut results = Vec::new();
    for (i, case) in layer_cases(opts)?.into_iter().enumerate() {
        results.extend(check_layer(case, opts, i as u64)?);
    }
    results.push(check_softmax_output(opts)?);
    results.extend(check_end_to_end(opts)?);
    Ok(GradcheckReport {
        results,
        tolerance: opts.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_basics() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
        assert!((relative_error(&[1.0], &[-1.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn correct_implementation_passes() {
        let report = run(&GradcheckOptions::default()).unwrap();
        assert!(report.passed(), "{report}");
        let kinds: Vec<_> = report.max_by_kind().into_keys().collect();
        assert_eq!(
            kinds,
            ["conv2d", "dense", "dropout", "end_to_end", "flatten", "maxpool", "relu", "softmax_output"]
        );
    }

    #[test]
    fn dense_fault_is_caught() {
        let report = run(&GradcheckOptions {
            fault: Some(Fault::DenseBackward),
            ..GradcheckOptions::default()
        })
        .unwrap();
        assert!(!report.passed());
        assert!(report.max_by_kind()["dense"] > 1e-3);
        assert!(report.max_by_kind()["conv2d"] < 1e-4);
    }

    #[test]
    fn fixed_seed_repeats_exactly() {
        let a = run(&GradcheckOptions::default()).unwrap();
        let b = run(&GradcheckOptions::default()).unwrap();
        assert_eq!(a, b);
    }
}

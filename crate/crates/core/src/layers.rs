//! Differentiable layers with a shared forward/backward contract.
//!
//! Every layer works on batched tensors whose leading axis is the batch.
//! `forward` keeps whatever `backward` needs; `backward` consumes it and
//! returns the gradient for the layer input together with one gradient per
//! parameter, in the same order as [`Layer::params`]. `infer` is the
//! cache-free evaluation path and only needs `&self`.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::conv::{conv2d_backward, conv2d_forward, ConvGeometry};
use crate::error::{Error, Result};
use crate::pool::{maxpool2d_backward, maxpool2d_forward, pooled_extent, ArgmaxMap};
use crate::tensor::{gemm, gemm_nt, transpose_raw, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv2d,
    MaxPool,
    Relu,
    Flatten,
    Dense,
    Dropout,
    SoftmaxOutput,
}

impl LayerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LayerKind::Conv2d => "conv2d",
            LayerKind::MaxPool => "maxpool",
            LayerKind::Relu => "relu",
            LayerKind::Flatten => "flatten",
            LayerKind::Dense => "dense",
            LayerKind::Dropout => "dropout",
            LayerKind::SoftmaxOutput => "softmax_output",
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A named trainable tensor. The shape is fixed when the layer is built.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Param {
            name: name.into(),
            value,
        }
    }
}

/// Zero-mean normal with standard deviation `sqrt(2 / fan_in)`.
pub fn he_normal<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("std is positive and finite");
    Tensor::from_fn(shape, |_| T::from_f64_lossy(normal.sample(rng)))
}

fn missing_cache(kind: LayerKind) -> Error {
    Error::usage(format!("{kind} backward called without a preceding forward"))
}

fn split_batch(shape: &[usize], what: &str, rank: usize) -> Result<(usize, Vec<usize>)> {
    if shape.len() != rank {
        return Err(Error::config(format!(
            "{what} expects a rank-{rank} batch, got shape {shape:?}"
        )));
    }
    Ok((shape[0], shape[1..].to_vec()))
}

/// Concatenates per-sample results back into one batch tensor.
fn gather<T: Scalar>(items: Vec<Tensor<T>>) -> Result<Tensor<T>> {
    Tensor::stack(&items)
}

#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    geom: ConvGeometry,
    kernels: Param<T>,
    bias: Param<T>,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, geom: ConvGeometry, rng: &mut R) -> Self {
        let fan_in = geom.kernel * geom.kernel * geom.in_channels;
        Conv2d {
            geom,
            kernels: Param::new(format!("{name}.kernels"), he_normal(&geom.kernel_shape(), fan_in, rng)),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[geom.out_channels])),
            cache: None,
        }
    }

    pub fn geometry(&self) -> &ConvGeometry {
        &self.geom
    }

    fn run(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let (batch, _) = split_batch(input.shape(), "conv2d", 4)?;
        let outs = (0..batch)
            .into_par_iter()
            .map(|b| conv2d_forward(&input.slice_outer(b), &self.kernels.value, &self.bias.value, &self.geom))
            .collect::<Result<Vec<_>>>()?;
        gather(outs)
    }

    fn backward(&mut self, upstream: &Tensor<T>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let input = self.cache.take().ok_or_else(|| missing_cache(LayerKind::Conv2d))?;
        let batch = input.shape()[0];
        if upstream.ndim() != 4 || upstream.shape()[0] != batch {
            return Err(Error::config(format!(
                "conv2d upstream gradient shape {:?} does not match batch {batch}",
                upstream.shape()
            )));
        }
        let per_sample = (0..batch)
            .into_par_iter()
            .map(|b| {
                conv2d_backward(
                    &input.slice_outer(b),
                    &self.kernels.value,
                    &self.geom,
                    &upstream.slice_outer(b),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        // reduce in batch order so the sum is reproducible
        let mut grad_k = Tensor::zeros(self.kernels.value.shape());
        let mut grad_b = Tensor::zeros(self.bias.value.shape());
        let mut grad_inputs = Vec::with_capacity(batch);
        for g in per_sample {
            for (acc, &v) in grad_k.data_mut().iter_mut().zip(g.kernels.data()) {
                *acc = *acc + v;
            }
            for (acc, &v) in grad_b.data_mut().iter_mut().zip(g.bias.data()) {
                *acc = *acc + v;
            }
            grad_inputs.push(g.input);
        }
        Ok((gather(grad_inputs)?, vec![grad_k, grad_b]))
    }
}

#[derive(Debug, Clone, Default)]
pub struct MaxPool2d {
    cache: Option<(Vec<ArgmaxMap>, Vec<usize>)>,
}

impl MaxPool2d {
    pub fn new() -> Self {
        MaxPool2d::default()
    }

    fn run<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<ArgmaxMap>)> {
        let (batch, _) = split_batch(input.shape(), "maxpool", 4)?;
        let (outs, maps): (Vec<_>, Vec<_>) = (0..batch)
            .into_par_iter()
            .map(|b| maxpool2d_forward(&input.slice_outer(b)))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip();
        Ok((gather(outs)?, maps))
    }

    fn backward<T: Scalar>(&mut self, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        let (maps, input_shape) = self.cache.take().ok_or_else(|| missing_cache(LayerKind::MaxPool))?;
        if upstream.ndim() != 4 || upstream.shape()[0] != maps.len() {
            return Err(Error::config(format!(
                "maxpool upstream gradient shape {:?} does not match batch {}",
                upstream.shape(),
                maps.len()
            )));
        }
        let grads = maps
            .iter()
            .enumerate()
            .map(|(b, map)| maxpool2d_backward(map, &upstream.slice_outer(b), &input_shape[1..]))
            .collect::<Result<Vec<_>>>()?;
        gather(grads)
    }
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    input.ensure_finite("relu input")?;
    Ok(input.map(|v| if v > T::zero() { v } else { T::zero() }))
}

/// Passes `upstream` where the forward input was strictly positive.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    if input.shape() != upstream.shape() {
        return Err(Error::config(format!(
            "relu upstream gradient shape {:?} does not match input {:?}",
            upstream.shape(),
            input.shape()
        )));
    }
    let data = input
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(input.shape().to_vec(), data)
}

#[derive(Debug, Clone, Default)]
pub struct Relu<T> {
    cache: Option<Tensor<T>>,
}

#[derive(Debug, Clone, Default)]
pub struct Flatten {
    cache: Option<Vec<usize>>,
}

impl Flatten {
    fn run<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
        if input.ndim() < 2 {
            return Err(Error::config(format!(
                "flatten needs a batch axis, got shape {:?}",
                input.shape()
            )));
        }
        let batch = input.shape()[0];
        let features = input.len() / batch;
        input.clone().reshape(&[batch, features])
    }
}

/// `B×N · N×M + bias`.
pub fn dense_forward<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let ([b, n], [n2, m]) = (input.shape(), weights.shape()) else {
        return Err(Error::config(format!(
            "dense expects B×N input and N×M weights, got {:?} and {:?}",
            input.shape(),
            weights.shape()
        )));
    };
    let (b, n, m) = (*b, *n, *m);
    if n != *n2 || bias.shape() != [m] {
        return Err(Error::config(format!(
            "dense shapes disagree: input {:?}, weights {:?}, bias {:?}",
            input.shape(),
            weights.shape(),
            bias.shape()
        )));
    }
    input.ensure_finite("dense input")?;
    let mut out = gemm(input.data(), weights.data(), b, n, m);
    for row in out.chunks_mut(m) {
        for (o, &bb) in row.iter_mut().zip(bias.data()) {
            *o = *o + bb;
        }
    }
    let out = Tensor::new(vec![b, m], out)?;
    out.ensure_finite("dense output")?;
    Ok(out)
}

/// Gradients of [`dense_forward`]: `(d_input, d_weights, d_bias)`.
pub fn dense_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (b, n) = (input.shape()[0], input.shape()[1]);
    let m = weights.shape()[1];
    if upstream.shape() != [b, m] {
        return Err(Error::config(format!(
            "dense upstream gradient shape {:?} does not match output [{b}, {m}]",
            upstream.shape()
        )));
    }
    let grad_input = gemm_nt(upstream.data(), weights.data(), b, m, n);
    let input_t = transpose_raw(input.data(), b, n);
    let grad_weights = gemm(&input_t, upstream.data(), n, b, m);
    let mut grad_bias = vec![T::zero(); m];
    for row in upstream.data().chunks(m) {
        for (g, &u) in grad_bias.iter_mut().zip(row) {
            *g = *g + u;
        }
    }
    Ok((
        Tensor::new(vec![b, n], grad_input)?,
        Tensor::new(vec![n, m], grad_weights)?,
        Tensor::new(vec![m], grad_bias)?,
    ))
}

#[derive(Debug, Clone)]
pub struct Dense<T> {
    weights: Param<T>,
    bias: Param<T>,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Dense<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Dense {
            weights: Param::new(format!("{name}.weights"), he_normal(&[inputs, outputs], inputs, rng)),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[outputs])),
            cache: None,
        }
    }

    pub fn from_params(name: &str, weights: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        if weights.ndim() != 2 || bias.shape() != [weights.shape()[1]] {
            return Err(Error::config(format!(
                "dense weights {:?} and bias {:?} disagree",
                weights.shape(),
                bias.shape()
            )));
        }
        Ok(Dense {
            weights: Param::new(format!("{name}.weights"), weights),
            bias: Param::new(format!("{name}.bias"), bias),
            cache: None,
        })
    }

    pub fn inputs(&self) -> usize {
        self.weights.value.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weights.value.shape()[1]
    }
}

/// Dropout probability, validated to lie in `[0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutSpec {
    rate: f64,
}

impl DropoutSpec {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(format!("dropout rate {rate} must lie in [0, 1)")));
        }
        Ok(DropoutSpec { rate })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }
}

/// Inverted dropout. Survivors are scaled by `1/(1-rate)` during training so
/// evaluation is the identity.
#[derive(Debug, Clone)]
pub struct Dropout<T> {
    spec: DropoutSpec,
    // outer None: no forward yet; inner None: identity pass
    cache: Option<Option<Tensor<T>>>,
}

impl<T: Scalar> Dropout<T> {
    pub fn new(spec: DropoutSpec) -> Self {
        Dropout { spec, cache: None }
    }

    pub fn spec(&self) -> DropoutSpec {
        self.spec
    }

    fn forward<R: Rng + ?Sized>(&mut self, input: &Tensor<T>, mode: Mode, rng: &mut R) -> Tensor<T> {
        if mode == Mode::Eval || self.spec.rate == 0.0 {
            self.cache = Some(None);
            return input.clone();
        }
        let keep_scale = T::from_f64_lossy(1.0 / (1.0 - self.spec.rate));
        let mask = Tensor::from_fn(input.shape(), |_| {
            if rng.random::<f64>() < self.spec.rate {
                T::zero()
            } else {
                keep_scale
            }
        });
        let out = apply_mask(input, &mask);
        self.cache = Some(Some(mask));
        out
    }

    fn backward(&mut self, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        match self.cache.take().ok_or_else(|| missing_cache(LayerKind::Dropout))? {
            None => Ok(upstream.clone()),
            Some(mask) => {
                if mask.shape() != upstream.shape() {
                    return Err(Error::config(format!(
                        "dropout upstream gradient shape {:?} does not match mask {:?}",
                        upstream.shape(),
                        mask.shape()
                    )));
                }
                Ok(apply_mask(upstream, &mask))
            }
        }
    }
}

fn apply_mask<T: Scalar>(x: &Tensor<T>, mask: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().zip(mask.data()).map(|(&v, &m)| v * m).collect();
    Tensor::new(x.shape().to_vec(), data).expect("mask has the input's shape")
}

/// Row-wise softmax with the row maximum subtracted first.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let [_, k] = *logits.shape() else {
        return Err(Error::config(format!("softmax expects B×K logits, got {:?}", logits.shape())));
    };
    logits.ensure_finite("logits")?;
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    Ok(out)
}

/// Loss, per-sample losses and probabilities of a softmax + categorical
/// cross-entropy head.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxLoss<T> {
    /// Mean over the batch.
    pub loss: T,
    pub per_sample: Vec<T>,
    pub probs: Tensor<T>,
}

fn check_labels(labels: &[usize], batch: usize, classes: usize) -> Result<()> {
    if labels.len() != batch {
        return Err(Error::data(format!(
            "{} labels supplied for a batch of {batch}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::data(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    Ok(())
}

pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<SoftmaxLoss<T>> {
    let [batch, k] = *logits.shape() else {
        return Err(Error::config(format!("expected B×K logits, got {:?}", logits.shape())));
    };
    if k < 2 {
        return Err(Error::config(format!("softmax output needs at least 2 classes, got {k}")));
    }
    check_labels(labels, batch, k)?;
    let probs = softmax(logits)?;
    // -log p_y = logsumexp(z) - z_y, evaluated with the max shift
    let per_sample: Vec<T> = logits
        .data()
        .chunks(k)
        .zip(labels)
        .map(|(row, &y)| {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
            lse - row[y]
        })
        .collect();
    let loss = per_sample.iter().copied().sum::<T>() / T::from_usize(batch).expect("batch fits");
    if !loss.is_finite() {
        return Err(Error::numeric("cross-entropy loss is not finite"));
    }
    Ok(SoftmaxLoss {
        loss,
        per_sample,
        probs,
    })
}

/// `(probs - onehot) / B`.
pub fn softmax_cross_entropy_backward<T: Scalar>(probs: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    let [batch, k] = *probs.shape() else {
        return Err(Error::config(format!("expected B×K probabilities, got {:?}", probs.shape())));
    };
    check_labels(labels, batch, k)?;
    let scale = T::one() / T::from_usize(batch).expect("batch fits");
    let mut grad = probs.clone();
    for (row, &y) in grad.data_mut().chunks_mut(k).zip(labels) {
        row[y] = row[y] - T::one();
        for v in row.iter_mut() {
            *v = *v * scale;
        }
    }
    Ok(grad)
}

/// Converts one-hot rows into class indices.
pub fn labels_from_one_hot<T: Scalar>(one_hot: &Tensor<T>) -> Result<Vec<usize>> {
    let [_, k] = *one_hot.shape() else {
        return Err(Error::data(format!("one-hot labels must be B×K, got {:?}", one_hot.shape())));
    };
    one_hot
        .data()
        .chunks(k)
        .enumerate()
        .map(|(i, row)| {
            let hot: Vec<usize> = row
                .iter()
                .enumerate()
                .filter(|(_, &v)| v == T::one())
                .map(|(j, _)| j)
                .collect();
            let zeros = row.iter().filter(|&&v| v == T::zero()).count();
            match hot.as_slice() {
                [j] if zeros == k - 1 => Ok(*j),
                _ => Err(Error::data(format!("row {i} is not one-hot"))),
            }
        })
        .collect()
}

/// Output head: softmax probabilities and, with labels, the cross-entropy
/// loss and its gradient.
#[derive(Debug, Clone, Default)]
pub struct SoftmaxOutput<T> {
    cache: Option<(Tensor<T>, Vec<usize>)>,
}

impl<T: Scalar> SoftmaxOutput<T> {
    pub fn new() -> Self {
        SoftmaxOutput { cache: None }
    }

    pub fn forward(&mut self, logits: &Tensor<T>, labels: &[usize]) -> Result<SoftmaxLoss<T>> {
        let out = softmax_cross_entropy(logits, labels)?;
        self.cache = Some((out.probs.clone(), labels.to_vec()));
        Ok(out)
    }

    pub fn backward(&mut self) -> Result<Tensor<T>> {
        let (probs, labels) = self
            .cache
            .take()
            .ok_or_else(|| missing_cache(LayerKind::SoftmaxOutput))?;
        softmax_cross_entropy_backward(&probs, &labels)
    }
}

/// One stage of the sequential stack (everything except the output head).
#[derive(Debug, Clone)]
pub enum Layer<T> {
    Conv2d(Conv2d<T>),
    MaxPool(MaxPool2d),
    Relu(Relu<T>),
    Flatten(Flatten),
    Dense(Dense<T>),
    Dropout(Dropout<T>),
}

impl<T: Scalar> Layer<T> {
    pub fn relu() -> Self {
        Layer::Relu(Relu { cache: None })
    }

    pub fn maxpool() -> Self {
        Layer::MaxPool(MaxPool2d::new())
    }

    pub fn flatten() -> Self {
        Layer::Flatten(Flatten::default())
    }

    pub fn dropout(spec: DropoutSpec) -> Self {
        Layer::Dropout(Dropout::new(spec))
    }

    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv2d(_) => LayerKind::Conv2d,
            Layer::MaxPool(_) => LayerKind::MaxPool,
            Layer::Relu(_) => LayerKind::Relu,
            Layer::Flatten(_) => LayerKind::Flatten,
            Layer::Dense(_) => LayerKind::Dense,
            Layer::Dropout(_) => LayerKind::Dropout,
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Conv2d(c) => {
                let [h, w, ch] = *input else {
                    return Err(Error::config(format!("conv2d expects H×W×C, got {input:?}")));
                };
                if ch != c.geom.in_channels {
                    return Err(Error::config(format!(
                        "conv2d expects {} channels, got {ch}",
                        c.geom.in_channels
                    )));
                }
                Ok(vec![c.geom.output_extent(h)?, c.geom.output_extent(w)?, c.geom.out_channels])
            }
            Layer::MaxPool(_) => {
                let [h, w, ch] = *input else {
                    return Err(Error::config(format!("maxpool expects H×W×C, got {input:?}")));
                };
                Ok(vec![pooled_extent(h)?, pooled_extent(w)?, ch])
            }
            Layer::Relu(_) | Layer::Dropout(_) => Ok(input.to_vec()),
            Layer::Flatten(_) => Ok(vec![input.iter().product()]),
            Layer::Dense(d) => {
                if input != [d.inputs()] {
                    return Err(Error::config(format!(
                        "dense expects {} features, got {input:?}",
                        d.inputs()
                    )));
                }
                Ok(vec![d.outputs()])
            }
        }
    }

    pub fn forward<R: Rng + ?Sized>(&mut self, input: &Tensor<T>, mode: Mode, rng: &mut R) -> Result<Tensor<T>> {
        match self {
            Layer::Conv2d(c) => {
                let out = c.run(input)?;
                c.cache = Some(input.clone());
                Ok(out)
            }
            Layer::MaxPool(p) => {
                let (out, maps) = MaxPool2d::run(input)?;
                p.cache = Some((maps, input.shape().to_vec()));
                Ok(out)
            }
            Layer::Relu(r) => {
                let out = relu(input)?;
                r.cache = Some(input.clone());
                Ok(out)
            }
            Layer::Flatten(f) => {
                let out = Flatten::run(input)?;
                f.cache = Some(input.shape().to_vec());
                Ok(out)
            }
            Layer::Dense(d) => {
                let out = dense_forward(input, &d.weights.value, &d.bias.value)?;
                d.cache = Some(input.clone());
                Ok(out)
            }
            Layer::Dropout(d) => Ok(d.forward(input, mode, rng)),
        }
    }

    /// Evaluation-mode forward that leaves no cache behind.
    pub fn infer(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::Conv2d(c) => c.run(input),
            Layer::MaxPool(_) => Ok(MaxPool2d::run(input)?.0),
            Layer::Relu(_) => relu(input),
            Layer::Flatten(_) => Flatten::run(input),
            Layer::Dense(d) => dense_forward(input, &d.weights.value, &d.bias.value),
            Layer::Dropout(_) => Ok(input.clone()),
        }
    }

    /// Gradient for the layer input plus one gradient per parameter.
    pub fn backward(&mut self, upstream: &Tensor<T>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        match self {
            Layer::Conv2d(c) => c.backward(upstream),
            Layer::MaxPool(p) => Ok((p.backward(upstream)?, vec![])),
            Layer::Relu(r) => {
                let input = r.cache.take().ok_or_else(|| missing_cache(LayerKind::Relu))?;
                Ok((relu_backward(&input, upstream)?, vec![]))
            }
            Layer::Flatten(f) => {
                let shape = f.cache.take().ok_or_else(|| missing_cache(LayerKind::Flatten))?;
                Ok((upstream.clone().reshape(&shape)?, vec![]))
            }
            Layer::Dense(d) => {
                let input = d.cache.take().ok_or_else(|| missing_cache(LayerKind::Dense))?;
                let (gi, gw, gb) = dense_backward(&input, &d.weights.value, upstream)?;
                Ok((gi, vec![gw, gb]))
            }
            Layer::Dropout(d) => Ok((d.backward(upstream)?, vec![])),
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        match self {
            Layer::Conv2d(c) => vec![&c.kernels, &c.bias],
            Layer::Dense(d) => vec![&d.weights, &d.bias],
            _ => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match self {
            Layer::Conv2d(c) => vec![&mut c.kernels, &mut c.bias],
            Layer::Dense(d) => vec![&mut d.weights, &mut d.bias],
            _ => vec![],
        }
    }

    /// Drops any retained forward state.
    pub fn clear_cache(&mut self) {
        match self {
            Layer::Conv2d(c) => c.cache = None,
            Layer::MaxPool(p) => p.cache = None,
            Layer::Relu(r) => r.cache = None,
            Layer::Flatten(f) => f.cache = None,
            Layer::Dense(d) => d.cache = None,
            Layer::Dropout(d) => d.cache = None,
        }
    }
}

//! The sequential classifier: `[Conv → ReLU → Pool] × n → Flatten →
//! [Dense → ReLU → Dropout] × m → Dense → softmax`.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conv::ConvGeometry;
use crate::error::{Error, Result};
use crate::layers::{
    Conv2d, Dense, DropoutSpec, Layer, LayerKind, Mode, Param, SoftmaxLoss, SoftmaxOutput,
};
use crate::pool::pooled_extent;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "ConvBlockRepr")]
pub struct ConvBlock {
    pub filters: usize,
    pub kernel: usize,
    pub padding: usize,
}

impl ConvBlock {
    pub fn new(filters: usize) -> Self {
        ConvBlock {
            filters,
            kernel: 3,
            padding: 2,
        }
    }
}

/// Blocks may be written as a bare filter count or as a full object.
#[derive(Deserialize)]
#[serde(untagged)]
enum ConvBlockRepr {
    Filters(usize),
    Full(FullBlock),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FullBlock {
    filters: usize,
    #[serde(default = "default_kernel")]
    kernel: usize,
    #[serde(default = "default_padding")]
    padding: usize,
}

fn default_kernel() -> usize {
    3
}

fn default_padding() -> usize {
    2
}

impl From<ConvBlockRepr> for ConvBlock {
    fn from(r: ConvBlockRepr) -> Self {
        match r {
            ConvBlockRepr::Filters(filters) => ConvBlock::new(filters),
            ConvBlockRepr::Full(FullBlock {
                filters,
                kernel,
                padding,
            }) => ConvBlock {
                filters,
                kernel,
                padding,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Side of the square input image.
    pub input_size: usize,
    pub channels: usize,
    pub conv_blocks: Vec<ConvBlock>,
    pub fc_widths: Vec<usize>,
    pub dropout_rate: f64,
    pub num_classes: usize,
    /// Seed for weight initialisation.
    pub seed: u64,
    /// Display names for the output classes, in class-index order.
    pub class_names: Vec<String>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 256,
            channels: 1,
            conv_blocks: vec![ConvBlock::new(64), ConvBlock::new(128), ConvBlock::new(128)],
            fc_widths: vec![1024, 1024],
            dropout_rate: 0.2,
            num_classes: 2,
            seed: 0,
            class_names: Vec::new(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.channels == 0 {
            return Err(Error::config("input_size and channels must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if let Some(b) = self.conv_blocks.iter().find(|b| b.filters == 0 || b.kernel == 0) {
            return Err(Error::config(format!("conv block {b:?} needs positive filters and kernel")));
        }
        if self.fc_widths.contains(&0) {
            return Err(Error::config("fully connected widths must be positive"));
        }
        DropoutSpec::new(self.dropout_rate)?;
        if !self.class_names.is_empty() && self.class_names.len() != self.num_classes {
            return Err(Error::config(format!(
                "{} class names given for {} classes",
                self.class_names.len(),
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Name of class `index`, falling back to `class<index>`.
    pub fn class_name(&self, index: usize) -> String {
        self.class_names
            .get(index)
            .cloned()
            .unwrap_or_else(|| format!("class{index}"))
    }

    pub fn sample_shape(&self) -> [usize; 3] {
        [self.input_size, self.input_size, self.channels]
    }

    /// Layer-by-layer extents using `n + 2p - k + 1` for convolutions and
    /// `floor(n / 2)` for pooling. Fails naming the first layer whose input
    /// is too small.
    pub fn shape_trace(&self) -> Result<ShapeTrace> {
        self.validate()?;
        let mut entries = Vec::new();
        let mut shape = self.sample_shape().to_vec();
        let mut step = |name: String, kind: LayerKind, shape: &mut Vec<usize>, out: Result<Vec<usize>>| {
            let out = out.map_err(|e| match e {
                Error::Config(m) => Error::config(format!("extent underflow at {name}: {m}")),
                other => other,
            })?;
            entries.push(TraceEntry {
                name,
                kind,
                input: shape.clone(),
                output: out.clone(),
            });
            *shape = out;
            Ok::<_, Error>(())
        };
        let mut channels = self.channels;
        for (i, block) in self.conv_blocks.iter().enumerate() {
            let n = i + 1;
            let geom = ConvGeometry::new(block.kernel, block.padding, channels, block.filters)?;
            let out = geom
                .output_extent(shape[0])
                .and_then(|h| Ok(vec![h, geom.output_extent(shape[1])?, block.filters]));
            step(format!("conv{n}"), LayerKind::Conv2d, &mut shape, out)?;
            let same = shape.clone();
            step(format!("relu{n}"), LayerKind::Relu, &mut shape, Ok(same))?;
            let out = pooled_extent(shape[0]).and_then(|h| Ok(vec![h, pooled_extent(shape[1])?, shape[2]]));
            step(format!("pool{n}"), LayerKind::MaxPool, &mut shape, out)?;
            channels = block.filters;
        }
        let flat = vec![shape.iter().product()];
        step("flatten".into(), LayerKind::Flatten, &mut shape, Ok(flat))?;
        for (i, &w) in self.fc_widths.iter().enumerate() {
            let n = i + 1;
            step(format!("fc{n}"), LayerKind::Dense, &mut shape, Ok(vec![w]))?;
            step(format!("fc{n}_relu"), LayerKind::Relu, &mut shape, Ok(vec![w]))?;
            step(format!("fc{n}_dropout"), LayerKind::Dropout, &mut shape, Ok(vec![w]))?;
        }
        step("output".into(), LayerKind::Dense, &mut shape, Ok(vec![self.num_classes]))?;
        step("softmax".into(), LayerKind::SoftmaxOutput, &mut shape, Ok(vec![self.num_classes]))?;
        Ok(ShapeTrace { entries })
    }

    /// Names and shapes of every parameter tensor, in [`Model::params`] order.
    pub fn param_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let trace = self.shape_trace()?;
        let mut out = Vec::new();
        let mut channels = self.channels;
        for (i, block) in self.conv_blocks.iter().enumerate() {
            let n = i + 1;
            out.push((
                format!("conv{n}.kernels"),
                vec![block.kernel, block.kernel, channels, block.filters],
            ));
            out.push((format!("conv{n}.bias"), vec![block.filters]));
            channels = block.filters;
        }
        let widths = trace.dense_widths();
        for (i, pair) in widths.windows(2).enumerate() {
            let name = if i + 2 == widths.len() { "output".to_string() } else { format!("fc{}", i + 1) };
            out.push((format!("{name}.weights"), vec![pair[0], pair[1]]));
            out.push((format!("{name}.bias"), vec![pair[1]]));
        }
        Ok(out)
    }

    /// True when both configs produce the same layer stack and parameter shapes.
    pub fn same_architecture(&self, other: &ModelConfig) -> bool {
        self.input_size == other.input_size
            && self.channels == other.channels
            && self.conv_blocks == other.conv_blocks
            && self.fc_widths == other.fc_widths
            && self.num_classes == other.num_classes
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEntry {
    pub name: String,
    pub kind: LayerKind,
    pub input: Vec<usize>,
    pub output: Vec<usize>,
}

/// Per-layer input and output extents, computed when the model is built.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeTrace {
    pub entries: Vec<TraceEntry>,
}

impl ShapeTrace {
    /// Spatial side length at the input and after every conv and pool.
    pub fn spatial_extents(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for e in &self.entries {
            if out.is_empty() && e.input.len() == 3 {
                out.push(e.input[0]);
            }
            if matches!(e.kind, LayerKind::Conv2d | LayerKind::MaxPool) {
                out.push(e.output[0]);
            }
        }
        out
    }

    pub fn flatten_size(&self) -> Option<usize> {
        self.entries
            .iter()
            .find(|e| e.kind == LayerKind::Flatten)
            .map(|e| e.output[0])
    }

    /// Widths of the flatten output and every dense layer.
    pub fn dense_widths(&self) -> Vec<usize> {
        self.entries
            .iter()
            .filter(|e| matches!(e.kind, LayerKind::Flatten | LayerKind::Dense))
            .map(|e| e.output[0])
            .collect()
    }
}

fn dims(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

impl fmt::Display for ShapeTrace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:<15} {:>16} {:>16}", "layer", "kind", "input", "output")?;
        for e in &self.entries {
            writeln!(
                f,
                "{:<10} {:<15} {:>16} {:>16}",
                e.name,
                e.kind.as_str(),
                dims(&e.input),
                dims(&e.output)
            )?;
        }
        Ok(())
    }
}

/// Class indices and probability rows for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T> {
    pub classes: Vec<usize>,
    pub probs: Tensor<T>,
}

/// Index of the largest entry; ties go to the lower index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub struct Model<T> {
    config: ModelConfig,
    names: Vec<String>,
    layers: Vec<Layer<T>>,
    head: SoftmaxOutput<T>,
    trace: ShapeTrace,
}

impl<T> fmt::Debug for Model<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("layers", &self.names)
            .finish_non_exhaustive()
    }
}

impl<T: Scalar> Model<T> {
    /// Builds the stack and draws He-normal weights from `config.seed`.
    pub fn build(config: &ModelConfig) -> Result<Self> {
        let trace = config.shape_trace()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let dropout = DropoutSpec::new(config.dropout_rate)?;

        let mut names = Vec::new();
        let mut layers = Vec::new();
        let mut channels = config.channels;
        for (i, block) in config.conv_blocks.iter().enumerate() {
            let n = i + 1;
            let geom = ConvGeometry::new(block.kernel, block.padding, channels, block.filters)?;
            names.extend([format!("conv{n}"), format!("relu{n}"), format!("pool{n}")]);
            layers.push(Layer::Conv2d(Conv2d::new(&format!("conv{n}"), geom, &mut rng)));
            layers.push(Layer::relu());
            layers.push(Layer::maxpool());
            channels = block.filters;
        }
        names.push("flatten".into());
        layers.push(Layer::flatten());
        let mut width = trace.flatten_size().expect("trace always contains flatten");
        for (i, &w) in config.fc_widths.iter().enumerate() {
            let n = i + 1;
            names.extend([format!("fc{n}"), format!("fc{n}_relu"), format!("fc{n}_dropout")]);
            layers.push(Layer::Dense(Dense::new(&format!("fc{n}"), width, w, &mut rng)));
            layers.push(Layer::relu());
            layers.push(Layer::dropout(dropout));
            width = w;
        }
        names.push("output".into());
        layers.push(Layer::Dense(Dense::new("output", width, config.num_classes, &mut rng)));

        Ok(Model {
            config: config.clone(),
            names,
            layers,
            head: SoftmaxOutput::new(),
            trace,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn trace(&self) -> &ShapeTrace {
        &self.trace
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layer_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    /// Replaces every parameter, checking names and shapes.
    pub fn set_params(&mut self, values: Vec<(String, Tensor<T>)>) -> Result<()> {
        let current = self.params();
        if current.len() != values.len() {
            return Err(Error::config(format!(
                "model has {} parameter tensors, {} supplied",
                current.len(),
                values.len()
            )));
        }
        for (p, (name, v)) in current.iter().zip(&values) {
            if &p.name != name || p.value.shape() != v.shape() {
                return Err(Error::config(format!(
                    "parameter {} {:?} cannot take {} {:?}",
                    p.name,
                    p.value.shape(),
                    name,
                    v.shape()
                )));
            }
        }
        for (p, (_, v)) in self.params_mut().into_iter().zip(values) {
            p.value = v;
        }
        Ok(())
    }

    fn check_batch(&self, batch: &Tensor<T>) -> Result<()> {
        let expected = self.config.sample_shape();
        if batch.ndim() != 4 || batch.shape()[1..] != expected {
            return Err(Error::data(format!(
                "batch shape {:?} does not match B×{}×{}×{}",
                batch.shape(),
                expected[0],
                expected[1],
                expected[2]
            )));
        }
        Ok(())
    }

    /// Runs the stack up to the logits, retaining caches for `backward`.
    pub fn logits<R: Rng + ?Sized>(&mut self, batch: &Tensor<T>, mode: Mode, rng: &mut R) -> Result<Tensor<T>> {
        self.check_batch(batch)?;
        let mut x = batch.clone();
        for layer in &mut self.layers {
            x = layer.forward(&x, mode, rng)?;
        }
        Ok(x)
    }

    /// Class probabilities, one row per image.
    pub fn forward<R: Rng + ?Sized>(&mut self, batch: &Tensor<T>, mode: Mode, rng: &mut R) -> Result<Tensor<T>> {
        let z = self.logits(batch, mode, rng)?;
        crate::layers::softmax(&z)
    }

    /// Evaluation-mode probabilities without touching any layer state.
    pub fn infer(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_batch(batch)?;
        let mut x = batch.clone();
        for layer in &self.layers {
            x = layer.infer(&x)?;
        }
        crate::layers::softmax(&x)
    }

    pub fn predict(&self, batch: &Tensor<T>) -> Result<Prediction<T>> {
        let probs = self.infer(batch)?;
        let k = self.config.num_classes;
        let classes = probs.data().chunks(k).map(argmax).collect();
        Ok(Prediction { classes, probs })
    }

    /// Train-mode forward and full backward pass. Gradients are aligned with
    /// [`Model::params`].
    pub fn loss_and_gradients<R: Rng + ?Sized>(
        &mut self,
        batch: &Tensor<T>,
        labels: &[usize],
        rng: &mut R,
    ) -> Result<(SoftmaxLoss<T>, Vec<Tensor<T>>)> {
        self.loss_and_gradients_in(batch, labels, Mode::Train, rng)
    }

    pub fn loss_and_gradients_in<R: Rng + ?Sized>(
        &mut self,
        batch: &Tensor<T>,
        labels: &[usize],
        mode: Mode,
        rng: &mut R,
    ) -> Result<(SoftmaxLoss<T>, Vec<Tensor<T>>)> {
        let z = match self.logits(batch, mode, rng) {
            Ok(z) => z,
            Err(e) => {
                self.clear_caches();
                return Err(e);
            }
        };
        let out = self.head.forward(&z, labels)?;
        let mut grad = self.head.backward()?;
        let mut per_layer = Vec::with_capacity(self.layers.len());
        for layer in self.layers.iter_mut().rev() {
            let (g, pg) = layer.backward(&grad)?;
            grad = g;
            per_layer.push(pg);
        }
        per_layer.reverse();
        Ok((out, per_layer.into_iter().flatten().collect()))
    }

    pub fn clear_caches(&mut self) {
        for layer in &mut self.layers {
            layer.clear_cache();
        }
    }
}

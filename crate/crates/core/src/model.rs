//! Sequential networks: layer definitions, shape tracing, the forward pass and
//! the adjacency between a prunable layer and the layer that consumes its
//! outputs.

mod io;

pub use io::{from_bytes, load, read_from, save, to_bytes, write_to, FORMAT_VERSION, MAGIC};

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{self, Tensor};

/// Fully connected layer, `weights` is `(filters, inputs)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weights: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn new(weights: Tensor, bias: Tensor) -> Result<Self> {
        if weights.rank() != 2 || bias.rank() != 1 || weights.shape()[0] != bias.shape()[0] {
            return Err(Error::Dimension(format!(
                "dense weights {:?} and bias {:?} disagree",
                weights.shape(),
                bias.shape()
            )));
        }
        Ok(Dense { weights, bias })
    }

    pub fn filters(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn inputs(&self) -> usize {
        self.weights.shape()[1]
    }
}

/// Convolution layer, `weights` is `(in_channels, filters, kh, kw)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weights: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(weights: Tensor, bias: Tensor, stride: usize, padding: usize) -> Result<Self> {
        if weights.rank() != 4 || bias.rank() != 1 || weights.shape()[1] != bias.shape()[0] {
            return Err(Error::Dimension(format!(
                "conv2d weights {:?} and bias {:?} disagree",
                weights.shape(),
                bias.shape()
            )));
        }
        if stride == 0 {
            return Err(Error::Dimension("conv2d stride must be positive".into()));
        }
        Ok(Conv2d {
            weights,
            bias,
            stride,
            padding,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn filters(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weights.shape()[2], self.weights.shape()[3])
    }

    /// The `(kh, kw)` kernel of `filter` acting on input `channel`.
    pub fn kernel_slice(&self, channel: usize, filter: usize) -> &[f32] {
        let (kh, kw) = self.kernel();
        let start = (channel * self.filters() + filter) * kh * kw;
        &self.weights.data()[start..start + kh * kw]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Dense(Dense),
    Conv2d(Conv2d),
    Relu,
    MaxPool2d { window: usize, stride: usize },
    Flatten,
    Softmax,
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Conv2d(_) => "conv2d",
            Layer::Relu => "relu",
            Layer::MaxPool2d { .. } => "maxpool2d",
            Layer::Flatten => "flatten",
            Layer::Softmax => "softmax",
        }
    }

    pub fn is_parameterized(&self) -> bool {
        matches!(self, Layer::Dense(_) | Layer::Conv2d(_))
    }

    /// Number of filters of a parameterized layer.
    pub fn filters(&self) -> Option<usize> {
        match self {
            Layer::Dense(d) => Some(d.filters()),
            Layer::Conv2d(c) => Some(c.filters()),
            _ => None,
        }
    }

    fn output_shape(&self, input: &[usize]) -> std::result::Result<Vec<usize>, String> {
        match self {
            Layer::Dense(d) => {
                if input != [d.inputs()] {
                    return Err(format!("dense layer expects input [{}], got {:?}", d.inputs(), input));
                }
                Ok(vec![d.filters()])
            }
            Layer::Conv2d(c) => {
                if input.len() != 3 || input[0] != c.in_channels() {
                    return Err(format!(
                        "conv2d layer expects ({}, H, W) input, got {:?}",
                        c.in_channels(),
                        input
                    ));
                }
                let (kh, kw) = c.kernel();
                match (
                    numerics::window_output_len(input[1], kh, c.stride, c.padding),
                    numerics::window_output_len(input[2], kw, c.stride, c.padding),
                ) {
                    (Some(h), Some(w)) => Ok(vec![c.filters(), h, w]),
                    _ => Err(format!("kernel {kh}x{kw} does not fit input {input:?}")),
                }
            }
            Layer::MaxPool2d { window, stride } => {
                if input.len() != 3 {
                    return Err(format!("maxpool2d expects (c, H, W) input, got {input:?}"));
                }
                match (
                    numerics::window_output_len(input[1], *window, *stride, 0),
                    numerics::window_output_len(input[2], *window, *stride, 0),
                ) {
                    (Some(h), Some(w)) => Ok(vec![input[0], h, w]),
                    _ => Err(format!("pool window {window}/{stride} does not fit input {input:?}")),
                }
            }
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::Relu => Ok(input.to_vec()),
            Layer::Softmax => {
                if input.len() != 1 {
                    return Err(format!("softmax expects a vector, got {input:?}"));
                }
                Ok(input.to_vec())
            }
        }
    }

    /// Applies the layer to one sample.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Dense(d) => {
                if input.shape() != [d.inputs()] {
                    return Err(Error::Dimension(format!(
                        "dense layer expects input [{}], got {:?}",
                        d.inputs(),
                        input.shape()
                    )));
                }
                let out = (0..d.filters())
                    .map(|i| {
                        (numerics::dot(d.weights.row(i), input.data()) + f64::from(d.bias.data()[i])) as f32
                    })
                    .collect();
                Tensor::new(vec![d.filters()], out)
            }
            Layer::Conv2d(c) => numerics::conv2d_forward(input, &c.weights, &c.bias, c.stride, c.padding),
            Layer::Relu => Tensor::new(
                input.shape().to_vec(),
                input.data().iter().map(|&v| v.max(0.0)).collect(),
            ),
            Layer::MaxPool2d { window, stride } => numerics::maxpool2d_forward(input, *window, *stride),
            Layer::Flatten => input.clone().reshape(vec![input.len()]),
            Layer::Softmax => {
                if input.rank() != 1 {
                    return Err(Error::Dimension(format!(
                        "softmax expects a vector, got {:?}",
                        input.shape()
                    )));
                }
                Ok(Tensor::vector(&softmax(input.data())))
            }
        }
    }
}

/// Numerically stable softmax computed in `f64`.
pub fn softmax(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(f64::from(v)));
    let exps: Vec<f64> = logits.iter().map(|&v| (f64::from(v) - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| (e / sum) as f32).collect()
}

/// Where the outputs of a prunable layer's filters land in the next
/// parameterized layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Adjacency {
    /// Filter `i` feeds column `i` of the next dense layer.
    DenseColumn,
    /// Filter `i` feeds input channel `i` of the next conv layer.
    ConvInChannel,
    /// Filter `i` (a conv channel) is flattened into columns
    /// `i*block .. (i+1)*block` of the next dense layer.
    DenseColumnBlock { block: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PrunableUnit {
    pub layer_index: usize,
    /// Index of the parameterized layer consuming this layer's outputs.
    pub next_index: usize,
    pub adjacency: Adjacency,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
}

impl Network {
    /// Builds a network, checking that every layer accepts its predecessor's
    /// output shape.
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        if input_shape.is_empty() || input_shape.len() > numerics::MAX_RANK {
            return Err(Error::Dimension(format!("invalid input shape {input_shape:?}")));
        }
        let net = Network { input_shape, layers };
        net.shapes()?;
        Ok(net)
    }

    /// ReLU multilayer perceptron with a softmax head, e.g. `[784, 500, 300, 10]`.
    ///
    /// Weights and biases are drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn mlp(arch: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if arch.len() < 2 || arch.contains(&0) {
            return Err(Error::Config(format!(
                "an architecture needs at least two positive widths, got {arch:?}"
            )));
        }
        let mut layers = Vec::new();
        for (i, pair) in arch.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = 1.0 / (fan_in as f32).sqrt();
            let weights = Tensor::from_fn(&[fan_out, fan_in], |_| rng.gen_range(-bound..bound))?;
            let bias = Tensor::from_fn(&[fan_out], |_| rng.gen_range(-bound..bound))?;
            layers.push(Layer::Dense(Dense::new(weights, bias)?));
            if i + 2 < arch.len() {
                layers.push(Layer::Relu);
            }
        }
        layers.push(Layer::Softmax);
        Network::new(vec![arch[0]], layers)
    }

    /// VGG-16 (configuration D) on `3 × 224 × 224` inputs with zero weights.
    /// Only useful for size and cost accounting.
    pub fn vgg16(classes: usize) -> Result<Self> {
        const BLOCKS: [&[usize]; 5] = [&[64, 64], &[128, 128], &[256, 256, 256], &[512, 512, 512], &[512, 512, 512]];
        let mut layers = Vec::new();
        let mut channels = 3;
        for block in BLOCKS {
            for &filters in block {
                let conv = Conv2d::new(Tensor::zeros(&[channels, filters, 3, 3])?, Tensor::zeros(&[filters])?, 1, 1)?;
                layers.extend([Layer::Conv2d(conv), Layer::Relu]);
                channels = filters;
            }
            layers.push(Layer::MaxPool2d { window: 2, stride: 2 });
        }
        layers.push(Layer::Flatten);
        let widths = [512 * 7 * 7, 4096, 4096, classes];
        for (i, pair) in widths.windows(2).enumerate() {
            let dense = Dense::new(Tensor::zeros(&[pair[1], pair[0]])?, Tensor::zeros(&[pair[1]])?)?;
            layers.push(Layer::Dense(dense));
            if i + 2 < widths.len() {
                layers.push(Layer::Relu);
            }
        }
        layers.push(Layer::Softmax);
        Network::new(vec![3, 224, 224], layers)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, index: usize) -> &Layer {
        &self.layers[index]
    }

    pub fn into_parts(self) -> (Vec<usize>, Vec<Layer>) {
        (self.input_shape, self.layers)
    }

    /// Mutable parameter access for in-place training. Shapes must not change.
    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Output shape of every layer for a single sample.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut current = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            current = layer.output_shape(&current).map_err(|m| Error::at_layer(i, m))?;
            out.push(current.clone());
        }
        Ok(out)
    }

    /// Input shape seen by layer `index`.
    pub fn input_shape_of(&self, index: usize) -> Result<Vec<usize>> {
        if index == 0 {
            return Ok(self.input_shape.clone());
        }
        Ok(self.shapes()?[index - 1].clone())
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self.shapes()?.pop().unwrap_or_else(|| self.input_shape.clone()))
    }

    pub fn parameterized_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_parameterized())
            .map(|(i, _)| i)
            .collect()
    }

    /// Filter count of each parameterized layer, in order.
    pub fn widths(&self) -> Vec<usize> {
        self.layers.iter().filter_map(Layer::filters).collect()
    }

    /// Architecture string such as `784-100-60-10` (input width followed by
    /// filter counts).
    pub fn arch_string(&self) -> String {
        std::iter::once(self.input_shape.iter().product::<usize>())
            .chain(self.widths())
            .map(|w| w.to_string())
            .collect::<Vec<_>>()
            .join("-")
    }

    pub fn is_dense_only(&self) -> bool {
        self.layers
            .iter()
            .all(|l| matches!(l, Layer::Dense(_) | Layer::Relu | Layer::Flatten | Layer::Softmax))
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        if input.shape() != self.input_shape.as_slice() {
            return Err(Error::Dimension(format!(
                "network expects input {:?}, got {:?}",
                self.input_shape,
                input.shape()
            )));
        }
        let mut current = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            current = layer
                .forward(&current)
                .map_err(|e| Error::at_layer(i, e.to_string()))?;
        }
        Ok(current)
    }

    /// Every parameterized layer except the last, with the adjacency to its
    /// consumer.
    pub fn prunable_units(&self) -> Result<Vec<PrunableUnit>> {
        let shapes = self.shapes()?;
        let params = self.parameterized_indices();
        let mut units = Vec::with_capacity(params.len().saturating_sub(1));
        for pair in params.windows(2) {
            let (from, to) = (pair[0], pair[1]);
            let mut flatten_input: Option<&[usize]> = None;
            for between in from + 1..to {
                match &self.layers[between] {
                    Layer::Relu | Layer::MaxPool2d { .. } => {}
                    Layer::Flatten => {
                        let before = &shapes[between - 1];
                        if flatten_input.is_none() && before.len() > 1 {
                            flatten_input = Some(before);
                        }
                    }
                    other => {
                        return Err(Error::UnsupportedTopology(format!(
                            "layer {between} ({}) sits between parameterized layers {from} and {to}",
                            other.kind()
                        )))
                    }
                }
            }
            let adjacency = match (&self.layers[from], &self.layers[to]) {
                (Layer::Dense(_), Layer::Dense(_)) => Adjacency::DenseColumn,
                (Layer::Conv2d(_), Layer::Conv2d(_)) => Adjacency::ConvInChannel,
                (Layer::Conv2d(_), Layer::Dense(_)) => match flatten_input {
                    Some(shape) => Adjacency::DenseColumnBlock {
                        block: shape[1..].iter().product(),
                    },
                    None => {
                        return Err(Error::UnsupportedTopology(format!(
                            "conv layer {from} feeds dense layer {to} without a flatten"
                        )))
                    }
                },
                (a, b) => {
                    return Err(Error::UnsupportedTopology(format!(
                        "{} layer {from} feeding {} layer {to}",
                        a.kind(),
                        b.kind()
                    )))
                }
            };
            units.push(PrunableUnit {
                layer_index: from,
                next_index: to,
                adjacency,
            });
        }
        Ok(units)
    }
}

/// Parses `"784-500-300-10"` into layer widths.
pub fn parse_arch(text: &str) -> Result<Vec<usize>> {
    let widths = text
        .split('-')
        .map(|part| {
            part.trim()
                .parse::<usize>()
                .ok()
                .filter(|&w| w > 0)
                .ok_or_else(|| Error::Config(format!("invalid architecture {text:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if widths.len() < 2 {
        return Err(Error::Config(format!(
            "architecture {text:?} needs at least an input and an output width"
        )));
    }
    Ok(widths)
}

//! Architecture intermediate representation shared by the agents, the
//! profiler and code generation.

pub mod candidate;
pub mod space;

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::Task;

pub use candidate::{parse_candidates, parse_layer_sequence, CandidateParse, RejectedCandidate};
pub use space::{default_space, parse_search_space, SearchSpace, SpaceError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LayerKind {
    Conv1D,
    DepthwiseConv1D,
    SeparableConv1D,
    #[serde(rename = "LSTM")]
    Lstm,
    Dense,
    MaxPool1D,
    AvgPool1D,
    GlobalAvgPool1D,
    BatchNorm,
    Dropout,
    Flatten,
}

pub const ALL_KINDS: [LayerKind; 11] = [
    LayerKind::Conv1D,
    LayerKind::DepthwiseConv1D,
    LayerKind::SeparableConv1D,
    LayerKind::Lstm,
    LayerKind::Dense,
    LayerKind::MaxPool1D,
    LayerKind::AvgPool1D,
    LayerKind::GlobalAvgPool1D,
    LayerKind::BatchNorm,
    LayerKind::Dropout,
    LayerKind::Flatten,
];

fn normalize_name(s: &str) -> String {
    s.chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .map(|c| c.to_ascii_lowercase())
        .collect()
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv1D => "Conv1D",
            LayerKind::DepthwiseConv1D => "DepthwiseConv1D",
            LayerKind::SeparableConv1D => "SeparableConv1D",
            LayerKind::Lstm => "LSTM",
            LayerKind::Dense => "Dense",
            LayerKind::MaxPool1D => "MaxPool1D",
            LayerKind::AvgPool1D => "AvgPool1D",
            LayerKind::GlobalAvgPool1D => "GlobalAvgPool1D",
            LayerKind::BatchNorm => "BatchNorm",
            LayerKind::Dropout => "Dropout",
            LayerKind::Flatten => "Flatten",
        }
    }

    /// Lenient lookup that accepts the Keras spellings.
    pub fn from_name(s: &str) -> Option<LayerKind> {
        Some(match normalize_name(s).as_str() {
            "conv1d" | "convolution1d" | "conv" => LayerKind::Conv1D,
            "depthwiseconv1d" | "depthwiseconvolution1d" | "depthwiseconv" => LayerKind::DepthwiseConv1D,
            "separableconv1d" | "separableconvolution1d" | "separableconv" => LayerKind::SeparableConv1D,
            "lstm" => LayerKind::Lstm,
            "dense" | "fullyconnected" | "linear" => LayerKind::Dense,
            "maxpool1d" | "maxpooling1d" | "maxpool" | "maxpooling" => LayerKind::MaxPool1D,
            "avgpool1d" | "averagepooling1d" | "avgpooling1d" | "averagepool1d" | "avgpool" | "averagepooling" => {
                LayerKind::AvgPool1D
            }
            "globalavgpool1d" | "globalaveragepooling1d" | "globalaveragepool1d" | "globalavgpooling1d" => {
                LayerKind::GlobalAvgPool1D
            }
            "batchnorm" | "batchnormalization" => LayerKind::BatchNorm,
            "dropout" => LayerKind::Dropout,
            "flatten" => LayerKind::Flatten,
            _ => return None,
        })
    }

    /// Layers that read a time axis.
    pub fn needs_time_axis(self) -> bool {
        matches!(
            self,
            LayerKind::Conv1D
                | LayerKind::DepthwiseConv1D
                | LayerKind::SeparableConv1D
                | LayerKind::Lstm
                | LayerKind::MaxPool1D
                | LayerKind::AvgPool1D
                | LayerKind::GlobalAvgPool1D
        )
    }

    pub fn is_pool(self) -> bool {
        matches!(self, LayerKind::MaxPool1D | LayerKind::AvgPool1D)
    }

    pub fn has_units(self) -> bool {
        matches!(
            self,
            LayerKind::Conv1D | LayerKind::SeparableConv1D | LayerKind::Lstm | LayerKind::Dense
        )
    }

    pub fn has_kernel(self) -> bool {
        matches!(
            self,
            LayerKind::Conv1D
                | LayerKind::DepthwiseConv1D
                | LayerKind::SeparableConv1D
                | LayerKind::MaxPool1D
                | LayerKind::AvgPool1D
        )
    }

    pub fn has_activation(self) -> bool {
        matches!(
            self,
            LayerKind::Conv1D
                | LayerKind::DepthwiseConv1D
                | LayerKind::SeparableConv1D
                | LayerKind::Lstm
                | LayerKind::Dense
        )
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    #[default]
    Valid,
    Same,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    None,
    Relu,
    Tanh,
    Sigmoid,
    Softmax,
    Linear,
}

impl Activation {
    pub fn from_name(s: &str) -> Option<Activation> {
        Some(match normalize_name(s).as_str() {
            "" | "none" | "null" => Activation::None,
            "relu" => Activation::Relu,
            "tanh" => Activation::Tanh,
            "sigmoid" => Activation::Sigmoid,
            "softmax" => Activation::Softmax,
            "linear" | "identity" => Activation::Linear,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::None => "none",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
            Activation::Softmax => "softmax",
            Activation::Linear => "linear",
        }
    }
}

/// One layer. `units` doubles as the filter count of convolutions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    #[serde(default, alias = "filters", skip_serializing_if = "Option::is_none")]
    pub units: Option<usize>,
    #[serde(default, alias = "pool_size", skip_serializing_if = "Option::is_none")]
    pub kernel_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strides: Option<usize>,
    #[serde(default)]
    pub padding: Padding,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub return_sequences: Option<bool>,
}

impl LayerSpec {
    pub fn new(kind: LayerKind) -> LayerSpec {
        LayerSpec {
            kind,
            units: None,
            kernel_size: None,
            strides: None,
            padding: Padding::Valid,
            activation: Activation::None,
            rate: None,
            return_sequences: None,
        }
    }

    pub fn conv1d(filters: usize, kernel: usize) -> LayerSpec {
        LayerSpec {
            units: Some(filters),
            kernel_size: Some(kernel),
            ..LayerSpec::new(LayerKind::Conv1D)
        }
    }

    pub fn depthwise(kernel: usize) -> LayerSpec {
        LayerSpec {
            kernel_size: Some(kernel),
            ..LayerSpec::new(LayerKind::DepthwiseConv1D)
        }
    }

    pub fn separable(filters: usize, kernel: usize) -> LayerSpec {
        LayerSpec {
            units: Some(filters),
            kernel_size: Some(kernel),
            ..LayerSpec::new(LayerKind::SeparableConv1D)
        }
    }

    pub fn lstm(units: usize, return_sequences: bool) -> LayerSpec {
        LayerSpec {
            units: Some(units),
            activation: Activation::Tanh,
            return_sequences: Some(return_sequences),
            ..LayerSpec::new(LayerKind::Lstm)
        }
    }

    pub fn dense(units: usize, activation: Activation) -> LayerSpec {
        LayerSpec {
            units: Some(units),
            activation,
            ..LayerSpec::new(LayerKind::Dense)
        }
    }

    pub fn max_pool(size: usize) -> LayerSpec {
        LayerSpec {
            kernel_size: Some(size),
            ..LayerSpec::new(LayerKind::MaxPool1D)
        }
    }

    pub fn avg_pool(size: usize) -> LayerSpec {
        LayerSpec {
            kernel_size: Some(size),
            ..LayerSpec::new(LayerKind::AvgPool1D)
        }
    }

    pub fn dropout(rate: f64) -> LayerSpec {
        LayerSpec {
            rate: Some(rate),
            ..LayerSpec::new(LayerKind::Dropout)
        }
    }

    pub fn with_activation(mut self, a: Activation) -> Self {
        self.activation = a;
        self
    }

    pub fn with_strides(mut self, s: usize) -> Self {
        self.strides = Some(s);
        self
    }

    pub fn with_padding(mut self, p: Padding) -> Self {
        self.padding = p;
        self
    }

    pub fn with_rate(mut self, r: f64) -> Self {
        self.rate = Some(r);
        self
    }

    /// Stride in effect: explicit, else the pool size for pools, else 1.
    pub fn effective_strides(&self) -> usize {
        match self.strides {
            Some(s) => s,
            None if self.kind.is_pool() => self.kernel_size.unwrap_or(1),
            None => 1,
        }
    }

    /// Fills defaults and clears fields the kind does not use, so equal
    /// layers serialize identically.
    pub fn normalized(&self) -> LayerSpec {
        let k = self.kind;
        let mut l = self.clone();
        if !k.has_units() {
            l.units = None;
        }
        if !k.has_kernel() {
            l.kernel_size = None;
        }
        l.strides = if k.has_kernel() {
            Some(self.effective_strides())
        } else {
            None
        };
        if !k.has_kernel() {
            l.padding = Padding::Valid;
        }
        if !k.has_activation() {
            l.activation = Activation::None;
        }
        if !matches!(k, LayerKind::Dropout | LayerKind::Lstm) {
            l.rate = None;
        }
        l.return_sequences = match k {
            LayerKind::Lstm => Some(self.return_sequences.unwrap_or(false)),
            _ => None,
        };
        l
    }
}

/// Activation tensor shape. Collapsed shapes have no time axis and report
/// `len == 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub len: usize,
    pub channels: usize,
    pub temporal: bool,
}

impl Shape {
    pub fn sequence(len: usize, channels: usize) -> Shape {
        Shape {
            len,
            channels,
            temporal: true,
        }
    }

    pub fn flat(features: usize) -> Shape {
        Shape {
            len: 1,
            channels: features,
            temporal: false,
        }
    }

    pub fn elements(&self) -> usize {
        self.len * self.channels
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.temporal {
            write!(f, "({}, {})", self.len, self.channels)
        } else {
            write!(f, "({})", self.channels)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum ShapeError {
    #[error("layer {layer}: kernel {kernel} with stride {stride} underflows input length {in_len}")]
    ShapeUnderflow {
        layer: usize,
        in_len: usize,
        kernel: usize,
        stride: usize,
    },
    #[error("layer {layer}: {kind} needs a time axis but its input was already collapsed")]
    TimeAxisConsumed { layer: usize, kind: LayerKind },
    #[error("layer {layer}: {kind} is missing {field}")]
    MissingField {
        layer: usize,
        kind: LayerKind,
        field: &'static str,
    },
    #[error("layer {layer}: {field} must be positive")]
    ZeroField { layer: usize, field: &'static str },
}

/// Input and output shape of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub index: usize,
    pub input: Shape,
    pub output: Shape,
}

/// Output length of a sliding window op.
pub fn window_out_len(in_len: usize, kernel: usize, stride: usize, padding: Padding) -> Option<usize> {
    match padding {
        Padding::Valid => (in_len >= kernel).then(|| (in_len - kernel) / stride + 1),
        Padding::Same => Some(in_len.div_ceil(stride)),
    }
}

fn required(layer: usize, spec: &LayerSpec, field: &'static str, v: Option<usize>) -> Result<usize, ShapeError> {
    match v {
        None => Err(ShapeError::MissingField {
            layer,
            kind: spec.kind,
            field,
        }),
        Some(0) => Err(ShapeError::ZeroField { layer, field }),
        Some(x) => Ok(x),
    }
}

/// Output shape of one layer given its input.
pub fn layer_output(index: usize, spec: &LayerSpec, input: Shape) -> Result<Shape, ShapeError> {
    let kind = spec.kind;
    if kind.needs_time_axis() && !input.temporal {
        return Err(ShapeError::TimeAxisConsumed { layer: index, kind });
    }
    let windowed = |kernel: usize| -> Result<usize, ShapeError> {
        let stride = spec.effective_strides();
        if stride == 0 {
            return Err(ShapeError::ZeroField {
                layer: index,
                field: "strides",
            });
        }
        match window_out_len(input.len, kernel, stride, spec.padding) {
            Some(n) if n >= 1 => Ok(n),
            _ => Err(ShapeError::ShapeUnderflow {
                layer: index,
                in_len: input.len,
                kernel,
                stride,
            }),
        }
    };
    Ok(match kind {
        LayerKind::Conv1D | LayerKind::SeparableConv1D => {
            let f = required(index, spec, "filters", spec.units)?;
            let k = required(index, spec, "kernel_size", spec.kernel_size)?;
            Shape::sequence(windowed(k)?, f)
        }
        LayerKind::DepthwiseConv1D => {
            let k = required(index, spec, "kernel_size", spec.kernel_size)?;
            Shape::sequence(windowed(k)?, input.channels)
        }
        LayerKind::MaxPool1D | LayerKind::AvgPool1D => {
            let k = required(index, spec, "pool_size", spec.kernel_size)?;
            Shape::sequence(windowed(k)?, input.channels)
        }
        LayerKind::Lstm => {
            let u = required(index, spec, "units", spec.units)?;
            if spec.return_sequences.unwrap_or(false) {
                Shape::sequence(input.len, u)
            } else {
                Shape::flat(u)
            }
        }
        LayerKind::Dense => Shape::flat(required(index, spec, "units", spec.units)?),
        LayerKind::GlobalAvgPool1D => Shape::flat(input.channels),
        LayerKind::Flatten => Shape::flat(input.elements()),
        LayerKind::BatchNorm | LayerKind::Dropout => input,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureIR {
    pub id: String,
    pub layers: Vec<LayerSpec>,
    pub input_shape: (usize, usize),
    pub output_units: usize,
    pub task: Task,
}

#[derive(Serialize)]
struct HashView<'a> {
    layers: &'a [LayerSpec],
    input_shape: (usize, usize),
    output_units: usize,
    task: Task,
}

impl ArchitectureIR {
    /// Builds an IR with normalized layers and a content-hash id.
    pub fn new(layers: Vec<LayerSpec>, input_shape: (usize, usize), output_units: usize, task: Task) -> Self {
        let layers = layers.iter().map(LayerSpec::normalized).collect();
        let mut arch = ArchitectureIR {
            id: String::new(),
            layers,
            input_shape,
            output_units,
            task,
        };
        arch.id = arch.content_hash();
        arch
    }

    pub fn input(&self) -> Shape {
        Shape::sequence(self.input_shape.0, self.input_shape.1)
    }

    /// SHA-256 over the canonical JSON of everything but the id.
    pub fn content_hash(&self) -> String {
        let view = HashView {
            layers: &self.layers,
            input_shape: self.input_shape,
            output_units: self.output_units,
            task: self.task,
        };
        let canonical = canonical_json(&serde_json::to_value(view).expect("ir serializes"));
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    /// Sorted-key JSON of the whole IR.
    pub fn to_canonical_json(&self) -> String {
        canonical_json(&serde_json::to_value(self).expect("ir serializes"))
    }

    pub fn from_json(text: &str) -> Result<ArchitectureIR, serde_json::Error> {
        #[derive(Deserialize)]
        struct Raw {
            layers: Vec<LayerSpec>,
            input_shape: (usize, usize),
            output_units: usize,
            task: Task,
        }
        let raw: Raw = serde_json::from_str(text)?;
        Ok(ArchitectureIR::new(raw.layers, raw.input_shape, raw.output_units, raw.task))
    }

    pub fn short_id(&self) -> &str {
        &self.id[..self.id.len().min(12)]
    }
}

/// Serializes with object keys sorted at every level.
pub fn canonical_json(v: &serde_json::Value) -> String {
    use serde_json::Value;
    fn sort(v: &Value) -> Value {
        match v {
            Value::Object(m) => {
                let sorted: std::collections::BTreeMap<&String, Value> = m.iter().map(|(k, v)| (k, sort(v))).collect();
                Value::Object(sorted.into_iter().map(|(k, v)| (k.clone(), v)).collect())
            }
            Value::Array(a) => Value::Array(a.iter().map(sort).collect()),
            other => other.clone(),
        }
    }
    serde_json::to_string(&sort(v)).expect("value serializes")
}

/// Shapes for every layer, in order.
pub fn infer_shapes(arch: &ArchitectureIR) -> Result<Vec<LayerShape>, ShapeError> {
    let mut shape = arch.input();
    let mut out = Vec::with_capacity(arch.layers.len());
    for (i, spec) in arch.layers.iter().enumerate() {
        let next = layer_output(i, spec, shape)?;
        out.push(LayerShape {
            index: i,
            input: shape,
            output: next,
        });
        shape = next;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub rule: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layer: Option<usize>,
    pub detail: String,
}

impl Violation {
    fn new(rule: &str, layer: Option<usize>, detail: impl Into<String>) -> Violation {
        Violation {
            rule: rule.to_string(),
            layer,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.layer {
            Some(l) => write!(f, "{} (layer {l}): {}", self.rule, self.detail),
            None => write!(f, "{}: {}", self.rule, self.detail),
        }
    }
}

/// Structural checks. Returns every violation found.
pub fn validate(arch: &ArchitectureIR) -> Result<(), Vec<Violation>> {
    let mut v = Vec::new();
    if arch.input_shape.0 == 0 || arch.input_shape.1 == 0 {
        v.push(Violation::new("input shape", None, "seq_length and n_features must be >= 1"));
    }
    if arch.output_units == 0 {
        v.push(Violation::new("head units", None, "output_units must be >= 1"));
    }
    if arch.layers.is_empty() {
        v.push(Violation::new("empty", None, "architecture has no layers"));
        return Err(v);
    }

    for (i, l) in arch.layers.iter().enumerate() {
        if let Some(r) = l.rate {
            if !(0.0..1.0).contains(&r) || r.is_nan() {
                v.push(Violation::new("invalid value", Some(i), format!("rate {r} outside [0, 1)")));
            }
        }
        if l.kind == LayerKind::Dropout && l.rate.is_none() {
            v.push(Violation::new("missing field", Some(i), "Dropout needs rate"));
        }
    }

    let mut shape = arch.input();
    let mut shapes_ok = true;
    for (i, spec) in arch.layers.iter().enumerate() {
        if spec.kind == LayerKind::Dense && shape.temporal {
            v.push(Violation::new(
                "dense on sequence input",
                Some(i),
                format!("Dense receives {shape}; insert Flatten or GlobalAvgPool1D first"),
            ));
        }
        match layer_output(i, spec, shape) {
            Ok(next) => shape = next,
            Err(e) => {
                let rule = match e {
                    ShapeError::ShapeUnderflow { .. } => "shape underflow",
                    ShapeError::TimeAxisConsumed { .. } => "time axis consumed",
                    ShapeError::MissingField { .. } => "missing field",
                    ShapeError::ZeroField { .. } => "invalid value",
                };
                v.push(Violation::new(rule, Some(i), e.to_string()));
                shapes_ok = false;
                break;
            }
        }
    }

    let last_i = arch.layers.len() - 1;
    let last = &arch.layers[last_i];
    if last.kind != LayerKind::Dense {
        v.push(Violation::new("head layer", Some(last_i), format!("last layer is {}, expected Dense", last.kind)));
    } else {
        if last.units != Some(arch.output_units) {
            v.push(Violation::new(
                "head units",
                Some(last_i),
                format!("head has {:?} units, expected {}", last.units, arch.output_units),
            ));
        }
        let ok = match arch.task {
            Task::Classification => last.activation == Activation::Softmax,
            Task::Regression => matches!(last.activation, Activation::Linear | Activation::None),
        };
        if !ok {
            let want = match arch.task {
                Task::Classification => "softmax",
                Task::Regression => "linear",
            };
            v.push(Violation::new(
                "head activation",
                Some(last_i),
                format!("{} head uses {}, expected {want}", arch.task, last.activation.name()),
            ));
        }
    }
    if shapes_ok && shape.temporal {
        v.push(Violation::new("head layer", Some(last_i), format!("model output {shape} still has a time axis")));
    }

    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}

/// The selected UCI-HAR example architecture.
pub fn reference_har_arch(seq_length: usize, n_features: usize, n_classes: usize) -> ArchitectureIR {
    ArchitectureIR::new(
        vec![
            LayerSpec::conv1d(16, 3).with_activation(Activation::Relu).with_strides(1),
            LayerSpec::new(LayerKind::BatchNorm),
            LayerSpec::max_pool(2),
            LayerSpec::depthwise(3).with_activation(Activation::Relu).with_strides(1),
            LayerSpec::new(LayerKind::BatchNorm),
            LayerSpec::avg_pool(2),
            LayerSpec::lstm(32, false).with_rate(0.2),
            LayerSpec::dense(32, Activation::Relu),
            LayerSpec::dense(n_classes, Activation::Softmax),
        ],
        (seq_length, n_features),
        n_classes,
        Task::Classification,
    )
}

/// The selected BIDMC example architecture.
pub fn reference_bidmc_arch(seq_length: usize, n_features: usize) -> ArchitectureIR {
    ArchitectureIR::new(
        vec![
            LayerSpec::conv1d(4, 3).with_activation(Activation::Relu),
            LayerSpec::lstm(4, false).with_rate(0.1),
            LayerSpec::dense(4, Activation::Relu),
            LayerSpec::dense(1, Activation::Linear),
        ],
        (seq_length, n_features),
        1,
        Task::Regression,
    )
}

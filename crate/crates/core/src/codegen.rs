//! Training-script generation from the skeleton templates.
//!
//! A skeleton has one editable region: the body of `get_model()`. Everything
//! before `def get_model():` and from `model = get_model()` on is frozen and
//! covered by a digest, so scripts written elsewhere can be checked against it.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::archir::{Activation, ArchitectureIR, LayerKind, LayerSpec, Padding};
use crate::assets;
use crate::dataset::Task;
use crate::jsonfix;

const DEF_LINE: &str = "def get_model():\n";
const CALL_LINE: &str = "model = get_model()";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodegenError {
    #[error("no fenced code block in the response")]
    NoCodeFence,
    #[error("code block does not define get_model()")]
    MissingGetModel,
    #[error("frozen template regions were modified (expected digest {expected}, got {actual})")]
    TemplateTampered { expected: String, actual: String },
    #[error("unsupported layer: {0}")]
    UnsupportedLayer(String),
    #[error("could not read layer call: {0}")]
    LayerSyntax(String),
}

/// Byte ranges of the three template regions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Regions {
    body_start: usize,
    suffix_start: usize,
}

fn normalize_text(text: &str) -> String {
    let mut s = text.replace("\r\n", "\n");
    let trimmed = s.trim_end().len();
    s.truncate(trimmed);
    s.push('\n');
    s
}

fn regions(text: &str) -> Result<Regions, CodegenError> {
    let def = text.find(DEF_LINE).ok_or(CodegenError::MissingGetModel)?;
    if text[def + DEF_LINE.len()..].contains(DEF_LINE) {
        return Err(CodegenError::MissingGetModel);
    }
    let body_start = def + DEF_LINE.len();
    let call = text[body_start..]
        .find(&format!("\n{CALL_LINE}"))
        .map(|i| body_start + i + 1)
        .ok_or(CodegenError::MissingGetModel)?;
    Ok(Regions {
        body_start,
        suffix_start: call,
    })
}

fn frozen_digest(text: &str, r: Regions) -> String {
    let mut h = Sha256::new();
    h.update(&text.as_bytes()[..r.body_start]);
    h.update([0u8]);
    h.update(&text.as_bytes()[r.suffix_start..]);
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkeletonTemplate {
    pub task: Task,
    pub text: String,
    /// SHA-256 over everything outside the `get_model()` body.
    pub immutable_hash: String,
    regions: Regions,
}

impl SkeletonTemplate {
    pub fn from_text(task: Task, text: &str) -> Result<SkeletonTemplate, CodegenError> {
        let text = normalize_text(text);
        let regions = regions(&text)?;
        Ok(SkeletonTemplate {
            task,
            immutable_hash: frozen_digest(&text, regions),
            text,
            regions,
        })
    }

    pub fn for_task(task: Task) -> SkeletonTemplate {
        let text = match task {
            Task::Classification => assets::CLASSIFICATION_SKELETON,
            Task::Regression => assets::REGRESSION_SKELETON,
        };
        SkeletonTemplate::from_text(task, text).expect("shipped skeletons have one get_model region")
    }

    pub fn prefix(&self) -> &str {
        &self.text[..self.regions.body_start]
    }

    pub fn suffix(&self) -> &str {
        &self.text[self.regions.suffix_start..]
    }

    pub fn placeholder_body(&self) -> &str {
        &self.text[self.regions.body_start..self.regions.suffix_start]
    }
}

/// Digest of the frozen regions of `script`.
pub fn frozen_hash(script: &str) -> Result<String, CodegenError> {
    let text = normalize_text(script);
    let r = regions(&text)?;
    Ok(frozen_digest(&text, r))
}

/// The body of `get_model()` in `script`, without trailing blank lines.
pub fn get_model_body(script: &str) -> Result<String, CodegenError> {
    let text = normalize_text(script);
    let r = regions(&text)?;
    Ok(text[r.body_start..r.suffix_start].trim_end().to_string())
}

fn fmt_f64(v: f64) -> String {
    let s = format!("{v}");
    if s.contains(['.', 'e', 'E']) || s.contains("inf") || s.contains("NaN") {
        s
    } else {
        format!("{s}.0")
    }
}

fn py_activation(a: Activation) -> String {
    match a {
        Activation::None => "None".to_string(),
        other => format!("'{}'", other.name()),
    }
}

fn py_padding(p: Padding) -> &'static str {
    match p {
        Padding::Valid => "'valid'",
        Padding::Same => "'same'",
    }
}

fn py_bool(b: bool) -> &'static str {
    if b {
        "True"
    } else {
        "False"
    }
}

/// Keras class for a layer kind.
pub fn keras_class(kind: LayerKind) -> &'static str {
    match kind {
        LayerKind::Conv1D => "Conv1D",
        LayerKind::DepthwiseConv1D => "DepthwiseConv1D",
        LayerKind::SeparableConv1D => "SeparableConv1D",
        LayerKind::Lstm => "LSTM",
        LayerKind::Dense => "Dense",
        LayerKind::MaxPool1D => "MaxPooling1D",
        LayerKind::AvgPool1D => "AveragePooling1D",
        LayerKind::GlobalAvgPool1D => "GlobalAveragePooling1D",
        LayerKind::BatchNorm => "BatchNormalization",
        LayerKind::Dropout => "Dropout",
        LayerKind::Flatten => "Flatten",
    }
}

/// One `keras.layers.X(...)` expression with every parameter spelled out.
pub fn render_layer(spec: &LayerSpec, first: bool) -> String {
    let l = spec.normalized();
    let mut args: Vec<String> = Vec::new();
    let units = l.units.unwrap_or(0);
    let kernel = l.kernel_size.unwrap_or(0);
    let strides = l.effective_strides();
    match l.kind {
        LayerKind::Conv1D | LayerKind::SeparableConv1D => {
            args.push(format!("filters={units}"));
            args.push(format!("kernel_size={kernel}"));
            args.push(format!("strides={strides}"));
            args.push(format!("padding={}", py_padding(l.padding)));
            args.push(format!("activation={}", py_activation(l.activation)));
        }
        LayerKind::DepthwiseConv1D => {
            args.push(format!("kernel_size={kernel}"));
            args.push(format!("strides={strides}"));
            args.push(format!("padding={}", py_padding(l.padding)));
            args.push(format!("activation={}", py_activation(l.activation)));
        }
        LayerKind::Lstm => {
            args.push(format!("units={units}"));
            args.push(format!("activation={}", py_activation(l.activation)));
            if let Some(r) = l.rate {
                args.push(format!("dropout={}", fmt_f64(r)));
            }
            args.push(format!("return_sequences={}", py_bool(l.return_sequences.unwrap_or(false))));
        }
        LayerKind::Dense => {
            args.push(format!("units={units}"));
            args.push(format!("activation={}", py_activation(l.activation)));
        }
        LayerKind::MaxPool1D | LayerKind::AvgPool1D => {
            args.push(format!("pool_size={kernel}"));
            args.push(format!("strides={strides}"));
            args.push(format!("padding={}", py_padding(l.padding)));
        }
        LayerKind::Dropout => args.push(format!("rate={}", fmt_f64(l.rate.unwrap_or(0.0)))),
        LayerKind::GlobalAvgPool1D | LayerKind::BatchNorm | LayerKind::Flatten => {}
    }
    if first {
        args.push("input_shape=(seq_length, n_features)".to_string());
    }
    format!("keras.layers.{}({})", keras_class(l.kind), args.join(", "))
}

/// The `get_model()` body for an architecture.
pub fn render_get_model_body(arch: &ArchitectureIR) -> String {
    let mut body = String::from("    model = keras.Sequential([\n");
    let n = arch.layers.len();
    for (i, layer) in arch.layers.iter().enumerate() {
        let sep = if i + 1 < n { "," } else { "" };
        let _ = writeln!(body, "        {}{sep}", render_layer(layer, i == 0));
    }
    body.push_str("    ])\n    return model");
    body
}

/// Template with its `get_model()` body replaced by the architecture.
pub fn emit_script(arch: &ArchitectureIR, template: &SkeletonTemplate) -> String {
    format!(
        "{}{}\n\n\n{}",
        template.prefix(),
        render_get_model_body(arch),
        template.suffix()
    )
}

/// Pulls a script out of a chat response and checks its frozen regions.
pub fn extract_script(llm_text: &str, template: &SkeletonTemplate) -> Result<String, CodegenError> {
    let blocks = jsonfix::fenced_blocks(llm_text);
    if blocks.is_empty() {
        return Err(CodegenError::NoCodeFence);
    }
    let block = blocks
        .iter()
        .find(|b| b.body.contains(DEF_LINE.trim_end()))
        .ok_or(CodegenError::MissingGetModel)?;
    let script = normalize_text(&block.body);
    let actual = frozen_hash(&script)?;
    if actual != template.immutable_hash {
        return Err(CodegenError::TemplateTampered {
            expected: template.immutable_hash.clone(),
            actual,
        });
    }
    Ok(script)
}

/// Fills the zero-shot code prompt.
pub fn build_zero_shot_prompt(task: Task, dataset_name: &str, task_description: &str, template: &SkeletonTemplate) -> String {
    let task_name = task.to_string();
    let slots = [
        task_name.as_str(),
        dataset_name,
        task_description,
        dataset_name,
        template.text.trim_end(),
    ];
    let mut out = String::new();
    let mut rest = assets::ZERO_SHOT_PROMPT;
    for slot in slots {
        match rest.find("{}") {
            Some(i) => {
                out.push_str(&rest[..i]);
                out.push_str(slot);
                rest = &rest[i + 2..];
            }
            None => break,
        }
    }
    out.push_str(rest);
    out
}

#[derive(Debug, Clone, PartialEq)]
enum PyValue {
    Int(i64),
    Float(f64),
    Str(String),
    Bool(bool),
    None,
    Name(String),
    Other(String),
}

fn py_value(s: &str) -> PyValue {
    let s = s.trim();
    if let Ok(i) = s.parse::<i64>() {
        return PyValue::Int(i);
    }
    if let Ok(f) = s.parse::<f64>() {
        return PyValue::Float(f);
    }
    match s {
        "True" => return PyValue::Bool(true),
        "False" => return PyValue::Bool(false),
        "None" => return PyValue::None,
        _ => {}
    }
    let b = s.as_bytes();
    if b.len() >= 2 && (b[0] == b'\'' || b[0] == b'"') && b[b.len() - 1] == b[0] {
        return PyValue::Str(s[1..s.len() - 1].to_string());
    }
    if !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
        return PyValue::Name(s.to_string());
    }
    PyValue::Other(s.to_string())
}

fn split_args(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut quote: Option<char> = None;
    let mut cur = String::new();
    for c in s.chars() {
        match quote {
            Some(q) => {
                cur.push(c);
                if c == q {
                    quote = None;
                }
            }
            None => match c {
                '\'' | '"' => {
                    quote = Some(c);
                    cur.push(c);
                }
                '(' | '[' | '{' => {
                    depth += 1;
                    cur.push(c);
                }
                ')' | ']' | '}' => {
                    depth -= 1;
                    cur.push(c);
                }
                ',' if depth == 0 => {
                    out.push(std::mem::take(&mut cur));
                }
                _ => cur.push(c),
            },
        }
    }
    out.push(cur);
    out.into_iter().map(|a| a.trim().to_string()).filter(|a| !a.is_empty()).collect()
}

fn strip_comments(s: &str) -> String {
    s.lines()
        .map(|line| {
            let mut quote: Option<char> = None;
            for (i, c) in line.char_indices() {
                match quote {
                    Some(q) if c == q => quote = None,
                    Some(_) => {}
                    None if c == '\'' || c == '"' => quote = Some(c),
                    None if c == '#' => return &line[..i],
                    None => {}
                }
            }
            line
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Layer calls inside the `get_model()` body of a script, in order. Symbols
/// such as `n_classes` resolve through `names`.
pub fn parse_layers(script: &str, names: &BTreeMap<String, i64>) -> Result<Vec<LayerSpec>, CodegenError> {
    let body = strip_comments(&get_model_body(script)?);
    let mut layers = Vec::new();
    let mut rest = body.as_str();
    while let Some(i) = rest.find("layers.") {
        let after = &rest[i + "layers.".len()..];
        let ident_len = after
            .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
            .unwrap_or(after.len());
        let ident = &after[..ident_len];
        let tail = after[ident_len..].trim_start();
        if !tail.starts_with('(') {
            rest = &after[ident_len..];
            continue;
        }
        let open = after.len() - tail.len();
        let mut depth = 0;
        let mut close = None;
        let mut quote: Option<char> = None;
        for (j, c) in after[open..].char_indices() {
            match quote {
                Some(q) if c == q => quote = None,
                Some(_) => {}
                None => match c {
                    '\'' | '"' => quote = Some(c),
                    '(' => depth += 1,
                    ')' => {
                        depth -= 1;
                        if depth == 0 {
                            close = Some(open + j);
                            break;
                        }
                    }
                    _ => {}
                },
            }
        }
        let close = close.ok_or_else(|| CodegenError::LayerSyntax(format!("unbalanced call to {ident}")))?;
        let args = &after[open + 1..close];
        layers.push(layer_from_call(ident, args, names)?);
        rest = &after[close + 1..];
    }
    Ok(layers)
}

fn layer_from_call(ident: &str, args: &str, names: &BTreeMap<String, i64>) -> Result<LayerSpec, CodegenError> {
    let kind = LayerKind::from_name(ident).ok_or_else(|| CodegenError::UnsupportedLayer(ident.to_string()))?;
    let mut spec = LayerSpec::new(kind);
    if kind == LayerKind::Lstm {
        spec.activation = Activation::Tanh;
    }
    let int = |name: &str, v: PyValue| -> Result<usize, CodegenError> {
        match v {
            PyValue::Int(i) if i >= 0 => Ok(i as usize),
            PyValue::Name(n) => names
                .get(&n)
                .filter(|v| **v >= 0)
                .map(|v| *v as usize)
                .ok_or_else(|| CodegenError::LayerSyntax(format!("{ident}: unknown name {n} for {name}"))),
            other => Err(CodegenError::LayerSyntax(format!("{ident}: {name} = {other:?}"))),
        }
    };
    let float = |name: &str, v: PyValue| -> Result<f64, CodegenError> {
        match v {
            PyValue::Int(i) => Ok(i as f64),
            PyValue::Float(f) => Ok(f),
            other => Err(CodegenError::LayerSyntax(format!("{ident}: {name} = {other:?}"))),
        }
    };
    let positional_slots: &[&str] = match kind {
        LayerKind::Conv1D | LayerKind::SeparableConv1D => &["filters", "kernel_size"],
        LayerKind::DepthwiseConv1D => &["kernel_size"],
        LayerKind::Dense | LayerKind::Lstm => &["units"],
        LayerKind::MaxPool1D | LayerKind::AvgPool1D => &["pool_size"],
        LayerKind::Dropout => &["rate"],
        _ => &[],
    };
    for (pos, arg) in split_args(args).into_iter().enumerate() {
        let (name, value) = match arg.split_once('=') {
            Some((n, v)) if !n.contains(['(', '\'', '"']) => (n.trim().to_string(), v.trim().to_string()),
            _ => match positional_slots.get(pos) {
                Some(slot) => (slot.to_string(), arg.clone()),
                None => return Err(CodegenError::LayerSyntax(format!("{ident}: unexpected argument {arg}"))),
            },
        };
        let v = py_value(&value);
        match name.as_str() {
            "filters" | "units" => spec.units = Some(int(&name, v)?),
            "kernel_size" | "pool_size" => spec.kernel_size = Some(int(&name, v)?),
            "strides" => spec.strides = Some(int(&name, v)?),
            "padding" => {
                spec.padding = match v {
                    PyValue::Str(s) if s == "valid" => Padding::Valid,
                    PyValue::Str(s) if s == "same" => Padding::Same,
                    other => return Err(CodegenError::LayerSyntax(format!("{ident}: padding {other:?}"))),
                }
            }
            "activation" => {
                spec.activation = match v {
                    PyValue::None => Activation::None,
                    PyValue::Str(s) => Activation::from_name(&s)
                        .ok_or_else(|| CodegenError::LayerSyntax(format!("{ident}: activation {s}")))?,
                    other => return Err(CodegenError::LayerSyntax(format!("{ident}: activation {other:?}"))),
                }
            }
            "dropout" | "rate" => spec.rate = Some(float(&name, v)?),
            "return_sequences" => {
                spec.return_sequences = Some(matches!(v, PyValue::Bool(true)));
            }
            "input_shape" | "name" | "recurrent_dropout" | "use_bias" => {}
            other => return Err(CodegenError::LayerSyntax(format!("{ident}: unsupported argument {other}"))),
        }
    }
    Ok(spec.normalized())
}

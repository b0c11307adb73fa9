//! Reads model configurations proposed in chat text.
//!
//! Configurations arrive as dicts with a `layer_sequence` list. Pooling may be
//! given as a bare `{"pooling_type": ..., "pool_size": ...}` entry, and
//! `batch_normalization` / `dropout_rate` ride along on other layers; both are
//! expanded into their own layers here.

use serde_json::{Map, Value};

use super::{Activation, LayerKind, LayerSpec, Padding};
use crate::jsonfix;

/// One configuration turned into layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedConfig {
    pub layers: Vec<LayerSpec>,
    /// Structural fixes applied while reading (inserted Flatten, inferred
    /// `return_sequences`).
    pub repairs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RejectedCandidate {
    /// 1-based position among the configurations found in the text.
    pub position: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CandidateParse {
    pub configs: Vec<ParsedConfig>,
    pub rejected: Vec<RejectedCandidate>,
}

fn layer_list(v: &Value) -> Option<&Vec<Value>> {
    let obj = v.as_object()?;
    for key in ["layer_sequence", "layers"] {
        if let Some(Value::Array(a)) = obj.get(key) {
            return Some(a);
        }
    }
    for key in ["model_configuration", "model_config", "configuration", "config"] {
        if let Some(inner) = obj.get(key) {
            if let Some(a) = layer_list(inner) {
                return Some(a);
            }
        }
    }
    None
}

fn mentions_layers(snippet: &str) -> bool {
    snippet.contains("layer_sequence") || snippet.contains("\"layers\"") || snippet.contains("'layers'")
}

/// Every configuration in `text`, in order of appearance.
pub fn parse_candidates(text: &str) -> CandidateParse {
    let mut out = CandidateParse::default();
    let mut position = 0;
    for snippet in jsonfix::json_candidates(text) {
        let value = match jsonfix::parse_snippet(&snippet) {
            Ok(v) => v,
            Err(e) => {
                if mentions_layers(&snippet) {
                    position += 1;
                    out.rejected.push(RejectedCandidate {
                        position,
                        reason: e.to_string(),
                    });
                }
                continue;
            }
        };
        let Some(list) = layer_list(&value) else { continue };
        position += 1;
        match parse_layer_sequence(list) {
            Ok(cfg) => out.configs.push(cfg),
            Err(reason) => out.rejected.push(RejectedCandidate { position, reason }),
        }
    }
    out
}

fn get<'a>(obj: &'a Map<String, Value>, keys: &[&str]) -> Option<&'a Value> {
    keys.iter().find_map(|k| obj.get(*k)).filter(|v| !v.is_null())
}

fn as_count(v: &Value, field: &str) -> Result<usize, String> {
    let v = match v {
        Value::Array(a) if a.len() == 1 => &a[0],
        other => other,
    };
    let n = match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.trim().parse::<f64>().ok(),
        _ => None,
    };
    match n {
        Some(x) if x.is_finite() && x >= 0.0 && x.fract() == 0.0 => Ok(x as usize),
        _ => Err(format!("{field} must be a non-negative integer, got {v}")),
    }
}

fn as_rate(v: &Value) -> Result<f64, String> {
    match v {
        Value::Number(n) => n.as_f64().ok_or_else(|| "bad rate".to_string()),
        Value::String(s) => s.trim().parse().map_err(|_| format!("rate {s:?} is not a number")),
        other => Err(format!("rate must be a number, got {other}")),
    }
}

fn as_bool(v: &Value) -> bool {
    match v {
        Value::Bool(b) => *b,
        Value::String(s) => matches!(s.to_ascii_lowercase().as_str(), "true" | "yes" | "1"),
        Value::Number(n) => n.as_f64().unwrap_or(0.0) != 0.0,
        _ => false,
    }
}

fn pool_kind(name: &str) -> Option<LayerKind> {
    let n: String = name.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
    match n.as_str() {
        "max" | "maxpool" | "maxpooling" => Some(LayerKind::MaxPool1D),
        "average" | "avg" | "mean" | "averagepool" | "avgpool" | "averagepooling" => Some(LayerKind::AvgPool1D),
        "global" | "globalaverage" | "globalavg" | "globalaveragepooling" => Some(LayerKind::GlobalAvgPool1D),
        _ => LayerKind::from_name(name).filter(|k| k.is_pool() || *k == LayerKind::GlobalAvgPool1D),
    }
}

fn parse_one(i: usize, item: &Value) -> Result<(LayerSpec, Vec<LayerSpec>), String> {
    let obj = item
        .as_object()
        .ok_or_else(|| format!("entry {} is not an object", i + 1))?;
    let kind = match get(obj, &["layer_type", "type", "layer", "kind"]) {
        Some(Value::String(name)) => LayerKind::from_name(name).ok_or_else(|| format!("unknown layer type {name:?}"))?,
        Some(other) => return Err(format!("layer type must be a string, got {other}")),
        None => match get(obj, &["pooling_type", "pooling"]) {
            Some(Value::String(p)) => pool_kind(p).ok_or_else(|| format!("unknown pooling type {p:?}"))?,
            _ => return Err(format!("entry {} has no layer_type", i + 1)),
        },
    };
    let mut spec = LayerSpec::new(kind);
    if kind == LayerKind::Lstm {
        spec.activation = Activation::Tanh;
    }
    if let Some(v) = get(obj, &["units", "filters"]) {
        spec.units = Some(as_count(v, "units")?);
    }
    let kernel_keys: &[&str] = if kind.is_pool() {
        &["pool_size", "kernel_size"]
    } else {
        &["kernel_size", "pool_size"]
    };
    if let Some(v) = get(obj, kernel_keys) {
        spec.kernel_size = Some(as_count(v, "kernel_size")?);
    }
    if let Some(v) = get(obj, &["strides", "stride"]) {
        spec.strides = Some(as_count(v, "strides")?);
    }
    if let Some(v) = get(obj, &["padding"]) {
        spec.padding = match v.as_str().map(|s| s.to_ascii_lowercase()) {
            Some(s) if s == "valid" => Padding::Valid,
            Some(s) if s == "same" => Padding::Same,
            _ => return Err(format!("unsupported padding {v}")),
        };
    }
    if let Some(v) = get(obj, &["activation"]) {
        let name = v.as_str().ok_or_else(|| format!("activation must be a string, got {v}"))?;
        spec.activation = Activation::from_name(name).ok_or_else(|| format!("unsupported activation {name:?}"))?;
    }
    if let Some(v) = get(obj, &["return_sequences"]) {
        spec.return_sequences = Some(as_bool(v));
    }

    let mut trailing = Vec::new();
    if get(obj, &["batch_normalization", "batch_norm"]).is_some_and(as_bool) {
        trailing.push(LayerSpec::new(LayerKind::BatchNorm));
    }
    if let Some(v) = get(obj, &["dropout_rate", "dropout", "rate"]) {
        let r = as_rate(v)?;
        match kind {
            LayerKind::Lstm | LayerKind::Dropout => spec.rate = Some(r),
            _ if r > 0.0 => trailing.push(LayerSpec::dropout(r)),
            _ => {}
        }
    }
    Ok((spec, trailing))
}

/// Turns a list of layer dicts into layers, applying the structural repairs.
pub fn parse_layer_sequence(items: &[Value]) -> Result<ParsedConfig, String> {
    if items.is_empty() {
        return Err("empty layer sequence".into());
    }
    let mut raw = Vec::new();
    for (i, item) in items.iter().enumerate() {
        let (spec, trailing) = parse_one(i, item)?;
        raw.push(spec);
        raw.extend(trailing);
    }

    let mut repairs = Vec::new();
    for i in 0..raw.len() {
        if raw[i].kind == LayerKind::Lstm && raw[i].return_sequences.is_none() {
            let later_needs_time = raw[i + 1..].iter().any(|l| l.kind.needs_time_axis());
            raw[i].return_sequences = Some(later_needs_time);
            if later_needs_time {
                repairs.push(format!("LSTM at position {} set to return sequences", i + 1));
            }
        }
    }

    let mut layers = Vec::with_capacity(raw.len() + 1);
    let mut temporal = true;
    for spec in raw {
        if spec.kind == LayerKind::Dense && temporal {
            repairs.push(format!("Flatten inserted before Dense at position {}", layers.len() + 1));
            layers.push(LayerSpec::new(LayerKind::Flatten));
            temporal = false;
        }
        temporal = match spec.kind {
            LayerKind::Flatten | LayerKind::Dense | LayerKind::GlobalAvgPool1D => false,
            LayerKind::Lstm => spec.return_sequences.unwrap_or(false) && temporal,
            _ => temporal,
        };
        layers.push(spec);
    }
    Ok(ParsedConfig { layers, repairs })
}

#[cfg(test)]
mod tests {
    use super::*;

    const HAR_PICK: &str = r#"```python
model_configuration = {
    "layer_sequence": [
        {"layer_type": "Conv1D", "filters": 16, "kernel_size": 3, "activation": "relu", "strides": 1, "batch_normalization": True},
        {"pooling_type": "max", "pool_size": 2},
        {"layer_type": "DepthwiseConv1D", "kernel_size": 3, "activation": "relu", "strides": 1, "batch_normalization": True},
        {"pooling_type": "average", "pool_size": 2},
        {"layer_type": "LSTM", "units": 32, "activation": "tanh", "dropout_rate": 0.2},
        {"layer_type": "Dense", "units": 32, "activation": "relu"},
        {"layer_type": "Dense", "units": 6, "activation": "softmax"}
    ]
}
```"#;

    #[test]
    fn expands_pooling_and_batch_norm() {
        let parsed = parse_candidates(HAR_PICK);
        assert_eq!(parsed.configs.len(), 1);
        let kinds: Vec<LayerKind> = parsed.configs[0].layers.iter().map(|l| l.kind).collect();
        use LayerKind::*;
        assert_eq!(
            kinds,
            [Conv1D, BatchNorm, MaxPool1D, DepthwiseConv1D, BatchNorm, AvgPool1D, Lstm, Dense, Dense]
        );
        let lstm = &parsed.configs[0].layers[6];
        assert_eq!(lstm.rate, Some(0.2));
        assert_eq!(lstm.return_sequences, Some(false));
        assert!(parsed.configs[0].repairs.is_empty());
    }

    #[test]
    fn flatten_inserted_before_dense() {
        let text = r#"{"layer_sequence": [{"layer_type": "Conv1D", "filters": 4, "kernel_size": 3}, {"layer_type": "Dense", "units": 2, "activation": "softmax"}]}"#;
        let cfg = &parse_candidates(text).configs[0];
        assert_eq!(cfg.layers[1].kind, LayerKind::Flatten);
        assert_eq!(cfg.repairs.len(), 1);
    }

    #[test]
    fn stacked_lstm_returns_sequences() {
        let text = r#"{"layers": [{"layer_type": "LSTM", "units": 8}, {"layer_type": "LSTM", "units": 4}, {"layer_type": "Dense", "units": 1}]}"#;
        let cfg = &parse_candidates(text).configs[0];
        assert_eq!(cfg.layers[0].return_sequences, Some(true));
        assert_eq!(cfg.layers[1].return_sequences, Some(false));
        assert_eq!(cfg.layers[2].kind, LayerKind::Dense);
    }

    #[test]
    fn dropout_on_conv_becomes_layer() {
        let text = r#"{"layer_sequence": [{"layer_type": "Conv1D", "filters": 4, "kernel_size": 3, "dropout_rate": 0.1}]}"#;
        let cfg = &parse_candidates(text).configs[0];
        assert_eq!(cfg.layers[1], LayerSpec::dropout(0.1));
    }

    #[test]
    fn unknown_layer_is_rejected_with_position() {
        let text = "```python\n{\"layer_sequence\": [{\"layer_type\": \"Conv1D\", \"filters\": 4, \"kernel_size\": 3}]}\n```\n```python\n{\"layer_sequence\": [{\"layer_type\": \"Transformer\"}]}\n```";
        let p = parse_candidates(text);
        assert_eq!(p.configs.len(), 1);
        assert_eq!(p.rejected[0].position, 2);
        assert!(p.rejected[0].reason.contains("Transformer"));
    }

    #[test]
    fn unrelated_objects_are_ignored() {
        assert_eq!(parse_candidates("{\"a\": 1}"), CandidateParse::default());
    }
}

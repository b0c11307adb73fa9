//! Search spaces proposed by the design stage.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use super::LayerKind;
use crate::jsonfix;

/// Dimension names the pipeline understands.
pub const VOCABULARY: &[&str] = &[
    "layer_type",
    "Conv1D_kernel_size",
    "Conv1D_filters",
    "DepthwiseConv1D_kernel_size",
    "SeparableConv1D_kernel_size",
    "SeparableConv1D_filters",
    "LSTM_units",
    "Dense_units",
    "activation",
    "dropout_rate",
    "pooling_type",
    "pool_size",
    "strides",
    "padding",
    "batch_normalization",
];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub dimensions: BTreeMap<String, Vec<Value>>,
    /// Keys outside the vocabulary, kept verbatim.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extras: BTreeMap<String, Vec<Value>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum SpaceError {
    #[error("no search space found in the design response")]
    NoSpaceFound,
    #[error("search space dimension {0:?} has no values")]
    EmptyDimension(String),
}

fn normalize(s: &str) -> String {
    s.chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .map(|c| c.to_ascii_lowercase())
        .collect()
}

/// Maps a key onto the vocabulary, ignoring case and separators.
pub fn canonical_dimension(key: &str) -> Option<&'static str> {
    let n = normalize(key);
    let n = match n.as_str() {
        "layertypes" | "layers" => "layertype".to_string(),
        "activations" | "activationfunction" | "activationfunctions" => "activation".to_string(),
        "dropout" | "dropoutrates" => "dropoutrate".to_string(),
        "pooling" | "poolingtypes" => "poolingtype".to_string(),
        "poolsizes" => "poolsize".to_string(),
        "stride" => "strides".to_string(),
        "batchnorm" => "batchnormalization".to_string(),
        _ => n,
    };
    VOCABULARY.iter().copied().find(|v| normalize(v) == n)
}

impl SearchSpace {
    pub fn get(&self, dim: &str) -> Option<&[Value]> {
        self.dimensions.get(dim).map(Vec::as_slice)
    }

    pub fn layer_types(&self) -> Vec<LayerKind> {
        self.get("layer_type")
            .unwrap_or(&[])
            .iter()
            .filter_map(|v| v.as_str().and_then(LayerKind::from_name))
            .collect()
    }

    /// Dimensions plus extras as pretty JSON for prompts.
    pub fn to_prompt_json(&self) -> String {
        let mut all: BTreeMap<&str, &Vec<Value>> = BTreeMap::new();
        for (k, v) in &self.dimensions {
            all.insert(k, v);
        }
        for (k, v) in &self.extras {
            all.insert(k, v);
        }
        serde_json::to_string_pretty(&all).expect("space serializes")
    }

    /// Builds a space from a parsed JSON object.
    pub fn from_object(obj: &serde_json::Map<String, Value>) -> Result<SearchSpace, SpaceError> {
        let mut space = SearchSpace::default();
        for (key, value) in obj {
            let values = match value {
                Value::Array(a) => a.clone(),
                Value::Null => Vec::new(),
                scalar => vec![scalar.clone()],
            };
            match canonical_dimension(key) {
                Some(dim) => {
                    if values.is_empty() {
                        return Err(SpaceError::EmptyDimension(dim.to_string()));
                    }
                    if dim == "layer_type" {
                        for v in &values {
                            if v.as_str().and_then(LayerKind::from_name).is_none() {
                                space.warnings.push(format!("unsupported layer type {v}"));
                            }
                        }
                    }
                    space.dimensions.entry(dim.to_string()).or_default().extend(values);
                }
                None => {
                    space.warnings.push(format!("unknown dimension {key:?} kept as extra"));
                    if !values.is_empty() {
                        space.extras.insert(key.clone(), values);
                    }
                }
            }
        }
        if space.dimensions.is_empty() {
            return Err(SpaceError::NoSpaceFound);
        }
        Ok(space)
    }
}

/// First object in the text that names at least one known dimension.
pub fn parse_search_space(llm_text: &str) -> Result<SearchSpace, SpaceError> {
    let mut first_err = None;
    for snippet in jsonfix::json_candidates(llm_text) {
        let Ok(Value::Object(obj)) = jsonfix::parse_snippet(&snippet) else { continue };
        match SearchSpace::from_object(&obj) {
            Ok(space) => return Ok(space),
            Err(SpaceError::NoSpaceFound) => {}
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    Err(first_err.unwrap_or(SpaceError::NoSpaceFound))
}

/// Fallback space used when the design stage yields nothing usable.
pub fn default_space() -> SearchSpace {
    let text = r#"{
        "layer_type": ["Conv1D", "DepthwiseConv1D", "SeparableConv1D", "LSTM", "Dense"],
        "Conv1D_kernel_size": [3, 5],
        "Conv1D_filters": [8, 16],
        "DepthwiseConv1D_kernel_size": [3, 5],
        "SeparableConv1D_kernel_size": [3, 5],
        "SeparableConv1D_filters": [8, 16],
        "LSTM_units": [16, 32],
        "Dense_units": [32, 64],
        "activation": ["relu", "tanh"],
        "dropout_rate": [0.0, 0.2],
        "pooling_type": ["max", "average"],
        "pool_size": [2, 3],
        "strides": [1, 2],
        "batch_normalization": [true, false]
    }"#;
    let obj: serde_json::Map<String, Value> = serde_json::from_str(text).expect("default space is valid JSON");
    SearchSpace::from_object(&obj).expect("default space is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn keys_map_case_insensitively() {
        assert_eq!(canonical_dimension("conv1d_FILTERS"), Some("Conv1D_filters"));
        assert_eq!(canonical_dimension("Layer Types"), Some("layer_type"));
        assert_eq!(canonical_dimension("optimizer"), None);
    }

    #[test]
    fn extras_are_warned_and_kept() {
        let s = parse_search_space("```python\n{\"LSTM_units\": [4, 8], \"optimizer\": [\"adam\", \"rmsprop\"]}\n```").unwrap();
        assert_eq!(s.get("LSTM_units").unwrap(), &[json!(4), json!(8)]);
        assert_eq!(s.extras["optimizer"], vec![json!("adam"), json!("rmsprop")]);
        assert_eq!(s.warnings.len(), 1);
    }

    #[test]
    fn empty_dimension_errors() {
        assert_eq!(
            parse_search_space("{\"Conv1D_filters\": []}"),
            Err(SpaceError::EmptyDimension("Conv1D_filters".into()))
        );
    }

    #[test]
    fn scalar_is_wrapped() {
        let s = parse_search_space("{\"activation\": \"relu\"}").unwrap();
        assert_eq!(s.get("activation").unwrap(), &[json!("relu")]);
    }

    #[test]
    fn nothing_found() {
        assert_eq!(parse_search_space("no braces"), Err(SpaceError::NoSpaceFound));
        assert_eq!(parse_search_space("{\"foo\": 1}"), Err(SpaceError::NoSpaceFound));
    }

    #[test]
    fn default_space_has_every_list_non_empty() {
        let s = default_space();
        assert!(s.dimensions.values().all(|v| !v.is_empty()));
        assert_eq!(s.layer_types().len(), 5);
    }
}

//! Analytical complexity model: parameters, MACs, flash, peak RAM, latency
//! and energy, plus constraint verdicts.

pub mod devices;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::archir::{infer_shapes, ArchitectureIR, LayerKind, LayerSpec, Shape, ShapeError};
use crate::querygen::ModelAspect;

pub use devices::{default_device, lookup_device, DeviceSpec};

pub const DEFAULT_FLASH_OVERHEAD: u64 = 2048;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quant {
    #[default]
    Int8,
    Float32,
}

impl Quant {
    pub fn bytes(self) -> u64 {
        match self {
            Quant::Int8 => 1,
            Quant::Float32 => 4,
        }
    }
}

impl fmt::Display for Quant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Quant::Int8 => "int8",
            Quant::Float32 => "float32",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfileOptions {
    pub quant: Quant,
    pub flash_overhead: u64,
    /// Treat BatchNorm as folded into the preceding layer.
    pub fold_bn: bool,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        ProfileOptions {
            quant: Quant::Int8,
            flash_overhead: DEFAULT_FLASH_OVERHEAD,
            fold_bn: false,
        }
    }
}

fn folded(spec: &LayerSpec, fold_bn: bool) -> bool {
    fold_bn && spec.kind == LayerKind::BatchNorm
}

/// Trainable weights of one layer.
pub fn layer_params(spec: &LayerSpec, input: Shape, _output: Shape) -> u64 {
    let c_in = input.channels as u64;
    let units = spec.units.unwrap_or(0) as u64;
    let k = spec.kernel_size.unwrap_or(0) as u64;
    match spec.kind {
        LayerKind::Dense => input.elements() as u64 * units + units,
        LayerKind::Conv1D => (k * c_in + 1) * units,
        LayerKind::DepthwiseConv1D => k * c_in + c_in,
        LayerKind::SeparableConv1D => k * c_in + c_in * units + units,
        LayerKind::Lstm => 4 * units * (c_in + units + 1),
        LayerKind::BatchNorm => 4 * c_in,
        LayerKind::MaxPool1D
        | LayerKind::AvgPool1D
        | LayerKind::GlobalAvgPool1D
        | LayerKind::Dropout
        | LayerKind::Flatten => 0,
    }
}

/// Multiply-accumulates of one inference through one layer.
pub fn layer_macs(spec: &LayerSpec, input: Shape, output: Shape) -> u64 {
    let c_in = input.channels as u64;
    let units = spec.units.unwrap_or(0) as u64;
    let k = spec.kernel_size.unwrap_or(0) as u64;
    let out_len = output.len as u64;
    match spec.kind {
        LayerKind::Conv1D => out_len * units * k * c_in,
        LayerKind::DepthwiseConv1D => out_len * c_in * k,
        LayerKind::SeparableConv1D => out_len * c_in * k + out_len * c_in * units,
        LayerKind::Dense => input.elements() as u64 * units,
        LayerKind::Lstm => input.len as u64 * 4 * units * (c_in + units),
        LayerKind::BatchNorm => output.elements() as u64,
        LayerKind::MaxPool1D
        | LayerKind::AvgPool1D
        | LayerKind::GlobalAvgPool1D
        | LayerKind::Dropout
        | LayerKind::Flatten => 0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerProfile {
    pub index: usize,
    pub kind: LayerKind,
    pub params: u64,
    pub macs: u64,
    pub input_shape: Shape,
    pub out_shape: Shape,
    pub ram_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub total_params: u64,
    pub total_macs: u64,
    pub flash_bytes: u64,
    pub peak_ram_bytes: u64,
    pub latency_ms: f64,
    pub energy_j: f64,
    pub quant: Quant,
    pub per_layer: Vec<LayerProfile>,
}

/// Per-layer parameter counts and their total.
pub fn count_params(arch: &ArchitectureIR) -> Result<(Vec<u64>, u64), ShapeError> {
    let per: Vec<u64> = infer_shapes(arch)?
        .iter()
        .map(|s| layer_params(&arch.layers[s.index], s.input, s.output))
        .collect();
    let total = per.iter().sum();
    Ok((per, total))
}

/// Per-layer MAC counts and their total.
pub fn count_macs(arch: &ArchitectureIR) -> Result<(Vec<u64>, u64), ShapeError> {
    let per: Vec<u64> = infer_shapes(arch)?
        .iter()
        .map(|s| layer_macs(&arch.layers[s.index], s.input, s.output))
        .collect();
    let total = per.iter().sum();
    Ok((per, total))
}

pub fn estimate_flash(params: u64, quant: Quant, overhead: u64) -> u64 {
    params * quant.bytes() + overhead
}

fn layer_ram(spec: &LayerSpec, input: Shape, output: Shape, width: u64) -> u64 {
    let act = (input.elements() + output.elements()) as u64 * width;
    let state = match spec.kind {
        LayerKind::Lstm => 2 * spec.units.unwrap_or(0) as u64 * width,
        _ => 0,
    };
    act + state
}

/// Peak of input plus output activation bytes over layers (ping-pong arena).
pub fn estimate_peak_ram(arch: &ArchitectureIR, quant: Quant) -> Result<u64, ShapeError> {
    estimate_peak_ram_with(arch, quant, false)
}

pub fn estimate_peak_ram_with(arch: &ArchitectureIR, quant: Quant, fold_bn: bool) -> Result<u64, ShapeError> {
    let width = quant.bytes();
    let shapes = infer_shapes(arch)?;
    let peak = shapes
        .iter()
        .filter(|s| !folded(&arch.layers[s.index], fold_bn))
        .map(|s| layer_ram(&arch.layers[s.index], s.input, s.output, width))
        .max();
    Ok(peak.unwrap_or_else(|| 2 * arch.input().elements() as u64 * width))
}

/// `(latency_ms, energy_j)` for a MAC count on a device.
pub fn estimate_latency_energy(macs: u64, dev: &DeviceSpec) -> (f64, f64) {
    let macs = macs as f64;
    let latency_ms = macs / (dev.clock_hz as f64 * dev.macs_per_cycle) * 1000.0;
    (latency_ms, macs * dev.joules_per_mac)
}

/// Full profile of one architecture.
pub fn profile(arch: &ArchitectureIR, dev: &DeviceSpec, opts: ProfileOptions) -> Result<ProfileReport, ShapeError> {
    let width = opts.quant.bytes();
    let shapes = infer_shapes(arch)?;
    let per_layer: Vec<LayerProfile> = shapes
        .iter()
        .map(|s| {
            let spec = &arch.layers[s.index];
            let skip = folded(spec, opts.fold_bn);
            LayerProfile {
                index: s.index,
                kind: spec.kind,
                params: if skip { 0 } else { layer_params(spec, s.input, s.output) },
                macs: if skip { 0 } else { layer_macs(spec, s.input, s.output) },
                input_shape: s.input,
                out_shape: s.output,
                ram_bytes: if skip { 0 } else { layer_ram(spec, s.input, s.output, width) },
            }
        })
        .collect();
    let total_params = per_layer.iter().map(|l| l.params).sum();
    let total_macs = per_layer.iter().map(|l| l.macs).sum();
    let peak_ram_bytes = estimate_peak_ram_with(arch, opts.quant, opts.fold_bn)?;
    let (latency_ms, energy_j) = estimate_latency_energy(total_macs, dev);
    Ok(ProfileReport {
        total_params,
        total_macs,
        flash_bytes: estimate_flash(total_params, opts.quant, opts.flash_overhead),
        peak_ram_bytes,
        latency_ms,
        energy_j,
        quant: opts.quant,
        per_layer,
    })
}

/// Resource limits a candidate must meet. `None` means unconstrained.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Limits {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flash_bytes: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ram_bytes: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub macs: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub params: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<f64>,
    /// Origin of each limit: "flag", "query" or "device".
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub sources: BTreeMap<String, String>,
}

impl Limits {
    /// Explicit flags win over the rewritten query, which wins over the
    /// device's own flash and RAM.
    pub fn resolve(flags: &Limits, aspect: Option<&ModelAspect>, dev: &DeviceSpec) -> Limits {
        let mut out = Limits::default();
        fn pick<T: Copy>(
            name: &str,
            flag: Option<T>,
            query: Option<T>,
            device: Option<T>,
            sources: &mut BTreeMap<String, String>,
        ) -> Option<T> {
            let (v, src) = match (flag, query, device) {
                (Some(v), _, _) => (Some(v), "flag"),
                (None, Some(v), _) => (Some(v), "query"),
                (None, None, Some(v)) => (Some(v), "device"),
                _ => (None, ""),
            };
            if v.is_some() {
                sources.insert(name.to_string(), src.to_string());
            }
            v
        }
        let s = &mut out.sources;
        out.flash_bytes = pick("flash", flags.flash_bytes, aspect.and_then(|a| a.flash_bytes()), Some(dev.flash_bytes), s);
        out.ram_bytes = pick("ram", flags.ram_bytes, aspect.and_then(|a| a.ram_bytes()), Some(dev.ram_bytes), s);
        out.macs = pick("macs", flags.macs, aspect.and_then(|a| a.mac_limit()), None, s);
        out.params = pick("params", flags.params, aspect.and_then(|a| a.params_limit()), None, s);
        out.latency_ms = pick("latency_ms", flags.latency_ms, aspect.and_then(|a| a.latency_ms()), None, s);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintViolation {
    pub metric: String,
    pub limit: f64,
    pub actual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintVerdict {
    pub feasible: bool,
    pub violations: Vec<ConstraintViolation>,
}

/// Every metric of `report` that exceeds its limit.
pub fn check_limits(report: &ProfileReport, limits: &Limits) -> ConstraintVerdict {
    let checks: [(&str, Option<f64>, f64); 5] = [
        ("flash", limits.flash_bytes.map(|v| v as f64), report.flash_bytes as f64),
        ("ram", limits.ram_bytes.map(|v| v as f64), report.peak_ram_bytes as f64),
        ("macs", limits.macs.map(|v| v as f64), report.total_macs as f64),
        ("params", limits.params.map(|v| v as f64), report.total_params as f64),
        ("latency_ms", limits.latency_ms, report.latency_ms),
    ];
    let violations: Vec<ConstraintViolation> = checks
        .into_iter()
        .filter_map(|(metric, limit, actual)| {
            let limit = limit?;
            (actual > limit).then(|| ConstraintViolation {
                metric: metric.to_string(),
                limit,
                actual,
            })
        })
        .collect();
    ConstraintVerdict {
        feasible: violations.is_empty(),
        violations,
    }
}

/// Limits from the query's model aspect with device fallback, then checked.
pub fn check_constraints(report: &ProfileReport, aspect: &ModelAspect, dev: &DeviceSpec) -> ConstraintVerdict {
    check_limits(report, &Limits::resolve(&Limits::default(), Some(aspect), dev))
}

//! Constraint-aware architecture querying for on-device time-series models.

pub mod assets;
pub mod dataset;
pub mod jsonfix;
pub mod querygen;
pub mod archir;
pub mod profiler;
pub mod codegen;
pub mod agents;

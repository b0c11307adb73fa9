//! Per-call cost accounting.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::backend::Stage;
use crate::assets;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Price {
    pub usd_per_1m_input: f64,
    pub usd_per_1m_output: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceTable {
    pub default: String,
    pub models: BTreeMap<String, Price>,
}

impl PriceTable {
    pub fn shipped() -> PriceTable {
        PriceTable::from_json(assets::PRICES_JSON).expect("prices.json is valid")
    }

    pub fn from_json(text: &str) -> Result<PriceTable, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Price for `model`, or the default model's price when unlisted.
    pub fn price(&self, model: &str) -> Price {
        self.models
            .get(model)
            .or_else(|| self.models.get(&self.default))
            .copied()
            .unwrap_or(Price {
                usd_per_1m_input: 0.0,
                usd_per_1m_output: 0.0,
            })
    }

    pub fn usd(&self, model: &str, tokens_in: u64, tokens_out: u64) -> f64 {
        let p = self.price(model);
        (tokens_in as f64 * p.usd_per_1m_input + tokens_out as f64 * p.usd_per_1m_output) / 1e6
    }
}

/// Millisecond time source for the ledger.
pub trait Clock {
    fn now_ms(&self) -> u64;
}

pub struct SystemClock {
    start: Instant,
}

impl SystemClock {
    pub fn new() -> SystemClock {
        SystemClock { start: Instant::now() }
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        SystemClock::new()
    }
}

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        self.start.elapsed().as_millis() as u64
    }
}

/// Always reads zero, so recorded wall times are reproducible.
#[derive(Debug, Clone, Copy, Default)]
pub struct FrozenClock;

impl Clock for FrozenClock {
    fn now_ms(&self) -> u64 {
        0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub seq: usize,
    pub stage: Stage,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub round: Option<usize>,
    pub attempt: usize,
    pub tokens_in: u64,
    pub tokens_out: u64,
    pub wall_ms: u64,
    pub usd: f64,
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LedgerTotals {
    pub chat_calls: usize,
    pub calls_by_stage: BTreeMap<Stage, usize>,
    pub tokens_in: u64,
    pub tokens_out: u64,
    pub usd: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    pub model: String,
    pub entries: Vec<LedgerEntry>,
    /// Wall time of the whole pipeline, including non-chat work.
    pub pipeline_wall_ms: u64,
}

impl CostLedger {
    pub fn new(model: &str) -> CostLedger {
        CostLedger {
            model: model.to_string(),
            entries: Vec::new(),
            pipeline_wall_ms: 0,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn record(
        &mut self,
        prices: &PriceTable,
        stage: Stage,
        round: Option<usize>,
        attempt: usize,
        tokens: (u64, u64),
        wall_ms: u64,
        error: Option<String>,
    ) {
        let usd = prices.usd(&self.model, tokens.0, tokens.1);
        self.entries.push(LedgerEntry {
            seq: self.entries.len() + 1,
            stage,
            round,
            attempt,
            tokens_in: tokens.0,
            tokens_out: tokens.1,
            wall_ms,
            usd,
            ok: error.is_none(),
            error,
        });
    }

    pub fn calls(&self, stage: Stage) -> usize {
        self.entries.iter().filter(|e| e.stage == stage).count()
    }

    pub fn totals(&self) -> LedgerTotals {
        let mut t = LedgerTotals::default();
        for e in &self.entries {
            t.chat_calls += 1;
            *t.calls_by_stage.entry(e.stage).or_default() += 1;
            t.tokens_in += e.tokens_in;
            t.tokens_out += e.tokens_out;
            t.usd += e.usd;
            t.wall_ms += e.wall_ms;
        }
        t
    }
}

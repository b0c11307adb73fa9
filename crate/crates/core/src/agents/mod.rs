//! The agent loop: rewrite, design, search, evaluation and code stages over a
//! chat backend.

pub mod backend;
pub mod ledger;
pub mod pipeline;
pub mod report;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::assets;

pub use backend::{
    BackendError, ChatBackend, ChatMessage, ChatRequest, ChatResponse, ContentPart, HttpBackend, HttpConfig,
    MockBackend, Role, Stage,
};
pub use ledger::{Clock, CostLedger, FrozenClock, LedgerEntry, LedgerTotals, PriceTable, SystemClock};
pub use pipeline::{
    max_chat_calls, run_pipeline, run_rewrite_stage, select_final, Candidate, PipelineConfig, PipelineError, RewriteOutcome,
    SearchState, Selection,
};
pub use report::{write_run_dir, RunOutcome, RunReport, TranscriptEntry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentRole {
    Manager,
    Design,
    Search,
    Eval,
    Code,
}

impl AgentRole {
    pub const ALL: [AgentRole; 5] = [
        AgentRole::Manager,
        AgentRole::Design,
        AgentRole::Search,
        AgentRole::Eval,
        AgentRole::Code,
    ];

    pub fn system_message(self) -> &'static str {
        match self {
            AgentRole::Manager => assets::MANAGER_SYSTEM,
            AgentRole::Design => assets::DESIGN_SYSTEM,
            AgentRole::Search => assets::SEARCH_SYSTEM,
            AgentRole::Eval => assets::EVAL_SYSTEM,
            AgentRole::Code => assets::CODE_SYSTEM,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AgentRole::Manager => "manager",
            AgentRole::Design => "design",
            AgentRole::Search => "search",
            AgentRole::Eval => "eval",
            AgentRole::Code => "code",
        }
    }
}

/// Which of the design, search, eval and code agents take part in a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentSet {
    pub design: bool,
    pub search: bool,
    pub eval: bool,
    pub code: bool,
}

impl AgentSet {
    pub fn all() -> AgentSet {
        AgentSet {
            design: true,
            search: true,
            eval: true,
            code: true,
        }
    }

    pub fn code_only(self) -> bool {
        self.code && !self.design && !self.search && !self.eval
    }

    pub fn names(self) -> Vec<&'static str> {
        [
            (self.design, "design"),
            (self.search, "search"),
            (self.eval, "eval"),
            (self.code, "code"),
        ]
        .into_iter()
        .filter_map(|(on, n)| on.then_some(n))
        .collect()
    }
}

impl Default for AgentSet {
    fn default() -> Self {
        AgentSet::all()
    }
}

impl fmt::Display for AgentSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.names().join(","))
    }
}

impl FromStr for AgentSet {
    type Err = String;

    /// Comma-separated agent names, or `all`.
    fn from_str(s: &str) -> Result<AgentSet, String> {
        let mut set = AgentSet {
            design: false,
            search: false,
            eval: false,
            code: false,
        };
        for part in s.split(',').map(|p| p.trim().to_ascii_lowercase()) {
            match part.as_str() {
                "all" => set = AgentSet::all(),
                "design" => set.design = true,
                "search" => set.search = true,
                "eval" | "evaluation" => set.eval = true,
                "code" => set.code = true,
                "" => {}
                other => return Err(format!("unknown agent {other:?}")),
            }
        }
        if !set.search && !set.code {
            return Err("the agent set needs `search` or `code` to produce a model".into());
        }
        Ok(set)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_system_message_per_role() {
        let msgs: std::collections::BTreeSet<&str> = AgentRole::ALL.iter().map(|r| r.system_message()).collect();
        assert_eq!(msgs.len(), 5);
        assert!(msgs.iter().all(|m| !m.trim().is_empty()));
    }

    #[test]
    fn agent_set_parsing() {
        assert_eq!("all".parse::<AgentSet>().unwrap(), AgentSet::all());
        let code: AgentSet = "code".parse().unwrap();
        assert!(code.code_only());
        let sc: AgentSet = "search, code".parse().unwrap();
        assert!(!sc.code_only() && sc.search && !sc.design);
        assert_eq!(sc.to_string(), "search,code");
        assert!("design,eval".parse::<AgentSet>().is_err());
        assert!("designer".parse::<AgentSet>().is_err());
    }
}

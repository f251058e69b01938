//! Attack scenarios, the parameter optimizer and their outcomes.

mod dos;
mod escalation;
mod optimizer;

pub use dos::*;
pub use escalation::*;
pub use optimizer::*;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::defenses::SuiteReport;

#[derive(Debug, Error, PartialEq)]
pub enum OrchestratorError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("machine halted")]
    Halted,
    #[error(transparent)]
    Dram(#[from] crate::dram::DramError),
    #[error(transparent)]
    Hammer(#[from] crate::hammer::HammerError),
    #[error(transparent)]
    Os(#[from] crate::osmodel::OsError),
    #[error(transparent)]
    Waylay(#[from] crate::waylay::WaylayError),
    #[error(transparent)]
    Oracle(#[from] crate::oracle::OracleError),
    #[error(transparent)]
    Opflip(#[from] crate::opflip::OpflipError),
    #[error(transparent)]
    Trace(#[from] crate::defenses::TraceError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Preparation,
    Templating,
    Waylaying,
    Chasing,
    Exhaustion,
    Hammering,
    Exploitation,
    Restore,
    Seek,
    Destroy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub phase: Phase,
    pub completed: bool,
    pub duration_s: f64,
    pub detail: String,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Privilege {
    #[default]
    None,
    Root,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MachineState {
    #[default]
    Running,
    Halted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioOutcome {
    pub scenario: String,
    pub phases: Vec<PhaseRecord>,
    pub privilege: Privilege,
    pub machine: MachineState,
    pub flip: Option<ExploitedFlip>,
    pub restored: Option<bool>,
    pub defenses: Option<SuiteReport>,
    pub total_s: f64,
    pub diagnostics: Vec<String>,
}

impl ScenarioOutcome {
    pub fn new(scenario: &str) -> Self {
        Self {
            scenario: scenario.into(),
            phases: Vec::new(),
            privilege: Privilege::None,
            machine: MachineState::Running,
            flip: None,
            restored: None,
            defenses: None,
            total_s: 0.0,
            diagnostics: Vec::new(),
        }
    }

    pub fn phase(&self, phase: Phase) -> Option<&PhaseRecord> {
        self.phases.iter().find(|p| p.phase == phase)
    }
}

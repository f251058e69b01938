//! Address-translation oracle: tells an unprivileged process whether one of
//! its virtual pages is backed by a candidate physical frame.
//!
//! Verdicts never report a match that is not true. A true match is reported
//! only with the mode's per-trial probability.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::osmodel::{OsError, OsModel, Pid};
use crate::rng::SimRng;

/// Added to a scan that resolves a full physical address, per GiB of DRAM.
pub const FULL_RESOLUTION_S_PER_GIB: f64 = 120.0;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum OracleError {
    #[error("invalid oracle configuration: {0}")]
    Config(String),
    #[error("no candidates")]
    NoCandidates,
    #[error(transparent)]
    Os(#[from] OsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMode {
    Stealth,
    Fast,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    pub mode: OracleMode,
    pub tp_probability: f64,
    pub trial_cost_s: f64,
}

impl OracleConfig {
    /// One trial per second, a true positive every 4.5 s on average.
    pub fn stealth() -> Self {
        Self {
            mode: OracleMode::Stealth,
            tp_probability: 2.0 / 9.0,
            trial_cost_s: 1.0,
        }
    }

    /// 50 ms per address. The miss rate is a placeholder.
    pub fn fast() -> Self {
        Self {
            mode: OracleMode::Fast,
            tp_probability: 0.5,
            trial_cost_s: 0.05,
        }
    }

    pub fn for_mode(mode: OracleMode) -> Self {
        match mode {
            OracleMode::Stealth => Self::stealth(),
            OracleMode::Fast => Self::fast(),
        }
    }

    pub fn validate(&self) -> Result<(), OracleError> {
        if !(self.tp_probability > 0.0 && self.tp_probability <= 1.0) {
            return Err(OracleError::Config(format!(
                "tp_probability {} not in (0, 1]",
                self.tp_probability
            )));
        }
        if !(self.trial_cost_s.is_finite() && self.trial_cost_s >= 0.0) {
            return Err(OracleError::Config("trial_cost_s must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Mean simulated seconds until a true candidate is confirmed.
    pub fn expected_time_to_match(&self) -> f64 {
        self.trial_cost_s / self.tp_probability
    }
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self::stealth()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Match,
    NoEvidence,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleVerdict {
    pub outcome: Outcome,
    pub elapsed_s: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanResult {
    pub frame: Option<u64>,
    pub elapsed_s: f64,
}

fn resolve(os: &OsModel, pid: Pid, vpage: u64) -> Result<u64, OracleError> {
    os.translate(pid, vpage)?
        .ok_or(OracleError::Os(OsError::Unmapped { pid, vpage }))
}

/// One oracle trial on `candidate`.
pub fn check(
    os: &OsModel,
    pid: Pid,
    vpage: u64,
    candidate: u64,
    config: &OracleConfig,
    rng: &mut SimRng,
) -> Result<OracleVerdict, OracleError> {
    let truth = resolve(os, pid, vpage)?;
    let outcome = if truth == candidate && rng.random_bool(config.tp_probability) {
        Outcome::Match
    } else {
        Outcome::NoEvidence
    };
    Ok(OracleVerdict {
        outcome,
        elapsed_s: config.trial_cost_s,
    })
}

/// One combined probe over all candidates. The cost does not depend on the
/// number of candidates. `resolve_gib` adds the full-address surcharge for
/// that much DRAM.
pub fn scan(
    os: &OsModel,
    pid: Pid,
    vpage: u64,
    candidates: &[u64],
    config: &OracleConfig,
    resolve_gib: Option<f64>,
    rng: &mut SimRng,
) -> Result<ScanResult, OracleError> {
    if candidates.is_empty() {
        return Err(OracleError::NoCandidates);
    }
    let truth = resolve(os, pid, vpage)?;
    let present = candidates.contains(&truth);
    let hit = present && rng.random_bool(config.tp_probability);
    let surcharge = resolve_gib.map_or(0.0, |g| g * FULL_RESOLUTION_S_PER_GIB);
    Ok(ScanResult {
        frame: hit.then_some(truth),
        elapsed_s: config.trial_cost_s + surcharge,
    })
}

/// Like [`scan`] with candidates given as a sorted set.
pub fn scan_sorted(
    os: &OsModel,
    pid: Pid,
    vpage: u64,
    candidates: &std::collections::BTreeSet<u64>,
    config: &OracleConfig,
    rng: &mut SimRng,
) -> Result<ScanResult, OracleError> {
    if candidates.is_empty() {
        return Err(OracleError::NoCandidates);
    }
    let truth = resolve(os, pid, vpage)?;
    let hit = candidates.contains(&truth) && rng.random_bool(config.tp_probability);
    Ok(ScanResult {
        frame: hit.then_some(truth),
        elapsed_s: config.trial_cost_s,
    })
}

use serde::{Deserialize, Serialize};

use super::DramError;

/// Latency of an access served from the open row.
pub const ROW_HIT_NS: u64 = 50;
/// Latency of closing one row and opening another in the same bank.
pub const ROW_CONFLICT_NS: u64 = 100;
/// Latency of opening a row in a precharged bank.
pub const ROW_OPEN_NS: u64 = 100;
/// Minimum spacing of two activations of one bank.
pub const ROW_CYCLE_NS: u64 = 45;

/// Default inactivity timeout of the adaptive page policy.
pub const DEFAULT_CLOSE_TIMEOUT_NS: u64 = 200;

/// When the controller closes an open row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PagePolicy {
    /// Keep the row open until another row of the bank is needed.
    OpenPage,
    /// Precharge right after every access.
    ClosedPage,
    /// Close after `close_timeout_ns` without an access to the bank.
    Adaptive { close_timeout_ns: u64 },
}

/// Targeted row refresh: once a row reaches `threshold` activations, rows
/// within `radius` of it are refreshed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrrConfig {
    pub radius: u32,
    pub threshold: u64,
}

/// Memory-controller configuration, including hardware mitigations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerPolicy {
    pub page_policy: PagePolicy,
    /// Requests per combining window; same-row requests inside one window are
    /// served by a single activation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reorder_combine: Option<u32>,
    /// PARA probability of refreshing both neighbors on each activation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub para: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trr: Option<TrrConfig>,
    /// Maximum activation count: activations of a row beyond this many per
    /// refresh window no longer disturb its neighbors.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mac: Option<u64>,
}

impl Default for ControllerPolicy {
    fn default() -> Self {
        Self::with_page_policy(PagePolicy::Adaptive {
            close_timeout_ns: DEFAULT_CLOSE_TIMEOUT_NS,
        })
    }
}

impl ControllerPolicy {
    pub fn with_page_policy(page_policy: PagePolicy) -> Self {
        Self {
            page_policy,
            reorder_combine: None,
            para: None,
            trr: None,
            mac: None,
        }
    }

    pub fn validate(&self) -> Result<(), DramError> {
        if let Some(p) = self.para {
            if !(0.0..=1.0).contains(&p) || p.is_nan() {
                return Err(DramError::InvalidPolicy {
                    field: "para",
                    reason: format!("probability {p} not in [0,1]"),
                });
            }
        }
        if self.mac == Some(0) {
            return Err(DramError::InvalidPolicy {
                field: "mac",
                reason: "max_activations must be > 0".into(),
            });
        }
        if self.reorder_combine == Some(0) {
            return Err(DramError::InvalidPolicy {
                field: "reorder_combine",
                reason: "window must be >= 1".into(),
            });
        }
        if let Some(trr) = self.trr {
            if trr.radius == 0 || trr.threshold == 0 {
                return Err(DramError::InvalidPolicy {
                    field: "trr",
                    reason: "radius and threshold must be > 0".into(),
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conflict_costs_twice_a_hit() {
        assert_eq!(ROW_CONFLICT_NS, 2 * ROW_HIT_NS);
    }

    #[test]
    fn para_probability_is_validated() {
        let mut p = ControllerPolicy::default();
        p.para = Some(1.5);
        assert!(p.validate().is_err());
        p.para = Some(1.0);
        assert!(p.validate().is_ok());
        p.mac = Some(0);
        assert!(p.validate().is_err());
    }
}

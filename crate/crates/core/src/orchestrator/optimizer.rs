use serde::{Deserialize, Serialize};

use crate::dram::TechniqueTag;
use crate::hammer::flip_rate_from_minutes;
use crate::num::Scalar;
use crate::waylay::CHASE_ITERATION_NS;

use super::OrchestratorError;

/// Cost of one prefetch oracle test.
pub const ORACLE_TEST_S: f64 = 0.05;
/// Translation cost per 2^30 bytes of physical memory.
pub const TRANSLATION_S_PER_GIB: f64 = 120.0;
/// (offset, direction) pairs per 4 KiB page.
pub const BIT_OFFSETS_PER_PAGE: f64 = 65536.0;
pub const PAGE_BYTES: f64 = 4096.0;

/// Inputs of the runtime model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerInput<T> {
    /// Installed physical memory, bytes.
    pub memory_bytes: T,
    /// Seconds per relocation of the target page.
    pub relocation_s: T,
    /// Flips per second while templating.
    pub flip_rate: T,
    /// Exploitable bit offsets in the target page.
    pub exploitable: T,
}

impl<T: Scalar> OptimizerInput<T> {
    pub fn validate(&self) -> Result<(), OrchestratorError> {
        let positive = |v: T, name: &str| {
            if v > T::zero() && v.is_finite() {
                Ok(())
            } else {
                Err(OrchestratorError::Config(format!("{name} must be finite and > 0")))
            }
        };
        positive(self.memory_bytes, "memory_bytes")?;
        positive(self.flip_rate, "flip_rate")?;
        positive(self.exploitable, "exploitable")?;
        if !(self.relocation_s >= T::zero() && self.relocation_s.is_finite()) {
            return Err(OrchestratorError::Config("relocation_s must be finite and >= 0".into()));
        }
        if self.exploitable > T::lit(BIT_OFFSETS_PER_PAGE) {
            return Err(OrchestratorError::Config("exploitable must be <= 65536".into()));
        }
        Ok(())
    }

    fn pages(&self) -> T {
        self.memory_bytes / T::lit(PAGE_BYTES)
    }

    fn translation_s(&self) -> T {
        T::lit(TRANSLATION_S_PER_GIB) * self.memory_bytes / T::lit((1u64 << 30) as f64)
    }

    /// Templating time for `n` flips, translation included.
    pub fn templating_s(&self, n: u64) -> T {
        T::count(n) * T::lit(BIT_OFFSETS_PER_PAGE) / (self.flip_rate * self.exploitable) + self.translation_s()
    }

    /// Waylaying time with `n` target frames.
    pub fn waylaying_s(&self, n: u64) -> T {
        let n = T::count(n);
        self.pages() * (self.relocation_s + n * T::lit(ORACLE_TEST_S)) / n
    }

    pub fn runtime(&self, n: u64) -> T {
        assert!(n >= 1, "n must be >= 1");
        self.templating_s(n) + self.waylaying_s(n)
    }

    /// Minimizer of the continuous relaxation.
    pub fn analytic_n(&self) -> T {
        let a = self.pages() * self.relocation_s;
        let b = T::lit(BIT_OFFSETS_PER_PAGE) / (self.flip_rate * self.exploitable);
        (a / b).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackPlan<T> {
    pub n: u64,
    pub templating_s: T,
    pub waylaying_s: T,
    pub total_s: T,
}

impl<T: Scalar> AttackPlan<T> {
    pub fn hours(&self) -> (T, T, T) {
        let h = T::lit(3600.0);
        (self.templating_s / h, self.waylaying_s / h, self.total_s / h)
    }
}

/// Exact integer minimum over `1..=bound`; ties go to the smaller n.
pub fn optimize_n<T: Scalar>(input: &OptimizerInput<T>, bound: u64) -> Result<AttackPlan<T>, OrchestratorError> {
    input.validate()?;
    if bound == 0 {
        return Err(OrchestratorError::Config("search bound must be >= 1".into()));
    }
    let mut best = 1;
    let mut best_t = input.runtime(1);
    for n in 2..=bound {
        let t = input.runtime(n);
        if t < best_t {
            best = n;
            best_t = t;
        }
    }
    Ok(AttackPlan {
        n: best,
        templating_s: input.templating_s(best),
        waylaying_s: input.waylaying_s(best),
        total_s: best_t,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Waylaying,
    Chasing,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Waylaying => "waylaying",
            Method::Chasing => "chasing",
        }
    }
}

/// Flip rate of one hammering technique.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TechniqueProfile {
    pub technique: TechniqueTag,
    pub flip_rate: f64,
}

/// Machine-wide inputs shared by all rows of a plan table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanBase {
    pub memory_bytes: f64,
    /// One waylaying eviction, seconds.
    pub waylay_relocation_s: f64,
    pub exploitable: f64,
    pub search_bound: u64,
}

impl Default for PlanBase {
    /// 12 GiB desktop, 2.68 s per eviction, 29 exploitable offsets.
    fn default() -> Self {
        Self {
            memory_bytes: 12.0 * (1u64 << 30) as f64,
            waylay_relocation_s: 2.68,
            exploitable: 29.0,
            search_bound: 100_000,
        }
    }
}

impl PlanBase {
    /// Per-relocation cost of a method. Chasing pays one fork step per
    /// relocation plus one eviction spread over a full pass of memory.
    pub fn relocation_s(&self, method: Method) -> f64 {
        match method {
            Method::Waylaying => self.waylay_relocation_s,
            Method::Chasing => {
                CHASE_ITERATION_NS as f64 * 1e-9 + self.waylay_relocation_s / (self.memory_bytes / PAGE_BYTES)
            }
        }
    }
}

/// Flip rates from minutes per target flip with 29 exploitable offsets:
/// 17, 19 and 56 minutes.
pub fn default_profiles() -> Vec<TechniqueProfile> {
    [
        (TechniqueTag::DoubleSided, 17.0),
        (TechniqueTag::SingleSided, 19.0),
        (TechniqueTag::OneLocation, 56.0),
    ]
    .into_iter()
    .map(|(technique, minutes)| TechniqueProfile {
        technique,
        flip_rate: flip_rate_from_minutes(minutes, 29.0),
    })
    .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanRow {
    pub technique: TechniqueTag,
    pub method: Method,
    pub plan: AttackPlan<f64>,
}

/// One optimized plan per (method, technique), methods outermost.
pub fn plan_table(
    base: &PlanBase,
    profiles: &[TechniqueProfile],
    methods: &[Method],
) -> Result<Vec<PlanRow>, OrchestratorError> {
    let mut rows = Vec::new();
    for &method in methods {
        for p in profiles {
            let input = OptimizerInput {
                memory_bytes: base.memory_bytes,
                relocation_s: base.relocation_s(method),
                flip_rate: p.flip_rate,
                exploitable: base.exploitable,
            };
            rows.push(PlanRow {
                technique: p.technique,
                method,
                plan: optimize_n(&input, base.search_bound)?,
            });
        }
    }
    Ok(rows)
}

pub fn plan_csv(rows: &[PlanRow]) -> String {
    let mut out = String::from("technique,method,n,templating_h,waylaying_h,total_h\n");
    for r in rows {
        let (t, w, total) = r.plan.hours();
        out.push_str(&format!(
            "{},{},{},{t:.3},{w:.3},{total:.3}\n",
            r.technique.label(),
            r.method.label(),
            r.plan.n
        ));
    }
    out
}

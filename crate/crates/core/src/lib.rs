//! Seeded co-simulation of DRAM disturbance errors, OS page placement and
//! software Rowhammer defenses.

pub mod defenses;
pub mod dram;
pub mod hammer;
pub mod memory;
pub mod num;
pub mod opflip;
pub mod oracle;
pub mod orchestrator;
pub mod osmodel;
pub mod rng;
pub mod waylay;

pub use num::Scalar;

pub type OptimizerInput = orchestrator::OptimizerInput<f64>;
pub type AttackPlan = orchestrator::AttackPlan<f64>;

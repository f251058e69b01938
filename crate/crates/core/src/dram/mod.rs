//! DRAM device and memory-controller model.
//!
//! Rows are opened (activated) according to the page policy; every activation
//! disturbs the two adjacent rows of the same bank. Disturbance accumulates
//! until the victim row's staggered refresh, at which point each cell whose
//! threshold has been reached and whose value matches its orientation flips.

mod cells;
mod geometry;
mod policy;
mod state;


pub use cells::{CellMap, CellMapParams, Orientation, RowCells, VulnerableCell};
pub use geometry::{DramGeometry, DramLocation, RefreshMode, RowId, DEFAULT_REFRESH_WINDOW_NS};
pub use policy::{
    ControllerPolicy, PagePolicy, TrrConfig, DEFAULT_CLOSE_TIMEOUT_NS, ROW_CONFLICT_NS, ROW_CYCLE_NS,
    ROW_HIT_NS, ROW_OPEN_NS,
};
pub use state::{AccessKind, AccessResult, DramState, FlipDirection, FlipRecord, TechniqueTag};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DramError {
    #[error("physical address {addr:#x} beyond DRAM capacity {capacity:#x}")]
    AddressOutOfRange { addr: u64, capacity: u64 },
    #[error("invalid geometry field `{field}`: {reason}")]
    InvalidGeometry { field: &'static str, reason: String },
    #[error("invalid controller policy field `{field}`: {reason}")]
    InvalidPolicy { field: &'static str, reason: String },
    #[error("invalid cell map field `{field}`: {reason}")]
    InvalidCellMap { field: &'static str, reason: String },
}

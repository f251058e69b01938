//! Per-cell disturbance thresholds.
//!
//! A cell flips when the disturbance its row accumulated since its last refresh
//! reaches the cell's threshold and its stored value matches its orientation.
//! Thresholds are log-normal; a fraction `1 - density` of cells never flips.
//! Rows are generated lazily from `(seed, bank, row)` so the map never has to
//! be materialized.

use std::collections::HashMap;
use std::rc::Rc;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::geometry::RowId;
use super::DramError;
use crate::rng::{mix64, SimRng};

/// Which stored value a cell loses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    /// Charged state is 1; flips 1 -> 0.
    TrueCell,
    /// Charged state is 0; flips 0 -> 1.
    AntiCell,
}

impl Orientation {
    /// Value the cell must hold to be able to flip.
    pub fn source_value(self) -> bool {
        matches!(self, Orientation::TrueCell)
    }
}

/// Generator parameters of a [`CellMap`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellMapParams {
    pub seed: u64,
    /// Fraction of cells with a finite threshold.
    pub density: f64,
    /// Mean of ln(threshold).
    pub mu: f64,
    /// Standard deviation of ln(threshold).
    pub sigma: f64,
    /// Probability that a vulnerable cell is an anti cell.
    pub anti_fraction: f64,
    /// Largest disturbance the model resolves; cells above it are never
    /// reached within one refresh window.
    pub threshold_cap: u64,
}

impl CellMapParams {
    pub fn validate(&self) -> Result<(), DramError> {
        let bad = |field: &'static str, reason: &str| {
            Err(DramError::InvalidCellMap {
                field,
                reason: reason.to_string(),
            })
        };
        if !(0.0..=1.0).contains(&self.density) {
            return bad("density", "must be in [0,1]");
        }
        if !(0.0..=1.0).contains(&self.anti_fraction) {
            return bad("anti_fraction", "must be in [0,1]");
        }
        if !self.sigma.is_finite() || self.sigma <= 0.0 {
            return bad("sigma", "must be > 0");
        }
        if !self.mu.is_finite() {
            return bad("mu", "must be finite");
        }
        if self.threshold_cap == 0 {
            return bad("threshold_cap", "must be > 0");
        }
        Ok(())
    }

    /// Probability that a single cell has a finite threshold at or below `d`.
    pub fn vulnerable_probability(&self, d: f64) -> f64 {
        if d <= 0.0 {
            return 0.0;
        }
        let z = (d.ln() - self.mu) / self.sigma;
        self.density * Normal::standard().cdf(z)
    }
}

/// A cell with a threshold at or below the cap.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VulnerableCell {
    /// Bit index within the row.
    pub bit: u32,
    pub threshold: u64,
    pub orientation: Orientation,
}

/// Cells of one row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RowCells {
    /// Cells with a finite threshold, including those above the cap.
    pub finite: u32,
    /// Cells with threshold <= cap, ascending by threshold.
    pub cells: Vec<VulnerableCell>,
}

impl RowCells {
    /// Cells that a disturbance of `d` reaches.
    pub fn reached_by(&self, d: u64) -> &[VulnerableCell] {
        let end = self.cells.partition_point(|c| c.threshold <= d);
        &self.cells[..end]
    }
}

const ROW_CACHE_LIMIT: usize = 1 << 16;

/// Lazily generated vulnerability map.
#[derive(Debug)]
pub struct CellMap {
    params: CellMapParams,
    row_bits: u32,
    cap_probability: f64,
    cache: HashMap<RowId, Rc<RowCells>>,
}

impl CellMap {
    pub fn new(params: CellMapParams, row_bits: u32) -> Result<Self, DramError> {
        params.validate()?;
        let z = ((params.threshold_cap as f64).ln() - params.mu) / params.sigma;
        let cap_probability = Normal::standard().cdf(z);
        Ok(Self {
            params,
            row_bits,
            cap_probability,
            cache: HashMap::new(),
        })
    }

    pub fn params(&self) -> &CellMapParams {
        &self.params
    }

    /// Cells of `id`; identical for identical parameters.
    pub fn row(&mut self, id: RowId) -> Rc<RowCells> {
        if let Some(cells) = self.cache.get(&id) {
            return Rc::clone(cells);
        }
        if self.cache.len() >= ROW_CACHE_LIMIT {
            self.cache.clear();
        }
        let cells = Rc::new(self.generate(id));
        self.cache.insert(id, Rc::clone(&cells));
        cells
    }

    fn generate(&self, id: RowId) -> RowCells {
        let p = &self.params;
        let seed = mix64(p.seed ^ mix64((u64::from(id.bank) << 32) | u64::from(id.row)));
        let mut rng = SimRng::seed_from_u64(seed);
        let finite = if p.density <= 0.0 {
            0
        } else {
            Binomial::new(u64::from(self.row_bits), p.density)
                .expect("validated density")
                .sample(&mut rng) as u32
        };
        let low = if finite == 0 || self.cap_probability <= 0.0 {
            0
        } else {
            Binomial::new(u64::from(finite), self.cap_probability.min(1.0))
                .expect("probability in range")
                .sample(&mut rng) as usize
        };
        let normal = Normal::standard();
        let positions = index::sample(&mut rng, self.row_bits as usize, low);
        let mut cells: Vec<VulnerableCell> = positions
            .into_iter()
            .map(|bit| {
                let u: f64 = rng.random::<f64>() * self.cap_probability;
                let z = normal.inverse_cdf(u.max(f64::MIN_POSITIVE));
                let threshold = (p.mu + p.sigma * z).exp().ceil().clamp(1.0, p.threshold_cap as f64);
                let orientation = if rng.random::<f64>() < p.anti_fraction {
                    Orientation::AntiCell
                } else {
                    Orientation::TrueCell
                };
                VulnerableCell {
                    bit: bit as u32,
                    threshold: threshold as u64,
                    orientation,
                }
            })
            .collect();
        cells.sort_by_key(|c| (c.threshold, c.bit));
        RowCells { finite, cells }
    }
}

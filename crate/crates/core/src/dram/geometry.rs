use serde::{Deserialize, Serialize};

use super::DramError;
use crate::memory::PAGE_SIZE;

/// Refresh rate setting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefreshMode {
    Normal,
    /// Twice the refresh rate, i.e. half the refresh window.
    Double,
}

/// DRAM organization and refresh timing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DramGeometry {
    pub channels: u32,
    pub ranks: u32,
    /// Banks across all channels and ranks.
    pub banks_total: u32,
    pub rows_per_bank: u32,
    /// Bytes per row.
    pub row_size: u32,
    /// Nominal refresh window in simulated nanoseconds.
    pub refresh_window_ns: u64,
    pub refresh_mode: RefreshMode,
}

/// A (bank, row) pair; `bank` is the global bank index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RowId {
    pub bank: u32,
    pub row: u32,
}

/// Decoded DRAM coordinates of a physical address.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DramLocation {
    pub channel: u32,
    pub rank: u32,
    /// Global bank index in `0..banks_total`.
    pub bank: u32,
    pub row: u32,
    /// Byte offset within the row.
    pub column: u32,
}

impl DramLocation {
    pub fn row_id(&self) -> RowId {
        RowId {
            bank: self.bank,
            row: self.row,
        }
    }
}

/// Default refresh window: 64 ms.
pub const DEFAULT_REFRESH_WINDOW_NS: u64 = 64_000_000;

/// Bit position of the second bank-index slice relative to the first.
const BANK_XOR_SHIFT: u32 = 4;

impl DramGeometry {
    /// 16 GiB dual-channel dual-rank DDR4 (64 banks, 32768 rows of 8 KiB).
    pub fn ddr4_16gib() -> Self {
        Self {
            channels: 2,
            ranks: 2,
            banks_total: 64,
            rows_per_bank: 1 << 15,
            row_size: 8192,
            refresh_window_ns: DEFAULT_REFRESH_WINDOW_NS,
            refresh_mode: RefreshMode::Normal,
        }
    }

    /// 8 GiB dual-channel dual-rank DDR3 (32 banks).
    pub fn ddr3_8gib() -> Self {
        Self {
            channels: 2,
            ranks: 2,
            banks_total: 32,
            rows_per_bank: 1 << 15,
            row_size: 8192,
            refresh_window_ns: DEFAULT_REFRESH_WINDOW_NS,
            refresh_mode: RefreshMode::Normal,
        }
    }

    /// Small single-channel module for fast scenarios: `banks` x `rows` x 8 KiB.
    pub fn small(banks: u32, rows: u32) -> Self {
        Self {
            channels: 1,
            ranks: 1,
            banks_total: banks,
            rows_per_bank: rows,
            row_size: 8192,
            refresh_window_ns: DEFAULT_REFRESH_WINDOW_NS,
            refresh_mode: RefreshMode::Normal,
        }
    }

    pub fn validate(&self) -> Result<(), DramError> {
        let bad = |field: &'static str, reason: &str| {
            Err(DramError::InvalidGeometry {
                field,
                reason: reason.to_string(),
            })
        };
        if self.channels == 0 || !self.channels.is_power_of_two() {
            return bad("channels", "must be a power of two >= 1");
        }
        if self.ranks == 0 || !self.ranks.is_power_of_two() {
            return bad("ranks", "must be a power of two >= 1");
        }
        if !self.banks_total.is_power_of_two() || self.banks_total % (self.channels * self.ranks) != 0 {
            return bad(
                "banks_total",
                "must be a power of two and a multiple of channels x ranks",
            );
        }
        if !self.rows_per_bank.is_power_of_two() || self.rows_per_bank < 4 {
            return bad("rows_per_bank", "must be a power of two >= 4");
        }
        if !self.row_size.is_power_of_two() || (self.row_size as usize) < PAGE_SIZE {
            return bad("row_size", "must be a power of two >= 4096");
        }
        if self.refresh_window_ns == 0 {
            return bad("refresh_window_ns", "must be > 0");
        }
        Ok(())
    }

    pub fn banks_per_rank(&self) -> u32 {
        self.banks_total / (self.channels * self.ranks)
    }

    pub fn capacity(&self) -> u64 {
        u64::from(self.row_size) * u64::from(self.rows_per_bank) * u64::from(self.banks_total)
    }

    pub fn total_frames(&self) -> u64 {
        self.capacity() / PAGE_SIZE as u64
    }

    pub fn frames_per_row(&self) -> u32 {
        self.row_size / PAGE_SIZE as u32
    }

    /// Bits per row.
    pub fn row_bits(&self) -> u32 {
        self.row_size * 8
    }

    /// Refresh window after applying the refresh mode.
    pub fn effective_refresh_window_ns(&self) -> u64 {
        match self.refresh_mode {
            RefreshMode::Normal => self.refresh_window_ns,
            RefreshMode::Double => self.refresh_window_ns / 2,
        }
    }

    /// Offset of `row` within the staggered refresh schedule.
    pub fn refresh_phase_ns(&self, row: u32) -> u64 {
        let window = self.effective_refresh_window_ns();
        (u128::from(window) * u128::from(row) / u128::from(self.rows_per_bank)) as u64
    }

    /// First refresh of `row` strictly after `t`.
    pub fn next_refresh_after(&self, row: u32, t: u64) -> u64 {
        let window = self.effective_refresh_window_ns();
        let phase = self.refresh_phase_ns(row);
        if t < phase {
            phase
        } else {
            phase + ((t - phase) / window + 1) * window
        }
    }

    fn column_bits(&self) -> u32 {
        self.row_size.trailing_zeros()
    }

    fn bank_bits(&self) -> u32 {
        self.banks_total.trailing_zeros()
    }

    /// Maps a physical address onto DRAM coordinates.
    ///
    /// The column is the low `log2(row_size)` bits. The bank index is the next
    /// `log2(banks)` bits XOR-ed with the same-width slice four bits higher. The
    /// row index is everything above the bank slice.
    pub fn map_address(&self, addr: u64) -> Result<DramLocation, DramError> {
        if addr >= self.capacity() {
            return Err(DramError::AddressOutOfRange {
                addr,
                capacity: self.capacity(),
            });
        }
        Ok(self.map_unchecked(addr))
    }

    pub(crate) fn map_unchecked(&self, addr: u64) -> DramLocation {
        let c = self.column_bits();
        let b = self.bank_bits();
        let bank_mask = (1u64 << b) - 1;
        let column = (addr & ((1u64 << c) - 1)) as u32;
        let low = (addr >> c) & bank_mask;
        let high = (addr >> (c + BANK_XOR_SHIFT)) & bank_mask;
        let bank = (low ^ high) as u32;
        let row = (addr >> (c + b)) as u32;
        DramLocation {
            channel: bank % self.channels,
            rank: (bank / self.channels) % self.ranks,
            bank,
            row,
            column,
        }
    }

    /// Row holding `addr`. Panics on out-of-range addresses.
    pub fn row_of(&self, addr: u64) -> RowId {
        assert!(addr < self.capacity(), "address {addr:#x} out of range");
        self.map_unchecked(addr).row_id()
    }

    /// Inverse of [`map_address`](Self::map_address).
    pub fn phys_addr(&self, bank: u32, row: u32, column: u32) -> u64 {
        let c = self.column_bits();
        let b = self.bank_bits();
        let row = u64::from(row);
        // Solve the bank slice from its top bit down: the XOR partner of slice
        // bit j is either a row bit or a higher slice bit already solved.
        let mut slice = 0u64;
        for j in (0..b).rev() {
            let partner_bit = c + BANK_XOR_SHIFT + j;
            let partner = if partner_bit >= c + b {
                (row >> (partner_bit - c - b)) & 1
            } else {
                (slice >> (j + BANK_XOR_SHIFT)) & 1
            };
            let bank_bit = u64::from(bank >> j) & 1;
            slice |= (bank_bit ^ partner) << j;
        }
        u64::from(column) | (slice << c) | (row << (c + b))
    }

    /// Frame index and page-relative bit offset of bit `bit` within a row.
    pub fn cell_frame_bit(&self, id: RowId, bit: u32) -> (u64, u32) {
        let byte = bit / 8;
        let addr = self.phys_addr(id.bank, id.row, byte);
        let frame = addr / PAGE_SIZE as u64;
        let page_bit = ((addr % PAGE_SIZE as u64) as u32) * 8 + bit % 8;
        (frame, page_bit)
    }

    /// Frames stored in a row, in column order.
    pub fn row_frames(&self, id: RowId) -> Vec<u64> {
        (0..self.frames_per_row())
            .map(|i| self.phys_addr(id.bank, id.row, i * PAGE_SIZE as u32) / PAGE_SIZE as u64)
            .collect()
    }

    /// Row holding a frame.
    pub fn frame_row(&self, frame: u64) -> RowId {
        self.row_of(frame * PAGE_SIZE as u64)
    }

    /// Rows directly adjacent to `id` in the same bank.
    pub fn neighbors(&self, id: RowId) -> impl Iterator<Item = RowId> + '_ {
        let below = id.row.checked_sub(1);
        let above = (id.row + 1 < self.rows_per_bank).then_some(id.row + 1);
        below.into_iter().chain(above).map(move |row| RowId { bank: id.bank, row })
    }
}

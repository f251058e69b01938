//! Physical memory contents.
//!
//! Contents are sparse: a frame reads as its fill pattern until it is written
//! explicitly or a bit in it flips.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::rng::mix64;

/// Bytes per frame.
pub const PAGE_SIZE: usize = 4096;
/// Bit offsets per frame.
pub const PAGE_BITS: u32 = (PAGE_SIZE * 8) as u32;

/// Initial content of frames that were never written.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fill {
    Zeros,
    Ones,
    /// Pseudo-random content, a pure function of (seed, frame, byte).
    Random { seed: u64 },
}

/// Sparse physical memory image.
#[derive(Clone, Debug)]
pub struct PhysMemory {
    fill: Fill,
    pages: HashMap<u64, Box<[u8]>>,
    toggled: HashMap<u64, Vec<u16>>,
}

impl PhysMemory {
    pub fn new(fill: Fill) -> Self {
        Self {
            fill,
            pages: HashMap::new(),
            toggled: HashMap::new(),
        }
    }

    pub fn fill(&self) -> Fill {
        self.fill
    }

    fn fill_byte(&self, frame: u64, index: usize) -> u8 {
        match self.fill {
            Fill::Zeros => 0,
            Fill::Ones => 0xff,
            Fill::Random { seed } => {
                let word = mix64(seed ^ mix64(frame.wrapping_mul(512) + (index / 8) as u64));
                (word >> ((index % 8) * 8)) as u8
            }
        }
    }

    /// Reads one bit. `bit` is the page-relative bit offset (byte * 8 + bit-in-byte).
    pub fn read_bit(&self, frame: u64, bit: u32) -> bool {
        let byte = (bit / 8) as usize;
        let mask = 1u8 << (bit % 8);
        if let Some(page) = self.pages.get(&frame) {
            return page[byte] & mask != 0;
        }
        let base = self.fill_byte(frame, byte) & mask != 0;
        let toggled = self
            .toggled
            .get(&frame)
            .is_some_and(|bits| bits.iter().filter(|&&b| u32::from(b) == bit).count() % 2 == 1);
        base ^ toggled
    }

    /// Inverts one bit.
    pub fn toggle_bit(&mut self, frame: u64, bit: u32) {
        let byte = (bit / 8) as usize;
        let mask = 1u8 << (bit % 8);
        if let Some(page) = self.pages.get_mut(&frame) {
            page[byte] ^= mask;
            return;
        }
        let bits = self.toggled.entry(frame).or_default();
        if let Some(pos) = bits.iter().position(|&b| u32::from(b) == bit) {
            bits.swap_remove(pos);
            if bits.is_empty() {
                self.toggled.remove(&frame);
            }
        } else {
            bits.push(bit as u16);
        }
    }

    /// Overwrites a whole frame.
    pub fn write_page(&mut self, frame: u64, content: &[u8]) {
        assert_eq!(content.len(), PAGE_SIZE, "page writes are whole frames");
        self.toggled.remove(&frame);
        self.pages.insert(frame, content.to_vec().into_boxed_slice());
    }

    /// Current content of a frame.
    pub fn read_page(&self, frame: u64) -> Vec<u8> {
        if let Some(page) = self.pages.get(&frame) {
            return page.to_vec();
        }
        let mut out: Vec<u8> = (0..PAGE_SIZE).map(|i| self.fill_byte(frame, i)).collect();
        if let Some(bits) = self.toggled.get(&frame) {
            for &b in bits {
                out[usize::from(b) / 8] ^= 1 << (b % 8);
            }
        }
        out
    }

    /// Copies one frame onto another.
    pub fn copy_page(&mut self, from: u64, to: u64) {
        let content = self.read_page(from);
        self.write_page(to, &content);
    }

    /// Drops any writes and flips, returning the frame to its fill pattern.
    pub fn reset_frame(&mut self, frame: u64) {
        self.pages.remove(&frame);
        self.toggled.remove(&frame);
    }

    /// Number of frames holding explicit or flipped content.
    pub fn materialized_frames(&self) -> usize {
        self.pages.len() + self.toggled.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toggling_twice_restores_fill() {
        let mut mem = PhysMemory::new(Fill::Random { seed: 3 });
        let before = mem.read_page(10);
        mem.toggle_bit(10, 12345);
        assert_ne!(mem.read_page(10), before);
        assert_eq!(mem.read_bit(10, 12345), before[12345 / 8] & (1 << (12345 % 8)) == 0);
        mem.toggle_bit(10, 12345);
        assert_eq!(mem.read_page(10), before);
        assert_eq!(mem.materialized_frames(), 0);
    }

    #[test]
    fn written_pages_take_precedence() {
        let mut mem = PhysMemory::new(Fill::Ones);
        let page = vec![0u8; PAGE_SIZE];
        mem.write_page(1, &page);
        assert!(!mem.read_bit(1, 7));
        mem.toggle_bit(1, 7);
        assert!(mem.read_bit(1, 7));
        assert_eq!(mem.read_page(1)[0], 0x80);
        mem.reset_frame(1);
        assert!(mem.read_bit(1, 0));
    }

    #[test]
    fn random_fill_is_a_function_of_coordinates() {
        let a = PhysMemory::new(Fill::Random { seed: 9 });
        let b = PhysMemory::new(Fill::Random { seed: 9 });
        assert_eq!(a.read_page(77), b.read_page(77));
        let ones: u32 = a.read_page(77).iter().map(|b| b.count_ones()).sum();
        assert!((14_000..18_800).contains(&ones), "{ones}");
    }
}

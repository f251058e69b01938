use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::OsError;
use crate::dram::DramGeometry;
use crate::rng::SimRng;

pub type Pid = u32;

/// A page of a registered file.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FilePageId {
    pub file: u32,
    pub index: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelUse {
    Data,
    PageTable,
}

/// Who holds a physical frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameOwner {
    Free,
    Kernel(KernelUse),
    User(Pid),
    PageCache(FilePageId),
    Epc,
}

impl fmt::Display for FrameOwner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FrameOwner::Free => write!(f, "free"),
            FrameOwner::Kernel(KernelUse::Data) => write!(f, "kernel"),
            FrameOwner::Kernel(KernelUse::PageTable) => write!(f, "page_table"),
            FrameOwner::User(pid) => write!(f, "user({pid})"),
            FrameOwner::PageCache(p) => write!(f, "page_cache({}:{})", p.file, p.index),
            FrameOwner::Epc => write!(f, "epc"),
        }
    }
}

/// Frame allocation policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Allocator {
    /// Uniformly random free frame.
    Default,
    /// Kernel frames live in rows `< kernel_rows` of every bank, user frames
    /// in rows `>= kernel_rows + gap_rows`; the rows in between stay unused.
    Catt { kernel_rows: u32, gap_rows: u32 },
}

/// Default number of unused rows between the CATT partitions.
pub const DEFAULT_CATT_GAP_ROWS: u32 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Partition {
    Kernel,
    User,
    Gap,
}

const NOT_POOLED: u32 = u32::MAX;

/// Frame ownership plus the free pools the allocator draws from.
#[derive(Clone, Debug)]
pub struct FrameTable {
    owners: Vec<FrameOwner>,
    geometry: DramGeometry,
    allocator: Allocator,
    pools: [Vec<u64>; 2],
    position: Vec<u32>,
    hot: Option<u64>,
}

impl FrameTable {
    /// `frames` usable frames starting at frame 0; all start free.
    pub fn new(geometry: DramGeometry, frames: u64, allocator: Allocator) -> Result<Self, OsError> {
        if frames == 0 || frames > geometry.total_frames() {
            return Err(OsError::Config(format!(
                "frame count {frames} outside 1..={}",
                geometry.total_frames()
            )));
        }
        if let Allocator::Catt { kernel_rows, gap_rows } = allocator {
            if kernel_rows == 0 || kernel_rows + gap_rows >= geometry.rows_per_bank {
                return Err(OsError::Config("catt partitions do not fit the geometry".into()));
            }
        }
        let mut table = Self {
            owners: vec![FrameOwner::Free; frames as usize],
            geometry,
            allocator,
            pools: [Vec::new(), Vec::new()],
            position: vec![NOT_POOLED; frames as usize],
            hot: None,
        };
        for frame in 0..frames {
            table.pool_insert(frame);
        }
        Ok(table)
    }

    pub fn len(&self) -> u64 {
        self.owners.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.owners.is_empty()
    }

    pub fn geometry(&self) -> &DramGeometry {
        &self.geometry
    }

    pub fn allocator(&self) -> Allocator {
        self.allocator
    }

    pub fn owner(&self, frame: u64) -> FrameOwner {
        self.owners[frame as usize]
    }

    pub fn owners(&self) -> &[FrameOwner] {
        &self.owners
    }

    pub fn partition_of(&self, frame: u64) -> Partition {
        match self.allocator {
            Allocator::Default => Partition::User,
            Allocator::Catt { kernel_rows, gap_rows } => {
                let row = self.geometry.frame_row(frame).row;
                if row < kernel_rows {
                    Partition::Kernel
                } else if row < kernel_rows + gap_rows {
                    Partition::Gap
                } else {
                    Partition::User
                }
            }
        }
    }

    fn pool_index(&self, partition: Partition) -> Option<usize> {
        match (self.allocator, partition) {
            (Allocator::Default, _) => Some(1),
            (_, Partition::Kernel) => Some(0),
            (_, Partition::User) => Some(1),
            (_, Partition::Gap) => None,
        }
    }

    fn owner_partition(owner: FrameOwner) -> Partition {
        match owner {
            FrameOwner::Kernel(_) => Partition::Kernel,
            _ => Partition::User,
        }
    }

    fn pool_insert(&mut self, frame: u64) {
        if let Some(i) = self.pool_index(self.partition_of(frame)) {
            self.position[frame as usize] = self.pools[i].len() as u32;
            self.pools[i].push(frame);
        }
    }

    fn pool_remove(&mut self, frame: u64) {
        let pos = self.position[frame as usize];
        if pos == NOT_POOLED {
            return;
        }
        let i = self.pool_index(self.partition_of(frame)).expect("pooled frame has a pool");
        let pool = &mut self.pools[i];
        let last = pool.pop().expect("non-empty pool");
        if last != frame {
            pool[pos as usize] = last;
            self.position[last as usize] = pos;
        }
        self.position[frame as usize] = NOT_POOLED;
    }

    /// Free frames available to `owner`.
    pub fn free_count_for(&self, owner: FrameOwner) -> u64 {
        self.pool_index(Self::owner_partition(owner))
            .map_or(0, |i| self.pools[i].len() as u64)
    }

    /// Free frames in all pools.
    pub fn free_count(&self) -> u64 {
        match self.allocator {
            Allocator::Default => self.pools[1].len() as u64,
            Allocator::Catt { .. } => (self.pools[0].len() + self.pools[1].len()) as u64,
        }
    }

    /// Draws a uniformly random free frame from `owner`'s partition.
    pub fn alloc(&mut self, owner: FrameOwner, rng: &mut SimRng) -> Result<u64, OsError> {
        assert!(owner != FrameOwner::Free, "allocating for the free owner");
        let partition = Self::owner_partition(owner);
        if let Some(hot) = self.hot.take() {
            if self.owners[hot as usize] == FrameOwner::Free
                && self.position[hot as usize] != NOT_POOLED
                && self.partition_of(hot) == partition
            {
                self.take(hot, owner);
                return Ok(hot);
            }
        }
        let i = self.pool_index(partition).ok_or(OsError::OutOfMemory)?;
        let pool = &self.pools[i];
        if pool.is_empty() {
            return Err(OsError::OutOfMemory);
        }
        let frame = pool[rng.random_range(0..pool.len())];
        self.take(frame, owner);
        Ok(frame)
    }

    /// Claims a specific free frame.
    pub fn take(&mut self, frame: u64, owner: FrameOwner) {
        assert_eq!(self.owners[frame as usize], FrameOwner::Free, "frame {frame} not free");
        self.pool_remove(frame);
        self.owners[frame as usize] = owner;
    }

    /// Reassigns an allocated frame without freeing it.
    pub fn transfer(&mut self, frame: u64, owner: FrameOwner) {
        assert_ne!(self.owners[frame as usize], FrameOwner::Free);
        assert_ne!(owner, FrameOwner::Free);
        self.owners[frame as usize] = owner;
    }

    pub fn free(&mut self, frame: u64) {
        assert_ne!(self.owners[frame as usize], FrameOwner::Free, "double free of {frame}");
        self.owners[frame as usize] = FrameOwner::Free;
        self.pool_insert(frame);
    }

    /// Frees `frame` so that the very next allocation in its partition reuses
    /// it, as a per-CPU free list does.
    pub fn free_hot(&mut self, frame: u64) {
        self.free(frame);
        self.hot = Some(frame);
    }

    /// Number of frames per owner class, for accounting checks.
    pub fn census(&self) -> Census {
        let mut c = Census::default();
        for o in &self.owners {
            match o {
                FrameOwner::Free => c.free += 1,
                FrameOwner::Kernel(_) => c.kernel += 1,
                FrameOwner::User(_) => c.user += 1,
                FrameOwner::PageCache(_) => c.page_cache += 1,
                FrameOwner::Epc => c.epc += 1,
            }
        }
        c
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Census {
    pub free: u64,
    pub kernel: u64,
    pub user: u64,
    pub page_cache: u64,
    pub epc: u64,
}

impl Census {
    pub fn total(&self) -> u64 {
        self.free + self.kernel + self.user + self.page_cache + self.epc
    }
}

//! Operating-system model: frame allocation, the page cache with
//! executable-aware reclaim, processes with copy-on-write fork, and the
//! kernel's direct physical map.

mod frames;

use std::collections::{BTreeMap, HashMap, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dram::{DramGeometry, FlipDirection};
use crate::memory::{PhysMemory, PAGE_BITS, PAGE_SIZE};
use crate::rng::SimRng;

pub use frames::{
    Allocator, Census, FilePageId, FrameOwner, FrameTable, KernelUse, Partition, Pid,
    DEFAULT_CATT_GAP_ROWS,
};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum OsError {
    #[error("out of memory")]
    OutOfMemory,
    #[error("no such process {0}")]
    NoProcess(Pid),
    #[error("process {pid} has no mapping at page {vpage:#x}")]
    Unmapped { pid: Pid, vpage: u64 },
    #[error("page {vpage:#x} of process {pid} is not writable")]
    ReadOnly { pid: Pid, vpage: u64 },
    #[error("frame {0} is free")]
    FrameFree(u64),
    #[error("file page {0:?} is not cached")]
    NotCached(FilePageId),
    #[error("no such file page {0:?}")]
    NoFilePage(FilePageId),
    #[error("invalid os configuration: {0}")]
    Config(String),
}

/// Kernel virtual base of the direct physical map.
pub const DIRECT_MAP_BASE: u64 = 0xffff_8880_0000_0000;

/// The kernel's linear mapping of all physical memory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KernelMap {
    frames: u64,
}

impl KernelMap {
    pub fn new(frames: u64) -> Self {
        Self { frames }
    }

    pub fn virt(&self, frame: u64) -> u64 {
        assert!(frame < self.frames, "frame {frame} outside physical memory");
        DIRECT_MAP_BASE + frame * PAGE_SIZE as u64
    }

    pub fn frame_of(&self, vaddr: u64) -> Option<u64> {
        let frame = vaddr.checked_sub(DIRECT_MAP_BASE)? / PAGE_SIZE as u64;
        (frame < self.frames).then_some(frame)
    }
}


/// Contiguous enclave page cache reservation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpcRegion {
    pub base_frame: u64,
    pub frames: u64,
}

impl EpcRegion {
    /// 128 MiB at 2 GiB.
    pub fn standard() -> Self {
        Self {
            base_frame: (2u64 << 30) / PAGE_SIZE as u64,
            frames: (128u64 << 20) / PAGE_SIZE as u64,
        }
    }

    pub fn contains(&self, frame: u64) -> bool {
        (self.base_frame..self.base_frame + self.frames).contains(&frame)
    }
}


/// Machine memory layout and OS cost constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OsConfig {
    /// Usable frames, starting at frame 0.
    pub frames: u64,
    pub allocator: Allocator,
    pub kernel_frames: u64,
    pub page_table_frames: u64,
    /// Frames held by other applications.
    pub background_frames: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epc: Option<EpcRegion>,
    /// Free frames reclaim keeps available.
    pub free_reserve: u64,
    /// Non-executable file pages cached at start.
    pub cached_data_pages: u64,
    /// Executable file pages cached at start.
    pub cached_exec_pages: u64,
    /// Backing-store read of one page.
    pub fault_cost_ns: u64,
    /// Touching one page of eviction filler.
    pub filler_cost_ns: u64,
    /// System memory usage above which the machine is near out of memory.
    pub near_oom_fraction: f64,
}

impl OsConfig {
    /// 12 GiB desktop with about 5.8 GiB of page cache. One replacement-aware
    /// eviction with a uniformly aged target touches about 1.42M filler pages.
    pub fn desktop_12gib() -> Self {
        Self {
            frames: 3 << 20,
            allocator: Allocator::Default,
            kernel_frames: 200_000,
            page_table_frames: 62_144,
            background_frames: 1_273_584,
            epc: None,
            free_reserve: 100_000,
            cached_data_pages: 1_330_000,
            cached_exec_pages: 180_000,
            fault_cost_ns: 50_000,
            filler_cost_ns: 1_888,
            near_oom_fraction: 0.9,
        }
    }

    /// A small machine with the same proportions, for tractable end-to-end runs.
    pub fn small(frames: u64) -> Self {
        let f = frames as f64 / (3u64 << 20) as f64;
        let d = Self::desktop_12gib();
        let scale = |v: u64| ((v as f64 * f).round() as u64).max(1);
        let mut c = Self {
            frames,
            kernel_frames: scale(d.kernel_frames),
            page_table_frames: scale(d.page_table_frames),
            background_frames: 0,
            free_reserve: scale(d.free_reserve),
            cached_data_pages: scale(d.cached_data_pages),
            cached_exec_pages: scale(d.cached_exec_pages),
            ..d
        };
        let rest = c.kernel_frames + c.page_table_frames + c.free_reserve + c.cached_data_pages + c.cached_exec_pages;
        c.background_frames = frames.saturating_sub(rest);
        c
    }

    pub fn validate(&self, geometry: &DramGeometry) -> Result<(), OsError> {
        let bad = |m: String| Err(OsError::Config(m));
        if self.frames == 0 || self.frames > geometry.total_frames() {
            return bad(format!("frames must be in 1..={}", geometry.total_frames()));
        }
        let epc = self.epc.map_or(0, |e| e.frames);
        let fixed = self.kernel_frames + self.page_table_frames + self.background_frames + epc;
        let cached = self.cached_data_pages + self.cached_exec_pages;
        if fixed + cached + self.free_reserve > self.frames {
            return bad(format!(
                "layout needs {} frames but only {} exist",
                fixed + cached + self.free_reserve,
                self.frames
            ));
        }
        if let Some(e) = self.epc {
            if e.base_frame + e.frames > self.frames {
                return bad("epc region exceeds memory".into());
            }
        }
        if !(0.0..=1.0).contains(&self.near_oom_fraction) {
            return bad("near_oom_fraction must be in [0,1]".into());
        }
        Ok(())
    }
}


/// Contents of a registered file.
#[derive(Clone, Debug, PartialEq)]
pub enum FileContent {
    /// Content is irrelevant and never materialized.
    Synthetic,
    Pages(Vec<Vec<u8>>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FileImage {
    pub name: String,
    pub pages: u32,
    pub exec: bool,
    pub content: FileContent,
}

#[derive(Clone, Copy, Debug)]
struct CacheEntry {
    frame: u64,
    exec: bool,
    seq: u64,
}

/// Cache entries indexed by file, then page.
#[derive(Clone, Debug, Default)]
struct EntryTable {
    files: Vec<Vec<Option<CacheEntry>>>,
    len: usize,
}

impl EntryTable {
    fn get(&self, page: &FilePageId) -> Option<&CacheEntry> {
        self.files.get(page.file as usize)?.get(page.index as usize)?.as_ref()
    }

    fn insert(&mut self, page: FilePageId, entry: CacheEntry) {
        let (f, i) = (page.file as usize, page.index as usize);
        if self.files.len() <= f {
            self.files.resize_with(f + 1, Vec::new);
        }
        let slots = &mut self.files[f];
        if slots.len() <= i {
            slots.resize(i + 1, None);
        }
        if slots[i].replace(entry).is_none() {
            self.len += 1;
        }
    }

    fn remove(&mut self, page: &FilePageId) -> Option<CacheEntry> {
        let e = self.files.get_mut(page.file as usize)?.get_mut(page.index as usize)?.take();
        if e.is_some() {
            self.len -= 1;
        }
        e
    }

    fn len(&self) -> usize {
        self.len
    }

    fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn iter(&self) -> impl Iterator<Item = (FilePageId, &CacheEntry)> + '_ {
        self.files.iter().enumerate().flat_map(|(file, slots)| {
            slots.iter().enumerate().filter_map(move |(index, e)| {
                e.as_ref().map(|e| {
                    (
                        FilePageId {
                            file: file as u32,
                            index: index as u32,
                        },
                        e,
                    )
                })
            })
        })
    }
}

/// Cached file pages with FIFO age per executable class.
#[derive(Clone, Debug, Default)]
pub struct PageCache {
    entries: EntryTable,
    exec_queue: VecDeque<(u64, FilePageId)>,
    data_queue: VecDeque<(u64, FilePageId)>,
    seq: u64,
}

impl PageCache {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn frame_of(&self, page: FilePageId) -> Option<u64> {
        self.entries.get(&page).map(|e| e.frame)
    }

    fn insert(&mut self, page: FilePageId, frame: u64, exec: bool) {
        self.seq += 1;
        let seq = self.seq;
        self.entries.insert(page, CacheEntry { frame, exec, seq });
        if exec {
            self.exec_queue.push_back((seq, page));
        } else {
            self.data_queue.push_back((seq, page));
        }
    }

    fn remove(&mut self, page: FilePageId) -> Option<u64> {
        self.entries.remove(&page).map(|e| e.frame)
    }

    fn oldest(&mut self, exec: bool) -> Option<FilePageId> {
        let entries = &self.entries;
        let queue = if exec { &mut self.exec_queue } else { &mut self.data_queue };
        while let Some(&(seq, page)) = queue.front() {
            if entries.get(&page).is_some_and(|e| e.seq == seq) {
                return Some(page);
            }
            queue.pop_front();
        }
        None
    }

    /// Next page reclaim evicts: the oldest non-executable page, or the oldest
    /// executable page once no non-executable page is left.
    pub fn reclaim_victim(&mut self) -> Option<FilePageId> {
        self.oldest(false).or_else(|| self.oldest(true))
    }

    pub fn pages(&self) -> impl Iterator<Item = (FilePageId, u64)> + '_ {
        self.entries.iter().map(|(p, e)| (p, e.frame))
    }

    pub fn is_exec(&self, page: FilePageId) -> Option<bool> {
        self.entries.get(&page).map(|e| e.exec)
    }
}


/// How a virtual page is backed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mapping {
    /// Private anonymous or copied page in its own (possibly CoW-shared)
    /// frame. `origin` is the file page it was copied from.
    Private {
        frame: u64,
        writable: bool,
        origin: Option<FilePageId>,
    },
    /// File page served from the page cache until first written.
    File { page: FilePageId, writable: bool },
}

#[derive(Clone, Debug)]
pub struct Process {
    pub pid: Pid,
    pub enclave: bool,
    pub alive: bool,
    pub mappings: BTreeMap<u64, Mapping>,
}

impl Process {
    /// Frames held privately.
    pub fn resident_pages(&self) -> u64 {
        self.mappings
            .values()
            .filter(|m| matches!(m, Mapping::Private { .. }))
            .count() as u64
    }

    pub fn resident_bytes(&self) -> u64 {
        self.resident_pages() * PAGE_SIZE as u64
    }
}


/// Outcome of an explicit bit flip request.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlipOutcome {
    Flipped,
    /// The bit did not hold the direction's source value.
    NoOp,
}

/// Pid of the background applications present at boot.
pub const BACKGROUND_PID: Pid = 1;

/// The OS state of one machine.
#[derive(Clone, Debug)]
pub struct OsModel {
    config: OsConfig,
    frames: FrameTable,
    cache: PageCache,
    files: Vec<FileImage>,
    processes: BTreeMap<Pid, Process>,
    refcount: HashMap<u64, u32>,
    next_pid: Pid,
    rng: SimRng,
    kernel_map: KernelMap,
    placements: BTreeMap<FilePageId, BTreeMap<u64, u64>>,
    noop_flips: u64,
}

impl OsModel {
    /// Boots a machine: reserves the EPC, places kernel, page-table and
    /// background frames, and fills the page cache.
    pub fn boot(geometry: DramGeometry, config: OsConfig, rng: SimRng) -> Result<Self, OsError> {
        config.validate(&geometry)?;
        let mut frames = FrameTable::new(geometry, config.frames, config.allocator)?;
        if let Some(epc) = config.epc {
            for f in epc.base_frame..epc.base_frame + epc.frames {
                if frames.owner(f) == FrameOwner::Free {
                    frames.take(f, FrameOwner::Epc);
                }
            }
        }
        let mut os = Self {
            kernel_map: KernelMap::new(config.frames),
            frames,
            cache: PageCache::default(),
            files: Vec::new(),
            processes: BTreeMap::new(),
            refcount: HashMap::new(),
            next_pid: BACKGROUND_PID,
            rng,
            placements: BTreeMap::new(),
            noop_flips: 0,
            config,
        };
        for _ in 0..os.config.kernel_frames {
            os.alloc_kernel(KernelUse::Data)?;
        }
        for _ in 0..os.config.page_table_frames {
            os.alloc_kernel(KernelUse::PageTable)?;
        }
        let bg = os.spawn(false);
        os.alloc_anon(bg, 0, os.config.background_frames)?;
        let data = os.register_file("cached-data", os.config.cached_data_pages as u32, false, FileContent::Synthetic);
        for index in 0..os.config.cached_data_pages as u32 {
            os.fault_in(FilePageId { file: data, index }, None)?;
        }
        let exec = os.register_file("cached-binaries", os.config.cached_exec_pages as u32, true, FileContent::Synthetic);
        for index in 0..os.config.cached_exec_pages as u32 {
            os.fault_in(FilePageId { file: exec, index }, None)?;
        }
        Ok(os)
    }

    pub fn config(&self) -> &OsConfig {
        &self.config
    }

    pub fn frames(&self) -> &FrameTable {
        &self.frames
    }

    pub fn cache(&self) -> &PageCache {
        &self.cache
    }

    pub fn kernel_map(&self) -> KernelMap {
        self.kernel_map
    }

    pub fn rng_mut(&mut self) -> &mut SimRng {
        &mut self.rng
    }

    pub fn total_bytes(&self) -> u64 {
        self.config.frames * PAGE_SIZE as u64
    }

    /// Flip requests that found the bit already at the target value.
    pub fn noop_flips(&self) -> u64 {
        self.noop_flips
    }

    /// Fraction of memory neither free nor page cache.
    pub fn system_usage(&self) -> f64 {
        let census_free = self.frames.free_count();
        let used = self.config.frames - census_free - self.cache.len() as u64;
        used as f64 / self.config.frames as f64
    }

    pub fn near_oom(&self) -> bool {
        self.system_usage() > self.config.near_oom_fraction
    }

    pub fn alloc_kernel(&mut self, use_: KernelUse) -> Result<u64, OsError> {
        self.frames.alloc(FrameOwner::Kernel(use_), &mut self.rng)
    }

    /// Allocates for `owner`, reclaiming page-cache pages while the free pool
    /// is at or below the reserve.
    fn alloc_reclaiming(&mut self, owner: FrameOwner) -> Result<u64, OsError> {
        while self.frames.free_count_for(owner) <= self.config.free_reserve {
            if !self.reclaim_one() {
                break;
            }
        }
        self.frames.alloc(owner, &mut self.rng)
    }

    /// Evicts the page reclaim would pick. Returns false if the cache is empty.
    pub fn reclaim_one(&mut self) -> bool {
        match self.cache.reclaim_victim() {
            Some(page) => {
                self.evict(page);
                true
            }
            None => false,
        }
    }

    /// Drops `page` from the cache and frees its frame.
    pub fn evict(&mut self, page: FilePageId) -> bool {
        match self.cache.remove(page) {
            Some(frame) => {
                self.frames.free(frame);
                true
            }
            None => false,
        }
    }

    pub fn register_file(&mut self, name: &str, pages: u32, exec: bool, content: FileContent) -> u32 {
        if let FileContent::Pages(p) = &content {
            assert_eq!(p.len(), pages as usize, "content page count");
            assert!(p.iter().all(|x| x.len() == PAGE_SIZE), "pages must be 4 KiB");
        }
        self.files.push(FileImage {
            name: name.to_string(),
            pages,
            exec,
            content,
        });
        (self.files.len() - 1) as u32
    }

    pub fn file(&self, id: u32) -> Option<&FileImage> {
        self.files.get(id as usize)
    }

    /// Backing-store bytes of a file page, if materialized.
    pub fn pristine(&self, page: FilePageId) -> Option<&[u8]> {
        match &self.files.get(page.file as usize)?.content {
            FileContent::Pages(p) => p.get(page.index as usize).map(|v| v.as_slice()),
            FileContent::Synthetic => None,
        }
    }

    pub fn mincore(&self, page: FilePageId) -> bool {
        self.cache.frame_of(page).is_some()
    }

    /// Returns the cached frame of `page`, reading it from the backing store
    /// into a random free frame on a miss. Content is written into `memory`
    /// when the file carries content.
    pub fn fault_in(&mut self, page: FilePageId, memory: Option<&mut PhysMemory>) -> Result<u64, OsError> {
        if let Some(frame) = self.cache.frame_of(page) {
            return Ok(frame);
        }
        let file = self.files.get(page.file as usize).ok_or(OsError::NoFilePage(page))?;
        if page.index >= file.pages {
            return Err(OsError::NoFilePage(page));
        }
        let exec = file.exec;
        let frame = self.alloc_reclaiming(FrameOwner::PageCache(page))?;
        if let (Some(mem), Some(bytes)) = (memory, self.pristine(page)) {
            let bytes = bytes.to_vec();
            mem.write_page(frame, &bytes);
        }
        self.cache.insert(page, frame, exec);
        if let Some(counts) = self.placements.get_mut(&page) {
            *counts.entry(frame).or_default() += 1;
        }
        Ok(frame)
    }

    /// Moves a cached executable page to position `rank` of the executable
    /// age queue (0 = oldest).
    pub fn set_exec_age(&mut self, page: FilePageId, rank: usize) -> Result<(), OsError> {
        let entry = *self.cache.entries.get(&page).ok_or(OsError::NotCached(page))?;
        if !entry.exec {
            return Err(OsError::NotCached(page));
        }
        let entries = &self.cache.entries;
        let q = &mut self.cache.exec_queue;
        q.retain(|&(seq, p)| seq != entry.seq && entries.get(&p).is_some_and(|e| e.seq == seq));
        let rank = rank.min(q.len());
        q.insert(rank, (entry.seq, page));
        Ok(())
    }

    /// Gives a cached executable page a uniformly random age among the cached
    /// executable pages. Returns the rank chosen.
    pub fn age_exec_uniformly(&mut self, page: FilePageId, rng: &mut SimRng) -> Result<usize, OsError> {
        self.set_exec_age(page, usize::MAX)?;
        let rank = rng.random_range(0..self.cache.exec_queue.len());
        self.set_exec_age(page, rank)?;
        Ok(rank)
    }

    /// Starts counting the frames `page` is cached in.
    pub fn track_placements(&mut self, page: FilePageId) {
        self.placements.entry(page).or_default();
    }

    pub fn placements(&self, page: FilePageId) -> Option<&BTreeMap<u64, u64>> {
        self.placements.get(&page)
    }

    /// `frame,count` lines of a tracked page's placements.
    pub fn heatmap_csv(&self, page: FilePageId) -> String {
        let mut out = String::from("frame,count\n");
        if let Some(p) = self.placements.get(&page) {
            for (frame, count) in p {
                out.push_str(&format!("{frame},{count}\n"));
            }
        }
        out
    }

    pub fn spawn(&mut self, enclave: bool) -> Pid {
        let pid = self.next_pid;
        self.next_pid += 1;
        self.processes.insert(
            pid,
            Process {
                pid,
                enclave,
                alive: true,
                mappings: BTreeMap::new(),
            },
        );
        pid
    }

    pub fn process(&self, pid: Pid) -> Option<&Process> {
        self.processes.get(&pid)
    }

    fn process_mut(&mut self, pid: Pid) -> Result<&mut Process, OsError> {
        self.processes
            .get_mut(&pid)
            .filter(|p| p.alive)
            .ok_or(OsError::NoProcess(pid))
    }

    pub fn resident_bytes(&self, pid: Pid) -> u64 {
        self.processes.get(&pid).map_or(0, |p| p.resident_bytes())
    }

    /// Maps and populates `count` anonymous pages from `vpage` on.
    pub fn alloc_anon(&mut self, pid: Pid, vpage: u64, count: u64) -> Result<(), OsError> {
        self.process_mut(pid)?;
        for i in 0..count {
            let frame = self.alloc_reclaiming(FrameOwner::User(pid))?;
            self.refcount.insert(frame, 1);
            self.process_mut(pid)?
                .mappings
                .insert(
                    vpage + i,
                    Mapping::Private {
                        frame,
                        writable: true,
                        origin: None,
                    },
                );
        }
        Ok(())
    }

    /// Maps a file page. Executable mappings are read-only and shared.
    pub fn map_file(&mut self, pid: Pid, vpage: u64, page: FilePageId, writable: bool) -> Result<(), OsError> {
        if self.files.get(page.file as usize).is_none_or(|f| page.index >= f.pages) {
            return Err(OsError::NoFilePage(page));
        }
        self.process_mut(pid)?
            .mappings
            .insert(vpage, Mapping::File { page, writable });
        Ok(())
    }

    /// Physical frame behind a virtual page, faulting file pages in.
    pub fn touch(&mut self, pid: Pid, vpage: u64, memory: Option<&mut PhysMemory>) -> Result<u64, OsError> {
        let mapping = *self
            .process_mut(pid)?
            .mappings
            .get(&vpage)
            .ok_or(OsError::Unmapped { pid, vpage })?;
        match mapping {
            Mapping::Private { frame, .. } => Ok(frame),
            Mapping::File { page, .. } => self.fault_in(page, memory),
        }
    }

    /// Current translation without side effects; `None` if not resident.
    pub fn translate(&self, pid: Pid, vpage: u64) -> Result<Option<u64>, OsError> {
        let p = self
            .processes
            .get(&pid)
            .filter(|p| p.alive)
            .ok_or(OsError::NoProcess(pid))?;
        match p.mappings.get(&vpage) {
            None => Err(OsError::Unmapped { pid, vpage }),
            Some(Mapping::Private { frame, .. }) => Ok(Some(*frame)),
            Some(Mapping::File { page, .. }) => Ok(self.cache.frame_of(*page)),
        }
    }

    /// Writes to a private page: the first write to a file page or to a
    /// shared copy-on-write frame copies it into a fresh random frame.
    pub fn write_private(&mut self, pid: Pid, vpage: u64, memory: &mut PhysMemory) -> Result<u64, OsError> {
        let mapping = *self
            .process_mut(pid)?
            .mappings
            .get(&vpage)
            .ok_or(OsError::Unmapped { pid, vpage })?;
        let (source, origin) = match mapping {
            Mapping::Private { writable: false, .. } | Mapping::File { writable: false, .. } => {
                return Err(OsError::ReadOnly { pid, vpage });
            }
            Mapping::Private { frame, origin, .. } => {
                if self.refcount.get(&frame).copied().unwrap_or(1) <= 1 {
                    return Ok(frame);
                }
                (frame, origin)
            }
            Mapping::File { page, .. } => (self.fault_in(page, Some(memory))?, Some(page)),
        };
        let frame = self.alloc_reclaiming(FrameOwner::User(pid))?;
        memory.copy_page(source, frame);
        if let Mapping::Private { frame: old, .. } = mapping {
            self.release(old);
        }
        self.refcount.insert(frame, 1);
        self.process_mut(pid)?.mappings.insert(
            vpage,
            Mapping::Private {
                frame,
                writable: true,
                origin,
            },
        );
        Ok(frame)
    }

    fn drop_ref(&mut self, frame: u64) -> bool {
        let n = self.refcount.get_mut(&frame).expect("tracked private frame");
        *n -= 1;
        if *n == 0 {
            self.refcount.remove(&frame);
            true
        } else {
            false
        }
    }

    fn release(&mut self, frame: u64) {
        if self.drop_ref(frame) {
            self.frames.free(frame);
        }
    }

    /// Forks `pid`; private frames become copy-on-write shared.
    pub fn fork(&mut self, pid: Pid) -> Result<Pid, OsError> {
        let parent = self.process_mut(pid)?.clone();
        for m in parent.mappings.values() {
            if let Mapping::Private { frame, .. } = m {
                *self.refcount.get_mut(frame).expect("tracked private frame") += 1;
            }
        }
        let child = self.spawn(parent.enclave);
        self.processes.get_mut(&child).expect("just spawned").mappings = parent.mappings;
        Ok(child)
    }

    /// Terminates `pid` and releases its private frames.
    pub fn kill(&mut self, pid: Pid) -> Result<(), OsError> {
        let mappings = std::mem::take(&mut self.process_mut(pid)?.mappings);
        for m in mappings.values() {
            if let Mapping::Private { frame, .. } = m {
                self.release(*frame);
            }
        }
        self.process_mut(pid)?.alive = false;
        Ok(())
    }

    pub fn unmap(&mut self, pid: Pid, vpage: u64) -> Result<Mapping, OsError> {
        let m = self
            .process_mut(pid)?
            .mappings
            .remove(&vpage)
            .ok_or(OsError::Unmapped { pid, vpage })?;
        if let Mapping::Private { frame, .. } = m {
            self.release(frame);
        }
        Ok(m)
    }

    /// Unmaps a private copy of a file page and immediately maps the file page
    /// read-only and executable again. The freed frame is the next one handed
    /// out, so the uncached file page lands exactly there.
    pub fn remap_exec(&mut self, pid: Pid, vpage: u64, memory: &mut PhysMemory) -> Result<u64, OsError> {
        let mapping = *self
            .process_mut(pid)?
            .mappings
            .get(&vpage)
            .ok_or(OsError::Unmapped { pid, vpage })?;
        let Mapping::Private {
            frame,
            origin: Some(page),
            ..
        } = mapping
        else {
            return Err(OsError::Unmapped { pid, vpage });
        };
        self.process_mut(pid)?.mappings.remove(&vpage);
        if self.drop_ref(frame) {
            self.frames.free_hot(frame);
        }
        self.map_file(pid, vpage, page, false)?;
        self.fault_in(page, Some(memory))
    }

    /// Sets or clears one bit of an allocated frame. A request whose source
    /// value does not match the bit is a no-op and is counted.
    pub fn flip_bit_in_frame(
        &mut self,
        memory: &mut PhysMemory,
        frame: u64,
        page_bit: u32,
        direction: FlipDirection,
    ) -> Result<FlipOutcome, OsError> {
        assert!(page_bit < PAGE_BITS, "bit offset {page_bit} outside page");
        if frame >= self.frames.len() || self.frames.owner(frame) == FrameOwner::Free {
            return Err(OsError::FrameFree(frame));
        }
        if memory.read_bit(frame, page_bit) != direction.source_value() {
            self.noop_flips += 1;
            return Ok(FlipOutcome::NoOp);
        }
        memory.toggle_bit(frame, page_bit);
        Ok(FlipOutcome::Flipped)
    }

    pub fn read_page(&self, memory: &PhysMemory, frame: u64) -> Result<Vec<u8>, OsError> {
        if frame >= self.frames.len() || self.frames.owner(frame) == FrameOwner::Free {
            return Err(OsError::FrameFree(frame));
        }
        Ok(memory.read_page(frame))
    }

    /// Hands out a frame for `owner` without reclaim (kernel bookkeeping,
    /// tests).
    pub fn alloc_frame(&mut self, owner: FrameOwner) -> Result<u64, OsError> {
        let frame = self.frames.alloc(owner, &mut self.rng)?;
        if matches!(owner, FrameOwner::User(_)) {
            self.refcount.insert(frame, 1);
        }
        Ok(frame)
    }

    /// Frees frames released outside process teardown, e.g. an attacker
    /// buffer returned to the system.
    pub fn free_user_pages(&mut self, pid: Pid, vpages: &[u64]) -> Result<(), OsError> {
        for &v in vpages {
            self.unmap(pid, v)?;
        }
        Ok(())
    }

    /// Checks the accounting invariants; returns a description of the first
    /// violation.
    pub fn check_invariants(&self) -> Result<(), String> {
        let census = self.frames.census();
        if census.total() != self.config.frames {
            return Err("census does not cover all frames".into());
        }
        if census.page_cache != self.cache.len() as u64 {
            return Err(format!(
                "{} page-cache frames but {} cached pages",
                census.page_cache,
                self.cache.len()
            ));
        }
        for (page, frame) in self.cache.pages() {
            if self.frames.owner(frame) != FrameOwner::PageCache(page) {
                return Err(format!("cached page {page:?} in frame {frame} owned by {}", self.frames.owner(frame)));
            }
        }
        let mut private: HashMap<u64, u32> = HashMap::new();
        for p in self.processes.values().filter(|p| p.alive) {
            for m in p.mappings.values() {
                if let Mapping::Private { frame, .. } = m {
                    *private.entry(*frame).or_default() += 1;
                    if !matches!(self.frames.owner(*frame), FrameOwner::User(_)) {
                        return Err(format!("private frame {frame} not user-owned"));
                    }
                }
            }
        }
        if private != self.refcount {
            return Err("reference counts disagree with mappings".into());
        }
        if census.user != private.len() as u64 {
            return Err(format!("{} user frames but {} mapped", census.user, private.len()));
        }
        Ok(())
    }
}

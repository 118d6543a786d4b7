//! Value-tracking simulator of a multi-level write-back cache hierarchy in
//! front of non-volatile main memory.
//!
//! Every level is set-associative with LRU replacement and write-allocate.
//! The hierarchy is non-inclusive: each level tracks its lines independently
//! and the freshest value of a line is always the copy held by the innermost
//! level that has it resident. Dirty victims spill one level outward; spills
//! out of the last level are the only ordinary way data reaches memory, and
//! each one bumps the NVM write counter.
//!
//! A crash discards every cache level, leaving only [`MemoryImage`].

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Byte address in the simulated address space.
pub type Addr = u64;

const INVALID: u64 = u64::MAX;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("read of uninitialized byte at {addr:#x}")]
    UninitializedRead { addr: Addr },
    #[error("access [{addr:#x}, +{len}) exceeds the simulated address space limit {limit:#x}")]
    AddressSpaceExceeded { addr: Addr, len: u64, limit: u64 },
    #[error("invalid cache configuration: {0}")]
    InvalidConfig(String),
}

/// The three cache-line persistence instructions the simulator understands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlushKind {
    /// CLFLUSH: write back if dirty, then invalidate every copy.
    FlushInvalidate,
    /// CLFLUSHOPT: same visible semantics as CLFLUSH in a single-threaded model.
    FlushOpt,
    /// CLWB: write back if dirty, keep every copy valid and clean.
    WritebackNoInv,
}

impl FlushKind {
    fn invalidates(self) -> bool {
        !matches!(self, FlushKind::WritebackNoInv)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelConfig {
    pub capacity_bytes: u64,
    pub associativity: u32,
}

impl LevelConfig {
    pub fn new(capacity_bytes: u64, associativity: u32) -> Self {
        Self {
            capacity_bytes,
            associativity,
        }
    }
}

fn default_line_size() -> u64 {
    64
}

/// Geometry of the simulated hierarchy, L1 first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheConfig {
    #[serde(default = "default_line_size")]
    pub line_size: u64,
    pub levels: Vec<LevelConfig>,
}

impl CacheConfig {
    /// Small three-level hierarchy used by campaigns and tests: 256 B / 2-way,
    /// 1 KiB / 4-way and 4 KiB / 8-way over 64 B lines. The built-in kernels'
    /// working sets are several times larger than the last level.
    pub fn desk() -> Self {
        Self {
            line_size: 64,
            levels: vec![
                LevelConfig::new(256, 2),
                LevelConfig::new(1024, 4),
                LevelConfig::new(4096, 8),
            ],
        }
    }

    /// Server-class geometry: 32 KiB / 8-way L1, ~1 MiB / 12-way L2 and
    /// 19.25 MiB / 11-way L3.
    ///
    /// 1 MiB is not divisible by 12 × 64 B, so L2 is rounded down to 1365 sets.
    pub fn server() -> Self {
        Self {
            line_size: 64,
            levels: vec![
                LevelConfig::new(32 * 1024, 8),
                LevelConfig::new(1365 * 12 * 64, 12),
                LevelConfig::new(19_712 * 1024, 11),
            ],
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidConfig(m));
        if self.line_size == 0 || !self.line_size.is_power_of_two() {
            return bad(format!(
                "line_size {} is not a power of two",
                self.line_size
            ));
        }
        if self.levels.is_empty() {
            return bad("at least one cache level is required".into());
        }
        let mut prev = 0;
        for (i, level) in self.levels.iter().enumerate() {
            if level.associativity == 0 {
                return bad(format!("level {} has zero associativity", i + 1));
            }
            let way_bytes = level.associativity as u64 * self.line_size;
            if level.capacity_bytes == 0 || level.capacity_bytes % way_bytes != 0 {
                return bad(format!(
                    "level {} capacity {} is not a positive multiple of associativity x line_size ({})",
                    i + 1,
                    level.capacity_bytes,
                    way_bytes
                ));
            }
            if level.capacity_bytes < prev {
                return bad(format!(
                    "level {} is smaller than the level inside it",
                    i + 1
                ));
            }
            prev = level.capacity_bytes;
        }
        Ok(())
    }

    /// Number of lines the last-level cache can hold.
    pub fn llc_lines(&self) -> u64 {
        self.levels
            .last()
            .map(|l| l.capacity_bytes / self.line_size)
            .unwrap_or(0)
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let cfg: CacheConfig =
            serde_json::from_str(text).map_err(|e| SimError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self::desk()
    }
}

fn mask_words(line_size: usize) -> usize {
    line_size.div_ceil(64)
}

#[inline]
fn bit(mask: &[u64], i: usize) -> bool {
    mask[i >> 6] >> (i & 63) & 1 == 1
}

#[inline]
fn set_bit(mask: &mut [u64], i: usize) {
    mask[i >> 6] |= 1 << (i & 63);
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct MemLine {
    data: Box<[u8]>,
    init: Box<[u64]>,
}

/// Contents of non-volatile main memory: a sparse map of line-aligned
/// addresses to line data, plus the count of line write-backs it received.
///
/// Each byte also carries an "initialized" bit so that reads of memory that
/// was never written surface as errors instead of silently returning zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemoryImage {
    line_size: usize,
    lines: HashMap<Addr, MemLine>,
    nvm_write_count: u64,
}

impl MemoryImage {
    pub fn new(line_size: usize) -> Self {
        Self {
            line_size,
            lines: HashMap::new(),
            nvm_write_count: 0,
        }
    }

    pub fn line_size(&self) -> usize {
        self.line_size
    }

    /// Line write-backs received from the cache hierarchy.
    pub fn nvm_write_count(&self) -> u64 {
        self.nvm_write_count
    }

    pub fn line_count(&self) -> usize {
        self.lines.len()
    }

    fn line_base(&self, addr: Addr) -> Addr {
        addr & !(self.line_size as u64 - 1)
    }

    /// The byte at `addr`, or `None` if it was never initialized.
    pub fn byte(&self, addr: Addr) -> Option<u8> {
        let base = self.line_base(addr);
        let off = (addr - base) as usize;
        self.lines
            .get(&base)
            .filter(|l| bit(&l.init, off))
            .map(|l| l.data[off])
    }

    pub fn read(&self, addr: Addr, len: usize) -> Result<Vec<u8>, SimError> {
        (0..len as u64)
            .map(|i| {
                self.byte(addr + i)
                    .ok_or(SimError::UninitializedRead { addr: addr + i })
            })
            .collect()
    }

    pub fn read_f64(&self, addr: Addr) -> Result<f64, SimError> {
        let b = self.read(addr, 8)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub fn read_u64(&self, addr: Addr) -> Result<u64, SimError> {
        let b = self.read(addr, 8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    /// Stores bytes directly, bypassing the write counter (preload path).
    pub fn store(&mut self, addr: Addr, bytes: &[u8]) {
        for (i, &b) in bytes.iter().enumerate() {
            let a = addr + i as u64;
            let base = self.line_base(a);
            let off = (a - base) as usize;
            let line = self.line_mut(base);
            line.data[off] = b;
            set_bit(&mut line.init, off);
        }
    }

    /// Copies the initialized bytes of `[addr, addr+len)` from `other`.
    pub fn copy_range_from(&mut self, other: &MemoryImage, addr: Addr, len: u64) {
        for a in addr..addr + len {
            if let Some(b) = other.byte(a) {
                self.store(a, &[b]);
            }
        }
    }

    fn line_mut(&mut self, base: Addr) -> &mut MemLine {
        let ls = self.line_size;
        self.lines.entry(base).or_insert_with(|| MemLine {
            data: vec![0; ls].into_boxed_slice(),
            init: vec![0; mask_words(ls)].into_boxed_slice(),
        })
    }

    fn write_back(&mut self, base: Addr, data: &[u8], init: &[u64]) {
        let line = self.line_mut(base);
        for (i, &b) in data.iter().enumerate() {
            if bit(init, i) {
                line.data[i] = b;
            }
        }
        for (dst, src) in line.init.iter_mut().zip(init) {
            *dst |= src;
        }
        self.nvm_write_count += 1;
    }

    /// Text dump, one line per memory line sorted by address:
    /// `0x<line-addr> <hex bytes>`. Uninitialized bytes print as `00`.
    pub fn dump(&self) -> String {
        let mut keys: Vec<_> = self.lines.keys().copied().collect();
        keys.sort_unstable();
        let mut out = String::new();
        for k in keys {
            let line = &self.lines[&k];
            let _ = write!(out, "{k:#x} ");
            for b in line.data.iter() {
                let _ = write!(out, "{b:02x}");
            }
            out.push('\n');
        }
        out
    }
}

struct Level {
    sets: usize,
    ways: usize,
    tags: Vec<u64>,
    dirty: Vec<bool>,
    stamp: Vec<u64>,
    data: Vec<u8>,
    init: Vec<u64>,
}

impl Level {
    fn new(sets: usize, ways: usize, line_size: usize) -> Self {
        let slots = sets * ways;
        Self {
            sets,
            ways,
            tags: vec![INVALID; slots],
            dirty: vec![false; slots],
            stamp: vec![0; slots],
            data: vec![0; slots * line_size],
            init: vec![0; slots * mask_words(line_size)],
        }
    }

    #[inline]
    fn find(&self, line: u64) -> Option<usize> {
        let base = (line % self.sets as u64) as usize * self.ways;
        (base..base + self.ways).find(|&s| self.tags[s] == line)
    }

    fn victim(&self, line: u64) -> usize {
        let base = (line % self.sets as u64) as usize * self.ways;
        let slots = base..base + self.ways;
        if let Some(s) = slots.clone().find(|&s| self.tags[s] == INVALID) {
            return s;
        }
        slots.min_by_key(|&s| self.stamp[s]).expect("ways > 0")
    }
}

/// A line evicted dirty from some level, on its way outward.
struct Spill {
    line: u64,
    data: Vec<u8>,
    init: Vec<u64>,
}

/// Cache hierarchy plus NVM image, driven one operation at a time.
pub struct SimMachine {
    config: CacheConfig,
    line_size: usize,
    shift: u32,
    words: usize,
    levels: Vec<Level>,
    memory: MemoryImage,
    op_count: u64,
    clock: u64,
    address_limit: u64,
}

impl std::fmt::Debug for SimMachine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SimMachine")
            .field("config", &self.config)
            .field("op_count", &self.op_count)
            .field("nvm_write_count", &self.memory.nvm_write_count)
            .finish_non_exhaustive()
    }
}

impl SimMachine {
    pub const DEFAULT_ADDRESS_LIMIT: u64 = 1 << 40;

    pub fn new(config: CacheConfig) -> Result<Self, SimError> {
        config.validate()?;
        let line_size = config.line_size as usize;
        let levels = config
            .levels
            .iter()
            .map(|l| {
                let ways = l.associativity as usize;
                let sets =
                    (l.capacity_bytes / (l.associativity as u64 * config.line_size)) as usize;
                Level::new(sets, ways, line_size)
            })
            .collect();
        Ok(Self {
            line_size,
            shift: config.line_size.trailing_zeros(),
            words: mask_words(line_size),
            levels,
            memory: MemoryImage::new(line_size),
            op_count: 0,
            clock: 0,
            address_limit: Self::DEFAULT_ADDRESS_LIMIT,
            config,
        })
    }

    pub fn with_address_limit(mut self, limit: u64) -> Self {
        self.address_limit = limit;
        self
    }

    pub fn config(&self) -> &CacheConfig {
        &self.config
    }

    pub fn line_size(&self) -> usize {
        self.line_size
    }

    /// Dynamic operations executed so far (reads, writes, flushes).
    pub fn op_count(&self) -> u64 {
        self.op_count
    }

    pub fn nvm_write_count(&self) -> u64 {
        self.memory.nvm_write_count
    }

    pub fn memory(&self) -> &MemoryImage {
        &self.memory
    }

    fn check_range(&self, addr: Addr, len: u64) -> Result<(), SimError> {
        match addr.checked_add(len) {
            Some(end) if end <= self.address_limit => Ok(()),
            _ => Err(SimError::AddressSpaceExceeded {
                addr,
                len,
                limit: self.address_limit,
            }),
        }
    }

    /// Splits `[addr, addr+len)` into `(line, offset, length)` chunks.
    fn chunks(&self, addr: Addr, len: usize) -> impl Iterator<Item = (u64, usize, usize)> {
        let ls = self.line_size;
        let shift = self.shift;
        let mut cur = addr;
        let end = addr + len as u64;
        std::iter::from_fn(move || {
            if cur >= end {
                return None;
            }
            let line = cur >> shift;
            let off = (cur - (line << shift)) as usize;
            let n = (ls - off).min((end - cur) as usize);
            cur += n as u64;
            Some((line, off, n))
        })
    }

    #[inline]
    fn chunk_at(&self, addr: Addr, remaining: usize) -> (u64, usize, usize) {
        let line = addr >> self.shift;
        let off = (addr - (line << self.shift)) as usize;
        (line, off, (self.line_size - off).min(remaining))
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    /// Makes `line` resident in L1, filling every level between the
    /// innermost holder (or memory) and L1 with clean copies. Returns the L1 slot.
    fn ensure_l1(&mut self, line: u64) -> usize {
        if let Some(s) = self.levels[0].find(line) {
            let t = self.tick();
            self.levels[0].stamp[s] = t;
            return s;
        }
        let ls = self.line_size;
        let w = self.words;
        let mut data = vec![0u8; ls];
        let mut init = vec![0u64; w];
        let mut top = self.levels.len();
        for i in 1..self.levels.len() {
            if let Some(s) = self.levels[i].find(line) {
                data.copy_from_slice(&self.levels[i].data[s * ls..(s + 1) * ls]);
                init.copy_from_slice(&self.levels[i].init[s * w..(s + 1) * w]);
                let t = self.tick();
                self.levels[i].stamp[s] = t;
                top = i;
                break;
            }
        }
        if top == self.levels.len() {
            if let Some(m) = self.memory.lines.get(&(line << self.shift)) {
                data.copy_from_slice(&m.data);
                init.copy_from_slice(&m.init);
            }
        }
        let mut slot = 0;
        for j in (0..top).rev() {
            slot = self.install(j, line, &data, &init, false);
        }
        slot
    }

    /// Places a line in level `j`, spilling a dirty victim outward.
    fn install(&mut self, j: usize, line: u64, data: &[u8], init: &[u64], dirty: bool) -> usize {
        let ls = self.line_size;
        let w = self.words;
        let t = self.tick();
        let level = &mut self.levels[j];
        let s = level.victim(line);
        let spill = if level.tags[s] != INVALID && level.dirty[s] {
            Some(Spill {
                line: level.tags[s],
                data: level.data[s * ls..(s + 1) * ls].to_vec(),
                init: level.init[s * w..(s + 1) * w].to_vec(),
            })
        } else {
            None
        };
        level.tags[s] = line;
        level.dirty[s] = dirty;
        level.stamp[s] = t;
        level.data[s * ls..(s + 1) * ls].copy_from_slice(data);
        level.init[s * w..(s + 1) * w].copy_from_slice(init);
        if let Some(sp) = spill {
            self.spill(j + 1, sp);
        }
        s
    }

    fn spill(&mut self, j: usize, sp: Spill) {
        if j == self.levels.len() {
            self.memory
                .write_back(sp.line << self.shift, &sp.data, &sp.init);
            return;
        }
        if let Some(s) = self.levels[j].find(sp.line) {
            let ls = self.line_size;
            let w = self.words;
            let t = self.tick();
            let level = &mut self.levels[j];
            level.data[s * ls..(s + 1) * ls].copy_from_slice(&sp.data);
            level.init[s * w..(s + 1) * w].copy_from_slice(&sp.init);
            level.dirty[s] = true;
            level.stamp[s] = t;
        } else {
            self.install(j, sp.line, &sp.data, &sp.init, true);
        }
    }

    /// Reads `buf.len()` bytes at `addr` into `buf`. Counts as one operation.
    pub fn read_into(&mut self, addr: Addr, buf: &mut [u8]) -> Result<(), SimError> {
        self.check_range(addr, buf.len() as u64)?;
        self.op_count += 1;
        let ls = self.line_size;
        let w = self.words;
        let mut pos = 0;
        while pos < buf.len() {
            let (line, off, n) = self.chunk_at(addr + pos as u64, buf.len() - pos);
            let s = self.ensure_l1(line);
            let l1 = &self.levels[0];
            let mask = &l1.init[s * w..(s + 1) * w];
            if let Some(i) = (off..off + n).find(|&i| !bit(mask, i)) {
                return Err(SimError::UninitializedRead {
                    addr: (line << self.shift) + i as u64,
                });
            }
            buf[pos..pos + n].copy_from_slice(&l1.data[s * ls + off..s * ls + off + n]);
            pos += n;
        }
        Ok(())
    }

    pub fn read(&mut self, addr: Addr, len: usize) -> Result<Vec<u8>, SimError> {
        let mut buf = vec![0; len];
        self.read_into(addr, &mut buf)?;
        Ok(buf)
    }

    /// Writes `bytes` at `addr` into L1 (write-allocate), marking the line
    /// dirty there. Counts as one operation.
    pub fn write(&mut self, addr: Addr, bytes: &[u8]) -> Result<(), SimError> {
        self.check_range(addr, bytes.len() as u64)?;
        self.op_count += 1;
        let ls = self.line_size;
        let w = self.words;
        let mut pos = 0;
        while pos < bytes.len() {
            let (line, off, n) = self.chunk_at(addr + pos as u64, bytes.len() - pos);
            let s = self.ensure_l1(line);
            let l1 = &mut self.levels[0];
            l1.data[s * ls + off..s * ls + off + n].copy_from_slice(&bytes[pos..pos + n]);
            let mask = &mut l1.init[s * w..(s + 1) * w];
            for i in off..off + n {
                set_bit(mask, i);
            }
            l1.dirty[s] = true;
            pos += n;
        }
        Ok(())
    }

    pub fn read_f64(&mut self, addr: Addr) -> Result<f64, SimError> {
        let mut b = [0u8; 8];
        self.read_into(addr, &mut b)?;
        Ok(f64::from_le_bytes(b))
    }

    pub fn write_f64(&mut self, addr: Addr, v: f64) -> Result<(), SimError> {
        self.write(addr, &v.to_le_bytes())
    }

    pub fn read_u64(&mut self, addr: Addr) -> Result<u64, SimError> {
        let mut b = [0u8; 8];
        self.read_into(addr, &mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    pub fn write_u64(&mut self, addr: Addr, v: u64) -> Result<(), SimError> {
        self.write(addr, &v.to_le_bytes())
    }

    /// All resident copies of `line`, innermost first.
    fn copies(&self, line: u64) -> Vec<(usize, usize)> {
        self.levels
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.find(line).map(|s| (i, s)))
            .collect()
    }

    /// Writes back the freshest copy of `line` if any copy is dirty and
    /// optionally invalidates every copy. Returns the number of memory writes.
    fn persist_line(&mut self, line: u64, invalidate: bool) -> u64 {
        let copies = self.copies(line);
        if copies.is_empty() {
            return 0;
        }
        let ls = self.line_size;
        let w = self.words;
        let any_dirty = copies.iter().any(|&(i, s)| self.levels[i].dirty[s]);
        let mut writes = 0;
        if any_dirty {
            let (i0, s0) = copies[0];
            let data = self.levels[i0].data[s0 * ls..(s0 + 1) * ls].to_vec();
            let init = self.levels[i0].init[s0 * w..(s0 + 1) * w].to_vec();
            self.memory.write_back(line << self.shift, &data, &init);
            for &(i, s) in &copies[1..] {
                let level = &mut self.levels[i];
                level.data[s * ls..(s + 1) * ls].copy_from_slice(&data);
                level.init[s * w..(s + 1) * w].copy_from_slice(&init);
            }
            writes = 1;
        }
        for &(i, s) in &copies {
            let level = &mut self.levels[i];
            level.dirty[s] = false;
            if invalidate {
                level.tags[s] = INVALID;
            }
        }
        writes
    }

    /// Applies one persistence instruction to the line holding `addr`.
    /// Returns the number of memory writes (0 or 1).
    pub fn flush_line(&mut self, addr: Addr, kind: FlushKind) -> u64 {
        self.op_count += 1;
        self.persist_line(addr >> self.shift, kind.invalidates())
    }

    /// Applies [`flush_line`](Self::flush_line) to every line overlapping
    /// `[addr, addr+len)`. Returns the number of write-backs performed.
    pub fn flush_range(&mut self, addr: Addr, len: u64, kind: FlushKind) -> u64 {
        if len == 0 {
            return 0;
        }
        let first = addr >> self.shift;
        let last = (addr + len - 1) >> self.shift;
        (first..=last)
            .map(|line| self.flush_line(line << self.shift, kind))
            .sum()
    }

    /// Writes back every dirty line once (freshest copy wins) and, if
    /// requested, empties the whole hierarchy. Counts as one operation.
    pub fn writeback_all(&mut self, invalidate: bool) -> u64 {
        self.op_count += 1;
        let dirty: BTreeSet<u64> = self
            .levels
            .iter()
            .flat_map(|l| {
                l.tags
                    .iter()
                    .zip(&l.dirty)
                    .filter(|(t, d)| **d && **t != INVALID)
                    .map(|(t, _)| *t)
            })
            .collect();
        let writes = dirty
            .iter()
            .map(|&line| self.persist_line(line, false))
            .sum();
        if invalidate {
            for level in &mut self.levels {
                level.tags.fill(INVALID);
                level.dirty.fill(false);
            }
        }
        writes
    }

    /// Loads bytes straight into memory, dropping any cached copies of the
    /// touched lines. Used to set up state before simulation starts; not
    /// counted as an operation or as NVM writes.
    pub fn preload(&mut self, addr: Addr, bytes: &[u8]) {
        self.memory.store(addr, bytes);
        self.drop_cached(addr, bytes.len() as u64);
    }

    /// Copies `[addr, addr+len)` from another image into memory (restart path).
    pub fn load_from_image(&mut self, image: &MemoryImage, addr: Addr, len: u64) {
        self.memory.copy_range_from(image, addr, len);
        self.drop_cached(addr, len);
    }

    fn drop_cached(&mut self, addr: Addr, len: u64) {
        if len == 0 {
            return;
        }
        for line in (addr >> self.shift)..=((addr + len - 1) >> self.shift) {
            for level in &mut self.levels {
                if let Some(s) = level.find(line) {
                    level.tags[s] = INVALID;
                    level.dirty[s] = false;
                }
            }
        }
    }

    /// Number of distinct lines with a dirty copy somewhere in the hierarchy.
    pub fn dirty_line_count(&self) -> usize {
        self.levels
            .iter()
            .flat_map(|l| {
                l.tags
                    .iter()
                    .zip(&l.dirty)
                    .filter(|(t, d)| **d && **t != INVALID)
                    .map(|(t, _)| *t)
            })
            .collect::<BTreeSet<_>>()
            .len()
    }

    /// `(level index, dirty)` for every level holding the line of `addr`.
    pub fn residency(&self, addr: Addr) -> Vec<(usize, bool)> {
        self.copies(addr >> self.shift)
            .into_iter()
            .map(|(i, s)| (i, self.levels[i].dirty[s]))
            .collect()
    }

    /// Fraction of `[addr, addr+len)` whose freshest cached byte differs
    /// from the byte in memory. Bytes of non-resident lines count as consistent.
    pub fn inconsistent_rate(&self, addr: Addr, len: u64) -> f64 {
        assert!(len > 0, "object length must be positive");
        let ls = self.line_size;
        let w = self.words;
        let mut differing = 0u64;
        for (line, off, n) in self.chunks(addr, len as usize) {
            let Some(&(i, s)) = self.copies(line).first() else {
                continue;
            };
            let level = &self.levels[i];
            let mask = &level.init[s * w..(s + 1) * w];
            let mem = self.memory.lines.get(&(line << self.shift));
            for b in off..off + n {
                if !bit(mask, b) {
                    continue;
                }
                let cached = level.data[s * ls + b];
                let stored = mem.filter(|m| bit(&m.init, b)).map(|m| m.data[b]);
                if stored != Some(cached) {
                    differing += 1;
                }
            }
        }
        differing as f64 / len as f64
    }

    /// Simulates power loss: every cache level is discarded and the NVM
    /// image is what survives.
    pub fn crash_snapshot(self) -> MemoryImage {
        self.memory
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// One level, 2 sets x 2 ways, 64 B lines.
    fn tiny() -> SimMachine {
        SimMachine::new(CacheConfig {
            line_size: 64,
            levels: vec![LevelConfig::new(256, 2)],
        })
        .unwrap()
    }

    /// L1: 1 set x 2 ways, L2: 1 set x 4 ways.
    fn two_level() -> SimMachine {
        SimMachine::new(CacheConfig {
            line_size: 64,
            levels: vec![LevelConfig::new(128, 2), LevelConfig::new(256, 4)],
        })
        .unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(CacheConfig::desk().validate().is_ok());
        assert!(CacheConfig::server().validate().is_ok());
        let mut c = CacheConfig::desk();
        c.line_size = 48;
        assert!(c.validate().is_err());
        let mut c = CacheConfig::desk();
        c.levels[1].capacity_bytes = 1000;
        assert!(c.validate().is_err());
        let mut c = CacheConfig::desk();
        c.levels.swap(0, 2);
        assert!(c.validate().is_err());
        let c = CacheConfig::from_json(
            r#"{"line_size":64,"levels":[{"capacity_bytes":256,"associativity":2}]}"#,
        )
        .unwrap();
        assert_eq!(c.llc_lines(), 4);
        assert!(CacheConfig::from_json(r#"{"levels":[]}"#).is_err());
    }

    #[test]
    fn read_after_write() {
        let mut m = tiny();
        m.write(0x100, &[7]).unwrap();
        assert_eq!(m.read(0x100, 1).unwrap(), vec![7]);
        assert_eq!(m.op_count(), 2);
    }

    #[test]
    fn miss_fill_from_memory() {
        let mut m = tiny();
        m.preload(0x200, &[9]);
        assert_eq!(m.read(0x200, 1).unwrap(), vec![9]);
        assert_eq!(m.residency(0x200), vec![(0, false)]);
    }

    #[test]
    fn uninitialized_read_is_an_error() {
        let mut m = tiny();
        m.write(0x100, &[1]).unwrap();
        assert_eq!(
            m.read(0x101, 1),
            Err(SimError::UninitializedRead { addr: 0x101 })
        );
    }

    #[test]
    fn address_limit() {
        let mut m = tiny().with_address_limit(0x1000);
        assert!(matches!(
            m.write(0xfff, &[1, 2]),
            Err(SimError::AddressSpaceExceeded { .. })
        ));
        m.write(0xffe, &[1, 2]).unwrap();
    }

    #[test]
    fn lru_conflict_scenario() {
        // Lines A, B, C all map to set 0 of the 2-set x 2-way cache.
        let (a, b, c) = (0x000, 0x080, 0x100);
        let mut m = tiny();
        m.write(a, &[1]).unwrap();
        m.write(b, &[2]).unwrap();
        m.read(a, 1).unwrap(); // A becomes MRU, B is LRU
        m.write(c, &[3]).unwrap(); // evicts B (dirty) to memory
        assert!(m.residency(b).is_empty());
        assert_eq!(m.residency(a), vec![(0, true)]);
        assert_eq!(m.nvm_write_count(), 1);
        assert_eq!(m.memory().byte(b), Some(2));
        // Refetch of B evicts A (now LRU).
        assert_eq!(m.read(b, 1).unwrap(), vec![2]);
        assert!(m.residency(a).is_empty());
        assert_eq!(m.memory().byte(a), Some(1));
        assert_eq!(m.nvm_write_count(), 2);
    }

    #[test]
    fn unflushed_write_is_lost_on_crash() {
        let mut m = tiny();
        m.preload(0x40, &[5]);
        m.write(0x40, &[6]).unwrap();
        let snap = m.crash_snapshot();
        assert_eq!(snap.byte(0x40), Some(5));
    }

    #[test]
    fn eviction_through_hierarchy_persists() {
        let mut m = two_level();
        m.preload(0, &[0]);
        m.write(0, &[42]).unwrap();
        // Six more distinct lines push line 0 out of L1 (2 ways) and L2 (4 ways).
        for i in 1..=6u64 {
            m.write(i * 64, &[i as u8]).unwrap();
        }
        assert!(m.residency(0).is_empty());
        assert_eq!(m.memory().byte(0), Some(42));
        // Other dirty lines may have been pushed out too; each must carry its value.
        let mut persisted = 0;
        for i in 1..=6u64 {
            match m.memory().byte(i * 64) {
                Some(v) => {
                    assert_eq!(v, i as u8);
                    persisted += 1;
                }
                None => assert!(!m.residency(i * 64).is_empty()),
            }
        }
        assert_eq!(m.nvm_write_count(), 1 + persisted);
    }

    #[test]
    fn coalesced_writes_cost_one_write_back() {
        let mut m = two_level();
        m.write(0, &[1]).unwrap();
        m.write(8, &[2]).unwrap();
        let before = m.nvm_write_count();
        for i in 1..=6u64 {
            m.read(i * 64, 1).unwrap_err(); // uninitialized, but still fills
        }
        assert_eq!(m.nvm_write_count() - before, 1);
        assert_eq!(m.memory().read(0, 1).unwrap(), vec![1]);
        assert_eq!(m.memory().read(8, 1).unwrap(), vec![2]);
    }

    #[test]
    fn flush_semantics() {
        let mut m = two_level();
        m.write(0, &[1]).unwrap();
        assert_eq!(m.flush_line(0, FlushKind::FlushOpt), 1);
        assert!(m.residency(0).is_empty());
        assert_eq!(m.memory().byte(0), Some(1));

        // Clean resident line: no write for any flavor.
        m.read(0, 1).unwrap();
        for kind in [
            FlushKind::WritebackNoInv,
            FlushKind::FlushOpt,
            FlushKind::FlushInvalidate,
        ] {
            let w = m.nvm_write_count();
            assert_eq!(m.flush_line(0, kind), 0);
            assert_eq!(m.nvm_write_count(), w);
        }

        // CLWB keeps the line resident: a following read hits without refill.
        m.write(0, &[2]).unwrap();
        assert_eq!(m.flush_line(0, FlushKind::WritebackNoInv), 1);
        assert_eq!(m.residency(0), vec![(0, false), (1, false)]);
        let w = m.nvm_write_count();
        assert_eq!(m.read(0, 1).unwrap(), vec![2]);
        assert_eq!(m.nvm_write_count(), w);
        assert_eq!(m.residency(0), vec![(0, false), (1, false)]);
    }

    #[test]
    fn flush_range_counts_only_dirty_lines() {
        let mut m = tiny();
        assert_eq!(m.flush_range(0, 0, FlushKind::FlushOpt), 0);
        m.write(0, &[1; 64]).unwrap();
        m.write(64, &[2; 64]).unwrap();
        assert_eq!(m.flush_range(0, 128, FlushKind::FlushOpt), 2);
        assert_eq!(m.flush_range(0, 128, FlushKind::FlushOpt), 0);
    }

    #[test]
    fn writeback_all_uses_freshest_copy() {
        let mut m = two_level();
        m.preload(0, &[1]);
        m.read(0, 1).unwrap(); // clean copies in L1 and L2
        m.write(0, &[9]).unwrap(); // L1 dirty, L2 stale clean
        assert_eq!(m.residency(0), vec![(0, true), (1, false)]);
        assert_eq!(m.writeback_all(false), 1);
        assert_eq!(m.memory().byte(0), Some(9));
        assert_eq!(m.dirty_line_count(), 0);
        // The stale L2 copy was refreshed: dropping L1 must not resurrect 1.
        assert_eq!(m.flush_line(0, FlushKind::WritebackNoInv), 0);
        assert_eq!(m.read(0, 1).unwrap(), vec![9]);
    }

    #[test]
    fn writeback_all_counts() {
        let mut m = SimMachine::new(CacheConfig::desk()).unwrap();
        assert_eq!(m.writeback_all(true), 0);
        for i in 0..5u64 {
            m.write(i * 64, &[i as u8]).unwrap();
        }
        assert_eq!(m.dirty_line_count(), 5);
        assert_eq!(m.writeback_all(true), 5);
        assert_eq!(m.dirty_line_count(), 0);
    }

    #[test]
    fn inconsistent_rate_is_byte_level() {
        let mut m = tiny();
        m.preload(0, &[3; 128]);
        m.write(0, &[4; 16]).unwrap();
        assert_eq!(m.inconsistent_rate(0, 128), 16.0 / 128.0);
        // Dirty but equal to memory: consistent.
        m.write(64, &[3; 8]).unwrap();
        assert_eq!(m.residency(64), vec![(0, true)]);
        assert_eq!(m.inconsistent_rate(64, 64), 0.0);
        m.flush_range(0, 128, FlushKind::WritebackNoInv);
        assert_eq!(m.inconsistent_rate(0, 128), 0.0);
    }

    #[test]
    fn dump_format() {
        let mut img = MemoryImage::new(8);
        img.store(0x10, &[0xab, 0x01]);
        img.store(0x0, &[0xff]);
        assert_eq!(img.dump(), "0x0 ff00000000000000\n0x10 ab01000000000000\n");
    }

    #[test]
    fn unaligned_access_spans_lines_as_one_op() {
        let mut m = tiny();
        m.write(60, &[1, 2, 3, 4, 5, 6, 7, 8]).unwrap();
        assert_eq!(m.op_count(), 1);
        assert_eq!(m.read(60, 8).unwrap(), vec![1, 2, 3, 4, 5, 6, 7, 8]);
        assert_eq!(m.residency(0), vec![(0, true)]);
        assert_eq!(m.residency(64), vec![(0, true)]);
    }
}

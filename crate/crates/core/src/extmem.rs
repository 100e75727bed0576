//! Block-buffered external sequences with exact logical I/O counting.
//!
//! Every stream is a file of fixed-width records behind a 4-byte magic. A
//! reader or writer holds exactly one block of `B` records in memory and
//! charges one block transfer to the shared [`IoCounter`] each time that block
//! is filled from, or flushed to, the file. Counts are logical: they do not
//! depend on OS caching.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::fs::File;
use std::io::{Read, Seek, SeekFrom, Write};
use std::marker::PhantomData;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};
use std::sync::Arc;

use crate::error::{Error, Result};

pub const MAGIC_LEN: usize = 4;

pub const ENV_MEM_ITEMS: &str = "GEOSEP_MEM_ITEMS";
pub const ENV_BLOCK_ITEMS: &str = "GEOSEP_BLOCK_ITEMS";

/// Internal memory of `mem_items` records, transferred in blocks of
/// `block_items` records.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemConfig {
    pub mem_items: usize,
    pub block_items: usize,
}

impl Default for MemConfig {
    fn default() -> Self {
        MemConfig {
            mem_items: 65_536,
            block_items: 256,
        }
    }
}

impl MemConfig {
    pub fn new(mem_items: usize, block_items: usize) -> Result<Self> {
        if block_items == 0 || mem_items < 2 * block_items {
            return Err(Error::InvalidParams(format!(
                "need M >= 2B >= 2, got M = {mem_items}, B = {block_items}"
            )));
        }
        Ok(MemConfig {
            mem_items,
            block_items,
        })
    }

    /// Reads `GEOSEP_MEM_ITEMS` / `GEOSEP_BLOCK_ITEMS`, falling back to
    /// `fallback` for anything unset.
    pub fn from_env(fallback: MemConfig) -> Result<Self> {
        let get = |key: &str, default: usize| -> Result<usize> {
            match std::env::var(key) {
                Ok(v) => v
                    .trim()
                    .parse()
                    .map_err(|_| Error::InvalidParams(format!("{key}={v} is not a count"))),
                Err(_) => Ok(default),
            }
        };
        Self::new(
            get(ENV_MEM_ITEMS, fallback.mem_items)?,
            get(ENV_BLOCK_ITEMS, fallback.block_items)?,
        )
    }

    /// Blocks that fit in memory, `⌊M/B⌋`.
    pub fn blocks(&self) -> usize {
        self.mem_items / self.block_items
    }

    /// Merge fan-in `⌊M/B⌋ - 1`: one block per input run plus an output block.
    pub fn merge_fanin(&self) -> usize {
        (self.blocks() - 1).max(2)
    }

    pub fn blocks_for(&self, items: usize) -> u64 {
        items.div_ceil(self.block_items) as u64
    }
}

#[derive(Debug, Default)]
struct Counts {
    reads: AtomicU64,
    writes: AtomicU64,
}

/// Shared block-transfer counter. Clones observe the same counts.
#[derive(Debug, Clone, Default)]
pub struct IoCounter(Arc<Counts>);

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IoStats {
    pub reads: u64,
    pub writes: u64,
}

impl IoStats {
    pub fn total(&self) -> u64 {
        self.reads + self.writes
    }

    pub fn since(&self, earlier: IoStats) -> IoStats {
        IoStats {
            reads: self.reads - earlier.reads,
            writes: self.writes - earlier.writes,
        }
    }
}

impl std::fmt::Display for IoStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "reads={} writes={}", self.reads, self.writes)
    }
}

impl IoCounter {
    pub fn add_reads(&self, n: u64) {
        self.0.reads.fetch_add(n, AtomicOrdering::Relaxed);
    }

    pub fn add_writes(&self, n: u64) {
        self.0.writes.fetch_add(n, AtomicOrdering::Relaxed);
    }

    pub fn stats(&self) -> IoStats {
        IoStats {
            reads: self.0.reads.load(AtomicOrdering::Relaxed),
            writes: self.0.writes.load(AtomicOrdering::Relaxed),
        }
    }

    /// `reads=<n> writes=<n>`
    pub fn dump(&self) -> String {
        self.stats().to_string()
    }
}

/// A fixed-width little-endian record.
pub trait Record: Sized {
    const WIDTH: usize;
    const MAGIC: [u8; 4];
    fn encode(&self, out: &mut [u8]);
    fn decode(buf: &[u8]) -> Self;
}

pub(crate) fn put_u64(out: &mut [u8], at: usize, v: u64) {
    out[at..at + 8].copy_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_f64(out: &mut [u8], at: usize, v: f64) {
    out[at..at + 8].copy_from_slice(&v.to_le_bytes());
}

pub(crate) fn get_u64(buf: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(buf[at..at + 8].try_into().unwrap())
}

pub(crate) fn get_f64(buf: &[u8], at: usize) -> f64 {
    f64::from_le_bytes(buf[at..at + 8].try_into().unwrap())
}

impl Record for u64 {
    const WIDTH: usize = 8;
    const MAGIC: [u8; 4] = *b"U64_";
    fn encode(&self, out: &mut [u8]) {
        put_u64(out, 0, *self);
    }
    fn decode(buf: &[u8]) -> Self {
        get_u64(buf, 0)
    }
}

impl<A: Record, B: Record> Record for (A, B) {
    const WIDTH: usize = A::WIDTH + B::WIDTH;
    const MAGIC: [u8; 4] = *b"PAIR";
    fn encode(&self, out: &mut [u8]) {
        self.0.encode(&mut out[..A::WIDTH]);
        self.1.encode(&mut out[A::WIDTH..]);
    }
    fn decode(buf: &[u8]) -> Self {
        (A::decode(&buf[..A::WIDTH]), B::decode(&buf[A::WIDTH..]))
    }
}

/// Order-preserving map of finite floats onto `u64`.
pub fn ordered_f64(x: f64) -> u64 {
    let bits = x.to_bits();
    if bits >> 63 == 1 {
        !bits
    } else {
        bits | (1 << 63)
    }
}

/// Owns scratch space, the memory configuration and the I/O counter of one run.
#[derive(Debug)]
pub struct ExtContext {
    cfg: MemConfig,
    counter: IoCounter,
    dir: tempfile::TempDir,
    seq: AtomicU64,
}

impl ExtContext {
    pub fn new(cfg: MemConfig) -> Result<Self> {
        let dir = tempfile::Builder::new()
            .prefix("geosep-")
            .tempdir()
            .map_err(|e| Error::io(std::env::temp_dir(), e))?;
        Ok(Self::with_dir(cfg, dir))
    }

    /// Scratch files live under `parent`, so finished streams can be renamed
    /// into place there without copying.
    pub fn new_in(cfg: MemConfig, parent: &Path) -> Result<Self> {
        let dir = tempfile::Builder::new()
            .prefix(".geosep-")
            .tempdir_in(parent)
            .map_err(|e| Error::io(parent, e))?;
        Ok(Self::with_dir(cfg, dir))
    }

    fn with_dir(cfg: MemConfig, dir: tempfile::TempDir) -> Self {
        ExtContext {
            cfg,
            counter: IoCounter::default(),
            dir,
            seq: AtomicU64::new(0),
        }
    }

    pub fn cfg(&self) -> MemConfig {
        self.cfg
    }

    pub fn counter(&self) -> &IoCounter {
        &self.counter
    }

    pub fn stats(&self) -> IoStats {
        self.counter.stats()
    }

    fn temp_path(&self) -> PathBuf {
        let n = self.seq.fetch_add(1, AtomicOrdering::Relaxed);
        self.dir.path().join(format!("s{n:08}"))
    }

    pub fn temp_writer<T: Record>(&self) -> Result<StreamWriter<T>> {
        StreamWriter::create(self.temp_path(), self, true)
    }

    pub fn writer_at<T: Record>(&self, path: impl Into<PathBuf>) -> Result<StreamWriter<T>> {
        StreamWriter::create(path.into(), self, false)
    }

    pub fn reader<T: Record>(&self, s: &Stream<T>) -> Result<StreamReader<T>> {
        StreamReader::open(s, self)
    }

    pub fn write_all<T: Record>(&self, items: impl IntoIterator<Item = T>) -> Result<Stream<T>> {
        let mut w = self.temp_writer()?;
        for it in items {
            w.push(&it)?;
        }
        w.finish()
    }

    pub fn read_all<T: Record>(&self, s: &Stream<T>) -> Result<Vec<T>> {
        let mut out = Vec::with_capacity(s.len());
        scan(self, s, |t| {
            out.push(t);
            Ok(())
        })?;
        Ok(out)
    }
}

/// A file of records. Scratch streams delete their file on drop.
#[derive(Debug)]
pub struct Stream<T> {
    path: PathBuf,
    len: usize,
    temp: bool,
    _t: PhantomData<fn() -> T>,
}

impl<T: Record> Stream<T> {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let mut f = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let size = f.metadata().map_err(|e| Error::io(&path, e))?.len() as usize;
        let mut magic = [0u8; MAGIC_LEN];
        if size < MAGIC_LEN {
            return Err(Error::Format {
                path,
                msg: "file shorter than its magic".into(),
            });
        }
        f.read_exact(&mut magic).map_err(|e| Error::io(&path, e))?;
        if magic != T::MAGIC {
            return Err(Error::Format {
                msg: format!(
                    "expected magic {:?}, found {:?}",
                    String::from_utf8_lossy(&T::MAGIC),
                    String::from_utf8_lossy(&magic)
                ),
                path,
            });
        }
        let body = size - MAGIC_LEN;
        if body % T::WIDTH != 0 {
            return Err(Error::Format {
                path,
                msg: format!("body of {body} bytes is not a multiple of {}", T::WIDTH),
            });
        }
        Ok(Stream {
            path,
            len: body / T::WIDTH,
            temp: false,
            _t: PhantomData,
        })
    }
}

impl<T> Stream<T> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn is_temp(&self) -> bool {
        self.temp
    }

    /// A second handle on the same file that never deletes it.
    pub fn alias(&self) -> Stream<T> {
        Stream {
            path: self.path.clone(),
            len: self.len,
            temp: false,
            _t: PhantomData,
        }
    }

    /// Reinterprets the file as records of another type with the same layout.
    pub fn cast<U>(mut self) -> Stream<U> {
        let temp = std::mem::replace(&mut self.temp, false);
        Stream {
            path: std::mem::take(&mut self.path),
            len: self.len,
            temp,
            _t: PhantomData,
        }
    }

    /// Moves the file to `dest` and stops treating it as scratch.
    pub fn persist(mut self, dest: impl Into<PathBuf>) -> Result<Stream<T>> {
        let dest = dest.into();
        if std::fs::rename(&self.path, &dest).is_err() {
            std::fs::copy(&self.path, &dest).map_err(|e| Error::io(&dest, e))?;
            let _ = std::fs::remove_file(&self.path);
        }
        self.temp = false;
        Ok(Stream {
            path: dest,
            len: self.len,
            temp: false,
            _t: PhantomData,
        })
    }
}

impl<T> Drop for Stream<T> {
    fn drop(&mut self) {
        if self.temp {
            let _ = std::fs::remove_file(&self.path);
        }
    }
}

pub struct StreamWriter<T> {
    file: File,
    path: PathBuf,
    buf: Vec<u8>,
    fill: usize,
    block: usize,
    len: usize,
    temp: bool,
    counter: IoCounter,
    _t: PhantomData<fn(T)>,
}

impl<T: Record> StreamWriter<T> {
    fn create(path: PathBuf, ctx: &ExtContext, temp: bool) -> Result<Self> {
        let mut file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        file.write_all(&T::MAGIC).map_err(|e| Error::io(&path, e))?;
        let block = ctx.cfg.block_items;
        Ok(StreamWriter {
            file,
            path,
            buf: vec![0u8; block * T::WIDTH],
            fill: 0,
            block,
            len: 0,
            temp,
            counter: ctx.counter.clone(),
            _t: PhantomData,
        })
    }

    pub fn push(&mut self, t: &T) -> Result<()> {
        let at = self.fill * T::WIDTH;
        t.encode(&mut self.buf[at..at + T::WIDTH]);
        self.fill += 1;
        self.len += 1;
        if self.fill == self.block {
            self.flush_block()?;
        }
        Ok(())
    }

    fn flush_block(&mut self) -> Result<()> {
        if self.fill == 0 {
            return Ok(());
        }
        self.file
            .write_all(&self.buf[..self.fill * T::WIDTH])
            .map_err(|e| Error::io(&self.path, e))?;
        self.counter.add_writes(1);
        self.fill = 0;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn finish(mut self) -> Result<Stream<T>> {
        self.flush_block()?;
        self.file.flush().map_err(|e| Error::io(&self.path, e))?;
        Ok(Stream {
            path: std::mem::take(&mut self.path),
            len: self.len,
            temp: self.temp,
            _t: PhantomData,
        })
    }
}

/// Sequential cursor over a stream. Owns its file handle, so it outlives
/// neither more nor less than it needs to.
pub struct StreamReader<T> {
    file: File,
    path: PathBuf,
    buf: Vec<u8>,
    pos: usize,
    fill: usize,
    remaining: usize,
    block: usize,
    counter: IoCounter,
    _t: PhantomData<fn() -> T>,
}

impl<T: Record> StreamReader<T> {
    fn open(s: &Stream<T>, ctx: &ExtContext) -> Result<Self> {
        let mut file = File::open(&s.path).map_err(|e| Error::io(&s.path, e))?;
        file.seek(SeekFrom::Start(MAGIC_LEN as u64))
            .map_err(|e| Error::io(&s.path, e))?;
        let block = ctx.cfg.block_items;
        Ok(StreamReader {
            file,
            path: s.path.clone(),
            buf: vec![0u8; block * T::WIDTH],
            pos: 0,
            fill: 0,
            remaining: s.len,
            block,
            counter: ctx.counter.clone(),
            _t: PhantomData,
        })
    }

    pub fn next_item(&mut self) -> Result<Option<T>> {
        if self.pos == self.fill {
            if self.remaining == 0 {
                return Ok(None);
            }
            let n = self.remaining.min(self.block);
            self.file
                .read_exact(&mut self.buf[..n * T::WIDTH])
                .map_err(|e| Error::io(&self.path, e))?;
            self.counter.add_reads(1);
            self.remaining -= n;
            self.pos = 0;
            self.fill = n;
        }
        let at = self.pos * T::WIDTH;
        self.pos += 1;
        Ok(Some(T::decode(&self.buf[at..at + T::WIDTH])))
    }
}

impl<T: Record> Iterator for StreamReader<T> {
    type Item = Result<T>;
    fn next(&mut self) -> Option<Result<T>> {
        self.next_item().transpose()
    }
}

/// Visits every record in order; costs `⌈N/B⌉` block reads.
pub fn scan<T: Record>(
    ctx: &ExtContext,
    s: &Stream<T>,
    mut visitor: impl FnMut(T) -> Result<()>,
) -> Result<()> {
    let mut r = ctx.reader(s)?;
    while let Some(t) = r.next_item()? {
        visitor(t)?;
    }
    Ok(())
}

/// Stable external multiway merge sort.
///
/// Runs of `M` records are sorted in memory, then merged `⌊M/B⌋ - 1` at a
/// time. With `dedup`, only the first record of each group of equal keys
/// survives (the earliest in input order).
pub fn ext_sort_by_key<T, K, F, I>(ctx: &ExtContext, input: I, key: F, dedup: bool) -> Result<Stream<T>>
where
    T: Record,
    K: Ord,
    F: Fn(&T) -> K,
    I: IntoIterator<Item = Result<T>>,
{
    let m = ctx.cfg.mem_items;
    let mut runs: Vec<Stream<T>> = Vec::new();
    let mut chunk: Vec<T> = Vec::with_capacity(m.min(1 << 20));
    let mut input = input.into_iter();
    loop {
        chunk.clear();
        for item in input.by_ref() {
            chunk.push(item?);
            if chunk.len() == m {
                break;
            }
        }
        if chunk.is_empty() && !runs.is_empty() {
            break;
        }
        let exhausted = chunk.len() < m;
        chunk.sort_by(|a, b| key(a).cmp(&key(b)));
        if dedup {
            chunk.dedup_by(|b, a| key(a) == key(b));
        }
        let mut w = ctx.temp_writer()?;
        for t in &chunk {
            w.push(t)?;
        }
        runs.push(w.finish()?);
        if exhausted {
            break;
        }
    }
    let fanin = ctx.cfg.merge_fanin();
    while runs.len() > 1 {
        let mut next = Vec::with_capacity(runs.len().div_ceil(fanin));
        let mut it = runs.into_iter().peekable();
        while it.peek().is_some() {
            let group: Vec<Stream<T>> = it.by_ref().take(fanin).collect();
            next.push(merge_runs(ctx, group, &key, dedup)?);
        }
        runs = next;
    }
    Ok(runs.pop().expect("at least one run"))
}

/// Sorts a stream by key (no deduplication).
pub fn ext_sort<T, K, F>(ctx: &ExtContext, s: &Stream<T>, key: F) -> Result<Stream<T>>
where
    T: Record,
    K: Ord,
    F: Fn(&T) -> K,
{
    let r = ctx.reader(s)?;
    ext_sort_by_key(ctx, r, key, false)
}

struct HeadEntry<K> {
    key: K,
    run: usize,
}

impl<K: Ord> PartialEq for HeadEntry<K> {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}
impl<K: Ord> Eq for HeadEntry<K> {}
impl<K: Ord> PartialOrd for HeadEntry<K> {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl<K: Ord> Ord for HeadEntry<K> {
    fn cmp(&self, o: &Self) -> Ordering {
        self.key.cmp(&o.key).then(self.run.cmp(&o.run))
    }
}

fn merge_runs<T, K, F>(ctx: &ExtContext, runs: Vec<Stream<T>>, key: &F, dedup: bool) -> Result<Stream<T>>
where
    T: Record,
    K: Ord,
    F: Fn(&T) -> K,
{
    let mut w = ctx.temp_writer()?;
    let mut readers = runs
        .iter()
        .map(|s| ctx.reader(s))
        .collect::<Result<Vec<_>>>()?;
    let mut heads: Vec<Option<T>> = Vec::with_capacity(readers.len());
    let mut heap = BinaryHeap::new();
    for (i, r) in readers.iter_mut().enumerate() {
        let h = r.next_item()?;
        if let Some(t) = &h {
            heap.push(Reverse(HeadEntry { key: key(t), run: i }));
        }
        heads.push(h);
    }
    let mut last: Option<K> = None;
    while let Some(Reverse(HeadEntry { key: k, run })) = heap.pop() {
        let t = heads[run].take().expect("head present");
        let keep = !dedup || last.as_ref() != Some(&k);
        if keep {
            w.push(&t)?;
        }
        if dedup {
            last = Some(k);
        }
        if let Some(n) = readers[run].next_item()? {
            heap.push(Reverse(HeadEntry { key: key(&n), run }));
            heads[run] = Some(n);
        }
    }
    drop(readers);
    drop(runs);
    w.finish()
}

/// Upper bound on the counted I/O of [`ext_sort`] for `n` records.
pub fn sort_io_bound(cfg: MemConfig, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let runs = n.div_ceil(cfg.mem_items) as f64;
    let fanin = cfg.merge_fanin() as f64;
    let passes = if runs <= 1.0 {
        0.0
    } else {
        (runs.ln() / fanin.ln() - 1e-12).ceil()
    };
    4.0 * (n as f64 / cfg.block_items as f64) * (1.0 + passes)
}

struct Run<T> {
    _stream: Stream<T>,
    reader: StreamReader<T>,
}

/// External priority queue built from an in-memory heap that spills into
/// sorted runs, with lazy merging once the number of runs outgrows memory.
///
/// Half of memory holds the insertion heap; the other half holds one block per
/// run. Entries are ordered by `(key, payload)`.
pub struct ExtPq<'c, K, P> {
    ctx: &'c ExtContext,
    heap: BinaryHeap<Reverse<(K, P)>>,
    heap_cap: usize,
    max_runs: usize,
    runs: Vec<Option<Run<(K, P)>>>,
    heads: BinaryHeap<Reverse<((K, P), usize)>>,
    len: usize,
}

impl<'c, K, P> ExtPq<'c, K, P>
where
    K: Record + Ord + Clone,
    P: Record + Ord + Clone,
{
    pub fn new(ctx: &'c ExtContext) -> Self {
        let cfg = ctx.cfg;
        let heap_cap = (cfg.mem_items / 2).max(1);
        let max_runs = ((cfg.mem_items / 2) / cfg.block_items).saturating_sub(1).max(2);
        ExtPq {
            ctx,
            heap: BinaryHeap::new(),
            heap_cap,
            max_runs,
            runs: Vec::new(),
            heads: BinaryHeap::new(),
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn push(&mut self, key: K, payload: P) -> Result<()> {
        self.heap.push(Reverse((key, payload)));
        self.len += 1;
        if self.heap.len() >= self.heap_cap {
            self.spill()?;
        }
        Ok(())
    }

    pub fn peek_min(&self) -> Option<&(K, P)> {
        let h = self.heap.peek().map(|Reverse(e)| e);
        let r = self.heads.peek().map(|Reverse((e, _))| e);
        match (h, r) {
            (Some(a), Some(b)) => Some(if a <= b { a } else { b }),
            (a, b) => a.or(b),
        }
    }

    pub fn pop_min(&mut self) -> Result<(K, P)> {
        let from_heap = match (self.heap.peek(), self.heads.peek()) {
            (None, None) => return Err(Error::PopEmpty),
            (Some(_), None) => true,
            (None, Some(_)) => false,
            (Some(Reverse(a)), Some(Reverse((b, _)))) => a <= b,
        };
        self.len -= 1;
        if from_heap {
            return Ok(self.heap.pop().unwrap().0);
        }
        let Reverse((entry, run)) = self.heads.pop().unwrap();
        self.advance(run)?;
        Ok(entry)
    }

    fn advance(&mut self, run: usize) -> Result<()> {
        let slot = &mut self.runs[run];
        let next = slot.as_mut().unwrap().reader.next_item()?;
        match next {
            Some(e) => self.heads.push(Reverse((e, run))),
            None => *slot = None,
        }
        Ok(())
    }

    fn spill(&mut self) -> Result<()> {
        let mut sorted: Vec<(K, P)> = std::mem::take(&mut self.heap)
            .into_iter()
            .map(|Reverse(e)| e)
            .collect();
        sorted.sort();
        let stream = self.ctx.write_all(sorted)?;
        self.add_run(stream)?;
        if self.runs.iter().filter(|r| r.is_some()).count() > self.max_runs {
            self.merge_all()?;
        }
        Ok(())
    }

    fn add_run(&mut self, stream: Stream<(K, P)>) -> Result<()> {
        let mut reader = self.ctx.reader(&stream)?;
        let idx = self.runs.len();
        if let Some(first) = reader.next_item()? {
            self.heads.push(Reverse((first, idx)));
            self.runs.push(Some(Run {
                _stream: stream,
                reader,
            }));
        }
        Ok(())
    }

    /// Merges what remains of every run into a single run.
    fn merge_all(&mut self) -> Result<()> {
        let mut w = self.ctx.temp_writer::<(K, P)>()?;
        while let Some(Reverse((entry, run))) = self.heads.pop() {
            w.push(&entry)?;
            self.advance(run)?;
        }
        self.runs.clear();
        let merged = w.finish()?;
        self.add_run(merged)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ctx(m: usize, b: usize) -> ExtContext {
        ExtContext::new(MemConfig::new(m, b).unwrap()).unwrap()
    }

    #[test]
    fn mem_config_validation() {
        assert!(MemConfig::new(10, 5).is_ok());
        assert!(MemConfig::new(9, 5).is_err());
        assert!(MemConfig::new(10, 0).is_err());
    }

    #[test]
    fn scan_counts_blocks() {
        for (n, want) in [(0usize, 0u64), (101, 2), (100_000, 1000)] {
            let c = ctx(1000, 100);
            let s = c.write_all(0..n as u64).unwrap();
            assert_eq!(c.stats().writes, want);
            let before = c.stats();
            let mut seen = 0u64;
            scan(&c, &s, |v| {
                assert_eq!(v, seen);
                seen += 1;
                Ok(())
            })
            .unwrap();
            assert_eq!(seen as usize, n);
            assert_eq!(c.stats().since(before).reads, want);
        }
    }

    #[test]
    fn open_rejects_wrong_magic() {
        let c = ctx(100, 10);
        let s = c.write_all([1u64, 2, 3]).unwrap();
        assert_eq!(Stream::<u64>::open(s.path()).unwrap().len(), 3);
        assert!(matches!(
            Stream::<(u64, u64)>::open(s.path()),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn sort_small_examples() {
        let c = ctx(100, 10);
        let s = c.write_all([3u64, 1, 2]).unwrap();
        let out = ext_sort(&c, &s, |v| *v).unwrap();
        assert_eq!(c.read_all(&out).unwrap(), vec![1, 2, 3]);

        let s = c.write_all(std::iter::empty::<u64>()).unwrap();
        let out = ext_sort(&c, &s, |v| *v).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn sort_in_memory_costs_two_scans() {
        let c = ctx(1000, 100);
        let s = c.write_all((0..950u64).rev()).unwrap();
        let before = c.stats();
        ext_sort(&c, &s, |v| *v).unwrap();
        assert_eq!(c.stats().since(before).total(), 2 * 10);
    }

    #[test]
    fn sort_large_matches_oracle_within_bound() {
        let cfg = MemConfig::new(1000, 100).unwrap();
        let c = ExtContext::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<u64> = (0..100_000).map(|_| rng.gen()).collect();
        let s = c.write_all(data.iter().copied()).unwrap();
        let before = c.stats();
        let out = ext_sort(&c, &s, |v| *v).unwrap();
        let io = c.stats().since(before).total();
        let mut oracle = data.clone();
        oracle.sort();
        assert_eq!(c.read_all(&out).unwrap(), oracle);
        assert!((io as f64) <= sort_io_bound(cfg, data.len()), "io {io}");
    }

    #[test]
    fn sort_is_stable_and_dedups_first() {
        let c = ctx(40, 10);
        let data: Vec<(u64, u64)> = (0..500u64).map(|i| ((i * 7) % 13, i)).collect();
        let s = c.write_all(data.iter().copied()).unwrap();
        let out = c.read_all(&ext_sort(&c, &s, |p| p.0).unwrap()).unwrap();
        let mut oracle = data.clone();
        oracle.sort_by_key(|p| p.0);
        assert_eq!(out, oracle);

        let r = c.reader(&s).unwrap();
        let dd = c.read_all(&ext_sort_by_key(&c, r, |p| p.0, true).unwrap()).unwrap();
        let firsts: Vec<(u64, u64)> = (0..13u64)
            .map(|k| *data.iter().find(|p| p.0 == k).unwrap())
            .collect();
        assert_eq!(dd, firsts);
    }

    #[test]
    fn io_counts_are_reproducible() {
        let run = || {
            let c = ctx(500, 50);
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let s = c.write_all((0..20_000).map(|_| rng.gen::<u64>())).unwrap();
            ext_sort(&c, &s, |v| *v).unwrap();
            c.stats()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn ordered_f64_preserves_order() {
        let xs = [-1e300, -3.5, -0.0, 0.0, 1e-300, 2.0, 7e10];
        for w in xs.windows(2) {
            assert!(ordered_f64(w[0]) <= ordered_f64(w[1]));
        }
    }

    #[test]
    fn pq_basic() {
        let c = ctx(100, 10);
        let mut pq = ExtPq::<u64, u64>::new(&c);
        pq.push(2, 10).unwrap();
        pq.push(1, 11).unwrap();
        assert_eq!(pq.pop_min().unwrap(), (1, 11));
        assert_eq!(pq.pop_min().unwrap(), (2, 10));
        assert!(matches!(pq.pop_min(), Err(Error::PopEmpty)));
    }

    #[test]
    fn pq_matches_binary_heap_oracle() {
        let c = ctx(200, 10);
        let mut pq = ExtPq::<u64, u64>::new(&c);
        let mut oracle = BinaryHeap::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for i in 0..100_000u64 {
            if rng.gen_bool(0.55) || oracle.is_empty() {
                let k = rng.gen_range(0..5000u64);
                pq.push(k, i).unwrap();
                oracle.push(Reverse((k, i)));
            } else {
                let Reverse(want) = oracle.pop().unwrap();
                assert_eq!(pq.peek_min().copied(), Some(want));
                assert_eq!(pq.pop_min().unwrap(), want);
            }
            assert_eq!(pq.len(), oracle.len());
        }
        while let Some(Reverse(want)) = oracle.pop() {
            assert_eq!(pq.pop_min().unwrap(), want);
        }
        assert!(pq.is_empty());
        assert!(c.stats().writes > 0, "queue never spilled");
    }
}

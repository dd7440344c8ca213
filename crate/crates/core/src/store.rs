//! Simulated server memory: an array of fixed-size pages of 64-bit words that
//! records every read and write range per logical operation.

use std::collections::BTreeSet;
use std::io::Write;

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StoreError {
    #[error("an operation is already open")]
    NestedOp,
    #[error("no operation is open")]
    NoOpenOp,
    #[error("operation {0} is not the open operation")]
    WrongOp(u64),
    #[error("range [{addr}, {addr}+{len}) out of bounds for {size} words")]
    OutOfBounds { addr: usize, len: usize, size: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AccessKind {
    Read,
    Write,
}

impl AccessKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AccessKind::Read => "read",
            AccessKind::Write => "write",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Range {
    pub kind: AccessKind,
    pub start: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceEntry {
    pub op_id: u64,
    pub label: String,
    pub range: Range,
}

/// Page-aligned span of the store owned by one table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Region {
    pub start: usize,
    pub len: usize,
}

impl Region {
    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

/// Measurements of one logical operation, derived purely from its ranges.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OpMetrics {
    pub op_id: u64,
    pub label: String,
    /// Maximal disjoint intervals in the union of read and write ranges.
    pub locality: usize,
    pub read_locality: usize,
    /// Distinct words read.
    pub read_words: usize,
    /// Distinct words read or written.
    pub touched_words: usize,
    /// Sum of range lengths, counting repeats.
    pub transferred_words: usize,
    pub page_pattern: BTreeSet<usize>,
    pub pages_touched: usize,
    pub ranges: Vec<Range>,
}

fn merged(mut spans: Vec<(usize, usize)>) -> Vec<(usize, usize)> {
    spans.sort_unstable();
    let mut out: Vec<(usize, usize)> = Vec::with_capacity(spans.len());
    for (s, e) in spans {
        match out.last_mut() {
            Some(last) if s <= last.1 => last.1 = last.1.max(e),
            _ => out.push((s, e)),
        }
    }
    out
}

impl OpMetrics {
    pub fn from_ranges(op_id: u64, label: &str, page_size: usize, ranges: Vec<Range>) -> Self {
        let all = merged(ranges.iter().map(|r| (r.start, r.start + r.len)).collect());
        let reads = merged(
            ranges
                .iter()
                .filter(|r| r.kind == AccessKind::Read)
                .map(|r| (r.start, r.start + r.len))
                .collect(),
        );
        let mut page_pattern = BTreeSet::new();
        for &(s, e) in &all {
            page_pattern.extend(s / page_size..=(e - 1) / page_size);
        }
        OpMetrics {
            op_id,
            label: label.to_string(),
            locality: all.len(),
            read_locality: reads.len(),
            read_words: reads.iter().map(|(s, e)| e - s).sum(),
            touched_words: all.iter().map(|(s, e)| e - s).sum(),
            transferred_words: ranges.iter().map(|r| r.len).sum(),
            pages_touched: page_pattern.len(),
            page_pattern,
            ranges,
        }
    }

    /// One metric over the concatenated ranges of several operations.
    pub fn combine(op_id: u64, label: &str, page_size: usize, parts: &[OpMetrics]) -> Self {
        let ranges = parts.iter().flat_map(|m| m.ranges.iter().copied()).collect();
        Self::from_ranges(op_id, label, page_size, ranges)
    }
}

struct OpenOp {
    id: u64,
    label: String,
    first_entry: usize,
}

pub struct PageStore {
    page_size: usize,
    words: Vec<u64>,
    trace: Vec<TraceEntry>,
    open: Option<OpenOp>,
    next_op: u64,
    keep_trace: bool,
}

impl PageStore {
    pub fn new(page_size: usize) -> Self {
        assert!(page_size >= 1, "page size must be positive");
        PageStore {
            page_size,
            words: Vec::new(),
            trace: Vec::new(),
            open: None,
            next_op: 0,
            keep_trace: true,
        }
    }

    pub fn with_pages(page_size: usize, num_pages: usize) -> Self {
        let mut s = Self::new(page_size);
        s.words = vec![0; page_size * num_pages];
        s
    }

    pub fn page_size(&self) -> usize {
        self.page_size
    }

    pub fn num_pages(&self) -> usize {
        self.words.len() / self.page_size
    }

    pub fn total_words(&self) -> usize {
        self.words.len()
    }

    /// Drops trace entries of closed operations as they finish; metrics are
    /// still returned by [`end_op`](Self::end_op).
    pub fn set_keep_trace(&mut self, keep: bool) {
        self.keep_trace = keep;
    }

    /// Appends a zeroed region rounded up to whole pages.
    pub fn alloc_region(&mut self, words: usize) -> Region {
        let start = self.words.len();
        let pages = words.div_ceil(self.page_size).max(1);
        self.words.resize(start + pages * self.page_size, 0);
        Region { start, len: words }
    }

    pub fn begin_op(&mut self, label: &str) -> Result<u64, StoreError> {
        if self.open.is_some() {
            return Err(StoreError::NestedOp);
        }
        let id = self.next_op;
        self.next_op += 1;
        self.open = Some(OpenOp {
            id,
            label: label.to_string(),
            first_entry: self.trace.len(),
        });
        Ok(id)
    }

    pub fn end_op(&mut self, op_id: u64) -> Result<OpMetrics, StoreError> {
        let open = self.open.as_ref().ok_or(StoreError::NoOpenOp)?;
        if open.id != op_id {
            return Err(StoreError::WrongOp(op_id));
        }
        let open = self.open.take().unwrap();
        let ranges = self.trace[open.first_entry..].iter().map(|e| e.range).collect();
        if !self.keep_trace {
            self.trace.truncate(open.first_entry);
        }
        Ok(OpMetrics::from_ranges(open.id, &open.label, self.page_size, ranges))
    }

    pub fn is_open(&self) -> bool {
        self.open.is_some()
    }

    fn record(&mut self, kind: AccessKind, addr: usize, len: usize) -> Result<(), StoreError> {
        let open = self.open.as_ref().ok_or(StoreError::NoOpenOp)?;
        if addr.checked_add(len).map_or(true, |e| e > self.words.len()) {
            return Err(StoreError::OutOfBounds {
                addr,
                len,
                size: self.words.len(),
            });
        }
        if len > 0 {
            let entry = TraceEntry {
                op_id: open.id,
                label: open.label.clone(),
                range: Range { kind, start: addr, len },
            };
            self.trace.push(entry);
        }
        Ok(())
    }

    pub fn read(&mut self, addr: usize, len: usize) -> Result<Vec<u64>, StoreError> {
        self.record(AccessKind::Read, addr, len)?;
        Ok(self.words[addr..addr + len].to_vec())
    }

    pub fn write(&mut self, addr: usize, data: &[u64]) -> Result<(), StoreError> {
        self.record(AccessKind::Write, addr, data.len())?;
        self.words[addr..addr + data.len()].copy_from_slice(data);
        Ok(())
    }

    /// Untraced view, for serialization and offline inspection only.
    pub fn raw(&self) -> &[u64] {
        &self.words
    }

    pub fn from_raw(page_size: usize, words: Vec<u64>) -> Self {
        assert!(words.len() % page_size == 0, "raw image must be whole pages");
        let mut s = Self::new(page_size);
        s.words = words;
        s
    }

    pub fn trace(&self) -> &[TraceEntry] {
        &self.trace
    }

    pub fn clear_trace(&mut self) {
        let keep = self.open.as_ref().map_or(self.trace.len(), |o| o.first_entry);
        self.trace.drain(..keep);
        if let Some(o) = self.open.as_mut() {
            o.first_entry = 0;
        }
    }

    pub fn write_trace_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["op_id", "label", "kind", "start", "len"])?;
        for e in &self.trace {
            w.write_record([
                e.op_id.to_string(),
                e.label.clone(),
                e.range.kind.as_str().to_string(),
                e.range.start.to_string(),
                e.range.len.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn write_metrics_csv<W: Write>(out: W, rows: &[(OpMetrics, usize)]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["op_id", "label", "locality", "read_words", "pages", "answer_words"])?;
    for (m, answer) in rows {
        w.write_record([
            m.op_id.to_string(),
            m.label.clone(),
            m.locality.to_string(),
            m.read_words.to_string(),
            m.pages_touched.to_string(),
            answer.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EfficiencyReport<S> {
    pub max_locality: usize,
    pub max_read_efficiency: S,
    pub max_page_efficiency: S,
    pub storage_efficiency: S,
}

pub fn read_efficiency<S: Scalar>(m: &OpMetrics, answer_words: usize) -> S {
    S::from_ratio(m.read_words as u64, answer_words.max(1) as u64)
}

pub fn page_efficiency<S: Scalar>(m: &OpMetrics, answer_words: usize, p: usize) -> S {
    S::from_ratio(m.pages_touched as u64, answer_words.div_ceil(p).max(1) as u64)
}

pub fn storage_efficiency<S: Scalar>(store_words: usize, db_words: usize) -> S {
    S::from_ratio(store_words as u64, db_words.max(1) as u64)
}

pub fn summarize<S: Scalar>(
    ops: &[(OpMetrics, usize)],
    p: usize,
    store_words: usize,
    db_words: usize,
) -> EfficiencyReport<S> {
    let mut rep = EfficiencyReport {
        max_locality: 0,
        max_read_efficiency: S::zero(),
        max_page_efficiency: S::zero(),
        storage_efficiency: storage_efficiency(store_words, db_words),
    };
    for (m, answer) in ops {
        rep.max_locality = rep.max_locality.max(m.locality);
        rep.max_read_efficiency = rep.max_read_efficiency.max_of(read_efficiency(m, *answer));
        rep.max_page_efficiency = rep.max_page_efficiency.max_of(page_efficiency(m, *answer, p));
    }
    rep
}

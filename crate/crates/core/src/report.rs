//! End-of-run statistics: JSON summary, timeline and latency-histogram CSVs.

use std::fmt::Write as _;

use serde::Serialize;

use crate::dram::ChannelStats;
use crate::npu::TraceEvent;
use crate::scheduler::{Dispatch, NodeRecord, RequestKind};

/// Nearest-rank percentile of an ascending slice.
pub fn percentile(sorted: &[u64], p: f64) -> Option<u64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    Some(sorted[rank.min(sorted.len()) - 1])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Percentiles {
    pub count: usize,
    pub p50: u64,
    pub p95: u64,
    pub p99: u64,
}

impl Percentiles {
    pub fn of(samples: &[u64]) -> Option<Self> {
        let mut s = samples.to_vec();
        s.sort_unstable();
        Some(Self {
            count: s.len(),
            p50: percentile(&s, 50.0)?,
            p95: percentile(&s, 95.0)?,
            p99: percentile(&s, 99.0)?,
        })
    }
}

fn fraction(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoreReport {
    pub id: usize,
    pub busy_cycles: u64,
    pub idle_cycles: u64,
    pub systolic_busy: u64,
    pub vector_busy: u64,
    pub dma_busy: u64,
    pub busy_fraction: f64,
    pub systolic_fraction: f64,
    pub vector_fraction: f64,
    pub dma_fraction: f64,
    pub tiles_completed: u64,
    pub instructions: u64,
    pub spm_peak_bytes: u64,
    pub acc_peak_bytes: u64,
}

impl CoreReport {
    pub fn new(id: usize, s: &crate::npu::CoreStats, total: u64) -> Self {
        Self {
            id,
            busy_cycles: s.busy_cycles,
            idle_cycles: total - s.busy_cycles,
            systolic_busy: s.systolic_busy,
            vector_busy: s.vector_busy,
            dma_busy: s.dma_busy,
            busy_fraction: fraction(s.busy_cycles, total),
            systolic_fraction: fraction(s.systolic_busy, total),
            vector_fraction: fraction(s.vector_busy, total),
            dma_fraction: fraction(s.dma_busy, total),
            tiles_completed: s.tiles_completed,
            instructions: s.instructions,
            spm_peak_bytes: s.spm_peak_bytes,
            acc_peak_bytes: s.acc_peak_bytes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DramReport {
    pub bytes: u64,
    pub reads: u64,
    pub writes: u64,
    /// Bytes moved over peak bytes for the DRAM cycles simulated.
    pub utilization: f64,
    pub row_hits: u64,
    pub row_closed: u64,
    pub row_conflicts: u64,
    pub dram_cycles: u64,
    pub channels: Vec<ChannelStats>,
    /// Core cycles from DMA issue to the response reaching the core.
    pub mean_request_latency: f64,
    pub max_request_latency: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NocReport {
    pub request_utilization: f64,
    pub response_utilization: f64,
    pub request_packets: u64,
    pub response_packets: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RequestReport {
    pub request_id: String,
    pub tenant: String,
    #[serde(flatten)]
    pub kind: RequestKind,
    pub batch: u64,
    pub arrival: u64,
    pub completion: u64,
    pub latency: u64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub tbt: Vec<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tbt_percentiles: Option<Percentiles>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Conservation {
    pub tiles_dispatched: u64,
    pub tiles_completed: u64,
    pub mem_requests_issued: u64,
    pub mem_requests_enqueued: u64,
    pub mem_requests_completed: u64,
    pub responses_delivered: u64,
    pub spm_peak_bytes: u64,
    pub spm_partition_bytes: u64,
    pub acc_peak_bytes: u64,
    pub acc_partition_bytes: u64,
}

impl Conservation {
    pub fn holds(&self) -> bool {
        self.tiles_dispatched == self.tiles_completed
            && self.mem_requests_issued == self.mem_requests_enqueued
            && self.mem_requests_enqueued == self.mem_requests_completed
            && self.responses_delivered == self.mem_requests_issued
            && self.spm_peak_bytes <= self.spm_partition_bytes
            && self.acc_peak_bytes <= self.acc_partition_bytes
    }
}

/// Per-window activity: compute-unit busy cycles per core and DRAM bytes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Timeline {
    pub window: u64,
    pub systolic: Vec<Vec<u64>>,
    pub vector: Vec<Vec<u64>>,
    pub dram_bytes: Vec<u64>,
    /// Peak DRAM bytes per DRAM cycle, all channels.
    pub dram_peak: u64,
    /// (core clock, DRAM clock) in Hz.
    pub clocks: (u64, u64),
}

impl Timeline {
    pub fn new(window: u64, cores: usize, dram_peak: u64, clocks: (u64, u64)) -> Self {
        Self {
            window,
            systolic: vec![Vec::new(); cores],
            vector: vec![Vec::new(); cores],
            dram_bytes: Vec::new(),
            dram_peak,
            clocks,
        }
    }

    /// DRAM cycles simulated during core cycles [0, t).
    fn dram_cycles_before(&self, t: u64) -> u64 {
        (t as u128 * self.clocks.1 as u128 / self.clocks.0 as u128) as u64
    }

    fn bump(v: &mut Vec<u64>, idx: usize, amount: u64) {
        if v.len() <= idx {
            v.resize(idx + 1, 0);
        }
        v[idx] += amount;
    }

    /// Spread the busy interval [start, start + len) over windows.
    pub fn add_busy(&mut self, vector: bool, core: usize, start: u64, len: u64) {
        let v = if vector { &mut self.vector[core] } else { &mut self.systolic[core] };
        let mut t = start;
        let end = start + len;
        while t < end {
            let w = t / self.window;
            let w_end = ((w + 1) * self.window).min(end);
            Self::bump(v, w as usize, w_end - t);
            t = w_end;
        }
    }

    pub fn add_bytes(&mut self, cycle: u64, bytes: u64) {
        Self::bump(&mut self.dram_bytes, (cycle / self.window) as usize, bytes);
    }

    /// One row per window up to `total_cycles`.
    pub fn to_csv(&self, total_cycles: u64) -> String {
        let rows = total_cycles.div_ceil(self.window);
        let cores = self.systolic.len();
        let mut out = String::from("window_start,window_end");
        for c in 0..cores {
            let _ = write!(out, ",core{c}_systolic,core{c}_vector");
        }
        out.push_str(",dram_bytes,dram_utilization\n");
        let at = |v: &Vec<u64>, i: usize| v.get(i).copied().unwrap_or(0);
        for r in 0..rows as usize {
            let start = r as u64 * self.window;
            let end = (start + self.window).min(total_cycles);
            let span = (end - start) as f64;
            let _ = write!(out, "{start},{end}");
            for c in 0..cores {
                let _ = write!(out, ",{:.4},{:.4}", at(&self.systolic[c], r) as f64 / span, at(&self.vector[c], r) as f64 / span);
            }
            let bytes = at(&self.dram_bytes, r);
            let cap = self.dram_peak * (self.dram_cycles_before(end) - self.dram_cycles_before(start));
            let util = fraction(bytes, cap);
            let _ = writeln!(out, ",{bytes},{util:.4}");
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trace {
    pub dispatches: Vec<Dispatch>,
    pub events: Vec<TraceEvent>,
}

impl Trace {
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for d in &self.dispatches {
            let _ = writeln!(out, "{} dispatch tile={} core={}", d.cycle, d.tile, d.core);
        }
        for e in &self.events {
            let kind = match e.kind {
                crate::npu::TraceKind::Issue => "issue",
                crate::npu::TraceKind::Retire => "retire",
            };
            let _ = writeln!(out, "{} {kind} core={} tile={} instr={} op={}", e.cycle, e.core, e.tile, e.instr, e.opcode);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub config: serde_json::Value,
    /// Cycle of the last tile completion.
    pub total_cycles: u64,
    /// Cycle at which DRAM and both networks were empty.
    pub drained_cycle: u64,
    pub cores: Vec<CoreReport>,
    pub dram: DramReport,
    pub noc: NocReport,
    pub requests: Vec<RequestReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tbt: Option<Percentiles>,
    pub conservation: Conservation,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nodes: Option<Vec<NodeRecord>>,
    #[serde(skip)]
    pub timeline: Option<Timeline>,
    /// (bucket start, count) of memory request latency in core cycles.
    #[serde(skip)]
    pub latency_histogram: Vec<(u64, u64)>,
    #[serde(skip)]
    pub trace: Option<Trace>,
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn timeline_csv(&self) -> Option<String> {
        self.timeline.as_ref().map(|t| t.to_csv(self.total_cycles))
    }

    pub fn histogram_csv(&self) -> String {
        let mut out = String::from("latency_bucket_start,count\n");
        for (b, n) in &self.latency_histogram {
            let _ = writeln!(out, "{b},{n}");
        }
        out
    }

    pub fn request(&self, id: &str) -> Option<&RequestReport> {
        self.requests.iter().find(|r| r.request_id == id)
    }
}

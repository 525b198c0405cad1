//! Shared DRAM: per-channel FR-FCFS controllers over banks with open-page row buffers.
//!
//! Everything here runs in DRAM clock cycles. The engine decides how many DRAM
//! cycles elapse per core cycle.

pub mod ipoly;

use std::collections::VecDeque;

use serde::Serialize;

use crate::config::{DramConfig, DramCycles};
use crate::mem::ReqId;

pub use ipoly::ipoly_hash;

/// Row-buffer state a request found when it reached the controller.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RowClass {
    Hit,
    Closed,
    Conflict,
}

impl RowClass {
    /// Lower bound on enqueue-to-data latency for this row state.
    pub fn min_latency(self, c: &DramCycles) -> u64 {
        match self {
            RowClass::Hit => c.cl + c.burst,
            RowClass::Closed => c.rcd + c.cl + c.burst,
            RowClass::Conflict => c.rp + c.rcd + c.cl + c.burst,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Location {
    pub channel: usize,
    pub bank: usize,
    pub row: u64,
    pub column: u64,
}

/// Map a byte address to channel / bank / row / column.
pub fn locate(addr: u64, cfg: &DramConfig) -> Location {
    let block = addr / cfg.access_bytes;
    let channel = ipoly::channel_of_block(block, cfg.channels);
    let local = block >> cfg.channels.trailing_zeros();
    let cols = cfg.row_bytes / cfg.access_bytes;
    Location {
        channel,
        column: local % cols,
        bank: ((local / cols) % cfg.banks_per_channel) as usize,
        row: local / (cols * cfg.banks_per_channel),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Completion {
    pub req: ReqId,
    pub is_write: bool,
    pub channel: usize,
    pub bank: usize,
    pub row: u64,
    pub class: RowClass,
    pub arrival: u64,
    /// Cycle the column command issued.
    pub column_issue: u64,
    /// Cycle the last data beat finished.
    pub done: u64,
}

#[derive(Debug, Clone)]
struct Pending {
    req: ReqId,
    is_write: bool,
    bank: usize,
    row: u64,
    arrival: u64,
    class: RowClass,
}

#[derive(Debug, Clone, Default)]
struct Bank {
    open_row: Option<u64>,
    next_act: u64,
    next_pre: u64,
    next_col: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ChannelStats {
    pub reads: u64,
    pub writes: u64,
    pub bytes: u64,
    pub hits: u64,
    pub closed: u64,
    pub conflicts: u64,
    pub activates: u64,
    pub precharges: u64,
}

#[derive(Debug)]
struct Channel {
    index: usize,
    queue: Vec<Pending>,
    banks: Vec<Bank>,
    bus_free: u64,
    inflight: VecDeque<Completion>,
    stats: ChannelStats,
}

enum Command {
    Column(usize),
    Precharge(usize),
    Activate(usize),
}

#[derive(Debug)]
pub struct Dram {
    cfg: DramConfig,
    cyc: DramCycles,
    channels: Vec<Channel>,
    now: u64,
    enqueued: u64,
    completed: u64,
    audit: Option<Vec<Completion>>,
}

impl Dram {
    pub fn new(cfg: &DramConfig) -> Self {
        let channels = (0..cfg.channels)
            .map(|i| Channel {
                index: i as usize,
                queue: Vec::with_capacity(cfg.queue_capacity),
                banks: vec![Bank::default(); cfg.banks_per_channel as usize],
                bus_free: 0,
                inflight: VecDeque::new(),
                stats: ChannelStats::default(),
            })
            .collect();
        Self {
            cfg: cfg.clone(),
            cyc: cfg.cycles(),
            channels,
            now: 0,
            enqueued: 0,
            completed: 0,
            audit: None,
        }
    }

    /// Keep a record of every completion for offline checks.
    pub fn enable_audit(&mut self) {
        self.audit = Some(Vec::new());
    }

    pub fn audit_log(&self) -> &[Completion] {
        self.audit.as_deref().unwrap_or(&[])
    }

    pub fn config(&self) -> &DramConfig {
        &self.cfg
    }

    pub fn timing(&self) -> &DramCycles {
        &self.cyc
    }

    /// The next DRAM cycle to be simulated.
    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn queue_len(&self, channel: usize) -> usize {
        self.channels[channel].queue.len()
    }

    pub fn capacity(&self) -> usize {
        self.cfg.queue_capacity
    }

    pub fn can_accept(&self, channel: usize) -> bool {
        self.queue_len(channel) < self.cfg.queue_capacity
    }

    /// Append a request to its channel queue. The caller checks `can_accept`.
    pub fn enqueue(&mut self, req: ReqId, addr: u64, is_write: bool) -> Location {
        let loc = locate(addr, &self.cfg);
        let now = self.now;
        let ch = &mut self.channels[loc.channel];
        assert!(ch.queue.len() < self.cfg.queue_capacity, "enqueue into a full DRAM queue");
        let class = match ch.banks[loc.bank].open_row {
            Some(r) if r == loc.row => RowClass::Hit,
            Some(_) => RowClass::Conflict,
            None => RowClass::Closed,
        };
        match class {
            RowClass::Hit => ch.stats.hits += 1,
            RowClass::Closed => ch.stats.closed += 1,
            RowClass::Conflict => ch.stats.conflicts += 1,
        }
        ch.queue.push(Pending {
            req,
            is_write,
            bank: loc.bank,
            row: loc.row,
            arrival: now,
            class,
        });
        self.enqueued += 1;
        loc
    }

    /// Simulate one DRAM cycle; returns requests whose data finished this cycle.
    pub fn tick(&mut self) -> Vec<Completion> {
        let now = self.now;
        let mut done = Vec::new();
        for ch in &mut self.channels {
            Self::schedule(ch, now, &self.cyc, &self.cfg);
            while ch.inflight.front().is_some_and(|c| c.done <= now) {
                done.push(ch.inflight.pop_front().expect("front checked"));
            }
        }
        self.completed += done.len() as u64;
        if let Some(log) = &mut self.audit {
            log.extend_from_slice(&done);
        }
        self.now += 1;
        done
    }

    /// Jump the DRAM clock forward over cycles in which nothing can happen.
    pub fn skip_to(&mut self, cycle: u64) {
        debug_assert!(self.next_event().is_none_or(|e| e >= cycle));
        self.now = self.now.max(cycle);
    }

    /// Earliest DRAM cycle at which a tick can change state, if any.
    pub fn next_event(&self) -> Option<u64> {
        let mut next: Option<u64> = None;
        for ch in &self.channels {
            if !ch.queue.is_empty() {
                return Some(self.now);
            }
            if let Some(c) = ch.inflight.front() {
                next = Some(next.map_or(c.done, |n: u64| n.min(c.done)));
            }
        }
        next.map(|n| n.max(self.now))
    }

    pub fn idle(&self) -> bool {
        self.channels.iter().all(|c| c.queue.is_empty() && c.inflight.is_empty())
    }

    pub fn enqueued(&self) -> u64 {
        self.enqueued
    }

    pub fn completed(&self) -> u64 {
        self.completed
    }

    pub fn channel_stats(&self) -> Vec<ChannelStats> {
        self.channels.iter().map(|c| c.stats.clone()).collect()
    }

    fn schedule(ch: &mut Channel, now: u64, c: &DramCycles, cfg: &DramConfig) {
        let Some(oldest) = ch.queue.first() else { return };
        let starving = now - oldest.arrival > cfg.starvation_cycles;
        let span = if starving { 1 } else { ch.queue.len() };

        let col_ready = |b: &Bank, bus_free: u64| now >= b.next_col && now + c.cl >= bus_free;

        let mut cmd = None;
        for (i, p) in ch.queue[..span].iter().enumerate() {
            let b = &ch.banks[p.bank];
            if b.open_row == Some(p.row) && col_ready(b, ch.bus_free) {
                cmd = Some(Command::Column(i));
                break;
            }
        }
        if cmd.is_none() {
            for (i, p) in ch.queue[..span].iter().enumerate() {
                let b = &ch.banks[p.bank];
                match b.open_row {
                    Some(r) if r == p.row => {}
                    Some(r) => {
                        let pending_hits = !starving
                            && ch.queue.iter().any(|q| q.bank == p.bank && q.row == r);
                        if !pending_hits && now >= b.next_pre {
                            cmd = Some(Command::Precharge(i));
                            break;
                        }
                    }
                    None => {
                        if now >= b.next_act {
                            cmd = Some(Command::Activate(i));
                            break;
                        }
                    }
                }
            }
        }

        match cmd {
            None => {}
            Some(Command::Precharge(i)) => {
                let b = &mut ch.banks[ch.queue[i].bank];
                b.open_row = None;
                b.next_act = now + c.rp;
                ch.stats.precharges += 1;
            }
            Some(Command::Activate(i)) => {
                let p = &ch.queue[i];
                let b = &mut ch.banks[p.bank];
                b.open_row = Some(p.row);
                b.next_col = now + c.rcd;
                b.next_pre = now + c.ras;
                ch.stats.activates += 1;
            }
            Some(Command::Column(i)) => {
                let p = ch.queue.remove(i);
                let data_end = now + c.cl + c.burst;
                ch.bus_free = data_end;
                let b = &mut ch.banks[p.bank];
                b.next_pre = if p.is_write {
                    b.next_pre.max(data_end + c.wr)
                } else {
                    b.next_pre.max(now + c.burst)
                };
                if p.is_write {
                    ch.stats.writes += 1;
                } else {
                    ch.stats.reads += 1;
                }
                ch.stats.bytes += cfg.access_bytes;
                ch.inflight.push_back(Completion {
                    req: p.req,
                    is_write: p.is_write,
                    channel: ch.index,
                    bank: p.bank,
                    row: p.row,
                    class: p.class,
                    arrival: p.arrival,
                    column_issue: now,
                    done: data_end,
                });
            }
        }
    }
}

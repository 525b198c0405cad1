//! One NPU core: two tile slots over double-buffered scratchpad/accumulator
//! partitions, a weight-stationary systolic array, a vector unit and a DMA engine.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use serde::Serialize;
use thiserror::Error;

use crate::config::CoreConfig;
use crate::isa::{Instruction, Opcode, VectorKind};
use crate::lowering::TileProgram;
use crate::mem::block_cover;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CoreError {
    #[error("preload of {k_rows} rows does not fit a {array_h}-row array")]
    BlockTooTall { k_rows: u64, array_h: u64 },
    #[error("no latency configured for vector op {0}")]
    MissingLatency(&'static str),
}

pub fn systolic_compute_latency(m_rows: u64, core: &CoreConfig) -> u64 {
    m_rows + core.array_w + core.array_h - 1
}

pub fn preload_latency(k_rows: u64, core: &CoreConfig) -> Result<u64, CoreError> {
    if k_rows > core.array_h {
        return Err(CoreError::BlockTooTall {
            k_rows,
            array_h: core.array_h,
        });
    }
    Ok(k_rows)
}

pub fn vector_latency(elements: u64, kind: VectorKind, core: &CoreConfig, table: &BTreeMap<VectorKind, u64>) -> Result<u64, CoreError> {
    let base = *table.get(&kind).ok_or(CoreError::MissingLatency(kind.name()))?;
    let one_pass = base + elements.max(1).div_ceil(core.vector_width()) - 1;
    Ok(one_pass * kind.passes())
}

pub fn im2col_latency(rows: u64, cols: u64, elem_bytes: u64, core: &CoreConfig) -> u64 {
    rows * (cols * elem_bytes).div_ceil(core.spm_word_bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    Waiting,
    Issued,
    Done,
}

#[derive(Debug)]
struct Active {
    tile: TileProgram,
    partition: usize,
    status: Vec<Status>,
    outstanding: Vec<u32>,
    issued: usize,
    done: usize,
    /// Dependencies not yet done, per instruction.
    unresolved: Vec<u32>,
    dependents: Vec<Vec<u32>>,
    /// Waiting instructions whose dependencies are all done.
    ready: BTreeSet<u32>,
    /// K-chain predecessor on this core; post-GEMM instructions wait for it.
    wait_for: Option<u64>,
}

/// A DRAM access the DMA engine wants to send.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DmaRequest {
    pub addr: u64,
    pub is_write: bool,
    pub tile: u64,
    pub instr: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    Issue,
    Retire,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TraceEvent {
    pub cycle: u64,
    pub core: usize,
    pub tile: u64,
    pub instr: u32,
    pub opcode: String,
    pub kind: TraceKind,
}

/// Compute issued this cycle, for per-node attribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Issued {
    pub tile: u64,
    pub instr: u32,
    pub opcode: Opcode,
    pub start: u64,
    pub latency: u64,
}

#[derive(Debug, Default)]
pub struct CycleOutput {
    pub requests: Vec<DmaRequest>,
    pub completed_tiles: Vec<u64>,
    pub issued: Vec<Issued>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct CoreStats {
    pub busy_cycles: u64,
    pub systolic_busy: u64,
    pub vector_busy: u64,
    pub dma_busy: u64,
    pub tiles_completed: u64,
    pub instructions: u64,
    pub spm_peak_bytes: u64,
    pub acc_peak_bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Pending {
    /// Compute instruction finishing.
    Finish,
    /// One MVIN response fully written into the scratchpad.
    Absorbed,
}

#[derive(Debug)]
pub struct Core {
    pub id: usize,
    cfg: CoreConfig,
    op_latency: BTreeMap<VectorKind, u64>,
    access_bytes: u64,
    tiles: Vec<Active>,
    partitions: [Option<u64>; 2],
    systolic_free: u64,
    /// Weight block currently loaded, and whether its GEMM has yet to issue.
    loaded: Option<(u64, u32)>,
    reserved: bool,
    vector_free: u64,
    dma_free: u64,
    /// Scratchpad write port busy-until, in bytes (cycles x word bytes).
    spm_write_free: u64,
    events: BinaryHeap<Reverse<(u64, Pending, u64, u32)>>,
    arrivals: Vec<(u64, u32, bool)>,
    outstanding_reqs: u64,
    dma_since: u64,
    occupied_since: u64,
    wake: Option<u64>,
    stats: CoreStats,
    trace: Option<Vec<TraceEvent>>,
}

impl Core {
    pub fn new(id: usize, cfg: &CoreConfig, op_latency: &BTreeMap<VectorKind, u64>, access_bytes: u64) -> Self {
        Self {
            id,
            cfg: cfg.clone(),
            op_latency: op_latency.clone(),
            access_bytes,
            tiles: Vec::new(),
            partitions: [None, None],
            systolic_free: 0,
            loaded: None,
            reserved: false,
            vector_free: 0,
            dma_free: 0,
            spm_write_free: 0,
            events: BinaryHeap::new(),
            arrivals: Vec::new(),
            outstanding_reqs: 0,
            dma_since: 0,
            occupied_since: 0,
            wake: None,
            stats: CoreStats::default(),
            trace: None,
        }
    }

    pub fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn take_trace(&mut self) -> Vec<TraceEvent> {
        self.trace.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn stats(&self) -> &CoreStats {
        &self.stats
    }

    pub fn is_idle(&self) -> bool {
        self.tiles.is_empty()
    }

    pub fn resident(&self) -> impl Iterator<Item = u64> + '_ {
        self.tiles.iter().map(|a| a.tile.id)
    }

    pub fn can_accept(&self, tile: &TileProgram) -> bool {
        let unissued = self.tiles.iter().filter(|a| a.issued < a.tile.instrs.len()).count();
        unissued < 2
            && self.partitions.iter().any(Option::is_none)
            && tile.spm_bytes <= self.cfg.spm_partition_bytes()
            && tile.acc_bytes <= self.cfg.acc_partition_bytes()
    }

    /// Check that every instruction of a tile can be timed on this core.
    pub fn check_tile(&self, tile: &TileProgram) -> Result<(), CoreError> {
        for ins in &tile.instrs {
            match ins.opcode {
                Opcode::GemmPreload => {
                    preload_latency(ins.rows, &self.cfg)?;
                }
                Opcode::Vector(k) => {
                    vector_latency(ins.elements(), k, &self.cfg, &self.op_latency)?;
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Bind a tile to the free partition. The caller checked `can_accept`.
    pub fn assign(&mut self, tile: TileProgram, wait_for: Option<u64>, now: u64) {
        let partition = self.partitions.iter().position(Option::is_none).expect("caller checked can_accept");
        self.partitions[partition] = Some(tile.id);
        if self.tiles.is_empty() {
            self.occupied_since = now;
        }
        self.stats.spm_peak_bytes = self.stats.spm_peak_bytes.max(tile.spm_bytes);
        self.stats.acc_peak_bytes = self.stats.acc_peak_bytes.max(tile.acc_bytes);
        assert!(tile.spm_bytes <= self.cfg.spm_partition_bytes(), "scratchpad partition overflow");
        assert!(tile.acc_bytes <= self.cfg.acc_partition_bytes(), "accumulator partition overflow");
        let n = tile.instrs.len();
        let mut dependents = vec![Vec::new(); n];
        let mut unresolved = vec![0; n];
        for (i, ins) in tile.instrs.iter().enumerate() {
            unresolved[i] = ins.deps.len() as u32;
            for &d in &ins.deps {
                dependents[d as usize].push(i as u32);
            }
        }
        let ready = (0..n as u32).filter(|&i| unresolved[i as usize] == 0).collect();
        self.tiles.push(Active {
            tile,
            partition,
            status: vec![Status::Waiting; n],
            outstanding: vec![0; n],
            issued: 0,
            done: 0,
            unresolved,
            dependents,
            ready,
            wait_for,
        });
        self.wake = Some(self.wake.map_or(now + 1, |w| w.min(now + 1)));
    }

    /// A response for one of this core's requests reached the core.
    pub fn deliver(&mut self, tile: u64, instr: u32, is_write: bool) {
        self.arrivals.push((tile, instr, is_write));
    }

    /// Earliest cycle after `now` at which this core can change state.
    pub fn next_event(&self, now: u64) -> Option<u64> {
        let mut next = self.wake;
        if !self.arrivals.is_empty() {
            next = Some(now + 1);
        }
        if let Some(Reverse((t, ..))) = self.events.peek() {
            next = Some(next.map_or(*t, |n| n.min(*t)));
        }
        next.map(|n| n.max(now + 1))
    }

    fn slot(&self, tile: u64) -> usize {
        self.tiles
            .iter()
            .position(|a| a.tile.id == tile)
            .unwrap_or_else(|| panic!("core {}: response for tile {tile} which is not resident", self.id))
    }

    fn mark_done(&mut self, slot: usize, instr: u32, now: u64) {
        let a = &mut self.tiles[slot];
        debug_assert_eq!(a.status[instr as usize], Status::Issued);
        a.status[instr as usize] = Status::Done;
        a.done += 1;
        for &d in &a.dependents[instr as usize] {
            a.unresolved[d as usize] -= 1;
            if a.unresolved[d as usize] == 0 {
                a.ready.insert(d);
            }
        }
        if let Some(tr) = &mut self.trace {
            tr.push(TraceEvent {
                cycle: now,
                core: self.id,
                tile: a.tile.id,
                instr,
                opcode: a.tile.instrs[instr as usize].opcode.to_string(),
                kind: TraceKind::Retire,
            });
        }
    }

    fn request_finished(&mut self, slot: usize, instr: u32, now: u64) {
        self.outstanding_reqs -= 1;
        if self.outstanding_reqs == 0 {
            self.stats.dma_busy += now - self.dma_since;
        }
        let a = &mut self.tiles[slot];
        a.outstanding[instr as usize] -= 1;
        if a.outstanding[instr as usize] == 0 {
            self.mark_done(slot, instr, now);
        }
    }

    pub fn cycle(&mut self, now: u64) -> CycleOutput {
        let mut out = CycleOutput::default();
        self.wake = None;

        let access = self.access_bytes;
        for (tile, instr, is_write) in std::mem::take(&mut self.arrivals) {
            let slot = self.slot(tile);
            if is_write {
                self.request_finished(slot, instr, now);
            } else {
                // The write port takes one word of bytes per cycle; narrower responses share a cycle.
                let word = self.cfg.spm_word_bytes;
                let start = (now * word).max(self.spm_write_free);
                self.spm_write_free = start + access;
                let done = self.spm_write_free.div_ceil(word).max(now + 1);
                self.events.push(Reverse((done, Pending::Absorbed, tile, instr)));
            }
        }

        while let Some(&Reverse((t, kind, tile, instr))) = self.events.peek() {
            if t > now {
                break;
            }
            self.events.pop();
            let slot = self.slot(tile);
            match kind {
                Pending::Finish => self.mark_done(slot, instr, now),
                Pending::Absorbed => self.request_finished(slot, instr, now),
            }
        }

        let mut i = 0;
        while i < self.tiles.len() {
            let a = &self.tiles[i];
            if a.done == a.status.len() {
                let a = self.tiles.remove(i);
                self.partitions[a.partition] = None;
                self.stats.tiles_completed += 1;
                if self.tiles.is_empty() {
                    self.stats.busy_cycles += now - self.occupied_since;
                }
                out.completed_tiles.push(a.tile.id);
            } else {
                i += 1;
            }
        }

        self.issue(now, &mut out);
        out
    }

    fn issue(&mut self, now: u64, out: &mut CycleOutput) {
        let mut blocked = false;
        for slot in 0..self.tiles.len() {
            let gate_open = self.tiles[slot]
                .wait_for
                .is_none_or(|p| self.tiles.iter().all(|a| a.tile.id != p));
            let mut cursor = 0;
            while let Some(&idx) = self.tiles[slot].ready.range(cursor..).next() {
                cursor = idx + 1;
                let idx = idx as usize;
                let a = &self.tiles[slot];
                let ins = &a.tile.instrs[idx];
                let tile_id = a.tile.id;
                let ins = ins.clone();
                let post_gemm = matches!(ins.opcode, Opcode::Vector(_) | Opcode::Mvout);
                if post_gemm && !gate_open {
                    continue;
                }
                if !self.try_issue(slot, idx as u32, tile_id, &ins, now, out) {
                    blocked = true;
                }
            }
        }
        if blocked {
            // Wake when a busy unit frees up; reservation and tag waits resolve via completions.
            let frees = [self.dma_free, self.systolic_free, self.vector_free];
            if let Some(t) = frees.into_iter().filter(|&f| f > now).min() {
                self.wake = Some(self.wake.map_or(t, |w| w.min(t)));
            }
        }
    }

    fn try_issue(&mut self, slot: usize, idx: u32, tile: u64, ins: &Instruction, now: u64, out: &mut CycleOutput) -> bool {
        let finish_at = match ins.opcode {
            Opcode::Mvin | Opcode::Mvout => {
                if self.dma_free > now {
                    return false;
                }
                self.dma_free = now + 1;
                let is_write = ins.opcode == Opcode::Mvout;
                let addr = ins.dram_addr.expect("DMA instructions carry an address");
                let blocks = block_cover(addr, ins.dram_stride, ins.rows, ins.cols * ins.elem_bytes, self.access_bytes);
                for &b in &blocks {
                    out.requests.push(DmaRequest {
                        addr: b,
                        is_write,
                        tile,
                        instr: idx,
                    });
                }
                if !blocks.is_empty() && self.outstanding_reqs == 0 {
                    self.dma_since = now;
                }
                self.outstanding_reqs += blocks.len() as u64;
                self.tiles[slot].outstanding[idx as usize] = blocks.len() as u32;
                if blocks.is_empty() {
                    Some(now)
                } else {
                    None
                }
            }
            Opcode::Im2col => {
                if self.dma_free > now {
                    return false;
                }
                let lat = im2col_latency(ins.rows, ins.cols, ins.elem_bytes, &self.cfg);
                self.dma_free = now + lat.max(1);
                Some(now + lat)
            }
            Opcode::GemmPreload => {
                if self.systolic_free > now || self.reserved {
                    return false;
                }
                let lat = preload_latency(ins.rows, &self.cfg).expect("tile checked at dispatch");
                self.systolic_free = now + lat;
                self.loaded = Some((tile, ins.weight_tag.expect("preload carries a tag")));
                self.reserved = true;
                self.stats.systolic_busy += lat;
                out.issued.push(Issued {
                    tile,
                    instr: idx,
                    opcode: ins.opcode,
                    start: now,
                    latency: lat,
                });
                Some(now + lat)
            }
            Opcode::Gemm => {
                let tag = ins.weight_tag.expect("gemm carries a tag");
                if self.systolic_free > now || self.loaded != Some((tile, tag)) {
                    return false;
                }
                let lat = systolic_compute_latency(ins.rows, &self.cfg);
                self.systolic_free = now + lat;
                self.reserved = false;
                self.stats.systolic_busy += lat;
                out.issued.push(Issued {
                    tile,
                    instr: idx,
                    opcode: ins.opcode,
                    start: now,
                    latency: lat,
                });
                Some(now + lat)
            }
            Opcode::Vector(kind) => {
                if self.vector_free > now {
                    return false;
                }
                let lat = vector_latency(ins.elements(), kind, &self.cfg, &self.op_latency).expect("tile checked at dispatch");
                self.vector_free = now + lat;
                self.stats.vector_busy += lat;
                out.issued.push(Issued {
                    tile,
                    instr: idx,
                    opcode: ins.opcode,
                    start: now,
                    latency: lat,
                });
                Some(now + lat)
            }
        };
        let a = &mut self.tiles[slot];
        a.status[idx as usize] = Status::Issued;
        a.ready.remove(&idx);
        a.issued += 1;
        self.stats.instructions += 1;
        if let Some(tr) = &mut self.trace {
            tr.push(TraceEvent {
                cycle: now,
                core: self.id,
                tile,
                instr: idx,
                opcode: ins.opcode.to_string(),
                kind: TraceKind::Issue,
            });
        }
        if let Some(t) = finish_at {
            if t <= now {
                self.mark_done(slot, idx, now);
            } else {
                self.events.push(Reverse((t, Pending::Finish, tile, idx)));
            }
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SimConfig;

    fn mobile() -> SimConfig {
        SimConfig::preset("mobile").unwrap()
    }

    #[test]
    fn latency_formulas() {
        let m = mobile();
        assert_eq!(systolic_compute_latency(8, &m.core), 23);
        assert_eq!(systolic_compute_latency(1, &m.core), 16);
        let s = SimConfig::preset("server").unwrap();
        assert_eq!(systolic_compute_latency(128, &s.core), 383);
        assert_eq!(preload_latency(8, &m.core), Ok(8));
        assert_eq!(preload_latency(1, &m.core), Ok(1));
        assert!(matches!(preload_latency(9, &m.core), Err(CoreError::BlockTooTall { .. })));
        assert_eq!(vector_latency(128, VectorKind::Add, &m.core, &m.op_latency), Ok(1));
        assert_eq!(vector_latency(1024, VectorKind::Gelu, &m.core, &m.op_latency), Ok(11));
        let mut table = m.op_latency.clone();
        table.remove(&VectorKind::Gelu);
        assert_eq!(
            vector_latency(4, VectorKind::Gelu, &m.core, &table),
            Err(CoreError::MissingLatency("GELU"))
        );
    }

    fn tile(id: u64, instrs: Vec<Instruction>) -> TileProgram {
        TileProgram {
            id,
            owner_node: "n".into(),
            request_id: "r".into(),
            instrs,
            spm_bytes: 0,
            acc_bytes: 0,
            preds: vec![],
            chain_pred: None,
        }
    }

    fn run(core: &mut Core, from: u64) -> u64 {
        for t in from..from + 10_000 {
            let out = core.cycle(t);
            assert!(out.requests.is_empty());
            if !out.completed_tiles.is_empty() {
                return t;
            }
        }
        panic!("tile never completed");
    }

    #[test]
    fn preload_then_gemm_back_to_back() {
        let cfg = mobile();
        let mut core = Core::new(0, &cfg.core, &cfg.op_latency, 64);
        core.assign(
            tile(0, vec![Instruction::preload(8, 8, 1, 0, vec![]), Instruction::gemm(8, 8, 1, 0, vec![0])]),
            None,
            0,
        );
        // issue at 1, preload done 9, gemm done 9 + 23
        assert_eq!(run(&mut core, 1), 1 + 8 + 23);
    }

    #[test]
    fn gemm_waits_for_its_weights() {
        let cfg = mobile();
        let mut core = Core::new(0, &cfg.core, &cfg.op_latency, 64);
        core.assign(
            tile(0, vec![Instruction::preload(8, 8, 1, 0, vec![]), Instruction::gemm(8, 8, 1, 1, vec![])]),
            None,
            0,
        );
        for t in 1..200 {
            core.cycle(t);
        }
        assert_eq!(core.tiles[0].status[1], Status::Waiting);
    }

    #[test]
    fn slot_frees_at_last_issue() {
        let cfg = mobile();
        let mut core = Core::new(0, &cfg.core, &cfg.op_latency, 64);
        let t0 = tile(0, vec![Instruction::dma(Opcode::Mvout, 0, 64, 1, 64, 1, crate::isa::Space::Scratchpad, vec![])]);
        assert!(core.can_accept(&t0));
        core.assign(t0.clone(), None, 0);
        let out = core.cycle(1);
        assert_eq!(out.requests.len(), 1);
        // issued but the write ack is outstanding; the other partition is free
        let t1 = tile(1, vec![]);
        assert!(core.can_accept(&t1));
        core.assign(tile(1, vec![Instruction::vector(VectorKind::Add, 1, 8, 1, crate::isa::Space::Scratchpad, vec![])]), None, 1);
        assert!(!core.can_accept(&tile(2, vec![])));
    }

    #[test]
    fn older_tile_wins_the_vector_unit() {
        let cfg = mobile();
        let mut core = Core::new(0, &cfg.core, &cfg.op_latency, 64);
        let v = || Instruction::vector(VectorKind::Gelu, 1, 8, 1, crate::isa::Space::Scratchpad, vec![]);
        core.enable_trace();
        core.assign(tile(5, vec![v()]), None, 0);
        core.assign(tile(3, vec![v()]), None, 0);
        core.cycle(1);
        let tr = core.take_trace();
        assert_eq!(tr.len(), 1);
        assert_eq!(tr[0].tile, 5);
    }
}

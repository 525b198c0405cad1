//! The cycle loop. Each core cycle runs, in order: cores, request network, DRAM
//! (however many DRAM cycles fall in this core cycle), response network, scheduler.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::config::{ConfigError, SimConfig};
use crate::dram::{locate, Dram};
use crate::graph::GraphError;
use crate::isa::Opcode;
use crate::lowering::LoweringError;
use crate::mem::{MemoryRequest, RequestTable};
use crate::noc::{Network, Packet};
use crate::npu::{Core, CoreError};
use crate::report::{Conservation, CoreReport, DramReport, NocReport, Percentiles, Report, RequestReport, Timeline, Trace};
use crate::scheduler::{InferenceRequest, Scheduler};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("workload: {0}")]
    Workload(String),
    #[error("cycle {cycle}: {source}")]
    Lowering {
        cycle: u64,
        #[source]
        source: LoweringError,
    },
    #[error("cycle {cycle}: {source}")]
    Core {
        cycle: u64,
        #[source]
        source: CoreError,
    },
    #[error("cycle {cycle}: consistency fault: {detail}")]
    Consistency { cycle: u64, detail: String },
}

pub struct Simulation {
    cfg: SimConfig,
    cores: Vec<Core>,
    dram: Dram,
    req_net: Network,
    resp_net: Network,
    table: RequestTable,
    sched: Scheduler,
    finished: Vec<u64>,
    last_retire: u64,
    responses: u64,
    latency_sum: u64,
    latency_max: u64,
    histogram: BTreeMap<u64, u64>,
    timeline: Option<Timeline>,
}

/// Build and run in one go.
pub fn simulate(cfg: &SimConfig, requests: Vec<InferenceRequest>) -> Result<Report, SimError> {
    Simulation::new(cfg, requests)?.run()
}

impl Simulation {
    pub fn new(cfg: &SimConfig, requests: Vec<InferenceRequest>) -> Result<Self, SimError> {
        cfg.validate()?;
        let channels = cfg.dram.channels as usize;
        let mut cores: Vec<Core> = (0..cfg.num_cores)
            .map(|i| Core::new(i, &cfg.core, &cfg.op_latency, cfg.dram.access_bytes))
            .collect();
        let mut sched = Scheduler::new(cfg, requests)?;
        if cfg.stats.trace {
            cores.iter_mut().for_each(Core::enable_trace);
            sched.enable_log();
        }
        let timeline = cfg.stats.timeline_window.map(|w| {
            let peak = cfg.dram.channels * cfg.dram.peak_bytes_per_cycle;
            Timeline::new(w, cfg.num_cores, peak, (cfg.core.clock_hz, cfg.dram.dram_clock_hz))
        });
        Ok(Self {
            cores,
            dram: Dram::new(&cfg.dram),
            req_net: Network::new(&cfg.noc, cfg.num_cores, channels, true),
            resp_net: Network::new(&cfg.noc, channels, cfg.num_cores, false),
            table: RequestTable::default(),
            sched,
            finished: Vec::new(),
            last_retire: 0,
            responses: 0,
            latency_sum: 0,
            latency_max: 0,
            histogram: BTreeMap::new(),
            timeline,
            cfg: cfg.clone(),
        })
    }

    pub fn dram(&self) -> &Dram {
        &self.dram
    }

    pub fn dram_mut(&mut self) -> &mut Dram {
        &mut self.dram
    }

    pub fn cores(&self) -> &[Core] {
        &self.cores
    }

    /// DRAM cycles that have elapsed by the end of core cycle `t`.
    fn dram_cycles_through(&self, t: u64) -> u64 {
        ((t as u128 + 1) * self.cfg.dram.dram_clock_hz as u128 / self.cfg.core.clock_hz as u128) as u64
    }

    /// Credit a finished access to the DRAM cycles its data occupied the bus.
    fn record_burst(&mut self, data_end: u64, access: u64) {
        let peak = self.cfg.dram.peak_bytes_per_cycle;
        let burst = access.div_ceil(peak);
        let mut left = access;
        for d in data_end.saturating_sub(burst)..data_end {
            let b = left.min(peak);
            left -= b;
            let c = self.core_cycle_of(d);
            if let Some(tl) = &mut self.timeline {
                tl.add_bytes(c, b);
            }
        }
    }

    /// Core cycle during which DRAM cycle `d` is simulated.
    fn core_cycle_of(&self, d: u64) -> u64 {
        let fc = self.cfg.core.clock_hz as u128;
        let fd = self.cfg.dram.dram_clock_hz as u128;
        (((d as u128 + 1) * fc).div_ceil(fd) - 1) as u64
    }

    pub fn run(&mut self) -> Result<Report, SimError> {
        let jump = self.cfg.stats.event_jump;
        let mut t = 0;
        let drained = loop {
            if jump && t > 0 {
                let d = self.dram_cycles_through(t - 1);
                self.dram.skip_to(d);
            }
            self.step(t)?;
            if self.sched.all_retired() && self.quiescent() {
                break t;
            }
            match self.next_event(t) {
                Some(n) => t = if jump { n } else { t + 1 },
                None => {
                    return Err(SimError::Consistency {
                        cycle: t,
                        detail: "no component can make progress but work remains".into(),
                    })
                }
            }
        };
        self.report(drained)
    }

    fn quiescent(&self) -> bool {
        self.cores.iter().all(Core::is_idle) && self.dram.idle() && self.req_net.idle() && self.resp_net.idle() && self.table.live() == 0
    }

    fn next_event(&self, t: u64) -> Option<u64> {
        let dram = self.dram.next_event().map(|d| self.core_cycle_of(d));
        self.cores
            .iter()
            .filter_map(|c| c.next_event(t))
            .chain(self.req_net.next_event(t))
            .chain(self.resp_net.next_event(t))
            .chain(dram)
            .chain(self.sched.next_arrival())
            .min()
            .map(|n| n.max(t + 1))
    }

    fn step(&mut self, t: u64) -> Result<(), SimError> {
        let access = self.cfg.dram.access_bytes;

        for c in 0..self.cores.len() {
            let out = self.cores[c].cycle(t);
            for r in out.requests {
                let channel = locate(r.addr, &self.cfg.dram).channel;
                let id = self.table.insert(MemoryRequest {
                    id: 0,
                    addr: r.addr,
                    is_write: r.is_write,
                    core_id: c,
                    tile_id: r.tile,
                    instr_index: r.instr,
                    issued_cycle: t,
                    completed_cycle: None,
                    dram_done: false,
                    channel,
                });
                let payload = if r.is_write { access } else { 0 };
                self.req_net.inject(Packet::new(id, c, channel, payload, &self.cfg.noc), t);
            }
            for i in out.issued {
                if let Some(rec) = self.sched.record_of(i.tile) {
                    let rec = self.sched.record_mut(rec);
                    let vector = matches!(i.opcode, Opcode::Vector(_));
                    if vector {
                        rec.vector_busy += i.latency;
                    } else {
                        rec.systolic_busy += i.latency;
                    }
                    if let Some(tl) = &mut self.timeline {
                        tl.add_busy(vector, c, i.start, i.latency);
                    }
                }
            }
            self.finished.extend(out.completed_tiles);
        }

        let cap = self.dram.capacity();
        let delivered = {
            let dram = &self.dram;
            self.req_net.deliver(t, &|ch| cap - dram.queue_len(ch))
        };
        for p in delivered {
            let r = self.table.get(p.req);
            let (addr, is_write, core) = (r.addr, r.is_write, r.core_id);
            if !self.dram.can_accept(p.dst) {
                return Err(SimError::Consistency {
                    cycle: t,
                    detail: format!("network delivered request {} into the full queue of channel {}", p.req, p.dst),
                });
            }
            self.dram.enqueue(p.req, addr, is_write);
            if is_write {
                // Posted write: acknowledged once the controller has it.
                self.resp_net.inject(Packet::new(p.req, p.dst, core, 0, &self.cfg.noc), t);
            }
        }
        {
            let dram = &self.dram;
            self.req_net.arbitrate(t, &|ch| cap - dram.queue_len(ch));
        }

        let target = self.dram_cycles_through(t);
        while self.dram.now() < target {
            for done in self.dram.tick() {
                if self.timeline.is_some() {
                    self.record_burst(done.done, access);
                }
                let r = self.table.get_mut(done.req);
                r.dram_done = true;
                if done.is_write {
                    if r.completed_cycle.is_some() {
                        self.table.remove(done.req);
                    }
                } else {
                    let core = r.core_id;
                    self.resp_net.inject(Packet::new(done.req, done.channel, core, access, &self.cfg.noc), t);
                }
            }
        }

        for p in self.resp_net.deliver(t, &|_| usize::MAX) {
            let r = self.table.get_mut(p.req);
            r.completed_cycle = Some(t);
            let lat = t - r.issued_cycle;
            let (core, tile, instr, is_write, dram_done) = (r.core_id, r.tile_id, r.instr_index, r.is_write, r.dram_done);
            self.latency_sum += lat;
            self.latency_max = self.latency_max.max(lat);
            let bucket = self.cfg.stats.latency_bucket;
            *self.histogram.entry(lat / bucket * bucket).or_default() += 1;
            self.responses += 1;
            if !self.cores[core].resident().any(|id| id == tile) {
                return Err(SimError::Consistency {
                    cycle: t,
                    detail: format!("response for request {} targets tile {tile}, not resident on core {core}", p.req),
                });
            }
            self.cores[core].deliver(tile, instr, is_write);
            if dram_done {
                self.table.remove(p.req);
            }
        }
        self.resp_net.arbitrate(t, &|_| usize::MAX);

        for tile in std::mem::take(&mut self.finished) {
            self.sched.on_tile_complete(tile, t)?;
            self.last_retire = t;
        }
        self.sched.admit(t)?;
        self.sched.dispatch(&mut self.cores, t)
    }

    fn report(&mut self, drained: u64) -> Result<Report, SimError> {
        let total = self.last_retire;
        let cores: Vec<CoreReport> = self.cores.iter().map(|c| CoreReport::new(c.id, c.stats(), total)).collect();

        let channels = self.dram.channel_stats();
        let sum = |f: fn(&crate::dram::ChannelStats) -> u64| channels.iter().map(f).sum::<u64>();
        let dram_cycles = self.dram.now();
        let peak = dram_cycles * self.cfg.dram.channels * self.cfg.dram.peak_bytes_per_cycle;
        let bytes = sum(|c| c.bytes);
        let dram = DramReport {
            bytes,
            reads: sum(|c| c.reads),
            writes: sum(|c| c.writes),
            utilization: if peak == 0 { 0.0 } else { bytes as f64 / peak as f64 },
            row_hits: sum(|c| c.hits),
            row_closed: sum(|c| c.closed),
            row_conflicts: sum(|c| c.conflicts),
            dram_cycles,
            channels,
            mean_request_latency: if self.responses == 0 { 0.0 } else { self.latency_sum as f64 / self.responses as f64 },
            max_request_latency: self.latency_max,
        };

        let started = self.table.issued() > 0;
        let span = if started { drained + 1 } else { 0 };
        let util = |n: &Network| {
            let den = span * n.ports() as u64;
            if den == 0 {
                0.0
            } else {
                n.busy_cycles() as f64 / den as f64
            }
        };
        let noc = NocReport {
            request_utilization: util(&self.req_net),
            response_utilization: util(&self.resp_net),
            request_packets: self.req_net.packets_delivered(),
            response_packets: self.resp_net.packets_delivered(),
        };

        let mut all_tbt = Vec::new();
        let mut requests = Vec::new();
        for o in self.sched.outcomes() {
            let tbt = o.tbt();
            all_tbt.extend_from_slice(&tbt);
            let completion = o.completion.ok_or_else(|| SimError::Consistency {
                cycle: drained,
                detail: format!("request `{}` never retired", o.request_id),
            })?;
            requests.push(RequestReport {
                latency: completion - o.arrival,
                tbt_percentiles: Percentiles::of(&tbt),
                request_id: o.request_id,
                tenant: o.tenant,
                kind: o.kind,
                batch: o.batch,
                arrival: o.arrival,
                completion,
                tbt,
            });
        }

        let conservation = Conservation {
            tiles_dispatched: self.sched.tiles_dispatched(),
            tiles_completed: self.sched.tiles_completed(),
            mem_requests_issued: self.table.issued(),
            mem_requests_enqueued: self.dram.enqueued(),
            mem_requests_completed: self.dram.completed(),
            responses_delivered: self.responses,
            spm_peak_bytes: cores.iter().map(|c| c.spm_peak_bytes).max().unwrap_or(0),
            spm_partition_bytes: self.cfg.core.spm_partition_bytes(),
            acc_peak_bytes: cores.iter().map(|c| c.acc_peak_bytes).max().unwrap_or(0),
            acc_partition_bytes: self.cfg.core.acc_partition_bytes(),
        };
        if !conservation.holds() {
            return Err(SimError::Consistency {
                cycle: drained,
                detail: format!("conservation violated: {conservation:?}"),
            });
        }

        let trace = self.cfg.stats.trace.then(|| {
            let mut events: Vec<_> = self.cores.iter_mut().flat_map(Core::take_trace).collect();
            events.sort_by_key(|e| (e.cycle, e.core));
            Trace {
                dispatches: self.sched.take_log(),
                events,
            }
        });

        Ok(Report {
            config: self.cfg.echo(),
            total_cycles: total,
            drained_cycle: drained,
            cores,
            dram,
            noc,
            requests,
            tbt: Percentiles::of(&all_tbt),
            conservation,
            nodes: self.cfg.stats.node_records.then(|| self.sched.records().to_vec()),
            timeline: self.timeline.clone(),
            latency_histogram: self.histogram.iter().map(|(&b, &n)| (b, n)).collect(),
            trace,
        })
    }
}

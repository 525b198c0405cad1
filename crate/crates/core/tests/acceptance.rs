//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits nonzero if any fail.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use npusim::config::Policy;
use npusim::dram::{ipoly::channel_of_block, RowClass};
use npusim::isa::Space;
use npusim::models::ATTENTION_NODES;
use npusim::npu::Core;
use npusim::*;

type Outcome = Result<String, String>;

/// Reports from every simulation run by the suite, audited by the last criterion.
#[derive(Default)]
struct Audit {
    runs: Vec<(String, Report)>,
    core_checks: Vec<(String, bool)>,
}

impl Audit {
    fn keep(&mut self, label: &str, r: &Report) {
        self.runs.push((label.to_string(), r.clone()));
    }
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn tile(id: u64, instrs: Vec<Instruction>, spm_bytes: u64, acc_bytes: u64) -> TileProgram {
    TileProgram {
        id,
        owner_node: "hand".into(),
        request_id: "hand".into(),
        instrs,
        spm_bytes,
        acc_bytes,
        preds: vec![],
        chain_pred: id.checked_sub(1),
    }
}

// ---- 1: systolic latency --------------------------------------------------------

fn systolic_latency(audit: &mut Audit) -> Outcome {
    let mut checked = 0;
    for preset in ["mobile", "server"] {
        let cfg = SimConfig::preset(preset).unwrap();
        let (h, w) = (cfg.core.array_h, cfg.core.array_w);
        for m in [1u64, 2, 4, 8, 16, 64, 128] {
            let mut core = Core::new(0, &cfg.core, &cfg.op_latency, cfg.dram.access_bytes);
            let instrs = vec![Instruction::preload(h, w, 2, 0, vec![]), Instruction::gemm(m, w, 2, 0, vec![0])];
            let mut t = tile(0, instrs, 0, 0);
            t.chain_pred = None;
            core.assign(t, None, 0);
            let mut first_issue = None;
            let mut done_at = None;
            let mut now = 0;
            while done_at.is_none() && now < 10_000 {
                now = core.next_event(now).ok_or("core stalled")?;
                let out = core.cycle(now);
                if let Some(i) = out.issued.first() {
                    first_issue.get_or_insert(i.start);
                }
                if !out.completed_tiles.is_empty() {
                    done_at = Some(now);
                }
            }
            let measured = done_at.ok_or("tile never completed")? - first_issue.ok_or("nothing issued")?;
            // Weight preload streams h rows; the data pass takes m rows plus fill and drain.
            let expected = h + (m + w + h - 1);
            ensure(measured == expected, || format!("{preset} {h}x{w} m={m}: measured {measured}, expected {expected}"))?;
            audit.core_checks.push((format!("systolic {preset} m={m}"), core.stats().tiles_completed == 1 && core.is_idle()));
            checked += 1;
        }
    }
    Ok(format!("{checked} (m, array) points exact"))
}

// ---- 2: double buffering ----------------------------------------------------------

fn double_buffering(audit: &mut Audit) -> Outcome {
    // A core's 64-bit crossbar port moves ~7 B/cycle, far below a 128x128 array's appetite;
    // the latency-bandwidth interconnect (one 64 B response per cycle) lets DMA outrun compute.
    let mut cfg = SimConfig::preset("server").unwrap();
    cfg.noc.model = npusim::config::NocModel::Simple;
    cfg.stats.trace = true;
    let (h, w) = (cfg.core.array_h, cfg.core.array_w);
    let (m, k, eb, n_tiles) = (512u64, 32u64, 2u64, 16u64);
    let a_bytes = m * k * eb;
    let b_bytes = k * w * eb;
    let tiles: Vec<TileProgram> = (0..n_tiles)
        .map(|i| {
            let a_addr = i * (a_bytes + b_bytes);
            let b_addr = a_addr + a_bytes;
            let mut instrs = vec![
                Instruction::dma(Opcode::Mvin, a_addr, k * eb, m, k, eb, Space::Scratchpad, vec![]),
                Instruction::dma(Opcode::Mvin, b_addr, w * eb, k, w, eb, Space::Scratchpad, vec![]).with_offset(a_bytes),
                Instruction::preload(k, w, eb, i as u32, vec![1]),
                Instruction::gemm(m, w, eb, i as u32, vec![2, 0]),
            ];
            if i + 1 == n_tiles {
                let out = n_tiles * (a_bytes + b_bytes);
                instrs.push(Instruction::dma(Opcode::Mvout, out, w * 4, m, w, 4, Space::Accumulator, vec![3]));
            }
            tile(i, instrs, a_bytes + b_bytes, m * w * 4)
        })
        .collect();

    let report = simulate(&cfg, vec![InferenceRequest::from_tiles("kseq", tiles, 0)]).map_err(|e| e.to_string())?;
    audit.keep("double buffering", &report);
    let trace = report.trace.as_ref().ok_or("no trace")?;

    use npusim::npu::TraceKind::{self, Issue, Retire};
    let ev = |tile: u64, instr: u32, kind: TraceKind| {
        trace.events.iter().find(|e| e.tile == tile && e.instr == instr && e.kind == kind).map(|e| e.cycle).ok_or("missing trace event")
    };
    let mut dma = Vec::new();
    for i in 0..n_tiles {
        let start = ev(i, 0, Issue)?;
        let end = ev(i, 0, Retire)?.max(ev(i, 1, Retire)?);
        dma.push(end - start);
    }
    // Weight preload streams k rows; the data pass takes m rows plus fill and drain.
    let compute = k + (m + w + h - 1);
    ensure(dma[0] < compute, || format!("tile DMA {} not below compute {compute}", dma[0]))?;

    let start = ev(0, 0, Issue)?;
    let end = ev(n_tiles - 1, 3, Retire)?;
    let total = end - start;
    let expected = dma[0] + n_tiles * compute;
    let slack = n_tiles - 1;
    ensure(total.abs_diff(expected) <= slack, || {
        format!("total {total} vs first DMA {} + {n_tiles}x{compute} = {expected} (tolerance {slack})", dma[0])
    })?;
    Ok(format!("total {total}, oracle {expected} (first DMA {}, compute {compute} per tile)", dma[0]))
}

// ---- 3: DRAM floor and row-buffer effect ---------------------------------------------

fn ns_cycles(ns: f64, hz: u64) -> u64 {
    (ns * hz as f64 / 1e9 - 1e-9).ceil() as u64
}

/// Drive MVINs of the given block addresses through the full system on one channel.
fn run_dram(addrs: &[u64], label: &str, audit: &mut Audit) -> Result<(Report, Vec<npusim::dram::Completion>, SimConfig), String> {
    let mut cfg = SimConfig::preset("mobile").unwrap();
    cfg.dram.channels = 1;
    cfg.noc.ports = Some([cfg.num_cores as u64, 1]);
    let access = cfg.dram.access_bytes;
    // One tile per batch of addresses, so that each fits the scratchpad partition.
    let per_tile = (cfg.core.spm_partition_bytes() / access) as usize;
    let tiles: Vec<TileProgram> = addrs
        .chunks(per_tile)
        .enumerate()
        .map(|(i, chunk)| {
            let instrs = chunk
                .iter()
                .enumerate()
                .map(|(j, &a)| Instruction::dma(Opcode::Mvin, a, access, 1, access / 2, 2, Space::Scratchpad, vec![]).with_offset(j as u64 * access))
                .collect();
            let mut t = tile(i as u64, instrs, chunk.len() as u64 * access, 0);
            t.chain_pred = None;
            t
        })
        .collect();
    let mut sim = Simulation::new(&cfg, vec![InferenceRequest::from_tiles(label, tiles, 0)]).map_err(|e| e.to_string())?;
    sim.dram_mut().enable_audit();
    let report = sim.run().map_err(|e| e.to_string())?;
    audit.keep(label, &report);
    Ok((report, sim.dram().audit_log().to_vec(), cfg))
}

fn achieved_bandwidth(log: &[npusim::dram::Completion], access: u64, peak: u64) -> f64 {
    let first = log.iter().map(|c| c.arrival).min().unwrap();
    let last = log.iter().map(|c| c.done).max().unwrap();
    (log.len() as u64 * access) as f64 / ((last - first) as f64 * peak as f64)
}

fn dram_floor(audit: &mut Audit) -> Outcome {
    let n = 4096u64;
    let access = 64;
    let sequential: Vec<u64> = (0..n).map(|i| i * access).collect();
    let mut rng = StdRng::seed_from_u64(7);
    let random: Vec<u64> = (0..n).map(|_| rng.random_range(0..1u64 << 28) / access * access).collect();

    let (_, seq_log, cfg) = run_dram(&sequential, "dram sequential", audit)?;
    let (_, rnd_log, _) = run_dram(&random, "dram random", audit)?;

    let hz = cfg.dram.dram_clock_hz;
    let t = &cfg.dram.timing_ns;
    let (cl, rcd, rp) = (ns_cycles(t.t_cl, hz), ns_cycles(t.t_rcd, hz), ns_cycles(t.t_rp, hz));
    let burst = access.div_ceil(cfg.dram.peak_bytes_per_cycle);
    let floor = |c: RowClass| match c {
        RowClass::Hit => cl + burst,
        RowClass::Closed => rcd + cl + burst,
        RowClass::Conflict => rp + rcd + cl + burst,
    };
    let mut classes = BTreeMap::new();
    for c in seq_log.iter().chain(&rnd_log) {
        let lat = c.done - c.arrival;
        ensure(lat >= floor(c.class), || format!("request {:?} ({:?}) took {lat} < floor {}", c.req, c.class, floor(c.class)))?;
        *classes.entry(format!("{:?}", c.class)).or_insert(0u64) += 1;
    }
    ensure(seq_log.len() as u64 == n && rnd_log.len() as u64 == n, || "not every request reached DRAM".into())?;

    let peak = cfg.dram.peak_bytes_per_cycle;
    let seq_bw = achieved_bandwidth(&seq_log, access, peak);
    let rnd_bw = achieved_bandwidth(&rnd_log, access, peak);
    ensure(seq_bw >= 0.8, || format!("sequential bandwidth {:.1}% < 80%", seq_bw * 100.0))?;
    ensure(rnd_bw < seq_bw, || format!("random {:.1}% not below sequential {:.1}%", rnd_bw * 100.0, seq_bw * 100.0))?;
    Ok(format!(
        "{} requests above floor {classes:?}; sequential {:.1}%, random {:.1}% of peak",
        2 * n,
        seq_bw * 100.0,
        rnd_bw * 100.0
    ))
}

// ---- 4: IPOLY -------------------------------------------------------------------

fn ipoly_uniformity() -> Outcome {
    let mut windows = 0u64;
    for k in 1..=5u32 {
        let ch = 1u64 << k;
        for w in 0..(1u64 << 14) {
            let mut seen = vec![false; ch as usize];
            for b in w * ch..(w + 1) * ch {
                let c = channel_of_block(b, ch);
                ensure(!seen[c], || format!("{ch} channels: window {w} hits channel {c} twice"))?;
                seen[c] = true;
            }
            windows += 1;
        }
    }
    let mut worst: (f64, u64, u64) = (0.0, 0, 0);
    for k in 1..=5u32 {
        let ch = 1u64 << k;
        if ch < 4 {
            continue;
        }
        for s in 1..=12u32 {
            let stride = 1u64 << s;
            let n = 4096u64;
            let mut counts = vec![0u64; ch as usize];
            for i in 0..n {
                counts[channel_of_block(i * stride, ch)] += 1;
            }
            let share = *counts.iter().max().unwrap() as f64 / n as f64;
            if share > worst.0 {
                worst = (share, ch, stride);
            }
        }
    }
    ensure(worst.0 < 0.5, || format!("stride {} blocks on {} channels puts {:.1}% on one channel", worst.2, worst.1, worst.0 * 100.0))?;
    Ok(format!(
        "{windows} aligned windows exact; worst power-of-two stride share {:.1}% ({} ch, stride {})",
        worst.0 * 100.0,
        worst.1,
        worst.2
    ))
}

// ---- 5: multi-tenant interference -------------------------------------------------------

const GEN_TOKENS: u64 = 500;

fn interference_config() -> SimConfig {
    let mut cfg = SimConfig::preset("mobile").unwrap();
    cfg.scheduler.policy = Policy::Spatial;
    cfg.scheduler.partition.insert("llm".into(), vec![0]);
    cfg.scheduler.partition.insert("cnn".into(), vec![1, 2, 3]);
    cfg
}

fn llm() -> InferenceRequest {
    let g = synthetic_from_spec("transformer_block:d_model=64,heads=4,kv_heads=4").unwrap();
    InferenceRequest::new("llm", g, 1, 0).generative(32, GEN_TOKENS).with_tenant("llm")
}

fn conv(i: u64, batch: u64, arrival: u64) -> InferenceRequest {
    let g = synthetic_from_spec("conv_block:channels=16,size=16").unwrap();
    InferenceRequest::new(&format!("cnn{i}"), g, batch, arrival).with_tenant("cnn")
}

fn interference(audit: &mut Audit) -> Outcome {
    let cfg = interference_config();
    let alone = simulate(&cfg, vec![llm()]).map_err(|e| e.to_string())?;
    audit.keep("llm alone", &alone);
    let span = alone.total_cycles;
    let service = simulate(&cfg, vec![conv(0, 32, 0)]).map_err(|e| e.to_string())?.total_cycles;
    // Open-loop arrivals that keep the co-runner cores ~90% busy at the largest batch.
    let period = service * 10 / 9;

    let mut p95 = Vec::new();
    for batch in [1u64, 4, 16, 32] {
        let mut reqs = vec![llm()];
        let n = 2 * span / period + 1;
        reqs.extend((0..n).map(|i| conv(i, batch, i * period)));
        let r = simulate(&cfg, reqs).map_err(|e| e.to_string())?;
        let llm = r.request("llm").ok_or("no llm report")?;
        ensure(llm.tbt.len() as u64 == GEN_TOKENS, || format!("{} TBT samples", llm.tbt.len()))?;
        p95.push((batch, llm.tbt_percentiles.unwrap().p95));
        audit.keep(&format!("interference batch {batch}"), &r);
    }
    let base = alone.request("llm").unwrap().tbt_percentiles.unwrap().p95;
    let increasing = p95.windows(2).all(|w| w[1].1 > w[0].1);
    let rise = p95.last().unwrap().1 as f64 / p95[0].1 as f64 - 1.0;
    let line = format!("p95 TBT alone {base}, by co-runner batch {p95:?}, rise {:.1}%", rise * 100.0);
    ensure(increasing && rise > 0.10, || line.clone())?;
    Ok(line)
}

// ---- 6: GQA vs MHA --------------------------------------------------------------------

struct Phase {
    latency: u64,
    bytes: u64,
    mac_utilization: f64,
    systolic_busy: u64,
}

fn attention_phase(kv_heads: u64, audit: &mut Audit) -> Result<Phase, String> {
    let (d_model, heads, kv_len, batch) = (128u64, 8u64, 512u64, 4u64);
    let mut cfg = SimConfig::preset("mobile").unwrap();
    cfg.stats.node_records = true;
    let g = synthetic_from_spec(&format!("transformer_block:d_model={d_model},heads={heads},kv_heads={kv_heads}")).unwrap();
    let req = InferenceRequest::new("attn", g, batch, 0).with_binding("kv_len", kv_len);
    let r = simulate(&cfg, vec![req]).map_err(|e| e.to_string())?;
    audit.keep(&format!("attention kv_heads={kv_heads}"), &r);
    let recs: Vec<_> = r.nodes.as_ref().unwrap().iter().filter(|n| ATTENTION_NODES.contains(&n.node.as_str())).collect();
    ensure(recs.len() == ATTENTION_NODES.len(), || format!("attention records {:?}", recs.iter().map(|n| &n.node).collect::<Vec<_>>()))?;
    let start = recs.iter().filter_map(|n| n.start).min().unwrap();
    let end = recs.iter().filter_map(|n| n.end).max().unwrap();
    let latency = end - start;
    // Score and context products: batch x heads x kv_len x head_dim each.
    let macs = 2 * batch * heads * kv_len * (d_model / heads);
    let peak = latency * cfg.num_cores as u64 * cfg.core.array_h * cfg.core.array_w;
    Ok(Phase {
        latency,
        bytes: recs.iter().map(|n| n.dram_bytes).sum(),
        mac_utilization: macs as f64 / peak as f64,
        systolic_busy: recs.iter().map(|n| n.systolic_busy).sum(),
    })
}

fn gqa_vs_mha(audit: &mut Audit) -> Outcome {
    let mha = attention_phase(8, audit)?;
    let gqa = attention_phase(2, audit)?;
    let line = format!(
        "MHA {} cycles / {} B / util {:.2}% (systolic busy {}), GQA {} cycles / {} B / util {:.2}% (systolic busy {})",
        mha.latency,
        mha.bytes,
        mha.mac_utilization * 100.0,
        mha.systolic_busy,
        gqa.latency,
        gqa.bytes,
        gqa.mac_utilization * 100.0,
        gqa.systolic_busy
    );
    ensure(mha.latency > gqa.latency && mha.bytes > gqa.bytes && mha.mac_utilization < gqa.mac_utilization, || line.clone())?;
    Ok(line)
}

// ---- 7: determinism and event jump ------------------------------------------------------

fn mixed_workload() -> Vec<InferenceRequest> {
    vec![
        InferenceRequest::new("mlp", synthetic_from_spec("mlp:layers=3,width=64").unwrap(), 4, 0),
        InferenceRequest::new("conv", synthetic_from_spec("conv_block:channels=8,size=8").unwrap(), 2, 300),
        InferenceRequest::new("llm", synthetic_from_spec("transformer_block:d_model=64,heads=4,kv_heads=2").unwrap(), 2, 50).generative(16, 6),
    ]
}

fn determinism(audit: &mut Audit) -> Outcome {
    let mut compared = 0;
    for spatial in [false, true] {
        let mut cfg = SimConfig::preset("mobile").unwrap();
        cfg.stats.trace = true;
        cfg.stats.timeline_window = Some(500);
        if spatial {
            cfg.scheduler.policy = Policy::Spatial;
            cfg.scheduler.partition.insert("mlp".into(), vec![0]);
            cfg.scheduler.partition.insert("conv".into(), vec![1, 2]);
            cfg.scheduler.partition.insert("llm".into(), vec![3]);
        }
        let run = |cfg: &SimConfig| simulate(cfg, mixed_workload()).map_err(|e| e.to_string());
        let a = run(&cfg)?;
        let b = run(&cfg)?;
        cfg.stats.event_jump = false;
        let c = run(&cfg)?;
        for other in [&b, &c] {
            ensure(a.to_json() == other.to_json(), || "JSON reports differ".into())?;
            ensure(a.timeline_csv() == other.timeline_csv(), || "timelines differ".into())?;
            ensure(a.histogram_csv() == other.histogram_csv(), || "latency histograms differ".into())?;
            ensure(a.trace.as_ref().map(|t| t.to_lines()) == other.trace.as_ref().map(|t| t.to_lines()), || "traces differ".into())?;
            compared += 1;
        }
        audit.keep(if spatial { "determinism spatial" } else { "determinism time-share" }, &a);
    }
    Ok(format!("{compared} report pairs identical (repeat and event-jump off)"))
}

// ---- 8: speed -------------------------------------------------------------------------

fn speed(audit: &mut Audit) -> Outcome {
    let cfg = SimConfig::preset("server").unwrap();
    let g = synthetic_from_spec("gemm:m=512,k=512,n=512").unwrap();
    let t = Instant::now();
    let r = simulate(&cfg, vec![InferenceRequest::new("gemm", g, 1, 0)]).map_err(|e| e.to_string())?;
    let wall = t.elapsed().as_secs_f64();
    audit.keep("speed", &r);
    ensure(wall < 60.0, || format!("{wall:.1} s"))?;
    Ok(format!("{} simulated cycles in {wall:.3} s", r.total_cycles))
}

// ---- 9: conservation ------------------------------------------------------------------

fn conservation(audit: &Audit) -> Outcome {
    for (label, r) in &audit.runs {
        let c = &r.conservation;
        ensure(c.holds(), || format!("{label}: {c:?}"))?;
        let tiles: u64 = r.cores.iter().map(|c| c.tiles_completed).sum();
        ensure(tiles == c.tiles_completed, || format!("{label}: per-core tiles {tiles} vs {}", c.tiles_completed))?;
        ensure(r.dram.reads + r.dram.writes == c.mem_requests_completed, || format!("{label}: DRAM counters disagree"))?;
    }
    for (label, ok) in &audit.core_checks {
        ensure(*ok, || format!("{label}: core did not retire its tile"))?;
    }
    Ok(format!("{} simulations and {} core-level runs audited", audit.runs.len(), audit.core_checks.len()))
}

fn main() {
    let mut audit = Audit::default();
    let mut failed = 0;
    let mut report = |n: u32, name: &str, t: Instant, outcome: Outcome| {
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n} PASS {name} ({secs:.2} s): {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {n} FAIL {name} ({secs:.2} s): {why}");
            }
        }
    };
    let t = Instant::now();
    let o = systolic_latency(&mut audit);
    report(1, "systolic latency oracle", t, o);
    let t = Instant::now();
    let o = double_buffering(&mut audit);
    report(2, "double-buffering overlap", t, o);
    let t = Instant::now();
    let o = dram_floor(&mut audit);
    report(3, "DRAM analytic floor", t, o);
    let t = Instant::now();
    report(4, "IPOLY uniformity", t, ipoly_uniformity());
    let t = Instant::now();
    let o = interference(&mut audit);
    report(5, "multi-tenant interference", t, o);
    let t = Instant::now();
    let o = gqa_vs_mha(&mut audit);
    report(6, "GQA vs MHA", t, o);
    let t = Instant::now();
    let o = determinism(&mut audit);
    report(7, "determinism and event jump", t, o);
    let t = Instant::now();
    let o = speed(&mut audit);
    report(8, "512^3 GEMM speed", t, o);
    let t = Instant::now();
    let o = conservation(&audit);
    report(9, "conservation audits", t, o);
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

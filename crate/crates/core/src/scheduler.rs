//! Global scheduler: node dependency tracking, lazy lowering, the ready tile queue and
//! dispatch under the time-share and spatial policies.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::Arc;

use serde::Serialize;

use crate::config::{Policy, SimConfig};
use crate::graph::{bind_shapes, fuse_operators, Bindings, ModelGraph};
use crate::lowering::{lower_node, AddressMap, LowerCtx, TileProgram};
use crate::npu::Core;
use crate::SimError;

/// DRAM address space reserved for each request's tensors.
pub const REQUEST_SPAN: u64 = 1 << 36;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RequestKind {
    Static,
    Generative { prompt_len: u64, gen_tokens: u64 },
}

#[derive(Debug, Clone)]
pub struct InferenceRequest {
    pub request_id: String,
    pub model: Arc<ModelGraph>,
    pub batch: u64,
    pub arrival: u64,
    pub kind: RequestKind,
    /// Partition key under the spatial policy.
    pub tenant: String,
    /// Extra symbol bindings; `batch` and `kv_len` are filled in by the scheduler.
    pub bindings: Bindings,
    /// Pre-lowered tiles run as a single node instead of lowering `model`.
    pub program: Option<Arc<Vec<TileProgram>>>,
}

impl InferenceRequest {
    pub fn new(request_id: &str, model: ModelGraph, batch: u64, arrival: u64) -> Self {
        Self {
            request_id: request_id.to_string(),
            model: Arc::new(model),
            batch,
            arrival,
            kind: RequestKind::Static,
            tenant: request_id.to_string(),
            bindings: Bindings::new(),
            program: None,
        }
    }

    /// A request made of hand-built tiles (0-based ids, local chain links).
    pub fn from_tiles(request_id: &str, tiles: Vec<TileProgram>, arrival: u64) -> Self {
        let mut r = Self::new(request_id, ModelGraph::new(request_id, vec![], vec![]), 1, arrival);
        r.program = Some(Arc::new(tiles));
        r
    }

    pub fn generative(mut self, prompt_len: u64, gen_tokens: u64) -> Self {
        self.kind = RequestKind::Generative { prompt_len, gen_tokens };
        self
    }

    pub fn with_tenant(mut self, tenant: &str) -> Self {
        self.tenant = tenant.to_string();
        self
    }

    pub fn with_binding(mut self, symbol: &str, value: u64) -> Self {
        self.bindings.insert(symbol.to_string(), value);
        self
    }

    fn validate(&self) -> Result<(), SimError> {
        let bad = |reason: &str| SimError::Workload(format!("request `{}`: {reason}", self.request_id));
        if self.batch == 0 {
            return Err(bad("batch must be at least 1"));
        }
        if let RequestKind::Generative { prompt_len, gen_tokens } = self.kind {
            if prompt_len == 0 || gen_tokens == 0 {
                return Err(bad("generative requests need prompt_len >= 1 and gen_tokens >= 1"));
            }
        }
        Ok(())
    }
}

/// Timing of one node execution (one pass of one request).
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NodeRecord {
    pub request_id: String,
    pub step: u64,
    pub node: String,
    pub op: String,
    pub tiles: u64,
    pub start: Option<u64>,
    pub end: Option<u64>,
    pub dram_bytes: u64,
    pub systolic_busy: u64,
    pub vector_busy: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Dispatch {
    pub cycle: u64,
    pub tile: u64,
    pub core: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RequestOutcome {
    pub request_id: String,
    pub tenant: String,
    #[serde(flatten)]
    pub kind: RequestKind,
    pub batch: u64,
    pub arrival: u64,
    pub completion: Option<u64>,
    /// Completion cycle of every generated token.
    pub token_times: Vec<u64>,
}

impl RequestOutcome {
    pub fn latency(&self) -> Option<u64> {
        self.completion.map(|c| c - self.arrival)
    }

    /// Time between tokens; the first sample is measured from arrival.
    pub fn tbt(&self) -> Vec<u64> {
        let mut prev = self.arrival;
        self.token_times
            .iter()
            .map(|&t| {
                let d = t - prev;
                prev = t;
                d
            })
            .collect()
    }
}

struct NodeState {
    pending: usize,
    tiles_left: u64,
    record: usize,
}

struct Pass {
    graph: ModelGraph,
    addrs: AddressMap,
    nodes: Vec<NodeState>,
    remaining: usize,
}

struct ReqState {
    req: InferenceRequest,
    graph: ModelGraph,
    npreds: Vec<usize>,
    succs: Vec<Vec<usize>>,
    base: u64,
    group: usize,
    step: u64,
    pass: Option<Pass>,
    queued: usize,
    inflight: usize,
    outcome: RequestOutcome,
}

impl ReqState {
    fn live(&self) -> bool {
        self.pass.is_some()
    }
}

struct Ready {
    tile: TileProgram,
    req: usize,
    node: usize,
    affinity: Option<usize>,
}

struct InFlight {
    req: usize,
    node: usize,
    record: usize,
}

pub struct Scheduler {
    cfg: SimConfig,
    requests: Vec<ReqState>,
    /// Request indices by (arrival, workload order); admitted up to `admitted`.
    order: Vec<usize>,
    admitted: usize,
    queues: Vec<VecDeque<u64>>,
    core_group: Vec<Option<usize>>,
    ready: HashMap<u64, Ready>,
    /// Chain successors waiting for their predecessor to be dispatched.
    chained: HashMap<u64, u64>,
    inflight: HashMap<u64, InFlight>,
    next_tile: u64,
    active: Option<usize>,
    switch_pending: bool,
    records: Vec<NodeRecord>,
    dispatched: u64,
    completed: u64,
    log: Option<Vec<Dispatch>>,
}

impl Scheduler {
    pub fn new(cfg: &SimConfig, requests: Vec<InferenceRequest>) -> Result<Self, SimError> {
        let mut groups: BTreeMap<String, usize> = BTreeMap::new();
        let mut core_group = vec![None; cfg.num_cores];
        if cfg.scheduler.policy == Policy::Spatial {
            for (i, (tenant, cores)) in cfg.scheduler.partition.iter().enumerate() {
                groups.insert(tenant.clone(), i);
                for &c in cores {
                    core_group[c] = Some(i);
                }
            }
        }
        let mut states = Vec::with_capacity(requests.len());
        for (i, req) in requests.into_iter().enumerate() {
            req.validate()?;
            if states.iter().any(|s: &ReqState| s.req.request_id == req.request_id) {
                return Err(SimError::Workload(format!("duplicate request id `{}`", req.request_id)));
            }
            let group = match cfg.scheduler.policy {
                Policy::TimeShare => i,
                Policy::Spatial => match groups.get(&req.tenant) {
                    Some(&g) if !cfg.scheduler.partition[&req.tenant].is_empty() => g,
                    _ => {
                        return Err(SimError::Workload(format!(
                            "request `{}`: tenant `{}` has no cores in scheduler.partition",
                            req.request_id, req.tenant
                        )))
                    }
                },
            };
            let graph = fuse_operators(&req.model);
            let (npreds, succs) = if req.program.is_some() {
                (vec![0], vec![vec![]])
            } else {
                let preds = graph.node_predecessors();
                let mut succs = vec![Vec::new(); graph.nodes.len()];
                for (n, ps) in preds.iter().enumerate() {
                    for &p in ps {
                        succs[p].push(n);
                    }
                }
                (preds.iter().map(Vec::len).collect(), succs)
            };
            let outcome = RequestOutcome {
                request_id: req.request_id.clone(),
                tenant: req.tenant.clone(),
                kind: req.kind,
                batch: req.batch,
                arrival: req.arrival,
                completion: None,
                token_times: Vec::new(),
            };
            states.push(ReqState {
                graph,
                npreds,
                succs,
                base: cfg.dram.base_addr + i as u64 * REQUEST_SPAN,
                group,
                step: 0,
                pass: None,
                queued: 0,
                inflight: 0,
                outcome,
                req,
            });
        }
        let n_groups = match cfg.scheduler.policy {
            Policy::TimeShare => states.len(),
            Policy::Spatial => groups.len(),
        };
        let mut order: Vec<usize> = (0..states.len()).collect();
        order.sort_by_key(|&i| (states[i].req.arrival, i));
        Ok(Self {
            cfg: cfg.clone(),
            requests: states,
            order,
            admitted: 0,
            queues: vec![VecDeque::new(); n_groups],
            core_group,
            ready: HashMap::new(),
            chained: HashMap::new(),
            inflight: HashMap::new(),
            next_tile: 0,
            active: None,
            switch_pending: false,
            records: Vec::new(),
            dispatched: 0,
            completed: 0,
            log: None,
        })
    }

    pub fn enable_log(&mut self) {
        self.log = Some(Vec::new());
    }

    pub fn take_log(&mut self) -> Vec<Dispatch> {
        self.log.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn next_arrival(&self) -> Option<u64> {
        self.order.get(self.admitted).map(|&i| self.requests[i].req.arrival)
    }

    pub fn all_retired(&self) -> bool {
        self.admitted == self.order.len() && self.requests.iter().all(|r| !r.live())
    }

    pub fn tiles_dispatched(&self) -> u64 {
        self.dispatched
    }

    pub fn tiles_completed(&self) -> u64 {
        self.completed
    }

    pub fn records(&self) -> &[NodeRecord] {
        &self.records
    }

    pub fn outcomes(&self) -> Vec<RequestOutcome> {
        self.requests.iter().map(|r| r.outcome.clone()).collect()
    }

    /// Node record index of an in-flight tile.
    pub fn record_of(&self, tile: u64) -> Option<usize> {
        self.inflight.get(&tile).map(|f| f.record)
    }

    pub fn record_mut(&mut self, idx: usize) -> &mut NodeRecord {
        &mut self.records[idx]
    }

    /// Start every request whose arrival cycle has come.
    pub fn admit(&mut self, now: u64) -> Result<(), SimError> {
        while let Some(&r) = self.order.get(self.admitted) {
            if self.requests[r].req.arrival > now {
                break;
            }
            self.admitted += 1;
            self.start_pass(r, now)?;
        }
        Ok(())
    }

    fn start_pass(&mut self, r: usize, now: u64) -> Result<(), SimError> {
        let st = &mut self.requests[r];
        if st.req.program.is_some() {
            st.pass = Some(Pass {
                graph: st.graph.clone(),
                addrs: AddressMap::default(),
                nodes: vec![NodeState {
                    pending: 0,
                    tiles_left: 0,
                    record: self.records.len(),
                }],
                remaining: 1,
            });
            self.records.push(NodeRecord {
                request_id: st.req.request_id.clone(),
                step: 0,
                node: "program".into(),
                op: "Program".into(),
                tiles: 0,
                start: None,
                end: None,
                dram_bytes: 0,
                systolic_busy: 0,
                vector_busy: 0,
            });
            return self.release_nodes(r, vec![0], now);
        }
        let mut b = st.req.bindings.clone();
        b.insert("batch".into(), st.req.batch);
        if let RequestKind::Generative { prompt_len, .. } = st.req.kind {
            b.insert("kv_len".into(), prompt_len + st.step);
        }
        let graph = bind_shapes(&st.graph, &b).map_err(|e| SimError::Workload(format!("request `{}`: {e}", st.req.request_id)))?;
        let addrs = AddressMap::build(&graph, st.base, self.cfg.dram.access_bytes)
            .map_err(|e| SimError::Workload(format!("request `{}`: {e}", st.req.request_id)))?;
        let mut nodes = Vec::with_capacity(graph.nodes.len());
        for (n, node) in graph.nodes.iter().enumerate() {
            nodes.push(NodeState {
                pending: st.npreds[n],
                tiles_left: 0,
                record: self.records.len(),
            });
            self.records.push(NodeRecord {
                request_id: st.req.request_id.clone(),
                step: st.step,
                node: node.id.clone(),
                op: node.op_type.to_string(),
                tiles: 0,
                start: None,
                end: None,
                dram_bytes: 0,
                systolic_busy: 0,
                vector_busy: 0,
            });
        }
        let remaining = nodes.len();
        st.pass = Some(Pass {
            graph,
            addrs,
            nodes,
            remaining,
        });
        let sources: Vec<usize> = (0..st.npreds.len()).filter(|&n| st.npreds[n] == 0).collect();
        if remaining == 0 {
            return self.finish_pass(r, now);
        }
        self.release_nodes(r, sources, now)
    }

    /// Lower nodes whose producers have all finished and queue their tiles.
    fn release_nodes(&mut self, r: usize, mut work: Vec<usize>, now: u64) -> Result<(), SimError> {
        while !work.is_empty() {
            let mut finished = Vec::new();
            for n in std::mem::take(&mut work) {
                let tiles = if let Some(p) = &self.requests[r].req.program {
                    p.as_ref().clone()
                } else {
                    let st = &self.requests[r];
                    let pass = st.pass.as_ref().expect("live pass");
                    let mut ctx = LowerCtx::new(&self.cfg, &pass.addrs, &st.req.request_id);
                    lower_node(&pass.graph, &pass.graph.nodes[n], &mut ctx).map_err(|e| SimError::Lowering { cycle: now, source: e })?
                };
                let base = self.next_tile;
                self.next_tile += tiles.len() as u64;
                let st = &mut self.requests[r];
                let pass = st.pass.as_mut().expect("live pass");
                let ns = &mut pass.nodes[n];
                ns.tiles_left = tiles.len() as u64;
                let rec = &mut self.records[ns.record];
                rec.tiles = tiles.len() as u64;
                rec.dram_bytes = tiles.iter().map(TileProgram::dram_bytes).sum();
                if tiles.is_empty() {
                    finished.push(n);
                }
                for mut t in tiles {
                    t.id += base;
                    t.chain_pred = t.chain_pred.map(|p| p + base);
                    t.preds = t.chain_pred.into_iter().collect();
                    let id = t.id;
                    let chain = t.chain_pred;
                    self.ready.insert(
                        id,
                        Ready {
                            tile: t,
                            req: r,
                            node: n,
                            affinity: None,
                        },
                    );
                    match chain {
                        Some(p) => {
                            self.chained.insert(p, id);
                        }
                        None => self.enqueue(id),
                    }
                }
            }
            for n in finished {
                work.extend(self.node_done(r, n, now)?);
            }
        }
        Ok(())
    }

    fn enqueue(&mut self, id: u64) {
        let r = self.ready[&id].req;
        let st = &mut self.requests[r];
        st.queued += 1;
        self.queues[st.group].push_back(id);
    }

    /// Mark a node complete; returns successors that became ready. May finish the pass.
    fn node_done(&mut self, r: usize, n: usize, now: u64) -> Result<Vec<usize>, SimError> {
        let st = &mut self.requests[r];
        let pass = st.pass.as_mut().expect("live pass");
        let rec = pass.nodes[n].record;
        self.records[rec].end = Some(now);
        pass.remaining -= 1;
        let mut ready = Vec::new();
        for &s in &st.succs[n] {
            let ns = &mut pass.nodes[s];
            ns.pending -= 1;
            if ns.pending == 0 {
                ready.push(s);
            }
        }
        let finished = pass.remaining == 0;
        if self.cfg.scheduler.policy == Policy::TimeShare && self.active == Some(r) {
            let others = self.requests.iter().enumerate().any(|(i, q)| i != r && q.queued > 0);
            if others {
                self.switch_pending = true;
            }
        }
        if finished {
            self.finish_pass(r, now)?;
            return Ok(Vec::new());
        }
        Ok(ready)
    }

    fn finish_pass(&mut self, r: usize, now: u64) -> Result<(), SimError> {
        let st = &mut self.requests[r];
        st.pass = None;
        match st.req.kind {
            RequestKind::Static => st.outcome.completion = Some(now),
            RequestKind::Generative { gen_tokens, .. } => {
                st.outcome.token_times.push(now);
                st.step += 1;
                if st.step < gen_tokens {
                    return self.start_pass(r, now);
                }
                st.outcome.completion = Some(now);
            }
        }
        if self.active == Some(r) {
            self.active = None;
            self.switch_pending = false;
        }
        Ok(())
    }

    pub fn on_tile_complete(&mut self, tile: u64, now: u64) -> Result<(), SimError> {
        let f = self.inflight.remove(&tile).ok_or_else(|| SimError::Consistency {
            cycle: now,
            detail: format!("tile {tile} completed but is not in flight (double completion?)"),
        })?;
        self.completed += 1;
        let st = &mut self.requests[f.req];
        st.inflight -= 1;
        let pass = st.pass.as_mut().expect("tile of a live pass");
        let ns = &mut pass.nodes[f.node];
        ns.tiles_left -= 1;
        if ns.tiles_left == 0 {
            let ready = self.node_done(f.req, f.node, now)?;
            self.release_nodes(f.req, ready, now)?;
        }
        Ok(())
    }

    /// Pick the request allowed to dispatch under time sharing.
    fn time_share_group(&mut self) -> Option<usize> {
        if let Some(a) = self.active {
            let st = &self.requests[a];
            let stuck = st.queued == 0 && st.inflight == 0;
            if !self.switch_pending && !stuck {
                return Some(st.group);
            }
            if self.switch_pending && st.inflight > 0 {
                return None;
            }
        }
        // Round-robin in arrival order, starting after the active request.
        let admitted = &self.order[..self.admitted];
        let start = self.active.and_then(|a| admitted.iter().position(|&i| i == a)).map_or(0, |p| p + 1);
        let n = admitted.len();
        let next = (0..n).map(|k| admitted[(start + k) % n]).find(|&i| self.requests[i].queued > 0);
        self.switch_pending = false;
        match next {
            Some(i) => {
                self.active = Some(i);
                Some(self.requests[i].group)
            }
            None => {
                if self.active.is_some_and(|a| !self.requests[a].live()) {
                    self.active = None;
                }
                None
            }
        }
    }

    /// Hand at most one ready tile to each core, scanning cores in id order.
    pub fn dispatch(&mut self, cores: &mut [Core], now: u64) -> Result<(), SimError> {
        let shared = match self.cfg.scheduler.policy {
            Policy::TimeShare => match self.time_share_group() {
                Some(g) => Some(g),
                None => return Ok(()),
            },
            Policy::Spatial => None,
        };
        for core in cores.iter_mut() {
            let Some(g) = shared.or(self.core_group[core.id]) else { continue };
            let q = &self.queues[g];
            let Some(pos) = q.iter().position(|id| self.ready[id].affinity.is_none_or(|a| a == core.id)) else {
                continue;
            };
            let id = q[pos];
            if !core.can_accept(&self.ready[&id].tile) {
                continue;
            }
            core.check_tile(&self.ready[&id].tile).map_err(|e| SimError::Core { cycle: now, source: e })?;
            self.queues[g].remove(pos);
            let Ready { tile, req, node, .. } = self.ready.remove(&id).expect("queued tile is ready");
            let st = &mut self.requests[req];
            st.queued -= 1;
            st.inflight += 1;
            let record = st.pass.as_ref().expect("live pass").nodes[node].record;
            let rec = &mut self.records[record];
            rec.start.get_or_insert(now);
            self.inflight.insert(id, InFlight { req, node, record });
            self.dispatched += 1;
            if let Some(log) = &mut self.log {
                log.push(Dispatch {
                    cycle: now,
                    tile: id,
                    core: core.id,
                });
            }
            let wait_for = tile.chain_pred;
            core.assign(tile, wait_for, now);
            if let Some(succ) = self.chained.remove(&id) {
                self.ready.get_mut(&succ).expect("chained tile is ready").affinity = Some(core.id);
                self.enqueue(succ);
            }
        }
        Ok(())
    }
}

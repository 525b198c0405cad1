//! Interconnect between cores and memory channels.
//!
//! Two instances exist per simulation: the request network (cores -> channels) and
//! the response network (channels -> cores). Each moves whole packets; the crossbar
//! serializes them into flits.

mod crossbar;
mod simple;

pub use crossbar::Crossbar;
pub use simple::SimpleNet;

use crate::config::{NocConfig, NocModel};
use crate::mem::ReqId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Packet {
    pub req: ReqId,
    pub src: usize,
    pub dst: usize,
    /// Data bytes carried (0 for read commands and write acks).
    pub payload: u64,
    pub flits: u64,
}

impl Packet {
    pub fn new(req: ReqId, src: usize, dst: usize, payload: u64, cfg: &NocConfig) -> Self {
        Self {
            req,
            src,
            dst,
            payload,
            flits: flit_count(payload, cfg),
        }
    }
}

pub fn flit_count(payload: u64, cfg: &NocConfig) -> u64 {
    cfg.header_flits + payload.div_ceil(cfg.flit_bytes)
}

#[derive(Debug)]
pub enum Network {
    Simple(SimpleNet),
    Crossbar(Crossbar),
}

impl Network {
    /// `per_source_links`: in the simple model, links belong to the source port
    /// (request network) or the destination port (response network).
    pub fn new(cfg: &NocConfig, inputs: usize, outputs: usize, per_source_links: bool) -> Self {
        match cfg.model {
            NocModel::Simple => Network::Simple(SimpleNet::new(cfg, inputs, outputs, per_source_links)),
            NocModel::Crossbar => Network::Crossbar(Crossbar::new(inputs, outputs)),
        }
    }

    pub fn inject(&mut self, pkt: Packet, now: u64) {
        match self {
            Network::Simple(n) => {
                n.inject(pkt, now);
            }
            Network::Crossbar(n) => n.inject(pkt),
        }
    }

    /// Packets arriving at their destination this cycle. `space(dst)` is how many
    /// more packets the destination can take right now.
    pub fn deliver(&mut self, now: u64, space: &dyn Fn(usize) -> usize) -> Vec<Packet> {
        match self {
            Network::Simple(n) => n.deliver(now, space),
            Network::Crossbar(n) => n.deliver(now),
        }
    }

    /// Move flits for one cycle (crossbar only).
    pub fn arbitrate(&mut self, now: u64, space: &dyn Fn(usize) -> usize) {
        if let Network::Crossbar(n) = self {
            n.arbitrate(now, space);
        }
    }

    pub fn next_event(&self, now: u64) -> Option<u64> {
        match self {
            Network::Simple(n) => n.next_event(now),
            Network::Crossbar(n) => n.next_event(now),
        }
    }

    pub fn idle(&self) -> bool {
        match self {
            Network::Simple(n) => n.idle(),
            Network::Crossbar(n) => n.idle(),
        }
    }

    /// Port-cycles spent moving data (flits granted, or link serialization cycles).
    pub fn busy_cycles(&self) -> u64 {
        match self {
            Network::Simple(n) => n.busy_cycles(),
            Network::Crossbar(n) => n.flits_moved(),
        }
    }

    /// Number of ports whose busy cycles are counted.
    pub fn ports(&self) -> usize {
        match self {
            Network::Simple(n) => n.links(),
            Network::Crossbar(n) => n.outputs(),
        }
    }

    pub fn packets_delivered(&self) -> u64 {
        match self {
            Network::Simple(n) => n.delivered(),
            Network::Crossbar(n) => n.delivered(),
        }
    }
}

use std::collections::VecDeque;

use super::Packet;

#[derive(Debug, Clone, Copy)]
struct InFlight {
    pkt: Packet,
    sent: u64,
}

/// Single-stage input-queued crossbar with one round-robin arbiter per output.
///
/// Every cycle each output grants one flit to an eligible input, starting the
/// search at its pointer and moving the pointer past the winner. An input only
/// offers the packet at the head of its queue. A packet that has not started yet
/// is eligible only if its destination can absorb it, counting packets already
/// reserved on that output.
#[derive(Debug)]
pub struct Crossbar {
    inputs: Vec<VecDeque<InFlight>>,
    rr: Vec<usize>,
    reserved: Vec<usize>,
    arriving: VecDeque<(u64, Packet)>,
    flits: u64,
    delivered: u64,
    queued: usize,
    /// Per output: grants per input, for fairness audits.
    grants: Option<Vec<Vec<u64>>>,
}

impl Crossbar {
    pub fn new(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs: (0..inputs).map(|_| VecDeque::new()).collect(),
            rr: vec![0; outputs],
            reserved: vec![0; outputs],
            arriving: VecDeque::new(),
            flits: 0,
            delivered: 0,
            queued: 0,
            grants: None,
        }
    }

    pub fn record_grants(&mut self) {
        self.grants = Some(vec![vec![0; self.inputs.len()]; self.rr.len()]);
    }

    pub fn grants(&self) -> Option<&Vec<Vec<u64>>> {
        self.grants.as_ref()
    }

    pub fn inject(&mut self, pkt: Packet) {
        self.inputs[pkt.src].push_back(InFlight { pkt, sent: 0 });
        self.queued += 1;
    }

    pub fn deliver(&mut self, now: u64) -> Vec<Packet> {
        let mut out = Vec::new();
        while self.arriving.front().is_some_and(|&(at, _)| at <= now) {
            let (_, pkt) = self.arriving.pop_front().expect("front checked");
            self.reserved[pkt.dst] -= 1;
            out.push(pkt);
        }
        self.delivered += out.len() as u64;
        out
    }

    pub fn arbitrate(&mut self, now: u64, space: &dyn Fn(usize) -> usize) {
        if self.queued == 0 {
            return;
        }
        let n_in = self.inputs.len();
        for out in 0..self.rr.len() {
            let start = self.rr[out];
            let mut winner = None;
            for step in 0..n_in {
                let i = (start + step) % n_in;
                let Some(head) = self.inputs[i].front() else { continue };
                if head.pkt.dst != out {
                    continue;
                }
                if head.sent == 0 && self.reserved[out] >= space(out) {
                    continue;
                }
                winner = Some(i);
                break;
            }
            let Some(i) = winner else { continue };
            self.rr[out] = (i + 1) % n_in;
            self.flits += 1;
            if let Some(g) = &mut self.grants {
                g[out][i] += 1;
            }
            let head = self.inputs[i].front_mut().expect("winner has a head packet");
            if head.sent == 0 {
                self.reserved[out] += 1;
            }
            head.sent += 1;
            if head.sent == head.pkt.flits {
                let done = self.inputs[i].pop_front().expect("winner has a head packet");
                self.queued -= 1;
                self.arriving.push_back((now + 1, done.pkt));
            }
        }
    }

    pub fn next_event(&self, now: u64) -> Option<u64> {
        if self.queued > 0 {
            return Some(now + 1);
        }
        self.arriving.front().map(|&(at, _)| at.max(now + 1))
    }

    pub fn idle(&self) -> bool {
        self.queued == 0 && self.arriving.is_empty()
    }

    pub fn flits_moved(&self) -> u64 {
        self.flits
    }

    pub fn outputs(&self) -> usize {
        self.rr.len()
    }

    pub fn delivered(&self) -> u64 {
        self.delivered
    }
}

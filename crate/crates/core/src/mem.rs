//! DRAM-granularity memory requests and the slab that owns them while in flight.

use serde::Serialize;

pub type ReqId = u64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MemoryRequest {
    pub id: ReqId,
    pub addr: u64,
    pub is_write: bool,
    pub core_id: usize,
    pub tile_id: u64,
    pub instr_index: u32,
    /// Core cycle the DMA engine emitted the request.
    pub issued_cycle: u64,
    /// Core cycle the response (read data or write ack) reached the core.
    pub completed_cycle: Option<u64>,
    /// The DRAM controller finished the access (writes are acked before this).
    pub dram_done: bool,
    pub channel: usize,
}

/// Requests indexed by id. Ids are dense and never reused, slots are recycled.
#[derive(Debug, Default)]
pub struct RequestTable {
    slots: Vec<Option<MemoryRequest>>,
    free: Vec<usize>,
    index: std::collections::HashMap<ReqId, usize>,
    next_id: ReqId,
}

impl RequestTable {
    pub fn insert(&mut self, mut req: MemoryRequest) -> ReqId {
        let id = self.next_id;
        self.next_id += 1;
        req.id = id;
        let slot = match self.free.pop() {
            Some(s) => {
                self.slots[s] = Some(req);
                s
            }
            None => {
                self.slots.push(Some(req));
                self.slots.len() - 1
            }
        };
        self.index.insert(id, slot);
        id
    }

    pub fn get(&self, id: ReqId) -> &MemoryRequest {
        let slot = self.index[&id];
        self.slots[slot].as_ref().expect("live request slot")
    }

    pub fn get_mut(&mut self, id: ReqId) -> &mut MemoryRequest {
        let slot = self.index[&id];
        self.slots[slot].as_mut().expect("live request slot")
    }

    pub fn remove(&mut self, id: ReqId) -> MemoryRequest {
        let slot = self.index.remove(&id).expect("request is live");
        self.free.push(slot);
        self.slots[slot].take().expect("live request slot")
    }

    pub fn live(&self) -> usize {
        self.index.len()
    }

    pub fn issued(&self) -> u64 {
        self.next_id
    }
}

/// Aligned blocks of `granule` bytes covering `rows` runs of `row_bytes` bytes,
/// `stride` apart, starting at `addr`. Ascending, without duplicates.
pub fn block_cover(addr: u64, stride: u64, rows: u64, row_bytes: u64, granule: u64) -> Vec<u64> {
    let mut out = Vec::new();
    if row_bytes == 0 || rows == 0 {
        return out;
    }
    let contiguous = stride == row_bytes || rows == 1;
    if contiguous {
        let end = addr + rows * row_bytes;
        let mut b = addr / granule * granule;
        while b < end {
            out.push(b);
            b += granule;
        }
        return out;
    }
    for r in 0..rows {
        let start = addr + r * stride;
        let end = start + row_bytes;
        let mut b = start / granule * granule;
        while b < end {
            out.push(b);
            b += granule;
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cover_examples() {
        assert_eq!(block_cover(0, 256, 1, 256, 64), vec![0, 64, 128, 192]);
        assert_eq!(block_cover(32, 100, 1, 100, 64), vec![0, 64, 128]);
        assert!(block_cover(0, 0, 1, 0, 64).is_empty());
    }

    #[test]
    fn strided_rows_dedup() {
        // two 16-byte rows inside the same block
        assert_eq!(block_cover(0, 32, 2, 16, 64), vec![0]);
        assert_eq!(block_cover(0, 128, 2, 16, 64), vec![0, 128]);
    }

    #[test]
    fn table_recycles_slots() {
        let mut t = RequestTable::default();
        let r = MemoryRequest {
            id: 0,
            addr: 0,
            is_write: false,
            core_id: 0,
            tile_id: 0,
            instr_index: 0,
            issued_cycle: 0,
            completed_cycle: None,
            dram_done: false,
            channel: 0,
        };
        let a = t.insert(r.clone());
        let b = t.insert(r.clone());
        assert_eq!((a, b), (0, 1));
        t.remove(a);
        let c = t.insert(r);
        assert_eq!(c, 2);
        assert_eq!(t.live(), 2);
        assert_eq!(t.get(c).id, 2);
    }
}

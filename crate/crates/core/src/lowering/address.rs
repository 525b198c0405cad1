use std::collections::{BTreeMap, HashMap};

use serde::Serialize;

use super::LoweringError;
use crate::graph::{GraphError, ModelGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Region {
    pub addr: u64,
    pub bytes: u64,
}

/// Contiguous row-major DRAM range per tensor, bump-allocated in declaration order.
#[derive(Debug, Clone, Default)]
pub struct AddressMap {
    by_name: HashMap<String, Region>,
    by_addr: BTreeMap<u64, (String, u64)>,
    base: u64,
    end: u64,
}

impl AddressMap {
    /// `g` must be concrete; sizes are taken from it.
    pub fn build(g: &ModelGraph, base: u64, align: u64) -> Result<Self, LoweringError> {
        let mut map = AddressMap {
            base,
            end: base,
            ..Default::default()
        };
        for t in &g.tensors {
            let bytes = t.byte_size().ok_or_else(|| {
                GraphError::UnboundSymbol(t.symbols().next().unwrap_or_default().to_string())
            })?;
            map.push(&t.name, bytes, align);
        }
        Ok(map)
    }

    pub fn push(&mut self, name: &str, bytes: u64, align: u64) -> Region {
        let addr = self.end.div_ceil(align) * align;
        let r = Region { addr, bytes };
        self.end = addr + bytes;
        self.by_name.insert(name.to_string(), r);
        if bytes > 0 {
            self.by_addr.insert(addr, (name.to_string(), bytes));
        }
        r
    }

    pub fn get(&self, name: &str) -> Option<Region> {
        self.by_name.get(name).copied()
    }

    /// Tensor whose range contains `addr`.
    pub fn tensor_at(&self, addr: u64) -> Option<&str> {
        let (start, (name, bytes)) = self.by_addr.range(..=addr).next_back()?;
        (addr < start + bytes).then_some(name.as_str())
    }

    pub fn base(&self) -> u64 {
        self.base
    }

    pub fn end(&self) -> u64 {
        self.end
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bump_allocation_is_aligned_and_disjoint() {
        let mut m = AddressMap {
            base: 100,
            end: 100,
            ..Default::default()
        };
        let a = m.push("a", 10, 64);
        let b = m.push("b", 70, 64);
        assert_eq!(a.addr, 128);
        assert_eq!(b.addr, 192);
        assert_eq!(m.tensor_at(137), Some("a"));
        assert_eq!(m.tensor_at(138), None);
        assert_eq!(m.tensor_at(261), Some("b"));
        assert_eq!(m.end(), 262);
    }
}

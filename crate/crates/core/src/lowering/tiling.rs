use serde::Serialize;

use crate::config::CoreConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct TileShape {
    pub m: u64,
    pub k: u64,
    pub n: u64,
}

/// Budget a GEMM tile must fit in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TileBudget {
    pub spm_bytes: u64,
    pub acc_bytes: u64,
    pub elem_bytes: u64,
    pub acc_elem_bytes: u64,
    pub array_h: u64,
    pub array_w: u64,
    /// Output-shaped operands staged in the scratchpad next to A and B (fused residuals).
    pub residuals: u64,
}

impl TileBudget {
    pub fn for_core(core: &CoreConfig, elem_bytes: u64, residuals: u64) -> Self {
        Self {
            spm_bytes: core.spm_partition_bytes(),
            acc_bytes: core.acc_partition_bytes(),
            elem_bytes,
            acc_elem_bytes: core.acc_elem_bytes,
            array_h: core.array_h,
            array_w: core.array_w,
            residuals,
        }
    }

    pub fn spm_need(&self, t: TileShape) -> u64 {
        (t.m * t.k + t.k * t.n + self.residuals * t.m * t.n) * self.elem_bytes
    }

    pub fn acc_need(&self, t: TileShape) -> u64 {
        t.m * t.n * self.acc_elem_bytes
    }

    pub fn fits(&self, t: TileShape) -> bool {
        self.spm_need(t) <= self.spm_bytes && self.acc_need(t) <= self.acc_bytes
    }
}

/// Multiples of `granule` up to `full`, plus `full` itself.
pub fn candidates(full: u64, granule: u64) -> Vec<u64> {
    let mut v: Vec<u64> = (1..=full / granule).map(|i| i * granule).collect();
    if v.last() != Some(&full) {
        v.push(full);
    }
    v
}

/// Largest-footprint tile for an (M, K, N) product.
///
/// `extra(m, k)` adds scratchpad bytes beyond A, B and residuals (the raw input band
/// of a convolution). When `monotone` is set, feasibility is assumed monotone in k
/// and the k search is a bisection.
pub fn search_tile(
    dims: (u64, u64, u64),
    budget: &TileBudget,
    extra: &dyn Fn(u64, u64) -> u64,
    monotone: bool,
) -> Option<TileShape> {
    let (mm, kk, nn) = dims;
    if mm == 0 || kk == 0 || nn == 0 {
        return None;
    }
    search_inner(dims, budget, extra, monotone, true).or_else(|| search_inner(dims, budget, extra, monotone, false))
}

fn search_inner(
    dims: (u64, u64, u64),
    budget: &TileBudget,
    extra: &dyn Fn(u64, u64) -> u64,
    monotone: bool,
    full_blocks: bool,
) -> Option<TileShape> {
    let (mm, kk, nn) = dims;
    let h = budget.array_h;
    let w = budget.array_w;
    // Prefer tiles where one preload fills the whole array.
    let k_floor = if full_blocks && kk >= h { h } else { 1 };
    let n_floor = if full_blocks && nn >= w { w } else { 1 };
    let grid = |full: u64, granule: u64| {
        let mut v = candidates(full, granule);
        if !full_blocks {
            // Fallback for tiny buffers: sub-array blocks in powers of two.
            let mut small: Vec<u64> = (0..).map(|i| 1u64 << i).take_while(|&p| p < granule.min(full)).collect();
            small.extend(v);
            v = small;
        }
        v
    };
    let ms = grid(mm, h);
    let ns: Vec<u64> = grid(nn, w).into_iter().filter(|&n| n >= n_floor).collect();
    let ks: Vec<u64> = grid(kk, h).into_iter().filter(|&k| k >= k_floor).collect();

    let feasible = |m: u64, k: u64, n: u64| {
        let t = TileShape { m, k, n };
        budget.fits(t) && budget.spm_need(t) + extra(m, k) <= budget.spm_bytes
    };

    let mut best: Option<(u64, TileShape)> = None;
    for &m in &ms {
        for &n in &ns {
            if m * n * budget.acc_elem_bytes > budget.acc_bytes {
                break;
            }
            let k = if monotone {
                if !feasible(m, ks[0], n) {
                    continue;
                }
                let (mut lo, mut hi) = (0usize, ks.len() - 1);
                while lo < hi {
                    let mid = (lo + hi).div_ceil(2);
                    if feasible(m, ks[mid], n) {
                        lo = mid;
                    } else {
                        hi = mid - 1;
                    }
                }
                ks[lo]
            } else {
                match ks.iter().rev().find(|&&k| feasible(m, k, n)) {
                    Some(&k) => k,
                    None => continue,
                }
            };
            let fp = m * k + k * n;
            let cand = TileShape { m, k, n };
            let better = match best {
                None => true,
                Some((bfp, b)) => (fp, m, n, k) > (bfp, b.m, b.n, b.k),
            };
            if better {
                best = Some((fp, cand));
            }
        }
    }
    best.map(|(_, t)| t)
}

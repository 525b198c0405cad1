//! Core instruction set: DMA moves, weight preload, matrix multiply, im2col and vector ops.

use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum VectorKind {
    Add,
    Mul,
    Gelu,
    Relu,
    Softmax,
    Layernorm,
    AccReduce,
}

impl VectorKind {
    pub const ALL: [VectorKind; 7] = [
        VectorKind::Add,
        VectorKind::Mul,
        VectorKind::Gelu,
        VectorKind::Relu,
        VectorKind::Softmax,
        VectorKind::Layernorm,
        VectorKind::AccReduce,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VectorKind::Add => "ADD",
            VectorKind::Mul => "MUL",
            VectorKind::Gelu => "GELU",
            VectorKind::Relu => "RELU",
            VectorKind::Softmax => "SOFTMAX",
            VectorKind::Layernorm => "LAYERNORM",
            VectorKind::AccReduce => "ACC_REDUCE",
        }
    }

    /// Statistics, normalize and scale passes.
    pub fn passes(self) -> u64 {
        match self {
            VectorKind::Softmax | VectorKind::Layernorm => 3,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Opcode {
    Mvin,
    Mvout,
    GemmPreload,
    Gemm,
    Im2col,
    Vector(VectorKind),
}

impl Opcode {
    pub fn is_dma(self) -> bool {
        matches!(self, Opcode::Mvin | Opcode::Mvout)
    }
}

impl fmt::Display for Opcode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Opcode::Mvin => f.write_str("MVIN"),
            Opcode::Mvout => f.write_str("MVOUT"),
            Opcode::GemmPreload => f.write_str("GEMM_PRELOAD"),
            Opcode::Gemm => f.write_str("GEMM"),
            Opcode::Im2col => f.write_str("IM2COL"),
            Opcode::Vector(k) => write!(f, "VECTOR({})", k.name()),
        }
    }
}

/// On-chip memory an instruction operand lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Space {
    Scratchpad,
    Accumulator,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub opcode: Opcode,
    /// DRAM byte address of the first row; only MVIN/MVOUT carry one.
    pub dram_addr: Option<u64>,
    /// Byte distance between consecutive rows in DRAM.
    pub dram_stride: u64,
    pub space: Space,
    /// Byte offset inside the tile's partition.
    pub spm_offset: u64,
    pub rows: u64,
    pub cols: u64,
    pub elem_bytes: u64,
    /// Weight block identity shared by a GEMM_PRELOAD and the GEMM that consumes it.
    pub weight_tag: Option<u32>,
    /// Indices of earlier instructions in the same tile.
    pub deps: Vec<u32>,
}

impl Instruction {
    fn base(opcode: Opcode, space: Space, rows: u64, cols: u64, elem_bytes: u64, deps: Vec<u32>) -> Self {
        Self {
            opcode,
            dram_addr: None,
            dram_stride: 0,
            space,
            spm_offset: 0,
            rows,
            cols,
            elem_bytes,
            weight_tag: None,
            deps,
        }
    }

    /// 2-D DMA: `rows` runs of `cols` elements, `stride` bytes apart in DRAM.
    pub fn dma(opcode: Opcode, addr: u64, stride: u64, rows: u64, cols: u64, elem_bytes: u64, space: Space, deps: Vec<u32>) -> Self {
        debug_assert!(opcode.is_dma());
        let mut i = Self::base(opcode, space, rows, cols, elem_bytes, deps);
        i.dram_addr = Some(addr);
        i.dram_stride = stride;
        i
    }

    pub fn preload(k_rows: u64, n_cols: u64, elem_bytes: u64, tag: u32, deps: Vec<u32>) -> Self {
        let mut i = Self::base(Opcode::GemmPreload, Space::Scratchpad, k_rows, n_cols, elem_bytes, deps);
        i.weight_tag = Some(tag);
        i
    }

    pub fn gemm(m_rows: u64, n_cols: u64, elem_bytes: u64, tag: u32, deps: Vec<u32>) -> Self {
        let mut i = Self::base(Opcode::Gemm, Space::Accumulator, m_rows, n_cols, elem_bytes, deps);
        i.weight_tag = Some(tag);
        i
    }

    pub fn im2col(rows: u64, patch_elems: u64, elem_bytes: u64, deps: Vec<u32>) -> Self {
        Self::base(Opcode::Im2col, Space::Scratchpad, rows, patch_elems, elem_bytes, deps)
    }

    pub fn vector(kind: VectorKind, rows: u64, cols: u64, elem_bytes: u64, space: Space, deps: Vec<u32>) -> Self {
        Self::base(Opcode::Vector(kind), space, rows, cols, elem_bytes, deps)
    }

    pub fn with_offset(mut self, spm_offset: u64) -> Self {
        self.spm_offset = spm_offset;
        self
    }

    pub fn elements(&self) -> u64 {
        self.rows * self.cols
    }

    pub fn bytes(&self) -> u64 {
        self.elements() * self.elem_bytes
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.opcode)?;
        if let Some(addr) = self.dram_addr {
            write!(f, " dram=0x{addr:x} stride={}", self.dram_stride)?;
        }
        let space = match self.space {
            Space::Scratchpad => "spm",
            Space::Accumulator => "acc",
        };
        write!(f, " {space}+{} {}x{}x{}B", self.spm_offset, self.rows, self.cols, self.elem_bytes)?;
        if let Some(tag) = self.weight_tag {
            write!(f, " tag={tag}")?;
        }
        f.write_str(" deps=[")?;
        for (i, d) in self.deps.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{d}")?;
        }
        f.write_str("]")
    }
}

//! Cycle-level simulator for multi-core NPUs: graph IR, tile lowering, core timing,
//! DRAM and interconnect models, and a multi-tenant scheduler.

pub mod config;
pub mod dram;
pub mod graph;
pub mod isa;
pub mod lowering;
pub mod mem;
pub mod models;
pub mod noc;
pub mod npu;
pub mod report;
pub mod scheduler;
pub mod sim;
pub mod workload;

pub use config::{ConfigError, SimConfig};
pub use graph::{ModelGraph, OpNode, TensorDesc};
pub use isa::{Instruction, Opcode, VectorKind};
pub use models::{build_synthetic_model, synthetic_from_spec, SyntheticModel};
pub use lowering::{lower_graph, TileProgram, TileShape};
pub use report::Report;
pub use scheduler::{InferenceRequest, RequestKind};
pub use sim::{simulate, SimError, Simulation};
pub use workload::{load_workload, parse_workload, ModelResolver};

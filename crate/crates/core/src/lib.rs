//! Discrete-event model of the classical control plane of a multi-chip
//! quantum computer with a shared wireless network-on-chip, comparing a
//! circulating-token MAC against an instruction-directed token MAC.

pub mod audit;
pub mod circuit;
pub mod compiler;
pub mod engine;
pub mod experiment;
pub mod isa;
pub mod mac;
pub mod metrics;
pub mod system;

pub use circuit::{Gate, LogicalCircuit, Opcode};
pub use compiler::{build_program, compile, map_modulo, CompileOptions, Instruction, Program};
pub use metrics::{breakdown, BreakdownReport};
pub use system::{run_program, MacMode, SimConfig, TimingConfig, Trace};

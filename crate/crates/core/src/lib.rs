//! Schedule search and code generation for GEMM on a Gemmini-style systolic
//! array, together with a functional and cycle-level simulator of the
//! accelerator and a small tuner that drives both.

pub mod bench;
pub mod codegen;
pub mod config;
pub mod isa;
pub mod quant;
pub mod sim;
pub mod space;
pub mod tuner;

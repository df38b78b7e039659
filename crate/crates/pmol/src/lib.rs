//! PMoL: preference mixing with grouped LoRA experts behind an MoE router,
//! attached to a frozen toy transformer.
//!
//! Modules:
//! - [`numcore`]: tensors, reverse-mode autodiff, deterministic RNG
//! - [`backbone`]: the frozen decoder-only transformer and log-prob utilities
//! - [`adapter`]: PMoL layers (LoRA experts + router + empty expert)
//! - [`losses`]: DPO/ORPO objectives and routing auxiliary losses
//! - [`data`]: preference pairs, tokenizer, synthetic generator, JSONL I/O
//! - [`trainengine`]: Adam, training loop, checkpoints, evaluation
//! - [`telemetry`]: expert-weight recording and the micro-benchmark harness

// The tensor ops allocate and drop multi-megabyte buffers every call; jemalloc
// keeps those in its arenas instead of returning pages to the kernel, which
// both speeds the hot paths up and keeps the micro-benchmark timings stable.
#[global_allocator]
static ALLOC: tikv_jemallocator::Jemalloc = tikv_jemallocator::Jemalloc;

pub mod adapter;
pub mod backbone;
pub mod cli;
pub mod data;
pub mod error;
pub mod losses;
pub mod numcore;
pub mod telemetry;
pub mod trainengine;

pub use error::{Error, Result};

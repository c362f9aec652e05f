//! Strategy-pluggable x86/x64 disassembly and an evaluation harness.
//!
//! The pipeline turns a [`BinaryImage`] into [`Facts`]: instruction
//! boundaries, cross-references, function entries, CFG edges, call graph,
//! tail calls, non-returning functions and jump tables. Each analysis step
//! is selected through a [`StrategyConfig`].

pub mod cfg;
pub mod config;
pub mod corpus;
pub mod decode;
pub mod eval;
pub mod funcid;
pub mod image;
pub mod matrix;
pub mod pipeline;
pub mod recursive;
pub mod sweep;
pub mod symbolize;

pub use config::{ConfigError, StrategyConfig};
pub use decode::{decode_at, DecodeError, FlowKind, Instruction};
pub use eval::{Facts, Phase};
pub use image::{load_binary, BinaryImage, LoadError, Mode, Section, SectionKind, Span, SymbolEntry};
pub use pipeline::{analyze, Analysis};

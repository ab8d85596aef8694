//! The recurrent-cell DSL: trees, grammar, canonical ordering, and analysis.

mod analysis;
mod builtins;
mod canon;
mod op;
mod parse;
mod tree;

use sha2::{Digest, Sha256};
use thiserror::Error;

pub use analysis::{analyze, check, enumerate_ct_taps, ArchAnalysis, Limits, Violation, MIN_CT_OPERATORS};
pub use builtins::{builtin, BC3_LISTING, BUILTIN_NAMES, GRU_LISTING, LSTM, MGU, TANH_RNN};
pub use canon::{canonical_render, canonicalize, canonicalize_with_map, CanonTree};
pub use op::OpKind;
pub use parse::parse;
pub use tree::{numbering, ArchNode, Architecture, NodePath};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DslError {
    #[error("syntax error at offset {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("unknown token `{token}` at offset {pos}")]
    UnknownToken { pos: usize, token: String },
    #[error("arity mismatch at offset {pos}: {op} takes {expected} argument(s), got {found}")]
    Arity { pos: usize, op: String, expected: usize, found: usize },
    #[error("c_t node {index} out of range (tree has {count} operator nodes)")]
    CtOutOfRange { index: usize, count: usize },
    #[error("c_t node {index} does not depend on c_tm1")]
    CtWithoutCm1 { index: usize },
    #[error("unknown cell `{0}`")]
    UnknownCell(String),
}

/// Stable identifier: hex SHA-256 of the canonical render (tap included).
pub fn arch_id(arch: &Architecture) -> String {
    let canon = canonicalize(arch).render();
    hex::encode(Sha256::digest(canon.as_bytes()))
}

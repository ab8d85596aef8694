//! Recurrent cell architecture DSL and search toolkit.
//!
//! * [`dsl`] parses, prints, canonicalizes and analyzes cell definitions.
//! * [`engine`] is a small double-precision tensor engine with reverse-mode
//!   differentiation and optimizers.
//! * [`compiler`] turns a cell definition into an executable program.
//! * [`evaluator`] trains compiled cells on sequence tasks.
//! * [`random_gen`], [`ranker`] and [`rl`] generate and score candidates.
//! * [`orchestrator`] runs the search loops and owns the record store.

pub mod compiler;
pub mod dsl;
pub mod engine;
pub mod evaluator;
pub mod random_gen;
pub mod ranker;
pub mod orchestrator;
pub mod rl;

pub use dsl::{parse, ArchNode, Architecture, OpKind};

//! Structural statistics, admissibility checks, and `c_t` tap enumeration.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::tree::{numbering, ArchNode, Architecture};
use super::OpKind;

/// Minimum operator count of a `c_t` subtree.
pub const MIN_CT_OPERATORS: usize = 3;

/// A named reason an architecture is not admissible.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Violation {
    GateNotSigmoid,
    MissingX,
    MissingH,
    StackedIdentical,
    TooTall,
    TooBig,
    TrivialCt,
    CtWithoutCm1,
}

impl Violation {
    pub fn name(self) -> &'static str {
        match self {
            Violation::GateNotSigmoid => "gate_not_sigmoid",
            Violation::MissingX => "missing_x",
            Violation::MissingH => "missing_h",
            Violation::StackedIdentical => "stacked_identical",
            Violation::TooTall => "too_tall",
            Violation::TooBig => "too_big",
            Violation::TrivialCt => "trivial_ct",
            Violation::CtWithoutCm1 => "ct_without_cm1",
        }
    }
}

/// Size, height and required-source limits used by [`check`].
#[derive(Clone, Debug, PartialEq)]
pub struct Limits {
    /// Maximum number of operator nodes.
    pub max_nodes: usize,
    /// Maximum distance from `h_t` to any node, source leaves included.
    pub max_height: usize,
    pub require_sources: Vec<OpKind>,
}

impl Default for Limits {
    fn default() -> Self {
        Limits { max_nodes: 21, max_height: 8, require_sources: vec![OpKind::X, OpKind::Hm1] }
    }
}

/// Collects every violation of `arch` against `limits`, sorted and deduplicated.
pub fn check(arch: &Architecture, limits: &Limits) -> Vec<Violation> {
    let mut out = BTreeSet::new();
    let root = &arch.root;
    root.walk(&mut |n, _| {
        if n.op == OpKind::Gate3 && n.children[2].op != OpKind::Sigmoid {
            out.insert(Violation::GateNotSigmoid);
        }
        if n.op.is_operator() && n.children.iter().any(|c| c.op == n.op) {
            out.insert(Violation::StackedIdentical);
        }
    });
    for &src in &limits.require_sources {
        if root.contains(src) {
            continue;
        }
        // Only x_t and h_tm1 have a dedicated flag.
        match src {
            OpKind::X => {
                out.insert(Violation::MissingX);
            }
            OpKind::Hm1 => {
                out.insert(Violation::MissingH);
            }
            _ => {}
        }
    }
    if root.operator_count() > limits.max_nodes {
        out.insert(Violation::TooBig);
    }
    if root.depth() > limits.max_height {
        out.insert(Violation::TooTall);
    }
    if arch.ct_node.is_some() {
        match arch.ct_path() {
            Some(path) => {
                let sub = root.at(&path).expect("numbered path");
                if !sub.contains(OpKind::Cm1) {
                    out.insert(Violation::CtWithoutCm1);
                }
                if path.is_empty() || sub.operator_count() < MIN_CT_OPERATORS {
                    out.insert(Violation::TrivialCt);
                }
            }
            None => {
                out.insert(Violation::CtWithoutCm1);
            }
        }
    }
    out.into_iter().collect()
}

/// Structural summary of an architecture.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchAnalysis {
    pub node_count: usize,
    pub height: usize,
    pub sources_used: BTreeSet<OpKind>,
    pub uses_ct: bool,
    pub validity_flags: Vec<Violation>,
}

/// Node count and height count operator nodes only: a bare source leaf has
/// both equal to zero. Validity flags use the default [`Limits`].
pub fn analyze(arch: &Architecture) -> ArchAnalysis {
    let mut sources_used = BTreeSet::new();
    arch.root.walk(&mut |n, _| {
        if n.op.is_source() {
            sources_used.insert(n.op);
        }
    });
    ArchAnalysis {
        node_count: arch.root.operator_count(),
        height: arch.root.height(),
        sources_used,
        uses_ct: arch.ct_node.is_some(),
        validity_flags: check(arch, &Limits::default()),
    }
}

/// One candidate per admissible `c_t` tap of `arch`, in ascending node
/// number. A tap must contain `c_tm1`, have at least three operator nodes,
/// and differ from the root.
pub fn enumerate_ct_taps(arch: &Architecture) -> Vec<Architecture> {
    if !arch.uses(OpKind::Cm1) {
        return Vec::new();
    }
    numbering(&arch.root)
        .iter()
        .enumerate()
        .filter(|(_, path)| !path.is_empty())
        .filter(|(_, path)| {
            let sub: &ArchNode = arch.root.at(path).expect("numbered path");
            sub.contains(OpKind::Cm1) && sub.operator_count() >= MIN_CT_OPERATORS
        })
        .map(|(i, _)| Architecture { root: arch.root.clone(), ct_node: Some(i + 1) })
        .collect()
}

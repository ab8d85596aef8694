//! Canonical ordering of commutative arguments.
//!
//! `Add` and `Mult` children are sorted by their canonical render; the two
//! value arguments of `Gate3` are sorted while the gate input stays last.
//! `Sub` and `Div` are never reordered.

use super::tree::{numbering, ArchNode, Architecture, NodePath};
use super::OpKind;

/// Canonicalized subtree plus the permutation that produced it.
#[derive(Clone, Debug)]
pub struct CanonTree {
    pub node: ArchNode,
    render: String,
    /// `perm[j]` is the original index of the new child `j`.
    perm: Vec<usize>,
    kids: Vec<CanonTree>,
}

impl CanonTree {
    pub fn build(node: &ArchNode) -> Self {
        let mut kids: Vec<(usize, CanonTree)> = node.children.iter().map(CanonTree::build).enumerate().collect();
        let sort_len = match node.op {
            OpKind::Add | OpKind::Mult => kids.len(),
            OpKind::Gate3 => 2,
            _ => 0,
        };
        kids[..sort_len].sort_by(|a, b| a.1.render.cmp(&b.1.render));
        let perm: Vec<usize> = kids.iter().map(|(i, _)| *i).collect();
        let kids: Vec<CanonTree> = kids.into_iter().map(|(_, k)| k).collect();
        let node = ArchNode { op: node.op, children: kids.iter().map(|k| k.node.clone()).collect() };
        let render = node.render();
        CanonTree { node, render, perm, kids }
    }

    pub fn render(&self) -> &str {
        &self.render
    }

    /// Maps a path in the original tree to the same node's path in the
    /// canonical tree.
    pub fn map_path(&self, old: &[usize]) -> Option<NodePath> {
        let mut out = Vec::with_capacity(old.len());
        let mut cur = self;
        for &i in old {
            let j = cur.perm.iter().position(|&p| p == i)?;
            out.push(j);
            cur = &cur.kids[j];
        }
        Some(out)
    }
}

/// Returns the canonical form of `arch` with `ct_node` renumbered.
pub fn canonicalize(arch: &Architecture) -> Architecture {
    canonicalize_with_map(arch).0
}

/// Like [`canonicalize`], also returning, for each operator node numbered
/// `i + 1` in the input, its number in the output.
pub fn canonicalize_with_map(arch: &Architecture) -> (Architecture, Vec<usize>) {
    let tree = CanonTree::build(&arch.root);
    let new_order = numbering(&tree.node);
    let index_map: Vec<usize> = numbering(&arch.root)
        .iter()
        .map(|old| {
            let new = tree.map_path(old).expect("path exists");
            new_order.iter().position(|p| *p == new).expect("operator preserved") + 1
        })
        .collect();
    let ct_node = arch.ct_node.map(|i| index_map[i - 1]);
    (Architecture { root: tree.node, ct_node }, index_map)
}

/// Canonical render of a bare tree.
pub fn canonical_render(node: &ArchNode) -> String {
    CanonTree::build(node).render
}

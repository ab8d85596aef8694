//! Expression-tree data model and node numbering.

use std::collections::VecDeque;
use std::fmt;

use super::{DslError, OpKind};

/// Child-index path from the root; the empty path addresses the root.
pub type NodePath = Vec<usize>;

/// One node of an architecture tree. Child count always equals the
/// operator's arity.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ArchNode {
    pub op: OpKind,
    pub children: Vec<ArchNode>,
}

impl ArchNode {
    /// Builds a node, checking the child count against the operator arity.
    pub fn new(op: OpKind, children: Vec<ArchNode>) -> Result<Self, DslError> {
        if children.len() != op.arity() {
            return Err(DslError::Arity {
                pos: 0,
                op: op.token().to_string(),
                expected: op.arity(),
                found: children.len(),
            });
        }
        Ok(ArchNode { op, children })
    }

    pub fn leaf(op: OpKind) -> Self {
        assert!(op.is_source(), "{op} is not a source leaf");
        ArchNode { op, children: Vec::new() }
    }

    pub fn unary(op: OpKind, a: ArchNode) -> Self {
        assert_eq!(op.arity(), 1, "{op} is not unary");
        ArchNode { op, children: vec![a] }
    }

    pub fn binary(op: OpKind, a: ArchNode, b: ArchNode) -> Self {
        assert_eq!(op.arity(), 2, "{op} is not binary");
        ArchNode { op, children: vec![a, b] }
    }

    pub fn gate3(x: ArchNode, y: ArchNode, f: ArchNode) -> Self {
        ArchNode { op: OpKind::Gate3, children: vec![x, y, f] }
    }

    pub fn is_leaf(&self) -> bool {
        self.op.is_source()
    }

    /// Number of operator nodes (source leaves excluded).
    pub fn operator_count(&self) -> usize {
        let own = usize::from(self.op.is_operator());
        own + self.children.iter().map(ArchNode::operator_count).sum::<usize>()
    }

    pub fn contains(&self, kind: OpKind) -> bool {
        self.op == kind || self.children.iter().any(|c| c.contains(kind))
    }

    /// Longest chain of operator-to-operator edges below this node.
    pub fn height(&self) -> usize {
        self.children
            .iter()
            .filter(|c| c.op.is_operator())
            .map(|c| 1 + c.height())
            .max()
            .unwrap_or(0)
    }

    /// Largest distance from this node to any node beneath it, leaves included.
    pub fn depth(&self) -> usize {
        self.children.iter().map(|c| 1 + c.depth()).max().unwrap_or(0)
    }

    pub fn at(&self, path: &[usize]) -> Option<&ArchNode> {
        let mut node = self;
        for &i in path {
            node = node.children.get(i)?;
        }
        Some(node)
    }

    pub fn at_mut(&mut self, path: &[usize]) -> Option<&mut ArchNode> {
        let mut node = self;
        for &i in path {
            node = node.children.get_mut(i)?;
        }
        Some(node)
    }

    /// Visits every node in pre-order (parent first, children left to right).
    pub fn walk<'a>(&'a self, f: &mut impl FnMut(&'a ArchNode, &[usize])) {
        fn go<'a>(n: &'a ArchNode, path: &mut Vec<usize>, f: &mut impl FnMut(&'a ArchNode, &[usize])) {
            f(n, path);
            for (i, c) in n.children.iter().enumerate() {
                path.push(i);
                go(c, path, f);
                path.pop();
            }
        }
        go(self, &mut Vec::new(), f);
    }

    /// Pre-order sequence of node kinds. This is also the order in which
    /// an incremental generator fills the tree.
    pub fn preorder_kinds(&self) -> Vec<OpKind> {
        let mut out = Vec::new();
        self.walk(&mut |n, _| out.push(n.op));
        out
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        self.render_into(&mut s);
        s
    }

    fn render_into(&self, out: &mut String) {
        out.push_str(self.op.token());
        if self.children.is_empty() {
            return;
        }
        out.push('(');
        for (i, c) in self.children.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            c.render_into(out);
        }
        out.push(')');
    }
}

impl fmt::Display for ArchNode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

/// Paths of all operator nodes in numbering order: index `i` of the
/// returned vector holds the node numbered `i + 1`.
///
/// Levels are numbered from the deepest up to the root, left to right
/// within a level, so the root always receives the largest number.
pub fn numbering(root: &ArchNode) -> Vec<NodePath> {
    let mut levels: Vec<Vec<NodePath>> = Vec::new();
    let mut queue: VecDeque<(NodePath, &ArchNode)> = VecDeque::new();
    queue.push_back((Vec::new(), root));
    while let Some((path, node)) = queue.pop_front() {
        if node.op.is_source() {
            continue;
        }
        let depth = path.len();
        if levels.len() <= depth {
            levels.resize_with(depth + 1, Vec::new);
        }
        for (i, c) in node.children.iter().enumerate() {
            let mut p = path.clone();
            p.push(i);
            queue.push_back((p, c));
        }
        levels[depth].push(path);
    }
    levels.into_iter().rev().flatten().collect()
}

/// A cell definition: the tree producing `h_t` plus the optional node
/// (1-based, see [`numbering`]) whose value becomes `c_t`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Architecture {
    pub root: ArchNode,
    pub ct_node: Option<usize>,
}

impl Architecture {
    pub fn new(root: ArchNode) -> Self {
        Architecture { root, ct_node: None }
    }

    /// Attaches a `c_t` tap, validating range and the `c_tm1` recurrence.
    pub fn with_ct(root: ArchNode, ct_node: usize) -> Result<Self, DslError> {
        let arch = Architecture { root, ct_node: Some(ct_node) };
        arch.validate_ct()?;
        Ok(arch)
    }

    pub(crate) fn validate_ct(&self) -> Result<(), DslError> {
        let Some(index) = self.ct_node else { return Ok(()) };
        let count = self.root.operator_count();
        if index == 0 || index > count {
            return Err(DslError::CtOutOfRange { index, count });
        }
        let sub = self.ct_subtree().expect("index in range");
        if !sub.contains(OpKind::Cm1) {
            return Err(DslError::CtWithoutCm1 { index });
        }
        Ok(())
    }

    pub fn numbering(&self) -> Vec<NodePath> {
        numbering(&self.root)
    }

    pub fn path_of(&self, index: usize) -> Option<NodePath> {
        if index == 0 {
            return None;
        }
        numbering(&self.root).into_iter().nth(index - 1)
    }

    pub fn index_of(&self, path: &[usize]) -> Option<usize> {
        numbering(&self.root).iter().position(|p| p == path).map(|i| i + 1)
    }

    pub fn ct_path(&self) -> Option<NodePath> {
        self.ct_node.and_then(|i| self.path_of(i))
    }

    pub fn ct_subtree(&self) -> Option<&ArchNode> {
        let path = self.ct_path()?;
        self.root.at(&path)
    }

    pub fn uses(&self, kind: OpKind) -> bool {
        self.root.contains(kind)
    }

    /// Text form; the tap, when present, is appended as `|n`.
    pub fn render(&self) -> String {
        match self.ct_node {
            Some(n) => format!("{}|{}", self.root.render(), n),
            None => self.root.render(),
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use OpKind::*;

    fn mm(a: ArchNode) -> ArchNode {
        ArchNode::unary(MM, a)
    }

    #[test]
    fn arity_checked() {
        assert!(ArchNode::new(Add, vec![ArchNode::leaf(X)]).is_err());
        assert!(ArchNode::new(Tanh, vec![ArchNode::leaf(X)]).is_ok());
    }

    #[test]
    fn numbering_runs_bottom_up_left_to_right() {
        // Tanh(Add(MM(x_t), MM(h_tm1)))
        let t = ArchNode::unary(Tanh, ArchNode::binary(Add, mm(ArchNode::leaf(X)), mm(ArchNode::leaf(Hm1))));
        let order = numbering(&t);
        assert_eq!(order, vec![vec![0, 0], vec![0, 1], vec![0], vec![]]);
    }

    #[test]
    fn render_has_no_spaces() {
        let t = ArchNode::binary(Add, ArchNode::leaf(X), ArchNode::leaf(Hm1));
        assert_eq!(t.render(), "Add(x_t,h_tm1)");
        let a = Architecture { root: t, ct_node: Some(1) };
        assert_eq!(a.render(), "Add(x_t,h_tm1)|1");
    }

    #[test]
    fn ct_validation() {
        let t = ArchNode::unary(Tanh, ArchNode::binary(Add, mm(ArchNode::leaf(Cm1)), mm(ArchNode::leaf(X))));
        assert!(Architecture::with_ct(t.clone(), 1).is_ok());
        assert_eq!(Architecture::with_ct(t.clone(), 2), Err(DslError::CtWithoutCm1 { index: 2 }));
        assert_eq!(Architecture::with_ct(t, 5), Err(DslError::CtOutOfRange { index: 5, count: 4 }));
    }
}

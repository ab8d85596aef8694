//! Operator and source-leaf kinds of the cell DSL.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Every node kind that may appear in an architecture tree.
///
/// Operators carry children; source leaves (`X`, `Xm1`, `Hm1`, `Cm1`,
/// `PosEnc`) have arity zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    MM,
    Sigmoid,
    Tanh,
    ReLU,
    Sin,
    Cos,
    LayerNorm,
    SeLU,
    Add,
    Mult,
    Sub,
    Div,
    Gate3,
    X,
    Xm1,
    Hm1,
    Cm1,
    PosEnc,
}

impl OpKind {
    pub const ALL: [OpKind; 18] = [
        OpKind::MM,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::ReLU,
        OpKind::Sin,
        OpKind::Cos,
        OpKind::LayerNorm,
        OpKind::SeLU,
        OpKind::Add,
        OpKind::Mult,
        OpKind::Sub,
        OpKind::Div,
        OpKind::Gate3,
        OpKind::X,
        OpKind::Xm1,
        OpKind::Hm1,
        OpKind::Cm1,
        OpKind::PosEnc,
    ];

    pub const OPERATORS: [OpKind; 13] = [
        OpKind::MM,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::ReLU,
        OpKind::Sin,
        OpKind::Cos,
        OpKind::LayerNorm,
        OpKind::SeLU,
        OpKind::Add,
        OpKind::Mult,
        OpKind::Sub,
        OpKind::Div,
        OpKind::Gate3,
    ];

    pub const SOURCES: [OpKind; 5] = [OpKind::X, OpKind::Xm1, OpKind::Hm1, OpKind::Cm1, OpKind::PosEnc];

    pub fn arity(self) -> usize {
        use OpKind::*;
        match self {
            MM | Sigmoid | Tanh | ReLU | Sin | Cos | LayerNorm | SeLU => 1,
            Add | Mult | Sub | Div => 2,
            Gate3 => 3,
            X | Xm1 | Hm1 | Cm1 | PosEnc => 0,
        }
    }

    pub fn is_source(self) -> bool {
        self.arity() == 0
    }

    pub fn is_operator(self) -> bool {
        !self.is_source()
    }

    pub fn is_commutative(self) -> bool {
        matches!(self, OpKind::Add | OpKind::Mult)
    }

    pub fn is_order_sensitive(self) -> bool {
        matches!(self, OpKind::Sub | OpKind::Div | OpKind::Gate3)
    }

    /// Members added by the extended DSL.
    pub fn is_extended(self) -> bool {
        use OpKind::*;
        matches!(self, Sub | Div | Sin | Cos | PosEnc | LayerNorm | SeLU)
    }

    /// Elementwise nonlinearities (everything unary except `MM` and `LayerNorm`).
    pub fn is_activation(self) -> bool {
        use OpKind::*;
        matches!(self, Sigmoid | Tanh | ReLU | Sin | Cos | SeLU)
    }

    /// Canonical token used by the grammar.
    pub fn token(self) -> &'static str {
        use OpKind::*;
        match self {
            MM => "MM",
            Sigmoid => "Sigmoid",
            Tanh => "Tanh",
            ReLU => "ReLU",
            Sin => "Sin",
            Cos => "Cos",
            LayerNorm => "LayerNorm",
            SeLU => "SeLU",
            Add => "Add",
            Mult => "Mult",
            Sub => "Sub",
            Div => "Div",
            Gate3 => "Gate3",
            X => "x_t",
            Xm1 => "x_tm1",
            Hm1 => "h_tm1",
            Cm1 => "c_tm1",
            PosEnc => "posenc",
        }
    }

    pub fn from_token(token: &str) -> Option<OpKind> {
        OpKind::ALL.iter().copied().find(|k| k.token() == token)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arities() {
        for op in [OpKind::MM, OpKind::Sigmoid, OpKind::Tanh, OpKind::ReLU, OpKind::Sin, OpKind::Cos] {
            assert_eq!(op.arity(), 1);
        }
        for op in [OpKind::Add, OpKind::Mult, OpKind::Sub, OpKind::Div] {
            assert_eq!(op.arity(), 2);
        }
        assert_eq!(OpKind::Gate3.arity(), 3);
        for op in OpKind::SOURCES {
            assert_eq!(op.arity(), 0);
        }
    }

    #[test]
    fn flag_sets_are_exact() {
        let commutative: Vec<_> = OpKind::ALL.iter().copied().filter(|k| k.is_commutative()).collect();
        assert_eq!(commutative, vec![OpKind::Add, OpKind::Mult]);
        let ordered: Vec<_> = OpKind::ALL.iter().copied().filter(|k| k.is_order_sensitive()).collect();
        assert_eq!(ordered, vec![OpKind::Sub, OpKind::Div, OpKind::Gate3]);
        let extended = OpKind::ALL.iter().filter(|k| k.is_extended()).count();
        assert_eq!(extended, 7);
    }

    #[test]
    fn tokens_round_trip() {
        for op in OpKind::ALL {
            assert_eq!(OpKind::from_token(op.token()), Some(op));
        }
    }
}

//! Double-precision tensors, reverse-mode differentiation and optimizers.

pub mod checkpoint;
mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use gradcheck::{gradient_check, gradient_check_strided, GradCheck, FD_STEP};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use params::{ParamId, ParamSet, Parameter};
pub use tape::{
    guarded_denominator, sigmoid, Tape, Unary, Var, DIV_GUARD, LAYER_NORM_EPS, SELU_ALPHA, SELU_LAMBDA,
};
pub use tensor::{positional_encoding, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("divergence: {0}")]
    Divergence(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Forward primitives addressable by [`primitive_forward`].
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// Params: `[W (out×in), b (out)]`.
    MatMul,
    Unary(Unary),
    /// Params: `[gain, bias]`.
    LayerNorm,
    Add,
    Mult,
    Sub,
    Div,
    /// Inputs `[x, y, f]`: `f∘x + (1−f)∘y`.
    Gate3,
    Softmax,
    /// Inputs `[logits]`; returns the mean loss as a scalar.
    CrossEntropy { targets: Vec<usize> },
    ConcatCols,
    /// Train-mode inverted dropout with a seeded mask.
    Dropout { p: f64, seed: u64 },
    /// Params: `[table]`; inputs ignored.
    Embedding { ids: Vec<usize> },
}

/// Evaluates one primitive on concrete tensors.
pub fn primitive_forward(op: &Primitive, inputs: &[Tensor], params: &[Tensor]) -> Result<Tensor, EngineError> {
    for (i, t) in inputs.iter().chain(params).enumerate() {
        if !t.is_finite() {
            return Err(EngineError::NonFinite(format!("operand {i} of {op:?}")));
        }
    }
    let need = |n: usize, have: usize, what: &str| {
        if have < n {
            Err(EngineError::Shape(format!("{op:?} needs {n} {what}, got {have}")))
        } else {
            Ok(())
        }
    };
    let mut t = Tape::new();
    let ins: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
    let ps: Vec<Var> = params.iter().map(|x| t.constant(x.clone())).collect();
    let out = match op {
        Primitive::MatMul => {
            need(1, ins.len(), "inputs")?;
            need(2, ps.len(), "params")?;
            t.affine(ins[0], ps[0], ps[1])?
        }
        Primitive::Unary(u) => {
            need(1, ins.len(), "inputs")?;
            t.unary(ins[0], *u)
        }
        Primitive::LayerNorm => {
            need(1, ins.len(), "inputs")?;
            need(2, ps.len(), "params")?;
            t.layer_norm(ins[0], ps[0], ps[1])?
        }
        Primitive::Add | Primitive::Mult | Primitive::Sub | Primitive::Div => {
            need(2, ins.len(), "inputs")?;
            match op {
                Primitive::Add => t.add(ins[0], ins[1])?,
                Primitive::Mult => t.mul(ins[0], ins[1])?,
                Primitive::Sub => t.sub(ins[0], ins[1])?,
                _ => t.div(ins[0], ins[1])?,
            }
        }
        Primitive::Gate3 => {
            need(3, ins.len(), "inputs")?;
            t.gate3(ins[0], ins[1], ins[2])?
        }
        Primitive::Softmax => {
            need(1, ins.len(), "inputs")?;
            t.softmax(ins[0])
        }
        Primitive::CrossEntropy { targets } => {
            need(1, ins.len(), "inputs")?;
            t.cross_entropy(ins[0], targets)?
        }
        Primitive::ConcatCols => t.concat_cols(&ins)?,
        Primitive::Dropout { p, seed } => {
            need(1, ins.len(), "inputs")?;
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            t.dropout(ins[0], *p, true, &mut rng)?
        }
        Primitive::Embedding { ids } => {
            need(1, ps.len(), "params")?;
            t.embedding(ps[0], ids)?
        }
    };
    Ok(t.value(out).clone())
}

#[cfg(test)]
mod tests;

//! Hand-written reference cells for oracle tests.
//!
//! Each function evaluates one timestep on plain vectors, reading the
//! weights of the compiled builtin by tree position, and is written from
//! the textbook equations rather than from the DSL tree.

use crate::dsl::Architecture;
use crate::engine::{sigmoid, ParamSet};

use super::{bias_name, weight_name};

/// Affine maps addressed by tree path.
pub struct Weights<'a> {
    arch: &'a Architecture,
    params: &'a ParamSet,
    prefix: &'a str,
}

impl<'a> Weights<'a> {
    pub fn new(arch: &'a Architecture, params: &'a ParamSet, prefix: &'a str) -> Self {
        Weights { arch, params, prefix }
    }

    /// `W v + b` of the MM node at `path`.
    pub fn mm(&self, path: &[usize], v: &[f64]) -> Vec<f64> {
        let n = self.arch.index_of(path).unwrap_or_else(|| panic!("no operator at {path:?}"));
        let w = &self.params.by_name(&weight_name(self.prefix, n)).expect("weight").value;
        let b = &self.params.by_name(&bias_name(self.prefix, n)).expect("bias").value;
        (0..w.rows()).map(|r| w.row_slice(r).iter().zip(v).map(|(a, x)| a * x).sum::<f64>() + b.data()[r]).collect()
    }
}

fn zip(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}

fn map(a: &[f64], f: impl Fn(f64) -> f64) -> Vec<f64> {
    a.iter().map(|&x| f(x)).collect()
}

/// GRU: r = σ(W_r x + U_r h), z = σ(W_z x + U_z h),
/// n = tanh(W_n x + r ∘ (U_n h)), h' = z ∘ n + (1 − z) ∘ h
/// (the Appendix A listing's gate convention).
pub fn gru_step(w: &Weights, x: &[f64], h: &[f64]) -> Vec<f64> {
    let r = map(&zip(&w.mm(&[0, 0, 1, 1, 0, 0], h), &w.mm(&[0, 0, 1, 1, 0, 1], x), |a, b| a + b), sigmoid);
    let z = map(&zip(&w.mm(&[2, 0, 0], h), &w.mm(&[2, 0, 1], x), |a, b| a + b), sigmoid);
    let n = map(&zip(&w.mm(&[0, 0, 0], x), &zip(&w.mm(&[0, 0, 1, 0], h), &r, |a, b| a * b), |a, b| a + b), f64::tanh);
    (0..h.len()).map(|i| z[i] * n[i] + (1.0 - z[i]) * h[i]).collect()
}

/// LSTM: i, f, o gates and candidate g; c' = f∘c + i∘g, h' = o∘tanh(c').
/// Returns `(h', c')`.
pub fn lstm_step(w: &Weights, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let pre = |p: &[usize]| {
        let mut a = p.to_vec();
        a.push(0);
        let mut b = p.to_vec();
        b.push(1);
        zip(&w.mm(&a, x), &w.mm(&b, h), |u, v| u + v)
    };
    let o = map(&pre(&[0, 0]), sigmoid);
    let f = map(&pre(&[1, 0, 0, 0, 0]), sigmoid);
    let i = map(&pre(&[1, 0, 1, 0, 0]), sigmoid);
    let g = map(&pre(&[1, 0, 1, 1, 0]), f64::tanh);
    let c2: Vec<f64> = (0..c.len()).map(|k| f[k] * c[k] + i[k] * g[k]).collect();
    let h2 = (0..c.len()).map(|k| o[k] * c2[k].tanh()).collect();
    (h2, c2)
}

/// BC3, §4.1 Equations 1–5 (each matrix product carries its bias):
/// f = σ(W^f x + U^f h); z = V^z(X^y c ∘ U^z x) ∘ W^z x;
/// c' = tanh(f ∘ W^g x + (1 − f) ∘ z); o = σ(W^o x + U^o h);
/// h' = o ∘ c' + (1 − o) ∘ h. Returns `(h', c')`.
pub fn bc3_step(w: &Weights, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let f = map(&zip(&w.mm(&[0, 0, 2, 0, 0], x), &w.mm(&[0, 0, 2, 0, 1], h), |a, b| a + b), sigmoid);
    let inner = zip(&w.mm(&[0, 0, 1, 0, 0, 0], c), &w.mm(&[0, 0, 1, 0, 0, 1], x), |a, b| a * b);
    let z = zip(&w.mm(&[0, 0, 1, 0], &inner), &w.mm(&[0, 0, 1, 1], x), |a, b| a * b);
    let wg = w.mm(&[0, 0, 0], x);
    let c2: Vec<f64> = (0..c.len()).map(|k| (f[k] * wg[k] + (1.0 - f[k]) * z[k]).tanh()).collect();
    let o = map(&zip(&w.mm(&[2, 0, 0], x), &w.mm(&[2, 0, 1], h), |a, b| a + b), sigmoid);
    let h2 = (0..c.len()).map(|k| o[k] * c2[k] + (1.0 - o[k]) * h[k]).collect();
    (h2, c2)
}

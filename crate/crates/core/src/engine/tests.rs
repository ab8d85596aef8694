use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(7)
}

fn rand_params(specs: &[(&str, &[usize])], bound: f64) -> ParamSet {
    let mut r = rng();
    let mut ps = ParamSet::new();
    for (name, shape) in specs {
        ps.add(*name, Tensor::uniform(shape, bound, &mut r));
    }
    ps
}

fn check<F>(mut ps: ParamSet, f: F) -> f64
where
    F: Fn(&mut Tape, &ParamSet) -> Result<Var, EngineError>,
{
    gradient_check(&mut ps, f).unwrap().max_rel_error
}

fn p(t: &mut Tape, ps: &ParamSet, name: &str) -> Var {
    t.param(ps, ps.id(name).unwrap())
}

#[test]
fn primitive_examples() {
    let row = |v: f64| Tensor::row(vec![v]);
    let g = primitive_forward(&Primitive::Gate3, &[row(2.0), row(4.0), row(0.5)], &[]).unwrap();
    assert_eq!(g.data(), &[3.0]);
    let a = Tensor::row(vec![1.0, -7.0]);
    let s = primitive_forward(&Primitive::Sub, &[a.clone(), a], &[]).unwrap();
    assert!(s.data().iter().all(|&v| v == 0.0));
    assert_eq!(primitive_forward(&Primitive::Unary(Unary::Sigmoid), &[row(0.0)], &[]).unwrap().data(), &[0.5]);
    assert_eq!(primitive_forward(&Primitive::Unary(Unary::Tanh), &[row(0.0)], &[]).unwrap().data(), &[0.0]);
}

#[test]
fn primitive_errors() {
    let bad = primitive_forward(&Primitive::Add, &[Tensor::row(vec![1.0]), Tensor::row(vec![1.0, 2.0])], &[]);
    assert!(matches!(bad, Err(EngineError::Shape(_))));
    let nan = primitive_forward(&Primitive::Unary(Unary::Tanh), &[Tensor::row(vec![f64::NAN])], &[]);
    assert!(matches!(nan, Err(EngineError::NonFinite(_))));
    let mm = primitive_forward(
        &Primitive::MatMul,
        &[Tensor::row(vec![1.0, 2.0])],
        &[Tensor::matrix(1, 3, vec![0.0; 3]), Tensor::vector(vec![0.0])],
    );
    assert!(mm.is_err());
}

#[test]
fn matmul_value() {
    let out = primitive_forward(
        &Primitive::MatMul,
        &[Tensor::row(vec![1.0, 2.0])],
        &[Tensor::matrix(2, 2, vec![1.0, 0.0, 3.0, -1.0]), Tensor::vector(vec![0.5, 0.25])],
    )
    .unwrap();
    assert_eq!(out.data(), &[1.5, 1.25]);
}

#[test]
fn grad_mm() {
    let ps = rand_params(&[("x", &[3, 4]), ("w", &[5, 4]), ("b", &[5])], 1.0);
    let e = check(ps, |t, ps| {
        let (x, w, b) = (p(t, ps, "x"), p(t, ps, "w"), p(t, ps, "b"));
        let y = t.affine(x, w, b)?;
        Ok(t.sum(y))
    });
    assert!(e < 1e-6, "{e}");
}

#[test]
fn grad_unaries() {
    for u in [Unary::Sigmoid, Unary::Tanh, Unary::Relu, Unary::Sin, Unary::Cos, Unary::Selu] {
        let mut ps = rand_params(&[("a", &[2, 5]), ("w", &[2, 5])], 2.0);
        // Keep ReLU/SeLU away from the kink.
        ps.iter_mut().next().unwrap().value.data_mut().iter_mut().for_each(|v| {
            if v.abs() < 0.05 {
                *v += 0.2
            }
        });
        let e = check(ps, move |t, ps| {
            let (a, w) = (p(t, ps, "a"), p(t, ps, "w"));
            let y = t.unary(a, u);
            let z = t.mul(y, w)?;
            Ok(t.sum(z))
        });
        assert!(e < 1e-6, "{u:?}: {e}");
    }
}

#[test]
fn grad_binaries_and_gate3() {
    let mut ps = rand_params(&[("a", &[2, 3]), ("b", &[2, 3]), ("c", &[2, 3]), ("w", &[2, 3])], 1.0);
    // Keep Div denominators out of the guard band.
    ps.value_mut("b").unwrap().data_mut().iter_mut().for_each(|v| *v = v.signum() * (v.abs() + 0.5));
    let e = check(ps, |t, ps| {
        let (a, b, c, w) = (p(t, ps, "a"), p(t, ps, "b"), p(t, ps, "c"), p(t, ps, "w"));
        let s = t.add(a, b)?;
        let m = t.mul(s, c)?;
        let d = t.sub(m, a)?;
        let q = t.div(d, b)?;
        let f = t.sigmoid(c);
        let g = t.gate3(q, a, f)?;
        let z = t.mul(g, w)?;
        Ok(t.sum(z))
    });
    assert!(e < 1e-6, "{e}");
}

#[test]
fn grad_gate3_sigmoid_example() {
    let ps = rand_params(&[("a", &[1, 4]), ("b", &[1, 4]), ("c", &[1, 4])], 1.0);
    let e = check(ps, |t, ps| {
        let (a, b, c) = (p(t, ps, "a"), p(t, ps, "b"), p(t, ps, "c"));
        let f = t.sigmoid(c);
        let g = t.gate3(a, b, f)?;
        Ok(t.sum(g))
    });
    assert!(e < 1e-6, "{e}");
}

#[test]
fn grad_layer_norm() {
    let ps = rand_params(&[("x", &[3, 6]), ("g", &[6]), ("b", &[6]), ("w", &[3, 6])], 1.0);
    let e = check(ps, |t, ps| {
        let (x, g, b, w) = (p(t, ps, "x"), p(t, ps, "g"), p(t, ps, "b"), p(t, ps, "w"));
        let y = t.layer_norm(x, g, b)?;
        let z = t.mul(y, w)?;
        Ok(t.sum(z))
    });
    assert!(e < 1e-4, "{e}");
}

#[test]
fn grad_softmax_ce_concat_slice_embedding() {
    let ps = rand_params(&[("emb", &[5, 3]), ("w", &[4, 6]), ("b", &[4]), ("v", &[2, 3])], 1.0);
    let e = check(ps, |t, ps| {
        let emb = p(t, ps, "emb");
        let x = t.embedding(emb, &[1, 4])?;
        let v = p(t, ps, "v");
        let xc = t.concat_cols(&[x, v])?;
        let (w, b) = (p(t, ps, "w"), p(t, ps, "b"));
        let logits = t.affine(xc, w, b)?;
        let ce = t.cross_entropy(logits, &[0, 3])?;
        let sm = t.softmax(logits);
        let part = t.slice_cols(sm, 1, 2)?;
        let sq = t.mul(part, part)?;
        let s = t.sum(sq);
        let total = t.add(ce, s)?;
        let lsm = t.log_softmax_masked(logits, &[true, false, true, true])?;
        let pk = t.pick(lsm, 2);
        t.add(total, pk)
    });
    assert!(e < 1e-6, "{e}");
}

#[test]
fn grad_concat_rows_sum_list_scale() {
    let ps = rand_params(&[("a", &[2, 3]), ("b", &[1, 3]), ("w", &[3, 3])], 1.0);
    let e = check(ps, |t, ps| {
        let (a, b, w) = (p(t, ps, "a"), p(t, ps, "b"), p(t, ps, "w"));
        let r = t.concat_rows(&[a, b])?;
        let s = t.sum_list(&[r, r, w])?;
        let s = t.scale(s, -0.7);
        let y = t.tanh(s);
        Ok(t.mean(y))
    });
    assert!(e < 1e-6, "{e}");
}

#[test]
fn non_finite_gradient_names_param() {
    let mut ps = ParamSet::new();
    ps.add("w", Tensor::row(vec![1.0]));
    let err = gradient_check(&mut ps, |t, ps| {
        let w = p(t, ps, "w");
        let k = t.constant(Tensor::row(vec![f64::INFINITY]));
        let y = t.mul(w, k)?;
        Ok(t.sum(y))
    })
    .unwrap_err();
    assert_eq!(err, EngineError::NonFiniteGradient("w".into()));
}

#[test]
fn dropout_statistics() {
    let n = 200_000;
    let mut t = Tape::new();
    let x = t.constant(Tensor::full(&[1, n], 1.0));
    let mut r = rng();
    let eval = t.dropout(x, 0.3, false, &mut r).unwrap();
    assert_eq!(eval, x);
    let y = t.dropout(x, 0.3, true, &mut r).unwrap();
    let mean = t.value(y).sum() / n as f64;
    assert!((mean - 1.0).abs() < 0.01, "{mean}");
}

#[test]
fn exp_gradient() {
    let mut ps = ParamSet::new();
    ps.add("a", Tensor::row(vec![0.3, -1.2, 0.7]));
    let r = gradient_check(&mut ps, |t, ps| {
        let a = t.param(ps, ps.id("a").unwrap());
        let e = t.exp(a);
        let m = t.mul(e, a)?;
        Ok(t.sum(m))
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

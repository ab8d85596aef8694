use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::reference::{self, Weights};
use super::*;
use crate::dsl::{builtin, canonicalize_with_map, parse};

fn randomize(params: &mut ParamSet, seed: u64, bound: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in params.iter_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-bound..bound));
    }
}

fn rand_row(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn state(h: &[f64], c: Option<&[f64]>, inp: usize) -> CellState {
    CellState {
        h: Tensor::row(h.to_vec()),
        c: c.map(|c| Tensor::row(c.to_vec())),
        x_prev: Tensor::zeros(&[1, inp]),
        t: 0,
    }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn lstm_fuses_to_two_source_mms() {
    let lstm = builtin("lstm").unwrap();
    let (fused, _) = compile(&lstm, &CompileOptions::new(4, 4, true)).unwrap();
    assert_eq!(fused.source_mm_instructions(), 2);
    assert_eq!(fused.fused_groups.values().map(Vec::len).collect::<Vec<_>>(), vec![4, 4]);
    let (plain, _) = compile(&lstm, &CompileOptions::new(4, 4, false)).unwrap();
    assert_eq!(plain.source_mm_instructions(), 8);
}

#[test]
fn gru_matches_reference() {
    let gru = builtin("gru").unwrap();
    for fuse in [true, false] {
        let (prog, mut params) = compile(&gru, &CompileOptions::new(3, 5, fuse)).unwrap();
        randomize(&mut params, 11, 0.8);
        let w = Weights::new(&gru, &params, "");
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let (x, h) = (rand_row(&mut rng, 3), rand_row(&mut rng, 5));
            let (out, _) = prog.step(&params, &Tensor::row(x.clone()), &state(&h, None, 3)).unwrap();
            assert!(max_diff(out.data(), &reference::gru_step(&w, &x, &h)) < 1e-10);
        }
    }
}

#[test]
fn lstm_matches_reference() {
    let lstm = builtin("lstm").unwrap();
    let (prog, mut params) = compile(&lstm, &CompileOptions::new(4, 4, true)).unwrap();
    randomize(&mut params, 12, 0.8);
    let w = Weights::new(&lstm, &params, "");
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..100 {
        let (x, h, c) = (rand_row(&mut rng, 4), rand_row(&mut rng, 4), rand_row(&mut rng, 4));
        let (out, next) = prog.step(&params, &Tensor::row(x.clone()), &state(&h, Some(&c), 4)).unwrap();
        let (rh, rc) = reference::lstm_step(&w, &x, &h, &c);
        assert!(max_diff(out.data(), &rh) < 1e-10);
        assert!(max_diff(next.c.unwrap().data(), &rc) < 1e-10);
    }
}

#[test]
fn bc3_matches_equations() {
    let bc3 = builtin("bc3").unwrap();
    let (prog, mut params) = compile(&bc3, &CompileOptions::new(4, 4, true)).unwrap();
    randomize(&mut params, 13, 0.8);
    let w = Weights::new(&bc3, &params, "");
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let (x, h, c) = (rand_row(&mut rng, 4), rand_row(&mut rng, 4), rand_row(&mut rng, 4));
        let (out, next) = prog.step(&params, &Tensor::row(x.clone()), &state(&h, Some(&c), 4)).unwrap();
        let (rh, rc) = reference::bc3_step(&w, &x, &h, &c);
        assert!(max_diff(out.data(), &rh) < 1e-10);
        assert!(max_diff(next.c.unwrap().data(), &rc) < 1e-10);
    }
}

fn random_sequence(seed: u64, len: usize, batch: usize, width: usize) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| Tensor::matrix(batch, width, (0..batch * width).map(|_| rng.gen_range(-1.0..1.0)).collect())).collect()
}

#[test]
fn fused_equals_unfused_on_builtins() {
    for name in crate::dsl::BUILTIN_NAMES {
        let arch = builtin(name).unwrap();
        let (f, mut params) = compile(&arch, &CompileOptions::new(6, 6, true)).unwrap();
        let (u, params_u) = compile(&arch, &CompileOptions::new(6, 6, false)).unwrap();
        assert_eq!(params, params_u, "{name}: ParamSets must coincide");
        randomize(&mut params, 3, 0.5);
        let xs = random_sequence(9, 50, 2, 6);
        let a = f.run_sequence(&params, &xs, &f.zero_state(2)).unwrap();
        let b = u.run_sequence(&params, &xs, &u.zero_state(2)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!(x.max_abs_diff(y) < 1e-10, "{name}");
        }
    }
}

#[test]
fn length_one_sequence_is_one_step_and_deterministic() {
    let arch = builtin("gru").unwrap();
    let (p, params) = compile(&arch, &CompileOptions::new(3, 3, true)).unwrap();
    let xs = random_sequence(1, 1, 1, 3);
    let s0 = p.zero_state(1);
    let seq = p.run_sequence(&params, &xs, &s0).unwrap();
    let (h, _) = p.step(&params, &xs[0], &s0).unwrap();
    assert_eq!(seq[0], h);
    let xs = random_sequence(2, 20, 2, 3);
    assert_eq!(p.run_sequence(&params, &xs, &p.zero_state(2)).unwrap(), p.run_sequence(&params, &xs, &p.zero_state(2)).unwrap());
}

#[test]
fn refusals() {
    let opts = CompileOptions::new(3, 3, true);
    assert_eq!(compile(&parse("x_t").unwrap(), &opts).unwrap_err(), CompileError::NoRecurrence);
    assert_eq!(compile(&parse("Tanh(Add(MM(x_t),MM(c_tm1)))").unwrap(), &opts).unwrap_err(), CompileError::CtWithoutTap);
    let mut a = parse("Tanh(Add(MM(x_t),MM(c_tm1)))").unwrap();
    a.ct_node = Some(a.root.operator_count());
    assert_eq!(compile(&a, &opts).unwrap_err(), CompileError::CtAtRoot);
    let wide = CompileOptions::new(2, 3, true);
    assert!(matches!(compile(&parse("Tanh(Add(x_t,MM(h_tm1)))").unwrap(), &wide), Err(CompileError::Shape(_))));
    assert!(compile(&parse("Tanh(Add(MM(x_t),MM(h_tm1)))").unwrap(), &wide).is_ok());
}

#[test]
fn zero_weights_give_zero() {
    let arch = builtin("tanh_rnn").unwrap();
    let (p, mut params) = compile(&arch, &CompileOptions::new(3, 4, true)).unwrap();
    params.iter_mut().for_each(|q| q.value.fill(0.0));
    let (h, next) = p.step(&params, &Tensor::row(vec![0.3, -2.0, 5.0]), &p.zero_state(1)).unwrap();
    assert!(h.data().iter().all(|&v| v == 0.0));
    assert_eq!(next.t, 1);
}

#[test]
fn saturated_gate_selects_first_argument() {
    let arch = parse("Gate3(MM(x_t),MM(h_tm1),Sigmoid(MM(x_tm1)))").unwrap();
    let (p, mut params) = compile(&arch, &CompileOptions::new(3, 3, false)).unwrap();
    randomize(&mut params, 4, 0.5);
    let gate_mm = arch.index_of(&[2, 0]).unwrap();
    params.value_mut(&weight_name("", gate_mm)).unwrap().fill(0.0);
    params.value_mut(&bias_name("", gate_mm)).unwrap().fill(1e3);
    let x = Tensor::row(vec![0.1, 0.2, -0.3]);
    let mut s = p.zero_state(1);
    s.h = Tensor::row(vec![1.0, -1.0, 0.5]);
    let (h, _) = p.step(&params, &x, &s).unwrap();
    let first = reference::Weights::new(&arch, &params, "").mm(&[0], x.data());
    assert_eq!(h.data(), first.as_slice());
}

#[test]
fn canonicalization_preserves_outputs() {
    let arch = parse("Mult(Sigmoid(Add(MM(x_t),MM(h_tm1))),Tanh(@ct(Add(Mult(MM(c_tm1),MM(x_t)),Sub(MM(h_tm1),x_t)))))").unwrap();
    let (canon, map) = canonicalize_with_map(&arch);
    assert_ne!(canon.root, arch.root);
    let (p, mut params) = compile(&arch, &CompileOptions::new(3, 3, true)).unwrap();
    randomize(&mut params, 8, 0.7);
    let (q, mut cparams) = compile(&canon, &CompileOptions::new(3, 3, true)).unwrap();
    for (old, &new) in map.iter().enumerate() {
        for name in [weight_name as fn(&str, usize) -> String, bias_name] {
            if let Some(v) = params.by_name(&name("", old + 1)).map(|p| p.value.clone()) {
                *cparams.value_mut(&name("", new)).unwrap() = v;
            }
        }
    }
    let xs = random_sequence(3, 10, 2, 3);
    let a = p.run_sequence(&params, &xs, &p.zero_state(2)).unwrap();
    let b = q.run_sequence(&cparams, &xs, &q.zero_state(2)).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!(x.max_abs_diff(y) < 1e-10);
    }
}

#[test]
fn divergence_names_instruction() {
    let arch = parse("Tanh(Mult(MM(x_t),Mult(MM(h_tm1),MM(x_tm1))))").unwrap();
    let (p, mut params) = compile(&arch, &CompileOptions::new(2, 2, false)).unwrap();
    params.iter_mut().for_each(|q| q.value.fill(1e200));
    let mut s = p.zero_state(1);
    s.h = Tensor::row(vec![1.0, 1.0]);
    let err = p.step(&params, &Tensor::row(vec![1.0, 1.0]), &s).unwrap_err();
    match err {
        CompileError::Divergence { t, instruction, .. } => {
            assert_eq!(t, 0);
            assert!(matches!(p.instructions[instruction].prim, Prim::Mult));
        }
        e => panic!("unexpected {e:?}"),
    }
}

#[test]
fn end_to_end_gradients() {
    for name in ["tanh_rnn", "gru", "bc3", "lstm"] {
        let arch = builtin(name).unwrap();
        let (p, mut params) = compile(&arch, &CompileOptions::new(3, 3, true)).unwrap();
        randomize(&mut params, 21, 0.7);
        let xs = random_sequence(4, 4, 2, 3);
        let r = crate::engine::gradient_check(&mut params, |tape, ps| {
            let xv: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
            let init = p.zero_tape_state(tape, 2);
            let (hs, _) = p.run_sequence_tape(tape, ps, &xv, &init).map_err(|e| EngineError::Shape(e.to_string()))?;
            let total = tape.sum_list(&hs)?;
            Ok(tape.sum(total))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{name}: {r:?}");
    }
}

#[test]
fn posenc_and_layer_norm_cells_run() {
    let arch = parse("LayerNorm(Add(MM(posenc),Add(MM(x_t),SeLU(MM(h_tm1)))))").unwrap();
    let (p, params) = compile(&arch, &CompileOptions::new(3, 4, true)).unwrap();
    let xs = random_sequence(5, 6, 2, 3);
    let hs = p.run_sequence(&params, &xs, &p.zero_state(2)).unwrap();
    assert_eq!(hs.len(), 6);
    assert!(params.by_name(&ln_gain_name("", arch.root.operator_count())).is_some());
}

#[test]
fn trace_csv_rows() {
    let arch = builtin("tanh_rnn").unwrap();
    let (p, params) = compile(&arch, &CompileOptions::new(2, 3, true)).unwrap();
    let hs = p.run_sequence(&params, &random_sequence(1, 7, 1, 2), &p.zero_state(1)).unwrap();
    let mut buf = Vec::new();
    write_trace_csv(&hs, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "t,h0,h1,h2");
    assert_eq!(lines.len(), 8);
}

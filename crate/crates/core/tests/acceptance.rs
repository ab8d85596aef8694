//! Acceptance criteria 1–10 of the specification. Each test prints one
//! `ACCEPTANCE <n> PASS|FAIL: ...` line and asserts its runtime budget.
//! Tests hold a global lock so budgets are measured without contention.

use std::collections::HashSet;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use archdsl_core::compiler::reference::{self, Weights};
use archdsl_core::compiler::{
    bias_name, check_cell_gradients, compile, ln_bias_name, ln_gain_name, weight_name, CellState, CompileOptions,
};
use archdsl_core::dsl::{
    arch_id, builtin, canonical_render, canonicalize, canonicalize_with_map, parse, ArchNode, Architecture, OpKind,
};
use archdsl_core::engine::{gradient_check, EngineError, ParamSet, Tape, Tensor, Unary, Var};
use archdsl_core::evaluator::{make_task, ArchPerfRecord, Status, TaskSpec, TrainConfig};
use archdsl_core::orchestrator::report::{hidden_dump_csv, ops_over_time, ops_over_time_csv, search_curve};
use archdsl_core::orchestrator::{run_random_search, run_rl_search, RecordStore, RunConfig, SearchConfig, SearchMode};
use archdsl_core::random_gen::{check_restrictions, expand_ct_variants, generate_batch, GenConfig};
use archdsl_core::ranker::{select_indices, spearman, RankError, Ranker, RankerConfig};
use archdsl_core::rl::{pretrain_priors, prior_satisfaction_rate, Policy, PolicyConfig, PretrainConfig, RewardConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

/// Runs one criterion under the lock, prints its verdict line and
/// re-raises a failure.
fn criterion(n: usize, budget: Duration, body: impl FnOnce() -> String + std::panic::UnwindSafe) {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let result = std::panic::catch_unwind(body);
    let elapsed = start.elapsed();
    match result {
        Ok(detail) if elapsed <= budget => {
            println!("ACCEPTANCE {n} PASS: {detail} ({:.1}s, budget {}s)", elapsed.as_secs_f64(), budget.as_secs());
        }
        Ok(detail) => {
            println!("ACCEPTANCE {n} FAIL: {detail}; over budget ({:.1}s > {}s)", elapsed.as_secs_f64(), budget.as_secs());
            panic!("criterion {n} exceeded its runtime budget");
        }
        Err(e) => {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default();
            println!("ACCEPTANCE {n} FAIL: {msg}");
            std::panic::resume_unwind(e);
        }
    }
}

fn randomize(params: &mut ParamSet, seed: u64, bound: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in params.iter_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-bound..bound));
    }
}

fn rand_row(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn random_sequence(seed: u64, len: usize, batch: usize, width: usize) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| Tensor::matrix(batch, width, (0..batch * width).map(|_| rng.gen_range(-1.0..1.0)).collect())).collect()
}

fn state(h: &[f64], c: Option<&[f64]>, inp: usize) -> CellState {
    CellState { h: Tensor::row(h.to_vec()), c: c.map(|c| Tensor::row(c.to_vec())), x_prev: Tensor::zeros(&[1, inp]), t: 0 }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Uniformly shaped random tree over the core DSL (no `c_tm1`).
fn random_tree(rng: &mut ChaCha8Rng, depth: usize) -> ArchNode {
    const LEAVES: [OpKind; 4] = [OpKind::X, OpKind::Xm1, OpKind::Hm1, OpKind::PosEnc];
    if depth == 0 || rng.gen_bool(0.3) {
        return ArchNode::leaf(LEAVES[rng.gen_range(0..LEAVES.len())]);
    }
    let op = OpKind::OPERATORS[rng.gen_range(0..OpKind::OPERATORS.len())];
    let kids = (0..op.arity()).map(|_| random_tree(rng, depth - 1)).collect();
    ArchNode::new(op, kids).expect("arity")
}

/// Random tree with an operator root and `h_tm1` somewhere.
fn random_cell(rng: &mut ChaCha8Rng, depth: usize, max_ops: usize) -> ArchNode {
    loop {
        let t = random_tree(rng, depth);
        if t.op.is_operator() && t.contains(OpKind::Hm1) && t.operator_count() <= max_ops {
            return t;
        }
    }
}

// ---------------------------------------------------------------------------

#[test]
fn acceptance_01_dsl_fidelity() {
    criterion(1, Duration::from_secs(10), || {
        for name in ["gru", "bc3"] {
            let a = builtin(name).unwrap();
            let text = a.render();
            assert_eq!(parse(&text).unwrap(), a, "{name} round trip");
            let c = canonicalize(&a);
            assert_eq!(parse(&c.render()).unwrap(), c);
            assert_eq!(canonicalize(&c), c);
        }
        let mut worst: f64 = 0.0;
        let gru = builtin("gru").unwrap();
        let (prog, mut params) = compile(&gru, &CompileOptions::new(3, 5, true)).unwrap();
        randomize(&mut params, 11, 0.8);
        let w = Weights::new(&gru, &params, "");
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let (x, h) = (rand_row(&mut rng, 3), rand_row(&mut rng, 5));
            let (out, _) = prog.step(&params, &Tensor::row(x.clone()), &state(&h, None, 3)).unwrap();
            worst = worst.max(max_diff(out.data(), &reference::gru_step(&w, &x, &h)));
        }
        let bc3 = builtin("bc3").unwrap();
        let (prog, mut params) = compile(&bc3, &CompileOptions::new(4, 4, true)).unwrap();
        randomize(&mut params, 13, 0.8);
        let w = Weights::new(&bc3, &params, "");
        for _ in 0..100 {
            let (x, h, c) = (rand_row(&mut rng, 4), rand_row(&mut rng, 4), rand_row(&mut rng, 4));
            let (out, next) = prog.step(&params, &Tensor::row(x.clone()), &state(&h, Some(&c), 4)).unwrap();
            let (rh, rc) = reference::bc3_step(&w, &x, &h, &c);
            worst = worst.max(max_diff(out.data(), &rh)).max(max_diff(next.c.unwrap().data(), &rc));
        }
        assert!(worst < 1e-10, "max deviation {worst:e}");
        format!("GRU/BC3 round-trip; max deviation from oracles {worst:.1e} over 100 states each")
    });
}

#[test]
fn acceptance_02_fusion_equivalence() {
    criterion(2, Duration::from_secs(30), || {
        let mut cells: Vec<Architecture> = ["gru", "lstm", "bc3"].iter().map(|n| builtin(n).unwrap()).collect();
        cells.extend(generate_batch(&GenConfig { seed: 21, ..Default::default() }, 100, &HashSet::new()));
        let mut worst: f64 = 0.0;
        for (i, arch) in cells.iter().enumerate() {
            let (f, mut params) = compile(arch, &CompileOptions::new(4, 4, true)).unwrap();
            let (u, params_u) = compile(arch, &CompileOptions::new(4, 4, false)).unwrap();
            assert_eq!(params, params_u, "{}: parameter sets differ", arch.render());
            randomize(&mut params, 100 + i as u64, 0.5);
            let xs = random_sequence(i as u64, 6, 2, 4);
            let a = f.run_sequence(&params, &xs, &f.zero_state(2));
            let b = u.run_sequence(&params, &xs, &u.zero_state(2));
            match (a, b) {
                (Ok(a), Ok(b)) => {
                    for (x, y) in a.iter().zip(&b) {
                        worst = worst.max(x.max_abs_diff(y));
                    }
                }
                (Err(_), Err(_)) => {}
                (a, b) => panic!("{}: fused {:?} vs unfused {:?}", arch.render(), a.is_ok(), b.is_ok()),
            }
        }
        assert!(worst < 1e-10, "max deviation {worst:e}");
        let (lstm, _) = compile(&builtin("lstm").unwrap(), &CompileOptions::new(4, 4, true)).unwrap();
        assert_eq!(lstm.source_mm_instructions(), 2);
        format!("{} cells fused == unfused (max deviation {worst:.1e}); fused LSTM has 2 source MMs", cells.len())
    });
}

/// Every combination of reversing commutative children and swapping
/// Gate3 value arguments.
fn all_permutations(node: &ArchNode) -> Vec<ArchNode> {
    let kid_sets: Vec<Vec<ArchNode>> = node.children.iter().map(all_permutations).collect();
    let mut combos: Vec<Vec<ArchNode>> = vec![vec![]];
    for set in &kid_sets {
        combos = combos.into_iter().flat_map(|c| set.iter().map(move |k| [c.clone(), vec![k.clone()]].concat())).collect();
    }
    let mut out = Vec::new();
    for kids in combos {
        out.push(ArchNode::new(node.op, kids.clone()).unwrap());
        if node.op.is_commutative() {
            let mut r = kids.clone();
            r.reverse();
            out.push(ArchNode::new(node.op, r).unwrap());
        } else if node.op == OpKind::Gate3 {
            let mut r = kids;
            r.swap(0, 1);
            out.push(ArchNode::new(node.op, r).unwrap());
        }
    }
    out
}

/// True when canonicalization reorders some Gate3's value arguments,
/// which swaps the roles of `f` and `1 − f` (not value-preserving).
fn gate3_reordered(node: &ArchNode) -> bool {
    let here = node.op == OpKind::Gate3
        && !canonical_render(node).starts_with(&format!("Gate3({},", canonical_render(&node.children[0])));
    here || node.children.iter().any(gate3_reordered)
}

#[test]
fn acceptance_03_canonicalization() {
    criterion(3, Duration::from_secs(60), || {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let (mut brute, mut perms, mut semantic, mut gate_skipped) = (0, 0, 0, 0);
        let mut worst: f64 = 0.0;
        for i in 0..1000 {
            let root = random_cell(&mut rng, 5, 16);
            let arch = Architecture::new(root.clone());
            let (canon, map) = canonicalize_with_map(&arch);
            assert_eq!(canonicalize(&canon), canon, "idempotence");
            if root.operator_count() <= 8 {
                brute += 1;
                let want = canon.render();
                for p in all_permutations(&root) {
                    perms += 1;
                    assert_eq!(canonicalize(&Architecture::new(p)).render(), want);
                }
            }
            if gate3_reordered(&root) {
                gate_skipped += 1;
                continue;
            }
            let (p, mut params) = compile(&arch, &CompileOptions::new(3, 3, true)).unwrap();
            randomize(&mut params, 1000 + i, 0.7);
            let (q, mut cparams) = compile(&canon, &CompileOptions::new(3, 3, true)).unwrap();
            for (old, &new) in map.iter().enumerate() {
                for name in [weight_name as fn(&str, usize) -> String, bias_name, ln_gain_name, ln_bias_name] {
                    if let Some(v) = params.by_name(&name("", old + 1)).map(|p| p.value.clone()) {
                        *cparams.value_mut(&name("", new)).unwrap() = v;
                    }
                }
            }
            let xs = random_sequence(i, 5, 2, 3);
            match (p.run_sequence(&params, &xs, &p.zero_state(2)), q.run_sequence(&cparams, &xs, &q.zero_state(2))) {
                (Ok(a), Ok(b)) => {
                    semantic += 1;
                    for (x, y) in a.iter().zip(&b) {
                        worst = worst.max(x.max_abs_diff(y));
                    }
                }
                (Err(_), Err(_)) => {}
                _ => panic!("{}: only one form failed", arch.render()),
            }
        }
        assert!(worst < 1e-10, "semantic deviation {worst:e}");
        assert!(brute > 100, "too few small trees ({brute})");
        format!(
            "1000 trees idempotent; {brute} trees with <=8 ops, {perms} permutations all coincide; \
             {semantic} semantic checks, max deviation {worst:.1e} ({gate_skipped} with reordered Gate3 excluded)"
        )
    });
}

fn rel_check(specs: &[(&str, &[usize])], seed: u64, f: impl Fn(&mut Tape, &ParamSet) -> Result<Var, EngineError>) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    for (name, shape) in specs {
        let mut t = Tensor::uniform(shape, 1.0, &mut rng);
        // Away from the ReLU/SeLU kink and the Div guard band.
        t.data_mut().iter_mut().for_each(|v| *v = v.signum() * (v.abs() + 0.3));
        ps.add(*name, t);
    }
    gradient_check(&mut ps, f).unwrap().max_rel_error
}

fn vars<const N: usize>(t: &mut Tape, ps: &ParamSet, names: [&str; N]) -> [Var; N] {
    names.map(|n| t.param(ps, ps.id(n).unwrap()))
}

#[test]
fn acceptance_04_gradient_suite() {
    criterion(4, Duration::from_secs(300), || {
        let mut report = Vec::new();
        let ab: &[(&str, &[usize])] = &[("a", &[2, 4]), ("b", &[2, 4]), ("c", &[2, 4]), ("w", &[2, 4])];
        for u in [Unary::Sigmoid, Unary::Tanh, Unary::Relu, Unary::Sin, Unary::Cos, Unary::Selu] {
            let e = rel_check(ab, 1, |t, ps| {
                let [a, _, _, w] = vars(t, ps, ["a", "b", "c", "w"]);
                let y = t.unary(a, u);
                let z = t.mul(y, w)?;
                Ok(t.sum(z))
            });
            report.push((format!("{u:?}"), e));
        }
        type Bin = fn(&mut Tape, Var, Var) -> Result<Var, EngineError>;
        for (name, op) in [("Add", Tape::add as Bin), ("Mult", Tape::mul), ("Sub", Tape::sub), ("Div", Tape::div)] {
            let e = rel_check(ab, 2, |t, ps| {
                let [a, b, _, w] = vars(t, ps, ["a", "b", "c", "w"]);
                let y = op(t, a, b)?;
                let z = t.mul(y, w)?;
                Ok(t.sum(z))
            });
            report.push((name.to_string(), e));
        }
        let e = rel_check(ab, 3, |t, ps| {
            let [a, b, c, w] = vars(t, ps, ["a", "b", "c", "w"]);
            let f = t.sigmoid(c);
            let y = t.gate3(a, b, f)?;
            let z = t.mul(y, w)?;
            Ok(t.sum(z))
        });
        report.push(("Gate3".into(), e));
        let e = rel_check(&[("x", &[3, 5]), ("g", &[5]), ("b", &[5]), ("w", &[3, 5])], 4, |t, ps| {
            let [x, g, b, w] = vars(t, ps, ["x", "g", "b", "w"]);
            let y = t.layer_norm(x, g, b)?;
            let z = t.mul(y, w)?;
            Ok(t.sum(z))
        });
        report.push(("LayerNorm".into(), e));
        let e = rel_check(&[("x", &[2, 3]), ("W", &[4, 3]), ("bias", &[4])], 5, |t, ps| {
            let [x, w, b] = vars(t, ps, ["x", "W", "bias"]);
            let y = t.affine(x, w, b)?;
            let y = t.tanh(y);
            Ok(t.sum(y))
        });
        report.push(("MM".into(), e));

        let cells = generate_batch(&GenConfig { seed: 44, ..Default::default() }, 20, &HashSet::new());
        let mut cell_worst: f64 = 0.0;
        for (i, a) in cells.iter().enumerate() {
            let r = check_cell_gradients(a, &CompileOptions::new(3, 3, true), i as u64).unwrap();
            assert!(r.max_rel_error < 1e-4, "{}: {r:?}", a.render());
            cell_worst = cell_worst.max(r.max_rel_error);
        }
        report.push(("20 cells".into(), cell_worst));

        let tree_arch = parse("Gate3(Tanh(Add(MM(x_t),MM(h_tm1))),MM(h_tm1),Sigmoid(Sub(MM(x_t),MM(h_tm1))))").unwrap();
        let ranker = Ranker::new(RankerConfig { hidden: 3, seed: 6, ..Default::default() });
        let tree = ranker.encoding_tree(&tree_arch).unwrap();
        let mut params = ranker.params.clone();
        let r = gradient_check(&mut params, |tape, ps| {
            ranker.regression_loss(tape, ps, &tree, 0.7).map_err(|e| match e {
                RankError::Engine(e) => e,
                other => EngineError::Config(other.to_string()),
            })
        })
        .unwrap();
        report.push(("ranker loss".into(), r.max_rel_error));

        let policy = Policy::new(PolicyConfig { hidden: 3, entropy_bonus: 0.1, seed: 8, ..Default::default() }).unwrap();
        let idx = |k: OpKind| policy.actions.iter().position(|&a| a == k).unwrap();
        let episodes = vec![
            (vec![idx(OpKind::Tanh), idx(OpKind::Add), idx(OpKind::MM), idx(OpKind::X), idx(OpKind::Hm1)], 1.3),
            (vec![idx(OpKind::Sigmoid), idx(OpKind::X)], -0.4),
        ];
        let mut params = policy.params.clone();
        let r = gradient_check(&mut params, |tape, ps| policy.policy_loss(tape, ps, &episodes, 0.4)).unwrap();
        report.push(("policy loss".into(), r.max_rel_error));

        for (name, e) in &report {
            assert!(*e < 1e-4, "{name}: relative error {e:e}");
        }
        let worst = report.iter().map(|(_, e)| *e).fold(0.0, f64::max);
        format!("{} checks (primitives, 20 cells, ranker, policy), worst relative error {worst:.1e}", report.len())
    });
}

#[test]
fn acceptance_05_restrictions() {
    criterion(5, Duration::from_secs(120), || {
        let cfg = GenConfig { seed: 55, ..Default::default() };
        let cands = generate_batch(&cfg, 10_000, &HashSet::new());
        assert_eq!(cands.len(), 10_000);
        let mut ids = HashSet::new();
        let mut with_ct = 0;
        for a in &cands {
            let v = check_restrictions(a, &cfg);
            assert!(v.is_empty(), "{}: {v:?}", a.render());
            assert!(ids.insert(arch_id(a)), "duplicate {}", a.render());
            assert!(a.root.operator_count() <= 21);
            assert!(a.root.depth() <= 8 && a.root.height() <= 8);
            with_ct += usize::from(a.ct_node.is_some());
        }
        let ex = parse("Mult(Sigmoid(MM(x_t)),Tanh(Add(MM(h_tm1),Mult(MM(c_tm1),MM(x_t)))))").unwrap();
        let variants = expand_ct_variants(&ex);
        assert_eq!(variants.len(), 3);
        let taps: Vec<OpKind> = variants.iter().map(|v| v.ct_subtree().unwrap().op).collect();
        assert_eq!(taps.iter().filter(|&&k| k == OpKind::Mult).count(), 1);
        assert!(taps.contains(&OpKind::Add) && taps.contains(&OpKind::Tanh));
        format!("10000 candidates pass, 0 duplicates, {with_ct} with c_t; §2.1 example has 3 taps ({taps:?})")
    });
}

fn synthetic_target(a: &Architecture) -> f64 {
    let mut g = 0.0;
    a.root.walk(&mut |n, _| {
        if n.op == OpKind::Gate3 {
            g += 1.0;
        }
        if n.op == OpKind::ReLU {
            g -= 0.5;
        }
    });
    0.15 * a.root.operator_count() as f64 + 0.4 * g + 0.1 * a.root.depth() as f64
}

#[test]
fn acceptance_06_ranker_learnability() {
    criterion(6, Duration::from_secs(300), || {
        let cands = generate_batch(&GenConfig { seed: 5, ..Default::default() }, 250, &HashSet::new());
        let recs: Vec<ArchPerfRecord> =
            cands.iter().map(|a| ArchPerfRecord::synthetic(a, Status::Ok, Some(synthetic_target(a)))).collect();
        let mut ranker = Ranker::new(RankerConfig { hidden: 16, epochs: 60, learning_rate: 0.005, seed: 2, ..Default::default() });
        ranker.fit(&recs[..200]).unwrap();
        let pred = ranker.score_all(&cands[200..]);
        let truth: Vec<f64> = cands[200..].iter().map(synthetic_target).collect();
        let rho = spearman(&pred, &truth);
        assert!(rho >= 0.8, "held-out Spearman {rho}");

        let scores = ranker.score_all(&cands);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let picked = select_indices(&scores, 8, 2, 1.0, &mut rng);
        assert_eq!(picked.len(), 10);
        assert_eq!(picked.iter().collect::<HashSet<_>>().len(), 10);
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
        assert_eq!(&picked[..8], &order[..8]);
        format!("held-out Spearman {rho:.3} (200 train / 50 held out); selection = 8 argmin + 2 sampled")
    });
}

#[test]
fn acceptance_07_reward_formula() {
    criterion(7, Duration::from_secs(10), || {
        let r = RewardConfig::default();
        let at140 = r.formula(140.0);
        assert!(at140 < 1e-30, "{at140}");
        let l = 140.0 - 50.0 / 0.3815;
        let want = 0.2 * (50.0 / 0.3815) + 1.0;
        assert!((r.formula(l) - want).abs() < 1e-9);
        let grid: Vec<f64> = (0..1000).map(|i| r.formula(140.0 * i as f64 / 999.0)).collect();
        assert!(grid.windows(2).all(|w| w[1] < w[0]));
        format!("R(140)={at140:.2e}, R(140-50/0.3815)={:.9} (want {want:.9}), strictly decreasing on 1000 points", r.formula(l))
    });
}

#[test]
fn acceptance_08_priors_pretraining() {
    criterion(8, Duration::from_secs(600), || {
        let mut policy = Policy::new(PolicyConfig { hidden: 16, learning_rate: 0.01, entropy_bonus: 0.01, seed: 8, ..Default::default() }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (before, _) = prior_satisfaction_rate(&policy, 1000, &mut rng).unwrap();
        let rep = pretrain_priors(&mut policy, &PretrainConfig { stop_rate: 0.98, ..Default::default() }, &mut rng).unwrap();
        let (after, depth) = prior_satisfaction_rate(&policy, 1000, &mut rng).unwrap();
        assert!(after >= 0.95, "post-training rate {after}");
        assert!(after > before);
        assert!(depth >= 0.95, "depth rate {depth}");
        format!("prior rate {before:.3} -> {after:.3} after {} episodes; depth in [3,11] for {:.1}%", rep.episodes, depth * 100.0)
    });
}

fn desk_config(mode: SearchMode) -> RunConfig {
    let cfg: RunConfig = serde_json::from_str(
        r#"{
        "task": {"kind": "copy_memory"},
        "train": {"epochs": 3, "hidden_size": 16, "layers": 1,
                  "optimizer": {"kind": "adam", "learning_rate": 0.02, "clip_norm": 5.0}},
        "ranker": {"hidden": 32, "epochs": 30},
        "policy": {"hidden": 16, "learning_rate": 0.01, "entropy_bonus": 0.01},
        "pretrain": {"episodes": 0}
    }"#,
    )
    .unwrap();
    RunConfig {
        search: SearchConfig {
            mode,
            candidates_per_step: Some(500),
            k_top: Some(8),
            k_sampled: Some(2),
            steps: 5,
            rl_evaluations: 200,
            workers: 1,
            ..Default::default()
        },
        ..cfg
    }
    .with_seed(1)
}

#[test]
fn acceptance_09_desk_search() {
    criterion(9, Duration::from_secs(3600), || {
        let dir = tempfile::tempdir().unwrap();
        let run = |mode: SearchMode, name: &str| {
            let cfg = desk_config(mode);
            let task = make_task(&cfg.task).unwrap();
            let path = dir.path().join(name);
            let store = RecordStore::open(&path).unwrap();
            let out = match mode {
                SearchMode::RandomRank => run_random_search(&cfg, &task, &store, &mut |_| {}).unwrap(),
                SearchMode::Rl => {
                    let mut policy = Policy::new(cfg.policy.clone()).unwrap();
                    run_rl_search(&cfg, &task, &store, &mut policy, &mut |_| {}).unwrap()
                }
            };
            (out, std::fs::read(&path).unwrap())
        };
        let (rand_out, a) = run(SearchMode::RandomRank, "random_a.jsonl");
        let (_, b) = run(SearchMode::RandomRank, "random_b.jsonl");
        assert_eq!(a, b, "random search not byte-replayable");
        let baseline = rand_out.baseline.as_ref().and_then(|r| r.valid_metric).expect("baseline evaluated");
        let best = rand_out.best.as_ref().and_then(|r| r.valid_metric).unwrap();
        assert!(best < baseline, "best {best} vs baseline {baseline}");

        let (rl_out, c) = run(SearchMode::Rl, "rl_a.jsonl");
        let (_, d) = run(SearchMode::Rl, "rl_b.jsonl");
        assert_eq!(c, d, "RL search not byte-replayable");
        assert!(rl_out.evaluations >= 200);
        let r = &rl_out.rewards;
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        let (first, last) = (mean(&r[..50]), mean(&r[r.len() - 50..]));
        assert!(last > first, "first-50 {first} vs last-50 {last}");
        format!(
            "random: best {best:.4} < tanh-RNN {baseline:.4} ({} evals); RL: {} evals, reward first-50 {first:.3} -> last-50 {last:.3}; both byte-replayable",
            rand_out.evaluations, rl_out.evaluations
        )
    });
}

#[test]
fn acceptance_10_reports() {
    criterion(10, Duration::from_secs(120), || {
        let cfg = RunConfig {
            task: TaskSpec { seq_len: 9, copy_length: 2, vocab_size: 5, train_size: 32, valid_size: 16, test_size: 16, ..Default::default() },
            train: TrainConfig { epochs: 1, failure_check_epoch: 1, hidden_size: 4, layers: 1, ..Default::default() },
            ranker: RankerConfig { hidden: 4, epochs: 3, ..Default::default() },
            search: SearchConfig { candidates_per_step: Some(40), k_top: Some(3), k_sampled: Some(1), steps: 4, ..Default::default() },
            ..Default::default()
        }
        .with_seed(10);
        let task = make_task(&cfg.task).unwrap();
        let store = RecordStore::in_memory();
        run_random_search(&cfg, &task, &store, &mut |_| {}).unwrap();
        let recs = store.records();

        let rows = ops_over_time(&recs);
        assert_eq!(rows.len(), 5);
        for (_, row) in &rows {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert_eq!(ops_over_time_csv(&recs).lines().count(), rows.len() + 1);

        let curve = search_curve(&recs);
        let best: Vec<f64> = curve.iter().filter_map(|r| r.best_so_far).collect();
        assert!(!best.is_empty() && best.windows(2).all(|w| w[1] <= w[0]));

        let arch = recs.iter().find(|r| r.is_ok()).and_then(|r| r.architecture()).unwrap();
        let csv = hidden_dump_csv(&arch, &task, &cfg.train, 10).unwrap();
        assert_eq!(csv.lines().count() - 1, cfg.task.seq_len);
        format!(
            "{} ops-over-time rows sum to 1; best-so-far monotone over {} evaluations; hidden dump has {} rows = seq_len",
            rows.len(),
            curve.len(),
            cfg.task.seq_len
        )
    });
}

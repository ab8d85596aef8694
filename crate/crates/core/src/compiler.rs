//! Compiles an [`Architecture`] into an executable cell program.
//!
//! Compilation is split the way §2.4 describes: an initialization pass that
//! allocates one weight matrix and bias per `MM` node (plus gain/bias per
//! `LayerNorm`) and an instruction list evaluated once per timestep. With
//! fusion on, all `MM`s applied directly to the same source leaf become one
//! wide multiplication whose output is sliced (Appendix A1).

pub mod reference;

use std::collections::BTreeMap;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::{ArchNode, Architecture, NodePath, OpKind};
use crate::engine::{gradient_check, positional_encoding, EngineError, GradCheck, ParamId, ParamSet, Tape, Tensor, Unary, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CompileError {
    #[error("architecture uses c_tm1 but has no c_t tap")]
    CtWithoutTap,
    #[error("the c_t tap may not be the root (c_t must differ from h_t)")]
    CtAtRoot,
    #[error("a bare source leaf has no recurrence")]
    NoRecurrence,
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value at timestep {t}, instruction {instruction} ({what})")]
    Divergence { t: usize, instruction: usize, what: String },
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompileOptions {
    pub input_size: usize,
    pub hidden_size: usize,
    pub fuse: bool,
    /// Apply a sigmoid to Gate3's third argument (literal §2 formula).
    pub gate3_inner_sigmoid: bool,
    /// Seed for weight initialization.
    pub seed: u64,
}

impl Default for CompileOptions {
    fn default() -> Self {
        CompileOptions { input_size: 8, hidden_size: 8, fuse: true, gate3_inner_sigmoid: false, seed: 0 }
    }
}

impl CompileOptions {
    pub fn new(input_size: usize, hidden_size: usize, fuse: bool) -> Self {
        CompileOptions { input_size, hidden_size, fuse, ..Default::default() }
    }
}

/// Executable primitive of one instruction.
#[derive(Clone, Debug, PartialEq)]
pub enum Prim {
    Source(OpKind),
    /// One or more affine maps of the same input. Params are `[w, b]` per
    /// member; there is one output slot per member.
    MatMul,
    Unary(Unary),
    LayerNorm,
    Add,
    Mult,
    Sub,
    Div,
    Gate3,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instruction {
    pub prim: Prim,
    pub inputs: Vec<usize>,
    pub params: Vec<ParamId>,
    pub outputs: Vec<usize>,
    /// Operator node numbers (see [`crate::dsl::numbering`]) computed here.
    pub nodes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellProgram {
    pub instructions: Vec<Instruction>,
    pub n_slots: usize,
    pub root_slot: usize,
    pub ct_slot: Option<usize>,
    pub input_size: usize,
    pub hidden_size: usize,
    /// Source leaf → node numbers of the MMs folded into one wide MM.
    pub fused_groups: BTreeMap<OpKind, Vec<usize>>,
    pub uses_c: bool,
    pub gate3_inner_sigmoid: bool,
}

/// Recurrent state between timesteps.
#[derive(Clone, Debug, PartialEq)]
pub struct CellState {
    pub h: Tensor,
    pub c: Option<Tensor>,
    pub x_prev: Tensor,
    pub t: usize,
}

/// Recurrent state on a tape.
#[derive(Clone, Copy, Debug)]
pub struct TapeState {
    pub h: Var,
    pub c: Option<Var>,
    pub x_prev: Var,
    pub t: usize,
}

/// Parameters of one program loaded onto a tape, with fused weights
/// pre-concatenated.
#[derive(Clone, Debug)]
pub struct Bound {
    per_instr: Vec<Vec<Var>>,
}

/// Compiles with a private parameter set.
pub fn compile(arch: &Architecture, opts: &CompileOptions) -> Result<(CellProgram, ParamSet), CompileError> {
    let mut params = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let prog = compile_into(arch, opts, &mut params, "", &mut rng)?;
    Ok((prog, params))
}

/// Name of the weight of operator node `n` (1-based) under `prefix`.
pub fn weight_name(prefix: &str, n: usize) -> String {
    format!("{prefix}n{n}.w")
}

pub fn bias_name(prefix: &str, n: usize) -> String {
    format!("{prefix}n{n}.b")
}

pub fn ln_gain_name(prefix: &str, n: usize) -> String {
    format!("{prefix}n{n}.ln_gain")
}

pub fn ln_bias_name(prefix: &str, n: usize) -> String {
    format!("{prefix}n{n}.ln_bias")
}

/// Compiles, registering parameters in `params` under names prefixed by
/// `prefix`.
pub fn compile_into(
    arch: &Architecture,
    opts: &CompileOptions,
    params: &mut ParamSet,
    prefix: &str,
    rng: &mut ChaCha8Rng,
) -> Result<CellProgram, CompileError> {
    if arch.root.op.is_source() {
        return Err(CompileError::NoRecurrence);
    }
    let uses_c = arch.uses(OpKind::Cm1);
    if uses_c && arch.ct_node.is_none() {
        return Err(CompileError::CtWithoutTap);
    }
    let numbering = arch.numbering();
    let ct_path = arch.ct_path();
    if arch.ct_node.is_some() && ct_path.as_deref() == Some(&[][..]) {
        return Err(CompileError::CtAtRoot);
    }
    let index_of: BTreeMap<NodePath, usize> = numbering.iter().enumerate().map(|(i, p)| (p.clone(), i + 1)).collect();
    let (inp, hid) = (opts.input_size, opts.hidden_size);
    if inp == 0 || hid == 0 {
        return Err(CompileError::Shape("sizes must be positive".into()));
    }

    // Initialization pass: parameters in node-number order, so fused and
    // unfused programs of one architecture share an identical ParamSet.
    let source_width = |k: OpKind| if matches!(k, OpKind::X | OpKind::Xm1) { inp } else { hid };
    let mut node_params: BTreeMap<usize, Vec<ParamId>> = BTreeMap::new();
    for (i, path) in numbering.iter().enumerate() {
        let n = i + 1;
        let node = arch.root.at(path).expect("numbered path exists");
        match node.op {
            OpKind::MM => {
                let child = node.children[0].op;
                let fan_in = if child.is_source() { source_width(child) } else { hid };
                node_params.insert(n, add_mm_params(params, prefix, n, fan_in, hid, rng).to_vec());
            }
            OpKind::LayerNorm => {
                let g = params.add(ln_gain_name(prefix, n), Tensor::full(&[hid], 1.0));
                let b = params.add(ln_bias_name(prefix, n), Tensor::zeros(&[hid]));
                node_params.insert(n, vec![g, b]);
            }
            _ => {}
        }
    }

    let mut b = Builder {
        instructions: Vec::new(),
        n_slots: 0,
        source_slots: BTreeMap::new(),
        pending_fused: BTreeMap::new(),
    };

    // Source slots first, in fixed kind order.
    let mut kinds = Vec::new();
    arch.root.walk(&mut |n, _| {
        if n.op.is_source() && !kinds.contains(&n.op) {
            kinds.push(n.op);
        }
    });
    kinds.sort();
    for k in kinds {
        let slot = b.slot();
        b.source_slots.insert(k, slot);
        b.instructions.push(Instruction { prim: Prim::Source(k), inputs: vec![], params: vec![], outputs: vec![slot], nodes: vec![] });
    }

    // Fused groups: MMs directly over a source leaf, grouped by kind.
    let mut fused_groups: BTreeMap<OpKind, Vec<usize>> = BTreeMap::new();
    if opts.fuse {
        let mut groups: BTreeMap<OpKind, Vec<usize>> = BTreeMap::new();
        arch.root.walk(&mut |n, path| {
            if n.op == OpKind::MM && n.children[0].op.is_source() {
                groups.entry(n.children[0].op).or_default().push(index_of[path]);
            }
        });
        for (k, mut members) in groups {
            if members.len() < 2 {
                continue;
            }
            members.sort_unstable();
            let mut ps = Vec::new();
            let mut outs = Vec::new();
            for &n in &members {
                ps.extend(node_params[&n].iter().copied());
                let s = b.slot();
                outs.push(s);
                b.pending_fused.insert(n, s);
            }
            b.instructions.push(Instruction {
                prim: Prim::MatMul,
                inputs: vec![b.source_slots[&k]],
                params: ps,
                outputs: outs,
                nodes: members.clone(),
            });
            fused_groups.insert(k, members);
        }
    }

    // Remaining nodes in post-order.
    let mut ctx = EmitCtx { index_of: &index_of, node_params: &node_params, inp, hid, ct_path: ct_path.as_deref(), ct_slot: None };
    let root_slot = b.emit(&arch.root, &mut Vec::new(), &mut ctx)?;
    let ct_slot = ctx.ct_slot;
    Ok(CellProgram {
        instructions: b.instructions,
        n_slots: b.n_slots,
        root_slot,
        ct_slot,
        input_size: inp,
        hidden_size: hid,
        fused_groups,
        uses_c,
        gate3_inner_sigmoid: opts.gate3_inner_sigmoid,
    })
}

fn add_mm_params(params: &mut ParamSet, prefix: &str, n: usize, fan_in: usize, out: usize, rng: &mut ChaCha8Rng) -> [ParamId; 2] {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let w = params.add(weight_name(prefix, n), Tensor::uniform(&[out, fan_in], bound, rng));
    let b = params.add(bias_name(prefix, n), Tensor::zeros(&[out]));
    [w, b]
}

struct Builder {
    instructions: Vec<Instruction>,
    n_slots: usize,
    source_slots: BTreeMap<OpKind, usize>,
    /// Node number → slot already produced by a fused MM.
    pending_fused: BTreeMap<usize, usize>,
}

struct EmitCtx<'a> {
    index_of: &'a BTreeMap<NodePath, usize>,
    node_params: &'a BTreeMap<usize, Vec<ParamId>>,
    inp: usize,
    hid: usize,
    ct_path: Option<&'a [usize]>,
    ct_slot: Option<usize>,
}

impl Builder {
    fn slot(&mut self) -> usize {
        self.n_slots += 1;
        self.n_slots - 1
    }

    /// Emits `node` and returns its output slot together with its width.
    fn emit(&mut self, node: &ArchNode, path: &mut Vec<usize>, ctx: &mut EmitCtx) -> Result<usize, CompileError> {
        Ok(self.emit_w(node, path, ctx)?.0)
    }

    fn emit_w(&mut self, node: &ArchNode, path: &mut Vec<usize>, ctx: &mut EmitCtx) -> Result<(usize, usize), CompileError> {
        if node.op.is_source() {
            let w = if matches!(node.op, OpKind::X | OpKind::Xm1) { ctx.inp } else { ctx.hid };
            return Ok((self.source_slots[&node.op], w));
        }
        let n = ctx.index_of[path.as_slice()];
        let slot = if let Some(&s) = self.pending_fused.get(&n) {
            s
        } else {
            let mut inputs = Vec::new();
            for (i, c) in node.children.iter().enumerate() {
                path.push(i);
                let (s, w) = self.emit_w(c, path, ctx)?;
                path.pop();
                if node.op != OpKind::MM && w != ctx.hid {
                    return Err(CompileError::Shape(format!(
                        "{} applied to a width-{w} value; non-MM operators need width {} (input_size must equal hidden_size when x is used outside MM)",
                        node.op.token(),
                        ctx.hid
                    )));
                }
                inputs.push((s, w));
            }
            let out = self.slot();
            let params = ctx.node_params.get(&n).cloned().unwrap_or_default();
            let prim = match node.op {
                OpKind::MM => Prim::MatMul,
                OpKind::LayerNorm => Prim::LayerNorm,
                OpKind::Sigmoid => Prim::Unary(Unary::Sigmoid),
                OpKind::Tanh => Prim::Unary(Unary::Tanh),
                OpKind::ReLU => Prim::Unary(Unary::Relu),
                OpKind::Sin => Prim::Unary(Unary::Sin),
                OpKind::Cos => Prim::Unary(Unary::Cos),
                OpKind::SeLU => Prim::Unary(Unary::Selu),
                OpKind::Add => Prim::Add,
                OpKind::Mult => Prim::Mult,
                OpKind::Sub => Prim::Sub,
                OpKind::Div => Prim::Div,
                OpKind::Gate3 => Prim::Gate3,
                k => unreachable!("source {k:?} handled above"),
            };
            self.instructions.push(Instruction {
                prim,
                inputs: inputs.iter().map(|p| p.0).collect(),
                params,
                outputs: vec![out],
                nodes: vec![n],
            });
            out
        };
        if ctx.ct_path == Some(path.as_slice()) {
            ctx.ct_slot = Some(slot);
        }
        Ok((slot, ctx.hid))
    }
}

impl CellProgram {
    /// Number of `MM` instructions whose input is a source leaf.
    pub fn source_mm_instructions(&self) -> usize {
        let sources: Vec<usize> = self
            .instructions
            .iter()
            .filter(|i| matches!(i.prim, Prim::Source(_)))
            .map(|i| i.outputs[0])
            .collect();
        self.instructions.iter().filter(|i| i.prim == Prim::MatMul && sources.contains(&i.inputs[0])).count()
    }

    pub fn mm_instructions(&self) -> usize {
        self.instructions.iter().filter(|i| i.prim == Prim::MatMul).count()
    }

    pub fn zero_state(&self, batch: usize) -> CellState {
        CellState {
            h: Tensor::zeros(&[batch, self.hidden_size]),
            c: self.uses_c.then(|| Tensor::zeros(&[batch, self.hidden_size])),
            x_prev: Tensor::zeros(&[batch, self.input_size]),
            t: 0,
        }
    }

    pub fn zero_tape_state(&self, tape: &mut Tape, batch: usize) -> TapeState {
        let s = self.zero_state(batch);
        self.tape_state(tape, &s)
    }

    pub fn tape_state(&self, tape: &mut Tape, s: &CellState) -> TapeState {
        TapeState {
            h: tape.constant(s.h.clone()),
            c: s.c.as_ref().map(|c| tape.constant(c.clone())),
            x_prev: tape.constant(s.x_prev.clone()),
            t: s.t,
        }
    }

    /// Loads parameters, concatenating fused weights once.
    pub fn bind(&self, tape: &mut Tape, params: &ParamSet) -> Result<Bound, CompileError> {
        let mut per_instr = Vec::with_capacity(self.instructions.len());
        for ins in &self.instructions {
            let vars: Vec<Var> = ins.params.iter().map(|&id| tape.param(params, id)).collect();
            let bound = if ins.prim == Prim::MatMul && ins.outputs.len() > 1 {
                let ws: Vec<Var> = vars.iter().step_by(2).copied().collect();
                let bs: Vec<Var> = vars.iter().skip(1).step_by(2).copied().collect();
                vec![tape.concat_rows(&ws)?, tape.concat_rows(&bs)?]
            } else {
                vars
            };
            per_instr.push(bound);
        }
        Ok(Bound { per_instr })
    }

    /// One timestep on a tape. With `check`, every instruction output is
    /// tested for finiteness.
    pub fn step_tape(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        st: &TapeState,
        check: bool,
    ) -> Result<TapeState, CompileError> {
        let batch = tape.value(x).rows();
        if tape.value(x).cols() != self.input_size || tape.value(st.h).rows() != batch {
            return Err(CompileError::Shape(format!(
                "x {:?} / h {:?} do not match input {} hidden {}",
                tape.value(x).shape(),
                tape.value(st.h).shape(),
                self.input_size,
                self.hidden_size
            )));
        }
        let mut slots: Vec<Option<Var>> = vec![None; self.n_slots];
        for (ii, ins) in self.instructions.iter().enumerate() {
            let get = |k: usize| slots[ins.inputs[k]].expect("slot written before use");
            let p = &bound.per_instr[ii];
            let outs: Vec<Var> = match &ins.prim {
                Prim::Source(k) => vec![match k {
                    OpKind::X => x,
                    OpKind::Xm1 => st.x_prev,
                    OpKind::Hm1 => st.h,
                    OpKind::Cm1 => st.c.ok_or_else(|| CompileError::Shape("c state missing".into()))?,
                    OpKind::PosEnc => {
                        let row = positional_encoding(st.t, self.hidden_size);
                        let data: Vec<f64> = (0..batch).flat_map(|_| row.iter().copied()).collect();
                        tape.constant(Tensor::matrix(batch, self.hidden_size, data))
                    }
                    _ => unreachable!(),
                }],
                Prim::MatMul => {
                    let y = tape.affine(get(0), p[0], p[1])?;
                    if ins.outputs.len() == 1 {
                        vec![y]
                    } else {
                        let h = self.hidden_size;
                        (0..ins.outputs.len()).map(|j| tape.slice_cols(y, j * h, h)).collect::<Result<_, _>>()?
                    }
                }
                Prim::Unary(u) => vec![tape.unary(get(0), *u)],
                Prim::LayerNorm => vec![tape.layer_norm(get(0), p[0], p[1])?],
                Prim::Add => vec![tape.add(get(0), get(1))?],
                Prim::Mult => vec![tape.mul(get(0), get(1))?],
                Prim::Sub => vec![tape.sub(get(0), get(1))?],
                Prim::Div => vec![tape.div(get(0), get(1))?],
                Prim::Gate3 => {
                    let f = if self.gate3_inner_sigmoid { tape.sigmoid(get(2)) } else { get(2) };
                    vec![tape.gate3(get(0), get(1), f)?]
                }
            };
            for (&slot, v) in ins.outputs.iter().zip(outs) {
                if check && !tape.value(v).is_finite() {
                    return Err(CompileError::Divergence { t: st.t, instruction: ii, what: format!("{:?}", ins.prim) });
                }
                slots[slot] = Some(v);
            }
        }
        Ok(TapeState {
            h: slots[self.root_slot].expect("root computed"),
            c: self.ct_slot.map(|s| slots[s].expect("ct computed")),
            x_prev: x,
            t: st.t + 1,
        })
    }

    /// One timestep on concrete values; fails on the first non-finite
    /// instruction output.
    pub fn step(&self, params: &ParamSet, x: &Tensor, state: &CellState) -> Result<(Tensor, CellState), CompileError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, params)?;
        let st = self.tape_state(&mut tape, state);
        let xv = tape.constant(x.clone());
        let out = self.step_tape(&mut tape, &bound, xv, &st, true)?;
        let h = tape.value(out.h).clone();
        let next = CellState {
            h: h.clone(),
            c: out.c.map(|c| tape.value(c).clone()),
            x_prev: x.clone(),
            t: out.t,
        };
        Ok((h, next))
    }

    /// Folds [`CellProgram::step`] over `xs`, returning every `h_t`.
    pub fn run_sequence(&self, params: &ParamSet, xs: &[Tensor], init: &CellState) -> Result<Vec<Tensor>, CompileError> {
        if xs.is_empty() {
            return Err(CompileError::Shape("empty sequence".into()));
        }
        let mut state = init.clone();
        let mut hs = Vec::with_capacity(xs.len());
        for x in xs {
            let (h, next) = self.step(params, x, &state)?;
            hs.push(h);
            state = next;
        }
        Ok(hs)
    }

    /// Tape-level sequence run, used for end-to-end gradients.
    pub fn run_sequence_tape(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        xs: &[Var],
        init: &TapeState,
    ) -> Result<(Vec<Var>, TapeState), CompileError> {
        let bound = self.bind(tape, params)?;
        let mut st = *init;
        let mut hs = Vec::with_capacity(xs.len());
        for &x in xs {
            st = self.step_tape(tape, &bound, x, &st, false)?;
            hs.push(st.h);
        }
        Ok((hs, st))
    }
}

/// Writes a hidden-state trace: header `t,h0,..`, one row per timestep
/// (first batch row).
pub fn write_trace_csv(hs: &[Tensor], out: &mut impl Write) -> std::io::Result<()> {
    let width = hs.first().map_or(0, |h| h.cols());
    let header: Vec<String> = std::iter::once("t".to_string()).chain((0..width).map(|j| format!("h{j}"))).collect();
    writeln!(out, "{}", header.join(","))?;
    for (t, h) in hs.iter().enumerate() {
        let row: Vec<String> = h.row_slice(0).iter().map(|v| format!("{v:?}")).collect();
        writeln!(out, "{t},{}", row.join(","))?;
    }
    Ok(())
}

/// Finite-difference check of a compiled cell: parameters uniform in
/// `[-0.7, 0.7]`, a 4-step batch-2 random input sequence, loss = sum of all
/// hidden states.
pub fn check_cell_gradients(arch: &Architecture, opts: &CompileOptions, seed: u64) -> Result<GradCheck, CompileError> {
    use rand::Rng;
    let (p, mut params) = compile(arch, opts)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for q in params.iter_mut() {
        q.value.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.7..0.7));
    }
    let (batch, width) = (2, opts.input_size);
    let xs: Vec<Tensor> = (0..4)
        .map(|_| Tensor::matrix(batch, width, (0..batch * width).map(|_| rng.gen_range(-1.0..1.0)).collect()))
        .collect();
    gradient_check(&mut params, |tape, ps| {
        let xv: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let init = p.zero_tape_state(tape, batch);
        let (hs, _) = p.run_sequence_tape(tape, ps, &xv, &init).map_err(|e| EngineError::Shape(e.to_string()))?;
        let total = tape.sum_list(&hs)?;
        Ok(tape.sum(total))
    })
    .map_err(CompileError::from)
}

#[cfg(test)]
mod tests;

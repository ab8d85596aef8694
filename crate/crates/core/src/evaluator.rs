//! Trains a compiled candidate on a desk-scale sequence task and emits an
//! [`ArchPerfRecord`], applying the Appendix B1 failure criteria.

use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::compiler::{compile_into, CellProgram, CellState, CompileError, CompileOptions};
use crate::dsl::{arch_id, canonicalize, Architecture};
use crate::engine::{EngineError, Optimizer, OptimizerConfig, ParamId, ParamSet, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("corpus has {found} distinct symbols, vocab_size allows {limit}")]
    VocabOverflow { found: usize, limit: usize },
    #[error("split too small: {0}")]
    TooSmall(String),
    #[error("invalid task spec: {0}")]
    Invalid(String),
    #[error("reading corpus: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    CharLm,
    CopyMemory,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::CharLm => "char_lm",
            TaskKind::CopyMemory => "copy_memory",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "char_lm" => Some(TaskKind::CharLm),
            "copy_memory" => Some(TaskKind::CopyMemory),
            _ => None,
        }
    }
}

/// Task description.
///
/// For `copy_memory` the split sizes count sequences; for `char_lm` they are
/// proportions of the corpus (remaining tokens go to the test split).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub corpus: Option<PathBuf>,
    /// Inline corpus, used when `corpus` is unset.
    pub text: Option<String>,
    pub seed: u64,
    /// Maximum vocabulary (char_lm) or exact vocabulary (copy_memory:
    /// blank, delimiter and `vocab_size - 2` symbols).
    pub vocab_size: usize,
    /// BPTT window / sequence length.
    pub seq_len: usize,
    pub batch_size: usize,
    pub train_size: usize,
    pub valid_size: usize,
    pub test_size: usize,
    /// Symbols to memorize (copy_memory).
    pub copy_length: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            kind: TaskKind::CopyMemory,
            corpus: None,
            text: None,
            seed: 1,
            vocab_size: 6,
            seq_len: 12,
            batch_size: 16,
            train_size: 256,
            valid_size: 64,
            test_size: 64,
            copy_length: 3,
        }
    }
}

/// A run of timesteps: `inputs[t][b]`, `targets[t][b]`. When `carry` is
/// set the recurrent state continues from the previous segment.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
    pub carry: bool,
}

impl Segment {
    pub fn tokens(&self) -> usize {
        self.targets.iter().map(Vec::len).sum()
    }

    pub fn batch(&self) -> usize {
        self.inputs[0].len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub kind: TaskKind,
    pub vocab: Vec<String>,
    pub train: Vec<Segment>,
    pub valid: Vec<Segment>,
    pub test: Vec<Segment>,
    /// Token counts of the train/valid/test splits.
    pub split_tokens: [usize; 3],
}

impl Task {
    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    /// Cross-entropy of predicting the marginal label distribution of the
    /// validation targets (the constant-prediction baseline).
    pub fn baseline_loss(&self) -> f64 {
        let mut counts = vec![0usize; self.vocab_size()];
        for s in &self.valid {
            s.targets.iter().flatten().for_each(|&t| counts[t] += 1);
        }
        let total: usize = counts.iter().sum();
        counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / total as f64;
                -p * p.ln()
            })
            .sum()
    }
}

pub fn make_task(spec: &TaskSpec) -> Result<Task, TaskError> {
    if spec.seq_len == 0 || spec.batch_size == 0 {
        return Err(TaskError::Invalid("seq_len and batch_size must be positive".into()));
    }
    match spec.kind {
        TaskKind::CharLm => char_lm(spec),
        TaskKind::CopyMemory => copy_memory(spec),
    }
}

fn char_lm(spec: &TaskSpec) -> Result<Task, TaskError> {
    let text = match (&spec.corpus, &spec.text) {
        (Some(p), _) => std::fs::read_to_string(p)?,
        (None, Some(t)) => t.clone(),
        (None, None) => return Err(TaskError::EmptyCorpus),
    };
    let chars: Vec<char> = text.chars().collect();
    if chars.is_empty() {
        return Err(TaskError::EmptyCorpus);
    }
    let mut symbols: Vec<char> = chars.clone();
    symbols.sort_unstable();
    symbols.dedup();
    if spec.vocab_size > 0 && symbols.len() > spec.vocab_size {
        return Err(TaskError::VocabOverflow { found: symbols.len(), limit: spec.vocab_size });
    }
    let ids: Vec<usize> = chars.iter().map(|c| symbols.binary_search(c).expect("in vocab")).collect();
    let n = ids.len();
    let weights = [spec.train_size, spec.valid_size, spec.test_size];
    let total_w: usize = weights.iter().sum();
    if total_w == 0 {
        return Err(TaskError::Invalid("split sizes are all zero".into()));
    }
    let n_train = n * weights[0] / total_w;
    let n_valid = n * weights[1] / total_w;
    let bounds = [0, n_train, n_train + n_valid, n];
    let mut splits = Vec::new();
    for (i, name) in ["train", "valid", "test"].iter().enumerate() {
        let part = &ids[bounds[i]..bounds[i + 1]];
        splits.push(if weights[i] == 0 { Vec::new() } else { batchify(part, spec, name)? });
    }
    let test = splits.pop().expect("three splits");
    let valid = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    Ok(Task {
        kind: TaskKind::CharLm,
        vocab: symbols.iter().map(|c| c.to_string()).collect(),
        train,
        valid,
        test,
        split_tokens: [n_train, n_valid, n - n_train - n_valid],
    })
}

/// Lays a token stream out as `batch` parallel columns cut into windows.
fn batchify(stream: &[usize], spec: &TaskSpec, name: &str) -> Result<Vec<Segment>, TaskError> {
    let b = spec.batch_size.min(stream.len().saturating_sub(1)).max(1);
    let m = stream.len().saturating_sub(1) / b;
    if m == 0 {
        return Err(TaskError::TooSmall(format!("{name} split has {} tokens", stream.len())));
    }
    let mut segs = Vec::new();
    let mut start = 0;
    while start < m {
        let len = spec.seq_len.min(m - start);
        let inputs = (0..len).map(|t| (0..b).map(|j| stream[j * m + start + t]).collect()).collect();
        let targets = (0..len).map(|t| (0..b).map(|j| stream[j * m + start + t + 1]).collect()).collect();
        segs.push(Segment { inputs, targets, carry: start > 0 });
        start += len;
    }
    Ok(segs)
}

/// Blank token of `copy_memory`.
pub const COPY_BLANK: usize = 0;
/// Delimiter token of `copy_memory`.
pub const COPY_DELIM: usize = 1;

fn copy_memory(spec: &TaskSpec) -> Result<Task, TaskError> {
    let k = spec.copy_length;
    if spec.vocab_size < 3 || k == 0 || spec.seq_len < 2 * k + 1 {
        return Err(TaskError::Invalid(format!(
            "copy_memory needs vocab_size >= 3, copy_length >= 1 and seq_len >= 2*copy_length+1 (got {}, {k}, {})",
            spec.vocab_size, spec.seq_len
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let l = spec.seq_len;
    let mut make_split = |count: usize| -> Vec<Segment> {
        let mut segs = Vec::new();
        let mut left = count;
        while left > 0 {
            let b = spec.batch_size.min(left);
            left -= b;
            let mut inputs = vec![vec![COPY_BLANK; b]; l];
            let mut targets = vec![vec![COPY_BLANK; b]; l];
            for j in 0..b {
                for i in 0..k {
                    let s = rng.gen_range(2..spec.vocab_size);
                    inputs[i][j] = s;
                    targets[l - k + i][j] = s;
                }
                inputs[l - k - 1][j] = COPY_DELIM;
            }
            segs.push(Segment { inputs, targets, carry: false });
        }
        segs
    };
    let train = make_split(spec.train_size);
    let valid = make_split(spec.valid_size);
    let test = make_split(spec.test_size);
    if train.is_empty() || valid.is_empty() {
        return Err(TaskError::TooSmall("copy_memory needs train and valid sequences".into()));
    }
    let mut vocab = vec!["_".to_string(), "|".to_string()];
    vocab.extend((2..spec.vocab_size).map(|i| format!("s{i}")));
    Ok(Task {
        kind: TaskKind::CopyMemory,
        vocab,
        split_tokens: [spec.train_size * l, spec.valid_size * l, spec.test_size * l],
        train,
        valid,
        test,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    pub lr_decay_factor: f64,
    pub decay_on_no_improve: bool,
    pub dropout: f64,
    pub tie_embeddings: bool,
    pub failure_ppl_threshold: f64,
    pub failure_check_epoch: usize,
    /// Seconds; checked before every epoch.
    pub wall_clock_budget: Option<f64>,
    pub hidden_size: usize,
    pub layers: usize,
    pub gate3_inner_sigmoid: bool,
    /// Stop an epoch after this many training segments.
    pub max_train_segments: Option<usize>,
    /// A hidden or memory state with a larger magnitude counts as exploded.
    pub divergence_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            optimizer: OptimizerConfig { clip_value: Some(0.075), ..OptimizerConfig::sgd(1.0) },
            lr_decay_factor: 4.0,
            decay_on_no_improve: true,
            dropout: 0.0,
            tie_embeddings: true,
            failure_ppl_threshold: 500.0,
            failure_check_epoch: 2,
            wall_clock_budget: None,
            hidden_size: 64,
            layers: 2,
            gate3_inner_sigmoid: false,
            max_train_segments: None,
            divergence_threshold: 1e6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        // `epochs == 0` is a zero budget: the evaluation times out.
        if !((self.epochs == 0 || self.epochs >= self.failure_check_epoch) && self.failure_check_epoch >= 1) {
            return Err(format!(
                "need epochs ({}) == 0 or >= failure_check_epoch ({}) >= 1",
                self.epochs, self.failure_check_epoch
            ));
        }
        if self.hidden_size == 0 || self.layers == 0 {
            return Err("hidden_size and layers must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err("dropout must be in [0, 1)".into());
        }
        if !(self.optimizer.learning_rate > 0.0) {
            return Err("learning_rate must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Random,
    Rl,
    Seed,
    Human,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    Diverged,
    FailedThreshold,
    Invalid,
    Timeout,
}

/// One architecture–performance pair. `valid_metric` is the natural-log
/// validation loss (perplexity = exp).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchPerfRecord {
    pub id: String,
    pub dsl: String,
    pub ct_node: Option<usize>,
    pub source: Source,
    pub task: String,
    pub status: Status,
    pub valid_metric: Option<f64>,
    pub test_metric: Option<f64>,
    pub epochs_run: usize,
    pub wall_seconds: f64,
    pub batch_index: usize,
    pub timestamp: u64,
}

impl ArchPerfRecord {
    pub fn is_ok(&self) -> bool {
        self.status == Status::Ok
    }

    /// A record for `arch` with the given outcome and default provenance,
    /// e.g. for synthetic ranker training data.
    pub fn synthetic(arch: &Architecture, status: Status, valid_metric: Option<f64>) -> Self {
        let canon = canonicalize(arch);
        ArchPerfRecord {
            id: arch_id(&canon),
            dsl: canon.render(),
            ct_node: canon.ct_node,
            source: Source::Human,
            task: "synthetic".into(),
            status,
            valid_metric,
            test_metric: valid_metric,
            epochs_run: 0,
            wall_seconds: 0.0,
            batch_index: 0,
            timestamp: 0,
        }
    }

    pub fn architecture(&self) -> Option<Architecture> {
        crate::dsl::parse(&self.dsl).ok()
    }
}

/// Provenance and reproducibility inputs of one evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalContext {
    pub source: Source,
    pub batch_index: usize,
    /// Global seed; the evaluation seed is derived from it and the id.
    pub seed: u64,
    pub timestamp: u64,
    /// Record `wall_seconds` as 0 so stores are byte-replayable.
    pub deterministic_clock: bool,
}

impl Default for EvalContext {
    fn default() -> Self {
        EvalContext { source: Source::Human, batch_index: 0, seed: 0, timestamp: 0, deterministic_clock: true }
    }
}

/// Per-evaluation seed from the global seed and the architecture id.
pub fn derive_seed(seed: u64, id: &str) -> u64 {
    let digest = Sha256::new().chain_update(seed.to_le_bytes()).chain_update(id.as_bytes()).finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Stacked-cell sequence model: embedding, `layers` cells, output softmax.
pub struct Model {
    pub cells: Vec<CellProgram>,
    divergence_threshold: f64,
    pub params: ParamSet,
    emb: ParamId,
    out_w: Option<ParamId>,
    out_b: ParamId,
    hidden: usize,
}

enum Failure {
    Diverged,
    Other,
}

impl From<EngineError> for Failure {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Divergence(_) | EngineError::NonFinite(_) | EngineError::NonFiniteGradient(_) => Failure::Diverged,
            _ => Failure::Other,
        }
    }
}

impl From<CompileError> for Failure {
    fn from(e: CompileError) -> Self {
        match e {
            CompileError::Divergence { .. } => Failure::Diverged,
            CompileError::Engine(e) => e.into(),
            _ => Failure::Other,
        }
    }
}

impl Model {
    pub fn new(arch: &Architecture, vocab: usize, cfg: &TrainConfig, seed: u64) -> Result<Self, CompileError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let h = cfg.hidden_size;
        let emb = params.add("emb", Tensor::uniform(&[vocab, h], 0.04, &mut rng));
        let opts = CompileOptions {
            input_size: h,
            hidden_size: h,
            fuse: true,
            gate3_inner_sigmoid: cfg.gate3_inner_sigmoid,
            seed,
        };
        let cells = (0..cfg.layers)
            .map(|l| compile_into(arch, &opts, &mut params, &format!("l{l}."), &mut rng))
            .collect::<Result<Vec<_>, _>>()?;
        let out_w = (!cfg.tie_embeddings).then(|| {
            let bound = 1.0 / (h as f64).sqrt();
            params.add("out.w", Tensor::uniform(&[vocab, h], bound, &mut rng))
        });
        let out_b = params.add("out.b", Tensor::zeros(&[vocab]));
        Ok(Model { cells, divergence_threshold: cfg.divergence_threshold, params, emb, out_w, out_b, hidden: h })
    }

    pub fn zero_states(&self, batch: usize) -> Vec<CellState> {
        self.cells.iter().map(|c| c.zero_state(batch)).collect()
    }

    /// Mean cross-entropy over the segment; updates `states` in place with
    /// detached values.
    fn segment_loss(
        &self,
        tape: &mut Tape,
        seg: &Segment,
        states: &mut Vec<CellState>,
        dropout: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Result<Var, Failure> {
        let batch = seg.batch();
        if !seg.carry || states.first().is_none_or(|s| s.h.rows() != batch) {
            *states = self.zero_states(batch);
        }
        let (p, mut rng) = match dropout {
            Some((p, rng)) if p > 0.0 => (p, Some(rng)),
            _ => (0.0, None),
        };
        let mut drop = |tape: &mut Tape, v: Var| -> Result<Var, EngineError> {
            match rng.as_mut() {
                Some(r) => tape.dropout(v, p, true, &mut **r),
                None => Ok(v),
            }
        };
        let emb = tape.param(&self.params, self.emb);
        let mut layer_in: Vec<Var> = Vec::with_capacity(seg.inputs.len());
        for ids in &seg.inputs {
            let e = tape.embedding(emb, ids)?;
            layer_in.push(drop(tape, e)?);
        }
        for (l, cell) in self.cells.iter().enumerate() {
            let init = cell.tape_state(tape, &states[l]);
            let (hs, last) = cell.run_sequence_tape(tape, &self.params, &layer_in, &init)?;
            states[l] = CellState {
                h: tape.value(last.h).clone(),
                c: last.c.map(|c| tape.value(c).clone()),
                x_prev: tape.value(last.x_prev).clone(),
                t: last.t,
            };
            let exploded = |t: &Tensor| t.data().iter().any(|v| !(v.abs() <= self.divergence_threshold));
            if exploded(&states[l].h) || states[l].c.as_ref().is_some_and(exploded) {
                return Err(Failure::Diverged);
            }
            layer_in = hs.into_iter().map(|h| drop(tape, h)).collect::<Result<_, _>>()?;
        }
        let stacked = tape.concat_rows(&layer_in)?;
        let w = match self.out_w {
            Some(id) => tape.param(&self.params, id),
            None => emb,
        };
        let b = tape.param(&self.params, self.out_b);
        let logits = tape.affine(stacked, w, b)?;
        let targets: Vec<usize> = seg.targets.iter().flatten().copied().collect();
        Ok(tape.cross_entropy(logits, &targets)?)
    }

    /// Token-weighted mean loss over `segs` in evaluation mode.
    fn evaluate(&self, segs: &[Segment]) -> Result<f64, Failure> {
        let mut states = Vec::new();
        let (mut total, mut count) = (0.0, 0usize);
        for seg in segs {
            let mut tape = Tape::new();
            let loss = self.segment_loss(&mut tape, seg, &mut states, None)?;
            let v = tape.value(loss).item();
            if !v.is_finite() {
                return Err(Failure::Diverged);
            }
            total += v * seg.tokens() as f64;
            count += seg.tokens();
        }
        Ok(total / count.max(1) as f64)
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden
    }
}

/// Trains `arch` on `task` and returns exactly one record, whatever the
/// outcome.
pub fn train_and_score(arch: &Architecture, task: &Task, cfg: &TrainConfig, ctx: &EvalContext) -> ArchPerfRecord {
    let started = Instant::now();
    let canon = canonicalize(arch);
    let id = arch_id(&canon);
    let mut rec = ArchPerfRecord {
        id: id.clone(),
        dsl: canon.render(),
        ct_node: canon.ct_node,
        source: ctx.source,
        task: task.name().to_string(),
        status: Status::Invalid,
        valid_metric: None,
        test_metric: None,
        epochs_run: 0,
        wall_seconds: 0.0,
        batch_index: ctx.batch_index,
        timestamp: ctx.timestamp,
    };
    let finish = |mut rec: ArchPerfRecord| {
        if !ctx.deterministic_clock {
            rec.wall_seconds = started.elapsed().as_secs_f64();
        }
        rec
    };
    if cfg.validate().is_err() {
        return finish(rec);
    }
    let seed = derive_seed(ctx.seed, &id);
    let Ok(mut model) = Model::new(&canon, task.vocab_size(), cfg, seed) else {
        return finish(rec);
    };
    let Ok(mut opt) = Optimizer::new(cfg.optimizer.clone()) else {
        return finish(rec);
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut best: Option<(f64, ParamSet)> = None;
    let mut status = Status::Ok;
    'epochs: for epoch in 1..=cfg.epochs {
        if let Some(budget) = cfg.wall_clock_budget {
            if started.elapsed().as_secs_f64() >= budget {
                status = Status::Timeout;
                break;
            }
        }
        let mut states = Vec::new();
        let limit = cfg.max_train_segments.unwrap_or(usize::MAX);
        for seg in task.train.iter().take(limit) {
            let mut tape = Tape::new();
            let loss = match model.segment_loss(&mut tape, seg, &mut states, Some((cfg.dropout, &mut rng))) {
                Ok(l) => l,
                Err(Failure::Diverged) => {
                    status = Status::Diverged;
                    break 'epochs;
                }
                Err(Failure::Other) => {
                    status = Status::Invalid;
                    break 'epochs;
                }
            };
            if !tape.value(loss).item().is_finite() {
                status = Status::Diverged;
                break 'epochs;
            }
            tape.backward(loss, &mut model.params);
            if model.params.iter().any(|(_, p)| !p.grad.is_finite()) || opt.step(&mut model.params).is_err() {
                status = Status::Diverged;
                break 'epochs;
            }
        }
        rec.epochs_run = epoch;
        let valid = match model.evaluate(&task.valid) {
            Ok(v) => v,
            Err(_) => {
                status = Status::Diverged;
                break;
            }
        };
        let improved = best.as_ref().is_none_or(|(b, _)| valid < *b);
        if improved {
            best = Some((valid, model.params.clone()));
        } else if cfg.decay_on_no_improve {
            let lr = opt.cfg.learning_rate / cfg.lr_decay_factor;
            opt.set_learning_rate(lr);
        }
        if epoch == cfg.failure_check_epoch && valid.exp() > cfg.failure_ppl_threshold {
            status = Status::FailedThreshold;
            break;
        }
    }
    rec.status = status;
    if let Some((valid, params)) = best {
        if status != Status::Diverged {
            rec.valid_metric = Some(valid);
        }
        if status == Status::Ok && !task.test.is_empty() {
            model.params = params;
            rec.test_metric = model.evaluate(&task.test).ok();
        }
    }
    if rec.status == Status::Ok && rec.valid_metric.is_none() {
        // Zero epochs configured: nothing was measured.
        rec.status = Status::Timeout;
    }
    finish(rec)
}

/// Builds a model with trained-from-scratch weights for `arch` and runs its
/// first layer over the first validation sequence, returning `h_t` per step
/// (Appendix C5-style hidden-state dump; untrained, seeded weights).
pub fn hidden_trace(arch: &Architecture, task: &Task, cfg: &TrainConfig, seed: u64) -> Result<Vec<Tensor>, CompileError> {
    let model = Model::new(arch, task.vocab_size(), cfg, seed)?;
    let seg = task.valid.first().or_else(|| task.train.first()).ok_or_else(|| CompileError::Shape("task has no data".into()))?;
    let emb = &model.params.get(model.emb).value;
    let xs: Vec<Tensor> = seg.inputs.iter().map(|ids| Tensor::row(emb.row_slice(ids[0]).to_vec())).collect();
    model.cells[0].run_sequence(&model.params, &xs, &model.cells[0].zero_state(1))
}

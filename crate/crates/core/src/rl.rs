//! Reinforcement-learning generator: a tree-encoder policy that builds
//! architectures slot by slot, trained with REINFORCE.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsl::{canonical_render, ArchNode, Architecture, OpKind};
use crate::engine::{checkpoint, EngineError, Optimizer, OptimizerConfig, ParamId, ParamSet, Tape, Tensor, Var};
use crate::evaluator::Status;

/// Embedding rows: the 18 DSL kinds, then the empty slot and the target.
const EMPTY_TOKEN: usize = OpKind::ALL.len();
const TARGET_TOKEN: usize = OpKind::ALL.len() + 1;
const N_TOKENS: usize = OpKind::ALL.len() + 2;

fn kind_token(k: OpKind) -> usize {
    OpKind::ALL.iter().position(|&a| a == k).expect("kind in ALL")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    /// Encoder / head width (also the embedding width).
    pub hidden: usize,
    pub extended_dsl: bool,
    pub allow_cm1: bool,
    /// Explicit action space; overrides `extended_dsl` / `allow_cm1`.
    pub actions: Option<Vec<OpKind>>,
    /// Slots at this distance from the root must take a source.
    pub max_depth: usize,
    /// Operator budget per tree.
    pub max_nodes: usize,
    pub epsilon: f64,
    pub learning_rate: f64,
    /// EMA decay of the reward baseline; `None` disables the baseline.
    pub baseline_decay: Option<f64>,
    /// Weight of the per-step policy entropy in the loss (0 = plain
    /// REINFORCE).
    pub entropy_bonus: f64,
    /// Only `Sigmoid` may fill a `Gate3`'s third (gate) slot, so sampled
    /// trees never break the §4.1 gate restriction.
    pub gate_sigmoid: bool,
    pub seed: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            hidden: 64,
            extended_dsl: false,
            allow_cm1: false,
            actions: None,
            max_depth: 8,
            max_nodes: 21,
            epsilon: 0.05,
            learning_rate: 0.005,
            baseline_decay: Some(0.9),
            entropy_bonus: 0.0,
            gate_sigmoid: true,
            seed: 0,
        }
    }
}

impl PolicyConfig {
    pub fn action_space(&self) -> Vec<OpKind> {
        if let Some(a) = &self.actions {
            return a.clone();
        }
        OpKind::OPERATORS
            .iter()
            .chain(OpKind::SOURCES.iter())
            .copied()
            .filter(|k| self.extended_dsl || !k.is_extended())
            .filter(|&k| self.allow_cm1 || k != OpKind::Cm1)
            .collect()
    }
}

/// Partial architecture: a tree whose open slots are `None`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum PNode {
    Empty,
    Node(OpKind, Vec<PNode>),
}

impl PNode {
    /// Path of the leftmost open slot in depth-first, left-to-right order.
    pub fn first_open(&self) -> Option<Vec<usize>> {
        match self {
            PNode::Empty => Some(vec![]),
            PNode::Node(_, kids) => kids.iter().enumerate().find_map(|(i, k)| {
                k.first_open().map(|mut p| {
                    p.insert(0, i);
                    p
                })
            }),
        }
    }

    fn at_mut(&mut self, path: &[usize]) -> &mut PNode {
        match (path.split_first(), self) {
            (None, n) => n,
            (Some((&i, rest)), PNode::Node(_, kids)) => kids[i].at_mut(rest),
            _ => panic!("path through an empty slot"),
        }
    }

    fn at(&self, path: &[usize]) -> &PNode {
        match (path.split_first(), self) {
            (None, n) => n,
            (Some((&i, rest)), PNode::Node(_, kids)) => kids[i].at(rest),
            _ => panic!("path through an empty slot"),
        }
    }

    pub fn operator_count(&self) -> usize {
        match self {
            PNode::Empty => 0,
            PNode::Node(k, kids) => usize::from(k.is_operator()) + kids.iter().map(PNode::operator_count).sum::<usize>(),
        }
    }

    pub fn to_arch(&self) -> Option<ArchNode> {
        match self {
            PNode::Empty => None,
            PNode::Node(k, kids) => ArchNode::new(*k, kids.iter().map(PNode::to_arch).collect::<Option<Vec<_>>>()?).ok(),
        }
    }
}

/// Slot-filling state of one episode.
#[derive(Clone, Debug)]
pub struct PartialArch {
    pub tree: PNode,
    /// The slot marked with the target token.
    pub target: Option<Vec<usize>>,
}

impl Default for PartialArch {
    fn default() -> Self {
        PartialArch { tree: PNode::Empty, target: Some(vec![]) }
    }
}

impl PartialArch {
    pub fn is_complete(&self) -> bool {
        self.target.is_none()
    }

    /// Fills the target slot and moves the target to the next open slot.
    pub fn apply(&mut self, kind: OpKind) {
        let path = self.target.clone().expect("open slot");
        *self.tree.at_mut(&path) = PNode::Node(kind, vec![PNode::Empty; kind.arity()]);
        self.target = self.tree.first_open();
    }

    pub fn to_arch(&self) -> Option<Architecture> {
        self.tree.to_arch().map(Architecture::new)
    }
}

/// Episode: chosen action indices plus the sum of their log-probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub actions: Vec<usize>,
    pub log_prob: f64,
    pub arch: Architecture,
}

/// One JSONL line of the episode log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub tree: String,
    pub actions: Vec<String>,
    pub reward: f64,
    pub batch_index: usize,
}

/// Appendix C1 reward with an affine loss rescale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub a: f64,
    pub base_offset: f64,
    pub exp_base: f64,
    pub exp_scale: f64,
    pub exp_shift: f64,
    /// Rescaled loss = gain · loss + bias, clamped to `[0, base_offset]`.
    pub gain: f64,
    pub bias: f64,
    pub failure_reward: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            a: 0.2,
            base_offset: 140.0,
            exp_base: 4.0,
            exp_scale: 0.3815,
            exp_shift: 50.0,
            gain: 1.0,
            bias: 0.0,
            failure_reward: 0.0,
        }
    }
}

impl RewardConfig {
    /// Rescale mapping a zero loss to 20 and `trivial_loss` to 120.
    pub fn calibrated(trivial_loss: f64) -> Self {
        RewardConfig { gain: 100.0 / trivial_loss.max(1e-9), bias: 20.0, ..Default::default() }
    }

    /// The formula on an already-rescaled loss.
    pub fn formula(&self, l: f64) -> f64 {
        let d = self.base_offset - l;
        self.a * d + self.exp_base.powf(self.exp_scale * d - self.exp_shift)
    }

    pub fn reward(&self, loss: Option<f64>, status: Status) -> f64 {
        match (status, loss) {
            (Status::Ok, Some(l)) if l.is_finite() => {
                self.formula((self.gain * l + self.bias).clamp(0.0, self.base_offset))
            }
            _ => self.failure_reward,
        }
    }
}

/// The six Appendix C1 priors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Prior {
    Depth,
    UsesInputsMmActivation,
    NoIdenticalParentChild,
    NoActivationOfActivation,
    DistinctGateInputs,
    MmOnSources,
}

pub const PRIORS: [Prior; 6] = [
    Prior::Depth,
    Prior::UsesInputsMmActivation,
    Prior::NoIdenticalParentChild,
    Prior::NoActivationOfActivation,
    Prior::DistinctGateInputs,
    Prior::MmOnSources,
];

impl Prior {
    pub fn holds(self, root: &ArchNode) -> bool {
        let mut all = true;
        let mut kinds = Vec::new();
        let mut check_edges = |f: &dyn Fn(&ArchNode) -> bool| {
            root.walk(&mut |n, _| {
                if !f(n) {
                    all = false;
                }
            });
            all
        };
        match self {
            Prior::Depth => (3..=11).contains(&root.depth()),
            Prior::UsesInputsMmActivation => {
                root.walk(&mut |n, _| kinds.push(n.op));
                kinds.contains(&OpKind::X)
                    && kinds.contains(&OpKind::Hm1)
                    && kinds.contains(&OpKind::MM)
                    && kinds.iter().any(|k| k.is_activation())
            }
            Prior::NoIdenticalParentChild => check_edges(&|n| n.children.iter().all(|c| c.op != n.op || c.op.is_source())),
            Prior::NoActivationOfActivation => {
                check_edges(&|n| !n.op.is_activation() || n.children.iter().all(|c| !c.op.is_activation()))
            }
            Prior::DistinctGateInputs => check_edges(&|n| {
                if n.op != OpKind::Gate3 {
                    return true;
                }
                let r: Vec<String> = n.children.iter().map(canonical_render).collect();
                r[0] != r[1] && r[0] != r[2] && r[1] != r[2]
            }),
            Prior::MmOnSources => check_edges(&|n| n.op != OpKind::MM || n.children[0].op.is_source()),
        }
    }
}

/// Fraction of priors satisfied by `root`.
pub fn prior_fraction(root: &ArchNode) -> f64 {
    PRIORS.iter().filter(|p| p.holds(root)).count() as f64 / PRIORS.len() as f64
}

pub fn satisfies_priors(root: &ArchNode) -> bool {
    PRIORS.iter().all(|p| p.holds(root))
}

/// Terminal pre-training reward in `[0, 1.5]`: the mean of depth credit
/// (`depth / 3` when too shallow), the fraction of {x_t, h_tm1, MM,
/// activation} present and Gate3-input distinctness, plus 0.5 when all
/// priors hold. The local priors are taught per step instead, see
/// [`pretrain_priors`].
pub fn prior_reward(root: &ArchNode) -> f64 {
    let mut kinds = Vec::new();
    root.walk(&mut |n, _| kinds.push(n.op));
    let depth = root.depth();
    let depth_credit = if depth < 3 { depth as f64 / 3.0 } else if depth <= 11 { 1.0 } else { 0.0 };
    let uses = [
        kinds.contains(&OpKind::X),
        kinds.contains(&OpKind::Hm1),
        kinds.contains(&OpKind::MM),
        kinds.iter().any(|k| k.is_activation()),
    ];
    let uses_credit = uses.iter().filter(|&&b| b).count() as f64 / 4.0;
    let gate = f64::from(u8::from(Prior::DistinctGateInputs.holds(root)));
    (depth_credit + uses_credit + gate) / 3.0 + if satisfies_priors(root) { 0.5 } else { 0.0 }
}

#[derive(Clone, Copy, Debug)]
struct Lstm {
    w: ParamId,
    b: ParamId,
}

/// Policy parameters and the REINFORCE state.
#[derive(Clone, Debug)]
pub struct Policy {
    pub cfg: PolicyConfig,
    pub params: ParamSet,
    pub actions: Vec<OpKind>,
    emb: ParamId,
    encoder: Lstm,
    pre_w: ParamId,
    pre_b: ParamId,
    head: Lstm,
    out_w: ParamId,
    out_b: ParamId,
    optimizer: Optimizer,
    /// EMA of rewards; `None` until the first update.
    pub baseline: Option<f64>,
}

/// Result of one REINFORCE update.
#[derive(Clone, Debug, PartialEq)]
pub struct UpdateReport {
    pub episodes: usize,
    pub mean_reward: f64,
    pub baseline: f64,
    pub skipped: bool,
}

fn lstm_params(ps: &mut ParamSet, name: &str, h: usize, rng: &mut ChaCha8Rng) -> Lstm {
    let bound = 1.0 / ((2 * h) as f64).sqrt();
    let w = ps.add(format!("{name}.w"), Tensor::uniform(&[4 * h, 2 * h], bound, rng));
    let mut bias = vec![0.0; 4 * h];
    bias[h..2 * h].fill(1.0);
    let b = ps.add(format!("{name}.b"), Tensor::vector(bias));
    Lstm { w, b }
}

fn lstm_step(tape: &mut Tape, ps: &ParamSet, cell: Lstm, h_dim: usize, x: Var, h: Var, c: Var) -> Result<(Var, Var), EngineError> {
    let w = tape.param(ps, cell.w);
    let b = tape.param(ps, cell.b);
    let xh = tape.concat_cols(&[x, h])?;
    let z = tape.affine(xh, w, b)?;
    let gate = |tape: &mut Tape, k: usize| tape.slice_cols(z, k * h_dim, h_dim);
    let i = gate(tape, 0)?;
    let i = tape.sigmoid(i);
    let f = gate(tape, 1)?;
    let f = tape.sigmoid(f);
    let o = gate(tape, 2)?;
    let o = tape.sigmoid(o);
    let g = gate(tape, 3)?;
    let g = tape.tanh(g);
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c2 = tape.add(fc, ig)?;
    let tc = tape.tanh(c2);
    Ok((tape.mul(o, tc)?, c2))
}

/// Encoding-tree view with the target marked, used as a cache key.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
enum ENode {
    Empty,
    Target,
    Node(OpKind, Vec<ENode>),
}

fn mark(tree: &PNode, target: Option<&[usize]>) -> ENode {
    match tree {
        PNode::Empty => {
            if target.is_some_and(|t| t.is_empty()) {
                ENode::Target
            } else {
                ENode::Empty
            }
        }
        PNode::Node(k, kids) => ENode::Node(
            *k,
            kids.iter()
                .enumerate()
                .map(|(i, c)| {
                    let sub = target.and_then(|t| t.split_first()).filter(|(&j, _)| j == i).map(|(_, rest)| rest);
                    mark(c, sub)
                })
                .collect(),
        ),
    }
}

/// Per-episode tape state: encoder cache and head recurrent state.
struct Rollout {
    cache: HashMap<ENode, Var>,
    head_h: Var,
    head_c: Var,
    zero: Var,
}

impl Policy {
    pub fn new(cfg: PolicyConfig) -> Result<Self, EngineError> {
        let actions = cfg.action_space();
        if !actions.iter().any(|k| k.is_operator()) || !actions.iter().any(|k| k.is_source()) {
            return Err(EngineError::Config("action space needs an operator and a source".into()));
        }
        let h = cfg.hidden.max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParamSet::new();
        let emb = params.add("emb", Tensor::uniform(&[N_TOKENS, h], 0.5, &mut rng));
        let encoder = lstm_params(&mut params, "enc", h, &mut rng);
        let bound = 1.0 / (h as f64).sqrt();
        let pre_w = params.add("pre.w", Tensor::uniform(&[h, h], bound, &mut rng));
        let pre_b = params.add("pre.b", Tensor::zeros(&[h]));
        let head = lstm_params(&mut params, "head", h, &mut rng);
        let out_w = params.add("out.w", Tensor::uniform(&[actions.len(), h], bound, &mut rng));
        let out_b = params.add("out.b", Tensor::zeros(&[actions.len()]));
        let optimizer = Optimizer::new(OptimizerConfig { clip_norm: Some(5.0), ..OptimizerConfig::adam(cfg.learning_rate) })?;
        Ok(Policy { cfg, params, actions, emb, encoder, pre_w, pre_b, head, out_w, out_b, optimizer, baseline: None })
    }

    fn rollout(&self, tape: &mut Tape) -> Rollout {
        let zero = tape.constant(Tensor::zeros(&[1, self.cfg.hidden.max(1)]));
        Rollout { cache: HashMap::new(), head_h: zero, head_c: zero, zero }
    }

    /// Each node runs the shared LSTM over its token embedding and then its
    /// children's states, from a reset state; the node state is the final h.
    fn encode(&self, tape: &mut Tape, ps: &ParamSet, node: &ENode, ro: &mut Rollout) -> Result<Var, EngineError> {
        if let Some(&v) = ro.cache.get(node) {
            return Ok(v);
        }
        let (token, kids): (usize, &[ENode]) = match node {
            ENode::Empty => (EMPTY_TOKEN, &[]),
            ENode::Target => (TARGET_TOKEN, &[]),
            ENode::Node(k, kids) => (kind_token(*k), kids),
        };
        let child_states = kids.iter().map(|c| self.encode(tape, ps, c, ro)).collect::<Result<Vec<_>, _>>()?;
        let emb = tape.param(ps, self.emb);
        let x = tape.embedding(emb, &[token])?;
        let h_dim = self.cfg.hidden.max(1);
        let (mut h, mut c) = lstm_step(tape, ps, self.encoder, h_dim, x, ro.zero, ro.zero)?;
        for s in child_states {
            (h, c) = lstm_step(tape, ps, self.encoder, h_dim, s, h, c)?;
        }
        ro.cache.insert(node.clone(), h);
        Ok(h)
    }

    /// Encoding of a partial architecture (root state).
    pub fn encode_partial(&self, p: &PartialArch) -> Result<Tensor, EngineError> {
        let mut tape = Tape::new();
        let mut ro = self.rollout(&mut tape);
        let e = self.encode(&mut tape, &self.params, &mark(&p.tree, p.target.as_deref()), &mut ro)?;
        Ok(tape.value(e).clone())
    }

    /// Legal-action mask at the current target slot.
    pub fn legal_mask(&self, p: &PartialArch) -> Vec<bool> {
        let path = p.target.as_deref().unwrap_or(&[]);
        let at_root = path.is_empty();
        let force_leaf = path.len() >= self.cfg.max_depth || p.tree.operator_count() >= self.cfg.max_nodes;
        let gate_slot = self.cfg.gate_sigmoid
            && !force_leaf
            && path.last() == Some(&2)
            && matches!(p.tree.at(&path[..path.len() - 1]), PNode::Node(OpKind::Gate3, _))
            && self.actions.contains(&OpKind::Sigmoid);
        self.actions
            .iter()
            .map(|&k| {
                if gate_slot {
                    k == OpKind::Sigmoid
                } else if k.is_source() {
                    !at_root || force_leaf
                } else {
                    !force_leaf
                }
            })
            .collect()
    }

    /// Log-probabilities of all actions at the target (masked entries are
    /// `-inf`), advancing the head state.
    fn step_logits(&self, tape: &mut Tape, ps: &ParamSet, p: &PartialArch, ro: &mut Rollout) -> Result<(Var, Vec<bool>), EngineError> {
        let enc = self.encode(tape, ps, &mark(&p.tree, p.target.as_deref()), ro)?;
        let (pw, pb) = (tape.param(ps, self.pre_w), tape.param(ps, self.pre_b));
        let z = tape.affine(enc, pw, pb)?;
        let z = tape.relu(z);
        let (h, c) = lstm_step(tape, ps, self.head, self.cfg.hidden.max(1), z, ro.head_h, ro.head_c)?;
        ro.head_h = h;
        ro.head_c = c;
        let (ow, ob) = (tape.param(ps, self.out_w), tape.param(ps, self.out_b));
        let logits = tape.affine(h, ow, ob)?;
        let mask = self.legal_mask(p);
        Ok((tape.log_softmax_masked(logits, &mask)?, mask))
    }

    /// Action distribution (probabilities) at the first slot of `p`, with a
    /// fresh head state. Illegal actions have probability exactly zero.
    pub fn action_probs(&self, p: &PartialArch) -> Result<Vec<f64>, EngineError> {
        let mut tape = Tape::new();
        let mut ro = self.rollout(&mut tape);
        let (lp, mask) = self.step_logits(&mut tape, &self.params, p, &mut ro)?;
        Ok(tape.value(lp).data().iter().zip(mask).map(|(v, m)| if m { v.exp() } else { 0.0 }).collect())
    }

    /// Samples one complete architecture with ε-greedy exploration.
    pub fn sample_episode(&self, epsilon: f64, rng: &mut impl Rng) -> Result<Episode, EngineError> {
        let mut tape = Tape::new();
        let mut ro = self.rollout(&mut tape);
        let mut p = PartialArch::default();
        let mut actions = Vec::new();
        let mut log_prob = 0.0;
        while !p.is_complete() {
            let (lp, mask) = self.step_logits(&mut tape, &self.params, &p, &mut ro)?;
            let lp = tape.value(lp).data().to_vec();
            let a = choose_action(&lp, &mask, epsilon, rng);
            log_prob += lp[a];
            actions.push(a);
            p.apply(self.actions[a]);
        }
        let arch = p.to_arch().expect("complete tree");
        Ok(Episode { actions, log_prob, arch })
    }

    /// Replays `actions` on `tape` with `ps`; per step returns
    /// `log π(a_t | s_t)` and the entropy of the masked distribution.
    pub fn replay_steps(&self, tape: &mut Tape, ps: &ParamSet, actions: &[usize]) -> Result<Vec<(Var, Var)>, EngineError> {
        let mut ro = self.rollout(tape);
        let mut p = PartialArch::default();
        let mut out = Vec::with_capacity(actions.len());
        for &a in actions {
            if p.is_complete() {
                return Err(EngineError::Config("episode continues past a complete tree".into()));
            }
            let (lp, mask) = self.step_logits(tape, ps, &p, &mut ro)?;
            if !mask[a] {
                return Err(EngineError::Config(format!("illegal action {a}")));
            }
            let picked = tape.pick(lp, a);
            // Masked log-probs are 0, so exp gives 1 there; zero them out.
            let probs = tape.exp(lp);
            let keep = Tensor::matrix(1, mask.len(), mask.iter().map(|&m| f64::from(u8::from(m))).collect());
            let probs = tape.mul_const(probs, keep)?;
            let plogp = tape.mul(probs, lp)?;
            let neg_entropy = tape.sum(plogp);
            out.push((picked, tape.scale(neg_entropy, -1.0)));
            p.apply(self.actions[a]);
        }
        if out.is_empty() {
            return Err(EngineError::Config("empty episode".into()));
        }
        Ok(out)
    }

    /// Σ log π(a_t | s_t) of replaying `actions` on `tape` with `ps`.
    pub fn replay_log_prob(&self, tape: &mut Tape, ps: &ParamSet, actions: &[usize]) -> Result<Var, EngineError> {
        let terms: Vec<Var> = self.replay_steps(tape, ps, actions)?.into_iter().map(|t| t.0).collect();
        tape.sum_list(&terms)
    }

    /// `−(1/n) Σ_e Σ_t (w_{e,t} log π(a_{e,t}) + β H_{e,t})` for per-step
    /// advantages `w` and entropy bonus `β = cfg.entropy_bonus`.
    pub fn weighted_policy_loss(&self, tape: &mut Tape, ps: &ParamSet, episodes: &[(Vec<usize>, Vec<f64>)]) -> Result<Var, EngineError> {
        let mut terms = Vec::new();
        let n = episodes.len() as f64;
        for (actions, weights) in episodes {
            for ((lp, ent), w) in self.replay_steps(tape, ps, actions)?.into_iter().zip(weights) {
                terms.push(tape.scale(lp, -w / n));
                if self.cfg.entropy_bonus != 0.0 {
                    terms.push(tape.scale(ent, -self.cfg.entropy_bonus / n));
                }
            }
        }
        tape.sum_list(&terms)
    }

    /// REINFORCE loss `−(1/n) Σ_e (R_e − b) Σ_t log π` on `tape`.
    pub fn policy_loss(&self, tape: &mut Tape, ps: &ParamSet, episodes: &[(Vec<usize>, f64)], baseline: f64) -> Result<Var, EngineError> {
        let weighted: Vec<(Vec<usize>, Vec<f64>)> =
            episodes.iter().map(|(a, r)| (a.clone(), vec![r - baseline; a.len()])).collect();
        self.weighted_policy_loss(tape, ps, &weighted)
    }

    /// One gradient step on per-step advantages; returns `false` (and
    /// leaves parameters unchanged) on a non-finite gradient or update.
    pub fn apply_weighted(&mut self, episodes: &[(Vec<usize>, Vec<f64>)]) -> Result<bool, EngineError> {
        self.params.zero_grad();
        let mut tape = Tape::new();
        let loss = self.weighted_policy_loss(&mut tape, &self.params, episodes)?;
        tape.backward(loss, &mut self.params);
        if self.params.iter().any(|(_, p)| !p.grad.is_finite()) {
            self.params.zero_grad();
            return Ok(false);
        }
        let snapshot = self.params.clone();
        if self.optimizer.step(&mut self.params).is_err() {
            self.params = snapshot;
            return Ok(false);
        }
        Ok(true)
    }

    /// Current baseline for a batch with mean reward `mean`.
    fn baseline_for(&self, mean: f64) -> f64 {
        match self.cfg.baseline_decay {
            None => 0.0,
            Some(_) => self.baseline.unwrap_or(mean),
        }
    }

    fn update_baseline(&mut self, baseline: f64, mean: f64) {
        if let Some(d) = self.cfg.baseline_decay {
            self.baseline = Some(d * baseline + (1.0 - d) * mean);
        }
    }

    /// One gradient step on a batch of `(actions, reward)` episodes.
    /// Non-finite gradients skip the batch and leave parameters unchanged.
    pub fn reinforce_update(&mut self, episodes: &[(Vec<usize>, f64)]) -> Result<UpdateReport, EngineError> {
        if episodes.is_empty() {
            return Err(EngineError::Config("no episodes".into()));
        }
        let mean = episodes.iter().map(|e| e.1).sum::<f64>() / episodes.len() as f64;
        let baseline = self.baseline_for(mean);
        let weighted: Vec<(Vec<usize>, Vec<f64>)> =
            episodes.iter().map(|(a, r)| (a.clone(), vec![r - baseline; a.len()])).collect();
        let ok = self.apply_weighted(&weighted)?;
        if ok {
            self.update_baseline(baseline, mean);
        }
        Ok(UpdateReport { episodes: episodes.len(), mean_reward: mean, baseline, skipped: !ok })
    }

    /// Action tokens of an episode, for the episode log.
    pub fn action_names(&self, actions: &[usize]) -> Vec<String> {
        actions.iter().map(|&a| self.actions[a].token().to_string()).collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), EngineError> {
        checkpoint::save_params(&self.params, path)
    }

    pub fn load(&mut self, path: &Path) -> Result<(), EngineError> {
        checkpoint::load_params(&mut self.params, path)
    }
}

/// ε-greedy choice: uniform over legal actions with probability
/// `epsilon`, otherwise a multinomial draw from `log_probs` (already masked
/// and normalized).
pub fn choose_action(log_probs: &[f64], mask: &[bool], epsilon: f64, rng: &mut impl Rng) -> usize {
    let legal: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    if rng.gen::<f64>() < epsilon {
        return legal[rng.gen_range(0..legal.len())];
    }
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for &i in &legal {
        acc += log_probs[i].exp();
        if u < acc {
            return i;
        }
    }
    *legal.last().expect("a legal action")
}

/// Outcome of [`pretrain_priors`].
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    pub episodes: usize,
    /// All-priors satisfaction rate over the last (up to) 500 episodes.
    pub moving_rate: f64,
}

/// Settings of [`pretrain_priors`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    /// Episode budget.
    pub episodes: usize,
    pub batch_size: usize,
    /// Subtracted from the advantage of a step that breaks a local prior.
    pub local_penalty: f64,
    /// Exploration during pre-training; the entropy bonus usually suffices.
    pub epsilon: f64,
    /// Stop once the 500-episode moving all-priors rate reaches this.
    pub stop_rate: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { episodes: 40_000, batch_size: 32, local_penalty: 0.3, epsilon: 0.0, stop_rate: 0.95 }
    }
}

/// Whether placing `child` under `parent` breaks a local prior: identical
/// parent and child operator, an activation over an activation, or `MM`
/// over a non-source.
pub fn breaks_local_prior(parent: OpKind, child: OpKind) -> bool {
    (child.is_operator() && child == parent)
        || (parent.is_activation() && child.is_activation())
        || (parent == OpKind::MM && child.is_operator())
}

/// For each action of an episode, whether it breaks a local prior.
pub fn local_prior_breaks(kinds: &[OpKind]) -> Vec<bool> {
    let mut p = PartialArch::default();
    kinds
        .iter()
        .map(|&k| {
            let path = p.target.clone().expect("open slot");
            let bad = match path.split_last() {
                Some((_, parent_path)) => match p.tree.at(parent_path) {
                    PNode::Node(parent, _) => breaks_local_prior(*parent, k),
                    PNode::Empty => false,
                },
                None => false,
            };
            p.apply(k);
            bad
        })
        .collect()
}

/// REINFORCE pre-training on the priors, in batches of `batch_size`, until
/// `budget` episodes or a 500-episode moving all-priors rate ≥ `stop_rate`.
/// Each step's advantage is `prior_reward − baseline`, minus
/// `local_penalty` when that step itself breaks a local prior.
pub fn pretrain_priors(policy: &mut Policy, cfg: &PretrainConfig, rng: &mut impl Rng) -> Result<PretrainReport, EngineError> {
    let mut window: std::collections::VecDeque<bool> = std::collections::VecDeque::new();
    let mut done = 0;
    let (budget, batch_size, eps) = (cfg.episodes, cfg.batch_size, cfg.epsilon);
    while done < budget {
        let n = batch_size.max(1).min(budget - done);
        let mut batch = Vec::with_capacity(n);
        for _ in 0..n {
            let ep = policy.sample_episode(eps, rng)?;
            let ok = satisfies_priors(&ep.arch.root);
            window.push_back(ok);
            if window.len() > 500 {
                window.pop_front();
            }
            let kinds: Vec<OpKind> = ep.actions.iter().map(|&a| policy.actions[a]).collect();
            batch.push((ep.actions, prior_reward(&ep.arch.root), local_prior_breaks(&kinds)));
        }
        done += n;
        let mean = batch.iter().map(|b| b.1).sum::<f64>() / n as f64;
        let baseline = policy.baseline_for(mean);
        let weighted: Vec<(Vec<usize>, Vec<f64>)> = batch
            .into_iter()
            .map(|(a, r, breaks)| {
                let w = breaks.iter().map(|&b| r - baseline - if b { cfg.local_penalty } else { 0.0 }).collect();
                (a, w)
            })
            .collect();
        if policy.apply_weighted(&weighted)? {
            policy.update_baseline(baseline, mean);
        }
        if window.len() >= 500 && rate(&window) >= cfg.stop_rate {
            break;
        }
    }
    Ok(PretrainReport { episodes: done, moving_rate: rate(&window) })
}

fn rate(w: &std::collections::VecDeque<bool>) -> f64 {
    if w.is_empty() {
        0.0
    } else {
        w.iter().filter(|&&b| b).count() as f64 / w.len() as f64
    }
}

/// All-priors satisfaction rate of `n` greedy-free samples (ε = 0).
pub fn prior_satisfaction_rate(policy: &Policy, n: usize, rng: &mut impl Rng) -> Result<(f64, f64), EngineError> {
    let mut ok = 0;
    let mut depth_ok = 0;
    for _ in 0..n {
        let ep = policy.sample_episode(0.0, rng)?;
        ok += usize::from(satisfies_priors(&ep.arch.root));
        depth_ok += usize::from(Prior::Depth.holds(&ep.arch.root));
    }
    Ok((ok as f64 / n as f64, depth_ok as f64 / n as f64))
}

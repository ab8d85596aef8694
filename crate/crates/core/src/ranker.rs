//! Ranking function: a TreeLSTM regressor over (unrolled) architecture
//! trees, trained on architecture–performance pairs and used to pick the
//! candidates worth evaluating.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::{canonicalize, ArchNode, Architecture, OpKind};
use crate::engine::{checkpoint, EngineError, Optimizer, OptimizerConfig, ParamId, ParamSet, Tape, Tensor, Var};
use crate::evaluator::{ArchPerfRecord, Status};

#[derive(Debug, Error)]
pub enum RankError {
    #[error("architecture uses c_tm1 without a c_t tap; cannot unroll")]
    CtMissing,
    #[error("no usable records")]
    NoRecords,
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Leaf kinds of an encoding tree: the five sources plus `h_{t-2}` and
/// `c_{t-2}` introduced by unrolling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EncKind {
    Op(OpKind),
    Src(OpKind),
    Hm2,
    Cm2,
}

/// Tree consumed by the encoder.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct EncNode {
    pub kind: EncKind,
    pub children: Vec<EncNode>,
}

impl EncNode {
    pub fn from_arch(node: &ArchNode) -> Self {
        EncNode {
            kind: if node.op.is_source() { EncKind::Src(node.op) } else { EncKind::Op(node.op) },
            children: node.children.iter().map(EncNode::from_arch).collect(),
        }
    }

    pub fn operator_count(&self) -> usize {
        usize::from(matches!(self.kind, EncKind::Op(_))) + self.children.iter().map(EncNode::operator_count).sum::<usize>()
    }

    pub fn contains(&self, kind: EncKind) -> bool {
        self.kind == kind || self.children.iter().any(|c| c.contains(kind))
    }

    fn relabel_recurrent(&self) -> EncNode {
        let kind = match self.kind {
            EncKind::Src(OpKind::Hm1) => EncKind::Hm2,
            EncKind::Src(OpKind::Cm1) => EncKind::Cm2,
            k => k,
        };
        EncNode { kind, children: self.children.iter().map(EncNode::relabel_recurrent).collect() }
    }

    fn substitute(&self, h_copy: &EncNode, c_copy: Option<&EncNode>) -> EncNode {
        match self.kind {
            EncKind::Src(OpKind::Hm1) => h_copy.clone(),
            EncKind::Src(OpKind::Cm1) => c_copy.expect("checked by caller").clone(),
            _ => EncNode { kind: self.kind, children: self.children.iter().map(|c| c.substitute(h_copy, c_copy)).collect() },
        }
    }

    pub fn render(&self) -> String {
        let name = match self.kind {
            EncKind::Op(k) | EncKind::Src(k) => k.token().to_string(),
            EncKind::Hm2 => "h_tm2".into(),
            EncKind::Cm2 => "c_tm2".into(),
        };
        if self.children.is_empty() {
            name
        } else {
            let inner: Vec<String> = self.children.iter().map(EncNode::render).collect();
            format!("{name}({})", inner.join(","))
        }
    }
}

/// One-step unrolling: every `h_tm1` leaf becomes a copy of the whole tree
/// and every `c_tm1` leaf a copy of the `c_t` subtree, with recurrent
/// leaves inside the copies relabeled to `t-2`. Copies are not expanded
/// further.
pub fn unroll_once(arch: &Architecture) -> Result<EncNode, RankError> {
    let uses_c = arch.uses(OpKind::Cm1);
    if uses_c && arch.ct_node.is_none() {
        return Err(RankError::CtMissing);
    }
    let tree = EncNode::from_arch(&arch.root);
    let h_copy = tree.relabel_recurrent();
    let c_copy = arch.ct_subtree().map(|s| EncNode::from_arch(s).relabel_recurrent());
    if uses_c && c_copy.is_none() {
        return Err(RankError::CtMissing);
    }
    Ok(tree.substitute(&h_copy, c_copy.as_ref()))
}

const LEAVES: [EncKind; 7] = [
    EncKind::Src(OpKind::X),
    EncKind::Src(OpKind::Xm1),
    EncKind::Src(OpKind::Hm1),
    EncKind::Src(OpKind::Cm1),
    EncKind::Src(OpKind::PosEnc),
    EncKind::Hm2,
    EncKind::Cm2,
];

fn leaf_index(k: EncKind) -> usize {
    LEAVES.iter().position(|&l| l == k).expect("leaf kind")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Weight ∝ 1 / rank(target), rank 1 = best.
    InverseRank,
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RankerConfig {
    pub hidden: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub dropout: f64,
    pub unroll: bool,
    pub weighting: Weighting,
    /// Targets are clipped here; failed records take this value (ln 500).
    pub target_cap: f64,
    pub seed: u64,
}

impl Default for RankerConfig {
    fn default() -> Self {
        RankerConfig {
            hidden: 128,
            batch_size: 16,
            epochs: 30,
            learning_rate: 0.005,
            l2: 1e-4,
            dropout: 0.2,
            unroll: true,
            weighting: Weighting::InverseRank,
            target_cap: 500f64.ln(),
            seed: 0,
        }
    }
}

/// Per-operator TreeLSTM parameters.
#[derive(Clone, Debug)]
struct OpCell {
    n_ary: bool,
    iou_w: ParamId,
    iou_b: ParamId,
    f_w: ParamId,
    f_b: ParamId,
}

/// Trainable ranking function.
#[derive(Clone, Debug)]
pub struct Ranker {
    pub cfg: RankerConfig,
    pub params: ParamSet,
    leaf_emb: ParamId,
    cells: BTreeMap<OpKind, OpCell>,
    head_w: ParamId,
    head_b: ParamId,
    /// Target standardization: prediction = mean + std · head.
    norm: (f64, f64),
}

/// Training outcome.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FitReport {
    /// Mean weighted MSE (standardized units) per epoch.
    pub losses: Vec<f64>,
    pub diverged: bool,
    pub records_used: usize,
}

/// Regression target of a record: log-perplexity clipped at `cap`; failures
/// take `cap`.
pub fn record_target(rec: &ArchPerfRecord, cap: f64) -> f64 {
    match (rec.status, rec.valid_metric) {
        (Status::Ok, Some(v)) if v.is_finite() => v.min(cap),
        (Status::Timeout, Some(v)) if v.is_finite() => v.min(cap),
        _ => cap,
    }
}

impl Ranker {
    pub fn new(cfg: RankerConfig) -> Self {
        let h = cfg.hidden.max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParamSet::new();
        let leaf_emb = params.add("leaf_emb", Tensor::uniform(&[LEAVES.len(), h], 0.5, &mut rng));
        let mut cells = BTreeMap::new();
        for op in OpKind::OPERATORS {
            let n_ary = op.is_order_sensitive();
            let n = if n_ary { op.arity() } else { 1 };
            let bound = 1.0 / ((n * h) as f64).sqrt();
            let t = op.token();
            let cell = OpCell {
                n_ary,
                iou_w: params.add(format!("{t}.iou_w"), Tensor::uniform(&[3 * h, n * h], bound, &mut rng)),
                iou_b: params.add(format!("{t}.iou_b"), Tensor::zeros(&[3 * h])),
                f_w: params.add(format!("{t}.f_w"), Tensor::uniform(&[n * h, n * h], bound, &mut rng)),
                f_b: params.add(format!("{t}.f_b"), Tensor::full(&[n * h], 1.0)),
            };
            cells.insert(op, cell);
        }
        let head_w = params.add("head_w", Tensor::uniform(&[1, h], 1.0 / (h as f64).sqrt(), &mut rng));
        let head_b = params.add("head_b", Tensor::zeros(&[1]));
        Ranker { cfg, params, leaf_emb, cells, head_w, head_b, norm: (0.0, 1.0) }
    }

    /// Encoding tree of `arch`: canonicalized, then optionally unrolled.
    pub fn encoding_tree(&self, arch: &Architecture) -> Result<EncNode, RankError> {
        let canon = canonicalize(arch);
        if self.cfg.unroll {
            unroll_once(&canon)
        } else {
            Ok(EncNode::from_arch(&canon.root))
        }
    }

    /// Encodes a tree bottom-up; identical subtrees share one computation.
    fn encode(&self, tape: &mut Tape, node: &EncNode, cache: &mut HashMap<EncNode, (Var, Option<Var>)>) -> Result<(Var, Option<Var>), RankError> {
        if let Some(&v) = cache.get(node) {
            return Ok(v);
        }
        let h = self.cfg.hidden.max(1);
        let out = match node.kind {
            EncKind::Op(op) => {
                let kids: Vec<(Var, Option<Var>)> =
                    node.children.iter().map(|c| self.encode(tape, c, cache)).collect::<Result<_, _>>()?;
                let cell = &self.cells[&op];
                let iou_w = tape.param(&self.params, cell.iou_w);
                let iou_b = tape.param(&self.params, cell.iou_b);
                let f_w = tape.param(&self.params, cell.f_w);
                let f_b = tape.param(&self.params, cell.f_b);
                let hs: Vec<Var> = kids.iter().map(|k| k.0).collect();
                let (iou, forgets) = if cell.n_ary {
                    let cat = tape.concat_cols(&hs)?;
                    let iou = tape.affine(cat, iou_w, iou_b)?;
                    let f_all = tape.affine(cat, f_w, f_b)?;
                    let f_all = tape.sigmoid(f_all);
                    let fs = (0..kids.len()).map(|k| tape.slice_cols(f_all, k * h, h)).collect::<Result<Vec<_>, _>>()?;
                    (iou, fs)
                } else {
                    let sum = if hs.len() == 1 { hs[0] } else { tape.sum_list(&hs)? };
                    let iou = tape.affine(sum, iou_w, iou_b)?;
                    let fs = hs
                        .iter()
                        .map(|&hk| {
                            let z = tape.affine(hk, f_w, f_b)?;
                            Ok(tape.sigmoid(z))
                        })
                        .collect::<Result<Vec<_>, EngineError>>()?;
                    (iou, fs)
                };
                let i = tape.slice_cols(iou, 0, h)?;
                let i = tape.sigmoid(i);
                let o = tape.slice_cols(iou, h, h)?;
                let o = tape.sigmoid(o);
                let u = tape.slice_cols(iou, 2 * h, h)?;
                let u = tape.tanh(u);
                let mut terms = vec![tape.mul(i, u)?];
                for (f, (_, ck)) in forgets.into_iter().zip(&kids) {
                    if let Some(ck) = ck {
                        terms.push(tape.mul(f, *ck)?);
                    }
                }
                let c = if terms.len() == 1 { terms[0] } else { tape.sum_list(&terms)? };
                let tc = tape.tanh(c);
                (tape.mul(o, tc)?, Some(c))
            }
            leaf => {
                let emb = tape.param(&self.params, self.leaf_emb);
                (tape.embedding(emb, &[leaf_index(leaf)])?, None)
            }
        };
        cache.insert(node.clone(), out);
        Ok(out)
    }

    /// Standardized prediction for one encoding tree.
    fn predict_std(&self, tape: &mut Tape, tree: &EncNode, dropout: Option<&mut ChaCha8Rng>) -> Result<Var, RankError> {
        let mut cache = HashMap::new();
        let (h, _) = self.encode(tape, tree, &mut cache)?;
        let h = match dropout {
            Some(rng) => tape.dropout(h, self.cfg.dropout, true, rng)?,
            None => h,
        };
        let w = tape.param(&self.params, self.head_w);
        let b = tape.param(&self.params, self.head_b);
        Ok(tape.affine(h, w, b)?)
    }

    /// Predicted metric (log-perplexity / loss) of `arch`.
    pub fn score(&self, arch: &Architecture) -> Result<f64, RankError> {
        let tree = self.encoding_tree(arch)?;
        self.score_tree(&tree)
    }

    pub fn score_tree(&self, tree: &EncNode) -> Result<f64, RankError> {
        let mut tape = Tape::new();
        let y = self.predict_std(&mut tape, tree, None)?;
        Ok(self.norm.0 + self.norm.1 * tape.value(y).item())
    }

    /// Scores many candidates in parallel; failures score `+inf`.
    pub fn score_all(&self, candidates: &[Architecture]) -> Vec<f64> {
        candidates.par_iter().map(|a| self.score(a).ok().filter(|v| v.is_finite()).unwrap_or(f64::INFINITY)).collect()
    }

    /// Weighted regression on de-duplicated records (first occurrence of
    /// each id wins). Training continues from the current parameters.
    pub fn fit(&mut self, records: &[ArchPerfRecord]) -> Result<FitReport, RankError> {
        let mut seen = std::collections::HashSet::new();
        let mut data: Vec<(EncNode, f64)> = Vec::new();
        for r in records {
            if !seen.insert(r.id.clone()) {
                continue;
            }
            let Some(arch) = r.architecture() else { continue };
            let Ok(tree) = self.encoding_tree(&arch) else { continue };
            data.push((tree, record_target(r, self.cfg.target_cap)));
        }
        if data.is_empty() {
            return Err(RankError::NoRecords);
        }
        let n = data.len() as f64;
        let mean = data.iter().map(|d| d.1).sum::<f64>() / n;
        let var = data.iter().map(|d| (d.1 - mean).powi(2)).sum::<f64>() / n;
        self.norm = (mean, var.sqrt().max(1e-3));
        let ys: Vec<f64> = data.iter().map(|d| (d.1 - mean) / self.norm.1).collect();

        // Sampling weights ∝ 1 / rank (rank 1 = lowest target).
        let weights: Vec<f64> = match self.cfg.weighting {
            Weighting::Uniform => vec![1.0; data.len()],
            Weighting::InverseRank => {
                let mut order: Vec<usize> = (0..data.len()).collect();
                order.sort_by(|&a, &b| data[a].1.total_cmp(&data[b].1));
                let mut w = vec![0.0; data.len()];
                for (rank, &i) in order.iter().enumerate() {
                    w[i] = 1.0 / (rank + 1) as f64;
                }
                w
            }
        };
        let sampler = WeightedIndex::new(&weights).expect("positive weights");
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0xf17);
        let opt_cfg = OptimizerConfig { l2: self.cfg.l2, clip_norm: Some(5.0), ..OptimizerConfig::adam(self.cfg.learning_rate) };
        let mut opt = Optimizer::new(opt_cfg)?;
        let mut report = FitReport { records_used: data.len(), ..Default::default() };
        let bs = self.cfg.batch_size.max(1);
        let epochs = self.cfg.epochs;
        for epoch in 0..epochs {
            // Linear decay to 10% of the base rate damps late Adam spikes.
            opt.set_learning_rate(self.cfg.learning_rate * (1.0 - 0.9 * epoch as f64 / epochs as f64));
            let draws: Vec<usize> = (0..data.len()).map(|_| sampler.sample(&mut rng)).collect();
            let mut epoch_loss = 0.0;
            let snapshot = self.params.clone();
            for chunk in draws.chunks(bs) {
                let mut tape = Tape::new();
                let mut errs = Vec::with_capacity(chunk.len());
                for &i in chunk {
                    let p = self.predict_std(&mut tape, &data[i].0, Some(&mut rng))?;
                    let y = tape.constant(Tensor::matrix(1, 1, vec![ys[i]]));
                    let d = tape.sub(p, y)?;
                    errs.push(tape.mul(d, d)?);
                }
                let total = tape.sum_list(&errs)?;
                let loss = tape.scale(total, 1.0 / chunk.len() as f64);
                let lv = tape.value(loss).item();
                if !lv.is_finite() {
                    self.params = snapshot;
                    report.diverged = true;
                    return Ok(report);
                }
                epoch_loss += lv * chunk.len() as f64;
                tape.backward(loss, &mut self.params);
                if opt.step(&mut self.params).is_err() {
                    self.params = snapshot;
                    report.diverged = true;
                    return Ok(report);
                }
            }
            report.losses.push(epoch_loss / draws.len() as f64);
        }
        Ok(report)
    }

    /// Cold start for `c_t` candidates: `h_{t-2}`, `c_{t-1}` and `c_{t-2}`
    /// embeddings copy the trained `h_{t-1}` embedding.
    pub fn bootstrap_ct_embeddings(&mut self) {
        let emb = &mut self.params.get_mut(self.leaf_emb).value;
        let h = emb.cols();
        let src = emb.row_slice(leaf_index(EncKind::Src(OpKind::Hm1))).to_vec();
        for k in [EncKind::Hm2, EncKind::Src(OpKind::Cm1), EncKind::Cm2] {
            let r = leaf_index(k);
            emb.data_mut()[r * h..(r + 1) * h].copy_from_slice(&src);
        }
    }

    /// Loss used by [`Ranker::fit`] for one (tree, target) pair without
    /// dropout, exposed for gradient checks.
    pub fn regression_loss(&self, tape: &mut Tape, params: &ParamSet, tree: &EncNode, target: f64) -> Result<Var, RankError> {
        let view = Ranker { params: params.clone(), ..self.clone() };
        let p = view.predict_std(tape, tree, None)?;
        let y = tape.constant(Tensor::matrix(1, 1, vec![target]));
        let d = tape.sub(p, y)?;
        Ok(tape.mul(d, d)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), EngineError> {
        let mut list: Vec<(String, Tensor)> = self.params.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect();
        list.push(("norm".into(), Tensor::vector(vec![self.norm.0, self.norm.1])));
        std::fs::write(path, checkpoint::encode(&list)).map_err(|e| EngineError::Checkpoint(e.to_string()))
    }

    pub fn load(&mut self, path: &Path) -> Result<(), EngineError> {
        let bytes = std::fs::read(path).map_err(|e| EngineError::Checkpoint(e.to_string()))?;
        let list = checkpoint::decode(&bytes)?;
        let mut map: HashMap<String, Tensor> = list.into_iter().collect();
        let norm = map.remove("norm").ok_or_else(|| EngineError::Checkpoint("missing norm".into()))?;
        for p in self.params.iter_mut() {
            let t = map.get(&p.name).ok_or_else(|| EngineError::Checkpoint(format!("missing `{}`", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(EngineError::Checkpoint(format!("shape of `{}`", p.name)));
            }
            p.value = t.clone();
        }
        self.norm = (norm.data()[0], norm.data()[1]);
        Ok(())
    }

    /// A ranker restored from `path`, with `cfg.hidden` taken from the
    /// checkpoint so scoring does not depend on repeating the fit config.
    pub fn from_checkpoint(mut cfg: RankerConfig, path: &Path) -> Result<Self, EngineError> {
        let bytes = std::fs::read(path).map_err(|e| EngineError::Checkpoint(e.to_string()))?;
        let list = checkpoint::decode(&bytes)?;
        let emb = list
            .iter()
            .find(|(name, _)| name == "leaf_emb")
            .ok_or_else(|| EngineError::Checkpoint("missing `leaf_emb`".into()))?;
        cfg.hidden = emb.1.cols();
        let mut ranker = Ranker::new(cfg);
        ranker.load(path)?;
        Ok(ranker)
    }
}

/// Returns the indices of `k_top` best-predicted candidates (ascending
/// score, ties by index) followed by `k_sampled` drawn without replacement
/// from the rest with probability ∝ softmax(−score / temperature).
pub fn select_indices(scores: &[f64], k_top: usize, k_sampled: usize, temperature: f64, rng: &mut impl Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    let key = |i: usize| if scores[i].is_nan() { f64::INFINITY } else { scores[i] };
    order.sort_by(|&a, &b| key(a).total_cmp(&key(b)));
    if scores.len() <= k_top + k_sampled {
        return order;
    }
    let mut out: Vec<usize> = order[..k_top].to_vec();
    let mut rest: Vec<usize> = order[k_top..].to_vec();
    let t = if temperature > 0.0 { temperature } else { 1e-12 };
    for _ in 0..k_sampled {
        let best = rest.iter().map(|&i| key(i)).fold(f64::INFINITY, f64::min);
        let w: Vec<f64> = rest
            .iter()
            .map(|&i| if best.is_finite() { (-(key(i) - best) / t).exp() } else { 1.0 })
            .collect();
        let pick = match WeightedIndex::new(&w) {
            Ok(d) => d.sample(rng),
            Err(_) => 0,
        };
        out.push(rest.remove(pick));
    }
    out
}

/// Scores `candidates` and applies [`select_indices`].
pub fn select(
    ranker: &Ranker,
    candidates: &[Architecture],
    k_top: usize,
    k_sampled: usize,
    temperature: f64,
    rng: &mut impl Rng,
) -> Vec<Architecture> {
    let scores = ranker.score_all(candidates);
    select_indices(&scores, k_top, k_sampled, temperature, rng).into_iter().map(|i| candidates[i].clone()).collect()
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

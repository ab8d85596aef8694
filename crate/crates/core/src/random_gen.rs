//! Random candidate generation: growth from `h_t` up, restriction
//! filtering, canonical de-duplication and `c_t` variant expansion.

use std::collections::{BTreeMap, HashSet};

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsl::{arch_id, canonicalize, check, enumerate_ct_taps, ArchNode, Architecture, Limits, OpKind, Violation};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    /// Maximum number of operator nodes.
    pub max_nodes: usize,
    /// Maximum distance from the root to any node, source leaves included.
    pub max_height: usize,
    pub extended_dsl: bool,
    /// Sampling weight per kind; kinds not listed weigh 1.
    pub weights: BTreeMap<OpKind, f64>,
    pub seed: u64,
    pub require_sources: Vec<OpKind>,
    /// Whether `c_tm1` may be drawn.
    pub allow_cm1: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            max_nodes: 21,
            max_height: 8,
            extended_dsl: false,
            weights: BTreeMap::new(),
            seed: 0,
            require_sources: vec![OpKind::X, OpKind::Hm1],
            allow_cm1: true,
        }
    }
}

impl GenConfig {
    pub fn limits(&self) -> Limits {
        Limits { max_nodes: self.max_nodes, max_height: self.max_height, require_sources: self.require_sources.clone() }
    }

    pub fn weight(&self, k: OpKind) -> f64 {
        self.weights.get(&k).copied().unwrap_or(1.0)
    }

    fn allowed(&self, k: OpKind) -> bool {
        (self.extended_dsl || !k.is_extended()) && (self.allow_cm1 || k != OpKind::Cm1) && self.weight(k) > 0.0
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.max_nodes == 0 {
            return Err("max_nodes must be at least 1".into());
        }
        if self.weights.values().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err("weights must be finite and nonnegative".into());
        }
        if !OpKind::SOURCES.iter().any(|&k| self.allowed(k)) {
            return Err("no source leaf has positive weight".into());
        }
        if !OpKind::OPERATORS.iter().any(|&k| self.allowed(k)) {
            return Err("no operator has positive weight".into());
        }
        Ok(())
    }
}

/// Grows one tree from the root, filling child slots left to right and
/// forcing a source leaf where another level would exceed `max_height`.
/// Gate3's third child is forced to `Sigmoid` when height allows, and a
/// child never repeats its parent's operator. The result is canonicalized.
pub fn grow_random(cfg: &GenConfig, rng: &mut impl Rng) -> Architecture {
    let ops: Vec<OpKind> = OpKind::OPERATORS.iter().copied().filter(|&k| cfg.allowed(k)).collect();
    let sources: Vec<OpKind> = OpKind::SOURCES.iter().copied().filter(|&k| cfg.allowed(k)).collect();
    let root = grow(cfg, &ops, &sources, 0, None, true, rng);
    canonicalize(&Architecture::new(root))
}

fn pick(cfg: &GenConfig, kinds: &[OpKind], rng: &mut impl Rng) -> Option<OpKind> {
    let w: Vec<f64> = kinds.iter().map(|&k| cfg.weight(k)).collect();
    WeightedIndex::new(&w).ok().map(|d| kinds[d.sample(rng)])
}

fn grow(
    cfg: &GenConfig,
    ops: &[OpKind],
    sources: &[OpKind],
    depth: usize,
    parent: Option<OpKind>,
    is_root: bool,
    rng: &mut impl Rng,
) -> ArchNode {
    let leaf = |rng: &mut dyn rand::RngCore| {
        let k = pick(cfg, sources, &mut &mut *rng).expect("validated: a source is allowed");
        ArchNode::leaf(k)
    };
    if depth >= cfg.max_height {
        return leaf(rng);
    }
    let op_choices: Vec<OpKind> = ops.iter().copied().filter(|&k| Some(k) != parent).collect();
    let pool: Vec<OpKind> = if is_root { op_choices.clone() } else { op_choices.iter().chain(sources).copied().collect() };
    let Some(kind) = pick(cfg, &pool, rng) else { return leaf(rng) };
    if kind.is_source() {
        return ArchNode::leaf(kind);
    }
    let children = (0..kind.arity())
        .map(|i| {
            if kind == OpKind::Gate3 && i == 2 && depth + 1 < cfg.max_height {
                let inner = grow(cfg, ops, sources, depth + 2, Some(OpKind::Sigmoid), false, rng);
                ArchNode::unary(OpKind::Sigmoid, inner)
            } else {
                grow(cfg, ops, sources, depth + 1, Some(kind), false, rng)
            }
        })
        .collect();
    ArchNode::new(kind, children).expect("arity respected")
}

/// All restriction violations of `arch` under `cfg`'s limits.
pub fn check_restrictions(arch: &Architecture, cfg: &GenConfig) -> Vec<Violation> {
    check(arch, &cfg.limits())
}

/// One admissible candidate per valid `c_t` tap, or `[arch]` when `c_tm1`
/// is unused. Empty when `c_tm1` is used but no tap qualifies.
pub fn expand_ct_variants(arch: &Architecture) -> Vec<Architecture> {
    if !arch.uses(OpKind::Cm1) {
        return vec![arch.clone()];
    }
    enumerate_ct_taps(&Architecture::new(arch.root.clone()))
}

/// Outcome of [`generate_batch_with`].
#[derive(Clone, Debug, Default)]
pub struct Batch {
    pub candidates: Vec<Architecture>,
    pub draws: usize,
    pub rejected: usize,
}

/// Seeds a generator from `cfg.seed` and calls [`generate_batch_with`].
pub fn generate_batch(cfg: &GenConfig, n: usize, seen: &HashSet<String>) -> Vec<Architecture> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    generate_batch_with(cfg, n, seen, &mut rng).candidates
}

/// Draws until `n` admissible, `c_t`-expanded candidates with ids outside
/// `seen` are found or `100 n` draws are spent.
pub fn generate_batch_with(cfg: &GenConfig, n: usize, seen: &HashSet<String>, rng: &mut impl Rng) -> Batch {
    let mut out = Batch::default();
    let mut ids: HashSet<String> = HashSet::new();
    let budget = 100 * n.max(1);
    while out.candidates.len() < n && out.draws < budget {
        out.draws += 1;
        let arch = grow_random(cfg, rng);
        if !check_restrictions(&arch, cfg).is_empty() {
            out.rejected += 1;
            continue;
        }
        for variant in expand_ct_variants(&arch) {
            if out.candidates.len() >= n {
                break;
            }
            if !check_restrictions(&variant, cfg).is_empty() {
                continue;
            }
            let id = arch_id(&variant);
            if seen.contains(&id) || !ids.insert(id) {
                continue;
            }
            out.candidates.push(variant);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::{builtin, parse};

    #[test]
    fn zero_height_gives_leaf() {
        let cfg = GenConfig { max_height: 0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            assert!(grow_random(&cfg, &mut rng).root.op.is_source());
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let cfg = GenConfig { seed: 42, ..Default::default() };
        let seen = HashSet::new();
        assert_eq!(generate_batch(&cfg, 30, &seen), generate_batch(&cfg, 30, &seen));
    }

    #[test]
    fn restriction_examples() {
        let cfg = GenConfig::default();
        let stacked = parse("Tanh(Add(MM(MM(x_t)),MM(h_tm1)))").unwrap();
        assert!(check_restrictions(&stacked, &cfg).contains(&Violation::StackedIdentical));
        let gate = parse("Gate3(x_t,h_tm1,Tanh(MM(x_t)))").unwrap();
        assert!(check_restrictions(&gate, &cfg).contains(&Violation::GateNotSigmoid));
        assert!(check_restrictions(&builtin("gru").unwrap(), &cfg).is_empty());
    }

    #[test]
    fn ct_expansion_examples() {
        let ex = parse("Mult(Sigmoid(MM(x_t)),Tanh(Add(MM(h_tm1),Mult(MM(c_tm1),MM(x_t)))))").unwrap();
        let v = expand_ct_variants(&ex);
        assert_eq!(v.len(), 3);
        let kinds: Vec<OpKind> = v.iter().map(|a| a.ct_subtree().unwrap().op).collect();
        assert_eq!(kinds, vec![OpKind::Mult, OpKind::Add, OpKind::Tanh]);
        let rnn = builtin("tanh_rnn").unwrap();
        assert_eq!(expand_ct_variants(&rnn), vec![rnn]);
        assert!(expand_ct_variants(&parse("Tanh(MM(c_tm1))").unwrap()).is_empty());
    }

    #[test]
    fn batch_is_admissible_distinct_and_disjoint() {
        let cfg = GenConfig { seed: 3, ..Default::default() };
        let first = generate_batch(&cfg, 100, &HashSet::new());
        assert_eq!(first.len(), 100);
        let ids: HashSet<String> = first.iter().map(arch_id).collect();
        assert_eq!(ids.len(), 100);
        for a in &first {
            assert!(check_restrictions(a, &cfg).is_empty(), "{}", a.render());
            assert!(!a.root.preorder_kinds().iter().any(|k| k.is_extended()));
        }
        let second = generate_batch(&cfg, 100, &ids);
        assert!(second.iter().all(|a| !ids.contains(&arch_id(a))));
    }

    #[test]
    fn skewed_weights_respect_height() {
        let mut weights = BTreeMap::new();
        weights.insert(OpKind::Gate3, 1000.0);
        let cfg = GenConfig { weights, max_height: 5, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            assert!(grow_random(&cfg, &mut rng).root.depth() <= 5);
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let mut weights = BTreeMap::new();
        for k in OpKind::SOURCES {
            weights.insert(k, 0.0);
        }
        assert!(GenConfig { weights, ..Default::default() }.validate().is_err());
        assert!(GenConfig { max_nodes: 0, ..Default::default() }.validate().is_err());
        assert!(GenConfig::default().validate().is_ok());
    }
}

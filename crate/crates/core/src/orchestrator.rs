//! Search loops (random + ranking, RL), the append-only record store,
//! batch composition for REINFORCE, and reports.

use std::collections::{HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::{arch_id, builtin, canonicalize, Architecture};
use crate::engine::EngineError;
use crate::evaluator::{train_and_score, ArchPerfRecord, EvalContext, Source, Status, Task, TaskError, TaskSpec, TrainConfig};
use crate::random_gen::{check_restrictions, expand_ct_variants, generate_batch_with, GenConfig};
use crate::ranker::{select_indices, Ranker, RankerConfig};
use crate::rl::{pretrain_priors, EpisodeLog, Policy, PolicyConfig, PretrainConfig, RewardConfig};

pub mod report;

#[derive(Debug, Error)]
pub enum OrchError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store i/o: {0}")]
    Io(String),
    #[error("store line {line}: {msg}")]
    Malformed { line: usize, msg: String },
}

/// Which search loop to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    RandomRank,
    Rl,
}

/// Scale knob resolving the per-step defaults.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    /// 2,000 candidates per step, 8 + 2 selected.
    Desk,
    /// 50,000 candidates per step, 28 + 4 selected (§4.1).
    Paper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub mode: SearchMode,
    pub scale: Scale,
    pub candidates_per_step: Option<usize>,
    pub k_top: Option<usize>,
    pub k_sampled: Option<usize>,
    /// Softmax temperature of the sampled picks.
    pub temperature: f64,
    /// `c_t` candidates are generated only after this many valid `h_t`-only
    /// records exist.
    pub ct_enable_after: usize,
    pub workers: usize,
    /// Random-search steps.
    pub steps: usize,
    /// Stop starting new steps / rounds after this many seconds.
    pub wall_clock: Option<f64>,
    pub seed: u64,
    /// Evaluate the tanh-RNN baseline (source `seed`) before searching.
    pub evaluate_baseline: bool,
    /// Builtin cells evaluated up front as human-seeded records.
    pub seed_cells: Vec<String>,
    /// Re-initialize the ranker every step instead of warm-starting.
    pub cold_start_ranker: bool,
    pub min_good: usize,
    pub max_failing: usize,
    pub min_batch: usize,
    /// RL: stop after this many evaluations (records appended).
    pub rl_evaluations: usize,
    /// RL: episodes sampled per dispatch round.
    pub episodes_per_round: usize,
    /// RL: hard cap on episodes (default 20 × `rl_evaluations`).
    pub max_episodes: Option<usize>,
    /// RL: pending episodes at which an unsatisfiable batch is accepted anyway.
    pub starvation_limit: usize,
    /// Record `wall_seconds` as 0 so stores replay byte-for-byte.
    pub deterministic_clock: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            mode: SearchMode::RandomRank,
            scale: Scale::Desk,
            candidates_per_step: None,
            k_top: None,
            k_sampled: None,
            temperature: 1.0,
            ct_enable_after: 750,
            workers: 1,
            steps: 5,
            wall_clock: None,
            seed: 0,
            evaluate_baseline: true,
            seed_cells: Vec::new(),
            cold_start_ranker: false,
            min_good: 3,
            max_failing: 1,
            min_batch: 4,
            rl_evaluations: 200,
            episodes_per_round: 4,
            max_episodes: None,
            starvation_limit: 32,
            deterministic_clock: true,
        }
    }
}

impl SearchConfig {
    pub fn candidates(&self) -> usize {
        self.candidates_per_step.unwrap_or(match self.scale {
            Scale::Desk => 2000,
            Scale::Paper => 50_000,
        })
    }

    pub fn top(&self) -> usize {
        self.k_top.unwrap_or(match self.scale {
            Scale::Desk => 8,
            Scale::Paper => 28,
        })
    }

    pub fn sampled(&self) -> usize {
        self.k_sampled.unwrap_or(match self.scale {
            Scale::Desk => 2,
            Scale::Paper => 4,
        })
    }

    pub fn batch_rule(&self) -> BatchRule {
        BatchRule { min_good: self.min_good, max_failing: self.max_failing, min_batch: self.min_batch }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.top() + self.sampled() > self.candidates() {
            return Err("k_top + k_sampled exceeds candidates_per_step".into());
        }
        if self.min_good + self.max_failing > self.min_batch {
            return Err("min_good + max_failing must not exceed min_batch".into());
        }
        if self.min_good == 0 {
            return Err("min_good must be at least 1".into());
        }
        if self.workers == 0 {
            return Err("workers must be at least 1".into());
        }
        if !(self.temperature > 0.0) {
            return Err("temperature must be positive".into());
        }
        for name in &self.seed_cells {
            builtin(name).map_err(|e| format!("seed cell `{name}`: {e}"))?;
        }
        Ok(())
    }
}

/// The single JSON configuration document; every section is optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub task: TaskSpec,
    pub train: TrainConfig,
    pub gen: GenConfig,
    pub ranker: RankerConfig,
    pub policy: PolicyConfig,
    pub pretrain: PretrainConfig,
    /// `None`: calibrated from the task's trivial loss.
    pub reward: Option<RewardConfig>,
    pub search: SearchConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, OrchError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| OrchError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self, OrchError> {
        let text = std::fs::read_to_string(path).map_err(|e| OrchError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), OrchError> {
        self.search.validate().map_err(OrchError::Config)?;
        self.gen.validate().map_err(OrchError::Config)?;
        self.train.validate().map_err(OrchError::Config)?;
        Ok(())
    }

    /// The given seed replaces every section's seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.search.seed = seed;
        self.gen.seed = seed;
        self.ranker.seed = seed;
        self.policy.seed = seed;
        self
    }
}

struct StoreInner {
    records: Vec<ArchPerfRecord>,
    index: HashMap<String, usize>,
    file: Option<File>,
}

/// Append-only JSONL record store with an in-memory index by id. All
/// writes go through one mutex, so each record is exactly one line.
pub struct RecordStore {
    inner: Mutex<StoreInner>,
    path: Option<PathBuf>,
}

impl RecordStore {
    pub fn in_memory() -> Self {
        RecordStore { inner: Mutex::new(StoreInner { records: Vec::new(), index: HashMap::new(), file: None }), path: None }
    }

    /// Opens (creating if needed) a store file, replaying existing lines.
    pub fn open(path: &Path) -> Result<Self, StoreError> {
        let records = if path.exists() { Self::load(path)? } else { Vec::new() };
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| StoreError::Io(e.to_string()))?;
        let index = records.iter().enumerate().map(|(i, r)| (r.id.clone(), i)).collect();
        Ok(RecordStore { inner: Mutex::new(StoreInner { records, index, file: Some(file) }), path: Some(path.to_path_buf()) })
    }

    /// Reads and validates every line; ids must be unique.
    pub fn load(path: &Path) -> Result<Vec<ArchPerfRecord>, StoreError> {
        let file = File::open(path).map_err(|e| StoreError::Io(format!("{}: {e}", path.display())))?;
        let mut out = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| StoreError::Io(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ArchPerfRecord =
                serde_json::from_str(&line).map_err(|e| StoreError::Malformed { line: i + 1, msg: e.to_string() })?;
            if !seen.insert(rec.id.clone()) {
                return Err(StoreError::Malformed { line: i + 1, msg: format!("duplicate id {}", rec.id) });
            }
            out.push(rec);
        }
        Ok(out)
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    /// Appends one record; returns `false` (nothing written) for a
    /// duplicate id.
    pub fn append(&self, rec: &ArchPerfRecord) -> Result<bool, StoreError> {
        let mut inner = self.inner.lock().expect("store lock");
        if inner.index.contains_key(&rec.id) {
            return Ok(false);
        }
        if let Some(f) = inner.file.as_mut() {
            let mut line = serde_json::to_string(rec).map_err(|e| StoreError::Io(e.to_string()))?;
            line.push('\n');
            f.write_all(line.as_bytes()).map_err(|e| StoreError::Io(e.to_string()))?;
        }
        let n = inner.records.len();
        inner.index.insert(rec.id.clone(), n);
        inner.records.push(rec.clone());
        Ok(true)
    }

    pub fn records(&self) -> Vec<ArchPerfRecord> {
        self.inner.lock().expect("store lock").records.clone()
    }

    pub fn get(&self, id: &str) -> Option<ArchPerfRecord> {
        let inner = self.inner.lock().expect("store lock");
        inner.index.get(id).map(|&i| inner.records[i].clone())
    }

    pub fn contains(&self, id: &str) -> bool {
        self.inner.lock().expect("store lock").index.contains_key(id)
    }

    pub fn ids(&self) -> HashSet<String> {
        self.inner.lock().expect("store lock").index.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("store lock").records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Lowest validation metric among ok records.
pub fn best_record(records: &[ArchPerfRecord]) -> Option<&ArchPerfRecord> {
    records
        .iter()
        .filter(|r| r.is_ok() && r.valid_metric.is_some_and(f64::is_finite))
        .min_by(|a, b| a.valid_metric.unwrap().total_cmp(&b.valid_metric.unwrap()))
}

/// A record for a candidate rejected before training.
pub fn invalid_record(arch: &Architecture, task: &Task, ctx: &EvalContext) -> ArchPerfRecord {
    let canon = canonicalize(arch);
    ArchPerfRecord {
        id: arch_id(&canon),
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
    }
}

/// Shared evaluation plumbing of both loops.
pub struct Evaluator<'a> {
    pub task: &'a Task,
    pub train: &'a TrainConfig,
    pub seed: u64,
    pub deterministic_clock: bool,
    pool: rayon::ThreadPool,
}

impl<'a> Evaluator<'a> {
    pub fn new(task: &'a Task, train: &'a TrainConfig, search: &SearchConfig) -> Result<Self, OrchError> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(search.workers.max(1))
            .build()
            .map_err(|e| OrchError::Config(e.to_string()))?;
        Ok(Evaluator { task, train, seed: search.seed, deterministic_clock: search.deterministic_clock, pool })
    }

    /// Evaluates `archs` in parallel (each one record, `None` entries are
    /// recorded invalid without training) and appends the records in
    /// dispatch order, whatever the completion order. Timestamps are the
    /// store positions, a logical clock.
    pub fn run(
        &self,
        store: &RecordStore,
        archs: &[(Architecture, bool)],
        source: Source,
        batch_index: usize,
    ) -> Result<Vec<ArchPerfRecord>, OrchError> {
        let base = store.len() as u64;
        let ctx = |i: usize| EvalContext {
            source,
            batch_index,
            seed: self.seed,
            timestamp: base + i as u64,
            deterministic_clock: self.deterministic_clock,
        };
        let recs: Vec<ArchPerfRecord> = self.pool.install(|| {
            archs
                .par_iter()
                .enumerate()
                .map(|(i, (a, admissible))| {
                    if *admissible {
                        train_and_score(a, self.task, self.train, &ctx(i))
                    } else {
                        invalid_record(a, self.task, &ctx(i))
                    }
                })
                .collect()
        });
        for r in &recs {
            store.append(r)?;
        }
        Ok(recs)
    }
}

/// Per-step log line of the random search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub candidates: usize,
    pub evaluated: usize,
    pub ct_enabled: bool,
    pub best_so_far: Option<f64>,
}

/// Result of a search run.
#[derive(Clone, Debug, Default)]
pub struct SearchOutcome {
    pub best: Option<ArchPerfRecord>,
    pub baseline: Option<ArchPerfRecord>,
    pub steps: Vec<StepLog>,
    /// RL: reward per episode, in sampling order.
    pub rewards: Vec<f64>,
    pub episodes: Vec<EpisodeLog>,
    /// RL: REINFORCE updates applied.
    pub updates: usize,
    /// RL: batches accepted by the starvation fallback.
    pub relaxed_batches: usize,
    /// Records appended by this run.
    pub evaluations: usize,
}

fn seed_records(cfg: &RunConfig, ev: &Evaluator, store: &RecordStore, out: &mut SearchOutcome) -> Result<(), OrchError> {
    let mut jobs = Vec::new();
    if cfg.search.evaluate_baseline {
        jobs.push((builtin("tanh_rnn").expect("builtin"), Source::Seed));
    }
    for name in &cfg.search.seed_cells {
        jobs.push((builtin(name).map_err(|e| OrchError::Config(e.to_string()))?, Source::Human));
    }
    for (arch, source) in jobs {
        let id = arch_id(&canonicalize(&arch));
        if !store.contains(&id) {
            out.evaluations += ev.run(store, &[(arch, true)], source, 0)?.len();
        }
    }
    if cfg.search.evaluate_baseline {
        out.baseline = store.get(&arch_id(&canonicalize(&builtin("tanh_rnn").expect("builtin"))));
    }
    Ok(())
}

/// §4.1 loop: generate, rank, select, evaluate, repeat. Stored ids are
/// never re-evaluated, so runs resume from an existing store.
pub fn run_random_search(cfg: &RunConfig, task: &Task, store: &RecordStore, log: &mut dyn FnMut(&str)) -> Result<SearchOutcome, OrchError> {
    cfg.validate()?;
    let s = &cfg.search;
    let started = Instant::now();
    let ev = Evaluator::new(task, &cfg.train, s)?;
    let mut out = SearchOutcome::default();
    seed_records(cfg, &ev, store, &mut out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let ranker_cfg = RankerConfig { seed: s.seed, ..cfg.ranker.clone() };
    let mut ranker = Ranker::new(ranker_cfg.clone());
    let mut ct_was_enabled = false;
    for step in 1..=s.steps {
        if s.wall_clock.is_some_and(|w| started.elapsed().as_secs_f64() >= w) {
            log(&format!("step {step}: wall-clock budget reached, stopping"));
            break;
        }
        let records = store.records();
        let valid_h = records.iter().filter(|r| r.is_ok() && r.ct_node.is_none()).count();
        let ct_enabled = cfg.gen.allow_cm1 && valid_h >= s.ct_enable_after;
        let gen = GenConfig { allow_cm1: ct_enabled, ..cfg.gen.clone() };
        let batch = generate_batch_with(&gen, s.candidates(), &store.ids(), &mut rng);
        if batch.candidates.is_empty() {
            log(&format!("step {step}: no admissible candidates ({} draws)", batch.draws));
            out.steps.push(StepLog { step, candidates: 0, evaluated: 0, ct_enabled, best_so_far: best_record(&records).and_then(|r| r.valid_metric) });
            continue;
        }
        if s.cold_start_ranker {
            ranker = Ranker::new(ranker_cfg.clone());
        }
        if ct_enabled && !ct_was_enabled {
            ranker.bootstrap_ct_embeddings();
            ct_was_enabled = true;
        }
        let scores = match ranker.fit(&records) {
            Ok(rep) => {
                if rep.diverged {
                    log(&format!("step {step}: ranker diverged, kept last finite parameters"));
                }
                ranker.score_all(&batch.candidates)
            }
            Err(e) => {
                log(&format!("step {step}: ranker not trained ({e}); selecting uniformly"));
                vec![0.0; batch.candidates.len()]
            }
        };
        let picks = select_indices(&scores, s.top(), s.sampled(), s.temperature, &mut rng);
        let jobs: Vec<(Architecture, bool)> = picks.iter().map(|&i| (batch.candidates[i].clone(), true)).collect();
        let recs = ev.run(store, &jobs, Source::Random, step)?;
        out.evaluations += recs.len();
        let best = best_record(&store.records()).and_then(|r| r.valid_metric);
        log(&format!(
            "step {step}: {} candidates, evaluated {}, best so far {}",
            batch.candidates.len(),
            recs.len(),
            best.map_or("none".into(), |b| format!("{b:.6}"))
        ));
        out.steps.push(StepLog { step, candidates: batch.candidates.len(), evaluated: recs.len(), ct_enabled, best_so_far: best });
    }
    out.best = best_record(&store.records()).cloned();
    Ok(out)
}

/// REINFORCE batch-composition rule (§4.2).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchRule {
    pub min_good: usize,
    pub max_failing: usize,
    pub min_batch: usize,
}

/// An evaluated episode waiting for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Pending {
    pub actions: Vec<usize>,
    pub reward: f64,
    pub good: bool,
}

/// Takes one batch out of `pending` when the rule allows: all good
/// episodes plus up to `max_failing` failures (oldest first), needing
/// `min_good` goods and `min_batch` in total. Excess failures stay pending.
pub fn assemble_batch(pending: &mut Vec<Pending>, rule: BatchRule) -> Option<Vec<Pending>> {
    let goods = pending.iter().filter(|p| p.good).count();
    let fails = pending.len() - goods;
    let take_fails = fails.min(rule.max_failing);
    if goods < rule.min_good || goods + take_fails < rule.min_batch {
        return None;
    }
    let mut batch = Vec::new();
    let mut rest = Vec::new();
    let mut fails_taken = 0;
    for p in pending.drain(..) {
        if p.good {
            batch.push(p);
        } else if fails_taken < take_fails {
            fails_taken += 1;
            batch.push(p);
        } else {
            rest.push(p);
        }
    }
    *pending = rest;
    Some(batch)
}

/// §4.2 loop: sample episodes, evaluate every `c_t` placement, reward the
/// best, and apply REINFORCE on batches that satisfy the composition rule.
/// Pre-trains on the priors first when `cfg.pretrain.episodes > 0`.
pub fn run_rl_search(
    cfg: &RunConfig,
    task: &Task,
    store: &RecordStore,
    policy: &mut Policy,
    log: &mut dyn FnMut(&str),
) -> Result<SearchOutcome, OrchError> {
    cfg.validate()?;
    let s = &cfg.search;
    let started = Instant::now();
    let ev = Evaluator::new(task, &cfg.train, s)?;
    let mut out = SearchOutcome::default();
    seed_records(cfg, &ev, store, &mut out)?;
    let reward_cfg = cfg.reward.clone().unwrap_or_else(|| RewardConfig::calibrated(task.baseline_loss()));
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed ^ 0x51);
    if cfg.pretrain.episodes > 0 {
        let rep = pretrain_priors(policy, &cfg.pretrain, &mut rng)?;
        log(&format!("pretraining: {} episodes, moving prior rate {:.3}", rep.episodes, rep.moving_rate));
    }
    let rule = s.batch_rule();
    let max_episodes = s.max_episodes.unwrap_or(20 * s.rl_evaluations.max(1));
    let mut pending: Vec<Pending> = Vec::new();
    let mut episodes = 0;
    let mut round = 0;
    let mut new_evals = 0;
    while new_evals < s.rl_evaluations && episodes < max_episodes {
        if s.wall_clock.is_some_and(|w| started.elapsed().as_secs_f64() >= w) {
            log(&format!("round {round}: wall-clock budget reached, stopping"));
            break;
        }
        round += 1;
        let eps: Vec<_> = (0..s.episodes_per_round.max(1))
            .map(|_| policy.sample_episode(policy.cfg.epsilon, &mut rng))
            .collect::<Result<_, _>>()?;
        episodes += eps.len();
        // Every c_t placement of every episode; inadmissible ones are
        // recorded invalid without training.
        let mut variants: Vec<Vec<String>> = Vec::new();
        let mut jobs: Vec<(Architecture, bool)> = Vec::new();
        let mut queued = HashSet::new();
        for ep in &eps {
            let taps = expand_ct_variants(&ep.arch);
            let cands: Vec<(Architecture, bool)> = if taps.is_empty() {
                vec![(ep.arch.clone(), false)]
            } else {
                taps.into_iter()
                    .map(|a| {
                        let ok = check_restrictions(&a, &cfg.gen).is_empty();
                        (a, ok)
                    })
                    .collect()
            };
            let mut ids = Vec::new();
            for (a, ok) in cands {
                let id = arch_id(&canonicalize(&a));
                if !store.contains(&id) && queued.insert(id.clone()) {
                    jobs.push((a, ok));
                }
                ids.push(id);
            }
            variants.push(ids);
        }
        let recs = ev.run(store, &jobs, Source::Rl, round)?;
        new_evals += recs.len();
        out.evaluations += recs.len();
        for (ep, ids) in eps.into_iter().zip(variants) {
            let results: Vec<ArchPerfRecord> = ids.iter().filter_map(|id| store.get(id)).collect();
            let reward = results
                .iter()
                .map(|r| reward_cfg.reward(r.valid_metric, r.status))
                .fold(f64::NEG_INFINITY, f64::max);
            let reward = if reward.is_finite() { reward } else { reward_cfg.failure_reward };
            let good = results.iter().any(|r| r.is_ok());
            out.rewards.push(reward);
            out.episodes.push(EpisodeLog {
                tree: ep.arch.render(),
                actions: policy.action_names(&ep.actions),
                reward,
                batch_index: round,
            });
            pending.push(Pending { actions: ep.actions, reward, good });
        }
        while let Some(batch) = assemble_batch(&mut pending, rule) {
            let b: Vec<(Vec<usize>, f64)> = batch.into_iter().map(|p| (p.actions, p.reward)).collect();
            let rep = policy.reinforce_update(&b)?;
            if rep.skipped {
                log(&format!("round {round}: non-finite policy gradient, batch skipped"));
            }
            out.updates += 1;
        }
        if pending.len() >= s.starvation_limit.max(1) {
            log(&format!("round {round}: batch rule starved with {} pending; accepting them as one batch", pending.len()));
            let b: Vec<(Vec<usize>, f64)> = pending.drain(..).map(|p| (p.actions, p.reward)).collect();
            policy.reinforce_update(&b)?;
            out.updates += 1;
            out.relaxed_batches += 1;
        }
    }
    log(&format!("rl: {episodes} episodes, {new_evals} evaluations, {} updates", out.updates));
    out.best = best_record(&store.records()).cloned();
    Ok(out)
}

/// Writes episode logs as JSONL.
pub fn write_episode_log(episodes: &[EpisodeLog], path: &Path) -> Result<(), StoreError> {
    let mut text = String::new();
    for e in episodes {
        text.push_str(&serde_json::to_string(e).map_err(|e| StoreError::Io(e.to_string()))?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| StoreError::Io(e.to_string()))
}

//! `archdsl`: command-line surface over the cell DSL toolkit.
//!
//! Exit codes: 0 success, 1 domain error (printed as `error[CODE]: ...`
//! on stderr), 2 usage error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use archdsl_core::compiler::{check_cell_gradients, compile, CompileError, CompileOptions};
use archdsl_core::dsl::{analyze, arch_id, builtin, canonicalize, parse, Architecture, DslError, BUILTIN_NAMES};
use archdsl_core::engine::EngineError;
use archdsl_core::evaluator::{make_task, train_and_score, ArchPerfRecord, EvalContext, Source, TaskError, TaskKind};
use archdsl_core::orchestrator::report::{hidden_dump_csv, ops_over_time_csv, search_curve_csv};
use archdsl_core::orchestrator::{
    best_record, run_random_search, run_rl_search, write_episode_log, OrchError, RecordStore, RunConfig, SearchMode, StoreError,
};
use archdsl_core::ranker::{record_target, spearman, RankError, Ranker};
use archdsl_core::rl::Policy;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

/// Gradient checks above this relative error fail.
const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "archdsl", version, about = "Recurrent cell DSL, compiler and architecture search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    global: Global,
}

#[derive(Args, Clone)]
struct Global {
    /// Seed for all randomness (fallback: ARCHDSL_SEED, then the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parallel evaluator workers.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Machine-readable output on stdout.
    #[arg(long, global = true)]
    json: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Parse, print and analyze a cell definition.
    Parse {
        dsl: String,
        /// Print the canonical form.
        #[arg(long)]
        canonical: bool,
    },
    /// Built-in cells.
    Cells {
        #[command(subcommand)]
        action: CellsAction,
    },
    /// Compile a cell and optionally check its gradients.
    Compile {
        /// DSL text or a built-in cell name.
        dsl: String,
        #[arg(long)]
        hidden: usize,
        #[arg(long)]
        input: usize,
        #[arg(long)]
        check_grad: bool,
        #[arg(long)]
        no_fuse: bool,
    },
    /// Train and score one cell, appending the record to a store.
    Eval {
        /// DSL text or a built-in cell name.
        dsl: String,
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a search, appending records to a store.
    Search {
        #[arg(value_enum)]
        mode: SearchArg,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// RL: write the per-episode log (JSONL) here.
        #[arg(long)]
        episode_log: Option<PathBuf>,
        /// RL: load the policy from this checkpoint if it exists and save it
        /// here afterwards.
        #[arg(long)]
        policy_checkpoint: Option<PathBuf>,
    },
    /// Fit the ranking function or score with it.
    Rank {
        #[arg(value_enum)]
        action: RankArg,
        #[arg(long)]
        records: PathBuf,
        /// Cell to score (DSL text or built-in name).
        #[arg(long)]
        dsl: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// fit: save the ranker here; score: load it from here instead of
        /// fitting.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// CSV reports over a record store.
    Report {
        #[arg(value_enum)]
        kind: ReportArg,
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// hidden-dump: the cell (default: best record of the store).
        #[arg(long)]
        dsl: Option<String>,
        /// hidden-dump: task and training sections.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum CellsAction {
    List,
    Show { name: String },
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    #[value(name = "char_lm")]
    CharLm,
    #[value(name = "copy_memory")]
    CopyMemory,
}

#[derive(Clone, Copy, ValueEnum)]
enum SearchArg {
    Random,
    Rl,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum RankArg {
    Fit,
    Score,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportArg {
    OpsOverTime,
    SearchCurve,
    HiddenDump,
}

/// A domain error with a stable code.
struct Failure {
    code: &'static str,
    msg: String,
}

impl Failure {
    fn new(code: &'static str, msg: impl Into<String>) -> Self {
        Failure { code, msg: msg.into() }
    }
}

macro_rules! failure_from {
    ($($ty:ty => $code:literal),* $(,)?) => {
        $(impl From<$ty> for Failure {
            fn from(e: $ty) -> Self {
                Failure::new($code, e.to_string())
            }
        })*
    };
}

failure_from! {
    DslError => "E_DSL",
    CompileError => "E_COMPILE",
    EngineError => "E_ENGINE",
    TaskError => "E_TASK",
    StoreError => "E_STORE",
    RankError => "E_RANK",
    std::io::Error => "E_IO",
}

impl From<OrchError> for Failure {
    fn from(e: OrchError) -> Self {
        match e {
            OrchError::Config(m) => Failure::new("E_CONFIG", m),
            OrchError::Store(e) => e.into(),
            OrchError::Task(e) => e.into(),
            OrchError::Engine(e) => e.into(),
        }
    }
}

type Out = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error[{}]: {}", f.code, f.msg);
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Out {
    let g = cli.global;
    match cli.command {
        Command::Parse { dsl, canonical } => cmd_parse(&g, &dsl, canonical),
        Command::Cells { action } => cmd_cells(&g, action),
        Command::Compile { dsl, hidden, input, check_grad, no_fuse } => cmd_compile(&g, &dsl, hidden, input, check_grad, !no_fuse),
        Command::Eval { dsl, task, config, out } => cmd_eval(&g, &dsl, task, config.as_deref(), &out),
        Command::Search { mode, config, out, episode_log, policy_checkpoint } => {
            cmd_search(&g, mode, config.as_deref(), &out, episode_log.as_deref(), policy_checkpoint.as_deref())
        }
        Command::Rank { action, records, dsl, config, checkpoint } => {
            cmd_rank(&g, action, &records, dsl.as_deref(), config.as_deref(), checkpoint.as_deref())
        }
        Command::Report { kind, records, out, dsl, config } => cmd_report(&g, kind, &records, &out, dsl.as_deref(), config.as_deref()),
    }
}

/// `--seed`, else `ARCHDSL_SEED`, else none (config value stands).
fn seed(g: &Global) -> Result<Option<u64>, Failure> {
    if let Some(s) = g.seed {
        return Ok(Some(s));
    }
    match std::env::var("ARCHDSL_SEED") {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| Failure::new("E_CONFIG", format!("ARCHDSL_SEED is not an integer: `{v}`"))),
        Err(_) => Ok(None),
    }
}

/// Loads the config (defaults without a file) and applies `--seed` and
/// `--workers`.
fn load_config(g: &Global, path: Option<&Path>) -> Result<RunConfig, Failure> {
    let mut cfg = match path {
        Some(p) => RunConfig::from_path(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed(g)? {
        cfg = cfg.with_seed(s);
    }
    if let Some(w) = g.workers {
        cfg.search.workers = w;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// DSL text, or a built-in cell name.
fn resolve_arch(text: &str) -> Result<Architecture, Failure> {
    if BUILTIN_NAMES.contains(&text) {
        return Ok(builtin(text)?);
    }
    Ok(parse(text)?)
}

fn print_json(v: &Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json"));
}

fn arch_json(arch: &Architecture) -> Value {
    let a = analyze(arch);
    json!({
        "dsl": arch.render(),
        "canonical": canonicalize(arch).render(),
        "id": arch_id(arch),
        "node_count": a.node_count,
        "height": a.height,
        "depth": arch.root.depth(),
        "sources_used": a.sources_used.iter().map(|k| k.token()).collect::<Vec<_>>(),
        "uses_ct": a.uses_ct,
        "ct_node": arch.ct_node,
        "validity_flags": a.validity_flags.iter().map(|v| v.name()).collect::<Vec<_>>(),
    })
}

fn print_arch_text(arch: &Architecture) {
    let v = arch_json(arch);
    println!("dsl:        {}", v["dsl"].as_str().unwrap_or_default());
    println!("canonical:  {}", v["canonical"].as_str().unwrap_or_default());
    println!("id:         {}", v["id"].as_str().unwrap_or_default());
    println!("node_count: {}", v["node_count"]);
    println!("height:     {}", v["height"]);
    println!("sources:    {}", v["sources_used"].as_array().map(|a| a.iter().filter_map(Value::as_str).collect::<Vec<_>>().join(", ")).unwrap_or_default());
    if let Some(n) = arch.ct_node {
        println!("c_t node:   {n}");
    }
    let flags = &v["validity_flags"];
    if flags.as_array().is_some_and(|a| !a.is_empty()) {
        println!("violations: {}", flags.as_array().unwrap().iter().filter_map(Value::as_str).collect::<Vec<_>>().join(", "));
    } else {
        println!("violations: none");
    }
}

fn cmd_parse(g: &Global, text: &str, canonical: bool) -> Out {
    let arch = parse(text)?;
    if g.json {
        print_json(&arch_json(&arch));
    } else if canonical {
        println!("{}", canonicalize(&arch).render());
    } else {
        print_arch_text(&arch);
    }
    Ok(())
}

fn cmd_cells(g: &Global, action: CellsAction) -> Out {
    match action {
        CellsAction::List => {
            if g.json {
                print_json(&json!(BUILTIN_NAMES));
            } else {
                for name in BUILTIN_NAMES {
                    println!("{name}");
                }
            }
        }
        CellsAction::Show { name } => {
            let arch = builtin(&name)?;
            if g.json {
                let mut v = arch_json(&arch);
                v["name"] = json!(name);
                print_json(&v);
            } else {
                println!("{}", arch.render());
            }
        }
    }
    Ok(())
}

fn cmd_compile(g: &Global, text: &str, hidden: usize, input: usize, check_grad: bool, fuse: bool) -> Out {
    let arch = resolve_arch(text)?;
    let opts = CompileOptions { seed: seed(g)?.unwrap_or(0), ..CompileOptions::new(input, hidden, fuse) };
    let (prog, params) = compile(&arch, &opts)?;
    let grad = if check_grad { Some(check_cell_gradients(&arch, &opts, opts.seed)?) } else { None };
    let groups: serde_json::Map<String, Value> = prog.fused_groups.iter().map(|(k, v)| (k.token().to_string(), json!(v))).collect();
    let v = json!({
        "dsl": canonicalize(&arch).render(),
        "fuse": fuse,
        "instructions": prog.instructions.len(),
        "mm_instructions": prog.mm_instructions(),
        "source_mm_instructions": prog.source_mm_instructions(),
        "parameters": params.numel(),
        "fused_groups": groups,
        "ct_slot": prog.ct_slot,
        "max_rel_grad_error": grad.as_ref().map(|r| r.max_rel_error),
    });
    if g.json {
        print_json(&v);
    } else {
        println!("instructions:           {}", prog.instructions.len());
        println!("mm instructions:        {}", prog.mm_instructions());
        println!("source mm instructions: {}", prog.source_mm_instructions());
        println!("parameters:             {}", params.numel());
        for (k, nodes) in &prog.fused_groups {
            println!("fused {k}: nodes {nodes:?}");
        }
        if let Some(r) = &grad {
            println!("max relative gradient error: {:.3e}", r.max_rel_error);
        }
    }
    if let Some(r) = grad {
        if !(r.max_rel_error < GRAD_TOLERANCE) {
            return Err(Failure::new("E_GRADCHECK", format!("max relative gradient error {:.3e} >= {GRAD_TOLERANCE:e}", r.max_rel_error)));
        }
    }
    Ok(())
}

fn print_record(g: &Global, rec: &ArchPerfRecord) {
    if g.json {
        print_json(&serde_json::to_value(rec).expect("record json"));
    } else {
        let status = serde_json::to_value(rec.status).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        println!("{} {} status={} valid={} epochs={}", &rec.id[..12], rec.dsl, status, rec.valid_metric.map_or("-".into(), |v| format!("{v:.6}")), rec.epochs_run);
    }
}

fn cmd_eval(g: &Global, text: &str, task: TaskArg, config: Option<&Path>, out: &Path) -> Out {
    let arch = resolve_arch(text)?;
    let mut cfg = load_config(g, config)?;
    cfg.task.kind = match task {
        TaskArg::CharLm => TaskKind::CharLm,
        TaskArg::CopyMemory => TaskKind::CopyMemory,
    };
    let task = make_task(&cfg.task)?;
    let store = RecordStore::open(out)?;
    let ctx = EvalContext {
        source: Source::Human,
        batch_index: 0,
        seed: cfg.search.seed,
        timestamp: store.len() as u64,
        deterministic_clock: cfg.search.deterministic_clock,
    };
    let rec = train_and_score(&arch, &task, &cfg.train, &ctx);
    if !store.append(&rec)? {
        eprintln!("note: {} is already in {}; record not appended", rec.id, out.display());
    }
    print_record(g, &rec);
    Ok(())
}

fn cmd_search(g: &Global, mode: SearchArg, config: Option<&Path>, out: &Path, episode_log: Option<&Path>, ckpt: Option<&Path>) -> Out {
    let mut cfg = load_config(g, config)?;
    cfg.search.mode = match mode {
        SearchArg::Random => SearchMode::RandomRank,
        SearchArg::Rl => SearchMode::Rl,
    };
    let task = make_task(&cfg.task)?;
    let store = RecordStore::open(out)?;
    let mut log = |line: &str| eprintln!("{line}");
    let outcome = match cfg.search.mode {
        SearchMode::RandomRank => run_random_search(&cfg, &task, &store, &mut log)?,
        SearchMode::Rl => {
            let mut policy = Policy::new(cfg.policy.clone())?;
            if let Some(p) = ckpt.filter(|p| p.exists()) {
                policy.load(p)?;
                cfg.pretrain.episodes = 0;
            }
            let o = run_rl_search(&cfg, &task, &store, &mut policy, &mut log)?;
            if let Some(p) = ckpt {
                policy.save(p)?;
            }
            if let Some(p) = episode_log {
                write_episode_log(&o.episodes, p)?;
            }
            o
        }
    };
    let summary = json!({
        "mode": match mode { SearchArg::Random => "random", SearchArg::Rl => "rl" },
        "evaluations": outcome.evaluations,
        "records": store.len(),
        "baseline_metric": outcome.baseline.as_ref().and_then(|r| r.valid_metric),
        "best": outcome.best.as_ref().map(|r| json!({"id": r.id, "dsl": r.dsl, "valid_metric": r.valid_metric})),
        "updates": outcome.updates,
    });
    if g.json {
        print_json(&summary);
    } else {
        println!("evaluations: {}", outcome.evaluations);
        if let Some(b) = &outcome.baseline {
            println!("baseline:    {}", b.valid_metric.map_or("-".into(), |v| format!("{v:.6}")));
        }
        if let Some(b) = &outcome.best {
            println!("best:        {} ({})", b.dsl, b.valid_metric.map_or("-".into(), |v| format!("{v:.6}")));
        }
    }
    Ok(())
}

fn cmd_rank(g: &Global, action: RankArg, records: &Path, dsl: Option<&str>, config: Option<&Path>, ckpt: Option<&Path>) -> Out {
    let cfg = load_config(g, config)?;
    let recs = RecordStore::load(records)?;
    let mut fit = None;
    let ranker = match (action, ckpt) {
        (RankArg::Score, Some(p)) => Ranker::from_checkpoint(cfg.ranker.clone(), p)?,
        _ => {
            let mut r = Ranker::new(cfg.ranker.clone());
            fit = Some(r.fit(&recs)?);
            r
        }
    };
    if let (RankArg::Fit, Some(p)) = (action, ckpt) {
        ranker.save(p)?;
    }
    let mut v = json!({});
    if let Some(rep) = &fit {
        v["records_used"] = json!(rep.records_used);
        v["final_loss"] = json!(rep.losses.last());
        v["diverged"] = json!(rep.diverged);
    }
    match dsl {
        Some(text) => {
            let arch = resolve_arch(text)?;
            v["dsl"] = json!(canonicalize(&arch).render());
            v["score"] = json!(ranker.score(&arch)?);
        }
        None => {
            let cap = cfg.ranker.target_cap;
            let archs: Vec<Architecture> = recs.iter().filter_map(|r| r.architecture()).collect();
            let scores = ranker.score_all(&archs);
            let targets: Vec<f64> = recs.iter().filter(|r| r.architecture().is_some()).map(|r| record_target(r, cap)).collect();
            if archs.len() >= 2 {
                v["train_spearman"] = json!(spearman(&scores, &targets));
            }
            if action == RankArg::Score {
                v["scores"] = archs
                    .iter()
                    .zip(&scores)
                    .zip(&targets)
                    .map(|((a, s), t)| json!({"id": arch_id(a), "score": s, "target": t}))
                    .collect();
            }
        }
    }
    if g.json {
        print_json(&v);
    } else {
        for (k, val) in v.as_object().expect("object") {
            if k == "scores" {
                for row in val.as_array().into_iter().flatten() {
                    println!("{} score={} target={}", &row["id"].as_str().unwrap_or_default()[..12], row["score"], row["target"]);
                }
            } else {
                println!("{k}: {val}");
            }
        }
    }
    Ok(())
}

fn cmd_report(g: &Global, kind: ReportArg, records: &Path, out: &Path, dsl: Option<&str>, config: Option<&Path>) -> Out {
    let recs = RecordStore::load(records)?;
    let csv = match kind {
        ReportArg::OpsOverTime => ops_over_time_csv(&recs),
        ReportArg::SearchCurve => search_curve_csv(&recs),
        ReportArg::HiddenDump => {
            let cfg = load_config(g, config)?;
            let arch = match dsl {
                Some(t) => resolve_arch(t)?,
                None => best_record(&recs)
                    .and_then(|r| r.architecture())
                    .ok_or_else(|| Failure::new("E_STORE", "no ok record to dump; pass --dsl"))?,
            };
            let task = make_task(&cfg.task)?;
            hidden_dump_csv(&arch, &task, &cfg.train, cfg.search.seed)?
        }
    };
    fs::write(out, &csv)?;
    let rows = csv.lines().count().saturating_sub(1);
    if g.json {
        print_json(&json!({"out": out.display().to_string(), "rows": rows}));
    } else {
        println!("wrote {rows} rows to {}", out.display());
    }
    Ok(())
}

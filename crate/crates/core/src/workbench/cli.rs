//! Command-line front end.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use super::{
    evaluate, run_ablation, standard_variants, train_experiment, write_ablation_csv, DecodeConfig, ExperimentConfig,
    TaskKind, ToyTask,
};
use crate::error::{MptError, Result};
use crate::model::{
    init_params, model_gradcheck, soft_weights, Batch, ConnectionSpec, MptConfig, Permutation, Regime,
    RoutingPattern,
};
use crate::search::{
    run_enumeration, run_search, Evaluator, HammingSurrogate, SearchLedger, SearchPolicy, SearchSpace,
    ToyTaskEvaluator,
};
use crate::training::{average_checkpoints, Checkpoint};

#[derive(Parser, Debug)]
#[command(name = "mpt", about = "Multi-pass transformer toolkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model; writes checkpoints and loss.csv.
    Train(TrainArgs),
    /// Random search over hard-connection permutations; writes a JSONL ledger.
    Search(SearchArgs),
    /// Decode a held-out set from a checkpoint and report metrics.
    Eval(EvalArgs),
    /// Finite-difference gradient check of the full model.
    Gradcheck(GradcheckArgs),
    /// Train and evaluate the standard variants; writes a CSV report.
    Ablate(AblateArgs),
    /// Write the soft-connection weight matrix of a checkpoint as CSV.
    ExportSoftWeights(ExportArgs),
    /// Average the last k checkpoints matching a glob.
    Average(AverageArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override train.max_steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Override train.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override output.dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the hard permutation, e.g. 0,4,1,5,2,3.
    #[arg(long)]
    perm: Option<Permutation>,
}

#[derive(Args, Debug)]
struct SearchArgs {
    #[arg(long, default_value_t = 6)]
    layers: usize,
    #[arg(long, default_value_t = 20)]
    coarse: usize,
    #[arg(long, default_value_t = 20)]
    fine: usize,
    #[arg(long, default_value_t = 2)]
    top_m: usize,
    #[arg(long, default_value_t = 10)]
    neighbors: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "search_ledger.jsonl")]
    ledger: PathBuf,
    /// Experiment used by the toy-task evaluator.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Score by Hamming distance to this permutation instead of training.
    #[arg(long)]
    surrogate_target: Option<Permutation>,
    /// Evaluate every permutation.
    #[arg(long)]
    enumerate: bool,
    #[arg(long)]
    parallel: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Experiment supplying task and decoding settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Task when no config is given: copy, reverse or sort_digits.
    #[arg(long, default_value = "copy")]
    task: TaskKind,
    #[arg(long, default_value = "final")]
    regime: Regime,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    samples: Option<usize>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Model config JSON; defaults to the tiny model.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Routing pattern a-d, or all.
    #[arg(long, default_value = "all")]
    pattern: String,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 1e-4)]
    step: f64,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "ablation.csv")]
    out: PathBuf,
    /// Searched permutation for the hard-best row; defaults to 0,4,1,5,2,3 for six layers.
    #[arg(long)]
    best_perm: Option<Permutation>,
    #[arg(long)]
    parallel: bool,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AverageArgs {
    #[arg(long)]
    glob: String,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
}

/// Runs the CLI with process stdout/stderr; returns the exit code.
pub fn run(argv: Vec<String>) -> i32 {
    run_with(argv, &mut std::io::stdout(), &mut std::io::stderr())
}

/// Runs the CLI writing to the given streams. Exit code 0 on success, 1 on
/// any error or failed check, 2 on a usage error.
pub fn run_with(argv: Vec<String>, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = if code == 0 {
                write!(out, "{}", e.render())
            } else {
                write!(err, "{}", e.render())
            };
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

fn emit(out: &mut dyn Write, line: impl std::fmt::Display) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| MptError::Config(format!("writing output: {e}")))
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<bool> {
    match cmd {
        Command::Train(a) => train(a, out),
        Command::Search(a) => search(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Gradcheck(a) => gradcheck(a, out),
        Command::Ablate(a) => ablate(a, out),
        Command::ExportSoftWeights(a) => export(a, out),
        Command::Average(a) => average(a, out),
    }
}

fn load_experiment(path: Option<&Path>) -> Result<ExperimentConfig> {
    path.map_or_else(|| Ok(ExperimentConfig::tiny_copy()), ExperimentConfig::load)
}

fn train(a: TrainArgs, out: &mut dyn Write) -> Result<bool> {
    let mut cfg = load_experiment(a.config.as_deref())?;
    if let Some(s) = a.steps {
        cfg.train.max_steps = s;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(p) = a.perm {
        cfg.model.connection = ConnectionSpec::Hard { perm: p };
    }
    let dir = a.out.unwrap_or_else(|| cfg.output.dir.clone());
    cfg.validate()?;
    std::fs::create_dir_all(&dir).map_err(|e| MptError::io(&dir, e))?;
    let cfg_path = dir.join("config.json");
    std::fs::write(&cfg_path, cfg.to_json()?).map_err(|e| MptError::io(&cfg_path, e))?;
    let (_, outcome) = train_experiment(&cfg, Some(&dir), |_, _| Ok(true))?;
    let last = outcome.reports.last().map_or("n/a".to_string(), |r| r.objective.to_string());
    emit(out, format!("steps {} final loss {last}", outcome.reports.len()))?;
    for c in &outcome.checkpoints {
        emit(out, format!("checkpoint {}", c.display()))?;
    }
    Ok(true)
}

fn search(a: SearchArgs, out: &mut dyn Write) -> Result<bool> {
    let policy = SearchPolicy {
        coarse_budget: a.coarse,
        fine_budget: a.fine,
        top_m: a.top_m,
        neighbors_per_candidate: a.neighbors,
        seed: a.seed,
        parallel: a.parallel,
    };
    let evaluator: Box<dyn Evaluator> = match a.surrogate_target {
        Some(target) => {
            if target.len() != a.layers {
                return Err(MptError::Config(format!(
                    "surrogate target {target} does not have {} entries",
                    a.layers
                )));
            }
            Box::new(HammingSurrogate { target })
        }
        None => {
            let mut cfg = load_experiment(a.config.as_deref())?;
            cfg.model.layers = a.layers;
            cfg.model.connection = ConnectionSpec::Hard {
                perm: Permutation::identity(a.layers),
            };
            cfg.validate()?;
            Box::new(ToyTaskEvaluator::new(cfg))
        }
    };
    let mut ledger = SearchLedger::open(&a.ledger)?;
    let ranked = if a.enumerate {
        run_enumeration(a.layers, &policy, evaluator.as_ref(), &mut ledger)?
    } else {
        run_search(SearchSpace::new(a.layers), &policy, evaluator.as_ref(), &mut ledger)?
    };
    emit(out, format!("evaluated {} permutations; ledger {}", ranked.len(), a.ledger.display()))?;
    if let Some(best) = ranked.first() {
        let score = best.score.map_or("failed".to_string(), |s| s.to_string());
        emit(out, format!("best {} score {score}", best.perm))?;
    }
    Ok(true)
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> Result<bool> {
    let model = Checkpoint::load(&a.checkpoint)?.into_model();
    let (task, mut decode) = match &a.config {
        Some(p) => {
            let cfg = ExperimentConfig::load(p)?;
            (cfg.task, cfg.decode)
        }
        None => {
            let max = (model.cfg.max_len - 1).clamp(1, 8);
            (
                ToyTask::new(a.task, model.cfg.vocab, 1, max),
                DecodeConfig::default(),
            )
        }
    };
    let mut task = task;
    if let Some(n) = a.samples {
        task.held_out = n;
    }
    if let Some(b) = a.beam {
        decode.beam = b;
    }
    if let Some(al) = a.alpha {
        decode.alpha = al;
    }
    let held = task.held_out_set();
    let m = evaluate(&model, &held, a.regime, &decode)?;
    emit(out, format!("# decode: {}", decode.describe()))?;
    emit(
        out,
        format!(
            "regime {:?} examples {} token_acc {} seq_acc {} bleu {} truncated {}",
            a.regime, m.examples, m.token_acc, m.seq_acc, m.bleu, m.truncated
        ),
    )?;
    Ok(true)
}

fn gradcheck(a: GradcheckArgs, out: &mut dyn Write) -> Result<bool> {
    let base = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| MptError::io(p, e))?;
            let cfg: MptConfig = serde_json::from_str(&text)?;
            cfg.validate()?;
            cfg
        }
        None => MptConfig::tiny(ConnectionSpec::hard(&[0, 1, 2])?, RoutingPattern::A),
    };
    let patterns: Vec<RoutingPattern> = match a.pattern.as_str() {
        "all" => RoutingPattern::ALL.to_vec(),
        p => vec![p.parse()?],
    };
    let n = base.layers;
    let families = match &base.connection {
        ConnectionSpec::None | ConnectionSpec::Chained => vec![base.connection.clone()],
        _ => vec![
            ConnectionSpec::Hard {
                perm: Permutation::new((0..n).rev().collect())?,
            },
            ConnectionSpec::soft(),
        ],
    };
    let len = (base.max_len - 1).clamp(1, 4);
    let content = |i: usize| 3 + i % (base.vocab - 3).max(1);
    let batch = Batch {
        src: vec![(0..len).map(content).collect(), (0..len.div_ceil(2)).map(|i| content(i + 2)).collect()],
        tgt: vec![(0..len).map(|i| content(i + 1)).collect(), vec![content(4)]],
    };
    let mut all_ok = true;
    for conn in &families {
        for &routing in &patterns {
            let cfg = MptConfig {
                connection: conn.clone(),
                routing,
                dropout: 0.0,
                ..base.clone()
            };
            let store = init_params(&cfg, 7)?;
            let start = std::time::Instant::now();
            let (report, _) = model_gradcheck(&cfg, &store, &batch, 0.1, a.step, a.tol)?;
            all_ok &= report.passed;
            emit(
                out,
                format!(
                    "{} pattern {}: max rel err {:.3e} ({}) in {:.1}s",
                    conn.label(),
                    routing.letter(),
                    report.max_rel_err(),
                    if report.passed { "pass" } else { "FAIL" },
                    start.elapsed().as_secs_f64()
                ),
            )?;
        }
    }
    Ok(all_ok)
}

fn ablate(a: AblateArgs, out: &mut dyn Write) -> Result<bool> {
    let cfg = ExperimentConfig::load(&a.config)?;
    let n = cfg.model.layers;
    let best = match a.best_perm {
        Some(p) => p,
        None if n == 6 => Permutation::new(vec![0, 4, 1, 5, 2, 3])?,
        None => {
            return Err(MptError::Config(format!(
                "--best-perm is required for {n} layers"
            )))
        }
    };
    let rows = run_ablation(&cfg, &standard_variants(n, &best)?, a.parallel)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| MptError::io(dir, e))?;
    }
    let mut file = std::fs::File::create(&a.out).map_err(|e| MptError::io(&a.out, e))?;
    write_ablation_csv(&rows, &cfg.decode, &mut file)?;
    let failed = rows.iter().filter(|r| r.status != "ok").count();
    emit(out, format!("{} rows ({failed} failed) -> {}", rows.len(), a.out.display()))?;
    Ok(true)
}

fn export(a: ExportArgs, out: &mut dyn Write) -> Result<bool> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    if !matches!(ck.model.connection, ConnectionSpec::Soft { .. }) {
        return Err(MptError::Config(format!(
            "{} holds a {} model, not a soft one",
            a.checkpoint.display(),
            ck.model.connection.label()
        )));
    }
    let w = soft_weights(ck.params.get("conn.soft_logits")?)?;
    let mut text = String::new();
    for r in 0..w.rows() {
        let row: Vec<String> = w.row(r).iter().map(|v| v.to_string()).collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    match a.out {
        Some(p) => {
            std::fs::write(&p, text).map_err(|e| MptError::io(&p, e))?;
            emit(out, format!("wrote {}x{} weights to {}", w.rows(), w.cols(), p.display()))?;
        }
        None => write!(out, "{text}").map_err(|e| MptError::Config(format!("writing output: {e}")))?,
    }
    Ok(true)
}

fn average(a: AverageArgs, out: &mut dyn Write) -> Result<bool> {
    if a.k == 0 {
        return Err(MptError::Config("k must be at least 1".into()));
    }
    let paths: Vec<PathBuf> = glob::glob(&a.glob)
        .map_err(|e| MptError::Config(format!("bad glob {:?}: {e}", a.glob)))?
        .filter_map(std::result::Result::ok)
        .collect();
    if paths.is_empty() {
        return Err(MptError::Config(format!("no checkpoints match {:?}", a.glob)));
    }
    let mut cks = paths
        .iter()
        .map(|p| Checkpoint::load(p).map(|c| (c, p.clone())))
        .collect::<Result<Vec<_>>>()?;
    cks.sort_by(|x, y| x.0.step.cmp(&y.0.step).then_with(|| x.1.cmp(&y.1)));
    let keep: Vec<Checkpoint> = cks.into_iter().rev().take(a.k).rev().map(|(c, _)| c).collect();
    let avg = average_checkpoints(&keep)?;
    avg.save(&a.out)?;
    emit(
        out,
        format!("averaged {} checkpoints (step {}) -> {}", keep.len(), avg.step, a.out.display()),
    )?;
    Ok(true)
}

mod error;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use bppo_core::analysis::{
    commitment_curve, compare_runs, finite_diff_check, gradient_similarity_study, FdScenario, LossKind,
    DEFAULT_FD_STEP,
};
use bppo_core::curation::{curate, format_pool, parse_pool};
use bppo_core::policy::{load_checkpoint, save_checkpoint, PolicyParams};
use bppo_core::tasks::TaskSpec;
use bppo_core::trainer::{
    eval_instances, evaluate_policy, supervised_warmup, train, Algo, ExperimentConfig, Greedy, RunDir,
    RunOptions, WarmupOutcome,
};
use clap::{Args, Parser, Subcommand, ValueEnum};

use error::CliError;

/// Largest finite-difference relative error accepted by `analyze fdcheck`.
const FD_TOLERANCE: f64 = 1e-6;

#[derive(Parser, Debug)]
#[command(name = "bppo", version, about = "BPPO and GRPO on tiny multi-exit decoder policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML experiment config; unset fields keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for all randomness; overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Task override, e.g. mod_add:10, reverse:4, plan_parity:6.
    #[arg(long, value_parser = parse_task)]
    task: Option<TaskSpec>,
    /// Worker threads; never changes results.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Progress on stderr.
    #[arg(long)]
    verbose: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Supervised warmup until the target greedy accuracy.
    Warmup {
        #[command(flatten)]
        common: Common,
        /// Run directory (default: runs/warmup-<unix time>-seed<seed>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// RL fine-tuning with GRPO or BPPO.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        algo: Option<AlgoArg>,
        /// Starting and reference checkpoint; warms up in-process when absent.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Number of RL steps; overrides the config file.
        #[arg(long)]
        steps: Option<usize>,
        /// Run directory (default: runs/train-<unix time>-seed<seed>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Greedy exact-match accuracy of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of evaluation instances (default: train.eval_size).
        #[arg(long)]
        n: Option<usize>,
        /// Exit depth to evaluate (default: deepest).
        #[arg(long)]
        exit: Option<usize>,
    },
    /// Gradient checks and measurements.
    Analyze {
        #[command(subcommand)]
        what: Analysis,
    },
    /// Diverse subset of a prompt pool (one prompt per line, token ids).
    Curate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of clusters.
        #[arg(long)]
        k: usize,
        /// Prompts kept per cluster.
        #[arg(long)]
        m: usize,
        /// Output file (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cost report of two run directories (a = baseline, b = candidate).
    Compare {
        run_a: PathBuf,
        run_b: PathBuf,
        /// Output directory for compare.csv and report.txt
        /// (default: runs/compare-<unix time>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand, Debug)]
enum Analysis {
    /// Analytic vs finite-difference gradients; exits 7 above 1e-6.
    Fdcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = LossArg::Bppo)]
        loss: LossArg,
        #[arg(long, default_value_t = 200)]
        coords: usize,
        #[arg(long, default_value_t = DEFAULT_FD_STEP)]
        step: f64,
    },
    /// Per-response gradient cosines over mixed groups.
    GradSim {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 100)]
        groups: usize,
        /// Group size (default: train.group_size).
        #[arg(long)]
        group_size: Option<usize>,
    },
    /// Commitment score as a function of frozen prefix length.
    Prefix {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 50)]
        instances: usize,
        /// Suffix samples per prefix.
        #[arg(long, default_value_t = 64)]
        k: usize,
        /// Largest prefix length (default: the task's longest answer).
        #[arg(long)]
        max_prefix: Option<usize>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AlgoArg {
    Grpo,
    Bppo,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LossArg {
    Warmup,
    Grpo,
    Bppo,
}

fn parse_task(s: &str) -> Result<TaskSpec, String> {
    s.parse().map_err(|e: bppo_core::tasks::TaskError| e.to_string())
}

/// Default < file < flags.
fn resolve(common: &Common) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            toml::from_str(&text).map_err(|e| CliError::InvalidConfig(format!("{}: {e}", path.display())))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(task) = common.task {
        cfg.task = task;
    }
    Ok(cfg)
}

fn options(common: &Common) -> Result<RunOptions, CliError> {
    if common.workers == 0 {
        return Err(CliError::Usage("--workers must be at least 1".into()));
    }
    Ok(RunOptions {
        workers: common.workers,
        verbose: common.verbose,
    })
}

fn unix_time() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn run_path(out: &Option<PathBuf>, sub: &str, seed: Option<u64>) -> PathBuf {
    out.clone().unwrap_or_else(|| {
        let name = match seed {
            Some(s) => format!("{sub}-{}-seed{s}", unix_time()),
            None => format!("{sub}-{}", unix_time()),
        };
        Path::new("runs").join(name)
    })
}

fn load(path: &Path) -> Result<PolicyParams, CliError> {
    if !path.exists() {
        return Err(CliError::MissingCheckpoint(format!("{} does not exist", path.display())));
    }
    load_checkpoint(path).map_err(|e| CliError::MissingCheckpoint(format!("{}: {e}", path.display())))
}

/// Loads a checkpoint and checks it against the resolved policy config.
fn load_matching(path: &Path, cfg: &ExperimentConfig) -> Result<PolicyParams, CliError> {
    let params = load(path)?;
    if params.config() != &cfg.policy {
        return Err(CliError::InvalidConfig(format!(
            "checkpoint {} was built with a different policy config than the resolved one",
            path.display()
        )));
    }
    Ok(params)
}

fn write_jsonl<T: serde::Serialize>(path: &Path, records: &[T]) -> Result<(), CliError> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| CliError::Other(e.to_string()))?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn run_warmup(cfg: &ExperimentConfig, opts: RunOptions, dir: &Path) -> Result<WarmupOutcome, CliError> {
    let init = PolicyParams::init(&cfg.policy, cfg.seed)?;
    let outcome = supervised_warmup(cfg, init, opts)?;
    write_jsonl(&dir.join("warmup.jsonl"), &outcome.history)?;
    Ok(outcome)
}

fn cmd_warmup(common: Common, out: Option<PathBuf>) -> Result<(), CliError> {
    let cfg = resolve(&common)?;
    cfg.validate()?;
    let opts = options(&common)?;
    let dir = run_path(&out, "warmup", Some(cfg.seed));
    let run = RunDir::create(&dir, &cfg, "warmup")?;
    let outcome = run_warmup(&cfg, opts, &dir)?;
    run.save_final(&outcome.params)?;
    let summary = serde_json::json!({
        "seed": cfg.seed,
        "steps": outcome.steps,
        "accuracy": outcome.accuracy,
    });
    fs::write(dir.join(RunDir::SUMMARY), format!("{summary:#}\n"))?;
    println!(
        "warmup done: steps={} accuracy={:.4} checkpoint={}",
        outcome.steps,
        outcome.accuracy,
        dir.join(RunDir::FINAL_CHECKPOINT).display()
    );
    Ok(())
}

fn cmd_train(
    common: Common,
    algo: Option<AlgoArg>,
    init: Option<PathBuf>,
    steps: Option<usize>,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let mut cfg = resolve(&common)?;
    if let Some(a) = algo {
        cfg.train.algo = match a {
            AlgoArg::Grpo => Algo::Grpo,
            AlgoArg::Bppo => Algo::Bppo,
        };
    }
    if let Some(s) = steps {
        cfg.train.steps = s;
    }
    cfg.validate()?;
    let opts = options(&common)?;
    let start = match &init {
        Some(p) => Some(load_matching(p, &cfg)?),
        None => None,
    };
    let dir = run_path(&out, "train", Some(cfg.seed));
    let mut run = RunDir::create(&dir, &cfg, "train")?;
    let start = match start {
        Some(p) => p,
        None => {
            let w = run_warmup(&cfg, opts, &dir)?;
            save_checkpoint(&w.params, &dir.join("warmup.ckpt"))?;
            w.params
        }
    };
    let outcome = train(&cfg, &start, &start, opts, Some(&mut run))?;
    println!(
        "train done: algo={} steps={} initial_accuracy={:.4} final_accuracy={:.4} dir={}",
        cfg.train.algo,
        cfg.train.steps,
        outcome.initial_accuracy,
        outcome.final_accuracy,
        dir.display()
    );
    Ok(())
}

fn cmd_eval(common: Common, checkpoint: PathBuf, n: Option<usize>, exit: Option<usize>) -> Result<(), CliError> {
    let cfg = resolve(&common)?;
    cfg.task.validate().map_err(|e| CliError::InvalidConfig(e.to_string()))?;
    let params = load(&checkpoint)?;
    let depth = exit.unwrap_or(params.config().deepest_exit());
    params.config().exit_index(depth)?;
    let n = n.unwrap_or(cfg.train.eval_size);
    let policy = Greedy {
        params: &params,
        exit_depth: depth,
    };
    let acc = evaluate_policy(&policy, &cfg.task, n, cfg.seed)?;
    println!(
        "{}",
        serde_json::json!({ "accuracy": acc, "n": n, "exit_depth": depth, "seed": cfg.seed })
    );
    Ok(())
}

fn cmd_fdcheck(common: Common, loss: LossArg, coords: usize, step: f64) -> Result<(), CliError> {
    let cfg = resolve(&common)?;
    cfg.policy.validate()?;
    let kind = match loss {
        LossArg::Warmup => LossKind::Warmup,
        LossArg::Grpo => LossKind::Grpo,
        LossArg::Bppo => LossKind::Bppo,
    };
    let started = Instant::now();
    let scenario = FdScenario::build(kind, &cfg.policy, cfg.seed)?;
    let report = finite_diff_check(&scenario, coords, step, cfg.seed)?;
    let secs = started.elapsed().as_secs_f64();
    let masked_ok = report
        .masked
        .as_ref()
        .is_none_or(|m| m.max_abs_analytic == 0.0 && m.max_abs_numeric < 1e-9);
    println!(
        "{}",
        serde_json::json!({
            "loss": kind,
            "coords": report.entries.len(),
            "step": step,
            "max_rel_error": report.max_rel_error,
            "masked": report.masked,
            "seconds": secs,
        })
    );
    if report.max_rel_error >= FD_TOLERANCE || !masked_ok {
        return Err(CliError::CheckFailed(format!(
            "max relative error {:.3e} (limit {FD_TOLERANCE:e}), masked coordinates ok={masked_ok}",
            report.max_rel_error
        )));
    }
    Ok(())
}

fn cmd_grad_sim(common: Common, checkpoint: PathBuf, groups: usize, group_size: Option<usize>) -> Result<(), CliError> {
    let cfg = resolve(&common)?;
    let params = load(&checkpoint)?;
    let g = group_size.unwrap_or(cfg.train.group_size);
    let pool = thread_pool(common.workers)?;
    let s = pool.install(|| gradient_similarity_study(&params, &cfg.task, groups, g, cfg.seed))?;
    println!("{}", serde_json::to_string(&s).map_err(|e| CliError::Other(e.to_string()))?);
    Ok(())
}

fn cmd_prefix(
    common: Common,
    checkpoint: PathBuf,
    instances: usize,
    k: usize,
    max_prefix: Option<usize>,
) -> Result<(), CliError> {
    let cfg = resolve(&common)?;
    let params = load(&checkpoint)?;
    let max = max_prefix.unwrap_or(cfg.task.max_answer_len());
    let lens: Vec<usize> = (0..=max).collect();
    let inst = eval_instances(&cfg.task, instances, cfg.seed);
    let pool = thread_pool(common.workers)?;
    let curve = pool.install(|| commitment_curve(&params, &cfg.task, &inst, &lens, k, cfg.seed))?;
    println!("prefix_len,mean_score,instances");
    for p in curve {
        println!("{},{:.6},{}", p.prefix_len, p.mean_score, p.instances);
    }
    Ok(())
}

fn cmd_curate(
    common: Common,
    pool_path: PathBuf,
    checkpoint: PathBuf,
    k: usize,
    m: usize,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let text = fs::read_to_string(&pool_path).map_err(|e| CliError::Io(format!("{}: {e}", pool_path.display())))?;
    let prompts = parse_pool(&text)?;
    let params = load(&checkpoint)?;
    let pool = thread_pool(common.workers)?;
    let result = pool.install(|| curate(&prompts, k, m, &params))?;
    let chosen: Vec<&[usize]> = result.selected.iter().map(|&i| prompts[i].as_slice()).collect();
    let body = format_pool(&chosen);
    match out {
        Some(p) => fs::write(&p, body).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?,
        None => std::io::stdout().write_all(body.as_bytes())?,
    }
    Ok(())
}

fn cmd_compare(a: PathBuf, b: PathBuf, out: Option<PathBuf>) -> Result<(), CliError> {
    for d in [&a, &b] {
        if !d.is_dir() {
            return Err(CliError::Io(format!("{} is not a run directory", d.display())));
        }
    }
    let report = compare_runs(&a, &b)?;
    let table = report.to_table();
    print!("{table}");
    let dir = run_path(&out, "compare", None);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("report.txt"), &table)?;
    let csv = fs::File::create(dir.join("compare.csv"))?;
    report.write_csv(csv)?;
    Ok(())
}

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool, CliError> {
    if workers == 0 {
        return Err(CliError::Usage("--workers must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Other(format!("thread pool: {e}")))
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Warmup { common, out } => cmd_warmup(common, out),
        Command::Train {
            common,
            algo,
            init,
            steps,
            out,
        } => cmd_train(common, algo, init, steps, out),
        Command::Eval {
            common,
            checkpoint,
            n,
            exit,
        } => cmd_eval(common, checkpoint, n, exit),
        Command::Analyze { what } => match what {
            Analysis::Fdcheck {
                common,
                loss,
                coords,
                step,
            } => cmd_fdcheck(common, loss, coords, step),
            Analysis::GradSim {
                common,
                checkpoint,
                groups,
                group_size,
            } => cmd_grad_sim(common, checkpoint, groups, group_size),
            Analysis::Prefix {
                common,
                checkpoint,
                instances,
                k,
                max_prefix,
            } => cmd_prefix(common, checkpoint, instances, k, max_prefix),
        },
        Command::Curate {
            common,
            pool,
            checkpoint,
            k,
            m,
            out,
        } => cmd_curate(common, pool, checkpoint, k, m, out),
        Command::Compare { run_a, run_b, out } => cmd_compare(run_a, run_b, out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = e.print();
                return ExitCode::from(if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand { 2 } else { 0 });
            }
            let first = e.to_string().lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            eprintln!("{}", CliError::Usage(first).line());
            return ExitCode::from(2);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.code() as u8)
        }
    }
}

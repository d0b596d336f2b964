//! Command-line front end: argument parsing and the command
//! implementations behind the `chomsky-bench` binary.

use std::io::Write;
use std::path::{Path, PathBuf};

use chomsky_core::harness::{
    self, checkpoint, parse_key_values, report, results, stream_rng, Stream, SweepGrid, TrainConfig,
};
use chomsky_core::introspection::{export_trace, record_trace};
use chomsky_core::models::{Arch, Model};
use chomsky_core::tasks::TaskId;
use chomsky_core::verify::{selftest, SelftestOptions};
use chomsky_core::{Error, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "chomsky-bench", version, about = "Length-generalization benchmark for sequence models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model, evaluate it and write its run directory.
    Train(TrainArgs),
    /// Re-evaluate a trained run directory.
    Evaluate(EvaluateArgs),
    /// Train every seed / learning-rate / architecture-grid combination.
    Sweep(SweepArgs),
    /// Record a model's internal states on one input and export CSVs.
    Trace(TraceArgs),
    /// List the available tasks.
    ListTasks,
    /// Run the built-in consistency checks.
    Selftest(SelftestArgs),
    /// Summarize a results file as a score table.
    Report(ReportArgs),
}

/// Training configuration: an optional `key = value` file, overridden by
/// flags.
#[derive(Debug, Default, Args)]
pub struct ConfigArgs {
    /// Config file with `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub arch: Option<String>,
    /// desk or paper.
    #[arg(long)]
    pub profile: Option<String>,
    #[arg(long)]
    pub hidden: Option<String>,
    /// Longest training length.
    #[arg(long = "N")]
    pub n: Option<String>,
    /// Longest test length.
    #[arg(long = "M")]
    pub m: Option<String>,
    #[arg(long)]
    pub batch: Option<String>,
    #[arg(long)]
    pub steps: Option<String>,
    #[arg(long)]
    pub lr: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(long = "pos-enc")]
    pub pos_enc: Option<String>,
    #[arg(long = "n-tapes")]
    pub n_tapes: Option<String>,
    /// 0, l or 2l.
    #[arg(long = "comp-tokens")]
    pub comp_tokens: Option<String>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub autoregressive: Option<String>,
    #[arg(long = "eval-k")]
    pub eval_k: Option<String>,
}

impl ConfigArgs {
    /// File values first, then flags, so flags win.
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut pairs = match &self.config {
            Some(path) => parse_key_values(&std::fs::read_to_string(path)?)?,
            None => Vec::new(),
        };
        let flags = [
            ("task", &self.task),
            ("arch", &self.arch),
            ("profile", &self.profile),
            ("hidden", &self.hidden),
            ("N", &self.n),
            ("M", &self.m),
            ("batch", &self.batch),
            ("steps", &self.steps),
            ("lr", &self.lr),
            ("seed", &self.seed),
            ("pos_enc", &self.pos_enc),
            ("n_tapes", &self.n_tapes),
            ("comp_tokens", &self.comp_tokens),
            ("autoregressive", &self.autoregressive),
            ("eval_k", &self.eval_k),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                pairs.push((key.to_string(), v.clone()));
            }
        }
        TrainConfig::from_pairs(&pairs)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Run directory for the config, checkpoint, curve and result line.
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    /// Steps between progress lines.
    #[arg(long = "log-every")]
    pub log_every: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    /// Longest test length (default: the run's).
    #[arg(long = "M")]
    pub m: Option<usize>,
    #[arg(long = "eval-k")]
    pub eval_k: Option<usize>,
    /// Seed of the evaluation stream (default: the run's).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Curve output (default: <run>/eval_curve.csv).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// paper: 10 seeds × 3 learning rates × the architecture's grid;
    /// single: just the base config.
    #[arg(long, default_value = "paper")]
    pub grid: String,
    /// Comma-separated seeds replacing the grid's.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Comma-separated learning rates replacing the grid's.
    #[arg(long, value_delimiter = ',')]
    pub lrs: Option<Vec<f64>>,
    /// Worker threads (default: cores, capped by CHOMSKY_BENCH_WORKERS).
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long, default_value = "sweep")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TraceArgs {
    /// Directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    /// Input string in the task's alphabet, e.g. `abba`.
    #[arg(long)]
    pub input: String,
    #[arg(long, default_value = "trace")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    /// Damage the checkpoint under test (the check must then fail).
    #[arg(long, hide = true)]
    pub corrupt_checkpoint: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Results file (JSON lines).
    pub results: PathBuf,
}

/// Parses `argv` (including the program name).
pub fn parse_invocation<I, S>(argv: I) -> std::result::Result<Cli, clap::Error>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    Cli::try_parse_from(argv)
}

const CONFIG_FILE: &str = "config.json";
const MODEL_FILE: &str = "model.chmb";
const CURVE_FILE: &str = "curve.csv";
const RESULTS_FILE: &str = "results.jsonl";

/// Runs a parsed command, writing human-readable output to `out`.
/// Returns `Ok(false)` when a check-style command found failures.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<bool> {
    match cli.command {
        Command::Train(args) => train(args, out),
        Command::Evaluate(args) => evaluate(args, out),
        Command::Sweep(args) => sweep(args, out),
        Command::Trace(args) => trace(args, out),
        Command::ListTasks => list_tasks(out),
        Command::Selftest(args) => run_selftest(args, out),
        Command::Report(args) => {
            write!(out, "{}", report::report_file(&args.results)?)?;
            Ok(true)
        }
    }
}

fn train(args: TrainArgs, out: &mut dyn Write) -> Result<bool> {
    let mut config = args.config.resolve()?;
    if let Some(every) = args.log_every {
        config.log_every = every.max(1);
    }
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join(CONFIG_FILE), serde_json::to_string_pretty(&config)?)?;
    let (model, record) = harness::train_with(&config, &mut |p| {
        eprintln!("step {:>8}  loss {:.5}  train accuracy {:.4}", p.step, p.loss, p.train_accuracy);
    })?;
    checkpoint::save(&args.out.join(MODEL_FILE), &model.params)?;
    results::write_curve(&args.out.join(CURVE_FILE), record.curve_points())?;
    results::append_result(&args.out.join(RESULTS_FILE), &results::ResultLine::from_record(&record, CURVE_FILE))?;
    if record.diverged {
        writeln!(out, "run {} diverged at step {}", record.config_hash, record.steps_run)?;
    } else {
        writeln!(out, "run {} score {:.2} ({:.1}s)", record.config_hash, record.score, record.wallclock_s)?;
    }
    Ok(true)
}

fn load_run(dir: &Path) -> Result<(TrainConfig, Model<f32>)> {
    let config: TrainConfig = serde_json::from_str(&std::fs::read_to_string(dir.join(CONFIG_FILE))?)?;
    let mut model = Model::<f32>::new(config.model.clone(), &config.task.spec(), &mut stream_rng(config.seed, Stream::Init))?;
    checkpoint::load(&dir.join(MODEL_FILE), &mut model.params)?;
    Ok((config, model))
}

fn evaluate(args: EvaluateArgs, out: &mut dyn Write) -> Result<bool> {
    let (config, model) = load_run(&args.run)?;
    let m = args.m.unwrap_or(config.test_max_len);
    let k = args.eval_k.unwrap_or(config.eval_k);
    let mut rng = stream_rng(args.seed.unwrap_or(config.seed), Stream::Eval);
    let curve = harness::evaluate(&model, config.task, config.train_max_len, m, k, &mut rng)?;
    let path = args.out.unwrap_or_else(|| args.run.join("eval_curve.csv"));
    results::write_curve(&path, curve.iter().enumerate().map(|(i, &a)| (config.train_max_len + 1 + i, a)))?;
    writeln!(out, "score {:.2} over lengths {}..={m}", harness::compute_score(&curve), config.train_max_len + 1)?;
    Ok(true)
}

fn sweep(args: SweepArgs, out: &mut dyn Write) -> Result<bool> {
    let base = args.config.resolve()?;
    let mut grid = match args.grid.as_str() {
        "paper" => SweepGrid::paper(base.model.arch),
        "single" => SweepGrid::single(&base),
        other => return Err(Error::Config(format!("unknown grid '{other}'; expected paper or single"))),
    };
    if let Some(seeds) = args.seeds {
        grid.seeds = seeds;
    }
    if let Some(lrs) = args.lrs {
        grid.lrs = lrs;
    }
    let runs = args.out.join("runs");
    let curves = args.out.join("curves");
    std::fs::create_dir_all(&runs)?;
    std::fs::create_dir_all(&curves)?;
    let workers = args.workers.unwrap_or_else(harness::workers_from_env).max(1);
    // Each run writes its own files; they are merged once all finish.
    let outcome = harness::sweep(&base, &grid, workers, &|config, record| {
        let name = config.hash();
        results::write_curve(&curves.join(format!("{name}.csv")), record.curve_points())?;
        let line = results::ResultLine::from_record(record, format!("curves/{name}.csv"));
        std::fs::write(runs.join(format!("{name}.json")), serde_json::to_string(&line)? + "\n")?;
        eprintln!("finished {} seed {} lr {}: score {:.2}", name, record.seed, record.lr, record.score);
        Ok(())
    })?;
    let merged = args.out.join(RESULTS_FILE);
    let mut text = String::new();
    for config in &outcome.configs {
        text.push_str(&std::fs::read_to_string(runs.join(format!("{}.json", config.hash())))?);
    }
    std::fs::write(&merged, text)?;
    for cell in &outcome.cells {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.2}"));
        writeln!(
            out,
            "{:<40} runs {:>3}  best {:>6}  mean {:>6} ± {:<6}  diverged {}",
            cell.label,
            cell.runs,
            fmt(cell.best),
            fmt(cell.mean),
            fmt(cell.std),
            cell.diverged
        )?;
    }
    if let Some(best) = outcome.best_record() {
        writeln!(out, "best: seed {} lr {} score {:.2}", best.seed, best.lr, best.score)?;
    }
    write!(out, "{}", report::report_file(&merged)?)?;
    Ok(true)
}

fn trace(args: TraceArgs, out: &mut dyn Write) -> Result<bool> {
    let (config, model) = load_run(&args.run)?;
    let input = config.task.spec().parse_input(&args.input)?;
    let trace = record_trace(&model, config.task, &input)?;
    export_trace(&trace, &args.out)?;
    writeln!(out, "recorded {} steps into {}", trace.len(), args.out.display())?;
    Ok(true)
}

fn list_tasks(out: &mut dyn Write) -> Result<bool> {
    writeln!(out, "{:<22} {:<5} {:<28} {:<10} {:>8}  example", "task", "level", "input symbols", "output", "chance")?;
    for task in TaskId::ALL {
        let spec = task.spec();
        writeln!(
            out,
            "{:<22} {:<5} {:<28} {:<10} {:>8.3}  {} -> {}",
            task.name(),
            spec.level.short(),
            spec.input_symbols.join(" "),
            spec.output_symbols.join(" "),
            spec.baseline,
            spec.example.0,
            spec.example.1
        )?;
    }
    writeln!(out, "\narchitectures: {}", Arch::ALL.map(Arch::name).join(", "))?;
    Ok(true)
}

fn run_selftest(args: SelftestArgs, out: &mut dyn Write) -> Result<bool> {
    let checks = selftest(SelftestOptions { corrupt_checkpoint: args.corrupt_checkpoint });
    for c in &checks {
        writeln!(out, "[{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail)?;
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    writeln!(out, "{} checks, {failed} failed", checks.len())?;
    Ok(failed == 0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> std::result::Result<Cli, clap::Error> {
        parse_invocation(std::iter::once("chomsky-bench").chain(args.iter().copied()))
    }

    fn train_config(args: &[&str]) -> Result<TrainConfig> {
        match parse(args).expect("parses").command {
            Command::Train(t) => t.config.resolve(),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn train_invocation() {
        let c = train_config(&["train", "--task", "parity_check", "--arch", "rnn", "--profile", "desk"]).unwrap();
        assert_eq!((c.task, c.model.arch, c.model.hidden, c.batch_size), (TaskId::ParityCheck, Arch::Rnn, 64, 64));
    }

    #[test]
    fn unknown_task_lists_all_ids() {
        let err = train_config(&["train", "--task", "nosuch"]).unwrap_err().to_string();
        for task in TaskId::ALL {
            assert!(err.contains(task.name()), "{err}");
        }
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.cfg");
        std::fs::write(&file, "task = even_pairs\nlr = 1e-4\nsteps = 7\n").unwrap();
        let path = file.to_str().unwrap();
        let c = train_config(&["train", "--config", path, "--lr", "3e-4"]).unwrap();
        assert_eq!((c.lr, c.steps, c.task), (3e-4, 7, TaskId::EvenPairs));
    }

    #[test]
    fn misc_flags() {
        let c = train_config(&[
            "train", "--task", "duplicate_string", "--arch", "tape_rnn", "--N", "10", "--M", "30", "--n-tapes", "4",
            "--comp-tokens", "2l", "--eval-k", "5", "--seed", "9",
        ])
        .unwrap();
        assert_eq!((c.train_max_len, c.test_max_len, c.model.n_tapes, c.eval_k, c.seed), (10, 30, 4, 5, 9));
        let c = train_config(&["train", "--task", "reverse_string", "--arch", "transformer", "--autoregressive"]).unwrap();
        assert!(c.model.autoregressive);
    }

    #[test]
    fn unknown_flags_and_commands_fail() {
        assert!(parse(&["fly"]).is_err());
        assert!(parse(&["train", "--wings", "2"]).is_err());
        assert!(parse(&[]).is_err());
        assert!(parse(&["list-tasks"]).is_ok());
    }

    #[test]
    fn list_tasks_covers_catalogue() {
        let mut buf = Vec::new();
        assert!(list_tasks(&mut buf).unwrap());
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().filter(|l| TaskId::ALL.iter().any(|t| l.starts_with(t.name()))).count(), 15);
    }
}

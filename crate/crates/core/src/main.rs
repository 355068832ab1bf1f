use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use reward_predictive::agents::stats::rank_sum_greater;
use reward_predictive::agents::{run_transfer_suite, AgentKind};
use reward_predictive::config::ExperimentConfig;
use reward_predictive::eval::{confusion_matrix, median, reward_sequence_error, write_reward_errors, LatentModel};
use reward_predictive::mdp::{make_env, sample_trajectories, TrajectoryDataset, UniformPolicy};
use reward_predictive::refine::refine_to_fixpoint;
use reward_predictive::Error;

#[derive(Parser)]
#[command(name = "rpr", version, about = "Reward-predictive state representations by partition refinement")]
struct Cli {
    /// Suppress progress output; only errors are reported.
    #[arg(long, global = true)]
    quiet: bool,
    /// Replace the seed given in the config file.
    #[arg(long, global = true)]
    seed_override: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a trajectory dataset (and a held-out set when `[test]` is configured).
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Refine a dataset to a fixpoint and save the trace, clustering and model.
    Refine {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a saved model on held-out trajectories.
    Eval {
        /// A model bundle, or a refine output directory.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Supplies the environment for the confusion matrix.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare the three agents on the configured transfer tasks.
    Transfer {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Error(Error),
    NotConverged,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => 4,
        Error::Csv(c) if matches!(c.kind(), csv::ErrorKind::Io(_)) => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(if cli.quiet {
            log::LevelFilter::Error
        } else {
            log::LevelFilter::Warn
        })
        .parse_default_env()
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::NotConverged) => {
            eprintln!("error: refinement did not reach a fixpoint; partial outputs written");
            ExitCode::from(3)
        }
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

struct Ctx {
    quiet: bool,
}

impl Ctx {
    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", msg.as_ref());
        }
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let ctx = Ctx { quiet: cli.quiet };
    let load = |path: &Path| -> Result<ExperimentConfig, Error> {
        let mut cfg = ExperimentConfig::load(path)?;
        if let Some(seed) = cli.seed_override {
            cfg.set_seed(seed);
        }
        Ok(cfg)
    };
    match &cli.command {
        Command::Generate { config, out } => {
            let cfg = load(config)?;
            generate(&ctx, &cfg, config, &out_dir(out, &cfg)?)
        }
        Command::Refine { config, dataset, out } => {
            let cfg = load(config)?;
            refine(&ctx, &cfg, config, dataset, &out_dir(out, &cfg)?)
        }
        Command::Eval {
            model,
            dataset,
            config,
            out,
        } => {
            let cfg = config.as_deref().map(load).transpose()?;
            let out = match (out, &cfg) {
                (Some(o), _) => o.clone(),
                (None, Some(c)) => out_dir(&None, c)?,
                (None, None) => model.join("eval"),
            };
            evaluate(&ctx, cfg.as_ref(), model, dataset, &out)
        }
        Command::Transfer { config, out } => {
            let cfg = load(config)?;
            transfer(&ctx, &cfg, config, &out_dir(out, &cfg)?)
        }
    }
}

fn out_dir(flag: &Option<PathBuf>, cfg: &ExperimentConfig) -> Result<PathBuf, Error> {
    flag.clone()
        .or_else(|| cfg.out.clone())
        .ok_or_else(|| Error::Config("no output directory: pass --out or set `out` in the config".into()))
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, Error> {
    File::create(path).map(BufWriter::new).map_err(|e| io_error(path, e))
}

fn read_dataset(path: &Path, action_count: usize) -> Result<TrajectoryDataset, Error> {
    let file = File::open(path).map_err(|e| io_error(path, e))?;
    TrajectoryDataset::read_csv(std::io::BufReader::new(file), action_count)
}

/// Plain `key=value` lines; no timestamps so reruns are byte-identical.
fn write_manifest(dir: &Path, entries: &[(&str, String)]) -> Result<(), Error> {
    let mut text = String::new();
    let _ = writeln!(text, "tool=rpr {}", env!("CARGO_PKG_VERSION"));
    for (k, v) in entries {
        let _ = writeln!(text, "{k}={v}");
    }
    let path = dir.join("manifest.txt");
    fs::write(&path, text).map_err(|e| io_error(&path, e))
}

fn json<T: serde::Serialize>(value: &T) -> Result<String, Error> {
    Ok(serde_json::to_string(value)?)
}

fn generate(ctx: &Ctx, cfg: &ExperimentConfig, config: &Path, out: &Path) -> Result<(), Failure> {
    let env = make_env(&cfg.env)?;
    let policy = UniformPolicy {
        action_count: env.action_count(),
    };
    create_dir(out)?;
    let data = sample_trajectories(env.as_ref(), &policy, cfg.dataset.trajectories, cfg.dataset.max_len, cfg.seed)?;
    data.write_csv(create(&out.join("dataset.csv"))?)?;
    ctx.say(format!(
        "dataset.csv: {} trajectories, {} transitions, {} distinct states",
        data.trajectory_count(),
        data.transition_count(),
        data.instance_count()
    ));
    let mut manifest = vec![
        ("command", "generate".to_string()),
        ("config", config.display().to_string()),
        ("env", json(&cfg.env)?),
        ("seed", cfg.seed.to_string()),
        ("trajectories", cfg.dataset.trajectories.to_string()),
        ("max_len", cfg.dataset.max_len.to_string()),
    ];
    if let Some(test) = &cfg.test {
        let held_out = sample_trajectories(env.as_ref(), &policy, test.trajectories, test.max_len, cfg.test_seed())?;
        held_out.write_csv(create(&out.join("test.csv"))?)?;
        ctx.say(format!("test.csv: {} trajectories", held_out.trajectory_count()));
        manifest.push(("test_seed", cfg.test_seed().to_string()));
        manifest.push(("test_trajectories", test.trajectories.to_string()));
        manifest.push(("test_max_len", test.max_len.to_string()));
    }
    write_manifest(out, &manifest)?;
    Ok(())
}

fn write_model(model: &LatentModel, dir: &Path, iteration: usize) -> Result<(), Error> {
    model.write_bundle(dir)?;
    let path = dir.join("model.txt");
    let mut text = fs::read_to_string(&path).map_err(|e| io_error(&path, e))?;
    let _ = writeln!(text, "iteration={iteration}");
    fs::write(&path, text).map_err(|e| io_error(&path, e))
}

fn refine(ctx: &Ctx, cfg: &ExperimentConfig, config: &Path, dataset: &Path, out: &Path) -> Result<(), Failure> {
    let env = make_env(&cfg.env)?;
    let data = read_dataset(dataset, env.action_count())?;
    create_dir(out)?;
    let outcome = refine_to_fixpoint(&data, &cfg.refine)?;
    for e in &outcome.trace.entries {
        ctx.say(format!(
            "iteration {}: {} partitions ({} non-terminal), {} ignored",
            e.iteration,
            e.partition_count,
            e.assignment.non_terminal_count(),
            e.ignored_count
        ));
    }
    outcome.trace.write_csv(create(&out.join("trace.csv"))?)?;
    outcome.assignment.write_csv(create(&out.join("assignment.csv"))?)?;
    let last = outcome.trace.entries.last().map_or(0, |e| e.iteration);
    write_model(&LatentModel::from_outcome(&outcome)?, &out.join("model"), last)?;
    for e in &outcome.trace.entries {
        if let Some(s) = &e.snapshot {
            let model = LatentModel::new(s.representation.clone(), s.lsfm.clone(), e.assignment.terminal_partition())?;
            write_model(&model, &out.join("snapshots").join(e.iteration.to_string()), e.iteration)?;
        }
    }
    write_manifest(
        out,
        &[
            ("command", "refine".to_string()),
            ("config", config.display().to_string()),
            ("dataset", dataset.display().to_string()),
            ("env", json(&cfg.env)?),
            ("refine", json(&cfg.refine)?),
            ("seed", cfg.seed.to_string()),
            ("converged", outcome.converged.to_string()),
            ("iterations", outcome.trace.iterations().to_string()),
            ("partitions", outcome.assignment.partition_count().to_string()),
            ("non_terminal_partitions", outcome.assignment.non_terminal_count().to_string()),
            ("ignored", outcome.assignment.ignored_count().to_string()),
        ],
    )?;
    if !outcome.converged {
        return Err(Failure::NotConverged);
    }
    ctx.say(format!(
        "fixpoint: {} non-terminal partitions + terminal",
        outcome.assignment.non_terminal_count()
    ));
    Ok(())
}

fn model_iteration(dir: &Path) -> usize {
    fs::read_to_string(dir.join("model.txt"))
        .ok()
        .and_then(|t| t.lines().find_map(|l| l.strip_prefix("iteration=")?.trim().parse().ok()))
        .unwrap_or(0)
}

/// Bundles under `path`: itself, or every snapshot of a refine output, or its final model.
fn collect_bundles(path: &Path) -> Result<Vec<(usize, PathBuf)>, Error> {
    if path.join("representation.json").is_file() {
        return Ok(vec![(model_iteration(path), path.to_path_buf())]);
    }
    let snapshots = path.join("snapshots");
    if snapshots.is_dir() {
        let mut found = Vec::new();
        for entry in fs::read_dir(&snapshots).map_err(|e| io_error(&snapshots, e))? {
            let dir = entry.map_err(|e| io_error(&snapshots, e))?.path();
            if dir.join("representation.json").is_file() {
                found.push((model_iteration(&dir), dir));
            }
        }
        found.sort();
        if !found.is_empty() {
            return Ok(found);
        }
    }
    let model = path.join("model");
    if model.join("representation.json").is_file() {
        return Ok(vec![(model_iteration(&model), model)]);
    }
    Err(Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::new(std::io::ErrorKind::NotFound, "no model bundle found"),
    })
}

fn evaluate(ctx: &Ctx, cfg: Option<&ExperimentConfig>, model: &Path, dataset: &Path, out: &Path) -> Result<(), Failure> {
    let bundles = collect_bundles(model)?;
    let models = bundles
        .iter()
        .map(|(i, dir)| Ok((*i, LatentModel::read_bundle(dir)?)))
        .collect::<Result<Vec<_>, Error>>()?;
    let actions = models[0].1.action_count();
    let test = read_dataset(dataset, actions)?;
    create_dir(out)?;
    let mut runs = Vec::new();
    for (iteration, m) in &models {
        let errors = reward_sequence_error(m, &test)?;
        ctx.say(format!(
            "iteration {iteration}: median reward-sequence error {:.6} over {} trajectories",
            median(&errors).unwrap_or(f64::NAN),
            errors.len()
        ));
        runs.push((*iteration, errors));
    }
    write_reward_errors(create(&out.join("reward_errors.csv"))?, &runs)?;
    let mut manifest = vec![
        ("command", "eval".to_string()),
        ("model", model.display().to_string()),
        ("dataset", dataset.display().to_string()),
        (
            "iterations",
            runs.iter().map(|r| r.0.to_string()).collect::<Vec<_>>().join(";"),
        ),
    ];
    if let Some(cfg) = cfg {
        let env = make_env(&cfg.env)?;
        let (iteration, last) = models.last().expect("at least one bundle");
        let cm = confusion_matrix(&test, last, env.as_ref(), None)?;
        cm.write_csv(create(&out.join("confusion.csv"))?)?;
        ctx.say(format!(
            "confusion.csv: {} hidden states by {} partitions (iteration {iteration})",
            cm.counts.len(),
            cm.partition_count()
        ));
        manifest.push(("env", json(&cfg.env)?));
        manifest.push(("seed", cfg.seed.to_string()));
    }
    write_manifest(out, &manifest)?;
    Ok(())
}

fn transfer(ctx: &Ctx, cfg: &ExperimentConfig, config: &Path, out: &Path) -> Result<(), Failure> {
    let spec = cfg
        .transfer
        .as_ref()
        .ok_or_else(|| Error::Config("the config has no [transfer] section".into()))?;
    create_dir(out)?;
    let result = run_transfer_suite(spec, &cfg.refine, &cfg.agent)?;
    result.write_curves(create(&out.join("curves.csv"))?)?;
    result.write_summary(create(&out.join("summary.csv"))?)?;

    let mut stats = csv::Writer::from_writer(create(&out.join("tests.csv"))?);
    stats
        .write_record(["task", "agent", "baseline", "mean", "baseline_mean", "u", "p_greater"])
        .map_err(Error::from)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    for task in &spec.tests {
        let scratch = result.scores(&task.name, AgentKind::Scratch);
        for kind in [AgentKind::RewardPredictive, AgentKind::PretrainedInit] {
            let scores = result.scores(&task.name, kind);
            let r = rank_sum_greater(&scores, &scratch)?;
            ctx.say(format!(
                "{}: {} {:.4} vs scratch {:.4} (p = {:.4})",
                task.name,
                kind.name(),
                mean(&scores),
                mean(&scratch),
                r.p_greater
            ));
            stats
                .write_record([
                    task.name.clone(),
                    kind.name().to_string(),
                    AgentKind::Scratch.name().to_string(),
                    format!("{:?}", mean(&scores)),
                    format!("{:?}", mean(&scratch)),
                    format!("{:?}", r.u),
                    format!("{:?}", r.p_greater),
                ])
                .map_err(Error::from)?;
        }
    }
    stats.flush().map_err(|e| io_error(out, e))?;
    write_manifest(
        out,
        &[
            ("command", "transfer".to_string()),
            ("config", config.display().to_string()),
            ("transfer", json(spec)?),
            ("refine", json(&cfg.refine)?),
            ("agent", json(&cfg.agent)?),
            ("seed", cfg.seed.to_string()),
            (
                "partition_counts",
                result
                    .partition_counts
                    .iter()
                    .map(|c| c.to_string())
                    .collect::<Vec<_>>()
                    .join(";"),
            ),
        ],
    )?;
    Ok(())
}

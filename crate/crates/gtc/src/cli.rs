//! `train`, `evaluate`, `ablate`, `sweep` and `synth` commands.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use clap::{Arg, ArgAction, ArgMatches, Command};
use gtc_core::config::KEYS;
use gtc_core::dataset::{generate_synthetic, SyntheticSpec};
use gtc_core::eval::{run_ablation, run_sweep, summarize_runs, ResultsTable};
use gtc_core::train::{evaluate_model, train_with, TrainOutcome};
use gtc_core::{ContentFeatures, InteractionDataset, SplitTag, TrainConfig};

use crate::io;
use crate::runs::{self, MetricsLog};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Distinguishes bad input (exit 1) from failures while running (exit 2).
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(e) | Failure::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

fn runtime(e: anyhow::Error) -> Failure {
    Failure::Runtime(e)
}

fn config_args() -> Vec<Arg> {
    let mut args = vec![Arg::new("config")
        .long("config")
        .value_name("FILE")
        .help("`key = value` config file; flags override it")];
    for key in KEYS {
        args.push(
            Arg::new(*key)
                .long(key.replace('_', "-"))
                .value_name("VALUE")
                .action(ArgAction::Set),
        );
    }
    args
}

pub fn command() -> Command {
    let with_config = |c: Command| c.args(config_args());
    Command::new("gtc")
        .about("Multi-modal recommendation with interaction-guided diffusion and total-correlation alignment")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(with_config(Command::new("train").about("Train one variant and evaluate the best checkpoint")))
        .subcommand(with_config(
            Command::new("evaluate")
                .about("Re-evaluate the checkpoint in a train run directory")
                .arg(Arg::new("run").long("run").value_name("DIR").required(true)),
        ))
        .subcommand(with_config(Command::new("ablate").about("Train every variant for every seed")))
        .subcommand(with_config(Command::new("sweep").about("Train at each value of one config key")))
        .subcommand(with_config(Command::new("synth").about("Write a planted synthetic dataset")))
}

fn overrides(m: &ArgMatches) -> Vec<(String, String)> {
    KEYS.iter()
        .filter_map(|k| m.get_one::<String>(k).map(|v| (k.to_string(), v.clone())))
        .collect()
}

fn load_config(m: &ArgMatches, base_text: Option<String>) -> Result<TrainConfig, Failure> {
    let text = match (m.get_one::<String>("config"), base_text) {
        (Some(path), _) => fs::read_to_string(path)
            .with_context(|| format!("reading config {path}"))
            .map_err(Failure::Usage)?,
        (None, Some(t)) => t,
        (None, None) => String::new(),
    };
    TrainConfig::parse(&text, &overrides(m)).map_err(|e| Failure::Usage(e.into()))
}

/// Parses `args` (program name first), runs the command under `runs_root` and
/// returns the created run directory.
pub fn execute<I, T>(args: I, runs_root: &Path) -> Result<PathBuf, Failure>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = command().try_get_matches_from(args).map_err(|e| Failure::Usage(e.into()))?;
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    match name {
        "evaluate" => {
            let run: &String = sub.get_one("run").expect("required");
            let run = PathBuf::from(run);
            let snapshot = fs::read_to_string(run.join(runs::CONFIG_FILE))
                .with_context(|| format!("{} is not a train run directory", run.display()))
                .map_err(Failure::Usage)?;
            let cfg = load_config(sub, Some(snapshot))?;
            cmd_evaluate(&cfg, &run, runs_root).map_err(runtime)
        }
        _ => {
            let cfg = load_config(sub, None)?;
            match name {
                "train" => cmd_train(&cfg, runs_root),
                "ablate" => cmd_ablate(&cfg, runs_root),
                "sweep" => cmd_sweep(&cfg, runs_root),
                "synth" => cmd_synth(&cfg, runs_root),
                other => Err(anyhow!("unknown command `{other}`")),
            }
            .map_err(runtime)
        }
    }
}

/// Entry point for the binary: prints the run directory or a one-line cause.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let root = runs::runs_root(std::env::var_os(runs::RUNS_DIR_ENV));
    match execute(args, &root) {
        Ok(dir) => {
            println!("{}", dir.display());
            EXIT_OK
        }
        Err(Failure::Usage(e)) => match e.downcast_ref::<clap::Error>() {
            Some(ce) if !ce.use_stderr() => {
                let _ = ce.print();
                EXIT_OK
            }
            Some(ce) => {
                let _ = ce.print();
                EXIT_USAGE
            }
            None => {
                eprintln!("error: {e:#}");
                EXIT_USAGE
            }
        },
        Err(f) => {
            eprintln!("error: {f}");
            f.exit_code()
        }
    }
}

// ---------------------------------------------------------------------------
// Data preparation

fn synthetic_spec(cfg: &TrainConfig) -> SyntheticSpec {
    SyntheticSpec::new(
        cfg.synth_users,
        cfg.synth_items,
        cfg.synth_visual_dim,
        cfg.synth_textual_dim,
        cfg.synth_groups,
        cfg.seed,
    )
}

/// Writes interactions, both feature tables and the ground-truth sidecar into `dir`.
pub fn write_synthetic(cfg: &TrainConfig, dir: &Path) -> Result<()> {
    let spec = synthetic_spec(cfg);
    let (ds, features, truth) = generate_synthetic(&spec)?;
    io::write_interactions(&dir.join(runs::INTERACTIONS_FILE), &ds)?;
    io::write_matrix(&dir.join(runs::VISUAL_FILE), &features.visual)?;
    io::write_matrix(&dir.join(runs::TEXTUAL_FILE), &features.textual)?;
    runs::write(&dir.join(runs::GROUND_TRUTH_FILE), io::ground_truth_text(&spec, &truth))
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn absolute(p: &str) -> Result<String> {
    let path = fs::canonicalize(p).with_context(|| format!("resolving {p}"))?;
    Ok(path.display().to_string())
}

/// Points `cfg` at its data. Without an interaction file a synthetic dataset is
/// written under `run/data` and referenced relative to the run directory;
/// given files are recorded as absolute paths.
fn attach_data(cfg: &mut TrainConfig, run: &Path) -> Result<()> {
    match &cfg.interactions {
        None => {
            write_synthetic(cfg, &run.join("data"))?;
            cfg.interactions = Some(format!("data/{}", runs::INTERACTIONS_FILE));
            cfg.visual = Some(format!("data/{}", runs::VISUAL_FILE));
            cfg.textual = Some(format!("data/{}", runs::TEXTUAL_FILE));
        }
        Some(inter) => {
            fn need<'a>(p: &'a Option<String>, what: &str) -> Result<&'a str> {
                p.as_deref().ok_or_else(|| anyhow!("`{what}` feature file is required with `interactions`"))
            }
            let (v, t) = (need(&cfg.visual, "visual")?, need(&cfg.textual, "textual")?);
            let (i, v, t) = (absolute(inter)?, absolute(v)?, absolute(t)?);
            cfg.interactions = Some(i);
            cfg.visual = Some(v);
            cfg.textual = Some(t);
        }
    }
    Ok(())
}

/// Loads data referenced by `cfg`, resolving relative paths against `base`.
pub fn load_data(cfg: &TrainConfig, base: &Path) -> Result<(InteractionDataset, ContentFeatures)> {
    let path = |p: &Option<String>, what: &str| -> Result<PathBuf> {
        Ok(resolve(base, p.as_deref().ok_or_else(|| anyhow!("config has no `{what}` path"))?))
    };
    let ds = io::load_interactions(&path(&cfg.interactions, "interactions")?, cfg.k_core)?;
    let features = io::load_features(&path(&cfg.visual, "visual")?, &path(&cfg.textual, "textual")?, &ds)?;
    Ok((ds, features))
}

/// Run directory with its config snapshot, data and split in place.
fn prepare_run(cfg: &TrainConfig, root: &Path, command: &str) -> Result<(PathBuf, TrainConfig, InteractionDataset, ContentFeatures)> {
    let run = runs::create_run_dir(root, command)?;
    let mut cfg = cfg.clone();
    attach_data(&mut cfg, &run)?;
    runs::write(&run.join(runs::CONFIG_FILE), cfg.to_text())?;
    let (ds, features) = load_data(&cfg, &run)?;
    let ds = ds.split(cfg.split_ratios(), cfg.seed)?;
    io::write_split(&run.join(runs::SPLIT_FILE), &ds)?;
    Ok((run, cfg, ds, features))
}

fn single_run_table(label: &str, cfg: &TrainConfig, test: &gtc_core::eval::RankingEvaluation) -> ResultsTable {
    let mut rows = Vec::new();
    summarize_runs(label, std::slice::from_ref(test), &cfg.k_list, &mut rows);
    ResultsTable {
        label_column: "variant".into(),
        rows,
    }
}

fn write_run_outputs(dir: &Path, outcome: &TrainOutcome) -> Result<()> {
    fs::create_dir_all(dir)?;
    runs::write(&dir.join(runs::METRICS_FILE), runs::metrics_csv(&outcome.trace))?;
    io::write_checkpoint(&dir.join(runs::CHECKPOINT_FILE), &outcome.model)?;
    runs::write_epoch_plots(dir, &outcome.trace)
}

// ---------------------------------------------------------------------------
// Commands

pub fn cmd_train(cfg: &TrainConfig, root: &Path) -> Result<PathBuf> {
    let (run, cfg, ds, features) = prepare_run(cfg, root, "train")?;
    let mut log = MetricsLog::create(&run.join(runs::METRICS_FILE))?;
    let mut log_err = None;
    let outcome = train_with(&cfg, &ds, &features, &mut |r| {
        if let Err(e) = log.record(r) {
            log_err.get_or_insert(e);
        }
    })
    .with_context(|| format!("training in {}", run.display()))?;
    if let Some(e) = log_err {
        return Err(e);
    }
    io::write_checkpoint(&run.join(runs::CHECKPOINT_FILE), &outcome.model)?;
    runs::write_epoch_plots(&run, &outcome.trace)?;
    let table = single_run_table(cfg.variant.tag(), &cfg, &outcome.test);
    runs::write(&run.join(runs::RESULTS_FILE), table.to_csv())?;
    Ok(run)
}

/// Rebuilds data, split and model from a train run directory and writes the
/// test metrics to a new `evaluate-*` directory.
pub fn cmd_evaluate(cfg: &TrainConfig, train_run: &Path, root: &Path) -> Result<PathBuf> {
    let (ds, features) = load_data(cfg, train_run)?;
    let ds = io::read_split(&train_run.join(runs::SPLIT_FILE), ds)?;
    let model = io::read_checkpoint(&train_run.join(runs::CHECKPOINT_FILE), cfg, &ds, &features)?;
    let test = evaluate_model(&model, cfg, &ds, &features, SplitTag::Test)?;
    let run = runs::create_run_dir(root, "evaluate")?;
    let mut snapshot = cfg.clone();
    for path in [&mut snapshot.interactions, &mut snapshot.visual, &mut snapshot.textual].into_iter().flatten() {
        *path = absolute(&resolve(train_run, path).display().to_string())?;
    }
    runs::write(&run.join(runs::CONFIG_FILE), snapshot.to_text())?;
    runs::write(&run.join("source_run.txt"), format!("{}\n", train_run.display()))?;
    let table = single_run_table(cfg.variant.tag(), cfg, &test);
    runs::write(&run.join(runs::RESULTS_FILE), table.to_csv())?;
    Ok(run)
}

pub fn cmd_ablate(cfg: &TrainConfig, root: &Path) -> Result<PathBuf> {
    let (run, cfg, ds, features) = prepare_run(cfg, root, "ablate")?;
    let mut io_err = None;
    let table = run_ablation(&cfg, &ds, &features, &cfg.variants, &mut |variant, seed, outcome| {
        let dir = run.join("runs").join(format!("{}-seed{seed}", variant.tag()));
        if let Err(e) = write_run_outputs(&dir, outcome) {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e);
    }
    runs::write(&run.join(runs::RESULTS_FILE), table.to_csv())?;
    Ok(run)
}

pub fn cmd_sweep(cfg: &TrainConfig, root: &Path) -> Result<PathBuf> {
    let (run, cfg, ds, features) = prepare_run(cfg, root, "sweep")?;
    let mut io_err = None;
    let table = run_sweep(&cfg, &ds, &features, &mut |value, seed, outcome| {
        let dir = run.join("runs").join(format!("{}={value}-seed{seed}", cfg.sweep_key));
        if let Err(e) = write_run_outputs(&dir, outcome) {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e);
    }
    runs::write(&run.join(runs::RESULTS_FILE), table.to_csv())?;
    runs::write(&run.join("sweep.csv"), runs::sweep_summary_csv(&table))?;
    runs::write_sweep_plots(&run, &table)?;
    Ok(run)
}

pub fn cmd_synth(cfg: &TrainConfig, root: &Path) -> Result<PathBuf> {
    let run = runs::create_run_dir(root, "synth")?;
    runs::write(&run.join(runs::CONFIG_FILE), cfg.to_text())?;
    write_synthetic(cfg, &run)?;
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_config_key_has_a_kebab_flag() {
        let cmd = command();
        let train = cmd.find_subcommand("train").unwrap();
        for key in KEYS {
            let long = key.replace('_', "-");
            assert!(
                train.get_arguments().any(|a| a.get_long() == Some(long.as_str())),
                "missing --{long}"
            );
        }
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.txt");
        fs::write(&file, "omega1 = 0.6\n").unwrap();
        let m = command()
            .try_get_matches_from(["gtc", "train", "--config", file.to_str().unwrap(), "--omega1", "0.3"])
            .unwrap();
        let cfg = load_config(m.subcommand_matches("train").unwrap(), None).unwrap();
        assert_eq!(cfg.omega1, 0.3);
    }

    #[test]
    fn usage_errors_exit_one() {
        let root = tempfile::tempdir().unwrap();
        for args in [
            vec!["gtc", "frobnicate"],
            vec!["gtc", "train", "--steps", "0"],
            vec!["gtc", "train", "--no-such-flag", "1"],
            vec!["gtc", "evaluate", "--run", "/definitely/not/here"],
        ] {
            let err = execute(args.clone(), root.path()).unwrap_err();
            assert_eq!(err.exit_code(), EXIT_USAGE, "{args:?}: {err}");
        }
        let err = execute(["gtc", "train", "--steps", "0"], root.path()).unwrap_err();
        assert!(err.to_string().contains("T ≥ 1"), "{err}");
    }

    #[test]
    fn missing_data_file_is_a_runtime_error() {
        let root = tempfile::tempdir().unwrap();
        let err = execute(
            ["gtc", "train", "--interactions", "/nope.tsv", "--visual", "/nope", "--textual", "/nope"],
            root.path(),
        )
        .unwrap_err();
        assert_eq!(err.exit_code(), EXIT_RUNTIME);
        assert!(!err.to_string().contains('\n'));
    }
}

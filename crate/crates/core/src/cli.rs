//! `patchnorm` subcommands and their exit codes.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gradcheck::{run_suite, standard_suite, MAX_SHAPE};
use crate::harness::eval::{evaluate, ResultTable};
use crate::harness::io::{load_checkpoint, read_tensor, save_checkpoint, write_atomic};
use crate::harness::run::{checkpoint_path, metrics_csv, train_all, Precision, RunConfig};
use crate::norm::NormKind;
use crate::scheme::{generate_grid, Orientation, SplitMode, ADMISSIBLE_PATCH_COUNTS};
use crate::stats::analyze_patches;
use crate::tensor::{Scalar, Shape};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_MISMATCH: i32 = 4;

pub const METRICS_FILE: &str = "metrics.csv";
pub const RESULTS_FILE: &str = "results.csv";
pub const AGGREGATE_FILE: &str = "aggregate.csv";

#[derive(Debug, Parser)]
#[command(name = "patchnorm", version, about = "Patch-aware batch normalization toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// JSON run configuration; every field is optional.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory, overriding `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Single training seed (train) or corruption seed (eval).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Normalization kind: bn, pbn, pixel_bn, in, ln or gn.
    #[arg(long)]
    pub norm: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model per seed and write checkpoints plus metrics.csv.
    Train(RunArgs),
    /// Evaluate checkpoints on the clean and corrupted test sets.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint files; defaults to the checkpoints of every configured
        /// seed in the output directory.
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
    },
    /// Per-patch mean and std of a tensor file, as CSV.
    Analyze {
        tensor: PathBuf,
        #[arg(long, default_value_t = 4)]
        patches: usize,
        /// equal or random
        #[arg(long, default_value = "equal")]
        split: String,
        /// any, lr or ud
        #[arg(long, default_value = "any")]
        orientation: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable layer.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Input shape as N,C,H,W.
        #[arg(long, default_value = "2,4,6,6")]
        sizes: String,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Diverged(_) => EXIT_DIVERGED,
        Error::Mismatch(_) => EXIT_MISMATCH,
        _ => EXIT_USAGE,
    }
}

fn load_config(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    if let Some(norm) = &args.norm {
        cfg.train.norm = norm.parse::<NormKind>()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train_typed<T: Scalar>(cfg: &RunConfig) -> Result<String> {
    let outcomes = train_all::<T>(cfg)?;
    let label = cfg.train.label();
    for o in &outcomes {
        save_checkpoint(&checkpoint_path(&cfg.output_dir, o.seed), &o.model, o.seed, &label)?;
    }
    let metrics = metrics_csv(&outcomes);
    write_atomic(&cfg.output_dir.join(METRICS_FILE), metrics.as_bytes())?;
    Ok(format!("trained {} model(s) into {}", outcomes.len(), cfg.output_dir.display()))
}

pub fn cmd_train(args: &RunArgs) -> Result<String> {
    let mut cfg = load_config(args)?;
    if let Some(seed) = args.seed {
        cfg.train.seeds = vec![seed];
    }
    match Precision::from_env()? {
        Precision::F32 => cmd_train_typed::<f32>(&cfg),
        Precision::F64 => cmd_train_typed::<f64>(&cfg),
    }
}

fn cmd_eval_typed<T: Scalar>(cfg: &RunConfig, paths: &[PathBuf], relabel: Option<NormKind>) -> Result<ResultTable> {
    let set = cfg.suite.build(&cfg.test_set()?)?;
    let mut table = ResultTable::default();
    for p in paths {
        let (mut model, meta) = load_checkpoint::<T>(p)?;
        let label = match relabel {
            Some(kind) => {
                model.relabel(kind);
                kind.label().to_string()
            }
            None => meta.label.clone(),
        };
        table.rows.extend(evaluate(&model, &set, meta.seed, &label)?);
    }
    table.sort();
    Ok(table)
}

pub fn cmd_eval(args: &RunArgs, checkpoints: &[PathBuf]) -> Result<String> {
    let mut cfg = load_config(args)?;
    if let Some(seed) = args.seed {
        cfg.suite.rng_seed = seed;
    }
    let relabel = args.norm.as_deref().map(str::parse::<NormKind>).transpose()?;
    let paths: Vec<PathBuf> = if checkpoints.is_empty() {
        cfg.train.seeds.iter().map(|&s| checkpoint_path(&cfg.output_dir, s)).collect()
    } else {
        checkpoints.to_vec()
    };
    let table = match Precision::from_env()? {
        Precision::F32 => cmd_eval_typed::<f32>(&cfg, &paths, relabel)?,
        Precision::F64 => cmd_eval_typed::<f64>(&cfg, &paths, relabel)?,
    };
    write_atomic(&cfg.output_dir.join(RESULTS_FILE), table.to_csv().as_bytes())?;
    write_atomic(&cfg.output_dir.join(AGGREGATE_FILE), table.aggregate_csv().as_bytes())?;
    Ok(format!("evaluated {} checkpoint(s) into {}", paths.len(), cfg.output_dir.display()))
}

fn parse_orientation(s: &str) -> Result<Orientation> {
    match s {
        "any" => Ok(Orientation::Any),
        "lr" => Ok(Orientation::LeftRight),
        "ud" => Ok(Orientation::UpDown),
        other => Err(Error::Usage(format!("--orientation: expected any, lr or ud, got `{other}`"))),
    }
}

fn parse_split(s: &str) -> Result<SplitMode> {
    match s {
        "equal" => Ok(SplitMode::Equal),
        "random" => Ok(SplitMode::Random),
        other => Err(Error::Usage(format!("--split: expected equal or random, got `{other}`"))),
    }
}

/// CSV text of the per-patch statistics of a tensor file.
pub fn cmd_analyze(tensor: &Path, patches: usize, split: &str, orientation: &str, seed: u64) -> Result<String> {
    if !ADMISSIBLE_PATCH_COUNTS.contains(&patches) {
        return Err(Error::Usage(format!("--patches: {patches} is not one of 1, 2, 4, 9")));
    }
    let mode = parse_split(split)?;
    let orientation = parse_orientation(orientation)?;
    let (t, _) = read_tensor(tensor)?;
    let s = t.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = generate_grid(s.h, s.w, patches, mode, orientation, &mut rng)?;
    Ok(analyze_patches(&t, &grid)?.to_csv_string())
}

pub fn parse_sizes(s: &str) -> Result<Shape> {
    let dims: Vec<usize> = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse::<usize>().map_err(|_| Error::Usage(format!("--sizes: `{p}` is not a size"))))
        .collect::<Result<_>>()?;
    let [n, c, h, w] = dims[..] else {
        return Err(Error::Usage(format!("--sizes: expected N,C,H,W, got `{s}`")));
    };
    let shape = Shape::new(n, c, h, w);
    if shape.numel() == 0 {
        return Err(Error::Usage("--sizes: every size must be positive".into()));
    }
    if n > MAX_SHAPE.n || c > MAX_SHAPE.c || h > MAX_SHAPE.h || w > MAX_SHAPE.w {
        return Err(Error::Usage(format!("--sizes: {shape} exceeds {MAX_SHAPE}")));
    }
    Ok(shape)
}

/// Report text and whether every case passed.
pub fn cmd_gradcheck(seed: u64, sizes: &str, fault: bool) -> Result<(String, bool)> {
    let shape = parse_sizes(sizes)?;
    let report = run_suite(&standard_suite(shape, seed, fault)?)?;
    let mut text = String::new();
    for r in &report.results {
        let verdict = if r.max_error < report.tolerance { "ok" } else { "FAIL" };
        text += &format!("{:<16} max_rel_err={:.3e} {verdict}\n", r.name, r.max_error);
    }
    if let Some(w) = report.worst() {
        text += &format!(
            "worst: {} (input {}, element {}) {:.3e} vs tolerance {:.0e}\n",
            w.name, w.worst_input, w.worst_index, w.max_error, report.tolerance
        );
    }
    Ok((text, report.passed()))
}

/// Runs a parsed command, printing to stdout/stderr. Returns the exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::Train(args) => cmd_train(args).map(|m| (m, true)),
        Command::Eval { run, checkpoint } => cmd_eval(run, checkpoint).map(|m| (m, true)),
        Command::Analyze { tensor, patches, split, orientation, seed, out } => {
            cmd_analyze(tensor, *patches, split, orientation, *seed).and_then(|csv| match out {
                Some(p) => write_atomic(p, csv.as_bytes()).map(|_| (format!("wrote {}", p.display()), true)),
                None => Ok((csv.trim_end().to_string(), true)),
            })
        }
        Command::Gradcheck { seed, sizes, inject_fault } => cmd_gradcheck(*seed, sizes, *inject_fault),
    };
    match result {
        Ok((text, passed)) => {
            println!("{text}");
            if passed {
                EXIT_OK
            } else {
                EXIT_CHECK_FAILED
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_parsing() {
        assert_eq!(parse_sizes("2,4,6,6").unwrap(), Shape::new(2, 4, 6, 6));
        assert_eq!(parse_sizes(" 1, 1,2,3").unwrap(), Shape::new(1, 1, 2, 3));
        for bad in ["", "2,4,6", "2,4,6,7", "0,1,1,1", "a,b,c,d"] {
            assert!(matches!(parse_sizes(bad), Err(Error::Usage(_))), "{bad}");
        }
    }

    #[test]
    fn exit_code_classes() {
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_USAGE);
        assert_eq!(exit_code(&Error::Diverged("x".into())), EXIT_DIVERGED);
        assert_eq!(exit_code(&Error::Mismatch("x".into())), EXIT_MISMATCH);
        assert_eq!(exit_code(&Error::Format { path: "p".into(), reason: "r".into() }), EXIT_USAGE);
    }

    #[test]
    fn gradcheck_passes_and_fault_fails() {
        let (_, ok) = cmd_gradcheck(0, "1,2,3,3", false).unwrap();
        assert!(ok);
        let (text, ok) = cmd_gradcheck(0, "1,2,3,3", true).unwrap();
        assert!(!ok);
        assert!(text.contains("worst: bn"), "{text}");
    }
}

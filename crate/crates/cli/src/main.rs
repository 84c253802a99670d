use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ded_core::config::RunConfig;
use ded_core::data::{
    ingest_dataset, synth_scenarios, Dataset, LengthUnit, ScenarioKind, SplitIndices, WindowSpec,
    DEFAULT_FUT_LEN, DEFAULT_HIST_LEN, DEFAULT_NEIGHBOR_RADIUS,
};
use ded_core::evaluation::{ablate, EvalMode};
use ded_core::report::{build_eval_report, emit_figures, emit_report, EvalReport};
use ded_core::training::{metrics_jsonl, train, Checkpoint, Variant};
use ded_core::{Error, ErrorClass, Result};

/// Trajectory forecasting with denoised endpoint distributions.
#[derive(Debug, Parser)]
#[command(name = "ded", version, about)]
#[command(after_help = "Environment:\n  DED_SEED     overrides the configured seed\n  DED_THREADS  caps worker threads")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Convert an NGSIM-style CSV into a dataset file.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "feet")]
        unit: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_HIST_LEN)]
        hist: usize,
        #[arg(long, default_value_t = DEFAULT_FUT_LEN)]
        fut: usize,
        /// Window step in 5 Hz frames.
        #[arg(long, default_value_t = 10)]
        stride: usize,
        /// Neighbor radius in meters.
        #[arg(long, default_value_t = DEFAULT_NEIGHBOR_RADIUS)]
        radius: f64,
    },
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        kind: String,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Assign scenes to train/val/test (70/20/10) in place.
    Split {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model on the train split.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Extra `section.key=value` settings.
        #[arg(long = "set")]
        set: Vec<String>,
    },
    /// Score a checkpoint on the test split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "calibrated")]
        mode: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train and score every variant.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "set")]
        set: Vec<String>,
    },
    /// Draw figures from an evaluation report.
    Plot {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var("DED_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::usage(format!("DED_SEED={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("DED_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::usage(format!("DED_THREADS={v:?} is not a positive integer")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Runtime(e.to_string()))?;
    }
    Ok(())
}

/// Defaults < config file < DED_SEED < command-line settings.
fn run_config(path: Option<&Path>, set: &[String]) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::new(),
    };
    if let Some(seed) = env_seed()? {
        cfg.set("run.seed", &seed.to_string())?;
    }
    cfg.apply_overrides(set)?;
    Ok(cfg)
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Ingest {
            input,
            unit,
            out,
            hist,
            fut,
            stride,
            radius,
        } => {
            if hist < 3 || fut == 0 || stride == 0 {
                return Err(Error::usage("--hist must be at least 3, --fut and --stride at least 1"));
            }
            let spec = WindowSpec {
                hist_len: hist,
                fut_len: fut,
                stride,
                ..WindowSpec::default()
            };
            let ds = ingest_dataset(&input, unit.parse::<LengthUnit>()?, &spec, radius)?;
            log::info!("{} scenes, {} windows", ds.scenes.len(), ds.num_windows());
            ds.save(&out)
        }
        Command::Synth { kind, n, seed, out } => {
            let kind: ScenarioKind = kind.parse()?;
            let seed = seed.or(env_seed()?).unwrap_or(0);
            let scenes = synth_scenarios(kind, n, seed)?;
            let ds = Dataset::new(format!("synthetic:{}", kind.name()), DEFAULT_HIST_LEN, DEFAULT_FUT_LEN, scenes);
            log::info!("{} scenes, {} windows", ds.scenes.len(), ds.num_windows());
            ds.save(&out)
        }
        Command::Split { input, seed } => {
            let mut ds = Dataset::load(&input)?;
            let seed = seed.or(env_seed()?).unwrap_or(0);
            let idx = SplitIndices::new(ds.scenes.len(), seed)?;
            log::info!("split {}/{}/{} scenes", idx.train.len(), idx.val.len(), idx.test.len());
            ds.split = Some(idx);
            ds.save(&input)
        }
        Command::Train {
            data,
            config,
            variant,
            out,
            mut set,
        } => {
            if let Some(v) = variant {
                set.push(format!("train.variant={}", v.parse::<Variant>()?));
            }
            let cfg = run_config(config.as_deref(), &set)?;
            let mut model_cfg = cfg.model_config()?;
            let train_cfg = cfg.train_config()?;
            let ds = Dataset::load(&data)?;
            model_cfg.hist_len = ds.hist_len;
            model_cfg.fut_len = ds.fut_len;
            let split = ds.split_scenes()?;
            let outcome = train(&split, &model_cfg, &train_cfg)?;
            outcome.checkpoint.save(&out)?;
            write(&out.with_extension("metrics.jsonl"), &outcome.log_jsonl())?;
            match outcome.diverged_at {
                Some(epoch) => Err(Error::Diverged { epoch }),
                None => Ok(()),
            }
        }
        Command::Eval {
            ckpt,
            data,
            mode,
            out,
            seed,
        } => {
            let mode: EvalMode = mode.parse()?;
            let ckpt = Checkpoint::load(&ckpt)?;
            let ds = Dataset::load(&data)?;
            let seed = seed.or(env_seed()?).unwrap_or(ckpt.train.seed);
            let report = build_eval_report(&ckpt, &ds, mode, seed)?;
            eprint!("{}", report.markdown_table());
            emit_report(&report, &out)
        }
        Command::Ablate { data, config, out, set } => {
            let cfg = run_config(config.as_deref(), &set)?;
            let mut model_cfg = cfg.model_config()?;
            let train_cfg = cfg.train_config()?;
            let seeds = cfg.seeds()?.unwrap_or_else(|| vec![train_cfg.seed]);
            let ds = Dataset::load(&data)?;
            model_cfg.hist_len = ds.hist_len;
            model_cfg.fut_len = ds.fut_len;
            let split = ds.split_scenes()?;
            let report = ablate(&split, &model_cfg, &train_cfg, &Variant::ALL, &seeds)?;
            let dir = out
                .or_else(|| cfg.get("run.out_dir").map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("."));
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let table = report.markdown_table();
            eprint!("{table}");
            write(&dir.join("ablation.json"), &report.to_json())?;
            write(&dir.join("ablation.md"), &table)?;
            write(&dir.join("ablation.metrics.jsonl"), &report.logs.iter().map(|l| metrics_jsonl(l)).collect::<String>())
        }
        Command::Plot { report, out } => {
            let report = EvalReport::load(&report)?;
            for p in emit_figures(&report, &out)? {
                log::info!("wrote {}", p.display());
            }
            Ok(())
        }
    }
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Usage => 1,
        ErrorClass::Data => 2,
        ErrorClass::Runtime => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            eprint!("{}", e.render());
            return ExitCode::from(code);
        }
    };
    if let Err(e) = configure_threads().and_then(|()| run(cli.command)) {
        eprintln!("error: {e}");
        return ExitCode::from(exit_code(e.class()));
    }
    ExitCode::SUCCESS
}

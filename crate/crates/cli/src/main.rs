use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ptskit_core::harness::{
    self, calibration_for, evaluate, load_config, load_dataset, parse_config, policy_for, stage_teacher, train_and_eval,
    write_seed_artifacts, ExperimentConfig, Method, RunError, RunResult, SeedRun, Stage, StageExt,
};
use ptskit_core::nn::checkpoint;
use ptskit_core::sparsity::SparsityDistribution;
use ptskit_core::train::MaskPolicy;

#[derive(Parser)]
#[command(name = "ptskit", version, about = "Post-training sparsity experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Experiment config (TOML); defaults apply when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// `key=value` applied on top of the config file.
    #[arg(short = 'o', long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> RunResult<ExperimentConfig> {
        match &self.config {
            Some(p) => load_config(p, &self.overrides),
            None => parse_config("", &self.overrides),
        }
        .map_err(RunError::Config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train (or load) the dense teacher and save it to the output directory.
    Teacher(ConfigArgs),
    /// Search a per-layer sparsity distribution for one seed.
    Search {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Sparse training for one seed with the configured method.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Use this distribution summary instead of the method's own.
        #[arg(long)]
        distribution: Option<PathBuf>,
    },
    /// One-shot magnitude pruning for one seed.
    Prune {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Top-1 of a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Median top-1 per method and target over seeds.
    Report {
        dirs: Vec<PathBuf>,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Full pipeline for every configured seed.
    Run(ConfigArgs),
}

fn seed_dir(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    cfg.resolved_output_dir().join(format!("seed-{seed}"))
}

fn train_like(cfg: ExperimentConfig, seed: u64, distribution: Option<PathBuf>) -> RunResult<()> {
    let splits = load_dataset(&cfg).stage(Stage::Data)?;
    let teacher = stage_teacher(&cfg, &splits)?;
    let calib = calibration_for(&cfg, &splits, seed).stage(Stage::Calibration)?;
    let (policy, search) = match distribution {
        Some(p) => {
            let text = std::fs::read_to_string(&p).map_err(|e| RunError::Config(ptskit_core::Error::io(&p, e)))?;
            let d = SparsityDistribution::parse_summary(&text).map_err(RunError::Config)?;
            (MaskPolicy::Rates(d), None)
        }
        None => policy_for(&cfg, &teacher, &calib, seed)?,
    };
    let (student, masks, outcome, top1) = train_and_eval(&cfg, &splits, &teacher, &calib, &policy, seed)?;
    let run = SeedRun {
        seed,
        method: cfg.method,
        target: cfg.target(),
        distribution: match &policy {
            MaskPolicy::Rates(d) => Some(d.clone()),
            MaskPolicy::Pattern(_) => None,
        },
        search,
        student,
        masks,
        outcome,
        top1,
        wall_time_s: 0.0,
    };
    write_seed_artifacts(&run, &seed_dir(&cfg, seed)).stage(Stage::Output)?;
    println!("{}", harness::METRICS_CSV_HEADER);
    println!("{}", run.metrics_row(false));
    Ok(())
}

fn execute(cmd: Command) -> RunResult<()> {
    match cmd {
        Command::Teacher(a) => {
            let cfg = a.load()?;
            let splits = load_dataset(&cfg).stage(Stage::Data)?;
            let teacher = stage_teacher(&cfg, &splits)?;
            let top1 = evaluate(&teacher, &splits.test, cfg.eval_batch_size).stage(Stage::Eval)?;
            println!("teacher top1 {top1:.2}");
        }
        Command::Search { cfg, seed } => {
            let cfg = ExperimentConfig {
                method: Method::UniPts,
                ..cfg.load()?
            };
            let splits = load_dataset(&cfg).stage(Stage::Data)?;
            let teacher = stage_teacher(&cfg, &splits)?;
            let calib = calibration_for(&cfg, &splits, seed).stage(Stage::Calibration)?;
            let (_, search) = policy_for(&cfg, &teacher, &calib, seed)?;
            let search = search.ok_or_else(|| RunError::Config(ptskit_core::Error::Config("search needs target_sparsity".into())))?;
            let dir = seed_dir(&cfg, seed);
            let out = || -> ptskit_core::Result<()> {
                std::fs::create_dir_all(&dir).map_err(|e| ptskit_core::Error::io(&dir, e))?;
                let log: String = search.history.iter().map(|g| g.log_line() + "\n").collect();
                let p = dir.join("search.jsonl");
                std::fs::write(&p, log).map_err(|e| ptskit_core::Error::io(&p, e))?;
                let p = dir.join("distribution.txt");
                std::fs::write(&p, search.best.distribution.summary(&teacher)).map_err(|e| ptskit_core::Error::io(&p, e))
            };
            out().stage(Stage::Output)?;
            print!("{}", search.best.distribution.summary(&teacher));
        }
        Command::Train { cfg, seed, distribution } => {
            let cfg = cfg.load()?;
            if cfg.method == Method::OneShot {
                return Err(RunError::Config(ptskit_core::Error::Config("use `prune` for one-shot".into())));
            }
            train_like(cfg, seed, distribution)?;
        }
        Command::Prune { cfg, seed } => {
            let cfg = ExperimentConfig {
                method: Method::OneShot,
                ..cfg.load()?
            };
            train_like(cfg, seed, None)?;
        }
        Command::Eval { cfg, checkpoint: path } => {
            let cfg = cfg.load()?;
            let splits = load_dataset(&cfg).stage(Stage::Data)?;
            let net = checkpoint::load(&path).stage(Stage::Eval)?;
            let top1 = evaluate(&net, &splits.test, cfg.eval_batch_size).stage(Stage::Eval)?;
            println!("top1 {top1:.2}");
        }
        Command::Report { dirs, csv } => {
            let report = harness::report(&dirs).stage(Stage::Report)?;
            print!("{}", report.to_table());
            if let Some(p) = csv {
                std::fs::write(&p, report.to_csv())
                    .map_err(|e| ptskit_core::Error::io(&p, e))
                    .stage(Stage::Report)?;
            }
        }
        Command::Run(a) => {
            let cfg = a.load()?;
            let res = harness::run_experiment(&cfg)?;
            println!("teacher top1 {:.2}", res.teacher_top1);
            println!("{}", harness::METRICS_CSV_HEADER);
            for r in &res.runs {
                println!("{}", r.metrics_row(cfg.record_wall_time));
            }
            println!("wrote {}", res.output_dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

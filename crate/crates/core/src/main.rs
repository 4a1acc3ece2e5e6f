use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use stationary_compat::evaluator::{build_report, Metric, ReportOptions, DEFAULT_DEF1_PAIRS};
use stationary_compat::features::FeatureSet;
use stationary_compat::harness::{
    ablation_csv, run_ablation, run_experiment, run_pretrain, AblationAxis, AblationValue,
    ExperimentConfig,
};
use stationary_compat::hyperball::{
    cap_probability, cap_probability_csv, theorem_csv, theorem_experiment, TheoremMode,
    TheoremParams, DEFAULT_SAMPLES,
};
use stationary_compat::simplex::{verify_prototypes, SimplexClassifier};
use stationary_compat::Error;

#[derive(Parser)]
#[command(name = "compat", version, about = "Stationary representation compatibility toolkit")]
struct Cli {
    /// Overrides the seed of the config / command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build or check a fixed simplex classifier
    #[command(subcommand)]
    Simplex(SimplexCmd),
    /// Monte-Carlo hyperball geometry
    #[command(subcommand)]
    Mc(McCmd),
    /// Pretrain models or run a fine-tuning sequence
    #[command(subcommand)]
    Train(TrainCmd),
    /// Compatibility report from saved feature sets
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Full experiment runs and ablation sweeps
    #[command(subcommand)]
    Experiment(ExperimentCmd),
}

#[derive(Subcommand)]
enum SimplexCmd {
    /// Build the K-prototype simplex and write it as JSON to --out.
    Gen {
        #[arg(long)]
        k: usize,
    },
    /// Check the ETF properties of a stored simplex.
    Verify {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Same,
    Diff,
    Shift,
}

#[derive(Subcommand)]
enum McCmd {
    /// Nearest-neighbour angle and cap probability table.
    CapProb {
        #[arg(long, value_delimiter = ',', required = true)]
        n: Vec<u64>,
        #[arg(long, value_delimiter = ',', required = true)]
        dims: Vec<usize>,
    },
    /// Expected distances between old and updated class hyperballs.
    Distance {
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long, value_delimiter = ',', required = true)]
        dims: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5])]
        shifts: Vec<f64>,
        #[arg(long, default_value_t = 1.0)]
        r_old: f64,
        #[arg(long, default_value_t = 0.5)]
        r_new: f64,
        #[arg(long, default_value_t = 10)]
        simplex_k: usize,
        #[arg(long, default_value_t = DEFAULT_SAMPLES)]
        samples: usize,
    },
}

#[derive(Subcommand)]
enum TrainCmd {
    /// Train the initial and replacement models from scratch.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Pre-train, then run the fine-tuning sequence.
    Sequence {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Compatibility report over the `*.fset` files of a directory, in name order.
    Report {
        #[arg(long)]
        features: PathBuf,
        #[arg(long, default_value = "cosine")]
        metric: String,
        #[arg(long, default_value_t = 0.2)]
        gallery_fraction: f64,
        #[arg(long, default_value_t = DEFAULT_DEF1_PAIRS)]
        def1_pairs: usize,
    },
}

#[derive(Subcommand)]
enum ExperimentCmd {
    /// Prints the default config (or writes it to --out).
    Init {
        /// Seed to put in the config
        #[arg(long)]
        seed: Option<u64>,
    },
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// One experiment per value; writes value,ac,aa_final.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            let numeric = e.chain().any(|c| c.downcast_ref::<Error>().is_some_and(Error::is_numeric));
            ExitCode::from(if numeric { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be positive");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring thread pool")?;
    }
    let seed = cli.seed;
    let out = cli.out;
    match cli.command {
        Command::Simplex(SimplexCmd::Gen { k }) => {
            let out = out.context("simplex gen needs --out")?;
            let cls = SimplexClassifier::build(k)?;
            cls.save_json(&out)?;
            log::info!("wrote {k}-prototype simplex to {}", out.display());
        }
        Command::Simplex(SimplexCmd::Verify { input, tol }) => {
            let cls = SimplexClassifier::load_json(&input)?;
            let diag = verify_prototypes(cls.prototypes(), tol);
            let text = serde_json::to_string_pretty(&diag)?;
            emit(out.as_deref(), &text)?;
            if !diag.passed() {
                bail!(Error::Invalid(format!("simplex fails ETF checks at tol {tol}")));
            }
        }
        Command::Mc(McCmd::CapProb { n, dims }) => {
            let mut rows = Vec::with_capacity(n.len() * dims.len());
            for &ni in &n {
                for &d in &dims {
                    rows.push(cap_probability(ni, d)?);
                }
            }
            emit(out.as_deref(), &cap_probability_csv(&rows))?;
        }
        Command::Mc(McCmd::Distance {
            mode,
            dims,
            shifts,
            r_old,
            r_new,
            simplex_k,
            samples,
        }) => {
            let mode = match mode {
                ModeArg::Same => TheoremMode::SameClass,
                ModeArg::Diff => TheoremMode::DifferentClass,
                ModeArg::Shift => TheoremMode::Shift,
            };
            let rows = theorem_experiment(&TheoremParams {
                mode,
                dims,
                shifts,
                r_old,
                r_new,
                simplex_k,
                samples,
                seed: seed.unwrap_or(0),
            })?;
            emit(out.as_deref(), &theorem_csv(&rows))?;
        }
        Command::Train(TrainCmd::Pretrain { config }) => {
            let cfg = load_config(&config, seed, out)?;
            let models = run_pretrain(&cfg)?;
            for (i, m) in models.iter().enumerate() {
                log::info!(
                    "model {i}: {} classes, final loss {:.4}",
                    m.classes,
                    m.history.totals().last().copied().unwrap_or(f64::NAN)
                );
            }
        }
        Command::Train(TrainCmd::Sequence { config }) | Command::Experiment(ExperimentCmd::Run { config }) => {
            let cfg = load_config(&config, seed, out)?;
            let outcome = run_experiment(&cfg)?;
            let r = &outcome.report;
            log::info!("AC {} | AA_final {:.4}", r.ac, r.aa_final());
            if cfg.output_dir.is_none() {
                println!("{}", r.to_json()?);
            }
        }
        Command::Eval(EvalCmd::Report {
            features,
            metric,
            gallery_fraction,
            def1_pairs,
        }) => {
            let metric: Metric = metric.parse()?;
            let sets = load_feature_dir(&features)?;
            let report = build_report(
                &sets,
                &ReportOptions {
                    metric,
                    gallery_fraction,
                    def1_pairs,
                    seed: seed.unwrap_or(0),
                },
            )?;
            let dir = out.unwrap_or(features);
            std::fs::create_dir_all(&dir)?;
            std::fs::write(dir.join("report.json"), report.to_json()?)?;
            std::fs::write(dir.join("matrix.csv"), report.matrix.to_csv())?;
            log::info!("AC {} | AA_final {:.4}", report.ac, report.aa_final());
        }
        Command::Experiment(ExperimentCmd::Init { seed: local }) => {
            let mut cfg = ExperimentConfig::default();
            if let Some(s) = local.or(seed) {
                cfg.seed = s;
            }
            emit(out.as_deref(), &format!("{}\n", cfg.to_json()?))?;
        }
        Command::Experiment(ExperimentCmd::Ablate { config, axis, values }) => {
            let axis: AblationAxis = axis.parse()?;
            let values = values
                .iter()
                .map(|v| v.parse::<AblationValue>())
                .collect::<Result<Vec<_>, _>>()?;
            // Sweep points get their own subdirectories; the table goes next to them.
            let cfg = load_config(&config, seed, out)?;
            let rows = run_ablation(&cfg, axis, &values)?;
            let csv = ablation_csv(&rows);
            match &cfg.output_dir {
                Some(dir) => {
                    std::fs::create_dir_all(dir)?;
                    std::fs::write(dir.join(format!("ablation_{}.csv", axis.as_str())), csv)?;
                }
                None => print!("{csv}"),
            }
        }
    }
    Ok(())
}

fn load_config(path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if out.is_some() {
        cfg.output_dir = out;
    }
    Ok(cfg)
}

fn load_feature_dir(dir: &Path) -> anyhow::Result<Vec<FeatureSet>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "fset"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!(Error::Invalid(format!("no .fset files in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| FeatureSet::load(p).with_context(|| format!("loading {}", p.display())))
        .collect()
}

/// Writes to `path` when given, otherwise to stdout.
fn emit(path: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

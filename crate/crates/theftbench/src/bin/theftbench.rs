//! Command-line entry point for the theftbench pipeline:
//! ingest/synth -> pollute -> train -> eval/attack/sweep/report.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use theftbench::attack::AttackConfig;
use theftbench::dataio::{
    generate_synthetic_normals, load_dataset, parse_meter_csv, regulate_daily, save_dataset,
    DatasetRole, Label, LabeledDataset, ReadingsFormat, SyntheticProfileConfig,
};
use theftbench::error::{Error, Result};
use theftbench::experiment::{
    emit_report, load_report, render_report, run_sweep, AttackGrid, ExperimentPlan, ReportFormat,
    PLAN_FILE_VERSION,
};
use theftbench::nnengine::{architecture, evaluate_model, train_model, TrainConfig, TrainedModel};
use theftbench::theftgen::pollute_dataset;

#[derive(Parser, Debug)]
#[command(
    name = "theftbench",
    version,
    about = "Energy-theft detector training and adversarial-measurement evaluation"
)]
struct Cli {
    /// Worker count hint; execution is currently sequential regardless.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum IngestFormat {
    Issda,
    Canonical,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum RoleArg {
    Defender,
    Attacker,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum AlgoArg {
    /// Gradient-ascent iterative search from a near-zero start.
    Sff,
    /// Scale held-out normal vectors by a constant alpha.
    Va1,
    /// 48 i.i.d. uniform draws on (0, u).
    Va2,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum FormatArg {
    Csv,
    Json,
}

#[derive(Args, Debug)]
struct SeedArg {
    /// RNG seed (THEFTBENCH_SEED supplies the default; the flag wins).
    #[arg(long, env = "THEFTBENCH_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse raw half-hourly meter readings into a normal (label-0) dataset
    /// of complete 48-slot days.
    Ingest {
        /// Input layout: issda (5-digit day/slot codes) or canonical
        /// (meter_id,day_index,slot,kwh).
        #[arg(long, value_enum)]
        format: IngestFormat,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic normal (label-0) dataset.
    Synth {
        /// Number of daily load vectors.
        #[arg(long)]
        count: usize,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert half of a normal dataset into theft records (labels 1) via
    /// the six scenario families.
    Pollute {
        #[arg(long = "in")]
        input: PathBuf,
        #[command(flatten)]
        seed: SeedArg,
        /// Which side of the experiment the dataset belongs to.
        #[arg(long, value_enum, default_value = "defender")]
        role: RoleArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a detector on a labeled dataset.
    Train {
        /// Architecture preset: f_fnn|f_rnn|f_cnn (defender) or
        /// fp_fnn|fp_rnn|fp_cnn (attacker substitute).
        #[arg(long)]
        arch: String,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        seed: SeedArg,
        /// Maximum training epochs (early stopping may use fewer).
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report a trained model's accuracy and false-positive rate on a
    /// labeled dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run one attack batch and write a JSON report.
    Attack {
        /// Scoring model; also the attack's local model unless --attacker
        /// is given.
        #[arg(long)]
        defender: PathBuf,
        /// Substitute local model for the black-box setting.
        #[arg(long)]
        attacker: Option<PathBuf>,
        #[arg(long, value_enum)]
        algo: AlgoArg,
        /// sff: maximum search iterations.
        #[arg(long, default_value_t = 14)]
        step: u32,
        /// sff: per-iteration max perturbation (kWh).
        #[arg(long, default_value_t = 0.01)]
        size: f64,
        /// sff: profit-regularizer weight.
        #[arg(long, default_value_t = 10.0)]
        lambda: f64,
        /// sff: std-dev of the Gaussian init (kWh).
        #[arg(long, default_value_t = 0.1)]
        sigma: f64,
        /// va1: scaling factor in (0, 1].
        #[arg(long)]
        alpha: Option<f64>,
        /// va2: upper bound of the uniform draws (kWh).
        #[arg(long)]
        u: Option<f64>,
        /// Labeled dataset supplying held-out normal vectors (required for
        /// va1; adds L1 context otherwise).
        #[arg(long)]
        normals: Option<PathBuf>,
        /// Number of adversarial vectors.
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Execute a sweep plan file over attack parameter grids.
    Sweep {
        /// theftbench-plan/1 JSON file.
        #[arg(long)]
        plan: PathBuf,
        /// Output report; .json extension selects JSON, anything else CSV.
        #[arg(long)]
        out: PathBuf,
        /// Directory caching finished cells for resumption.
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Re-render a JSON report to stdout.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum)]
        format: FormatArg,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            // usage problems are validation failures
            eprint!("{e}");
            return ExitCode::from(3);
        }
        Err(e) => {
            // --help / --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    if cli.jobs == 0 {
        eprintln!("validation error: --jobs must be at least 1");
        return ExitCode::from(3);
    }
    eprintln!("resolved config: {:?}", cli.command);
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Ingest { format, input, out } => {
            let format = match format {
                IngestFormat::Issda => ReadingsFormat::Issda,
                IngestFormat::Canonical => ReadingsFormat::Canonical,
            };
            let parsed = parse_meter_csv(&input, format)?;
            let regulated = regulate_daily(&parsed.records);
            eprintln!(
                "parsed {} records ({} malformed), {} complete days ({} incomplete/duplicate day-groups dropped)",
                parsed.records.len(),
                parsed.malformed_lines,
                regulated.vectors.len(),
                regulated.dropped_groups
            );
            let ds = LabeledDataset {
                samples: regulated
                    .vectors
                    .into_iter()
                    .map(|v| (v, Label::Normal))
                    .collect(),
                role: DatasetRole::Defender,
                seed: 0,
            };
            if ds.is_empty() {
                return Err(Error::Validation(format!(
                    "{}: no complete 48-slot day found",
                    input.display()
                )));
            }
            save_dataset(&ds, &out)
        }
        Command::Synth { count, seed, out } => {
            let vectors =
                generate_synthetic_normals(count, seed.seed, &SyntheticProfileConfig::default())?;
            let ds = LabeledDataset {
                samples: vectors.into_iter().map(|v| (v, Label::Normal)).collect(),
                role: DatasetRole::Defender,
                seed: seed.seed,
            };
            save_dataset(&ds, &out)
        }
        Command::Pollute { input, seed, role, out } => {
            let src = load_dataset(&input)?;
            if src.samples.iter().any(|(_, l)| *l == Label::Theft) {
                return Err(Error::Validation(format!(
                    "{}: pollute expects a normal (all label-0) dataset",
                    input.display()
                )));
            }
            let normals: Vec<_> = src.samples.into_iter().map(|(v, _)| v).collect();
            let role = match role {
                RoleArg::Defender => DatasetRole::Defender,
                RoleArg::Attacker => DatasetRole::Attacker,
            };
            let ds = pollute_dataset(&normals, seed.seed, role)?;
            save_dataset(&ds, &out)
        }
        Command::Train { arch, data, seed, epochs, out } => {
            let arch = architecture(&arch)?;
            let ds = load_dataset(&data)?;
            let cfg = TrainConfig {
                seed: seed.seed,
                epochs,
                ..TrainConfig::default()
            };
            let model = train_model(arch, &ds, &cfg)?;
            if let Some(meta) = &model.train_meta {
                eprintln!(
                    "trained {} epochs; val accuracy {:.4}, val fpr {:.4}",
                    meta.epochs_run, meta.val_accuracy, meta.val_fpr
                );
            }
            model.save(&out)
        }
        Command::Eval { model, data } => {
            let model = TrainedModel::load(&model)?;
            let ds = load_dataset(&data)?;
            let m = evaluate_model(&model, &ds)?;
            println!("accuracy={}", m.accuracy);
            println!("fpr={}", m.fpr);
            println!(
                "true_theft={} true_normal={} false_theft={} false_normal={} total={}",
                m.true_theft, m.true_normal, m.false_theft, m.false_normal, m.total
            );
            Ok(())
        }
        Command::Attack {
            defender,
            attacker,
            algo,
            step,
            size,
            lambda,
            sigma,
            alpha,
            u,
            normals,
            n,
            seed,
            out,
        } => {
            let attack = match algo {
                AlgoArg::Sff => {
                    // surface bad numbers before the sweep machinery runs
                    AttackConfig { step, size, lambda, sigma, seed: seed.seed }.validate()?;
                    AttackGrid::SearchFromFree {
                        step: vec![step],
                        size: vec![size],
                        lambda: vec![lambda],
                        sigma: vec![sigma],
                    }
                }
                AlgoArg::Va1 => {
                    let alpha = alpha.ok_or_else(|| {
                        Error::Validation("va1 requires --alpha".into())
                    })?;
                    if normals.is_none() {
                        return Err(Error::Validation("va1 requires --normals".into()));
                    }
                    AttackGrid::Va1 { alpha: vec![alpha] }
                }
                AlgoArg::Va2 => {
                    let u = u.ok_or_else(|| Error::Validation("va2 requires --u".into()))?;
                    AttackGrid::Va2 { u: vec![u] }
                }
            };
            let plan = ExperimentPlan {
                version: PLAN_FILE_VERSION.to_string(),
                defender_model: defender,
                attacker_model: attacker,
                normals_data: normals,
                attack,
                n_vectors: n,
                base_seed: seed.seed,
            };
            let report = run_sweep(&plan, None)?;
            emit_report(&report, &out, ReportFormat::Json)
        }
        Command::Sweep { plan, out, cache } => {
            let plan = ExperimentPlan::load(&plan)?;
            let report = run_sweep(&plan, cache.as_deref())?;
            let format = if out.extension().is_some_and(|e| e == "json") {
                ReportFormat::Json
            } else {
                ReportFormat::Csv
            };
            emit_report(&report, &out, format)
        }
        Command::Report { input, format } => {
            let report = load_report(&input)?;
            let format = match format {
                FormatArg::Csv => ReportFormat::Csv,
                FormatArg::Json => ReportFormat::Json,
            };
            print!("{}", render_report(&report, format)?);
            Ok(())
        }
    }
}

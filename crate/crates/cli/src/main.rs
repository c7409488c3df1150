use clap::{Parser, Subcommand, ValueEnum};
use dsui_cli::plot::emit_plots;
use dsui_cli::report::write_comparison_csv;
use dsui_cli::{compare, run, CliError, CliResult, ExperimentConfig, RunReport};
use dsui_core::mogmm::RegMode;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "dsui", version, about = "Train and evaluate MoGMM uncertainty heads")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum RegArg {
    Adaptive,
    Plain,
    Off,
}

#[derive(clap::Args)]
struct Overrides {
    /// Experiment config (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Output directory, replacing `outdir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run only these seeds (repeatable).
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// Drop the negative-sample term.
    #[arg(long)]
    no_nsgvb: bool,
    /// Regularizer variant.
    #[arg(long, value_enum)]
    reg: Option<RegArg>,
    #[arg(long, allow_hyphen_values = true)]
    rho: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    gamma: Option<f64>,
    /// Mixture components per class.
    #[arg(long)]
    components: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Check a config without training.
    Validate(Overrides),
    /// Train and evaluate every seed, then write the report.
    Run(Overrides),
    /// Welch t-tests between two reports.
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Also write the table as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render SVG figures for one or more run directories.
    Plot {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "plots")]
        out: PathBuf,
    },
}

fn load(o: &Overrides) -> CliResult<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&o.config)?;
    if let Some(out) = &o.out {
        cfg.outdir = out.clone();
    }
    if !o.seeds.is_empty() {
        cfg.seeds = o.seeds.clone();
    }
    let loss = &mut cfg.train.loss;
    if o.no_nsgvb {
        loss.nsgvb = false;
    }
    if let Some(r) = o.reg {
        loss.reg = match r {
            RegArg::Adaptive => RegMode::Adaptive,
            RegArg::Plain => RegMode::Plain,
            RegArg::Off => RegMode::Off,
        };
    }
    if let Some(v) = o.rho {
        loss.rho = v;
    }
    if let Some(v) = o.gamma {
        loss.gamma = v;
    }
    if let Some(k) = o.components {
        cfg.train.components = k;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Validate(o) => {
            let cfg = load(&o)?;
            println!("ok {}", cfg.run_dir()?.display());
        }
        Command::Run(o) => {
            let cfg = load(&o)?;
            let report = run(&cfg)?;
            println!("{}", cfg.run_dir()?.display());
            for (k, m) in &report.mean {
                println!("{:<40} {:.4} ± {:.4}", k, m, report.std[k]);
            }
        }
        Command::Compare { a, b, out } => {
            let ra = RunReport::load(&a)?;
            let rb = RunReport::load(&b)?;
            let table = compare(&ra, &rb)?;
            for c in &table {
                println!(
                    "{:<40} {:.4} {:.4} p={:.4}{}",
                    c.metric,
                    c.mean_a,
                    c.mean_b,
                    c.p_value,
                    if c.significant { " *" } else { "" }
                );
            }
            if let Some(path) = out {
                write_comparison_csv(&table, &path)?;
            }
        }
        Command::Plot { runs, out } => {
            let m = emit_plots(&runs, &out)?;
            println!("{} plots written to {}, {} skipped", m.emitted.len(), out.display(), m.skipped.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &CliError) -> u8 {
    e.exit_code() as u8
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lossabf::evaluation::EvalReport;
use lossabf::experiment::{
    coherence_gate, evaluate_stage, fit_abc_stage, fit_fbp_stage, preset, run_experiment, simulate_stage, with_workers,
    Design, ExperimentConfig, PRESETS,
};
use lossabf::{Error, Result};

const GATE_FAILURE: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "lossabf", version, about = "Loss-based ABC forecasting and focused Bayesian prediction for SV models")]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Start from a named preset instead of a config file.
    #[arg(long, global = true)]
    preset: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true, default_value = "lossabf-out")]
    out_dir: PathBuf,
    /// Data file for the empirical design.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate the design's series (or ingest the data file).
    Simulate,
    /// Fit the auxiliary model and run ABC for every focusing rule.
    FitAbc,
    /// Run the FBP chains for every focusing rule.
    FitFbp,
    /// Score all predictives on the hold-out and write the report.
    Evaluate,
    /// Run every stage for a preset; fails with exit code 4 if a
    /// misspecified design misses the coherence gate.
    Reproduce {
        #[arg(value_name = "PRESET")]
        name: String,
    },
    /// Print the resolved config as TOML.
    ShowConfig,
}

fn resolve_config(cli: &Cli, preset_name: Option<&str>) -> Result<ExperimentConfig> {
    let mut cfg = match (preset_name.or(cli.preset.as_deref()), &cli.config) {
        (Some(_), Some(_)) => return Err(Error::Config("give either --config or a preset, not both".into())),
        (Some(name), None) => preset(name)?,
        (None, Some(path)) => ExperimentConfig::load(path)?,
        (None, None) => {
            return Err(Error::Config(format!(
                "no experiment given; use --config <file> or --preset <{}>",
                PRESETS.join("|")
            )))
        }
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(d) = &cli.data {
        cfg.data = Some(d.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_summary(report: &EvalReport, out: &Path) {
    for (m, ranks) in report.matrices.iter().zip(&report.coherence) {
        let cols: Vec<String> = m.col_labels.iter().zip(ranks).map(|(c, r)| format!("{c}:{r}")).collect();
        println!("{} diagonal ranks: {}", m.method, cols.join(" "));
    }
    println!("report written to {}", out.join("report.md").display());
}

fn run(cli: &Cli) -> Result<u8> {
    let out = cli.out_dir.as_path();
    match &cli.command {
        Command::ShowConfig => {
            print!("{}", resolve_config(cli, None)?.to_toml()?);
        }
        Command::Simulate => {
            let cfg = resolve_config(cli, None)?;
            let s = with_workers(cfg.workers, || simulate_stage(&cfg, out))?;
            println!("{} observations ({} training) written to {}", s.y.len(), s.split, out.display());
        }
        Command::FitAbc => {
            let cfg = resolve_config(cli, None)?;
            let posts = with_workers(cfg.workers, || fit_abc_stage(&cfg, out))?;
            for p in &posts {
                println!("ABC-{}: kept {} draws", p.rule().label(), p.kept_thetas.len());
            }
        }
        Command::FitFbp => {
            let cfg = resolve_config(cli, None)?;
            let posts = with_workers(cfg.workers, || fit_fbp_stage(&cfg, out))?;
            for p in &posts {
                println!("FBP-{}: w = {}, acceptance {:.3}", p.rule.label(), p.w_used, p.acceptance_rate);
            }
        }
        Command::Evaluate => {
            let cfg = resolve_config(cli, None)?;
            let report = with_workers(cfg.workers, || evaluate_stage(&cfg, out))?;
            print_summary(&report, out);
        }
        Command::Reproduce { name } => {
            if cli.preset.is_some() || cli.config.is_some() {
                return Err(Error::Config("reproduce takes the preset as its argument only".into()));
            }
            let cfg = resolve_config(cli, Some(name))?;
            let report = run_experiment(&cfg, out)?;
            print_summary(&report, out);
            if cfg.design == Design::MisspecSim {
                let gate = coherence_gate(&report);
                for (method, ok) in &gate {
                    println!("{method} coherence gate: {}", if *ok { "pass" } else { "FAIL" });
                }
                if gate.values().any(|ok| !ok) {
                    return Ok(GATE_FAILURE);
                }
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

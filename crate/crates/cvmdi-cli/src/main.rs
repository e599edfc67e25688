use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use cvmdi_cli::{emit_csv, run, AnalysisChoice, RunConfig};

/// Exit codes: 0 on success, 2 for configuration errors, 3 when every
/// sweep row was infeasible.
const EXIT_CONFIG: u8 = 2;
const EXIT_INFEASIBLE: u8 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "cvmdi",
    about = "CV MDI QKD key-rate sweeps with finite-size security",
    version
)]
struct Cli {
    /// Key-value configuration file (one `key = value` per line).
    #[arg(long)]
    config: Option<PathBuf>,

    /// Scenario preset (asym-1db, asym-2db, asym-4db, sym-0.1db,
    /// sym-0.3db, sym-0.5db, sym-0.55db).
    #[arg(long)]
    scenario: Option<String>,

    /// Block-size sweep: `lo:hi:count` (log-spaced) or a comma list.
    #[arg(long)]
    sweep: Option<String>,

    /// Moment source: `analytic` (closed forms) or `simulate` (Monte
    /// Carlo).
    #[arg(long)]
    mode: Option<String>,

    /// Analyses to run: `collective`, `coherent` or `both`.
    #[arg(long)]
    analysis: Option<String>,

    /// Master seed for the simulate mode.
    #[arg(long)]
    seed: Option<u64>,

    /// Output CSV path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn build_config(cli: &Cli) -> Result<RunConfig, cvmdi_cli::ConfigError> {
    let mut config = RunConfig::default();
    if let Some(path) = &cli.config {
        let body = std::fs::read_to_string(path).map_err(|e| {
            cvmdi_cli::ConfigError(format!("cannot read config {}: {e}", path.display()))
        })?;
        config.apply_file(&body)?;
    }
    if let Some(s) = &cli.scenario {
        config.set("scenario", s)?;
    }
    if let Some(s) = &cli.sweep {
        config.set("sweep", s)?;
    }
    if let Some(m) = &cli.mode {
        config.set("mode", m)?;
    }
    if let Some(a) = &cli.analysis {
        config.analysis = match a.as_str() {
            "collective" => AnalysisChoice::Collective,
            "coherent" => AnalysisChoice::Coherent,
            "both" => AnalysisChoice::Both,
            other => {
                return Err(cvmdi_cli::ConfigError(format!(
                    "analysis must be collective, coherent or both, got '{other}'"
                )))
            }
        };
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.out = Some(out.clone());
    }
    config.validate()?;
    Ok(config)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let config = match build_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("configuration error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let table = match run(&config) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("run failed: {e}");
            return ExitCode::FAILURE;
        }
    };
    let csv = emit_csv(&table);
    match &config.out {
        Some(path) => {
            if let Err(e) = std::fs::write(path, csv.as_bytes()) {
                eprintln!("cannot write {}: {e}", path.display());
                return ExitCode::FAILURE;
            }
        }
        None => print!("{csv}"),
    }
    if !table.any_feasible() {
        eprintln!("all sweep rows infeasible; see the status column");
        return ExitCode::from(EXIT_INFEASIBLE);
    }
    ExitCode::SUCCESS
}

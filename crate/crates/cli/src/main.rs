use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use tfd_core::experiment::{
    bt_check, compare, outputs_identical, parse_emit_set, render_comparison, squeeze_demo, write_comparison,
    Experiment, ExperimentConfig, TemperatureSetting,
};
use tfd_core::TfdError;

#[derive(Parser)]
#[command(name = "ibt-tfd", version, about = "Thermofield dynamics of a thermalized anharmonic oscillator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Propagate and write densities, observables and a manifest.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated output kinds, e.g. observables,density_exact,wigner.
        #[arg(long)]
        emit: Option<String>,
        /// Run twice and require byte-identical CSV output.
        #[arg(long)]
        seed_check: bool,
    },
    /// Per-time deviations between two runs or two density files.
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Analytic squeezing panels of a shifted Gaussian.
    SqueezeDemo {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Bogoliubov-matrix and shift-function identities.
    BtCheck {
        #[command(flatten)]
        common: Common,
        /// Also write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// `key = value` file; omitted keys take the 300 K reference values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Kelvin, or "zero".
    #[arg(long = "temperature-K")]
    temperature_k: Option<String>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, TfdError> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_file(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(t) = &self.temperature_k {
            cfg.temperature_k = t.parse::<TemperatureSetting>()?;
        }
        Ok(cfg)
    }
}

const EXIT_CONFIG: u8 = 2;
const EXIT_INSTABILITY: u8 = 3;
const EXIT_NOT_CONVERGED: u8 = 4;
const EXIT_NONDETERMINISTIC: u8 = 1;

fn exit_code(e: &TfdError) -> u8 {
    match e {
        TfdError::NumericalInstability(_) => EXIT_INSTABILITY,
        _ => EXIT_CONFIG,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn execute(command: Command) -> Result<u8, TfdError> {
    match command {
        Command::Run { common, out, emit, seed_check } => {
            let mut cfg = common.load()?;
            if let Some(e) = emit {
                cfg.emit = parse_emit_set(&e)?;
            }
            run(cfg, &out, seed_check)
        }
        Command::Compare { a, b, out } => {
            let table = compare(&a, &b)?;
            match out {
                Some(p) => write_comparison(&p, &table)?,
                None => {
                    let stdout = std::io::stdout();
                    let mut lock = stdout.lock();
                    render_comparison(&mut lock, &table)?;
                    lock.flush()?;
                }
            }
            Ok(0)
        }
        Command::SqueezeDemo { common, out } => {
            let report = squeeze_demo(&common.load()?, &out)?;
            for p in &report.panels {
                println!(
                    "{}: theta={:.16e} delta'={:.16e} centroid={:.16e} integral={:.16e}",
                    p.name, p.theta, p.transformed_center, p.centroid_z, p.integral
                );
            }
            Ok(0)
        }
        Command::BtCheck { common, out } => {
            let report = bt_check(&common.load()?)?;
            let json = report.to_json();
            println!("{json}");
            if let Some(p) = out {
                std::fs::write(p, &json)?;
            }
            Ok(if report.passed { 0 } else { EXIT_INSTABILITY })
        }
    }
}

fn run(cfg: ExperimentConfig, out: &Path, seed_check: bool) -> Result<u8, TfdError> {
    let experiment = Experiment::new(cfg)?;
    info!("theta = {}, z0 = {}", experiment.resolved.theta, experiment.resolved.z0);
    let outcome = experiment.run(Some(out))?;
    info!("run finished in {:.1} s", outcome.manifest.wall_time_s);
    if seed_check {
        let rerun = out.join("seed_check");
        experiment.run(Some(&rerun))?;
        let differing = outputs_identical(out, &rerun)?;
        if !differing.is_empty() {
            eprintln!("error: rerun differs in {}", differing.join(", "));
            return Ok(EXIT_NONDETERMINISTIC);
        }
        std::fs::remove_dir_all(&rerun)?;
        println!("seed check: outputs are bit-identical");
    }
    if outcome.non_converged() > 0 {
        warn!("{} reconstructions did not converge", outcome.non_converged());
    }
    Ok(convergence_code(outcome.non_converged()))
}

fn convergence_code(non_converged: usize) -> u8 {
    if non_converged > 0 {
        EXIT_NOT_CONVERGED
    } else {
        0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_kinds_map_to_exit_codes() {
        assert_eq!(exit_code(&TfdError::NumericalInstability("drift".into())), EXIT_INSTABILITY);
        assert_eq!(exit_code(&TfdError::Config("bad".into())), EXIT_CONFIG);
        assert_eq!(exit_code(&TfdError::Argument("bad".into())), EXIT_CONFIG);
        assert_eq!(convergence_code(0), 0);
        assert_eq!(convergence_code(3), EXIT_NOT_CONVERGED);
    }
}

//! Command-line driver: `quasilocal {upscale,convergence,validate}`.
//!
//! Exit codes: 0 on success, 2 when the computed model itself is invalid
//! (e.g. an indefinite effective operator), 1 for every other failure —
//! including validation checks that do not pass.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use quasilocal::experiment::{
    convergence_study, run_validate, upscale_study, write_convergence_outputs,
    write_upscale_outputs, write_validation_report, ExperimentConfig, OUTPUT_DIR_ENV,
};

#[derive(Parser)]
#[command(
    name = "quasilocal",
    version,
    about = "Compress random diffusion coefficients into effective coarse models",
    after_help = format!(
        "The output directory comes from the configuration (default \"out\") unless the \
         {OUTPUT_DIR_ENV} environment variable overrides it."
    )
)]
struct Cli {
    /// JSON configuration file; defaults apply for every omitted field.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Worker threads for the sampling loops (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    /// Override the configured master seed.
    #[arg(long, global = true, value_name = "SEED")]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Average sampled effective tensors and run the model-error estimators.
    Upscale,
    /// Full study: upscale, solve both coarse models, compare to references.
    Convergence,
    /// Run the built-in self-checks and write their report.
    Validate,
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, String> {
    match path {
        None => Ok(ExperimentConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| format!("cannot read config {}: {e}", p.display()))?;
            ExperimentConfig::from_json(&text)
                .map_err(|e| format!("bad config {}: {e}", p.display()))
        }
    }
}

fn failure_code(e: &quasilocal::Error) -> i32 {
    if e.is_model_invalid() {
        2
    } else {
        1
    }
}

fn print_written(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

fn run(cli: Cli) -> i32 {
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return 1;
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: could not configure {n} worker threads: {e}");
            return 1;
        }
    }
    let mut config = match load_config(cli.config.as_deref()) {
        Ok(c) => c,
        Err(msg) => {
            eprintln!("error: {msg}");
            return 1;
        }
    };
    if let Some(seed) = cli.seed {
        config.master_seed = seed;
    }
    let out = config.resolved_output_dir();

    match cli.command {
        Command::Upscale => match upscale_study(&config) {
            Ok(study) => {
                for r in &study.rows {
                    println!(
                        "level {}: H = {:.5}, ell = {}, gamma = {:.4e}, eta = {:.4e}, \
                         admissible = {}",
                        r.level, r.h_coarse, r.ell, r.gamma, r.eta, r.admissible
                    );
                }
                match write_upscale_outputs(&study, &out) {
                    Ok(paths) => {
                        print_written(&paths);
                        0
                    }
                    Err(e) => {
                        eprintln!("error: {e}");
                        failure_code(&e)
                    }
                }
            }
            Err(e) => {
                eprintln!("error: {e}");
                failure_code(&e)
            }
        },
        Command::Convergence => match convergence_study(&config) {
            Ok(study) => {
                for r in &study.rows {
                    println!(
                        "level {}: H = {:.5}, rel RMS error {:.4e} (quasilocal) vs {:.4e} \
                         (local), gamma = {:.4e}, eta = {:.4e}",
                        r.level,
                        r.h_coarse,
                        r.errors.rel_rms_quasilocal,
                        r.errors.rel_rms_local,
                        r.gamma,
                        r.eta
                    );
                }
                match write_convergence_outputs(&study, &out) {
                    Ok(paths) => {
                        print_written(&paths);
                        0
                    }
                    Err(e) => {
                        eprintln!("error: {e}");
                        failure_code(&e)
                    }
                }
            }
            Err(e) => {
                eprintln!("error: {e}");
                failure_code(&e)
            }
        },
        Command::Validate => {
            let report = run_validate();
            for check in &report.checks {
                println!(
                    "{} {}: {}",
                    if check.passed { "PASS" } else { "FAIL" },
                    check.name,
                    check.detail
                );
            }
            match write_validation_report(&report, &out) {
                Ok(path) => println!("wrote {}", path.display()),
                Err(e) => {
                    eprintln!("error: {e}");
                    return failure_code(&e);
                }
            }
            if report.all_passed {
                println!("all {} checks passed in {:.1} s", report.checks.len(), report.seconds);
                0
            } else {
                eprintln!("validation failed");
                1
            }
        }
    }
}

fn main() {
    std::process::exit(run(Cli::parse()));
}

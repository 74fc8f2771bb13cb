//! `uap`: train desk-scale victims, compute layer spectra, synthesize
//! data-free universal perturbations, and evaluate them.
//!
//! Every subcommand writes its artifacts plus a `run_manifest.toml` capturing
//! the fully resolved configuration, inputs, outputs, seed, and wall-clock
//! duration. Artifacts are byte-reproducible for a fixed seed; timestamps
//! live only in the run manifest.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Exit codes: 0 success, 2 bad arguments (clap), 3 io, 4 validation,
/// 5 numeric failure.
const EXIT_IO: u8 = 3;
const EXIT_VALIDATION: u8 = 4;
const EXIT_NUMERIC: u8 = 5;

#[derive(Parser)]
#[command(name = "uap", version, about = "Data-free universal adversarial perturbations via spectral alignment")]
struct Cli {
    /// Worker threads for batch-parallel stages (0 = all cores). Use 1 for
    /// bit-reproducible runs.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a fixture architecture on an IDX dataset directory.
    Train(commands::train::TrainArgs),
    /// Per-layer top singular values, optional dense-SVD cross-check, and a
    /// Lipschitz product-bound certificate.
    Spectrum(commands::spectrum::SpectrumArgs),
    /// Synthesize a universal perturbation for a model.
    Attack(commands::attack::AttackArgs),
    /// Fooling ratio of a perturbation, optionally under defenses.
    Eval(commands::eval::EvalArgs),
    /// Cross-model fooling matrix for several perturbations.
    Transfer(commands::transfer::TransferArgs),
}

/// Default output directory fallback, overridable via the environment.
pub(crate) fn default_out_dir() -> PathBuf {
    std::env::var_os("UAP_OUT_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn error_class(err: &anyhow::Error) -> (u8, &'static str) {
    use uap_core::attack::AttackError;
    use uap_core::eval::EvalError;
    use uap_core::io::IoFormatError;
    use uap_core::model::ModelError;
    use uap_core::train::TrainError;
    for cause in err.chain() {
        if let Some(attack) = cause.downcast_ref::<AttackError>() {
            if matches!(attack, AttackError::NumericFailure { .. }) {
                return (EXIT_NUMERIC, "numeric-failure");
            }
        }
        if let Some(train) = cause.downcast_ref::<TrainError>() {
            if matches!(train, TrainError::Diverged { .. }) {
                return (EXIT_NUMERIC, "numeric-failure");
            }
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return (EXIT_IO, "io");
        }
        if let Some(io) = cause.downcast_ref::<IoFormatError>() {
            if matches!(io, IoFormatError::Io { .. }) {
                return (EXIT_IO, "io");
            }
            return (EXIT_VALIDATION, "validation");
        }
        if cause.downcast_ref::<ModelError>().is_some()
            || cause.downcast_ref::<EvalError>().is_some()
        {
            return (EXIT_VALIDATION, "validation");
        }
    }
    (EXIT_VALIDATION, "validation")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        // Per-item work is aggregated by index, so any thread count yields
        // the same bytes; a single thread makes that trivially so.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global();
    }
    let threads = cli.threads;
    let result = match cli.command {
        Command::Train(args) => commands::train::run(args, threads),
        Command::Spectrum(args) => commands::spectrum::run(args, threads),
        Command::Attack(args) => commands::attack::run(args, threads),
        Command::Eval(args) => commands::eval::run(args, threads),
        Command::Transfer(args) => commands::transfer::run(args, threads),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (code, class) = error_class(&err);
            eprintln!("error[{class}]: {err:#}");
            ExitCode::from(code)
        }
    }
}

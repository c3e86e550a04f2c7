use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use semcom_cli::commands::{
    cmd_compare, cmd_eval, cmd_gradcheck, cmd_train, load_config, CompareArgs, EvalArgs, GradcheckArgs, TrainArgs,
};
use semcom_cli::CliResult;

#[derive(Parser)]
#[command(
    name = "semcom",
    version,
    about = "Train and evaluate a shared-encoder image transmission system"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one regimen and write checkpoints plus a CSV log.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// alone, iterative, proposed, proposed+transfer,
        /// proposed+transfer-frozen or proposed+kd. Overrides the config.
        #[arg(long)]
        regimen: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Skip phase 1 and continue from this checkpoint.
        #[arg(long)]
        from_phase1: Option<PathBuf>,
    },
    /// Score a checkpoint at several SNRs and print the CSV.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        ckpt: PathBuf,
        /// 1 for the high-computing decoder, 2 for the low-computing one.
        #[arg(long, default_value_t = 2)]
        decoder: u8,
        /// Comma-separated dB values; `inf` is the noiseless channel.
        #[arg(long, value_delimiter = ',', default_values_t = [1.0, 3.0, 5.0, 7.0])]
        snr: Vec<f64>,
        /// `synth:N:EXTENT:SEED` or a PPM directory. Defaults to the config's test set.
        #[arg(long)]
        data: Option<String>,
        /// Also write reconstructions as `{index}_{snr}.ppm`.
        #[arg(long)]
        dump_images: Option<PathBuf>,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every regimen over several seeds and aggregate PSNR.
    Compare {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
        /// SNR used for the per-epoch plot series.
        #[arg(long, default_value_t = 3.0)]
        plot_snr: f64,
    },
    /// Check every backward rule against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Print the canonical form of a config (defaults when none is given).
    DumpConfig {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train {
            config,
            regimen,
            seed,
            out,
            from_phase1,
        } => {
            println!(
                "{}",
                cmd_train(&TrainArgs {
                    config,
                    regimen,
                    seed,
                    out,
                    from_phase1
                })?
            );
        }
        Command::Eval {
            config,
            ckpt,
            decoder,
            snr,
            data,
            dump_images,
            out,
        } => {
            let csv = cmd_eval(&EvalArgs {
                config,
                ckpt,
                decoder,
                snr,
                data,
                dump_images,
            })?;
            match out {
                Some(path) => std::fs::write(&path, csv)
                    .map_err(|e| semcom_cli::CliError::Usage(format!("{}: {e}", path.display())))?,
                None => print!("{csv}"),
            }
        }
        Command::Compare {
            config,
            seeds,
            out,
            plot_snr,
        } => {
            print!(
                "{}",
                cmd_compare(&CompareArgs {
                    config,
                    seeds,
                    out,
                    plot_snr
                })?
            );
        }
        Command::Gradcheck { seeds, inject_fault } => {
            print!("{}", cmd_gradcheck(&GradcheckArgs { seeds, inject_fault })?);
        }
        Command::DumpConfig { config } => print!("{}", load_config(config.as_deref())?.dump()),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

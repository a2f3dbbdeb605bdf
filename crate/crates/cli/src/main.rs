use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fssl_lab::{
    cmd_gradcheck, cmd_report, cmd_run, default_out_dir, gradcheck_verdict, load_config,
    render_gradcheck, CliError,
};

#[derive(Parser)]
#[command(
    name = "fssl-lab",
    version,
    about = "Federated self-supervised backdoor simulator"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one experiment and write metrics, summary and checkpoints.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Dotted-path override, e.g. `attack.mu=0.3`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare finished runs: table sorted by mu plus SVG plots.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference checks of every analytic gradient.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Run {
            config,
            out,
            set,
            seed,
        } => {
            let cfg = load_config(&config, &set, seed)?;
            let out = out.unwrap_or_else(|| default_out_dir(cfg.seed));
            let run = cmd_run(&cfg, &out)?;
            let s = run.summary();
            println!(
                "{}: final acc {:.4} asr {:.4} -> {}",
                cfg.name,
                s.final_acc,
                s.final_asr,
                out.display()
            );
        }
        Cmd::Report { runs, out } => {
            let (table, files) = cmd_report(&runs, out.as_deref())?;
            print!("{table}");
            for f in files {
                println!("wrote {}", f.display());
            }
        }
        Cmd::Gradcheck { instances, seed } => {
            let reports = cmd_gradcheck(instances, seed)?;
            print!("{}", render_gradcheck(&reports));
            gradcheck_verdict(&reports)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

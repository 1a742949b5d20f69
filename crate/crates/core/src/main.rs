use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use levyflow::appio::{
    exit_code, parse_interval, run_fit, run_report, run_sample, run_solve, AppendixSeed, FitRequest, PairArg,
    RunConfig, SampleRequest,
};
use levyflow::Error;

#[derive(Parser)]
#[command(
    name = "levyflow",
    version,
    about = "Fractional advection-dispersion solver, drift fitter and sampler"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the forward problem and write density snapshots.
    Solve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Fit one drift coefficient pair to observed concentrations.
    Fit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum)]
        pair: Vec<PairChoice>,
        #[arg(long, value_enum)]
        seed_from_appendix: Option<SeedChoice>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Draw a particle sample from the solved density.
    Sample {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        time: Option<f64>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Estimate the probability of an interval from a stored sample.
    Report {
        #[arg(long)]
        sample: PathBuf,
        /// `a,b`
        #[arg(long, allow_hyphen_values = true)]
        interval: String,
        #[arg(long, default_value_t = 0.95)]
        confidence: f64,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PairChoice {
    A01,
    A23,
}

#[derive(Clone, Copy, ValueEnum)]
enum SeedChoice {
    Day224,
    Day328,
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Solve { config, out } => {
            let cfg = RunConfig::from_path(config)?;
            let s = run_solve(&cfg, &out)?;
            for (t, m) in &s.masses {
                println!("t = {t}: mass {m:.6}");
            }
            println!("wrote {} files to {}", s.files.len() + 1, out.display());
        }
        Command::Fit {
            config,
            data,
            pair,
            seed_from_appendix,
            out,
        } => {
            let cfg = RunConfig::from_path(config)?;
            let mut pairs = pair.clone();
            pairs.dedup();
            if pairs.len() > 1 {
                return Err(Error::Config(
                    "--pair given with conflicting values; fit one pair at a time".into(),
                ));
            }
            let req = FitRequest {
                data,
                pair: pairs.first().map(|p| match p {
                    PairChoice::A01 => PairArg::A01,
                    PairChoice::A23 => PairArg::A23,
                }),
                appendix_seed: seed_from_appendix.map(|s| match s {
                    SeedChoice::Day224 => AppendixSeed::Day224,
                    SeedChoice::Day328 => AppendixSeed::Day328,
                }),
            };
            let report = run_fit(&cfg, &req, &out)?;
            for f in &report.fits {
                println!(
                    "times {:?}: alpha = [{:.6}, {:.6e}] objective {} converged {}",
                    f.times,
                    f.alpha[0],
                    f.alpha[1],
                    f.objective.map(|o| format!("{o:.6e}")).unwrap_or_else(|| "n/a".into()),
                    f.converged
                );
                if let Some(e) = &f.error {
                    eprintln!("fit failed: {e}");
                }
            }
            if !report.succeeded() {
                return Err(Error::NoConvergence {
                    iterations: report.fits.iter().map(|f| f.trace.iterations.len()).sum(),
                    residual: report.fits.iter().filter_map(|f| f.objective).fold(f64::NAN, f64::max),
                });
            }
        }
        Command::Sample {
            config,
            n,
            seed,
            time,
            out,
        } => {
            let cfg = RunConfig::from_path(config)?;
            let s = run_sample(&cfg, &SampleRequest { n, seed, time }, &out)?;
            println!(
                "drew {} points at t = {} (seed {}, mass {:.6}) -> {}",
                s.n,
                s.time,
                s.seed,
                s.mass,
                s.sample_file.display()
            );
        }
        Command::Report {
            sample,
            interval,
            confidence,
        } => {
            let (a, b) = parse_interval(&interval)?;
            let r = run_report(&sample, a, b, confidence)?;
            let e = &r.interval;
            println!(
                "P({a} < y < {b}) = {:.6} +/- {:.6} ({}% confidence, n = {})",
                e.estimate,
                e.half_width,
                confidence * 100.0,
                e.n
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

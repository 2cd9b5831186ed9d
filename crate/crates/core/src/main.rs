use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use hetero_mm::io::{ensure_writable_dir, load_config, read_dataset, write_dataset, write_report};
use hetero_mm::model::builtin_model;
use hetero_mm::pipeline::{fit, FitOptions, Method};
use hetero_mm::sim::{
    apply_contamination, generate_sample, run_experiment, ContaminationScheme, ExperimentConfig,
    Truth,
};
use hetero_mm::{Error, Result};

#[derive(Parser)]
#[command(
    name = "hetero-mm",
    version,
    about = "Robust fitting of heteroscedastic nonlinear regression models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit one dataset and print the result as JSON.
    Fit {
        /// CSV file with covariate columns followed by `y`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "exp-growth")]
        model: String,
        /// LS, HLS, MM, WMM, HMM, HWMM, HMM_N or HWMM_N.
        #[arg(long)]
        method: Method,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Optional solver options as a JSON file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write the JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a Monte Carlo experiment and write report files.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        nrep: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads, 0 = all cores.
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw one (optionally contaminated) sample as CSV.
    Generate {
        #[arg(long, default_value = "exp-growth")]
        model: String,
        #[arg(long, default_value_t = 100)]
        n: usize,
        /// Contamination scheme: C0, C1, C2, C3, D1 or D2.
        #[arg(long, default_value = "C0")]
        scheme: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_delimiter = ',', default_value = "5,2")]
        beta: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "1")]
        lambda: Vec<f64>,
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Fit {
            data,
            model,
            method,
            seed,
            config,
            out,
        } => {
            let model = builtin_model(&model)
                .ok_or_else(|| Error::InvalidInput(format!("unknown model `{model}`")))?;
            let options = match config {
                Some(p) => serde_json::from_str::<FitOptions>(&std::fs::read_to_string(&p)?)?,
                None => FitOptions::default(),
            }
            .with_seed(seed);
            options.mm.validate()?;
            let data = read_dataset(&data)?;
            let result = fit(&data, model.as_ref(), method, &options)?;
            let json = serde_json::to_string_pretty(&result)?;
            match out {
                Some(p) => std::fs::write(p, json + "\n")?,
                None => println!("{json}"),
            }
            for s in result
                .stages
                .iter()
                .filter(|s| s.error.is_some() || !s.converged)
            {
                eprintln!(
                    "warning: stage {} {}",
                    s.stage,
                    s.error.as_deref().unwrap_or("did not converge")
                );
            }
            Ok(if result.converged() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            })
        }
        Command::Simulate {
            config,
            nrep,
            seed,
            threads,
            out,
        } => {
            let mut cfg = match config {
                Some(p) => load_config(&p)?,
                None => ExperimentConfig::default(),
            };
            if let Some(n) = nrep {
                cfg.nrep = n;
            }
            if let Some(s) = seed {
                cfg.master_seed = s;
            }
            if let Some(t) = threads {
                cfg.threads = t;
            }
            if let Some(o) = out {
                cfg.out_dir = Some(o);
            }
            let dir = cfg.out_dir.clone().ok_or_else(|| {
                Error::Config("no output directory: pass --out or set out_dir".into())
            })?;
            cfg.validate()?;
            ensure_writable_dir(&dir)?;
            let start = Instant::now();
            let report = run_experiment(&cfg)?;
            let elapsed = start.elapsed().as_secs_f64();
            for c in report.cells.iter().filter(|c| c.excluded > 0) {
                eprintln!(
                    "note: {} {}: {} failed fits excluded",
                    c.scheme, c.estimator, c.excluded
                );
            }
            let files = write_report(&dir, &report, elapsed)?;
            eprintln!(
                "wrote {} files to {} in {elapsed:.1}s",
                files.len(),
                dir.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Generate {
            model,
            n,
            scheme,
            seed,
            beta,
            lambda,
            sigma,
            out,
        } => {
            let model = builtin_model(&model)
                .ok_or_else(|| Error::InvalidInput(format!("unknown model `{model}`")))?;
            if n == 0 {
                return Err(Error::InvalidInput("--n must be at least 1".into()));
            }
            let scheme = ContaminationScheme::builtin(&scheme)
                .ok_or_else(|| Error::InvalidInput(format!("unknown scheme `{scheme}`")))?;
            let truth = Truth {
                beta,
                lambda,
                sigma,
            };
            let clean = generate_sample(model.as_ref(), n, &truth, seed)?;
            let data = apply_contamination(&clean, &scheme, seed.wrapping_add(1))?;
            match out {
                Some(p) => write_dataset(std::fs::File::create(p)?, &data)?,
                None => write_dataset(std::io::stdout().lock(), &data)?,
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

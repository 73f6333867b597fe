use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nalgebra::DVector;
use serde::Serialize;

use intercomm_sgd::algorithms::{run, Algorithm, RunConfig};
use intercomm_sgd::conditioning::{estimate_all, SamplerConfig};
use intercomm_sgd::harness::io::{read_json, read_text, RunMetadata};
use intercomm_sgd::harness::{
    export_trace_csv, load_problem, read_spec, save_problem, tune, write_json, Figure, Lab, ReproduceOptions,
};
use intercomm_sgd::oracle::OracleConfig;
use intercomm_sgd::problem::{generate_problem, GenerationSpec};
use intercomm_sgd::theory::{rate_bound, run_suite, theoretical_stepsize, RateBound, RateKind, RateParams, Stepsize, SuiteConfig};
use intercomm_sgd::{Error, Result};

/// Simulate and check MbSGD, LocalSGD and SCAFFOLD on synthetic problems.
#[derive(Parser)]
#[command(name = "intercomm-sgd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a problem bundle from a generation spec (JSON).
    Generate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate the conditioning constants of a bundle.
    Estimate {
        #[arg(long)]
        problem: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also measure the noise of a Gaussian oracle with this sigma.
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long, default_value_t = SamplerConfig::default().seed)]
        sampler_seed: u64,
    },
    /// Run one algorithm and write trace.csv and run.json.
    Run {
        #[arg(long)]
        problem: PathBuf,
        #[arg(long)]
        algo: Algorithm,
        #[arg(long)]
        eta: f64,
        #[arg(long)]
        tau: u64,
        /// Protocol communication rounds.
        #[arg(long)]
        rounds: u64,
        #[arg(long)]
        sigma: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tune stepsizes for an experiment spec.
    Tune {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reproduce a figure (fig1_left, fig1_right, fig2, fig3 or all).
    Reproduce {
        #[arg(long)]
        figure: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the randomized lemma checks.
    VerifyLemmas {
        #[arg(long, default_value_t = 1000)]
        draws: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a rate bound and, where defined, the theoretical stepsize.
    Rate {
        #[arg(long)]
        kind: RateKind,
        /// Parameters as inline JSON or a path to a JSON file.
        #[arg(long)]
        params: String,
    },
}

#[derive(Serialize)]
struct RateOutput {
    bound: RateBound,
    /// Stepsize for `T = tau * R` iterations.
    stepsize: Option<Stepsize>,
}

/// A run that completed but whose outcome is a failure (exit 2).
struct Failed(String);

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => write_json(path, value),
        None => {
            println!("{}", serde_json::to_string_pretty(value)?);
            Ok(())
        }
    }
}

fn parse_params(arg: &str) -> Result<RateParams> {
    let text = if arg.trim_start().starts_with('{') {
        arg.to_owned()
    } else {
        read_text(Path::new(arg))?
    };
    Ok(serde_json::from_str(&text)?)
}

fn execute(command: Command) -> Result<Option<Failed>> {
    match command {
        Command::Generate { spec, out } => {
            let spec: GenerationSpec = read_json(&spec)?;
            let p = generate_problem(&spec)?;
            save_problem(&p, &out)?;
        }
        Command::Estimate {
            problem,
            out,
            sigma,
            sampler_seed,
        } => {
            let p = load_problem(&problem)?;
            let oracle = sigma.map(|s| OracleConfig::gaussian(s, sampler_seed)).transpose()?;
            let x0 = DVector::zeros(p.dimension());
            let report = estimate_all(&p, &SamplerConfig::with_seed(sampler_seed), oracle.as_ref(), &x0)?;
            write_json(&out, &report)?;
        }
        Command::Run {
            problem,
            algo,
            eta,
            tau,
            rounds,
            sigma,
            seed,
            out,
        } => {
            if rounds % algo.rounds_per_loop() != 0 {
                return Err(Error::Config(format!("{algo} needs a multiple of {} rounds", algo.rounds_per_loop())));
            }
            let p = load_problem(&problem)?;
            let oracle = OracleConfig::gaussian(sigma, seed)?;
            let cfg = RunConfig::new(algo, eta, tau, rounds / algo.rounds_per_loop(), vec![0.0; p.dimension()], oracle);
            let trace = run(&p, &cfg)?;
            export_trace_csv(&trace, &out.join("trace.csv"))?;
            write_json(&out.join("run.json"), &RunMetadata::of(&trace))?;
            if let Some(t) = trace.diverged_at {
                return Ok(Some(Failed(format!("{algo} diverged at iteration {t}"))));
            }
        }
        Command::Tune { spec, out } => {
            let mut spec = read_spec(&spec)?;
            spec.output_dir = out;
            let result = tune(&spec)?;
            for t in &result.algorithms {
                println!("{}: eta = {}", t.algorithm, t.chosen);
            }
        }
        Command::Reproduce { figure, out } => {
            let figures = if figure == "all" {
                Figure::ALL.to_vec()
            } else {
                vec![figure.parse()?]
            };
            let mut lab = Lab::new(ReproduceOptions::default())?;
            let mut failed = Vec::new();
            for f in figures {
                let report = lab.reproduce(f, &out)?;
                for v in &report.verdicts {
                    println!(
                        "{f} {} {} {:?} round {}: {} ({:e})",
                        v.sweep,
                        v.algorithm,
                        v.check,
                        v.round,
                        if v.passed { "PASS" } else { "FAIL" },
                        v.statistic
                    );
                }
                if !report.passed {
                    failed.push(f.to_string());
                }
            }
            if !failed.is_empty() {
                return Ok(Some(Failed(format!("verdicts failed for {}", failed.join(", ")))));
            }
        }
        Command::VerifyLemmas { draws, seed, out } => {
            let reports = run_suite(&SuiteConfig::new(draws, seed))?;
            emit(&reports, out.as_deref())?;
            let bad: Vec<_> = reports.iter().filter(|r| r.violations > 0).map(|r| r.lemma.as_str()).collect();
            if !bad.is_empty() {
                return Ok(Some(Failed(format!("violations in {}", bad.join(", ")))));
            }
        }
        Command::Rate { kind, params } => {
            let params = parse_params(&params)?;
            let bound = rate_bound(kind, &params)?;
            let stepsize = if kind.has_stepsize() {
                Some(theoretical_stepsize(kind, &params, params.tau * params.rounds)?)
            } else {
                None
            };
            emit(&RateOutput { bound, stepsize }, None)?;
        }
    }
    Ok(None)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli.command) {
        Ok(None) => ExitCode::SUCCESS,
        Ok(Some(Failed(msg))) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

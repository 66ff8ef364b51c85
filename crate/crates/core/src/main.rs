use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use derivprod::config::RunConfig;
use derivprod::diagnostics::{alignment_curve, zero_visits, ZeroPolicy};
use derivprod::engine::{run_trajectory_with_state, trace_cocycle_check};
use derivprod::estimators::{
    estimate_abs_xi_phi, estimate_lyapunov, estimate_xi_integral, estimate_xi_psi, gamma_eps_derivative,
    xi_orbit_average, OrbitConfig,
};
use derivprod::linalg::Vector;
use derivprod::record::fmt_float;
use derivprod::report::Report;
use derivprod::rng::{Purpose, RngStream};
use derivprod::verify::{self, Suite};
use derivprod::{Error, Result};

#[derive(Parser)]
#[command(name = "derivprod", version, about = "Random matrix products and their derived products")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one trajectory and write its CSV record and a JSON summary
    Run(Opts),
    /// Run an estimator and write a JSON report
    Estimate(Opts),
    /// Run a verification suite and print a PASS/FAIL table
    Verify(Opts),
}

#[derive(clap::Args)]
struct Opts {
    /// TOML file with the same keys as the flags; flags win
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    run: RunConfig,
}

impl Opts {
    fn resolve(self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        Ok(base.overridden_by(self.run))
    }
}

const EXIT_VERIFY_FAILED: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

fn write_out(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn cmd_run(cfg: &RunConfig) -> Result<()> {
    let spec = cfg.ensemble()?;
    let steps = cfg.steps()?;
    let record_every = cfg.record_every()?;
    let tracked = cfg.tracked(spec.dim())?;
    let seed = cfg.seed();
    let mut rng = RngStream::for_purpose(seed, Purpose::Trajectory, 0);
    let (record, state) = run_trajectory_with_state(&spec, steps, &mut rng, &tracked, record_every)?;

    let csv = record.to_csv();
    match &cfg.out_csv {
        Some(p) => write_out(p, &csv)?,
        None => print!("{csv}"),
    }

    let n = state.n as f64;
    let trace = trace_cocycle_check(&state, state.trace_sum)?;
    let tracked_summary: Vec<_> = state
        .tracked
        .iter()
        .enumerate()
        .map(|(i, tv)| {
            let alignment = alignment_curve(&record, i).map(|a| json!({"verdict": a.verdict, "detail": a.detail}));
            json!({
                "phi_over_n": tv.phi / n,
                "psi_over_n": tv.psi / n,
                "zero_visits": zero_visits(&record, ZeroPolicy::TrackedPhi(i)).len(),
                "alignment": alignment.unwrap_or(serde_json::Value::Null),
            })
        })
        .collect();
    let mut report = Report::new("run", &spec, seed);
    report.value = state.log_norm_s / n;
    report.abs_value = report.value.abs();
    report.std_err = 0.0;
    report.replicas = 1;
    report.steps = steps;
    let report = report
        .with("log_norm_S", state.log_norm_s)
        .with("log_norm_wedge", state.log_norm_wedge())
        .with("record_every", record_every)
        .with("tracked", tracked_summary)
        .with("trace_cocycle", json!({"lhs": trace.lhs, "rhs": trace.rhs, "ok": trace.ok}))
        .with("matrix_zero_visits", zero_visits(&record, ZeroPolicy::MatrixFlag).len());
    let text = report.to_json();
    match (&cfg.out_json, &cfg.out_csv) {
        (Some(p), _) => write_out(p, &text)?,
        (None, Some(_)) => print!("{text}"),
        (None, None) => {}
    }
    Ok(())
}

fn cmd_estimate(cfg: &RunConfig) -> Result<()> {
    let spec = cfg.ensemble()?;
    let seed = cfg.seed();
    let method = cfg.method.as_deref().ok_or_else(|| Error::BadParams("--method is required".into()))?;
    let x0 = cfg.tracked(spec.dim())?.into_iter().next().unwrap_or_else(|| Vector::ones_normalized(spec.dim()));
    let report = match method {
        "psi" | "phi" => {
            let (steps, replicas) = (cfg.steps()?, cfg.replicas()?);
            let est = if method == "psi" {
                estimate_xi_psi(&spec, steps, replicas, seed, &x0)?
            } else {
                estimate_abs_xi_phi(&spec, steps, replicas, seed, &x0)?
            };
            Report::from_xi(&est, &spec, steps, seed)
        }
        "integral" => {
            let burn_in = cfg.burn_in()?;
            let est = estimate_xi_integral(&spec, cfg.samples()?, burn_in, seed)?;
            Report::from_xi(&est, &spec, burn_in, seed).with("samples", est.replicas.len() + est.rejected_samples)
        }
        "orbit" => {
            let steps = cfg.steps()?;
            let mut orbit = OrbitConfig::new(steps, cfg.tail()?, cfg.replicas()?, seed);
            orbit.burn_in = cfg.burn_in()?;
            orbit.x0 = (!cfg.track.is_empty()).then(|| x0.clone());
            let est = xi_orbit_average(&spec, &orbit)?;
            Report::from_xi(&est, &spec, steps, seed).with("tail", orbit.tail)
        }
        "gamma-eps" => {
            let (steps, replicas) = (cfg.steps()?, cfg.replicas()?);
            let ratios = gamma_eps_derivative(&spec, &cfg.eps_list(), steps, replicas, seed)?;
            Report::from_gamma_eps(&ratios, &spec, steps, replicas, seed)
        }
        "lyapunov" => {
            let est = estimate_lyapunov(&spec, cfg.steps()?, cfg.replicas()?, seed)?;
            Report::from_lyapunov(&est, &spec, seed)
        }
        other => {
            return Err(Error::BadParams(format!(
                "unknown method `{other}` (psi, phi, integral, orbit, gamma-eps, lyapunov)"
            )))
        }
    };
    if let Some(p) = &cfg.out_csv {
        let mut csv = String::from("replica,value\n");
        if let Some(values) = report.extra.get("replica_values").and_then(|v| v.as_array()) {
            for (i, v) in values.iter().enumerate() {
                csv.push_str(&format!("{i},{}\n", fmt_float(v.as_f64().unwrap_or(f64::NAN))));
            }
        }
        write_out(p, &csv)?;
    }
    let text = report.to_json();
    match &cfg.out_json {
        Some(p) => write_out(p, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_verify(cfg: &RunConfig) -> Result<bool> {
    let suite: Suite = cfg.suite.as_deref().unwrap_or("all").parse()?;
    let seed = cfg.seed();
    let checks = verify::run_suite(suite, seed);
    print!("{}", verify::table(&checks));
    if let Some(p) = &cfg.out_csv {
        write_out(p, &verify::to_csv(&checks))?;
    }
    if let Some(p) = &cfg.out_json {
        write_out(p, &verify::to_json(&checks, seed))?;
    }
    Ok(checks.iter().all(|c| c.passed))
}

fn exit_for(err: &Error) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(if err.is_validation() { EXIT_VALIDATION } else { EXIT_NUMERICAL })
}

fn main() -> ExitCode {
    let outcome = match Cli::parse().command {
        Command::Run(o) => o.resolve().and_then(|c| cmd_run(&c)).map(|_| true),
        Command::Estimate(o) => o.resolve().and_then(|c| cmd_estimate(&c)).map(|_| true),
        Command::Verify(o) => o.resolve().and_then(|c| cmd_verify(&c)),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_VERIFY_FAILED),
        Err(e) => exit_for(&e),
    }
}

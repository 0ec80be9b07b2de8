use std::path::PathBuf;
use std::process::ExitCode;

use bdeconv::experiments::{self, ExperimentKind, ExperimentSpec, SolverChoice, MAX_FAILURE_FRACTION};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bdeconv", version, about = "Blind deconvolution solvers and benchmark harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Error vs noise level for one or both solvers.
    Sweep(Common),
    /// Nonconvex error curves with fitted contraction rate and floor.
    Converge(Common),
    /// One run on a generated or replayed instance.
    Single(Common),
    /// Leave-one-out proximity diagnostic.
    Loo(Common),
}

#[derive(Args)]
struct Common {
    /// TOML experiment file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base seed (overrides `base_seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (overrides `threads`).
    #[arg(long, env = "BDECONV_THREADS")]
    threads: Option<usize>,
    #[arg(long, value_enum)]
    solver: Option<SolverChoice>,
    /// Permit K above the desk-scale limit.
    #[arg(long)]
    allow_large: bool,
}

impl Common {
    fn spec(&self) -> bdeconv::Result<ExperimentSpec> {
        let mut spec = ExperimentSpec::from_file(&self.config)?;
        if let Some(out) = &self.out {
            spec.out_dir = out.clone();
        }
        if let Some(seed) = self.seed {
            spec.base_seed = seed;
        }
        if self.threads.is_some() {
            spec.threads = self.threads;
        }
        if let Some(solver) = self.solver {
            spec.solver = solver;
        }
        spec.allow_large |= self.allow_large;
        Ok(spec)
    }
}

fn report_failures(fraction: f64) -> ExitCode {
    if fraction > MAX_FAILURE_FRACTION {
        eprintln!("error: {:.1}% of trials failed", 100.0 * fraction);
        ExitCode::from(2)
    } else {
        if fraction > 0.0 {
            eprintln!("warning: {:.1}% of trials failed", 100.0 * fraction);
        }
        ExitCode::SUCCESS
    }
}

fn run(cmd: Command) -> bdeconv::Result<ExitCode> {
    let (kind, common) = match &cmd {
        Command::Sweep(c) => (ExperimentKind::NoiseSweep, c),
        Command::Converge(c) => (ExperimentKind::Convergence, c),
        Command::Single(c) => (ExperimentKind::Single, c),
        Command::Loo(c) => (ExperimentKind::LooDiagnostic, c),
    };
    let spec = common.spec()?;
    for w in spec.warnings() {
        eprintln!("warning: {w}");
    }
    let out = spec.out_dir.display().to_string();
    let code = match kind {
        ExperimentKind::NoiseSweep => {
            let s = experiments::run_noise_sweep(&spec)?;
            println!("wrote {} trial rows to {out}", s.records.len());
            report_failures(s.failure_fraction())
        }
        ExperimentKind::Convergence => {
            let s = experiments::run_convergence(&spec)?;
            for b in &s.by_k {
                println!(
                    "K={} m={} sigma={:e}: fits {} mean rho {} mean floor {}",
                    b.k,
                    b.m,
                    b.sigma,
                    b.fits_ok,
                    b.mean_rho_hat.map_or("NA".into(), |v| format!("{v:.6}")),
                    b.mean_floor.map_or("NA".into(), |v| format!("{v:.3e}")),
                );
            }
            report_failures(s.failure_fraction())
        }
        ExperimentKind::Single => {
            let s = experiments::run_single(&spec)?;
            for r in &s.records {
                println!(
                    "{}: rel_error {:.3e} iterations {}",
                    r.solver,
                    r.rel_error.unwrap_or(f64::NAN),
                    r.iterations.unwrap_or(0)
                );
            }
            ExitCode::SUCCESS
        }
        ExperimentKind::LooDiagnostic => {
            for p in experiments::run_loo(&spec)? {
                println!("l={}: loo-to-full below full-to-truth at {:.1}% of iterations", p.l, 100.0 * p.fraction_below());
            }
            ExitCode::SUCCESS
        }
    };
    Ok(code)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

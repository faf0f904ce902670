use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vem::cli::{cmd_check, cmd_reference, cmd_solve, RunConfig, OUT_DIR_ENV};
use vem::evolve::Form;

/// Optimal control solver driven by variation-evolution flows.
#[derive(Parser)]
#[command(name = "vem", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evolve a problem to its optimal solution and write CSV/JSON outputs.
    Solve(SolveArgs),
    /// Check analytic derivatives and the gradient identity.
    Check(CheckArgs),
    /// Write the reference trajectory of a built-in problem.
    Reference(ReferenceArgs),
}

#[derive(Args)]
struct ProblemArgs {
    /// Built-in problem id (example1 | example2).
    #[arg(long)]
    problem: Option<String>,
    /// JSON run-configuration file (overridden by explicit flags).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default: $VEM_OUT_DIR or ./vem-out).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Evolution form.
    #[arg(long)]
    form: Option<String>,
    /// Number of grid nodes.
    #[arg(long)]
    nodes: Option<usize>,
    /// RNG seed for sampled checks.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SolveArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    /// Variation-time budget.
    #[arg(long)]
    tau_end: Option<f64>,
    /// Relative integration tolerance.
    #[arg(long)]
    rtol: Option<f64>,
    /// Absolute integration tolerance.
    #[arg(long)]
    atol: Option<f64>,
    /// Trace recording cadence in variation time.
    #[arg(long)]
    trace_every: Option<f64>,
    /// Initial (or fixed) terminal time.
    #[arg(long)]
    tf0: Option<f64>,
    /// Control gain.
    #[arg(long)]
    k: Option<f64>,
    /// Terminal-time gain.
    #[arg(long)]
    k_tf: Option<f64>,
    /// Multiplier gain.
    #[arg(long)]
    k_pi: Option<f64>,
    /// Terminal-Hamiltonian weight.
    #[arg(long)]
    w_h: Option<f64>,
    /// Stop as soon as the residual max norm falls below this value.
    #[arg(long)]
    stop_residual: Option<f64>,
}

#[derive(Args)]
struct CheckArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    /// Random sample count for the derivative check.
    #[arg(long, default_value_t = 16)]
    samples: usize,
    /// Grid size for the gradient-identity audit.
    #[arg(long, default_value_t = 201)]
    audit_nodes: usize,
}

#[derive(Args)]
struct ReferenceArgs {
    #[command(flatten)]
    problem: ProblemArgs,
}

fn parse_form(s: &str) -> Result<Form, String> {
    match s {
        "compact" => Ok(Form::Compact),
        "primary" => Ok(Form::Primary),
        other => Err(format!("unknown form '{other}' (compact | primary)")),
    }
}

fn default_out_dir() -> PathBuf {
    std::env::var_os(OUT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("vem-out"))
}

/// Resolve problem flags + optional config file into a full RunConfig.
fn resolve(problem: &ProblemArgs) -> Result<RunConfig, String> {
    let out_dir = problem.out_dir.clone().unwrap_or_else(default_out_dir);
    let form = match &problem.form {
        Some(s) => Some(parse_form(s)?),
        None => None,
    };
    let mut cfg = if let Some(path) = &problem.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| format!("bad config: {e}"))?;
        if problem.out_dir.is_some() {
            cfg.out_dir = out_dir;
        }
        cfg
    } else if let Some(id) = &problem.problem {
        RunConfig::builtin(id, form.unwrap_or(Form::Compact), out_dir)
            .map_err(|e| e.to_string())?
    } else {
        return Err("one of --problem or --config is required".into());
    };
    if let Some(f) = form {
        cfg.form = f;
    }
    if let Some(n) = problem.nodes {
        cfg.n_nodes = n;
    }
    if let Some(s) = problem.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Solve(args) => {
            let cfg = match resolve(&args.problem) {
                Ok(mut cfg) => {
                    if let Some(v) = args.tau_end {
                        cfg.tau_end = v;
                    }
                    if let Some(v) = args.rtol {
                        cfg.rtol = v;
                    }
                    if let Some(v) = args.atol {
                        cfg.atol = v;
                    }
                    if let Some(v) = args.trace_every {
                        cfg.trace_every = v;
                    }
                    if let Some(v) = args.tf0 {
                        cfg.tf0 = v;
                    }
                    if let Some(v) = args.k {
                        cfg.k = v;
                    }
                    if let Some(v) = args.k_tf {
                        cfg.k_tf = v;
                    }
                    if let Some(v) = args.k_pi {
                        cfg.k_pi = v;
                    }
                    if let Some(v) = args.w_h {
                        cfg.w_h = v;
                    }
                    if args.stop_residual.is_some() {
                        cfg.stop_residual = args.stop_residual;
                    }
                    cfg
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(2);
                }
            };
            cmd_solve(&cfg)
        }
        Command::Check(args) => match resolve(&args.problem) {
            Ok(cfg) => cmd_check(&cfg, args.samples, args.audit_nodes),
            Err(e) => {
                eprintln!("error: {e}");
                2
            }
        },
        Command::Reference(args) => match resolve(&args.problem) {
            Ok(cfg) => cmd_reference(&cfg),
            Err(e) => {
                eprintln!("error: {e}");
                2
            }
        },
    };
    ExitCode::from(code as u8)
}

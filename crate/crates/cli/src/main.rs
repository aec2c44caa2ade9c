use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ccm_cli::{cmd_demo_counterexample, cmd_simulate, cmd_validate, cmd_verify, exit, Outcome, RunConfig};

/// Control contraction metric checks, certificates and tracking simulation.
#[derive(Parser)]
#[command(name = "ccm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and dimension-check a spec, then print it normalized.
    Validate(Common),
    /// Run every grid check and write report.json.
    Verify(Common),
    /// Simulate the tracking controller and write trajectory.csv and report.json.
    Simulate(Common),
    /// Reproduce the bundled scalar counterexample end to end.
    DemoCounterexample(Common),
}

#[derive(Args)]
struct Common {
    /// Spec file, or builtin:<name> for a bundled spec.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value = "ccm-out")]
    out: PathBuf,
    #[arg(long)]
    lambda: Option<f64>,
    /// Samples per state interval.
    #[arg(long)]
    grid_density: Option<usize>,
    #[arg(long)]
    horizon: Option<f64>,
    #[arg(long)]
    step: Option<f64>,
    /// Path segments for the tracking controller.
    #[arg(long)]
    segments: Option<usize>,
    /// Worker threads for grid checks (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Drop grid points with max-norm below this radius.
    #[arg(long)]
    exclude_radius: Option<f64>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    x0: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    x_star: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    u_star: Option<Vec<f64>>,
    /// Omit the generation time so reports are byte-identical across runs.
    #[arg(long)]
    no_timestamp: bool,
}

impl Common {
    fn config(&self) -> RunConfig {
        RunConfig {
            spec: self.spec.clone(),
            out: self.out.clone(),
            lambda: self.lambda,
            grid_density: self.grid_density,
            horizon: self.horizon,
            step: self.step,
            segments: self.segments,
            seed: self.seed,
            exclude_radius: self.exclude_radius,
            x0: self.x0.clone(),
            x_star: self.x_star.clone(),
            u_star: self.u_star.clone(),
            timestamp: !self.no_timestamp,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::INPUT as u8 } else { 0 });
        }
    };
    let (run, common): (fn(&RunConfig) -> Outcome, &Common) = match &cli.command {
        Command::Validate(c) => (cmd_validate, c),
        Command::Verify(c) => (cmd_verify, c),
        Command::Simulate(c) => (cmd_simulate, c),
        Command::DemoCounterexample(c) => (cmd_demo_counterexample, c),
    };
    let cfg = common.config();
    let outcome = match common.threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| run(&cfg)),
            Err(e) => {
                eprintln!("error: cannot start {n} worker threads: {e}");
                return ExitCode::from(exit::INPUT as u8);
            }
        },
        None => run(&cfg),
    };
    print!("{}", outcome.stdout);
    eprint!("{}", outcome.stderr);
    ExitCode::from(outcome.code as u8)
}

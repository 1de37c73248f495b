use clap::{Args, Parser, Subcommand};
use nvnmr_cli::artifacts::{sweep, write_run, SweepAxis};
use nvnmr_cli::config::ExperimentConfig;
use nvnmr_cli::pipeline::simulate;
use nvnmr_cli::CliError;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "nvnmr", version, about = "Ensemble NV-NMR simulation under a rotating magnetic field")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment config; the built-in baseline when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides run.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides run.output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (0: one per core).
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Sets run.bit_reproducible (true when given without a value).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    bit_reproducible: Option<bool>,
    /// Also write spectrum.svg.
    #[arg(long)]
    svg: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one experiment and write its artifact set.
    Run(Common),
    /// One run per value of a config axis plus a summary table.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: SweepAxis,
        /// Comma-separated values; degrees for phi_error.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Check a config and print it fully resolved.
    Validate(Common),
    /// Print the predicted lines and Bloch-Siegert shift.
    Predict(Common),
}

fn load(c: &Common) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &c.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
            ExperimentConfig::from_toml(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.run.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.run.output_dir = o.clone();
    }
    if let Some(b) = c.bit_reproducible {
        cfg.run.bit_reproducible = b;
    }
    if c.svg {
        cfg.run.svg = true;
    }
    Ok(cfg)
}

fn execute(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Run(c) => {
            let cfg = load(&c)?;
            let res = cfg.resolve().map_err(CliError::Validation)?;
            for w in &res.warnings {
                eprintln!("warning: {w}");
            }
            let out = simulate(&res, c.threads)?;
            write_run(&cfg.run.output_dir, &res, &out, cfg.run.svg)?;
            for p in out.spectrum.peaks.iter().take(res.lines.len()) {
                println!("peak {:.2} Hz  height {:.4e}", p.freq, p.height);
            }
            println!("wrote {}", cfg.run.output_dir.display());
        }
        Command::Sweep { common, axis, values } => {
            let cfg = load(&common)?;
            let rows = sweep(&cfg, axis, &values, &cfg.run.output_dir, common.threads)?;
            for r in rows {
                let shifts: Vec<String> = r.peaks.iter().zip(&r.lines).map(|(p, l)| format!("{:+.2}", p - l)).collect();
                println!("{} = {}: shifts [{}] Hz", axis.name(), r.value, shifts.join(", "));
            }
        }
        Command::Validate(c) => {
            let res = load(&c)?.resolve().map_err(CliError::Validation)?;
            for w in &res.warnings {
                eprintln!("warning: {w}");
            }
            print!("{}", res.normalized().to_toml());
        }
        Command::Predict(c) => {
            let res = load(&c)?.resolve().map_err(CliError::Validation)?;
            for (i, f) in res.lines.iter().enumerate() {
                println!("line {}: {f:.3} Hz", i + 1);
            }
            println!("bloch-siegert: {:.3} Hz", res.bloch_siegert_line);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use swarm_phase::config::{Boundary, Config};
use swarm_phase::driver::{run_critical, run_solve, run_sweep, write_sweep_csv, Prober};
use swarm_phase::fields::{write_dump_binary, write_dump_csv};
use swarm_phase::verify::{run_verify, Level};
use swarm_phase::Error;

const EXIT_VERIFY: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_NONCONVERGED: u8 = 3;

#[derive(Parser)]
#[command(name = "swarm-phase", version, about = "Phases of constrained aggregation minimizers")]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,

    /// Print the effective configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

/// Configuration sources, applied in order: defaults, file, environment, flags.
#[derive(Args)]
struct Overrides {
    /// key = value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Set any configuration key, e.g. `--set face_steps=200`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    alpha: Option<String>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    beta: Option<String>,
    /// Mass.
    #[arg(long, global = true, allow_hyphen_values = true)]
    m: Option<String>,
    /// `radial:<n>:<rmax>` or `box:<n>:<h>`; the size may be `auto`.
    #[arg(long, global = true)]
    grid: Option<String>,
    /// Seed of the random start.
    #[arg(long, global = true)]
    seed: Option<String>,
    #[arg(long, global = true)]
    max_iters: Option<String>,
    #[arg(long, global = true)]
    gap_tol: Option<String>,
    /// frank-wolfe or projected-gradient.
    #[arg(long, global = true)]
    method: Option<String>,
    /// Comma-separated start recipes.
    #[arg(long, global = true)]
    starts: Option<String>,
    #[arg(long, global = true)]
    workers: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Multi-start solve with the analysis report.
    Solve {
        /// Directory for fields.csv and report.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One solve per (mass, start); writes a CSV table.
    Sweep {
        /// Comma-separated masses; overrides the log range.
        #[arg(long)]
        masses: Option<String>,
        #[arg(long)]
        m_min: Option<String>,
        #[arg(long)]
        m_max: Option<String>,
        #[arg(long)]
        m_count: Option<String>,
        /// Record wall times (the table is then not reproducible bit for bit).
        #[arg(long)]
        wall_time: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Bisection on the mass for a phase boundary.
    Critical {
        #[arg(long, value_enum, default_value_t = BoundaryArg::Both)]
        boundary: BoundaryArg,
        #[arg(long)]
        lo: Option<String>,
        #[arg(long)]
        hi: Option<String>,
        #[arg(long)]
        width: Option<String>,
        /// JSON file for the intervals and per-probe records.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Built-in oracle suites.
    Verify {
        #[arg(value_enum)]
        level: LevelArg,
        /// JSON file for the report.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Solve and write the density, potential and -Laplacian per cell.
    Dump {
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        /// Output file; CSV goes to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum BoundaryArg {
    C1,
    C2,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum LevelArg {
    Quick,
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Binary,
}

enum Failure {
    Error(Error),
    Exit(u8),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Error(e.into())
    }
}

type Outcome = Result<(), Failure>;

fn build_config(o: &Overrides, command: Option<&Command>) -> Result<Config, Error> {
    let mut cfg = match &o.config {
        Some(path) => Config::from_file(path)?,
        None => Config::default(),
    };
    cfg.apply_env()?;
    for kv in &o.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        cfg.set(k, v)?;
    }
    let flags = [
        ("alpha", &o.alpha),
        ("beta", &o.beta),
        ("m", &o.m),
        ("grid", &o.grid),
        ("seed", &o.seed),
        ("max_iters", &o.max_iters),
        ("gap_tol", &o.gap_tol),
        ("method", &o.method),
        ("starts", &o.starts),
        ("workers", &o.workers),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    match command {
        Some(Command::Sweep { masses, m_min, m_max, m_count, wall_time, .. }) => {
            for (key, value) in [("masses", masses), ("m_min", m_min), ("m_max", m_max), ("m_count", m_count)] {
                if let Some(v) = value {
                    cfg.set(key, v)?;
                }
            }
            if *wall_time {
                cfg.wall_time = true;
            }
        }
        Some(Command::Critical { lo, hi, width, .. }) => {
            for (key, value) in [("bracket_lo", lo), ("bracket_hi", hi), ("width", width)] {
                if let Some(v) = value {
                    cfg.set(key, v)?;
                }
            }
        }
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn output(path: Option<&Path>) -> io::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

fn cmd_solve(cfg: &Config, out: Option<&Path>) -> Outcome {
    if !(cfg.m > 0.0) {
        return Err(Error::Config("mass must be positive".into()).into());
    }
    let (result, report) = run_solve(cfg)?;
    println!("energy = {:.16e}", result.energy.total);
    println!("mu = {:.16e}", result.mu);
    println!("gap = {:.16e}", result.gap);
    println!("phase = {}", result.phase.phase);
    println!("saturated_mass_fraction = {:.16e}", result.phase.saturated_mass_fraction);
    println!("iterations = {}", result.iterations);
    println!("start = {}", result.start);
    println!("grid = {}", result.rho.geometry().descriptor());
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    for name in report.failures() {
        eprintln!("check failed: {name}");
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        let mut f = BufWriter::new(File::create(dir.join("fields.csv"))?);
        write_dump_csv(&mut f, &result.rho, &result.phi)?;
        f.flush()?;
        std::fs::write(dir.join("report.json"), report.to_json())?;
    }
    if !result.converged {
        return Err(Failure::Exit(EXIT_NONCONVERGED));
    }
    if !report.passed {
        return Err(Failure::Exit(EXIT_VERIFY));
    }
    Ok(())
}

fn cmd_sweep(cfg: &Config, out: Option<&Path>) -> Outcome {
    let masses = cfg.sweep_masses()?;
    let rows = run_sweep(cfg, &masses)?;
    let mut w = output(out)?;
    write_sweep_csv(&mut w, &rows)?;
    w.flush()?;
    if rows.iter().any(|r| r.is_error()) {
        return Err(Failure::Exit(EXIT_VERIFY));
    }
    if rows.iter().any(|r| !r.converged()) {
        return Err(Failure::Exit(EXIT_NONCONVERGED));
    }
    Ok(())
}

fn cmd_critical(cfg: &Config, boundary: BoundaryArg, out: Option<&Path>) -> Outcome {
    let boundaries = match boundary {
        BoundaryArg::C1 => vec![Boundary::C1],
        BoundaryArg::C2 => vec![Boundary::C2],
        BoundaryArg::Both => vec![Boundary::C1, Boundary::C2],
    };
    let mut prober = Prober::new(cfg);
    let mut results = Vec::new();
    for b in boundaries {
        let r = run_critical(&mut prober, b, cfg.bracket_lo, cfg.bracket_hi, cfg.width)?;
        println!("{} = [{:.16e}, {:.16e}]", r.boundary, r.lo, r.hi);
        results.push(r);
    }
    if results.len() == 2 {
        println!("coincide = {}", results[0].overlaps(&results[1]));
    }
    if let Some(path) = out {
        let json = serde_json::to_string_pretty(&results).map_err(|e| Error::Io(e.to_string()))?;
        std::fs::write(path, json)?;
    }
    Ok(())
}

fn cmd_verify(level: LevelArg, inject_fault: bool, out: Option<&Path>) -> Outcome {
    let level = match level {
        LevelArg::Quick => Level::Quick,
        LevelArg::Full => Level::Full,
    };
    let report = run_verify(level, inject_fault);
    for c in &report.checks {
        let tag = if c.passed { "PASS" } else { "FAIL" };
        println!("[{tag}] {} value={:.6e} tolerance={:.1e} {}", c.name, c.value, c.tolerance, c.detail);
    }
    if let Some(path) = out {
        std::fs::write(path, report.to_json())?;
    }
    if report.passed {
        Ok(())
    } else {
        Err(Failure::Exit(EXIT_VERIFY))
    }
}

fn cmd_dump(cfg: &Config, format: Format, out: Option<&Path>) -> Outcome {
    let (result, _) = run_solve(cfg)?;
    match format {
        Format::Csv => {
            let mut w = output(out)?;
            write_dump_csv(&mut w, &result.rho, &result.phi)?;
            w.flush()?;
        }
        Format::Binary => {
            let path = out.ok_or_else(|| Error::Config("binary dumps need --out".into()))?;
            let mut w = BufWriter::new(File::create(path)?);
            write_dump_binary(&mut w, &result.rho, &result.phi)?;
            w.flush()?;
        }
    }
    if !result.converged {
        return Err(Failure::Exit(EXIT_NONCONVERGED));
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite(_) => EXIT_NONCONVERGED,
        Error::Io(_) => EXIT_VERIFY,
        _ => EXIT_CONFIG,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match build_config(&cli.overrides, cli.command.as_ref()) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    if cli.print_config {
        print!("{}", cfg.to_key_values());
        return ExitCode::SUCCESS;
    }
    let outcome = match &cli.command {
        None => {
            eprintln!("error: no command given; see --help");
            return ExitCode::from(EXIT_CONFIG);
        }
        Some(Command::Solve { out }) => cmd_solve(&cfg, out.as_deref()),
        Some(Command::Sweep { out, .. }) => cmd_sweep(&cfg, out.as_deref()),
        Some(Command::Critical { boundary, out, .. }) => cmd_critical(&cfg, *boundary, out.as_deref()),
        Some(Command::Verify { level, out, inject_fault }) => cmd_verify(*level, *inject_fault, out.as_deref()),
        Some(Command::Dump { format, out }) => cmd_dump(&cfg, *format, out.as_deref()),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Exit(code)) => ExitCode::from(code),
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

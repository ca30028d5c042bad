use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lifelong_bn::harness::{self, ExperimentConfig, RunDir, StageOptions, VerdictStatus};
use lifelong_bn::{DomainId, Error};

/// Output root used when `--out` is not given.
const OUT_ENV: &str = "LIFELONG_BN_OUT";
const EFFECTIVE_CONFIG: &str = "config.effective.toml";

#[derive(Parser)]
#[command(name = "lifelong-bn", version, about = "Lifelong multi-domain segmentation with per-domain batch normalization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic datasets of every domain.
    Gen(Common),
    /// Train dedicated, shared and lifelong networks.
    Train(Common),
    /// Adapt the lifelong network to new domains and fine-tune the shared baseline.
    Adapt(Common),
    /// Evaluate every (network, domain, BN set) cell.
    Eval(Common),
    /// Write CSV/JSON reports, verdicts and graymap panels.
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML). Defaults to the run directory's copy, then built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory.
    #[arg(long, env = OUT_ENV, default_value = "runs/default")]
    out: PathBuf,
    /// Override the experiment seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for independent jobs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Comma-separated network names or families (dedicated, shared, lifelong).
    #[arg(long, value_delimiter = ',')]
    networks: Option<Vec<String>>,
    /// Comma-separated domain ids.
    #[arg(long, value_delimiter = ',')]
    domains: Option<Vec<u32>>,
}

enum Failure {
    Usage(String),
    Verdict(String),
    Internal(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match &e {
            Error::Config { .. } | Error::Parameter { .. } => Failure::Usage(e.to_string()),
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => Failure::Verdict(e.to_string()),
            _ => Failure::Internal(e.to_string()),
        }
    }
}

fn load_config(c: &Common) -> Result<ExperimentConfig, Failure> {
    let effective = c.out.join(EFFECTIVE_CONFIG);
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None if effective.exists() => ExperimentConfig::load(&effective)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Failure::from(Error::Io { path: dir.to_path_buf(), source: e }))?;
    }
    std::fs::write(path, bytes).map_err(|e| Failure::from(Error::Io { path: path.to_path_buf(), source: e }))
}

/// Keeps a verbatim copy of the given config file and the effective config
/// (after overrides) in the run directory.
fn record_config(c: &Common, cfg: &ExperimentConfig, run: &RunDir) -> Result<(), Failure> {
    if let Some(p) = &c.config {
        let text = std::fs::read(p).map_err(|e| Failure::from(Error::Io { path: p.clone(), source: e }))?;
        write(&run.config(), &text)?;
    }
    write(&run.root().join(EFFECTIVE_CONFIG), cfg.to_toml()?.as_bytes())
}

fn options(c: &Common) -> StageOptions {
    StageOptions {
        jobs: c.jobs,
        networks: c.networks.clone(),
        domains: c.domains.as_ref().map(|ds| ds.iter().map(|&d| DomainId(d)).collect()),
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let (Command::Gen(c) | Command::Train(c) | Command::Adapt(c) | Command::Eval(c) | Command::Report(c)) = &cli.command;
    let cfg = load_config(c)?;
    let run = RunDir::new(&c.out);
    let opts = options(c);
    match &cli.command {
        Command::Gen(_) => {
            record_config(c, &cfg, &run)?;
            let domains = harness::gen(&cfg, &run, &opts)?;
            eprintln!("generated {} domain datasets in {}", domains.len(), run.root().display());
        }
        Command::Train(_) => {
            record_config(c, &cfg, &run)?;
            for s in harness::train(&cfg, &run, &opts)? {
                let val: Vec<String> = s.final_val.iter().map(|(d, v)| format!("D{d} {v:.3}")).collect();
                eprintln!("trained {} ({} steps): val dice {}", s.name, s.steps, val.join(", "));
            }
        }
        Command::Adapt(_) => {
            for s in harness::adapt(&cfg, &run, &opts)? {
                let scores: Vec<String> = s.selection.scores.iter().map(|(d, v)| format!("bn{d} {v:.3}")).collect();
                eprintln!(
                    "{} on D{}: probe [{}], best val {:.3} at step {} of {}",
                    s.name,
                    s.domain,
                    scores.join(", "),
                    s.best_val,
                    s.best_step,
                    s.steps
                );
            }
        }
        Command::Eval(_) => {
            let out = harness::eval(&cfg, &run, &opts)?;
            eprintln!("evaluated {} cells", out.cells.len());
            if !out.missing.is_empty() {
                return Err(Failure::Verdict(format!("missing checkpoints: {}", out.missing.join(", "))));
            }
        }
        Command::Report(_) => {
            let outcome = harness::report(&cfg, &run)?;
            let text = std::fs::read_to_string(run.report_dir().join("summary.txt")).unwrap_or_default();
            print!("{text}");
            if !outcome.all_pass() {
                let bad: Vec<&str> = outcome.verdicts.iter().filter(|v| v.status != VerdictStatus::Pass).map(|v| v.id.as_str()).collect();
                return Err(Failure::Verdict(format!("verdicts not passing: {}", bad.join(", "))));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Verdict(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Internal(m)) => {
            eprintln!("internal error: {m}");
            ExitCode::from(3)
        }
    }
}

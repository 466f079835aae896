use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use equitrace::config::{parse_config, VerifyMode};
use equitrace::run::{run, Command, Overrides};

#[derive(Parser)]
#[command(name = "equitrace", version, about = "Equivariant flat traces of flows, with independent oracles")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Find delocalised periodic curves and write orbits.csv.
    Orbits(Common),
    /// Assemble the delta comb and write trace.json and pairing-curve.csv.
    Trace(Common),
    /// Run the configured oracles and write verify.json.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Oracle to run; repeatable. Defaults to the configured modes.
        #[arg(long = "mode", value_enum)]
        modes: Vec<Mode>,
    },
    /// Every stage in turn.
    All(Common),
}

#[derive(clap::Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Group element payload, e.g. `0.7`, `0,-1` or `e`.
    #[arg(long)]
    g: Option<String>,
    /// Test function, e.g. `gaussian(0.7, 0.1)`; repeatable.
    #[arg(long)]
    psi: Vec<String>,
    /// Worker threads (defaults to the number of cores).
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Mollified,
    Covering,
    Catmap,
}

impl From<Mode> for VerifyMode {
    fn from(m: Mode) -> VerifyMode {
        match m {
            Mode::Mollified => VerifyMode::Mollified,
            Mode::Covering => VerifyMode::Covering,
            Mode::Catmap => VerifyMode::Catmap,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("EQUITRACE_LOG", "warn")).init();
    let cli = Cli::parse();
    let (command, common, modes) = match cli.command {
        Cmd::Orbits(c) => (Command::Orbits, c, vec![]),
        Cmd::Trace(c) => (Command::Trace, c, vec![]),
        Cmd::Verify { common, modes } => (Command::Verify, common, modes),
        Cmd::All(c) => (Command::All, c, vec![]),
    };
    match execute(command, common, modes) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            let failure = serde_json::json!({
                "command": command.name(),
                "ok": false,
                "failures": [{ "check": "setup", "kind": e.kind(), "message": e.to_string() }],
            });
            eprintln!("error: {e}");
            println!("{failure}");
            ExitCode::from(2)
        }
    }
}

fn execute(command: Command, common: Common, modes: Vec<Mode>) -> equitrace::Result<bool> {
    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| equitrace::Error::Validation {
                key: "threads".into(),
                reason: e.to_string(),
            })?;
    }
    let text = std::fs::read_to_string(&common.config)?;
    let mut cfg = parse_config(&text)?;
    let overrides = Overrides {
        g: common.g,
        psi: common.psi,
        modes: (!modes.is_empty()).then(|| modes.into_iter().map(VerifyMode::from).collect()),
    };
    overrides.apply(&mut cfg)?;
    eprintln!("{}", cfg.summary());
    let outcome = run(command, &cfg, &common.out)?;
    for f in &outcome.failures {
        eprintln!("FAILED {} [{}]: {}", f.check, f.kind, f.message);
    }
    println!("{}", outcome.summary_json(command));
    Ok(outcome.ok())
}

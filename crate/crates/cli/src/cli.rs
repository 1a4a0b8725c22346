use crate::commands::{self, ModelChoice};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult, EXIT_OK};
use crate::run::RunDir;
use advdial::eval::ScenarioKind;
use clap::{Parser, Subcommand};
use std::ffi::OsString;
use std::path::PathBuf;

#[derive(Debug, Parser)]
#[command(
    name = "advdial",
    version,
    about = "Adversarial dialogue generation and evaluation on a synthetic corpus"
)]
pub struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Root under which run directories are created.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// `key=value` applied after the config file; repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Use this run directory instead of locating one by config hash.
    #[arg(long, global = true)]
    pub run: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus and its vocabulary.
    Synth {
        /// Number of dialogues.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Pretrain the forward and backward generators and the language model.
    PretrainGen,
    /// Pretrain the discriminator against machine responses.
    PretrainDisc,
    /// Adversarial training (REINFORCE or REGS).
    AdvTrain,
    /// Decode every evaluation context.
    Decode {
        #[arg(long, default_value = "mle")]
        model: ModelChoice,
    },
    /// Adversarial evaluation: AdverSuc, scenarios, ERE and machine-vs-random.
    Evaluate {
        #[arg(long, default_value = "mle")]
        model: ModelChoice,
        /// Run a single scenario, e.g. `human-vs-random`.
        #[arg(long)]
        scenario: Option<ScenarioKind>,
    },
    /// Check artifacts against their formats; defaults to the run directory.
    Validate { paths: Vec<PathBuf> },
}

impl Cli {
    /// Config file, then `--seed`, `--out`, subcommand flags and overrides.
    pub fn config(&self) -> CliResult<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.set("seed", &seed.to_string())?;
        }
        if let Some(out) = &self.out {
            cfg.set("out", &out.to_string_lossy())?;
        }
        if let Command::Synth { n: Some(n) } = &self.command {
            cfg.set("synth.n", &n.to_string())?;
        }
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Runs a parsed command and returns the paths it wrote.
pub fn execute(cli: &Cli) -> CliResult<Vec<PathBuf>> {
    let cfg = cli.config()?;
    let explicit = cli.run.as_deref();
    let creates = matches!(cli.command, Command::Synth { .. } | Command::PretrainGen);
    if let Command::Validate { paths } = &cli.command {
        let targets = if paths.is_empty() {
            vec![RunDir::resolve(&cfg, explicit, false)?.path]
        } else {
            paths.clone()
        };
        commands::validate(&targets)?;
        return Ok(Vec::new());
    }
    let run = RunDir::resolve(&cfg, explicit, creates)?;
    log::info!("run directory {}", run.path.display());
    match &cli.command {
        Command::Synth { .. } => commands::synth(&cfg, &run),
        Command::PretrainGen => commands::pretrain_gen(&cfg, &run),
        Command::PretrainDisc => commands::pretrain_disc(&cfg, &run),
        Command::AdvTrain => commands::adv_train(&cfg, &run),
        Command::Decode { model } => commands::decode_cmd(&cfg, &run, *model),
        Command::Evaluate { model, scenario } => {
            commands::evaluate(&cfg, &run, *model, *scenario).map(|(_, paths)| paths)
        }
        Command::Validate { .. } => unreachable!("handled above"),
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            EXIT_OK
        }
        Err(e) => report(&e),
    }
}

fn report(e: &CliError) -> i32 {
    eprintln!("error: {e}");
    e.exit_code()
}

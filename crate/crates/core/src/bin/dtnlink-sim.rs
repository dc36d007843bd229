use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::error;

use dtnlink::scenario::{self, load_scenario, Mode, RunOptions, ScenarioConfig, SweepCell};

#[derive(Parser)]
#[command(name = "dtnlink-sim", version, about = "Run DTN link scenarios in the network simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Dtn,
    Reliable,
    Both,
}

impl ModeArg {
    fn modes(self) -> Vec<Mode> {
        match self {
            ModeArg::Dtn => vec![Mode::Dtn],
            ModeArg::Reliable => vec![Mode::Reliable],
            ModeArg::Both => vec![Mode::Dtn, Mode::Reliable],
        }
    }
}

#[derive(clap::Args)]
struct Overrides {
    /// Built-in scenario name (multihop, datamule) or path to a JSON config.
    #[arg(long, default_value = "multihop")]
    scenario: String,
    /// Messages per traffic source.
    #[arg(long)]
    messages: Option<u32>,
    #[arg(long)]
    duration_s: Option<u64>,
}

impl Overrides {
    fn load(&self) -> Result<ScenarioConfig, scenario::ScenarioError> {
        let mut cfg = load_scenario(&self.scenario)?;
        if let Some(n) = self.messages {
            cfg = cfg.with_messages(n);
        }
        if let Some(d) = self.duration_s {
            cfg = cfg.with_duration(d);
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation and write its metrics CSV.
    Run {
        #[command(flatten)]
        base: Overrides,
        #[arg(long)]
        pdetection: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the channel event trace here.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Run a grid of detection probabilities, seeds and modes in parallel.
    Sweep {
        #[command(flatten)]
        base: Overrides,
        /// A single value or START:END:STEP.
        #[arg(long, default_value = "0.1:0.9:0.1")]
        pdetection: String,
        /// Seeds 1..=N.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long, value_enum, default_value = "both")]
        mode: ModeArg,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Print the resolved scenario config as JSON.
    Show {
        #[command(flatten)]
        base: Overrides,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<io::Error>().is_some_and(|e| e.kind() == io::ErrorKind::BrokenPipe) => {
            ExitCode::SUCCESS
        }
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), Box<dyn std::error::Error>> {
    match cli.command {
        Command::Run {
            base,
            pdetection,
            seed,
            mode,
            out,
            trace,
        } => {
            let mut cfg = base.load()?;
            if let Some(p) = pdetection {
                cfg = cfg.with_p_detection(p);
            }
            if let Some(s) = seed {
                cfg = cfg.with_seed(s);
            }
            match mode.map(ModeArg::modes).as_deref() {
                None => {}
                Some([m]) => cfg = cfg.with_mode(*m),
                Some(_) => return Err("run takes a single mode".into()),
            }
            let opts = RunOptions {
                trace: trace.is_some(),
                ..Default::default()
            };
            let result = scenario::run(&cfg, &opts)?;
            match out {
                Some(path) => fs::write(&path, result.to_csv())?,
                None => result.write_csv(&mut io::stdout().lock())?,
            }
            if let (Some(path), Some(text)) = (trace, &result.trace) {
                fs::write(path, text)?;
            }
            eprintln!("{}\n{}", scenario::SUMMARY_HEADER, result.summary_row());
        }
        Command::Sweep {
            base,
            pdetection,
            seeds,
            mode,
            out_dir,
        } => {
            let cfg = base.load()?;
            let ps = scenario::parse_range(&pdetection)?;
            let mut cells = Vec::new();
            for &m in &mode.modes() {
                for &p in &ps {
                    for seed in 1..=seeds {
                        cells.push(SweepCell {
                            p_detection: p,
                            mode: m,
                            seed,
                        });
                    }
                }
            }
            fs::create_dir_all(&out_dir)?;
            let results = scenario::sweep(&cfg, &cells)
                .into_iter()
                .collect::<Result<Vec<_>, _>>()?;
            for r in &results {
                let name = format!("{}_{}_p{}_seed{}.csv", r.scenario, r.mode, r.p_detection, r.seed);
                fs::write(out_dir.join(name), r.to_csv())?;
            }
            let summary = scenario::summary_csv(&results);
            fs::write(out_dir.join("summary.csv"), &summary)?;
            io::stdout().write_all(summary.as_bytes())?;
        }
        Command::Show { base } => writeln!(io::stdout().lock(), "{}", base.load()?.to_json())?,
    }
    Ok(())
}

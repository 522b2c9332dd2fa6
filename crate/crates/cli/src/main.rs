use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pulseforge::app::{self, Method, RunConfig};
use pulseforge::stnet::BranchMode;
use pulseforge::synth::Scenario;

/// Camera-based heart-rate sensing toolkit.
#[derive(Parser)]
#[command(name = "pulseforge", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic video with a known pulse into a frame container.
    Synth(Common),
    /// Estimate the pulse and heart rate of a recording.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
    },
    /// Train estimator weights on a synthetic corpus.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
        /// Number of videos in the training corpus.
        #[arg(long)]
        videos: Option<usize>,
    },
    /// Compare all methods across recording scenarios.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Comma-separated subset of clean, red, green, blue-green, motion.
        #[arg(long, value_delimiter = ',')]
        scenarios: Option<Vec<String>>,
    },
    /// Simulate duty-cycled sampling and energy use over a face-presence trace.
    Dutysim {
        /// CSV with columns timestamp,face_present,pnn50_pct,avg_bpm.
        trace: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    /// JSON configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Frame container to read instead of rendering one.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Frames per network window.
    #[arg(long)]
    window: Option<usize>,
    #[arg(long, value_enum)]
    mask: Option<Switch>,
    #[arg(long, value_enum)]
    branches: Option<BranchArg>,
    #[arg(long)]
    drop1: Option<f64>,
    #[arg(long)]
    drop2: Option<f64>,
    /// Face box enlargement ratio.
    #[arg(long)]
    enlarge: Option<f64>,
    /// Window length for inference, overriding --window.
    #[arg(long)]
    reinfer_window: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum BranchArg {
    Multi,
    Adjacent,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Ubihr,
    Green,
    Chrom,
    Pos,
}

impl Common {
    fn resolve(&self) -> pulseforge::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.out {
            cfg.output = v.clone();
        }
        if let Some(v) = &self.input {
            cfg.input = Some(v.clone());
        }
        if let Some(v) = &self.weights {
            cfg.weights = Some(v.clone());
        }
        if let Some(v) = self.window {
            cfg.pipeline.window = v;
        }
        if let Some(v) = self.mask {
            cfg.model.mask = matches!(v, Switch::On);
        }
        if let Some(v) = self.branches {
            cfg.model.branches = match v {
                BranchArg::Multi => BranchMode::Multi,
                BranchArg::Adjacent => BranchMode::Adjacent,
            };
        }
        if let Some(v) = self.drop1 {
            cfg.drop1 = v;
        }
        if let Some(v) = self.drop2 {
            cfg.drop2 = v;
        }
        if let Some(v) = self.enlarge {
            cfg.pipeline.enlarge_ratio = v;
        }
        if let Some(v) = self.reinfer_window {
            cfg.reinfer_window = Some(v);
        }
        Ok(cfg)
    }
}

fn execute(command: Command) -> pulseforge::Result<()> {
    match command {
        Command::Synth(common) => {
            let cfg = common.resolve()?;
            app::cmd_synth(&cfg)?;
            println!("{}", cfg.output.display());
        }
        Command::Run { common, method } => {
            let mut cfg = common.resolve()?;
            if let Some(m) = method {
                cfg.method = match m {
                    MethodArg::Ubihr => Method::Ubihr,
                    MethodArg::Green => Method::Green,
                    MethodArg::Chrom => Method::Chrom,
                    MethodArg::Pos => Method::Pos,
                };
            }
            let report = app::cmd_run(&cfg)?;
            match report.true_bpm {
                Some(t) => println!("{:.2} bpm (truth {t:.2})", report.bpm),
                None => println!("{:.2} bpm", report.bpm),
            }
        }
        Command::Train {
            common,
            epochs,
            videos,
        } => {
            let mut cfg = common.resolve()?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(v) = videos {
                cfg.corpus.videos = v;
            }
            let s = app::cmd_train(&cfg)?;
            println!(
                "{} windows, loss {:.4} -> {:.4}",
                s.samples, s.report.initial_loss, s.report.final_loss
            );
        }
        Command::Bench { common, scenarios } => {
            let mut cfg = common.resolve()?;
            if let Some(names) = scenarios {
                cfg.bench.scenarios = names
                    .iter()
                    .map(|n| {
                        Scenario::parse(n.trim()).ok_or_else(|| {
                            pulseforge::Error::Validation(format!("unknown scenario {n:?}"))
                        })
                    })
                    .collect::<pulseforge::Result<_>>()?;
            }
            let rows = app::cmd_bench(&cfg)?;
            for r in rows {
                println!(
                    "{:6} {:10} MAE {:.2}",
                    r.method.name(),
                    r.scenario.name(),
                    r.metrics.mae_bpm
                );
            }
        }
        Command::Dutysim { trace, common } => {
            let mut cfg = common.resolve()?;
            cfg.trace = Some(trace);
            let r = app::cmd_dutysim(&cfg)?;
            println!(
                "duty ratio {:.3}, saving {:.1}%",
                r.energy.duty_ratio,
                100.0 * r.energy.saving_fraction
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PULSEFORGE_LOG", "error"))
        .init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(app::exit_code(&e) as u8)
        }
    }
}

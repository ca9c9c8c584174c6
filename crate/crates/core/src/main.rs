use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use fedxval::analysis::{p_evade, p_evade_montecarlo, penalty_curve, EvasionParams, Reading};
use fedxval::federation::Mode;
use fedxval::harness::{run_experiment, synth_dataset};

#[derive(Parser)]
#[command(name = "fedxval", version, about = "Federated learning simulator with cross-validated aggregation")]
struct Cli {
    /// Output format for tables.
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a TOML config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        /// Defaults to `defended` when the config enables a defense.
        #[arg(long, value_enum)]
        mode: Option<RunMode>,
    },
    /// Closed-form analyses.
    #[command(subcommand)]
    Analyze(Analyze),
    /// Write a synthetic dataset as CSV (`label,x0,x1,...`).
    GenData {
        #[arg(long, default_value_t = 10)]
        num_classes: usize,
        #[arg(long, default_value_t = 32)]
        input_dim: usize,
        #[arg(long, default_value_t = 600)]
        per_class: usize,
        #[arg(long, default_value_t = 6.0)]
        separation: f64,
        #[arg(long, default_value_t = 1.0)]
        spread: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Defaults to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum RunMode {
    Baseline,
    Defended,
}

#[derive(Subcommand)]
enum Analyze {
    /// Evasion probability over a parameter grid (comma-separated lists).
    Evade(EvadeArgs),
    /// Penalty coefficient for r = 0..=r_max.
    Penalty {
        #[arg(long, value_delimiter = ',', default_value = "3")]
        e: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0.5")]
        v: Vec<f64>,
        #[arg(long)]
        r_max: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct EvadeArgs {
    #[arg(long, value_delimiter = ',', default_value = "100")]
    k: Vec<u64>,
    /// Malicious clients per round; exclusive with --p.
    #[arg(long, value_delimiter = ',', conflicts_with = "p")]
    malicious: Vec<u64>,
    #[arg(long, value_delimiter = ',')]
    p: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "10")]
    u: Vec<u64>,
    #[arg(long, value_delimiter = ',', default_value = "3")]
    e: Vec<u64>,
    /// Malicious evaluators; defaults to e (full evasion).
    #[arg(long, value_delimiter = ',')]
    t: Vec<u64>,
    /// Monte Carlo trials per point; 0 skips the simulation.
    #[arg(long, default_value_t = 0)]
    trials: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn evade(args: &EvadeArgs, w: &mut dyn Write) -> Result<()> {
    writeln!(
        w,
        "k,malicious,p,u,e,t,joint,given_poisoned,given_exactly_one,mc_estimate,mc_std_error"
    )?;
    let mut point = 0u64;
    for &k in &args.k {
        let counts: Vec<u64> = if !args.p.is_empty() {
            args.p
                .iter()
                .map(|&p| EvasionParams::from_proportion(k, p, 1, 0, 0).map(|q| q.malicious))
                .collect::<fedxval::Result<_>>()?
        } else if !args.malicious.is_empty() {
            args.malicious.clone()
        } else {
            vec![k / 10]
        };
        for &m in &counts {
            for &u in &args.u {
                for &e in &args.e {
                    let ts = if args.t.is_empty() { vec![e] } else { args.t.clone() };
                    for &t in &ts {
                        let params = EvasionParams::new(k, m, u, e, t)?;
                        let readings = Reading::ALL
                            .iter()
                            .map(|&r| p_evade(&params, r))
                            .collect::<fedxval::Result<Vec<_>>>()?;
                        let (mc, se) = if args.trials > 0 {
                            let est = p_evade_montecarlo(&params, args.trials, args.seed.wrapping_add(point))?;
                            (est.estimate.to_string(), est.std_error.to_string())
                        } else {
                            ("nan".into(), "nan".into())
                        };
                        writeln!(
                            w,
                            "{k},{m},{},{u},{e},{t},{},{},{},{mc},{se}",
                            params.proportion(),
                            readings[0],
                            readings[1],
                            readings[2]
                        )?;
                        point += 1;
                    }
                }
            }
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let Format::Csv = cli.format;
    match cli.command {
        Command::Run {
            config,
            seed,
            out_dir,
            mode,
        } => {
            let mode = mode.map(|m| match m {
                RunMode::Baseline => Mode::FedAvgBaseline,
                RunMode::Defended => Mode::Defended,
            });
            let out = run_experiment(&config, seed, mode, &out_dir)
                .with_context(|| format!("experiment {}", config.display()))?;
            if let Some(last) = out.run.metrics.last() {
                eprintln!(
                    "{} rounds, final main accuracy {:.4}, results in {}",
                    out.run.metrics.len(),
                    last.main_accuracy,
                    out.out_dir.display()
                );
            }
        }
        Command::Analyze(Analyze::Evade(args)) => {
            let mut w = output(&args.out)?;
            evade(&args, &mut w)?;
            w.flush()?;
        }
        Command::Analyze(Analyze::Penalty { e, v, r_max, out }) => {
            let mut w = output(&out)?;
            writeln!(w, "e,v,r,c")?;
            for &e in &e {
                for &v in &v {
                    for (r, c) in penalty_curve(e, v, r_max.unwrap_or(e))? {
                        writeln!(w, "{e},{v},{r},{c}")?;
                    }
                }
            }
            w.flush()?;
        }
        Command::GenData {
            num_classes,
            input_dim,
            per_class,
            separation,
            spread,
            seed,
            out,
        } => {
            if per_class == 0 {
                bail!("per_class must be positive");
            }
            let data = synth_dataset(num_classes, input_dim, per_class, separation, spread, seed)?;
            let mut w = output(&out)?;
            let header: Vec<String> = (0..input_dim).map(|i| format!("x{i}")).collect();
            writeln!(w, "label,{}", header.join(","))?;
            for s in data.samples() {
                let xs: Vec<String> = s.features.iter().map(|x| x.to_string()).collect();
                writeln!(w, "{},{}", s.label, xs.join(","))?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

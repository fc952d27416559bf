use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use mhattn::gadgets::{sq_demo, verify_parity_layer};
use mhattn::instance::{audit_assumptions, generate_instance_with};
use mhattn::pipeline::{instance_for, reports_to_csv, run_learn_tracked, write_outputs};
use mhattn::regress::{draw_examples, loss_on, zero_loss};
use mhattn::rng::{seeded, SeedTree};
use mhattn::{Error, InstanceFile, InstanceParams, LayerOracle, RunConfig};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "mhattn", version, about = "Learn multi-head attention layers from random Boolean examples")]
struct Cli {
    /// Worker thread cap.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a random instance and write it as JSON.
    Generate {
        #[arg(long, default_value_t = 1)]
        m: usize,
        #[arg(long, default_value_t = 16)]
        d: usize,
        #[arg(long, default_value_t = 12.0)]
        theta_norm: f64,
        #[arg(long, default_value_t = 0.5)]
        lambda_prime: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the assumption audit of an instance file.
    Audit { instance: PathBuf },
    /// Run the learner.
    Learn {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Learn this instance instead of generating one.
        #[arg(long)]
        instance: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Test loss of a hypothesis against an instance.
    Eval {
        #[arg(long)]
        hypothesis: PathBuf,
        #[arg(long)]
        instance: PathBuf,
        #[arg(long, default_value_t = 4)]
        k: usize,
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Exhaustively check a parity gadget layer.
    GadgetVerify {
        #[arg(long)]
        d: usize,
        /// Comma-separated 1-based coordinates of the parity.
        #[arg(long, value_delimiter = ',')]
        subset: Vec<usize>,
        /// Check only the (1, -1) bit pair.
        #[arg(long)]
        single_pair: bool,
    },
    /// Time the learner over several seeds.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        runs: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Character-query gaps between a planted parity and noise.
    SqDemo {
        #[arg(long, default_value_t = 6)]
        d: usize,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        subset: Vec<usize>,
        #[arg(long, default_value_t = 1e-3)]
        tau: f64,
        #[arg(long, default_value_t = 1000)]
        queries: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the default configuration.
    Config {
        #[arg(long, default_value_t = 1)]
        m: usize,
        #[arg(long, default_value_t = 16)]
        d: usize,
        #[arg(long, default_value_t = 4)]
        k: usize,
        #[arg(long, default_value_t = 12.0)]
        theta_norm: f64,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Dimension(_) | Error::InvalidParam(_) | Error::Format(_) | Error::Json(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

type CliResult = std::result::Result<(), Failure>;

fn load_config(path: &Path) -> std::result::Result<RunConfig, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let config: RunConfig = serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}:{}:{}: {e}", path.display(), e.line(), e.column())))?;
    config.validate().map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    Ok(config)
}

fn config_or_default(path: Option<&Path>) -> std::result::Result<RunConfig, Failure> {
    match path {
        Some(p) => load_config(p),
        None => Ok(RunConfig::desk(1, 16, 4, 12.0)),
    }
}

fn load_instance(path: &Path) -> std::result::Result<InstanceFile, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}:{}:{}: {e}", path.display(), e.line(), e.column())))
}

fn print_json<T: Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn zero_based(subset: &[usize], d: usize) -> std::result::Result<Vec<usize>, Failure> {
    subset
        .iter()
        .map(|&i| if i >= 1 && i <= d { Ok(i - 1) } else { Err(Failure::Usage(format!("subset index {i} outside 1..={d}"))) })
        .collect()
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Generate { m, d, theta_norm, lambda_prime, seed, out } => {
            if m == 0 || d == 0 {
                return Err(Failure::Usage("m and d must be positive".into()));
            }
            let layer = generate_instance_with(&InstanceParams { m, d, theta_norm, lambda_prime }, &mut seeded(seed));
            let file = InstanceFile::from_layer(&layer, seed);
            match out {
                Some(p) => file.save(&p)?,
                None => println!("{}", file.to_json()),
            }
        }
        Command::Audit { instance } => {
            let layer = load_instance(&instance)?.to_layer()?;
            print_json(&audit_assumptions(&layer));
        }
        Command::Learn { config, seed, instance, out } => {
            let mut cfg = config_or_default(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.out = Some(o);
            }
            let truth = match &instance {
                Some(p) => load_instance(p)?.to_layer()?,
                None => instance_for(&cfg),
            };
            if instance.is_some() {
                cfg.instance.m = truth.m();
                cfg.instance.d = truth.d();
            }
            let mut reports = Vec::new();
            let result = run_learn_tracked(truth, &cfg, &mut reports);
            let dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from(format!("run-{}", cfg.seed)));
            match result {
                Ok(outcome) => {
                    write_outputs(&dir, &cfg, &outcome)?;
                    print!("{}", outcome.csv(cfg.seed));
                    println!("test_loss={:e} baseline={:e} out={}", outcome.test_loss, outcome.baseline_loss, dir.display());
                }
                Err(e) => {
                    std::fs::create_dir_all(&dir).map_err(|e| Failure::Runtime(e.to_string()))?;
                    std::fs::write(dir.join("metrics.csv"), reports_to_csv(cfg.seed, &reports)).map_err(|e| Failure::Runtime(e.to_string()))?;
                    return Err(e.into());
                }
            }
        }
        Command::Eval { hypothesis, instance, k, n, seed } => {
            let hyp = load_instance(&hypothesis)?.to_layer()?;
            let truth = load_instance(&instance)?.to_layer()?;
            if hyp.d() != truth.d() {
                return Err(Failure::Usage("hypothesis and instance differ in d".into()));
            }
            if k == 0 || n == 0 {
                return Err(Failure::Usage("k and n must be positive".into()));
            }
            let oracle = LayerOracle::new(truth, k);
            let test = draw_examples(&oracle, n, &SeedTree::new(seed), "eval");
            let loss = loss_on(&test, &hyp);
            let base = zero_loss(&test);
            #[derive(Serialize)]
            struct Eval {
                n: usize,
                loss: f64,
                loss_se: f64,
                baseline: f64,
                ratio: f64,
            }
            let ratio = if base.mean > 0.0 { loss.mean / base.mean } else { 0.0 };
            print_json(&Eval { n, loss: loss.mean, loss_se: loss.se, baseline: base.mean, ratio });
        }
        Command::GadgetVerify { d, subset, single_pair } => {
            if d == 0 || d > 10 {
                return Err(Failure::Usage("d must lie in 1..=10 for exhaustive checking".into()));
            }
            let s = zero_based(&subset, d)?;
            let r = verify_parity_layer(d, &s, !single_pair)?;
            print_json(&r);
            if r.max_error > 1e-6 {
                return Err(Failure::Runtime(format!("max error {:e} exceeds 1e-6", r.max_error)));
            }
        }
        Command::Bench { config, runs, seed } => {
            let base = config_or_default(config.as_deref())?;
            #[derive(Serialize)]
            struct Row {
                seed: u64,
                wall_ms: f64,
                phases: Vec<(String, f64)>,
                test_loss: f64,
                baseline: f64,
            }
            let mut rows = Vec::new();
            for s in seed..seed + runs {
                let mut cfg = base.clone();
                cfg.seed = s;
                let t = Instant::now();
                let mut reports = Vec::new();
                let o = run_learn_tracked(instance_for(&cfg), &cfg, &mut reports)?;
                rows.push(Row {
                    seed: s,
                    wall_ms: t.elapsed().as_secs_f64() * 1e3,
                    phases: o.reports.iter().map(|r| (r.phase.clone(), r.wall_ms)).collect(),
                    test_loss: o.test_loss,
                    baseline: o.baseline_loss,
                });
            }
            print_json(&rows);
        }
        Command::SqDemo { d, subset, tau, queries, seed } => {
            let s = zero_based(&subset, d)?;
            if !(tau > 0.0) {
                return Err(Failure::Usage("tau must be positive".into()));
            }
            print_json(&sq_demo(d, &s, tau, queries, &mut seeded(seed)));
        }
        Command::Config { m, d, k, theta_norm } => {
            println!("{}", RunConfig::desk(m, d, k, theta_norm).to_json());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if t == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

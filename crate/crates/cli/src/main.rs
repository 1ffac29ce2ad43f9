use std::io::{self, BufReader, Write};
use std::net::TcpListener;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use atgrpo_core::budget::{budget_report, BudgetGrid};
use atgrpo_core::env::serve;
use atgrpo_core::{
    compare_methods, load_config, run_experiment, Environment, ExperimentConfig, Method, Preset,
    RemoteEnv,
};
use clap::{Args, Parser, Subcommand};

mod gradcheck;

#[derive(Parser, Debug)]
#[command(
    name = "atgrpo",
    version,
    about = "Tree-based GRPO on simulated dialogue users"
)]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one method over several seeds and write metrics.
    Run {
        #[command(flatten)]
        setup: Setup,
        #[arg(long, default_value = "atgrpo")]
        method: Method,
    },
    /// Train every method under shared seeds and write a comparison table.
    Compare {
        #[command(flatten)]
        setup: Setup,
    },
    /// Predicted, bounded and observed rollout budgets over a grid, as CSV.
    Budget(BudgetArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck {
        #[command(flatten)]
        source: ConfigSource,
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Answer user-agent requests for a local environment.
    ServeEnv {
        #[command(flatten)]
        source: ConfigSource,
        /// `stdio` or `tcp:host:port`.
        #[arg(long, default_value = "stdio")]
        listen: String,
    },
}

#[derive(Args, Debug)]
struct ConfigSource {
    /// TOML config; omitted keys take their defaults.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in scenario, used when no config file is given.
    #[arg(long)]
    preset: Option<Preset>,
}

impl ConfigSource {
    fn load(&self) -> Result<ExperimentConfig> {
        Ok(match (&self.config, self.preset) {
            (Some(path), _) => {
                load_config(path).with_context(|| format!("loading {}", path.display()))?
            }
            (None, Some(p)) => ExperimentConfig::preset(p),
            (None, None) => ExperimentConfig::default(),
        })
    }
}

#[derive(Args, Debug)]
struct Setup {
    #[command(flatten)]
    source: ConfigSource,
    /// Comma-separated seeds; overrides the config.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Remote user agent: `tcp:host:port` or `stdio:<command>`.
    #[arg(long)]
    env: Option<String>,
}

impl Setup {
    fn resolve(&self) -> Result<(ExperimentConfig, Box<dyn Environment>)> {
        let mut config = self.source.load()?;
        if let Some(seeds) = &self.seeds {
            config.seeds = seeds.clone();
        }
        if let Some(steps) = self.steps {
            config.steps = steps;
        }
        config.validate()?;
        let spec = config.env_spec()?;
        let env: Box<dyn Environment> = match &self.env {
            Some(address) => Box::new(
                RemoteEnv::connect(address, spec.num_actions())
                    .with_context(|| format!("connecting to {address}"))?,
            ),
            None => spec.build()?,
        };
        Ok((config, env))
    }
}

#[derive(Args, Debug)]
struct BudgetArgs {
    #[arg(long = "group-sizes", value_delimiter = ',', default_value = "2,4,8")]
    group_sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "2,3")]
    widths: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0.5,1,2")]
    gammas: Vec<f64>,
    /// Depths as a comma list, ranges allowed (`1-64`, `8,16,32`).
    #[arg(long, default_value = "1-64")]
    depths: String,
    /// Skip building the trees; only closed forms.
    #[arg(long)]
    no_observe: bool,
    /// Add chain GRPO and full TreeRPO rows.
    #[arg(long)]
    baselines: bool,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_depths(spec: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (usize, usize) = (a.parse()?, b.parse()?);
                if a > b {
                    bail!("empty depth range {part}");
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse()?),
        }
    }
    if out.is_empty() || out.contains(&0) {
        bail!("depths must be positive, got {spec:?}");
    }
    Ok(out)
}

fn run(setup: &Setup, method: Method) -> Result<()> {
    let (config, env) = setup.resolve()?;
    let report = run_experiment(&config, method, &config.seeds, &setup.out_dir, env.as_ref())?;
    let mut out = io::stdout().lock();
    for path in &report.jsonl {
        writeln!(out, "{}", path.display())?;
    }
    writeln!(out, "{}", report.summary_csv.display())?;
    if let Some(last) = report.summary.last() {
        writeln!(
            out,
            "{method} step {}: median Avg.r {:.3}, median Avg.L {:.2} over {} seeds",
            last.step, last.avg_r_median, last.avg_l_median, last.seeds
        )?;
    }
    Ok(())
}

fn compare(setup: &Setup) -> Result<()> {
    let (config, env) = setup.resolve()?;
    let cmp = compare_methods(&config, &config.seeds, &setup.out_dir, env.as_ref())?;
    let mut out = io::stdout().lock();
    writeln!(
        out,
        "{:<14} {:>8} {:>8} {:>10} {:>12}",
        "method", "Avg.r", "Avg.L", "nominal", "observed"
    )?;
    for r in &cmp.rows {
        writeln!(
            out,
            "{:<14} {:>8.3} {:>8.2} {:>10} {:>12.1}",
            r.method.name(),
            r.final_avg_r_median,
            r.final_avg_l_median,
            r.nominal_budget,
            r.observed_budget_median
        )?;
    }
    for (method, reason) in &cmp.skipped {
        writeln!(out, "{:<14} skipped: {reason}", method.name())?;
    }
    writeln!(out, "{}", cmp.csv.display())?;
    Ok(())
}

fn budget(args: &BudgetArgs) -> Result<()> {
    let grid = BudgetGrid {
        group_sizes: args.group_sizes.clone(),
        widths: args.widths.clone(),
        gammas: args.gammas.clone(),
        depths: parse_depths(&args.depths)?,
        observe: !args.no_observe,
        baselines: args.baselines,
    };
    let rows = budget_report(&grid)?;
    let sink: Box<dyn Write> = match &args.out {
        Some(path) => Box::new(
            std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
        ),
        None => Box::new(io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(sink);
    for row in &rows {
        w.serialize(row)?;
        let Some(observed) = row.observed else {
            continue;
        };
        if u128::from(observed) != row.predicted {
            bail!(
                "observed budget {observed} differs from predicted {} at W={} w={:?} gamma={:?} L={}",
                row.predicted,
                row.group_size,
                row.w,
                row.gamma,
                row.max_depth
            );
        }
    }
    w.flush()?;
    Ok(())
}

fn serve_env(source: &ConfigSource, listen: &str) -> Result<()> {
    let config = source.load()?;
    let env = config.env_spec()?.build()?;
    let lambda = config.threshold_lambda;
    if listen == "stdio" {
        let stdin = io::stdin().lock();
        return Ok(serve(env.as_ref(), lambda, stdin, io::stdout().lock())?);
    }
    let Some(addr) = listen.strip_prefix("tcp:") else {
        bail!("--listen expects stdio or tcp:host:port, got {listen:?}");
    };
    let listener = TcpListener::bind(addr).with_context(|| format!("binding {addr}"))?;
    log::info!("serving {} on {}", config.preset, listener.local_addr()?);
    // One client at a time; the protocol is strictly request/response.
    for stream in listener.incoming() {
        let stream = stream?;
        stream.set_nodelay(true)?;
        let peer = stream.peer_addr()?;
        log::info!("client {peer} connected");
        let reader = BufReader::new(stream.try_clone()?);
        if let Err(e) = serve(env.as_ref(), lambda, reader, stream) {
            log::warn!("client {peer}: {e}");
        }
    }
    Ok(())
}

fn gradcheck_cmd(source: &ConfigSource, instances: usize, seed: u64) -> Result<()> {
    let config = source.load()?;
    let env = config.env_spec()?.build()?;
    let report = gradcheck::run(&config, env.as_ref(), instances, seed)?;
    println!(
        "{} trees, {} groups; worst relative error: log-prob {:.2e} (tol {:.0e}), objective {:.2e} (tol {:.0e})",
        report.instances,
        report.groups,
        report.worst_log_prob,
        gradcheck::LOG_PROB_TOLERANCE,
        report.worst_objective,
        gradcheck::OBJECTIVE_TOLERANCE
    );
    if !report.passed() {
        bail!("gradient check failed");
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    match &cli.command {
        Command::Run { setup, method } => run(setup, *method),
        Command::Compare { setup } => compare(setup),
        Command::Budget(args) => budget(args),
        Command::Gradcheck {
            source,
            instances,
            seed,
        } => gradcheck_cmd(source, *instances, *seed),
        Command::ServeEnv { source, listen } => serve_env(source, listen),
    }
}

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ipdborrow_cli::commands::{cmd_fit, cmd_simulate, cmd_weights, DEFAULT_SEED};
use ipdborrow_cli::config::{parse_config_file, ResolvedConfig};
use ipdborrow_cli::error::Result;

#[derive(Parser)]
#[command(
    name = "ipdborrow",
    about = "Borrow historical individual patient data through individually weighted power priors",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute per-subject similarity weights and truncation summaries
    Weights(WeightsArgs),
    /// Fit an analysis model under a prior construction via MCMC
    Fit(FitArgs),
    /// Run the operating-characteristics simulation grid
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Configuration file (flat `key = value` lines, dotted section keys)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset file (csv: study_id,arm,outcome[,event],covariates...)
    #[arg(long)]
    data: Option<PathBuf>,
    /// Study id of the concurrent trial (default: first id in the file)
    #[arg(long = "current-study")]
    current_study: Option<String>,
    /// Master random seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Fail (exit 4) when convergence diagnostics fail
    #[arg(long)]
    strict: bool,
}

impl CommonArgs {
    fn overrides(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        if let Some(data) = &self.data {
            out.push(("data".to_string(), data.display().to_string()));
        }
        if let Some(id) = &self.current_study {
            out.push(("current_study".to_string(), id.clone()));
        }
        if let Some(seed) = self.seed {
            out.push(("seed".to_string(), seed.to_string()));
        }
        if let Some(dir) = &self.out {
            out.push(("out".to_string(), dir.display().to_string()));
        }
        if self.strict {
            out.push(("strict".to_string(), "true".to_string()));
        }
        out
    }
}

#[derive(Args)]
struct WeightsArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Weighting route: mahalanobis | model | predictive
    #[arg(long)]
    route: Option<String>,
    /// Truncation quantile in (0, 1)
    #[arg(long)]
    quantile: Option<f64>,
    /// Covariance ridge (default: scale-aware automatic)
    #[arg(long)]
    ridge: Option<f64>,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Analysis model: normal | weibull
    #[arg(long)]
    model: Option<String>,
    /// Prior construction: np | fh | pp | iw | tiw | map
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    /// Weighting route for iw/tiw: mahalanobis | model | predictive
    #[arg(long)]
    route: Option<String>,
    /// Truncation quantile in (0, 1)
    #[arg(long)]
    quantile: Option<f64>,
    /// Also write every posterior draw to draws.csv
    #[arg(long)]
    save_draws: bool,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Comma-separated scenario list
    #[arg(long)]
    scenarios: Option<String>,
    /// Comma-separated method list
    #[arg(long)]
    methods: Option<String>,
    /// Comma-separated concurrent sample sizes
    #[arg(long)]
    sizes: Option<String>,
    /// Replications per cell
    #[arg(long)]
    reps: Option<usize>,
    /// Shifted-component fraction for the partially exchangeable scenarios
    #[arg(long = "mixture-fraction")]
    mixture_fraction: Option<f64>,
}

fn resolve(
    common: &CommonArgs,
    defaults: &[(&str, String)],
    extra: Vec<(String, String)>,
) -> Result<ResolvedConfig> {
    let file = match &common.config {
        Some(path) => parse_config_file(path)?,
        None => BTreeMap::new(),
    };
    let mut overrides = common.overrides();
    overrides.extend(extra);
    Ok(ResolvedConfig::resolve(defaults, file, overrides))
}

fn common_defaults() -> Vec<(&'static str, String)> {
    vec![
        ("seed", DEFAULT_SEED.to_string()),
        ("out", "out".to_string()),
        ("weights.route", "mahalanobis".to_string()),
        ("weights.quantile", "0.05".to_string()),
        ("weights.ridge", "auto".to_string()),
        ("weights.min_category_count", "5".to_string()),
        ("prior.location_variance", "1000000".to_string()),
        ("prior.sigma2_shape", "0.01".to_string()),
        ("prior.sigma2_rate", "0.01".to_string()),
        ("prior.tau_prior", "half-normal".to_string()),
        ("prior.tau_scale", "5".to_string()),
    ]
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Weights(args) => {
            let mut extra = Vec::new();
            if let Some(route) = &args.route {
                extra.push(("weights.route".to_string(), route.clone()));
            }
            if let Some(q) = args.quantile {
                extra.push(("weights.quantile".to_string(), q.to_string()));
            }
            if let Some(r) = args.ridge {
                extra.push(("weights.ridge".to_string(), r.to_string()));
            }
            let config = resolve(&args.common, &common_defaults(), extra)?;
            cmd_weights(&config)
        }
        Command::Fit(args) => {
            let mut defaults = common_defaults();
            defaults.extend([
                ("model.kind", "normal".to_string()),
                ("model.method", "np".to_string()),
                ("model.pp_grid", "1001".to_string()),
                ("sampler.chains", "4".to_string()),
                ("sampler.warmup", "2000".to_string()),
                ("sampler.iters", "5000".to_string()),
                ("sampler.step_scale", "0.5".to_string()),
                ("sampler.target_accept", "0.234".to_string()),
            ]);
            let mut extra = Vec::new();
            if let Some(model) = &args.model {
                extra.push(("model.kind".to_string(), model.clone()));
            }
            if let Some(method) = &args.method {
                extra.push(("model.method".to_string(), method.clone()));
            }
            if let Some(chains) = args.chains {
                extra.push(("sampler.chains".to_string(), chains.to_string()));
            }
            if let Some(warmup) = args.warmup {
                extra.push(("sampler.warmup".to_string(), warmup.to_string()));
            }
            if let Some(iters) = args.iters {
                extra.push(("sampler.iters".to_string(), iters.to_string()));
            }
            if let Some(route) = &args.route {
                extra.push(("weights.route".to_string(), route.clone()));
            }
            if let Some(q) = args.quantile {
                extra.push(("weights.quantile".to_string(), q.to_string()));
            }
            let config = resolve(&args.common, &defaults, extra)?;
            cmd_fit(&config, args.save_draws)
        }
        Command::Simulate(args) => {
            let mut defaults = common_defaults();
            defaults.extend([
                (
                    "sim.scenarios",
                    "exchangeable,partial1,partial2,unex1,unex2,unex3".to_string(),
                ),
                ("sim.methods", "np,fh,pp,iw,tiw,map".to_string()),
                ("sim.sizes", "25,50,100".to_string()),
                ("sim.reps", "200".to_string()),
                ("sim.mixture_fraction", "0.5".to_string()),
                ("sim.n_historical", "100".to_string()),
                ("sim.theta", "0.5".to_string()),
                ("sim.beta", "1".to_string()),
                ("sim.intercept", "0".to_string()),
                ("model.pp_grid", "1001".to_string()),
                ("sampler.chains", "4".to_string()),
                ("sampler.warmup", "800".to_string()),
                ("sampler.iters", "2500".to_string()),
            ]);
            let mut extra = Vec::new();
            if let Some(scenarios) = &args.scenarios {
                extra.push(("sim.scenarios".to_string(), scenarios.clone()));
            }
            if let Some(methods) = &args.methods {
                extra.push(("sim.methods".to_string(), methods.clone()));
            }
            if let Some(sizes) = &args.sizes {
                extra.push(("sim.sizes".to_string(), sizes.clone()));
            }
            if let Some(reps) = args.reps {
                extra.push(("sim.reps".to_string(), reps.to_string()));
            }
            if let Some(fraction) = args.mixture_fraction {
                extra.push(("sim.mixture_fraction".to_string(), fraction.to_string()));
            }
            let config = resolve(&args.common, &defaults, extra)?;
            cmd_simulate(&config)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code.clamp(0, 255) as u8)
        }
    }
}

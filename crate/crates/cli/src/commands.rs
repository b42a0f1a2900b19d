//! The three subcommands: `weights`, `fit`, `simulate`.

use std::path::{Path, PathBuf};

use ipdborrow::data::{validate_collection, validate_survival_outcomes, Violation};
use ipdborrow::fit::{fit_model, AnalysisModel, ModelSpec};
use ipdborrow::models::{
    analysis_covariates, default_similarity_ridge, Hyperprior, PriorKind, TauPrior,
    WeibullModelParams, WeightRoute, WeightSettings,
};
use ipdborrow::sampler::SamplerConfig;
use ipdborrow::simulation::{run_grid, GridConfig, MethodSettings, MetricsRow, Scenario};
use ipdborrow::stats;
use ipdborrow::weighting::{mahalanobis_weights, model_weights, WeightAssignment, WeightMode};

use crate::config::ResolvedConfig;
use crate::dataio::{ingest, Dataset};
use crate::error::{CliError, Result, EXIT_VALIDATION};
use crate::report::{format_float, format_opt, Report};

pub const DEFAULT_SEED: u64 = 20240901;

fn out_dir(config: &ResolvedConfig) -> PathBuf {
    PathBuf::from(config.get("out").unwrap_or("out"))
}

fn seed_of(config: &ResolvedConfig) -> Result<u64> {
    Ok(config.get_u64("seed")?.unwrap_or(DEFAULT_SEED))
}

fn print_violations(dataset: &Dataset, violations: &[Violation]) {
    for v in violations {
        match v
            .record_index
            .and_then(|i| dataset.line_numbers.get(&(v.study_id.clone(), i)))
        {
            Some(line) => eprintln!("line {line}: {v}"),
            None => eprintln!("{v}"),
        }
    }
}

/// Ingests and validates; any violation is printed with its line number and
/// fails with the validation exit code.
pub fn load_validated(config: &ResolvedConfig, survival: bool) -> Result<Dataset> {
    let data_path = PathBuf::from(config.require("data")?);
    let dataset = ingest(&data_path, config, config.get("current_study"))?;
    let mut violations = validate_collection(&dataset.collection, &dataset.schema);
    if survival {
        violations.extend(validate_survival_outcomes(&dataset.collection));
    }
    if !violations.is_empty() {
        print_violations(&dataset, &violations);
        return Err(CliError {
            code: EXIT_VALIDATION,
            message: format!("{} validation violation(s)", violations.len()),
        });
    }
    Ok(dataset)
}

fn weight_route(config: &ResolvedConfig) -> Result<WeightRoute> {
    WeightRoute::parse(config.get("weights.route").unwrap_or("mahalanobis")).map_err(Into::into)
}

fn weight_settings(config: &ResolvedConfig) -> Result<WeightSettings> {
    let quantile = config.get_f64("weights.quantile")?.unwrap_or(0.05);
    let ridge = match config.get("weights.ridge") {
        None => None,
        Some("auto") => None,
        Some(v) => Some(v.parse::<f64>().map_err(|_| {
            CliError::config(format!("configuration `weights.ridge` must be a number or `auto`, got `{v}`"))
        })?),
    };
    Ok(WeightSettings {
        route: weight_route(config)?,
        quantile,
        ridge,
        min_category_count: config.get_usize("weights.min_category_count")?.unwrap_or(5),
    })
}

fn hyperprior(config: &ResolvedConfig) -> Result<Hyperprior> {
    let tau_scale = config.get_f64("prior.tau_scale")?.unwrap_or(5.0);
    let tau_prior = match config.get("prior.tau_prior").unwrap_or("half-normal") {
        "half-normal" => TauPrior::HalfNormal(tau_scale),
        "half-cauchy" => TauPrior::HalfCauchy(tau_scale),
        other => {
            return Err(CliError::config(format!(
                "configuration `prior.tau_prior` must be half-normal or half-cauchy, got `{other}`"
            )))
        }
    };
    Ok(Hyperprior {
        location_variance: config.get_f64("prior.location_variance")?.unwrap_or(1e6),
        sigma2_shape: config.get_f64("prior.sigma2_shape")?.unwrap_or(0.01),
        sigma2_rate: config.get_f64("prior.sigma2_rate")?.unwrap_or(0.01),
        tau_prior,
    })
}

fn sampler_config(config: &ResolvedConfig, seed: u64) -> Result<SamplerConfig> {
    let defaults = SamplerConfig::default();
    let chains = config.get_usize("sampler.chains")?.unwrap_or(defaults.chains);
    if chains == 0 {
        return Err(CliError::config("sampler.chains must be at least 1".to_string()));
    }
    Ok(SamplerConfig {
        chains,
        warmup_iterations: config
            .get_usize("sampler.warmup")?
            .unwrap_or(defaults.warmup_iterations),
        sampling_iterations: config
            .get_usize("sampler.iters")?
            .unwrap_or(defaults.sampling_iterations),
        initial_step_scale: config
            .get_f64("sampler.step_scale")?
            .unwrap_or(defaults.initial_step_scale),
        target_acceptance: config
            .get_f64("sampler.target_accept")?
            .unwrap_or(defaults.target_acceptance),
        seed,
    })
}

/// `weights`: per-subject raw scores, weights, truncated weights and the
/// threshold, plus per-study surviving-fraction summaries.
pub fn cmd_weights(config: &ResolvedConfig) -> Result<()> {
    let dataset = load_validated(config, false)?;
    let settings = weight_settings(config)?;
    if !(settings.quantile > 0.0 && settings.quantile < 1.0) {
        return Err(CliError::config(format!(
            "weights.quantile must lie in (0, 1), got {}",
            settings.quantile
        )));
    }
    let ridge = match settings.ridge {
        Some(r) => r,
        None => default_similarity_ridge(&dataset.collection, &dataset.schema)?,
    };
    let assignments: Vec<WeightAssignment> = match settings.route {
        WeightRoute::Mahalanobis => mahalanobis_weights(
            &dataset.collection,
            &dataset.schema,
            settings.quantile,
            ridge,
        )?,
        WeightRoute::SimilarityModel => model_weights(
            &dataset.collection,
            &dataset.schema,
            settings.quantile,
            WeightMode::EmpiricalBayes,
            ridge,
            settings.min_category_count,
        )?,
        WeightRoute::PosteriorPredictive => model_weights(
            &dataset.collection,
            &dataset.schema,
            settings.quantile,
            WeightMode::PosteriorPredictive,
            ridge,
            settings.min_category_count,
        )?,
    };

    let seed = seed_of(config)?;
    let out = out_dir(config);
    let mut report = Report::new("weights", config, seed);
    report.row(["study_id", "row", "raw_score", "weight", "truncated_weight", "threshold"]);
    for a in &assignments {
        report.row([
            a.subject.study_id.clone(),
            a.subject.index.to_string(),
            format_float(a.raw_score),
            format_float(a.weight),
            format_float(a.truncated_weight),
            format_opt(a.threshold),
        ]);
    }
    report.write(&out.join("weights.csv"))?;

    let mut summary = Report::new("weights", config, seed);
    summary.row([
        "study_id",
        "n",
        "n_scored",
        "n_surviving",
        "surviving_fraction",
        "is_concurrent",
    ]);
    let mut study_ids: Vec<&str> = vec![dataset.collection.concurrent_id.as_str()];
    study_ids.extend(dataset.collection.historical.iter().map(|h| h.id.as_str()));
    for id in study_ids {
        let of_study: Vec<&WeightAssignment> = assignments
            .iter()
            .filter(|a| a.subject.study_id == id)
            .collect();
        let scored: Vec<&&WeightAssignment> =
            of_study.iter().filter(|a| !a.raw_score.is_nan()).collect();
        let surviving = scored.iter().filter(|a| a.truncated_weight > 0.0).count();
        let fraction = if scored.is_empty() {
            f64::NAN
        } else {
            surviving as f64 / scored.len() as f64
        };
        summary.row([
            id.to_string(),
            of_study.len().to_string(),
            scored.len().to_string(),
            surviving.to_string(),
            format_float(fraction),
            (id == dataset.collection.concurrent_id).to_string(),
        ]);
    }
    summary.write(&out.join("weights_summary.csv"))?;
    eprintln!(
        "wrote {} and {}",
        out.join("weights.csv").display(),
        out.join("weights_summary.csv").display()
    );
    Ok(())
}

/// `fit`: posterior summary table, hazard-ratio and survival curves for the
/// Weibull model, and raw draws on request.
pub fn cmd_fit(config: &ResolvedConfig, save_draws: bool) -> Result<()> {
    let model = AnalysisModel::parse(config.get("model.kind").unwrap_or("normal"))?;
    let method = PriorKind::parse(config.get("model.method").unwrap_or("np"))?;
    let dataset = load_validated(config, model == AnalysisModel::WeibullPh)?;
    let seed = seed_of(config)?;
    let spec = ModelSpec {
        model,
        method,
        weight_settings: Some(weight_settings(config)?),
        hyperprior: hyperprior(config)?,
        pp_grid: config.get_usize("model.pp_grid")?.unwrap_or(1001),
    };
    let sampler = sampler_config(config, seed)?;
    let output = fit_model(&dataset.collection, &dataset.schema, &spec, &sampler)?;

    let out = out_dir(config);
    let mut report = Report::new("fit", config, seed);
    report.row(["param", "mean", "sd", "q2.5", "q97.5", "rhat", "ess"]);
    for summary in output.draws.summaries() {
        report.row([
            summary.name.clone(),
            format_float(summary.mean),
            format_float(summary.sd),
            format_float(summary.lower),
            format_float(summary.upper),
            format_opt(summary.rhat),
            format_float(summary.ess),
        ]);
    }
    if let Some(power) = output.prior.pp_power {
        report.row([
            "pp_power".to_string(),
            format_float(power),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
        ]);
    }
    if model == AnalysisModel::WeibullPh {
        // Hazard ratio exp(theta): interval endpoints are exactly the
        // exponentials of the theta interval endpoints.
        let idx = output.draws.param_index("theta").expect("theta is sampled");
        let theta = output.draws.summary(idx);
        let hr_draws: Vec<f64> = output.draws.pooled(idx).iter().map(|t| t.exp()).collect();
        let hr_mean = stats::mean(&hr_draws);
        let hr_sd = stats::sample_variance(&hr_draws).sqrt();
        report.row([
            "hazard_ratio".to_string(),
            format_float(hr_mean),
            format_float(hr_sd),
            format_float(theta.lower.exp()),
            format_float(theta.upper.exp()),
            format_opt(theta.rhat),
            format_float(theta.ess),
        ]);
    }
    report.write(&out.join("fit_summary.csv"))?;
    eprintln!("wrote {}", out.join("fit_summary.csv").display());

    if model == AnalysisModel::WeibullPh {
        let mean_of = |name: &str| {
            let idx = output.draws.param_index(name).expect("sampled parameter");
            output.draws.summary(idx).mean
        };
        let beta: Vec<f64> = output
            .draws
            .names
            .iter()
            .filter(|n| n.starts_with("beta_"))
            .map(|n| mean_of(n))
            .collect();
        let params = WeibullModelParams {
            alpha: mean_of("alpha"),
            delta: mean_of("delta"),
            beta,
            theta: mean_of("theta"),
        };
        // Reference covariate profile: concurrent mean of the analysis design.
        let designs: Vec<Vec<f64>> = dataset
            .collection
            .concurrent
            .iter()
            .map(|r| analysis_covariates(r, &dataset.schema))
            .collect::<ipdborrow::Result<_>>()?;
        let dim = designs.first().map(|d| d.len()).unwrap_or(0);
        let profile: Vec<f64> = (0..dim)
            .map(|j| designs.iter().map(|d| d[j]).sum::<f64>() / designs.len() as f64)
            .collect();
        let t_max = dataset
            .collection
            .concurrent
            .iter()
            .map(|r| r.outcome)
            .fold(0.0f64, f64::max);
        let mut curves = Report::new("fit", config, seed);
        curves.row(["arm", "time", "survival"]);
        for arm in [0u8, 1] {
            for step in 0..=100 {
                let t = t_max * step as f64 / 100.0;
                let s = if t == 0.0 {
                    1.0
                } else {
                    params.survival(t, &profile, f64::from(arm))
                };
                curves.row([arm.to_string(), format_float(t), format_float(s)]);
            }
        }
        curves.write(&out.join("survival_curves.csv"))?;
        eprintln!("wrote {}", out.join("survival_curves.csv").display());
    }

    if save_draws {
        let mut draws = Report::new("fit", config, seed);
        let mut header = vec!["chain".to_string(), "iteration".to_string()];
        header.extend(output.draws.names.iter().cloned());
        draws.row(header);
        for chain in 0..output.draws.n_chains {
            for iter in 0..output.draws.n_iterations {
                let mut row = vec![chain.to_string(), iter.to_string()];
                for p in 0..output.draws.n_params() {
                    row.push(format_float(output.draws.series(chain, p)[iter]));
                }
                draws.row(row);
            }
        }
        draws.write(&out.join("draws.csv"))?;
        eprintln!("wrote {}", out.join("draws.csv").display());
    }

    for warning in &output.diagnostics.warnings {
        eprintln!("warning: {warning}");
    }
    let strict = config.get_bool("strict")?.unwrap_or(false);
    if strict && !output.diagnostics.converged {
        return Err(CliError::numerical(
            "convergence diagnostics failed under --strict (split R-hat > 1.05)".to_string(),
        ));
    }
    Ok(())
}

fn parse_list<T>(raw: &str, what: &str, parse: impl Fn(&str) -> ipdborrow::Result<T>) -> Result<Vec<T>> {
    let items: Vec<T> = raw
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse(s.trim()).map_err(CliError::from))
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(CliError::config(format!("empty {what} list")));
    }
    Ok(items)
}

/// `simulate`: the factorial metrics grid plus a long-format file for
/// plotting.
pub fn cmd_simulate(config: &ResolvedConfig) -> Result<()> {
    let seed = seed_of(config)?;
    let scenarios = parse_list(
        config.get("sim.scenarios").unwrap_or("exchangeable,partial1,partial2,unex1,unex2,unex3"),
        "scenario",
        Scenario::parse,
    )?;
    let methods = parse_list(
        config.get("sim.methods").unwrap_or("np,fh,pp,iw,tiw,map"),
        "method",
        PriorKind::parse,
    )?;
    let sizes: Vec<usize> = config
        .get("sim.sizes")
        .unwrap_or("25,50,100")
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| CliError::config(format!("bad sample size `{s}`")))
        })
        .collect::<Result<_>>()?;
    if sizes.is_empty() {
        return Err(CliError::config("empty sizes list".to_string()));
    }

    let sim_sampler_defaults = MethodSettings::default().sampler;
    let settings = MethodSettings {
        quantile: config.get_f64("weights.quantile")?.unwrap_or(0.05),
        hyperprior: hyperprior(config)?,
        sampler: SamplerConfig {
            chains: config
                .get_usize("sampler.chains")?
                .unwrap_or(sim_sampler_defaults.chains),
            warmup_iterations: config
                .get_usize("sampler.warmup")?
                .unwrap_or(sim_sampler_defaults.warmup_iterations),
            sampling_iterations: config
                .get_usize("sampler.iters")?
                .unwrap_or(sim_sampler_defaults.sampling_iterations),
            ..sim_sampler_defaults
        },
        pp_grid: config.get_usize("model.pp_grid")?.unwrap_or(1001),
    };
    let grid = GridConfig {
        scenarios,
        methods,
        sizes,
        replications: config.get_usize("sim.reps")?.unwrap_or(200),
        mixture_fraction: config.get_f64("sim.mixture_fraction")?.unwrap_or(0.5),
        n_historical: config.get_usize("sim.n_historical")?.unwrap_or(100),
        theta_true: config.get_f64("sim.theta")?.unwrap_or(0.5),
        beta_true: config.get_f64("sim.beta")?.unwrap_or(1.0),
        intercept_true: config.get_f64("sim.intercept")?.unwrap_or(0.0),
        base_seed: seed,
        settings,
    };

    let total = grid.scenarios.len() * grid.methods.len() * grid.sizes.len();
    let mut done = 0usize;
    let rows = run_grid(&grid, |row| {
        done += 1;
        match (&row.metrics, &row.error) {
            (Some(m), _) => eprintln!(
                "[{done}/{total}] {} {} N_c={}: power={:.3} (se {:.3}) bias={:.3} excluded={}",
                row.scenario.label(),
                row.method.label(),
                row.n_concurrent,
                m.power,
                m.power_se,
                m.bias,
                m.excluded_replications
            ),
            (None, Some(e)) => eprintln!(
                "[{done}/{total}] {} {} N_c={}: FAILED ({e})",
                row.scenario.label(),
                row.method.label(),
                row.n_concurrent
            ),
            (None, None) => {}
        }
    });

    let out = out_dir(config);
    let mut metrics = Report::new("simulate", config, seed);
    metrics.row([
        "scenario",
        "method",
        "n_concurrent",
        "replications",
        "excluded",
        "power",
        "power_se",
        "rmse",
        "rmse_se",
        "bias",
        "bias_se",
        "ci_width",
        "ci_width_se",
        "error",
    ]);
    let mut long = Report::new("simulate", config, seed);
    long.row(["scenario", "method", "n_concurrent", "metric", "value", "mc_se"]);
    for row in &rows {
        write_metrics_row(&mut metrics, &mut long, row);
    }
    metrics.write(&out.join("metrics.csv"))?;
    long.write(&out.join("metrics_long.csv"))?;
    eprintln!(
        "wrote {} and {}",
        out.join("metrics.csv").display(),
        out.join("metrics_long.csv").display()
    );
    Ok(())
}

fn write_metrics_row(metrics: &mut Report, long: &mut Report, row: &MetricsRow) {
    let scenario = row.scenario.label().to_string();
    let method = row.method.label().to_string();
    let n = row.n_concurrent.to_string();
    match &row.metrics {
        Some(m) => {
            metrics.row([
                scenario.clone(),
                method.clone(),
                n.clone(),
                m.used_replications.to_string(),
                m.excluded_replications.to_string(),
                format_float(m.power),
                format_float(m.power_se),
                format_float(m.rmse),
                format_float(m.rmse_se),
                format_float(m.bias),
                format_float(m.bias_se),
                format_float(m.ci_width),
                format_float(m.ci_width_se),
                row.error.clone().unwrap_or_default(),
            ]);
            for (name, value, se) in [
                ("power", m.power, m.power_se),
                ("rmse", m.rmse, m.rmse_se),
                ("bias", m.bias, m.bias_se),
                ("ci_width", m.ci_width, m.ci_width_se),
            ] {
                long.row([
                    scenario.clone(),
                    method.clone(),
                    n.clone(),
                    name.to_string(),
                    format_float(value),
                    format_float(se),
                ]);
            }
        }
        None => {
            let mut fields = vec![scenario, method, n];
            fields.extend(std::iter::repeat(String::new()).take(10));
            fields.push(row.error.clone().unwrap_or_default());
            metrics.row(fields);
        }
    }
}

/// Canonical dataset emission used by tests and tooling (see `dataio`).
pub fn emit_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    crate::dataio::write_dataset(dataset, path)
}

//! Ties weight resolution, kernels and sampling together for one analysis.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{CovariateSchema, StudyCollection};
use crate::error::{Error, Result};
use crate::models::{
    analysis_covariate_names, CollapsedMapModel, Hyperprior, NormalModelParams,
    PreparedNormalModel, PreparedWeibullModel, PriorConstruction, PriorKind, WeibullModelParams,
    WeightSettings,
};
use crate::sampler::{
    diagnostics, optimize_init, sample, DiagnosticsReport, ParamSpace, PosteriorDraws,
    SamplerConfig, Transform,
};
use crate::stats;

/// Which analysis model the outcome follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnalysisModel {
    NormalLinear,
    WeibullPh,
}

impl AnalysisModel {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "normal" => Ok(AnalysisModel::NormalLinear),
            "weibull" => Ok(AnalysisModel::WeibullPh),
            other => Err(Error::Config(format!(
                "unknown model `{other}` (expected normal|weibull)"
            ))),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            AnalysisModel::NormalLinear => "normal",
            AnalysisModel::WeibullPh => "weibull",
        }
    }
}

/// Fully specified analysis: model, prior construction and settings.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub model: AnalysisModel,
    pub method: PriorKind,
    /// Required for IW/TIW.
    pub weight_settings: Option<WeightSettings>,
    pub hyperprior: Hyperprior,
    /// Grid resolution of the power-prior criterion search.
    pub pp_grid: usize,
}

impl ModelSpec {
    pub fn new(model: AnalysisModel, method: PriorKind) -> Self {
        Self {
            model,
            method,
            weight_settings: Some(WeightSettings::default()),
            hyperprior: Hyperprior::default(),
            pp_grid: 1001,
        }
    }
}

/// Draws plus the resolved prior and convergence report.
#[derive(Debug)]
pub struct FitOutput {
    pub draws: PosteriorDraws,
    pub prior: PriorConstruction,
    pub diagnostics: DiagnosticsReport,
}

/// Resolves the prior construction, initializes at a penalized-likelihood
/// optimum found by coordinate ascent, and samples the posterior.
pub fn fit_model(
    collection: &StudyCollection,
    schema: &CovariateSchema,
    spec: &ModelSpec,
    config: &SamplerConfig,
) -> Result<FitOutput> {
    if spec.model == AnalysisModel::WeibullPh {
        match spec.method {
            PriorKind::PowerPrior => {
                return Err(Error::Config(
                    "the power-prior criterion has a closed form for the normal model only; \
                     use np|fh|iw|tiw with the Weibull model"
                        .to_string(),
                ))
            }
            PriorKind::MetaAnalyticPredictive => {
                return Err(Error::Config(
                    "the hierarchical MAP prior is implemented for the normal model only"
                        .to_string(),
                ))
            }
            _ => {}
        }
    }
    let prior = PriorConstruction::build(
        spec.method,
        collection,
        schema,
        spec.weight_settings.as_ref(),
        spec.hyperprior.clone(),
        spec.pp_grid,
    )?;
    match spec.model {
        AnalysisModel::NormalLinear => {
            if spec.method == PriorKind::MetaAnalyticPredictive {
                fit_map(collection, schema, prior, config)
            } else {
                fit_normal(collection, schema, prior, config)
            }
        }
        AnalysisModel::WeibullPh => fit_weibull(collection, schema, prior, config),
    }
}

fn beta_names(schema: &CovariateSchema) -> Vec<String> {
    analysis_covariate_names(schema)
        .into_iter()
        .map(|n| format!("beta_{n}"))
        .collect()
}

fn fit_normal(
    collection: &StudyCollection,
    schema: &CovariateSchema,
    prior: PriorConstruction,
    config: &SamplerConfig,
) -> Result<FitOutput> {
    let model = PreparedNormalModel::new(collection, schema, &prior)?;
    let p = model.n_covariates;
    let mut names = vec!["theta".to_string(), "beta0".to_string()];
    names.extend(beta_names(schema));
    names.push("sigma2".to_string());
    let mut transforms = vec![Transform::Identity; 2 + p];
    transforms.push(Transform::LogPositive);
    let space = ParamSpace::new(names, transforms);

    let unpack = move |v: &[f64]| NormalModelParams {
        theta: v[0],
        beta0: v[1],
        beta: v[2..2 + p].to_vec(),
        sigma2: v[2 + p],
    };
    let kernel = move |v: &[f64]| model.log_kernel(&unpack(v));

    let outcomes: Vec<f64> = collection.concurrent.iter().map(|r| r.outcome).collect();
    let mut init = vec![0.0; 2 + p + 1];
    init[1] = stats::mean(&outcomes);
    init[2 + p] = if outcomes.len() > 1 {
        stats::sample_variance(&outcomes).max(1e-6)
    } else {
        1.0
    };
    let init = optimize_init(&kernel, &init, &space)?;
    let draws = sample(&kernel, &init, &space, config)?;
    let report = diagnostics(&draws);
    Ok(FitOutput {
        draws,
        prior,
        diagnostics: report,
    })
}

fn fit_map(
    collection: &StudyCollection,
    schema: &CovariateSchema,
    prior: PriorConstruction,
    config: &SamplerConfig,
) -> Result<FitOutput> {
    // The Gaussian location block is integrated out analytically; the walk
    // runs on (sigma2, tau2) alone and locations are reconstructed by exact
    // conditional draws, which sidesteps the hierarchical funnel entirely.
    let model = CollapsedMapModel::new(collection, schema, prior.hyperprior.clone())?;
    let space = ParamSpace::new(
        vec!["sigma2".to_string(), "tau2".to_string()],
        vec![Transform::LogPositive, Transform::LogPositive],
    );
    let kernel = |v: &[f64]| model.log_marginal(v[0], v[1]);

    let outcomes: Vec<f64> = collection.concurrent.iter().map(|r| r.outcome).collect();
    let sigma2_init = if outcomes.len() > 1 {
        stats::sample_variance(&outcomes).max(1e-6)
    } else {
        1.0
    };
    let init = optimize_init(&kernel, &[sigma2_init, 1.0], &space)?;
    let hyper_draws = sample(&kernel, &init, &space, config)?;

    // Reconstruct the location block draw by draw on a dedicated
    // deterministic stream.
    let location_dim = model.dim();
    let mut names = model.location_names.clone();
    names.push("sigma2".to_string());
    names.push("tau2".to_string());
    let n_params = names.len();
    let iters = hyper_draws.n_iterations;
    let mut values = vec![0.0; hyper_draws.n_chains * n_params * iters];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(u64::MAX);
    let mut noise = DVector::zeros(location_dim);
    for chain in 0..hyper_draws.n_chains {
        let sigma2_series = hyper_draws.series(chain, 0).to_vec();
        let tau2_series = hyper_draws.series(chain, 1).to_vec();
        for iter in 0..iters {
            for i in 0..location_dim {
                noise[i] = rng.sample(StandardNormal);
            }
            let location =
                model.conditional_draw(sigma2_series[iter], tau2_series[iter], &noise)?;
            for p in 0..location_dim {
                values[(chain * n_params + p) * iters + iter] = location[p];
            }
            values[(chain * n_params + location_dim) * iters + iter] = sigma2_series[iter];
            values[(chain * n_params + location_dim + 1) * iters + iter] = tau2_series[iter];
        }
    }
    let draws = PosteriorDraws::from_raw(
        names,
        hyper_draws.n_chains,
        iters,
        values,
        hyper_draws.acceptance.clone(),
        hyper_draws.nonfinite_proposals,
    );
    let report = diagnostics(&draws);
    Ok(FitOutput {
        draws,
        prior,
        diagnostics: report,
    })
}

fn fit_weibull(
    collection: &StudyCollection,
    schema: &CovariateSchema,
    prior: PriorConstruction,
    config: &SamplerConfig,
) -> Result<FitOutput> {
    let model = PreparedWeibullModel::new(collection, schema, &prior)?;
    let p = model.n_covariates;
    let mut names = vec![
        "theta".to_string(),
        "alpha".to_string(),
        "delta".to_string(),
    ];
    names.extend(beta_names(schema));
    let mut transforms = vec![Transform::Identity; names.len()];
    transforms[1] = Transform::LogPositive;
    let space = ParamSpace::new(names, transforms);

    let unpack = move |v: &[f64]| WeibullModelParams {
        theta: v[0],
        alpha: v[1],
        delta: v[2],
        beta: v[3..3 + p].to_vec(),
    };
    let kernel = move |v: &[f64]| model.log_kernel(&unpack(v));

    // Exponential-rate starting point: log(events / total time).
    let total_time: f64 = collection.concurrent.iter().map(|r| r.outcome).sum();
    let events: f64 = collection
        .concurrent
        .iter()
        .map(|r| r.event.map(|e| f64::from(e.min(1))).unwrap_or(1.0))
        .sum();
    let mut init = vec![0.0; 3 + p];
    init[1] = 1.0;
    init[2] = ((events.max(0.5)) / total_time.max(1e-9)).ln();

    let init = optimize_init(&kernel, &init, &space)?;
    let draws = sample(&kernel, &init, &space, config)?;
    let report = diagnostics(&draws);
    Ok(FitOutput {
        draws,
        prior,
        diagnostics: report,
    })
}

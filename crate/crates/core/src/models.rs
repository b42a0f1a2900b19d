//! Log-posterior kernels for the two analysis models under the six prior
//! constructions.
//!
//! The normal-linear model regresses the outcome on an intercept, the
//! analysis covariates and the treatment indicator; historical subjects
//! enter the kernel with their individual likelihood power and no treatment
//! term. The Weibull model is proportional hazards: the linear predictor
//! `eta = delta + x beta + z theta` is the LOG of the hazard rate, i.e.
//! `h(t) = alpha t^(alpha-1) exp(eta)`, which makes the hazard ratio between
//! arms exactly `exp(theta)`. Historical terms are raised to
//! `weight * (1 - z)`, so historical treatment-arm subjects contribute
//! exactly zero without being filtered from the data.
//!
//! Prior constructions:
//!
//! * `NP` — historical powers all 0;
//! * `FH` — all 1;
//! * `PP` — a single study-level power chosen by the marginal-likelihood
//!   criterion ([`optimal_power`]);
//! * `IW` — per-subject similarity weights;
//! * `TIW` — the same weights truncated at the threshold `rho`;
//! * `MAP` — hierarchical study intercepts with a common mean and variance
//!   (not weight-based; dispatches to [`map_log_kernel`]).

use nalgebra::{DMatrix, DVector};
use std::collections::HashMap;

use crate::data::{CovariateSchema, StudyCollection, SubjectRecord};
use crate::error::{Error, Result};
use crate::stats::log_normal_pdf;
use crate::weighting::{self, WeightAssignment, WeightMode};

const LN_2PI: f64 = 1.837877066409345483560659472811;

/// Parameters of the normal-linear analysis model.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalModelParams {
    pub theta: f64,
    pub beta0: f64,
    pub beta: Vec<f64>,
    pub sigma2: f64,
}

/// Parameters of the hierarchical (meta-analytic predictive) normal model:
/// per-study intercepts with common mean `mu_delta` and variance `tau2`.
/// The concurrent intercept `delta_concurrent` plays the role of `beta0`.
#[derive(Debug, Clone, PartialEq)]
pub struct MapModelParams {
    pub theta: f64,
    pub beta: Vec<f64>,
    pub sigma2: f64,
    pub delta_concurrent: f64,
    pub delta_historical: Vec<f64>,
    pub mu_delta: f64,
    pub tau2: f64,
}

/// Parameters of the Weibull proportional-hazards model.
#[derive(Debug, Clone, PartialEq)]
pub struct WeibullModelParams {
    /// Shape; must be positive.
    pub alpha: f64,
    /// Baseline log-rate intercept.
    pub delta: f64,
    pub beta: Vec<f64>,
    pub theta: f64,
}

impl WeibullModelParams {
    fn linear_predictor(&self, covariates: &[f64], z: f64) -> f64 {
        self.delta
            + covariates
                .iter()
                .zip(&self.beta)
                .map(|(x, b)| x * b)
                .sum::<f64>()
            + self.theta * z
    }

    /// Hazard `alpha t^(alpha-1) exp(eta)`.
    pub fn hazard(&self, t: f64, covariates: &[f64], z: f64) -> f64 {
        self.alpha * t.powf(self.alpha - 1.0) * self.linear_predictor(covariates, z).exp()
    }

    /// Survival function `exp(-t^alpha exp(eta))`.
    pub fn survival(&self, t: f64, covariates: &[f64], z: f64) -> f64 {
        (-t.powf(self.alpha) * self.linear_predictor(covariates, z).exp()).exp()
    }
}

/// Prior on the hyperparameters shared by all kernels: independent
/// zero-centered normals with a large variance on location parameters
/// (truncated at zero for the Weibull shape), inverse-gamma on the normal
/// model's variance, and a weakly informative prior on the MAP
/// between-study scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperprior {
    /// Variance of the zero-centered normal on each location parameter;
    /// `f64::INFINITY` gives a flat prior.
    pub location_variance: f64,
    pub sigma2_shape: f64,
    pub sigma2_rate: f64,
    pub tau_prior: TauPrior,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TauPrior {
    /// Half-normal on tau with the given scale (default, scale 5).
    HalfNormal(f64),
    /// Half-Cauchy on tau with the given scale (sensitivity alternative).
    HalfCauchy(f64),
}

impl Default for Hyperprior {
    fn default() -> Self {
        Self {
            location_variance: 1e6,
            sigma2_shape: 0.01,
            sigma2_rate: 0.01,
            tau_prior: TauPrior::HalfNormal(5.0),
        }
    }
}

impl Hyperprior {
    /// Flat prior on location parameters (used by likelihood-only tests).
    pub fn flat() -> Self {
        Self {
            location_variance: f64::INFINITY,
            ..Default::default()
        }
    }

    fn log_location(&self, value: f64) -> f64 {
        if self.location_variance.is_finite() {
            -value * value / (2.0 * self.location_variance)
        } else {
            0.0
        }
    }

    fn log_sigma2(&self, sigma2: f64) -> f64 {
        // Inverse-gamma(shape, rate) up to constants.
        -(self.sigma2_shape + 1.0) * sigma2.ln() - self.sigma2_rate / sigma2
    }

    fn log_tau2(&self, tau2: f64) -> f64 {
        // Density of tau^2 induced by the prior on tau, up to constants:
        // p(tau^2) = p(tau) / (2 tau).
        match self.tau_prior {
            TauPrior::HalfNormal(scale) => -tau2 / (2.0 * scale * scale) - 0.5 * tau2.ln(),
            TauPrior::HalfCauchy(scale) => {
                -(1.0 + tau2 / (scale * scale)).ln() - 0.5 * tau2.ln()
            }
        }
    }
}

/// The six prior constructions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PriorKind {
    NoPrior,
    FullHistory,
    PowerPrior,
    IndividuallyWeighted,
    TruncatedIndividuallyWeighted,
    MetaAnalyticPredictive,
}

impl PriorKind {
    pub const ALL: [PriorKind; 6] = [
        PriorKind::NoPrior,
        PriorKind::FullHistory,
        PriorKind::PowerPrior,
        PriorKind::IndividuallyWeighted,
        PriorKind::TruncatedIndividuallyWeighted,
        PriorKind::MetaAnalyticPredictive,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            PriorKind::NoPrior => "NP",
            PriorKind::FullHistory => "FH",
            PriorKind::PowerPrior => "PP",
            PriorKind::IndividuallyWeighted => "IW",
            PriorKind::TruncatedIndividuallyWeighted => "TIW",
            PriorKind::MetaAnalyticPredictive => "MAP",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "np" => Ok(PriorKind::NoPrior),
            "fh" => Ok(PriorKind::FullHistory),
            "pp" => Ok(PriorKind::PowerPrior),
            "iw" => Ok(PriorKind::IndividuallyWeighted),
            "tiw" => Ok(PriorKind::TruncatedIndividuallyWeighted),
            "map" => Ok(PriorKind::MetaAnalyticPredictive),
            other => Err(Error::Config(format!(
                "unknown method `{other}` (expected np|fh|pp|iw|tiw|map)"
            ))),
        }
    }
}

/// Which weighting route feeds the IW/TIW priors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightRoute {
    Mahalanobis,
    /// Similarity model scored at plugin estimates.
    SimilarityModel,
    /// Similarity model integrated over the conjugate posterior.
    PosteriorPredictive,
}

impl WeightRoute {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mahalanobis" => Ok(WeightRoute::Mahalanobis),
            "model" => Ok(WeightRoute::SimilarityModel),
            "predictive" => Ok(WeightRoute::PosteriorPredictive),
            other => Err(Error::Config(format!(
                "unknown weighting route `{other}` (expected mahalanobis|model|predictive)"
            ))),
        }
    }
}

/// Settings for the weighting routes.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSettings {
    pub route: WeightRoute,
    pub quantile: f64,
    /// Ridge added to covariance diagonals; `None` means
    /// 1e-8 x mean covariance diagonal.
    pub ridge: Option<f64>,
    pub min_category_count: usize,
}

impl Default for WeightSettings {
    fn default() -> Self {
        Self {
            route: WeightRoute::Mahalanobis,
            quantile: 0.05,
            ridge: None,
            min_category_count: 5,
        }
    }
}

/// A fully resolved prior construction ready for kernel evaluation.
#[derive(Debug, Clone)]
pub struct PriorConstruction {
    pub kind: PriorKind,
    /// Per-subject similarity weights; present for IW/TIW.
    pub weights: Option<Vec<WeightAssignment>>,
    /// Study-level power; present for PP.
    pub pp_power: Option<f64>,
    /// True when the power criterion's numerical profile was not unimodal.
    pub pp_non_concave: bool,
    pub hyperprior: Hyperprior,
}

impl PriorConstruction {
    /// A construction that carries no weighting state (NP, FH, MAP).
    pub fn plain(kind: PriorKind, hyperprior: Hyperprior) -> Self {
        Self {
            kind,
            weights: None,
            pp_power: None,
            pp_non_concave: false,
            hyperprior,
        }
    }

    /// IW/TIW construction from externally computed weights.
    pub fn with_weights(
        kind: PriorKind,
        weights: Vec<WeightAssignment>,
        hyperprior: Hyperprior,
    ) -> Self {
        Self {
            kind,
            weights: Some(weights),
            pp_power: None,
            pp_non_concave: false,
            hyperprior,
        }
    }

    /// Resolves a prior construction for the given data: runs the weighting
    /// route for IW/TIW, the power criterion for PP, and passes NP/FH/MAP
    /// through unchanged.
    pub fn build(
        kind: PriorKind,
        collection: &StudyCollection,
        schema: &CovariateSchema,
        settings: Option<&WeightSettings>,
        hyperprior: Hyperprior,
        pp_grid: usize,
    ) -> Result<Self> {
        match kind {
            PriorKind::NoPrior | PriorKind::FullHistory | PriorKind::MetaAnalyticPredictive => {
                Ok(Self::plain(kind, hyperprior))
            }
            PriorKind::PowerPrior => {
                let optimum = optimal_power(collection, schema, pp_grid)?;
                Ok(Self {
                    kind,
                    weights: None,
                    pp_power: Some(optimum.omega),
                    pp_non_concave: optimum.non_concave,
                    hyperprior,
                })
            }
            PriorKind::IndividuallyWeighted | PriorKind::TruncatedIndividuallyWeighted => {
                let settings = settings.ok_or_else(|| {
                    Error::Config(format!(
                        "method {} needs weighting settings (route, quantile)",
                        kind.label()
                    ))
                })?;
                let ridge = match settings.ridge {
                    Some(r) => r,
                    None => default_similarity_ridge(collection, schema)?,
                };
                let weights = match settings.route {
                    WeightRoute::Mahalanobis => weighting::mahalanobis_weights(
                        collection,
                        schema,
                        settings.quantile,
                        ridge,
                    )?,
                    WeightRoute::SimilarityModel => weighting::model_weights(
                        collection,
                        schema,
                        settings.quantile,
                        WeightMode::EmpiricalBayes,
                        ridge,
                        settings.min_category_count,
                    )?,
                    WeightRoute::PosteriorPredictive => weighting::model_weights(
                        collection,
                        schema,
                        settings.quantile,
                        WeightMode::PosteriorPredictive,
                        ridge,
                        settings.min_category_count,
                    )?,
                };
                Ok(Self::with_weights(kind, weights, hyperprior))
            }
        }
    }
}

/// Scale-aware default ridge: 1e-8 times the mean diagonal of the sample
/// covariance of the concurrent similarity vectors.
pub fn default_similarity_ridge(
    collection: &StudyCollection,
    schema: &CovariateSchema,
) -> Result<f64> {
    let vectors: Vec<Vec<f64>> = collection
        .concurrent
        .iter()
        .map(|r| schema.similarity_vector(r).map(|v| v.continuous))
        .collect::<Result<_>>()?;
    if vectors.is_empty() || vectors[0].is_empty() {
        return Ok(1e-8);
    }
    let dim = vectors[0].len();
    let n = vectors.len();
    let mut mean = vec![0.0; dim];
    for v in &vectors {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut diag_sum = 0.0;
    if n > 1 {
        for j in 0..dim {
            diag_sum += vectors
                .iter()
                .map(|v| (v[j] - mean[j]).powi(2))
                .sum::<f64>()
                / (n as f64 - 1.0);
        }
    }
    Ok(1e-8 * (diag_sum / dim as f64).max(1e-12))
}

/// Analysis design covariates: continuous covariates followed by dummy
/// indicators for all but the first level of each categorical covariate.
pub fn analysis_covariates(record: &SubjectRecord, schema: &CovariateSchema) -> Result<Vec<f64>> {
    if record.continuous_covariates.len() != schema.continuous_names.len()
        || record.categorical_covariates.len() != schema.categorical_names.len()
    {
        return Err(Error::SchemaMismatch(format!(
            "record in study `{}` does not match the schema's covariate arity",
            record.study_id
        )));
    }
    let mut out = record.continuous_covariates.clone();
    for (idx, label) in record.categorical_covariates.iter().enumerate() {
        let level = schema.level_index(idx, label).ok_or_else(|| {
            Error::SchemaMismatch(format!(
                "unknown level `{label}` for categorical `{}`",
                schema.categorical_names[idx]
            ))
        })?;
        let n_levels = schema.categorical_levels[idx].len();
        for l in 1..n_levels {
            out.push(if level == l { 1.0 } else { 0.0 });
        }
    }
    Ok(out)
}

/// Names matching [`analysis_covariates`] order.
pub fn analysis_covariate_names(schema: &CovariateSchema) -> Vec<String> {
    let mut names = schema.continuous_names.clone();
    for (cat, levels) in schema
        .categorical_names
        .iter()
        .zip(&schema.categorical_levels)
    {
        for level in &levels[1..] {
            names.push(format!("{cat}={level}"));
        }
    }
    names
}

/// Per-subject analysis powers, or the flag that the prior is hierarchical.
#[derive(Debug, Clone, PartialEq)]
pub enum AnalysisWeights {
    /// One power per historical subject in canonical order. Treatment-arm
    /// subjects carry power 0 (structural `1 - z` factor).
    PerSubject(Vec<f64>),
    /// MAP: dispatch to [`map_log_kernel`] instead of weighting.
    Hierarchical,
}

/// Materializes the per-subject analysis powers for a prior construction:
/// NP -> 0, FH -> 1, PP -> the optimal power, IW -> the similarity weight,
/// TIW -> the truncated weight; every power is multiplied by `(1 - z)` so
/// historical treatment-arm subjects contribute exactly zero.
pub fn resolve_weights(
    prior: &PriorConstruction,
    collection: &StudyCollection,
) -> Result<AnalysisWeights> {
    let n = collection.historical_subject_count();
    let powers = match prior.kind {
        PriorKind::MetaAnalyticPredictive => return Ok(AnalysisWeights::Hierarchical),
        PriorKind::NoPrior => vec![0.0; n],
        PriorKind::FullHistory => collection
            .iter_historical()
            .map(|(_, _, r)| 1.0 - f64::from(r.arm))
            .collect(),
        PriorKind::PowerPrior => {
            let omega = prior.pp_power.ok_or_else(|| {
                Error::Config("PP construction is missing its optimal power".to_string())
            })?;
            collection
                .iter_historical()
                .map(|(_, _, r)| omega * (1.0 - f64::from(r.arm)))
                .collect()
        }
        PriorKind::IndividuallyWeighted | PriorKind::TruncatedIndividuallyWeighted => {
            let assignments = prior.weights.as_ref().ok_or_else(|| {
                Error::Config(format!(
                    "method {} needs per-subject weights; run the weighting route first",
                    prior.kind.label()
                ))
            })?;
            let by_key: HashMap<(&str, usize), &WeightAssignment> = assignments
                .iter()
                .map(|a| ((a.subject.study_id.as_str(), a.subject.index), a))
                .collect();
            let truncated = prior.kind == PriorKind::TruncatedIndividuallyWeighted;
            collection
                .iter_historical()
                .map(|(study, idx, r)| {
                    let a = by_key.get(&(study, idx)).ok_or_else(|| {
                        Error::Config(format!(
                            "no weight assignment for study `{study}` record {idx}"
                        ))
                    })?;
                    let w = if truncated { a.truncated_weight } else { a.weight };
                    Ok(w * (1.0 - f64::from(r.arm)))
                })
                .collect::<Result<Vec<f64>>>()?
        }
    };
    Ok(AnalysisWeights::PerSubject(powers))
}

struct SubjectTerms {
    outcome: f64,
    covariates: Vec<f64>,
    z: f64,
    /// 1 for an observed event, 0 for right censoring.
    event: f64,
}

/// Normal-linear kernel with per-subject historical powers, prepared once
/// for repeated evaluation inside MCMC.
pub struct PreparedNormalModel {
    concurrent: Vec<SubjectTerms>,
    /// Historical subjects with strictly positive power (zero-power subjects
    /// contribute exactly 0 and are skipped).
    historical: Vec<(SubjectTerms, f64)>,
    pub hyperprior: Hyperprior,
    pub n_covariates: usize,
}

fn subject_terms(record: &SubjectRecord, schema: &CovariateSchema) -> Result<SubjectTerms> {
    Ok(SubjectTerms {
        outcome: record.outcome,
        covariates: analysis_covariates(record, schema)?,
        z: f64::from(record.arm),
        event: record.event.map(|e| f64::from(e.min(1))).unwrap_or(1.0),
    })
}

impl PreparedNormalModel {
    pub fn new(
        collection: &StudyCollection,
        schema: &CovariateSchema,
        prior: &PriorConstruction,
    ) -> Result<Self> {
        let powers = match resolve_weights(prior, collection)? {
            AnalysisWeights::PerSubject(p) => p,
            AnalysisWeights::Hierarchical => {
                return Err(Error::Config(
                    "the MAP prior is hierarchical; use the MAP kernel".to_string(),
                ))
            }
        };
        let concurrent = collection
            .concurrent
            .iter()
            .map(|r| subject_terms(r, schema))
            .collect::<Result<Vec<_>>>()?;
        let historical = collection
            .iter_historical()
            .zip(&powers)
            .filter(|(_, &w)| w > 0.0)
            .map(|((_, _, r), &w)| subject_terms(r, schema).map(|t| (t, w)))
            .collect::<Result<Vec<_>>>()?;
        let n_covariates = concurrent
            .first()
            .map(|t| t.covariates.len())
            .unwrap_or(0);
        Ok(Self {
            concurrent,
            historical,
            hyperprior: prior.hyperprior.clone(),
            n_covariates,
        })
    }

    fn control_mean(&self, t: &SubjectTerms, params: &NormalModelParams) -> f64 {
        params.beta0
            + t.covariates
                .iter()
                .zip(&params.beta)
                .map(|(x, b)| x * b)
                .sum::<f64>()
    }

    pub fn log_prior(&self, params: &NormalModelParams) -> f64 {
        if params.sigma2 <= 0.0 {
            return f64::NEG_INFINITY;
        }
        let h = &self.hyperprior;
        h.log_location(params.theta)
            + h.log_location(params.beta0)
            + params.beta.iter().map(|b| h.log_location(*b)).sum::<f64>()
            + h.log_sigma2(params.sigma2)
    }

    pub fn log_kernel(&self, params: &NormalModelParams) -> f64 {
        let mut lp = self.log_prior(params);
        if lp == f64::NEG_INFINITY {
            return lp;
        }
        for t in &self.concurrent {
            let mean = self.control_mean(t, params) + params.theta * t.z;
            lp += log_normal_pdf(t.outcome, mean, params.sigma2);
        }
        for (t, w) in &self.historical {
            let mean = self.control_mean(t, params);
            lp += w * log_normal_pdf(t.outcome, mean, params.sigma2);
        }
        lp
    }

    fn diagnose(&self, params: &NormalModelParams) -> Error {
        for (i, t) in self.concurrent.iter().enumerate() {
            let mean = self.control_mean(t, params) + params.theta * t.z;
            if !log_normal_pdf(t.outcome, mean, params.sigma2).is_finite() {
                return Error::NonFinite(format!(
                    "concurrent subject {i} contributes a non-finite log-likelihood term"
                ));
            }
        }
        for (i, (t, w)) in self.historical.iter().enumerate() {
            let mean = self.control_mean(t, params);
            if !(w * log_normal_pdf(t.outcome, mean, params.sigma2)).is_finite() {
                return Error::NonFinite(format!(
                    "historical subject {i} contributes a non-finite log-likelihood term"
                ));
            }
        }
        Error::NonFinite("log prior is non-finite at the given parameters".to_string())
    }
}

/// Normal-linear log-kernel: log prior plus the power-weighted historical
/// log-likelihood plus the concurrent log-likelihood.
pub fn normal_log_kernel(
    params: &NormalModelParams,
    collection: &StudyCollection,
    schema: &CovariateSchema,
    prior: &PriorConstruction,
) -> Result<f64> {
    if params.sigma2 <= 0.0 {
        return Err(Error::Domain(format!(
            "sigma2 must be positive, got {}",
            params.sigma2
        )));
    }
    let model = PreparedNormalModel::new(collection, schema, prior)?;
    let value = model.log_kernel(params);
    if value.is_finite() {
        Ok(value)
    } else {
        Err(model.diagnose(params))
    }
}

/// MAP (hierarchical) kernel prepared for repeated evaluation.
pub struct PreparedMapModel {
    concurrent: Vec<SubjectTerms>,
    historical_by_study: Vec<Vec<SubjectTerms>>,
    pub hyperprior: Hyperprior,
    pub n_covariates: usize,
}

impl PreparedMapModel {
    pub fn new(collection: &StudyCollection, schema: &CovariateSchema) -> Result<Self> {
        let concurrent = collection
            .concurrent
            .iter()
            .map(|r| subject_terms(r, schema))
            .collect::<Result<Vec<_>>>()?;
        let historical_by_study = collection
            .historical
            .iter()
            .map(|study| {
                study
                    .subjects
                    .iter()
                    .map(|r| subject_terms(r, schema))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let n_covariates = concurrent
            .first()
            .map(|t| t.covariates.len())
            .unwrap_or(0);
        Ok(Self {
            concurrent,
            historical_by_study,
            hyperprior: Hyperprior::default(),
            n_covariates,
        })
    }

    pub fn with_hyperprior(mut self, hyperprior: Hyperprior) -> Self {
        self.hyperprior = hyperprior;
        self
    }

    pub fn n_historical_studies(&self) -> usize {
        self.historical_by_study.len()
    }

    pub fn log_kernel(&self, params: &MapModelParams) -> f64 {
        if params.sigma2 <= 0.0 || params.tau2 <= 0.0 {
            return f64::NEG_INFINITY;
        }
        if params.delta_historical.len() != self.historical_by_study.len() {
            return f64::NEG_INFINITY;
        }
        let h = &self.hyperprior;
        let mut lp = h.log_location(params.theta)
            + h.log_location(params.mu_delta)
            + params.beta.iter().map(|b| h.log_location(*b)).sum::<f64>()
            + h.log_sigma2(params.sigma2)
            + h.log_tau2(params.tau2);
        // Study random effects.
        lp += log_normal_pdf(params.delta_concurrent, params.mu_delta, params.tau2);
        for d in &params.delta_historical {
            lp += log_normal_pdf(*d, params.mu_delta, params.tau2);
        }
        let xb = |t: &SubjectTerms| -> f64 {
            t.covariates
                .iter()
                .zip(&params.beta)
                .map(|(x, b)| x * b)
                .sum::<f64>()
        };
        for t in &self.concurrent {
            let mean = params.delta_concurrent + xb(t) + params.theta * t.z;
            lp += log_normal_pdf(t.outcome, mean, params.sigma2);
        }
        for (study, delta) in self
            .historical_by_study
            .iter()
            .zip(&params.delta_historical)
        {
            for t in study {
                lp += log_normal_pdf(t.outcome, delta + xb(t), params.sigma2);
            }
        }
        lp
    }
}

/// The MAP model with its Gaussian location block (theta, beta, delta_c,
/// delta_h, mu_delta) integrated out analytically.
///
/// Given (sigma2, tau2) the location block is jointly Gaussian, so the
/// marginal kernel of the two variance parameters has a closed form and the
/// locations can be reconstructed by exact conditional draws. Sampling the
/// two-dimensional marginal mixes far better than a random walk on the full
/// hierarchical posterior.
pub struct CollapsedMapModel {
    data_gram: DMatrix<f64>,
    data_moment: DVector<f64>,
    sum_y_squared: f64,
    n_subjects: f64,
    hier_gram: DMatrix<f64>,
    prior_precision: DVector<f64>,
    n_groups: f64,
    hyperprior: Hyperprior,
    /// Location parameter names: theta, beta..., delta_c, delta_<id>...,
    /// mu_delta.
    pub location_names: Vec<String>,
}

impl CollapsedMapModel {
    pub fn new(
        collection: &StudyCollection,
        schema: &CovariateSchema,
        hyperprior: Hyperprior,
    ) -> Result<Self> {
        let n_hist = collection.historical.len();
        let p = analysis_covariate_names(schema).len();
        // Location layout: theta, beta..., delta_c, delta_1..H, mu_delta.
        let dim = 1 + p + 1 + n_hist + 1;
        let mu_idx = dim - 1;
        let mut location_names = vec!["theta".to_string()];
        location_names.extend(analysis_covariate_names(schema).into_iter().map(|n| format!("beta_{n}")));
        location_names.push("delta_c".to_string());
        for study in &collection.historical {
            location_names.push(format!("delta_{}", study.id));
        }
        location_names.push("mu_delta".to_string());

        let mut data_gram = DMatrix::zeros(dim, dim);
        let mut data_moment = DVector::zeros(dim);
        let mut sum_y_squared = 0.0;
        let mut n_subjects = 0.0;
        let mut add_row = |row: DVector<f64>, y: f64| {
            data_gram += &row * row.transpose();
            data_moment += row * y;
            sum_y_squared += y * y;
            n_subjects += 1.0;
        };
        for r in &collection.concurrent {
            let covs = analysis_covariates(r, schema)?;
            let mut row = DVector::zeros(dim);
            row[0] = f64::from(r.arm);
            for (j, x) in covs.iter().enumerate() {
                row[1 + j] = *x;
            }
            row[1 + p] = 1.0; // delta_c
            add_row(row, r.outcome);
        }
        for (h, study) in collection.historical.iter().enumerate() {
            for r in &study.subjects {
                let covs = analysis_covariates(r, schema)?;
                let mut row = DVector::zeros(dim);
                for (j, x) in covs.iter().enumerate() {
                    row[1 + j] = *x;
                }
                row[2 + p + h] = 1.0; // delta_h
                add_row(row, r.outcome);
            }
        }

        // Hierarchical coupling: delta_s - mu_delta ~ N(0, tau2).
        let mut hier_gram = DMatrix::zeros(dim, dim);
        for s in 0..=n_hist {
            let mut q = DVector::zeros(dim);
            q[1 + p + s] = 1.0;
            q[mu_idx] = -1.0;
            hier_gram += &q * q.transpose();
        }

        let mut prior_precision = DVector::zeros(dim);
        if hyperprior.location_variance.is_finite() {
            let precision = 1.0 / hyperprior.location_variance;
            prior_precision[0] = precision;
            for j in 0..p {
                prior_precision[1 + j] = precision;
            }
            prior_precision[mu_idx] = precision;
        }

        Ok(Self {
            data_gram,
            data_moment,
            sum_y_squared,
            n_subjects,
            hier_gram,
            prior_precision,
            n_groups: (n_hist + 1) as f64,
            hyperprior,
            location_names,
        })
    }

    pub fn dim(&self) -> usize {
        self.data_moment.len()
    }

    /// Information matrix of the location block given (sigma2, tau2).
    pub fn information_matrix(&self, sigma2: f64, tau2: f64) -> DMatrix<f64> {
        let mut a = &self.data_gram / sigma2 + &self.hier_gram / tau2;
        for i in 0..self.dim() {
            a[(i, i)] += self.prior_precision[i];
        }
        a
    }

    /// Marginal log-kernel of (sigma2, tau2), locations integrated out.
    pub fn log_marginal(&self, sigma2: f64, tau2: f64) -> f64 {
        if sigma2 <= 0.0 || tau2 <= 0.0 {
            return f64::NEG_INFINITY;
        }
        let a = self.information_matrix(sigma2, tau2);
        let b = &self.data_moment / sigma2;
        let c = -self.sum_y_squared / (2.0 * sigma2)
            - 0.5 * self.n_subjects * (LN_2PI + sigma2.ln())
            - 0.5 * self.n_groups * (LN_2PI + tau2.ln());
        match log_gaussian_integral(&a, &b, c) {
            Ok(integral) => {
                integral
                    + self.hyperprior.log_sigma2(sigma2)
                    + self.hyperprior.log_tau2(tau2)
            }
            Err(_) => f64::NEG_INFINITY,
        }
    }

    /// Exact Gaussian conditional of the location block given (sigma2,
    /// tau2): one draw using the provided standard-normal noise.
    pub fn conditional_draw(
        &self,
        sigma2: f64,
        tau2: f64,
        standard_normal: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        let a = self.information_matrix(sigma2, tau2);
        let chol = a.cholesky().ok_or_else(|| {
            Error::Rank("MAP location information matrix is rank deficient".to_string())
        })?;
        let mean = chol.solve(&(&self.data_moment / sigma2));
        // Covariance A^-1 = L^-T L^-1: draw mean + L^-T z.
        let spread = chol
            .l()
            .transpose()
            .solve_upper_triangular(standard_normal)
            .ok_or_else(|| Error::Rank("triangular solve failed".to_string()))?;
        Ok(mean + spread)
    }
}

/// Hierarchical MAP kernel: study intercepts share a common mean and
/// variance; historical subjects enter with full weight under their own
/// intercept.
pub fn map_log_kernel(
    params: &MapModelParams,
    collection: &StudyCollection,
    schema: &CovariateSchema,
    hyperprior: &Hyperprior,
) -> Result<f64> {
    if params.sigma2 <= 0.0 {
        return Err(Error::Domain("sigma2 must be positive".to_string()));
    }
    if params.tau2 <= 0.0 {
        return Err(Error::Domain("tau2 must be positive".to_string()));
    }
    if params.delta_historical.len() != collection.historical.len() {
        return Err(Error::InvalidArgument(format!(
            "{} historical intercepts for {} historical studies",
            params.delta_historical.len(),
            collection.historical.len()
        )));
    }
    let model = PreparedMapModel::new(collection, schema)?.with_hyperprior(hyperprior.clone());
    let value = model.log_kernel(params);
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite(
            "MAP kernel evaluated non-finite at the given parameters".to_string(),
        ))
    }
}

/// Weibull proportional-hazards kernel prepared for repeated evaluation.
pub struct PreparedWeibullModel {
    concurrent: Vec<SubjectTerms>,
    historical: Vec<(SubjectTerms, f64)>,
    pub hyperprior: Hyperprior,
    pub n_covariates: usize,
}

impl PreparedWeibullModel {
    /// Records without an event flag are treated as observed events.
    pub fn new(
        collection: &StudyCollection,
        schema: &CovariateSchema,
        prior: &PriorConstruction,
    ) -> Result<Self> {
        for (study, idx, r) in collection.iter_all() {
            if !(r.outcome > 0.0) {
                return Err(Error::Domain(format!(
                    "survival time must be > 0; study `{study}` record {idx} has {}",
                    r.outcome
                )));
            }
        }
        let powers = match resolve_weights(prior, collection)? {
            AnalysisWeights::PerSubject(p) => p,
            AnalysisWeights::Hierarchical => {
                return Err(Error::Config(
                    "the hierarchical MAP prior is implemented for the normal model only"
                        .to_string(),
                ))
            }
        };
        let concurrent = collection
            .concurrent
            .iter()
            .map(|r| subject_terms(r, schema))
            .collect::<Result<Vec<_>>>()?;
        let historical = collection
            .iter_historical()
            .zip(&powers)
            .filter(|(_, &w)| w > 0.0)
            .map(|((_, _, r), &w)| subject_terms(r, schema).map(|t| (t, w)))
            .collect::<Result<Vec<_>>>()?;
        let n_covariates = concurrent
            .first()
            .map(|t| t.covariates.len())
            .unwrap_or(0);
        Ok(Self {
            concurrent,
            historical,
            hyperprior: prior.hyperprior.clone(),
            n_covariates,
        })
    }

    fn eta(t: &SubjectTerms, params: &WeibullModelParams, with_treatment: bool) -> f64 {
        params.delta
            + t.covariates
                .iter()
                .zip(&params.beta)
                .map(|(x, b)| x * b)
                .sum::<f64>()
            + if with_treatment { params.theta * t.z } else { 0.0 }
    }

    /// Log density / log survival contribution of one subject with power w:
    /// `w * (nu (ln alpha + (alpha-1) ln t + eta) - t^alpha exp(eta))`.
    fn subject_contribution(
        t: &SubjectTerms,
        params: &WeibullModelParams,
        w: f64,
        with_treatment: bool,
    ) -> f64 {
        let eta = Self::eta(t, params, with_treatment);
        let cumulative = t.outcome.powf(params.alpha) * eta.exp();
        w * (t.event * (params.alpha.ln() + (params.alpha - 1.0) * t.outcome.ln() + eta)
            - cumulative)
    }

    pub fn log_prior(&self, params: &WeibullModelParams) -> f64 {
        if params.alpha <= 0.0 {
            return f64::NEG_INFINITY;
        }
        let h = &self.hyperprior;
        h.log_location(params.alpha)
            + h.log_location(params.delta)
            + h.log_location(params.theta)
            + params.beta.iter().map(|b| h.log_location(*b)).sum::<f64>()
    }

    pub fn log_kernel(&self, params: &WeibullModelParams) -> f64 {
        let mut lp = self.log_prior(params);
        if lp == f64::NEG_INFINITY {
            return lp;
        }
        for t in &self.concurrent {
            lp += Self::subject_contribution(t, params, 1.0, true);
        }
        for (t, w) in &self.historical {
            lp += Self::subject_contribution(t, params, *w, true);
        }
        lp
    }

    /// Gradient of the kernel with respect to (alpha, delta, beta..., theta).
    pub fn log_kernel_grad(&self, params: &WeibullModelParams) -> Vec<f64> {
        let p = params.beta.len();
        let mut grad = vec![0.0; 2 + p + 1];
        let h = &self.hyperprior;
        if h.location_variance.is_finite() {
            grad[0] = -params.alpha / h.location_variance;
            grad[1] = -params.delta / h.location_variance;
            for (j, b) in params.beta.iter().enumerate() {
                grad[2 + j] = -b / h.location_variance;
            }
            grad[2 + p] = -params.theta / h.location_variance;
        }
        let mut accumulate = |t: &SubjectTerms, w: f64| {
            let eta = Self::eta(t, params, true);
            let cumulative = t.outcome.powf(params.alpha) * eta.exp();
            let ln_t = t.outcome.ln();
            grad[0] += w * (t.event * (1.0 / params.alpha + ln_t) - cumulative * ln_t);
            let d_eta = w * (t.event - cumulative);
            grad[1] += d_eta;
            for (j, x) in t.covariates.iter().enumerate() {
                grad[2 + j] += d_eta * x;
            }
            grad[2 + p] += d_eta * t.z;
        };
        for t in &self.concurrent {
            accumulate(t, 1.0);
        }
        for (t, w) in &self.historical {
            accumulate(t, *w);
        }
        grad
    }
}

/// Weibull proportional-hazards log-kernel. The informative historical part
/// carries no treatment information: powers are multiplied by `(1 - z)`.
pub fn weibull_log_kernel(
    params: &WeibullModelParams,
    collection: &StudyCollection,
    schema: &CovariateSchema,
    prior: &PriorConstruction,
) -> Result<f64> {
    if params.alpha <= 0.0 {
        return Err(Error::Domain(format!(
            "Weibull shape must be positive, got {}",
            params.alpha
        )));
    }
    let model = PreparedWeibullModel::new(collection, schema, prior)?;
    let value = model.log_kernel(params);
    if value.is_finite() {
        Ok(value)
    } else {
        for (i, t) in model.concurrent.iter().enumerate() {
            if !PreparedWeibullModel::subject_contribution(t, params, 1.0, true).is_finite() {
                return Err(Error::NonFinite(format!(
                    "concurrent subject {i} contributes a non-finite survival term"
                )));
            }
        }
        Err(Error::NonFinite(
            "Weibull kernel evaluated non-finite at the given parameters".to_string(),
        ))
    }
}

/// Gradient counterpart of [`weibull_log_kernel`]; order
/// (alpha, delta, beta..., theta).
pub fn weibull_log_kernel_grad(
    params: &WeibullModelParams,
    collection: &StudyCollection,
    schema: &CovariateSchema,
    prior: &PriorConstruction,
) -> Result<Vec<f64>> {
    if params.alpha <= 0.0 {
        return Err(Error::Domain("Weibull shape must be positive".to_string()));
    }
    let model = PreparedWeibullModel::new(collection, schema, prior)?;
    Ok(model.log_kernel_grad(params))
}

/// Result of the power-prior criterion search.
#[derive(Debug, Clone)]
pub struct OptimalPower {
    pub omega: f64,
    /// Numerical profile was not unimodal over the grid.
    pub non_concave: bool,
    /// Plug-in maximum-likelihood variance used by the criterion.
    pub sigma2: f64,
}

fn historical_control_design(
    collection: &StudyCollection,
    schema: &CovariateSchema,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for (_, _, r) in collection.iter_historical() {
        if r.is_treatment() {
            continue;
        }
        let mut row = vec![1.0];
        row.extend(analysis_covariates(r, schema)?);
        rows.push(row);
        y.push(r.outcome);
    }
    Ok((rows, y))
}

fn concurrent_design(
    collection: &StudyCollection,
    schema: &CovariateSchema,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for r in &collection.concurrent {
        let mut row = vec![1.0];
        row.extend(analysis_covariates(r, schema)?);
        row.push(f64::from(r.arm));
        rows.push(row);
        y.push(r.outcome);
    }
    Ok((rows, y))
}

fn gram(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let q = rows[0].len();
    let mut a = DMatrix::zeros(q, q);
    for row in rows {
        let r = DVector::from_row_slice(row);
        a += &r * r.transpose();
    }
    a
}

fn xty(rows: &[Vec<f64>], y: &[f64]) -> DVector<f64> {
    let q = rows[0].len();
    let mut v = DVector::zeros(q);
    for (row, &yi) in rows.iter().zip(y) {
        v += DVector::from_row_slice(row) * yi;
    }
    v
}

/// log of `int exp(-x'Ax/2 + b'x + c) dx` for positive definite A.
fn log_gaussian_integral(a: &DMatrix<f64>, b: &DVector<f64>, c: f64) -> Result<f64> {
    let chol = a.clone().cholesky().ok_or_else(|| {
        Error::Rank("Gaussian integral needs a positive definite information matrix".to_string())
    })?;
    let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let solve = chol.solve(b);
    Ok(0.5 * a.nrows() as f64 * LN_2PI - 0.5 * log_det + 0.5 * b.dot(&solve) + c)
}

/// Maximum-likelihood plug-in variance from the concurrent study's ordinary
/// least squares fit (denominator N_c).
pub fn plugin_sigma2(collection: &StudyCollection, schema: &CovariateSchema) -> Result<f64> {
    let (rows, y) = concurrent_design(collection, schema)?;
    if rows.is_empty() {
        return Err(Error::InvalidArgument("no concurrent subjects".to_string()));
    }
    let a = gram(&rows);
    let chol = a.clone().cholesky().ok_or_else(|| {
        Error::Rank("concurrent design is rank deficient (no treated subjects?)".to_string())
    })?;
    let coef = chol.solve(&xty(&rows, &y));
    let rss: f64 = rows
        .iter()
        .zip(&y)
        .map(|(row, &yi)| {
            let fit: f64 = row.iter().zip(coef.iter()).map(|(x, c)| x * c).sum();
            (yi - fit).powi(2)
        })
        .sum();
    let s2 = rss / rows.len() as f64;
    if s2 <= 0.0 {
        return Err(Error::Domain(
            "plug-in variance is zero; outcomes are exactly collinear with the design".to_string(),
        ));
    }
    Ok(s2)
}

/// Log criterion at a given power: the log marginal likelihood of the
/// concurrent data under the omega-power prior with a flat initial prior and
/// known variance. The likelihood term (joint Gaussian integral) is
/// penalized by the power prior's log normalizing constant. Returns negative
/// infinity at omega = 0 (the prior normalizer diverges) and requires
/// historical control data.
pub fn power_criterion(
    collection: &StudyCollection,
    schema: &CovariateSchema,
    omega: f64,
    sigma2: f64,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&omega) {
        return Err(Error::InvalidArgument(format!(
            "power must lie in [0, 1], got {omega}"
        )));
    }
    if sigma2 <= 0.0 {
        return Err(Error::InvalidArgument("sigma2 must be positive".to_string()));
    }
    let (h_rows, h_y) = historical_control_design(collection, schema)?;
    if h_rows.is_empty() {
        return Err(Error::Config(
            "the power criterion is undefined without historical control data".to_string(),
        ));
    }
    if omega == 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    let (c_rows, c_y) = concurrent_design(collection, schema)?;
    let p = h_rows[0].len();
    let q = c_rows[0].len();
    debug_assert_eq!(q, p + 1);

    let nh = h_rows.len() as f64;
    let a_hist = gram(&h_rows) * (omega / sigma2);
    let b_hist = xty(&h_rows, &h_y) * (omega / sigma2);
    let c_hist = -omega / (2.0 * sigma2) * h_y.iter().map(|v| v * v).sum::<f64>()
        - 0.5 * omega * nh * (LN_2PI + sigma2.ln());

    let log_normalizer = log_gaussian_integral(&a_hist, &b_hist, c_hist).map_err(|_| {
        Error::Rank(
            "historical control design is rank deficient; the power prior is improper".to_string(),
        )
    })?;

    let nc = c_rows.len() as f64;
    let mut a_joint = gram(&c_rows) / sigma2;
    a_joint.view_mut((0, 0), (p, p)).iter_mut().zip(a_hist.iter()).for_each(
        |(joint, hist)| *joint += hist,
    );
    let mut b_joint = xty(&c_rows, &c_y) / sigma2;
    for i in 0..p {
        b_joint[i] += b_hist[i];
    }
    let c_joint = c_hist
        - 1.0 / (2.0 * sigma2) * c_y.iter().map(|v| v * v).sum::<f64>()
        - 0.5 * nc * (LN_2PI + sigma2.ln());
    let log_joint = log_gaussian_integral(&a_joint, &b_joint, c_joint).map_err(|_| {
        Error::Rank("joint design is rank deficient; location parameters not identified".to_string())
    })?;
    Ok(log_joint - log_normalizer)
}

/// Maximizes the power criterion over a uniform grid on [0, 1].
///
/// With no historical control data the criterion is constant in omega and 0
/// is returned by convention. A non-unimodal numerical profile sets the
/// `non_concave` flag (the grid argmax is still returned).
pub fn optimal_power(
    collection: &StudyCollection,
    schema: &CovariateSchema,
    grid_resolution: usize,
) -> Result<OptimalPower> {
    if grid_resolution < 2 {
        return Err(Error::InvalidArgument(
            "grid resolution must be at least 2".to_string(),
        ));
    }
    let sigma2 = plugin_sigma2(collection, schema)?;
    let (h_rows, _) = historical_control_design(collection, schema)?;
    if h_rows.is_empty() {
        return Ok(OptimalPower {
            omega: 0.0,
            non_concave: false,
            sigma2,
        });
    }
    let mut best = (0.0, f64::NEG_INFINITY);
    let mut values = Vec::with_capacity(grid_resolution);
    for i in 0..grid_resolution {
        let omega = i as f64 / (grid_resolution - 1) as f64;
        let value = if omega == 0.0 {
            f64::NEG_INFINITY
        } else {
            let v = power_criterion(collection, schema, omega, sigma2)?;
            if v.is_nan() {
                f64::NEG_INFINITY
            } else {
                v
            }
        };
        values.push(value);
        if value > best.1 {
            best = (omega, value);
        }
    }
    // Unimodality check on the finite part of the profile.
    let finite: Vec<f64> = values.into_iter().filter(|v| v.is_finite()).collect();
    let mut rising = true;
    let mut non_concave = false;
    for pair in finite.windows(2) {
        if pair[1] >= pair[0] {
            if !rising {
                non_concave = true;
                break;
            }
        } else {
            rising = false;
        }
    }
    Ok(OptimalPower {
        omega: best.0,
        non_concave,
        sigma2,
    })
}

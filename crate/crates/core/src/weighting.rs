//! Per-subject similarity weights for historical borrowing.
//!
//! Two routes produce raw similarity scores:
//!
//! * the Mahalanobis route — distance of each subject's continuous
//!   similarity vector to the concurrent study's sample mean/covariance;
//! * the similarity-model route — a multinomial-over-categories Gaussian
//!   mixture fitted to the concurrent control arm, scored either at plugin
//!   parameter estimates (empirical Bayes) or integrated over a conjugate
//!   Dirichlet + normal-inverse-Wishart posterior (posterior predictive).
//!
//! Raw scores are mapped onto [0, 1] by the linear transform `G` whose
//! extrema are pooled over ALL scored subjects — concurrent ones included.
//! That pooling is easy to get wrong: weights therefore depend on the whole
//! data pool, not on the historical subjects alone. A truncation threshold
//! `rho` is then taken as an empirical quantile of the CONCURRENT subjects'
//! weights, and weights at or below `rho` are zeroed (strict `>` survives).
//!
//! Concurrent subjects always enter the analysis likelihood with weight 1;
//! their similarity weights exist solely to calibrate `rho`.

use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::ln_gamma;

use crate::data::{CovariateSchema, StudyCollection, SubjectRecord};
use crate::error::{Error, Result};
use crate::stats;

const LN_2PI: f64 = 1.837877066409345483560659472811;

/// Identifies a subject as (study id, position within that study).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SubjectKey {
    pub study_id: String,
    pub index: usize,
}

/// Raw score, transformed weight and truncated weight for one subject.
///
/// `weight` lies in [0, 1]. After truncation, `truncated_weight` equals
/// `weight` exactly when `weight > threshold` and 0 otherwise. Subjects that
/// are excluded from scoring (treatment-arm records under the
/// similarity-model route) carry a NaN `raw_score` and zero weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightAssignment {
    pub subject: SubjectKey,
    pub raw_score: f64,
    pub weight: f64,
    pub truncated_weight: f64,
    /// The threshold `rho` used; `None` until truncation is applied.
    pub threshold: Option<f64>,
}

impl WeightAssignment {
    fn excluded(subject: SubjectKey) -> Self {
        Self {
            subject,
            raw_score: f64::NAN,
            weight: 0.0,
            truncated_weight: 0.0,
            threshold: None,
        }
    }
}

/// Pooled extrema of the raw scores defining the transform `G`.
///
/// When `pooled_min == pooled_max` the transform degenerates and every
/// weight is defined to be 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformContext {
    pub pooled_min: f64,
    pub pooled_max: f64,
}

impl TransformContext {
    /// `G(s) = (s - min) / (max - min)`, clamped to [0, 1] for scores inside
    /// the pooled range up to rounding.
    pub fn g(&self, score: f64) -> f64 {
        let span = self.pooled_max - self.pooled_min;
        if span <= 0.0 {
            return 0.0;
        }
        ((score - self.pooled_min) / span).clamp(0.0, 1.0)
    }

    /// Inverse transform: the score at which `G` attains `u`.
    pub fn g_inverse(&self, u: f64) -> f64 {
        self.pooled_min + u * (self.pooled_max - self.pooled_min)
    }
}

/// Whether larger raw scores mean farther from (distances) or closer to
/// (densities) the concurrent population.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreOrientation {
    /// Weight = 1 - G(score); the pooled minimum maps to weight 1.
    DistanceLike,
    /// Weight = G(score); the pooled maximum maps to weight 1.
    SimilarityLike,
}

/// Sample mean and (ridge-regularized) covariance of the concurrent study's
/// continuous similarity vectors.
#[derive(Debug, Clone)]
pub struct MahalanobisReference {
    pub mean: DVector<f64>,
    /// Covariance after adding `ridge` to the diagonal.
    pub covariance: DMatrix<f64>,
    pub ridge: f64,
    chol_lower: DMatrix<f64>,
}

impl MahalanobisReference {
    /// Distance of `v` to the reference: `sqrt((v - mean)^T Sigma^-1 (v - mean))`.
    pub fn distance(&self, v: &[f64]) -> Result<f64> {
        if v.len() != self.mean.len() {
            return Err(Error::InvalidArgument(format!(
                "vector has dimension {}, reference has {}",
                v.len(),
                self.mean.len()
            )));
        }
        let diff = DVector::from_row_slice(v) - &self.mean;
        let z = self
            .chol_lower
            .solve_lower_triangular(&diff)
            .ok_or_else(|| Error::Rank("triangular solve failed".to_string()))?;
        Ok(z.norm())
    }
}

fn sample_mean_cov(vectors: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = vectors.len();
    let dim = vectors[0].len();
    let mut mean = DVector::zeros(dim);
    for v in vectors {
        mean += DVector::from_row_slice(v);
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(dim, dim);
    if n > 1 {
        for v in vectors {
            let d = DVector::from_row_slice(v) - &mean;
            cov += &d * d.transpose();
        }
        cov /= (n - 1) as f64;
    }
    (mean, cov)
}

fn cholesky_lower(matrix: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    matrix.clone().cholesky().map(|c| c.l())
}

/// Fits the Mahalanobis reference on the concurrent study.
///
/// The covariance uses denominator `N - 1` and gets `ridge` added to its
/// diagonal. Fails with a rank error when the regularized covariance is not
/// positive definite; the fix is a larger ridge (or more subjects).
pub fn fit_mahalanobis_reference(
    concurrent: &[SubjectRecord],
    schema: &CovariateSchema,
    ridge: f64,
) -> Result<MahalanobisReference> {
    let records = concurrent;
    if records.len() < 2 {
        return Err(Error::Rank(
            "need at least 2 concurrent subjects to estimate a covariance".to_string(),
        ));
    }
    if ridge < 0.0 {
        return Err(Error::InvalidArgument("ridge must be >= 0".to_string()));
    }
    let vectors: Vec<Vec<f64>> = records
        .iter()
        .map(|r| schema.similarity_vector(r).map(|v| v.continuous))
        .collect::<Result<_>>()?;
    let dim = vectors[0].len();
    if ridge == 0.0 && records.len() < dim + 1 {
        return Err(Error::Rank(format!(
            "{} subjects cannot give a full-rank {dim}x{dim} covariance; \
             add subjects or use a positive ridge",
            records.len()
        )));
    }
    let (mean, mut covariance) = sample_mean_cov(&vectors);
    for i in 0..dim {
        covariance[(i, i)] += ridge;
    }
    let chol_lower = cholesky_lower(&covariance).ok_or_else(|| {
        Error::Rank(format!(
            "covariance is not positive definite with ridge {ridge}; increase the ridge"
        ))
    })?;
    Ok(MahalanobisReference {
        mean,
        covariance,
        ridge,
        chol_lower,
    })
}

/// Maps raw scores to weights with pooled extrema.
///
/// The input must cover every subject that participates in the pool
/// (concurrent and historical); the extrema of `G` are taken over all of
/// them. Returns the assignments (threshold unset) plus the transform
/// context. All-equal scores yield all-zero weights by convention.
pub fn transform_scores(
    raw: &[(SubjectKey, f64)],
    orientation: ScoreOrientation,
) -> Result<(Vec<WeightAssignment>, TransformContext)> {
    if raw.is_empty() {
        return Err(Error::InvalidArgument(
            "transform_scores needs at least one score".to_string(),
        ));
    }
    let mut pooled_min = f64::INFINITY;
    let mut pooled_max = f64::NEG_INFINITY;
    for (key, score) in raw {
        if !score.is_finite() {
            return Err(Error::NonFinite(format!(
                "raw score for study `{}` record {} is {score}",
                key.study_id, key.index
            )));
        }
        pooled_min = pooled_min.min(*score);
        pooled_max = pooled_max.max(*score);
    }
    let context = TransformContext {
        pooled_min,
        pooled_max,
    };
    let degenerate = !(pooled_max > pooled_min);
    let assignments = raw
        .iter()
        .map(|(key, score)| {
            let g = context.g(*score);
            let weight = if degenerate {
                0.0
            } else {
                match orientation {
                    ScoreOrientation::DistanceLike => 1.0 - g,
                    ScoreOrientation::SimilarityLike => g,
                }
            };
            WeightAssignment {
                subject: key.clone(),
                raw_score: *score,
                weight,
                truncated_weight: weight,
                threshold: None,
            }
        })
        .collect();
    Ok((assignments, context))
}

/// Empirical quantile of the concurrent subjects' weights, used as the
/// truncation threshold `rho`.
///
/// Uses the linear-interpolation (type-7) quantile definition; subjects with
/// weight strictly above the returned value survive truncation.
pub fn compute_threshold(concurrent_weights: &[f64], quantile: f64) -> Result<f64> {
    if concurrent_weights.is_empty() {
        return Err(Error::InvalidArgument(
            "threshold needs at least one concurrent weight".to_string(),
        ));
    }
    if !(quantile > 0.0 && quantile < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "quantile must lie in (0, 1), got {quantile}"
        )));
    }
    Ok(stats::quantile(concurrent_weights, quantile))
}

/// Zeroes every weight at or below `threshold` (strict `>` survives) and
/// stamps the threshold on each assignment. Idempotent for a fixed
/// threshold.
pub fn apply_truncation(assignments: &mut [WeightAssignment], threshold: f64) {
    for a in assignments {
        a.truncated_weight = if a.weight > threshold { a.weight } else { 0.0 };
        a.threshold = Some(threshold);
    }
}

fn require_continuous_only(
    collection: &StudyCollection,
    schema: &CovariateSchema,
) -> Result<()> {
    let has_categorical = !schema.categorical_names.is_empty()
        || (schema.include_event_in_similarity
            && collection.iter_all().any(|(_, _, r)| r.event.is_some()));
    if has_categorical {
        return Err(Error::Config(
            "the Mahalanobis route requires continuous-only similarity vectors; \
             use the similarity-model route for categorical variables"
                .to_string(),
        ));
    }
    Ok(())
}

/// Full Mahalanobis-route weighting: reference fitted on the concurrent
/// study, distances for every subject, transform with pooled extrema,
/// threshold from the concurrent weights, truncation.
///
/// The returned list covers all subjects in canonical collection order.
/// Concurrent subjects' weights are reported (they set `rho`) but their
/// analysis weight is always 1.
pub fn mahalanobis_weights(
    collection: &StudyCollection,
    schema: &CovariateSchema,
    quantile: f64,
    ridge: f64,
) -> Result<Vec<WeightAssignment>> {
    require_continuous_only(collection, schema)?;
    let reference = fit_mahalanobis_reference(&collection.concurrent, schema, ridge)?;
    let mut raw = Vec::new();
    for (study_id, index, record) in collection.iter_all() {
        let v = schema.similarity_vector(record)?;
        let d = reference.distance(&v.continuous)?;
        raw.push((
            SubjectKey {
                study_id: study_id.to_string(),
                index,
            },
            d,
        ));
    }
    let (mut assignments, _) = transform_scores(&raw, ScoreOrientation::DistanceLike)?;
    let concurrent_weights: Vec<f64> = assignments
        .iter()
        .filter(|a| a.subject.study_id == collection.concurrent_id)
        .map(|a| a.weight)
        .collect();
    let rho = compute_threshold(&concurrent_weights, quantile)?;
    apply_truncation(&mut assignments, rho);
    Ok(assignments)
}

#[derive(Debug, Clone)]
struct GaussianComponent {
    mean: DVector<f64>,
    chol_lower: DMatrix<f64>,
    log_det: f64,
}

impl GaussianComponent {
    fn new(mean: DVector<f64>, covariance: &DMatrix<f64>) -> Option<Self> {
        let chol_lower = cholesky_lower(covariance)?;
        let log_det = 2.0 * chol_lower.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Some(Self {
            mean,
            chol_lower,
            log_det,
        })
    }

    fn log_pdf(&self, x: &DVector<f64>) -> f64 {
        let diff = x - &self.mean;
        let z = self
            .chol_lower
            .solve_lower_triangular(&diff)
            .expect("Cholesky factor is nonsingular");
        -0.5 * (self.mean.len() as f64 * LN_2PI + self.log_det + z.norm_squared())
    }
}

/// Per-category multinomial probabilities and Gaussian components over the
/// continuous similarity block, fitted to concurrent data.
///
/// Categories are level combinations of all categorical similarity
/// variables (including the event flag when present), flattened mixed-radix
/// with the first variable varying slowest.
#[derive(Debug, Clone)]
pub struct SimilarityModel {
    pub category_probs: Vec<f64>,
    pub category_counts: Vec<usize>,
    pub component_means: Vec<DVector<f64>>,
    pub component_covariances: Vec<DMatrix<f64>>,
    /// Fallback covariance (all records pooled) used for sparse categories.
    pub pooled_covariance: DMatrix<f64>,
    pub radices: Vec<usize>,
    /// Whether the fitted records carried an event flag in the categorical
    /// block; scoring records must match.
    pub with_event: bool,
    components: Vec<Option<GaussianComponent>>,
}

impl SimilarityModel {
    pub fn category_count(&self) -> usize {
        self.category_probs.len()
    }
}

fn pooled_with_ridge(records: &[Vec<f64>], ridge: f64) -> Result<(DMatrix<f64>, f64)> {
    let (_, mut cov) = sample_mean_cov(records);
    let dim = cov.nrows();
    let mut effective = ridge;
    for _ in 0..12 {
        let mut candidate = cov.clone();
        for i in 0..dim {
            candidate[(i, i)] += effective;
        }
        if cholesky_lower(&candidate).is_some() {
            cov = candidate;
            return Ok((cov, effective));
        }
        effective = if effective > 0.0 { effective * 10.0 } else { 1e-10 };
    }
    Err(Error::Rank(
        "pooled covariance could not be regularized to positive definite".to_string(),
    ))
}

/// Fits the similarity model on the given records (the caller passes the
/// concurrent control arm).
///
/// Category probabilities are empirical proportions. Means are per-category
/// whenever a category is non-empty. Covariances are per-category sample
/// covariances (plus ridge) for categories with at least
/// `min_category_count` members, and the pooled covariance otherwise. Empty
/// categories carry probability 0 and are never evaluated with positive
/// mass.
pub fn fit_similarity_model(
    records: &[SubjectRecord],
    schema: &CovariateSchema,
    ridge: f64,
    min_category_count: usize,
) -> Result<SimilarityModel> {
    if records.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot fit a similarity model on an empty record set".to_string(),
        ));
    }
    let with_event = records[0].event.is_some();
    let radices = schema.category_radices(with_event);
    let n_categories = CovariateSchema::category_count(&radices);
    let dim = schema.continuous_similarity_len();
    if dim == 0 {
        return Err(Error::InvalidArgument(
            "similarity model needs a non-empty continuous block".to_string(),
        ));
    }

    let mut vectors: Vec<Vec<f64>> = Vec::with_capacity(records.len());
    let mut categories: Vec<usize> = Vec::with_capacity(records.len());
    for r in records {
        let v = schema.similarity_vector(r)?;
        categories.push(CovariateSchema::flat_category_index(&v.categorical, &radices));
        vectors.push(v.continuous);
    }

    let (pooled_covariance, effective_ridge) = pooled_with_ridge(&vectors, ridge)?;
    let n = records.len() as f64;
    let mut category_probs = vec![0.0; n_categories];
    let mut category_counts = vec![0usize; n_categories];
    let mut component_means = Vec::with_capacity(n_categories);
    let mut component_covariances = Vec::with_capacity(n_categories);
    let mut components = Vec::with_capacity(n_categories);

    for k in 0..n_categories {
        let members: Vec<Vec<f64>> = vectors
            .iter()
            .zip(&categories)
            .filter(|(_, &c)| c == k)
            .map(|(v, _)| v.clone())
            .collect();
        category_counts[k] = members.len();
        category_probs[k] = members.len() as f64 / n;
        if members.is_empty() {
            // Placeholder: probability 0 means it is never evaluated.
            component_means.push(DVector::zeros(dim));
            component_covariances.push(DMatrix::identity(dim, dim));
            components.push(None);
            continue;
        }
        let (mean, mut cov) = sample_mean_cov(&members);
        let use_pooled = members.len() < min_category_count.max(2);
        if use_pooled {
            cov = pooled_covariance.clone();
        } else {
            for i in 0..dim {
                cov[(i, i)] += effective_ridge;
            }
            if cholesky_lower(&cov).is_none() {
                cov = pooled_covariance.clone();
            }
        }
        let component = GaussianComponent::new(mean.clone(), &cov)
            .ok_or_else(|| Error::Rank("component covariance not positive definite".to_string()))?;
        component_means.push(mean);
        component_covariances.push(cov);
        components.push(Some(component));
    }

    Ok(SimilarityModel {
        category_probs,
        category_counts,
        component_means,
        component_covariances,
        pooled_covariance,
        radices,
        with_event,
        components,
    })
}

/// Plugin (empirical Bayes) similarity score: `p_k * phi(D | mu_k, Sigma_k)`
/// for the record's category `k`; 0 when the category has no mass.
pub fn similarity_density(
    record: &SubjectRecord,
    model: &SimilarityModel,
    schema: &CovariateSchema,
) -> Result<f64> {
    let v = schema.similarity_vector(record)?;
    if v.categorical.len() != model.radices.len() {
        return Err(Error::SchemaMismatch(format!(
            "record has {} categorical similarity entries, model was fitted with {}",
            v.categorical.len(),
            model.radices.len()
        )));
    }
    let k = CovariateSchema::flat_category_index(&v.categorical, &model.radices);
    let p = model.category_probs[k];
    if p == 0.0 {
        return Ok(0.0);
    }
    let component = model.components[k]
        .as_ref()
        .expect("non-empty category has a component");
    let x = DVector::from_row_slice(&v.continuous);
    Ok(p * component.log_pdf(&x).exp())
}

/// Hyperparameters of the conjugate Dirichlet + normal-inverse-Wishart
/// similarity prior used by the posterior-predictive route.
#[derive(Debug, Clone)]
pub struct NiwHyperParams {
    pub mean: DVector<f64>,
    /// Prior precision scalar kappa (pseudo-observations for the mean).
    pub kappa: f64,
    /// Degrees of freedom; must exceed `dim - 1`.
    pub df: f64,
    pub scale: DMatrix<f64>,
    /// Symmetric Dirichlet concentration for the category probabilities.
    pub dirichlet_concentration: f64,
}

impl NiwHyperParams {
    /// Vague data-driven default: prior mean and scale from the sample
    /// moments of the conditioning records, `kappa = 0.01`, `df = dim + 2`,
    /// concentration 1.
    pub fn vague_from(records: &[SubjectRecord], schema: &CovariateSchema) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::InvalidArgument(
                "vague hyperparameters need at least one record".to_string(),
            ));
        }
        let vectors: Vec<Vec<f64>> = records
            .iter()
            .map(|r| schema.similarity_vector(r).map(|v| v.continuous))
            .collect::<Result<_>>()?;
        let dim = vectors[0].len();
        let (mean, cov) = sample_mean_cov(&vectors);
        let ridge = 1e-8 * (cov.diagonal().iter().sum::<f64>() / dim as f64).max(1e-12);
        let mut scale = cov;
        for i in 0..dim {
            scale[(i, i)] += ridge;
        }
        Ok(Self {
            mean,
            kappa: 0.01,
            df: dim as f64 + 2.0,
            scale,
            dirichlet_concentration: 1.0,
        })
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if self.df <= dim as f64 - 1.0 {
            return Err(Error::InvalidArgument(format!(
                "normal-inverse-Wishart degrees of freedom must exceed dim - 1 = {}, got {}",
                dim as f64 - 1.0,
                self.df
            )));
        }
        if self.kappa <= 0.0 || self.dirichlet_concentration <= 0.0 {
            return Err(Error::InvalidArgument(
                "kappa and the Dirichlet concentration must be positive".to_string(),
            ));
        }
        Ok(())
    }
}

/// Multivariate Student-t with explicit scale matrix.
#[derive(Debug, Clone)]
struct StudentT {
    df: f64,
    location: DVector<f64>,
    chol_lower: DMatrix<f64>,
    log_det: f64,
}

impl StudentT {
    fn new(df: f64, location: DVector<f64>, scale: &DMatrix<f64>) -> Result<Self> {
        let chol_lower = cholesky_lower(scale)
            .ok_or_else(|| Error::Rank("Student-t scale not positive definite".to_string()))?;
        let log_det = 2.0 * chol_lower.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(Self {
            df,
            location,
            chol_lower,
            log_det,
        })
    }

    fn log_pdf(&self, x: &DVector<f64>) -> f64 {
        let d = self.location.len() as f64;
        let diff = x - &self.location;
        let z = self
            .chol_lower
            .solve_lower_triangular(&diff)
            .expect("Cholesky factor is nonsingular");
        let quad = z.norm_squared();
        ln_gamma((self.df + d) / 2.0)
            - ln_gamma(self.df / 2.0)
            - 0.5 * d * (self.df * std::f64::consts::PI).ln()
            - 0.5 * self.log_det
            - 0.5 * (self.df + d) * (1.0 + quad / self.df).ln()
    }
}

/// Posterior-predictive parameters of one category under the conjugate
/// Dirichlet + NIW update.
fn niw_posterior_predictive(
    members: &[DVector<f64>],
    prior: &NiwHyperParams,
) -> Result<StudentT> {
    let dim = prior.mean.len();
    let n = members.len() as f64;
    let (mean_n, kappa_n, df_n, scale_n) = if members.is_empty() {
        (prior.mean.clone(), prior.kappa, prior.df, prior.scale.clone())
    } else {
        let mut xbar = DVector::zeros(dim);
        for m in members {
            xbar += m;
        }
        xbar /= n;
        let mut scatter = DMatrix::zeros(dim, dim);
        for m in members {
            let d = m - &xbar;
            scatter += &d * d.transpose();
        }
        let kappa_n = prior.kappa + n;
        let mean_n = (&prior.mean * prior.kappa + &xbar * n) / kappa_n;
        let df_n = prior.df + n;
        let dm = &xbar - &prior.mean;
        let scale_n =
            &prior.scale + scatter + (&dm * dm.transpose()) * (prior.kappa * n / kappa_n);
        (mean_n, kappa_n, df_n, scale_n)
    };
    let t_df = df_n - dim as f64 + 1.0;
    let t_scale = scale_n * ((kappa_n + 1.0) / (kappa_n * t_df));
    StudentT::new(t_df, mean_n, &t_scale)
}

/// Posterior-predictive density of one record given the concurrent data:
/// the Dirichlet-multinomial category probability times the multivariate
/// Student-t predictive of the continuous block under the conjugate NIW
/// update for the record's category.
pub fn predictive_density(
    record: &SubjectRecord,
    concurrent: &[SubjectRecord],
    schema: &CovariateSchema,
    prior: &NiwHyperParams,
) -> Result<f64> {
    if concurrent.is_empty() {
        return Err(Error::InvalidArgument(
            "predictive density needs conditioning records".to_string(),
        ));
    }
    let dim = schema.continuous_similarity_len();
    if dim == 0 {
        return Err(Error::InvalidArgument(
            "predictive density needs a non-empty continuous block".to_string(),
        ));
    }
    prior.validate(dim)?;
    let with_event = concurrent[0].event.is_some();
    let radices = schema.category_radices(with_event);
    let n_categories = CovariateSchema::category_count(&radices);

    let v = schema.similarity_vector(record)?;
    if v.categorical.len() != radices.len() {
        return Err(Error::SchemaMismatch(
            "record and conditioning data disagree on categorical arity".to_string(),
        ));
    }
    let k = CovariateSchema::flat_category_index(&v.categorical, &radices);

    let mut members = Vec::new();
    let mut count_k = 0usize;
    for r in concurrent {
        let rv = schema.similarity_vector(r)?;
        if CovariateSchema::flat_category_index(&rv.categorical, &radices) == k {
            count_k += 1;
            members.push(DVector::from_row_slice(&rv.continuous));
        }
    }
    let a = prior.dirichlet_concentration;
    let category_prob =
        (count_k as f64 + a) / (concurrent.len() as f64 + a * n_categories as f64);
    let predictive = niw_posterior_predictive(&members, prior)?;
    let x = DVector::from_row_slice(&v.continuous);
    Ok(category_prob * predictive.log_pdf(&x).exp())
}

/// Which similarity-model scoring rule to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightMode {
    /// Plugin density at parameter estimates from the concurrent controls.
    EmpiricalBayes,
    /// Conjugate posterior-predictive density given the concurrent controls.
    PosteriorPredictive,
}

/// Similarity-model-route weighting.
///
/// The model conditions on the CONCURRENT CONTROL subjects only; control
/// subjects of every study are scored, the transform pools their extrema
/// (similarity-like orientation), and `rho` is the quantile of the
/// concurrent controls' weights. Treatment-arm records are excluded before
/// scoring and appear with weight 0.
pub fn model_weights(
    collection: &StudyCollection,
    schema: &CovariateSchema,
    quantile: f64,
    mode: WeightMode,
    ridge: f64,
    min_category_count: usize,
) -> Result<Vec<WeightAssignment>> {
    let controls: Vec<SubjectRecord> = collection
        .concurrent
        .iter()
        .filter(|r| !r.is_treatment())
        .cloned()
        .collect();
    if controls.is_empty() {
        return Err(Error::InvalidArgument(
            "similarity-model route needs concurrent control subjects".to_string(),
        ));
    }

    enum Scorer {
        Plugin(SimilarityModel),
        Predictive {
            per_category: Vec<(f64, StudentT)>,
            radices: Vec<usize>,
        },
    }

    let scorer = match mode {
        WeightMode::EmpiricalBayes => Scorer::Plugin(fit_similarity_model(
            &controls,
            schema,
            ridge,
            min_category_count,
        )?),
        WeightMode::PosteriorPredictive => {
            let prior = NiwHyperParams::vague_from(&controls, schema)?;
            prior.validate(schema.continuous_similarity_len())?;
            let with_event = controls[0].event.is_some();
            let radices = schema.category_radices(with_event);
            let n_categories = CovariateSchema::category_count(&radices);
            let mut grouped: Vec<Vec<DVector<f64>>> = vec![Vec::new(); n_categories];
            for r in &controls {
                let v = schema.similarity_vector(r)?;
                grouped[CovariateSchema::flat_category_index(&v.categorical, &radices)]
                    .push(DVector::from_row_slice(&v.continuous));
            }
            let a = prior.dirichlet_concentration;
            let n = controls.len() as f64;
            let per_category = grouped
                .iter()
                .map(|members| {
                    let prob = (members.len() as f64 + a) / (n + a * n_categories as f64);
                    niw_posterior_predictive(members, &prior).map(|t| (prob, t))
                })
                .collect::<Result<Vec<_>>>()?;
            Scorer::Predictive {
                per_category,
                radices,
            }
        }
    };

    let mut raw = Vec::new();
    let mut excluded_keys = Vec::new();
    for (study_id, index, record) in collection.iter_all() {
        let key = SubjectKey {
            study_id: study_id.to_string(),
            index,
        };
        if record.is_treatment() {
            excluded_keys.push(key);
            continue;
        }
        let score = match &scorer {
            Scorer::Plugin(model) => similarity_density(record, model, schema)?,
            Scorer::Predictive {
                per_category,
                radices,
                ..
            } => {
                let v = schema.similarity_vector(record)?;
                if v.categorical.len() != radices.len() {
                    return Err(Error::SchemaMismatch(
                        "record and conditioning data disagree on categorical arity".to_string(),
                    ));
                }
                let k = CovariateSchema::flat_category_index(&v.categorical, radices);
                let (prob, t) = &per_category[k];
                prob * t.log_pdf(&DVector::from_row_slice(&v.continuous)).exp()
            }
        };
        raw.push((key, score));
    }
    drop(scorer);

    let (mut scored, _) = transform_scores(&raw, ScoreOrientation::SimilarityLike)?;
    let concurrent_weights: Vec<f64> = scored
        .iter()
        .filter(|a| a.subject.study_id == collection.concurrent_id)
        .map(|a| a.weight)
        .collect();
    let rho = compute_threshold(&concurrent_weights, quantile)?;
    apply_truncation(&mut scored, rho);

    let mut excluded: Vec<WeightAssignment> = excluded_keys
        .into_iter()
        .map(|key| {
            let mut a = WeightAssignment::excluded(key);
            a.threshold = Some(rho);
            a
        })
        .collect();

    // Reassemble in canonical collection order.
    let mut by_key: std::collections::HashMap<SubjectKey, WeightAssignment> = scored
        .drain(..)
        .chain(excluded.drain(..))
        .map(|a| (a.subject.clone(), a))
        .collect();
    let mut out = Vec::with_capacity(by_key.len());
    for (study_id, index, _) in collection.iter_all() {
        let key = SubjectKey {
            study_id: study_id.to_string(),
            index,
        };
        out.push(by_key.remove(&key).expect("every subject was assigned"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::HistoricalStudy;
    use approx::assert_relative_eq;

    fn rec(study: &str, arm: u8, outcome: f64, x: &[f64]) -> SubjectRecord {
        SubjectRecord {
            study_id: study.to_string(),
            arm,
            outcome,
            event: None,
            continuous_covariates: x.to_vec(),
            categorical_covariates: vec![],
        }
    }

    fn key(study: &str, index: usize) -> SubjectKey {
        SubjectKey {
            study_id: study.to_string(),
            index,
        }
    }

    #[test]
    fn reference_matches_hand_computed_moments() {
        // Points (0,0), (2,0), (0,2), (2,2): mean (1,1), covariance (4/3) I.
        let schema = CovariateSchema::continuous_only(&["a", "b"]).with_outcome_in_similarity(false);
        let records: Vec<SubjectRecord> = [[0.0, 0.0], [2.0, 0.0], [0.0, 2.0], [2.0, 2.0]]
            .iter()
            .map(|p| rec("cur", 0, 0.0, p))
            .collect();
        let r = fit_mahalanobis_reference(&records, &schema, 0.0).unwrap();
        assert_relative_eq!(r.mean[0], 1.0);
        assert_relative_eq!(r.mean[1], 1.0);
        assert_relative_eq!(r.covariance[(0, 0)], 4.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(r.covariance[(1, 1)], 4.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(r.covariance[(0, 1)], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn repeated_point_with_ridge_gives_ridge_identity() {
        let schema = CovariateSchema::continuous_only(&["a"]).with_outcome_in_similarity(false);
        let records = vec![rec("cur", 0, 0.0, &[0.7]); 5];
        let r = fit_mahalanobis_reference(&records, &schema, 1e-6).unwrap();
        assert_relative_eq!(r.covariance[(0, 0)], 1e-6, epsilon = 1e-18);
    }

    #[test]
    fn rank_deficient_covariance_is_an_error() {
        let schema =
            CovariateSchema::continuous_only(&["a", "b", "c"]).with_outcome_in_similarity(false);
        let records = vec![
            rec("cur", 0, 0.0, &[1.0, 0.0, 0.0]),
            rec("cur", 0, 0.0, &[0.0, 1.0, 0.0]),
        ];
        assert!(matches!(
            fit_mahalanobis_reference(&records, &schema, 0.0),
            Err(Error::Rank(_))
        ));
    }

    #[test]
    fn distance_examples() {
        let schema =
            CovariateSchema::continuous_only(&["a", "b"]).with_outcome_in_similarity(false);
        // Build a reference with mean 0 and covariance diag(9, 1) from data.
        let records = vec![
            rec("cur", 0, 0.0, &[3.0, 1.0]),
            rec("cur", 0, 0.0, &[-3.0, -1.0]),
            rec("cur", 0, 0.0, &[3.0, -1.0]),
            rec("cur", 0, 0.0, &[-3.0, 1.0]),
        ];
        let r = fit_mahalanobis_reference(&records, &schema, 0.0).unwrap();
        assert_relative_eq!(r.covariance[(0, 0)], 12.0, epsilon = 1e-12);
        // At the mean the distance is 0.
        assert_relative_eq!(r.distance(&[0.0, 0.0]).unwrap(), 0.0);
        // Hand-built diag(9,1): d((3,0)) = 3 / sqrt(9) = 1.
        let diag = MahalanobisReference {
            mean: DVector::zeros(2),
            covariance: DMatrix::from_diagonal(&DVector::from_row_slice(&[9.0, 1.0])),
            ridge: 0.0,
            chol_lower: cholesky_lower(&DMatrix::from_diagonal(&DVector::from_row_slice(&[
                9.0, 1.0,
            ])))
            .unwrap(),
        };
        assert_relative_eq!(diag.distance(&[3.0, 0.0]).unwrap(), 1.0, epsilon = 1e-12);
        let identity = MahalanobisReference {
            mean: DVector::zeros(2),
            covariance: DMatrix::identity(2, 2),
            ridge: 0.0,
            chol_lower: DMatrix::identity(2, 2),
        };
        assert_relative_eq!(
            identity.distance(&[1.0, 1.0]).unwrap(),
            2.0_f64.sqrt(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn transform_distance_like_endpoints() {
        let raw = vec![(key("s", 0), 0.0), (key("s", 1), 5.0), (key("s", 2), 10.0)];
        let (a, _) = transform_scores(&raw, ScoreOrientation::DistanceLike).unwrap();
        assert_eq!(a[0].weight, 1.0);
        assert_relative_eq!(a[1].weight, 0.5);
        assert_eq!(a[2].weight, 0.0);
    }

    #[test]
    fn transform_similarity_like_matches_hand_computation() {
        let raw = vec![(key("s", 0), 0.1), (key("s", 1), 0.2), (key("s", 2), 0.4)];
        let (a, _) = transform_scores(&raw, ScoreOrientation::SimilarityLike).unwrap();
        assert_eq!(a[0].weight, 0.0);
        assert_relative_eq!(a[1].weight, 1.0 / 3.0, epsilon = 1e-12);
        assert_eq!(a[2].weight, 1.0);
    }

    #[test]
    fn degenerate_scores_give_zero_weights() {
        let raw = vec![(key("s", 0), 2.0), (key("s", 1), 2.0)];
        let (a, _) = transform_scores(&raw, ScoreOrientation::DistanceLike).unwrap();
        assert!(a.iter().all(|w| w.weight == 0.0));
        assert!(transform_scores(&[], ScoreOrientation::DistanceLike).is_err());
    }

    #[test]
    fn threshold_matches_linear_interpolation_quantile() {
        let w: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        assert_relative_eq!(compute_threshold(&w, 0.05).unwrap(), 0.145, epsilon = 1e-12);
        assert_eq!(compute_threshold(&[0.3, 0.3], 0.4).unwrap(), 0.3);
        assert!(compute_threshold(&w, 0.0).is_err());
        assert!(compute_threshold(&w, 1.0).is_err());
        assert!(compute_threshold(&[], 0.05).is_err());
    }

    #[test]
    fn truncation_is_strict_and_idempotent() {
        let raw = vec![(key("s", 0), 0.0), (key("s", 1), 5.0), (key("s", 2), 10.0)];
        let (mut a, _) = transform_scores(&raw, ScoreOrientation::DistanceLike).unwrap();
        apply_truncation(&mut a, 0.5);
        assert_eq!(a[0].truncated_weight, 1.0);
        // Weight exactly equal to the threshold is zeroed.
        assert_eq!(a[1].truncated_weight, 0.0);
        assert_eq!(a[2].truncated_weight, 0.0);
        let snapshot = a.to_vec();
        apply_truncation(&mut a, 0.5);
        assert_eq!(a, snapshot);
    }

    fn two_study_collection() -> (StudyCollection, CovariateSchema) {
        let schema = CovariateSchema::continuous_only(&["x"]);
        // Similarity vectors are (x, y); mean is (1.5, 1.5).
        let concurrent = vec![
            rec("cur", 0, 0.1, &[0.0]),
            rec("cur", 0, 0.9, &[1.0]),
            rec("cur", 1, 2.2, &[2.0]),
            rec("cur", 0, 2.8, &[3.0]),
        ];
        let historical = vec![HistoricalStudy {
            id: "hist".to_string(),
            subjects: vec![rec("hist", 0, 1.5, &[1.5]), rec("hist", 0, 40.0, &[40.0])],
        }];
        (StudyCollection::new("cur", concurrent, historical), schema)
    }

    #[test]
    fn mahalanobis_weights_extreme_subjects() {
        let (collection, schema) = two_study_collection();
        let assignments = mahalanobis_weights(&collection, &schema, 0.05, 0.0).unwrap();
        // The far-out historical subject is the pooled max: weight exactly 0.
        let far = assignments
            .iter()
            .find(|a| a.subject == key("hist", 1))
            .unwrap();
        assert_eq!(far.weight, 0.0);
        assert_eq!(far.truncated_weight, 0.0);
        // A historical subject at the concurrent mean is the pooled min: weight 1.
        let near = assignments
            .iter()
            .find(|a| a.subject == key("hist", 0))
            .unwrap();
        assert_eq!(near.weight, 1.0);
        assert!(near.truncated_weight > 0.0);
        // All assignments carry the same threshold.
        let rho = assignments[0].threshold.unwrap();
        assert!(assignments.iter().all(|a| a.threshold == Some(rho)));
    }

    #[test]
    fn mahalanobis_route_rejects_categorical_schemas() {
        let (mut collection, _) = two_study_collection();
        let schema = CovariateSchema::new(
            vec!["x".to_string()],
            vec!["sex".to_string()],
            vec![vec!["F".to_string(), "M".to_string()]],
        )
        .unwrap();
        for (_, _, r) in collection.iter_all() {
            let _ = r;
        }
        for r in collection
            .concurrent
            .iter_mut()
            .chain(collection.historical[0].subjects.iter_mut())
        {
            r.categorical_covariates = vec!["F".to_string()];
        }
        assert!(matches!(
            mahalanobis_weights(&collection, &schema, 0.05, 0.0),
            Err(Error::Config(_))
        ));
    }

    fn categorical_schema() -> CovariateSchema {
        CovariateSchema::new(
            vec!["x".to_string()],
            vec!["g".to_string()],
            vec![vec!["a".to_string(), "b".to_string()]],
        )
        .unwrap()
        .with_outcome_in_similarity(false)
    }

    fn cat_rec(study: &str, arm: u8, x: f64, g: &str) -> SubjectRecord {
        SubjectRecord {
            study_id: study.to_string(),
            arm,
            outcome: 0.0,
            event: None,
            continuous_covariates: vec![x],
            categorical_covariates: vec![g.to_string()],
        }
    }

    #[test]
    fn similarity_model_proportions_and_sparse_fallback() {
        let schema = categorical_schema();
        let mut records: Vec<SubjectRecord> =
            (0..30).map(|i| cat_rec("cur", 0, i as f64 * 0.1, "a")).collect();
        records.extend((0..70).map(|i| cat_rec("cur", 0, 1.0 + i as f64 * 0.1, "b")));
        let model = fit_similarity_model(&records, &schema, 1e-9, 5).unwrap();
        assert_relative_eq!(model.category_probs[0], 0.3, epsilon = 1e-12);
        assert_relative_eq!(model.category_probs[1], 0.7, epsilon = 1e-12);

        // A single-member category falls back to the pooled covariance.
        let mut sparse: Vec<SubjectRecord> =
            (0..20).map(|i| cat_rec("cur", 0, i as f64 * 0.1, "a")).collect();
        sparse.push(cat_rec("cur", 0, 0.5, "b"));
        let model = fit_similarity_model(&sparse, &schema, 1e-9, 5).unwrap();
        assert_eq!(model.category_counts[1], 1);
        assert_eq!(model.component_covariances[1], model.pooled_covariance);
        // Its mean is still the member itself.
        assert_relative_eq!(model.component_means[1][0], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn empty_category_has_zero_mass_and_zero_density() {
        let schema = categorical_schema();
        let records: Vec<SubjectRecord> =
            (0..20).map(|i| cat_rec("cur", 0, i as f64 * 0.1, "a")).collect();
        let model = fit_similarity_model(&records, &schema, 1e-9, 5).unwrap();
        assert_eq!(model.category_probs[1], 0.0);
        let d = similarity_density(&cat_rec("h", 0, 0.3, "b"), &model, &schema).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn density_at_component_mode_matches_gaussian_normalizer() {
        // Two continuous dims, identity covariance, p_k = 0.5: density at the
        // mode is 0.5 / (2 pi).
        let schema = CovariateSchema::new(
            vec!["u".to_string(), "v".to_string()],
            vec!["g".to_string()],
            vec![vec!["a".to_string(), "b".to_string()]],
        )
        .unwrap()
        .with_outcome_in_similarity(false);
        let mut model = fit_similarity_model(
            &[
                SubjectRecord {
                    study_id: "c".into(),
                    arm: 0,
                    outcome: 0.0,
                    event: None,
                    continuous_covariates: vec![0.0, 0.0],
                    categorical_covariates: vec!["a".into()],
                },
                SubjectRecord {
                    study_id: "c".into(),
                    arm: 0,
                    outcome: 0.0,
                    event: None,
                    continuous_covariates: vec![0.0, 0.0],
                    categorical_covariates: vec!["b".into()],
                },
            ],
            &schema,
            1e-6,
            1,
        )
        .unwrap();
        // Overwrite the fitted component with the exact target component.
        model.component_means[0] = DVector::zeros(2);
        model.component_covariances[0] = DMatrix::identity(2, 2);
        model.components[0] =
            Some(GaussianComponent::new(DVector::zeros(2), &DMatrix::identity(2, 2)).unwrap());
        model.category_probs = vec![0.5, 0.5];
        let r = SubjectRecord {
            study_id: "h".into(),
            arm: 0,
            outcome: 0.0,
            event: None,
            continuous_covariates: vec![0.0, 0.0],
            categorical_covariates: vec!["a".into()],
        };
        let d = similarity_density(&r, &model, &schema).unwrap();
        assert_relative_eq!(d, 0.5 / (2.0 * std::f64::consts::PI), epsilon = 1e-12);
    }

    #[test]
    fn continuous_only_model_is_single_gaussian() {
        let schema = CovariateSchema::continuous_only(&["x"]).with_outcome_in_similarity(false);
        let records: Vec<SubjectRecord> =
            (0..40).map(|i| rec("cur", 0, 0.0, &[(i as f64) * 0.05])).collect();
        let model = fit_similarity_model(&records, &schema, 1e-9, 5).unwrap();
        assert_eq!(model.category_count(), 1);
        assert_relative_eq!(model.category_probs[0], 1.0);
        let d = similarity_density(&rec("h", 0, 0.0, &[1.0]), &model, &schema).unwrap();
        let expected = stats::log_normal_pdf(
            1.0,
            model.component_means[0][0],
            model.component_covariances[0][(0, 0)],
        )
        .exp();
        assert_relative_eq!(d, expected, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_niw_df_is_an_error() {
        let schema = CovariateSchema::continuous_only(&["x"]).with_outcome_in_similarity(false);
        let records: Vec<SubjectRecord> =
            (0..5).map(|i| rec("cur", 0, 0.0, &[i as f64])).collect();
        let mut prior = NiwHyperParams::vague_from(&records, &schema).unwrap();
        prior.df = 0.0;
        assert!(matches!(
            predictive_density(&records[0], &records, &schema, &prior),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn empty_category_keeps_positive_predictive_mass() {
        let schema = categorical_schema();
        let records: Vec<SubjectRecord> =
            (0..20).map(|i| cat_rec("cur", 0, i as f64 * 0.1, "a")).collect();
        let prior = NiwHyperParams::vague_from(&records, &schema).unwrap();
        let d = predictive_density(&cat_rec("h", 0, 0.5, "b"), &records, &schema, &prior).unwrap();
        assert!(d > 0.0, "Dirichlet smoothing keeps unseen categories positive");
    }

    #[test]
    fn model_weights_zero_out_treatment_arms() {
        let schema = CovariateSchema::continuous_only(&["x"]);
        let concurrent: Vec<SubjectRecord> = (0..20)
            .map(|i| rec("cur", u8::from(i % 2 == 0), i as f64 * 0.1, &[i as f64 * 0.05]))
            .collect();
        let historical = vec![HistoricalStudy {
            id: "hist".to_string(),
            subjects: vec![
                rec("hist", 0, 0.5, &[0.3]),
                rec("hist", 1, 0.6, &[0.4]),
            ],
        }];
        let collection = StudyCollection::new("cur", concurrent, historical);
        let assignments =
            model_weights(&collection, &schema, 0.05, WeightMode::EmpiricalBayes, 1e-9, 5)
                .unwrap();
        let treated = assignments
            .iter()
            .find(|a| a.subject == key("hist", 1))
            .unwrap();
        assert_eq!(treated.weight, 0.0);
        assert_eq!(treated.truncated_weight, 0.0);
        assert!(treated.raw_score.is_nan());
        // Canonical order is preserved.
        let keys: Vec<usize> = assignments
            .iter()
            .filter(|a| a.subject.study_id == "cur")
            .map(|a| a.subject.index)
            .collect();
        assert_eq!(keys, (0..20).collect::<Vec<_>>());
    }
}

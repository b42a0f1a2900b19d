//! Subject-level data representation shared by every other module.
//!
//! A dataset is a [`StudyCollection`]: one concurrent study plus zero or more
//! historical studies, each a list of [`SubjectRecord`]s. A
//! [`CovariateSchema`] fixes covariate names, the categorical level universes
//! and which variables enter the similarity vector. All types are immutable
//! after construction; validation reports violations as data rather than
//! failing fast, so a whole file can be audited in one pass.

use crate::error::{Error, Result};

/// One patient: identity, arm assignment, outcome and covariates.
///
/// `outcome` is the response for the normal-linear model or a time-to-event
/// (months) for the survival model. `event` is `Some(1)` for an observed
/// event, `Some(0)` for right censoring and `None` when the dataset carries
/// no event information (normal model).
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub study_id: String,
    /// 0 = control, 1 = treatment.
    pub arm: u8,
    pub outcome: f64,
    pub event: Option<u8>,
    pub continuous_covariates: Vec<f64>,
    pub categorical_covariates: Vec<String>,
}

impl SubjectRecord {
    pub fn is_treatment(&self) -> bool {
        self.arm == 1
    }
}

/// One historical study: identifier plus its subjects, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoricalStudy {
    pub id: String,
    pub subjects: Vec<SubjectRecord>,
}

/// The concurrent study plus the historical studies available for borrowing.
///
/// Construction is permissive; [`validate_collection`] reports invariant
/// violations without failing, so ill-formed input can be fully diagnosed.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyCollection {
    pub concurrent_id: String,
    pub concurrent: Vec<SubjectRecord>,
    pub historical: Vec<HistoricalStudy>,
}

impl StudyCollection {
    pub fn new(
        concurrent_id: impl Into<String>,
        concurrent: Vec<SubjectRecord>,
        historical: Vec<HistoricalStudy>,
    ) -> Self {
        Self {
            concurrent_id: concurrent_id.into(),
            concurrent,
            historical,
        }
    }

    pub fn historical_subject_count(&self) -> usize {
        self.historical.iter().map(|h| h.subjects.len()).sum()
    }

    /// Historical subjects in canonical order: studies in collection order,
    /// subjects in record order. Every module that assigns one value per
    /// historical subject uses this order.
    pub fn iter_historical(&self) -> impl Iterator<Item = (&str, usize, &SubjectRecord)> {
        self.historical.iter().flat_map(|study| {
            study
                .subjects
                .iter()
                .enumerate()
                .map(move |(i, r)| (study.id.as_str(), i, r))
        })
    }

    /// All subjects, concurrent first, in canonical order.
    pub fn iter_all(&self) -> impl Iterator<Item = (&str, usize, &SubjectRecord)> {
        self.concurrent
            .iter()
            .enumerate()
            .map(move |(i, r)| (self.concurrent_id.as_str(), i, r))
            .chain(self.iter_historical())
    }
}

/// Declares covariate names, categorical level universes and which variables
/// enter the similarity vector.
///
/// Levels are fixed by the schema rather than inferred per file, so the
/// concurrent and historical datasets cannot silently disagree on level
/// universes.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateSchema {
    pub continuous_names: Vec<String>,
    pub categorical_names: Vec<String>,
    /// One ordered level list per categorical name.
    pub categorical_levels: Vec<Vec<String>>,
    /// Append the outcome to the continuous similarity block (default true).
    pub include_outcome_in_similarity: bool,
    /// Append the event flag to the categorical similarity block when events
    /// are present (default true; only meaningful for survival data).
    pub include_event_in_similarity: bool,
}

impl CovariateSchema {
    pub fn new(
        continuous_names: Vec<String>,
        categorical_names: Vec<String>,
        categorical_levels: Vec<Vec<String>>,
    ) -> Result<Self> {
        if categorical_names.len() != categorical_levels.len() {
            return Err(Error::SchemaMismatch(format!(
                "{} categorical names but {} level lists",
                categorical_names.len(),
                categorical_levels.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for name in continuous_names.iter().chain(categorical_names.iter()) {
            if !seen.insert(name.as_str()) {
                return Err(Error::SchemaMismatch(format!(
                    "duplicate covariate name `{name}`"
                )));
            }
        }
        for (name, levels) in categorical_names.iter().zip(&categorical_levels) {
            if levels.is_empty() {
                return Err(Error::SchemaMismatch(format!(
                    "categorical `{name}` declares no levels"
                )));
            }
        }
        Ok(Self {
            continuous_names,
            categorical_names,
            categorical_levels,
            include_outcome_in_similarity: true,
            include_event_in_similarity: true,
        })
    }

    /// Schema with continuous covariates only.
    pub fn continuous_only(names: &[&str]) -> Self {
        Self::new(names.iter().map(|s| s.to_string()).collect(), vec![], vec![])
            .expect("continuous-only schema is always well formed")
    }

    pub fn with_outcome_in_similarity(mut self, include: bool) -> Self {
        self.include_outcome_in_similarity = include;
        self
    }

    pub fn with_event_in_similarity(mut self, include: bool) -> Self {
        self.include_event_in_similarity = include;
        self
    }

    /// Length of the continuous similarity block.
    pub fn continuous_similarity_len(&self) -> usize {
        self.continuous_names.len() + usize::from(self.include_outcome_in_similarity)
    }

    pub fn level_index(&self, categorical_idx: usize, label: &str) -> Option<usize> {
        self.categorical_levels[categorical_idx]
            .iter()
            .position(|l| l == label)
    }

    /// Radices of the categorical similarity block: one entry per categorical
    /// covariate (its level count) plus a final 2 when the event flag is
    /// included. The flat category index is mixed-radix with the FIRST
    /// variable varying slowest.
    pub fn category_radices(&self, with_event: bool) -> Vec<usize> {
        let mut radices: Vec<usize> = self.categorical_levels.iter().map(|l| l.len()).collect();
        if with_event && self.include_event_in_similarity {
            radices.push(2);
        }
        radices
    }

    /// Number of level combinations for the given radices (1 when empty).
    pub fn category_count(radices: &[usize]) -> usize {
        radices.iter().product()
    }

    /// Flat mixed-radix index of a categorical similarity vector.
    pub fn flat_category_index(indices: &[usize], radices: &[usize]) -> usize {
        debug_assert_eq!(indices.len(), radices.len());
        indices
            .iter()
            .zip(radices)
            .fold(0usize, |acc, (&i, &r)| acc * r + i)
    }

    /// Splits a record into the similarity vector used for weighting.
    ///
    /// The continuous part concatenates the continuous covariates followed by
    /// the outcome (when `include_outcome_in_similarity`). The categorical
    /// part concatenates the categorical covariate level indices followed by
    /// the event flag (when `include_event_in_similarity` and the record has
    /// one). The ordering is exactly the schema's declaration order.
    pub fn similarity_vector(&self, record: &SubjectRecord) -> Result<SimilarityVector> {
        if record.continuous_covariates.len() != self.continuous_names.len() {
            return Err(Error::SchemaMismatch(format!(
                "record in study `{}` has {} continuous covariates, schema declares {}",
                record.study_id,
                record.continuous_covariates.len(),
                self.continuous_names.len()
            )));
        }
        if record.categorical_covariates.len() != self.categorical_names.len() {
            return Err(Error::SchemaMismatch(format!(
                "record in study `{}` has {} categorical covariates, schema declares {}",
                record.study_id,
                record.categorical_covariates.len(),
                self.categorical_names.len()
            )));
        }
        let mut continuous = record.continuous_covariates.clone();
        if self.include_outcome_in_similarity {
            continuous.push(record.outcome);
        }
        let mut categorical = Vec::with_capacity(self.categorical_names.len() + 1);
        for (idx, label) in record.categorical_covariates.iter().enumerate() {
            match self.level_index(idx, label) {
                Some(level) => categorical.push(level),
                None => {
                    return Err(Error::SchemaMismatch(format!(
                        "unknown level `{label}` for categorical `{}`",
                        self.categorical_names[idx]
                    )))
                }
            }
        }
        if self.include_event_in_similarity {
            if let Some(event) = record.event {
                categorical.push(usize::from(event != 0));
            }
        }
        Ok(SimilarityVector {
            continuous,
            categorical,
        })
    }
}

/// The (continuous, categorical-index) pair a record contributes to
/// similarity scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityVector {
    pub continuous: Vec<f64>,
    pub categorical: Vec<usize>,
}

/// One invariant violation found by [`validate_collection`].
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub study_id: String,
    /// Position of the offending record within its study, when applicable.
    pub record_index: Option<usize>,
    pub field: String,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.record_index {
            Some(i) => write!(
                f,
                "study `{}` record {}: {} ({})",
                self.study_id, i, self.message, self.field
            ),
            None => write!(f, "study `{}`: {} ({})", self.study_id, self.message, self.field),
        }
    }
}

fn record_violations(
    study_id: &str,
    index: usize,
    record: &SubjectRecord,
    schema: &CovariateSchema,
    out: &mut Vec<Violation>,
) {
    let mut push = |field: &str, message: String| {
        out.push(Violation {
            study_id: study_id.to_string(),
            record_index: Some(index),
            field: field.to_string(),
            message,
        })
    };
    if record.arm > 1 {
        push("arm", format!("arm must be 0 or 1, got {}", record.arm));
    }
    if let Some(event) = record.event {
        if event > 1 {
            push("event", format!("event must be 0 or 1, got {event}"));
        }
    }
    if record.study_id != study_id {
        push(
            "study_id",
            format!(
                "record carries study_id `{}` but belongs to study `{study_id}`",
                record.study_id
            ),
        );
    }
    if !record.outcome.is_finite() {
        push("outcome", "outcome is missing or non-finite".to_string());
    }
    if record.continuous_covariates.len() != schema.continuous_names.len() {
        push(
            "continuous_covariates",
            format!(
                "expected {} continuous covariates, got {}",
                schema.continuous_names.len(),
                record.continuous_covariates.len()
            ),
        );
    } else {
        for (j, v) in record.continuous_covariates.iter().enumerate() {
            if !v.is_finite() {
                push(
                    "continuous_covariates",
                    format!(
                        "covariate `{}` is missing or non-finite",
                        schema.continuous_names[j]
                    ),
                );
            }
        }
    }
    if record.categorical_covariates.len() != schema.categorical_names.len() {
        push(
            "categorical_covariates",
            format!(
                "expected {} categorical covariates, got {}",
                schema.categorical_names.len(),
                record.categorical_covariates.len()
            ),
        );
    } else {
        for (j, label) in record.categorical_covariates.iter().enumerate() {
            if schema.level_index(j, label).is_none() {
                push(
                    "categorical_covariates",
                    format!(
                        "`{label}` is not a declared level of `{}`",
                        schema.categorical_names[j]
                    ),
                );
            }
        }
    }
}

/// Checks every collection and record invariant against the schema.
///
/// Returns one entry per violation; an empty list means the collection is
/// well formed. Violations are data, not faults: the function never fails.
pub fn validate_collection(
    collection: &StudyCollection,
    schema: &CovariateSchema,
) -> Vec<Violation> {
    let mut out = Vec::new();
    if collection.concurrent.is_empty() {
        out.push(Violation {
            study_id: collection.concurrent_id.clone(),
            record_index: None,
            field: "concurrent".to_string(),
            message: "concurrent study has no records".to_string(),
        });
    }
    let mut seen_ids = std::collections::HashSet::new();
    for study in &collection.historical {
        if study.subjects.is_empty() {
            out.push(Violation {
                study_id: study.id.clone(),
                record_index: None,
                field: "historical".to_string(),
                message: "historical study has no records".to_string(),
            });
        }
        if study.id == collection.concurrent_id {
            out.push(Violation {
                study_id: study.id.clone(),
                record_index: None,
                field: "study_id".to_string(),
                message: "historical study id matches the concurrent study id".to_string(),
            });
        }
        if !seen_ids.insert(study.id.clone()) {
            out.push(Violation {
                study_id: study.id.clone(),
                record_index: None,
                field: "study_id".to_string(),
                message: "duplicate historical study id".to_string(),
            });
        }
    }
    for (study_id, index, record) in collection.iter_all() {
        record_violations(study_id, index, record, schema, &mut out);
    }
    // Event presence must be uniform, otherwise similarity vectors disagree
    // in arity across records.
    let with_event = collection.iter_all().filter(|(_, _, r)| r.event.is_some()).count();
    let total = collection.concurrent.len() + collection.historical_subject_count();
    if with_event != 0 && with_event != total {
        out.push(Violation {
            study_id: collection.concurrent_id.clone(),
            record_index: None,
            field: "event".to_string(),
            message: format!(
                "event flag present on {with_event} of {total} records; presence must be uniform"
            ),
        });
    }
    out
}

/// Reports every record whose outcome is not strictly positive.
///
/// Run in addition to [`validate_collection`] when the survival model is
/// selected; time-to-event outcomes must be positive.
pub fn validate_survival_outcomes(collection: &StudyCollection) -> Vec<Violation> {
    collection
        .iter_all()
        .filter(|(_, _, r)| !(r.outcome > 0.0))
        .map(|(study_id, index, r)| Violation {
            study_id: study_id.to_string(),
            record_index: Some(index),
            field: "outcome".to_string(),
            message: format!("survival outcome must be > 0, got {}", r.outcome),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(study: &str, arm: u8, outcome: f64, x: &[f64]) -> SubjectRecord {
        SubjectRecord {
            study_id: study.to_string(),
            arm,
            outcome,
            event: None,
            continuous_covariates: x.to_vec(),
            categorical_covariates: vec![],
        }
    }

    fn small_collection() -> StudyCollection {
        StudyCollection::new(
            "cur",
            vec![record("cur", 0, 0.5, &[1.0]), record("cur", 1, 1.5, &[0.2])],
            vec![HistoricalStudy {
                id: "hist".to_string(),
                subjects: vec![record("hist", 0, 0.1, &[0.9])],
            }],
        )
    }

    #[test]
    fn well_formed_collection_has_no_violations() {
        let schema = CovariateSchema::continuous_only(&["x"]);
        assert!(validate_collection(&small_collection(), &schema).is_empty());
    }

    #[test]
    fn arm_out_of_range_is_reported_once() {
        let schema = CovariateSchema::continuous_only(&["x"]);
        let mut collection = small_collection();
        collection.concurrent[0].arm = 2;
        let violations = validate_collection(&collection, &schema);
        assert_eq!(violations.len(), 1);
        assert_eq!(violations[0].field, "arm");
        assert_eq!(violations[0].record_index, Some(0));
    }

    #[test]
    fn covariate_arity_mismatch_is_reported() {
        let schema = CovariateSchema::continuous_only(&["a", "b"]);
        let mut collection = small_collection();
        for r in collection
            .concurrent
            .iter_mut()
            .chain(collection.historical[0].subjects.iter_mut())
        {
            r.continuous_covariates = vec![1.0, 2.0];
        }
        collection.historical[0].subjects[0].continuous_covariates = vec![1.0, 2.0, 3.0];
        let violations = validate_collection(&collection, &schema);
        assert_eq!(violations.len(), 1);
        assert_eq!(violations[0].study_id, "hist");
        assert_eq!(violations[0].field, "continuous_covariates");
    }

    #[test]
    fn missing_continuous_value_is_a_violation() {
        let schema = CovariateSchema::continuous_only(&["x"]);
        let mut collection = small_collection();
        collection.concurrent[1].continuous_covariates[0] = f64::NAN;
        let violations = validate_collection(&collection, &schema);
        assert_eq!(violations.len(), 1);
        assert!(violations[0].message.contains("missing"));
    }

    #[test]
    fn survival_positivity_checked_separately() {
        let collection = small_collection();
        assert!(validate_collection(&collection, &CovariateSchema::continuous_only(&["x"]))
            .is_empty());
        let bad = validate_survival_outcomes(&collection);
        assert!(bad.is_empty());
        let mut collection = collection;
        collection.concurrent[0].outcome = 0.0;
        assert_eq!(validate_survival_outcomes(&collection).len(), 1);
    }

    #[test]
    fn similarity_vector_appends_outcome() {
        let schema = CovariateSchema::continuous_only(&["x"]);
        let r = record("cur", 0, 0.4, &[1.2]);
        let v = schema.similarity_vector(&r).unwrap();
        assert_eq!(v.continuous, vec![1.2, 0.4]);
        assert!(v.categorical.is_empty());
    }

    #[test]
    fn similarity_vector_respects_outcome_flag() {
        let schema = CovariateSchema::continuous_only(&["x"]).with_outcome_in_similarity(false);
        let r = record("cur", 0, 0.4, &[1.2]);
        let v = schema.similarity_vector(&r).unwrap();
        assert_eq!(v.continuous, vec![1.2]);
    }

    #[test]
    fn similarity_vector_orders_categorical_then_event() {
        let schema = CovariateSchema::new(
            vec!["age".to_string()],
            vec!["sex".to_string()],
            vec![vec!["F".to_string(), "M".to_string()]],
        )
        .unwrap();
        let r = SubjectRecord {
            study_id: "cur".to_string(),
            arm: 0,
            outcome: 7.8,
            event: Some(1),
            continuous_covariates: vec![61.0],
            categorical_covariates: vec!["M".to_string()],
        };
        let v = schema.similarity_vector(&r).unwrap();
        assert_eq!(v.continuous, vec![61.0, 7.8]);
        assert_eq!(v.categorical, vec![1, 1]);
    }

    #[test]
    fn unknown_level_is_schema_mismatch() {
        let schema = CovariateSchema::new(
            vec![],
            vec!["sex".to_string()],
            vec![vec!["F".to_string(), "M".to_string()]],
        )
        .unwrap();
        let r = SubjectRecord {
            study_id: "cur".to_string(),
            arm: 0,
            outcome: 1.0,
            event: None,
            continuous_covariates: vec![],
            categorical_covariates: vec!["X".to_string()],
        };
        assert!(matches!(
            schema.similarity_vector(&r),
            Err(Error::SchemaMismatch(_))
        ));
    }

    #[test]
    fn similarity_vector_is_pure() {
        let schema = CovariateSchema::continuous_only(&["x"]);
        let r = record("cur", 0, 0.4, &[1.2]);
        assert_eq!(
            schema.similarity_vector(&r).unwrap(),
            schema.similarity_vector(&r).unwrap()
        );
    }

    #[test]
    fn mixed_event_presence_is_reported() {
        let schema = CovariateSchema::continuous_only(&["x"]);
        let mut collection = small_collection();
        collection.concurrent[0].event = Some(1);
        let violations = validate_collection(&collection, &schema);
        assert_eq!(violations.len(), 1);
        assert_eq!(violations[0].field, "event");
    }

    #[test]
    fn flat_category_index_is_mixed_radix() {
        let radices = [2, 3];
        assert_eq!(CovariateSchema::flat_category_index(&[0, 0], &radices), 0);
        assert_eq!(CovariateSchema::flat_category_index(&[0, 2], &radices), 2);
        assert_eq!(CovariateSchema::flat_category_index(&[1, 0], &radices), 3);
        assert_eq!(CovariateSchema::flat_category_index(&[1, 2], &radices), 5);
        assert_eq!(CovariateSchema::category_count(&radices), 6);
        assert_eq!(CovariateSchema::category_count(&[]), 1);
    }
}

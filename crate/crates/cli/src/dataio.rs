//! Dataset file format: comma-delimited UTF-8 with a required header row.
//!
//! Columns are `study_id, arm, outcome[, event], <covariate columns...>`.
//! The `event` column is optional (survival data only). Covariate columns
//! declared categorical in the configuration keep their labels; all other
//! covariate columns are continuous. Empty numeric cells parse as missing
//! and are rejected at validation, not at parse time.
//!
//! Emission is canonical: continuous covariates first (file order), then
//! categorical ones; floats use the shortest round-trip representation;
//! lines end with LF. Parsing an emitted file and re-emitting it reproduces
//! the data rows byte for byte.

use std::collections::HashMap;
use std::path::Path;

use ipdborrow::data::{CovariateSchema, HistoricalStudy, StudyCollection, SubjectRecord};

use crate::config::ResolvedConfig;
use crate::error::{CliError, Result};
use crate::report::format_float;

/// A parsed dataset: the collection, the schema in effect, and bookkeeping
/// for error reporting and canonical re-emission.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub collection: StudyCollection,
    pub schema: CovariateSchema,
    pub has_event_column: bool,
    /// 1-based file line for each (study id, record index).
    pub line_numbers: HashMap<(String, usize), usize>,
}

fn parse_float(field: &str, column: &str, line: usize) -> Result<f64> {
    let field = field.trim();
    if field.is_empty() {
        return Ok(f64::NAN); // missing; validation reports it
    }
    field
        .parse::<f64>()
        .map_err(|_| CliError::parse(format!("line {line}: column `{column}` is not a number: `{field}`")))
}

fn parse_flag(field: &str, column: &str, line: usize) -> Result<Option<u8>> {
    let field = field.trim();
    if field.is_empty() {
        return Ok(None);
    }
    field
        .parse::<u8>()
        .map(Some)
        .map_err(|_| CliError::parse(format!("line {line}: column `{column}` is not an integer: `{field}`")))
}

/// Parses and assembles a dataset. The concurrent study is selected by id
/// (default: the first study id appearing in the file); remaining studies
/// become historical in order of first appearance.
pub fn ingest(
    path: &Path,
    config: &ResolvedConfig,
    current_study: Option<&str>,
) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| CliError::parse(format!("cannot read `{}`: {e}", path.display())))?;

    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| CliError::parse(format!("bad header row: {e}")))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let mut seen = std::collections::HashSet::new();
    for h in &headers {
        if !seen.insert(h.as_str()) {
            return Err(CliError::parse(format!("duplicate header column `{h}`")));
        }
    }
    if headers.len() < 3 || headers[0] != "study_id" || headers[1] != "arm" || headers[2] != "outcome"
    {
        return Err(CliError::parse(
            "header must start with `study_id,arm,outcome` (then optional `event`, then covariates)"
                .to_string(),
        ));
    }
    let has_event_column = headers.get(3).map(|h| h == "event").unwrap_or(false);
    let covariate_start = if has_event_column { 4 } else { 3 };
    let covariate_names: Vec<String> = headers[covariate_start..].to_vec();

    let declared: Vec<(String, Vec<String>)> = config.categorical_declarations();
    for (name, _) in &declared {
        if !covariate_names.iter().any(|c| c == name) {
            return Err(CliError::config(format!(
                "schema declares categorical `{name}` but the data has no such column"
            )));
        }
    }
    let categorical_names: Vec<String> = covariate_names
        .iter()
        .filter(|c| declared.iter().any(|(n, _)| n == *c))
        .cloned()
        .collect();
    let categorical_levels: Vec<Vec<String>> = categorical_names
        .iter()
        .map(|c| {
            declared
                .iter()
                .find(|(n, _)| n == c)
                .map(|(_, levels)| levels.clone())
                .unwrap()
        })
        .collect();
    let continuous_names: Vec<String> = covariate_names
        .iter()
        .filter(|c| !categorical_names.contains(c))
        .cloned()
        .collect();
    let continuous_positions: Vec<usize> = covariate_names
        .iter()
        .enumerate()
        .filter(|(_, c)| continuous_names.contains(c))
        .map(|(i, _)| i)
        .collect();
    let categorical_positions: Vec<usize> = covariate_names
        .iter()
        .enumerate()
        .filter(|(_, c)| categorical_names.contains(c))
        .map(|(i, _)| i)
        .collect();

    let mut schema = CovariateSchema::new(continuous_names, categorical_names, categorical_levels)
        .map_err(|e| CliError::config(e.to_string()))?;
    if let Some(flag) = config.get_bool("schema.include_outcome")? {
        schema = schema.with_outcome_in_similarity(flag);
    }
    if let Some(flag) = config.get_bool("schema.include_event")? {
        schema = schema.with_event_in_similarity(flag);
    }

    // Studies in order of first appearance.
    let mut study_order: Vec<String> = Vec::new();
    let mut by_study: HashMap<String, Vec<SubjectRecord>> = HashMap::new();
    let mut line_numbers = HashMap::new();
    for (row_index, record) in reader.records().enumerate() {
        let line = row_index + 2; // header is line 1
        let record = record.map_err(|e| CliError::parse(format!("line {line}: {e}")))?;
        if record.len() != headers.len() {
            return Err(CliError::parse(format!(
                "line {line}: {} fields, header has {}",
                record.len(),
                headers.len()
            )));
        }
        let study_id = record[0].trim().to_string();
        if study_id.is_empty() {
            return Err(CliError::parse(format!("line {line}: empty study_id")));
        }
        let arm = parse_flag(&record[1], "arm", line)?
            .ok_or_else(|| CliError::parse(format!("line {line}: empty arm")))?;
        let outcome = parse_float(&record[2], "outcome", line)?;
        let event = if has_event_column {
            parse_flag(&record[3], "event", line)?
        } else {
            None
        };
        let covariates: Vec<&str> = (covariate_start..headers.len())
            .map(|i| record.get(i).unwrap_or(""))
            .collect();
        let continuous_covariates = continuous_positions
            .iter()
            .map(|&i| parse_float(covariates[i], &covariate_names[i], line))
            .collect::<Result<Vec<f64>>>()?;
        let categorical_covariates = categorical_positions
            .iter()
            .map(|&i| covariates[i].trim().to_string())
            .collect();

        if !by_study.contains_key(&study_id) {
            study_order.push(study_id.clone());
        }
        let records = by_study.entry(study_id.clone()).or_default();
        line_numbers.insert((study_id.clone(), records.len()), line);
        records.push(SubjectRecord {
            study_id,
            arm,
            outcome,
            event,
            continuous_covariates,
            categorical_covariates,
        });
    }
    if study_order.is_empty() {
        return Err(CliError::parse("data file has no rows".to_string()));
    }

    let concurrent_id = match current_study {
        Some(id) => {
            if !by_study.contains_key(id) {
                return Err(CliError::config(format!(
                    "current study `{id}` does not appear in the data (studies: {})",
                    study_order.join(", ")
                )));
            }
            id.to_string()
        }
        None => study_order[0].clone(),
    };
    let concurrent = by_study.remove(&concurrent_id).expect("id checked above");
    let historical = study_order
        .iter()
        .filter(|id| **id != concurrent_id)
        .map(|id| HistoricalStudy {
            id: id.clone(),
            subjects: by_study.remove(id).expect("grouped above"),
        })
        .collect();

    Ok(Dataset {
        collection: StudyCollection::new(concurrent_id, concurrent, historical),
        schema,
        has_event_column,
        line_numbers,
    })
}

/// Canonical emission of a dataset (see module docs). Rows are written
/// concurrent study first, then historical studies in collection order.
pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let schema = &dataset.schema;
    let mut out = String::new();
    out.push_str("study_id,arm,outcome");
    if dataset.has_event_column {
        out.push_str(",event");
    }
    for name in schema.continuous_names.iter().chain(&schema.categorical_names) {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for (study_id, _, record) in dataset.collection.iter_all() {
        out.push_str(study_id);
        out.push(',');
        out.push_str(&record.arm.to_string());
        out.push(',');
        out.push_str(&format_float(record.outcome));
        if dataset.has_event_column {
            out.push(',');
            if let Some(e) = record.event {
                out.push_str(&e.to_string());
            }
        }
        for v in &record.continuous_covariates {
            out.push(',');
            out.push_str(&format_float(*v));
        }
        for label in &record.categorical_covariates {
            out.push(',');
            out.push_str(label);
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

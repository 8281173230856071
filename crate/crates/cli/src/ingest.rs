//! Panel CSV reading and writing.
//!
//! Input contract: a header row, columns for unit, period, outcome and
//! cohort plus any covariates, rows in any order. `cohort` holds the first
//! treated period or the literal `never`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use stagdid::panel::{validate_panel, PanelDataset, RawRow};

use crate::error::{CliError, CliResult};

pub const NEVER_TOKEN: &str = "never";
pub const SQUARED_SUFFIX: &str = "_sq";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMap {
    pub unit: String,
    pub period: String,
    pub outcome: String,
    pub cohort: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap {
            unit: "unit".into(),
            period: "period".into(),
            outcome: "outcome".into(),
            cohort: "cohort".into(),
        }
    }
}

/// Covariates to load: plain columns, then `<name>_sq` for each squared request.
pub fn covariate_names(covariates: &[String], squared: &[String]) -> Vec<String> {
    covariates
        .iter()
        .cloned()
        .chain(squared.iter().map(|s| format!("{s}{SQUARED_SUFFIX}")))
        .collect()
}

fn parse_number(field: &str, what: &str, line: u64) -> CliResult<Option<f64>> {
    let field = field.trim();
    if field.is_empty() || field.eq_ignore_ascii_case("na") {
        return Ok(None);
    }
    field.parse::<f64>().map(Some).map_err(|_| {
        CliError::new(
            "INPUT_PARSE",
            format!("line {line}: {what} `{field}` is not a number"),
        )
    })
}

/// Read and validate a panel.
pub fn read_panel<R: Read>(
    reader: R,
    columns: &ColumnMap,
    covariates: &[String],
    squared: &[String],
) -> CliResult<PanelDataset> {
    let mut csv = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = csv.headers()?.clone();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::unknown_column(name))
    };
    let unit = find(&columns.unit)?;
    let period = find(&columns.period)?;
    let outcome = find(&columns.outcome)?;
    let cohort = find(&columns.cohort)?;
    let plain = covariates
        .iter()
        .map(|c| find(c))
        .collect::<CliResult<Vec<_>>>()?;
    let squares = squared
        .iter()
        .map(|c| find(c))
        .collect::<CliResult<Vec<_>>>()?;

    let mut rows = Vec::new();
    for record in csv.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |i: usize| record.get(i).unwrap_or("");
        let period_label = field(period).parse::<i64>().map_err(|_| {
            CliError::new(
                "INPUT_PARSE",
                format!("line {line}: period `{}` is not an integer", field(period)),
            )
        })?;
        let cohort_field = field(cohort);
        let cohort_label = if cohort_field.eq_ignore_ascii_case(NEVER_TOKEN) {
            None
        } else {
            Some(cohort_field.parse::<i64>().map_err(|_| {
                CliError::new(
                    "INPUT_PARSE",
                    format!("line {line}: cohort `{cohort_field}` is neither a period nor `{NEVER_TOKEN}`"),
                )
            })?)
        };
        let mut values = Vec::with_capacity(plain.len() + squares.len());
        for (&i, name) in plain.iter().zip(covariates) {
            values.push(parse_number(field(i), name, line)?);
        }
        for (&i, name) in squares.iter().zip(squared) {
            values.push(parse_number(field(i), name, line)?.map(|v| v * v));
        }
        rows.push(RawRow {
            unit: field(unit).to_string(),
            period: period_label,
            outcome: parse_number(field(outcome), "outcome", line)?,
            cohort: cohort_label,
            covariates: values,
        });
    }
    Ok(validate_panel(
        &rows,
        &covariate_names(covariates, squared),
    )?)
}

/// Write a panel in the input format with default column names. Numbers use
/// the shortest representation that parses back to the same value.
pub fn write_panel<W: Write>(writer: W, panel: &PanelDataset) -> CliResult<()> {
    let mut csv = csv::Writer::from_writer(writer);
    let mut header = vec![
        "unit".to_string(),
        "period".into(),
        "outcome".into(),
        "cohort".into(),
    ];
    header.extend(panel.covariate_names().iter().cloned());
    csv.write_record(&header)?;
    for row in panel.to_rows() {
        let mut record = vec![
            row.unit,
            row.period.to_string(),
            fmt_f64(row.outcome.unwrap_or(f64::NAN)),
            row.cohort
                .map_or_else(|| NEVER_TOKEN.to_string(), |g| g.to_string()),
        ];
        record.extend(
            row.covariates
                .iter()
                .map(|v| fmt_f64(v.unwrap_or(f64::NAN))),
        );
        csv.write_record(&record)?;
    }
    csv.flush()
        .map_err(|e| CliError::new("IO_ERROR", e.to_string()))?;
    Ok(())
}

/// Shortest decimal form that parses back to the same value. Very large or
/// very small magnitudes switch to exponent notation.
pub fn fmt_f64(v: f64) -> String {
    let a = v.abs();
    if a == 0.0 || !a.is_finite() || (1e-5..1e16).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

//! Cohort files: one JSON visit per line.
//!
//! ```text
//! {"subject_id": "S00001", "visit_index": 0, "label": "AD",
//!  "blocks": {"Base": [0.51, ...], "Cog": [...]}, "indicators": {"MMSE": 21.0}}
//! ```
//!
//! `label` may be `null` for unlabeled visits. Lines are grouped by
//! `subject_id` in order of first appearance; visits within a subject are
//! sorted by `visit_index`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::domain::{Cohort, Subject, VisitRecord};
use crate::error::CohortError;
use crate::indicators::IndicatorTable;

pub fn save_cohort(cohort: &Cohort, path: &Path) -> Result<(), CohortError> {
    let mut out = BufWriter::new(File::create(path)?);
    write_cohort(cohort, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn write_cohort<W: Write>(cohort: &Cohort, out: &mut W) -> Result<(), CohortError> {
    for (_, visit) in cohort.visits() {
        let line = serde_json::to_string(visit).map_err(std::io::Error::other)?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn load_cohort(path: &Path) -> Result<Cohort, CohortError> {
    read_cohort(BufReader::new(File::open(path)?))
}

pub fn read_cohort<R: BufRead>(reader: R) -> Result<Cohort, CohortError> {
    let mut width: Option<usize> = None;
    let mut order: Vec<String> = Vec::new();
    let mut by_subject: HashMap<String, Vec<VisitRecord>> = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let visit: VisitRecord = serde_json::from_str(&line).map_err(|e| CohortError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        for (category, block) in &visit.blocks {
            let expected = *width.get_or_insert(block.len());
            if block.len() != expected {
                return Err(CohortError::Schema {
                    line: line_no,
                    message: format!(
                        "{category} block has width {}, expected {expected}",
                        block.len()
                    ),
                });
            }
        }
        visit
            .validate(width.unwrap_or(0))
            .map_err(|e| CohortError::Schema {
                line: line_no,
                message: e.to_string(),
            })?;
        let entry = by_subject.entry(visit.subject_id.clone()).or_insert_with(|| {
            order.push(visit.subject_id.clone());
            Vec::new()
        });
        if entry.iter().any(|v| v.visit_index == visit.visit_index) {
            return Err(CohortError::Schema {
                line: line_no,
                message: format!(
                    "duplicate visit {} for subject {}",
                    visit.visit_index, visit.subject_id
                ),
            });
        }
        entry.push(visit);
    }
    let subjects = order
        .into_iter()
        .map(|id| {
            let mut visits = by_subject.remove(&id).unwrap_or_default();
            visits.sort_by_key(|v| v.visit_index);
            Subject { id, visits }
        })
        .collect();
    Ok(Cohort::new(width.unwrap_or(0), subjects)?)
}

/// Merges a flat indicator CSV (`subject_id,visit_index,<indicator>...`)
/// into an existing cohort. Empty cells are treated as missing. Columns
/// must name indicators of `table`.
pub fn import_indicator_csv(
    cohort: &mut Cohort,
    path: &Path,
    table: &IndicatorTable,
) -> Result<usize, CohortError> {
    let csv_err = |line: usize, e: csv::Error| CohortError::Parse {
        line,
        message: e.to_string(),
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(0, e))?;
    let headers = reader.headers().map_err(|e| csv_err(1, e))?.clone();
    if headers.get(0) != Some("subject_id") || headers.get(1) != Some("visit_index") {
        return Err(CohortError::Schema {
            line: 1,
            message: "header must start with subject_id,visit_index".into(),
        });
    }
    let columns: Vec<&str> = headers.iter().skip(2).collect();
    if let Some(bad) = columns.iter().find(|c| !table.contains(c)) {
        return Err(CohortError::Schema {
            line: 1,
            message: format!("unknown indicator column {bad:?}"),
        });
    }
    let mut updated = 0;
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| csv_err(line, e))?;
        let subject_id = record.get(0).unwrap_or_default();
        let visit_index: u32 = record
            .get(1)
            .unwrap_or_default()
            .trim()
            .parse()
            .map_err(|_| CohortError::Parse {
                line,
                message: "visit_index is not a non-negative integer".into(),
            })?;
        let visit = cohort
            .subjects
            .iter_mut()
            .find(|s| s.id == subject_id)
            .and_then(|s| s.visits.iter_mut().find(|v| v.visit_index == visit_index))
            .ok_or_else(|| CohortError::Schema {
                line,
                message: format!("no visit {subject_id}/{visit_index}"),
            })?;
        for (name, cell) in columns.iter().zip(record.iter().skip(2)) {
            let cell = cell.trim();
            if cell.is_empty() {
                continue;
            }
            let value: f64 = cell.parse().map_err(|_| CohortError::Parse {
                line,
                message: format!("{name}: {cell:?} is not a number"),
            })?;
            visit.indicators.insert(name.to_string(), value);
        }
        updated += 1;
    }
    Ok(updated)
}

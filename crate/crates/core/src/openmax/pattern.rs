//! Abnormal patterns: two out-of-range flags per indicator.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::domain::{CategorySet, VisitRecord};
use crate::error::OpenMaxError;
use crate::indicators::IndicatorTable;

/// Flags laid out as `[outside_ad(i0), outside_cn(i0), outside_ad(i1), ...]`.
/// Missing indicators contribute zeros to both flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AbnormalPattern(pub Vec<f64>);

impl AbnormalPattern {
    pub fn zeros(indicators: usize) -> Self {
        AbnormalPattern(vec![0.0; 2 * indicators])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Pattern from named indicator values. When `available` is given, only
/// indicators produced by those categories are read.
pub fn pattern_from_indicators(
    indicators: &BTreeMap<String, f64>,
    table: &IndicatorTable,
    available: Option<CategorySet>,
) -> AbnormalPattern {
    let mut flags = vec![0.0; 2 * table.len()];
    for (i, range) in table.rows().iter().enumerate() {
        if let Some(set) = available {
            if !set.contains(range.source_category()) {
                continue;
            }
        }
        if let Some(v) = indicators.get(&range.name) {
            flags[2 * i] = f64::from(u8::from(range.outside_ad(*v)));
            flags[2 * i + 1] = f64::from(u8::from(range.outside_cn(*v)));
        }
    }
    AbnormalPattern(flags)
}

/// Indicator values on record for a visit in progress. Categories acquired in
/// the current visit use its values; other indicator sources fall back to the
/// latest earlier visit that measured them. Returns the merged values and the
/// categories they come from.
pub fn indicators_on_record(
    history: &[VisitRecord],
    current: &BTreeMap<String, f64>,
    acquired: CategorySet,
    table: &IndicatorTable,
) -> (BTreeMap<String, f64>, CategorySet) {
    let mut values = BTreeMap::new();
    let mut measured = CategorySet::empty();
    let mut past: Vec<&VisitRecord> = history.iter().collect();
    past.sort_by_key(|v| v.visit_index);
    for range in table.rows() {
        let category = range.source_category();
        let value = if acquired.contains(category) {
            current.get(&range.name)
        } else {
            past.iter()
                .rev()
                .find(|v| v.blocks.contains_key(&category))
                .and_then(|v| v.indicators.get(&range.name))
        };
        if let Some(v) = value {
            values.insert(range.name.clone(), *v);
            measured = measured.with(category);
        }
    }
    (values, measured)
}

pub fn extract_abnormal_pattern(visit: &VisitRecord, table: &IndicatorTable) -> AbnormalPattern {
    pattern_from_indicators(&visit.indicators, table, None)
}

/// Euclidean distance divided by the square root of the dimension, so
/// binary patterns are at most 1 apart.
pub fn normalized_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (sq / a.len().max(1) as f64).sqrt()
}

pub fn min_distance(x: &[f64], centers: &[Vec<f64>]) -> Option<f64> {
    centers
        .iter()
        .map(|c| normalized_distance(x, c))
        .min_by(|a, b| a.total_cmp(b))
}

/// `sqrt(m_own^2 + (1 - m_other)^2)` with `m` the normalized distance to the
/// nearest center of each set.
pub fn pattern_distance(
    x: &[f64],
    own_centers: &[Vec<f64>],
    other_centers: &[Vec<f64>],
) -> Result<f64, OpenMaxError> {
    let own = min_distance(x, own_centers)
        .ok_or_else(|| OpenMaxError::ModelNotFitted("no own-class centers".into()))?;
    let other = min_distance(x, other_centers)
        .ok_or_else(|| OpenMaxError::ModelNotFitted("no other-class centers".into()))?;
    Ok((own * own + (1.0 - other) * (1.0 - other)).sqrt())
}

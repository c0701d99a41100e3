//! Clinical indicator ranges used for abnormal-pattern extraction, and the
//! coarse indicator-to-block encoder used when results arrive as named values.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::ExamCategory;
use crate::error::CohortError;

/// Normal ranges of one indicator for the two known classes (closed intervals).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndicatorRange {
    pub name: String,
    pub ad_low: f64,
    pub ad_high: f64,
    pub cn_low: f64,
    pub cn_high: f64,
    /// Examination category that yields this indicator. Defaults to the
    /// built-in mapping for known names.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<ExamCategory>,
}

impl IndicatorRange {
    fn new(name: &str, ad: (f64, f64), cn: (f64, f64)) -> Self {
        IndicatorRange {
            name: name.to_string(),
            ad_low: ad.0,
            ad_high: ad.1,
            cn_low: cn.0,
            cn_high: cn.1,
            category: None,
        }
    }

    pub fn outside_ad(&self, value: f64) -> bool {
        value < self.ad_low || value > self.ad_high
    }

    pub fn outside_cn(&self, value: f64) -> bool {
        value < self.cn_low || value > self.cn_high
    }

    pub fn source_category(&self) -> ExamCategory {
        self.category
            .unwrap_or_else(|| default_category(&self.name))
    }

    /// Bounds spanning both normal ranges.
    pub fn envelope(&self) -> (f64, f64) {
        (self.ad_low.min(self.cn_low), self.ad_high.max(self.cn_high))
    }

    /// Maps a raw value into [0, 1] relative to the envelope. Values past the
    /// envelope saturate.
    pub fn normalize(&self, value: f64) -> f64 {
        let (lo, hi) = self.envelope();
        let span = if hi > lo { hi - lo } else { 1.0 };
        ((value - lo) / span).clamp(0.0, 1.0)
    }

    /// Inverse of [`normalize`](Self::normalize) inside the envelope.
    pub fn denormalize(&self, unit: f64) -> f64 {
        let (lo, hi) = self.envelope();
        let span = if hi > lo { hi - lo } else { 1.0 };
        lo + unit * span
    }
}

fn default_category(name: &str) -> ExamCategory {
    match name {
        "Psychiatric" | "Neurologic" | "Present_count_21" | "Present_count_28" => {
            ExamCategory::Base
        }
        "mPACCdigit" | "mPACCtrailsB" => ExamCategory::CE,
        _ => ExamCategory::Cog,
    }
}

/// Ordered table of indicator ranges. Order fixes the pattern layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IndicatorTable {
    rows: Vec<IndicatorRange>,
}

impl Default for IndicatorTable {
    /// The fourteen shipped indicators.
    fn default() -> Self {
        let rows = vec![
            IndicatorRange::new("Psychiatric", (0.0, 0.0), (0.0, 0.0)),
            IndicatorRange::new("Neurologic", (0.0, 0.0), (0.0, 0.0)),
            IndicatorRange::new("Present_count_21", (0.0, 6.0), (0.0, 6.0)),
            IndicatorRange::new("Present_count_28", (0.0, 8.0), (0.0, 8.0)),
            IndicatorRange::new("CCI_Score_12", (32.2188, 60.0), (12.0, 13.5634)),
            IndicatorRange::new("CCI_Score_20", (50.3438, 100.0), (20.0, 22.0845)),
            IndicatorRange::new("CDRSB", (2.0, 18.0), (0.0, 0.0)),
            IndicatorRange::new("ADAS11", (10.0, 70.0), (0.0, 11.264)),
            IndicatorRange::new("ADAS13", (18.0, 85.0), (0.0, 17.67)),
            IndicatorRange::new("ADASQ4", (5.0, 10.0), (0.0, 6.0)),
            IndicatorRange::new("MMSE", (0.0, 27.0), (25.0, 30.0)),
            IndicatorRange::new("MOCA", (0.0, 23.0), (26.0, 30.0)),
            IndicatorRange::new("mPACCdigit", (-30.0745, -7.6955), (-5.1733, 4.7304)),
            IndicatorRange::new("mPACCtrailsB", (-29.7277, -6.7798), (-4.8523, 4.3338)),
        ];
        IndicatorTable { rows }
    }
}

impl IndicatorTable {
    pub fn new(rows: Vec<IndicatorRange>) -> Result<Self, CohortError> {
        for r in &rows {
            if !(r.ad_low <= r.ad_high && r.cn_low <= r.cn_high) {
                return Err(CohortError::Config(format!(
                    "indicator {} has an inverted range",
                    r.name
                )));
            }
        }
        Ok(IndicatorTable { rows })
    }

    pub fn load(path: &Path) -> Result<Self, CohortError> {
        let text = std::fs::read_to_string(path)?;
        let rows: Vec<IndicatorRange> =
            serde_json::from_str(&text).map_err(|e| CohortError::Parse {
                line: e.line(),
                message: e.to_string(),
            })?;
        Self::new(rows)
    }

    pub fn rows(&self) -> &[IndicatorRange] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&IndicatorRange> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.get(name).is_some()
    }

    /// Indicators produced by `category`, in table order.
    pub fn for_category(&self, category: ExamCategory) -> impl Iterator<Item = &IndicatorRange> {
        self.rows
            .iter()
            .filter(move |r| r.source_category() == category)
    }
}

/// Encodes named indicator values into a block of `width`: the category's
/// indicators occupy the leading slots in table order (normalized to the
/// range envelope); every other slot is the neutral value 0.5.
pub fn encode_indicator_block(
    category: ExamCategory,
    indicators: &BTreeMap<String, f64>,
    table: &IndicatorTable,
    width: usize,
) -> Vec<f64> {
    let mut block = vec![0.5; width];
    for (slot, range) in table.for_category(category).enumerate() {
        if slot >= width {
            break;
        }
        if let Some(v) = indicators.get(&range.name) {
            block[slot] = range.normalize(*v);
        }
    }
    block
}

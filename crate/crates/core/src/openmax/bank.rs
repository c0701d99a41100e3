//! One OpenMax model per indicator profile.
//!
//! A profile is the set of acquired categories that produce indicators. The
//! pattern of a visit that has only base information differs from one with
//! cognitive scores, so each profile gets its own centers and tails.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{fit_openmax, OpenMaxConfig, OpenMaxModel};
use super::pattern::AbnormalPattern;
use crate::domain::{CategorySet, ExamCategory};
use crate::error::{Error, OpenMaxError};
use crate::indicators::IndicatorTable;

pub const BANK_FORMAT: &str = "dxloop-openmax";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileModel {
    pub profile: CategorySet,
    /// `None` when the profile could not be calibrated; scoring then falls
    /// back to the plain two-class softmax.
    pub model: Option<OpenMaxModel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    pub patterns: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenMaxBank {
    pub format: String,
    pub config: OpenMaxConfig,
    pub sources: CategorySet,
    pub profiles: Vec<ProfileModel>,
}

/// Categories that produce at least one indicator of the table.
pub fn indicator_sources(table: &IndicatorTable) -> CategorySet {
    table.rows().iter().map(|r| r.source_category()).collect()
}

/// Every subset of `sources` that contains base information, smallest first.
pub fn profiles_of(sources: CategorySet) -> Vec<CategorySet> {
    let extra: Vec<ExamCategory> = sources.iter().filter(|c| *c != ExamCategory::Base).collect();
    let mut out: Vec<CategorySet> = (0u32..(1 << extra.len()))
        .map(|bits| {
            extra
                .iter()
                .enumerate()
                .filter(|(i, _)| bits & (1 << i) != 0)
                .map(|(_, c)| *c)
                .chain(std::iter::once(ExamCategory::Base))
                .collect()
        })
        .collect();
    out.sort_by_key(|s: &CategorySet| (s.len(), s.bits()));
    out
}

impl OpenMaxBank {
    /// Fits each profile from the patterns `patterns_for` returns for it
    /// (correctly classified training patterns, AD then CN). Profiles without
    /// any indicator beyond base information are left uncalibrated unless
    /// `calibrate_base_only` is set.
    pub fn fit<F>(
        table: &IndicatorTable,
        config: &OpenMaxConfig,
        calibrate_base_only: bool,
        mut patterns_for: F,
    ) -> Result<Self, OpenMaxError>
    where
        F: FnMut(CategorySet) -> [Vec<AbnormalPattern>; 2],
    {
        config.validate()?;
        let sources = indicator_sources(table);
        let base_only = CategorySet::empty().with(ExamCategory::Base);
        let mut profiles = Vec::new();
        for profile in profiles_of(sources) {
            let patterns = patterns_for(profile);
            let counts = [patterns[0].len(), patterns[1].len()];
            let (model, note) = if profile == base_only && !calibrate_base_only {
                (None, Some("base information only".to_string()))
            } else {
                match fit_openmax([&patterns[0], &patterns[1]], config) {
                    Ok(m) => (Some(m), None),
                    Err(e) => {
                        tracing::warn!(?profile, "profile left uncalibrated: {e}");
                        (None, Some(e.to_string()))
                    }
                }
            };
            profiles.push(ProfileModel {
                profile,
                model,
                note,
                patterns: counts,
            });
        }
        Ok(OpenMaxBank {
            format: BANK_FORMAT.into(),
            config: config.clone(),
            sources,
            profiles,
        })
    }

    pub fn profile_of(&self, acquired: CategorySet) -> CategorySet {
        acquired.intersection(self.sources).with(ExamCategory::Base)
    }

    pub fn model_for(&self, acquired: CategorySet) -> Option<&OpenMaxModel> {
        let key = self.profile_of(acquired);
        self.profiles
            .iter()
            .find(|p| p.profile == key)
            .and_then(|p| p.model.as_ref())
    }

    pub fn calibrated(&self) -> usize {
        self.profiles.iter().filter(|p| p.model.is_some()).count()
    }

    pub fn to_json(&self) -> Result<String, Error> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, Error> {
        let bank: OpenMaxBank = serde_json::from_str(text)?;
        if bank.format != BANK_FORMAT {
            return Err(Error::Invalid(format!("not an OpenMax bank: format {}", bank.format)));
        }
        for p in bank.profiles.iter().filter_map(|p| p.model.as_ref()) {
            if p.ad.centers.is_empty() || p.cn.centers.is_empty() {
                return Err(OpenMaxError::ModelNotFitted("profile without centers".into()).into());
            }
        }
        Ok(bank)
    }

    pub fn save(&self, path: &Path) -> Result<(), Error> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

//! On-disk layout of the pipeline stages inside the `--out` directory.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use dxloop_core::backbone::BackboneModel;
use dxloop_core::cohort::{load_cohort, save_cohort, SplitSpec};
use dxloop_core::domain::Cohort;
use dxloop_core::indicators::IndicatorTable;
use dxloop_core::labeler::{read_labels, write_labels, ExamLabelRecord};
use dxloop_core::openmax::OpenMaxBank;
use dxloop_core::pipeline::{engine_model, Backbones};
use dxloop_core::policy::EngineModel;

use crate::error::CliError;

pub const COHORT: &str = "cohort.jsonl";
pub const SPLIT: &str = "split.json";
pub const STAGE1_MAIN: &str = "backbone-stage1.json";
pub const STAGE1_FIRST: &str = "backbone-stage1-first-visit.json";
pub const MAIN: &str = "backbone.json";
pub const FIRST: &str = "backbone-first-visit.json";
pub const LABELS: &str = "exam-labels.jsonl";
pub const OPENMAX: &str = "openmax.json";
pub const REPORT: &str = "report.json";
pub const TRACES: &str = "traces.csv";
pub const SIMULATION: &str = "simulation.jsonl";

/// Which backbone checkpoints to read or write.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Diagnosis trained, exam heads untouched.
    One,
    /// Exam heads trained on the labels.
    Two,
}

#[derive(Debug, Clone)]
pub struct ArtifactDir {
    root: PathBuf,
}

impl ArtifactDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        ArtifactDir { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn create(&self) -> Result<(), CliError> {
        fs::create_dir_all(&self.root).map_err(|e| CliError::io(&self.root, e))
    }

    /// Path of an artifact that an earlier stage must have written.
    fn require(&self, name: &str, produced_by: &str) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        if path.is_file() {
            Ok(path)
        } else {
            Err(CliError::MissingArtifact {
                path,
                produced_by: produced_by.to_string(),
            })
        }
    }

    pub fn load_cohort(&self) -> Result<Cohort, CliError> {
        let path = self.require(COHORT, "gen-cohort")?;
        load_cohort(&path).map_err(|e| CliError::artifact(&path, e))
    }

    pub fn save_cohort(&self, cohort: &Cohort) -> Result<PathBuf, CliError> {
        let path = self.path(COHORT);
        save_cohort(cohort, &path).map_err(|e| CliError::runtime(&path, e))?;
        Ok(path)
    }

    pub fn load_split(&self) -> Result<SplitSpec, CliError> {
        let path = self.require(SPLIT, "split")?;
        SplitSpec::load(&path).map_err(|e| CliError::artifact(&path, e))
    }

    pub fn save_split(&self, split: &SplitSpec) -> Result<PathBuf, CliError> {
        let path = self.path(SPLIT);
        split.save(&path).map_err(|e| CliError::runtime(&path, e))?;
        Ok(path)
    }

    fn backbone_names(stage: Stage) -> (&'static str, &'static str, &'static str) {
        match stage {
            Stage::One => (STAGE1_MAIN, STAGE1_FIRST, "train"),
            Stage::Two => (MAIN, FIRST, "label-exams"),
        }
    }

    /// The first-visit checkpoint is optional; it is read when present.
    pub fn load_backbones(&self, stage: Stage) -> Result<Backbones, CliError> {
        let (main, first, producer) = Self::backbone_names(stage);
        let main_path = self.require(main, producer)?;
        let main = BackboneModel::load(&main_path).map_err(|e| CliError::artifact(&main_path, e))?;
        let first_path = self.path(first);
        let first_visit = if first_path.is_file() {
            Some(BackboneModel::load(&first_path).map_err(|e| CliError::artifact(&first_path, e))?)
        } else {
            None
        };
        Ok(Backbones { main, first_visit })
    }

    pub fn save_backbones(&self, stage: Stage, backbones: &Backbones) -> Result<Vec<PathBuf>, CliError> {
        let (main, first, _) = Self::backbone_names(stage);
        let main_path = self.path(main);
        backbones.main.save(&main_path).map_err(|e| CliError::runtime(&main_path, e))?;
        let first_path = self.path(first);
        match &backbones.first_visit {
            Some(m) => m.save(&first_path).map_err(|e| CliError::runtime(&first_path, e))?,
            // A stale checkpoint from an earlier configuration would be picked up on load.
            None if first_path.exists() => fs::remove_file(&first_path).map_err(|e| CliError::io(&first_path, e))?,
            None => {}
        }
        Ok(vec![main_path, first_path])
    }

    pub fn load_labels(&self) -> Result<Vec<ExamLabelRecord>, CliError> {
        let path = self.require(LABELS, "label-exams")?;
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        read_labels(&text).map_err(|e| CliError::artifact(&path, e))
    }

    pub fn save_labels(&self, records: &[ExamLabelRecord]) -> Result<PathBuf, CliError> {
        let path = self.path(LABELS);
        let file = fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
        let mut out = BufWriter::new(file);
        write_labels(&mut out, records)
            .and_then(|_| out.flush())
            .map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }

    pub fn load_openmax(&self) -> Result<OpenMaxBank, CliError> {
        let path = self.require(OPENMAX, "fit-openmax")?;
        OpenMaxBank::load(&path).map_err(|e| CliError::artifact(&path, e))
    }

    pub fn save_openmax(&self, bank: &OpenMaxBank) -> Result<PathBuf, CliError> {
        let path = self.path(OPENMAX);
        bank.save(&path).map_err(|e| CliError::runtime(&path, e))?;
        Ok(path)
    }

    /// Trained backbones plus calibration, ready for sessions.
    pub fn load_engine_model(&self, table: &IndicatorTable) -> Result<EngineModel, CliError> {
        let backbones = self.load_backbones(Stage::Two)?;
        let bank = self.load_openmax()?;
        Ok(engine_model(backbones, Some(bank), table.clone()))
    }

    pub fn write_bytes(&self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}

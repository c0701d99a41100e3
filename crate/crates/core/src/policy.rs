//! Live diagnosis sessions: predict, check thresholds, request the next
//! examination, fall back to the cheapest one, or refer as unknown.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneModel, PooledInput};
use crate::domain::{
    sequence_from_blocks, CategorySet, ExamCategory, KnownClass, Outcome, SequenceItem, StrategyMask,
    VisitRecord, NUM_EXAM_HEADS,
};
use crate::error::PolicyError;
use crate::indicators::IndicatorTable;
use crate::openmax::{indicators_on_record, pattern_from_indicators, OpenMaxBank, OpenMaxScore};

pub const DEFAULT_DELTA_AD: f64 = 0.95;
pub const DEFAULT_DELTA_CN: f64 = 0.95;
pub const DEFAULT_DELTA_UNKNOWN: f64 = 0.8;
pub const DEFAULT_GAMMA: f64 = 0.5;

/// Categories an institution can examine. Base is always included.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "CategorySet", into = "CategorySet")]
pub struct InstitutionCapability(CategorySet);

impl InstitutionCapability {
    pub fn full() -> Self {
        InstitutionCapability(CategorySet::full())
    }

    pub fn new(set: CategorySet) -> Result<Self, PolicyError> {
        if !set.contains(ExamCategory::Base) {
            return Err(PolicyError::InvalidCapability);
        }
        Ok(InstitutionCapability(set))
    }

    pub fn available(&self, category: ExamCategory) -> bool {
        self.0.contains(category)
    }

    pub fn set(&self) -> CategorySet {
        self.0
    }
}

impl TryFrom<CategorySet> for InstitutionCapability {
    type Error = PolicyError;
    fn try_from(set: CategorySet) -> Result<Self, PolicyError> {
        Self::new(set)
    }
}

impl From<InstitutionCapability> for CategorySet {
    fn from(c: InstitutionCapability) -> Self {
        c.0
    }
}

/// Probabilities over the three outcomes, named at the API boundary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutcomeProbs {
    pub unknown: f64,
    pub ad: f64,
    pub cn: f64,
}

impl OutcomeProbs {
    /// From the internal layout `[Unknown, AD, CN]`.
    pub fn from_array(p: [f64; 3]) -> Self {
        OutcomeProbs {
            unknown: p[0],
            ad: p[1],
            cn: p[2],
        }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.unknown, self.ad, self.cn]
    }

    pub fn get(&self, outcome: Outcome) -> f64 {
        self.to_array()[outcome.index()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecisionThresholds {
    pub ad: f64,
    pub cn: f64,
    pub unknown: f64,
    /// Request threshold per exam head, in head order.
    pub gamma: [f64; NUM_EXAM_HEADS],
}

impl Default for DecisionThresholds {
    fn default() -> Self {
        DecisionThresholds {
            ad: DEFAULT_DELTA_AD,
            cn: DEFAULT_DELTA_CN,
            unknown: DEFAULT_DELTA_UNKNOWN,
            gamma: [DEFAULT_GAMMA; NUM_EXAM_HEADS],
        }
    }
}

impl DecisionThresholds {
    pub fn with_deltas(ad: f64, cn: f64, unknown: f64) -> Self {
        DecisionThresholds {
            ad,
            cn,
            unknown,
            ..Self::default()
        }
    }

    pub fn delta(&self, outcome: Outcome) -> f64 {
        match outcome {
            Outcome::AD => self.ad,
            Outcome::CN => self.cn,
            Outcome::Unknown => self.unknown,
        }
    }

    /// Thresholds above 1 are accepted for deltas so that a decision can be
    /// disabled outright.
    pub fn validate(&self) -> Result<(), PolicyError> {
        let deltas_ok = [self.ad, self.cn, self.unknown].iter().all(|d| *d > 0.0);
        let gammas_ok = self.gamma.iter().all(|g| *g > 0.0 && *g <= 1.0);
        if deltas_ok && gammas_ok {
            Ok(())
        } else {
            Err(PolicyError::Protocol("thresholds must be positive and gamma at most 1".into()))
        }
    }

    /// Outcome decided by `probs`, checking AD, CN, then Unknown.
    pub fn decide(&self, probs: &OutcomeProbs) -> Option<Outcome> {
        [Outcome::AD, Outcome::CN, Outcome::Unknown]
            .into_iter()
            .find(|o| probs.get(*o) >= self.delta(*o))
    }
}

/// Non-base categories in ascending cost.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ExamCategory>", into = "Vec<ExamCategory>")]
pub struct CostTable(Vec<ExamCategory>);

impl Default for CostTable {
    fn default() -> Self {
        use ExamCategory::*;
        CostTable(vec![Cog, CE, Neur, FB, PE, Blood, Urine, MRI, FDG, AV45, Gene, CSF])
    }
}

impl CostTable {
    pub fn new(order: Vec<ExamCategory>) -> Result<Self, PolicyError> {
        let set: CategorySet = order.iter().copied().collect();
        let exams: CategorySet = ExamCategory::exams().collect();
        if order.len() != NUM_EXAM_HEADS || set != exams {
            return Err(PolicyError::Protocol(
                "cost table must rank each non-base category exactly once".into(),
            ));
        }
        Ok(CostTable(order))
    }

    pub fn order(&self) -> &[ExamCategory] {
        &self.0
    }

    pub fn rank(&self, category: ExamCategory) -> Option<usize> {
        self.0.iter().position(|c| *c == category)
    }
}

impl TryFrom<Vec<ExamCategory>> for CostTable {
    type Error = PolicyError;
    fn try_from(v: Vec<ExamCategory>) -> Result<Self, PolicyError> {
        Self::new(v)
    }
}

impl From<CostTable> for Vec<ExamCategory> {
    fn from(c: CostTable) -> Self {
        c.0
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub thresholds: DecisionThresholds,
    pub costs: CostTable,
}

/// What the model sees of a session.
#[derive(Debug, Clone, Copy)]
pub struct SessionInput<'a> {
    pub history: &'a [VisitRecord],
    pub visit_index: u32,
    pub blocks: &'a BTreeMap<ExamCategory, Vec<f64>>,
    pub indicators: &'a BTreeMap<String, f64>,
    pub acquired: StrategyMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probs: OutcomeProbs,
    pub exam_scores: [f64; NUM_EXAM_HEADS],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub openmax: Option<OpenMaxScore>,
}

/// Anything that turns a session input into outcome probabilities and exam
/// head scores.
pub trait DiagnosisModel: Send + Sync {
    fn predict(&self, input: &SessionInput<'_>) -> Result<Prediction, PolicyError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestReason {
    Head,
    Fallback,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferReason {
    Threshold,
    Exhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Action {
    RequestExam {
        category: ExamCategory,
        reason: RequestReason,
    },
    #[serde(rename = "diagnosis")]
    Diagnose {
        label: KnownClass,
        probabilities: OutcomeProbs,
    },
    ReferUnknown {
        probabilities: OutcomeProbs,
        reason: ReferReason,
    },
}

impl Action {
    pub fn is_terminal(&self) -> bool {
        !matches!(self, Action::RequestExam { .. })
    }

    /// Decided outcome of a terminal action.
    pub fn outcome(&self) -> Option<Outcome> {
        match self {
            Action::RequestExam { .. } => None,
            Action::Diagnose { label, .. } => Some(Outcome::from_known(*label)),
            Action::ReferUnknown { .. } => Some(Outcome::Unknown),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SessionEvent {
    ExamResult {
        category: ExamCategory,
        block: Vec<f64>,
        #[serde(default)]
        indicators: BTreeMap<String, f64>,
    },
    ExamUnavailable {
        category: ExamCategory,
    },
}

impl SessionEvent {
    pub fn category(&self) -> ExamCategory {
        match self {
            SessionEvent::ExamResult { category, .. } | SessionEvent::ExamUnavailable { category } => {
                *category
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum SessionStatus {
    AwaitingExam { category: ExamCategory },
    Diagnosed { label: KnownClass, probabilities: OutcomeProbs },
    ReferredUnknown { probabilities: OutcomeProbs },
}

impl SessionStatus {
    pub fn is_terminal(&self) -> bool {
        !matches!(self, SessionStatus::AwaitingExam { .. })
    }
}

/// One decision step: what was known, what the model said, what was done.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrailEntry {
    pub acquired: StrategyMask,
    pub probabilities: OutcomeProbs,
    pub action: Action,
}

/// Everything needed to open a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionStart {
    #[serde(default)]
    pub subject_id: Option<String>,
    #[serde(default)]
    pub visit_index: u32,
    #[serde(default)]
    pub history: Vec<VisitRecord>,
    pub base_block: Vec<f64>,
    #[serde(default)]
    pub indicators: BTreeMap<String, f64>,
    #[serde(default = "InstitutionCapability::full")]
    pub capability: InstitutionCapability,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub session_id: String,
    pub subject_id: Option<String>,
    pub visit_index: u32,
    pub history: Vec<VisitRecord>,
    pub blocks: BTreeMap<ExamCategory, Vec<f64>>,
    pub indicators: BTreeMap<String, f64>,
    pub acquired: StrategyMask,
    pub capability: InstitutionCapability,
    /// Categories requested this session that turned out to be unavailable.
    pub refused: CategorySet,
    /// Categories requested at any point, for the no-repeat guarantee.
    pub requested: CategorySet,
    pub trail: Vec<TrailEntry>,
    pub status: SessionStatus,
    pub fallbacks: u32,
    #[serde(skip)]
    last_prediction: Option<Prediction>,
}

impl SessionState {
    pub fn input(&self) -> SessionInput<'_> {
        SessionInput {
            history: &self.history,
            visit_index: self.visit_index,
            blocks: &self.blocks,
            indicators: &self.indicators,
            acquired: self.acquired,
        }
    }

    pub fn last_prediction(&self) -> Option<&Prediction> {
        self.last_prediction.as_ref()
    }

    fn eligible(&self, category: ExamCategory) -> bool {
        category != ExamCategory::Base
            && !self.acquired.contains(category)
            && !self.refused.contains(category)
            && self.capability.available(category)
    }
}

/// Lowest-cost category that is not acquired, not refused and available.
pub fn select_fallback_exam(state: &SessionState, costs: &CostTable) -> Option<ExamCategory> {
    costs.order().iter().copied().find(|c| state.eligible(*c))
}

#[derive(Debug)]
pub struct PolicyEngine<M> {
    model: M,
    config: PolicyConfig,
}

impl<M: DiagnosisModel> PolicyEngine<M> {
    pub fn new(model: M, config: PolicyConfig) -> Result<Self, PolicyError> {
        config.thresholds.validate()?;
        Ok(PolicyEngine { model, config })
    }

    pub fn model(&self) -> &M {
        &self.model
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn start_session(
        &self,
        session_id: impl Into<String>,
        start: SessionStart,
    ) -> Result<(SessionState, Action), PolicyError> {
        if !start.capability.available(ExamCategory::Base) {
            return Err(PolicyError::InvalidCapability);
        }
        if start.base_block.is_empty() {
            return Err(PolicyError::Protocol("base block is empty".into()));
        }
        if start.history.iter().any(|v| v.visit_index >= start.visit_index) {
            return Err(PolicyError::Protocol(
                "history must precede the current visit".into(),
            ));
        }
        let mut state = SessionState {
            session_id: session_id.into(),
            subject_id: start.subject_id,
            visit_index: start.visit_index,
            history: start.history,
            blocks: [(ExamCategory::Base, start.base_block)].into_iter().collect(),
            indicators: start.indicators,
            acquired: StrategyMask::base_only(),
            capability: start.capability,
            refused: CategorySet::empty(),
            requested: CategorySet::empty(),
            trail: Vec::new(),
            status: SessionStatus::ReferredUnknown {
                probabilities: OutcomeProbs::from_array([1.0, 0.0, 0.0]),
            },
            fallbacks: 0,
            last_prediction: None,
        };
        let action = self.decide(&mut state)?;
        Ok((state, action))
    }

    pub fn step(&self, state: &mut SessionState, event: SessionEvent) -> Result<Action, PolicyError> {
        let pending = match &state.status {
            SessionStatus::AwaitingExam { category } => *category,
            _ => return Err(PolicyError::SessionClosed(state.session_id.clone())),
        };
        if event.category() != pending {
            return Err(PolicyError::Protocol(format!(
                "expected a result for {pending}, got {}",
                event.category()
            )));
        }
        match event {
            SessionEvent::ExamResult {
                category,
                block,
                indicators,
            } => {
                let width = state.blocks[&ExamCategory::Base].len();
                if block.len() != width {
                    return Err(PolicyError::Protocol(format!(
                        "{category} block has width {}, expected {width}",
                        block.len()
                    )));
                }
                state.blocks.insert(category, block);
                state.indicators.extend(indicators);
                state.acquired = state.acquired.with(category);
                self.decide(state)
            }
            SessionEvent::ExamUnavailable { category } => {
                state.refused.insert(category);
                let prediction = state
                    .last_prediction
                    .clone()
                    .ok_or_else(|| PolicyError::Protocol("no prediction to resume from".into()))?;
                let action = self.select_exam(state, &prediction);
                self.record(state, prediction.probs, action.clone());
                Ok(action)
            }
        }
    }

    /// Rules (1) and (2), then exam selection.
    fn decide(&self, state: &mut SessionState) -> Result<Action, PolicyError> {
        let prediction = self.model.predict(&state.input())?;
        let probs = prediction.probs;
        let sum: f64 = probs.to_array().iter().sum();
        if (sum - 1.0).abs() > 1e-9 || probs.to_array().iter().any(|p| !(*p >= 0.0)) {
            return Err(PolicyError::Model(format!("probabilities {probs:?} are not on the simplex")));
        }
        let action = match self.config.thresholds.decide(&probs) {
            Some(Outcome::Unknown) => Action::ReferUnknown {
                probabilities: probs,
                reason: ReferReason::Threshold,
            },
            Some(outcome) => Action::Diagnose {
                label: if outcome == Outcome::AD { KnownClass::AD } else { KnownClass::CN },
                probabilities: probs,
            },
            None => self.select_exam(state, &prediction),
        };
        state.last_prediction = Some(prediction);
        self.record(state, probs, action.clone());
        Ok(action)
    }

    /// Rules (3) to (5).
    fn select_exam(&self, state: &mut SessionState, prediction: &Prediction) -> Action {
        let gamma = &self.config.thresholds.gamma;
        let by_head = ExamCategory::exams()
            .filter(|c| state.eligible(*c))
            .filter_map(|c| {
                let h = c.head_index()?;
                let s = prediction.exam_scores[h];
                (s >= gamma[h]).then_some((c, s))
            })
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        if let Some((category, _)) = by_head {
            return Action::RequestExam {
                category,
                reason: RequestReason::Head,
            };
        }
        if let Some(category) = select_fallback_exam(state, &self.config.costs) {
            state.fallbacks += 1;
            return Action::RequestExam {
                category,
                reason: RequestReason::Fallback,
            };
        }
        Action::ReferUnknown {
            probabilities: prediction.probs,
            reason: ReferReason::Exhausted,
        }
    }

    fn record(&self, state: &mut SessionState, probs: OutcomeProbs, action: Action) {
        state.status = match &action {
            Action::RequestExam { category, .. } => {
                state.requested.insert(*category);
                SessionStatus::AwaitingExam { category: *category }
            }
            Action::Diagnose { label, probabilities } => SessionStatus::Diagnosed {
                label: *label,
                probabilities: *probabilities,
            },
            Action::ReferUnknown { probabilities, .. } => SessionStatus::ReferredUnknown {
                probabilities: *probabilities,
            },
        };
        state.trail.push(TrailEntry {
            acquired: state.acquired,
            probabilities: probs,
            action,
        });
    }
}

/// Backbones plus OpenMax calibration. First visits go to the first-visit
/// variant when one is present.
#[derive(Debug, Clone)]
pub struct EngineModel {
    pub main: BackboneModel,
    pub first_visit: Option<BackboneModel>,
    pub openmax: Option<OpenMaxBank>,
    pub table: IndicatorTable,
}

impl EngineModel {
    pub fn backbone_for(&self, visit_index: u32) -> &BackboneModel {
        match (&self.first_visit, visit_index) {
            (Some(m), 0) => m,
            _ => &self.main,
        }
    }
}

impl DiagnosisModel for EngineModel {
    fn predict(&self, input: &SessionInput<'_>) -> Result<Prediction, PolicyError> {
        let mut items = Vec::new();
        for visit in input.history {
            for (category, block) in &visit.blocks {
                items.push(SequenceItem {
                    visit_index: visit.visit_index,
                    category: *category,
                    block,
                });
            }
        }
        let seq = sequence_from_blocks(items, input.visit_index, input.blocks, input.acquired)?;
        let backbone = self.backbone_for(input.visit_index);
        let pooled = PooledInput::from_sequence(&seq).map_err(|e| PolicyError::Model(e.to_string()))?;
        let out = backbone
            .forward_pooled(&pooled)
            .map_err(|e| PolicyError::Model(e.to_string()))?;
        let (values, measured) =
            indicators_on_record(input.history, input.indicators, input.acquired.set(), &self.table);
        let calibrated = self.openmax.as_ref().and_then(|b| b.model_for(measured));
        let (probs, openmax) = match calibrated {
            Some(model) => {
                let pattern = pattern_from_indicators(&values, &self.table, Some(measured));
                let score = model
                    .score(&pattern, out.activations)
                    .map_err(|e| PolicyError::Model(e.to_string()))?;
                (score.probs, Some(score))
            }
            None => ([0.0, out.class_probs[0], out.class_probs[1]], None),
        };
        Ok(Prediction {
            probs: OutcomeProbs::from_array(probs),
            exam_scores: out.exam_scores,
            openmax,
        })
    }
}

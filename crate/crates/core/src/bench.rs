//! Evaluation: ROC AUC, operating-point sensitivities, bootstrap intervals and
//! batch simulation of sessions over a test partition.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{Partition, SplitMode, SplitSpec};
use crate::domain::{CategorySet, Cohort, ExamCategory, Label, Outcome, StrategyMask, VisitRecord};
use crate::error::{BenchError, Error};
use crate::indicators::IndicatorTable;
use crate::policy::{
    Action, DecisionThresholds, DiagnosisModel, InstitutionCapability, OutcomeProbs, PolicyEngine,
    RequestReason, SessionEvent, SessionStart,
};
use crate::seed;

pub const BOOTSTRAP_SAMPLE: usize = 2500;
pub const BOOTSTRAP_TRIALS: usize = 2000;
/// Largest share of undefined bootstrap trials before a metric is unstable.
pub const MAX_SKIPPED_SHARE: f64 = 0.1;
pub const DEFAULT_AVAILABILITY: f64 = 0.8;

/// Mann-Whitney AUC with midranks for ties.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64, BenchError> {
    if scores.len() != labels.len() {
        return Err(BenchError::UndefinedMetric(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let positives = labels.iter().filter(|l| **l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(BenchError::UndefinedMetric("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|a, b| scores[*a].total_cmp(&scores[*b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum += mid * order[i..=j].iter().filter(|k| labels[**k]).count() as f64;
        i = j + 1;
    }
    let p = positives as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * negatives as f64))
}

/// Decision from final probabilities: the first outcome meeting its
/// threshold, else a referral.
pub fn decide_outcome(probs: &OutcomeProbs, thresholds: &DecisionThresholds) -> Outcome {
    thresholds.decide(probs).unwrap_or(Outcome::Unknown)
}

/// Per-outcome sensitivity, indexed by `Outcome::index`.
pub fn sensitivities_at_operating_point(
    cases: &[(OutcomeProbs, Outcome)],
    thresholds: &DecisionThresholds,
) -> [Result<f64, BenchError>; 3] {
    let mut hits = [0usize; 3];
    let mut totals = [0usize; 3];
    for (probs, truth) in cases {
        totals[truth.index()] += 1;
        if decide_outcome(probs, thresholds) == *truth {
            hits[truth.index()] += 1;
        }
    }
    [Outcome::Unknown, Outcome::AD, Outcome::CN].map(|o| {
        let i = o.index();
        if totals[i] == 0 {
            Err(BenchError::UndefinedMetric(format!("no {} cases", o.name())))
        } else {
            Ok(hits[i] as f64 / totals[i] as f64)
        }
    })
}

/// Nearest-rank percentile of `p` in [0, 100].
pub fn percentile_nearest_rank(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = (p / 100.0 * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub sample_size: usize,
    pub trials: usize,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            sample_size: BOOTSTRAP_SAMPLE,
            trials: BOOTSTRAP_TRIALS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub lo: f64,
    pub hi: f64,
    pub skipped: usize,
}

/// Percentile bootstrap (2.5th and 97.5th, nearest rank). Trials where the
/// metric is undefined are skipped and counted.
pub fn bootstrap_ci<T, F>(cases: &[T], metric: F, config: &BootstrapConfig) -> Result<ConfidenceInterval, BenchError>
where
    T: Sync,
    F: Fn(&[&T]) -> Result<f64, BenchError> + Sync,
{
    if cases.is_empty() {
        return Err(BenchError::Empty("bootstrap over no cases".into()));
    }
    if config.trials == 0 || config.sample_size == 0 {
        return Err(BenchError::Empty("bootstrap needs trials and a sample size".into()));
    }
    let values: Vec<Option<f64>> = (0..config.trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = seed::stream_rng(config.seed, trial as u64);
            let sample: Vec<&T> = (0..config.sample_size)
                .map(|_| &cases[rng.gen_range(0..cases.len())])
                .collect();
            metric(&sample).ok()
        })
        .collect();
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    let skipped = values.len() - defined.len();
    if defined.is_empty() || skipped as f64 > MAX_SKIPPED_SHARE * config.trials as f64 {
        return Err(BenchError::UnstableMetric {
            skipped,
            trials: config.trials,
        });
    }
    Ok(ConfidenceInterval {
        lo: percentile_nearest_rank(&defined, 2.5),
        hi: percentile_nearest_rank(&defined, 97.5),
        skipped,
    })
}

/// Point estimate with its interval, or the reason it is missing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricEstimate {
    pub value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ci: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl MetricEstimate {
    fn estimate<T, F>(cases: &[T], metric: F, config: &BootstrapConfig) -> Self
    where
        T: Sync,
        F: Fn(&[&T]) -> Result<f64, BenchError> + Sync,
    {
        let all: Vec<&T> = cases.iter().collect();
        let value = match metric(&all) {
            Ok(v) => v,
            Err(e) => {
                return MetricEstimate {
                    value: None,
                    ci: None,
                    note: Some(e.to_string()),
                }
            }
        };
        match bootstrap_ci(cases, &metric, config) {
            // widened to contain the point estimate
            Ok(ci) => MetricEstimate {
                value: Some(value),
                ci: Some([ci.lo.min(value), ci.hi.max(value)]),
                note: None,
            },
            Err(e) => MetricEstimate {
                value: Some(value),
                ci: None,
                note: Some(e.to_string()),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluationConfig {
    pub mode: SplitMode,
    /// Probability that each non-base category is available to a session.
    pub availability: f64,
    pub bootstrap: BootstrapConfig,
    pub seed: u64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            mode: SplitMode::RealWorld,
            availability: DEFAULT_AVAILABILITY,
            bootstrap: BootstrapConfig::default(),
            seed: 0,
        }
    }
}

/// One simulated session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionTrace {
    pub subject_id: String,
    pub visit_index: u32,
    #[serde(with = "crate::domain::label_serde")]
    pub label: Label,
    pub truth: Outcome,
    pub capability: CategorySet,
    pub acquired: StrategyMask,
    pub requested: Vec<ExamCategory>,
    pub decision: Outcome,
    pub probabilities: OutcomeProbs,
    pub steps: usize,
    pub fallbacks: u32,
    pub refusals: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub mode: SplitMode,
    pub sessions: usize,
    pub thresholds: DecisionThresholds,
    pub class_counts: BTreeMap<String, usize>,
    pub auc: BTreeMap<String, MetricEstimate>,
    pub sensitivity: BTreeMap<String, MetricEstimate>,
    pub accuracy: MetricEstimate,
    /// Sessions that acquired each category.
    pub exam_usage: BTreeMap<ExamCategory, usize>,
    /// Sessions per final acquired set.
    pub strategy_census: BTreeMap<String, usize>,
    /// Requests that an institution could not perform.
    pub refusals: usize,
    /// Requests made by the cost fallback rather than an exam head.
    pub fallbacks: u64,
}

pub fn mask_name(mask: StrategyMask) -> String {
    mask.iter().map(|c| c.name()).collect::<Vec<_>>().join("+")
}

/// Capability drawn per visit from a stream keyed by the visit, so it does not
/// depend on simulation order.
pub fn sample_capability(config: &EvaluationConfig, visit: &VisitRecord) -> InstitutionCapability {
    let stream = seed::stable_hash(&format!("{}#{}", visit.subject_id, visit.visit_index));
    let mut rng = seed::stream_rng(seed::derive_seed(config.seed, 40), stream);
    let mut set = CategorySet::empty().with(ExamCategory::Base);
    for c in ExamCategory::exams() {
        if rng.gen_bool(config.availability) {
            set.insert(c);
        }
    }
    InstitutionCapability::new(set).expect("base included")
}

fn indicators_from(
    visit: &VisitRecord,
    table: &IndicatorTable,
    category: ExamCategory,
) -> BTreeMap<String, f64> {
    visit
        .indicators
        .iter()
        .filter(|(name, _)| table.get(name).map(|r| r.source_category()) == Some(category))
        .map(|(k, v)| (k.clone(), *v))
        .collect()
}

/// Runs one session for `visit`, answering requests from the visit's own
/// blocks; categories the visit lacks are reported unavailable.
pub fn simulate_visit<M: DiagnosisModel>(
    engine: &PolicyEngine<M>,
    history: &[VisitRecord],
    visit: &VisitRecord,
    capability: InstitutionCapability,
    table: &IndicatorTable,
) -> Result<SessionTrace, Error> {
    let base = visit
        .blocks
        .get(&ExamCategory::Base)
        .ok_or(crate::error::DomainError::MaskWithoutBase)?;
    let start = SessionStart {
        subject_id: Some(visit.subject_id.clone()),
        visit_index: visit.visit_index,
        history: history.to_vec(),
        base_block: base.clone(),
        indicators: indicators_from(visit, table, ExamCategory::Base),
        capability,
    };
    let id = format!("{}#{}", visit.subject_id, visit.visit_index);
    let (mut state, mut action) = engine.start_session(id, start)?;
    let mut requested = Vec::new();
    while let Action::RequestExam { category, .. } = action {
        requested.push(category);
        let event = match visit.blocks.get(&category) {
            Some(block) => SessionEvent::ExamResult {
                category,
                block: block.clone(),
                indicators: indicators_from(visit, table, category),
            },
            None => SessionEvent::ExamUnavailable { category },
        };
        action = engine.step(&mut state, event)?;
    }
    let probabilities = match &action {
        Action::Diagnose { probabilities, .. } | Action::ReferUnknown { probabilities, .. } => *probabilities,
        Action::RequestExam { .. } => unreachable!("loop ends on a terminal action"),
    };
    let fallbacks = state
        .trail
        .iter()
        .filter(|t| matches!(t.action, Action::RequestExam { reason: RequestReason::Fallback, .. }))
        .count() as u32;
    Ok(SessionTrace {
        subject_id: visit.subject_id.clone(),
        visit_index: visit.visit_index,
        label: visit.label,
        truth: visit.label.expected_outcome().unwrap_or(Outcome::Unknown),
        capability: capability.set(),
        acquired: state.acquired,
        requested,
        decision: action.outcome().expect("terminal"),
        probabilities,
        steps: state.trail.len(),
        fallbacks,
        refusals: state.refused.len(),
    })
}

/// Sessions for every visit of the test partition, in cohort order.
pub fn simulate_test_partition<M: DiagnosisModel>(
    cohort: &Cohort,
    split: &SplitSpec,
    engine: &PolicyEngine<M>,
    table: &IndicatorTable,
    config: &EvaluationConfig,
) -> Result<Vec<SessionTrace>, Error> {
    let jobs: Vec<(&[VisitRecord], &VisitRecord)> = cohort
        .subjects
        .iter()
        .filter(|s| split.partition_of(&s.id) == Some(Partition::Test))
        .filter(|s| config.mode == SplitMode::RealWorld || s.label().known_class().is_some())
        .flat_map(|s| s.visits.iter().map(move |v| (s.history_before(v.visit_index), v)))
        .collect();
    if jobs.is_empty() {
        return Err(BenchError::Empty("test partition has no visits".into()).into());
    }
    jobs.par_iter()
        .map(|(history, visit)| {
            let cap = sample_capability(config, visit);
            simulate_visit(engine, history, visit, cap, table)
        })
        .collect()
}

fn auc_of(cases: &[&SessionTrace], score: fn(&OutcomeProbs) -> f64, positive: Outcome) -> Result<f64, BenchError> {
    let scores: Vec<f64> = cases.iter().map(|c| score(&c.probabilities)).collect();
    let labels: Vec<bool> = cases.iter().map(|c| c.truth == positive).collect();
    roc_auc(&scores, &labels)
}

fn sensitivity_of(cases: &[&SessionTrace], outcome: Outcome, thresholds: &DecisionThresholds) -> Result<f64, BenchError> {
    let pairs: Vec<(OutcomeProbs, Outcome)> = cases.iter().map(|c| (c.probabilities, c.truth)).collect();
    let [u, a, c] = sensitivities_at_operating_point(&pairs, thresholds);
    match outcome {
        Outcome::Unknown => u,
        Outcome::AD => a,
        Outcome::CN => c,
    }
}

/// Aggregates traces into a report.
pub fn build_report(
    traces: &[SessionTrace],
    thresholds: &DecisionThresholds,
    config: &EvaluationConfig,
) -> Result<EvaluationReport, BenchError> {
    if traces.is_empty() {
        return Err(BenchError::Empty("no sessions".into()));
    }
    let boot = |salt: u64| BootstrapConfig {
        seed: seed::derive_seed(config.bootstrap.seed, salt),
        ..config.bootstrap
    };
    let mut auc = BTreeMap::new();
    match config.mode {
        SplitMode::RealWorld => {
            auc.insert(
                "ad_vs_rest".to_string(),
                MetricEstimate::estimate(traces, |c| auc_of(c, |p| p.ad, Outcome::AD), &boot(1)),
            );
            auc.insert(
                "cn_vs_rest".to_string(),
                MetricEstimate::estimate(traces, |c| auc_of(c, |p| p.cn, Outcome::CN), &boot(2)),
            );
        }
        SplitMode::Closed => {
            auc.insert(
                "ad_vs_cn".to_string(),
                MetricEstimate::estimate(traces, |c| auc_of(c, |p| p.ad, Outcome::AD), &boot(1)),
            );
        }
    }
    let mut sensitivity = BTreeMap::new();
    let outcomes: &[Outcome] = match config.mode {
        SplitMode::RealWorld => &[Outcome::AD, Outcome::CN, Outcome::Unknown],
        SplitMode::Closed => &[Outcome::AD, Outcome::CN],
    };
    for (i, o) in outcomes.iter().enumerate() {
        sensitivity.insert(
            o.name().to_lowercase(),
            MetricEstimate::estimate(traces, |c| sensitivity_of(c, *o, thresholds), &boot(10 + i as u64)),
        );
    }
    let accuracy = MetricEstimate::estimate(
        traces,
        |c: &[&SessionTrace]| Ok(c.iter().filter(|t| t.decision == t.truth).count() as f64 / c.len() as f64),
        &boot(20),
    );
    let mut class_counts = BTreeMap::new();
    let mut exam_usage = BTreeMap::new();
    let mut strategy_census = BTreeMap::new();
    for t in traces {
        let name = match t.label {
            Label::Unlabeled => "unlabeled",
            l => label_name(l),
        };
        *class_counts.entry(name.to_string()).or_insert(0) += 1;
        for c in t.acquired.iter() {
            *exam_usage.entry(c).or_insert(0) += 1;
        }
        *strategy_census.entry(mask_name(t.acquired)).or_insert(0) += 1;
    }
    Ok(EvaluationReport {
        mode: config.mode,
        sessions: traces.len(),
        thresholds: thresholds.clone(),
        class_counts,
        auc,
        sensitivity,
        accuracy,
        exam_usage,
        strategy_census,
        refusals: traces.iter().map(|t| t.refusals).sum(),
        fallbacks: traces.iter().map(|t| u64::from(t.fallbacks)).sum(),
    })
}

fn label_name(label: Label) -> &'static str {
    match label {
        Label::AD => "AD",
        Label::CN => "CN",
        Label::MCI => "MCI",
        Label::SMC => "SMC",
        Label::Unlabeled => "unlabeled",
    }
}

/// Simulates the test partition and aggregates the report.
pub fn evaluate_system<M: DiagnosisModel>(
    cohort: &Cohort,
    split: &SplitSpec,
    engine: &PolicyEngine<M>,
    table: &IndicatorTable,
    config: &EvaluationConfig,
) -> Result<(EvaluationReport, Vec<SessionTrace>), Error> {
    let traces = simulate_test_partition(cohort, split, engine, table, config)?;
    let report = build_report(&traces, &engine.config().thresholds, config)?;
    Ok((report, traces))
}

impl EvaluationReport {
    pub fn to_json(&self) -> Result<String, Error> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Plain-text summary.
    pub fn summary_table(&self) -> String {
        let fmt = |m: &MetricEstimate| match (m.value, m.ci) {
            (Some(v), Some([lo, hi])) => format!("{v:.3}  [{lo:.3}, {hi:.3}]"),
            (Some(v), None) => format!("{v:.3}  (no CI: {})", m.note.as_deref().unwrap_or("-")),
            (None, _) => format!("n/a ({})", m.note.as_deref().unwrap_or("-")),
        };
        let mut s = String::new();
        let _ = writeln!(s, "mode            {:?}", self.mode);
        let _ = writeln!(s, "sessions        {}", self.sessions);
        for (k, v) in &self.auc {
            let _ = writeln!(s, "auc {k:<11} {}", fmt(v));
        }
        for (k, v) in &self.sensitivity {
            let _ = writeln!(s, "sens {k:<10} {}", fmt(v));
        }
        let _ = writeln!(s, "accuracy        {}", fmt(&self.accuracy));
        let _ = writeln!(s, "fallbacks       {}", self.fallbacks);
        let _ = writeln!(s, "refusals        {}", self.refusals);
        let _ = writeln!(s, "exam usage");
        for (c, n) in &self.exam_usage {
            let _ = writeln!(s, "  {:<6} {n}", c.name());
        }
        s
    }
}

/// CSV with one row per session.
pub fn write_traces_csv<W: Write>(out: W, traces: &[SessionTrace]) -> Result<(), Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "subject_id",
        "visit_index",
        "label",
        "truth",
        "decision",
        "p_unknown",
        "p_ad",
        "p_cn",
        "acquired",
        "requested",
        "steps",
        "fallbacks",
        "refusals",
    ])
    .map_err(|e| Error::Invalid(e.to_string()))?;
    for t in traces {
        let requested: Vec<&str> = t.requested.iter().map(|c| c.name()).collect();
        w.write_record([
            t.subject_id.clone(),
            t.visit_index.to_string(),
            label_name(t.label).to_string(),
            t.truth.name().to_string(),
            t.decision.name().to_string(),
            t.probabilities.unknown.to_string(),
            t.probabilities.ad.to_string(),
            t.probabilities.cn.to_string(),
            mask_name(t.acquired),
            requested.join("+"),
            t.steps.to_string(),
            t.fallbacks.to_string(),
            t.refusals.to_string(),
        ])
        .map_err(|e| Error::Invalid(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

//! Examination categories, visits, diagnosis strategies and the feature
//! sequence layout consumed by the backbone.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::DomainError;

/// Canonical width of one encoded examination block.
pub const CANONICAL_BLOCK_WIDTH: usize = 2090;

/// Number of examination categories, Base included.
pub const NUM_CATEGORIES: usize = 13;

/// Number of requestable examinations (every category except Base).
pub const NUM_EXAM_HEADS: usize = NUM_CATEGORIES - 1;

/// One of the thirteen examination categories. The declaration order is the
/// canonical total order used everywhere (Base is index 0).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ExamCategory {
    Base,
    Cog,
    CE,
    Neur,
    FB,
    PE,
    Blood,
    Urine,
    MRI,
    FDG,
    AV45,
    Gene,
    CSF,
}

impl ExamCategory {
    pub const ALL: [ExamCategory; NUM_CATEGORIES] = [
        ExamCategory::Base,
        ExamCategory::Cog,
        ExamCategory::CE,
        ExamCategory::Neur,
        ExamCategory::FB,
        ExamCategory::PE,
        ExamCategory::Blood,
        ExamCategory::Urine,
        ExamCategory::MRI,
        ExamCategory::FDG,
        ExamCategory::AV45,
        ExamCategory::Gene,
        ExamCategory::CSF,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    /// Position of this category among the twelve examination heads.
    /// `None` for Base, which is never requested.
    pub fn head_index(self) -> Option<usize> {
        self.index().checked_sub(1)
    }

    pub fn from_head_index(head: usize) -> Option<Self> {
        if head < NUM_EXAM_HEADS {
            Self::from_index(head + 1)
        } else {
            None
        }
    }

    /// The twelve requestable categories in head order.
    pub fn exams() -> impl Iterator<Item = ExamCategory> {
        Self::ALL.into_iter().skip(1)
    }

    pub fn name(self) -> &'static str {
        match self {
            ExamCategory::Base => "Base",
            ExamCategory::Cog => "Cog",
            ExamCategory::CE => "CE",
            ExamCategory::Neur => "Neur",
            ExamCategory::FB => "FB",
            ExamCategory::PE => "PE",
            ExamCategory::Blood => "Blood",
            ExamCategory::Urine => "Urine",
            ExamCategory::MRI => "MRI",
            ExamCategory::FDG => "FDG",
            ExamCategory::AV45 => "AV45",
            ExamCategory::Gene => "Gene",
            ExamCategory::CSF => "CSF",
        }
    }

    /// Human-readable description shown to operators.
    pub fn description(self) -> &'static str {
        match self {
            ExamCategory::Base => "base information (demographics, history, symptoms)",
            ExamCategory::Cog => "cognition information (ADAS, MMSE, MoCA, CDR, CCI)",
            ExamCategory::CE => "cognition testing",
            ExamCategory::Neur => "neuropsychiatric information",
            ExamCategory::FB => "function and behavior information",
            ExamCategory::PE => "physical and neurological examination",
            ExamCategory::Blood => "blood testing",
            ExamCategory::Urine => "urine testing",
            ExamCategory::MRI => "magnetic resonance imaging",
            ExamCategory::FDG => "FDG PET",
            ExamCategory::AV45 => "AV45 PET",
            ExamCategory::Gene => "gene analysis",
            ExamCategory::CSF => "cerebral spinal fluid analysis",
        }
    }
}

impl fmt::Display for ExamCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExamCategory {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| DomainError::UnknownCategory(s.to_string()))
    }
}

/// A set of examination categories, one bit per category.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct CategorySet(u16);

impl CategorySet {
    const FULL_BITS: u16 = (1 << NUM_CATEGORIES) - 1;

    pub const fn empty() -> Self {
        CategorySet(0)
    }

    pub const fn full() -> Self {
        CategorySet(Self::FULL_BITS)
    }

    pub fn from_bits(bits: u16) -> Self {
        CategorySet(bits & Self::FULL_BITS)
    }

    pub fn bits(self) -> u16 {
        self.0
    }

    pub fn contains(self, category: ExamCategory) -> bool {
        self.0 & (1 << category.index()) != 0
    }

    pub fn insert(&mut self, category: ExamCategory) {
        self.0 |= 1 << category.index();
    }

    pub fn remove(&mut self, category: ExamCategory) {
        self.0 &= !(1 << category.index());
    }

    pub fn with(mut self, category: ExamCategory) -> Self {
        self.insert(category);
        self
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn is_subset(self, other: CategorySet) -> bool {
        self.0 & !other.0 == 0
    }

    /// Strict subset.
    pub fn is_proper_subset(self, other: CategorySet) -> bool {
        self.is_subset(other) && self.0 != other.0
    }

    pub fn union(self, other: CategorySet) -> Self {
        CategorySet(self.0 | other.0)
    }

    pub fn intersection(self, other: CategorySet) -> Self {
        CategorySet(self.0 & other.0)
    }

    pub fn difference(self, other: CategorySet) -> Self {
        CategorySet(self.0 & !other.0)
    }

    pub fn iter(self) -> impl Iterator<Item = ExamCategory> {
        ExamCategory::ALL.into_iter().filter(move |c| self.contains(*c))
    }
}

impl FromIterator<ExamCategory> for CategorySet {
    fn from_iter<I: IntoIterator<Item = ExamCategory>>(iter: I) -> Self {
        let mut set = CategorySet::empty();
        for c in iter {
            set.insert(c);
        }
        set
    }
}

impl fmt::Debug for CategorySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

impl Serialize for CategorySet {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_seq(self.iter())
    }
}

impl<'de> Deserialize<'de> for CategorySet {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let items = Vec::<ExamCategory>::deserialize(deserializer)?;
        Ok(items.into_iter().collect())
    }
}

/// One diagnosis strategy: the categories acquired for a visit. Base is
/// always a member.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct StrategyMask(CategorySet);

impl StrategyMask {
    pub fn base_only() -> Self {
        StrategyMask(CategorySet::empty().with(ExamCategory::Base))
    }

    pub fn new(set: CategorySet) -> Result<Self, DomainError> {
        if set.contains(ExamCategory::Base) {
            Ok(StrategyMask(set))
        } else {
            Err(DomainError::MaskWithoutBase)
        }
    }

    pub fn from_categories<I: IntoIterator<Item = ExamCategory>>(
        categories: I,
    ) -> Result<Self, DomainError> {
        Self::new(categories.into_iter().collect())
    }

    pub fn set(self) -> CategorySet {
        self.0
    }

    pub fn contains(self, category: ExamCategory) -> bool {
        self.0.contains(category)
    }

    pub fn with(self, category: ExamCategory) -> Self {
        StrategyMask(self.0.with(category))
    }

    pub fn len(self) -> usize {
        self.0.len()
    }

    /// Always false: Base is a member of every mask.
    pub fn is_empty(self) -> bool {
        false
    }

    pub fn iter(self) -> impl Iterator<Item = ExamCategory> {
        self.0.iter()
    }

    pub fn is_proper_subset(self, other: StrategyMask) -> bool {
        self.0.is_proper_subset(other.0)
    }

    /// Presence flags in canonical category order.
    pub fn presence(self) -> [bool; NUM_CATEGORIES] {
        let mut out = [false; NUM_CATEGORIES];
        for c in self.iter() {
            out[c.index()] = true;
        }
        out
    }
}

impl fmt::Debug for StrategyMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl<'de> Deserialize<'de> for StrategyMask {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let set = CategorySet::deserialize(deserializer)?;
        StrategyMask::new(set).map_err(serde::de::Error::custom)
    }
}

/// Ground-truth subject category of a visit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Label {
    AD,
    CN,
    MCI,
    SMC,
    Unlabeled,
}

impl Label {
    pub fn known_class(self) -> Option<KnownClass> {
        match self {
            Label::AD => Some(KnownClass::AD),
            Label::CN => Some(KnownClass::CN),
            _ => None,
        }
    }

    /// Outcome the engine is expected to produce: MCI and SMC are unknown.
    pub fn expected_outcome(self) -> Option<Outcome> {
        match self {
            Label::AD => Some(Outcome::AD),
            Label::CN => Some(Outcome::CN),
            Label::MCI | Label::SMC => Some(Outcome::Unknown),
            Label::Unlabeled => None,
        }
    }

    fn to_json(self) -> Option<&'static str> {
        match self {
            Label::AD => Some("AD"),
            Label::CN => Some("CN"),
            Label::MCI => Some("MCI"),
            Label::SMC => Some("SMC"),
            Label::Unlabeled => None,
        }
    }
}

/// The two categories the backbone is trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum KnownClass {
    AD,
    CN,
}

impl KnownClass {
    pub const ALL: [KnownClass; 2] = [KnownClass::AD, KnownClass::CN];

    /// Index into the backbone's activation vector.
    pub fn index(self) -> usize {
        match self {
            KnownClass::AD => 0,
            KnownClass::CN => 1,
        }
    }

    pub fn one_hot(self) -> [f64; 2] {
        let mut v = [0.0; 2];
        v[self.index()] = 1.0;
        v
    }

    pub fn other(self) -> Self {
        match self {
            KnownClass::AD => KnownClass::CN,
            KnownClass::CN => KnownClass::AD,
        }
    }

    pub fn label(self) -> Label {
        match self {
            KnownClass::AD => Label::AD,
            KnownClass::CN => Label::CN,
        }
    }
}

/// Outcome of the open-set decision. Internally Unknown is index 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Outcome {
    Unknown,
    AD,
    CN,
}

impl Outcome {
    pub const ALL: [Outcome; 3] = [Outcome::Unknown, Outcome::AD, Outcome::CN];

    pub fn index(self) -> usize {
        match self {
            Outcome::Unknown => 0,
            Outcome::AD => 1,
            Outcome::CN => 2,
        }
    }

    pub fn from_known(class: KnownClass) -> Self {
        match class {
            KnownClass::AD => Outcome::AD,
            KnownClass::CN => Outcome::CN,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Outcome::Unknown => "unknown",
            Outcome::AD => "AD",
            Outcome::CN => "CN",
        }
    }
}

pub mod label_serde {
    use super::Label;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(label: &Label, s: S) -> Result<S::Ok, S::Error> {
        match label.to_json() {
            Some(name) => s.serialize_str(name),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Label, D::Error> {
        match Option::<String>::deserialize(d)?.as_deref() {
            None => Ok(Label::Unlabeled),
            Some("AD") => Ok(Label::AD),
            Some("CN") => Ok(Label::CN),
            Some("MCI") => Ok(Label::MCI),
            Some("SMC") => Ok(Label::SMC),
            Some(other) => Err(serde::de::Error::custom(format!("unknown label {other:?}"))),
        }
    }
}

/// One subject visit with its pre-encoded examination blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisitRecord {
    pub subject_id: String,
    pub visit_index: u32,
    #[serde(with = "label_serde")]
    pub label: Label,
    pub blocks: BTreeMap<ExamCategory, Vec<f64>>,
    #[serde(default)]
    pub indicators: BTreeMap<String, f64>,
}

impl VisitRecord {
    pub fn present(&self) -> CategorySet {
        self.blocks.keys().copied().collect()
    }

    pub fn is_first_visit(&self) -> bool {
        self.visit_index == 0
    }

    /// Checks block widths and the Base requirement.
    pub fn validate(&self, width: usize) -> Result<(), DomainError> {
        if !self.blocks.contains_key(&ExamCategory::Base) {
            return Err(DomainError::InvalidVisit {
                subject_id: self.subject_id.clone(),
                visit_index: self.visit_index,
                reason: "missing Base block".into(),
            });
        }
        for (category, block) in &self.blocks {
            if block.len() != width {
                return Err(DomainError::WidthMismatch {
                    category: *category,
                    expected: width,
                    found: block.len(),
                });
            }
        }
        Ok(())
    }
}

/// Every subset of the visit's present categories that contains Base,
/// ordered by cardinality and then lexicographically by category index.
pub fn enumerate_strategies(visit: &VisitRecord) -> Result<Vec<StrategyMask>, DomainError> {
    if !visit.blocks.contains_key(&ExamCategory::Base) {
        return Err(DomainError::InvalidVisit {
            subject_id: visit.subject_id.clone(),
            visit_index: visit.visit_index,
            reason: "missing Base block".into(),
        });
    }
    Ok(strategies_within(visit.present()))
}

/// All Base-containing subsets of `present`, in canonical order.
pub fn strategies_within(present: CategorySet) -> Vec<StrategyMask> {
    let optional: Vec<ExamCategory> = present
        .iter()
        .filter(|c| *c != ExamCategory::Base)
        .collect();
    let mut masks: Vec<(usize, Vec<usize>, StrategyMask)> = (0u32..1 << optional.len())
        .map(|bits| {
            let mut set = CategorySet::empty().with(ExamCategory::Base);
            for (i, c) in optional.iter().enumerate() {
                if bits & (1 << i) != 0 {
                    set.insert(*c);
                }
            }
            let indices: Vec<usize> = set.iter().map(ExamCategory::index).collect();
            (set.len(), indices, StrategyMask(set))
        })
        .collect();
    masks.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
    masks.into_iter().map(|(_, _, m)| m).collect()
}

/// One entry of a feature sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SequenceItem<'a> {
    pub visit_index: u32,
    pub category: ExamCategory,
    pub block: &'a [f64],
}

/// Ordered blocks of a subject: every historical block, then the current
/// visit's blocks restricted to the strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence<'a> {
    items: Vec<SequenceItem<'a>>,
    current_visit: u32,
    current_mask: StrategyMask,
}

impl<'a> FeatureSequence<'a> {
    pub fn items(&self) -> &[SequenceItem<'a>] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn current_visit(&self) -> u32 {
        self.current_visit
    }

    pub fn current_mask(&self) -> StrategyMask {
        self.current_mask
    }

    /// Number of distinct earlier visits contributing blocks.
    pub fn history_visits(&self) -> usize {
        let mut seen: Vec<u32> = self
            .items
            .iter()
            .filter(|i| i.visit_index != self.current_visit)
            .map(|i| i.visit_index)
            .collect();
        seen.dedup();
        seen.len()
    }

    pub fn block_width(&self) -> Option<usize> {
        self.items.first().map(|i| i.block.len())
    }
}

/// Builds the sequence for `current` under `mask`, preceded by all blocks of
/// the earlier visits in `history`.
pub fn build_feature_sequence<'a>(
    history: &'a [VisitRecord],
    current: &'a VisitRecord,
    mask: StrategyMask,
) -> Result<FeatureSequence<'a>, DomainError> {
    let mut items = Vec::new();
    let mut prior: Vec<&VisitRecord> = history
        .iter()
        .filter(|v| v.visit_index < current.visit_index)
        .collect();
    prior.sort_by_key(|v| v.visit_index);
    for visit in prior {
        for (category, block) in &visit.blocks {
            items.push(SequenceItem {
                visit_index: visit.visit_index,
                category: *category,
                block,
            });
        }
    }
    sequence_from_blocks(items, current.visit_index, &current.blocks, mask)
}

/// Shared tail of sequence construction, also used by live sessions that
/// hold their current blocks outside a `VisitRecord`.
pub(crate) fn sequence_from_blocks<'a>(
    mut items: Vec<SequenceItem<'a>>,
    current_visit: u32,
    current_blocks: &'a BTreeMap<ExamCategory, Vec<f64>>,
    mask: StrategyMask,
) -> Result<FeatureSequence<'a>, DomainError> {
    for category in mask.iter() {
        let block = current_blocks
            .get(&category)
            .ok_or(DomainError::MissingExamData(category))?;
        items.push(SequenceItem {
            visit_index: current_visit,
            category,
            block,
        });
    }
    Ok(FeatureSequence {
        items,
        current_visit,
        current_mask: mask,
    })
}

/// One subject and its visits in ascending visit order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub id: String,
    pub visits: Vec<VisitRecord>,
}

impl Subject {
    pub fn label(&self) -> Label {
        self.visits.first().map_or(Label::Unlabeled, |v| v.label)
    }

    /// Visits strictly before `visit_index`.
    pub fn history_before(&self, visit_index: u32) -> &[VisitRecord] {
        let end = self
            .visits
            .iter()
            .position(|v| v.visit_index >= visit_index)
            .unwrap_or(self.visits.len());
        &self.visits[..end]
    }
}

/// A set of subjects sharing one block width.
#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub width: usize,
    pub subjects: Vec<Subject>,
}

impl Cohort {
    pub fn new(width: usize, subjects: Vec<Subject>) -> Result<Self, DomainError> {
        let cohort = Cohort { width, subjects };
        cohort.validate()?;
        Ok(cohort)
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        for subject in &self.subjects {
            for pair in subject.visits.windows(2) {
                if pair[1].visit_index <= pair[0].visit_index {
                    return Err(DomainError::VisitOrder(subject.id.clone()));
                }
            }
            for visit in &subject.visits {
                if visit.subject_id != subject.id {
                    return Err(DomainError::InvalidVisit {
                        subject_id: visit.subject_id.clone(),
                        visit_index: visit.visit_index,
                        reason: format!("filed under subject {}", subject.id),
                    });
                }
                visit.validate(self.width)?;
            }
        }
        Ok(())
    }

    pub fn subject(&self, id: &str) -> Option<&Subject> {
        self.subjects.iter().find(|s| s.id == id)
    }

    pub fn visits(&self) -> impl Iterator<Item = (&Subject, &VisitRecord)> {
        self.subjects
            .iter()
            .flat_map(|s| s.visits.iter().map(move |v| (s, v)))
    }

    pub fn num_visits(&self) -> usize {
        self.subjects.iter().map(|s| s.visits.len()).sum()
    }
}

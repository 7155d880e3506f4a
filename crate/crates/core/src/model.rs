//! Domain types shared across the crate.
//!
//! Everything here is immutable once constructed. Vectors are stored as
//! `f64`; the on-disk formats narrow to `f32`.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type SubjectId = u64;
pub type SampleId = u64;

/// A fixed-dimension, finite, real-valued feature vector.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidEmbedding("dimension must be positive".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidEmbedding(format!("non-finite value at position {i}")));
        }
        Ok(Self { values })
    }

    /// Caller guarantees non-empty, finite input.
    pub(crate) fn from_trusted(values: Vec<f64>) -> Self {
        debug_assert!(!values.is_empty() && values.iter().all(|v| v.is_finite()));
        Self { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Unit-length copy. A zero vector is returned unchanged.
    pub fn normalized(&self) -> Self {
        let norm = self.norm();
        if norm == 0.0 {
            return self.clone();
        }
        Self::from_trusted(self.values.iter().map(|v| v / norm).collect())
    }

    /// Values rounded through `f32`, the precision used by the file formats.
    pub fn to_stored_precision(&self) -> Self {
        Self::from_trusted(self.values.iter().map(|&v| v as f32 as f64).collect())
    }

    fn check_dim(&self, other: &Self) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::dims(self.dim(), other.dim()));
        }
        Ok(())
    }
}

/// Euclidean distance between two vectors of equal dimension.
pub fn euclidean_distance(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    squared_euclidean_distance(a, b).map(f64::sqrt)
}

pub fn squared_euclidean_distance(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    a.check_dim(b)?;
    Ok(squared_distance_slices(&a.values, &b.values))
}

/// Four-lane accumulation; the fixed lane order keeps results reproducible.
pub(crate) fn squared_distance_slices(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in ca.by_ref().zip(cb.by_ref()) {
        for k in 0..4 {
            let d = x[k] - y[k];
            acc[k] += d * d;
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| (x - y) * (x - y)).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Reference,
    ProbeEnrolled,
    ProbeNonenrolled,
    Train,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Reference => "reference",
            Split::ProbeEnrolled => "probe_enrolled",
            Split::ProbeNonenrolled => "probe_nonenrolled",
            Split::Train => "train",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sex {
    Female,
    Male,
}

impl Sex {
    pub const VOCABULARY: [Sex; 2] = [Sex::Female, Sex::Male];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Race {
    African,
    Asian,
    European,
    Hispanic,
    Other,
}

impl Race {
    pub const VOCABULARY: [Race; 5] =
        [Race::African, Race::Asian, Race::European, Race::Hispanic, Race::Other];
}

pub const MAX_AGE: u32 = 150;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SoftBiometrics {
    pub sex: Sex,
    pub race: Race,
    pub age: u32,
}

impl SoftBiometrics {
    pub fn new(sex: Sex, race: Race, age: u32) -> Result<Self> {
        if age > MAX_AGE {
            return Err(Error::InvalidParameter(format!("age {age} exceeds {MAX_AGE}")));
        }
        Ok(Self { sex, race, age })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectRecord {
    pub subject_id: SubjectId,
    pub sample_id: SampleId,
    pub embedding: EmbeddingVector,
    pub soft: Option<SoftBiometrics>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    DimensionMismatch { index: usize, expected: usize, found: usize },
    DuplicateId { subject_id: SubjectId, sample_id: SampleId },
    MultipleReferenceSamples { subject_id: SubjectId, count: usize },
    AgeOutOfRange { index: usize, age: u32 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DimensionMismatch { index, expected, found } => write!(
                f,
                "dimension mismatch at record {index}: expected {expected}, found {found}"
            ),
            Violation::DuplicateId { subject_id, sample_id } => {
                write!(f, "duplicate id (subject {subject_id}, sample {sample_id})")
            }
            Violation::MultipleReferenceSamples { subject_id, count } => write!(
                f,
                "subject {subject_id} has {count} reference samples, expected exactly one"
            ),
            Violation::AgeOutOfRange { index, age } => {
                write!(f, "age {age} at record {index} exceeds {MAX_AGE}")
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks dimension agreement, id uniqueness and the one-reference-per-subject
/// rule. Never fails; problems are collected in the report.
pub fn validate_gallery(records: &[SubjectRecord]) -> ValidationReport {
    let mut violations = Vec::new();
    let Some(first) = records.first() else {
        return ValidationReport::default();
    };
    let expected = first.embedding.dim();
    let mut seen = HashSet::new();
    let mut references: BTreeMap<SubjectId, usize> = BTreeMap::new();

    for (index, record) in records.iter().enumerate() {
        let found = record.embedding.dim();
        if found != expected {
            violations.push(Violation::DimensionMismatch { index, expected, found });
        }
        if !seen.insert((record.subject_id, record.sample_id)) {
            violations.push(Violation::DuplicateId {
                subject_id: record.subject_id,
                sample_id: record.sample_id,
            });
        }
        if let Some(soft) = record.soft {
            if soft.age > MAX_AGE {
                violations.push(Violation::AgeOutOfRange { index, age: soft.age });
            }
        }
        if record.split == Split::Reference {
            *references.entry(record.subject_id).or_default() += 1;
        }
    }
    for (subject_id, count) in references {
        if count != 1 {
            violations.push(Violation::MultipleReferenceSamples { subject_id, count });
        }
    }
    ValidationReport { violations }
}

/// L2-normalizes every embedding in place.
pub fn normalize_records(records: &mut [SubjectRecord]) {
    for record in records {
        record.embedding = record.embedding.normalized();
    }
}

/// The enrolment database: one reference template per subject.
#[derive(Clone, Debug, PartialEq)]
pub struct Gallery {
    pub subject_ids: Vec<SubjectId>,
    pub templates: Vec<EmbeddingVector>,
    pub soft: Vec<Option<SoftBiometrics>>,
}

impl Gallery {
    pub fn new(
        subject_ids: Vec<SubjectId>,
        templates: Vec<EmbeddingVector>,
        soft: Vec<Option<SoftBiometrics>>,
    ) -> Result<Self> {
        if subject_ids.is_empty() {
            return Err(Error::Empty("gallery"));
        }
        if subject_ids.len() != templates.len() || subject_ids.len() != soft.len() {
            return Err(Error::InvalidParameter("gallery columns have different lengths".into()));
        }
        let dim = templates[0].dim();
        if let Some(t) = templates.iter().find(|t| t.dim() != dim) {
            return Err(Error::dims(dim, t.dim()));
        }
        let mut seen = HashSet::new();
        if let Some(id) = subject_ids.iter().find(|id| !seen.insert(**id)) {
            return Err(Error::InvalidParameter(format!("subject {id} enrolled more than once")));
        }
        Ok(Self { subject_ids, templates, soft })
    }

    /// Builds a gallery from the reference split of `records`, in file order.
    pub fn from_records(records: &[SubjectRecord]) -> Result<Self> {
        let refs: Vec<&SubjectRecord> =
            records.iter().filter(|r| r.split == Split::Reference).collect();
        Self::new(
            refs.iter().map(|r| r.subject_id).collect(),
            refs.iter().map(|r| r.embedding.clone()).collect(),
            refs.iter().map(|r| r.soft).collect(),
        )
    }

    pub fn from_templates(templates: Vec<EmbeddingVector>) -> Result<Self> {
        let n = templates.len();
        Self::new((0..n as u64).collect(), templates, vec![None; n])
    }

    pub fn len(&self) -> usize {
        self.subject_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subject_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.templates[0].dim()
    }
}

/// Per-level pre-selection counts for the retrieval cascade.
///
/// `selections[l]` is the number of nodes kept after level `l + 1`. The
/// number of levels is `log2(n1) + 1`; the last entry only matters when the
/// final candidate list is truncated.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CascadeSchedule {
    n1: usize,
    selections: Vec<usize>,
}

pub(crate) fn is_valid_n1(n1: usize) -> bool {
    n1 >= 2 && n1.is_power_of_two()
}

/// Number of levels in a tree whose root covers `n1` subjects.
pub fn level_count(n1: usize) -> usize {
    n1.trailing_zeros() as usize + 1
}

impl CascadeSchedule {
    pub fn new(n1: usize, selections: Vec<usize>) -> Result<Self> {
        if !is_valid_n1(n1) {
            return Err(Error::InvalidSchedule(format!("n1 = {n1} is not a power of two >= 2")));
        }
        let levels = level_count(n1);
        if selections.len() != levels {
            return Err(Error::InvalidSchedule(format!(
                "expected {levels} selection counts for n1 = {n1}, got {}",
                selections.len()
            )));
        }
        if selections.contains(&0) {
            return Err(Error::InvalidSchedule("selection counts must be >= 1".into()));
        }
        Ok(Self { n1, selections })
    }

    /// One node kept per level: the workload lower bound.
    pub fn lower_bound(n1: usize) -> Result<Self> {
        Self::new(n1, vec![1; level_count(n1)])
    }

    /// Keeps every compared node; equivalent to an exhaustive search over the
    /// leaves, routed through the trees.
    pub fn keep_all(n1: usize, gallery_size: usize) -> Result<Self> {
        let roots = roots_for(gallery_size, n1)?;
        let selections = (0..level_count(n1)).map(|l| roots << l).collect();
        Self::new(n1, selections)
    }

    pub fn n1(&self) -> usize {
        self.n1
    }

    pub fn levels(&self) -> usize {
        self.selections.len()
    }

    pub fn selections(&self) -> &[usize] {
        &self.selections
    }

    /// Comparisons performed at each level for a gallery of `gallery_size`
    /// subjects. Fails if a level keeps more nodes than it compared.
    pub fn comparisons_per_level(&self, gallery_size: usize) -> Result<Vec<usize>> {
        let mut compared = Vec::with_capacity(self.levels());
        let mut current = roots_for(gallery_size, self.n1)?;
        for (l, &keep) in self.selections.iter().enumerate() {
            if keep > current {
                return Err(Error::InvalidSchedule(format!(
                    "level {} keeps {keep} nodes but compares only {current}",
                    l + 1
                )));
            }
            compared.push(current);
            current = 2 * keep;
        }
        Ok(compared)
    }

    /// Fractions `k_l` implied by the counts for a given gallery size.
    pub fn fractions(&self, gallery_size: usize) -> Result<Vec<f64>> {
        let compared = self.comparisons_per_level(gallery_size)?;
        Ok(self.selections.iter().zip(compared).map(|(&s, c)| s as f64 / c as f64).collect())
    }
}

pub(crate) fn roots_for(gallery_size: usize, n1: usize) -> Result<usize> {
    if !is_valid_n1(n1) {
        return Err(Error::InvalidSchedule(format!("n1 = {n1} is not a power of two >= 2")));
    }
    if gallery_size == 0 || !gallery_size.is_multiple_of(n1) {
        return Err(Error::Divisibility { size: gallery_size, n1 });
    }
    Ok(gallery_size / n1)
}

/// Template comparisons of one identification transaction.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WorkloadReport {
    pub comparisons_total: usize,
    pub comparisons_per_level: Vec<usize>,
    pub gallery_size: usize,
    pub workload_percent: f64,
}

impl WorkloadReport {
    pub fn from_counts(comparisons_per_level: Vec<usize>, gallery_size: usize) -> Self {
        let comparisons_total = comparisons_per_level.iter().sum();
        Self {
            comparisons_total,
            comparisons_per_level,
            gallery_size,
            workload_percent: comparisons_total as f64 / gallery_size as f64 * 100.0,
        }
    }
}

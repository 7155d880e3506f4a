//! Cascaded retrieval over the search forest, the exhaustive baseline, and
//! workload accounting.
//!
//! At level 1 the probe is compared with every root. The best
//! `selections[0]` roots survive; at each following level the probe is
//! compared with both children of every survivor, and so on down to the
//! leaves. The compared leaves, ranked by score, are the candidate list.
//! Comparison counts depend only on the gallery size and the schedule.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::index::{IndexForest, TreeNode};
use crate::model::{
    euclidean_distance, roots_for, squared_euclidean_distance, CascadeSchedule, EmbeddingVector,
    Gallery, SubjectId, WorkloadReport,
};

/// Scores a probe against a stored template. Lower is more similar.
pub trait Comparator<T> {
    type Probe;

    fn score(&self, probe: &Self::Probe, reference: &T) -> Result<f64>;
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Metric {
    /// Ranking-equivalent to Euclidean distance and what protected
    /// backends compute.
    #[default]
    SquaredEuclidean,
    Euclidean,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct PlaintextComparator {
    pub metric: Metric,
}

impl Comparator<EmbeddingVector> for PlaintextComparator {
    type Probe = EmbeddingVector;

    fn score(&self, probe: &EmbeddingVector, reference: &EmbeddingVector) -> Result<f64> {
        match self.metric {
            Metric::SquaredEuclidean => squared_euclidean_distance(probe, reference),
            Metric::Euclidean => euclidean_distance(probe, reference),
        }
    }
}

/// A forest the cascade can walk.
pub trait SearchIndex {
    type Template;

    fn trees(&self) -> &[TreeNode<Self::Template>];
    fn n1(&self) -> usize;

    fn gallery_size(&self) -> usize {
        self.trees().len() * self.n1()
    }
}

impl SearchIndex for IndexForest {
    type Template = EmbeddingVector;

    fn trees(&self) -> &[TreeNode<EmbeddingVector>] {
        &self.trees
    }

    fn n1(&self) -> usize {
        self.n1
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate {
    pub subject_id: SubjectId,
    pub score: f64,
}

/// Candidates in ascending score order, ties broken by subject id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CandidateList {
    entries: Vec<Candidate>,
}

fn by_score_then_id(a: &Candidate, b: &Candidate) -> Ordering {
    a.score.total_cmp(&b.score).then(a.subject_id.cmp(&b.subject_id))
}

impl CandidateList {
    pub fn from_unsorted(mut entries: Vec<Candidate>) -> Self {
        entries.sort_by(by_score_then_id);
        debug_assert!(
            entries.windows(2).all(|w| w[0].subject_id != w[1].subject_id) || entries.len() < 2
        );
        Self { entries }
    }

    pub fn entries(&self) -> &[Candidate] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn top(&self) -> Option<&Candidate> {
        self.entries.first()
    }

    /// 1-based rank of `subject`, if present.
    pub fn rank_of(&self, subject: SubjectId) -> Option<usize> {
        self.entries.iter().position(|c| c.subject_id == subject).map(|p| p + 1)
    }

    pub fn truncate(&mut self, len: usize) {
        self.entries.truncate(len);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalTrace {
    pub compared: Vec<usize>,
    pub selected: Vec<usize>,
    pub candidates: CandidateList,
}

impl RetrievalTrace {
    pub fn comparisons_total(&self) -> usize {
        self.compared.iter().sum()
    }

    pub fn workload(&self, gallery_size: usize) -> WorkloadReport {
        WorkloadReport::from_counts(self.compared.clone(), gallery_size)
    }
}

/// What the final level returns.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FinalSelection {
    /// Every compared leaf, ranked.
    #[default]
    All,
    /// Only the best `selections[last]` leaves.
    Truncate,
}

/// The count-based schedule for a root-level fraction `k1`: keep
/// `round(k1 · N/n1)` roots, then halve the count at every further level.
pub fn default_schedule(gallery_size: usize, n1: usize, k1: f64) -> Result<CascadeSchedule> {
    if !(k1 > 0.0 && k1 <= 1.0) {
        return Err(Error::InvalidParameter(format!("k1 = {k1} is outside (0, 1]")));
    }
    let roots = roots_for(gallery_size, n1)?;
    let levels = crate::model::level_count(n1);
    let mut selections = Vec::with_capacity(levels);
    let mut keep = ((k1 * roots as f64).round() as usize).max(1);
    for _ in 0..levels {
        selections.push(keep);
        keep = (keep / 2).max(1);
    }
    CascadeSchedule::new(n1, selections)
}

/// Comparisons implied by a schedule.
pub fn workload(schedule: &CascadeSchedule, gallery_size: usize) -> Result<WorkloadReport> {
    Ok(WorkloadReport::from_counts(schedule.comparisons_per_level(gallery_size)?, gallery_size))
}

/// Workload when a single node survives every level.
pub fn lower_bound_workload(gallery_size: usize, n1: usize) -> Result<WorkloadReport> {
    workload(&CascadeSchedule::lower_bound(n1)?, gallery_size)
}

pub fn baseline_workload(gallery_size: usize) -> WorkloadReport {
    WorkloadReport::from_counts(vec![gallery_size], gallery_size)
}

pub fn retrieve<I, C>(
    probe: &C::Probe,
    index: &I,
    schedule: &CascadeSchedule,
    comparator: &C,
) -> Result<RetrievalTrace>
where
    I: SearchIndex,
    C: Comparator<I::Template>,
{
    retrieve_with(probe, index, schedule, comparator, FinalSelection::All)
}

pub fn retrieve_with<I, C>(
    probe: &C::Probe,
    index: &I,
    schedule: &CascadeSchedule,
    comparator: &C,
    final_selection: FinalSelection,
) -> Result<RetrievalTrace>
where
    I: SearchIndex,
    C: Comparator<I::Template>,
{
    if schedule.n1() != index.n1() {
        return Err(Error::InvalidSchedule(format!(
            "schedule is for n1 = {}, index has n1 = {}",
            schedule.n1(),
            index.n1()
        )));
    }
    // validates keep counts against what each level compares
    schedule.comparisons_per_level(index.gallery_size())?;

    // (position within the forest-wide level, node); positions give the
    // deterministic tie-break
    let mut frontier: Vec<(usize, &TreeNode<I::Template>)> =
        index.trees().iter().enumerate().collect();
    let levels = schedule.levels();
    let mut compared = Vec::with_capacity(levels);
    let mut selected = Vec::with_capacity(levels);

    for (l, &keep) in schedule.selections().iter().enumerate() {
        let mut scored = frontier
            .iter()
            .map(|&(pos, node)| Ok((comparator.score(probe, &node.template)?, pos, node)))
            .collect::<Result<Vec<_>>>()?;
        compared.push(scored.len());

        if l + 1 == levels {
            let entries = scored
                .into_iter()
                .map(|(score, _, node)| {
                    let subject_id = node.leaf_subject().ok_or_else(|| {
                        Error::InvalidSchedule("schedule ends above the leaves".into())
                    })?;
                    Ok(Candidate { subject_id, score })
                })
                .collect::<Result<Vec<_>>>()?;
            let mut candidates = CandidateList::from_unsorted(entries);
            if final_selection == FinalSelection::Truncate {
                candidates.truncate(keep);
            }
            selected.push(candidates.len());
            return Ok(RetrievalTrace { compared, selected, candidates });
        }

        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        scored.truncate(keep);
        selected.push(scored.len());
        scored.sort_by_key(|s| s.1);
        frontier = scored
            .into_iter()
            .map(|(_, pos, node)| {
                let children = node.children.as_ref().ok_or_else(|| {
                    Error::InvalidSchedule("schedule has more levels than the index".into())
                })?;
                Ok([(2 * pos, &children[0]), (2 * pos + 1, &children[1])])
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();
    }
    unreachable!("schedules have at least two levels")
}

/// Compares the probe with every reference and ranks all of them.
pub fn exhaustive_search<'a, T: 'a, C>(
    probe: &C::Probe,
    references: impl IntoIterator<Item = (SubjectId, &'a T)>,
    comparator: &C,
) -> Result<CandidateList>
where
    C: Comparator<T>,
{
    let entries = references
        .into_iter()
        .map(|(subject_id, t)| Ok(Candidate { subject_id, score: comparator.score(probe, t)? }))
        .collect::<Result<Vec<_>>>()?;
    Ok(CandidateList::from_unsorted(entries))
}

pub fn exhaustive_gallery(
    probe: &EmbeddingVector,
    gallery: &Gallery,
    comparator: &PlaintextComparator,
) -> Result<CandidateList> {
    exhaustive_search(
        probe,
        gallery.subject_ids.iter().copied().zip(&gallery.templates),
        comparator,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::FusionMethod;
    use crate::index::{build_index, IndexConfig};
    use crate::pairing::PairingMethod;
    use rand::{Rng, SeedableRng};

    fn v(values: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(values.to_vec()).unwrap()
    }

    fn random_gallery(n: usize, dim: usize, seed: u64) -> Gallery {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let templates = (0..n)
            .map(|_| {
                v(&(0..dim).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>()).normalized()
            })
            .collect();
        Gallery::from_templates(templates).unwrap()
    }

    fn counts(n: usize, n1: usize, k1: f64) -> (Vec<usize>, usize, f64) {
        let w = workload(&default_schedule(n, n1, k1).unwrap(), n).unwrap();
        (w.comparisons_per_level, w.comparisons_total, w.workload_percent)
    }

    fn pct2(x: f64) -> String {
        format!("{x:.2}")
    }

    #[test]
    fn anchored_comparison_counts() {
        let (levels, total, w) = counts(4096, 16, 0.5);
        assert_eq!(levels, vec![256, 256, 128, 64, 32]);
        assert_eq!((total, pct2(w).as_str()), (736, "17.97"));

        let (levels, total, w) = counts(4096, 16, 0.25);
        assert_eq!(levels, vec![256, 128, 64, 32, 16]);
        assert_eq!((total, pct2(w).as_str()), (496, "12.11"));

        let (_, total, w) = counts(4096, 16, 0.125);
        assert_eq!((total, pct2(w).as_str()), (376, "9.18"));
    }

    #[test]
    fn lower_bound_values() {
        let w = lower_bound_workload(4096, 8).unwrap();
        assert_eq!(w.comparisons_per_level, vec![512, 2, 2, 2]);
        assert_eq!(w.comparisons_total, 518);
        assert_eq!(pct2(w.workload_percent), "12.65");

        let w = lower_bound_workload(1 << 20, 16).unwrap();
        assert!((w.workload_percent - 6.25).abs() < 0.01);
        assert_eq!(baseline_workload(4096).workload_percent, 100.0);
    }

    #[test]
    fn default_schedule_rejects_bad_k1() {
        for k1 in [0.0, -0.5, 1.5, f64::NAN] {
            assert!(default_schedule(4096, 16, k1).is_err());
        }
        assert!(default_schedule(4095, 16, 0.5).is_err());
    }

    #[test]
    fn default_schedule_non_increasing() {
        for n1 in [2, 4, 8, 16, 32] {
            for k in 0..8 {
                let s = default_schedule(4096, n1, 0.5f64.powi(k)).unwrap();
                assert!(s.selections().windows(2).all(|w| w[0] >= w[1]));
            }
        }
    }

    #[test]
    fn default_schedule_is_sublinear() {
        for n1 in [4, 8, 16, 32, 64] {
            for k in 1..8 {
                let (_, total, _) = counts(1 << 14, n1, 0.5f64.powi(k));
                assert!(total < 1 << 14);
            }
        }
    }

    #[test]
    fn two_subject_cascade() {
        let g = random_gallery(2, 4, 1);
        let f = build_index(
            &g,
            &IndexConfig::new(2, FusionMethod::Average1, PairingMethod::SimilarityScore),
            None,
        )
        .unwrap();
        let schedule = CascadeSchedule::keep_all(2, 2).unwrap();
        let trace =
            retrieve(&g.templates[1], &f, &schedule, &PlaintextComparator::default()).unwrap();
        assert_eq!(trace.compared, vec![1, 2]);
        assert_eq!(trace.candidates.len(), 2);
        assert_eq!(trace.candidates.top().unwrap().subject_id, 1);
        assert_eq!(trace.candidates.top().unwrap().score, 0.0);
    }

    #[test]
    fn keep_all_agrees_with_exhaustive() {
        let g = random_gallery(64, 16, 2);
        let f = build_index(
            &g,
            &IndexConfig::new(8, FusionMethod::Average1, PairingMethod::SimilarityScore),
            None,
        )
        .unwrap();
        let schedule = CascadeSchedule::keep_all(8, 64).unwrap();
        let cmp = PlaintextComparator::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let probe =
                v(&(0..16).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>()).normalized();
            let trace = retrieve(&probe, &f, &schedule, &cmp).unwrap();
            let full = exhaustive_gallery(&probe, &g, &cmp).unwrap();
            assert_eq!(trace.candidates, full);
        }
    }

    #[test]
    fn trace_shape_follows_schedule() {
        let g = random_gallery(256, 8, 4);
        let f = build_index(
            &g,
            &IndexConfig::new(16, FusionMethod::Average1, PairingMethod::Random),
            None,
        )
        .unwrap();
        let schedule = default_schedule(256, 16, 0.5).unwrap();
        let trace =
            retrieve(&g.templates[5], &f, &schedule, &PlaintextComparator::default()).unwrap();
        assert_eq!(trace.compared, schedule.comparisons_per_level(256).unwrap());
        for l in 0..trace.compared.len() - 1 {
            assert!(trace.selected[l] <= trace.compared[l]);
            assert_eq!(trace.compared[l + 1], 2 * trace.selected[l]);
        }
        assert_eq!(trace.candidates.len(), *trace.compared.last().unwrap());

        let truncated = retrieve_with(
            &g.templates[5],
            &f,
            &schedule,
            &PlaintextComparator::default(),
            FinalSelection::Truncate,
        )
        .unwrap();
        assert_eq!(truncated.candidates.len(), *schedule.selections().last().unwrap());
        assert_eq!(
            truncated.candidates.entries(),
            &trace.candidates.entries()[..truncated.candidates.len()]
        );
    }

    #[test]
    fn retrieval_errors() {
        let g = random_gallery(16, 8, 5);
        let f = build_index(
            &g,
            &IndexConfig::new(4, FusionMethod::Average1, PairingMethod::Random),
            None,
        )
        .unwrap();
        let cmp = PlaintextComparator::default();
        let wrong_n1 = default_schedule(16, 8, 0.5).unwrap();
        assert!(retrieve(&g.templates[0], &f, &wrong_n1, &cmp).is_err());
        let schedule = default_schedule(16, 4, 0.5).unwrap();
        assert!(matches!(
            retrieve(&v(&[1.0; 3]), &f, &schedule, &cmp),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn exhaustive_examples() {
        let g = Gallery::from_templates(vec![v(&[0.5, 0.5])]).unwrap();
        let c = exhaustive_gallery(&v(&[1.0, 0.0]), &g, &PlaintextComparator::default()).unwrap();
        assert_eq!(c.len(), 1);

        let g = random_gallery(20, 6, 6);
        let c = exhaustive_gallery(&g.templates[7], &g, &PlaintextComparator::default()).unwrap();
        assert_eq!(*c.top().unwrap(), Candidate { subject_id: 7, score: 0.0 });
        assert_eq!(c.rank_of(7), Some(1));
    }

    #[test]
    fn exhaustive_matches_resort_oracle() {
        let g = random_gallery(50, 8, 7);
        let cmp = PlaintextComparator { metric: Metric::Euclidean };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        for _ in 0..1000 {
            let probe = v(&(0..8).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>());
            let list = exhaustive_gallery(&probe, &g, &cmp).unwrap();
            let mut oracle: Vec<(f64, u64)> = g
                .templates
                .iter()
                .zip(&g.subject_ids)
                .map(|(t, &id)| {
                    let d = t
                        .values()
                        .iter()
                        .zip(probe.values())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt();
                    (d, id)
                })
                .collect();
            oracle.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let got: Vec<u64> = list.entries().iter().map(|c| c.subject_id).collect();
            let want: Vec<u64> = oracle.iter().map(|o| o.1).collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn comparison_counts_do_not_depend_on_probe() {
        let g = random_gallery(128, 8, 9);
        let f = build_index(
            &g,
            &IndexConfig::new(8, FusionMethod::Average1, PairingMethod::SimilarityScore),
            None,
        )
        .unwrap();
        let schedule = default_schedule(128, 8, 0.25).unwrap();
        let cmp = PlaintextComparator::default();
        let first = retrieve(&g.templates[0], &f, &schedule, &cmp).unwrap().compared;
        for t in &g.templates[1..] {
            assert_eq!(retrieve(t, &f, &schedule, &cmp).unwrap().compared, first);
        }
    }

    #[test]
    fn larger_selections_keep_earlier_candidates() {
        let g = random_gallery(128, 8, 10);
        let f = build_index(
            &g,
            &IndexConfig::new(8, FusionMethod::Average1, PairingMethod::SimilarityScore),
            None,
        )
        .unwrap();
        let cmp = PlaintextComparator::default();
        // later levels keep everything they compare, so the compared leaf
        // sets are nested
        let small = CascadeSchedule::new(8, vec![2, 4, 8, 16]).unwrap();
        let large = CascadeSchedule::new(8, vec![5, 10, 20, 40]).unwrap();
        for t in &g.templates {
            let a = retrieve(t, &f, &small, &cmp).unwrap();
            let b = retrieve(t, &f, &large, &cmp).unwrap();
            assert!(b.candidates.len() >= a.candidates.len());
            for c in a.candidates.entries() {
                assert!(b.candidates.rank_of(c.subject_id).is_some());
            }
        }
        // enlarging only the level above the leaves
        let small = CascadeSchedule::new(8, vec![4, 2, 2, 1]).unwrap();
        let large = CascadeSchedule::new(8, vec![4, 2, 4, 1]).unwrap();
        for t in &g.templates {
            let a = retrieve(t, &f, &small, &cmp).unwrap();
            let b = retrieve(t, &f, &large, &cmp).unwrap();
            for c in a.candidates.entries() {
                assert!(b.candidates.rank_of(c.subject_id).is_some());
            }
        }
    }
}

//! Identification metrics and the experiment runner.
//!
//! Closed-set performance is the cumulative match characteristic: the
//! fraction of enrolled probes whose mated subject appears within the first
//! `r` candidates. Open-set performance is the detection error trade-off
//! between false positive and false negative identification rates as the
//! acceptance threshold on the best candidate score moves. All rates are in
//! percent.

mod experiment;

use std::collections::HashSet;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::SubjectId;
use crate::retrieval::{Candidate, CandidateList};

pub use experiment::{
    run_experiment, DataConfig, ExperimentConfig, IndexSection, ProtectionSection, ReportBundle,
    RetrievalSection, SystemResult, CONFIG_SCHEMA_VERSION,
};

/// FPIR operating point for FNIR₁₀₀₀, in percent.
pub const FPIR_0_1_PERCENT: f64 = 0.1;

/// What evaluation keeps of one identification transaction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Outcome {
    pub subject_id: SubjectId,
    /// 1-based rank of the mated subject; `None` if absent.
    pub mated_rank: Option<usize>,
    pub top: Option<Candidate>,
}

impl Outcome {
    pub fn new(subject_id: SubjectId, candidates: &CandidateList) -> Self {
        Self {
            subject_id,
            mated_rank: candidates.rank_of(subject_id),
            top: candidates.top().copied(),
        }
    }

    /// Best score; `+inf` for an empty list, which is never accepted.
    pub fn decision_score(&self) -> f64 {
        self.top.map_or(f64::INFINITY, |c| c.score)
    }

    fn correct_identity(&self) -> bool {
        self.top.is_some_and(|c| c.subject_id == self.subject_id)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClosedSetResult {
    /// `(r, IR(r))` for `r = 1..=max_rank`.
    pub cmc: Vec<(usize, f64)>,
    pub rr1: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DetPoint {
    pub threshold: f64,
    pub fpir: f64,
    pub fnir: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OpenSetResult {
    /// Ascending thresholds from `-inf` to `+inf`.
    pub det: Vec<DetPoint>,
    pub eer: f64,
    pub fnir_at_fpir_0_1pct: f64,
}

fn percent(count: usize, total: usize) -> f64 {
    100.0 * count as f64 / total as f64
}

pub fn closed_set_from_outcomes(outcomes: &[Outcome], max_rank: usize) -> Result<ClosedSetResult> {
    if outcomes.is_empty() {
        return Err(Error::Empty("enrolled probes"));
    }
    if max_rank == 0 {
        return Err(Error::InvalidParameter("max rank must be positive".into()));
    }
    let mut hits = vec![0usize; max_rank + 1];
    for o in outcomes {
        if let Some(r) = o.mated_rank.filter(|&r| r <= max_rank) {
            hits[r] += 1;
        }
    }
    let mut cumulative = 0;
    let cmc: Vec<(usize, f64)> = (1..=max_rank)
        .map(|r| {
            cumulative += hits[r];
            (r, percent(cumulative, outcomes.len()))
        })
        .collect();
    Ok(ClosedSetResult { rr1: cmc[0].1, cmc })
}

/// Exact empirical DET over every distinct observed decision score, plus
/// the `±inf` sentinels. A transaction is accepted when its best score is at
/// most the threshold; an enrolled transaction only counts as a hit when the
/// accepted candidate is its own subject.
pub fn open_set_from_outcomes(
    enrolled: &[Outcome],
    nonenrolled: &[Outcome],
) -> Result<OpenSetResult> {
    if enrolled.is_empty() {
        return Err(Error::Empty("enrolled probes"));
    }
    if nonenrolled.is_empty() {
        return Err(Error::Empty("non-enrolled probes"));
    }
    let sorted = |it: &mut dyn Iterator<Item = f64>| {
        let mut v: Vec<f64> = it.collect();
        v.sort_by(f64::total_cmp);
        v
    };
    let hits =
        sorted(&mut enrolled.iter().filter(|o| o.correct_identity()).map(Outcome::decision_score));
    let impostors = sorted(&mut nonenrolled.iter().map(Outcome::decision_score));
    let mut thresholds = sorted(
        &mut enrolled
            .iter()
            .chain(nonenrolled)
            .map(Outcome::decision_score)
            .filter(|s| s.is_finite()),
    );
    thresholds.dedup();
    thresholds.insert(0, f64::NEG_INFINITY);
    thresholds.push(f64::INFINITY);

    let det: Vec<DetPoint> = thresholds
        .into_iter()
        .map(|t| {
            let accepted = |v: &[f64]| v.partition_point(|&s| s <= t);
            DetPoint {
                threshold: t,
                fpir: percent(accepted(&impostors), nonenrolled.len()),
                fnir: percent(enrolled.len() - accepted(&hits), enrolled.len()),
            }
        })
        .collect();

    let eer_point = det
        .iter()
        .min_by(|a, b| (a.fpir - a.fnir).abs().total_cmp(&(b.fpir - b.fnir).abs()))
        .expect("at least the sentinels");
    let operating =
        det.iter().rev().find(|p| p.fpir <= FPIR_0_1_PERCENT).expect("FPIR is 0 at -inf");
    Ok(OpenSetResult {
        eer: (eer_point.fpir + eer_point.fnir) / 2.0,
        fnir_at_fpir_0_1pct: operating.fnir,
        det,
    })
}

/// Runs `system` on every probe, in parallel, keeping only outcomes.
pub fn collect_outcomes<P, F>(probes: &[(SubjectId, P)], system: F) -> Result<Vec<Outcome>>
where
    P: Sync,
    F: Fn(usize, &P) -> Result<CandidateList> + Sync,
{
    probes
        .par_iter()
        .enumerate()
        .map(|(i, (subject, probe))| Ok(Outcome::new(*subject, &system(i, probe)?)))
        .collect()
}

/// Closed-set evaluation of `system` over enrolled probes.
pub fn closed_set_eval<P, F>(
    probes: &[(SubjectId, P)],
    enrolled: &HashSet<SubjectId>,
    max_rank: usize,
    system: F,
) -> Result<ClosedSetResult>
where
    P: Sync,
    F: Fn(&P) -> Result<CandidateList> + Sync,
{
    if let Some((id, _)) = probes.iter().find(|(id, _)| !enrolled.contains(id)) {
        return Err(Error::NotEnrolled(*id));
    }
    let outcomes = collect_outcomes(probes, |_, p| system(p))?;
    closed_set_from_outcomes(&outcomes, max_rank)
}

/// Open-set evaluation of `system` over both probe partitions.
pub fn open_set_eval<P, F>(
    probes_enrolled: &[(SubjectId, P)],
    probes_nonenrolled: &[(SubjectId, P)],
    system: F,
) -> Result<OpenSetResult>
where
    P: Sync,
    F: Fn(&P) -> Result<CandidateList> + Sync,
{
    let enrolled = collect_outcomes(probes_enrolled, |_, p| system(p))?;
    let nonenrolled = collect_outcomes(probes_nonenrolled, |_, p| system(p))?;
    open_set_from_outcomes(&enrolled, &nonenrolled)
}

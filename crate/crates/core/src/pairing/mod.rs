//! Selecting which subjects are fused with each other.
//!
//! Pairing is a global-cost assignment problem: a square cost matrix with a
//! forbidden diagonal is solved for a minimum-cost permutation, which is then
//! cut into disjoint pairs. Repeating this over fused representatives builds
//! groups of 4, 8, ... subjects.

mod hierarchy;
mod hungarian;
mod matching;

use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{squared_distance_slices, EmbeddingVector, Race, Sex, SoftBiometrics};

pub use hierarchy::{
    intra_group_cost, pair_hierarchy, HierarchyLevel, PairHierarchy, PairingConfig,
};
pub use hungarian::{assignment_cost, solve_assignment};
pub use matching::{brute_force_matching, extract_pairs, PairingResult, BRUTE_FORCE_LIMIT};

/// Diagonal value marking a forbidden self-assignment.
pub const FORBIDDEN: f64 = f64::MAX;

/// Square pairing cost matrix, row-major, with [`FORBIDDEN`] on the diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    size: usize,
    costs: Vec<f64>,
}

impl CostMatrix {
    /// Builds the matrix from an off-diagonal cost function. Off-diagonal
    /// costs must be finite and non-negative.
    pub fn from_fn(size: usize, cost: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut costs = Vec::with_capacity(size * size);
        for i in 0..size {
            for j in 0..size {
                costs.push(if i == j { FORBIDDEN } else { cost(i, j) });
            }
        }
        Self::from_row_major(size, costs)
    }

    pub fn from_row_major(size: usize, mut costs: Vec<f64>) -> Result<Self> {
        if costs.len() != size * size {
            return Err(Error::InvalidParameter(format!(
                "{} entries for a {size}x{size} matrix",
                costs.len()
            )));
        }
        for i in 0..size {
            costs[i * size + i] = FORBIDDEN;
            for j in 0..size {
                let c = costs[i * size + j];
                if i != j && !(c.is_finite() && c >= 0.0) {
                    return Err(Error::InvalidParameter(format!(
                        "cost ({i}, {j}) = {c} is not finite and non-negative"
                    )));
                }
            }
        }
        Ok(Self { size, costs })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.costs[i * self.size + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.costs[i * self.size..(i + 1) * self.size]
    }

    /// `(C + Cᵀ) / 2` off the diagonal.
    pub fn symmetrized(&self) -> Self {
        let n = self.size;
        let mut costs = self.costs.clone();
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    costs[i * n + j] = (self.get(i, j) + self.get(j, i)) / 2.0;
                }
            }
        }
        Self { size: n, costs }
    }

    /// Plain-text dump: one row per line, space-separated.
    pub fn write_text<W: Write>(&self, mut out: W) -> io::Result<()> {
        for i in 0..self.size {
            let row: Vec<String> = self.row(i).iter().map(|c| format!("{c:e}")).collect();
            writeln!(out, "{}", row.join(" "))?;
        }
        Ok(())
    }
}

/// Pairwise Euclidean distances: smaller cost means more similar.
pub fn cost_matrix_scores(templates: &[EmbeddingVector]) -> Result<CostMatrix> {
    let n = templates.len();
    if let Some(first) = templates.first() {
        if let Some(t) = templates.iter().find(|t| t.dim() != first.dim()) {
            return Err(Error::DimensionMismatch { expected: first.dim(), found: t.dim() });
        }
    }
    // upper triangle, mirrored
    let upper: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let a = templates[i].values();
            templates[i + 1..]
                .iter()
                .map(|t| squared_distance_slices(a, t.values()).sqrt())
                .collect()
        })
        .collect();
    let mut costs = vec![FORBIDDEN; n * n];
    for (i, row) in upper.iter().enumerate() {
        for (k, &d) in row.iter().enumerate() {
            let j = i + 1 + k;
            costs[i * n + j] = d;
            costs[j * n + i] = d;
        }
    }
    CostMatrix::from_row_major(n, costs)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftWeights {
    pub sex: f64,
    pub race: f64,
    pub age: f64,
}

impl Default for SoftWeights {
    fn default() -> Self {
        Self { sex: 1.0, race: 1.0, age: 1.0 }
    }
}

/// Soft-biometric attributes of a subject or of an aggregated group.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SoftProfile {
    pub sex: Sex,
    pub race: Race,
    pub age: f64,
}

impl From<SoftBiometrics> for SoftProfile {
    fn from(s: SoftBiometrics) -> Self {
        Self { sex: s.sex, race: s.race, age: s.age as f64 }
    }
}

pub(crate) fn soft_costs(profiles: &[SoftProfile], weights: SoftWeights) -> Result<CostMatrix> {
    let (lo, hi) = profiles
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.age), hi.max(p.age)));
    let range = if hi > lo { hi - lo } else { 1.0 };
    CostMatrix::from_fn(profiles.len(), |i, j| {
        let (a, b) = (&profiles[i], &profiles[j]);
        weights.sex * f64::from(u8::from(a.sex != b.sex))
            + weights.race * f64::from(u8::from(a.race != b.race))
            + weights.age * (a.age - b.age).abs() / range
    })
}

/// Weighted attribute mismatch; age differences are scaled by the gallery's
/// age range.
pub fn cost_matrix_soft(
    subject_ids: &[u64],
    attributes: &[Option<SoftBiometrics>],
    weights: SoftWeights,
) -> Result<CostMatrix> {
    let profiles = attributes
        .iter()
        .zip(subject_ids)
        .map(|(a, &id)| a.map(SoftProfile::from).ok_or(Error::MissingAttributes(id)))
        .collect::<Result<Vec<_>>>()?;
    soft_costs(&profiles, weights)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PairingMethod {
    #[serde(rename = "random")]
    Random,
    #[serde(rename = "soft")]
    SoftBiometric,
    #[serde(rename = "score")]
    SimilarityScore,
}

impl PairingMethod {
    pub const ALL: [PairingMethod; 3] =
        [PairingMethod::Random, PairingMethod::SoftBiometric, PairingMethod::SimilarityScore];

    pub fn name(self) -> &'static str {
        match self {
            PairingMethod::Random => "random",
            PairingMethod::SoftBiometric => "soft",
            PairingMethod::SimilarityScore => "score",
        }
    }

    pub fn id(self) -> u8 {
        match self {
            PairingMethod::Random => 1,
            PairingMethod::SoftBiometric => 2,
            PairingMethod::SimilarityScore => 3,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.id() == id)
    }
}

impl fmt::Display for PairingMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PairingMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown pairing method {s:?}")))
    }
}

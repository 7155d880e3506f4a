use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    cost_matrix_scores, extract_pairs, soft_costs, solve_assignment, PairingMethod, SoftProfile,
    SoftWeights,
};
use crate::error::{Error, Result};
use crate::fusion::Fuser;
use crate::model::{euclidean_distance, is_valid_n1, EmbeddingVector, Gallery};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairingConfig {
    pub method: PairingMethod,
    /// Only used by [`PairingMethod::Random`].
    pub seed: u64,
    pub soft_weights: SoftWeights,
}

impl PairingConfig {
    pub fn new(method: PairingMethod) -> Self {
        Self { method, seed: 0, soft_weights: SoftWeights::default() }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// One pairing iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct HierarchyLevel {
    /// Index pairs into the previous layer (the gallery for the first
    /// iteration), left child first.
    pub merges: Vec<(usize, usize)>,
    /// Fused representative of each merged group, same order as `merges`.
    pub fused: Vec<EmbeddingVector>,
    /// Matching cost under the method's own cost matrix; `None` for random.
    pub matching_cost: Option<f64>,
}

/// Bottom-up grouping: iteration `k` merges groups of `2^k` subjects into
/// groups of `2^(k+1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairHierarchy {
    pub gallery_size: usize,
    pub levels: Vec<HierarchyLevel>,
}

impl PairHierarchy {
    /// Gallery indices covered by each group after iteration `iteration`
    /// (0-based), in tree order.
    pub fn groups(&self, iteration: usize) -> Vec<Vec<usize>> {
        let mut groups: Vec<Vec<usize>> = (0..self.gallery_size).map(|i| vec![i]).collect();
        for level in &self.levels[..=iteration] {
            groups = level
                .merges
                .iter()
                .map(|&(a, b)| [groups[a].as_slice(), groups[b].as_slice()].concat())
                .collect();
        }
        groups
    }

    /// Sum of Euclidean distances between the two sides of every merge, over
    /// all iterations. Comparable across pairing methods.
    pub fn merge_cost(&self, gallery: &[EmbeddingVector]) -> Result<f64> {
        let mut total = 0.0;
        for (k, level) in self.levels.iter().enumerate() {
            let layer = if k == 0 { gallery } else { &self.levels[k - 1].fused };
            for &(a, b) in &level.merges {
                total += euclidean_distance(&layer[a], &layer[b])?;
            }
        }
        Ok(total)
    }

    pub fn final_groups(&self) -> Vec<Vec<usize>> {
        match self.levels.len() {
            0 => (0..self.gallery_size).map(|i| vec![i]).collect(),
            n => self.groups(n - 1),
        }
    }
}

/// Majority vote for categorical attributes (first-seen member wins ties),
/// mean for age. `members` must be sorted ascending.
fn aggregate_profile(members: &[usize], subjects: &[SoftProfile]) -> SoftProfile {
    fn vote<T: Copy + PartialEq>(values: impl Iterator<Item = T>) -> T {
        let mut counts: Vec<(T, usize)> = Vec::new();
        for v in values {
            match counts.iter_mut().find(|(c, _)| *c == v) {
                Some((_, n)) => *n += 1,
                None => counts.push((v, 1)),
            }
        }
        let best = counts.iter().map(|&(_, n)| n).max().unwrap_or(0);
        counts.into_iter().find(|&(_, n)| n == best).expect("non-empty group").0
    }
    let ps = || members.iter().map(|&m| subjects[m]);
    SoftProfile {
        sex: vote(ps().map(|p| p.sex)),
        race: vote(ps().map(|p| p.race)),
        age: ps().map(|p| p.age).sum::<f64>() / members.len() as f64,
    }
}

/// Builds groups of `n1` subjects by iterated pairing.
///
/// Each iteration pairs the current groups (solving the assignment over
/// the method's cost matrix, or shuffling under the seed for the random
/// method), then fuses every new pair with `fuser`. The fused vectors are
/// kept so the index can reuse them.
pub fn pair_hierarchy(
    gallery: &Gallery,
    config: &PairingConfig,
    n1: usize,
    fuser: &Fuser<'_>,
) -> Result<PairHierarchy> {
    if !is_valid_n1(n1) {
        return Err(Error::InvalidParameter(format!("n1 = {n1} is not a power of two >= 2")));
    }
    let n = gallery.len();
    if !n.is_multiple_of(n1) {
        return Err(Error::Divisibility { size: n, n1 });
    }
    let subject_profiles = match config.method {
        PairingMethod::SoftBiometric => Some(
            gallery
                .soft
                .iter()
                .zip(&gallery.subject_ids)
                .map(|(s, &id)| s.map(SoftProfile::from).ok_or(Error::MissingAttributes(id)))
                .collect::<Result<Vec<_>>>()?,
        ),
        _ => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut hierarchy = PairHierarchy { gallery_size: n, levels: Vec::new() };
    let iterations = n1.trailing_zeros() as usize;

    for iteration in 0..iterations {
        let layer: &[EmbeddingVector] = match iteration {
            0 => &gallery.templates,
            k => &hierarchy.levels[k - 1].fused,
        };
        let (merges, matching_cost) = match config.method {
            PairingMethod::Random => {
                let mut order: Vec<usize> = (0..layer.len()).collect();
                order.shuffle(&mut rng);
                (order.chunks_exact(2).map(|c| (c[0], c[1])).collect(), None)
            }
            PairingMethod::SimilarityScore | PairingMethod::SoftBiometric => {
                let costs = if let Some(profiles) = &subject_profiles {
                    let group_profiles: Vec<SoftProfile> = if iteration == 0 {
                        profiles.clone()
                    } else {
                        hierarchy
                            .groups(iteration - 1)
                            .into_iter()
                            .map(|mut members| {
                                members.sort_unstable();
                                aggregate_profile(&members, profiles)
                            })
                            .collect()
                    };
                    soft_costs(&group_profiles, config.soft_weights)?
                } else {
                    cost_matrix_scores(layer)?
                }
                .symmetrized();
                let assignment = solve_assignment(&costs)?;
                let result = extract_pairs(&assignment, &costs)?;
                (result.pairs, Some(result.total_cost))
            }
        };
        let fused = merges
            .iter()
            .map(|&(a, b)| fuser.fuse(&layer[a], &layer[b]))
            .collect::<Result<Vec<_>>>()?;
        hierarchy.levels.push(HierarchyLevel { merges, fused, matching_cost });
    }
    Ok(hierarchy)
}

/// Sum of pairwise Euclidean distances between members of the same group,
/// a method-independent measure of grouping quality.
pub fn intra_group_cost(templates: &[EmbeddingVector], groups: &[Vec<usize>]) -> Result<f64> {
    let mut total = 0.0;
    for group in groups {
        for (k, &i) in group.iter().enumerate() {
            for &j in &group[k + 1..] {
                total += euclidean_distance(&templates[i], &templates[j])?;
            }
        }
    }
    Ok(total)
}

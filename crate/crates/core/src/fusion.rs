//! Feature-level fusion of embedding vectors.
//!
//! Six binary operators combine two templates into one. Groups of `2^k`
//! templates are fused hierarchically: pairs first, then pairs of fused pairs,
//! following the same tree that the index stores.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EmbeddingVector, Split, SubjectRecord};

/// Per-position mean of a training set disjoint from gallery and probes.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingStats {
    pub mu: EmbeddingVector,
    pub source_count: usize,
}

impl TrainingStats {
    pub fn dim(&self) -> usize {
        self.mu.dim()
    }

    /// Statistics over the `train` split of `records`.
    pub fn from_records(records: &[SubjectRecord]) -> Result<Self> {
        let train: Vec<EmbeddingVector> = records
            .iter()
            .filter(|r| r.split == Split::Train)
            .map(|r| r.embedding.clone())
            .collect();
        compute_training_stats(&train)
    }
}

pub fn compute_training_stats(train: &[EmbeddingVector]) -> Result<TrainingStats> {
    let first = train.first().ok_or(Error::Empty("training set"))?;
    let dim = first.dim();
    let mut sums = vec![0.0; dim];
    for v in train {
        if v.dim() != dim {
            return Err(Error::DimensionMismatch { expected: dim, found: v.dim() });
        }
        for (s, x) in sums.iter_mut().zip(v.values()) {
            *s += x;
        }
    }
    let n = train.len() as f64;
    Ok(TrainingStats {
        mu: EmbeddingVector::from_trusted(sums.into_iter().map(|s| s / n).collect()),
        source_count: train.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FusionMethod {
    #[serde(rename = "avg1")]
    Average1,
    #[serde(rename = "avg2")]
    Average2,
    #[serde(rename = "dist1")]
    Distance1,
    #[serde(rename = "dist2")]
    Distance2,
    #[serde(rename = "idx1")]
    Index1,
    #[serde(rename = "idx2")]
    Index2,
}

impl FusionMethod {
    pub const ALL: [FusionMethod; 6] = [
        FusionMethod::Average1,
        FusionMethod::Average2,
        FusionMethod::Distance1,
        FusionMethod::Distance2,
        FusionMethod::Index1,
        FusionMethod::Index2,
    ];

    pub fn requires_stats(self) -> bool {
        matches!(self, FusionMethod::Average2 | FusionMethod::Distance1 | FusionMethod::Distance2)
    }

    pub fn name(self) -> &'static str {
        match self {
            FusionMethod::Average1 => "avg1",
            FusionMethod::Average2 => "avg2",
            FusionMethod::Distance1 => "dist1",
            FusionMethod::Distance2 => "dist2",
            FusionMethod::Index1 => "idx1",
            FusionMethod::Index2 => "idx2",
        }
    }

    /// Stable numeric id used in the index file header.
    pub fn id(self) -> u8 {
        match self {
            FusionMethod::Average1 => 1,
            FusionMethod::Average2 => 2,
            FusionMethod::Distance1 => 3,
            FusionMethod::Distance2 => 4,
            FusionMethod::Index1 => 5,
            FusionMethod::Index2 => 6,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.id() == id)
    }
}

impl fmt::Display for FusionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown fusion method {s:?}")))
    }
}

fn required_mu(method: FusionMethod, stats: Option<&TrainingStats>, dim: usize) -> Result<&[f64]> {
    let stats = stats.ok_or(Error::MissingStats(method.name()))?;
    if stats.dim() != dim {
        return Err(Error::DimensionMismatch { expected: dim, found: stats.dim() });
    }
    Ok(stats.mu.values())
}

/// 1-based rank of each position when the vector's elements are sorted
/// ascending by distance to the mean. Ties keep index order.
fn distance_ranks(x: &[f64], mu: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&i, &j| {
        let di = (x[i] - mu[i]).abs();
        let dj = (x[j] - mu[j]).abs();
        di.total_cmp(&dj)
    });
    let mut ranks = vec![0; x.len()];
    for (pos, idx) in order.into_iter().enumerate() {
        ranks[idx] = pos + 1;
    }
    ranks
}

/// Fuses two templates of equal dimension.
pub fn fuse(
    a: &EmbeddingVector,
    b: &EmbeddingVector,
    method: FusionMethod,
    stats: Option<&TrainingStats>,
) -> Result<EmbeddingVector> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch { expected: a.dim(), found: b.dim() });
    }
    let (x, y) = (a.values(), b.values());
    let dim = x.len();
    let out: Vec<f64> = match method {
        FusionMethod::Average1 => x.iter().zip(y).map(|(p, q)| (p + q) / 2.0).collect(),
        FusionMethod::Average2 => {
            let mu = required_mu(method, stats, dim)?;
            // not normalized by the weight sum
            (0..dim)
                .map(|i| (x[i] * (x[i] - mu[i]).abs() + y[i] * (y[i] - mu[i]).abs()) / 2.0)
                .collect()
        }
        FusionMethod::Distance1 => {
            let mu = required_mu(method, stats, dim)?;
            (0..dim)
                .map(|i| if (x[i] - mu[i]).abs() >= (y[i] - mu[i]).abs() { x[i] } else { y[i] })
                .collect()
        }
        FusionMethod::Distance2 => {
            let mu = required_mu(method, stats, dim)?;
            let rx = distance_ranks(x, mu);
            let ry = distance_ranks(y, mu);
            (0..dim).map(|i| if rx[i] >= ry[i] { x[i] } else { y[i] }).collect()
        }
        FusionMethod::Index1 => {
            let split = dim.div_ceil(2);
            x[..split].iter().chain(&y[split..]).copied().collect()
        }
        FusionMethod::Index2 => (0..dim).map(|i| if i % 2 == 0 { x[i] } else { y[i] }).collect(),
    };
    Ok(EmbeddingVector::from_trusted(out))
}

/// A fusion operator bound to its statistics and output normalization.
#[derive(Clone, Copy, Debug)]
pub struct Fuser<'a> {
    pub method: FusionMethod,
    pub stats: Option<&'a TrainingStats>,
    /// Rescale fused outputs to unit length. Off by default.
    pub renormalize: bool,
}

impl<'a> Fuser<'a> {
    pub fn new(method: FusionMethod, stats: Option<&'a TrainingStats>) -> Result<Self> {
        if method.requires_stats() && stats.is_none() {
            return Err(Error::MissingStats(method.name()));
        }
        Ok(Self { method, stats, renormalize: false })
    }

    pub fn with_renormalize(mut self, renormalize: bool) -> Self {
        self.renormalize = renormalize;
        self
    }

    pub fn fuse(&self, a: &EmbeddingVector, b: &EmbeddingVector) -> Result<EmbeddingVector> {
        let out = fuse(a, b, self.method, self.stats)?;
        Ok(if self.renormalize { out.normalized() } else { out })
    }
}

/// Fuses `2^k` members bottom-up along a balanced binary tree whose leaves
/// are the members in the given order.
pub fn fuse_group(
    members: &[EmbeddingVector],
    method: FusionMethod,
    stats: Option<&TrainingStats>,
) -> Result<EmbeddingVector> {
    if members.is_empty() || !members.len().is_power_of_two() {
        return Err(Error::InvalidParameter(format!(
            "group size {} is not a power of two",
            members.len()
        )));
    }
    let mut layer: Vec<EmbeddingVector> = members.to_vec();
    while layer.len() > 1 {
        layer = layer
            .chunks_exact(2)
            .map(|pair| fuse(&pair[0], &pair[1], method, stats))
            .collect::<Result<_>>()?;
    }
    Ok(layer.pop().expect("non-empty layer"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(values: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(values.to_vec()).unwrap()
    }

    fn stats(mu: &[f64]) -> TrainingStats {
        TrainingStats { mu: v(mu), source_count: 1 }
    }

    #[test]
    fn training_stats_examples() {
        let s = compute_training_stats(&[v(&[1.0, 3.0]), v(&[3.0, 1.0])]).unwrap();
        assert_eq!(s.mu, v(&[2.0, 2.0]));
        assert_eq!(s.source_count, 2);
        let single = v(&[0.25, -4.0, 9.5]);
        assert_eq!(compute_training_stats(std::slice::from_ref(&single)).unwrap().mu, single);
        assert!(matches!(compute_training_stats(&[]), Err(Error::Empty(_))));
        assert!(compute_training_stats(&[v(&[1.0]), v(&[1.0, 2.0])]).is_err());
    }

    #[test]
    fn binary_examples() {
        let fused = |a: &[f64], b: &[f64], m, mu: Option<&[f64]>| {
            let s = mu.map(stats);
            fuse(&v(a), &v(b), m, s.as_ref()).unwrap().into_values()
        };
        use FusionMethod::*;
        assert_eq!(fused(&[1.0, 3.0], &[3.0, 1.0], Average1, None), [2.0, 2.0]);
        assert_eq!(fused(&[1.0, 3.0], &[3.0, 1.0], Average2, Some(&[0.0, 0.0])), [5.0, 5.0]);
        assert_eq!(fused(&[1.0, 3.0], &[4.0, 2.0], Distance1, Some(&[2.0, 2.0])), [4.0, 3.0]);
        assert_eq!(
            fused(&[5.0, 2.0, 9.0], &[3.0, 8.0, 4.0], Distance2, Some(&[4.0, 4.0, 4.0])),
            [3.0, 8.0, 9.0]
        );
        assert_eq!(
            fused(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0], Index1, None),
            [1.0, 2.0, 7.0, 8.0]
        );
        assert_eq!(
            fused(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0], Index2, None),
            [1.0, 6.0, 3.0, 8.0]
        );
    }

    #[test]
    fn distance_ranks_independent_oracle() {
        // a-distances (1,2,5) and b-distances (1,4,0) around mu = 4
        assert_eq!(distance_ranks(&[5.0, 2.0, 9.0], &[4.0; 3]), [1, 2, 3]);
        assert_eq!(distance_ranks(&[3.0, 8.0, 4.0], &[4.0; 3]), [2, 3, 1]);
        // duplicates keep index order
        assert_eq!(distance_ranks(&[1.0, 1.0, 7.0, 1.0], &[0.0; 4]), [1, 2, 4, 3]);
    }

    #[test]
    fn index1_odd_dim_favours_first() {
        let out = fuse(&v(&[1.0, 2.0, 3.0]), &v(&[4.0, 5.0, 6.0]), FusionMethod::Index1, None);
        assert_eq!(out.unwrap().into_values(), [1.0, 2.0, 6.0]);
    }

    #[test]
    fn distance1_tie_picks_first() {
        let s = stats(&[0.0]);
        let out = fuse(&v(&[-2.0]), &v(&[2.0]), FusionMethod::Distance1, Some(&s)).unwrap();
        assert_eq!(out.into_values(), [-2.0]);
    }

    #[test]
    fn missing_stats_and_dims() {
        for m in FusionMethod::ALL {
            let r = fuse(&v(&[1.0]), &v(&[2.0]), m, None);
            assert_eq!(r.is_err(), m.requires_stats(), "{m}");
        }
        assert!(matches!(
            fuse(&v(&[1.0]), &v(&[1.0, 2.0]), FusionMethod::Average1, None),
            Err(Error::DimensionMismatch { .. })
        ));
        let wrong = stats(&[0.0, 0.0, 0.0]);
        assert!(fuse(&v(&[1.0]), &v(&[2.0]), FusionMethod::Average2, Some(&wrong)).is_err());
    }

    #[test]
    fn group_examples() {
        let members = [v(&[0.0, 4.0]), v(&[2.0, 2.0]), v(&[4.0, 0.0]), v(&[2.0, 2.0])];
        let out = fuse_group(&members, FusionMethod::Average1, None).unwrap();
        assert_eq!(out, v(&[2.0, 2.0]));
        let one = v(&[3.0, -1.0]);
        for m in FusionMethod::ALL {
            let s = stats(&[0.5, 0.5]);
            assert_eq!(fuse_group(std::slice::from_ref(&one), m, Some(&s)).unwrap(), one);
        }
        assert!(fuse_group(&members[..3], FusionMethod::Average1, None).is_err());
        assert!(fuse_group(&[], FusionMethod::Average1, None).is_err());
    }

    #[test]
    fn group_distance1_matches_two_level_reduction() {
        let members = [
            v(&[0.9, -0.1, 0.3]),
            v(&[-0.4, 0.8, 0.2]),
            v(&[0.1, 0.1, -0.7]),
            v(&[0.5, -0.6, 0.0]),
        ];
        let mu = [0.1, 0.0, -0.1];
        let s = stats(&mu);
        // elementwise argmax of |x - mu| within each pair, then across pairs
        let pick = |p: &[f64], q: &[f64]| -> Vec<f64> {
            (0..3)
                .map(|i| if (p[i] - mu[i]).abs() >= (q[i] - mu[i]).abs() { p[i] } else { q[i] })
                .collect()
        };
        let left = pick(members[0].values(), members[1].values());
        let right = pick(members[2].values(), members[3].values());
        let expected = pick(&left, &right);
        let out = fuse_group(&members, FusionMethod::Distance1, Some(&s)).unwrap();
        assert_eq!(out.into_values(), expected);
    }

    #[test]
    fn method_names_round_trip() {
        for m in FusionMethod::ALL {
            assert_eq!(m.name().parse::<FusionMethod>().unwrap(), m);
            assert_eq!(FusionMethod::from_id(m.id()), Some(m));
        }
        assert!("avg3".parse::<FusionMethod>().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn vecs() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
            (1usize..12).prop_flat_map(|d| {
                (
                    proptest::collection::vec(-2.0f64..2.0, d),
                    proptest::collection::vec(-2.0f64..2.0, d),
                    proptest::collection::vec(-0.5f64..0.5, d),
                )
            })
        }

        proptest! {
            #[test]
            fn self_fusion((a, _b, mu) in vecs()) {
                let a = v(&a);
                let s = stats(&mu);
                for m in FusionMethod::ALL {
                    let out = fuse(&a, &a, m, Some(&s)).unwrap();
                    prop_assert_eq!(out.dim(), a.dim());
                    if m == FusionMethod::Average2 {
                        let expected: Vec<f64> = a.values().iter().zip(&mu)
                            .map(|(x, m)| (x * (x - m).abs() + x * (x - m).abs()) / 2.0)
                            .collect();
                        prop_assert_eq!(out.values(), &expected[..]);
                    } else {
                        prop_assert_eq!(&out, &a);
                    }
                }
            }

            #[test]
            fn average1_commutes((a, b, _mu) in vecs()) {
                let (a, b) = (v(&a), v(&b));
                prop_assert_eq!(
                    fuse(&a, &b, FusionMethod::Average1, None).unwrap(),
                    fuse(&b, &a, FusionMethod::Average1, None).unwrap()
                );
            }
        }
    }

    #[test]
    fn index_methods_do_not_commute() {
        let a = v(&[1.0, 2.0, 3.0, 4.0]);
        let b = v(&[5.0, 6.0, 7.0, 8.0]);
        for m in [FusionMethod::Index1, FusionMethod::Index2] {
            assert_ne!(fuse(&a, &b, m, None).unwrap(), fuse(&b, &a, m, None).unwrap());
        }
    }
}

//! Turning an assignment into disjoint pairs, and the exhaustive oracle.

use super::CostMatrix;
use crate::error::{Error, Result};

/// A perfect matching over `0..N`, pairs stored as `(low, high)` sorted by
/// their first element.
#[derive(Clone, Debug, PartialEq)]
pub struct PairingResult {
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

impl PairingResult {
    fn from_pairs(mut pairs: Vec<(usize, usize)>, costs: &CostMatrix) -> Self {
        for p in &mut pairs {
            if p.0 > p.1 {
                *p = (p.1, p.0);
            }
        }
        pairs.sort_unstable();
        let total_cost = pairs.iter().map(|&(i, j)| costs.get(i, j)).sum();
        Self { pairs, total_cost }
    }

    /// Every index in `0..n` appears in exactly one pair and no pair is a
    /// self-pair.
    pub fn is_perfect(&self, n: usize) -> bool {
        let mut seen = vec![false; n];
        for &(i, j) in &self.pairs {
            if i == j || i >= n || j >= n || seen[i] || seen[j] {
                return false;
            }
            seen[i] = true;
            seen[j] = true;
        }
        seen.into_iter().all(|s| s)
    }
}

/// Splits a fixed-point-free permutation into a perfect matching.
///
/// Each cycle is walked from its lowest index and cut into consecutive
/// pairs. Odd cycles leave one element over; the leftovers are matched
/// greedily by ascending cost, lower indices first on ties. Costs are read
/// from the symmetrized matrix.
pub fn extract_pairs(assignment: &[usize], costs: &CostMatrix) -> Result<PairingResult> {
    let n = assignment.len();
    if n != costs.size() {
        return Err(Error::DimensionMismatch { expected: costs.size(), found: n });
    }
    if n % 2 == 1 {
        return Err(Error::OddSize(n));
    }
    let mut hit = vec![false; n];
    for (i, &j) in assignment.iter().enumerate() {
        if j >= n || hit[j] {
            return Err(Error::InvalidParameter("assignment is not a permutation".into()));
        }
        if i == j {
            return Err(Error::InvalidParameter(format!("fixed point at {i}")));
        }
        hit[j] = true;
    }
    let costs = costs.symmetrized();

    let mut visited = vec![false; n];
    let mut pairs = Vec::with_capacity(n / 2);
    let mut leftovers = Vec::new();
    for start in 0..n {
        if visited[start] {
            continue;
        }
        let mut cycle = Vec::new();
        let mut cur = start;
        while !visited[cur] {
            visited[cur] = true;
            cycle.push(cur);
            cur = assignment[cur];
        }
        let mut chunks = cycle.chunks_exact(2);
        pairs.extend(chunks.by_ref().map(|c| (c[0], c[1])));
        leftovers.extend_from_slice(chunks.remainder());
    }

    let mut candidates: Vec<(usize, usize)> = Vec::new();
    for (a, &i) in leftovers.iter().enumerate() {
        for &j in &leftovers[a + 1..] {
            candidates.push((i.min(j), i.max(j)));
        }
    }
    candidates.sort_by(|&(a, b), &(c, d)| {
        costs.get(a, b).total_cmp(&costs.get(c, d)).then((a, b).cmp(&(c, d)))
    });
    let mut taken = vec![false; n];
    for (i, j) in candidates {
        if !taken[i] && !taken[j] {
            taken[i] = true;
            taken[j] = true;
            pairs.push((i, j));
        }
    }
    Ok(PairingResult::from_pairs(pairs, &costs))
}

pub const BRUTE_FORCE_LIMIT: usize = 12;

/// Exact minimum-cost perfect matching by enumerating all (N−1)!! matchings.
/// Earlier matchings in lexicographic order win ties.
pub fn brute_force_matching(costs: &CostMatrix) -> Result<PairingResult> {
    let n = costs.size();
    if n > BRUTE_FORCE_LIMIT {
        return Err(Error::TooLarge { size: n, limit: BRUTE_FORCE_LIMIT });
    }
    if n % 2 == 1 {
        return Err(Error::OddSize(n));
    }
    let costs = costs.symmetrized();

    struct Search<'a> {
        costs: &'a CostMatrix,
        used: Vec<bool>,
        current: Vec<(usize, usize)>,
        best: Option<(f64, Vec<(usize, usize)>)>,
    }

    impl Search<'_> {
        fn run(&mut self, acc: f64) {
            let Some(i) = self.used.iter().position(|u| !u) else {
                if self.best.as_ref().is_none_or(|(b, _)| acc < *b) {
                    self.best = Some((acc, self.current.clone()));
                }
                return;
            };
            self.used[i] = true;
            for j in i + 1..self.used.len() {
                if self.used[j] {
                    continue;
                }
                self.used[j] = true;
                self.current.push((i, j));
                self.run(acc + self.costs.get(i, j));
                self.current.pop();
                self.used[j] = false;
            }
            self.used[i] = false;
        }
    }

    let mut search = Search {
        costs: &costs,
        used: vec![false; n],
        current: Vec::with_capacity(n / 2),
        best: None,
    };
    search.run(0.0);
    let pairs = search.best.map(|(_, p)| p).unwrap_or_default();
    Ok(PairingResult::from_pairs(pairs, &costs))
}

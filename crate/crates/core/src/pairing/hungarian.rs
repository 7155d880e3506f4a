//! Minimum-cost assignment by the Hungarian method with row-by-row
//! shortest augmenting paths and dual potentials, O(N³) worst case.

use super::CostMatrix;
use crate::error::{Error, Result};

/// Returns `f` with `f[row] = column` minimizing `Σ C[row][f[row]]`.
///
/// The sentinel diagonal keeps every row off its own column whenever a
/// fixed-point-free assignment exists, which is always the case for N ≥ 2.
/// Ties resolve toward lower column indices.
pub fn solve_assignment(costs: &CostMatrix) -> Result<Vec<usize>> {
    let n = costs.size();
    if n < 2 {
        return Err(Error::InvalidParameter(format!(
            "assignment needs at least 2 subjects, got {n}"
        )));
    }
    // 1-based columns; column 0 is the virtual source.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![f64::INFINITY; n + 1];
    let mut used = vec![false; n + 1];

    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0usize;
        minv.fill(f64::INFINITY);
        used.fill(false);
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let row_costs = costs.row(i0 - 1);
            let ui0 = u[i0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = row_costs[j - 1] - ui0 - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        assignment[owner[j] - 1] = j - 1;
    }
    debug_assert!(assignment.iter().enumerate().all(|(i, &j)| i != j));
    Ok(assignment)
}

/// Total `Σ C[i][f[i]]` of an assignment.
pub fn assignment_cost(costs: &CostMatrix, assignment: &[usize]) -> f64 {
    assignment.iter().enumerate().map(|(i, &j)| costs.get(i, j)).sum()
}

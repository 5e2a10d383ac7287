//! Minimum-cost perfect matching on a square cost matrix (Hungarian method
//! with row/column potentials, O(n^3)).

use crate::error::{param, Result};

/// Returns the optimal total cost and, for every row, its assigned column.
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> Result<(f64, Vec<usize>)> {
    let n = cost.len();
    if cost.iter().any(|row| row.len() != n) {
        return param("assignment needs a square cost matrix");
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return param("assignment costs must be finite");
    }
    if n == 0 {
        return Ok((0.0, Vec::new()));
    }

    // 1-based arrays; column 0 is a virtual start.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if reduced < minv[j] {
                    minv[j] = reduced;
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

    let mut assign = vec![0usize; n];
    for j in 1..=n {
        assign[owner[j] - 1] = j - 1;
    }
    let total = assign.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
    Ok((total, assign))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_matrices() {
        let (c, a) = min_cost_assignment(&[vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0], vec![3.0, 2.0, 2.0]]).unwrap();
        assert_eq!(c, 5.0);
        assert_eq!(a, vec![1, 0, 2]);
        assert_eq!(min_cost_assignment(&[]).unwrap().0, 0.0);
        assert!(min_cost_assignment(&[vec![1.0, 2.0]]).is_err());
    }
}

//! Earth mover's distance between equal-size clouds via exact optimal assignment.

use crate::cloud::PointCloud;
use crate::error::{invalid_arg, Result};

/// Minimum-cost perfect matching of a square `n × n` cost matrix (row-major).
/// Returns `assignment[row] = column`.
///
/// Shortest augmenting path form of the Hungarian algorithm with row and
/// column potentials, O(n³).
pub fn solve_assignment(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n, "cost matrix must be n × n");
    if n == 0 {
        return Vec::new();
    }
    // 1-based internally; column 0 is a virtual source
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut min_slack = vec![0.0; n + 1];
    let mut used = vec![false; n + 1];

    for row in 1..=n {
        owner[0] = row;
        let mut col0 = 0;
        min_slack.fill(f64::INFINITY);
        used.fill(false);
        loop {
            used[col0] = true;
            let r = owner[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0;
            for col in 1..=n {
                if used[col] {
                    continue;
                }
                let slack = cost[(r - 1) * n + (col - 1)] - u[r] - v[col];
                if slack < min_slack[col] {
                    min_slack[col] = slack;
                    way[col] = col0;
                }
                if min_slack[col] < delta {
                    delta = min_slack[col];
                    col1 = col;
                }
            }
            for col in 0..=n {
                if used[col] {
                    u[owner[col]] += delta;
                    v[col] -= delta;
                } else {
                    min_slack[col] -= delta;
                }
            }
            col0 = col1;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let col1 = way[col0];
            owner[col0] = owner[col1];
            col0 = col1;
            if col0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![0; n];
    for col in 1..=n {
        assignment[owner[col] - 1] = col - 1;
    }
    assignment
}

/// EMD together with the optimal matching: `matching[i]` is the point of `b`
/// paired with `a[i]`.
pub fn emd_matching(a: &PointCloud, b: &PointCloud) -> Result<(f64, Vec<usize>)> {
    if a.len() != b.len() {
        return Err(invalid_arg!(
            "EMD needs equal point counts, got {} and {}",
            a.len(),
            b.len()
        ));
    }
    a.require_non_empty("EMD input")?;
    let n = a.len();
    let mut cost = Vec::with_capacity(n * n);
    for p in a.points() {
        for q in b.points() {
            cost.push((p - q).norm_squared());
        }
    }
    let matching = solve_assignment(&cost, n);
    let total: f64 = matching
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[i * n + j])
        .sum();
    Ok((total / n as f64, matching))
}

/// Mean squared distance under the optimal bijection between `a` and `b`.
pub fn emd(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    emd_matching(a, b).map(|(value, _)| value)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(pts: &[[f64; 3]]) -> PointCloud {
        PointCloud::from_xyz(pts).unwrap()
    }

    #[test]
    fn examples() {
        let a = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        assert_eq!(emd(&a, &a).unwrap(), 0.0);
        let swapped = cloud(&[[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]);
        assert_eq!(emd_matching(&a, &swapped).unwrap(), (0.0, vec![1, 0]));
        let a = cloud(&[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        let b = cloud(&[[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        assert_eq!(emd(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn size_mismatch() {
        let a = cloud(&[[0.0, 0.0, 0.0]]);
        let b = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        assert!(emd(&a, &b).is_err());
    }

    #[test]
    fn assignment_textbook_matrix() {
        let cost = [8.0, 4.0, 7.0, 5.0, 2.0, 3.0, 9.0, 4.0, 8.0];
        let a = solve_assignment(&cost, 3);
        let total: f64 = a.iter().enumerate().map(|(i, &j)| cost[i * 3 + j]).sum();
        assert_eq!(total, 15.0);
    }
}

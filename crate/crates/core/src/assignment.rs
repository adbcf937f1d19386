//! Exact linear assignment on dense square `f64` costs (Hungarian method
//! with potentials, O(n³)).

use crate::math::Matrix;
use crate::{Error, Result};

/// Minimum-cost perfect matching. Returns `assign` with `assign[row] = col`.
///
/// Ties resolve towards lower column indices: the augmenting search scans
/// columns in order and only replaces a candidate on strict improvement.
pub fn min_cost_assignment(cost: &Matrix) -> Result<Vec<usize>> {
    if !cost.is_square() {
        return Err(Error::Dimension(format!(
            "assignment needs a square cost, got {}x{}",
            cost.rows(),
            cost.cols()
        )));
    }
    if !cost.is_finite() {
        return Err(Error::NonFinite("assignment cost"));
    }
    let n = cost.rows();
    if n == 0 {
        return Ok(Vec::new());
    }
    // 1-based arrays; column 0 is the virtual root of each search tree
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut matched_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        matched_row[0] = row;
        let mut col0 = 0usize;
        let mut min_slack = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let r0 = matched_row[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0usize;
            for col in 1..=n {
                if used[col] {
                    continue;
                }
                let reduced = cost.get(r0 - 1, col - 1) - u[r0] - v[col];
                if reduced < min_slack[col] {
                    min_slack[col] = reduced;
                    way[col] = col0;
                }
                if min_slack[col] < delta {
                    delta = min_slack[col];
                    col1 = col;
                }
            }
            for col in 0..=n {
                if used[col] {
                    u[matched_row[col]] += delta;
                    v[col] -= delta;
                } else {
                    min_slack[col] -= delta;
                }
            }
            col0 = col1;
            if matched_row[col0] == 0 {
                break;
            }
        }
        loop {
            let prev = way[col0];
            matched_row[col0] = matched_row[prev];
            col0 = prev;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for col in 1..=n {
        assign[matched_row[col] - 1] = col - 1;
    }
    Ok(assign)
}

/// `Σ_i cost[i][assign[i]]`.
pub fn assignment_cost(cost: &Matrix, assign: &[usize]) -> f64 {
    assign.iter().enumerate().map(|(i, &j)| cost.get(i, j)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{gaussian_sample, SeededRng};

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn small_known_instance() {
        let c = Matrix::from_rows(&[[4.0, 3.0, 5.0], [3.0, 5.0, 9.0], [4.0, 1.0, 4.0]]);
        let a = min_cost_assignment(&c).unwrap();
        assert_eq!(a, vec![2, 0, 1]);
        assert_eq!(assignment_cost(&c, &a), 9.0);
    }

    #[test]
    fn uniform_cost_picks_identity() {
        for n in 1..7 {
            let a = min_cost_assignment(&Matrix::zeros(n, n)).unwrap();
            assert_eq!(a, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn matches_enumeration() {
        let mut rng = SeededRng::new(13);
        for n in 1..=7 {
            let perms = permutations(n);
            for _ in 0..20 {
                let c = gaussian_sample(&mut rng, n, n, 1.0).unwrap();
                let a = min_cost_assignment(&c).unwrap();
                let best = perms.iter().map(|p| assignment_cost(&c, p)).fold(f64::INFINITY, f64::min);
                assert!((assignment_cost(&c, &a) - best).abs() < 1e-12);
                let mut seen = a.clone();
                seen.sort_unstable();
                assert_eq!(seen, (0..n).collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn rejects_non_square() {
        assert!(min_cost_assignment(&Matrix::zeros(2, 3)).is_err());
    }
}

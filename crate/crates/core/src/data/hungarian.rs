use crate::error::{ensure, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// `(row, col)` pairs sorted by row.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

/// Minimum-cost one-to-one assignment of `min(n, m)` pairs for a row-major
/// `n × m` cost matrix. Shortest augmenting paths with potentials, O(n²m).
pub fn hungarian_match(cost: &[f64], n: usize, m: usize) -> Result<Assignment> {
    ensure!(cost.len() == n * m, Shape, "cost has {} entries, expected {n}×{m}", cost.len());
    ensure!(cost.iter().all(|c| c.is_finite()), Contract, "cost matrix has non-finite entries");
    if n == 0 || m == 0 {
        return Ok(Assignment { pairs: Vec::new(), total_cost: 0.0 });
    }
    // Work with rows <= cols; transpose otherwise.
    let transposed = n > m;
    let (rows, cols) = if transposed { (m, n) } else { (n, m) };
    let at = |i: usize, j: usize| if transposed { cost[j * m + i] } else { cost[i * m + j] };

    // 1-based arrays; column 0 is the virtual start.
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
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
    let mut pairs: Vec<(usize, usize)> = (1..=cols)
        .filter(|&j| owner[j] != 0)
        .map(|j| if transposed { (j - 1, owner[j] - 1) } else { (owner[j] - 1, j - 1) })
        .collect();
    pairs.sort_unstable();
    let total_cost = pairs.iter().map(|&(i, j)| cost[i * m + j]).sum();
    Ok(Assignment { pairs, total_cost })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_cases() {
        let a = hungarian_match(&[0.0, 1.0, 1.0, 0.0], 2, 2).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.total_cost, 0.0);
        let a = hungarian_match(&[4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0], 3, 3).unwrap();
        assert_eq!(a.pairs, vec![(0, 1), (1, 0), (2, 2)]);
        assert_eq!(a.total_cost, 5.0);
    }

    #[test]
    fn empty_and_rectangular() {
        let a = hungarian_match(&[], 0, 3).unwrap();
        assert!(a.pairs.is_empty());
        assert_eq!(a.total_cost, 0.0);
        // 3 rows, 2 cols: the cheapest two rows are used.
        let a = hungarian_match(&[5.0, 5.0, 1.0, 9.0, 9.0, 1.0], 3, 2).unwrap();
        assert_eq!(a.pairs, vec![(1, 0), (2, 1)]);
        assert_eq!(a.total_cost, 2.0);
        let a = hungarian_match(&[5.0, 1.0, 9.0, 9.0, 9.0, 1.0], 2, 3).unwrap();
        assert_eq!(a.pairs, vec![(0, 1), (1, 2)]);
    }

    #[test]
    fn shape_mismatch() {
        assert!(hungarian_match(&[1.0, 2.0], 2, 2).is_err());
    }
}

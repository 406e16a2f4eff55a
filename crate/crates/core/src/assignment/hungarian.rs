use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// One-to-one assignment of rows (queries) to columns (ground truths).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(row, column)` pairs sorted by row.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

impl MatchResult {
    pub fn rows(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.0).collect()
    }

    pub fn cols(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.1).collect()
    }
}

/// Minimum-cost assignment of an `[N, M]` cost matrix; `min(N, M)` pairs.
///
/// Shortest augmenting paths with row/column potentials, `O(n² m)`. Ties
/// resolve towards lower column indices during each scan, so the result is
/// deterministic.
pub fn hungarian_match(cost: &Tensor) -> Result<MatchResult> {
    let (n, m) = match cost.shape() {
        [n, m] => (*n, *m),
        s => {
            return Err(Error::shape(
                "hungarian_match",
                format!("expected a matrix, got {:?}", s),
            ))
        }
    };
    if !cost.is_finite() {
        return Err(Error::InvalidArgument("cost matrix has non-finite entries".into()));
    }
    if n == 0 || m == 0 {
        return Ok(MatchResult {
            pairs: vec![],
            total_cost: 0.0,
        });
    }
    let data = cost.data();
    let mut pairs = if n <= m {
        solve(n, m, |i, j| data[i * m + j])
    } else {
        solve(m, n, |i, j| data[j * m + i])
            .into_iter()
            .map(|(c, r)| (r, c))
            .collect()
    };
    pairs.sort_unstable();
    let total_cost = pairs.iter().map(|&(i, j)| data[i * m + j]).sum();
    Ok(MatchResult { pairs, total_cost })
}

/// `n <= m`; returns `(row, col)` for every row.
fn solve(n: usize, m: usize, a: impl Fn(usize, usize) -> f64) -> Vec<(usize, usize)> {
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    // p[j]: row (1-based) assigned to column j; column 0 is the virtual root
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (1..=m).filter(|&j| p[j] != 0).map(|j| (p[j] - 1, j - 1)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    /// Exhaustive minimum over injective maps from the smaller side.
    fn brute_force(c: &Tensor) -> f64 {
        let (n, m) = (c.shape()[0], c.shape()[1]);
        let at = |i: usize, j: usize| {
            if n <= m {
                c.data()[i * m + j]
            } else {
                c.data()[j * m + i]
            }
        };
        let (small, large) = (n.min(m), n.max(m));
        fn rec(
            k: usize,
            small: usize,
            large: usize,
            used: &mut Vec<bool>,
            acc: f64,
            at: &dyn Fn(usize, usize) -> f64,
        ) -> f64 {
            if k == small {
                return acc;
            }
            let mut best = f64::INFINITY;
            for j in 0..large {
                if !used[j] {
                    used[j] = true;
                    best = best.min(rec(k + 1, small, large, used, acc + at(k, j), at));
                    used[j] = false;
                }
            }
            best
        }
        rec(0, small, large, &mut vec![false; large], 0.0, &at)
    }

    #[test]
    fn examples() {
        let r = hungarian_match(&mat(&[&[1.0, 2.0], &[2.0, 1.0]])).unwrap();
        assert_eq!(r.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(r.total_cost, 2.0);
        assert_eq!(hungarian_match(&mat(&[&[5.0]])).unwrap().pairs, vec![(0, 0)]);
    }

    #[test]
    fn rectangular_and_empty() {
        let r = hungarian_match(&mat(&[&[4.0, 1.0, 3.0], &[2.0, 0.0, 5.0]])).unwrap();
        assert_eq!(r.pairs, vec![(0, 1), (1, 0)]);
        let tall = hungarian_match(&mat(&[&[4.0], &[1.0], &[3.0]])).unwrap();
        assert_eq!(tall.pairs, vec![(1, 0)]);
        assert!(hungarian_match(&Tensor::zeros(&[3, 0])).unwrap().pairs.is_empty());
    }

    #[test]
    fn non_finite_rejected() {
        assert!(hungarian_match(&mat(&[&[1.0, f64::NAN]])).is_err());
    }

    #[test]
    fn ties_are_deterministic() {
        let c = Tensor::full(&[3, 3], 1.0);
        assert_eq!(hungarian_match(&c).unwrap().pairs, hungarian_match(&c).unwrap().pairs);
    }

    proptest! {
        #[test]
        fn optimal_and_one_to_one(n in 1usize..6, m in 1usize..6, seed in any::<u64>(), scale in 0.1..10.0f64) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let c = Tensor::from_fn(&[n, m], |_| rng.random_range(0.0..1.0));
            let r = hungarian_match(&c).unwrap();
            prop_assert_eq!(r.pairs.len(), n.min(m));
            let mut rows = r.rows();
            let mut cols = r.cols();
            rows.dedup();
            cols.sort_unstable();
            cols.dedup();
            prop_assert_eq!(rows.len(), n.min(m));
            prop_assert_eq!(cols.len(), n.min(m));
            prop_assert!((r.total_cost - brute_force(&c)).abs() <= 1e-12);
            let scaled = hungarian_match(&c.map(|v| v * scale)).unwrap();
            prop_assert_eq!(scaled.pairs, r.pairs);
        }
    }
}

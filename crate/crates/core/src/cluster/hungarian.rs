//! Minimum-cost assignment (Hungarian algorithm with potentials).

use std::ops::{Add, Sub};

use crate::error::{Error, Result};

/// Cost type for [`hungarian`]: exact integers or floats.
pub trait Cost: Copy + PartialOrd + Add<Output = Self> + Sub<Output = Self> + std::fmt::Debug {
    fn zero() -> Self;
    /// Larger than any reachable total.
    fn infinity() -> Self;
    fn is_finite_cost(self) -> bool;
    /// Equality up to rounding, used to recognize ties between optima.
    fn same_total(a: Self, b: Self) -> bool;
}

macro_rules! int_cost {
    ($($t:ty),*) => {$(
        impl Cost for $t {
            fn zero() -> Self { 0 }
            fn infinity() -> Self { <$t>::MAX / 4 }
            fn is_finite_cost(self) -> bool { true }
            fn same_total(a: Self, b: Self) -> bool { a == b }
        }
    )*};
}
int_cost!(i32, i64);

macro_rules! float_cost {
    ($($t:ty),*) => {$(
        impl Cost for $t {
            fn zero() -> Self { 0.0 }
            fn infinity() -> Self { <$t>::INFINITY }
            fn is_finite_cost(self) -> bool { self.is_finite() }
            fn same_total(a: Self, b: Self) -> bool {
                (a - b).abs() <= 64.0 * <$t>::EPSILON * (1.0 + a.abs().max(b.abs()))
            }
        }
    )*};
}
float_cost!(f32, f64);

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment<C> {
    /// `(row, col)` pairs sorted by row; `min(n, m)` of them.
    pub pairs: Vec<(usize, usize)>,
    pub total: C,
}

/// Optimal total for rows × cols with `rows.len() <= cols.len()`, plus the
/// column picked by each row.
fn solve_wide<C: Cost>(cost: &[Vec<C>], rows: &[usize], cols: &[usize]) -> (C, Vec<usize>) {
    let n = rows.len();
    let m = cols.len();
    if n == 0 {
        return (C::zero(), Vec::new());
    }
    let inf = C::infinity();
    let at = |i: usize, j: usize| cost[rows[i - 1]][cols[j - 1]];
    // 1-indexed potentials; p[j] is the row matched to column j.
    let mut u = vec![C::zero(); n + 1];
    let mut v = vec![C::zero(); m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = at(i0, j) - u[i0] - v[j];
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
                    u[p[j]] = u[p[j]] + delta;
                    v[j] = v[j] - delta;
                } else {
                    minv[j] = minv[j] - delta;
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
    let mut pick = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            pick[p[j] - 1] = j - 1;
        }
    }
    let total = (0..n).fold(C::zero(), |acc, i| acc + cost[rows[i]][cols[pick[i]]]);
    (total, pick)
}

/// Optimal total over the given row and column subsets, matching
/// `min(|rows|, |cols|)` pairs.
fn optimum<C: Cost>(cost: &[Vec<C>], rows: &[usize], cols: &[usize]) -> C {
    if rows.len() <= cols.len() {
        solve_wide(cost, rows, cols).0
    } else {
        let t: Vec<Vec<C>> = (0..cost[0].len()).map(|j| cost.iter().map(|r| r[j]).collect()).collect();
        solve_wide(&t, cols, rows).0
    }
}

/// Minimum-cost one-to-one assignment of `min(n, m)` pairs.
///
/// Among optimal assignments the one whose per-row choice vector is
/// lexicographically smallest is returned, reading an unmatched row as
/// larger than every column.
pub fn hungarian<C: Cost>(cost: &[Vec<C>]) -> Result<Assignment<C>> {
    let n = cost.len();
    let m = cost.first().map_or(0, Vec::len);
    if n == 0 || m == 0 {
        return Err(Error::invalid("hungarian: empty cost matrix"));
    }
    if cost.iter().any(|r| r.len() != m) {
        return Err(Error::shape("hungarian", "ragged cost matrix"));
    }
    if cost.iter().flatten().any(|c| !c.is_finite_cost()) {
        return Err(Error::NonFinite("hungarian cost"));
    }
    let all_rows: Vec<usize> = (0..n).collect();
    let all_cols: Vec<usize> = (0..m).collect();
    let best = optimum(cost, &all_rows, &all_cols);

    // Fix rows one at a time to the smallest choice that still admits an
    // optimal completion.
    let mut fixed = C::zero();
    let mut free_cols = all_cols;
    let mut pairs = Vec::with_capacity(n.min(m));
    for i in 0..n {
        let rest: Vec<usize> = (i + 1..n).collect();
        let mut chosen = None;
        for (slot, &c) in free_cols.iter().enumerate() {
            let cols: Vec<usize> = free_cols.iter().copied().filter(|&x| x != c).collect();
            // Remaining rows must still fill min(n, m) pairs in total.
            if pairs.len() + 1 + rest.len().min(cols.len()) != n.min(m) {
                continue;
            }
            let total = fixed + cost[i][c] + optimum_or_zero(cost, &rest, &cols);
            if C::same_total(total, best) {
                chosen = Some(slot);
                break;
            }
        }
        // No slot means leaving this row unmatched is the only optimal option.
        if let Some(slot) = chosen {
            let c = free_cols.remove(slot);
            fixed = fixed + cost[i][c];
            pairs.push((i, c));
        }
    }
    debug_assert_eq!(pairs.len(), n.min(m));
    Ok(Assignment { pairs, total: fixed })
}

fn optimum_or_zero<C: Cost>(cost: &[Vec<C>], rows: &[usize], cols: &[usize]) -> C {
    if rows.is_empty() || cols.is_empty() {
        C::zero()
    } else {
        optimum(cost, rows, cols)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Minimum over all injective maps from the smaller side, by recursion.
    fn brute_force(cost: &[Vec<i64>]) -> i64 {
        fn go(cost: &[Vec<i64>], row: usize, used: &mut Vec<bool>, skips: usize) -> i64 {
            if row == cost.len() {
                return 0;
            }
            let mut best = i64::MAX;
            if skips > 0 {
                best = go(cost, row + 1, used, skips - 1);
            }
            for c in 0..used.len() {
                if !used[c] {
                    used[c] = true;
                    let rest = go(cost, row + 1, used, skips);
                    used[c] = false;
                    if rest != i64::MAX {
                        best = best.min(cost[row][c] + rest);
                    }
                }
            }
            best
        }
        let (n, m) = (cost.len(), cost[0].len());
        go(cost, 0, &mut vec![false; m], n.saturating_sub(m))
    }

    #[test]
    fn two_by_two_examples() {
        let a = hungarian(&[vec![1i64, 2], vec![2, 1]]).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.total, 2);
        let b = hungarian(&[vec![4i64, 1], vec![1, 4]]).unwrap();
        assert_eq!(b.pairs, vec![(0, 1), (1, 0)]);
        assert_eq!(b.total, 2);
    }

    #[test]
    fn ties_resolve_to_the_lexicographically_smallest_optimum() {
        let flat = vec![vec![0i64; 3]; 3];
        assert_eq!(hungarian(&flat).unwrap().pairs, vec![(0, 0), (1, 1), (2, 2)]);
        let a = hungarian(&[vec![1i64, 1, 5], vec![1, 1, 5], vec![5, 5, 0]]).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1), (2, 2)]);
        let wide = hungarian(&[vec![2.0f64, 1.0, 1.0]]).unwrap();
        assert_eq!(wide.pairs, vec![(0, 1)]);
        let tall = hungarian(&[vec![3i64], vec![1], vec![1]]).unwrap();
        assert_eq!(tall.pairs, vec![(1, 0)]);
    }

    #[test]
    fn matches_brute_force_on_random_integer_costs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..300 {
            let n = rng.gen_range(1..=6);
            let m = rng.gen_range(1..=6);
            let cost: Vec<Vec<i64>> = (0..n).map(|_| (0..m).map(|_| rng.gen_range(-9..10)).collect()).collect();
            let a = hungarian(&cost).unwrap();
            assert_eq!(a.total, brute_force(&cost), "{cost:?}");
            assert_eq!(a.pairs.len(), n.min(m));
            let sum: i64 = a.pairs.iter().map(|&(i, j)| cost[i][j]).sum();
            assert_eq!(sum, a.total);
        }
    }

    #[test]
    fn never_worse_than_identity_or_random_permutations() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let n = 8;
            let cost: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
            let a = hungarian(&cost).unwrap();
            let identity: f64 = (0..n).map(|i| cost[i][i]).sum();
            assert!(a.total <= identity + 1e-12);
            let mut perm: Vec<usize> = (0..n).collect();
            for _ in 0..100 {
                perm.shuffle(&mut rng);
                let t: f64 = (0..n).map(|i| cost[i][perm[i]]).sum();
                assert!(a.total <= t + 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(hungarian::<i64>(&[]).is_err());
        assert!(hungarian::<i64>(&[vec![]]).is_err());
        assert!(hungarian(&[vec![1i64, 2], vec![3]]).is_err());
        assert!(hungarian(&[vec![f64::NAN]]).is_err());
    }
}

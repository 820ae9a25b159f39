//! Exhaustive k-nearest-neighbor search with a temporal (Theiler) exclusion.
//!
//! Neighbors are ordered by squared Euclidean distance, ties by lower row
//! index. A candidate is excluded when it is the query itself or lies within
//! `theiler` timesteps of the query on the same trajectory.

use super::{NumericsError, Tensor};
use rayon::prelude::*;

/// Time stamp and trajectory id per row, for the Theiler exclusion.
#[derive(Clone, Copy, Debug)]
pub struct TimeIndex<'a> {
    pub times: &'a [usize],
    pub groups: &'a [usize],
}

/// Row index doubles as the time index; all rows share one trajectory.
pub fn knn(
    points: &Tensor,
    queries: &[usize],
    k: usize,
    theiler: usize,
) -> Result<Vec<Vec<usize>>, NumericsError> {
    knn_with_index(points, queries, k, theiler, None)
}

pub fn knn_with_index(
    points: &Tensor,
    queries: &[usize],
    k: usize,
    theiler: usize,
    index: Option<TimeIndex<'_>>,
) -> Result<Vec<Vec<usize>>, NumericsError> {
    let n = points.rows();
    if k == 0 || k + 2 * theiler >= n {
        return Err(NumericsError::KnnInfeasible {
            k,
            detail: format!("need k < n - 2*theiler (n={n}, theiler={theiler})"),
        });
    }
    if let Some(ix) = index {
        if ix.times.len() != n || ix.groups.len() != n {
            return Err(NumericsError::ShapeMismatch {
                op: "knn",
                detail: "time index length differs from point count".into(),
            });
        }
    }
    if let Some(&q) = queries.iter().find(|&&q| q >= n) {
        return Err(NumericsError::Invalid(format!("query {q} out of range for {n} points")));
    }
    let excluded = |q: usize, j: usize| -> bool {
        if q == j {
            return true;
        }
        match index {
            Some(ix) => ix.groups[q] == ix.groups[j] && ix.times[q].abs_diff(ix.times[j]) <= theiler,
            None => q.abs_diff(j) <= theiler,
        }
    };
    let d = points.cols();
    queries
        .par_iter()
        .map(|&q| {
            let qr = points.row(q);
            let mut cand: Vec<(f64, usize)> = (0..n)
                .filter(|&j| !excluded(q, j))
                .map(|j| {
                    let pr = points.row(j);
                    let mut s = 0.0;
                    for c in 0..d {
                        let diff = qr[c] - pr[c];
                        s += diff * diff;
                    }
                    (s, j)
                })
                .collect();
            if cand.len() < k {
                return Err(NumericsError::KnnInfeasible {
                    k,
                    detail: format!("query {q} has only {} candidates", cand.len()),
                });
            }
            let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if cand.len() > k {
                cand.select_nth_unstable_by(k - 1, cmp);
                cand.truncate(k);
            }
            cand.sort_by(cmp);
            Ok(cand.into_iter().map(|(_, j)| j).collect())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn brute_force(points: &Tensor, q: usize, k: usize, theiler: usize) -> Vec<usize> {
        let mut all: Vec<(f64, usize)> = (0..points.rows())
            .filter(|&j| j != q && q.abs_diff(j) > theiler)
            .map(|j| {
                let d: f64 = points
                    .row(q)
                    .iter()
                    .zip(points.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                (d, j)
            })
            .collect();
        all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        all.into_iter().take(k).map(|(_, j)| j).collect()
    }

    #[test]
    fn colinear_points() {
        let pts = Tensor::column(vec![0.0, 1.0, 2.0, 3.0]);
        let res = knn(&pts, &[0], 2, 0).unwrap();
        assert_eq!(res[0], vec![1, 2]);
    }

    #[test]
    fn ties_break_by_lower_index() {
        let pts = Tensor::column(vec![0.0, 1.0, -1.0, 1.0]);
        assert_eq!(knn(&pts, &[0], 3, 0).unwrap()[0], vec![1, 2, 3]);
    }

    #[test]
    fn infeasible_k() {
        let pts = Tensor::column(vec![0.0; 10]);
        assert!(matches!(knn(&pts, &[0], 6, 2), Err(NumericsError::KnnInfeasible { .. })));
    }

    #[test]
    fn grouped_exclusion_only_within_a_trajectory() {
        let pts = Tensor::column(vec![0.0, 0.1, 0.2, 5.0, 0.05, 0.15]);
        let times = [0, 1, 2, 3, 0, 1];
        let groups = [0, 0, 0, 0, 1, 1];
        let ix = TimeIndex { times: &times, groups: &groups };
        let res = knn_with_index(&pts, &[0], 2, 1, Some(ix)).unwrap();
        assert_eq!(res[0], vec![4, 5]);
    }

    #[test]
    fn random_cloud_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let data: Vec<f64> = (0..500 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pts = Tensor::matrix(500, 3, data);
        let queries: Vec<usize> = (0..500).collect();
        let res = knn(&pts, &queries, 10, 3).unwrap();
        for &q in &queries {
            assert_eq!(res[q], brute_force(&pts, q, 10, 3));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn theiler_window_is_respected(seed in 0u64..1000, theiler in 0usize..15, k in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 120;
            let data: Vec<f64> = (0..n * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let pts = Tensor::matrix(n, 2, data);
            let queries: Vec<usize> = (0..n).step_by(7).collect();
            let res = knn(&pts, &queries, k, theiler).unwrap();
            for (q, nb) in queries.iter().zip(&res) {
                prop_assert_eq!(nb.len(), k);
                prop_assert!(nb.iter().all(|&j| q.abs_diff(j) > theiler));
                let set: BTreeSet<_> = nb.iter().collect();
                prop_assert_eq!(set.len(), k);
                prop_assert_eq!(nb, &brute_force(&pts, *q, k, theiler));
            }
        }
    }
}

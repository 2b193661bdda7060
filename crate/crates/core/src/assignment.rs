//! Optimal bipartite assignment (Hungarian method, O(n^3) with
//! potentials) on dense rectangular score matrices.

/// Assignment maximizing the total score. Returns, for each row, the
/// matched column; pairs whose score is not above `min_score` are left
/// unmatched. Ties resolve deterministically toward lower indices.
pub fn max_score_assignment(scores: &[Vec<f64>], min_score: f64) -> Vec<Option<usize>> {
    let rows = scores.len();
    let cols = scores.first().map_or(0, |r| r.len());
    if rows == 0 || cols == 0 {
        return vec![None; rows];
    }
    let n = rows.max(cols);
    let valid = |i: usize, j: usize| i < rows && j < cols && scores[i][j] > min_score;
    let top = (0..rows)
        .flat_map(|i| (0..cols).map(move |j| (i, j)))
        .filter(|&(i, j)| valid(i, j))
        .map(|(i, j)| scores[i][j])
        .fold(0.0f64, f64::max);
    let cost = |i: usize, j: usize| if valid(i, j) { top - scores[i][j] } else { top };

    // 1-based potentials formulation: p[j] is the row matched to column j.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
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
    let mut out = vec![None; rows];
    for j in 1..=n {
        let i = p[j];
        if i >= 1 && valid(i - 1, j - 1) {
            out[i - 1] = Some(j - 1);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn total(scores: &[Vec<f64>], a: &[Option<usize>]) -> f64 {
        a.iter().enumerate().filter_map(|(i, j)| j.map(|j| scores[i][j])).sum()
    }

    fn brute(scores: &[Vec<f64>], min: f64) -> f64 {
        fn rec(s: &[Vec<f64>], i: usize, used: &mut Vec<bool>, min: f64) -> f64 {
            if i == s.len() {
                return 0.0;
            }
            let mut best = rec(s, i + 1, used, min);
            for j in 0..s[i].len() {
                if !used[j] && s[i][j] > min {
                    used[j] = true;
                    best = best.max(s[i][j] + rec(s, i + 1, used, min));
                    used[j] = false;
                }
            }
            best
        }
        let cols = scores.first().map_or(0, |r| r.len());
        rec(scores, 0, &mut vec![false; cols], min)
    }

    #[test]
    fn picks_global_optimum_over_greedy() {
        let s = vec![vec![0.9, 0.8], vec![0.85, 0.1]];
        assert_eq!(max_score_assignment(&s, 0.0), vec![Some(1), Some(0)]);
    }

    #[test]
    fn threshold_and_rectangular() {
        let s = vec![vec![0.3, 0.6, 0.0]];
        assert_eq!(max_score_assignment(&s, 0.5), vec![Some(1)]);
        let s = vec![vec![0.5], vec![0.7], vec![0.2]];
        assert_eq!(max_score_assignment(&s, 0.5), vec![None, Some(0), None]);
        assert_eq!(max_score_assignment(&[], 0.5), Vec::<Option<usize>>::new());
    }

    proptest! {
        #[test]
        fn matches_brute_force(rows in 1usize..5, cols in 1usize..5, vals in proptest::collection::vec(0.0f64..1.0, 25)) {
            let s: Vec<Vec<f64>> = (0..rows).map(|i| (0..cols).map(|j| vals[i * 5 + j]).collect()).collect();
            let a = max_score_assignment(&s, 0.3);
            let mut seen = std::collections::HashSet::new();
            for j in a.iter().flatten() {
                prop_assert!(seen.insert(*j));
            }
            prop_assert!((total(&s, &a) - brute(&s, 0.3)).abs() < 1e-9);
        }
    }
}

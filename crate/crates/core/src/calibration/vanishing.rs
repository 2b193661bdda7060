use std::collections::BTreeMap;

use nalgebra::{Matrix2, SymmetricEigen, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{CalibrationError, PedestrianObservation};
use crate::geometry::{intersect, line_through, HomogLine, ImagePoint};

/// Pairs of poles meeting at a smaller angle than this (sine) are skipped.
const MIN_PAIR_SINE: f64 = 1e-3;
/// Same-track pairs whose feet moved less than this are skipped.
const MIN_PAIR_TRAVEL: f64 = 5.0;

/// Vertical vanishing point as the mean-shift mode of pairwise pole
/// intersections, using every pair.
pub fn vertical_vp(obs: &[PedestrianObservation], bandwidth: f64) -> Result<ImagePoint, CalibrationError> {
    vertical_vp_with(obs, bandwidth, usize::MAX).map(|(p, _)| p)
}

/// As [`vertical_vp`], but with at most `max_candidates` pairs drawn by a
/// fixed-seed subsample. Also returns the candidates.
pub fn vertical_vp_with(
    obs: &[PedestrianObservation],
    bandwidth: f64,
    max_candidates: usize,
) -> Result<(ImagePoint, Vec<ImagePoint>), CalibrationError> {
    if obs.len() < 2 {
        return Err(CalibrationError::InsufficientObservations(format!("{} poles, need 2", obs.len())));
    }
    let lines: Vec<HomogLine> = obs.iter().filter_map(|o| line_through(&o.head, &o.foot).ok()).collect();
    if lines.len() < 2 {
        return Err(CalibrationError::InsufficientObservations("fewer than 2 valid poles".into()));
    }
    let n = lines.len();
    let total = n * (n - 1) / 2;
    let mut candidates = Vec::new();
    let mut push = |i: usize, j: usize| {
        let (a, b) = (&lines[i], &lines[j]);
        if (a.a * b.b - a.b * b.a).abs() < MIN_PAIR_SINE {
            return;
        }
        if let Ok(p) = intersect(a, b) {
            candidates.push(p);
        }
    };
    if total <= max_candidates {
        for i in 0..n {
            for j in i + 1..n {
                push(i, j);
            }
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        for _ in 0..max_candidates {
            let i = rng.random_range(0..n);
            let mut j = rng.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            push(i.min(j), i.max(j));
        }
    }
    if candidates.is_empty() {
        let (mut du, mut dv) = (0.0, 0.0);
        for l in &lines {
            let (a, b) = l.direction();
            // Fold directions into one half-plane before averaging.
            let s = if b < 0.0 || (b == 0.0 && a < 0.0) { -1.0 } else { 1.0 };
            du += s * a;
            dv += s * b;
        }
        let norm = du.hypot(dv).max(f64::MIN_POSITIVE);
        return Err(CalibrationError::AllLinesParallel(du / norm, dv / norm));
    }
    let mode = mean_shift_mode(&candidates, bandwidth);
    Ok((mode, candidates))
}

/// Flat-kernel mean shift started at the candidate with the most
/// neighbours. Candidates are sorted first, so the result does not depend
/// on their order.
pub(crate) fn mean_shift_mode(points: &[ImagePoint], bandwidth: f64) -> ImagePoint {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.u.total_cmp(&b.u).then(a.v.total_cmp(&b.v)));
    let bw2 = bandwidth * bandwidth;
    let d2 = |a: &ImagePoint, b: &ImagePoint| (a.u - b.u).powi(2) + (a.v - b.v).powi(2);

    let mut seed = 0;
    let mut best = 0;
    for (i, p) in pts.iter().enumerate() {
        // Sorted by u, so only a window of candidates can be neighbours.
        let lo = pts.partition_point(|q| q.u < p.u - bandwidth);
        let hi = pts.partition_point(|q| q.u <= p.u + bandwidth);
        let count = pts[lo..hi].iter().filter(|q| d2(p, q) <= bw2).count();
        if count > best {
            best = count;
            seed = i;
        }
    }

    let mut m = pts[seed];
    for _ in 0..500 {
        let lo = pts.partition_point(|q| q.u < m.u - bandwidth);
        let hi = pts.partition_point(|q| q.u <= m.u + bandwidth);
        let (mut su, mut sv, mut k) = (0.0, 0.0, 0usize);
        for q in &pts[lo..hi] {
            if d2(&m, q) <= bw2 {
                su += q.u;
                sv += q.v;
                k += 1;
            }
        }
        if k == 0 {
            break;
        }
        let next = ImagePoint::new(su / k as f64, sv / k as f64);
        let moved = next.dist(&m);
        m = next;
        if moved <= 1e-9 * (1.0 + m.u.abs().max(m.v.abs())) {
            break;
        }
    }
    m
}

/// Polishes a vertical vanishing point by robust weighted least squares over
/// the poles. Each pole's residual is how far its endpoints would have to
/// move (in pixels) for its line to pass through the point, so long poles
/// and poles near the point count for more. Poles beyond three robust
/// standard deviations are dropped; iterates from `init` until the point
/// settles.
pub fn refine_vertical_vp(obs: &[PedestrianObservation], init: &ImagePoint) -> ImagePoint {
    // (unit direction, midpoint, half length)
    let poles: Vec<(Vector2<f64>, Vector2<f64>, f64)> = obs
        .iter()
        .filter_map(|o| {
            let d = Vector2::new(o.head.u - o.foot.u, o.head.v - o.foot.v);
            let len = d.norm();
            (len > 0.0).then(|| {
                let mid = Vector2::new(0.5 * (o.head.u + o.foot.u), 0.5 * (o.head.v + o.foot.v));
                (d / len, mid, 0.5 * len)
            })
        })
        .collect();
    let mut v = Vector2::new(init.u, init.v);
    if poles.len() < 2 {
        return *init;
    }
    // Residual and gradient of one pole at `v`.
    let eval = |v: &Vector2<f64>, (d, m, half): &(Vector2<f64>, Vector2<f64>, f64)| {
        let w = v - m;
        let r = w.norm().max(1e-9);
        let u = w / r;
        let perp = Vector2::new(-d.y, d.x);
        let e = half * perp.dot(&u);
        let j = (perp - u * u.dot(&perp)) * (half / r);
        (e, j)
    };
    let cost = |v: &Vector2<f64>, cutoff: f64| {
        poles.iter().map(|p| eval(v, p).0.powi(2).min(cutoff * cutoff)).sum::<f64>()
    };
    for _ in 0..50 {
        let res: Vec<(f64, Vector2<f64>)> = poles.iter().map(|p| eval(&v, p)).collect();
        let cutoff = {
            let mut r: Vec<f64> = res.iter().map(|(e, _)| e.abs()).collect();
            r.sort_by(f64::total_cmp);
            (3.0 * 1.4826 * r[r.len() / 2]).max(0.1)
        };
        let mut a = Matrix2::zeros();
        let mut b = Vector2::zeros();
        for (e, j) in res.iter().filter(|(e, _)| e.abs() <= cutoff) {
            a += j * j.transpose();
            b -= j * *e;
        }
        let Some(step) = a.try_inverse().map(|inv| inv * b) else { break };
        if !step.iter().all(|x| x.is_finite()) {
            break;
        }
        // Halve the step until the truncated cost does not grow.
        let before = cost(&v, cutoff);
        let mut t = 1.0;
        let mut next = v + step;
        while cost(&next, cutoff) > before && t > 1e-4 {
            t *= 0.5;
            next = v + step * t;
        }
        let moved = (next - v).norm();
        v = next;
        if moved <= 1e-6 * (1.0 + v.x.abs().max(v.y.abs())) {
            break;
        }
    }
    ImagePoint::new(v.x, v.y)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HorizonFit {
    pub line: HomogLine,
    pub candidates: Vec<ImagePoint>,
    pub converged: bool,
    pub iterations: usize,
    /// Mean absolute point-line distance at the returned line.
    pub mean_abs_residual: f64,
}

/// Horizon from same-person head-head / foot-foot intersections, fitted
/// with an L1 (Laplace) line regression. `keep` filters candidates.
pub fn horizon_line(
    obs: &[PedestrianObservation],
    epsilon: f64,
    max_iterations: usize,
    keep: impl Fn(&ImagePoint) -> bool,
) -> Result<HorizonFit, CalibrationError> {
    let mut tracks: BTreeMap<u64, Vec<&PedestrianObservation>> = BTreeMap::new();
    for o in obs {
        tracks.entry(o.track_id).or_default().push(o);
    }
    let mut candidates = Vec::new();
    for list in tracks.values_mut() {
        list.sort_by_key(|o| o.frame_id);
        let n = list.len();
        let mut offsets: Vec<usize> = [2, 3, 4].iter().map(|d| n / d).filter(|&o| o > 0).collect();
        offsets.dedup();
        for &off in &offsets {
            for i in 0..n - off {
                let (a, b) = (list[i], list[i + off]);
                if a.foot.dist(&b.foot) < MIN_PAIR_TRAVEL {
                    continue;
                }
                let (Ok(hh), Ok(ff)) = (line_through(&a.head, &b.head), line_through(&a.foot, &b.foot)) else {
                    continue;
                };
                if let Ok(p) = intersect(&hh, &ff) {
                    if keep(&p) {
                        candidates.push(p);
                    }
                }
            }
        }
    }
    if candidates.len() < 3 {
        return Err(CalibrationError::InsufficientObservations(format!(
            "{} horizon candidates, need 3",
            candidates.len()
        )));
    }
    let (line, converged, iterations) = fit_line_l1(&candidates, epsilon, max_iterations)?;
    let mean_abs_residual = candidates.iter().map(|p| line.distance(p)).sum::<f64>() / candidates.len() as f64;
    Ok(HorizonFit { line, candidates, converged, iterations, mean_abs_residual })
}

/// Weighted total-least-squares line.
fn weighted_tls(points: &[ImagePoint], weights: &[f64]) -> Result<HomogLine, CalibrationError> {
    let wsum: f64 = weights.iter().sum();
    let c = points.iter().zip(weights).fold(Vector2::zeros(), |acc, (p, w)| acc + Vector2::new(p.u, p.v) * *w) / wsum;
    let mut s = Matrix2::zeros();
    for (p, w) in points.iter().zip(weights) {
        let d = Vector2::new(p.u, p.v) - c;
        s += d * d.transpose() * *w;
    }
    let eig = SymmetricEigen::new(s);
    let k = if eig.eigenvalues[0] <= eig.eigenvalues[1] { 0 } else { 1 };
    let n = eig.eigenvectors.column(k);
    Ok(HomogLine::new(n[0], n[1], -(n[0] * c.x + n[1] * c.y))?)
}

/// Ordinary (L2) orthogonal line fit.
pub fn fit_line_ls(points: &[ImagePoint]) -> Result<HomogLine, CalibrationError> {
    weighted_tls(points, &vec![1.0; points.len()])
}

/// Line minimizing the sum of absolute orthogonal distances, by IRLS with
/// weights `1 / max(|r|, epsilon)`. Stops when the objective changes by
/// less than 1e-9 (relative to max(1, objective)); returns the best iterate
/// and whether it converged.
pub fn fit_line_l1(
    points: &[ImagePoint],
    epsilon: f64,
    max_iterations: usize,
) -> Result<(HomogLine, bool, usize), CalibrationError> {
    let objective = |l: &HomogLine| points.iter().map(|p| l.distance(p)).sum::<f64>();
    let mut line = fit_line_ls(points)?;
    let mut obj = objective(&line);
    let mut best = (line, obj);
    for it in 1..=max_iterations {
        let w: Vec<f64> = points.iter().map(|p| 1.0 / line.distance(p).max(epsilon)).collect();
        line = weighted_tls(points, &w)?;
        let next = objective(&line);
        if next < best.1 {
            best = (line, next);
        }
        if (obj - next).abs() <= 1e-9 * obj.max(1.0) {
            return Ok((best.0, true, it));
        }
        obj = next;
    }
    Ok((best.0, false, max_iterations))
}

#[cfg(test)]
mod tests {
    use super::super::testutil::{camera, scene};
    use super::*;
    use crate::geometry::{CameraModel, Point3};
    use nalgebra::Vector3;

    fn pole(cam: &CameraModel, x: f64, y: f64, h: f64, track: u64) -> PedestrianObservation {
        let foot = cam.project(&Point3::new(x, y, 0.0)).unwrap().0;
        let head = cam.project(&Point3::new(x, y, h)).unwrap().0;
        PedestrianObservation { frame_id: 0, track_id: track, head, foot }
    }

    fn true_vy(cam: &CameraModel) -> ImagePoint {
        cam.vanishing_point(&Vector3::z()).unwrap()
    }

    #[test]
    fn noiseless_poles_give_exact_vertical_vp() {
        let cam = camera(959.5, 539.5);
        let obs: Vec<_> = (0..10).map(|k| pole(&cam, -6.0 + 1.5 * k as f64, 2.0 + (k % 4) as f64 * 3.0, 1.7, k)).collect();
        let v = vertical_vp(&obs, 44.0).unwrap();
        assert!(v.dist(&true_vy(&cam)) < 0.5, "{v:?} vs {:?}", true_vy(&cam));
    }

    #[test]
    fn two_poles_return_their_intersection() {
        let cam = camera(959.5, 539.5);
        let obs = [pole(&cam, -3.0, 5.0, 1.7, 0), pole(&cam, 4.0, 9.0, 1.8, 1)];
        let expect = intersect(&line_through(&obs[0].head, &obs[0].foot).unwrap(), &line_through(&obs[1].head, &obs[1].foot).unwrap()).unwrap();
        assert_eq!(vertical_vp(&obs, 44.0).unwrap(), expect);
    }

    #[test]
    fn tilted_outliers_do_not_move_the_mode() {
        let cam = camera(959.5, 539.5);
        let mut obs: Vec<_> = (0..10).map(|k| pole(&cam, -6.0 + 1.5 * k as f64, 2.0 + (k % 4) as f64 * 3.0, 1.7, k)).collect();
        for k in 0..3 {
            // A pole leaning 20 degrees sideways.
            let (x, y) = (-2.0 + 3.0 * k as f64, 6.0);
            let lean = 20f64.to_radians();
            let foot = cam.project(&Point3::new(x, y, 0.0)).unwrap().0;
            let head = cam.project(&Point3::new(x + 1.7 * lean.sin(), y, 1.7 * lean.cos())).unwrap().0;
            obs.push(PedestrianObservation { frame_id: 0, track_id: 100 + k, head, foot });
        }
        let (v, cands) = vertical_vp_with(&obs, 44.0, usize::MAX).unwrap();
        let truth = true_vy(&cam);
        assert!(v.dist(&truth) < 2.0, "{v:?}");
        let n = cands.len() as f64;
        let mean = ImagePoint::new(cands.iter().map(|c| c.u).sum::<f64>() / n, cands.iter().map(|c| c.v).sum::<f64>() / n);
        assert!(mean.dist(&truth) > 20.0);
    }

    #[test]
    fn refinement_keeps_exact_point_and_drops_leaning_poles() {
        let cam = camera(959.5, 539.5);
        let mut obs: Vec<_> = (0..10).map(|k| pole(&cam, -6.0 + 1.5 * k as f64, 2.0 + (k % 4) as f64 * 3.0, 1.7, k)).collect();
        let truth = true_vy(&cam);
        let start = ImagePoint::new(truth.u + 30.0, truth.v - 40.0);
        assert!(refine_vertical_vp(&obs, &start).dist(&truth) < 1e-6);
        for k in 0..3 {
            let (x, y) = (-2.0 + 3.0 * k as f64, 6.0);
            let lean = 20f64.to_radians();
            let foot = cam.project(&Point3::new(x, y, 0.0)).unwrap().0;
            let head = cam.project(&Point3::new(x + 1.7 * lean.sin(), y, 1.7 * lean.cos())).unwrap().0;
            obs.push(PedestrianObservation { frame_id: 0, track_id: 100 + k, head, foot });
        }
        assert!(refine_vertical_vp(&obs, &truth).dist(&truth) < 1e-6);
    }

    #[test]
    fn refinement_beats_the_mode_on_jittered_poles() {
        let cam = camera(959.5, 539.5);
        let truth = true_vy(&cam);
        let (mut mode_err, mut refined_err) = (0.0, 0.0);
        for seed in 0..5 {
            let obs = scene(&cam, 10, 100, &[1.7], 1.0, seed);
            let mode = vertical_vp_with(&obs, 44.0, 4000).unwrap().0;
            mode_err += mode.dist(&truth);
            refined_err += refine_vertical_vp(&obs, &mode).dist(&truth);
        }
        assert!(refined_err < mode_err, "{refined_err} vs {mode_err}");
        assert!(refined_err / 5.0 < 15.0, "{refined_err}");
    }

    #[test]
    fn parallel_poles_report_direction() {
        let mk = |x: f64| PedestrianObservation {
            frame_id: 0,
            track_id: 0,
            head: ImagePoint::new(x, 10.0),
            foot: ImagePoint::new(x, 80.0),
        };
        match vertical_vp(&[mk(0.0), mk(50.0), mk(90.0)], 10.0) {
            Err(CalibrationError::AllLinesParallel(du, dv)) => assert!(du.abs() < 1e-12 && (dv.abs() - 1.0).abs() < 1e-12),
            other => panic!("{other:?}"),
        }
        assert!(matches!(vertical_vp(&[mk(0.0)], 10.0), Err(CalibrationError::InsufficientObservations(_))));
    }

    #[test]
    fn noiseless_horizon_passes_through_candidates() {
        let cam = camera(959.5, 539.5);
        let obs = scene(&cam, 8, 80, &[1.7], 0.0, 3);
        let fit = horizon_line(&obs, 1e-9, 100, |_| true).unwrap();
        let truth = cam.horizon().unwrap();
        for c in &fit.candidates {
            assert!(truth.distance(c) < 1e-6);
            assert!(fit.line.distance(c) < 0.5);
        }
    }

    fn collinear() -> Vec<ImagePoint> {
        (0..12).map(|k| ImagePoint::new(-300.0 + 97.0 * k as f64, 420.0 + 0.05 * (-300.0 + 97.0 * k as f64))).collect()
    }

    #[test]
    fn collinear_points_fit_exactly() {
        let pts = collinear();
        let (l, converged, _) = fit_line_l1(&pts, 1e-9, 100).unwrap();
        assert!(converged);
        for p in &pts {
            assert!(l.distance(p) < 1e-9);
        }
    }

    fn same_line(a: &HomogLine, b: &HomogLine) -> f64 {
        let s = if a.a * b.a + a.b * b.b < 0.0 { -1.0 } else { 1.0 };
        (a.a - s * b.a).abs().max((a.b - s * b.b).abs()).max((a.c - s * b.c).abs())
    }

    #[test]
    fn l1_fit_ignores_far_outlier_where_least_squares_moves() {
        let pts = collinear();
        let (clean, _, _) = fit_line_l1(&pts, 1e-9, 100).unwrap();
        let mut with = pts.clone();
        with.push(ImagePoint::new(200.0, 430.0 + 500.0));
        let (l1, _, _) = fit_line_l1(&with, 1e-9, 100).unwrap();
        assert!(same_line(&clean, &l1) < 1e-6, "{}", same_line(&clean, &l1));
        let ls = fit_line_ls(&with).unwrap();
        assert!(same_line(&clean, &ls) > 1e-3);
    }

    #[test]
    fn duplicated_inlier_leaves_l1_fit_unchanged() {
        let mut pts = collinear();
        pts.push(ImagePoint::new(0.0, 700.0));
        pts.push(ImagePoint::new(400.0, 300.0));
        let (base, _, _) = fit_line_l1(&pts, 1e-9, 100).unwrap();
        let base_ls = fit_line_ls(&pts).unwrap();
        let mut dup = pts.clone();
        dup.push(pts[3]);
        let (l1, _, _) = fit_line_l1(&dup, 1e-9, 100).unwrap();
        assert!(same_line(&base, &l1) < 1e-6);
        assert!(same_line(&base_ls, &fit_line_ls(&dup).unwrap()) > 1e-9);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn mean_shift_is_permutation_invariant(
                pts in prop::collection::vec((-500.0f64..500.0, -500.0f64..500.0), 2..60),
                seed in any::<u64>(),
            ) {
                let pts: Vec<ImagePoint> = pts.into_iter().map(|(u, v)| ImagePoint::new(u, v)).collect();
                let mut shuffled = pts.clone();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                for i in (1..shuffled.len()).rev() {
                    shuffled.swap(i, rng.random_range(0..=i));
                }
                prop_assert_eq!(mean_shift_mode(&pts, 80.0), mean_shift_mode(&shuffled, 80.0));
            }
        }
    }
}

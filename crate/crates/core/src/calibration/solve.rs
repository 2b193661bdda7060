use std::collections::BTreeMap;

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};

use super::{CalibrationError, PedestrianObservation};
use crate::emna::{self, EmnaConfig, EmnaOutcome};
use crate::geometry::{nearest_rotation, CameraModel, GeometryError, HomogLine, ImagePoint, Point3};

fn k_inv(f: f64, p: &ImagePoint) -> Matrix3<f64> {
    Matrix3::new(1.0 / f, 0.0, -p.u / f, 0.0, 1.0 / f, -p.v / f, 0.0, 0.0, 1.0)
}

fn back_project(kinv: &Matrix3<f64>, q: &ImagePoint) -> Vector3<f64> {
    (kinv * Vector3::new(q.u, q.v, 1.0)).normalize()
}

/// Camera-frame image of world up: `v` axis component negative.
fn up_direction(kinv: &Matrix3<f64>, v_y: &ImagePoint) -> Vector3<f64> {
    let d = back_project(kinv, v_y);
    if d.y > 0.0 || (d.y == 0.0 && d.z > 0.0) {
        -d
    } else {
        d
    }
}

/// Points a horizontal axis into the half-space in front of the camera.
fn forward(d: Vector3<f64>) -> Vector3<f64> {
    if d.z < 0.0 || (d.z == 0.0 && d.x < 0.0) {
        -d
    } else {
        d
    }
}

fn camera_at_height(f: f64, p: &ImagePoint, r: Matrix3<f64>, height: f64) -> Result<CameraModel, GeometryError> {
    let t = -(r * Vector3::new(0.0, 0.0, height));
    CameraModel::new(f, f, p.u, p.v, r, t)
}

/// Camera from three orthogonal vanishing points. The focal length is the
/// geometric mean of the three pairwise estimates; rotation columns are the
/// back-projected directions (world x from `v_x`, world z from `v_y`, world
/// y from `v_z`), re-orthonormalized. If the axes come out left-handed the
/// `v_z` axis is flipped. The camera sits at `(0, 0, camera_height)`.
pub fn recover_camera(
    v_y: &ImagePoint,
    v_x: &ImagePoint,
    v_z: &ImagePoint,
    image_size: (usize, usize),
    principal: &ImagePoint,
    camera_height: f64,
) -> Result<CameraModel, CalibrationError> {
    if image_size.0 == 0 || image_size.1 == 0 || !(camera_height > 0.0) {
        return Err(CalibrationError::InvalidConfig("image size and camera height must be positive".into()));
    }
    let f2 = |a: &ImagePoint, b: &ImagePoint| {
        let (au, av) = a.sub(principal);
        let (bu, bv) = b.sub(principal);
        -(au * bu + av * bv)
    };
    let (fxy, fyz, fxz) = (f2(v_x, v_y), f2(v_y, v_z), f2(v_x, v_z));
    if !(fxy > 0.0 && fyz > 0.0 && fxz > 0.0) {
        return Err(CalibrationError::NoRealFocal);
    }
    let f = (fxy * fyz * fxz).powf(1.0 / 6.0);
    let kinv = k_inv(f, principal);
    let up = up_direction(&kinv, v_y);
    let dx = forward(back_project(&kinv, v_x));
    let mut dy = forward(back_project(&kinv, v_z));
    if Matrix3::from_columns(&[dx, dy, up]).determinant() < 0.0 {
        dy = -dy;
    }
    let r = nearest_rotation(&Matrix3::from_columns(&[dx, dy, up]));
    Ok(camera_at_height(f, principal, r, camera_height)?)
}

/// Same scene with the world scaled by `k` about the origin.
pub(crate) fn rescale_camera(cam: &CameraModel, k: f64) -> Result<CameraModel, CalibrationError> {
    Ok(CameraModel::new(cam.fx, cam.fy, cam.cx, cam.cy, cam.r, cam.t * k)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeightEstimate {
    /// Per-track median heights after anchoring.
    pub per_track: BTreeMap<u64, f64>,
    /// Factor that maps the camera's own units to meters.
    pub scale: f64,
    /// Population standard deviation of the anchored per-track heights.
    pub std: f64,
    pub skipped: usize,
}

fn observation_height(cam: &CameraModel, center: &Vector3<f64>, o: &PedestrianObservation) -> Option<f64> {
    let g = cam.back_project_ground(&o.foot).ok()?;
    let d = cam.ray_direction(&o.head);
    let dxy = Vector2::new(d.x, d.y);
    let denom = dxy.norm_squared();
    if denom < 1e-12 {
        return None;
    }
    let s = -Vector2::new(center.x - g.x, center.y - g.y).dot(&dxy) / denom;
    if !(s > 0.0) {
        return None;
    }
    Some(center.z + s * d.z)
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn raw_track_heights(cam: &CameraModel, obs: &[PedestrianObservation]) -> (BTreeMap<u64, f64>, usize) {
    let c = cam.center().to_vector();
    let mut per: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    let mut skipped = 0;
    for o in obs {
        match observation_height(cam, &c, o) {
            Some(h) => per.entry(o.track_id).or_default().push(h),
            None => skipped += 1,
        }
    }
    (per.into_iter().map(|(k, mut v)| (k, median(&mut v))).collect(), skipped)
}

/// Per-track heights: for each observation, the height of the point on the
/// head ray closest to the vertical through the foot's ground point; the
/// per-track value is the median over frames. The result is scaled so the
/// mean over tracks equals `assumed_mean`. Observations whose rays miss the
/// ground are skipped and counted.
pub fn estimate_heights(
    camera: &CameraModel,
    obs: &[PedestrianObservation],
    assumed_mean: f64,
) -> Result<HeightEstimate, CalibrationError> {
    let (raw, skipped) = raw_track_heights(camera, obs);
    if raw.is_empty() {
        return Err(CalibrationError::InsufficientObservations("no observation yields a height".into()));
    }
    let mean = raw.values().sum::<f64>() / raw.len() as f64;
    if !(mean > 0.0) || !mean.is_finite() {
        return Err(CalibrationError::Geometry(GeometryError::DegenerateInput("heights are not positive")));
    }
    let scale = assumed_mean / mean;
    let per_track: BTreeMap<u64, f64> = raw.into_iter().map(|(k, h)| (k, h * scale)).collect();
    let n = per_track.len() as f64;
    let m = per_track.values().sum::<f64>() / n;
    let std = (per_track.values().map(|h| (h - m).powi(2)).sum::<f64>() / n).sqrt();
    Ok(HeightEstimate { per_track, scale, std, skipped })
}

/// RMS pixel distance between observed heads and the reprojection of the
/// foot ground point raised by the track's median height. `None` when no
/// observation can be evaluated.
pub fn head_reprojection_rms(camera: &CameraModel, obs: &[PedestrianObservation]) -> Option<f64> {
    let (heights, _) = raw_track_heights(camera, obs);
    let mut sum = 0.0;
    let mut n = 0usize;
    for o in obs {
        let Some(h) = heights.get(&o.track_id) else { continue };
        let Ok(g) = camera.back_project_ground(&o.foot) else { continue };
        let Ok((q, _)) = camera.project(&Point3::new(g.x, g.y, *h)) else { continue };
        sum += q.dist(&o.head).powi(2);
        n += 1;
    }
    (n > 0).then(|| (sum / n as f64).sqrt())
}

/// Point `s` pixels along the horizon from the foot of the principal point.
fn horizon_point(horizon: &HomogLine, principal: &ImagePoint, s: f64) -> ImagePoint {
    let h0 = horizon.foot_of(principal);
    let (eu, ev) = horizon.direction();
    ImagePoint::new(h0.u + s * eu, h0.v + s * ev)
}

/// `v_z` such that the principal point is the orthocenter of the three
/// vanishing points, with `f^2 = -(v_x - p).(v_y - p)`.
fn orthocenter_vz(v_x: &ImagePoint, v_y: &ImagePoint, p: &ImagePoint) -> Option<ImagePoint> {
    let (a, b) = (Vector2::new(v_x.u - p.u, v_x.v - p.v), Vector2::new(v_y.u - p.u, v_y.v - p.v));
    let f2 = -a.dot(&b);
    if !(f2 > 0.0) {
        return None;
    }
    let m = Matrix2::new(a.x, a.y, b.x, b.y);
    let z = m.lu().solve(&Vector2::new(-f2, -f2))?;
    z.iter().all(|x| x.is_finite()).then(|| ImagePoint::new(p.u + z.x, p.v + z.y))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VpRefinement {
    pub v_x: ImagePoint,
    pub v_z: ImagePoint,
    /// Position of `v_x` along the horizon, from the foot of the principal point.
    pub s: f64,
    pub height_std: f64,
    pub outcome: EmnaOutcome,
}

fn stage1_value(
    obs: &[PedestrianObservation],
    v_y: &ImagePoint,
    horizon: &HomogLine,
    principal: &ImagePoint,
    assumed: f64,
    s: f64,
) -> f64 {
    let v_x = horizon_point(horizon, principal, s);
    let Some(v_z) = orthocenter_vz(&v_x, v_y, principal) else { return f64::INFINITY };
    let Ok(cam) = recover_camera(v_y, &v_x, &v_z, (1, 1), principal, 1.0) else { return f64::INFINITY };
    estimate_heights(&cam, obs, assumed).map(|h| h.std).unwrap_or(f64::INFINITY)
}

/// Stage one: one-dimensional EMNA over the position of `v_x` on the
/// horizon, minimizing the spread of recovered heights. `v_z` follows from
/// the orthocenter constraint at the assumed principal point.
///
/// The search starts at the horizon point seen 45 degrees off the optical
/// axis, where `v_x` and `v_z` sit symmetrically about the principal point.
pub fn refine_vps_emna(
    obs: &[PedestrianObservation],
    v_y: &ImagePoint,
    horizon: &HomogLine,
    principal: &ImagePoint,
    assumed_mean: f64,
    cfg: &EmnaConfig,
    restarts: usize,
) -> Result<VpRefinement, CalibrationError> {
    let h0 = horizon.foot_of(principal);
    let d = h0.dist(principal);
    let (au, av) = h0.sub(principal);
    let (bu, bv) = v_y.sub(principal);
    let f2 = -(au * bu + av * bv);
    if !(f2 > 0.0) {
        return Err(CalibrationError::NoRealFocal);
    }
    let s0 = (f2 + d * d).sqrt();
    let out = emna::minimize_with_restarts(
        |x| stage1_value(obs, v_y, horizon, principal, assumed_mean, x[0]),
        &[s0],
        cfg,
        restarts,
    )?;
    if !out.best_value.is_finite() {
        return Err(CalibrationError::NoFeasibleSample);
    }
    let s = out.best[0];
    let v_x = horizon_point(horizon, principal, s);
    let v_z = orthocenter_vz(&v_x, v_y, principal).ok_or(CalibrationError::NoRealFocal)?;
    Ok(VpRefinement { v_x, v_z, s, height_std: out.best_value, outcome: out })
}

/// Camera with focal `f` and principal point `p` whose vertical is the
/// back-projection of `v_y` and whose x axis is the back-projection of
/// `v_x` made orthogonal to it.
fn camera_from_vertical(f: f64, p: &ImagePoint, v_y: &ImagePoint, v_x: &ImagePoint) -> Option<CameraModel> {
    if !(f > 0.0) {
        return None;
    }
    let kinv = k_inv(f, p);
    let up = up_direction(&kinv, v_y);
    let x = back_project(&kinv, v_x);
    let x = x - up * x.dot(&up);
    if x.norm() < 1e-9 {
        return None;
    }
    let x = forward(x.normalize());
    let y = up.cross(&x);
    camera_at_height(f, p, Matrix3::from_columns(&[x, y, up]), 1.0).ok()
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntrinsicsRefinement {
    /// Refined camera, in the initial camera's units until re-anchored.
    pub camera: CameraModel,
    pub v_x: ImagePoint,
    pub reproj_error: f64,
    pub initial_reproj_error: f64,
    pub outcome: EmnaOutcome,
}

/// Stage two: EMNA over `(f, cx, cy, s)` minimizing the head reprojection
/// RMS. The vertical vanishing point stays fixed and `v_x` moves along the
/// fitted horizon.
///
/// Height data only constrain the principal point across the line from
/// `v_y` perpendicular to the horizon; the other direction and `s` (a yaw
/// gauge) are held by weak priors toward `assumed_principal` and the initial
/// `s`, weighted by `prior` per pixel.
#[allow(clippy::too_many_arguments)]
pub fn refine_intrinsics_emna(
    obs: &[PedestrianObservation],
    camera: &CameraModel,
    v_y: &ImagePoint,
    horizon: &HomogLine,
    assumed_principal: &ImagePoint,
    prior: f64,
    cfg: &EmnaConfig,
    restarts: usize,
) -> Result<IntrinsicsRefinement, CalibrationError> {
    let (eu, ev) = horizon.direction();
    let h0 = horizon.foot_of(assumed_principal);
    let init_vx = camera
        .vanishing_point(&Vector3::x())
        .ok_or(CalibrationError::Geometry(GeometryError::DegenerateInput("x axis parallel to the image plane")))?;
    let s_init = (init_vx.u - h0.u) * eu + (init_vx.v - h0.v) * ev;
    let init = [camera.fx, camera.cx, camera.cy, s_init];
    let rms_of = |x: &[f64]| -> Option<(CameraModel, f64)> {
        let p = ImagePoint::new(x[1], x[2]);
        let v_x = ImagePoint::new(h0.u + x[3] * eu, h0.v + x[3] * ev);
        let cam = camera_from_vertical(x[0], &p, v_y, &v_x)?;
        let rms = head_reprojection_rms(&cam, obs)?;
        Some((cam, rms))
    };
    let objective = |x: &[f64]| match rms_of(x) {
        Some((_, rms)) => {
            let dp = (x[1] - assumed_principal.u).hypot(x[2] - assumed_principal.v);
            rms + prior * (dp + 1e-3 * (x[3] - s_init).abs())
        }
        None => f64::INFINITY,
    };
    let initial_reproj_error = head_reprojection_rms(camera, obs).unwrap_or(f64::INFINITY);
    let out = emna::minimize_with_restarts(objective, &init, cfg, restarts)?;
    let (cam, reproj_error) = rms_of(&out.best).ok_or(CalibrationError::NoFeasibleSample)?;
    // Keep the initial camera if the refined one is not better on the data.
    let (cam, reproj_error) = if reproj_error <= initial_reproj_error {
        (cam, reproj_error)
    } else {
        (camera.clone(), initial_reproj_error)
    };
    // Restore the initial scale; `camera_from_vertical` places the camera at height 1.
    let k = camera.center().z;
    let cam = rescale_camera(&cam, k)?;
    let v_x = cam.vanishing_point(&Vector3::x()).unwrap_or(init_vx);
    Ok(IntrinsicsRefinement { camera: cam, v_x, reproj_error, initial_reproj_error, outcome: out })
}

#[cfg(test)]
mod tests {
    use super::super::testutil::{camera, scene};
    use super::*;

    fn vps(cam: &CameraModel) -> (ImagePoint, ImagePoint, ImagePoint) {
        (
            cam.vanishing_point(&Vector3::z()).unwrap(),
            cam.vanishing_point(&Vector3::x()).unwrap(),
            cam.vanishing_point(&Vector3::y()).unwrap(),
        )
    }

    #[test]
    fn recovers_known_camera() {
        let cam = camera(959.5, 539.5);
        let (vy, vx, vz) = vps(&cam);
        let h = cam.center().z;
        let rec = recover_camera(&vy, &vx, &vz, (1920, 1080), &cam.principal_point(), h).unwrap();
        assert!((rec.fx - cam.fx).abs() / cam.fx < 1e-6);
        assert!((rec.r - cam.r).norm() < 1e-6, "{}", (rec.r - cam.r).norm());
        assert!((rec.center().z - h).abs() < 1e-9);
    }

    #[test]
    fn swapping_ground_vps_permutes_columns() {
        let cam = camera(959.5, 539.5);
        let (vy, vx, vz) = vps(&cam);
        let p = cam.principal_point();
        let a = recover_camera(&vy, &vx, &vz, (1920, 1080), &p, 1.0).unwrap();
        let b = recover_camera(&vy, &vz, &vx, (1920, 1080), &p, 1.0).unwrap();
        assert!((a.fx - b.fx).abs() < 1e-9);
        for i in 0..3 {
            assert!((a.r[(i, 0)].abs() - b.r[(i, 1)].abs()).abs() < 1e-9);
            assert!((a.r[(i, 1)].abs() - b.r[(i, 0)].abs()).abs() < 1e-9);
            assert!((a.r[(i, 2)] - b.r[(i, 2)]).abs() < 1e-9);
        }
    }

    #[test]
    fn coincident_ground_vps_have_no_focal() {
        let cam = camera(959.5, 539.5);
        let (vy, vx, _) = vps(&cam);
        let r = recover_camera(&vy, &vx, &vx, (1920, 1080), &cam.principal_point(), 1.0);
        assert_eq!(r, Err(CalibrationError::NoRealFocal));
    }

    #[test]
    fn exact_heights_and_ratios() {
        let cam = camera(959.5, 539.5);
        let obs = scene(&cam, 3, 30, &[1.6, 1.7, 1.8], 0.0, 9);
        let h = estimate_heights(&cam, &obs, 1.7).unwrap();
        assert!((h.per_track[&0] - 1.6).abs() < 1e-6);
        assert!((h.per_track[&1] - 1.7).abs() < 1e-6);
        assert!((h.per_track[&2] - 1.8).abs() < 1e-6);
        assert!((h.scale - 1.0).abs() < 1e-6);

        // A camera at the wrong height only changes the scale.
        let half = rescale_camera(&cam, 0.5).unwrap();
        let h2 = estimate_heights(&half, &obs, 1.7).unwrap();
        assert!((h2.per_track[&0] / h2.per_track[&2] - 1.6 / 1.8).abs() < 1e-6);
        assert!((h2.scale - 2.0).abs() < 1e-6);
    }

    #[test]
    fn foot_above_horizon_is_skipped() {
        let cam = camera(959.5, 539.5);
        let mut obs = scene(&cam, 1, 10, &[1.7], 0.0, 2);
        let hz = cam.horizon().unwrap();
        let on = hz.foot_of(&ImagePoint::new(900.0, 100.0));
        obs.push(PedestrianObservation { frame_id: 99, track_id: 0, head: ImagePoint::new(on.u, on.v - 80.0), foot: on });
        let h = estimate_heights(&cam, &obs, 1.7).unwrap();
        assert_eq!(h.skipped, 1);
        assert!((h.per_track[&0] - 1.7).abs() < 1e-6);
    }

    #[test]
    fn orthocenter_constraint_holds() {
        let cam = camera(959.5, 539.5);
        let (vy, vx, vz) = vps(&cam);
        let z = orthocenter_vz(&vx, &vy, &cam.principal_point()).unwrap();
        assert!(z.dist(&vz) < 1e-6 * vz.u.abs().max(vz.v.abs()));
    }

    #[test]
    fn stage_one_reaches_consistent_heights() {
        let cam = camera(959.5, 539.5);
        let obs = scene(&cam, 8, 60, &[1.7], 0.0, 4);
        let (vy, _, _) = vps(&cam);
        let hz = cam.horizon().unwrap();
        let cfg = EmnaConfig { generations: 20, ..EmnaConfig::new(vec![400.0], 3) };
        let a = refine_vps_emna(&obs, &vy, &hz, &cam.principal_point(), 1.7, &cfg, 0).unwrap();
        assert!(a.height_std < 1e-3, "{}", a.height_std);
        let b = refine_vps_emna(&obs, &vy, &hz, &cam.principal_point(), 1.7, &cfg, 0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn true_vx_is_no_worse_than_shifted_positions() {
        let cam = camera(959.5, 539.5);
        let obs = scene(&cam, 8, 60, &[1.6, 1.7, 1.8], 0.0, 4);
        let (vy, vx, _) = vps(&cam);
        let hz = cam.horizon().unwrap();
        let p = cam.principal_point();
        let h0 = hz.foot_of(&p);
        let (eu, ev) = hz.direction();
        let s_true = (vx.u - h0.u) * eu + (vx.v - h0.v) * ev;
        let at_truth = stage1_value(&obs, &vy, &hz, &p, 1.7, s_true);
        for k in -10..=10 {
            let v = stage1_value(&obs, &vy, &hz, &p, 1.7, s_true + 20.0 * k as f64);
            assert!(at_truth <= v + 1e-9, "{at_truth} > {v} at offset {}", 20 * k);
        }
    }

    #[test]
    fn stage_two_at_truth_stays_put() {
        let cam = camera(959.5, 539.5);
        let obs = scene(&cam, 6, 40, &[1.7], 0.0, 8);
        let (vy, _, _) = vps(&cam);
        let hz = cam.horizon().unwrap();
        let cfg = EmnaConfig { generations: 10, ..EmnaConfig::new(vec![5.0, 2.0, 2.0, 5.0], 1) };
        let r = refine_intrinsics_emna(&obs, &cam, &vy, &hz, &cam.principal_point(), 1e-3, &cfg, 0).unwrap();
        assert!(r.reproj_error < 1e-6, "{}", r.reproj_error);
        assert!((r.camera.fx - cam.fx).abs() < 1e-3 && (r.camera.cx - cam.cx).abs() < 1e-3 && (r.camera.cy - cam.cy).abs() < 1e-3);
    }

    #[test]
    fn objective_ignores_track_labels() {
        let cam = camera(959.5, 539.5);
        let mut obs = scene(&cam, 4, 30, &[1.65, 1.75], 0.5, 8);
        let a = head_reprojection_rms(&cam, &obs).unwrap();
        for o in &mut obs {
            o.track_id = 1000 - o.track_id;
        }
        assert_eq!(a, head_reprojection_rms(&cam, &obs).unwrap());
    }

    #[test]
    fn stage_two_recovers_horizontal_principal_offset() {
        let truth = camera(979.5, 539.5);
        let obs = scene(&truth, 12, 80, &[1.7], 0.0, 21);
        let assumed = ImagePoint::new(959.5, 539.5);
        let (vy, _, _) = vps(&truth);
        let hz = truth.horizon().unwrap();
        let s1 = refine_vps_emna(&obs, &vy, &hz, &assumed, 1.7, &EmnaConfig { generations: 30, ..EmnaConfig::new(vec![400.0], 2) }, 0).unwrap();
        let cam1 = recover_camera(&vy, &s1.v_x, &s1.v_z, (1920, 1080), &assumed, 1.0).unwrap();
        let cam1 = rescale_camera(&cam1, estimate_heights(&cam1, &obs, 1.7).unwrap().scale).unwrap();
        let cfg = EmnaConfig::new(vec![20.0, 10.0, 10.0, 40.0], 5);
        let r = refine_intrinsics_emna(&obs, &cam1, &vy, &hz, &assumed, 1e-3, &cfg, 10).unwrap();
        assert!(r.initial_reproj_error > r.reproj_error, "{} vs {}", r.initial_reproj_error, r.reproj_error);
        assert!((r.camera.cx - truth.cx).abs() < 3.0 && (r.camera.cy - truth.cy).abs() < 3.0, "{} {}", r.camera.cx, r.camera.cy);
    }
}

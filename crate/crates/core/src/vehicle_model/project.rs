use nalgebra::Vector3;

use super::{DeformableModel, Pose, VehicleModelError};
use crate::geometry::{CameraModel, ImagePoint, Point3};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedSegment {
    pub edge: usize,
    pub a: ImagePoint,
    pub b: ImagePoint,
    pub visible: bool,
}

/// Vertices in the world frame.
pub fn posed_vertices(model: &DeformableModel, pose: &Pose) -> Vec<Point3> {
    let lift = model.shape.ground_clearance;
    model.vertices.iter().map(|v| pose.transform(v, lift)).collect()
}

/// Whether each face's outward normal points toward the camera center.
pub fn front_facing(model: &DeformableModel, pose: &Pose, camera: &CameraModel) -> Vec<bool> {
    let world = posed_vertices(model, pose);
    let c = camera.center().to_vector();
    model
        .faces
        .iter()
        .map(|f| {
            let p = world[f.loop_[0]].to_vector();
            let n: Vector3<f64> = pose.rotate(&f.normal);
            (c - p).dot(&n) > 0.0
        })
        .collect()
}

/// Poses the model, projects every edge and flags visibility by back-face
/// culling: a ridge edge is visible when at least one adjacent face faces
/// the camera, a valley edge when all of them do.
pub fn pose_and_project(
    model: &DeformableModel,
    pose: &Pose,
    camera: &CameraModel,
) -> Result<Vec<ProjectedSegment>, VehicleModelError> {
    let world = posed_vertices(model, pose);
    let img: Vec<ImagePoint> = world.iter().map(|p| camera.project(p).map(|r| r.0)).collect::<Result<_, _>>()?;
    let facing = front_facing(model, pose, camera);
    Ok(model
        .edges
        .iter()
        .enumerate()
        .map(|(e, &(i, j))| ProjectedSegment {
            edge: e,
            a: img[i],
            b: img[j],
            visible: if model.edge_concave[e] {
                model.edge_faces[e].iter().all(|&f| facing[f])
            } else {
                model.edge_faces[e].iter().any(|&f| facing[f])
            },
        })
        .collect())
}

/// Axis-aligned box `(left, top, width, height)` around the projected
/// vertices.
pub fn projected_bbox(
    model: &DeformableModel,
    pose: &Pose,
    camera: &CameraModel,
) -> Result<(f64, f64, f64, f64), VehicleModelError> {
    let mut lo = (f64::INFINITY, f64::INFINITY);
    let mut hi = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in posed_vertices(model, pose) {
        let (q, _) = camera.project(&p)?;
        lo = (lo.0.min(q.u), lo.1.min(q.v));
        hi = (hi.0.max(q.u), hi.1.max(q.v));
    }
    Ok((lo.0, lo.1, hi.0 - lo.0, hi.1 - lo.1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vehicle_model::{build_model, VehicleType};
    use nalgebra::{Matrix3, Vector2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn overhead() -> CameraModel {
        CameraModel::look_at(1000.0, 640.0, 360.0, Point3::new(0.0, 0.0, 20.0), Point3::new(0.0, 0.01, 0.0)).unwrap()
    }

    fn oblique() -> CameraModel {
        CameraModel::look_at(1000.0, 640.0, 360.0, Point3::new(-6.0, -14.0, 8.0), Point3::new(0.0, 0.0, 0.0)).unwrap()
    }

    #[test]
    fn overhead_camera_sees_roof_not_bottom() {
        let m = build_model(&VehicleType::Sedan.preset()).unwrap();
        let segs = pose_and_project(&m, &Pose::new(0.0, 0.0, 0.0), &overhead()).unwrap();
        let roof = m.edges.iter().position(|&e| e == (4, 5)).unwrap();
        let roof_connector = m.edges.iter().position(|&e| e == (5, 13)).unwrap();
        let bottom = m.edges.iter().position(|&e| e == (7, 0)).unwrap();
        assert!(segs[roof].visible && segs[roof_connector].visible);
        assert!(!segs[bottom].visible);
    }

    #[test]
    fn full_turn_gives_identical_output() {
        let m = build_model(&VehicleType::Suv.preset()).unwrap();
        let a = pose_and_project(&m, &Pose::new(1.0, 2.0, 0.4), &oblique()).unwrap();
        let b = pose_and_project(&m, &Pose::new(1.0, 2.0, 0.4 + 2.0 * std::f64::consts::PI), &oblique()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.visible, y.visible);
            assert!(x.a.dist(&y.a) < 1e-9 && x.b.dist(&y.b) < 1e-9);
        }
    }

    #[test]
    fn behind_camera_is_an_error() {
        let m = build_model(&VehicleType::Sedan.preset()).unwrap();
        let r = pose_and_project(&m, &Pose::new(-30.0, -60.0, 0.0), &oblique());
        assert!(matches!(r, Err(VehicleModelError::Geometry(_))));
    }

    #[test]
    fn image_rotation_by_half_turn_commutes() {
        let m = build_model(&VehicleType::Van.preset()).unwrap();
        let cam = oblique();
        let flip = Matrix3::from_diagonal(&Vector3::new(-1.0, -1.0, 1.0));
        let rotated = CameraModel::new(cam.fx, cam.fy, cam.cx, cam.cy, flip * cam.r, flip * cam.t).unwrap();
        let pose = Pose::new(0.5, -1.0, 1.1);
        let a = pose_and_project(&m, &pose, &cam).unwrap();
        let b = pose_and_project(&m, &pose, &rotated).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.visible, y.visible);
            assert!((x.a.u + y.a.u - 2.0 * cam.cx).abs() < 1e-9);
            assert!((x.a.v + y.a.v - 2.0 * cam.cy).abs() < 1e-9);
        }
    }

    /// Convex hull of the side profile in (x, z), counter-clockwise.
    fn profile_hull(pts: &[Vector2<f64>]) -> Vec<Vector2<f64>> {
        let mut p = pts.to_vec();
        p.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
        let cross = |o: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>| (a - o).perp(&(b - o));
        let mut hull: Vec<Vector2<f64>> = Vec::new();
        for pass in 0..2 {
            let start = hull.len();
            let iter: Box<dyn Iterator<Item = &Vector2<f64>>> = if pass == 0 { Box::new(p.iter()) } else { Box::new(p.iter().rev()) };
            for q in iter {
                while hull.len() >= start + 2 && cross(&hull[hull.len() - 2], &hull[hull.len() - 1], q) <= 1e-12 {
                    hull.pop();
                }
                hull.push(*q);
            }
            hull.pop();
        }
        hull
    }

    /// Whether the open segment from the camera to `p` passes through the
    /// interior of the convex body `{x : n_k . x <= d_k}`.
    fn occluded(planes: &[(Vector3<f64>, f64)], c: &Vector3<f64>, p: &Vector3<f64>) -> bool {
        let dir = p - c;
        let (mut t0, mut t1) = (0.0f64, 1.0f64 - 1e-7);
        for (n, d) in planes {
            let num = d - n.dot(c);
            let den = n.dot(&dir);
            if den.abs() < 1e-15 {
                if num < 0.0 {
                    return false;
                }
                continue;
            }
            let t = num / den;
            if den > 0.0 {
                t1 = t1.min(t);
            } else {
                t0 = t0.max(t);
            }
        }
        t1 - t0 > 1e-7
    }

    #[test]
    fn visibility_matches_ray_casting_against_hull() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cam = oblique();
        let c = cam.center().to_vector();
        let mut checked = 0;
        for t in VehicleType::ALL {
            let m = build_model(&t.preset()).unwrap();
            let prof: Vec<Vector2<f64>> = (0..8).map(|i| Vector2::new(m.vertices[i].x, m.vertices[i].z)).collect();
            let hull = profile_hull(&prof);
            // A face takes part in the test only if it is a supporting plane
            // of the body; edges touching the concave hood/windshield step
            // are excluded.
            let supporting: Vec<bool> = m
                .faces
                .iter()
                .map(|f| {
                    let p0 = m.vertices[f.loop_[0]].to_vector();
                    m.vertices.iter().all(|v| (v.to_vector() - p0).dot(&f.normal) <= 1e-9)
                })
                .collect();
            for _ in 0..5 {
                let pose = Pose::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.1..3.1));
                let world = posed_vertices(&m, &pose);
                let mut planes: Vec<(Vector3<f64>, f64)> = Vec::new();
                for k in 0..hull.len() {
                    let (a, b) = (hull[k], hull[(k + 1) % hull.len()]);
                    let d = b - a;
                    let n_body = Vector3::new(d.y, 0.0, -d.x).normalize();
                    let n = pose.rotate(&n_body);
                    let p = pose.transform(&Point3::new(a.x, 0.0, a.y), m.shape.ground_clearance).to_vector();
                    planes.push((n, n.dot(&p)));
                }
                for s in [1.0, -1.0] {
                    let n = pose.rotate(&Vector3::new(0.0, s, 0.0));
                    let p = pose.transform(&Point3::new(0.0, s * m.shape.width / 2.0, 0.0), m.shape.ground_clearance).to_vector();
                    planes.push((n, n.dot(&p)));
                }
                let segs = pose_and_project(&m, &pose, &cam).unwrap();
                for (e, &(i, j)) in m.edges.iter().enumerate() {
                    if !m.edge_faces[e].iter().all(|&f| supporting[f]) {
                        continue;
                    }
                    let mid = (world[i].to_vector() + world[j].to_vector()) / 2.0;
                    assert_eq!(segs[e].visible, !occluded(&planes, &c, &mid), "{t:?} edge {e} pose {pose:?}");
                    checked += 1;
                }
            }
        }
        assert!(checked >= 200, "{checked}");
    }
}

use nalgebra::{Matrix2, Vector2};

use crate::geometry::{CameraModel, ImagePoint, Point3};
use crate::image::RgbImage;

/// Ground-plane grid nodes of an `extent` x `extent` meter square centered
/// where the optical axis (or, if it misses the ground, the bottom image
/// row) meets the ground. Only nodes visible in the image are returned.
pub fn ground_grid(camera: &CameraModel, image_size: (usize, usize), extent: f64, step: f64) -> Vec<Point3> {
    let (w, h) = (image_size.0 as f64, image_size.1 as f64);
    let center = camera
        .back_project_ground(&camera.principal_point())
        .or_else(|_| camera.back_project_ground(&ImagePoint::new(w / 2.0, h - 1.0)))
        .unwrap_or(Point3::new(0.0, 0.0, 0.0));
    let n = (extent / step).round() as i64;
    let mut out = Vec::new();
    for i in 0..=n {
        for j in 0..=n {
            let p = Point3::new(center.x - extent / 2.0 + i as f64 * step, center.y - extent / 2.0 + j as f64 * step, 0.0);
            if let Ok((q, _)) = camera.project(&p) {
                if q.u >= 0.0 && q.v >= 0.0 && q.u <= w - 1.0 && q.v <= h - 1.0 {
                    out.push(p);
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridReport {
    pub rms: f64,
    pub points: usize,
}

/// 2D similarity `q ~ s R p + t` by the Umeyama closed form.
fn similarity(src: &[Vector2<f64>], dst: &[Vector2<f64>]) -> (f64, Matrix2<f64>, Vector2<f64>) {
    let n = src.len() as f64;
    let mp = src.iter().sum::<Vector2<f64>>() / n;
    let mq = dst.iter().sum::<Vector2<f64>>() / n;
    let mut cov = Matrix2::zeros();
    let mut var = 0.0;
    for (p, q) in src.iter().zip(dst) {
        cov += (q - mq) * (p - mp).transpose();
        var += (p - mp).norm_squared();
    }
    cov /= n;
    var /= n;
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut sgn = Matrix2::identity();
    if (u * vt).determinant() < 0.0 {
        sgn[(1, 1)] = -1.0;
    }
    let r = u * sgn * vt;
    let s = (svd.singular_values[0] * sgn[(0, 0)] + svd.singular_values[1] * sgn[(1, 1)]) / var;
    (s, r, mq - r * mp * s)
}

/// Reprojection RMS of the ground grid: nodes seen by `truth` are
/// back-projected with `estimate`, aligned to the true grid by a similarity
/// (the calibrated world frame is free up to one), and reprojected with
/// `estimate`.
pub fn ground_grid_rms(truth: &CameraModel, estimate: &CameraModel, image_size: (usize, usize), extent: f64, step: f64) -> GridReport {
    let mut src = Vec::new();
    let mut dst = Vec::new();
    let mut img = Vec::new();
    for p in ground_grid(truth, image_size, extent, step) {
        let Ok((q, _)) = truth.project(&p) else { continue };
        let Ok(g) = estimate.back_project_ground(&q) else { continue };
        src.push(Vector2::new(p.x, p.y));
        dst.push(Vector2::new(g.x, g.y));
        img.push(q);
    }
    if src.len() < 3 {
        return GridReport { rms: f64::INFINITY, points: src.len() };
    }
    let (s, r, t) = similarity(&src, &dst);
    let mut sum = 0.0;
    for (p, q) in src.iter().zip(&img) {
        let m = r * p * s + t;
        match estimate.project(&Point3::new(m.x, m.y, 0.0)) {
            Ok((e, _)) => sum += e.dist(q).powi(2),
            Err(_) => return GridReport { rms: f64::INFINITY, points: src.len() },
        }
    }
    GridReport { rms: (sum / src.len() as f64).sqrt(), points: src.len() }
}

/// Draws the ground grid lines over `frame`.
pub fn render_grid_overlay(frame: &RgbImage, camera: &CameraModel, extent: f64, step: f64, color: [u8; 3]) -> RgbImage {
    let mut out = frame.clone();
    let (w, h) = (frame.width as f64, frame.height as f64);
    let center = camera
        .back_project_ground(&camera.principal_point())
        .or_else(|_| camera.back_project_ground(&ImagePoint::new(w / 2.0, h - 1.0)))
        .unwrap_or(Point3::new(0.0, 0.0, 0.0));
    let n = (extent / step).round() as i64;
    let half = extent / 2.0;
    let samples = (extent * 50.0) as i64;
    let mut plot = |p: Point3| {
        if let Ok((q, _)) = camera.project(&p) {
            let (x, y) = (q.u.round(), q.v.round());
            if x >= 0.0 && y >= 0.0 && x < w && y < h {
                out.set(x as usize, y as usize, color);
            }
        }
    };
    for i in 0..=n {
        let a = -half + i as f64 * step;
        for k in 0..=samples {
            let b = -half + extent * k as f64 / samples as f64;
            plot(Point3::new(center.x + a, center.y + b, 0.0));
            plot(Point3::new(center.x + b, center.y + a, 0.0));
        }
    }
    out
}

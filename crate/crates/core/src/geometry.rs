//! Pinhole camera algebra.
//!
//! World frame is z-up with the ground plane at z = 0, distances in meters.
//! Camera extrinsics are stored world-to-camera: `X_cam = R * X_world + t`.
//! Image coordinates are pixels with u to the right and v down; pixel
//! `(i, j)` has its center at `(i, j)`.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::{Matrix3, Matrix3x4, Vector3};
use thiserror::Error;

/// Minimum depth in front of the camera accepted by [`CameraModel::project`].
pub const MIN_DEPTH: f64 = 1e-9;
/// Parallelism tolerance for lines and rays.
pub const PARALLEL_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point has non-positive depth {0}")]
    NonPositiveDepth(f64),
    #[error("ray is parallel to the ground plane")]
    RayParallelToGround,
    #[error("ground intersection lies behind the camera")]
    BehindCamera,
    #[error("degenerate input: {0}")]
    DegenerateInput(&'static str),
    #[error("lines are parallel")]
    ParallelLines,
    #[error("vanishing points admit no real focal length")]
    NoRealFocal,
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("camera file: {0}")]
    Parse(String),
    #[error("i/o: {0}")]
    Io(String),
}

impl From<std::io::Error> for GeometryError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ImagePoint {
    pub u: f64,
    pub v: f64,
}

impl ImagePoint {
    pub const fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn dist(&self, other: &ImagePoint) -> f64 {
        (self.u - other.u).hypot(self.v - other.v)
    }

    pub fn sub(&self, other: &ImagePoint) -> (f64, f64) {
        (self.u - other.u, self.v - other.v)
    }

    pub fn is_finite(&self) -> bool {
        self.u.is_finite() && self.v.is_finite()
    }

    pub(crate) fn homogeneous(&self) -> Vector3<f64> {
        Vector3::new(self.u, self.v, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v.x, v.y, v.z)
    }

    pub fn dist(&self, other: &Point3) -> f64 {
        (self.to_vector() - other.to_vector()).norm()
    }
}

/// Homogeneous image line `a*u + b*v + c = 0` with `a^2 + b^2 = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HomogLine {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl HomogLine {
    /// Normalizes arbitrary coefficients. Fails when `(a, b)` vanishes.
    pub fn new(a: f64, b: f64, c: f64) -> Result<Self, GeometryError> {
        let n = a.hypot(b);
        if !(n > 0.0) || !n.is_finite() || !c.is_finite() {
            return Err(GeometryError::DegenerateInput("line has zero normal"));
        }
        Ok(Self { a: a / n, b: b / n, c: c / n })
    }

    /// Signed point-line distance in pixels.
    pub fn signed_distance(&self, p: &ImagePoint) -> f64 {
        self.a * p.u + self.b * p.v + self.c
    }

    pub fn distance(&self, p: &ImagePoint) -> f64 {
        self.signed_distance(p).abs()
    }

    /// Orthogonal projection of `p` onto the line.
    pub fn foot_of(&self, p: &ImagePoint) -> ImagePoint {
        let d = self.signed_distance(p);
        ImagePoint::new(p.u - d * self.a, p.v - d * self.b)
    }

    /// Unit direction along the line.
    pub fn direction(&self) -> (f64, f64) {
        (-self.b, self.a)
    }

    fn vector(&self) -> Vector3<f64> {
        Vector3::new(self.a, self.b, self.c)
    }
}

/// Line through two distinct points.
pub fn line_through(p1: &ImagePoint, p2: &ImagePoint) -> Result<HomogLine, GeometryError> {
    let scale = p1.u.abs().max(p1.v.abs()).max(p2.u.abs()).max(p2.v.abs()).max(1.0);
    if p1.dist(p2) <= 1e-12 * scale {
        return Err(GeometryError::DegenerateInput("coincident points"));
    }
    let l = p1.homogeneous().cross(&p2.homogeneous());
    HomogLine::new(l.x, l.y, l.z)
}

/// Intersection of two lines.
pub fn intersect(l1: &HomogLine, l2: &HomogLine) -> Result<ImagePoint, GeometryError> {
    let p = l1.vector().cross(&l2.vector());
    // For unit-normal lines |p.z| is the sine of the angle between them.
    if p.z.abs() < PARALLEL_EPS {
        return Err(GeometryError::ParallelLines);
    }
    Ok(ImagePoint::new(p.x / p.z, p.y / p.z))
}

/// Focal length implied by two vanishing points of orthogonal directions.
pub fn focal_from_orthogonal_vps(
    v1: &ImagePoint,
    v2: &ImagePoint,
    principal: &ImagePoint,
) -> Result<f64, GeometryError> {
    let (a1, b1) = v1.sub(principal);
    let (a2, b2) = v2.sub(principal);
    let dot = a1 * a2 + b1 * b2;
    if !(dot < 0.0) {
        return Err(GeometryError::NoRealFocal);
    }
    Ok((-dot).sqrt())
}

/// Orthocenter of the triangle spanned by three points.
pub fn orthocenter(a: &ImagePoint, b: &ImagePoint, c: &ImagePoint) -> Result<ImagePoint, GeometryError> {
    // Altitude from a is perpendicular to bc: (p - a) . (c - b) = 0.
    let (bcu, bcv) = c.sub(b);
    let (acu, acv) = c.sub(a);
    let l1 = HomogLine::new(bcu, bcv, -(bcu * a.u + bcv * a.v))?;
    let l2 = HomogLine::new(acu, acv, -(acu * b.u + acv * b.v))?;
    intersect(&l1, &l2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub r: Matrix3<f64>,
    pub t: Vector3<f64>,
    p: Matrix3x4<f64>,
}

impl CameraModel {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        r: Matrix3<f64>,
        t: Vector3<f64>,
    ) -> Result<Self, GeometryError> {
        if !(fx > 0.0 && fy > 0.0) || !fx.is_finite() || !fy.is_finite() {
            return Err(GeometryError::InvalidCamera(format!("focal lengths must be positive, got {fx}, {fy}")));
        }
        if !(cx.is_finite() && cy.is_finite() && t.iter().all(|x| x.is_finite())) {
            return Err(GeometryError::InvalidCamera("non-finite parameter".into()));
        }
        let orth = (r.transpose() * r - Matrix3::identity()).norm();
        if !(orth < 1e-8) || (r.determinant() - 1.0).abs() > 1e-8 {
            return Err(GeometryError::InvalidCamera(format!(
                "rotation is not proper orthonormal (|RtR-I| = {orth:e}, det = {})",
                r.determinant()
            )));
        }
        let mut cam = Self { fx, fy, cx, cy, r, t, p: Matrix3x4::zeros() };
        cam.p = cam.k() * Matrix3x4::from_columns(&[r.column(0).into(), r.column(1).into(), r.column(2).into(), t]);
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`, with the image v axis pointing
    /// toward world -z (upright camera). Square pixels.
    pub fn look_at(f: f64, cx: f64, cy: f64, eye: Point3, target: Point3) -> Result<Self, GeometryError> {
        let forward = (target.to_vector() - eye.to_vector()).normalize();
        let up = Vector3::z();
        let right = forward.cross(&up);
        if right.norm() < 1e-9 {
            return Err(GeometryError::InvalidCamera("viewing direction is vertical".into()));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(r * eye.to_vector());
        Self::new(f, f, cx, cy, r, t)
    }

    pub fn k(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn k_inv(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// Cached 3x4 projection matrix `K [R | t]`.
    pub fn projection_matrix(&self) -> &Matrix3x4<f64> {
        &self.p
    }

    pub fn principal_point(&self) -> ImagePoint {
        ImagePoint::new(self.cx, self.cy)
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Point3 {
        Point3::from_vector(&-(self.r.transpose() * self.t))
    }

    pub fn to_camera(&self, p: &Point3) -> Vector3<f64> {
        self.r * p.to_vector() + self.t
    }

    /// Projects a world point; returns the image point and its depth.
    pub fn project(&self, p: &Point3) -> Result<(ImagePoint, f64), GeometryError> {
        let c = self.to_camera(p);
        if c.z <= MIN_DEPTH {
            return Err(GeometryError::NonPositiveDepth(c.z));
        }
        Ok((ImagePoint::new(self.fx * c.x / c.z + self.cx, self.fy * c.y / c.z + self.cy), c.z))
    }

    /// Projects a camera-frame point without the depth check.
    pub fn project_camera_frame(&self, c: &Vector3<f64>) -> ImagePoint {
        ImagePoint::new(self.fx * c.x / c.z + self.cx, self.fy * c.y / c.z + self.cy)
    }

    /// World-frame unit direction of the viewing ray through `q`.
    pub fn ray_direction(&self, q: &ImagePoint) -> Vector3<f64> {
        (self.r.transpose() * (self.k_inv() * q.homogeneous())).normalize()
    }

    /// Vanishing point of a world direction, `None` when it is at infinity.
    pub fn vanishing_point(&self, dir: &Vector3<f64>) -> Option<ImagePoint> {
        let c = self.r * dir;
        if c.z.abs() < PARALLEL_EPS * c.norm() {
            return None;
        }
        Some(self.project_camera_frame(&c))
    }

    /// Image of the ground plane's line at infinity.
    pub fn horizon(&self) -> Result<HomogLine, GeometryError> {
        let l = self.k_inv().transpose() * self.r.column(2);
        HomogLine::new(l.x, l.y, l.z)
    }

    /// Intersection of the viewing ray through `q` with the plane z = `height`.
    pub fn back_project_to_height(&self, q: &ImagePoint, height: f64) -> Result<Point3, GeometryError> {
        let d = self.ray_direction(q);
        if d.z.abs() < PARALLEL_EPS {
            return Err(GeometryError::RayParallelToGround);
        }
        let c = self.center().to_vector();
        let s = (height - c.z) / d.z;
        if s <= 0.0 {
            return Err(GeometryError::BehindCamera);
        }
        let mut p = c + d * s;
        p.z = height;
        Ok(Point3::from_vector(&p))
    }

    /// Intersection of the viewing ray through `q` with the ground plane.
    pub fn back_project_ground(&self, q: &ImagePoint) -> Result<Point3, GeometryError> {
        self.back_project_to_height(q, 0.0)
    }

    /// Writes the camera in the whitespace text format (17 significant digits).
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{} {} {} {}", fmt17(self.fx), fmt17(self.fy), fmt17(self.cx), fmt17(self.cy))?;
        for i in 0..3 {
            writeln!(w, "{} {} {}", fmt17(self.r[(i, 0)]), fmt17(self.r[(i, 1)]), fmt17(self.r[(i, 2)]))?;
        }
        writeln!(w, "{} {} {}", fmt17(self.t.x), fmt17(self.t.y), fmt17(self.t.z))
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self, GeometryError> {
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(5);
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let vals = line
                .split_whitespace()
                .map(|s| s.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| GeometryError::Parse(format!("line {}: {e}", lineno + 1)))?;
            rows.push(vals);
        }
        let expect = [4, 3, 3, 3, 3];
        if rows.len() != 5 || rows.iter().zip(expect).any(|(r, n)| r.len() != n) {
            return Err(GeometryError::Parse("expected 5 lines with 4,3,3,3,3 numbers".into()));
        }
        let r = Matrix3::from_fn(|i, j| rows[i + 1][j]);
        let t = Vector3::new(rows[4][0], rows[4][1], rows[4][2]);
        Self::new(rows[0][0], rows[0][1], rows[0][2], rows[0][3], r, t)
    }

    pub fn save(&self, path: &Path) -> Result<(), GeometryError> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, GeometryError> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

impl fmt::Display for CameraModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut buf = Vec::new();
        self.write_to(&mut buf).map_err(|_| fmt::Error)?;
        f.write_str(&String::from_utf8_lossy(&buf))
    }
}

/// Axis-aligned image rectangle in pixels, `[left, left + width) x
/// [top, top + height)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Rect {
    pub left: f64,
    pub top: f64,
    pub width: f64,
    pub height: f64,
}

impl Rect {
    pub const fn new(left: f64, top: f64, width: f64, height: f64) -> Self {
        Self { left, top, width, height }
    }

    pub fn from_center(cx: f64, cy: f64, width: f64, height: f64) -> Self {
        Self { left: cx - width / 2.0, top: cy - height / 2.0, width, height }
    }

    pub fn right(&self) -> f64 {
        self.left + self.width
    }

    pub fn bottom(&self) -> f64 {
        self.top + self.height
    }

    pub fn center(&self) -> ImagePoint {
        ImagePoint::new(self.left + self.width / 2.0, self.top + self.height / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.width.max(0.0) * self.height.max(0.0)
    }

    pub fn intersection_area(&self, other: &Rect) -> f64 {
        let w = self.right().min(other.right()) - self.left.max(other.left);
        let h = self.bottom().min(other.bottom()) - self.top.max(other.top);
        w.max(0.0) * h.max(0.0)
    }

    /// Intersection over union; 0 when both are empty.
    pub fn iou(&self, other: &Rect) -> f64 {
        let i = self.intersection_area(other);
        let u = self.area() + other.area() - i;
        if u > 0.0 {
            i / u
        } else {
            0.0
        }
    }

    pub fn contains_point(&self, p: &ImagePoint) -> bool {
        p.u >= self.left && p.u <= self.right() && p.v >= self.top && p.v <= self.bottom()
    }

    pub fn contains_rect(&self, other: &Rect) -> bool {
        other.left >= self.left && other.top >= self.top && other.right() <= self.right() && other.bottom() <= self.bottom()
    }

    /// Scaled by `k` about its center.
    pub fn scaled(&self, k: f64) -> Rect {
        let c = self.center();
        Rect::from_center(c.u, c.v, self.width * k, self.height * k)
    }

    /// Pixel index ranges `(x0..x1, y0..y1)` of pixels whose centers lie
    /// inside the rectangle, clipped to a `width x height` image.
    pub fn pixel_span(&self, width: usize, height: usize) -> Option<(std::ops::Range<usize>, std::ops::Range<usize>)> {
        let x0 = self.left.ceil().max(0.0);
        let y0 = self.top.ceil().max(0.0);
        let x1 = self.right().ceil().min(width as f64);
        let y1 = self.bottom().ceil().min(height as f64);
        (x0 < x1 && y0 < y1).then_some((x0 as usize..x1 as usize, y0 as usize..y1 as usize))
    }
}

/// Decimal with 17 significant digits, which round-trips every f64.
pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

/// Nearest rotation matrix (polar decomposition via SVD), with det = +1.
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut u2 = u;
        u2.column_mut(2).neg_mut();
        r = u2 * vt;
    }
    r
}

/// Even-odd point in polygon test.
pub fn point_in_polygon(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut c = false;
    let n = poly.len();
    if n == 0 {
        return false;
    }
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            c = !c;
        }
        j = i;
    }
    c
}

/// Wraps an angle to (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let mut x = a.rem_euclid(2.0 * PI);
    if x > PI {
        x -= 2.0 * PI;
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rect_iou_and_pixels() {
        let a = Rect::new(0.0, 0.0, 10.0, 10.0);
        let b = Rect::new(5.0, 0.0, 10.0, 10.0);
        assert!((a.iou(&b) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(a.iou(&Rect::new(20.0, 0.0, 1.0, 1.0)), 0.0);
        assert_eq!(a.pixel_span(8, 20), Some((0..8, 0..10)));
        assert_eq!(Rect::new(0.5, 0.5, 2.0, 1.0).pixel_span(8, 8), Some((1..3, 1..2)));
        assert_eq!(Rect::new(-5.0, 0.0, 2.0, 2.0).pixel_span(8, 8), None);
        assert_eq!(a.scaled(2.0), Rect::new(-5.0, -5.0, 20.0, 20.0));
    }

    fn down_camera() -> CameraModel {
        // Optical axis along world -z, camera 5 m above the origin.
        let r = Matrix3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0);
        let t = -(r * Vector3::new(0.0, 0.0, 5.0));
        CameraModel::new(1000.0, 1000.0, 960.0, 540.0, r, t).unwrap()
    }

    fn oblique_camera() -> CameraModel {
        CameraModel::look_at(900.0, 640.0, 360.0, Point3::new(-4.0, -12.0, 7.0), Point3::new(2.0, 6.0, 0.0)).unwrap()
    }

    #[test]
    fn project_principal_ray_and_offset() {
        let cam = down_camera();
        let (q, depth) = cam.project(&Point3::new(0.0, 0.0, 0.0)).unwrap();
        assert_eq!((q.u, q.v), (960.0, 540.0));
        assert_eq!(depth, 5.0);
        let (q, _) = cam.project(&Point3::new(1.0, 0.0, 0.0)).unwrap();
        assert!((q.u - 1160.0).abs() < 1e-9 && (q.v - 540.0).abs() < 1e-9);
        assert!(matches!(cam.project(&Point3::new(0.0, 0.0, 6.0)), Err(GeometryError::NonPositiveDepth(_))));
    }

    #[test]
    fn projection_matrix_matches_product() {
        let cam = oblique_camera();
        let p = cam.projection_matrix();
        let x = nalgebra::Vector4::new(1.5, -2.0, 0.7, 1.0);
        let h = p * x;
        let (q, _) = cam.project(&Point3::new(1.5, -2.0, 0.7)).unwrap();
        assert!((h.x / h.z - q.u).abs() < 1e-9 && (h.y / h.z - q.v).abs() < 1e-9);
        assert!((p.fixed_view::<1, 3>(2, 0).norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ground_round_trip() {
        let cam = oblique_camera();
        let (q, _) = cam.project(&Point3::new(3.0, 7.0, 0.0)).unwrap();
        let g = cam.back_project_ground(&q).unwrap();
        assert!(g.dist(&Point3::new(3.0, 7.0, 0.0)) < 1e-6);
        assert_eq!(g.z, 0.0);
    }

    #[test]
    fn horizon_point_is_parallel_to_ground() {
        let cam = oblique_camera();
        let vp = cam.vanishing_point(&Vector3::new(1.0, 0.3, 0.0)).unwrap();
        assert!(cam.horizon().unwrap().distance(&vp) < 1e-6);
        assert_eq!(cam.back_project_ground(&vp), Err(GeometryError::RayParallelToGround));
    }

    #[test]
    fn line_intersections() {
        let l1 = line_through(&ImagePoint::new(0.0, 0.0), &ImagePoint::new(0.0, 1.0)).unwrap();
        let l2 = line_through(&ImagePoint::new(0.0, 0.0), &ImagePoint::new(1.0, 0.0)).unwrap();
        let p = intersect(&l1, &l2).unwrap();
        assert!(p.u.abs() < 1e-12 && p.v.abs() < 1e-12);

        let a = line_through(&ImagePoint::new(0.0, 0.0), &ImagePoint::new(1.0, 1.0)).unwrap();
        let b = line_through(&ImagePoint::new(0.0, 1.0), &ImagePoint::new(1.0, 0.0)).unwrap();
        let p = intersect(&a, &b).unwrap();
        assert!((p.u - 0.5).abs() < 1e-12 && (p.v - 0.5).abs() < 1e-12);

        assert_eq!(intersect(&a, &a), Err(GeometryError::ParallelLines));
        assert!(matches!(
            line_through(&ImagePoint::new(2.0, 2.0), &ImagePoint::new(2.0, 2.0)),
            Err(GeometryError::DegenerateInput(_))
        ));
    }

    #[test]
    fn focal_from_vps() {
        let f = focal_from_orthogonal_vps(
            &ImagePoint::new(1000.0, 0.0),
            &ImagePoint::new(-1000.0, 0.0),
            &ImagePoint::new(0.0, 0.0),
        )
        .unwrap();
        assert_eq!(f, 1000.0);
        let v = ImagePoint::new(300.0, 20.0);
        assert_eq!(focal_from_orthogonal_vps(&v, &v, &ImagePoint::default()), Err(GeometryError::NoRealFocal));
    }

    #[test]
    fn focal_recovered_from_simulated_camera() {
        let cam = oblique_camera();
        let vx = cam.vanishing_point(&Vector3::x()).unwrap();
        let vz = cam.vanishing_point(&Vector3::z()).unwrap();
        let f = focal_from_orthogonal_vps(&vx, &vz, &cam.principal_point()).unwrap();
        assert!((f - cam.fx).abs() < 1e-6);
        // Rays through the two VPs are orthogonal for the recovered focal.
        let d1 = Vector3::new((vx.u - cam.cx) / f, (vx.v - cam.cy) / f, 1.0).normalize();
        let d2 = Vector3::new((vz.u - cam.cx) / f, (vz.v - cam.cy) / f, 1.0).normalize();
        assert!((d1.dot(&d2).acos() - std::f64::consts::FRAC_PI_2).abs() < 1e-9);
    }

    #[test]
    fn camera_file_is_bit_exact() {
        let cam = oblique_camera();
        let mut buf = Vec::new();
        cam.write_to(&mut buf).unwrap();
        let back = CameraModel::read_from(buf.as_slice()).unwrap();
        assert_eq!(cam, back);
    }

    #[test]
    fn invalid_rotation_rejected() {
        let r = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0);
        assert!(CameraModel::new(1.0, 1.0, 0.0, 0.0, r, Vector3::zeros()).is_err());
    }

    #[test]
    fn wrap_angle_range() {
        use std::f64::consts::PI;
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-15);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
    }

    fn arb_camera() -> impl Strategy<Value = CameraModel> {
        (
            300.0..2000.0f64,
            -20.0..20.0f64,
            -20.0..20.0f64,
            3.0..25.0f64,
            0.0..std::f64::consts::TAU,
            5.0..40.0f64,
        )
            .prop_map(|(f, ex, ey, ez, yaw, dist)| {
                let eye = Point3::new(ex, ey, ez);
                let target = Point3::new(ex + dist * yaw.cos(), ey + dist * yaw.sin(), 0.0);
                CameraModel::look_at(f, 640.0, 360.0, eye, target).unwrap()
            })
    }

    proptest! {
        #[test]
        fn prop_ground_round_trip(cam in arb_camera(), seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let c = cam.center();
            let fwd = cam.r.row(2).transpose();
            let mut max_err: f64 = 0.0;
            for _ in 0..100 {
                // Ground points in front of the camera.
                let d: f64 = rng.random_range(2.0..60.0);
                let s: f64 = rng.random_range(-0.6..0.6);
                let h = Vector3::new(fwd.x, fwd.y, 0.0).normalize();
                let side = Vector3::new(-h.y, h.x, 0.0);
                let g = Point3::new(c.x + d * h.x + s * d * side.x, c.y + d * h.y + s * d * side.y, 0.0);
                if let Ok((q, _)) = cam.project(&g) {
                    let back = cam.back_project_ground(&q).unwrap();
                    max_err = max_err.max(back.dist(&g));
                }
            }
            prop_assert!(max_err < 1e-6);
        }

        #[test]
        fn prop_orthocenter_is_principal_point(cam in arb_camera()) {
            let vs: Vec<_> = [Vector3::x(), Vector3::y(), Vector3::z()]
                .iter()
                .filter_map(|d| cam.vanishing_point(d))
                .collect();
            prop_assume!(vs.len() == 3 && vs.iter().all(|v| v.u.abs() < 1e7 && v.v.abs() < 1e7));
            let h = orthocenter(&vs[0], &vs[1], &vs[2]).unwrap();
            let scale = vs.iter().map(|v| v.u.abs().max(v.v.abs())).fold(1.0, f64::max);
            prop_assert!(h.dist(&cam.principal_point()) < 1e-6 * (scale / 1e3).max(1.0));
        }

        #[test]
        fn prop_line_symmetric_and_incident(u1 in -1e3..1e3f64, v1 in -1e3..1e3f64, u2 in -1e3..1e3f64, v2 in -1e3..1e3f64) {
            let p1 = ImagePoint::new(u1, v1);
            let p2 = ImagePoint::new(u2, v2);
            prop_assume!(p1.dist(&p2) > 1e-3);
            let l = line_through(&p1, &p2).unwrap();
            let m = line_through(&p2, &p1).unwrap();
            prop_assert!(l.distance(&p1) < 1e-9 && l.distance(&p2) < 1e-9);
            prop_assert!(((l.a - m.a).abs() < 1e-12 && (l.c - m.c).abs() < 1e-9)
                || ((l.a + m.a).abs() < 1e-12 && (l.c + m.c).abs() < 1e-9));
        }
    }
}

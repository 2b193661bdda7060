use nalgebra::{Matrix2, SymmetricEigen, Vector2};

use super::CalibrationError;
use crate::geometry::ImagePoint;

/// Minimum major/minor eigenvalue ratio for a blob to have a usable axis.
pub const MIN_AXIS_RATIO: f64 = 1.2;

/// Head and foot points of a foreground blob given as `(x, y)` pixels.
///
/// The principal axis comes from the second moments of the pixel
/// coordinates; the endpoints are the extreme projections onto it, placed
/// on the axis line through the centroid. The head is the end with the
/// smaller `v`.
pub fn extract_head_foot(pixels: &[(usize, usize)], min_area: usize) -> Result<(ImagePoint, ImagePoint), CalibrationError> {
    if pixels.len() < min_area.max(2) {
        return Err(CalibrationError::BlobTooSmall { area: pixels.len() });
    }
    let n = pixels.len() as f64;
    let mean = pixels.iter().fold(Vector2::zeros(), |acc, &(x, y)| acc + Vector2::new(x as f64, y as f64)) / n;
    let mut cov = Matrix2::zeros();
    for &(x, y) in pixels {
        let d = Vector2::new(x as f64, y as f64) - mean;
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    let (major, minor) = if eig.eigenvalues[0] >= eig.eigenvalues[1] { (0, 1) } else { (1, 0) };
    let (l1, l2) = (eig.eigenvalues[major], eig.eigenvalues[minor]);
    let ratio = if l2 > 0.0 { l1 / l2 } else { f64::INFINITY };
    if !(ratio >= MIN_AXIS_RATIO) {
        return Err(CalibrationError::DegenerateBlob { ratio });
    }
    let mut axis: Vector2<f64> = eig.eigenvectors.column(major).into();
    // Point the axis downward in the image so `t_max` is the foot.
    if axis.y < 0.0 || (axis.y == 0.0 && axis.x < 0.0) {
        axis = -axis;
    }
    let (mut t_min, mut t_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pixels {
        let t = (Vector2::new(x as f64, y as f64) - mean).dot(&axis);
        t_min = t_min.min(t);
        t_max = t_max.max(t);
    }
    let at = |t: f64| {
        let p = mean + axis * t;
        ImagePoint::new(p.x, p.y)
    };
    Ok((at(t_min), at(t_max)))
}

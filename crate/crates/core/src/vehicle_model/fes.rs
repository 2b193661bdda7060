use super::{ProjectedSegment, VehicleModelError};
use crate::image::RgbImage;

/// Image gradients of luminance by central differences (one-sided at the
/// borders), with the 99th-percentile magnitude used to normalize scores.
/// When fewer than 1% of pixels have any gradient (a noiseless render) the
/// smallest nonzero magnitude is used instead, which keeps the score
/// invariant to gradient scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientField {
    pub width: usize,
    pub height: usize,
    gx: Vec<f64>,
    gy: Vec<f64>,
    p99: f64,
}

impl GradientField {
    pub fn from_luminance(width: usize, height: usize, lum: &[f64]) -> Self {
        assert_eq!(lum.len(), width * height, "luminance buffer size");
        let mut gx = vec![0.0; lum.len()];
        let mut gy = vec![0.0; lum.len()];
        let at = |x: usize, y: usize| lum[y * width + x];
        for y in 0..height {
            for x in 0..width {
                let i = y * width + x;
                gx[i] = if width < 2 {
                    0.0
                } else if x == 0 {
                    at(1, y) - at(0, y)
                } else if x == width - 1 {
                    at(x, y) - at(x - 1, y)
                } else {
                    (at(x + 1, y) - at(x - 1, y)) / 2.0
                };
                gy[i] = if height < 2 {
                    0.0
                } else if y == 0 {
                    at(x, 1) - at(x, 0)
                } else if y == height - 1 {
                    at(x, y) - at(x, y - 1)
                } else {
                    (at(x, y + 1) - at(x, y - 1)) / 2.0
                };
            }
        }
        let mut mags: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).collect();
        let p99 = if mags.is_empty() {
            0.0
        } else {
            let min_pos = mags.iter().cloned().filter(|m| *m > 0.0).fold(f64::INFINITY, f64::min);
            let k = ((0.99 * mags.len() as f64).ceil() as usize).clamp(1, mags.len()) - 1;
            let (_, q, _) = mags.select_nth_unstable_by(k, f64::total_cmp);
            if *q > 0.0 {
                *q
            } else if min_pos.is_finite() {
                min_pos
            } else {
                0.0
            }
        };
        Self { width, height, gx, gy, p99 }
    }

    pub fn from_image(img: &RgbImage) -> Self {
        Self::from_luminance(img.width, img.height, &img.luminance())
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0
    }

    pub fn normalizer(&self) -> f64 {
        self.p99
    }

    pub fn gradient(&self, x: usize, y: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.gx[i], self.gy[i])
    }

    pub fn magnitude(&self, x: usize, y: usize) -> f64 {
        let (a, b) = self.gradient(x, y);
        a.hypot(b)
    }

    pub fn orientation(&self, x: usize, y: usize) -> f64 {
        let (a, b) = self.gradient(x, y);
        b.atan2(a)
    }

    /// Bilinear gradient at a subpixel position (pixel centers at integer
    /// coordinates); `None` outside the field.
    pub fn gradient_at(&self, u: f64, v: f64) -> Option<(f64, f64)> {
        if !(u >= 0.0 && v >= 0.0 && u <= (self.width - 1) as f64 && v <= (self.height - 1) as f64) {
            return None;
        }
        let x0 = (u.floor() as usize).min(self.width.saturating_sub(2));
        let y0 = (v.floor() as usize).min(self.height.saturating_sub(2));
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let (fx, fy) = (u - x0 as f64, v - y0 as f64);
        let mix = |g: &[f64]| {
            let a = g[y0 * self.width + x0] * (1.0 - fx) + g[y0 * self.width + x1] * fx;
            let b = g[y1 * self.width + x0] * (1.0 - fx) + g[y1 * self.width + x1] * fx;
            a * (1.0 - fy) + b * fy
        };
        Some((mix(&self.gx), mix(&self.gy)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeScore {
    pub edge: usize,
    pub score: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FesResult {
    pub total: f64,
    pub per_edge: Vec<EdgeScore>,
    pub visible_edge_count: usize,
    /// Set when no visible segment had any sample inside the image.
    pub no_visible_segments: bool,
}

/// Clips segment `a`-`b` to the rectangle `[0, w-1] x [0, h-1]`.
fn clip(a: (f64, f64), b: (f64, f64), w: f64, h: f64) -> Option<((f64, f64), (f64, f64))> {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for (p, q) in [(-dx, a.0), (dx, w - 1.0 - a.0), (-dy, a.1), (dy, h - 1.0 - a.1)] {
        if p == 0.0 {
            if q < 0.0 {
                return None;
            }
        } else {
            let r = q / p;
            if p < 0.0 {
                t0 = t0.max(r);
            } else {
                t1 = t1.min(r);
            }
        }
    }
    (t0 <= t1).then_some(((a.0 + t0 * dx, a.1 + t0 * dy), (a.0 + t1 * dx, a.1 + t1 * dy)))
}

/// FES with the plain per-sample score.
pub fn compute_fes(field: &GradientField, segments: &[ProjectedSegment]) -> Result<FesResult, VehicleModelError> {
    compute_fes_with(field, segments, 0.0)
}

/// FES where each sample takes the best normal-aligned gradient within
/// `band` pixels along the segment normal, discounted linearly with
/// distance. `band = 0` is the plain score; wider bands smooth the
/// landscape for coarse fitting. Bands of 8 px and more probe every
/// `band / 4` pixels, both along the segment and across it.
pub fn compute_fes_with(
    field: &GradientField,
    segments: &[ProjectedSegment],
    band: f64,
) -> Result<FesResult, VehicleModelError> {
    if field.is_empty() {
        return Err(VehicleModelError::EmptyField);
    }
    let norm = field.p99;
    let (w, h) = (field.width as f64, field.height as f64);
    let steps = band.max(0.0).floor() as i64;
    let stride = (steps / 4).max(1);
    let mut per_edge = Vec::new();
    let mut weighted = 0.0;
    let mut count = 0usize;
    let mut visible = 0usize;
    for s in segments.iter().filter(|s| s.visible) {
        visible += 1;
        let Some((a, b)) = clip((s.a.u, s.a.v), (s.b.u, s.b.v), w, h) else { continue };
        let len = (b.0 - a.0).hypot(b.1 - a.1);
        if len < 1e-9 {
            continue;
        }
        let (tx, ty) = ((b.0 - a.0) / len, (b.1 - a.1) / len);
        let (nx, ny) = (-ty, tx);
        let n = (len / stride as f64).ceil() as usize;
        let mut sum = 0.0;
        for k in 0..n {
            let t = (k as f64 + 0.5) / n as f64 * len;
            let (u, v) = (a.0 + tx * t, a.1 + ty * t);
            let mut best = 0.0f64;
            for o in (-steps..=steps).filter(|o| o % stride == 0) {
                let Some((gx, gy)) = field.gradient_at(u + nx * o as f64, v + ny * o as f64) else { continue };
                let decay = 1.0 - o.unsigned_abs() as f64 / (band + 1.0);
                let raw = if norm > 0.0 { ((gx * nx + gy * ny).abs() / norm).min(1.0) } else { 0.0 };
                best = best.max(raw * decay);
            }
            sum += best;
        }
        let n = n * stride as usize;
        let sum = sum * stride as f64;
        per_edge.push(EdgeScore { edge: s.edge, score: sum / n as f64, samples: n });
        weighted += sum;
        count += n;
    }
    let total = if count > 0 { weighted / count as f64 } else { 0.0 };
    Ok(FesResult { total, per_edge, visible_edge_count: visible, no_visible_segments: count == 0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ImagePoint;
    use proptest::prelude::*;

    fn seg(edge: usize, a: (f64, f64), b: (f64, f64)) -> ProjectedSegment {
        ProjectedSegment { edge, a: ImagePoint::new(a.0, a.1), b: ImagePoint::new(b.0, b.1), visible: true }
    }

    fn step_image(w: usize, h: usize, x0: usize) -> Vec<f64> {
        (0..w * h).map(|i| if i % w >= x0 { 200.0 } else { 50.0 }).collect()
    }

    #[test]
    fn central_and_one_sided_differences() {
        let lum: Vec<f64> = (0..12).map(|i| ((i % 4) * (i % 4)) as f64).collect();
        let f = GradientField::from_luminance(4, 3, &lum);
        assert_eq!(f.gradient(0, 1), (1.0, 0.0));
        assert_eq!(f.gradient(1, 1), (2.0, 0.0));
        assert_eq!(f.gradient(3, 1), (5.0, 0.0));
        assert!((f.orientation(2, 0) - 0.0).abs() < 1e-15);
    }

    #[test]
    fn constant_image_scores_zero() {
        let f = GradientField::from_luminance(20, 10, &vec![90.0; 200]);
        let r = compute_fes(&f, &[seg(0, (2.0, 2.0), (15.0, 7.0))]).unwrap();
        assert_eq!(r.total, 0.0);
        assert!(!r.no_visible_segments);
    }

    #[test]
    fn step_edge_scores_high_and_offset_scores_less() {
        let f = GradientField::from_luminance(60, 40, &step_image(60, 40, 30));
        let on = compute_fes(&f, &[seg(0, (29.5, 3.0), (29.5, 36.0))]).unwrap();
        assert!(on.per_edge[0].score >= 0.9, "{:?}", on);
        let off = compute_fes(&f, &[seg(0, (34.5, 3.0), (34.5, 36.0))]).unwrap();
        assert!(off.total < on.total);
        // Parallel gradient contributes nothing to a segment across it.
        let across = compute_fes(&f, &[seg(0, (20.0, 20.0), (40.0, 20.0))]).unwrap();
        assert!(across.total < 1e-12);
    }

    #[test]
    fn band_finds_displaced_edge() {
        let f = GradientField::from_luminance(60, 40, &step_image(60, 40, 30));
        let s = [seg(0, (32.5, 3.0), (32.5, 36.0))];
        assert!(compute_fes(&f, &s).unwrap().total < 1e-12);
        let wide = compute_fes_with(&f, &s, 6.0).unwrap().total;
        assert!((wide - (1.0 - 3.0 / 7.0)).abs() < 1e-9, "{wide}");
    }

    #[test]
    fn total_is_sample_weighted_mean() {
        let f = GradientField::from_luminance(60, 40, &step_image(60, 40, 30));
        let r = compute_fes(&f, &[seg(0, (29.5, 3.0), (29.5, 36.0)), seg(1, (5.5, 3.0), (5.5, 13.0))]).unwrap();
        let (a, b) = (r.per_edge[0], r.per_edge[1]);
        assert_eq!((a.samples, b.samples), (33, 10));
        let expect = (a.score * 33.0 + b.score * 10.0) / 43.0;
        assert!((r.total - expect).abs() < 1e-12);
    }

    #[test]
    fn hidden_and_outside_segments() {
        let f = GradientField::from_luminance(60, 40, &step_image(60, 40, 30));
        let mut hidden = seg(0, (29.5, 3.0), (29.5, 36.0));
        hidden.visible = false;
        let r = compute_fes(&f, &[hidden, seg(1, (-10.0, -5.0), (-3.0, -8.0))]).unwrap();
        assert_eq!(r.visible_edge_count, 1);
        assert!(r.no_visible_segments);
        assert_eq!(r.total, 0.0);
        let empty = GradientField::from_luminance(0, 0, &[]);
        assert_eq!(compute_fes(&empty, &[]), Err(VehicleModelError::EmptyField));
    }

    #[test]
    fn clipping_keeps_inside_part() {
        let (a, b) = clip((-10.0, 5.0), (30.0, 5.0), 20.0, 10.0).unwrap();
        assert_eq!((a, b), ((0.0, 5.0), (19.0, 5.0)));
        assert!(clip((-10.0, -5.0), (30.0, -5.0), 20.0, 10.0).is_none());
    }

    proptest! {
        #[test]
        fn uniform_gradient_scaling_leaves_fes_unchanged(k in 0.1f64..20.0, x0 in 5.0f64..50.0, y0 in 2.0f64..30.0, dx in -20.0f64..20.0, dy in -20.0f64..20.0) {
            let base: Vec<f64> = (0..60 * 40).map(|i| ((i % 60) as f64 * 0.37).sin() * 40.0 + ((i / 60) as f64 * 0.21).cos() * 30.0 + 100.0).collect();
            let scaled: Vec<f64> = base.iter().map(|v| v * k).collect();
            let s = [seg(0, (x0, y0), (x0 + dx, y0 + dy))];
            let a = compute_fes(&GradientField::from_luminance(60, 40, &base), &s).unwrap().total;
            let b = compute_fes(&GradientField::from_luminance(60, 40, &scaled), &s).unwrap().total;
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}

//! Running-Gaussian background subtraction with shadow suppression, and
//! the multiple-kernel feedback loop that loosens thresholds inside
//! tracked regions whose colors resemble the background.
//!
//! The penalty weight is the fuzzy Gaussian
//! `exp(-9 (1 - s)^2 / (4 (1 - s_min)^2))` for `s` in `[s_min, s_max)`
//! and zero elsewhere.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{ImagePoint, Rect};
use crate::image::{rgb_to_ycbcr, GrayImage, RgbImage};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SegmentationError {
    #[error("dimension mismatch: expected {expected:?}, got {got:?}")]
    DimensionMismatch { expected: (usize, usize), got: (usize, usize) },
    #[error("kernel region lies outside the image")]
    EmptyKernelRegion,
    #[error("histogram layouts differ")]
    LayoutMismatch,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("i/o error: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundModel {
    pub width: usize,
    pub height: usize,
    /// Per-pixel YCbCr mean.
    pub mean: Vec<[f64; 3]>,
    /// Per-pixel YCbCr variance.
    pub var: Vec<[f64; 3]>,
    pub learning_rate: f64,
    pub variance_floor: f64,
}

pub const DEFAULT_VARIANCE_FLOOR: f64 = 4.0;

impl BackgroundModel {
    /// Mean and (floored) variance of a stack of background frames.
    pub fn from_frames(frames: &[RgbImage], learning_rate: f64) -> Result<Self, SegmentationError> {
        let first = frames.first().ok_or_else(|| SegmentationError::InvalidConfig("no frames".into()))?;
        let (w, h) = (first.width, first.height);
        let n = frames.len() as f64;
        let mut mean = vec![[0.0; 3]; w * h];
        let mut sq = vec![[0.0; 3]; w * h];
        for f in frames {
            check_dims((w, h), f)?;
            for (i, p) in f.data.chunks_exact(3).enumerate() {
                let c = rgb_to_ycbcr([p[0], p[1], p[2]]);
                for k in 0..3 {
                    mean[i][k] += c[k] / n;
                    sq[i][k] += c[k] * c[k] / n;
                }
            }
        }
        let var = mean
            .iter()
            .zip(&sq)
            .map(|(m, s)| [0, 1, 2].map(|k| (s[k] - m[k] * m[k]).max(DEFAULT_VARIANCE_FLOOR)))
            .collect();
        Ok(Self { width: w, height: h, mean, var, learning_rate, variance_floor: DEFAULT_VARIANCE_FLOOR })
    }

    pub fn mean_at(&self, x: usize, y: usize) -> [f64; 3] {
        self.mean[y * self.width + x]
    }

    /// Exponential update of mean and variance at background pixels only.
    pub fn update(&mut self, frame: &RgbImage, mask: &ForegroundMask) -> Result<(), SegmentationError> {
        check_dims((self.width, self.height), frame)?;
        if (mask.width, mask.height) != (self.width, self.height) {
            return Err(SegmentationError::DimensionMismatch { expected: (self.width, self.height), got: (mask.width, mask.height) });
        }
        let a = self.learning_rate;
        if a == 0.0 {
            return Ok(());
        }
        for (i, p) in frame.data.chunks_exact(3).enumerate() {
            if mask.data[i] {
                continue;
            }
            let c = rgb_to_ycbcr([p[0], p[1], p[2]]);
            for k in 0..3 {
                let d = c[k] - self.mean[i][k];
                self.mean[i][k] += a * d;
                self.var[i][k] = ((1.0 - a) * self.var[i][k] + a * d * d).max(self.variance_floor);
            }
        }
        Ok(())
    }
}

/// Free-function form of [`BackgroundModel::update`].
pub fn update_background(model: &mut BackgroundModel, frame: &RgbImage, mask: &ForegroundMask) -> Result<(), SegmentationError> {
    model.update(frame, mask)
}

fn check_dims(expected: (usize, usize), frame: &RgbImage) -> Result<(), SegmentationError> {
    if (frame.width, frame.height) != expected {
        return Err(SegmentationError::DimensionMismatch { expected, got: (frame.width, frame.height) });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentationThresholds {
    /// Per-channel Mahalanobis distance (in standard deviations).
    pub tau_bg: f64,
    pub shadow_lum_low: f64,
    pub shadow_lum_high: f64,
    /// Maximum CbCr distance from the background for a shadow pixel.
    pub tau_shadow_chroma: f64,
}

impl Default for SegmentationThresholds {
    fn default() -> Self {
        Self { tau_bg: 3.0, shadow_lum_low: 0.4, shadow_lum_high: 0.9, tau_shadow_chroma: 6.0 }
    }
}

impl SegmentationThresholds {
    pub fn validate(&self) -> Result<(), SegmentationError> {
        if !(self.tau_bg > 0.0) {
            return Err(SegmentationError::InvalidConfig("tau_bg must be positive".into()));
        }
        if !(0.0 < self.shadow_lum_low && self.shadow_lum_low < self.shadow_lum_high && self.shadow_lum_high < 1.0) {
            return Err(SegmentationError::InvalidConfig("shadow band must satisfy 0 < low < high < 1".into()));
        }
        if !(self.tau_shadow_chroma >= 0.0) {
            return Err(SegmentationError::InvalidConfig("tau_shadow_chroma must be non-negative".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, SegmentationError> {
        let t: Self = toml::from_str(text).map_err(|e| SegmentationError::InvalidConfig(e.to_string()))?;
        t.validate()?;
        Ok(t)
    }

    fn scaled(&self, k: f64) -> Self {
        Self { tau_bg: self.tau_bg * k, tau_shadow_chroma: self.tau_shadow_chroma * k, ..*self }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForegroundMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl ForegroundMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![false; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn union_with(&mut self, other: &ForegroundMask) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a |= *b;
        }
    }

    /// 0 = background, 255 = foreground.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage { width: self.width, height: self.height, data: self.data.iter().map(|&b| if b { 255 } else { 0 }).collect() }
    }

    /// Any nonzero pixel is foreground.
    pub fn from_gray(g: &GrayImage) -> Self {
        Self { width: g.width, height: g.height, data: g.data.iter().map(|&v| v != 0).collect() }
    }

    pub fn save(&self, path: &Path) -> Result<(), SegmentationError> {
        self.to_gray().save(path).map_err(|e| SegmentationError::Io(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, SegmentationError> {
        GrayImage::load(path).map(|g| Self::from_gray(&g)).map_err(|e| SegmentationError::Io(e.to_string()))
    }
}

fn is_foreground(c: &[f64; 3], mean: &[f64; 3], var: &[f64; 3], tau: f64) -> bool {
    (0..3).any(|k| (c[k] - mean[k]).abs() > tau * var[k].sqrt())
}

fn is_shadow(c: &[f64; 3], mean: &[f64; 3], th: &SegmentationThresholds) -> bool {
    if mean[0] <= 0.0 {
        return false;
    }
    let ratio = c[0] / mean[0];
    let chroma = (c[1] - mean[1]).hypot(c[2] - mean[2]);
    ratio > th.shadow_lum_low && ratio < th.shadow_lum_high && chroma < th.tau_shadow_chroma
}

/// Foreground where any channel deviates from the background mean by more
/// than `tau_bg` standard deviations.
pub fn subtract_background(
    frame: &RgbImage,
    model: &BackgroundModel,
    th: &SegmentationThresholds,
) -> Result<ForegroundMask, SegmentationError> {
    check_dims((model.width, model.height), frame)?;
    let mut mask = ForegroundMask::new(frame.width, frame.height);
    for (i, p) in frame.data.chunks_exact(3).enumerate() {
        let c = rgb_to_ycbcr([p[0], p[1], p[2]]);
        mask.data[i] = is_foreground(&c, &model.mean[i], &model.var[i], th.tau_bg);
    }
    Ok(mask)
}

/// Removes foreground pixels that look like cast shadows: darker than the
/// background within the luminance band and close to it in chroma.
pub fn suppress_shadow(
    frame: &RgbImage,
    model: &BackgroundModel,
    mask: &ForegroundMask,
    th: &SegmentationThresholds,
) -> ForegroundMask {
    let mut out = mask.clone();
    for (i, p) in frame.data.chunks_exact(3).enumerate() {
        if out.data[i] && is_shadow(&rgb_to_ycbcr([p[0], p[1], p[2]]), &model.mean[i], th) {
            out.data[i] = false;
        }
    }
    out
}

/// Subtraction followed by shadow suppression.
pub fn segment(frame: &RgbImage, model: &BackgroundModel, th: &SegmentationThresholds) -> Result<ForegroundMask, SegmentationError> {
    let m = subtract_background(frame, model, th)?;
    Ok(suppress_shadow(frame, model, &m, th))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorSpace {
    /// 8 x 8 x 8 bins over Y, Cb, Cr.
    YCbCr,
    /// 16 x 16 bins over Cb, Cr.
    CbCr,
}

impl ColorSpace {
    pub fn layout(&self) -> &'static [usize] {
        match self {
            ColorSpace::YCbCr => &[8, 8, 8],
            ColorSpace::CbCr => &[16, 16],
        }
    }

    pub fn bin_count(&self) -> usize {
        self.layout().iter().product()
    }

    pub fn bin(&self, c: &[f64; 3]) -> usize {
        let q = |v: f64, n: usize| ((v / 256.0 * n as f64).floor().max(0.0) as usize).min(n - 1);
        match self {
            ColorSpace::YCbCr => (q(c[0], 8) * 8 + q(c[1], 8)) * 8 + q(c[2], 8),
            ColorSpace::CbCr => q(c[1], 16) * 16 + q(c[2], 16),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelHistogram {
    pub space: ColorSpace,
    pub bins: Vec<f64>,
}

impl KernelHistogram {
    /// Normalizes accumulated weights; `None` if there are none.
    pub fn from_weights(space: ColorSpace, mut bins: Vec<f64>) -> Option<Self> {
        let s: f64 = bins.iter().sum();
        if !(s > 0.0) {
            return None;
        }
        bins.iter_mut().for_each(|b| *b /= s);
        Some(Self { space, bins })
    }

    pub fn sum(&self) -> f64 {
        self.bins.iter().sum()
    }
}

/// Spatial kernel profile on the squared normalized radius, a Gaussian
/// with standard deviation half the bandwidth, truncated at the bandwidth.
pub fn kernel_profile(r2: f64) -> f64 {
    if r2 > 1.0 {
        0.0
    } else {
        (-2.0 * r2).exp()
    }
}

/// Color histogram of the disc of radius `bandwidth` around `center`,
/// sampling colors with `color(x, y)`.
pub fn kernel_histogram_by<F>(
    width: usize,
    height: usize,
    color: F,
    center: &ImagePoint,
    bandwidth: f64,
    space: ColorSpace,
) -> Result<KernelHistogram, SegmentationError>
where
    F: Fn(usize, usize) -> [f64; 3],
{
    let mut bins = vec![0.0; space.bin_count()];
    if bandwidth > 0.0 {
        let span = Rect::new(center.u - bandwidth, center.v - bandwidth, 2.0 * bandwidth + 1.0, 2.0 * bandwidth + 1.0);
        if let Some((xs, ys)) = span.pixel_span(width, height) {
            for y in ys {
                for x in xs.clone() {
                    let r2 = ((x as f64 - center.u).powi(2) + (y as f64 - center.v).powi(2)) / (bandwidth * bandwidth);
                    let k = kernel_profile(r2);
                    if k > 0.0 {
                        bins[space.bin(&color(x, y))] += k;
                    }
                }
            }
        }
    }
    KernelHistogram::from_weights(space, bins).ok_or(SegmentationError::EmptyKernelRegion)
}

pub fn kernel_histogram(
    frame: &RgbImage,
    center: &ImagePoint,
    bandwidth: f64,
    space: ColorSpace,
) -> Result<KernelHistogram, SegmentationError> {
    kernel_histogram_by(frame.width, frame.height, |x, y| frame.ycbcr(x, y), center, bandwidth, space)
}

/// Bhattacharyya coefficient of two histograms with the same layout.
pub fn bhattacharyya_similarity(h1: &KernelHistogram, h2: &KernelHistogram) -> Result<f64, SegmentationError> {
    if h1.space != h2.space || h1.bins.len() != h2.bins.len() {
        return Err(SegmentationError::LayoutMismatch);
    }
    let s: f64 = h1.bins.iter().zip(&h2.bins).map(|(a, b)| (a * b).sqrt()).sum();
    Ok(s.clamp(0.0, 1.0))
}

/// `sqrt(1 - coefficient)`.
pub fn bhattacharyya_distance(coefficient: f64) -> f64 {
    (1.0 - coefficient).max(0.0).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PenaltyConfig {
    pub simi_min: f64,
    pub simi_max: f64,
    /// Sub-kernels per region side (the region is split into a grid).
    pub kernel_grid: usize,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self { simi_min: 0.5, simi_max: 0.95, kernel_grid: 2 }
    }
}

impl PenaltyConfig {
    pub fn validate(&self) -> Result<(), SegmentationError> {
        if !(0.0 <= self.simi_min && self.simi_min < self.simi_max && self.simi_max <= 1.0) {
            return Err(SegmentationError::InvalidConfig("need 0 <= simi_min < simi_max <= 1".into()));
        }
        if self.kernel_grid == 0 {
            return Err(SegmentationError::InvalidConfig("kernel_grid must be positive".into()));
        }
        Ok(())
    }
}

pub fn penalty_weight(simi: f64, cfg: &PenaltyConfig) -> f64 {
    if simi < cfg.simi_min || simi >= cfg.simi_max {
        return 0.0;
    }
    let d = 1.0 - cfg.simi_min;
    (-9.0 * (1.0 - simi).powi(2) / (4.0 * d * d)).exp()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionFeedback {
    pub region: Rect,
    pub simi_ycbcr: f64,
    pub simi_cbcr: f64,
    pub simi: f64,
    pub w_pen: f64,
    /// Re-segmented area (the region grown by `1 + w_pen / 2`).
    pub grown: Rect,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MastOutcome {
    pub mask: ForegroundMask,
    pub regions: Vec<RegionFeedback>,
    /// Regions with no pixel inside the frame.
    pub skipped: usize,
}

/// Mean Bhattacharyya coefficient between frame and background histograms
/// over a grid of sub-kernels covering `region`.
fn region_similarity(
    frame: &RgbImage,
    model: &BackgroundModel,
    region: &Rect,
    grid: usize,
    space: ColorSpace,
) -> Option<f64> {
    let (cw, ch) = (region.width / grid as f64, region.height / grid as f64);
    let bw = (cw / 2.0).hypot(ch / 2.0);
    let mut sum = 0.0;
    let mut n = 0;
    for j in 0..grid {
        for i in 0..grid {
            let c = ImagePoint::new(region.left + (i as f64 + 0.5) * cw, region.top + (j as f64 + 0.5) * ch);
            let Ok(hf) = kernel_histogram(frame, &c, bw, space) else { continue };
            let Ok(hb) = kernel_histogram_by(model.width, model.height, |x, y| model.mean_at(x, y), &c, bw, space) else { continue };
            sum += bhattacharyya_similarity(&hf, &hb).ok()?;
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Re-segments each tracked region with thresholds scaled by
/// `1 - w_pen`, over the region grown by `1 + w_pen / 2`, and unions the
/// result with `mask`.
pub fn mast_feedback(
    frame: &RgbImage,
    model: &BackgroundModel,
    th: &SegmentationThresholds,
    mask: &ForegroundMask,
    regions: &[Rect],
    cfg: &PenaltyConfig,
) -> Result<MastOutcome, SegmentationError> {
    check_dims((model.width, model.height), frame)?;
    let mut out = mask.clone();
    let mut feedback = Vec::new();
    let mut skipped = 0;
    for region in regions {
        if region.pixel_span(frame.width, frame.height).is_none() {
            skipped += 1;
            continue;
        }
        let sy = region_similarity(frame, model, region, cfg.kernel_grid, ColorSpace::YCbCr);
        let sc = region_similarity(frame, model, region, cfg.kernel_grid, ColorSpace::CbCr);
        let (Some(sy), Some(sc)) = (sy, sc) else {
            skipped += 1;
            continue;
        };
        let simi = sy.max(sc);
        let w = penalty_weight(simi, cfg);
        let grown = region.scaled(1.0 + w / 2.0);
        if w > 0.0 {
            let local = th.scaled(1.0 - w);
            if let Some((xs, ys)) = grown.pixel_span(frame.width, frame.height) {
                for y in ys {
                    for x in xs.clone() {
                        let i = y * frame.width + x;
                        let c = frame.ycbcr(x, y);
                        if is_foreground(&c, &model.mean[i], &model.var[i], local.tau_bg) && !is_shadow(&c, &model.mean[i], &local) {
                            out.data[i] = true;
                        }
                    }
                }
            }
        }
        feedback.push(RegionFeedback { region: *region, simi_ycbcr: sy, simi_cbcr: sc, simi, w_pen: w, grown });
    }
    Ok(MastOutcome { mask: out, regions: feedback, skipped })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub bbox: Rect,
    pub area: usize,
}

/// 4-connected foreground components of at least `min_area` pixels, in
/// raster order of their first pixel. Boxes cover whole pixels.
pub fn connected_components(mask: &ForegroundMask, min_area: usize) -> Vec<Component> {
    let (w, h) = (mask.width, mask.height);
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !mask.data[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        let mut area = 0;
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            area += 1;
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
            let mut push = |j: usize| {
                if mask.data[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                push(i - 1);
            }
            if x + 1 < w {
                push(i + 1);
            }
            if y > 0 {
                push(i - w);
            }
            if y + 1 < h {
                push(i + w);
            }
        }
        if area >= min_area {
            let bbox = Rect::new(x0 as f64 - 0.5, y0 as f64 - 0.5, (x1 - x0 + 1) as f64, (y1 - y0 + 1) as f64);
            out.push(Component { bbox, area });
        }
    }
    out
}

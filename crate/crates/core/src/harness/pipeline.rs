//! Segmentation, blob detection and tracking chained per frame.
//!
//! Detections come from connected components of the preliminary
//! foreground. When MAST feedback is on, the boxes tracked in the previous
//! frame re-segment their regions with loosened thresholds, and the
//! refined mask is what the tracker sees. Loosened thresholds pass some
//! background noise, so the refined mask is not used to spawn tracks.

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::geometry::{CameraModel, Rect};
use crate::image::RgbImage;
use crate::segmentation::{
    connected_components, mast_feedback, segment, BackgroundModel, ForegroundMask, PenaltyConfig, SegmentationThresholds,
};
use crate::tracking::{FrameInput, TrackRecord, Tracker, TrackerConfig};
use crate::vehicle_model::GradientField;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub segmentation: SegmentationThresholds,
    pub mast: bool,
    pub penalty: PenaltyConfig,
    /// Smallest blob (pixels) reported as a detection.
    pub min_blob_area: usize,
    pub tracker: TrackerConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            segmentation: SegmentationThresholds::default(),
            mast: true,
            penalty: PenaltyConfig::default(),
            min_blob_area: 150,
            tracker: TrackerConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let c: Self = toml::from_str(text).map_err(|e| HarnessError::ConfigInvalid(e.to_string()))?;
        c.segmentation.validate().map_err(|e| HarnessError::ConfigInvalid(e.to_string()))?;
        c.tracker.validate().map_err(|e| HarnessError::ConfigInvalid(e.to_string()))?;
        Ok(c)
    }
}

#[derive(Debug, Clone)]
pub struct FrameResult {
    pub mask: ForegroundMask,
    pub detections: Vec<Rect>,
    pub records: Vec<TrackRecord>,
}

#[derive(Debug, Clone)]
pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub background: BackgroundModel,
    pub tracker: Tracker,
}

impl Pipeline {
    pub fn new(camera: CameraModel, background: &[RgbImage], cfg: PipelineConfig) -> Result<Self, HarnessError> {
        let bg = BackgroundModel::from_frames(background, 0.0).map_err(|e| HarnessError::ConfigInvalid(e.to_string()))?;
        let tracker = Tracker::new(camera, cfg.tracker.clone()).map_err(|e| HarnessError::ConfigInvalid(e.to_string()))?;
        Ok(Self { cfg, background: bg, tracker })
    }

    /// Preliminary and refined foreground of `frame`; the refinement
    /// works on the currently tracked boxes.
    pub fn segment(&self, frame: &RgbImage) -> Result<(ForegroundMask, ForegroundMask), HarnessError> {
        let err = |e: crate::segmentation::SegmentationError| HarnessError::ConfigInvalid(e.to_string());
        let base = segment(frame, &self.background, &self.cfg.segmentation).map_err(err)?;
        let regions: Vec<Rect> = self.tracker.tracks.iter().filter(|t| t.is_live()).map(|t| t.bbox).collect();
        if !self.cfg.mast || regions.is_empty() {
            return Ok((base.clone(), base));
        }
        let refined = mast_feedback(frame, &self.background, &self.cfg.segmentation, &base, &regions, &self.cfg.penalty).map_err(err)?.mask;
        Ok((base, refined))
    }

    pub fn step(&mut self, frame: &RgbImage) -> Result<FrameResult, HarnessError> {
        let (base, mask) = self.segment(frame)?;
        let detections: Vec<Rect> = connected_components(&base, self.cfg.min_blob_area).into_iter().map(|c| c.bbox).collect();
        let field = GradientField::from_image(frame);
        let records = self.tracker.step(&FrameInput { frame, field: &field, mask: &mask, detections: &detections });
        Ok(FrameResult { mask, detections, records })
    }
}

//! Constrained multiple-kernel tracking on the fitted 3D vehicle model.
//!
//! Every visible face of a track's model is a kernel with a color
//! histogram target. Poses are solved by projected gradient descent on a
//! cost mixing color dissimilarity and edge misfit, then fed to a CTRV
//! Kalman filter that also carries tracks through occlusions. Because the
//! kernels ride on a rigid model, the distance and angle constraints
//! between kernels hold exactly for every solved pose.

pub mod kalman;
pub mod kernels;
pub mod solver;

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Matrix5, Vector5};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use kalman::{CtrvFilter, MotionNoise};
pub use kernels::{
    init_kernels, rasterize_model, set_weights, ConstraintResiduals, CostBreakdown, CostContext, FrameBins, Kernel,
    KernelConstraints, KernelTerm, ModelRaster,
};
pub use solver::{pose_gradient, solve_pose_projected_gradient, PoseGradient, SolveOutcome, SolverConfig};

use crate::assignment::max_score_assignment;
use crate::geometry::{wrap_angle, CameraModel, ImagePoint, Rect};
use crate::image::RgbImage;
use crate::segmentation::{ColorSpace, ForegroundMask};
use crate::vehicle_model::{
    build_model, fit_model_emna, projected_bbox, score, DeformableModel, FitConfig, GradientField, Pose, ShapeParams,
    VehicleType,
};

/// Tracks (and ground truth) whose box has less than this share inside
/// the image are dropped.
pub const MIN_IN_FRAME: f64 = 0.3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrackingError {
    #[error("no visible kernel")]
    NoVisibleFaces,
    #[error("model does not project (vertex behind the camera)")]
    NotProjectable,
    #[error("invalid tracker configuration: {0}")]
    InvalidConfig(String),
    #[error("model error: {0}")]
    Model(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("i/o error: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrackStatus {
    Active,
    Occluded,
    Lost,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackerMode {
    /// Kernels, constraints and pose solving.
    Cmk,
    /// Kalman filter fed by detection boxes only.
    KalmanOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    pub mode: TrackerMode,
    /// Seconds between frames.
    pub dt: f64,
    pub max_occlusion_frames: usize,
    /// Refit the model when FES drops below this without occlusion.
    pub fes_refresh_threshold: f64,
    /// Half-range of the heading search on refit.
    pub orientation_search_deg: f64,
    /// Visible kernel mass required to count as unoccluded for a refit.
    pub refresh_min_visibility: f64,
    /// Occluded when the visible share of kernel area falls below this.
    pub occlusion_weight: f64,
    /// Occluded when the foreground share of the visible silhouette falls
    /// below this.
    pub occlusion_coverage: f64,
    pub solver: SolverConfig,
    pub motion: MotionNoise,
    pub measurement_sigma_m: f64,
    pub measurement_sigma_deg: f64,
    /// Initial speed uncertainty of a new track (m/s).
    pub init_sigma_speed: f64,
    pub min_kernel_pixels: usize,
    /// A detection spawns a track only if its IOU with every live track's
    /// box is at most this.
    pub spawn_max_overlap: f64,
    pub spawn_min_fes: f64,
    pub spawn_headings: usize,
    pub spawn_candidates: usize,
    /// Vehicle types tried when spawning.
    pub spawn_types: Vec<String>,
    /// Detections closer than this to the frame border do not spawn.
    pub spawn_border_margin: f64,
    /// IOU gate for detection-to-track association (Kalman-only mode).
    pub association_iou: f64,
    pub seed: u64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            mode: TrackerMode::Cmk,
            dt: 0.1,
            max_occlusion_frames: 30,
            fes_refresh_threshold: 0.3,
            orientation_search_deg: 10.0,
            refresh_min_visibility: 0.95,
            occlusion_weight: 0.3,
            occlusion_coverage: 0.4,
            solver: SolverConfig::default(),
            motion: MotionNoise::default(),
            measurement_sigma_m: 0.1,
            measurement_sigma_deg: 2.0,
            init_sigma_speed: 8.0,
            min_kernel_pixels: 20,
            spawn_max_overlap: 0.1,
            spawn_min_fes: 0.4,
            spawn_headings: 16,
            spawn_candidates: 3,
            spawn_types: VehicleType::ALL.iter().map(|t| t.label().to_string()).collect(),
            spawn_border_margin: 2.0,
            association_iou: 0.2,
            seed: 0,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<(), TrackingError> {
        let positive = [
            self.dt,
            self.fes_refresh_threshold,
            self.orientation_search_deg,
            self.refresh_min_visibility,
            self.occlusion_weight,
            self.occlusion_coverage,
            self.measurement_sigma_m,
            self.measurement_sigma_deg,
            self.init_sigma_speed,
            self.spawn_max_overlap,
            self.association_iou,
        ];
        if positive.iter().any(|v| !(*v > 0.0)) || self.max_occlusion_frames == 0 || self.spawn_headings == 0 || self.spawn_candidates == 0 {
            return Err(TrackingError::InvalidConfig("all thresholds and counts must be positive".into()));
        }
        if self.spawn_types.is_empty() {
            return Err(TrackingError::InvalidConfig("spawn_types is empty".into()));
        }
        for t in &self.spawn_types {
            VehicleType::from_label(t).ok_or_else(|| TrackingError::InvalidConfig(format!("unknown vehicle type {t:?}")))?;
        }
        self.solver.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self, TrackingError> {
        let c: Self = toml::from_str(text).map_err(|e| TrackingError::InvalidConfig(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    fn types(&self) -> Vec<VehicleType> {
        self.spawn_types.iter().filter_map(|t| VehicleType::from_label(t)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackState {
    pub id: u64,
    pub filter: CtrvFilter,
    pub model: DeformableModel,
    pub kernels: Vec<Kernel>,
    pub constraints: Option<KernelConstraints>,
    pub status: TrackStatus,
    pub occlusion_age: usize,
    /// Pose reported for the current frame.
    pub pose: Pose,
    pub fes: f64,
    pub bbox: Rect,
    /// Constraint residual of the last solved pose.
    pub residual: Option<f64>,
    pub refits: usize,
    pub last_converged: bool,
}

impl TrackState {
    pub fn predicted_pose(&self) -> Pose {
        Pose::new(self.filter.x(), self.filter.y(), self.filter.heading())
    }

    pub fn is_live(&self) -> bool {
        self.status != TrackStatus::Lost
    }
}

/// Per-frame inputs, shared read-only by every track.
#[derive(Debug, Clone, Copy)]
pub struct FrameInput<'a> {
    pub frame: &'a RgbImage,
    pub field: &'a GradientField,
    pub mask: &'a ForegroundMask,
    pub detections: &'a [Rect],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackRecord {
    pub frame: u64,
    pub id: u64,
    pub x_ground: f64,
    pub y_ground: f64,
    pub theta: f64,
    pub bb_left: f64,
    pub bb_top: f64,
    pub bb_width: f64,
    pub bb_height: f64,
    pub status: TrackStatus,
    pub fes: f64,
}

impl TrackRecord {
    pub fn bbox(&self) -> Rect {
        Rect::new(self.bb_left, self.bb_top, self.bb_width, self.bb_height)
    }
}

fn bbox_of(model: &DeformableModel, pose: &Pose, camera: &CameraModel) -> Option<Rect> {
    projected_bbox(model, pose, camera).ok().map(|(l, t, w, h)| Rect::new(l, t, w, h))
}

/// Moves `pose` on the ground so the bottom center of the model's
/// projected box lands on `target` (image coordinates).
fn align_bottom(model: &DeformableModel, pose: Pose, camera: &CameraModel, target: &ImagePoint) -> Option<Pose> {
    let mut p = pose;
    let goal = camera.back_project_ground(target).ok()?;
    for _ in 0..5 {
        let bb = bbox_of(model, &p, camera)?;
        let at = camera.back_project_ground(&ImagePoint::new(bb.left + bb.width / 2.0, bb.bottom())).ok()?;
        let (dx, dy) = (goal.x - at.x, goal.y - at.y);
        p = Pose::new(p.x + dx, p.y + dy, p.theta);
        if dx.hypot(dy) < 1e-4 {
            break;
        }
    }
    Some(p)
}

fn bottom_center(r: &Rect) -> ImagePoint {
    ImagePoint::new(r.left + r.width / 2.0, r.bottom())
}

/// Searches vehicle type and heading for a detection box, then refines the
/// best candidates with a pose-only model fit. Returns the best fit by FES.
pub fn spawn_fit(
    det: &Rect,
    camera: &CameraModel,
    field: &GradientField,
    cfg: &TrackerConfig,
) -> Option<(ShapeParams, Pose, f64)> {
    let foot = camera.back_project_ground(&bottom_center(det)).ok()?;
    let mut cands: Vec<(f64, ShapeParams, Pose)> = Vec::new();
    for t in cfg.types() {
        let shape = t.preset();
        let model = build_model(&shape).ok()?;
        for k in 0..cfg.spawn_headings {
            let theta = std::f64::consts::TAU * k as f64 / cfg.spawn_headings as f64;
            let Some(p) = align_bottom(&model, Pose::new(foot.x, foot.y, theta), camera, &bottom_center(det)) else { continue };
            let Some(bb) = bbox_of(&model, &p, camera) else { continue };
            cands.push((bb.iou(det), shape, p));
        }
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut best: Option<(ShapeParams, Pose, f64)> = None;
    for (i, (_, shape, pose)) in cands.iter().take(cfg.spawn_candidates).enumerate() {
        let fc = FitConfig::pose_only(cfg.seed.wrapping_add(i as u64));
        let Ok(r) = fit_model_emna(field, camera, pose, shape, &fc) else { continue };
        if best.as_ref().is_none_or(|b| r.fes.total > b.2) {
            best = Some((r.shape, r.pose, r.fes.total));
        }
    }
    // Box overlap cannot tell front from back; refine the reversed pose too.
    if let Some((shape, pose, fes)) = best {
        let flipped = Pose::new(pose.x, pose.y, wrap_angle(pose.theta + std::f64::consts::PI));
        let fc = FitConfig::pose_only(cfg.seed.wrapping_add(cfg.spawn_candidates as u64));
        if let Ok(r) = fit_model_emna(field, camera, &flipped, &shape, &fc) {
            if r.fes.total > fes {
                best = Some((r.shape, r.pose, r.fes.total));
            }
        }
    }
    best.filter(|b| b.2 >= cfg.spawn_min_fes)
}

fn new_track(
    id: u64,
    shape: &ShapeParams,
    pose: Pose,
    fes: f64,
    camera: &CameraModel,
    bins: Option<&FrameBins>,
    exclude: Option<&[bool]>,
    cfg: &TrackerConfig,
) -> Option<TrackState> {
    let model = build_model(shape).ok()?;
    let (kernels, constraints) = match bins {
        Some(b) => {
            let (k, c) = init_kernels(&model, &pose, camera, b, exclude, cfg.min_kernel_pixels).ok()?;
            (k, Some(c))
        }
        None => (Vec::new(), None),
    };
    let sp = cfg.measurement_sigma_m;
    let sh = cfg.measurement_sigma_deg.to_radians();
    let cov = Matrix5::from_diagonal(&Vector5::new(sp * sp, sp * sp, cfg.init_sigma_speed.powi(2), sh * sh, 0.3f64.powi(2)));
    let filter = CtrvFilter::new(Vector5::new(pose.x, pose.y, 0.0, pose.theta, 0.0), cov);
    let bbox = bbox_of(&model, &pose, camera)?;
    Some(TrackState {
        id,
        filter,
        model,
        kernels,
        constraints,
        status: TrackStatus::Active,
        occlusion_age: 0,
        pose,
        fes,
        bbox,
        residual: None,
        refits: 0,
        last_converged: true,
    })
}

/// Visible-surface ownership of the image by the tracks' predicted poses.
struct Ownership {
    depth: Vec<f64>,
    owner: Vec<usize>,
}

impl Ownership {
    fn build(rasters: &[Option<ModelRaster>], len: usize) -> Self {
        let mut o = Self { depth: vec![f64::INFINITY; len], owner: vec![usize::MAX; len] };
        for (i, r) in rasters.iter().enumerate() {
            let Some(r) = r else { continue };
            for h in &r.hits {
                if h.depth < o.depth[h.pixel] {
                    o.depth[h.pixel] = h.depth;
                    o.owner[h.pixel] = i;
                }
            }
        }
        o
    }

    fn exclude_for(&self, track: usize) -> Vec<bool> {
        self.owner.iter().map(|&o| o != usize::MAX && o != track).collect()
    }
}

fn in_frame_fraction(bb: &Rect, w: usize, h: usize) -> f64 {
    let frame = Rect::new(-0.5, -0.5, w as f64, h as f64);
    if bb.area() <= 0.0 {
        return 0.0;
    }
    bb.intersection_area(&frame) / bb.area()
}

/// Advances one track through a frame in CMK mode. Inputs shared by all
/// tracks are read-only, so tracks are independent of each other's order.
fn step_cmk(
    mut t: TrackState,
    index: usize,
    raster: Option<&ModelRaster>,
    own: &Ownership,
    input: &FrameInput,
    bins: &FrameBins,
    camera: &CameraModel,
    cfg: &TrackerConfig,
) -> TrackState {
    let pred = t.predicted_pose();
    let Some(raster) = raster else {
        t.status = TrackStatus::Lost;
        return t;
    };
    let exclude = own.exclude_for(index);
    let expected = raster.face_pixel_counts(t.model.faces.len(), None);
    let visible = raster.face_pixel_counts(t.model.faces.len(), Some(&exclude));
    let exp_k: f64 = t.kernels.iter().map(|k| expected[k.face_id] as f64).sum();
    let vis_k: Vec<f64> = t.kernels.iter().map(|k| visible[k.face_id] as f64).collect();
    let mass = if exp_k > 0.0 { vis_k.iter().sum::<f64>() / exp_k } else { 0.0 };
    let (mut seen, mut fg) = (0usize, 0usize);
    for h in raster.hits.iter().filter(|h| !exclude[h.pixel]) {
        seen += 1;
        fg += input.mask.data[h.pixel] as usize;
    }
    let coverage = if seen > 0 { fg as f64 / seen as f64 } else { 0.0 };
    let occluded = mass < cfg.occlusion_weight || coverage < cfg.occlusion_coverage;

    let mut solved = None;
    if !occluded && set_weights(&mut t.kernels, &vis_k).is_ok() {
        let ctx = CostContext {
            model: &t.model,
            kernels: &t.kernels,
            camera,
            bins,
            field: input.field,
            exclude: Some(&exclude),
        };
        if let Ok(out) = solve_pose_projected_gradient(&ctx, &pred, &cfg.solver) {
            solved = Some(out);
        }
    }
    match solved {
        Some(out) => {
            let mut pose = out.pose;
            let mut fes = out.cost.fes.total;
            t.last_converged = out.converged;
            if fes < cfg.fes_refresh_threshold && mass >= cfg.refresh_min_visibility {
                let mut fc = FitConfig::new(&t.model.shape, cfg.seed.wrapping_add(t.id * 7919 + t.refits as u64));
                fc.bands = vec![4.0, 1.0];
                fc.theta_window = Some(cfg.orientation_search_deg.to_radians());
                let init = Pose::new(pose.x, pose.y, pred.theta);
                if let Ok(r) = fit_model_emna(input.field, camera, &init, &t.model.shape, &fc) {
                    if r.fes.total > fes {
                        if let Ok(model) = build_model(&r.shape) {
                            if let Ok((k, c)) = init_kernels(&model, &r.pose, camera, bins, Some(&exclude), cfg.min_kernel_pixels) {
                                t.model = model;
                                t.kernels = k;
                                t.constraints = Some(c);
                                pose = r.pose;
                                fes = r.fes.total;
                                t.refits += 1;
                            }
                        }
                    }
                }
            }
            let sm = cfg.measurement_sigma_m;
            t.filter.update(&[0, 1, 3], &[pose.x, pose.y, pose.theta], &[sm, sm, cfg.measurement_sigma_deg.to_radians()]);
            t.residual = t.constraints.as_ref().map(|c| c.residuals(&t.kernels, &pose, t.model.shape.ground_clearance).max_abs());
            t.pose = pose;
            t.fes = fes;
            t.status = TrackStatus::Active;
            t.occlusion_age = 0;
        }
        None => {
            t.pose = pred;
            t.fes = score(input.field, camera, &t.model.shape, &pred).map_or(0.0, |r| r.total);
            t.status = TrackStatus::Occluded;
            t.occlusion_age += 1;
            t.residual = None;
        }
    }
    t
}

/// One frame of tracking: Kalman prediction, per-track pose solving (or
/// association in Kalman-only mode), occlusion coasting, and spawning of
/// tracks for unexplained detections.
pub fn track_frame(
    states: Vec<TrackState>,
    input: &FrameInput,
    camera: &CameraModel,
    cfg: &TrackerConfig,
    next_id: &mut u64,
) -> Vec<TrackState> {
    let (w, h) = (input.frame.width, input.frame.height);
    let mut states: Vec<TrackState> = states.into_iter().filter(|s| s.is_live()).collect();
    for s in states.iter_mut() {
        s.filter.predict(cfg.dt, &cfg.motion);
    }
    let bins = (cfg.mode == TrackerMode::Cmk).then(|| FrameBins::new(input.frame, ColorSpace::YCbCr));
    let mut states: Vec<TrackState> = match cfg.mode {
        TrackerMode::Cmk => {
            let bins = bins.as_ref().expect("bins exist in CMK mode");
            let rasters: Vec<Option<ModelRaster>> =
                states.iter().map(|s| rasterize_model(&s.model, &s.predicted_pose(), camera, w, h).ok()).collect();
            let own = Ownership::build(&rasters, w * h);
            states
                .into_iter()
                .enumerate()
                .map(|(i, s)| step_cmk(s, i, rasters[i].as_ref(), &own, input, bins, camera, cfg))
                .collect()
        }
        TrackerMode::KalmanOnly => step_kalman_only(states, input, camera, cfg),
    };

    for s in states.iter_mut() {
        if s.status == TrackStatus::Lost {
            continue;
        }
        match bbox_of(&s.model, &s.pose, camera) {
            Some(bb) if in_frame_fraction(&bb, w, h) >= MIN_IN_FRAME => s.bbox = bb,
            _ => s.status = TrackStatus::Lost,
        }
        if s.occlusion_age > cfg.max_occlusion_frames {
            s.status = TrackStatus::Lost;
        }
    }

    // Spawn from detections no live track explains.
    let mut dets: Vec<Rect> = input.detections.to_vec();
    dets.sort_by(|a, b| a.left.total_cmp(&b.left).then(a.top.total_cmp(&b.top)));
    let m = cfg.spawn_border_margin;
    for det in dets {
        let inside = det.left >= m && det.top >= m && det.right() <= w as f64 - 1.0 - m && det.bottom() <= h as f64 - 1.0 - m;
        let explained = states
            .iter()
            .filter(|s| s.is_live())
            .any(|s| s.bbox.iou(&det) > cfg.spawn_max_overlap || s.bbox.contains_point(&det.center()));
        if !inside || explained {
            continue;
        }
        let Some((shape, pose, fes)) = spawn_fit(&det, camera, input.field, cfg) else { continue };
        let exclude = bins.as_ref().map(|_| {
            let rasters: Vec<Option<ModelRaster>> = states
                .iter()
                .filter(|s| s.is_live())
                .map(|s| rasterize_model(&s.model, &s.pose, camera, w, h).ok())
                .collect();
            let own = Ownership::build(&rasters, w * h);
            own.owner.iter().map(|&o| o != usize::MAX).collect::<Vec<bool>>()
        });
        if let Some(t) = new_track(*next_id, &shape, pose, fes, camera, bins.as_ref(), exclude.as_deref(), cfg) {
            if states.iter().filter(|s| s.is_live()).any(|s| s.bbox.iou(&t.bbox) > 0.3) {
                continue;
            }
            *next_id += 1;
            states.push(t);
        }
    }
    states
}

fn step_kalman_only(states: Vec<TrackState>, input: &FrameInput, camera: &CameraModel, cfg: &TrackerConfig) -> Vec<TrackState> {
    let preds: Vec<Option<Rect>> = states.iter().map(|s| bbox_of(&s.model, &s.predicted_pose(), camera)).collect();
    let scores: Vec<Vec<f64>> = preds
        .iter()
        .map(|p| input.detections.iter().map(|d| p.map_or(0.0, |b| b.iou(d))).collect())
        .collect();
    let assign = if input.detections.is_empty() { vec![None; states.len()] } else { max_score_assignment(&scores, cfg.association_iou) };
    states
        .into_iter()
        .zip(assign)
        .map(|(mut s, a)| {
            let pred = s.predicted_pose();
            let meas = a.and_then(|j| align_bottom(&s.model, pred, camera, &bottom_center(&input.detections[j])));
            match meas {
                Some(z) => {
                    let sm = cfg.measurement_sigma_m;
                    s.filter.update(&[0, 1], &[z.x, z.y], &[sm, sm]);
                    s.status = TrackStatus::Active;
                    s.occlusion_age = 0;
                }
                None => {
                    s.status = TrackStatus::Occluded;
                    s.occlusion_age += 1;
                }
            }
            s.pose = s.predicted_pose();
            s.fes = score(input.field, camera, &s.model.shape, &s.pose).map_or(0.0, |r| r.total);
            s
        })
        .collect()
}

/// Stateful driver around [`track_frame`].
#[derive(Debug, Clone)]
pub struct Tracker {
    pub cfg: TrackerConfig,
    pub camera: CameraModel,
    pub tracks: Vec<TrackState>,
    next_id: u64,
    frame: u64,
}

impl Tracker {
    pub fn new(camera: CameraModel, cfg: TrackerConfig) -> Result<Self, TrackingError> {
        cfg.validate()?;
        Ok(Self { cfg, camera, tracks: Vec::new(), next_id: 1, frame: 0 })
    }

    /// Processes the next frame and returns the records of live tracks.
    pub fn step(&mut self, input: &FrameInput) -> Vec<TrackRecord> {
        let states = std::mem::take(&mut self.tracks);
        self.tracks = track_frame(states, input, &self.camera, &self.cfg, &mut self.next_id);
        let out = self.records();
        self.frame += 1;
        out
    }

    pub fn frame_index(&self) -> u64 {
        self.frame
    }

    pub fn records(&self) -> Vec<TrackRecord> {
        self.tracks
            .iter()
            .filter(|t| t.is_live())
            .map(|t| TrackRecord {
                frame: self.frame,
                id: t.id,
                x_ground: t.pose.x,
                y_ground: t.pose.y,
                theta: t.pose.theta,
                bb_left: t.bbox.left,
                bb_top: t.bbox.top,
                bb_width: t.bbox.width,
                bb_height: t.bbox.height,
                status: t.status,
                fes: t.fes,
            })
            .collect()
    }
}

/// Track CSV with header
/// `frame,id,x_ground,y_ground,theta,bb_left,bb_top,bb_width,bb_height,status,fes`.
pub fn write_tracks_csv<W: Write>(w: W, records: &[TrackRecord]) -> Result<(), TrackingError> {
    let mut wr = csv::Writer::from_writer(w);
    for r in records {
        wr.serialize(r).map_err(|e| TrackingError::Io(e.to_string()))?;
    }
    wr.flush().map_err(|e| TrackingError::Io(e.to_string()))
}

pub fn read_tracks_csv<R: Read>(r: R) -> Result<Vec<TrackRecord>, TrackingError> {
    let mut rd = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for (i, rec) in rd.deserialize().enumerate() {
        out.push(rec.map_err(|e: csv::Error| TrackingError::Parse { line: i + 2, message: e.to_string() })?);
    }
    Ok(out)
}

pub fn save_tracks(path: &Path, records: &[TrackRecord]) -> Result<(), TrackingError> {
    let f = std::fs::File::create(path).map_err(|e| TrackingError::Io(format!("{}: {e}", path.display())))?;
    write_tracks_csv(f, records)
}

pub fn load_tracks(path: &Path) -> Result<Vec<TrackRecord>, TrackingError> {
    let f = std::fs::File::open(path).map_err(|e| TrackingError::Io(format!("{}: {e}", path.display())))?;
    read_tracks_csv(f)
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_and_header() {
        let r = TrackRecord {
            frame: 3,
            id: 2,
            x_ground: 1.5,
            y_ground: -0.25,
            theta: 0.1,
            bb_left: 10.0,
            bb_top: 20.0,
            bb_width: 30.0,
            bb_height: 40.0,
            status: TrackStatus::Occluded,
            fes: 0.75,
        };
        let mut buf = Vec::new();
        write_tracks_csv(&mut buf, std::slice::from_ref(&r)).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("frame,id,x_ground,y_ground,theta,bb_left,bb_top,bb_width,bb_height,status,fes\n"));
        assert!(text.contains(",occluded,"));
        assert_eq!(read_tracks_csv(&buf[..]).unwrap(), vec![r]);
        let bad = b"frame,id,x_ground,y_ground,theta,bb_left,bb_top,bb_width,bb_height,status,fes\n1,2,3,4,5,6,7,8,9,flying,1\n";
        assert!(matches!(read_tracks_csv(&bad[..]), Err(TrackingError::Parse { line: 2, .. })));
    }

    #[test]
    fn config_toml_and_validation() {
        let c = TrackerConfig::from_toml("mode = \"kalman_only\"\nmax_occlusion_frames = 12\n[solver]\nmax_iterations = 20\n").unwrap();
        assert_eq!(c.mode, TrackerMode::KalmanOnly);
        assert_eq!(c.max_occlusion_frames, 12);
        assert_eq!(c.solver.max_iterations, 20);
        assert!(TrackerConfig::from_toml("spawn_types = [\"bus\"]\n").is_err());
        assert!(TrackerConfig::from_toml("dt = 0\n").is_err());
        assert!(TrackerConfig::from_toml("bogus = 1\n").is_err());
    }
}

//! Scenario configuration and the synthetic scene generator.
//!
//! Vehicles follow constant turn rate paths and are drawn with the
//! deformable model; pedestrians are vertical capsules walking straight
//! lines; occluders are static rectangles that belong to the background.
//! Frames are rendered independently, each from its own RNG stream, so
//! any frame can be regenerated on its own.

use std::io::Write;
use std::path::Path;

use nalgebra::Vector5;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::render::{add_noise, fill_rect, render_capsule, render_vehicle, VehiclePalette};
use super::HarnessError;
use crate::calibration::{write_observations, PedestrianObservation};
use crate::geometry::{CameraModel, ImagePoint, Point3, Rect};
use crate::image::{GrayImage, RgbImage};
use crate::segmentation::ForegroundMask;
use crate::tracking::kalman::motion;
use crate::tracking::MIN_IN_FRAME;
use crate::vehicle_model::{build_model, projected_bbox, DeformableModel, Pose, ShapeParams, VehicleType};

const VEHICLE_LABELS: usize = 200;
const PEDESTRIAN_LABEL_BASE: u8 = 201;
const BACKGROUND_STREAM: u64 = 1 << 32;
const OBSERVATION_STREAM: u64 = 1 << 33;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSpec {
    pub focal: f64,
    pub eye: [f64; 3],
    pub target: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleSpec {
    #[serde(default = "default_vehicle_type")]
    pub vehicle_type: String,
    /// Overrides the preset shape of `vehicle_type`.
    #[serde(default)]
    pub shape: Option<ShapeParams>,
    pub start: [f64; 2],
    #[serde(default)]
    pub heading_deg: f64,
    /// m/s along the heading.
    #[serde(default)]
    pub speed: f64,
    #[serde(default)]
    pub turn_rate_deg: f64,
    /// (Cb, Cr) of the paint; defaults to a palette picked by index.
    #[serde(default)]
    pub chroma: Option<[f64; 2]>,
    #[serde(default)]
    pub first_frame: usize,
    /// Last frame the vehicle exists in (inclusive).
    #[serde(default)]
    pub last_frame: Option<usize>,
}

fn default_vehicle_type() -> String {
    "sedan".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PedestrianSpec {
    pub start: [f64; 2],
    #[serde(default)]
    pub heading_deg: f64,
    #[serde(default = "default_walk")]
    pub speed: f64,
    #[serde(default = "default_height")]
    pub height: f64,
    /// Body half-width in metres.
    #[serde(default = "default_radius")]
    pub radius: f64,
    #[serde(default = "default_person_color")]
    pub color: [u8; 3],
}

fn default_walk() -> f64 {
    1.4
}
fn default_height() -> f64 {
    1.7
}
fn default_radius() -> f64 {
    0.25
}
fn default_person_color() -> [u8; 3] {
    [200, 60, 60]
}

/// Pedestrians placed at random visible ground points, walking in random
/// directions; heights cycle through `heights`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomPedestrians {
    pub count: usize,
    #[serde(default = "default_heights")]
    pub heights: Vec<f64>,
    #[serde(default = "default_walk")]
    pub speed: f64,
}

fn default_heights() -> Vec<f64> {
    vec![1.7]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OccluderSpec {
    /// `[left, top, width, height]` in pixels.
    pub rect: [f64; 4],
    #[serde(default = "default_occluder_color")]
    pub color: [u8; 3],
}

fn default_occluder_color() -> [u8; 3] {
    [40, 40, 40]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_height_px")]
    pub height: usize,
    #[serde(default = "default_frames")]
    pub frames: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    /// Object-free frames rendered for background modelling.
    #[serde(default = "default_background_frames")]
    pub background_frames: usize,
    #[serde(default = "default_background")]
    pub background: [u8; 3],
    #[serde(default)]
    pub pixel_noise: f64,
    /// Std of the Gaussian jitter on observed head and foot points (px).
    #[serde(default)]
    pub head_foot_jitter: f64,
    pub camera: CameraSpec,
    #[serde(default)]
    pub vehicles: Vec<VehicleSpec>,
    #[serde(default)]
    pub pedestrians: Vec<PedestrianSpec>,
    #[serde(default)]
    pub random_pedestrians: Option<RandomPedestrians>,
    #[serde(default)]
    pub occluders: Vec<OccluderSpec>,
}

fn default_width() -> usize {
    640
}
fn default_height_px() -> usize {
    360
}
fn default_frames() -> usize {
    50
}
fn default_dt() -> f64 {
    0.1
}
fn default_background_frames() -> usize {
    10
}
fn default_background() -> [u8; 3] {
    [90, 90, 90]
}

impl ScenarioConfig {
    /// An empty scene with the default image size and a camera looking
    /// down at the origin.
    pub fn empty(seed: u64) -> Self {
        Self {
            seed,
            width: default_width(),
            height: default_height_px(),
            frames: default_frames(),
            dt: default_dt(),
            background_frames: default_background_frames(),
            background: default_background(),
            pixel_noise: 0.0,
            head_foot_jitter: 0.0,
            camera: CameraSpec { focal: 500.0, eye: [-5.0, -13.0, 7.0], target: [0.0, 0.0, 0.0] },
            vehicles: Vec::new(),
            pedestrians: Vec::new(),
            random_pedestrians: None,
            occluders: Vec::new(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let c: Self = toml::from_str(text).map_err(|e| HarnessError::ConfigInvalid(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::ConfigInvalid(m.into()));
        if self.width < 2 || self.height < 2 {
            return bad("image must be at least 2x2");
        }
        if !(self.dt > 0.0) || !(self.camera.focal > 0.0) {
            return bad("dt and focal must be positive");
        }
        if !(self.pixel_noise >= 0.0) || !(self.head_foot_jitter >= 0.0) {
            return bad("noise levels must be non-negative");
        }
        if self.vehicles.len() > VEHICLE_LABELS {
            return bad("too many vehicles");
        }
        for v in &self.vehicles {
            if VehicleType::from_label(&v.vehicle_type).is_none() {
                return Err(HarnessError::ConfigInvalid(format!("unknown vehicle type {:?}", v.vehicle_type)));
            }
            if let Some(s) = &v.shape {
                s.validate().map_err(|e| HarnessError::ConfigInvalid(e.to_string()))?;
            }
            if v.last_frame.is_some_and(|l| l < v.first_frame) {
                return bad("vehicle last_frame precedes first_frame");
            }
        }
        for p in &self.pedestrians {
            if !(p.height > 0.0) || !(p.radius > 0.0) {
                return bad("pedestrian height and radius must be positive");
            }
        }
        if let Some(r) = &self.random_pedestrians {
            if r.heights.is_empty() || r.heights.iter().any(|h| !(*h > 0.0)) {
                return bad("random pedestrian heights must be positive");
            }
        }
        self.camera()?;
        Ok(())
    }

    pub fn camera(&self) -> Result<CameraModel, HarnessError> {
        let [ex, ey, ez] = self.camera.eye;
        let [tx, ty, tz] = self.camera.target;
        CameraModel::look_at(
            self.camera.focal,
            (self.width as f64 - 1.0) / 2.0,
            (self.height as f64 - 1.0) / 2.0,
            Point3::new(ex, ey, ez),
            Point3::new(tx, ty, tz),
        )
        .map_err(|e| HarnessError::ConfigInvalid(format!("camera: {e}")))
    }
}

/// Ground truth of one vehicle in one frame. The box is the full
/// projected model; `visibility` is the unoccluded share of its pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleGt {
    pub frame: u64,
    pub id: u64,
    pub x_ground: f64,
    pub y_ground: f64,
    pub theta: f64,
    pub bb_left: f64,
    pub bb_top: f64,
    pub bb_width: f64,
    pub bb_height: f64,
    pub visibility: f64,
}

impl VehicleGt {
    pub fn bbox(&self) -> Rect {
        Rect::new(self.bb_left, self.bb_top, self.bb_width, self.bb_height)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PedestrianGt {
    pub frame: u64,
    pub track_id: u64,
    pub head_u: f64,
    pub head_v: f64,
    pub foot_u: f64,
    pub foot_v: f64,
    pub x_ground: f64,
    pub y_ground: f64,
    pub height: f64,
}

#[derive(Debug, Clone)]
pub struct RenderedFrame {
    pub image: RgbImage,
    /// Per-pixel object label: 0 background, vehicle `k` is `k + 1`.
    pub labels: GrayImage,
    pub vehicles: Vec<VehicleGt>,
}

impl RenderedFrame {
    pub fn foreground(&self) -> ForegroundMask {
        let mut m = ForegroundMask::new(self.labels.width, self.labels.height);
        for (o, &l) in m.data.iter_mut().zip(&self.labels.data) {
            *o = l != 0;
        }
        m
    }
}

#[derive(Debug, Clone)]
pub struct Simulator {
    pub cfg: ScenarioConfig,
    pub camera: CameraModel,
    models: Vec<DeformableModel>,
    palettes: Vec<VehiclePalette>,
    pedestrians: Vec<PedestrianSpec>,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

impl Simulator {
    pub fn new(cfg: ScenarioConfig) -> Result<Self, HarnessError> {
        cfg.validate()?;
        let camera = cfg.camera()?;
        let mut models = Vec::new();
        let mut palettes = Vec::new();
        for (k, v) in cfg.vehicles.iter().enumerate() {
            let shape = v.shape.unwrap_or_else(|| VehicleType::from_label(&v.vehicle_type).expect("validated").preset());
            models.push(build_model(&shape).map_err(|e| HarnessError::ConfigInvalid(e.to_string()))?);
            palettes.push(match v.chroma {
                Some([cb, cr]) => VehiclePalette::with_chroma(cb, cr),
                None => VehiclePalette::nth(k),
            });
        }
        let mut pedestrians = cfg.pedestrians.clone();
        if let Some(r) = &cfg.random_pedestrians {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let (w, h) = (cfg.width as f64, cfg.height as f64);
            for k in 0..r.count {
                let q = ImagePoint::new(rng.random_range(0.15 * w..0.85 * w), rng.random_range(0.45 * h..0.93 * h));
                let heading: f64 = rng.random_range(0.0..360.0);
                let Ok(start) = camera.back_project_ground(&q) else { continue };
                pedestrians.push(PedestrianSpec {
                    start: [start.x, start.y],
                    heading_deg: heading,
                    speed: r.speed,
                    height: r.heights[k % r.heights.len()],
                    radius: default_radius(),
                    color: default_person_color(),
                });
            }
        }
        Ok(Self { cfg, camera, models, palettes, pedestrians })
    }

    pub fn model(&self, k: usize) -> &DeformableModel {
        &self.models[k]
    }

    pub fn pedestrian_specs(&self) -> &[PedestrianSpec] {
        &self.pedestrians
    }

    /// Pose of vehicle `k` at frame `f`, if it exists then.
    pub fn vehicle_pose(&self, k: usize, f: usize) -> Option<Pose> {
        let v = &self.cfg.vehicles[k];
        if f < v.first_frame || v.last_frame.is_some_and(|l| f > l) {
            return None;
        }
        let s = Vector5::new(v.start[0], v.start[1], v.speed, v.heading_deg.to_radians(), v.turn_rate_deg.to_radians());
        let (s, _) = motion(&s, (f - v.first_frame) as f64 * self.cfg.dt);
        Some(Pose::new(s[0], s[1], s[3]))
    }

    /// Exact head and foot of pedestrian `k` at frame `f`.
    pub fn pedestrian_points(&self, k: usize, f: usize) -> Option<(Point3, ImagePoint, ImagePoint, f64)> {
        let p = &self.pedestrians[k];
        let d = p.speed * self.cfg.dt * f as f64;
        let th = p.heading_deg.to_radians();
        let g = Point3::new(p.start[0] + d * th.cos(), p.start[1] + d * th.sin(), 0.0);
        let (foot, depth) = self.camera.project(&g).ok()?;
        let (head, _) = self.camera.project(&Point3::new(g.x, g.y, p.height)).ok()?;
        Some((g, head, foot, depth))
    }

    fn background_image(&self) -> RgbImage {
        let mut img = RgbImage::filled(self.cfg.width, self.cfg.height, self.cfg.background);
        for o in &self.cfg.occluders {
            let [l, t, w, h] = o.rect;
            fill_rect(&mut img, None, (l, t, w, h), o.color);
        }
        img
    }

    /// Object-free frame `k` for background modelling.
    pub fn background_frame(&self, k: usize) -> RgbImage {
        let mut img = self.background_image();
        add_noise(&mut img, self.cfg.pixel_noise, &mut stream_rng(self.cfg.seed, BACKGROUND_STREAM + k as u64));
        img
    }

    pub fn render_frame(&self, f: usize) -> RenderedFrame {
        let (w, h) = (self.cfg.width, self.cfg.height);
        let mut img = RgbImage::filled(w, h, self.cfg.background);
        let mut labels = GrayImage::new(w, h);
        enum Item {
            Vehicle(usize, Pose),
            Person(usize, ImagePoint, ImagePoint, f64),
        }
        let mut items: Vec<(f64, Item)> = Vec::new();
        for k in 0..self.models.len() {
            if let Some(p) = self.vehicle_pose(k, f) {
                if let Ok((_, d)) = self.camera.project(&Point3::new(p.x, p.y, 0.0)) {
                    items.push((d, Item::Vehicle(k, p)));
                }
            }
        }
        for k in 0..self.pedestrians.len() {
            if let Some((_, head, foot, d)) = self.pedestrian_points(k, f) {
                let r = self.pedestrians[k].radius * self.camera.fx / d;
                items.push((d, Item::Person(k, head, foot, r)));
            }
        }
        items.sort_by(|a, b| b.0.total_cmp(&a.0));
        for (_, it) in &items {
            match it {
                Item::Vehicle(k, p) => {
                    render_vehicle(&mut img, Some((&mut labels, *k as u8 + 1)), &self.models[*k], p, &self.camera, &self.palettes[*k]);
                }
                Item::Person(k, head, foot, r) => {
                    let id = PEDESTRIAN_LABEL_BASE + (*k % 54) as u8;
                    render_capsule(&mut img, Some((&mut labels, id)), head, foot, *r, self.pedestrians[*k].color);
                }
            }
        }
        for o in &self.cfg.occluders {
            let [l, t, ow, oh] = o.rect;
            fill_rect(&mut img, Some((&mut labels, 0)), (l, t, ow, oh), o.color);
        }
        add_noise(&mut img, self.cfg.pixel_noise, &mut stream_rng(self.cfg.seed, f as u64));

        let mut visible = vec![0usize; self.models.len()];
        for &l in &labels.data {
            if l != 0 && (l as usize) <= VEHICLE_LABELS {
                visible[l as usize - 1] += 1;
            }
        }
        let frame_rect = Rect::new(-0.5, -0.5, w as f64, h as f64);
        let mut vehicles = Vec::new();
        for (_, it) in &items {
            let Item::Vehicle(k, p) = it else { continue };
            let Ok((l, t, bw, bh)) = projected_bbox(&self.models[*k], p, &self.camera) else { continue };
            let bb = Rect::new(l, t, bw, bh);
            if bb.area() <= 0.0 || bb.intersection_area(&frame_rect) / bb.area() < MIN_IN_FRAME {
                continue;
            }
            let mut solo_img = RgbImage::new(w, h);
            let mut solo = GrayImage::new(w, h);
            render_vehicle(&mut solo_img, Some((&mut solo, 1)), &self.models[*k], p, &self.camera, &self.palettes[*k]);
            let full = solo.data.iter().filter(|&&v| v == 1).count();
            vehicles.push(VehicleGt {
                frame: f as u64,
                id: *k as u64 + 1,
                x_ground: p.x,
                y_ground: p.y,
                theta: p.theta,
                bb_left: l,
                bb_top: t,
                bb_width: bw,
                bb_height: bh,
                visibility: if full > 0 { visible[*k] as f64 / full as f64 } else { 0.0 },
            });
        }
        vehicles.sort_by_key(|v| v.id);
        RenderedFrame { image: img, labels, vehicles }
    }

    /// Exact pedestrian head and foot points that fall inside the image.
    pub fn pedestrian_gt(&self) -> Vec<PedestrianGt> {
        let mut out = Vec::new();
        for f in 0..self.cfg.frames {
            for k in 0..self.pedestrians.len() {
                let Some((g, head, foot, _)) = self.pedestrian_points(k, f) else { continue };
                if self.inside(&head) && self.inside(&foot) {
                    out.push(PedestrianGt {
                        frame: f as u64,
                        track_id: k as u64,
                        head_u: head.u,
                        head_v: head.v,
                        foot_u: foot.u,
                        foot_v: foot.v,
                        x_ground: g.x,
                        y_ground: g.y,
                        height: self.pedestrians[k].height,
                    });
                }
            }
        }
        out
    }

    /// Head and foot observations with jitter; points leaving the image
    /// are dropped.
    pub fn observations(&self) -> Vec<PedestrianObservation> {
        let mut rng = stream_rng(self.cfg.seed, OBSERVATION_STREAM);
        let noise = Normal::new(0.0, self.cfg.head_foot_jitter.max(f64::MIN_POSITIVE)).expect("finite jitter");
        let mut out = Vec::new();
        for g in self.pedestrian_gt() {
            let mut j = |u: f64, v: f64| {
                if self.cfg.head_foot_jitter > 0.0 {
                    ImagePoint::new(u + noise.sample(&mut rng), v + noise.sample(&mut rng))
                } else {
                    ImagePoint::new(u, v)
                }
            };
            let head = j(g.head_u, g.head_v);
            let foot = j(g.foot_u, g.foot_v);
            if self.inside(&head) && self.inside(&foot) {
                out.push(PedestrianObservation { frame_id: g.frame, track_id: g.track_id, head, foot });
            }
        }
        out
    }

    fn inside(&self, p: &ImagePoint) -> bool {
        p.u >= -0.5 && p.v >= -0.5 && p.u < self.cfg.width as f64 - 0.5 && p.v < self.cfg.height as f64 - 0.5
    }
}

fn io(path: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Io(format!("{}: {e}", path.display()))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<(), HarnessError> {
    let mut w = csv::WriterBuilder::new().has_headers(!rows.is_empty()).from_path(path).map_err(|e| io(path, e))?;
    if rows.is_empty() {
        w.write_record(header).map_err(|e| io(path, e))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| io(path, e))?;
    }
    w.flush().map_err(|e| io(path, e))
}

pub const VEHICLE_GT_HEADER: [&str; 10] =
    ["frame", "id", "x_ground", "y_ground", "theta", "bb_left", "bb_top", "bb_width", "bb_height", "visibility"];
pub const PEDESTRIAN_GT_HEADER: [&str; 9] = ["frame", "track_id", "head_u", "head_v", "foot_u", "foot_v", "x_ground", "y_ground", "height"];

/// Summary of a scene written by [`simulate_to_dir`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationSummary {
    pub frames: usize,
    pub background_frames: usize,
    pub vehicle_rows: usize,
    pub pedestrian_rows: usize,
    pub observation_rows: usize,
}

/// Writes the whole scene under `dir`: `frames/NNNNNN.ppm`,
/// `masks/NNNNNN.pgm` (foreground 255), `background/NNNNNN.ppm`,
/// `camera.txt`, `gt_vehicles.csv`, `pedestrians_gt.csv`,
/// `observations.csv` and the resolved `scenario.toml`.
pub fn simulate_to_dir(cfg: &ScenarioConfig, dir: &Path) -> Result<SimulationSummary, HarnessError> {
    let sim = Simulator::new(cfg.clone())?;
    for sub in ["frames", "masks", "background"] {
        std::fs::create_dir_all(dir.join(sub)).map_err(|e| io(dir, e))?;
    }
    let mut gt = Vec::new();
    for f in 0..cfg.frames {
        let r = sim.render_frame(f);
        let p = dir.join("frames").join(format!("{f:06}.ppm"));
        r.image.save(&p).map_err(|e| io(&p, e))?;
        let p = dir.join("masks").join(format!("{f:06}.pgm"));
        r.foreground().save(&p).map_err(|e| io(&p, e))?;
        gt.extend(r.vehicles);
    }
    for k in 0..cfg.background_frames {
        let p = dir.join("background").join(format!("{k:06}.ppm"));
        sim.background_frame(k).save(&p).map_err(|e| io(&p, e))?;
    }
    let p = dir.join("camera.txt");
    sim.camera.save(&p).map_err(|e| io(&p, e))?;
    write_csv(&dir.join("gt_vehicles.csv"), &gt, &VEHICLE_GT_HEADER)?;
    let peds = sim.pedestrian_gt();
    write_csv(&dir.join("pedestrians_gt.csv"), &peds, &PEDESTRIAN_GT_HEADER)?;
    let obs = sim.observations();
    let p = dir.join("observations.csv");
    let f = std::fs::File::create(&p).map_err(|e| io(&p, e))?;
    let mut bw = std::io::BufWriter::new(f);
    write_observations(&mut bw, &obs).map_err(|e| io(&p, e))?;
    bw.flush().map_err(|e| io(&p, e))?;
    let p = dir.join("scenario.toml");
    std::fs::write(&p, cfg.to_toml()).map_err(|e| io(&p, e))?;
    Ok(SimulationSummary {
        frames: cfg.frames,
        background_frames: cfg.background_frames,
        vehicle_rows: gt.len(),
        pedestrian_rows: peds.len(),
        observation_rows: obs.len(),
    })
}

pub fn read_vehicle_gt(path: &Path) -> Result<Vec<VehicleGt>, HarnessError> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| io(path, e))?;
    let mut out = Vec::new();
    for (i, r) in rd.deserialize().enumerate() {
        out.push(r.map_err(|e: csv::Error| HarnessError::Parse { line: i + 2, message: e.to_string() })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene() -> ScenarioConfig {
        let mut c = ScenarioConfig::empty(3);
        c.frames = 4;
        c.pixel_noise = 2.0;
        c.vehicles.push(VehicleSpec {
            vehicle_type: "sedan".into(),
            shape: None,
            start: [-2.0, 0.0],
            heading_deg: 0.0,
            speed: 5.0,
            turn_rate_deg: 0.0,
            chroma: None,
            first_frame: 0,
            last_frame: None,
        });
        c.pedestrians.push(PedestrianSpec {
            start: [2.0, -3.0],
            heading_deg: 90.0,
            speed: 1.4,
            height: 1.8,
            radius: 0.25,
            color: [200, 60, 60],
        });
        c
    }

    #[test]
    fn empty_scene_is_constant_background() {
        let mut c = ScenarioConfig::empty(1);
        c.frames = 2;
        let sim = Simulator::new(c).unwrap();
        let r = sim.render_frame(1);
        assert!(r.image.data.chunks(3).all(|p| p == [90, 90, 90]));
        assert_eq!(r.foreground().count(), 0);
        assert!(r.vehicles.is_empty());
        assert!(sim.observations().is_empty());
    }

    #[test]
    fn same_seed_renders_identical_frames() {
        let a = Simulator::new(scene()).unwrap();
        let b = Simulator::new(scene()).unwrap();
        for f in 0..3 {
            let (ra, rb) = (a.render_frame(f), b.render_frame(f));
            assert_eq!(ra.image, rb.image);
            assert_eq!(ra.labels, rb.labels);
            assert_eq!(ra.vehicles, rb.vehicles);
        }
        assert_ne!(a.render_frame(0).image, a.render_frame(1).image);
        let mut c = scene();
        c.seed = 4;
        assert_ne!(Simulator::new(c).unwrap().render_frame(0).image, a.render_frame(0).image);
    }

    #[test]
    fn head_and_foot_reproject_through_the_camera() {
        let sim = Simulator::new(scene()).unwrap();
        let gt = sim.pedestrian_gt();
        assert!(!gt.is_empty());
        for g in &gt {
            let (foot, _) = sim.camera.project(&Point3::new(g.x_ground, g.y_ground, 0.0)).unwrap();
            let (head, _) = sim.camera.project(&Point3::new(g.x_ground, g.y_ground, g.height)).unwrap();
            assert!(foot.dist(&ImagePoint::new(g.foot_u, g.foot_v)) < 0.5);
            assert!(head.dist(&ImagePoint::new(g.head_u, g.head_v)) < 0.5);
            let back = sim.camera.back_project_ground(&foot).unwrap();
            assert!((back.x - g.x_ground).hypot(back.y - g.y_ground) < 1e-9);
        }
    }

    #[test]
    fn vehicle_truth_follows_the_path_and_box() {
        let sim = Simulator::new(scene()).unwrap();
        let r = sim.render_frame(2);
        assert_eq!(r.vehicles.len(), 1);
        let v = &r.vehicles[0];
        assert!((v.x_ground - (-2.0 + 5.0 * 0.2)).abs() < 1e-12);
        assert!(v.visibility > 0.97, "{}", v.visibility);
        let bb = v.bbox();
        let mut n = 0;
        for y in 0..r.labels.height {
            for x in 0..r.labels.width {
                if r.labels.get(x, y) == 1 {
                    n += 1;
                    assert!(bb.scaled(1.02).contains_point(&ImagePoint::new(x as f64, y as f64)));
                }
            }
        }
        assert!(n > 1000);
    }

    #[test]
    fn occluder_hides_and_lowers_visibility() {
        let mut c = scene();
        let open = Simulator::new(c.clone()).unwrap().render_frame(0).vehicles[0].clone();
        let bb = open.bbox();
        c.occluders.push(OccluderSpec { rect: [bb.left, bb.top, bb.width / 2.0, bb.height], color: [10, 10, 10] });
        let sim = Simulator::new(c).unwrap();
        let hid = sim.render_frame(0).vehicles[0].clone();
        assert!(hid.visibility < open.visibility - 0.2);
        assert_eq!(hid.bbox(), bb);
        // Occluders are part of the background.
        let bgf = sim.background_frame(0);
        let (x, y) = ((bb.left + 3.0) as usize, (bb.top + bb.height / 2.0) as usize);
        assert!(bgf.get(x, y).iter().all(|&c| c < 30));
    }

    #[test]
    fn config_toml_round_trip_and_errors() {
        let c = scene();
        assert_eq!(ScenarioConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert!(matches!(ScenarioConfig::from_toml("width = 10"), Err(HarnessError::ConfigInvalid(_))));
        let mut bad = scene();
        bad.vehicles[0].vehicle_type = "tank".into();
        assert!(bad.validate().is_err());
        let text = "seed = 1\n[camera]\nfocal = 400.0\neye = [0.0, -10.0, 6.0]\ntarget = [0.0, 0.0, 0.0]\n[random_pedestrians]\ncount = 3\n";
        let c = ScenarioConfig::from_toml(text).unwrap();
        assert_eq!(Simulator::new(c).unwrap().pedestrian_specs().len(), 3);
    }

    #[test]
    fn writes_the_scene_directory() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = scene();
        c.background_frames = 2;
        c.head_foot_jitter = 1.0;
        let s = simulate_to_dir(&c, dir.path()).unwrap();
        assert_eq!(s.vehicle_rows, 4);
        for f in ["frames/000003.ppm", "masks/000000.pgm", "background/000001.ppm", "camera.txt", "observations.csv", "pedestrians_gt.csv"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let gt = read_vehicle_gt(&dir.path().join("gt_vehicles.csv")).unwrap();
        assert_eq!(gt.len(), 4);
        let head = std::fs::read_to_string(dir.path().join("gt_vehicles.csv")).unwrap();
        assert!(head.starts_with(&VEHICLE_GT_HEADER.join(",")));
        let cam = CameraModel::load(&dir.path().join("camera.txt")).unwrap();
        assert!((cam.fx - 500.0).abs() < 1e-9);
    }
}

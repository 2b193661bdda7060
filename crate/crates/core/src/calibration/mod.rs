//! Camera self-calibration from tracked pedestrians.
//!
//! Head and foot points of walking people give two families of lines: the
//! head-foot poles meet at the vertical vanishing point, and head-head /
//! foot-foot lines of the same person at two instants meet on the horizon.
//! The remaining degrees of freedom (position of `v_x` along the horizon,
//! then focal length and principal point) are found with EMNA by making the
//! recovered 3D heights as consistent as possible.
//!
//! World frame: z is up and the ground is z = 0. The vertical vanishing
//! point `v_y` images world z, `v_x` images world x and `v_z` world y.

mod blob;
mod grid;
mod solve;
mod vanishing;

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use thiserror::Error;

use crate::emna::{EmnaConfig, EmnaError};
use crate::geometry::{CameraModel, GeometryError, HomogLine, ImagePoint};

pub use blob::extract_head_foot;
pub use grid::{ground_grid, ground_grid_rms, render_grid_overlay, GridReport};
pub use solve::{
    estimate_heights, head_reprojection_rms, recover_camera, refine_intrinsics_emna, refine_vps_emna, HeightEstimate,
    IntrinsicsRefinement, VpRefinement,
};
pub use vanishing::{horizon_line, refine_vertical_vp, vertical_vp, vertical_vp_with, HorizonFit};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PedestrianObservation {
    pub frame_id: u64,
    pub track_id: u64,
    pub head: ImagePoint,
    pub foot: ImagePoint,
}

impl PedestrianObservation {
    pub fn pole_length(&self) -> f64 {
        self.head.dist(&self.foot)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VanishingEstimate {
    pub v_y: ImagePoint,
    pub horizon: HomogLine,
    pub v_y_candidates: Vec<ImagePoint>,
    pub horizon_candidates: Vec<ImagePoint>,
    /// Share of vertical candidates within one bandwidth of the mode.
    pub inlier_fraction: f64,
    pub horizon_converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationResult {
    pub camera: CameraModel,
    pub v_x: ImagePoint,
    pub v_z: ImagePoint,
    pub vanishing: VanishingEstimate,
    pub height_std: f64,
    pub reproj_error: f64,
    /// Stage-one camera, kept for diagnostics.
    pub initial_camera: CameraModel,
    pub per_track_heights: BTreeMap<u64, f64>,
    pub skipped_observations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationConfig {
    pub image_size: (usize, usize),
    /// Defaults to the image center.
    pub principal: Option<ImagePoint>,
    pub min_pole_length: f64,
    pub min_tracks: usize,
    pub min_observations: usize,
    /// Mean-shift bandwidth as a fraction of the image diagonal.
    pub bandwidth_fraction: f64,
    /// Upper bound on pairwise vertical candidates (deterministic subsample).
    pub max_vertical_candidates: usize,
    /// Horizon candidates further than this many diagonals from the image
    /// center are dropped.
    pub horizon_range: f64,
    pub irls_epsilon: f64,
    pub irls_max_iterations: usize,
    pub assumed_mean_height: f64,
    /// Weight of the principal-point prior in stage two, per pixel.
    pub principal_prior: f64,
    pub stage1: EmnaConfig,
    pub stage2: EmnaConfig,
    /// EMNA restarts per stage, each from the best point so far.
    pub restarts: usize,
}

impl CalibrationConfig {
    pub fn new(image_size: (usize, usize), seed: u64) -> Self {
        let diag = (image_size.0 as f64).hypot(image_size.1 as f64);
        Self {
            image_size,
            principal: None,
            min_pole_length: 10.0,
            min_tracks: 3,
            min_observations: 20,
            bandwidth_fraction: 0.02,
            max_vertical_candidates: 4000,
            horizon_range: 20.0,
            irls_epsilon: 1e-9,
            irls_max_iterations: 100,
            assumed_mean_height: 1.7,
            principal_prior: 1e-3,
            stage1: EmnaConfig::new(vec![0.25 * diag], seed),
            stage2: EmnaConfig::new(vec![0.01 * diag, 10.0, 10.0, 0.02 * diag], seed.wrapping_add(1)),
            restarts: 6,
        }
    }

    pub fn principal_point(&self) -> ImagePoint {
        self.principal.unwrap_or(ImagePoint::new(
            (self.image_size.0 as f64 - 1.0) / 2.0,
            (self.image_size.1 as f64 - 1.0) / 2.0,
        ))
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth_fraction * (self.image_size.0 as f64).hypot(self.image_size.1 as f64)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibrationError {
    #[error("blob too small: {area} pixels")]
    BlobTooSmall { area: usize },
    #[error("blob has no distinct major axis (eigenvalue ratio {ratio:.3})")]
    DegenerateBlob { ratio: f64 },
    #[error("insufficient observations: {0}")]
    InsufficientObservations(String),
    #[error("all head-foot lines are parallel (vertical vanishing point at infinity along ({0:.6}, {1:.6}))")]
    AllLinesParallel(f64, f64),
    #[error("vanishing points admit no real focal length")]
    NoRealFocal,
    #[error("no feasible sample found")]
    NoFeasibleSample,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<CalibrationError>,
    },
    #[error("observation file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<EmnaError> for CalibrationError {
    fn from(e: EmnaError) -> Self {
        match e {
            EmnaError::NoFeasibleSample => CalibrationError::NoFeasibleSample,
            EmnaError::InvalidConfig(m) => CalibrationError::InvalidConfig(m),
        }
    }
}

impl From<std::io::Error> for CalibrationError {
    fn from(e: std::io::Error) -> Self {
        CalibrationError::Io(e.to_string())
    }
}

fn stage<T>(name: &'static str, r: Result<T, CalibrationError>) -> Result<T, CalibrationError> {
    r.map_err(|e| CalibrationError::Stage { stage: name, source: Box::new(e) })
}

/// Full pipeline: vertical vanishing point, horizon, stage-one search for
/// `v_x`, camera recovery and stage-two intrinsic refinement.
pub fn calibrate(obs: &[PedestrianObservation], cfg: &CalibrationConfig) -> Result<CalibrationResult, CalibrationError> {
    let obs: Vec<PedestrianObservation> =
        obs.iter().copied().filter(|o| o.pole_length() >= cfg.min_pole_length).collect();
    let tracks: std::collections::BTreeSet<u64> = obs.iter().map(|o| o.track_id).collect();
    if tracks.len() < cfg.min_tracks || obs.len() < cfg.min_observations {
        return Err(CalibrationError::InsufficientObservations(format!(
            "{} observations over {} tracks, need {} over {}",
            obs.len(),
            tracks.len(),
            cfg.min_observations,
            cfg.min_tracks
        )));
    }
    let principal = cfg.principal_point();

    let (mode, v_y_candidates) =
        stage("vertical vanishing point", vertical_vp_with(&obs, cfg.bandwidth(), cfg.max_vertical_candidates))?;
    let bw = cfg.bandwidth();
    let inliers = v_y_candidates.iter().filter(|c| c.dist(&mode) <= bw).count();
    let v_y = refine_vertical_vp(&obs, &mode);
    let inlier_fraction = if v_y_candidates.is_empty() { 0.0 } else { inliers as f64 / v_y_candidates.len() as f64 };

    let center = ImagePoint::new(cfg.image_size.0 as f64 / 2.0, cfg.image_size.1 as f64 / 2.0);
    let max_dist = cfg.horizon_range * (cfg.image_size.0 as f64).hypot(cfg.image_size.1 as f64);
    let hfit = stage(
        "horizon",
        horizon_line(&obs, cfg.irls_epsilon, cfg.irls_max_iterations, |p| p.dist(&center) <= max_dist),
    )?;
    if hfit.line.distance(&v_y) <= 1.0 {
        return Err(CalibrationError::Stage {
            stage: "horizon",
            source: Box::new(CalibrationError::Geometry(GeometryError::DegenerateInput(
                "vertical vanishing point lies on the horizon",
            ))),
        });
    }
    let vanishing = VanishingEstimate {
        v_y,
        horizon: hfit.line,
        v_y_candidates,
        horizon_candidates: hfit.candidates.clone(),
        inlier_fraction,
        horizon_converged: hfit.converged,
    };

    let s1 = stage(
        "vanishing point refinement",
        refine_vps_emna(&obs, &v_y, &hfit.line, &principal, cfg.assumed_mean_height, &cfg.stage1, cfg.restarts),
    )?;
    let initial_camera =
        stage("camera recovery", recover_camera(&v_y, &s1.v_x, &s1.v_z, cfg.image_size, &principal, 1.0))?;
    let h0 = stage("height estimation", estimate_heights(&initial_camera, &obs, cfg.assumed_mean_height))?;
    let initial_camera = solve::rescale_camera(&initial_camera, h0.scale)?;

    let s2 = stage(
        "intrinsic refinement",
        refine_intrinsics_emna(
            &obs,
            &initial_camera,
            &v_y,
            &hfit.line,
            &principal,
            cfg.principal_prior,
            &cfg.stage2,
            cfg.restarts,
        ),
    )?;
    let heights = stage("height estimation", estimate_heights(&s2.camera, &obs, cfg.assumed_mean_height))?;
    let camera = solve::rescale_camera(&s2.camera, heights.scale)?;
    let v_x = camera.vanishing_point(&nalgebra::Vector3::x()).unwrap_or(s2.v_x);
    let v_z = camera.vanishing_point(&nalgebra::Vector3::y()).unwrap_or(s1.v_z);

    Ok(CalibrationResult {
        camera,
        v_x,
        v_z,
        vanishing,
        height_std: heights.std,
        reproj_error: s2.reproj_error,
        initial_camera,
        per_track_heights: heights.per_track,
        skipped_observations: heights.skipped,
    })
}

/// Reads `frame_id,track_id,head_u,head_v,foot_u,foot_v` rows. A header
/// row is accepted and skipped.
pub fn read_observations<R: BufRead>(r: R) -> Result<Vec<PedestrianObservation>, CalibrationError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = t.split(',').map(str::trim).collect();
        if i == 0 && fields.first().is_some_and(|f| f.parse::<f64>().is_err()) {
            continue;
        }
        if fields.len() != 6 {
            return Err(CalibrationError::Parse { line: lineno, message: format!("expected 6 fields, got {}", fields.len()) });
        }
        let int = |s: &str| s.parse::<u64>().map_err(|e| CalibrationError::Parse { line: lineno, message: format!("{s:?}: {e}") });
        let num = |s: &str| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| CalibrationError::Parse { line: lineno, message: format!("bad number {s:?}") })
        };
        let head = ImagePoint::new(num(fields[2])?, num(fields[3])?);
        let foot = ImagePoint::new(num(fields[4])?, num(fields[5])?);
        if head == foot {
            return Err(CalibrationError::Parse { line: lineno, message: "head and foot coincide".into() });
        }
        out.push(PedestrianObservation { frame_id: int(fields[0])?, track_id: int(fields[1])?, head, foot });
    }
    Ok(out)
}

pub fn write_observations<W: Write>(mut w: W, obs: &[PedestrianObservation]) -> std::io::Result<()> {
    writeln!(w, "frame_id,track_id,head_u,head_v,foot_u,foot_v")?;
    for o in obs {
        writeln!(w, "{},{},{},{},{},{}", o.frame_id, o.track_id, o.head.u, o.head.v, o.foot.u, o.foot.v)?;
    }
    Ok(())
}

pub fn load_observations(path: &Path) -> Result<Vec<PedestrianObservation>, CalibrationError> {
    let f = std::fs::File::open(path).map_err(|e| CalibrationError::Io(format!("{}: {e}", path.display())))?;
    read_observations(std::io::BufReader::new(f))
}

/// Fixed-key-order text report.
pub fn report_json(r: &CalibrationResult) -> String {
    format!(
        "{{\"height_std\": {}, \"reproj_error\": {}, \"inlier_fraction\": {}}}\n",
        r.height_std, r.reproj_error, r.vanishing.inlier_fraction
    )
}


#[cfg(test)]
mod tests {
    use super::testutil::*;
    use super::*;

    #[test]
    fn noiseless_end_to_end() {
        let cam = camera(959.5, 539.5);
        let obs = scene(&cam, 10, 60, &[1.7], 0.0, 5);
        let mut cfg = CalibrationConfig::new((1920, 1080), 1);
        cfg.stage1.generations = 25;
        cfg.stage2.generations = 25;
        let r = calibrate(&obs, &cfg).unwrap();
        assert!((r.camera.fx - cam.fx).abs() / cam.fx < 0.01, "{}", r.camera.fx);
        assert!(r.height_std < 1e-3, "{}", r.height_std);
        let mean: f64 = r.per_track_heights.values().sum::<f64>() / r.per_track_heights.len() as f64;
        assert!((mean - 1.7).abs() < 1e-6);
        let report = report_json(&r);
        let a = report.find("height_std").unwrap();
        let b = report.find("reproj_error").unwrap();
        let c = report.find("inlier_fraction").unwrap();
        assert!(a < b && b < c);
    }

    #[test]
    fn single_track_is_rejected() {
        let cam = camera(959.5, 539.5);
        let obs = scene(&cam, 1, 60, &[1.7], 0.0, 5);
        let cfg = CalibrationConfig::new((1920, 1080), 1);
        assert!(matches!(calibrate(&obs, &cfg), Err(CalibrationError::InsufficientObservations(_))));
    }

    #[test]
    fn observation_csv_errors_carry_line_numbers() {
        let text = "frame_id,track_id,head_u,head_v,foot_u,foot_v\n0,1,10,10,10,60\n1,1,10,x,10,60\n";
        match read_observations(text.as_bytes()) {
            Err(CalibrationError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let ok = read_observations("0,1,10,10,10,60\n".as_bytes()).unwrap();
        assert_eq!(ok.len(), 1);
        let mut buf = Vec::new();
        write_observations(&mut buf, &ok).unwrap();
        assert_eq!(read_observations(buf.as_slice()).unwrap(), ok);
    }
}

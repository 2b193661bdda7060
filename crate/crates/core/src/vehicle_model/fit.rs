use super::{build_model, compute_fes, compute_fes_with, pose_and_project, FesResult, Pose, ShapeParams, VehicleModelError};
use crate::emna::{minimize_with_restarts, EmnaConfig, EmnaError};
use crate::geometry::{wrap_angle, CameraModel};
use crate::vehicle_model::GradientField;

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub emna: EmnaConfig,
    /// Normal search half-widths (pixels) for successive coarse-to-fine
    /// stages. The last stage should normally be 0 or small.
    pub bands: Vec<f64>,
    pub restarts: usize,
    /// Keep theta within this many radians of the initial heading.
    pub theta_window: Option<f64>,
    /// Optimize pose only, holding the shape at the prior.
    pub pose_only: bool,
}

impl FitConfig {
    /// Fifteen-dimensional search: 0.5 m and 8 degrees on the pose, 5% of
    /// each prior value on the shape, through bands of 12, 4 and 1 px.
    pub fn new(shape_prior: &ShapeParams, seed: u64) -> Self {
        let mut sigma = vec![0.5, 0.5, 8f64.to_radians()];
        sigma.extend(shape_prior.to_array().iter().map(|v| 0.05 * v));
        let mut emna = EmnaConfig::new(sigma, seed);
        emna.population = 80;
        emna.generations = 30;
        Self { emna, bands: vec![12.0, 4.0, 1.0], restarts: 1, theta_window: None, pose_only: false }
    }

    pub fn pose_only(seed: u64) -> Self {
        let mut emna = EmnaConfig::new(vec![0.5, 0.5, 8f64.to_radians()], seed);
        emna.population = 40;
        emna.generations = 30;
        Self { emna, bands: vec![8.0, 2.0], restarts: 2, theta_window: None, pose_only: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub shape: ShapeParams,
    pub pose: Pose,
    pub fes: FesResult,
    pub evaluations: usize,
}

fn decode(x: &[f64], prior: &ShapeParams, pose_only: bool) -> (Pose, ShapeParams) {
    let pose = Pose::new(x[0], x[1], x[2]);
    let shape = if pose_only { *prior } else { ShapeParams::from_array(&x[3..15]) };
    (pose, shape)
}

/// Plain FES of a candidate; `None` when the shape is invalid or the model
/// does not project.
pub fn score(field: &GradientField, camera: &CameraModel, shape: &ShapeParams, pose: &Pose) -> Option<FesResult> {
    let model = build_model(shape).ok()?;
    let segs = pose_and_project(&model, pose, camera).ok()?;
    compute_fes(field, &segs).ok()
}

/// Maximizes FES over pose (and shape unless `pose_only`) with EMNA,
/// through coarse-to-fine normal search bands. Infeasible shapes score -1.
/// The reported fitness is the plain FES and is never below the
/// initializer's.
pub fn fit_model_emna(
    field: &GradientField,
    camera: &CameraModel,
    init_pose: &Pose,
    shape_prior: &ShapeParams,
    cfg: &FitConfig,
) -> Result<FitResult, VehicleModelError> {
    if field.is_empty() {
        return Err(VehicleModelError::EmptyField);
    }
    shape_prior.validate()?;
    let dim = if cfg.pose_only { 3 } else { 15 };
    let mut x = vec![init_pose.x, init_pose.y, init_pose.theta];
    if !cfg.pose_only {
        x.extend(shape_prior.to_array());
    }
    let theta0 = init_pose.theta;
    let objective = |band: f64| {
        move |v: &[f64]| -> f64 {
            if let Some(wdw) = cfg.theta_window {
                if wrap_angle(v[2] - theta0).abs() > wdw {
                    return 1.0;
                }
            }
            let (pose, shape) = decode(v, shape_prior, cfg.pose_only);
            let Ok(model) = build_model(&shape) else { return 1.0 };
            let Ok(segs) = pose_and_project(&model, &pose, camera) else { return 1.0 };
            match compute_fes_with(field, &segs, band) {
                Ok(r) => -r.total,
                Err(_) => 1.0,
            }
        }
    };

    let mut candidates = vec![x.clone()];
    let mut evaluations = 0;
    let mut emna = cfg.emna.clone();
    if emna.init_sigma.len() != dim {
        emna.init_sigma.truncate(dim);
    }
    for (k, &band) in cfg.bands.iter().enumerate() {
        let c = EmnaConfig { seed: cfg.emna.seed.wrapping_add(100 * k as u64), ..emna.clone() };
        let out = minimize_with_restarts(objective(band), &x, &c, cfg.restarts).map_err(|e| match e {
            EmnaError::NoFeasibleSample => VehicleModelError::NoFeasibleSample,
            EmnaError::InvalidConfig(m) => VehicleModelError::InvalidShape(m),
        })?;
        evaluations += out.evaluations;
        if out.best_value >= 1.0 {
            return Err(VehicleModelError::NoFeasibleSample);
        }
        x = out.best;
        candidates.push(x.clone());
        for s in emna.init_sigma.iter_mut() {
            *s *= 0.5;
        }
    }

    let mut best: Option<(Pose, ShapeParams, FesResult)> = None;
    for c in &candidates {
        let (pose, shape) = decode(c, shape_prior, cfg.pose_only);
        if let Some(r) = score(field, camera, &shape, &pose) {
            if best.as_ref().is_none_or(|b| r.total > b.2.total) {
                best = Some((pose, shape, r));
            }
        }
    }
    let (pose, shape, fes) = best.ok_or(VehicleModelError::NoFeasibleSample)?;
    Ok(FitResult { shape, pose, fes, evaluations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point3;
    use crate::harness::render::{render_vehicle, VehiclePalette};
    use crate::image::RgbImage;
    use crate::vehicle_model::VehicleType;

    pub(crate) fn scene() -> (CameraModel, GradientField, Pose) {
        let cam = CameraModel::look_at(1000.0, 639.5, 359.5, Point3::new(-6.0, -15.0, 8.0), Point3::new(0.0, 0.0, 0.0)).unwrap();
        let truth = Pose::new(0.3, -0.2, 0.35);
        let model = build_model(&VehicleType::Sedan.preset()).unwrap();
        let mut img = RgbImage::filled(1280, 720, [75, 75, 75]);
        assert!(render_vehicle(&mut img, None, &model, &truth, &cam, &VehiclePalette::nth(0)));
        (cam, GradientField::from_image(&img), truth)
    }

    #[test]
    fn truth_beats_perturbations() {
        let (cam, field, truth) = scene();
        let s = VehicleType::Sedan.preset();
        let at_truth = score(&field, &cam, &s, &truth).unwrap().total;
        assert!(at_truth >= 0.8, "{at_truth}");
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
        use rand::Rng;
        for _ in 0..50 {
            let p = Pose::new(
                truth.x + rng.random_range(-0.5..0.5),
                truth.y + rng.random_range(-0.5..0.5),
                truth.theta + rng.random_range(-10f64..10.0).to_radians(),
            );
            assert!(score(&field, &cam, &s, &p).unwrap().total <= at_truth);
        }
    }

    #[test]
    fn pose_only_fit_is_elitist_and_converges() {
        let (cam, field, truth) = scene();
        let s = VehicleType::Sedan.preset();
        let at_truth = score(&field, &cam, &s, &truth).unwrap().total;
        let r = fit_model_emna(&field, &cam, &truth, &s, &FitConfig::pose_only(1)).unwrap();
        assert!(r.fes.total >= at_truth);
        let init = Pose::new(truth.x + 0.6, truth.y - 0.5, truth.theta + 0.15);
        let r = fit_model_emna(&field, &cam, &init, &s, &FitConfig::pose_only(2)).unwrap();
        assert!((r.pose.x - truth.x).hypot(r.pose.y - truth.y) < 0.1, "{:?}", r.pose);
        assert!(wrap_angle(r.pose.theta - truth.theta).abs() < 2f64.to_radians());
    }

    #[test]
    fn invalid_prior_and_empty_field() {
        let (cam, field, truth) = scene();
        let bad = ShapeParams { hood_height: 2.0, ..VehicleType::Sedan.preset() };
        assert!(matches!(fit_model_emna(&field, &cam, &truth, &bad, &FitConfig::pose_only(0)), Err(VehicleModelError::InvalidShape(_))));
        let empty = GradientField::from_luminance(0, 0, &[]);
        let s = VehicleType::Sedan.preset();
        assert_eq!(fit_model_emna(&empty, &cam, &truth, &s, &FitConfig::pose_only(0)), Err(VehicleModelError::EmptyField));
    }
}

use nalgebra::{Matrix2x3, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::kernels::{CostBreakdown, CostContext};
use super::TrackingError;
use crate::geometry::wrap_angle;
use crate::vehicle_model::Pose;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    /// Central-difference steps (m, m, degrees).
    pub gradient_steps: [f64; 3],
    /// Convergence tolerance on the pose step (m, degrees).
    pub tolerance_m: f64,
    pub tolerance_deg: f64,
    pub max_iterations: usize,
    /// Largest trial step (m, degrees).
    pub max_step_m: f64,
    pub max_step_deg: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            gradient_steps: [0.02, 0.02, 0.5],
            tolerance_m: 1e-3,
            tolerance_deg: 0.05,
            max_iterations: 50,
            max_step_m: 0.25,
            max_step_deg: 3.0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), TrackingError> {
        let pos = [self.tolerance_m, self.tolerance_deg, self.max_step_m, self.max_step_deg];
        if self.gradient_steps.iter().chain(&pos).any(|v| !(*v > 0.0)) || self.max_iterations == 0 {
            return Err(TrackingError::InvalidConfig("solver parameters must be positive".into()));
        }
        Ok(())
    }

    fn steps(&self) -> [f64; 3] {
        [self.gradient_steps[0], self.gradient_steps[1], self.gradient_steps[2].to_radians()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseGradient {
    pub total: Vector3<f64>,
    /// Gradient of each kernel's weighted term.
    pub per_kernel: Vec<Vector3<f64>>,
}

fn shifted(p: &Pose, axis: usize, d: f64) -> Pose {
    let mut v = [p.x, p.y, p.theta];
    v[axis] += d;
    Pose::new(v[0], v[1], v[2])
}

/// Central-difference gradient of the cost and of each kernel term with
/// respect to `(x, y, theta)`.
pub fn pose_gradient(ctx: &CostContext, pose: &Pose, cfg: &SolverConfig) -> Result<PoseGradient, TrackingError> {
    let steps = cfg.steps();
    let n = ctx.kernels.len();
    let mut total = Vector3::zeros();
    let mut per_kernel = vec![Vector3::zeros(); n];
    for axis in 0..3 {
        let h = steps[axis];
        let a = ctx.cost(&shifted(pose, axis, h))?;
        let b = ctx.cost(&shifted(pose, axis, -h))?;
        total[axis] = (a.total - b.total) / (2.0 * h);
        for k in 0..n {
            per_kernel[k][axis] = (a.terms[k].cost() - b.terms[k].cost()) / (2.0 * h);
        }
    }
    Ok(PoseGradient { total, per_kernel })
}

/// Jacobian of a kernel's ground-plane centroid with respect to the pose.
fn centroid_jacobian(c: &Vector3<f64>, pose: &Pose) -> Matrix2x3<f64> {
    Matrix2x3::new(1.0, 0.0, -(c.y - pose.y), 0.0, 1.0, c.x - pose.x)
}

/// Maps per-kernel centroid displacements onto the 3-DOF pose tangent by
/// weighted least squares. Kernels stay rigidly attached to the model, so
/// the resulting pose step satisfies the kernel constraints exactly.
pub fn project_displacements(ctx: &CostContext, pose: &Pose, displacements: &[Vector2<f64>]) -> Vector3<f64> {
    let clearance = ctx.model.shape.ground_clearance;
    let mut m = Matrix3::zeros();
    let mut rhs = Vector3::zeros();
    for (k, d) in ctx.kernels.iter().zip(displacements) {
        if k.weight <= 0.0 {
            continue;
        }
        let a = centroid_jacobian(&k.world_centroid(pose, clearance), pose);
        m += k.weight * a.transpose() * a;
        rhs += k.weight * a.transpose() * d;
    }
    // A small ridge keeps a single-kernel problem (rotation about its own
    // centroid) well posed.
    m += Matrix3::identity() * 1e-9;
    m.lu().solve(&rhs).unwrap_or_else(Vector3::zeros)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveOutcome {
    pub pose: Pose,
    pub cost: CostBreakdown,
    pub initial_cost: f64,
    pub iterations: usize,
    /// False when the iteration limit was hit before the step fell below
    /// tolerance; the best iterate is still returned.
    pub converged: bool,
}

/// Projected-gradient descent on the pose cost, started from `init`.
/// Each kernel proposes the centroid displacement of its own steepest
/// descent step; the stacked displacements are projected onto the pose
/// tangent and a backtracking line search accepts only decreasing steps.
pub fn solve_pose_projected_gradient(ctx: &CostContext, init: &Pose, cfg: &SolverConfig) -> Result<SolveOutcome, TrackingError> {
    cfg.validate()?;
    let clearance = ctx.model.shape.ground_clearance;
    let mut pose = *init;
    let mut best = ctx.cost(&pose)?;
    let initial_cost = best.total;
    let tol = Vector3::new(cfg.tolerance_m, cfg.tolerance_m, cfg.tolerance_deg.to_radians());
    let max = Vector3::new(cfg.max_step_m, cfg.max_step_m, cfg.max_step_deg.to_radians());
    let mut scale = 1.0f64;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iterations {
        iterations += 1;
        let g = pose_gradient(ctx, &pose, cfg)?;
        let disp: Vec<Vector2<f64>> = ctx
            .kernels
            .iter()
            .zip(&g.per_kernel)
            .map(|(k, gk)| -(centroid_jacobian(&k.world_centroid(&pose, clearance), &pose) * gk))
            .collect();
        let mut dirs = vec![project_displacements(ctx, &pose, &disp)];
        dirs.push(-g.total);
        let mut moved = false;
        'dirs: for dir in dirs {
            // Normalize so the unit trial step touches the per-axis limit.
            let reach = (0..3).map(|i| dir[i].abs() / max[i]).fold(0.0, f64::max);
            if !(reach > 0.0) {
                continue;
            }
            let unit = dir / reach;
            let mut s = scale.min(1.0);
            while (0..3).any(|i| (unit[i] * s).abs() >= tol[i]) {
                let step = unit * s;
                let cand = Pose::new(pose.x + step[0], pose.y + step[1], pose.theta + step[2]);
                if let Ok(c) = ctx.cost(&cand) {
                    if c.total < best.total {
                        pose = cand;
                        best = c;
                        scale = (s * 2.0).min(1.0);
                        moved = true;
                        break 'dirs;
                    }
                }
                s *= 0.5;
            }
        }
        if !moved {
            converged = true;
            break;
        }
    }
    pose.theta = wrap_angle(pose.theta);
    Ok(SolveOutcome { pose, cost: best, initial_cost, iterations, converged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmentation::ColorSpace;
    use crate::tracking::kernels::{init_kernels, FrameBins};
    use crate::tracking::testutil::scene;
    use crate::vehicle_model::GradientField;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gradient_matches_finite_difference_oracle() {
        let (cam, img, model, truth) = scene();
        let bins = FrameBins::new(&img, ColorSpace::YCbCr);
        let field = GradientField::from_image(&img);
        let (kernels, _) = init_kernels(&model, &truth, &cam, &bins, None, 20).unwrap();
        let ctx = CostContext { model: &model, kernels: &kernels, camera: &cam, bins: &bins, field: &field, exclude: None };
        let cfg = SolverConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let p = Pose::new(truth.x + rng.random_range(-0.4..0.4), truth.y + rng.random_range(-0.4..0.4), truth.theta + rng.random_range(-0.1..0.1));
            let g = pose_gradient(&ctx, &p, &cfg).unwrap();
            let h = [0.02, 0.02, 0.5f64.to_radians()];
            let f = |q: Pose| ctx.cost(&q).unwrap().total;
            let oracle = [
                (f(Pose::new(p.x + h[0], p.y, p.theta)) - f(Pose::new(p.x - h[0], p.y, p.theta))) / (2.0 * h[0]),
                (f(Pose::new(p.x, p.y + h[1], p.theta)) - f(Pose::new(p.x, p.y - h[1], p.theta))) / (2.0 * h[1]),
                (f(Pose::new(p.x, p.y, p.theta + h[2])) - f(Pose::new(p.x, p.y, p.theta - h[2]))) / (2.0 * h[2]),
            ];
            for i in 0..3 {
                assert!((g.total[i] - oracle[i]).abs() <= 1e-4 * oracle[i].abs().max(1e-12), "{i}: {} vs {}", g.total[i], oracle[i]);
            }
            let sum: Vector3<f64> = g.per_kernel.iter().sum();
            assert!((sum - g.total).norm() < 1e-9 * (1.0 + g.total.norm()));
        }
    }

    #[test]
    fn projection_recovers_a_rigid_motion() {
        let (cam, img, model, truth) = scene();
        let bins = FrameBins::new(&img, ColorSpace::YCbCr);
        let field = GradientField::from_image(&img);
        let (kernels, _) = init_kernels(&model, &truth, &cam, &bins, None, 20).unwrap();
        let ctx = CostContext { model: &model, kernels: &kernels, camera: &cam, bins: &bins, field: &field, exclude: None };
        let delta = Vector3::new(0.01, -0.02, 0.003);
        let c = model.shape.ground_clearance;
        let moved = Pose::new(truth.x + delta[0], truth.y + delta[1], truth.theta + delta[2]);
        let disp: Vec<Vector2<f64>> = kernels
            .iter()
            .map(|k| {
                let d = k.world_centroid(&moved, c) - k.world_centroid(&truth, c);
                Vector2::new(d.x, d.y)
            })
            .collect();
        let got = project_displacements(&ctx, &truth, &disp);
        assert!((got - delta).norm() < 1e-4, "{got}");
    }

    #[test]
    fn init_at_truth_stays_put() {
        let (cam, img, model, truth) = scene();
        let bins = FrameBins::new(&img, ColorSpace::YCbCr);
        let field = GradientField::from_image(&img);
        let (kernels, _) = init_kernels(&model, &truth, &cam, &bins, None, 20).unwrap();
        let ctx = CostContext { model: &model, kernels: &kernels, camera: &cam, bins: &bins, field: &field, exclude: None };
        let r = solve_pose_projected_gradient(&ctx, &truth, &SolverConfig::default()).unwrap();
        assert!(r.iterations <= 2, "{}", r.iterations);
        assert!((r.pose.x - truth.x).hypot(r.pose.y - truth.y) <= 1e-3);
        assert!(wrap_angle(r.pose.theta - truth.theta).abs() <= 0.05f64.to_radians());
    }

    #[test]
    fn converges_from_an_offset_and_is_monotone() {
        let (cam, img, model, truth) = scene();
        let bins = FrameBins::new(&img, ColorSpace::YCbCr);
        let field = GradientField::from_image(&img);
        let (kernels, cons) = init_kernels(&model, &truth, &cam, &bins, None, 20).unwrap();
        let ctx = CostContext { model: &model, kernels: &kernels, camera: &cam, bins: &bins, field: &field, exclude: None };
        for (dx, dy, dt) in [(0.3, 0.0, 5.0f64), (-0.2, 0.22, -5.0), (0.0, -0.3, 5.0)] {
            let init = Pose::new(truth.x + dx, truth.y + dy, truth.theta + dt.to_radians());
            let r = solve_pose_projected_gradient(&ctx, &init, &SolverConfig::default()).unwrap();
            assert!(r.cost.total <= r.initial_cost);
            assert!((r.pose.x - truth.x).hypot(r.pose.y - truth.y) < 0.05, "{:?}", r.pose);
            assert!(wrap_angle(r.pose.theta - truth.theta).abs() < 1f64.to_radians(), "{:?}", r.pose);
            assert!(cons.residuals(&kernels, &r.pose, model.shape.ground_clearance).max_abs() < 1e-9);
        }
    }
}

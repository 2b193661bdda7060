//! Extended Kalman filter with a constant turn rate and velocity motion
//! model on the ground plane. State: `[x, y, speed, heading, turn_rate]`.

use nalgebra::{DMatrix, DVector, Matrix5, SymmetricEigen, Vector5};
use serde::{Deserialize, Serialize};

use crate::geometry::wrap_angle;

pub const STATE_DIM: usize = 5;
const EIGEN_FLOOR: f64 = 1e-12;
const STRAIGHT_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MotionNoise {
    /// Longitudinal acceleration noise (m/s^2).
    pub accel: f64,
    /// Yaw acceleration noise (rad/s^2).
    pub yaw_accel: f64,
}

impl Default for MotionNoise {
    fn default() -> Self {
        Self { accel: 2.0, yaw_accel: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CtrvFilter {
    pub state: Vector5<f64>,
    pub covariance: Matrix5<f64>,
    /// Set when the last operation had to repair the covariance.
    pub repaired: bool,
}

impl CtrvFilter {
    pub fn new(state: Vector5<f64>, covariance: Matrix5<f64>) -> Self {
        let mut s = state;
        s[3] = wrap_angle(s[3]);
        Self { state: s, covariance, repaired: false }
    }

    pub fn x(&self) -> f64 {
        self.state[0]
    }
    pub fn y(&self) -> f64 {
        self.state[1]
    }
    pub fn speed(&self) -> f64 {
        self.state[2]
    }
    pub fn heading(&self) -> f64 {
        self.state[3]
    }
    pub fn turn_rate(&self) -> f64 {
        self.state[4]
    }

    pub fn predict(&mut self, dt: f64, noise: &MotionNoise) {
        let (next, f) = motion(&self.state, dt);
        let th = self.state[3];
        // Noise enters as accelerations held over the interval.
        let mut g = DMatrix::<f64>::zeros(5, 2);
        g[(0, 0)] = 0.5 * dt * dt * th.cos();
        g[(1, 0)] = 0.5 * dt * dt * th.sin();
        g[(2, 0)] = dt;
        g[(3, 1)] = 0.5 * dt * dt;
        g[(4, 1)] = dt;
        let qn = DMatrix::from_diagonal(&DVector::from_vec(vec![noise.accel.powi(2), noise.yaw_accel.powi(2)]));
        let q = &g * qn * g.transpose();
        let q = Matrix5::from_fn(|i, j| q[(i, j)]);
        self.state = next;
        self.covariance = f * self.covariance * f.transpose() + q;
        self.repair();
    }

    /// Update with a measurement of the rows of the state listed in
    /// `rows` (heading innovations are wrapped) and diagonal noise
    /// standard deviations `sigma`.
    pub fn update(&mut self, rows: &[usize], z: &[f64], sigma: &[f64]) {
        let m = rows.len();
        let mut h = DMatrix::<f64>::zeros(m, STATE_DIM);
        let mut innov = DVector::<f64>::zeros(m);
        for (k, &r) in rows.iter().enumerate() {
            h[(k, r)] = 1.0;
            innov[k] = if r == 3 { wrap_angle(z[k] - self.state[r]) } else { z[k] - self.state[r] };
        }
        let rm = DMatrix::from_diagonal(&DVector::from_iterator(m, sigma.iter().map(|s| s * s)));
        let p = DMatrix::from_fn(5, 5, |i, j| self.covariance[(i, j)]);
        let s = &h * &p * h.transpose() + &rm;
        let Some(s_inv) = s.try_inverse() else {
            self.repaired = true;
            return;
        };
        let k = &p * h.transpose() * s_inv;
        let dx = &k * innov;
        for i in 0..STATE_DIM {
            self.state[i] += dx[i];
        }
        self.state[3] = wrap_angle(self.state[3]);
        let ikh = DMatrix::<f64>::identity(5, 5) - &k * &h;
        let pn = &ikh * p * ikh.transpose() + &k * rm * k.transpose();
        self.covariance = Matrix5::from_fn(|i, j| pn[(i, j)]);
        self.repair();
    }

    /// Heading innovation that `update` would use for measurement `theta`.
    pub fn heading_innovation(&self, theta: f64) -> f64 {
        wrap_angle(theta - self.state[3])
    }

    /// Re-symmetrizes and floors eigenvalues; sets `repaired` when the
    /// floor was needed.
    fn repair(&mut self) {
        let sym = (self.covariance + self.covariance.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym);
        if eig.eigenvalues.iter().all(|&l| l >= 0.0) {
            self.covariance = sym;
            self.repaired = false;
            return;
        }
        let floored = eig.eigenvalues.map(|l| l.max(EIGEN_FLOOR));
        self.covariance = eig.eigenvectors * Matrix5::from_diagonal(&floored) * eig.eigenvectors.transpose();
        self.repaired = true;
    }
}

/// Motion function and its Jacobian.
pub fn motion(s: &Vector5<f64>, dt: f64) -> (Vector5<f64>, Matrix5<f64>) {
    let (x, y, v, th, w) = (s[0], s[1], s[2], s[3], s[4]);
    let mut f = Matrix5::identity();
    let (nx, ny);
    if w.abs() > STRAIGHT_EPS {
        let th2 = th + w * dt;
        let (s1, c1) = th.sin_cos();
        let (s2, c2) = th2.sin_cos();
        nx = x + v / w * (s2 - s1);
        ny = y + v / w * (c1 - c2);
        f[(0, 2)] = (s2 - s1) / w;
        f[(0, 3)] = v / w * (c2 - c1);
        f[(0, 4)] = -v / (w * w) * (s2 - s1) + v / w * c2 * dt;
        f[(1, 2)] = (c1 - c2) / w;
        f[(1, 3)] = v / w * (s2 - s1);
        f[(1, 4)] = -v / (w * w) * (c1 - c2) + v / w * s2 * dt;
    } else {
        let (s1, c1) = th.sin_cos();
        nx = x + v * dt * c1;
        ny = y + v * dt * s1;
        f[(0, 2)] = dt * c1;
        f[(0, 3)] = -v * dt * s1;
        f[(0, 4)] = -0.5 * v * dt * dt * s1;
        f[(1, 2)] = dt * s1;
        f[(1, 3)] = v * dt * c1;
        f[(1, 4)] = 0.5 * v * dt * dt * c1;
    }
    f[(3, 4)] = dt;
    (Vector5::new(nx, ny, v, wrap_angle(th + w * dt), w), f)
}

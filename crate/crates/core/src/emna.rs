//! Estimation of Multivariate Normal Algorithm, global variant.
//!
//! Each generation samples a population from a full-covariance normal,
//! keeps the elite fraction and refits mean and covariance (maximum
//! likelihood) on the elites. The best sample ever seen is returned, and
//! the initial mean is always evaluated first so the result is never worse
//! than the initializer.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq)]
pub struct EmnaConfig {
    pub population: usize,
    pub elite_fraction: f64,
    pub generations: usize,
    /// Per-dimension standard deviation of the initial distribution.
    pub init_sigma: Vec<f64>,
    pub seed: u64,
}

impl EmnaConfig {
    pub fn new(init_sigma: Vec<f64>, seed: u64) -> Self {
        Self { population: 50, elite_fraction: 0.25, generations: 60, init_sigma, seed }
    }

    pub fn validate(&self, dim: usize) -> Result<(), EmnaError> {
        if self.population < 10 {
            return Err(EmnaError::InvalidConfig("population must be at least 10".into()));
        }
        if !(self.elite_fraction > 0.0 && self.elite_fraction <= 0.5) {
            return Err(EmnaError::InvalidConfig("elite fraction must lie in (0, 0.5]".into()));
        }
        if self.generations < 1 {
            return Err(EmnaError::InvalidConfig("at least one generation is required".into()));
        }
        if self.init_sigma.len() != dim {
            return Err(EmnaError::InvalidConfig(format!(
                "init_sigma has {} entries, problem has {dim} dimensions",
                self.init_sigma.len()
            )));
        }
        if self.init_sigma.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(EmnaError::InvalidConfig("init_sigma must be finite and non-negative".into()));
        }
        Ok(())
    }

    fn elite_count(&self) -> usize {
        ((self.population as f64 * self.elite_fraction).round() as usize).clamp(2, self.population)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmnaError {
    #[error("invalid EMNA configuration: {0}")]
    InvalidConfig(String),
    #[error("no feasible sample found")]
    NoFeasibleSample,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmnaOutcome {
    pub best: Vec<f64>,
    pub best_value: f64,
    pub evaluations: usize,
    pub widened: bool,
}

/// Minimizes `objective`. Infeasible points should return `f64::INFINITY`
/// (or NaN, treated the same way).
///
/// Samples are drawn sequentially from one seeded stream; evaluation runs in
/// parallel but values are combined by index, so results are bit-identical
/// for a given seed.
pub fn minimize<F>(objective: F, init: &[f64], cfg: &EmnaConfig) -> Result<EmnaOutcome, EmnaError>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let dim = init.len();
    cfg.validate(dim)?;
    let clean = |v: f64| if v.is_nan() { f64::INFINITY } else { v };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best = init.to_vec();
    let mut best_value = clean(objective(init));
    let mut evaluations = 1usize;
    let mut widened = false;

    let mut mean = DVector::from_column_slice(init);
    let mut cov = DMatrix::from_diagonal(&DVector::from_iterator(dim, cfg.init_sigma.iter().map(|s| s * s)));
    let elite_n = cfg.elite_count();

    let mut generation = 0;
    while generation < cfg.generations {
        let samples = sample_population(&mean, &cov, cfg.population, &mut rng);
        let values: Vec<f64> = samples.par_iter().map(|s| clean(objective(s.as_slice()))).collect();
        evaluations += samples.len();

        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
        let feasible = order.iter().take_while(|&&i| values[i].is_finite()).count();

        if feasible == 0 && best_value == f64::INFINITY {
            if generation == 0 && !widened {
                widened = true;
                cov *= 4.0;
                continue;
            }
            return Err(EmnaError::NoFeasibleSample);
        }

        let top = order[0];
        if values[top] < best_value {
            best_value = values[top];
            best = samples[top].as_slice().to_vec();
        }

        let elites: Vec<&DVector<f64>> = order.iter().take(elite_n.min(feasible)).map(|&i| &samples[i]).collect();
        if elites.len() >= 2 {
            let n = elites.len() as f64;
            let m = elites.iter().fold(DVector::zeros(dim), |acc, e| acc + *e) / n;
            let mut c = DMatrix::zeros(dim, dim);
            for e in &elites {
                let d = *e - &m;
                c += &d * d.transpose();
            }
            mean = m;
            cov = c / n;
        } else if elites.len() == 1 {
            mean = elites[0].clone();
            cov *= 0.5;
        }
        generation += 1;
    }

    Ok(EmnaOutcome { best, best_value, evaluations, widened })
}

/// Runs [`minimize`] `1 + restarts` times, each restart centered on the
/// best point so far with the original spread and the next seed. Plain
/// EMNA-global shrinks its covariance after travelling roughly two initial
/// standard deviations; restarts let it follow long narrow valleys.
pub fn minimize_with_restarts<F>(
    objective: F,
    init: &[f64],
    cfg: &EmnaConfig,
    restarts: usize,
) -> Result<EmnaOutcome, EmnaError>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let mut out = minimize(&objective, init, cfg)?;
    for k in 1..=restarts {
        let c = EmnaConfig { seed: cfg.seed.wrapping_add(k as u64), ..cfg.clone() };
        let prev = out.best_value;
        let next = minimize(&objective, &out.best, &c)?;
        let improved = next.best_value < prev;
        out = EmnaOutcome {
            evaluations: out.evaluations + next.evaluations,
            widened: out.widened || next.widened,
            ..if improved { next } else { out }
        };
        if !improved {
            break;
        }
    }
    Ok(out)
}

fn sample_population(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<DVector<f64>> {
    let dim = mean.len();
    let sym = (cov + cov.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = DVector::from_iterator(dim, eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()));
    let basis = eig.eigenvectors;
    (0..count)
        .map(|_| {
            let z = DVector::from_iterator(dim, (0..dim).map(|_| StandardNormal.sample(rng)));
            mean + &basis * z.component_mul(&scale)
        })
        .collect()
}

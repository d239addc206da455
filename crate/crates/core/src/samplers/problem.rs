use crate::error::{Error, Result};
use crate::stats::std_normal_log_pdf;

pub type CostFn<'a> = &'a (dyn Fn(&[f64]) -> f64 + Sync);
pub type LogDensityFn<'a> = &'a (dyn Fn(&[f64]) -> f64 + Sync);

/// A rare-event problem in some sampling space: a cost oracle, a diagonal
/// Gaussian reference that seeds the CE proposal and defines the SIS
/// coordinates, and the prior density used in importance weights.
#[derive(Clone)]
pub struct Problem<'a> {
    mean: Vec<f64>,
    scale: Vec<f64>,
    log_scale_sum: f64,
    cost: CostFn<'a>,
    log_prior: Option<LogDensityFn<'a>>,
}

impl<'a> Problem<'a> {
    /// Prior `N(mean, diag(scale²))`, or `log_prior` when given.
    pub fn new(
        mean: Vec<f64>,
        scale: Vec<f64>,
        cost: CostFn<'a>,
        log_prior: Option<LogDensityFn<'a>>,
    ) -> Result<Self> {
        if mean.is_empty() || mean.len() != scale.len() {
            return Err(Error::DimensionMismatch {
                expected: mean.len(),
                got: scale.len(),
            });
        }
        if scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) || mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidConfig("reference Gaussian needs finite mean and positive scale".into()));
        }
        let mut log_scale_sum = 0.0;
        for s in &scale {
            log_scale_sum += s.ln();
        }
        Ok(Self {
            mean,
            scale,
            log_scale_sum,
            cost,
            log_prior,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    pub fn cost(&self, x: &[f64]) -> f64 {
        (self.cost)(x)
    }

    pub fn cost_fn(&self) -> CostFn<'a> {
        self.cost
    }

    pub fn reference_log_pdf(&self, x: &[f64]) -> f64 {
        std_normal_log_pdf(&self.standardize(x)) - self.log_scale_sum
    }

    pub fn log_prior(&self, x: &[f64]) -> f64 {
        match self.log_prior {
            Some(f) => f(x),
            None => self.reference_log_pdf(x),
        }
    }

    pub fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }

    pub fn destandardize(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| m + s * v)
            .collect()
    }
}

/// Standard-normal reference in `dim` dimensions.
pub fn standard_problem(dim: usize, cost: CostFn<'_>) -> Result<Problem<'_>> {
    Problem::new(vec![0.0; dim], vec![1.0; dim], cost, None)
}

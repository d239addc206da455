use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::mixture::GaussianMixtureProposal;
use crate::error::{Error, Result};
use crate::stats::{derive_seed, rng_from_seed, RowMatrix, Rng};

const MC_CHUNK: usize = 8192;

/// Samples with their cost values and log importance weights `log p - log q`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedBatch {
    samples: RowMatrix,
    costs: Vec<f64>,
    log_weights: Vec<f64>,
}

impl WeightedBatch {
    pub fn new(samples: RowMatrix, costs: Vec<f64>, log_weights: Vec<f64>) -> Result<Self> {
        if costs.len() != samples.rows() {
            return Err(Error::DimensionMismatch {
                expected: samples.rows(),
                got: costs.len(),
            });
        }
        if log_weights.len() != samples.rows() {
            return Err(Error::DimensionMismatch {
                expected: samples.rows(),
                got: log_weights.len(),
            });
        }
        if !samples.all_finite() || costs.iter().any(|c| c.is_nan()) {
            return Err(Error::NonFinite("weighted batch samples or costs"));
        }
        if log_weights.iter().any(|w| w.is_nan() || *w == f64::INFINITY) {
            return Err(Error::NonFinite("log importance weights"));
        }
        Ok(Self {
            samples,
            costs,
            log_weights,
        })
    }

    pub fn samples(&self) -> &RowMatrix {
        &self.samples
    }

    pub fn costs(&self) -> &[f64] {
        &self.costs
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn into_parts(self) -> (RowMatrix, Vec<f64>, Vec<f64>) {
        (self.samples, self.costs, self.log_weights)
    }

    pub fn len(&self) -> usize {
        self.costs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.costs.is_empty()
    }
}

/// `(1/N) Σ 1{cost_i ≤ 0} exp(log_weight_i)`.
pub fn is_estimate(batch: &WeightedBatch) -> Result<f64> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = batch
        .costs
        .iter()
        .zip(&batch.log_weights)
        .filter(|(c, _)| **c <= 0.0)
        .fold(0.0, |acc, (_, w)| acc + w.exp());
    let p = sum / batch.len() as f64;
    if !p.is_finite() {
        return Err(Error::NonFinite("importance sampling estimate"));
    }
    Ok(p)
}

/// Diagnostics of one CE or SIS level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelDiagnostics {
    pub level: usize,
    /// CE threshold `gamma_k`.
    pub threshold: Option<f64>,
    /// SIS smoothing parameter `sigma_j`.
    pub sigma: Option<f64>,
    /// Realized coefficient of variation of the SIS incremental weights.
    pub weight_cov: Option<f64>,
    pub effective_sample_size: f64,
    pub acceptance_rate: Option<f64>,
    /// Samples at or below the threshold (CE) or inside the failure set (SIS).
    pub selected: usize,
}

/// Outcome of one estimator run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub method: String,
    pub p_hat: f64,
    /// Estimated coefficient of variation, when defined.
    pub cov_estimate: Option<f64>,
    pub samples_per_level: usize,
    /// Total number of cost-function evaluations.
    pub n_total: usize,
    pub levels: Vec<LevelDiagnostics>,
    pub converged: bool,
    pub proposal: Option<GaussianMixtureProposal>,
    pub seed: u64,
}

/// Plain Monte Carlo: `p_hat = (1/N) Σ 1{cost(x_i) ≤ 0}` with `x_i` drawn from
/// `prior_sampler`. Draws are generated in fixed chunks with derived seeds,
/// so the result is independent of the worker count.
pub fn mc_estimate<C, S>(cost: &C, prior_sampler: &S, n_samples: usize, seed: u64) -> Result<EstimateReport>
where
    C: Fn(&[f64]) -> f64 + Sync + ?Sized,
    S: Fn(&mut Rng) -> Vec<f64> + Sync + ?Sized,
{
    if n_samples == 0 {
        return Err(Error::InvalidConfig("Monte Carlo needs at least one sample".into()));
    }
    let chunks = n_samples.div_ceil(MC_CHUNK);
    let failures: usize = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = rng_from_seed(derive_seed(seed, c as u64));
            let len = MC_CHUNK.min(n_samples - c * MC_CHUNK);
            (0..len).filter(|_| cost(&prior_sampler(&mut rng)) <= 0.0).count()
        })
        .sum();
    let p = failures as f64 / n_samples as f64;
    Ok(EstimateReport {
        method: "mc".into(),
        p_hat: p,
        cov_estimate: mc_cov(p, n_samples),
        samples_per_level: n_samples,
        n_total: n_samples,
        levels: Vec::new(),
        converged: true,
        proposal: None,
        seed,
    })
}

/// `sqrt((1 - p) / (N p))`, undefined at `p = 0`.
pub fn mc_cov(p: f64, n: usize) -> Option<f64> {
    (p > 0.0).then(|| ((1.0 - p) / (n as f64 * p)).sqrt())
}

/// Evaluates `cost` on every row, in parallel, preserving order.
pub(crate) fn eval_costs<C>(cost: &C, samples: &RowMatrix) -> Result<Vec<f64>>
where
    C: Fn(&[f64]) -> f64 + Sync + ?Sized,
{
    let out: Vec<f64> = (0..samples.rows())
        .into_par_iter()
        .map(|i| cost(samples.row(i)))
        .collect();
    if out.iter().any(|c| c.is_nan()) {
        return Err(Error::NonFinite("cost value"));
    }
    Ok(out)
}

use serde::{Deserialize, Serialize};

use super::estimate::{eval_costs, is_estimate, EstimateReport, LevelDiagnostics, WeightedBatch};
use super::mixture::{effective_sample_size, weighted_em_fit, EmSettings, GaussianMixtureProposal};
use super::problem::{standard_problem, CostFn, Problem};
use super::RunOutput;
use crate::error::{Error, Result};
use crate::stats::{derive_seed, lower_quantile, rng_from_seed, sample_std};

const FINAL_STREAM: u64 = 10_000;
const EM_STREAM: u64 = 20_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CeConfig {
    pub samples_per_level: usize,
    pub quantile: f64,
    pub max_levels: usize,
    /// Mixture components; `None` uses one per failure region.
    pub components: Option<usize>,
    pub em_tol: f64,
    pub em_max_iterations: usize,
    pub cov_floor: f64,
    /// Weight `alpha` of the new fit in `alpha * fit + (1 - alpha) * previous`.
    pub smoothing: f64,
}

impl Default for CeConfig {
    fn default() -> Self {
        let em = EmSettings::default();
        Self {
            samples_per_level: 1000,
            quantile: 0.1,
            max_levels: 30,
            components: None,
            em_tol: em.tol,
            em_max_iterations: em.max_iterations,
            cov_floor: em.cov_floor,
            smoothing: 0.7,
        }
    }
}

impl CeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_level < 10 {
            return Err(Error::InvalidConfig("CE needs at least 10 samples per level".into()));
        }
        if !(self.quantile > 0.0 && self.quantile < 1.0) {
            return Err(Error::InvalidConfig(format!("CE quantile {} outside (0, 1)", self.quantile)));
        }
        if self.quantile * (self.samples_per_level as f64) < 2.0 {
            return Err(Error::InvalidConfig("quantile times samples per level must be at least 2".into()));
        }
        if self.max_levels == 0 || self.components == Some(0) {
            return Err(Error::InvalidConfig("CE max_levels and components must be positive".into()));
        }
        if !(self.smoothing > 0.0 && self.smoothing <= 1.0) {
            return Err(Error::InvalidConfig(format!("CE smoothing {} outside (0, 1]", self.smoothing)));
        }
        if !(self.em_tol >= 0.0 && self.cov_floor > 0.0) {
            return Err(Error::InvalidConfig("EM tolerance and covariance floor must be positive".into()));
        }
        Ok(())
    }

    fn em(&self) -> EmSettings {
        EmSettings {
            tol: self.em_tol,
            max_iterations: self.em_max_iterations,
            cov_floor: self.cov_floor,
        }
    }
}

/// Cross-entropy method under a standard-normal prior in `dim` dimensions.
pub fn ce_method(cost: CostFn<'_>, dim: usize, config: &CeConfig, seed: u64) -> Result<EstimateReport> {
    let problem = standard_problem(dim, cost)?;
    Ok(ce_run(&problem, config, seed)?.report)
}

/// Cross-entropy method on a general problem.
///
/// Each level draws from the current proposal, sets `gamma_k` to the lower
/// quantile of the costs (clamped at zero and never above the previous
/// level), and refits the mixture on the elites with weights `p/q_k`. The
/// refit made at the first level with `gamma_k = 0` is final, and the estimate
/// comes from a fresh batch drawn from it.
pub fn ce_run(problem: &Problem<'_>, config: &CeConfig, seed: u64) -> Result<RunOutput> {
    config.validate()?;
    let components = config.components.unwrap_or(1);
    let n_s = config.samples_per_level;
    let mut proposal = GaussianMixtureProposal::diagonal(problem.mean(), problem.scale())?;
    let mut n_total = 0;
    let mut levels = Vec::new();
    let mut previous_gamma = f64::INFINITY;
    let mut converged = false;

    for k in 1..=config.max_levels {
        let mut rng = rng_from_seed(derive_seed(seed, k as u64));
        let samples = proposal.sample_n(n_s, &mut rng);
        let costs = eval_costs(&problem.cost_fn(), &samples)?;
        n_total += n_s;

        let gamma = lower_quantile(&costs, config.quantile).max(0.0).min(previous_gamma);
        previous_gamma = gamma;
        let elite_idx: Vec<usize> = (0..n_s).filter(|&i| costs[i] <= gamma).collect();
        if elite_idx.len() < 2 {
            return Err(Error::NoElites { level: k });
        }
        if gamma <= 0.0 {
            converged = true;
            if elite_idx.len() == n_s {
                // every draw fails: the current proposal is already final
                let w: Vec<f64> = elite_idx
                    .iter()
                    .map(|&i| problem.log_prior(samples.row(i)) - proposal.log_pdf(samples.row(i)))
                    .collect();
                levels.push(diagnostics(k, gamma, &w, n_s));
                break;
            }
        }

        let elites = samples.select_rows(&elite_idx);
        let log_w: Vec<f64> = elite_idx
            .iter()
            .map(|&i| problem.log_prior(samples.row(i)) - proposal.log_pdf(samples.row(i)))
            .collect();
        levels.push(diagnostics(k, gamma, &log_w, elite_idx.len()));
        let max_lw = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !max_lw.is_finite() {
            return Err(Error::ZeroWeights);
        }
        let w: Vec<f64> = log_w.iter().map(|l| (l - max_lw).exp()).collect();
        let c = components.min(elites.rows() - 1).max(1);
        let fit = weighted_em_fit(&elites, &w, c, config.em(), derive_seed(seed, EM_STREAM + k as u64))?.mixture;
        proposal = smooth(&fit, &proposal, config.smoothing)?;
        if converged {
            break;
        }
    }

    let mut rng = rng_from_seed(derive_seed(seed, FINAL_STREAM));
    let samples = proposal.sample_n(n_s, &mut rng);
    let costs = eval_costs(&problem.cost_fn(), &samples)?;
    n_total += n_s;
    let log_w: Vec<f64> = samples
        .iter_rows()
        .map(|x| problem.log_prior(x) - proposal.log_pdf(x))
        .collect();
    let batch = WeightedBatch::new(samples, costs, log_w)?;
    let p_hat = is_estimate(&batch)?;
    let report = EstimateReport {
        method: "ce".into(),
        p_hat,
        cov_estimate: is_cov(&batch, p_hat),
        samples_per_level: n_s,
        n_total,
        levels,
        converged,
        proposal: Some(proposal),
        seed,
    };
    let (samples, costs, _) = batch.into_parts();
    Ok(RunOutput {
        report,
        samples,
        costs,
    })
}

/// Blends a new fit with the previous proposal, pairing components by
/// nearest means. Mixtures with different component counts are not blended.
fn smooth(
    fit: &GaussianMixtureProposal,
    previous: &GaussianMixtureProposal,
    alpha: f64,
) -> Result<GaussianMixtureProposal> {
    if alpha >= 1.0 || fit.components() != previous.components() {
        return Ok(fit.clone());
    }
    let c = fit.components();
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut taken = vec![false; c];
    let mut pair = vec![0; c];
    for (i, m) in fit.means().iter().enumerate() {
        let j = (0..c)
            .filter(|&j| !taken[j])
            .min_by(|&a, &b| dist(m, &previous.means()[a]).total_cmp(&dist(m, &previous.means()[b])))
            .unwrap();
        taken[j] = true;
        pair[i] = j;
    }
    let blend = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| alpha * x + (1.0 - alpha) * y).collect() };
    let mut weights: Vec<f64> = (0..c)
        .map(|i| alpha * fit.weights()[i] + (1.0 - alpha) * previous.weights()[pair[i]])
        .collect();
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    let last = c - 1;
    weights[last] += 1.0 - weights.iter().sum::<f64>();
    let means = (0..c).map(|i| blend(&fit.means()[i], &previous.means()[pair[i]])).collect();
    let covs = (0..c)
        .map(|i| blend(&fit.covariances()[i], &previous.covariances()[pair[i]]))
        .collect();
    GaussianMixtureProposal::new(weights, means, covs)
}

fn diagnostics(level: usize, gamma: f64, log_w: &[f64], selected: usize) -> LevelDiagnostics {
    let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
    LevelDiagnostics {
        level,
        threshold: Some(gamma),
        sigma: None,
        weight_cov: None,
        effective_sample_size: effective_sample_size(&w),
        acceptance_rate: None,
        selected,
    }
}

/// Estimated coefficient of variation of an IS estimate.
pub(crate) fn is_cov(batch: &WeightedBatch, p_hat: f64) -> Option<f64> {
    if !(p_hat > 0.0) || batch.len() < 2 {
        return None;
    }
    let terms: Vec<f64> = batch
        .costs()
        .iter()
        .zip(batch.log_weights())
        .map(|(c, w)| if *c <= 0.0 { w.exp() } else { 0.0 })
        .collect();
    Some(sample_std(&terms) / (p_hat * (batch.len() as f64).sqrt()))
}

use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::estimate::{eval_costs, EstimateReport, LevelDiagnostics};
use super::mixture::{effective_sample_size, weighted_em_fit, EmSettings, GaussianMixtureProposal};
use super::problem::{standard_problem, CostFn, Problem};
use super::RunOutput;
use crate::error::{Error, Result};
use crate::stats::{derive_seed, log_norm_cdf, log_sum_exp, mean, rng_from_seed, sample_std, RowMatrix};

const RESAMPLE_STREAM: u64 = 50_000;
const MOVE_STREAM: u64 = 60_000;
const EM_STREAM: u64 = 70_000;
const STALL_TOL: f64 = 1e-6;
const COV_TOL: f64 = 1e-4;
const BISECTION_STEPS: usize = 300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SisConfig {
    pub samples_per_level: usize,
    /// Target coefficient of variation of the incremental weights.
    pub cov_target: f64,
    /// CSMH correlation `rho_c`.
    pub correlation: f64,
    /// CSMH sweeps per particle at each level.
    pub mcmc_steps: usize,
    pub max_levels: usize,
    /// Components of the reported proposal; `None` uses one per failure region.
    pub components: Option<usize>,
    pub cov_floor: f64,
}

impl Default for SisConfig {
    fn default() -> Self {
        Self {
            samples_per_level: 1000,
            cov_target: 1.5,
            correlation: 0.8,
            mcmc_steps: 5,
            max_levels: 30,
            components: None,
            cov_floor: EmSettings::default().cov_floor,
        }
    }
}

impl SisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_level < 10 {
            return Err(Error::InvalidConfig("SIS needs at least 10 samples per level".into()));
        }
        if !(self.cov_target > 0.0 && self.cov_target.is_finite()) {
            return Err(Error::InvalidConfig("SIS weight CoV target must be positive".into()));
        }
        if !(self.correlation > 0.0 && self.correlation < 1.0) {
            return Err(Error::InvalidConfig("CSMH correlation must lie in (0, 1)".into()));
        }
        if self.mcmc_steps == 0 || self.max_levels == 0 || self.components == Some(0) {
            return Err(Error::InvalidConfig("SIS steps, levels and components must be positive".into()));
        }
        if !(self.cov_floor > 0.0) {
            return Err(Error::InvalidConfig("covariance floor must be positive".into()));
        }
        Ok(())
    }
}

/// Particles after a CSMH move.
#[derive(Debug, Clone, PartialEq)]
pub struct CsmhOutput {
    pub particles: RowMatrix,
    pub costs: Vec<f64>,
    pub acceptance_rate: f64,
    pub evaluations: usize,
}

/// `ln Phi(-f / sigma)`; level zero (`sigma = None`) is the constant 1.
fn log_smoothed(f: f64, sigma: Option<f64>) -> f64 {
    match sigma {
        None => 0.0,
        Some(s) => log_norm_cdf(-f / s),
    }
}

/// Conditional-sampling Metropolis–Hastings targeting
/// `N(u; 0, I) Phi(-cost(u)/sigma)`. Each particle runs its own chain from a
/// derived seed, so the result does not depend on the worker count.
pub fn csmh_move<C>(
    particles: &RowMatrix,
    costs: &[f64],
    sigma: f64,
    correlation: f64,
    cost: &C,
    steps: usize,
    seed: u64,
) -> Result<CsmhOutput>
where
    C: Fn(&[f64]) -> f64 + Sync + ?Sized,
{
    if !(sigma > 0.0) {
        return Err(Error::InvalidConfig(format!("CSMH smoothing level must be positive, got {sigma}")));
    }
    if !(correlation > 0.0 && correlation < 1.0) {
        return Err(Error::InvalidConfig("CSMH correlation must lie in (0, 1)".into()));
    }
    if costs.len() != particles.rows() {
        return Err(Error::DimensionMismatch {
            expected: particles.rows(),
            got: costs.len(),
        });
    }
    let n = particles.cols();
    let spread = (1.0 - correlation * correlation).sqrt();
    let moved: Vec<(Vec<f64>, f64, usize)> = (0..particles.rows())
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_from_seed(derive_seed(seed, i as u64));
            let mut u = particles.row(i).to_vec();
            let mut f = costs[i];
            let mut log_target = log_norm_cdf(-f / sigma);
            let mut accepted = 0;
            let mut cand = vec![0.0; n];
            for _ in 0..steps {
                for (c, x) in cand.iter_mut().zip(&u) {
                    let e: f64 = rng.sample(StandardNormal);
                    *c = correlation * x + spread * e;
                }
                let f_new = cost(&cand);
                let log_new = log_norm_cdf(-f_new / sigma);
                let log_u: f64 = rng.random::<f64>().ln();
                if log_u < log_new - log_target {
                    u.copy_from_slice(&cand);
                    f = f_new;
                    log_target = log_new;
                    accepted += 1;
                }
            }
            (u, f, accepted)
        })
        .collect();
    let mut out = RowMatrix::zeros(particles.rows(), n);
    let mut out_costs = Vec::with_capacity(particles.rows());
    let mut accepted = 0;
    for (i, (u, f, a)) in moved.into_iter().enumerate() {
        out.row_mut(i).copy_from_slice(&u);
        out_costs.push(f);
        accepted += a;
    }
    if out_costs.iter().any(|c| c.is_nan()) {
        return Err(Error::NonFinite("cost value"));
    }
    let evaluations = particles.rows() * steps;
    Ok(CsmhOutput {
        particles: out,
        costs: out_costs,
        acceptance_rate: if evaluations > 0 {
            accepted as f64 / evaluations as f64
        } else {
            0.0
        },
        evaluations,
    })
}

/// Coefficient of variation of weights given in the log domain.
fn cov_of_log_weights(log_w: &[f64]) -> f64 {
    let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return f64::NAN;
    }
    let w: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
    sample_std(&w) / mean(&w)
}

fn incremental_log_weights(costs: &[f64], new: f64, old: Option<f64>) -> Vec<f64> {
    costs
        .iter()
        .map(|&f| log_smoothed(f, Some(new)) - log_smoothed(f, old))
        .collect()
}

/// Next smoothing level: bisection on `ln sigma` for the weight CoV target.
fn next_sigma(costs: &[f64], old: Option<f64>, target: f64) -> f64 {
    let cov_at = |log_s: f64| cov_of_log_weights(&incremental_log_weights(costs, log_s.exp(), old));
    let mut hi = match old {
        Some(s) => s.ln(),
        None => {
            let scale = costs.iter().map(|c| c.abs()).filter(|c| c.is_finite()).fold(0.0, f64::max);
            (10.0 * scale + 1.0).ln()
        }
    };
    if old.is_none() {
        for _ in 0..60 {
            if cov_at(hi) < target {
                break;
            }
            hi += 2.0;
        }
    }
    let mut lo = hi - 60.0;
    if !(cov_at(lo) >= target) {
        return lo.exp();
    }
    let mut mid = 0.5 * (lo + hi);
    for _ in 0..BISECTION_STEPS {
        mid = 0.5 * (lo + hi);
        let c = cov_at(mid);
        if (c - target).abs() <= COV_TOL {
            break;
        }
        if c > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    mid.exp()
}

/// Multinomial resampling indices.
fn resample(log_w: &[f64], count: usize, seed: u64) -> Vec<usize> {
    let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut cum = Vec::with_capacity(log_w.len());
    let mut acc = 0.0;
    for l in log_w {
        acc += (l - max).exp();
        cum.push(acc);
    }
    let mut rng = rng_from_seed(seed);
    (0..count)
        .map(|_| {
            let u = rng.random::<f64>() * acc;
            cum.partition_point(|&c| c <= u).min(log_w.len() - 1)
        })
        .collect()
}

/// Sequential importance sampling under a standard-normal prior.
pub fn sis(cost: CostFn<'_>, dim: usize, config: &SisConfig, seed: u64) -> Result<EstimateReport> {
    let problem = standard_problem(dim, cost)?;
    Ok(sis_run(&problem, config, seed)?.report)
}

/// Sequential importance sampling on a general problem.
///
/// Works in the reference's standardized coordinates, where the reference is
/// `N(0, I)`. Levels follow `N(v; 0, I) Phi(-f/sigma_j)` with `sigma_j` chosen
/// so the incremental weights hit the CoV target; particles are resampled and
/// moved by CSMH. A prior other than the reference enters through the weight
/// `p/g` in the final average.
pub fn sis_run(problem: &Problem<'_>, config: &SisConfig, seed: u64) -> Result<RunOutput> {
    config.validate()?;
    let n_s = config.samples_per_level;
    let dim = problem.dim();
    let cost_v = |v: &[f64]| problem.cost(&problem.destandardize(v));

    let mut rng = rng_from_seed(derive_seed(seed, 0));
    let mut particles = RowMatrix::zeros(n_s, dim);
    for i in 0..n_s {
        for v in particles.row_mut(i) {
            *v = rng.sample(StandardNormal);
        }
    }
    let mut costs = eval_costs(&cost_v, &particles)?;
    let mut n_total = n_s;
    let mut sigma: Option<f64> = None;
    let mut log_p = 0.0;
    let mut levels = Vec::new();
    let mut converged = false;

    loop {
        let final_log_w: Vec<f64> = costs
            .iter()
            .map(|&f| {
                if f <= 0.0 {
                    -log_smoothed(f, sigma)
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        let failures = costs.iter().filter(|&&f| f <= 0.0).count();
        if failures > 0 && cov_of_log_weights(&final_log_w) <= config.cov_target {
            converged = true;
            break;
        }
        if levels.len() == config.max_levels {
            break;
        }
        let level = levels.len() + 1;
        let new_sigma = next_sigma(&costs, sigma, config.cov_target);
        if let Some(old) = sigma {
            if old - new_sigma < STALL_TOL {
                log::warn!("SIS tempering stalled at sigma = {new_sigma:e}");
                break;
            }
        }
        let inc = incremental_log_weights(&costs, new_sigma, sigma);
        log_p += log_sum_exp(&inc) - (n_s as f64).ln();
        let realized = cov_of_log_weights(&inc);
        let max = inc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let ess = effective_sample_size(&inc.iter().map(|l| (l - max).exp()).collect::<Vec<_>>());

        let idx = resample(&inc, n_s, derive_seed(seed, RESAMPLE_STREAM + level as u64));
        let picked = particles.select_rows(&idx);
        let picked_costs: Vec<f64> = idx.iter().map(|&i| costs[i]).collect();
        let moved = csmh_move(
            &picked,
            &picked_costs,
            new_sigma,
            config.correlation,
            &cost_v,
            config.mcmc_steps,
            derive_seed(seed, MOVE_STREAM + level as u64),
        )?;
        n_total += moved.evaluations;
        particles = moved.particles;
        costs = moved.costs;
        levels.push(LevelDiagnostics {
            level,
            threshold: None,
            sigma: Some(new_sigma),
            weight_cov: Some(realized),
            effective_sample_size: ess,
            acceptance_rate: Some(moved.acceptance_rate),
            selected: costs.iter().filter(|&&f| f <= 0.0).count(),
        });
        sigma = Some(new_sigma);
    }

    let samples = {
        let mut x = RowMatrix::zeros(n_s, dim);
        for i in 0..n_s {
            x.row_mut(i).copy_from_slice(&problem.destandardize(particles.row(i)));
        }
        x
    };
    // log of 1{f <= 0} (p/g) / Phi(-f/sigma_J) per particle
    let final_terms: Vec<f64> = (0..n_s)
        .map(|i| {
            if costs[i] <= 0.0 {
                let x = samples.row(i);
                problem.log_prior(x) - problem.reference_log_pdf(x) - log_smoothed(costs[i], sigma)
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let failures = costs.iter().filter(|&&f| f <= 0.0).count();
    let (p_hat, cov_estimate) = if failures > 0 {
        let log_mean = log_sum_exp(&final_terms) - (n_s as f64).ln();
        let p = (log_p + log_mean).exp().min(1.0);
        (p, Some(cov_of_log_weights(&final_terms) / (n_s as f64).sqrt()))
    } else {
        (0.0, None)
    };
    if !p_hat.is_finite() {
        return Err(Error::NonFinite("SIS estimate"));
    }

    let proposal = fit_proposal(&samples, &final_terms, problem, config, seed)?;
    let report = EstimateReport {
        method: "sis".into(),
        p_hat,
        cov_estimate,
        samples_per_level: n_s,
        n_total,
        levels,
        converged,
        proposal: Some(proposal),
        seed,
    };
    Ok(RunOutput {
        report,
        samples,
        costs,
    })
}

/// Mixture fit to the final particles weighted toward the optimal IS density;
/// falls back to all particles when none has failed.
fn fit_proposal(
    samples: &RowMatrix,
    log_terms: &[f64],
    problem: &Problem<'_>,
    config: &SisConfig,
    seed: u64,
) -> Result<GaussianMixtureProposal> {
    let max = log_terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = if max.is_finite() {
        log_terms.iter().map(|l| (l - max).exp()).collect()
    } else {
        vec![1.0; samples.rows()]
    };
    let support = weights.iter().filter(|&&w| w > 0.0).count();
    if support < 2 {
        return GaussianMixtureProposal::diagonal(problem.mean(), problem.scale());
    }
    let c = config.components.unwrap_or(1).min(support - 1).max(1);
    let em = EmSettings {
        cov_floor: config.cov_floor,
        ..EmSettings::default()
    };
    Ok(weighted_em_fit(samples, &weights, c, em, derive_seed(seed, EM_STREAM))?.mixture)
}

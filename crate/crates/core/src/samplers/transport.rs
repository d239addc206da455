use serde::{Deserialize, Serialize};

use super::ce::{ce_run, CeConfig};
use super::problem::Problem;
use super::sis::{sis_run, SisConfig};
use super::{EstimateReport, RunOutput};
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::geometry::{FailureRegionSet, Space};
use crate::stats::RowMatrix;

/// Importance sampling method and its settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "config", rename_all = "lowercase")]
pub enum IsMethod {
    Ce(CeConfig),
    Sis(SisConfig),
}

impl IsMethod {
    pub fn name(&self) -> &'static str {
        match self {
            IsMethod::Ce(_) => "ce",
            IsMethod::Sis(_) => "sis",
        }
    }

    /// Fills an unset component count.
    pub fn with_components(&self, components: usize) -> Self {
        let mut m = self.clone();
        match &mut m {
            IsMethod::Ce(c) => {
                c.components.get_or_insert(components);
            }
            IsMethod::Sis(c) => {
                c.components.get_or_insert(components);
            }
        }
        m
    }
}

pub fn run_method(problem: &Problem<'_>, method: &IsMethod, seed: u64) -> Result<RunOutput> {
    match method {
        IsMethod::Ce(c) => ce_run(problem, c, seed),
        IsMethod::Sis(c) => sis_run(problem, c, seed),
    }
}

/// Result of a latent- or target-space IS run.
#[derive(Debug, Clone, PartialEq)]
pub struct IsOutcome {
    pub report: EstimateReport,
    pub regions: FailureRegionSet,
    /// Final sample set in target space.
    pub target_samples: RowMatrix,
    /// The same samples in latent space.
    pub latent_samples: RowMatrix,
    /// Costs of the final samples in the sampling space.
    pub costs: Vec<f64>,
}

impl IsOutcome {
    /// Target-space final samples whose sampling-space cost is non-positive.
    pub fn failure_samples(&self) -> RowMatrix {
        let idx: Vec<usize> = (0..self.costs.len()).filter(|&i| self.costs[i] <= 0.0).collect();
        self.target_samples.select_rows(&idx)
    }
}

fn check_sets(flow: &FlowModel, failure_sets: &[RowMatrix]) -> Result<()> {
    if failure_sets.is_empty() {
        return Err(Error::EmptyRegionSet);
    }
    for set in failure_sets {
        if set.cols() != flow.dim() {
            return Err(Error::DimensionMismatch {
                expected: flow.dim(),
                got: set.cols(),
            });
        }
        if !set.all_finite() {
            return Err(Error::NonFinite("failure point set"));
        }
    }
    Ok(())
}

/// Importance sampling in the flow's latent space: failure point sets are
/// pulled back through the flow, enclosed by minimum-volume ellipsoids, and
/// the chosen method runs against the latent cost under the `N(0, I)` base.
pub fn latent_is(
    flow: &FlowModel,
    failure_sets: &[RowMatrix],
    method: &IsMethod,
    seed: u64,
    mvee_tol: f64,
) -> Result<IsOutcome> {
    check_sets(flow, failure_sets)?;
    let latent_sets = failure_sets
        .iter()
        .map(|x| flow.inverse_batch(x))
        .collect::<Result<Vec<_>>>()?;
    if latent_sets.iter().any(|u| !u.all_finite()) {
        return Err(Error::NonFinite("latent image of a failure point set"));
    }
    let regions = FailureRegionSet::fit(&latent_sets, Space::Latent, mvee_tol)?;
    let cost = |u: &[f64]| regions.cost(u);
    let n = flow.dim();
    let problem = Problem::new(vec![0.0; n], vec![1.0; n], &cost, None)?;
    let out = run_method(&problem, &method.with_components(regions.len()), seed)?;
    let target_samples = flow.forward_batch(&out.samples)?;
    Ok(IsOutcome {
        report: out.report,
        target_samples,
        latent_samples: out.samples,
        costs: out.costs,
        regions,
    })
}

/// Importance sampling directly in target space, with ellipsoids fitted to
/// the raw failure points and the flow density as the prior.
pub fn target_is(
    flow: &FlowModel,
    failure_sets: &[RowMatrix],
    method: &IsMethod,
    seed: u64,
    mvee_tol: f64,
) -> Result<IsOutcome> {
    check_sets(flow, failure_sets)?;
    let regions = FailureRegionSet::fit(failure_sets, Space::Target, mvee_tol)?;
    let cost = |x: &[f64]| regions.cost(x);
    let log_prior = |x: &[f64]| flow.log_prob(x).unwrap_or(f64::NEG_INFINITY);
    let std = flow.standardizer();
    let problem = Problem::new(std.mean.clone(), std.scale.clone(), &cost, Some(&log_prior))?;
    let out = run_method(&problem, &method.with_components(regions.len()), seed)?;
    let latent_samples = flow.inverse_batch(&out.samples)?;
    Ok(IsOutcome {
        report: out.report,
        latent_samples,
        target_samples: out.samples,
        costs: out.costs,
        regions,
    })
}

mod kdtree;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use kdtree::{euclidean, KdTree};

use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::stats::RowMatrix;

pub const DEFAULT_K: usize = 5;
pub const DEFAULT_EVAL_SIZE: usize = 2000;

/// Metrics of one estimator run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub relative_error: f64,
    pub avg_nll: Option<f64>,
    pub coverage: f64,
    pub density: f64,
    pub n_total: usize,
    pub n_eval: usize,
    pub k: usize,
}

/// `(p_hat - p_ref) / p_ref`; positive means overestimate.
pub fn relative_error(p_hat: f64, p_ref: f64) -> Result<f64> {
    if !(p_ref > 0.0 && p_ref.is_finite()) {
        return Err(Error::InvalidConfig(format!("reference probability must be positive, got {p_ref}")));
    }
    Ok((p_hat - p_ref) / p_ref)
}

/// Mean negative log-likelihood under the flow and the number of samples
/// excluded for a non-finite log-density.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NllSummary {
    pub mean: Option<f64>,
    pub excluded: usize,
}

pub fn avg_nll(flow: &FlowModel, samples: &RowMatrix) -> Result<NllSummary> {
    if samples.cols() != flow.dim() {
        return Err(Error::DimensionMismatch {
            expected: flow.dim(),
            got: samples.cols(),
        });
    }
    let lp: Vec<f64> = (0..samples.rows())
        .into_par_iter()
        .map(|i| flow.log_prob(samples.row(i)).unwrap_or(f64::NAN))
        .collect();
    let mut sum = 0.0;
    let mut used = 0usize;
    for v in &lp {
        if v.is_finite() {
            sum -= v;
            used += 1;
        }
    }
    let excluded = lp.len() - used;
    if excluded > 0 {
        log::warn!("avg_nll: excluded {excluded} samples with non-finite log-density");
    }
    Ok(NllSummary {
        mean: (used > 0).then(|| sum / used as f64),
        excluded,
    })
}

fn check_sets(real: &RowMatrix, generated: &RowMatrix, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    if real.rows() <= k {
        return Err(Error::InvalidConfig(format!(
            "need more than k = {k} real points, got {}",
            real.rows()
        )));
    }
    if !generated.is_empty() && generated.cols() != real.cols() {
        return Err(Error::DimensionMismatch {
            expected: real.cols(),
            got: generated.cols(),
        });
    }
    if !real.all_finite() || !generated.all_finite() {
        return Err(Error::NonFinite("metric input points"));
    }
    Ok(())
}

/// Distance from each real point to its `k`-th nearest other real point.
pub fn knn_radii(real: &RowMatrix, k: usize) -> Vec<f64> {
    let tree = KdTree::new(real);
    (0..real.rows())
        .into_par_iter()
        .map(|i| tree.kth_distance(real.row(i), k, Some(i)).unwrap_or(f64::INFINITY))
        .collect()
}

/// Fraction of real points whose `k`-NN ball (boundary included) holds at
/// least one generated point.
pub fn coverage(real: &RowMatrix, generated: &RowMatrix, k: usize) -> Result<f64> {
    check_sets(real, generated, k)?;
    if generated.is_empty() {
        return Ok(0.0);
    }
    let radii = knn_radii(real, k);
    let gen_tree = KdTree::new(generated);
    let covered: usize = (0..real.rows())
        .into_par_iter()
        .filter(|&i| gen_tree.nearest_distance(real.row(i), None).is_some_and(|d| d <= radii[i]))
        .count();
    Ok(covered as f64 / real.rows() as f64)
}

/// `(1 / kM) Σ_j #{i : ‖g_j − x_i‖ ≤ r_i}`.
pub fn density(real: &RowMatrix, generated: &RowMatrix, k: usize) -> Result<f64> {
    check_sets(real, generated, k)?;
    if generated.is_empty() {
        return Ok(0.0);
    }
    let tree = KdTree::with_radii(real, knn_radii(real, k));
    let hits: usize = (0..generated.rows())
        .into_par_iter()
        .map(|j| tree.count_balls_containing(generated.row(j)))
        .sum();
    Ok(hits as f64 / (k * generated.rows()) as f64)
}

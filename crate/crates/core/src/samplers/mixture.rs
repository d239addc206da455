use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{log_sum_exp, rng_from_seed, RowMatrix, Rng, LN_2PI};

pub const DEFAULT_COV_FLOOR: f64 = 1e-6;
const WEIGHT_SUM_TOL: f64 = 1e-12;
const DROP_MASS: f64 = 1e-10;
const LLOYD_ITERATIONS: usize = 10;

/// Serialized form of a mixture: covariances are row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Vec<f64>>,
}

/// Gaussian mixture `q(x) = Σ_c w_c N(x; m_c, S_c)` used as an IS proposal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MixtureParams", into = "MixtureParams")]
pub struct GaussianMixtureProposal {
    dim: usize,
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    covariances: Vec<Vec<f64>>,
    // lower Cholesky factors, row-major
    chol: Vec<Vec<f64>>,
    log_norm: Vec<f64>,
    log_weights: Vec<f64>,
}

impl TryFrom<MixtureParams> for GaussianMixtureProposal {
    type Error = Error;

    fn try_from(p: MixtureParams) -> Result<Self> {
        Self::new(p.weights, p.means, p.covariances)
    }
}

impl From<GaussianMixtureProposal> for MixtureParams {
    fn from(g: GaussianMixtureProposal) -> Self {
        Self {
            weights: g.weights,
            means: g.means,
            covariances: g.covariances,
        }
    }
}

impl GaussianMixtureProposal {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, covariances: Vec<Vec<f64>>) -> Result<Self> {
        let c = weights.len();
        if c == 0 || means.len() != c || covariances.len() != c {
            return Err(Error::InvalidConfig(format!(
                "mixture needs matching non-empty weights, means and covariances (got {}, {}, {})",
                c,
                means.len(),
                covariances.len()
            )));
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(Error::InvalidConfig("mixture dimension must be positive".into()));
        }
        for (m, s) in means.iter().zip(&covariances) {
            if m.len() != dim || s.len() != dim * dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: m.len(),
                });
            }
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidConfig("mixture weights must be finite and non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidConfig(format!("mixture weights sum to {total}, not 1")));
        }
        let mut chol = Vec::with_capacity(c);
        let mut log_norm = Vec::with_capacity(c);
        for s in &covariances {
            let m = DMatrix::from_row_slice(dim, dim, s);
            if s.iter().any(|v| !v.is_finite()) || (&m - m.transpose()).amax() > 1e-9 * m.amax().max(1.0) {
                return Err(Error::NotPositiveDefinite("mixture covariance"));
            }
            let l = m
                .cholesky()
                .ok_or(Error::NotPositiveDefinite("mixture covariance"))?
                .l();
            let log_det: f64 = 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
            log_norm.push(-0.5 * (dim as f64 * LN_2PI + log_det));
            chol.push((0..dim).flat_map(|i| (0..dim).map(move |j| (i, j))).map(|(i, j)| l[(i, j)]).collect());
        }
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        Ok(Self {
            dim,
            weights,
            means,
            covariances,
            chol,
            log_norm,
            log_weights,
        })
    }

    /// Single Gaussian with diagonal covariance `scale²`.
    pub fn diagonal(mean: &[f64], scale: &[f64]) -> Result<Self> {
        let n = mean.len();
        let mut cov = vec![0.0; n * n];
        for i in 0..n {
            cov[i * n + i] = scale[i] * scale[i];
        }
        Self::new(vec![1.0], vec![mean.to_vec()], vec![cov])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn covariances(&self) -> &[Vec<f64>] {
        &self.covariances
    }

    pub fn covariance_matrix(&self, c: usize) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim, self.dim, &self.covariances[c])
    }

    fn component_log_pdf(&self, c: usize, x: &[f64]) -> f64 {
        let n = self.dim;
        let l = &self.chol[c];
        let m = &self.means[c];
        // solve L z = x - m
        let mut z = [0.0f64; 16];
        let mut heap;
        let z: &mut [f64] = if n <= 16 {
            &mut z[..n]
        } else {
            heap = vec![0.0; n];
            &mut heap
        };
        let mut sq = 0.0;
        for i in 0..n {
            let mut s = x[i] - m[i];
            for j in 0..i {
                s -= l[i * n + j] * z[j];
            }
            z[i] = s / l[i * n + i];
            sq += z[i] * z[i];
        }
        self.log_norm[c] - 0.5 * sq
    }

    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim);
        if self.weights.len() == 1 {
            return self.component_log_pdf(0, x);
        }
        let terms: Vec<f64> = (0..self.weights.len())
            .map(|c| self.log_weights[c] + self.component_log_pdf(c, x))
            .collect();
        log_sum_exp(&terms)
    }

    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        let c = if self.weights.len() == 1 {
            0
        } else {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = self.weights.len() - 1;
            for (i, w) in self.weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            pick
        };
        let n = self.dim;
        let eps: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let l = &self.chol[c];
        (0..n)
            .map(|i| {
                let mut s = self.means[c][i];
                for j in 0..=i {
                    s += l[i * n + j] * eps[j];
                }
                s
            })
            .collect()
    }

    pub fn sample_n(&self, count: usize, rng: &mut Rng) -> RowMatrix {
        let mut out = RowMatrix::zeros(count, self.dim);
        for i in 0..count {
            let s = self.sample(rng);
            out.row_mut(i).copy_from_slice(&s);
        }
        out
    }
}

/// Raises every eigenvalue of a symmetric matrix to at least `floor`.
pub fn floor_covariance(cov: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let sym = (cov + cov.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym.clone());
    if eig.eigenvalues.iter().all(|&l| l >= floor) {
        return sym;
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(floor)));
    let r = &eig.eigenvectors * d * eig.eigenvectors.transpose();
    (&r + r.transpose()) * 0.5
}

/// Result of a weighted EM run.
#[derive(Debug, Clone)]
pub struct EmFit {
    pub mixture: GaussianMixtureProposal,
    /// Normalized weighted log-likelihood before each M-step.
    pub log_likelihoods: Vec<f64>,
    pub dropped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmSettings {
    pub tol: f64,
    pub max_iterations: usize,
    pub cov_floor: f64,
}

impl Default for EmSettings {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iterations: 200,
            cov_floor: DEFAULT_COV_FLOOR,
        }
    }
}

fn normalized_weights(samples: &RowMatrix, weights: &[f64]) -> Result<Vec<f64>> {
    if weights.len() != samples.rows() {
        return Err(Error::DimensionMismatch {
            expected: samples.rows(),
            got: weights.len(),
        });
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::NonFinite("EM sample weights"));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::ZeroWeights);
    }
    if !samples.all_finite() {
        return Err(Error::NonFinite("EM samples"));
    }
    Ok(weights.iter().map(|w| w / total).collect())
}

/// Importance-weighted EM for a `components`-term Gaussian mixture, started
/// from a seeded weighted k-means++ clustering.
pub fn weighted_em_fit(
    samples: &RowMatrix,
    weights: &[f64],
    components: usize,
    settings: EmSettings,
    seed: u64,
) -> Result<EmFit> {
    let w = normalized_weights(samples, weights)?;
    if components == 0 {
        return Err(Error::InvalidConfig("mixture needs at least one component".into()));
    }
    if samples.rows() <= components {
        return Err(Error::InvalidConfig(format!(
            "weighted EM needs more samples than components ({} <= {components})",
            samples.rows()
        )));
    }
    let init = kmeans_init(samples, &w, components, settings.cov_floor, seed)?;
    weighted_em_from(samples, &w, init, settings)
}

/// Weighted EM from a given starting mixture.
pub fn weighted_em_from(
    samples: &RowMatrix,
    weights: &[f64],
    init: GaussianMixtureProposal,
    settings: EmSettings,
) -> Result<EmFit> {
    let w = normalized_weights(samples, weights)?;
    if init.dim() != samples.cols() {
        return Err(Error::DimensionMismatch {
            expected: init.dim(),
            got: samples.cols(),
        });
    }
    let n = samples.cols();
    let rows = samples.rows();
    let mut mix = init;
    let mut history = Vec::new();
    let mut dropped = 0;
    let mut resp = vec![0.0; rows * mix.components()];
    for _ in 0..settings.max_iterations.max(1) {
        let c_count = mix.components();
        resp.resize(rows * c_count, 0.0);
        let mut ll = 0.0;
        let mut terms = vec![0.0; c_count];
        for i in 0..rows {
            let x = samples.row(i);
            for (c, t) in terms.iter_mut().enumerate() {
                *t = mix.log_weights[c] + mix.component_log_pdf(c, x);
            }
            let lse = log_sum_exp(&terms);
            for c in 0..c_count {
                resp[i * c_count + c] = (terms[c] - lse).exp();
            }
            if w[i] > 0.0 {
                ll += w[i] * lse;
            }
        }
        let converged = history
            .last()
            .is_some_and(|&prev: &f64| ll - prev < settings.tol * ll.abs().max(1.0));
        history.push(ll);
        if converged {
            break;
        }

        let mut new_w = Vec::with_capacity(c_count);
        let mut new_m = Vec::with_capacity(c_count);
        let mut new_s = Vec::with_capacity(c_count);
        for c in 0..c_count {
            let mass: f64 = (0..rows).map(|i| w[i] * resp[i * c_count + c]).sum();
            if !(mass > DROP_MASS) {
                log::warn!("EM component {c} lost its responsibility mass ({mass:e}); dropping it");
                dropped += 1;
                continue;
            }
            let mut mean = vec![0.0; n];
            for i in 0..rows {
                let r = w[i] * resp[i * c_count + c];
                for (m, x) in mean.iter_mut().zip(samples.row(i)) {
                    *m += r * x;
                }
            }
            mean.iter_mut().for_each(|m| *m /= mass);
            let cov = weighted_scatter(samples, |i| w[i] * resp[i * c_count + c], &mean) / mass;
            new_w.push(mass);
            new_m.push(mean);
            new_s.push(floor_covariance(&cov, settings.cov_floor));
        }
        mix = build(new_w, new_m, new_s)?;
    }
    Ok(EmFit {
        mixture: mix,
        log_likelihoods: history,
        dropped,
    })
}

fn weighted_scatter(samples: &RowMatrix, weight: impl Fn(usize) -> f64, mean: &[f64]) -> DMatrix<f64> {
    let n = mean.len();
    let mut s = DMatrix::zeros(n, n);
    let mut d = vec![0.0; n];
    for i in 0..samples.rows() {
        let r = weight(i);
        if r == 0.0 {
            continue;
        }
        for (dk, (x, m)) in d.iter_mut().zip(samples.row(i).iter().zip(mean)) {
            *dk = x - m;
        }
        for a in 0..n {
            for b in 0..=a {
                s[(a, b)] += r * d[a] * d[b];
            }
        }
    }
    for a in 0..n {
        for b in 0..a {
            s[(b, a)] = s[(a, b)];
        }
    }
    s
}

fn build(mass: Vec<f64>, means: Vec<Vec<f64>>, covs: Vec<DMatrix<f64>>) -> Result<GaussianMixtureProposal> {
    let total: f64 = mass.iter().sum();
    let mut weights: Vec<f64> = mass.iter().map(|m| m / total).collect();
    // absorb rounding so the simplex check is exact
    let s: f64 = weights.iter().sum();
    let last = weights.len() - 1;
    weights[last] += 1.0 - s;
    let covs = covs
        .iter()
        .map(|c| {
            let n = c.nrows();
            (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| c[(i, j)]).collect()
        })
        .collect();
    GaussianMixtureProposal::new(weights, means, covs)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn pick_weighted(rng: &mut Rng, weights: &[f64]) -> Option<usize> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc && *w > 0.0 {
            return Some(i);
        }
    }
    weights.iter().rposition(|w| *w > 0.0)
}

/// Weighted k-means++ seeding followed by a few weighted Lloyd passes; each
/// cluster becomes one initial mixture component.
pub fn kmeans_init(
    samples: &RowMatrix,
    weights: &[f64],
    components: usize,
    cov_floor: f64,
    seed: u64,
) -> Result<GaussianMixtureProposal> {
    let w = normalized_weights(samples, weights)?;
    let rows = samples.rows();
    let n = samples.cols();
    let mut rng = rng_from_seed(seed);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(components);
    let first = pick_weighted(&mut rng, &w).ok_or(Error::ZeroWeights)?;
    centers.push(samples.row(first).to_vec());
    let mut d2: Vec<f64> = (0..rows).map(|i| sq_dist(samples.row(i), &centers[0])).collect();
    while centers.len() < components {
        let score: Vec<f64> = w.iter().zip(&d2).map(|(a, b)| a * b).collect();
        let Some(next) = pick_weighted(&mut rng, &score) else {
            break;
        };
        centers.push(samples.row(next).to_vec());
        let c = centers.last().unwrap();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(samples.row(i), c));
        }
    }

    let mut assign = vec![0usize; rows];
    for _ in 0..LLOYD_ITERATIONS {
        let mut changed = false;
        for (i, a) in assign.iter_mut().enumerate() {
            let x = samples.row(i);
            let best = (0..centers.len())
                .min_by(|&p, &q| sq_dist(x, &centers[p]).total_cmp(&sq_dist(x, &centers[q])))
                .unwrap();
            if *a != best {
                *a = best;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0; n]; centers.len()];
        let mut mass = vec![0.0; centers.len()];
        for i in 0..rows {
            mass[assign[i]] += w[i];
            for (s, x) in sums[assign[i]].iter_mut().zip(samples.row(i)) {
                *s += w[i] * x;
            }
        }
        for (c, center) in centers.iter_mut().enumerate() {
            if mass[c] > 0.0 {
                for (v, s) in center.iter_mut().zip(&sums[c]) {
                    *v = s / mass[c];
                }
            }
        }
        if !changed {
            break;
        }
    }

    let mut mass_out = Vec::new();
    let mut means = Vec::new();
    let mut covs = Vec::new();
    for (c, center) in centers.iter().enumerate() {
        let mass: f64 = (0..rows).filter(|&i| assign[i] == c).map(|i| w[i]).sum();
        if !(mass > 0.0) {
            continue;
        }
        let cov = weighted_scatter(samples, |i| if assign[i] == c { w[i] } else { 0.0 }, center) / mass;
        mass_out.push(mass);
        means.push(center.clone());
        covs.push(floor_covariance(&cov, cov_floor));
    }
    build(mass_out, means, covs)
}

/// Effective sample size `(Σw)² / Σw²` of non-negative weights.
pub fn effective_sample_size(weights: &[f64]) -> f64 {
    let s: f64 = weights.iter().sum();
    let s2: f64 = weights.iter().map(|w| w * w).sum();
    if s2 > 0.0 {
        s * s / s2
    } else {
        0.0
    }
}

use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::coupling::{alternating_mask, CouplingLayer};
use super::spline::{DEFAULT_BINS, DEFAULT_TAIL_BOUND};
use crate::error::{Error, Result};
use crate::stats::{derive_seed, rng_from_seed, std_normal_log_pdf, RowMatrix};

/// Shape of a coupling flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowArch {
    pub layers: usize,
    pub bins: usize,
    pub hidden: Vec<usize>,
    pub tail_bound: f64,
}

impl Default for FlowArch {
    fn default() -> Self {
        Self {
            layers: 6,
            bins: DEFAULT_BINS,
            hidden: vec![64, 64],
            tail_bound: DEFAULT_TAIL_BOUND,
        }
    }
}

impl FlowArch {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.bins < 2 || self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::InvalidConfig(
                "flow needs at least one layer, two bins and non-empty hidden layers".into(),
            ));
        }
        if !(self.tail_bound > 0.0 && self.tail_bound.is_finite()) {
            return Err(Error::InvalidConfig("tail bound must be positive".into()));
        }
        Ok(())
    }
}

/// Per-dimension affine map `z = (x - mean) / scale` from raw data units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// Column means and population standard deviations of `data`.
    pub fn fit(data: &RowMatrix) -> Result<Self> {
        let mean = data.column_mean();
        let n = data.rows() as f64;
        let mut var = vec![0.0; data.cols()];
        for r in data.iter_rows() {
            for ((v, x), m) in var.iter_mut().zip(r).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let mut scale = Vec::with_capacity(var.len());
        for (j, v) in var.iter().enumerate() {
            let s = (v / n).sqrt();
            if !(s > 1e-12 * (1.0 + mean[j].abs())) {
                return Err(Error::SingularStandardizer(j));
            }
            scale.push(s);
        }
        Ok(Self { mean, scale })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    pub fn destandardize(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| m + s * v)
            .collect()
    }

    /// `ln|det|` of the raw-to-standardized map.
    pub fn log_det(&self) -> f64 {
        let mut ld = 0.0;
        for s in &self.scale {
            ld -= s.ln();
        }
        ld
    }

    /// Log-density of the Gaussian `N(mean, diag(scale^2))` at `x`.
    pub fn gaussian_log_pdf(&self, x: &[f64]) -> f64 {
        std_normal_log_pdf(&self.standardize(x)) + self.log_det()
    }
}

/// Composed spline-coupling flow `x = destandardize(T_D ∘ … ∘ T_1(u))` with
/// standard normal base `u ~ N(0, I)`.
#[derive(Debug, Clone)]
pub struct FlowModel {
    dim: usize,
    arch: FlowArch,
    layers: Vec<CouplingLayer>,
    standardizer: Standardizer,
}

impl FlowModel {
    /// Identity-initialized flow with an identity standardizer: `T = id`.
    pub fn identity(dim: usize, arch: FlowArch) -> Result<Self> {
        Self::initialized(dim, arch, Standardizer::identity(dim), 0)
    }

    /// Randomly initialized conditioner hidden layers with zero output layers,
    /// so every coupling layer starts as the identity.
    pub fn initialized(dim: usize, arch: FlowArch, standardizer: Standardizer, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidConfig("flow dimension must be positive".into()));
        }
        arch.validate()?;
        if standardizer.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: standardizer.dim(),
            });
        }
        let mut rng = rng_from_seed(derive_seed(seed, 0xF10));
        let layers = (0..arch.layers)
            .map(|l| CouplingLayer::new(alternating_mask(dim, l), &arch.hidden, arch.bins, arch.tail_bound, &mut rng))
            .collect();
        Ok(Self {
            dim,
            arch,
            layers,
            standardizer,
        })
    }

    pub(crate) fn from_parts(
        dim: usize,
        arch: FlowArch,
        layers: Vec<CouplingLayer>,
        standardizer: Standardizer,
    ) -> Self {
        Self {
            dim,
            arch,
            layers,
            standardizer,
        }
    }

    /// Every parameter drawn uniformly from `±scale`; used to probe
    /// invertibility and gradients away from the identity.
    pub fn with_random_parameters(dim: usize, arch: FlowArch, seed: u64, scale: f64) -> Result<Self> {
        let mut m = Self::initialized(dim, arch, Standardizer::identity(dim), seed)?;
        let mut rng = rng_from_seed(derive_seed(seed, 0xBAD));
        for layer in &mut m.layers {
            for p in layer.params_mut() {
                *p = rng.random_range(-scale..scale);
            }
        }
        Ok(m)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn arch(&self) -> &FlowArch {
        &self.arch
    }

    pub fn layers(&self) -> &[CouplingLayer] {
        &self.layers
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    pub fn set_standardizer(&mut self, s: Standardizer) -> Result<()> {
        if s.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: s.dim(),
            });
        }
        self.standardizer = s;
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.params().len()).sum()
    }

    /// All conditioner parameters, layer by layer.
    pub fn parameters(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.params().iter().copied()).collect()
    }

    pub fn set_parameters(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.parameter_count() {
            return Err(Error::DimensionMismatch {
                expected: self.parameter_count(),
                got: flat.len(),
            });
        }
        let mut off = 0;
        for l in &mut self.layers {
            let n = l.params().len();
            l.params_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    fn check(&self, v: &[f64], what: &'static str) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: v.len(),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(what));
        }
        Ok(())
    }

    /// Latent to standardized space through the coupling layers only, with the
    /// per-layer log-determinants in application order.
    pub fn layer_log_dets(&self, u: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check(u, "latent point")?;
        let mut cur = u.to_vec();
        let mut next = vec![0.0; self.dim];
        let mut lds = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            lds.push(layer.forward(&cur, &mut next));
            std::mem::swap(&mut cur, &mut next);
        }
        Ok((cur, lds))
    }

    /// `x = T(u)` in raw target units with `ln|det J_T(u)|` (standardizer included).
    pub fn flow_forward(&self, u: &[f64]) -> Result<(Vec<f64>, f64)> {
        let (z, lds) = self.layer_log_dets(u)?;
        let mut ld = 0.0;
        for l in &lds {
            ld += l;
        }
        ld -= self.standardizer.log_det();
        Ok((self.standardizer.destandardize(&z), ld))
    }

    /// `u = T^{-1}(x)` with `ln|det J_{T^{-1}}(x)|` (standardizer included).
    pub fn flow_inverse(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check(x, "target point")?;
        Ok(self.inverse_unchecked(x))
    }

    fn inverse_unchecked(&self, x: &[f64]) -> (Vec<f64>, f64) {
        let mut cur = self.standardizer.standardize(x);
        let mut next = vec![0.0; self.dim];
        let mut ld = self.standardizer.log_det();
        for layer in self.layers.iter().rev() {
            ld += layer.inverse(&cur, &mut next);
            std::mem::swap(&mut cur, &mut next);
        }
        (cur, ld)
    }

    /// `ln p*(x) = ln p_u(T^{-1}(x)) + ln|det J_{T^{-1}}(x)|`.
    pub fn log_prob(&self, x: &[f64]) -> Result<f64> {
        self.check(x, "target point")?;
        let (u, ld) = self.inverse_unchecked(x);
        Ok(std_normal_log_pdf(&u) + ld)
    }

    pub fn log_prob_batch(&self, xs: &RowMatrix) -> Result<Vec<f64>> {
        (0..xs.rows())
            .into_par_iter()
            .map(|i| self.log_prob(xs.row(i)))
            .collect()
    }

    pub fn inverse_batch(&self, xs: &RowMatrix) -> Result<RowMatrix> {
        let rows: Result<Vec<Vec<f64>>> = (0..xs.rows())
            .into_par_iter()
            .map(|i| self.flow_inverse(xs.row(i)).map(|r| r.0))
            .collect();
        Ok(to_matrix(rows?, self.dim))
    }

    pub fn forward_batch(&self, us: &RowMatrix) -> Result<RowMatrix> {
        let rows: Result<Vec<Vec<f64>>> = (0..us.rows())
            .into_par_iter()
            .map(|i| self.flow_forward(us.row(i)).map(|r| r.0))
            .collect();
        Ok(to_matrix(rows?, self.dim))
    }

    /// `count` draws `T(u)`, `u ~ N(0, I)`, in raw target units.
    pub fn sample(&self, count: usize, seed: u64) -> RowMatrix {
        let mut rng = rng_from_seed(seed);
        let mut us = RowMatrix::zeros(count, self.dim);
        for i in 0..count {
            for v in us.row_mut(i) {
                *v = rng.sample(StandardNormal);
            }
        }
        self.forward_batch(&us).expect("standard normal draws are finite")
    }
}

fn to_matrix(rows: Vec<Vec<f64>>, dim: usize) -> RowMatrix {
    let mut m = RowMatrix::empty(dim);
    for r in rows {
        m.push_row(&r);
    }
    m
}

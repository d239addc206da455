use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{DatasetSource, OutcomeDataset};
use crate::error::{Error, Result};
use crate::stats::{log_sum_exp, rng_from_seed, RowMatrix, LN_2PI};

pub const TWO_MOONS_NOISE: f64 = 0.1;
const BANANA_CURVATURE: f64 = 0.5;
const MOON_NODES: usize = 2001;

/// Analytic 2-D test densities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticTarget {
    /// Two interleaved half circles of radius 1 centred at `(0, 0)` and
    /// `(1, 0.5)`, with isotropic Gaussian noise.
    TwoMoons,
    /// Equal mixture of unit Gaussians at `(-3, 0)` and `(3, 0)`.
    Gmm2,
    /// `x1 ~ N(0, 1)`, `x2 | x1 ~ N(0.5 (x1² - 1), 1)`.
    Banana,
}

pub const SYNTHETIC_NAMES: &str = "two_moons, gmm2, banana";

impl SyntheticTarget {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "two_moons" => Ok(Self::TwoMoons),
            "gmm2" => Ok(Self::Gmm2),
            "banana" => Ok(Self::Banana),
            _ => Err(Error::UnknownName {
                kind: "synthetic target",
                name: name.to_string(),
                valid: SYNTHETIC_NAMES,
            }),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::TwoMoons => "two_moons",
            Self::Gmm2 => "gmm2",
            Self::Banana => "banana",
        }
    }

    pub fn sample(&self, rng: &mut crate::stats::Rng) -> [f64; 2] {
        let e1: f64 = rng.sample(StandardNormal);
        let e2: f64 = rng.sample(StandardNormal);
        match self {
            Self::TwoMoons => {
                let upper = rng.random::<f64>() < 0.5;
                let t = rng.random::<f64>() * PI;
                let (cx, cy, sign) = moon(upper);
                [
                    cx + t.cos() * sign + TWO_MOONS_NOISE * e1,
                    cy + t.sin() * sign + TWO_MOONS_NOISE * e2,
                ]
            }
            Self::Gmm2 => {
                let c = if rng.random::<f64>() < 0.5 { -3.0 } else { 3.0 };
                [c + e1, e2]
            }
            Self::Banana => [e1, e2 + BANANA_CURVATURE * (e1 * e1 - 1.0)],
        }
    }

    /// Ground-truth log-density. Two moons integrates the arc parameter with
    /// composite Simpson's rule.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        let gauss2 = |dx: f64, dy: f64, s: f64| -0.5 * (dx * dx + dy * dy) / (s * s) - LN_2PI - 2.0 * s.ln();
        match self {
            Self::Gmm2 => {
                let a = gauss2(x[0] + 3.0, x[1], 1.0);
                let b = gauss2(x[0] - 3.0, x[1], 1.0);
                log_sum_exp(&[a, b]) - 2f64.ln()
            }
            Self::Banana => gauss2(x[0], x[1] - BANANA_CURVATURE * (x[0] * x[0] - 1.0), 1.0),
            Self::TwoMoons => {
                let h = PI / (MOON_NODES - 1) as f64;
                let mut terms = Vec::with_capacity(2 * MOON_NODES);
                for upper in [true, false] {
                    let (cx, cy, sign) = moon(upper);
                    for k in 0..MOON_NODES {
                        let t = k as f64 * h;
                        let w: f64 = if k == 0 || k == MOON_NODES - 1 {
                            1.0
                        } else if k % 2 == 1 {
                            4.0
                        } else {
                            2.0
                        };
                        let px = cx + t.cos() * sign;
                        let py = cy + t.sin() * sign;
                        terms.push(w.ln() + gauss2(x[0] - px, x[1] - py, TWO_MOONS_NOISE));
                    }
                }
                // mixture weight 1/2, uniform arc density 1/pi, Simpson factor h/3
                log_sum_exp(&terms) + (0.5 / PI * h / 3.0).ln()
            }
        }
    }
}

/// Arc centre and orientation of the upper or lower moon.
fn moon(upper: bool) -> (f64, f64, f64) {
    if upper {
        (0.0, 0.0, 1.0)
    } else {
        (1.0, 0.5, -1.0)
    }
}

pub fn synthetic_target(name: &str, n: usize, seed: u64) -> Result<OutcomeDataset> {
    let target = SyntheticTarget::from_name(name)?;
    if n == 0 {
        return Err(Error::InvalidConfig("dataset size must be at least 1".into()));
    }
    let mut rng = rng_from_seed(seed);
    let mut outcomes = RowMatrix::zeros(n, 2);
    for i in 0..n {
        outcomes.row_mut(i).copy_from_slice(&target.sample(&mut rng));
    }
    Ok(OutcomeDataset {
        names: vec!["x1".into(), "x2".into()],
        outcomes,
        seed,
        source: DatasetSource::Synthetic { target },
    })
}

//! Monotone rational-quadratic splines on `[-B, B]` with identity tails.
//!
//! The spline is parameterized by `K` bin widths and heights (each summing to
//! `2B`) and `K + 1` knot derivatives. The two boundary derivatives are pinned
//! to 1 when built from unconstrained network outputs so the map joins the
//! identity tails with a continuous derivative.
//!
//! Values are evaluated in residual form, `y = x + (y_k - x_k) + ...`, where
//! every correction term vanishes exactly for identity parameters. An
//! identity-initialized flow is therefore the identity map bit-for-bit.

use crate::error::{Error, Result};

pub const DEFAULT_BINS: usize = 8;
pub const DEFAULT_TAIL_BOUND: f64 = 4.0;
pub const MIN_BIN_WIDTH: f64 = 1e-3;
pub const MIN_BIN_HEIGHT: f64 = 1e-3;
pub const MIN_DERIVATIVE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// Number of unconstrained conditioner outputs per transformed dimension.
pub fn raw_param_count(bins: usize) -> usize {
    3 * bins - 1
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Quantities kept from the unconstrained parameterization for backpropagation.
#[derive(Debug, Clone)]
struct RawCache {
    width_softmax: Vec<f64>,
    height_softmax: Vec<f64>,
    /// d(derivative_i)/d(raw_i) for interior knots, zero where the floor is active.
    deriv_slope: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SplineParams {
    widths: Vec<f64>,
    heights: Vec<f64>,
    derivatives: Vec<f64>,
    tail_bound: f64,
    x_knots: Vec<f64>,
    y_knots: Vec<f64>,
    raw: Option<RawCache>,
}

fn knots(sizes: &[f64], bound: f64) -> Vec<f64> {
    let mut k = Vec::with_capacity(sizes.len() + 1);
    let mut acc = -bound;
    k.push(acc);
    for s in &sizes[..sizes.len() - 1] {
        acc += s;
        k.push(acc);
    }
    k.push(bound);
    k
}

fn bin_index(knots: &[f64], v: f64) -> usize {
    // largest k with knots[k] <= v, restricted to a valid bin
    let bins = knots.len() - 1;
    let pos = knots.partition_point(|&kv| kv <= v);
    pos.saturating_sub(1).min(bins - 1)
}

impl SplineParams {
    /// Validated construction from explicit widths, heights and `K + 1` derivatives.
    pub fn new(
        widths: Vec<f64>,
        heights: Vec<f64>,
        derivatives: Vec<f64>,
        tail_bound: f64,
    ) -> Result<Self> {
        let k = widths.len();
        if k == 0 || heights.len() != k || derivatives.len() != k + 1 {
            return Err(Error::InvalidConfig(format!(
                "spline needs K widths, K heights and K+1 derivatives (got {}, {}, {})",
                widths.len(),
                heights.len(),
                derivatives.len()
            )));
        }
        if !(tail_bound > 0.0 && tail_bound.is_finite()) {
            return Err(Error::InvalidConfig("tail bound must be positive".into()));
        }
        let all_pos = |v: &[f64]| v.iter().all(|x| *x > 0.0 && x.is_finite());
        if !all_pos(&widths) || !all_pos(&heights) || !all_pos(&derivatives) {
            return Err(Error::InvalidConfig(
                "spline widths, heights and derivatives must be positive".into(),
            ));
        }
        let span = 2.0 * tail_bound;
        let sw: f64 = widths.iter().sum();
        let sh: f64 = heights.iter().sum();
        if (sw - span).abs() > 1e-9 || (sh - span).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "bin widths and heights must each sum to 2B = {span} (got {sw}, {sh})"
            )));
        }
        let x_knots = knots(&widths, tail_bound);
        let y_knots = knots(&heights, tail_bound);
        Ok(Self {
            widths,
            heights,
            derivatives,
            tail_bound,
            x_knots,
            y_knots,
            raw: None,
        })
    }

    /// The spline produced by all-zero unconstrained parameters: the identity map.
    pub fn identity(bins: usize, tail_bound: f64) -> Self {
        Self::from_unnormalized(&vec![0.0; raw_param_count(bins)], bins, tail_bound)
    }

    /// Maps `3K - 1` unconstrained values (width logits, height logits, interior
    /// derivative pre-activations) to a valid spline.
    pub fn from_unnormalized(raw: &[f64], bins: usize, tail_bound: f64) -> Self {
        debug_assert_eq!(raw.len(), raw_param_count(bins));
        let span = 2.0 * tail_bound;
        let width_softmax = softmax(&raw[..bins]);
        let height_softmax = softmax(&raw[bins..2 * bins]);
        let wscale = 1.0 - bins as f64 * MIN_BIN_WIDTH;
        let hscale = 1.0 - bins as f64 * MIN_BIN_HEIGHT;
        let widths: Vec<f64> = width_softmax
            .iter()
            .map(|p| span * (MIN_BIN_WIDTH + wscale * p))
            .collect();
        let heights: Vec<f64> = height_softmax
            .iter()
            .map(|p| span * (MIN_BIN_HEIGHT + hscale * p))
            .collect();

        // softplus(c) / softplus(0) is exactly 1 at c = 0
        let sp0 = softplus(0.0);
        let mut derivatives = Vec::with_capacity(bins + 1);
        let mut deriv_slope = Vec::with_capacity(bins - 1);
        derivatives.push(1.0);
        for &c in &raw[2 * bins..] {
            let d = softplus(c) / sp0;
            if d > MIN_DERIVATIVE {
                derivatives.push(d);
                deriv_slope.push(sigmoid(c) / sp0);
            } else {
                derivatives.push(MIN_DERIVATIVE);
                deriv_slope.push(0.0);
            }
        }
        derivatives.push(1.0);

        let x_knots = knots(&widths, tail_bound);
        let y_knots = knots(&heights, tail_bound);
        Self {
            widths,
            heights,
            derivatives,
            tail_bound,
            x_knots,
            y_knots,
            raw: Some(RawCache {
                width_softmax,
                height_softmax,
                deriv_slope,
            }),
        }
    }

    pub fn bins(&self) -> usize {
        self.widths.len()
    }

    pub fn tail_bound(&self) -> f64 {
        self.tail_bound
    }

    pub fn widths(&self) -> &[f64] {
        &self.widths
    }

    pub fn heights(&self) -> &[f64] {
        &self.heights
    }

    pub fn derivatives(&self) -> &[f64] {
        &self.derivatives
    }

    fn inside(&self, v: f64) -> bool {
        v >= -self.tail_bound && v <= self.tail_bound
    }

    fn local(&self, k: usize) -> Bin {
        let w = self.widths[k];
        let h = self.heights[k];
        Bin {
            xk: self.x_knots[k],
            yk: self.y_knots[k],
            w,
            h,
            s: h / w,
            d0: self.derivatives[k],
            d1: self.derivatives[k + 1],
        }
    }

    /// Closed-form direction `x -> y` with `ln dy/dx`; assumes finite input.
    pub(crate) fn forward_unchecked(&self, x: f64) -> (f64, f64) {
        if !self.inside(x) {
            return (x, 0.0);
        }
        let bin = self.local(bin_index(&self.x_knots, x));
        let xi = ((x - bin.xk) / bin.w).clamp(0.0, 1.0);
        (bin.value(x, xi), bin.log_slope(xi))
    }

    /// Root-solving direction `y -> x` with `ln dx/dy`; assumes finite input.
    pub(crate) fn inverse_unchecked(&self, y: f64) -> (f64, f64) {
        if !self.inside(y) {
            return (y, 0.0);
        }
        let bin = self.local(bin_index(&self.y_knots, y));
        let xi = bin.solve(y);
        (bin.preimage(y, xi), -bin.log_slope(xi))
    }

    /// Backpropagates upstream gradients `gy = dL/dy` and `gl = dL/d(ln dy/dx)`
    /// of the closed-form direction evaluated at `x`. Accumulates into
    /// `grad_raw` (length `3K - 1`) and returns `dL/dx`.
    ///
    /// Only valid for splines built by [`SplineParams::from_unnormalized`].
    pub(crate) fn backward(&self, x: f64, gy: f64, gl: f64, grad_raw: &mut [f64]) -> f64 {
        if !self.inside(x) {
            return gy;
        }
        let raw = self
            .raw
            .as_ref()
            .expect("backward requires an unnormalized parameterization");
        let bins = self.bins();
        let k = bin_index(&self.x_knots, x);
        let b = self.local(k);
        let xi = ((x - b.xk) / b.w).clamp(0.0, 1.0);

        let t = xi * (1.0 - xi);
        let c = b.d1 + b.d0 - 2.0 * b.s;
        let den = b.s + c * t;
        let a = b.s * xi * xi + b.d0 * t;
        let g = a / den;
        let den2 = den * den;
        let g_xi = ((2.0 * b.s * xi + b.d0 * (1.0 - 2.0 * xi)) * den - a * c * (1.0 - 2.0 * xi)) / den2;
        let g_s = (xi * xi * den - a * (1.0 - 2.0 * t)) / den2;
        let g_d0 = t * (den - a) / den2;
        let g_d1 = -a * t / den2;

        let q = b.s + (b.d1 - b.s) * xi * xi + (b.d0 - b.s) * (1.0 - xi) * (1.0 - xi);
        let l_xi = (2.0 * b.d1 * xi + 2.0 * b.s * (1.0 - 2.0 * xi) - 2.0 * b.d0 * (1.0 - xi)) / q
            - 2.0 * c * (1.0 - 2.0 * xi) / den;
        let l_s = 2.0 / b.s + 2.0 * t / q - 2.0 * (1.0 - 2.0 * t) / den;
        let l_d0 = (1.0 - xi) * (1.0 - xi) / q - 2.0 * t / den;
        let l_d1 = xi * xi / q - 2.0 * t / den;

        let big_xi = gy * b.h * g_xi + gl * l_xi;
        let big_s = gy * b.h * g_s + gl * l_s;
        let big_d0 = gy * b.h * g_d0 + gl * l_d0;
        let big_d1 = gy * b.h * g_d1 + gl * l_d1;

        let dx = big_xi / b.w;
        let dxk = -dx;
        let dw = -big_xi * xi / b.w - big_s * b.s / b.w;
        let dh = gy * g + big_s / b.w;
        let dyk = gy;

        // knots are cumulative sums of the preceding bin sizes
        let mut gw = vec![0.0; bins];
        let mut gh = vec![0.0; bins];
        for j in 0..k {
            gw[j] += dxk;
            gh[j] += dyk;
        }
        gw[k] += dw;
        gh[k] += dh;

        let span = 2.0 * self.tail_bound;
        let wscale = span * (1.0 - bins as f64 * MIN_BIN_WIDTH);
        let hscale = span * (1.0 - bins as f64 * MIN_BIN_HEIGHT);
        softmax_backward(&raw.width_softmax, &gw, wscale, &mut grad_raw[..bins]);
        softmax_backward(&raw.height_softmax, &gh, hscale, &mut grad_raw[bins..2 * bins]);

        let dgrad = &mut grad_raw[2 * bins..];
        if k >= 1 {
            dgrad[k - 1] += big_d0 * raw.deriv_slope[k - 1];
        }
        if k + 1 < bins {
            dgrad[k] += big_d1 * raw.deriv_slope[k];
        }
        dx
    }
}

fn softmax_backward(p: &[f64], upstream: &[f64], scale: f64, out: &mut [f64]) {
    let dot: f64 = p.iter().zip(upstream).map(|(a, b)| a * b).sum();
    for ((o, pl), gl) in out.iter_mut().zip(p).zip(upstream) {
        *o += scale * pl * (gl - dot);
    }
}

struct Bin {
    xk: f64,
    yk: f64,
    w: f64,
    h: f64,
    s: f64,
    d0: f64,
    d1: f64,
}

impl Bin {
    fn denominator(&self, xi: f64) -> f64 {
        self.s + (self.d1 + self.d0 - 2.0 * self.s) * xi * (1.0 - xi)
    }

    /// `h * (g(xi) - xi)`: zero for identity parameters.
    fn correction(&self, xi: f64) -> f64 {
        let c = self.d1 + self.d0 - 2.0 * self.s;
        self.h * xi * (1.0 - xi) * ((self.d0 - self.s) - c * xi) / self.denominator(xi)
    }

    fn value(&self, x: f64, xi: f64) -> f64 {
        x + (self.yk - self.xk) + (self.h - self.w) * xi + self.correction(xi)
    }

    fn preimage(&self, y: f64, xi: f64) -> f64 {
        y + (self.xk - self.yk) + (self.w - self.h) * xi - self.correction(xi)
    }

    fn log_slope(&self, xi: f64) -> f64 {
        let q = self.s
            + (self.d1 - self.s) * xi * xi
            + (self.d0 - self.s) * (1.0 - xi) * (1.0 - xi);
        2.0 * self.s.ln() + q.ln() - 2.0 * self.denominator(xi).ln()
    }

    fn solve(&self, y: f64) -> f64 {
        let dy = y - self.yk;
        let c = self.d1 + self.d0 - 2.0 * self.s;
        let a = self.h * (self.s - self.d0) + dy * c;
        let b = self.h * self.d0 - dy * c;
        let cc = -self.s * dy;
        let disc = (b * b - 4.0 * a * cc).max(0.0);
        let denom = -b - disc.sqrt();
        if denom == 0.0 {
            return 0.0;
        }
        (2.0 * cc / denom).clamp(0.0, 1.0)
    }
}

/// Applies the spline in the given direction, returning the image and the log
/// absolute derivative of that direction at `x`.
pub fn spline_apply(x: f64, params: &SplineParams, direction: Direction) -> Result<(f64, f64)> {
    if !x.is_finite() {
        return Err(Error::NonFinite("spline input"));
    }
    Ok(match direction {
        Direction::Forward => params.forward_unchecked(x),
        Direction::Inverse => params.inverse_unchecked(x),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    use crate::stats::rng_from_seed;

    fn random_raw(bins: usize, seed: u64, scale: f64) -> Vec<f64> {
        let mut rng = rng_from_seed(seed);
        (0..raw_param_count(bins))
            .map(|_| rng.random_range(-scale..scale))
            .collect()
    }

    /// Inverse by bisection on the monotone closed-form direction.
    fn bisection_inverse(p: &SplineParams, y: f64) -> f64 {
        let (mut lo, mut hi) = (-p.tail_bound(), p.tail_bound());
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if p.forward_unchecked(mid).0 < y {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn identity_tails() {
        let p = SplineParams::from_unnormalized(&random_raw(8, 1, 2.0), 8, 4.0);
        let (y, ld) = spline_apply(5.0, &p, Direction::Forward).unwrap();
        assert_eq!((y, ld), (5.0, 0.0));
        let (y, ld) = spline_apply(-7.5, &p, Direction::Inverse).unwrap();
        assert_eq!((y, ld), (-7.5, 0.0));
    }

    #[test]
    fn identity_params_are_exact_identity() {
        let p = SplineParams::identity(8, 4.0);
        let (y, ld) = spline_apply(0.3, &p, Direction::Forward).unwrap();
        assert_eq!(y, 0.3);
        assert_eq!(ld, 0.0);
        let mut rng = rng_from_seed(3);
        for _ in 0..10_000 {
            let x: f64 = rng.random_range(-4.0..4.0);
            assert_eq!(p.forward_unchecked(x), (x, 0.0));
            assert_eq!(p.inverse_unchecked(x), (x, 0.0));
        }
    }

    #[test]
    fn round_trip_and_bisection_oracle() {
        for seed in 0..20 {
            let p = SplineParams::from_unnormalized(&random_raw(8, seed, 3.0), 8, 4.0);
            let x = 0.7;
            let (y, ld_f) = spline_apply(x, &p, Direction::Forward).unwrap();
            let (back, ld_i) = spline_apply(y, &p, Direction::Inverse).unwrap();
            assert!((back - x).abs() < 1e-9, "seed {seed}: {back} vs {x}");
            assert!((ld_f + ld_i).abs() < 1e-9);
            let oracle = bisection_inverse(&p, y);
            assert!((oracle - x).abs() < 1e-8, "seed {seed}: oracle {oracle}");
        }
    }

    #[test]
    fn log_slope_matches_finite_difference() {
        let p = SplineParams::from_unnormalized(&random_raw(6, 11, 2.0), 6, 3.0);
        let mut rng = rng_from_seed(5);
        for _ in 0..200 {
            let x: f64 = rng.random_range(-2.9..2.9);
            let eps = 1e-6;
            let fd = (p.forward_unchecked(x + eps).0 - p.forward_unchecked(x - eps).0) / (2.0 * eps);
            let (_, ld) = p.forward_unchecked(x);
            assert!((ld - fd.ln()).abs() < 1e-5, "x = {x}: {ld} vs {}", fd.ln());
        }
    }

    #[test]
    fn strictly_monotone() {
        let p = SplineParams::from_unnormalized(&random_raw(8, 21, 4.0), 8, 4.0);
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=4000 {
            let x = -4.5 + 9.0 * i as f64 / 4000.0;
            let y = p.forward_unchecked(x).0;
            assert!(y > prev);
            prev = y;
        }
    }

    #[test]
    fn explicit_params_are_validated() {
        assert!(SplineParams::new(vec![1.0, 1.0], vec![1.0, 1.0], vec![1.0, 1.0, 1.0], 1.0).is_ok());
        assert!(SplineParams::new(vec![1.0, 0.5], vec![1.0, 1.0], vec![1.0, 1.0, 1.0], 1.0).is_err());
        assert!(SplineParams::new(vec![1.0, 1.0], vec![1.0, 1.0], vec![1.0, 0.0, 1.0], 1.0).is_err());
        assert!(SplineParams::new(vec![1.0, 1.0], vec![1.0, 1.0], vec![1.0, 1.0], 1.0).is_err());
    }

    #[test]
    fn non_finite_input_rejected() {
        let p = SplineParams::identity(4, 2.0);
        assert!(spline_apply(f64::NAN, &p, Direction::Forward).is_err());
        assert!(spline_apply(f64::INFINITY, &p, Direction::Inverse).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let bins = 5;
        let bound = 3.0;
        let raw = random_raw(bins, 8, 1.5);
        // scalar objective L = 0.7 * y - 1.3 * ln dy/dx
        let objective = |raw: &[f64], x: f64| {
            let p = SplineParams::from_unnormalized(raw, bins, bound);
            let (y, ld) = p.forward_unchecked(x);
            0.7 * y - 1.3 * ld
        };
        for &x in &[-2.5, -0.4, 0.1, 1.9, 2.95] {
            let p = SplineParams::from_unnormalized(&raw, bins, bound);
            let mut grad = vec![0.0; raw.len()];
            let dx = p.backward(x, 0.7, -1.3, &mut grad);
            let eps = 1e-6;
            let fd_x = (objective(&raw, x + eps) - objective(&raw, x - eps)) / (2.0 * eps);
            assert!((dx - fd_x).abs() < 1e-6 * (1.0 + fd_x.abs()), "dx {dx} vs {fd_x}");
            for i in 0..raw.len() {
                let mut rp = raw.clone();
                rp[i] += eps;
                let mut rm = raw.clone();
                rm[i] -= eps;
                let fd = (objective(&rp, x) - objective(&rm, x)) / (2.0 * eps);
                assert!(
                    (grad[i] - fd).abs() < 1e-6 * (1.0 + fd.abs()),
                    "x {x} param {i}: {} vs {fd}",
                    grad[i]
                );
            }
        }
    }
}

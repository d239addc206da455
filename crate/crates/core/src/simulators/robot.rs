use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{DatasetSource, OutcomeDataset};
use crate::error::{Error, Result};
use crate::stats::{derive_seed, rng_from_seed, RowMatrix};

/// Unicycle robot driven at constant speed and turn rate, with additive
/// Gaussian noise on every Euler step and a random sign flip of the turn rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobotParams {
    pub speed: f64,
    pub angular_rate: f64,
    pub horizon: f64,
    pub flip_time: f64,
    pub flip_probability: f64,
    /// Per-step noise std for `x`, `y`, `theta`.
    pub process_noise_std: [f64; 3],
    pub dt: f64,
    pub initial_state: [f64; 3],
}

impl Default for RobotParams {
    fn default() -> Self {
        Self {
            speed: 0.1,
            angular_rate: 0.07,
            horizon: 40.0,
            flip_time: 15.0,
            flip_probability: 0.5,
            process_noise_std: [0.03, 0.03, 0.05],
            dt: 0.1,
            initial_state: [0.0, 0.0, -2.8],
        }
    }
}

impl RobotParams {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.speed, self.angular_rate, self.horizon, self.flip_time, self.dt]
            .iter()
            .chain(&self.process_noise_std)
            .chain(&self.initial_state)
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidConfig("robot parameters must be finite".into()));
        }
        if !(self.dt > 0.0) || !(self.horizon > 0.0) {
            return Err(Error::InvalidConfig("robot dt and horizon must be positive".into()));
        }
        if !(self.flip_time >= 0.0 && self.flip_time < self.horizon) {
            return Err(Error::InvalidConfig("robot flip_time must lie in [0, horizon)".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::InvalidConfig("robot flip_probability must lie in [0, 1]".into()));
        }
        if self.process_noise_std.iter().any(|s| *s < 0.0) {
            return Err(Error::InvalidConfig("robot noise std devs must be non-negative".into()));
        }
        Ok(())
    }

    fn steps(&self) -> (usize, usize) {
        (
            (self.horizon / self.dt).round() as usize,
            (self.flip_time / self.dt).round() as usize,
        )
    }
}

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let w = theta.rem_euclid(2.0 * PI);
    if w > PI {
        w - 2.0 * PI
    } else {
        w
    }
}

/// Final state `[x, y, theta]` and whether the turn rate was flipped.
pub fn simulate_robot_detailed(params: &RobotParams, seed: u64) -> ([f64; 3], bool) {
    let mut rng = rng_from_seed(seed);
    let flipped = params.flip_probability > 0.0 && rng.random::<f64>() < params.flip_probability;
    let (steps, flip_step) = params.steps();
    let [sx, sy, st] = params.process_noise_std;
    let [mut x, mut y, mut th] = params.initial_state;
    let v = params.speed;
    let dt = params.dt;
    for k in 0..steps {
        let alpha = if flipped && k >= flip_step {
            -params.angular_rate
        } else {
            params.angular_rate
        };
        let nx: f64 = rng.sample(StandardNormal);
        let ny: f64 = rng.sample(StandardNormal);
        let nt: f64 = rng.sample(StandardNormal);
        let (s, c) = th.sin_cos();
        x += dt * v * c + sx * nx;
        y += dt * v * s + sy * ny;
        th += dt * alpha + st * nt;
    }
    ([x, y, wrap_angle(th)], flipped)
}

pub fn simulate_robot(params: &RobotParams, seed: u64) -> Result<[f64; 3]> {
    params.validate()?;
    Ok(simulate_robot_detailed(params, seed).0)
}

/// `n` independent trials; trial `i` uses seed `derive_seed(seed, i)`.
pub fn generate_robot_dataset(n: usize, params: &RobotParams, seed: u64) -> Result<OutcomeDataset> {
    params.validate()?;
    if n == 0 {
        return Err(Error::InvalidConfig("dataset size must be at least 1".into()));
    }
    let rows: Vec<[f64; 3]> = (0..n)
        .into_par_iter()
        .map(|i| simulate_robot_detailed(params, derive_seed(seed, i as u64)).0)
        .collect();
    let mut outcomes = RowMatrix::zeros(n, 3);
    for (i, r) in rows.iter().enumerate() {
        outcomes.row_mut(i).copy_from_slice(r);
    }
    Ok(OutcomeDataset {
        names: vec!["x".into(), "y".into(), "theta".into()],
        outcomes,
        seed,
        source: DatasetSource::Robot(params.clone()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noiseless(alpha: f64, flip: f64) -> RobotParams {
        RobotParams {
            angular_rate: alpha,
            flip_probability: flip,
            process_noise_std: [0.0; 3],
            initial_state: [0.0, 0.0, 0.4],
            ..RobotParams::default()
        }
    }

    fn arc(v: f64, a: f64, start: [f64; 3], t: f64) -> [f64; 3] {
        let [x, y, th] = start;
        [
            x + v / a * ((th + a * t).sin() - th.sin()),
            y + v / a * (th.cos() - (th + a * t).cos()),
            th + a * t,
        ]
    }

    #[test]
    fn straight_line() {
        let p = RobotParams {
            initial_state: [0.0; 3],
            ..noiseless(0.0, 0.0)
        };
        let (s, _) = simulate_robot_detailed(&p, 1);
        assert!((s[0] - p.speed * p.horizon).abs() < 1e-12);
        assert_eq!(s[1], 0.0);
        assert_eq!(s[2], 0.0);
    }

    #[test]
    fn constant_turn_matches_arc() {
        let p = noiseless(0.1, 0.0);
        let (s, _) = simulate_robot_detailed(&p, 1);
        let e = arc(p.speed, 0.1, p.initial_state, p.horizon);
        let tol = 2.0 * p.speed * p.dt;
        assert!((s[0] - e[0]).abs() < tol && (s[1] - e[1]).abs() < tol);
        assert!((s[2] - wrap_angle(e[2])).abs() < 1e-9);
    }

    #[test]
    fn forced_flip_matches_two_arcs() {
        let p = noiseless(0.1, 1.0);
        let (s, flipped) = simulate_robot_detailed(&p, 1);
        assert!(flipped);
        let mid = arc(p.speed, 0.1, p.initial_state, p.flip_time);
        let e = arc(p.speed, -0.1, mid, p.horizon - p.flip_time);
        let tol = 2.0 * p.speed * p.dt;
        assert!((s[0] - e[0]).abs() < tol && (s[1] - e[1]).abs() < tol);
        assert!((s[2] - wrap_angle(e[2])).abs() < 1e-9);
    }

    #[test]
    fn angles_wrap_into_half_open_interval() {
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-15);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn single_trial_dataset_reproduces_simulation() {
        let p = RobotParams::default();
        let d = generate_robot_dataset(1, &p, 42).unwrap();
        let s = simulate_robot(&p, derive_seed(42, 0)).unwrap();
        assert_eq!(d.outcomes.row(0), &s);
    }

    #[test]
    fn flip_fraction_is_bernoulli_mean() {
        let p = RobotParams {
            horizon: 15.5,
            ..RobotParams::default()
        };
        let n = 100_000;
        let flips = (0..n).filter(|&i| simulate_robot_detailed(&p, derive_seed(3, i)).1).count();
        assert!((flips as f64 / n as f64 - 0.5).abs() < 0.01);
    }

    #[test]
    fn final_heading_is_bimodal() {
        let d = generate_robot_dataset(20_000, &RobotParams::default(), 5).unwrap();
        let bins = 12;
        let mut hist = vec![0usize; bins];
        for r in d.outcomes.iter_rows() {
            let b = (((r[2] + PI) / (2.0 * PI)) * bins as f64).floor().clamp(0.0, bins as f64 - 1.0) as usize;
            hist[b] += 1;
        }
        let mut modes: Vec<usize> = (0..bins)
            .filter(|&i| hist[i] > hist[(i + bins - 1) % bins] && hist[i] > hist[(i + 1) % bins])
            .collect();
        assert!(modes.len() >= 2, "{hist:?}");
        modes.sort_by_key(|&i| std::cmp::Reverse(hist[i]));
        let gap = (modes[0] as isize - modes[1] as isize).unsigned_abs();
        let gap = gap.min(bins - gap) as f64 * 2.0 * PI / bins as f64;
        assert!(gap >= 1.0, "{hist:?}");
    }

    #[test]
    fn invalid_params_rejected() {
        let p = RobotParams {
            flip_time: 50.0,
            ..RobotParams::default()
        };
        assert!(simulate_robot(&p, 0).is_err());
        let p = RobotParams {
            dt: 0.0,
            ..RobotParams::default()
        };
        assert!(p.validate().is_err());
    }
}

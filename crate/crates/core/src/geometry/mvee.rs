use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::ellipsoid::Ellipsoid;
use crate::error::{Error, Result};
use crate::stats::RowMatrix;

pub const DEFAULT_TOL: f64 = 1e-7;

const MAX_ITERATIONS: usize = 1_000_000;
const REFRESH_EVERY: usize = 256;
const RANK_TOL: f64 = 1e-10;

/// Minimum-volume enclosing ellipsoid of the rows of `points`.
///
/// Solves the dual by Khachiyan's barycentric coordinate ascent with
/// Todd–Yildirim away steps, stopping once every lifted point satisfies
/// `q_iᵀ X⁻¹ q_i ≤ (1 + tol)(n + 1)`. The primal shape is finally rescaled so
/// the farthest point lies exactly on the boundary.
pub fn mvee(points: &RowMatrix, tol: f64) -> Result<Ellipsoid> {
    let n = points.cols();
    let m = points.rows();
    if n == 0 {
        return Err(Error::InvalidConfig("points must have at least one column".into()));
    }
    if m <= n {
        return Err(Error::TooFewPoints {
            needed: n + 1,
            dim: n,
            got: m,
        });
    }
    if !(tol > 0.0 && tol.is_finite()) {
        return Err(Error::InvalidConfig(format!("mvee tolerance must be positive, got {tol}")));
    }
    if !points.all_finite() {
        return Err(Error::NonFinite("mvee input points"));
    }

    // Center and rescale for conditioning; the fit is affine-equivariant.
    let mean = points.column_mean();
    let mut spread = 0.0f64;
    for row in points.iter_rows() {
        for (x, c) in row.iter().zip(&mean) {
            spread = spread.max((x - c).abs());
        }
    }
    if spread == 0.0 {
        return Err(Error::RankDeficient { rank: 0, dim: n });
    }
    let y: Vec<DVector<f64>> = points
        .iter_rows()
        .map(|r| DVector::from_iterator(n, r.iter().zip(&mean).map(|(x, c)| (x - c) / spread)))
        .collect();

    let rank = affine_rank(&y, n);
    if rank < n {
        return Err(Error::RankDeficient { rank, dim: n });
    }

    let u = khachiyan(&y, tol);

    let d = n as f64;
    let mut center = DVector::zeros(n);
    for (yi, &ui) in y.iter().zip(&u) {
        center += yi * ui;
    }
    let mut scatter = DMatrix::zeros(n, n);
    for (yi, &ui) in y.iter().zip(&u) {
        if ui > 0.0 {
            let dv = yi - &center;
            scatter += &dv * dv.transpose() * ui;
        }
    }
    let scatter_inv = scatter
        .try_inverse()
        .ok_or(Error::RankDeficient { rank: n - 1, dim: n })?;
    let mut shape = scatter_inv / d;
    let max_q = y
        .iter()
        .map(|yi| {
            let dv = yi - &center;
            (dv.transpose() * &shape * &dv)[(0, 0)]
        })
        .fold(0.0f64, f64::max);
    shape /= max_q;

    // Back to the original coordinates.
    let center_x = DVector::from_iterator(n, center.iter().zip(&mean).map(|(c, m)| m + spread * c));
    let shape_x = shape / (spread * spread);
    Ellipsoid::from_center_shape(&center_x, &shape_x)
}

fn affine_rank(y: &[DVector<f64>], n: usize) -> usize {
    let mut cov = DMatrix::zeros(n, n);
    for yi in y {
        cov += yi * yi.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let max = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return 0;
    }
    eig.eigenvalues.iter().filter(|&&l| l > RANK_TOL * max).count()
}

/// Dual weights of the lifted points `[y_i; 1]`.
fn khachiyan(y: &[DVector<f64>], tol: f64) -> Vec<f64> {
    let m = y.len();
    let n = y[0].len();
    let d = (n + 1) as f64;
    let lifted: Vec<DVector<f64>> = y.iter().map(|yi| yi.clone().insert_row(n, 1.0)).collect();

    let mut u = vec![1.0 / m as f64; m];
    let (mut x_inv, mut g) = refresh(&lifted, &u);

    for iter in 0..MAX_ITERATIONS {
        if iter > 0 && iter % REFRESH_EVERY == 0 {
            (x_inv, g) = refresh(&lifted, &u);
        }
        let (j, &g_max) = g
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap();
        let grow = g_max / d - 1.0;
        if grow <= tol {
            // confirm on fresh values before stopping
            (x_inv, g) = refresh(&lifted, &u);
            if g.iter().cloned().fold(f64::MIN, f64::max) <= (1.0 + tol) * d {
                break;
            }
            continue;
        }
        let (k, g_min) = g
            .iter()
            .enumerate()
            .filter(|(i, _)| u[*i] > 0.0)
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, v)| (i, *v))
            .unwrap();
        let shrink = 1.0 - g_min / d;

        let (idx, step) = if grow >= shrink {
            (j, (g_max - d) / (d * (g_max - 1.0)))
        } else {
            // away step, clipped so the weight stays non-negative
            let raw = (g_min - d) / (d * (g_min - 1.0));
            let limit = -u[k] / (1.0 - u[k]);
            (k, raw.max(limit))
        };
        if step == 0.0 || !step.is_finite() {
            continue;
        }

        // Sherman–Morrison update of X⁻¹ and the leverages.
        let v = &x_inv * &lifted[idx];
        let g_idx = g[idx];
        let a = step / (1.0 - step);
        let denom = 1.0 + a * g_idx;
        let scale = 1.0 / (1.0 - step);
        for (gi, qi) in g.iter_mut().zip(&lifted) {
            let t = qi.dot(&v);
            *gi = scale * (*gi - a * t * t / denom);
        }
        x_inv = (&x_inv - (&v * v.transpose()) * (a / denom)) * scale;

        for ui in u.iter_mut() {
            *ui *= 1.0 - step;
        }
        u[idx] += step;
        if u[idx] < 1e-300 {
            u[idx] = 0.0;
        }
    }
    u
}

fn refresh(lifted: &[DVector<f64>], u: &[f64]) -> (DMatrix<f64>, Vec<f64>) {
    let d = lifted[0].len();
    let mut x = DMatrix::zeros(d, d);
    for (q, &w) in lifted.iter().zip(u) {
        if w > 0.0 {
            x += q * q.transpose() * w;
        }
    }
    let x_inv = x
        .cholesky()
        .map(|c| c.inverse())
        .expect("dual moment matrix stays positive definite on a full-rank point set");
    let g = lifted
        .iter()
        .map(|q| (q.transpose() * &x_inv * q)[(0, 0)])
        .collect();
    (x_inv, g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    use crate::stats::rng_from_seed;

    fn from_rows(rows: &[&[f64]]) -> RowMatrix {
        RowMatrix::from_rows(rows).unwrap()
    }

    fn random_points(rng: &mut crate::stats::Rng, m: usize, n: usize) -> RowMatrix {
        let mut pts = RowMatrix::zeros(m, n);
        for i in 0..m {
            for v in pts.row_mut(i) {
                *v = rng.random_range(-1.0..1.0);
            }
        }
        // skew it so the answer is not a ball
        for i in 0..m {
            let r = pts.row_mut(i);
            r[0] = 3.0 * r[0] + 0.5 * r[n - 1];
        }
        pts
    }

    #[test]
    fn symmetric_pair_in_one_dimension() {
        let e = mvee(&from_rows(&[&[-1.0], &[1.0]]), DEFAULT_TOL).unwrap();
        assert!((e.a()[(0, 0)] - 1.0).abs() < 1e-6);
        assert!(e.b()[0].abs() < 1e-9);
    }

    #[test]
    fn unit_square_corners() {
        let pts = from_rows(&[&[1.0, 1.0], &[1.0, -1.0], &[-1.0, 1.0], &[-1.0, -1.0]]);
        let e = mvee(&pts, DEFAULT_TOL).unwrap();
        let expect = 1.0 / 2f64.sqrt();
        assert!((e.a()[(0, 0)] - expect).abs() < 1e-6);
        assert!((e.a()[(1, 1)] - expect).abs() < 1e-6);
        assert!(e.a()[(0, 1)].abs() < 1e-6);
        assert!(e.b().amax() < 1e-6);
    }

    #[test]
    fn cube_corners_give_circumscribed_sphere() {
        let pts = super::super::box_corners(&[-2.0, -3.25, 1.25], &[-1.0, -2.25, 2.25]).unwrap();
        let e = mvee(&pts, DEFAULT_TOL).unwrap();
        let mu = e.mu();
        for (got, want) in mu.iter().zip([-1.5, -2.75, 1.75]) {
            assert!((got - want).abs() < 1e-6);
        }
        let radius = 3f64.sqrt() / 2.0;
        let sigma = e.sigma();
        for i in 0..3 {
            assert!((sigma[(i, i)].sqrt() - radius).abs() < 1e-6);
        }
    }

    #[test]
    fn containment_and_shrink_certificate() {
        let mut rng = rng_from_seed(5);
        let tol = DEFAULT_TOL;
        for _ in 0..20 {
            let n = rng.random_range(1..=4);
            let m = rng.random_range(n + 1..=60);
            let pts = random_points(&mut rng, m, n);
            let e = mvee(&pts, tol).unwrap();
            assert!(pts.iter_rows().all(|p| e.contains(p, tol)));
            let shrunk = e.scaled(1.0 - 10.0 * tol).unwrap();
            assert!(pts.iter_rows().any(|p| !shrunk.contains(p, 0.0)));
        }
    }

    #[test]
    fn affine_equivariance() {
        let mut rng = rng_from_seed(8);
        let n = 3;
        let pts = random_points(&mut rng, 40, n);
        let s = DMatrix::from_fn(n, n, |i, j| if i == j { 2.0 } else { rng.random_range(-0.5..0.5) });
        let t = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let mut mapped = RowMatrix::zeros(40, n);
        for i in 0..40 {
            let p = &s * DVector::from_column_slice(pts.row(i)) + &t;
            mapped.row_mut(i).copy_from_slice(p.as_slice());
        }
        let e = mvee(&pts, 1e-9).unwrap();
        let f = mvee(&mapped, 1e-9).unwrap();
        let mu_expect = &s * e.mu() + &t;
        let sigma_expect = &s * e.sigma() * s.transpose();
        assert!((f.mu() - mu_expect).amax() < 1e-6);
        assert!((f.sigma() - &sigma_expect).amax() < 1e-6 * sigma_expect.amax());
    }

    #[test]
    fn tighter_tolerance_changes_volume_little() {
        let mut rng = rng_from_seed(21);
        let pts = random_points(&mut rng, 80, 3);
        let loose = mvee(&pts, 1e-4).unwrap();
        let tight = mvee(&pts, 1e-10).unwrap();
        let ratio = (loose.log_det_inv_a() - tight.log_det_inv_a()).exp();
        assert!(ratio >= 1.0 - 1e-9);
        assert!(ratio <= (1.0 + 10.0 * 1e-4f64).powi(3));
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        let collinear = from_rows(&[&[0.0, 0.0], &[1.0, 1.0], &[2.0, 2.0], &[3.0, 3.0]]);
        assert!(matches!(
            mvee(&collinear, DEFAULT_TOL),
            Err(Error::RankDeficient { rank: 1, dim: 2 })
        ));
        let few = from_rows(&[&[0.0, 0.0], &[1.0, 0.0]]);
        assert!(matches!(mvee(&few, DEFAULT_TOL), Err(Error::TooFewPoints { .. })));
    }
}

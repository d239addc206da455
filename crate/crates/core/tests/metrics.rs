use flowis::metrics::{coverage, density, euclidean, knn_radii};
use flowis::stats::rng_from_seed;
use flowis::RowMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

fn brute_radii(real: &RowMatrix, k: usize) -> Vec<f64> {
    (0..real.rows())
        .map(|i| {
            let mut d: Vec<f64> = (0..real.rows())
                .filter(|&j| j != i)
                .map(|j| euclidean(real.row(i), real.row(j)))
                .collect();
            d.sort_by(f64::total_cmp);
            d[k - 1]
        })
        .collect()
}

fn brute_coverage(real: &RowMatrix, gen: &RowMatrix, k: usize) -> f64 {
    let r = brute_radii(real, k);
    let hit = (0..real.rows())
        .filter(|&i| (0..gen.rows()).any(|j| euclidean(real.row(i), gen.row(j)) <= r[i]))
        .count();
    hit as f64 / real.rows() as f64
}

fn brute_density(real: &RowMatrix, gen: &RowMatrix, k: usize) -> f64 {
    let r = brute_radii(real, k);
    let mut hits = 0usize;
    for j in 0..gen.rows() {
        for i in 0..real.rows() {
            if euclidean(gen.row(j), real.row(i)) <= r[i] {
                hits += 1;
            }
        }
    }
    hits as f64 / (k * gen.rows()) as f64
}

fn gaussian(n: usize, dim: usize, shift: f64, seed: u64) -> RowMatrix {
    let mut rng = rng_from_seed(seed);
    let data = (0..n * dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal) + shift)
        .collect();
    RowMatrix::from_vec(n, dim, data).unwrap()
}

// integer lattice points produce many exactly tied and on-boundary distances
fn lattice(n: usize, dim: usize, seed: u64) -> RowMatrix {
    let mut rng = rng_from_seed(seed);
    let data = (0..n * dim).map(|_| rng.random_range(-6i32..=6) as f64).collect();
    RowMatrix::from_vec(n, dim, data).unwrap()
}

#[test]
fn tree_matches_brute_force_on_random_instances() {
    for (seed, (n, m, dim)) in [(50, 40, 2), (500, 500, 2), (300, 450, 3), (500, 200, 1)].into_iter().enumerate() {
        let seed = seed as u64;
        let real = gaussian(n, dim, 0.0, seed);
        let gen = gaussian(m, dim, 0.4, seed + 100);
        for k in [1, 5] {
            assert_eq!(knn_radii(&real, k), brute_radii(&real, k));
            assert_eq!(coverage(&real, &gen, k).unwrap(), brute_coverage(&real, &gen, k));
            assert_eq!(density(&real, &gen, k).unwrap(), brute_density(&real, &gen, k));
        }
    }
}

#[test]
fn tree_matches_brute_force_with_ties() {
    for seed in 0..4 {
        let real = lattice(400, 2, seed);
        let gen = lattice(500, 2, seed + 50);
        for k in [1, 3, 5] {
            assert_eq!(coverage(&real, &gen, k).unwrap(), brute_coverage(&real, &gen, k));
            assert_eq!(density(&real, &gen, k).unwrap(), brute_density(&real, &gen, k));
        }
    }
}

#[test]
fn self_density_on_five_points() {
    let real = RowMatrix::from_rows(&[[0.0, 0.0], [1.0, 0.1], [3.0, -0.2], [3.5, 2.0], [-2.2, 1.7]]).unwrap();
    let d = density(&real, &real, 1).unwrap();
    assert_eq!(d, brute_density(&real, &real, 1));
    assert!(d >= 1.0);
    assert_eq!(coverage(&real, &real, 1).unwrap(), 1.0);
}

#[test]
fn metrics_are_rigid_invariant() {
    let real = gaussian(300, 2, 0.0, 7);
    let gen = gaussian(300, 2, 0.3, 8);
    let (s, c) = (0.6f64.sin(), 0.6f64.cos());
    let move_set = |x: &RowMatrix| {
        let rows: Vec<[f64; 2]> = x
            .iter_rows()
            .map(|r| [c * r[0] - s * r[1] + 4.0, s * r[0] + c * r[1] - 2.5])
            .collect();
        RowMatrix::from_rows(&rows).unwrap()
    };
    let (rt, gt) = (move_set(&real), move_set(&gen));
    let cov0 = coverage(&real, &gen, 5).unwrap();
    let cov1 = coverage(&rt, &gt, 5).unwrap();
    let den0 = density(&real, &gen, 5).unwrap();
    let den1 = density(&rt, &gt, 5).unwrap();
    // only floating round-off can move a point across a ball boundary
    assert!((cov0 - cov1).abs() <= 2.0 / 300.0);
    assert!((den0 - den1).abs() <= 2.0 / (5.0 * 300.0));
}

#[test]
fn coverage_grows_with_generated_points() {
    let real = gaussian(400, 2, 0.0, 3);
    let pool = gaussian(600, 2, 0.5, 4);
    let mut last = 0.0;
    for m in [1, 10, 50, 200, 600] {
        let gen = pool.select_rows(&(0..m).collect::<Vec<_>>());
        let c = coverage(&real, &gen, 5).unwrap();
        assert!(c >= last);
        last = c;
    }
    assert!(last > 0.5);
}

#[test]
fn far_generated_points_score_zero() {
    let real = gaussian(100, 2, 0.0, 1);
    let gen = gaussian(50, 2, 100.0, 2);
    assert_eq!(coverage(&real, &gen, 5).unwrap(), 0.0);
    assert_eq!(density(&real, &gen, 5).unwrap(), 0.0);
}

//! End-to-end acceptance checks. Each test writes one `criterion N: PASS|FAIL`
//! line straight to stderr, so the lines appear even when output is captured.

use std::io::Write;
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use flowis::experiment::{run_experiment, ExperimentConfig, RunSummary, AGGREGATE_FILE, CHECKPOINT_FILE};
use flowis::flow::{fit, loss_and_gradient, mean_nll, Checkpoint, FlowArch, FlowModel, Standardizer, TrainConfig};
use flowis::geometry::{box_corners, mvee, Ellipsoid, FailureRegionSet, Space, DEFAULT_TOL};
use flowis::metrics::{coverage, density, euclidean};
use flowis::samplers::{ce_method, latent_is, sis, sis_run, standard_problem, target_is, CeConfig, IsMethod, SisConfig};
use flowis::simulators::synthetic_target;
use flowis::stats::{norm_cdf, rng_from_seed};
use flowis::RowMatrix;

fn report(criterion: u32, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {criterion}: {verdict} ({detail})");
}

fn check(criterion: u32, pass: bool, detail: String) {
    report(criterion, pass, &detail);
    assert!(pass, "criterion {criterion}: {detail}");
}

struct PipelineRun {
    _dir: tempfile::TempDir,
    out: PathBuf,
    summary: RunSummary,
    elapsed: Duration,
}

fn robot_config(out: PathBuf) -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/robot.json");
    let mut cfg = ExperimentConfig::load(&path).unwrap();
    cfg.methods.retain(|m| matches!(m.method, IsMethod::Ce(_)));
    cfg.trials = cfg.trials.max(20);
    cfg.output_dir = out;
    cfg
}

fn run_pipeline() -> PipelineRun {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("robot");
    let cfg = robot_config(out.clone());
    let start = Instant::now();
    let summary = run_experiment(&cfg).unwrap();
    PipelineRun {
        _dir: dir,
        out,
        summary,
        elapsed: start.elapsed(),
    }
}

fn robot_pipeline() -> &'static PipelineRun {
    static RUN: OnceLock<PipelineRun> = OnceLock::new();
    RUN.get_or_init(run_pipeline)
}

#[test]
fn criterion_01_flow_bijectivity() {
    let run = robot_pipeline();
    let flow = Checkpoint::load(run.out.join(CHECKPOINT_FILE)).unwrap().model;
    let start = Instant::now();
    let mut rng = rng_from_seed(1);
    let (mut worst_x, mut worst_ld) = (0.0f64, 0.0f64);
    for _ in 0..10_000 {
        let u: Vec<f64> = (0..flow.dim()).map(|_| rng.sample(StandardNormal)).collect();
        let (x, ld_f) = flow.flow_forward(&u).unwrap();
        let (back, ld_i) = flow.flow_inverse(&x).unwrap();
        for (a, b) in u.iter().zip(&back) {
            worst_x = worst_x.max((a - b).abs());
        }
        worst_ld = worst_ld.max((ld_f + ld_i).abs());
    }
    let t = start.elapsed();
    check(
        1,
        worst_x < 1e-6 && worst_ld < 1e-6 && t < Duration::from_secs(10),
        format!("max round-trip {worst_x:.2e}, max log-det sum {worst_ld:.2e}, {t:.2?}"),
    );
}

#[test]
fn criterion_02_density_normalization() {
    let start = Instant::now();
    let data = synthetic_target("two_moons", 5000, 3).unwrap().outcomes;
    let cfg = TrainConfig {
        epochs: 15,
        batch_size: 128,
        learning_rate: 3e-3,
        layers: 4,
        hidden: vec![32, 32],
        seed: 1,
        ..TrainConfig::default()
    };
    let (flow, _) = fit(&data, &cfg).unwrap();
    let n = 400;
    let h = 12.0 / n as f64;
    let mut mass = 0.0;
    for i in 0..n {
        for j in 0..n {
            let x = [-6.0 + (i as f64 + 0.5) * h, -6.0 + (j as f64 + 0.5) * h];
            mass += flow.log_prob(&x).unwrap().exp();
        }
    }
    mass *= h * h;
    let t = start.elapsed();
    check(
        2,
        (mass - 1.0).abs() <= 0.01 && t < Duration::from_secs(60),
        format!("mass {mass:.5} on a 400x400 grid, {t:.2?}"),
    );
}

#[test]
fn criterion_03_gradient_check() {
    let start = Instant::now();
    let arch = FlowArch {
        layers: 1,
        bins: 4,
        hidden: vec![5, 5],
        tail_bound: 3.0,
    };
    let model = FlowModel::with_random_parameters(2, arch, 17, 0.6).unwrap();
    let raw = RowMatrix::from_rows(&[[0.3, -1.2], [1.5, 0.4], [-0.7, 0.9], [2.1, -0.3], [-1.4, -1.6]]).unwrap();
    let s = Standardizer::fit(&raw).unwrap();
    let rows: Vec<Vec<f64>> = raw.iter_rows().map(|r| s.standardize(r)).collect();
    let z = RowMatrix::from_rows(&rows).unwrap();
    let (_, grad) = loss_and_gradient(&model, &z, &(0..5).collect::<Vec<_>>());
    let params = model.parameters();
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        let mut p = params.clone();
        p[i] += eps;
        let mut plus = model.clone();
        plus.set_parameters(&p).unwrap();
        p[i] -= 2.0 * eps;
        let mut minus = model.clone();
        minus.set_parameters(&p).unwrap();
        let fd = (mean_nll(&plus, &z) - mean_nll(&minus, &z)) / (2.0 * eps);
        worst = worst.max((grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-3));
    }
    let t = start.elapsed();
    check(
        3,
        worst < 1e-4 && t < Duration::from_secs(10),
        format!("worst relative error {worst:.2e} over {} parameters, {t:.2?}", params.len()),
    );
}

#[test]
fn criterion_04_mvee() {
    let start = Instant::now();
    let square = RowMatrix::from_rows(&[[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]]).unwrap();
    let e = mvee(&square, DEFAULT_TOL).unwrap();
    let sigma = e.sigma();
    let radius_err = (0..2)
        .map(|i| (sigma[(i, i)].sqrt() - 2f64.sqrt()).abs())
        .fold(sigma[(0, 1)].abs(), f64::max)
        .max(e.mu().amax());
    let mut rng = rng_from_seed(44);
    let (mut contained, mut certified) = (0, 0);
    for _ in 0..100 {
        let n = rng.random_range(1..=6);
        let m = rng.random_range(n + 1..=200);
        let data: Vec<f64> = (0..m * n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let pts = RowMatrix::from_vec(m, n, data).unwrap();
        let e = mvee(&pts, DEFAULT_TOL).unwrap();
        if pts.iter_rows().all(|p| e.contains(p, DEFAULT_TOL)) {
            contained += 1;
        }
        let shrunk = e.scaled(1.0 - 10.0 * DEFAULT_TOL).unwrap();
        if pts.iter_rows().any(|p| !shrunk.contains(p, 0.0)) {
            certified += 1;
        }
    }
    let t = start.elapsed();
    check(
        4,
        radius_err < 1e-5 && contained == 100 && certified == 100 && t < Duration::from_secs(30),
        format!("square radius error {radius_err:.1e}, containment {contained}/100, shrink excludes {certified}/100, {t:.2?}"),
    );
}

#[test]
fn criterion_05_analytic_benchmark() {
    let start = Instant::now();
    let exact = norm_cdf(-3.0);
    let tail = |u: &[f64]| 3.0 - u[0];
    let ce_mean: f64 = (0..20)
        .map(|s| ce_method(&tail, 2, &CeConfig::default(), s).unwrap().p_hat)
        .sum::<f64>()
        / 20.0;
    let sis_mean: f64 = (0..20)
        .map(|s| sis(&tail, 2, &SisConfig::default(), s).unwrap().p_hat)
        .sum::<f64>()
        / 20.0;
    let (ce_err, sis_err) = ((ce_mean - exact) / exact, (sis_mean - exact) / exact);
    let t = start.elapsed();
    check(
        5,
        ce_err.abs() < 0.10 && sis_err.abs() < 0.15 && t < Duration::from_secs(120),
        format!("CE mean {ce_mean:.4e} ({ce_err:+.3}), SIS mean {sis_mean:.4e} ({sis_err:+.3}), exact {exact:.4e}, {t:.2?}"),
    );
}

#[test]
fn criterion_06_mode_capture() {
    let start = Instant::now();
    let ball = |c: f64| Ellipsoid::new(DMatrix::identity(2, 2), DVector::from_vec(vec![-c, 0.0])).unwrap();
    let regions = FailureRegionSet::new(vec![ball(3.0), ball(-3.0)], Space::Latent).unwrap();
    let cost = |u: &[f64]| regions.cost(u);
    let ce_cfg = CeConfig {
        components: Some(2),
        ..CeConfig::default()
    };
    let mut ce_hits = 0;
    let mut sis_hits = 0;
    for s in 0..20 {
        let g = ce_method(&cost, 2, &ce_cfg, s).unwrap().proposal.unwrap();
        // identity shape matrix, so Mahalanobis distance is Euclidean
        let near = |c: f64| g.means().iter().any(|m| euclidean(m.as_slice(), &[c, 0.0]) <= 1.0);
        if near(3.0) && near(-3.0) {
            ce_hits += 1;
        }
        let problem = standard_problem(2, &cost).unwrap();
        let out = sis_run(&problem, &SisConfig::default(), s).unwrap();
        let n = out.samples.rows() as f64;
        let right = out.samples.iter_rows().filter(|x| x[0] > 0.0).count() as f64 / n;
        if (0.2..=0.8).contains(&right) {
            sis_hits += 1;
        }
    }
    let t = start.elapsed();
    check(
        6,
        ce_hits >= 18 && sis_hits >= 16 && t < Duration::from_secs(180),
        format!("CE both means near centers {ce_hits}/20, SIS >= 20% per mode {sis_hits}/20, {t:.2?}"),
    );
}

fn brute(real: &RowMatrix, gen: &RowMatrix, k: usize) -> (f64, f64) {
    let radii: Vec<f64> = (0..real.rows())
        .map(|i| {
            let mut d: Vec<f64> = (0..real.rows())
                .filter(|&j| j != i)
                .map(|j| euclidean(real.row(i), real.row(j)))
                .collect();
            d.sort_by(f64::total_cmp);
            d[k - 1]
        })
        .collect();
    let mut covered = 0;
    let mut hits = 0;
    for i in 0..real.rows() {
        let mut any = false;
        for j in 0..gen.rows() {
            if euclidean(real.row(i), gen.row(j)) <= radii[i] {
                any = true;
                hits += 1;
            }
        }
        covered += usize::from(any);
    }
    (
        covered as f64 / real.rows() as f64,
        hits as f64 / (k * gen.rows()) as f64,
    )
}

#[test]
fn criterion_07_metric_oracle() {
    let start = Instant::now();
    let mut rng = rng_from_seed(70);
    let mut matched = 0;
    for inst in 0..50 {
        let dim = rng.random_range(1..=4);
        let n = rng.random_range(10..=500);
        let m = rng.random_range(1..=500);
        let k = rng.random_range(1..=5.min(n - 1));
        // every fifth instance lives on an integer lattice to force ties
        let mut draw = |rows: usize, shift: f64| {
            let data = (0..rows * dim)
                .map(|_| {
                    if inst % 5 == 0 {
                        rng.random_range(-5i32..=5) as f64
                    } else {
                        rng.sample::<f64, _>(StandardNormal) + shift
                    }
                })
                .collect();
            RowMatrix::from_vec(rows, dim, data).unwrap()
        };
        let real = draw(n, 0.0);
        let gen = draw(m, 0.3);
        let fast = (coverage(&real, &gen, k).unwrap(), density(&real, &gen, k).unwrap());
        if fast == brute(&real, &gen, k) {
            matched += 1;
        }
    }
    let t = start.elapsed();
    check(
        7,
        matched == 50 && t < Duration::from_secs(60),
        format!("exact match on {matched}/50 instances, {t:.2?}"),
    );
}

#[test]
fn criterion_08_identity_transport() {
    let start = Instant::now();
    let flow = FlowModel::identity(2, FlowArch::default()).unwrap();
    let sets = vec![
        box_corners(&[2.0, 2.0], &[3.0, 3.0]).unwrap(),
        box_corners(&[-3.0, 1.5], &[-2.0, 2.5]).unwrap(),
    ];
    let mut same = 0;
    let mut total = 0;
    for method in [IsMethod::Ce(CeConfig::default()), IsMethod::Sis(SisConfig::default())] {
        for seed in 0..5 {
            let a = latent_is(&flow, &sets, &method, seed, DEFAULT_TOL).unwrap();
            let b = target_is(&flow, &sets, &method, seed, DEFAULT_TOL).unwrap();
            total += 1;
            if a.report == b.report {
                same += 1;
            }
        }
    }
    let t = start.elapsed();
    check(
        8,
        same == total && t < Duration::from_secs(60),
        format!("identical reports {same}/{total} (CE and SIS), {t:.2?}"),
    );
}

#[test]
fn criterion_09_table_trends() {
    let run = robot_pipeline();
    let s = &run.summary;
    let row = |name: &str| s.aggregate.iter().find(|r| r.method == name).unwrap();
    let (lat, tgt) = (row("latent-ce"), row("target-ce"));
    let p_ok = (0.003..=0.02).contains(&s.reference.p_ref) && s.reference.n >= 1_000_000;
    let trials_ok = lat.trials >= 20 && tgt.trials >= 20 && lat.failed == 0 && tgt.failed == 0;
    let a = lat.coverage.0 > tgt.coverage.0;
    let b = lat.avg_nll.0 < tgt.avg_nll.0;
    let c = lat.n_total.0 <= tgt.n_total.0;
    let d = lat.rel_error.0.abs() <= 0.6;
    let fast = run.elapsed < Duration::from_secs(1800);
    let mark = |ok: bool| if ok { "ok" } else { "FAIL" };
    check(
        9,
        p_ok && trials_ok && a && b && c && d && fast,
        format!(
            "P_F {:.5} from {} sims [{}]; {} trials; (a) coverage {:.3} vs {:.3} [{}]; (b) avg NLL {:.3} vs {:.3} [{}]; \
             (c) N_total {:.0} vs {:.0} [{}]; (d) latent rel. error {:+.3} [{}]; {:.1?}",
            s.reference.p_ref,
            s.reference.n,
            mark(p_ok),
            lat.trials,
            lat.coverage.0,
            tgt.coverage.0,
            mark(a),
            lat.avg_nll.0,
            tgt.avg_nll.0,
            mark(b),
            lat.n_total.0,
            tgt.n_total.0,
            mark(c),
            lat.rel_error.0,
            mark(d),
            run.elapsed
        ),
    );
}

#[test]
fn criterion_10_determinism() {
    let first = robot_pipeline();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("robot");
    let cfg = robot_config(out.clone());
    // rerun on a different worker count
    let pool = rayon::ThreadPoolBuilder::new().num_threads(2).build().unwrap();
    pool.install(|| run_experiment(&cfg)).unwrap();
    let a = std::fs::read(first.out.join(AGGREGATE_FILE)).unwrap();
    let b = std::fs::read(out.join(AGGREGATE_FILE)).unwrap();
    check(
        10,
        a == b,
        format!("aggregate CSV {} bytes, byte-identical: {}", a.len(), a == b),
    );
}

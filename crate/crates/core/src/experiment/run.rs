use std::fs;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, FailureEvent, FlowSpec, ReferenceSource};
use crate::error::{Error, Result};
use crate::flow::{split_dataset, Checkpoint, FlowModel, TrainConfig, TrainReport, TrainState, Trainer};
use crate::geometry::{FailureRegionSet, Space};
use crate::metrics::{avg_nll, coverage, density, relative_error, MetricReport};
use crate::samplers::{latent_is, target_is, EstimateReport, IsOutcome};
use crate::simulators::{write_matrix_csv, OutcomeDataset};
use crate::stats::{derive_seed, mean, rng_from_seed, sample_std, RowMatrix};

const DATASET_STREAM: u64 = 0;
const REFERENCE_STREAM: u64 = 1;
const TRIAL_STREAM: u64 = 2;
const EVAL_STREAM: u64 = 3;
const SUBSET_STREAM: u64 = 4;

pub const AGGREGATE_FILE: &str = "aggregate.csv";
pub const REFERENCE_FILE: &str = "reference.json";
pub const REAL_FAILURES_FILE: &str = "real_failures.csv";
pub const FAILURE_POINTS_FILE: &str = "failure_points.csv";
pub const CHECKPOINT_FILE: &str = "flow.json";
pub const CURVE_FILE: &str = "training_curve.csv";
pub const TRIALS_DIR: &str = "trials";
pub const SAMPLES_DIR: &str = "samples";

pub const AGGREGATE_COLUMNS: [&str; 13] = [
    "method",
    "trials",
    "failed",
    "rel_error_mean",
    "rel_error_std",
    "avg_nll_mean",
    "avg_nll_std",
    "coverage_mean",
    "coverage_std",
    "density_mean",
    "density_std",
    "n_total_mean",
    "n_total_std",
];

/// Monte Carlo reference of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSummary {
    pub source: ReferenceSource,
    pub n: usize,
    pub failures: usize,
    pub p_ref: f64,
    pub real_points: usize,
    pub seed: u64,
    pub columns: Vec<String>,
}

/// One (method, trial) cell of the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub method: String,
    pub trial: usize,
    pub seed: u64,
    pub error: Option<String>,
    pub report: Option<EstimateReport>,
    pub metrics: Option<MetricReport>,
    pub nll_excluded: usize,
}

/// Mean and sample standard deviation of each metric for one method.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub method: String,
    pub trials: usize,
    pub failed: usize,
    pub rel_error: (f64, f64),
    pub avg_nll: (f64, f64),
    pub coverage: (f64, f64),
    pub density: (f64, f64),
    pub n_total: (f64, f64),
}

impl AggregateRow {
    pub fn from_records(method: &str, records: &[&TrialRecord]) -> Self {
        let ok: Vec<&MetricReport> = records.iter().filter_map(|r| r.metrics.as_ref()).collect();
        let stat = |f: &dyn Fn(&MetricReport) -> Option<f64>| {
            let v: Vec<f64> = ok.iter().filter_map(|m| f(m)).collect();
            (mean(&v), sample_std(&v))
        };
        Self {
            method: method.to_string(),
            trials: records.len(),
            failed: records.len() - ok.len(),
            rel_error: stat(&|m| Some(m.relative_error)),
            avg_nll: stat(&|m| m.avg_nll),
            coverage: stat(&|m| Some(m.coverage)),
            density: stat(&|m| Some(m.density)),
            n_total: stat(&|m| Some(m.n_total as f64)),
        }
    }

    pub fn record(&self) -> Vec<String> {
        let mut r = vec![self.method.clone(), self.trials.to_string(), self.failed.to_string()];
        for (m, s) in [self.rel_error, self.avg_nll, self.coverage, self.density, self.n_total] {
            r.push(m.to_string());
            r.push(s.to_string());
        }
        r
    }

    pub fn from_record(rec: &csv::StringRecord) -> Result<Self> {
        if rec.len() != AGGREGATE_COLUMNS.len() {
            return Err(Error::DimensionMismatch {
                expected: AGGREGATE_COLUMNS.len(),
                got: rec.len(),
            });
        }
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("bad number `{}` in column {}", &rec[i], AGGREGATE_COLUMNS[i])))
        };
        let int = |i: usize| -> Result<usize> {
            rec[i]
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("bad count `{}` in column {}", &rec[i], AGGREGATE_COLUMNS[i])))
        };
        Ok(Self {
            method: rec[0].to_string(),
            trials: int(1)?,
            failed: int(2)?,
            rel_error: (num(3)?, num(4)?),
            avg_nll: (num(5)?, num(6)?),
            coverage: (num(7)?, num(8)?),
            density: (num(9)?, num(10)?),
            n_total: (num(11)?, num(12)?),
        })
    }
}

/// Everything a run produced.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub reference: ReferenceSummary,
    pub records: Vec<TrialRecord>,
    pub aggregate: Vec<AggregateRow>,
}

impl RunSummary {
    pub fn failed_trials(&self) -> usize {
        self.records.iter().filter(|r| r.error.is_some()).count()
    }
}

/// Trains a fresh flow, logging the validation curve.
pub fn train_flow(data: &RowMatrix, config: &TrainConfig) -> Result<(FlowModel, TrainReport, TrainState)> {
    let split = split_dataset(data, config)?;
    let mut trainer = Trainer::new(config.clone(), data.cols(), &split)?;
    while trainer.state().epochs_done < config.epochs {
        let s = trainer.run_epoch(&split)?;
        log::info!("epoch {} train nll {:.5} val nll {:.5}", s.epoch, s.train_nll, s.val_nll);
    }
    Ok(trainer.into_parts())
}

/// Writes `epoch,train_nll,val_nll`, one row per epoch.
pub fn write_training_curve(path: &Path, report: &TrainReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "train_nll", "val_nll"])?;
    for s in &report.curve {
        w.write_record([s.epoch.to_string(), s.train_nll.to_string(), s.val_nll.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn obtain_flow(cfg: &ExperimentConfig, dataset: &OutcomeDataset, out: &Path) -> Result<FlowModel> {
    let model = match &cfg.flow {
        FlowSpec::Checkpoint(p) => Checkpoint::load(p)?.model,
        FlowSpec::Train(t) => {
            let (model, report, state) = train_flow(&dataset.outcomes, t)?;
            write_training_curve(&out.join(CURVE_FILE), &report)?;
            Checkpoint {
                model: model.clone(),
                training: Some((t.clone(), state)),
            }
            .save(out.join(CHECKPOINT_FILE))?;
            model
        }
    };
    if model.dim() != dataset.dim() {
        return Err(Error::DimensionMismatch {
            expected: dataset.dim(),
            got: model.dim(),
        });
    }
    Ok(model)
}

fn build_reference(
    cfg: &ExperimentConfig,
    flow: &FlowModel,
    regions: &FailureRegionSet,
    names: &[String],
) -> Result<(ReferenceSummary, RowMatrix)> {
    let seed = derive_seed(cfg.seed, REFERENCE_STREAM);
    let pool = match cfg.reference.source {
        ReferenceSource::Simulator => cfg.dataset.build_pool(cfg.reference.n, seed)?,
        ReferenceSource::Flow => flow.sample(cfg.reference.n, seed),
    };
    let fails: Vec<usize> = (0..pool.rows())
        .into_par_iter()
        .filter(|&i| match &cfg.reference.event {
            FailureEvent::Regions => regions.cost(pool.row(i)) <= 0.0,
            FailureEvent::Boxes(boxes) => boxes.iter().any(|b| b.contains(pool.row(i))),
        })
        .collect();
    let p_ref = fails.len() as f64 / pool.rows() as f64;
    let keep: Vec<usize> = if fails.len() > cfg.reference.max_real {
        let mut rng = rng_from_seed(derive_seed(seed, SUBSET_STREAM));
        let mut idx = sample_indices(&mut rng, fails.len(), cfg.reference.max_real).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| fails[i]).collect()
    } else {
        fails.clone()
    };
    let real = pool.select_rows(&keep);
    let summary = ReferenceSummary {
        source: cfg.reference.source,
        n: pool.rows(),
        failures: fails.len(),
        p_ref,
        real_points: real.rows(),
        seed,
        columns: names.to_vec(),
    };
    Ok((summary, real))
}

struct TrialContext<'a> {
    cfg: &'a ExperimentConfig,
    flow: &'a FlowModel,
    failure_sets: &'a [RowMatrix],
    p_ref: f64,
    real_std: &'a RowMatrix,
}

struct TrialResult {
    report: EstimateReport,
    metrics: MetricReport,
    nll_excluded: usize,
    target: RowMatrix,
    latent: RowMatrix,
}

fn standardize_rows(flow: &FlowModel, x: &RowMatrix) -> RowMatrix {
    let mut out = RowMatrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        out.row_mut(i).copy_from_slice(&flow.standardizer().standardize(x.row(i)));
    }
    out
}

fn run_trial(ctx: &TrialContext<'_>, method_idx: usize, seed: u64) -> Result<TrialResult> {
    let spec = &ctx.cfg.methods[method_idx];
    let outcome: IsOutcome = match spec.space {
        Space::Latent => latent_is(ctx.flow, ctx.failure_sets, &spec.method, seed, ctx.cfg.mvee_tol)?,
        Space::Target => target_is(ctx.flow, ctx.failure_sets, &spec.method, seed, ctx.cfg.mvee_tol)?,
    };
    let report = outcome.report;
    let proposal = report
        .proposal
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("method reported no final proposal".into()))?;
    let drawn = proposal.sample_n(ctx.cfg.n_eval, &mut rng_from_seed(derive_seed(seed, EVAL_STREAM)));
    let (target, latent) = match spec.space {
        Space::Latent => (ctx.flow.forward_batch(&drawn)?, drawn),
        Space::Target => {
            let u = ctx.flow.inverse_batch(&drawn)?;
            (drawn, u)
        }
    };
    let nll = avg_nll(ctx.flow, &target)?;
    let gen_std = standardize_rows(ctx.flow, &target);
    let metrics = MetricReport {
        relative_error: relative_error(report.p_hat, ctx.p_ref)?,
        avg_nll: nll.mean,
        coverage: coverage(ctx.real_std, &gen_std, ctx.cfg.metrics_k)?,
        density: density(ctx.real_std, &gen_std, ctx.cfg.metrics_k)?,
        n_total: report.n_total,
        n_eval: ctx.cfg.n_eval,
        k: ctx.cfg.metrics_k,
    };
    Ok(TrialResult {
        report,
        metrics,
        nll_excluded: nll.excluded,
        target,
        latent,
    })
}

/// Seed used to generate the dataset of a run.
pub fn dataset_seed(root: u64) -> u64 {
    derive_seed(root, DATASET_STREAM)
}

/// Seed of trial `t`; shared by every method so methods see common seeds.
pub fn trial_seed(root: u64, t: usize) -> u64 {
    derive_seed(derive_seed(root, TRIAL_STREAM), t as u64)
}

pub fn trial_file_stem(method: &str, trial: usize) -> String {
    format!("{method}_{trial:03}")
}

/// Runs the whole pipeline and writes every output under `cfg.output_dir`.
/// Individual trial failures are recorded and do not stop the run.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let out = cfg.output_dir.as_path();
    fs::create_dir_all(out.join(TRIALS_DIR))?;
    fs::create_dir_all(out.join(SAMPLES_DIR))?;
    fs::write(out.join("config.json"), cfg.to_json()?)?;

    let dataset = cfg.dataset.build(dataset_seed(cfg.seed))?;
    log::info!("dataset: {} rows, {} columns", dataset.len(), dataset.dim());
    let flow = obtain_flow(cfg, &dataset, out)?;

    let failure_sets = cfg
        .failure_regions
        .iter()
        .map(|r| r.points(&dataset.outcomes))
        .collect::<Result<Vec<_>>>()?;
    for s in &failure_sets {
        if s.cols() != dataset.dim() {
            return Err(Error::DimensionMismatch {
                expected: dataset.dim(),
                got: s.cols(),
            });
        }
    }
    write_failure_points(&out.join(FAILURE_POINTS_FILE), &dataset.names, &failure_sets)?;
    let target_regions = FailureRegionSet::fit(&failure_sets, Space::Target, cfg.mvee_tol)?;

    let (reference, real) = build_reference(cfg, &flow, &target_regions, &dataset.names)?;
    log::info!(
        "reference: {} of {} pool samples fail, p_ref = {}",
        reference.failures,
        reference.n,
        reference.p_ref
    );
    fs::write(out.join(REFERENCE_FILE), serde_json::to_string_pretty(&reference)? + "\n")?;
    write_matrix_csv(&out.join(REAL_FAILURES_FILE), &dataset.names, &real)?;
    if reference.real_points <= cfg.metrics_k {
        return Err(Error::InvalidConfig(format!(
            "only {} reference failures; coverage needs more than k = {}",
            reference.real_points, cfg.metrics_k
        )));
    }

    let real_std = standardize_rows(&flow, &real);
    let ctx = TrialContext {
        cfg,
        flow: &flow,
        failure_sets: &failure_sets,
        p_ref: reference.p_ref,
        real_std: &real_std,
    };
    let mut header = dataset.names.clone();
    header.extend((0..dataset.dim()).map(|d| format!("u{d}")));

    let jobs: Vec<(usize, usize)> = (0..cfg.methods.len())
        .flat_map(|m| (0..cfg.trials).map(move |t| (m, t)))
        .collect();
    let records = jobs
        .par_iter()
        .map(|&(m, t)| -> Result<TrialRecord> {
            let label = cfg.methods[m].label();
            let seed = trial_seed(cfg.seed, t);
            let stem = trial_file_stem(&label, t);
            let record = match run_trial(&ctx, m, seed) {
                Ok(r) => {
                    write_matrix_csv(&out.join(SAMPLES_DIR).join(format!("{stem}.csv")), &header, &hstack(&r.target, &r.latent))?;
                    TrialRecord {
                        method: label,
                        trial: t,
                        seed,
                        error: None,
                        report: Some(r.report),
                        metrics: Some(r.metrics),
                        nll_excluded: r.nll_excluded,
                    }
                }
                Err(e) => {
                    log::warn!("{label} trial {t} failed: {e}");
                    TrialRecord {
                        method: label,
                        trial: t,
                        seed,
                        error: Some(e.to_string()),
                        report: None,
                        metrics: None,
                        nll_excluded: 0,
                    }
                }
            };
            fs::write(
                out.join(TRIALS_DIR).join(format!("{stem}.json")),
                serde_json::to_string_pretty(&record)? + "\n",
            )?;
            Ok(record)
        })
        .collect::<Result<Vec<_>>>()?;

    let aggregate: Vec<AggregateRow> = cfg
        .methods
        .iter()
        .map(|m| {
            let label = m.label();
            let rs: Vec<&TrialRecord> = records.iter().filter(|r| r.method == label).collect();
            AggregateRow::from_records(&label, &rs)
        })
        .collect();
    write_aggregate(&out.join(AGGREGATE_FILE), &aggregate)?;
    Ok(RunSummary {
        reference,
        records,
        aggregate,
    })
}

fn hstack(a: &RowMatrix, b: &RowMatrix) -> RowMatrix {
    let mut m = RowMatrix::empty(a.cols() + b.cols());
    for i in 0..a.rows() {
        let mut row = a.row(i).to_vec();
        row.extend_from_slice(b.row(i));
        m.push_row(&row);
    }
    m
}

fn write_failure_points(path: &Path, names: &[String], sets: &[RowMatrix]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["region".to_string()];
    header.extend_from_slice(names);
    w.write_record(&header)?;
    for (r, s) in sets.iter().enumerate() {
        for row in s.iter_rows() {
            let mut rec = vec![r.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_aggregate(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(AGGREGATE_COLUMNS)?;
    for r in rows {
        w.write_record(r.record())?;
    }
    w.flush()?;
    Ok(())
}

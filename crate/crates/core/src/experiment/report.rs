use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::run::{
    trial_file_stem, AggregateRow, ReferenceSummary, AGGREGATE_FILE, FAILURE_POINTS_FILE, REAL_FAILURES_FILE,
    REFERENCE_FILE, SAMPLES_DIR, TRIALS_DIR,
};
use crate::error::{Error, Result};
use crate::simulators::{read_matrix_csv, write_matrix_csv};
use crate::stats::RowMatrix;

const EXPECTED: &str = "aggregate.csv, reference.json, failure_points.csv, real_failures.csv, trials/, samples/";

/// Aggregate results of a finished run directory.
#[derive(Debug, Clone)]
pub struct RunView {
    pub dir: PathBuf,
    pub reference: ReferenceSummary,
    pub rows: Vec<AggregateRow>,
}

pub fn load_run(dir: &Path) -> Result<RunView> {
    let missing = |what: &str| Error::MissingRunOutput {
        dir: dir.display().to_string(),
        missing: what.to_string(),
        expected: EXPECTED,
    };
    if !dir.is_dir() {
        return Err(missing("the directory itself"));
    }
    for f in [AGGREGATE_FILE, REFERENCE_FILE, FAILURE_POINTS_FILE, REAL_FAILURES_FILE] {
        if !dir.join(f).is_file() {
            return Err(missing(f));
        }
    }
    for d in [TRIALS_DIR, SAMPLES_DIR] {
        if !dir.join(d).is_dir() {
            return Err(missing(&format!("{d}/")));
        }
    }
    let reference: ReferenceSummary = serde_json::from_str(&fs::read_to_string(dir.join(REFERENCE_FILE))?)?;
    let mut r = csv::Reader::from_path(dir.join(AGGREGATE_FILE))?;
    let rows = r
        .records()
        .map(|rec| AggregateRow::from_record(&rec?))
        .collect::<Result<Vec<_>>>()?;
    Ok(RunView {
        dir: dir.to_path_buf(),
        reference,
        rows,
    })
}

fn pm(v: (f64, f64), digits: usize) -> String {
    if v.0.is_nan() {
        "n/a".into()
    } else {
        format!("{:.*} ± {:.*}", digits, v.0, digits, v.1)
    }
}

/// Plain-text table with one row per method.
pub fn render_table(view: &RunView) -> String {
    let header = ["method", "rel. error", "avg NLL", "coverage", "density", "N_total", "failed"];
    let body: Vec<[String; 7]> = view
        .rows
        .iter()
        .map(|r| {
            [
                r.method.clone(),
                pm(r.rel_error, 3),
                pm(r.avg_nll, 3),
                pm(r.coverage, 3),
                pm(r.density, 3),
                pm(r.n_total, 0),
                format!("{}/{}", r.failed, r.trials),
            ]
        })
        .collect();
    let mut width: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in &body {
        for (w, c) in width.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let mut s = String::new();
    let _ = writeln!(
        s,
        "reference P_F = {} ({} failures in {} samples)",
        view.reference.p_ref, view.reference.failures, view.reference.n
    );
    let line = |cells: &[String]| {
        cells
            .iter()
            .zip(&width)
            .map(|(c, w)| format!("{c:<w$}", w = *w))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let _ = writeln!(s, "{}", line(&header.map(String::from)));
    let _ = writeln!(s, "{}", width.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
    for row in &body {
        let _ = writeln!(s, "{}", line(row));
    }
    s
}

/// Writes per-method target- and latent-space sample CSVs for one trial,
/// plus the failure points and the real failure set, into `out`.
pub fn write_scatter(view: &RunView, trial: usize, out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    for row in &view.rows {
        let src = view
            .dir
            .join(SAMPLES_DIR)
            .join(format!("{}.csv", trial_file_stem(&row.method, trial)));
        if !src.is_file() {
            log::warn!("no samples for {} trial {trial}", row.method);
            continue;
        }
        let (names, m) = read_matrix_csv(&src)?;
        let n = names.len() / 2;
        let half = |lo: usize| {
            let mut h = RowMatrix::empty(n);
            for r in m.iter_rows() {
                h.push_row(&r[lo..lo + n]);
            }
            h
        };
        for (suffix, lo) in [("target", 0), ("latent", n)] {
            let path = out.join(format!("{}_{suffix}.csv", row.method));
            write_matrix_csv(&path, &names[lo..lo + n], &half(lo))?;
            written.push(path);
        }
    }
    for f in [FAILURE_POINTS_FILE, REAL_FAILURES_FILE] {
        let path = out.join(f);
        fs::copy(view.dir.join(f), &path)?;
        written.push(path);
    }
    Ok(written)
}

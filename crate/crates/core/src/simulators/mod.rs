mod robot;
mod synthetic;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use robot::{generate_robot_dataset, simulate_robot, simulate_robot_detailed, wrap_angle, RobotParams};
pub use synthetic::{synthetic_target, SyntheticTarget, SYNTHETIC_NAMES, TWO_MOONS_NOISE};

use crate::error::{Error, Result};
use crate::stats::RowMatrix;

/// Where a dataset came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Robot(RobotParams),
    Synthetic { target: SyntheticTarget },
    File { path: PathBuf },
}

/// Simulation outcomes, one row per trial.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeDataset {
    pub names: Vec<String>,
    pub outcomes: RowMatrix,
    pub seed: u64,
    pub source: DatasetSource,
}

/// JSON sidecar written next to a dataset CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub rows: usize,
    pub columns: Vec<String>,
    pub seed: u64,
    pub source: DatasetSource,
}

pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

impl OutcomeDataset {
    pub fn dim(&self) -> usize {
        self.outcomes.cols()
    }

    pub fn len(&self) -> usize {
        self.outcomes.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.outcomes.is_empty()
    }

    /// Writes the CSV (header row of column names) and its JSON sidecar.
    pub fn save(&self, csv_path: &Path) -> Result<()> {
        write_matrix_csv(csv_path, &self.names, &self.outcomes)?;
        let sidecar = DatasetSidecar {
            rows: self.len(),
            columns: self.names.clone(),
            seed: self.seed,
            source: self.source.clone(),
        };
        fs::write(sidecar_path(csv_path), serde_json::to_string_pretty(&sidecar)? + "\n")?;
        Ok(())
    }

    /// Reads a dataset CSV; the sidecar is used when present.
    pub fn load(csv_path: &Path) -> Result<Self> {
        let (names, outcomes) = read_matrix_csv(csv_path)?;
        let side = sidecar_path(csv_path);
        let (seed, source) = if side.exists() {
            let s: DatasetSidecar = serde_json::from_str(&fs::read_to_string(&side)?)?;
            if s.rows != outcomes.rows() || s.columns != names {
                return Err(Error::InvalidConfig(format!(
                    "{} does not match {}",
                    side.display(),
                    csv_path.display()
                )));
            }
            (s.seed, s.source)
        } else {
            (
                0,
                DatasetSource::File {
                    path: csv_path.to_path_buf(),
                },
            )
        };
        Ok(Self {
            names,
            outcomes,
            seed,
            source,
        })
    }
}

/// Writes a header row and one row per matrix row. Floats use the shortest
/// representation that round-trips exactly.
pub fn write_matrix_csv(path: &Path, header: &[String], m: &RowMatrix) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in m.iter_rows() {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a CSV with a header row into column names and a matrix.
pub fn read_matrix_csv(path: &Path) -> Result<(Vec<String>, RowMatrix)> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let names: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let mut m = RowMatrix::empty(names.len());
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(str::parse::<f64>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::InvalidConfig(format!("{}: row {}: {e}", path.display(), i + 2)))?;
        if row.len() != names.len() {
            return Err(Error::DimensionMismatch {
                expected: names.len(),
                got: row.len(),
            });
        }
        m.push_row(&row);
    }
    if !m.all_finite() {
        return Err(Error::NonFinite("dataset entries"));
    }
    Ok((names, m))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("robot.csv");
        let d = generate_robot_dataset(50, &RobotParams::default(), 7).unwrap();
        d.save(&path).unwrap();
        let back = OutcomeDataset::load(&path).unwrap();
        assert_eq!(back, d);
        let first = fs::read(&path).unwrap();
        generate_robot_dataset(50, &RobotParams::default(), 7).unwrap().save(&path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);
        assert!(fs::read_to_string(&path).unwrap().starts_with("x,y,theta\n"));
    }
}

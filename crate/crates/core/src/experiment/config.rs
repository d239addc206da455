use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::TrainConfig;
use crate::geometry::{box_corners, read_points_csv, Space, DEFAULT_TOL};
use crate::metrics::{DEFAULT_EVAL_SIZE, DEFAULT_K};
use crate::samplers::IsMethod;
use crate::simulators::{
    generate_robot_dataset, synthetic_target, OutcomeDataset, RobotParams, SyntheticTarget,
};
use crate::stats::RowMatrix;

pub const SCHEMA_VERSION: u32 = 1;

/// Full description of a latent-versus-target comparison run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub dataset: DatasetSpec,
    pub flow: FlowSpec,
    pub failure_regions: Vec<RegionSpec>,
    pub methods: Vec<MethodSpec>,
    pub trials: usize,
    /// Root seed; dataset, reference pool and trial seeds are derived from it.
    pub seed: u64,
    #[serde(default = "default_eval")]
    pub n_eval: usize,
    #[serde(default)]
    pub reference: ReferenceSpec,
    #[serde(default = "default_k")]
    pub metrics_k: usize,
    #[serde(default = "default_tol")]
    pub mvee_tol: f64,
    pub output_dir: PathBuf,
}

fn default_eval() -> usize {
    DEFAULT_EVAL_SIZE
}

fn default_k() -> usize {
    DEFAULT_K
}

fn default_tol() -> f64 {
    DEFAULT_TOL
}

/// Training data for the flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Robot {
        n: usize,
        #[serde(default)]
        params: RobotParams,
    },
    Synthetic {
        target: SyntheticTarget,
        n: usize,
    },
    File {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowSpec {
    Train(TrainConfig),
    Checkpoint(PathBuf),
}

/// A failure set: the corners of an axis-aligned box, the training points
/// that fall inside a box, or a CSV of points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionSpec {
    Box { lo: Vec<f64>, hi: Vec<f64> },
    DatasetBox { lo: Vec<f64>, hi: Vec<f64> },
    Points(PathBuf),
}

/// Closed axis-aligned box; bounds may be given in either order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxBounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxBounds {
    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (a, b))| a.min(*b) <= *v && *v <= a.max(*b))
    }
}

/// Event that counts as a true failure in the reference pool.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureEvent {
    /// Non-positive cost under the target-space ellipsoids.
    #[default]
    Regions,
    /// Membership in any of the boxes.
    Boxes(Vec<BoxBounds>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub space: Space,
    pub method: IsMethod,
    /// Row label; defaults to `<space>-<method>`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl MethodSpec {
    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| {
            let space = match self.space {
                Space::Latent => "latent",
                Space::Target => "target",
            };
            format!("{space}-{}", self.method.name())
        })
    }
}

/// Where the Monte Carlo reference pool comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceSource {
    /// The dataset's simulator; unavailable for file datasets.
    #[default]
    Simulator,
    /// Samples from the trained flow.
    Flow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReferenceSpec {
    pub source: ReferenceSource,
    /// Pool size for the reference failure probability.
    pub n: usize,
    /// Cap on the real failure set used by coverage and density.
    pub max_real: usize,
    pub event: FailureEvent,
}

impl Default for ReferenceSpec {
    fn default() -> Self {
        Self {
            source: ReferenceSource::Simulator,
            n: 1_000_000,
            max_real: 2000,
            event: FailureEvent::Regions,
        }
    }
}

impl ExperimentConfig {
    /// Parses, resolves relative paths against the config file's directory
    /// and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: Self = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let DatasetSpec::File { path } = &mut self.dataset {
            fix(path);
        }
        if let FlowSpec::Checkpoint(p) = &mut self.flow {
            fix(p);
        }
        for r in &mut self.failure_regions {
            if let RegionSpec::Points(p) = r {
                fix(p);
            }
        }
        fix(&mut self.output_dir);
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.trials == 0 {
            return bad("trials must be at least 1".into());
        }
        if self.methods.is_empty() {
            return bad("the method matrix is empty".into());
        }
        if self.failure_regions.is_empty() {
            return Err(Error::EmptyRegionSet);
        }
        if self.n_eval == 0 || self.metrics_k == 0 {
            return bad("n_eval and metrics_k must be at least 1".into());
        }
        if !(self.mvee_tol > 0.0 && self.mvee_tol < 1.0) {
            return bad(format!("mvee_tol must lie in (0, 1), got {}", self.mvee_tol));
        }
        if self.reference.n == 0 || self.reference.max_real <= self.metrics_k {
            return bad("reference.n must be positive and reference.max_real above metrics_k".into());
        }
        let mut labels = HashSet::new();
        for m in &self.methods {
            if !labels.insert(m.label()) {
                return bad(format!("duplicate method label `{}`", m.label()));
            }
        }
        let must_exist = |p: &Path, what: &str| {
            if p.exists() {
                Ok(())
            } else {
                bad(format!("{what} {} does not exist", p.display()))
            }
        };
        match &self.dataset {
            DatasetSpec::File { path } => {
                must_exist(path, "dataset")?;
                if self.reference.source == ReferenceSource::Simulator {
                    return bad("a file dataset has no simulator; set reference.source to \"flow\"".into());
                }
            }
            DatasetSpec::Robot { n, params } => {
                params.validate()?;
                if *n == 0 {
                    return bad("dataset n must be at least 1".into());
                }
            }
            DatasetSpec::Synthetic { n, .. } => {
                if *n == 0 {
                    return bad("dataset n must be at least 1".into());
                }
            }
        }
        match &self.flow {
            FlowSpec::Checkpoint(p) => must_exist(p, "checkpoint")?,
            FlowSpec::Train(t) => t.validate()?,
        }
        for r in &self.failure_regions {
            if let RegionSpec::Points(p) = r {
                must_exist(p, "failure point file")?;
            }
        }
        Ok(())
    }
}

impl DatasetSpec {
    /// Generates or loads the dataset.
    pub fn build(&self, seed: u64) -> Result<OutcomeDataset> {
        match self {
            DatasetSpec::Robot { n, params } => generate_robot_dataset(*n, params, seed),
            DatasetSpec::Synthetic { target, n } => synthetic_target(target.name(), *n, seed),
            DatasetSpec::File { path } => OutcomeDataset::load(path),
        }
    }

    /// Fresh draws from the dataset's generator for the reference pool.
    pub fn build_pool(&self, n: usize, seed: u64) -> Result<RowMatrix> {
        match self {
            DatasetSpec::Robot { params, .. } => Ok(generate_robot_dataset(n, params, seed)?.outcomes),
            DatasetSpec::Synthetic { target, .. } => Ok(synthetic_target(target.name(), n, seed)?.outcomes),
            DatasetSpec::File { .. } => Err(Error::InvalidConfig(
                "a file dataset has no simulator for the reference pool".into(),
            )),
        }
    }
}

impl RegionSpec {
    /// The point set `X_i`; `dataset` supplies the points of a dataset box.
    pub fn points(&self, dataset: &RowMatrix) -> Result<RowMatrix> {
        match self {
            RegionSpec::Box { lo, hi } => box_corners(lo, hi),
            RegionSpec::DatasetBox { lo, hi } => {
                let b = BoxBounds {
                    lo: lo.clone(),
                    hi: hi.clone(),
                };
                if lo.len() != dataset.cols() || hi.len() != dataset.cols() {
                    return Err(Error::DimensionMismatch {
                        expected: dataset.cols(),
                        got: lo.len().max(hi.len()),
                    });
                }
                let idx: Vec<usize> = (0..dataset.rows()).filter(|&i| b.contains(dataset.row(i))).collect();
                Ok(dataset.select_rows(&idx))
            }
            RegionSpec::Points(p) => read_points_csv(p),
        }
    }
}

/// The two unit failure cubes of the robot experiment.
pub fn robot_failure_boxes() -> Vec<BoxBounds> {
    vec![
        BoxBounds {
            lo: vec![-2.0, -3.25, 1.25],
            hi: vec![-1.0, -2.25, 2.25],
        },
        BoxBounds {
            lo: vec![0.75, -4.25, -2.0],
            hi: vec![1.75, -3.25, -1.0],
        },
    ]
}

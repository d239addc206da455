mod ellipsoid;
mod mvee;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use ellipsoid::{ellipsoid_moments, Ellipsoid, EllipsoidJson};
pub use mvee::{mvee, DEFAULT_TOL};

use crate::error::{Error, Result};
use crate::stats::RowMatrix;

/// Which space a set of regions is expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    Latent,
    Target,
}

/// Non-empty collection of same-dimension ellipsoids; failure is membership
/// in any of them.
#[derive(Debug, Clone, PartialEq)]
pub struct FailureRegionSet {
    regions: Vec<Ellipsoid>,
    space: Space,
}

impl FailureRegionSet {
    pub fn new(regions: Vec<Ellipsoid>, space: Space) -> Result<Self> {
        let first = regions.first().ok_or(Error::EmptyRegionSet)?;
        let dim = first.dim();
        if let Some(bad) = regions.iter().find(|e| e.dim() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: bad.dim(),
            });
        }
        Ok(Self { regions, space })
    }

    /// One minimum-volume ellipsoid per point set.
    pub fn fit(point_sets: &[RowMatrix], space: Space, tol: f64) -> Result<Self> {
        let regions = point_sets.iter().map(|p| mvee(p, tol)).collect::<Result<Vec<_>>>()?;
        Self::new(regions, space)
    }

    pub fn regions(&self) -> &[Ellipsoid] {
        &self.regions
    }

    pub fn space(&self) -> Space {
        self.space
    }

    pub fn dim(&self) -> usize {
        self.regions[0].dim()
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    /// `min_i (d_M(u; mu_i, Sigma_i) - 1)`; non-positive exactly on the union.
    pub fn cost(&self, u: &[f64]) -> f64 {
        self.regions
            .iter()
            .map(|e| e.mahalanobis(u) - 1.0)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn to_json(&self) -> RegionSetJson {
        RegionSetJson {
            space: self.space,
            regions: self.regions.iter().map(Ellipsoid::to_json).collect(),
        }
    }

    pub fn from_json(j: &RegionSetJson) -> Result<Self> {
        let regions = j.regions.iter().map(Ellipsoid::from_json).collect::<Result<Vec<_>>>()?;
        Self::new(regions, j.space)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSetJson {
    pub space: Space,
    pub regions: Vec<EllipsoidJson>,
}

/// Checked form of [`FailureRegionSet::cost`].
pub fn cost(u: &[f64], regions: &FailureRegionSet) -> Result<f64> {
    if u.len() != regions.dim() {
        return Err(Error::DimensionMismatch {
            expected: regions.dim(),
            got: u.len(),
        });
    }
    if u.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("cost input"));
    }
    Ok(regions.cost(u))
}

/// The `2^n` corners of an axis-aligned box. Bounds may be given in either
/// order per dimension.
pub fn box_corners(lo: &[f64], hi: &[f64]) -> Result<RowMatrix> {
    let n = lo.len();
    if hi.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: hi.len(),
        });
    }
    if n == 0 || n > 20 {
        return Err(Error::InvalidConfig(format!("box dimension {n} out of range 1..=20")));
    }
    if lo.iter().chain(hi).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("box bounds"));
    }
    let mut out = RowMatrix::zeros(1 << n, n);
    for c in 0..(1usize << n) {
        let row = out.row_mut(c);
        for d in 0..n {
            let (a, b) = (lo[d].min(hi[d]), lo[d].max(hi[d]));
            row[d] = if c >> d & 1 == 0 { a } else { b };
        }
    }
    Ok(out)
}

/// Reads one point per CSV row. A header row is skipped when its first field
/// does not parse as a number.
pub fn read_points_csv(path: &Path) -> Result<RowMatrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let parsed: std::result::Result<Vec<f64>, _> = record.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(v) => rows.push(v),
            Err(_) if i == 0 => continue,
            Err(e) => {
                return Err(Error::InvalidConfig(format!(
                    "{}: row {}: {e}",
                    path.display(),
                    i + 1
                )))
            }
        }
    }
    RowMatrix::from_rows(&rows)
}

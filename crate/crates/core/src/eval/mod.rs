//! Downstream probes and interpretation: ridge and multinomial logistic
//! probes, grouped permutation importance, partial dependence over
//! coordinate lists, and region holdouts.

mod holdout;
mod interpret;
mod probes;

pub use holdout::{emit_plot_data, plot_data_to_string, read_plot_data, region_holdout_split, HoldoutSplit, PlotTable, Region};
pub use interpret::{
    partial_dependence, permutation_importance, permutation_importance_with, ImportanceReport,
    PdTable,
};
pub use probes::{
    logistic_fit, logistic_fit_with, mse, ridge_fit, LogisticModel, LogisticOptions, ProbeModel,
    RidgeModel,
};

use std::collections::BTreeMap;

use thiserror::Error;

use crate::dataio::LocationRecord;
use crate::encoders::{EncoderError, SpatialEmbeddingModel};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{0}")]
    Shape(String),
    #[error("feature matrix contains a non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("unknown feature group {0:?}")]
    UnknownGroup(String),
    #[error("invalid feature group {name:?}: {reason}")]
    InvalidGroup { name: String, reason: String },
    #[error("normal equations are singular; use a positive regularisation strength")]
    Singular,
    #[error("need at least two classes, found {0}")]
    SingleClass(usize),
    #[error("the location group holds {width} columns; an embedder is required to map coordinates to them")]
    MissingEmbedder { width: usize },
    #[error("invalid region: {0}")]
    InvalidRegion(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("plot data: {0}")]
    PlotData(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

/// Row-major `N x Q` matrix with column names and named column groups.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    names: Vec<String>,
    groups: BTreeMap<String, Vec<usize>>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, names: Vec<String>, data: Vec<f64>) -> Result<Self, EvalError> {
        let cols = names.len();
        if data.len() != rows * cols {
            return Err(EvalError::Shape(format!(
                "{} values for a {rows} x {cols} matrix",
                data.len()
            )));
        }
        if let Some(k) = data.iter().position(|v| !v.is_finite()) {
            return Err(EvalError::NonFinite {
                row: k / cols.max(1),
                col: k % cols.max(1),
            });
        }
        Ok(Self {
            rows,
            cols,
            data,
            names,
            groups: BTreeMap::new(),
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], names: Vec<String>) -> Result<Self, EvalError> {
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != names.len()) {
            return Err(EvalError::Shape(format!(
                "row {i} has {} values, expected {}",
                r.len(),
                names.len()
            )));
        }
        Self::new(rows.len(), names, rows.concat())
    }

    /// Adds a named group. Groups may not overlap.
    pub fn with_group(mut self, name: &str, cols: Vec<usize>) -> Result<Self, EvalError> {
        let fail = |reason: String| EvalError::InvalidGroup {
            name: name.to_string(),
            reason,
        };
        if cols.is_empty() {
            return Err(fail("no columns".into()));
        }
        if let Some(&c) = cols.iter().find(|&&c| c >= self.cols) {
            return Err(fail(format!("column {c} out of range")));
        }
        let mut sorted = cols.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != cols.len() {
            return Err(fail("repeated column".into()));
        }
        for (other, oc) in &self.groups {
            if other == name {
                return Err(fail("already defined".into()));
            }
            if oc.iter().any(|c| cols.contains(c)) {
                return Err(fail(format!("overlaps group {other:?}")));
            }
        }
        self.groups.insert(name.to_string(), cols);
        Ok(self)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn group(&self, name: &str) -> Result<&[usize], EvalError> {
        self.groups
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| EvalError::UnknownGroup(name.to_string()))
    }

    pub fn groups(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.groups
    }

    /// Rows `idx`, keeping names and groups.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
            names: self.names.clone(),
            groups: self.groups.clone(),
        }
    }

    /// Appends the columns of `other` (same row count); its groups come
    /// along with shifted indices.
    pub fn hstack(&self, other: &FeatureMatrix) -> Result<Self, EvalError> {
        if self.rows != other.rows {
            return Err(EvalError::Shape(format!(
                "row counts differ: {} vs {}",
                self.rows, other.rows
            )));
        }
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for i in 0..self.rows {
            data.extend_from_slice(self.row(i));
            data.extend_from_slice(other.row(i));
        }
        let mut names = self.names.clone();
        names.extend(other.names.iter().cloned());
        let mut out = Self {
            rows: self.rows,
            cols,
            data,
            names,
            groups: self.groups.clone(),
        };
        for (name, oc) in &other.groups {
            out = out.with_group(name, oc.iter().map(|c| c + self.cols).collect())?;
        }
        Ok(out)
    }
}

/// Anything that maps a feature row to a prediction.
pub trait Regressor {
    fn predict_row(&self, x: &[f64]) -> f64;

    fn predict(&self, x: &FeatureMatrix) -> Vec<f64> {
        (0..x.rows()).map(|i| self.predict_row(x.row(i))).collect()
    }
}

impl<F: Fn(&[f64]) -> f64> Regressor for F {
    fn predict_row(&self, x: &[f64]) -> f64 {
        self(x)
    }
}

/// Name of the group holding location features in the helpers below.
pub const LOCATION_GROUP: &str = "location";

/// `lon, lat` columns grouped as [`LOCATION_GROUP`].
pub fn raw_location_features(records: &[LocationRecord]) -> Result<FeatureMatrix, EvalError> {
    let data = records
        .iter()
        .flat_map(|r| [r.coordinate.lon(), r.coordinate.lat()])
        .collect();
    FeatureMatrix::new(records.len(), vec!["lon".into(), "lat".into()], data)?
        .with_group(LOCATION_GROUP, vec![0, 1])
}

/// `e_1..e_d` location embeddings grouped as [`LOCATION_GROUP`].
pub fn embedding_features(
    model: &SpatialEmbeddingModel,
    records: &[LocationRecord],
) -> Result<FeatureMatrix, EvalError> {
    let d = model.embed_dim();
    let coords: Vec<_> = records.iter().map(|r| r.coordinate).collect();
    let data = if coords.is_empty() {
        Vec::new()
    } else {
        model.location_encode_batch(&coords)?.into_data()
    };
    let names = (1..=d).map(|i| format!("e_{i}")).collect();
    FeatureMatrix::new(records.len(), names, data)?.with_group(LOCATION_GROUP, (0..d).collect())
}

/// Values of label `name` for each record.
pub fn labels(records: &[LocationRecord], name: &str) -> Result<Vec<f64>, EvalError> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            r.label(name)
                .ok_or_else(|| EvalError::Shape(format!("record {i} has no label {name:?}")))
        })
        .collect()
}

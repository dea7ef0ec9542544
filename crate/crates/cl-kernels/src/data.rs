//! Task datasets: inputs, labels, and generation provenance.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One task's examples. Rows of `x` are inputs, `y` holds scalar labels.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub task_id: String,
    pub split: Split,
    /// Generation parameters and seed, carried into output manifests.
    pub provenance: String,
}

impl Dataset {
    pub fn new(
        x: DMatrix<f64>,
        y: DVector<f64>,
        task_id: impl Into<String>,
        split: Split,
    ) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::DimensionMismatch {
                what: "dataset rows vs labels",
                left: x.nrows(),
                right: y.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) || y.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("dataset contains non-finite values".into()));
        }
        Ok(Self {
            x,
            y,
            task_id: task_id.into(),
            split,
            provenance: String::new(),
        })
    }

    pub fn with_provenance(mut self, provenance: impl Into<String>) -> Self {
        self.provenance = provenance.into();
        self
    }

    /// Number of examples.
    pub fn p(&self) -> usize {
        self.x.nrows()
    }

    /// Input dimension.
    pub fn n0(&self) -> usize {
        self.x.ncols()
    }
}

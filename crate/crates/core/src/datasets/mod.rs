//! Dataset containers, synthetic generators with known ground truth, and the
//! on-disk formats (CSV, sequence text, corpus text, model JSON).

mod io;
mod synth;

pub use io::*;
pub use synth::*;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;

/// Continuous observations: one row per data point, with column names.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub names: Vec<String>,
    pub values: Mat,
}

impl Dataset {
    /// Wraps a matrix with default column names `x0, x1, ...`.
    pub fn from_mat(values: Mat) -> Self {
        let names = (0..values.cols()).map(|j| format!("x{j}")).collect();
        Self { names, values }
    }

    pub fn with_names(names: Vec<String>, values: Mat) -> Result<Self> {
        if names.len() != values.cols() {
            return Err(Error::Shape(format!("{} names for {} columns", names.len(), values.cols())));
        }
        Ok(Self { names, values })
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }

    /// Interprets every entry as a category code; `n_categories` is inferred as
    /// `max + 1` per column unless given.
    pub fn to_categorical(&self, n_categories: Option<Vec<usize>>) -> Result<CategoricalData> {
        let mut codes = Vec::with_capacity(self.len());
        for (i, row) in self.values.row_iter().enumerate() {
            let r: Result<Vec<usize>> = row
                .iter()
                .enumerate()
                .map(|(j, &v)| {
                    if v >= 0.0 && v.fract() == 0.0 && v < u32::MAX as f64 {
                        Ok(v as usize)
                    } else {
                        Err(Error::InvalidData(format!("row {i}, item {j}: {v} is not a category code")))
                    }
                })
                .collect();
            codes.push(r?);
        }
        let n_categories = match n_categories {
            Some(c) => c,
            None => (0..self.values.cols())
                .map(|j| codes.iter().map(|r| r[j] + 1).max().unwrap_or(1))
                .collect(),
        };
        CategoricalData::new(codes, n_categories)
    }
}

/// Categorical observations: `codes[i][j]` is row `i`'s category for item `j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoricalData {
    pub codes: Vec<Vec<usize>>,
    pub n_categories: Vec<usize>,
}

impl CategoricalData {
    pub fn new(codes: Vec<Vec<usize>>, n_categories: Vec<usize>) -> Result<Self> {
        let data = Self { codes, n_categories };
        data.validate()?;
        Ok(data)
    }

    /// Checks every code against its item's declared category count.
    pub fn validate(&self) -> Result<()> {
        let j = self.n_categories.len();
        if self.n_categories.iter().any(|&c| c == 0) {
            return Err(Error::InvalidData("every item needs at least one category".into()));
        }
        for (i, row) in self.codes.iter().enumerate() {
            if row.len() != j {
                return Err(Error::Shape(format!("row {i} has {} items, expected {j}", row.len())));
            }
            for (item, (&c, &n)) in row.iter().zip(&self.n_categories).enumerate() {
                if c >= n {
                    return Err(Error::InvalidData(format!(
                        "row {i}, item {item}: category {c} out of range 0..{n}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn n_items(&self) -> usize {
        self.n_categories.len()
    }

    pub fn to_mat(&self) -> Mat {
        Mat::from_fn(self.len(), self.n_items(), |i, j| self.codes[i][j] as f64)
    }
}

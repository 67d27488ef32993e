use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[default]
    Regression,
    Binary,
}

/// Feature matrix (n × p) with named columns and a response vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub feature_names: Vec<String>,
    pub x: DMatrix<f64>,
    pub y: Vec<f64>,
    pub task: Task,
}

impl Dataset {
    pub fn new(
        feature_names: Vec<String>,
        x: DMatrix<f64>,
        y: Vec<f64>,
        task: Task,
    ) -> Result<Self> {
        if feature_names.len() != x.ncols() {
            return Err(Error::DimensionMismatch {
                expected: x.ncols(),
                got: feature_names.len(),
            });
        }
        if y.len() != x.nrows() {
            return Err(Error::DimensionMismatch {
                expected: x.nrows(),
                got: y.len(),
            });
        }
        Ok(Self {
            feature_names,
            x,
            y,
            task,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.x.ncols()
    }

    /// Rows `idx` as a new dataset, in the given order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let x = DMatrix::from_fn(idx.len(), self.n_features(), |r, c| self.x[(idx[r], c)]);
        let y = idx.iter().map(|&r| self.y[r]).collect();
        Dataset {
            feature_names: self.feature_names.clone(),
            x,
            y,
            task: self.task,
        }
    }
}

/// Default column names `x1..xp`.
pub fn default_names(p: usize) -> Vec<String> {
    (1..=p).map(|j| format!("x{j}")).collect()
}

/// Row-major copy of a matrix.
pub fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let (n, p) = m.shape();
    let mut out = Vec::with_capacity(n * p);
    for r in 0..n {
        for c in 0..p {
            out.push(m[(r, c)]);
        }
    }
    out
}

/// Unordered pair of augmented column indices, 0-based, `i < j`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pair {
    pub i: usize,
    pub j: usize,
}

impl Pair {
    pub fn new(a: usize, b: usize) -> Self {
        if a <= b {
            Pair { i: a, j: b }
        } else {
            Pair { i: b, j: a }
        }
    }

    /// True for the (feature, own knockoff) pairs excluded from Γ.
    pub fn is_self_pair(&self, p: usize) -> bool {
        self.j == self.i + p
    }

    pub fn category(&self, p: usize) -> Category {
        Category::of(self.i, self.j, p)
    }
}

/// Pair class by how many members are knockoff columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Category {
    /// both original
    OO,
    /// exactly one knockoff
    OK,
    /// both knockoffs
    KK,
}

impl Category {
    pub fn of(i: usize, j: usize, p: usize) -> Self {
        match ((i >= p) as u8) + ((j >= p) as u8) {
            0 => Category::OO,
            1 => Category::OK,
            _ => Category::KK,
        }
    }

    pub fn is_knockoff_involving(self) -> bool {
        self != Category::OO
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Category::OO => "OO",
            Category::OK => "OK",
            Category::KK => "KK",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "OO" => Ok(Category::OO),
            "OK" => Ok(Category::OK),
            "KK" => Ok(Category::KK),
            other => Err(Error::Parse(format!("unknown category {other:?}"))),
        }
    }
}

//! The ten synthetic regression functions used as the verification suite,
//! their ground-truth interaction pairs, and seeded dataset generation.
//!
//! Features are i.i.d. U(0,1); only features 1..10 enter the response, the
//! rest are noise. Feature indices in this module are 1-based to match the
//! formulas, everywhere else in the crate they are 0-based.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{default_names, Dataset, Task};
use crate::error::{Error, Result};
use crate::rng::{self, stage};

pub const N_FUNCTIONS: u8 = 10;
/// Number of leading features read by every simulation function.
pub const ACTIVE_FEATURES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimulationSpec {
    pub function_id: u8,
    pub n_samples: usize,
    pub n_features: usize,
    pub seed: u64,
}

impl SimulationSpec {
    pub fn validate(&self) -> Result<()> {
        check_id(self.function_id)?;
        if self.n_samples == 0 {
            return Err(Error::InvalidArgument("n_samples must be positive".into()));
        }
        if self.n_features < ACTIVE_FEATURES {
            return Err(Error::InvalidArgument(format!(
                "n_features must be at least {ACTIVE_FEATURES}, got {}",
                self.n_features
            )));
        }
        Ok(())
    }
}

/// Ground-truth interacting pairs, 1-based, `i < j`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub pairs: BTreeSet<(usize, usize)>,
}

impl GroundTruth {
    pub fn contains(&self, i: usize, j: usize) -> bool {
        let key = if i < j { (i, j) } else { (j, i) };
        self.pairs.contains(&key)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn to_json(&self) -> serde_json::Value {
        let pairs: Vec<[usize; 2]> = self.pairs.iter().map(|&(i, j)| [i, j]).collect();
        serde_json::json!({ "pairs": pairs })
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        #[derive(Deserialize)]
        struct Raw {
            pairs: Vec<[usize; 2]>,
        }
        let raw: Raw = serde_json::from_value(value.clone())?;
        let mut pairs = BTreeSet::new();
        for [a, b] in raw.pairs {
            if a == b || a == 0 || b == 0 {
                return Err(Error::Parse(format!("invalid truth pair ({a}, {b})")));
            }
            pairs.insert((a.min(b), a.max(b)));
        }
        Ok(Self { pairs })
    }
}

fn check_id(function_id: u8) -> Result<()> {
    if (1..=N_FUNCTIONS).contains(&function_id) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "function id must be in 1..=10, got {function_id}"
        )))
    }
}

/// Non-additive variable groups of each function; every 2-subset of a group
/// is a true interaction. Additive terms are absent.
fn interaction_groups(function_id: u8) -> &'static [&'static [usize]] {
    match function_id {
        // π^{x1x2}√(2x3), log(x3+x5), x9/x10·√(x7/x8), x2x7
        1 | 2 => &[&[1, 2, 3], &[3, 5], &[7, 8, 9, 10], &[2, 7]],
        // exp|x1−x2|, |x2x3|, x3^{2|x4|}, log(x4²+x5²+x7²+x8²)
        3 => &[&[1, 2], &[2, 3], &[3, 4], &[4, 5, 7, 8]],
        // F3 plus (x1x4)²
        4 => &[&[1, 2], &[2, 3], &[3, 4], &[1, 4], &[4, 5, 7, 8]],
        // 1/(1+x1²+x2²+x3²), √exp(x4+x5), |x6+x7|, x8x9x10
        5 => &[&[1, 2, 3], &[4, 5], &[6, 7], &[8, 9, 10]],
        // exp(|x1x2|+1), exp(|x3+x4|+1), cos(x5+x6−x8), √(x8²+x9²+x10²)
        6 => &[&[1, 2], &[3, 4], &[5, 6, 8], &[8, 9, 10]],
        // (atan x1 + atan x2)², max(x3x4+x6, 0), 1/(1+(x4x5x6x7x8)²), (|x7|/(1+|x9|))⁵
        7 => &[&[1, 2], &[3, 4, 6], &[4, 5, 6, 7, 8], &[7, 9]],
        // x1x2, 2^{x3+x5+x6}, 2^{x3+x4+x5+x7}, sin(x7 sin(x8+x9))
        8 => &[&[1, 2], &[3, 5, 6], &[3, 4, 5, 7], &[7, 8, 9]],
        // tanh(x1x2+x3x4)√|x5|, exp(x5+x6), log((x6x7x8)²+1), x9x10
        9 => &[&[1, 2, 3, 4, 5], &[5, 6], &[6, 7, 8], &[9, 10]],
        // sinh(x1+x2), arccos(tanh(x3+x5+x7)), cos(x4+x5), sec(x7x9)
        10 => &[&[1, 2], &[3, 5, 7], &[4, 5], &[7, 9]],
        _ => &[],
    }
}

pub fn ground_truth_pairs(function_id: u8) -> Result<GroundTruth> {
    check_id(function_id)?;
    let mut pairs = BTreeSet::new();
    for group in interaction_groups(function_id) {
        for (a, &i) in group.iter().enumerate() {
            for &j in &group[a + 1..] {
                pairs.insert((i.min(j), i.max(j)));
            }
        }
    }
    Ok(GroundTruth { pairs })
}

struct Guard {
    id: u8,
}

impl Guard {
    fn err(&self, what: impl Into<String>) -> Error {
        Error::Domain {
            function_id: self.id,
            what: what.into(),
        }
    }

    fn sqrt(&self, v: f64) -> Result<f64> {
        if v >= 0.0 {
            Ok(v.sqrt())
        } else {
            Err(self.err(format!("sqrt of negative {v}")))
        }
    }

    fn ln(&self, v: f64) -> Result<f64> {
        if v > 0.0 {
            Ok(v.ln())
        } else {
            Err(self.err(format!("log of nonpositive {v}")))
        }
    }

    fn div(&self, num: f64, den: f64) -> Result<f64> {
        if den != 0.0 {
            Ok(num / den)
        } else {
            Err(self.err("division by zero"))
        }
    }

    fn asin(&self, v: f64) -> Result<f64> {
        if (-1.0..=1.0).contains(&v) {
            Ok(v.asin())
        } else {
            Err(self.err(format!("asin of {v}")))
        }
    }

    fn acos(&self, v: f64) -> Result<f64> {
        if (-1.0..=1.0).contains(&v) {
            Ok(v.acos())
        } else {
            Err(self.err(format!("acos of {v}")))
        }
    }

    fn pow(&self, base: f64, exp: f64) -> Result<f64> {
        if base < 0.0 && exp.fract() != 0.0 {
            return Err(self.err(format!("negative base {base} with fractional exponent")));
        }
        Ok(base.powf(exp))
    }

    fn sec(&self, v: f64) -> Result<f64> {
        let c = v.cos();
        if c != 0.0 {
            Ok(1.0 / c)
        } else {
            Err(self.err("sec at a pole"))
        }
    }
}

/// Evaluates simulation function `function_id` at `x` (0-based slice, so
/// `x[0]` is x1). Out-of-domain subexpressions return [`Error::Domain`].
pub fn eval_function(function_id: u8, x: &[f64]) -> Result<f64> {
    check_id(function_id)?;
    if x.len() < ACTIVE_FEATURES {
        return Err(Error::DimensionMismatch {
            expected: ACTIVE_FEATURES,
            got: x.len(),
        });
    }
    let g = Guard { id: function_id };
    let [x1, x2, x3, x4, x5, x6, x7, x8, x9, x10] =
        [x[0], x[1], x[2], x[3], x[4], x[5], x[6], x[7], x[8], x[9]];
    let value = match function_id {
        1 => {
            PI.powf(x1 * x2) * g.sqrt(2.0 * x3)? - g.asin(x4)? + g.ln(x3 + x5)?
                - g.div(x9, x10)? * g.sqrt(g.div(x7, x8)?)?
                - x2 * x7
        }
        2 => {
            PI.powf(x1 * x2) * (2.0 * x3.abs()).sqrt() - g.asin(0.5 * x4)?
                + ((x3 + x5).abs() + 1.0).ln()
                - x9 / (1.0 + x10.abs()) * g.sqrt(x7 / (1.0 + x8.abs()))?
                - x2 * x7
        }
        3 | 4 => {
            let mut v = (x1 - x2).abs().exp() + (x2 * x3).abs() - g.pow(x3, 2.0 * x4.abs())?
                + g.ln(x4 * x4 + x5 * x5 + x7 * x7 + x8 * x8)?
                + x9
                + 1.0 / (1.0 + x10 * x10);
            if function_id == 4 {
                v += (x1 * x4).powi(2);
            }
            v
        }
        5 => {
            1.0 / (1.0 + x1 * x1 + x2 * x2 + x3 * x3)
                + (x4 + x5).exp().sqrt()
                + (x6 + x7).abs()
                + x8 * x9 * x10
        }
        6 => {
            ((x1 * x2).abs() + 1.0).exp() - ((x3 + x4).abs() + 1.0).exp()
                + (x5 + x6 - x8).cos()
                + (x8 * x8 + x9 * x9 + x10 * x10).sqrt()
        }
        7 => {
            (x1.atan() + x2.atan()).powi(2) + (x3 * x4 + x6).max(0.0)
                - 1.0 / (1.0 + (x4 * x5 * x6 * x7 * x8).powi(2))
                + (x7.abs() / (1.0 + x9.abs())).powi(5)
                + x[..ACTIVE_FEATURES].iter().sum::<f64>()
        }
        8 => {
            x1 * x2
                + 2f64.powf(x3 + x5 + x6)
                + 2f64.powf(x3 + x4 + x5 + x7)
                + (x7 * (x8 + x9).sin()).sin()
                + g.acos(0.9 * x10)?
        }
        9 => {
            (x1 * x2 + x3 * x4).tanh() * x5.abs().sqrt()
                + (x5 + x6).exp()
                + ((x6 * x7 * x8).powi(2) + 1.0).ln()
                + x9 * x10
                + 1.0 / (1.0 + x10.abs())
        }
        10 => {
            (x1 + x2).sinh() + g.acos((x3 + x5 + x7).tanh())? + (x4 + x5).cos() + g.sec(x7 * x9)?
        }
        _ => unreachable!(),
    };
    if value.is_finite() {
        Ok(value)
    } else {
        Err(g.err(format!("non-finite result {value}")))
    }
}

/// Draws the feature matrix and evaluates the response row by row.
///
/// Column `j` (0-based) is filled from stream `(seed, SIMULATION, j)` with
/// 53-bit uniform doubles in [0,1).
pub fn generate_dataset(spec: &SimulationSpec) -> Result<(Dataset, GroundTruth)> {
    spec.validate()?;
    let (n, p) = (spec.n_samples, spec.n_features);
    let mut x = DMatrix::<f64>::zeros(n, p);
    for c in 0..p {
        let mut rng = rng::stream(spec.seed, stage::SIMULATION, c as u32);
        for r in 0..n {
            x[(r, c)] = rng.random::<f64>();
        }
    }
    let mut y = Vec::with_capacity(n);
    let mut row = vec![0.0; p];
    for r in 0..n {
        for c in 0..p {
            row[c] = x[(r, c)];
        }
        y.push(eval_function(spec.function_id, &row)?);
    }
    let data = Dataset::new(default_names(p), x, y, Task::Regression)?;
    Ok((data, ground_truth_pairs(spec.function_id)?))
}

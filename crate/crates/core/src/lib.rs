//! Discovery of non-additive pairwise feature interactions with false
//! discovery rate control via model-X knockoffs.
//!
//! The pipeline runs in stages, each in its own module:
//!
//! * [`sim`] generates the synthetic benchmark datasets with known interactions,
//! * [`knockoffs`] builds second-order Gaussian (or permutation) knockoffs,
//! * [`mlp`] trains the pairwise-coupling multilayer perceptron and exposes
//!   exact input gradients and Hessians,
//! * [`attribution`] computes univariate and pairwise importance over the
//!   augmented columns,
//! * [`distill`] strips additive marginal effects from pairwise importance,
//! * [`fdr`] applies the interaction knockoff filter,
//! * [`baselines`] holds the permutation / feature-wise comparison procedures,
//! * [`harness`] wires everything into seeded, persisted experiment runs.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
pub mod attribution;
pub mod baselines;
pub mod data;
pub mod distill;
pub mod error;
pub mod fdr;
pub mod harness;
pub mod io;
pub mod knockoffs;
pub mod linalg;
pub mod mlp;
pub mod rng;
pub mod sim;
pub mod spline;

pub use attribution::{AttributionResult, Differentiable, Measure};
pub use data::{Category, Dataset, Pair, Task};
pub use error::{Error, Result};
pub use fdr::{InteractionScoreSet, ScoreEntry, SelectionResult};
pub use knockoffs::{AugmentedDataset, KnockoffModel};
pub use mlp::{CouplingMlp, TrainConfig};
pub use sim::{GroundTruth, SimulationSpec};

//! Convex group-lasso training of parallel three-layer ReLU networks.
//!
//! The non-convex weight-decay problem over `sum_k relu(relu(X W1k) w2k) w3k`
//! is lifted to a group lasso over activation-pattern blocks with linear cone
//! constraints. [`solver::solve`] minimises it, [`solver::certify`] bounds
//! the optimum from below, and [`network::reconstruct`] maps the solution
//! back to network weights.

pub mod arrangements;
pub mod convex_model;
pub mod dataio;
pub mod error;
pub mod linalg;
pub mod network;
pub mod solver;

pub use arrangements::{ArrangementPlan, MaskVector, PlanMode};
pub use convex_model::{ConvexModel, ConvexPoint, FeasibilityReport, GroupId, Side, Sign};
pub use dataio::Dataset;
pub use error::{Error, Result};
pub use network::{NetworkParams, Subnet};
pub use solver::{certify, solve, Certificate, ConvexSolution, SolveConfig};

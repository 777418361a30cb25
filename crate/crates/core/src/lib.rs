//! Transfer risk minimization (TRM) and its baselines on synthetic
//! multi-environment classification problems.

pub mod autodiff;
pub mod logistic;
pub mod envgen;
pub mod inner;
pub mod model;
pub mod objectives;
pub mod trainer;
pub mod analysis;

//! Training-free sampling from Gaussian mixtures by integrating the exact
//! probability-flow ODE, plus tools to measure and bound its discretization error.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
pub mod experiments;
pub mod flow;
pub mod gmm;
pub mod labels;
pub mod linalg;
pub mod mlp;
pub mod parallel;

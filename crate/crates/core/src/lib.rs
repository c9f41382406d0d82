//! Physics-informed neural networks and deep operator networks for ordinary
//! and partial differential equations on rectangular domains.

pub mod algebra;
pub mod autodiff;
pub mod eqparser;
pub mod geometry;
pub mod jet;
pub mod models;
pub mod solvers;
pub mod training;

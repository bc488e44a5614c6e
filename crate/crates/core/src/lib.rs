//! Binned-likelihood fitting through straight-line programs.
//!
//! A statistical model is described as a [`graph::ModelGraph`] of typed
//! nodes. [`squash::squash`] flattens it into a single-assignment
//! [`ir::Program`], [`ad::reverse_grad`] turns that program into one that
//! also computes the full gradient, and [`minimize::minimize`] runs BFGS
//! with either that gradient or the central-difference baseline from
//! [`numdiff`]. [`histfactory`] builds the template model used throughout,
//! and [`cli`] wires everything into the `squashfit` command.

pub mod ad;
pub mod cli;
pub mod graph;
pub mod histfactory;
pub mod ir;
pub mod minimize;
pub mod numdiff;
pub mod squash;

pub use ad::{forward_derivative, reverse_grad, GradientProgram};
pub use graph::{ModelGraph, NodeId, NodeKind, Shape, Value};
pub use histfactory::{Dataset, HistFactorySpec, ParamLayout};
pub use ir::{Op, Operand, Program, Statement};
pub use minimize::{minimize, FitResult, MinimizeOptions};
pub use numdiff::{central_diff_gradient, StepRule};
pub use squash::squash;

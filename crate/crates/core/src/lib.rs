//! Multi-stage interaction sequence (MSIS) networks for credit decisions.
//!
//! Three business stages are modelled jointly: credit granting (AR),
//! withdrawal (WS) and repayment (GB). Each stage has one tower per target
//! above a shared bottom; an information corridor passes attention-weighted
//! stage summaries from one stage to the next, and unlabeled rows (rejected
//! or silent applicants) contribute an entropy penalty.
//!
//! The crate also ships a synthetic loan-funnel simulator that keeps the
//! counterfactual outcomes of every applicant, so models can be scored on the
//! whole through-the-door population.

pub mod baselines;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod loss;
pub mod model;
pub mod numerics;
pub mod sim;
pub mod task;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::Scalar;
pub use task::{Stage, Target};

pub type Tensor = numerics::Tensor2D<f64>;
pub type Tape = numerics::Graph<f64>;
pub type Params = numerics::ParamStore<f64>;

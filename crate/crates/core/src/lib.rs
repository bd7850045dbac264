//! Simulation and amortized posterior inference for growing network models.
//!
//! * [`graph`]: undirected graphs, neighborhoods and the JSON-lines format.
//! * [`models`]: the nine growth models, their priors and simulators.
//! * [`oracles`]: closed-form and brute-force reference posteriors.
//! * [`autodiff`]: the reverse-mode engine used to train the estimator.
//! * [`nde`]: graph isomorphism layers, pooling and the beta posterior head.
//! * [`training`]: prior-predictive datasets and the optimization loop.
//! * [`evaluation`]: variational mutual information, bootstrap intervals, depth sweeps.
//! * [`cli`]: the `netgrow` command line.

pub mod autodiff;
pub mod cli;
pub mod error;
pub mod evaluation;
pub mod graph;
pub mod models;
pub mod nde;
pub mod oracles;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
pub use graph::{Graph, NodeSet};

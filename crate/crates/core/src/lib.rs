//! Evolutionary architecture search over message-passing GNNs trained with a
//! Gaussian likelihood, deep-ensemble uncertainty decomposition, and a suite
//! of uncertainty-quantification metrics for molecular property regression.

pub mod archspace;
pub mod diffcore;
pub mod evolver;
pub mod molgraph;
pub mod mpnn;
pub mod pipeline;
pub mod rng;
pub mod trainer;
pub mod uq;

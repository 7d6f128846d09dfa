//! Energy-based GFlowNets over `{0,1}^D`: a sequential bit-painting sampler
//! trained with trajectory balance, jointly with an energy model trained by
//! approximate maximum likelihood using GFlowNet-guided MCMC proposals.
//!
//! The crate also carries exact dense-flow oracles for small dimensions so the
//! method's structural claims (flow conservation, maximal entropy of the
//! uniform backward policy, always-accept proposals under a perfectly fitted
//! sampler) can be checked against brute force.

pub mod checkpoint;
pub mod energy;
pub mod eval;
pub mod gradcheck;
pub mod nn;
pub mod oracle;
pub mod policy;
pub mod state;
pub mod tasks;
pub mod trainer;
pub mod util;

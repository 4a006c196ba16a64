//! Simulation-and-inference toolkit for discriminating two candidate
//! parameter values of a continuously weakly measured quantum system.
//!
//! The pipeline: integrate stochastic master equations to generate a
//! measurement record, run dual Bayesian likelihood filters on that shared
//! record, apply the Bayes likelihood-ratio criterion, and estimate the
//! average error probability by posterior averaging or by error counting.

pub mod cli;
pub mod inference;
pub mod montecarlo;
pub mod qmath;
pub mod trajectory;
pub mod validate;

pub use inference::{
    bayes_risk, bayes_threshold, conditional_error, decide, posteriors, CostMatrix, Decision,
    Hypothesis, HypothesisPair, PosteriorPair,
};
pub use qmath::{
    bloch_to_density, build_hamiltonian, density_to_bloch, dissipator, innovation, msuperop,
    pauli, Axis, BlochVector, DensityState, DissipatorOrdering, Operator,
};
pub use trajectory::{
    filter, simulate_record, step_normalized, step_unnormalized, trace_likelihood,
    DissipatorScaling, FilterPath, GaussianNoise, LoglikMode, MeasurementRecord, ModelSpec,
    NoiseSource, SimGrid, ZeroNoise,
};

//! Bayes-rule posterior updates, cost-matrix thresholds, likelihood-ratio
//! decisions, and Bayes-risk error quantities. All likelihood arithmetic is
//! done in log-space.

use thiserror::Error;

use crate::trajectory::ModelSpec;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("invalid cost matrix: requires c01 > c11 and c10 > c00 (got c00={c00}, c01={c01}, c10={c10}, c11={c11})")]
    InadmissibleCost {
        c00: f64,
        c01: f64,
        c10: f64,
        c11: f64,
    },
    #[error("priors ({0}, {1}) must be positive and sum to 1")]
    InvalidPriors(f64, f64),
    #[error("probability {0} outside [0, 1]")]
    ProbabilityOutOfRange(f64),
    #[error("non-finite log-likelihood")]
    NonFiniteLoglik,
}

/// Which hypothesis a decision accepts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Hypothesis {
    H0,
    H1,
}

impl std::fmt::Display for Hypothesis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Hypothesis::H0 => write!(f, "H0"),
            Hypothesis::H1 => write!(f, "H1"),
        }
    }
}

/// Decision costs c_ij = cost of accepting H_i when H_j is true.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CostMatrix {
    pub c00: f64,
    pub c01: f64,
    pub c10: f64,
    pub c11: f64,
}

impl CostMatrix {
    pub fn new(c00: f64, c01: f64, c10: f64, c11: f64) -> Result<Self, InferenceError> {
        if !(c01 > c11 && c10 > c00) {
            return Err(InferenceError::InadmissibleCost { c00, c01, c10, c11 });
        }
        Ok(Self { c00, c01, c10, c11 })
    }

    pub fn zero_one() -> Self {
        Self {
            c00: 0.0,
            c01: 1.0,
            c10: 1.0,
            c11: 0.0,
        }
    }
}

/// Two candidate models with prior probabilities and a cost matrix.
#[derive(Debug, Clone)]
pub struct HypothesisPair {
    pub model0: ModelSpec,
    pub model1: ModelSpec,
    prior0: f64,
    prior1: f64,
    pub cost: CostMatrix,
}

impl HypothesisPair {
    /// `prior1` is stored as `1 - prior0` so the pair sums to 1 exactly.
    pub fn new(
        model0: ModelSpec,
        model1: ModelSpec,
        prior0: f64,
        prior1: f64,
        cost: CostMatrix,
    ) -> Result<Self, InferenceError> {
        if !(prior0 > 0.0 && prior1 > 0.0 && (prior0 + prior1 - 1.0).abs() <= 1e-12) {
            return Err(InferenceError::InvalidPriors(prior0, prior1));
        }
        Ok(Self {
            model0,
            model1,
            prior0,
            prior1: 1.0 - prior0,
            cost,
        })
    }

    pub fn prior0(&self) -> f64 {
        self.prior0
    }

    pub fn prior1(&self) -> f64 {
        self.prior1
    }
}

/// Posterior probabilities of the two hypotheses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorPair {
    pub p0: f64,
    pub p1: f64,
}

/// A likelihood-ratio decision with its threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    pub accepted: Hypothesis,
    pub log_ratio: f64,
    pub log_threshold: f64,
}

/// Posteriors from log-likelihoods and priors, computed in log-space so
/// arbitrarily large |loglik| cannot overflow.
pub fn posteriors(loglik0: f64, loglik1: f64, pair: &HypothesisPair) -> PosteriorPair {
    let a0 = loglik0 + pair.prior0.ln();
    let a1 = loglik1 + pair.prior1.ln();
    let m = a0.max(a1);
    let e0 = (a0 - m).exp();
    let e1 = (a1 - m).exp();
    let z = e0 + e1;
    PosteriorPair {
        p0: e0 / z,
        p1: e1 / z,
    }
}

/// ln[ ((c01 - c11) / (c10 - c00)) * (prior1 / prior0) ]; zero for the
/// zero-one cost with equal priors.
pub fn bayes_threshold(pair: &HypothesisPair) -> f64 {
    let c = &pair.cost;
    (((c.c01 - c.c11) / (c.c10 - c.c00)) * (pair.prior1 / pair.prior0)).ln()
}

/// Likelihood-ratio test: accept H0 iff ln Lambda exceeds the Bayes
/// threshold; ties go to H1.
pub fn decide(loglik0: f64, loglik1: f64, pair: &HypothesisPair) -> Decision {
    let log_ratio = loglik0 - loglik1;
    let log_threshold = bayes_threshold(pair);
    let accepted = if log_ratio > log_threshold {
        Hypothesis::H0
    } else {
        Hypothesis::H1
    };
    Decision {
        accepted,
        log_ratio,
        log_threshold,
    }
}

/// Probability that the zero-one-cost Bayes decision is wrong given this
/// record: min(p0, p1).
pub fn conditional_error(post: &PosteriorPair) -> f64 {
    post.p0.min(post.p1)
}

/// Expected decision cost: sum_ij c_ij P(H_i|H_j) P(H_j), with
/// p_10 = P(accept H1 | H0 true) and p_01 = P(accept H0 | H1 true).
pub fn bayes_risk(pair: &HypothesisPair, p_10: f64, p_01: f64) -> Result<f64, InferenceError> {
    for p in [p_10, p_01] {
        if !(0.0..=1.0).contains(&p) {
            return Err(InferenceError::ProbabilityOutOfRange(p));
        }
    }
    let c = &pair.cost;
    let risk = c.c00 * (1.0 - p_10) * pair.prior0
        + c.c10 * p_10 * pair.prior0
        + c.c11 * (1.0 - p_01) * pair.prior1
        + c.c01 * p_01 * pair.prior1;
    Ok(risk)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qmath::{build_hamiltonian, pauli, Axis, DissipatorOrdering};
    use crate::trajectory::{DissipatorScaling, ModelSpec};
    use proptest::prelude::*;

    fn model(omega: f64) -> ModelSpec {
        ModelSpec::new(
            build_hamiltonian(omega, 1.43).unwrap(),
            pauli(Axis::Z),
            0.5,
            DissipatorScaling::EtaScaled,
            DissipatorOrdering::FFdag,
        )
        .unwrap()
    }

    fn pair(prior0: f64, cost: CostMatrix) -> HypothesisPair {
        HypothesisPair::new(model(1.0), model(2.0), prior0, 1.0 - prior0, cost).unwrap()
    }

    fn equal_pair() -> HypothesisPair {
        pair(0.5, CostMatrix::zero_one())
    }

    #[test]
    fn posteriors_symmetric_case() {
        let p = posteriors(3.7, 3.7, &equal_pair());
        assert_eq!(p.p0, 0.5);
        assert_eq!(p.p1, 0.5);
    }

    #[test]
    fn posteriors_ln3_gap() {
        let p = posteriors(3.0f64.ln(), 0.0, &equal_pair());
        assert!((p.p0 - 0.75).abs() < 1e-12);
        assert!((p.p1 - 0.25).abs() < 1e-12);
    }

    #[test]
    fn posteriors_saturate_without_overflow() {
        let p = posteriors(1e5, 0.0, &pair(0.3, CostMatrix::zero_one()));
        assert_eq!(p.p0, 1.0);
        assert_eq!(p.p1, 0.0);
        let p = posteriors(-1e6, 0.0, &equal_pair());
        assert_eq!(p.p0, 0.0);
        assert_eq!(p.p1, 1.0);
    }

    #[test]
    fn threshold_zero_one_equal_priors() {
        assert_eq!(bayes_threshold(&equal_pair()), 0.0);
    }

    #[test]
    fn threshold_unequal_priors() {
        let t = bayes_threshold(&pair(0.25, CostMatrix::zero_one()));
        assert!((t - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn threshold_cost_ratio() {
        let cost = CostMatrix::new(0.0, 2.0, 1.0, 0.0).unwrap();
        let t = bayes_threshold(&pair(0.5, cost));
        assert!((t - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cost_admissibility_enforced() {
        assert!(CostMatrix::new(0.0, 0.5, 1.0, 0.5).is_err()); // c01 == c11
        assert!(CostMatrix::new(0.0, 1.0, 0.0, 0.0).is_err()); // c10 == c00
        assert!(CostMatrix::new(1.0, 0.5, 2.0, 0.0).is_ok());
    }

    #[test]
    fn decide_rule_direction() {
        let p = equal_pair();
        assert_eq!(decide(0.3, 0.0, &p).accepted, Hypothesis::H0);
        assert_eq!(decide(-0.3, 0.0, &p).accepted, Hypothesis::H1);
    }

    #[test]
    fn decide_tie_goes_to_h1() {
        let d = decide(1.25, 1.25, &equal_pair());
        assert_eq!(d.log_ratio, 0.0);
        assert_eq!(d.log_threshold, 0.0);
        assert_eq!(d.accepted, Hypothesis::H1);
    }

    #[test]
    fn conditional_error_examples() {
        assert_eq!(conditional_error(&PosteriorPair { p0: 0.5, p1: 0.5 }), 0.5);
        assert_eq!(conditional_error(&PosteriorPair { p0: 0.75, p1: 0.25 }), 0.25);
        assert_eq!(conditional_error(&PosteriorPair { p0: 1.0, p1: 0.0 }), 0.0);
    }

    #[test]
    fn bayes_risk_zero_one() {
        let r = bayes_risk(&equal_pair(), 0.1, 0.2).unwrap();
        assert!((r - 0.15).abs() < 1e-15);
        assert_eq!(bayes_risk(&equal_pair(), 1.0, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn bayes_risk_error_free_limit() {
        let cost = CostMatrix::new(0.3, 2.0, 1.5, 0.7).unwrap();
        let p = pair(0.4, cost);
        let r = bayes_risk(&p, 0.0, 0.0).unwrap();
        assert!((r - (0.3 * 0.4 + 0.7 * 0.6)).abs() < 1e-15);
    }

    #[test]
    fn bayes_risk_rejects_bad_probability() {
        assert!(bayes_risk(&equal_pair(), 1.2, 0.0).is_err());
        assert!(bayes_risk(&equal_pair(), 0.0, -0.1).is_err());
    }

    #[test]
    fn priors_must_sum_to_one() {
        assert!(HypothesisPair::new(model(1.0), model(2.0), 0.6, 0.6, CostMatrix::zero_one())
            .is_err());
        assert!(HypothesisPair::new(model(1.0), model(2.0), 0.0, 1.0, CostMatrix::zero_one())
            .is_err());
    }

    proptest! {
        #[test]
        fn posterior_normalization(l0 in -500.0f64..500.0, l1 in -500.0f64..500.0) {
            let p = posteriors(l0, l1, &equal_pair());
            prop_assert!((p.p0 + p.p1 - 1.0).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&p.p0));
        }

        #[test]
        fn shift_invariance(l0 in -100.0f64..100.0, l1 in -100.0f64..100.0, c in -50.0f64..50.0) {
            let pair = equal_pair();
            let a = posteriors(l0, l1, &pair);
            let b = posteriors(l0 + c, l1 + c, &pair);
            // the common shift cancels through the max subtraction, up to
            // the rounding of l + c itself
            prop_assert!((a.p0 - b.p0).abs() <= 1e-12);
            prop_assert_eq!(
                decide(l0, l1, &pair).accepted,
                decide(l0 + c, l1 + c, &pair).accepted
            );
        }

        #[test]
        fn bayes_equals_map(l0 in -50.0f64..50.0, l1 in -50.0f64..50.0, tie in prop::bool::ANY) {
            let pair = equal_pair();
            let (l0, l1) = if tie { (l0, l0) } else { (l0, l1) };
            let d = decide(l0, l1, &pair);
            let p = posteriors(l0, l1, &pair);
            let map = if p.p0 > p.p1 { Hypothesis::H0 } else { Hypothesis::H1 };
            prop_assert_eq!(d.accepted, map);
        }

        #[test]
        fn conditional_error_bounded_and_monotone(
            gap in 0.0f64..20.0, extra in 0.01f64..5.0,
        ) {
            let pair = equal_pair();
            let e1 = conditional_error(&posteriors(gap, 0.0, &pair));
            let e2 = conditional_error(&posteriors(gap + extra, 0.0, &pair));
            prop_assert!(e1 <= 0.5 + 1e-15);
            prop_assert!(e2 <= e1);
        }

        #[test]
        fn bayes_risk_matches_qe_identity(p10 in 0.0f64..1.0, p01 in 0.0f64..1.0, prior0 in 0.01f64..0.99) {
            // zero-one cost reduces the risk to the average error probability.
            let p = pair(prior0, CostMatrix::zero_one());
            let r = bayes_risk(&p, p10, p01).unwrap();
            let qe = p10 * p.prior0() + p01 * p.prior1();
            prop_assert!((r - qe).abs() < 1e-14);
        }
    }
}

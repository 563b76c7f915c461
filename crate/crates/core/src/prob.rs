//! Probability kernel for per-filter screening.
//!
//! Conventions used throughout the crate: a filter *applies* to an item when
//! the item should be screened out by it. `VoteLabel::Out` is a vote saying
//! the filter applies. Per-filter state is carried either as the probability
//! that the filter does not apply (`in` probability, the form the Bayes update
//! is stated in) or as its complement (`out` probability, what the engines
//! store). Every function says which one it takes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{check_accuracy, check_unit, Error, Result};

/// Lowest and highest worker accuracy accepted by the vote model.
pub const MIN_ACCURACY: f64 = 0.5;
pub const MAX_ACCURACY: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VoteLabel {
    #[serde(rename = "IN")]
    In,
    #[serde(rename = "OUT")]
    Out,
}

impl VoteLabel {
    pub fn from_applies(applies: bool) -> Self {
        if applies {
            VoteLabel::Out
        } else {
            VoteLabel::In
        }
    }

    pub fn is_out(self) -> bool {
        self == VoteLabel::Out
    }

    pub fn flipped(self) -> Self {
        match self {
            VoteLabel::In => VoteLabel::Out,
            VoteLabel::Out => VoteLabel::In,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            VoteLabel::In => "IN",
            VoteLabel::Out => "OUT",
        }
    }
}

impl fmt::Display for VoteLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VoteLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "IN" | "in" | "0" => Ok(VoteLabel::In),
            "OUT" | "out" | "1" => Ok(VoteLabel::Out),
            other => Err(format!("expected IN or OUT, got {other:?}")),
        }
    }
}

/// Ground-truth description of one filter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSpec {
    pub id: usize,
    /// Fraction of items the filter applies to.
    pub power: f64,
    /// Shrinks crowd accuracy towards 0.5; see [`skew_accuracy`].
    #[serde(default)]
    pub difficulty: f64,
}

impl FilterSpec {
    pub fn new(id: usize, power: f64, difficulty: f64) -> Result<Self> {
        let spec = FilterSpec {
            id,
            power,
            difficulty,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        check_unit("power", self.power)?;
        if !(self.difficulty >= 0.0) {
            return Err(Error::Domain {
                name: "difficulty",
                value: self.difficulty,
                domain: "[0, inf)",
            });
        }
        Ok(())
    }
}

/// Estimated filter parameters, as produced by the baseline run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterEstimate {
    pub filter_id: usize,
    pub power_hat: f64,
    pub worker_accuracy_hat: f64,
    /// False when the votes could not identify the parameters (no votes, or
    /// every vote on the filter carried the same label).
    pub informed: bool,
}

impl FilterEstimate {
    pub fn new(filter_id: usize, power_hat: f64, worker_accuracy_hat: f64) -> Result<Self> {
        check_unit("power_hat", power_hat)?;
        check_unit("worker_accuracy_hat", worker_accuracy_hat)?;
        Ok(FilterEstimate {
            filter_id,
            power_hat,
            worker_accuracy_hat: clamp_accuracy(worker_accuracy_hat),
            informed: true,
        })
    }

    pub fn uninformed(filter_id: usize) -> Self {
        FilterEstimate {
            filter_id,
            power_hat: 0.5,
            worker_accuracy_hat: 0.5,
            informed: false,
        }
    }
}

/// Beta-distributed belief about a classifier's accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaPosterior {
    pub alpha: f64,
    pub beta: f64,
}

impl BetaPosterior {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Domain {
                name: "alpha",
                value: alpha,
                domain: "(0, inf)",
            });
        }
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::Domain {
                name: "beta",
                value: beta,
                domain: "(0, inf)",
            });
        }
        Ok(BetaPosterior { alpha, beta })
    }

    pub fn uniform() -> Self {
        BetaPosterior {
            alpha: 1.0,
            beta: 1.0,
        }
    }

    pub fn mean(&self) -> f64 {
        self.alpha / (self.alpha + self.beta)
    }

    /// Conjugate update with `correct` successes and `failed` failures.
    pub fn observe(&self, correct: u64, failed: u64) -> Self {
        BetaPosterior {
            alpha: self.alpha + correct as f64,
            beta: self.beta + failed as f64,
        }
    }
}

impl Default for BetaPosterior {
    fn default() -> Self {
        Self::uniform()
    }
}

/// Loss weighting and expert price, in crowd-vote units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossParams {
    /// Weight of a false exclusion relative to a false inclusion.
    pub k: f64,
    /// Expert cost per item.
    pub expert_cost: f64,
}

impl LossParams {
    pub fn new(k: f64, expert_cost: f64) -> Result<Self> {
        let p = LossParams { k, expert_cost };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k > 0.0) {
            return Err(Error::Domain {
                name: "k",
                value: self.k,
                domain: "(0, inf)",
            });
        }
        if !(self.expert_cost > 0.0) {
            return Err(Error::Domain {
                name: "expert_cost",
                value: self.expert_cost,
                domain: "(0, inf)",
            });
        }
        Ok(())
    }
}

impl Default for LossParams {
    fn default() -> Self {
        LossParams {
            k: 10.0,
            expert_cost: 20.0,
        }
    }
}

pub fn clamp_accuracy(accuracy: f64) -> f64 {
    accuracy.clamp(MIN_ACCURACY, MAX_ACCURACY)
}

/// Accuracy of a worker on a filter of the given difficulty.
pub fn skew_accuracy(base_accuracy: f64, difficulty: f64) -> Result<f64> {
    check_accuracy("base_accuracy", base_accuracy)?;
    if !(difficulty >= 0.0) {
        return Err(Error::Domain {
            name: "difficulty",
            value: difficulty,
            domain: "[0, inf)",
        });
    }
    Ok(0.5 + (base_accuracy - 0.5) * (-difficulty).exp())
}

/// Probability that the next vote on a pair is OUT, given the probability
/// `out_prob` that the filter applies.
pub fn next_vote_out_prob(worker_accuracy: f64, out_prob: f64) -> Result<f64> {
    check_unit("worker_accuracy", worker_accuracy)?;
    check_unit("out_prob", out_prob)?;
    Ok(vote_out_prob_unchecked(worker_accuracy, out_prob))
}

#[inline]
pub(crate) fn vote_out_prob_unchecked(worker_accuracy: f64, out_prob: f64) -> f64 {
    worker_accuracy * out_prob + (1.0 - worker_accuracy) * (1.0 - out_prob)
}

/// Posterior probability that the filter does *not* apply after one vote.
pub fn bayes_filter_update(prior_in: f64, worker_accuracy: f64, vote: VoteLabel) -> Result<f64> {
    check_unit("prior_in", prior_in)?;
    check_accuracy("worker_accuracy", worker_accuracy)?;
    let likelihood_in = match vote {
        VoteLabel::In => worker_accuracy,
        VoteLabel::Out => 1.0 - worker_accuracy,
    };
    let p_out_vote = vote_out_prob_unchecked(worker_accuracy, 1.0 - prior_in);
    let evidence = match vote {
        VoteLabel::Out => p_out_vote,
        VoteLabel::In => 1.0 - p_out_vote,
    };
    if evidence <= 0.0 {
        return Err(Error::DegenerateEvidence(format!(
            "vote {vote} has zero probability under prior_in = {prior_in}, accuracy = {worker_accuracy}"
        )));
    }
    Ok((likelihood_in * prior_in / evidence).clamp(0.0, 1.0))
}

/// Probability that an item is screened out, from its per-filter `in`
/// probabilities.
pub fn item_out_prob(in_probs: &[f64]) -> Result<f64> {
    if in_probs.is_empty() {
        return Err(Error::Empty("in_probs"));
    }
    let mut all_in = 1.0;
    for &p in in_probs {
        check_unit("in_prob", p)?;
        all_in *= p;
    }
    Ok(1.0 - all_in)
}

/// P(X > 0.5) for X ~ Beta(alpha, beta).
pub fn beta_prob_better_than_random(posterior: &BetaPosterior) -> f64 {
    beta_tail_above(posterior, 0.5)
}

/// P(X > x) for X ~ Beta(alpha, beta).
pub fn beta_tail_above(posterior: &BetaPosterior, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x >= 1.0 {
        return 0.0;
    }
    // I_{1-x}(b, a) = 1 - I_x(a, b), evaluated directly to keep precision in the upper tail.
    statrs::function::beta::beta_reg(posterior.beta, posterior.alpha, 1.0 - x)
}

// Log-odds helpers. Posterior folding in the engines happens in this space so
// that long vote runs do not underflow.

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Log-likelihood ratio carried by one OUT vote from a worker of the given
/// accuracy.
pub fn vote_weight(worker_accuracy: f64) -> f64 {
    logit(worker_accuracy)
}

/// Probability that a filter applies after `net_out` more OUT votes than IN
/// votes, starting from `prior_out`. Votes commute, so only the net count
/// matters.
pub fn fold_out_prob(prior_out: f64, worker_accuracy: f64, net_out: i64) -> Result<f64> {
    check_unit("prior_out", prior_out)?;
    check_accuracy("worker_accuracy", worker_accuracy)?;
    if net_out == 0 {
        return Ok(prior_out);
    }
    let shift = net_out as f64 * vote_weight(worker_accuracy);
    let z = logit(prior_out) + shift;
    if z.is_nan() {
        return Err(Error::DegenerateEvidence(format!(
            "certain prior {prior_out} contradicted by votes from a perfect worker"
        )));
    }
    Ok(sigmoid(z))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn skew_examples() {
        assert_eq!(skew_accuracy(0.9, 0.0).unwrap(), 0.9);
        assert!((skew_accuracy(0.9, 1.0).unwrap() - 0.647_151_776_468_576_9).abs() < 1e-12);
        assert!((skew_accuracy(0.8, 60.0).unwrap() - 0.5).abs() < 1e-12);
        assert!(skew_accuracy(0.4, 0.0).is_err());
        assert!(skew_accuracy(0.8, -0.1).is_err());
    }

    #[test]
    fn next_vote_examples() {
        for p in [0.0, 0.13, 0.5, 1.0] {
            assert!((next_vote_out_prob(0.5, p).unwrap() - 0.5).abs() < 1e-15);
        }
        assert!((next_vote_out_prob(1.0, 0.3).unwrap() - 0.3).abs() < 1e-15);
        assert!((next_vote_out_prob(0.7, 0.3).unwrap() - 0.42).abs() < 1e-12);
        assert!(next_vote_out_prob(1.2, 0.3).is_err());
        assert!(next_vote_out_prob(0.7, -0.3).is_err());
    }

    #[test]
    fn bayes_examples() {
        assert!((bayes_filter_update(0.5, 0.5, VoteLabel::Out).unwrap() - 0.5).abs() < 1e-15);
        assert!((bayes_filter_update(0.5, 0.8, VoteLabel::Out).unwrap() - 0.2).abs() < 1e-12);
        assert_eq!(bayes_filter_update(1.0, 0.8, VoteLabel::Out).unwrap(), 1.0);
        assert!(matches!(
            bayes_filter_update(1.0, 1.0, VoteLabel::Out),
            Err(Error::DegenerateEvidence(_))
        ));
        assert!(bayes_filter_update(0.5, 0.3, VoteLabel::Out).is_err());
    }

    #[test]
    fn item_out_examples() {
        assert_eq!(item_out_prob(&[1.0; 4]).unwrap(), 0.0);
        assert!((item_out_prob(&[0.5, 0.5]).unwrap() - 0.75).abs() < 1e-15);
        assert_eq!(item_out_prob(&[0.0, 0.77]).unwrap(), 1.0);
        assert!(matches!(item_out_prob(&[]), Err(Error::Empty(_))));
    }

    #[test]
    fn beta_tail_examples() {
        let p = |a, b| beta_prob_better_than_random(&BetaPosterior::new(a, b).unwrap());
        assert!((p(26.0, 26.0) - 0.5).abs() < 1e-9);
        assert!((p(1.0, 1.0) - 0.5).abs() < 1e-12);
        let strong = p(41.0, 11.0);
        assert!(strong >= 0.99999);
        // scipy.stats.beta.sf(0.5, 41, 11)
        assert!((strong - 0.999_992_631_142_057_5).abs() < 1e-9);
    }

    #[test]
    fn fold_matches_sequential_updates() {
        let alpha = 0.73;
        let mut p_in = 0.64;
        for _ in 0..5 {
            p_in = bayes_filter_update(p_in, alpha, VoteLabel::Out).unwrap();
        }
        p_in = bayes_filter_update(p_in, alpha, VoteLabel::In).unwrap();
        let folded = fold_out_prob(0.36, alpha, 4).unwrap();
        assert!((folded - (1.0 - p_in)).abs() < 1e-12);
    }

    #[test]
    fn fold_degenerate_prior() {
        assert_eq!(fold_out_prob(1.0, 0.8, -3).unwrap(), 1.0);
        assert!(fold_out_prob(0.0, 1.0, 2).is_err());
    }

    #[test]
    fn vote_label_parse() {
        assert_eq!("OUT".parse::<VoteLabel>().unwrap(), VoteLabel::Out);
        assert_eq!(" IN".parse::<VoteLabel>().unwrap(), VoteLabel::In);
        assert!("maybe".parse::<VoteLabel>().is_err());
        assert_eq!(
            serde_json::to_string(&VoteLabel::Out).unwrap(),
            "\"OUT\""
        );
    }
}

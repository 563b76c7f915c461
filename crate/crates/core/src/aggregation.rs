//! Baseline-run label aggregation: majority voting and a per-filter,
//! label-symmetric Dawid–Skene EM.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prob::{logit, sigmoid, FilterEstimate, VoteLabel, MIN_ACCURACY};

/// EM keeps the accuracy strictly below one so that a single dissenting vote
/// never has infinite weight.
pub const EM_MAX_ACCURACY: f64 = 1.0 - 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VoteRecord {
    pub item_id: usize,
    pub filter_id: usize,
    pub worker_id: u64,
    pub label: VoteLabel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineEstimate {
    pub filter_estimates: Vec<FilterEstimate>,
    /// (item_id, filter_id) -> probability the filter applies.
    pub label_posteriors: BTreeMap<(usize, usize), f64>,
    /// Summed log-likelihood over filters, one entry per EM iteration.
    pub log_likelihood_trace: Vec<f64>,
    pub per_filter_traces: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmConfig {
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_iters: 50,
            tol: 1e-6,
        }
    }
}

/// Strict majority; ties go to IN.
pub fn majority_vote(votes: &[VoteLabel]) -> Result<VoteLabel> {
    if votes.is_empty() {
        return Err(Error::Empty("votes"));
    }
    let outs = votes.iter().filter(|v| v.is_out()).count();
    Ok(if 2 * outs > votes.len() {
        VoteLabel::Out
    } else {
        VoteLabel::In
    })
}

#[derive(Debug, Clone, Copy, Default)]
struct Tally {
    outs: u32,
    ins: u32,
}

impl Tally {
    fn total(&self) -> u32 {
        self.outs + self.ins
    }
}

struct FilterFit {
    estimate: FilterEstimate,
    posteriors: Vec<(usize, f64)>,
    trace: Vec<f64>,
}

fn log_mix(log_a: f64, log_b: f64) -> f64 {
    let m = log_a.max(log_b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((log_a - m).exp() + (log_b - m).exp()).ln()
}

// `x * ln(p)` with the 0 * ln(0) = 0 convention.
fn xlogp(x: f64, p: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * p.ln()
    }
}

fn log_likelihood(tallies: &[(usize, Tally)], accuracy: f64, power: f64) -> f64 {
    tallies
        .iter()
        .map(|(_, t)| {
            let (o, n) = (t.outs as f64, t.ins as f64);
            let applies = xlogp(1.0, power) + xlogp(o, accuracy) + xlogp(n, 1.0 - accuracy);
            let passes = xlogp(1.0, 1.0 - power) + xlogp(n, accuracy) + xlogp(o, 1.0 - accuracy);
            log_mix(applies, passes)
        })
        .sum()
}

fn fit_filter(filter_id: usize, tallies: &[(usize, Tally)], config: &EmConfig) -> FilterFit {
    if tallies.is_empty() {
        return FilterFit {
            estimate: FilterEstimate::uninformed(filter_id),
            posteriors: Vec::new(),
            trace: Vec::new(),
        };
    }

    let mut post: Vec<f64> = tallies
        .iter()
        .map(|(_, t)| if 2 * t.outs > t.total() { 1.0 } else { 0.0 })
        .collect();
    let total_votes: f64 = tallies.iter().map(|(_, t)| t.total() as f64).sum();
    let m = tallies.len() as f64;

    let mut trace = Vec::new();
    let mut accuracy = MIN_ACCURACY;
    let mut power = 0.5;
    for iter in 0..config.max_iters {
        // M step
        let agreeing: f64 = tallies
            .iter()
            .zip(&post)
            .map(|((_, t), &p)| p * t.outs as f64 + (1.0 - p) * t.ins as f64)
            .sum();
        accuracy = (agreeing / total_votes).clamp(MIN_ACCURACY, EM_MAX_ACCURACY);
        power = post.iter().sum::<f64>() / m;

        let ll = log_likelihood(tallies, accuracy, power);
        let converged = iter > 0 && ll - trace.last().copied().unwrap_or(f64::NEG_INFINITY) < config.tol;
        trace.push(ll);

        // E step
        let prior_logit = logit(power);
        let weight = logit(accuracy);
        for ((_, t), p) in tallies.iter().zip(post.iter_mut()) {
            let net = t.outs as f64 - t.ins as f64;
            *p = sigmoid(prior_logit + net * weight);
        }
        if converged {
            break;
        }
    }

    let (outs, ins) = tallies
        .iter()
        .fold((0, 0), |(o, n), (_, t)| (o + t.outs, n + t.ins));
    let smoothed_power = (post.iter().sum::<f64>() + 1.0) / (m + 2.0);
    debug_assert!((0.0..=1.0).contains(&power));
    FilterFit {
        estimate: FilterEstimate {
            filter_id,
            power_hat: smoothed_power,
            worker_accuracy_hat: accuracy,
            informed: outs > 0 && ins > 0,
        },
        posteriors: tallies.iter().map(|(i, _)| *i).zip(post).collect(),
        trace,
    }
}

/// Estimate per-filter worker accuracy and power from a vote log.
///
/// Each filter is fitted independently with one symmetric accuracy and one
/// power parameter, starting from the majority labels. Filters without votes
/// come back as [`FilterEstimate::uninformed`]; filters whose votes all carry
/// the same label are fitted but flagged uninformed as well.
pub fn em_estimate(votes: &[VoteRecord], n_filters: usize, config: &EmConfig) -> Result<BaselineEstimate> {
    if config.max_iters == 0 {
        return Err(Error::Config("max_iters must be at least 1".into()));
    }
    if !(config.tol > 0.0) {
        return Err(Error::Config("tol must be positive".into()));
    }
    let mut per_filter: Vec<BTreeMap<usize, Tally>> = vec![BTreeMap::new(); n_filters];
    for v in votes {
        let slot = per_filter.get_mut(v.filter_id).ok_or_else(|| {
            Error::Config(format!("vote on filter {} but only {n_filters} filters", v.filter_id))
        })?;
        let t = slot.entry(v.item_id).or_default();
        match v.label {
            VoteLabel::Out => t.outs += 1,
            VoteLabel::In => t.ins += 1,
        }
    }

    let mut filter_estimates = Vec::with_capacity(n_filters);
    let mut label_posteriors = BTreeMap::new();
    let mut per_filter_traces = Vec::with_capacity(n_filters);
    for (f, tallies) in per_filter.into_iter().enumerate() {
        let tallies: Vec<(usize, Tally)> = tallies.into_iter().collect();
        let fit = fit_filter(f, &tallies, config);
        filter_estimates.push(fit.estimate);
        for (item, p) in fit.posteriors {
            label_posteriors.insert((item, f), p);
        }
        per_filter_traces.push(fit.trace);
    }

    let len = per_filter_traces.iter().map(Vec::len).max().unwrap_or(0);
    let log_likelihood_trace = (0..len)
        .map(|t| {
            per_filter_traces
                .iter()
                .filter(|tr| !tr.is_empty())
                .map(|tr| tr[t.min(tr.len() - 1)])
                .sum()
        })
        .collect();

    Ok(BaselineEstimate {
        filter_estimates,
        label_posteriors,
        log_likelihood_trace,
        per_filter_traces,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(item: usize, filter: usize, worker: u64, label: VoteLabel) -> VoteRecord {
        VoteRecord {
            item_id: item,
            filter_id: filter,
            worker_id: worker,
            label,
        }
    }

    #[test]
    fn majority_examples() {
        use VoteLabel::*;
        assert_eq!(majority_vote(&[Out, Out, In]).unwrap(), Out);
        assert_eq!(majority_vote(&[In]).unwrap(), In);
        assert_eq!(majority_vote(&[In, Out]).unwrap(), In);
        assert!(majority_vote(&[]).is_err());
    }

    #[test]
    fn unanimous_workers() {
        let mut votes = Vec::new();
        for item in 0..20 {
            let label = if item < 10 { VoteLabel::Out } else { VoteLabel::In };
            for w in 0..3 {
                votes.push(rec(item, 0, w, label));
            }
        }
        let est = em_estimate(&votes, 1, &EmConfig::default()).unwrap();
        for item in 0..20 {
            let p = est.label_posteriors[&(item, 0)];
            if item < 10 {
                assert!(p > 0.999, "{p}");
            } else {
                assert!(p < 0.001, "{p}");
            }
        }
        let fe = est.filter_estimates[0];
        assert!(fe.worker_accuracy_hat >= 0.95);
        assert!((fe.power_hat - 0.5).abs() < 1e-9);
        assert!(fe.informed);
    }

    #[test]
    fn empty_votes_are_uninformed() {
        let est = em_estimate(&[], 3, &EmConfig::default()).unwrap();
        assert_eq!(est.filter_estimates.len(), 3);
        for fe in &est.filter_estimates {
            assert!(!fe.informed);
            assert_eq!(fe.power_hat, 0.5);
            assert_eq!(fe.worker_accuracy_hat, 0.5);
        }
        assert!(est.label_posteriors.is_empty());
    }

    #[test]
    fn single_item_unanimous_is_flagged() {
        let votes: Vec<_> = (0..5).map(|w| rec(7, 0, w, VoteLabel::Out)).collect();
        let est = em_estimate(&votes, 1, &EmConfig::default()).unwrap();
        assert!(!est.filter_estimates[0].informed);
        assert!(est.label_posteriors[&(7, 0)] > 0.5);
    }

    #[test]
    fn rejects_out_of_range_filter() {
        let votes = [rec(0, 2, 0, VoteLabel::In)];
        assert!(em_estimate(&votes, 2, &EmConfig::default()).is_err());
        assert!(em_estimate(&[], 1, &EmConfig { max_iters: 0, tol: 1e-6 }).is_err());
    }
}

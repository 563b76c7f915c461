//! Crowd-only shortest run: baseline run, per-item shortest path to a
//! decision, filter assignment and the give-up rule.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::screening::{run_screening, PriorPlan, ScreeningOutcome};
use super::{Direction, EngineConfig, ItemState, RunPlan, VoteSource};
use crate::aggregation::{em_estimate, BaselineEstimate, VoteRecord};
use crate::error::{Error, Result};
use crate::prob::{logit, sigmoid, vote_out_prob_unchecked, LossParams};

/// Collects `baseline_votes_per_pair` votes on every (sampled item, filter)
/// and runs EM over them.
pub fn baseline_run<S: VoteSource + ?Sized>(
    sample: &[usize],
    n_filters: usize,
    crowd: &mut S,
    config: &EngineConfig,
) -> Result<(BaselineEstimate, Vec<VoteRecord>)> {
    if sample.is_empty() {
        return Err(Error::Empty("baseline sample"));
    }
    let needed = sample.len() as u64 * n_filters as u64 * config.baseline_votes_per_pair as u64;
    if let Some(budget) = config.budget {
        if needed > budget {
            return Err(Error::BudgetExhausted { needed, budget });
        }
    }
    let mut votes = Vec::with_capacity(needed as usize);
    for &item in sample {
        for f in 0..n_filters {
            for _ in 0..config.baseline_votes_per_pair {
                votes.push(crowd.vote(item, f)?);
            }
        }
    }
    let estimate = em_estimate(&votes, n_filters, &config.em)?;
    Ok((estimate, votes))
}

/// Deterministic baseline sample of `config.baseline_items` ids out of
/// `items`, in ascending id order.
pub fn sample_baseline_items(items: &[usize], config: &EngineConfig) -> Vec<usize> {
    let k = config.baseline_items.min(items.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, items.len(), k)
        .into_iter()
        .map(|i| items[i])
        .collect();
    picked.sort_unstable();
    picked
}

fn run_direction(
    out_probs: &[f64],
    filter: usize,
    weight: f64,
    accuracy: f64,
    direction: Direction,
    config: &EngineConfig,
) -> Option<(u32, f64)> {
    let others_in: f64 = out_probs
        .iter()
        .enumerate()
        .filter(|(g, _)| *g != filter)
        .map(|(_, p)| 1.0 - p)
        .product();
    let mut z = logit(out_probs[filter]);
    let mut p = out_probs[filter];
    let mut p_min = 1.0;
    for n in 1..=config.n_max {
        let p_vote_out = vote_out_prob_unchecked(accuracy, p);
        match direction {
            Direction::Out => {
                p_min *= p_vote_out;
                z += weight;
            }
            Direction::In => {
                p_min *= 1.0 - p_vote_out;
                z -= weight;
            }
        }
        p = sigmoid(z);
        let all_in = (1.0 - p) * others_in;
        let crossed = match direction {
            Direction::Out => 1.0 - all_in > config.p_out_threshold,
            Direction::In => all_in > config.p_in_threshold,
        };
        if crossed {
            return Some((n, p_min));
        }
    }
    None
}

/// Smallest number of consecutive same-direction votes on `filter` that takes
/// the item across a decision threshold, and the predicted probability of
/// getting exactly that run of votes.
///
/// `out_probs` are the item's current per-filter probabilities that the filter
/// applies. The OUT direction is preferred on ties.
pub fn estimate_min_votes(
    item_id: usize,
    out_probs: &[f64],
    filter: usize,
    worker_accuracy: f64,
    config: &EngineConfig,
) -> RunPlan {
    let weight = logit(worker_accuracy);
    if !(weight > 0.0) || !weight.is_finite() {
        return RunPlan::sentinel(item_id, filter);
    }
    let out = run_direction(out_probs, filter, weight, worker_accuracy, Direction::Out, config);
    let inn = run_direction(out_probs, filter, weight, worker_accuracy, Direction::In, config);
    let pick = match (out, inn) {
        (Some(o), Some(i)) if i.0 < o.0 => Some((i, Direction::In)),
        (Some(o), _) => Some((o, Direction::Out)),
        (None, Some(i)) => Some((i, Direction::In)),
        (None, None) => None,
    };
    match pick {
        Some(((n, p), direction)) => RunPlan {
            item_id,
            chosen_filter: filter,
            n_min: Some(n),
            p_min: p,
            direction: Some(direction),
        },
        None => RunPlan::sentinel(item_id, filter),
    }
}

/// Orders plans by (smaller n_min, larger p_min, lower filter id).
fn better(a: &RunPlan, b: &RunPlan) -> bool {
    match (a.n_min, b.n_min) {
        (Some(x), Some(y)) if x != y => x < y,
        (Some(_), None) => true,
        (None, Some(_)) => false,
        (None, None) => a.chosen_filter < b.chosen_filter,
        _ => {
            if a.p_min != b.p_min {
                a.p_min > b.p_min
            } else {
                a.chosen_filter < b.chosen_filter
            }
        }
    }
}

/// Picks the filter with the shortest run for one item.
pub fn assign_filter(item_id: usize, out_probs: &[f64], accuracies: &[f64], config: &EngineConfig) -> RunPlan {
    let mut best: Option<RunPlan> = None;
    for f in 0..out_probs.len() {
        let plan = estimate_min_votes(item_id, out_probs, f, accuracies[f], config);
        if best.as_ref().map_or(true, |b| better(&plan, b)) {
            best = Some(plan);
        }
    }
    best.unwrap_or_else(|| RunPlan::sentinel(item_id, 0))
}

/// True when the crowd should stop on this item: no run within `n_max`, or the
/// expected votes `n_min / p_min` exceed γ times the expert price.
pub fn check_stop(plan: &RunPlan, loss: &LossParams, config: &EngineConfig) -> bool {
    match plan.n_min {
        None => true,
        Some(n) if n > config.n_max => true,
        Some(n) => {
            plan.p_min <= 0.0 || n as f64 / plan.p_min > config.give_up_cost_factor * loss.expert_cost
        }
    }
}

/// Crowd-only screening of `items` with flat per-filter power priors.
pub fn sr_classify<S: VoteSource + ?Sized>(
    items: &[usize],
    n_filters: usize,
    crowd: &mut S,
    config: &EngineConfig,
    loss: &LossParams,
) -> Result<ScreeningOutcome> {
    run_screening(items, n_filters, crowd, config, loss, PriorPlan::Power)
}

/// Current per-filter out-probabilities of an item.
pub fn item_out_probs(state: &ItemState) -> Vec<f64> {
    state.in_posteriors.iter().map(|p| 1.0 - p).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> EngineConfig {
        EngineConfig::default()
    }

    #[test]
    fn single_filter_run() {
        let plan = estimate_min_votes(0, &[0.5], 0, 0.8, &cfg());
        assert_eq!(plan.n_min, Some(4));
        assert_eq!(plan.direction, Some(Direction::Out));
        let expected = 0.5 * 0.68 * (0.8 * 16.0 / 17.0 + 0.2 / 17.0) * (0.8 * 64.0 / 65.0 + 0.2 / 65.0);
        assert!((plan.p_min - expected).abs() < 1e-12);
        assert!((plan.p_min - 0.2056).abs() < 1e-4);
    }

    #[test]
    fn uninformative_worker_is_sentinel() {
        assert!(estimate_min_votes(0, &[0.5, 0.3], 1, 0.5, &cfg()).is_sentinel());
    }

    #[test]
    fn assign_prefers_shorter_run() {
        let plan = assign_filter(0, &[0.6, 0.5], &[0.9, 0.55], &cfg());
        assert_eq!(plan.chosen_filter, 0);
        let a = estimate_min_votes(0, &[0.6, 0.5], 0, 0.9, &cfg());
        let b = estimate_min_votes(0, &[0.6, 0.5], 1, 0.55, &cfg());
        assert!(a.n_min.unwrap() < b.n_min.unwrap_or(u32::MAX));

        let plan = assign_filter(0, &[0.3, 0.3, 0.3], &[0.7, 0.7, 0.7], &cfg());
        assert_eq!(plan.chosen_filter, 0);

        let plan = assign_filter(0, &[0.3, 0.3], &[0.5, 0.5], &cfg());
        assert!(plan.is_sentinel());
        assert!(check_stop(&plan, &LossParams::default(), &cfg()));
    }

    #[test]
    fn stop_rule() {
        let loss = LossParams::new(10.0, 20.0).unwrap();
        let plan = |n, p| RunPlan {
            item_id: 0,
            chosen_filter: 0,
            n_min: Some(n),
            p_min: p,
            direction: Some(Direction::Out),
        };
        assert!(!check_stop(&plan(4, 0.2), &loss, &cfg()));
        assert!(check_stop(&plan(4, 0.19), &loss, &cfg()));
        assert!(check_stop(&plan(11, 0.9), &loss, &cfg()));
        assert!(check_stop(&RunPlan::sentinel(0, 0), &loss, &cfg()));
    }

    #[test]
    fn baseline_sample_is_deterministic() {
        let items: Vec<usize> = (100..400).collect();
        let a = sample_baseline_items(&items, &cfg());
        assert_eq!(a.len(), 50);
        assert_eq!(a, sample_baseline_items(&items, &cfg()));
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(sample_baseline_items(&items[..3], &cfg()).len(), 3);
    }
}

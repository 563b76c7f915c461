//! Screening quality and cost metrics.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::engine::{ItemState, ItemStatus};
use crate::error::{Error, Result};
use crate::prob::{LossParams, VoteLabel};
use crate::sim::WorldTruth;

/// Final label of one item: `Out` means screened out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub item_id: usize,
    pub label: VoteLabel,
}

pub fn decisions_from_states(items: &[ItemState]) -> Vec<Decision> {
    items
        .iter()
        .map(|s| Decision {
            item_id: s.item_id,
            label: if s.status == ItemStatus::Out {
                VoteLabel::Out
            } else {
                VoteLabel::In
            },
        })
        .collect()
}

/// Counts of the four decision outcomes. Inclusion is the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    /// Passing items kept.
    pub true_inclusions: u64,
    /// Excluded items screened out.
    pub true_exclusions: u64,
    /// Passing items screened out.
    pub false_exclusions: u64,
    /// Excluded items kept.
    pub false_inclusions: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.true_inclusions + self.true_exclusions + self.false_exclusions + self.false_inclusions
    }
}

pub fn confusion(decisions: &[Decision], truth: &WorldTruth) -> Result<Confusion> {
    let mut seen = BTreeSet::new();
    let mut c = Confusion::default();
    for d in decisions {
        if d.item_id >= truth.n_items {
            return Err(Error::Coverage(format!("item {} is not in the world", d.item_id)));
        }
        if !seen.insert(d.item_id) {
            return Err(Error::Coverage(format!("item {} decided twice", d.item_id)));
        }
        match (truth.passes(d.item_id), d.label) {
            (true, VoteLabel::In) => c.true_inclusions += 1,
            (true, VoteLabel::Out) => c.false_exclusions += 1,
            (false, VoteLabel::In) => c.false_inclusions += 1,
            (false, VoteLabel::Out) => c.true_exclusions += 1,
        }
    }
    Ok(c)
}

/// `(k·FE + FI) / n_items`. Every one of the `n_items` items must be decided.
pub fn compute_loss(decisions: &[Decision], truth: &WorldTruth, loss: &LossParams, n_items: usize) -> Result<f64> {
    loss.validate()?;
    if decisions.len() != n_items {
        return Err(Error::Coverage(format!(
            "{} decisions for {n_items} items",
            decisions.len()
        )));
    }
    if n_items == 0 {
        return Err(Error::Empty("decisions"));
    }
    let c = confusion(decisions, truth)?;
    Ok((loss.k * c.false_exclusions as f64 + c.false_inclusions as f64) / n_items as f64)
}

/// Crowd cost `CV + FI·ec` (plus the gold cost if asked) over the all-expert
/// cost `n_items·ec`.
pub fn compute_price_ratio(
    crowd_votes: u64,
    false_inclusions: u64,
    loss: &LossParams,
    n_items: usize,
    gold_cost: f64,
    include_gold: bool,
) -> Result<f64> {
    loss.validate()?;
    if n_items == 0 {
        return Err(Error::Empty("items"));
    }
    if !(gold_cost >= 0.0) {
        return Err(Error::Domain {
            name: "gold_cost",
            value: gold_cost,
            domain: "[0, inf)",
        });
    }
    let mut cc = crowd_votes as f64 + false_inclusions as f64 * loss.expert_cost;
    if include_gold {
        cc += gold_cost;
    }
    Ok(cc / (n_items as f64 * loss.expert_cost))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallPrecision {
    pub recall: f64,
    pub precision: f64,
    /// No passing items exist, recall reported as 1.
    pub recall_undefined: bool,
    /// Nothing was included, precision reported as 1.
    pub precision_undefined: bool,
}

pub fn compute_recall_precision(decisions: &[Decision], truth: &WorldTruth) -> Result<RecallPrecision> {
    let c = confusion(decisions, truth)?;
    Ok(recall_precision(&c))
}

fn recall_precision(c: &Confusion) -> RecallPrecision {
    let ti = c.true_inclusions as f64;
    let r_den = c.true_inclusions + c.false_exclusions;
    let p_den = c.true_inclusions + c.false_inclusions;
    RecallPrecision {
        recall: if r_den == 0 { 1.0 } else { ti / r_den as f64 },
        precision: if p_den == 0 { 1.0 } else { ti / p_den as f64 },
        recall_undefined: r_den == 0,
        precision_undefined: p_den == 0,
    }
}

/// Column names of the per-run metrics, in output order.
pub const METRIC_NAMES: [&str; 7] = [
    "loss",
    "price_ratio",
    "recall",
    "precision",
    "crowd_votes",
    "false_inclusions",
    "false_exclusions",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub loss_per_item: f64,
    pub recall: f64,
    pub precision: f64,
    pub price_ratio: f64,
    pub crowd_votes: u64,
    pub false_inclusions: u64,
    pub false_exclusions: u64,
    pub gold_cost: f64,
    pub run_seed: u64,
}

impl MetricsReport {
    pub fn evaluate(
        decisions: &[Decision],
        truth: &WorldTruth,
        crowd_votes: u64,
        gold_cost: f64,
        loss: &LossParams,
        include_gold: bool,
        run_seed: u64,
    ) -> Result<Self> {
        let n = decisions.len();
        let c = confusion(decisions, truth)?;
        let rp = recall_precision(&c);
        Ok(MetricsReport {
            loss_per_item: compute_loss(decisions, truth, loss, n)?,
            recall: rp.recall,
            precision: rp.precision,
            price_ratio: compute_price_ratio(crowd_votes, c.false_inclusions, loss, n, gold_cost, include_gold)?,
            crowd_votes,
            false_inclusions: c.false_inclusions,
            false_exclusions: c.false_exclusions,
            gold_cost,
            run_seed,
        })
    }

    /// Metric values in [`METRIC_NAMES`] order.
    pub fn named(&self) -> [(&'static str, f64); 7] {
        let v = [
            self.loss_per_item,
            self.price_ratio,
            self.recall,
            self.precision,
            self.crowd_votes as f64,
            self.false_inclusions as f64,
            self.false_exclusions as f64,
        ];
        std::array::from_fn(|k| (METRIC_NAMES[k], v[k]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prob::FilterSpec;

    /// One filter; items `0..n_out` have it applying.
    fn world(n: usize, n_out: usize) -> WorldTruth {
        let truth = (0..n).map(|i| i < n_out).collect();
        WorldTruth::from_truth(vec![FilterSpec::new(0, 0.5, 0.0).unwrap()], truth, 0).unwrap()
    }

    fn decide(n: usize, out: impl Fn(usize) -> bool) -> Vec<Decision> {
        (0..n)
            .map(|i| Decision {
                item_id: i,
                label: if out(i) { VoteLabel::Out } else { VoteLabel::In },
            })
            .collect()
    }

    #[test]
    fn loss_examples() {
        let w = world(100, 50);
        let loss = LossParams::new(10.0, 20.0).unwrap();
        assert_eq!(compute_loss(&decide(100, |i| i < 50), &w, &loss, 100).unwrap(), 0.0);

        // items 50, 51 wrongly out (FE = 2); items 0..5 wrongly in (FI = 5)
        let d = decide(100, |i| (5..52).contains(&i));
        assert!((compute_loss(&d, &w, &loss, 100).unwrap() - 0.25).abs() < 1e-15);

        let all_in = decide(100, |_| false);
        assert!((compute_loss(&all_in, &w, &loss, 100).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(compute_loss(&all_in[..99], &w, &loss, 100), Err(Error::Coverage(_))));
    }

    #[test]
    fn price_ratio_examples() {
        let loss = LossParams::new(10.0, 20.0).unwrap();
        assert_eq!(compute_price_ratio(0, 1000, &loss, 1000, 0.0, false).unwrap(), 1.0);
        assert!((compute_price_ratio(3000, 10, &loss, 1000, 0.0, false).unwrap() - 0.16).abs() < 1e-15);
        assert_eq!(compute_price_ratio(0, 0, &loss, 1000, 0.0, false).unwrap(), 0.0);
        assert!((compute_price_ratio(0, 0, &loss, 1000, 1000.0, true).unwrap() - 0.05).abs() < 1e-15);
        assert_eq!(compute_price_ratio(0, 0, &loss, 1000, 1000.0, false).unwrap(), 0.0);
    }

    #[test]
    fn recall_precision_examples() {
        // 100 passing items (ids 30..130), 30 excluded (ids 0..30)
        let w = world(130, 30);
        let d = decide(130, |i| i >= 125);
        let rp = compute_recall_precision(&d, &w).unwrap();
        assert!((rp.recall - 0.95).abs() < 1e-15);
        assert!((rp.precision - 0.76).abs() < 1e-15);

        let rp = compute_recall_precision(&decide(130, |i| i < 30), &w).unwrap();
        assert_eq!((rp.recall, rp.precision), (1.0, 1.0));

        let rp = compute_recall_precision(&decide(130, |_| false), &w).unwrap();
        assert_eq!(rp.recall, 1.0);
        assert!((rp.precision - 100.0 / 130.0).abs() < 1e-15);

        let rp = compute_recall_precision(&decide(10, |_| true), &world(10, 10)).unwrap();
        assert!(rp.recall_undefined && rp.precision_undefined);
        assert_eq!((rp.recall, rp.precision), (1.0, 1.0));
    }
}

//! Testing black-box classifiers against an expert gold set and keeping the
//! ones that are confidently better than random, per filter.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prob::{beta_prob_better_than_random, BetaPosterior, VoteLabel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldEntry {
    pub item_id: usize,
    pub filter_id: usize,
    pub label: VoteLabel,
}

/// Expert-labelled (item, filter) pairs.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GoldSet {
    entries: Vec<GoldEntry>,
    expert_cost: f64,
}

impl GoldSet {
    pub fn new(entries: Vec<GoldEntry>, expert_cost: f64) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for e in &entries {
            if !seen.insert((e.item_id, e.filter_id)) {
                return Err(Error::Config(format!(
                    "duplicate gold entry for item {}, filter {}",
                    e.item_id, e.filter_id
                )));
            }
        }
        Ok(GoldSet {
            entries,
            expert_cost,
        })
    }

    pub fn empty() -> Self {
        GoldSet::default()
    }

    pub fn entries(&self) -> &[GoldEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn items(&self) -> BTreeSet<usize> {
        self.entries.iter().map(|e| e.item_id).collect()
    }

    pub fn filters(&self) -> BTreeSet<usize> {
        self.entries.iter().map(|e| e.filter_id).collect()
    }

    /// Expert cost of the gold set: one expert price per distinct item.
    pub fn acquisition_cost(&self) -> f64 {
        self.expert_cost * self.items().len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierProfile {
    pub classifier_id: usize,
    pub per_filter_posterior: BTreeMap<usize, BetaPosterior>,
    /// (correct, failed) gold answers per filter.
    pub per_filter_counts: BTreeMap<usize, (u64, u64)>,
    pub retained: BTreeMap<usize, bool>,
    pub query_cost: f64,
}

impl ClassifierProfile {
    pub fn is_retained(&self, filter_id: usize) -> bool {
        self.retained.get(&filter_id).copied().unwrap_or(false)
    }

    /// Posterior-mean accuracy on a filter (the prior mean when untested).
    pub fn accuracy(&self, filter_id: usize) -> f64 {
        self.per_filter_posterior
            .get(&filter_id)
            .map(BetaPosterior::mean)
            .unwrap_or(0.5)
    }
}

/// Counts correct and failed answers of one classifier on the gold entries of
/// `filter_id`.
pub fn gold_counts<F>(outputs: F, gold: &GoldSet, filter_id: usize) -> Result<(u64, u64)>
where
    F: Fn(usize, usize) -> Option<VoteLabel>,
{
    let mut correct = 0;
    let mut failed = 0;
    for e in gold.entries().iter().filter(|e| e.filter_id == filter_id) {
        let out = outputs(e.item_id, e.filter_id).ok_or_else(|| {
            Error::Coverage(format!(
                "no classifier output for gold item {}, filter {}",
                e.item_id, e.filter_id
            ))
        })?;
        if out == e.label {
            correct += 1;
        } else {
            failed += 1;
        }
    }
    Ok((correct, failed))
}

/// Beta(1 + correct, 1 + failed) over the gold entries of one filter.
pub fn test_classifier<F>(outputs: F, gold: &GoldSet, filter_id: usize) -> Result<BetaPosterior>
where
    F: Fn(usize, usize) -> Option<VoteLabel>,
{
    test_classifier_with_prior(outputs, gold, filter_id, BetaPosterior::uniform())
}

pub fn test_classifier_with_prior<F>(
    outputs: F,
    gold: &GoldSet,
    filter_id: usize,
    prior: BetaPosterior,
) -> Result<BetaPosterior>
where
    F: Fn(usize, usize) -> Option<VoteLabel>,
{
    let (correct, failed) = gold_counts(outputs, gold, filter_id)?;
    Ok(prior.observe(correct, failed))
}

/// Builds an untouched (nothing retained) profile for one classifier over
/// `filters`.
pub fn profile_classifier<F>(
    classifier_id: usize,
    outputs: F,
    gold: &GoldSet,
    filters: impl IntoIterator<Item = usize>,
    prior: BetaPosterior,
    query_cost: f64,
) -> Result<ClassifierProfile>
where
    F: Fn(usize, usize) -> Option<VoteLabel>,
{
    let mut profile = ClassifierProfile {
        classifier_id,
        per_filter_posterior: BTreeMap::new(),
        per_filter_counts: BTreeMap::new(),
        retained: BTreeMap::new(),
        query_cost,
    };
    for f in filters {
        let (correct, failed) = gold_counts(&outputs, gold, f)?;
        profile.per_filter_posterior.insert(f, prior.observe(correct, failed));
        profile.per_filter_counts.insert(f, (correct, failed));
        profile.retained.insert(f, false);
    }
    Ok(profile)
}

/// Marks each (classifier, filter) retained iff P(accuracy > 0.5) exceeds the
/// threshold.
pub fn select_classifiers(
    profiles: &[ClassifierProfile],
    selection_threshold: f64,
) -> Result<Vec<ClassifierProfile>> {
    if !(selection_threshold > 0.0 && selection_threshold < 1.0) {
        return Err(Error::Domain {
            name: "selection_threshold",
            value: selection_threshold,
            domain: "(0, 1)",
        });
    }
    Ok(profiles
        .iter()
        .map(|p| {
            let mut p = p.clone();
            for (f, post) in &p.per_filter_posterior {
                p.retained
                    .insert(*f, beta_prob_better_than_random(post) > selection_threshold);
            }
            p
        })
        .collect())
}

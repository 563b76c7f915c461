//! Adaptive screening engines.
//!
//! [`shortest_run`] holds the crowd-only planning primitives and
//! [`sr_classify`]; [`hybrid`] wraps the same loop with classifier gating and
//! ensemble priors. Both share the loop in `screening`.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::aggregation::{EmConfig, VoteRecord};
use crate::error::{Error, Result};

pub mod hybrid;
mod screening;
pub mod shortest_run;

pub use hybrid::{finalize_unclassified, hsr_classify, update_power, HsrJob, HsrOutcome, PowerUpdate};
pub use screening::ScreeningOutcome;
pub use shortest_run::{assign_filter, baseline_run, check_stop, estimate_min_votes, sr_classify};

/// Anything that can answer "give me one crowd vote on (item, filter)".
pub trait VoteSource {
    fn vote(&mut self, item_id: usize, filter_id: usize) -> Result<VoteRecord>;
}

impl<S: VoteSource + ?Sized> VoteSource for &mut S {
    fn vote(&mut self, item_id: usize, filter_id: usize) -> Result<VoteRecord> {
        (**self).vote(item_id, filter_id)
    }
}

/// Replays a recorded vote log: the n-th request for a pair gets the n-th
/// recorded vote on that pair.
#[derive(Debug, Clone, Default)]
pub struct ReplaySource {
    queues: BTreeMap<(usize, usize), VecDeque<VoteRecord>>,
}

impl ReplaySource {
    pub fn new(votes: impl IntoIterator<Item = VoteRecord>) -> Self {
        let mut queues: BTreeMap<(usize, usize), VecDeque<VoteRecord>> = BTreeMap::new();
        for v in votes {
            queues.entry((v.item_id, v.filter_id)).or_default().push_back(v);
        }
        ReplaySource { queues }
    }

    pub fn remaining(&self) -> usize {
        self.queues.values().map(VecDeque::len).sum()
    }
}

impl VoteSource for ReplaySource {
    fn vote(&mut self, item_id: usize, filter_id: usize) -> Result<VoteRecord> {
        self.queues
            .get_mut(&(item_id, filter_id))
            .and_then(VecDeque::pop_front)
            .ok_or(Error::VoteSourceExhausted {
                item: item_id,
                filter: filter_id,
            })
    }
}

/// Multiplicative damping of power estimates above an activation level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PowerSmoothing {
    pub factor: f64,
    pub activation: f64,
}

impl Default for PowerSmoothing {
    fn default() -> Self {
        PowerSmoothing {
            factor: 0.8,
            activation: 0.5,
        }
    }
}

impl PowerSmoothing {
    pub fn disabled() -> Self {
        PowerSmoothing {
            factor: 1.0,
            activation: 1.0,
        }
    }

    pub fn apply(&self, power: f64) -> f64 {
        if power > self.activation {
            power * self.factor
        } else {
            power
        }
    }
}

/// How the per-filter power is re-estimated after every iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PowerEstimator {
    /// Mean posterior probability that the filter applies, over all items.
    #[default]
    PosteriorMass,
    /// Decided items with an OUT posterior above 0.5 count as one; undecided
    /// items contribute their prior.
    DecidedCount,
}

fn default_p_threshold() -> f64 {
    0.99
}
fn default_baseline_items() -> usize {
    50
}
fn default_votes_per_pair() -> u32 {
    5
}
fn default_batch_fraction() -> f64 {
    0.1
}
fn default_n_max() -> u32 {
    10
}
fn default_gamma() -> f64 {
    1.0
}
fn default_max_votes_per_item() -> u32 {
    100
}
fn default_prior_clip() -> (f64, f64) {
    (0.01, 0.99)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    #[serde(default = "default_p_threshold")]
    pub p_out_threshold: f64,
    #[serde(default = "default_p_threshold")]
    pub p_in_threshold: f64,
    #[serde(default = "default_baseline_items")]
    pub baseline_items: usize,
    #[serde(default = "default_votes_per_pair")]
    pub baseline_votes_per_pair: u32,
    #[serde(default = "default_batch_fraction")]
    pub batch_fraction: f64,
    #[serde(default = "default_n_max")]
    pub n_max: u32,
    /// γ in the give-up rule `n_min / p_min > γ · ec`.
    #[serde(default = "default_gamma")]
    pub give_up_cost_factor: f64,
    /// Cap on crowd votes, baseline included.
    #[serde(default)]
    pub budget: Option<u64>,
    /// Hard per-item vote cap; items reaching it are given up.
    #[serde(default = "default_max_votes_per_item")]
    pub max_votes_per_item: u32,
    #[serde(default)]
    pub power_smoothing: PowerSmoothing,
    #[serde(default)]
    pub power_estimator: PowerEstimator,
    /// Machine priors are clipped to this range before entering the update.
    #[serde(default = "default_prior_clip")]
    pub prior_clip: (f64, f64),
    /// Apply the power smoothing to per-item machine priors as well.
    #[serde(default)]
    pub smooth_machine_priors: bool,
    /// Re-run EM over all collected votes after every iteration instead of
    /// freezing the baseline accuracy estimates.
    #[serde(default)]
    pub reestimate_accuracy: bool,
    #[serde(default)]
    pub em: EmConfig,
    /// Seeds the baseline-item sample.
    #[serde(default)]
    pub seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            p_out_threshold: default_p_threshold(),
            p_in_threshold: default_p_threshold(),
            baseline_items: default_baseline_items(),
            baseline_votes_per_pair: default_votes_per_pair(),
            batch_fraction: default_batch_fraction(),
            n_max: default_n_max(),
            give_up_cost_factor: default_gamma(),
            budget: None,
            max_votes_per_item: default_max_votes_per_item(),
            power_smoothing: PowerSmoothing::default(),
            power_estimator: PowerEstimator::default(),
            prior_clip: default_prior_clip(),
            smooth_machine_priors: false,
            reestimate_accuracy: false,
            em: EmConfig::default(),
            seed: 0,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if !(self.p_out_threshold > 0.5 && self.p_out_threshold < 1.0) {
            return bad("p_out_threshold must lie in (0.5, 1)");
        }
        if !(self.p_in_threshold > 0.5 && self.p_in_threshold < 1.0) {
            return bad("p_in_threshold must lie in (0.5, 1)");
        }
        if self.baseline_items == 0 || self.baseline_votes_per_pair == 0 || self.n_max == 0 {
            return bad("baseline_items, baseline_votes_per_pair and n_max must be positive");
        }
        if !(self.batch_fraction > 0.0 && self.batch_fraction <= 1.0) {
            return bad("batch_fraction must lie in (0, 1]");
        }
        if !(self.give_up_cost_factor > 0.0) {
            return bad("give_up_cost_factor must be positive");
        }
        if self.max_votes_per_item == 0 {
            return bad("max_votes_per_item must be positive");
        }
        let s = self.power_smoothing;
        if !(s.factor > 0.0 && s.factor <= 1.0) || !(0.0..=1.0).contains(&s.activation) {
            return bad("power smoothing factor must lie in (0, 1] and activation in [0, 1]");
        }
        let (lo, hi) = self.prior_clip;
        if !(lo > 0.0 && lo < hi && hi < 1.0) {
            return bad("prior_clip must satisfy 0 < low < high < 1");
        }
        if self.em.max_iters == 0 || !(self.em.tol > 0.0) {
            return bad("em.max_iters must be positive and em.tol > 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ItemStatus {
    Undecided,
    In,
    Out,
    GivenUp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemState {
    pub item_id: usize,
    /// P(filter does not apply), per filter.
    pub in_posteriors: Vec<f64>,
    #[serde(skip)]
    pub votes: Vec<VoteRecord>,
    pub status: ItemStatus,
    pub votes_spent: u32,
    /// Set when the item was left to experts (given up or never decided).
    pub difficult: bool,
}

impl ItemState {
    pub fn new(item_id: usize, n_filters: usize) -> Self {
        ItemState {
            item_id,
            in_posteriors: vec![1.0; n_filters],
            votes: Vec::new(),
            status: ItemStatus::Undecided,
            votes_spent: 0,
            difficult: false,
        }
    }

    pub fn is_out(&self) -> bool {
        self.status == ItemStatus::Out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Direction {
    In,
    Out,
}

/// Cheapest consecutive-vote route to a decision for one item.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunPlan {
    pub item_id: usize,
    pub chosen_filter: usize,
    /// `None` when even `n_max` same-direction votes cannot reach a threshold.
    pub n_min: Option<u32>,
    pub p_min: f64,
    pub direction: Option<Direction>,
}

impl RunPlan {
    pub fn sentinel(item_id: usize, chosen_filter: usize) -> Self {
        RunPlan {
            item_id,
            chosen_filter,
            n_min: None,
            p_min: 0.0,
            direction: None,
        }
    }

    pub fn is_sentinel(&self) -> bool {
        self.n_min.is_none()
    }
}

/// Where the money went, in crowd-vote units.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CostLedger {
    pub gold_cost: f64,
    pub baseline_votes: u64,
    pub adaptive_votes: u64,
    /// Expert price of every item left on the expert's desk as difficult.
    pub expert_fallback_cost: f64,
}

impl CostLedger {
    pub fn crowd_votes(&self) -> u64 {
        self.baseline_votes + self.adaptive_votes
    }

    pub fn total(&self) -> f64 {
        self.gold_cost + self.crowd_votes() as f64 + self.expert_fallback_cost
    }
}

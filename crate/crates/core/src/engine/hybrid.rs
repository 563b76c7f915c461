//! Hybrid shortest run: gate classifiers on the gold set, turn the survivors
//! into per-(item, filter) priors, then run the shortest-run loop on top of
//! them.

use serde::{Deserialize, Serialize};

use super::screening::{run_screening, PriorPlan, ScreeningOutcome, Stacking};
use super::{EngineConfig, ItemState, ItemStatus, PowerEstimator, PowerSmoothing, VoteSource};
use crate::ensemble::{build_priors, MachineOutputs, PriorInputs, PriorMatrix, PriorMode, StackerConfig};
use crate::error::Result;
use crate::gate::{profile_classifier, select_classifiers, ClassifierProfile, GoldSet};
use crate::prob::{BetaPosterior, FilterEstimate, LossParams};

/// Power estimates are kept inside this range.
pub const POWER_RANGE: (f64, f64) = (0.01, 0.99);

fn default_selection_threshold() -> f64 {
    0.95
}
fn default_retrain_after() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HsrJob {
    pub config: EngineConfig,
    pub prior_mode: PriorMode,
    pub gold: GoldSet,
    #[serde(default = "default_selection_threshold")]
    pub selection_threshold: f64,
    #[serde(default)]
    pub accuracy_prior: BetaPosterior,
    #[serde(default)]
    pub stacker: StackerConfig,
    /// Refit the stacker once this many new items have been decided.
    #[serde(default = "default_retrain_after")]
    pub retrain_after: usize,
    #[serde(default)]
    pub classifier_query_cost: f64,
}

impl HsrJob {
    pub fn new(config: EngineConfig, prior_mode: PriorMode, gold: GoldSet) -> Self {
        HsrJob {
            config,
            prior_mode,
            gold,
            selection_threshold: default_selection_threshold(),
            accuracy_prior: BetaPosterior::uniform(),
            stacker: StackerConfig::default(),
            retrain_after: default_retrain_after(),
            classifier_query_cost: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GateDiagnostics {
    pub profiles: Vec<ClassifierProfile>,
    /// Retained classifiers per filter.
    pub retained_per_filter: Vec<usize>,
    /// Prior source actually used.
    pub provenance: PriorMode,
    pub column_provenance: Vec<PriorMode>,
    /// Set when the requested mode degraded to power-only priors.
    pub fell_back: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct HsrOutcome {
    #[serde(flatten)]
    pub screening: ScreeningOutcome,
    pub gating: GateDiagnostics,
}

/// Gates classifiers and builds the naive-Bayes prior matrix over `items`.
///
/// Filters without a retained classifier get the flat `power_fallback` value.
pub fn gate_and_prior<O: MachineOutputs + ?Sized>(
    items: &[usize],
    outputs: &O,
    job: &HsrJob,
    power_fallback: &[f64],
) -> Result<(Vec<ClassifierProfile>, PriorMatrix)> {
    let n_filters = power_fallback.len();
    let profiles = (0..outputs.n_classifiers())
        .map(|c| {
            profile_classifier(
                c,
                |i, f| outputs.label(c, i, f),
                &job.gold,
                0..n_filters,
                job.accuracy_prior,
                job.classifier_query_cost,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let profiles = select_classifiers(&profiles, job.selection_threshold)?;
    let inputs = PriorInputs {
        item_ids: items,
        profiles: &profiles,
        outputs,
        stacked: None,
        power_estimates: power_fallback,
    };
    let mode = if job.prior_mode == PriorMode::PowerOnly {
        PriorMode::PowerOnly
    } else {
        PriorMode::NaiveBayes
    };
    let priors = build_priors(mode, &inputs)?;
    Ok((profiles, priors))
}

/// Full hybrid screening of `items`.
///
/// With no retained classifier (or `PowerOnly` mode) this is exactly
/// [`super::sr_classify`] plus the gold-set cost in the ledger.
pub fn hsr_classify<S, O>(
    items: &[usize],
    n_filters: usize,
    crowd: &mut S,
    outputs: &O,
    job: &HsrJob,
    loss: &LossParams,
) -> Result<HsrOutcome>
where
    S: VoteSource + ?Sized,
    O: MachineOutputs,
{
    let (profiles, priors) = gate_and_prior(items, outputs, job, &vec![0.5; n_filters])?;
    let retained_per_filter: Vec<usize> = (0..n_filters)
        .map(|f| profiles.iter().filter(|p| p.is_retained(f)).count())
        .collect();

    let plan = if priors.provenance == PriorMode::PowerOnly {
        PriorPlan::Power
    } else {
        let values: Vec<f64> = items
            .iter()
            .flat_map(|&id| priors.row(id).expect("row for every item").to_vec())
            .collect();
        let machine_columns = priors
            .column_provenance
            .iter()
            .map(|p| *p != PriorMode::PowerOnly)
            .collect();
        let stacking = (job.prior_mode == PriorMode::Stacked).then(|| Stacking {
            profiles: &profiles,
            outputs,
            config: job.stacker,
            retrain_after: job.retrain_after,
        });
        PriorPlan::Machine {
            values,
            machine_columns,
            stacking,
        }
    };
    let mut screening = run_screening(items, n_filters, crowd, &job.config, loss, plan)?;
    screening.ledger.gold_cost = job.gold.acquisition_cost();

    let provenance = if priors.provenance == PriorMode::PowerOnly {
        PriorMode::PowerOnly
    } else if screening.stacker_fits > 0 {
        PriorMode::Stacked
    } else {
        PriorMode::NaiveBayes
    };
    Ok(HsrOutcome {
        screening,
        gating: GateDiagnostics {
            profiles,
            retained_per_filter,
            provenance,
            column_provenance: priors.column_provenance.clone(),
            fell_back: job.prior_mode != PriorMode::PowerOnly && priors.provenance == PriorMode::PowerOnly,
        },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerUpdate {
    /// Unsmoothed estimates, clamped to [`POWER_RANGE`].
    pub raw: Vec<f64>,
    /// Smoothed estimates, what the power-only prior uses.
    pub estimates: Vec<FilterEstimate>,
}

/// Per-filter power estimate over all screened items, clamped to
/// [`POWER_RANGE`].
///
/// `prior(i, f)` is the prior of row `i`; it stands in for items that have no
/// votes yet. Posteriors of items with votes must be current.
pub(crate) fn estimate_power(
    items: &[ItemState],
    n_filters: usize,
    estimator: PowerEstimator,
    prior: impl Fn(usize, usize) -> f64,
) -> Vec<f64> {
    (0..n_filters)
        .map(|f| {
            let mass: f64 = items
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let decided = matches!(s.status, ItemStatus::In | ItemStatus::Out);
                    let out = 1.0 - s.in_posteriors[f];
                    match estimator {
                        PowerEstimator::DecidedCount if decided => (out > 0.5) as u8 as f64,
                        PowerEstimator::PosteriorMass if decided || !s.votes.is_empty() => out,
                        _ => prior(i, f),
                    }
                })
                .sum();
            (mass / items.len().max(1) as f64).clamp(POWER_RANGE.0, POWER_RANGE.1)
        })
        .collect()
}

/// Re-estimates filter power from the screened items, then applies the
/// smoothing.
///
/// `items` must carry current posteriors; `priors` supplies the value for items
/// without votes. `accuracies` are carried into the returned estimates.
pub fn update_power(
    items: &[ItemState],
    priors: &PriorMatrix,
    accuracies: &[f64],
    smoothing: &PowerSmoothing,
    estimator: PowerEstimator,
) -> PowerUpdate {
    let raw = estimate_power(items, priors.n_filters(), estimator, |i, f| {
        priors.get(items[i].item_id, f).unwrap_or(0.0)
    });
    let estimates = raw
        .iter()
        .enumerate()
        .map(|(f, &p)| FilterEstimate {
            filter_id: f,
            power_hat: smoothing.apply(p),
            worker_accuracy_hat: accuracies.get(f).copied().unwrap_or(0.5),
            informed: true,
        })
        .collect();
    PowerUpdate { raw, estimates }
}

/// Everything not decided by the crowd goes to the experts as IN, flagged
/// difficult.
pub fn finalize_unclassified(items: &mut [ItemState]) {
    for s in items {
        if matches!(s.status, ItemStatus::Undecided | ItemStatus::GivenUp) {
            s.status = ItemStatus::In;
            s.difficult = true;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(id: usize, status: ItemStatus, in_posteriors: Vec<f64>) -> ItemState {
        ItemState {
            item_id: id,
            in_posteriors,
            votes: Vec::new(),
            status,
            votes_spent: 0,
            difficult: false,
        }
    }

    #[test]
    fn power_from_priors_only() {
        let items: Vec<_> = (0..10).map(|i| state(i, ItemStatus::Undecided, vec![1.0])).collect();
        let ids: Vec<usize> = (0..10).collect();
        let priors = PriorMatrix::constant(&ids, &[0.3]);
        let up = update_power(&items, &priors, &[0.8], &PowerSmoothing::default(), PowerEstimator::PosteriorMass);
        assert!((up.raw[0] - 0.3).abs() < 1e-12);
        assert!((up.estimates[0].power_hat - 0.3).abs() < 1e-12);
    }

    #[test]
    fn power_all_out_is_capped_then_smoothed() {
        let items: Vec<_> = (0..10).map(|i| state(i, ItemStatus::Out, vec![0.01])).collect();
        let ids: Vec<usize> = (0..10).collect();
        let priors = PriorMatrix::constant(&ids, &[0.3]);
        let up = update_power(&items, &priors, &[0.8], &PowerSmoothing::default(), PowerEstimator::PosteriorMass);
        assert!((up.raw[0] - 0.99).abs() < 1e-12);
        assert!((up.estimates[0].power_hat - 0.792).abs() < 1e-12);
    }

    #[test]
    fn decided_count_uses_indicators() {
        let mut items: Vec<_> = (0..4).map(|i| state(i, ItemStatus::Out, vec![0.3])).collect();
        items[1].status = ItemStatus::In;
        items[1].in_posteriors = vec![0.9];
        items[2].status = ItemStatus::Undecided;
        items[3].in_posteriors = vec![0.6];
        let ids: Vec<usize> = (0..4).collect();
        let priors = PriorMatrix::constant(&ids, &[0.2]);
        let up = update_power(&items, &priors, &[0.8], &PowerSmoothing::disabled(), PowerEstimator::DecidedCount);
        // indicators 1, 0, prior 0.2, 0
        assert!((up.raw[0] - 0.3).abs() < 1e-12);
        let up = update_power(&items, &priors, &[0.8], &PowerSmoothing::disabled(), PowerEstimator::PosteriorMass);
        // 0.7, 0.1, 0.2, 0.4
        assert!((up.raw[0] - 0.35).abs() < 1e-12);
    }

    #[test]
    fn smoothing_rule() {
        let s = PowerSmoothing::default();
        assert!((s.apply(0.6) - 0.48).abs() < 1e-12);
        assert_eq!(s.apply(0.5), 0.5);
        assert_eq!(s.apply(0.3), 0.3);
        assert_eq!(PowerSmoothing::disabled().apply(0.9), 0.9);
    }

    #[test]
    fn finalize_flags_open_items() {
        let mut empty: Vec<ItemState> = Vec::new();
        finalize_unclassified(&mut empty);
        assert!(empty.is_empty());

        let mut items = vec![
            state(0, ItemStatus::GivenUp, vec![0.5]),
            state(1, ItemStatus::Out, vec![0.001]),
            state(2, ItemStatus::Undecided, vec![0.7]),
            state(3, ItemStatus::In, vec![0.999]),
        ];
        finalize_unclassified(&mut items);
        assert_eq!(items[0].status, ItemStatus::In);
        assert!(items[0].difficult);
        assert_eq!(items[1].status, ItemStatus::Out);
        assert!(!items[1].difficult);
        assert!(items[2].difficult);
        assert!(!items[3].difficult);
    }
}

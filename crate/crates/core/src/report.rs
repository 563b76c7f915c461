//! Per-run JSON report: decisions, vote counts, cost ledger, gating
//! diagnostics and the power-estimate trajectory.

use serde::Serialize;

use crate::engine::hybrid::GateDiagnostics;
use crate::engine::{CostLedger, ItemStatus};
use crate::error::Result;
use crate::experiment::{Strategy, StrategyRun};
use crate::metrics::MetricsReport;
use crate::prob::{FilterEstimate, VoteLabel};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ItemReport {
    pub item_id: usize,
    pub label: VoteLabel,
    pub votes: u32,
    pub difficult: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub status: Option<ItemStatus>,
}

#[derive(Debug, Clone, Serialize)]
pub struct LedgerReport {
    #[serde(flatten)]
    pub ledger: CostLedger,
    pub crowd_votes: u64,
    pub total: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub strategy: Strategy,
    pub sweep_value: Option<f64>,
    pub repetition: usize,
    pub metrics: MetricsReport,
    pub items: Vec<ItemReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ledger: Option<LedgerReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline: Option<Vec<FilterEstimate>>,
    /// Smoothed power estimate per filter, one entry per iteration.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub power_trajectory: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gating: Option<GateDiagnostics>,
}

impl RunReport {
    pub fn new(run: &StrategyRun, sweep_value: Option<f64>, repetition: usize) -> Self {
        let states = run.screening.as_ref().map(|s| &s.items);
        let items = run
            .decisions
            .iter()
            .map(|d| {
                let state = states.and_then(|s| s.iter().find(|x| x.item_id == d.item_id));
                ItemReport {
                    item_id: d.item_id,
                    label: d.label,
                    votes: state.map_or(0, |s| s.votes_spent),
                    difficult: state.is_some_and(|s| s.difficult),
                    status: state.map(|s| s.status),
                }
            })
            .collect();
        RunReport {
            strategy: run.strategy,
            sweep_value,
            repetition,
            metrics: run.metrics.clone(),
            items,
            ledger: run.screening.as_ref().map(|s| LedgerReport {
                ledger: s.ledger,
                crowd_votes: s.ledger.crowd_votes(),
                total: s.ledger.total(),
            }),
            baseline: run.screening.as_ref().map(|s| s.baseline.clone()),
            power_trajectory: run.screening.as_ref().map(|s| s.power_trajectory.clone()),
            gating: run.gating.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

use std::collections::{BTreeMap, HashMap};

use serde::Serialize;

use super::hybrid::{estimate_power, finalize_unclassified, POWER_RANGE};
use super::shortest_run::{assign_filter, baseline_run, check_stop, sample_baseline_items};
use super::{CostLedger, EngineConfig, ItemState, ItemStatus, RunPlan, VoteSource};
use crate::aggregation::{em_estimate, VoteRecord};
use crate::ensemble::{build_priors, train_stacker, MachineOutputs, PriorInputs, PriorMode, StackedModel, StackerConfig};
use crate::error::{Error, Result};
use crate::gate::ClassifierProfile;
use crate::prob::{clamp_accuracy, logit, sigmoid, FilterEstimate, LossParams, VoteLabel};

/// Source of per-(item, filter) priors for the loop.
pub(crate) enum PriorPlan<'a> {
    /// Flat per-filter power, re-estimated every iteration.
    Power,
    /// Ensemble output p^mc for every item, row-aligned with the item list.
    Machine {
        values: Vec<f64>,
        /// Columns backed by retained classifiers; the rest use power.
        machine_columns: Vec<bool>,
        stacking: Option<Stacking<'a>>,
    },
}

pub(crate) struct Stacking<'a> {
    pub profiles: &'a [ClassifierProfile],
    pub outputs: &'a dyn MachineOutputs,
    pub config: StackerConfig,
    pub retrain_after: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScreeningOutcome {
    pub items: Vec<ItemState>,
    pub ledger: CostLedger,
    /// Crowd accuracy and initial power estimates from the baseline run.
    pub baseline: Vec<FilterEstimate>,
    /// Smoothed power estimate after every iteration, starting with θ̂⁰.
    pub power_trajectory: Vec<Vec<f64>>,
    pub iterations: usize,
    pub stacker_fits: usize,
    #[serde(skip)]
    pub votes: Vec<VoteRecord>,
}

impl ScreeningOutcome {
    pub fn crowd_votes(&self) -> u64 {
        self.ledger.crowd_votes()
    }
}

struct Loop<'a, 'c, S: VoteSource + ?Sized> {
    ids: &'c [usize],
    nf: usize,
    config: &'c EngineConfig,
    crowd: &'c mut S,
    accuracies: Vec<f64>,
    weights: Vec<f64>,
    net: Vec<i64>,
    items: Vec<ItemState>,
    power_raw: Vec<f64>,
    power_smoothed: Vec<f64>,
    machine: Option<Vec<f64>>,
    machine_columns: Vec<bool>,
    stacking: Option<Stacking<'a>>,
    stacker_seen: Option<usize>,
    stacker_fits: usize,
    baseline_labels: BTreeMap<(usize, usize), f64>,
    ledger: CostLedger,
    votes: Vec<VoteRecord>,
}

impl<S: VoteSource + ?Sized> Loop<'_, '_, S> {
    fn prior(&self, idx: usize, f: usize) -> f64 {
        match &self.machine {
            Some(values) if self.machine_columns[f] => {
                let (lo, hi) = self.config.prior_clip;
                let mut p = values[idx * self.nf + f];
                if self.config.smooth_machine_priors {
                    p = self.config.power_smoothing.apply(p);
                }
                p.clamp(lo, hi)
            }
            _ => self.power_smoothed[f],
        }
    }

    fn out_probs_into(&self, idx: usize, buf: &mut Vec<f64>) {
        buf.clear();
        for f in 0..self.nf {
            let net = self.net[idx * self.nf + f];
            let prior = self.prior(idx, f);
            buf.push(if net == 0 {
                prior
            } else {
                sigmoid(logit(prior) + net as f64 * self.weights[f])
            });
        }
    }

    fn record(&mut self, idx: usize, v: VoteRecord) {
        let slot = idx * self.nf + v.filter_id;
        self.net[slot] += if v.label == VoteLabel::Out { 1 } else { -1 };
        let item = &mut self.items[idx];
        item.votes.push(v);
        item.votes_spent += 1;
        self.votes.push(v);
    }

    fn refresh_posteriors(&mut self, idx: usize, buf: &mut Vec<f64>) {
        self.out_probs_into(idx, buf);
        for (dst, p) in self.items[idx].in_posteriors.iter_mut().zip(buf.iter()) {
            *dst = 1.0 - p;
        }
    }

    /// Applies the IN/OUT thresholds to an undecided item.
    fn decide(&mut self, idx: usize, buf: &mut Vec<f64>) {
        self.refresh_posteriors(idx, buf);
        let all_in: f64 = self.items[idx].in_posteriors.iter().product();
        if all_in > self.config.p_in_threshold {
            self.items[idx].status = ItemStatus::In;
        } else if 1.0 - all_in > self.config.p_out_threshold {
            self.items[idx].status = ItemStatus::Out;
        }
    }

    fn set_accuracies(&mut self, estimates: &[FilterEstimate]) {
        self.accuracies = estimates.iter().map(|e| clamp_accuracy(e.worker_accuracy_hat)).collect();
        self.weights = self.accuracies.iter().map(|&a| logit(a)).collect();
    }

    fn update_power(&mut self, buf: &mut Vec<f64>) {
        for idx in 0..self.items.len() {
            let s = &self.items[idx];
            if !matches!(s.status, ItemStatus::In | ItemStatus::Out) && !s.votes.is_empty() {
                self.refresh_posteriors(idx, buf);
            }
        }
        let nf = self.nf;
        let current = &self.power_raw;
        let estimator = self.config.power_estimator;
        let raw = match &self.machine {
            None => estimate_power(&self.items, nf, estimator, |_, f| current[f]),
            Some(values) => {
                let cols = &self.machine_columns;
                estimate_power(&self.items, nf, estimator, |i, f| {
                    if cols[f] {
                        values[i * nf + f]
                    } else {
                        current[f]
                    }
                })
            }
        };
        self.set_power(raw);
    }

    fn set_power(&mut self, raw: Vec<f64>) {
        self.power_smoothed = raw.iter().map(|&p| self.config.power_smoothing.apply(p)).collect();
        self.power_raw = raw;
    }

    fn maybe_retrain(&mut self) -> Result<()> {
        let Some(st) = &self.stacking else {
            return Ok(());
        };
        let decided: Vec<usize> = (0..self.items.len())
            .filter(|&i| matches!(self.items[i].status, ItemStatus::In | ItemStatus::Out))
            .collect();
        if let Some(seen) = self.stacker_seen {
            if decided.len() < seen + st.retrain_after {
                return Ok(());
            }
        }
        self.stacker_seen = Some(decided.len());

        let mut labels = self.baseline_labels.clone();
        for &i in &decided {
            for f in 0..self.nf {
                labels.insert((i, f), 1.0 - self.items[i].in_posteriors[f]);
            }
        }
        let mut model = StackedModel::default();
        for f in 0..self.nf {
            let classifiers: Vec<usize> = st
                .profiles
                .iter()
                .filter(|p| p.is_retained(f))
                .map(|p| p.classifier_id)
                .collect();
            if classifiers.is_empty() {
                continue;
            }
            let samples: Vec<(Vec<VoteLabel>, f64)> = labels
                .iter()
                .filter(|((_, g), _)| *g == f)
                .filter_map(|(&(i, _), &y)| {
                    let id = self.ids[i];
                    let x: Option<Vec<VoteLabel>> =
                        classifiers.iter().map(|&c| st.outputs.label(c, id, f)).collect();
                    x.map(|x| (x, y))
                })
                .collect();
            if let Ok(m) = train_stacker(&samples, &classifiers, f, &st.config) {
                model.per_filter.insert(f, m);
                model.training_size = model.training_size.max(samples.len());
            }
        }
        if model.per_filter.is_empty() {
            return Ok(());
        }
        let power = self.power_raw.clone();
        let inputs = PriorInputs {
            item_ids: self.ids,
            profiles: st.profiles,
            outputs: st.outputs,
            stacked: Some(&model),
            power_estimates: &power,
        };
        let m = build_priors(PriorMode::Stacked, &inputs)?;
        let values: Vec<f64> = self
            .ids
            .iter()
            .flat_map(|&id| m.row(id).expect("row for every item").to_vec())
            .collect();
        self.machine = Some(values);
        self.stacker_fits += 1;
        Ok(())
    }
}

pub(crate) fn run_screening<S: VoteSource + ?Sized>(
    ids: &[usize],
    nf: usize,
    crowd: &mut S,
    config: &EngineConfig,
    loss: &LossParams,
    plan: PriorPlan<'_>,
) -> Result<ScreeningOutcome> {
    config.validate()?;
    loss.validate()?;
    if ids.is_empty() {
        return Err(Error::Empty("items"));
    }
    let index: HashMap<usize, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();

    let sample = sample_baseline_items(ids, config);
    let (baseline, baseline_votes) = baseline_run(&sample, nf, crowd, config)?;

    let mut initial_power: Vec<f64> = baseline.filter_estimates.iter().map(|e| e.power_hat).collect();
    let (machine, machine_columns, stacking) = match plan {
        PriorPlan::Power => (None, vec![false; nf], None),
        PriorPlan::Machine {
            values,
            machine_columns,
            stacking,
        } => {
            for f in (0..nf).filter(|&f| machine_columns[f]) {
                let sum: f64 = (0..ids.len()).map(|i| values[i * nf + f]).sum();
                initial_power[f] = sum / ids.len() as f64;
            }
            (Some(values), machine_columns, stacking)
        }
    };

    let baseline_labels: BTreeMap<(usize, usize), f64> = baseline
        .label_posteriors
        .iter()
        .map(|(&(id, f), &p)| ((index[&id], f), p))
        .collect();

    let mut lp = Loop {
        ids,
        nf,
        config,
        crowd,
        accuracies: Vec::new(),
        weights: Vec::new(),
        net: vec![0; ids.len() * nf],
        items: ids.iter().map(|&id| ItemState::new(id, nf)).collect(),
        power_raw: Vec::new(),
        power_smoothed: Vec::new(),
        machine,
        machine_columns,
        stacking,
        stacker_seen: None,
        stacker_fits: 0,
        baseline_labels,
        ledger: CostLedger::default(),
        votes: Vec::new(),
    };
    lp.set_accuracies(&baseline.filter_estimates);
    lp.set_power(initial_power.iter().map(|p| p.clamp(POWER_RANGE.0, POWER_RANGE.1)).collect());
    let mut trajectory = vec![lp.power_smoothed.clone()];

    for v in baseline_votes {
        let idx = index[&v.item_id];
        lp.record(idx, v);
    }
    lp.ledger.baseline_votes = lp.votes.len() as u64;
    let mut buf = Vec::with_capacity(nf);
    for &id in &sample {
        lp.decide(index[&id], &mut buf);
    }
    if lp.stacking.is_some() {
        lp.maybe_retrain()?;
    }

    let mut budget_left = config.budget.map(|b| b - lp.ledger.baseline_votes);
    let mut iterations = 0;
    let mut candidates: Vec<RunPlan> = Vec::new();
    'outer: loop {
        if budget_left == Some(0) {
            break;
        }
        candidates.clear();
        for idx in 0..lp.items.len() {
            if lp.items[idx].status != ItemStatus::Undecided {
                continue;
            }
            lp.out_probs_into(idx, &mut buf);
            let plan = assign_filter(idx, &buf, &lp.accuracies, config);
            if check_stop(&plan, loss, config) || lp.items[idx].votes_spent >= config.max_votes_per_item {
                lp.items[idx].status = ItemStatus::GivenUp;
            } else {
                candidates.push(plan);
            }
        }
        if candidates.is_empty() {
            break;
        }
        iterations += 1;
        candidates.sort_by(|a, b| {
            b.p_min
                .total_cmp(&a.p_min)
                .then(a.n_min.cmp(&b.n_min))
                .then(a.item_id.cmp(&b.item_id))
        });
        let take = ((candidates.len() as f64 * config.batch_fraction).ceil() as usize).max(1);
        for plan in candidates.iter().take(take) {
            if let Some(left) = budget_left.as_mut() {
                if *left == 0 {
                    break 'outer;
                }
                *left -= 1;
            }
            let idx = plan.item_id;
            let v = lp.crowd.vote(lp.ids[idx], plan.chosen_filter)?;
            lp.record(idx, v);
            lp.ledger.adaptive_votes += 1;
            lp.decide(idx, &mut buf);
        }
        lp.update_power(&mut buf);
        if config.reestimate_accuracy {
            let est = em_estimate(&lp.votes, nf, &config.em)?;
            lp.set_accuracies(&est.filter_estimates);
        }
        if lp.stacking.is_some() {
            lp.maybe_retrain()?;
        }
        trajectory.push(lp.power_smoothed.clone());
    }
    // final posteriors for everything still open
    for idx in 0..lp.items.len() {
        if !matches!(lp.items[idx].status, ItemStatus::In | ItemStatus::Out) {
            lp.refresh_posteriors(idx, &mut buf);
        }
    }

    let mut items = std::mem::take(&mut lp.items);
    finalize_unclassified(&mut items);
    lp.ledger.expert_fallback_cost = items.iter().filter(|s| s.difficult).count() as f64 * loss.expert_cost;

    let mut baseline_report = baseline.filter_estimates.clone();
    for (e, p) in baseline_report.iter_mut().zip(&trajectory[0]) {
        e.power_hat = *p;
    }
    Ok(ScreeningOutcome {
        items,
        ledger: lp.ledger,
        baseline: baseline_report,
        power_trajectory: trajectory,
        iterations,
        stacker_fits: lp.stacker_fits,
        votes: lp.votes,
    })
}

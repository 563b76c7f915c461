//! Seeded strategy comparisons over synthetic worlds.
//!
//! Every repetition draws one world, one classifier pool, one gold set and one
//! crowd seed; all strategies of that repetition see exactly those. Sweep
//! points reuse the repetition seeds, so neighbouring points differ only in
//! the swept parameter.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::VoteRecord;
use crate::engine::hybrid::{gate_and_prior, GateDiagnostics, HsrOutcome};
use crate::engine::{
    hsr_classify, sr_classify, EngineConfig, HsrJob, ItemStatus, ReplaySource, ScreeningOutcome, VoteSource,
};
use crate::ensemble::{
    build_priors, nb_ensemble_prob, train_stacker, PriorInputs, PriorMatrix, PriorMode, StackedModel,
    StackerConfig,
};
use crate::error::{Error, Result};
use crate::gate::{ClassifierProfile, GoldEntry, GoldSet};
use crate::metrics::{decisions_from_states, Decision, MetricsReport, METRIC_NAMES};
use crate::prob::{FilterSpec, LossParams, VoteLabel};
use crate::sim::{
    generate_world, measure_realized_correlation, mean_off_diagonal, mix_seed, power_for_pass_rate,
    simulate_classifier_outputs, CrowdModel, MachinePool, PoolConfig, SimulatedCrowd, WorldTruth,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "SR")]
    Sr,
    #[serde(rename = "HSR-NB")]
    HsrNb,
    #[serde(rename = "HSR-STACKED")]
    HsrStacked,
    #[serde(rename = "MACHINES-ONLY-NB")]
    MachinesOnlyNb,
    #[serde(rename = "MACHINES-ONLY-STACKED")]
    MachinesOnlyStacked,
    #[serde(rename = "BEST-SINGLE-CLASSIFIER")]
    BestSingleClassifier,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Sr,
        Strategy::HsrNb,
        Strategy::HsrStacked,
        Strategy::MachinesOnlyNb,
        Strategy::MachinesOnlyStacked,
        Strategy::BestSingleClassifier,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Sr => "SR",
            Strategy::HsrNb => "HSR-NB",
            Strategy::HsrStacked => "HSR-STACKED",
            Strategy::MachinesOnlyNb => "MACHINES-ONLY-NB",
            Strategy::MachinesOnlyStacked => "MACHINES-ONLY-STACKED",
            Strategy::BestSingleClassifier => "BEST-SINGLE-CLASSIFIER",
        }
    }

    /// Strategies that ask the crowd.
    pub fn uses_crowd(self) -> bool {
        matches!(self, Strategy::Sr | Strategy::HsrNb | Strategy::HsrStacked)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub n_items: usize,
    pub n_filters: usize,
    /// Target fraction of items passing every filter; sets equal powers.
    pub pass_rate: f64,
    /// Per-filter power, overriding `pass_rate`.
    pub powers: Option<Vec<f64>>,
    /// Per-filter difficulty, all zero when absent.
    pub difficulties: Option<Vec<f64>>,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_items: 1000,
            n_filters: 4,
            pass_rate: 0.3,
            powers: None,
            difficulties: None,
        }
    }
}

impl WorldConfig {
    pub fn filter_specs(&self) -> Result<Vec<FilterSpec>> {
        if self.n_filters == 0 || self.n_items == 0 {
            return Err(Error::Config("world needs at least one item and one filter".into()));
        }
        let check_len = |name: &str, v: &Option<Vec<f64>>| match v {
            Some(v) if v.len() != self.n_filters => Err(Error::Config(format!(
                "{name} has {} entries for {} filters",
                v.len(),
                self.n_filters
            ))),
            _ => Ok(()),
        };
        check_len("powers", &self.powers)?;
        check_len("difficulties", &self.difficulties)?;
        if !(self.pass_rate > 0.0 && self.pass_rate <= 1.0) {
            return Err(Error::Config("pass_rate must lie in (0, 1]".into()));
        }
        let base = power_for_pass_rate(self.pass_rate, self.n_filters);
        (0..self.n_filters)
            .map(|f| {
                let power = self.powers.as_ref().map_or(base, |p| p[f]);
                let difficulty = self.difficulties.as_ref().map_or(0.0, |d| d[f]);
                FilterSpec::new(f, power, difficulty)
            })
            .collect()
    }

    fn powers_mut(&mut self) -> &mut Vec<f64> {
        let base = power_for_pass_rate(self.pass_rate, self.n_filters);
        let n = self.n_filters;
        self.powers.get_or_insert_with(|| vec![base; n])
    }

    fn difficulties_mut(&mut self) -> &mut Vec<f64> {
        let n = self.n_filters;
        self.difficulties.get_or_insert_with(|| vec![0.0; n])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    Correlation,
    ExpertCost,
    LossK,
    FilterPower,
    FilterDifficulty,
    POutThreshold,
    GoldItems,
    ClassifierAccuracyLow,
    ClassifierAccuracyHigh,
    CrowdAccuracyLow,
    CrowdAccuracyHigh,
    GiveUpCostFactor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
    /// Filter targeted by the per-filter parameters.
    #[serde(default)]
    pub filter: usize,
}

impl Sweep {
    pub fn apply(&self, cfg: &mut ExperimentConfig, v: f64) -> Result<()> {
        if !v.is_finite() {
            return Err(Error::Config(format!("sweep value {v} is not finite")));
        }
        let per_filter = matches!(self.parameter, SweepParameter::FilterPower | SweepParameter::FilterDifficulty);
        if per_filter && self.filter >= cfg.world.n_filters {
            return Err(Error::Config(format!(
                "sweep targets filter {} but the world has {}",
                self.filter, cfg.world.n_filters
            )));
        }
        match self.parameter {
            SweepParameter::Correlation => cfg.pool.correlation = v,
            SweepParameter::ExpertCost => cfg.loss.expert_cost = v,
            SweepParameter::LossK => cfg.loss.k = v,
            SweepParameter::FilterPower => cfg.world.powers_mut()[self.filter] = v,
            SweepParameter::FilterDifficulty => cfg.world.difficulties_mut()[self.filter] = v,
            SweepParameter::POutThreshold => cfg.engine.p_out_threshold = v,
            SweepParameter::GoldItems => {
                if v < 0.0 || v.fract() != 0.0 {
                    return Err(Error::Config(format!("gold_items sweep value {v} is not a count")));
                }
                cfg.gold_items = v as usize;
            }
            SweepParameter::ClassifierAccuracyLow => cfg.pool.accuracy_low = v,
            SweepParameter::ClassifierAccuracyHigh => cfg.pool.accuracy_high = v,
            SweepParameter::CrowdAccuracyLow => cfg.crowd.accuracy_low = v,
            SweepParameter::CrowdAccuracyHigh => cfg.crowd.accuracy_high = v,
            SweepParameter::GiveUpCostFactor => cfg.engine.give_up_cost_factor = v,
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub crowd: CrowdModel,
    pub pool: PoolConfig,
    pub engine: EngineConfig,
    pub loss: LossParams,
    /// Items bought from experts to test the classifiers.
    pub gold_items: usize,
    pub selection_threshold: f64,
    pub stacker: StackerConfig,
    pub retrain_after: usize,
    /// Keep gold items out of the screened pool.
    pub exclude_gold_from_pool: bool,
    pub include_gold_cost: bool,
    pub strategies: Vec<Strategy>,
    pub repetitions: usize,
    pub seed: u64,
    pub sweep: Option<Sweep>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            world: WorldConfig::default(),
            crowd: CrowdModel::default(),
            pool: PoolConfig::default(),
            engine: EngineConfig::default(),
            loss: LossParams::default(),
            gold_items: 50,
            selection_threshold: 0.95,
            stacker: StackerConfig::default(),
            retrain_after: 50,
            exclude_gold_from_pool: true,
            include_gold_cost: false,
            strategies: Strategy::ALL.to_vec(),
            repetitions: 20,
            seed: 0,
            sweep: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sweep values, or a single point when there is no sweep.
    pub fn points(&self) -> Vec<Option<f64>> {
        match &self.sweep {
            Some(s) => s.values.iter().map(|&v| Some(v)).collect(),
            None => vec![None],
        }
    }

    /// The configuration at one sweep point.
    pub fn at(&self, point: Option<f64>) -> Result<ExperimentConfig> {
        let mut cfg = self.clone();
        if let (Some(s), Some(v)) = (&self.sweep, point) {
            s.apply(&mut cfg, v)?;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be at least 1".into()));
        }
        if self.strategies.is_empty() {
            return Err(Error::Config("no strategies selected".into()));
        }
        let mut seen = self.strategies.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.strategies.len() {
            return Err(Error::Config("strategies listed twice".into()));
        }
        if let Some(s) = &self.sweep {
            if s.values.is_empty() {
                return Err(Error::Config("sweep has no values".into()));
            }
        }
        for p in self.points() {
            self.at(p)?.validate_point()?;
        }
        Ok(())
    }

    fn validate_point(&self) -> Result<()> {
        self.world.filter_specs()?;
        self.crowd.validate()?;
        self.pool.validate()?;
        self.engine.validate()?;
        self.loss.validate()?;
        if !(self.selection_threshold > 0.0 && self.selection_threshold < 1.0) {
            return Err(Error::Config("selection_threshold must lie in (0, 1)".into()));
        }
        if self.gold_items >= self.world.n_items {
            return Err(Error::Config(format!(
                "gold_items ({}) must be smaller than n_items ({})",
                self.gold_items, self.world.n_items
            )));
        }
        if self.retrain_after == 0 {
            return Err(Error::Config("retrain_after must be positive".into()));
        }
        Ok(())
    }
}

/// Everything one repetition draws at one sweep point.
#[derive(Debug, Clone)]
pub struct Replicate {
    pub repetition: usize,
    pub seed: u64,
    pub world: WorldTruth,
    pub pool: MachinePool,
    pub gold: GoldSet,
    /// Items to screen, ascending.
    pub items: Vec<usize>,
    pub crowd_seed: u64,
    pub engine: EngineConfig,
}

impl Replicate {
    pub fn draw(cfg: &ExperimentConfig, repetition: usize) -> Result<Self> {
        let seed = mix_seed(cfg.seed, repetition as u64);
        let filters = cfg.world.filter_specs()?;
        let world = generate_world(cfg.world.n_items, &filters, mix_seed(seed, 1))?;
        let pool = simulate_classifier_outputs(&world, &cfg.pool, &mut ChaCha8Rng::seed_from_u64(mix_seed(seed, 2)))?;

        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 4));
        let mut gold_items: Vec<usize> =
            rand::seq::index::sample(&mut rng, world.n_items, cfg.gold_items).into_vec();
        gold_items.sort_unstable();
        let entries = gold_items
            .iter()
            .flat_map(|&i| {
                let world = &world;
                (0..world.n_filters()).map(move |f| GoldEntry {
                    item_id: i,
                    filter_id: f,
                    label: world.truth_label(i, f),
                })
            })
            .collect();
        let gold = GoldSet::new(entries, cfg.loss.expert_cost)?;

        let items: Vec<usize> = if cfg.exclude_gold_from_pool {
            (0..world.n_items).filter(|i| gold_items.binary_search(i).is_err()).collect()
        } else {
            (0..world.n_items).collect()
        };
        let mut engine = cfg.engine.clone();
        engine.seed = mix_seed(mix_seed(seed, 5), cfg.engine.seed);
        Ok(Replicate {
            repetition,
            seed,
            world,
            pool,
            gold,
            items,
            crowd_seed: mix_seed(seed, 3),
            engine,
        })
    }

    pub fn crowd<'w>(&'w self, cfg: &ExperimentConfig) -> Result<SimulatedCrowd<'w>> {
        SimulatedCrowd::new(&self.world, cfg.crowd, self.crowd_seed)
    }

    fn hsr_job(&self, cfg: &ExperimentConfig, mode: PriorMode) -> HsrJob {
        let mut job = HsrJob::new(self.engine.clone(), mode, self.gold.clone());
        job.selection_threshold = cfg.selection_threshold;
        job.stacker = cfg.stacker;
        job.retrain_after = cfg.retrain_after;
        job
    }

    /// Smoothed apply rate of each filter on the gold set.
    fn gold_power(&self) -> Vec<f64> {
        let nf = self.world.n_filters();
        let mut out = vec![0usize; nf];
        let mut n = vec![0usize; nf];
        for e in self.gold.entries() {
            n[e.filter_id] += 1;
            out[e.filter_id] += e.label.is_out() as usize;
        }
        (0..nf).map(|f| (out[f] as f64 + 1.0) / (n[f] as f64 + 2.0)).collect()
    }
}

/// Full result of one strategy on one replicate.
#[derive(Debug, Clone, Serialize)]
pub struct StrategyRun {
    pub strategy: Strategy,
    pub metrics: MetricsReport,
    pub decisions: Vec<Decision>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub screening: Option<ScreeningOutcome>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gating: Option<GateDiagnostics>,
}

impl StrategyRun {
    /// Every crowd vote the run asked for, in request order.
    pub fn votes(&self) -> &[VoteRecord] {
        self.screening.as_ref().map_or(&[], |s| &s.votes)
    }
}

type CrowdFactory<'a> = dyn Fn() -> Result<Box<dyn VoteSource + 'a>> + 'a;

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    rep: &'a Replicate,
    crowd: &'a CrowdFactory<'a>,
    hsr_nb: Option<HsrOutcome>,
}

impl Runner<'_> {
    fn hsr(&self, mode: PriorMode) -> Result<HsrOutcome> {
        let job = self.rep.hsr_job(self.cfg, mode);
        let mut crowd = (self.crowd)()?;
        hsr_classify(
            &self.rep.items,
            self.rep.world.n_filters(),
            &mut *crowd,
            &self.rep.pool,
            &job,
            &self.cfg.loss,
        )
    }

    fn hsr_nb(&mut self) -> Result<&HsrOutcome> {
        if self.hsr_nb.is_none() {
            self.hsr_nb = Some(self.hsr(PriorMode::NaiveBayes)?);
        }
        Ok(self.hsr_nb.as_ref().expect("just set"))
    }

    fn finish(&self, decisions: &[Decision], crowd_votes: u64, gold_cost: f64) -> Result<MetricsReport> {
        MetricsReport::evaluate(
            decisions,
            &self.rep.world,
            crowd_votes,
            gold_cost,
            &self.cfg.loss,
            self.cfg.include_gold_cost,
            self.rep.seed,
        )
    }

    fn crowd_run(&self, strategy: Strategy, screening: ScreeningOutcome, gating: Option<GateDiagnostics>) -> Result<StrategyRun> {
        let decisions = decisions_from_states(&screening.items);
        let metrics = self.finish(&decisions, screening.crowd_votes(), screening.ledger.gold_cost)?;
        Ok(StrategyRun {
            strategy,
            metrics,
            decisions,
            screening: Some(screening),
            gating,
        })
    }

    fn machine_run(&self, strategy: Strategy, out_probs: impl Fn(usize) -> Vec<f64>, gating: GateDiagnostics) -> Result<StrategyRun> {
        let threshold = self.rep.engine.p_out_threshold;
        let decisions: Vec<Decision> = self
            .rep
            .items
            .iter()
            .map(|&i| {
                let all_in: f64 = out_probs(i).iter().map(|p| 1.0 - p).product();
                Decision {
                    item_id: i,
                    label: if 1.0 - all_in > threshold { VoteLabel::Out } else { VoteLabel::In },
                }
            })
            .collect();
        let metrics = self.finish(&decisions, 0, self.rep.gold.acquisition_cost())?;
        Ok(StrategyRun {
            strategy,
            metrics,
            decisions,
            screening: None,
            gating: Some(gating),
        })
    }

    fn run(&mut self, strategy: Strategy) -> Result<StrategyRun> {
        let nf = self.rep.world.n_filters();
        match strategy {
            Strategy::Sr => {
                let mut crowd = (self.crowd)()?;
                let out = sr_classify(&self.rep.items, nf, &mut *crowd, &self.rep.engine, &self.cfg.loss)?;
                self.crowd_run(strategy, out, None)
            }
            Strategy::HsrNb => {
                let out = self.hsr_nb()?.clone();
                self.crowd_run(strategy, out.screening, Some(out.gating))
            }
            Strategy::HsrStacked => {
                let out = self.hsr(PriorMode::Stacked)?;
                self.crowd_run(strategy, out.screening, Some(out.gating))
            }
            Strategy::MachinesOnlyNb => {
                let (profiles, priors) = self.machine_priors()?;
                let gating = machine_gating(&profiles, &priors.column_provenance, nf);
                self.machine_run(strategy, |i| priors.row(i).expect("row").to_vec(), gating)
            }
            Strategy::MachinesOnlyStacked => {
                let (profiles, nb) = self.machine_priors()?;
                let model = self.stacker_from_hsr(&profiles)?;
                let priors = if model.per_filter.is_empty() {
                    nb
                } else {
                    let power = self.rep.gold_power();
                    build_priors(
                        PriorMode::Stacked,
                        &PriorInputs {
                            item_ids: &self.rep.items,
                            profiles: &profiles,
                            outputs: &self.rep.pool,
                            stacked: Some(&model),
                            power_estimates: &power,
                        },
                    )?
                };
                let gating = machine_gating(&profiles, &priors.column_provenance, nf);
                self.machine_run(strategy, |i| priors.row(i).expect("row").to_vec(), gating)
            }
            Strategy::BestSingleClassifier => {
                let (profiles, priors) = self.machine_priors()?;
                let power = self.rep.gold_power();
                let best: Vec<Option<(usize, f64)>> = (0..nf)
                    .map(|f| {
                        profiles
                            .iter()
                            .filter(|p| p.is_retained(f))
                            .map(|p| (p.classifier_id, p.accuracy(f)))
                            .fold(None, |acc: Option<(usize, f64)>, (c, a)| match acc {
                                Some((_, best)) if best >= a => acc,
                                _ => Some((c, a)),
                            })
                    })
                    .collect();
                let pool = &self.rep.pool;
                let probs = |i: usize| -> Vec<f64> {
                    (0..nf)
                        .map(|f| match best[f] {
                            Some((c, a)) => nb_ensemble_prob(&[pool.output(c, i, f)], &[a]).unwrap_or(0.5),
                            None => power[f],
                        })
                        .collect()
                };
                let gating = machine_gating(&profiles, &priors.column_provenance, nf);
                self.machine_run(strategy, probs, gating)
            }
        }
    }

    fn machine_priors(&self) -> Result<(Vec<ClassifierProfile>, PriorMatrix)> {
        let job = self.rep.hsr_job(self.cfg, PriorMode::NaiveBayes);
        gate_and_prior(&self.rep.items, &self.rep.pool, &job, &self.rep.gold_power())
    }

    /// Stacker trained on the gold labels plus the items HSR-NB decided in
    /// the same repetition.
    fn stacker_from_hsr(&mut self, profiles: &[ClassifierProfile]) -> Result<StackedModel> {
        let nf = self.rep.world.n_filters();
        let mut labels: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for s in &self.hsr_nb()?.screening.items {
            if matches!(s.status, ItemStatus::In | ItemStatus::Out) && !s.difficult {
                for f in 0..nf {
                    labels.insert((s.item_id, f), 1.0 - s.in_posteriors[f]);
                }
            }
        }
        for e in self.rep.gold.entries() {
            labels.insert((e.item_id, e.filter_id), if e.label.is_out() { 1.0 } else { 0.0 });
        }
        let mut model = StackedModel::default();
        for f in 0..nf {
            let classifiers: Vec<usize> = profiles
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
                .map(|(&(i, _), &y)| (classifiers.iter().map(|&c| self.rep.pool.output(c, i, f)).collect(), y))
                .collect();
            if let Ok(m) = train_stacker(&samples, &classifiers, f, &self.cfg.stacker) {
                model.training_size = model.training_size.max(samples.len());
                model.per_filter.insert(f, m);
            }
        }
        Ok(model)
    }
}

fn machine_gating(profiles: &[ClassifierProfile], columns: &[PriorMode], nf: usize) -> GateDiagnostics {
    let provenance = if columns.iter().any(|m| *m == PriorMode::Stacked) {
        PriorMode::Stacked
    } else if columns.iter().any(|m| *m == PriorMode::NaiveBayes) {
        PriorMode::NaiveBayes
    } else {
        PriorMode::PowerOnly
    };
    GateDiagnostics {
        profiles: profiles.to_vec(),
        retained_per_filter: (0..nf)
            .map(|f| profiles.iter().filter(|p| p.is_retained(f)).count())
            .collect(),
        provenance,
        column_provenance: columns.to_vec(),
        fell_back: provenance == PriorMode::PowerOnly,
    }
}

/// Runs `strategies` on one replicate against the simulated crowd.
pub fn run_replicate(cfg: &ExperimentConfig, rep: &Replicate, strategies: &[Strategy]) -> Vec<(Strategy, Result<StrategyRun>)> {
    let factory = || -> Result<Box<dyn VoteSource + '_>> { Ok(Box::new(rep.crowd(cfg)?)) };
    run_with(cfg, rep, strategies, &factory)
}

/// Runs `strategies` on one replicate, answering crowd questions from a
/// recorded vote log.
pub fn replay_replicate(
    cfg: &ExperimentConfig,
    rep: &Replicate,
    strategies: &[Strategy],
    votes: &[VoteRecord],
) -> Vec<(Strategy, Result<StrategyRun>)> {
    let factory = || -> Result<Box<dyn VoteSource + '_>> { Ok(Box::new(ReplaySource::new(votes.iter().copied()))) };
    run_with(cfg, rep, strategies, &factory)
}

fn run_with<'a>(
    cfg: &'a ExperimentConfig,
    rep: &'a Replicate,
    strategies: &[Strategy],
    crowd: &'a CrowdFactory<'a>,
) -> Vec<(Strategy, Result<StrategyRun>)> {
    let mut runner = Runner {
        cfg,
        rep,
        crowd,
        hsr_nb: None,
    };
    strategies.iter().map(|&s| (s, runner.run(s))).collect()
}

/// Outcome of one (sweep point, repetition, strategy) cell.
#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub sweep_value: Option<f64>,
    pub repetition: usize,
    pub strategy: Strategy,
    pub metrics: Option<MetricsReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateRow {
    pub sweep_value: Option<f64>,
    /// Strategy name, or `POOL` for classifier-pool diagnostics.
    pub strategy: String,
    pub metric: String,
    pub mean: f64,
    /// Population standard deviation over repetitions.
    pub std: f64,
    pub n_ok: usize,
    pub n_failed: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub rows: Vec<AggregateRow>,
    pub runs: Vec<RunRecord>,
}

pub const POOL_ROW: &str = "POOL";

impl ExperimentReport {
    pub fn row(&self, sweep_value: Option<f64>, strategy: &str, metric: &str) -> Option<&AggregateRow> {
        self.rows
            .iter()
            .find(|r| r.sweep_value == sweep_value && r.strategy == strategy && r.metric == metric)
    }

    pub fn mean(&self, sweep_value: Option<f64>, strategy: Strategy, metric: &str) -> Option<f64> {
        self.row(sweep_value, strategy.name(), metric).map(|r| r.mean)
    }

    /// Per-repetition values of one metric, in repetition order.
    pub fn samples(&self, sweep_value: Option<f64>, strategy: Strategy, metric: &str) -> Vec<f64> {
        self.runs
            .iter()
            .filter(|r| r.sweep_value == sweep_value && r.strategy == strategy)
            .filter_map(|r| r.metrics.as_ref())
            .filter_map(|m| m.named().iter().find(|(n, _)| *n == metric).map(|(_, v)| *v))
            .collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::Config(format!("csv output: {e}"));
        w.write_record(["sweep_value", "strategy", "metric", "mean", "std", "n_ok", "n_failed"])
            .map_err(io)?;
        for r in &self.rows {
            w.write_record([
                r.sweep_value.map(|v| v.to_string()).unwrap_or_default(),
                r.strategy.clone(),
                r.metric.clone(),
                r.mean.to_string(),
                r.std.to_string(),
                r.n_ok.to_string(),
                r.n_failed.to_string(),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| Error::Config(format!("csv output: {e}")))?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

struct Cell {
    point: Option<f64>,
    repetition: usize,
    runs: Vec<(Strategy, Result<StrategyRun>)>,
    realized_correlation: Option<f64>,
    setup_error: Option<String>,
}

fn run_cell(cfg: &ExperimentConfig, point: Option<f64>, repetition: usize) -> Cell {
    let drawn = cfg
        .at(point)
        .and_then(|c| Replicate::draw(&c, repetition).map(|r| (c, r)));
    match drawn {
        Ok((c, rep)) => {
            let realized = mean_off_diagonal(&measure_realized_correlation(&rep.pool, &rep.world));
            Cell {
                point,
                repetition,
                runs: run_replicate(&c, &rep, &c.strategies),
                realized_correlation: realized,
                setup_error: None,
            }
        }
        Err(e) => Cell {
            point,
            repetition,
            runs: Vec::new(),
            realized_correlation: None,
            setup_error: Some(e.to_string()),
        },
    }
}

/// Runs every sweep point and repetition, `jobs` at a time (0 means one per
/// available core).
pub fn run_experiment(cfg: &ExperimentConfig, jobs: usize) -> Result<ExperimentReport> {
    cfg.validate()?;
    let tasks: Vec<(Option<f64>, usize)> = cfg
        .points()
        .into_iter()
        .flat_map(|p| (0..cfg.repetitions).map(move |r| (p, r)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let cells: Vec<Cell> = pool.install(|| tasks.par_iter().map(|&(p, r)| run_cell(cfg, p, r)).collect());

    let mut runs = Vec::new();
    for cell in &cells {
        for &s in &cfg.strategies {
            let found = cell.runs.iter().find(|(x, _)| *x == s).map(|(_, r)| r);
            let (metrics, error) = match (found, &cell.setup_error) {
                (Some(Ok(run)), _) => (Some(run.metrics.clone()), None),
                (Some(Err(e)), _) => (None, Some(e.to_string())),
                (None, Some(e)) => (None, Some(e.clone())),
                (None, None) => (None, Some("strategy not run".into())),
            };
            runs.push(RunRecord {
                sweep_value: cell.point,
                repetition: cell.repetition,
                strategy: s,
                metrics,
                error,
            });
        }
    }

    let mut rows = Vec::new();
    for point in cfg.points() {
        for &s in &cfg.strategies {
            let recs: Vec<&RunRecord> = runs
                .iter()
                .filter(|r| r.sweep_value == point && r.strategy == s)
                .collect();
            let ok: Vec<&MetricsReport> = recs.iter().filter_map(|r| r.metrics.as_ref()).collect();
            let n_failed = recs.len() - ok.len();
            for (k, name) in METRIC_NAMES.iter().enumerate() {
                let values: Vec<f64> = ok.iter().map(|m| m.named()[k].1).collect();
                let (mean, std) = mean_std(&values);
                rows.push(AggregateRow {
                    sweep_value: point,
                    strategy: s.name().to_string(),
                    metric: name.to_string(),
                    mean,
                    std,
                    n_ok: ok.len(),
                    n_failed,
                });
            }
        }
        let corr: Vec<&Cell> = cells.iter().filter(|c| c.point == point).collect();
        let values: Vec<f64> = corr.iter().filter_map(|c| c.realized_correlation).collect();
        let (mean, std) = mean_std(&values);
        rows.push(AggregateRow {
            sweep_value: point,
            strategy: POOL_ROW.to_string(),
            metric: "realized_correlation".to_string(),
            mean,
            std,
            n_ok: values.len(),
            n_failed: corr.len() - values.len(),
        });
    }
    Ok(ExperimentReport { rows, runs })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            world: WorldConfig {
                n_items: 300,
                ..WorldConfig::default()
            },
            repetitions: 2,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn zero_repetitions_rejected() {
        let cfg = ExperimentConfig {
            repetitions: 0,
            ..small()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"repetitions": 2, "bogus": 1}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"engine": {"n_maxx": 3}}"#).is_err());
        let cfg = ExperimentConfig::from_json(r#"{"engine": {"n_max": 7}, "pool": {"correlation": 0.5}}"#).unwrap();
        assert_eq!(cfg.engine.n_max, 7);
        assert_eq!(cfg.engine.p_out_threshold, 0.99);
        assert_eq!(cfg.pool.correlation, 0.5);
        assert_eq!(cfg.pool.n_classifiers, 10);
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
            let json = serde_json::to_string(&s).unwrap();
            assert_eq!(json, format!("\"{}\"", s.name()));
        }
    }

    #[test]
    fn sweep_applies_per_filter() {
        let mut cfg = small();
        let sweep = Sweep {
            parameter: SweepParameter::FilterPower,
            values: vec![0.8],
            filter: 1,
        };
        sweep.apply(&mut cfg, 0.8).unwrap();
        let specs = cfg.world.filter_specs().unwrap();
        assert_eq!(specs[1].power, 0.8);
        assert!((specs[0].power - power_for_pass_rate(0.3, 4)).abs() < 1e-15);
        let bad = Sweep { filter: 9, ..sweep };
        assert!(bad.apply(&mut cfg, 0.5).is_err());
    }

    #[test]
    fn replicate_is_deterministic_and_disjoint_from_gold() {
        let cfg = small();
        let a = Replicate::draw(&cfg, 3).unwrap();
        let b = Replicate::draw(&cfg, 3).unwrap();
        assert_eq!(a.world, b.world);
        assert_eq!(a.pool, b.pool);
        assert_eq!(a.items, b.items);
        assert_eq!(a.items.len(), 250);
        for i in a.gold.items() {
            assert!(a.items.binary_search(&i).is_err());
        }
        assert_ne!(Replicate::draw(&cfg, 4).unwrap().world, a.world);
    }

    #[test]
    fn population_std() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
    }
}

//! Seeded synthetic worlds: ground truth, simulated crowd votes and correlated
//! machine-classifier outputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::VoteRecord;
use crate::engine::VoteSource;
use crate::ensemble::MachineOutputs;
use crate::error::{check_unit, Error, Result};
use crate::prob::{skew_accuracy, FilterSpec, VoteLabel};

/// SplitMix64 finaliser, used to derive independent stream seeds.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Equal per-filter power giving the requested fraction of passing items.
pub fn power_for_pass_rate(pass_rate: f64, n_filters: usize) -> f64 {
    1.0 - pass_rate.powf(1.0 / n_filters as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldTruth {
    pub n_items: usize,
    pub filters: Vec<FilterSpec>,
    /// Item-major: `truth[item * n_filters + filter]`, true when the filter applies.
    truth: Vec<bool>,
    pub seed: u64,
}

impl WorldTruth {
    pub fn from_truth(filters: Vec<FilterSpec>, truth: Vec<bool>, seed: u64) -> Result<Self> {
        let nf = filters.len();
        if nf == 0 || truth.len() % nf != 0 {
            return Err(Error::Config(format!(
                "{} truth cells do not fit {nf} filters",
                truth.len()
            )));
        }
        Ok(WorldTruth {
            n_items: truth.len() / nf,
            filters,
            truth,
            seed,
        })
    }

    pub fn n_filters(&self) -> usize {
        self.filters.len()
    }

    pub fn applies(&self, item: usize, filter: usize) -> bool {
        self.truth[item * self.filters.len() + filter]
    }

    pub fn truth_label(&self, item: usize, filter: usize) -> VoteLabel {
        VoteLabel::from_applies(self.applies(item, filter))
    }

    /// True when no filter applies.
    pub fn passes(&self, item: usize) -> bool {
        let nf = self.filters.len();
        !self.truth[item * nf..(item + 1) * nf].iter().any(|&b| b)
    }

    pub fn apply_rate(&self, filter: usize) -> f64 {
        let hits = (0..self.n_items).filter(|&i| self.applies(i, filter)).count();
        hits as f64 / self.n_items.max(1) as f64
    }

    pub fn pass_rate(&self) -> f64 {
        let hits = (0..self.n_items).filter(|&i| self.passes(i)).count();
        hits as f64 / self.n_items.max(1) as f64
    }
}

/// Independent Bernoulli(power) truth for every (item, filter).
pub fn generate_world(n_items: usize, filters: &[FilterSpec], seed: u64) -> Result<WorldTruth> {
    if filters.is_empty() {
        return Err(Error::Empty("filters"));
    }
    for f in filters {
        f.validate()?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut truth = Vec::with_capacity(n_items * filters.len());
    for _ in 0..n_items {
        for f in filters {
            truth.push(rng.random::<f64>() < f.power);
        }
    }
    Ok(WorldTruth {
        n_items,
        filters: filters.to_vec(),
        truth,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrowdModel {
    pub accuracy_low: f64,
    pub accuracy_high: f64,
}

impl Default for CrowdModel {
    fn default() -> Self {
        CrowdModel {
            accuracy_low: 0.55,
            accuracy_high: 0.8,
        }
    }
}

impl CrowdModel {
    pub fn validate(&self) -> Result<()> {
        if !(0.5..=1.0).contains(&self.accuracy_low) || !(0.5..=1.0).contains(&self.accuracy_high) {
            return Err(Error::Config("crowd accuracies must lie in [0.5, 1]".into()));
        }
        if self.accuracy_low > self.accuracy_high {
            return Err(Error::Config("crowd accuracy_low exceeds accuracy_high".into()));
        }
        Ok(())
    }

    pub fn mean_accuracy(&self) -> f64 {
        0.5 * (self.accuracy_low + self.accuracy_high)
    }
}

fn uniform_in<R: Rng + ?Sized>(rng: &mut R, low: f64, high: f64) -> f64 {
    if high > low {
        rng.random_range(low..high)
    } else {
        low
    }
}

/// One vote from a fresh worker whose accuracy is drawn from the crowd model
/// and skewed by the filter's difficulty.
pub fn simulate_crowd_vote<R: Rng + ?Sized>(
    item_id: usize,
    filter_id: usize,
    world: &WorldTruth,
    crowd: &CrowdModel,
    worker_id: u64,
    rng: &mut R,
) -> VoteRecord {
    let base = uniform_in(rng, crowd.accuracy_low, crowd.accuracy_high);
    let accuracy = skew_accuracy(base, world.filters[filter_id].difficulty)
        .expect("crowd model validated to [0.5, 1]");
    let truth = world.truth_label(item_id, filter_id);
    let label = if rng.random::<f64>() < accuracy {
        truth
    } else {
        truth.flipped()
    };
    VoteRecord {
        item_id,
        filter_id,
        worker_id,
        label,
    }
}

/// Crowd vote source over a simulated world.
///
/// The k-th vote on a given (item, filter) depends only on the seed and k, so
/// two engines that ask the same questions see the same answers regardless of
/// the order they ask them in.
#[derive(Debug, Clone)]
pub struct SimulatedCrowd<'w> {
    world: &'w WorldTruth,
    model: CrowdModel,
    seed: u64,
    asked: Vec<u32>,
    issued: u64,
    log: Vec<VoteRecord>,
}

impl<'w> SimulatedCrowd<'w> {
    pub fn new(world: &'w WorldTruth, model: CrowdModel, seed: u64) -> Result<Self> {
        model.validate()?;
        Ok(SimulatedCrowd {
            world,
            model,
            seed,
            asked: vec![0; world.n_items * world.n_filters()],
            issued: 0,
            log: Vec::new(),
        })
    }

    pub fn log(&self) -> &[VoteRecord] {
        &self.log
    }

    pub fn into_log(self) -> Vec<VoteRecord> {
        self.log
    }
}

impl VoteSource for SimulatedCrowd<'_> {
    fn vote(&mut self, item_id: usize, filter_id: usize) -> Result<VoteRecord> {
        let nf = self.world.n_filters();
        if item_id >= self.world.n_items || filter_id >= nf {
            return Err(Error::Config(format!(
                "no such pair: item {item_id}, filter {filter_id}"
            )));
        }
        let slot = &mut self.asked[item_id * nf + filter_id];
        let k = *slot as u64;
        *slot += 1;
        let pair = (item_id * nf + filter_id) as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(self.seed, pair), k));
        let v = simulate_crowd_vote(item_id, filter_id, self.world, &self.model, self.issued, &mut rng);
        self.issued += 1;
        self.log.push(v);
        Ok(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolConfig {
    pub n_classifiers: usize,
    pub accuracy_low: f64,
    pub accuracy_high: f64,
    /// Mixing weight of the shared error draw, in [0, 1].
    pub correlation: f64,
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig {
            n_classifiers: 10,
            accuracy_low: 0.5,
            accuracy_high: 0.95,
            correlation: 0.0,
        }
    }
}

impl PoolConfig {
    pub fn validate(&self) -> Result<()> {
        check_unit("classifier accuracy_low", self.accuracy_low)?;
        check_unit("classifier accuracy_high", self.accuracy_high)?;
        check_unit("correlation", self.correlation)?;
        if self.accuracy_low > self.accuracy_high {
            return Err(Error::Config("classifier accuracy_low exceeds accuracy_high".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachinePool {
    pub accuracies: Vec<f64>,
    pub correlation: f64,
    n_items: usize,
    n_filters: usize,
    /// `outputs[(c * n_items + item) * n_filters + filter]`
    outputs: Vec<VoteLabel>,
}

impl MachinePool {
    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn n_filters(&self) -> usize {
        self.n_filters
    }

    fn idx(&self, c: usize, item: usize, filter: usize) -> usize {
        (c * self.n_items + item) * self.n_filters + filter
    }

    pub fn output(&self, c: usize, item: usize, filter: usize) -> VoteLabel {
        self.outputs[self.idx(c, item, filter)]
    }

    pub fn empirical_accuracy(&self, c: usize, world: &WorldTruth) -> f64 {
        let mut right = 0usize;
        for i in 0..self.n_items {
            for f in 0..self.n_filters {
                if self.output(c, i, f) == world.truth_label(i, f) {
                    right += 1;
                }
            }
        }
        right as f64 / (self.n_items * self.n_filters).max(1) as f64
    }

    pub fn from_outputs(
        accuracies: Vec<f64>,
        correlation: f64,
        n_items: usize,
        n_filters: usize,
        outputs: Vec<VoteLabel>,
    ) -> Result<Self> {
        if outputs.len() != accuracies.len() * n_items * n_filters {
            return Err(Error::Coverage(format!(
                "{} outputs for {} classifiers x {n_items} items x {n_filters} filters",
                outputs.len(),
                accuracies.len()
            )));
        }
        Ok(MachinePool {
            accuracies,
            correlation,
            n_items,
            n_filters,
            outputs,
        })
    }
}

impl MachineOutputs for MachinePool {
    fn n_classifiers(&self) -> usize {
        self.accuracies.len()
    }

    fn label(&self, classifier: usize, item: usize, filter: usize) -> Option<VoteLabel> {
        (classifier < self.accuracies.len() && item < self.n_items && filter < self.n_filters)
            .then(|| self.output(classifier, item, filter))
    }
}

/// Simulates classifier outputs with coupled errors.
///
/// Each classifier c gets an accuracy a_c ~ U[low, high]. Per (item, filter)
/// one shared uniform U is drawn; classifier c errs with `U < 1 - a_c` with
/// probability `correlation`, otherwise on its own independent uniform. Both
/// branches err with probability exactly 1 - a_c, so marginal accuracy does
/// not depend on the correlation knob. All uniforms are drawn regardless of
/// the branch taken, so pools that differ only in the knob share every draw.
pub fn simulate_classifier_outputs<R: Rng + ?Sized>(
    world: &WorldTruth,
    config: &PoolConfig,
    rng: &mut R,
) -> Result<MachinePool> {
    config.validate()?;
    let accuracies: Vec<f64> = (0..config.n_classifiers)
        .map(|_| uniform_in(rng, config.accuracy_low, config.accuracy_high))
        .collect();
    let (n_items, n_filters) = (world.n_items, world.n_filters());
    let mut pool = MachinePool {
        accuracies,
        correlation: config.correlation,
        n_items,
        n_filters,
        outputs: vec![VoteLabel::In; config.n_classifiers * n_items * n_filters],
    };
    for i in 0..n_items {
        for f in 0..n_filters {
            let shared: f64 = rng.random();
            let truth = world.truth_label(i, f);
            for c in 0..config.n_classifiers {
                let pick_shared = rng.random::<f64>() < config.correlation;
                let own: f64 = rng.random();
                let u = if pick_shared { shared } else { own };
                let err = u < 1.0 - pool.accuracies[c];
                let idx = pool.idx(c, i, f);
                pool.outputs[idx] = if err { truth.flipped() } else { truth };
            }
        }
    }
    Ok(pool)
}

/// P(both err | at least one errs) for every classifier pair; `None` when
/// neither classifier of a pair ever errs. The diagonal is 1.
pub fn measure_realized_correlation(pool: &MachinePool, world: &WorldTruth) -> Vec<Vec<Option<f64>>> {
    let n = pool.accuracies.len();
    let errs: Vec<Vec<bool>> = (0..n)
        .map(|c| {
            (0..pool.n_items)
                .flat_map(|i| (0..pool.n_filters).map(move |f| (i, f)))
                .map(|(i, f)| pool.output(c, i, f) != world.truth_label(i, f))
                .collect()
        })
        .collect();
    let mut m = vec![vec![None; n]; n];
    for j in 0..n {
        m[j][j] = Some(1.0);
        for k in j + 1..n {
            let (mut both, mut either) = (0usize, 0usize);
            for (a, b) in errs[j].iter().zip(&errs[k]) {
                both += (*a && *b) as usize;
                either += (*a || *b) as usize;
            }
            let v = (either > 0).then(|| both as f64 / either as f64);
            m[j][k] = v;
            m[k][j] = v;
        }
    }
    m
}

/// Mean of the defined off-diagonal entries.
pub fn mean_off_diagonal(m: &[Vec<Option<f64>>]) -> Option<f64> {
    let vals: Vec<f64> = m
        .iter()
        .enumerate()
        .flat_map(|(j, row)| row.iter().enumerate().filter(move |(k, _)| *k > j).filter_map(|(_, v)| *v))
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn filters(powers: &[f64]) -> Vec<FilterSpec> {
        powers
            .iter()
            .enumerate()
            .map(|(id, &p)| FilterSpec::new(id, p, 0.0).unwrap())
            .collect()
    }

    #[test]
    fn world_extremes() {
        let w = generate_world(200, &filters(&[0.0, 0.0, 0.0]), 1).unwrap();
        assert_eq!(w.pass_rate(), 1.0);
        let w = generate_world(200, &filters(&[0.2, 1.0]), 1).unwrap();
        assert_eq!(w.pass_rate(), 0.0);
    }

    #[test]
    fn pass_rate_calibration() {
        let theta = power_for_pass_rate(0.3, 4);
        assert!((theta - 0.259_917_195_507_714_75).abs() < 1e-12);
        assert!(((1.0f64 - 0.14).powi(4) - 0.547).abs() < 1e-3);
    }

    #[test]
    fn world_is_seeded() {
        let fs = filters(&[0.3, 0.2]);
        assert_eq!(generate_world(100, &fs, 9).unwrap(), generate_world(100, &fs, 9).unwrap());
        assert_ne!(generate_world(100, &fs, 9).unwrap(), generate_world(100, &fs, 10).unwrap());
    }

    #[test]
    fn perfect_crowd_reports_truth() {
        let w = generate_world(50, &filters(&[0.4, 0.6]), 3).unwrap();
        let mut crowd = SimulatedCrowd::new(&w, CrowdModel { accuracy_low: 1.0, accuracy_high: 1.0 }, 5).unwrap();
        for i in 0..50 {
            for f in 0..2 {
                assert_eq!(crowd.vote(i, f).unwrap().label, w.truth_label(i, f));
            }
        }
    }

    #[test]
    fn crowd_votes_are_order_independent() {
        let w = generate_world(10, &filters(&[0.4, 0.6]), 3).unwrap();
        let model = CrowdModel::default();
        let mut a = SimulatedCrowd::new(&w, model, 5).unwrap();
        let mut b = SimulatedCrowd::new(&w, model, 5).unwrap();
        let first: Vec<_> = (0..3).map(|_| a.vote(4, 1).unwrap().label).collect();
        b.vote(2, 0).unwrap();
        let second: Vec<_> = (0..3).map(|_| b.vote(4, 1).unwrap().label).collect();
        assert_eq!(first, second);
    }

    #[test]
    fn identical_classifiers_at_full_correlation() {
        let w = generate_world(300, &filters(&[0.3, 0.3]), 4).unwrap();
        let cfg = PoolConfig {
            n_classifiers: 4,
            accuracy_low: 0.8,
            accuracy_high: 0.8,
            correlation: 1.0,
        };
        let pool = simulate_classifier_outputs(&w, &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        for i in 0..300 {
            for f in 0..2 {
                let l = pool.output(0, i, f);
                assert!((1..4).all(|c| pool.output(c, i, f) == l));
            }
        }
        let m = measure_realized_correlation(&pool, &w);
        assert_eq!(m[0][1], Some(1.0));
    }

    #[test]
    fn perfect_classifier_row() {
        let w = generate_world(300, &filters(&[0.3]), 4).unwrap();
        let cfg = PoolConfig {
            n_classifiers: 1,
            accuracy_low: 1.0,
            accuracy_high: 1.0,
            correlation: 0.0,
        };
        let mut pool = simulate_classifier_outputs(&w, &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        // append a noisy second classifier by hand
        let noisy: Vec<VoteLabel> = (0..300)
            .map(|i| if i % 4 == 0 { w.truth_label(i, 0).flipped() } else { w.truth_label(i, 0) })
            .collect();
        let mut outputs = pool.outputs.clone();
        outputs.extend(noisy);
        pool = MachinePool::from_outputs(vec![1.0, 0.75], 0.0, 300, 1, outputs).unwrap();
        let m = measure_realized_correlation(&pool, &w);
        assert_eq!(m[0][0], Some(1.0));
        assert_eq!(m[0][1], Some(0.0));
    }

    #[test]
    fn never_erring_pair_is_undefined() {
        let w = generate_world(20, &filters(&[0.5]), 1).unwrap();
        let cfg = PoolConfig {
            n_classifiers: 2,
            accuracy_low: 1.0,
            accuracy_high: 1.0,
            correlation: 0.3,
        };
        let pool = simulate_classifier_outputs(&w, &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let m = measure_realized_correlation(&pool, &w);
        assert_eq!(m[0][1], None);
        assert_eq!(mean_off_diagonal(&m), None);
    }
}

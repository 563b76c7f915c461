//! Turning retained classifiers into per-(item, filter) priors: naive-Bayes
//! pooling, a stacked logistic model, or the flat per-filter power.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gate::ClassifierProfile;
use crate::prob::{logit, sigmoid, VoteLabel};

/// Read access to machine classifier outputs.
pub trait MachineOutputs {
    fn n_classifiers(&self) -> usize;
    fn label(&self, classifier: usize, item: usize, filter: usize) -> Option<VoteLabel>;
}

/// Sparse output table, e.g. loaded from CSV.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OutputTable {
    labels: BTreeMap<(usize, usize, usize), VoteLabel>,
    n_classifiers: usize,
}

impl OutputTable {
    pub fn insert(&mut self, classifier: usize, item: usize, filter: usize, label: VoteLabel) -> Option<VoteLabel> {
        self.n_classifiers = self.n_classifiers.max(classifier + 1);
        self.labels.insert((classifier, item, filter), label)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(usize, usize, usize), &VoteLabel)> {
        self.labels.iter()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

impl MachineOutputs for OutputTable {
    fn n_classifiers(&self) -> usize {
        self.n_classifiers
    }

    fn label(&self, classifier: usize, item: usize, filter: usize) -> Option<VoteLabel> {
        self.labels.get(&(classifier, item, filter)).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PriorMode {
    NaiveBayes,
    Stacked,
    PowerOnly,
}

/// p^mc(i, f): probability that filter f applies to item i, before any crowd
/// vote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorMatrix {
    item_ids: Vec<usize>,
    n_filters: usize,
    values: Vec<f64>,
    pub provenance: PriorMode,
    pub column_provenance: Vec<PriorMode>,
    #[serde(skip)]
    index: HashMap<usize, usize>,
}

impl PriorMatrix {
    fn new(item_ids: &[usize], n_filters: usize, provenance: PriorMode) -> Self {
        PriorMatrix {
            item_ids: item_ids.to_vec(),
            n_filters,
            values: vec![0.0; item_ids.len() * n_filters],
            provenance,
            column_provenance: vec![provenance; n_filters],
            index: item_ids.iter().enumerate().map(|(row, &id)| (id, row)).collect(),
        }
    }

    pub fn constant(item_ids: &[usize], powers: &[f64]) -> Self {
        let mut m = PriorMatrix::new(item_ids, powers.len(), PriorMode::PowerOnly);
        for row in m.values.chunks_mut(powers.len().max(1)) {
            row.copy_from_slice(powers);
        }
        m
    }

    pub fn item_ids(&self) -> &[usize] {
        &self.item_ids
    }

    pub fn n_filters(&self) -> usize {
        self.n_filters
    }

    pub fn get(&self, item_id: usize, filter_id: usize) -> Option<f64> {
        let row = *self.index.get(&item_id)?;
        self.values.get(row * self.n_filters + filter_id).copied()
    }

    pub fn row(&self, item_id: usize) -> Option<&[f64]> {
        let row = *self.index.get(&item_id)?;
        Some(&self.values[row * self.n_filters..(row + 1) * self.n_filters])
    }

    fn set(&mut self, row: usize, filter: usize, value: f64) {
        self.values[row * self.n_filters + filter] = value;
    }

    /// Per-filter mean over all items.
    pub fn column_means(&self) -> Vec<f64> {
        let n = self.item_ids.len().max(1) as f64;
        (0..self.n_filters)
            .map(|f| self.values.iter().skip(f).step_by(self.n_filters).sum::<f64>() / n)
            .collect()
    }

    pub fn map_values(&mut self, f: impl Fn(f64) -> f64) {
        for v in &mut self.values {
            *v = f(*v);
        }
    }
}

/// Probability that the filter applies given independent classifier labels,
/// each weighted by its accuracy.
pub fn nb_ensemble_prob(labels: &[VoteLabel], accuracies: &[f64]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Empty("labels"));
    }
    if labels.len() != accuracies.len() {
        return Err(Error::Config(format!(
            "{} labels but {} accuracies",
            labels.len(),
            accuracies.len()
        )));
    }
    let mut log_odds = 0.0;
    for (&l, &a) in labels.iter().zip(accuracies) {
        if !(0.0..=1.0).contains(&a) {
            return Err(Error::Domain {
                name: "accuracy",
                value: a,
                domain: "(0, 1)",
            });
        }
        let w = logit(a);
        log_odds += if l.is_out() { w } else { -w };
    }
    if log_odds.is_nan() {
        return Err(Error::DegenerateEvidence(
            "classifiers with accuracy 0 or 1 disagree".into(),
        ));
    }
    Ok(sigmoid(log_odds))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StackerConfig {
    pub l2: f64,
    pub min_training: usize,
    pub max_steps: usize,
    pub grad_tol: f64,
}

impl Default for StackerConfig {
    fn default() -> Self {
        StackerConfig {
            l2: 1e-3,
            min_training: 100,
            max_steps: 10_000,
            grad_tol: 1e-6,
        }
    }
}

/// Logistic model over binary classifier labels for one filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub bias: f64,
    pub weights: Vec<f64>,
    /// Classifier ids, in feature order.
    pub classifiers: Vec<usize>,
    pub loss_trace: Vec<f64>,
}

impl LogisticModel {
    pub fn predict(&self, features: &[VoteLabel]) -> f64 {
        let z = self.bias
            + self
                .weights
                .iter()
                .zip(features)
                .map(|(w, l)| if l.is_out() { *w } else { 0.0 })
                .sum::<f64>();
        sigmoid(z)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StackedModel {
    pub per_filter: BTreeMap<usize, LogisticModel>,
    pub training_size: usize,
}

struct Pattern {
    x: Vec<f64>,
    count: f64,
    mean_label: f64,
}

fn cross_entropy(y: f64, z: f64) -> f64 {
    // -y ln σ(z) - (1-y) ln(1-σ(z)), stable in z
    let softplus = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
    softplus - y * z
}

fn objective(patterns: &[Pattern], n: f64, bias: f64, w: &[f64], l2: f64) -> f64 {
    let data: f64 = patterns
        .iter()
        .map(|p| {
            let z = bias + p.x.iter().zip(w).map(|(x, w)| x * w).sum::<f64>();
            p.count * cross_entropy(p.mean_label, z)
        })
        .sum();
    data / n + 0.5 * l2 * w.iter().map(|w| w * w).sum::<f64>()
}

fn gradient(patterns: &[Pattern], n: f64, bias: f64, w: &[f64], l2: f64) -> (f64, Vec<f64>) {
    let mut gb = 0.0;
    let mut gw: Vec<f64> = w.iter().map(|w| l2 * w).collect();
    for p in patterns {
        let z = bias + p.x.iter().zip(w).map(|(x, w)| x * w).sum::<f64>();
        let r = p.count * (sigmoid(z) - p.mean_label) / n;
        gb += r;
        for (g, x) in gw.iter_mut().zip(&p.x) {
            *g += r * x;
        }
    }
    (gb, gw)
}

/// Fits an L2-regularised logistic model of the (soft) label on the classifier
/// labels, by gradient descent with backtracking.
///
/// `samples` holds one entry per training (item, filter) pair: the retained
/// classifiers' labels in `classifiers` order, and the probability that the
/// filter applies.
pub fn train_stacker(
    samples: &[(Vec<VoteLabel>, f64)],
    classifiers: &[usize],
    filter_id: usize,
    config: &StackerConfig,
) -> Result<LogisticModel> {
    let need = config.min_training.max(2);
    if samples.len() < need {
        return Err(Error::InsufficientData {
            filter: filter_id,
            have: samples.len(),
            need,
        });
    }
    let d = classifiers.len();
    let mut grouped: BTreeMap<Vec<bool>, (f64, f64)> = BTreeMap::new();
    for (features, y) in samples {
        if features.len() != d {
            return Err(Error::Config(format!(
                "feature vector of length {} for {d} classifiers",
                features.len()
            )));
        }
        if !(0.0..=1.0).contains(y) {
            return Err(Error::Domain {
                name: "training label",
                value: *y,
                domain: "[0, 1]",
            });
        }
        let key: Vec<bool> = features.iter().map(|l| l.is_out()).collect();
        let e = grouped.entry(key).or_insert((0.0, 0.0));
        e.0 += 1.0;
        e.1 += y;
    }
    let patterns: Vec<Pattern> = grouped
        .into_iter()
        .map(|(k, (count, sum))| Pattern {
            x: k.into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect(),
            count,
            mean_label: sum / count,
        })
        .collect();
    let n = samples.len() as f64;

    let mut bias = 0.0;
    let mut w = vec![0.0; d];
    let mut loss = objective(&patterns, n, bias, &w, config.l2);
    let mut loss_trace = vec![loss];
    let mut step = 1.0;
    for _ in 0..config.max_steps {
        let (gb, gw) = gradient(&patterns, n, bias, &w, config.l2);
        let norm2 = gb * gb + gw.iter().map(|g| g * g).sum::<f64>();
        if norm2.sqrt() < config.grad_tol {
            break;
        }
        step *= 2.0;
        loop {
            let nb = bias - step * gb;
            let nw: Vec<f64> = w.iter().zip(&gw).map(|(w, g)| w - step * g).collect();
            let nl = objective(&patterns, n, nb, &nw, config.l2);
            if nl <= loss - 0.5 * step * norm2 {
                bias = nb;
                w = nw;
                loss = nl;
                break;
            }
            step *= 0.5;
            if step < 1e-12 {
                break;
            }
        }
        loss_trace.push(loss);
        if step < 1e-12 {
            break;
        }
    }
    Ok(LogisticModel {
        bias,
        weights: w,
        classifiers: classifiers.to_vec(),
        loss_trace,
    })
}

/// Retained classifier ids and their accuracy estimates for one filter.
pub fn retained_for(profiles: &[ClassifierProfile], filter_id: usize) -> (Vec<usize>, Vec<f64>) {
    profiles
        .iter()
        .filter(|p| p.is_retained(filter_id))
        .map(|p| (p.classifier_id, p.accuracy(filter_id)))
        .unzip()
}

fn labels_of<O: MachineOutputs + ?Sized>(
    outputs: &O,
    classifiers: &[usize],
    item: usize,
    filter: usize,
) -> Result<Vec<VoteLabel>> {
    classifiers
        .iter()
        .map(|&c| {
            outputs.label(c, item, filter).ok_or_else(|| {
                Error::Coverage(format!("classifier {c} has no output for item {item}, filter {filter}"))
            })
        })
        .collect()
}

pub struct PriorInputs<'a, O: MachineOutputs + ?Sized> {
    pub item_ids: &'a [usize],
    pub profiles: &'a [ClassifierProfile],
    pub outputs: &'a O,
    pub stacked: Option<&'a StackedModel>,
    pub power_estimates: &'a [f64],
}

/// Runs the ensemble over `item_ids`.
///
/// Filters without retained classifiers fall back to the flat power prior;
/// when every filter falls back the matrix is marked `PowerOnly`. In
/// `Stacked` mode, filters without a trained model use naive Bayes.
pub fn build_priors<O: MachineOutputs + ?Sized>(mode: PriorMode, inputs: &PriorInputs<'_, O>) -> Result<PriorMatrix> {
    let n_filters = inputs.power_estimates.len();
    if mode == PriorMode::PowerOnly {
        return Ok(PriorMatrix::constant(inputs.item_ids, inputs.power_estimates));
    }
    if mode == PriorMode::Stacked && inputs.stacked.is_none() {
        return Err(Error::Config("stacked priors need a trained model".into()));
    }

    let mut m = PriorMatrix::new(inputs.item_ids, n_filters, mode);
    for f in 0..n_filters {
        let (classifiers, accuracies) = retained_for(inputs.profiles, f);
        let model = match mode {
            PriorMode::Stacked => inputs.stacked.and_then(|s| s.per_filter.get(&f)),
            _ => None,
        };
        let column_mode = if model.is_some() {
            PriorMode::Stacked
        } else if !classifiers.is_empty() {
            PriorMode::NaiveBayes
        } else {
            PriorMode::PowerOnly
        };
        m.column_provenance[f] = column_mode;
        for (row, &item) in inputs.item_ids.iter().enumerate() {
            let value = match column_mode {
                PriorMode::PowerOnly => inputs.power_estimates[f],
                PriorMode::NaiveBayes => {
                    nb_ensemble_prob(&labels_of(inputs.outputs, &classifiers, item, f)?, &accuracies)?
                }
                PriorMode::Stacked => {
                    let model = model.expect("stacked column has a model");
                    model.predict(&labels_of(inputs.outputs, &model.classifiers, item, f)?)
                }
            };
            m.set(row, f, value);
        }
    }
    if m.column_provenance.iter().all(|p| *p == PriorMode::PowerOnly) {
        m.provenance = PriorMode::PowerOnly;
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prob::BetaPosterior;
    use VoteLabel::{In, Out};

    #[test]
    fn nb_examples() {
        assert!((nb_ensemble_prob(&[Out], &[0.5]).unwrap() - 0.5).abs() < 1e-15);
        let p = nb_ensemble_prob(&[Out, Out], &[0.8, 0.8]).unwrap();
        assert!((p - 0.64 / 0.68).abs() < 1e-12);
        assert!((p - 0.941176).abs() < 1e-6);
        assert!((nb_ensemble_prob(&[Out, In], &[0.8, 0.8]).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn nb_degenerate() {
        assert!(matches!(
            nb_ensemble_prob(&[Out, In], &[1.0, 1.0]),
            Err(Error::DegenerateEvidence(_))
        ));
        assert_eq!(nb_ensemble_prob(&[Out, Out], &[1.0, 0.7]).unwrap(), 1.0);
        assert!(nb_ensemble_prob(&[], &[]).is_err());
        assert!(nb_ensemble_prob(&[Out], &[0.7, 0.8]).is_err());
    }

    fn cfg(min: usize) -> StackerConfig {
        StackerConfig {
            min_training: min,
            ..StackerConfig::default()
        }
    }

    #[test]
    fn stacker_separable() {
        let samples: Vec<_> = (0..40)
            .map(|i| if i % 2 == 0 { (vec![Out], 1.0) } else { (vec![In], 0.0) })
            .collect();
        let m = train_stacker(&samples, &[0], 0, &cfg(10)).unwrap();
        assert!(m.weights[0].is_finite() && m.bias.is_finite());
        for (x, y) in &samples {
            assert_eq!(m.predict(x) > 0.5, *y > 0.5);
        }
    }

    #[test]
    fn stacker_constant_feature() {
        let samples: Vec<_> = (0..30)
            .map(|i| (vec![Out], if i % 2 == 0 { 1.0 } else { 0.0 }))
            .collect();
        let m = train_stacker(&samples, &[0], 0, &cfg(10)).unwrap();
        assert!((m.predict(&[Out]) - 0.5).abs() < 1e-3);
    }

    #[test]
    fn stacker_loss_non_increasing() {
        let samples: Vec<_> = (0..200)
            .map(|i| {
                let a = if i % 3 == 0 { Out } else { In };
                let b = if i % 5 < 2 { Out } else { In };
                (vec![a, b], ((i % 7) as f64) / 6.0)
            })
            .collect();
        let m = train_stacker(&samples, &[0, 1], 0, &cfg(100)).unwrap();
        for w in m.loss_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-15);
        }
    }

    #[test]
    fn stacker_minimum_size() {
        let samples = vec![(vec![Out], 1.0); 50];
        assert!(matches!(
            train_stacker(&samples, &[0], 3, &StackerConfig::default()),
            Err(Error::InsufficientData { filter: 3, have: 50, need: 100 })
        ));
    }

    fn profile(id: usize, filters: &[(usize, f64, f64)]) -> ClassifierProfile {
        ClassifierProfile {
            classifier_id: id,
            per_filter_posterior: filters
                .iter()
                .map(|&(f, a, b)| (f, BetaPosterior::new(a, b).unwrap()))
                .collect(),
            per_filter_counts: BTreeMap::new(),
            retained: filters.iter().map(|&(f, _, _)| (f, true)).collect(),
            query_cost: 0.0,
        }
    }

    #[test]
    fn priors_power_only() {
        let table = OutputTable::default();
        let inputs = PriorInputs {
            item_ids: &[3, 5, 9],
            profiles: &[],
            outputs: &table,
            stacked: None,
            power_estimates: &[0.3, 0.5],
        };
        let m = build_priors(PriorMode::PowerOnly, &inputs).unwrap();
        for id in [3, 5, 9] {
            assert_eq!(m.row(id).unwrap(), &[0.3, 0.5]);
        }
        let nb = build_priors(PriorMode::NaiveBayes, &inputs).unwrap();
        assert_eq!(nb.provenance, PriorMode::PowerOnly);
        assert_eq!(nb.row(5).unwrap(), &[0.3, 0.5]);
    }

    #[test]
    fn priors_naive_bayes() {
        let mut table = OutputTable::default();
        table.insert(0, 0, 0, Out);
        table.insert(1, 0, 0, Out);
        // posterior means 0.8 each
        let profiles = [profile(0, &[(0, 8.0, 2.0)]), profile(1, &[(0, 4.0, 1.0)])];
        let inputs = PriorInputs {
            item_ids: &[0],
            profiles: &profiles,
            outputs: &table,
            stacked: None,
            power_estimates: &[0.3],
        };
        let m = build_priors(PriorMode::NaiveBayes, &inputs).unwrap();
        assert!((m.get(0, 0).unwrap() - 0.941176).abs() < 1e-6);
        assert_eq!(m.provenance, PriorMode::NaiveBayes);
        assert!(build_priors(PriorMode::Stacked, &inputs).is_err());
    }
}

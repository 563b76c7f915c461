use proptest::prelude::*;

use hsr_core::aggregation::{em_estimate, EmConfig, VoteRecord};
use hsr_core::engine::{estimate_min_votes, hsr_classify, sr_classify, EngineConfig, HsrJob, ItemStatus};
use hsr_core::ensemble::{nb_ensemble_prob, PriorMode};
use hsr_core::experiment::{ExperimentConfig, Replicate};
use hsr_core::gate::{select_classifiers, ClassifierProfile, GoldEntry, GoldSet};
use hsr_core::metrics::{compute_loss, compute_price_ratio, compute_recall_precision, confusion, Decision};
use hsr_core::prob::{
    bayes_filter_update, beta_prob_better_than_random, fold_out_prob, item_out_prob, skew_accuracy, BetaPosterior, FilterSpec,
    LossParams, VoteLabel,
};
use hsr_core::sim::{generate_world, simulate_classifier_outputs, CrowdModel, PoolConfig, SimulatedCrowd, WorldTruth};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn label() -> impl Strategy<Value = VoteLabel> {
    prop_oneof![Just(VoteLabel::In), Just(VoteLabel::Out)]
}

fn plan_len(n: Option<u32>) -> u32 {
    n.unwrap_or(u32::MAX)
}

proptest! {
    #[test]
    fn skew_stays_between_half_and_base(base in 0.5f64..=1.0, d1 in 0.0f64..10.0, d2 in 0.0f64..10.0) {
        let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
        let a = skew_accuracy(base, lo).unwrap();
        let b = skew_accuracy(base, hi).unwrap();
        prop_assert!((0.5..=base + 1e-15).contains(&a));
        prop_assert!(b <= a + 1e-15);
    }

    #[test]
    fn bayes_update_is_a_probability_and_moves_with_the_vote(prior in 0.0f64..=1.0, acc in 0.5f64..1.0, v in label()) {
        let post = bayes_filter_update(prior, acc, v).unwrap();
        prop_assert!((0.0..=1.0).contains(&post));
        match v {
            VoteLabel::Out => prop_assert!(post <= prior + 1e-12),
            VoteLabel::In => prop_assert!(post >= prior - 1e-12),
        }
    }

    #[test]
    fn posterior_depends_only_on_the_vote_multiset(
        prior in 0.01f64..0.99,
        acc in 0.5f64..0.99,
        votes in prop::collection::vec(label(), 1..25),
        rot in 0usize..25,
    ) {
        let net = |vs: &[VoteLabel]| vs.iter().map(|v| if v.is_out() { 1i64 } else { -1 }).sum::<i64>();
        let sequential = |vs: &[VoteLabel]| {
            1.0 - vs.iter().fold(1.0 - prior, |p, &v| bayes_filter_update(p, acc, v).unwrap())
        };
        let mut other = votes.clone();
        other.rotate_left(rot % votes.len());
        other.reverse();
        let folded = fold_out_prob(prior, acc, net(&votes)).unwrap();
        prop_assert_eq!(folded, fold_out_prob(prior, acc, net(&other)).unwrap());
        prop_assert!((folded - sequential(&votes)).abs() <= 1e-8);
        prop_assert!((sequential(&votes) - sequential(&other)).abs() <= 1e-8);
    }

    #[test]
    fn item_out_prob_is_monotone(probs in prop::collection::vec(0.0f64..=1.0, 1..6), k in 0usize..6, bump in 0.0f64..1.0) {
        let p = item_out_prob(&probs).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
        let mut higher = probs.clone();
        let k = k % probs.len();
        higher[k] = (higher[k] + bump).min(1.0);
        prop_assert!(item_out_prob(&higher).unwrap() <= p + 1e-15);
    }

    #[test]
    fn nb_is_symmetric_under_label_flip(
        pairs in prop::collection::vec((label(), 0.01f64..0.99), 1..8),
    ) {
        let (labels, accs): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let flipped: Vec<_> = labels.iter().map(|l| l.flipped()).collect();
        let p = nb_ensemble_prob(&labels, &accs).unwrap();
        let q = nb_ensemble_prob(&flipped, &accs).unwrap();
        prop_assert!((p + q - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn raising_p_out_never_shortens_the_run(
        probs in prop::collection::vec(0.01f64..0.99, 1..5),
        acc in 0.55f64..0.95,
        t1 in 0.6f64..0.999,
        t2 in 0.6f64..0.999,
        f in 0usize..5,
    ) {
        let f = f % probs.len();
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let at = |t: f64| {
            let cfg = EngineConfig { p_out_threshold: t, ..EngineConfig::default() };
            plan_len(estimate_min_votes(0, &probs, f, acc, &cfg).n_min)
        };
        prop_assert!(at(hi) >= at(lo));
    }

    #[test]
    fn higher_out_prior_never_lengthens_the_out_run(
        p1 in 0.01f64..0.99,
        p2 in 0.01f64..0.99,
        acc in 0.55f64..0.9,
    ) {
        // an unreachable IN threshold leaves only the OUT direction
        let cfg = EngineConfig { p_in_threshold: 1.0 - 1e-12, ..EngineConfig::default() };
        let (lo, hi) = if p1 <= p2 { (p1, p2) } else { (p2, p1) };
        let n = |p: f64| plan_len(estimate_min_votes(0, &[p], 0, acc, &cfg).n_min);
        prop_assert!(n(hi) <= n(lo));
    }

    #[test]
    fn gating_is_monotone(correct in 0u64..80, failed in 0u64..80, sc in 0.5f64..0.999) {
        let profile = |c: u64, f: u64| ClassifierProfile {
            classifier_id: 0,
            per_filter_posterior: [(0, BetaPosterior::uniform().observe(c, f))].into(),
            per_filter_counts: [(0, (c, f))].into(),
            retained: [(0, false)].into(),
            query_cost: 0.0,
        };
        let kept = |c: u64, f: u64| select_classifiers(&[profile(c, f)], sc).unwrap()[0].is_retained(0);
        if kept(correct, failed) {
            prop_assert!(kept(correct + 1, failed));
        } else {
            prop_assert!(!kept(correct, failed + 1));
        }
        let p = beta_prob_better_than_random(&BetaPosterior::uniform().observe(correct, failed));
        prop_assert!((0.0..=1.0).contains(&p));
    }

    #[test]
    fn metrics_agree_with_a_recount(
        truth in prop::collection::vec(any::<bool>(), 1..200),
        out in prop::collection::vec(any::<bool>(), 200),
        k in 1.0f64..20.0,
        ec in 1.0f64..50.0,
        cv in 0u64..5000,
    ) {
        let n = truth.len();
        let world = WorldTruth::from_truth(vec![FilterSpec::new(0, 0.5, 0.0).unwrap()], truth.clone(), 0).unwrap();
        let decisions: Vec<Decision> = (0..n)
            .map(|i| Decision { item_id: i, label: if out[i] { VoteLabel::Out } else { VoteLabel::In } })
            .collect();
        // truth[i] = filter applies, so the item should be out
        let fe = (0..n).filter(|&i| !truth[i] && out[i]).count() as f64;
        let fi = (0..n).filter(|&i| truth[i] && !out[i]).count() as f64;
        let ti = (0..n).filter(|&i| !truth[i] && !out[i]).count() as f64;
        let loss = LossParams::new(k, ec).unwrap();
        let c = confusion(&decisions, &world).unwrap();
        prop_assert!(c.false_exclusions + c.false_inclusions <= n as u64);
        prop_assert!((compute_loss(&decisions, &world, &loss, n).unwrap() - (k * fe + fi) / n as f64).abs() < 1e-12);
        let pr = compute_price_ratio(cv, fi as u64, &loss, n, 0.0, false).unwrap();
        prop_assert!((pr - (cv as f64 + fi * ec) / (n as f64 * ec)).abs() < 1e-12);
        let rp = compute_recall_precision(&decisions, &world).unwrap();
        prop_assert!((0.0..=1.0).contains(&rp.recall) && (0.0..=1.0).contains(&rp.precision));
        if ti + fe > 0.0 {
            prop_assert!((rp.recall - ti / (ti + fe)).abs() < 1e-12);
        }
        if ti + fi > 0.0 {
            prop_assert!((rp.precision - ti / (ti + fi)).abs() < 1e-12);
        }
    }

    #[test]
    fn em_outputs_are_probabilities(
        raw in prop::collection::vec((0usize..20, 0usize..2, label()), 0..120),
    ) {
        let votes: Vec<VoteRecord> = raw
            .iter()
            .enumerate()
            .map(|(k, &(i, f, l))| VoteRecord { item_id: i, filter_id: f, worker_id: k as u64, label: l })
            .collect();
        let est = em_estimate(&votes, 2, &EmConfig::default()).unwrap();
        for e in &est.filter_estimates {
            prop_assert!((0.0..=1.0).contains(&e.power_hat));
            prop_assert!((0.5..=1.0).contains(&e.worker_accuracy_hat));
        }
        for p in est.label_posteriors.values() {
            prop_assert!((0.0..=1.0).contains(p));
        }
        for tr in &est.per_filter_traces {
            for w in tr.windows(2) {
                prop_assert!(w[1] >= w[0] - 1e-9);
            }
        }
    }

    #[test]
    fn world_and_pool_are_seed_deterministic(seed in any::<u64>(), rho in 0.0f64..=1.0) {
        let filters = [FilterSpec::new(0, 0.3, 0.0).unwrap(), FilterSpec::new(1, 0.6, 0.5).unwrap()];
        let a = generate_world(50, &filters, seed).unwrap();
        let b = generate_world(50, &filters, seed).unwrap();
        prop_assert_eq!(&a, &b);
        let cfg = PoolConfig { correlation: rho, ..PoolConfig::default() };
        let p = simulate_classifier_outputs(&a, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let q = simulate_classifier_outputs(&b, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(p, q);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Ledger conservation, frozen thresholds and at least one crowd vote
    /// behind every OUT decision.
    #[test]
    fn screening_invariants(seed in any::<u64>(), hybrid in any::<bool>(), budget in prop::option::of(600u64..3000)) {
        let filters: Vec<FilterSpec> = (0..3).map(|f| FilterSpec::new(f, 0.25, 0.3).unwrap()).collect();
        let world = generate_world(150, &filters, seed).unwrap();
        let items: Vec<usize> = (20..150).collect();
        let cfg = EngineConfig { seed, budget, ..EngineConfig::default() };
        let loss = LossParams::default();
        let mut crowd = SimulatedCrowd::new(&world, CrowdModel::default(), seed).unwrap();
        let outcome = if hybrid {
            let pool = simulate_classifier_outputs(&world, &PoolConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let gold = GoldSet::new(
                (0..20)
                    .flat_map(|i| (0..3).map(move |f| (i, f)))
                    .map(|(i, f)| GoldEntry { item_id: i, filter_id: f, label: world.truth_label(i, f) })
                    .collect(),
                loss.expert_cost,
            ).unwrap();
            let job = HsrJob::new(cfg.clone(), PriorMode::NaiveBayes, gold);
            hsr_classify(&items, 3, &mut crowd, &pool, &job, &loss).unwrap().screening
        } else {
            sr_classify(&items, 3, &mut crowd, &cfg, &loss).unwrap()
        };
        let spent: u64 = outcome.items.iter().map(|s| s.votes_spent as u64).sum();
        let logged = crowd.log().len() as u64;
        prop_assert_eq!(outcome.crowd_votes(), logged);
        prop_assert_eq!(outcome.votes.len() as u64, logged);
        prop_assert_eq!(spent, outcome.crowd_votes());
        if let Some(b) = budget {
            prop_assert!(outcome.crowd_votes() <= b);
        }
        prop_assert!(outcome.ledger.total() >= 0.0);
        prop_assert_eq!(outcome.items.len(), items.len());
        for s in &outcome.items {
            prop_assert!(s.in_posteriors.iter().all(|p| (0.0..=1.0).contains(p)));
            match s.status {
                ItemStatus::Out => {
                    prop_assert!(item_out_prob(&s.in_posteriors).unwrap() > cfg.p_out_threshold);
                    prop_assert!(!s.votes.is_empty());
                }
                ItemStatus::In => {
                    prop_assert!(s.difficult || s.in_posteriors.iter().product::<f64>() > cfg.p_in_threshold);
                }
                other => prop_assert!(false, "unfinalized status {:?}", other),
            }
        }
    }
}

#[test]
fn paired_design_shares_world_and_pool() {
    let cfg = ExperimentConfig {
        world: hsr_core::experiment::WorldConfig {
            n_items: 120,
            ..Default::default()
        },
        ..ExperimentConfig::default()
    };
    for rep in 0..3 {
        let a = Replicate::draw(&cfg, rep).unwrap();
        let b = Replicate::draw(&cfg, rep).unwrap();
        assert_eq!(a.world, b.world);
        assert_eq!(a.pool, b.pool);
        assert_eq!(a.gold, b.gold);
        assert_eq!(a.crowd_seed, b.crowd_seed);
    }
}

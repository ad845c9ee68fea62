mod common;

use common::{example1, grid_slack, net, two_state_grid_oracle};
use inattention::geometry::*;
use inattention::ri::{
    policy_value, solve_ri, solve_ri_with, verify_assumptions, CostFamily, Instance, NetUtility,
};
use inattention::Error;
use proptest::prelude::*;

fn refs<'a>(evs: &'a [NetUtility<'a>]) -> Vec<&'a dyn ConcaveEvaluator> {
    evs.iter().map(|e| e as &dyn ConcaveEvaluator).collect()
}

fn evaluators(inst: &Instance) -> Vec<NetUtility<'_>> {
    (0..inst.num_alternatives()).map(|a| inst.evaluator(a)).collect()
}

/// Sort-based Euclidean projection onto the simplex.
fn project(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cum = 0.0;
    let mut tau = 0.0;
    for (i, x) in s.iter().enumerate() {
        cum += x;
        let t = (cum - 1.0) / (i + 1) as f64;
        if x - t > 0.0 {
            tau = t;
        }
    }
    v.iter().map(|x| (x - tau).max(0.0)).collect()
}

#[test]
fn caratheodory_examples() {
    let pts = [Belief::vertex(2, 1), Belief::vertex(2, 0)];
    let w = caratheodory_weights(&pts, &Belief::new(vec![0.3, 0.7]).unwrap()).unwrap();
    assert!((w[0] - 0.7).abs() < 1e-12 && (w[1] - 0.3).abs() < 1e-12);
    let mu = Belief::new(vec![0.2, 0.3, 0.5]).unwrap();
    assert_eq!(caratheodory_weights(&[mu.clone()], &mu).unwrap(), vec![1.0]);
    let off = Belief::new(vec![0.9, 0.1]).unwrap();
    let pts = [Belief::new(vec![0.2, 0.8]).unwrap(), Belief::new(vec![0.5, 0.5]).unwrap()];
    assert!(matches!(caratheodory_weights(&pts, &off), Err(Error::Infeasible { .. })));
    let dup = [Belief::uniform(3), Belief::uniform(3)];
    assert!(matches!(
        caratheodory_weights(&dup, &Belief::uniform(3)),
        Err(Error::RankDeficient { .. })
    ));
}

#[test]
fn simplex_grid_counts() {
    let g = simplex_grid(2, 0.5).unwrap();
    let probs: Vec<Vec<f64>> = g.iter().map(|b| b.probs().to_vec()).collect();
    assert_eq!(probs.len(), 3);
    for p in [[0.0, 1.0], [0.5, 0.5], [1.0, 0.0]] {
        assert!(probs.iter().any(|q| q == &p));
    }
    assert_eq!(simplex_grid(3, 1.0).unwrap().len(), 3);
    assert_eq!(simplex_grid(2, 0.25).unwrap().len(), 5);
    let snap = Belief::new(vec![0.3, 0.7]).unwrap();
    let g = simplex_grid_with(2, 0.25, Some(&snap), DEFAULT_GRID_BUDGET).unwrap();
    assert!(g.contains(&snap));
    assert!(matches!(
        simplex_grid_with(3, 1e-4, None, 1000),
        Err(Error::TooLarge { .. })
    ));
}

#[test]
fn belief_validation() {
    assert!(Belief::new(vec![0.5, 0.6]).is_err());
    assert!(Belief::new(vec![-0.1, 1.1]).is_err());
    assert!(Belief::new(vec![f64::NAN, 1.0]).is_err());
    assert!(Direction::new(vec![f64::INFINITY]).is_err());
}

#[test]
fn single_alternative_support_at_zero_slope() {
    let mu = Belief::new(vec![0.4, 0.6]).unwrap();
    let inst = Instance::from_parts(mu.clone(), vec![vec![3.0, 3.0]], vec![0.5], CostFamily::Quadratic, 1.0).unwrap();
    let evs = evaluators(&inst);
    let r = support_function(&refs(&evs), &Direction::new(vec![0.0]).unwrap()).unwrap();
    assert!((r.value - 3.5).abs() < 1e-10);
    assert!(r.supported_posteriors[0].posterior.linf_distance(&mu) < 1e-8);
    let sol = concavify_at_prior(&refs(&evs), &mu).unwrap();
    assert_eq!(sol.posteriors.len(), 1);
    assert!(sol.posteriors[0].linf_distance(&mu) < 1e-8);
    assert!((sol.value - 3.5).abs() < 1e-9);
}

#[test]
fn all_unavailable_is_non_finite() {
    let inst = Instance::from_parts(
        Belief::uniform(2),
        vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        vec![f64::NEG_INFINITY, f64::NEG_INFINITY],
        CostFamily::Quadratic,
        1.0,
    )
    .unwrap();
    let evs = evaluators(&inst);
    let r = support_function(&refs(&evs), &Direction::new(vec![0.0]).unwrap());
    assert_eq!(r.unwrap_err(), Error::NonFinite);
    assert!(!verify_assumptions(&inst).finite_disturbance);
}

#[test]
fn example1_solution_matches_grid_oracle() {
    let inst = example1();
    let policy = solve_ri(&inst).unwrap();
    assert_eq!(policy.posteriors.len(), 1);
    assert!((policy.posteriors[0].probs()[0] - 0.5).abs() < 1e-9);
    assert_eq!(policy.chosen(0), Some(1));
    let v = policy_value(&inst, &policy).unwrap();
    assert!((v - 9.5).abs() < 1e-9);
    let (oracle, _) = two_state_grid_oracle(&inst, 10_000);
    assert!(v >= oracle - 1e-9);
    assert!(v - oracle <= grid_slack(&inst, 10_000));
}

#[test]
fn example1_forced_two_point_policy() {
    // Posteriors 0 and 1 with choices a then b, weights fixed by the prior.
    let inst = example1();
    let p = inattention::ri::PosteriorPolicy::degenerate(
        vec![Belief::vertex(2, 1), Belief::vertex(2, 0)],
        vec![0.5, 0.5],
        &[0, 1],
        2,
    );
    let expected = 0.5 * net(&inst, 0, &[0.0, 1.0]) + 0.5 * net(&inst, 1, &[1.0, 0.0]);
    assert!((expected - 9.0).abs() < 1e-12);
    assert!((policy_value(&inst, &p).unwrap() - expected).abs() < 1e-12);
    assert!(policy_value(&inst, &p).unwrap() < 9.5);
}

#[test]
fn symmetric_instance_splits_evenly() {
    let inst = Instance::from_parts(
        Belief::uniform(2),
        vec![vec![8.0, 2.0], vec![2.0, 8.0]],
        vec![0.0, 0.0],
        CostFamily::Quadratic,
        2.0,
    )
    .unwrap();
    let policy = solve_ri(&inst).unwrap();
    assert_eq!(policy.posteriors.len(), 2);
    let (g0, g1) = (policy.posteriors[0].probs()[0], policy.posteriors[1].probs()[0]);
    assert!((g0 + g1 - 1.0).abs() < 1e-9);
    assert!((policy.weights[0] - 0.5).abs() < 1e-9);
    assert_ne!(policy.chosen(0), policy.chosen(1));
    let (oracle, at) = two_state_grid_oracle(&inst, 10_000);
    let v = policy_value(&inst, &policy).unwrap();
    assert!(v >= oracle - 1e-9 && v - oracle <= grid_slack(&inst, 10_000));
    let mut mine = [g0, g1];
    mine.sort_by(|a, b| a.partial_cmp(b).unwrap());
    for (m, o) in mine.iter().zip(&at) {
        assert!((m - o).abs() < 5e-3, "{mine:?} vs {at:?}");
    }
}

#[test]
fn assumption_failures_are_reported() {
    let inst = Instance::from_parts(
        Belief::uniform(2),
        vec![vec![1.0, 2.0], vec![1.0, 2.0]],
        vec![0.0, 0.0],
        CostFamily::Quadratic,
        1.0,
    )
    .unwrap();
    assert!(!verify_assumptions(&inst).distinct_slopes);
    assert!(matches!(solve_ri(&inst), Err(Error::AssumptionViolation(_))));
}

fn two_state_instance() -> impl Strategy<Value = Instance> {
    (
        2usize..=4,
        0.1f64..0.9,
        0.5f64..4.0,
        prop_oneof![Just(CostFamily::Quadratic), Just(CostFamily::KlToPrior), Just(CostFamily::Tsallis)],
    )
        .prop_flat_map(|(k, m, kappa, fam)| {
            (
                prop::collection::vec(prop::collection::vec(0.0f64..10.0, 2), k),
                prop::collection::vec(-1.0f64..1.0, k),
            )
                .prop_map(move |(u, e)| {
                    Instance::from_parts(Belief::new(vec![m, 1.0 - m]).unwrap(), u, e, fam, kappa).unwrap()
                })
        })
}

fn three_state_instance() -> impl Strategy<Value = Instance> {
    (2usize..=3, 0.5f64..4.0, prop::collection::vec(0.2f64..1.0, 3)).prop_flat_map(|(k, kappa, m)| {
        let total: f64 = m.iter().sum();
        let mu: Vec<f64> = m.iter().map(|x| x / total).collect();
        (
            prop::collection::vec(prop::collection::vec(0.0f64..10.0, 3), k),
            prop::collection::vec(-1.0f64..1.0, k),
        )
            .prop_map(move |(u, e)| {
                Instance::from_parts(Belief::from_masses(mu.clone()).unwrap(), u, e, CostFamily::Quadratic, kappa)
                    .unwrap()
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn envelope_solution_invariants(inst in two_state_instance()) {
        let evs = evaluators(&inst);
        let sol = concavify_at_prior(&refs(&evs), &inst.prior).unwrap();
        let total: f64 = sol.weights.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-10);
        prop_assert!(sol.weights.iter().all(|w| *w >= 0.0));
        prop_assert!(sol.posteriors.len() <= 2);
        let mean: f64 = sol.weights.iter().zip(&sol.posteriors).map(|(w, p)| w * p.probs()[0]).sum();
        prop_assert!((mean - inst.prior.probs()[0]).abs() < 1e-8);
        let avg: f64 = sol.weights.iter().zip(&sol.values_at_posteriors).map(|(w, v)| w * v).sum();
        prop_assert!((avg - sol.value).abs() < 1e-8);
    }

    #[test]
    fn value_matches_two_state_grid_oracle(inst in two_state_instance()) {
        let n = 2000;
        let policy = solve_ri(&inst).unwrap();
        let v = policy_value(&inst, &policy).unwrap();
        let (oracle, _) = two_state_grid_oracle(&inst, n);
        prop_assert!(v >= oracle - 1e-9, "value {v} below oracle {oracle}");
        prop_assert!(v - oracle <= grid_slack(&inst, n), "value {v} oracle {oracle}");
        prop_assert!(policy.bayes_gap(&inst.prior) < 1e-8);
        for k in 0..policy.posteriors.len() {
            prop_assert!(policy.chosen(k).is_some());
        }
    }

    #[test]
    fn lagrangian_certificate_on_grid(inst in two_state_instance()) {
        let evs = evaluators(&inst);
        let sol = concavify_at_prior(&refs(&evs), &inst.prior).unwrap();
        let tilt = sol.optimal_direction.tilt();
        let score = |a: usize, g: &[f64]| net(&inst, a, g) - tilt[0] * g[0] - tilt[1] * g[1];
        let best = sol
            .posteriors
            .iter()
            .zip(&sol.alternatives)
            .map(|(p, a)| score(*a, p.probs()))
            .fold(f64::INFINITY, f64::min);
        let scale = 1.0 + best.abs();
        for i in 0..=500 {
            let g = [i as f64 / 500.0, 1.0 - i as f64 / 500.0];
            for a in 0..inst.num_alternatives() {
                prop_assert!(score(a, &g) <= best + 1e-7 * scale);
            }
        }
    }

    #[test]
    fn quadratic_support_matches_closed_form(
        inst in three_state_instance(),
        t in prop::collection::vec(-5.0f64..5.0, 2),
    ) {
        let evs = evaluators(&inst);
        let dir = Direction::new(t.clone()).unwrap();
        let r = support_function(&refs(&evs), &dir).unwrap();
        let tilt = dir.tilt();
        let mu = inst.prior.probs();
        let kappa = inst.cost.scale;
        let mut best = f64::NEG_INFINITY;
        for (a, per) in r.per_alternative_argmax.iter().enumerate() {
            let shifted: Vec<f64> = (0..3)
                .map(|j| mu[j] + (inst.utility[a][j] - tilt[j]) / (2.0 * kappa))
                .collect();
            let g = project(&shifted);
            let v = net(&inst, a, &g) - tilt.iter().zip(&g).map(|(x, y)| x * y).sum::<f64>();
            best = best.max(v);
            let (arg, val) = per.as_ref().unwrap();
            prop_assert!((val - v).abs() < 1e-9);
            prop_assert!(arg.probs().iter().zip(&g).all(|(x, y)| (x - y).abs() < 1e-7));
        }
        prop_assert!((r.value - best).abs() < 1e-9);
        for sp in &r.supported_posteriors {
            let v = net(&inst, sp.alternative, sp.posterior.probs())
                - tilt.iter().zip(sp.posterior.probs()).map(|(x, y)| x * y).sum::<f64>();
            prop_assert!((v - r.value).abs() < 1e-7 * (1.0 + r.value.abs()));
        }
    }

    #[test]
    fn three_state_value_dominates_grid_policies(inst in three_state_instance(), seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let policy = solve_ri(&inst).unwrap();
        let v = policy_value(&inst, &policy).unwrap();
        prop_assert!(policy.posteriors.len() <= 3);
        prop_assert!(policy.bayes_gap(&inst.prior) < 1e-8);
        let grid = simplex_grid(3, 0.05).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut tried = 0;
        while tried < 200 {
            let pts: Vec<Belief> = (0..3).map(|_| grid[rng.random_range(0..grid.len())].clone()).collect();
            let Ok(w) = caratheodory_weights(&pts, &inst.prior) else { continue };
            tried += 1;
            let other: f64 = w
                .iter()
                .zip(&pts)
                .map(|(w, p)| w * common::envelope(&inst, p.probs()))
                .sum();
            prop_assert!(v >= other - 1e-9);
        }
    }

    #[test]
    fn location_shift_moves_value_only(inst in two_state_instance(), c in -20.0f64..20.0) {
        let p0 = solve_ri(&inst).unwrap();
        let shifted = inst.shifted(c);
        let p1 = solve_ri(&shifted).unwrap();
        prop_assert_eq!(p0.posteriors.len(), p1.posteriors.len());
        for k in 0..p0.posteriors.len() {
            prop_assert!(p0.posteriors[k].linf_distance(&p1.posteriors[k]) < 1e-7);
            prop_assert!((p0.weights[k] - p1.weights[k]).abs() < 1e-7);
            prop_assert_eq!(p0.chosen(k), p1.chosen(k));
        }
        let dv = policy_value(&shifted, &p1).unwrap() - policy_value(&inst, &p0).unwrap();
        prop_assert!((dv - c).abs() < 1e-8);
    }

    #[test]
    fn perturbed_dual_start_reaches_same_posteriors(inst in two_state_instance(), d in -2.0f64..2.0) {
        let base = solve_ri_with(&inst, &ConcavifyOptions::default()).unwrap();
        let theta = base.envelope.optimal_direction.coords()[0] + d;
        let opts = ConcavifyOptions { start: Some(vec![theta]), ..Default::default() };
        let again = solve_ri_with(&inst, &opts).unwrap();
        prop_assert!((again.envelope.value - base.envelope.value).abs() < 1e-9);
        prop_assert_eq!(again.policy.posteriors.len(), base.policy.posteriors.len());
        for (a, b) in again.policy.posteriors.iter().zip(&base.policy.posteriors) {
            prop_assert!(a.linf_distance(b) < 1e-6);
        }
    }
}

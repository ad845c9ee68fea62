mod common;

use common::scenario_path;
use inattention::identification::*;
use inattention::population::*;
use inattention::Error;

fn load(name: &str) -> Scenario {
    Scenario::from_path(&scenario_path(name)).unwrap()
}

fn edit(name: &str, pairs: &[(&str, &str)]) -> Scenario {
    let mut text = std::fs::read_to_string(scenario_path(name)).unwrap();
    for (from, to) in pairs {
        assert!(text.contains(from), "{from}");
        text = text.replace(from, to);
    }
    Scenario::from_toml_str(&text).unwrap()
}

fn point(a: f64, b: f64) -> CovariatePoint {
    CovariatePoint(vec![vec![a], vec![b]])
}

fn axis(hi: f64, n: usize) -> String {
    let v: Vec<String> = (0..=n).map(|i| format!("{:?}", hi * i as f64 / n as f64)).collect();
    format!("[{}]", v.join(", "))
}

/// The one-agent scenario on a square grid over `[0, 1]^2` with `n` cells per
/// side, normalized at the centre.
fn one_agent(n: usize) -> Scenario {
    let ax = axis(1.0, n);
    let centre = (n / 2) * (n + 1) + n / 2;
    edit(
        "zero_variance",
        &[
            (
                "axes = [[[0.0, 0.25, 0.5, 0.75, 1.0]], [[0.0, 0.25, 0.5, 0.75, 1.0]]]",
                &format!("axes = [[{ax}], [{ax}]]"),
            ),
            ("reference = 12", &format!("reference = {centre}")),
        ],
    )
}

/// Deterministic latent-state scenario with smooth choice probabilities on a
/// grid over `[0, 0.5]^2` with `n` cells per side.
fn deterministic_market(n: usize) -> Scenario {
    let ax = axis(0.5, n);
    let centre = (n / 2) * (n + 1) + n / 2;
    edit(
        "market",
        &[
            (
                "axes = [[[0.0, 0.125, 0.25, 0.375, 0.5]], [[0.0, 0.125, 0.25, 0.375, 0.5]]]",
                &format!("axes = [[{ax}], [{ax}]]"),
            ),
            ("reference = 12", &format!("reference = {centre}")),
            ("family = \"gumbel\"\nscale = 1.0", "family = \"fixed\"\nlocation = [0.0, 0.0]"),
            (
                "family = \"quadratic\"\nkappa = { family = \"lognormal\", log_mean = 0.0, log_sd = 0.25 }",
                "family = \"kl_to_prior\"\nkappa = { family = \"fixed\", value = 1.0 }",
            ),
            ("draws = 10000", "draws = 1"),
        ],
    )
}

#[test]
fn roy_and_slutsky_hold_for_one_agent() {
    let sc = load("zero_variance");
    let sim = Simulator::new(&sc);
    for id in interior_points(&sc) {
        let x = &sc.grid[id];
        for a in 0..2 {
            for j in 0..2 {
                let r = roy_residual(&sim, x, a, j, 1e-5).unwrap();
                assert!(r.value.abs() <= 1e-4, "roy at {id}: {}", r.value);
            }
        }
        let s = slutsky_check(&sim, x, 1e-4).unwrap();
        assert!(s.symmetry_residual <= 1e-4, "{}", s.symmetry_residual);
        assert!(s.min_eigenvalue >= -1e-6);
    }
}

#[test]
fn single_alternative_hessian_vanishes() {
    let sc = Scenario::from_toml_str(
        r#"
        alternatives = ["only"]
        states = ["w1", "w2"]
        prior = [0.3, 0.7]
        [utility]
        kind = "table"
        values = [[1.0, 2.0]]
        [heterogeneity.disturbance]
        family = "gumbel"
        scale = 1.0
        [heterogeneity.cost]
        family = "quadratic"
        kappa = { family = "fixed", value = 1.0 }
        [mc]
        draws = 50
        seed = 1
        "#,
    )
    .unwrap();
    let sim = Simulator::new(&sc);
    let s = slutsky_check(&sim, &sc.grid[0], 1e-3).unwrap();
    assert!(s.hessian.iter().flatten().all(|h| h.abs() < 1e-12));
    let r = roy_residual(&sim, &sc.grid[0], 0, 1, 1e-3).unwrap();
    assert!(r.value.abs() < 1e-9);
}

#[test]
fn equal_slopes_give_unit_ratio() {
    let sc = edit("zero_variance", &[("slope = [[[-1.0], [0.0]], [[-2.0], [0.0]]]", "slope = [[[-1.5], [0.0]], [[-1.5], [0.0]]]")]);
    let sim = Simulator::new(&sc);
    for id in interior_points(&sc) {
        let r = utility_ratio(&sim, &sc.grid[id], (0, 0), (1, 0), 0).unwrap();
        assert!((r.ratio.value - 1.0).abs() < 2e-3, "{id}: {}", r.ratio.value);
    }
}

#[test]
fn deterministic_ratio_converges_at_second_order() {
    let mut errors = Vec::new();
    for n in [4, 8, 16] {
        let sc = one_agent(n);
        let sim = Simulator::new(&sc);
        let x = &point(0.5, 0.5);
        let r = utility_ratio(&sim, x, (0, 0), (1, 0), 0).unwrap();
        assert!(r.strictly_paired);
        assert_eq!(r.ratio.se, 0.0);
        errors.push((r.ratio.value - 0.5).abs());
    }
    for w in errors.windows(2) {
        let order = w[0] / w[1];
        assert!((3.0..5.0).contains(&order), "{errors:?}");
    }
    assert!(errors[2] < 2e-3);
}

#[test]
fn ratio_preconditions() {
    let sc = load("zero_variance");
    let sim = Simulator::new(&sc);
    let x = &sc.grid[12];
    assert!(matches!(utility_ratio(&sim, x, (0, 0), (0, 0), 0), Err(Error::InvalidInput(_))));
    assert!(matches!(utility_ratio(&sim, x, (0, 0), (1, 0), 1), Err(Error::InvalidInput(_))));
    assert!(matches!(market_utility_ratio(&sim, x, (0, 0), (1, 0)), Err(Error::VariantMismatch(_))));
}

#[test]
fn degenerate_choice_is_not_paired() {
    // With a quadratic cost a single agent picks b for sure at low x_b, so
    // choice probabilities do not move there.
    let sc = edit(
        "zero_variance",
        &[
            ("intercept = [[3.0, 3.0], [6.0, 1.0]]", "intercept = [[1.0, 1.0], [9.0, 8.0]]"),
        ],
    );
    let sim = Simulator::new(&sc);
    let r = utility_ratio(&sim, &sc.grid[12], (0, 0), (1, 0), 0);
    assert!(matches!(r, Err(Error::NotPaired { .. })), "{r:?}");
}

#[test]
fn recovery_flips_with_the_scale_sign() {
    let sc = one_agent(16);
    let sim = Simulator::new(&sc);
    let cfg = sc.identify.clone().unwrap();
    let mut norm = Normalization::from_config(&sc, &cfg.normalization).unwrap();
    let down = recover_utilities(&sim, &norm).unwrap();
    norm.sign = 1.0;
    let up = recover_utilities(&sim, &norm).unwrap();
    for (pa, qa) in down.alternatives.iter().zip(&up.alternatives) {
        for (p, q) in pa.iter().zip(qa) {
            assert_eq!(p.x, q.x);
            assert!((p.utility.value + q.utility.value).abs() < 1e-12);
        }
    }
    // With du_b/dx = -1 the recovered utilities are the slopes rescaled by 2.
    for (a, slope) in [(0usize, -0.5), (1, -1.0)] {
        for p in &down.alternatives[a] {
            assert!((p.utility.value - slope * p.x[0]).abs() < 1e-2, "{a} {:?} {}", p.x, p.utility.value);
        }
    }
    let report = identify(&sim, Regime::State, &norm, &cfg).unwrap();
    norm.sign = -1.0;
    let other = identify(&sim, Regime::State, &norm, &cfg).unwrap();
    for (r, s) in report.ratios.iter().zip(&other.ratios) {
        assert_eq!(r.estimate.ratio.value, s.estimate.ratio.value);
    }
}

#[test]
fn recovery_needs_the_location_anchor() {
    let sc = edit("zero_variance", &[(
        "axes = [[[0.0, 0.25, 0.5, 0.75, 1.0]], [[0.0, 0.25, 0.5, 0.75, 1.0]]]",
        "axes = [[[0.25, 0.5, 0.75, 1.0]], [[0.25, 0.5, 0.75, 1.0]]]",
    ), ("reference = 12", "reference = 5")]);
    let sim = Simulator::new(&sc);
    let norm = Normalization::from_config(&sc, &sc.identify.clone().unwrap().normalization).unwrap();
    assert!(matches!(recover_utilities(&sim, &norm), Err(Error::GridNotRectangular(_))));
}

#[test]
fn welfare_of_a_null_move_is_zero() {
    let sc = load("canonical").with_draws(300);
    let sim = Simulator::new(&sc);
    let x = &sc.grid[7];
    let w = welfare_difference(&sim, x, x).unwrap();
    assert_eq!(w.dv.value, 0.0);
    assert_eq!(w.dd.value, 0.0);
    assert!(matches!(cost_derivative_check(&sim, x, x), Err(Error::StepTooSmall(_))));
}

#[test]
fn welfare_is_path_independent() {
    let (x, y, z) = (point(0.0, 0.25), point(0.75, 0.25), point(0.75, 1.0));
    let y2 = point(0.0, 1.0);
    let sc = load("zero_variance");
    let sim = Simulator::new(&sc);
    let direct = welfare_difference(&sim, &x, &z).unwrap().dv.value;
    for mid in [&y, &y2] {
        let two = welfare_difference(&sim, &x, mid).unwrap().dv.value + welfare_difference(&sim, mid, &z).unwrap().dv.value;
        assert!((direct - two).abs() < 1e-4, "{direct} vs {two}");
    }
    let truth = sim.summary(&z).unwrap().value - sim.summary(&x).unwrap().value;
    assert!((direct - truth).abs() < 1e-4);

    let sc = load("canonical").with_draws(2_000);
    let sim = Simulator::new(&sc);
    let a = welfare_difference(&sim, &x, &y).unwrap().dv;
    let b = welfare_difference(&sim, &y, &z).unwrap().dv;
    let c = welfare_difference(&sim, &x, &y2).unwrap().dv;
    let d = welfare_difference(&sim, &y2, &z).unwrap().dv;
    let gap = Estimate::lin(&[(1.0, &a), (1.0, &b), (-1.0, &c), (-1.0, &d)]);
    assert!(gap.within(0.0, 4.0, 1e-9), "{} se {}", gap.value, gap.se);
}

#[test]
fn welfare_path_must_stay_on_the_grid_box() {
    let sc = load("zero_variance");
    let sim = Simulator::new(&sc);
    let r = welfare_difference(&sim, &sc.grid[0], &point(1.5, 0.0));
    assert!(matches!(r, Err(Error::PathLeavesSupport { .. })));
}

#[test]
fn cost_derivative_residual_is_first_order() {
    let sc = load("zero_variance");
    let sim = Simulator::new(&sc);
    let x = point(0.5, 0.5);
    for dir in [0, 1] {
        let mut last = None;
        for h in [0.2, 0.1, 0.05, 0.025] {
            let mut x1 = x.clone();
            x1.0[dir][0] += h;
            let r = cost_derivative_check(&sim, &x, &x1).unwrap().value.abs();
            if h <= 0.05 {
                assert!(r <= 2e-2, "h {h}: {r}");
            }
            if let Some(prev) = last {
                let ratio: f64 = prev / r;
                assert!((ratio - 2.0).abs() < 0.3, "h {h}: ratio {ratio}");
            }
            last = Some(r);
        }
    }
}

#[test]
fn two_point_bound_collapses_to_equality() {
    let sc = load("canonical").with_draws(500);
    let sim = Simulator::new(&sc);
    let x0 = sc.grid[8].clone();
    let truth = sim.summary(&x0).unwrap().cond.clone();
    let q = CounterfactualQuery { x0: x0.clone(), path: vec![x0], candidate: truth };
    let e = counterfactual_bound(&sim, &q).unwrap();
    assert!(e.gap.value.abs() < 1e-12);
}

#[test]
fn truth_satisfies_bounds_and_uniform_candidate_can_fail() {
    let sc = load("zero_variance");
    let sim = Simulator::new(&sc);
    let x0 = point(0.1, 0.9);
    let truth = sim.summary(&x0).unwrap().cond.clone();
    for path in [vec![24], vec![20, 4], vec![6, 18, 12], vec![0, 24, 3, 10]] {
        let pts: Vec<CovariatePoint> = path.iter().map(|i| sc.grid[*i].clone()).collect();
        let q = CounterfactualQuery { x0: x0.clone(), path: pts, candidate: truth.clone() };
        assert!(counterfactual_bound(&sim, &q).unwrap().satisfied(1e-8));
    }
    let sc = load("asymmetric");
    let sim = Simulator::new(&sc);
    for cfg in &sc.identify.as_ref().unwrap().bounds {
        let pts: Vec<CovariatePoint> = cfg.path.iter().map(|i| sc.grid[*i].clone()).collect();
        let q = CounterfactualQuery {
            x0: CovariatePoint(cfg.x0.clone()),
            path: pts,
            candidate: cfg.candidate.clone().unwrap(),
        };
        let e = counterfactual_bound(&sim, &q).unwrap();
        assert!(e.gap.value < -4.0 * e.gap.se, "{} se {}", e.gap.value, e.gap.se);
    }
}

#[test]
fn market_ratio_matches_the_slope_ratio() {
    let sc = deterministic_market(16);
    let sim = Simulator::new(&sc);
    // Near the origin the agent never chooses a; keep points whose stencil
    // stays where both shares are interior.
    let interior = interior_points(&sc);
    let inside = |id: usize| {
        [id, id - 1, id + 1, id - 17, id + 17]
            .iter()
            .all(|i| sim.summary(&sc.grid[*i]).unwrap().marg.iter().all(|m| *m > 1e-6))
    };
    let interior: Vec<usize> = interior.into_iter().filter(|id| inside(*id)).collect();
    let mut paired = 0;
    for id in &interior {
        match market_utility_ratio(&sim, &sc.grid[*id], (0, 0), (1, 0)) {
            Ok(r) => {
                paired += 1;
                assert!((r.ratio.value - 0.5).abs() < 5e-3, "{id}: {}", r.ratio.value);
            }
            Err(Error::NotPaired { .. }) => {}
            Err(e) => panic!("{e}"),
        }
    }
    assert!(paired * 2 > interior.len(), "{paired} of {}", interior.len());
    assert!(matches!(utility_ratio(&sim, &sc.grid[12], (0, 0), (1, 0), 0), Err(Error::VariantMismatch(_))));
    let last = sc.grid.len() - 1;
    let centre = 8 * 17 + 8;
    let w = market_welfare(&sim, &sc.grid[centre], &sc.grid[last]).unwrap();
    let direct = sim.summary(&sc.grid[last]).unwrap().value - sim.summary(&sc.grid[centre]).unwrap().value;
    assert!((w.dv.value - direct).abs() < 1e-4, "{} vs {direct}", w.dv.value);
}

#[test]
fn market_recovery_tracks_the_slope() {
    let sc = load("market").with_draws(4_000);
    let sim = Simulator::new(&sc);
    let norm = Normalization::from_config(&sc, &sc.identify.clone().unwrap().normalization).unwrap();
    let rec = market_recover(&sim, &norm).unwrap();
    for p in &rec.alternatives[0] {
        let err = p.utility.value + 0.5 * p.x[0];
        assert!(err.abs() < 4.0 * p.utility.se + 2e-2, "{:?}: {err} se {}", p.x, p.utility.se);
    }
}

#[test]
fn identical_loadings_are_flagged() {
    let sc = load("market");
    assert_eq!(loadings_distinct(&sc.utility), Some(true));
    let same = edit("market", &[("loading = [[1.0, -1.0], [-0.5, 0.5]]", "loading = [[1.0, -1.0], [1.0, -1.0]]")]);
    assert_eq!(loadings_distinct(&same.utility), Some(false));
    assert_eq!(loadings_distinct(&load("canonical").utility), None);
}

#[test]
fn table_sources_cannot_tilt() {
    let sc = load("zero_variance");
    let sim = Simulator::new(&sc);
    let table = ConditionalMeanTable::simulate(&sim).unwrap();
    let src = TableSource { scenario: &sc, table: &table };
    assert_eq!(roy_residual(&src, &sc.grid[12], 0, 0, 1e-3).unwrap_err(), Error::TiltUnavailable);
    // Off-grid points are missing from a table.
    let r = welfare_difference(&src, &sc.grid[0], &sc.grid[24]);
    assert!(matches!(r, Err(Error::PathPointMissing(_))), "{r:?}");
    let layered = Layered { table: TableSource { scenario: &sc, table: &table }, simulator: &sim };
    let w = welfare_difference(&layered, &sc.grid[0], &sc.grid[24]).unwrap();
    let direct = table.summaries[24].value - table.summaries[0].value;
    assert!((w.dv.value - direct).abs() < 1e-4);
}

#[test]
fn identify_report_on_one_agent() {
    let sc = one_agent(16);
    let sim = Simulator::new(&sc);
    let cfg = sc.identify.clone().unwrap();
    let norm = Normalization::from_config(&sc, &cfg.normalization).unwrap();
    let rep = identify(&sim, Regime::State, &norm, &cfg).unwrap();
    assert_eq!(rep.welfare.len(), cfg.welfare.len());
    assert!(!rep.ratios.is_empty());
    for r in rep.ratios.iter().filter(|r| r.a == 0 && r.b == 1) {
        assert!((r.estimate.ratio.value - 0.5).abs() < 1e-2, "{} {}", r.x_id, r.estimate.ratio.value);
    }
    for w in &rep.welfare {
        let direct = sim.summary(&sc.grid[w.to]).unwrap().value - sim.summary(&sc.grid[w.from]).unwrap().value;
        assert!((w.difference.dv.value - direct).abs() < 1e-4);
    }
    assert!(rep.diagnostics.slutsky.is_some());
}

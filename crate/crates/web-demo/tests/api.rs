use web_demo::{instance, population_curve, solve_instance, support_at};

const VALUES: [f64; 4] = [10.0, 5.0, 12.0, 3.0];

#[test]
fn support_lines_of_the_worked_example() {
    let inst = instance(&VALUES, &[1.0, 2.0], 0.5, "quadratic", 2.0).unwrap();
    for (slope, value, gamma) in [(7.0, 6.25, 0.75), (8.0, 89.0 / 16.0, 0.625)] {
        let s = support_at(&inst, slope).unwrap();
        assert!((s.value - value).abs() < 1e-9);
        assert!(s.tangency.iter().any(|g| (g - gamma).abs() < 1e-9));
        assert!(s.svg.starts_with("<svg"));
    }
}

#[test]
fn solve_learns_nothing_in_the_worked_example() {
    let inst = instance(&VALUES, &[1.0, 2.0], 0.5, "quadratic", 2.0).unwrap();
    let s = solve_instance(&inst).unwrap();
    assert!((s.value - 9.5).abs() < 1e-9);
    assert_eq!(s.choices, vec![1]);
    assert!((s.posteriors[0] - 0.5).abs() < 1e-9);
}

#[test]
fn bad_inputs_are_errors() {
    assert!(instance(&VALUES, &[1.0], 0.5, "quadratic", 2.0).is_err());
    assert!(instance(&VALUES, &[1.0, 2.0], 0.5, "entropy", 2.0).is_err());
    assert!(instance(&VALUES, &[1.0, 2.0], 1.5, "quadratic", 2.0).is_err());
    assert!(population_curve(1.0, 0.25, 1, 10).is_err());
}

#[test]
fn choice_curve_falls_with_own_covariate() {
    let rows = population_curve(1.0, 0.25, 5, 200).unwrap();
    assert_eq!(rows.len(), 20);
    let p: Vec<f64> = rows.chunks(4).map(|r| r[1]).collect();
    assert!(p.windows(2).all(|w| w[1] < w[0]), "{p:?}");
    for r in rows.chunks(4) {
        assert!((0.5 * (r[1] + r[2]) - r[3]).abs() < 1e-12);
    }
}

#![allow(dead_code)]

use inattention::geometry::Belief;
use inattention::ri::{CostFamily, Instance};
use std::path::PathBuf;

pub fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(format!("{name}.toml"))
}

/// Two states, alternatives a and b: u_a = (10, 5), u_b = (12, 3),
/// E = (1, 2), quadratic cost with scale 2 at the uniform prior.
pub fn example1() -> Instance {
    Instance::from_parts(
        Belief::uniform(2),
        vec![vec![10.0, 5.0], vec![12.0, 3.0]],
        vec![1.0, 2.0],
        CostFamily::Quadratic,
        2.0,
    )
    .unwrap()
}

/// Attention cost written out from its definition, independent of the library.
pub fn cost(family: CostFamily, kappa: f64, mu: &[f64], g: &[f64]) -> f64 {
    match family {
        CostFamily::Quadratic => kappa * g.iter().zip(mu).map(|(x, m)| (x - m).powi(2)).sum::<f64>(),
        CostFamily::KlToPrior => {
            kappa
                * g.iter()
                    .zip(mu)
                    .map(|(x, m)| if *x > 0.0 { x * (x / m).ln() } else { 0.0 })
                    .sum::<f64>()
        }
        CostFamily::Tsallis => kappa * (g.iter().zip(mu).map(|(x, m)| x * x / m).sum::<f64>() - 1.0),
    }
}

pub fn net(inst: &Instance, a: usize, g: &[f64]) -> f64 {
    let e = inst.disturbance[a];
    if !e.is_finite() {
        return f64::NEG_INFINITY;
    }
    let u: f64 = inst.utility[a].iter().zip(g).map(|(u, p)| u * p).sum();
    u + e - cost(inst.cost.family, inst.cost.scale, inst.prior.probs(), g)
}

pub fn envelope(inst: &Instance, g: &[f64]) -> f64 {
    (0..inst.num_alternatives())
        .map(|a| net(inst, a, g))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Best one- or two-point Bayes-plausible policy with posteriors on the lattice
/// `{i / n}` (plus the prior itself) for a two-state instance. Returned with
/// the posteriors of the best policy.
pub fn two_state_grid_oracle(inst: &Instance, n: usize) -> (f64, Vec<f64>) {
    let mu = inst.prior.probs()[0];
    let mut pts: Vec<f64> = (0..=n).map(|i| i as f64 / n as f64).collect();
    pts.push(mu);
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup();
    let vals: Vec<f64> = pts.iter().map(|g| envelope(inst, &[*g, 1.0 - g])).collect();
    let mut best = (envelope(inst, &[mu, 1.0 - mu]), vec![mu]);
    // Both points of the best chord lie on the upper hull of their side.
    let left: Vec<usize> = (0..pts.len()).filter(|i| pts[*i] < mu && vals[*i].is_finite()).collect();
    let right: Vec<usize> = (0..pts.len()).filter(|i| pts[*i] > mu && vals[*i].is_finite()).collect();
    let hull = |idx: &[usize]| -> Vec<usize> {
        let mut h: Vec<usize> = Vec::new();
        for &i in idx {
            while h.len() >= 2 {
                let (a, b) = (h[h.len() - 2], h[h.len() - 1]);
                let cross = (pts[b] - pts[a]) * (vals[i] - vals[a]) - (vals[b] - vals[a]) * (pts[i] - pts[a]);
                if cross >= 0.0 {
                    h.pop();
                } else {
                    break;
                }
            }
            h.push(i);
        }
        h
    };
    let (hl, hr) = (hull(&left), hull(&right));
    for l in &hl {
        for r in &hr {
            let w = (pts[*r] - mu) / (pts[*r] - pts[*l]);
            let v = w * vals[*l] + (1.0 - w) * vals[*r];
            if v > best.0 {
                best = (v, vec![pts[*l], pts[*r]]);
            }
        }
    }
    best
}

/// Slack between the exact optimum and the best lattice policy: resolution
/// times the utility range plus a Lipschitz bound of the cost.
pub fn grid_slack(inst: &Instance, n: usize) -> f64 {
    let lo = inst.utility.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    let hi = inst.utility.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let lip = match inst.cost.family {
        CostFamily::Quadratic => 4.0 * inst.cost.scale,
        CostFamily::Tsallis => {
            4.0 * inst.cost.scale / inst.prior.probs().iter().copied().fold(f64::INFINITY, f64::min)
        }
        // slope is unbounded at the boundary; loose bound for interior optima
        CostFamily::KlToPrior => 20.0 * inst.cost.scale,
    };
    (hi - lo + lip) / n as f64
}

//! Browser bindings for three operations on two-state problems: a support line
//! of the net-utility envelope at a chosen slope, the optimal attention policy,
//! and the population choice curve along one covariate.

use inattention::geometry::Belief;
use inattention::plot::{envelope_data, envelope_svg};
use inattention::population::{Scenario, Simulator};
use inattention::ri::{solve_ri_with, CostFamily, Instance};
use inattention::Error;
use wasm_bindgen::prelude::*;

fn family(name: &str) -> Result<CostFamily, Error> {
    match name {
        "quadratic" => Ok(CostFamily::Quadratic),
        "kl_to_prior" => Ok(CostFamily::KlToPrior),
        "tsallis" => Ok(CostFamily::Tsallis),
        _ => Err(Error::InvalidInput(format!("unknown cost family {name:?}"))),
    }
}

/// `values` holds the utilities row by row, two states per alternative.
pub fn instance(values: &[f64], disturbance: &[f64], prior: f64, cost: &str, kappa: f64) -> Result<Instance, Error> {
    if values.len() != 2 * disturbance.len() || disturbance.is_empty() {
        return Err(Error::InvalidInput("need two utilities per alternative".into()));
    }
    let utility = values.chunks(2).map(<[f64]>::to_vec).collect();
    Instance::from_parts(Belief::new(vec![prior, 1.0 - prior])?, utility, disturbance.to_vec(), family(cost)?, kappa)
}

fn names(k: usize) -> Vec<String> {
    (0..k).map(|a| ((b'a' + a as u8) as char).to_string()).collect()
}

#[wasm_bindgen(getter_with_clone)]
pub struct Support {
    pub value: f64,
    /// Probability of the first state at each tangent posterior.
    pub tangency: Vec<f64>,
    pub svg: String,
}

pub fn support_at(inst: &Instance, slope: f64) -> Result<Support, Error> {
    let data = envelope_data(inst, &[slope])?;
    let line = &data.lines[0];
    Ok(Support {
        value: line.intercept,
        tangency: line.tangency.clone(),
        svg: envelope_svg(inst, &names(inst.num_alternatives()), &[slope])?,
    })
}

#[wasm_bindgen(getter_with_clone)]
pub struct Solution {
    pub value: f64,
    pub posteriors: Vec<f64>,
    pub weights: Vec<f64>,
    pub choices: Vec<u32>,
    pub svg: String,
}

pub fn solve_instance(inst: &Instance) -> Result<Solution, Error> {
    let sol = solve_ri_with(inst, &Default::default())?;
    let p = &sol.policy;
    let slopes = sol.envelope.optimal_direction.coords().to_vec();
    Ok(Solution {
        value: sol.envelope.value,
        posteriors: p.posteriors.iter().map(|g| g.probs()[0]).collect(),
        weights: p.weights.clone(),
        choices: (0..p.posteriors.len()).map(|k| p.chosen(k).map_or(u32::MAX, |a| a as u32)).collect(),
        svg: envelope_svg(inst, &names(inst.num_alternatives()), &slopes)?,
    })
}

/// Mean choice probabilities of `a` in a Gumbel and lognormal-cost population
/// as `x_a` moves over `[0, 1]`. Rows are `x, P(a|w1), P(a|w2), P(a)`.
pub fn population_curve(gumbel_scale: f64, log_sd: f64, points: usize, draws: u64) -> Result<Vec<f64>, Error> {
    if points < 2 {
        return Err(Error::InvalidInput("need at least two points".into()));
    }
    let axis: Vec<String> = (0..points).map(|i| format!("{:?}", i as f64 / (points - 1) as f64)).collect();
    let text = format!(
        r#"
        alternatives = ["a", "b"]
        states = ["w1", "w2"]
        prior = [0.5, 0.5]
        [utility]
        kind = "linear_in_covariate"
        intercept = [[3.0, 1.0], [4.0, 2.3]]
        slope = [[[-1.0], [0.0]], [[-2.0], [0.0]]]
        [heterogeneity.disturbance]
        family = "gumbel"
        scale = {gumbel_scale:?}
        [heterogeneity.cost]
        family = "quadratic"
        kappa = {{ family = "lognormal", log_mean = 0.0, log_sd = {log_sd:?} }}
        [covariates]
        axes = [[[{}]], [[0.5]]]
        [mc]
        draws = {draws}
        seed = 1
        "#,
        axis.join(", ")
    );
    let sc = Scenario::from_toml_str(&text)?;
    let sim = Simulator::new(&sc);
    let mut out = Vec::with_capacity(4 * points);
    for x in &sc.grid {
        let s = sim.summary(x)?;
        out.extend([x.get(0, 0), s.cond[0][0], s.cond[0][1], s.marg[0]]);
    }
    Ok(out)
}

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub fn support(values: Vec<f64>, disturbance: Vec<f64>, prior: f64, cost: &str, kappa: f64, slope: f64) -> Result<Support, JsError> {
    support_at(&instance(&values, &disturbance, prior, cost, kappa).map_err(js)?, slope).map_err(js)
}

#[wasm_bindgen]
pub fn solve(values: Vec<f64>, disturbance: Vec<f64>, prior: f64, cost: &str, kappa: f64) -> Result<Solution, JsError> {
    solve_instance(&instance(&values, &disturbance, prior, cost, kappa).map_err(js)?).map_err(js)
}

#[wasm_bindgen]
pub fn choice_curve(gumbel_scale: f64, log_sd: f64, points: usize, draws: u32) -> Result<Vec<f64>, JsError> {
    population_curve(gumbel_scale, log_sd, points, draws as u64).map_err(js)
}

//! Heterogeneous populations: scenario files, seeded draws of the disturbance
//! and cost scale, and Monte Carlo conditional means over a covariate grid.
//!
//! Draw `i` depends only on `(seed, i)`, so every covariate point and every
//! utility tilt sees the same draws (common random numbers).

use crate::error::{Error, Result};
use crate::geometry::{Belief, ConcavifyOptions};
use crate::ri::{parallel_pairs, solve_ri_unchecked, AttentionCost, CostFamily, Instance};
use crate::sdsc::{generate_sdsc, InstanceSuite, SdscFunction};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Gumbel, LogNormal, Normal};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};

/// Redraws allowed per draw index before the failure is reported.
const MAX_ATTEMPTS: u64 = 8;

/// Attribute vectors, one per alternative: `x[a][p] = x_{a,p}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovariatePoint(pub Vec<Vec<f64>>);

impl CovariatePoint {
    pub fn get(&self, a: usize, p: usize) -> f64 {
        self.0[a][p]
    }

    pub fn with(&self, a: usize, p: usize, value: f64) -> Self {
        let mut out = self.clone();
        out.0[a][p] = value;
        out
    }

    /// `self + t (other - self)`
    pub fn lerp(&self, other: &CovariatePoint, t: f64) -> Self {
        CovariatePoint(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(x, y)| x.iter().zip(y).map(|(a, b)| a + t * (b - a)).collect())
                .collect(),
        )
    }

    pub fn distance(&self, other: &CovariatePoint) -> f64 {
        self.0
            .iter()
            .flatten()
            .zip(other.0.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn key(&self) -> Vec<u64> {
        self.0.iter().flatten().map(|v| v.to_bits()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Choice probabilities observed state by state.
    State,
    /// Only unconditional choice probabilities observed; the state is latent.
    Market,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum UtilitySpec {
    /// `u_a(omega_j) = values[a][j]`, no covariates.
    Table { values: Vec<Vec<f64>> },
    /// `u_a(x_a, omega_j) = intercept[a][j] + sum_p slope[a][j][p] x_{a,p}`
    LinearInCovariate {
        intercept: Vec<Vec<f64>>,
        slope: Vec<Vec<Vec<f64>>>,
    },
    /// `u_a(x_a) + G^a(omega_j)` with `u_a(x_a) = intercept[a] + slope[a] . x_a`
    AdditiveLatentState {
        intercept: Vec<f64>,
        slope: Vec<Vec<f64>>,
        loading: Vec<Vec<f64>>,
    },
}

impl UtilitySpec {
    pub fn regime(&self) -> Regime {
        match self {
            UtilitySpec::AdditiveLatentState { .. } => Regime::Market,
            _ => Regime::State,
        }
    }

    /// Number of attributes of each alternative.
    pub fn dims(&self) -> Vec<usize> {
        match self {
            UtilitySpec::Table { values } => vec![0; values.len()],
            UtilitySpec::LinearInCovariate { slope, .. } => {
                slope.iter().map(|s| s.first().map_or(0, Vec::len)).collect()
            }
            UtilitySpec::AdditiveLatentState { slope, .. } => slope.iter().map(Vec::len).collect(),
        }
    }

    /// Utility table `K x J` at `x`.
    pub fn utility(&self, x: &CovariatePoint) -> Vec<Vec<f64>> {
        match self {
            UtilitySpec::Table { values } => values.clone(),
            UtilitySpec::LinearInCovariate { intercept, slope } => intercept
                .iter()
                .zip(slope)
                .enumerate()
                .map(|(a, (row, sl))| {
                    row.iter()
                        .zip(sl)
                        .map(|(c, s)| c + s.iter().zip(&x.0[a]).map(|(b, v)| b * v).sum::<f64>())
                        .collect()
                })
                .collect(),
            UtilitySpec::AdditiveLatentState { loading, .. } => {
                let base = self.market_utility(x).unwrap_or_default();
                loading
                    .iter()
                    .zip(base)
                    .map(|(g, u)| g.iter().map(|v| u + v).collect())
                    .collect()
            }
        }
    }

    /// Good-specific part `u_a(x_a)` for latent-state specs.
    pub fn market_utility(&self, x: &CovariatePoint) -> Option<Vec<f64>> {
        match self {
            UtilitySpec::AdditiveLatentState {
                intercept, slope, ..
            } => Some(
                intercept
                    .iter()
                    .zip(slope)
                    .enumerate()
                    .map(|(a, (c, s))| c + s.iter().zip(&x.0[a]).map(|(b, v)| b * v).sum::<f64>())
                    .collect(),
            ),
            _ => None,
        }
    }

    /// Derivative of the utility table along `x + t dx`. Exact for the shipped
    /// specs, all of which are affine in the covariates.
    pub fn directional(&self, dx: &CovariatePoint) -> Vec<Vec<f64>> {
        match self {
            UtilitySpec::Table { values } => vec![vec![0.0; values[0].len()]; values.len()],
            UtilitySpec::LinearInCovariate { slope, .. } => slope
                .iter()
                .enumerate()
                .map(|(a, sl)| {
                    sl.iter()
                        .map(|s| s.iter().zip(&dx.0[a]).map(|(b, v)| b * v).sum())
                        .collect()
                })
                .collect(),
            UtilitySpec::AdditiveLatentState { slope, loading, .. } => slope
                .iter()
                .enumerate()
                .map(|(a, s)| {
                    let d: f64 = s.iter().zip(&dx.0[a]).map(|(b, v)| b * v).sum();
                    vec![d; loading[a].len()]
                })
                .collect(),
        }
    }

    /// The single state whose utility regressor `(a, p)` moves, if there is one.
    pub fn regressor_state(&self, a: usize, p: usize) -> Option<usize> {
        match self {
            UtilitySpec::LinearInCovariate { slope, .. } => {
                let hits: Vec<usize> = (0..slope[a].len()).filter(|j| slope[a][*j][p] != 0.0).collect();
                (hits.len() == 1).then(|| hits[0])
            }
            _ => None,
        }
    }

    /// True slope of `u_a` in regressor `p` (state `j` for state-level specs).
    pub fn slope(&self, a: usize, p: usize, j: Option<usize>) -> f64 {
        match self {
            UtilitySpec::Table { .. } => 0.0,
            UtilitySpec::LinearInCovariate { slope, .. } => slope[a][j.unwrap_or(0)][p],
            UtilitySpec::AdditiveLatentState { slope, .. } => slope[a][p],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisturbanceFamily {
    Gumbel,
    Normal,
    Fixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerAlternative {
    Same(f64),
    Each(Vec<f64>),
}

impl PerAlternative {
    fn expand(&self, k: usize, field: &str) -> Result<Vec<f64>> {
        match self {
            PerAlternative::Same(v) => Ok(vec![*v; k]),
            PerAlternative::Each(v) if v.len() == k => Ok(v.clone()),
            PerAlternative::Each(v) => Err(Error::config(
                field,
                format!("expected {k} entries, found {}", v.len()),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceConfig {
    pub family: DisturbanceFamily,
    #[serde(default = "zero_per_alt")]
    pub location: PerAlternative,
    #[serde(default = "zero_per_alt")]
    pub scale: PerAlternative,
    /// Alternatives whose disturbance is `-inf` (never available).
    #[serde(default)]
    pub unavailable: Vec<String>,
}

fn zero_per_alt() -> PerAlternative {
    PerAlternative::Same(0.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum KappaConfig {
    Fixed { value: f64 },
    Lognormal { log_mean: f64, log_sd: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    pub family: CostFamily,
    pub kappa: KappaConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeterogeneityConfig {
    pub disturbance: DisturbanceConfig,
    pub cost: CostConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovariateConfig {
    /// Rectangular grid: `axes[a][p]` lists the values of `x_{a,p}`.
    pub axes: Option<Vec<Vec<Vec<f64>>>>,
    /// Explicit points, each `[a][p]`.
    pub points: Option<Vec<Vec<Vec<f64>>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    pub draws: u64,
    pub seed: u64,
    /// Largest tolerated share of redrawn draws.
    #[serde(default = "default_budget")]
    pub rejection_budget: f64,
}

fn default_budget() -> f64 {
    1e-3
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentStateConfig {
    /// Law of the realized state; must equal the prior when given.
    pub law: Option<Vec<f64>>,
}

/// Raw scenario file contents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub name: String,
    pub alternatives: Vec<String>,
    pub states: Vec<String>,
    pub prior: Vec<f64>,
    pub utility: UtilitySpec,
    pub heterogeneity: HeterogeneityConfig,
    #[serde(default)]
    pub covariates: CovariateConfig,
    pub mc: McConfig,
    pub latent_state: Option<LatentStateConfig>,
    pub suite: Option<InstanceSuite>,
    pub identify: Option<crate::identification::IdentifyConfig>,
}

/// Validated scenario.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub alternatives: Vec<String>,
    pub states: Vec<String>,
    pub prior: Belief,
    pub utility: UtilitySpec,
    pub location: Vec<f64>,
    pub scale: Vec<f64>,
    pub family: DisturbanceFamily,
    pub unavailable: Vec<bool>,
    pub cost: CostConfig,
    pub grid: Vec<CovariatePoint>,
    pub axes: Option<Vec<Vec<Vec<f64>>>>,
    pub mc: McConfig,
    pub latent_law: Option<Belief>,
    pub suite: Option<InstanceSuite>,
    pub identify: Option<crate::identification::IdentifyConfig>,
}

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig =
            toml::from_str(text).map_err(|e| Error::config("scenario", e.to_string()))?;
        Scenario::from_config(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Scenario::from_toml_str(&text)
    }

    pub fn from_config(cfg: ScenarioConfig) -> Result<Self> {
        let k = cfg.alternatives.len();
        let j = cfg.states.len();
        if k == 0 {
            return Err(Error::config("alternatives", "at least one alternative is required"));
        }
        if j == 0 {
            return Err(Error::config("states", "at least one state is required"));
        }
        if cfg.prior.len() != j {
            return Err(Error::config("prior", format!("expected {j} entries")));
        }
        let prior =
            Belief::new(cfg.prior.clone()).map_err(|e| Error::config("prior", e.to_string()))?;
        validate_utility(&cfg.utility, k, j)?;

        let het = &cfg.heterogeneity;
        let location = het.disturbance.location.expand(k, "heterogeneity.disturbance.location")?;
        let scale = het.disturbance.scale.expand(k, "heterogeneity.disturbance.scale")?;
        if location.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("heterogeneity.disturbance.location", "must be finite"));
        }
        if scale.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::config("heterogeneity.disturbance.scale", "must be nonnegative"));
        }
        let mut unavailable = vec![false; k];
        for name in &het.disturbance.unavailable {
            let a = cfg.alternatives.iter().position(|x| x == name).ok_or_else(|| {
                Error::config("heterogeneity.disturbance.unavailable", format!("unknown alternative {name}"))
            })?;
            unavailable[a] = true;
        }
        if unavailable.iter().all(|u| *u) {
            return Err(Error::config(
                "heterogeneity.disturbance.unavailable",
                "every alternative is unavailable",
            ));
        }
        match het.cost.kappa {
            KappaConfig::Fixed { value } if !(value > 0.0 && value.is_finite()) => {
                return Err(Error::config("heterogeneity.cost.kappa.value", "must be positive"));
            }
            KappaConfig::Lognormal { log_mean, log_sd }
                if !log_mean.is_finite() || !(log_sd >= 0.0) || !log_sd.is_finite() =>
            {
                return Err(Error::config("heterogeneity.cost.kappa", "bad lognormal parameters"));
            }
            _ => {}
        }
        if het.cost.family.infinite_at_boundary() && prior.probs().iter().any(|p| *p <= 0.0) {
            return Err(Error::config("prior", "this cost family needs a strictly positive prior"));
        }

        let dims = cfg.utility.dims();
        let (grid, axes) = build_grid(&cfg.covariates, &dims)?;
        if cfg.mc.draws == 0 {
            return Err(Error::config("mc.draws", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&cfg.mc.rejection_budget) {
            return Err(Error::config("mc.rejection_budget", "must lie in [0, 1)"));
        }

        let latent_law = match (&cfg.utility, &cfg.latent_state) {
            (UtilitySpec::AdditiveLatentState { .. }, latent) => {
                let law = match latent.as_ref().and_then(|l| l.law.clone()) {
                    Some(v) => {
                        Belief::new(v).map_err(|e| Error::config("latent_state.law", e.to_string()))?
                    }
                    None => prior.clone(),
                };
                if law.linf_distance(&prior) > 1e-12 {
                    return Err(Error::config(
                        "latent_state.law",
                        "the realized state law must coincide with the prior",
                    ));
                }
                Some(law)
            }
            (_, Some(_)) => {
                return Err(Error::config(
                    "latent_state",
                    "only valid with utility kind additive_latent_state",
                ))
            }
            _ => None,
        };

        Ok(Scenario {
            name: cfg.name,
            alternatives: cfg.alternatives,
            states: cfg.states,
            prior,
            utility: cfg.utility,
            location,
            scale,
            family: het.disturbance.family,
            unavailable,
            cost: het.cost.clone(),
            grid,
            axes,
            mc: cfg.mc,
            latent_law,
            suite: cfg.suite,
            identify: cfg.identify,
        })
    }

    pub fn num_alternatives(&self) -> usize {
        self.alternatives.len()
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    pub fn regime(&self) -> Regime {
        self.utility.regime()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.utility.dims()
    }

    /// True when neither the disturbance nor the cost scale varies across draws.
    pub fn is_deterministic(&self) -> bool {
        let fixed_e = self.family == DisturbanceFamily::Fixed || self.scale.iter().all(|s| *s == 0.0);
        let fixed_k = match self.cost.kappa {
            KappaConfig::Fixed { .. } => true,
            KappaConfig::Lognormal { log_sd, .. } => log_sd == 0.0,
        };
        fixed_e && fixed_k
    }

    pub fn with_draws(&self, draws: u64) -> Self {
        let mut out = self.clone();
        out.mc.draws = draws;
        out
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut out = self.clone();
        out.mc.seed = seed;
        out
    }

    /// Index of `x` in the grid.
    pub fn grid_index(&self, x: &CovariatePoint) -> Option<usize> {
        self.grid.iter().position(|g| g.distance(x) <= 1e-12)
    }

    /// The decision problem faced by draw `draw` at covariates `x`, with an
    /// optional additive tilt of the utility table.
    pub fn instance_at(
        &self,
        x: &CovariatePoint,
        draw: &Draw,
        tilt: Option<&[Vec<f64>]>,
    ) -> Result<Instance> {
        let mut utility = self.utility.utility(x);
        if let Some(t) = tilt {
            for (row, trow) in utility.iter_mut().zip(t) {
                for (u, d) in row.iter_mut().zip(trow) {
                    *u += d;
                }
            }
        }
        Instance::new(
            self.alternatives.clone(),
            self.states.clone(),
            self.prior.clone(),
            utility,
            draw.disturbance.clone(),
            draw.cost.clone(),
        )
    }
}

fn validate_utility(spec: &UtilitySpec, k: usize, j: usize) -> Result<()> {
    let bad = |m: String| Err(Error::config("utility", m));
    let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
    match spec {
        UtilitySpec::Table { values } => {
            if values.len() != k || values.iter().any(|r| r.len() != j || !finite(r)) {
                return bad(format!("values must be a finite {k} x {j} table"));
            }
        }
        UtilitySpec::LinearInCovariate { intercept, slope } => {
            if intercept.len() != k || intercept.iter().any(|r| r.len() != j || !finite(r)) {
                return bad(format!("intercept must be a finite {k} x {j} table"));
            }
            if slope.len() != k || slope.iter().any(|r| r.len() != j) {
                return bad(format!("slope must be indexed [alternative][state][regressor] ({k} x {j} x L)"));
            }
            for (a, rows) in slope.iter().enumerate() {
                let l = rows[0].len();
                if rows.iter().any(|r| r.len() != l || !finite(r)) {
                    return bad(format!("slope rows of alternative {a} must share one length"));
                }
            }
        }
        UtilitySpec::AdditiveLatentState {
            intercept,
            slope,
            loading,
        } => {
            if intercept.len() != k || !finite(intercept) {
                return bad(format!("intercept must hold {k} finite entries"));
            }
            if slope.len() != k || slope.iter().any(|r| !finite(r)) {
                return bad(format!("slope must hold {k} rows"));
            }
            if loading.len() != k || loading.iter().any(|r| r.len() != j || !finite(r)) {
                return bad(format!("loading must be a finite {k} x {j} table"));
            }
        }
    }
    Ok(())
}

fn build_grid(
    cfg: &CovariateConfig,
    dims: &[usize],
) -> Result<(Vec<CovariatePoint>, Option<Vec<Vec<Vec<f64>>>>)> {
    match (&cfg.axes, &cfg.points) {
        (Some(_), Some(_)) => Err(Error::config("covariates", "give either axes or points, not both")),
        (Some(axes), None) => {
            if axes.len() != dims.len() || axes.iter().zip(dims).any(|(ax, d)| ax.len() != *d) {
                return Err(Error::config(
                    "covariates.axes",
                    format!("expected one axis per regressor, dimensions {dims:?}"),
                ));
            }
            for ax in axes.iter().flatten() {
                if ax.is_empty() {
                    return Err(Error::config("covariates.axes", "empty axis"));
                }
                if ax.iter().any(|v| !v.is_finite()) || ax.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::config("covariates.axes", "axes must be finite and strictly increasing"));
                }
            }
            let flat: Vec<&Vec<f64>> = axes.iter().flatten().collect();
            let mut points = Vec::new();
            let mut idx = vec![0usize; flat.len()];
            loop {
                let mut x = Vec::with_capacity(dims.len());
                let mut c = 0;
                for d in dims {
                    x.push((0..*d).map(|p| flat[c + p][idx[c + p]]).collect());
                    c += d;
                }
                points.push(CovariatePoint(x));
                let mut pos = flat.len();
                loop {
                    if pos == 0 {
                        return Ok((points, Some(axes.clone())));
                    }
                    pos -= 1;
                    idx[pos] += 1;
                    if idx[pos] < flat[pos].len() {
                        break;
                    }
                    idx[pos] = 0;
                }
            }
        }
        (None, Some(points)) => {
            if points.is_empty() {
                return Err(Error::config("covariates.points", "empty grid"));
            }
            let mut out = Vec::with_capacity(points.len());
            for (i, p) in points.iter().enumerate() {
                if p.len() != dims.len() || p.iter().zip(dims).any(|(v, d)| v.len() != *d) {
                    return Err(Error::config(
                        "covariates.points",
                        format!("point {i} does not match dimensions {dims:?}"),
                    ));
                }
                if p.iter().flatten().any(|v| !v.is_finite()) {
                    return Err(Error::config("covariates.points", format!("point {i} is not finite")));
                }
                out.push(CovariatePoint(p.clone()));
            }
            Ok((out, None))
        }
        (None, None) => {
            if dims.iter().any(|d| *d > 0) {
                return Err(Error::config("covariates", "empty grid"));
            }
            Ok((vec![CovariatePoint(vec![Vec::new(); dims.len()])], Some(vec![Vec::new(); dims.len()])))
        }
    }
}

/// One realization of the heterogeneity.
#[derive(Clone, Debug, PartialEq)]
pub struct Draw {
    pub disturbance: Vec<f64>,
    pub cost: AttentionCost,
    /// Realized latent state, for latent-state scenarios.
    pub latent_state: Option<usize>,
}

pub fn sample_draw(scenario: &Scenario, draw_index: u64) -> Draw {
    sample_draw_attempt(scenario, draw_index, 0)
}

/// Draw `draw_index`, redrawn `attempt` times. A function of the master seed
/// and the indices only.
pub fn sample_draw_attempt(scenario: &Scenario, draw_index: u64, attempt: u64) -> Draw {
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.mc.seed);
    rng.set_stream(draw_index);
    rng.set_word_pos(attempt as u128 * 1024);
    let disturbance = (0..scenario.num_alternatives())
        .map(|a| {
            let noise = match scenario.family {
                _ if scenario.scale[a] == 0.0 => 0.0,
                DisturbanceFamily::Fixed => 0.0,
                DisturbanceFamily::Gumbel => {
                    rng.sample(Gumbel::new(0.0, scenario.scale[a]).expect("validated scale"))
                }
                DisturbanceFamily::Normal => {
                    rng.sample(Normal::new(0.0, scenario.scale[a]).expect("validated scale"))
                }
            };
            if scenario.unavailable[a] {
                f64::NEG_INFINITY
            } else {
                scenario.location[a] + noise
            }
        })
        .collect();
    let kappa = match scenario.cost.kappa {
        KappaConfig::Fixed { value } => value,
        KappaConfig::Lognormal { log_mean, log_sd } => {
            rng.sample(LogNormal::new(log_mean, log_sd).expect("validated lognormal"))
        }
    };
    let latent_state = scenario.latent_law.as_ref().map(|law| {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (j, p) in law.probs().iter().enumerate() {
            acc += p;
            if u < acc {
                return j;
            }
        }
        law.states() - 1
    });
    let cost = AttentionCost {
        family: scenario.cost.family,
        scale: kappa,
        center: scenario.prior.clone(),
    };
    Draw {
        disturbance,
        cost,
        latent_state,
    }
}

/// Per-draw outcomes at one covariate point, stored for paired estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct DrawSamples {
    /// `n x K x J`, row-major.
    pub cond: Vec<f64>,
    /// `n x K`
    pub marg: Vec<f64>,
    /// `n`
    pub value: Vec<f64>,
}

/// Monte Carlo summary at one covariate point.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSummary {
    /// `E[P(a | omega_j) | x]`
    pub cond: Vec<Vec<f64>>,
    /// `E[P(a) | x]`
    pub marg: Vec<f64>,
    /// Mean of the per-draw optimal value.
    pub value: f64,
    pub se_cond: Vec<Vec<f64>>,
    pub se_marg: Vec<f64>,
    pub se_value: f64,
    pub draws_used: u64,
    pub rejected: u64,
    pub samples: Option<Arc<DrawSamples>>,
}

impl PointSummary {
    pub fn as_sdsc(&self, mu: &Belief) -> Result<SdscFunction> {
        SdscFunction::new(self.cond.clone(), mu)
    }
}

fn mean_and_se(xs: impl Iterator<Item = f64> + Clone, n: usize) -> (f64, f64) {
    let mean = xs.clone().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

struct DrawOutcome {
    cond: Vec<f64>,
    marg: Vec<f64>,
    value: f64,
    rejected: u64,
}

/// Monte Carlo engine with a per-point cache.
pub struct Simulator<'a> {
    scenario: &'a Scenario,
    workers: Option<usize>,
    cache: Mutex<HashMap<(Vec<u64>, Vec<u64>), Arc<PointSummary>>>,
}

impl<'a> Simulator<'a> {
    pub fn new(scenario: &'a Scenario) -> Self {
        Simulator {
            scenario,
            workers: None,
            cache: Mutex::new(HashMap::new()),
        }
    }

    /// Runs the draw loop on a dedicated pool of `workers` threads. Results do
    /// not depend on the count.
    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = Some(workers.max(1));
        self
    }

    pub fn scenario(&self) -> &Scenario {
        self.scenario
    }

    pub fn summary(&self, x: &CovariatePoint) -> Result<Arc<PointSummary>> {
        self.run(x, None)
    }

    /// Summary under `u + tilt`, with the tilt given as a `K x J` table.
    pub fn tilted(&self, x: &CovariatePoint, tilt: &[Vec<f64>]) -> Result<Arc<PointSummary>> {
        self.run(x, Some(tilt))
    }

    fn run(&self, x: &CovariatePoint, tilt: Option<&[Vec<f64>]>) -> Result<Arc<PointSummary>> {
        let sc = self.scenario;
        let dims = sc.dims();
        if x.0.len() != dims.len() || x.0.iter().zip(&dims).any(|(v, d)| v.len() != *d) {
            return Err(Error::InvalidInput(format!("covariate point does not match dimensions {dims:?}")));
        }
        let tilt_key: Vec<u64> = tilt
            .map(|t| t.iter().flatten().map(|v| v.to_bits()).collect())
            .unwrap_or_default();
        let key = (x.key(), tilt_key);
        if let Some(hit) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(hit.clone());
        }
        let n = sc.mc.draws;
        let outcomes = self.draw_loop(x, tilt, n)?;
        let rejected: u64 = outcomes.iter().map(|o| o.rejected).sum();
        if rejected as f64 > sc.mc.rejection_budget * n as f64 {
            return Err(Error::RejectionBudget { rejected, draws: n });
        }
        let k = sc.num_alternatives();
        let j = sc.num_states();
        let nn = n as usize;
        let mut cond = vec![vec![0.0; j]; k];
        let mut se_cond = vec![vec![0.0; j]; k];
        for a in 0..k {
            for s in 0..j {
                let (m, se) = mean_and_se(outcomes.iter().map(|o| o.cond[a * j + s]), nn);
                cond[a][s] = m;
                se_cond[a][s] = se;
            }
        }
        let mut marg = vec![0.0; k];
        let mut se_marg = vec![0.0; k];
        for a in 0..k {
            let (m, se) = mean_and_se(outcomes.iter().map(|o| o.marg[a]), nn);
            marg[a] = m;
            se_marg[a] = se;
        }
        let (value, se_value) = mean_and_se(outcomes.iter().map(|o| o.value), nn);
        let samples = DrawSamples {
            cond: outcomes.iter().flat_map(|o| o.cond.iter().copied()).collect(),
            marg: outcomes.iter().flat_map(|o| o.marg.iter().copied()).collect(),
            value: outcomes.iter().map(|o| o.value).collect(),
        };
        let summary = Arc::new(PointSummary {
            cond,
            marg,
            value,
            se_cond,
            se_marg,
            se_value,
            draws_used: n,
            rejected,
            samples: Some(Arc::new(samples)),
        });
        self.cache
            .lock()
            .expect("cache lock")
            .insert(key, summary.clone());
        Ok(summary)
    }

    fn draw_loop(
        &self,
        x: &CovariatePoint,
        tilt: Option<&[Vec<f64>]>,
        n: u64,
    ) -> Result<Vec<DrawOutcome>> {
        let solve = |i: u64| self.solve_draw(x, tilt, i);
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            let run = || (0..n).into_par_iter().map(solve).collect::<Result<Vec<_>>>();
            match self.workers {
                Some(w) => rayon::ThreadPoolBuilder::new()
                    .num_threads(w)
                    .build()
                    .map_err(|e| Error::InvalidInput(e.to_string()))?
                    .install(run),
                None => run(),
            }
        }
        #[cfg(not(feature = "parallel"))]
        {
            (0..n).map(solve).collect()
        }
    }

    fn solve_draw(&self, x: &CovariatePoint, tilt: Option<&[Vec<f64>]>, index: u64) -> Result<DrawOutcome> {
        let sc = self.scenario;
        let opts = ConcavifyOptions::default();
        let mut last = None;
        for attempt in 0..MAX_ATTEMPTS {
            let draw = sample_draw_attempt(sc, index, attempt);
            let inst = sc.instance_at(x, &draw, tilt)?;
            match solve_ri_unchecked(&inst, &opts) {
                Ok(sol) => {
                    let rho = generate_sdsc(&sol.policy, &sc.prior)
                        .map_err(|e| Error::Draw { draw: index, source: Box::new(e) })?;
                    let law = sc.latent_law.as_ref().unwrap_or(&sc.prior);
                    let marg = rho
                        .cond
                        .iter()
                        .map(|row| row.iter().zip(law.probs()).map(|(p, m)| p * m).sum())
                        .collect();
                    return Ok(DrawOutcome {
                        cond: rho.cond.into_iter().flatten().collect(),
                        marg,
                        value: sol.envelope.value,
                        rejected: attempt,
                    });
                }
                Err(e @ (Error::DegenerateSupport(_) | Error::NoConvergence(_))) => last = Some(e),
                Err(e) => return Err(Error::Draw { draw: index, source: Box::new(e) }),
            }
        }
        Err(Error::Draw {
            draw: index,
            source: Box::new(last.expect("at least one attempt")),
        })
    }
}

pub fn conditional_mean(scenario: &Scenario, x: &CovariatePoint) -> Result<PointSummary> {
    Simulator::new(scenario).summary(x).map(|s| (*s).clone())
}

/// `E[P(a) | x]` with the latent state integrated out.
pub fn latent_state_mean(scenario: &Scenario, x: &CovariatePoint) -> Result<Vec<f64>> {
    if scenario.regime() != Regime::Market {
        return Err(Error::VariantMismatch(
            "latent-state means need utility kind additive_latent_state".into(),
        ));
    }
    Ok(conditional_mean(scenario, x)?.marg)
}

/// Linear-part advantage of `candidate` over the simulated mean at `x`:
/// `sum_{a,j} (candidate - E[P | x])(a | omega_j) mu(omega_j) u_a(x, omega_j)`.
pub fn rep_agent_residual(
    scenario: &Scenario,
    x: &CovariatePoint,
    candidate: &SdscFunction,
) -> Result<f64> {
    let mean = conditional_mean(scenario, x)?;
    Ok(linear_part_gap(scenario, x, &candidate.cond, &mean.cond))
}

pub(crate) fn linear_part_gap(
    scenario: &Scenario,
    x: &CovariatePoint,
    p: &[Vec<f64>],
    q: &[Vec<f64>],
) -> f64 {
    let u = scenario.utility.utility(x);
    let mu = scenario.prior.probs();
    let mut total = 0.0;
    for a in 0..u.len() {
        for s in 0..mu.len() {
            total += (p[a][s] - q[a][s]) * mu[s] * u[a][s];
        }
    }
    total
}

/// Alternatives with parallel net utilities at `x`; empty when the distinct
/// slopes condition holds there.
pub fn parallel_pairs_at(scenario: &Scenario, x: &CovariatePoint) -> Result<Vec<(usize, usize)>> {
    let inst = scenario.instance_at(x, &sample_draw(scenario, 0), None)?;
    Ok(parallel_pairs(&inst))
}

/// Simulated means over the whole grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalMeanTable {
    pub regime: Regime,
    pub points: Vec<CovariatePoint>,
    pub summaries: Vec<Arc<PointSummary>>,
}

impl ConditionalMeanTable {
    pub fn simulate(sim: &Simulator) -> Result<Self> {
        let sc = sim.scenario();
        let mut summaries = Vec::with_capacity(sc.grid.len());
        for x in &sc.grid {
            summaries.push(sim.summary(x)?);
        }
        Ok(ConditionalMeanTable {
            regime: sc.regime(),
            points: sc.grid.clone(),
            summaries,
        })
    }

    /// Writes `x_id,alternative,state,mean_cond,mean_marg,se,value_mean`. State
    /// tables carry one row per `(x, a, omega)` with `se` the standard error of
    /// `mean_cond`; market tables leave the state columns empty and report the
    /// standard error of `mean_marg`.
    pub fn write_csv<W: Write>(&self, scenario: &Scenario, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::Io(e.to_string());
        w.write_record(["x_id", "alternative", "state", "mean_cond", "mean_marg", "se", "value_mean"])
            .map_err(io)?;
        for (id, s) in self.summaries.iter().enumerate() {
            for (a, name) in scenario.alternatives.iter().enumerate() {
                match self.regime {
                    Regime::State => {
                        for (j, state) in scenario.states.iter().enumerate() {
                            w.write_record([
                                id.to_string(),
                                name.clone(),
                                state.clone(),
                                fmt(s.cond[a][j]),
                                fmt(s.marg[a]),
                                fmt(s.se_cond[a][j]),
                                fmt(s.value),
                            ])
                            .map_err(io)?;
                        }
                    }
                    Regime::Market => {
                        w.write_record([
                            id.to_string(),
                            name.clone(),
                            String::new(),
                            String::new(),
                            fmt(s.marg[a]),
                            fmt(s.se_marg[a]),
                            fmt(s.value),
                        ])
                        .map_err(io)?;
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Companion file `x_id,alternative,regressor,value,value_se,draws_used,rejected`
    /// locating each grid point and carrying the value standard error.
    pub fn write_points_csv<W: Write>(&self, scenario: &Scenario, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::Io(e.to_string());
        w.write_record(["x_id", "alternative", "regressor", "value", "value_se", "draws_used", "rejected"])
            .map_err(io)?;
        for (id, (x, s)) in self.points.iter().zip(&self.summaries).enumerate() {
            let mut any = false;
            for (a, xs) in x.0.iter().enumerate() {
                for (p, v) in xs.iter().enumerate() {
                    any = true;
                    w.write_record([
                        id.to_string(),
                        scenario.alternatives[a].clone(),
                        p.to_string(),
                        fmt(*v),
                        fmt(s.se_value),
                        s.draws_used.to_string(),
                        s.rejected.to_string(),
                    ])
                    .map_err(io)?;
                }
            }
            if !any {
                w.write_record([
                    id.to_string(),
                    String::new(),
                    String::new(),
                    String::new(),
                    fmt(s.se_value),
                    s.draws_used.to_string(),
                    s.rejected.to_string(),
                ])
                .map_err(io)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a table written by [`write_csv`](Self::write_csv) and
    /// [`write_points_csv`](Self::write_points_csv).
    pub fn read_csv<R: Read, P: Read>(scenario: &Scenario, means: R, points: P) -> Result<Self> {
        let k = scenario.num_alternatives();
        let j = scenario.num_states();
        let dims = scenario.dims();
        let alt = |name: &str| {
            scenario
                .alternatives
                .iter()
                .position(|x| x == name)
                .ok_or_else(|| Error::config("means", format!("unknown alternative {name}")))
        };
        let parse = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::config("means", format!("bad number {s:?} in {what}")))
        };

        let mut pts: Vec<(CovariatePoint, f64, u64, u64)> = Vec::new();
        let mut reader = csv::Reader::from_reader(points);
        for rec in reader.records() {
            let rec = rec.map_err(|e| Error::config("points", e.to_string()))?;
            let id: usize = rec[0].parse().map_err(|_| Error::config("points", "bad x_id"))?;
            while pts.len() <= id {
                pts.push((CovariatePoint(dims.iter().map(|d| vec![f64::NAN; *d]).collect()), 0.0, 0, 0));
            }
            if !rec[1].is_empty() {
                let a = alt(&rec[1])?;
                let p: usize = rec[2].parse().map_err(|_| Error::config("points", "bad regressor"))?;
                if p >= dims[a] {
                    return Err(Error::config("points", format!("regressor {p} out of range")));
                }
                pts[id].0 .0[a][p] = parse(&rec[3], "points")?;
            }
            pts[id].1 = parse(&rec[4], "points")?;
            pts[id].2 = rec[5].parse().map_err(|_| Error::config("points", "bad draws_used"))?;
            pts[id].3 = rec[6].parse().map_err(|_| Error::config("points", "bad rejected"))?;
        }

        let regime = scenario.regime();
        let blank = || PointSummary {
            cond: vec![vec![f64::NAN; j]; k],
            marg: vec![f64::NAN; k],
            value: f64::NAN,
            se_cond: vec![vec![f64::NAN; j]; k],
            se_marg: vec![f64::NAN; k],
            se_value: f64::NAN,
            draws_used: 0,
            rejected: 0,
            samples: None,
        };
        let mut sums: Vec<PointSummary> = (0..pts.len()).map(|_| blank()).collect();
        let mut reader = csv::Reader::from_reader(means);
        let headers = reader.headers().map_err(|e| Error::config("means", e.to_string()))?.clone();
        if headers.iter().collect::<Vec<_>>()
            != ["x_id", "alternative", "state", "mean_cond", "mean_marg", "se", "value_mean"]
        {
            return Err(Error::config("means", "unexpected header"));
        }
        for rec in reader.records() {
            let rec = rec.map_err(|e| Error::config("means", e.to_string()))?;
            let id: usize = rec[0].parse().map_err(|_| Error::config("means", "bad x_id"))?;
            let s = sums
                .get_mut(id)
                .ok_or_else(|| Error::config("means", format!("x_id {id} has no covariates")))?;
            let a = alt(&rec[1])?;
            let state_mode = !rec[2].is_empty();
            if state_mode != (regime == Regime::State) {
                return Err(Error::VariantMismatch(
                    "means file regime does not match the scenario".into(),
                ));
            }
            s.marg[a] = parse(&rec[4], "mean_marg")?;
            s.value = parse(&rec[6], "value_mean")?;
            if state_mode {
                let jj = scenario
                    .states
                    .iter()
                    .position(|x| *x == rec[2])
                    .ok_or_else(|| Error::config("means", format!("unknown state {}", &rec[2])))?;
                s.cond[a][jj] = parse(&rec[3], "mean_cond")?;
                s.se_cond[a][jj] = parse(&rec[5], "se")?;
            } else {
                s.se_marg[a] = parse(&rec[5], "se")?;
            }
        }
        for (s, p) in sums.iter_mut().zip(&pts) {
            s.se_value = p.1;
            s.draws_used = p.2;
            s.rejected = p.3;
        }
        for (id, (s, p)) in sums.iter().zip(&pts).enumerate() {
            let incomplete = s.marg.iter().any(|v| v.is_nan())
                || (regime == Regime::State && s.cond.iter().flatten().any(|v| v.is_nan()))
                || p.0 .0.iter().flatten().any(|v| v.is_nan());
            if incomplete {
                return Err(Error::config("means", format!("x_id {id} is incomplete")));
            }
        }
        Ok(ConditionalMeanTable {
            regime,
            points: pts.into_iter().map(|p| p.0).collect(),
            summaries: sums.into_iter().map(Arc::new).collect(),
        })
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
        alternatives = ["a", "b"]
        states = ["w1", "w2"]
        prior = [0.5, 0.5]
        [utility]
        kind = "linear_in_covariate"
        intercept = [[1.0, 0.5], [1.5, 0.2]]
        slope = [[[-1.0], [0.0]], [[-2.0], [0.0]]]
        [heterogeneity.disturbance]
        family = "gumbel"
        scale = 1.0
        [heterogeneity.cost]
        family = "quadratic"
        kappa = { family = "lognormal", log_mean = 0.0, log_sd = 0.25 }
        [covariates]
        axes = [[[0.0, 0.5, 1.0]], [[0.0, 0.5]]]
        [mc]
        draws = 200
        seed = 11
    "#;

    #[test]
    fn parses_and_builds_grid() {
        let sc = Scenario::from_toml_str(BASE).unwrap();
        assert_eq!(sc.grid.len(), 6);
        assert_eq!(sc.grid[1], CovariatePoint(vec![vec![0.0], vec![0.5]]));
        assert_eq!(sc.utility.regressor_state(0, 0), Some(0));
        let u = sc.utility.utility(&sc.grid[5]);
        assert_eq!(u, vec![vec![0.0, 0.5], vec![0.5, 0.2]]);
    }

    #[test]
    fn malformed_prior_names_the_field() {
        let bad = BASE.replace("prior = [0.5, 0.5]", "prior = [0.5, 0.4]");
        match Scenario::from_toml_str(&bad) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "prior"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn draws_are_deterministic_and_covariate_free() {
        let sc = Scenario::from_toml_str(BASE).unwrap();
        assert_eq!(sample_draw(&sc, 17), sample_draw(&sc, 17));
        assert_ne!(sample_draw(&sc, 17), sample_draw(&sc, 18));
        assert!(sample_draw(&sc, 3).latent_state.is_none());
    }

    #[test]
    fn table_csv_round_trip() {
        let sc = Scenario::from_toml_str(BASE).unwrap().with_draws(20);
        let sim = Simulator::new(&sc);
        let table = ConditionalMeanTable::simulate(&sim).unwrap();
        let (mut m, mut p) = (Vec::new(), Vec::new());
        table.write_csv(&sc, &mut m).unwrap();
        table.write_points_csv(&sc, &mut p).unwrap();
        let back = ConditionalMeanTable::read_csv(&sc, m.as_slice(), p.as_slice()).unwrap();
        assert_eq!(back.points, table.points);
        for (x, y) in back.summaries.iter().zip(&table.summaries) {
            assert_eq!(x.cond, y.cond);
            assert_eq!(x.se_cond, y.se_cond);
            assert_eq!(x.value, y.value);
            assert_eq!(x.se_value, y.se_value);
        }
    }
}

//! Identification from conditional mean choice data: Roy's identity, Slutsky
//! conditions, utility ratios and recovery, welfare differences and
//! counterfactual bounds.
//!
//! Two regimes share one implementation. In the state regime the coordinates
//! are the utilities `u_a(x, omega_j)` and the gradient of mean indirect
//! utility is `E[P(a | omega_j) | x] mu(omega_j)`. In the market regime the
//! coordinates are the good-specific utilities `u_a(x_a)` and the gradient is
//! `E[P(a) | x]`.

use crate::error::{Error, Result};
use crate::population::{
    ConditionalMeanTable, CovariatePoint, PointSummary, Regime, Scenario, Simulator, UtilitySpec,
};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Simpson nodes on `[0, 1]` used by the welfare integral.
pub const WELFARE_NODES: usize = 9;
/// A cell is paired when its derivative exceeds this many standard errors.
pub const PAIRING_SE_MULTIPLE: f64 = 10.0;
/// Absolute floor of the pairing threshold, for noiseless data.
pub const PAIRING_FLOOR: f64 = 1e-9;
/// Standard errors below this are treated as round-off.
const SE_FLOOR: f64 = 1e-12;
/// Smallest utility tilt accepted by the Roy and Slutsky checks.
pub const MIN_TILT_STEP: f64 = 1e-6;

/// A point estimate with its Monte Carlo standard error.
///
/// When built from simulated draws it also keeps the per-draw contributions,
/// so linear combinations across covariate points and tilts inherit the
/// common random numbers.
#[derive(Clone, Debug, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
    pub draws: Option<Arc<[f64]>>,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Estimate {
            value,
            se: 0.0,
            draws: None,
        }
    }

    fn with_draws(value: f64, draws: Vec<f64>) -> Self {
        let se = sample_se(&draws);
        Estimate {
            value,
            se,
            draws: Some(draws.into()),
        }
    }

    /// `sum c_i e_i`. Uses the paired per-draw values when every term has
    /// them, and otherwise treats the terms as independent.
    pub fn lin(terms: &[(f64, &Estimate)]) -> Estimate {
        let value = terms.iter().map(|(c, e)| c * e.value).sum();
        let n = terms.first().and_then(|(_, e)| e.draws.as_ref().map(|d| d.len()));
        let paired = terms
            .iter()
            .all(|(_, e)| e.draws.as_ref().map(|d| d.len()) == n && n.is_some());
        if paired {
            let n = n.unwrap_or(0);
            let mut out = vec![0.0; n];
            for (c, e) in terms {
                if *c != 0.0 {
                    for (o, d) in out.iter_mut().zip(e.draws.as_ref().expect("paired").iter()) {
                        *o += c * d;
                    }
                }
            }
            return Estimate::with_draws(value, out);
        }
        let se = terms.iter().map(|(c, e)| (c * e.se).powi(2)).sum::<f64>().sqrt();
        Estimate {
            value,
            se,
            draws: None,
        }
    }

    /// `self / den`, linearized per draw when both sides are paired.
    pub fn ratio(&self, den: &Estimate) -> Estimate {
        let r = self.value / den.value;
        match (&self.draws, &den.draws) {
            (Some(a), Some(b)) if a.len() == b.len() => {
                let d = a.iter().zip(b.iter()).map(|(x, y)| r + (x - r * y) / den.value).collect();
                Estimate::with_draws(r, d)
            }
            _ => {
                let rel = (self.se / self.value).powi(2) + (den.se / den.value).powi(2);
                let se = if self.value == 0.0 {
                    self.se / den.value.abs()
                } else {
                    r.abs() * rel.sqrt()
                };
                Estimate {
                    value: r,
                    se,
                    draws: None,
                }
            }
        }
    }

    /// `self * other`, linearized per draw when both sides are paired, and
    /// bounded by `|a| se_b + |b| se_a` otherwise.
    pub fn mul(&self, other: &Estimate) -> Estimate {
        let (a, b) = (self.value, other.value);
        match (&self.draws, &other.draws) {
            (Some(x), Some(y)) if x.len() == y.len() => {
                let d = x.iter().zip(y.iter()).map(|(u, v)| a * b + b * (u - a) + a * (v - b)).collect();
                Estimate::with_draws(a * b, d)
            }
            _ => Estimate {
                value: a * b,
                se: a.abs() * other.se + b.abs() * self.se,
                draws: None,
            },
        }
    }

    pub fn scale(&self, c: f64) -> Estimate {
        Estimate::lin(&[(c, self)])
    }

    /// `|value - target| <= k se + abs_tol`
    pub fn within(&self, target: f64, k: f64, abs_tol: f64) -> bool {
        (self.value - target).abs() <= k * self.se + abs_tol
    }
}

fn sample_se(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}

/// One observed quantity of a [`PointSummary`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cell {
    Cond(usize, usize),
    Marg(usize),
    Value,
}

/// Estimate of one cell of a summary.
pub fn cell(s: &PointSummary, c: Cell) -> Estimate {
    let (value, se) = match c {
        Cell::Cond(a, j) => (s.cond[a][j], s.se_cond[a][j]),
        Cell::Marg(a) => (s.marg[a], s.se_marg[a]),
        Cell::Value => (s.value, s.se_value),
    };
    let draws = s.samples.as_ref().map(|d| {
        let k = s.marg.len();
        let jn = s.cond.first().map_or(0, Vec::len);
        let n = d.value.len();
        let v: Vec<f64> = match c {
            Cell::Cond(a, j) => (0..n).map(|i| d.cond[i * k * jn + a * jn + j]).collect(),
            Cell::Marg(a) => (0..n).map(|i| d.marg[i * k + a]).collect(),
            Cell::Value => d.value.clone(),
        };
        Arc::from(v)
    });
    Estimate { value, se, draws }
}

/// Where conditional means come from.
pub trait MeanSource {
    fn scenario(&self) -> &Scenario;

    fn summary(&self, x: &CovariatePoint) -> Result<Arc<PointSummary>>;

    /// Summary under the utility table `u(x) + tilt`.
    fn tilted(&self, _x: &CovariatePoint, _tilt: &[Vec<f64>]) -> Result<Arc<PointSummary>> {
        Err(Error::TiltUnavailable)
    }
}

impl MeanSource for Simulator<'_> {
    fn scenario(&self) -> &Scenario {
        Simulator::scenario(self)
    }

    fn summary(&self, x: &CovariatePoint) -> Result<Arc<PointSummary>> {
        Simulator::summary(self, x)
    }

    fn tilted(&self, x: &CovariatePoint, tilt: &[Vec<f64>]) -> Result<Arc<PointSummary>> {
        Simulator::tilted(self, x, tilt)
    }
}

/// A table read from disk: only its own covariate points are available.
pub struct TableSource<'a> {
    pub scenario: &'a Scenario,
    pub table: &'a ConditionalMeanTable,
}

impl MeanSource for TableSource<'_> {
    fn scenario(&self) -> &Scenario {
        self.scenario
    }

    fn summary(&self, x: &CovariatePoint) -> Result<Arc<PointSummary>> {
        self.table
            .points
            .iter()
            .position(|p| p.distance(x) <= 1e-12)
            .map(|i| self.table.summaries[i].clone())
            .ok_or_else(|| Error::PathPointMissing(format!("{:?}", x.0)))
    }
}

/// A table backed by a simulator for points and tilts the table lacks.
pub struct Layered<'a> {
    pub table: TableSource<'a>,
    pub simulator: &'a Simulator<'a>,
}

impl MeanSource for Layered<'_> {
    fn scenario(&self) -> &Scenario {
        self.table.scenario
    }

    fn summary(&self, x: &CovariatePoint) -> Result<Arc<PointSummary>> {
        match self.table.summary(x) {
            Err(Error::PathPointMissing(_)) => self.simulator.summary(x),
            other => other,
        }
    }

    fn tilted(&self, x: &CovariatePoint, tilt: &[Vec<f64>]) -> Result<Arc<PointSummary>> {
        self.simulator.tilted(x, tilt)
    }
}

/// Gradient cells and their weights: `mu_j` on `Cond(a, j)` in the state
/// regime, 1 on `Marg(a)` in the market regime.
fn gradient_cells(sc: &Scenario, regime: Regime) -> Vec<(Cell, f64)> {
    let k = sc.num_alternatives();
    match regime {
        Regime::State => {
            let mu = sc.prior.probs();
            (0..k)
                .flat_map(|a| (0..mu.len()).map(move |j| (Cell::Cond(a, j), mu[j])))
                .collect()
        }
        Regime::Market => (0..k).map(|a| (Cell::Marg(a), 1.0)).collect(),
    }
}

/// Utility coordinates at `x`, aligned with [`gradient_cells`].
fn coordinates(sc: &Scenario, regime: Regime, x: &CovariatePoint) -> Result<Vec<f64>> {
    match regime {
        Regime::State => Ok(sc.utility.utility(x).into_iter().flatten().collect()),
        Regime::Market => sc.utility.market_utility(x).ok_or_else(|| {
            Error::VariantMismatch("market formulas need utility kind additive_latent_state".into())
        }),
    }
}

fn check_regime(sc: &Scenario, regime: Regime) -> Result<()> {
    if regime == Regime::State && sc.regime() == Regime::Market {
        return Err(Error::VariantMismatch(
            "state-level means are not observed in a latent-state scenario".into(),
        ));
    }
    if regime == Regime::Market && sc.regime() == Regime::State {
        return Err(Error::VariantMismatch(
            "market formulas need utility kind additive_latent_state".into(),
        ));
    }
    Ok(())
}

/// Tilt table raising coordinate `c` by `h`.
fn tilt_for(sc: &Scenario, regime: Regime, c: usize, h: f64) -> Vec<Vec<f64>> {
    let (k, j) = (sc.num_alternatives(), sc.num_states());
    let mut t = vec![vec![0.0; j]; k];
    match regime {
        Regime::State => t[c / j][c % j] = h,
        Regime::Market => t[c].iter_mut().for_each(|v| *v = h),
    }
    t
}

/// Signed Roy residual `dV/dv_c - g_c` for coordinate `c`: the central
/// difference of mean indirect utility under a `+-h` tilt minus the observed
/// gradient cell. Coordinates are `(a, j)` in the state regime, with `c = a J + j`.
pub fn roy_residual_at(src: &dyn MeanSource, regime: Regime, x: &CovariatePoint, c: usize, h: f64) -> Result<Estimate> {
    let sc = src.scenario();
    check_regime(sc, regime)?;
    if !(h >= MIN_TILT_STEP) {
        return Err(Error::StepTooSmall(format!("tilt step {h:e} below {MIN_TILT_STEP:e}")));
    }
    let up = src.tilted(x, &tilt_for(sc, regime, c, h))?;
    let down = src.tilted(x, &tilt_for(sc, regime, c, -h))?;
    let base = src.summary(x)?;
    let (gc, w) = gradient_cells(sc, regime)[c];
    let (vu, vd, g) = (cell(&up, Cell::Value), cell(&down, Cell::Value), cell(&base, gc));
    Ok(Estimate::lin(&[(0.5 / h, &vu), (-0.5 / h, &vd), (-w, &g)]))
}

/// Roy's identity for `u_a(., omega_j)`.
pub fn roy_residual(src: &dyn MeanSource, x: &CovariatePoint, a: usize, j: usize, h: f64) -> Result<Estimate> {
    roy_residual_at(src, Regime::State, x, a * src.scenario().num_states() + j, h)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SymmetryPair {
    pub row: usize,
    pub col: usize,
    /// `H[row][col] - H[col][row]`
    pub difference: Estimate,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlutskyReport {
    /// Finite-difference Hessian of mean indirect utility in the coordinates.
    pub hessian: Vec<Vec<f64>>,
    pub pairs: Vec<SymmetryPair>,
    /// Largest `|H - H^T|` entry.
    pub symmetry_residual: f64,
    /// Largest `|H - H^T|` entry in units of its standard error.
    pub symmetry_se_multiple: f64,
    /// Smallest eigenvalue of `(H + H^T) / 2`.
    pub min_eigenvalue: f64,
    /// Largest standard error among the Hessian entries.
    pub max_entry_se: f64,
}

/// Slutsky symmetry and positive semidefiniteness at `x`, from differences of
/// the observed gradient under `+-h` tilts.
pub fn slutsky_check_at(src: &dyn MeanSource, regime: Regime, x: &CovariatePoint, h: f64) -> Result<SlutskyReport> {
    let sc = src.scenario();
    check_regime(sc, regime)?;
    if !(h >= MIN_TILT_STEP) {
        return Err(Error::StepTooSmall(format!("tilt step {h:e} below {MIN_TILT_STEP:e}")));
    }
    let cells = gradient_cells(sc, regime);
    let n = cells.len();
    let mut entries: Vec<Vec<Estimate>> = Vec::with_capacity(n);
    for c in 0..n {
        let up = src.tilted(x, &tilt_for(sc, regime, c, h))?;
        let down = src.tilted(x, &tilt_for(sc, regime, c, -h))?;
        entries.push(
            cells
                .iter()
                .map(|(gc, w)| {
                    let (p, m) = (cell(&up, *gc), cell(&down, *gc));
                    Estimate::lin(&[(0.5 * w / h, &p), (-0.5 * w / h, &m)])
                })
                .collect(),
        );
    }
    // entries[c][r] = dg_r / dv_c = H[r][c]
    let hessian: Vec<Vec<f64>> = (0..n).map(|r| (0..n).map(|c| entries[c][r].value).collect()).collect();
    let mut pairs = Vec::new();
    let (mut worst, mut worst_multiple, mut max_se) = (0.0f64, 0.0f64, 0.0f64);
    for r in 0..n {
        for c in 0..n {
            max_se = max_se.max(entries[c][r].se);
            if c > r {
                let d = Estimate::lin(&[(1.0, &entries[c][r]), (-1.0, &entries[r][c])]);
                worst = worst.max(d.value.abs());
                worst_multiple = worst_multiple.max(d.value.abs() / d.se.max(SE_FLOOR));
                pairs.push(SymmetryPair { row: r, col: c, difference: d });
            }
        }
    }
    let sym = DMatrix::from_fn(n, n, |r, c| 0.5 * (hessian[r][c] + hessian[c][r]));
    let min_eigenvalue = if n == 0 {
        0.0
    } else {
        sym.symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min)
    };
    Ok(SlutskyReport {
        hessian,
        pairs,
        symmetry_residual: worst,
        symmetry_se_multiple: worst_multiple,
        min_eigenvalue,
        max_entry_se: max_se,
    })
}

impl SlutskyReport {
    /// Every symmetry difference lies within `k` standard errors plus `abs_tol`.
    pub fn symmetric_within(&self, k: f64, abs_tol: f64) -> bool {
        self.pairs
            .iter()
            .all(|p| p.difference.value.abs() <= k * p.difference.se + abs_tol)
    }
}

pub fn slutsky_check(src: &dyn MeanSource, x: &CovariatePoint, h: f64) -> Result<SlutskyReport> {
    slutsky_check_at(src, Regime::State, x, h)
}

/// Grid neighbours of `x` along regressor `(a, p)`: central where possible,
/// one-sided at the edges of the axis.
fn axis_neighbours(sc: &Scenario, x: &CovariatePoint, a: usize, p: usize) -> Result<(CovariatePoint, CovariatePoint)> {
    let axes = sc
        .axes
        .as_ref()
        .ok_or_else(|| Error::GridNotRectangular("covariates are listed as points, not axes".into()))?;
    let axis = &axes[a][p];
    let v = x.get(a, p);
    let i = axis
        .iter()
        .position(|t| (t - v).abs() <= 1e-12)
        .ok_or_else(|| Error::InvalidInput(format!("x_{{{a},{p}}} = {v} is not on its axis")))?;
    if axis.len() < 2 {
        return Err(Error::GridNotRectangular(format!("axis of x_{{{a},{p}}} has a single value")));
    }
    let lo = if i == 0 { 0 } else { i - 1 };
    let hi = if i + 1 == axis.len() { i } else { i + 1 };
    Ok((x.with(a, p, axis[lo]), x.with(a, p, axis[hi])))
}

/// Finite-difference derivative of a gradient cell in regressor `(a, p)`.
pub fn cell_derivative(src: &dyn MeanSource, x: &CovariatePoint, a: usize, p: usize, c: Cell) -> Result<Estimate> {
    let (lo, hi) = axis_neighbours(src.scenario(), x, a, p)?;
    let span = hi.get(a, p) - lo.get(a, p);
    let (sl, sh) = (src.summary(&lo)?, src.summary(&hi)?);
    let (el, eh) = (cell(&sl, c), cell(&sh, c));
    Ok(Estimate::lin(&[(1.0 / span, &eh), (-1.0 / span, &el)]))
}

/// A utility ratio with its two cross derivatives.
#[derive(Clone, Debug, PartialEq)]
pub struct RatioEstimate {
    pub ratio: Estimate,
    /// Derivative of the `b` cell in `x_{a,p}`.
    pub numerator: Estimate,
    /// Derivative of the `a` cell in `x_{b,q}`.
    pub denominator: Estimate,
    /// Both cross derivatives clear the pairing threshold.
    pub strictly_paired: bool,
}

fn pairing_threshold(e: &Estimate) -> f64 {
    (PAIRING_SE_MULTIPLE * e.se).max(PAIRING_FLOOR)
}

fn ratio_impl(
    src: &dyn MeanSource,
    x: &CovariatePoint,
    (a, p): (usize, usize),
    (b, q): (usize, usize),
    state: Option<usize>,
) -> Result<RatioEstimate> {
    let sc = src.scenario();
    if a == b {
        return Err(Error::InvalidInput("utility ratios need two distinct alternatives".into()));
    }
    let dims = sc.dims();
    if a >= dims.len() || b >= dims.len() || p >= dims[a] || q >= dims[b] {
        return Err(Error::InvalidInput(format!("no regressor ({a}, {p}) or ({b}, {q})")));
    }
    let (ca, cb) = match state {
        Some(j) => {
            for (alt, reg) in [(a, p), (b, q)] {
                if sc.utility.regressor_state(alt, reg) != Some(j) {
                    return Err(Error::InvalidInput(format!(
                        "regressor ({alt}, {reg}) does not enter only state {j}"
                    )));
                }
            }
            (Cell::Cond(a, j), Cell::Cond(b, j))
        }
        None => (Cell::Marg(a), Cell::Marg(b)),
    };
    let numerator = cell_derivative(src, x, a, p, cb)?;
    let denominator = cell_derivative(src, x, b, q, ca)?;
    let threshold = pairing_threshold(&denominator);
    if !(denominator.value.abs() > threshold) {
        return Err(Error::NotPaired {
            cell: format!("x = {:?}, ({a},{p}) vs ({b},{q})", x.0),
            denominator: denominator.value,
            threshold,
        });
    }
    let strictly_paired = numerator.value.abs() > pairing_threshold(&numerator);
    Ok(RatioEstimate {
        ratio: numerator.ratio(&denominator),
        numerator,
        denominator,
        strictly_paired,
    })
}

/// `(dE[P(b|omega_j)|x]/dx_{a,p}) / (dE[P(a|omega_j)|x]/dx_{b,q})`, which
/// identifies `(du_a/dx_{a,p}) / (du_b/dx_{b,q})`.
pub fn utility_ratio(
    src: &dyn MeanSource,
    x: &CovariatePoint,
    (a, p): (usize, usize),
    (b, q): (usize, usize),
    j: usize,
) -> Result<RatioEstimate> {
    check_regime(src.scenario(), Regime::State)?;
    ratio_impl(src, x, (a, p), (b, q), Some(j))
}

/// The same ratio from unconditional means.
pub fn market_utility_ratio(
    src: &dyn MeanSource,
    x: &CovariatePoint,
    (a, p): (usize, usize),
    (b, q): (usize, usize),
) -> Result<RatioEstimate> {
    check_regime(src.scenario(), Regime::Market)?;
    ratio_impl(src, x, (a, p), (b, q), None)
}

/// Scale and location normalization for utility recovery.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    /// Alternative `b` and regressor `q` whose derivative is fixed.
    pub alternative: usize,
    pub regressor: usize,
    /// State `j` of the scale anchor; `None` in the market regime.
    pub state: Option<usize>,
    /// `du_b/dx_{b,q}` at the reference point, `+1` or `-1`.
    pub sign: f64,
    /// Grid point supplying `x_b*` and the other alternatives' covariates.
    pub reference: CovariatePoint,
}

impl Normalization {
    pub fn from_config(sc: &Scenario, cfg: &NormalizationConfig) -> Result<Self> {
        let alternative = sc
            .alternatives
            .iter()
            .position(|a| *a == cfg.alternative)
            .ok_or_else(|| Error::config("identify.normalization.alternative", "unknown alternative"))?;
        if cfg.regressor >= sc.dims()[alternative] {
            return Err(Error::config("identify.normalization.regressor", "out of range"));
        }
        let state = match (&cfg.state, sc.regime()) {
            (Some(s), Regime::State) => Some(
                sc.states
                    .iter()
                    .position(|x| x == s)
                    .ok_or_else(|| Error::config("identify.normalization.state", "unknown state"))?,
            ),
            (None, Regime::State) => {
                return Err(Error::config("identify.normalization.state", "required for state-level data"))
            }
            (_, Regime::Market) => None,
        };
        if cfg.sign != 1.0 && cfg.sign != -1.0 {
            return Err(Error::config("identify.normalization.sign", "must be +1 or -1"));
        }
        let reference = sc
            .grid
            .get(cfg.reference)
            .cloned()
            .ok_or_else(|| Error::config("identify.normalization.reference", "no such grid point"))?;
        Ok(Normalization {
            alternative,
            regressor: cfg.regressor,
            state,
            sign: cfg.sign,
            reference,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecoveredPoint {
    /// Attribute vector `x_a`.
    pub x: Vec<f64>,
    pub utility: Estimate,
}

/// Recovered `u_a` on the grid of each alternative's own attributes.
#[derive(Clone, Debug, PartialEq)]
pub struct RecoveredUtilities {
    pub sign: f64,
    pub state: Option<usize>,
    pub alternatives: Vec<Vec<RecoveredPoint>>,
}

impl RecoveredUtilities {
    pub fn at(&self, a: usize, x: &[f64]) -> Option<&Estimate> {
        self.alternatives[a]
            .iter()
            .find(|r| r.x.iter().zip(x).all(|(u, v)| (u - v).abs() <= 1e-12))
            .map(|r| &r.utility)
    }
}

fn product_grid(axes: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::new()];
    for ax in axes {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                ax.iter().map(move |v| {
                    let mut p = prefix.clone();
                    p.push(*v);
                    p
                })
            })
            .collect();
    }
    out
}

fn recover_impl(src: &dyn MeanSource, norm: &Normalization) -> Result<RecoveredUtilities> {
    let sc = src.scenario();
    let axes = sc
        .axes
        .clone()
        .ok_or_else(|| Error::GridNotRectangular("covariates are listed as points, not axes".into()))?;
    let (b, q, state) = (norm.alternative, norm.regressor, norm.state);
    let dims = sc.dims();
    let k = dims.len();
    for (a, ax) in axes.iter().enumerate() {
        for (p, axis) in ax.iter().enumerate() {
            if !axis.contains(&0.0) {
                return Err(Error::GridNotRectangular(format!(
                    "axis of x_{{{a},{p}}} does not contain the location anchor 0"
                )));
            }
            if let Some(j) = state {
                if sc.utility.regressor_state(a, p) != Some(j) {
                    return Err(Error::InvalidInput(format!(
                        "regressor ({a}, {p}) does not enter only state {j}"
                    )));
                }
            }
        }
    }
    let ratio = |x: &CovariatePoint, ap: (usize, usize), bq: (usize, usize)| -> Result<Estimate> {
        Ok(ratio_impl(src, x, ap, bq, state)?.ratio)
    };
    let scale = Estimate::exact(norm.sign);
    let x_ref = &norm.reference;

    // d[a](x_a) = du_a/dx_{a,p} for every p, evaluated at x_ref with x_a replaced.
    let helper = (0..k).find(|c| *c != b && dims[*c] > 0);
    let derivative = |a: usize, xa: &[f64], p: usize| -> Result<Estimate> {
        let mut x = x_ref.clone();
        x.0[a] = xa.to_vec();
        if a != b {
            return Ok(ratio(&x, (a, p), (b, q))?.mul(&scale));
        }
        let c = helper.ok_or_else(|| {
            Error::InvalidInput("recovering the anchor alternative needs a second alternative with regressors".into())
        })?;
        // du_c/dx_{c,0} at x_ref, then du_b/dx_{b,p} = ratio * that.
        let dc = ratio(x_ref, (c, 0), (b, q))?.mul(&scale);
        Ok(ratio(&x, (b, p), (c, 0))?.mul(&dc))
    };

    let mut alternatives = Vec::with_capacity(k);
    for a in 0..k {
        let pts = product_grid(&axes[a]);
        let mut out = Vec::with_capacity(pts.len());
        for xa in pts {
            // Staircase from 0: coordinate 0 first, then 1, and so on.
            let mut terms: Vec<(f64, Estimate)> = Vec::new();
            let mut cur = vec![0.0; xa.len()];
            for p in 0..xa.len() {
                let axis = &axes[a][p];
                let i0 = axis.iter().position(|v| *v == 0.0).expect("checked above");
                let i1 = axis.iter().position(|v| *v == xa[p]).expect("grid value");
                let (lo, hi, sign) = if i1 >= i0 { (i0, i1, 1.0) } else { (i1, i0, -1.0) };
                for i in lo..hi {
                    let w = 0.5 * sign * (axis[i + 1] - axis[i]);
                    for node in [i, i + 1] {
                        cur[p] = axis[node];
                        terms.push((w, derivative(a, &cur, p)?));
                    }
                }
                cur[p] = xa[p];
            }
            let refs: Vec<(f64, &Estimate)> = terms.iter().map(|(w, e)| (*w, e)).collect();
            let utility = if refs.is_empty() { Estimate::exact(0.0) } else { Estimate::lin(&refs) };
            out.push(RecoveredPoint { x: xa, utility });
        }
        alternatives.push(out);
    }
    Ok(RecoveredUtilities {
        sign: norm.sign,
        state,
        alternatives,
    })
}

/// Integrates identified derivative ratios from the location anchor
/// `u_a(0) = 0`, scaled so that `du_b/dx_{b,q} = sign` at the reference point.
/// In the state regime every regressor must enter only the anchor state.
pub fn recover_utilities(src: &dyn MeanSource, norm: &Normalization) -> Result<RecoveredUtilities> {
    check_regime(src.scenario(), Regime::State)?;
    if norm.state.is_none() {
        return Err(Error::InvalidInput("state-level recovery needs an anchor state".into()));
    }
    recover_impl(src, norm)
}

pub fn market_recover(src: &dyn MeanSource, norm: &Normalization) -> Result<RecoveredUtilities> {
    check_regime(src.scenario(), Regime::Market)?;
    let mut norm = norm.clone();
    norm.state = None;
    recover_impl(src, &norm)
}

/// Change in mean indirect utility and in the aggregate perturbation term
/// `D = V - sum g u` between two covariate points.
#[derive(Clone, Debug, PartialEq)]
pub struct WelfareDifference {
    pub dv: Estimate,
    pub dd: Estimate,
    /// Change in the linear part `sum g u`.
    pub dl: Estimate,
}

fn bounding_box(sc: &Scenario) -> Vec<(f64, f64)> {
    let flat: Vec<Vec<f64>> = sc.grid.iter().map(|p| p.0.iter().flatten().copied().collect()).collect();
    let n = flat.first().map_or(0, Vec::len);
    (0..n)
        .map(|i| {
            flat.iter()
                .map(|p| p[i])
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)))
        })
        .collect()
}

fn inside(bbox: &[(f64, f64)], x: &CovariatePoint) -> bool {
    x.0.iter()
        .flatten()
        .zip(bbox)
        .all(|(v, (l, h))| *v >= l - 1e-12 && *v <= h + 1e-12)
}

fn linear_part(sc: &Scenario, regime: Regime, s: &PointSummary, u: &[f64]) -> Estimate {
    let cells = gradient_cells(sc, regime);
    let es: Vec<Estimate> = cells.iter().map(|(c, _)| cell(s, *c)).collect();
    let terms: Vec<(f64, &Estimate)> = cells.iter().zip(&es).zip(u).map(|(((_, w), e), u)| (w * u, e)).collect();
    Estimate::lin(&terms)
}

/// Welfare difference in either regime; see [`welfare_difference`].
pub fn welfare_difference_at(src: &dyn MeanSource, regime: Regime, x: &CovariatePoint, x1: &CovariatePoint) -> Result<WelfareDifference> {
    let sc = src.scenario();
    check_regime(sc, regime)?;
    let bbox = bounding_box(sc);
    if !inside(&bbox, x) {
        return Err(Error::PathLeavesSupport { t: 0.0 });
    }
    if !inside(&bbox, x1) {
        return Err(Error::PathLeavesSupport { t: 1.0 });
    }
    let u0 = coordinates(sc, regime, x)?;
    let u1 = coordinates(sc, regime, x1)?;
    let du: Vec<f64> = u1.iter().zip(&u0).map(|(a, b)| a - b).collect();
    let m = WELFARE_NODES - 1;
    let mut nodes = Vec::with_capacity(WELFARE_NODES);
    for i in 0..WELFARE_NODES {
        let t = i as f64 / m as f64;
        let w = match i {
            0 => 1.0,
            i if i == m => 1.0,
            i if i % 2 == 1 => 4.0,
            _ => 2.0,
        } / (3.0 * m as f64);
        let s = src.summary(&x.lerp(x1, t))?;
        nodes.push((w, linear_part(sc, regime, &s, &du)));
    }
    let terms: Vec<(f64, &Estimate)> = nodes.iter().map(|(w, e)| (*w, e)).collect();
    let dv = Estimate::lin(&terms);
    let l1 = linear_part(sc, regime, &*src.summary(x1)?, &u1);
    let l0 = linear_part(sc, regime, &*src.summary(x)?, &u0);
    let dl = Estimate::lin(&[(1.0, &l1), (-1.0, &l0)]);
    let dd = Estimate::lin(&[(1.0, &dv), (-1.0, &dl)]);
    Ok(WelfareDifference { dv, dd, dl })
}

/// `V(u(x')) - V(u(x))` as the path integral of the observed gradient along
/// `x(t) = x + t (x' - x)` (composite Simpson, 9 nodes), using the true
/// utilities of the scenario. The path must stay in the bounding box of the
/// covariate grid.
pub fn welfare_difference(src: &dyn MeanSource, x: &CovariatePoint, x1: &CovariatePoint) -> Result<WelfareDifference> {
    welfare_difference_at(src, Regime::State, x, x1)
}

pub fn market_welfare(src: &dyn MeanSource, x: &CovariatePoint, x1: &CovariatePoint) -> Result<WelfareDifference> {
    welfare_difference_at(src, Regime::Market, x, x1)
}

/// First-order check of the perturbation term between two nearby points:
/// `(dD + sum_c w_c u_c(x) dg_c) / |dP|`, where `dP` collects the changes of
/// the observed choice probabilities.
pub fn cost_derivative_check_at(src: &dyn MeanSource, regime: Regime, x: &CovariatePoint, x1: &CovariatePoint) -> Result<Estimate> {
    let sc = src.scenario();
    let wd = welfare_difference_at(src, regime, x, x1)?;
    let (s0, s1) = (src.summary(x)?, src.summary(x1)?);
    let cells = gradient_cells(sc, regime);
    let u = coordinates(sc, regime, x)?;
    let diffs: Vec<Estimate> = cells
        .iter()
        .map(|(c, _)| Estimate::lin(&[(1.0, &cell(&s1, *c)), (-1.0, &cell(&s0, *c))]))
        .collect();
    let norm = diffs.iter().map(|d| d.value * d.value).sum::<f64>().sqrt();
    let noise = diffs.iter().map(|d| d.se * d.se).sum::<f64>().sqrt();
    if !(norm > (4.0 * noise).max(1e-12)) {
        return Err(Error::StepTooSmall(format!(
            "change in choice probabilities {norm:e} is below the noise floor"
        )));
    }
    let mut terms: Vec<(f64, &Estimate)> = vec![(1.0, &wd.dd)];
    for (((_, w), d), u) in cells.iter().zip(&diffs).zip(&u) {
        terms.push((w * u, d));
    }
    Ok(Estimate::lin(&terms).scale(1.0 / norm))
}

pub fn cost_derivative_check(src: &dyn MeanSource, x: &CovariatePoint, x1: &CovariatePoint) -> Result<Estimate> {
    cost_derivative_check_at(src, Regime::State, x, x1)
}

/// A hypothesized gradient at an unobserved point and an observed path.
#[derive(Clone, Debug, PartialEq)]
pub struct CounterfactualQuery<C> {
    pub x0: CovariatePoint,
    /// `x^1 .. x^{S-1}`; at least one point.
    pub path: Vec<CovariatePoint>,
    /// `K x J` conditional means in the state regime, `K` marginals in the market regime.
    pub candidate: C,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundEvaluation {
    pub lhs: f64,
    pub rhs: Estimate,
    /// `lhs - rhs`, nonnegative for any admissible candidate.
    pub gap: Estimate,
}

impl BoundEvaluation {
    pub fn satisfied(&self, tol: f64) -> bool {
        self.gap.value >= -tol
    }
}

fn bound_impl(src: &dyn MeanSource, regime: Regime, x0: &CovariatePoint, path: &[CovariatePoint], g0: &[f64]) -> Result<BoundEvaluation> {
    let sc = src.scenario();
    check_regime(sc, regime)?;
    if path.is_empty() {
        return Err(Error::InvalidInput("the path needs at least one point".into()));
    }
    let cells = gradient_cells(sc, regime);
    let u0 = coordinates(sc, regime, x0)?;
    let us: Vec<Vec<f64>> = path.iter().map(|x| coordinates(sc, regime, x)).collect::<Result<_>>()?;
    let sums: Vec<Arc<PointSummary>> = path.iter().map(|x| src.summary(x)).collect::<Result<_>>()?;
    let gs: Vec<Vec<Estimate>> = sums.iter().map(|s| cells.iter().map(|(c, _)| cell(s, *c)).collect()).collect();
    let last = path.len() - 1;
    let dot = |g: &[f64], u: &[f64]| g.iter().zip(u).map(|(a, b)| a * b).sum::<f64>();
    let lhs = dot(g0, &u0) - dot(g0, &us[last]);
    // rhs = g1 u0 - g_last u_last - sum_{s<last} (g_s - g_{s+1}) u_s
    let mut terms: Vec<(f64, &Estimate)> = Vec::new();
    for (ci, (_, w)) in cells.iter().enumerate() {
        terms.push((w * u0[ci], &gs[0][ci]));
        terms.push((-w * us[last][ci], &gs[last][ci]));
        for s in 0..last {
            terms.push((-w * us[s][ci], &gs[s][ci]));
            terms.push((w * us[s][ci], &gs[s + 1][ci]));
        }
    }
    let rhs = Estimate::lin(&terms);
    let gap = Estimate {
        value: lhs - rhs.value,
        se: rhs.se,
        draws: rhs.draws.as_ref().map(|d| d.iter().map(|v| lhs - v).collect()),
    };
    Ok(BoundEvaluation { lhs, rhs, gap })
}

/// Cyclic monotonicity of the gradient of mean indirect utility along the
/// cycle `x^0 -> x^{S-1} -> ... -> x^1 -> x^0`:
/// `g_0 (u_0 - u_{S-1}) >= g_1 u_0 - g_{S-1} u_{S-1} - sum_{s=1}^{S-2} (g_s - g_{s+1}) u_s`.
pub fn counterfactual_bound(src: &dyn MeanSource, query: &CounterfactualQuery<Vec<Vec<f64>>>) -> Result<BoundEvaluation> {
    let sc = src.scenario();
    let mu = sc.prior.probs();
    let (k, j) = (sc.num_alternatives(), sc.num_states());
    if query.candidate.len() != k || query.candidate.iter().any(|r| r.len() != j) {
        return Err(Error::InvalidInput(format!("candidate must be {k} x {j}")));
    }
    let g0: Vec<f64> = query
        .candidate
        .iter()
        .flat_map(|row| row.iter().zip(mu).map(|(p, m)| p * m))
        .collect();
    bound_impl(src, Regime::State, &query.x0, &query.path, &g0)
}

pub fn market_bound(src: &dyn MeanSource, query: &CounterfactualQuery<Vec<f64>>) -> Result<BoundEvaluation> {
    let k = src.scenario().num_alternatives();
    if query.candidate.len() != k {
        return Err(Error::InvalidInput(format!("candidate must have {k} entries")));
    }
    bound_impl(src, Regime::Market, &query.x0, &query.path, &query.candidate)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalizationConfig {
    pub alternative: String,
    pub regressor: usize,
    pub state: Option<String>,
    #[serde(default = "minus_one")]
    pub sign: f64,
    /// Grid index of the reference point.
    #[serde(default)]
    pub reference: usize,
}

fn minus_one() -> f64 {
    -1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundConfig {
    pub x0: Vec<Vec<f64>>,
    /// Grid indices of `x^1 .. x^{S-1}`.
    pub path: Vec<usize>,
    /// Hypothesized means at `x0`; simulated when absent.
    pub candidate: Option<Vec<Vec<f64>>>,
}

/// `[identify]` section of a scenario file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentifyConfig {
    pub normalization: NormalizationConfig,
    /// Pairs of grid indices for welfare differences.
    #[serde(default)]
    pub welfare: Vec<[usize; 2]>,
    #[serde(default)]
    pub bounds: Vec<BoundConfig>,
    /// Utility tilt for the Roy and Slutsky diagnostics.
    #[serde(default = "default_tilt")]
    pub tilt_step: f64,
}

fn default_tilt() -> f64 {
    1e-2
}

#[derive(Clone, Debug, PartialEq)]
pub struct RatioRow {
    pub x_id: usize,
    pub a: usize,
    pub p: usize,
    pub b: usize,
    pub q: usize,
    pub estimate: RatioEstimate,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WelfareRow {
    pub from: usize,
    pub to: usize,
    pub difference: WelfareDifference,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundRow {
    pub query: usize,
    pub evaluation: BoundEvaluation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Diagnostics {
    /// Signed Roy residual per coordinate at the reference point.
    pub roy: Vec<Estimate>,
    pub slutsky: Option<SlutskyReport>,
    /// Whether the state loadings differ across alternatives.
    pub loadings_distinct: Option<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdentificationReport {
    pub regime: Regime,
    pub state: Option<usize>,
    pub ratios: Vec<RatioRow>,
    pub recovered: RecoveredUtilities,
    pub welfare: Vec<WelfareRow>,
    pub bounds: Vec<BoundRow>,
    pub diagnostics: Diagnostics,
}

/// Grid indices whose coordinates are all strictly inside their axes.
pub fn interior_points(sc: &Scenario) -> Vec<usize> {
    let Some(axes) = &sc.axes else {
        return Vec::new();
    };
    sc.grid
        .iter()
        .enumerate()
        .filter(|(_, x)| {
            x.0.iter().enumerate().all(|(a, xa)| {
                xa.iter().enumerate().all(|(p, v)| {
                    let ax = &axes[a][p];
                    *v > ax[0] && *v < ax[ax.len() - 1]
                })
            })
        })
        .map(|(i, _)| i)
        .collect()
}

/// Whether the latent-state loadings are pairwise distinct vectors.
pub fn loadings_distinct(spec: &UtilitySpec) -> Option<bool> {
    match spec {
        UtilitySpec::AdditiveLatentState { loading, .. } => Some(
            (0..loading.len()).all(|a| (a + 1..loading.len()).all(|b| loading[a] != loading[b])),
        ),
        _ => None,
    }
}

/// Runs the whole pipeline: ratios at interior grid points for every pair of
/// regressors of distinct alternatives, utility recovery, the requested welfare
/// differences and bounds, and tilt diagnostics when the source can tilt.
pub fn identify(src: &dyn MeanSource, regime: Regime, norm: &Normalization, cfg: &IdentifyConfig) -> Result<IdentificationReport> {
    let sc = src.scenario();
    check_regime(sc, regime)?;
    let state = match regime {
        Regime::State => norm.state,
        Regime::Market => None,
    };
    let dims = sc.dims();
    let regs: Vec<(usize, usize)> = (0..dims.len()).flat_map(|a| (0..dims[a]).map(move |p| (a, p))).collect();
    let mut ratios = Vec::new();
    for x_id in interior_points(sc) {
        let x = &sc.grid[x_id];
        for &(a, p) in &regs {
            for &(b, q) in &regs {
                if a == b {
                    continue;
                }
                if let Some(j) = state {
                    if sc.utility.regressor_state(a, p) != Some(j) || sc.utility.regressor_state(b, q) != Some(j) {
                        continue;
                    }
                }
                let estimate = ratio_impl(src, x, (a, p), (b, q), state)?;
                ratios.push(RatioRow { x_id, a, p, b, q, estimate });
            }
        }
    }
    let recovered = match regime {
        Regime::State => recover_utilities(src, norm)?,
        Regime::Market => market_recover(src, norm)?,
    };
    let mut welfare = Vec::new();
    for [from, to] in &cfg.welfare {
        let (x, x1) = grid_pair(sc, *from, *to)?;
        welfare.push(WelfareRow {
            from: *from,
            to: *to,
            difference: welfare_difference_at(src, regime, x, x1)?,
        });
    }
    let mut bounds = Vec::new();
    for (i, b) in cfg.bounds.iter().enumerate() {
        let x0 = CovariatePoint(b.x0.clone());
        let path = b
            .path
            .iter()
            .map(|id| {
                sc.grid
                    .get(*id)
                    .cloned()
                    .ok_or_else(|| Error::PathPointMissing(format!("grid index {id}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let g0: Vec<f64> = match &b.candidate {
            Some(c) => match regime {
                Regime::State => c
                    .iter()
                    .flat_map(|row| row.iter().zip(sc.prior.probs()).map(|(p, m)| p * m))
                    .collect(),
                Regime::Market => c.iter().map(|row| row.first().copied().unwrap_or(f64::NAN)).collect(),
            },
            None => {
                let s = src.summary(&x0)?;
                gradient_cells(sc, regime).iter().map(|(c, w)| w * cell(&s, *c).value).collect()
            }
        };
        bounds.push(BoundRow {
            query: i,
            evaluation: bound_impl(src, regime, &x0, &path, &g0)?,
        });
    }
    let mut roy = Vec::new();
    let mut slutsky = None;
    let n = gradient_cells(sc, regime).len();
    let mut tilts = true;
    for c in 0..n {
        match roy_residual_at(src, regime, &norm.reference, c, cfg.tilt_step) {
            Ok(e) => roy.push(e),
            Err(Error::TiltUnavailable) => {
                tilts = false;
                break;
            }
            Err(e) => return Err(e),
        }
    }
    if tilts {
        slutsky = Some(slutsky_check_at(src, regime, &norm.reference, cfg.tilt_step)?);
    }
    Ok(IdentificationReport {
        regime,
        state,
        ratios,
        recovered,
        welfare,
        bounds,
        diagnostics: Diagnostics {
            roy,
            slutsky,
            loadings_distinct: loadings_distinct(&sc.utility),
        },
    })
}

fn grid_pair(sc: &Scenario, a: usize, b: usize) -> Result<(&CovariatePoint, &CovariatePoint)> {
    let get = |i: usize| {
        sc.grid
            .get(i)
            .ok_or_else(|| Error::config("identify.welfare", format!("no grid point {i}")))
    };
    Ok((get(a)?, get(b)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paired_combination_matches_direct_per_draw_difference() {
        let a = Estimate::with_draws(2.0, vec![1.0, 2.0, 3.0]);
        let b = Estimate::with_draws(1.0, vec![0.5, 1.0, 1.5]);
        let d = Estimate::lin(&[(1.0, &a), (-2.0, &b)]);
        assert_eq!(d.value, 0.0);
        assert_eq!(d.se, 0.0);
        let r = a.ratio(&b);
        assert_eq!(r.value, 2.0);
        assert!(r.se < 1e-15);
    }

    #[test]
    fn unpaired_ratio_uses_delta_method() {
        let a = Estimate { value: 2.0, se: 0.2, draws: None };
        let b = Estimate { value: 4.0, se: 0.4, draws: None };
        let r = a.ratio(&b);
        assert!((r.se - 0.5 * (0.02f64).sqrt()).abs() < 1e-15);
        assert_eq!(a.mul(&b).se, 2.0 * 0.4 + 4.0 * 0.2);
    }

    #[test]
    fn staircase_grid_enumerates_products() {
        let g = product_grid(&[vec![0.0, 1.0], vec![2.0, 3.0, 4.0]]);
        assert_eq!(g.len(), 6);
        assert_eq!(g[4], vec![1.0, 3.0]);
        assert_eq!(product_grid(&[]), vec![Vec::<f64>::new()]);
    }
}
